//! Training report and its line-oriented log format. One
//! `iter=<n> d_loss=<f> g_loss=<f> <metric>=<f>...` line per evaluation,
//! then a summary block. Floats are logged with 9 significant digits, which
//! pins f32 values exactly, so replay comparisons can use the log text
//! verbatim.

use crate::error::{Error, Result};

pub fn fmt_f32(v: f32) -> String {
    format!("{v:.8e}")
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.8e}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub iter: u64,
    pub d_loss: f32,
    pub g_loss: f32,
    pub metrics: Vec<(String, f64)>,
}

impl EvalRecord {
    pub fn to_line(&self) -> String {
        let mut line = format!(
            "iter={} d_loss={} g_loss={}",
            self.iter,
            fmt_f32(self.d_loss),
            fmt_f32(self.g_loss)
        );
        for (k, v) in &self.metrics {
            line.push_str(&format!(" {k}={}", fmt_f64(*v)));
        }
        line
    }

    pub fn parse(line: &str) -> Result<EvalRecord> {
        let mut iter = None;
        let mut d_loss = None;
        let mut g_loss = None;
        let mut metrics = Vec::new();
        for field in line.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("bad log field '{field}'")))?;
            match k {
                "iter" => iter = Some(v.parse::<u64>().map_err(|_| bad(field))?),
                "d_loss" => d_loss = Some(v.parse::<f32>().map_err(|_| bad(field))?),
                "g_loss" => g_loss = Some(v.parse::<f32>().map_err(|_| bad(field))?),
                _ => metrics.push((k.to_string(), v.parse::<f64>().map_err(|_| bad(field))?)),
            }
        }
        Ok(EvalRecord {
            iter: iter.ok_or_else(|| Error::Data(format!("log line missing iter: {line}")))?,
            d_loss: d_loss.ok_or_else(|| Error::Data("log line missing d_loss".into()))?,
            g_loss: g_loss.ok_or_else(|| Error::Data("log line missing g_loss".into()))?,
            metrics,
        })
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| *v)
    }
}

fn bad(field: &str) -> Error {
    Error::Data(format!("bad log field '{field}'"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EvalRecord>,
    pub iters_done: u64,
    pub diverged: bool,
    pub d_updates: u64,
    pub g_updates: u64,
}

impl TrainReport {
    /// Metrics of the last evaluation.
    pub fn final_metrics(&self) -> &[(String, f64)] {
        self.records.last().map(|r| r.metrics.as_slice()).unwrap_or(&[])
    }

    pub fn final_metric(&self, name: &str) -> Option<f64> {
        self.records.last().and_then(|r| r.metric(name))
    }

    /// Full log text: one line per record plus a summary block.
    pub fn to_log(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out.push_str("# summary\n");
        out.push_str(&format!("iters_done={}\n", self.iters_done));
        out.push_str(&format!("diverged={}\n", self.diverged));
        out.push_str(&format!("d_updates={}\n", self.d_updates));
        out.push_str(&format!("g_updates={}\n", self.g_updates));
        out
    }

    pub fn parse(text: &str) -> Result<TrainReport> {
        let mut records = Vec::new();
        let mut iters_done = 0;
        let mut diverged = false;
        let mut d_updates = 0;
        let mut g_updates = 0;
        let mut in_summary = false;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line == "# summary" {
                in_summary = true;
                continue;
            }
            if in_summary {
                if let Some((k, v)) = line.split_once('=') {
                    match k {
                        "iters_done" => {
                            iters_done = v.parse().map_err(|_| bad(line))?;
                        }
                        "diverged" => {
                            diverged = v.parse().map_err(|_| bad(line))?;
                        }
                        "d_updates" => {
                            d_updates = v.parse().map_err(|_| bad(line))?;
                        }
                        "g_updates" => {
                            g_updates = v.parse().map_err(|_| bad(line))?;
                        }
                        _ => {}
                    }
                }
            } else {
                records.push(EvalRecord::parse(line)?);
            }
        }
        Ok(TrainReport {
            records,
            iters_done,
            diverged,
            d_updates,
            g_updates,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits_pin_f32_exactly() {
        for v in [1.382_991_7e-3f32, -7.5e8, 0.1, 2.0 / 3.0, f32::MIN_POSITIVE] {
            let s = fmt_f32(v);
            let back: f32 = s.parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{v} -> {s} -> {back}");
        }
    }

    #[test]
    fn log_round_trip() {
        let report = TrainReport {
            records: vec![
                EvalRecord {
                    iter: 0,
                    d_loss: 1.3862944,
                    g_loss: 0.6931472,
                    metrics: vec![("miou".into(), 0.25), ("pixacc".into(), 0.5)],
                },
                EvalRecord {
                    iter: 50,
                    d_loss: 0.9,
                    g_loss: 1.25,
                    metrics: vec![("miou".into(), 0.375), ("pixacc".into(), 0.625)],
                },
            ],
            iters_done: 50,
            diverged: false,
            d_updates: 50,
            g_updates: 25,
        };
        let text = report.to_log();
        let back = TrainReport::parse(&text).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.final_metric("miou"), Some(0.375));
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(EvalRecord::parse("iter=3 d_loss=oops g_loss=1.0").is_err());
        assert!(EvalRecord::parse("d_loss=1.0 g_loss=1.0").is_err());
    }
}
