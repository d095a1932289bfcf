//! Numerical verification of the activation-fusion properties that motivate
//! the two-branch discriminator, plus gradient-weighted class activation
//! maps for discriminator introspection.
//!
//! The central fact: with ReLU, summing branch activations dominates
//! activating the concatenated pre-activation elementwise,
//! relu(Ux+c) + relu(Vy+d) >= relu(Ux+Vy+c+d). For activations with a
//! negative branch a triangle-style bound holds when both branch
//! activations agree in sign (CLI name `lemma1`), and leaky ReLU gives
//! concrete sign-disagreeing instances where the fused magnitude still
//! exceeds the concatenated one.

use std::path::Path;

use rand::Rng as _;

use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::netpbm;
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

pub const INEQ_TOL: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnalysisActivation {
    Relu,
    LeakyRelu(f32),
    Elu,
}

impl AnalysisActivation {
    pub fn apply(&self, x: f32) -> f32 {
        match self {
            AnalysisActivation::Relu => x.max(0.0),
            AnalysisActivation::LeakyRelu(alpha) => {
                if x > 0.0 {
                    x
                } else {
                    alpha * x
                }
            }
            AnalysisActivation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
        }
    }

    pub fn parse(s: &str, alpha: f32) -> Result<AnalysisActivation> {
        match s {
            "relu" => Ok(AnalysisActivation::Relu),
            "leaky_relu" => Ok(AnalysisActivation::LeakyRelu(alpha)),
            "elu" => Ok(AnalysisActivation::Elu),
            other => Err(Error::Config(format!(
                "unknown activation '{other}' (expected relu, leaky_relu, elu)"
            ))),
        }
    }
}

/// One split-weight instance: the concatenated layer W=[U V], b=c+d acting
/// on h=[x y] versus the two branch halves acting separately.
#[derive(Debug, Clone)]
pub struct FusionInstance {
    pub x: Vec<f32>,
    pub y: Vec<f32>,
    /// Row-major m x len(x).
    pub u: Vec<f32>,
    /// Row-major m x len(y).
    pub v: Vec<f32>,
    pub c: Vec<f32>,
    pub d: Vec<f32>,
    pub activation: AnalysisActivation,
}

fn matvec(mat: &[f32], rows: usize, cols: usize, x: &[f32]) -> Vec<f32> {
    (0..rows)
        .map(|i| {
            mat[i * cols..(i + 1) * cols]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

impl FusionInstance {
    pub fn rows(&self) -> usize {
        self.c.len()
    }

    /// Ux + c.
    pub fn branch_pre_x(&self) -> Vec<f32> {
        let mut out = matvec(&self.u, self.rows(), self.x.len(), &self.x);
        for (o, c) in out.iter_mut().zip(&self.c) {
            *o += c;
        }
        out
    }

    /// Vy + d.
    pub fn branch_pre_y(&self) -> Vec<f32> {
        let mut out = matvec(&self.v, self.rows(), self.y.len(), &self.y);
        for (o, d) in out.iter_mut().zip(&self.d) {
            *o += d;
        }
        out
    }

    /// Wh + b = (Ux+c) + (Vy+d).
    pub fn concat_pre(&self) -> Vec<f32> {
        self.branch_pre_x()
            .iter()
            .zip(self.branch_pre_y())
            .map(|(a, b)| a + b)
            .collect()
    }

    /// Sum of branch activations (the fused signal).
    pub fn fused_signal(&self) -> Vec<f32> {
        self.branch_pre_x()
            .iter()
            .zip(self.branch_pre_y())
            .map(|(&a, b)| self.activation.apply(a) + self.activation.apply(b))
            .collect()
    }

    /// Activation of the concatenated pre-activation.
    pub fn concat_signal(&self) -> Vec<f32> {
        self.concat_pre()
            .iter()
            .map(|&p| self.activation.apply(p))
            .collect()
    }

    /// Standard-normal instance with `rows` outputs and `px`/`py` inputs.
    pub fn random(
        rows: usize,
        px: usize,
        py: usize,
        activation: AnalysisActivation,
        rng: &mut Rng,
    ) -> FusionInstance {
        let mut draw = |n: usize| -> Vec<f32> {
            (0..n)
                .map(|_| {
                    // Box-Muller from two uniform draws.
                    let u1: f32 = rng.gen_range(1e-7f32..1.0);
                    let u2: f32 = rng.gen_range(0.0f32..1.0);
                    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
                })
                .collect()
        };
        FusionInstance {
            x: draw(px),
            y: draw(py),
            u: draw(rows * px),
            v: draw(rows * py),
            c: draw(rows),
            d: draw(rows),
            activation,
        }
    }

    /// Scalar instance with prescribed branch pre-activations.
    pub fn from_scalars(ux_c: f32, vy_d: f32, activation: AnalysisActivation) -> FusionInstance {
        FusionInstance {
            x: vec![1.0],
            y: vec![1.0],
            u: vec![ux_c],
            v: vec![vy_d],
            c: vec![0.0],
            d: vec![0.0],
            activation,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InequalityCheck {
    pub holds: bool,
    /// fused - concat per output element.
    pub margin: Vec<f32>,
}

/// ReLU-only dominance check: fused >= concat - tol elementwise.
pub fn check_fusion_inequality(inst: &FusionInstance) -> Result<InequalityCheck> {
    if inst.activation != AnalysisActivation::Relu {
        return Err(Error::Config(
            "fusion inequality check requires the relu activation".into(),
        ));
    }
    let fused = inst.fused_signal();
    let concat = inst.concat_signal();
    let margin: Vec<f32> = fused.iter().zip(&concat).map(|(f, c)| f - c).collect();
    let holds = margin.iter().all(|&m| m >= -INEQ_TOL);
    Ok(InequalityCheck { holds, margin })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignBoundCheck {
    /// True when both branch activations agree in sign elementwise.
    pub applicable: bool,
    /// When applicable: |act(concat)| <= |act(x-branch)| + |act(y-branch)|.
    pub holds: bool,
}

/// Triangle-style magnitude bound for sign-agreeing branch activations
/// (negative-branch activations such as leaky ReLU and ELU). Exposed on the
/// CLI as `lemma1`.
pub fn check_sign_agreement(inst: &FusionInstance) -> SignBoundCheck {
    let ax: Vec<f32> = inst
        .branch_pre_x()
        .iter()
        .map(|&p| inst.activation.apply(p))
        .collect();
    let ay: Vec<f32> = inst
        .branch_pre_y()
        .iter()
        .map(|&p| inst.activation.apply(p))
        .collect();
    let applicable = ax
        .iter()
        .zip(&ay)
        .all(|(a, b)| sign_of(*a) == sign_of(*b));
    if !applicable {
        return SignBoundCheck {
            applicable: false,
            holds: false,
        };
    }
    let concat = inst.concat_signal();
    let holds = concat
        .iter()
        .zip(ax.iter().zip(&ay))
        .all(|(cc, (a, b))| cc.abs() <= a.abs() + b.abs() + INEQ_TOL);
    SignBoundCheck {
        applicable: true,
        holds,
    }
}

fn sign_of(v: f32) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Does any output element have strictly opposite branch signs with the
/// fused magnitude exceeding the concatenated one?
pub fn counterexample_qualifies(inst: &FusionInstance) -> bool {
    let px = inst.branch_pre_x();
    let py = inst.branch_pre_y();
    let concat = inst.concat_signal();
    px.iter()
        .zip(&py)
        .zip(&concat)
        .any(|((&a, &b), &cc)| {
            let (sa, sb) = (inst.activation.apply(a), inst.activation.apply(b));
            sign_of(sa) * sign_of(sb) == -1 && (sa + sb).abs() > cc.abs() + INEQ_TOL
        })
}

/// Search random leaky-ReLU instances for a sign-disagreeing case where the
/// fused magnitude beats concatenation.
pub fn find_leaky_counterexample(
    alpha: f32,
    rng: &mut Rng,
    max_trials: usize,
) -> Result<Option<FusionInstance>> {
    if !(0.0..1.0).contains(&alpha) || alpha == 0.0 {
        return Err(Error::Config(format!("alpha {alpha} outside (0, 1)")));
    }
    let activation = AnalysisActivation::LeakyRelu(alpha);
    for _ in 0..max_trials {
        let inst = FusionInstance::random(4, 6, 6, activation, rng);
        if counterexample_qualifies(&inst) {
            return Ok(Some(inst));
        }
    }
    Ok(None)
}

/// The pinned regression instance: branch pre-activations +1 and -2. For
/// alpha 0.2 the fused signal is 0.6 while concatenation gives -0.2.
pub fn counterexample_fixture(alpha: f32) -> FusionInstance {
    FusionInstance::from_scalars(1.0, -2.0, AnalysisActivation::LeakyRelu(alpha))
}

// Split-weight analysis of trained concatenation discriminators.

/// The halves of a concatenation layer: x-side weight and bias, y-side
/// weight and bias.
pub struct DecomposedLayer {
    pub u_weight: Tensor,
    pub v_weight: Tensor,
    pub c_bias: Tensor,
    pub d_bias: Tensor,
}

/// Split a concat-layer conv weight (C_out, C_x + C_y, kH, kW) into its x
/// and y halves at `split`; the bias splits evenly (the inequality holds
/// for every split of b into c + d).
pub fn decompose_concat_layer_at(
    weight: &Tensor,
    bias: &Tensor,
    split: usize,
) -> Result<DecomposedLayer> {
    let [c_out, c_in, kh, kw] = weight.dims();
    if split == 0 || split >= c_in {
        return Err(Error::Config(format!(
            "split {split} outside conv input channels {c_in}"
        )));
    }
    let w = weight.data_ref();
    let take = |lo: usize, hi: usize| -> Vec<f32> {
        let mut out = Vec::with_capacity(c_out * (hi - lo) * kh * kw);
        for co in 0..c_out {
            let base = (co * c_in + lo) * kh * kw;
            out.extend_from_slice(&w[base..base + (hi - lo) * kh * kw]);
        }
        out
    };
    let u_weight = Tensor::from_vec(take(0, split), [c_out, split, kh, kw])?;
    let v_weight = Tensor::from_vec(take(split, c_in), [c_out, c_in - split, kh, kw])?;
    let half: Vec<f32> = bias.data_ref().iter().map(|b| b / 2.0).collect();
    let c_bias = Tensor::from_vec(half.clone(), bias.dims())?;
    let d_bias = Tensor::from_vec(half, bias.dims())?;
    Ok(DecomposedLayer {
        u_weight,
        v_weight,
        c_bias,
        d_bias,
    })
}

/// Even-split variant; errors when the input channels cannot split evenly.
pub fn decompose_concat_layer(weight: &Tensor, bias: &Tensor) -> Result<DecomposedLayer> {
    let c_in = weight.dims()[1];
    if c_in % 2 != 0 {
        return Err(Error::Config(format!(
            "conv input channels {c_in} do not split evenly; pass the split point explicitly"
        )));
    }
    decompose_concat_layer_at(weight, bias, c_in / 2)
}

/// Evaluate the ReLU dominance inequality on a decomposed concat layer over
/// real (x, y) pairs: relu of each branch convolution summed, against relu
/// of the concatenated convolution. Returns (violations, worst_margin).
pub fn check_decomposed_on_samples(
    layer: &DecomposedLayer,
    weight: &Tensor,
    bias: &Tensor,
    samples: &[(Tensor, Tensor)],
    stride: usize,
    pad: usize,
) -> Result<(usize, f32)> {
    let mut violations = 0usize;
    let mut worst = f32::INFINITY;
    for (x, y) in samples {
        let branch_x = x.conv2d(&layer.u_weight, &layer.c_bias, stride, pad)?.relu();
        let branch_y = y.conv2d(&layer.v_weight, &layer.d_bias, stride, pad)?.relu();
        let fused = branch_x.add(&branch_y)?;
        let concat = x
            .concat_channels(y)?
            .conv2d(weight, bias, stride, pad)?
            .relu();
        for (f, c) in fused.data_ref().iter().zip(concat.data_ref().iter()) {
            let margin = f - c;
            worst = worst.min(margin);
            if margin < -INEQ_TOL {
                violations += 1;
            }
        }
    }
    Ok((violations, worst))
}

// Grad-CAM

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamTarget {
    RealScore,
    FakeScore,
}

impl CamTarget {
    pub fn parse(s: &str) -> Result<CamTarget> {
        match s {
            "real" => Ok(CamTarget::RealScore),
            "fake" => Ok(CamTarget::FakeScore),
            other => Err(Error::Config(format!(
                "unknown grad-cam target '{other}' (expected real, fake)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CamMap {
    /// Row-major heatmap in [0, 1]; max is 1 unless identically zero.
    pub heatmap: Vec<f32>,
    pub width: usize,
    pub height: usize,
    pub source_layer: String,
    pub target: CamTarget,
}

/// Channel-gradient-weighted positive combination of feature maps: weights
/// are the spatial mean of d(score)/d(feature) per channel.
pub fn cam_from_features(
    features: &[f32],
    grad: &[f32],
    channels: usize,
    height: usize,
    width: usize,
) -> Vec<f32> {
    let plane = height * width;
    let weights: Vec<f32> = (0..channels)
        .map(|c| grad[c * plane..(c + 1) * plane].iter().sum::<f32>() / plane as f32)
        .collect();
    let mut cam = vec![0.0f32; plane];
    for (c, w) in weights.iter().enumerate() {
        for (acc, f) in cam.iter_mut().zip(&features[c * plane..(c + 1) * plane]) {
            *acc += w * f;
        }
    }
    for v in cam.iter_mut() {
        *v = v.max(0.0);
    }
    cam
}

fn normalize_to_unit(cam: &mut [f32]) {
    let max = cam.iter().fold(0.0f32, |a, &b| a.max(b));
    if max > 0.0 {
        for v in cam.iter_mut() {
            *v /= max;
        }
    }
}

fn upsample_nearest(map: &[f32], h: usize, w: usize, new_h: usize, new_w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; new_h * new_w];
    for oy in 0..new_h {
        let iy = oy * h / new_h;
        for ox in 0..new_w {
            let ix = ox * w / new_w;
            out[oy * new_w + ox] = map[iy * w + ix];
        }
    }
    out
}

/// Localization map for the mean patch logit of `target`, taken at a named
/// feature layer of the discriminator and upsampled to the input size.
pub fn grad_cam(
    disc: &mut Discriminator,
    x: &Tensor,
    y: &Tensor,
    layer: &str,
    target: CamTarget,
) -> Result<CamMap> {
    let [n, _, in_h, in_w] = x.dims();
    if n != 1 {
        return Err(Error::Config("grad-cam expects a single sample".into()));
    }
    let mut rng = stream(0, "gradcam.unused");
    let (logits, traced) = disc.forward_traced(x, y, false, &mut rng)?;
    let feature = traced
        .iter()
        .find(|(name, _)| name == layer)
        .map(|(_, t)| t.clone())
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown layer '{layer}'; available: {}",
                disc.layer_names().join(", ")
            ))
        })?;

    let score = match target {
        CamTarget::RealScore => logits.mean_all(),
        CamTarget::FakeScore => logits.mean_all().neg(),
    };
    score.backward()?;
    let grad = feature.grad().ok_or_else(|| {
        Error::Autodiff(format!("layer '{layer}' received no gradient"))
    })?;

    let [_, c, h, w] = feature.dims();
    let mut cam = cam_from_features(&feature.data_ref(), &grad, c, h, w);
    normalize_to_unit(&mut cam);
    let heatmap = upsample_nearest(&cam, h, w, in_h, in_w);
    Ok(CamMap {
        heatmap,
        width: in_w,
        height: in_h,
        source_layer: layer.to_string(),
        target,
    })
}

impl CamMap {
    /// Fraction of heatmap mass falling on non-background pixels.
    pub fn foreground_mass_fraction(&self, labels: &[u8]) -> Result<f64> {
        if labels.len() != self.heatmap.len() {
            return Err(Error::Data(format!(
                "label map has {} pixels, heatmap {}",
                labels.len(),
                self.heatmap.len()
            )));
        }
        let total: f64 = self.heatmap.iter().map(|&v| f64::from(v)).sum();
        if total == 0.0 {
            return Ok(0.0);
        }
        let fg: f64 = self
            .heatmap
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l != 0)
            .map(|(&v, _)| f64::from(v))
            .sum();
        Ok(fg / total)
    }

    /// 8-bit P5 rendering of the heatmap.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .heatmap
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        netpbm::write_pgm8(path, self.width, self.height, &bytes)
    }
}

// Sweeps used by both the CLI and the acceptance suite.

#[derive(Debug, Clone, Copy)]
pub struct SweepOutcome {
    pub trials: usize,
    pub applicable: usize,
    pub violations: usize,
    pub worst_margin: f32,
}

/// Random-instance sweep of the ReLU dominance inequality.
pub fn sweep_fusion_inequality(trials: usize, seed: u64) -> Result<SweepOutcome> {
    let mut rng = stream(seed, "analysis.inequality");
    let mut violations = 0;
    let mut worst = f32::INFINITY;
    for _ in 0..trials {
        let inst = FusionInstance::random(4, 6, 6, AnalysisActivation::Relu, &mut rng);
        let check = check_fusion_inequality(&inst)?;
        if !check.holds {
            violations += 1;
        }
        for m in check.margin {
            worst = worst.min(m);
        }
    }
    Ok(SweepOutcome {
        trials,
        applicable: trials,
        violations,
        worst_margin: worst,
    })
}

/// Random-instance sweep of the sign-agreement bound for one activation.
pub fn sweep_sign_agreement(
    activation: AnalysisActivation,
    trials: usize,
    seed: u64,
) -> Result<SweepOutcome> {
    if activation == AnalysisActivation::Relu {
        return Err(Error::Config(
            "the sign-agreement bound targets negative-branch activations".into(),
        ));
    }
    let mut rng = stream(seed, "analysis.lemma1");
    let mut applicable = 0;
    let mut violations = 0;
    for _ in 0..trials {
        // Single-output instances keep the elementwise applicability gate
        // from rejecting nearly every draw at higher dimension.
        let inst = FusionInstance::random(1, 6, 6, activation, &mut rng);
        let check = check_sign_agreement(&inst);
        if check.applicable {
            applicable += 1;
            if !check.holds {
                violations += 1;
            }
        }
    }
    Ok(SweepOutcome {
        trials,
        applicable,
        violations,
        worst_margin: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inequality_hand_cases() {
        let inst = FusionInstance::from_scalars(2.0, -3.0, AnalysisActivation::Relu);
        let check = check_fusion_inequality(&inst).unwrap();
        assert!(check.holds);
        assert_eq!(check.margin, vec![2.0]);
        assert_eq!(inst.concat_signal(), vec![0.0]);
        assert_eq!(inst.fused_signal(), vec![2.0]);

        let inst = FusionInstance::from_scalars(1.0, 1.0, AnalysisActivation::Relu);
        let check = check_fusion_inequality(&inst).unwrap();
        assert!(check.holds);
        assert_eq!(check.margin, vec![0.0]);
    }

    #[test]
    fn inequality_requires_relu() {
        let inst = FusionInstance::from_scalars(1.0, 1.0, AnalysisActivation::Elu);
        assert!(check_fusion_inequality(&inst).is_err());
    }

    #[test]
    fn inequality_random_sweep_has_zero_violations() {
        let outcome = sweep_fusion_inequality(10_000, 1).unwrap();
        assert_eq!(outcome.violations, 0, "worst {}", outcome.worst_margin);
        assert!(outcome.worst_margin >= -INEQ_TOL);
    }

    #[test]
    fn sign_bound_hand_cases() {
        let act = AnalysisActivation::LeakyRelu(0.2);
        // Positive agreement: |act(3)| = 3 <= 1 + 2.
        let inst = FusionInstance::from_scalars(1.0, 2.0, act);
        assert_eq!(
            check_sign_agreement(&inst),
            SignBoundCheck { applicable: true, holds: true }
        );
        // Negative agreement is tight: |act(-3)| = 0.6 = 0.2 + 0.4.
        let inst = FusionInstance::from_scalars(-1.0, -2.0, act);
        assert_eq!(
            check_sign_agreement(&inst),
            SignBoundCheck { applicable: true, holds: true }
        );
        // Disagreement gates applicability off.
        let inst = FusionInstance::from_scalars(1.0, -2.0, act);
        assert!(!check_sign_agreement(&inst).applicable);
    }

    #[test]
    fn sign_bound_sweeps_clean_for_leaky_and_elu() {
        for activation in [
            AnalysisActivation::LeakyRelu(0.01),
            AnalysisActivation::LeakyRelu(0.2),
            AnalysisActivation::Elu,
        ] {
            let outcome = sweep_sign_agreement(activation, 10_000, 2).unwrap();
            assert!(outcome.applicable > 100, "gate too tight: {outcome:?}");
            assert_eq!(outcome.violations, 0, "{activation:?}: {outcome:?}");
        }
    }

    #[test]
    fn pinned_counterexample_behaves_as_documented() {
        let inst = counterexample_fixture(0.2);
        let fused = inst.fused_signal();
        let concat = inst.concat_signal();
        assert!((fused[0] - 0.6).abs() < 1e-6, "{}", fused[0]);
        assert!((concat[0] + 0.2).abs() < 1e-6, "{}", concat[0]);
        assert!(counterexample_qualifies(&inst));
    }

    #[test]
    fn counterexample_search_succeeds_within_a_thousand_trials() {
        let mut rng = stream(3, "cex");
        let found = find_leaky_counterexample(0.2, &mut rng, 1000).unwrap();
        let inst = found.expect("search should find a qualifying instance");
        assert!(counterexample_qualifies(&inst));
    }

    #[test]
    fn relu_never_qualifies_as_counterexample() {
        let mut rng = stream(4, "cex.relu");
        for _ in 0..2000 {
            let inst = FusionInstance::random(4, 6, 6, AnalysisActivation::Relu, &mut rng);
            assert!(!counterexample_qualifies(&inst));
        }
        assert!(find_leaky_counterexample(0.0, &mut rng, 10).is_err());
    }

    #[test]
    fn decompose_splits_and_reconstructs() {
        // W = [[1, 2]], b = [4] as a 1x1 convolution over 2 channels.
        let w = Tensor::from_vec(vec![1.0, 2.0], [1, 2, 1, 1]).unwrap();
        let b = Tensor::from_vec(vec![4.0], [1, 1, 1, 1]).unwrap();
        let dec = decompose_concat_layer(&w, &b).unwrap();
        assert_eq!(dec.u_weight.to_vec(), vec![1.0]);
        assert_eq!(dec.v_weight.to_vec(), vec![2.0]);
        assert_eq!(dec.c_bias.to_vec(), vec![2.0]);
        assert_eq!(dec.d_bias.to_vec(), vec![2.0]);

        // Ux + Vy + c + d == W[x y] + b for random inputs.
        let mut rng = stream(5, "dec");
        let w = Tensor::from_vec(
            (0..3 * 4 * 9).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            [3, 4, 3, 3],
        )
        .unwrap();
        let b = Tensor::from_vec(vec![0.3, -0.7, 0.1], [1, 3, 1, 1]).unwrap();
        let dec = decompose_concat_layer(&w, &b).unwrap();
        let x = Tensor::from_vec(
            (0..2 * 25).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            [1, 2, 5, 5],
        )
        .unwrap();
        let y = Tensor::from_vec(
            (0..2 * 25).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            [1, 2, 5, 5],
        )
        .unwrap();
        let split_sum = x
            .conv2d(&dec.u_weight, &dec.c_bias, 1, 1)
            .unwrap()
            .add(&y.conv2d(&dec.v_weight, &dec.d_bias, 1, 1).unwrap())
            .unwrap();
        let full = x
            .concat_channels(&y)
            .unwrap()
            .conv2d(&w, &b, 1, 1)
            .unwrap();
        for (s, f) in split_sum.to_vec().iter().zip(full.to_vec().iter()) {
            assert!((s - f).abs() < 1e-5, "{s} vs {f}");
        }
    }

    #[test]
    fn decompose_rejects_odd_split_without_explicit_point() {
        let w = Tensor::zeros([1, 3, 1, 1]);
        let b = Tensor::zeros([1, 1, 1, 1]);
        assert!(decompose_concat_layer(&w, &b).is_err());
        assert!(decompose_concat_layer_at(&w, &b, 1).is_ok());
        assert!(decompose_concat_layer_at(&w, &b, 3).is_err());
    }

    #[test]
    fn cam_math_reduces_to_relu_of_features_for_constant_gradient() {
        // Single channel, positive constant gradient: weights collapse to
        // that constant, so the map is proportional to relu(features).
        let features = vec![0.5, -1.0, 2.0, 0.0];
        let grad = vec![0.7; 4];
        let cam = cam_from_features(&features, &grad, 1, 2, 2);
        for (c, f) in cam.iter().zip(&features) {
            assert!((c - 0.7 * f.max(0.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_features_give_zero_map_without_normalization() {
        let features = vec![0.0; 8];
        let grad = vec![1.0; 8];
        let mut cam = cam_from_features(&features, &grad, 2, 2, 2);
        normalize_to_unit(&mut cam);
        assert!(cam.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_cam_on_discriminator_respects_contracts() {
        use crate::discriminator::{build_discriminator, DiscriminatorKind};
        let mut d = build_discriminator(DiscriminatorKind::Fusion4, 3, 3, true, 6).unwrap();
        let x = Tensor::from_vec(
            (0..3 * 256).map(|i| ((i % 17) as f32 - 8.0) / 8.0).collect(),
            [1, 3, 16, 16],
        )
        .unwrap();
        let y = Tensor::from_vec(
            (0..3 * 256).map(|i| ((i % 13) as f32 - 6.0) / 6.0).collect(),
            [1, 3, 16, 16],
        )
        .unwrap();
        let cam = grad_cam(&mut d, &x, &y, "trunk3", CamTarget::RealScore).unwrap();
        assert_eq!((cam.width, cam.height), (16, 16));
        assert!(cam.heatmap.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let max = cam.heatmap.iter().fold(0.0f32, |a, &b| a.max(b));
        assert!(max == 1.0 || cam.heatmap.iter().all(|&v| v == 0.0));

        match grad_cam(&mut d, &x, &y, "nonexistent", CamTarget::RealScore) {
            Err(Error::Config(msg)) => {
                assert!(msg.contains("trunk0"), "should list layers: {msg}")
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn mass_fraction_and_pgm_output() {
        let cam = CamMap {
            heatmap: vec![0.0, 1.0, 0.5, 0.0],
            width: 2,
            height: 2,
            source_layer: "stage0".into(),
            target: CamTarget::RealScore,
        };
        let labels = vec![0u8, 1, 0, 1];
        let frac = cam.foreground_mass_fraction(&labels).unwrap();
        assert!((frac - 1.0 / 1.5).abs() < 1e-12);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cam.pgm");
        cam.write_pgm(&path).unwrap();
        let img = crate::netpbm::read_pgm(&path).unwrap();
        assert_eq!(img.samples, vec![0, 255, 128, 0]);
    }
}
