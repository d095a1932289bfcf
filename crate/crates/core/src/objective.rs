//! Adversarial and reconstruction losses, the Adam optimizer, and the
//! alternating training loop with its evaluation, logging, and checkpoint
//! hooks.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;

use crate::checkpoint::{self, CheckpointData};
use crate::discriminator::{build_discriminator, Discriminator, DiscriminatorKind};
use crate::error::{Error, Result};
use crate::generator::{build_unet, jitter_augment, UNet, UNetSpec};
use crate::report::{EvalRecord, TrainReport};
use crate::rng::{self, stream, Rng};
use crate::taskgen::{
    classify_colors, decode_depth, depth_metrics, labels_from_logits, mean_iou, pixel_accuracy,
    SamplePair, TaskKind,
};
use crate::tensor::Tensor;

pub const ADAM_EPS: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenLossForm {
    /// -log sigmoid(D(fake)): the form that keeps gradients alive early.
    NonSaturating,
    /// +log(1 - sigmoid(D(fake))): the literal minimax generator term.
    Saturating,
}

impl GenLossForm {
    pub fn name(&self) -> &'static str {
        match self {
            GenLossForm::NonSaturating => "non_saturating",
            GenLossForm::Saturating => "saturating",
        }
    }

    pub fn parse(s: &str) -> Result<GenLossForm> {
        match s {
            "non_saturating" => Ok(GenLossForm::NonSaturating),
            "saturating" => Ok(GenLossForm::Saturating),
            other => Err(Error::Config(format!(
                "unknown g_loss_form '{other}' (expected non_saturating, saturating)"
            ))),
        }
    }
}

/// Every knob of one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lambda_l1: f32,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub d_steps_per_g: u64,
    pub total_iters: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_every: u64,
    /// Checkpoint cadence in iterations; 0 means only the final state.
    pub checkpoint_every: u64,
    pub g_loss_form: GenLossForm,
    pub jitter: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_l1: 100.0,
            lr: 2e-4,
            beta1: 0.0,
            beta2: 0.9,
            d_steps_per_g: 2,
            total_iters: 0,
            batch_size: 4,
            seed: 0,
            eval_every: 100,
            checkpoint_every: 0,
            g_loss_form: GenLossForm::NonSaturating,
            jitter: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.d_steps_per_g == 0 {
            return Err(Error::Config("d_steps_per_g must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if self.lambda_l1 < 0.0 {
            return Err(Error::Config("lambda_l1 must be non-negative".into()));
        }
        Ok(())
    }
}

// Losses

/// Discriminator loss: mean softplus(-z_real) + mean softplus(z_fake),
/// the log-sum-exp-stable form of -log s(z_r) - log(1 - s(z_f)).
pub fn d_loss(logits_real: &Tensor, logits_fake: &Tensor) -> Result<Tensor> {
    logits_real.check_finite("d_loss: real logits")?;
    logits_fake.check_finite("d_loss: fake logits")?;
    let real_term = logits_real.neg().softplus().mean_all();
    let fake_term = logits_fake.softplus().mean_all();
    real_term.add(&fake_term)
}

/// Generator loss: adversarial term (form-dependent) plus lambda * mean
/// absolute reconstruction error.
pub fn g_loss(
    logits_fake: &Tensor,
    y_fake: &Tensor,
    y_real: &Tensor,
    lambda_l1: f32,
    form: GenLossForm,
) -> Result<Tensor> {
    logits_fake.check_finite("g_loss: logits")?;
    y_fake.check_finite("g_loss: generated")?;
    let adversarial = match form {
        GenLossForm::NonSaturating => logits_fake.neg().softplus().mean_all(),
        GenLossForm::Saturating => logits_fake.softplus().mean_all().neg(),
    };
    let l1 = y_real.sub(y_fake)?.abs().mean_all();
    adversarial.add(&l1.scale(lambda_l1))
}

// Optimizer

#[derive(Debug, Clone)]
pub struct AdamSlot {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Bias-corrected Adam over a fixed parameter list.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub t: u64,
    pub slots: Vec<AdamSlot>,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> OptimizerState {
        OptimizerState {
            t: 0,
            slots: params
                .iter()
                .map(|p| AdamSlot {
                    m: vec![0.0; p.len()],
                    v: vec![0.0; p.len()],
                })
                .collect(),
        }
    }
}

/// One Adam update over `params`, consuming their accumulated gradients
/// (missing gradients count as zero). Gradients are cleared afterwards.
pub fn adam_step(params: &[Tensor], state: &mut OptimizerState, cfg: &TrainConfig) -> Result<()> {
    if params.len() != state.slots.len() {
        return Err(Error::Config(format!(
            "adam_step: {} params for {} slots",
            params.len(),
            state.slots.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (param, slot) in params.iter().zip(state.slots.iter_mut()) {
        let Some(grad) = param.grad() else {
            continue;
        };
        if grad.len() != slot.m.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: param.dims(),
                rhs: [slot.m.len(), 1, 1, 1],
            });
        }
        let mut data = param.to_vec();
        for i in 0..data.len() {
            let g = grad[i];
            slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g;
            slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        param.set_data(&data);
    }
    for p in params {
        p.zero_grad();
    }
    Ok(())
}

// Training

/// Everything one training run needs. The caller owns the data; resume
/// passes the identical slices again.
pub struct TrainSetup<'a> {
    pub cfg: &'a TrainConfig,
    pub task: TaskKind,
    pub train_data: &'a [SamplePair],
    pub eval_data: &'a [SamplePair],
    pub gen_spec: &'a UNetSpec,
    pub disc_kind: DiscriminatorKind,
    pub disc_use_sn: bool,
    /// When set, log.txt and ckpt_<iter>.fgan files land here.
    pub out_dir: Option<&'a Path>,
}

impl TrainSetup<'_> {
    fn class_count(&self) -> usize {
        self.train_data.first().map_or(0, |p| p.class_count)
    }

    /// Canonical key=value snapshot. Schedule keys (total_iters,
    /// eval_every, checkpoint_every) are recorded but not identity-bearing.
    pub fn snapshot(&self) -> String {
        let cfg = self.cfg;
        let [_, _, h, w] = self.train_data[0].x.dims();
        let enc: Vec<String> = self
            .gen_spec
            .encoder_channels
            .iter()
            .map(|c| c.to_string())
            .collect();
        let mut lines = vec![
            format!("batch_size={}", cfg.batch_size),
            format!("beta1={}", cfg.beta1),
            format!("beta2={}", cfg.beta2),
            format!("canvas={h}x{w}"),
            format!("checkpoint_every={}", cfg.checkpoint_every),
            format!("class_count={}", self.class_count()),
            format!("d_steps_per_g={}", cfg.d_steps_per_g),
            format!("data_fingerprint={}", self.data_fingerprint()),
            format!("disc_kind={}", self.disc_kind.name()),
            format!("disc_use_sn={}", self.disc_use_sn),
            format!("eval_every={}", cfg.eval_every),
            format!("g_loss_form={}", cfg.g_loss_form.name()),
            format!("gen_dropout={:?}", self.gen_spec.dropout_layers),
            format!("gen_enc={}", enc.join(",")),
            format!("gen_in={}", self.gen_spec.input_channels),
            format!("gen_out={}", self.gen_spec.output_channels),
            format!("gen_skips={}", self.gen_spec.skip_connections),
            format!("gen_use_sn={}", self.gen_spec.use_sn),
            format!("jitter={}", cfg.jitter),
            format!("lambda_l1={}", cfg.lambda_l1),
            format!("lr={}", cfg.lr),
            format!("n_eval={}", self.eval_data.len()),
            format!("n_train={}", self.train_data.len()),
            format!("seed={}", cfg.seed),
            format!("task={}", self.task),
            format!("total_iters={}", cfg.total_iters),
        ];
        lines.sort();
        lines.join("\n")
    }

    fn data_fingerprint(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut eat = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x100000001b3);
        };
        eat(self.train_data.len() as u64);
        eat(self.eval_data.len() as u64);
        for pair in self.train_data.iter().take(2) {
            for &x in pair.x.data_ref().iter().take(64) {
                eat(u64::from(x.to_bits()));
            }
        }
        h
    }

    fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        if self.train_data.is_empty() || self.eval_data.is_empty() {
            return Err(Error::Data("training requires non-empty splits".into()));
        }
        let x_ch = self.train_data[0].x.dims()[1];
        let y_ch = self.train_data[0].y.dims()[1];
        if self.gen_spec.input_channels != x_ch || self.gen_spec.output_channels != y_ch {
            return Err(Error::Config(format!(
                "generator is {}ch -> {}ch but data is {x_ch}ch -> {y_ch}ch",
                self.gen_spec.input_channels, self.gen_spec.output_channels
            )));
        }
        Ok(())
    }
}

/// The keys whose values must agree between a checkpoint snapshot and the
/// resuming setup.
fn snapshot_compatible(saved: &str, current: &str) -> Result<()> {
    let schedule = ["total_iters", "eval_every", "checkpoint_every"];
    let parse = |text: &str| -> Vec<(String, String)> {
        text.lines()
            .filter_map(|l| l.split_once('='))
            .filter(|(k, _)| !schedule.contains(k))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    };
    let (a, b) = (parse(saved), parse(current));
    if a != b {
        for ((ka, va), (kb, vb)) in a.iter().zip(b.iter()) {
            if ka != kb || va != vb {
                return Err(Error::Checkpoint(format!(
                    "incompatible resume: checkpoint has {ka}={va}, run has {kb}={vb}"
                )));
            }
        }
        return Err(Error::Checkpoint(
            "incompatible resume: snapshot key sets differ".into(),
        ));
    }
    Ok(())
}

struct Trainer {
    g: UNet,
    d: Discriminator,
    opt_g: OptimizerState,
    opt_d: OptimizerState,
    rng: Rng,
    start_iter: u64,
    last_d_loss: f32,
    last_g_loss: f32,
    d_updates: u64,
    g_updates: u64,
}

impl Trainer {
    fn fresh(setup: &TrainSetup) -> Result<Trainer> {
        let cfg = setup.cfg;
        let g = build_unet(setup.gen_spec, rng::derive_seed(cfg.seed, "generator"))?;
        let x_ch = setup.train_data[0].x.dims()[1];
        let y_ch = setup.train_data[0].y.dims()[1];
        let d = build_discriminator(
            setup.disc_kind,
            x_ch,
            y_ch,
            setup.disc_use_sn,
            rng::derive_seed(cfg.seed, "discriminator"),
        )?;
        let opt_g = OptimizerState::new(&g.params());
        let opt_d = OptimizerState::new(&d.params());
        let mut g = g;
        let mut d = d;
        let (d0, g0) = initial_losses(&mut g, &mut d, setup)?;
        Ok(Trainer {
            g,
            d,
            opt_g,
            opt_d,
            rng: stream(cfg.seed, "train"),
            start_iter: 0,
            last_d_loss: d0,
            last_g_loss: g0,
            d_updates: 0,
            g_updates: 0,
        })
    }

    fn from_checkpoint(setup: &TrainSetup, ckpt: &CheckpointData) -> Result<Trainer> {
        snapshot_compatible(&ckpt.config_text, &setup.snapshot())?;
        let mut trainer = Trainer::fresh(setup)?;
        checkpoint::restore_trainer_state(
            ckpt,
            &mut trainer.g,
            &mut trainer.d,
            &mut trainer.opt_g,
            &mut trainer.opt_d,
        )?;
        trainer.rng = rng::restore(&ckpt.rng_state);
        trainer.start_iter = ckpt.iteration;
        trainer.d_updates = ckpt.d_updates;
        trainer.g_updates = ckpt.g_updates;
        trainer.last_d_loss = ckpt.last_d_loss;
        trainer.last_g_loss = ckpt.last_g_loss;
        Ok(trainer)
    }

    /// Draw and augment one minibatch. All stochastic choices come from the
    /// single training stream, in a fixed order, so a restored stream
    /// replays the run exactly.
    fn next_batch(&mut self, setup: &TrainSetup) -> Result<(Tensor, Tensor)> {
        let n = setup.train_data.len();
        let mut xs = Vec::with_capacity(setup.cfg.batch_size);
        let mut ys = Vec::with_capacity(setup.cfg.batch_size);
        for _ in 0..setup.cfg.batch_size {
            let idx = self.rng.gen_range(0..n);
            let pair = &setup.train_data[idx];
            if setup.cfg.jitter {
                let jittered = jitter_augment(pair, &mut self.rng)?;
                xs.push(jittered.x);
                ys.push(jittered.y);
            } else {
                xs.push(pair.x.clone());
                ys.push(pair.y.clone());
            }
        }
        Ok((Tensor::stack_batch(&xs)?, Tensor::stack_batch(&ys)?))
    }

    fn step(&mut self, iter: u64, setup: &TrainSetup) -> Result<()> {
        let cfg = setup.cfg;
        let (x, y) = self.next_batch(setup)?;

        // Discriminator update on a detached fake.
        let fake = self.g.forward(&x, true, &mut self.rng)?.detach();
        let z_real = self.d.forward(&x, &y, true, &mut self.rng)?;
        let z_fake = self.d.forward(&x, &fake, true, &mut self.rng)?;
        let ld = d_loss(&z_real, &z_fake).map_err(|e| self.as_divergence(e, iter))?;
        let ld_val = ld.item();
        if !ld_val.is_finite() {
            return Err(Error::Diverged {
                iter,
                what: "d_loss".into(),
            });
        }
        for p in self.d.params() {
            p.zero_grad();
        }
        ld.backward()?;
        adam_step(&self.d.params(), &mut self.opt_d, cfg)?;
        self.d_updates += 1;
        self.last_d_loss = ld_val;

        // Generator update every d_steps_per_g iterations, against the
        // frozen discriminator.
        if iter % cfg.d_steps_per_g == 0 {
            let fake = self.g.forward(&x, true, &mut self.rng)?;
            self.d.set_trainable(false);
            let z = self.d.forward(&x, &fake, true, &mut self.rng)?;
            let lg = g_loss(&z, &fake, &y, cfg.lambda_l1, cfg.g_loss_form)
                .map_err(|e| self.as_divergence(e, iter));
            let lg = match lg {
                Ok(v) => v,
                Err(e) => {
                    self.d.set_trainable(true);
                    return Err(e);
                }
            };
            let lg_val = lg.item();
            if !lg_val.is_finite() {
                self.d.set_trainable(true);
                return Err(Error::Diverged {
                    iter,
                    what: "g_loss".into(),
                });
            }
            for p in self.g.params() {
                p.zero_grad();
            }
            let backward_result = lg.backward();
            self.d.set_trainable(true);
            backward_result?;
            adam_step(&self.g.params(), &mut self.opt_g, cfg)?;
            self.g_updates += 1;
            self.last_g_loss = lg_val;
        }
        Ok(())
    }

    fn as_divergence(&self, e: Error, iter: u64) -> Error {
        match e {
            Error::NonFinite(what) => Error::Diverged { iter, what },
            other => other,
        }
    }

    fn eval_record(&mut self, iter: u64, setup: &TrainSetup) -> Result<EvalRecord> {
        let metrics = eval_generator(
            &mut self.g,
            setup.eval_data,
            setup.task,
            setup.cfg.batch_size,
        )?;
        Ok(EvalRecord {
            iter,
            d_loss: self.last_d_loss,
            g_loss: self.last_g_loss,
            metrics,
        })
    }

    fn save_checkpoint(&mut self, iter: u64, setup: &TrainSetup, dir: &Path) -> Result<PathBuf> {
        let data = checkpoint::collect_trainer_state(
            setup.snapshot(),
            &self.g,
            &self.d,
            &self.opt_g,
            &self.opt_d,
            iter,
            rng::capture(&self.rng),
            self.d_updates,
            self.g_updates,
            self.last_d_loss,
            self.last_g_loss,
        );
        let path = dir.join(format!("ckpt_{iter}.fgan"));
        checkpoint::save(&path, &data)?;
        Ok(path)
    }

    fn run(&mut self, setup: &TrainSetup) -> Result<TrainReport> {
        let cfg = setup.cfg;
        if let Some(dir) = setup.out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut records = Vec::new();
        let mut log = LogSink::open(setup.out_dir, self.start_iter > 0)?;

        if self.start_iter == 0 {
            let record = self.eval_record(0, setup)?;
            log.line(&record.to_line())?;
            records.push(record);
        }

        let mut diverged = false;
        let mut iters_done = self.start_iter;
        for iter in self.start_iter + 1..=cfg.total_iters {
            match self.step(iter, setup) {
                Ok(()) => {}
                Err(Error::Diverged { iter, what }) => {
                    diverged = true;
                    iters_done = iter;
                    log.line(&format!("# diverged at iter {iter}: {what}"))?;
                    break;
                }
                Err(other) => return Err(other),
            }
            iters_done = iter;

            let due_eval = iter % cfg.eval_every == 0 || iter == cfg.total_iters;
            if due_eval {
                let record = self.eval_record(iter, setup)?;
                log.line(&record.to_line())?;
                records.push(record);
            }
            if let Some(dir) = setup.out_dir {
                let due_ckpt = (cfg.checkpoint_every > 0 && iter % cfg.checkpoint_every == 0)
                    || iter == cfg.total_iters;
                if due_ckpt {
                    self.save_checkpoint(iter, setup, dir)?;
                }
            }
        }

        let report = TrainReport {
            records,
            iters_done,
            diverged,
            d_updates: self.d_updates,
            g_updates: self.g_updates,
        };
        log.line("# summary")?;
        log.line(&format!("iters_done={iters_done}"))?;
        log.line(&format!("diverged={diverged}"))?;
        log.line(&format!("d_updates={}", self.d_updates))?;
        log.line(&format!("g_updates={}", self.g_updates))?;
        Ok(report)
    }
}

struct LogSink {
    file: Option<(PathBuf, std::fs::File)>,
}

impl LogSink {
    fn open(dir: Option<&Path>, append: bool) -> Result<LogSink> {
        let file = match dir {
            Some(d) => {
                let path = d.join("log.txt");
                let f = OpenOptions::new()
                    .create(true)
                    .append(append)
                    .write(true)
                    .truncate(!append)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((path, f))
            }
            None => None,
        };
        Ok(LogSink { file })
    }

    fn line(&mut self, text: &str) -> Result<()> {
        if let Some((path, f)) = self.file.as_mut() {
            writeln!(f, "{text}").map_err(|e| Error::io(path.clone(), e))?;
        }
        Ok(())
    }
}

/// Losses of the freshly initialized pair on the head of the eval split;
/// gives iteration-0 log lines real values without touching the training
/// stream (evaluation mode draws nothing).
fn initial_losses(g: &mut UNet, d: &mut Discriminator, setup: &TrainSetup) -> Result<(f32, f32)> {
    let take = setup.cfg.batch_size.min(setup.eval_data.len());
    let xs: Vec<Tensor> = setup.eval_data[..take].iter().map(|p| p.x.clone()).collect();
    let ys: Vec<Tensor> = setup.eval_data[..take].iter().map(|p| p.y.clone()).collect();
    let x = Tensor::stack_batch(&xs)?;
    let y = Tensor::stack_batch(&ys)?;
    let mut eval_rng = stream(0, "eval.unused");
    let fake = g.forward(&x, false, &mut eval_rng)?.detach();
    let z_real = d.forward(&x, &y, false, &mut eval_rng)?;
    let z_fake = d.forward(&x, &fake, false, &mut eval_rng)?;
    let ld = d_loss(&z_real, &z_fake)?.item();
    let lg = g_loss(&z_fake, &fake, &y, setup.cfg.lambda_l1, setup.cfg.g_loss_form)?.item();
    Ok((ld, lg))
}

/// Run one full training loop from scratch.
pub fn train(setup: &TrainSetup) -> Result<TrainReport> {
    setup.validate()?;
    let mut trainer = Trainer::fresh(setup)?;
    trainer.run(setup)
}

/// Continue a checkpointed run up to `setup.cfg.total_iters`.
pub fn train_resumed(setup: &TrainSetup, ckpt_path: &Path) -> Result<TrainReport> {
    setup.validate()?;
    let data = checkpoint::load(ckpt_path)?;
    let mut trainer = Trainer::from_checkpoint(setup, &data)?;
    trainer.run(setup)
}

/// Restore generator and discriminator from a checkpoint without training;
/// gives evaluation and introspection tools access to trained parameters.
pub fn restore_pair(setup: &TrainSetup, ckpt_path: &Path) -> Result<(UNet, Discriminator, u64)> {
    setup.validate()?;
    let data = checkpoint::load(ckpt_path)?;
    let trainer = Trainer::from_checkpoint(setup, &data)?;
    Ok((trainer.g, trainer.d, trainer.start_iter))
}

/// Task metrics of `g` (evaluation mode) over `data`, aggregated over all
/// pixels of the split.
pub fn eval_generator(
    g: &mut UNet,
    data: &[SamplePair],
    task: TaskKind,
    batch_size: usize,
) -> Result<Vec<(String, f64)>> {
    if data.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let class_count = data[0].class_count;
    let mut eval_rng = stream(0, "eval.unused");
    let mut pred_labels: Vec<u8> = Vec::new();
    let mut gt_labels: Vec<u8> = Vec::new();
    let mut pred_depth: Vec<f32> = Vec::new();
    let mut gt_depth: Vec<f32> = Vec::new();

    for chunk in data.chunks(batch_size.max(1)) {
        let xs: Vec<Tensor> = chunk.iter().map(|p| p.x.clone()).collect();
        let ys: Vec<Tensor> = chunk.iter().map(|p| p.y.clone()).collect();
        let x = Tensor::stack_batch(&xs)?;
        let y = Tensor::stack_batch(&ys)?;
        let fake = g.forward(&x, false, &mut eval_rng)?;
        match task {
            TaskKind::Segmentation => {
                pred_labels.extend(labels_from_logits(&fake, class_count)?);
                gt_labels.extend(labels_from_logits(&y, class_count)?);
            }
            TaskKind::MaskToImage => {
                pred_labels.extend(classify_colors(&fake, class_count)?);
                gt_labels.extend(classify_colors(&x, class_count)?);
            }
            TaskKind::Depth => {
                pred_depth.extend(fake.data_ref().iter().map(|&e| decode_depth(e)));
                gt_depth.extend(y.data_ref().iter().map(|&e| decode_depth(e)));
            }
        }
    }

    match task {
        TaskKind::Segmentation => Ok(vec![
            (
                "miou".into(),
                mean_iou(&pred_labels, &gt_labels, class_count)?,
            ),
            ("pixacc".into(), pixel_accuracy(&pred_labels, &gt_labels)?),
        ]),
        TaskKind::MaskToImage => Ok(vec![
            (
                "proxy_miou".into(),
                mean_iou(&pred_labels, &gt_labels, class_count)?,
            ),
            ("pixacc".into(), pixel_accuracy(&pred_labels, &gt_labels)?),
        ]),
        TaskKind::Depth => {
            let m = depth_metrics(&pred_depth, &gt_depth)?;
            Ok(vec![
                ("rel".into(), m.rel),
                ("rms".into(), m.rms),
                ("log10".into(), m.log10),
            ])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_logits(v: f32, n: usize) -> Tensor {
        Tensor::full([n, 1, 2, 2], v)
    }

    #[test]
    fn d_loss_at_symmetric_point_is_two_ln_two() {
        let loss = d_loss(&scalar_logits(0.0, 2), &scalar_logits(0.0, 2)).unwrap();
        assert!((loss.item() - 2.0 * std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn d_loss_vanishes_for_a_perfect_discriminator() {
        let loss = d_loss(&scalar_logits(40.0, 1), &scalar_logits(-40.0, 1)).unwrap();
        assert!(loss.item() >= 0.0);
        assert!(loss.item() < 1e-9, "{}", loss.item());
    }

    #[test]
    fn stable_form_matches_naive_form_in_moderate_range() {
        // Naive evaluation of -ln s(z_r) - ln(1 - s(z_f)) per element.
        let naive = |zr: f32, zf: f32| -> f64 {
            let s = |z: f64| 1.0 / (1.0 + (-z).exp());
            -s(f64::from(zr)).ln() - (1.0 - s(f64::from(zf))).ln()
        };
        for i in 0..41 {
            let zr = -10.0 + i as f32 * 0.5;
            for j in 0..41 {
                let zf = -10.0 + j as f32 * 0.5;
                let stable = d_loss(&scalar_logits(zr, 1), &scalar_logits(zf, 1))
                    .unwrap()
                    .item();
                let reference = naive(zr, zf);
                assert!(
                    (f64::from(stable) - reference).abs() < 1e-5,
                    "zr={zr} zf={zf}: {stable} vs {reference}"
                );
            }
        }
    }

    #[test]
    fn d_loss_rejects_nan_logits() {
        let bad = Tensor::from_vec(vec![f32::NAN; 4], [1, 1, 2, 2]).unwrap();
        assert!(matches!(
            d_loss(&bad, &scalar_logits(0.0, 1)),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn g_loss_pinned_values() {
        let y = Tensor::full([1, 1, 4, 4], 0.25);
        let loss = g_loss(
            &scalar_logits(0.0, 1),
            &y,
            &y,
            0.0,
            GenLossForm::NonSaturating,
        )
        .unwrap();
        assert!((loss.item() - std::f32::consts::LN_2).abs() < 1e-6);

        // lambda=100 and a uniform 0.01 gap adds exactly 1.
        let y_fake = Tensor::full([1, 1, 4, 4], 0.24);
        let loss = g_loss(
            &scalar_logits(0.0, 1),
            &y_fake,
            &y,
            100.0,
            GenLossForm::NonSaturating,
        )
        .unwrap();
        assert!(
            (loss.item() - (std::f32::consts::LN_2 + 1.0)).abs() < 1e-5,
            "{}",
            loss.item()
        );
    }

    #[test]
    fn saturating_form_has_opposite_pressure() {
        let z = Tensor::param(vec![0.0; 4], [1, 1, 2, 2]).unwrap();
        let y = Tensor::full([1, 1, 2, 2], 0.0);
        let loss = g_loss(&z, &y, &y, 0.0, GenLossForm::Saturating).unwrap();
        loss.backward().unwrap();
        // d/dz log(1 - s(z)) = -s(z): descending pushes logits up, same
        // direction as the non-saturating form, but the loss is negative.
        assert!(loss.item() < 0.0);
        for g in z.grad().unwrap() {
            assert!(g < 0.0);
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let p = Tensor::param(vec![1.0, -2.0], [1, 1, 1, 2]).unwrap();
        let mut state = OptimizerState::new(&[p.clone()]);
        let cfg = TrainConfig::default();
        // No gradient accumulated at all.
        adam_step(&[p.clone()], &mut state, &cfg).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, -2.0]);
        // Explicit zero gradient.
        p.accumulate_grad_from_slice(&[0.0, 0.0]);
        adam_step(&[p.clone()], &mut state, &cfg).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_steps_follow_hand_recurrence() {
        let cfg = TrainConfig::default(); // lr 2e-4, beta1 0, beta2 0.9
        let p = Tensor::param(vec![1.0], [1, 1, 1, 1]).unwrap();
        let mut state = OptimizerState::new(&[p.clone()]);

        p.accumulate_grad_from_slice(&[1.0]);
        adam_step(&[p.clone()], &mut state, &cfg).unwrap();
        let after_one = p.item();
        let expect1 = 1.0 - 2e-4 / (1.0 + ADAM_EPS);
        assert!((after_one - expect1).abs() < 1e-9, "{after_one} vs {expect1}");

        // Second identical step: v_hat stays 1 under a constant gradient.
        p.accumulate_grad_from_slice(&[1.0]);
        adam_step(&[p.clone()], &mut state, &cfg).unwrap();
        let delta2 = after_one - p.item();
        assert!((delta2 - 2e-4).abs() < 1e-6, "second update {delta2}");
        assert_eq!(state.t, 2);
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut cfg = TrainConfig::default();
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.beta2 = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.d_steps_per_g = 0;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
