//! Two-inference associative adversarial training, SGD, and evaluation.
//!
//! Each [`aal_step`] runs a clean forward/backward to obtain the attention
//! map `M`, its loss gradient and the input gradient; builds the associative
//! attention `Mᵃ` and the perturbation `δ`; attacks the batch with
//! `k(Mᵃ) ∘ δ`; and updates the weights from the loss on the attacked batch.
//!
//! Gradients feeding the attention update are taken per sample: the batch
//! loss is a mean, so its gradients are rescaled by the batch size.

use std::io::Write;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{
    apply_attack, fgsm_ascent_delta, fgsm_attack, fgsm_delta, kernel, pgd, selective_perturbation,
    AttackConfig, AttackMethod, KernelKind,
};
use crate::attention::{AssociationParams, AttentionState, CouplingHistory, DEFAULT_EPS_DIV};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Classifier, ForwardOptions, Mode, SmallCnn};
use crate::optim::{sgd_update, Schedule};
use crate::rng::{permutation, stream_rng, RngState, Stream};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

/// Sign convention of the training-time perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `δ = ε·sign(-∇ₓG)`
    Descent,
    /// `δ = ε·sign(∇ₓG)`
    Ascent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub xi1: f64,
    pub xi2: f64,
    pub zeta: f64,
    /// Floor applied to divisors in the coupling gain.
    pub eps_div: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr0: f64,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub seed: u64,
    pub attack: AttackConfig,
    pub fgsm_direction: Direction,
    /// Feed `Mᵃ` into the second inference in place of the model's own map.
    pub inject_associative_attention: bool,
    /// Add the clean-pass loss gradient to the weight update.
    pub mixed_clean_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            xi1: 0.1,
            xi2: 0.1,
            zeta: 0.1,
            eps_div: DEFAULT_EPS_DIV,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr0: 0.1,
            schedule: Schedule::Cosine,
            batch_size: 64,
            seed: 0,
            attack: AttackConfig::default(),
            fgsm_direction: Direction::Descent,
            inject_associative_attention: false,
            mixed_clean_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        for (name, v) in [
            ("xi1", self.xi1),
            ("xi2", self.xi2),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("lr0", self.lr0),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.zeta) {
            return bad(format!("zeta must lie in [0, 1], got {}", self.zeta));
        }
        if !(self.eps_div > 0.0) {
            return bad(format!("eps_div must be > 0, got {}", self.eps_div));
        }
        self.attack.validate()
    }

    pub fn association(&self) -> AssociationParams {
        AssociationParams {
            xi1: self.xi1,
            xi2: self.xi2,
            zeta: self.zeta,
            eps_div: self.eps_div,
        }
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// Position of a step within training, for the schedule and diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct StepContext {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
}

/// Everything one [`aal_step`] produced.
#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    /// Loss of the second (attacked) inference.
    pub loss: T,
    pub clean_loss: T,
    pub attention: AttentionState<T>,
    pub delta: Tensor<T>,
    pub eta: Tensor<T>,
    pub x_adv: Tensor<T>,
}

fn summarize<T: Scalar>(name: &str, t: &Tensor<T>) -> String {
    let mut nonfinite = 0usize;
    let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for &v in t.data() {
        let v = v.to_f64();
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
            sum += v;
        } else {
            nonfinite += 1;
        }
    }
    let finite = t.len() - nonfinite;
    let mean = if finite > 0 { sum / finite as f64 } else { f64::NAN };
    format!("{name}{:?} min={lo:.6e} max={hi:.6e} mean={mean:.6e} non_finite={nonfinite}", t.shape())
}

fn diverged<T: Scalar>(ctx: StepContext, what: &str, maps: &[(&str, &Tensor<T>)]) -> Error {
    let mut diagnostics = what.to_string();
    for (name, t) in maps {
        diagnostics.push_str("; ");
        diagnostics.push_str(&summarize(name, t));
    }
    Error::Diverged {
        epoch: ctx.epoch,
        step: ctx.step,
        diagnostics,
    }
}

/// One associative adversarial training step on `(x, labels)`, updating the
/// model in place and replacing `history` with this batch's mean maps.
///
/// Any NaN/Inf produced along the way surfaces as [`Error::Diverged`].
pub fn aal_step<T: Scalar>(
    model: &mut SmallCnn<T>,
    x: &Tensor<T>,
    labels: &[usize],
    history: &mut Option<CouplingHistory<T>>,
    config: &TrainConfig,
    ctx: StepContext,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput<T>> {
    step_inner(model, x, labels, history, config, ctx, rng).map_err(|e| match e {
        Error::NonFinite { op } => diverged::<T>(ctx, &format!("non-finite output from {op}"), &[]),
        other => other,
    })
}

struct FirstInference<T> {
    clean_loss: T,
    attention: AttentionState<T>,
    delta: Tensor<T>,
    delta_map: Tensor<T>,
    clean_param_grads: Vec<Tensor<T>>,
}

fn first_inference<T: Scalar>(
    model: &SmallCnn<T>,
    x: &Tensor<T>,
    labels: &[usize],
    history: Option<CouplingHistory<T>>,
    config: &TrainConfig,
    ctx: StepContext,
) -> Result<FirstInference<T>> {
    let [n, ..] = x.dims4("aal_step")?;
    let per_sample = T::from_f64(n as f64);

    let mut tape = Tape::new();
    let pass = model.forward(
        &mut tape,
        x.clone(),
        ForwardOptions {
            input_grad: true,
            param_grad: config.mixed_clean_loss,
            attention_override: None,
        },
    )?;
    let loss = tape.softmax_cross_entropy(pass.logits, labels)?;
    let clean_loss = tape.value(loss).item();
    let m = tape.value(pass.attention).clone();
    if !clean_loss.is_finite() {
        return Err(diverged(ctx, "clean loss is not finite", &[("M", &m)]));
    }
    let mut grads = tape.backward(loss)?;
    let grad_m = grads.wrt(pass.attention)?.map(|g| g * per_sample);
    let grad_x = grads.wrt(pass.input)?.map(|g| g * per_sample);
    let clean_param_grads: Vec<Tensor<T>> = if config.mixed_clean_loss {
        pass.params.iter().map(|&p| grads.take(p).expect("param grad")).collect()
    } else {
        Vec::new()
    };
    drop(tape);

    // Perturbation and associative attention.
    let eps = T::from_f64(config.attack.epsilon);
    let delta = match config.attack.method {
        AttackMethod::None => Tensor::zeros(x.shape().to_vec()),
        _ => match config.fgsm_direction {
            Direction::Descent => fgsm_delta(&grad_x, eps)?,
            Direction::Ascent => fgsm_ascent_delta(&grad_x, eps)?,
        },
    };
    let delta_map = delta.mean_channels()?;
    let grad_delta = grad_x.mean_channels()?;
    let attention = AttentionState::associate(
        m,
        &grad_m,
        grad_delta,
        &delta_map,
        history,
        &config.association(),
    )
    .map_err(|e| match e {
        Error::NonFinite { op } => diverged(ctx, op, &[("dL/dM", &grad_m), ("delta", &delta)]),
        other => other,
    })?;
    Ok(FirstInference {
        clean_loss,
        attention,
        delta,
        delta_map,
        clean_param_grads,
    })
}

/// The attention maps a training step on `(x, labels)` would produce,
/// leaving the model untouched.
pub fn associate_batch<T: Scalar>(
    model: &SmallCnn<T>,
    x: &Tensor<T>,
    labels: &[usize],
    history: Option<CouplingHistory<T>>,
    config: &TrainConfig,
) -> Result<AttentionState<T>> {
    let ctx = StepContext { epoch: 0, step: 0, lr: 0.0 };
    Ok(first_inference(model, x, labels, history, config, ctx)?.attention)
}

fn step_inner<T: Scalar>(
    model: &mut SmallCnn<T>,
    x: &Tensor<T>,
    labels: &[usize],
    history: &mut Option<CouplingHistory<T>>,
    config: &TrainConfig,
    ctx: StepContext,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput<T>> {
    let FirstInference {
        clean_loss,
        attention,
        delta,
        delta_map,
        clean_param_grads,
    } = first_inference(model, x, labels, history.take(), config, ctx)?;

    // Selective attack.
    let k_map = kernel(&attention.m_assoc, config.attack.kernel)?;
    let (eta, x_adv) = match config.attack.method {
        AttackMethod::None => (Tensor::zeros(x.shape().to_vec()), x.clone()),
        AttackMethod::Fgsm => {
            let eta = selective_perturbation(&k_map, &delta)?;
            let x_adv = apply_attack(x, &eta)?;
            (eta, x_adv)
        }
        AttackMethod::Pgd => {
            let prev = model.mode();
            model.set_mode(Mode::Inference);
            let shaped = (config.attack.kernel != KernelKind::Global).then_some(&k_map);
            let x_adv = pgd(&*model, x, labels, &config.attack, shaped, rng);
            model.set_mode(prev);
            let x_adv = x_adv?;
            let eta = x_adv.zip_map(x, |a, b| a - b)?;
            (eta, x_adv)
        }
    };

    // Second inference on the attacked batch; weights update from its loss.
    let mut tape = Tape::new();
    let pass = model.forward(
        &mut tape,
        x_adv.clone(),
        ForwardOptions {
            input_grad: false,
            param_grad: true,
            attention_override: config.inject_associative_attention.then_some(&attention.m_assoc),
        },
    )?;
    let loss = tape.softmax_cross_entropy(pass.logits, labels)?;
    let adv_loss = tape.value(loss).item();
    if !adv_loss.is_finite() {
        return Err(diverged(
            ctx,
            "adversarial loss is not finite",
            &[("M", &attention.m), ("Massoc", &attention.m_assoc), ("delta", &delta)],
        ));
    }
    let mut grads = tape.backward(loss)?;
    let mut param_grads: Vec<Tensor<T>> = pass
        .params
        .iter()
        .map(|&p| grads.take(p).expect("param grad"))
        .collect();
    for (g, c) in param_grads.iter_mut().zip(&clean_param_grads) {
        *g = g.zip_map(c, |a, b| a + b)?;
    }
    sgd_update(model.params_mut(), &param_grads, ctx.lr, config.momentum, config.weight_decay)?;
    if model.params().iter().any(|p| !p.value.all_finite()) {
        return Err(diverged(
            ctx,
            "parameters became non-finite",
            &[("M", &attention.m), ("Massoc", &attention.m_assoc), ("delta", &delta)],
        ));
    }

    *history = Some(CouplingHistory::from_batch(&attention.m, &delta_map)?);
    Ok(StepOutput {
        loss: adv_loss,
        clean_loss,
        attention,
        delta,
        eta,
        x_adv,
    })
}

/// Top-1 accuracy of a frozen model on `data` under a global attack.
///
/// The kernel in `attack` is ignored: evaluation attacks are unshaped loss
/// ascent. PGD noise for batch `b` comes from the `(seed, eval, b)` stream.
pub fn evaluate<T: Scalar, M: Classifier<T> + ?Sized>(
    model: &M,
    data: &Dataset,
    attack: &AttackConfig,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !model.is_inference() {
        return Err(Error::NotInferenceMode);
    }
    attack.validate()?;
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for (b, chunk) in Dataset::chunks(&indices, batch_size).enumerate() {
        let (x, labels) = data.batch::<T>(chunk)?;
        let x_eval = match attack.method {
            AttackMethod::None => x,
            AttackMethod::Fgsm => fgsm_attack(model, &x, &labels, T::from_f64(attack.epsilon))?,
            AttackMethod::Pgd => {
                let mut rng = stream_rng(seed, Stream::EvalAttack, b as u64);
                pgd(model, &x, &labels, attack, None, &mut rng)?
            }
        };
        let pred = model.predict(&x_eval)?;
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// One row of the per-epoch metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub clean_acc: f64,
    pub fgsm_acc: f64,
    pub pgd_acc: f64,
    pub seconds: f64,
}

impl MetricsRow {
    pub const HEADER: &'static str = "epoch,lr,train_loss,clean_acc,fgsm_acc,pgd_acc,seconds";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.lr, self.train_loss, self.clean_acc, self.fgsm_acc, self.pgd_acc, self.seconds
        )
    }
}

/// Writes the header and `rows`, LF-terminated.
pub fn write_metrics_csv<W: Write>(mut out: W, rows: &[MetricsRow]) -> std::io::Result<()> {
    writeln!(out, "{}", MetricsRow::HEADER)?;
    for r in rows {
        writeln!(out, "{}", r.to_csv())?;
    }
    Ok(())
}

/// Per-epoch evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub fgsm: AttackConfig,
    pub pgd: AttackConfig,
    pub batch_size: usize,
    /// Fill the `seconds` column with wall-clock time; off keeps metrics
    /// byte-reproducible.
    pub record_timing: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fgsm: AttackConfig::fgsm(8.0 / 255.0),
            pgd: AttackConfig::pgd(8.0 / 255.0, 2.0 / 255.0, 10),
            batch_size: 250,
            record_timing: false,
        }
    }
}

/// Resumable training progress.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState<T> {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    /// Training-attack generator (PGD initial noise).
    pub rng: RngState,
    pub history: Option<CouplingHistory<T>>,
}

pub struct EpochSummary {
    pub lr: f64,
    pub train_loss: f64,
}

/// Owns the model and the attention history across epochs.
pub struct Trainer<T> {
    model: SmallCnn<T>,
    config: TrainConfig,
    history: Option<CouplingHistory<T>>,
    epoch: usize,
    step: usize,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: SmallCnn<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let rng = stream_rng(config.seed, Stream::TrainAttack, 0);
        Ok(Self {
            model,
            config,
            history: None,
            epoch: 0,
            step: 0,
            rng,
        })
    }

    pub fn resume(model: SmallCnn<T>, config: TrainConfig, state: TrainingState<T>) -> Result<Self> {
        let mut t = Self::new(model, config)?;
        t.epoch = state.epoch;
        t.step = state.step;
        t.rng = state.rng.restore();
        t.history = state.history;
        Ok(t)
    }

    pub fn state(&self) -> TrainingState<T> {
        TrainingState {
            epoch: self.epoch,
            step: self.step,
            rng: RngState::capture(&self.rng),
            history: self.history.clone(),
        }
    }

    pub fn model(&self) -> &SmallCnn<T> {
        &self.model
    }

    pub fn into_model(self) -> SmallCnn<T> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn history(&self) -> Option<&CouplingHistory<T>> {
        self.history.as_ref()
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// Runs one epoch over `data` in the `(seed, epoch)` shuffle order.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochSummary> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let per_epoch = self.config.steps_per_epoch(data.len());
        let total = per_epoch * self.config.epochs;
        let order = permutation(
            &mut stream_rng(self.config.seed, Stream::Shuffle, self.epoch as u64),
            data.len(),
        );
        self.model.set_mode(Mode::Train);
        let first_lr = self.config.schedule.lr(self.step, total, self.config.lr0);
        let (mut loss_sum, mut seen) = (0.0f64, 0usize);
        for chunk in Dataset::chunks(&order, self.config.batch_size) {
            let (x, labels) = data.batch::<T>(chunk)?;
            let ctx = StepContext {
                epoch: self.epoch,
                step: self.step,
                lr: self.config.schedule.lr(self.step, total, self.config.lr0),
            };
            let out = aal_step(
                &mut self.model,
                &x,
                &labels,
                &mut self.history,
                &self.config,
                ctx,
                &mut self.rng,
            )?;
            loss_sum += out.loss.to_f64() * chunk.len() as f64;
            seen += chunk.len();
            self.step += 1;
        }
        self.epoch += 1;
        Ok(EpochSummary {
            lr: first_lr,
            train_loss: loss_sum / seen as f64,
        })
    }

    /// Clean, FGSM and PGD accuracy on `data`.
    pub fn evaluate_all(&mut self, data: &Dataset, eval: &EvalConfig) -> Result<(f64, f64, f64)> {
        self.model.set_mode(Mode::Inference);
        let seed = self.config.seed;
        let res = (|| {
            Ok((
                evaluate(&self.model, data, &AttackConfig::none(), eval.batch_size, seed)?,
                evaluate(&self.model, data, &eval.fgsm, eval.batch_size, seed)?,
                evaluate(&self.model, data, &eval.pgd, eval.batch_size, seed)?,
            ))
        })();
        self.model.set_mode(Mode::Train);
        res
    }

    /// Trains the remaining epochs, evaluating on `test` after each one.
    pub fn fit(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        eval: &EvalConfig,
        mut on_epoch: impl FnMut(&MetricsRow, &Self) -> Result<()>,
    ) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while self.epoch < self.config.epochs {
            let start = Instant::now();
            let summary = self.train_epoch(train)?;
            let (clean_acc, fgsm_acc, pgd_acc) = self.evaluate_all(test, eval)?;
            let row = MetricsRow {
                epoch: self.epoch,
                lr: summary.lr,
                train_loss: summary.train_loss,
                clean_acc,
                fgsm_acc,
                pgd_acc,
                seconds: if eval.record_timing {
                    start.elapsed().as_secs_f64()
                } else {
                    0.0
                },
            };
            on_epoch(&row, self)?;
            rows.push(row);
        }
        Ok(rows)
    }
}
