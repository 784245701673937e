//! Optimization loop: Adam with global-norm clipping, class-balanced
//! cross-entropy, ReduceLROnPlateau on validation macro-F1, early stopping,
//! and matched composite augmentation of the raw streams.
//!
//! Every stochastic choice (init, shuffling, augmentation draws, dropout
//! masks) is a pure function of `(seed, epoch, window index)`, and per-sample
//! gradients are summed in window order, so a rerun with the same seed
//! reproduces the training log byte for byte regardless of thread count.

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{forward_with_vars, init_params, ModelSpec, ParamVars, Params};
use crate::ood::{evaluate, sample_perturbation, AblationVariant, OodConfig};
use crate::pipeline::Window;
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Classic Adam folds the decay into the gradient; the decoupled form
    /// shrinks parameters directly.
    pub decoupled_weight_decay: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    /// Minimum val macro-F1 gain that counts as an improvement.
    pub min_delta: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub augment: bool,
    /// Fresh augmentation draw per epoch (false: one fixed draw per window).
    pub augment_per_epoch: bool,
    pub augment_cfg: OodConfig,
    /// Fraction of the official train split held out for validation.
    pub val_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 5e-4,
            decoupled_weight_decay: false,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 128,
            clip_norm: 5.0,
            plateau_factor: 0.5,
            plateau_patience: 3,
            early_stop_patience: 10,
            min_delta: 1e-4,
            max_epochs: 100,
            seed: 1,
            augment: true,
            augment_per_epoch: true,
            augment_cfg: OodConfig::default(),
            val_frac: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("adam_eps", self.adam_eps),
            ("clip_norm", self.clip_norm),
            ("plateau_factor", self.plateau_factor),
        ];
        for (name, v) in positive {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::InvalidArg(format!("{name} must be positive, got {v}")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidArg("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidArg("batch_size and max_epochs must be positive".into()));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::InvalidArg("patience values must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_frac) || self.val_frac == 0.0 {
            return Err(Error::InvalidArg(format!("val_frac {} outside (0, 1)", self.val_frac)));
        }
        Ok(())
    }
}

/// Class-balanced cross-entropy weights: `w_c = (1/n_c) / ((1/K) Σ_k 1/n_k)`.
/// They average to one over classes, so uniform counts give uniform weights.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>> {
    let k = counts.len();
    if k == 0 {
        return Err(Error::InvalidArg("no classes".into()));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::InvalidArg(format!("class {} has no training windows", c + 1)));
    }
    let inv: Vec<f64> = counts.iter().map(|&n| 1.0 / n as f64).collect();
    let mean_inv = inv.iter().sum::<f64>() / k as f64;
    Ok(inv.into_iter().map(|v| v / mean_inv).collect())
}

/// Scales gradients in place so their joint L2 norm is at most `clip`; below
/// the threshold they are untouched bit for bit. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], clip: f64) -> f64 {
    let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > clip {
        let scale = clip / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(scale);
        }
    }
    norm
}

/// First/second moment state, one slot per named parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &Params) -> AdamState {
        let shapes: Vec<Tensor> = params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState { m: shapes.clone(), v: shapes, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update: clip the loss gradients globally, then apply the
    /// bias-corrected Adam rule at learning rate `lr`.
    pub fn step(
        &mut self,
        params: &mut Params,
        grads: &mut [Tensor],
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<()> {
        for g in grads.iter() {
            if !g.is_finite() {
                return Err(Error::NonFinite("gradient (step aborted)".into()));
            }
        }
        let named = params.named_mut();
        if named.len() != grads.len() {
            return Err(Error::InvalidArg(format!(
                "{} gradients for {} parameters",
                grads.len(),
                named.len()
            )));
        }
        clip_global_norm(grads, cfg.clip_norm);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, (_, theta)) in named.into_iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grads[i].data();
            let td = theta.data_mut();
            for j in 0..g.len() {
                let mut gj = g[j];
                if !cfg.decoupled_weight_decay {
                    gj += cfg.weight_decay * td[j];
                }
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                td[j] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
                if cfg.decoupled_weight_decay {
                    td[j] -= lr * cfg.weight_decay * td[j];
                }
            }
        }
        Ok(())
    }
}

/// ReduceLROnPlateau plus early stopping, monitoring a higher-is-better
/// metric.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    pub lr: f64,
    best: f64,
    stale_lr: usize,
    stale_stop: usize,
    factor: f64,
    patience: usize,
    stop_patience: usize,
    min_delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlateauDecision {
    pub improved: bool,
    pub halved: bool,
    pub stop: bool,
}

impl PlateauSchedule {
    pub fn new(cfg: &TrainConfig) -> PlateauSchedule {
        PlateauSchedule {
            lr: cfg.lr,
            best: f64::NEG_INFINITY,
            stale_lr: 0,
            stale_stop: 0,
            factor: cfg.plateau_factor,
            patience: cfg.plateau_patience,
            stop_patience: cfg.early_stop_patience,
            min_delta: cfg.min_delta,
        }
    }

    pub fn observe(&mut self, metric: f64) -> PlateauDecision {
        if metric > self.best + self.min_delta {
            self.best = metric;
            self.stale_lr = 0;
            self.stale_stop = 0;
            return PlateauDecision { improved: true, halved: false, stop: false };
        }
        self.stale_lr += 1;
        self.stale_stop += 1;
        let mut halved = false;
        if self.stale_lr >= self.patience {
            self.lr *= self.factor;
            self.stale_lr = 0;
            halved = true;
        }
        PlateauDecision { improved: false, halved, stop: self.stale_stop >= self.stop_patience }
    }
}

/// One line of the training log (line-delimited JSON on disk).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub spec: ModelSpec,
    pub best_params: Params,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
    pub stopped_early: bool,
    pub log: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn log_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.log {
            out.push_str(&serde_json::to_string(rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Stream ids for the derived generators; window draws must not collide
/// across purposes.
const STREAM_INIT: u64 = 0x1217;
const STREAM_SHUFFLE: u64 = 0x5471;
const STREAM_AUGMENT: u64 = 0xA06;
const STREAM_DROPOUT: u64 = 0xD80;

fn mix(a: u64, b: u64) -> u64 {
    a.wrapping_mul(0x9e3779b97f4a7c15).rotate_left(31) ^ b
}

/// Gradient and loss of one sample: `w_label · CE(logits, label)`.
fn sample_grad(
    spec: &ModelSpec,
    params: &Params,
    window: &Window,
    weight: f64,
    augment: Option<(&OodConfig, u64)>,
    dropout_stream: u64,
    seed: u64,
) -> Result<(Vec<Tensor>, f64)> {
    let input = match augment {
        Some((cfg, stream)) => {
            let mut rng = Rng::derive(seed, mix(STREAM_AUGMENT, stream));
            sample_perturbation(cfg, &mut rng).apply(window)
        }
        None => window.clone(),
    };
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params);
    let mut dropout_rng = Rng::derive(seed, mix(STREAM_DROPOUT, dropout_stream));
    let out = forward_with_vars(spec, &pv, &mut tape, &input, true, &mut dropout_rng)?;
    let loss = tape.weighted_cross_entropy(out.logits, window.label - 1, weight)?;
    let loss_val = tape.value(loss).item();
    if !loss_val.is_finite() {
        return Err(Error::NonFinite(format!("loss diverged (label {})", window.label)));
    }
    let mut grads = tape.backward(loss)?;
    let collected = pv
        .ordered()
        .iter()
        .zip(params.named())
        .map(|(v, (_, t))| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((collected, loss_val))
}

/// Trains `spec` on the given splits. Returns the best-validation checkpoint
/// and the full epoch log.
pub fn train(
    spec: &ModelSpec,
    train_windows: &[Window],
    val_windows: &[Window],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec.validate()?;
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(Error::InvalidArg("train and val splits must be non-empty".into()));
    }
    if cfg.augment {
        cfg.augment_cfg.validate(train_windows[0].t_len())?;
    }
    let mut counts = vec![0usize; spec.n_classes];
    for w in train_windows {
        counts[w.label - 1] += 1;
    }
    let weights = class_weights(&counts)?;

    let mut params = init_params(spec, &mut Rng::derive(cfg.seed, STREAM_INIT))?;
    let mut adam = AdamState::new(&params);
    let mut sched = PlateauSchedule::new(cfg);
    let mut log = Vec::new();
    let mut best_params = params.clone();
    let mut best_epoch = 0usize;
    let mut best_f1 = f64::NEG_INFINITY;
    let mut stopped_early = false;

    let n = train_windows.len();
    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        Rng::derive(cfg.seed, mix(STREAM_SHUFFLE, epoch as u64)).shuffle(&mut order);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Window> = chunk.iter().map(|&i| train_windows[i].clone()).collect();
            let results = crate::par::try_map_indexed(&batch, |pos, w| {
                let global = chunk[pos] as u64;
                let aug_stream = if cfg.augment_per_epoch {
                    mix(epoch as u64 + 1, global)
                } else {
                    mix(1, global)
                };
                let dropout_stream = mix(mix(epoch as u64, 0x2), global);
                sample_grad(
                    spec,
                    &params,
                    w,
                    weights[w.label - 1],
                    cfg.augment.then_some((&cfg.augment_cfg, aug_stream)),
                    dropout_stream,
                    cfg.seed,
                )
            })?;
            // fixed-order reduction: sum over samples in batch order
            let mut summed: Vec<Tensor> =
                params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
            let inv_b = 1.0 / chunk.len() as f64;
            for (grads, loss) in results {
                loss_sum += loss;
                for (acc, g) in summed.iter_mut().zip(&grads) {
                    acc.axpy(inv_b, g);
                }
            }
            adam.step(&mut params, &mut summed, sched.lr, cfg)?;
        }
        let train_loss = loss_sum / n as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss diverged at epoch {epoch}")));
        }

        let val_report = evaluate(spec, &params, val_windows, None, cfg.seed)?;
        let record = EpochRecord {
            epoch,
            lr: sched.lr,
            train_loss,
            val_accuracy: val_report.accuracy,
            val_macro_f1: val_report.macro_f1,
        };
        let decision = sched.observe(val_report.macro_f1);
        if decision.improved {
            best_params = params.clone();
            best_epoch = epoch;
            best_f1 = val_report.macro_f1;
        }
        log.push(record);
        if decision.stop {
            stopped_early = true;
            break;
        }
    }

    Ok(TrainOutcome {
        spec: spec.clone(),
        best_params,
        best_epoch,
        best_val_macro_f1: best_f1,
        stopped_early,
        log,
    })
}

/// Trains one ablation variant under the identical config and seed, then
/// evaluates it under the given perturbation. Returns the variant spec, the
/// training outcome and the OOD report.
pub fn run_ablation(
    variant: AblationVariant,
    base_spec: &ModelSpec,
    train_windows: &[Window],
    val_windows: &[Window],
    test_windows: &[Window],
    cfg: &TrainConfig,
    ood: &OodConfig,
    eval_seed: u64,
) -> Result<(ModelSpec, TrainOutcome, MetricsReport)> {
    let spec = variant.apply(base_spec);
    let outcome = train(&spec, train_windows, val_windows, cfg)?;
    let report = evaluate(&spec, &outcome.best_params, test_windows, Some(ood), eval_seed)?;
    Ok((spec, outcome, report))
}
