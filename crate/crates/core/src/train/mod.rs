//! Desk-scale fine-tuning loop for an ensemble of linear-softmax backbones.
//!
//! Each backbone maps an input `x` through a fixed random projection to
//! features `h = x · P`, then to logits `h · W + b`. The projection stands in
//! for a pretrained trunk and is frozen; `W` and `b` stand in for the
//! unfrozen final block and classifier.
//!
//! One epoch walks shuffled mini-batches. Each batch is fused, routed (hard
//! samples feed the diversity term), scored with the joint loss, and skipped
//! outright if the loss is not finite. Gradients accumulate over
//! `accum_steps` batches, are clipped with non-finite tolerance, applied by
//! AdamW, and folded into per-backbone EMA shadows.

mod checkpoint;
mod optim;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{
    clip_gradients_tolerant, cosine_warm_restarts, ema_update, AdamParams, AdamW, ClipOutcome,
    WarmRestartSchedule,
};

use crate::error::{Error, Result};
use crate::fusion::{EnsembleEngine, FusionConfig, ModelOpinion, RouterConfig};
use crate::loss::{total_loss, LossBatch, LossConfig};

pub const PROJECTION: usize = 0;
pub const WEIGHTS: usize = 1;
pub const BIAS: usize = 2;

/// A named dense parameter block stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub frozen: bool,
    pub values: Vec<f64>,
}

impl ParamGroup {
    fn new(name: &str, rows: usize, cols: usize, frozen: bool, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), rows * cols);
        Self {
            name: name.into(),
            rows,
            cols,
            frozen,
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyBackbone {
    pub model_id: String,
    /// `[projection (d_in × d_feat), weights (d_feat × C), bias (1 × C)]`.
    pub groups: Vec<ParamGroup>,
}

impl ToyBackbone {
    pub fn d_in(&self) -> usize {
        self.groups[PROJECTION].rows
    }

    pub fn d_feat(&self) -> usize {
        self.groups[PROJECTION].cols
    }

    pub fn num_classes(&self) -> usize {
        self.groups[BIAS].cols
    }

    pub fn set_frozen(&mut self, group: usize, frozen: bool) {
        self.groups[group].frozen = frozen;
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let p = &self.groups[PROJECTION];
        let mut h = vec![0.0; p.cols];
        for (r, xr) in x.iter().enumerate() {
            let row = &p.values[r * p.cols..(r + 1) * p.cols];
            for (hj, pj) in h.iter_mut().zip(row) {
                *hj += xr * pj;
            }
        }
        h
    }

    pub fn logits_from_features(&self, h: &[f64]) -> Vec<f64> {
        let w = &self.groups[WEIGHTS];
        let mut z = self.groups[BIAS].values.clone();
        for (r, hr) in h.iter().enumerate() {
            let row = &w.values[r * w.cols..(r + 1) * w.cols];
            for (zc, wc) in z.iter_mut().zip(row) {
                *zc += hr * wc;
            }
        }
        z
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.logits_from_features(&self.features(x))
    }
}

/// Builds `n_models` backbones with distinct seeded projections.
///
/// Projections are `N(0, 1/d_in)`, classifier weights `N(0, 0.01²)`, biases zero.
pub fn make_toy_ensemble(seed: u64, n_models: usize, d_in: usize, d_feat: usize, num_classes: usize) -> Result<Vec<ToyBackbone>> {
    if n_models == 0 || d_in == 0 || d_feat == 0 || num_classes == 0 {
        return Err(Error::Config("all ensemble dimensions must be at least 1".into()));
    }
    let proj = Normal::new(0.0, (1.0 / d_in as f64).sqrt()).expect("valid scale");
    let init = Normal::new(0.0, 0.01).expect("valid scale");
    Ok((0..n_models)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let p: Vec<f64> = (0..d_in * d_feat).map(|_| proj.sample(&mut rng)).collect();
            let w: Vec<f64> = (0..d_feat * num_classes).map(|_| init.sample(&mut rng)).collect();
            ToyBackbone {
                model_id: format!("toy-{i}"),
                groups: vec![
                    ParamGroup::new("projection", d_in, d_feat, true, p),
                    ParamGroup::new("weights", d_feat, num_classes, false, w),
                    ParamGroup::new("bias", 1, num_classes, false, vec![0.0; num_classes]),
                ],
            }
        })
        .collect())
}

/// SHA-256 over every parameter (little-endian f64) and group shape.
pub fn ensemble_fingerprint(ensemble: &[ToyBackbone]) -> String {
    let mut h = Sha256::new();
    for b in ensemble {
        h.update(b.model_id.as_bytes());
        for g in &b.groups {
            h.update((g.rows as u64).to_le_bytes());
            h.update((g.cols as u64).to_le_bytes());
            for v in &g.values {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub clip_max_norm: f64,
    pub ema_decay: f64,
    pub scheduler: WarmRestartSchedule,
    pub seed: u64,
    pub router: RouterConfig,
    pub loss: LossConfig,
    /// Fusion temperature used to form `P_sys` during training.
    pub temperature: f64,
    pub adam: AdamParams,
    /// Global batch indices whose logits are overwritten with NaN (fault injection).
    #[serde(default)]
    pub nan_batches: BTreeSet<usize>,
}

impl TrainConfig {
    /// AdamW at `5e-5`, weight decay `0.01`, batch 8, 100 epochs, focal `γ = 2`.
    pub fn new(num_classes: usize) -> Self {
        let lr = 5e-5;
        Self {
            epochs: 100,
            lr,
            weight_decay: 0.01,
            batch_size: 8,
            accum_steps: 1,
            clip_max_norm: 1.0,
            ema_decay: 0.999,
            scheduler: WarmRestartSchedule::for_lr(lr),
            seed: 0,
            router: RouterConfig::default(),
            loss: LossConfig::new(num_classes),
            temperature: 1.0,
            adam: AdamParams::default(),
            nan_batches: BTreeSet::new(),
        }
    }

    /// Larger step size and batch suited to the synthetic toy problem.
    pub fn toy(num_classes: usize) -> Self {
        let lr = 0.05;
        Self {
            epochs: 200,
            lr,
            batch_size: 32,
            scheduler: WarmRestartSchedule::for_lr(lr),
            seed: 42,
            ..Self::new(num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scheduler.validate()?;
        self.router.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 || self.accum_steps == 0 {
            return Err(Error::Config("batch_size and accum_steps must be at least 1".into()));
        }
        if !(self.clip_max_norm > 0.0) {
            return Err(Error::Config("clip_max_norm must be positive".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!("ema_decay = {} outside (0, 1)", self.ema_decay)));
        }
        if !(self.temperature > 0.0) || !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("temperature must be positive; lr and weight_decay non-negative".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the JSON-serialized config.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Sum over backbones of the batch-mean focal loss, averaged over processed batches.
    pub individual: f64,
    pub global: f64,
    pub diversity: f64,
    pub total: f64,
    pub lr: f64,
    pub skipped: usize,
    pub hard_fraction: f64,
    pub train_top1: f64,
    pub val_top1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub skipped_batch_count: usize,
    pub optimizer_steps: u64,
    /// Largest global gradient norm applied by any update.
    pub max_applied_grad_norm: f64,
    pub nonfinite_grads_zeroed: usize,
    pub final_params: Vec<ToyBackbone>,
    /// Best epoch by fused validation Top-1, or the final parameters without validation data.
    pub best_params: Vec<ToyBackbone>,
    pub best_epoch: Option<usize>,
    pub ema_shadows: Vec<ToyBackbone>,
    pub lr_trace: Vec<f64>,
}

/// Fused `P_sys` Top-1 accuracy of `ensemble` on `data`.
pub fn fused_top1(ensemble: &[ToyBackbone], data: &Dataset, temperature: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Usage("empty dataset".into()));
    }
    let engine = EnsembleEngine::new(
        FusionConfig {
            temperature,
            k: 1,
        },
        RouterConfig::default(),
    );
    let mut correct = 0;
    for (x, &y) in data.features.iter().zip(&data.labels) {
        let opinions = ensemble
            .iter()
            .map(|b| ModelOpinion::from_logits(&b.model_id, &b.logits(x)))
            .collect::<Result<Vec<_>>>()?;
        if engine.predict(&opinions)?.top1() == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

fn check_shapes(data: &Dataset, ensemble: &[ToyBackbone], cfg: &TrainConfig) -> Result<()> {
    if ensemble.is_empty() {
        return Err(Error::Config("empty ensemble".into()));
    }
    for b in ensemble {
        if b.num_classes() != data.num_classes || b.num_classes() != cfg.loss.num_classes() {
            return Err(Error::Structural(format!(
                "backbone `{}` has {} classes; data has {}, loss config {}",
                b.model_id,
                b.num_classes(),
                data.num_classes,
                cfg.loss.num_classes()
            )));
        }
    }
    if let Some(x) = data.features.iter().find(|x| x.len() != ensemble[0].d_in()) {
        return Err(Error::Structural(format!(
            "feature vector of length {}, backbones expect {}",
            x.len(),
            ensemble[0].d_in()
        )));
    }
    if data.features.len() != data.labels.len() {
        return Err(Error::Structural("features and labels differ in length".into()));
    }
    if let Some(&y) = data.labels.iter().find(|&&y| y >= data.num_classes) {
        return Err(Error::Index {
            index: y,
            len: data.num_classes,
        });
    }
    Ok(())
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    params: Vec<ToyBackbone>,
    ema: Vec<ToyBackbone>,
    /// Trainable `(model, group)` pairs, in optimizer order.
    slots: Vec<(usize, usize)>,
    grads: Vec<Vec<f64>>,
    pending: usize,
    opt: AdamW,
    engine: EnsembleEngine,
    max_applied_norm: f64,
    nonfinite_zeroed: usize,
}

impl Trainer<'_> {
    fn zero_grads(&mut self) {
        self.grads.iter_mut().flatten().for_each(|g| *g = 0.0);
        self.pending = 0;
    }

    fn hard_flags(&self, logits: &[Vec<Vec<f64>>]) -> Result<Vec<bool>> {
        let batch = logits[0].len();
        (0..batch)
            .map(|s| {
                let opinions = logits
                    .iter()
                    .zip(&self.params)
                    .map(|(m, b)| ModelOpinion::from_logits(&b.model_id, &m[s]))
                    .collect::<Result<Vec<_>>>()?;
                Ok(self.engine.predict(&opinions)?.route)
            })
            .collect()
    }

    /// Adds this batch's gradient to the accumulator.
    fn backward(&mut self, feats: &[Vec<Vec<f64>>], grad_logits: &[Vec<Vec<f64>>]) {
        let scale = 1.0 / self.cfg.accum_steps as f64;
        for (slot, &(m, g)) in self.slots.iter().enumerate() {
            let acc = &mut self.grads[slot];
            let c = self.params[m].num_classes();
            for (h, dz) in feats[m].iter().zip(&grad_logits[m]) {
                match g {
                    WEIGHTS => {
                        for (r, hr) in h.iter().enumerate() {
                            for (j, d) in dz.iter().enumerate() {
                                acc[r * c + j] += scale * hr * d;
                            }
                        }
                    }
                    BIAS => {
                        for (j, d) in dz.iter().enumerate() {
                            acc[j] += scale * d;
                        }
                    }
                    _ => {
                        // d logits / d projection = x ⊗ (W · dz); unused while the projection is frozen
                    }
                }
            }
        }
        self.pending += 1;
    }

    fn apply_update(&mut self, lr: f64) {
        let clip = clip_gradients_tolerant(&mut self.grads, self.cfg.clip_max_norm);
        self.max_applied_norm = self.max_applied_norm.max(clip.norm_after);
        self.nonfinite_zeroed += clip.nonfinite_zeroed;
        self.opt.advance();
        for (slot, &(m, g)) in self.slots.iter().enumerate() {
            let theta = &mut self.params[m].groups[g].values;
            self.opt
                .update_group(slot, theta, &self.grads[slot], lr, self.cfg.weight_decay);
        }
        for (shadow, cur) in self.ema.iter_mut().zip(&self.params) {
            for (sg, cg) in shadow.groups.iter_mut().zip(&cur.groups) {
                optim::ema_update_in_place(&mut sg.values, &cg.values, self.cfg.ema_decay);
            }
        }
        self.zero_grads();
    }
}

/// Runs the robust fine-tuning loop. Deterministic for a given config.
pub fn train(
    data: &Dataset,
    ensemble: &[ToyBackbone],
    cfg: &TrainConfig,
    validation: Option<&Dataset>,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    cfg.validate()?;
    check_shapes(data, ensemble, cfg)?;
    if let Some(v) = validation {
        check_shapes(v, ensemble, cfg)?;
    }

    let slots: Vec<(usize, usize)> = ensemble
        .iter()
        .enumerate()
        .flat_map(|(m, b)| {
            b.groups
                .iter()
                .enumerate()
                .filter(|(_, g)| !g.frozen)
                .map(move |(g, _)| (m, g))
        })
        .collect();
    let sizes: Vec<usize> = slots
        .iter()
        .map(|&(m, g)| ensemble[m].groups[g].values.len())
        .collect();
    if slots.iter().any(|&(_, g)| g == PROJECTION) {
        return Err(Error::Config("unfreezing the projection group is not supported".into()));
    }
    let k = data.num_classes.min(3);
    let mut t = Trainer {
        cfg,
        params: ensemble.to_vec(),
        ema: ensemble.to_vec(),
        grads: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        slots,
        pending: 0,
        opt: AdamW::new(cfg.adam, &sizes),
        engine: EnsembleEngine::new(
            FusionConfig {
                temperature: cfg.temperature,
                k,
            },
            cfg.router,
        ),
        max_applied_norm: 0.0,
        nonfinite_zeroed: 0,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut lr_trace = Vec::with_capacity(cfg.epochs);
    let mut skipped_total = 0;
    let mut global_batch = 0usize;
    let mut best: Option<(f64, usize, Vec<ToyBackbone>)> = None;

    for epoch in 0..cfg.epochs {
        let lr = cfg.scheduler.lr_at(epoch);
        lr_trace.push(lr);
        order.shuffle(&mut rng);

        let mut sums = [0.0f64; 4];
        let mut processed = 0usize;
        let mut skipped = 0usize;
        let mut hard = 0usize;
        let mut seen = 0usize;
        for batch_idx in order.chunks(cfg.batch_size) {
            let gb = global_batch;
            global_batch += 1;
            let labels: Vec<usize> = batch_idx.iter().map(|&i| data.labels[i]).collect();
            let feats: Vec<Vec<Vec<f64>>> = t
                .params
                .iter()
                .map(|b| batch_idx.iter().map(|&i| b.features(&data.features[i])).collect())
                .collect();
            let mut logits: Vec<Vec<Vec<f64>>> = t
                .params
                .iter()
                .zip(&feats)
                .map(|(b, fs)| fs.iter().map(|h| b.logits_from_features(h)).collect())
                .collect();
            if cfg.nan_batches.contains(&gb) {
                logits[0][0][0] = f64::NAN;
            }

            let outcome = if logits.iter().flatten().flatten().any(|z| !z.is_finite()) {
                Err(Error::PoisonedLoss("non-finite logits".into()))
            } else {
                t.hard_flags(&logits).and_then(|flags| {
                    let lb = LossBatch {
                        logits: &logits,
                        labels: &labels,
                        hard_flags: &flags,
                        temperature: cfg.temperature,
                    };
                    total_loss(&lb, &cfg.loss).map(|l| (l, flags))
                })
            };
            let (loss, flags) = match outcome {
                Ok(v) => v,
                Err(Error::PoisonedLoss(msg)) => {
                    log::debug!("epoch {epoch} batch {gb}: skipped ({msg})");
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            processed += 1;
            seen += labels.len();
            hard += flags.iter().filter(|f| **f).count();
            sums[0] += loss.individual.iter().sum::<f64>();
            sums[1] += loss.global;
            sums[2] += loss.diversity;
            sums[3] += loss.total;

            t.backward(&feats, &loss.grad_logits);
            if t.pending == cfg.accum_steps {
                t.apply_update(lr);
            }
        }
        if t.pending > 0 {
            t.apply_update(lr);
        }
        if processed == 0 {
            return Err(Error::TrainingCollapse { epoch });
        }
        skipped_total += skipped;

        let train_top1 = fused_top1(&t.params, data, cfg.temperature)?;
        let val_top1 = validation
            .map(|v| fused_top1(&t.params, v, cfg.temperature))
            .transpose()?;
        if let Some(v) = val_top1 {
            if best.as_ref().is_none_or(|(b, _, _)| v > *b) {
                best = Some((v, epoch, t.params.clone()));
            }
        }
        let n = processed as f64;
        epochs.push(EpochStats {
            epoch,
            individual: sums[0] / n,
            global: sums[1] / n,
            diversity: sums[2] / n,
            total: sums[3] / n,
            lr,
            skipped,
            hard_fraction: hard as f64 / seen.max(1) as f64,
            train_top1,
            val_top1,
        });
    }

    let (best_epoch, best_params) = match best {
        Some((_, e, p)) => (Some(e), p),
        None => (None, t.params.clone()),
    };
    Ok(TrainReport {
        epochs,
        skipped_batch_count: skipped_total,
        optimizer_steps: t.opt.steps(),
        max_applied_grad_norm: t.max_applied_norm,
        nonfinite_grads_zeroed: t.nonfinite_zeroed,
        final_params: t.params,
        best_params,
        best_epoch,
        ema_shadows: t.ema,
        lr_trace,
    })
}

/// Training curves as CSV: one row per epoch.
pub fn curves_csv(report: &TrainReport) -> String {
    let mut out = String::from("epoch,individual,global,diversity,total,lr,skipped,hard_fraction,train_top1,val_top1\n");
    for e in &report.epochs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            e.epoch,
            e.individual,
            e.global,
            e.diversity,
            e.total,
            e.lr,
            e.skipped,
            e.hard_fraction,
            e.train_top1,
            e.val_top1.map(|v| v.to_string()).unwrap_or_default()
        ));
    }
    out
}
