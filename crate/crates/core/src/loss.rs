//! Hard-sample-aware joint loss and its hand-derived gradient.
//!
//! The objective for one batch is
//!
//! ```text
//! L = Σ_i mean_x FL(P_i(x), y) + λ1 · mean_x FL(P_sys(x), y) + λ2 · L_div
//! L_div = mean_{x ∈ hard} [ -Σ_{i≠j} JS(P_i(x) ‖ P_j(x)) ]
//! ```
//!
//! where `FL(p, y) = -α_y (1 - p_y)^γ ln p_y` and `P_sys` is the
//! entropy-weighted mixture produced by [`crate::fusion`]. Gradients are
//! returned with respect to every backbone's logits, chaining through the
//! softmax, the fusion weights (optionally) and the Jensen-Shannon terms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{entropy_of, softmax, ClassDistribution, PROB_FLOOR};

/// How `Σ_{i≠j}` in the diversity term counts model pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Every ordered pair `(i, j)` with `i ≠ j`; each unordered pair counts twice.
    #[default]
    Ordered,
    Unordered,
}

impl PairMode {
    fn multiplicity(self) -> f64 {
        match self {
            PairMode::Ordered => 2.0,
            PairMode::Unordered => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub gamma: f64,
    /// Class-balance weights, normalized to mean 1.
    pub alpha_per_class: Vec<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Reserved.
    #[serde(default)]
    pub penalty_free: bool,
    #[serde(default)]
    pub pair_mode: PairMode,
    /// Whether the global focal term differentiates through the fusion weights.
    #[serde(default = "default_true")]
    pub grad_through_weights: bool,
}

fn default_true() -> bool {
    true
}

impl LossConfig {
    /// Uniform class weights, `γ = 2`, `λ1 = 1`, `λ2 = 0.1`.
    pub fn new(num_classes: usize) -> Self {
        Self {
            gamma: 2.0,
            alpha_per_class: vec![1.0; num_classes],
            lambda1: 1.0,
            lambda2: 0.1,
            penalty_free: false,
            pair_mode: PairMode::Ordered,
            grad_through_weights: true,
        }
    }

    /// Class weights inversely proportional to `class_counts`.
    pub fn with_inverse_frequency(class_counts: &[usize]) -> Result<Self> {
        let mut cfg = Self::new(class_counts.len());
        cfg.alpha_per_class = class_balance_weights(class_counts)?;
        Ok(cfg)
    }

    pub fn num_classes(&self) -> usize {
        self.alpha_per_class.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return Err(Error::Config(
                "gamma, lambda1 and lambda2 must be non-negative".into(),
            ));
        }
        if self.alpha_per_class.is_empty() || self.alpha_per_class.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::Config("class weights must be positive".into()));
        }
        let mean = self.alpha_per_class.iter().sum::<f64>() / self.alpha_per_class.len() as f64;
        if (mean - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("class weights have mean {mean}, expected 1")));
        }
        Ok(())
    }
}

/// `α_c ∝ 1 / count_c`, rescaled to mean 1. Empty classes are treated as a count of one.
pub fn class_balance_weights(class_counts: &[usize]) -> Result<Vec<f64>> {
    if class_counts.is_empty() {
        return Err(Error::Config("no classes".into()));
    }
    let inv: Vec<f64> = class_counts.iter().map(|&n| 1.0 / n.max(1) as f64).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    Ok(inv.into_iter().map(|w| w / mean).collect())
}

/// Focal loss of one prediction.
pub fn focal_loss(dist: &ClassDistribution, label: usize, gamma: f64, alpha: f64) -> Result<f64> {
    if label >= dist.num_classes() {
        return Err(Error::Index {
            index: label,
            len: dist.num_classes(),
        });
    }
    Ok(focal_value(dist.get(label), gamma, alpha))
}

fn focal_value(p_t: f64, gamma: f64, alpha: f64) -> f64 {
    let p = p_t.max(PROB_FLOOR);
    let modulation = if gamma == 0.0 { 1.0 } else { (1.0 - p_t).max(0.0).powf(gamma) };
    -alpha * modulation * p.ln()
}

/// d FL / d p_t.
fn focal_derivative(p_t: f64, gamma: f64, alpha: f64) -> f64 {
    let p = p_t.max(PROB_FLOOR);
    let q = (1.0 - p_t).max(0.0);
    let inv = if p_t >= PROB_FLOOR { 1.0 / p } else { 0.0 };
    let (modulation, modulation_slope) = if gamma == 0.0 {
        (1.0, 0.0)
    } else if q == 0.0 {
        (0.0, 0.0)
    } else {
        (q.powf(gamma), gamma * q.powf(gamma - 1.0))
    };
    -alpha * (modulation * inv - modulation_slope * p.ln())
}

/// Kullback-Leibler divergence in nats with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.max(PROB_FLOOR) / qi.max(PROB_FLOOR)).ln())
        .sum()
}

/// Jensen-Shannon divergence in nats, in `[0, ln 2]`.
pub fn js_divergence(p: &ClassDistribution, q: &ClassDistribution) -> Result<f64> {
    if p.num_classes() != q.num_classes() {
        return Err(Error::Structural(format!(
            "distributions over {} and {} classes",
            p.num_classes(),
            q.num_classes()
        )));
    }
    Ok(js_of(p.probs(), q.probs()))
}

fn js_of(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let js = 0.5 * kl_divergence(p, &m) + 0.5 * kl_divergence(q, &m);
    js.clamp(0.0, std::f64::consts::LN_2)
}

fn pairwise_js_sum(dists: &[&[f64]], pair_mode: PairMode) -> f64 {
    let mut sum = 0.0;
    for i in 0..dists.len() {
        for j in (i + 1)..dists.len() {
            sum += js_of(dists[i], dists[j]);
        }
    }
    pair_mode.multiplicity() * sum
}

/// Mean over flagged samples of the negated pairwise JS sum; zero when nothing is flagged.
pub fn diversity_loss_hard(
    opinions_per_sample: &[Vec<ClassDistribution>],
    hard_flags: &[bool],
    pair_mode: PairMode,
) -> Result<f64> {
    if opinions_per_sample.len() != hard_flags.len() {
        return Err(Error::Structural(format!(
            "{} samples but {} hard flags",
            opinions_per_sample.len(),
            hard_flags.len()
        )));
    }
    let hard: Vec<&Vec<ClassDistribution>> = opinions_per_sample
        .iter()
        .zip(hard_flags)
        .filter_map(|(o, &h)| h.then_some(o))
        .collect();
    if hard.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = hard
        .iter()
        .map(|ops| {
            let dists: Vec<&[f64]> = ops.iter().map(|d| d.probs()).collect();
            -pairwise_js_sum(&dists, pair_mode)
        })
        .sum();
    Ok(total / hard.len() as f64)
}

/// Logits for one batch, indexed `[model][sample][class]`.
#[derive(Debug, Clone, Copy)]
pub struct LossBatch<'a> {
    pub logits: &'a [Vec<Vec<f64>>],
    pub labels: &'a [usize],
    pub hard_flags: &'a [bool],
    /// Fusion temperature used to form `P_sys`.
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Batch-mean focal loss per backbone.
    pub individual: Vec<f64>,
    pub global: f64,
    pub diversity: f64,
    pub total: f64,
    /// `d total / d logits`, indexed `[model][sample][class]`.
    pub grad_logits: Vec<Vec<Vec<f64>>>,
}

impl LossBatch<'_> {
    fn check(&self, num_classes: usize) -> Result<(usize, usize)> {
        let n_models = self.logits.len();
        if n_models == 0 {
            return Err(Error::Structural("no backbones in batch".into()));
        }
        let batch = self.labels.len();
        if batch == 0 {
            return Err(Error::Structural("empty batch".into()));
        }
        if self.hard_flags.len() != batch {
            return Err(Error::Structural(format!(
                "{batch} labels but {} hard flags",
                self.hard_flags.len()
            )));
        }
        for (i, m) in self.logits.iter().enumerate() {
            if m.len() != batch {
                return Err(Error::Structural(format!(
                    "backbone {i} has {} rows, expected {batch}",
                    m.len()
                )));
            }
            if let Some(row) = m.iter().find(|r| r.len() != num_classes) {
                return Err(Error::Structural(format!(
                    "backbone {i} emits {} logits, expected {num_classes}",
                    row.len()
                )));
            }
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Index {
                index: y,
                len: num_classes,
            });
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok((n_models, batch))
    }
}

/// Evaluates the joint loss and its gradient with respect to every logit.
///
/// Returns [`Error::PoisonedLoss`] when any term or gradient entry is not finite.
#[allow(clippy::needless_range_loop)]
pub fn total_loss(batch: &LossBatch<'_>, config: &LossConfig) -> Result<LossBreakdown> {
    let num_classes = config.num_classes();
    let (n_models, batch_size) = batch.check(num_classes)?;
    let inv_b = 1.0 / batch_size as f64;
    let n_hard = batch.hard_flags.iter().filter(|h| **h).count();
    let pair_scale = config.pair_mode.multiplicity();
    let tau = batch.temperature;

    let mut individual = vec![0.0; n_models];
    let mut global = 0.0;
    let mut diversity = 0.0;
    let mut grad_logits = vec![vec![vec![0.0; num_classes]; batch_size]; n_models];

    for s in 0..batch_size {
        let y = batch.labels[s];
        let alpha_y = config.alpha_per_class[y];
        let probs: Vec<Vec<f64>> = (0..n_models).map(|i| softmax(&batch.logits[i][s])).collect();
        let scores: Vec<f64> = probs.iter().map(|p| -entropy_of(p) / tau).collect();
        let weights = softmax(&scores);
        let mut p_sys = vec![0.0; num_classes];
        for (p, w) in probs.iter().zip(&weights) {
            for (acc, v) in p_sys.iter_mut().zip(p) {
                *acc += w * v;
            }
        }

        // d L / d P_i for this sample
        let mut grad_p = vec![vec![0.0; num_classes]; n_models];

        for i in 0..n_models {
            individual[i] += inv_b * focal_value(probs[i][y], config.gamma, alpha_y);
            grad_p[i][y] += inv_b * focal_derivative(probs[i][y], config.gamma, alpha_y);
        }

        global += inv_b * focal_value(p_sys[y], config.gamma, alpha_y);
        let g_sys_y = config.lambda1 * inv_b * focal_derivative(p_sys[y], config.gamma, alpha_y);
        for i in 0..n_models {
            grad_p[i][y] += weights[i] * g_sys_y;
        }
        if config.grad_through_weights && g_sys_y != 0.0 {
            // dL/dα_i = g_sys · P_i, then back through α = softmax(-U / τ)
            let g_alpha: Vec<f64> = probs.iter().map(|p| g_sys_y * p[y]).collect();
            let mean: f64 = g_alpha.iter().zip(&weights).map(|(g, w)| g * w).sum();
            for i in 0..n_models {
                let g_score = weights[i] * (g_alpha[i] - mean);
                let g_entropy = -g_score / tau;
                for (c, &p) in probs[i].iter().enumerate() {
                    if p > 0.0 {
                        grad_p[i][c] -= g_entropy * (p.max(PROB_FLOOR).ln() + 1.0);
                    }
                }
            }
        }

        if batch.hard_flags[s] {
            let dists: Vec<&[f64]> = probs.iter().map(Vec::as_slice).collect();
            diversity -= pairwise_js_sum(&dists, config.pair_mode) / n_hard as f64;
            // d JS(p‖q) / d p_c = ½ ln(p_c / m_c)
            let scale = -config.lambda2 * pair_scale / n_hard as f64;
            for i in 0..n_models {
                for j in 0..n_models {
                    if i == j {
                        continue;
                    }
                    for c in 0..num_classes {
                        let p = probs[i][c];
                        let m = 0.5 * (p + probs[j][c]);
                        if p > 0.0 {
                            grad_p[i][c] +=
                                scale * 0.5 * (p.max(PROB_FLOOR) / m.max(PROB_FLOOR)).ln();
                        }
                    }
                }
            }
        }

        for i in 0..n_models {
            let dot: f64 = grad_p[i].iter().zip(&probs[i]).map(|(g, p)| g * p).sum();
            for c in 0..num_classes {
                grad_logits[i][s][c] = probs[i][c] * (grad_p[i][c] - dot);
            }
        }
    }

    let total = individual.iter().sum::<f64>() + config.lambda1 * global + config.lambda2 * diversity;
    if !total.is_finite() {
        return Err(Error::PoisonedLoss(format!("total = {total}")));
    }
    if grad_logits.iter().flatten().flatten().any(|g| !g.is_finite()) {
        return Err(Error::PoisonedLoss("non-finite gradient".into()));
    }
    Ok(LossBreakdown {
        individual,
        global,
        diversity,
        total,
        grad_logits,
    })
}
