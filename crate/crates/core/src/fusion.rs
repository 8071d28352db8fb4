//! Entropy-weighted fusion of per-model class distributions and the
//! confidence-gap routing predicate.
//!
//! Every backend emits a [`ClassDistribution`]. Each distribution's
//! predictive entropy `U_i` (in nats) sets its fusion weight through a
//! tempered softmax over `-U_i / temperature`, so more certain models get a
//! larger share of the fused distribution `P_sys = Σ α_i P_i`. The Top-K
//! classes of `P_sys` form the candidate set; the top probability `S` and the
//! top-two margin `Δ` decide whether a sample takes the direct path or is
//! escalated to arbitration.

use serde::{Deserialize, Serialize};

use crate::arbiter::ArbitrationResult;
use crate::error::{Error, Result};

/// Probabilities below this floor are clamped before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on `Σ p = 1` for a valid distribution.
pub const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassDistribution {
    probs: Vec<f64>,
}

impl ClassDistribution {
    /// Validates that every entry lies in `[0, 1]` and the entries sum to one.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidInput("empty distribution".into()));
        }
        if let Some((c, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0 || **p > 1.0)
        {
            return Err(Error::InvalidInput(format!(
                "probability {p} for class {c} outside [0, 1]"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    /// Point mass on `class`.
    pub fn one_hot(class: usize, num_classes: usize) -> Result<Self> {
        if class >= num_classes {
            return Err(Error::Index {
                index: class,
                len: num_classes,
            });
        }
        let mut probs = vec![0.0; num_classes];
        probs[class] = 1.0;
        Ok(Self { probs })
    }

    pub fn uniform(num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidInput("zero classes".into()));
        }
        Ok(Self {
            probs: vec![1.0 / num_classes as f64; num_classes],
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn get(&self, class: usize) -> f64 {
        self.probs[class]
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.probs
    }
}

/// One backend's view of a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOpinion {
    pub model_id: String,
    pub dist: ClassDistribution,
    /// Predictive entropy of `dist` in nats.
    pub entropy: f64,
}

impl ModelOpinion {
    pub fn new(model_id: impl Into<String>, dist: ClassDistribution) -> Self {
        let entropy = entropy(&dist);
        Self {
            model_id: model_id.into(),
            dist,
            entropy,
        }
    }

    /// Softmax of `logits`, tagged with `model_id`.
    pub fn from_logits(model_id: impl Into<String>, logits: &[f64]) -> Result<Self> {
        Ok(Self::new(model_id, normalize(logits)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Softmax temperature applied to negated entropies.
    pub temperature: f64,
    /// Candidate set size.
    pub k: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            k: 3,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        if self.k == 0 || self.k > num_classes {
            return Err(Error::Config(format!(
                "k = {} outside [1, {num_classes}]",
                self.k
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterConfig {
    pub tau_conf: f64,
    pub tau_gap: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            tau_conf: 0.60,
            tau_gap: 0.10,
        }
    }
}

impl RouterConfig {
    pub fn new(tau_conf: f64, tau_gap: f64) -> Result<Self> {
        let cfg = Self { tau_conf, tau_gap };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau_conf", self.tau_conf), ("tau_gap", self.tau_gap)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsemblePrediction {
    /// Fusion weight per opinion, in opinion order.
    pub weights: Vec<f64>,
    pub p_sys: ClassDistribution,
    /// Top-K classes of `p_sys`, most probable first.
    pub candidates: Vec<usize>,
    pub confidence: f64,
    pub gap: f64,
    /// True when the sample is escalated to arbitration.
    pub route: bool,
}

impl EnsemblePrediction {
    /// Most probable fused class.
    pub fn top1(&self) -> usize {
        self.candidates[0]
    }
}

/// Numerically stable softmax.
pub fn normalize(logits: &[f64]) -> Result<ClassDistribution> {
    if logits.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 logits, got {}",
            logits.len()
        )));
    }
    if let Some((c, z)) = logits.iter().enumerate().find(|(_, z)| !z.is_finite()) {
        return Err(Error::InvalidInput(format!("logit {z} for class {c} is not finite")));
    }
    Ok(ClassDistribution {
        probs: softmax(logits),
    })
}

/// Max-shifted softmax without validation.
pub(crate) fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(dist: &ClassDistribution) -> f64 {
    entropy_of(dist.probs())
}

pub(crate) fn entropy_of(probs: &[f64]) -> f64 {
    let h: f64 = probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|&p| -p * p.max(PROB_FLOOR).ln())
        .sum();
    h.clamp(0.0, (probs.len() as f64).ln())
}

/// Fusion weights `α_i ∝ exp(-U_i / temperature)`.
pub fn fusion_weights(entropies: &[f64], config: &FusionConfig) -> Result<Vec<f64>> {
    if !(config.temperature > 0.0) || !config.temperature.is_finite() {
        return Err(Error::Config(format!(
            "temperature must be positive and finite, got {}",
            config.temperature
        )));
    }
    if entropies.is_empty() {
        return Err(Error::Structural("no entropies to weight".into()));
    }
    if let Some(u) = entropies.iter().find(|u| !u.is_finite() || **u < 0.0) {
        return Err(Error::InvalidInput(format!("entropy {u} is not a finite non-negative value")));
    }
    let scores: Vec<f64> = entropies.iter().map(|u| -u / config.temperature).collect();
    Ok(softmax(&scores))
}

/// Weighted mixture `Σ α_i P_i`.
pub fn aggregate(opinions: &[ModelOpinion], weights: &[f64]) -> Result<ClassDistribution> {
    if opinions.is_empty() {
        return Err(Error::Structural("no opinions to aggregate".into()));
    }
    if opinions.len() != weights.len() {
        return Err(Error::Structural(format!(
            "{} opinions but {} weights",
            opinions.len(),
            weights.len()
        )));
    }
    let c = opinions[0].dist.num_classes();
    if let Some(o) = opinions.iter().find(|o| o.dist.num_classes() != c) {
        return Err(Error::Structural(format!(
            "model `{}` reports {} classes, expected {c}",
            o.model_id,
            o.dist.num_classes()
        )));
    }
    let wsum: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0)) || (wsum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::InvalidInput(format!(
            "weights must be non-negative and sum to 1 (sum = {wsum})"
        )));
    }
    let mut probs = vec![0.0; c];
    for (o, &w) in opinions.iter().zip(weights) {
        for (acc, p) in probs.iter_mut().zip(o.dist.probs()) {
            *acc += w * p;
        }
    }
    // rounding can push a mixture entry a hair past 1
    probs.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    Ok(ClassDistribution { probs })
}

/// Indices of the `k` largest probabilities, descending; lower index wins ties.
pub fn top_k(p_sys: &ClassDistribution, k: usize) -> Result<Vec<usize>> {
    let c = p_sys.num_classes();
    if k == 0 || k > c {
        return Err(Error::Config(format!("k = {k} outside [1, {c}]")));
    }
    let probs = p_sys.probs();
    let mut idx: Vec<usize> = (0..c).collect();
    let by_rank = |a: &usize, b: &usize| probs[*b].total_cmp(&probs[*a]).then(a.cmp(b));
    if k < c {
        idx.select_nth_unstable_by(k - 1, by_rank);
        idx.truncate(k);
    }
    idx.sort_unstable_by(by_rank);
    Ok(idx)
}

/// Returns `(S, Δ)`. With a single candidate `Δ` is defined as `S`.
pub fn confidence_and_gap(p_sys: &ClassDistribution, candidates: &[usize]) -> Result<(f64, f64)> {
    let first = *candidates
        .first()
        .ok_or_else(|| Error::Structural("empty candidate list".into()))?;
    for &c in candidates {
        if c >= p_sys.num_classes() {
            return Err(Error::Index {
                index: c,
                len: p_sys.num_classes(),
            });
        }
    }
    let s = p_sys.get(first);
    let gap = match candidates.get(1) {
        Some(&second) => (s - p_sys.get(second)).max(0.0),
        None => s,
    };
    Ok((s, gap))
}

/// Escalate when the sample is uncertain or contested. Both comparisons are strict.
pub fn route(confidence: f64, gap: f64, config: &RouterConfig) -> bool {
    confidence < config.tau_conf || gap < config.tau_gap
}

/// Final label: `c1` on the direct path, the arbiter's label otherwise.
pub fn decide(prediction: &EnsemblePrediction, arbitration: Option<&ArbitrationResult>) -> Result<usize> {
    if !prediction.route {
        return Ok(prediction.top1());
    }
    let result = arbitration.ok_or_else(|| {
        Error::Contract("routed prediction requires an arbitration result".into())
    })?;
    if result.fell_back || !prediction.candidates.contains(&result.label) {
        return Ok(prediction.top1());
    }
    Ok(result.label)
}

/// Fuses opinions and applies the router.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnsembleEngine {
    pub fusion: FusionConfig,
    pub router: RouterConfig,
}

impl EnsembleEngine {
    pub fn new(fusion: FusionConfig, router: RouterConfig) -> Self {
        Self { fusion, router }
    }

    pub fn predict(&self, opinions: &[ModelOpinion]) -> Result<EnsemblePrediction> {
        let entropies: Vec<f64> = opinions.iter().map(|o| o.entropy).collect();
        let weights = fusion_weights(&entropies, &self.fusion)?;
        let p_sys = aggregate(opinions, &weights)?;
        self.fusion.validate(p_sys.num_classes())?;
        let candidates = top_k(&p_sys, self.fusion.k)?;
        let (confidence, gap) = confidence_and_gap(&p_sys, &candidates)?;
        let route = route(confidence, gap, &self.router);
        Ok(EnsemblePrediction {
            weights,
            p_sys,
            candidates,
            confidence,
            gap,
            route,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(p: &[f64]) -> ClassDistribution {
        ClassDistribution::new(p.to_vec()).unwrap()
    }

    fn approx(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn normalize_examples() {
        approx(normalize(&[0.0, 0.0]).unwrap().probs(), &[0.5, 0.5], 1e-15);
        let d = normalize(&[1000.0, 0.0]).unwrap();
        assert!((d.get(0) - 1.0).abs() < 1e-15 && d.get(1) < 1e-300);
        approx(
            normalize(&[1f64.ln(), 3f64.ln()]).unwrap().probs(),
            &[0.25, 0.75],
            1e-15,
        );
    }

    #[test]
    fn normalize_rejects_bad_logits() {
        assert!(matches!(normalize(&[f64::NAN, 0.0]), Err(Error::InvalidInput(_))));
        assert!(matches!(normalize(&[f64::INFINITY, 0.0]), Err(Error::InvalidInput(_))));
        assert!(normalize(&[1.0]).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&dist(&[1.0, 0.0, 0.0])), 0.0);
        let u = ClassDistribution::uniform(306).unwrap();
        assert!((entropy(&u) - 306f64.ln()).abs() < 1e-9);
        assert!((entropy(&u) - 5.7236).abs() < 1e-4);
        let h = entropy(&dist(&[0.5, 0.25, 0.25]));
        assert!((h - (0.5 * 2f64.ln() + 0.5 * 4f64.ln())).abs() < 1e-12);
        assert!((h - 1.0397).abs() < 1e-4);
    }

    #[test]
    fn fusion_weight_examples() {
        let cfg = FusionConfig::default();
        approx(&fusion_weights(&[0.7; 4], &cfg).unwrap(), &[0.25; 4], 1e-15);
        let ln2 = 2f64.ln();
        approx(
            &fusion_weights(&[0.0, ln2, ln2, ln2], &cfg).unwrap(),
            &[0.4, 0.2, 0.2, 0.2],
            1e-12,
        );
        let hot = FusionConfig {
            temperature: 1e6,
            ..cfg
        };
        approx(&fusion_weights(&[0.0, 1.0], &hot).unwrap(), &[0.5, 0.5], 1e-6);
    }

    #[test]
    fn fusion_weights_reject_bad_temperature() {
        for t in [0.0, -1.0, f64::NAN] {
            let cfg = FusionConfig { temperature: t, k: 3 };
            assert!(matches!(fusion_weights(&[0.1, 0.2], &cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn aggregate_examples() {
        let a = ModelOpinion::new("a", dist(&[0.8, 0.2]));
        let b = ModelOpinion::new("b", dist(&[0.2, 0.8]));
        assert_eq!(aggregate(std::slice::from_ref(&a), &[1.0]).unwrap(), a.dist);
        approx(
            aggregate(&[a.clone(), b.clone()], &[0.75, 0.25]).unwrap().probs(),
            &[0.65, 0.35],
            1e-15,
        );
        let x = ModelOpinion::new("x", dist(&[1.0, 0.0]));
        let y = ModelOpinion::new("y", dist(&[0.0, 1.0]));
        approx(aggregate(&[x, y], &[0.5, 0.5]).unwrap().probs(), &[0.5, 0.5], 0.0);
        assert!(matches!(aggregate(&[a, b], &[1.0]), Err(Error::Structural(_))));
    }

    #[test]
    fn aggregate_rejects_mixed_class_counts() {
        let a = ModelOpinion::new("a", dist(&[0.5, 0.5]));
        let b = ModelOpinion::new("b", dist(&[0.2, 0.3, 0.5]));
        assert!(matches!(aggregate(&[a, b], &[0.5, 0.5]), Err(Error::Structural(_))));
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k(&dist(&[0.1, 0.5, 0.4]), 2).unwrap(), vec![1, 2]);
        assert_eq!(top_k(&dist(&[0.4, 0.4, 0.2]), 2).unwrap(), vec![0, 1]);
        assert_eq!(
            top_k(&ClassDistribution::uniform(10).unwrap(), 3).unwrap(),
            vec![0, 1, 2]
        );
        assert!(matches!(top_k(&dist(&[0.5, 0.5]), 3), Err(Error::Config(_))));
        assert!(matches!(top_k(&dist(&[0.5, 0.5]), 0), Err(Error::Config(_))));
    }

    #[test]
    fn confidence_gap_examples() {
        let p = dist(&[0.5, 0.3, 0.2]);
        let (s, d) = confidence_and_gap(&p, &top_k(&p, 3).unwrap()).unwrap();
        assert_eq!(s, 0.5);
        assert!((d - 0.2).abs() < 1e-15);
        let p = dist(&[0.0, 1.0, 0.0]);
        assert_eq!(confidence_and_gap(&p, &top_k(&p, 3).unwrap()).unwrap(), (1.0, 1.0));
        let p = dist(&[0.34, 0.33, 0.33]);
        let (s, d) = confidence_and_gap(&p, &top_k(&p, 3).unwrap()).unwrap();
        assert_eq!(s, 0.34);
        assert!((d - 0.01).abs() < 1e-15);
        // single candidate
        assert_eq!(confidence_and_gap(&p, &[0]).unwrap(), (0.34, 0.34));
    }

    #[test]
    fn route_examples() {
        let cfg = RouterConfig::default();
        assert!(!route(0.9, 0.5, &cfg));
        assert!(route(0.55, 0.5, &cfg));
        assert!(route(0.70, 0.05, &cfg));
        // exactly at threshold takes the direct path
        assert!(!route(0.60, 0.10, &cfg));
    }

    fn prediction(route: bool) -> EnsemblePrediction {
        EnsemblePrediction {
            weights: vec![1.0],
            p_sys: ClassDistribution::uniform(10).unwrap(),
            candidates: vec![7, 2, 9],
            confidence: 0.1,
            gap: 0.0,
            route,
        }
    }

    fn arbitration(label: usize, fell_back: bool) -> ArbitrationResult {
        ArbitrationResult {
            label,
            raw_response: String::new(),
            valid: !fell_back,
            fell_back,
            latency_ms: 0.0,
            from_cache: false,
            cache_warning: None,
        }
    }

    #[test]
    fn decide_examples() {
        assert_eq!(decide(&prediction(false), None).unwrap(), 7);
        assert_eq!(decide(&prediction(true), Some(&arbitration(2, false))).unwrap(), 2);
        assert_eq!(decide(&prediction(true), Some(&arbitration(7, true))).unwrap(), 7);
        assert!(matches!(decide(&prediction(true), None), Err(Error::Contract(_))));
    }

    fn simplex(c: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-6.0f64..6.0, c).prop_map(|z| softmax(&z))
    }

    proptest! {
        #[test]
        fn weights_are_a_permutation_equivariant_simplex(
            ents in prop::collection::vec(0.0f64..5.0, 2..8),
            temp in 0.05f64..10.0,
            rot in 0usize..8,
        ) {
            let cfg = FusionConfig { temperature: temp, k: 1 };
            let w = fusion_weights(&ents, &cfg).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(w.iter().all(|x| *x >= 0.0));
            let r = rot % ents.len();
            let mut rotated = ents.clone();
            rotated.rotate_left(r);
            let mut expected = w.clone();
            expected.rotate_left(r);
            let got = fusion_weights(&rotated, &cfg).unwrap();
            for (a, b) in got.iter().zip(&expected) {
                prop_assert!((a - b).abs() < 1e-15);
            }
        }

        #[test]
        fn top_k_agrees_with_full_sort(p in simplex(12), k in 1usize..12) {
            let d = ClassDistribution::new(p.clone()).unwrap();
            let mut all: Vec<usize> = (0..p.len()).collect();
            all.sort_by(|a, b| p[*b].partial_cmp(&p[*a]).unwrap().then(a.cmp(b)));
            all.truncate(k);
            prop_assert_eq!(top_k(&d, k).unwrap(), all);
        }

        #[test]
        fn route_is_monotone_in_thresholds(
            s in 0.0f64..1.0, g in 0.0f64..1.0,
            tc in 0.0f64..1.0, tg in 0.0f64..1.0,
            dc in 0.0f64..1.0, dg in 0.0f64..1.0,
        ) {
            let lo = RouterConfig { tau_conf: tc, tau_gap: tg };
            let hi = RouterConfig { tau_conf: (tc + dc).min(1.0), tau_gap: (tg + dg).min(1.0) };
            if route(s, g, &lo) {
                prop_assert!(route(s, g, &hi));
            }
        }

        #[test]
        fn gap_never_exceeds_confidence(p in simplex(6)) {
            let d = ClassDistribution::new(p).unwrap();
            let cands = top_k(&d, 3).unwrap();
            let (s, g) = confidence_and_gap(&d, &cands).unwrap();
            prop_assert!(g >= 0.0 && g <= s);
            prop_assert_eq!(g == s, d.get(cands[1]) == 0.0);
        }
    }
}
