//! Offline trigger-rate sweeps over cached evaluation records.
//!
//! Confidence, gap and candidates do not depend on router thresholds, so each
//! threshold pair only re-applies the routing predicate and a simulated
//! arbiter to the cached records.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::pipeline::EvalRecord;
use crate::arbiter::{mock_arbitrate, ArbitrationRequest, AttributeSet, DescriptorDb};
use crate::backends::SampleRef;
use crate::error::{Error, Result};
use crate::fusion::{route, RouterConfig};

pub type ArbiterFn = Arc<dyn Fn(&EvalRecord) -> usize + Send + Sync>;

/// Simulated arbiter applied to routed records.
#[derive(Clone)]
pub enum ArbiterModel {
    /// Picks the true label whenever it is a candidate, else `c1`.
    PerfectInCandidates,
    /// Correct with probability `p` when possible, otherwise a wrong candidate.
    /// The draw is a function of `(seed, sample_id)` only.
    FixedAccuracy { p: f64, seed: u64 },
    /// Token-overlap arbiter on per-sample attribute fixtures.
    Mock {
        attributes: Arc<HashMap<String, AttributeSet>>,
        descriptors: Arc<DescriptorDb>,
        lambda_pen: f64,
    },
    Custom(ArbiterFn),
}

impl std::fmt::Debug for ArbiterModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::PerfectInCandidates => f.write_str("PerfectInCandidates"),
            Self::FixedAccuracy { p, seed } => write!(f, "FixedAccuracy {{ p: {p}, seed: {seed} }}"),
            Self::Mock { lambda_pen, .. } => write!(f, "Mock {{ lambda_pen: {lambda_pen} }}"),
            Self::Custom(_) => f.write_str("Custom"),
        }
    }
}

impl ArbiterModel {
    /// Label chosen for a routed record; always one of its candidates.
    pub fn choose(&self, r: &EvalRecord) -> Result<usize> {
        let cands = &r.prediction.candidates;
        let c1 = cands[0];
        let label = match self {
            Self::PerfectInCandidates => {
                if cands.contains(&r.true_label) {
                    r.true_label
                } else {
                    c1
                }
            }
            Self::FixedAccuracy { p, seed } => {
                let mut h = Sha256::new();
                h.update(seed.to_le_bytes());
                h.update(r.sample_id.as_bytes());
                let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
                let correct = rng.random::<f64>() < *p;
                let wrong: Vec<usize> = cands.iter().copied().filter(|&c| c != r.true_label).collect();
                if correct && cands.contains(&r.true_label) {
                    r.true_label
                } else if wrong.is_empty() {
                    c1
                } else {
                    wrong[rng.random_range(0..wrong.len())]
                }
            }
            Self::Mock {
                attributes,
                descriptors,
                lambda_pen,
            } => {
                let req = ArbitrationRequest::new(SampleRef::id_only(r.sample_id.clone()), cands.clone(), descriptors)?;
                let empty = AttributeSet::default();
                mock_arbitrate(attributes.get(&r.sample_id).unwrap_or(&empty), &req, *lambda_pen)
            }
            Self::Custom(f) => f(r),
        };
        Ok(if cands.contains(&label) { label } else { c1 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tau_conf: f64,
    pub tau_gap: f64,
    pub trigger_rate: f64,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    /// Requested trigger rate, or `None` for the accuracy-maximizing point.
    pub target: Option<f64>,
    pub point: SweepPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    /// Top-1 with arbitration disabled.
    pub ensemble_top1: f64,
    /// Fraction of samples whose true label is a candidate.
    pub candidate_recall: f64,
    pub operating_points: Vec<OperatingPoint>,
}

/// Trigger rates reported alongside the best point.
pub const REPORTED_TRIGGER_RATES: [f64; 2] = [0.15, 0.385];

/// Cartesian product of threshold values, `tau_conf` outermost.
pub fn threshold_grid(tau_conf: &[f64], tau_gap: &[f64]) -> Result<Vec<RouterConfig>> {
    tau_conf
        .iter()
        .flat_map(|&c| tau_gap.iter().map(move |&g| RouterConfig::new(c, g)))
        .collect()
}

/// `n` evenly spaced values on `[0, 1]`.
pub fn unit_steps(n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

pub fn sweep_trigger(records: &[EvalRecord], grid: &[RouterConfig], model: &ArbiterModel) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::Usage("threshold grid is empty".into()));
    }
    if records.is_empty() {
        return Err(Error::Usage("no evaluation records".into()));
    }
    let n = records.len() as f64;
    // per-record outcome on the direct and the arbitration path
    let mut direct = Vec::with_capacity(records.len());
    let mut arbitrated = Vec::with_capacity(records.len());
    for r in records {
        direct.push(r.prediction.top1() == r.true_label);
        arbitrated.push(model.choose(r)? == r.true_label);
    }
    let ensemble_top1 = direct.iter().filter(|d| **d).count() as f64 / n;
    let candidate_recall = records
        .iter()
        .filter(|r| r.prediction.candidates.contains(&r.true_label))
        .count() as f64
        / n;

    let points: Vec<SweepPoint> = grid
        .iter()
        .map(|cfg| {
            let (mut routed, mut correct) = (0usize, 0usize);
            for (i, r) in records.iter().enumerate() {
                let go = route(r.prediction.confidence, r.prediction.gap, cfg);
                routed += usize::from(go);
                correct += usize::from(if go { arbitrated[i] } else { direct[i] });
            }
            SweepPoint {
                tau_conf: cfg.tau_conf,
                tau_gap: cfg.tau_gap,
                trigger_rate: routed as f64 / n,
                top1: correct as f64 / n,
            }
        })
        .collect();

    let best = points
        .iter()
        .copied()
        .reduce(|a, b| {
            if b.top1 > a.top1 || (b.top1 == a.top1 && b.trigger_rate < a.trigger_rate) {
                b
            } else {
                a
            }
        })
        .expect("grid is non-empty");
    let mut operating_points = vec![OperatingPoint { target: None, point: best }];
    for target in REPORTED_TRIGGER_RATES {
        let nearest = points
            .iter()
            .copied()
            .reduce(|a, b| {
                let (da, db) = ((a.trigger_rate - target).abs(), (b.trigger_rate - target).abs());
                if db < da || (db == da && b.top1 > a.top1) {
                    b
                } else {
                    a
                }
            })
            .expect("grid is non-empty");
        operating_points.push(OperatingPoint {
            target: Some(target),
            point: nearest,
        });
    }
    Ok(SweepResult {
        points,
        ensemble_top1,
        candidate_recall,
        operating_points,
    })
}

pub fn sweep_csv(result: &SweepResult) -> String {
    let mut out = String::from("tau_conf,tau_gap,trigger_rate,top1\n");
    for p in &result.points {
        let _ = writeln!(out, "{},{},{},{}", p.tau_conf, p.tau_gap, p.trigger_rate, p.top1);
    }
    out
}

/// Accuracy against trigger rate: every grid point plus the upper envelope.
pub fn sweep_svg(result: &SweepResult) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const M: f64 = 50.0;
    let (lo, hi) = result
        .points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.top1), hi.max(p.top1)));
    let (lo, hi) = if hi - lo < 1e-9 { (lo - 0.01, hi + 0.01) } else { (lo, hi) };
    let x = |g: f64| M + g * (W - 2.0 * M);
    let y = |a: f64| H - M - (a - lo) / (hi - lo) * (H - 2.0 * M);

    let mut sorted = result.points.clone();
    sorted.sort_by(|a, b| a.trigger_rate.total_cmp(&b.trigger_rate).then(a.top1.total_cmp(&b.top1)));
    let mut envelope: Vec<(f64, f64)> = Vec::new();
    for p in &sorted {
        match envelope.last_mut() {
            Some(last) if last.0 == p.trigger_rate => last.1 = last.1.max(p.top1),
            _ => envelope.push((p.trigger_rate, p.top1)),
        }
    }
    let path: Vec<String> = envelope.iter().map(|(g, a)| format!("{:.2},{:.2}", x(*g), y(*a))).collect();

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{M}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{M}" y1="{M}" x2="{M}" y2="{b}" stroke="black"/>"#,
        b = H - M,
        r = W - M
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">trigger rate</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">top-1 accuracy</text>"#,
        H / 2.0,
        H / 2.0
    );
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">{t}</text>"#, x(t), H - M + 16.0);
    }
    for a in [lo, (lo + hi) / 2.0, hi] {
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{a:.3}</text>"#, M - 4.0, y(a) + 4.0);
    }
    for p in &result.points {
        let _ = writeln!(s, r##"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="#9ab"/>"##, x(p.trigger_rate), y(p.top1));
    }
    let _ = writeln!(s, r##"<polyline fill="none" stroke="#c33" stroke-width="2" points="{}"/>"##, path.join(" "));
    s.push_str("</svg>\n");
    s
}
