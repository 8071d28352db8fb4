use serde::{Deserialize, Serialize};

use super::pipeline::EvalRecord;
use crate::error::{Error, Result};
use crate::fusion::top_k;

/// Dense `C × C` confusion counts, rows = truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            n: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        for c in [truth, pred] {
            if c >= self.n {
                return Err(Error::Index { index: c, len: self.n });
            }
        }
        self.counts[truth * self.n + pred] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, pred: usize) -> usize {
        self.counts[truth * self.n + pred]
    }

    /// Per-class F1; `None` for classes with no ground truth and no predictions.
    pub fn per_class_f1(&self) -> Vec<Option<f64>> {
        (0..self.n)
            .map(|c| {
                let tp = self.get(c, c);
                let actual: usize = (0..self.n).map(|p| self.get(c, p)).sum();
                let predicted: usize = (0..self.n).map(|t| self.get(t, c)).sum();
                if actual == 0 && predicted == 0 {
                    None
                } else {
                    // 2TP / (2TP + FP + FN)
                    Some(2.0 * tp as f64 / (actual + predicted) as f64)
                }
            })
            .collect()
    }

    /// Unweighted mean of the defined per-class F1 scores.
    pub fn macro_f1(&self) -> f64 {
        let defined: Vec<f64> = self.per_class_f1().into_iter().flatten().collect();
        if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        }
    }

    /// Off-diagonal cells, most frequent first.
    pub fn top_confusions(&self, limit: usize) -> Vec<Confusion> {
        let mut cells: Vec<Confusion> = (0..self.n)
            .flat_map(|t| (0..self.n).map(move |p| (t, p)))
            .filter(|(t, p)| t != p)
            .map(|(t, p)| Confusion {
                truth: t,
                predicted: p,
                count: self.get(t, p),
            })
            .filter(|c| c.count > 0)
            .collect();
        cells.sort_by(|a, b| b.count.cmp(&a.count).then((a.truth, a.predicted).cmp(&(b.truth, b.predicted))));
        cells.truncate(limit);
        cells
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub truth: usize,
    pub predicted: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub top1: f64,
    /// True label among the five most probable classes of `P_sys`.
    pub top5: f64,
    pub macro_f1: f64,
    pub trigger_rate: f64,
    /// Top-1 of `c1` alone, ignoring arbitration.
    pub ensemble_top1: f64,
    /// Fraction of samples whose true label is inside the candidate set.
    pub candidate_recall: f64,
    pub fallback_rate: f64,
    pub per_class_f1: Vec<Option<f64>>,
    pub top_confusions: Vec<Confusion>,
    /// Top-1 of each backbone alone, by model id.
    pub per_model_top1: Vec<(String, f64)>,
}

/// Rank of the true label is within the first `k` of `probs` (tie rule of `top_k`).
pub(crate) fn in_top_k(probs: &crate::fusion::ClassDistribution, truth: usize, k: usize) -> bool {
    let k = k.min(probs.num_classes());
    top_k(probs, k).map(|t| t.contains(&truth)).unwrap_or(false)
}

pub fn metrics(records: &[EvalRecord], num_classes: usize) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Usage("no evaluation records".into()));
    }
    let n = records.len() as f64;
    let mut cm = ConfusionMatrix::new(num_classes);
    let (mut top1, mut top5, mut routed, mut direct, mut recall, mut fallbacks) = (0, 0, 0, 0, 0, 0);
    let model_ids: Vec<String> = records[0].model_ids.clone();
    let mut per_model = vec![0usize; model_ids.len()];
    for r in records {
        cm.add(r.true_label, r.final_label)?;
        top1 += usize::from(r.final_label == r.true_label);
        top5 += usize::from(in_top_k(&r.prediction.p_sys, r.true_label, 5));
        routed += usize::from(r.prediction.route);
        direct += usize::from(r.prediction.top1() == r.true_label);
        recall += usize::from(r.prediction.candidates.contains(&r.true_label));
        fallbacks += usize::from(r.fell_back);
        if r.model_ids == model_ids {
            for (acc, &m) in per_model.iter_mut().zip(&r.model_argmax) {
                *acc += usize::from(m == r.true_label);
            }
        }
    }
    Ok(MetricsReport {
        samples: records.len(),
        top1: top1 as f64 / n,
        top5: top5 as f64 / n,
        macro_f1: cm.macro_f1(),
        trigger_rate: routed as f64 / n,
        ensemble_top1: direct as f64 / n,
        candidate_recall: recall as f64 / n,
        fallback_rate: fallbacks as f64 / n,
        per_class_f1: cm.per_class_f1(),
        top_confusions: cm.top_confusions(10),
        per_model_top1: model_ids
            .into_iter()
            .zip(per_model)
            .map(|(id, c)| (id, c as f64 / n))
            .collect(),
    })
}

/// Ablation-style text table: single backbone, ensemble, ensemble + arbitration.
pub fn render_metrics_table(report: &MetricsReport) -> String {
    let best_single = report
        .per_model_top1
        .iter()
        .cloned()
        .fold(None::<(String, f64)>, |best, (id, v)| match best {
            Some((_, b)) if b >= v => best,
            _ => Some((id, v)),
        });
    let mut out = String::new();
    out.push_str(&format!(
        "{:<34}{:>15}{:>11}{:>16}\n",
        "Configuration", "Heterogeneous", "LLM Arb.", "Top-1 Acc (%)"
    ));
    if let Some((id, v)) = best_single {
        out.push_str(&format!(
            "{:<34}{:>15}{:>11}{:>16.2}\n",
            format!("Baseline ({id})"),
            "--",
            "--",
            100.0 * v
        ));
    }
    out.push_str(&format!(
        "{:<34}{:>15}{:>11}{:>16.2}\n",
        "+ Heterogeneous Ensemble",
        "yes",
        "--",
        100.0 * report.ensemble_top1
    ));
    out.push_str(&format!(
        "{:<34}{:>15}{:>11}{:>16.2}\n",
        "+ LLM Arbitration",
        "yes",
        "yes",
        100.0 * report.top1
    ));
    out.push('\n');
    out.push_str(&format!(
        "samples {}  top-1 {:.4}  top-5 {:.4}  macro-F1 {:.4}  trigger rate {:.4}  candidate recall {:.4}  fallbacks {:.4}\n",
        report.samples,
        report.top1,
        report.top5,
        report.macro_f1,
        report.trigger_rate,
        report.candidate_recall,
        report.fallback_rate
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_fixture() {
        let mut cm = ConfusionMatrix::new(3);
        for (t, p) in [(0, 0), (0, 1), (1, 1), (2, 2)] {
            cm.add(t, p).unwrap();
        }
        let f1 = cm.per_class_f1();
        assert!((f1[0].unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((f1[1].unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1[2], Some(1.0));
        assert!((cm.macro_f1() - 7.0 / 9.0).abs() < 1e-15);
        assert_eq!(cm.top_confusions(5), vec![Confusion { truth: 0, predicted: 1, count: 1 }]);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let mut cm = ConfusionMatrix::new(5);
        cm.add(0, 0).unwrap();
        cm.add(1, 1).unwrap();
        assert_eq!(cm.per_class_f1()[4], None);
        assert_eq!(cm.macro_f1(), 1.0);
        assert!(cm.add(5, 0).is_err());
    }
}
