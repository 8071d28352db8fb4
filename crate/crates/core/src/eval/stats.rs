use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCount {
    pub class_name: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub num_classes: usize,
    pub max: ClassCount,
    pub min: ClassCount,
    pub mean_count: f64,
    /// `max / min`.
    pub imbalance_ratio: f64,
    /// Up to 20 largest classes, descending.
    pub head: Vec<ClassCount>,
    /// Up to 20 smallest classes, ascending.
    pub tail: Vec<ClassCount>,
    /// Share of all samples covered by the `r + 1` largest classes.
    pub cumulative_share: Vec<f64>,
}

/// Long-tail summary of a manifest.
pub fn dataset_stats(manifest: &DatasetManifest) -> Result<DatasetStats> {
    if manifest.entries.is_empty() {
        return Err(Error::Usage("manifest has no entries".into()));
    }
    let count_of = |s: Split| manifest.split(s).count();
    // descending by count, ties by class index
    let mut ranked: Vec<usize> = (0..manifest.num_classes()).collect();
    ranked.sort_by(|&a, &b| manifest.class_counts[b].cmp(&manifest.class_counts[a]).then(a.cmp(&b)));
    let cc = |c: usize| ClassCount {
        class_name: manifest.class_names[c].clone(),
        count: manifest.class_counts[c],
    };
    let total = manifest.entries.len();
    let max = cc(ranked[0]);
    // smallest count; ties go to the lowest class index
    let min_idx = (0..manifest.num_classes())
        .min_by(|&a, &b| manifest.class_counts[a].cmp(&manifest.class_counts[b]).then(a.cmp(&b)))
        .expect("at least one class");
    let min = cc(min_idx);
    let mut running = 0usize;
    let cumulative_share = ranked
        .iter()
        .map(|&c| {
            running += manifest.class_counts[c];
            running as f64 / total as f64
        })
        .collect();
    let mut tail: Vec<ClassCount> = ranked.iter().rev().take(20).map(|&c| cc(c)).collect();
    tail.sort_by_key(|c| c.count);
    Ok(DatasetStats {
        total,
        train: count_of(Split::Train),
        val: count_of(Split::Val),
        test: count_of(Split::Test),
        num_classes: manifest.num_classes(),
        imbalance_ratio: max.count as f64 / min.count as f64,
        mean_count: total as f64 / manifest.num_classes() as f64,
        head: ranked.iter().take(20).map(|&c| cc(c)).collect(),
        tail,
        max,
        min,
        cumulative_share,
    })
}

pub(crate) fn thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Plain-text dataset table.
pub fn render_stats_table(stats: &DatasetStats) -> String {
    let pct = |n: usize| 100.0 * n as f64 / stats.total as f64;
    let mut out = String::new();
    out.push_str(&format!("{:<12}{:>8}{:>12}{:>10}\n", "Split", "Ratio", "# Images", "# Classes"));
    for (name, n) in [("Training", stats.train), ("Validation", stats.val), ("Testing", stats.test)] {
        out.push_str(&format!(
            "{:<12}{:>7.1}%{:>12}{:>10}\n",
            name,
            pct(n),
            thousands(n),
            stats.num_classes
        ));
    }
    out.push_str(&format!(
        "{:<12}{:>7.1}%{:>12}{:>10}\n",
        "Total",
        100.0,
        thousands(stats.total),
        stats.num_classes
    ));
    out.push_str(&format!(
        "Max sample class: {} ({})\n",
        thousands(stats.max.count),
        stats.max.class_name
    ));
    out.push_str(&format!(
        "Min sample class: {} ({})\n",
        thousands(stats.min.count),
        stats.min.class_name
    ));
    out.push_str(&format!("Avg. size: {:.2}\n", stats.mean_count));
    out.push_str(&format!(
        "Imbalance ratio (max/min): {:.2}:1\n",
        stats.imbalance_ratio
    ));
    out
}
