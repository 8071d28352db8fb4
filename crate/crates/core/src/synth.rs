//! Seeded synthetic data: toy training sets, logit logs and a long-tail manifest.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::arbiter::{AttributeSet, Descriptor, DescriptorDb};
use crate::backends::{Backend, BackendSet, LogitStore, Payload, StoreBackend};
use crate::error::{Error, Result};
use crate::eval::{run_pipeline, Cascade, DatasetManifest, EvalRecord, ManifestEntry, Split};
use crate::fusion::EnsembleEngine;
use crate::train::Dataset;

/// Isotropic Gaussian clusters with centers evenly spaced on a circle of `radius`
/// in the first two dimensions.
pub fn gaussian_blobs(seed: u64, n: usize, num_classes: usize, dim: usize, radius: f64, std: f64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, std).expect("std is finite and non-negative");
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|c| {
            let theta = std::f64::consts::TAU * c as f64 / num_classes as f64;
            let mut v = vec![0.0; dim];
            v[0] = radius * theta.cos();
            if dim > 1 {
                v[1] = radius * theta.sin();
            }
            v
        })
        .collect();
    let labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    let features = labels
        .iter()
        .map(|&y| centers[y].iter().map(|c| c + noise.sample(&mut rng)).collect())
        .collect();
    Dataset {
        features,
        labels,
        num_classes,
    }
}

const MODEL_NAMES: [&str; 4] = ["resnet50", "efficientnet_b0", "convnext_tiny", "swin_t"];

pub fn model_name(i: usize) -> String {
    match MODEL_NAMES.get(i) {
        Some(n) => n.to_string(),
        None => format!("model_{i}"),
    }
}

/// Cached per-model logits for a labelled test split.
#[derive(Debug, Clone)]
pub struct SyntheticLog {
    pub manifest: DatasetManifest,
    pub stores: Vec<LogitStore>,
}

impl SyntheticLog {
    pub fn backends(&self) -> BackendSet {
        let members: Vec<Arc<dyn Backend>> = self
            .stores
            .iter()
            .map(|s| Arc::new(StoreBackend::new(s.clone())) as Arc<dyn Backend>)
            .collect();
        BackendSet::new(members).expect("synthetic stores share one label space")
    }

    /// Writes `manifest.jsonl` and `<model_id>.jsonl` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.manifest.save(dir.join("manifest.jsonl"))?;
        for s in &self.stores {
            s.save(dir.join(format!("{}.jsonl", s.model_id)))?;
        }
        Ok(())
    }
}

/// `n` test samples over `num_classes` classes, scored by `num_models` backbones
/// of varying quality. Each sample has a look-alike class that draws
/// probability mass in proportion to a per-sample difficulty.
pub fn synthetic_log(seed: u64, n: usize, num_classes: usize, num_models: usize) -> Result<SyntheticLog> {
    if num_classes < 2 || num_models == 0 {
        return Err(Error::Config("need at least 2 classes and 1 model".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class_names: Vec<String> = (0..num_classes).map(|c| format!("class_{c:03}")).collect();
    let mut stores: Vec<LogitStore> = (0..num_models)
        .map(|m| LogitStore::new(model_name(m), num_classes))
        .collect();
    let quality: Vec<f64> = (0..num_models).map(|m| 2.0 + 1.5 * m as f64 / num_models as f64).collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("s{i:06}");
        let y = rng.random_range(0..num_classes);
        let z = (y + rng.random_range(1..num_classes)) % num_classes;
        let difficulty: f64 = rng.random();
        for (m, store) in stores.iter_mut().enumerate() {
            let mut logits: Vec<f64> = (0..num_classes).map(|_| normal.sample(&mut rng)).collect();
            logits[y] += quality[m] * (1.0 - difficulty) + 0.5;
            logits[z] += 3.0 * difficulty * rng.random::<f64>();
            store.insert(id.clone(), logits)?;
        }
        entries.push(ManifestEntry {
            sample_id: id,
            label: y,
            split: Split::Test,
            payload: Payload::None,
        });
    }
    Ok(SyntheticLog {
        manifest: DatasetManifest::new(class_names, entries)?,
        stores,
    })
}

/// Pipeline records of [`synthetic_log`] under default fusion and routing, without arbitration.
pub fn synthetic_records(seed: u64, n: usize, num_classes: usize, num_models: usize) -> Vec<EvalRecord> {
    let log = synthetic_log(seed, n, num_classes, num_models).expect("valid synthetic shape");
    let cascade = Cascade {
        backends: log.backends(),
        engine: EnsembleEngine::default(),
        arbiter: None,
        policy: Default::default(),
    };
    run_pipeline(&log.manifest, &cascade, Split::Test, 1).expect("stores cover the manifest")
}

/// Descriptors whose attribute tokens are `<class>:a0..a3`; two foreign
/// tokens per class act as contradictions.
pub fn synthetic_descriptors(class_names: &[String]) -> Result<DescriptorDb> {
    let c = class_names.len();
    DescriptorDb::new(
        class_names
            .iter()
            .enumerate()
            .map(|(i, name)| Descriptor {
                class_name: name.clone(),
                description: format!("Reference description of {name}."),
                support: (0..4).map(|k| format!("{name}:a{k}")).collect(),
                contradict: (1..3).map(|d| format!("{}:a0", class_names[(i + d) % c])).collect(),
            })
            .collect(),
    )
}

/// Observed attributes per sample: three of the true class's four tokens.
pub fn synthetic_attributes(manifest: &DatasetManifest) -> HashMap<String, AttributeSet> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let name = &manifest.class_names[e.label];
            let set = AttributeSet::new((1..4).map(|k| format!("{name}:a{k}"))).expect("non-empty tokens");
            (e.sample_id.clone(), set)
        })
        .collect()
}

pub const LONG_TAIL_TOTAL: usize = 116_233;
pub const LONG_TAIL_VAL: usize = 11_488;
pub const LONG_TAIL_TEST: usize = 23_522;
pub const LONG_TAIL_CLASSES: usize = 306;
const LONG_TAIL_MAX: (usize, &str) = (1_276, "jaboticaba");
const LONG_TAIL_MIN: (usize, &str) = (25, "muscadine_grape");

/// Class sizes of the long-tail fruit dataset, largest first.
pub fn long_tail_class_counts() -> Vec<usize> {
    let n = LONG_TAIL_CLASSES;
    let (hi, lo) = (LONG_TAIL_MAX.0 as f64, LONG_TAIL_MIN.0 as f64);
    let mut counts: Vec<usize> = (0..n)
        .map(|r| {
            let t = 1.0 - r as f64 / (n - 1) as f64;
            let c = (lo + (hi - lo) * t.powf(2.5)).round() as usize;
            if r == 0 || r == n - 1 {
                c
            } else {
                c.clamp(LONG_TAIL_MIN.0 + 1, LONG_TAIL_MAX.0 - 1)
            }
        })
        .collect();
    // nudge interior classes until the total matches, keeping the extremes unique
    let mut total: usize = counts.iter().sum();
    let mut r = 1;
    while total != LONG_TAIL_TOTAL {
        let c = &mut counts[r];
        if total < LONG_TAIL_TOTAL && *c + 1 < LONG_TAIL_MAX.0 {
            *c += 1;
            total += 1;
        } else if total > LONG_TAIL_TOTAL && *c > LONG_TAIL_MIN.0 + 1 {
            *c -= 1;
            total -= 1;
        }
        r = if r + 1 >= n - 1 { 1 } else { r + 1 };
    }
    counts
}

/// Manifest with the long-tail fruit dataset's class and split counts.
pub fn long_tail_manifest() -> DatasetManifest {
    let counts = long_tail_class_counts();
    let names: Vec<String> = (0..LONG_TAIL_CLASSES)
        .map(|r| match r {
            0 => LONG_TAIL_MAX.1.to_string(),
            r if r == LONG_TAIL_CLASSES - 1 => LONG_TAIL_MIN.1.to_string(),
            r => format!("fruit_{r:03}"),
        })
        .collect();
    let val = largest_remainder(&counts, LONG_TAIL_VAL);
    let test = largest_remainder(&counts, LONG_TAIL_TEST);
    let mut order: Vec<usize> = (0..LONG_TAIL_CLASSES).collect();
    order.sort_by(|&a, &b| names[a].cmp(&names[b]));
    let mut sorted_names = Vec::with_capacity(LONG_TAIL_CLASSES);
    let mut entries = Vec::with_capacity(LONG_TAIL_TOTAL);
    for (label, &r) in order.iter().enumerate() {
        sorted_names.push(names[r].clone());
        for j in 0..counts[r] {
            let split = if j < val[r] {
                Split::Val
            } else if j < val[r] + test[r] {
                Split::Test
            } else {
                Split::Train
            };
            entries.push(ManifestEntry {
                sample_id: format!("{}/{j:04}", names[r]),
                label,
                split,
                payload: Payload::None,
            });
        }
    }
    DatasetManifest::new(sorted_names, entries).expect("generated manifest is consistent")
}

/// Apportions `target` across classes proportionally to `counts`.
fn largest_remainder(counts: &[usize], target: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let mut out: Vec<usize> = counts.iter().map(|&c| c * target / total).collect();
    let mut rem: Vec<(usize, usize)> = counts.iter().enumerate().map(|(i, &c)| (c * target % total, i)).collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = target - out.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(short) {
        out[i] += 1;
    }
    out
}
