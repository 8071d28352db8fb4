use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, Split};
use crate::arbiter::{Arbiter, ArbitrationRequest, ArbitrationResult, DescriptorDb};
use crate::backends::{fan_out, BackendSet, FailurePolicy, SampleRef};
use crate::error::{Error, Result};
use crate::fusion::{decide, EnsembleEngine, EnsemblePrediction, ModelOpinion};

pub const RECORD_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLatencies {
    pub backends_ms: f64,
    pub fusion_ms: f64,
    pub arbitration_ms: f64,
    pub total_ms: f64,
}

/// Arbiter plus the descriptor table used to build its requests.
pub struct ArbiterStage {
    pub arbiter: Arbiter,
    pub descriptors: DescriptorDb,
}

/// The full inference path: fan-out, fusion, routing, optional arbitration.
pub struct Cascade {
    pub backends: BackendSet,
    pub engine: EnsembleEngine,
    /// `None` disables arbitration; routed samples then keep `c1`.
    pub arbiter: Option<ArbiterStage>,
    pub policy: FailurePolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyOutcome {
    pub sample_id: String,
    pub model_ids: Vec<String>,
    pub model_argmax: Vec<usize>,
    pub prediction: EnsemblePrediction,
    pub arbitration: Option<ArbitrationResult>,
    pub final_label: usize,
    /// Members dropped under the lenient policy.
    pub omitted: Vec<(String, String)>,
    pub latencies: StageLatencies,
}

pub(crate) fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    best
}

impl Cascade {
    pub fn classify(&self, sample: &SampleRef) -> Result<ClassifyOutcome> {
        let start = Instant::now();
        let fanned = fan_out(&self.backends, sample, self.policy)?;
        let backends_ms = start.elapsed().as_secs_f64() * 1e3;
        let mut out = self.classify_opinions(sample, &fanned.opinions)?;
        out.omitted = fanned.omitted;
        out.latencies.backends_ms = backends_ms;
        out.latencies.total_ms += backends_ms;
        Ok(out)
    }

    /// Runs fusion onward on opinions that were obtained elsewhere.
    pub fn classify_opinions(&self, sample: &SampleRef, opinions: &[ModelOpinion]) -> Result<ClassifyOutcome> {
        let start = Instant::now();
        let prediction = self.engine.predict(opinions)?;
        let fusion_ms = start.elapsed().as_secs_f64() * 1e3;

        let arbitration = match (&self.arbiter, prediction.route) {
            (Some(stage), true) => {
                let request = ArbitrationRequest::new(sample.clone(), prediction.candidates.clone(), &stage.descriptors)?;
                Some(stage.arbiter.arbitrate(&request))
            }
            _ => None,
        };
        let arbitration_ms = arbitration.as_ref().map_or(0.0, |a| a.latency_ms);
        let final_label = if arbitration.is_some() {
            decide(&prediction, arbitration.as_ref())?
        } else {
            prediction.top1()
        };
        Ok(ClassifyOutcome {
            sample_id: sample.sample_id.clone(),
            model_ids: opinions.iter().map(|o| o.model_id.clone()).collect(),
            model_argmax: opinions.iter().map(|o| argmax(o.dist.probs())).collect(),
            prediction,
            arbitration,
            final_label,
            omitted: Vec::new(),
            latencies: StageLatencies {
                backends_ms: 0.0,
                fusion_ms,
                arbitration_ms,
                total_ms: start.elapsed().as_secs_f64() * 1e3,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub schema_version: u32,
    pub sample_id: String,
    pub model_ids: Vec<String>,
    /// Argmax of each backbone's own distribution.
    pub model_argmax: Vec<usize>,
    pub prediction: EnsemblePrediction,
    pub final_label: usize,
    /// An arbitration result was used (only possible when routed).
    pub arbitrated: bool,
    pub fell_back: bool,
    pub from_cache: bool,
    pub true_label: usize,
    pub latencies: StageLatencies,
}

impl EvalRecord {
    pub fn from_outcome(outcome: ClassifyOutcome, true_label: usize) -> Self {
        let arb = outcome.arbitration.as_ref();
        Self {
            schema_version: RECORD_SCHEMA_VERSION,
            sample_id: outcome.sample_id,
            model_ids: outcome.model_ids,
            model_argmax: outcome.model_argmax,
            arbitrated: arb.is_some(),
            fell_back: arb.is_some_and(|a| a.fell_back),
            from_cache: arb.is_some_and(|a| a.from_cache),
            prediction: outcome.prediction,
            final_label: outcome.final_label,
            true_label,
            latencies: outcome.latencies,
        }
    }
}

/// Classifies every `split` sample on `workers` threads; output is sorted by sample id.
pub fn run_pipeline(manifest: &DatasetManifest, cascade: &Cascade, split: Split, workers: usize) -> Result<Vec<EvalRecord>> {
    if manifest.num_classes() != cascade.backends.num_classes() {
        return Err(Error::Config(format!(
            "manifest has {} classes but backends report {}",
            manifest.num_classes(),
            cascade.backends.num_classes()
        )));
    }
    let entries: Vec<_> = manifest.split(split).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let mut records = pool.install(|| {
        entries
            .par_iter()
            .map(|e| {
                cascade
                    .classify(&e.sample_ref())
                    .map(|o| EvalRecord::from_outcome(o, e.label))
                    .map_err(|err| err.at_sample(&e.sample_id))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    records.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(records)
}

pub fn write_records(path: impl AsRef<Path>, records: &[EvalRecord]) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: EvalRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if r.schema_version != RECORD_SCHEMA_VERSION {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("unsupported record schema {}", r.schema_version),
            });
        }
        out.push(r);
    }
    Ok(out)
}
