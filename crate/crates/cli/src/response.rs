use gapcascade_core::eval::{ClassifyOutcome, StageLatencies};
use serde::{Deserialize, Serialize};

pub const RESPONSE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub index: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: usize,
    pub name: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeight {
    pub model_id: String,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub schema_version: u32,
    pub sample_id: String,
    pub label: Label,
    pub confidence: f64,
    pub gap: f64,
    pub routed: bool,
    pub arbitrated: bool,
    pub fell_back: bool,
    pub from_cache: bool,
    pub candidates: Vec<Candidate>,
    pub weights: Vec<ModelWeight>,
    /// Backends dropped under the lenient failure policy.
    pub omitted: Vec<String>,
    pub latencies_ms: StageLatencies,
}

impl ClassifyResponse {
    pub fn new(outcome: &ClassifyOutcome, class_names: &[String]) -> Self {
        let name = |c: usize| class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
        let p = &outcome.prediction;
        let arb = outcome.arbitration.as_ref();
        Self {
            schema_version: RESPONSE_SCHEMA_VERSION,
            sample_id: outcome.sample_id.clone(),
            label: Label {
                index: outcome.final_label,
                name: name(outcome.final_label),
            },
            confidence: p.confidence,
            gap: p.gap,
            routed: p.route,
            arbitrated: arb.is_some(),
            fell_back: arb.is_some_and(|a| a.fell_back),
            from_cache: arb.is_some_and(|a| a.from_cache),
            candidates: p
                .candidates
                .iter()
                .map(|&c| Candidate {
                    index: c,
                    name: name(c),
                    probability: p.p_sys.get(c),
                })
                .collect(),
            weights: outcome
                .model_ids
                .iter()
                .zip(&p.weights)
                .map(|(id, &alpha)| ModelWeight {
                    model_id: id.clone(),
                    alpha,
                })
                .collect(),
            omitted: outcome.omitted.iter().map(|(id, _)| id.clone()).collect(),
            latencies_ms: outcome.latencies,
        }
    }
}
