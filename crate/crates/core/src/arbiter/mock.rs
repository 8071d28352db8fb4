//! Deterministic stand-in for the LLM's attribute matching.
//!
//! Similarity is token overlap with a class's `support` list and conflict is
//! the count of `contradict` tokens present. The winner maximizes
//! `M_c - λ_pen · Conflict_c`; ties go to the earlier candidate.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{ArbitrationRequest, Descriptor};
use crate::error::{Error, Result};

/// Attribute tokens observed on a sample, e.g. `skin:glossy`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributeSet(BTreeSet<String>);

impl AttributeSet {
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = tokens.into_iter().map(Into::into).collect();
        if set.iter().any(|t| t.trim().is_empty()) {
            return Err(Error::InvalidInput("empty attribute token".into()));
        }
        Ok(Self(set))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.contains(token)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `(M_c, Conflict_c)` for one descriptor.
pub fn match_scores(attributes: &AttributeSet, descriptor: &Descriptor) -> (f64, f64) {
    let hits = descriptor.support.iter().filter(|t| attributes.contains(t)).count();
    let m = hits as f64 / descriptor.support.len().max(1) as f64;
    let conflict = descriptor.contradict.iter().filter(|t| attributes.contains(t)).count();
    (m, conflict as f64)
}

/// Position of the winner among `scores`, each `(M_c, Conflict_c)`.
pub fn penalized_argmax(scores: &[(f64, f64)], lambda_pen: f64) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, (m, conflict)) in scores.iter().enumerate() {
        let s = m - lambda_pen * conflict;
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

/// Class index chosen among `request.candidates`.
pub fn mock_arbitrate(attributes: &AttributeSet, request: &ArbitrationRequest, lambda_pen: f64) -> usize {
    let scores: Vec<(f64, f64)> = request
        .descriptors
        .iter()
        .map(|d| match_scores(attributes, d))
        .collect();
    request.candidates[penalized_argmax(&scores, lambda_pen)]
}
