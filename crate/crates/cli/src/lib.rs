//! Command-line and HTTP front ends for the gapcascade pipeline.

pub mod config;
pub mod response;
pub mod service;

use std::collections::BTreeMap;
use std::path::PathBuf;

use gapcascade_core::backends::{FailurePolicy, Payload, SampleRef};
use gapcascade_core::fusion::ModelOpinion;
use gapcascade_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub use config::{Mode, Pipeline, ServiceConfig};
pub use response::ClassifyResponse;

/// One sample to classify, by reference or with inline per-model logits.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyRequest {
    pub sample_id: String,
    #[serde(default)]
    pub image: Option<PathBuf>,
    #[serde(default)]
    pub features: Option<Vec<f64>>,
    /// `model_id -> logits`; bypasses the backends entirely.
    #[serde(default)]
    pub logits: Option<BTreeMap<String, Vec<f64>>>,
}

impl ClassifyRequest {
    pub fn sample_ref(&self) -> Result<SampleRef> {
        if self.sample_id.is_empty() {
            return Err(Error::Usage("sample_id is empty".into()));
        }
        let payload = match (&self.image, &self.features) {
            (Some(_), Some(_)) => return Err(Error::Usage("give either image or features, not both".into())),
            (Some(p), None) => Payload::ImageFile(p.clone()),
            (None, Some(f)) => Payload::Features(f.clone()),
            (None, None) => Payload::None,
        };
        Ok(SampleRef::new(self.sample_id.clone(), payload))
    }
}

impl Pipeline {
    /// Shared classification path of the CLI and the service.
    pub fn classify(&self, request: &ClassifyRequest) -> Result<ClassifyResponse> {
        let sample = request.sample_ref()?;
        let outcome = match &request.logits {
            None => self.cascade.classify(&sample)?,
            Some(inline) => {
                let opinions = self.inline_opinions(inline)?;
                let mut out = self.cascade.classify_opinions(&sample, &opinions.0)?;
                out.omitted = opinions.1;
                out
            }
        };
        Ok(ClassifyResponse::new(&outcome, &self.class_names))
    }

    #[allow(clippy::type_complexity)]
    fn inline_opinions(&self, inline: &BTreeMap<String, Vec<f64>>) -> Result<(Vec<ModelOpinion>, Vec<(String, String)>)> {
        let ids = self.cascade.backends.model_ids();
        if let Some(unknown) = inline.keys().find(|k| !ids.contains(&k.as_str())) {
            return Err(Error::Usage(format!("unknown model `{unknown}` in inline logits")));
        }
        let c = self.cascade.backends.num_classes();
        let mut opinions = Vec::new();
        let mut omitted = Vec::new();
        for id in ids {
            match inline.get(id) {
                Some(z) if z.len() != c => {
                    return Err(Error::Structural(format!("model `{id}`: {} logits, expected {c}", z.len())));
                }
                Some(z) => opinions.push(ModelOpinion::from_logits(id, z)?),
                None if self.cascade.policy == FailurePolicy::Lenient => {
                    omitted.push((id.to_string(), "absent from request".into()));
                }
                None => return Err(Error::Usage(format!("inline logits missing model `{id}`"))),
            }
        }
        if opinions.is_empty() {
            return Err(Error::Usage("no inline logits".into()));
        }
        Ok((opinions, omitted))
    }
}

/// Process exit code for an error: 2 for configuration, 3 for backends, 1 otherwise.
pub fn exit_code(err: &Error) -> u8 {
    if err.is_backend_failure() {
        return 3;
    }
    match err {
        Error::Config(_) | Error::Usage(_) | Error::Parse { .. } | Error::Io { .. } => 2,
        Error::AtSample { source, .. } => exit_code(source),
        _ => 1,
    }
}
