use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use gapcascade_core::arbiter::{
    Arbiter, ArbiterConfig, AttributeSet, DescriptorDb, HttpLlmClient, LlmClient, MockLlmClient,
};
use gapcascade_core::backends::{Backend, BackendSet, FailurePolicy, LogitStore, RemoteBackend, StoreBackend};
use gapcascade_core::eval::{ArbiterStage, Cascade};
use gapcascade_core::fusion::{EnsembleEngine, FusionConfig, RouterConfig};
use gapcascade_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MODE_ENV: &str = "GAPCASCADE_MODE";
pub const LISTEN_ENV: &str = "GAPCASCADE_LISTEN";
pub const ARBITER_URL_ENV: &str = "GAPCASCADE_ARBITER_BASE_URL";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    LiveLlm,
    #[default]
    Mock,
    NoArbiter,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "live-llm" => Ok(Mode::LiveLlm),
            "mock" => Ok(Mode::Mock),
            "no-arbiter" => Ok(Mode::NoArbiter),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    /// Precomputed logits in a JSON Lines store.
    Store {
        path: PathBuf,
        #[serde(default)]
        latency_ms: f64,
    },
    /// `POST {url}/predict`; the URL may come from `GAPCASCADE_REMOTE_URL_<ID>`.
    Remote {
        model_id: String,
        num_classes: usize,
        #[serde(default)]
        url: Option<String>,
        #[serde(default)]
        latency_ms: f64,
        #[serde(default = "default_timeout")]
        timeout_s: f64,
    },
}

fn default_timeout() -> f64 {
    30.0
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_workers() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub failure_policy: FailurePolicy,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Class names in label order; defaults to the descriptor file's sorted keys.
    #[serde(default)]
    pub classes: Option<Vec<String>>,
    /// JSON map `class_name -> {description, support, contradict}`.
    #[serde(default)]
    pub descriptors: Option<PathBuf>,
    /// JSON map `sample_id -> [attribute tokens]` for mock arbitration.
    #[serde(default)]
    pub attributes: Option<PathBuf>,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub router: RouterConfig,
    #[serde(default)]
    pub arbiter: ArbiterConfig,
    pub backends: Vec<BackendSpec>,
}

impl ServiceConfig {
    /// Parses the file, resolves relative paths against its directory and applies
    /// environment overrides.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.apply_env()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.descriptors.as_mut().map(fix);
        self.attributes.as_mut().map(fix);
        self.arbiter.cache_dir.as_mut().map(fix);
        for b in &mut self.backends {
            if let BackendSpec::Store { path, .. } = b {
                fix(path);
            }
        }
    }

    fn apply_env(&mut self) -> Result<()> {
        if let Ok(m) = std::env::var(MODE_ENV) {
            self.mode = m.parse()?;
        }
        if let Ok(l) = std::env::var(LISTEN_ENV) {
            self.listen = l;
        }
        if let Ok(u) = std::env::var(ARBITER_URL_ENV) {
            self.arbiter.base_url = u;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.backends.is_empty() {
            return Err(Error::Config("no backends configured".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.router.validate()?;
        self.arbiter.validate()?;
        if self.mode != Mode::NoArbiter && self.descriptors.is_none() {
            return Err(Error::Config(format!(
                "mode {:?} needs a descriptors file",
                self.mode
            )));
        }
        Ok(())
    }

    fn build_backends(&self) -> Result<BackendSet> {
        let members = self
            .backends
            .iter()
            .map(|spec| -> Result<Arc<dyn Backend>> {
                Ok(match spec {
                    BackendSpec::Store { path, latency_ms } => {
                        Arc::new(StoreBackend::new(LogitStore::load(path)?).with_latency(*latency_ms))
                    }
                    BackendSpec::Remote {
                        model_id,
                        num_classes,
                        url,
                        latency_ms,
                        timeout_s,
                    } => {
                        let url = RemoteBackend::url_from_env(model_id, url.as_deref())
                            .ok_or_else(|| Error::Config(format!("no URL for remote backend `{model_id}`")))?;
                        Arc::new(
                            RemoteBackend::with_timeout(
                                model_id.clone(),
                                *num_classes,
                                url,
                                Duration::from_secs_f64(*timeout_s),
                            )?
                            .with_latency(*latency_ms),
                        )
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        BackendSet::new(members)
    }

    fn build_arbiter(&self, class_names: &[String]) -> Result<Option<ArbiterStage>> {
        if self.mode == Mode::NoArbiter {
            return Ok(None);
        }
        let path = self.descriptors.as_ref().expect("checked by validate");
        let descriptors = DescriptorDb::load(path, Some(class_names))?;
        let client: Arc<dyn LlmClient> = match self.mode {
            Mode::LiveLlm => Arc::new(HttpLlmClient::from_env(
                &self.arbiter.base_url,
                &self.arbiter.model,
                self.arbiter.timeout(),
                self.arbiter.max_concurrency,
            )?),
            Mode::Mock => {
                let attributes: HashMap<String, AttributeSet> = match &self.attributes {
                    Some(p) => MockLlmClient::load_attributes(p)?,
                    None => HashMap::new(),
                };
                Arc::new(MockLlmClient::new(attributes, self.arbiter.lambda_pen))
            }
            Mode::NoArbiter => unreachable!(),
        };
        Ok(Some(ArbiterStage {
            arbiter: Arbiter::new(self.arbiter.clone(), client)?,
            descriptors,
        }))
    }

    fn class_names(&self, num_classes: usize) -> Result<Vec<String>> {
        let names = match (&self.classes, &self.descriptors) {
            (Some(c), _) => c.clone(),
            (None, Some(p)) => DescriptorDb::load(p, None)?.class_names(),
            (None, None) => (0..num_classes).map(|c| c.to_string()).collect(),
        };
        if names.len() != num_classes {
            return Err(Error::Config(format!(
                "{} class names for {num_classes} backend classes",
                names.len()
            )));
        }
        Ok(names)
    }

    pub fn build(&self) -> Result<Pipeline> {
        self.validate()?;
        let backends = self.build_backends()?;
        self.fusion.validate(backends.num_classes())?;
        let class_names = self.class_names(backends.num_classes())?;
        let arbiter = self.build_arbiter(&class_names)?;
        Ok(Pipeline {
            cascade: Cascade {
                backends,
                engine: EnsembleEngine::new(self.fusion, self.router),
                arbiter,
                policy: self.failure_policy,
            },
            class_names,
            mode: self.mode,
        })
    }
}

/// A built cascade with its label names.
pub struct Pipeline {
    pub cascade: Cascade,
    pub class_names: Vec<String>,
    pub mode: Mode,
}
