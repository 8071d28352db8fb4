use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Expert description of one class, with machine-readable attribute lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Descriptor {
    pub class_name: String,
    pub description: String,
    /// Attribute tokens that support this class.
    #[serde(default)]
    pub support: Vec<String>,
    /// Attribute tokens that rule this class out.
    #[serde(default)]
    pub contradict: Vec<String>,
}

#[derive(Deserialize)]
struct DescriptorEntry {
    description: String,
    #[serde(default)]
    support: Vec<String>,
    #[serde(default)]
    contradict: Vec<String>,
}

/// Descriptors indexed by class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DescriptorDb {
    entries: Vec<Descriptor>,
}

impl DescriptorDb {
    /// One entry per class, in class-index order.
    pub fn new(entries: Vec<Descriptor>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("descriptor database is empty".into()));
        }
        let mut names = BTreeSet::new();
        for d in &entries {
            if d.description.trim().is_empty() {
                return Err(Error::Config(format!("class `{}` has an empty description", d.class_name)));
            }
            if !names.insert(d.class_name.to_lowercase()) {
                return Err(Error::Config(format!("duplicate class name `{}`", d.class_name)));
            }
        }
        Ok(Self { entries })
    }

    /// Loads a JSON map `class_name → {description, support, contradict}`.
    ///
    /// With `class_names`, entries are aligned to that label order and every
    /// class must be present; otherwise classes are indexed in lexicographic
    /// name order.
    pub fn load(path: impl AsRef<Path>, class_names: Option<&[String]>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: BTreeMap<String, DescriptorEntry> = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Self::from_map(map, class_names)
    }

    fn from_map(mut map: BTreeMap<String, DescriptorEntry>, class_names: Option<&[String]>) -> Result<Self> {
        let order: Vec<String> = match class_names {
            Some(names) => names.to_vec(),
            None => map.keys().cloned().collect(),
        };
        let entries = order
            .into_iter()
            .map(|name| {
                let e = map
                    .remove(&name)
                    .ok_or_else(|| Error::Config(format!("no descriptor for class `{name}`")))?;
                Ok(Descriptor {
                    class_name: name,
                    description: e.description,
                    support: e.support,
                    contradict: e.contradict,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, class: usize) -> Result<&Descriptor> {
        self.entries.get(class).ok_or(Error::Index {
            index: class,
            len: self.entries.len(),
        })
    }

    pub fn class_names(&self) -> Vec<String> {
        self.entries.iter().map(|d| d.class_name.clone()).collect()
    }

    /// Serializes back to the on-disk map form.
    pub fn to_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .entries
            .iter()
            .map(|d| {
                (
                    d.class_name.clone(),
                    serde_json::json!({
                        "description": d.description,
                        "support": d.support,
                        "contradict": d.contradict,
                    }),
                )
            })
            .collect();
        serde_json::Value::Object(map)
    }
}
