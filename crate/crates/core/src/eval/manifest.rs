use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backends::{Payload, SampleRef};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Structural(format!("unknown split `{other}`"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub label: usize,
    pub split: Split,
    pub payload: Payload,
}

impl ManifestEntry {
    pub fn sample_ref(&self) -> SampleRef {
        SampleRef::new(self.sample_id.clone(), self.payload.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    pub class_counts: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    classes: Vec<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LabelField {
    Index(usize),
    Name(String),
}

#[derive(Deserialize)]
struct Line {
    id: String,
    label: LabelField,
    split: String,
    #[serde(default)]
    image: Option<PathBuf>,
    #[serde(default)]
    features: Option<Vec<f64>>,
}

impl DatasetManifest {
    /// Validates labels, ids and counts.
    pub fn new(class_names: Vec<String>, entries: Vec<ManifestEntry>) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::Structural("manifest declares no classes".into()));
        }
        let mut seen = HashSet::with_capacity(entries.len());
        let mut class_counts = vec![0; class_names.len()];
        for e in &entries {
            if e.sample_id.is_empty() {
                return Err(Error::Structural("empty sample id".into()));
            }
            if !seen.insert(e.sample_id.as_str()) {
                return Err(Error::Structural(format!("duplicate sample id `{}`", e.sample_id)));
            }
            if e.label >= class_names.len() {
                return Err(Error::Index {
                    index: e.label,
                    len: class_names.len(),
                });
            }
            class_counts[e.label] += 1;
        }
        Ok(Self {
            class_names,
            entries,
            class_counts,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// JSON Lines: `{"classes": [...]}` then `{"id", "label", "split", "image"?, "features"?}`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut header: Option<Header> = None;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let Some(h) = &header else {
                header = Some(serde_json::from_str(&line).map_err(|e| parse_err(i + 1, format!("bad header: {e}")))?);
                continue;
            };
            let rec: Line = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
            let label = match rec.label {
                LabelField::Index(l) => l,
                LabelField::Name(n) => h
                    .classes
                    .iter()
                    .position(|c| *c == n)
                    .ok_or_else(|| parse_err(i + 1, format!("unknown class `{n}`")))?,
            };
            let split = rec.split.parse().map_err(|e: Error| parse_err(i + 1, e.to_string()))?;
            let payload = match (rec.image, rec.features) {
                (Some(p), _) => {
                    let p = if p.is_relative() {
                        path.parent().unwrap_or(Path::new(".")).join(p)
                    } else {
                        p
                    };
                    Payload::ImageFile(p)
                }
                (None, Some(f)) => Payload::Features(f),
                (None, None) => Payload::None,
            };
            entries.push(ManifestEntry {
                sample_id: rec.id,
                label,
                split,
                payload,
            });
        }
        let header = header.ok_or_else(|| parse_err(1, "missing header record".into()))?;
        Self::new(header.classes, entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        let io = |e| Error::io(path, e);
        writeln!(out, "{}", serde_json::to_string(&Header { classes: self.class_names.clone() })?).map_err(io)?;
        for e in &self.entries {
            let mut rec = serde_json::json!({"id": e.sample_id, "label": e.label, "split": e.split});
            match &e.payload {
                Payload::ImageFile(p) => rec["image"] = serde_json::json!(p),
                Payload::Features(f) => rec["features"] = serde_json::json!(f),
                Payload::None | Payload::Bytes(_) => {}
            }
            writeln!(out, "{rec}").map_err(io)?;
        }
        out.flush().map_err(io)
    }

    /// Synthesizes a manifest from `root/<split>/<class_name>/<file>`.
    ///
    /// Class indices follow the lexicographic order of class directory names
    /// across all splits.
    pub fn scan_image_folder(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let mut files: Vec<(Split, String, PathBuf)> = Vec::new();
        let mut classes = BTreeSet::new();
        for split_dir in read_dir_sorted(root)? {
            if !split_dir.is_dir() {
                continue;
            }
            let split: Split = file_name(&split_dir).parse()?;
            for class_dir in read_dir_sorted(&split_dir)? {
                if !class_dir.is_dir() {
                    continue;
                }
                let class = file_name(&class_dir);
                classes.insert(class.clone());
                for f in read_dir_sorted(&class_dir)? {
                    if f.is_file() {
                        files.push((split, class.clone(), f));
                    }
                }
            }
        }
        let class_names: Vec<String> = classes.into_iter().collect();
        let entries = files
            .into_iter()
            .map(|(split, class, path)| ManifestEntry {
                sample_id: format!("{split}/{class}/{}", file_name(&path)),
                label: class_names.binary_search(&class).expect("class collected above"),
                split,
                payload: Payload::ImageFile(path),
            })
            .collect();
        Self::new(class_names, entries)
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}
