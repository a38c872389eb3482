//! Case manifests: the JSON contract that ties images, labels and auxiliary
//! maps together across pipeline steps.
//!
//! Relative paths are resolved against the manifest's own directory. On save,
//! paths inside that directory are written relative to it.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Burden {
    High,
    Low,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Gold,
    Pseudo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub dataset: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image2: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parcellation: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wmh: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotated_slices: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burden: Option<Burden>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl CaseEntry {
    pub fn new(id: impl Into<String>, dataset: impl Into<String>, image: impl Into<PathBuf>) -> Self {
        CaseEntry {
            id: id.into(),
            dataset: dataset.into(),
            image: image.into(),
            image2: None,
            labels: None,
            parcellation: None,
            wmh: None,
            annotated_slices: None,
            burden: None,
            provenance: Provenance::Gold,
        }
    }

    pub fn channels(&self) -> usize {
        if self.image2.is_some() {
            2
        } else {
            1
        }
    }

    fn paths_mut(&mut self) -> impl Iterator<Item = &mut PathBuf> {
        std::iter::once(&mut self.image).chain(
            [
                self.image2.as_mut(),
                self.labels.as_mut(),
                self.parcellation.as_mut(),
                self.wmh.as_mut(),
            ]
            .into_iter()
            .flatten(),
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub cases: Vec<CaseEntry>,
    /// Fingerprint of the configuration of the step that wrote this manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    /// Fingerprint of the preprocessing applied to the images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocess_fingerprint: Option<String>,
}

impl Manifest {
    pub fn new(cases: Vec<CaseEntry>) -> Self {
        Manifest {
            cases,
            ..Default::default()
        }
    }

    pub fn validate_ids(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for c in &self.cases {
            if !seen.insert(c.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate case id {:?}", c.id)));
            }
        }
        Ok(())
    }

    /// Parses, resolves paths against `base_dir` and checks ids.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut m: Manifest = serde_json::from_str(text)?;
        m.validate_ids()?;
        for c in &mut m.cases {
            for p in c.paths_mut() {
                if p.is_relative() {
                    *p = base_dir.join(&*p);
                }
            }
        }
        Ok(m)
    }

    /// Loads a manifest and checks that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut m = Self::from_json(&text, base)?;
        for c in &mut m.cases {
            let id = c.id.clone();
            for p in c.paths_mut() {
                if !p.exists() {
                    return Err(Error::Manifest(format!(
                        "case {id:?}: referenced file {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        Ok(m)
    }

    /// Canonical JSON (sorted keys) with paths made relative to `base_dir`
    /// where possible.
    pub fn to_canonical_json(&self, base_dir: &Path) -> Result<String> {
        let mut copy = self.clone();
        for c in &mut copy.cases {
            for p in c.paths_mut() {
                if let Ok(rel) = p.strip_prefix(base_dir) {
                    *p = rel.to_path_buf();
                }
            }
        }
        canonical_json(&copy)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let text = self.to_canonical_json(base)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn get(&self, id: &str) -> Option<&CaseEntry> {
        self.cases.iter().find(|c| c.id == id)
    }

    pub fn datasets(&self) -> BTreeSet<&str> {
        self.cases.iter().map(|c| c.dataset.as_str()).collect()
    }
}

/// Pretty JSON with object keys in sorted order.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json::Value keeps object keys in a BTreeMap, which sorts them.
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string_pretty(&v)?)
}
