use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::io::load_matrix_auto;
use crate::data::matrix::{
    column_to_indices, EmbeddingMatrix, GroupVector, LabelVector, LinearHead, LogitMatrix,
};
use crate::error::{Error, Result};

/// JSON description of one dataset split. Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub classes: usize,
    pub models: Vec<ModelEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<GroupsEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub name: String,
    pub logits: PathBuf,
    /// Optional C x (d+1) linear head over the embeddings (last column = bias).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupsEntry {
    pub path: PathBuf,
    pub majority: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub names: Option<Vec<String>>,
}

impl DatasetManifest {
    /// Read the manifest and return it along with the directory its paths resolve against.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest = serde_json::from_str(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((manifest, base))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn model_names(&self) -> Vec<&str> {
        self.models.iter().map(|m| m.name.as_str()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct NamedLogits {
    pub name: String,
    pub logits: LogitMatrix,
}

/// A split whose matrices have all been loaded and cross-checked.
#[derive(Debug, Clone)]
pub struct ValidatedDataset {
    pub split: String,
    pub classes: usize,
    pub models: Vec<NamedLogits>,
    pub embeddings: Option<EmbeddingMatrix>,
    pub labels: Option<LabelVector>,
    pub groups: Option<GroupVector>,
    pub heads: Option<Vec<LinearHead>>,
}

impl ValidatedDataset {
    pub fn len(&self) -> usize {
        self.models[0].logits.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn model_names(&self) -> Vec<&str> {
        self.models.iter().map(|m| m.name.as_str()).collect()
    }

    pub fn logits(&self) -> Vec<&LogitMatrix> {
        self.models.iter().map(|m| &m.logits).collect()
    }

    pub fn require_labels(&self) -> Result<&LabelVector> {
        self.labels.as_ref().ok_or_else(|| {
            Error::Manifest(vec![format!(
                "split {:?}: field \"labels\" is required",
                self.split
            )])
        })
    }

    pub fn require_groups(&self) -> Result<&GroupVector> {
        self.groups.as_ref().ok_or_else(|| {
            Error::Manifest(vec![format!(
                "split {:?}: field \"groups\" is required",
                self.split
            )])
        })
    }

    /// Restrict every per-sample container to `rows`, in that order.
    pub fn subset(&self, rows: &[usize]) -> ValidatedDataset {
        ValidatedDataset {
            split: self.split.clone(),
            classes: self.classes,
            models: self
                .models
                .iter()
                .map(|m| NamedLogits {
                    name: m.name.clone(),
                    logits: m.logits.select_rows(rows),
                })
                .collect(),
            embeddings: self.embeddings.as_ref().map(|e| e.select_rows(rows)),
            labels: self.labels.as_ref().map(|l| l.select(rows)),
            groups: self.groups.as_ref().map(|g| {
                let z = rows.iter().map(|&i| g.as_slice()[i]).collect();
                let majority = (0..g.group_count()).map(|k| g.is_majority(k)).collect();
                let names = (0..g.group_count()).map(|k| g.name(k).to_string()).collect();
                GroupVector::with_names(z, majority, names).expect("subset keeps group ids valid")
            }),
            heads: self.heads.clone(),
        }
    }
}

/// Load every file the manifest references and cross-check shapes.
///
/// All violations are collected into a single [`Error::Manifest`] rather than
/// stopping at the first one.
pub fn validate_manifest(manifest: &DatasetManifest, base: &Path) -> Result<ValidatedDataset> {
    let mut issues = Vec::new();
    let resolve = |p: &Path| base.join(p);
    let c = manifest.classes;

    if c < 2 {
        issues.push(format!("classes must be >= 2, got {c}"));
    }
    if manifest.models.is_empty() {
        issues.push("manifest lists no models".into());
    }
    for (i, m) in manifest.models.iter().enumerate() {
        if manifest.models[..i].iter().any(|o| o.name == m.name) {
            issues.push(format!("duplicate model name {:?}", m.name));
        }
    }

    let mut models = Vec::new();
    let mut reference: Option<(String, usize)> = None;
    for entry in &manifest.models {
        let path = resolve(&entry.logits);
        match load_matrix_auto(&path).and_then(LogitMatrix::new) {
            Ok(logits) => {
                if logits.classes() != c {
                    issues.push(format!(
                        "model {:?} has {} classes, manifest declares {c}",
                        entry.name,
                        logits.classes()
                    ));
                }
                match &reference {
                    None => reference = Some((entry.name.clone(), logits.rows())),
                    Some((ref_name, n)) if *n != logits.rows() => issues.push(format!(
                        "shape mismatch: model {:?} has {} rows but model {ref_name:?} has {n}",
                        entry.name,
                        logits.rows()
                    )),
                    Some(_) => {}
                }
                models.push(NamedLogits {
                    name: entry.name.clone(),
                    logits,
                });
            }
            Err(e) => issues.push(format!("model {:?}: {e}", entry.name)),
        }
    }
    let n = reference.as_ref().map(|r| r.1);

    let embeddings = manifest.embeddings.as_ref().and_then(|p| {
        match load_matrix_auto(&resolve(p)).and_then(EmbeddingMatrix::new) {
            Ok(e) => {
                if let Some(n) = n.filter(|&n| n != e.rows()) {
                    issues.push(format!("embeddings have {} rows, models have {n}", e.rows()));
                }
                Some(e)
            }
            Err(e) => {
                issues.push(format!("embeddings: {e}"));
                None
            }
        }
    });

    let labels = manifest.labels.as_ref().and_then(|p| {
        let loaded = load_matrix_auto(&resolve(p)).and_then(|m| column_to_indices(&m, "label"));
        match loaded {
            Ok(raw) => {
                if let Some(n) = n.filter(|&n| n != raw.len()) {
                    issues.push(format!("labels have {} rows, models have {n}", raw.len()));
                }
                match LabelVector::new(raw, c) {
                    Ok(l) => Some(l),
                    Err(e) => {
                        issues.push(format!("labels: {e}"));
                        None
                    }
                }
            }
            Err(e) => {
                issues.push(format!("labels: {e}"));
                None
            }
        }
    });

    let groups = manifest.groups.as_ref().and_then(|entry| {
        let loaded =
            load_matrix_auto(&resolve(&entry.path)).and_then(|m| column_to_indices(&m, "group"));
        let raw = match loaded {
            Ok(raw) => raw,
            Err(e) => {
                issues.push(format!("groups: {e}"));
                return None;
            }
        };
        if let Some(n) = n.filter(|&n| n != raw.len()) {
            issues.push(format!("groups have {} rows, models have {n}", raw.len()));
        }
        let g = match &entry.names {
            Some(names) => names.len(),
            None => raw
                .iter()
                .chain(entry.majority.iter())
                .max()
                .map_or(0, |&m| m + 1),
        };
        if let Some(&bad) = entry.majority.iter().find(|&&m| m >= g) {
            issues.push(format!("majority group id {bad} is out of range for {g} groups"));
            return None;
        }
        let mut majority = vec![false; g];
        for &m in &entry.majority {
            majority[m] = true;
        }
        let names = entry
            .names
            .clone()
            .unwrap_or_else(|| (0..g).map(|k| k.to_string()).collect());
        match GroupVector::with_names(raw, majority, names) {
            Ok(gv) => Some(gv),
            Err(e) => {
                issues.push(format!("groups: {e}"));
                None
            }
        }
    });

    let head_count = manifest.models.iter().filter(|m| m.head.is_some()).count();
    let heads = if head_count == 0 {
        None
    } else if head_count != manifest.models.len() {
        issues.push("either every model or no model must declare a head".into());
        None
    } else {
        let mut heads = Vec::new();
        for entry in &manifest.models {
            let path = resolve(entry.head.as_ref().expect("counted above"));
            match load_matrix_auto(&path).and_then(LinearHead::from_augmented) {
                Ok(h) => {
                    if h.classes() != c {
                        issues.push(format!(
                            "head of {:?} has {} classes, manifest declares {c}",
                            entry.name,
                            h.classes()
                        ));
                    }
                    if let Some(e) = embeddings.as_ref().filter(|e| e.dim() != h.input_dim()) {
                        issues.push(format!(
                            "head of {:?} expects {} inputs, embeddings have {}",
                            entry.name,
                            h.input_dim(),
                            e.dim()
                        ));
                    }
                    heads.push(h);
                }
                Err(e) => issues.push(format!("head of {:?}: {e}", entry.name)),
            }
        }
        Some(heads)
    };

    if !issues.is_empty() {
        return Err(Error::Manifest(issues));
    }
    Ok(ValidatedDataset {
        split: manifest.split.clone(),
        classes: c,
        models,
        embeddings,
        labels,
        groups,
        heads,
    })
}

/// [`DatasetManifest::load`] followed by [`validate_manifest`].
pub fn load_dataset(path: &Path) -> Result<ValidatedDataset> {
    let (manifest, base) = DatasetManifest::load(path)?;
    validate_manifest(&manifest, &base)
}
