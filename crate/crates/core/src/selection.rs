//! Routing inputs to base models.
//!
//! All argmaxes break ties toward the smallest model index, then the smallest class index.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationProfile;
use crate::clustering::{build_features, choose_k, kmeans, standardize, ClusterAssignment, ClusterConfig};
use crate::confidence::{argmax, confidence_table, ConfidenceTable};
use crate::data::{LinearHead, NamedLogits, ValidatedDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SelectionMode {
    Cluster,
    InputDep,
    EnsembleLogits,
    EnsembleWeights,
    Single(usize),
}

impl SelectionMode {
    pub fn is_routing(&self) -> bool {
        matches!(self, Self::Cluster | Self::InputDep | Self::Single(_))
    }
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Cluster => f.write_str("cluster"),
            Self::InputDep => f.write_str("input-dep"),
            Self::EnsembleLogits => f.write_str("ensemble-logits"),
            Self::EnsembleWeights => f.write_str("ensemble-weights"),
            Self::Single(i) => write!(f, "single:{i}"),
        }
    }
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cluster" => Ok(Self::Cluster),
            "input-dep" => Ok(Self::InputDep),
            "ensemble-logits" => Ok(Self::EnsembleLogits),
            "ensemble-weights" => Ok(Self::EnsembleWeights),
            other => other
                .strip_prefix("single:")
                .and_then(|i| i.parse().ok())
                .map(Self::Single)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster: usize,
    pub size: usize,
    pub mean_confidence: Vec<f64>,
    pub winner: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub mode: SelectionMode,
    /// Chosen model per input; `None` when an ensemble produced the label.
    pub chosen: Vec<Option<usize>>,
    pub labels: Vec<usize>,
    /// Cluster id per input for routing modes (input-dep: each input is its own cluster).
    pub clusters: Option<Vec<usize>>,
    pub cluster_table: Vec<ClusterSummary>,
    /// Fraction of inputs routed to each model; `None` for ensembles.
    pub frequencies: Option<Vec<f64>>,
}

fn frequencies(chosen: &[usize], models: usize) -> Vec<f64> {
    let mut counts = vec![0usize; models];
    for &c in chosen {
        counts[c] += 1;
    }
    let n = chosen.len() as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

fn routed(
    mode: SelectionMode,
    conf: &ConfidenceTable,
    chosen: Vec<usize>,
    clusters: Vec<usize>,
    cluster_table: Vec<ClusterSummary>,
) -> SelectionResult {
    let labels = chosen
        .iter()
        .enumerate()
        .map(|(x, &m)| conf.predicted[[x, m]])
        .collect();
    SelectionResult {
        mode,
        frequencies: Some(frequencies(&chosen, conf.models())),
        chosen: chosen.into_iter().map(Some).collect(),
        labels,
        clusters: Some(clusters),
        cluster_table,
    }
}

/// Route each cluster to the model with the highest mean confidence over its members.
pub fn select_cluster(conf: &ConfidenceTable, clusters: &ClusterAssignment) -> Result<SelectionResult> {
    let n = conf.rows();
    if clusters.labels.len() != n {
        return Err(Error::Shape(format!(
            "confidence table has {n} rows, clustering has {}",
            clusters.labels.len()
        )));
    }
    let k = clusters.k;
    let m = conf.models();
    let mut sums = Array2::<f64>::zeros((k, m));
    let mut sizes = vec![0usize; k];
    for (x, &c) in clusters.labels.iter().enumerate() {
        let mut row = sums.row_mut(c);
        row += &conf.confidence.row(x);
        sizes[c] += 1;
    }
    let table: Vec<ClusterSummary> = (0..k)
        .map(|c| {
            let mean: Vec<f64> = sums
                .row(c)
                .iter()
                .map(|s| s / sizes[c].max(1) as f64)
                .collect();
            ClusterSummary {
                cluster: c,
                size: sizes[c],
                winner: argmax(ndarray::ArrayView1::from(&mean[..])),
                mean_confidence: mean,
            }
        })
        .collect();
    let chosen = clusters.labels.iter().map(|&c| table[c].winner).collect();
    Ok(routed(
        SelectionMode::Cluster,
        conf,
        chosen,
        clusters.labels.clone(),
        table,
    ))
}

/// Route each input to its most confident model.
pub fn select_input_dep(conf: &ConfidenceTable) -> SelectionResult {
    let chosen: Vec<usize> = conf
        .confidence
        .axis_iter(Axis(0))
        .map(argmax)
        .collect();
    let n = chosen.len();
    routed(
        SelectionMode::InputDep,
        conf,
        chosen,
        (0..n).collect(),
        Vec::new(),
    )
}

pub fn select_single(conf: &ConfidenceTable, model: usize) -> Result<SelectionResult> {
    if model >= conf.models() {
        return Err(Error::InvalidArgument(format!(
            "model index {model} out of range for {} models",
            conf.models()
        )));
    }
    let n = conf.rows();
    Ok(routed(
        SelectionMode::Single(model),
        conf,
        vec![model; n],
        (0..n).collect(),
        Vec::new(),
    ))
}

fn ensemble_result(mode: SelectionMode, labels: Vec<usize>) -> SelectionResult {
    SelectionResult {
        mode,
        chosen: vec![None; labels.len()],
        labels,
        clusters: None,
        cluster_table: Vec::new(),
        frequencies: None,
    }
}

/// Argmax of the mean (temperature-scaled unless `raw`) logits across models.
pub fn ensemble_logits(
    models: &[NamedLogits],
    profile: &CalibrationProfile,
    raw: bool,
) -> Result<SelectionResult> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidArgument("ensemble needs at least one model".into()))?;
    if models.len() == 1 {
        log::warn!("ensemble over a single model reduces to that model");
    }
    let alphas = if raw {
        vec![1.0; models.len()]
    } else {
        profile.alphas_for(models.iter().map(|m| m.name.as_str()))?
    };
    let dim = first.logits.view().dim();
    let mut mean = Array2::<f64>::zeros(dim);
    for (m, &a) in models.iter().zip(&alphas) {
        if m.logits.view().dim() != dim {
            return Err(Error::Shape(format!(
                "model {:?} is {:?}, expected {dim:?}",
                m.name,
                m.logits.view().dim()
            )));
        }
        mean.scaled_add(1.0 / a, &m.logits.view());
    }
    mean /= models.len() as f64;
    let labels = mean.axis_iter(Axis(0)).map(argmax).collect();
    Ok(ensemble_result(SelectionMode::EnsembleLogits, labels))
}

/// Average the heads' weights and biases, then predict with the averaged head.
pub fn ensemble_weights(heads: &[LinearHead], features: ArrayView2<'_, f64>) -> Result<SelectionResult> {
    let first = heads
        .first()
        .ok_or_else(|| Error::Unsupported("ensemble-weights needs linear heads".into()))?;
    let (c, d) = first.weights.dim();
    if let Some(bad) = heads.iter().find(|h| h.weights.dim() != (c, d) || h.bias.len() != c) {
        return Err(Error::Shape(format!(
            "linear heads disagree: {c}x{d} vs {:?}",
            bad.weights.dim()
        )));
    }
    if features.ncols() != d {
        return Err(Error::Shape(format!(
            "heads expect {d} features, got {}",
            features.ncols()
        )));
    }
    let k = heads.len() as f64;
    let mut w = Array2::<f64>::zeros((c, d));
    let mut b = ndarray::Array1::<f64>::zeros(c);
    for h in heads {
        w += &h.weights;
        b += &h.bias;
    }
    w /= k;
    b /= k;
    let scores = features.dot(&w.t()) + &b;
    let labels = scores.axis_iter(Axis(0)).map(argmax).collect();
    Ok(ensemble_result(SelectionMode::EnsembleWeights, labels))
}

/// Models ordered by how often they were selected; the first is the tuning recommendation.
pub fn tune_by_frequency(result: &SelectionResult) -> Result<Vec<usize>> {
    let freq = result.frequencies.as_ref().ok_or_else(|| {
        Error::Unsupported(format!(
            "{} results carry no selection frequencies",
            result.mode
        ))
    })?;
    let mut order: Vec<usize> = (0..freq.len()).collect();
    // stable sort keeps the smaller index first on ties
    order.sort_by(|&a, &b| freq[b].partial_cmp(&freq[a]).expect("finite frequencies"));
    Ok(order)
}

impl SelectionResult {
    /// Predictions CSV. Routing modes: `index,cluster,model,label`; ensembles: `index,model,label`
    /// with model `ensemble`.
    pub fn predictions_csv(&self, model_names: &[String]) -> String {
        let mut out = String::new();
        match &self.clusters {
            Some(clusters) => {
                out.push_str("index,cluster,model,label\n");
                for (i, ((c, m), y)) in clusters.iter().zip(&self.chosen).zip(&self.labels).enumerate() {
                    let m = m.expect("routing result");
                    out.push_str(&format!("{i},{c},{},{y}\n", model_names[m]));
                }
            }
            None => {
                out.push_str("index,model,label\n");
                for (i, y) in self.labels.iter().enumerate() {
                    out.push_str(&format!("{i},ensemble,{y}\n"));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct SelectOptions {
    pub cluster: ClusterConfig,
    /// Average raw rather than temperature-scaled logits in ensemble-logits mode.
    pub raw_logits: bool,
}

/// Run `mode` on a loaded split.
pub fn select(
    dataset: &ValidatedDataset,
    profile: &CalibrationProfile,
    mode: SelectionMode,
    options: &SelectOptions,
) -> Result<SelectionResult> {
    match mode {
        SelectionMode::EnsembleLogits => ensemble_logits(&dataset.models, profile, options.raw_logits),
        SelectionMode::EnsembleWeights => {
            let heads = dataset.heads.as_ref().ok_or_else(|| {
                Error::Unsupported("ensemble-weights needs a linear head for every model".into())
            })?;
            let emb = dataset.embeddings.as_ref().ok_or_else(|| {
                Error::Unsupported("ensemble-weights needs embeddings".into())
            })?;
            ensemble_weights(heads, emb.view())
        }
        SelectionMode::InputDep => Ok(select_input_dep(&confidence_table(&dataset.models, profile)?)),
        SelectionMode::Single(i) => select_single(&confidence_table(&dataset.models, profile)?, i),
        SelectionMode::Cluster => {
            let cfg = &options.cluster;
            cfg.validate()?;
            let conf = confidence_table(&dataset.models, profile)?;
            let mut features = build_features(
                &dataset.models,
                profile,
                dataset.embeddings.as_ref(),
                cfg.features,
            )?;
            if cfg.standardize {
                features = standardize(features);
            }
            let k = choose_k(features.nrows(), cfg.points_per_cluster);
            let clusters = kmeans(features.view(), k, cfg)?;
            select_cluster(&conf, &clusters)
        }
    }
}
