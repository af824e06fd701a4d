//! Synthetic two-group shift benchmarks with closed-form accuracy oracles.
//!
//! Features are `[core, spurious, noise...]`. The core feature follows the label in every group;
//! the spurious feature follows the label in the majority group and opposes it in the minority
//! group, where it is also shrunk by `minority_spurious_scale`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::io::{save_matrix, MatrixFormat};
use crate::data::{DatasetManifest, GroupsEntry, LinearHead, ModelEntry};
use crate::error::{Error, Result};
use crate::rng::{stream, tag, CosmosRng};

pub const GROUP_NAMES: [&str; 2] = ["majority", "minority"];
pub const MONTE_CARLO_DRAWS: usize = 400_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    Majority,
    Minority,
}

impl GroupKind {
    pub const ALL: [GroupKind; 2] = [GroupKind::Majority, GroupKind::Minority];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        GROUP_NAMES[self.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub core_mean: f64,
    pub spurious_mean: f64,
    pub noise_std: f64,
    pub noise_dims: usize,
    /// Minority spurious feature ~ N(-c mu_s t, (c sigma)^2); 1.0 gives an exact mirror image.
    pub minority_spurious_scale: f64,
    /// Source-split group prior `[majority, minority]`.
    pub source_prior: [f64; 2],
    pub source_size: usize,
    /// Test-split sample counts `[majority, minority]`.
    pub test_counts: [usize; 2],
    pub seed: u64,
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be positive, got {}", self.noise_std));
        }
        if !(self.core_mean.is_finite() && self.spurious_mean.is_finite()) {
            return bad("feature means must be finite".into());
        }
        if !(self.minority_spurious_scale > 0.0 && self.minority_spurious_scale.is_finite()) {
            return bad("minority_spurious_scale must be positive".into());
        }
        let [a, b] = self.source_prior;
        if a < 0.0 || b < 0.0 || ((a + b) - 1.0).abs() > 1e-9 {
            return bad(format!("source prior {a}, {b} must be non-negative and sum to 1"));
        }
        if self.source_size == 0 || self.test_counts.iter().sum::<usize>() == 0 {
            return bad("every split needs at least one sample".into());
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        2 + self.noise_dims
    }

    pub fn source_counts(&self) -> [usize; 2] {
        let maj = (self.source_size as f64 * self.source_prior[0]).round() as usize;
        let maj = maj.min(self.source_size);
        [maj, self.source_size - maj]
    }

    fn spurious_sign_scale(&self, group: GroupKind) -> (f64, f64) {
        match group {
            GroupKind::Majority => (1.0, 1.0),
            GroupKind::Minority => (-1.0, self.minority_spurious_scale),
        }
    }
}

/// Scores `beta * (w . x + b)` and emits 2-class logits `[-s/2, s/2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticClassifier {
    pub name: String,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub scale: f64,
}

impl AnalyticClassifier {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.weights.len() != dim {
            return Err(Error::Shape(format!(
                "classifier {:?} has {} weights for {dim} features",
                self.name,
                self.weights.len()
            )));
        }
        if !self.weights.iter().chain([&self.bias]).all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!("classifier {:?} is not finite", self.name)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "classifier {:?} needs a positive scale",
                self.name
            )));
        }
        Ok(())
    }

    pub fn decision(&self, x: ArrayView1<'_, f64>) -> f64 {
        x.iter().zip(&self.weights).map(|(a, w)| a * w).sum::<f64>() + self.bias
    }

    pub fn logits(&self, features: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros((features.nrows(), 2));
        for (i, x) in features.rows().into_iter().enumerate() {
            let s = self.scale * self.decision(x);
            out[[i, 0]] = -s / 2.0;
            out[[i, 1]] = s / 2.0;
        }
        out
    }

    /// The equivalent linear head over the full feature vector.
    pub fn head(&self) -> LinearHead {
        let half = self.scale / 2.0;
        let w = Array1::from(self.weights.clone());
        let mut weights = Array2::zeros((2, w.len()));
        weights.row_mut(0).assign(&(&w * -half));
        weights.row_mut(1).assign(&(&w * half));
        LinearHead {
            weights,
            bias: Array1::from(vec![-half * self.bias, half * self.bias]),
        }
    }

    fn touches_noise(&self) -> bool {
        self.weights.iter().skip(2).any(|&w| w != 0.0)
    }
}

#[derive(Debug, Clone)]
pub struct SplitData {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
    pub logits: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct Bundle {
    pub spec: ShiftSpec,
    pub classifiers: Vec<AnalyticClassifier>,
    pub source: SplitData,
    pub test: SplitData,
}

fn draw_split(spec: &ShiftSpec, counts: [usize; 2], rng: &mut CosmosRng) -> (Array2<f64>, Vec<usize>, Vec<usize>) {
    let mut rows: Vec<(GroupKind, usize)> = Vec::with_capacity(counts.iter().sum());
    for g in GroupKind::ALL {
        rows.extend((0..counts[g.index()]).map(|i| (g, i % 2)));
    }
    rows.shuffle(rng);
    let d = spec.dim();
    let mut x = Array2::zeros((rows.len(), d));
    for (i, &(g, y)) in rows.iter().enumerate() {
        let t = 2.0 * y as f64 - 1.0;
        let (sign, c) = spec.spurious_sign_scale(g);
        let mut z = || rng.sample::<f64, _>(StandardNormal);
        x[[i, 0]] = spec.core_mean * t + spec.noise_std * z();
        x[[i, 1]] = sign * c * spec.spurious_mean * t + c * spec.noise_std * z();
        for j in 2..d {
            x[[i, j]] = spec.noise_std * z();
        }
    }
    let labels = rows.iter().map(|r| r.1).collect();
    let groups = rows.iter().map(|r| r.0.index()).collect();
    (x, labels, groups)
}

/// Draw the source and test splits and every classifier's logits on them.
pub fn generate(spec: &ShiftSpec, classifiers: &[AnalyticClassifier]) -> Result<Bundle> {
    spec.validate()?;
    if classifiers.is_empty() {
        return Err(Error::InvalidArgument("at least one classifier is required".into()));
    }
    for c in classifiers {
        c.validate(spec.dim())?;
    }
    let split = |counts: [usize; 2], id: u64| {
        let mut rng = stream(spec.seed, &[tag::GENERATE, id]);
        let (features, labels, groups) = draw_split(spec, counts, &mut rng);
        let logits = classifiers.iter().map(|c| c.logits(features.view())).collect();
        SplitData {
            features,
            labels,
            groups,
            logits,
        }
    };
    Ok(Bundle {
        spec: spec.clone(),
        classifiers: classifiers.to_vec(),
        source: split(spec.source_counts(), 0),
        test: split(spec.test_counts, 1),
    })
}

pub fn standard_normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMethod {
    ClosedForm,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleAccuracy {
    pub accuracy: f64,
    pub std_error: f64,
    pub method: OracleMethod,
}

/// Probability that `classifier` is correct on `group`, for one label or averaged over the
/// balanced labels. Classifiers with nonzero noise weights get a Monte-Carlo estimate.
pub fn analytic_group_accuracy(
    classifier: &AnalyticClassifier,
    spec: &ShiftSpec,
    group: GroupKind,
    label: Option<usize>,
) -> Result<OracleAccuracy> {
    spec.validate()?;
    classifier.validate(spec.dim())?;
    let labels: Vec<usize> = match label {
        Some(y) if y < 2 => vec![y],
        Some(y) => return Err(Error::InvalidArgument(format!("label {y} is not binary"))),
        None => vec![0, 1],
    };
    let (sign, c) = spec.spurious_sign_scale(group);
    let w = &classifier.weights;
    if !classifier.touches_noise() {
        let sd = spec.noise_std * (w[0] * w[0] + w[1] * w[1] * c * c).sqrt();
        let signal = w[0] * spec.core_mean + w[1] * sign * c * spec.spurious_mean;
        let per_label = |y: usize| {
            let t = 2.0 * y as f64 - 1.0;
            let mean = t * signal + classifier.bias;
            // class 1 needs a positive score; ties go to class 0
            let margin = if y == 1 { mean } else { -mean };
            if sd == 0.0 {
                f64::from(u8::from(margin > 0.0 || (y == 0 && margin == 0.0)))
            } else {
                standard_normal_cdf(margin / sd)
            }
        };
        let accuracy = labels.iter().map(|&y| per_label(y)).sum::<f64>() / labels.len() as f64;
        return Ok(OracleAccuracy {
            accuracy,
            std_error: 0.0,
            method: OracleMethod::ClosedForm,
        });
    }

    let mut rng = stream(spec.seed, &[tag::ORACLE, group.index() as u64]);
    let mut correct = 0usize;
    let mut x = Array1::zeros(spec.dim());
    for i in 0..MONTE_CARLO_DRAWS {
        let y = labels[i % labels.len()];
        let t = 2.0 * y as f64 - 1.0;
        let mut z = || rng.sample::<f64, _>(StandardNormal);
        x[0] = spec.core_mean * t + spec.noise_std * z();
        x[1] = sign * c * spec.spurious_mean * t + c * spec.noise_std * z();
        for j in 2..spec.dim() {
            x[j] = spec.noise_std * z();
        }
        let pred = usize::from(classifier.decision(x.view()) > 0.0);
        correct += usize::from(pred == y);
    }
    let p = correct as f64 / MONTE_CARLO_DRAWS as f64;
    Ok(OracleAccuracy {
        accuracy: p,
        std_error: (p * (1.0 - p) / MONTE_CARLO_DRAWS as f64).sqrt(),
        method: OracleMethod::MonteCarlo,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupOracle {
    pub group: String,
    #[serde(flatten)]
    pub value: OracleAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOracle {
    pub name: String,
    pub groups: Vec<GroupOracle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleTable {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub spec: ShiftSpec,
    pub models: Vec<ModelOracle>,
}

impl OracleTable {
    pub fn compute(spec: &ShiftSpec, classifiers: &[AnalyticClassifier], preset: Option<&str>) -> Result<Self> {
        let models = classifiers
            .iter()
            .map(|c| {
                let groups = GroupKind::ALL
                    .iter()
                    .map(|&g| {
                        Ok(GroupOracle {
                            group: g.name().to_string(),
                            value: analytic_group_accuracy(c, spec, g, None)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ModelOracle {
                    name: c.name.clone(),
                    groups,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            preset: preset.map(str::to_string),
            spec: spec.clone(),
            models,
        })
    }

    pub fn group_accuracy(&self, model: usize, group: GroupKind) -> f64 {
        self.models[model].groups[group.index()].value.accuracy
    }

    /// Expected accuracy on a test set whose majority share is `majority_fraction`.
    pub fn mixture_accuracy(&self, model: usize, majority_fraction: f64) -> f64 {
        majority_fraction * self.group_accuracy(model, GroupKind::Majority)
            + (1.0 - majority_fraction) * self.group_accuracy(model, GroupKind::Minority)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct Preset {
    pub name: String,
    pub spec: ShiftSpec,
    pub classifiers: Vec<AnalyticClassifier>,
}

pub const PRESETS: [&str; 2] = ["two-model-tradeoff", "six-model-sweep"];

pub fn preset(name: &str, seed: u64) -> Result<Preset> {
    let (spec, classifiers) = match name {
        "two-model-tradeoff" => {
            let spec = ShiftSpec {
                core_mean: 1.0,
                spurious_mean: 2.0,
                noise_std: 1.0,
                noise_dims: 2,
                minority_spurious_scale: 0.005,
                source_prior: [0.95, 0.05],
                source_size: 4000,
                test_counts: [2000, 2000],
                seed,
            };
            let var = spec.noise_std * spec.noise_std;
            let robust = AnalyticClassifier {
                name: "robust".into(),
                weights: vec![1.0, 0.0, 0.0, 0.0],
                bias: 0.0,
                scale: 2.0 * spec.core_mean / var,
            };
            let shortcut = AnalyticClassifier {
                name: "shortcut".into(),
                weights: vec![0.0, 1.0, 0.0, 0.0],
                bias: 0.0,
                scale: 2.0 * spec.spurious_mean / var,
            };
            (spec, vec![robust, shortcut])
        }
        "six-model-sweep" => {
            let noise = [0.0, 0.6, 0.9, 1.2, 1.5, 1.8];
            let scales = [1.0, 2.0, 0.5, 3.0, 1.5, 4.0];
            let spec = ShiftSpec {
                core_mean: 1.0,
                spurious_mean: 2.0,
                noise_std: 1.0,
                noise_dims: noise.len(),
                minority_spurious_scale: 0.25,
                source_prior: [0.9, 0.1],
                source_size: 20_000,
                test_counts: [2000, 2000],
                seed,
            };
            let (a, b) = (10f64.to_radians().cos(), 10f64.to_radians().sin());
            let signal = a * spec.core_mean + b * spec.spurious_mean;
            let classifiers = noise
                .iter()
                .zip(scales)
                .enumerate()
                .map(|(i, (&rho, s))| {
                    let mut weights = vec![0.0; spec.dim()];
                    weights[0] = a;
                    weights[1] = b;
                    weights[2 + i] = rho;
                    let var = spec.noise_std * spec.noise_std * (a * a + b * b + rho * rho);
                    AnalyticClassifier {
                        name: format!("ckpt{i}"),
                        weights,
                        bias: 0.0,
                        scale: s * 2.0 * signal / var,
                    }
                })
                .collect();
            (spec, classifiers)
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(Preset {
        name: name.to_string(),
        spec,
        classifiers,
    })
}

/// Paths of a written bundle.
#[derive(Debug, Clone)]
pub struct BundlePaths {
    pub source_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub oracle: PathBuf,
}

fn column(values: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((values.len(), 1), |(i, _)| values[i] as f64)
}

fn write_split(dir: &Path, split: &str, data: &SplitData, classifiers: &[AnalyticClassifier]) -> Result<PathBuf> {
    let rel = |name: String| PathBuf::from(name);
    let mut models = Vec::new();
    for (c, logits) in classifiers.iter().zip(&data.logits) {
        let logits_path = rel(format!("{split}_logits_{}.bin", c.name));
        save_matrix(logits.view(), &dir.join(&logits_path), MatrixFormat::Bin)?;
        models.push(ModelEntry {
            name: c.name.clone(),
            logits: logits_path,
            head: Some(rel(format!("head_{}.csv", c.name))),
        });
    }
    let embeddings = rel(format!("{split}_embeddings.bin"));
    save_matrix(data.features.view(), &dir.join(&embeddings), MatrixFormat::Bin)?;
    let labels = rel(format!("{split}_labels.csv"));
    save_matrix(column(&data.labels).view(), &dir.join(&labels), MatrixFormat::Csv)?;
    let groups = rel(format!("{split}_groups.csv"));
    save_matrix(column(&data.groups).view(), &dir.join(&groups), MatrixFormat::Csv)?;
    let manifest = DatasetManifest {
        split: split.to_string(),
        classes: 2,
        models,
        embeddings: Some(embeddings),
        labels: Some(labels),
        groups: Some(GroupsEntry {
            path: groups,
            majority: vec![GroupKind::Majority.index()],
            names: Some(GROUP_NAMES.iter().map(|s| s.to_string()).collect()),
        }),
    };
    let path = dir.join(format!("{split}.json"));
    manifest.save(&path)?;
    Ok(path)
}

/// Write both splits, the classifiers' heads and the oracle table into `dir`.
pub fn write_bundle(bundle: &Bundle, oracle: &OracleTable, dir: &Path) -> Result<BundlePaths> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for c in &bundle.classifiers {
        let path = dir.join(format!("head_{}.csv", c.name));
        save_matrix(c.head().to_augmented().view(), &path, MatrixFormat::Csv)?;
    }
    let source_manifest = write_split(dir, "source", &bundle.source, &bundle.classifiers)?;
    let test_manifest = write_split(dir, "test", &bundle.test, &bundle.classifiers)?;
    let oracle_path = dir.join("oracle.json");
    let text = serde_json::to_string_pretty(oracle)?;
    fs::write(&oracle_path, text + "\n").map_err(|e| Error::io(&oracle_path, e))?;
    Ok(BundlePaths {
        source_manifest,
        test_manifest,
        oracle: oracle_path,
    })
}
