//! Mixture test sets, accuracy, regret and the evaluation suite.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationProfile;
use crate::clustering::{ClusterConfig, FeatureSource};
use crate::data::{GroupVector, ValidatedDataset};
use crate::error::{Error, Result};
use crate::rng::{stream, substream, tag};
use crate::selection::{select, SelectOptions, SelectionMode};

pub const DEFAULT_MIXTURES: [u32; 7] = [0, 10, 30, 50, 70, 90, 100];
pub const DEFAULT_ABLATION_SIZES: [usize; 7] = [1, 5, 10, 20, 50, 100, 500];

/// Majority and minority counts for a mixture with `m` percent majority.
pub fn mixture_counts(majority_pool: usize, minority_pool: usize, m: u32) -> Result<(usize, usize)> {
    if m > 100 {
        return Err(Error::InvalidArgument(format!("majority percentage {m} exceeds 100")));
    }
    let m = m as usize;
    if m > 0 && majority_pool == 0 {
        return Err(Error::InvalidArgument(format!("m={m} needs a non-empty majority pool")));
    }
    if m < 100 && minority_pool == 0 {
        return Err(Error::InvalidArgument(format!("m={m} needs a non-empty minority pool")));
    }
    let by_maj = (m > 0).then(|| majority_pool * 100 / m);
    let by_min = (m < 100).then(|| minority_pool * 100 / (100 - m));
    let n = by_maj.into_iter().chain(by_min).min().expect("one bound applies");
    let maj = (n * m + 50) / 100;
    Ok((maj, n - maj))
}

/// Sorted indices of a mixture drawn without replacement from the two pools.
pub fn build_mixture(groups: &GroupVector, m: u32, seed: u64) -> Result<Vec<usize>> {
    let maj_pool = groups.pool(true);
    let min_pool = groups.pool(false);
    let (maj, min) = mixture_counts(maj_pool.len(), min_pool.len(), m)?;
    let mut rng = stream(seed, &[tag::MIXTURE, u64::from(m)]);
    let mut out: Vec<usize> = sample(&mut rng, maj_pool.len(), maj)
        .into_iter()
        .map(|i| maj_pool[i])
        .collect();
    out.extend(sample(&mut rng, min_pool.len(), min).into_iter().map(|i| min_pool[i]));
    out.sort_unstable();
    Ok(out)
}

/// Fraction of `subset` where the prediction matches the label.
pub fn score(predictions: &[usize], labels: &[usize], subset: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if subset.is_empty() {
        return Err(Error::InvalidArgument("cannot score an empty subset".into()));
    }
    let mut correct = 0usize;
    for &i in subset {
        if i >= labels.len() {
            return Err(Error::InvalidArgument(format!(
                "index {i} out of range for {} samples",
                labels.len()
            )));
        }
        correct += usize::from(predictions[i] == labels[i]);
    }
    Ok(correct as f64 / subset.len() as f64)
}

/// Mean over groups of `method - best_base`.
pub fn average_regret(method: &[f64], best_base: &[f64]) -> Result<f64> {
    if method.len() != best_base.len() || method.is_empty() {
        return Err(Error::Shape(format!(
            "{} method accuracies for {} groups",
            method.len(),
            best_base.len()
        )));
    }
    let total: f64 = method.iter().zip(best_base).map(|(a, b)| a - b).sum();
    Ok(total / method.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSetReport {
    pub name: String,
    pub size: usize,
    pub accuracy: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub best_base: f64,
    pub accuracy: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub avg_acc: f64,
    pub avg_regret: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub test_sets: Vec<TestSetReport>,
    pub groups: Vec<GroupReport>,
    pub summary: BTreeMap<String, MethodSummary>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Long-format CSV: `test_set,size,method,accuracy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("test_set,size,method,accuracy\n");
        for t in &self.test_sets {
            for (m, a) in &t.accuracy {
                out.push_str(&format!("{},{},{m},{a}\n", t.name, t.size));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub methods: Vec<SelectionMode>,
    pub mixtures: Vec<u32>,
    /// Average accuracy over mixtures and groups (`true`) or mixtures only.
    pub groups_in_average: bool,
    pub points_per_cluster: usize,
    pub features: FeatureSource,
    pub standardize: bool,
    pub raw_logits: bool,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            methods: vec![SelectionMode::Cluster, SelectionMode::InputDep],
            mixtures: DEFAULT_MIXTURES.to_vec(),
            groups_in_average: true,
            points_per_cluster: 50,
            features: FeatureSource::CalibratedLogits,
            standardize: false,
            raw_logits: false,
            seed: 0,
        }
    }
}

/// Report key for a method: the model name for single models, the mode name otherwise.
pub fn method_name(mode: SelectionMode, model_names: &[&str]) -> String {
    match mode {
        SelectionMode::Single(i) => model_names
            .get(i)
            .map_or_else(|| mode.to_string(), |n| n.to_string()),
        other => other.to_string(),
    }
}

struct TestSet {
    name: String,
    rows: Vec<usize>,
    group: bool,
}

fn run_test_set(
    dataset: &ValidatedDataset,
    profile: &CalibrationProfile,
    config: &SuiteConfig,
    set: &TestSet,
    position: usize,
    modes: &[SelectionMode],
) -> Result<Vec<f64>> {
    let sub = dataset.subset(&set.rows);
    let labels = sub.require_labels()?.as_slice().to_vec();
    let all: Vec<usize> = (0..labels.len()).collect();
    let options = SelectOptions {
        cluster: ClusterConfig {
            points_per_cluster: config.points_per_cluster,
            features: config.features,
            standardize: config.standardize,
            seed: substream(config.seed, &[tag::CLUSTER, position as u64]),
            ..ClusterConfig::default()
        },
        raw_logits: config.raw_logits,
    };
    modes
        .iter()
        .map(|&mode| {
            let r = select(&sub, profile, mode, &options)?;
            score(&r.labels, &labels, &all)
        })
        .collect()
}

/// Evaluate every method on every mixture and every non-empty group, re-running selection on
/// each test set.
pub fn run_suite(
    dataset: &ValidatedDataset,
    profile: &CalibrationProfile,
    config: &SuiteConfig,
) -> Result<EvalReport> {
    let groups = dataset.require_groups()?;
    dataset.require_labels()?;
    if config.methods.is_empty() {
        return Err(Error::InvalidArgument("no methods to evaluate".into()));
    }
    let names = dataset.model_names();
    let k = dataset.models.len();

    let mut sets = Vec::new();
    for &m in &config.mixtures {
        sets.push(TestSet {
            name: format!("m={m}"),
            rows: build_mixture(groups, m, config.seed)?,
            group: false,
        });
    }
    for g in 0..groups.group_count() {
        let rows = groups.members(g);
        if rows.is_empty() {
            log::warn!("group {:?} has no samples and is skipped", groups.name(g));
            continue;
        }
        sets.push(TestSet {
            name: format!("group={}", groups.name(g)),
            rows,
            group: true,
        });
    }

    // methods first, then every base model for the best-base column
    let mut modes = config.methods.clone();
    modes.extend((0..k).map(SelectionMode::Single));
    let method_names: Vec<String> = config.methods.iter().map(|&m| method_name(m, &names)).collect();

    let scores: Vec<Vec<f64>> = sets
        .par_iter()
        .enumerate()
        .map(|(pos, set)| run_test_set(dataset, profile, config, set, pos, &modes))
        .collect::<Result<_>>()?;

    let nm = config.methods.len();
    let mut test_sets = Vec::new();
    let mut group_reports = Vec::new();
    for (set, acc) in sets.iter().zip(&scores) {
        let accuracy: BTreeMap<String, f64> = method_names.iter().cloned().zip(acc[..nm].iter().copied()).collect();
        if set.group {
            let best_base = acc[nm..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            group_reports.push(GroupReport {
                name: set.name.clone(),
                best_base,
                accuracy: accuracy.clone(),
            });
        }
        test_sets.push(TestSetReport {
            name: set.name.clone(),
            size: set.rows.len(),
            accuracy,
        });
    }

    let mut summary = BTreeMap::new();
    for name in &method_names {
        let averaged: Vec<f64> = sets
            .iter()
            .zip(&test_sets)
            .filter(|(s, _)| config.groups_in_average || !s.group)
            .map(|(_, t)| t.accuracy[name])
            .collect();
        let avg_acc = if averaged.is_empty() {
            f64::NAN
        } else {
            averaged.iter().sum::<f64>() / averaged.len() as f64
        };
        let method: Vec<f64> = group_reports.iter().map(|g| g.accuracy[name]).collect();
        let best: Vec<f64> = group_reports.iter().map(|g| g.best_base).collect();
        let avg_regret = if method.is_empty() {
            f64::NAN
        } else {
            average_regret(&method, &best)?
        };
        summary.insert(name.clone(), MethodSummary { avg_acc, avg_regret });
    }
    Ok(EvalReport {
        test_sets,
        groups: group_reports,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub points_per_cluster: usize,
    pub avg_acc: f64,
    pub avg_regret: f64,
}

/// Cluster-mode suite for each cluster size; returns the per-size reports and the summary rows.
pub fn ablate(
    dataset: &ValidatedDataset,
    profile: &CalibrationProfile,
    config: &SuiteConfig,
    sizes: &[usize],
) -> Result<(Vec<EvalReport>, Vec<AblationRow>)> {
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for &n in sizes {
        let cfg = SuiteConfig {
            methods: vec![SelectionMode::Cluster],
            points_per_cluster: n,
            ..config.clone()
        };
        let report = run_suite(dataset, profile, &cfg)?;
        let s = report.summary[&SelectionMode::Cluster.to_string()];
        rows.push(AblationRow {
            points_per_cluster: n,
            avg_acc: s.avg_acc,
            avg_regret: s.avg_regret,
        });
        reports.push(report);
    }
    Ok((reports, rows))
}

pub fn ablation_table_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("N,avg_acc,avg_regret\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.points_per_cluster, r.avg_acc, r.avg_regret));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabelVector, LogitMatrix, NamedLogits};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pools(maj: usize, min: usize) -> GroupVector {
        let mut z = vec![0; maj];
        z.extend(vec![1; min]);
        GroupVector::new(z, vec![true, false]).unwrap()
    }

    #[test]
    fn mixture_count_examples() {
        assert_eq!(mixture_counts(100, 100, 50).unwrap(), (100, 100));
        assert_eq!(mixture_counts(100, 100, 70).unwrap(), (99, 43));
        assert_eq!(mixture_counts(100, 100, 100).unwrap(), (100, 0));
        assert_eq!(mixture_counts(100, 100, 0).unwrap(), (0, 100));
        assert!(mixture_counts(0, 100, 50).is_err());
        assert!(mixture_counts(100, 0, 90).is_err());
        assert_eq!(mixture_counts(100, 0, 100).unwrap(), (100, 0));
        assert!(mixture_counts(1, 1, 101).is_err());
    }

    #[test]
    fn mixture_membership() {
        let g = pools(100, 100);
        let idx = build_mixture(&g, 70, 9).unwrap();
        assert_eq!(idx.len(), 142);
        assert_eq!(idx.iter().filter(|&&i| i < 100).count(), 99);
        assert_eq!(build_mixture(&g, 100, 9).unwrap(), (0..100).collect::<Vec<_>>());
        assert_eq!(idx, build_mixture(&g, 70, 9).unwrap());
    }

    #[test]
    fn score_examples() {
        let y = vec![0, 1, 1, 0];
        let all = [0, 1, 2, 3];
        assert_eq!(score(&y, &y, &all).unwrap(), 1.0);
        let flipped: Vec<usize> = y.iter().map(|v| 1 - v).collect();
        assert_eq!(score(&flipped, &y, &all).unwrap(), 0.0);
        assert_eq!(score(&[0, 1, 1, 1], &y, &all).unwrap(), 0.75);
        assert!(score(&y, &y, &[4]).is_err());
    }

    #[test]
    fn regret_examples() {
        assert_abs_diff_eq!(average_regret(&[0.90, 0.80], &[0.92, 0.85]).unwrap(), -0.035, epsilon = 1e-12);
        assert_eq!(average_regret(&[0.9, 0.8], &[0.9, 0.8]).unwrap(), 0.0);
    }

    fn toy_dataset() -> ValidatedDataset {
        // model a is right on group 0, model b on group 1
        let n = 40;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let groups: Vec<usize> = (0..n).map(|i| usize::from(i >= 30)).collect();
        let row = |good: bool, y: usize, conf: f64| {
            let c = if good { y } else { 1 - y };
            let mut r = vec![0.0, 0.0];
            r[c] = conf;
            r
        };
        let a: Vec<Vec<f64>> = (0..n).map(|i| row(groups[i] == 0, labels[i], 3.0)).collect();
        let b: Vec<Vec<f64>> = (0..n).map(|i| row(groups[i] == 1, labels[i], 1.0 + (i % 3) as f64)).collect();
        ValidatedDataset {
            split: "test".into(),
            classes: 2,
            models: vec![
                NamedLogits { name: "a".into(), logits: LogitMatrix::from_rows(&a).unwrap() },
                NamedLogits { name: "b".into(), logits: LogitMatrix::from_rows(&b).unwrap() },
            ],
            embeddings: None,
            labels: Some(LabelVector::new(labels, 2).unwrap()),
            groups: Some(
                GroupVector::with_names(groups, vec![true, false], vec!["maj".into(), "min".into()]).unwrap(),
            ),
            heads: None,
        }
    }

    #[test]
    fn suite_structure_and_averages() {
        let ds = toy_dataset();
        let profile = CalibrationProfile::uncalibrated(["a", "b"]);
        let cfg = SuiteConfig {
            methods: vec![
                SelectionMode::Cluster,
                SelectionMode::InputDep,
                SelectionMode::Single(0),
                SelectionMode::Single(1),
            ],
            points_per_cluster: 5,
            seed: 4,
            ..SuiteConfig::default()
        };
        let r = run_suite(&ds, &profile, &cfg).unwrap();
        assert_eq!(r.test_sets.len(), 9);
        assert_eq!(r.groups.len(), 2);
        assert_eq!(r.test_sets[7].name, "group=maj");
        for (name, s) in &r.summary {
            let mean = r.test_sets.iter().map(|t| t.accuracy[name]).sum::<f64>() / 9.0;
            assert!((mean - s.avg_acc).abs() <= 1e-12);
            let reg = r.groups.iter().map(|g| g.accuracy[name] - g.best_base).sum::<f64>() / 2.0;
            assert!((reg - s.avg_regret).abs() <= 1e-12);
        }
        assert_eq!(r.groups[0].best_base, 1.0);
        assert!(r.summary["a"].avg_regret < 0.0);
        assert!(r.summary["b"].avg_regret < 0.0);
        assert_eq!(r.to_json().unwrap(), run_suite(&ds, &profile, &cfg).unwrap().to_json().unwrap());

        let single = SuiteConfig {
            methods: vec![SelectionMode::InputDep],
            mixtures: vec![50],
            ..cfg
        };
        let r = run_suite(&ds, &profile, &single).unwrap();
        assert_eq!(r.test_sets[0].accuracy.len(), 1);
    }

    #[test]
    fn ablation_rows() {
        let ds = toy_dataset();
        let profile = CalibrationProfile::uncalibrated(["a", "b"]);
        let (reports, rows) = ablate(&ds, &profile, &SuiteConfig::default(), &[1, 5]).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(rows[0].points_per_cluster, 1);
        assert!(ablation_table_csv(&rows).starts_with("N,avg_acc,avg_regret\n1,"));
    }

    proptest! {
        #[test]
        fn mixture_rule_invariants(maj in 1usize..400, min in 1usize..400, m in 0u32..=100, seed in any::<u64>()) {
            let (a, b) = mixture_counts(maj, min, m).unwrap();
            let n = a + b;
            prop_assert!(a <= maj && b <= min && n >= 1);
            prop_assert!((a as f64 / n as f64 - f64::from(m) / 100.0).abs() <= 1.0 / (2.0 * n as f64) + 1e-12);
            let g = pools(maj, min);
            let idx = build_mixture(&g, m, seed).unwrap();
            let mut d = idx.clone();
            d.dedup();
            prop_assert_eq!(d.len(), n);
            prop_assert_eq!(idx.iter().filter(|&&i| i < maj).count(), a);
        }

        #[test]
        fn base_regret_non_positive(accs in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 3), 1..5)) {
            let best: Vec<f64> = (0..3).map(|g| accs.iter().map(|a| a[g]).fold(0.0, f64::max)).collect();
            for a in &accs {
                prop_assert!(average_regret(a, &best).unwrap() <= 0.0);
            }
        }
    }
}
