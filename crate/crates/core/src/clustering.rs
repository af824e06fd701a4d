//! Seeded K-means over test-time features.
//!
//! Seeding is k-means++ driven by [`crate::rng`]: the first centre is the point
//! at index `floor(u * n)`; each later centre is found by drawing
//! `u * sum(D^2)` and walking the cumulative `D^2` in input order. Lloyd
//! iterations then alternate nearest-centroid assignment (ties to the lowest
//! centroid index) and mean updates until no centroid moves more than the
//! tolerance.
//!
//! Sums are accumulated per fixed-size chunk of rows and combined in chunk
//! order, so results do not depend on the number of worker threads. Cluster
//! ids in the output are renumbered by first occurrence in input order.

use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationProfile;
use crate::data::{EmbeddingMatrix, NamedLogits};
use crate::error::{Error, Result};
use crate::rng::{self, CosmosRng};

const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    /// Each model's logits divided by its temperature, concatenated.
    CalibratedLogits,
    Embeddings,
}

impl FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logits" | "calibrated-logits" => Ok(Self::CalibratedLogits),
            "embeddings" => Ok(Self::Embeddings),
            other => Err(Error::InvalidArgument(format!(
                "unknown feature source {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub points_per_cluster: usize,
    pub features: FeatureSource,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub seed: u64,
    /// Z-score each feature column before clustering.
    pub standardize: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            points_per_cluster: 50,
            features: FeatureSource::CalibratedLogits,
            max_iterations: 300,
            tolerance: 1e-6,
            seed: 0,
            standardize: false,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points_per_cluster == 0 {
            return Err(Error::InvalidArgument("points per cluster must be >= 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max iterations must be >= 1".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::InvalidArgument("tolerance must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub k: usize,
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    pub iterations: usize,
    pub wcss: f64,
    /// WCSS after each Lloyd iteration.
    pub wcss_history: Vec<f64>,
}

impl ClusterAssignment {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }

    /// Every input in its own cluster.
    pub fn singletons(features: ArrayView2<'_, f64>) -> Self {
        let n = features.nrows();
        Self {
            k: n,
            labels: (0..n).collect(),
            centroids: features.to_owned(),
            iterations: 0,
            wcss: 0.0,
            wcss_history: vec![0.0],
        }
    }

    /// CSV export with columns `index,cluster`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,cluster\n");
        for (i, c) in self.labels.iter().enumerate() {
            out.push_str(&format!("{i},{c}\n"));
        }
        out
    }
}

/// `max(1, round(n / N))` with halves rounded up, capped at `n`.
pub fn choose_k(n: usize, points_per_cluster: usize) -> usize {
    let per = points_per_cluster.max(1);
    ((2 * n + per) / (2 * per)).max(1).min(n.max(1))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[f64], d: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(d).enumerate() {
        let dist = sq_dist(point, c);
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best
}

fn ordered_sum(values: &[f64]) -> f64 {
    values
        .par_chunks(CHUNK)
        .map(|c| c.iter().sum::<f64>())
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

/// Row-major points: `x[i * d..(i + 1) * d]` is point `i`.
struct Points<'a> {
    x: &'a [f64],
    d: usize,
}

impl Points<'_> {
    fn n(&self) -> usize {
        self.x.len() / self.d
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }
}

fn kmeans_pp(x: &Points<'_>, k: usize, rng: &mut CosmosRng) -> Vec<f64> {
    let (n, d) = (x.n(), x.d);
    let mut centroids = vec![0.0; k * d];
    let mut chosen = vec![false; n];
    let first = ((rng::uniform(rng) * n as f64) as usize).min(n - 1);
    centroids[..d].copy_from_slice(x.row(first));
    chosen[first] = true;
    let mut d2: Vec<f64> = x.x.par_chunks(d).map(|p| sq_dist(p, &centroids[..d])).collect();

    for c in 1..k {
        let total = ordered_sum(&d2);
        let pick = if total > 0.0 {
            let target = rng::uniform(rng) * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &v) in d2.iter().enumerate() {
                acc += v;
                if acc > target && v > 0.0 {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave the walk one short; fall back to the last positive weight
            pick.unwrap_or_else(|| d2.iter().rposition(|&v| v > 0.0).expect("total > 0"))
        } else {
            // every point coincides with a centre already
            chosen.iter().position(|&c| !c).unwrap_or(0)
        };
        chosen[pick] = true;
        centroids[c * d..(c + 1) * d].copy_from_slice(x.row(pick));
        let newc = &centroids[c * d..(c + 1) * d];
        d2.par_iter_mut()
            .zip(x.x.par_chunks(d))
            .for_each(|(v, p)| *v = v.min(sq_dist(p, newc)));
    }
    centroids
}

fn assign(x: &Points<'_>, centroids: &[f64]) -> (Vec<usize>, Vec<f64>) {
    x.x.par_chunks(x.d).map(|p| nearest(p, centroids, x.d)).unzip()
}

/// Move the points farthest from their centroid into empty clusters.
fn fill_empty(labels: &mut [usize], dists: &mut [f64], k: usize) {
    let mut sizes = vec![0usize; k];
    for &l in labels.iter() {
        sizes[l] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let mut best: Option<usize> = None;
        for i in 0..labels.len() {
            if sizes[labels[i]] < 2 {
                continue;
            }
            if best.is_none_or(|b| dists[i] > dists[b]) {
                best = Some(i);
            }
        }
        let i = best.expect("k <= n leaves a donor cluster");
        sizes[labels[i]] -= 1;
        labels[i] = empty;
        sizes[empty] = 1;
        dists[i] = 0.0;
    }
}

fn update(x: &Points<'_>, labels: &[usize], k: usize) -> Vec<f64> {
    let d = x.d;
    let partials: Vec<(Vec<f64>, Vec<usize>)> = labels
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut sums = vec![0.0; k * d];
            let mut counts = vec![0usize; k];
            for (off, &l) in chunk.iter().enumerate() {
                for (s, v) in sums[l * d..(l + 1) * d].iter_mut().zip(x.row(ci * CHUNK + off)) {
                    *s += v;
                }
                counts[l] += 1;
            }
            (sums, counts)
        })
        .collect();
    let mut sums = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for (s, c) in partials {
        for (a, b) in sums.iter_mut().zip(s) {
            *a += b;
        }
        for (a, b) in counts.iter_mut().zip(c) {
            *a += b;
        }
    }
    for (row, &c) in sums.chunks_exact_mut(d).zip(&counts) {
        debug_assert!(c > 0);
        for v in row {
            *v /= c as f64;
        }
    }
    sums
}

fn cost(x: &Points<'_>, labels: &[usize], centroids: &[f64]) -> f64 {
    let d = x.d;
    let per: Vec<f64> = x
        .x
        .par_chunks(d)
        .zip(labels.par_iter())
        .map(|(p, &l)| sq_dist(p, &centroids[l * d..(l + 1) * d]))
        .collect();
    ordered_sum(&per)
}

fn canonicalize(labels: &mut [usize], centroids: &Array2<f64>, k: usize) -> Array2<f64> {
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    for l in labels.iter_mut() {
        if map[*l] == usize::MAX {
            map[*l] = next;
            next += 1;
        }
        *l = map[*l];
    }
    let mut out = Array2::zeros(centroids.dim());
    for (old, &new) in map.iter().enumerate() {
        out.row_mut(new).assign(&centroids.row(old));
    }
    out
}

pub fn kmeans(features: ArrayView2<'_, f64>, k: usize, config: &ClusterConfig) -> Result<ClusterAssignment> {
    config.validate()?;
    let n = features.nrows();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "cannot form {k} clusters from {n} points"
        )));
    }
    crate::data::matrix::check_finite(features)?;
    if k == n {
        return Ok(ClusterAssignment::singletons(features));
    }

    let standard = features.as_standard_layout();
    let x = Points {
        x: standard.as_slice().expect("standard layout"),
        d: features.ncols(),
    };
    let mut rng = rng::rng_from_seed(config.seed);
    let mut centroids = kmeans_pp(&x, k, &mut rng);
    let mut labels = Vec::new();
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..config.max_iterations {
        iterations += 1;
        let (mut l, mut dist) = assign(&x, &centroids);
        fill_empty(&mut l, &mut dist, k);
        let next = update(&x, &l, k);
        let moved = next
            .chunks_exact(x.d)
            .zip(centroids.chunks_exact(x.d))
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        history.push(cost(&x, &l, &centroids));
        labels = l;
        if moved <= config.tolerance {
            break;
        }
    }
    let centroids = Array2::from_shape_vec((k, x.d), centroids).expect("k x d centroids");
    log::debug!("k-means: k={k}, n={n}, {iterations} iterations");
    let centroids = canonicalize(&mut labels, &centroids, k);
    Ok(ClusterAssignment {
        k,
        wcss: *history.last().expect("at least one iteration"),
        labels,
        centroids,
        iterations,
        wcss_history: history,
    })
}

/// Matrix that K-means runs on: calibrated logits side by side, or the embeddings.
pub fn build_features(
    models: &[NamedLogits],
    profile: &CalibrationProfile,
    embeddings: Option<&EmbeddingMatrix>,
    source: FeatureSource,
) -> Result<Array2<f64>> {
    match source {
        FeatureSource::Embeddings => embeddings
            .map(|e| e.view().to_owned())
            .ok_or_else(|| Error::InvalidArgument("embeddings requested but not provided".into())),
        FeatureSource::CalibratedLogits => {
            let alphas = profile.alphas_for(models.iter().map(|m| m.name.as_str()))?;
            let blocks: Vec<Array2<f64>> = models
                .iter()
                .zip(&alphas)
                .map(|(m, &a)| m.logits.view().mapv(|v| v / a))
                .collect();
            let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
            ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))
        }
    }
}

/// Z-score each column; constant columns are centred only.
pub fn standardize(mut x: Array2<f64>) -> Array2<f64> {
    let n = x.nrows() as f64;
    for mut col in x.axis_iter_mut(Axis(1)) {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        col.mapv_inplace(|v| if sd > 0.0 { (v - mean) / sd } else { v - mean });
    }
    x
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same items");
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let pairs = |m: u64| (m * m.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&m| pairs(m)).sum();
    let rows: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| pairs(table.iter().map(|r| r[j]).sum())).sum();
    let total = pairs(a.len() as u64);
    let expected = rows * cols / total;
    let max = (rows + cols) / 2.0;
    if max == expected {
        1.0
    } else {
        (index - expected) / (max - expected)
    }
}
