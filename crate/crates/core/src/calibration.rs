//! Temperature scaling by ECE grid search, plus cross-model ECE matching.
//!
//! ECE uses `B` equal-width bins over `[0, 1]`: bin `j` holds top-class
//! confidences in `[j/B, (j+1)/B)`, and the last bin is closed at 1. Multiclass
//! models are calibrated on the top label: a bin's accuracy is the fraction of
//! its samples whose predicted class is correct. Empty bins carry no weight.
//!
//! Every argmin over the grid breaks ties toward the smallest temperature.

use std::fmt;
use std::str::FromStr;

use ndarray::Axis;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::confidence::top_class;
use crate::data::{LabelVector, LogitMatrix, NamedLogits};
use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EceBin {
    pub index: usize,
    pub count: usize,
    /// Fraction of samples in the bin whose top class is correct.
    pub accuracy: f64,
    /// Mean top-class probability in the bin.
    pub confidence: f64,
    /// Fraction of all samples that fall into the bin.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EceBreakdown {
    pub bins: Vec<EceBin>,
    pub total: f64,
}

fn bin_of(confidence: f64, bins: usize) -> usize {
    ((confidence * bins as f64) as usize).min(bins - 1)
}

fn check_pair(logits: &LogitMatrix, labels: &LabelVector) -> Result<()> {
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows but {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn compute_ece(
    logits: &LogitMatrix,
    labels: &LabelVector,
    temperature: f64,
    bins: usize,
) -> Result<EceBreakdown> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    check_pair(logits, labels)?;

    let mut count = vec![0usize; bins];
    let mut correct = vec![0usize; bins];
    let mut conf_sum = vec![0.0f64; bins];
    for (row, &y) in logits.view().axis_iter(Axis(0)).zip(labels.as_slice()) {
        let (p, pred) = top_class(row, temperature);
        let j = bin_of(p, bins);
        count[j] += 1;
        conf_sum[j] += p;
        if pred == y {
            correct[j] += 1;
        }
    }

    let n = logits.rows() as f64;
    let mut total = 0.0;
    let breakdown = (0..bins)
        .map(|j| {
            let (accuracy, confidence, weight) = if count[j] == 0 {
                (0.0, 0.0, 0.0)
            } else {
                let c = count[j] as f64;
                (correct[j] as f64 / c, conf_sum[j] / c, c / n)
            };
            total += weight * (accuracy - confidence).abs();
            EceBin {
                index: j,
                count: count[j],
                accuracy,
                confidence,
                weight,
            }
        })
        .collect();
    Ok(EceBreakdown {
        bins: breakdown,
        total,
    })
}

/// Evenly spaced temperatures `start, start+step, ..., stop`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureGrid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Default for TemperatureGrid {
    fn default() -> Self {
        Self {
            start: 0.25,
            stop: 15.0,
            step: 0.25,
        }
    }
}

impl TemperatureGrid {
    pub fn new(start: f64, stop: f64, step: f64) -> Result<Self> {
        let grid = Self { start, stop, step };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.start > 0.0
            && self.step > 0.0
            && self.stop >= self.start
            && [self.start, self.stop, self.step].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid temperature grid {self}"
            )))
        }
    }

    pub fn len(&self) -> usize {
        ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| self.start + i as f64 * self.step)
            .collect()
    }
}

impl fmt::Display for TemperatureGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.start, self.stop, self.step)
    }
}

impl FromStr for TemperatureGrid {
    type Err = Error;

    /// Parses `start:stop:step`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::InvalidArgument(format!("grid must be start:stop:step, got {s:?}"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let v: Vec<f64> = parts
            .iter()
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        Self::new(v[0], v[1], v[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub alpha: f64,
    pub ece: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureSearch {
    pub alpha_star: f64,
    pub ece_star: f64,
    pub curve: Vec<CurvePoint>,
}

impl TemperatureSearch {
    /// Build from a precomputed curve; the minimum breaks ties toward smaller alpha.
    pub fn from_curve(curve: Vec<CurvePoint>) -> Result<Self> {
        let best = curve
            .iter()
            .fold(None::<&CurvePoint>, |best, p| match best {
                Some(b) if b.ece < p.ece || (b.ece == p.ece && b.alpha <= p.alpha) => Some(b),
                _ => Some(p),
            })
            .ok_or_else(|| Error::InvalidArgument("empty ECE curve".into()))?;
        Ok(Self {
            alpha_star: best.alpha,
            ece_star: best.ece,
            curve,
        })
    }
}

pub fn grid_search_temperature(
    logits: &LogitMatrix,
    labels: &LabelVector,
    grid: &TemperatureGrid,
    bins: usize,
) -> Result<TemperatureSearch> {
    grid.validate()?;
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty calibration set".into()));
    }
    check_pair(logits, labels)?;
    let curve = grid
        .values()
        .into_par_iter()
        .map(|alpha| {
            compute_ece(logits, labels, alpha, bins).map(|e| CurvePoint {
                alpha,
                ece: e.total,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TemperatureSearch::from_curve(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCalibration {
    pub name: String,
    /// Temperature used at test time.
    pub alpha: f64,
    pub alpha_star: f64,
    pub ece_star: f64,
    pub curve: Vec<CurvePoint>,
}

/// Chosen temperatures for every model, serialized as the calibration profile JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    pub target_ece: f64,
    pub models: Vec<ModelCalibration>,
}

impl CalibrationProfile {
    pub fn alpha(&self, name: &str) -> Option<f64> {
        self.models.iter().find(|m| m.name == name).map(|m| m.alpha)
    }

    pub fn alphas_for<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<Vec<f64>> {
        names
            .into_iter()
            .map(|n| {
                self.alpha(n).ok_or_else(|| {
                    Error::InvalidArgument(format!("model {n:?} is missing from the profile"))
                })
            })
            .collect()
    }

    /// Identity temperatures, for running without calibration.
    pub fn uncalibrated<'a>(names: impl IntoIterator<Item = &'a str>) -> Self {
        Self {
            target_ece: 0.0,
            models: names
                .into_iter()
                .map(|n| ModelCalibration {
                    name: n.to_string(),
                    alpha: 1.0,
                    alpha_star: 1.0,
                    ece_star: 0.0,
                    curve: Vec::new(),
                })
                .collect(),
        }
    }
}

/// Take the largest per-model minimum ECE as the target, keep the optimum for the model(s)
/// attaining it, and give every other model the grid temperature whose ECE is closest to the
/// target (smaller alpha on ties).
pub fn match_calibration_targets(searches: &[(String, TemperatureSearch)]) -> CalibrationProfile {
    let target = searches
        .iter()
        .map(|(_, s)| s.ece_star)
        .fold(f64::NEG_INFINITY, f64::max);
    let models = searches
        .iter()
        .map(|(name, s)| {
            let alpha = if s.ece_star == target {
                s.alpha_star
            } else {
                let mut best = &s.curve[0];
                for p in &s.curve[1..] {
                    let d = (p.ece - target).abs();
                    let db = (best.ece - target).abs();
                    if d < db || (d == db && p.alpha < best.alpha) {
                        best = p;
                    }
                }
                best.alpha
            };
            ModelCalibration {
                name: name.clone(),
                alpha,
                alpha_star: s.alpha_star,
                ece_star: s.ece_star,
                curve: s.curve.clone(),
            }
        })
        .collect();
    CalibrationProfile {
        target_ece: if searches.is_empty() { 0.0 } else { target },
        models,
    }
}

/// Grid-search every model on held-out labelled data and match their ECE targets.
pub fn calibrate_models(
    models: &[NamedLogits],
    labels: &LabelVector,
    grid: &TemperatureGrid,
    bins: usize,
) -> Result<CalibrationProfile> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("no models to calibrate".into()));
    }
    let searches = models
        .par_iter()
        .map(|m| {
            grid_search_temperature(&m.logits, labels, grid, bins).map(|s| (m.name.clone(), s))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(match_calibration_targets(&searches))
}
