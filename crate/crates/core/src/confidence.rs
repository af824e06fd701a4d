//! Calibrated softmax confidences and predictive entropy.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::calibration::CalibrationProfile;
use crate::data::{LogitMatrix, NamedLogits};
use crate::error::{Error, Result};

fn check_temperature(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {alpha}"
        )))
    }
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Softmax of `row / alpha` written into `out`, with max subtraction.
pub(crate) fn softmax_into(row: ArrayView1<'_, f64>, alpha: f64, out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        *o = ((v - max) / alpha).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Top-class probability and its class for one row at temperature `alpha`.
pub(crate) fn top_class(row: ArrayView1<'_, f64>, alpha: f64) -> (f64, usize) {
    let label = argmax(row);
    let top = row[label];
    // p_top = 1 / sum_j exp((l_j - l_top) / alpha)
    let denom: f64 = row.iter().map(|&v| ((v - top) / alpha).exp()).sum();
    (1.0 / denom, label)
}

/// Row-wise softmax of `logits / alpha`.
pub fn calibrated_probabilities(logits: ArrayView2<'_, f64>, alpha: f64) -> Result<Array2<f64>> {
    check_temperature(alpha)?;
    let mut out = Array2::zeros(logits.dim());
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(logits.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut o, row)| {
            softmax_into(row, alpha, o.as_slice_mut().expect("row-major output"));
        });
    Ok(out)
}

/// Per-input, per-model confidence `C(x, f_i)` and predicted label.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceTable {
    /// n x K top-class calibrated probabilities.
    pub confidence: Array2<f64>,
    /// n x K argmax labels.
    pub predicted: Array2<usize>,
    pub model_names: Vec<String>,
}

impl ConfidenceTable {
    pub fn rows(&self) -> usize {
        self.confidence.nrows()
    }

    pub fn models(&self) -> usize {
        self.confidence.ncols()
    }

    /// Build directly from per-model temperatures.
    pub fn from_temperatures(logits: &[&LogitMatrix], alphas: &[f64]) -> Result<Self> {
        if logits.len() != alphas.len() || logits.is_empty() {
            return Err(Error::Shape(format!(
                "{} models but {} temperatures",
                logits.len(),
                alphas.len()
            )));
        }
        for &a in alphas {
            check_temperature(a)?;
        }
        let n = logits[0].rows();
        if let Some(bad) = logits.iter().find(|l| l.rows() != n) {
            return Err(Error::Shape(format!(
                "models disagree on row count: {n} vs {}",
                bad.rows()
            )));
        }
        let k = logits.len();
        let mut confidence = Array2::zeros((n, k));
        let mut predicted = Array2::zeros((n, k));
        for (i, (l, &alpha)) in logits.iter().zip(alphas).enumerate() {
            let cols: Vec<(f64, usize)> = l
                .view()
                .axis_iter(Axis(0))
                .into_par_iter()
                .map(|row| top_class(row, alpha))
                .collect();
            for (x, (c, y)) in cols.into_iter().enumerate() {
                confidence[[x, i]] = c;
                predicted[[x, i]] = y;
            }
        }
        Ok(Self {
            confidence,
            predicted,
            model_names: (0..k).map(|i| format!("model{i}")).collect(),
        })
    }
}

/// Confidence table for the named models using each model's temperature from `profile`.
pub fn confidence_table(models: &[NamedLogits], profile: &CalibrationProfile) -> Result<ConfidenceTable> {
    let alphas = profile.alphas_for(models.iter().map(|m| m.name.as_str()))?;
    let logits: Vec<&LogitMatrix> = models.iter().map(|m| &m.logits).collect();
    let mut table = ConfidenceTable::from_temperatures(&logits, &alphas)?;
    table.model_names = models.iter().map(|m| m.name.clone()).collect();
    Ok(table)
}

/// Shannon entropy in nats with `0 log 0 = 0`.
pub fn predictive_entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn lm(rows: &[Vec<f64>]) -> LogitMatrix {
        LogitMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_closed_form() {
        let e = std::f64::consts::E;
        let p = calibrated_probabilities(array![[2.0, 0.0]].view(), 2.0).unwrap();
        assert_abs_diff_eq!(p[[0, 0]], e / (e + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(p[[0, 1]], 1.0 / (e + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(p[[0, 0]], 0.7311, epsilon = 1e-4);
    }

    #[test]
    fn softmax_uniform_and_overflow() {
        let p = calibrated_probabilities(array![[5.0, 5.0, 5.0]].view(), 0.3).unwrap();
        for v in p.iter() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let p = calibrated_probabilities(array![[1000.0, 0.0]].view(), 1.0).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(p[[0, 0]], 1.0, epsilon = 1e-15);
        assert!(calibrated_probabilities(array![[1.0, 0.0]].view(), 0.0).is_err());
        assert!(calibrated_probabilities(array![[1.0, 0.0]].view(), -1.0).is_err());
    }

    #[test]
    fn tie_goes_to_class_zero() {
        let t = ConfidenceTable::from_temperatures(&[&lm(&[vec![0.0, 0.0]])], &[1.0]).unwrap();
        assert_eq!(t.confidence[[0, 0]], 0.5);
        assert_eq!(t.predicted[[0, 0]], 0);
    }

    #[test]
    fn two_model_table() {
        let a = lm(&[vec![3.0, 0.0]]);
        let b = lm(&[vec![0.0, 1.0]]);
        let t = ConfidenceTable::from_temperatures(&[&a, &b], &[1.0, 1.0]).unwrap();
        // 1/(1+e^-3) and 1/(1+e^-1)
        assert_abs_diff_eq!(t.confidence[[0, 0]], 1.0 / (1.0 + (-3f64).exp()), epsilon = 1e-15);
        assert_abs_diff_eq!(t.confidence[[0, 0]], 0.9526, epsilon = 1e-4);
        assert_abs_diff_eq!(t.confidence[[0, 1]], 0.7311, epsilon = 1e-4);
        assert_eq!(t.predicted.row(0).to_vec(), vec![0, 1]);
    }

    #[test]
    fn huge_temperature_flattens() {
        let a = lm(&[vec![3.0, -2.0, 0.5], vec![10.0, 0.0, 0.0]]);
        let t = ConfidenceTable::from_temperatures(&[&a], &[1e6]).unwrap();
        for c in t.confidence.iter() {
            assert_abs_diff_eq!(*c, 1.0 / 3.0, epsilon = 1e-3);
        }
    }

    #[test]
    fn entropy_values() {
        assert_eq!(predictive_entropy(&[1.0, 0.0]), 0.0);
        assert_abs_diff_eq!(predictive_entropy(&[0.5, 0.5]), 2f64.ln(), epsilon = 1e-15);
        // -(0.7311 ln 0.7311 + 0.2689 ln 0.2689)
        let h = predictive_entropy(&[0.7311, 0.2689]);
        let oracle = -(0.7311f64 * 0.7311f64.ln() + 0.2689f64 * 0.2689f64.ln());
        assert_abs_diff_eq!(h, oracle, epsilon = 1e-15);
        assert_abs_diff_eq!(h, 0.5822, epsilon = 1e-4);
    }

    proptest! {
        #[test]
        fn shift_invariance(row in proptest::collection::vec(-20.0f64..20.0, 2..6), shift in -50.0f64..50.0, alpha in 0.1f64..10.0) {
            let a = Array2::from_shape_vec((1, row.len()), row.clone()).unwrap();
            let b = a.mapv(|v| v + shift);
            let pa = calibrated_probabilities(a.view(), alpha).unwrap();
            let pb = calibrated_probabilities(b.view(), alpha).unwrap();
            for (x, y) in pa.iter().zip(pb.iter()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            prop_assert!((pa.sum() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn confidence_bounds_and_temperature_monotone(
            row in proptest::collection::vec(-20.0f64..20.0, 2..6),
            a1 in 0.05f64..20.0,
            bump in 0.0f64..20.0,
        ) {
            let c = row.len() as f64;
            let r = ndarray::Array1::from(row);
            let (p1, _) = top_class(r.view(), a1);
            let (p2, _) = top_class(r.view(), a1 + bump);
            prop_assert!(p1 >= 1.0 / c - 1e-12 && p1 <= 1.0 + 1e-12);
            prop_assert!(p2 <= p1 + 1e-12);
        }

        #[test]
        fn binary_confidence_and_entropy_rank_agree(
            logits in proptest::collection::vec(-8.0f64..8.0, 2..8),
        ) {
            // one input, K binary models with logits [0, l_i]
            let ms: Vec<LogitMatrix> = logits.iter().map(|&l| lm(&[vec![0.0, l]])).collect();
            let refs: Vec<&LogitMatrix> = ms.iter().collect();
            let t = ConfidenceTable::from_temperatures(&refs, &vec![1.0; ms.len()]).unwrap();
            let conf = t.confidence.row(0);
            let ent: Vec<f64> = ms.iter().map(|m| {
                let p = calibrated_probabilities(m.view(), 1.0).unwrap();
                predictive_entropy(p.row(0).as_slice().unwrap())
            }).collect();
            let best_conf = argmax(conf);
            let min_ent = ent.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert!((ent[best_conf] - min_ent).abs() <= 1e-12);
        }
    }
}
