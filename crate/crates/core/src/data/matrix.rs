use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

pub(crate) fn check_finite(values: ArrayView2<'_, f64>) -> Result<()> {
    for ((row, col), v) in values.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite { row, col });
        }
    }
    Ok(())
}

/// n x C pre-softmax scores from one model on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix(Array2<f64>);

impl LogitMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (n, c) = values.dim();
        if n == 0 {
            return Err(Error::Shape("logit matrix has no rows".into()));
        }
        if c < 2 {
            return Err(Error::Shape(format!(
                "logit matrix needs at least 2 classes, got {c}"
            )));
        }
        check_finite(values.view())?;
        Ok(Self(values))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows_to_array(rows)?)
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn classes(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self(self.0.select(ndarray::Axis(0), rows))
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// n x d test-time representation used for clustering.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(Array2<f64>);

impl EmbeddingMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (n, d) = values.dim();
        if n == 0 || d == 0 {
            return Err(Error::Shape(format!("embedding matrix is {n}x{d}")));
        }
        check_finite(values.view())?;
        Ok(Self(values))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self(self.0.select(ndarray::Axis(0), rows))
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Class labels; only ever read for calibration and scoring.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector(Vec<usize>);

impl LabelVector {
    pub fn new(labels: Vec<usize>, classes: usize) -> Result<Self> {
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {y} at index {i} is out of range for {classes} classes"
            )));
        }
        Ok(Self(labels))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self(rows.iter().map(|&i| self.0[i]).collect())
    }
}

/// Latent subpopulation index per sample, plus which groups count as majority.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupVector {
    groups: Vec<usize>,
    majority: Vec<bool>,
    names: Vec<String>,
}

impl GroupVector {
    pub fn new(groups: Vec<usize>, majority: Vec<bool>) -> Result<Self> {
        let names = (0..majority.len()).map(|g| g.to_string()).collect();
        Self::with_names(groups, majority, names)
    }

    pub fn with_names(groups: Vec<usize>, majority: Vec<bool>, names: Vec<String>) -> Result<Self> {
        let g = majority.len();
        if names.len() != g {
            return Err(Error::Shape(format!(
                "{} group names for {g} groups",
                names.len()
            )));
        }
        if let Some((i, &z)) = groups.iter().enumerate().find(|(_, &z)| z >= g) {
            return Err(Error::InvalidArgument(format!(
                "group {z} at index {i} is out of range for {g} groups"
            )));
        }
        Ok(Self {
            groups,
            majority,
            names,
        })
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn group_count(&self) -> usize {
        self.majority.len()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.groups
    }

    pub fn is_majority(&self, group: usize) -> bool {
        self.majority[group]
    }

    pub fn name(&self, group: usize) -> &str {
        &self.names[group]
    }

    pub fn members(&self, group: usize) -> Vec<usize> {
        (0..self.groups.len())
            .filter(|&i| self.groups[i] == group)
            .collect()
    }

    /// Indices whose group is flagged majority (`true`) or minority (`false`).
    pub fn pool(&self, majority: bool) -> Vec<usize> {
        (0..self.groups.len())
            .filter(|&i| self.majority[self.groups[i]] == majority)
            .collect()
    }

    pub fn has_both_kinds(&self) -> bool {
        self.majority.iter().any(|&m| m) && self.majority.iter().any(|&m| !m)
    }
}

/// Per-class affine scorer `W x + b`; one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearHead {
    /// Split a C x (d+1) matrix whose last column is the bias.
    pub fn from_augmented(m: Array2<f64>) -> Result<Self> {
        let (c, cols) = m.dim();
        if c < 2 || cols < 2 {
            return Err(Error::Shape(format!(
                "linear head must be C x (d+1) with C >= 2, d >= 1; got {c}x{cols}"
            )));
        }
        check_finite(m.view())?;
        let weights = m.slice(ndarray::s![.., ..cols - 1]).to_owned();
        let bias = m.column(cols - 1).to_owned();
        Ok(Self { weights, bias })
    }

    pub fn to_augmented(&self) -> Array2<f64> {
        let (c, d) = self.weights.dim();
        let mut out = Array2::zeros((c, d + 1));
        out.slice_mut(ndarray::s![.., ..d]).assign(&self.weights);
        out.column_mut(d).assign(&self.bias);
        out
    }

    pub fn classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }
}

pub(crate) fn rows_to_array(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != cols) {
        return Err(Error::Shape(format!(
            "row {i} has {} values, expected {cols}",
            r.len()
        )));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), cols), flat).map_err(|e| Error::Shape(e.to_string()))
}

/// Convert an n x 1 matrix of integral values into indices.
pub(crate) fn column_to_indices(m: &Array2<f64>, what: &str) -> Result<Vec<usize>> {
    if m.ncols() != 1 {
        return Err(Error::Shape(format!(
            "{what} file must have one column, got {}",
            m.ncols()
        )));
    }
    m.column(0)
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(Error::InvalidArgument(format!(
                    "{what} value {v} at row {i} is not a non-negative integer"
                )))
            }
        })
        .collect()
}
