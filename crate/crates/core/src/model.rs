//! Domain types shared by the solvers and analyzers: datasets (plain label
//! vectors or STEP-imbalanced class layouts), temperatures, embedding
//! matrices and Gram matrices.
//!
//! Class indices are 0-based in memory. The JSON surface uses 1-based labels
//! and [`DatasetConfig`] converts at the boundary.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when checking that a real-valued count is an integer.
const INTEGRALITY_TOL: f64 = 1e-9;

/// Symmetry tolerance for [`GramMatrix`].
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Labelled samples of the unconstrained features model. Samples carry no
/// inputs, only a class index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSpec {
    k: usize,
    labels: Vec<usize>,
    class_sizes: Vec<usize>,
}

impl DatasetSpec {
    /// Builds a dataset from 0-based labels. Only the range of each label is
    /// checked here; see [`DatasetSpec::validate`] for the model invariants.
    pub fn from_labels(k: usize, labels: Vec<usize>) -> Result<Self> {
        if k == 0 {
            return Err(Error::spec("k", "must be at least 1"));
        }
        let mut class_sizes = vec![0; k];
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::spec(
                    "labels",
                    format!("label {} at position {i} outside [1, {k}]", y + 1),
                ));
            }
            class_sizes[y] += 1;
        }
        Ok(Self {
            k,
            labels,
            class_sizes,
        })
    }

    /// Builds a dataset from 1-based labels, as they appear in I/O.
    pub fn from_one_based(k: usize, labels: &[usize]) -> Result<Self> {
        let mut zero_based = Vec::with_capacity(labels.len());
        for (i, &y) in labels.iter().enumerate() {
            if y == 0 {
                return Err(Error::spec(
                    "labels",
                    format!("label 0 at position {i}; labels are 1-based"),
                ));
            }
            zero_based.push(y - 1);
        }
        Self::from_labels(k, zero_based)
    }

    /// Sorted labels with the given class sizes.
    pub fn from_class_sizes(sizes: &[usize]) -> Result<Self> {
        let labels = sizes
            .iter()
            .enumerate()
            .flat_map(|(c, &m)| std::iter::repeat_n(c, m))
            .collect();
        Self::from_labels(sizes.len(), labels)
    }

    pub fn balanced(k: usize, per_class: usize) -> Result<Self> {
        Self::from_class_sizes(&vec![per_class; k])
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn class_sizes(&self) -> &[usize] {
        &self.class_sizes
    }

    pub fn class_size(&self, c: usize) -> usize {
        self.class_sizes[c]
    }

    pub fn n_max(&self) -> usize {
        self.class_sizes.iter().copied().max().unwrap_or(0)
    }

    pub fn one_based_labels(&self) -> Vec<usize> {
        self.labels.iter().map(|y| y + 1).collect()
    }

    /// Index range of class `c` in the canonical sorted layout.
    pub fn class_range(&self, c: usize) -> std::ops::Range<usize> {
        let start: usize = self.class_sizes[..c].iter().sum();
        start..start + self.class_sizes[c]
    }

    pub fn is_sorted(&self) -> bool {
        self.labels.windows(2).all(|w| w[0] <= w[1])
    }

    pub fn is_balanced(&self) -> bool {
        self.class_sizes.windows(2).all(|w| w[0] == w[1])
    }

    /// Lists every violated invariant; an empty report means the dataset is
    /// usable by the solvers.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        for (c, &m) in self.class_sizes.iter().enumerate() {
            if m == 0 {
                violations.push(format!("class {} is empty", c + 1));
            } else if m < 2 {
                violations.push(format!("class {} has n_c = {m} < 2", c + 1));
            }
        }
        if !self.is_sorted() {
            violations.push("labels not sorted by class".to_string());
        }
        ValidationReport { violations }
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let report = self.validate();
        if report.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidDataset {
                violations: report.violations,
            })
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_valid() {
            write!(f, "valid")
        } else {
            write!(f, "{}", self.violations.join("; "))
        }
    }
}

fn default_n_minor() -> usize {
    10
}

/// `(R, rho)`-STEP imbalance: the first `(1 - rho) k` classes are majority
/// classes of size `R * n_minor`, the remaining `rho k` are minority classes
/// of size `n_minor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepImbalanceSpec {
    pub k: usize,
    #[serde(rename = "R")]
    pub r: f64,
    pub rho: f64,
    #[serde(default = "default_n_minor")]
    pub n_minor: usize,
}

impl StepImbalanceSpec {
    pub fn new(k: usize, r: f64, rho: f64, n_minor: usize) -> Result<Self> {
        let spec = Self { k, r, rho, n_minor };
        spec.check()?;
        Ok(spec)
    }

    /// Checks the invariants, naming the first violated field.
    pub fn check(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::spec("k", "STEP layout needs at least 2 classes"));
        }
        if !(self.r.is_finite() && self.r >= 1.0) {
            return Err(Error::spec(
                "R",
                format!("imbalance ratio {} must be >= 1", self.r),
            ));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::spec(
                "rho",
                format!("minority fraction {} not in (0, 1)", self.rho),
            ));
        }
        let minority = self.rho * self.k as f64;
        if (minority - minority.round()).abs() > INTEGRALITY_TOL {
            return Err(Error::spec(
                "rho",
                format!("rho * k = {minority} is not an integer"),
            ));
        }
        if self.n_minor < 2 {
            return Err(Error::spec("n_minor", format!("{} < 2", self.n_minor)));
        }
        let n_maj = self.r * self.n_minor as f64;
        if (n_maj - n_maj.round()).abs() > INTEGRALITY_TOL {
            return Err(Error::spec(
                "R",
                format!("R * n_minor = {n_maj} is not an integer"),
            ));
        }
        Ok(())
    }

    pub fn minority_classes(&self) -> usize {
        (self.rho * self.k as f64).round() as usize
    }

    pub fn majority_classes(&self) -> usize {
        self.k - self.minority_classes()
    }

    pub fn n_maj(&self) -> usize {
        (self.r * self.n_minor as f64).round() as usize
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.n_maj(); self.majority_classes()];
        sizes.extend(std::iter::repeat_n(self.n_minor, self.minority_classes()));
        sizes
    }
}

/// Expands a STEP spec into a sorted dataset, majority classes first.
pub fn make_step_dataset(spec: &StepImbalanceSpec) -> Result<DatasetSpec> {
    spec.check()?;
    DatasetSpec::from_class_sizes(&spec.class_sizes())
}

/// Temperature above which every local minimizer is collapsed:
/// `2 / log((n - 1) / (n_max - 1))`.
pub fn tau_threshold(ds: &DatasetSpec) -> Result<f64> {
    let n = ds.n();
    let n_max = ds.n_max();
    if n_max >= n {
        return Err(Error::UndefinedThreshold { n });
    }
    if n_max < 2 {
        return Err(Error::InvalidDataset {
            violations: vec![format!("largest class has {n_max} < 2 samples")],
        });
    }
    Ok(2.0 / ((n as f64 - 1.0) / (n_max as f64 - 1.0)).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_finite() && tau > 0.0 {
            Ok(Self(tau))
        } else {
            Err(Error::spec(
                "tau",
                format!("temperature {tau} must be positive"),
            ))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Radius of the feasible ball, `1 / sqrt(tau)`.
    pub fn radius(self) -> f64 {
        self.0.sqrt().recip()
    }

    /// Diagonal cap of the Gram relaxation, `1 / tau`.
    pub fn cap(self) -> f64 {
        self.0.recip()
    }
}

impl fmt::Display for Temperature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// `d x n` embedding matrix; column `i` is the feature vector of sample `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings(DMatrix<f64>);

impl Embeddings {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn zeros(d: usize, n: usize) -> Self {
        Self(DMatrix::zeros(d, n))
    }

    pub fn d(&self) -> usize {
        self.0.nrows()
    }

    pub fn n(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn gram(&self) -> GramMatrix {
        GramMatrix(symmetrize(&self.0.tr_mul(&self.0)))
    }

    pub fn max_sq_norm(&self) -> f64 {
        self.0
            .column_iter()
            .map(|c| c.norm_squared())
            .fold(0.0, f64::max)
    }

    /// `max_i ||h_i||^2 <= 1/tau` within `tol`.
    pub fn is_feasible(&self, tau: Temperature, tol: f64) -> bool {
        self.max_sq_norm() <= tau.cap() + tol
    }
}

/// Symmetric `n x n` matrix, typically `H^T H`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix(DMatrix<f64>);

impl GramMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if !values.is_square() {
            return Err(Error::dims(
                "square matrix",
                format!("{}x{}", values.nrows(), values.ncols()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let asymmetry = max_asymmetry(&values);
        if asymmetry > SYMMETRY_TOL {
            return Err(Error::Asymmetric { asymmetry });
        }
        Ok(Self(values))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub(crate) fn from_raw(values: DMatrix<f64>) -> Self {
        Self(values)
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.0
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_diag(&self) -> f64 {
        self.0
            .diagonal()
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub(crate) fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// JSON form of a dataset: either explicit 1-based labels or a STEP spec.
///
/// `{"k":4,"labels":[1,1,2,2,3,3,4,4]}` or
/// `{"step":{"k":4,"R":5,"rho":0.5,"n_minor":2}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<StepImbalanceSpec>,
}

impl DatasetConfig {
    pub fn from_labels(ds: &DatasetSpec) -> Self {
        Self {
            k: Some(ds.k()),
            labels: Some(ds.one_based_labels()),
            step: None,
        }
    }

    pub fn from_step(spec: StepImbalanceSpec) -> Self {
        Self {
            k: None,
            labels: None,
            step: Some(spec),
        }
    }

    /// Resolves to a dataset. Errors carry the JSON path (relative to the
    /// dataset object) of the offending field.
    pub fn resolve(&self) -> Result<DatasetSpec> {
        match (&self.step, &self.labels) {
            (Some(step), None) => {
                if self.k.is_some() {
                    return Err(config_err("k", "`k` must be given inside `step`"));
                }
                make_step_dataset(step).map_err(|e| match e {
                    Error::InvalidSpec { field, reason } => {
                        config_err(&format!("step.{field}"), &reason)
                    }
                    other => other,
                })
            }
            (None, Some(labels)) => {
                let k = self
                    .k
                    .ok_or_else(|| config_err("k", "required alongside `labels`"))?;
                DatasetSpec::from_one_based(k, labels).map_err(|e| match e {
                    Error::InvalidSpec { field, reason } => config_err(&field, &reason),
                    other => other,
                })
            }
            (Some(_), Some(_)) => Err(config_err("", "give either `labels` or `step`, not both")),
            (None, None) => Err(config_err("", "missing `labels` or `step`")),
        }
    }

    pub fn step_spec(&self) -> Option<StepImbalanceSpec> {
        self.step
    }
}

fn config_err(path: &str, message: &str) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.to_string(),
    }
}
