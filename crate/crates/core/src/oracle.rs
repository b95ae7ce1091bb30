//! Brute-force global minimum of the collapsed problem over the class-mean
//! Gram `Gamma`, for instances with at most three classes.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::balanced_lp::grid_point;
use crate::error::{Error, Result};
use crate::geometry::ClassMeanGram;
use crate::loss::{check_class_sizes, reduced_loss_unchecked};
use crate::model::{DatasetSpec, Temperature};

pub const ORACLE_MAX_K: usize = 3;
pub const ORACLE_MIN_RESOLUTION: usize = 41;
pub const PSD_TOL: f64 = 1e-10;
// grid endpoints can miss 1/tau by an ulp
const CAP_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Serialize)]
pub struct OracleResult {
    #[serde(serialize_with = "rows")]
    pub gamma_star: ClassMeanGram,
    pub loss_star: f64,
    pub resolution: usize,
    /// Grid spacing times the summed axis slopes of the reduced loss at the
    /// argmin: an estimate of how far the grid optimum can sit above the
    /// true one.
    pub slack: f64,
}

fn rows<S: Serializer>(gamma: &ClassMeanGram, s: S) -> std::result::Result<S::Ok, S::Error> {
    let m = gamma.matrix();
    let nested: Vec<Vec<f64>> = (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect();
    nested.serialize(s)
}

fn feasible(gamma: &DMatrix<f64>, tau: Temperature) -> bool {
    let cap = tau.cap();
    if (0..gamma.nrows()).any(|c| gamma[(c, c)] > cap + CAP_TOL) {
        return false;
    }
    gamma.clone().symmetric_eigen().eigenvalues.min() >= -PSD_TOL
}

/// PSD (to `1e-10`) with diagonal at most `1/tau`. PSD of `Gamma` is
/// equivalent to PSD of its lift because the lifting matrix has full column
/// rank.
pub fn gamma_feasible(gamma: &ClassMeanGram, tau: Temperature) -> bool {
    feasible(gamma.matrix(), tau)
}

fn check_instance(ds: &DatasetSpec, resolution: usize) -> Result<()> {
    ds.ensure_valid()?;
    check_class_sizes(ds)?;
    if ds.k() > ORACLE_MAX_K {
        return Err(Error::InstanceTooLarge { k: ds.k() });
    }
    if resolution < ORACLE_MIN_RESOLUTION {
        return Err(Error::spec(
            "resolution",
            format!("must be >= {ORACLE_MIN_RESOLUTION}, got {resolution}"),
        ));
    }
    Ok(())
}

fn off_diagonal_slots(k: usize) -> Vec<(usize, usize)> {
    (0..k)
        .flat_map(|a| (a + 1..k).map(move |b| (a, b)))
        .collect()
}

fn decode(index: usize, dims: usize, resolution: usize) -> Vec<usize> {
    let mut digits = vec![0; dims];
    let mut rest = index;
    for slot in digits.iter_mut().rev() {
        *slot = rest % resolution;
        rest /= resolution;
    }
    digits
}

/// Builds `Gamma` from grid indices: the first `k` digits are the diagonal,
/// the rest the upper triangle in row order.
fn assemble(
    k: usize,
    diag: &[usize],
    off: &[usize],
    tau: Temperature,
    resolution: usize,
) -> DMatrix<f64> {
    let r = tau.cap();
    let mut m = DMatrix::zeros(k, k);
    for c in 0..k {
        m[(c, c)] = grid_point(r, diag[c], resolution);
    }
    for (&(a, b), &i) in off_diagonal_slots(k).iter().zip(off) {
        let v = grid_point(r, i, resolution);
        m[(a, b)] = v;
        m[(b, a)] = v;
    }
    m
}

/// Minimizes over every grid point; `None` when nothing is feasible.
fn search(
    ds: &DatasetSpec,
    tau: Temperature,
    resolution: usize,
    diag_free: bool,
) -> Option<(f64, Vec<usize>, DMatrix<f64>)> {
    let k = ds.k();
    let sizes = ds.class_sizes();
    let off_dims = k * (k - 1) / 2;
    let dims = off_dims + if diag_free { k } else { 0 };
    let total = resolution.pow(dims as u32);
    (0..total)
        .into_par_iter()
        .filter_map(|idx| {
            let digits = decode(idx, dims, resolution);
            let (diag, off) = if diag_free {
                (digits[..k].to_vec(), &digits[k..])
            } else {
                (vec![resolution - 1; k], &digits[..])
            };
            let gamma = assemble(k, &diag, off, tau, resolution);
            if !feasible(&gamma, tau) {
                return None;
            }
            let loss = reduced_loss_unchecked(&gamma, sizes);
            Some((loss, digits, gamma))
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)))
}

/// Grid argmin of the reduced loss over `Gamma` with entries on
/// `resolution` equally spaced points of `[-1/tau, 1/tau]`.
///
/// The reduced loss is strictly decreasing in each diagonal entry, and
/// raising a diagonal entry to the cap keeps `Gamma` PSD, so every grid
/// point is beaten by the grid point with the same off-diagonal entries and
/// the diagonal at `1/tau` (the top grid value). The search therefore runs
/// over the off-diagonal entries only; the result equals the full
/// exhaustive search.
pub fn grid_search_global(
    ds: &DatasetSpec,
    tau: Temperature,
    resolution: usize,
) -> Result<OracleResult> {
    check_instance(ds, resolution)?;
    let (loss_star, digits, gamma) =
        search(ds, tau, resolution, false).expect("the identity times 1/tau lies on the grid");
    let spacing = 2.0 * tau.cap() / (resolution - 1) as f64;
    let slack = spacing * axis_slope_sum(&gamma, ds.class_sizes(), spacing);
    log::debug!("oracle argmin digits {digits:?}, loss {loss_star}");
    Ok(OracleResult {
        gamma_star: ClassMeanGram::new(gamma)?,
        loss_star,
        resolution,
        slack,
    })
}

/// Sum over the off-diagonal axes of the larger one-sided difference slope
/// of the reduced loss at `gamma`.
fn axis_slope_sum(gamma: &DMatrix<f64>, sizes: &[usize], h: f64) -> f64 {
    let base = reduced_loss_unchecked(gamma, sizes);
    off_diagonal_slots(gamma.nrows())
        .into_iter()
        .map(|(a, b)| {
            let shifted = |delta: f64| {
                let mut m = gamma.clone();
                m[(a, b)] += delta;
                m[(b, a)] += delta;
                reduced_loss_unchecked(&m, sizes)
            };
            let fwd = (shifted(h) - base).abs() / h;
            let bwd = (base - shifted(-h)).abs() / h;
            fwd.max(bwd)
        })
        .sum()
}
