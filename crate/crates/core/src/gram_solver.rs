//! Projected gradient on the convex Gram relaxation
//! `min L_cvx(G)  s.t.  G PSD, G_ii <= 1/tau`, with projections onto the
//! feasible set computed by Dykstra's alternating projections, and recovery
//! of embeddings from a Gram matrix.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss::{cvx_loss_raw, grad_cvx_raw};
use crate::model::{max_asymmetry, symmetrize, DatasetSpec, Embeddings, GramMatrix, Temperature};
use crate::ufm_solver::SolverConfig;

pub const DYKSTRA_TOL: f64 = 1e-9;
pub const DYKSTRA_MAX_ROUNDS: usize = 1000;
/// Eigenvalues above `-EIG_ZERO_TOL` count as zero.
pub const EIG_ZERO_TOL: f64 = 1e-10;
/// Eigenvalues above this count towards the rank in [`factorize`].
pub const RANK_TOL: f64 = 1e-6;

const MAX_STEP: f64 = 1e4;
const MIN_STEP: f64 = 1e-30;

#[derive(Debug, Clone)]
pub struct GramResult {
    pub g_final: GramMatrix,
    pub loss_final: f64,
    pub loss_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub min_eigenvalue: f64,
    pub max_diag: f64,
    pub projected_grad_norm: f64,
}

/// JSON summary of a [`GramResult`].
#[derive(Debug, Clone, Serialize)]
pub struct GramSummary {
    pub loss_final: f64,
    pub min_eigenvalue: f64,
    pub max_diag: f64,
    pub iterations: usize,
    pub converged: bool,
    pub projected_grad_norm: f64,
}

impl GramResult {
    pub fn summary(&self) -> GramSummary {
        GramSummary {
            loss_final: self.loss_final,
            min_eigenvalue: self.min_eigenvalue,
            max_diag: self.max_diag,
            iterations: self.iterations,
            converged: self.converged,
            projected_grad_norm: self.projected_grad_norm,
        }
    }
}

fn check_symmetric(s: &DMatrix<f64>) -> Result<()> {
    if !s.is_square() {
        return Err(Error::dims(
            "square matrix",
            format!("{}x{}", s.nrows(), s.ncols()),
        ));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let asymmetry = max_asymmetry(s);
    if asymmetry > crate::loss::GRAD_SYMMETRY_TOL {
        return Err(Error::Asymmetric { asymmetry });
    }
    Ok(())
}

fn psd_part(s: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(s).symmetric_eigen();
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let u = &eig.eigenvectors;
    let mut scaled = u.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col.scale_mut(clamped[j]);
    }
    symmetrize(&(scaled * u.transpose()))
}

/// Frobenius-nearest PSD matrix: negative eigenvalues clamped to zero.
pub fn project_psd(s: &DMatrix<f64>) -> Result<GramMatrix> {
    check_symmetric(s)?;
    Ok(GramMatrix::from_raw(psd_part(s)))
}

/// Caps the diagonal at `1/tau`; off-diagonal entries are untouched.
pub fn project_diag_cap(s: &DMatrix<f64>, tau: Temperature) -> DMatrix<f64> {
    let mut out = s.clone();
    let cap = tau.cap();
    for i in 0..out.nrows() {
        if out[(i, i)] > cap {
            out[(i, i)] = cap;
        }
    }
    out
}

/// Nearest point (Frobenius) of `{G PSD} ∩ {G_ii <= 1/tau}` to `s`, by
/// Dykstra's alternating projections. The returned matrix is PSD and its
/// diagonal exceeds `1/tau` by at most `tol`.
pub fn dykstra_project(
    s: &DMatrix<f64>,
    tau: Temperature,
    tol: f64,
    max_rounds: usize,
) -> Result<GramMatrix> {
    check_symmetric(s)?;
    let n = s.nrows();
    let cap = tau.cap();
    let mut x = symmetrize(s);
    // corrections for the diagonal-cap set (diagonal only) and the PSD cone
    let mut p = vec![0.0; n];
    let mut q = DMatrix::<f64>::zeros(n, n);
    let mut residual = f64::INFINITY;
    for _ in 0..max_rounds {
        // diagonal cap on x + p
        let mut a = x.clone();
        for i in 0..n {
            let shifted = a[(i, i)] + p[i];
            let capped = shifted.min(cap);
            p[i] = shifted - capped;
            a[(i, i)] = capped;
        }
        let shifted = &a + &q;
        let next = psd_part(&shifted);
        q = shifted - &next;

        let change = (&next - &x).norm();
        let excess = (0..n).map(|i| next[(i, i)] - cap).fold(0.0f64, f64::max);
        x = next;
        residual = change.max(excess);
        if residual <= tol {
            return Ok(GramMatrix::from_raw(x));
        }
    }
    Err(Error::DykstraNonConvergence {
        rounds: max_rounds,
        residual,
    })
}

fn feasible_projection(s: &DMatrix<f64>, tau: Temperature) -> Result<DMatrix<f64>> {
    Ok(dykstra_project(s, tau, DYKSTRA_TOL, DYKSTRA_MAX_ROUNDS)?.into_matrix())
}

/// Minimizes the convex Gram loss from `G = 0` by projected gradient with
/// Armijo backtracking (warm-started trial steps as in the UFM solver).
/// A trial step whose projection does not converge is rejected like one
/// failing the Armijo test. Convexity makes the start and seed immaterial.
pub fn solve_gram(ds: &DatasetSpec, tau: Temperature, cfg: &SolverConfig) -> Result<GramResult> {
    ds.ensure_valid()?;
    cfg.check()?;
    let n = ds.n();
    let mut g = DMatrix::<f64>::zeros(n, n);
    let mut loss = cvx_loss_raw(&g, ds)?;
    let mut grad = symmetrize(&grad_cvx_raw(&g, ds)?);
    let mut loss_trace = vec![loss];
    let mut step = cfg.initial_step;
    let mut iterations = 0;
    let mut converged = false;
    let mut pg = f64::NAN;

    while iterations < cfg.max_iters {
        let mut accepted = None;
        let mut trial = step;
        while trial >= MIN_STEP {
            // far-out trial points can stall Dykstra; a shorter step lands
            // closer to the feasible set
            let cand = match feasible_projection(&(&g - &grad * trial), tau) {
                Ok(c) => c,
                Err(Error::DykstraNonConvergence { residual, .. }) => {
                    log::debug!("step {trial:e}: projection stalled at residual {residual:e}");
                    trial *= cfg.backtrack_factor;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let cand_loss = cvx_loss_raw(&cand, ds)?;
            if cand_loss.is_nan() {
                return Err(Error::NonFiniteLoss {
                    iteration: iterations + 1,
                });
            }
            if cand_loss <= loss + cfg.armijo_c * grad.dot(&(&cand - &g)) {
                accepted = Some((cand, cand_loss, trial));
                break;
            }
            trial *= cfg.backtrack_factor;
        }
        let Some((cand, cand_loss, used)) = accepted else {
            pg = projected_grad_norm(&g, &grad, tau)?;
            converged = pg < cfg.grad_tol;
            break;
        };
        iterations += 1;
        let rel_change = (loss - cand_loss).abs() / loss.abs().max(f64::MIN_POSITIVE);
        g = cand;
        loss = cand_loss;
        grad = symmetrize(&grad_cvx_raw(&g, ds)?);
        loss_trace.push(loss);
        // the projected-gradient norm costs a projection; only check it once
        // the loss has settled
        if rel_change < cfg.loss_tol {
            pg = projected_grad_norm(&g, &grad, tau)?;
            if pg < cfg.grad_tol {
                converged = true;
                break;
            }
        }
        step = (used / cfg.backtrack_factor).min(MAX_STEP);
    }
    if pg.is_nan() {
        pg = projected_grad_norm(&g, &grad, tau)?;
    }

    let g_final = GramMatrix::from_raw(g);
    Ok(GramResult {
        min_eigenvalue: g_final.min_eigenvalue(),
        max_diag: g_final.max_diag(),
        g_final,
        loss_final: loss,
        loss_trace,
        iterations,
        converged,
        projected_grad_norm: pg,
    })
}

fn projected_grad_norm(g: &DMatrix<f64>, grad: &DMatrix<f64>, tau: Temperature) -> Result<f64> {
    let probe = feasible_projection(&(g - grad), tau)?;
    Ok((g - probe).norm())
}

/// `d x n` embeddings with `H^T H = G`, from the top `d` eigenpairs of `G`.
/// Fails when eigenvalue `d + 1` exceeds [`RANK_TOL`].
pub fn factorize(g: &GramMatrix, d: usize) -> Result<Embeddings> {
    let n = g.n();
    let eig = g.matrix().clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    if d < n {
        let next = eig.eigenvalues[order[d]];
        if next > RANK_TOL {
            return Err(Error::RankOverflow {
                d,
                index: d + 1,
                value: next,
            });
        }
    }
    let mut h = DMatrix::zeros(d, n);
    for (row, &idx) in order.iter().take(d).enumerate() {
        let lambda = eig.eigenvalues[idx];
        let scale = if lambda > -EIG_ZERO_TOL {
            lambda.max(0.0).sqrt()
        } else {
            0.0
        };
        let v = eig.eigenvectors.column(idx);
        for j in 0..n {
            h[(row, j)] = scale * v[j];
        }
    }
    Embeddings::new(h)
}
