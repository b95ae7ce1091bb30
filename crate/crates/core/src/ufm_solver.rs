//! Projected gradient descent for the ball-constrained unconstrained features
//! model: minimize the unit-temperature loss over `H` with
//! `||h_i||^2 <= 1/tau` for every column.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{grad_sc, sc_loss};
use crate::model::{tau_threshold, DatasetSpec, Embeddings, Temperature};

/// Upper bound on the warm-started trial step.
const MAX_STEP: f64 = 1e8;
/// Line search gives up below this step.
const MIN_STEP: f64 = 1e-30;
/// Smallest initial column norm, as a fraction of the ball radius.
const INIT_RADIUS_FLOOR: f64 = 1e-3;

pub const WARN_LOW_DIMENSION: &str = "d <= k: landscape guarantees void";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub initial_step: f64,
    pub armijo_c: f64,
    pub backtrack_factor: f64,
    pub grad_tol: f64,
    pub loss_tol: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 50_000,
            initial_step: 1.0,
            armijo_c: 1e-4,
            backtrack_factor: 0.5,
            grad_tol: 1e-7,
            loss_tol: 1e-10,
            seed: 0,
        }
    }
}

impl SolverConfig {
    /// Checks ranges; the error names the offending field.
    pub fn check(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::spec(name, format!("{v} must be positive")))
            }
        };
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::spec(name, format!("{v} not in (0, 1)")))
            }
        };
        if self.max_iters == 0 {
            return Err(Error::spec("max_iters", "must be at least 1"));
        }
        positive("initial_step", self.initial_step)?;
        unit("armijo_c", self.armijo_c)?;
        unit("backtrack_factor", self.backtrack_factor)?;
        positive("grad_tol", self.grad_tol)?;
        positive("loss_tol", self.loss_tol)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub h_final: Embeddings,
    pub loss_final: f64,
    /// Loss at the initial point followed by the loss after each iteration.
    pub loss_trace: Vec<f64>,
    /// Projected-gradient norm aligned with `loss_trace`.
    pub pg_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub projected_grad_norm: f64,
    pub seed: u64,
    pub warnings: Vec<String>,
}

/// Rescales every column onto the ball of radius `1/sqrt(tau)` if it lies
/// outside.
pub fn project_ball_columns(h: &Embeddings, tau: Temperature) -> Embeddings {
    let mut m = h.matrix().clone();
    project_columns_in_place(&mut m, tau.radius());
    Embeddings::new(m).expect("projection keeps entries finite")
}

fn project_columns_in_place(m: &mut DMatrix<f64>, radius: f64) {
    for mut col in m.column_iter_mut() {
        let norm = col.norm();
        if norm > radius {
            col.scale_mut(radius / norm);
        }
    }
}

/// Columns i.i.d. uniform in the ball of radius `1/sqrt(tau)`, with a small
/// radius floor so that no column starts at the origin.
pub fn random_init(d: usize, n: usize, tau: Temperature, seed: u64) -> Embeddings {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = tau.radius();
    let mut m = DMatrix::zeros(d, n);
    for mut col in m.column_iter_mut() {
        let norm = loop {
            for v in col.iter_mut() {
                *v = rng.sample::<f64, _>(StandardNormal);
            }
            let norm = col.norm();
            if norm > 0.0 {
                break norm;
            }
        };
        let u: f64 = rng.random();
        let r = radius * u.powf(1.0 / d as f64).max(INIT_RADIUS_FLOOR);
        col.scale_mut(r / norm);
    }
    Embeddings::new(m).expect("finite init")
}

/// Precondition warnings for a UFM solve.
pub fn ufm_warnings(ds: &DatasetSpec, tau: Temperature, d: usize) -> Vec<String> {
    let mut warnings = Vec::new();
    if d <= ds.k() {
        warnings.push(WARN_LOW_DIMENSION.to_string());
    }
    if let Ok(threshold) = tau_threshold(ds) {
        if tau.value() <= threshold {
            warnings.push(format!(
                "tau = {} <= collapse threshold {threshold:.6}: collapse of local minima not guaranteed",
                tau.value()
            ));
        }
    }
    warnings
}

fn unit() -> Temperature {
    Temperature::new(1.0).expect("unit temperature")
}

fn pg_norm(h: &DMatrix<f64>, grad: &DMatrix<f64>, radius: f64) -> f64 {
    let mut probe = h - grad;
    project_columns_in_place(&mut probe, radius);
    (h - probe).norm()
}

/// Minimizes the unit-temperature loss over `d x n` embeddings with column
/// norms at most `1/sqrt(tau)`, starting from [`random_init`] with
/// `cfg.seed`.
///
/// Each iteration takes a projected gradient step whose length is chosen by
/// Armijo backtracking along the projection arc. The first trial step of an
/// iteration is the previous accepted step divided by the backtracking factor
/// (`cfg.initial_step` on the first iteration). Stops when the relative loss
/// change falls below `loss_tol` and the projected-gradient norm
/// `||H - proj(H - grad)||_F` below `grad_tol`.
pub fn solve_ufm(
    ds: &DatasetSpec,
    tau: Temperature,
    d: usize,
    cfg: &SolverConfig,
) -> Result<SolveResult> {
    ds.ensure_valid()?;
    cfg.check()?;
    if d == 0 {
        return Err(Error::spec("d", "feature dimension must be at least 1"));
    }
    let warnings = ufm_warnings(ds, tau, d);
    let radius = tau.radius();
    let one = unit();

    let mut h = random_init(d, ds.n(), tau, cfg.seed).into_matrix();
    let eval = |m: &DMatrix<f64>| -> Result<f64> { sc_loss(&Embeddings::new(m.clone())?, ds, one) };
    let gradient =
        |m: &DMatrix<f64>| -> Result<DMatrix<f64>> { grad_sc(&Embeddings::new(m.clone())?, ds) };

    let mut loss = eval(&h)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { iteration: 0 });
    }
    let mut grad = gradient(&h)?;
    let mut pg = pg_norm(&h, &grad, radius);
    let mut loss_trace = vec![loss];
    let mut pg_trace = vec![pg];
    let mut step = cfg.initial_step;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        let mut accepted = None;
        let mut trial = step;
        while trial >= MIN_STEP {
            let mut cand = &h - &grad * trial;
            project_columns_in_place(&mut cand, radius);
            let cand_loss = eval(&cand)?;
            if cand_loss.is_nan() {
                return Err(Error::NonFiniteLoss {
                    iteration: iterations + 1,
                });
            }
            let predicted = grad.dot(&(&cand - &h));
            if cand_loss <= loss + cfg.armijo_c * predicted {
                accepted = Some((cand, cand_loss, trial));
                break;
            }
            trial *= cfg.backtrack_factor;
        }
        let Some((cand, cand_loss, used)) = accepted else {
            // no representable decrease left along the projection arc
            converged = pg < cfg.grad_tol;
            break;
        };
        iterations += 1;
        let rel_change = (loss - cand_loss).abs() / loss.abs().max(f64::MIN_POSITIVE);
        h = cand;
        loss = cand_loss;
        grad = gradient(&h)?;
        pg = pg_norm(&h, &grad, radius);
        loss_trace.push(loss);
        pg_trace.push(pg);
        if rel_change < cfg.loss_tol && pg < cfg.grad_tol {
            converged = true;
            break;
        }
        step = (used / cfg.backtrack_factor).min(MAX_STEP);
    }

    Ok(SolveResult {
        h_final: Embeddings::new(h)?,
        loss_final: loss,
        loss_trace,
        pg_trace,
        iterations,
        converged,
        projected_grad_norm: pg,
        seed: cfg.seed,
        warnings,
    })
}

/// Runs [`solve_ufm`] with seeds `cfg.seed, cfg.seed + 1, ...` on the current
/// rayon pool. Results come back in seed order.
pub fn multi_restart(
    ds: &DatasetSpec,
    tau: Temperature,
    d: usize,
    cfg: &SolverConfig,
    num_restarts: usize,
) -> Result<Vec<SolveResult>> {
    if num_restarts == 0 {
        return Err(Error::spec("restarts", "must be at least 1"));
    }
    (0..num_restarts as u64)
        .into_par_iter()
        .map(|r| {
            let cfg = SolverConfig {
                seed: cfg.seed.wrapping_add(r),
                ..cfg.clone()
            };
            solve_ufm(ds, tau, d, &cfg)
        })
        .collect()
}
