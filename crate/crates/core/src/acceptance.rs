//! Desk-scale acceptance experiments. Each criterion runs one experiment and
//! reports PASS/FAIL with the measured quantities; runtime budgets are part
//! of the pass condition.

use std::fmt;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::balanced_lp::{balanced_lp_solution, lp_grid_oracle};
use crate::cli::landscape;
use crate::error::{Error, Result};
use crate::geometry::{
    balanced_fit, block_fit, class_means, etf_residual, gram_distance, nc_residual,
    procrustes_align,
};
use crate::gram_solver::solve_gram;
use crate::io::ExperimentConfig;
use crate::loss::{cvx_loss_raw, grad_cvx, grad_sc, sc_loss};
use crate::model::{
    make_step_dataset, DatasetConfig, DatasetSpec, Embeddings, GramMatrix, StepImbalanceSpec,
    Temperature,
};
use crate::numdiff::{central_gradient, max_relative_error, DEFAULT_STEP};
use crate::oracle::grid_search_global;
use crate::ufm_solver::{multi_restart, solve_ufm, SolverConfig};

pub const GRADIENT_TOL: f64 = 1e-6;
pub const IDENTITY_TOL: f64 = 1e-12;
pub const NC_TOL: f64 = 1e-3;
pub const LOSS_SPREAD_TOL: f64 = 1e-6;
pub const UNIQUENESS_TOL: f64 = 1e-3;
pub const TIGHTNESS_TOL: f64 = 1e-4;
pub const ETF_TOL: f64 = 1e-3;
pub const BLOCK_TOL: f64 = 1e-3;
pub const NON_ETF_MIN: f64 = 1e-2;
pub const ORACLE_MARGIN: f64 = 5e-3;
pub const SYMMETRY_TOL: f64 = 1e-3;

const RESTARTS: usize = 20;
const ORACLE_RESOLUTION: usize = 201;

pub const CRITERIA: [(usize, &str); 12] = [
    (1, "gradients"),
    (2, "invariance"),
    (3, "nc-collapse"),
    (4, "benign-landscape"),
    (5, "uniqueness"),
    (6, "tightness"),
    (7, "balanced-etf"),
    (8, "non-etf"),
    (9, "oracle-sandwich"),
    (10, "lp-closed-form"),
    (11, "class-symmetry"),
    (12, "determinism"),
];

#[derive(Debug, Clone)]
pub struct CriterionReport {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for CriterionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} [{:>2}] {}: {} ({:.2} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

/// Criterion ids selected by `suite`: `all`, a criterion name or its number.
pub fn select(suite: &str) -> Result<Vec<usize>> {
    if suite == "all" {
        return Ok(CRITERIA.iter().map(|&(id, _)| id).collect());
    }
    CRITERIA
        .iter()
        .find(|&&(id, name)| name == suite || id.to_string() == suite)
        .map(|&(id, _)| vec![id])
        .ok_or_else(|| Error::Config {
            path: "suite".to_string(),
            message: format!(
                "unknown suite `{suite}`; expected `all`, 1-12 or one of: {}",
                CRITERIA.map(|(_, n)| n).join(", ")
            ),
        })
}

pub fn run_suite(suite: &str) -> Result<Vec<CriterionReport>> {
    select(suite)?.into_iter().map(run_criterion).collect()
}

pub fn run_criterion(id: usize) -> Result<CriterionReport> {
    let name = CRITERIA
        .iter()
        .find(|&&(i, _)| i == id)
        .map(|&(_, n)| n)
        .ok_or_else(|| Error::spec("criterion", format!("no criterion {id}")))?;
    let start = Instant::now();
    let (passed, detail) = match id {
        1 => gradients()?,
        2 => invariance()?,
        3 => nc_collapse()?,
        4 => benign_landscape()?,
        5 => uniqueness()?,
        6 => tightness()?,
        7 => balanced_etf()?,
        8 => non_etf()?,
        9 => oracle_sandwich()?,
        10 => lp_closed_form()?,
        11 => class_symmetry()?,
        _ => determinism()?,
    };
    let elapsed = start.elapsed();
    let budget = budget(id);
    let in_budget = budget.is_none_or(|b| elapsed <= b);
    let detail = match budget {
        Some(b) if !in_budget => format!("{detail}; over runtime budget {} s", b.as_secs()),
        _ => detail,
    };
    Ok(CriterionReport {
        id,
        name,
        passed: passed && in_budget,
        detail,
        elapsed,
    })
}

fn budget(id: usize) -> Option<Duration> {
    let secs = match id {
        1 | 2 => 1,
        3 | 4 => 30,
        5 => 40,
        6..=8 => 60,
        9 => 120,
        10 => 30,
        _ => return None,
    };
    Some(Duration::from_secs(secs))
}

fn two() -> Temperature {
    Temperature::new(2.0).expect("positive")
}

fn one() -> Temperature {
    Temperature::new(1.0).expect("positive")
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn small_dataset(k: usize) -> Result<DatasetSpec> {
    match k {
        2 => DatasetSpec::from_class_sizes(&[4, 4]),
        _ => DatasetSpec::from_class_sizes(&[3, 3, 2]),
    }
}

fn step_instance() -> Result<(StepImbalanceSpec, DatasetSpec)> {
    let spec = StepImbalanceSpec::new(4, 5.0, 0.5, 4)?;
    let ds = make_step_dataset(&spec)?;
    Ok((spec, ds))
}

fn gradients() -> Result<(bool, String)> {
    let (mut worst_sc, mut worst_cvx) = (0.0f64, 0.0f64);
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = small_dataset(2 + seed as usize % 2)?;
        let h = gaussian(5, 8, &mut rng) * 0.5;
        let analytic = grad_sc(&Embeddings::new(h.clone())?, &ds)?;
        let numeric = central_gradient(
            |x| sc_loss(&Embeddings::new(x.clone()).expect("finite"), &ds, one()).expect("valid"),
            &h,
            DEFAULT_STEP,
        );
        worst_sc = worst_sc.max(max_relative_error(&analytic, &numeric));

        let g = h.tr_mul(&h);
        let analytic = grad_cvx(&GramMatrix::new((&g + g.transpose()) * 0.5)?, &ds)?;
        let numeric = central_gradient(|x| cvx_loss_raw(x, &ds).expect("valid"), &g, DEFAULT_STEP);
        worst_cvx = worst_cvx.max(max_relative_error(&analytic, &numeric));
    }
    let passed = worst_sc < GRADIENT_TOL && worst_cvx < GRADIENT_TOL;
    Ok((
        passed,
        format!(
            "max rel error grad_sc {worst_sc:.2e}, grad_cvx {worst_cvx:.2e} (tol {GRADIENT_TOL:e})"
        ),
    ))
}

fn invariance() -> Result<(bool, String)> {
    let (mut worst_tau, mut worst_rot) = (0.0f64, 0.0f64);
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let ds = small_dataset(2 + seed as usize % 2)?;
        let h = gaussian(5, 8, &mut rng);
        let tau = Temperature::new([0.1, 0.5, 2.0, 7.0][seed as usize % 4])?;
        let scaled = Embeddings::new(&h / tau.value().sqrt())?;
        let direct = sc_loss(&Embeddings::new(h.clone())?, &ds, tau)?;
        worst_tau = worst_tau.max((direct - sc_loss(&scaled, &ds, one())?).abs());

        let q = gaussian(5, 5, &mut rng).qr().q();
        let base = sc_loss(&Embeddings::new(h.clone())?, &ds, one())?;
        let rotated = sc_loss(&Embeddings::new(&q * &h)?, &ds, one())?;
        worst_rot = worst_rot.max((base - rotated).abs());
    }
    Ok((
        worst_tau < IDENTITY_TOL && worst_rot < IDENTITY_TOL,
        format!("max |diff| temperature {worst_tau:.2e}, rotation {worst_rot:.2e} (tol {IDENTITY_TOL:e})"),
    ))
}

struct BalancedRestarts {
    ds: DatasetSpec,
    losses: Vec<f64>,
    hs: Vec<Embeddings>,
    converged: usize,
}

fn balanced_restarts() -> Result<BalancedRestarts> {
    let ds = DatasetSpec::balanced(3, 10)?;
    let results = multi_restart(&ds, two(), 5, &SolverConfig::default(), RESTARTS)?;
    Ok(BalancedRestarts {
        losses: results.iter().map(|r| r.loss_final).collect(),
        converged: results.iter().filter(|r| r.converged).count(),
        hs: results.into_iter().map(|r| r.h_final).collect(),
        ds,
    })
}

fn nc_collapse() -> Result<(bool, String)> {
    let runs = balanced_restarts()?;
    let mut worst = 0.0f64;
    for h in &runs.hs {
        worst = worst.max(nc_residual(h, &runs.ds, two())?);
    }
    Ok((
        runs.converged == RESTARTS && worst < NC_TOL,
        format!(
            "{}/{RESTARTS} converged, max nc_residual {worst:.2e} (tol {NC_TOL:e})",
            runs.converged
        ),
    ))
}

fn benign_landscape() -> Result<(bool, String)> {
    let runs = balanced_restarts()?;
    let min = runs.losses.iter().copied().fold(f64::INFINITY, f64::min);
    let max = runs
        .losses
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let spread = (max - min) / min.abs();
    Ok((
        spread < LOSS_SPREAD_TOL,
        format!("loss range [{min:.12}, {max:.12}], relative spread {spread:.2e} (tol {LOSS_SPREAD_TOL:e})"),
    ))
}

fn uniqueness() -> Result<(bool, String)> {
    let runs = balanced_restarts()?;
    let post = Instant::now();
    let (mut gram_max, mut proc_max) = (0.0f64, 0.0f64);
    for (a, h1) in runs.hs.iter().enumerate() {
        for h2 in &runs.hs[a + 1..] {
            gram_max = gram_max.max(gram_distance(h1, h2, two())?);
            proc_max = proc_max.max(procrustes_align(h1, h2)?.1);
        }
    }
    let post = post.elapsed();
    Ok((
        gram_max < UNIQUENESS_TOL && proc_max < UNIQUENESS_TOL && post < Duration::from_secs(10),
        format!(
            "pairwise max gram_distance {gram_max:.2e}, procrustes {proc_max:.2e} (tol {UNIQUENESS_TOL:e}); post-solve {:.3} s",
            post.as_secs_f64()
        ),
    ))
}

fn tightness() -> Result<(bool, String)> {
    let cfg = SolverConfig::default();
    let (_, step) = step_instance()?;
    let mut parts = Vec::new();
    let mut passed = true;
    for (label, ds, d) in [
        ("balanced k=3", DatasetSpec::balanced(3, 10)?, 5),
        ("STEP k=4", step, 8),
    ] {
        let ufm = solve_ufm(&ds, two(), d, &cfg)?;
        let gram = solve_gram(&ds, two(), &cfg)?;
        let gap = (ufm.loss_final - gram.loss_final).abs();
        passed &= gap < TIGHTNESS_TOL;
        parts.push(format!(
            "{label}: ufm {:.10} gram {:.10} gap {gap:.2e}",
            ufm.loss_final, gram.loss_final
        ));
    }
    Ok((
        passed,
        format!("{} (tol {TIGHTNESS_TOL:e})", parts.join("; ")),
    ))
}

fn balanced_etf() -> Result<(bool, String)> {
    let ds = DatasetSpec::balanced(4, 10)?;
    let r = solve_ufm(&ds, two(), 8, &SolverConfig::default())?;
    let fit = etf_residual(&class_means(&r.h_final, &ds)?, two())?;
    let p = balanced_fit(&r.h_final.gram(), &ds, two())?;
    let exact = balanced_lp_solution(4, 40, two())?;
    let err = (p.alpha - exact.alpha)
        .abs()
        .max((p.beta - exact.beta).abs())
        .max((p.theta - exact.theta).abs());
    Ok((
        fit.residual < ETF_TOL && err < BLOCK_TOL,
        format!(
            "etf_residual {:.2e}; (alpha, beta, theta) = ({:.6}, {:.6}, {:.6}), max error {err:.2e} vs (0.5, 0.5, -1/6)",
            fit.residual, p.alpha, p.beta, p.theta
        ),
    ))
}

fn non_etf() -> Result<(bool, String)> {
    let (spec, ds) = step_instance()?;
    let r = solve_ufm(&ds, two(), 8, &SolverConfig::default())?;
    let fit = etf_residual(&class_means(&r.h_final, &ds)?, two())?;
    let block = block_fit(&r.h_final.gram(), &spec, two())?;
    Ok((
        fit.residual > NON_ETF_MIN && block.residual < BLOCK_TOL,
        format!(
            "etf_residual {:.3e} (need > {NON_ETF_MIN:e}); block residual {:.2e} (tol {BLOCK_TOL:e})",
            fit.residual, block.residual
        ),
    ))
}

fn oracle_sandwich() -> Result<(bool, String)> {
    let cfg = SolverConfig::default();
    let mut passed = true;
    let mut parts = Vec::new();
    for (label, sizes) in [("balanced (2,2)", [2, 2]), ("STEP (6,2)", [6, 2])] {
        let ds = DatasetSpec::from_class_sizes(&sizes)?;
        let oracle = grid_search_global(&ds, two(), ORACLE_RESOLUTION)?;
        let ufm = solve_ufm(&ds, two(), 3, &cfg)?.loss_final;
        let gram = solve_gram(&ds, two(), &cfg)?.loss_final;
        for loss in [ufm, gram] {
            passed &= loss >= oracle.loss_star - oracle.slack
                && loss <= oracle.loss_star + oracle.slack + ORACLE_MARGIN;
        }
        parts.push(format!(
            "{label}: oracle {:.8} (slack {:.1e}), ufm {ufm:.8}, gram {gram:.8}",
            oracle.loss_star, oracle.slack
        ));
    }
    Ok((passed, parts.join("; ")))
}

fn lp_closed_form() -> Result<(bool, String)> {
    let mut worst_cells = 0.0f64;
    for k in [2usize, 3, 4] {
        for t in [1.0, 2.0] {
            let tau = Temperature::new(t)?;
            let cell = 2.0 * tau.cap() / (ORACLE_RESOLUTION - 1) as f64;
            let grid = lp_grid_oracle(k, 10 * k, tau, ORACLE_RESOLUTION)?;
            let exact = balanced_lp_solution(k, 10 * k, tau)?;
            let off = (grid.alpha - exact.alpha)
                .abs()
                .max((grid.beta - exact.beta).abs())
                .max((grid.theta - exact.theta).abs());
            worst_cells = worst_cells.max(off / cell);
        }
    }
    Ok((
        worst_cells <= 1.0 + 1e-9,
        format!(
            "max distance of grid argmin from closed form: {worst_cells:.3} cells (tol 1 cell)"
        ),
    ))
}

fn class_symmetry() -> Result<(bool, String)> {
    let (_, ds) = step_instance()?;
    let g = solve_gram(&ds, two(), &SolverConfig::default())?.g_final;
    let m = g.matrix();
    let k = ds.k();
    let mut worst = 0.0f64;
    for c1 in 0..k {
        for c2 in c1 + 1..k {
            if ds.class_size(c1) != ds.class_size(c2) {
                continue;
            }
            for c3 in (0..k).filter(|&c| c != c1 && c != c2) {
                for l in ds.class_range(c3) {
                    for i in ds.class_range(c1) {
                        for j in ds.class_range(c2) {
                            worst = worst.max((m[(i, l)] - m[(j, l)]).abs());
                        }
                    }
                }
            }
        }
    }
    Ok((
        worst < SYMMETRY_TOL,
        format!("max cross-block disagreement {worst:.2e} (tol {SYMMETRY_TOL:e})"),
    ))
}

fn scratch_dir() -> PathBuf {
    use std::sync::atomic::{AtomicUsize, Ordering};
    static COUNTER: AtomicUsize = AtomicUsize::new(0);
    std::env::temp_dir().join(format!(
        "nc-landscape-acceptance-{}-{}",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ))
}

fn determinism() -> Result<(bool, String)> {
    let ds = DatasetSpec::balanced(3, 4)?;
    let mut cfg = ExperimentConfig::new(DatasetConfig::from_labels(&ds));
    cfg.tau = Some(2.0);
    cfg.d = Some(4);
    cfg.restarts = 6;
    cfg.solver.seed = 11;
    let exp = cfg.resolve()?;
    let root = scratch_dir();
    let result = (|| -> Result<(bool, usize)> {
        let (a, b) = (root.join("run1"), root.join("run2"));
        landscape(&exp, 1, &a)?;
        landscape(&exp, 4, &b)?;
        let ta = std::fs::read(a.join("traces.csv"))?;
        let tb = std::fs::read(b.join("traces.csv"))?;
        let sa = std::fs::read(a.join("summary.json"))?;
        let sb = std::fs::read(b.join("summary.json"))?;
        Ok((ta == tb && sa == sb, ta.len()))
    })();
    let _ = std::fs::remove_dir_all(&root);
    let (same, bytes) = result?;
    Ok((
        same,
        format!(
            "two landscape runs (1 and 4 workers): traces.csv ({bytes} bytes) and summary.json {}",
            if same { "identical" } else { "differ" }
        ),
    ))
}
