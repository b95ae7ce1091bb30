//! The balanced-case linear program over `(alpha, beta, theta)`, its closed
//! form, a brute-force grid check of that closed form, and the resulting
//! optimal Gram matrix.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{GramMatrix, Temperature};

pub const LP_FEASIBILITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LpSolution {
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
    /// `theta - beta`
    pub objective: f64,
    pub feasible: bool,
}

fn check_kn(k: usize, n: usize) -> Result<usize> {
    if k < 2 {
        return Err(Error::spec(
            "k",
            format!("need at least 2 classes, got {k}"),
        ));
    }
    if n == 0 || !n.is_multiple_of(k) {
        return Err(Error::spec("n", format!("k = {k} must divide n = {n}")));
    }
    Ok(n / k)
}

/// Constraint values; all must be `>= 0` for feasibility.
fn constraints(
    alpha: f64,
    beta: f64,
    theta: f64,
    n: usize,
    m: usize,
    tau: Temperature,
) -> [f64; 4] {
    let (m, n) = (m as f64, n as f64);
    [
        tau.cap() - alpha,
        alpha - beta,
        alpha + beta * (m - 1.0) - theta * m,
        alpha + beta * (m - 1.0) + theta * (n - m),
    ]
}

pub fn lp_feasible(
    alpha: f64,
    beta: f64,
    theta: f64,
    n: usize,
    k: usize,
    tau: Temperature,
) -> Result<bool> {
    let m = check_kn(k, n)?;
    Ok(constraints(alpha, beta, theta, n, m, tau)
        .iter()
        .all(|&c| c >= -LP_FEASIBILITY_TOL))
}

pub fn balanced_lp_solution(k: usize, n: usize, tau: Temperature) -> Result<LpSolution> {
    check_kn(k, n)?;
    let alpha = tau.cap();
    let beta = tau.cap();
    let theta = -tau.cap() / (k as f64 - 1.0);
    let feasible = lp_feasible(alpha, beta, theta, n, k, tau)?;
    debug_assert!(feasible);
    Ok(LpSolution {
        alpha,
        beta,
        theta,
        objective: theta - beta,
        feasible,
    })
}

/// Grid coordinate `i` of `resolution` equally spaced points on `[-r, r]`.
pub(crate) fn grid_point(r: f64, i: usize, resolution: usize) -> f64 {
    -r + 2.0 * r * i as f64 / (resolution - 1) as f64
}

/// Exhaustive search over `[-1/tau, 1/tau]^3`, ties broken by the
/// lexicographically smallest `(alpha, beta, theta)` index.
pub fn lp_grid_oracle(
    k: usize,
    n: usize,
    tau: Temperature,
    resolution: usize,
) -> Result<LpSolution> {
    let m = check_kn(k, n)?;
    if resolution < 50 {
        return Err(Error::spec(
            "resolution",
            format!("must be >= 50, got {resolution}"),
        ));
    }
    let r = tau.cap();
    let best = (0..resolution)
        .into_par_iter()
        .filter_map(|ia| {
            let alpha = grid_point(r, ia, resolution);
            let mut best: Option<(f64, [usize; 3])> = None;
            for ib in 0..resolution {
                let beta = grid_point(r, ib, resolution);
                for it in 0..resolution {
                    let theta = grid_point(r, it, resolution);
                    let feasible = constraints(alpha, beta, theta, n, m, tau)
                        .iter()
                        .all(|&c| c >= -LP_FEASIBILITY_TOL);
                    if !feasible {
                        continue;
                    }
                    let obj = theta - beta;
                    if best.is_none_or(|(b, _)| obj < b) {
                        best = Some((obj, [ia, ib, it]));
                    }
                }
            }
            best
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (objective, [ia, ib, it]) = best.expect("origin is always feasible");
    Ok(LpSolution {
        alpha: grid_point(r, ia, resolution),
        beta: grid_point(r, ib, resolution),
        theta: grid_point(r, it, resolution),
        objective,
        feasible: true,
    })
}

/// Closed-form optimal Gram for `k` balanced classes of `n / k` samples
/// each, labels sorted by class.
pub fn balanced_gram(k: usize, n: usize, tau: Temperature) -> Result<GramMatrix> {
    let m = check_kn(k, n)?;
    let sol = balanced_lp_solution(k, n, tau)?;
    let g = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            sol.alpha
        } else if i / m == j / m {
            sol.beta
        } else {
            sol.theta
        }
    });
    GramMatrix::new(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{balanced_fit, block_fit, class_means, etf_residual, gamma_from_gram};
    use crate::gram_solver::factorize;
    use crate::model::{DatasetSpec, StepImbalanceSpec};

    fn tau(t: f64) -> Temperature {
        Temperature::new(t).unwrap()
    }

    #[test]
    fn closed_form_values() {
        let s = balanced_lp_solution(4, 40, tau(2.0)).unwrap();
        assert_eq!((s.alpha, s.beta), (0.5, 0.5));
        assert!((s.theta + 1.0 / 6.0).abs() < 1e-15);
        assert!((s.objective + 2.0 / 3.0).abs() < 1e-15);
        assert!(s.feasible);

        let s = balanced_lp_solution(2, 4, tau(1.0)).unwrap();
        assert_eq!(
            (s.alpha, s.beta, s.theta, s.objective),
            (1.0, 1.0, -1.0, -2.0)
        );
    }

    #[test]
    fn feasibility_examples() {
        let t = tau(2.0);
        assert!(lp_feasible(0.5, 0.5, -1.0 / 6.0, 40, 4, t).unwrap());
        let c = constraints(0.5, 0.5, -1.0 / 6.0, 40, 10, t);
        assert!(c[0].abs() < 1e-15 && c[1].abs() < 1e-15 && c[3].abs() < 1e-12);
        assert!(c[2] > 0.0);
        assert!(lp_feasible(0.0, 0.0, 0.0, 40, 4, t).unwrap());
        assert!(!lp_feasible(1.0, 0.0, 0.0, 40, 4, t).unwrap());
        assert!(lp_feasible(0.5, 0.5, 0.0, 41, 4, t).is_err());
    }

    #[test]
    fn grid_oracle_matches_closed_form() {
        for (k, n, t) in [(4, 40, 2.0), (2, 4, 1.0)] {
            let t = tau(t);
            let cell = 2.0 * t.cap() / 200.0;
            let grid = lp_grid_oracle(k, n, t, 201).unwrap();
            let exact = balanced_lp_solution(k, n, t).unwrap();
            assert!((grid.alpha - exact.alpha).abs() <= cell + 1e-12);
            assert!((grid.beta - exact.beta).abs() <= cell + 1e-12);
            assert!((grid.theta - exact.theta).abs() <= cell + 1e-12);
            assert!(grid.objective >= exact.objective - 2.0 * cell);
        }
        assert!(lp_grid_oracle(2, 4, tau(1.0), 49).is_err());
    }

    #[test]
    fn closed_form_parameters_from_both_fits() {
        let t = tau(2.0);
        let g = balanced_gram(4, 40, t).unwrap();
        let ds = DatasetSpec::balanced(4, 10).unwrap();
        let bf = balanced_fit(&g, &ds, t).unwrap();
        assert_eq!((bf.alpha, bf.beta), (0.5, 0.5));
        assert!((bf.theta + 1.0 / 6.0).abs() < 1e-14);
        assert!(bf.residual < 1e-14);

        // as a STEP layout with R = 1 the class-level parameters are the
        // within-class value and the common cross-class value
        let spec = StepImbalanceSpec::new(4, 1.0, 0.5, 10).unwrap();
        let p = block_fit(&g, &spec, t).unwrap();
        assert_eq!((p.alpha_maj, p.alpha_minor), (0.5, 0.5));
        for v in [p.beta_maj.unwrap(), p.beta_minor.unwrap(), p.theta] {
            assert!((v + 1.0 / 6.0).abs() < 1e-14);
        }
        assert!(p.residual < 1e-14);
    }

    #[test]
    fn balanced_gram_structure() {
        let g = balanced_gram(2, 4, tau(2.0)).unwrap();
        let m = g.matrix();
        assert_eq!(m[(0, 1)], 0.5);
        assert_eq!(m[(0, 2)], -0.5);
        let mut eig: Vec<f64> = m
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        assert!((eig[0] - 2.0).abs() < 1e-12);
        assert!(eig[1..].iter().all(|v| v.abs() < 1e-12));

        for (k, n, t) in [(3, 9, 1.0), (4, 40, 2.0), (5, 10, 0.7)] {
            let t = tau(t);
            let g = balanced_gram(k, n, t).unwrap();
            assert!(g.matrix().diagonal().iter().all(|&v| v == t.cap()));
            let eig = g.matrix().clone().symmetric_eigen().eigenvalues;
            assert!(eig.iter().all(|&v| v > -1e-10));
            assert_eq!(eig.iter().filter(|&&v| v > 1e-8).count(), k - 1);

            let ds = DatasetSpec::balanced(k, n / k).unwrap();
            let (gamma, dev) = gamma_from_gram(&g, &ds).unwrap();
            assert!(dev < 1e-15);
            let off = -t.cap() / (k as f64 - 1.0);
            assert!((gamma.matrix()[(0, 1)] - off).abs() < 1e-15);
            let h = factorize(&g, k).unwrap();
            let fit = etf_residual(&class_means(&h, &ds).unwrap(), t).unwrap();
            assert!(fit.residual < 1e-12);
            let bf = balanced_fit(&g, &ds, t).unwrap();
            assert!(bf.residual < 1e-12);
        }
    }
}
