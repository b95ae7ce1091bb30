//! Supervised contrastive loss on embeddings, its convex form on Gram
//! matrices, the reduced form on class-mean Grams, and analytic gradients.
//!
//! Every loss carries the `1/n` prefactor and so does every gradient, so the
//! gradients are exact derivatives of the returned values.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geometry::ClassMeanGram;
use crate::model::{max_asymmetry, DatasetSpec, Embeddings, GramMatrix, Temperature};

/// Largest asymmetry `grad_cvx` accepts.
pub const GRAD_SYMMETRY_TOL: f64 = 1e-9;

/// Softmax weights `P` and same-class averaging weights `Q`.
///
/// Row `i` of `P` is the softmax of `G[i, l]` over `l != i`; `Q[i, j]` is
/// `1/(n_c - 1)` for distinct samples of the same class `c`. Both have a zero
/// diagonal and rows summing to one.
#[derive(Debug, Clone)]
pub struct PqMatrices {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

pub(crate) fn check_class_sizes(ds: &DatasetSpec) -> Result<()> {
    let violations: Vec<String> = ds
        .class_sizes()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m < 2)
        .map(|(c, &m)| format!("class {} has n_c = {m} < 2", c + 1))
        .collect();
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidDataset { violations })
    }
}

fn check_square(g: &DMatrix<f64>, n: usize) -> Result<()> {
    if g.nrows() != n || g.ncols() != n {
        return Err(Error::dims(
            format!("{n}x{n}"),
            format!("{}x{}", g.nrows(), g.ncols()),
        ));
    }
    Ok(())
}

fn check_embeddings(h: &Embeddings, ds: &DatasetSpec) -> Result<()> {
    if h.n() != ds.n() {
        return Err(Error::dims(
            format!("{} columns", ds.n()),
            format!("{} columns", h.n()),
        ));
    }
    check_class_sizes(ds)
}

/// Log-sum-exp of row `i` of `g` over the off-diagonal entries.
fn row_lse(g: &DMatrix<f64>, i: usize) -> f64 {
    let n = g.ncols();
    let max = (0..n)
        .filter(|&l| l != i)
        .map(|l| g[(i, l)])
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = (0..n)
        .filter(|&l| l != i)
        .map(|l| (g[(i, l)] - max).exp())
        .sum();
    max + sum.ln()
}

/// Unsymmetrized loss on an arbitrary square matrix of logits.
fn loss_hat(g: &DMatrix<f64>, ds: &DatasetSpec) -> f64 {
    let n = ds.n();
    let mut total = 0.0;
    for i in 0..n {
        let c = ds.label(i);
        let same: f64 = ds
            .class_range(c)
            .filter(|&j| j != i)
            .map(|j| g[(i, j)])
            .sum::<f64>()
            / (ds.class_size(c) - 1) as f64;
        total += row_lse(g, i) - same;
    }
    total / n as f64
}

fn loss_hat_general(g: &DMatrix<f64>, ds: &DatasetSpec) -> f64 {
    // class_range assumes sorted labels; fall back to a label scan otherwise
    if !ds.is_sorted() {
        let n = ds.n();
        let mut total = 0.0;
        for i in 0..n {
            let c = ds.label(i);
            let same: f64 = (0..n)
                .filter(|&j| j != i && ds.label(j) == c)
                .map(|j| g[(i, j)])
                .sum::<f64>()
                / (ds.class_size(c) - 1) as f64;
            total += row_lse(g, i) - same;
        }
        total / n as f64
    } else {
        loss_hat(g, ds)
    }
}

pub fn pq_matrices(g: &GramMatrix, ds: &DatasetSpec) -> Result<PqMatrices> {
    check_square(g.matrix(), ds.n())?;
    check_class_sizes(ds)?;
    Ok(pq_raw(g.matrix(), ds))
}

fn pq_raw(g: &DMatrix<f64>, ds: &DatasetSpec) -> PqMatrices {
    let n = ds.n();
    let mut p = DMatrix::zeros(n, n);
    for i in 0..n {
        let max = (0..n)
            .filter(|&l| l != i)
            .map(|l| g[(i, l)])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for l in (0..n).filter(|&l| l != i) {
            let e = (g[(i, l)] - max).exp();
            p[(i, l)] = e;
            sum += e;
        }
        for l in 0..n {
            p[(i, l)] /= sum;
        }
    }
    let mut q = DMatrix::zeros(n, n);
    for i in 0..n {
        let c = ds.label(i);
        let w = 1.0 / (ds.class_size(c) - 1) as f64;
        for j in (0..n).filter(|&j| j != i && ds.label(j) == c) {
            q[(i, j)] = w;
        }
    }
    PqMatrices { p, q }
}

/// Supervised contrastive loss of `h` at temperature `tau`, averaged over
/// samples.
pub fn sc_loss(h: &Embeddings, ds: &DatasetSpec, tau: Temperature) -> Result<f64> {
    check_embeddings(h, ds)?;
    let m = h.matrix();
    let g = m.tr_mul(m) / tau.value();
    Ok(loss_hat_general(&g, ds))
}

/// Gradient of [`sc_loss`] at unit temperature:
/// `(1/n) [H (P + P^T) - 2 H Q]` with `P, Q` built from `H^T H`.
pub fn grad_sc(h: &Embeddings, ds: &DatasetSpec) -> Result<DMatrix<f64>> {
    check_embeddings(h, ds)?;
    let m = h.matrix();
    let g = m.tr_mul(m);
    let PqMatrices { p, q } = pq_raw(&g, ds);
    let weights = (&p + p.transpose()) - q * 2.0;
    Ok(m * weights / ds.n() as f64)
}

/// Gradient of [`sc_loss`] at temperature `tau`, via
/// `L(H; tau) = L(H / sqrt(tau); 1)`.
pub fn grad_sc_tau(h: &Embeddings, ds: &DatasetSpec, tau: Temperature) -> Result<DMatrix<f64>> {
    let scale = tau.radius();
    let scaled = Embeddings::new(h.matrix() * scale)?;
    Ok(grad_sc(&scaled, ds)? * scale)
}

/// Symmetrized convex loss `(L(G) + L(G^T)) / 2` on a Gram matrix.
pub fn cvx_loss(g: &GramMatrix, ds: &DatasetSpec) -> Result<f64> {
    cvx_loss_raw(g.matrix(), ds)
}

/// [`cvx_loss`] on an arbitrary square matrix, symmetric or not.
pub fn cvx_loss_raw(g: &DMatrix<f64>, ds: &DatasetSpec) -> Result<f64> {
    check_square(g, ds.n())?;
    check_class_sizes(ds)?;
    if max_asymmetry(g) == 0.0 {
        return Ok(loss_hat_general(g, ds));
    }
    let gt = g.transpose();
    Ok(0.5 * (loss_hat_general(g, ds) + loss_hat_general(&gt, ds)))
}

/// Gradient of [`cvx_loss`] at a symmetric `G`: `(1/n) [(P + P^T)/2 - Q]`.
pub fn grad_cvx(g: &GramMatrix, ds: &DatasetSpec) -> Result<DMatrix<f64>> {
    grad_cvx_raw(g.matrix(), ds)
}

pub(crate) fn grad_cvx_raw(g: &DMatrix<f64>, ds: &DatasetSpec) -> Result<DMatrix<f64>> {
    check_square(g, ds.n())?;
    check_class_sizes(ds)?;
    let asymmetry = max_asymmetry(g);
    if asymmetry > GRAD_SYMMETRY_TOL {
        return Err(Error::Asymmetric { asymmetry });
    }
    let PqMatrices { p, q } = pq_raw(g, ds);
    Ok(((&p + p.transpose()) * 0.5 - q) / ds.n() as f64)
}

/// Loss of a collapsed configuration as a function of its class-mean Gram:
/// `(1/n) sum_c n_c log((n_c - 1) + sum_{c' != c} n_c' exp(G_cc' - G_cc))`.
pub fn reduced_loss(gamma: &ClassMeanGram, ds: &DatasetSpec) -> Result<f64> {
    let k = ds.k();
    let m = gamma.matrix();
    if m.nrows() != k || m.ncols() != k {
        return Err(Error::dims(
            format!("{k}x{k}"),
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    check_class_sizes(ds)?;
    Ok(reduced_loss_unchecked(m, ds.class_sizes()))
}

/// [`reduced_loss`] without validation, for the grid oracle's inner loop.
pub(crate) fn reduced_loss_unchecked(gamma: &DMatrix<f64>, sizes: &[usize]) -> f64 {
    let k = sizes.len();
    let n: usize = sizes.iter().sum();
    let mut total = 0.0;
    for c in 0..k {
        let diag = gamma[(c, c)];
        // log-sum-exp over log(n_c - 1) and log(n_c') + G_cc' - G_cc
        let own = ((sizes[c] - 1) as f64).ln();
        let mut max = own;
        for c2 in (0..k).filter(|&c2| c2 != c) {
            max = max.max((sizes[c2] as f64).ln() + gamma[(c, c2)] - diag);
        }
        let mut sum = (own - max).exp();
        for c2 in (0..k).filter(|&c2| c2 != c) {
            sum += ((sizes[c2] as f64).ln() + gamma[(c, c2)] - diag - max).exp();
        }
        total += sizes[c] as f64 * (max + sum.ln());
    }
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::lift_gamma;
    use crate::numdiff::{central_gradient, max_relative_error, DEFAULT_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
    }

    fn emb(m: DMatrix<f64>) -> Embeddings {
        Embeddings::new(m).unwrap()
    }

    fn two_by_two() -> DatasetSpec {
        DatasetSpec::balanced(2, 2).unwrap()
    }

    #[test]
    fn pq_uniform_at_zero() {
        let ds = DatasetSpec::from_class_sizes(&[3]).unwrap();
        let pq = pq_matrices(&GramMatrix::zeros(3), &ds).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 0.0 } else { 0.5 };
                assert!((pq.p[(i, j)] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn q_block_diagonal_for_pairs() {
        let pq = pq_matrices(&GramMatrix::zeros(4), &two_by_two()).unwrap();
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[
                0., 1., 0., 0., 1., 0., 0., 0., 0., 0., 0., 1., 0., 0., 1., 0.,
            ],
        );
        assert_eq!(pq.q, expected);
    }

    #[test]
    fn constant_row_gives_uniform_softmax() {
        let ds = DatasetSpec::balanced(2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = gaussian(6, 6, 1.0, &mut rng);
        g = (&g + g.transpose()) * 0.5;
        for j in 0..6 {
            g[(2, j)] = 0.7;
            g[(j, 2)] = 0.7;
        }
        let pq = pq_matrices(&GramMatrix::new(g).unwrap(), &ds).unwrap();
        for j in (0..6).filter(|&j| j != 2) {
            assert!((pq.p[(2, j)] - 0.2).abs() < 1e-15);
        }
        for i in 0..6 {
            assert!((pq.p.row(i).sum() - 1.0).abs() < 1e-14);
            assert!((pq.q.row(i).sum() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn pq_rejects_dimension_mismatch() {
        let err = pq_matrices(&GramMatrix::zeros(3), &two_by_two()).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn zero_embeddings_give_log_n_minus_one() {
        let ds = two_by_two();
        for d in [1, 3, 7] {
            let l = sc_loss(
                &Embeddings::zeros(d, 4),
                &ds,
                Temperature::new(0.3).unwrap(),
            )
            .unwrap();
            assert!((l - 3.0f64.ln()).abs() < 1e-15);
        }
        let l = cvx_loss(&GramMatrix::zeros(4), &ds).unwrap();
        assert!((l - 3.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn sc_loss_rejects_singleton_class() {
        let ds = DatasetSpec::from_class_sizes(&[1, 3]).unwrap();
        let err = sc_loss(
            &Embeddings::zeros(2, 4),
            &ds,
            Temperature::new(1.0).unwrap(),
        );
        assert!(matches!(err, Err(Error::InvalidDataset { .. })));
    }

    #[test]
    fn antipodal_pairs_at_temperature_two() {
        // unit-norm antipodal class embeddings, tau = 2
        let h = DMatrix::from_row_slice(1, 4, &[1.0, 1.0, -1.0, -1.0]);
        let l = sc_loss(&emb(h), &two_by_two(), Temperature::new(2.0).unwrap()).unwrap();
        let expected = (1.0 + 2.0 * (-1.0f64).exp()).ln();
        assert!((l - expected).abs() < 1e-15);
        assert!((l - 0.5514).abs() < 1e-4);
    }

    #[test]
    fn reduced_loss_values() {
        let ds = two_by_two();
        let zero = ClassMeanGram::new(DMatrix::zeros(2, 2)).unwrap();
        assert!((reduced_loss(&zero, &ds).unwrap() - 3.0f64.ln()).abs() < 1e-15);

        let etf =
            ClassMeanGram::new(DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5])).unwrap();
        let expected = (1.0 + 2.0 * (-1.0f64).exp()).ln();
        assert!((reduced_loss(&etf, &ds).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn reduced_loss_matches_lifted_cvx_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ds = DatasetSpec::from_class_sizes(&[3, 2, 4]).unwrap();
        for _ in 0..10 {
            let a = gaussian(3, 3, 0.5, &mut rng);
            let gamma = ClassMeanGram::new((&a + a.transpose()) * 0.5).unwrap();
            let lifted = lift_gamma(&gamma, &ds).unwrap();
            let lhs = reduced_loss(&gamma, &ds).unwrap();
            let rhs = cvx_loss(&lifted, &ds).unwrap();
            assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn grad_sc_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (trial, k) in [2usize, 3].iter().cycle().take(10).enumerate() {
            let ds = if *k == 2 {
                DatasetSpec::balanced(2, 4).unwrap()
            } else {
                DatasetSpec::from_class_sizes(&[3, 3, 2]).unwrap()
            };
            let h = gaussian(5, 8, 0.5, &mut rng);
            let analytic = grad_sc(&emb(h.clone()), &ds).unwrap();
            let unit = Temperature::new(1.0).unwrap();
            let numeric = central_gradient(
                |x| sc_loss(&emb(x.clone()), &ds, unit).unwrap(),
                &h,
                DEFAULT_STEP,
            );
            let err = max_relative_error(&analytic, &numeric);
            assert!(err < 1e-6, "trial {trial}: relative error {err:e}");
        }
    }

    #[test]
    fn grad_sc_tau_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds = DatasetSpec::balanced(2, 3).unwrap();
        let tau = Temperature::new(2.5).unwrap();
        let h = gaussian(4, 6, 0.6, &mut rng);
        let analytic = grad_sc_tau(&emb(h.clone()), &ds, tau).unwrap();
        let numeric = central_gradient(
            |x| sc_loss(&emb(x.clone()), &ds, tau).unwrap(),
            &h,
            DEFAULT_STEP,
        );
        assert!(max_relative_error(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn grad_sc_vanishes_at_zero() {
        let g = grad_sc(&Embeddings::zeros(3, 4), &two_by_two()).unwrap();
        assert_eq!(g.amax(), 0.0);
    }

    #[test]
    fn grad_sc_symmetric_for_identical_pair() {
        let ds = DatasetSpec::from_class_sizes(&[2]).unwrap();
        let h = DMatrix::from_row_slice(2, 2, &[0.3, 0.3, -0.4, -0.4]);
        let g = grad_sc(&emb(h), &ds).unwrap();
        assert!((g.column(0) - g.column(1)).amax() < 1e-15);
    }

    #[test]
    fn grad_cvx_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ds = DatasetSpec::balanced(3, 2).unwrap();
        for _ in 0..5 {
            let a = gaussian(6, 6, 0.7, &mut rng);
            let g = (&a + a.transpose()) * 0.5;
            let analytic = grad_cvx(&GramMatrix::new(g.clone()).unwrap(), &ds).unwrap();
            let numeric = central_gradient(|x| cvx_loss_raw(x, &ds).unwrap(), &g, DEFAULT_STEP);
            assert!(max_relative_error(&analytic, &numeric) < 1e-6);
        }
    }

    #[test]
    fn grad_cvx_hand_value_at_zero() {
        let g = grad_cvx(&GramMatrix::zeros(4), &two_by_two()).unwrap();
        assert!((g[(0, 1)] + 1.0 / 6.0).abs() < 1e-15);
        assert!((g[(0, 2)] - 1.0 / 12.0).abs() < 1e-15);
        assert_eq!(g[(0, 0)], 0.0);
    }

    #[test]
    fn grad_cvx_orthogonal_to_constant_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ds = DatasetSpec::from_class_sizes(&[2, 3, 2]).unwrap();
        let a = gaussian(7, 7, 1.0, &mut rng);
        let g = GramMatrix::new((&a + a.transpose()) * 0.5).unwrap();
        let grad = grad_cvx(&g, &ds).unwrap() * ds.n() as f64;
        assert!(grad.sum().abs() < 1e-12);
        assert!(grad.diagonal().amax() == 0.0);
    }

    #[test]
    fn grad_cvx_rejects_asymmetric_input() {
        let mut g = DMatrix::zeros(4, 4);
        g[(0, 1)] = 1e-6;
        let err = grad_cvx_raw(&g, &two_by_two()).unwrap_err();
        assert!(matches!(err, Error::Asymmetric { .. }));
    }

    #[test]
    fn cvx_loss_is_transpose_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ds = DatasetSpec::balanced(2, 3).unwrap();
        let a = gaussian(6, 6, 1.0, &mut rng);
        let l1 = cvx_loss_raw(&a, &ds).unwrap();
        let l2 = cvx_loss_raw(&a.transpose(), &ds).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
    }

    #[test]
    fn chain_rule_links_the_two_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ds = DatasetSpec::from_class_sizes(&[4, 2, 3]).unwrap();
        let h = emb(gaussian(5, 9, 0.5, &mut rng));
        let g = h.gram();
        let gc = grad_cvx(&g, &ds).unwrap();
        let via_chain = h.matrix() * (&gc + gc.transpose());
        let direct = grad_sc(&h, &ds).unwrap();
        assert!((via_chain - direct).amax() < 1e-10);
        let unit = Temperature::new(1.0).unwrap();
        assert!((cvx_loss(&g, &ds).unwrap() - sc_loss(&h, &ds, unit).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn unsorted_labels_give_same_loss_as_permuted_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sorted = DatasetSpec::from_one_based(2, &[1, 1, 2, 2]).unwrap();
        let shuffled = DatasetSpec::from_one_based(2, &[1, 2, 1, 2]).unwrap();
        let h = gaussian(3, 4, 0.5, &mut rng);
        let perm = [0usize, 2, 1, 3];
        let h_perm = DMatrix::from_fn(3, 4, |r, c| h[(r, perm[c])]);
        let unit = Temperature::new(1.0).unwrap();
        let a = sc_loss(&emb(h), &sorted, unit).unwrap();
        let b = sc_loss(&emb(h_perm), &shuffled, unit).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn temperature_rescaling(seed in any::<u64>(), tau_idx in 0usize..4) {
                let tau = [0.5, 1.0, 2.0, 5.0][tau_idx];
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let ds = DatasetSpec::from_class_sizes(&[3, 2, 3]).unwrap();
                let h = gaussian(4, 8, 0.8, &mut rng);
                let lhs = sc_loss(&emb(h.clone()), &ds, Temperature::new(tau).unwrap()).unwrap();
                let rhs = sc_loss(&emb(h / tau.sqrt()), &ds, Temperature::new(1.0).unwrap()).unwrap();
                prop_assert!((lhs - rhs).abs() < 1e-12);
            }

            #[test]
            fn rotation_invariance(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let ds = DatasetSpec::balanced(3, 3).unwrap();
                let h = gaussian(5, 9, 0.6, &mut rng);
                let r = gaussian(5, 5, 1.0, &mut rng).qr().q();
                let unit = Temperature::new(1.0).unwrap();
                let a = sc_loss(&emb(h.clone()), &ds, unit).unwrap();
                let b = sc_loss(&emb(&r * h), &ds, unit).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }

            #[test]
            fn swapping_equal_size_classes(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let ds = DatasetSpec::from_class_sizes(&[3, 2, 2]).unwrap();
                let a = gaussian(7, 7, 0.5, &mut rng);
                let g = (&a + a.transpose()) * 0.5;
                // swap classes 2 and 3 (index blocks 3..5 and 5..7)
                let perm = [0usize, 1, 2, 5, 6, 3, 4];
                let gp = DMatrix::from_fn(7, 7, |i, j| g[(perm[i], perm[j])]);
                let l1 = cvx_loss_raw(&g, &ds).unwrap();
                let l2 = cvx_loss_raw(&gp, &ds).unwrap();
                prop_assert!((l1 - l2).abs() < 1e-12);
            }
        }
    }
}
