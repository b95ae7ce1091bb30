//! Structural diagnostics for solutions: within-class collapse, simplex ETF
//! geometry of the class means, STEP block structure of the Gram matrix and
//! equality up to rotation.
//!
//! Residuals are reported in units of the natural scale: `1/sqrt(tau)` for
//! embeddings and `1/tau` for Gram entries.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{
    max_asymmetry, DatasetSpec, Embeddings, GramMatrix, StepImbalanceSpec, Temperature,
    SYMMETRY_TOL,
};

/// `d x k` matrix whose column `c` is the mean embedding of class `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeans(pub DMatrix<f64>);

impl ClassMeans {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Symmetric `k x k` Gram matrix of class means.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeanGram(DMatrix<f64>);

impl ClassMeanGram {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if !values.is_square() {
            return Err(Error::dims(
                "square matrix",
                format!("{}x{}", values.nrows(), values.ncols()),
            ));
        }
        let asymmetry = max_asymmetry(&values);
        if asymmetry > SYMMETRY_TOL {
            return Err(Error::Asymmetric { asymmetry });
        }
        Ok(Self(values))
    }

    pub fn k(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }
}

/// Replicates `gamma` blockwise: `G[i, j] = gamma[y_i, y_j]`.
pub fn lift_gamma(gamma: &ClassMeanGram, ds: &DatasetSpec) -> Result<GramMatrix> {
    if gamma.k() != ds.k() {
        return Err(Error::dims(
            format!("{0}x{0}", ds.k()),
            format!("{0}x{0}", gamma.k()),
        ));
    }
    let n = ds.n();
    let m = gamma.matrix();
    Ok(GramMatrix::from_raw(DMatrix::from_fn(n, n, |i, j| {
        m[(ds.label(i), ds.label(j))]
    })))
}

/// Block means of `G` and the largest deviation of any entry from its block
/// mean.
pub fn gamma_from_gram(g: &GramMatrix, ds: &DatasetSpec) -> Result<(ClassMeanGram, f64)> {
    let n = ds.n();
    if g.n() != n {
        return Err(Error::dims(format!("{n}x{n}"), format!("{0}x{0}", g.n())));
    }
    let k = ds.k();
    let m = g.matrix();
    let mut sums = DMatrix::<f64>::zeros(k, k);
    for j in 0..n {
        for i in 0..n {
            sums[(ds.label(i), ds.label(j))] += m[(i, j)];
        }
    }
    let sizes = ds.class_sizes();
    let gamma = DMatrix::from_fn(k, k, |a, b| {
        let count = (sizes[a] * sizes[b]) as f64;
        if count > 0.0 {
            sums[(a, b)] / count
        } else {
            0.0
        }
    });
    let gamma = (&gamma + gamma.transpose()) * 0.5;
    let mut deviation = 0.0f64;
    for j in 0..n {
        for i in 0..n {
            deviation = deviation.max((m[(i, j)] - gamma[(ds.label(i), ds.label(j))]).abs());
        }
    }
    Ok((ClassMeanGram(gamma), deviation))
}

pub fn class_means(h: &Embeddings, ds: &DatasetSpec) -> Result<ClassMeans> {
    if h.n() != ds.n() {
        return Err(Error::dims(
            format!("{} columns", ds.n()),
            format!("{} columns", h.n()),
        ));
    }
    let mut means = DMatrix::zeros(h.d(), ds.k());
    for (i, col) in h.matrix().column_iter().enumerate() {
        let mut target = means.column_mut(ds.label(i));
        target += col;
    }
    for c in 0..ds.k() {
        let size = ds.class_size(c);
        if size > 0 {
            means.column_mut(c).scale_mut(1.0 / size as f64);
        }
    }
    Ok(ClassMeans(means))
}

/// Largest within-class distance `||h_i - h_j||`, in units of `1/sqrt(tau)`.
/// Zero iff every class is collapsed to a single point.
pub fn nc_residual(h: &Embeddings, ds: &DatasetSpec, tau: Temperature) -> Result<f64> {
    if h.n() != ds.n() {
        return Err(Error::dims(
            format!("{} columns", ds.n()),
            format!("{} columns", h.n()),
        ));
    }
    let m = h.matrix();
    let n = ds.n();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            if ds.label(i) == ds.label(j) {
                worst = worst.max((m.column(i) - m.column(j)).norm());
            }
        }
    }
    Ok(worst * tau.value().sqrt())
}

/// Distance of `M^T M` from the nearest multiple of the simplex ETF Gram
/// `E = I_k - 11^T / k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EtfFit {
    /// `max |M^T M - scale E|`, in units of `1/tau`.
    pub residual: f64,
    /// Least-squares scale `<M^T M, E> / <E, E>`.
    pub scale: f64,
}

pub fn etf_residual(means: &ClassMeans, tau: Temperature) -> Result<EtfFit> {
    let m = means.matrix();
    let k = m.ncols();
    if k < 2 {
        return Err(Error::dims("at least 2 classes", k));
    }
    let s = m.tr_mul(m);
    let e = DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { 0.0 } - 1.0 / k as f64);
    let scale = s.dot(&e) / e.dot(&e);
    let residual = (s - e * scale).amax() * tau.value();
    Ok(EtfFit { residual, scale })
}

/// Fitted STEP block parameters. Betas are `None` when the group holds a
/// single class (no cross-class block to measure).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlockParams {
    pub alpha_maj: f64,
    pub beta_maj: Option<f64>,
    pub alpha_minor: f64,
    pub beta_minor: Option<f64>,
    pub theta: f64,
    pub residual: f64,
}

/// Class-mean Gram with STEP block structure: within-class value `alpha`,
/// value `beta` between distinct classes of the same group, `theta` between
/// the majority and minority groups.
fn step_gamma(params: &BlockParams, spec: &StepImbalanceSpec) -> DMatrix<f64> {
    let k = spec.k;
    let maj = spec.majority_classes();
    DMatrix::from_fn(k, k, |a, b| {
        let a_maj = a < maj;
        let b_maj = b < maj;
        match (a_maj, b_maj) {
            (true, true) if a == b => params.alpha_maj,
            (true, true) => params.beta_maj.unwrap_or(params.alpha_maj),
            (false, false) if a == b => params.alpha_minor,
            (false, false) => params.beta_minor.unwrap_or(params.alpha_minor),
            _ => params.theta,
        }
    })
}

/// Gram matrix with exact STEP block structure (residual field ignored).
pub fn block_matrix(params: &BlockParams, spec: &StepImbalanceSpec) -> Result<GramMatrix> {
    let ds = crate::model::make_step_dataset(spec)?;
    lift_gamma(&ClassMeanGram(step_gamma(params, spec)), &ds)
}

/// Fits the STEP block model to `G` by averaging over the blocks of each
/// kind, and reports the max-abs deviation of `G` from the fitted model.
pub fn block_fit(
    g: &GramMatrix,
    spec: &StepImbalanceSpec,
    tau: Temperature,
) -> Result<BlockParams> {
    let ds = crate::model::make_step_dataset(spec)?;
    if g.n() != ds.n() {
        return Err(Error::dims(
            format!("{0}x{0} for STEP layout {1:?}", ds.n(), spec.class_sizes()),
            format!("{0}x{0}", g.n()),
        ));
    }
    let (gamma, _) = gamma_from_gram(g, &ds)?;
    let gm = gamma.matrix();
    let k = spec.k;
    let maj = spec.majority_classes();
    let mean = |pairs: Vec<(usize, usize)>| -> Option<f64> {
        if pairs.is_empty() {
            None
        } else {
            Some(pairs.iter().map(|&(a, b)| gm[(a, b)]).sum::<f64>() / pairs.len() as f64)
        }
    };
    let pairs = |lo: usize, hi: usize, same: bool| -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for a in lo..hi {
            for b in lo..hi {
                if (a == b) == same {
                    out.push((a, b));
                }
            }
        }
        out
    };
    let alpha_maj = mean(pairs(0, maj, true)).unwrap_or(f64::NAN);
    let beta_maj = mean(pairs(0, maj, false));
    let alpha_minor = mean(pairs(maj, k, true)).unwrap_or(f64::NAN);
    let beta_minor = mean(pairs(maj, k, false));
    let cross: Vec<(usize, usize)> = (0..maj)
        .flat_map(|a| (maj..k).map(move |b| (a, b)))
        .collect();
    let theta = mean(cross).unwrap_or(f64::NAN);

    let mut params = BlockParams {
        alpha_maj,
        beta_maj,
        alpha_minor,
        beta_minor,
        theta,
        residual: 0.0,
    };
    let model = lift_gamma(&ClassMeanGram(step_gamma(&params, spec)), &ds)?;
    params.residual = (g.matrix() - model.matrix()).amax() * tau.value();
    Ok(params)
}

/// Parameters of the balanced closed-form layout
/// `G = (alpha - beta) I_n + ((beta - theta) I_k + theta J_k) (x) J_{n/k}`:
/// `alpha` on the diagonal, `beta` between distinct samples of one class,
/// `theta` across classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BalancedParams {
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
    pub residual: f64,
}

pub fn balanced_fit(g: &GramMatrix, ds: &DatasetSpec, tau: Temperature) -> Result<BalancedParams> {
    let n = ds.n();
    if g.n() != n {
        return Err(Error::dims(format!("{n}x{n}"), format!("{0}x{0}", g.n())));
    }
    let m = g.matrix();
    let (mut diag, mut within, mut cross) = ((0.0, 0usize), (0.0, 0usize), (0.0, 0usize));
    for j in 0..n {
        for i in 0..n {
            let slot = if i == j {
                &mut diag
            } else if ds.label(i) == ds.label(j) {
                &mut within
            } else {
                &mut cross
            };
            slot.0 += m[(i, j)];
            slot.1 += 1;
        }
    }
    let avg = |(s, c): (f64, usize)| if c == 0 { f64::NAN } else { s / c as f64 };
    let (alpha, beta, theta) = (avg(diag), avg(within), avg(cross));
    let mut residual = 0.0f64;
    for j in 0..n {
        for i in 0..n {
            let model = if i == j {
                alpha
            } else if ds.label(i) == ds.label(j) {
                beta
            } else {
                theta
            };
            residual = residual.max((m[(i, j)] - model).abs());
        }
    }
    Ok(BalancedParams {
        alpha,
        beta,
        theta,
        residual: residual * tau.value(),
    })
}

/// Orthogonal `R` minimizing `||R H1 - H2||_F`, and the relative residual
/// `||R H1 - H2||_F / ||H2||_F`. Reflections are allowed.
pub fn procrustes_align(h1: &Embeddings, h2: &Embeddings) -> Result<(DMatrix<f64>, f64)> {
    if h1.d() != h2.d() || h1.n() != h2.n() {
        return Err(Error::dims(
            format!("{}x{}", h1.d(), h1.n()),
            format!("{}x{}", h2.d(), h2.n()),
        ));
    }
    let a = h1.matrix();
    let b = h2.matrix();
    let cross = b * a.transpose();
    let svd = cross.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::NonFinite),
    };
    let r = u * v_t;
    let denom = b.norm();
    let diff = (&r * a - b).norm();
    let residual = if denom > 0.0 { diff / denom } else { diff };
    Ok((r, residual))
}

/// `max |H1^T H1 - H2^T H2|`, in units of `1/tau`.
pub fn gram_distance(h1: &Embeddings, h2: &Embeddings, tau: Temperature) -> Result<f64> {
    if h1.n() != h2.n() {
        return Err(Error::dims(
            format!("{} columns", h1.n()),
            format!("{} columns", h2.n()),
        ));
    }
    Ok((h1.gram().matrix() - h2.gram().matrix()).amax() * tau.value())
}

/// Summary written by the `analyze` and `landscape` commands.
#[derive(Debug, Clone, Default, Serialize)]
pub struct GeometryReport {
    pub nc_residual: Option<f64>,
    pub etf_residual: Option<f64>,
    pub etf_scale: Option<f64>,
    pub block: Option<BlockParams>,
    pub gamma_block_deviation: Option<f64>,
    pub gram_pairwise_max: Option<f64>,
    pub procrustes_max: Option<f64>,
}

impl GeometryReport {
    /// Report for a set of embedding matrices (one per restart). Pairwise
    /// fields are filled when more than one matrix is given.
    pub fn from_embeddings(
        hs: &[Embeddings],
        ds: &DatasetSpec,
        step: Option<&StepImbalanceSpec>,
        tau: Temperature,
    ) -> Result<Self> {
        let mut report = GeometryReport::default();
        let Some(first) = hs.first() else {
            return Ok(report);
        };
        let mut nc = 0.0f64;
        for h in hs {
            nc = nc.max(nc_residual(h, ds, tau)?);
        }
        report.nc_residual = Some(nc);
        if ds.k() >= 2 {
            let fit = etf_residual(&class_means(first, ds)?, tau)?;
            report.etf_residual = Some(fit.residual);
            report.etf_scale = Some(fit.scale);
        }
        report.fill_gram(&first.gram(), ds, step, tau)?;
        if hs.len() > 1 {
            let (mut gram_max, mut proc_max) = (0.0f64, 0.0f64);
            for (a, h1) in hs.iter().enumerate() {
                for h2 in &hs[a + 1..] {
                    gram_max = gram_max.max(gram_distance(h1, h2, tau)?);
                    proc_max = proc_max.max(procrustes_align(h1, h2)?.1);
                }
            }
            report.gram_pairwise_max = Some(gram_max);
            report.procrustes_max = Some(proc_max);
        }
        Ok(report)
    }

    pub fn from_gram(
        g: &GramMatrix,
        ds: &DatasetSpec,
        step: Option<&StepImbalanceSpec>,
        tau: Temperature,
    ) -> Result<Self> {
        let mut report = GeometryReport::default();
        let (gamma, _) = gamma_from_gram(g, ds)?;
        if ds.k() >= 2 {
            // class means recovered from Gamma = M^T M via its PSD square root
            let eig = gamma.matrix().clone().symmetric_eigen();
            let root = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()))
                * eig.eigenvectors.transpose();
            let fit = etf_residual(&ClassMeans(root), tau)?;
            report.etf_residual = Some(fit.residual);
            report.etf_scale = Some(fit.scale);
        }
        report.fill_gram(g, ds, step, tau)?;
        Ok(report)
    }

    fn fill_gram(
        &mut self,
        g: &GramMatrix,
        ds: &DatasetSpec,
        step: Option<&StepImbalanceSpec>,
        tau: Temperature,
    ) -> Result<()> {
        let (_, deviation) = gamma_from_gram(g, ds)?;
        self.gamma_block_deviation = Some(deviation * tau.value());
        if let Some(spec) = step {
            self.block = Some(block_fit(g, spec, tau)?);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    fn emb(m: DMatrix<f64>) -> Embeddings {
        Embeddings::new(m).unwrap()
    }

    fn tau(t: f64) -> Temperature {
        Temperature::new(t).unwrap()
    }

    fn collapsed(means: &DMatrix<f64>, ds: &DatasetSpec) -> Embeddings {
        emb(DMatrix::from_fn(means.nrows(), ds.n(), |r, i| {
            means[(r, ds.label(i))]
        }))
    }

    #[test]
    fn means_of_constant_columns() {
        let ds = DatasetSpec::balanced(3, 2).unwrap();
        let v = [0.1, -0.2, 0.3];
        let h = emb(DMatrix::from_fn(3, 6, |r, _| v[r]));
        let m = class_means(&h, &ds).unwrap();
        for c in 0..3 {
            for (r, &expected) in v.iter().enumerate() {
                assert_eq!(m.0[(r, c)], expected);
            }
        }
    }

    #[test]
    fn means_by_hand() {
        let ds = DatasetSpec::balanced(2, 2).unwrap();
        #[rustfmt::skip]
        let h = emb(DMatrix::from_row_slice(3, 4, &[
            1.0, 0.0, 0.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
            0.0, 0.0, 1.0, 1.0,
        ]));
        let m = class_means(&h, &ds).unwrap();
        assert_eq!(m.0.column(0).as_slice(), &[0.5, 0.5, 0.0]);
        assert_eq!(m.0.column(1).as_slice(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn nc_residual_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = DatasetSpec::from_class_sizes(&[3, 2]).unwrap();
        let h = collapsed(&gaussian(4, 2, &mut rng), &ds);
        assert_eq!(nc_residual(&h, &ds, tau(2.0)).unwrap(), 0.0);
        let means = class_means(&h, &ds).unwrap();
        for i in 0..ds.n() {
            assert!((h.matrix().column(i) - means.0.column(ds.label(i))).amax() < 1e-15);
        }

        let ds = DatasetSpec::balanced(1, 2).unwrap();
        let h = emb(DMatrix::from_row_slice(2, 2, &[0.0, 0.3, 0.0, 0.4]));
        assert!((nc_residual(&h, &ds, tau(1.0)).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn nc_equivalent_to_block_constant_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds = DatasetSpec::from_class_sizes(&[2, 3]).unwrap();
        let h = collapsed(&gaussian(3, 2, &mut rng), &ds);
        let (_, dev) = gamma_from_gram(&h.gram(), &ds).unwrap();
        assert!(dev < 1e-14);

        let mut m = h.into_matrix();
        m[(0, 0)] += 0.1;
        let h = emb(m);
        assert!(nc_residual(&h, &ds, tau(1.0)).unwrap() > 0.0);
        let (_, dev) = gamma_from_gram(&h.gram(), &ds).unwrap();
        assert!(dev > 1e-3);
    }

    #[test]
    fn gamma_lift_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ds = DatasetSpec::from_class_sizes(&[2, 4, 3]).unwrap();
        let a = gaussian(3, 3, &mut rng);
        let gamma = ClassMeanGram::new((&a + a.transpose()) * 0.5).unwrap();
        let lifted = lift_gamma(&gamma, &ds).unwrap();
        let (back, dev) = gamma_from_gram(&lifted, &ds).unwrap();
        assert!((back.matrix() - gamma.matrix()).amax() < 1e-15);
        assert!(dev < 1e-15);
    }

    #[test]
    fn exact_etf_has_zero_residual() {
        for k in 2..6 {
            let t = tau(2.0);
            let e = DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { 0.0 } - 1.0 / k as f64);
            // means as columns of a scaled centred identity have Gram E * scale
            let m = e.clone() * (k as f64 / (k as f64 - 1.0) / t.value()).sqrt();
            let fit = etf_residual(&ClassMeans(m), t).unwrap();
            assert!(fit.residual < 1e-12);
            assert!((fit.scale - k as f64 / (k as f64 - 1.0) / t.value()).abs() < 1e-12);
        }
    }

    #[test]
    fn etf_residual_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = gaussian(5, 4, &mut rng);
        let r = gaussian(5, 5, &mut rng).qr().q();
        let a = etf_residual(&ClassMeans(m.clone()), tau(1.0)).unwrap();
        let b = etf_residual(&ClassMeans(r * m), tau(1.0)).unwrap();
        assert!((a.residual - b.residual).abs() < 1e-12);
        assert!(a.residual > 1e-2);
    }

    #[test]
    fn block_fit_recovers_constructed_parameters() {
        let spec = StepImbalanceSpec::new(4, 5.0, 0.5, 2).unwrap();
        let params = BlockParams {
            alpha_maj: 0.5,
            beta_maj: Some(0.1),
            alpha_minor: 0.5,
            beta_minor: Some(-0.2),
            theta: -0.1,
            residual: 0.0,
        };
        let g = block_matrix(&params, &spec).unwrap();
        let fit = block_fit(&g, &spec, tau(2.0)).unwrap();
        assert!((fit.alpha_maj - 0.5).abs() < 1e-15);
        assert!((fit.beta_maj.unwrap() - 0.1).abs() < 1e-15);
        assert!((fit.alpha_minor - 0.5).abs() < 1e-15);
        assert!((fit.beta_minor.unwrap() + 0.2).abs() < 1e-15);
        assert!((fit.theta + 0.1).abs() < 1e-15);
        assert!(fit.residual < 1e-15);
    }

    #[test]
    fn block_fit_single_class_groups() {
        let spec = StepImbalanceSpec::new(2, 3.0, 0.5, 2).unwrap();
        let params = BlockParams {
            alpha_maj: 0.4,
            beta_maj: None,
            alpha_minor: 0.3,
            beta_minor: None,
            theta: -0.2,
            residual: 0.0,
        };
        let g = block_matrix(&params, &spec).unwrap();
        let fit = block_fit(&g, &spec, tau(1.0)).unwrap();
        assert_eq!(fit.beta_maj, None);
        assert_eq!(fit.beta_minor, None);
        assert!((fit.theta + 0.2).abs() < 1e-15);
    }

    #[test]
    fn block_fit_rejects_wrong_layout() {
        let spec = StepImbalanceSpec::new(4, 5.0, 0.5, 2).unwrap();
        let err = block_fit(&GramMatrix::zeros(10), &spec, tau(1.0)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn procrustes_recovers_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h1 = gaussian(4, 9, &mut rng);
        let r0 = gaussian(4, 4, &mut rng).qr().q();
        let (r, residual) = procrustes_align(&emb(h1.clone()), &emb(&r0 * &h1)).unwrap();
        assert!(residual < 1e-10);
        assert!((r - r0).amax() < 1e-10);

        let (r, residual) = procrustes_align(&emb(h1.clone()), &emb(h1)).unwrap();
        assert!(residual < 1e-14);
        assert!((r - DMatrix::identity(4, 4)).amax() < 1e-10);
    }

    #[test]
    fn gram_distance_ignores_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h1 = gaussian(3, 5, &mut rng);
        let r = gaussian(3, 3, &mut rng).qr().q();
        let d = gram_distance(&emb(h1.clone()), &emb(r * &h1), tau(2.0)).unwrap();
        assert!(d < 1e-12);
        let d = gram_distance(&emb(h1.clone()), &emb(h1 * 1.1), tau(2.0)).unwrap();
        assert!(d > 1e-2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn procrustes_and_gram_distance_agree_on_equality(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let h1 = gaussian(4, 6, &mut rng);
                let r = gaussian(4, 4, &mut rng).qr().q();
                let h2 = &r * &h1;
                let t = tau(1.0);
                prop_assert!(gram_distance(&emb(h1.clone()), &emb(h2.clone()), t).unwrap() < 1e-10);
                prop_assert!(procrustes_align(&emb(h1.clone()), &emb(h2)).unwrap().1 < 1e-10);
                // perturbing one column breaks both
                let mut h3 = h1.clone();
                h3[(0, 0)] += 0.5;
                prop_assert!(gram_distance(&emb(h1.clone()), &emb(h3.clone()), t).unwrap() > 1e-3);
                prop_assert!(procrustes_align(&emb(h1), &emb(h3)).unwrap().1 > 1e-3);
            }

            #[test]
            fn block_fit_reconstructs_block_matrices(
                a1 in -0.5f64..0.5, b1 in -0.5f64..0.5, a2 in -0.5f64..0.5,
                b2 in -0.5f64..0.5, th in -0.5f64..0.5,
            ) {
                let spec = StepImbalanceSpec::new(5, 2.0, 0.4, 2).unwrap();
                let params = BlockParams {
                    alpha_maj: a1, beta_maj: Some(b1), alpha_minor: a2,
                    beta_minor: Some(b2), theta: th, residual: 0.0,
                };
                let g = block_matrix(&params, &spec).unwrap();
                let fit = block_fit(&g, &spec, tau(2.0)).unwrap();
                let again = block_matrix(&fit, &spec).unwrap();
                prop_assert!((again.matrix() - g.matrix()).amax() < 1e-14);
                prop_assert!(fit.residual < 1e-13);
            }
        }
    }
}
