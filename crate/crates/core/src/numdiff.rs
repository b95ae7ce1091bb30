//! Central finite differences, used as an independent check on the analytic
//! gradients. Nothing here knows about the loss functions; callers pass a
//! closure.

use nalgebra::DMatrix;

/// Default step for [`central_gradient`].
pub const DEFAULT_STEP: f64 = 1e-5;

/// Entrywise central-difference gradient of `f` at `x`.
pub fn central_gradient<F>(f: F, x: &DMatrix<f64>, step: f64) -> DMatrix<f64>
where
    F: Fn(&DMatrix<f64>) -> f64,
{
    let mut probe = x.clone();
    let mut grad = DMatrix::zeros(x.nrows(), x.ncols());
    for j in 0..x.ncols() {
        for i in 0..x.nrows() {
            let orig = probe[(i, j)];
            probe[(i, j)] = orig + step;
            let up = f(&probe);
            probe[(i, j)] = orig - step;
            let down = f(&probe);
            probe[(i, j)] = orig;
            grad[(i, j)] = (up - down) / (2.0 * step);
        }
    }
    grad
}

/// Directional derivative of `f` at `x` along `dir`, by central differences.
pub fn central_directional<F>(f: F, x: &DMatrix<f64>, dir: &DMatrix<f64>, step: f64) -> f64
where
    F: Fn(&DMatrix<f64>) -> f64,
{
    let up = f(&(x + dir * step));
    let down = f(&(x - dir * step));
    (up - down) / (2.0 * step)
}

/// `max_ij |a_ij - b_ij| / max_ij |b_ij|`, with `b` the reference.
///
/// The error is taken relative to the largest reference entry rather than
/// entrywise, so that entries near zero do not dominate.
pub fn max_relative_error(a: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    let scale = reference.amax().max(f64::MIN_POSITIVE);
    (a - reference).amax() / scale
}
