//! Central finite differences for vector-valued and scalar functions.
//!
//! Used in production for models without analytic Jacobians and in tests as an
//! independent oracle for every analytic derivative in the crate.

use nalgebra::{DMatrix, DVector};

/// Per-coordinate central-difference step: `h_scale * max(1, |z_i|)`.
fn step(z_i: f64, h_scale: f64) -> f64 {
    h_scale * z_i.abs().max(1.0)
}

/// Jacobian of `f` at `z` by central differences, one column per coordinate.
pub fn jacobian<F>(f: F, z: &DVector<f64>, h_scale: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let rows = f(z).len();
    let mut jac = DMatrix::zeros(rows, z.len());
    let mut zp = z.clone();
    for i in 0..z.len() {
        let h = step(z[i], h_scale);
        zp[i] = z[i] + h;
        let fp = f(&zp);
        zp[i] = z[i] - h;
        let fm = f(&zp);
        zp[i] = z[i];
        jac.set_column(i, &((fp - fm) / (2.0 * h)));
    }
    jac
}

/// Gradient of a scalar function at `z` by central differences.
pub fn gradient<F>(f: F, z: &DVector<f64>, h_scale: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let mut g = DVector::zeros(z.len());
    let mut zp = z.clone();
    for i in 0..z.len() {
        let h = step(z[i], h_scale);
        zp[i] = z[i] + h;
        let fp = f(&zp);
        zp[i] = z[i] - h;
        let fm = f(&zp);
        zp[i] = z[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Max-norm error between two vectors relative to `max(1, |b|_inf)`.
pub fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let denom = b.amax().max(1.0);
    (a - b).amax() / denom
}

/// Max-norm error between two matrices relative to `max(1, |b|_max)`.
pub fn rel_err_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let denom = b.amax().max(1.0);
    (a - b).amax() / denom
}
