//! Log densities of the distributions that appear in the hierarchical prior
//! and in the variational family.
//!
//! Inverse-Wishart convention used throughout the crate: `IW(df, S)` has density
//! proportional to `|Ω|^{-(df+K+1)/2} exp(-½ tr(S Ω⁻¹))`, so `E[Ω⁻¹] = df · S⁻¹`.
//! Inverse-gamma `IG(shape, rate)` has density `rate^shape / Γ(shape) · x^{-shape-1} e^{-rate/x}`.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::error::Result;
use crate::linalg;
use crate::scalar::Scalar;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// log Γ_K(x), the multivariate gamma function.
pub fn ln_multivariate_gamma(k: usize, x: f64) -> f64 {
    let kf = k as f64;
    let mut acc = kf * (kf - 1.0) / 4.0 * std::f64::consts::PI.ln();
    for j in 1..=k {
        acc += ln_gamma(x + (1.0 - j as f64) / 2.0);
    }
    acc
}

pub fn ln_gamma_scalar<T: Scalar>(x: T) -> T {
    T::c(ln_gamma(x.as_f64()))
}

pub fn log_normal_pdf<T: Scalar>(x: &DVector<T>, mean: &DVector<T>, cov: &DMatrix<T>) -> Result<T> {
    let chol = linalg::cholesky(cov, "normal covariance")?;
    let diff = x - mean;
    let solved = chol.solve(&diff);
    let quad = diff.dot(&solved);
    let log_det = linalg::log_det_spd(cov, "normal covariance")?;
    let k = T::from_usize_lossy(x.len());
    Ok(-(k * T::c(LN_2PI) + log_det + quad) * T::c(0.5))
}

pub fn log_inverse_wishart_pdf<T: Scalar>(omega: &DMatrix<T>, df: T, scale: &DMatrix<T>) -> Result<T> {
    let k = omega.nrows();
    let kf = T::from_usize_lossy(k);
    let omega_chol = linalg::cholesky(omega, "inverse-Wishart argument")?;
    let log_det_omega = linalg::log_det_spd(omega, "inverse-Wishart argument")?;
    let log_det_scale = linalg::log_det_spd(scale, "inverse-Wishart scale")?;
    // tr(S Ω⁻¹) = tr(Ω⁻¹ S)
    let tr = omega_chol.solve(scale).trace();
    let half = T::c(0.5);
    let norm = df * half * log_det_scale
        - df * kf * half * T::c(2f64.ln())
        - T::c(ln_multivariate_gamma(k, (df * half).as_f64()));
    Ok(norm - (df + kf + T::one()) * half * log_det_omega - half * tr)
}

pub fn log_inverse_gamma_pdf<T: Scalar>(x: T, shape: T, rate: T) -> T {
    shape * rate.ln() - ln_gamma_scalar(shape) - (shape + T::one()) * x.ln() - rate / x
}
