//! Closed-form coordinate updates for the conjugate factors q(ζ), q(Ω), q(a).
//!
//! The batch driver calls [`update_zeta`], [`update_omega_scale`] and
//! [`update_a`] in that order. The `*_scaled` variants take an explicit
//! multiplier on the agent sums so the stochastic driver can feed a minibatch
//! with weight `H/|B|`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{GlobalVarParams, Hyperpriors, LocalVarParams};
use crate::scalar::Scalar;

/// `Σ_ζ = (Σ₀⁻¹ + H ωΥ⁻¹)⁻¹`, which depends on the data only through `H`.
pub fn zeta_covariance<T: Scalar>(
    n_agents: usize,
    global: &GlobalVarParams<T>,
    priors: &Hyperpriors<T>,
) -> Result<DMatrix<T>> {
    let precision = priors.sigma0_inv()? + global.omega_inv_mean() * T::from_usize_lossy(n_agents);
    linalg::spd_inverse(&precision, "q(zeta) precision")
}

/// `Σ_ζ (Σ₀⁻¹μ₀ + ωΥ⁻¹ · scale · Σ μ_h)` for a given `Σ_ζ`.
pub fn zeta_mean_scaled<'a, T: Scalar>(
    locals: impl IntoIterator<Item = &'a LocalVarParams<T>>,
    scale: T,
    sigma_zeta: &DMatrix<T>,
    global: &GlobalVarParams<T>,
    priors: &Hyperpriors<T>,
) -> Result<DVector<T>> {
    let k = priors.dim();
    let mut sum = DVector::zeros(k);
    for l in locals {
        sum += &l.mu;
    }
    let rhs = priors.sigma0_inv()? * &priors.mu0 + global.omega_inv_mean() * (sum * scale);
    Ok(sigma_zeta * rhs)
}

/// Optimal `(μ_ζ, Σ_ζ)` given all local factors.
pub fn update_zeta<T: Scalar>(
    locals: &[LocalVarParams<T>],
    global: &GlobalVarParams<T>,
    priors: &Hyperpriors<T>,
) -> Result<(DVector<T>, DMatrix<T>)> {
    let sigma = zeta_covariance(locals.len(), global, priors)?;
    let mu = zeta_mean_scaled(locals, T::one(), &sigma, global, priors)?;
    Ok((mu, sigma))
}

/// `scale · Σ_h [(μ_h − μ_ζ)(μ_h − μ_ζ)ᵀ + Σ_h]`, the data part of the Υ update.
pub fn spread_sum_scaled<'a, T: Scalar>(
    locals: impl IntoIterator<Item = &'a LocalVarParams<T>>,
    mu_zeta: &DVector<T>,
    scale: T,
) -> DMatrix<T> {
    let k = mu_zeta.len();
    let mut acc = DMatrix::zeros(k, k);
    for l in locals {
        let d = &l.mu - mu_zeta;
        acc += &d * d.transpose() + &l.sigma;
    }
    acc * scale
}

/// `2ν diag(b/c) + spread + H Σ_ζ` given a precomputed spread term.
pub fn omega_scale_bracket<T: Scalar>(
    spread: &DMatrix<T>,
    n_agents: usize,
    global: &GlobalVarParams<T>,
    priors: &Hyperpriors<T>,
) -> DMatrix<T> {
    let two_nu = T::c(2.0) * priors.nu;
    let diag = global.b().zip_map(&global.c, |b, c| two_nu * b / c);
    let out = DMatrix::from_diagonal(&diag) + spread + &global.sigma_zeta * T::from_usize_lossy(n_agents);
    linalg::symmetrize(&out)
}

/// Optimal `Υ` given all local factors and the current `q(ζ)`.
pub fn update_omega_scale<T: Scalar>(
    locals: &[LocalVarParams<T>],
    global: &GlobalVarParams<T>,
    priors: &Hyperpriors<T>,
) -> DMatrix<T> {
    let spread = spread_sum_scaled(locals, &global.mu_zeta, T::one());
    omega_scale_bracket(&spread, locals.len(), global, priors)
}

/// `c_k = νω(Υ⁻¹)_kk + A_k⁻²`.
pub fn update_a<T: Scalar>(global: &GlobalVarParams<T>, priors: &Hyperpriors<T>) -> Result<DVector<T>> {
    let nu_omega = priors.nu * global.omega();
    let inv = global.upsilon_inv();
    let c = DVector::from_fn(priors.dim(), |k, _| {
        let a = priors.a_scale[k];
        nu_omega * inv[(k, k)] + T::one() / (a * a)
    });
    if c.iter().any(|v| !(v.is_finite() && *v > T::zero())) {
        return Err(Error::numerical("q(a) update", "rate is not positive and finite"));
    }
    Ok(c)
}

/// Runs the three updates in order ζ → Υ → c on `global`. Returns whether a
/// jitter was needed to factorize the new Υ.
pub fn full_global_update<T: Scalar>(
    locals: &[LocalVarParams<T>],
    global: &mut GlobalVarParams<T>,
    priors: &Hyperpriors<T>,
) -> Result<bool> {
    let (mu, sigma) = update_zeta(locals, global, priors)?;
    global.mu_zeta = mu;
    global.sigma_zeta = sigma;
    let upsilon = update_omega_scale(locals, global, priors);
    let jittered = global.set_upsilon(upsilon)?;
    global.c = update_a(global, priors)?;
    Ok(jittered)
}
