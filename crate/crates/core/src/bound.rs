//! Approximate variational lower bound ℒ.
//!
//! With ω and b at their fixed values the expectations of `log|Ω|` and
//! `log a_k` cancel between the joint and the entropy, leaving
//!
//! ```text
//! ℒ = Σ_h E_q f(β_h) − (ωH/2) tr(Σ_ζ Υ⁻¹) − (ω/2) log|Υ|
//!     − ½(μ_ζ − μ₀)ᵀ Σ₀⁻¹ (μ_ζ − μ₀) − ½ tr(Σ₀⁻¹ Σ_ζ)
//!     − Σ_k (νω (Υ⁻¹)_kk + A_k⁻²) b_k / c_k − Σ_k b_k log c_k
//!     − ½ log|Σ₀| + ½ Σ_h log|Σ_h| + ½ log|Σ_ζ| + const(H, K, ν, A)
//! ```
//!
//! `E_q f` has no closed form; the two surrogates below replace it with the
//! Laplace value `f(μ_h) − K/2` or the delta-method expansion of the
//! log-sum-exp term.

use crate::densities::ln_gamma_scalar;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{self, AgentData, GlobalVarParams, Hyperpriors, LocalVarParams};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surrogate {
    Laplace,
    Delta,
}

/// `f(μ_h) − K/2`.
pub fn expected_f_laplace<T: Scalar>(
    agent: &AgentData<T>,
    local: &LocalVarParams<T>,
    global: &GlobalVarParams<T>,
) -> T {
    model::f_beta(&local.mu, agent, global) - T::from_usize_lossy(local.mu.len()) * T::c(0.5)
}

/// Delta-method value of `E_q f(β_h)`: exact in the prior quadratic, second
/// order in the log-sum-exp.
pub fn expected_f_delta<T: Scalar>(
    agent: &AgentData<T>,
    local: &LocalVarParams<T>,
    global: &GlobalVarParams<T>,
) -> T {
    let half = T::c(0.5);
    let mut acc = T::zero();
    let mut eta = Vec::new();
    for ev in &agent.events {
        eta.resize(ev.x.nrows(), T::zero());
        linalg::utilities_into(&ev.x, &local.mu, &mut eta);
        acc += eta[ev.chosen] - model::delta_expectation(local, &ev.x);
    }
    let d = &local.mu - &global.mu_zeta;
    let prec = global.omega_inv_mean();
    acc - half * d.dot(&(&prec * &d)) - half * (&prec * &local.sigma).trace()
}

pub fn expected_f<T: Scalar>(
    surrogate: Surrogate,
    agent: &AgentData<T>,
    local: &LocalVarParams<T>,
    global: &GlobalVarParams<T>,
) -> T {
    match surrogate {
        Surrogate::Laplace => expected_f_laplace(agent, local, global),
        Surrogate::Delta => expected_f_delta(agent, local, global),
    }
}

/// Every term of ℒ except `Σ_h E_q f(β_h)`.
pub fn lower_bound_rest<T: Scalar>(
    global: &GlobalVarParams<T>,
    locals: &[LocalVarParams<T>],
    priors: &Hyperpriors<T>,
) -> Result<T> {
    let k = priors.dim();
    let kf = T::from_usize_lossy(k);
    let hf = T::from_usize_lossy(locals.len());
    let half = T::c(0.5);
    let omega = global.omega();
    let nu = priors.nu;
    let ups_inv = global.upsilon_inv();

    let sigma0_inv = priors.sigma0_inv()?;
    let dz = &global.mu_zeta - &priors.mu0;
    let mut acc = -omega * hf * half * (&global.sigma_zeta * ups_inv).trace();
    acc -= omega * half * linalg::log_det_spd(global.upsilon(), "Upsilon")?;
    acc -= half * dz.dot(&(&sigma0_inv * &dz));
    acc -= half * (&sigma0_inv * &global.sigma_zeta).trace();
    acc -= half * linalg::log_det_spd(&priors.sigma0, "Sigma0")?;
    acc += half * linalg::log_det_spd(&global.sigma_zeta, "Sigma_zeta")?;
    for l in locals {
        acc += half * linalg::log_det_spd(&l.sigma, "local covariance")?;
    }

    let ln2 = T::c(std::f64::consts::LN_2);
    acc += (hf + T::one() + omega + omega * ln2) * kf * half;
    acc += (nu + kf - T::one()) * kf * half * nu.ln();
    acc -= kf * T::c(std::f64::consts::PI.ln() * 0.5); // K·lnΓ(½)
    for kk in 0..k {
        let b = global.b()[kk];
        let c = global.c[kk];
        let a = priors.a_scale[kk];
        let kk1 = T::from_usize_lossy(kk + 1);
        acc -= (nu * omega * ups_inv[(kk, kk)] + T::one() / (a * a)) * b / c;
        acc -= b * c.ln();
        acc += ln_gamma_scalar((omega + T::one() - kk1) * half);
        acc -= ln_gamma_scalar((nu + kf - kk1) * half);
        acc += ln_gamma_scalar(b) + b - a.ln();
    }
    if !acc.is_finite() {
        return Err(Error::numerical("lower bound", "value is not finite"));
    }
    Ok(acc)
}

pub fn lower_bound<T: Scalar>(
    surrogate: Surrogate,
    agents: &[AgentData<T>],
    global: &GlobalVarParams<T>,
    locals: &[LocalVarParams<T>],
    priors: &Hyperpriors<T>,
) -> Result<T> {
    if agents.len() != locals.len() {
        return Err(Error::invalid("one local factor per agent required"));
    }
    let mut acc = lower_bound_rest(global, locals, priors)?;
    for (a, l) in agents.iter().zip(locals) {
        acc += expected_f(surrogate, a, l, global);
    }
    Ok(acc)
}

pub fn lower_bound_laplace<T: Scalar>(
    agents: &[AgentData<T>],
    global: &GlobalVarParams<T>,
    locals: &[LocalVarParams<T>],
    priors: &Hyperpriors<T>,
) -> Result<T> {
    lower_bound(Surrogate::Laplace, agents, global, locals, priors)
}

pub fn lower_bound_delta<T: Scalar>(
    agents: &[AgentData<T>],
    global: &GlobalVarParams<T>,
    locals: &[LocalVarParams<T>],
    priors: &Hyperpriors<T>,
) -> Result<T> {
    lower_bound(Surrogate::Delta, agents, global, locals, priors)
}
