//! Mixed multinomial logit model: data, priors, variational parameter blocks,
//! the per-agent local objective and the joint density.
//!
//! Agent `h` has coefficients `β_h ~ N(ζ, Ω)` and at each choice event picks
//! one of `J` alternatives with softmax probabilities `exp(x_j β_h) / Σ exp(x_j' β_h)`.
//! Priors: `ζ ~ N(μ₀, Σ₀)`, `Ω | a ~ IW(ν + K − 1, 2ν diag(1/a))`,
//! `a_k ~ IG(½, 1/A_k²)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::densities;
use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;
use crate::serde_mat;

/// One choice occasion: a J×K covariate matrix and the chosen alternative.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceEvent<T: Scalar> {
    pub x: DMatrix<T>,
    pub chosen: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentData<T: Scalar> {
    pub id: String,
    pub events: Vec<ChoiceEvent<T>>,
}

impl<T: Scalar> AgentData<T> {
    pub fn new(id: impl Into<String>, events: Vec<ChoiceEvent<T>>) -> Self {
        AgentData {
            id: id.into(),
            events,
        }
    }

    /// Number of observed events `T_h`.
    pub fn n_events(&self) -> usize {
        self.events.len()
    }
}

/// Validated collection of agents sharing `J` alternatives and `K` covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceDataset<T: Scalar> {
    agents: Vec<AgentData<T>>,
    n_alternatives: usize,
    n_covariates: usize,
}

impl<T: Scalar> ChoiceDataset<T> {
    pub fn new(agents: Vec<AgentData<T>>, n_alternatives: usize, n_covariates: usize) -> Result<Self> {
        if n_alternatives < 2 {
            return Err(Error::invalid("need at least two alternatives"));
        }
        if n_covariates < 1 {
            return Err(Error::invalid("need at least one covariate"));
        }
        if agents.is_empty() {
            return Err(Error::invalid("dataset has no agents"));
        }
        let mut seen = std::collections::HashSet::with_capacity(agents.len());
        for agent in &agents {
            if !seen.insert(agent.id.as_str()) {
                return Err(Error::invalid(format!("duplicate agent id {:?}", agent.id)));
            }
            for (t, ev) in agent.events.iter().enumerate() {
                if ev.x.shape() != (n_alternatives, n_covariates) {
                    return Err(Error::Schema(format!(
                        "agent {:?} event {t}: covariate matrix is {}x{}, expected {n_alternatives}x{n_covariates}",
                        agent.id,
                        ev.x.nrows(),
                        ev.x.ncols()
                    )));
                }
                if ev.chosen >= n_alternatives {
                    return Err(Error::invalid(format!(
                        "agent {:?} event {t}: chosen alternative {} out of range",
                        agent.id, ev.chosen
                    )));
                }
                if ev.x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid(format!(
                        "agent {:?} event {t}: non-finite covariate",
                        agent.id
                    )));
                }
            }
        }
        Ok(ChoiceDataset {
            agents,
            n_alternatives,
            n_covariates,
        })
    }

    pub fn agents(&self) -> &[AgentData<T>] {
        &self.agents
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn n_alternatives(&self) -> usize {
        self.n_alternatives
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn n_events(&self) -> usize {
        self.agents.iter().map(|a| a.events.len()).sum()
    }

    /// New dataset made of the agents at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let agents = indices
            .iter()
            .map(|&i| {
                self.agents
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("agent index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        ChoiceDataset::new(agents, self.n_alternatives, self.n_covariates)
    }
}

/// Fixed prior constants μ₀, Σ₀, ν and A₁…A_K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Hyperpriors<T: Scalar> {
    #[serde(with = "serde_mat::vector")]
    pub mu0: DVector<T>,
    #[serde(with = "serde_mat::matrix")]
    pub sigma0: DMatrix<T>,
    pub nu: T,
    #[serde(with = "serde_mat::vector")]
    pub a_scale: DVector<T>,
}

impl<T: Scalar> Hyperpriors<T> {
    /// Vague defaults: μ₀ = 0, Σ₀ = 10⁶ I, ν = 2, A_k = 10³.
    pub fn vague(k: usize) -> Self {
        Hyperpriors {
            mu0: DVector::zeros(k),
            sigma0: DMatrix::identity(k, k) * T::c(1e6),
            nu: T::c(2.0),
            a_scale: DVector::from_element(k, T::c(1e3)),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.mu0.len();
        if self.sigma0.shape() != (k, k) || self.a_scale.len() != k {
            return Err(Error::invalid("hyperprior dimensions disagree"));
        }
        if !(self.nu > T::zero()) {
            return Err(Error::invalid("nu must be positive"));
        }
        if self.a_scale.iter().any(|&a| !(a > T::zero())) {
            return Err(Error::invalid("A_k must be positive"));
        }
        linalg::cholesky(&self.sigma0, "prior covariance Sigma0")?;
        Ok(())
    }

    pub fn sigma0_inv(&self) -> Result<DMatrix<T>> {
        linalg::spd_inverse(&self.sigma0, "prior covariance Sigma0")
    }
}

/// Variational factors of the global parameters:
/// `q(ζ) = N(μ_ζ, Σ_ζ)`, `q(Ω) = IW(ω, Υ)`, `q(a_k) = IG(b_k, c_k)`.
///
/// `ω` and `b` are fixed at construction. `Υ` is only changed through
/// [`GlobalVarParams::set_upsilon`], which also refreshes the cached `Υ⁻¹`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", try_from = "GlobalRecord<T>", into = "GlobalRecord<T>")]
pub struct GlobalVarParams<T: Scalar> {
    pub mu_zeta: DVector<T>,
    pub sigma_zeta: DMatrix<T>,
    omega: T,
    upsilon: DMatrix<T>,
    b: DVector<T>,
    pub c: DVector<T>,
    upsilon_inv: DMatrix<T>,
}

impl<T: Scalar> GlobalVarParams<T> {
    /// Starting point: μ_ζ = 0, Σ_ζ = 0.01 I, Υ = (ω − K + 1) I, c = b,
    /// with ω = H + ν + K − 1 and b_k = (ν + K)/2.
    pub fn initial(n_agents: usize, priors: &Hyperpriors<T>) -> Self {
        let k = priors.dim();
        let kf = T::from_usize_lossy(k);
        let omega = T::from_usize_lossy(n_agents) + priors.nu + kf - T::one();
        let b = DVector::from_element(k, (priors.nu + kf) * T::c(0.5));
        let upsilon = DMatrix::identity(k, k) * (omega - kf + T::one());
        // Same factorization path as `set_upsilon`, so a reloaded copy matches bit for bit.
        let upsilon_inv = linalg::spd_inverse(&upsilon, "Upsilon")
            .expect("initial Upsilon is a positive multiple of the identity");
        GlobalVarParams {
            mu_zeta: DVector::zeros(k),
            sigma_zeta: DMatrix::identity(k, k) * T::c(0.01),
            omega,
            upsilon,
            c: b.clone(),
            b,
            upsilon_inv,
        }
    }

    /// Builds a parameter block from explicit values (ω and b are still the
    /// deterministic functions of H, ν and K).
    pub fn from_parts(
        n_agents: usize,
        priors: &Hyperpriors<T>,
        mu_zeta: DVector<T>,
        sigma_zeta: DMatrix<T>,
        upsilon: DMatrix<T>,
        c: DVector<T>,
    ) -> Result<Self> {
        let mut g = Self::initial(n_agents, priors);
        g.mu_zeta = mu_zeta;
        g.sigma_zeta = sigma_zeta;
        g.c = c;
        g.set_upsilon(upsilon)?;
        Ok(g)
    }

    pub fn dim(&self) -> usize {
        self.mu_zeta.len()
    }

    pub fn omega(&self) -> T {
        self.omega
    }

    pub fn b(&self) -> &DVector<T> {
        &self.b
    }

    pub fn upsilon(&self) -> &DMatrix<T> {
        &self.upsilon
    }

    pub fn upsilon_inv(&self) -> &DMatrix<T> {
        &self.upsilon_inv
    }

    /// `E_q[Ω⁻¹] = ω Υ⁻¹`, the prior precision seen by every local factor.
    pub fn omega_inv_mean(&self) -> DMatrix<T> {
        &self.upsilon_inv * self.omega
    }

    /// Replaces Υ and refreshes Υ⁻¹. Returns `true` if a diagonal jitter was
    /// needed to factorize it.
    pub fn set_upsilon(&mut self, upsilon: DMatrix<T>) -> Result<bool> {
        let upsilon = linalg::symmetrize(&upsilon);
        let (chol, jittered) = linalg::cholesky_jittered(&upsilon, "Upsilon")?;
        self.upsilon_inv = linalg::symmetrize(&chol.inverse());
        self.upsilon = upsilon;
        Ok(jittered)
    }

    /// Monitored vector `[μ_ζ, diag(Υ), c]` used by the stopping rule.
    pub fn monitored(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(3 * self.dim());
        v.extend(self.mu_zeta.iter().copied());
        v.extend(self.upsilon.diagonal().iter().copied());
        v.extend(self.c.iter().copied());
        v
    }
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct GlobalRecord<T: Scalar> {
    #[serde(with = "serde_mat::vector")]
    mu_zeta: DVector<T>,
    #[serde(with = "serde_mat::matrix")]
    sigma_zeta: DMatrix<T>,
    omega: T,
    #[serde(with = "serde_mat::matrix")]
    upsilon: DMatrix<T>,
    #[serde(with = "serde_mat::vector")]
    b: DVector<T>,
    #[serde(with = "serde_mat::vector")]
    c: DVector<T>,
}

impl<T: Scalar> From<GlobalVarParams<T>> for GlobalRecord<T> {
    fn from(g: GlobalVarParams<T>) -> Self {
        GlobalRecord {
            mu_zeta: g.mu_zeta,
            sigma_zeta: g.sigma_zeta,
            omega: g.omega,
            upsilon: g.upsilon,
            b: g.b,
            c: g.c,
        }
    }
}

impl<T: Scalar> TryFrom<GlobalRecord<T>> for GlobalVarParams<T> {
    type Error = String;

    fn try_from(r: GlobalRecord<T>) -> std::result::Result<Self, String> {
        let k = r.mu_zeta.len();
        if r.sigma_zeta.shape() != (k, k) || r.upsilon.shape() != (k, k) || r.b.len() != k || r.c.len() != k {
            return Err("global parameter dimensions disagree".into());
        }
        if !linalg::is_spd(&r.sigma_zeta) {
            return Err("Sigma_zeta is not symmetric positive definite".into());
        }
        if !linalg::is_spd(&r.upsilon) {
            return Err("Upsilon is not symmetric positive definite".into());
        }
        if r.c.iter().any(|&c| !(c > T::zero())) {
            return Err("c must be strictly positive".into());
        }
        let upsilon_inv = linalg::spd_inverse(&r.upsilon, "Upsilon").map_err(|e| e.to_string())?;
        Ok(GlobalVarParams {
            mu_zeta: r.mu_zeta,
            sigma_zeta: r.sigma_zeta,
            omega: r.omega,
            upsilon: r.upsilon,
            b: r.b,
            c: r.c,
            upsilon_inv,
        })
    }
}

/// `q(β_h) = N(μ_h, Σ_h)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LocalVarParams<T: Scalar> {
    #[serde(with = "serde_mat::vector")]
    pub mu: DVector<T>,
    #[serde(with = "serde_mat::matrix")]
    pub sigma: DMatrix<T>,
}

impl<T: Scalar> LocalVarParams<T> {
    /// Starting point μ_h = 0, Σ_h = 0.01 I.
    pub fn initial(k: usize) -> Self {
        LocalVarParams {
            mu: DVector::zeros(k),
            sigma: DMatrix::identity(k, k) * T::c(0.01),
        }
    }
}

/// A full parameter configuration θ = {β₁…β_H, ζ, Ω, a}.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar> {
    pub betas: Vec<DVector<T>>,
    pub zeta: DVector<T>,
    pub omega: DMatrix<T>,
    pub a: DVector<T>,
}

fn check_finite<T: Scalar>(values: impl IntoIterator<Item = T>, what: &str) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("non-finite {what}")))
    }
}

/// Choice probabilities at coefficients `beta`, via a max-shifted log-sum-exp.
pub fn choice_probabilities<T: Scalar>(x: &DMatrix<T>, beta: &DVector<T>) -> Result<DVector<T>> {
    if x.ncols() != beta.len() {
        return Err(Error::invalid(format!(
            "covariates have {} columns but beta has {} entries",
            x.ncols(),
            beta.len()
        )));
    }
    check_finite(x.iter().copied(), "covariate")?;
    check_finite(beta.iter().copied(), "coefficient")?;
    let mut eta = vec![T::zero(); x.nrows()];
    linalg::utilities_into(x, beta, &mut eta);
    let mut p = vec![T::zero(); x.nrows()];
    linalg::softmax_into(&eta, &mut p);
    Ok(DVector::from_vec(p))
}

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

/// `Σ_t [x_{t,y_t} β − logsumexp_j(x_tj β)]`.
pub fn log_likelihood_agent<T: Scalar>(agent: &AgentData<T>, beta: &DVector<T>) -> T {
    let mut eta = Vec::new();
    let mut acc = T::zero();
    for ev in &agent.events {
        eta.resize(ev.x.nrows(), T::zero());
        linalg::utilities_into(&ev.x, beta, &mut eta);
        let lse = linalg::log_sum_exp(&eta);
        let log_p = eta[ev.chosen] - lse;
        acc += if log_p.is_finite() { log_p } else { T::c(PROB_FLOOR).ln() };
    }
    acc
}

/// Local objective `f(β) = loglik(β) − (ω/2)(β − μ_ζ)ᵀ Υ⁻¹ (β − μ_ζ)`.
pub fn f_beta<T: Scalar>(beta: &DVector<T>, agent: &AgentData<T>, global: &GlobalVarParams<T>) -> T {
    let d = beta - &global.mu_zeta;
    let quad = d.dot(&(global.upsilon_inv() * &d)) * global.omega();
    log_likelihood_agent(agent, beta) - quad * T::c(0.5)
}

/// Value and gradient of [`f_beta`] without forming the Hessian.
pub fn f_and_gradient<T: Scalar>(
    beta: &DVector<T>,
    agent: &AgentData<T>,
    global: &GlobalVarParams<T>,
) -> (T, DVector<T>) {
    let k = beta.len();
    let d = beta - &global.mu_zeta;
    let prec_d = global.upsilon_inv() * &d * global.omega();
    let mut value = -d.dot(&prec_d) * T::c(0.5);
    let mut grad = -prec_d;
    let mut eta = Vec::new();
    let mut p = Vec::new();
    for ev in &agent.events {
        let j = ev.x.nrows();
        eta.resize(j, T::zero());
        p.resize(j, T::zero());
        linalg::utilities_into(&ev.x, beta, &mut eta);
        let lse = linalg::softmax_into(&eta, &mut p);
        value += eta[ev.chosen] - lse;
        for kk in 0..k {
            let expected = p.iter().enumerate().fold(T::zero(), |acc, (jj, pj)| acc + *pj * ev.x[(jj, kk)]);
            grad[kk] += ev.x[(ev.chosen, kk)] - expected;
        }
    }
    (value, grad)
}

/// Sum over events of the softmax curvature `xᵀ(diag p − p pᵀ)x` at `beta`.
pub fn likelihood_curvature<T: Scalar>(agent: &AgentData<T>, beta: &DVector<T>) -> DMatrix<T> {
    let k = beta.len();
    let mut acc = DMatrix::zeros(k, k);
    let mut eta = Vec::new();
    let mut p = Vec::new();
    for ev in &agent.events {
        eta.resize(ev.x.nrows(), T::zero());
        p.resize(ev.x.nrows(), T::zero());
        linalg::utilities_into(&ev.x, beta, &mut eta);
        linalg::softmax_into(&eta, &mut p);
        acc += linalg::softmax_curvature(&ev.x, &p);
    }
    acc
}

/// Gradient `Σ_t x_tᵀ(y_t − p_t) − ωΥ⁻¹(β − μ_ζ)` and Hessian
/// `−Σ_t x_tᵀ(diag p_t − p_t p_tᵀ)x_t − ωΥ⁻¹` of [`f_beta`].
pub fn grad_hess_f<T: Scalar>(
    beta: &DVector<T>,
    agent: &AgentData<T>,
    global: &GlobalVarParams<T>,
) -> (DVector<T>, DMatrix<T>) {
    let (_, grad) = f_and_gradient(beta, agent, global);
    let hess = -(likelihood_curvature(agent, beta) + global.omega_inv_mean());
    (grad, hess)
}

/// Second-order (delta-method) approximation of `E_q[logsumexp_j(x_j β)]`
/// under `β ~ N(μ, Σ)`:
/// `logsumexp(x μ) + ½ tr{xᵀ(diag ρ − ρρᵀ)x Σ}` with ρ the softmax at μ.
pub fn delta_expectation<T: Scalar>(local: &LocalVarParams<T>, x: &DMatrix<T>) -> T {
    let mut eta = vec![T::zero(); x.nrows()];
    let mut rho = vec![T::zero(); x.nrows()];
    linalg::utilities_into(x, &local.mu, &mut eta);
    let lse = linalg::softmax_into(&eta, &mut rho);
    let curv = linalg::softmax_curvature(x, &rho);
    lse + (curv * &local.sigma).trace() * T::c(0.5)
}

/// `log p(y, θ)` with all normalizing constants.
pub fn log_joint<T: Scalar>(
    agents: &[AgentData<T>],
    params: &ModelParams<T>,
    priors: &Hyperpriors<T>,
) -> Result<T> {
    let k = priors.dim();
    if params.betas.len() != agents.len() {
        return Err(Error::invalid("one coefficient vector per agent required"));
    }
    if params.zeta.len() != k || params.omega.shape() != (k, k) || params.a.len() != k {
        return Err(Error::invalid("parameter dimensions disagree with priors"));
    }
    if params.a.iter().any(|&a| !(a > T::zero())) {
        return Err(Error::invalid("a must be strictly positive"));
    }
    if !linalg::is_spd(&params.omega) {
        return Err(Error::invalid("Omega must be symmetric positive definite"));
    }
    let kf = T::from_usize_lossy(k);
    let half = T::c(0.5);
    let mut acc = T::zero();
    for (agent, beta) in agents.iter().zip(&params.betas) {
        acc += log_likelihood_agent(agent, beta);
        acc += densities::log_normal_pdf(beta, &params.zeta, &params.omega)?;
    }
    acc += densities::log_normal_pdf(&params.zeta, &priors.mu0, &priors.sigma0)?;
    let prior_scale = DMatrix::from_diagonal(&params.a.map(|a| T::c(2.0) * priors.nu / a));
    acc += densities::log_inverse_wishart_pdf(&params.omega, priors.nu + kf - T::one(), &prior_scale)?;
    for (&a, &big_a) in params.a.iter().zip(priors.a_scale.iter()) {
        acc += densities::log_inverse_gamma_pdf(a, half, T::one() / (big_a * big_a));
    }
    Ok(acc)
}
