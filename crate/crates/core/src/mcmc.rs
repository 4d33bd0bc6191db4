//! Metropolis-within-Gibbs reference sampler.
//!
//! Each scan updates every `β_h` by a Gaussian random-walk Metropolis step
//! with proposal covariance `(s_h²/K)(H_h + Ω⁻¹)⁻¹`, where `H_h` is the
//! agent's likelihood curvature at the pooled logit estimate, then draws ζ, Ω
//! and a from their exact conditionals. Chains run in
//! parallel; every agent in every chain owns a persistent RNG stream.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{self, AgentData, ChoiceDataset, Hyperpriors};
use crate::rng::{self, Purpose, StreamRng};
use crate::scalar::Scalar;

pub const TARGET_ACCEPTANCE: f64 = 0.234;
const ADAPT_BATCH: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub chains: usize,
    pub iterations: usize,
    pub thin: usize,
    /// Fraction of each chain discarded as burn-in.
    pub burn_in: f64,
    /// Starting value of `s_h`, tuned per agent during burn-in.
    pub initial_scale: f64,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            chains: 4,
            iterations: 10_000,
            thin: 2,
            burn_in: 0.5,
            initial_scale: 2.38,
            seed: 0,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.iterations == 0 || self.thin == 0 {
            return Err(Error::invalid("chains, iterations and thin must be positive"));
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return Err(Error::invalid("burn-in fraction must lie in [0, 1)"));
        }
        if !(self.initial_scale > 0.0) {
            return Err(Error::invalid("random-walk scale must be positive"));
        }
        Ok(())
    }

    /// Iterations kept after burn-in, before thinning.
    pub fn post_burn_in(&self) -> usize {
        (self.iterations as f64 * (1.0 - self.burn_in)).floor() as usize
    }

    /// Retained draws per chain: `⌊⌊iters·(1 − burn_in)⌋ / thin⌋`.
    pub fn retained_per_chain(&self) -> usize {
        self.post_burn_in() / self.thin
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ChainDraws<T: Scalar> {
    #[serde(with = "crate::serde_mat::vector_vec")]
    pub zeta: Vec<DVector<T>>,
    #[serde(with = "crate::serde_mat::matrix_vec")]
    pub omega: Vec<DMatrix<T>>,
    #[serde(with = "crate::serde_mat::vector_vec")]
    pub a: Vec<DVector<T>>,
    /// Posterior mean of each `β_h` over the retained draws.
    #[serde(with = "crate::serde_mat::vector_vec")]
    pub beta_mean: Vec<DVector<T>>,
    /// Acceptance rate of each agent's Metropolis step after burn-in.
    pub acceptance: Vec<f64>,
    /// Frozen proposal multiplier of each agent.
    pub scales: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PosteriorDraws<T: Scalar> {
    pub config: McmcConfig,
    pub chains: Vec<ChainDraws<T>>,
}

impl<T: Scalar> PosteriorDraws<T> {
    pub fn total_draws(&self) -> usize {
        self.chains.iter().map(|c| c.zeta.len()).sum()
    }

    pub fn dim(&self) -> usize {
        self.chains.first().and_then(|c| c.zeta.first()).map_or(0, |z| z.len())
    }

    /// All `(ζ, Ω)` draws, chain by chain.
    pub fn pooled(&self) -> Vec<(&DVector<T>, &DMatrix<T>)> {
        self.chains
            .iter()
            .flat_map(|c| c.zeta.iter().zip(&c.omega))
            .collect()
    }

    pub fn zeta_mean(&self) -> DVector<T> {
        let k = self.dim();
        let mut acc = DVector::zeros(k);
        let mut n = 0usize;
        for c in &self.chains {
            for z in &c.zeta {
                acc += z;
                n += 1;
            }
        }
        acc / T::from_usize_lossy(n.max(1))
    }

    pub fn zeta_sd(&self) -> DVector<T> {
        let mean = self.zeta_mean();
        let mut acc = DVector::zeros(mean.len());
        let mut n = 0usize;
        for c in &self.chains {
            for z in &c.zeta {
                acc += (z - &mean).map(|v| v * v);
                n += 1;
            }
        }
        (acc / T::from_usize_lossy(n.saturating_sub(1).max(1))).map(|v| v.sqrt())
    }

    /// Per-chain series of every monitored scalar: ζ, vech(Ω), a.
    pub fn named_series(&self) -> Vec<(String, Vec<Vec<f64>>)> {
        let k = self.dim();
        let mut out = Vec::new();
        for i in 0..k {
            out.push((
                format!("zeta{}", i + 1),
                self.chains.iter().map(|c| c.zeta.iter().map(|z| z[i].as_f64()).collect()).collect(),
            ));
        }
        for i in 0..k {
            for j in 0..=i {
                out.push((
                    format!("omega{}_{}", i + 1, j + 1),
                    self.chains.iter().map(|c| c.omega.iter().map(|o| o[(i, j)].as_f64()).collect()).collect(),
                ));
            }
        }
        for i in 0..k {
            out.push((
                format!("a{}", i + 1),
                self.chains.iter().map(|c| c.a.iter().map(|a| a[i].as_f64()).collect()).collect(),
            ));
        }
        out
    }

    /// Gelman–Rubin factor for every monitored scalar.
    pub fn psrf(&self) -> Result<Vec<(String, f64)>> {
        self.named_series()
            .into_iter()
            .map(|(name, chains)| Ok((name, gelman_rubin(&chains)?)))
            .collect()
    }

    /// One row per retained draw: chain, draw, ζ, vech(Ω), a.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let series = self.named_series();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["chain".to_string(), "draw".to_string()];
        header.extend(series.iter().map(|(n, _)| n.clone()));
        w.write_record(&header)?;
        for (c, chain) in self.chains.iter().enumerate() {
            for d in 0..chain.zeta.len() {
                let mut row = vec![c.to_string(), d.to_string()];
                row.extend(series.iter().map(|(_, s)| s[c][d].to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean and covariance of `ζ | β, Ω`: `P = Σ₀⁻¹ + HΩ⁻¹`,
/// mean `P⁻¹(Σ₀⁻¹μ₀ + Ω⁻¹Σβ_h)`.
pub fn zeta_conditional<T: Scalar>(
    betas: &[DVector<T>],
    omega: &DMatrix<T>,
    priors: &Hyperpriors<T>,
) -> Result<(DVector<T>, DMatrix<T>)> {
    let (mean, chol) = zeta_conditional_chol(betas, omega, priors)?;
    Ok((mean, linalg::symmetrize(&chol.inverse())))
}

fn zeta_conditional_chol<T: Scalar>(
    betas: &[DVector<T>],
    omega: &DMatrix<T>,
    priors: &Hyperpriors<T>,
) -> Result<(DVector<T>, nalgebra::Cholesky<T, nalgebra::Dyn>)> {
    let omega_inv = linalg::spd_inverse(omega, "Omega")?;
    let sigma0_inv = priors.sigma0_inv()?;
    let mut sum = DVector::zeros(priors.dim());
    for b in betas {
        sum += b;
    }
    let precision = linalg::symmetrize(&(&sigma0_inv + &omega_inv * T::from_usize_lossy(betas.len())));
    let chol = linalg::cholesky(&precision, "zeta conditional precision")?;
    let mean = chol.solve(&(&sigma0_inv * &priors.mu0 + &omega_inv * sum));
    Ok((mean, chol))
}

pub fn gibbs_zeta<T: Scalar, R: Rng + ?Sized>(
    betas: &[DVector<T>],
    omega: &DMatrix<T>,
    priors: &Hyperpriors<T>,
    rng: &mut R,
) -> Result<DVector<T>> {
    let (mean, chol) = zeta_conditional_chol(betas, omega, priors)?;
    Ok(linalg::sample_from_precision(&mean, &chol, rng))
}

/// Inverse-Wishart draw `IW(df, S)` via the Bartlett factor of
/// `Ω⁻¹ ~ Wishart(df, S⁻¹)`.
pub fn sample_inverse_wishart<T: Scalar, R: Rng + ?Sized>(
    df: T,
    scale: &DMatrix<T>,
    rng: &mut R,
) -> Result<DMatrix<T>> {
    let k = scale.nrows();
    if !(df > T::from_usize_lossy(k) - T::one()) {
        return Err(Error::invalid("inverse-Wishart degrees of freedom must exceed K - 1"));
    }
    let scale_inv = linalg::spd_inverse(scale, "inverse-Wishart scale")?;
    let l = linalg::cholesky(&scale_inv, "inverse-Wishart scale")?.l();
    let mut a = DMatrix::zeros(k, k);
    for i in 0..k {
        // χ²_ν = 2·Gamma(ν/2)
        let nu = df - T::from_usize_lossy(i);
        a[(i, i)] = (T::gamma(nu * T::c(0.5), rng) * T::c(2.0)).sqrt();
        for j in 0..i {
            a[(i, j)] = T::standard_normal(rng);
        }
    }
    let la = l * a;
    // Ω = (LA)⁻ᵀ(LA)⁻¹, computed from the triangular factor.
    let la_inv = la
        .solve_lower_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| Error::numerical("inverse-Wishart draw", "singular Bartlett factor"))?;
    Ok(linalg::symmetrize(&(la_inv.transpose() * la_inv)))
}

/// Degrees of freedom and scale of `Ω | β, ζ, a`:
/// `IW(H + ν + K − 1, Σ(β_h − ζ)(β_h − ζ)ᵀ + 2ν diag(1/a))`.
pub fn omega_conditional<T: Scalar>(
    betas: &[DVector<T>],
    zeta: &DVector<T>,
    a: &DVector<T>,
    priors: &Hyperpriors<T>,
) -> (T, DMatrix<T>) {
    let k = priors.dim();
    let two_nu = T::c(2.0) * priors.nu;
    let mut scale = DMatrix::from_diagonal(&a.map(|v| two_nu / v));
    for b in betas {
        let d = b - zeta;
        scale += &d * d.transpose();
    }
    let df = T::from_usize_lossy(betas.len()) + priors.nu + T::from_usize_lossy(k) - T::one();
    (df, linalg::symmetrize(&scale))
}

pub fn gibbs_omega<T: Scalar, R: Rng + ?Sized>(
    betas: &[DVector<T>],
    zeta: &DVector<T>,
    a: &DVector<T>,
    priors: &Hyperpriors<T>,
    rng: &mut R,
) -> Result<DMatrix<T>> {
    let (df, scale) = omega_conditional(betas, zeta, a, priors);
    sample_inverse_wishart(df, &scale, rng)
}

/// Shapes and rates of `a_k | Ω ~ IG((ν + K)/2, ν(Ω⁻¹)_kk + A_k⁻²)`.
pub fn a_conditional<T: Scalar>(omega: &DMatrix<T>, priors: &Hyperpriors<T>) -> Result<(T, DVector<T>)> {
    let k = priors.dim();
    let omega_inv = linalg::spd_inverse(omega, "Omega")?;
    let shape = (priors.nu + T::from_usize_lossy(k)) * T::c(0.5);
    let rate = DVector::from_fn(k, |i, _| {
        let big_a = priors.a_scale[i];
        priors.nu * omega_inv[(i, i)] + T::one() / (big_a * big_a)
    });
    Ok((shape, rate))
}

pub fn gibbs_a<T: Scalar, R: Rng + ?Sized>(
    omega: &DMatrix<T>,
    priors: &Hyperpriors<T>,
    rng: &mut R,
) -> Result<DVector<T>> {
    let (shape, rate) = a_conditional(omega, priors)?;
    Ok(rate.map(|r| r / T::gamma(shape, rng)))
}

/// `log p(y_h | β) + log N(β | ζ, Ω)` up to a constant, with `Ω⁻¹` given.
fn beta_log_target<T: Scalar>(agent: &AgentData<T>, beta: &DVector<T>, zeta: &DVector<T>, omega_inv: &DMatrix<T>) -> T {
    let d = beta - zeta;
    model::log_likelihood_agent(agent, beta) - d.dot(&(omega_inv * &d)) * T::c(0.5)
}

/// One random-walk Metropolis step `β' = β + scale · v`,
/// `v ~ N(0, (curvature + Ω⁻¹)⁻¹)`.
pub fn rw_metropolis_beta<T: Scalar, R: Rng + ?Sized>(
    agent: &AgentData<T>,
    beta: &DVector<T>,
    zeta: &DVector<T>,
    omega: &DMatrix<T>,
    curvature: &DMatrix<T>,
    scale: f64,
    rng: &mut R,
) -> Result<(DVector<T>, bool)> {
    let omega_inv = linalg::spd_inverse(omega, "Omega")?;
    let chol = linalg::cholesky(&linalg::symmetrize(&(curvature + &omega_inv)), "proposal precision")?;
    Ok(rw_step(agent, beta, zeta, &omega_inv, &chol, T::c(scale), rng))
}

fn rw_step<T: Scalar, R: Rng + ?Sized>(
    agent: &AgentData<T>,
    beta: &DVector<T>,
    zeta: &DVector<T>,
    omega_inv: &DMatrix<T>,
    proposal_chol: &nalgebra::Cholesky<T, nalgebra::Dyn>,
    scale: T,
    rng: &mut R,
) -> (DVector<T>, bool) {
    let step = linalg::sample_from_precision(&DVector::zeros(beta.len()), proposal_chol, rng);
    let proposal = beta + step * scale;
    let log_ratio = beta_log_target(agent, &proposal, zeta, omega_inv) - beta_log_target(agent, beta, zeta, omega_inv);
    let u: T = T::open_unit(rng);
    if u.ln() < log_ratio {
        (proposal, true)
    } else {
        (beta.clone(), false)
    }
}

/// Likelihood curvature of every agent at the maximizer of the pooled
/// (homogeneous) logit likelihood, with a small ridge to keep the maximizer
/// finite under separation.
pub fn pooled_curvatures<T: Scalar>(dataset: &ChoiceDataset<T>) -> Vec<DMatrix<T>> {
    let k = dataset.n_covariates();
    let ridge = T::c(1e-4);
    let eval = |b: &DVector<T>| {
        let mut value = b.norm_squared() * ridge * T::c(0.5);
        let mut grad = b * ridge;
        let mut eta = Vec::new();
        let mut p = Vec::new();
        for agent in dataset.agents() {
            for ev in &agent.events {
                eta.resize(ev.x.nrows(), T::zero());
                p.resize(ev.x.nrows(), T::zero());
                linalg::utilities_into(&ev.x, b, &mut eta);
                let lse = linalg::softmax_into(&eta, &mut p);
                value += lse - eta[ev.chosen];
                for (j, pj) in p.iter().enumerate() {
                    let w = if j == ev.chosen { *pj - T::one() } else { *pj };
                    grad += ev.x.row(j).transpose() * w;
                }
            }
        }
        (value, grad)
    };
    let fit = crate::local::bfgs_minimize(eval, DVector::zeros(k), &crate::local::BfgsOptions::default());
    dataset
        .agents()
        .iter()
        .map(|a| model::likelihood_curvature(a, &fit.x))
        .collect()
}

struct AgentChain<T: Scalar> {
    beta: DVector<T>,
    log_scale: f64,
    rng: StreamRng,
    batch_accepts: usize,
    post_accepts: usize,
    adapt_rounds: usize,
    beta_sum: DVector<T>,
}

fn run_chain<T: Scalar>(
    dataset: &ChoiceDataset<T>,
    priors: &Hyperpriors<T>,
    cfg: &McmcConfig,
    chain: usize,
) -> Result<ChainDraws<T>> {
    let k = priors.dim();
    let h = dataset.n_agents();
    let mut grng = rng::stream(cfg.seed, Purpose::McmcChain, chain as u64, 0);
    let mut zeta = DVector::from_fn(k, |_, _| T::standard_normal(&mut grng));
    let mut omega = DMatrix::identity(k, k);
    let mut a = DVector::from_element(k, T::one());
    let init_scale = cfg.initial_scale / (k as f64).sqrt();
    let curvatures = pooled_curvatures(dataset);
    let mut agents: Vec<AgentChain<T>> = (0..h)
        .map(|i| AgentChain {
            beta: zeta.clone(),
            log_scale: init_scale.ln(),
            rng: rng::stream(cfg.seed, Purpose::McmcAgent, chain as u64, i as u64),
            batch_accepts: 0,
            post_accepts: 0,
            adapt_rounds: 0,
            beta_sum: DVector::zeros(k),
        })
        .collect();

    let post = cfg.post_burn_in();
    let burn = cfg.iterations - post;
    let keep = cfg.retained_per_chain();
    let mut out = ChainDraws {
        zeta: Vec::with_capacity(keep),
        omega: Vec::with_capacity(keep),
        a: Vec::with_capacity(keep),
        beta_mean: Vec::new(),
        acceptance: Vec::new(),
        scales: Vec::new(),
    };

    for it in 0..cfg.iterations {
        let omega_inv = linalg::spd_inverse(&omega, "Omega")?;
        let burning = it < burn;
        for ((ag, data), curv) in agents.iter_mut().zip(dataset.agents()).zip(&curvatures) {
            let precision = linalg::symmetrize(&(curv + &omega_inv));
            let chol = linalg::cholesky(&precision, "proposal precision")?;
            let (b, acc) = rw_step(data, &ag.beta, &zeta, &omega_inv, &chol, T::c(ag.log_scale.exp()), &mut ag.rng);
            ag.beta = b;
            if acc {
                if burning {
                    ag.batch_accepts += 1;
                } else {
                    ag.post_accepts += 1;
                }
            }
        }
        if burning && (it + 1) % ADAPT_BATCH == 0 {
            for ag in agents.iter_mut() {
                let rate = ag.batch_accepts as f64 / ADAPT_BATCH as f64;
                ag.adapt_rounds += 1;
                let step = (1.0 / (ag.adapt_rounds as f64).sqrt()).min(1.0);
                ag.log_scale += 2.0 * step * (rate - TARGET_ACCEPTANCE);
                ag.batch_accepts = 0;
            }
        }
        let betas: Vec<DVector<T>> = agents.iter().map(|ag| ag.beta.clone()).collect();
        zeta = gibbs_zeta(&betas, &omega, priors, &mut grng)?;
        omega = gibbs_omega(&betas, &zeta, &a, priors, &mut grng)?;
        a = gibbs_a(&omega, priors, &mut grng)?;

        if !burning {
            let idx = it - burn;
            for ag in agents.iter_mut() {
                ag.beta_sum += &ag.beta;
            }
            if (idx + 1).is_multiple_of(cfg.thin) {
                out.zeta.push(zeta.clone());
                out.omega.push(omega.clone());
                out.a.push(a.clone());
            }
        }
    }
    let denom = post.max(1);
    out.beta_mean = agents
        .iter()
        .map(|ag| &ag.beta_sum / T::from_usize_lossy(denom))
        .collect();
    out.acceptance = agents
        .iter()
        .map(|ag| ag.post_accepts as f64 / denom as f64)
        .collect();
    out.scales = agents.iter().map(|ag| ag.log_scale.exp()).collect();
    Ok(out)
}

/// Runs `cfg.chains` independent chains in parallel.
pub fn run_chains<T: Scalar>(
    dataset: &ChoiceDataset<T>,
    priors: &Hyperpriors<T>,
    cfg: &McmcConfig,
) -> Result<PosteriorDraws<T>> {
    cfg.validate()?;
    priors.validate()?;
    if priors.dim() != dataset.n_covariates() {
        return Err(Error::invalid("priors and data disagree on K"));
    }
    let chains = (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_chain(dataset, priors, cfg, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorDraws {
        config: cfg.clone(),
        chains,
    })
}

/// Potential scale reduction factor of equally long chains.
pub fn gelman_rubin(chains: &[Vec<f64>]) -> Result<f64> {
    let m = chains.len();
    if m < 2 {
        return Err(Error::invalid("Gelman-Rubin needs at least two chains"));
    }
    let n = chains[0].len();
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::invalid("chains differ in length"));
    }
    if n < 4 {
        return Err(Error::invalid("chains must have at least 4 draws"));
    }
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / nf).collect();
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = nf / (m as f64 - 1.0) * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m as f64;
    if w == 0.0 {
        return Ok(if b == 0.0 { 1.0 } else { f64::INFINITY });
    }
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    Ok((var_plus / w).sqrt())
}
