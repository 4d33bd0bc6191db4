//! Stochastic variational inference with adaptive minibatch sizes.
//!
//! Each stochastic iteration optimizes the local factors of a random
//! minibatch `B`, then moves q(ζ) and q(Ω) a step `α_{|B|}` towards their
//! minibatch estimates. The minibatch grows by a factor κ whenever the
//! smallest "ratio of progress and path" over `μ_ζ` and `diag Υ` falls below
//! `Φ_{|B|}`. Once `|B| = H` the run continues as ordinary batch sweeps.

use std::collections::VecDeque;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::batch::{self, Engine, FitResult, Phase, StopConfig, TraceRecord, XiMonitor};
use crate::conjugate;
use crate::error::{Error, Result};
use crate::local::BackendKind;
use crate::model::{ChoiceDataset, GlobalVarParams, Hyperpriors, LocalVarParams};
use crate::rng::{self, Purpose};
use crate::scalar::Scalar;

/// Stepsize rule for the stochastic phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    /// `α_{|B|}` rises linearly from the initial value at the initial batch
    /// size to 1 at `|B| = H`; constant while `|B|` is unchanged.
    Linear,
    /// A fixed stepsize.
    Constant { alpha: f64 },
    /// `α_l = d / (l + D)^γ` on the stochastic iteration counter, capped at 1.
    RobbinsMonro { d: f64, offset: f64, gamma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SviConfig {
    pub initial_batch: usize,
    pub initial_alpha: f64,
    pub initial_phi: f64,
    pub kappa: f64,
    /// History window `M` of the progress ratio.
    pub history: usize,
    /// Ratios are evaluated only once `l` exceeds this many iterations.
    pub ratio_warmup: usize,
    /// Largest minibatch; `None` means `H`.
    pub batch_cap: Option<usize>,
    pub ncvmp_inner_tol: f64,
    pub ncvmp_inner_max: usize,
    pub schedule: StepSchedule,
    /// Safety limit on stochastic iterations before switching to batch sweeps.
    pub max_stochastic_iterations: usize,
}

impl Default for SviConfig {
    fn default() -> Self {
        SviConfig {
            initial_batch: 25,
            initial_alpha: 0.4,
            initial_phi: 0.4,
            kappa: 4.0,
            history: 20,
            ratio_warmup: 5,
            batch_cap: None,
            ncvmp_inner_tol: 0.1,
            ncvmp_inner_max: 3,
            schedule: StepSchedule::Linear,
            max_stochastic_iterations: 5000,
        }
    }
}

impl SviConfig {
    pub fn validate(&self, n_agents: usize) -> Result<()> {
        if self.initial_batch == 0 {
            return Err(Error::invalid("initial batch size must be at least 1"));
        }
        if let Some(cap) = self.batch_cap {
            if cap == 0 || cap < self.initial_batch.min(n_agents) {
                return Err(Error::invalid("batch cap must be at least the initial batch size"));
            }
        }
        if !(self.initial_alpha > 0.0 && self.initial_alpha <= 1.0) {
            return Err(Error::invalid("initial alpha must lie in (0, 1]"));
        }
        if !(self.initial_phi > 0.0 && self.initial_phi <= 1.0) {
            return Err(Error::invalid("initial phi must lie in (0, 1]"));
        }
        if !(self.kappa > 1.0) {
            return Err(Error::invalid("kappa must exceed 1"));
        }
        if self.history < 2 {
            return Err(Error::invalid("ratio history must hold at least 2 iterations"));
        }
        match self.schedule {
            StepSchedule::Constant { alpha } if !(alpha > 0.0 && alpha <= 1.0) => {
                Err(Error::invalid("constant alpha must lie in (0, 1]"))
            }
            StepSchedule::RobbinsMonro { d, offset, gamma } if !(d > 0.0 && offset >= 0.0 && gamma > 0.5 && gamma <= 1.0) => {
                Err(Error::invalid("Robbins-Monro schedule needs d > 0, D >= 0, 0.5 < gamma <= 1"))
            }
            _ => Ok(()),
        }
    }

    fn alpha(&self, batch: usize, n_agents: usize, stochastic_iteration: usize) -> f64 {
        match self.schedule {
            StepSchedule::Linear => schedule_from(batch, n_agents, self.initial_alpha, self.initial_batch),
            StepSchedule::Constant { alpha } => alpha,
            StepSchedule::RobbinsMonro { d, offset, gamma } => {
                (d / (stochastic_iteration as f64 + offset).powf(gamma)).min(1.0)
            }
        }
    }

    fn phi(&self, batch: usize, n_agents: usize) -> f64 {
        schedule_from(batch, n_agents, self.initial_phi, self.initial_batch)
    }
}

/// `initial + (1 − initial)(|B| − 25)/(H − 25)`, clamped to `initial` below
/// 25 and equal to 1 at `|B| = H`.
pub fn schedule(batch: usize, n_agents: usize, initial: f64) -> f64 {
    schedule_from(batch, n_agents, initial, 25)
}

fn schedule_from(batch: usize, n_agents: usize, initial: f64, base: usize) -> f64 {
    if batch >= n_agents {
        return 1.0;
    }
    if batch <= base || n_agents <= base {
        return initial;
    }
    initial + (1.0 - initial) * (batch - base) as f64 / (n_agents - base) as f64
}

/// `|λ_first − λ_last| / Σ |λ_r − λ_{r+1}|` over the last `m + 1` values of
/// `history` (all of them when fewer are stored). A path with no movement
/// counts as monotone and returns 1.
pub fn progress_ratio(history: &[f64], m: usize) -> f64 {
    let start = history.len().saturating_sub(m + 1);
    let w = &history[start..];
    if w.len() < 2 {
        return 1.0;
    }
    let path: f64 = w.windows(2).map(|p| (p[1] - p[0]).abs()).sum();
    if path == 0.0 {
        return 1.0;
    }
    ((w[0] - w[w.len() - 1]).abs() / path).min(1.0)
}

/// Recent values of `[μ_ζ, diag Υ]` since the last batch-size change.
#[derive(Debug, Clone)]
pub struct RatioHistory {
    m: usize,
    values: VecDeque<Vec<f64>>,
    /// Iterations since the last batch-size change.
    pub l: usize,
}

impl RatioHistory {
    /// Starts a history whose anchor (index 0) is `current`.
    pub fn new(m: usize, current: Vec<f64>) -> Self {
        let mut values = VecDeque::with_capacity(m + 1);
        values.push_back(current);
        RatioHistory { m, values, l: 0 }
    }

    pub fn push(&mut self, v: Vec<f64>) {
        if self.values.len() == self.m + 1 {
            self.values.pop_front();
        }
        self.values.push_back(v);
        self.l += 1;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Smallest progress ratio over all monitored coordinates.
    pub fn min_ratio(&self) -> f64 {
        let dims = self.values.front().map_or(0, |v| v.len());
        (0..dims)
            .map(|i| {
                let series: Vec<f64> = self.values.iter().map(|v| v[i]).collect();
                progress_ratio(&series, self.m)
            })
            .fold(1.0, f64::min)
    }

    pub fn reset(&mut self, current: Vec<f64>) {
        self.values.clear();
        self.values.push_back(current);
        self.l = 0;
    }
}

fn ratio_coordinates<T: Scalar>(g: &GlobalVarParams<T>) -> Vec<f64> {
    g.mu_zeta
        .iter()
        .chain(g.upsilon().diagonal().iter())
        .map(|v| v.as_f64())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchDecision {
    Keep { min_ratio: Option<f64> },
    Grow { new_size: usize, min_ratio: f64 },
}

/// Evaluates the progress ratios once `l > ratio_warmup` and grows the
/// minibatch to `min(round(κ|B|), cap)` if the smallest is below `Φ_{|B|}`.
/// The caller resets the history after a growth.
pub fn batch_controller_step(
    history: &RatioHistory,
    cfg: &SviConfig,
    current: usize,
    cap: usize,
    n_agents: usize,
) -> BatchDecision {
    if history.l <= cfg.ratio_warmup || current >= cap {
        return BatchDecision::Keep { min_ratio: None };
    }
    let min_ratio = history.min_ratio();
    if min_ratio < cfg.phi(current, n_agents) {
        let grown = ((cfg.kappa * current as f64).round() as usize).max(current + 1);
        BatchDecision::Grow {
            new_size: grown.min(cap),
            min_ratio,
        }
    } else {
        BatchDecision::Keep {
            min_ratio: Some(min_ratio),
        }
    }
}

/// `size` distinct agent indices drawn uniformly without replacement, sorted.
pub fn sample_minibatch<R: rand::Rng + ?Sized>(rng: &mut R, n_agents: usize, size: usize) -> Vec<usize> {
    let mut batch = index::sample(rng, n_agents, size.min(n_agents)).into_vec();
    batch.sort_unstable();
    batch
}

/// One stochastic natural-gradient step on q(ζ) and q(Ω) from the optimized
/// local factors of a minibatch, followed by the exact q(a) update.
/// Returns the new parameters and whether Υ needed a jitter.
pub fn stochastic_global_update<T: Scalar>(
    global: &GlobalVarParams<T>,
    batch: &[&LocalVarParams<T>],
    priors: &Hyperpriors<T>,
    alpha: T,
    n_agents: usize,
) -> Result<(GlobalVarParams<T>, bool)> {
    if batch.is_empty() {
        return Err(Error::invalid("minibatch is empty"));
    }
    let scale = T::from_usize_lossy(n_agents) / T::from_usize_lossy(batch.len());
    let keep = T::one() - alpha;
    let mut next = global.clone();

    let sigma_zeta = conjugate::zeta_covariance(n_agents, global, priors)?;
    let target_mu = conjugate::zeta_mean_scaled(batch.iter().copied(), scale, &sigma_zeta, global, priors)?;
    next.mu_zeta = &global.mu_zeta * keep + target_mu * alpha;
    next.sigma_zeta = sigma_zeta;

    let spread = conjugate::spread_sum_scaled(batch.iter().copied(), &next.mu_zeta, scale);
    let bracket = conjugate::omega_scale_bracket(&spread, n_agents, &next, priors);
    let upsilon = global.upsilon() * keep + bracket * alpha;
    let jittered = next.set_upsilon(upsilon)?;
    debug_assert!(crate::linalg::min_eigenvalue(next.upsilon()) > T::zero());
    next.c = conjugate::update_a(&next, priors)?;
    Ok((next, jittered))
}

pub fn fit_svi<T: Scalar>(
    dataset: &ChoiceDataset<T>,
    priors: &Hyperpriors<T>,
    backend: BackendKind,
    cfg: &SviConfig,
    stop: &StopConfig,
    seed: u64,
) -> Result<FitResult<T>> {
    stop.validate()?;
    let n = dataset.n_agents();
    cfg.validate(n)?;
    let cap = cfg.batch_cap.unwrap_or(n).min(n);
    let mut size = cfg.initial_batch.min(cap);
    let mut engine = Engine::new(dataset, priors, backend, seed)?;

    if size >= n {
        // Nothing to subsample: the run is the batch algorithm from the start.
        let converged = batch::run_batch_phase(&mut engine, stop, 1, false)?;
        return Ok(engine.finish(converged));
    }

    let mut sampler = rng::stream(seed, Purpose::Minibatch, 0, 0);
    let mut history = RatioHistory::new(cfg.history, ratio_coordinates(&engine.global));
    let mut capped_monitor: Option<XiMonitor> = None;
    let mut iteration = 0;
    let mut converged = false;

    while size < n {
        if iteration >= cfg.max_stochastic_iterations {
            log::warn!(
                "stochastic phase hit {} iterations at |B| = {size}",
                cfg.max_stochastic_iterations
            );
            break;
        }
        iteration += 1;
        let alpha = cfg.alpha(size, n, iteration);
        let batch = sample_minibatch(&mut sampler, n, size);

        match engine.backend {
            BackendKind::Ncvmp => {
                batch::converge_ncvmp(&mut engine, &batch, iteration, cfg.ncvmp_inner_tol, cfg.ncvmp_inner_max)?;
            }
            _ => engine.update_locals(&batch, iteration)?,
        }
        let members: Vec<&LocalVarParams<T>> = batch.iter().map(|&h| &engine.locals[h]).collect();
        let (next, jittered) = stochastic_global_update(&engine.global, &members, priors, T::c(alpha), n)?;
        engine.global = next;
        if jittered {
            engine.diag.jitter_events += 1;
        }
        history.push(ratio_coordinates(&engine.global));

        let xi = capped_monitor.as_mut().map(|m| m.push(engine.monitored_f64()));
        engine.check_divergence(iteration, xi.map(|x| x.0), None)?;

        let decision = batch_controller_step(&history, cfg, size, cap, n);
        let min_ratio = match decision {
            BatchDecision::Keep { min_ratio } => min_ratio,
            BatchDecision::Grow { min_ratio, .. } => Some(min_ratio),
        };
        engine.record(TraceRecord {
            iteration,
            phase: Phase::Stochastic,
            xi: xi.map(|x| x.0),
            min_ratio,
            batch_size: size,
            alpha,
            lower_bound: None,
            elapsed_secs: 0.0,
        });

        if let Some((x, full)) = xi {
            if full && x < stop.xi_threshold {
                converged = true;
                break;
            }
        }
        if let BatchDecision::Grow { new_size, .. } = decision {
            log::info!("iteration {iteration}: minibatch {size} -> {new_size}");
            size = new_size;
            engine.diag.batch_growth.push((iteration, size));
            history.reset(ratio_coordinates(&engine.global));
            if size == cap && cap < n {
                capped_monitor = Some(XiMonitor::new(engine.monitored_f64(), stop.smoothing_window));
            }
        }
    }

    if cap == n && !converged {
        converged = batch::run_batch_phase(&mut engine, stop, iteration + 1, true)?;
    }
    Ok(engine.finish(converged))
}
