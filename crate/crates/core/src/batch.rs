//! Full-batch coordinate ascent: every sweep updates all local factors, then
//! q(ζ), q(Ω) and q(a) in that order, until the relative change of
//! `ϑ = [μ_ζ, diag Υ, c]` drops below a threshold.

use std::collections::VecDeque;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bound::{self, Surrogate};
use crate::conjugate;
use crate::error::{Error, Result};
use crate::local::{self, BackendKind};
use crate::model::{ChoiceDataset, GlobalVarParams, Hyperpriors, LocalVarParams};
use crate::scalar::Scalar;
use crate::serde_mat;

/// Divergence sentinel: ξ, ‖μ_ζ‖ or a single-sweep drop of the lower bound
/// beyond this value aborts the fit.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopConfig {
    pub xi_threshold: f64,
    /// Trailing window over which ϑ is averaged before differencing. Only
    /// used with the SLR backend.
    pub smoothing_window: usize,
    pub max_sweeps: usize,
}

impl Default for StopConfig {
    fn default() -> Self {
        StopConfig {
            xi_threshold: 0.005,
            smoothing_window: 5,
            max_sweeps: 500,
        }
    }
}

impl StopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi_threshold > 0.0) {
            return Err(Error::invalid("xi threshold must be positive"));
        }
        if self.smoothing_window == 0 || self.max_sweeps == 0 {
            return Err(Error::invalid("smoothing window and max sweeps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Stochastic,
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub phase: Phase,
    /// Stopping statistic; absent for stochastic iterations unless the
    /// capped-batch trailing rule is active.
    pub xi: Option<f64>,
    /// Smallest progress ratio, when the batch controller evaluated one.
    pub min_ratio: Option<f64>,
    pub batch_size: usize,
    pub alpha: f64,
    pub lower_bound: Option<f64>,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Times Υ needed a diagonal jitter to factorize.
    pub jitter_events: usize,
    /// SLR draws rejected because P would lose positive definiteness.
    pub slr_rejections: usize,
    /// NCVMP passes over a set of agents (one per sweep, more inside inner loops).
    pub ncvmp_passes: usize,
    /// `(iteration, new batch size)` for every minibatch growth.
    pub batch_growth: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FitResult<T: Scalar> {
    pub backend: BackendKind,
    pub priors: Hyperpriors<T>,
    pub global: GlobalVarParams<T>,
    pub agent_ids: Vec<String>,
    pub locals: Vec<LocalVarParams<T>>,
    pub trace: Vec<TraceRecord>,
    pub diagnostics: Diagnostics,
    pub converged: bool,
    pub seed: u64,
    #[serde(with = "serde_mat::vector_vec")]
    #[serde(default)]
    pub theta_path: Vec<nalgebra::DVector<T>>,
}

impl<T: Scalar> FitResult<T> {
    pub fn iterations(&self) -> usize {
        self.trace.last().map_or(0, |r| r.iteration)
    }

    pub fn final_xi(&self) -> Option<f64> {
        self.trace.iter().rev().find_map(|r| r.xi)
    }
}

/// `max_i |next_i − prev_i| / |prev_i|`, with absolute change for
/// components where `|prev_i| < 1e-12`.
pub fn stopping_statistic(prev: &[f64], next: &[f64]) -> f64 {
    assert_eq!(prev.len(), next.len(), "monitored vectors differ in length");
    prev.iter()
        .zip(next)
        .map(|(&p, &n)| {
            let d = (n - p).abs();
            if p.abs() < 1e-12 {
                d
            } else {
                d / p.abs()
            }
        })
        .fold(0.0, f64::max)
}

/// ϑ history with optional trailing averaging.
#[derive(Debug, Clone)]
pub(crate) struct XiMonitor {
    window: usize,
    raw: VecDeque<Vec<f64>>,
    prev_avg: Vec<f64>,
    seen: usize,
}

impl XiMonitor {
    pub(crate) fn new(initial: Vec<f64>, window: usize) -> Self {
        let mut raw = VecDeque::with_capacity(window);
        raw.push_back(initial.clone());
        XiMonitor {
            window: window.max(1),
            raw,
            prev_avg: initial,
            seen: 0,
        }
    }

    /// Adds the next ϑ and returns `(ξ, window_full)`.
    pub(crate) fn push(&mut self, theta: Vec<f64>) -> (f64, bool) {
        self.seen += 1;
        if self.window == 1 {
            let xi = stopping_statistic(&self.prev_avg, &theta);
            self.prev_avg = theta;
            return (xi, true);
        }
        if self.raw.len() == self.window {
            self.raw.pop_front();
        }
        self.raw.push_back(theta);
        let n = self.raw.len() as f64;
        let mut avg = vec![0.0; self.prev_avg.len()];
        for v in &self.raw {
            for (a, x) in avg.iter_mut().zip(v) {
                *a += x / n;
            }
        }
        let xi = stopping_statistic(&self.prev_avg, &avg);
        self.prev_avg = avg;
        (xi, self.seen >= self.window)
    }
}

/// Mutable state of one fit, shared by the batch and stochastic drivers.
pub(crate) struct Engine<'a, T: Scalar> {
    pub dataset: &'a ChoiceDataset<T>,
    pub priors: &'a Hyperpriors<T>,
    pub backend: BackendKind,
    pub seed: u64,
    pub global: GlobalVarParams<T>,
    pub locals: Vec<LocalVarParams<T>>,
    pub diag: Diagnostics,
    pub trace: Vec<TraceRecord>,
    pub theta_path: Vec<nalgebra::DVector<T>>,
    pub started: Instant,
    last_bound: Option<f64>,
}

impl<'a, T: Scalar> Engine<'a, T> {
    pub(crate) fn new(
        dataset: &'a ChoiceDataset<T>,
        priors: &'a Hyperpriors<T>,
        backend: BackendKind,
        seed: u64,
    ) -> Result<Self> {
        priors.validate()?;
        if priors.dim() != dataset.n_covariates() {
            return Err(Error::invalid(format!(
                "priors have dimension {} but data has {} covariates",
                priors.dim(),
                dataset.n_covariates()
            )));
        }
        if let BackendKind::Slr(cfg) = &backend {
            cfg.validate()?;
        }
        let k = priors.dim();
        let global = GlobalVarParams::initial(dataset.n_agents(), priors);
        let theta0 = nalgebra::DVector::from_vec(global.monitored());
        Ok(Engine {
            dataset,
            priors,
            backend,
            seed,
            global,
            locals: vec![LocalVarParams::initial(k); dataset.n_agents()],
            diag: Diagnostics::default(),
            trace: Vec::new(),
            theta_path: vec![theta0],
            started: Instant::now(),
            last_bound: None,
        })
    }

    /// Updates the local factors of `indices` in parallel and writes them
    /// back in index order. `steps` > 1 repeats the update (NCVMP inner loop).
    pub(crate) fn update_locals(&mut self, indices: &[usize], iteration: usize) -> Result<()> {
        let agents = self.dataset.agents();
        let global = &self.global;
        let backend = &self.backend;
        let seed = self.seed;
        let locals = &self.locals;
        let results: Vec<Result<(LocalVarParams<T>, usize)>> = indices
            .par_iter()
            .map(|&h| local::update_local(backend, &agents[h], global, &locals[h], seed, h, iteration))
            .collect();
        for (&h, r) in indices.iter().zip(results) {
            let (l, rejections) = r.map_err(|e| self.wrap_local_error(e, iteration))?;
            self.locals[h] = l;
            self.diag.slr_rejections += rejections;
        }
        if matches!(self.backend, BackendKind::Ncvmp) {
            self.diag.ncvmp_passes += 1;
        }
        Ok(())
    }

    fn wrap_local_error(&self, e: Error, iteration: usize) -> Error {
        match (&self.backend, e) {
            (BackendKind::Ncvmp, Error::Numerical { context, detail }) => Error::Divergence {
                iteration,
                reason: format!("{context}: {detail}"),
            },
            (_, e) => e,
        }
    }

    /// Exact conjugate updates ζ → Υ → c from all local factors.
    pub(crate) fn full_global_update(&mut self) -> Result<()> {
        if conjugate::full_global_update(&self.locals, &mut self.global, self.priors)? {
            self.diag.jitter_events += 1;
        }
        Ok(())
    }

    pub(crate) fn monitored_f64(&self) -> Vec<f64> {
        self.global.monitored().into_iter().map(|v| v.as_f64()).collect()
    }

    pub(crate) fn surrogate(&self) -> Option<Surrogate> {
        match self.backend {
            BackendKind::Laplace => Some(Surrogate::Laplace),
            BackendKind::Ncvmp => Some(Surrogate::Delta),
            BackendKind::Slr(_) => None,
        }
    }

    pub(crate) fn lower_bound(&self) -> Option<f64> {
        let s = self.surrogate()?;
        bound::lower_bound(s, self.dataset.agents(), &self.global, &self.locals, self.priors)
            .ok()
            .map(|v| v.as_f64())
    }

    /// Divergence sentinel; also records the bound for the next comparison.
    pub(crate) fn check_divergence(&mut self, iteration: usize, xi: Option<f64>, bound: Option<f64>) -> Result<()> {
        let theta = self.global.monitored();
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                iteration,
                reason: "global parameters are no longer finite".into(),
            });
        }
        if let Some(xi) = xi {
            if !(xi <= DIVERGENCE_LIMIT) {
                return Err(Error::Divergence {
                    iteration,
                    reason: format!("relative change {xi:.3e} exceeds {DIVERGENCE_LIMIT:.0e}"),
                });
            }
        }
        let norm = self.global.mu_zeta.norm().as_f64();
        if norm > DIVERGENCE_LIMIT {
            return Err(Error::Divergence {
                iteration,
                reason: format!("|mu_zeta| = {norm:.3e} exceeds {DIVERGENCE_LIMIT:.0e}"),
            });
        }
        if let Some(b) = bound {
            if !b.is_finite() {
                return Err(Error::Divergence {
                    iteration,
                    reason: "lower bound is not finite".into(),
                });
            }
            if let Some(prev) = self.last_bound {
                if prev - b > DIVERGENCE_LIMIT {
                    return Err(Error::Divergence {
                        iteration,
                        reason: format!("lower bound fell from {prev:.6e} to {b:.6e}"),
                    });
                }
            }
            self.last_bound = Some(b);
        }
        Ok(())
    }

    pub(crate) fn record(&mut self, mut rec: TraceRecord) {
        rec.elapsed_secs = self.started.elapsed().as_secs_f64();
        self.theta_path
            .push(nalgebra::DVector::from_vec(self.global.monitored()));
        self.trace.push(rec);
    }

    pub(crate) fn finish(self, converged: bool) -> FitResult<T> {
        FitResult {
            backend: self.backend,
            priors: self.priors.clone(),
            global: self.global,
            agent_ids: self.dataset.agents().iter().map(|a| a.id.clone()).collect(),
            locals: self.locals,
            trace: self.trace,
            diagnostics: self.diag,
            converged,
            seed: self.seed,
            theta_path: self.theta_path,
        }
    }
}

/// Runs full sweeps from the engine's current state until the stopping rule
/// fires or `stop.max_sweeps` sweeps have been made. `first_iteration` is the
/// global iteration number of the first sweep (it also keys the SLR streams).
/// With `ncvmp_converge_first`, the first sweep repeats the NCVMP step until
/// the local means settle.
pub(crate) fn run_batch_phase<T: Scalar>(
    engine: &mut Engine<'_, T>,
    stop: &StopConfig,
    first_iteration: usize,
    ncvmp_converge_first: bool,
) -> Result<bool> {
    let all: Vec<usize> = (0..engine.dataset.n_agents()).collect();
    let window = if engine.backend.is_stochastic() {
        stop.smoothing_window
    } else {
        1
    };
    let mut monitor = XiMonitor::new(engine.monitored_f64(), window);
    for sweep in 0..stop.max_sweeps {
        let iteration = first_iteration + sweep;
        if sweep == 0 && ncvmp_converge_first && matches!(engine.backend, BackendKind::Ncvmp) {
            converge_ncvmp(engine, &all, iteration, stop.xi_threshold, 20)?;
        } else {
            engine.update_locals(&all, iteration)?;
        }
        engine.full_global_update()?;
        let (xi, window_full) = monitor.push(engine.monitored_f64());
        let lb = engine.lower_bound();
        engine.check_divergence(iteration, Some(xi), lb)?;
        engine.record(TraceRecord {
            iteration,
            phase: Phase::Batch,
            xi: Some(xi),
            min_ratio: None,
            batch_size: all.len(),
            alpha: 1.0,
            lower_bound: lb,
            elapsed_secs: 0.0,
        });
        log::debug!("sweep {iteration}: xi = {xi:.3e}");
        if window_full && xi < stop.xi_threshold {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Repeats NCVMP steps on `indices` until `‖Δμ_B‖ / ‖μ_B‖ < tol` or
/// `max_steps` steps. Returns the number of steps taken.
pub(crate) fn converge_ncvmp<T: Scalar>(
    engine: &mut Engine<'_, T>,
    indices: &[usize],
    iteration: usize,
    tol: f64,
    max_steps: usize,
) -> Result<usize> {
    for step in 1..=max_steps {
        let before: Vec<_> = indices.iter().map(|&h| engine.locals[h].mu.clone()).collect();
        engine.update_locals(indices, iteration)?;
        let mut diff = 0.0;
        let mut norm = 0.0;
        for (&h, old) in indices.iter().zip(&before) {
            let new = &engine.locals[h].mu;
            diff += (new - old).norm_squared().as_f64();
            norm += new.norm_squared().as_f64();
        }
        let rel = if norm > 0.0 { (diff / norm).sqrt() } else { diff.sqrt() };
        if rel < tol {
            return Ok(step);
        }
    }
    Ok(max_steps)
}

pub fn fit_batch<T: Scalar>(
    dataset: &ChoiceDataset<T>,
    priors: &Hyperpriors<T>,
    backend: BackendKind,
    stop: &StopConfig,
    seed: u64,
) -> Result<FitResult<T>> {
    stop.validate()?;
    let mut engine = Engine::new(dataset, priors, backend, seed)?;
    let converged = run_batch_phase(&mut engine, stop, 1, false)?;
    if !converged {
        log::warn!(
            "batch fit stopped after {} sweeps without meeting xi < {}",
            stop.max_sweeps,
            stop.xi_threshold
        );
    }
    Ok(engine.finish(converged))
}
