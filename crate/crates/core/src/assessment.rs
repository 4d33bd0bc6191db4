//! Predictive choice distributions, total-variation comparisons and
//! held-out predictive log-likelihood.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mcmc::{self, PosteriorDraws};
use crate::model::{AgentData, ChoiceDataset, GlobalVarParams};
use crate::rng::{self, Purpose};
use crate::scalar::Scalar;

/// Tolerance on `Σ p_j = 1` for probability vectors.
pub const SIMPLEX_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveQuery<T: Scalar> {
    pub label: String,
    pub x_new: DMatrix<T>,
}

/// Where the `(ζ, Ω)` integrated over in a predictive estimate come from.
#[derive(Debug, Clone, Copy)]
pub enum PosteriorSource<'a, T: Scalar> {
    TrueParams { zeta: &'a DVector<T>, omega: &'a DMatrix<T> },
    VariationalFit(&'a GlobalVarParams<T>),
    McmcDraws(&'a PosteriorDraws<T>),
}

/// Monte Carlo sizes for predictive estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcdConfig {
    /// Draws of `(ζ, Ω)` from the variational posterior. For MCMC sources,
    /// this many evenly spaced draws are used, or all of them if fewer exist.
    pub outer: usize,
    /// `β` draws per `(ζ, Ω)` draw.
    pub inner: usize,
    /// `β` draws for a known `(ζ, Ω)`.
    pub true_draws: usize,
}

impl Default for PcdConfig {
    fn default() -> Self {
        PcdConfig {
            outer: 500,
            inner: 10_000,
            true_draws: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcdEstimate<T: Scalar> {
    pub probs: DVector<T>,
    /// Ω draws rejected as numerically not positive definite and redrawn.
    pub resampled: usize,
}

fn check_query<T: Scalar>(x: &DMatrix<T>, k: usize) -> Result<()> {
    if x.ncols() != k || x.nrows() < 2 {
        return Err(Error::invalid(format!(
            "query is {}x{}, expected J>=2 rows and {k} columns",
            x.nrows(),
            x.ncols()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("query has non-finite covariates"));
    }
    Ok(())
}

/// Adds `Σ_r softmax(x (ζ + L z_r))` over `draws` standard-normal `z_r` into `acc`.
fn accumulate_mixture<T: Scalar, R: Rng + ?Sized>(
    x: &DMatrix<T>,
    zeta: &DVector<T>,
    factor: &DMatrix<T>,
    draws: usize,
    acc: &mut [T],
    rng: &mut R,
) {
    let k = zeta.len();
    let j = x.nrows();
    let mut z = DVector::zeros(k);
    let mut eta = vec![T::zero(); j];
    let mut p = vec![T::zero(); j];
    for _ in 0..draws {
        for v in z.iter_mut() {
            *v = T::standard_normal(rng);
        }
        let beta = zeta + factor * &z;
        linalg::utilities_into(x, &beta, &mut eta);
        linalg::softmax_into(&eta, &mut p);
        for (a, pi) in acc.iter_mut().zip(&p) {
            *a += *pi;
        }
    }
}

/// Monte Carlo estimate of `∫ softmax(x β) N(β | ζ, Ω) dβ` from `r` draws.
/// A singular Ω is allowed; Ω = 0 gives the softmax at ζ.
pub fn true_pcd<T: Scalar, R: Rng + ?Sized>(
    x_new: &DMatrix<T>,
    zeta: &DVector<T>,
    omega: &DMatrix<T>,
    r: usize,
    rng: &mut R,
) -> Result<DVector<T>> {
    check_query(x_new, zeta.len())?;
    if r == 0 {
        return Err(Error::invalid("need at least one draw"));
    }
    if omega.nrows() != zeta.len() || !omega.is_square() {
        return Err(Error::invalid("Omega does not match zeta"));
    }
    let factor = linalg::psd_factor(omega);
    let mut acc = vec![T::zero(); x_new.nrows()];
    accumulate_mixture(x_new, zeta, &factor, r, &mut acc, rng);
    Ok(DVector::from_vec(acc) / T::from_usize_lossy(r))
}

fn draw_variational<T: Scalar, R: Rng + ?Sized>(
    global: &GlobalVarParams<T>,
    zeta_factor: &DMatrix<T>,
    rng: &mut R,
    resampled: &mut usize,
) -> Result<(DVector<T>, DMatrix<T>)> {
    let zeta = linalg::sample_from_factor(&global.mu_zeta, zeta_factor, rng);
    for _ in 0..100 {
        let omega = mcmc::sample_inverse_wishart(global.omega(), global.upsilon(), rng)?;
        if linalg::is_spd(&omega) {
            return Ok((zeta, omega));
        }
        *resampled += 1;
    }
    Err(Error::numerical("predictive Omega draw", "100 consecutive draws were not positive definite"))
}

/// Nested Monte Carlo estimate of the posterior predictive choice
/// distribution. Within one `(ζ, Ω)` draw the same `β` draws serve every
/// alternative.
pub fn estimated_pcd<T: Scalar, R: Rng + ?Sized>(
    x_new: &DMatrix<T>,
    source: PosteriorSource<'_, T>,
    cfg: &PcdConfig,
    rng: &mut R,
) -> Result<PcdEstimate<T>> {
    if cfg.inner == 0 || cfg.outer == 0 {
        return Err(Error::invalid("draw counts must be positive"));
    }
    let j = x_new.nrows();
    let mut acc = vec![T::zero(); j];
    let mut resampled = 0;
    let mut total = 0usize;
    match source {
        PosteriorSource::TrueParams { zeta, omega } => {
            return Ok(PcdEstimate {
                probs: true_pcd(x_new, zeta, omega, cfg.true_draws, rng)?,
                resampled: 0,
            });
        }
        PosteriorSource::VariationalFit(global) => {
            check_query(x_new, global.dim())?;
            let zeta_factor = linalg::psd_factor(&global.sigma_zeta);
            for _ in 0..cfg.outer {
                let (zeta, omega) = draw_variational(global, &zeta_factor, rng, &mut resampled)?;
                let factor = linalg::psd_factor(&omega);
                accumulate_mixture(x_new, &zeta, &factor, cfg.inner, &mut acc, rng);
                total += cfg.inner;
            }
        }
        PosteriorSource::McmcDraws(draws) => {
            check_query(x_new, draws.dim())?;
            let pooled = draws.pooled();
            if pooled.is_empty() {
                return Err(Error::invalid("no posterior draws"));
            }
            let n = pooled.len();
            let used = cfg.outer.min(n);
            for i in 0..used {
                let (zeta, omega) = pooled[i * n / used];
                let factor = linalg::psd_factor(omega);
                accumulate_mixture(x_new, zeta, &factor, cfg.inner, &mut acc, rng);
                total += cfg.inner;
            }
        }
    }
    Ok(PcdEstimate {
        probs: DVector::from_vec(acc) / T::from_usize_lossy(total),
        resampled,
    })
}

/// Evaluates each query on its own RNG stream, in parallel.
pub fn estimate_queries<T: Scalar>(
    queries: &[PredictiveQuery<T>],
    source: PosteriorSource<'_, T>,
    cfg: &PcdConfig,
    seed: u64,
) -> Result<Vec<PcdEstimate<T>>> {
    queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let mut r = rng::stream(seed, Purpose::Predictive, i as u64, 0);
            estimated_pcd(&q.x_new, source, cfg, &mut r)
        })
        .collect()
}

/// `n` query matrices with iid `N(0, sd²)` entries, labelled `q001`, ...
pub fn random_queries<T: Scalar>(n: usize, j: usize, k: usize, sd: f64, seed: u64) -> Vec<PredictiveQuery<T>> {
    let width = n.to_string().len().max(3);
    (0..n)
        .map(|i| {
            let mut r = rng::stream(seed, Purpose::Predictive, i as u64, u64::MAX);
            PredictiveQuery {
                label: format!("q{:0width$}", i + 1, width = width),
                x_new: DMatrix::from_fn(j, k, |_, _| T::c(sd * f64::standard_normal(&mut r))),
            }
        })
        .collect()
}

fn check_simplex<T: Scalar>(p: &DVector<T>, name: &str) -> Result<()> {
    let sum: f64 = p.iter().map(|v| v.as_f64()).sum();
    if p.iter().any(|v| !(v.as_f64() >= -SIMPLEX_TOL)) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid(format!("{name} is not a probability vector (sum {sum})")));
    }
    Ok(())
}

/// `½ Σ_j |p_j − q_j|`.
pub fn tv_distance<T: Scalar>(p: &DVector<T>, q: &DVector<T>) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid("probability vectors differ in length"));
    }
    check_simplex(p, "p")?;
    check_simplex(q, "q")?;
    let d: f64 = p.iter().zip(q.iter()).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).sum();
    Ok((0.5 * d).clamp(0.0, 1.0))
}

/// `Σ_h Σ_t log p̂(y_ht | x_ht)` for an arbitrary predictor of the choice
/// distribution at a covariate matrix.
pub fn predictive_loglik_with<T, F>(agents: &[AgentData<T>], predictor: F) -> Result<f64>
where
    T: Scalar,
    F: Fn(usize, &DMatrix<T>) -> Result<DVector<T>> + Sync,
{
    let events: Vec<(&DMatrix<T>, usize)> = agents
        .iter()
        .flat_map(|a| a.events.iter().map(|e| (&e.x, e.chosen)))
        .collect();
    let terms = events
        .par_iter()
        .enumerate()
        .map(|(i, (x, chosen))| {
            let p = predictor(i, x)?;
            if p.len() != x.nrows() {
                return Err(Error::invalid("predictor returned the wrong number of alternatives"));
            }
            Ok(p[*chosen].as_f64().max(crate::model::PROB_FLOOR).ln())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(terms.iter().sum())
}

/// Held-out predictive log-likelihood using [`estimated_pcd`] for every event.
pub fn predictive_loglik<T: Scalar>(
    source: PosteriorSource<'_, T>,
    test_agents: &[AgentData<T>],
    cfg: &PcdConfig,
    seed: u64,
) -> Result<f64> {
    predictive_loglik_with(test_agents, |i, x| {
        let mut r = rng::stream(seed, Purpose::Predictive, i as u64, 1);
        Ok(estimated_pcd(x, source, cfg, &mut r)?.probs)
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Random agent-level partition into `k` folds whose sizes differ by at most one.
pub fn kfold_split<T: Scalar>(dataset: &ChoiceDataset<T>, k: usize, seed: u64) -> Result<Vec<Fold>> {
    let h = dataset.n_agents();
    if k < 2 || k > h {
        return Err(Error::invalid(format!("fold count must lie in [2, {h}], got {k}")));
    }
    let mut order: Vec<usize> = (0..h).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Folds, 0, 0));
    Ok((0..k)
        .map(|f| {
            let mut test: Vec<usize> = order.iter().skip(f).step_by(k).copied().collect();
            test.sort_unstable();
            let train = (0..h).filter(|i| test.binary_search(i).is_err()).collect();
            Fold { train, test }
        })
        .collect())
}

/// Five-number summary plus mean; quartiles use linear interpolation
/// between order statistics (R's type 7).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub mean: f64,
    pub q3: f64,
    pub max: f64,
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("summary needs finite values"));
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        Ok(Summary {
            min: s[0],
            q1: quantile_sorted(&s, 0.25),
            median: quantile_sorted(&s, 0.5),
            mean: s.iter().sum::<f64>() / s.len() as f64,
            q3: quantile_sorted(&s, 0.75),
            max: s[s.len() - 1],
        })
    }

    /// `(row label, value)` in the order min, 1st quartile, median, mean, 3rd quartile, max.
    pub fn rows(&self) -> [(&'static str, f64); 6] {
        [
            ("min", self.min),
            ("q1", self.q1),
            ("median", self.median),
            ("mean", self.mean),
            ("q3", self.q3),
            ("max", self.max),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryComparison {
    pub label: String,
    pub probs: Vec<f64>,
    pub reference: Vec<f64>,
    pub tv: f64,
}

/// Pairs estimates with reference distributions and computes TV for each query.
pub fn compare_estimates<T: Scalar>(
    queries: &[PredictiveQuery<T>],
    estimates: &[DVector<T>],
    reference: &[DVector<T>],
) -> Result<Vec<QueryComparison>> {
    if queries.len() != estimates.len() || queries.len() != reference.len() {
        return Err(Error::invalid("queries, estimates and references differ in count"));
    }
    queries
        .iter()
        .zip(estimates.iter().zip(reference))
        .map(|(q, (p, r))| {
            Ok(QueryComparison {
                label: q.label.clone(),
                probs: p.iter().map(|v| v.as_f64()).collect(),
                reference: r.iter().map(|v| v.as_f64()).collect(),
                tv: tv_distance(p, r)?,
            })
        })
        .collect()
}

/// CSV with one row per query: label, `p1..pJ`, `ref1..refJ`, tv.
pub fn write_comparison_csv<W: Write>(rows: &[QueryComparison], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let j = rows.first().map_or(0, |r| r.probs.len());
    let mut header = vec!["label".to_string()];
    header.extend((1..=j).map(|i| format!("p{i}")));
    header.extend((1..=j).map(|i| format!("ref{i}")));
    header.push("tv".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.label.clone()];
        rec.extend(r.probs.iter().map(|v| v.to_string()));
        rec.extend(r.reference.iter().map(|v| v.to_string()));
        rec.push(r.tv.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
