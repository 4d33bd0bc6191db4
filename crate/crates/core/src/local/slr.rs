//! Stochastic linear regression for a Gaussian local factor.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{self, AgentData, GlobalVarParams, LocalVarParams};
use crate::scalar::Scalar;

/// Iteration count `N` and exponential weight `w`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlrConfig {
    pub iterations: usize,
    pub weight: f64,
}

impl Default for SlrConfig {
    fn default() -> Self {
        SlrConfig {
            iterations: 40,
            weight: 0.25,
        }
    }
}

impl SlrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 2 || !self.iterations.is_multiple_of(2) {
            return Err(Error::invalid("SLR iteration count must be even and at least 2"));
        }
        if !(self.weight > 0.0 && self.weight <= 1.0) {
            return Err(Error::invalid("SLR weight must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Running regression state: current precision `P`, gradient `g` and
/// location `m`, plus sums over the second half of the iterations.
#[derive(Debug, Clone)]
pub struct SlrState<T: Scalar> {
    pub p: DMatrix<T>,
    pub g: DVector<T>,
    pub m: DVector<T>,
    pub p_bar: DMatrix<T>,
    pub g_bar: DVector<T>,
    pub m_bar: DVector<T>,
    pub averaged: usize,
    pub rejections: usize,
}

impl<T: Scalar> SlrState<T> {
    pub fn start(init: &LocalVarParams<T>) -> Result<Self> {
        let k = init.mu.len();
        Ok(SlrState {
            p: linalg::spd_inverse(&init.sigma, "SLR initial covariance")?,
            g: DVector::zeros(k),
            m: init.mu.clone(),
            p_bar: DMatrix::zeros(k, k),
            g_bar: DVector::zeros(k),
            m_bar: DVector::zeros(k),
            averaged: 0,
            rejections: 0,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SlrOutcome<T: Scalar> {
    pub local: LocalVarParams<T>,
    pub rejections: usize,
}

/// Runs `N` draw/regress iterations for one agent.
///
/// A draw whose Hessian would make `P` indefinite is rejected: `P`, `g` and
/// `m` keep their previous values and the draw is left out of the averages,
/// which are then taken over the accepted draws of the second half.
pub fn slr_local<T: Scalar, R: rand::Rng + ?Sized>(
    agent: &AgentData<T>,
    global: &GlobalVarParams<T>,
    init: &LocalVarParams<T>,
    cfg: &SlrConfig,
    rng: &mut R,
) -> Result<SlrOutcome<T>> {
    cfg.validate()?;
    let w = T::c(cfg.weight);
    let keep = T::one() - w;
    let n = cfg.iterations;
    let mut st = SlrState::start(init)?;
    let mut chol = linalg::cholesky(&st.p, "SLR precision")?;
    let mut mu = init.mu.clone();

    for it in 1..=n {
        let draw = linalg::sample_from_precision(&mu, &chol, rng);
        let (grad, hess) = model::grad_hess_f(&draw, agent, global);
        let p_new = linalg::symmetrize(&(&st.p * keep - &hess * w));
        let Some(c_new) = nalgebra::Cholesky::new(p_new.clone()) else {
            st.rejections += 1;
            continue;
        };
        st.p = p_new;
        chol = c_new;
        st.g = &st.g * keep + &grad * w;
        st.m = &st.m * keep + &draw * w;
        mu = chol.solve(&st.g) + &st.m;
        if it > n / 2 {
            st.p_bar -= &hess;
            st.g_bar += &grad;
            st.m_bar += &draw;
            st.averaged += 1;
        }
    }

    if st.averaged == 0 {
        return Err(Error::numerical(
            "SLR",
            "every draw in the averaging window was rejected",
        ));
    }
    let scale = T::one() / T::from_usize_lossy(st.averaged);
    let p_bar = linalg::symmetrize(&(st.p_bar * scale));
    let g_bar = st.g_bar * scale;
    let m_bar = st.m_bar * scale;
    let chol_bar = linalg::cholesky(&p_bar, "SLR averaged precision")?;
    let sigma = linalg::symmetrize(&chol_bar.inverse());
    let mu = chol_bar.solve(&g_bar) + m_bar;
    Ok(SlrOutcome {
        local: LocalVarParams { mu, sigma },
        rejections: st.rejections,
    })
}
