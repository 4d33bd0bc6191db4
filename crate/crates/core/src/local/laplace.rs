//! Laplace local update: Gaussian centred at the mode of `f`, covariance the
//! negative inverse Hessian there.

use nalgebra::DVector;

use super::bfgs::{self, BfgsOptions};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{self, AgentData, GlobalVarParams, LocalVarParams};
use crate::scalar::Scalar;

const NEWTON_STEPS: usize = 8;

/// Maximizes `f(β)` by BFGS from `init`, then refines the mode with a few
/// exact Newton steps. The refinement makes the mode accurate to rounding
/// when `f` is quadratic (an agent with no events), where BFGS alone stops at
/// the gradient tolerance.
pub fn laplace_local<T: Scalar>(
    agent: &AgentData<T>,
    global: &GlobalVarParams<T>,
    init: &DVector<T>,
) -> Result<LocalVarParams<T>> {
    laplace_local_with(agent, global, init, &BfgsOptions::default())
}

pub fn laplace_local_with<T: Scalar>(
    agent: &AgentData<T>,
    global: &GlobalVarParams<T>,
    init: &DVector<T>,
    opts: &BfgsOptions,
) -> Result<LocalVarParams<T>> {
    let neg = |b: &DVector<T>| {
        let (v, g) = model::f_and_gradient(b, agent, global);
        (-v, -g)
    };
    let out = bfgs::minimize(neg, init.clone(), opts);
    let mut beta = out.x;
    let mut value = -out.value;
    let mut grad = -out.grad;

    for _ in 0..NEWTON_STEPS {
        let precision = model::likelihood_curvature(agent, &beta) + global.omega_inv_mean();
        let chol = linalg::cholesky(&precision, "Laplace Newton step")?;
        let step = chol.solve(&grad);
        let mut t = T::one();
        let mut moved = false;
        for _ in 0..30 {
            let trial = &beta + &step * t;
            let (fv, fg) = model::f_and_gradient(&trial, agent, global);
            if fv >= value {
                moved = trial != beta;
                beta = trial;
                value = fv;
                grad = fg;
                break;
            }
            t *= T::c(0.5);
        }
        if !moved || step.norm() <= T::c(T::EPS) * (T::one() + beta.norm()) {
            break;
        }
    }

    let grad_norm = grad.norm();
    if !(grad_norm <= T::c(opts.grad_tol) * (T::one() + value.abs())) {
        return Err(Error::NonConvergence {
            iterations: out.iterations,
            grad_norm: grad_norm.as_f64(),
            best: beta.iter().map(|v| v.as_f64()).collect(),
        });
    }
    let precision = model::likelihood_curvature(agent, &beta) + global.omega_inv_mean();
    let sigma = linalg::spd_inverse(&precision, "Laplace covariance")?;
    Ok(LocalVarParams { mu: beta, sigma })
}
