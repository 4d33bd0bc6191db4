//! One NCVMP fixed-point step under the delta-method surrogate.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{AgentData, GlobalVarParams, LocalVarParams};
use crate::scalar::Scalar;

/// Σ is refreshed first from the curvature at the incoming μ; the μ step then
/// uses the new Σ together with the same ρ.
pub fn ncvmp_local_step<T: Scalar>(
    agent: &AgentData<T>,
    global: &GlobalVarParams<T>,
    current: &LocalVarParams<T>,
) -> Result<LocalVarParams<T>> {
    let k = current.mu.len();
    let mu = &current.mu;
    let half = T::c(0.5);

    let mut rhos = Vec::with_capacity(agent.events.len());
    let mut precision = global.omega_inv_mean();
    let mut eta = Vec::new();
    for ev in &agent.events {
        let j = ev.x.nrows();
        eta.resize(j, T::zero());
        let mut rho = vec![T::zero(); j];
        linalg::utilities_into(&ev.x, mu, &mut eta);
        linalg::softmax_into(&eta, &mut rho);
        precision += linalg::softmax_curvature(&ev.x, &rho);
        rhos.push(rho);
    }
    let sigma = linalg::spd_inverse(&precision, "NCVMP covariance")
        .map_err(|e| Error::numerical("NCVMP step", e.to_string()))?;

    let mut direction = -(global.omega_inv_mean() * (mu - &global.mu_zeta));
    for (ev, rho) in agent.events.iter().zip(&rhos) {
        let x = &ev.x;
        let j = x.nrows();
        let rho_v = DVector::from_column_slice(rho);
        let xs = x * &sigma;
        // A = x Σ xᵀ
        let a = &xs * x.transpose();
        let inner = &a * &rho_v - a.diagonal() * half;
        // (diag ρ − ρρᵀ) v = ρ ∘ (v − ρᵀv)
        let rv = rho_v.dot(&inner);
        let weighted = DVector::from_fn(j, |i, _| rho[i] * (inner[i] - rv));
        let mut resid = -rho_v;
        resid[ev.chosen] += T::one();
        direction += x.transpose() * (resid + weighted);
    }
    let new_mu = mu + &sigma * direction;
    if new_mu.iter().any(|v| !v.is_finite()) || new_mu.len() != k {
        return Err(Error::numerical("NCVMP step", "mean update is not finite"));
    }
    Ok(LocalVarParams { mu: new_mu, sigma })
}
