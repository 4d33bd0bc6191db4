//! Gaussian expectation identities behind the SLR updates:
//! `∇_μ E_q[V] = E_q[∇V]` and `∇_Σ E_q[V] = ½ E_q[∇²V]` for `q = N(μ, Σ)`.
//!
//! These exist so the test suite can check the identities independently of
//! the SLR implementation. The quadratic check is closed-form on both sides;
//! the general check compares the score-function estimator of the left side
//! with the pathwise estimator of the right side on shared draws.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::linalg;

/// Both sides of the two identities for `V(θ) = aᵀθ + ½ θᵀBθ`.
#[derive(Debug, Clone)]
pub struct QuadraticIdentity {
    pub grad_mu_lhs: DVector<f64>,
    pub grad_mu_rhs: DVector<f64>,
    pub grad_sigma_lhs: DMatrix<f64>,
    pub grad_sigma_rhs: DMatrix<f64>,
}

impl QuadraticIdentity {
    pub fn max_abs_gap(&self) -> f64 {
        (&self.grad_mu_lhs - &self.grad_mu_rhs)
            .amax()
            .max((&self.grad_sigma_lhs - &self.grad_sigma_rhs).amax())
    }
}

/// Left sides differentiate the closed form `E V = aᵀμ + ½(μᵀBμ + tr(BΣ))`;
/// right sides average the gradient `a + Bθ` and Hessian `B` of `V`.
pub fn quadratic_identity(
    b: &DMatrix<f64>,
    a: &DVector<f64>,
    mu: &DVector<f64>,
) -> QuadraticIdentity {
    let b_sym = linalg::symmetrize(b);
    // d/dμ [½ μᵀBμ] = ½(B + Bᵀ)μ ; d/dΣ [½ tr(BΣ)] = ½Bᵀ, symmetrized over Σ
    let grad_mu_lhs = a + (b + b.transpose()) * mu * 0.5;
    let grad_sigma_lhs = linalg::symmetrize(&(b.transpose() * 0.5));
    // E[a + B_sym θ] = a + B_sym μ ; ½ E[∇²V] = ½ B_sym
    let grad_mu_rhs = a + &b_sym * mu;
    let grad_sigma_rhs = &b_sym * 0.5;
    QuadraticIdentity {
        grad_mu_lhs,
        grad_mu_rhs,
        grad_sigma_lhs,
        grad_sigma_rhs,
    }
}

/// Monte Carlo comparison of the two identities for an arbitrary smooth `V`.
#[derive(Debug, Clone)]
pub struct McIdentity {
    pub grad_mu_score: DVector<f64>,
    pub grad_mu_path: DVector<f64>,
    pub grad_sigma_score: DMatrix<f64>,
    pub grad_sigma_path: DMatrix<f64>,
    /// Largest |difference| / standard error over all compared entries.
    pub max_z: f64,
    pub draws: usize,
}

/// `v` returns `(V(θ), ∇V(θ), ∇²V(θ))`.
pub fn monte_carlo_identity<F, R>(
    v: F,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    draws: usize,
    rng: &mut R,
) -> Result<McIdentity>
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>),
    R: rand::Rng + ?Sized,
{
    let k = mu.len();
    let chol = linalg::cholesky(sigma, "identity check covariance")?;
    let factor = chol.l();
    let sigma_inv = linalg::symmetrize(&chol.inverse());
    // Entries: k for μ, k(k+1)/2 for Σ (lower triangle).
    let n_sig = k * (k + 1) / 2;
    let m = k + n_sig;
    let mut sum = vec![0.0; 2 * m];
    let mut sum_diff = vec![0.0; m];
    let mut sum_diff_sq = vec![0.0; m];
    let (v0, _, _) = v(mu);

    for _ in 0..draws {
        let theta = linalg::sample_from_factor(mu, &factor, rng);
        let (val, grad, hess) = v(&theta);
        let d = &theta - mu;
        let sd = &sigma_inv * &d;
        // Centering V at V(μ) is a control variate that leaves the score mean unchanged.
        let vc = val - v0;
        let score_mu = &sd * vc;
        let score_sigma = (&sd * sd.transpose() - &sigma_inv) * (0.5 * vc);
        let path_sigma = &hess * 0.5;
        let mut idx = 0;
        let mut push = |score: f64, path: f64, idx: &mut usize| {
            sum[*idx] += score;
            sum[m + *idx] += path;
            let diff = score - path;
            sum_diff[*idx] += diff;
            sum_diff_sq[*idx] += diff * diff;
            *idx += 1;
        };
        for i in 0..k {
            push(score_mu[i], grad[i], &mut idx);
        }
        for i in 0..k {
            for j in 0..=i {
                push(score_sigma[(i, j)], path_sigma[(i, j)], &mut idx);
            }
        }
    }

    let n = draws as f64;
    let mut max_z: f64 = 0.0;
    for i in 0..m {
        let mean = sum_diff[i] / n;
        let var = (sum_diff_sq[i] / n - mean * mean).max(0.0) * n / (n - 1.0);
        let se = (var / n).sqrt();
        let z = if se > 0.0 { mean.abs() / se } else if mean == 0.0 { 0.0 } else { f64::INFINITY };
        max_z = max_z.max(z);
    }

    let mut grad_sigma_score = DMatrix::zeros(k, k);
    let mut grad_sigma_path = DMatrix::zeros(k, k);
    let mut idx = k;
    for i in 0..k {
        for j in 0..=i {
            grad_sigma_score[(i, j)] = sum[idx] / n;
            grad_sigma_score[(j, i)] = sum[idx] / n;
            grad_sigma_path[(i, j)] = sum[m + idx] / n;
            grad_sigma_path[(j, i)] = sum[m + idx] / n;
            idx += 1;
        }
    }
    Ok(McIdentity {
        grad_mu_score: DVector::from_fn(k, |i, _| sum[i] / n),
        grad_mu_path: DVector::from_fn(k, |i, _| sum[m + i] / n),
        grad_sigma_score,
        grad_sigma_path,
        max_z,
        draws,
    })
}

/// `V(θ) = logsumexp(xθ)` with its gradient `xᵀp` and Hessian `xᵀ(diag p − ppᵀ)x`.
pub fn log_sum_exp_potential(x: &DMatrix<f64>) -> impl Fn(&DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) + '_ {
    move |theta| {
        let mut eta = vec![0.0; x.nrows()];
        let mut p = vec![0.0; x.nrows()];
        linalg::utilities_into(x, theta, &mut eta);
        let lse = linalg::softmax_into(&eta, &mut p);
        let grad = x.transpose() * DVector::from_column_slice(&p);
        let hess = linalg::softmax_curvature(x, &p);
        (lse, grad, hess)
    }
}
