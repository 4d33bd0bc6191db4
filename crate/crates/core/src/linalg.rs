//! Small dense linear-algebra helpers on top of nalgebra.
//!
//! Every covariance or precision in the model is K×K with K small, so these
//! routines favour clarity over blocking. SPD inverses always go through a
//! Cholesky factor.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Max-shifted log-sum-exp of a slice.
pub fn log_sum_exp<T: Scalar>(values: &[T]) -> T {
    let max = values
        .iter()
        .copied()
        .fold(T::c(f64::NEG_INFINITY), |a, b| if b > a { b } else { a });
    if !max.is_finite() {
        return max;
    }
    let sum = values
        .iter()
        .fold(T::zero(), |acc, &v| acc + (v - max).exp());
    max + sum.ln()
}

/// Softmax of a slice written into `out`; returns the log-sum-exp.
pub fn softmax_into<T: Scalar>(values: &[T], out: &mut [T]) -> T {
    let lse = log_sum_exp(values);
    for (o, &v) in out.iter_mut().zip(values) {
        *o = (v - lse).exp();
    }
    lse
}

/// Utilities `x β` for a J×K covariate matrix, written into `out`.
#[inline]
pub fn utilities_into<T: Scalar>(x: &DMatrix<T>, beta: &DVector<T>, out: &mut [T]) {
    let (rows, cols) = x.shape();
    for (j, o) in out.iter_mut().enumerate().take(rows) {
        let mut acc = T::zero();
        for k in 0..cols {
            acc += x[(j, k)] * beta[k];
        }
        *o = acc;
    }
}

/// `xᵀ (diag(p) − p pᵀ) x`, the softmax curvature pulled back to coefficient space.
pub fn softmax_curvature<T: Scalar>(x: &DMatrix<T>, p: &[T]) -> DMatrix<T> {
    let (rows, cols) = x.shape();
    // xbar = xᵀ p
    let mut xbar = vec![T::zero(); cols];
    for j in 0..rows {
        for k in 0..cols {
            xbar[k] += p[j] * x[(j, k)];
        }
    }
    let mut out = DMatrix::zeros(cols, cols);
    for j in 0..rows {
        for a in 0..cols {
            let da = x[(j, a)] - xbar[a];
            for b in 0..=a {
                out[(a, b)] += p[j] * da * (x[(j, b)] - xbar[b]);
            }
        }
    }
    for a in 0..cols {
        for b in 0..a {
            out[(b, a)] = out[(a, b)];
        }
    }
    out
}

pub fn symmetrize<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * T::c(0.5)
}

pub fn cholesky<T: Scalar>(m: &DMatrix<T>, context: &str) -> Result<Cholesky<T, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| {
        Error::numerical(
            context,
            format!("matrix is not positive definite ({})", condition_report(m)),
        )
    })
}

/// Cholesky factorization that retries once with a diagonal jitter of
/// `1e-10 · tr(M)/K`. The flag reports whether the jitter was needed.
pub fn cholesky_jittered<T: Scalar>(
    m: &DMatrix<T>,
    context: &str,
) -> Result<(Cholesky<T, Dyn>, bool)> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok((c, false));
    }
    let k = m.nrows().max(1);
    let jitter = T::c(1e-10) * m.trace().abs() / T::from_usize_lossy(k);
    let mut shifted = m.clone();
    for i in 0..m.nrows() {
        shifted[(i, i)] += jitter;
    }
    Cholesky::new(shifted).map(|c| (c, true)).ok_or_else(|| {
        Error::numerical(
            context,
            format!(
                "matrix is not positive definite even after jitter ({})",
                condition_report(m)
            ),
        )
    })
}

/// Inverse of an SPD matrix through its Cholesky factor, symmetrized.
pub fn spd_inverse<T: Scalar>(m: &DMatrix<T>, context: &str) -> Result<DMatrix<T>> {
    let c = cholesky(m, context)?;
    Ok(symmetrize(&c.inverse()))
}

pub fn log_det_spd<T: Scalar>(m: &DMatrix<T>, context: &str) -> Result<T> {
    let c = cholesky(m, context)?;
    let l = c.l_dirty();
    let mut acc = T::zero();
    for i in 0..m.nrows() {
        acc += l[(i, i)].ln();
    }
    Ok(acc * T::c(2.0))
}

pub fn is_spd<T: Scalar>(m: &DMatrix<T>) -> bool {
    m.is_square() && m.iter().all(|v| v.is_finite()) && Cholesky::new(m.clone()).is_some()
}

pub fn min_eigenvalue<T: Scalar>(m: &DMatrix<T>) -> T {
    let eig = SymmetricEigen::new(symmetrize(m));
    eig.eigenvalues
        .iter()
        .copied()
        .fold(T::c(f64::INFINITY), |a, b| if b < a { b } else { a })
}

/// Lower-triangular `L` with `L Lᵀ = M` for symmetric positive semi-definite `M`.
/// Falls back to a symmetric eigendecomposition when Cholesky fails, clamping
/// negative eigenvalues to zero (the returned factor is then not triangular).
pub fn psd_factor<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return c.l();
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut scaled = eig.eigenvectors.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let s = if lambda > T::zero() { lambda.sqrt() } else { T::zero() };
        for i in 0..scaled.nrows() {
            scaled[(i, j)] *= s;
        }
    }
    scaled
}

fn condition_report<T: Scalar>(m: &DMatrix<T>) -> String {
    if !m.is_square() || m.iter().any(|v| !v.is_finite()) {
        return format!("{}x{} with non-finite entries", m.nrows(), m.ncols());
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in eig.eigenvalues.iter() {
        lo = lo.min(v.as_f64());
        hi = hi.max(v.as_f64());
    }
    format!(
        "{}x{}, eigenvalues in [{:.3e}, {:.3e}], condition {:.3e}",
        m.nrows(),
        m.ncols(),
        lo,
        hi,
        hi.abs() / lo.abs()
    )
}

/// Draw from N(mean, P⁻¹) given the Cholesky factor of the precision P,
/// by solving `Lᵀ v = z`.
pub fn sample_from_precision<T: Scalar, R: rand::Rng + ?Sized>(
    mean: &DVector<T>,
    precision_chol: &Cholesky<T, Dyn>,
    rng: &mut R,
) -> DVector<T> {
    let k = mean.len();
    let z = DVector::from_fn(k, |_, _| T::standard_normal(rng));
    let l = precision_chol.l_dirty();
    let v = l
        .transpose()
        .solve_upper_triangular(&z)
        .expect("Cholesky factor has a positive diagonal");
    mean + v
}

/// Draw from N(mean, LLᵀ) given a covariance square-root `L`.
pub fn sample_from_factor<T: Scalar, R: rand::Rng + ?Sized>(
    mean: &DVector<T>,
    factor: &DMatrix<T>,
    rng: &mut R,
) -> DVector<T> {
    let z = DVector::from_fn(factor.ncols(), |_, _| T::standard_normal(rng));
    mean + factor * z
}
