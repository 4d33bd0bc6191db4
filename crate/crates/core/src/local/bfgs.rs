//! Dense BFGS minimizer with Armijo backtracking.

use nalgebra::{DMatrix, DVector};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    /// Stop once `‖∇φ‖ ≤ grad_tol · (1 + |φ|)`.
    pub grad_tol: f64,
    pub max_iter: usize,
    pub armijo_c: f64,
    pub shrink: f64,
    pub max_backtracks: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            grad_tol: 1e-6,
            max_iter: 200,
            armijo_c: 1e-4,
            shrink: 0.5,
            max_backtracks: 60,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsOutcome<T: Scalar> {
    pub x: DVector<T>,
    pub value: T,
    pub grad: DVector<T>,
    pub iterations: usize,
    pub converged: bool,
}

impl<T: Scalar> BfgsOutcome<T> {
    pub fn grad_norm(&self) -> T {
        self.grad.norm()
    }
}

fn small_enough<T: Scalar>(value: T, grad: &DVector<T>, tol: f64) -> bool {
    grad.norm() <= T::c(tol) * (T::one() + value.abs())
}

/// Minimizes `φ` from `x0`. `eval` returns `(φ(x), ∇φ(x))`.
pub fn minimize<T, F>(mut eval: F, x0: DVector<T>, opts: &BfgsOptions) -> BfgsOutcome<T>
where
    T: Scalar,
    F: FnMut(&DVector<T>) -> (T, DVector<T>),
{
    let n = x0.len();
    let mut x = x0;
    let (mut fx, mut gx) = eval(&x);
    let mut inv_h = DMatrix::<T>::identity(n, n);
    let mut first_step = true;
    let c1 = T::c(opts.armijo_c);
    let shrink = T::c(opts.shrink);

    for iter in 0..opts.max_iter {
        if small_enough(fx, &gx, opts.grad_tol) {
            return BfgsOutcome {
                x,
                value: fx,
                grad: gx,
                iterations: iter,
                converged: true,
            };
        }
        let mut dir = -(&inv_h * &gx);
        let mut slope = gx.dot(&dir);
        if !(slope < T::zero()) {
            // Curvature information went stale; restart from steepest descent.
            inv_h = DMatrix::identity(n, n);
            dir = -gx.clone();
            slope = gx.dot(&dir);
        }

        let mut t = T::one();
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let trial = &x + &dir * t;
            let (ft, gt) = eval(&trial);
            if ft.is_finite() && ft <= fx + c1 * t * slope {
                accepted = Some((trial, ft, gt));
                break;
            }
            t *= shrink;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            break;
        };

        let s = &x_new - &x;
        let y = &g_new - &gx;
        let sy = s.dot(&y);
        if sy > T::zero() {
            if first_step {
                inv_h = DMatrix::identity(n, n) * (sy / y.dot(&y));
                first_step = false;
            }
            let rho = T::one() / sy;
            let hy = &inv_h * &y;
            let yhy = y.dot(&hy);
            // H ← H − ρ(H y sᵀ + s yᵀ H) + (ρ² yᵀHy + ρ) s sᵀ
            inv_h -= (&hy * s.transpose() + &s * hy.transpose()) * rho;
            inv_h += (&s * s.transpose()) * (rho * rho * yhy + rho);
        }
        x = x_new;
        fx = f_new;
        gx = g_new;
    }

    let converged = small_enough(fx, &gx, opts.grad_tol);
    BfgsOutcome {
        x,
        value: fx,
        grad: gx,
        iterations: opts.max_iter,
        converged,
    }
}
