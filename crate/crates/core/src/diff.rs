//! Reverse-mode gradient plumbing.
//!
//! Differentiable stages expose hand-written vector-Jacobian products; a
//! [`VjpNode`] bundles a forward value with its pullback so stages can be
//! chained. Central finite differences ([`fd_gradient`], [`fd_check`]) are the
//! independent oracle every analytic gradient in the crate is tested against.

use thiserror::Error;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("non-finite function value at coordinate {index} (step {sign:+})")]
    NonFinite { index: usize, sign: i8 },
    #[error("gradient length {got} does not match input length {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>, DiffError>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        if !fp.is_finite() {
            return Err(DiffError::NonFinite { index: i, sign: 1 });
        }
        probe[i] = x[i] - h;
        let fm = f(&probe);
        if !fm.is_finite() {
            return Err(DiffError::NonFinite { index: i, sign: -1 });
        }
        probe[i] = x[i];
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Max over coordinates of `|fd_i - g_i| / max(1, |g_i|)`.
pub fn fd_check<F>(f: F, x: &[f64], analytic_grad: &[f64], h: f64) -> Result<f64, DiffError>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic_grad.len() != x.len() {
        return Err(DiffError::LengthMismatch { expected: x.len(), got: analytic_grad.len() });
    }
    let fd = fd_gradient(f, x, h)?;
    Ok(fd
        .iter()
        .zip(analytic_grad)
        .map(|(a, g)| (a - g).abs() / g.abs().max(1.0))
        .fold(0.0, f64::max))
}

/// Scale-free comparison: `max_i |a_i - b_i| / max_i |b_i|`.
///
/// Returns the absolute difference when `b` is identically zero.
pub fn rel_err_inf(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

type Pullback<'a> = Box<dyn Fn(&[f64]) -> Vec<f64> + 'a>;

/// A forward value together with its vector-Jacobian product.
pub struct VjpNode<'a, T> {
    pub value: T,
    pullback: Pullback<'a>,
}

impl<'a, T> VjpNode<'a, T> {
    pub fn new(value: T, pullback: impl Fn(&[f64]) -> Vec<f64> + 'a) -> Self {
        Self { value, pullback: Box::new(pullback) }
    }

    /// Maps an output cotangent to the input cotangent.
    pub fn vjp(&self, cotangent: &[f64]) -> Vec<f64> {
        (self.pullback)(cotangent)
    }

    /// Feeds this node's value into `next`; the composed pullback applies
    /// `next`'s VJP first, then this node's.
    pub fn then<U>(self, next: impl FnOnce(&T) -> VjpNode<'a, U>) -> VjpNode<'a, U>
    where
        T: 'a,
    {
        let VjpNode { value, pullback: first } = self;
        let VjpNode { value: out, pullback: second } = next(&value);
        VjpNode { value: out, pullback: Box::new(move |c| first(&second(c))) }
    }
}

/// Pullback of a dense Jacobian stored row-major with `rows x cols` entries.
pub fn dense_vjp(jacobian: &[f64], rows: usize, cols: usize, cotangent: &[f64]) -> Vec<f64> {
    debug_assert_eq!(jacobian.len(), rows * cols);
    debug_assert_eq!(cotangent.len(), rows);
    let mut out = vec![0.0; cols];
    for (r, c) in cotangent.iter().enumerate() {
        if *c == 0.0 {
            continue;
        }
        for (o, j) in out.iter_mut().zip(&jacobian[r * cols..(r + 1) * cols]) {
            *o += c * j;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let err = fd_check(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], &[2.0, 4.0], DEFAULT_STEP).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_has_zero_error() {
        let err = fd_check(|_| 3.5, &[0.3, -1.0, 7.0], &[0.0; 3], DEFAULT_STEP).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_is_reported() {
        let r = fd_check(|x| (x[0]).ln(), &[0.0], &[1.0], DEFAULT_STEP);
        assert!(matches!(r, Err(DiffError::NonFinite { index: 0, .. })));
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(
            fd_check(|_| 0.0, &[1.0, 2.0], &[0.0], DEFAULT_STEP),
            Err(DiffError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn chained_vjp_matches_product_of_jacobians() {
        // f(x) = A x, g(y) = B y, h = sum(z^2)
        let a = [1.0, 2.0, -1.0, 0.5, 3.0, 1.0];
        let b = [2.0, -1.0, 0.0, 1.0, 4.0, 1.0];
        let x = [0.3, -0.7, 1.1];
        let node = VjpNode::new(x.to_vec(), |c| c.to_vec())
            .then(|x| {
                let y = (0..2).map(|r| (0..3).map(|c| a[r * 3 + c] * x[c]).sum()).collect::<Vec<f64>>();
                VjpNode::new(y, move |c| dense_vjp(&a, 2, 3, c))
            })
            .then(|y| {
                let z = (0..3).map(|r| (0..2).map(|c| b[r * 2 + c] * y[c]).sum()).collect::<Vec<f64>>();
                VjpNode::new(z, move |c| dense_vjp(&b, 3, 2, c))
            });
        let z = node.value.clone();
        let gz: Vec<f64> = z.iter().map(|v| 2.0 * v).collect();
        let gx = node.vjp(&gz);

        // explicit (BA)^T g
        let mut ba = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                ba[r * 3 + c] = (0..2).map(|k| b[r * 2 + k] * a[k * 3 + c]).sum();
            }
        }
        let direct = dense_vjp(&ba, 3, 3, &gz);
        for (p, q) in gx.iter().zip(&direct) {
            assert!((p - q).abs() <= 1e-12 * q.abs().max(1.0));
        }

        let f = |x: &[f64]| {
            (0..3)
                .map(|r| {
                    let v: f64 = (0..3).map(|c| ba[r * 3 + c] * x[c]).sum();
                    v * v
                })
                .sum::<f64>()
        };
        assert!(fd_check(f, &x, &gx, DEFAULT_STEP).unwrap() < 1e-6);
    }

    #[test]
    fn rel_err_scale_free() {
        assert_eq!(rel_err_inf(&[1e-6, 2e-6], &[1e-6, 2e-6]), 0.0);
        assert!((rel_err_inf(&[1.1e-6], &[1e-6]) - 0.1).abs() < 1e-9);
        assert_eq!(rel_err_inf(&[0.5], &[0.0]), 0.5);
    }
}
