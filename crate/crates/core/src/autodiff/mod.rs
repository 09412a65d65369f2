//! Reverse-mode differentiation over dense tensors.
//!
//! [`Tape`] records primitive applications whose inputs depend on a
//! parameter leaf and replays them backwards once. Values that do not depend
//! on any parameter are kept as plain constants, so a tape with no
//! parameters is an ordinary (tape-free) forward evaluation.

mod tape;
mod tensor;

pub use tape::{GradMap, Tape, Var};
pub use tensor::Scalar;
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::par;

/// Central-difference gradient `(f(p+εeᵢ) − f(p−εeᵢ)) / 2ε` for every coordinate.
pub fn finite_diff_gradient<F>(f: F, p: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync + Send,
{
    let coords: Vec<usize> = (0..p.len()).collect();
    finite_diff_at(f, p, eps, &coords)
}

/// Central differences restricted to `coords`; returned in the same order.
pub fn finite_diff_at<F>(f: F, p: &[f64], eps: f64, coords: &[usize]) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync + Send,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    par::try_map_range(coords.len(), |n| {
        let i = coords[n];
        let mut q = p.to_vec();
        q[i] = p[i] + eps;
        let hi = f(&q)?;
        q[i] = p[i] - eps;
        let lo = f(&q)?;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff" });
        }
        Ok((hi - lo) / (2.0 * eps))
    })
}

/// Largest coordinate-wise relative error `|a−b| / max(|a|, |b|, floor)`.
///
/// `floor` keeps coordinates whose true value is essentially zero from
/// dominating through finite-difference noise; pass a small fraction of the
/// gradient's scale.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 1.0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_three_four_five() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3.0, 4.0]));
        let y = tape.l2_normalize(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.6, 0.8]);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2.5; 8]));
        let g = tape.constant(t(&[1.0; 8]));
        let b = tape.constant(t(&[0.0; 8]));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!(tape.value(y).max_abs() < 1e-12);
    }

    #[test]
    fn squared_norm_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1.0, 2.0]));
        let xx = tape.mul(x, x).unwrap();
        let loss = tape.sum(xx).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn softmax_dot_matches_finite_differences() {
        let z0 = [0.3, -1.2, 0.7, 2.0, -0.4];
        let c = [1.0, -2.0, 0.5, 3.0, 0.25];
        let f = |z: &[f64]| -> Result<f64> {
            let mut tape = Tape::new();
            let zv = tape.constant(t(z));
            let s = tape.softmax(zv, 1.0)?;
            let cv = tape.constant(t(&c));
            let m = tape.mul(s, cv)?;
            let l = tape.sum(m)?;
            Ok(tape.value(l).data()[0])
        };
        let mut tape = Tape::new();
        let zv = tape.param(t(&z0));
        let s = tape.softmax(zv, 1.0).unwrap();
        let cv = tape.constant(t(&c));
        let m = tape.mul(s, cv).unwrap();
        let l = tape.sum(m).unwrap();
        let grads = tape.backward(l).unwrap();
        let fd = finite_diff_gradient(f, &z0, 1e-5).unwrap();
        let err = max_relative_error(grads.get(zv).unwrap().data(), &fd, 1e-12);
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn uniform_logits_are_stationary_for_kl() {
        let mut tape = Tape::new();
        let z = tape.param(t(&[0.7; 16]));
        let ls = tape.log_softmax(z, 15.0).unwrap();
        let m = tape.mean(ls).unwrap();
        let neg = tape.scale(m, -1.0).unwrap();
        let loss = tape.offset(neg, -(16f64).ln()).unwrap();
        assert!(tape.value(loss).data()[0].abs() < 1e-12);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(z).unwrap().norm() < 1e-8);
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_diff_gradient(|p: &[f64]| Ok(p[0] * p[0]), &[3.0], 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-7);

        let a = [[2.0, -1.0, 0.5], [0.3, 1.5, -2.0], [1.0, 0.0, 4.0]];
        let quad = |p: &[f64]| -> Result<f64> {
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    s += p[i] * a[i][j] * p[j];
                }
            }
            Ok(s)
        };
        let p = [0.4, -1.1, 2.2];
        let g = finite_diff_gradient(quad, &p, 1e-5).unwrap();
        for i in 0..3 {
            let exact: f64 = (0..3).map(|j| (a[i][j] + a[j][i]) * p[j]).sum();
            assert!((g[i] - exact).abs() < 1e-6);
        }

        let g = finite_diff_gradient(|_: &[f64]| Ok(1.25), &[1.0, 2.0, 3.0], 1e-3).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_difference_rejects_bad_step_and_non_finite() {
        assert!(finite_diff_gradient(|_: &[f64]| Ok(0.0), &[1.0], 0.0).is_err());
        let r = finite_diff_gradient(|p: &[f64]| Ok(1.0 / (p[0] - 1e-3)), &[0.0], 1e-3);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached_losses() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1.0, 2.0]));
        let y = tape.scale(x, 2.0).unwrap();
        assert!(tape.backward(y).is_err());

        let mut tape = Tape::<f64>::new();
        let _x = tape.param(t(&[1.0]));
        let c = tape.constant(Tensor::scalar(3.0));
        assert!(tape.backward(c).is_err());
    }

    #[test]
    fn shape_mismatch_and_non_finite_are_errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1.0, 2.0]));
        let b = tape.constant(t(&[1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
        let big = tape.constant(t(&[1e308, 1e308]));
        assert!(matches!(tape.scale(big, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x) + sum(2x) → grad 3
        let mut tape = Tape::new();
        let x = tape.param(t(&[1.0, -1.0]));
        let s1 = tape.sum(x).unwrap();
        let x2 = tape.scale(x, 2.0).unwrap();
        let s2 = tape.sum(x2).unwrap();
        let l = tape.add(s1, s2).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
    }
}
