use std::collections::HashMap;

use super::tensor::{gemm, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: T,
    },
    Offset {
        a: Var,
    },
    Reshape {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
        inv_tau: T,
    },
    LogSoftmax {
        x: Var,
        inv_tau: T,
        mask: Option<Vec<bool>>,
    },
    Gelu {
        x: Var,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    MeanRows {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    is_param: bool,
}

/// Gradients of a scalar loss with respect to every parameter leaf.
#[derive(Debug)]
pub struct GradMap<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> GradMap<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Single-use record of primitive applications.
///
/// Leaves are either constants or parameters. Any value derived from a
/// parameter requires a gradient; [`Tape::backward`] walks the recorded nodes
/// once, in reverse order, and returns `∂loss/∂param` for every parameter.
/// Gradients from multiple consumers of a value are summed.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LAYER_NORM_EPS: f64 = 1e-6;
const NORMALIZE_EPS: f64 = 1e-12;

fn gelu_parts(x: f64) -> (f64, f64) {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (cdf, pdf)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            is_param: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            is_param: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            is_param: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` with no gradient path back to its inputs.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// `a·b` for `a: [m,k]`, `b: [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 {
            return Err(Error::shape("matmul", "operands must be matrices"));
        }
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (br, bc) = (bv.shape()[0], bv.shape()[1]);
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?} (trans_b={})", av.shape(), bv.shape(), trans_b),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        let bm = MatRef::new(bv.data(), br, bc);
        gemm(
            T::one(),
            MatRef::new(av.data(), m, k),
            if trans_b { bm.t() } else { bm },
            T::zero(),
            &mut out,
        );
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b }, rg, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Add { a, b }, rg, "add")
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mul", format!("{:?} * {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Mul { a, b }, rg, "mul")
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale { a, factor }, rg, "scale")
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, amount: T) -> Result<Var> {
        let value = self.value(a).map(|x| x + amount);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Offset { a }, rg, "offset")
    }

    /// Same data under a new shape.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Reshape { x }, rg, "reshape")
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let n = rows.len();
        let flat = self.concat(rows, 0)?;
        let d = self.value(flat).len() / n.max(1);
        if self.value(rows[0]).rank() != 1 {
            return Err(Error::shape("stack_rows", "rows must be vectors"));
        }
        self.reshape(flat, vec![n, d])
    }

    /// `x·Wᵀ + b` with `W: [out, in]`, `x: [n, in]` or `[in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if wv.rank() != 2 {
            return Err(Error::shape("linear", "weight must be a matrix"));
        }
        let (out_dim, in_dim) = (wv.shape()[0], wv.shape()[1]);
        let (n, xin) = xv.as_matrix_dims();
        if xin != in_dim || xv.rank() == 0 || xv.rank() > 2 {
            return Err(Error::shape(
                "linear",
                format!("input {:?} vs weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        let mut out = vec![T::zero(); n * out_dim];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [out_dim] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} vs out {}", bv.shape(), out_dim),
                ));
            }
            for row in out.chunks_mut(out_dim) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(
            T::one(),
            MatRef::new(xv.data(), n, in_dim),
            MatRef::new(wv.data(), out_dim, in_dim).t(),
            T::one(),
            &mut out,
        );
        let shape = if xv.rank() == 1 { vec![out_dim] } else { vec![n, out_dim] };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.any_grad(&inputs);
        self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, rg, "linear")
    }

    /// Normalizes over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = xv.as_matrix_dims();
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Error::shape("layer_norm", "affine parameters must match last axis"));
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let eps = T::c(LAYER_NORM_EPS);
        let dn = T::c(d as f64);
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
            "layer_norm",
        )
    }

    /// Softmax of `x / tau` over the last axis.
    pub fn softmax(&mut self, x: Var, tau: T) -> Result<Var> {
        if tau <= T::zero() {
            return Err(Error::invalid("softmax temperature must be positive"));
        }
        let inv_tau = T::one() / tau;
        let xv = self.value(x);
        let (rows, d) = xv.as_matrix_dims();
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v * inv_tau));
            let o = &mut out[r * d..(r + 1) * d];
            let mut s = T::zero();
            for j in 0..d {
                o[j] = (row[j] * inv_tau - mx).exp();
                s += o[j];
            }
            o.iter_mut().for_each(|v| *v = *v / s);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Softmax { x, inv_tau }, rg, "softmax")
    }

    /// Log-softmax of `x / tau` over the last axis.
    pub fn log_softmax(&mut self, x: Var, tau: T) -> Result<Var> {
        self.log_softmax_impl(x, tau, None)
    }

    /// Log-softmax where `exclude[i]` entries are left out of the normalizer.
    /// Excluded outputs are 0 and carry no gradient.
    pub fn log_softmax_masked(&mut self, x: Var, tau: T, exclude: Vec<bool>) -> Result<Var> {
        if exclude.len() != self.value(x).len() {
            return Err(Error::shape("log_softmax_masked", "mask length differs from input"));
        }
        self.log_softmax_impl(x, tau, Some(exclude))
    }

    fn log_softmax_impl(&mut self, x: Var, tau: T, mask: Option<Vec<bool>>) -> Result<Var> {
        if tau <= T::zero() {
            return Err(Error::invalid("log_softmax temperature must be positive"));
        }
        let inv_tau = T::one() / tau;
        let xv = self.value(x);
        let (rows, d) = xv.as_matrix_dims();
        let keep = |i: usize| mask.as_ref().is_none_or(|m| !m[i]);
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let base = r * d;
            let row = &xv.data()[base..base + d];
            let mut mx = T::neg_infinity();
            for j in 0..d {
                if keep(base + j) {
                    mx = mx.max(row[j] * inv_tau);
                }
            }
            if mx == T::neg_infinity() {
                return Err(Error::invalid("log_softmax row has every entry excluded"));
            }
            let mut s = T::zero();
            for j in 0..d {
                if keep(base + j) {
                    s += (row[j] * inv_tau - mx).exp();
                }
            }
            let lse = mx + s.ln();
            for j in 0..d {
                if keep(base + j) {
                    out[base + j] = row[j] * inv_tau - lse;
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::LogSoftmax { x, inv_tau, mask }, rg, "log_softmax")
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| {
            let xf = v.f64();
            T::c(xf * gelu_parts(xf).0)
        });
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Gelu { x }, rg, "gelu")
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = xv.as_matrix_dims();
        let eps = T::c(NORMALIZE_EPS);
        let mut norms = vec![T::zero(); rows];
        let mut out = xv.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            norms[r] = n;
            row.iter_mut().for_each(|v| *v = *v / n);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::L2Normalize { x, norms }, rg, "l2_normalize")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = xv.data().iter().copied().sum::<T>() / T::c(xv.len() as f64);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg, "mean")
    }

    /// Mean over axis 0 of a matrix: `[n, d] -> [d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.shape()[0] == 0 {
            return Err(Error::shape("mean_rows", format!("{:?}", xv.shape())));
        }
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![T::zero(); d];
        for r in 0..n {
            for (o, &v) in out.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        let inv = T::one() / T::c(n as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::vector(out), Op::MeanRows { x }, rg, "mean_rows")
    }

    /// Concatenates rank-1 or rank-2 tensors along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat", "no inputs"));
        };
        let rank = self.value(first).rank();
        if !(1..=2).contains(&rank) || axis >= rank {
            return Err(Error::shape("concat", format!("rank {} axis {}", rank, axis)));
        }
        for &p in parts {
            let s = self.value(p).shape();
            let ok = s.len() == rank && (rank == 1 || s[1 - axis] == self.value(first).shape()[1 - axis]);
            if !ok {
                return Err(Error::shape("concat", format!("incompatible part {:?}", s)));
            }
        }
        let value = if rank == 1 || axis == 0 {
            let mut data = Vec::new();
            let mut lead = 0;
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
                lead += self.value(p).shape()[0];
            }
            let mut shape = self.value(first).shape().to_vec();
            shape[0] = lead;
            Tensor::new(shape, data)?
        } else {
            let rows = self.value(first).shape()[0];
            let total: usize = parts.iter().map(|&p| self.value(p).shape()[1]).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(r));
                }
            }
            Tensor::new(vec![rows, total], data)?
        };
        let rg = self.any_grad(parts);
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
            "concat",
        )
    }

    /// `len` entries starting at `start` along `axis` of a rank-1/2 tensor.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.rank();
        if !(1..=2).contains(&rank) || axis >= rank || start + len > xv.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!("{:?} axis {} [{}, {})", xv.shape(), axis, start, start + len),
            ));
        }
        let value = if rank == 1 {
            Tensor::vector(xv.data()[start..start + len].to_vec())
        } else if axis == 0 {
            let cols = xv.shape()[1];
            Tensor::new(vec![len, cols], xv.data()[start * cols..(start + len) * cols].to_vec())?
        } else {
            let rows = xv.shape()[0];
            let data = (0..rows)
                .flat_map(|r| xv.row(r)[start..start + len].iter().copied())
                .collect();
            Tensor::new(vec![rows, len], data)?
        };
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Slice { x, axis, start, len }, rg, "slice")
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv: [T, 3d]` holds queries, keys and values side by side; head `h`
    /// uses columns `h·d/heads .. (h+1)·d/heads` of each block. Output `[T, d]`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let v = self.value(qkv);
        if v.rank() != 2 || !v.shape()[1].is_multiple_of(3) || heads == 0 || !(v.shape()[1] / 3).is_multiple_of(heads) {
            return Err(Error::shape(
                "attention",
                format!("qkv {:?} with {} heads", v.shape(), heads),
            ));
        }
        let (t, w) = (v.shape()[0], v.shape()[1]);
        let d = w / 3;
        let dh = d / heads;
        let scale = T::one() / T::c(dh as f64).sqrt();
        let src = v.data();
        let mut probs = vec![T::zero(); heads * t * t];
        let mut out = vec![T::zero(); t * d];
        for h in 0..heads {
            let p = &mut probs[h * t * t..(h + 1) * t * t];
            let qh = gather_cols(src, t, w, h * dh, dh);
            let kh = gather_cols(src, t, w, d + h * dh, dh);
            let vh = gather_cols(src, t, w, 2 * d + h * dh, dh);
            gemm(
                scale,
                MatRef::new(&qh, t, dh),
                MatRef::new(&kh, t, dh).t(),
                T::zero(),
                p,
            );
            for row in p.chunks_mut(t) {
                let mx = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                let mut s = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    s += *x;
                }
                row.iter_mut().for_each(|x| *x = *x / s);
            }
            let mut oh = vec![T::zero(); t * dh];
            gemm(T::one(), MatRef::new(p, t, t), MatRef::new(&vh, t, dh), T::zero(), &mut oh);
            scatter_cols(&mut out, t, d, h * dh, dh, &oh);
        }
        let rg = self.any_grad(&[qkv]);
        self.push(Tensor::new(vec![t, d], out)?, Op::Attention { qkv, heads, probs }, rg, "attention")
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<GradMap<T>> {
        let lv = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::invalid("loss is not on this tape"))?;
        if lv.value.len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", lv.value.shape())));
        }
        if !lv.requires_grad {
            return Err(Error::invalid("loss does not depend on any parameter"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.value.shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if node.is_param {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .take(loss.0 + 1)
            .filter(|(_, n)| n.is_param)
            .map(|(i, n)| {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(n.value.shape().to_vec()));
                (Var(i), g)
            })
            .collect();
        Ok(GradMap { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let (br, bc) = (bv.shape()[0], bv.shape()[1]);
                let n = node.value.shape()[1];
                let gm = MatRef::new(g.data(), m, n);
                if rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    let bm = MatRef::new(bv.data(), br, bc);
                    // trans_b: C = A Bᵀ, dA = dC B ; else dA = dC Bᵀ
                    gemm(T::one(), gm, if *trans_b { bm } else { bm.t() }, T::zero(), &mut da);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if rg(*b) {
                    let mut db = vec![T::zero(); br * bc];
                    let am = MatRef::new(av.data(), m, k);
                    if *trans_b {
                        gemm(T::one(), gm.t(), am, T::zero(), &mut db);
                    } else {
                        gemm(T::one(), am.t(), gm, T::zero(), &mut db);
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![br, bc], db)?);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul { a, b } => {
                if rg(*a) {
                    let d = g.data().iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if rg(*b) {
                    let d = g.data().iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Scale { a, factor } => {
                self.accumulate(grads, *a, g.map(|x| x * *factor));
            }
            Op::Offset { a } => self.accumulate(grads, *a, g.clone()),
            Op::Reshape { x } => {
                let dx = g.clone().reshape(val(*x).shape().to_vec())?;
                self.accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (out_dim, in_dim) = (wv.shape()[0], wv.shape()[1]);
                let (n, _) = xv.as_matrix_dims();
                let gm = MatRef::new(g.data(), n, out_dim);
                if rg(*x) {
                    let mut dx = vec![T::zero(); n * in_dim];
                    gemm(T::one(), gm, MatRef::new(wv.data(), out_dim, in_dim), T::zero(), &mut dx);
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if rg(*w) {
                    let mut dw = vec![T::zero(); out_dim * in_dim];
                    gemm(T::one(), gm.t(), MatRef::new(xv.data(), n, in_dim), T::zero(), &mut dw);
                    self.accumulate(grads, *w, Tensor::new(vec![out_dim, in_dim], dw)?);
                }
                if let Some(b) = b {
                    if rg(*b) {
                        let mut db = vec![T::zero(); out_dim];
                        for row in g.data().chunks(out_dim) {
                            for (o, &v) in db.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::vector(db));
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *val(*gamma).shape().first().unwrap();
                let rows = xhat.len() / d;
                let gam = val(*gamma).data();
                if rg(*x) {
                    let dn = T::c(d as f64);
                    let mut dx = vec![T::zero(); rows * d];
                    for r in 0..rows {
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_g = T::zero();
                        let mut mean_gh = T::zero();
                        for j in 0..d {
                            let gg = gr[j] * gam[j];
                            mean_g += gg;
                            mean_gh += gg * hr[j];
                        }
                        mean_g = mean_g / dn;
                        mean_gh = mean_gh / dn;
                        for j in 0..d {
                            let gg = gr[j] * gam[j];
                            dx[r * d + j] = rstd[r] * (gg - mean_g - hr[j] * mean_gh);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(val(*x).shape().to_vec(), dx)?);
                }
                if rg(*gamma) || rg(*beta) {
                    let mut dg = vec![T::zero(); d];
                    let mut dbt = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            let gv = g.data()[r * d + j];
                            dg[j] += gv * xhat[r * d + j];
                            dbt[j] += gv;
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::vector(dg));
                    self.accumulate(grads, *beta, Tensor::vector(dbt));
                }
            }
            Op::Softmax { x, inv_tau } => {
                let y = &node.value;
                let (rows, d) = y.as_matrix_dims();
                let mut dx = vec![T::zero(); rows * d];
                for r in 0..rows {
                    let yr = y.row(r);
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = *inv_tau * yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::LogSoftmax { x, inv_tau, mask } => {
                let y = &node.value;
                let (rows, d) = y.as_matrix_dims();
                let keep = |i: usize| mask.as_ref().is_none_or(|m| !m[i]);
                let mut dx = vec![T::zero(); rows * d];
                for r in 0..rows {
                    let base = r * d;
                    let mut gsum = T::zero();
                    for j in 0..d {
                        if keep(base + j) {
                            gsum += g.data()[base + j];
                        }
                    }
                    for j in 0..d {
                        if keep(base + j) {
                            let p = y.data()[base + j].exp();
                            dx[base + j] = *inv_tau * (g.data()[base + j] - p * gsum);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::Gelu { x } => {
                let xv = val(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xi, &gi)| {
                        let xf = xi.f64();
                        let (cdf, pdf) = gelu_parts(xf);
                        gi * T::c(cdf + xf * pdf)
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let (rows, d) = y.as_matrix_dims();
                let eps = T::c(NORMALIZE_EPS);
                let mut dx = vec![T::zero(); rows * d];
                for r in 0..rows {
                    let yr = y.row(r);
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let n = norms[r];
                    // below the clamp the map is a fixed scaling
                    let dot: T = if n > eps {
                        yr.iter().zip(gr).map(|(&a, &b)| a * b).sum()
                    } else {
                        T::zero()
                    };
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::Sum { x } => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(val(*x).shape().to_vec(), gv));
            }
            Op::Mean { x } => {
                let xv = val(*x);
                let gv = g.data()[0] / T::c(xv.len() as f64);
                self.accumulate(grads, *x, Tensor::full(xv.shape().to_vec(), gv));
            }
            Op::MeanRows { x } => {
                let xv = val(*x);
                let n = xv.shape()[0];
                let inv = T::one() / T::c(n as f64);
                let row: Vec<T> = g.data().iter().map(|&v| v * inv).collect();
                let data = (0..n).flat_map(|_| row.iter().copied()).collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::Concat { parts, axis } => {
                let rank = g.rank();
                if rank == 1 || *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let pv = val(p);
                        let n = pv.len();
                        if rg(p) {
                            let t = Tensor::new(pv.shape().to_vec(), g.data()[off..off + n].to_vec())?;
                            self.accumulate(grads, p, t);
                        }
                        off += n;
                    }
                } else {
                    let rows = g.shape()[0];
                    let total = g.shape()[1];
                    let mut off = 0;
                    for &p in parts {
                        let c = val(p).shape()[1];
                        if rg(p) {
                            let data = (0..rows)
                                .flat_map(|r| g.data()[r * total + off..r * total + off + c].iter().copied())
                                .collect();
                            self.accumulate(grads, p, Tensor::new(vec![rows, c], data)?);
                        }
                        off += c;
                    }
                }
            }
            Op::Slice { x, axis, start, len } => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                if xv.rank() == 1 {
                    dx.data_mut()[*start..start + len].copy_from_slice(g.data());
                } else if *axis == 0 {
                    let cols = xv.shape()[1];
                    dx.data_mut()[start * cols..(start + len) * cols].copy_from_slice(g.data());
                } else {
                    let cols = xv.shape()[1];
                    for r in 0..xv.shape()[0] {
                        dx.data_mut()[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Attention { qkv, heads, probs } => {
                let src = val(*qkv).data();
                let (t, w) = (val(*qkv).shape()[0], val(*qkv).shape()[1]);
                let d = w / 3;
                let dh = d / heads;
                let scale = T::one() / T::c(dh as f64).sqrt();
                let mut dqkv = vec![T::zero(); t * w];
                for h in 0..*heads {
                    let p = &probs[h * t * t..(h + 1) * t * t];
                    let qh = gather_cols(src, t, w, h * dh, dh);
                    let kh = gather_cols(src, t, w, d + h * dh, dh);
                    let vh = gather_cols(src, t, w, 2 * d + h * dh, dh);
                    let go = gather_cols(g.data(), t, d, h * dh, dh);
                    // dV = Pᵀ dO
                    let mut dv = vec![T::zero(); t * dh];
                    gemm(T::one(), MatRef::new(p, t, t).t(), MatRef::new(&go, t, dh), T::zero(), &mut dv);
                    // dP = dO Vᵀ
                    let mut dp = vec![T::zero(); t * t];
                    gemm(T::one(), MatRef::new(&go, t, dh), MatRef::new(&vh, t, dh).t(), T::zero(), &mut dp);
                    // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                    for r in 0..t {
                        let pr = &p[r * t..(r + 1) * t];
                        let dr = &mut dp[r * t..(r + 1) * t];
                        let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                        for j in 0..t {
                            dr[j] = pr[j] * (dr[j] - dot);
                        }
                    }
                    let mut dq = vec![T::zero(); t * dh];
                    gemm(scale, MatRef::new(&dp, t, t), MatRef::new(&kh, t, dh), T::zero(), &mut dq);
                    let mut dk = vec![T::zero(); t * dh];
                    gemm(scale, MatRef::new(&dp, t, t).t(), MatRef::new(&qh, t, dh), T::zero(), &mut dk);
                    scatter_cols(&mut dqkv, t, w, h * dh, dh, &dq);
                    scatter_cols(&mut dqkv, t, w, d + h * dh, dh, &dk);
                    scatter_cols(&mut dqkv, t, w, 2 * d + h * dh, dh, &dv);
                }
                self.accumulate(grads, *qkv, Tensor::new(vec![t, w], dqkv)?);
            }
        }
        Ok(())
    }
}

fn gather_cols<T: Scalar>(src: &[T], rows: usize, width: usize, start: usize, len: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        out.extend_from_slice(&src[r * width + start..r * width + start + len]);
    }
    out
}

fn scatter_cols<T: Scalar>(dst: &mut [T], rows: usize, width: usize, start: usize, len: usize, src: &[T]) {
    for r in 0..rows {
        dst[r * width + start..r * width + start + len].copy_from_slice(&src[r * len..(r + 1) * len]);
    }
}
