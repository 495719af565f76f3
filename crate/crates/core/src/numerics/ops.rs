//! Differentiable primitives and a few composites built from them.

use std::sync::Arc;

use crate::error::{invalid, Error, Result};

use super::autograd::Op;
use super::tensor::{
    broadcast_binary, expand_kernel, matmul_kernel, split_axis, sum_to_kernel, Tensor,
};

/// Variance epsilon used by [`Tensor::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tensor {
    fn unary(&self, name: &'static str, f: impl Fn(f64) -> f64, op: impl FnOnce(Tensor) -> Op) -> Result<Tensor> {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_op(name, data, &self.shape.clone(), &[self], || op(self.clone()))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (d, s) = broadcast_binary("add", self, other, |a, b| a + b)?;
        Tensor::from_op("add", d, &s, &[self, other], || Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (d, s) = broadcast_binary("sub", self, other, |a, b| a - b)?;
        Tensor::from_op("sub", d, &s, &[self, other], || Op::Sub(self.clone(), other.clone()))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (d, s) = broadcast_binary("mul", self, other, |a, b| a * b)?;
        Tensor::from_op("mul", d, &s, &[self, other], || Op::Mul(self.clone(), other.clone()))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.mul(&other.recip()?)
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        self.unary("scale", |v| v * s, |x| Op::Scale(x, s))
    }

    /// `scale * x + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> Result<Tensor> {
        let scaled = self.scale(scale)?;
        if shift == 0.0 {
            return Ok(scaled);
        }
        scaled.add(&Tensor::scalar(shift))
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary("relu", |v| v.max(0.0), Op::Relu)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary("exp", f64::exp, Op::Exp)
    }

    pub fn log(&self) -> Result<Tensor> {
        self.unary("log", f64::ln, Op::Log)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.unary("sqrt", f64::sqrt, Op::Sqrt)
    }

    pub fn recip(&self) -> Result<Tensor> {
        self.unary("recip", |v| 1.0 / v, Op::Recip)
    }

    /// `1/x`, with `0` mapped to `0`. Used by the backward rule of `sqrt` so
    /// that the gradient of a norm at the origin is zero instead of infinite.
    pub(crate) fn safe_recip(&self) -> Result<Tensor> {
        self.unary("safe_recip", |v| if v == 0.0 { 0.0 } else { 1.0 / v }, Op::SafeRecip)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.unary("tanh", f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary(
            "sigmoid",
            |v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid,
        )
    }

    pub fn square(&self) -> Result<Tensor> {
        self.mul(self)
    }

    /// Sum down to `target`, which must broadcast back to this shape.
    pub fn sum_to(&self, target: &[usize]) -> Result<Tensor> {
        if *self.shape == *target {
            return Ok(self.clone());
        }
        let d = sum_to_kernel(self, target)?;
        Tensor::from_op("sum_to", d, target, &[self], || Op::SumTo(self.clone()))
    }

    /// Broadcast to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor> {
        if *self.shape == *shape {
            return Ok(self.clone());
        }
        let d = expand_kernel(self, shape)?;
        Tensor::from_op("expand", d, shape, &[self], || Op::Expand(self.clone()))
    }

    pub fn sum(&self) -> Result<Tensor> {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.len().max(1) as f64;
        self.sum()?.scale(1.0 / n)
    }

    fn check_axis(&self, op: &str, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(invalid(format!("{op}: axis {axis} out of range for shape {:?}", self.shape())));
        }
        Ok(())
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        self.check_axis("sum_axis", axis)?;
        let mut kept = self.shape.to_vec();
        kept[axis] = 1;
        let s = self.sum_to(&kept)?;
        if keepdim {
            Ok(s)
        } else {
            kept.remove(axis);
            s.reshape(&kept)
        }
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        self.check_axis("mean_axis", axis)?;
        let n = self.dim(axis) as f64;
        self.sum_axis(axis, keepdim)?.scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.to_vec(),
                rhs: shape.to_vec(),
            });
        }
        if *self.shape == *shape {
            return Ok(self.clone());
        }
        Ok(self.view_op(shape, || Op::Reshape(self.clone())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(invalid(format!("transpose needs rank >= 2, got {:?}", self.shape())));
        }
        let (m, n) = (self.shape[r - 2], self.shape[r - 1]);
        let mut shape = self.shape.to_vec();
        shape.swap(r - 2, r - 1);
        let src = self.data();
        let mut out = vec![0.0; src.len()];
        for (blk_in, blk_out) in src.chunks(m * n).zip(out.chunks_mut(m * n)) {
            for i in 0..m {
                for j in 0..n {
                    blk_out[j * m + i] = blk_in[i * n + j];
                }
            }
        }
        Tensor::from_op("transpose", out, &shape, &[self], || Op::TransposeLast(self.clone()))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_t(other, false, false)
    }

    /// Matrix product with either operand's last two axes transposed in
    /// place of an explicit [`Tensor::transpose`].
    pub fn matmul_t(&self, other: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
        let (d, s) = matmul_kernel(self, other, ta, tb)?;
        Tensor::from_op("matmul", d, &s, &[self, other], || Op::MatMul {
            a: self.clone(),
            b: other.clone(),
            ta,
            tb,
        })
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes_12(&self) -> Result<Tensor> {
        let &[a, b, c, d] = self.shape() else {
            return Err(invalid(format!("swap_axes_12 needs rank 4, got {:?}", self.shape())));
        };
        let src = self.data();
        let mut out = Vec::with_capacity(src.len());
        for i in 0..a {
            for k in 0..c {
                for j in 0..b {
                    let at = ((i * b + j) * c + k) * d;
                    out.extend_from_slice(&src[at..at + d]);
                }
            }
        }
        Tensor::from_op("swap_axes_12", out, &[a, c, b, d], &[self], || Op::SwapAxes12(self.clone()))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.check_axis("slice", axis)?;
        if start + len > self.dim(axis) {
            return Err(invalid(format!(
                "slice [{start}, {}) out of range for axis {axis} of {:?}",
                start + len,
                self.shape()
            )));
        }
        if start == 0 && len == self.dim(axis) {
            return Ok(self.clone());
        }
        let (outer, n, inner) = split_axis(&self.shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape.to_vec();
        shape[axis] = len;
        Tensor::from_op("slice", out, &shape, &[self], || Op::Slice {
            x: self.clone(),
            axis,
            start,
        })
    }

    /// Zero-pads `axis` with `before` and `after` entries.
    pub fn pad(&self, axis: usize, before: usize, after: usize) -> Result<Tensor> {
        self.check_axis("pad", axis)?;
        if before == 0 && after == 0 {
            return Ok(self.clone());
        }
        let (outer, n, inner) = split_axis(&self.shape, axis);
        let total = before + n + after;
        let mut out = vec![0.0; outer * total * inner];
        for o in 0..outer {
            let dst = o * total * inner + before * inner;
            out[dst..dst + n * inner].copy_from_slice(&self.data()[o * n * inner..(o + 1) * n * inner]);
        }
        let mut shape = self.shape.to_vec();
        shape[axis] = total;
        Tensor::from_op("pad", out, &shape, &[self], || Op::Pad {
            x: self.clone(),
            axis,
            before,
        })
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| invalid("concat of zero tensors"))?;
        first.check_axis("concat", axis)?;
        for p in &parts[1..] {
            let compatible = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let total: usize = parts.iter().map(|p| p.dim(axis)).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let blk = p.dim(axis) * inner;
                out.extend_from_slice(&p.data()[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::from_op("concat", out, &shape, &refs, || Op::Concat {
            parts: parts.to_vec(),
            axis,
        })
    }

    /// Gathers rows (entries of axis 0).
    pub fn index_select_rows(&self, idx: Arc<Vec<usize>>) -> Result<Tensor> {
        if self.rank() == 0 {
            return Err(invalid("index_select on a scalar"));
        }
        let rows = self.dim(0);
        let inner = self.len() / rows.max(1);
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx.iter() {
            if i >= rows {
                return Err(invalid(format!("row index {i} out of range for {rows} rows")));
            }
            out.extend_from_slice(&self.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.to_vec();
        shape[0] = idx.len();
        Tensor::from_op("index_select", out, &shape, &[self], || Op::IndexSelect {
            table: self.clone(),
            idx,
        })
    }

    /// Adds row `k` of this tensor into row `idx[k]` of a zero tensor with `rows` rows.
    pub fn scatter_add_rows(&self, idx: Arc<Vec<usize>>, rows: usize) -> Result<Tensor> {
        if self.rank() == 0 || self.dim(0) != idx.len() {
            return Err(invalid(format!(
                "scatter_add: {} indices for shape {:?}",
                idx.len(),
                self.shape()
            )));
        }
        let inner = self.len() / idx.len().max(1);
        let mut out = vec![0.0; rows * inner];
        for (k, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(invalid(format!("row index {i} out of range for {rows} rows")));
            }
            for (o, &v) in out[i * inner..(i + 1) * inner].iter_mut().zip(&self.data()[k * inner..(k + 1) * inner]) {
                *o += v;
            }
        }
        let mut shape = self.shape.to_vec();
        shape[0] = rows;
        Tensor::from_op("scatter_add", out, &shape, &[self], || Op::ScatterAdd {
            src: self.clone(),
            idx,
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor> {
        let r = self.rank();
        if r == 0 {
            return Err(invalid("softmax on a scalar"));
        }
        let n = self.shape[r - 1];
        let mut out = Vec::with_capacity(self.len());
        for row in self.data().chunks(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut total = 0.0;
            for &v in row {
                let e = (v - max).exp();
                total += e;
                out.push(e);
            }
            for v in &mut out[start..] {
                *v /= total;
            }
        }
        Tensor::from_op("softmax", out, &self.shape.clone(), &[self], || Op::Softmax(self.clone()))
    }

    /// `softmax(self + bias)` over the last axis; `bias` broadcasts.
    pub fn softmax_with_bias(&self, bias: &Tensor) -> Result<Tensor> {
        self.add(bias)?.softmax()
    }

    /// Layer normalization over the last axis with learned `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        self.normalize_last()?.mul(gamma)?.add(beta)
    }

    /// `(x - mean) / sqrt(var + eps)` over the last axis.
    pub fn normalize_last(&self) -> Result<Tensor> {
        let d = *self.shape().last().ok_or_else(|| invalid("normalize on a scalar"))?;
        let mut out = Vec::with_capacity(self.len());
        for row in self.data().chunks(d.max(1)) {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            out.extend(row.iter().map(|v| (v - mu) * inv));
        }
        Tensor::from_op("normalize", out, &self.shape.clone(), &[self], || Op::Normalize(self.clone()))
    }

    /// `1 / sqrt(var + eps)` over the last axis, kept as a size-1 axis.
    pub(crate) fn inv_std_last(&self) -> Result<Tensor> {
        let last = self.rank().checked_sub(1).ok_or_else(|| invalid("inv_std on a scalar"))?;
        let centered = self.sub(&self.mean_axis(last, true)?)?;
        let var = centered.square()?.mean_axis(last, true)?;
        var.affine(1.0, LAYER_NORM_EPS)?.sqrt()?.recip()
    }

    /// Squared L2 norm of each sample (reduces every axis but the first).
    pub fn sq_norm_per_sample(&self) -> Result<Tensor> {
        if self.rank() == 0 {
            return Err(invalid("sq_norm_per_sample on a scalar"));
        }
        let b = self.dim(0);
        self.reshape(&[b, self.len() / b.max(1)])?.square()?.sum_axis(1, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_mode;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn softmax_of_zero_logits_is_uniform() {
        let s = Tensor::zeros(&[4]).softmax_with_bias(&Tensor::zeros(&[4])).unwrap();
        assert_eq!(s.data(), &[0.25; 4]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let y = t(&[1.0, 1.0, 1.0], &[1, 3]).layer_norm(&Tensor::ones(&[3]), &Tensor::zeros(&[3])).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn identity_matmul_is_noop() {
        let eye = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        assert_eq!(eye.matmul(&x).unwrap().data(), x.data());
    }

    #[test]
    fn batched_matmul_broadcasts_weight() {
        let _g = check_mode();
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 1, 2]);
        let w = t(&[1.0, 1.0, 0.0, 2.0], &[2, 2]);
        let y = a.matmul(&w).unwrap();
        assert_eq!(y.shape(), &[2, 1, 2]);
        assert_eq!(y.data(), &[1.0, 5.0, 3.0, 11.0]);
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let err = Tensor::zeros(&[2, 3]).add(&Tensor::zeros(&[4])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
        let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn slice_pad_concat_agree() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[1, 3, 2]);
        let a = x.slice(1, 0, 1).unwrap();
        let b = x.slice(1, 1, 2).unwrap();
        assert_eq!(Tensor::concat(&[a, b.clone()], 1).unwrap().data(), x.data());
        let p = b.pad(1, 1, 0).unwrap();
        assert_eq!(p.data(), &[0.0, 0.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn scatter_add_accumulates_repeated_rows() {
        let src = t(&[1.0, 2.0, 3.0], &[3, 1]);
        let out = src.scatter_add_rows(Arc::new(vec![0, 2, 0]), 3).unwrap();
        assert_eq!(out.data(), &[4.0, 0.0, 2.0]);
    }

    #[test]
    fn nan_is_detected() {
        crate::numerics::set_finite_checks(true);
        let res = t(&[-1.0], &[1]).log();
        assert!(matches!(res, Err(Error::NonFinite { op: "log" })));
    }
}
