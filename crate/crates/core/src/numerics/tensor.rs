use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

use super::autograd::{Node, Op};

thread_local! {
    static CHECK_MODE: Cell<bool> = const { Cell::new(false) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static FINITE_CHECKS: Cell<bool> = const { Cell::new(cfg!(debug_assertions)) };
}

static NEXT_NODE_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) fn next_node_id() -> u64 {
    NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Switches the current thread to 64-bit "check mode" until the guard drops.
///
/// Outside check mode every op rounds its output to the nearest `f32`, so the
/// values a model holds are exactly representable in 32 bits.
pub fn check_mode() -> CheckModeGuard {
    let prev = CHECK_MODE.with(|c| c.replace(true));
    CheckModeGuard { prev }
}

pub fn is_check_mode() -> bool {
    CHECK_MODE.with(|c| c.get())
}

pub struct CheckModeGuard {
    prev: bool,
}

impl Drop for CheckModeGuard {
    fn drop(&mut self) {
        CHECK_MODE.with(|c| c.set(self.prev));
    }
}

/// Disables graph recording on the current thread until the guard drops.
pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    NoGradGuard { prev }
}

pub(crate) fn enable_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|c| c.replace(true));
    NoGradGuard { prev }
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

/// Turns the per-op NaN/Inf scan on or off for this thread. On by default in
/// debug builds.
pub fn set_finite_checks(on: bool) {
    FINITE_CHECKS.with(|c| c.set(on));
}

pub(crate) fn round_storage(values: &mut [f64]) {
    if !is_check_mode() {
        for v in values.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// Dense row-major array, optionally attached to the differentiation graph.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) shape: Arc<[usize]>,
    pub(crate) data: Arc<Vec<f64>>,
    pub(crate) node: Option<Arc<Node>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape);
        if self.data.len() <= 16 {
            s.field("data", &self.data);
        }
        s.field("tracked", &self.node.is_some()).finish()
    }
}

impl Tensor {
    pub fn new(mut data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        round_storage(&mut data);
        Ok(Tensor::raw(data, shape))
    }

    pub(crate) fn raw(data: Vec<f64>, shape: &[usize]) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape: shape.into(),
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        let mut d = vec![v];
        round_storage(&mut d);
        Tensor::raw(d, &[])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::raw(vec![0.0; shape.iter().product()], shape)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        let mut d = vec![v; shape.iter().product()];
        round_storage(&mut d);
        Tensor::raw(d, shape)
    }

    pub fn zeros_like(&self) -> Tensor {
        Tensor::zeros(&self.shape)
    }

    /// A fresh graph leaf carrying a copy of this tensor's values.
    pub fn leaf(&self) -> Tensor {
        let node = Node::new(Op::Leaf, self.shape.clone(), self.data.clone());
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: Some(node),
        }
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn node_id(&self) -> Option<u64> {
        self.node.as_ref().map(|n| n.id)
    }

    pub(crate) fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    /// Builds an op result, attaching a graph node when recording is on and
    /// any input is tracked.
    pub(crate) fn from_op(
        name: &'static str,
        mut data: Vec<f64>,
        shape: &[usize],
        inputs: &[&Tensor],
        op: impl FnOnce() -> Op,
    ) -> Result<Tensor> {
        round_storage(&mut data);
        if FINITE_CHECKS.with(|c| c.get()) && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let shape: Arc<[usize]> = shape.into();
        let data = Arc::new(data);
        let node = if is_grad_enabled() && inputs.iter().any(|t| t.node.is_some()) {
            Some(Node::new(op(), shape.clone(), data.clone()))
        } else {
            None
        };
        Ok(Tensor { shape, data, node })
    }

    /// Like [`Tensor::from_op`] for ops that reuse the input storage as is.
    pub(crate) fn view_op(&self, shape: &[usize], op: impl FnOnce() -> Op) -> Tensor {
        let shape: Arc<[usize]> = shape.into();
        let node = if is_grad_enabled() && self.node.is_some() {
            Some(Node::new(op(), shape.clone(), self.data.clone()))
        } else {
            None
        };
        Tensor {
            shape,
            data: self.data.clone(),
            node,
        }
    }
}

// ---------------------------------------------------------------------------
// shape helpers and raw kernels

pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the (larger) `out` shape, zero where broadcast.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// `small` equals `big` with the last axis collapsed to 1.
fn is_column_of(small: &[usize], big: &[usize]) -> bool {
    let r = big.len();
    r > 0 && small.len() == r && small[r - 1] == 1 && small[..r - 1] == big[..r - 1]
}

/// Visits every element of `out_shape` in row-major order, yielding the source
/// offsets given per-operand strides.
fn for_each_offset2(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let n: usize = out_shape.iter().product();
    if n == 0 {
        return;
    }
    let last = out_shape[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    loop {
        for j in 0..last {
            f(oa + j * la, ob + j * lb);
        }
        // odometer over leading dims
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * idx[d];
            ob -= sb[d] * idx[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let out_shape = broadcast_shapes(&a.shape, &b.shape).ok_or_else(|| Error::Shape {
        op,
        lhs: a.shape.to_vec(),
        rhs: b.shape.to_vec(),
    })?;
    let (ad, bd) = (&a.data, &b.data);
    let out: Vec<f64> = if *a.shape == *b.shape {
        ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect()
    } else if *a.shape == *out_shape && is_suffix(&b.shape, &out_shape) && !bd.is_empty() {
        let mut out = Vec::with_capacity(ad.len());
        for chunk in ad.chunks(bd.len()) {
            out.extend(chunk.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)));
        }
        out
    } else if *b.shape == *out_shape && is_suffix(&a.shape, &out_shape) && !ad.is_empty() {
        let mut out = Vec::with_capacity(bd.len());
        for chunk in bd.chunks(ad.len()) {
            out.extend(ad.iter().zip(chunk.iter()).map(|(&x, &y)| f(x, y)));
        }
        out
    } else if *a.shape == *out_shape && is_column_of(&b.shape, &out_shape) {
        let d = out_shape[out_shape.len() - 1].max(1);
        let mut out = Vec::with_capacity(ad.len());
        for (row, &y) in ad.chunks(d).zip(bd.iter()) {
            out.extend(row.iter().map(|&x| f(x, y)));
        }
        out
    } else if *b.shape == *out_shape && is_column_of(&a.shape, &out_shape) {
        let d = out_shape[out_shape.len() - 1].max(1);
        let mut out = Vec::with_capacity(bd.len());
        for (row, &x) in bd.chunks(d).zip(ad.iter()) {
            out.extend(row.iter().map(|&y| f(x, y)));
        }
        out
    } else {
        let sa = broadcast_strides(&a.shape, &out_shape);
        let sb = broadcast_strides(&b.shape, &out_shape);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for_each_offset2(&out_shape, &sa, &sb, |ia, ib| out.push(f(ad[ia], bd[ib])));
        out
    };
    Ok((out, out_shape))
}

/// Sums `x` down to `target`, which must broadcast to `x`'s shape.
pub(crate) fn sum_to_kernel(x: &Tensor, target: &[usize]) -> Result<Vec<f64>> {
    let xs = &x.shape;
    if broadcast_shapes(target, xs).as_deref() != Some(&xs[..]) {
        return Err(Error::Shape {
            op: "sum_to",
            lhs: xs.to_vec(),
            rhs: target.to_vec(),
        });
    }
    let n: usize = target.iter().product();
    let mut out = vec![0.0; n];
    if n == 1 {
        out[0] = x.data.iter().sum();
    } else if is_suffix(target, xs) {
        for chunk in x.data.chunks(n) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
    } else if is_column_of(target, xs) {
        let d = xs[xs.len() - 1].max(1);
        for (o, row) in out.iter_mut().zip(x.data.chunks(d)) {
            *o = row.iter().sum();
        }
    } else {
        let st = broadcast_strides(target, xs);
        let zero = vec![0; xs.len()];
        let mut k = 0;
        for_each_offset2(xs, &st, &zero, |it, _| {
            out[it] += x.data[k];
            k += 1;
        });
    }
    Ok(out)
}

pub(crate) fn expand_kernel(x: &Tensor, shape: &[usize]) -> Result<Vec<f64>> {
    if broadcast_shapes(&x.shape, shape).as_deref() != Some(shape) {
        return Err(Error::Shape {
            op: "expand",
            lhs: x.shape.to_vec(),
            rhs: shape.to_vec(),
        });
    }
    let n: usize = shape.iter().product();
    if x.data.len() == 1 {
        return Ok(vec![x.data[0]; n]);
    }
    if is_suffix(&x.shape, shape) {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            out.extend_from_slice(&x.data);
        }
        return Ok(out);
    }
    if is_column_of(&x.shape, shape) {
        let d = shape[shape.len() - 1];
        let mut out = Vec::with_capacity(n);
        for &v in x.data.iter() {
            out.extend(std::iter::repeat_n(v, d));
        }
        return Ok(out);
    }
    let sx = broadcast_strides(&x.shape, shape);
    let zero = vec![0; shape.len()];
    let mut out = Vec::with_capacity(n);
    for_each_offset2(shape, &sx, &zero, |ix, _| out.push(x.data[ix]));
    Ok(out)
}

/// Batched `op(a) * op(b)` over the last two axes, where `op` transposes
/// when its flag is set, with broadcasting of leading axes. Returns output
/// data and shape.
pub(crate) fn matmul_kernel(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<(Vec<f64>, Vec<usize>)> {
    let err = || Error::Shape {
        op: "matmul",
        lhs: a.shape.to_vec(),
        rhs: b.shape.to_vec(),
    };
    if a.rank() < 2 || b.rank() < 2 {
        return Err(err());
    }
    let (ar, ac) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
    let (br, bc) = (b.shape[b.rank() - 2], b.shape[b.rank() - 1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(err());
    }
    let sa = if ta { Strides { row: 1, col: ac } } else { Strides { row: ac, col: 1 } };
    let sb = if tb { Strides { row: 1, col: bc } } else { Strides { row: bc, col: 1 } };
    let abatch = &a.shape[..a.rank() - 2];
    let bbatch = &b.shape[..b.rank() - 2];
    let batch = broadcast_shapes(abatch, bbatch).ok_or_else(err)?;
    let nb: usize = batch.iter().product();
    let mut out_shape = batch.clone();
    out_shape.extend([m, n]);
    let mut out = vec![0.0; nb * m * n];

    if bbatch.iter().product::<usize>() == 1 && *abatch == *batch && !ta {
        // one GEMM over the flattened leading axes
        gemm(nb * m, k, n, &a.data, sa, &b.data, sb, &mut out);
        return Ok((out, out_shape));
    }
    let bsa = broadcast_strides(abatch, &batch);
    let bsb = broadcast_strides(bbatch, &batch);
    let mut offsets = Vec::with_capacity(nb);
    if batch.is_empty() {
        offsets.push((0, 0));
    } else {
        for_each_offset2(&batch, &bsa, &bsb, |ia, ib| offsets.push((ia, ib)));
    }
    for (i, (ia, ib)) in offsets.into_iter().enumerate() {
        gemm(
            m,
            k,
            n,
            &a.data[ia * m * k..(ia + 1) * m * k],
            sa,
            &b.data[ib * k * n..(ib + 1) * k * n],
            sb,
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    Ok((out, out_shape))
}

#[derive(Clone, Copy)]
struct Strides {
    row: usize,
    col: usize,
}

/// Products this small skip the packing GEMM; its setup costs more than the
/// arithmetic.
const SMALL_GEMM: usize = 2048;

#[allow(clippy::too_many_arguments)]
fn small_gemm(m: usize, k: usize, n: usize, a: &[f64], sa: Strides, b: &[f64], sb: Strides, c: &mut [f64]) {
    if sa.col == 1 && sb.row == 1 {
        // rows of a against columns of b, both contiguous
        for (i, crow) in c.chunks_exact_mut(n).take(m).enumerate() {
            let arow = &a[i * sa.row..i * sa.row + k];
            for (j, cj) in crow.iter_mut().enumerate() {
                let bcol = &b[j * sb.col..j * sb.col + k];
                *cj += arow.iter().zip(bcol).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        return;
    }
    let packed;
    let b = if sb.col == 1 && sb.row == n {
        &b[..k * n]
    } else {
        packed = (0..k)
            .flat_map(|p| (0..n).map(move |j| p * sb.row + j * sb.col))
            .map(|at| b[at])
            .collect::<Vec<f64>>();
        &packed[..]
    };
    for (i, crow) in c.chunks_exact_mut(n).take(m).enumerate() {
        for (p, brow) in b.chunks_exact(n).enumerate() {
            let x = a[i * sa.row + p * sa.col];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += x * bj;
            }
        }
    }
}

/// `c += a * b` for an `m x k` by `k x n` product with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: Strides, b: &[f64], sb: Strides, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!((m - 1) * sa.row + (k - 1) * sa.col < a.len());
    debug_assert!((k - 1) * sb.row + (n - 1) * sb.col < b.len());
    if m * k * n <= SMALL_GEMM {
        small_gemm(m, k, n, a, sa, b, sb, c);
        return;
    }
    // SAFETY: the debug assertions above describe the extent of both
    // operands; callers pass slices covering whole matrices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.row as isize,
            sa.col as isize,
            b.as_ptr(),
            sb.row as isize,
            sb.col as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// (outer, axis length, inner) decomposition used by slice/pad/concat.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(broadcast_shapes(&[2, 3, 4], &[4]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shapes(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shapes(&[], &[3]), Some(vec![3]));
        assert_eq!(broadcast_shapes(&[2, 3], &[4]), None);
    }

    #[test]
    fn f32_rounding_outside_check_mode() {
        let t = Tensor::scalar(0.1);
        assert_eq!(t.item(), 0.1f32 as f64);
        let _g = check_mode();
        let t = Tensor::scalar(0.1);
        assert_eq!(t.item(), 0.1);
    }

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![1.0, 2.0], &[3]).is_err());
    }
}
