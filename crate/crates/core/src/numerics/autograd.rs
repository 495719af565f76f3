//! Reverse-mode differentiation over the recorded op graph.
//!
//! Every tracked tensor owns a [`Node`] naming the op that produced it and its
//! inputs. Node ids come from a global counter, so ids order the graph
//! topologically: a node's inputs always carry smaller ids than the node. The
//! set of nodes reachable from a loss, sorted by id, is the tape.
//!
//! Backward rules are written in terms of the public tensor ops. With
//! `create_graph` the rules run with recording enabled and the returned
//! gradients are themselves differentiable, which is what the critic's
//! gradient penalty needs.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::tensor::{enable_grad, next_node_id, no_grad, Tensor};

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) op: Op,
    shape: Arc<[usize]>,
    data: Arc<Vec<f64>>,
}

impl Node {
    pub(crate) fn new(op: Op, shape: Arc<[usize]>, data: Arc<Vec<f64>>) -> Arc<Node> {
        Arc::new(Node {
            id: next_node_id(),
            op,
            shape,
            data,
        })
    }

    /// The tensor this node produced, re-attached to the node.
    fn output(self: &Arc<Node>) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: Some(self.clone()),
        }
    }
}

pub(crate) enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    Relu(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Sqrt(Tensor),
    Recip(Tensor),
    SafeRecip(Tensor),
    Tanh(Tensor),
    Sigmoid(Tensor),
    SumTo(Tensor),
    Expand(Tensor),
    Reshape(Tensor),
    TransposeLast(Tensor),
    MatMul { a: Tensor, b: Tensor, ta: bool, tb: bool },
    SwapAxes12(Tensor),
    Normalize(Tensor),
    Slice { x: Tensor, axis: usize, start: usize },
    Pad { x: Tensor, axis: usize, before: usize },
    Concat { parts: Vec<Tensor>, axis: usize },
    IndexSelect { table: Tensor, idx: Arc<Vec<usize>> },
    ScatterAdd { src: Tensor, idx: Arc<Vec<usize>> },
    Softmax(Tensor),
}

impl Op {
    fn inputs(&self) -> Vec<&Tensor> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul { a, b, .. } => vec![a, b],
            Scale(a, _) | Relu(a) | Exp(a) | Log(a) | Sqrt(a) | Recip(a) | SafeRecip(a)
            | Tanh(a) | Sigmoid(a) | SumTo(a) | Expand(a) | Reshape(a) | TransposeLast(a)
            | Softmax(a) | SwapAxes12(a) | Normalize(a) => vec![a],
            Slice { x, .. } | Pad { x, .. } => vec![x],
            Concat { parts, .. } => parts.iter().collect(),
            IndexSelect { table, .. } => vec![table],
            ScatterAdd { src, .. } => vec![src],
        }
    }

    /// Vector-Jacobian product: input cotangents given the output cotangent
    /// `g` and the op's output `out`. One entry per input, in `inputs()`
    /// order; inputs with `need[i] == false` get `None`.
    fn vjp(&self, g: &Tensor, out: &Tensor, need: &[bool]) -> Result<Vec<Option<Tensor>>> {
        use Op::*;
        let one = |t: Result<Tensor>| -> Result<Vec<Option<Tensor>>> { Ok(vec![Some(t?)]) };
        let when = |i: usize, f: &dyn Fn() -> Result<Tensor>| -> Result<Option<Tensor>> {
            if need[i] {
                f().map(Some)
            } else {
                Ok(None)
            }
        };
        match self {
            Leaf => Ok(vec![]),
            Add(a, b) => Ok(vec![when(0, &|| g.sum_to(a.shape()))?, when(1, &|| g.sum_to(b.shape()))?]),
            Sub(a, b) => Ok(vec![
                when(0, &|| g.sum_to(a.shape()))?,
                when(1, &|| g.scale(-1.0)?.sum_to(b.shape()))?,
            ]),
            Mul(a, b) => Ok(vec![
                when(0, &|| g.mul(b)?.sum_to(a.shape()))?,
                when(1, &|| g.mul(a)?.sum_to(b.shape()))?,
            ]),
            Scale(_, s) => one(g.scale(*s)),
            Relu(a) => {
                // step mask is a constant: relu'' = 0 everywhere
                let mask: Vec<f64> = a.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
                one(g.mul(&Tensor::raw(mask, a.shape())))
            }
            Exp(_) => one(g.mul(out)),
            Log(a) => one(g.mul(&a.recip()?)),
            Sqrt(_) => one(g.mul(&out.safe_recip()?)?.scale(0.5)),
            Recip(_) | SafeRecip(_) => one(g.mul(out)?.mul(out)?.scale(-1.0)),
            Tanh(_) => one(g.sub(&g.mul(out)?.mul(out)?)),
            Sigmoid(_) => one(g.mul(out)?.mul(&out.affine(-1.0, 1.0)?)),
            SumTo(a) => one(g.expand(a.shape())),
            Expand(a) => one(g.sum_to(a.shape())),
            Reshape(a) => one(g.reshape(a.shape())),
            TransposeLast(_) => one(g.transpose()),
            SwapAxes12(_) => one(g.swap_axes_12()),
            MatMul { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let ga = when(0, &|| {
                    let d = match (ta, tb) {
                        (false, false) => g.matmul_t(b, false, true)?,
                        (false, true) => g.matmul_t(b, false, false)?,
                        (true, false) => b.matmul_t(g, false, true)?,
                        (true, true) => b.matmul_t(g, true, true)?,
                    };
                    d.sum_to(a.shape())
                })?;
                let gb = when(1, &|| {
                    if b.rank() == 2 && a.rank() > 2 && !ta {
                        // fold the batch axes into one product
                        let k = a.dim(a.rank() - 1);
                        let n = g.dim(g.rank() - 1);
                        let a2 = a.reshape(&[a.len() / k, k])?;
                        let g2 = g.reshape(&[g.len() / n, n])?;
                        return if tb { g2.matmul_t(&a2, true, false) } else { a2.matmul_t(&g2, true, false) };
                    }
                    let d = match (ta, tb) {
                        (false, false) => a.matmul_t(g, true, false)?,
                        (false, true) => g.matmul_t(a, true, false)?,
                        (true, false) => a.matmul_t(g, false, false)?,
                        (true, true) => g.matmul_t(a, true, true)?,
                    };
                    d.sum_to(b.shape())
                })?;
                Ok(vec![ga, gb])
            }
            Slice { x, axis, start } => {
                let len = g.dim(*axis);
                let after = x.dim(*axis) - start - len;
                one(g.pad(*axis, *start, after))
            }
            Pad { x, axis, before } => one(g.slice(*axis, *before, x.dim(*axis))),
            Concat { parts, axis } => {
                let mut off = 0;
                let mut grads = Vec::with_capacity(parts.len());
                for (i, p) in parts.iter().enumerate() {
                    let len = p.dim(*axis);
                    grads.push(when(i, &|| g.slice(*axis, off, len))?);
                    off += len;
                }
                Ok(grads)
            }
            IndexSelect { table, idx } => one(g.scatter_add_rows(idx.clone(), table.dim(0))),
            ScatterAdd { idx, .. } => one(g.index_select_rows(idx.clone())),
            Softmax(_) => {
                let last = out.rank() - 1;
                let dot = g.mul(out)?.sum_axis(last, true)?;
                one(out.mul(&g.sub(&dot)?))
            }
            Normalize(x) => {
                // dx = s * (g - mean(g) - y * mean(g * y)), s = 1/sqrt(var + eps)
                let last = out.rank() - 1;
                let gm = g.mean_axis(last, true)?;
                let gy = g.mul(out)?.mean_axis(last, true)?;
                let inner = g.sub(&gm)?.sub(&out.mul(&gy)?)?;
                one(x.inv_std_last()?.mul(&inner))
            }
        }
    }
}

/// Gradients keyed by the leaf they belong to.
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<u64, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: &Tensor) -> Option<&Tensor> {
        leaf.node_id().and_then(|id| self.map.get(&id))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Gradient of scalar `loss` with respect to every tensor in `leaves`.
/// Leaves the loss does not depend on get an all-zero gradient.
pub fn backward(loss: &Tensor, leaves: &[Tensor]) -> Result<Gradients> {
    let grads = grad(loss, leaves, false)?;
    let mut map = HashMap::with_capacity(leaves.len());
    for (leaf, g) in leaves.iter().zip(grads) {
        if let Some(id) = leaf.node_id() {
            map.insert(id, g);
        }
    }
    Ok(Gradients { map })
}

/// Gradients of scalar `output` with respect to `wrt`, in order.
///
/// With `create_graph` the result stays attached to the graph and can be
/// differentiated again.
pub fn grad(output: &Tensor, wrt: &[Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if output.len() != 1 {
        return Err(Error::NonScalarLoss(output.shape().to_vec()));
    }
    let _mode = if create_graph { enable_grad() } else { no_grad() };
    let targets: HashMap<u64, usize> = wrt
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.node_id().map(|id| (id, i)))
        .collect();

    let mut result: Vec<Option<Tensor>> = vec![None; wrt.len()];
    if let Some(root) = &output.node {
        // collect the reachable tape
        let mut nodes: HashMap<u64, Arc<Node>> = HashMap::new();
        let mut stack = vec![root.clone()];
        while let Some(n) = stack.pop() {
            if nodes.contains_key(&n.id) {
                continue;
            }
            for inp in n.op.inputs() {
                if let Some(c) = &inp.node {
                    if !nodes.contains_key(&c.id) {
                        stack.push(c.clone());
                    }
                }
            }
            nodes.insert(n.id, n);
        }
        let mut order: Vec<u64> = nodes.keys().copied().collect();
        order.sort_unstable();

        // nodes whose subgraph contains a requested leaf
        let mut relevant: HashMap<u64, bool> = HashMap::with_capacity(order.len());
        for id in &order {
            let n = &nodes[id];
            let r = targets.contains_key(id)
                || n.op.inputs().iter().any(|t| t.node_id().is_some_and(|c| relevant[&c]));
            relevant.insert(*id, r);
        }

        let mut pending: HashMap<u64, Tensor> = HashMap::new();
        pending.insert(root.id, Tensor::ones(output.shape()));
        for id in order.iter().rev() {
            if !relevant[id] {
                continue;
            }
            let Some(g) = pending.remove(id) else { continue };
            let node = &nodes[id];
            if let Some(&slot) = targets.get(id) {
                result[slot] = Some(g.clone());
            }
            let inputs = node.op.inputs();
            if inputs.is_empty() {
                continue;
            }
            let need: Vec<bool> = inputs
                .iter()
                .map(|t| t.node_id().is_some_and(|c| relevant[&c]))
                .collect();
            let grads = node.op.vjp(&g, &node.output(), &need)?;
            for (inp, gi) in inputs.into_iter().zip(grads) {
                let (Some(cid), Some(gi)) = (inp.node_id(), gi) else { continue };
                let acc = match pending.remove(&cid) {
                    Some(prev) => prev.add(&gi)?,
                    None => gi,
                };
                pending.insert(cid, acc);
            }
        }
    }
    Ok(result
        .into_iter()
        .zip(wrt)
        .map(|(g, t)| g.unwrap_or_else(|| t.zeros_like()))
        .collect())
}
