//! Reverse-mode automatic differentiation on an eagerly evaluated tape.
//!
//! Every operation appends one node holding its value, its parent indices and
//! a closure mapping the upstream gradient to per-parent gradients.  Nodes are
//! created in evaluation order, which is already a topological order, so the
//! backward pass is a single reverse sweep.  Fan-out (one value feeding many
//! consumers) is handled by summing gradient contributions.
//!
//! A [`Tape`] is single-threaded (`RefCell` inside); run one tape per thread
//! and reduce gradients across tapes in a fixed order to keep results
//! bit-reproducible.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

type GradFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    grad_fn: Option<GradFn>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to one tape node.  Copyable; all arithmetic lives on methods that
/// append new nodes to the owning tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, vec![], true, None)
    }

    /// A value gradients never flow into.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, vec![], false, None)
    }

    fn push(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        needs_grad: bool,
        grad_fn: Option<GradFn>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            grad_fn,
            needs_grad,
        });
        Var {
            tape: self,
            index: nodes.len() - 1,
        }
    }

    /// Appends a derived node.  `grad_fn` must return one gradient per parent,
    /// each shaped like that parent's value; it must not touch the tape.
    pub(crate) fn push_op(
        &self,
        value: Tensor,
        parents: &[Var<'_>],
        grad_fn: GradFn,
    ) -> Var<'_> {
        let needs = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.index].needs_grad)
        };
        let idx: Vec<usize> = parents.iter().map(|p| p.index).collect();
        self.push(value, idx, needs, if needs { Some(grad_fn) } else { None })
    }

    fn value_of(&self, index: usize) -> Tensor {
        self.nodes.borrow()[index].value.clone()
    }

    /// Reverse sweep from a scalar root.  Returns gradients for leaves;
    /// intermediate gradients are dropped as soon as they are consumed.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::contract("backward root from another tape"));
        }
        let nodes = self.nodes.borrow();
        let root_val = &nodes[root.index].value;
        if root_val.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_val.shape()
            )));
        }
        if !root_val.is_finite() {
            return Err(Error::eval("backward from non-finite root"));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[root.index] = Some(Tensor::full(root_val.shape(), 1.0).expect("scalar shape"));
        for i in (0..=root.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.grad_fn {
                None => {
                    // Leaf: keep its gradient for the caller.
                    grads[i] = Some(g);
                }
                Some(f) => {
                    let pgs = f(&g);
                    debug_assert_eq!(pgs.len(), node.parents.len());
                    for (p, pg) in node.parents.iter().zip(pgs) {
                        if !nodes[*p].needs_grad {
                            continue;
                        }
                        match &mut grads[*p] {
                            Some(acc) => acc.accumulate(&pg).expect("gradient shape"),
                            slot => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Result of a backward pass; holds leaf gradients only.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if `v` is a leaf that the
    /// root depends on.
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }
}

// ── Var operations ──────────────────────────────────────────────────────

impl<'t> Var<'t> {
    pub fn value(self) -> Tensor {
        self.tape.value_of(self.index)
    }

    pub fn shape(self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    fn same_tape(self, other: Var<'t>, op: &str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::contract(format!("{op}: operands from different tapes")))
        }
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs, "add")?;
        let v = self.value().add(&rhs.value())?;
        Ok(self
            .tape
            .push_op(v, &[self, rhs], Box::new(|g| vec![g.clone(), g.clone()])))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs, "sub")?;
        let v = self.value().sub(&rhs.value())?;
        Ok(self
            .tape
            .push_op(v, &[self, rhs], Box::new(|g| vec![g.clone(), g.neg()])))
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs, "mul")?;
        let (a, b) = (self.value(), rhs.value());
        let v = a.mul(&b)?;
        Ok(self.tape.push_op(
            v,
            &[self, rhs],
            Box::new(move |g| {
                vec![
                    g.mul(&b).expect("mul grad"),
                    g.mul(&a).expect("mul grad"),
                ]
            }),
        ))
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs, "div")?;
        let (a, b) = (self.value(), rhs.value());
        let v = a.div(&b)?;
        Ok(self.tape.push_op(
            v,
            &[self, rhs],
            Box::new(move |g| {
                let da = g.div(&b).expect("div grad");
                let db = g
                    .mul(&a)
                    .and_then(|t| t.div(&b.mul(&b).expect("sq")))
                    .expect("div grad")
                    .neg();
                vec![da, db]
            }),
        ))
    }

    pub fn neg(self) -> Var<'t> {
        let v = self.value().neg();
        self.tape.push_op(v, &[self], Box::new(|g| vec![g.neg()]))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.value().add_scalar(c);
        self.tape.push_op(v, &[self], Box::new(|g| vec![g.clone()]))
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t> {
        let v = self.value().mul_scalar(c);
        self.tape
            .push_op(v, &[self], Box::new(move |g| vec![g.mul_scalar(c)]))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        let y = self.value().exp()?;
        let yc = y.clone();
        Ok(self
            .tape
            .push_op(y, &[self], Box::new(move |g| vec![g.mul(&yc).expect("exp grad")])))
    }

    pub fn ln(self) -> Result<Var<'t>> {
        let x = self.value();
        let y = x.ln()?;
        Ok(self
            .tape
            .push_op(y, &[self], Box::new(move |g| vec![g.div(&x).expect("ln grad")])))
    }

    pub fn relu(self) -> Var<'t> {
        let x = self.value();
        let y = x.relu();
        self.tape.push_op(
            y,
            &[self],
            Box::new(move |g| {
                let gate = x.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                vec![g.mul(&gate).expect("relu grad")]
            }),
        )
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    pub fn sum_all(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let v = Tensor::scalar(x.sum());
        self.tape.push_op(
            v,
            &[self],
            Box::new(move |g| {
                vec![Tensor::full(&shape, g.data()[0]).expect("sum grad")]
            }),
        )
    }

    pub fn mean_all(self) -> Var<'t> {
        let x = self.value();
        let n = x.numel() as f64;
        let shape = x.shape().to_vec();
        let v = Tensor::scalar(x.sum() / n);
        self.tape.push_op(
            v,
            &[self],
            Box::new(move |g| {
                vec![Tensor::full(&shape, g.data()[0] / n).expect("mean grad")]
            }),
        )
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let v = x.reduce_sum(Some(axis))?;
        let n = x.shape()[axis];
        Ok(self.tape.push_op(
            v,
            &[self],
            Box::new(move |g| vec![g.tile_axis(axis, n).expect("sum_axis grad")]),
        ))
    }

    /// Inserts a new axis of extent `n` at `axis`, repeating the input.
    pub fn tile_axis(self, axis: usize, n: usize) -> Result<Var<'t>> {
        let v = self.value().tile_axis(axis, n)?;
        Ok(self.tape.push_op(
            v,
            &[self],
            Box::new(move |g| vec![g.reduce_sum(Some(axis)).expect("tile grad")]),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let orig = x.shape().to_vec();
        let v = x.reshape(shape)?;
        Ok(self.tape.push_op(
            v,
            &[self],
            Box::new(move |g| vec![g.reshape(&orig).expect("reshape grad")]),
        ))
    }

    pub fn slice(self, ranges: &[(usize, usize)]) -> Result<Var<'t>> {
        let x = self.value();
        let v = x.slice(ranges)?;
        let pads: Vec<(usize, usize)> = ranges
            .iter()
            .zip(x.shape())
            .map(|(&(s, e), &d)| (s, d - e))
            .collect();
        Ok(self.tape.push_op(
            v,
            &[self],
            Box::new(move |g| vec![g.pad(&pads).expect("slice grad")]),
        ))
    }

    pub fn pad(self, pads: &[(usize, usize)]) -> Result<Var<'t>> {
        let x = self.value();
        let v = x.pad(pads)?;
        let ranges: Vec<(usize, usize)> = pads
            .iter()
            .zip(x.shape())
            .map(|(&(b, _), &d)| (b, b + d))
            .collect();
        Ok(self.tape.push_op(
            v,
            &[self],
            Box::new(move |g| vec![g.slice(&ranges).expect("pad grad")]),
        ))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs, "matmul")?;
        let (a, b) = (self.value(), rhs.value());
        let v = a.matmul(&b)?;
        Ok(self.tape.push_op(
            v,
            &[self, rhs],
            Box::new(move |g| {
                let da = g.matmul(&b.transpose2().expect("t")).expect("matmul grad");
                let db = a
                    .transpose2()
                    .expect("t")
                    .matmul(g)
                    .expect("matmul grad");
                vec![da, db]
            }),
        ))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let s = self.value().softmax(axis)?;
        let sc = s.clone();
        let n = s.shape()[axis];
        Ok(self.tape.push_op(
            s,
            &[self],
            Box::new(move |g| {
                // dx = s * (g - sum_axis(g * s) broadcast back)
                let gs = g.mul(&sc).expect("softmax grad");
                let dot = gs.reduce_sum(Some(axis)).expect("softmax grad");
                let tiled = dot.tile_axis(axis, n).expect("softmax grad");
                let inner = g.sub(&tiled).expect("softmax grad");
                vec![sc.mul(&inner).expect("softmax grad")]
            }),
        ))
    }

    /// Euclidean norm of each vector along the last axis: `[..., D] -> [...]`.
    /// Zero vectors get zero gradient (the true limit of the Jacobian).
    pub fn norm_last(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() == 0 {
            return Err(Error::contract("norm_last on scalar"));
        }
        let d = x.shape()[x.rank() - 1];
        let out_shape: Vec<usize> = x.shape()[..x.rank() - 1].to_vec();
        let mut out = Vec::with_capacity(x.numel() / d);
        for chunk in x.data().chunks_exact(d) {
            out.push(chunk.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        let v = if out_shape.is_empty() {
            Tensor::scalar(out[0])
        } else {
            Tensor::from_vec(&out_shape, out).expect("norm shape")
        };
        let vc = v.clone();
        Ok(self.tape.push_op(
            v,
            &[self],
            Box::new(move |g| {
                let mut dx = vec![0.0f64; x.numel()];
                for (i, chunk) in x.data().chunks_exact(d).enumerate() {
                    let r = vc.data()[i];
                    if r < 1e-12 {
                        continue;
                    }
                    let gi = g.data()[i];
                    for (j, &s) in chunk.iter().enumerate() {
                        dx[i * d + j] = gi * s / r;
                    }
                }
                vec![Tensor::from_vec(x.shape(), dx).expect("norm grad")]
            }),
        ))
    }

    /// Squashing nonlinearity applied to each vector along the last axis:
    /// `v = s * |s| / (1 + |s|^2)`, which maps |v| to |s|^2/(1+|s|^2) in [0,1)
    /// and sends the zero vector to itself.
    pub fn squash_last(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() == 0 {
            return Err(Error::contract("squash_last on scalar"));
        }
        let d = x.shape()[x.rank() - 1];
        let v = squash_tensor(&x, d);
        Ok(self.tape.push_op(
            v,
            &[self],
            Box::new(move |g| {
                let mut dx = vec![0.0f64; x.numel()];
                for (i, chunk) in x.data().chunks_exact(d).enumerate() {
                    let r2: f64 = chunk.iter().map(|v| v * v).sum();
                    let r = r2.sqrt();
                    if r < 1e-12 {
                        continue; // Jacobian vanishes at the origin
                    }
                    let phi = r / (1.0 + r2);
                    let dphi_over_r = (1.0 - r2) / ((1.0 + r2) * (1.0 + r2) * r);
                    let gu = &g.data()[i * d..(i + 1) * d];
                    let dot: f64 = gu.iter().zip(chunk).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[i * d + j] = phi * gu[j] + dphi_over_r * dot * chunk[j];
                    }
                }
                vec![Tensor::from_vec(x.shape(), dx).expect("squash grad")]
            }),
        ))
    }
}

/// Forward-only squash over the last axis (shared by the tape op and by
/// callers that do not need gradients).
pub fn squash_tensor(x: &Tensor, d: usize) -> Tensor {
    let mut out = Vec::with_capacity(x.numel());
    for chunk in x.data().chunks_exact(d) {
        let r2: f64 = chunk.iter().map(|v| v * v).sum();
        let scale = if r2 == 0.0 {
            0.0
        } else {
            let r = r2.sqrt();
            r / (1.0 + r2)
        };
        out.extend(chunk.iter().map(|&s| s * scale));
    }
    Tensor::from_vec(x.shape(), out).expect("squash shape")
}

/// Concatenates tape values along `axis`.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    if parts.is_empty() {
        return Err(Error::contract("concat of zero vars"));
    }
    let tape = parts[0].tape;
    for p in parts {
        p.same_tape(parts[0], "concat")?;
    }
    let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Tensor> = values.iter().collect();
    let v = Tensor::concat(&refs, axis)?;
    let extents: Vec<usize> = values.iter().map(|t| t.shape()[axis]).collect();
    let full_shape = v.shape().to_vec();
    Ok(tape.push_op(
        v,
        parts,
        Box::new(move |g| {
            let mut out = Vec::with_capacity(extents.len());
            let mut start = 0usize;
            for &e in &extents {
                let ranges: Vec<(usize, usize)> = full_shape
                    .iter()
                    .enumerate()
                    .map(|(d, &ext)| if d == axis { (start, start + e) } else { (0, ext) })
                    .collect();
                out.push(g.slice(&ranges).expect("concat grad"));
                start += e;
            }
            out
        }),
    ))
}

// ── Gradient checking ───────────────────────────────────────────────────

/// Compares analytic gradients against central finite differences for a
/// scalar-valued function of several tensors.  Returns the worst relative
/// error `|a - n| / max(|a|, |n|, 1e-8)` over every coordinate.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'a> Fn(&'a Tape, &[Var<'a>]) -> Result<Var<'a>>,
{
    if !(h > 0.0) {
        return Err(Error::domain(format!("step h = {h}")));
    }
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = f(&tape, &vars)?;
    let y0 = y.value().item().map_err(|_| {
        Error::contract("grad_check function must return a scalar")
    })?;
    if !y0.is_finite() {
        return Err(Error::eval("grad_check: non-finite function value"));
    }
    let grads = tape.backward(y)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| grads.wrt(*v).cloned().unwrap_or_else(|| v.value().zeros_like()))
        .collect();

    let eval = |which: usize, coord: usize, delta: f64| -> Result<f64> {
        let mut bumped: Vec<Tensor> = inputs.to_vec();
        let mut data = bumped[which].data().to_vec();
        data[coord] += delta;
        bumped[which] = Tensor::from_vec(bumped[which].shape(), data)?;
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = bumped.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = f(&tape, &vars)?;
        let v = y.value().item()?;
        if !v.is_finite() {
            return Err(Error::eval("grad_check: non-finite probe value"));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        for j in 0..x.numel() {
            let fp = eval(i, j, h)?;
            let fm = eval(i, j, -h)?;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Default finite-difference step.
pub const GRAD_CHECK_H: f64 = 1e-5;
