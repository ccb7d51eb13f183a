//! Dense row-major tensors over `f64`.
//!
//! Values are immutable once constructed; the buffer lives behind an `Arc`, so
//! clones are O(1) and tensors are safe to share read-only across threads.
//! There is no implicit broadcasting: elementwise binary operations demand
//! identical shapes, and the only scalar-flavored shortcuts are the explicit
//! `*_scalar` methods.  Rank 0 (shape `[]`) is a scalar holding one value.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_extents(shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::shape(format!("zero extent in shape {shape:?}")));
    }
    Ok(())
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    // ── Construction ────────────────────────────────────────────────────

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_extents(shape)?;
        if numel_of(shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} wants {} values, got {}",
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![v]),
        }
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Result<Tensor> {
        check_extents(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; numel_of(shape)]),
        })
    }

    /// I.i.d. uniform draws from `[lo, hi)` in row-major order, so the result
    /// is a pure function of the generator state.
    pub fn uniform(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
        check_extents(shape)?;
        if !(lo < hi) {
            return Err(Error::domain(format!("uniform bounds [{lo}, {hi})")));
        }
        let data: Vec<f64> = (0..numel_of(shape)).map(|_| rng.uniform(lo, hi)).collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn zeros_like(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(vec![0.0; self.numel()]),
        }
    }

    // ── Accessors ───────────────────────────────────────────────────────

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// In-place elementwise add used for gradient accumulation; keeps the
    /// value-semantics surface area of the public API intact.
    pub(crate) fn accumulate(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "accumulate {:?} += {:?}",
                self.shape, other.shape
            )));
        }
        let dst = Arc::make_mut(&mut self.data);
        for (d, s) in dst.iter_mut().zip(other.data.iter()) {
            *d += *s;
        }
        Ok(())
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn zip(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    /// Elementwise division; a zero divisor is a domain error rather than an
    /// infinity so non-finite values cannot leak into downstream math.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        if other.data.iter().any(|&b| b == 0.0) {
            return Err(Error::domain("div: zero divisor"));
        }
        self.zip(other, "div", |a, b| a / b)
    }

    pub fn neg(&self) -> Tensor {
        self.map(|v| -v)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.map(|v| v + c)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn exp(&self) -> Result<Tensor> {
        let out = self.map(f64::exp);
        if !out.is_finite() {
            return Err(Error::domain("exp overflowed to non-finite"));
        }
        Ok(out)
    }

    pub fn ln(&self) -> Result<Tensor> {
        if self.data.iter().any(|&v| v <= 0.0) {
            return Err(Error::domain("ln of non-positive value"));
        }
        Ok(self.map(f64::ln))
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    // ── Reductions ──────────────────────────────────────────────────────

    fn check_axis(&self, axis: usize, op: &str) -> Result<()> {
        if axis >= self.rank() {
            return Err(Error::domain(format!(
                "{op}: axis {axis} out of range for rank {}",
                self.rank()
            )));
        }
        Ok(())
    }

    /// Shape with `axis` removed; scalar when the input is rank 1.
    fn reduced_shape(&self, axis: usize) -> Vec<usize> {
        let mut s = self.shape.clone();
        s.remove(axis);
        s
    }

    /// Applies `fold` over every run along `axis`.  `fold` sees the slice of
    /// values laid out with stride `inner`.
    fn reduce_axis(&self, axis: usize, fold: impl Fn(&mut dyn Iterator<Item = f64>) -> f64) -> Tensor {
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = o * n * inner;
            for i in 0..inner {
                let mut it = (0..n).map(|j| self.data[base + j * inner + i]);
                data.push(fold(&mut it));
            }
        }
        Tensor {
            shape: self.reduced_shape(axis),
            data: Arc::new(data),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn reduce_sum(&self, axis: Option<usize>) -> Result<Tensor> {
        match axis {
            None => Ok(Tensor::scalar(self.sum())),
            Some(ax) => {
                self.check_axis(ax, "sum")?;
                Ok(self.reduce_axis(ax, |it| it.sum()))
            }
        }
    }

    pub fn reduce_mean(&self, axis: Option<usize>) -> Result<Tensor> {
        match axis {
            None => Ok(Tensor::scalar(self.sum() / self.numel() as f64)),
            Some(ax) => {
                self.check_axis(ax, "mean")?;
                let n = self.shape[ax] as f64;
                Ok(self.reduce_axis(ax, |it| it.sum::<f64>() / n))
            }
        }
    }

    pub fn reduce_max(&self, axis: Option<usize>) -> Result<Tensor> {
        match axis {
            None => Ok(Tensor::scalar(
                self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            )),
            Some(ax) => {
                self.check_axis(ax, "max")?;
                Ok(self.reduce_axis(ax, |it| it.fold(f64::NEG_INFINITY, f64::max)))
            }
        }
    }

    /// Index of the largest value; the first index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0usize;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// Per-run argmax along `axis`, first index on ties, returned as integral
    /// values in an f64 tensor.
    pub fn reduce_argmax(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis, "argmax")?;
        Ok(self.reduce_axis(axis, |it| {
            let mut best_i = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (i, v) in it.enumerate() {
                if v > best_v {
                    best_v = v;
                    best_i = i;
                }
            }
            best_i as f64
        }))
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    /// Rank-2 matrix product.  Parallelized over rows of `self`; every row is
    /// reduced sequentially, so results do not depend on the thread count.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::shape(format!(
                "matmul wants rank-2 operands, got {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let a = &self.data;
        let b = &other.data;
        let mut out = vec![0.0f64; m * n];
        let row_work = k * n;
        if m > 1 && row_work >= 16_384 {
            use rayon::prelude::*;
            out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| {
                matmul_row(&a[i * k..(i + 1) * k], b, n, orow);
            });
        } else {
            for i in 0..m {
                matmul_row(&a[i * k..(i + 1) * k], b, n, &mut out[i * n..(i + 1) * n]);
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: Arc::new(out),
        })
    }

    /// Rank-2 transpose.
    pub fn transpose2(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape(format!("transpose2 on {:?}", self.shape)));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: Arc::new(data),
        })
    }

    // ── Shape surgery ───────────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_extents(shape)?;
        if numel_of(shape) != self.numel() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let rank = parts[0].rank();
        if axis >= rank {
            return Err(Error::domain(format!("concat axis {axis} rank {rank}")));
        }
        for p in parts {
            if p.rank() != rank {
                return Err(Error::shape("concat rank mismatch"));
            }
            for d in 0..rank {
                if d != axis && p.shape[d] != parts[0].shape[d] {
                    return Err(Error::shape(format!(
                        "concat: {:?} vs {:?} off axis {axis}",
                        p.shape, parts[0].shape
                    )));
                }
            }
        }
        let mut shape = parts[0].shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel_of(&shape));
        for o in 0..outer {
            for p in parts {
                let run = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * run..(o + 1) * run]);
            }
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// Contiguous sub-block: one half-open `(start, end)` range per axis.
    pub fn slice(&self, ranges: &[(usize, usize)]) -> Result<Tensor> {
        if ranges.len() != self.rank() {
            return Err(Error::contract(format!(
                "slice wants {} ranges, got {}",
                self.rank(),
                ranges.len()
            )));
        }
        if self.rank() == 0 {
            return Ok(self.clone());
        }
        let mut shape = Vec::with_capacity(self.rank());
        for (d, &(s, e)) in ranges.iter().enumerate() {
            if s >= e || e > self.shape[d] {
                return Err(Error::shape(format!(
                    "slice range ({s}, {e}) on axis {d} of extent {}",
                    self.shape[d]
                )));
            }
            shape.push(e - s);
        }
        let strides = self.strides();
        let mut data = Vec::with_capacity(numel_of(&shape));
        // Iterate output coordinates in row-major order.
        let mut coords = vec![0usize; self.rank()];
        loop {
            let off: usize = coords
                .iter()
                .zip(ranges)
                .zip(&strides)
                .map(|((&c, &(s, _)), &st)| (c + s) * st)
                .sum();
            // Innermost axis is contiguous; copy the whole run at once.
            let run = shape[self.rank() - 1];
            data.extend_from_slice(&self.data[off..off + run]);
            // Advance all but the innermost coordinate.
            let mut d = self.rank() - 1;
            loop {
                if d == 0 {
                    return Ok(Tensor {
                        shape,
                        data: Arc::new(data),
                    });
                }
                d -= 1;
                coords[d] += 1;
                if coords[d] < shape[d] {
                    break;
                }
                coords[d] = 0;
            }
        }
    }

    /// Zero padding: one `(before, after)` pair per axis.
    pub fn pad(&self, pads: &[(usize, usize)]) -> Result<Tensor> {
        if pads.len() != self.rank() {
            return Err(Error::contract(format!(
                "pad wants {} pairs, got {}",
                self.rank(),
                pads.len()
            )));
        }
        if self.rank() == 0 {
            return Ok(self.clone());
        }
        let shape: Vec<usize> = self
            .shape
            .iter()
            .zip(pads)
            .map(|(&e, &(b, a))| e + b + a)
            .collect();
        let mut out = vec![0.0f64; numel_of(&shape)];
        let out_strides = strides_of(&shape);
        let in_strides = self.strides();
        let rank = self.rank();
        let mut coords = vec![0usize; rank];
        loop {
            let in_off: usize = coords.iter().zip(&in_strides).map(|(&c, &s)| c * s).sum();
            let out_off: usize = coords
                .iter()
                .zip(pads)
                .zip(&out_strides)
                .map(|((&c, &(b, _)), &s)| (c + b) * s)
                .sum();
            let run = self.shape[rank - 1];
            out[out_off..out_off + run].copy_from_slice(&self.data[in_off..in_off + run]);
            let mut d = rank - 1;
            loop {
                if d == 0 {
                    return Ok(Tensor {
                        shape,
                        data: Arc::new(out),
                    });
                }
                d -= 1;
                coords[d] += 1;
                if coords[d] < self.shape[d] {
                    break;
                }
                coords[d] = 0;
            }
        }
    }

    // ── Softmax ─────────────────────────────────────────────────────────

    /// Numerically stable softmax along `axis` (max subtracted per run).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis, "softmax")?;
        if !self.is_finite() {
            return Err(Error::domain("softmax of non-finite input"));
        }
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut data = self.data.as_ref().clone();
        for o in 0..outer {
            let base = o * n * inner;
            for i in 0..inner {
                let mut m = f64::NEG_INFINITY;
                for j in 0..n {
                    m = m.max(data[base + j * inner + i]);
                }
                let mut z = 0.0;
                for j in 0..n {
                    let e = (data[base + j * inner + i] - m).exp();
                    data[base + j * inner + i] = e;
                    z += e;
                }
                for j in 0..n {
                    data[base + j * inner + i] /= z;
                }
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        })
    }

    // ── Misc helpers ────────────────────────────────────────────────────

    /// Largest absolute elementwise difference; shape mismatch is infinite.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Repeat the tensor `n` times along a new axis inserted at `axis`.
    pub fn tile_axis(&self, axis: usize, n: usize) -> Result<Tensor> {
        if axis > self.rank() {
            return Err(Error::domain(format!(
                "tile axis {axis} on rank {}",
                self.rank()
            )));
        }
        if n == 0 {
            return Err(Error::shape("tile count 0"));
        }
        let mut shape = self.shape.clone();
        shape.insert(axis, n);
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis..].iter().product();
        let mut data = Vec::with_capacity(self.numel() * n);
        for o in 0..outer {
            let run = &self.data[o * inner..(o + 1) * inner];
            for _ in 0..n {
                data.extend_from_slice(run);
            }
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// Sum out `axis` (inverse of `tile_axis` up to scaling).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_sum(Some(axis))
    }
}

fn matmul_row(arow: &[f64], b: &[f64], n: usize, out: &mut [f64]) {
    for (k, &aik) in arow.iter().enumerate() {
        if aik == 0.0 {
            continue;
        }
        let brow = &b[k * n..k * n + n];
        for (o, &bv) in out.iter_mut().zip(brow.iter()) {
            *o += aik * bv;
        }
    }
}
