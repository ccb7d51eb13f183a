//! Spatial layers over `[H, W, C]` feature maps.
//!
//! Convolution is cross-correlation (no kernel flip) with output extent
//! `(H + 2p - k) / s + 1` (floor).  Transposed convolution is its exact
//! adjoint with extent `(H - 1) * s + k - 2p`; overlapping kernel placements
//! sum.  Both are lowered onto matrix products through a shared patch
//! gather/scatter, so the adjoint relationship holds by construction.
//!
//! Kernels are stored `[out_c, in_c, kh, kw]`; bias is one value per output
//! channel.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Stride and zero padding for one spatial layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeom {
    pub fn new(stride: (usize, usize), padding: (usize, usize)) -> ConvGeom {
        ConvGeom { stride, padding }
    }

    pub fn unit() -> ConvGeom {
        ConvGeom::new((1, 1), (0, 0))
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::domain("stride 0"));
    }
    if input + 2 * pad < k {
        return Err(Error::shape(format!(
            "conv: extent {input} + 2*{pad} smaller than kernel {k}"
        )));
    }
    Ok((input + 2 * pad - k) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::domain("stride 0"));
    }
    let grown = (input - 1) * stride + k;
    if grown <= 2 * pad {
        return Err(Error::shape(format!(
            "conv_transpose: ({input}-1)*{stride}+{k} <= 2*{pad}"
        )));
    }
    Ok(grown - 2 * pad)
}

// ── Patch gather/scatter ────────────────────────────────────────────────
//
// A "placement" (gy, gx, ky, kx) touches source pixel
//   (gy*sh + ky - ph, gx*sw + kx - pw).
// `gather` reads those pixels into a [grid, kh*kw*c] matrix (zeros where the
// placement falls outside); `scatter` is its transpose, accumulating matrix
// entries back into the source layout.  Convolution gathers from its input;
// transposed convolution scatters into its output.

struct PatchGeom {
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    grid_h: usize,
    grid_w: usize,
    src_h: usize,
    src_w: usize,
    c: usize,
}

impl PatchGeom {
    fn gather(&self, src: &[f64]) -> Vec<f64> {
        let cols = self.kh * self.kw * self.c;
        let mut m = vec![0.0f64; self.grid_h * self.grid_w * cols];
        for gy in 0..self.grid_h {
            for gx in 0..self.grid_w {
                let row = (gy * self.grid_w + gx) * cols;
                for ky in 0..self.kh {
                    let sy = (gy * self.sh + ky) as isize - self.ph as isize;
                    if sy < 0 || sy >= self.src_h as isize {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let sx = (gx * self.sw + kx) as isize - self.pw as isize;
                        if sx < 0 || sx >= self.src_w as isize {
                            continue;
                        }
                        let s = ((sy as usize * self.src_w) + sx as usize) * self.c;
                        let d = row + (ky * self.kw + kx) * self.c;
                        m[d..d + self.c].copy_from_slice(&src[s..s + self.c]);
                    }
                }
            }
        }
        m
    }

    fn scatter(&self, m: &[f64], dst: &mut [f64]) {
        let cols = self.kh * self.kw * self.c;
        for gy in 0..self.grid_h {
            for gx in 0..self.grid_w {
                let row = (gy * self.grid_w + gx) * cols;
                for ky in 0..self.kh {
                    let sy = (gy * self.sh + ky) as isize - self.ph as isize;
                    if sy < 0 || sy >= self.src_h as isize {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let sx = (gx * self.sw + kx) as isize - self.pw as isize;
                        if sx < 0 || sx >= self.src_w as isize {
                            continue;
                        }
                        let d = ((sy as usize * self.src_w) + sx as usize) * self.c;
                        let s = row + (ky * self.kw + kx) * self.c;
                        for i in 0..self.c {
                            dst[d + i] += m[s + i];
                        }
                    }
                }
            }
        }
    }
}

fn check_feature_map(x: &Tensor, op: &str) -> Result<(usize, usize, usize)> {
    if x.rank() != 3 {
        return Err(Error::shape(format!("{op}: input must be [H,W,C], got {:?}", x.shape())));
    }
    Ok((x.shape()[0], x.shape()[1], x.shape()[2]))
}

fn check_kernel(k: &Tensor, b: &Tensor, in_c: usize, op: &str) -> Result<(usize, usize, usize)> {
    if k.rank() != 4 {
        return Err(Error::shape(format!(
            "{op}: kernel must be [outC,inC,kh,kw], got {:?}",
            k.shape()
        )));
    }
    let (out_c, kin_c, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    if kin_c != in_c {
        return Err(Error::shape(format!(
            "{op}: kernel expects {kin_c} input channels, map has {in_c}"
        )));
    }
    if b.shape() != [out_c] {
        return Err(Error::shape(format!(
            "{op}: bias shape {:?} for {out_c} output channels",
            b.shape()
        )));
    }
    Ok((out_c, kh, kw))
}

/// Kernel `[outC,inC,kh,kw]` flattened to a `[kh*kw*inC, outC]` matrix whose
/// row index matches the gather column order.
fn kernel_as_cols(k: &Tensor) -> Tensor {
    let (out_c, in_c, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let mut m = vec![0.0f64; kh * kw * in_c * out_c];
    let kd = k.data();
    for oc in 0..out_c {
        for ic in 0..in_c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = ((oc * in_c + ic) * kh + ky) * kw + kx;
                    let dst = ((ky * kw + kx) * in_c + ic) * out_c + oc;
                    m[dst] = kd[src];
                }
            }
        }
    }
    Tensor::from_vec(&[kh * kw * in_c, out_c], m).expect("kernel matrix")
}

/// Inverse of [`kernel_as_cols`] for gradients.
fn cols_as_kernel(m: &Tensor, out_c: usize, in_c: usize, kh: usize, kw: usize) -> Tensor {
    let mut k = vec![0.0f64; out_c * in_c * kh * kw];
    let md = m.data();
    for oc in 0..out_c {
        for ic in 0..in_c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = ((oc * in_c + ic) * kh + ky) * kw + kx;
                    let src = ((ky * kw + kx) * in_c + ic) * out_c + oc;
                    k[dst] = md[src];
                }
            }
        }
    }
    Tensor::from_vec(&[out_c, in_c, kh, kw], k).expect("kernel shape")
}

// ── Convolution ─────────────────────────────────────────────────────────

pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: &Tensor, geom: ConvGeom) -> Result<Tensor> {
    let (h, w, in_c) = check_feature_map(x, "conv2d")?;
    let (out_c, kh, kw) = check_kernel(kernel, bias, in_c, "conv2d")?;
    let oh = conv_extent(h, kh, geom.stride.0, geom.padding.0)?;
    let ow = conv_extent(w, kw, geom.stride.1, geom.padding.1)?;
    let pg = PatchGeom {
        kh,
        kw,
        sh: geom.stride.0,
        sw: geom.stride.1,
        ph: geom.padding.0,
        pw: geom.padding.1,
        grid_h: oh,
        grid_w: ow,
        src_h: h,
        src_w: w,
        c: in_c,
    };
    let patches = Tensor::from_vec(&[oh * ow, kh * kw * in_c], pg.gather(x.data()))?;
    let prod = patches.matmul(&kernel_as_cols(kernel))?;
    let mut out = prod.data().to_vec();
    let bd = bias.data();
    for row in out.chunks_exact_mut(out_c) {
        for (o, &b) in row.iter_mut().zip(bd) {
            *o += b;
        }
    }
    Tensor::from_vec(&[oh, ow, out_c], out)
}

/// Gradients of [`conv2d`]: (d_input, d_kernel, d_bias).
pub fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    geom: ConvGeom,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (h, w, in_c) = check_feature_map(x, "conv2d_backward")?;
    let (out_c, _, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    let (oh, ow) = (grad_out.shape()[0], grad_out.shape()[1]);
    let pg = PatchGeom {
        kh,
        kw,
        sh: geom.stride.0,
        sw: geom.stride.1,
        ph: geom.padding.0,
        pw: geom.padding.1,
        grid_h: oh,
        grid_w: ow,
        src_h: h,
        src_w: w,
        c: in_c,
    };
    let g = grad_out.reshape(&[oh * ow, out_c])?;
    // d_bias: column sums of g.
    let db = g.reduce_sum(Some(0))?;
    // d_kernel: patchesᵀ · g.
    let patches = Tensor::from_vec(&[oh * ow, kh * kw * in_c], pg.gather(x.data()))?;
    let dcols = patches.transpose2()?.matmul(&g)?;
    let dk = cols_as_kernel(&dcols, out_c, in_c, kh, kw);
    // d_input: scatter g · kernelᵀ back through the patch map.
    let dpatches = g.matmul(&kernel_as_cols(kernel).transpose2()?)?;
    let mut dx = vec![0.0f64; h * w * in_c];
    pg.scatter(dpatches.data(), &mut dx);
    Ok((Tensor::from_vec(&[h, w, in_c], dx)?, dk, db))
}

// ── Transposed convolution ──────────────────────────────────────────────

pub fn conv2d_transpose(
    x: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    geom: ConvGeom,
) -> Result<Tensor> {
    let (h, w, in_c) = check_feature_map(x, "conv2d_transpose")?;
    let (out_c, kh, kw) = check_kernel(kernel, bias, in_c, "conv2d_transpose")?;
    let oh = conv_transpose_extent(h, kh, geom.stride.0, geom.padding.0)?;
    let ow = conv_transpose_extent(w, kw, geom.stride.1, geom.padding.1)?;
    // votes[pos, (ky,kx,oc)] = x[pos, :] · k[:, :, ky, kx]
    let x2 = x.reshape(&[h * w, in_c])?;
    let w3 = kernel_transpose_cols(kernel);
    let votes = x2.matmul(&w3)?;
    let pg = PatchGeom {
        kh,
        kw,
        sh: geom.stride.0,
        sw: geom.stride.1,
        ph: geom.padding.0,
        pw: geom.padding.1,
        grid_h: h,
        grid_w: w,
        src_h: oh,
        src_w: ow,
        c: out_c,
    };
    let mut out = vec![0.0f64; oh * ow * out_c];
    pg.scatter(votes.data(), &mut out);
    let bd = bias.data();
    for row in out.chunks_exact_mut(out_c) {
        for (o, &b) in row.iter_mut().zip(bd) {
            *o += b;
        }
    }
    Tensor::from_vec(&[oh, ow, out_c], out)
}

/// Kernel `[outC,inC,kh,kw]` flattened to `[inC, kh*kw*outC]` for the
/// transposed direction.
fn kernel_transpose_cols(k: &Tensor) -> Tensor {
    let (out_c, in_c, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let mut m = vec![0.0f64; in_c * kh * kw * out_c];
    let kd = k.data();
    for oc in 0..out_c {
        for ic in 0..in_c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = ((oc * in_c + ic) * kh + ky) * kw + kx;
                    let dst = ic * (kh * kw * out_c) + (ky * kw + kx) * out_c + oc;
                    m[dst] = kd[src];
                }
            }
        }
    }
    Tensor::from_vec(&[in_c, kh * kw * out_c], m).expect("kernel matrix")
}

fn cols_as_kernel_transposed(m: &Tensor, out_c: usize, in_c: usize, kh: usize, kw: usize) -> Tensor {
    let mut k = vec![0.0f64; out_c * in_c * kh * kw];
    let md = m.data();
    for oc in 0..out_c {
        for ic in 0..in_c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = ((oc * in_c + ic) * kh + ky) * kw + kx;
                    let src = ic * (kh * kw * out_c) + (ky * kw + kx) * out_c + oc;
                    k[dst] = md[src];
                }
            }
        }
    }
    Tensor::from_vec(&[out_c, in_c, kh, kw], k).expect("kernel shape")
}

/// Gradients of [`conv2d_transpose`]: (d_input, d_kernel, d_bias).
pub fn conv2d_transpose_backward(
    x: &Tensor,
    kernel: &Tensor,
    geom: ConvGeom,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (h, w, in_c) = check_feature_map(x, "conv2d_transpose_backward")?;
    let (out_c, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let (oh, ow) = (grad_out.shape()[0], grad_out.shape()[1]);
    let pg = PatchGeom {
        kh,
        kw,
        sh: geom.stride.0,
        sw: geom.stride.1,
        ph: geom.padding.0,
        pw: geom.padding.1,
        grid_h: h,
        grid_w: w,
        src_h: oh,
        src_w: ow,
        c: out_c,
    };
    // d_bias: sum of grad over all output positions.
    let db = grad_out.reshape(&[oh * ow, out_c])?.reduce_sum(Some(0))?;
    // d_votes: gather the output gradient back onto placements.
    let dvotes = Tensor::from_vec(&[h * w, kh * kw * out_c], pg.gather(grad_out.data()))?;
    let w3 = kernel_transpose_cols(kernel);
    let dx2 = dvotes.matmul(&w3.transpose2()?)?;
    let x2 = x.reshape(&[h * w, in_c])?;
    let dw3 = x2.transpose2()?.matmul(&dvotes)?;
    let dk = cols_as_kernel_transposed(&dw3, out_c, in_c, kh, kw);
    Ok((dx2.reshape(&[h, w, in_c])?, dk, db))
}

// ── Max pooling ─────────────────────────────────────────────────────────

/// 2x2 max pooling with stride 2.  Trailing odd rows/columns are dropped
/// (floor semantics).  Returns the pooled map and, per output cell, the flat
/// input index that won — ties go to the first cell in scan order, so the
/// gradient of a constant window flows to its top-left pixel.
pub fn maxpool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (h, w, c) = check_feature_map(x, "maxpool2")?;
    if h < 2 || w < 2 {
        return Err(Error::shape(format!("maxpool2 on {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0f64; oh * ow * c];
    let mut arg = vec![0usize; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best_v = f64::NEG_INFINITY;
                let mut best_i = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (((oy * 2 + dy) * w) + ox * 2 + dx) * c + ch;
                        if xd[idx] > best_v {
                            best_v = xd[idx];
                            best_i = idx;
                        }
                    }
                }
                let o = (oy * ow + ox) * c + ch;
                out[o] = best_v;
                arg[o] = best_i;
            }
        }
    }
    Ok((Tensor::from_vec(&[oh, ow, c], out)?, arg))
}

// ── Tape wrappers ───────────────────────────────────────────────────────

pub fn conv2d_var<'t>(
    x: Var<'t>,
    kernel: Var<'t>,
    bias: Var<'t>,
    geom: ConvGeom,
) -> Result<Var<'t>> {
    let (xv, kv, bv) = (x.value(), kernel.value(), bias.value());
    let out = conv2d(&xv, &kv, &bv, geom)?;
    Ok(x.tape().push_op(
        out,
        &[x, kernel, bias],
        Box::new(move |g| {
            let (dx, dk, db) = conv2d_backward(&xv, &kv, geom, g).expect("conv2d grad");
            vec![dx, dk, db]
        }),
    ))
}

pub fn conv2d_transpose_var<'t>(
    x: Var<'t>,
    kernel: Var<'t>,
    bias: Var<'t>,
    geom: ConvGeom,
) -> Result<Var<'t>> {
    let (xv, kv, bv) = (x.value(), kernel.value(), bias.value());
    let out = conv2d_transpose(&xv, &kv, &bv, geom)?;
    Ok(x.tape().push_op(
        out,
        &[x, kernel, bias],
        Box::new(move |g| {
            let (dx, dk, db) =
                conv2d_transpose_backward(&xv, &kv, geom, g).expect("conv2d_transpose grad");
            vec![dx, dk, db]
        }),
    ))
}

pub fn maxpool2_var(x: Var<'_>) -> Result<Var<'_>> {
    let xv = x.value();
    let (out, arg) = maxpool2(&xv)?;
    let in_shape = xv.shape().to_vec();
    Ok(x.tape().push_op(
        out,
        &[x],
        Box::new(move |g| {
            let mut dx = vec![0.0f64; in_shape.iter().product()];
            for (o, &src) in arg.iter().enumerate() {
                dx[src] += g.data()[o];
            }
            vec![Tensor::from_vec(&in_shape, dx).expect("maxpool grad")]
        }),
    ))
}

// ── Dropout ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Inverted-dropout mask: each element is 0 with probability `rate`, else
/// `1/(1-rate)`, so the expected value of `x * mask` equals `x`.
pub fn dropout_mask(rng: &mut SeededRng, shape: &[usize], rate: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::domain(format!("dropout rate {rate}")));
    }
    let scale = 1.0 / (1.0 - rate);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| if rng.next_f64() < rate { 0.0 } else { scale })
        .collect();
    Tensor::from_vec(shape, data)
}

/// In eval phase dropout is exactly the identity (same node, no rescale).
pub fn dropout<'t>(
    x: Var<'t>,
    rate: f64,
    phase: Phase,
    rng: &mut SeededRng,
) -> Result<Var<'t>> {
    match phase {
        Phase::Eval => {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::domain(format!("dropout rate {rate}")));
            }
            Ok(x)
        }
        Phase::Train => {
            let mask = dropout_mask(rng, &x.shape(), rate)?;
            let m = x.tape().constant(mask);
            x.mul(m)
        }
    }
}

// ── Initialization ──────────────────────────────────────────────────────

/// Glorot/uniform init: draws from `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(
    rng: &mut SeededRng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Result<Tensor> {
    if fan_in + fan_out == 0 {
        return Err(Error::domain("glorot with zero fans"));
    }
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(rng, shape, -a, a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GRAD_CHECK_H};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_extent_laws() {
        // The stacks these laws must reproduce: 24x56 k3 s1 p1 -> 24x56,
        // 8x24 k5 s1 p0 -> 4x20, and the transposed 12x28 k4 s2 p0 -> 26x58.
        assert_eq!(conv_extent(24, 3, 1, 1).unwrap(), 24);
        assert_eq!(conv_extent(56, 3, 1, 1).unwrap(), 56);
        assert_eq!(conv_extent(8, 5, 1, 0).unwrap(), 4);
        assert_eq!(conv_extent(24, 5, 1, 0).unwrap(), 20);
        assert_eq!(conv_extent(20, 4, 2, 0).unwrap(), 9);
        assert_eq!(conv_transpose_extent(12, 4, 2, 0).unwrap(), 26);
        assert_eq!(conv_transpose_extent(28, 4, 2, 0).unwrap(), 58);
        assert_eq!(conv_transpose_extent(4, 5, 1, 0).unwrap(), 8);
        assert!(conv_extent(2, 5, 1, 0).is_err());
    }

    #[test]
    fn conv2d_known_values() {
        let x = t(&[3, 3, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let k = t(&[1, 1, 2, 2], &[1.0, 1.0, 1.0, 1.0]);
        let b = t(&[1], &[0.5]);
        let y = conv2d(&x, &k, &b, ConvGeom::unit()).unwrap();
        assert_eq!(y.shape(), &[2, 2, 1]);
        assert_eq!(y.data(), &[12.5, 16.5, 24.5, 28.5]);
    }

    #[test]
    fn conv2d_padding_reaches_borders() {
        let x = t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 3, 3], &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let b = t(&[1], &[0.0]);
        let y = conv2d(&x, &k, &b, ConvGeom::new((1, 1), (1, 1))).unwrap();
        // Identity kernel with p1 keeps the map.
        assert_eq!(y.shape(), &[2, 2, 1]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_transpose_known_values() {
        let x = t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 2, 2], &[1.0, 1.0, 1.0, 1.0]);
        let b = t(&[1], &[0.0]);
        let y = conv2d_transpose(&x, &k, &b, ConvGeom::unit()).unwrap();
        assert_eq!(y.shape(), &[3, 3, 1]);
        // Overlapping placements sum.
        assert_eq!(y.data(), &[1.0, 3.0, 2.0, 4.0, 10.0, 6.0, 3.0, 7.0, 4.0]);
    }

    #[test]
    fn conv_then_transpose_restores_extent() {
        let mut rng = SeededRng::new(1);
        let x = Tensor::uniform(&mut rng, &[9, 13, 2], -1.0, 1.0).unwrap();
        let k = Tensor::uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0).unwrap();
        let b = Tensor::zeros(&[3]).unwrap();
        let geom = ConvGeom::new((2, 2), (1, 1));
        let y = conv2d(&x, &k, &b, geom).unwrap();
        // (9 + 2 - 3) mod 2 == 0 and (13 + 2 - 3) mod 2 == 0, so the
        // transposed pass lands exactly on the original extent.
        let kt = Tensor::uniform(&mut rng, &[2, 3, 3, 3], -1.0, 1.0).unwrap();
        let bt = Tensor::zeros(&[2]).unwrap();
        let back = conv2d_transpose(&y, &kt, &bt, geom).unwrap();
        assert_eq!(back.shape(), x.shape());
    }

    #[test]
    fn conv2d_grad_check() {
        let mut rng = SeededRng::new(7);
        let x = Tensor::uniform(&mut rng, &[5, 5, 2], -1.0, 1.0).unwrap();
        let k = Tensor::uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0).unwrap();
        let b = Tensor::uniform(&mut rng, &[3], -0.5, 0.5).unwrap();
        let geom = ConvGeom::new((2, 2), (1, 1));
        let err = grad_check(
            |_t, vs| Ok(conv2d_var(vs[0], vs[1], vs[2], geom)?.square()?.sum_all()),
            &[x, k, b],
            GRAD_CHECK_H,
        )
        .unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn conv2d_transpose_grad_check() {
        let mut rng = SeededRng::new(8);
        let x = Tensor::uniform(&mut rng, &[4, 4, 2], -1.0, 1.0).unwrap();
        let k = Tensor::uniform(&mut rng, &[2, 2, 3, 3], -1.0, 1.0).unwrap();
        let b = Tensor::uniform(&mut rng, &[2], -0.5, 0.5).unwrap();
        let geom = ConvGeom::new((2, 2), (1, 1));
        let err = grad_check(
            |_t, vs| {
                Ok(conv2d_transpose_var(vs[0], vs[1], vs[2], geom)?
                    .square()?
                    .sum_all())
            },
            &[x, k, b],
            GRAD_CHECK_H,
        )
        .unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn maxpool_takes_max_and_routes_gradient_to_argmax() {
        let x = t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let (y, arg) = maxpool2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        // Constant window: first cell in scan order wins.
        let flat = t(&[2, 2, 1], &[5.0, 5.0, 5.0, 5.0]);
        let (_, arg) = maxpool2(&flat).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn maxpool_drops_trailing_odd_row_col() {
        let x = Tensor::zeros(&[5, 7, 2]).unwrap();
        let (y, _) = maxpool2(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2]);
    }

    #[test]
    fn maxpool_grad_check() {
        let mut rng = SeededRng::new(3);
        // Continuous draws keep window values separated well past the probe step.
        let x = Tensor::uniform(&mut rng, &[4, 4, 2], 0.0, 1.0).unwrap();
        let err = grad_check(
            |_t, vs| Ok(maxpool2_var(vs[0])?.square()?.sum_all()),
            &[x],
            GRAD_CHECK_H,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn dropout_eval_is_identity_and_train_preserves_mean() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[8], 1.0).unwrap());
        let mut rng = SeededRng::new(2);
        let y = dropout(x, 0.5, Phase::Eval, &mut rng).unwrap();
        assert_eq!(y.value().data(), x.value().data());

        // Monte-Carlo mean of the masked value over 1e5 draws stays within 2%.
        let mut rng = SeededRng::new(1234);
        let trials = 100_000usize;
        let mut acc = 0.0;
        for _ in 0..trials {
            let m = dropout_mask(&mut rng, &[1], 0.3).unwrap();
            acc += m.data()[0];
        }
        let mean = acc / trials as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn dropout_rejects_bad_rate() {
        let mut rng = SeededRng::new(2);
        assert!(dropout_mask(&mut rng, &[4], 1.0).is_err());
        assert!(dropout_mask(&mut rng, &[4], -0.1).is_err());
    }

    #[test]
    fn glorot_moments() {
        // Uniform on ±sqrt(6/(fi+fo)): mean 0, variance 2/(fi+fo).
        let mut rng = SeededRng::new(100);
        let (fi, fo) = (64, 64);
        let t = glorot_uniform(&mut rng, &[250, 400], fi, fo).unwrap();
        let n = t.numel() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let want = 2.0 / (fi + fo) as f64;
        assert!(mean.abs() < 0.002, "mean {mean}");
        assert!((var - want).abs() / want < 0.05, "var {var} want {want}");
    }

    use crate::autodiff::Tape;
}
