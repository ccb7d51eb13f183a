//! Capsule layers and routing-by-agreement.
//!
//! A capsule grid is a tensor `[H, W, T, D]`: `T` capsule types per position,
//! each a `D`-dimensional pose.  A capsule's activation is the length of its
//! (squashed) pose, always in `[0, 1)`.
//!
//! Vote tensors are `[Q, N, P, D]`: `Q` independent routing sites, `N` child
//! slots per site, `P` parent capsules, `D` parent pose width.  A site is a
//! parent grid position for the convolutional layer (children = receptive
//! field x types) and the single fully connected site for the class layer
//! (children = all positions x types).

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{conv2d_var, ConvGeom};
use crate::tensor::Tensor;

/// Receptive field of a convolutional capsule layer (valid placement only).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CapsuleField {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl CapsuleField {
    /// Parent grid extent; errors unless every child position is covered by
    /// at least one placement, which also requires exact tiling.
    pub fn parent_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::domain("capsule field stride 0"));
        }
        if self.kh > h || self.kw > w {
            return Err(Error::graph(format!(
                "field {}x{} larger than child grid {h}x{w}",
                self.kh, self.kw
            )));
        }
        if self.stride > self.kh.min(self.kw) {
            return Err(Error::graph(
                "stride exceeds kernel: some children would have no parent",
            ));
        }
        if (h - self.kh) % self.stride != 0 || (w - self.kw) % self.stride != 0 {
            return Err(Error::graph(format!(
                "field {}x{} stride {} does not tile {h}x{w}",
                self.kh, self.kw, self.stride
            )));
        }
        Ok((
            (h - self.kh) / self.stride + 1,
            (w - self.kw) / self.stride + 1,
        ))
    }
}

/// How gradients treat the routing recurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoutingPolicy {
    /// Differentiate through every routing iteration (default).
    Unrolled,
    /// Treat the final couplings as constants; gradients flow only through
    /// the last weighted sum and squash.
    DetachedC,
}

fn dims4(u_hat: &Var<'_>, op: &str) -> Result<(usize, usize, usize, usize)> {
    let s = u_hat.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("{op}: votes must be [Q,N,P,D], got {s:?}")));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Routing by agreement over `iterations` rounds.
///
/// Logits start at zero; each round takes couplings `c = softmax(b)` over the
/// parent axis, forms parent inputs `s = sum_n c * u_hat`, squashes them, and
/// (except after the last round) adds the agreement `u_hat . v` back onto the
/// logits.  Returns the final parent poses `[Q, P, D]` and couplings
/// `[Q, N, P]` — the couplings retained for traceback are exactly the ones
/// that produced the returned poses.
pub fn dynamic_routing<'t>(
    u_hat: Var<'t>,
    iterations: usize,
    policy: RoutingPolicy,
) -> Result<(Var<'t>, Var<'t>)> {
    if iterations == 0 {
        return Err(Error::domain("routing needs at least one iteration"));
    }
    let (q, n, p, d) = dims4(&u_hat, "dynamic_routing")?;
    match policy {
        RoutingPolicy::Unrolled => {
            let tape = u_hat.tape();
            let mut b = tape.constant(Tensor::zeros(&[q, n, p])?);
            let mut out = None;
            for it in 0..iterations {
                let c = b.softmax(2)?;
                let s = c.tile_axis(3, d)?.mul(u_hat)?.sum_axis(1)?;
                let v = s.squash_last()?;
                if it + 1 < iterations {
                    let agree = u_hat.mul(v.tile_axis(1, n)?)?.sum_axis(3)?;
                    b = b.add(agree)?;
                }
                out = Some((v, c));
            }
            Ok(out.expect("iterations >= 1"))
        }
        RoutingPolicy::DetachedC => {
            // Same recurrence on a scratch tape for values only, then a single
            // differentiable weighted sum with the couplings frozen.
            let scratch = Tape::new();
            let probe = scratch.constant(u_hat.value());
            let (_, c_val) = dynamic_routing(probe, iterations, RoutingPolicy::Unrolled)?;
            let tape = u_hat.tape();
            let c = tape.constant(c_val.value());
            let s = c.tile_axis(3, d)?.mul(u_hat)?.sum_axis(1)?;
            let v = s.squash_last()?;
            Ok((v, c))
        }
    }
}

/// Value-level routing: same recurrence, no gradients.
pub fn dynamic_routing_tensor(u_hat: &Tensor, iterations: usize) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let lifted;
    let var = if u_hat.rank() == 3 {
        // [N,P,D] is the single-site case.
        let s = u_hat.shape();
        lifted = u_hat.reshape(&[1, s[0], s[1], s[2]])?;
        tape.constant(lifted.clone())
    } else {
        tape.constant(u_hat.clone())
    };
    let (v, c) = dynamic_routing(var, iterations, RoutingPolicy::Unrolled)?;
    if u_hat.rank() == 3 {
        let (vv, cv) = (v.value(), c.value());
        let vs = vv.shape().to_vec();
        let cs = cv.shape().to_vec();
        Ok((vv.reshape(&vs[1..])?, cv.reshape(&cs[1..])?))
    } else {
        Ok((v.value(), c.value()))
    }
}

// ── Vote computation ────────────────────────────────────────────────────

/// Fully connected votes: every child capsule (position x type) casts a vote
/// for each of `K` parents through its own transform.
///
/// `u`: `[H, W, T, D]`; `w`: `[H*W*T, K, Dout, D]` -> votes `[1, H*W*T, K, Dout]`.
pub fn class_votes<'t>(u: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    let us = u.shape();
    let ws = w.shape();
    if us.len() != 4 {
        return Err(Error::shape(format!("class_votes: poses {us:?}")));
    }
    let (h, wd, t, d) = (us[0], us[1], us[2], us[3]);
    let n = h * wd * t;
    if ws.len() != 4 || ws[0] != n || ws[3] != d {
        return Err(Error::shape(format!(
            "class_votes: transform {ws:?} for {n} children of width {d}"
        )));
    }
    let (k, dout) = (ws[1], ws[2]);
    let (uv, wv) = (u.value(), w.value());
    let mut out = vec![0.0f64; n * k * dout];
    {
        let ud = uv.data();
        let wd_ = wv.data();
        for i in 0..n {
            let ui = &ud[i * d..(i + 1) * d];
            for kk in 0..k {
                let base_w = ((i * k) + kk) * dout * d;
                let base_o = (i * k + kk) * dout;
                for a in 0..dout {
                    let row = &wd_[base_w + a * d..base_w + (a + 1) * d];
                    out[base_o + a] = row.iter().zip(ui).map(|(x, y)| x * y).sum();
                }
            }
        }
    }
    let value = Tensor::from_vec(&[1, n, k, dout], out)?;
    Ok(u.tape().push_op(
        value,
        &[u, w],
        Box::new(move |g| {
            let gd = g.data();
            let ud = uv.data();
            let wd_ = wv.data();
            let mut du = vec![0.0f64; uv.numel()];
            let mut dw = vec![0.0f64; wv.numel()];
            for i in 0..n {
                let ui = &ud[i * d..(i + 1) * d];
                for kk in 0..k {
                    let base_w = ((i * k) + kk) * dout * d;
                    let base_g = (i * k + kk) * dout;
                    for a in 0..dout {
                        let ga = gd[base_g + a];
                        if ga == 0.0 {
                            continue;
                        }
                        for b in 0..d {
                            du[i * d + b] += ga * wd_[base_w + a * d + b];
                            dw[base_w + a * d + b] += ga * ui[b];
                        }
                    }
                }
            }
            vec![
                Tensor::from_vec(uv.shape(), du).expect("class_votes grad"),
                Tensor::from_vec(wv.shape(), dw).expect("class_votes grad"),
            ]
        }),
    ))
}

/// Convolutional votes: parent position `q` routes the children inside its
/// receptive field.  The transform is shared across positions.
///
/// `u`: `[H, W, T, D]`; `w`: `[T, P, Dout, D]` -> votes
/// `[Hp*Wp, kh*kw*T, P, Dout]`, child slot `(ky*kw + kx)*T + t`.
pub fn conv_votes<'t>(u: Var<'t>, w: Var<'t>, field: CapsuleField) -> Result<Var<'t>> {
    let us = u.shape();
    let ws = w.shape();
    if us.len() != 4 {
        return Err(Error::shape(format!("conv_votes: poses {us:?}")));
    }
    let (h, wd, t, d) = (us[0], us[1], us[2], us[3]);
    if ws.len() != 4 || ws[0] != t || ws[3] != d {
        return Err(Error::shape(format!(
            "conv_votes: transform {ws:?} for {t} child types of width {d}"
        )));
    }
    let (p, dout) = (ws[1], ws[2]);
    let (ph, pw) = field.parent_extent(h, wd)?;
    let q = ph * pw;
    let slots = field.kh * field.kw * t;
    let (uv, wv) = (u.value(), w.value());
    let mut out = vec![0.0f64; q * slots * p * dout];
    {
        let ud = uv.data();
        let wdat = wv.data();
        for py in 0..ph {
            for px in 0..pw {
                let qi = py * pw + px;
                for ky in 0..field.kh {
                    for kx in 0..field.kw {
                        let (cy, cx) = (py * field.stride + ky, px * field.stride + kx);
                        for tt in 0..t {
                            let ui = &ud[(((cy * wd) + cx) * t + tt) * d..][..d];
                            let slot = (ky * field.kw + kx) * t + tt;
                            for pp in 0..p {
                                let wrow = &wdat[((tt * p) + pp) * dout * d..][..dout * d];
                                let o = ((qi * slots + slot) * p + pp) * dout;
                                for a in 0..dout {
                                    out[o + a] = wrow[a * d..(a + 1) * d]
                                        .iter()
                                        .zip(ui)
                                        .map(|(x, y)| x * y)
                                        .sum();
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let value = Tensor::from_vec(&[q, slots, p, dout], out)?;
    let fld = field;
    Ok(u.tape().push_op(
        value,
        &[u, w],
        Box::new(move |g| {
            let gd = g.data();
            let ud = uv.data();
            let wdat = wv.data();
            let mut du = vec![0.0f64; uv.numel()];
            let mut dw = vec![0.0f64; wv.numel()];
            for py in 0..ph {
                for px in 0..pw {
                    let qi = py * pw + px;
                    for ky in 0..fld.kh {
                        for kx in 0..fld.kw {
                            let (cy, cx) = (py * fld.stride + ky, px * fld.stride + kx);
                            for tt in 0..t {
                                let ubase = (((cy * wd) + cx) * t + tt) * d;
                                let slot = (ky * fld.kw + kx) * t + tt;
                                for pp in 0..p {
                                    let wbase = ((tt * p) + pp) * dout * d;
                                    let o = ((qi * slots + slot) * p + pp) * dout;
                                    for a in 0..dout {
                                        let ga = gd[o + a];
                                        if ga == 0.0 {
                                            continue;
                                        }
                                        for b in 0..d {
                                            du[ubase + b] += ga * wdat[wbase + a * d + b];
                                            dw[wbase + a * d + b] += ga * ud[ubase + b];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![
                Tensor::from_vec(uv.shape(), du).expect("conv_votes grad"),
                Tensor::from_vec(wv.shape(), dw).expect("conv_votes grad"),
            ]
        }),
    ))
}

// ── Layers ──────────────────────────────────────────────────────────────

/// Primary capsules: a convolution whose output channels are read as
/// `types x dim` pose components, squashed per capsule.
pub fn primary_capsules<'t>(
    features: Var<'t>,
    kernel: Var<'t>,
    bias: Var<'t>,
    geom: ConvGeom,
    types: usize,
    dim: usize,
) -> Result<Var<'t>> {
    let out_c = kernel.shape()[0];
    if out_c != types * dim {
        return Err(Error::shape(format!(
            "primary_capsules: kernel emits {out_c} channels, want {types}x{dim}"
        )));
    }
    let conv = conv2d_var(features, kernel, bias, geom)?;
    let s = conv.shape();
    conv.reshape(&[s[0], s[1], types, dim])?.squash_last()
}

/// Output of a convolutional capsule layer.
pub struct ConvCapsules<'t> {
    /// Parent poses `[Hp, Wp, P, Dout]`.
    pub poses: Var<'t>,
    /// Couplings `[Hp*Wp, kh*kw*T, P]` — one routing site per parent position.
    pub coupling: Var<'t>,
    pub field: CapsuleField,
}

pub fn conv_capsule_layer<'t>(
    child: Var<'t>,
    w: Var<'t>,
    field: CapsuleField,
    iterations: usize,
    policy: RoutingPolicy,
) -> Result<ConvCapsules<'t>> {
    let us = child.shape();
    let (h, wd) = (us[0], us[1]);
    let (ph, pw) = field.parent_extent(h, wd)?;
    let votes = conv_votes(child, w, field)?;
    let (v, c) = dynamic_routing(votes, iterations, policy)?;
    let vs = v.shape();
    let poses = v.reshape(&[ph, pw, vs[1], vs[2]])?;
    Ok(ConvCapsules {
        poses,
        coupling: c,
        field,
    })
}

/// Output of the class capsule layer.
pub struct ClassCapsules<'t> {
    /// Class poses `[K, Dout]`.
    pub poses: Var<'t>,
    /// Class activations `[K]`, each in `[0, 1)`.
    pub activations: Var<'t>,
    /// Couplings `[1, H*W*T, K]` over the single fully connected site.
    pub coupling: Var<'t>,
}

pub fn class_capsule_layer<'t>(
    child: Var<'t>,
    w: Var<'t>,
    iterations: usize,
    policy: RoutingPolicy,
) -> Result<ClassCapsules<'t>> {
    let votes = class_votes(child, w)?;
    let (v, c) = dynamic_routing(votes, iterations, policy)?;
    let vs = v.shape();
    let poses = v.reshape(&[vs[1], vs[2]])?;
    let activations = poses.norm_last()?;
    Ok(ClassCapsules {
        poses,
        activations,
        coupling: c,
    })
}
