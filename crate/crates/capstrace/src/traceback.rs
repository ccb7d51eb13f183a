//! Traceback: turning routing couplings into per-position class probabilities.
//!
//! Routing leaves behind couplings `c[i,j]` — how much child capsule `i`
//! contributed to parent `j`.  Because each child's couplings sum to one over
//! its parents, they read as conditional assignment probabilities, and class
//! membership propagates down the capsule hierarchy by
//!
//! `P(class k | child i) = sum_j c[i,j] * P(class k | parent j)`,
//!
//! averaging over receptive-field placements when a child sits under several
//! parent positions.  At the traced layer the dense map is
//! `P(k at y,x) = sum_t activation(y,x,t) * P(k | capsule y,x,t)`.
//!
//! Everything here stays on the tape: segmentation losses defined on the map
//! backpropagate through the couplings into the routing transforms.
//!
//! [`brute_force_traceback`] recomputes the same map by enumerating every
//! assignment chain explicitly.  It shares no code with the layered pass and
//! exists as an oracle for tests; it refuses instances large enough to make
//! enumeration explode.

use crate::autodiff::Var;
use crate::capsule::CapsuleField;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Child-to-parent connectivity of a convolutional capsule layer.
///
/// For every child position it lists the `(parent_site, field_offset)` pairs
/// under which the child falls; construction fails if any child is orphaned.
#[derive(Debug, Clone)]
pub struct ParentGraph {
    pub child_h: usize,
    pub child_w: usize,
    pub child_types: usize,
    pub parent_h: usize,
    pub parent_w: usize,
    pub field: CapsuleField,
    /// Indexed by `y * child_w + x`; entries are `(q, o)` with
    /// `q = py * parent_w + px` and `o = ky * field.kw + kx`.
    locations: Vec<Vec<(usize, usize)>>,
}

impl ParentGraph {
    pub fn new(child_h: usize, child_w: usize, child_types: usize, field: CapsuleField) -> Result<Self> {
        let (parent_h, parent_w) = field.parent_extent(child_h, child_w)?;
        let s = field.stride;
        let mut locations = vec![Vec::new(); child_h * child_w];
        for py in 0..parent_h {
            for px in 0..parent_w {
                let q = py * parent_w + px;
                for ky in 0..field.kh {
                    for kx in 0..field.kw {
                        let (y, x) = (py * s + ky, px * s + kx);
                        locations[y * child_w + x].push((q, ky * field.kw + kx));
                    }
                }
            }
        }
        if let Some(i) = locations.iter().position(|l| l.is_empty()) {
            // parent_extent already rejects gap configurations; keep the
            // invariant checked rather than assumed.
            return Err(Error::graph(format!(
                "child position {} has no parent placement",
                i
            )));
        }
        Ok(Self {
            child_h,
            child_w,
            child_types,
            parent_h,
            parent_w,
            field,
            locations,
        })
    }

    pub fn locations(&self, y: usize, x: usize) -> &[(usize, usize)] {
        &self.locations[y * self.child_w + x]
    }
}

/// Reshape class-layer couplings `[1, H*W*T, K]` into per-capsule class
/// conditionals `[H, W, T, K]` for the layer feeding the class capsules.
pub fn init_conditionals<'t>(
    class_coupling: Var<'t>,
    h: usize,
    w: usize,
    types: usize,
) -> Result<Var<'t>> {
    let s = class_coupling.shape();
    if s.len() != 3 || s[0] != 1 || s[1] != h * w * types {
        return Err(Error::shape(format!(
            "class couplings {s:?} do not cover a {h}x{w}x{types} layer"
        )));
    }
    class_coupling.reshape(&[h, w, types, s[2]])
}

/// One traceback recursion step: push conditionals from a parent layer down
/// to its children through the couplings that routed them.
///
/// `cond`: `[Hp, Wp, P, K]`, `coupling`: `[Hp*Wp, kh*kw*T, P]` ->
/// `[H, W, T, K]`, averaging over a child's placements.
pub fn traceback_step<'t>(cond: Var<'t>, coupling: Var<'t>, graph: &ParentGraph) -> Result<Var<'t>> {
    let cs = cond.shape();
    let ps = coupling.shape();
    if cs.len() != 4 || cs[0] != graph.parent_h || cs[1] != graph.parent_w {
        return Err(Error::shape(format!(
            "conditionals {cs:?} vs parent grid {}x{}",
            graph.parent_h, graph.parent_w
        )));
    }
    let (pt, k) = (cs[2], cs[3]);
    let slots = graph.field.kh * graph.field.kw * graph.child_types;
    if ps != [graph.parent_h * graph.parent_w, slots, pt] {
        return Err(Error::shape(format!(
            "couplings {ps:?}, expected [{}, {slots}, {pt}]",
            graph.parent_h * graph.parent_w
        )));
    }
    let (h, w, t) = (graph.child_h, graph.child_w, graph.child_types);
    let cond_v = cond.value();
    let coup_v = coupling.value();
    let g = graph.clone();

    let mut out = vec![0.0f64; h * w * t * k];
    {
        let cd = cond_v.data();
        let cc = coup_v.data();
        for y in 0..h {
            for x in 0..w {
                let locs = g.locations(y, x);
                let inv = 1.0 / locs.len() as f64;
                for &(q, o) in locs {
                    for tt in 0..t {
                        let obase = ((y * w + x) * t + tt) * k;
                        let crow = &cc[(q * slots + o * t + tt) * pt..][..pt];
                        for (pi, &cw) in crow.iter().enumerate() {
                            let scale = cw * inv;
                            let cbase = (q * pt + pi) * k;
                            for kk in 0..k {
                                out[obase + kk] += scale * cd[cbase + kk];
                            }
                        }
                    }
                }
            }
        }
    }
    let value = Tensor::from_vec(&[h, w, t, k], out)?;
    Ok(cond.tape().push_op(
        value,
        &[cond, coupling],
        Box::new(move |grad| {
            let gd = grad.data();
            let cd = cond_v.data();
            let cc = coup_v.data();
            let mut dcond = vec![0.0f64; cond_v.numel()];
            let mut dcoup = vec![0.0f64; coup_v.numel()];
            for y in 0..g.child_h {
                for x in 0..g.child_w {
                    let locs = g.locations(y, x);
                    let inv = 1.0 / locs.len() as f64;
                    for &(q, o) in locs {
                        for tt in 0..t {
                            let obase = ((y * g.child_w + x) * t + tt) * k;
                            let cbase_row = (q * slots + o * t + tt) * pt;
                            for pi in 0..pt {
                                let cbase = (q * pt + pi) * k;
                                let mut dot = 0.0;
                                for kk in 0..k {
                                    let gk = gd[obase + kk];
                                    dcond[cbase + kk] += inv * cc[cbase_row + pi] * gk;
                                    dot += gk * cd[cbase + kk];
                                }
                                dcoup[cbase_row + pi] += inv * dot;
                            }
                        }
                    }
                }
            }
            vec![
                Tensor::from_vec(cond_v.shape(), dcond).expect("traceback_step grad"),
                Tensor::from_vec(coup_v.shape(), dcoup).expect("traceback_step grad"),
            ]
        }),
    ))
}

/// One capsule layer as seen by traceback.
pub struct TracedLayer<'t> {
    /// Squashed poses `[H, W, T, D]`.
    pub poses: Var<'t>,
    /// Couplings and connectivity of the routing that produced THIS layer
    /// from the one below; `None` for the bottom (primary) layer.
    pub from_below: Option<(Var<'t>, ParentGraph)>,
}

/// A full capsule hierarchy: convolutional capsule layers bottom-up, then the
/// class capsules.
pub struct CapsuleStack<'t> {
    pub layers: Vec<TracedLayer<'t>>,
    /// `[1, N_top, K]` couplings of the class routing.
    pub class_coupling: Var<'t>,
    /// `[K, D]` class poses.
    pub class_poses: Var<'t>,
    /// `[K]` class activations.
    pub class_activations: Var<'t>,
}

impl<'t> CapsuleStack<'t> {
    pub fn num_classes(&self) -> usize {
        self.class_coupling.shape()[2]
    }
}

/// Result of tracing class membership down to a capsule layer.
pub struct TracebackOutput<'t> {
    /// Dense class map `[H, W, K]` at the traced layer.
    pub map: Var<'t>,
    /// Per-capsule conditionals `[H, W, T, K]` at the traced layer.
    pub conditionals: Var<'t>,
    /// Index into `stack.layers` of the traced layer.
    pub layer: usize,
}

/// Trace class conditionals `depth` capsule layers down from the class
/// capsules and fold them with activations into a dense class map.
///
/// `depth = 1` traces to the topmost convolutional capsule layer,
/// `depth = stack.layers.len()` all the way to the primary capsules.
pub fn run_traceback<'t>(stack: &CapsuleStack<'t>, depth: usize) -> Result<TracebackOutput<'t>> {
    let l = stack.layers.len();
    if depth == 0 || depth > l {
        return Err(Error::config(format!(
            "traceback depth {depth} outside 1..={l}"
        )));
    }
    let top = l - 1;
    let ts = stack.layers[top].poses.shape();
    let mut cond = init_conditionals(stack.class_coupling, ts[0], ts[1], ts[2])?;
    let mut li = top;
    for _ in 1..depth {
        let (coupling, graph) = stack.layers[li]
            .from_below
            .as_ref()
            .ok_or_else(|| Error::state(format!("layer {li} kept no couplings")))?;
        cond = traceback_step(cond, *coupling, graph)?;
        li -= 1;
    }
    let k = stack.num_classes();
    let poses = stack.layers[li].poses;
    let act = poses.norm_last()?; // [H, W, T]
    let map = act.tile_axis(3, k)?.mul(cond)?.sum_axis(2)?;
    Ok(TracebackOutput {
        map,
        conditionals: cond,
        layer: li,
    })
}

// ── Enumeration oracle ──────────────────────────────────────────────────

const ENUM_MAX_LAYERS: usize = 3;
const ENUM_MAX_POSITIONS: usize = 16;
const ENUM_MAX_TYPES: usize = 8;
const ENUM_MAX_CLASSES: usize = 8;

/// Recompute the traceback map by walking every chain of (placement, parent
/// type) assignments from each traced capsule up to the class couplings,
/// multiplying couplings along the way.  Exponential in depth; refuses
/// instances beyond a small size envelope.
pub fn brute_force_traceback(stack: &CapsuleStack<'_>, depth: usize) -> Result<Tensor> {
    let l = stack.layers.len();
    if depth == 0 || depth > l {
        return Err(Error::config(format!(
            "traceback depth {depth} outside 1..={l}"
        )));
    }
    if l > ENUM_MAX_LAYERS {
        return Err(Error::contract("enumeration limited to 3 capsule layers"));
    }
    let k = stack.num_classes();
    if k > ENUM_MAX_CLASSES {
        return Err(Error::contract("enumeration limited to 8 classes"));
    }
    for layer in &stack.layers {
        let s = layer.poses.shape();
        if s[0] * s[1] > ENUM_MAX_POSITIONS || s[2] > ENUM_MAX_TYPES {
            return Err(Error::contract(
                "enumeration limited to 16 positions x 8 types per layer",
            ));
        }
    }

    let top = l - 1;
    let li0 = l - depth;
    let poses = stack.layers[li0].poses.value();
    let ps = poses.shape().to_vec();
    let (h, w, t, d) = (ps[0], ps[1], ps[2], ps[3]);
    let class_c = stack.class_coupling.value();
    let top_shape = stack.layers[top].poses.shape();
    let (tw, tt) = (top_shape[1], top_shape[2]);

    // Chain weights: frame = (layer, y, x, type, accumulated weight).
    let mut map = vec![0.0f64; h * w * k];
    for y in 0..h {
        for x in 0..w {
            for t0 in 0..t {
                let mut pk = vec![0.0f64; k];
                let mut frames = vec![(li0, y, x, t0, 1.0f64)];
                while let Some((li, cy, cx, ct, weight)) = frames.pop() {
                    if li == top {
                        let row = (cy * tw + cx) * tt + ct;
                        for kk in 0..k {
                            pk[kk] += weight * class_c.data()[row * k + kk];
                        }
                        continue;
                    }
                    let (coupling, graph) = stack.layers[li + 1]
                        .from_below
                        .as_ref()
                        .ok_or_else(|| Error::state(format!("layer {} kept no couplings", li + 1)))?;
                    let cv = coupling.value();
                    let ps2 = cv.shape().to_vec();
                    let (slots, pt) = (ps2[1], ps2[2]);
                    let locs = graph.locations(cy, cx);
                    let inv = 1.0 / locs.len() as f64;
                    for &(q, o) in locs {
                        for pi in 0..pt {
                            let cw = cv.data()[(q * slots + o * graph.child_types + ct) * pt + pi];
                            frames.push((
                                li + 1,
                                q / graph.parent_w,
                                q % graph.parent_w,
                                pi,
                                weight * cw * inv,
                            ));
                        }
                    }
                }
                // Fold with the capsule's activation (norm of squashed pose).
                let base = ((y * w + x) * t + t0) * d;
                let act = poses.data()[base..base + d]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                for kk in 0..k {
                    map[(y * w + x) * k + kk] += act * pk[kk];
                }
            }
        }
    }
    Tensor::from_vec(&[h, w, k], map)
}
