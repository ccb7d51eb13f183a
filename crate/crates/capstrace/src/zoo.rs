//! Model catalog: capsule segmentation networks and U-Net baselines, plus a
//! shape audit that walks every architecture against its reference layout.
//!
//! A [`ModelSpec`] is an ordered list of layer descriptors.  Layers are
//! named; skip connections reference earlier layers by name, and parameters
//! are stored under `<layer>.<role>` keys in deterministic (sorted) order.
//!
//! Two architectures ship with embedded reference tables listing the layout
//! they reproduce (output size per layer).  The audit walks the shape laws,
//! compares every row, and reports the handful of places where the reference
//! text's printed configuration cannot produce its own printed output sizes
//! — those rows carry documented corrections (a pooling stride, one kernel,
//! one padding) and anything else is a hard mismatch.

use crate::autodiff::{concat, Tape, Var};
use crate::capsule::{
    class_capsule_layer, conv_capsule_layer, primary_capsules, CapsuleField, RoutingPolicy,
};
use crate::error::{Error, Result};
use crate::nn::{
    conv2d_var, conv2d_transpose_var, conv_extent, conv_transpose_extent, dropout,
    glorot_uniform, maxpool2_var, ConvGeom, Phase,
};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::traceback::{run_traceback, CapsuleStack, ParentGraph, TracedLayer};
use std::collections::BTreeMap;
use std::collections::HashMap;

// ── Descriptors ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerDesc {
    Conv {
        name: String,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        relu: bool,
    },
    ConvTranspose {
        name: String,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        relu: bool,
    },
    /// Non-overlapping 2x2 max pooling (stride 2).
    MaxPool2 { name: String },
    Dropout { name: String, rate: f64 },
    /// Concatenate the current map with an earlier layer's output (channels).
    Concat { name: String, with: String },
    /// Convolution read as `types x dim` capsule poses, squashed.
    PrimaryCaps {
        name: String,
        types: usize,
        dim: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    },
    /// Convolutional capsule layer (routed per parent position).
    ConvCaps {
        name: String,
        types: usize,
        dim: usize,
        /// (kh, kw, stride)
        field: (usize, usize, usize),
    },
    /// Fully connected class capsules, one per class.
    ClassCaps { name: String, dim: usize },
    /// Trace class conditionals back down the capsule stack into a dense map.
    Traceback { name: String },
}

impl LayerDesc {
    pub fn name(&self) -> &str {
        match self {
            LayerDesc::Conv { name, .. }
            | LayerDesc::ConvTranspose { name, .. }
            | LayerDesc::MaxPool2 { name }
            | LayerDesc::Dropout { name, .. }
            | LayerDesc::Concat { name, .. }
            | LayerDesc::PrimaryCaps { name, .. }
            | LayerDesc::ConvCaps { name, .. }
            | LayerDesc::ClassCaps { name, .. }
            | LayerDesc::Traceback { name } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    /// `[H, W, C]` expected input.
    pub input: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<LayerDesc>,
    pub routing_iterations: usize,
    pub routing_policy: RoutingPolicy,
    /// Capsule layers traced by the traceback layer (capsule models only).
    pub traceback_depth: Option<usize>,
}

impl ModelSpec {
    pub fn is_capsule_model(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerDesc::ClassCaps { .. }))
    }
}

// ── Shape walk ──────────────────────────────────────────────────────────

/// Value shape flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sig {
    /// Feature map `[h, w, c]`.
    Map(usize, usize, usize),
    /// Capsule grid `[h, w, types, dim]`.
    Caps(usize, usize, usize, usize),
    /// Class capsules `[k, dim]`.
    Class(usize, usize),
}

impl Sig {
    fn dims(&self) -> Vec<usize> {
        match *self {
            Sig::Map(h, w, c) => vec![h, w, c],
            Sig::Caps(h, w, t, d) => vec![h, w, t, d],
            Sig::Class(k, d) => vec![k, d],
        }
    }
}

struct Planned {
    out: Sig,
    /// Input channels for layers with parameters.
    in_sig: Sig,
}

/// Walk the shape laws through the layer list.
fn plan(spec: &ModelSpec) -> Result<Vec<Planned>> {
    if spec.input.len() != 3 {
        return Err(Error::config(format!("input must be [H,W,C], got {:?}", spec.input)));
    }
    let mut cur = Sig::Map(spec.input[0], spec.input[1], spec.input[2]);
    let mut saved: HashMap<&str, Sig> = HashMap::new();
    let mut caps_dims: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut class_seen = false;
    let mut out = Vec::with_capacity(spec.layers.len());
    for l in &spec.layers {
        let in_sig = cur;
        let name = l.name();
        cur = match l {
            LayerDesc::Conv { out_channels, kernel, stride, padding, .. } => {
                let Sig::Map(h, w, _) = cur else {
                    return Err(Error::config(format!("{name}: convolution needs a feature map")));
                };
                Sig::Map(
                    conv_extent(h, kernel.0, stride.0, padding.0)?,
                    conv_extent(w, kernel.1, stride.1, padding.1)?,
                    *out_channels,
                )
            }
            LayerDesc::ConvTranspose { out_channels, kernel, stride, padding, .. } => {
                let Sig::Map(h, w, _) = cur else {
                    return Err(Error::config(format!("{name}: transpose needs a feature map")));
                };
                Sig::Map(
                    conv_transpose_extent(h, kernel.0, stride.0, padding.0)?,
                    conv_transpose_extent(w, kernel.1, stride.1, padding.1)?,
                    *out_channels,
                )
            }
            LayerDesc::MaxPool2 { .. } => {
                let Sig::Map(h, w, c) = cur else {
                    return Err(Error::config(format!("{name}: pooling needs a feature map")));
                };
                if h < 2 || w < 2 {
                    return Err(Error::config(format!("{name}: cannot pool {h}x{w}")));
                }
                Sig::Map(h / 2, w / 2, c)
            }
            LayerDesc::Dropout { rate, .. } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::config(format!("{name}: dropout rate {rate}")));
                }
                cur
            }
            LayerDesc::Concat { with, .. } => {
                let Sig::Map(h, w, c) = cur else {
                    return Err(Error::config(format!("{name}: concat needs a feature map")));
                };
                let Some(&Sig::Map(h2, w2, c2)) = saved.get(with.as_str()) else {
                    return Err(Error::config(format!("{name}: no feature map named '{with}'")));
                };
                if (h, w) != (h2, w2) {
                    return Err(Error::config(format!(
                        "{name}: cannot concat {h}x{w} with {with} ({h2}x{w2})"
                    )));
                }
                Sig::Map(h, w, c + c2)
            }
            LayerDesc::PrimaryCaps { types, dim, kernel, stride, padding, .. } => {
                let Sig::Map(h, w, _) = cur else {
                    return Err(Error::config(format!("{name}: capsules need a feature map")));
                };
                let oh = conv_extent(h, kernel.0, stride.0, padding.0)?;
                let ow = conv_extent(w, kernel.1, stride.1, padding.1)?;
                caps_dims.push((oh, ow, *types, *dim));
                Sig::Caps(oh, ow, *types, *dim)
            }
            LayerDesc::ConvCaps { types, dim, field, .. } => {
                let Sig::Caps(h, w, _, _) = cur else {
                    return Err(Error::config(format!("{name}: needs a capsule grid")));
                };
                let f = CapsuleField { kh: field.0, kw: field.1, stride: field.2 };
                let (ph, pw) = f.parent_extent(h, w)?;
                caps_dims.push((ph, pw, *types, *dim));
                Sig::Caps(ph, pw, *types, *dim)
            }
            LayerDesc::ClassCaps { dim, .. } => {
                let Sig::Caps(..) = cur else {
                    return Err(Error::config(format!("{name}: needs a capsule grid")));
                };
                class_seen = true;
                Sig::Class(spec.num_classes, *dim)
            }
            LayerDesc::Traceback { .. } => {
                if !class_seen {
                    return Err(Error::config(format!("{name}: no class capsules to trace from")));
                }
                let depth = spec
                    .traceback_depth
                    .ok_or_else(|| Error::config(format!("{name}: traceback depth unset")))?;
                if depth == 0 || depth > caps_dims.len() {
                    return Err(Error::config(format!(
                        "{name}: depth {depth} outside 1..={}",
                        caps_dims.len()
                    )));
                }
                let (h, w, ..) = caps_dims[caps_dims.len() - depth];
                Sig::Map(h, w, spec.num_classes)
            }
        };
        saved.insert(name, cur);
        out.push(Planned { out: cur, in_sig });
    }
    // Final layer must produce the segmentation logits.
    match cur {
        Sig::Map(h, w, c)
            if h == spec.input[0] && w == spec.input[1] && c == spec.num_classes => {}
        other => {
            return Err(Error::config(format!(
                "network ends in {:?}, expected {}x{}x{} logits",
                other.dims(),
                spec.input[0],
                spec.input[1],
                spec.num_classes
            )))
        }
    }
    Ok(out)
}

// ── Parameters ──────────────────────────────────────────────────────────

/// Named parameter tensors in deterministic (sorted) order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn leaf_vars<'t>(&self, tape: &'t Tape) -> BTreeMap<String, Var<'t>> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect()
    }

    pub fn total_len(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }
}

/// Parameter shapes for one layer: `(suffix, shape, fan_in, fan_out)`.
fn param_shapes(l: &LayerDesc, in_sig: Sig) -> Vec<(&'static str, Vec<usize>, usize, usize)> {
    match l {
        LayerDesc::Conv { out_channels, kernel, .. }
        | LayerDesc::ConvTranspose { out_channels, kernel, .. } => {
            let Sig::Map(_, _, c) = in_sig else { unreachable!("planned") };
            let (kh, kw) = *kernel;
            vec![
                ("kernel", vec![*out_channels, c, kh, kw], c * kh * kw, out_channels * kh * kw),
                ("bias", vec![*out_channels], 1, 1),
            ]
        }
        LayerDesc::PrimaryCaps { types, dim, kernel, .. } => {
            let Sig::Map(_, _, c) = in_sig else { unreachable!("planned") };
            let (kh, kw) = *kernel;
            let out_c = types * dim;
            vec![
                ("kernel", vec![out_c, c, kh, kw], c * kh * kw, out_c * kh * kw),
                ("bias", vec![out_c], 1, 1),
            ]
        }
        LayerDesc::ConvCaps { types, dim, .. } => {
            let Sig::Caps(_, _, t, d) = in_sig else { unreachable!("planned") };
            vec![("w", vec![t, *types, *dim, d], d, *dim)]
        }
        LayerDesc::ClassCaps { dim, .. } => {
            let Sig::Caps(h, w, t, d) = in_sig else { unreachable!("planned") };
            // One transform per (position, type) child and class: the class
            // layer is fully connected, nothing is shared across positions.
            vec![("w", vec![h * w * t, 0, *dim, d], d, *dim)] // 0 patched by caller (k)
        }
        _ => Vec::new(),
    }
}

/// Total trainable parameter count.
pub fn param_count(spec: &ModelSpec) -> Result<usize> {
    let planned = plan(spec)?;
    let mut n = 0usize;
    for (l, p) in spec.layers.iter().zip(&planned) {
        for (_, mut shape, _, _) in param_shapes(l, p.in_sig) {
            if shape.get(1) == Some(&0) {
                shape[1] = spec.num_classes;
            }
            n += shape.iter().product::<usize>();
        }
    }
    Ok(n)
}

/// Glorot-initialized parameters from a single seeded stream, in layer order.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    let planned = plan(spec)?;
    let mut rng = SeededRng::new(seed);
    let mut tensors = BTreeMap::new();
    for (l, p) in spec.layers.iter().zip(&planned) {
        for (suffix, mut shape, fan_in, fan_out) in param_shapes(l, p.in_sig) {
            if shape.get(1) == Some(&0) {
                shape[1] = spec.num_classes;
            }
            let name = format!("{}.{}", l.name(), suffix);
            let t = if suffix == "bias" {
                Tensor::zeros(&shape)?
            } else {
                glorot_uniform(&mut rng, &shape, fan_in, fan_out)?
            };
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::config(format!("duplicate layer name {}", l.name())));
            }
        }
    }
    Ok(ModelParams { tensors })
}

// ── Forward ─────────────────────────────────────────────────────────────

pub struct ForwardOutput<'t> {
    /// `[H, W, K]` segmentation logits at input resolution.
    pub logits: Var<'t>,
    /// `[K]` class capsule activations (capsule models only).
    pub class_activations: Option<Var<'t>>,
    /// The capsule hierarchy with its cached couplings (capsule models only).
    pub stack: Option<CapsuleStack<'t>>,
}

fn lookup<'t>(params: &BTreeMap<String, Var<'t>>, name: &str, suffix: &str) -> Result<Var<'t>> {
    params
        .get(&format!("{name}.{suffix}"))
        .copied()
        .ok_or_else(|| Error::state(format!("parameter {name}.{suffix} missing")))
}

/// Run the network.  `params` are tape variables (see
/// [`ModelParams::leaf_vars`]); `rng` drives dropout in training phase.
pub fn forward<'t>(
    spec: &ModelSpec,
    params: &BTreeMap<String, Var<'t>>,
    image: Var<'t>,
    phase: Phase,
    rng: &mut SeededRng,
) -> Result<ForwardOutput<'t>> {
    if image.shape() != spec.input {
        return Err(Error::data(format!(
            "input {:?}, model expects {:?}",
            image.shape(),
            spec.input
        )));
    }
    plan(spec)?; // validate before touching parameters
    let mut cur = image;
    let mut saved: HashMap<&str, Var<'t>> = HashMap::new();
    let mut caps: Vec<TracedLayer<'t>> = Vec::new();
    let mut poses: Option<Var<'t>> = None;
    let mut stack: Option<CapsuleStack<'t>> = None;
    let mut activations: Option<Var<'t>> = None;

    for l in &spec.layers {
        let name = l.name();
        match l {
            LayerDesc::Conv { stride, padding, relu, .. } => {
                let k = lookup(params, name, "kernel")?;
                let b = lookup(params, name, "bias")?;
                cur = conv2d_var(cur, k, b, ConvGeom { stride: *stride, padding: *padding })?;
                if *relu {
                    cur = cur.relu();
                }
            }
            LayerDesc::ConvTranspose { stride, padding, relu, .. } => {
                let k = lookup(params, name, "kernel")?;
                let b = lookup(params, name, "bias")?;
                cur = conv2d_transpose_var(
                    cur,
                    k,
                    b,
                    ConvGeom { stride: *stride, padding: *padding },
                )?;
                if *relu {
                    cur = cur.relu();
                }
            }
            LayerDesc::MaxPool2 { .. } => {
                cur = maxpool2_var(cur)?;
            }
            LayerDesc::Dropout { rate, .. } => {
                cur = dropout(cur, *rate, phase, rng)?;
            }
            LayerDesc::Concat { with, .. } => {
                let skip = saved
                    .get(with.as_str())
                    .copied()
                    .ok_or_else(|| Error::state(format!("{name}: '{with}' not computed")))?;
                cur = concat(&[cur, skip], 2)?;
            }
            LayerDesc::PrimaryCaps { types, dim, stride, padding, .. } => {
                let k = lookup(params, name, "kernel")?;
                let b = lookup(params, name, "bias")?;
                let p = primary_capsules(
                    cur,
                    k,
                    b,
                    ConvGeom { stride: *stride, padding: *padding },
                    *types,
                    *dim,
                )?;
                caps.push(TracedLayer { poses: p, from_below: None });
                poses = Some(p);
            }
            LayerDesc::ConvCaps { field, .. } => {
                let child = poses.ok_or_else(|| Error::state(format!("{name}: no capsules yet")))?;
                let w = lookup(params, name, "w")?;
                let f = CapsuleField { kh: field.0, kw: field.1, stride: field.2 };
                let cs = child.shape();
                let graph = ParentGraph::new(cs[0], cs[1], cs[2], f)?;
                let out = conv_capsule_layer(child, w, f, spec.routing_iterations, spec.routing_policy)?;
                caps.push(TracedLayer {
                    poses: out.poses,
                    from_below: Some((out.coupling, graph)),
                });
                poses = Some(out.poses);
            }
            LayerDesc::ClassCaps { .. } => {
                let child = poses.ok_or_else(|| Error::state(format!("{name}: no capsules yet")))?;
                let w = lookup(params, name, "w")?;
                let out =
                    class_capsule_layer(child, w, spec.routing_iterations, spec.routing_policy)?;
                activations = Some(out.activations);
                stack = Some(CapsuleStack {
                    layers: std::mem::take(&mut caps),
                    class_coupling: out.coupling,
                    class_poses: out.poses,
                    class_activations: out.activations,
                });
            }
            LayerDesc::Traceback { .. } => {
                let s = stack
                    .as_ref()
                    .ok_or_else(|| Error::state(format!("{name}: class capsules not built")))?;
                let depth = spec
                    .traceback_depth
                    .ok_or_else(|| Error::config(format!("{name}: traceback depth unset")))?;
                cur = run_traceback(s, depth)?.map;
            }
        }
        // Capsule layers leave `cur` untouched; don't offer the stale map to
        // later skip connections under their names.
        if !matches!(
            l,
            LayerDesc::PrimaryCaps { .. } | LayerDesc::ConvCaps { .. } | LayerDesc::ClassCaps { .. }
        ) {
            saved.insert(name, cur);
        }
    }
    Ok(ForwardOutput { logits: cur, class_activations: activations, stack })
}

// ── Audit ───────────────────────────────────────────────────────────────

/// Documented places where a reference table's printed configuration cannot
/// reproduce its own printed output sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrectionKind {
    /// Pool rows print stride 1; halving output sizes require stride 2.
    PoolStride,
    /// One encoder convolution prints a 3x5 kernel; the printed 8x24 output
    /// requires 5x5.
    Conv2Kernel,
    /// The final classifier prints padding 1; mapping 26x58 onto 24x56
    /// requires padding 0.
    ClassConvPadding,
}

impl CorrectionKind {
    pub fn label(&self) -> &'static str {
        match self {
            CorrectionKind::PoolStride => "pool-stride",
            CorrectionKind::Conv2Kernel => "conv2-kernel",
            CorrectionKind::ClassConvPadding => "class-conv-padding",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RowStatus {
    /// Computed output and printed configuration both match.
    Match,
    /// Output matches, configuration deviates as documented.
    Corrected(CorrectionKind),
    /// No reference row to compare against.
    Unverified,
    Mismatch(String),
}

#[derive(Debug, Clone)]
pub struct AuditRow {
    pub layer: String,
    pub computed: Vec<usize>,
    pub reference: Option<Vec<usize>>,
    pub status: RowStatus,
}

#[derive(Debug, Clone)]
pub struct AuditReport {
    pub model: String,
    pub rows: Vec<AuditRow>,
}

impl AuditReport {
    pub fn ok(&self) -> bool {
        !self.rows.iter().any(|r| matches!(r.status, RowStatus::Mismatch(_)))
    }

    pub fn corrections(&self) -> Vec<(String, CorrectionKind)> {
        self.rows
            .iter()
            .filter_map(|r| match r.status {
                RowStatus::Corrected(k) => Some((r.layer.clone(), k)),
                _ => None,
            })
            .collect()
    }

    pub fn render(&self) -> String {
        let fmt_dims = |d: &[usize]| d.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("x");
        let mut s = format!("shape audit: {}\n", self.model);
        for r in &self.rows {
            let refcol = r.reference.as_ref().map(|d| fmt_dims(d)).unwrap_or_else(|| "-".into());
            let status = match &r.status {
                RowStatus::Match => "ok".to_string(),
                RowStatus::Corrected(k) => format!("corrected ({})", k.label()),
                RowStatus::Unverified => "ok (no reference)".to_string(),
                RowStatus::Mismatch(m) => format!("MISMATCH: {m}"),
            };
            s.push_str(&format!(
                "  {:<18} {:>14} {:>14}  {}\n",
                r.layer,
                fmt_dims(&r.computed),
                refcol,
                status
            ));
        }
        s
    }
}

/// One row of an embedded reference table: printed configuration (where the
/// row has one) and printed output size.
struct RefRow {
    name: &'static str,
    kernel: Option<(usize, usize)>,
    stride: Option<(usize, usize)>,
    padding: Option<(usize, usize)>,
    output: &'static [usize],
    correction: Option<CorrectionKind>,
}

const R: Option<CorrectionKind> = None;

fn ref_unet_3x7() -> Vec<RefRow> {
    let row = |name, k, s, p, output, correction| RefRow {
        name,
        kernel: k,
        stride: s,
        padding: p,
        output,
        correction,
    };
    vec![
        row("conv1", Some((3, 3)), Some((1, 1)), Some((1, 1)), &[24, 56, 32], R),
        row("pool1", Some((2, 2)), Some((1, 1)), Some((0, 0)), &[12, 28, 32], Some(CorrectionKind::PoolStride)),
        row("conv2", Some((3, 3)), Some((1, 1)), Some((1, 1)), &[12, 28, 64], R),
        row("pool2", Some((2, 2)), Some((1, 1)), Some((0, 0)), &[6, 14, 64], Some(CorrectionKind::PoolStride)),
        row("conv3", Some((3, 3)), Some((1, 1)), Some((1, 1)), &[6, 14, 128], R),
        row("pool3", Some((2, 2)), Some((1, 1)), Some((0, 0)), &[3, 7, 128], Some(CorrectionKind::PoolStride)),
        row("pool3_dropout", None, None, None, &[3, 7, 128], R),
        row("deconv1", Some((2, 2)), Some((2, 2)), Some((0, 0)), &[6, 14, 128], R),
        row("deconv1_conv", Some((3, 3)), Some((1, 1)), Some((1, 1)), &[6, 14, 128], R),
        row("concat1", None, None, None, &[6, 14, 192], R),
        row("concat1_dropout", None, None, None, &[6, 14, 192], R),
        row("concat1_conv", Some((3, 3)), Some((1, 1)), Some((1, 1)), &[6, 14, 128], R),
        row("deconv2", Some((2, 2)), Some((2, 2)), Some((0, 0)), &[12, 28, 128], R),
        row("deconv2_conv", Some((3, 3)), Some((1, 1)), Some((1, 1)), &[12, 28, 128], R),
        row("concat2", None, None, None, &[12, 28, 160], R),
        row("concat2_dropout", None, None, None, &[12, 28, 160], R),
        // The reference table prints a second row also named deconv2_conv.
        row("deconv2_conv", Some((3, 3)), Some((1, 1)), Some((1, 1)), &[12, 28, 128], R),
        row("deconv3", Some((2, 2)), Some((2, 2)), Some((0, 0)), &[24, 56, 128], R),
        row("deconv3_conv", Some((3, 3)), Some((1, 1)), Some((1, 1)), &[24, 56, 128], R),
        row("class_conv", Some((3, 3)), Some((1, 1)), Some((1, 1)), &[24, 56, 2], R),
    ]
}

fn ref_trcapsnet_hippo_d1() -> Vec<RefRow> {
    let row = |name, k, s, p, output, correction| RefRow {
        name,
        kernel: k,
        stride: s,
        padding: p,
        output,
        correction,
    };
    vec![
        row("conv1", Some((3, 3)), Some((1, 1)), Some((1, 1)), &[24, 56, 32], R),
        row("pool1", Some((2, 2)), Some((1, 1)), Some((0, 0)), &[12, 28, 32], Some(CorrectionKind::PoolStride)),
        row("conv2", Some((3, 5)), Some((1, 1)), Some((0, 0)), &[8, 24, 64], Some(CorrectionKind::Conv2Kernel)),
        row("conv2_dropout", None, None, None, &[8, 24, 64], R),
        row("primary_caps", Some((5, 5)), Some((1, 1)), Some((0, 0)), &[4, 20, 32, 8], R),
        row("class_caps", None, None, None, &[2, 16], R),
        row("traceback", None, None, None, &[4, 20, 2], R),
        row("conv3", Some((3, 3)), Some((1, 1)), Some((1, 1)), &[4, 20, 256], R),
        row("deconv1", Some((5, 5)), Some((1, 1)), Some((0, 0)), &[8, 24, 128], R),
        row("concat1", None, None, None, &[8, 24, 192], R),
        row("concat1_dropout", None, None, None, &[8, 24, 192], R),
        row("deconv1_conv", Some((3, 3)), Some((1, 1)), Some((1, 1)), &[8, 24, 128], R),
        row("deconv2", Some((5, 5)), Some((1, 1)), Some((0, 0)), &[12, 28, 128], R),
        row("concat2", None, None, None, &[12, 28, 160], R),
        row("deconv2_conv", Some((3, 3)), Some((1, 1)), Some((1, 1)), &[12, 28, 128], R),
        row("deconv3", Some((4, 4)), Some((2, 2)), Some((0, 0)), &[26, 58, 128], R),
        row("class_conv", Some((3, 3)), Some((1, 1)), Some((1, 1)), &[24, 56, 2], Some(CorrectionKind::ClassConvPadding)),
    ]
}

fn reference_rows(model: &str) -> Option<Vec<RefRow>> {
    match model {
        "trcapsnet-hippo-d1" => Some(ref_trcapsnet_hippo_d1()),
        "unet-hippo-3x7" => Some(ref_unet_3x7()),
        _ => None,
    }
}

/// Implemented (kernel, stride, padding) for config comparison, if the layer
/// kind has them.  Pooling reports its fixed 2x2/stride-2 geometry.
fn layer_geometry(l: &LayerDesc) -> Option<((usize, usize), (usize, usize), (usize, usize))> {
    match l {
        LayerDesc::Conv { kernel, stride, padding, .. }
        | LayerDesc::ConvTranspose { kernel, stride, padding, .. }
        | LayerDesc::PrimaryCaps { kernel, stride, padding, .. } => {
            Some((*kernel, *stride, *padding))
        }
        LayerDesc::MaxPool2 { .. } => Some(((2, 2), (2, 2), (0, 0))),
        _ => None,
    }
}

/// Walk the shape laws and compare against the model's embedded reference
/// table, if it has one.  Config deviations are tolerated only on rows
/// carrying a documented correction; every output size must match.
pub fn shape_audit(spec: &ModelSpec) -> AuditReport {
    let mut rows = Vec::new();
    let planned = match plan(spec) {
        Ok(p) => p,
        Err(e) => {
            return AuditReport {
                model: spec.name.clone(),
                rows: vec![AuditRow {
                    layer: "(walk)".into(),
                    computed: vec![],
                    reference: None,
                    status: RowStatus::Mismatch(e.to_string()),
                }],
            }
        }
    };
    let reference = reference_rows(&spec.name);
    match reference {
        None => {
            for (l, p) in spec.layers.iter().zip(&planned) {
                rows.push(AuditRow {
                    layer: l.name().to_string(),
                    computed: p.out.dims(),
                    reference: None,
                    status: RowStatus::Unverified,
                });
            }
        }
        Some(refrows) => {
            if refrows.len() != spec.layers.len() {
                rows.push(AuditRow {
                    layer: "(table)".into(),
                    computed: vec![spec.layers.len()],
                    reference: Some(vec![refrows.len()]),
                    status: RowStatus::Mismatch("row count differs from reference".into()),
                });
            }
            for ((l, p), r) in spec.layers.iter().zip(&planned).zip(&refrows) {
                let computed = p.out.dims();
                let mut status = if computed == r.output {
                    RowStatus::Match
                } else {
                    RowStatus::Mismatch(format!(
                        "computed {:?}, reference prints {:?}",
                        computed, r.output
                    ))
                };
                if matches!(status, RowStatus::Match) {
                    if let (Some((k, s, pd)), Some(rk)) = (layer_geometry(l), r.kernel) {
                        let differs = k != rk
                            || r.stride.is_some_and(|rs| s != rs)
                            || r.padding.is_some_and(|rp| pd != rp);
                        status = match (differs, r.correction) {
                            (false, _) => RowStatus::Match,
                            (true, Some(c)) => RowStatus::Corrected(c),
                            (true, None) => RowStatus::Mismatch(format!(
                                "configuration {k:?}/{s:?}/{pd:?} deviates from reference {:?}/{:?}/{:?} without documentation",
                                rk, r.stride, r.padding
                            )),
                        };
                    }
                }
                rows.push(AuditRow {
                    layer: format!("{} ({})", l.name(), r.name),
                    computed,
                    reference: Some(r.output.to_vec()),
                    status,
                });
            }
        }
    }
    AuditReport { model: spec.name.clone(), rows }
}

// ── Builders ────────────────────────────────────────────────────────────

fn conv(name: &str, out: usize, k: (usize, usize), s: (usize, usize), p: (usize, usize), relu: bool) -> LayerDesc {
    LayerDesc::Conv {
        name: name.into(),
        out_channels: out,
        kernel: k,
        stride: s,
        padding: p,
        relu,
    }
}

fn deconv(name: &str, out: usize, k: (usize, usize), s: (usize, usize), p: (usize, usize), relu: bool) -> LayerDesc {
    LayerDesc::ConvTranspose {
        name: name.into(),
        out_channels: out,
        kernel: k,
        stride: s,
        padding: p,
        relu,
    }
}

fn pool(name: &str) -> LayerDesc {
    LayerDesc::MaxPool2 { name: name.into() }
}

fn drop_half(name: &str) -> LayerDesc {
    LayerDesc::Dropout { name: name.into(), rate: 0.5 }
}

fn cat(name: &str, with: &str) -> LayerDesc {
    LayerDesc::Concat { name: name.into(), with: with.into() }
}

/// 24x56 capsule segmentation network; `depth` 1 routes primary capsules
/// straight to the class layer, `depth` 2 inserts one convolutional capsule
/// layer.
pub fn build_trcapsnet_hippo(depth: usize) -> Result<ModelSpec> {
    let (layers, name) = match depth {
        1 => (
            vec![
                conv("conv1", 32, (3, 3), (1, 1), (1, 1), true),
                pool("pool1"),
                conv("conv2", 64, (5, 5), (1, 1), (0, 0), true),
                drop_half("conv2_dropout"),
                LayerDesc::PrimaryCaps {
                    name: "primary_caps".into(),
                    types: 32,
                    dim: 8,
                    kernel: (5, 5),
                    stride: (1, 1),
                    padding: (0, 0),
                },
                LayerDesc::ClassCaps { name: "class_caps".into(), dim: 16 },
                LayerDesc::Traceback { name: "traceback".into() },
                conv("conv3", 256, (3, 3), (1, 1), (1, 1), true),
                deconv("deconv1", 128, (5, 5), (1, 1), (0, 0), true),
                cat("concat1", "conv2"),
                drop_half("concat1_dropout"),
                conv("deconv1_conv", 128, (3, 3), (1, 1), (1, 1), true),
                deconv("deconv2", 128, (5, 5), (1, 1), (0, 0), true),
                cat("concat2", "pool1"),
                conv("deconv2_conv", 128, (3, 3), (1, 1), (1, 1), true),
                deconv("deconv3", 128, (4, 4), (2, 2), (0, 0), true),
                conv("class_conv", 2, (3, 3), (1, 1), (0, 0), false),
            ],
            "trcapsnet-hippo-d1",
        ),
        2 => (
            vec![
                conv("conv1", 32, (3, 3), (1, 1), (1, 1), true),
                pool("pool1"),
                conv("conv2", 64, (5, 5), (1, 1), (0, 0), true),
                drop_half("conv2_dropout"),
                LayerDesc::PrimaryCaps {
                    name: "primary_caps".into(),
                    types: 64,
                    dim: 3,
                    kernel: (5, 5),
                    stride: (1, 1),
                    padding: (0, 0),
                },
                LayerDesc::ConvCaps {
                    name: "conv_caps".into(),
                    types: 24,
                    dim: 8,
                    field: (3, 3, 1),
                },
                LayerDesc::ClassCaps { name: "class_caps".into(), dim: 16 },
                LayerDesc::Traceback { name: "traceback".into() },
                conv("conv3", 256, (3, 3), (1, 1), (1, 1), true),
                deconv("deconv1", 128, (5, 5), (1, 1), (0, 0), true),
                cat("concat1", "conv2"),
                drop_half("concat1_dropout"),
                conv("deconv1_conv", 128, (3, 3), (1, 1), (1, 1), true),
                deconv("deconv2", 128, (5, 5), (1, 1), (0, 0), true),
                cat("concat2", "pool1"),
                conv("deconv2_conv", 128, (3, 3), (1, 1), (1, 1), true),
                deconv("deconv3", 128, (4, 4), (2, 2), (0, 0), true),
                conv("class_conv", 2, (3, 3), (1, 1), (0, 0), false),
            ],
            "trcapsnet-hippo-d2",
        ),
        _ => return Err(Error::config(format!("capsule depth {depth} not in {{1,2}}"))),
    };
    Ok(ModelSpec {
        name: name.into(),
        input: vec![24, 56, 1],
        num_classes: 2,
        layers,
        routing_iterations: 3,
        routing_policy: RoutingPolicy::Unrolled,
        traceback_depth: Some(depth),
    })
}

/// 28x28 capsule segmentation network with a `grid x grid` primary layer.
pub fn build_trcapsnet_mnist(grid: usize, num_classes: usize) -> Result<ModelSpec> {
    let (pk, ps) = match grid {
        7 => (8, 2),  // (20-8)/2+1
        9 => (4, 2),  // (20-4)/2+1
        11 => (10, 1), // 20-10+1
        _ => return Err(Error::config(format!("primary grid {grid} not in {{7,9,11}}"))),
    };
    if num_classes < 2 {
        return Err(Error::config("need at least 2 classes"));
    }
    let up1 = 2 * grid + 2; // k4 s2 transpose
    let k2 = 28 - up1 + 1; // final valid transpose restores 28
    let layers = vec![
        conv("conv1", 256, (9, 9), (1, 1), (0, 0), true),
        LayerDesc::PrimaryCaps {
            name: "primary_caps".into(),
            types: 24,
            dim: 8,
            kernel: (pk, pk),
            stride: (ps, ps),
            padding: (0, 0),
        },
        LayerDesc::ClassCaps { name: "class_caps".into(), dim: 16 },
        LayerDesc::Traceback { name: "traceback".into() },
        conv("conv3", 64, (3, 3), (1, 1), (1, 1), true),
        deconv("deconv1", 32, (4, 4), (2, 2), (0, 0), true),
        deconv("deconv2", 16, (k2, k2), (1, 1), (0, 0), true),
        conv("class_conv", num_classes, (3, 3), (1, 1), (1, 1), false),
    ];
    Ok(ModelSpec {
        name: format!("trcapsnet-mnist-{grid}"),
        input: vec![28, 28, 1],
        num_classes,
        layers,
        routing_iterations: 3,
        routing_policy: RoutingPolicy::Unrolled,
        traceback_depth: Some(1),
    })
}

/// Shrunken capsule network on 8x12 inputs for end-to-end gradient checks.
pub fn build_trcapsnet_mini() -> Result<ModelSpec> {
    let layers = vec![
        conv("conv1", 8, (3, 3), (1, 1), (0, 0), true),
        LayerDesc::PrimaryCaps {
            name: "primary_caps".into(),
            types: 4,
            dim: 4,
            kernel: (3, 3),
            stride: (2, 2),
            padding: (0, 0),
        },
        LayerDesc::ClassCaps { name: "class_caps".into(), dim: 8 },
        LayerDesc::Traceback { name: "traceback".into() },
        conv("conv3", 8, (3, 3), (1, 1), (1, 1), true),
        deconv("deconv1", 8, (6, 6), (2, 2), (0, 0), true),
        conv("class_conv", 2, (3, 3), (1, 1), (1, 1), false),
    ];
    Ok(ModelSpec {
        name: "trcapsnet-mini".into(),
        input: vec![8, 12, 1],
        num_classes: 2,
        layers,
        routing_iterations: 3,
        routing_policy: RoutingPolicy::Unrolled,
        traceback_depth: Some(1),
    })
}

/// U-Net baselines.  `variant` picks the coarsest feature map.
pub fn build_unet_baseline(variant: &str, num_classes: usize) -> Result<ModelSpec> {
    if num_classes < 2 {
        return Err(Error::config("need at least 2 classes"));
    }
    let (name, input, layers): (&str, Vec<usize>, Vec<LayerDesc>) = match variant {
        "hippo-3x7" => (
            "unet-hippo-3x7",
            vec![24, 56, 1],
            vec![
                conv("conv1", 32, (3, 3), (1, 1), (1, 1), true),
                pool("pool1"),
                conv("conv2", 64, (3, 3), (1, 1), (1, 1), true),
                pool("pool2"),
                conv("conv3", 128, (3, 3), (1, 1), (1, 1), true),
                pool("pool3"),
                drop_half("pool3_dropout"),
                deconv("deconv1", 128, (2, 2), (2, 2), (0, 0), true),
                conv("deconv1_conv", 128, (3, 3), (1, 1), (1, 1), true),
                cat("concat1", "pool2"),
                drop_half("concat1_dropout"),
                conv("concat1_conv", 128, (3, 3), (1, 1), (1, 1), true),
                deconv("deconv2", 128, (2, 2), (2, 2), (0, 0), true),
                conv("deconv2_conv", 128, (3, 3), (1, 1), (1, 1), true),
                cat("concat2", "pool1"),
                drop_half("concat2_dropout"),
                conv("concat2_conv", 128, (3, 3), (1, 1), (1, 1), true),
                deconv("deconv3", 128, (2, 2), (2, 2), (0, 0), true),
                conv("deconv3_conv", 128, (3, 3), (1, 1), (1, 1), true),
                conv("class_conv", 2, (3, 3), (1, 1), (1, 1), false),
            ],
        ),
        "hippo-4x12" => (
            "unet-hippo-4x12",
            vec![24, 56, 1],
            vec![
                conv("conv1", 32, (3, 3), (1, 1), (1, 1), true),
                pool("pool1"),
                conv("conv2", 64, (3, 3), (1, 1), (1, 1), true),
                pool("pool2"),
                conv("conv3", 128, (3, 3), (1, 1), (0, 0), true),
                drop_half("conv3_dropout"),
                deconv("deconv1", 128, (3, 3), (1, 1), (0, 0), true),
                cat("concat1", "pool2"),
                conv("concat1_conv", 128, (3, 3), (1, 1), (1, 1), true),
                deconv("deconv2", 64, (2, 2), (2, 2), (0, 0), true),
                cat("concat2", "pool1"),
                conv("concat2_conv", 64, (3, 3), (1, 1), (1, 1), true),
                deconv("deconv3", 32, (2, 2), (2, 2), (0, 0), true),
                conv("class_conv", 2, (3, 3), (1, 1), (1, 1), false),
            ],
        ),
        "hippo-4x20" => (
            "unet-hippo-4x20",
            vec![24, 56, 1],
            vec![
                conv("conv1", 32, (3, 3), (1, 1), (1, 1), true),
                pool("pool1"),
                conv("conv2", 64, (9, 9), (1, 1), (0, 0), true),
                drop_half("conv2_dropout"),
                deconv("deconv1", 128, (9, 9), (1, 1), (0, 0), true),
                cat("concat1", "pool1"),
                conv("concat1_conv", 128, (3, 3), (1, 1), (1, 1), true),
                deconv("deconv2", 64, (2, 2), (2, 2), (0, 0), true),
                conv("deconv2_conv", 64, (3, 3), (1, 1), (1, 1), true),
                conv("class_conv", 2, (3, 3), (1, 1), (1, 1), false),
            ],
        ),
        "mnist-6" => (
            "unet-mnist-6",
            vec![28, 28, 1],
            vec![
                conv("conv1", 32, (3, 3), (1, 1), (1, 1), true),
                conv("conv2", 64, (4, 4), (2, 2), (1, 1), true),
                conv("conv3", 128, (4, 4), (2, 2), (1, 1), true),
                conv("conv4", 128, (2, 2), (1, 1), (0, 0), true),
                conv("conv5", 128, (3, 3), (1, 1), (1, 1), true),
                deconv("deconv1", 128, (2, 2), (1, 1), (0, 0), true),
                deconv("deconv2", 64, (2, 2), (2, 2), (0, 0), true),
                cat("concat1", "conv2"),
                deconv("deconv3", 128, (3, 3), (1, 1), (1, 1), true),
                deconv("deconv4", 32, (2, 2), (2, 2), (0, 0), true),
                cat("concat2", "conv1"),
                deconv("deconv5", 32, (3, 3), (1, 1), (1, 1), true),
                conv("class_conv", num_classes, (3, 3), (1, 1), (1, 1), false),
            ],
        ),
        other => return Err(Error::config(format!("no baseline variant '{other}'"))),
    };
    let k = if variant == "mnist-6" { num_classes } else { 2 };
    Ok(ModelSpec {
        name: name.into(),
        input,
        num_classes: k,
        layers,
        routing_iterations: 3,
        routing_policy: RoutingPolicy::Unrolled,
        traceback_depth: None,
    })
}

/// Catalog lookup.  `num_classes` applies to the 28x28 models (default 3).
pub fn build_model(name: &str, num_classes: Option<usize>) -> Result<ModelSpec> {
    let k = num_classes.unwrap_or(3);
    match name {
        "trcapsnet-hippo-d1" => build_trcapsnet_hippo(1),
        "trcapsnet-hippo-d2" => build_trcapsnet_hippo(2),
        "trcapsnet-mnist-7" => build_trcapsnet_mnist(7, k),
        "trcapsnet-mnist-9" => build_trcapsnet_mnist(9, k),
        "trcapsnet-mnist-11" => build_trcapsnet_mnist(11, k),
        "trcapsnet-mini" => build_trcapsnet_mini(),
        "unet-hippo-3x7" => build_unet_baseline("hippo-3x7", 2),
        "unet-hippo-4x12" => build_unet_baseline("hippo-4x12", 2),
        "unet-hippo-4x20" => build_unet_baseline("hippo-4x20", 2),
        "unet-mnist-6" => build_unet_baseline("mnist-6", k),
        other => Err(Error::config(format!("unknown model '{other}'"))),
    }
}

/// Every model name [`build_model`] accepts.
pub const MODEL_NAMES: &[&str] = &[
    "trcapsnet-hippo-d1",
    "trcapsnet-hippo-d2",
    "trcapsnet-mnist-7",
    "trcapsnet-mnist-9",
    "trcapsnet-mnist-11",
    "trcapsnet-mini",
    "unet-hippo-3x7",
    "unet-hippo-4x12",
    "unet-hippo-4x20",
    "unet-mnist-6",
];
