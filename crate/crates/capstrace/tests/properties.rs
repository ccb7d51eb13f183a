//! Randomized law checks: structural invariants that must hold for every
//! input, not just the worked examples in the unit tests.

use capstrace::autodiff::Tape;
use capstrace::capsule::{
    class_capsule_layer, conv_capsule_layer, dynamic_routing_tensor, CapsuleField, RoutingPolicy,
};
use capstrace::loss::{margin_loss, MarginLossConfig};
use capstrace::metrics::{added_holes, dice_ratio, pixel_accuracy};
use capstrace::nn::{conv_extent, conv_transpose_extent};
use capstrace::rng::SeededRng;
use capstrace::tensor::Tensor;
use capstrace::traceback::{
    brute_force_traceback, run_traceback, CapsuleStack, ParentGraph, TracedLayer,
};
use proptest::prelude::*;

// ── Generators ──────────────────────────────────────────────────────────

/// Dimensions plus a value seed fully determine a routing problem; letting
/// proptest shrink the dimensions while a seeded stream fills in values
/// keeps the strategies simple and failures replayable.
#[derive(Debug, Clone)]
struct RoutingCase {
    sites: usize,
    children: usize,
    parents: usize,
    dim: usize,
    iterations: usize,
    seed: u64,
}

fn routing_case() -> impl Strategy<Value = RoutingCase> {
    (1..=3usize, 1..=6usize, 1..=4usize, 1..=4usize, 1..=3usize, any::<u64>()).prop_map(
        |(sites, children, parents, dim, iterations, seed)| RoutingCase {
            sites,
            children,
            parents,
            dim,
            iterations,
            seed,
        },
    )
}

fn votes(c: &RoutingCase) -> Tensor {
    let mut rng = SeededRng::new(c.seed);
    Tensor::uniform(&mut rng, &[c.sites, c.children, c.parents, c.dim], -2.0, 2.0).unwrap()
}

/// A full capsule hierarchy: primary grid, 0..=2 convolutional capsule
/// layers, and a class layer, all dimensioned small enough for the
/// exhaustive path-enumeration oracle.
#[derive(Debug, Clone)]
struct StackCase {
    h: usize,
    w: usize,
    types: usize,
    dim: usize,
    classes: usize,
    conv_layers: usize,
    iterations: usize,
    seed: u64,
}

fn stack_case() -> impl Strategy<Value = StackCase> {
    (
        2..=4usize,
        2..=4usize,
        1..=2usize,
        2..=3usize,
        2..=3usize,
        0..=2usize,
        1..=3usize,
        any::<u64>(),
    )
        .prop_map(|(h, w, types, dim, classes, conv_layers, iterations, seed)| StackCase {
            h,
            w,
            types,
            dim,
            classes,
            conv_layers,
            iterations,
            seed,
        })
}

struct BuiltStack<'t> {
    stack: CapsuleStack<'t>,
    depths: usize,
}

fn build_stack<'t>(tape: &'t Tape, c: &StackCase) -> BuiltStack<'t> {
    let mut rng = SeededRng::new(c.seed);
    let raw = Tensor::uniform(&mut rng, &[c.h, c.w, c.types, c.dim], -1.5, 1.5).unwrap();
    let mut poses = tape.constant(raw).squash_last().unwrap();
    let mut layers = vec![TracedLayer { poses, from_below: None }];
    for _ in 0..c.conv_layers {
        let s = poses.shape();
        let (h, w, t, d) = (s[0], s[1], s[2], s[3]);
        // Keep receptive fields valid for whatever the grid has shrunk to;
        // kernel 2 exercises multi-location parents whenever it fits.
        let k = if h >= 2 && w >= 2 { 1 + (rng.below(2)) } else { 1 };
        let field = CapsuleField { kh: k, kw: k, stride: 1 };
        let pt = 1 + rng.below(2);
        let pd = 2 + rng.below(2);
        let w_conv = Tensor::uniform(&mut rng, &[t, pt, pd, d], -1.0, 1.0).unwrap();
        let graph = ParentGraph::new(h, w, t, field).unwrap();
        let out = conv_capsule_layer(
            poses,
            tape.constant(w_conv),
            field,
            c.iterations,
            RoutingPolicy::Unrolled,
        )
        .unwrap();
        layers.push(TracedLayer { poses: out.poses, from_below: Some((out.coupling, graph)) });
        poses = out.poses;
    }
    let s = poses.shape();
    let w_class = Tensor::uniform(
        &mut rng,
        &[s[0] * s[1] * s[2], c.classes, 3, s[3]],
        -1.0,
        1.0,
    )
    .unwrap();
    let cls = class_capsule_layer(
        poses,
        tape.constant(w_class),
        c.iterations,
        RoutingPolicy::Unrolled,
    )
    .unwrap();
    let depths = layers.len();
    BuiltStack {
        stack: CapsuleStack {
            layers,
            class_coupling: cls.coupling,
            class_poses: cls.poses,
            class_activations: cls.activations,
        },
        depths,
    }
}

fn random_mask(seed: u64, h: usize, w: usize, k: usize) -> Tensor {
    let mut rng = SeededRng::new(seed);
    Tensor::from_vec(&[h, w], (0..h * w).map(|_| rng.below(k) as f64).collect()).unwrap()
}

// ── Routing laws ────────────────────────────────────────────────────────

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Couplings are assignment probabilities: for every child at every
    /// site they sum to 1 over the parents.
    #[test]
    fn coupling_rows_normalize(c in routing_case()) {
        let (_, coupling) = dynamic_routing_tensor(&votes(&c), c.iterations).unwrap();
        for row in coupling.data().chunks_exact(c.parents) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9, "row sums to {s}");
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    /// Reordering the children reorders the couplings and leaves the
    /// parent outputs untouched.
    #[test]
    fn routing_is_child_permutation_equivariant(c in routing_case(), key in any::<u64>()) {
        let u = votes(&c);
        let mut perm: Vec<usize> = (0..c.children).collect();
        SeededRng::new(key).shuffle(&mut perm);
        let ud = u.data();
        let mut permuted = vec![0.0; ud.len()];
        let (n, p, d) = (c.children, c.parents, c.dim);
        for q in 0..c.sites {
            for (dst, &src) in perm.iter().enumerate() {
                let from = (q * n + src) * p * d;
                let to = (q * n + dst) * p * d;
                permuted[to..to + p * d].copy_from_slice(&ud[from..from + p * d]);
            }
        }
        let up = Tensor::from_vec(&[c.sites, n, p, d], permuted).unwrap();
        let (v1, c1) = dynamic_routing_tensor(&u, c.iterations).unwrap();
        let (v2, c2) = dynamic_routing_tensor(&up, c.iterations).unwrap();
        prop_assert!(v1.max_abs_diff(&v2) <= 1e-9);
        let (c1d, c2d) = (c1.data(), c2.data());
        for q in 0..c.sites {
            for (dst, &src) in perm.iter().enumerate() {
                for j in 0..p {
                    let a = c1d[(q * n + src) * p + j];
                    let b = c2d[(q * n + dst) * p + j];
                    prop_assert!((a - b).abs() <= 1e-9);
                }
            }
        }
    }
}

// ── Traceback laws ──────────────────────────────────────────────────────

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Class conditionals are distributions at every depth, the dense map
    /// preserves total capsule activation position-by-position, and the
    /// layered recursion agrees with exhaustive path enumeration.
    #[test]
    fn traceback_laws_hold_at_every_depth(c in stack_case()) {
        let tape = Tape::new();
        let built = build_stack(&tape, &c);

        // Class routing couplings normalize over classes for every child.
        let cc = built.stack.class_coupling.value();
        for row in cc.data().chunks_exact(c.classes) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
        }

        for depth in 1..=built.depths {
            let out = run_traceback(&built.stack, depth).unwrap();
            let cond = out.conditionals.value();
            for row in cond.data().chunks_exact(c.classes) {
                let s: f64 = row.iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-9, "depth {depth}: row sums to {s}");
            }

            // Marginalization: summing the map over classes returns the
            // summed activation of the traced layer at each position.
            let layer = &built.stack.layers[out.layer];
            let poses = layer.poses.value();
            let (ls, map) = (poses.shape().to_vec(), out.map.value());
            let (h, w, t, d) = (ls[0], ls[1], ls[2], ls[3]);
            let pd = poses.data();
            let md = map.data();
            for y in 0..h {
                for x in 0..w {
                    let act: f64 = (0..t)
                        .map(|ti| {
                            let o = ((y * w + x) * t + ti) * d;
                            pd[o..o + d].iter().map(|v| v * v).sum::<f64>().sqrt()
                        })
                        .sum();
                    let mass: f64 = md[(y * w + x) * c.classes..][..c.classes].iter().sum();
                    prop_assert!(
                        (act - mass).abs() <= 1e-9,
                        "position ({y},{x}): activation {act}, map mass {mass}"
                    );
                }
            }

            let oracle = brute_force_traceback(&built.stack, depth).unwrap();
            prop_assert!(out.map.value().max_abs_diff(&oracle) <= 1e-12);
        }
    }
}

// ── Shape laws ──────────────────────────────────────────────────────────

proptest! {
    /// Valid convolution then valid transposed convolution with the same
    /// geometry restores the input extent up to the stride remainder.
    #[test]
    fn conv_then_transpose_restores_extent(n in 1..=64usize, k in 1..=9usize, s in 1..=4usize) {
        prop_assume!(k <= n);
        let down = conv_extent(n, k, s, 0).unwrap();
        prop_assert!(down >= 1);
        let up = conv_transpose_extent(down, k, s, 0).unwrap();
        prop_assert_eq!(up, n - (n - k) % s);
    }

    /// Padding enters the law symmetrically on both sides.
    #[test]
    fn conv_extent_matches_direct_formula(n in 1..=64usize, k in 1..=7usize, s in 1..=3usize, p in 0..=3usize) {
        prop_assume!(n + 2 * p >= k);
        let got = conv_extent(n, k, s, p).unwrap();
        prop_assert_eq!(got, (n + 2 * p - k) / s + 1);
    }
}

// ── Metric laws ─────────────────────────────────────────────────────────

proptest! {
    #[test]
    fn dice_is_symmetric_and_reflexive(sa in any::<u64>(), sb in any::<u64>(), k in 2..=3usize) {
        let a = random_mask(sa, 6, 6, k);
        let b = random_mask(sb, 6, 6, k);
        for c in 0..k {
            let ab = dice_ratio(&a, &b, c).unwrap();
            let ba = dice_ratio(&b, &a, c).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(dice_ratio(&a, &a, c).unwrap(), 1.0);
        }
        let pa = pixel_accuracy(&a, &b).unwrap();
        prop_assert_eq!(pa, pixel_accuracy(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&pa));
    }

    /// Every added hole is a nonempty error component, so the count is
    /// bounded by the number of wrongly labeled pixels; a perfect
    /// prediction has none.
    #[test]
    fn added_holes_bounded_by_errors(sa in any::<u64>(), sb in any::<u64>(), k in 2..=3usize) {
        let pred = random_mask(sa, 6, 6, k);
        let gt = random_mask(sb, 6, 6, k);
        let wrong = pred
            .data()
            .iter()
            .zip(gt.data())
            .filter(|(p, g)| p != g)
            .count();
        prop_assert!(added_holes(&pred, &gt).unwrap() <= wrong);
        prop_assert_eq!(added_holes(&gt, &gt).unwrap(), 0);
    }
}

// ── Loss laws ───────────────────────────────────────────────────────────

proptest! {
    /// The margin loss is nonnegative, and exactly zero once every present
    /// class clears the upper threshold and every absent one sits below
    /// the lower threshold.
    #[test]
    fn margin_loss_nonnegative_and_zero_when_satisfied(seed in any::<u64>(), k in 2..=4usize) {
        let mut rng = SeededRng::new(seed);
        let p_raw = Tensor::uniform(&mut rng, &[k], 0.0, 1.0).unwrap();
        let targets = Tensor::from_vec(
            &[k],
            (0..k).map(|i| if i == 0 || rng.below(2) == 1 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let cfg = MarginLossConfig::default();

        let tape = Tape::new();
        let p = tape.leaf(p_raw.clone());
        let loss = margin_loss(p, &targets, &cfg).unwrap().value().item().unwrap();
        prop_assert!(loss >= 0.0);

        let satisfied = Tensor::from_vec(
            &[k],
            p_raw
                .data()
                .iter()
                .zip(targets.data())
                .map(|(&pv, &t)| if t == 1.0 { pv.max(cfg.m_plus) } else { pv.min(cfg.m_minus) })
                .collect(),
        )
        .unwrap();
        let tape2 = Tape::new();
        let p2 = tape2.leaf(satisfied);
        let zero = margin_loss(p2, &targets, &cfg).unwrap().value().item().unwrap();
        prop_assert_eq!(zero, 0.0);
    }
}

// ── Seeded stream laws ──────────────────────────────────────────────────

proptest! {
    /// Identical seeds give identical streams; derivation depends only on
    /// (seed, salt), not on any other stream's consumption.
    #[test]
    fn seeded_streams_are_deterministic_and_independent(seed in any::<u64>(), salt in any::<u64>()) {
        let a: Vec<u64> = {
            let mut r = SeededRng::new(seed);
            (0..16).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = SeededRng::new(seed);
            (0..16).map(|_| r.next_u64()).collect()
        };
        prop_assert_eq!(&a, &b);

        let fresh: Vec<u64> = {
            let mut r = SeededRng::derived(seed, salt);
            (0..8).map(|_| r.next_u64()).collect()
        };
        let after_consumption: Vec<u64> = {
            let mut other = SeededRng::new(seed);
            for _ in 0..5 {
                other.next_u64();
            }
            let mut r = SeededRng::derived(seed, salt);
            (0..8).map(|_| r.next_u64()).collect()
        };
        prop_assert_eq!(&fresh, &after_consumption);

        let mut v1: Vec<u32> = (0..20).collect();
        let mut v2 = v1.clone();
        SeededRng::new(seed).shuffle(&mut v1);
        SeededRng::new(seed).shuffle(&mut v2);
        prop_assert_eq!(v1, v2);
    }
}
