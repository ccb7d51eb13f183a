//! Segmentation metrics: pixel accuracy, mean class accuracy, Dice ratio,
//! and the Added Holes count.
//!
//! All functions take `[H, W]` label masks with integer-valued entries.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn labels_of(mask: &Tensor, what: &str) -> Result<Vec<usize>> {
    if mask.rank() != 2 {
        return Err(Error::data(format!("{what} must be [H,W], got {:?}", mask.shape())));
    }
    mask.data()
        .iter()
        .map(|&v| {
            if v.fract() != 0.0 || v < 0.0 {
                Err(Error::data(format!("{what} label {v} is not a class index")))
            } else {
                Ok(v as usize)
            }
        })
        .collect()
}

fn paired(pred: &Tensor, gt: &Tensor) -> Result<(Vec<usize>, Vec<usize>, usize, usize)> {
    if pred.shape() != gt.shape() {
        return Err(Error::data(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let p = labels_of(pred, "prediction")?;
    let g = labels_of(gt, "ground truth")?;
    Ok((p, g, pred.shape()[0], pred.shape()[1]))
}

/// Fraction of pixels labeled correctly.
pub fn pixel_accuracy(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (p, g, _, _) = paired(pred, gt)?;
    let correct = p.iter().zip(&g).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / p.len() as f64)
}

/// Mean over classes of per-class recall; classes absent from the ground
/// truth are excluded from the mean.
pub fn mean_class_accuracy(pred: &Tensor, gt: &Tensor, num_classes: usize) -> Result<f64> {
    let (p, g, _, _) = paired(pred, gt)?;
    let mut hit = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    for (&pi, &gi) in p.iter().zip(&g) {
        if pi >= num_classes || gi >= num_classes {
            return Err(Error::data(format!("label {} >= {num_classes}", pi.max(gi))));
        }
        total[gi] += 1;
        if pi == gi {
            hit[gi] += 1;
        }
    }
    let mut acc = 0.0;
    let mut present = 0usize;
    for c in 0..num_classes {
        if total[c] > 0 {
            acc += hit[c] as f64 / total[c] as f64;
            present += 1;
        }
    }
    if present == 0 {
        return Err(Error::data("empty mask"));
    }
    Ok(acc / present as f64)
}

/// Dice overlap of the binary masks `pred == class` and `gt == class`:
/// `2|A∩B| / (|A|+|B|)`, defined as 1 when both masks are empty.
pub fn dice_ratio(pred: &Tensor, gt: &Tensor, class: usize) -> Result<f64> {
    let (p, g, _, _) = paired(pred, gt)?;
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&pi, &gi) in p.iter().zip(&g) {
        let pa = pi == class;
        let gb = gi == class;
        a += pa as usize;
        b += gb as usize;
        inter += (pa && gb) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

// ── Added holes ─────────────────────────────────────────────────────────

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]]; // path halving
        i = parent[i];
    }
    i
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        parent[ra.max(rb)] = ra.min(rb);
    }
}

/// For each counted hole, the ground-truth label of the segment it sits in.
///
/// A hole is a 4-connected component of wrongly labeled pixels that does not
/// touch the image border and whose surrounding correct pixels all carry one
/// ground-truth label.  (Any pixel 4-adjacent to such a component is
/// necessarily correct — a wrong neighbor would belong to the component.)
fn hole_labels(pred: &Tensor, gt: &Tensor) -> Result<Vec<usize>> {
    let (p, g, h, w) = paired(pred, gt)?;
    let err: Vec<bool> = p.iter().zip(&g).map(|(a, b)| a != b).collect();
    let mut parent: Vec<usize> = (0..h * w).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !err[i] {
                continue;
            }
            if x > 0 && err[i - 1] {
                union(&mut parent, i, i - 1);
            }
            if y > 0 && err[i - w] {
                union(&mut parent, i, i - w);
            }
        }
    }
    // Per component root: border contact and the set of surrounding labels.
    #[derive(Clone)]
    struct Info {
        border: bool,
        surround: Option<usize>,
        mixed: bool,
    }
    let mut info: std::collections::HashMap<usize, Info> = std::collections::HashMap::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !err[i] {
                continue;
            }
            let r = find(&mut parent, i);
            let e = info.entry(r).or_insert(Info { border: false, surround: None, mixed: false });
            if y == 0 || y == h - 1 || x == 0 || x == w - 1 {
                e.border = true;
            }
            let visit = |ni: usize, e: &mut Info| {
                if !err[ni] {
                    match e.surround {
                        None => e.surround = Some(g[ni]),
                        Some(l) if l != g[ni] => e.mixed = true,
                        _ => {}
                    }
                }
            };
            if y > 0 {
                visit(i - w, e);
            }
            if y + 1 < h {
                visit(i + w, e);
            }
            if x > 0 {
                visit(i - 1, e);
            }
            if x + 1 < w {
                visit(i + 1, e);
            }
        }
    }
    let mut out: Vec<usize> = info
        .values()
        .filter(|e| !e.border && !e.mixed)
        .filter_map(|e| e.surround)
        .collect();
    out.sort_unstable();
    Ok(out)
}

/// Number of added holes: wrongly labeled 4-connected areas strictly inside a
/// single correctly labeled ground-truth segment.
pub fn added_holes(pred: &Tensor, gt: &Tensor) -> Result<usize> {
    Ok(hole_labels(pred, gt)?.len())
}

/// Added holes bucketed by the label of the surrounding segment.
pub fn added_holes_per_class(pred: &Tensor, gt: &Tensor, num_classes: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; num_classes];
    for l in hole_labels(pred, gt)? {
        if l >= num_classes {
            return Err(Error::data(format!("label {l} >= {num_classes}")));
        }
        counts[l] += 1;
    }
    Ok(counts)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn mask(h: usize, w: usize, v: Vec<f64>) -> Tensor {
        Tensor::from_vec(&[h, w], v).unwrap()
    }

    fn random_mask(rng: &mut SeededRng, h: usize, w: usize, k: usize) -> Tensor {
        let v = (0..h * w).map(|_| rng.below(k) as f64).collect();
        mask(h, w, v)
    }

    #[test]
    fn perfect_prediction_maxes_every_metric() {
        let mut rng = SeededRng::new(41);
        let gt = random_mask(&mut rng, 6, 6, 3);
        assert_eq!(pixel_accuracy(&gt, &gt).unwrap(), 1.0);
        assert_eq!(mean_class_accuracy(&gt, &gt, 3).unwrap(), 1.0);
        for c in 0..3 {
            assert_eq!(dice_ratio(&gt, &gt, c).unwrap(), 1.0);
        }
        assert_eq!(added_holes(&gt, &gt).unwrap(), 0);
    }

    #[test]
    fn complement_prediction_zeroes_pa_and_dice() {
        let gt = mask(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let pred = mask(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(pixel_accuracy(&pred, &gt).unwrap(), 0.0);
        assert_eq!(dice_ratio(&pred, &gt, 0).unwrap(), 0.0);
        assert_eq!(dice_ratio(&pred, &gt, 1).unwrap(), 0.0);
    }

    #[test]
    fn dice_half_overlap() {
        // gt foreground: 4 px; pred foreground: 4 px; overlap: 2.
        let gt = mask(2, 4, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let pred = mask(2, 4, vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(dice_ratio(&pred, &gt, 1).unwrap(), 0.5);
    }

    #[test]
    fn dice_is_symmetric_and_empty_empty_is_one() {
        let mut rng = SeededRng::new(42);
        for _ in 0..20 {
            let a = random_mask(&mut rng, 8, 8, 3);
            let b = random_mask(&mut rng, 8, 8, 3);
            for c in 0..3 {
                assert_eq!(
                    dice_ratio(&a, &b, c).unwrap(),
                    dice_ratio(&b, &a, c).unwrap()
                );
            }
        }
        let z = mask(2, 2, vec![0.0; 4]);
        assert_eq!(dice_ratio(&z, &z, 1).unwrap(), 1.0);
    }

    #[test]
    fn pa_and_dice_match_naive_counting() {
        let mut rng = SeededRng::new(43);
        for _ in 0..20 {
            let a = random_mask(&mut rng, 8, 8, 3);
            let b = random_mask(&mut rng, 8, 8, 3);
            let mut same = 0;
            for i in 0..64 {
                if a.data()[i] == b.data()[i] {
                    same += 1;
                }
            }
            assert_eq!(pixel_accuracy(&a, &b).unwrap(), same as f64 / 64.0);
            for c in 0..3 {
                let (mut na, mut nb, mut ni) = (0usize, 0usize, 0usize);
                for i in 0..64 {
                    let ia = a.data()[i] == c as f64;
                    let ib = b.data()[i] == c as f64;
                    na += ia as usize;
                    nb += ib as usize;
                    ni += (ia && ib) as usize;
                }
                let want = if na + nb == 0 { 1.0 } else { 2.0 * ni as f64 / (na + nb) as f64 };
                assert_eq!(dice_ratio(&a, &b, c).unwrap(), want);
            }
        }
    }

    #[test]
    fn mca_excludes_absent_classes() {
        let gt = mask(2, 2, vec![0.0; 4]);
        let pred = mask(2, 2, vec![0.0, 1.0, 0.0, 1.0]);
        // Class 1 absent from gt: MCA is class-0 recall alone.
        assert_eq!(mean_class_accuracy(&pred, &gt, 2).unwrap(), 0.5);
    }

    #[test]
    fn block_strictly_inside_counts_as_one_hole() {
        let gt = mask(5, 5, vec![0.0; 25]);
        let mut p = vec![0.0; 25];
        for y in 1..3 {
            for x in 1..3 {
                p[y * 5 + x] = 1.0;
            }
        }
        let pred = mask(5, 5, p);
        assert_eq!(added_holes(&pred, &gt).unwrap(), 1);
        assert_eq!(added_holes_per_class(&pred, &gt, 2).unwrap(), vec![1, 0]);
    }

    #[test]
    fn border_contact_disqualifies() {
        let gt = mask(4, 4, vec![0.0; 16]);
        let mut p = vec![0.0; 16];
        for x in 0..4 {
            p[x] = 1.0; // top-row stripe
        }
        let pred = mask(4, 4, p);
        assert_eq!(added_holes(&pred, &gt).unwrap(), 0);
    }

    #[test]
    fn mixed_surrounding_labels_disqualify() {
        // gt: left half 0, right half 1; error column straddles the boundary.
        let mut g = vec![0.0; 25];
        for y in 0..5 {
            for x in 3..5 {
                g[y * 5 + x] = 1.0;
            }
        }
        let mut p = g.clone();
        p[1 * 5 + 2] = 2.0; // touches gt 0 (left) and gt 1 (right)
        p[2 * 5 + 2] = 2.0;
        let (gt, pred) = (mask(5, 5, g), mask(5, 5, p));
        assert_eq!(added_holes(&pred, &gt).unwrap(), 0);
    }

    #[test]
    fn relabeling_that_preserves_structure_keeps_the_count() {
        let gt = mask(5, 5, vec![0.0; 25]);
        let mut p = vec![0.0; 25];
        p[6] = 1.0;
        p[12] = 1.0; // diagonal: two separate 4-connected holes
        let pred = mask(5, 5, p.clone());
        assert_eq!(added_holes(&pred, &gt).unwrap(), 2);
        // Swap labels 0<->3 in both masks: same partition, same segments.
        let gt2 = mask(5, 5, vec![3.0; 25]);
        let p2: Vec<f64> = p.iter().map(|&v| if v == 0.0 { 3.0 } else { v }).collect();
        let pred2 = mask(5, 5, p2);
        assert_eq!(added_holes(&pred2, &gt2).unwrap(), 2);
    }

    /// Independent flood-fill implementation of the hole definition.
    fn holes_oracle(pred: &Tensor, gt: &Tensor) -> usize {
        let (h, w) = (pred.shape()[0], pred.shape()[1]);
        let at = |t: &Tensor, y: usize, x: usize| t.data()[y * w + x];
        let wrong = |y: usize, x: usize| at(pred, y, x) != at(gt, y, x);
        let mut seen = vec![false; h * w];
        let mut holes = 0;
        for sy in 0..h {
            for sx in 0..w {
                if !wrong(sy, sx) || seen[sy * w + sx] {
                    continue;
                }
                let mut stack = vec![(sy, sx)];
                seen[sy * w + sx] = true;
                let mut touches = false;
                let mut labels = std::collections::BTreeSet::new();
                while let Some((y, x)) = stack.pop() {
                    if y == 0 || y == h - 1 || x == 0 || x == w - 1 {
                        touches = true;
                    }
                    let mut step = |ny: usize, nx: usize, stack: &mut Vec<(usize, usize)>| {
                        if wrong(ny, nx) {
                            if !seen[ny * w + nx] {
                                seen[ny * w + nx] = true;
                                stack.push((ny, nx));
                            }
                        } else {
                            labels.insert(at(gt, ny, nx) as usize);
                        }
                    };
                    if y > 0 {
                        step(y - 1, x, &mut stack);
                    }
                    if y + 1 < h {
                        step(y + 1, x, &mut stack);
                    }
                    if x > 0 {
                        step(y, x - 1, &mut stack);
                    }
                    if x + 1 < w {
                        step(y, x + 1, &mut stack);
                    }
                }
                if !touches && labels.len() == 1 {
                    holes += 1;
                }
            }
        }
        holes
    }

    #[test]
    fn union_find_count_matches_flood_fill_oracle() {
        let mut rng = SeededRng::new(44);
        for round in 0..60 {
            let gt = random_mask(&mut rng, 8, 8, 2);
            // Mostly-correct predictions so interior holes actually occur.
            let mut p = gt.data().to_vec();
            for v in p.iter_mut() {
                if rng.next_f64() < 0.15 {
                    *v = (*v as usize ^ 1) as f64;
                }
            }
            let pred = mask(8, 8, p);
            assert_eq!(
                added_holes(&pred, &gt).unwrap(),
                holes_oracle(&pred, &gt),
                "round {round}"
            );
        }
    }

    #[test]
    fn per_class_attribution() {
        // Two gt regions (0 | 1), one hole in each.
        let mut g = vec![0.0; 30];
        for y in 0..5 {
            for x in 3..6 {
                g[y * 6 + x] = 1.0;
            }
        }
        let mut p = g.clone();
        p[1 * 6 + 1] = 2.0; // inside gt-0 region
        p[2 * 6 + 4] = 0.0; // inside gt-1 region
        let (gt, pred) = (mask(5, 6, g), mask(5, 6, p));
        assert_eq!(added_holes_per_class(&pred, &gt, 3).unwrap(), vec![1, 1, 0]);
        assert_eq!(added_holes(&pred, &gt).unwrap(), 2);
    }

    #[test]
    fn mean_std_population_convention() {
        let (m, s) = mean_std(&[2.0, 4.0]);
        assert_eq!(m, 3.0);
        assert_eq!(s, 1.0);
        let (m, s) = mean_std(&[5.0]);
        assert_eq!(m, 5.0);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn shape_and_label_validation() {
        let a = mask(2, 2, vec![0.0; 4]);
        let b = mask(2, 3, vec![0.0; 6]);
        assert!(pixel_accuracy(&a, &b).is_err());
        let frac = mask(2, 2, vec![0.5, 0.0, 0.0, 0.0]);
        assert!(pixel_accuracy(&frac, &a).is_err());
        let big = mask(2, 2, vec![5.0, 0.0, 0.0, 0.0]);
        assert!(mean_class_accuracy(&big, &a, 2).is_err());
    }
}
