//! Training losses: class-presence margin loss, pixel-wise cross-entropy,
//! and their weighted combination.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hinge thresholds for the margin loss.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MarginLossConfig {
    /// Activation a present class should reach.
    pub m_plus: f64,
    /// Activation an absent class should stay under.
    pub m_minus: f64,
    /// Down-weight on the absent-class term.
    pub lambda_margin: f64,
}

impl Default for MarginLossConfig {
    fn default() -> Self {
        Self { m_plus: 0.9, m_minus: 0.1, lambda_margin: 0.5 }
    }
}

impl MarginLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.m_minus && self.m_minus < self.m_plus && self.m_plus <= 1.0) {
            return Err(Error::config(format!(
                "need 0 <= m_minus < m_plus <= 1, got {} and {}",
                self.m_minus, self.m_plus
            )));
        }
        if self.lambda_margin < 0.0 {
            return Err(Error::config("lambda_margin must be >= 0"));
        }
        Ok(())
    }
}

/// Relative weights of the two loss terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::config("loss weights must be >= 0"));
        }
        if self.lambda1 == 0.0 && self.lambda2 == 0.0 {
            return Err(Error::config("loss weights must not both be 0"));
        }
        Ok(())
    }
}

/// Binary class-presence vector derived from a ground-truth mask.
pub fn target_presence(mask: &Tensor, num_classes: usize) -> Result<Tensor> {
    let mut t = vec![0.0f64; num_classes];
    for &v in mask.data() {
        let c = v as usize;
        if v.fract() != 0.0 || v < 0.0 || c >= num_classes {
            return Err(Error::data(format!("mask label {v} outside 0..{num_classes}")));
        }
        t[c] = 1.0;
    }
    Tensor::from_vec(&[num_classes], t)
}

/// Margin loss over class activations `p` (each in `[0, 1]`):
/// present classes are pushed above `m_plus`, absent ones below `m_minus`,
/// each violation squared and the absent term scaled by `lambda_margin`.
pub fn margin_loss<'t>(p: Var<'t>, targets: &Tensor, cfg: &MarginLossConfig) -> Result<Var<'t>> {
    cfg.validate()?;
    let ps = p.shape();
    if ps.len() != 1 || targets.shape() != ps.as_slice() {
        return Err(Error::shape(format!(
            "activations {ps:?} vs presence {:?}",
            targets.shape()
        )));
    }
    for &v in p.value().data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::domain(format!("activation {v} outside [0,1]")));
        }
    }
    for &t in targets.data() {
        if t != 0.0 && t != 1.0 {
            return Err(Error::domain(format!("presence flag {t} not binary")));
        }
    }
    let tape = p.tape();
    let t = tape.constant(targets.clone());
    let one_minus_t = t.neg().add_scalar(1.0);
    let present = p.neg().add_scalar(cfg.m_plus).relu().square()?;
    let absent = p.add_scalar(-cfg.m_minus).relu().square()?;
    Ok(t
        .mul(present)?
        .add(one_minus_t.mul(absent)?.mul_scalar(cfg.lambda_margin))?
        .sum_all())
}

/// Mean over pixels of `-ln softmax(logits)[true class]`, stabilized by
/// max subtraction.  `logits`: `[H, W, K]`, `mask`: `[H, W]` class indices.
pub fn pixel_cross_entropy<'t>(logits: Var<'t>, mask: &Tensor) -> Result<Var<'t>> {
    let ls = logits.shape();
    if ls.len() != 3 {
        return Err(Error::shape(format!("logits must be [H,W,K], got {ls:?}")));
    }
    let (h, w, k) = (ls[0], ls[1], ls[2]);
    if mask.shape() != [h, w] {
        return Err(Error::shape(format!(
            "mask {:?} vs logits {h}x{w}",
            mask.shape()
        )));
    }
    let n = h * w;
    let mut labels = Vec::with_capacity(n);
    for &v in mask.data() {
        let c = v as usize;
        if v.fract() != 0.0 || v < 0.0 || c >= k {
            return Err(Error::data(format!("mask label {v} outside 0..{k}")));
        }
        labels.push(c);
    }
    let lv = logits.value();
    let ld = lv.data();
    // Cache the per-pixel softmax for the backward pass.
    let mut probs = vec![0.0f64; n * k];
    let mut total = 0.0f64;
    for pix in 0..n {
        let row = &ld[pix * k..(pix + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (j, &x) in row.iter().enumerate() {
            let e = (x - m).exp();
            probs[pix * k + j] = e;
            z += e;
        }
        for j in 0..k {
            probs[pix * k + j] /= z;
        }
        let lse = m + z.ln();
        total += lse - row[labels[pix]];
    }
    let value = Tensor::scalar(total / n as f64);
    if !value.item()?.is_finite() {
        return Err(Error::eval("cross-entropy overflowed"));
    }
    let shape = ls.clone();
    Ok(logits.tape().push_op(
        value,
        &[logits],
        Box::new(move |g| {
            let scale = g.data()[0] / n as f64;
            let mut dz = probs.clone();
            for (pix, &lab) in labels.iter().enumerate() {
                dz[pix * k + lab] -= 1.0;
            }
            for v in &mut dz {
                *v *= scale;
            }
            vec![Tensor::from_vec(&shape, dz).expect("cross-entropy grad")]
        }),
    ))
}

/// `lambda1 * margin + lambda2 * ce`.
pub fn total_loss<'t>(margin: Var<'t>, ce: Var<'t>, w: &LossWeights) -> Result<Var<'t>> {
    w.validate()?;
    margin.mul_scalar(w.lambda1).add(ce.mul_scalar(w.lambda2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tape, GRAD_CHECK_H};
    use crate::rng::SeededRng;

    fn margin_value(p: &[f64], t: &[f64], cfg: &MarginLossConfig) -> f64 {
        let tape = Tape::new();
        let pv = tape.leaf(Tensor::from_vec(&[p.len()], p.to_vec()).unwrap());
        let tv = Tensor::from_vec(&[t.len()], t.to_vec()).unwrap();
        margin_loss(pv, &tv, cfg).unwrap().value().item().unwrap()
    }

    #[test]
    fn margin_hinge_boundaries_are_exactly_zero() {
        let cfg = MarginLossConfig::default();
        assert_eq!(margin_value(&[0.9], &[1.0], &cfg), 0.0);
        assert_eq!(margin_value(&[0.1], &[0.0], &cfg), 0.0);
        assert_eq!(margin_value(&[0.95, 0.05], &[1.0, 0.0], &cfg), 0.0);
    }

    #[test]
    fn margin_midpoint_case() {
        let cfg = MarginLossConfig::default();
        let v = margin_value(&[0.5, 0.5], &[1.0, 0.0], &cfg);
        assert!((v - 0.24).abs() < 1e-15, "got {v}");
    }

    #[test]
    fn margin_positive_once_either_hinge_is_violated() {
        let cfg = MarginLossConfig::default();
        assert!(margin_value(&[0.89], &[1.0], &cfg) > 0.0);
        assert!(margin_value(&[0.11], &[0.0], &cfg) > 0.0);
    }

    #[test]
    fn margin_rejects_out_of_range_inputs() {
        let cfg = MarginLossConfig::default();
        let tape = Tape::new();
        let p = tape.leaf(Tensor::from_vec(&[1], vec![1.5]).unwrap());
        let t = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        assert!(margin_loss(p, &t, &cfg).is_err());
        let p = tape.leaf(Tensor::from_vec(&[1], vec![0.5]).unwrap());
        let t = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        assert!(margin_loss(p, &t, &cfg).is_err());
    }

    #[test]
    fn margin_grad_check() {
        let cfg = MarginLossConfig::default();
        let p = Tensor::from_vec(&[4], vec![0.3, 0.7, 0.2, 0.55]).unwrap();
        let t = Tensor::from_vec(&[4], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let err = grad_check(
            |_tape, vs| margin_loss(vs[0], &t, &cfg),
            &[p],
            GRAD_CHECK_H,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn target_presence_from_mask() {
        let mask = Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 2.0, 0.0]).unwrap();
        let t = target_presence(&mask, 3).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 1.0]);
        assert!(target_presence(&mask, 2).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[2, 3, 2]).unwrap());
        let mask = Tensor::zeros(&[2, 3]).unwrap();
        let ce = pixel_cross_entropy(logits, &mask).unwrap().value().item().unwrap();
        assert!((ce - 2.0f64.ln()).abs() < 1e-12, "got {ce}");

        let logits = tape.leaf(Tensor::zeros(&[1, 1, 2]).unwrap());
        let mask = Tensor::zeros(&[1, 1]).unwrap();
        let ce = pixel_cross_entropy(logits, &mask).unwrap().value().item().unwrap();
        assert!((ce - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_vanishes_when_true_class_dominates() {
        let tape = Tape::new();
        let mut z = vec![0.0f64; 4 * 2];
        for pix in 0..4 {
            z[pix * 2] = 30.0; // true class everywhere is 0
        }
        let logits = tape.leaf(Tensor::from_vec(&[2, 2, 2], z).unwrap());
        let mask = Tensor::zeros(&[2, 2]).unwrap();
        let ce = pixel_cross_entropy(logits, &mask).unwrap().value().item().unwrap();
        assert!(ce < 1e-10, "got {ce}");
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[1, 1, 2]).unwrap());
        let mask = Tensor::from_vec(&[1, 1], vec![2.0]).unwrap();
        assert!(pixel_cross_entropy(logits, &mask).is_err());
        let mask = Tensor::from_vec(&[1, 1], vec![0.5]).unwrap();
        assert!(pixel_cross_entropy(logits, &mask).is_err());
    }

    #[test]
    fn cross_entropy_grad_check() {
        let mut rng = SeededRng::new(31);
        let logits = Tensor::uniform(&mut rng, &[3, 2, 4], -2.0, 2.0).unwrap();
        let mask = Tensor::from_vec(&[3, 2], vec![0.0, 3.0, 1.0, 2.0, 2.0, 0.0]).unwrap();
        let err = grad_check(
            |_tape, vs| pixel_cross_entropy(vs[0], &mask),
            &[logits],
            GRAD_CHECK_H,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn total_loss_weighting() {
        let tape = Tape::new();
        let m = tape.leaf(Tensor::scalar(0.4));
        let c = tape.leaf(Tensor::scalar(0.7));
        let v = |l1, l2| {
            total_loss(m, c, &LossWeights { lambda1: l1, lambda2: l2 })
                .unwrap()
                .value()
                .item()
                .unwrap()
        };
        assert!((v(1.0, 1.0) - 1.1).abs() < 1e-15);
        assert!((v(15.0, 1.0) - 6.7).abs() < 1e-12);
        assert!((v(0.0, 1.0) - 0.7).abs() < 1e-15);
        assert!(total_loss(m, c, &LossWeights { lambda1: 0.0, lambda2: 0.0 }).is_err());
        assert!(total_loss(m, c, &LossWeights { lambda1: -1.0, lambda2: 1.0 }).is_err());
    }

    #[test]
    fn config_invariants() {
        assert!(MarginLossConfig::default().validate().is_ok());
        assert!(MarginLossConfig { m_plus: 0.1, m_minus: 0.9, lambda_margin: 0.5 }
            .validate()
            .is_err());
        assert!(MarginLossConfig { m_plus: 1.2, m_minus: 0.1, lambda_margin: 0.5 }
            .validate()
            .is_err());
    }
}
