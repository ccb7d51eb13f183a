//! Dataset construction and persistence.
//!
//! Segmentation items pair a grayscale image `[H, W, 1]` (intensities in
//! `[0, 1]`) with an integer label mask `[H, W]`.  Corpora are built either
//! from IDX digit files (noise added, ground truth thresholded from the
//! original intensities) or fully synthetically, then cached as CTEN records
//! next to a JSON manifest:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/train.cten  <dir>/val.cten  <dir>/test.cten
//! ```

use crate::cten;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use std::path::Path;

/// One image/mask pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationPair {
    /// `[H, W, 1]`, intensities in `[0, 1]`.
    pub image: Tensor,
    /// `[H, W]`, labels in `0..num_classes`.
    pub mask: Tensor,
    pub num_classes: usize,
}

impl SegmentationPair {
    pub fn new(image: Tensor, mask: Tensor, num_classes: usize) -> Result<Self> {
        let is = image.shape();
        if is.len() != 3 || is[2] != 1 {
            return Err(Error::data(format!("image must be [H,W,1], got {is:?}")));
        }
        if mask.shape() != [is[0], is[1]] {
            return Err(Error::data(format!(
                "mask {:?} does not match image {is:?}",
                mask.shape()
            )));
        }
        for &v in image.data() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::data(format!("intensity {v} outside [0,1]")));
            }
        }
        for &v in mask.data() {
            if v.fract() != 0.0 || v < 0.0 || v as usize >= num_classes {
                return Err(Error::data(format!("label {v} outside 0..{num_classes}")));
            }
        }
        Ok(Self { image, mask, num_classes })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

/// Generation parameters recorded in a dataset manifest.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GenParams {
    NoisyMnist {
        digits: Vec<u8>,
        noise_amplitude: f64,
        gt_threshold: f64,
    },
    SyntheticShapes {
        height: usize,
        width: usize,
    },
    /// Rendered digit glyphs pushed through the same noisy-MNIST pipeline.
    SyntheticDigits {
        digits: Vec<u8>,
        noise_amplitude: f64,
        gt_threshold: f64,
    },
}

/// Everything needed to regenerate or validate a cached dataset.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub name: String,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub seed: u64,
    pub train_items: usize,
    pub val_items: usize,
    pub test_items: usize,
    pub params: GenParams,
}

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

// ── IDX ─────────────────────────────────────────────────────────────────

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    let end = at + 4;
    if end > bytes.len() {
        return Err(Error::format(format!("{what}: truncated header")));
    }
    Ok(u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]))
}

/// Load an IDX image/label file pair: images scaled to `[0, 1]` by `/255`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<(Tensor, u8)>> {
    let ib = std::fs::read(images_path)?;
    let lb = std::fs::read(labels_path)?;
    let magic = be_u32(&ib, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!("images magic {magic:#010x}")));
    }
    let n = be_u32(&ib, 4, "images")? as usize;
    let rows = be_u32(&ib, 8, "images")? as usize;
    let cols = be_u32(&ib, 12, "images")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::format("images: zero extent"));
    }
    let need = 16 + n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::format("images: size overflow"))?;
    if ib.len() != need {
        return Err(Error::format(format!(
            "images: {} bytes, header implies {need}",
            ib.len()
        )));
    }
    let lmagic = be_u32(&lb, 0, "labels")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::format(format!("labels magic {lmagic:#010x}")));
    }
    let ln = be_u32(&lb, 4, "labels")? as usize;
    if lb.len() != 8 + ln {
        return Err(Error::format(format!(
            "labels: {} bytes, header implies {}",
            lb.len(),
            8 + ln
        )));
    }
    if ln != n {
        return Err(Error::format(format!("{n} images but {ln} labels")));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let base = 16 + i * rows * cols;
        let px: Vec<f64> = ib[base..base + rows * cols]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        out.push((Tensor::from_vec(&[rows, cols, 1], px)?, lb[8 + i]));
    }
    Ok(out)
}

/// Write images/labels in IDX format (inverse of [`load_idx`]).
pub fn write_idx(images_path: &Path, labels_path: &Path, items: &[(Tensor, u8)]) -> Result<()> {
    if items.is_empty() {
        return Err(Error::data("nothing to write"));
    }
    let s = items[0].0.shape().to_vec();
    if s.len() != 3 || s[2] != 1 {
        return Err(Error::data(format!("images must be [H,W,1], got {s:?}")));
    }
    let (rows, cols) = (s[0], s[1]);
    let mut ib = Vec::with_capacity(16 + items.len() * rows * cols);
    ib.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    ib.extend_from_slice(&(items.len() as u32).to_be_bytes());
    ib.extend_from_slice(&(rows as u32).to_be_bytes());
    ib.extend_from_slice(&(cols as u32).to_be_bytes());
    let mut lb = Vec::with_capacity(8 + items.len());
    lb.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lb.extend_from_slice(&(items.len() as u32).to_be_bytes());
    for (img, label) in items {
        if img.shape() != s.as_slice() {
            return Err(Error::data("inconsistent image shapes"));
        }
        for &v in img.data() {
            ib.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
        lb.push(*label);
    }
    std::fs::write(images_path, ib)?;
    std::fs::write(labels_path, lb)?;
    Ok(())
}

// ── Corpora ─────────────────────────────────────────────────────────────

/// Render simple 28x28 digit glyphs (supported: 0, 1, 8) as stand-in inputs
/// for the IDX pipeline.  Glyph pixels are bright (>= 0.6), background is 0.
pub fn render_digit_glyphs(
    count: usize,
    digits: &[u8],
    rng: &mut SeededRng,
) -> Result<Vec<(Tensor, u8)>> {
    if count == 0 {
        return Err(Error::data("count must be >= 1"));
    }
    if digits.is_empty() {
        return Err(Error::data("need at least one digit"));
    }
    for &d in digits {
        if !matches!(d, 0 | 1 | 8) {
            return Err(Error::data(format!("no glyph for digit {d}")));
        }
    }
    let (h, w) = (28usize, 28usize);
    let ring = |px: &mut Vec<f64>, cy: f64, cx: f64, ay: f64, ax: f64, rng: &mut SeededRng| {
        let hole = 0.45 + rng.uniform(0.0, 0.1);
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 - cy) / ay;
                let dx = (x as f64 - cx) / ax;
                let r2 = dy * dy + dx * dx;
                if r2 <= 1.0 && r2 >= hole * hole {
                    px[y * w + x] = 0.75 + rng.uniform(0.0, 0.2);
                }
            }
        }
    };
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let digit = digits[i % digits.len()];
        let mut px = vec![0.0f64; h * w];
        let jy = rng.uniform(-1.5, 1.5);
        let jx = rng.uniform(-1.5, 1.5);
        match digit {
            0 => {
                let ay = 8.0 + rng.uniform(0.0, 2.0);
                let ax = 5.0 + rng.uniform(0.0, 1.5);
                ring(&mut px, 14.0 + jy, 14.0 + jx, ay, ax, rng);
            }
            8 => {
                let a = 4.2 + rng.uniform(0.0, 0.8);
                ring(&mut px, 9.0 + jy, 14.0 + jx, a, a, rng);
                ring(&mut px, 18.5 + jy, 14.0 + jx, a + 0.5, a + 0.3, rng);
            }
            1 => {
                let x0 = 13.0 + jx;
                for y in 5..23 {
                    let xs = x0 + (y as f64 - 14.0) * rng.uniform(-0.05, 0.05);
                    for x in 0..w {
                        if (x as f64 - xs).abs() <= 1.2 {
                            px[y * w + x] = 0.75 + rng.uniform(0.0, 0.2);
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
        out.push((Tensor::from_vec(&[h, w, 1], px)?, digit));
    }
    Ok(out)
}

/// Class names for a dense digit mapping: background, then digits ascending.
pub fn digit_class_names(digits: &[u8]) -> Vec<String> {
    let mut sorted: Vec<u8> = digits.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut names = vec!["background".to_string()];
    names.extend(sorted.iter().map(|d| format!("digit-{d}")));
    names
}

/// Build segmentation pairs from digit images: additive uniform noise on the
/// image, ground truth by thresholding the ORIGINAL intensities.
///
/// Digits in `digit_filter` map densely onto classes `1..` in ascending
/// digit order; background is class 0.
pub fn make_noisy_mnist(
    items: &[(Tensor, u8)],
    digit_filter: &[u8],
    noise_amplitude: f64,
    gt_threshold: f64,
    rng: &mut SeededRng,
) -> Result<Vec<SegmentationPair>> {
    if !(0.0 <= noise_amplitude && noise_amplitude < gt_threshold && gt_threshold <= 1.0) {
        return Err(Error::config(format!(
            "need 0 <= noise ({noise_amplitude}) < threshold ({gt_threshold}) <= 1"
        )));
    }
    let mut classes: Vec<u8> = digit_filter.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Err(Error::data("empty digit filter"));
    }
    let class_of = |d: u8| classes.iter().position(|&c| c == d).map(|i| i + 1);
    let mut out = Vec::new();
    let num_classes = classes.len() + 1;
    for (img, digit) in items {
        let Some(class) = class_of(*digit) else {
            continue;
        };
        let s = img.shape();
        let (h, w) = (s[0], s[1]);
        let mut px = Vec::with_capacity(h * w);
        let mut mask = Vec::with_capacity(h * w);
        for &v in img.data() {
            let noisy = (v + rng.uniform(0.0, noise_amplitude)).clamp(0.0, 1.0);
            px.push(noisy);
            mask.push(if v > gt_threshold { class as f64 } else { 0.0 });
        }
        out.push(SegmentationPair::new(
            Tensor::from_vec(&[h, w, 1], px)?,
            Tensor::from_vec(&[h, w], mask)?,
            num_classes,
        )?);
    }
    if out.is_empty() {
        return Err(Error::data("digit filter matched no items"));
    }
    Ok(out)
}

/// Zero out `num_lines` image rows centered on `center_row`; the mask is
/// untouched (evaluation still targets the unoccluded ground truth).
pub fn occlude(
    pair: &SegmentationPair,
    num_lines: usize,
    center_row: usize,
    value: f64,
) -> Result<SegmentationPair> {
    if num_lines == 0 {
        return Ok(pair.clone());
    }
    if !(0.0..=1.0).contains(&value) {
        return Err(Error::data(format!("fill value {value} outside [0,1]")));
    }
    let h = pair.height();
    let w = pair.width();
    let first = center_row
        .checked_sub(num_lines / 2)
        .ok_or_else(|| Error::data("occlusion rows start above the image"))?;
    let last = first + num_lines; // exclusive
    if last > h {
        return Err(Error::data(format!(
            "occlusion rows {first}..{last} exceed {h} image rows"
        )));
    }
    let mut px = pair.image.data().to_vec();
    for y in first..last {
        for x in 0..w {
            px[y * w + x] = value;
        }
    }
    Ok(SegmentationPair {
        image: Tensor::from_vec(&[h, w, 1], px)?,
        mask: pair.mask.clone(),
        num_classes: pair.num_classes,
    })
}

/// Synthetic two-class corpus: noisy background plus one filled ellipse.
/// Items whose foreground fraction falls outside `[0.05, 0.40]` are
/// resampled, which also rejects degenerate ellipses.
pub fn make_synthetic_shapes(
    count: usize,
    h: usize,
    w: usize,
    rng: &mut SeededRng,
) -> Result<Vec<SegmentationPair>> {
    if count == 0 {
        return Err(Error::data("count must be >= 1"));
    }
    if h < 8 || w < 8 {
        return Err(Error::data(format!("grid {h}x{w} too small for shapes")));
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let cy = rng.uniform(h as f64 * 0.25, h as f64 * 0.75);
        let cx = rng.uniform(w as f64 * 0.2, w as f64 * 0.8);
        let ay = rng.uniform(h as f64 * 0.12, h as f64 * 0.38);
        let ax = rng.uniform(w as f64 * 0.08, w as f64 * 0.3);
        let fg = rng.uniform(0.62, 0.95);
        let mut px = Vec::with_capacity(h * w);
        let mut mask = Vec::with_capacity(h * w);
        let mut inside = 0usize;
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 - cy) / ay;
                let dx = (x as f64 - cx) / ax;
                if dy * dy + dx * dx <= 1.0 {
                    inside += 1;
                    px.push((fg + rng.uniform(-0.06, 0.06)).clamp(0.0, 1.0));
                    mask.push(1.0);
                } else {
                    px.push(rng.uniform(0.0, 0.2));
                    mask.push(0.0);
                }
            }
        }
        let frac = inside as f64 / (h * w) as f64;
        if !(0.05..=0.40).contains(&frac) {
            continue; // resample
        }
        out.push(SegmentationPair::new(
            Tensor::from_vec(&[h, w, 1], px)?,
            Tensor::from_vec(&[h, w], mask)?,
            2,
        )?);
    }
    Ok(out)
}

/// Seeded shuffle, then contiguous train/val/test split.
pub fn split(
    mut items: Vec<SegmentationPair>,
    fractions: (f64, f64, f64),
    rng: &mut SeededRng,
) -> Result<(Vec<SegmentationPair>, Vec<SegmentationPair>, Vec<SegmentationPair>)> {
    let (f0, f1, f2) = fractions;
    if f0 < 0.0 || f1 < 0.0 || f2 < 0.0 || (f0 + f1 + f2 - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "fractions {fractions:?} must be nonnegative and sum to 1"
        )));
    }
    rng.shuffle(&mut items);
    let n = items.len();
    let n0 = (f0 * n as f64).round() as usize;
    let n1 = ((f1 * n as f64).round() as usize).min(n - n0);
    let rest = items.split_off(n0);
    let (val, test) = {
        let mut v = rest;
        let t = v.split_off(n1);
        (v, t)
    };
    Ok((items, val, test))
}

// ── Persistence ─────────────────────────────────────────────────────────

/// Write pairs as alternating `image<i>` / `mask<i>` CTEN records.
pub fn cache(items: &[SegmentationPair], path: &Path) -> Result<()> {
    let mut records: Vec<(String, &Tensor)> = Vec::with_capacity(items.len() * 2);
    for (i, p) in items.iter().enumerate() {
        records.push((format!("image{i}"), &p.image));
        records.push((format!("mask{i}"), &p.mask));
    }
    let borrowed: Vec<(&str, &Tensor)> =
        records.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    cten::write_records(path, &borrowed)?;
    Ok(())
}

/// Read back what [`cache`] wrote: records alternate image, mask.
pub fn load_cache(path: &Path, num_classes: usize) -> Result<Vec<SegmentationPair>> {
    let records = cten::read_all_records(path)?;
    if records.len() % 2 != 0 {
        return Err(Error::format(format!(
            "{} records do not form image/mask pairs",
            records.len()
        )));
    }
    let mut out = Vec::with_capacity(records.len() / 2);
    let mut it = records.into_iter();
    while let (Some(img), Some(mask)) = (it.next(), it.next()) {
        out.push(SegmentationPair::new(img, mask, num_classes)?);
    }
    Ok(out)
}

/// Write `manifest.json` plus the three split caches into `dir`.
pub fn save_dataset(
    dir: &Path,
    manifest: &DatasetManifest,
    train: &[SegmentationPair],
    val: &[SegmentationPair],
    test: &[SegmentationPair],
) -> Result<()> {
    if manifest.train_items != train.len()
        || manifest.val_items != val.len()
        || manifest.test_items != test.len()
    {
        return Err(Error::data("manifest counts do not match the splits"));
    }
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::format(format!("manifest: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    cache(train, &dir.join("train.cten"))?;
    cache(val, &dir.join("val.cten"))?;
    cache(test, &dir.join("test.cten"))?;
    Ok(())
}

/// Load a dataset directory, validating manifest counts.
pub fn load_dataset(
    dir: &Path,
) -> Result<(DatasetManifest, Vec<SegmentationPair>, Vec<SegmentationPair>, Vec<SegmentationPair>)>
{
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(format!("manifest: {e}")))?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::format(format!(
            "manifest schema {} unsupported",
            manifest.schema_version
        )));
    }
    let train = load_cache(&dir.join("train.cten"), manifest.num_classes)?;
    let val = load_cache(&dir.join("val.cten"), manifest.num_classes)?;
    let test = load_cache(&dir.join("test.cten"), manifest.num_classes)?;
    if train.len() != manifest.train_items
        || val.len() != manifest.val_items
        || test.len() != manifest.test_items
    {
        return Err(Error::data(format!(
            "caches hold {}/{}/{} items, manifest says {}/{}/{}",
            train.len(),
            val.len(),
            test.len(),
            manifest.train_items,
            manifest.val_items,
            manifest.test_items
        )));
    }
    Ok((manifest, train, val, test))
}
