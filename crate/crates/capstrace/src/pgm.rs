//! Binary PGM (P5) export for probability maps and label images.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

/// Write 8-bit grayscale pixels (row-major) as a binary P5 file.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::shape(format!(
            "{}x{} image needs {} pixels, got {}",
            width,
            height,
            width * height,
            pixels.len()
        )));
    }
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    f.flush()?;
    Ok(())
}

/// Map class indices `[H, W]` onto evenly spread gray levels.
pub fn write_label_pgm(path: &Path, labels: &Tensor, num_classes: usize) -> Result<()> {
    if labels.rank() != 2 {
        return Err(Error::shape(format!("labels must be [H,W], got {:?}", labels.shape())));
    }
    if num_classes == 0 {
        return Err(Error::domain("need at least one class"));
    }
    let (h, w) = (labels.shape()[0], labels.shape()[1]);
    let step = if num_classes > 1 { 255.0 / (num_classes - 1) as f64 } else { 0.0 };
    let mut px = Vec::with_capacity(h * w);
    for &v in labels.data() {
        let c = v as usize;
        if v.fract() != 0.0 || c >= num_classes {
            return Err(Error::domain(format!("label {v} outside 0..{num_classes}")));
        }
        px.push((c as f64 * step).round() as u8);
    }
    write_pgm(path, w, h, &px)
}

/// Export a class probability map `[H, W, K]` as one grayscale PGM per class
/// (each independently scaled to full range) plus an argmax label image.
/// Returns the written paths, class images first.
pub fn export_probability_maps(dir: &Path, stem: &str, map: &Tensor) -> Result<Vec<PathBuf>> {
    if map.rank() != 3 {
        return Err(Error::shape(format!("map must be [H,W,K], got {:?}", map.shape())));
    }
    let (h, w, k) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let mut paths = Vec::with_capacity(k + 1);
    for kk in 0..k {
        let mut vals = Vec::with_capacity(h * w);
        let mut max = 0.0f64;
        for pos in 0..h * w {
            let v = map.data()[pos * k + kk];
            if !(v >= 0.0) {
                return Err(Error::domain(format!("negative probability {v}")));
            }
            max = max.max(v);
            vals.push(v);
        }
        let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
        let px: Vec<u8> = vals.iter().map(|v| (v * scale).round() as u8).collect();
        let path = dir.join(format!("{stem}-class{kk}.pgm"));
        write_pgm(&path, w, h, &px)?;
        paths.push(path);
    }
    let labels = map.reduce_argmax(2)?;
    let path = dir.join(format!("{stem}-labels.pgm"));
    write_label_pgm(&path, &labels, k)?;
    paths.push(path);
    Ok(paths)
}
