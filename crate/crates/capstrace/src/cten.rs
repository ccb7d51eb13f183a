//! CTEN: the on-disk tensor record.
//!
//! Layout per record, all integers little-endian:
//!   magic  `CTEN` (4 bytes)
//!   version u32   (currently 1)
//!   rank    u32
//!   extents rank x u64
//!   payload numel x f64 (raw IEEE-754 bits, row-major)
//!
//! Writing preserves f64 bit patterns exactly, so save/load round-trips are
//! bit-identical and byte-level file comparison is a valid equality test.
//! Several records may be concatenated in one file; callers track offsets.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CTEN";
pub const VERSION: u32 = 1;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format("truncated CTEN header"))?;
    if &magic != MAGIC {
        return Err(Error::format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported CTEN version {version}")));
    }
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let e = read_u64(r)?;
        if e == 0 {
            return Err(Error::format("zero extent"));
        }
        shape.push(e as usize);
    }
    let numel: usize = shape.iter().product();
    let mut buf = vec![0u8; numel * 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format("truncated CTEN payload"))?;
    let data: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&shape, data)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::format("truncated CTEN header"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::format("truncated CTEN header"))?;
    Ok(u64::from_le_bytes(b))
}

/// Writes `tensors` back to back into `path`, returning each record's byte
/// offset in order.
pub fn write_records(path: &Path, tensors: &[(&str, &Tensor)]) -> Result<Vec<(String, u64)>> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut offsets = Vec::with_capacity(tensors.len());
    let mut pos: u64 = 0;
    for (name, t) in tensors {
        offsets.push((name.to_string(), pos));
        write_tensor(&mut w, t)?;
        pos += record_len(t);
    }
    w.flush()?;
    Ok(offsets)
}

/// Size in bytes of one serialized record.
pub fn record_len(t: &Tensor) -> u64 {
    4 + 4 + 4 + 8 * t.rank() as u64 + 8 * t.numel() as u64
}

/// Reads the record starting at `offset`.
pub fn read_record_at(path: &Path, offset: u64) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    r.seek(SeekFrom::Start(offset))?;
    read_tensor(&mut r)
}

/// Reads consecutive records until EOF.
pub fn read_all_records(path: &Path) -> Result<Vec<Tensor>> {
    let mut r = BufReader::new(File::open(path)?);
    let len = r.seek(SeekFrom::End(0))?;
    r.seek(SeekFrom::Start(0))?;
    let mut out = Vec::new();
    let mut pos = 0u64;
    while pos < len {
        let t = read_tensor(&mut r)?;
        pos += record_len(&t);
        out.push(t);
    }
    Ok(out)
}
