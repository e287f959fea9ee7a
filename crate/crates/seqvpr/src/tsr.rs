//! TSR tensor container format.
//!
//! Layout: an 8-byte magic field holding `TSR0` padded with four NUL bytes,
//! a u32 little-endian rank, `rank` u64 little-endian dims, then the
//! row-major payload as little-endian IEEE-754 f32. Read/write round-trips
//! are bit-exact; since the payload is f32, writing an f64 tensor rounds
//! each element once.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: [u8; 8] = *b"TSR0\0\0\0\0";

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 + 8 * t.rank() + 4 * t.numel());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_tensor(&bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn parse_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 12 || bytes[..8] != MAGIC {
        return Err(Error::Io("not a TSR file (bad magic)".into()));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dims_end = 12 + 8 * rank;
    if bytes.len() < dims_end {
        return Err(Error::Io("truncated TSR header".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 12 + 8 * i;
        shape.push(u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize);
    }
    let numel: usize = shape.iter().product();
    if bytes.len() != dims_end + 4 * numel {
        return Err(Error::Io(format!(
            "TSR payload size mismatch: shape {shape:?} wants {} bytes, file has {}",
            4 * numel,
            bytes.len() - dims_end
        )));
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        let off = dims_end + 4 * i;
        data.push(f64::from(f32::from_le_bytes(
            bytes[off..off + 4].try_into().unwrap(),
        )));
    }
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact_for_f32_payloads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tsr");
        let t = Tensor::new(vec![2, 3], vec![1.5, -2.25, 0.0, 3.125, -0.5, 7.75]).unwrap();
        write_tensor(&p, &t).unwrap();
        let back = read_tensor(&p).unwrap();
        assert_eq!(back, t);
        // Writing the read-back tensor reproduces the same bytes.
        let p2 = dir.path().join("y.tsr");
        write_tensor(&p2, &back).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.tsr");
        fs::write(&p, b"NOPE0000rest").unwrap();
        assert!(read_tensor(&p).is_err());
        let t = Tensor::zeros(&[4]);
        write_tensor(&p, &t).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 2);
        fs::write(&p, &bytes).unwrap();
        assert!(read_tensor(&p).is_err());
    }
}
