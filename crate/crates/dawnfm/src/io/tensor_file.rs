//! Binary tensor files.
//!
//! Layout: magic `DWNT`, version byte `0x01`, dtype byte (`0x01` = 32-bit,
//! `0x02` = 64-bit), ndim byte, ndim little-endian u32 extents, then the
//! row-major payload in little-endian order. 64-bit round-trips are
//! bitwise exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{DawnError, Result};
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"DWNT";
const VERSION: u8 = 0x01;
const DTYPE_F32: u8 = 0x01;
const DTYPE_F64: u8 = 0x02;

fn parse_err(path: &Path, msg: impl std::fmt::Display) -> DawnError {
    DawnError::Parse(format!("{}: {msg}", path.display()))
}

fn write_header(w: &mut impl Write, shape: &[usize], dtype: u8) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&[VERSION, dtype, shape.len() as u8])?;
    for &e in shape {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    Ok(())
}

/// Writes `t` at 64-bit precision.
pub fn serialize_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    write_header(&mut w, t.shape(), DTYPE_F64)?;
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `t` at 32-bit precision (lossy; storage-size option).
pub fn serialize_tensor_f32(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    write_header(&mut w, t.shape(), DTYPE_F32)?;
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn deserialize_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 7];
    r.read_exact(&mut head)
        .map_err(|e| parse_err(path, format!("truncated header: {e}")))?;
    if head[0..4] != MAGIC {
        return Err(parse_err(path, format!("bad magic {:02x?}", &head[0..4])));
    }
    if head[4] != VERSION {
        return Err(parse_err(path, format!("unsupported version {:#04x}", head[4])));
    }
    let dtype = head[5];
    if dtype != DTYPE_F32 && dtype != DTYPE_F64 {
        return Err(parse_err(path, format!("unknown dtype {dtype:#04x}")));
    }
    let ndim = head[6] as usize;
    if ndim == 0 {
        return Err(parse_err(path, "zero-rank tensor"));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let mut e = [0u8; 4];
        r.read_exact(&mut e)
            .map_err(|_| parse_err(path, format!("truncated extent {i}")))?;
        shape.push(u32::from_le_bytes(e) as usize);
    }
    let n: usize = shape.iter().product();
    let elem = if dtype == DTYPE_F64 { 8 } else { 4 };
    let mut payload = vec![0u8; n * elem];
    r.read_exact(&mut payload).map_err(|_| {
        parse_err(
            path,
            format!("truncated payload: expected {} bytes", n * elem),
        )
    })?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(parse_err(path, "trailing bytes after payload"));
    }
    let data: Vec<f64> = if dtype == DTYPE_F64 {
        payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    } else {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()
    };
    Tensor::new(shape, data).map_err(|e| parse_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn round_trip_is_bitwise_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dwnt");
        let mut rng = SeededRng::new(71);
        let t = rng.sample_standard_normal(&[3, 4]).unwrap();
        serialize_tensor(&t, &path).unwrap();
        let back = deserialize_tensor(&path).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn header_bytes_match_the_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.dwnt");
        let t = Tensor::zeros(&[2, 3]);
        serialize_tensor(&t, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let expected_header = [
            0x44, 0x57, 0x4E, 0x54, // "DWNT"
            0x01, // version
            0x02, // f64
            0x02, // ndim
            0x02, 0x00, 0x00, 0x00, // extent 2
            0x03, 0x00, 0x00, 0x00, // extent 3
        ];
        assert_eq!(&bytes[..15], &expected_header);
        assert_eq!(bytes.len(), 15 + 48);
    }

    #[test]
    fn f32_variant_upcasts_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t32.dwnt");
        let t = Tensor::new(vec![2], vec![0.5, -1.25]).unwrap();
        serialize_tensor_f32(&t, &path).unwrap();
        let back = deserialize_tensor(&path).unwrap();
        assert_eq!(back, t); // both values are exact in f32
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes[5], 0x01);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.dwnt");
        let t = Tensor::zeros(&[2, 2]);
        serialize_tensor(&t, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut wrong_magic = good.clone();
        wrong_magic[0] = b'X';
        std::fs::write(&path, &wrong_magic).unwrap();
        assert!(deserialize_tensor(&path).is_err());

        let mut wrong_version = good.clone();
        wrong_version[4] = 0x02;
        std::fs::write(&path, &wrong_version).unwrap();
        assert!(deserialize_tensor(&path).is_err());

        let truncated = &good[..good.len() - 3];
        std::fs::write(&path, truncated).unwrap();
        let err = deserialize_tensor(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    proptest! {
        #[test]
        fn round_trip_random_shapes(seed in 0u64..500, d0 in 1usize..5, d1 in 1usize..5, d2 in 1usize..4) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.dwnt");
            let mut rng = SeededRng::new(seed);
            let t = rng.sample_standard_normal(&[d0, d1, d2]).unwrap();
            serialize_tensor(&t, &path).unwrap();
            prop_assert_eq!(deserialize_tensor(&path).unwrap(), t);
        }
    }
}
