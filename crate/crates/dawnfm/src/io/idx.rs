//! Reader for the IDX binary format used by the MNIST family.

use std::fs;
use std::path::Path;

use crate::error::{DawnError, Result};
use crate::tensor::Tensor;

const MAGIC_IMAGES: u32 = 0x0000_0803;
const MAGIC_LABELS: u32 = 0x0000_0801;

fn parse_err(path: &Path, offset: usize, msg: impl std::fmt::Display) -> DawnError {
    DawnError::Parse(format!("{} (byte {offset}): {msg}", path.display()))
}

/// Loads an IDX file: magic `0x00000803` yields an `(N, H, W)` tensor,
/// magic `0x00000801` an `(N,)` tensor. Byte values are scaled by 1/255.
pub fn load_idx(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let read_u32 = |offset: usize| -> Result<u32> {
        bytes
            .get(offset..offset + 4)
            .map(|c| u32::from_be_bytes(c.try_into().unwrap()))
            .ok_or_else(|| parse_err(path, offset, "truncated header"))
    };
    let magic = read_u32(0)?;
    let ndim = match magic {
        MAGIC_IMAGES => 3,
        MAGIC_LABELS => 1,
        other => {
            return Err(parse_err(
                path,
                0,
                format!("unexpected magic {other:#010x}"),
            ))
        }
    };
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        shape.push(read_u32(4 + 4 * i)? as usize);
    }
    let payload_start = 4 + 4 * ndim;
    let expected: usize = shape.iter().product();
    let actual = bytes.len() - payload_start.min(bytes.len());
    if actual != expected {
        return Err(parse_err(
            path,
            payload_start,
            format!("payload holds {actual} bytes, dimensions imply {expected}"),
        ));
    }
    let data: Vec<f64> = bytes[payload_start..]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Tensor::new(shape, data).map_err(|e| parse_err(path, payload_start, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_file(bytes: &[u8]) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.idx");
        fs::write(&path, bytes).unwrap();
        (dir, path)
    }

    #[test]
    fn hand_crafted_image_file() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC_IMAGES.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[0, 128, 255, 64]);
        let (_dir, path) = write_file(&bytes);
        let t = load_idx(&path).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert_eq!(
            t.data(),
            &[0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0]
        );
    }

    #[test]
    fn label_file() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC_LABELS.to_be_bytes());
        bytes.extend_from_slice(&3u32.to_be_bytes());
        bytes.extend_from_slice(&[0, 5, 9]);
        let (_dir, path) = write_file(&bytes);
        let t = load_idx(&path).unwrap();
        assert_eq!(t.shape(), &[3]);
        assert_eq!(t.data()[2], 9.0 / 255.0);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&0x0000_0899u32.to_be_bytes());
        bytes.extend_from_slice(&[0; 12]);
        let (_dir, path) = write_file(&bytes);
        let err = load_idx(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn short_payload_names_expected_length() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC_IMAGES.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[1, 2]); // two bytes short of 4
        let (_dir, path) = write_file(&bytes);
        let err = load_idx(&path).unwrap_err().to_string();
        assert!(err.contains('2') && err.contains('4'), "{err}");
    }
}
