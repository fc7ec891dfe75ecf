//! Raster output for figure panels: binary PGM (grayscale) and PPM
//! (color), maxval 255, values clamped to [0, 1] and rounded half-up.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

fn quantize(v: f64) -> u8 {
    // f64::round is half-away-from-zero; inputs are clamped nonnegative,
    // so this is round-half-up.
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 2-D tensor as PGM `P5` or a `(3, H, W)` tensor as PPM `P6`.
pub fn write_image(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    match t.shape() {
        [h, wd] => {
            write!(w, "P5\n{wd} {h}\n255\n")?;
            let bytes: Vec<u8> = t.data().iter().map(|&v| quantize(v)).collect();
            w.write_all(&bytes)?;
        }
        [3, h, wd] => {
            write!(w, "P6\n{wd} {h}\n255\n")?;
            let plane = h * wd;
            let mut bytes = Vec::with_capacity(3 * plane);
            for i in 0..plane {
                for c in 0..3 {
                    bytes.push(quantize(t.data()[c * plane + i]));
                }
            }
            w.write_all(&bytes)?;
        }
        other => {
            return Err(shape_err(format!(
                "image output needs (H,W) or (3,H,W), got {other:?}"
            )))
        }
    }
    w.flush()?;
    Ok(())
}
