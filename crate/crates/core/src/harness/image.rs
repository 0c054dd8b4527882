//! Binary PGM (P5) / PPM (P6) writers for `[channels, height, width]`
//! renders. One gray channel maps to PGM, three to PPM; values are treated
//! as [0, 1] intensities and quantized to 8 bits with clamping.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `<base>.pgm` or `<base>.ppm` depending on channel count and
/// returns the chosen path.
pub fn export_image<T: Scalar>(base: &Path, img: &Tensor<T>) -> Result<PathBuf> {
    let shape = img.shape();
    if shape.len() != 3 || !(shape[0] == 1 || shape[0] == 3) {
        return Err(Error::Invalid {
            what: "image export".into(),
            expected: "[1|3, height, width] tensor".into(),
            got: format!("{shape:?}"),
        });
    }
    let (ch, h, w) = (shape[0], shape[1], shape[2]);
    let (ext, magic) = if ch == 1 { ("pgm", "P5") } else { ("ppm", "P6") };
    let path = base.with_extension(ext);
    let mut out = BufWriter::new(File::create(&path)?);
    write!(out, "{magic}\n{w} {h}\n255\n")?;
    let data = img.data();
    // planar [c, h, w] storage, interleaved pixel order on disk
    let mut bytes = Vec::with_capacity(ch * h * w);
    for p in 0..h * w {
        for c in 0..ch {
            bytes.push(quantize(data[c * h * w + p].to_f64()));
        }
    }
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(path)
}
