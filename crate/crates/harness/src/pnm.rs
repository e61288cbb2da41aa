//! Binary portable pixmap (P6) and graymap (P5) files, 8 bits per sample.

use std::fs;
use std::path::Path;

use ctxtrack_core::Tensor;

use crate::error::{HarnessError, Result};

/// Maps `[0, 1]` to `0..=255`, rounding to nearest.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height, "pgm pixel count");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(HarnessError::io(path))
}

/// Writes an `[H, W, 3]` image with values in `[0, 1]`.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let &[h, w, 3] = image.shape() else {
        return Err(HarnessError::Numeric(format!("ppm needs [H, W, 3], got {:?}", image.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| to_byte(v)));
    fs::write(path, out).map_err(HarnessError::io(path))
}

/// Decoded file: magic, width, height and raw samples.
pub struct Pnm {
    pub magic: [u8; 2],
    pub width: usize,
    pub height: usize,
    pub samples: Vec<u8>,
}

pub fn read_pnm(path: &Path) -> Result<Pnm> {
    let bytes = fs::read(path).map_err(HarnessError::io(path))?;
    let bad = |reason: &str| HarnessError::Format { path: path.to_path_buf(), reason: reason.to_string() };
    if bytes.len() < 2 || !(bytes[..2] == *b"P5" || bytes[..2] == *b"P6") {
        return Err(bad("not a binary P5/P6 file"));
    }
    let channels = if bytes[1] == b'6' { 3 } else { 1 };
    // Header: magic, width, height, maxval, each separated by whitespace.
    let mut fields = Vec::new();
    let mut pos = 2;
    while fields.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?;
        fields.push(text.parse::<usize>().map_err(|_| bad("header field"))?);
    }
    pos += 1;
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(bad("only 8-bit files are supported"));
    }
    let samples = bytes.get(pos..).ok_or_else(|| bad("truncated"))?.to_vec();
    if samples.len() != width * height * channels {
        return Err(bad("pixel data length does not match header"));
    }
    Ok(Pnm { magic: [bytes[0], bytes[1]], width, height, samples })
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let p = read_pnm(path)?;
    if p.magic != *b"P6" {
        return Err(HarnessError::Format { path: path.to_path_buf(), reason: "expected a P6 pixmap".into() });
    }
    let data = p.samples.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new(&[p.height, p.width, 3], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_of_quantized_image() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let data: Vec<f64> = (0..2 * 3 * 3).map(|i| (i * 13 % 256) as f64 / 255.0).collect();
        let img = Tensor::new(&[2, 3, 3], data).unwrap();
        write_ppm(&path, &img).unwrap();
        assert_eq!(read_ppm(&path).unwrap(), img);
    }

    #[test]
    fn pgm_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        write_pgm(&path, 4, 2, &[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
        let p = read_pnm(&path).unwrap();
        assert_eq!((p.magic, p.width, p.height), (*b"P5", 4, 2));
        assert_eq!(p.samples, vec![0, 1, 2, 3, 4, 5, 6, 7]);
    }
}
