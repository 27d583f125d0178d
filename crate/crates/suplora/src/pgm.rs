//! Binary 8-bit PGM (P5) images with values in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub fn encode(image: &Matrix) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.cols(), image.rows()).into_bytes();
    out.extend(
        image
            .as_slice()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn decode(bytes: &[u8]) -> Result<Matrix> {
    let bad = |m: &str| Error::Shape(format!("pgm: {m}"));
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("only binary P5 is supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max == 0 || max > 255 {
        return Err(bad("maxval must be in 1..=255"));
    }
    let data = bytes
        .get(i + 1..i + 1 + w * h)
        .ok_or_else(|| bad("truncated pixel data"))?;
    Matrix::from_vec(h, w, data.iter().map(|b| *b as f64 / max as f64).collect())
}

pub fn write(image: &Matrix, path: &Path) -> Result<()> {
    std::fs::write(path, encode(image)).map_err(|e| Error::io(path, e))
}
