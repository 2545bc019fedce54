//! Binary PPM (P6) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Maps `[-1, 1]` linearly to `[0, 255]`, clamped and rounded.
pub fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// P6 encoding of a row-major HWC RGB image with values in `[-1, 1]`.
pub fn encode(width: usize, height: usize, rgb: &[f64]) -> Result<Vec<u8>> {
    if rgb.len() != width * height * 3 {
        return Err(Error::InvalidArgument(format!(
            "{} values do not form a {width}x{height} RGB image",
            rgb.len()
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(rgb.iter().map(|&v| to_byte(v)));
    Ok(out)
}

/// Width, height and raw bytes of a P6 file written by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |why: &str| Error::InvalidArgument(format!("not a P6 image: {why}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("expected magic P6 and maxval 255"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimensions"));
    let (w, h) = (parse(fields[1])?, parse(fields[2])?);
    let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixel data"))?;
    if data.len() != w * h * 3 {
        return Err(bad("pixel data length does not match the header"));
    }
    Ok((w, h, data.to_vec()))
}

pub fn write(path: &Path, width: usize, height: usize, rgb: &[f64]) -> Result<()> {
    let bytes = encode(width, height, rgb)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
