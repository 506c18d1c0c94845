//! Binary PGM (P5) images and montages.

use std::fs;
use std::path::Path;

use mppm_core::data::image::GrayImage;

use crate::error::{Error, Result};

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.pixels.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    fs::write(path, encode_pgm(image)).map_err(|e| Error::io(path, e))
}

/// Reads a P5 file with maxval 255.
pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m);
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("bad header"))?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("only 8-bit P5 is supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimension"));
    let (w, h) = (num(fields[1])?, num(fields[2])?);
    let body = bytes.get(pos + 1..pos + 1 + w * h).ok_or_else(|| bad("truncated body"))?;
    Ok(GrayImage::new(h, w, body.iter().map(|&b| f64::from(b) / 255.0).collect())?)
}

/// Tiles equally sized images row by row, `cols` per row, with a `pad`
/// pixel white gutter.
pub fn montage(images: &[GrayImage], cols: usize, pad: usize) -> Result<GrayImage> {
    let first = images.first().ok_or(mppm_core::Error::EmptyDataset)?;
    let (h, w) = (first.height, first.width);
    if let Some(odd) = images.iter().find(|im| (im.height, im.width) != (h, w)) {
        return Err(mppm_core::Error::Dimension {
            context: "montage tile",
            expected: h * w,
            got: odd.height * odd.width,
        }
        .into());
    }
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let mut out = GrayImage::filled(rows * (h + pad) + pad, cols * (w + pad) + pad, 1.0);
    for (k, im) in images.iter().enumerate() {
        let (r0, c0) = (pad + (k / cols) * (h + pad), pad + (k % cols) * (w + pad));
        for r in 0..h {
            for c in 0..w {
                out.set(r0 + r, c0 + c, im.get(r, c));
            }
        }
    }
    Ok(out)
}
