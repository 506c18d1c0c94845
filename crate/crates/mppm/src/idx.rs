//! IDX containers as used by MNIST: big-endian header, unsigned bytes.

use std::fs;
use std::path::{Path, PathBuf};

use mppm_core::data::image::ImageDataset;
use mppm_core::linalg::Matrix;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses an image file body into `(rows, cols, pixels in [0, 1])`.
pub fn parse_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, Matrix)> {
    let bad = |m: &str| Error::format(path, m);
    let magic = be_u32(bytes, 0).ok_or_else(|| bad("truncated header"))?;
    if magic != IMAGES_MAGIC {
        return Err(bad(&format!("bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
    }
    let header: Vec<usize> = (1..4)
        .map(|k| be_u32(bytes, 4 * k).map(|v| v as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| bad("truncated header"))?;
    let (n, h, w) = (header[0], header[1], header[2]);
    let body = &bytes[16..];
    let need = n * h * w;
    if body.len() < need {
        return Err(bad(&format!("truncated body: {} of {need} bytes", body.len())));
    }
    let pixels = body[..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((h, w, Matrix::from_vec(n, h * w, pixels)?))
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let bad = |m: &str| Error::format(path, m);
    let magic = be_u32(bytes, 0).ok_or_else(|| bad("truncated header"))?;
    if magic != LABELS_MAGIC {
        return Err(bad(&format!("bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4).ok_or_else(|| bad("truncated header"))? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(bad(&format!("truncated body: {} of {n} labels", body.len())));
    }
    Ok(body[..n].to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads an image file and, when given, its label file.
pub fn read_idx(images: &Path, labels: Option<&Path>) -> Result<ImageDataset> {
    let (h, w, pixels) = parse_images(&read(images)?, images)?;
    let labels = match labels {
        Some(p) => {
            let l = parse_labels(&read(p)?, p)?;
            if l.len() != pixels.rows() {
                return Err(Error::format(p, format!("{} labels for {} images", l.len(), pixels.rows())));
            }
            Some(l)
        }
        None => None,
    };
    Ok(ImageDataset::new(h, w, pixels, labels)?)
}

/// Pixels are stored as `round(255 v)`.
pub fn encode_images(ds: &ImageDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + ds.pixels.as_slice().len());
    for v in [IMAGES_MAGIC, ds.len() as u32, ds.height as u32, ds.width as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(ds.pixels.as_slice().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_idx(ds: &ImageDataset, images: &Path, labels: Option<&Path>) -> Result<()> {
    fs::write(images, encode_images(ds)).map_err(|e| Error::io(images, e))?;
    if let (Some(p), Some(l)) = (labels, &ds.labels) {
        fs::write(p, encode_labels(l)).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Image and label paths of an MNIST split in `dir`, accepting both the
/// `train-images-idx3-ubyte` and `train-images.idx3-ubyte` spellings.
pub fn mnist_paths(dir: &Path, split: Split) -> Result<(PathBuf, PathBuf)> {
    let stem = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let find = |kind: &str, n: u8| -> Result<PathBuf> {
        let names = [format!("{stem}-{kind}-idx{n}-ubyte"), format!("{stem}-{kind}.idx{n}-ubyte")];
        names
            .iter()
            .map(|name| dir.join(name))
            .find(|p| p.is_file())
            .ok_or_else(|| Error::format(dir, format!("no {} file found", names[0])))
    };
    Ok((find("images", 3)?, find("labels", 1)?))
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<ImageDataset> {
    let (images, labels) = mnist_paths(dir, split)?;
    read_idx(&images, Some(&labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ImageDataset {
        let px = (0..3 * 4 * 2).map(|i| f64::from(i as u8 * 10) / 255.0).collect();
        ImageDataset::new(4, 2, Matrix::from_vec(3, 8, px).unwrap(), Some(vec![7, 0, 9])).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        let ds = sample();
        write_idx(&ds, &ip, Some(&lp)).unwrap();
        assert_eq!(read_idx(&ip, Some(&lp)).unwrap(), ds);
    }

    #[test]
    fn empty_body_with_zero_count() {
        let mut bytes = Vec::new();
        for v in [IMAGES_MAGIC, 0, 28, 28] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        let (h, w, m) = parse_images(&bytes, Path::new("x")).unwrap();
        assert_eq!((h, w, m.rows()), (28, 28, 0));
    }

    #[test]
    fn malformed_files_are_rejected() {
        let p = Path::new("x");
        let good = encode_images(&sample());
        let mut bad_magic = good.clone();
        bad_magic[3] = 0x01;
        assert!(parse_images(&bad_magic, p).is_err());
        assert!(parse_images(&good[..good.len() - 1], p).is_err());
        assert!(parse_images(&good[..10], p).is_err());
        assert!(parse_labels(&good, p).is_err());
        let labels = encode_labels(&[1, 2]);
        assert!(parse_labels(&labels[..9], p).is_err());
        assert_eq!(parse_labels(&labels, p).unwrap(), vec![1, 2]);
    }

    #[test]
    fn label_count_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        fs::write(&ip, encode_images(&sample())).unwrap();
        fs::write(&lp, encode_labels(&[1, 2])).unwrap();
        assert!(read_idx(&ip, Some(&lp)).is_err());
    }

    #[test]
    fn both_file_name_spellings_are_found() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample();
        write_idx(
            &ds,
            &dir.path().join("t10k-images.idx3-ubyte"),
            Some(&dir.path().join("t10k-labels-idx1-ubyte")),
        )
        .unwrap();
        assert_eq!(load_mnist(dir.path(), Split::Test).unwrap(), ds);
        assert!(load_mnist(dir.path(), Split::Train).is_err());
    }
}
