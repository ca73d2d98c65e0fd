//! Raw file formats: IDX (MNIST, Fashion-MNIST) and the CIFAR-10 binary batches.
//!
//! IDX is big-endian: a magic word `0x0000_08NN` where `NN` is the number of
//! dimensions, then one u32 per dimension, then unsigned bytes.

use std::path::Path;

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Decoded images: `count` images of `rows x cols x channels` bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImages {
    pub count: usize,
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail: detail.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, offset, "truncated header"))
}

fn idx_header(bytes: &[u8], path: &Path, magic: u32) -> Result<(Vec<usize>, usize)> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(format_err(
            path,
            0,
            format!("bad magic 0x{found:08x}, expected 0x{magic:08x}"),
        ));
    }
    let ndim = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        dims.push(be_u32(bytes, 4 + 4 * d, path)? as usize);
    }
    let start = 4 + 4 * ndim;
    let need: usize = dims.iter().product();
    if bytes.len() < start + need {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated payload: header declares {need} bytes, file has {}", bytes.len() - start),
        ));
    }
    Ok((dims, start))
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<RawImages> {
    let (dims, start) = idx_header(bytes, path, IDX_IMAGES_MAGIC)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    Ok(RawImages {
        count,
        channels: 1,
        rows,
        cols,
        pixels: bytes[start..start + count * rows * cols].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path, classes: usize) -> Result<Vec<u8>> {
    let (dims, start) = idx_header(bytes, path, IDX_LABELS_MAGIC)?;
    let labels = &bytes[start..start + dims[0]];
    check_labels(labels, path, classes, |i| start + i)?;
    Ok(labels.to_vec())
}

fn check_labels(labels: &[u8], path: &Path, classes: usize, offset: impl Fn(usize) -> usize) -> Result<()> {
    match labels.iter().position(|&l| l as usize >= classes) {
        Some(i) => Err(format_err(path, offset(i), format!("label {} out of range", labels[i]))),
        None => Ok(()),
    }
}

/// One CIFAR-10 batch file: records of a label byte followed by the R, G and
/// B planes, each 32x32 row-major.
pub fn parse_cifar_batch(bytes: &[u8], path: &Path, classes: usize) -> Result<(RawImages, Vec<u8>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(format_err(
            path,
            whole,
            format!("truncated record: {} bytes is not a multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let count = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    check_labels(&labels, path, classes, |i| i * CIFAR_RECORD)?;
    Ok((
        RawImages {
            count,
            channels: 3,
            rows: CIFAR_SIDE,
            cols: CIFAR_SIDE,
            pixels,
        },
        labels,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut out = magic.to_be_bytes().to_vec();
        for d in dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn idx_images_round_trip() {
        let bytes = idx(IDX_IMAGES_MAGIC, &[2, 2, 3], &[0, 1, 2, 3, 4, 5, 250, 251, 252, 253, 254, 255]);
        let img = parse_idx_images(&bytes, Path::new("x")).unwrap();
        assert_eq!((img.count, img.rows, img.cols), (2, 2, 3));
        assert_eq!(img.pixels[6], 250);
    }

    #[test]
    fn idx_rejects_bad_magic_and_truncation() {
        let bad = idx(0x0000_0802, &[1, 1], &[0]);
        let err = parse_idx_images(&bad, Path::new("f")).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");

        let short = idx(IDX_IMAGES_MAGIC, &[2, 2, 2], &[0; 7]);
        assert!(matches!(parse_idx_images(&short, Path::new("f")), Err(Error::Format { .. })));

        let header_only = IDX_IMAGES_MAGIC.to_be_bytes();
        assert!(parse_idx_images(&header_only, Path::new("f")).is_err());
    }

    #[test]
    fn idx_label_out_of_range_names_offset() {
        let bytes = idx(IDX_LABELS_MAGIC, &[3], &[1, 9, 10]);
        match parse_idx_labels(&bytes, Path::new("l"), 10) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 8 + 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cifar_records() {
        let mut bytes = Vec::new();
        for label in [3u8, 7] {
            bytes.push(label);
            bytes.extend((0..3072).map(|i| (i % 251) as u8));
        }
        let (img, labels) = parse_cifar_batch(&bytes, Path::new("c"), 10).unwrap();
        assert_eq!(labels, vec![3, 7]);
        assert_eq!(img.count, 2);
        assert_eq!(img.pixels.len(), 2 * 3072);
        assert_eq!(img.pixels[3072 + 1024], (1024 % 251) as u8);

        assert!(parse_cifar_batch(&bytes[..100], Path::new("c"), 10).is_err());
        bytes[CIFAR_RECORD] = 12;
        match parse_cifar_batch(&bytes, Path::new("c"), 10) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, CIFAR_RECORD),
            other => panic!("{other:?}"),
        }
    }
}
