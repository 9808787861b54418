//! IDX binary dataset files (the MNIST container format).
//!
//! Layout: 4 magic bytes `[0, 0, dtype, ndims]` with dtype `0x08` (u8),
//! then `ndims` big-endian u32 dimension sizes, then the raw bytes in
//! row-major order. Images use 3 dimensions `(count, rows, cols)` for
//! single-channel data or 4 `(count, channels, rows, cols)`; labels use 1.
//! Pixel bytes map to `[0, 1]` by dividing by 255.

use std::io::Read;
use std::path::Path;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const DTYPE_U8: u8 = 0x08;

struct IdxFile {
    dims: Vec<usize>,
    bytes: Vec<u8>,
}

fn read_idx(path: &Path, expect_dims: &[usize]) -> Result<IdxFile> {
    let display = path.display().to_string();
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() < 4 {
        return Err(Error::IdxTruncated {
            path: display,
            detail: format!("{} bytes, need at least a 4-byte magic", raw.len()),
        });
    }
    let ndims = raw[3] as usize;
    if raw[0] != 0 || raw[1] != 0 || raw[2] != DTYPE_U8 || !expect_dims.contains(&ndims) {
        return Err(Error::IdxMagic { path: display });
    }
    let header = 4 + 4 * ndims;
    if raw.len() < header {
        return Err(Error::IdxTruncated {
            path: display,
            detail: format!("{} bytes, need {header} for the dimension header", raw.len()),
        });
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| {
            u32::from_be_bytes(raw[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize
        })
        .collect();
    let expected = header + dims.iter().product::<usize>();
    if raw.len() != expected {
        return Err(Error::IdxTruncated {
            path: display,
            detail: format!("{} bytes, header promises {expected}", raw.len()),
        });
    }
    Ok(IdxFile { dims, bytes: raw[header..].to_vec() })
}

/// Load an image/label IDX pair into a dataset. The class count is the
/// largest label plus one.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = read_idx(images_path, &[3, 4])?;
    let labels = read_idx(labels_path, &[1])?;
    let count = images.dims[0];
    if labels.dims[0] != count {
        return Err(Error::IdxCountMismatch { images: count, labels: labels.dims[0] });
    }
    let shape: Vec<usize> = if images.dims.len() == 3 {
        vec![1, images.dims[1], images.dims[2]]
    } else {
        images.dims[1..].to_vec()
    };
    let stride: usize = shape.iter().product();
    let num_classes = labels.bytes.iter().copied().max().unwrap_or(0) as usize + 1;
    let samples = (0..count)
        .map(|i| {
            let data = images.bytes[i * stride..(i + 1) * stride]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect();
            (Tensor::new(shape.clone(), data), labels.bytes[i] as usize)
        })
        .collect();
    LabeledDataset::new(samples, num_classes)
}

/// Write a dataset as an image/label IDX pair. Pixel values are scaled by
/// 255 and rounded to bytes; data already on the 8-bit grid round-trips
/// exactly.
pub fn save_idx(dataset: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    if dataset.input_shape.len() != 3 {
        return Err(Error::InvalidArg(format!(
            "idx export needs [channels, rows, cols] samples, got {:?}",
            dataset.input_shape
        )));
    }
    let (c, h, w) = (dataset.input_shape[0], dataset.input_shape[1], dataset.input_shape[2]);
    let count = dataset.len() as u32;

    let mut images: Vec<u8> = Vec::new();
    if c == 1 {
        images.extend_from_slice(&[0, 0, DTYPE_U8, 3]);
        for d in [count, h as u32, w as u32] {
            images.extend_from_slice(&d.to_be_bytes());
        }
    } else {
        images.extend_from_slice(&[0, 0, DTYPE_U8, 4]);
        for d in [count, c as u32, h as u32, w as u32] {
            images.extend_from_slice(&d.to_be_bytes());
        }
    }
    let mut labels: Vec<u8> = vec![0, 0, DTYPE_U8, 1];
    labels.extend_from_slice(&count.to_be_bytes());

    for (x, y) in &dataset.samples {
        for &v in &x.data {
            images.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        if *y > u8::MAX as usize {
            return Err(Error::InvalidArg(format!("label {y} does not fit in a byte")));
        }
        labels.push(*y as u8);
    }
    std::fs::write(images_path, images)?;
    std::fs::write(labels_path, labels)?;
    Ok(())
}
