//! IDX image/label files (big-endian dims, u8 data).
//!
//! Magic 0x00000801 is a 1-D label vector; 0x00000803 a 3-D single-channel
//! image stack `[n, rows, cols]`; 0x00000804 the 4-D multi-channel extension
//! `[n, channels, rows, cols]` used when exporting RGB synthetic data.

use std::fs;
use std::path::Path;

use crate::error::{EkdError, Result};
use crate::tensor::Tensor;

use super::Dataset;

const MAGIC_LABELS: u32 = 0x0000_0801;
const MAGIC_IMAGES_3D: u32 = 0x0000_0803;
const MAGIC_IMAGES_4D: u32 = 0x0000_0804;

fn read_header(bytes: &[u8], path: &Path, want_magic: &[u32]) -> Result<(u32, Vec<usize>, usize)> {
    if bytes.len() < 4 {
        return Err(EkdError::Data(format!("{}: too short for IDX", path.display())));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if !want_magic.contains(&magic) {
        return Err(EkdError::Data(format!(
            "{}: unexpected IDX magic {magic:#010x}",
            path.display()
        )));
    }
    let ndims = (magic & 0xff) as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(EkdError::Data(format!("{}: truncated IDX header", path.display())));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let numel: usize = dims.iter().product();
    if bytes.len() != header + numel {
        return Err(EkdError::Data(format!(
            "{}: expected {} data bytes, found {}",
            path.display(),
            numel,
            bytes.len() - header
        )));
    }
    Ok((magic, dims, header))
}

/// Reads an IDX image stack; pixels are scaled to [0, 1].
pub fn read_idx_images(path: &Path) -> Result<(Vec<Tensor<f32>>, usize, usize)> {
    let bytes = fs::read(path).map_err(EkdError::io(path))?;
    let (magic, dims, header) = read_header(&bytes, path, &[MAGIC_IMAGES_3D, MAGIC_IMAGES_4D])?;
    let (n, channels, rows, cols) = if magic == MAGIC_IMAGES_3D {
        (dims[0], 1, dims[1], dims[2])
    } else {
        (dims[0], dims[1], dims[2], dims[3])
    };
    if rows != cols {
        return Err(EkdError::Data(format!(
            "{}: only square images are supported, got {rows}x{cols}",
            path.display()
        )));
    }
    let sample = channels * rows * cols;
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let data: Vec<f32> = bytes[header + i * sample..header + (i + 1) * sample]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        images.push(Tensor::from_vec(vec![channels, rows, cols], data)?);
    }
    Ok((images, channels, rows))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u32>> {
    let bytes = fs::read(path).map_err(EkdError::io(path))?;
    let (_, dims, header) = read_header(&bytes, path, &[MAGIC_LABELS])?;
    Ok(bytes[header..header + dims[0]].iter().map(|&b| b as u32).collect())
}

pub(crate) fn load_idx_pair(images: &Path, labels: &Path, num_classes: usize) -> Result<Dataset> {
    let (images, channels, resolution) = read_idx_images(images)?;
    let labels = read_idx_labels(labels)?;
    let ds = Dataset {
        images,
        labels,
        num_classes,
        channels,
        resolution,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes images as IDX with u8 quantization (round to nearest of v*255).
/// Single-channel data uses the classic 3-D layout, multi-channel the 4-D
/// extension.
pub fn write_idx_images(path: &Path, images: &[Tensor<f32>]) -> Result<()> {
    let first = images
        .first()
        .ok_or_else(|| EkdError::Data("no images to write".into()))?;
    let shape = first.shape().to_vec();
    let (channels, rows, cols) = (shape[0], shape[1], shape[2]);
    let mut bytes = Vec::new();
    if channels == 1 {
        bytes.extend_from_slice(&MAGIC_IMAGES_3D.to_be_bytes());
        for d in [images.len(), rows, cols] {
            bytes.extend_from_slice(&(d as u32).to_be_bytes());
        }
    } else {
        bytes.extend_from_slice(&MAGIC_IMAGES_4D.to_be_bytes());
        for d in [images.len(), channels, rows, cols] {
            bytes.extend_from_slice(&(d as u32).to_be_bytes());
        }
    }
    for img in images {
        if img.shape() != shape {
            return Err(EkdError::Data("inconsistent image shapes".into()));
        }
        bytes.extend(
            img.data()
                .iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    fs::write(path, bytes).map_err(EkdError::io(path))
}

pub fn write_idx_labels(path: &Path, labels: &[u32]) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l > 255) {
        return Err(EkdError::Data(format!("label {bad} does not fit in a byte")));
    }
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&MAGIC_LABELS.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend(labels.iter().map(|&l| l as u8));
    fs::write(path, bytes).map_err(EkdError::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multi_channel_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("images.idx");
        let lbl_path = dir.path().join("labels.idx");
        let images: Vec<Tensor<f32>> = (0..3)
            .map(|i| {
                Tensor::from_vec(
                    vec![3, 4, 4],
                    (0..48).map(|j| ((i * 48 + j) % 256) as f32 / 255.0).collect(),
                )
                .unwrap()
            })
            .collect();
        write_idx_images(&img_path, &images).unwrap();
        write_idx_labels(&lbl_path, &[0, 1, 2]).unwrap();
        let ds = load_idx_pair(&img_path, &lbl_path, 3).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.channels, 3);
        assert_eq!(ds.resolution, 4);
        for (a, b) in ds.images.iter().zip(&images) {
            assert!(a.bit_eq(b), "u8 quantization must round-trip exactly here");
        }
    }

    #[test]
    fn single_channel_uses_classic_magic() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("images.idx");
        let images = vec![Tensor::from_vec(vec![1, 2, 2], vec![0.0, 1.0, 0.5, 0.25]).unwrap()];
        write_idx_images(&img_path, &images).unwrap();
        let bytes = std::fs::read(&img_path).unwrap();
        assert_eq!(u32::from_be_bytes(bytes[..4].try_into().unwrap()), 0x0000_0803);
        let (back, channels, res) = read_idx_images(&img_path).unwrap();
        assert_eq!((channels, res), (1, 2));
        assert_eq!(back.len(), 1);
    }

    #[test]
    fn label_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("images.idx");
        let lbl_path = dir.path().join("labels.idx");
        let images = vec![Tensor::from_vec(vec![1, 2, 2], vec![0.5; 4]).unwrap()];
        write_idx_images(&img_path, &images).unwrap();
        write_idx_labels(&lbl_path, &[0, 1]).unwrap();
        assert!(load_idx_pair(&img_path, &lbl_path, 2).is_err());
    }
}
