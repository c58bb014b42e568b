//! CIFAR binary record parsing.
//!
//! Records are fixed size: one label byte (CIFAR-10) or coarse+fine label
//! bytes (CIFAR-100, the fine label is used), followed by 3072 channel-major
//! pixel bytes (3 x 32 x 32).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EkdError, Result};
use crate::tensor::Tensor;

use super::Dataset;

const PIXELS: usize = 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + PIXELS
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

pub fn load_cifar_binary(path: &Path, variant: CifarVariant) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(EkdError::io(path))?;
    let record = variant.record_len();
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(EkdError::Data(format!(
            "{}: {} bytes is not a whole number of {record}-byte records",
            path.display(),
            bytes.len()
        )));
    }
    let classes = variant.num_classes();
    let mut images = Vec::with_capacity(bytes.len() / record);
    let mut labels = Vec::with_capacity(images.capacity());
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        // CIFAR-100 stores [coarse, fine]; the fine label is the class.
        let label = rec[variant.label_bytes() - 1] as u32;
        if label as usize >= classes {
            return Err(EkdError::Data(format!(
                "{}: record {i} has label {label} >= {classes}",
                path.display()
            )));
        }
        let pixels: Vec<f32> = rec[variant.label_bytes()..]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        images.push(Tensor::from_vec(vec![3, 32, 32], pixels)?);
        labels.push(label);
    }
    Ok(Dataset {
        images,
        labels,
        num_classes: classes,
        channels: 3,
        resolution: 32,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_lengths() {
        assert_eq!(CifarVariant::Cifar10.record_len(), 3073);
        assert_eq!(CifarVariant::Cifar100.record_len(), 3074);
    }

    fn write_records(_variant: CifarVariant, labels: &[&[u8]], dir: &Path) -> std::path::PathBuf {
        let path = dir.join("data.bin");
        let mut bytes = Vec::new();
        for (i, lb) in labels.iter().enumerate() {
            bytes.extend_from_slice(lb);
            bytes.extend(std::iter::repeat(i as u8).take(PIXELS));
        }
        std::fs::write(&path, bytes).unwrap();
        path
    }

    #[test]
    fn parses_five_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_records(
            CifarVariant::Cifar10,
            &[&[0], &[1], &[2], &[3], &[9]],
            dir.path(),
        );
        let ds = load_cifar_binary(&path, CifarVariant::Cifar10).unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.labels, vec![0, 1, 2, 3, 9]);
        assert!((ds.images[2].data()[0] - 2.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_records(CifarVariant::Cifar100, &[&[7, 42]], dir.path());
        let ds = load_cifar_binary(&path, CifarVariant::Cifar100).unwrap();
        assert_eq!(ds.labels, vec![42]);
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, vec![0u8; 3072]).unwrap();
        assert!(load_cifar_binary(&path, CifarVariant::Cifar10).is_err());
    }

    #[test]
    fn out_of_range_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_records(CifarVariant::Cifar10, &[&[10]], dir.path());
        assert!(load_cifar_binary(&path, CifarVariant::Cifar10).is_err());
    }
}
