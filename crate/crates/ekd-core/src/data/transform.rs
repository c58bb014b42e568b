//! Few-sample subsetting and low-resolution downsampling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{EkdError, Result};
use crate::seeding::seed_for_indexed;
use crate::tensor::Tensor;

use super::Dataset;

/// Per-class uniform sampling without replacement of
/// `floor(retain_fraction * n_class)` items (minimum 1). Class balance is
/// preserved; surviving samples keep their original relative order.
/// `retain_fraction == 1` is the identity.
pub fn subset_few_sample(ds: &Dataset, retain_fraction: f64, seed: u64) -> Result<Dataset> {
    if !(retain_fraction > 0.0 && retain_fraction <= 1.0) {
        return Err(EkdError::Data(format!(
            "retain_fraction must be in (0, 1], got {retain_fraction}"
        )));
    }
    if retain_fraction == 1.0 {
        return Ok(ds.clone());
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &label) in ds.labels.iter().enumerate() {
        per_class[label as usize].push(i);
    }
    let mut keep = Vec::new();
    for (class, indices) in per_class.iter().enumerate() {
        if indices.is_empty() {
            return Err(EkdError::Data(format!("class {class} has no samples")));
        }
        let count = ((retain_fraction * indices.len() as f64).floor() as usize).max(1);
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed_for_indexed(seed, "class", &[class as u64]));
        let mut pool = indices.clone();
        pool.shuffle(&mut rng);
        let mut chosen: Vec<usize> = pool[..count].to_vec();
        chosen.sort_unstable();
        keep.extend(chosen);
    }
    keep.sort_unstable();
    Ok(Dataset {
        images: keep.iter().map(|&i| ds.images[i].clone()).collect(),
        labels: keep.iter().map(|&i| ds.labels[i]).collect(),
        num_classes: ds.num_classes,
        channels: ds.channels,
        resolution: ds.resolution,
    })
}

/// Bilinear interpolation of one `[C, H, W]` image to `target x target`
/// (half-pixel centers, edge clamped).
pub fn downsample_image(img: &Tensor<f32>, target: usize) -> Tensor<f32> {
    let shape = img.shape();
    let (c, res) = (shape[0], shape[1]);
    if target == res {
        return img.clone();
    }
    let scale = res as f64 / target as f64;
    let src = img.data();
    let per_channel = res * res;
    let mut data = Vec::with_capacity(c * target * target);
    let coord = |o: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (res - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(res - 1);
        (lo, hi, s - lo as f64)
    };
    for ci in 0..c {
        let plane = &src[ci * per_channel..(ci + 1) * per_channel];
        for oy in 0..target {
            let (y0, y1, wy) = coord(oy);
            for ox in 0..target {
                let (x0, x1, wx) = coord(ox);
                let top = plane[y0 * res + x0] as f64 * (1.0 - wx) + plane[y0 * res + x1] as f64 * wx;
                let bottom =
                    plane[y1 * res + x0] as f64 * (1.0 - wx) + plane[y1 * res + x1] as f64 * wx;
                data.push((top * (1.0 - wy) + bottom * wy) as f32);
            }
        }
    }
    Tensor::from_vec(vec![c, target, target], data).expect("downsample shape")
}

/// Downsamples every image in the dataset to `target x target`.
pub fn downsample(ds: &Dataset, target: usize) -> Result<Dataset> {
    if target == 0 || target > ds.resolution {
        return Err(EkdError::Data(format!(
            "downsample target {target} must be in 1..={}",
            ds.resolution
        )));
    }
    Ok(Dataset {
        images: ds.images.iter().map(|img| downsample_image(img, target)).collect(),
        labels: ds.labels.clone(),
        num_classes: ds.num_classes,
        channels: ds.channels,
        resolution: target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SyntheticSpec};

    fn dataset(per_class: usize) -> Dataset {
        let spec = SyntheticSpec {
            num_classes: 4,
            train_per_class: per_class,
            test_per_class: 1,
            resolution: 8,
            ..SyntheticSpec::default()
        };
        synth_generate(&spec, 5).0
    }

    #[test]
    fn quarter_fraction_keeps_quarter_per_class() {
        let ds = dataset(100);
        let sub = subset_few_sample(&ds, 0.25, 5).unwrap();
        assert_eq!(sub.len(), 100);
        for k in 0..4u32 {
            assert_eq!(sub.labels.iter().filter(|&&l| l == k).count(), 25);
        }
    }

    #[test]
    fn full_fraction_is_identity() {
        let ds = dataset(10);
        let sub = subset_few_sample(&ds, 1.0, 5).unwrap();
        assert_eq!(sub.labels, ds.labels);
        for (a, b) in sub.images.iter().zip(&ds.images) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn floor_with_minimum_one() {
        let ds = dataset(3);
        let sub = subset_few_sample(&ds, 0.25, 5).unwrap();
        // floor(0.25 * 3) = 0, clamped to 1 per class
        assert_eq!(sub.len(), 4);
    }

    #[test]
    fn different_seeds_overlap_about_fraction_squared() {
        // For fraction f, two independent subsets share ~f^2 * n items in
        // expectation, i.e. a fraction f of either subset. Tag each sample
        // uniquely through its first pixel so membership is recoverable.
        let n = 320usize;
        let images: Vec<Tensor<f32>> = (0..n)
            .map(|i| {
                let mut data = vec![0.5f32; 4];
                data[0] = i as f32 / n as f32;
                Tensor::from_vec(vec![1, 2, 2], data).unwrap()
            })
            .collect();
        let ds = Dataset {
            images,
            labels: (0..n as u32).map(|i| i % 4).collect(),
            num_classes: 4,
            channels: 1,
            resolution: 2,
        };
        let f = 0.5;
        let mut overlap = 0usize;
        let mut total = 0usize;
        for trial in 0..40 {
            let a = subset_few_sample(&ds, f, 1000 + trial).unwrap();
            let b = subset_few_sample(&ds, f, 2000 + trial).unwrap();
            let set_a: std::collections::HashSet<u32> =
                a.images.iter().map(|img| img.data()[0].to_bits()).collect();
            overlap += b
                .images
                .iter()
                .filter(|img| set_a.contains(&img.data()[0].to_bits()))
                .count();
            total += b.len();
        }
        let rate = overlap as f64 / total as f64;
        // expectation 0.5 over 6400 draws; 3 sigma of a binomial is ~0.019
        assert!((rate - f).abs() < 0.02, "overlap rate {rate}");
    }

    #[test]
    fn constant_image_survives_downsampling() {
        let img = Tensor::from_vec(vec![3, 32, 32], vec![0.42f32; 3 * 32 * 32]).unwrap();
        let out = downsample_image(&img, 16);
        assert_eq!(out.shape(), &[3, 16, 16]);
        for &v in out.data() {
            assert!((v - 0.42).abs() < 1e-6);
        }
    }

    #[test]
    fn same_resolution_is_identity() {
        let ds = dataset(2);
        let out = downsample(&ds, 8).unwrap();
        for (a, b) in out.images.iter().zip(&ds.images) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn checkerboard_halving_averages() {
        // Pixel-level 4x4 checkerboard -> 2x2 output; every output pixel sits
        // between four source pixels (two ones, two zeros) -> 0.5.
        let mut data = vec![0.0f32; 16];
        for y in 0..4 {
            for x in 0..4 {
                if (y + x) % 2 == 0 {
                    data[y * 4 + x] = 1.0;
                }
            }
        }
        let img = Tensor::from_vec(vec![1, 4, 4], data).unwrap();
        let out = downsample_image(&img, 2);
        for &v in out.data() {
            assert!((v - 0.5).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn upsample_rejected() {
        let ds = dataset(2);
        assert!(downsample(&ds, 16).is_err());
    }
}
