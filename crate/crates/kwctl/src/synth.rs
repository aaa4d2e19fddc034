//! Deterministic synthetic dataset in MNIST byte layout: ten classes of
//! oriented sinusoidal gratings with per-sample phase and noise. Convolution
//! stacks separate orientations easily, so desk-scale smoke runs converge in
//! a couple of epochs without shipping real data.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::idx::{IMAGES_MAGIC, LABELS_MAGIC};
use crate::{CliError, Result};

pub const IMAGE_SIDE: usize = 28;
pub const NUM_CLASSES: usize = 10;

fn grating(label: usize, phase: f64, noise: &mut impl FnMut() -> f64, out: &mut [u8]) {
    let theta = PI * label as f64 / NUM_CLASSES as f64;
    let (dx, dy) = (theta.cos(), theta.sin());
    let wavelength = 6.5;
    // Per-class brightness offset keeps classes separable even for a
    // pooling-only shortcut path.
    let bias = 0.07 * label as f64 - 0.31;
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let t = 2.0 * PI / wavelength * (x as f64 * dx + y as f64 * dy) + phase;
            let v = 0.5 + bias + 0.38 * t.sin() + noise();
            out[y * IMAGE_SIDE + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
}

fn render_set(count: usize, rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<u8>) {
    let mut images = vec![0u8; count * IMAGE_SIDE * IMAGE_SIDE];
    let mut labels = vec![0u8; count];
    for i in 0..count {
        let label = i % NUM_CLASSES;
        let phase = rng.gen_range(0.0..2.0 * PI);
        let mut noise = {
            let rng = &mut *rng;
            move || rng.gen_range(-0.02..0.02)
        };
        grating(
            label,
            phase,
            &mut noise,
            &mut images[i * IMAGE_SIDE * IMAGE_SIDE..(i + 1) * IMAGE_SIDE * IMAGE_SIDE],
        );
        labels[i] = label as u8;
    }
    (images, labels)
}

fn write_idx_pair(dir: &Path, prefix: &str, images: &[u8], labels: &[u8]) -> Result<()> {
    let count = labels.len();
    let ipath = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lpath = dir.join(format!("{prefix}-labels-idx1-ubyte"));

    let mut ibytes = Vec::with_capacity(16 + images.len());
    ibytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    ibytes.extend_from_slice(&(count as u32).to_be_bytes());
    ibytes.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    ibytes.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    ibytes.extend_from_slice(images);
    fs::write(&ipath, ibytes).map_err(|e| CliError::io(ipath.display().to_string(), e))?;

    let mut lbytes = Vec::with_capacity(8 + count);
    lbytes.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lbytes.extend_from_slice(&(count as u32).to_be_bytes());
    lbytes.extend_from_slice(labels);
    fs::write(&lpath, lbytes).map_err(|e| CliError::io(lpath.display().to_string(), e))?;
    Ok(())
}

/// Write `train-*` and `t10k-*` IDX files under `dir`.
pub fn write_synthetic_dataset(
    dir: &Path,
    train_count: usize,
    test_count: usize,
    seed: u64,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display().to_string(), e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ti, tl) = render_set(train_count, &mut rng);
    write_idx_pair(dir, "train", &ti, &tl)?;
    let (ei, el) = render_set(test_count, &mut rng);
    write_idx_pair(dir, "t10k", &ei, &el)?;
    Ok(())
}
