//! IDX-format dataset loading (the MNIST byte layout) and in-memory batches.

use std::fs;
use std::path::{Path, PathBuf};

use kw_core::tensor::Tensor;

use crate::{CliError, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled image set, normalized to zero mean / unit variance over the whole
/// dataset.
#[derive(Debug)]
pub struct Dataset {
    /// `(N, 1, rows, cols)`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        [self.images.shape()[1], self.images.shape()[2], self.images.shape()[3]]
    }

    /// Copy the samples at `indices` into one batch tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.sample_shape();
        let stride = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        let x = Tensor::from_vec(&[indices.len(), c, h, w], data).expect("batch shape");
        (x, labels)
    }

    /// Keep only the first `limit` samples (deterministic subset).
    pub fn truncate(&mut self, limit: usize) {
        if limit >= self.len() {
            return;
        }
        let [c, h, w] = self.sample_shape();
        let stride = c * h * w;
        let data = self.images.data()[..limit * stride].to_vec();
        self.images = Tensor::from_vec(&[limit, c, h, w], data).expect("truncated shape");
        self.labels.truncate(limit);
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(CliError::IdxFormat {
            path: path.into(),
            offset,
            msg: format!("truncated: need {end} bytes, file has {}", bytes.len()),
        });
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Parse an IDX image file into raw `u8` pixels.
fn load_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let name = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| CliError::io(&name, e))?;
    let magic = read_u32_be(&bytes, 0, &name)?;
    if magic != IMAGES_MAGIC {
        return Err(CliError::IdxFormat {
            path: name,
            offset: 0,
            msg: format!("bad image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        });
    }
    let count = read_u32_be(&bytes, 4, &name)? as usize;
    let rows = read_u32_be(&bytes, 8, &name)? as usize;
    let cols = read_u32_be(&bytes, 12, &name)? as usize;
    let need = 16 + count * rows * cols;
    if bytes.len() < need {
        return Err(CliError::IdxFormat {
            path: name,
            offset: bytes.len(),
            msg: format!("truncated pixel data: need {need} bytes, file has {}", bytes.len()),
        });
    }
    Ok((count, rows, cols, bytes[16..need].to_vec()))
}

fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let name = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| CliError::io(&name, e))?;
    let magic = read_u32_be(&bytes, 0, &name)?;
    if magic != LABELS_MAGIC {
        return Err(CliError::IdxFormat {
            path: name,
            offset: 0,
            msg: format!("bad label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        });
    }
    let count = read_u32_be(&bytes, 4, &name)? as usize;
    let need = 8 + count;
    if bytes.len() < need {
        return Err(CliError::IdxFormat {
            path: name,
            offset: bytes.len(),
            msg: format!("truncated label data: need {need} bytes, file has {}", bytes.len()),
        });
    }
    Ok(bytes[8..need].to_vec())
}

/// Load an image/label IDX pair and z-score the pixels over the dataset.
pub fn load_idx_dataset(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (count, rows, cols, pixels) = load_idx_images(images_path)?;
    let labels = load_idx_labels(labels_path)?;
    if labels.len() != count {
        return Err(CliError::IdxFormat {
            path: labels_path.display().to_string(),
            offset: 4,
            msg: format!("{count} images but {} labels", labels.len()),
        });
    }
    let raw: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
    let var = raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / raw.len().max(1) as f64;
    let std = var.sqrt().max(1e-12);
    let data: Vec<f64> = raw.iter().map(|v| (v - mean) / std).collect();
    Ok(Dataset {
        images: Tensor::from_vec(&[count, 1, rows, cols], data)?,
        labels: labels.iter().map(|&l| l as usize).collect(),
        mean,
        std,
    })
}

/// Conventional MNIST file names inside a dataset directory.
pub fn split_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    match split {
        Split::Train => (
            dir.join("train-images-idx3-ubyte"),
            dir.join("train-labels-idx1-ubyte"),
        ),
        Split::Test => (
            dir.join("t10k-images-idx3-ubyte"),
            dir.join("t10k-labels-idx1-ubyte"),
        ),
    }
}

pub fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    let (images, labels) = split_paths(dir, split);
    load_idx_dataset(&images, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_fixture(dir: &Path, n: usize) -> (PathBuf, PathBuf) {
        let ip = dir.join("train-images-idx3-ubyte");
        let lp = dir.join("train-labels-idx1-ubyte");
        let mut img = Vec::new();
        img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&(n as u32).to_be_bytes());
        img.extend_from_slice(&28u32.to_be_bytes());
        img.extend_from_slice(&28u32.to_be_bytes());
        for i in 0..n * 28 * 28 {
            img.push((i % 251) as u8);
        }
        let mut lab = Vec::new();
        lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(n as u32).to_be_bytes());
        for i in 0..n {
            lab.push((i % 10) as u8);
        }
        std::fs::File::create(&ip).unwrap().write_all(&img).unwrap();
        std::fs::File::create(&lp).unwrap().write_all(&lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn four_image_fixture_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_fixture(dir.path(), 4);
        let ds = load_idx_dataset(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.images.shape(), &[4, 1, 28, 28]);
        assert_eq!(ds.labels, vec![0, 1, 2, 3]);
        // z-scored: dataset mean ~ 0, variance ~ 1.
        let m: f64 = ds.images.data().iter().sum::<f64>() / ds.images.numel() as f64;
        assert!(m.abs() < 1e-9);
        let v: f64 =
            ds.images.data().iter().map(|x| x * x).sum::<f64>() / ds.images.numel() as f64;
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mismatched_counts_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, _) = write_fixture(dir.path(), 4);
        let lp = dir.path().join("short-labels");
        let mut lab = Vec::new();
        lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&3u32.to_be_bytes());
        lab.extend_from_slice(&[0, 1, 2]);
        std::fs::write(&lp, lab).unwrap();
        assert!(matches!(
            load_idx_dataset(&ip, &lp).unwrap_err(),
            CliError::IdxFormat { .. }
        ));
    }

    #[test]
    fn bad_magic_and_truncation_report_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad");
        std::fs::write(&p, 0x1234u32.to_be_bytes()).unwrap();
        match load_idx_images(&p).unwrap_err() {
            CliError::IdxFormat { offset, .. } => assert_eq!(offset, 0),
            other => panic!("unexpected {other:?}"),
        }

        let mut img = Vec::new();
        img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&10u32.to_be_bytes());
        img.extend_from_slice(&28u32.to_be_bytes());
        img.extend_from_slice(&28u32.to_be_bytes());
        img.extend_from_slice(&[0u8; 100]); // far short of 10*28*28
        std::fs::write(&p, img).unwrap();
        match load_idx_images(&p).unwrap_err() {
            CliError::IdxFormat { offset, msg, .. } => {
                assert_eq!(offset, 116);
                assert!(msg.contains("truncated"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncate_keeps_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_fixture(dir.path(), 8);
        let mut ds = load_idx_dataset(&ip, &lp).unwrap();
        let first = ds.images.data()[..28 * 28].to_vec();
        ds.truncate(3);
        assert_eq!(ds.len(), 3);
        assert_eq!(&ds.images.data()[..28 * 28], &first[..]);
        let (x, labels) = ds.batch(&[2, 0]);
        assert_eq!(x.shape(), &[2, 1, 28, 28]);
        assert_eq!(labels, vec![2, 0]);
    }
}
