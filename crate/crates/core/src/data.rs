//! In-repo toy workloads.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SBSD";

/// Labeled feature matrix `[n, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::invalid(
                "features",
                format!("{:?} for {} labels", features.shape(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(
                "labels",
                format!("label {bad} with {classes} classes"),
            ));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// First `ceil(frac * n)` rows and the rest.
    pub fn split(&self, frac: f64) -> (Dataset, Dataset) {
        let cut = ((self.len() as f64 * frac).ceil() as usize).clamp(1, self.len() - 1);
        let a: Vec<usize> = (0..cut).collect();
        let b: Vec<usize> = (cut..self.len()).collect();
        (self.subset(&a), self.subset(&b))
    }

    /// Row indices of each minibatch, shuffled by `rng`.
    pub fn batches(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }

    /// Min-max scale every feature to `[0, 1]`; constant features become 0.
    pub fn scale_unit(mut self) -> Self {
        let (n, d) = (self.features.rows(), self.features.cols());
        for j in 0..d {
            let col = (0..n).map(|i| self.features.data()[i * d + j]);
            let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
            let span = hi - lo;
            let data = self.features.data_mut();
            for i in 0..n {
                let v = &mut data[i * d + j];
                *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
            }
        }
        self
    }

    /// Little-endian binary: magic, `u32` n, dim, classes, then `n * dim`
    /// `f64` features and `n` `u32` labels.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.features.len() * 8 + self.len() * 4);
        buf.extend_from_slice(MAGIC);
        for v in [self.len(), self.dim(), self.classes] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in self.features.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            buf.extend_from_slice(&(l as u32).to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        if buf.len() < 16 || &buf[..4] != MAGIC {
            return Err(Error::Format(format!(
                "{}: not a dataset file",
                path.display()
            )));
        }
        let word =
            |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (n, dim, classes) = (word(0), word(1), word(2));
        if n == 0 || dim == 0 || buf.len() != 16 + n * dim * 8 + n * 4 {
            return Err(Error::Format(format!(
                "{}: truncated or empty",
                path.display()
            )));
        }
        let feats: Vec<f64> = buf[16..16 + n * dim * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels: Vec<usize> = buf[16 + n * dim * 8..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        Dataset::new(Tensor::matrix(n, dim, feats)?, labels, classes)
    }
}

/// Isotropic Gaussian clusters, one per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsConfig {
    pub samples: usize,
    pub dim: usize,
    pub classes: usize,
    /// Cluster standard deviation; centers are drawn from `U[-1, 1]^dim`.
    pub spread: f64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        Self {
            samples: 600,
            dim: 8,
            classes: 4,
            spread: 0.6,
        }
    }
}

/// Blobs scaled to `[0, 1]`, rows in random order.
pub fn gaussian_blobs(cfg: &BlobsConfig, seed: u64) -> Result<Dataset> {
    if cfg.samples < 2 || cfg.dim == 0 || cfg.classes < 2 {
        return Err(Error::invalid(
            "blobs",
            "need at least 2 samples, 1 dimension, 2 classes",
        ));
    }
    if !(cfg.spread > 0.0 && cfg.spread.is_finite()) {
        return Err(Error::invalid(
            "spread",
            format!("{} is not a positive number", cfg.spread),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| (0..cfg.dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let noise = Normal::new(0.0, cfg.spread).expect("positive spread");
    let mut order: Vec<usize> = (0..cfg.samples).map(|i| i % cfg.classes).collect();
    order.shuffle(&mut rng);
    let mut feats = Vec::with_capacity(cfg.samples * cfg.dim);
    for &c in &order {
        feats.extend(centers[c].iter().map(|m| m + noise.sample(&mut rng)));
    }
    Ok(Dataset::new(
        Tensor::matrix(cfg.samples, cfg.dim, feats)?,
        order,
        cfg.classes,
    )?
    .scale_unit())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic_and_scaled() {
        let cfg = BlobsConfig::default();
        let a = gaussian_blobs(&cfg, 7).unwrap();
        let b = gaussian_blobs(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gaussian_blobs(&cfg, 8).unwrap());
        assert!(a.features.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a.labels.iter().filter(|&&l| l == 0).count(), 150);
    }

    #[test]
    fn binary_roundtrip() {
        let d = gaussian_blobs(&BlobsConfig::default(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        d.write_binary(&p).unwrap();
        assert_eq!(Dataset::read_binary(&p).unwrap(), d);
        std::fs::write(&p, b"nope").unwrap();
        assert!(matches!(Dataset::read_binary(&p), Err(Error::Format(_))));
    }

    #[test]
    fn split_and_batches() {
        let d = gaussian_blobs(&BlobsConfig::default(), 1).unwrap();
        let (a, b) = d.split(0.75);
        assert_eq!((a.len(), b.len()), (450, 150));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bs = a.batches(64, &mut rng);
        assert_eq!(bs.len(), 8);
        let mut all: Vec<usize> = bs.concat();
        all.sort();
        assert_eq!(all, (0..450).collect::<Vec<_>>());
    }
}
