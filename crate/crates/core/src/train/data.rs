//! Image classification data: a procedural toy set and a CIFAR-10 binary
//! loader. Both are normalized per channel with statistics of the training
//! portion.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::arch::stream_rng;
use crate::error::{Error, Result};
use crate::fsio;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub tag: SplitTag,
    pub norm: NormStats,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, tag: SplitTag) -> Result<Self> {
        if images.ndim() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{:?} images vs {} labels", images.shape(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Invalid(format!("label {bad} >= num_classes {num_classes}")));
        }
        let c = images.shape()[1];
        Ok(Dataset {
            images,
            labels,
            num_classes,
            tag,
            norm: NormStats {
                mean: vec![0.0; c],
                std: vec![1.0; c],
            },
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)`
    pub fn resolution(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    fn sample_len(&self) -> usize {
        let (c, h, w) = self.resolution();
        c * h * w
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = self.sample_len();
        let (c, h, w) = self.resolution();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Invalid(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::new(vec![indices.len(), c, h, w], data)?, labels))
    }

    /// Contiguous batch `[start, end)`.
    pub fn range(&self, start: usize, end: usize) -> Result<(Tensor, Vec<usize>)> {
        Ok((self.images.slice_leading(start, end)?, self.labels[start..end].to_vec()))
    }

    /// Per-channel mean and population std over all samples and pixels.
    pub fn channel_stats(&self) -> NormStats {
        let (c, h, w) = self.resolution();
        let hw = h * w;
        let n = self.len();
        let d = self.images.data();
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let vals = (0..n).flat_map(|i| d[(i * c + ch) * hw..][..hw].iter());
            let mu = vals.clone().sum::<f64>() / (n * hw) as f64;
            let var = vals.map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n * hw) as f64;
            mean[ch] = mu;
            std[ch] = var.sqrt().max(1e-8);
        }
        NormStats { mean, std }
    }

    /// Normalizes with `stats` and records them.
    pub fn normalize_with(mut self, stats: &NormStats) -> Result<Self> {
        let (c, h, w) = self.resolution();
        let hw = h * w;
        let data = self
            .images
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / hw) % c;
                (v - stats.mean[ch]) / stats.std[ch]
            })
            .collect();
        self.images = Tensor::new(vec![self.len(), c, h, w], data)?;
        self.norm = stats.clone();
        Ok(self)
    }
}

/// Normalizes both sets with the training set's statistics.
pub fn normalize_pair(train: Dataset, test: Dataset) -> Result<(Dataset, Dataset)> {
    let stats = train.channel_stats();
    Ok((train.normalize_with(&stats)?, test.normalize_with(&stats)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub n_train: usize,
    pub n_test: usize,
    /// Pixel noise standard deviation of the synthetic set.
    pub noise: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            n_train: 2048,
            n_test: 512,
            noise: 0.6,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("data: n_train and n_test must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("data: noise must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Loads the configured source. `dir` is required for CIFAR-10.
    pub fn load(
        &self,
        resolution: (usize, usize, usize),
        num_classes: usize,
        dir: Option<&Path>,
    ) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        match self.source {
            DataSource::Synthetic => synthetic(self, resolution, num_classes),
            DataSource::Cifar10 => {
                if resolution != (3, 32, 32) || num_classes != 10 {
                    return Err(Error::Config(
                        "cifar10 requires input_resolution [3, 32, 32] and 10 classes".into(),
                    ));
                }
                let dir = dir.ok_or_else(|| Error::Config("cifar10 source needs a dataset dir".into()))?;
                load_cifar10(dir, self.n_train, self.n_test)
            }
        }
    }
}

const TEST_STREAM: u64 = 1 << 40;
const PROTO_STREAM: u64 = u64::MAX;

/// Ten-ish classes, each a colour offset plus an oriented sinusoid with a
/// random phase, under brightness jitter and Gaussian pixel noise.
pub fn synthetic(
    cfg: &DataConfig,
    resolution: (usize, usize, usize),
    num_classes: usize,
) -> Result<(Dataset, Dataset)> {
    let (c, h, w) = resolution;
    let mut proto = stream_rng(cfg.seed, PROTO_STREAM);
    let colours: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..c).map(|_| proto.random_range(-1.0..1.0)).collect())
        .collect();
    let textures: Vec<(f64, f64)> = (0..num_classes)
        .map(|k| {
            let theta = PI * k as f64 / num_classes as f64;
            let freq = 1.0 + (k % 2) as f64;
            (theta, freq)
        })
        .collect();
    let make = |start: u64, n: usize, tag: SplitTag| -> Result<Dataset> {
        let mut data = Vec::with_capacity(n * c * h * w);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = stream_rng(cfg.seed, start + i as u64);
            let k = rng.random_range(0..num_classes);
            let phase = rng.random_range(0.0..2.0 * PI);
            let bright = rng.random_range(0.7..1.3);
            let (theta, freq) = textures[k];
            for &tint in &colours[k] {
                for y in 0..h {
                    for x in 0..w {
                        let u = (x as f64 * theta.cos() + y as f64 * theta.sin()) / w.max(h) as f64;
                        let z: f64 = StandardNormal.sample(&mut rng);
                        data.push(
                            bright * tint
                                + 0.5 * (2.0 * PI * freq * u + phase).sin()
                                + cfg.noise * z,
                        );
                    }
                }
            }
            labels.push(k);
        }
        Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, num_classes, tag)
    };
    let train = make(0, cfg.n_train, SplitTag::Train)?;
    let test = make(TEST_STREAM, cfg.n_test, SplitTag::Test)?;
    normalize_pair(train, test)
}

fn read_cifar_file(path: &Path, limit: usize, images: &mut Vec<f64>, labels: &mut Vec<usize>) -> Result<()> {
    const REC: usize = 1 + 3072;
    let bytes = fsio::read(path)?;
    if bytes.len() % REC != 0 {
        return Err(Error::Invalid(format!(
            "{}: size {} is not a multiple of {REC}",
            path.display(),
            bytes.len()
        )));
    }
    for rec in bytes.chunks_exact(REC) {
        if labels.len() >= limit {
            break;
        }
        if rec[0] > 9 {
            return Err(Error::Invalid(format!("{}: label {} > 9", path.display(), rec[0])));
        }
        labels.push(rec[0] as usize);
        images.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(())
}

/// Reads `data_batch_{1..5}.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: &Path, max_train: usize, max_test: usize) -> Result<(Dataset, Dataset)> {
    let (mut xi, mut yi) = (vec![], vec![]);
    for b in 1..=5 {
        if yi.len() >= max_train {
            break;
        }
        read_cifar_file(&dir.join(format!("data_batch_{b}.bin")), max_train, &mut xi, &mut yi)?;
    }
    let (mut xt, mut yt) = (vec![], vec![]);
    read_cifar_file(&dir.join("test_batch.bin"), max_test, &mut xt, &mut yt)?;
    let train = Dataset::new(Tensor::new(vec![yi.len(), 3, 32, 32], xi)?, yi, 10, SplitTag::Train)?;
    let test = Dataset::new(Tensor::new(vec![yt.len(), 3, 32, 32], xt)?, yt, 10, SplitTag::Test)?;
    normalize_pair(train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_normalized_and_labelled() {
        let cfg = DataConfig {
            n_train: 200,
            n_test: 50,
            ..Default::default()
        };
        let (tr, te) = synthetic(&cfg, (3, 8, 8), 10).unwrap();
        let (tr2, _) = synthetic(&cfg, (3, 8, 8), 10).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!((tr.len(), te.len()), (200, 50));
        assert!(tr.labels.iter().chain(&te.labels).all(|&l| l < 10));
        let s = tr.channel_stats();
        for ch in 0..3 {
            assert!(s.mean[ch].abs() < 1e-9);
            assert!((s.std[ch] - 1.0).abs() < 1e-9);
        }
        assert_eq!(te.norm, tr.norm);
        let (x, y) = tr.batch(&[3, 1]).unwrap();
        assert_eq!(x.shape(), &[2, 3, 8, 8]);
        assert_eq!(y, vec![tr.labels[3], tr.labels[1]]);
    }

    #[test]
    fn cifar_binary_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![0u8; 2 * 3073];
        rec[0] = 3;
        rec[3073] = 7;
        rec[3074] = 255;
        for b in 1..=5 {
            std::fs::write(dir.path().join(format!("data_batch_{b}.bin")), &rec).unwrap();
        }
        std::fs::write(dir.path().join("test_batch.bin"), &rec[..3073]).unwrap();
        let (tr, te) = load_cifar10(dir.path(), 3, 10).unwrap();
        assert_eq!(tr.labels, vec![3, 7, 3]);
        assert_eq!(te.labels, vec![3]);
        std::fs::write(dir.path().join("test_batch.bin"), &rec[..100]).unwrap();
        assert!(load_cifar10(dir.path(), 3, 10).is_err());
    }
}
