use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{permutation, stream_rng, Stream};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Labelled images in `[0, 1]`, shape `[N, C, H, H]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
    mean: Vec<f32>,
    std: Vec<f32>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        let [n, _, h, w] = images.dims4("dataset")?;
        if h != w {
            return Err(Error::shape("dataset", format!("images must be square, got {h}x{w}")));
        }
        if labels.len() != n {
            return Err(Error::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        if let Some(&v) = images.data().iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        let (mean, std) = channel_stats(&images);
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
            mean,
            std,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    /// Per-channel pixel mean and standard deviation.
    pub fn normalization(&self) -> (&[f32], &[f32]) {
        (&self.mean, &self.std)
    }

    /// Images and labels at `indices`, converted to `T`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let images = self.images.gather_rows(indices)?.cast();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }

    /// Class-balanced subset: the first `k` samples of each class.
    ///
    /// With a seed, "first" refers to a seeded permutation of the set; the
    /// chosen samples keep their original relative order either way.
    pub fn balanced_subset(&self, k: usize, seed: Option<u64>) -> Result<Self> {
        let order = match seed {
            Some(s) => {
                let mut rng: ChaCha8Rng = stream_rng(s, Stream::Shuffle, u64::MAX);
                permutation(&mut rng, self.len())
            }
            None => (0..self.len()).collect(),
        };
        let mut taken = vec![0usize; self.num_classes];
        let mut picked: Vec<usize> = order
            .into_iter()
            .filter(|&i| {
                let c = self.labels[i];
                let keep = taken[c] < k;
                taken[c] += keep as usize;
                keep
            })
            .collect();
        picked.sort_unstable();
        let (images, labels) = self.batch::<f32>(&picked)?;
        Self::new(images, labels, self.num_classes, self.split)
    }

    /// Order-preserving batches of `indices`.
    pub fn chunks(indices: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
        indices.chunks(batch_size.max(1))
    }
}

fn channel_stats(images: &Tensor<f32>) -> (Vec<f32>, Vec<f32>) {
    let s = images.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let count = (n * plane) as f64;
    let mut mean = vec![0.0f32; c];
    let mut std = vec![1.0f32; c];
    if count == 0.0 {
        return (mean, std);
    }
    for ch in 0..c {
        let values = || (0..n).flat_map(move |i| images.data()[(i * c + ch) * plane..][..plane].iter());
        let mu = values().map(|&v| v as f64).sum::<f64>() / count;
        let var = values().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / count;
        mean[ch] = mu as f32;
        std[ch] = (var.sqrt() as f32).max(1e-6);
    }
    (mean, std)
}
