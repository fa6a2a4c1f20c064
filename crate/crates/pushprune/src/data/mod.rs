//! Dataset ingestion (IDX container files, seeded synthetic generators),
//! split management and checkpoint persistence.

mod checkpoint;
mod idx;
mod synthetic;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use idx::{load_idx, load_mnist};
pub use synthetic::{gaussian_blobs, planted_channel_images, striped_textures, synthetic};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One split: images in [n, C, H, W] scaled to [0, 1], integer labels.
#[derive(Clone, Debug)]
pub struct Split {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Materialize a batch from sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let sample: usize = self.images.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * sample);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * sample..(i + 1) * sample]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        (Tensor::from_vec(shape, data).expect("batch shape"), labels)
    }

    /// Seeded class-balanced subset of (up to) `size` samples, fixed order.
    pub fn balanced_subset(&self, size: usize, seed: u64) -> Split {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, &l) in self.labels.iter().enumerate() {
            by_class.entry(l).or_default().push(i);
        }
        let classes = by_class.len().max(1);
        let per_class = (size / classes).max(1);
        let mut picked = Vec::new();
        for (_, mut idxs) in by_class {
            idxs.shuffle(&mut rng);
            picked.extend(idxs.into_iter().take(per_class));
        }
        picked.sort_unstable();
        let (images, labels) = self.batch(&picked);
        Split { images, labels }
    }

    fn check(&self, classes: usize) -> Result<()> {
        if self.images.shape()[0] != self.labels.len() {
            return Err(Error::Contract(format!(
                "{} images but {} labels",
                self.images.shape()[0],
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(())
    }
}

/// Named train/val/test splits over disjoint samples.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub classes: usize,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        self.train.check(self.classes)?;
        self.val.check(self.classes)?;
        self.test.check(self.classes)
    }

    /// Sample shape [C, H, W].
    pub fn sample_shape(&self) -> Vec<usize> {
        self.train.images.shape()[1..].to_vec()
    }
}
