//! Desk-scale classification domains over a shared `1×16×16` input.

mod generate;
mod raw;
mod suite;

pub use generate::{generate, generate_with, Family, GenParams};
pub use raw::{decode_raw, encode_raw, load_raw, save_raw};
pub use suite::{DomainSpec, Suite, SUITE_NAMES};

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 16;

/// Labeled single-channel images stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Images `[B, 1, H, W]` and labels for the given indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.height * self.width);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let x = Tensor::new(&[indices.len(), 1, self.height, self.width], data).expect("shape matches");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The whole split as one batch.
    pub fn all(&self) -> (Tensor, Vec<usize>) {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Number of examples per class.
    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Mirrors each row of `width` pixels in place (left-right flip).
pub fn flip_horizontal(image: &mut [f32], width: usize) {
    for row in image.chunks_exact_mut(width) {
        row.reverse();
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub name: String,
    pub num_classes: usize,
    pub seed: u64,
    pub train: Split,
    pub test: Split,
}

impl DomainDataset {
    /// Writes `train.mdld` and `test.mdld` into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_raw(&self.train, self.num_classes, &dir.join("train.mdld"))?;
        save_raw(&self.test, self.num_classes, &dir.join("test.mdld"))
    }

    /// Reads a directory written by [`save_dir`](Self::save_dir).
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let (train, classes) = load_raw(&dir.join("train.mdld"))?;
        let (test, test_classes) = load_raw(&dir.join("test.mdld"))?;
        if classes != test_classes {
            return Err(Error::Format(format!(
                "train split has {classes} classes, test split has {test_classes}"
            )));
        }
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(DomainDataset { name, num_classes: classes, seed: 0, train, test })
    }
}
