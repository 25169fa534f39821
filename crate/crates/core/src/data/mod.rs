//! Manifest ingestion, image decoding, stratified splitting and the
//! synthetic region-blob dataset.

mod image;
mod manifest;
mod split;
mod synth;

use std::path::PathBuf;

pub use self::image::{load_image, resize_bilinear, write_pgm};
pub use manifest::{RunManifest, Sample, DEFAULT_CLASSES};
pub use split::{split_stratified, SplitAssignment, DEFAULT_TEST_FRACTION};
pub use synth::{
    generate_synthetic, region_means, synth_image, synthetic_class_names, SynthOptions,
};

use crate::parallel::{self, Parallelism};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("cannot decode {}: {msg}", path.display())]
    Decode { path: PathBuf, msg: String },
    #[error("{0}")]
    Contract(String),
}

/// Decoded images with their labels.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<T: Real> Dataset<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Loads the manifest entries at `indices`, decoding files in parallel.
    pub fn load(
        manifest: &RunManifest,
        indices: &[usize],
        size: usize,
        channels: usize,
        mode: Parallelism,
    ) -> Result<Self, DataError> {
        let decoded = parallel::map(mode, indices, |&i| {
            let s = &manifest.samples[i];
            load_image::<T>(&manifest.resolve(s), size, channels).map(|img| (img, s.label))
        });
        let mut images = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for item in decoded {
            let (img, label) = item?;
            images.push(img);
            labels.push(label);
        }
        Ok(Dataset {
            images,
            labels,
            num_classes: manifest.num_classes(),
        })
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}
