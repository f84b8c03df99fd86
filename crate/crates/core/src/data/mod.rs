//! Datasets, transforms, wrapping, loading and the teacher-output cache.

mod cache;
mod loader;
mod transforms;

pub use cache::{CacheManifest, CacheStore};
pub use loader::{Batch, DataLoader};
pub use transforms::{
    CenterCrop, Normalize, Pipeline, RandomCrop, RandomHorizontalFlip, RandomResizedCrop, Resize, Size, ToTensor,
};

use std::collections::BTreeMap;
use std::sync::Arc;

use distill_tensor::Tensor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};

/// A CHW image. Raw images hold 0..=255 values; `scaled` is set once
/// [`ToTensor`] has mapped them to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub scaled: bool,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch {
                context: "Image::new".into(),
                expected: vec![channels, height, width],
                got: vec![data.len()],
            });
        }
        Ok(Image { channels, height, width, data, scaled: false })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), vec![self.channels, self.height, self.width])?)
    }
}

pub trait Dataset: Send + Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, index: usize) -> Result<(Image, usize)>;

    fn num_classes(&self) -> usize;

    /// Stable description used in cache fingerprints.
    fn describe(&self) -> String;
}

pub trait Transform: Send + Sync {
    fn apply(&self, img: Image, rng: &mut StdRng) -> Result<Image>;

    /// True when the output depends on the RNG.
    fn is_stochastic(&self) -> bool;

    fn describe(&self) -> String;
}

/// Extra per-sample data attached by a wrapped dataset.
#[derive(Debug, Clone)]
pub enum SuppValue {
    Index(usize),
    Indices(Vec<usize>),
    Tensor(Tensor),
}

pub trait SupplementaryProvider: Send + Sync {
    fn key(&self) -> &str;

    fn provide(&self, index: usize, dataset_len: usize, rng: &mut StdRng) -> Result<SuppValue>;
}

/// Draws `k` distinct indices different from the sample's own, e.g. as
/// negatives for contrastive objectives.
pub struct NegativeIndices {
    pub k: usize,
}

impl SupplementaryProvider for NegativeIndices {
    fn key(&self) -> &str {
        "negative_indices"
    }

    fn provide(&self, index: usize, len: usize, rng: &mut StdRng) -> Result<SuppValue> {
        if len <= self.k {
            return Err(Error::PreconditionViolation(format!("cannot draw {} negatives from {len} samples", self.k)));
        }
        let mut picked = Vec::with_capacity(self.k);
        while picked.len() < self.k {
            let j = rng.random_range(0..len);
            if j != index && !picked.contains(&j) {
                picked.push(j);
            }
        }
        Ok(SuppValue::Indices(picked))
    }
}

/// One loaded sample.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
    pub index: usize,
    pub supplementary: BTreeMap<String, SuppValue>,
}

/// Derive an independent stream from a seed and a path of integers.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

/// A dataset with its transform pipeline and optional supplementary data.
pub struct WrappedDataset {
    base: Arc<dyn Dataset>,
    pipeline: Pipeline,
    attach_index: bool,
    providers: Vec<Arc<dyn SupplementaryProvider>>,
}

impl WrappedDataset {
    pub fn new(base: Arc<dyn Dataset>, pipeline: Pipeline) -> Self {
        WrappedDataset { base, pipeline, attach_index: false, providers: Vec::new() }
    }

    pub fn with_index(mut self, attach: bool) -> Self {
        self.attach_index = attach;
        self
    }

    pub fn with_provider(mut self, p: Arc<dyn SupplementaryProvider>) -> Self {
        self.providers.push(p);
        self
    }

    pub fn base(&self) -> &Arc<dyn Dataset> {
        &self.base
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    /// Sample `index` as seen in `epoch`; a pure function of its arguments.
    pub fn get(&self, index: usize, seed: u64, epoch: usize) -> Result<Sample> {
        if index >= self.len() {
            return Err(Error::PreconditionViolation(format!(
                "index {index} out of range for dataset of {} samples",
                self.len()
            )));
        }
        let (raw, label) = self.base.get(index)?;
        let mut rng = StdRng::seed_from_u64(derive_seed(seed, &[epoch as u64, index as u64]));
        let image = self.pipeline.apply(raw, &mut rng)?;
        let mut supplementary = BTreeMap::new();
        if self.attach_index {
            supplementary.insert("sample_index".to_string(), SuppValue::Index(index));
        }
        for p in &self.providers {
            supplementary.insert(p.key().to_string(), p.provide(index, self.len(), &mut rng)?);
        }
        Ok(Sample { image, label, index, supplementary })
    }
}
