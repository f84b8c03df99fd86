use std::collections::BTreeMap;
use std::sync::Arc;

use distill_tensor::Tensor;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use super::{derive_seed, Sample, SuppValue, WrappedDataset};
use crate::error::{Error, Result};

/// A collated mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// (N, C, H, W) f32.
    pub input: Tensor,
    pub targets: Vec<usize>,
    pub indices: Vec<usize>,
    pub supplementary: Vec<BTreeMap<String, SuppValue>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Deterministic batching over a wrapped dataset.
///
/// Shuffling depends only on (seed, epoch); per-sample randomness only on
/// (seed, epoch, index), so the worker count never changes results.
#[derive(Clone)]
pub struct DataLoader {
    dataset: Arc<WrappedDataset>,
    pub batch_size: usize,
    pub shuffle: bool,
    pub num_workers: usize,
    pub seed: u64,
}

impl DataLoader {
    pub fn new(dataset: Arc<WrappedDataset>, batch_size: usize, shuffle: bool, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidParam { name: "batch_size".into(), message: "must be positive".into() });
        }
        Ok(DataLoader { dataset, batch_size, shuffle, num_workers: 0, seed })
    }

    pub fn with_workers(mut self, n: usize) -> Self {
        self.num_workers = n;
        self
    }

    pub fn dataset(&self) -> &Arc<WrappedDataset> {
        &self.dataset
    }

    pub fn num_batches(&self) -> usize {
        self.dataset.len().div_ceil(self.batch_size)
    }

    pub fn order(&self, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.dataset.len()).collect();
        if self.shuffle {
            let mut rng = StdRng::seed_from_u64(derive_seed(self.seed, &[0x5348_5546, epoch as u64]));
            idx.shuffle(&mut rng);
        }
        idx
    }

    pub fn batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        self.order(epoch).chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }

    pub fn load(&self, indices: &[usize], epoch: usize) -> Result<Batch> {
        let samples = if self.num_workers > 1 && indices.len() > 1 {
            let per = indices.len().div_ceil(self.num_workers);
            std::thread::scope(|s| {
                let handles: Vec<_> =
                    indices.chunks(per).map(|chunk| s.spawn(move || self.fetch(chunk, epoch))).collect();
                let mut all = Vec::with_capacity(indices.len());
                for h in handles {
                    all.extend(h.join().map_err(|_| Error::Other("data worker panicked".into()))??);
                }
                Ok::<_, Error>(all)
            })?
        } else {
            self.fetch(indices, epoch)?
        };
        collate(samples)
    }

    fn fetch(&self, indices: &[usize], epoch: usize) -> Result<Vec<Sample>> {
        indices.iter().map(|&i| self.dataset.get(i, self.seed, epoch)).collect()
    }

    /// All batches of an epoch, loaded lazily.
    pub fn iter(&self, epoch: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
        self.batches(epoch).into_iter().map(move |b| self.load(&b, epoch))
    }
}

pub fn collate(samples: Vec<Sample>) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| Error::PreconditionViolation("cannot collate an empty batch".into()))?;
    let shape = first.image.shape();
    let mut data = Vec::with_capacity(samples.len() * shape.iter().product::<usize>());
    let mut targets = Vec::with_capacity(samples.len());
    let mut indices = Vec::with_capacity(samples.len());
    let mut supplementary = Vec::with_capacity(samples.len());
    for s in samples {
        if s.image.shape() != shape {
            return Err(Error::ShapeMismatch {
                context: "collate".into(),
                expected: shape.to_vec(),
                got: s.image.shape().to_vec(),
            });
        }
        data.extend_from_slice(&s.image.data);
        targets.push(s.label);
        indices.push(s.index);
        supplementary.push(s.supplementary);
    }
    let n = targets.len();
    Ok(Batch { input: Tensor::from_vec(data, vec![n, shape[0], shape[1], shape[2]])?, targets, indices, supplementary })
}
