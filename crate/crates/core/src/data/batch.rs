use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AugmentPolicy, DishRecord, ImageSource};
use crate::error::{arg_err, Result};
use crate::nn::{TokenBatch, Vectorizer};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub dish_ids: Vec<String>,
    /// `b×H×W×3`
    pub images: Tensor<f32>,
    /// Present when a vectorizer was supplied.
    pub tokens: Option<TokenBatch>,
    /// `b×1` kcal
    pub targets: Tensor<f32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.dish_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dish_ids.is_empty()
    }
}

/// Seed for epoch `epoch` of a run seeded with `seed`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    rng.next_u64()
}

/// Iterator over consecutive batches of a fixed record order.
pub struct BatchIter<'a> {
    records: &'a [DishRecord],
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    image_size: usize,
    vectorizer: Option<&'a Vectorizer>,
    augment: Option<(AugmentPolicy, ChaCha8Rng)>,
    source: &'a dyn ImageSource,
}

/// Splits `records` into batches of `batch_size` (the last may be smaller).
///
/// With `shuffle` the order is permuted by a generator seeded with `seed`;
/// augmentation draws come from an independent stream of the same seed, in
/// batch order.
#[allow(clippy::too_many_arguments)]
pub fn make_batches<'a>(
    records: &'a [DishRecord],
    batch_size: usize,
    vectorizer: Option<&'a Vectorizer>,
    image_size: usize,
    seed: u64,
    shuffle: bool,
    augment: Option<AugmentPolicy>,
    source: &'a dyn ImageSource,
) -> Result<BatchIter<'a>> {
    if batch_size == 0 {
        return Err(arg_err!("batch size must be at least 1"));
    }
    if let Some(p) = &augment {
        p.validate()?;
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let augment = augment.map(|p| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        (p, rng)
    });
    Ok(BatchIter {
        records,
        order,
        pos: 0,
        batch_size,
        image_size,
        vectorizer,
        augment,
        source,
    })
}

impl BatchIter<'_> {
    /// Number of batches still to come.
    pub fn remaining(&self) -> usize {
        (self.order.len() - self.pos).div_ceil(self.batch_size)
    }

    fn assemble(&mut self, idx: &[usize]) -> Result<Batch> {
        let s = self.image_size;
        let mut pixels = Vec::with_capacity(idx.len() * s * s * 3);
        let mut dish_ids = Vec::with_capacity(idx.len());
        let mut targets = Vec::with_capacity(idx.len());
        let mut names = Vec::with_capacity(idx.len());
        for &i in idx {
            let r = &self.records[i];
            let mut img = self.source.image(r, s)?;
            if let Some((policy, rng)) = &mut self.augment {
                img = policy.draw(rng).apply(&img)?;
            }
            pixels.extend_from_slice(img.data());
            dish_ids.push(r.dish_id.clone());
            targets.push(r.calories as f32);
            names.push(r.dish_name.as_str());
        }
        let b = idx.len();
        Ok(Batch {
            dish_ids,
            images: Tensor::new([b, s, s, 3], pixels)?,
            tokens: self.vectorizer.map(|v| v.vectorize_batch(&names)),
            targets: Tensor::new([b, 1], targets)?,
        })
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx: Vec<usize> = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(self.assemble(&idx))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.remaining();
        (n, Some(n))
    }
}
