use super::{Domain, Sample};
use crate::error::DataError;
use crate::rng::Rng;

/// What happens to the samples left over after the last full batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartialBatch {
    /// Training: batch-norm needs full batches.
    Drop,
    /// Evaluation: every sample must be scored.
    Keep,
}

/// One epoch of index batches over `samples`.
///
/// Balanced batches hold `B/2` image and `B/2` text samples; each domain is
/// shuffled independently by `rng`. Otherwise all samples are shuffled
/// together and cut into chunks of `B`.
pub fn batch_iter(
    samples: &[Sample],
    batch_size: usize,
    rng: &mut Rng,
    balanced: bool,
    partial: PartialBatch,
) -> Result<Vec<Vec<usize>>, DataError> {
    if batch_size == 0 {
        return Err(DataError::Batch("batch size must be at least 1".into()));
    }
    let mut batches = Vec::new();
    if !balanced {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch_size) {
            if chunk.len() == batch_size || partial == PartialBatch::Keep {
                batches.push(chunk.to_vec());
            }
        }
        return Ok(batches);
    }
    if batch_size % 2 != 0 {
        return Err(DataError::Batch(format!(
            "balanced batches need an even batch size, got {batch_size}"
        )));
    }
    let per = batch_size / 2;
    let (mut images, mut texts): (Vec<usize>, Vec<usize>) =
        (0..samples.len()).partition(|&i| samples[i].domain == Domain::Image);
    if partial == PartialBatch::Drop && (images.len() < per || texts.len() < per) {
        return Err(DataError::Unbalanced {
            batch: batch_size,
            per_domain: per,
            images: images.len(),
            texts: texts.len(),
        });
    }
    rng.shuffle(&mut images);
    rng.shuffle(&mut texts);
    let full = images.len().min(texts.len()) / per;
    for k in 0..full {
        let mut b = images[k * per..(k + 1) * per].to_vec();
        b.extend_from_slice(&texts[k * per..(k + 1) * per]);
        batches.push(b);
    }
    if partial == PartialBatch::Keep {
        let rest: Vec<usize> = images[full * per..]
            .iter()
            .chain(&texts[full * per..])
            .copied()
            .collect();
        batches.extend(rest.chunks(batch_size).map(<[usize]>::to_vec));
    }
    Ok(batches)
}

/// Endless sequence of training batches, addressable by step.
///
/// Epoch `e` is shuffled with `Rng::stream(seed, stream_base + e)`, so the
/// batch for any step can be reconstructed without replaying earlier ones.
#[derive(Debug, Clone)]
pub struct BatchStream {
    seed: u64,
    stream_base: u64,
    batch_size: usize,
    balanced: bool,
    per_epoch: usize,
    epoch: Option<(usize, Vec<Vec<usize>>)>,
}

impl BatchStream {
    pub fn new(
        samples: &[Sample],
        batch_size: usize,
        balanced: bool,
        seed: u64,
        stream_base: u64,
    ) -> Result<Self, DataError> {
        let first = batch_iter(
            samples,
            batch_size,
            &mut Rng::stream(seed, stream_base),
            balanced,
            PartialBatch::Drop,
        )?;
        if first.is_empty() {
            return Err(DataError::Batch(format!(
                "{} samples cannot fill one batch of {batch_size}",
                samples.len()
            )));
        }
        Ok(Self {
            seed,
            stream_base,
            batch_size,
            balanced,
            per_epoch: first.len(),
            epoch: Some((0, first)),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.per_epoch
    }

    /// Sample indices of the batch used at `step`.
    pub fn batch(&mut self, samples: &[Sample], step: usize) -> Result<&[usize], DataError> {
        let epoch = step / self.per_epoch;
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let batches = batch_iter(
                samples,
                self.batch_size,
                &mut Rng::stream(self.seed, self.stream_base + epoch as u64),
                self.balanced,
                PartialBatch::Drop,
            )?;
            self.epoch = Some((epoch, batches));
        }
        let (_, batches) = self.epoch.as_ref().expect("epoch loaded");
        Ok(&batches[step % self.per_epoch])
    }
}
