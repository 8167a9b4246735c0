//! Byte-level tokenization, corpus splitting and deterministic batching.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::numerics::IGNORE_INDEX;

/// Byte vocabulary: one id per byte value, no specials.
pub const VOCAB: usize = 256;

pub fn tokenize(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| u32::from(b)).collect()
}

/// Inverse of [`tokenize`]. Ids above 255 are not byte ids and are rejected.
pub fn decode(ids: &[u32]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&i| u8::try_from(i).map_err(|_| invalid("decode", alloc::format!("id {i} is not a byte"))))
        .collect()
}

/// Raw byte stream with a train/eval split; eval is the tail.
#[derive(Clone, Debug)]
pub struct Corpus {
    bytes: Vec<u8>,
    train_end: usize,
}

impl Corpus {
    /// Holds out the final `eval_fraction` of the bytes for evaluation.
    pub fn new(bytes: Vec<u8>, eval_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&eval_fraction) {
            return Err(invalid("corpus", alloc::format!("eval fraction {eval_fraction} not in [0, 1)")));
        }
        let eval_len = num_traits::Float::round(bytes.len() as f64 * eval_fraction) as usize;
        let train_end = bytes.len() - eval_len.min(bytes.len());
        Ok(Self { bytes, train_end })
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Byte offset where the eval split starts.
    pub fn split_offset(&self) -> usize {
        self.train_end
    }

    pub fn train(&self) -> &[u8] {
        &self.bytes[..self.train_end]
    }

    pub fn eval(&self) -> &[u8] {
        &self.bytes[self.train_end..]
    }
}

/// Order-0 entropy of the byte distribution of `data`, in nats.
pub fn byte_entropy(data: &[u8]) -> f64 {
    let mut counts = [0usize; VOCAB];
    for &b in data {
        counts[b as usize] += 1;
    }
    let n = data.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * num_traits::Float::ln(p)
        })
        .sum()
}

/// `[batch, seq_len]` grid of input ids and next-byte targets.
///
/// The last target of a window is the byte after it, or [`IGNORE_INDEX`]
/// when the window ends the stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub seq_len: usize,
    pub input_ids: Vec<u32>,
    pub targets: Vec<u32>,
}

impl Batch {
    pub fn row(&self, b: usize) -> &[u32] {
        &self.input_ids[b * self.seq_len..(b + 1) * self.seq_len]
    }

    pub fn target_row(&self, b: usize) -> &[u32] {
        &self.targets[b * self.seq_len..(b + 1) * self.seq_len]
    }

    /// Builds a batch from whole windows of `data` starting at `starts`.
    pub fn from_windows(data: &[u8], seq_len: usize, starts: &[usize]) -> Self {
        let mut input_ids = Vec::with_capacity(starts.len() * seq_len);
        let mut targets = Vec::with_capacity(starts.len() * seq_len);
        for &s in starts {
            input_ids.extend(data[s..s + seq_len].iter().map(|&b| u32::from(b)));
            targets.extend(data[s + 1..s + seq_len].iter().map(|&b| u32::from(b)));
            targets.push(data.get(s + seq_len).map_or(IGNORE_INDEX, |&b| u32::from(b)));
        }
        Self { batch: starts.len(), seq_len, input_ids, targets }
    }
}

/// Start offsets of the contiguous non-overlapping windows of `data`.
pub fn window_starts(data_len: usize, seq_len: usize) -> Vec<usize> {
    (0..data_len / seq_len).map(|w| w * seq_len).collect()
}

/// Endless stream of batches over shuffled non-overlapping windows.
///
/// Each epoch visits every window exactly once in a seed-determined order;
/// the final batch of an epoch may be short.
pub struct BatchIter<'a> {
    data: &'a [u8],
    seq_len: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

pub fn batch_iter(data: &[u8], seq_len: usize, batch: usize, seed: u64) -> Result<BatchIter<'_>> {
    if seq_len < 2 {
        return Err(invalid("batch_iter", "seq_len must be at least 2"));
    }
    if batch == 0 {
        return Err(invalid("batch_iter", "batch must be positive"));
    }
    if data.len() < seq_len {
        return Err(Error::CorpusTooShort { len: data.len(), seq_len });
    }
    let mut it = BatchIter { data, seq_len, batch, seed, epoch: 0, order: Vec::new(), pos: 0 };
    it.shuffle();
    Ok(it)
}

impl BatchIter<'_> {
    fn shuffle(&mut self) {
        self.order = window_starts(self.data.len(), self.seq_len);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn windows_per_epoch(&self) -> usize {
        self.order.len()
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            self.epoch += 1;
            self.shuffle();
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let starts = &self.order[self.pos..end];
        self.pos = end;
        Some(Batch::from_windows(self.data, self.seq_len, starts))
    }
}
