use super::{TokenSequence, EOS, PAD};
use crate::rng::{KeyedRng, Stream};

/// A padded batch. `mask[i][j]` is true for real (non-PAD) ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<Vec<u32>>,
    pub mask: Vec<Vec<bool>>,
    /// Index of each row in the source sequence list.
    pub source: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Unpadded sequences; every model consumes these, so trailing PAD
    /// never reaches a loss.
    pub fn sequences(&self) -> Vec<TokenSequence> {
        self.ids
            .iter()
            .zip(&self.mask)
            .map(|(ids, mask)| {
                let real: Vec<u32> = ids.iter().zip(mask).filter(|(_, &m)| m).map(|(&i, _)| i).collect();
                TokenSequence::from_framed(real).expect("batched sequences keep their frame")
            })
            .collect()
    }

    /// Appends `extra` PAD columns to every row.
    pub fn with_extra_padding(&self, extra: usize) -> Batch {
        let mut b = self.clone();
        for (ids, mask) in b.ids.iter_mut().zip(&mut b.mask) {
            ids.extend(std::iter::repeat_n(PAD, extra));
            mask.extend(std::iter::repeat_n(false, extra));
        }
        b
    }
}

/// Keeps BOS, the first `max_len - 2` content ids, and EOS.
pub fn truncate(seq: &TokenSequence, max_len: usize) -> TokenSequence {
    let max_len = max_len.max(2);
    if seq.ids().len() <= max_len {
        return seq.clone();
    }
    let mut ids = seq.ids()[..max_len - 1].to_vec();
    ids.push(EOS);
    TokenSequence::from_framed(ids).expect("truncation keeps the frame")
}

fn pad_batch(seqs: &[TokenSequence], rows: &[usize], max_len: usize) -> Batch {
    let truncated: Vec<TokenSequence> = rows.iter().map(|&i| truncate(&seqs[i], max_len)).collect();
    let width = truncated.iter().map(|s| s.ids().len()).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(rows.len());
    let mut mask = Vec::with_capacity(rows.len());
    for s in &truncated {
        let mut row = s.ids().to_vec();
        let mut m = vec![true; row.len()];
        row.resize(width, PAD);
        m.resize(width, false);
        ids.push(row);
        mask.push(m);
    }
    Batch {
        ids,
        mask,
        source: rows.to_vec(),
    }
}

fn shuffled(n: usize, rng: &mut KeyedRng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        order.swap(i, j);
    }
    order
}

/// Shuffles, truncates to `max_len`, and pads each batch to its longest row.
pub fn make_batches(seqs: &[TokenSequence], batch_size: usize, max_len: usize, rng: &mut KeyedRng) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let order = shuffled(seqs.len(), rng);
    order.chunks(batch_size).map(|rows| pad_batch(seqs, rows, max_len)).collect()
}

/// Random-access batch stream: batch `s` is a pure function of
/// `(seed, s)`, so a resumed run sees exactly the batches it would have
/// seen uninterrupted. Each epoch is a fresh keyed shuffle; a trailing
/// partial batch is dropped.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    seqs: Vec<TokenSequence>,
    batch_size: usize,
    max_len: usize,
    seed: u64,
    cached_epoch: Option<(u64, Vec<usize>)>,
}

impl BatchSchedule {
    pub fn new(seqs: Vec<TokenSequence>, batch_size: usize, max_len: usize, seed: u64) -> Self {
        assert!(batch_size >= 1, "batch_size must be at least 1");
        assert!(!seqs.is_empty(), "empty training set");
        Self {
            seqs,
            batch_size,
            max_len,
            seed,
            cached_epoch: None,
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        (self.seqs.len() / self.batch_size).max(1)
    }

    pub fn batch_at(&mut self, step: u64) -> Batch {
        let per_epoch = self.batches_per_epoch() as u64;
        let epoch = step / per_epoch;
        let within = (step % per_epoch) as usize;
        if self.cached_epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let key = (Stream::Shuffle.id() << 40) | epoch;
            let mut rng = KeyedRng::with_stream_id(self.seed, key);
            self.cached_epoch = Some((epoch, shuffled(self.seqs.len(), &mut rng)));
        }
        let order = &self.cached_epoch.as_ref().expect("just filled").1;
        let start = within * self.batch_size;
        let end = (start + self.batch_size).min(order.len());
        pad_batch(&self.seqs, &order[start..end], self.max_len)
    }
}
