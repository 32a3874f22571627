use rand::seq::SliceRandom;

use super::vocab::{self, PAD};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Right-padded rows of token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rows: usize,
    pub seq_len: usize,
    /// `rows × seq_len`, row-major.
    pub ids: Vec<usize>,
    /// Corpus index of the sequence in each row.
    pub seq_index: Vec<usize>,
}

impl Batch {
    pub fn from_sequences(seqs: &[&[usize]], seq_index: Vec<usize>) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Input("batch needs at least one sequence".into()));
        }
        let seq_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        if seq_len == 0 {
            return Err(Error::Input("batch contains only empty sequences".into()));
        }
        let mut ids = vec![PAD; seqs.len() * seq_len];
        for (r, s) in seqs.iter().enumerate() {
            ids[r * seq_len..r * seq_len + s.len()].copy_from_slice(s);
        }
        Ok(Batch {
            rows: seqs.len(),
            seq_len,
            ids,
            seq_index,
        })
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.seq_len..(r + 1) * self.seq_len]
    }

    pub fn pad_flags(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id == PAD).collect()
    }

    /// Number of non-special, non-pad tokens in row `r`.
    pub fn content_len(&self, r: usize) -> usize {
        self.row(r).iter().filter(|&&id| is_content_id(id)).count()
    }
}

pub(crate) fn is_content_id(id: usize) -> bool {
    !vocab::is_special(id)
}

/// Deterministic epoch-wise shuffling of a fixed sequence list.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub num_sequences: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl BatchPlan {
    pub fn new(num_sequences: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if num_sequences == 0 {
            return Err(Error::Ingestion("no sequences to batch".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(BatchPlan {
            num_sequences,
            batch_size,
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.num_sequences.div_ceil(self.batch_size)
    }

    /// Size of the smallest batch in an epoch (the final partial one, if any).
    pub fn smallest_batch(&self) -> usize {
        match self.num_sequences % self.batch_size {
            0 => self.batch_size.min(self.num_sequences),
            r => r,
        }
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.num_sequences).collect();
        order.shuffle(&mut stream(self.seed, Purpose::Shuffle, &[epoch]));
        order
    }

    /// All batches of one epoch; the final partial batch is kept.
    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        self.epoch_order(epoch)
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Sequence indices of the batch consumed at 0-based `step`.
    pub fn batch_at(&self, step: u64) -> Vec<usize> {
        let per = self.batches_per_epoch() as u64;
        let (epoch, k) = (step / per, (step % per) as usize);
        let order = self.epoch_order(epoch);
        let end = ((k + 1) * self.batch_size).min(order.len());
        order[k * self.batch_size..end].to_vec()
    }

    pub fn materialize(&self, sequences: &[Vec<usize>], step: u64) -> Result<Batch> {
        let idx = self.batch_at(step);
        let seqs: Vec<&[usize]> = idx.iter().map(|&i| sequences[i].as_slice()).collect();
        Batch::from_sequences(&seqs, idx)
    }
}

/// Shuffled, padded batches for one epoch.
pub fn make_batches(sequences: &[Vec<usize>], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    let plan = BatchPlan::new(sequences.len(), batch_size, seed)?;
    plan.epoch(epoch)
        .into_iter()
        .map(|idx| {
            let seqs: Vec<&[usize]> = idx.iter().map(|&i| sequences[i].as_slice()).collect();
            Batch::from_sequences(&seqs, idx)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vocab::{CLS, SEP};

    fn seqs(n: usize) -> Vec<Vec<usize>> {
        (0..n).map(|i| vec![CLS; 1].into_iter().chain((0..(i % 4) + 1).map(|j| 5 + j)).chain([SEP]).collect()).collect()
    }

    #[test]
    fn final_partial_batch_is_kept_and_padding_is_right_side() {
        let s = seqs(10);
        let batches = make_batches(&s, 4, 1, 0).unwrap();
        assert_eq!(batches.iter().map(|b| b.rows).collect::<Vec<_>>(), vec![4, 4, 2]);
        for b in &batches {
            for r in 0..b.rows {
                let row = b.row(r);
                let first_pad = row.iter().position(|&x| x == PAD).unwrap_or(row.len());
                assert!(row[first_pad..].iter().all(|&x| x == PAD));
                assert_eq!(&row[..first_pad], s[b.seq_index[r]].as_slice());
            }
        }
    }

    #[test]
    fn every_sequence_appears_once_per_epoch_and_epochs_differ() {
        let plan = BatchPlan::new(50, 8, 9).unwrap();
        let mut e0: Vec<usize> = plan.epoch(0).concat();
        let e1: Vec<usize> = plan.epoch(1).concat();
        assert_ne!(e0, e1);
        e0.sort_unstable();
        assert_eq!(e0, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn batch_at_matches_epoch_listing() {
        let plan = BatchPlan::new(23, 5, 4).unwrap();
        let listed: Vec<Vec<usize>> = (0..3).flat_map(|e| plan.epoch(e)).collect();
        for (step, b) in listed.iter().enumerate() {
            assert_eq!(&plan.batch_at(step as u64), b);
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let s = seqs(30);
        assert_eq!(make_batches(&s, 7, 3, 2).unwrap(), make_batches(&s, 7, 3, 2).unwrap());
    }
}
