use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batch::{is_content_id, Batch};
use super::vocab::{MASK, NUM_SPECIAL, PAD};

/// What happened to a position during corruption.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    /// Not selected.
    None,
    /// Selected and replaced by `[MASK]`.
    Masked,
    /// Selected and replaced by a random non-special token.
    Random,
    /// Selected and left unchanged.
    Kept,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub ratio: f64,
    pub mask_token_prob: f64,
    pub random_token_prob: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            ratio: 0.15,
            mask_token_prob: 0.8,
            random_token_prob: 0.1,
        }
    }
}

/// Corrupted batch plus everything needed to score it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub rows: usize,
    pub seq_len: usize,
    pub input_ids: Vec<usize>,
    pub original_ids: Vec<usize>,
    pub mask_flags: Vec<bool>,
    pub pad_flags: Vec<bool>,
    pub corruption: Vec<Corruption>,
    pub seq_index: Vec<usize>,
}

impl MaskedBatch {
    /// The batch with nothing selected or corrupted.
    pub fn unmasked(batch: &Batch) -> Self {
        let n = batch.ids.len();
        MaskedBatch {
            rows: batch.rows,
            seq_len: batch.seq_len,
            input_ids: batch.ids.clone(),
            original_ids: batch.ids.clone(),
            mask_flags: vec![false; n],
            pad_flags: batch.pad_flags(),
            corruption: vec![Corruption::None; n],
            seq_index: batch.seq_index.clone(),
        }
    }

    pub fn flat(&self, row: usize, pos: usize) -> usize {
        row * self.seq_len + pos
    }

    pub fn is_content(&self, flat: usize) -> bool {
        !self.pad_flags[flat] && is_content_id(self.original_ids[flat])
    }

    /// Positions in `row` that are neither padding nor `[CLS]`/`[SEP]`.
    pub fn content_positions(&self, row: usize) -> Vec<usize> {
        (0..self.seq_len)
            .filter(|&j| self.is_content(self.flat(row, j)))
            .collect()
    }

    pub fn masked_positions(&self, row: usize) -> Vec<usize> {
        (0..self.seq_len)
            .filter(|&j| self.mask_flags[self.flat(row, j)])
            .collect()
    }

    /// Flat indices of every selected position, row-major.
    pub fn masked_flat(&self) -> Vec<usize> {
        (0..self.mask_flags.len())
            .filter(|&i| self.mask_flags[i])
            .collect()
    }

    pub fn num_masked(&self) -> usize {
        self.mask_flags.iter().filter(|&&m| m).count()
    }
}

/// Number of positions selected for a sequence with `content` content tokens.
pub fn mask_count(content: usize, ratio: f64) -> usize {
    if content == 0 {
        return 0;
    }
    ((ratio * content as f64).round() as usize).clamp(1, content)
}

/// Selects `max(1, round(ratio · content))` content positions per row,
/// uniformly without replacement, and corrupts them (80/10/10 by default).
pub fn apply_dynamic_masking<R: Rng>(
    batch: &Batch,
    cfg: &MaskingConfig,
    vocab_size: usize,
    rng: &mut R,
) -> MaskedBatch {
    let mut out = MaskedBatch::unmasked(batch);
    for r in 0..batch.rows {
        let content = out.content_positions(r);
        if content.is_empty() {
            log::warn!("sequence {} has no content tokens; skipped by masking", batch.seq_index[r]);
            continue;
        }
        let k = mask_count(content.len(), cfg.ratio);
        let mut chosen = sample(rng, content.len(), k).into_vec();
        chosen.sort_unstable();
        for c in chosen {
            let flat = out.flat(r, content[c]);
            out.mask_flags[flat] = true;
            let u: f64 = rng.gen();
            if u < cfg.mask_token_prob {
                out.input_ids[flat] = MASK;
                out.corruption[flat] = Corruption::Masked;
            } else if u < cfg.mask_token_prob + cfg.random_token_prob && vocab_size > NUM_SPECIAL {
                out.input_ids[flat] = rng.gen_range(NUM_SPECIAL..vocab_size);
                out.corruption[flat] = Corruption::Random;
            } else {
                out.corruption[flat] = Corruption::Kept;
            }
        }
    }
    debug_assert!(out
        .input_ids
        .iter()
        .zip(&out.pad_flags)
        .all(|(&id, &p)| !p || id == PAD));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vocab::{CLS, SEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch_with_content(lens: &[usize]) -> Batch {
        let seqs: Vec<Vec<usize>> = lens
            .iter()
            .map(|&n| std::iter::once(CLS).chain((0..n).map(|j| 5 + j % 40)).chain([SEP]).collect())
            .collect();
        let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        Batch::from_sequences(&refs, (0..lens.len()).collect()).unwrap()
    }

    #[test]
    fn masked_count_follows_rounding_rule() {
        let b = batch_with_content(&[20, 3, 10, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = apply_dynamic_masking(&b, &MaskingConfig::default(), 50, &mut rng);
        let counts: Vec<usize> = (0..4).map(|r| m.masked_positions(r).len()).collect();
        assert_eq!(counts, vec![3, 1, 2, 1]);
    }

    #[test]
    fn specials_and_padding_are_never_selected() {
        let b = batch_with_content(&[12, 2, 7]);
        let cfg = MaskingConfig {
            ratio: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = apply_dynamic_masking(&b, &cfg, 50, &mut rng);
        for i in 0..m.mask_flags.len() {
            if m.mask_flags[i] {
                assert!(m.is_content(i));
            } else {
                assert_eq!(m.input_ids[i], m.original_ids[i]);
            }
            if [PAD, CLS, SEP].contains(&m.original_ids[i]) {
                assert!(!m.mask_flags[i]);
            }
        }
        assert_eq!(m.num_masked(), 12 + 2 + 7);
    }

    #[test]
    fn empty_content_rows_are_skipped() {
        let b = batch_with_content(&[0, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = apply_dynamic_masking(&b, &MaskingConfig::default(), 50, &mut rng);
        assert!(m.masked_positions(0).is_empty());
        assert_eq!(m.masked_positions(1).len(), 1);
    }

    #[test]
    fn original_ids_are_ground_truth() {
        let b = batch_with_content(&[30, 30]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = apply_dynamic_masking(&b, &MaskingConfig::default(), 50, &mut rng);
        assert_eq!(m.original_ids, b.ids);
    }
}
