//! Token-alignment contrastive loss: InfoNCE over global biases, with
//! positives from a window in the same sequence and negatives from the other
//! sequences of the batch.

use rand::seq::index::sample;
use rand::Rng;

use super::config::{AnchorEmbeddingSource, ObjectiveConfig, Variant};
use crate::autodiff::{Tape, Var, COSINE_EPS};
use crate::corpus::MaskedBatch;
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::{stream, Purpose};

/// One anchor with its positive and negatives, as (row, position) pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastiveSample {
    pub row: usize,
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<(usize, usize)>,
}

/// Identifies the random streams of one loss evaluation. Each anchor draws
/// from its own stream keyed by `(step, row, position)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleKey {
    pub seed: u64,
    pub step: u64,
}

impl SampleKey {
    fn anchor_rng(&self, row: usize, pos: usize) -> crate::rng::StreamRng {
        stream(self.seed, Purpose::Contrastive, &[self.step, row as u64, pos as u64])
    }

    fn row_rng(&self, row: usize) -> crate::rng::StreamRng {
        stream(self.seed, Purpose::Contrastive, &[self.step, row as u64, u64::MAX])
    }
}

/// Uniform draw among `content` positions within distance `1..=window` of
/// `anchor`. `None` when no such position exists.
pub fn sample_positive<R: Rng>(anchor: usize, content: &[usize], window: usize, rng: &mut R) -> Option<usize> {
    let candidates: Vec<usize> = content
        .iter()
        .copied()
        .filter(|&p| p != anchor && p.abs_diff(anchor) <= window)
        .collect();
    if candidates.is_empty() {
        None
    } else {
        Some(candidates[rng.gen_range(0..candidates.len())])
    }
}

/// Every content position of every row other than `anchor_row`.
pub fn negative_pool(anchor_row: usize, batch: &MaskedBatch) -> Vec<(usize, usize)> {
    (0..batch.rows)
        .filter(|&r| r != anchor_row)
        .flat_map(|r| batch.content_positions(r).into_iter().map(move |p| (r, p)))
        .collect()
}

/// `k` draws from the pool: without replacement when it holds at least `k`
/// candidates, with replacement otherwise.
pub fn sample_negatives<R: Rng>(
    anchor_row: usize,
    batch: &MaskedBatch,
    k: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let pool = negative_pool(anchor_row, batch);
    draw_negatives(&pool, k, rng)
}

fn draw_negatives<R: Rng>(pool: &[(usize, usize)], k: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if pool.is_empty() {
        return Err(Error::Config(
            "contrastive loss needs content tokens in at least two sequences per batch".into(),
        ));
    }
    if pool.len() >= k {
        Ok(sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect())
    } else {
        Ok((0..k).map(|_| pool[rng.gen_range(0..pool.len())]).collect())
    }
}

/// `−log(exp(s⁺) / (exp(s⁺) + Σ exp(s⁻ₖ)))`, evaluated without overflow.
pub fn infonce_loss(s_pos: f64, s_negs: &[f64]) -> f64 {
    let max = s_negs.iter().copied().fold(s_pos, f64::max);
    let mut skipped_max = false;
    let mut rest = 0.0;
    for &s in std::iter::once(&s_pos).chain(s_negs) {
        if !skipped_max && s == max {
            skipped_max = true;
        } else {
            rest += (s - max).exp();
        }
    }
    (max - s_pos) + rest.ln_1p()
}

/// `cos(g_x, g_c) / τ`.
pub fn score(g_x: &[f64], g_c: &[f64], temperature: f64) -> f64 {
    use crate::autodiff::kernels::{dot, norm};
    dot(g_x, g_c) / (norm(g_x).max(COSINE_EPS) * norm(g_c).max(COSINE_EPS)) / temperature
}

/// Draws positives and negatives for every eligible anchor of the batch.
pub fn draw_samples(batch: &MaskedBatch, cfg: &ObjectiveConfig, key: SampleKey) -> Result<Vec<ContrastiveSample>> {
    let nonempty_rows = (0..batch.rows)
        .filter(|&r| !batch.content_positions(r).is_empty())
        .count();
    if batch.rows < 2 || nonempty_rows < 2 {
        return Err(Error::Config(
            "contrastive loss needs at least two sequences with content per batch".into(),
        ));
    }
    let per_row = parallel::map_range(batch.rows, |row| -> Result<Vec<ContrastiveSample>> {
        let content = batch.content_positions(row);
        let anchors = match cfg.variant {
            Variant::ConcentratedTaco => batch.masked_positions(row),
            _ => content.clone(),
        };
        let pool = negative_pool(row, batch);
        let shared = if cfg.shared_negatives {
            Some(draw_negatives(&pool, cfg.negatives, &mut key.row_rng(row))?)
        } else {
            None
        };
        let mut out = Vec::with_capacity(anchors.len());
        for &j in &anchors {
            let mut rng = key.anchor_rng(row, j);
            let Some(positive) = sample_positive(j, &content, cfg.window, &mut rng) else {
                continue;
            };
            let negatives = match &shared {
                Some(n) => n.clone(),
                None => draw_negatives(&pool, cfg.negatives, &mut rng)?,
            };
            out.push(ContrastiveSample {
                row,
                anchor: j,
                positive,
                negatives,
            });
        }
        Ok(out)
    });
    let samples: Vec<ContrastiveSample> = per_row
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    if samples.is_empty() {
        return Err(Error::Contract("no eligible contrastive anchors in batch".into()));
    }
    Ok(samples)
}

/// Weights that turn a per-anchor loss vector into the sequence-first mean:
/// average within each row, then over the rows that have anchors.
pub fn sequence_mean_weights(samples: &[ContrastiveSample], rows: usize) -> Vec<f64> {
    let mut per_row = vec![0usize; rows];
    for s in samples {
        per_row[s.row] += 1;
    }
    let active = per_row.iter().filter(|&&n| n > 0).count() as f64;
    samples
        .iter()
        .map(|s| 1.0 / (active * per_row[s.row] as f64))
        .collect()
}

/// Tape handles and samples behind one contrastive loss value.
#[derive(Debug, Clone)]
pub struct TcOutput {
    pub loss: Var,
    /// `[rows·seq_len × d]` hidden states.
    pub hidden: Var,
    /// Static embeddings gathered per position, `[rows·seq_len × d]`.
    pub static_embeddings: Var,
    /// `hidden − static_embeddings`.
    pub global_bias: Var,
    /// Per-anchor InfoNCE values, `[anchors]`.
    pub per_anchor: Var,
    pub samples: Vec<ContrastiveSample>,
}

impl TcOutput {
    /// Flat indices of every anchor, positive and negative, in sample order.
    pub fn participants(&self, seq_len: usize) -> Vec<usize> {
        self.samples
            .iter()
            .flat_map(|s| {
                [s.row * seq_len + s.anchor, s.row * seq_len + s.positive]
                    .into_iter()
                    .chain(s.negatives.iter().map(move |&(r, p)| r * seq_len + p))
            })
            .collect()
    }
}

/// Contrastive loss on `hidden` (`[rows·seq_len × d]`) against the token
/// table `embeddings` (`[V × d]`).
pub fn tc_loss(
    tape: &mut Tape,
    hidden: Var,
    embeddings: Var,
    batch: &MaskedBatch,
    cfg: &ObjectiveConfig,
    key: SampleKey,
) -> Result<TcOutput> {
    let samples = draw_samples(batch, cfg, key)?;
    tc_loss_with_samples(tape, hidden, embeddings, batch, cfg, samples)
}

/// Contrastive loss over a fixed set of samples.
pub fn tc_loss_with_samples(
    tape: &mut Tape,
    hidden: Var,
    embeddings: Var,
    batch: &MaskedBatch,
    cfg: &ObjectiveConfig,
    samples: Vec<ContrastiveSample>,
) -> Result<TcOutput> {
    if samples.is_empty() {
        return Err(Error::Contract("no eligible contrastive anchors in batch".into()));
    }
    let ids = match cfg.anchor_embedding_source {
        AnchorEmbeddingSource::OriginalToken => &batch.original_ids,
        AnchorEmbeddingSource::InputToken => &batch.input_ids,
    };
    let e = tape.gather(embeddings, ids)?;
    if tape.shape(hidden) != tape.shape(e) {
        return Err(Error::Dimension {
            op: "tc_loss",
            lhs: tape.shape(hidden).to_vec(),
            rhs: tape.shape(e).to_vec(),
        });
    }
    let g = tape.sub(hidden, e)?;

    let width = cfg.negatives + 1;
    let len = batch.seq_len;
    let mut anchor_idx = Vec::with_capacity(samples.len() * width);
    let mut partner_idx = Vec::with_capacity(samples.len() * width);
    for s in &samples {
        if s.negatives.len() != cfg.negatives {
            return Err(Error::Contract(format!(
                "sample has {} negatives, expected {}",
                s.negatives.len(),
                cfg.negatives
            )));
        }
        let a = s.row * len + s.anchor;
        anchor_idx.extend(std::iter::repeat(a).take(width));
        partner_idx.push(s.row * len + s.positive);
        partner_idx.extend(s.negatives.iter().map(|&(r, p)| r * len + p));
    }
    let ga = tape.gather(g, &anchor_idx)?;
    let gc = tape.gather(g, &partner_idx)?;
    let cos = tape.cosine_rows(ga, gc, COSINE_EPS)?;
    let scores = tape.scale(cos, 1.0 / cfg.temperature)?;
    let scores = tape.reshape(scores, &[samples.len(), width])?;
    let logp = tape.log_softmax(scores)?;
    let pos = tape.pick(logp, &vec![0; samples.len()])?;
    let per_anchor = tape.scale(pos, -1.0)?;
    let weights = sequence_mean_weights(&samples, batch.rows);
    let loss = tape.weighted_sum(per_anchor, weights)?;
    Ok(TcOutput {
        loss,
        hidden,
        static_embeddings: e,
        global_bias: g,
        per_anchor,
        samples,
    })
}
