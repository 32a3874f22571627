//! Representation probes: intra- versus inter-context similarity of
//! last-layer states under five measurements, the contextual score, and
//! cosine similarity of static embeddings for word pairs.

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::kernels::{dot, norm};
use crate::autodiff::COSINE_EPS;
use crate::corpus::{is_special, Batch, MaskedBatch, Vocabulary, PAD};
use crate::encoder::{encode_eval, EncoderConfig, Parameters};
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::{stream, Purpose};

/// The five measurements, in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measurement {
    L1,
    L2,
    L10,
    Cosine,
    Dot,
}

impl Measurement {
    pub const ALL: [Measurement; 5] = [
        Measurement::L1,
        Measurement::L2,
        Measurement::L10,
        Measurement::Cosine,
        Measurement::Dot,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Measurement::L1 => "L1",
            Measurement::L2 => "L2",
            Measurement::L10 => "L10",
            Measurement::Cosine => "cosine",
            Measurement::Dot => "dot-production",
        }
    }

    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Measurement::L1 => minkowski(a, b, 1),
            Measurement::L2 => minkowski(a, b, 2),
            Measurement::L10 => minkowski(a, b, 10),
            Measurement::Cosine => dot(a, b) / (norm(a).max(COSINE_EPS) * norm(b).max(COSINE_EPS)),
            Measurement::Dot => dot(a, b),
        }
    }
}

/// `(Σ|aᵢ − bᵢ|^p)^(1/p)`.
pub fn minkowski(a: &[f64], b: &[f64], p: i32) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs().powi(p)).sum();
    match p {
        1 => s,
        2 => s.sqrt(),
        _ => s.powf(1.0 / p as f64),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementStats {
    pub intra_mean: f64,
    pub inter_mean: f64,
    /// `intra_mean / inter_mean`; NaN when `inter_mean` is 0.
    pub ratio: f64,
}

impl MeasurementStats {
    fn new(intra_mean: f64, inter_mean: f64) -> Self {
        let ratio = if inter_mean == 0.0 {
            f64::NAN
        } else {
            intra_mean / inter_mean
        };
        MeasurementStats {
            intra_mean,
            inter_mean,
            ratio,
        }
    }
}

/// Intra/inter statistics for every measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityReport {
    pub l1: MeasurementStats,
    pub l2: MeasurementStats,
    pub l10: MeasurementStats,
    pub cosine: MeasurementStats,
    pub dot: MeasurementStats,
    /// Cosine intra mean minus cosine inter mean.
    pub contextual_score: f64,
    pub sample_count: usize,
}

impl SimilarityReport {
    pub fn get(&self, m: Measurement) -> &MeasurementStats {
        match m {
            Measurement::L1 => &self.l1,
            Measurement::L2 => &self.l2,
            Measurement::L10 => &self.l10,
            Measurement::Cosine => &self.cosine,
            Measurement::Dot => &self.dot,
        }
    }

    /// `(label, stats)` rows in reporting order.
    pub fn rows(&self) -> [(&'static str, MeasurementStats); 5] {
        Measurement::ALL.map(|m| (m.label(), *self.get(m)))
    }

    /// Tab-separated table: one row per measurement.
    pub fn to_table(&self) -> String {
        let mut s = String::from("measurement\tintra\tinter\tratio\n");
        for (label, st) in self.rows() {
            s.push_str(&format!("{label}\t{}\t{}\t{}\n", st.intra_mean, st.inter_mean, st.ratio));
        }
        s.push_str(&format!("contextual_score\t{}\n", self.contextual_score));
        s.push_str(&format!("samples\t{}\n", self.sample_count));
        s
    }
}

/// A sampled token with its same-sequence and other-sequence partners.
/// Positions index content tokens only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeTriple {
    pub seq: usize,
    pub pos: usize,
    pub intra_pos: usize,
    pub inter_seq: usize,
    pub inter_pos: usize,
}

/// Samples up to `limit` tokens (without replacement) from sequences of
/// the given content lengths, each with one intra and one inter partner.
/// Only sequences with at least two tokens contribute anchors.
pub fn sample_triples(lengths: &[usize], limit: usize, seed: u64) -> Result<Vec<ProbeTriple>> {
    let nonempty: Vec<usize> = (0..lengths.len()).filter(|&s| lengths[s] > 0).collect();
    if nonempty.len() < 2 {
        return Err(Error::Input("probing needs at least two sequences with content".into()));
    }
    let tokens: Vec<(usize, usize)> = (0..lengths.len())
        .filter(|&s| lengths[s] >= 2)
        .flat_map(|s| (0..lengths[s]).map(move |p| (s, p)))
        .collect();
    if tokens.is_empty() {
        return Err(Error::Input("probing needs a sequence with at least two tokens".into()));
    }
    let mut rng = stream(seed, Purpose::Probe, &[0]);
    let mut chosen = if tokens.len() > limit {
        sample(&mut rng, tokens.len(), limit).into_vec()
    } else {
        (0..tokens.len()).collect()
    };
    chosen.sort_unstable();
    Ok(chosen
        .into_iter()
        .map(|t| {
            let (seq, pos) = tokens[t];
            let mut intra_pos = rng.gen_range(0..lengths[seq] - 1);
            if intra_pos >= pos {
                intra_pos += 1;
            }
            let mut k = rng.gen_range(0..nonempty.len() - 1);
            if nonempty[k] >= seq {
                k += 1;
            }
            let inter_seq = nonempty[k];
            let inter_pos = rng.gen_range(0..lengths[inter_seq]);
            ProbeTriple {
                seq,
                pos,
                intra_pos,
                inter_seq,
                inter_pos,
            }
        })
        .collect())
}

/// Report over hand-supplied states: `states[seq][pos]` is the vector of
/// the `pos`-th content token of sequence `seq`.
pub fn report_from_states(states: &[Vec<Vec<f64>>], limit: usize, seed: u64) -> Result<SimilarityReport> {
    let lengths: Vec<usize> = states.iter().map(Vec::len).collect();
    let triples = sample_triples(&lengths, limit, seed)?;
    Ok(report_from_triples(states, &triples))
}

fn report_from_triples(states: &[Vec<Vec<f64>>], triples: &[ProbeTriple]) -> SimilarityReport {
    let n = triples.len() as f64;
    let stats = Measurement::ALL.map(|m| {
        let (mut intra, mut inter) = (0.0, 0.0);
        for t in triples {
            let x = &states[t.seq][t.pos];
            intra += m.eval(x, &states[t.seq][t.intra_pos]);
            inter += m.eval(x, &states[t.inter_seq][t.inter_pos]);
        }
        MeasurementStats::new(intra / n, inter / n)
    });
    let [l1, l2, l10, cosine, dot] = stats;
    SimilarityReport {
        l1,
        l2,
        l10,
        cosine,
        dot,
        contextual_score: cosine.intra_mean - cosine.inter_mean,
        sample_count: triples.len(),
    }
}

/// Sequences encoded together per eval forward.
const PROBE_CHUNK: usize = 16;

/// Last-layer eval-mode states of every content token, per sequence.
/// Inputs are not masked.
pub fn content_states(cfg: &EncoderConfig, params: &Parameters, sequences: &[Vec<usize>]) -> Result<Vec<Vec<Vec<f64>>>> {
    let chunks: Vec<&[Vec<usize>]> = sequences.chunks(PROBE_CHUNK).collect();
    let per_chunk = parallel::map_range(chunks.len(), |c| -> Result<Vec<Vec<Vec<f64>>>> {
        let seqs: Vec<&[usize]> = chunks[c].iter().map(Vec::as_slice).collect();
        let batch = Batch::from_sequences(&seqs, (0..seqs.len()).collect())?;
        let hidden = encode_eval(cfg, params, &MaskedBatch::unmasked(&batch))?;
        Ok((0..batch.rows)
            .map(|r| {
                batch
                    .row(r)
                    .iter()
                    .enumerate()
                    .filter(|(_, &id)| id != PAD && !is_special(id))
                    .map(|(p, _)| hidden.row(r * batch.seq_len + p).to_vec())
                    .collect()
            })
            .collect())
    });
    let mut out = Vec::with_capacity(sequences.len());
    for chunk in per_chunk {
        out.extend(chunk?);
    }
    Ok(out)
}

/// Intra/inter statistics of the model's last-layer states on unmasked
/// probe sequences, over at most `limit` sampled tokens.
pub fn contextual_stats(
    cfg: &EncoderConfig,
    params: &Parameters,
    sequences: &[Vec<usize>],
    limit: usize,
    seed: u64,
) -> Result<SimilarityReport> {
    if sequences.len() < 2 {
        return Err(Error::Input(format!(
            "probing needs at least two sequences, got {}",
            sequences.len()
        )));
    }
    let states = content_states(cfg, params, sequences)?;
    report_from_states(&states, limit, seed)
}

/// Word pairs resolved against a vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WordPairSet {
    pub pairs: Vec<(String, String, usize, usize)>,
    /// Pairs with at least one word missing from the vocabulary.
    pub skipped: Vec<(String, String)>,
}

impl WordPairSet {
    pub fn resolve(vocab: &Vocabulary, raw: &[(String, String)]) -> Self {
        let mut set = WordPairSet::default();
        for (a, b) in raw {
            match (vocab.id(a), vocab.id(b)) {
                (Some(i), Some(j)) => set.pairs.push((a.clone(), b.clone(), i, j)),
                _ => set.skipped.push((a.clone(), b.clone())),
            }
        }
        if !set.skipped.is_empty() {
            log::warn!("{} word pair(s) not in the vocabulary were skipped", set.skipped.len());
        }
        set
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSimilarity {
    pub per_pair: Vec<(String, String, f64)>,
    pub mean: f64,
    pub skipped: Vec<(String, String)>,
}

/// Cosine between static embeddings of each resolved pair.
pub fn embedding_similarity(params: &Parameters, pairs: &WordPairSet) -> Result<EmbeddingSimilarity> {
    if pairs.pairs.is_empty() {
        return Err(Error::Input("no word pair could be resolved against the vocabulary".into()));
    }
    let per_pair = pairs
        .pairs
        .iter()
        .map(|(a, b, i, j)| {
            let c = Measurement::Cosine.eval(params.embedding_of(*i)?, params.embedding_of(*j)?);
            Ok((a.clone(), b.clone(), c))
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = per_pair.iter().map(|p| p.2).sum::<f64>() / per_pair.len() as f64;
    Ok(EmbeddingSimilarity {
        per_pair,
        mean,
        skipped: pairs.skipped.clone(),
    })
}

/// When longitudinal probes run: every `every` steps (never when 0), plus
/// step 0 and the final step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeSchedule {
    pub every: u64,
    pub total: u64,
}

impl ProbeSchedule {
    pub fn is_due(&self, step: u64) -> bool {
        self.every > 0 && (step % self.every == 0 || step == self.total)
    }

    pub fn steps(&self) -> Vec<u64> {
        (0..=self.total).filter(|&s| self.is_due(s)).collect()
    }
}

/// Everything one scheduled probe produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub report: SimilarityReport,
    pub embeddings: Option<EmbeddingSimilarity>,
}

/// Held-out probe data plus the sampling seed; runs read-only against a
/// parameter set.
#[derive(Debug, Clone)]
pub struct Prober {
    pub sequences: Vec<Vec<usize>>,
    pub pairs: Option<WordPairSet>,
    pub limit: usize,
    pub seed: u64,
}

impl Prober {
    pub fn run(&self, cfg: &EncoderConfig, params: &Parameters) -> Result<ProbeResult> {
        let report = contextual_stats(cfg, params, &self.sequences, self.limit, self.seed)?;
        let embeddings = match &self.pairs {
            Some(p) if !p.pairs.is_empty() => Some(embedding_similarity(params, p)?),
            _ => None,
        };
        Ok(ProbeResult { report, embeddings })
    }
}
