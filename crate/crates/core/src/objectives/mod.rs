//! Training losses: masked-LM cross-entropy, the token-alignment contrastive
//! loss, token prediction, and the variant-dependent combinations of them.

mod bias;
mod config;
mod contrastive;

pub use bias::{global_bias, GlobalBias};
pub use config::{AnchorEmbeddingSource, ObjectiveConfig, Variant};
pub use contrastive::{
    draw_samples, infonce_loss, negative_pool, sample_negatives, sample_positive, score,
    sequence_mean_weights, tc_loss, tc_loss_with_samples, ContrastiveSample, SampleKey, TcOutput,
};

use crate::autodiff::{Tape, Var};
use crate::corpus::MaskedBatch;
use crate::encoder::{EncoderOutput, ParamVars};
use crate::error::{Error, Result};

/// Mean cross-entropy of the original token at the given flat positions.
pub fn cross_entropy_at(tape: &mut Tape, output: &EncoderOutput, batch: &MaskedBatch, flat: &[usize]) -> Result<Var> {
    if flat.is_empty() {
        return Err(Error::Contract("cross-entropy over an empty position set".into()));
    }
    let logits = output.logits_at(tape, flat)?;
    let logp = tape.log_softmax(logits)?;
    let targets: Vec<usize> = flat.iter().map(|&i| batch.original_ids[i]).collect();
    let picked = tape.pick(logp, &targets)?;
    let n = flat.len() as f64;
    tape.weighted_sum(picked, vec![-1.0 / n; flat.len()])
}

/// Masked-LM loss pooled over every masked position of the batch.
pub fn mlm_loss(tape: &mut Tape, output: &EncoderOutput, batch: &MaskedBatch) -> Result<Var> {
    let flat = batch.masked_flat();
    if flat.is_empty() {
        return Err(Error::Contract("mlm_loss needs at least one masked position".into()));
    }
    cross_entropy_at(tape, output, batch, &flat)
}

fn content_flat(batch: &MaskedBatch, include_masked: bool) -> Vec<usize> {
    (0..batch.original_ids.len())
        .filter(|&i| batch.is_content(i) && (include_masked || !batch.mask_flags[i]))
        .collect()
}

/// Token prediction over every content position, masked or not.
pub fn tp_loss(tape: &mut Tape, output: &EncoderOutput, batch: &MaskedBatch) -> Result<Var> {
    cross_entropy_at(tape, output, batch, &content_flat(batch, true))
}

/// Fraction of masked positions whose arg-max logit is the original token.
pub fn masked_accuracy(tape: &mut Tape, output: &EncoderOutput, batch: &MaskedBatch) -> Result<f64> {
    let flat = batch.masked_flat();
    if flat.is_empty() {
        return Ok(f64::NAN);
    }
    let logits = output.logits_at(tape, &flat)?;
    let v = tape.value(logits);
    let hits = flat
        .iter()
        .enumerate()
        .filter(|(i, &f)| {
            let row = v.row(*i);
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (k, &x)| if x > b.1 { (k, x) } else { b });
            best.0 == batch.original_ids[f]
        })
        .count();
    Ok(hits as f64 / flat.len() as f64)
}

/// The combined objective and its parts.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Var,
    pub mlm: Var,
    pub tc: Option<TcOutput>,
    pub tp: Option<Var>,
}

impl LossBreakdown {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let v = |x: Var| tape.value(x).data()[0];
        LossValues {
            total: v(self.total),
            mlm: v(self.mlm),
            tc: self.tc.as_ref().map(|t| v(t.loss)),
            tp: self.tp.map(v),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub mlm: f64,
    pub tc: Option<f64>,
    pub tp: Option<f64>,
}

/// Builds the variant's objective from one forward pass.
pub fn total_loss(
    tape: &mut Tape,
    output: &EncoderOutput,
    batch: &MaskedBatch,
    params: &ParamVars,
    cfg: &ObjectiveConfig,
    key: SampleKey,
) -> Result<LossBreakdown> {
    let mlm = mlm_loss(tape, output, batch)?;
    match cfg.variant {
        Variant::MlmOnly => Ok(LossBreakdown {
            total: mlm,
            mlm,
            tc: None,
            tp: None,
        }),
        Variant::Taco | Variant::ConcentratedTaco => {
            let tc = tc_loss(tape, output.hidden, params.token_embeddings(), batch, cfg, key)?;
            let weighted = if cfg.tc_weight == 1.0 {
                tc.loss
            } else {
                tape.scale(tc.loss, cfg.tc_weight)?
            };
            let total = tape.add(weighted, mlm)?;
            Ok(LossBreakdown {
                total,
                mlm,
                tc: Some(tc),
                tp: None,
            })
        }
        Variant::ExtendedMlm => {
            let unmasked = content_flat(batch, false);
            let tp = cross_entropy_at(tape, output, batch, &unmasked)?;
            let total = tape.add(mlm, tp)?;
            Ok(LossBreakdown {
                total,
                mlm,
                tc: None,
                tp: Some(tp),
            })
        }
    }
}
