//! End-to-end finite-difference check of the training losses on a small
//! encoder.

use rand::Rng;

use crate::autodiff::{gradcheck, GradcheckOptions, GradcheckReport, Tape, Var};
use crate::corpus::{apply_dynamic_masking, Batch, MaskedBatch, MaskingConfig, CLS, NUM_SPECIAL, PAD, SEP};
use crate::encoder::{forward, EncoderConfig, Mode, ParamVars, Parameters};
use crate::error::{Error, Result};
use crate::objectives::{mlm_loss, tc_loss, total_loss, ObjectiveConfig, SampleKey, Variant};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mlm,
    Tc,
    Taco,
}

impl LossKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mlm" => Some(LossKind::Mlm),
            "tc" => Some(LossKind::Tc),
            "taco" => Some(LossKind::Taco),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LossKind::Mlm => "mlm",
            LossKind::Tc => "tc",
            LossKind::Taco => "taco",
        }
    }
}

/// Random content sequences of varying length, masked once.
pub fn toy_batch(rows: usize, seq_len: usize, vocab: usize, seed: u64) -> Result<MaskedBatch> {
    if seq_len < 4 || vocab <= NUM_SPECIAL {
        return Err(Error::Input("toy batch needs seq_len ≥ 4 and non-special vocabulary".into()));
    }
    let mut rng = stream(seed, Purpose::Synthetic, &[0]);
    let seqs: Vec<Vec<usize>> = (0..rows)
        .map(|r| {
            // the first row always fills the length so the batch is seq_len wide
            let len = if r == 0 { seq_len } else { rng.gen_range(4..=seq_len) };
            let mut s = vec![CLS];
            s.extend((0..len - 2).map(|_| rng.gen_range(NUM_SPECIAL..vocab)));
            s.push(SEP);
            s
        })
        .collect();
    let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    let batch = Batch::from_sequences(&refs, (0..rows).collect())?;
    debug_assert!(batch.ids.iter().filter(|&&i| i == PAD).count() < rows * seq_len);
    Ok(apply_dynamic_masking(
        &batch,
        &MaskingConfig::default(),
        vocab,
        &mut stream(seed, Purpose::Masking, &[0]),
    ))
}

/// A small encoder, a batch and an objective configuration to check.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub encoder: EncoderConfig,
    pub objective: ObjectiveConfig,
    pub params: Parameters,
    pub batch: MaskedBatch,
    pub seed: u64,
}

impl ToyModel {
    /// 2 layers, d = 64, vocabulary 50, batch 4 × 12, dropout active with a
    /// fixed mask stream.
    pub fn standard(seed: u64) -> Result<Self> {
        let encoder = EncoderConfig {
            num_layers: 2,
            hidden_size: 64,
            num_heads: 4,
            ffn_size: 256,
            vocab_size: 50,
            max_positions: 16,
            ..EncoderConfig::desk()
        };
        Ok(ToyModel {
            params: Parameters::init(&encoder, seed)?,
            batch: toy_batch(4, 12, encoder.vocab_size, seed)?,
            encoder,
            objective: ObjectiveConfig {
                negatives: 10,
                ..ObjectiveConfig::default()
            },
            seed,
        })
    }

    /// The chosen loss as a function of every parameter tensor.
    pub fn loss(&self, tape: &mut Tape, vars: &[Var], kind: LossKind) -> Result<Var> {
        let pv = ParamVars::from_vars(&self.encoder, vars.to_vec())?;
        let mut dropout_rng = stream(self.seed, Purpose::Dropout, &[0]);
        let out = forward(tape, &self.encoder, &pv, &self.batch, Mode::Train, &mut dropout_rng)?;
        let key = SampleKey {
            seed: self.seed,
            step: 0,
        };
        match kind {
            LossKind::Mlm => mlm_loss(tape, &out, &self.batch),
            LossKind::Tc => Ok(tc_loss(tape, out.hidden, pv.token_embeddings(), &self.batch, &self.objective, key)?.loss),
            LossKind::Taco => {
                let cfg = ObjectiveConfig {
                    variant: Variant::Taco,
                    ..self.objective.clone()
                };
                Ok(total_loss(tape, &out, &self.batch, &pv, &cfg, key)?.total)
            }
        }
    }
}

/// Gradient check of one loss over (a sample of) every parameter element.
pub fn model_gradcheck(model: &ToyModel, kind: LossKind, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    gradcheck(
        |tape: &mut Tape, vars: &[Var]| model.loss(tape, vars, kind),
        model.params.tensors(),
        opts,
    )
}
