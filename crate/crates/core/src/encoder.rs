//! Post-layer-norm Transformer encoder with learned positions and a tied or
//! separate vocabulary projection.

use std::path::PathBuf;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::corpus::MaskedBatch;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub tie_embeddings: bool,
    pub freeze_embeddings: bool,
    pub init_embeddings_from: Option<PathBuf>,
    pub init_range: f64,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// 2 layers, d = 64, 4 heads: the size everything is tested at.
    pub fn desk() -> Self {
        EncoderConfig {
            num_layers: 2,
            hidden_size: 64,
            num_heads: 4,
            ffn_size: 256,
            vocab_size: 2000,
            max_positions: 128,
            dropout: 0.1,
            tie_embeddings: true,
            freeze_embeddings: false,
            init_embeddings_from: None,
            init_range: 0.02,
            layer_norm_eps: 1e-12,
        }
    }

    pub fn small() -> Self {
        EncoderConfig {
            num_layers: 4,
            hidden_size: 512,
            num_heads: 8,
            ffn_size: 2048,
            vocab_size: 30522,
            max_positions: 512,
            ..Self::desk()
        }
    }

    pub fn base() -> Self {
        EncoderConfig {
            num_layers: 12,
            hidden_size: 768,
            num_heads: 12,
            ffn_size: 3072,
            vocab_size: 30522,
            max_positions: 512,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "small" => Some(Self::small()),
            "base" => Some(Self::base()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("ffn_size", self.ffn_size),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.init_range >= 0.0 && self.init_range.is_finite()) {
            return Err(Error::Config(format!("init_range {} is invalid", self.init_range)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }
}

const PER_LAYER: usize = 16;

// offsets within a layer block
const Q_W: usize = 0;
const Q_B: usize = 1;
const K_W: usize = 2;
const K_B: usize = 3;
const V_W: usize = 4;
const V_B: usize = 5;
const O_W: usize = 6;
const O_B: usize = 7;
const LN1_G: usize = 8;
const LN1_B: usize = 9;
const FF_IN_W: usize = 10;
const FF_IN_B: usize = 11;
const FF_OUT_W: usize = 12;
const FF_OUT_B: usize = 13;
const LN2_G: usize = 14;
const LN2_B: usize = 15;

pub const TOKEN_EMBEDDINGS: &str = "embeddings.token";

/// Parameter kinds, used for initialisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Weight,
    Bias,
    Gain,
}

fn layout(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>, Kind)> {
    let (d, f, v) = (cfg.hidden_size, cfg.ffn_size, cfg.vocab_size);
    let mut out = vec![
        (TOKEN_EMBEDDINGS.to_string(), vec![v, d], Kind::Weight),
        ("embeddings.position".to_string(), vec![cfg.max_positions, d], Kind::Weight),
        ("embeddings.ln.gamma".to_string(), vec![d], Kind::Gain),
        ("embeddings.ln.beta".to_string(), vec![d], Kind::Bias),
    ];
    for l in 0..cfg.num_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        out.extend([
            (p("attn.query.weight"), vec![d, d], Kind::Weight),
            (p("attn.query.bias"), vec![d], Kind::Bias),
            (p("attn.key.weight"), vec![d, d], Kind::Weight),
            (p("attn.key.bias"), vec![d], Kind::Bias),
            (p("attn.value.weight"), vec![d, d], Kind::Weight),
            (p("attn.value.bias"), vec![d], Kind::Bias),
            (p("attn.output.weight"), vec![d, d], Kind::Weight),
            (p("attn.output.bias"), vec![d], Kind::Bias),
            (p("attn.ln.gamma"), vec![d], Kind::Gain),
            (p("attn.ln.beta"), vec![d], Kind::Bias),
            (p("ffn.in.weight"), vec![d, f], Kind::Weight),
            (p("ffn.in.bias"), vec![f], Kind::Bias),
            (p("ffn.out.weight"), vec![f, d], Kind::Weight),
            (p("ffn.out.bias"), vec![d], Kind::Bias),
            (p("ffn.ln.gamma"), vec![d], Kind::Gain),
            (p("ffn.ln.beta"), vec![d], Kind::Bias),
        ]);
    }
    if !cfg.tie_embeddings {
        out.push(("output.weight".to_string(), vec![v, d], Kind::Weight));
    }
    out.push(("output.bias".to_string(), vec![v], Kind::Bias));
    out
}

fn truncated_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// All trainable tensors of one encoder, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    frozen: Vec<bool>,
    num_layers: usize,
    tied: bool,
}

impl Parameters {
    /// Truncated-normal weights (±2σ, σ = `init_range`), unit gains, zero
    /// biases. Embeddings are optionally loaded from a checkpoint.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let spec = layout(cfg);
        let mut names = Vec::with_capacity(spec.len());
        let mut tensors = Vec::with_capacity(spec.len());
        for (i, (name, shape, kind)) in spec.into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = match kind {
                Kind::Bias => vec![0.0; n],
                Kind::Gain => vec![1.0; n],
                Kind::Weight => {
                    let mut rng = stream(seed, Purpose::Init, &[i as u64]);
                    (0..n).map(|_| truncated_normal(&mut rng, cfg.init_range)).collect()
                }
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        let mut frozen = vec![false; names.len()];
        frozen[0] = cfg.freeze_embeddings;
        let mut params = Parameters {
            names,
            tensors,
            frozen,
            num_layers: cfg.num_layers,
            tied: cfg.tie_embeddings,
        };
        if let Some(path) = &cfg.init_embeddings_from {
            let ckpt = crate::train::checkpoint::Checkpoint::load(path)?;
            let table = ckpt.tensor(TOKEN_EMBEDDINGS).ok_or_else(|| {
                Error::Checkpoint(format!("{} has no `{TOKEN_EMBEDDINGS}` tensor", path.display()))
            })?;
            params.set_token_embeddings(table.clone())?;
        }
        Ok(params)
    }

    pub fn set_token_embeddings(&mut self, table: Tensor) -> Result<()> {
        if table.shape() != self.tensors[0].shape() {
            return Err(Error::ShapeMismatch {
                name: TOKEN_EMBEDDINGS.into(),
                expected: self.tensors[0].shape().to_vec(),
                found: table.shape().to_vec(),
            });
        }
        self.tensors[0] = table;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        self.frozen[i]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn token_embeddings(&self) -> &Tensor {
        &self.tensors[0]
    }

    pub fn vocab_size(&self) -> usize {
        self.tensors[0].shape()[0]
    }

    pub fn hidden_size(&self) -> usize {
        self.tensors[0].shape()[1]
    }

    /// Copies every tensor onto `tape`; frozen tensors (or all tensors when
    /// `trainable` is false) do not require gradients.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .zip(&self.frozen)
            .map(|(t, &f)| tape.leaf(t.clone(), trainable && !f))
            .collect();
        ParamVars {
            vars,
            num_layers: self.num_layers,
            tied: self.tied,
        }
    }

    /// Row `token_id` of the token embedding table.
    pub fn embedding_of(&self, token_id: usize) -> Result<&[f64]> {
        let v = self.vocab_size();
        if token_id >= v {
            return Err(Error::Input(format!(
                "token id {token_id} out of range for vocabulary of {v}"
            )));
        }
        Ok(self.tensors[0].row(token_id))
    }
}

/// Tape handles for a registered [`Parameters`] set.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub vars: Vec<Var>,
    num_layers: usize,
    tied: bool,
}

impl ParamVars {
    /// Builds handles from a raw list in [`Parameters`] order.
    pub fn from_vars(cfg: &EncoderConfig, vars: Vec<Var>) -> Result<Self> {
        let expected = layout(cfg).len();
        if vars.len() != expected {
            return Err(Error::Input(format!(
                "expected {expected} parameter handles, got {}",
                vars.len()
            )));
        }
        Ok(ParamVars {
            vars,
            num_layers: cfg.num_layers,
            tied: cfg.tie_embeddings,
        })
    }

    pub fn token_embeddings(&self) -> Var {
        self.vars[0]
    }

    fn position(&self) -> Var {
        self.vars[1]
    }

    fn layer(&self, l: usize, offset: usize) -> Var {
        self.vars[4 + l * PER_LAYER + offset]
    }

    /// Output projection `[V×d]`: the token table when tied.
    pub fn output_weight(&self) -> Var {
        if self.tied {
            self.vars[0]
        } else {
            self.vars[4 + self.num_layers * PER_LAYER]
        }
    }

    pub fn output_bias(&self) -> Var {
        *self.vars.last().expect("non-empty parameter list")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Last-layer states for every position plus the handles needed to score
/// them against the vocabulary.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// `[rows·seq_len × d]`.
    pub hidden: Var,
    pub rows: usize,
    pub seq_len: usize,
    pub output_weight: Var,
    pub output_bias: Var,
}

impl EncoderOutput {
    /// Vocabulary logits for every position, `[rows·seq_len × V]`.
    pub fn logits(&self, tape: &mut Tape) -> Result<Var> {
        let z = tape.matmul_nt(self.hidden, self.output_weight)?;
        tape.add_bias(z, self.output_bias)
    }

    /// Logits for the selected flat positions only.
    pub fn logits_at(&self, tape: &mut Tape, flat: &[usize]) -> Result<Var> {
        let h = tape.gather(self.hidden, flat)?;
        let z = tape.matmul_nt(h, self.output_weight)?;
        tape.add_bias(z, self.output_bias)
    }
}

/// Runs the encoder on `batch.input_ids`.
pub fn forward<R: Rng>(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    params: &ParamVars,
    batch: &MaskedBatch,
    mode: Mode,
    rng: &mut R,
) -> Result<EncoderOutput> {
    let (rows, len) = (batch.rows, batch.seq_len);
    if len > cfg.max_positions {
        return Err(Error::Input(format!(
            "sequence length {len} exceeds max_positions {}",
            cfg.max_positions
        )));
    }
    if let Some(pos) = batch.input_ids.iter().position(|&id| id >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token id {} at row {} position {} out of range for vocabulary of {}",
            batch.input_ids[pos],
            pos / len,
            pos % len,
            cfg.vocab_size
        )));
    }
    let (d, heads) = (cfg.hidden_size, cfg.num_heads);
    let dh = cfg.head_dim();
    let train = mode == Mode::Train;
    let p = cfg.dropout;

    let tok = tape.gather(params.token_embeddings(), &batch.input_ids)?;
    let positions: Vec<usize> = (0..rows).flat_map(|_| 0..len).collect();
    let pos = tape.gather(params.position(), &positions)?;
    let x = tape.add(tok, pos)?;
    let x = tape.layer_norm(x, params.vars[2], params.vars[3], cfg.layer_norm_eps)?;
    let mut x = tape.dropout(x, p, train, rng)?;

    let keep: Vec<bool> = batch.pad_flags.iter().map(|&pad| !pad).collect();
    let scale = 1.0 / (dh as f64).sqrt();
    for l in 0..cfg.num_layers {
        let w = |o| params.layer(l, o);
        let split = |tape: &mut Tape, v: Var| -> Result<Var> {
            let v = tape.reshape(v, &[rows, len, heads, dh])?;
            tape.swap_middle(v)
        };
        let q = tape.matmul(x, w(Q_W))?;
        let q = tape.add_bias(q, w(Q_B))?;
        let q = split(tape, q)?;
        let k = tape.matmul(x, w(K_W))?;
        let k = tape.add_bias(k, w(K_B))?;
        let k = split(tape, k)?;
        let v = tape.matmul(x, w(V_W))?;
        let v = tape.add_bias(v, w(V_B))?;
        let v = split(tape, v)?;

        let scores = tape.batch_matmul_nt(q, k)?;
        let scores = tape.scale(scores, scale)?;
        let probs = tape.masked_softmax(scores, &keep, heads * len)?;
        let probs = tape.dropout(probs, p, train, rng)?;
        let ctx = tape.batch_matmul(probs, v)?;
        let ctx = tape.swap_middle(ctx)?;
        let ctx = tape.reshape(ctx, &[rows * len, d])?;
        let attn = tape.matmul(ctx, w(O_W))?;
        let attn = tape.add_bias(attn, w(O_B))?;
        let attn = tape.dropout(attn, p, train, rng)?;
        let res = tape.add(x, attn)?;
        let x1 = tape.layer_norm(res, w(LN1_G), w(LN1_B), cfg.layer_norm_eps)?;

        let f = tape.matmul(x1, w(FF_IN_W))?;
        let f = tape.add_bias(f, w(FF_IN_B))?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, w(FF_OUT_W))?;
        let f = tape.add_bias(f, w(FF_OUT_B))?;
        let f = tape.dropout(f, p, train, rng)?;
        let res = tape.add(x1, f)?;
        x = tape.layer_norm(res, w(LN2_G), w(LN2_B), cfg.layer_norm_eps)?;
    }

    Ok(EncoderOutput {
        hidden: x,
        rows,
        seq_len: len,
        output_weight: params.output_weight(),
        output_bias: params.output_bias(),
    })
}

/// Eval-mode forward without gradients; returns the hidden states.
pub fn encode_eval(cfg: &EncoderConfig, params: &Parameters, batch: &MaskedBatch) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let mut unused = stream(0, Purpose::Dropout, &[]);
    let out = forward(&mut tape, cfg, &vars, batch, Mode::Eval, &mut unused)?;
    Ok(tape.value(out.hidden).clone())
}
