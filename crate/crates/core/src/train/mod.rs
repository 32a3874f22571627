//! Optimisation loop, checkpoints, metrics and run comparison.

pub mod checkpoint;
mod config;
mod metrics;
mod modelcheck;
mod optim;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub use checkpoint::{Checkpoint, RngState};
pub use config::TrainConfig;
pub use metrics::{
    embedding_lines, join_metrics, read_metrics, CsvSink, MetricsRow, EMBEDDING_HEADER, METRICS_HEADER,
};
pub use modelcheck::{model_gradcheck, toy_batch, LossKind, ToyModel};
pub use optim::{clip_grad_norm, global_norm, lr_at, AdamW, AdamWConfig};

use crate::autodiff::{Tape, Tensor};
use crate::corpus::{apply_dynamic_masking, encode_all, read_lines, read_pairs, BatchPlan, Vocabulary};
use crate::encoder::{forward, Mode, Parameters};
use crate::error::{Error, Result};
use crate::objectives::{masked_accuracy, total_loss, LossValues, SampleKey};
use crate::probes::{ProbeResult, ProbeSchedule, Prober, WordPairSet};
use crate::rng::{stream, Purpose};

/// Vocabulary plus encoded training and probe sequences.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub vocab: Vocabulary,
    pub train: Vec<Vec<usize>>,
    pub probe: Vec<Vec<usize>>,
    pub pairs: Option<WordPairSet>,
}

impl TrainData {
    /// Encodes in-memory text. The vocabulary is built from `train_lines`
    /// (capped at the encoder's `vocab_size`) unless one is supplied. Probe
    /// text defaults to the training text.
    pub fn from_lines(
        cfg: &TrainConfig,
        train_lines: &[String],
        probe_lines: Option<&[String]>,
        pairs: Option<&[(String, String)]>,
        vocab: Option<Vocabulary>,
    ) -> Result<Self> {
        if train_lines.is_empty() {
            return Err(Error::Ingestion("training corpus is empty".into()));
        }
        let vocab = match vocab {
            Some(v) => v,
            None => Vocabulary::from_lines(
                train_lines.iter().map(String::as_str),
                cfg.encoder.vocab_size,
                cfg.vocab_min_count,
            )?,
        };
        let train = encode_all(&vocab, train_lines, cfg.max_seq_len);
        let probe_src = probe_lines.unwrap_or(train_lines);
        let probe_src = &probe_src[..probe_src.len().min(cfg.probe_sequences)];
        let probe = encode_all(&vocab, probe_src, cfg.max_seq_len);
        let pairs = pairs.map(|p| WordPairSet::resolve(&vocab, p));
        Ok(TrainData {
            vocab,
            train,
            probe,
            pairs,
        })
    }

    /// Reads the corpus, optional vocabulary, probe corpus and pair file
    /// named in the configuration.
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        let corpus = cfg
            .corpus
            .as_ref()
            .ok_or_else(|| Error::Config("no corpus configured".into()))?;
        let lines = read_lines(corpus)?;
        let probe = cfg.probe_corpus.as_deref().map(read_lines).transpose()?;
        let pairs = cfg.pairs.as_deref().map(read_pairs).transpose()?;
        let vocab = cfg.vocab.as_deref().map(Vocabulary::load).transpose()?;
        Self::from_lines(cfg, &lines, probe.as_deref(), pairs.as_deref(), vocab)
    }
}

/// Scalars produced by one optimiser step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub losses: LossValues,
    pub lr: f64,
    pub grad_norm: f64,
    pub masked_acc: f64,
}

const PARAM_PREFIX: &str = "param.";
const MOMENT1_PREFIX: &str = "adam.m.";
const MOMENT2_PREFIX: &str = "adam.v.";

/// One model replica and its optimiser, advancing one batch per step.
#[derive(Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    data: TrainData,
    plan: BatchPlan,
    params: Parameters,
    opt: AdamW,
    step: u64,
    prober: Option<Prober>,
    started: Instant,
}

impl Trainer {
    /// Validates everything that can be checked before step 0. The
    /// encoder's vocabulary size is set to the vocabulary's.
    pub fn new(mut cfg: TrainConfig, data: TrainData) -> Result<Self> {
        cfg.encoder.vocab_size = data.vocab.len();
        cfg.validate()?;
        if data.train.is_empty() {
            return Err(Error::Ingestion("no training sequences".into()));
        }
        let plan = BatchPlan::new(data.train.len(), cfg.batch_size, cfg.seed)?;
        if cfg.objective.variant.uses_contrastive() && plan.smallest_batch() < 2 {
            return Err(Error::Config(format!(
                "{} sequences in batches of {} leave a single-sequence batch; the contrastive loss needs ≥ 2",
                data.train.len(),
                cfg.batch_size
            )));
        }
        let prober = if cfg.probe_every > 0 {
            if data.probe.len() < 2 {
                return Err(Error::Config("probing needs at least two probe sequences".into()));
            }
            Some(Prober {
                sequences: data.probe.clone(),
                pairs: data.pairs.clone(),
                limit: cfg.probe_samples,
                seed: cfg.probe_seed,
            })
        } else {
            None
        };
        let params = Parameters::init(&cfg.encoder, cfg.seed)?;
        let opt = AdamW::new(cfg.adamw(), &params);
        Ok(Trainer {
            cfg,
            data,
            plan,
            params,
            opt,
            step: 0,
            prober,
            started: Instant::now(),
        })
    }

    /// A trainer positioned at the checkpoint's step with its parameters and
    /// moments.
    pub fn resume(cfg: TrainConfig, data: TrainData, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg, data)?;
        t.restore(ckpt)?;
        Ok(t)
    }

    fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let fetch = |name: String, like: &Tensor| -> Result<Tensor> {
            let t = ckpt
                .tensor(&name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no tensor `{name}`")))?;
            if t.shape() != like.shape() {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: like.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            Ok(t.clone())
        };
        if ckpt.rng.seed != self.cfg.seed {
            return Err(Error::Config(format!(
                "checkpoint was written with seed {}, configuration has {}",
                ckpt.rng.seed, self.cfg.seed
            )));
        }
        let names = self.params.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let t = fetch(format!("{PARAM_PREFIX}{name}"), &self.params.tensors()[i])?;
            self.params.tensors_mut()[i] = t;
            if let (Some(m), Some(v)) = (&self.opt.m[i], &self.opt.v[i]) {
                let m = fetch(format!("{MOMENT1_PREFIX}{name}"), m)?;
                let v = fetch(format!("{MOMENT2_PREFIX}{name}"), v)?;
                self.opt.m[i] = Some(m);
                self.opt.v[i] = Some(v);
            }
        }
        self.step = ckpt.step;
        self.opt.t = ckpt.step;
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(
            self.cfg.to_json(),
            self.step,
            RngState {
                seed: self.cfg.seed,
                next_step: self.step,
            },
        );
        for (i, name) in self.params.names().iter().enumerate() {
            c.push(format!("{PARAM_PREFIX}{name}"), self.params.tensors()[i].clone())?;
        }
        for (i, name) in self.params.names().iter().enumerate() {
            if let (Some(m), Some(v)) = (&self.opt.m[i], &self.opt.v[i]) {
                c.push(format!("{MOMENT1_PREFIX}{name}"), m.clone())?;
                c.push(format!("{MOMENT2_PREFIX}{name}"), v.clone())?;
            }
        }
        // Bare parameter names make the token table loadable by
        // `init_embeddings_from` without knowing the prefix.
        c.push(crate::encoder::TOKEN_EMBEDDINGS, self.params.token_embeddings().clone())?;
        Ok(c)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn data(&self) -> &TrainData {
        &self.data
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    /// Completed optimiser steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn schedule(&self) -> ProbeSchedule {
        ProbeSchedule {
            every: self.cfg.probe_every,
            total: self.cfg.total_steps,
        }
    }

    /// Runs the probes against the current parameters.
    pub fn probe(&self) -> Result<Option<ProbeResult>> {
        self.prober
            .as_ref()
            .map(|p| p.run(&self.cfg.encoder, &self.params))
            .transpose()
    }

    /// Forward, combined loss, backward, clipping and one AdamW update on
    /// the next batch.
    pub fn train_step(&mut self) -> Result<StepOutcome> {
        let cfg = &self.cfg;
        let step = self.step;
        let batch = self.plan.materialize(&self.data.train, step)?;
        let mut mask_rng = stream(cfg.seed, Purpose::Masking, &[step]);
        let batch = apply_dynamic_masking(&batch, &cfg.masking, cfg.encoder.vocab_size, &mut mask_rng);

        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, true);
        let mut dropout_rng = stream(cfg.seed, Purpose::Dropout, &[step]);
        let out = forward(&mut tape, &cfg.encoder, &vars, &batch, Mode::Train, &mut dropout_rng)?;
        let key = SampleKey { seed: cfg.seed, step };
        let loss = total_loss(&mut tape, &out, &batch, &vars, &cfg.objective, key)?;
        let losses = loss.values(&tape);
        if !losses.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {} at step {}", losses.total, step + 1)));
        }
        tape.backward(loss.total)?;
        let mut grads: Vec<Option<Tensor>> = vars
            .vars
            .iter()
            .enumerate()
            .map(|(i, &v)| if self.params.is_frozen(i) { None } else { tape.grad(v) })
            .collect();
        let masked_acc = masked_accuracy(&mut tape, &out, &batch)?;
        drop(tape);

        let (grad_norm, _) = clip_grad_norm(&mut grads, cfg.max_grad_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient norm at step {}", step + 1)));
        }
        let lr = lr_at(step + 1, cfg.lr, cfg.warmup_steps, cfg.total_steps);
        self.opt.step(&mut self.params, &grads, lr)?;
        self.step += 1;
        Ok(StepOutcome {
            losses,
            lr,
            grad_norm,
            masked_acc,
        })
    }

    fn elapsed(&self) -> Option<u64> {
        self.cfg
            .log_elapsed
            .then(|| self.started.elapsed().as_millis() as u64)
    }

    fn probe_row(&self, row: &mut MetricsRow, sinks: &mut Sinks) -> Result<()> {
        if let Some(result) = self.probe()? {
            row.set_probe(&result.report);
            if let (Some(sim), Some(sink)) = (&result.embeddings, sinks.embeddings.as_mut()) {
                for line in embedding_lines(row.step, sim) {
                    sink.write_line(&line)?;
                }
            }
        }
        Ok(())
    }

    fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
        dir.join(format!("step-{step:06}.taco"))
    }

    /// Trains until `total_steps`, returning every metrics row emitted.
    pub fn run(&mut self) -> Result<Vec<MetricsRow>> {
        self.run_until(self.cfg.total_steps)
    }

    /// Trains until `end` completed steps (capped at `total_steps`). A fresh
    /// run starts with a step-0 probe row. With an output directory, rows
    /// are appended to `metrics.csv` and checkpoints written there.
    pub fn run_until(&mut self, end: u64) -> Result<Vec<MetricsRow>> {
        let end = end.min(self.cfg.total_steps);
        let mut sinks = Sinks::open(self.cfg.output_dir.as_deref(), self.step == 0)?;
        let schedule = self.schedule();
        let mut rows = Vec::new();
        if self.step == 0 && schedule.is_due(0) {
            let mut row = MetricsRow::default();
            self.probe_row(&mut row, &mut sinks)?;
            row.elapsed_ms = self.elapsed();
            sinks.emit(&row)?;
            rows.push(row);
        }
        while self.step < end {
            let o = self.train_step()?;
            let mut row = MetricsRow {
                step: self.step,
                loss_total: Some(o.losses.total),
                loss_mlm: Some(o.losses.mlm),
                loss_tc: o.losses.tc,
                loss_tp: o.losses.tp,
                lr: Some(o.lr),
                grad_norm: Some(o.grad_norm),
                masked_acc: Some(o.masked_acc),
                ..Default::default()
            };
            if schedule.is_due(self.step) {
                self.probe_row(&mut row, &mut sinks)?;
            }
            row.elapsed_ms = self.elapsed();
            sinks.emit(&row)?;
            rows.push(row);
            if let Some(dir) = &self.cfg.output_dir {
                let every = self.cfg.checkpoint_every;
                if (every > 0 && self.step % every == 0) || self.step == self.cfg.total_steps {
                    self.checkpoint()?.save(&Self::checkpoint_path(dir, self.step))?;
                }
                if self.step == self.cfg.total_steps {
                    self.checkpoint()?.save(&dir.join("final.taco"))?;
                }
            }
            if self.step % 100 == 0 {
                log::info!(
                    "step {} loss {:.4} (mlm {:.4}) lr {:.2e}",
                    self.step,
                    o.losses.total,
                    o.losses.mlm,
                    o.lr
                );
            }
        }
        Ok(rows)
    }
}

struct Sinks {
    metrics: Option<CsvSink>,
    embeddings: Option<CsvSink>,
}

impl Sinks {
    fn open(dir: Option<&Path>, fresh: bool) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Sinks {
                metrics: None,
                embeddings: None,
            });
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str, header: &str| {
            let path = dir.join(name);
            if fresh {
                CsvSink::create(&path, header)
            } else {
                CsvSink::append(&path, header)
            }
        };
        Ok(Sinks {
            metrics: Some(open("metrics.csv", METRICS_HEADER)?),
            embeddings: Some(open("embedding_similarity.csv", EMBEDDING_HEADER)?),
        })
    }

    fn emit(&mut self, row: &MetricsRow) -> Result<()> {
        match self.metrics.as_mut() {
            Some(s) => s.write_line(&row.to_csv()),
            None => Ok(()),
        }
    }
}

/// Configuration snapshot and parameters stored in a checkpoint.
pub fn load_parameters(ckpt: &Checkpoint) -> Result<(TrainConfig, Parameters)> {
    let mut cfg: TrainConfig = serde_json::from_value(ckpt.config.clone())
        .map_err(|e| Error::Checkpoint(format!("invalid configuration snapshot: {e}")))?;
    // the tensors come from the checkpoint itself
    cfg.encoder.init_embeddings_from = None;
    let mut params = Parameters::init(&cfg.encoder, cfg.seed)?;
    let names = params.names().to_vec();
    for (i, name) in names.iter().enumerate() {
        let key = format!("{PARAM_PREFIX}{name}");
        let t = ckpt
            .tensor(&key)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no tensor `{key}`")))?;
        if t.shape() != params.tensors()[i].shape() {
            return Err(Error::ShapeMismatch {
                name: key,
                expected: params.tensors()[i].shape().to_vec(),
                found: t.shape().to_vec(),
            });
        }
        params.tensors_mut()[i] = t.clone();
    }
    Ok((cfg, params))
}

/// Runs two configurations over the same data and returns their metrics
/// joined by step. Both must share seed, corpus and probe schedule.
pub fn compare(a: TrainConfig, b: TrainConfig, data: &TrainData) -> Result<(Vec<MetricsRow>, Vec<MetricsRow>, String)> {
    if a.seed != b.seed {
        return Err(Error::Config(format!("seeds differ: {} vs {}", a.seed, b.seed)));
    }
    if a.corpus != b.corpus {
        return Err(Error::Config("the two runs must share a corpus".into()));
    }
    if (a.probe_every, a.total_steps) != (b.probe_every, b.total_steps) {
        return Err(Error::Config(format!(
            "probe schedules differ: every {} over {} steps vs every {} over {} steps",
            a.probe_every, a.total_steps, b.probe_every, b.total_steps
        )));
    }
    let name = |c: &TrainConfig, fallback: &str| {
        let v = serde_json::to_value(c.objective.variant).expect("variant serializes");
        match v.as_str() {
            Some(s) if a.objective.variant != b.objective.variant => s.to_string(),
            _ => fallback.to_string(),
        }
    };
    let (name_a, name_b) = (name(&a, "a"), name(&b, "b"));
    let rows_a = Trainer::new(a, data.clone())?.run()?;
    let rows_b = Trainer::new(b, data.clone())?.run()?;
    let joined = join_metrics(&rows_a, &rows_b, &name_a, &name_b);
    Ok((rows_a, rows_b, joined))
}
