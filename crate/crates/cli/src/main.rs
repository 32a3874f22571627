//! `taco`: command-line front end for the masked-LM objective lab.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use taco_core::autodiff::GradcheckOptions;
use taco_core::corpus::{encode_all, read_lines, read_pairs, Vocabulary};
use taco_core::probes::{contextual_stats, embedding_similarity, WordPairSet};
use taco_core::train::{
    compare, load_parameters, model_gradcheck, Checkpoint, LossKind, ToyModel, TrainConfig, TrainData, Trainer,
};

#[derive(Parser, Debug)]
#[command(name = "taco", version, about = "Masked-LM pretraining objective lab")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a vocabulary file from a corpus (one document per line).
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Maximum vocabulary size, special tokens included.
        #[arg(long, default_value_t = 2000)]
        max_size: usize,
        #[arg(long, default_value_t = 1)]
        min_count: usize,
    },
    /// Train an encoder. Any configuration key may be given as `--key value`.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        /// Configuration file (flat TOML key/value pairs).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Contextual and embedding-similarity statistics of a checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Probe text, one sequence per line.
        #[arg(long)]
        corpus: PathBuf,
        /// Vocabulary file; defaults to `vocab.txt` next to the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Word-pair file for embedding similarity.
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        probe_seed: u64,
    },
    /// Finite-difference check of the training losses on a small encoder.
    Gradcheck {
        /// `mlm`, `tc`, `taco` or `all`.
        #[arg(long, default_value = "all")]
        loss: String,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Smallest denominator used for the relative error.
        #[arg(long, default_value_t = 1e-5)]
        abs_floor: f64,
        /// Elements checked per parameter tensor (0 checks all of them).
        #[arg(long, default_value_t = 40)]
        elements: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run two configurations and write their metrics side by side.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        config_a: PathBuf,
        #[arg(long)]
        config_b: PathBuf,
        /// Joined CSV output.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    seed: u64,
}

/// Failure classes, mapped onto exit codes 1 and 2.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

fn classify(e: taco_core::Error) -> Failure {
    if e.is_configuration() {
        Failure::Config(e.into())
    } else {
        Failure::Runtime(e.into())
    }
}

fn setup<T>(r: anyhow::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Config)
}

/// Pulls `--key value` / `--key=value` pairs naming configuration keys out
/// of the argument list. Dashes in keys are accepted as underscores.
fn split_overrides(args: Vec<String>, reserved: &[&str]) -> anyhow::Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        let key = name.replace('-', "_");
        if reserved.contains(&key.as_str()) || !TrainConfig::KEYS.contains(&key.as_str()) {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| anyhow!("--{name} needs a value"))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn build_config(file: Option<&Path>, overrides: &[(String, String)], seed: u64) -> anyhow::Result<TrainConfig> {
    let mut cfg = match file {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.seed = seed;
    Ok(cfg)
}

fn pretrain(cfg: TrainConfig, resume: Option<&Path>) -> Result<(), Failure> {
    let mut cfg = cfg;
    if cfg.output_dir.is_none() {
        cfg.output_dir = Some(PathBuf::from("run"));
    }
    let dir = cfg.output_dir.clone().unwrap();
    let data = setup(TrainData::load(&cfg).map_err(Into::into))?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = setup(Checkpoint::load(path).map_err(Into::into))?;
            setup(Trainer::resume(cfg, data, &ckpt).map_err(Into::into))?
        }
        None => setup(Trainer::new(cfg, data).map_err(Into::into))?,
    };
    setup(std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display())))?;
    setup(trainer.data().vocab.save(&dir.join("vocab.txt")).map_err(Into::into))?;
    let rows = trainer.run().map_err(classify)?;
    if let Some(last) = rows.iter().rev().find(|r| r.loss_total.is_some()) {
        println!(
            "trained to step {}: loss {:.6} (mlm {:.6}); outputs in {}",
            last.step,
            last.loss_total.unwrap_or(f64::NAN),
            last.loss_mlm.unwrap_or(f64::NAN),
            dir.display()
        );
    }
    Ok(())
}

fn probe(
    checkpoint: &Path,
    corpus: &Path,
    vocab: Option<&Path>,
    pairs: Option<&Path>,
    samples: usize,
    seed: u64,
) -> Result<(), Failure> {
    let ckpt = setup(Checkpoint::load(checkpoint).map_err(Into::into))?;
    let (cfg, params) = setup(load_parameters(&ckpt).map_err(Into::into))?;
    let vocab_path = match vocab {
        Some(v) => v.to_path_buf(),
        None => checkpoint.with_file_name("vocab.txt"),
    };
    let vocab = setup(Vocabulary::load(&vocab_path).map_err(Into::into))?;
    if vocab.len() != cfg.encoder.vocab_size {
        return Err(Failure::Config(anyhow!(
            "vocabulary {} has {} entries but the checkpoint expects {}",
            vocab_path.display(),
            vocab.len(),
            cfg.encoder.vocab_size
        )));
    }
    let lines = setup(read_lines(corpus).map_err(Into::into))?;
    let seqs = encode_all(&vocab, &lines, cfg.max_seq_len);
    let report = contextual_stats(&cfg.encoder, &params, &seqs, samples, seed).map_err(classify)?;
    print!("{}", report.to_table());
    if let Some(p) = pairs {
        let raw = setup(read_pairs(p).map_err(Into::into))?;
        let set = WordPairSet::resolve(&vocab, &raw);
        let sim = embedding_similarity(&params, &set).map_err(classify)?;
        for (a, b, c) in &sim.per_pair {
            println!("pair\t{a}\t{b}\t{c}");
        }
        for (a, b) in &sim.skipped {
            println!("skipped\t{a}\t{b}");
        }
        println!("pair_mean\t{}", sim.mean);
    }
    Ok(())
}

fn gradcheck(loss: &str, tol: f64, step: f64, abs_floor: f64, elements: usize, seed: u64) -> Result<(), Failure> {
    let kinds = match loss {
        "all" => vec![LossKind::Mlm, LossKind::Tc, LossKind::Taco],
        other => vec![LossKind::parse(other)
            .ok_or_else(|| Failure::Config(anyhow!("unknown loss `{other}` (mlm, tc, taco, all)")))?],
    };
    let model = ToyModel::standard(seed).map_err(classify)?;
    let opts = GradcheckOptions {
        step,
        tol,
        abs_floor,
        max_elements_per_input: (elements > 0).then_some(elements),
        seed,
        ..GradcheckOptions::default()
    };
    let mut failed = Vec::new();
    for kind in kinds {
        let report = model_gradcheck(&model, kind, &opts).map_err(classify)?;
        println!(
            "{}\t{}\tmax_rel_error={:.3e}\tchecked={}",
            kind.label(),
            if report.passed { "pass" } else { "FAIL" },
            report.max_rel_error,
            report.checks.len()
        );
        if !report.passed {
            failed.push(kind.label());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow!("gradient check failed for {}", failed.join(", "))))
    }
}

fn run_compare(a: TrainConfig, b: TrainConfig, out: &Path) -> Result<(), Failure> {
    if a.output_dir.is_some() && a.output_dir == b.output_dir {
        return Err(Failure::Config(anyhow!("the two runs must not share an output_dir")));
    }
    let data = setup(TrainData::load(&a).map_err(Into::into))?;
    let (_, _, joined) = compare(a, b, &data).map_err(classify)?;
    std::fs::write(out, joined)
        .with_context(|| format!("writing {}", out.display()))
        .map_err(Failure::Runtime)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn dispatch(cli: Cli, overrides: &[(String, String)]) -> Result<(), Failure> {
    match cli.command {
        Command::BuildVocab {
            corpus,
            out,
            max_size,
            min_count,
        } => {
            let vocab = setup(Vocabulary::build(&corpus, max_size, min_count).map_err(Into::into))?;
            vocab.save(&out).map_err(classify)?;
            println!("wrote {} tokens to {}", vocab.len(), out.display());
            Ok(())
        }
        Command::Pretrain { run, config, resume } => {
            let cfg = setup(build_config(config.as_deref(), overrides, run.seed))?;
            pretrain(cfg, resume.as_deref())
        }
        Command::Probe {
            checkpoint,
            corpus,
            vocab,
            pairs,
            samples,
            probe_seed,
        } => probe(&checkpoint, &corpus, vocab.as_deref(), pairs.as_deref(), samples, probe_seed),
        Command::Gradcheck {
            loss,
            tol,
            step,
            abs_floor,
            elements,
            seed,
        } => gradcheck(&loss, tol, step, abs_floor, elements, seed),
        Command::Compare {
            run,
            config_a,
            config_b,
            out,
        } => {
            let a = setup(build_config(Some(&config_a), overrides, run.seed))?;
            let b = setup(build_config(Some(&config_b), overrides, run.seed))?;
            run_compare(a, b, &out)
        }
    }
}

fn real_main() -> Result<(), Failure> {
    let args: Vec<String> = std::env::args().collect();
    let is_run = args
        .iter()
        .skip(1)
        .find(|a| !a.starts_with('-'))
        .is_some_and(|c| c == "pretrain" || c == "compare");
    let (args, overrides) = if is_run {
        // `seed` is a first-class flag on these commands
        setup(split_overrides(args, &["seed"]))?
    } else {
        (args, Vec::new())
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            return Err(Failure::Config(anyhow!("{e}")));
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    dispatch(cli, &overrides)
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
