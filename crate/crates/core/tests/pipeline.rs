use taco_core::autodiff::GradcheckOptions;
use taco_core::corpus::synthetic::{co_occurrent_pairs, two_topic_corpus, TwoTopicSpec};
use taco_core::corpus::Vocabulary;
use taco_core::encoder::EncoderConfig;
use taco_core::objectives::Variant;
use taco_core::probes::contextual_stats;
use taco_core::train::{load_parameters, model_gradcheck, read_metrics, Checkpoint, LossKind, ToyModel, TrainConfig, TrainData, Trainer};

fn small_config(variant: Variant, dir: &std::path::Path) -> TrainConfig {
    let mut cfg = TrainConfig {
        encoder: EncoderConfig {
            num_layers: 1,
            hidden_size: 16,
            num_heads: 2,
            ffn_size: 32,
            ..EncoderConfig::desk()
        },
        total_steps: 8,
        warmup_steps: 2,
        batch_size: 8,
        probe_every: 4,
        probe_samples: 100,
        probe_sequences: 20,
        checkpoint_every: 4,
        seed: 5,
        log_elapsed: false,
        output_dir: Some(dir.to_path_buf()),
        ..TrainConfig::default()
    };
    cfg.objective.variant = variant;
    cfg.objective.negatives = 8;
    cfg
}

fn corpus() -> Vec<String> {
    let spec = TwoTopicSpec {
        words_per_topic: 40,
        sentences: 60,
        ..TwoTopicSpec::default()
    };
    two_topic_corpus(&spec, 4).into_iter().map(|(_, s)| s).collect()
}

#[test]
fn files_on_disk_drive_a_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_path = dir.path().join("corpus.txt");
    std::fs::write(&corpus_path, corpus().join("\n")).unwrap();
    let pairs_path = dir.path().join("pairs.tsv");
    let pairs: Vec<String> = co_occurrent_pairs(4).into_iter().map(|(a, b)| format!("{a}\t{b}")).collect();
    std::fs::write(&pairs_path, pairs.join("\n")).unwrap();

    let out = dir.path().join("run");
    let mut cfg = small_config(Variant::Taco, &out);
    cfg.corpus = Some(corpus_path);
    cfg.pairs = Some(pairs_path);
    let data = TrainData::load(&cfg).unwrap();
    let rows = Trainer::new(cfg.clone(), data).unwrap().run().unwrap();
    assert_eq!(read_metrics(&out.join("metrics.csv")).unwrap(), rows);
    let emb = std::fs::read_to_string(out.join("embedding_similarity.csv")).unwrap();
    assert_eq!(emb.lines().filter(|l| l.contains(",mean,")).count(), 3);

    let ckpt = Checkpoint::load(&out.join("final.taco")).unwrap();
    assert_eq!(ckpt.step, 8);
    let (loaded_cfg, params) = load_parameters(&ckpt).unwrap();
    let vocab = Vocabulary::from_lines(corpus().iter().map(String::as_str), cfg.encoder.vocab_size, 1).unwrap();
    assert_eq!(loaded_cfg.encoder.vocab_size, vocab.len());
    let seqs: Vec<Vec<usize>> = corpus().iter().take(20).map(|l| vocab.encode(l, 64)).collect();
    let report = contextual_stats(&loaded_cfg.encoder, &params, &seqs, 100, 0).unwrap();
    let last = rows.last().unwrap();
    assert_eq!(Some(report.contextual_score), last.contextual_score);
}

#[test]
fn resuming_from_a_saved_checkpoint_finishes_the_same_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(Variant::ExtendedMlm, &dir.path().join("full"));
    let lines = corpus();
    let data = || TrainData::from_lines(&cfg, &lines, None, None, None).unwrap();
    let full = Trainer::new(cfg.clone(), data()).unwrap().run().unwrap();

    let ckpt = Checkpoint::load(&dir.path().join("full").join("step-000004.taco")).unwrap();
    let mut again = cfg.clone();
    again.output_dir = Some(dir.path().join("resumed"));
    let tail = Trainer::resume(again, data(), &ckpt).unwrap().run().unwrap();
    assert_eq!(tail, full[5..].to_vec());
}

#[test]
fn every_loss_passes_a_sampled_gradient_check() {
    let model = ToyModel::standard(3).unwrap();
    let opts = GradcheckOptions {
        tol: 1e-4,
        abs_floor: 1e-5,
        max_elements_per_input: Some(6),
        seed: 3,
        ..GradcheckOptions::default()
    };
    for kind in [LossKind::Mlm, LossKind::Tc, LossKind::Taco] {
        let report = model_gradcheck(&model, kind, &opts).unwrap();
        assert!(report.passed, "{} {:?}", kind.label(), report.worst());
    }
}
