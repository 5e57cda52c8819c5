//! End-to-end runs through files: generate, persist, train, average, decode, score.

use std::path::Path;

use maskctc::decoding::Strategy;
use maskctc::harness::{config_for, corpus_references, decode_corpus, evaluate};
use maskctc::model::{average_checkpoints, ModelCheckpoint};
use maskctc::synthdata::{generate_split, load_corpus, save_corpus, SynthConfig};
use maskctc::train::{epoch_checkpoint_path, run_training, TrainConfig};

fn synth() -> SynthConfig {
    SynthConfig {
        vocab_size: 5,
        max_len: 6,
        feature_dim: 6,
        ..Default::default()
    }
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        encoder_layers: 1,
        decoder_layers: 1,
        attn_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        conv_kernel: 3,
        epochs: 3,
        batch_size: 4,
        average_last: 2,
        ..Default::default()
    }
}

/// Generates, saves and reloads both splits, trains, decodes the test split.
fn pipeline(dir: &Path) -> (Vec<u8>, f64) {
    let cfg = synth();
    save_corpus(&generate_split(&cfg, 24, 0).unwrap(), dir.join("train"), Some(&cfg)).unwrap();
    save_corpus(&generate_split(&cfg, 8, 1).unwrap(), dir.join("test"), Some(&cfg)).unwrap();
    let train = load_corpus(dir.join("train")).unwrap();
    let test = load_corpus(dir.join("test")).unwrap();
    let out = run_training(train_cfg(), &train, &dir.join("run"), None, |_| {}).unwrap();
    let records = decode_corpus(&out.model, &test, &config_for(Strategy::MaskCtc, 10, None)).unwrap();
    let hyps: Vec<_> = records
        .iter()
        .map(|r| {
            let words = test.vocab.render(&r.hypothesis);
            (r.id.clone(), words.split_whitespace().map(String::from).collect())
        })
        .collect();
    let tally = evaluate(&hyps, &corpus_references(&test)).unwrap();
    (std::fs::read(&out.final_checkpoint).unwrap(), tally.rate())
}

#[test]
fn repeated_pipeline_is_bitwise_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ckpt_a, wer_a) = pipeline(a.path());
    let (ckpt_b, wer_b) = pipeline(b.path());
    assert!(ckpt_a == ckpt_b, "final checkpoints differ");
    assert_eq!(wer_a.to_bits(), wer_b.to_bits());
    for e in 1..=3 {
        let x = std::fs::read(epoch_checkpoint_path(&a.path().join("run"), e)).unwrap();
        let y = std::fs::read(epoch_checkpoint_path(&b.path().join("run"), e)).unwrap();
        assert!(x == y, "epoch {e} checkpoints differ");
    }
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_split(&synth(), 24, 0).unwrap();
    let full = run_training(train_cfg(), &corpus, &dir.path().join("full"), None, |_| {}).unwrap();

    let short = TrainConfig { epochs: 1, ..train_cfg() };
    let part = dir.path().join("part");
    run_training(short, &corpus, &part, None, |_| {}).unwrap();
    let resumed = run_training(train_cfg(), &corpus, &part, Some(&epoch_checkpoint_path(&part, 1)), |_| {}).unwrap();

    assert_eq!(resumed.epochs.len(), 2);
    assert!(std::fs::read(&full.final_checkpoint).unwrap() == std::fs::read(&resumed.final_checkpoint).unwrap());
    let log = std::fs::read_to_string(part.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn averaging_copies_of_one_checkpoint_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_split(&synth(), 12, 0).unwrap();
    let cfg = TrainConfig { epochs: 1, ..train_cfg() };
    let out = run_training(cfg, &corpus, dir.path(), None, |_| {}).unwrap();
    let c = ModelCheckpoint::load(&out.final_checkpoint).unwrap();
    let avg = average_checkpoints(&[c.clone(), c.clone(), c.clone()]).unwrap();
    assert!(avg.to_bytes().unwrap() == c.to_bytes().unwrap());
}

#[test]
fn decoding_a_foreign_corpus_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_split(&synth(), 8, 0).unwrap();
    let cfg = TrainConfig { epochs: 1, ..train_cfg() };
    let out = run_training(cfg, &corpus, dir.path(), None, |_| {}).unwrap();
    let other = generate_split(&SynthConfig { vocab_size: 7, ..synth() }, 4, 0).unwrap();
    let err = decode_corpus(&out.model, &other, &config_for(Strategy::CtcGreedy, 0, None)).unwrap_err();
    assert!(matches!(err, maskctc::Error::Data(_)), "{err}");
}
