//! Acceptance runner. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. The trained regimes are read from `configs/`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use maskctc::decoding::{expand, shrink, DecodeConfig, Strategy};
use maskctc::harness::{bench, bench_label, config_for, corpus_references, decode_corpus, evaluate};
use maskctc::masking::{deletion_sample_from, insertion_sample_from};
use maskctc::metrics::ErrorTally;
use maskctc::model::{Architecture, Model};
use maskctc::numerics::Rng;
use maskctc::synthdata::{generate_split, load_corpus, save_corpus, Corpus, SynthConfig};
use maskctc::train::{run_training, TrainConfig, Trainer};

const ORACLE_CASES: usize = 600;
const ORACLE_TOLERANCE: f64 = 1e-10;
const ORACLE_BUDGET: Duration = Duration::from_secs(30);
const TOTAL_PROB_TOLERANCE: f64 = 1e-9;
const OP_TOLERANCE: f64 = 1e-4;
const MODEL_TOLERANCE: f64 = 1e-3;
const GRADIENT_BUDGET: Duration = Duration::from_secs(120);
const DLP_SHARE: f64 = 0.8;
const DLP_CASES: usize = 200;
const DLP_TRAIN_BUDGET: Duration = Duration::from_secs(15 * 60);
const REFINE_SEEDS: u64 = 3;
const HELD_OUT: usize = 300;
const TRACE_UTTERANCES: usize = 100;
const K: usize = 10;

type Check = Result<String, String>;

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn synth_config(name: &str, overrides: &[String]) -> SynthConfig {
    SynthConfig::load(Some(&config_path(name)), overrides).expect("synth config")
}

fn train_config(name: &str, overrides: &[String]) -> TrainConfig {
    TrainConfig::load(Some(&config_path(name)), overrides).expect("train config")
}

fn verdict(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ctc_oracle() -> Check {
    let start = Instant::now();
    let s = common::ctc_oracle_agreement(ORACLE_CASES, 11);
    let took = start.elapsed();
    verdict(
        s.max_abs_error < ORACLE_TOLERANCE && took < ORACLE_BUDGET,
        format!(
            "{} cases ({} feasible), max |dp - enum| {:.2e}, {:.1}s",
            s.cases,
            s.feasible,
            s.max_abs_error,
            took.as_secs_f64()
        ),
    )
}

fn total_probability() -> Check {
    let dev = common::total_probability_deviation(300, 12);
    verdict(dev < TOTAL_PROB_TOLERANCE, format!("max |sum - 1| {dev:.2e} over 300 posteriors"))
}

fn gradients() -> Check {
    let start = Instant::now();
    let ops = common::op_gradient_checks(13);
    let worst_op = ops
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("op list");
    let models: Vec<_> = [Architecture::Conformer, Architecture::Transformer]
        .into_iter()
        .map(|arch| common::combined_loss_gradient_check(arch, 6, 14))
        .collect();
    let worst_model = models
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("model list");
    let took = start.elapsed();
    verdict(
        worst_op.max_rel_error < OP_TOLERANCE && worst_model.max_rel_error < MODEL_TOLERANCE && took < GRADIENT_BUDGET,
        format!(
            "{} ops, worst {} {:.2e}; combined loss worst {} {:.2e} over {} scalars; {:.1}s",
            ops.len(),
            worst_op.name,
            worst_op.max_rel_error,
            worst_model.worst_param,
            worst_model.max_rel_error,
            models.iter().map(|m| m.checked).sum::<usize>(),
            took.as_secs_f64()
        ),
    )
}

fn train(cfg: TrainConfig, corpus: &Corpus) -> Model {
    let epochs = cfg.epochs;
    let mut t = Trainer::new(cfg, corpus.vocab.clone(), corpus.feature_dim).expect("trainer");
    for _ in 0..epochs {
        t.train_epoch(corpus).expect("epoch");
    }
    t.into_model()
}

/// Merges two neighbouring reference tokens into one mask (should read as
/// length 2) and inserts a mask between two tokens (should read as 0).
fn length_prediction() -> Check {
    let synth = synth_config("acceptance/dlp_synth.toml", &[]);
    let train_set = generate_split(&synth, 2000, 0).expect("train split");
    let held_out = generate_split(&synth, DLP_CASES, 1).expect("held-out split");
    let start = Instant::now();
    let model = train(train_config("acceptance/dlp_train.toml", &[]), &train_set);
    let took = start.elapsed();

    let mask = model.vocab().mask_id();
    let mut rng = Rng::new(15);
    let (mut merged, mut inserted) = (0, 0);
    for u in &held_out.utterances {
        let enc = model.encode_features(&u.features).expect("encode");
        let n = u.reference.len();
        let p = rng.below(n - 1);
        let s = deletion_sample_from(&u.reference, &[p, p + 1], mask);
        let lp = model.decoder_pass(&enc, s.masked.tokens(), true).expect("pass").length_log_probs.expect("lengths");
        merged += usize::from(lp.argmax_row(p) == 2);
        let g = rng.int_in(0, n);
        let s = insertion_sample_from(&u.reference, &[g], mask).expect("insertion");
        let lp = model.decoder_pass(&enc, s.masked.tokens(), true).expect("pass").length_log_probs.expect("lengths");
        inserted += usize::from(lp.argmax_row(g) == 0);
    }
    let need = (DLP_SHARE * DLP_CASES as f64).ceil() as usize;
    verdict(
        merged >= need && inserted >= need && took <= DLP_TRAIN_BUDGET,
        format!(
            "double mask -> 2: {merged}/{DLP_CASES}, inserted mask -> 0: {inserted}/{DLP_CASES} (need {need}); trained in {:.0}s",
            took.as_secs_f64()
        ),
    )
}

fn token_error(model: &Model, corpus: &Corpus, cfg: &DecodeConfig) -> f64 {
    let mut tally = ErrorTally::default();
    for r in decode_corpus(model, corpus, cfg).expect("decode").iter().zip(&corpus.utterances) {
        tally.add(&r.0.hypothesis, &r.1.reference);
    }
    tally.rate()
}

/// Models trained for the refinement comparison, reused by the trace and
/// timing checks.
struct RefineRun {
    model: Model,
    held_out: Corpus,
}

impl RefineRun {
    fn first_utterances(&self) -> Corpus {
        Corpus {
            vocab: self.held_out.vocab.clone(),
            feature_dim: self.held_out.feature_dim,
            utterances: self.held_out.utterances[..TRACE_UTTERANCES].to_vec(),
        }
    }
}

fn refinement(runs: &mut Vec<RefineRun>) -> Check {
    let ctc = DecodeConfig::new(Strategy::CtcGreedy, 0);
    let maskctc = DecodeConfig::new(Strategy::MaskCtc, K);
    let se = DecodeConfig::new(Strategy::ShrinkExpand, K);
    let (mut e_ctc, mut e_mask, mut e_mask_stress, mut e_se_stress) = (0.0, 0.0, 0.0, 0.0);
    let mut per_seed = Vec::new();
    for seed in 0..REFINE_SEEDS {
        let synth_seed = [format!("seed={}", 100 + seed)];
        let synth = synth_config("acceptance/refine_synth.toml", &synth_seed);
        let stress = synth_config("acceptance/stress_synth.toml", &synth_seed);
        let model = train(
            train_config("acceptance/refine_train.toml", &[format!("seed={seed}")]),
            &generate_split(&synth, 2000, 0).expect("train split"),
        );
        let held_out = generate_split(&synth, HELD_OUT, 1).expect("held-out split");
        let stressed = generate_split(&stress, HELD_OUT, 1).expect("stress split");
        let r = [
            token_error(&model, &held_out, &ctc),
            token_error(&model, &held_out, &maskctc),
            token_error(&model, &stressed, &maskctc),
            token_error(&model, &stressed, &se),
        ];
        per_seed.push(format!("{:.3}/{:.3}|{:.3}/{:.3}", r[0], r[1], r[2], r[3]));
        e_ctc += r[0];
        e_mask += r[1];
        e_mask_stress += r[2];
        e_se_stress += r[3];
        runs.push(RefineRun { model, held_out });
    }
    let n = REFINE_SEEDS as f64;
    let (e_ctc, e_mask, e_mask_stress, e_se_stress) = (e_ctc / n, e_mask / n, e_mask_stress / n, e_se_stress / n);
    verdict(
        e_mask <= e_ctc && e_se_stress <= e_mask_stress,
        format!(
            "held-out ctc {e_ctc:.4} maskctc {e_mask:.4}; stress maskctc {e_mask_stress:.4} shrink_expand {e_se_stress:.4} \
             (per seed ctc/maskctc|maskctc/se: {})",
            per_seed.join(", ")
        ),
    )
}

fn iteration_contracts(runs: &[RefineRun]) -> Check {
    let mut violations = Vec::new();
    let mut forwards = [0usize; 3];
    for (i, strategy) in [Strategy::CtcGreedy, Strategy::MaskCtc, Strategy::ShrinkExpand].into_iter().enumerate() {
        let cfg = config_for(strategy, if strategy == Strategy::CtcGreedy { 0 } else { K }, None);
        let records = runs.iter().flat_map(|run| decode_corpus(&run.model, &run.first_utterances(), &cfg).expect("decode"));
        for r in records {
            let f = r.trace.decoder_forward_count;
            forwards[i] += f;
            let ok = match strategy {
                Strategy::CtcGreedy => f == 0,
                Strategy::MaskCtc => f <= K && f == r.trace.initial_masks.min(K),
                _ => f <= 1 + 2 * cfg.loop_bound(),
            };
            if !ok {
                violations.push(format!("{strategy} {} used {f}", r.id));
            }
        }
    }
    verdict(
        violations.is_empty(),
        format!(
            "{TRACE_UTTERANCES} utterances x {} models, decoder forwards ctc {} maskctc {} shrink_expand {}{}",
            runs.len(),
            forwards[0],
            forwards[1],
            forwards[2],
            violations.first().map(|v| format!("; first violation: {v}")).unwrap_or_default()
        ),
    )
}

fn shrink_expand_fixtures() -> Check {
    const M: usize = 99;
    let (y1, y5, y7) = (1, 5, 7);
    let merged = shrink(&[y1, M, M, M, y5, M, y7], M);
    let expanded = expand(&merged, &[2, 0], M, usize::MAX).expect("expand");
    verdict(
        merged == [y1, M, y5, M, y7] && expanded == [y1, M, M, y5, y7],
        format!("shrink -> {merged:?}, expand(2, 0) -> {expanded:?}"),
    )
}

/// Files on disk end to end: generate, save, load, train, average, decode, score.
fn pipeline(dir: &Path) -> (Vec<u8>, Vec<Vec<u8>>, f64) {
    let synth = synth_config("acceptance/determinism_synth.toml", &[]);
    let cfg = train_config("acceptance/determinism_train.toml", &[]);
    save_corpus(&generate_split(&synth, 40, 0).expect("train"), dir.join("train"), Some(&synth)).expect("save");
    save_corpus(&generate_split(&synth, 16, 1).expect("test"), dir.join("test"), Some(&synth)).expect("save");
    let train_set = load_corpus(dir.join("train")).expect("load");
    let test = load_corpus(dir.join("test")).expect("load");
    let epochs = cfg.epochs;
    let out = run_training(cfg, &train_set, &dir.join("run"), None, |_| {}).expect("training");
    let records = decode_corpus(&out.model, &test, &config_for(Strategy::MaskCtc, K, None)).expect("decode");
    let hyps: Vec<_> = records
        .iter()
        .map(|r| (r.id.clone(), test.vocab.render(&r.hypothesis).split_whitespace().map(String::from).collect()))
        .collect();
    let wer = evaluate(&hyps, &corpus_references(&test)).expect("score").rate();
    let per_epoch = (1..=epochs)
        .map(|e| std::fs::read(maskctc::train::epoch_checkpoint_path(&dir.join("run"), e)).expect("epoch file"))
        .collect();
    (std::fs::read(&out.final_checkpoint).expect("final"), per_epoch, wer)
}

fn determinism() -> Check {
    let (a, b) = (tempfile::tempdir().expect("tmp"), tempfile::tempdir().expect("tmp"));
    let (fa, ea, wa) = pipeline(a.path());
    let (fb, eb, wb) = pipeline(b.path());
    verdict(
        fa == fb && ea == eb && wa.to_bits() == wb.to_bits(),
        format!(
            "final checkpoint identical: {}, {} epoch checkpoints identical: {}, error {wa} vs {wb}",
            fa == fb,
            ea.len(),
            ea == eb
        ),
    )
}

/// Mean per-utterance wall time of each strategy, averaged over the models.
fn speed_ordering(runs: &[RefineRun]) -> Check {
    let configs = [
        config_for(Strategy::CtcGreedy, 0, None),
        config_for(Strategy::MaskCtc, K, None),
        config_for(Strategy::ShrinkExpand, K, None),
    ];
    let mut means = [0.0; 3];
    let mut per_model = Vec::new();
    for run in runs {
        let report = bench(&run.model, &run.first_utterances(), &configs, 3).expect("bench");
        let row: Vec<String> = configs
            .iter()
            .zip(&mut means)
            .map(|(c, m)| {
                let t = report.report.get(&bench_label(c)).expect("label");
                *m += t.mean_wall / runs.len() as f64;
                format!("{:.2}ms/{}fwd", 1e3 * t.mean_wall, t.decoder_forward_count)
            })
            .collect();
        per_model.push(row.join(" "));
    }
    verdict(
        means[0] < means[1] && means[1] < means[2],
        format!(
            "mean per utterance: ctc_greedy {:.2}ms, maskctc {:.2}ms, shrink_expand {:.2}ms (per model: {})",
            1e3 * means[0],
            1e3 * means[1],
            1e3 * means[2],
            per_model.join(", ")
        ),
    )
}

fn run(name: &str, check: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS {name}: {detail} [{secs:.1}s]");
            true
        }
        Err(detail) => {
            println!("FAIL {name}: {detail} [{secs:.1}s]");
            false
        }
    }
}

fn main() {
    let mut ok = true;
    ok &= run("ctc oracle equivalence", ctc_oracle);
    ok &= run("ctc total probability", total_probability);
    ok &= run("gradient suite", gradients);
    ok &= run("shrink/expand fixtures", shrink_expand_fixtures);
    ok &= run("determinism", determinism);
    ok &= run("length prediction", length_prediction);
    let mut runs = Vec::new();
    ok &= run("refinement beats ctc", || refinement(&mut runs));
    if runs.is_empty() {
        println!("FAIL iteration contracts: no trained model");
        println!("FAIL speed ordering: no trained model");
        ok = false;
    } else {
        ok &= run("iteration contracts", || iteration_contracts(&runs));
        ok &= run("speed ordering", || speed_ordering(&runs));
    }
    if !ok {
        std::process::exit(1);
    }
}
