use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maskctc::decoding::{DecodeConfig, Strategy};
use maskctc::harness::{self, SWEEP_ITERATIONS};
use maskctc::model::{average_checkpoints, Model, ModelCheckpoint};
use maskctc::synthdata::{generate_split, load_corpus, save_corpus, Corpus, SynthConfig};
use maskctc::train::{run_training, TrainConfig};
use maskctc::Error;

/// Mask-CTC toolkit: synthetic corpora, training, decoding and evaluation.
#[derive(Parser, Debug)]
#[command(name = "maskctc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus.
    Gen(GenArgs),
    /// Train a model; writes per-epoch checkpoints and an averaged final.ckpt.
    Train(TrainArgs),
    /// Average the parameters of several checkpoints.
    Avg(AvgArgs),
    /// Decode a corpus into a hypothesis file and a JSON-lines trace log.
    Decode(DecodeArgs),
    /// Score a hypothesis file against references.
    Eval(EvalArgs),
    /// Time decoding strategies on a corpus.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of utterances.
    #[arg(short, long, default_value_t = 2000)]
    n: usize,
    /// Split index; different splits of one config share prototypes but not utterances.
    #[arg(long, default_value_t = 0)]
    split: u64,
    /// Flat TOML synthesis config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for checkpoints and the loss log.
    #[arg(long)]
    out: PathBuf,
    /// Flat TOML training config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from an epoch checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Do not print per-epoch losses.
    #[arg(short, long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct AvgArgs {
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoints to average.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct DecodeOptions {
    /// Model checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Refinement threshold; defaults to the strategy's own.
    #[arg(long)]
    p_thres: Option<f64>,
    /// Loop bound for shrink_expand; defaults to 2·K.
    #[arg(long)]
    max_loop: Option<usize>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[command(flatten)]
    opts: DecodeOptions,
    /// ctc_greedy, maskctc, shrink_expand, mask_predict or restricted_mp.
    #[arg(long, default_value = "maskctc")]
    strategy: String,
    /// Iterations K; 0 gives the CTC result.
    #[arg(short = 'K', long, default_value_t = 10)]
    iterations: usize,
    /// Decode with K = 0, 1, 5 and 10, writing `<out>.k<K>` files.
    #[arg(long)]
    sweep: bool,
    /// Hypothesis file.
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines trace log.
    #[arg(long)]
    traces: Option<PathBuf>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Hypothesis file.
    #[arg(long)]
    hyp: PathBuf,
    /// Reference: a corpus directory or a file in hypothesis format.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Print JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    opts: DecodeOptions,
    /// Comma-separated strategies.
    #[arg(long, value_delimiter = ',', default_value = "ctc_greedy,maskctc,shrink_expand")]
    strategies: Vec<String>,
    #[arg(short = 'K', long, default_value_t = 10)]
    iterations: usize,
    /// Timed passes over the corpus per strategy.
    #[arg(short = 'R', long, default_value_t = 3)]
    repeats: usize,
    /// Use only the first N utterances.
    #[arg(long, default_value_t = 100)]
    limit: usize,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

/// Failures split by exit code.
enum Failure {
    Usage(String),
    Data(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_data_error() {
            Failure::Data(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Avg(a) => avg(a),
        Command::Decode(a) => decode(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn gen(a: GenArgs) -> CmdResult {
    if a.n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }
    let cfg = SynthConfig::load(a.config.as_deref(), &a.overrides)?;
    let corpus = generate_split(&cfg, a.n, a.split)?;
    save_corpus(&corpus, &a.out, Some(&cfg))?;
    println!("wrote {} utterances to {}", corpus.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> CmdResult {
    let cfg = TrainConfig::load(a.config.as_deref(), &a.overrides)?;
    let corpus = load_corpus(&a.corpus)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::Data(format!("{}: {e}", a.out.display())))?;
    std::fs::write(a.out.join("config.toml"), cfg.to_toml())
        .map_err(|e| Failure::Data(format!("{}: {e}", a.out.display())))?;
    let quiet = a.quiet;
    let outcome = run_training(cfg, &corpus, &a.out, a.resume.as_deref(), |s| {
        if !quiet {
            eprintln!(
                "epoch {:3}  step {:6}  loss {:.4}  ctc {:.4}  mlm {:.4}  dlp {:.4}",
                s.epoch, s.step, s.loss.total, s.loss.ctc, s.loss.mlm, s.loss.dlp
            );
        }
    })?;
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    Ok(())
}

fn avg(a: AvgArgs) -> CmdResult {
    let ckpts = a
        .inputs
        .iter()
        .map(ModelCheckpoint::load)
        .collect::<Result<Vec<_>, _>>()?;
    average_checkpoints(&ckpts)?.save(&a.out)?;
    println!("averaged {} checkpoints into {}", ckpts.len(), a.out.display());
    Ok(())
}

fn load_inputs(opts: &DecodeOptions) -> Result<(Model, Corpus), Failure> {
    let model = Model::from_checkpoint(&ModelCheckpoint::load(&opts.checkpoint)?)?;
    let corpus = load_corpus(&opts.corpus)?;
    Ok((model, corpus))
}

fn decode_config(opts: &DecodeOptions, strategy: Strategy, iterations: usize) -> DecodeConfig {
    let mut cfg = harness::config_for(strategy, iterations, opts.p_thres);
    cfg.max_loop = opts.max_loop;
    cfg
}

fn suffixed(path: &Path, k: usize) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(format!(".k{k}"));
    PathBuf::from(s)
}

fn decode(a: DecodeArgs) -> CmdResult {
    let strategy: Strategy = a.strategy.parse()?;
    if let Some(jobs) = a.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let (model, corpus) = load_inputs(&a.opts)?;
    let runs: Vec<(usize, PathBuf, Option<PathBuf>)> = if a.sweep {
        SWEEP_ITERATIONS
            .iter()
            .map(|&k| (k, suffixed(&a.out, k), a.traces.as_deref().map(|t| suffixed(t, k))))
            .collect()
    } else {
        vec![(a.iterations, a.out.clone(), a.traces.clone())]
    };
    for (k, out, traces) in runs {
        let cfg = decode_config(&a.opts, strategy, k);
        let records = harness::decode_corpus(&model, &corpus, &cfg)?;
        harness::write_hypotheses(
            &out,
            records.iter().map(|r| (r.id.clone(), corpus.vocab.render(&r.hypothesis))),
        )?;
        if let Some(t) = traces {
            harness::write_traces(&t, &records)?;
        }
        let refs = harness::corpus_references(&corpus);
        let hyps: Vec<_> = records
            .iter()
            .map(|r| {
                let words = corpus.vocab.render(&r.hypothesis);
                (r.id.clone(), words.split_whitespace().map(String::from).collect())
            })
            .collect();
        let tally = harness::evaluate(&hyps, &refs)?;
        println!(
            "{} K={k}: {} utterances, token error {:.2}% -> {}",
            cfg.strategy,
            records.len(),
            100.0 * tally.rate(),
            out.display()
        );
    }
    Ok(())
}

fn eval(a: EvalArgs) -> CmdResult {
    let hyps = harness::read_hypotheses(&a.hyp)?;
    let refs = if a.reference.is_dir() {
        harness::corpus_references(&load_corpus(&a.reference)?)
    } else {
        harness::read_hypotheses(&a.reference)?
    };
    let tally = harness::evaluate(&hyps, &refs)?;
    if a.json {
        let v = serde_json::json!({
            "error_rate": tally.rate(),
            "substitutions": tally.counts.sub,
            "deletions": tally.counts.del,
            "insertions": tally.counts.ins,
            "errors": tally.counts.total,
            "reference_tokens": tally.ref_tokens,
            "utterances": tally.utterances,
        });
        println!("{v:#}");
    } else {
        println!(
            "error rate {:.2}%  ({} errors: {} sub, {} del, {} ins; {} reference tokens, {} utterances)",
            100.0 * tally.rate(),
            tally.counts.total,
            tally.counts.sub,
            tally.counts.del,
            tally.counts.ins,
            tally.ref_tokens,
            tally.utterances
        );
    }
    Ok(())
}

fn bench(a: BenchArgs) -> CmdResult {
    let strategies = a
        .strategies
        .iter()
        .map(|s| s.parse::<Strategy>())
        .collect::<Result<Vec<_>, _>>()?;
    let (model, mut corpus) = load_inputs(&a.opts)?;
    corpus.utterances.truncate(a.limit);
    if corpus.is_empty() {
        return Err(Failure::Data("corpus has no utterances to time".into()));
    }
    let configs: Vec<DecodeConfig> = strategies
        .into_iter()
        .map(|s| decode_config(&a.opts, s, a.iterations))
        .collect();
    let report = harness::bench(&model, &corpus, &configs, a.repeats)?;
    print!("{}", report.to_table());
    if let Some(path) = a.json {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(&path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}
