//! Batch plumbing behind the command-line tool: decoding whole corpora,
//! hypothesis and trace files, scoring, and timing.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoding::{recognize, DecodeConfig, DecodeTrace, Strategy};
use crate::error::{Error, Result};
use crate::metrics::{timing_report, ErrorTally, TimingReport, TimingSample};
use crate::model::{Model, TokenId};
use crate::synthdata::Corpus;

/// Iteration counts decoded by a sweep; `0` is the plain CTC result.
pub const SWEEP_ITERATIONS: [usize; 4] = [0, 1, 5, 10];

/// Decode settings for an iteration count, where `K = 0` means CTC only.
pub fn config_for(strategy: Strategy, iterations: usize, p_thres: Option<f64>) -> DecodeConfig {
    let strategy = if iterations == 0 { Strategy::CtcGreedy } else { strategy };
    let cfg = DecodeConfig::new(strategy, iterations);
    match p_thres {
        Some(p) => cfg.with_threshold(p),
        None => cfg,
    }
}

/// One decoded utterance, as written to the trace log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: String,
    pub strategy: Strategy,
    pub iterations: usize,
    pub p_thres: f64,
    pub ctc: Vec<TokenId>,
    pub ctc_confidences: Vec<f64>,
    pub hypothesis: Vec<TokenId>,
    pub trace: DecodeTrace,
}

/// Decodes every utterance, fanning out over the rayon pool. Results keep
/// corpus order.
pub fn decode_corpus(model: &Model, corpus: &Corpus, cfg: &DecodeConfig) -> Result<Vec<TraceRecord>> {
    cfg.validate()?;
    check_vocab(model, corpus)?;
    corpus
        .utterances
        .par_iter()
        .map(|u| {
            let d = recognize(model, &u.features, cfg)?;
            Ok(TraceRecord {
                id: u.id.clone(),
                strategy: cfg.strategy,
                iterations: cfg.iterations,
                p_thres: cfg.p_thres,
                ctc: d.ctc.tokens,
                ctc_confidences: d.ctc.confidences,
                hypothesis: d.tokens,
                trace: d.trace,
            })
        })
        .collect()
}

fn check_vocab(model: &Model, corpus: &Corpus) -> Result<()> {
    if model.vocab() != &corpus.vocab {
        return Err(Error::Data("corpus vocabulary differs from the model's".into()));
    }
    if model.config().input_dim != corpus.feature_dim {
        return Err(Error::Data(format!(
            "corpus features have dimension {}, model expects {}",
            corpus.feature_dim,
            model.config().input_dim
        )));
    }
    Ok(())
}

/// Writes `id tok tok ...` lines.
pub fn write_hypotheses(path: &Path, lines: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let mut out = String::new();
    for (id, text) in lines {
        if text.is_empty() {
            let _ = writeln!(out, "{id}");
        } else {
            let _ = writeln!(out, "{id} {text}");
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads `id tok tok ...` lines; blank lines are skipped.
pub fn read_hypotheses(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seen = HashMap::new();
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let mut words = line.split_whitespace();
        let Some(id) = words.next() else { continue };
        if seen.insert(id.to_string(), n).is_some() {
            return Err(Error::Data(format!("{}:{}: duplicate id {id}", path.display(), n + 1)));
        }
        rows.push((id.to_string(), words.map(String::from).collect()));
    }
    Ok(rows)
}

/// Reference transcripts of a corpus in hypothesis-file form.
pub fn corpus_references(corpus: &Corpus) -> Vec<(String, Vec<String>)> {
    corpus
        .utterances
        .iter()
        .map(|u| {
            let words = corpus.vocab.render(&u.reference);
            (u.id.clone(), words.split_whitespace().map(String::from).collect())
        })
        .collect()
}

pub fn write_traces(path: &Path, records: &[TraceRecord]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        serde_json::to_writer(&mut file, r)?;
        file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    file.flush().map_err(|e| Error::io(path, e))
}

/// Scores hypotheses against references matched by id. Both sides must
/// cover exactly the same ids.
pub fn evaluate(hyps: &[(String, Vec<String>)], refs: &[(String, Vec<String>)]) -> Result<ErrorTally> {
    if hyps.len() != refs.len() {
        return Err(Error::Data(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let by_id: HashMap<&str, &[String]> = hyps.iter().map(|(id, w)| (id.as_str(), w.as_slice())).collect();
    let mut tally = ErrorTally::default();
    for (id, reference) in refs {
        let hyp = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::Data(format!("no hypothesis for {id}")))?;
        tally.add(hyp, reference);
    }
    Ok(tally)
}

/// Timing results for a set of strategies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    /// Per-utterance statistics; each sample's wall time is its mean over
    /// the repeats, forward counts are from a single pass.
    pub report: TimingReport,
    pub repeats: usize,
    /// Whole-corpus wall time of every repeat, per strategy label.
    pub corpus_seconds: Vec<(String, Vec<f64>)>,
}

impl BenchReport {
    pub fn to_table(&self) -> String {
        let mut out = self.report.to_table();
        for (label, secs) in &self.corpus_seconds {
            let n = secs.len() as f64;
            let mean = secs.iter().sum::<f64>() / n;
            let std = (secs.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
            let _ = writeln!(out, "{label}: corpus {:.3} ± {:.3} s over {} repeats", mean, std, secs.len());
        }
        out
    }
}

/// Decodes the corpus `repeats` times with every config, sequentially. Each
/// repeat visits the strategies in turn so slow drift affects all alike.
pub fn bench(model: &Model, corpus: &Corpus, configs: &[DecodeConfig], repeats: usize) -> Result<BenchReport> {
    if repeats == 0 || configs.is_empty() {
        return Err(Error::Config("bench needs at least one strategy and one repeat".into()));
    }
    check_vocab(model, corpus)?;
    for cfg in configs {
        cfg.validate()?;
    }
    let n = corpus.len();
    let mut walls = vec![vec![0.0; n]; configs.len()];
    let mut traces: Vec<Vec<DecodeTrace>> = vec![Vec::with_capacity(n); configs.len()];
    let mut totals = vec![Vec::with_capacity(repeats); configs.len()];
    for rep in 0..repeats {
        for (c, cfg) in configs.iter().enumerate() {
            let mut total = 0.0;
            for (i, u) in corpus.utterances.iter().enumerate() {
                let start = Instant::now();
                let d = recognize(model, &u.features, cfg)?;
                let secs = start.elapsed().as_secs_f64();
                walls[c][i] += secs / repeats as f64;
                total += secs;
                if rep == 0 {
                    traces[c].push(d.trace);
                }
            }
            totals[c].push(total);
        }
    }
    let labels: Vec<String> = configs.iter().map(bench_label).collect();
    let samples: Vec<TimingSample> = (0..configs.len())
        .flat_map(|c| {
            let label = &labels[c];
            walls[c].iter().zip(&traces[c]).map(move |(&w, t)| TimingSample {
                label: label.clone(),
                wall_seconds: w,
                trace: t,
            })
        })
        .collect();
    Ok(BenchReport {
        report: timing_report(&samples),
        repeats,
        corpus_seconds: labels.into_iter().zip(totals).collect(),
    })
}

/// `strategy` for CTC, `strategy(K=k)` otherwise.
pub fn bench_label(cfg: &DecodeConfig) -> String {
    match cfg.strategy {
        Strategy::CtcGreedy => cfg.strategy.to_string(),
        s => format!("{s}(K={})", cfg.iterations),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(spec: &[(&str, &str)]) -> Vec<(String, Vec<String>)> {
        spec.iter()
            .map(|(id, w)| (id.to_string(), w.split_whitespace().map(String::from).collect()))
            .collect()
    }

    #[test]
    fn hypothesis_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.txt");
        let lines = vec![("u1".to_string(), "a b".to_string()), ("u2".to_string(), String::new())];
        write_hypotheses(&path, lines).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "u1 a b\nu2\n");
        assert_eq!(read_hypotheses(&path).unwrap(), rows(&[("u1", "a b"), ("u2", "")]));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.txt");
        std::fs::write(&path, "u1 a\nu1 b\n").unwrap();
        assert!(matches!(read_hypotheses(&path), Err(Error::Data(_))));
    }

    #[test]
    fn evaluation_matches_by_id() {
        let refs = rows(&[("u1", "a b c"), ("u2", "d")]);
        let hyps = rows(&[("u2", "d"), ("u1", "a c")]);
        let t = evaluate(&hyps, &refs).unwrap();
        assert_eq!((t.counts.total, t.ref_tokens, t.utterances), (1, 4, 2));
        assert_eq!(evaluate(&refs, &refs).unwrap().rate(), 0.0);
        assert!(evaluate(&rows(&[("u1", "a")]), &refs).is_err());
        assert!(evaluate(&rows(&[("u1", "a"), ("u3", "d")]), &refs).is_err());
    }

    #[test]
    fn zero_iterations_means_ctc() {
        assert_eq!(config_for(Strategy::MaskCtc, 0, None).strategy, Strategy::CtcGreedy);
        let c = config_for(Strategy::ShrinkExpand, 10, Some(0.7));
        assert_eq!((c.strategy, c.iterations, c.p_thres), (Strategy::ShrinkExpand, 10, 0.7));
        assert_eq!(bench_label(&c), "shrink_expand(K=10)");
    }
}
