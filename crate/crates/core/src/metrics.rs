//! Token error rate and decoding cost accounting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::decoding::DecodeTrace;

/// Levenshtein edit counts, phrased from the hypothesis side: `ins` counts
/// extra hypothesis tokens, `del` counts reference tokens the hypothesis lost.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
    pub total: usize,
}

impl AddAssign for EditCounts {
    fn add_assign(&mut self, o: Self) {
        self.sub += o.sub;
        self.del += o.del;
        self.ins += o.ins;
        self.total += o.total;
    }
}

/// Unit-cost alignment. Ties prefer match/substitution, then deletion.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for (j, cell) in d[..w].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i * w + j] = diag.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let mut counts = EditCounts {
        total: d[n * w + m],
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                counts.sub += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            counts.del += 1;
            i -= 1;
        } else {
            counts.ins += 1;
            j -= 1;
        }
    }
    counts
}

/// Errors divided by `max(1, reference length)`.
pub fn error_rate(counts: EditCounts, ref_len: usize) -> f64 {
    counts.total as f64 / ref_len.max(1) as f64
}

/// Accumulated edits over a test set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorTally {
    pub counts: EditCounts,
    pub ref_tokens: usize,
    pub utterances: usize,
}

impl ErrorTally {
    pub fn add<T: PartialEq>(&mut self, hyp: &[T], reference: &[T]) {
        self.counts += edit_distance(hyp, reference);
        self.ref_tokens += reference.len();
        self.utterances += 1;
    }

    pub fn rate(&self) -> f64 {
        error_rate(self.counts, self.ref_tokens)
    }
}

/// One timed decode of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct TimingSample<'a> {
    pub label: String,
    pub wall_seconds: f64,
    pub trace: &'a DecodeTrace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyTiming {
    pub label: String,
    pub samples: usize,
    pub mean_wall: f64,
    pub median_wall: f64,
    pub std_wall: f64,
    pub decoder_forward_count: usize,
    pub encoder_forward_count: usize,
    pub mean_decoder_forwards: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub strategies: Vec<StrategyTiming>,
}

/// Aggregates samples per label, keeping first-seen label order.
pub fn timing_report(samples: &[TimingSample<'_>]) -> TimingReport {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&TimingSample>> = BTreeMap::new();
    for s in samples {
        if !groups.contains_key(s.label.as_str()) {
            order.push(&s.label);
        }
        groups.entry(&s.label).or_default().push(s);
    }
    let strategies = order
        .into_iter()
        .map(|label| {
            let group = &groups[label];
            let n = group.len() as f64;
            let mut walls: Vec<f64> = group.iter().map(|s| s.wall_seconds).collect();
            walls.sort_by(f64::total_cmp);
            let mean = walls.iter().sum::<f64>() / n;
            let var = walls.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
            let mid = walls.len() / 2;
            let median = if walls.len() % 2 == 1 {
                walls[mid]
            } else {
                (walls[mid - 1] + walls[mid]) / 2.0
            };
            let dec: usize = group.iter().map(|s| s.trace.decoder_forward_count).sum();
            StrategyTiming {
                label: label.to_string(),
                samples: group.len(),
                mean_wall: mean,
                median_wall: median,
                std_wall: var.sqrt(),
                decoder_forward_count: dec,
                encoder_forward_count: group.iter().map(|s| s.trace.encoder_forward_count).sum(),
                mean_decoder_forwards: dec as f64 / n,
            }
        })
        .collect();
    TimingReport { strategies }
}

impl TimingReport {
    pub fn get(&self, label: &str) -> Option<&StrategyTiming> {
        self.strategies.iter().find(|s| s.label == label)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table; wall times in milliseconds.
    pub fn to_table(&self) -> String {
        let header = ["strategy", "n", "mean ms", "± std", "median ms", "dec fwd", "dec/utt", "enc fwd"];
        let rows: Vec<[String; 8]> = self
            .strategies
            .iter()
            .map(|s| {
                [
                    s.label.clone(),
                    s.samples.to_string(),
                    format!("{:.3}", s.mean_wall * 1e3),
                    format!("{:.3}", s.std_wall * 1e3),
                    format!("{:.3}", s.median_wall * 1e3),
                    s.decoder_forward_count.to_string(),
                    format!("{:.2}", s.mean_decoder_forwards),
                    s.encoder_forward_count.to_string(),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        let mut line = |cells: Vec<&str>| {
            let parts: Vec<String> = cells
                .iter()
                .zip(widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(header.to_vec());
        for r in &rows {
            line(r.iter().map(String::as_str).collect());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_cases() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]).total, 0);
        let c = edit_distance(&['a', 'b', 'c'], &['a', 'c']);
        assert_eq!((c.total, c.ins, c.del, c.sub), (1, 1, 0, 0));
        let c = edit_distance(&['a'], &['a', 'b', 'c']);
        assert_eq!((c.total, c.del), (2, 2));
        let c = edit_distance(&['x', 'b'], &['a', 'b']);
        assert_eq!((c.total, c.sub), (1, 1));
    }

    #[test]
    fn empty_reference_uses_unit_denominator() {
        let c = edit_distance(&[1, 2], &[]);
        assert_eq!(c.ins, 2);
        assert_eq!(error_rate(c, 0), 2.0);
        assert_eq!(error_rate(edit_distance::<u8>(&[], &[]), 0), 0.0);
    }

    #[test]
    fn report_aggregates_per_label() {
        let t0 = DecodeTrace {
            decoder_forward_count: 0,
            encoder_forward_count: 1,
            ..Default::default()
        };
        let t5 = DecodeTrace {
            decoder_forward_count: 5,
            encoder_forward_count: 1,
            ..Default::default()
        };
        let samples = vec![
            TimingSample { label: "ctc".into(), wall_seconds: 1.0, trace: &t0 },
            TimingSample { label: "mask".into(), wall_seconds: 2.0, trace: &t5 },
            TimingSample { label: "ctc".into(), wall_seconds: 3.0, trace: &t0 },
        ];
        let r = timing_report(&samples);
        assert_eq!(r.strategies[0].label, "ctc");
        let ctc = r.get("ctc").unwrap();
        assert_eq!((ctc.samples, ctc.mean_wall, ctc.std_wall, ctc.median_wall), (2, 2.0, 1.0, 2.0));
        assert_eq!(ctc.decoder_forward_count, 0);
        assert_eq!(r.get("mask").unwrap().decoder_forward_count, 5);
        assert!(r.to_table().lines().count() == 3);
        assert!(r.to_json().contains("\"mean_wall\""));
    }
}
