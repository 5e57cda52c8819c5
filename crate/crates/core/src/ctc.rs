//! Connectionist temporal classification: path collapse, the forward
//! dynamic program over blank-interleaved labels, a brute-force enumeration
//! oracle, a differentiable loss and greedy decoding with per-token
//! confidences.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::numerics::{argmax, log_add_exp, log_sum_exp, Tensor, Var};

/// `T'×(|V|+1)` per-frame log-probabilities over tokens and blank.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePosteriors {
    log_probs: Tensor,
    blank: TokenId,
}

impl FramePosteriors {
    pub fn new(log_probs: Tensor, blank: TokenId) -> Result<Self> {
        if log_probs.ndim() != 2 || blank >= log_probs.last_dim() {
            return Err(Error::Shape(format!(
                "posteriors must be [T×C] with blank < C, got {:?} and blank {blank}",
                log_probs.shape()
            )));
        }
        Ok(FramePosteriors { log_probs, blank })
    }

    /// From probabilities; each row is taken as given (not renormalized).
    pub fn from_probs(probs: &Tensor, blank: TokenId) -> Result<Self> {
        Self::new(probs.map(f64::ln), blank)
    }

    pub fn log_probs(&self) -> &Tensor {
        &self.log_probs
    }

    pub fn blank(&self) -> TokenId {
        self.blank
    }

    pub fn frames(&self) -> usize {
        self.log_probs.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.log_probs.shape()[1]
    }

    /// Per-frame most probable symbol.
    pub fn argmax_path(&self) -> Vec<TokenId> {
        (0..self.frames()).map(|t| self.log_probs.argmax_row(t)).collect()
    }
}

/// Merges adjacent repeats, then drops blanks.
pub fn collapse(path: &[TokenId], blank: TokenId) -> Vec<TokenId> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in path {
        if Some(s) != prev && s != blank {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// Fewest frames any path needs to emit `labels`.
pub fn min_frames(labels: &[TokenId]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// `[ε, y1, ε, y2, …, ε]`
fn interleave_blanks(labels: &[TokenId], blank: TokenId) -> Vec<TokenId> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(blank);
    for &y in labels {
        ext.push(y);
        ext.push(blank);
    }
    ext
}

/// Whether state `s` may be entered directly from `s − 2`.
fn skip_allowed(ext: &[TokenId], s: usize, blank: TokenId) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

/// `ln P(labels | X)` by the log-space forward recursion. Infeasible label
/// sequences give `-inf`.
pub fn ctc_log_prob(post: &FramePosteriors, labels: &[TokenId]) -> f64 {
    let frames = post.frames();
    if frames == 0 {
        return if labels.is_empty() { 0.0 } else { f64::NEG_INFINITY };
    }
    if min_frames(labels) > frames {
        return f64::NEG_INFINITY;
    }
    let blank = post.blank();
    let ext = interleave_blanks(labels, blank);
    let s_len = ext.len();
    let lp = post.log_probs();
    let mut alpha = vec![f64::NEG_INFINITY; s_len];
    alpha[0] = lp.at(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp.at(0, ext[1]);
    }
    let mut next = vec![f64::NEG_INFINITY; s_len];
    for t in 1..frames {
        for s in 0..s_len {
            let mut acc = alpha[s];
            if s >= 1 {
                acc = log_add_exp(acc, alpha[s - 1]);
            }
            if skip_allowed(&ext, s, blank) {
                acc = log_add_exp(acc, alpha[s - 2]);
            }
            next[s] = acc + lp.at(t, ext[s]);
        }
        std::mem::swap(&mut alpha, &mut next);
    }
    if s_len > 1 {
        log_add_exp(alpha[s_len - 1], alpha[s_len - 2])
    } else {
        alpha[0]
    }
}

pub const ORACLE_MAX_FRAMES: usize = 8;
pub const ORACLE_MAX_TOKENS: usize = 4;

fn oracle_guard(post: &FramePosteriors) -> Result<()> {
    if post.frames() > ORACLE_MAX_FRAMES || post.classes() > ORACLE_MAX_TOKENS + 1 {
        return Err(Error::Contract(format!(
            "enumeration oracle limited to {ORACLE_MAX_FRAMES} frames and {ORACLE_MAX_TOKENS} tokens, got {}×{}",
            post.frames(),
            post.classes()
        )));
    }
    Ok(())
}

/// Calls `visit(path, ln P(path))` for every frame-level path.
fn for_each_path(post: &FramePosteriors, mut visit: impl FnMut(&[TokenId], f64)) {
    let (frames, classes) = (post.frames(), post.classes());
    let mut path = vec![0; frames];
    loop {
        let lp: f64 = path.iter().enumerate().map(|(t, &s)| post.log_probs().at(t, s)).sum();
        visit(&path, lp);
        let mut t = frames;
        loop {
            if t == 0 {
                return;
            }
            t -= 1;
            path[t] += 1;
            if path[t] < classes {
                break;
            }
            path[t] = 0;
        }
    }
}

/// Brute-force `ln P(labels | X)`: sums every path that collapses to `labels`.
/// Exponential in `T'`; restricted to tiny problems.
pub fn ctc_log_prob_oracle(post: &FramePosteriors, labels: &[TokenId]) -> Result<f64> {
    oracle_guard(post)?;
    let mut terms = Vec::new();
    for_each_path(post, |path, lp| {
        if collapse(path, post.blank()) == labels {
            terms.push(lp);
        }
    });
    Ok(log_sum_exp(&terms))
}

/// Probability of every distinct collapsed output, by enumeration.
pub fn output_distribution_oracle(post: &FramePosteriors) -> Result<HashMap<Vec<TokenId>, f64>> {
    oracle_guard(post)?;
    let mut dist: HashMap<Vec<TokenId>, f64> = HashMap::new();
    for_each_path(post, |path, lp| {
        *dist.entry(collapse(path, post.blank())).or_default() += lp.exp();
    });
    Ok(dist)
}

/// `−ln P(labels | X)` as a differentiable scalar, built from tape operations
/// over the same forward recursion as [`ctc_log_prob`].
///
/// `log_probs` is `[T'×(|V|+1)]`. An infeasible target is a training error.
pub fn ctc_loss<'t>(log_probs: Var<'t>, labels: &[TokenId], blank: TokenId) -> Result<Var<'t>> {
    let shape = log_probs.shape();
    if shape.len() != 2 || blank >= shape[1] || labels.iter().any(|&y| y >= shape[1] || y == blank) {
        return Err(Error::Shape(format!(
            "ctc_loss needs [T×C] log-probs and labels below C excluding blank, got {shape:?}"
        )));
    }
    let frames = shape[0];
    if frames == 0 || min_frames(labels) > frames {
        return Err(Error::Training(format!(
            "target of {} tokens is infeasible in {frames} frames",
            labels.len()
        )));
    }
    let tape = log_probs.tape();
    let ext = interleave_blanks(labels, blank);
    let s_len = ext.len();
    let emissions = log_probs.index_cols(&ext)?;
    let row = |t: usize| emissions.slice_rows(t, 1).and_then(|r| r.reshape(&[s_len]));

    let neg_inf = |n: usize| tape.constant(Tensor::full(&[n], f64::NEG_INFINITY));
    let mut start = vec![f64::NEG_INFINITY; s_len];
    start[0] = 0.0;
    if s_len > 1 {
        start[1] = 0.0;
    }
    let mut alpha = row(0)?.add(tape.constant(Tensor::vector(start)))?;
    let skip_mask = tape.constant(Tensor::vector(
        (0..s_len)
            .map(|s| if skip_allowed(&ext, s, blank) { 0.0 } else { f64::NEG_INFINITY })
            .collect(),
    ));
    for t in 1..frames {
        let mut acc = alpha;
        if s_len > 1 {
            let shifted = Var::concat_rows(&[neg_inf(1), alpha.slice_rows(0, s_len - 1)?])?;
            acc = acc.log_add_exp(shifted)?;
        }
        if s_len > 2 {
            let shifted = Var::concat_rows(&[neg_inf(2), alpha.slice_rows(0, s_len - 2)?])?;
            acc = acc.log_add_exp(shifted.add(skip_mask)?)?;
        }
        alpha = acc.add(row(t)?)?;
    }
    let total = if s_len > 1 {
        alpha.slice_rows(s_len - 1, 1)?.log_add_exp(alpha.slice_rows(s_len - 2, 1)?)?
    } else {
        alpha
    };
    let loss = total.sum().neg();
    if !loss.value().item().is_finite() {
        return Err(Error::Training("CTC loss is not finite".into()));
    }
    Ok(loss)
}

/// How a token's confidence is aggregated over its emission frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceRule {
    /// Highest frame posterior of the token within its span.
    #[default]
    MaxFrame,
    /// Mean frame posterior over the span.
    MeanFrame,
    /// Posterior at the first frame of the span.
    FirstFrame,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtcGreedyResult {
    pub tokens: Vec<TokenId>,
    /// Per-token probability in `[0, 1]`.
    pub confidences: Vec<f64>,
    /// Inclusive `(start, end)` frame span of each token's emission run.
    pub frame_spans: Vec<(usize, usize)>,
}

impl CtcGreedyResult {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn greedy_decode(post: &FramePosteriors) -> CtcGreedyResult {
    greedy_decode_with(post, ConfidenceRule::MaxFrame)
}

/// Best-path decoding: per-frame argmax, collapsed.
pub fn greedy_decode_with(post: &FramePosteriors, rule: ConfidenceRule) -> CtcGreedyResult {
    let blank = post.blank();
    let lp = post.log_probs();
    let mut result = CtcGreedyResult {
        tokens: Vec::new(),
        confidences: Vec::new(),
        frame_spans: Vec::new(),
    };
    let mut prev = None;
    for t in 0..post.frames() {
        let s = argmax(lp.row(t));
        if s != blank {
            if Some(s) == prev {
                result.frame_spans.last_mut().unwrap().1 = t;
            } else {
                result.tokens.push(s);
                result.frame_spans.push((t, t));
            }
        }
        prev = Some(s);
    }
    result.confidences = result
        .tokens
        .iter()
        .zip(&result.frame_spans)
        .map(|(&tok, &(a, b))| {
            let probs = (a..=b).map(|t| lp.at(t, tok).exp());
            match rule {
                ConfidenceRule::MaxFrame => probs.fold(0.0, f64::max),
                ConfidenceRule::MeanFrame => probs.sum::<f64>() / (b - a + 1) as f64,
                ConfidenceRule::FirstFrame => lp.at(a, tok).exp(),
            }
        })
        .collect();
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    const A: TokenId = 0;
    const B: TokenId = 1;
    const E: TokenId = 2;

    fn uniform(frames: usize, classes: usize) -> FramePosteriors {
        FramePosteriors::new(Tensor::full(&[frames, classes], -(classes as f64).ln()), classes - 1).unwrap()
    }

    #[test]
    fn collapse_examples() {
        assert_eq!(collapse(&[A, A, E, B, E, B], E), vec![A, B, B]);
        assert_eq!(collapse(&[E, E, E], E), Vec::<TokenId>::new());
        assert_eq!(collapse(&[A, E, A], E), vec![A, A]);
    }

    #[test]
    fn two_frame_single_token_probabilities() {
        // V = {a}, blank = 1, each symbol has probability 1/2 at each frame
        let post = uniform(2, 2);
        assert!((ctc_log_prob(&post, &[0]).exp() - 0.75).abs() < 1e-15);
        assert!((ctc_log_prob(&post, &[]).exp() - 0.25).abs() < 1e-15);
        assert_eq!(ctc_log_prob(&post, &[0, 0]), f64::NEG_INFINITY);
        assert!((ctc_log_prob_oracle(&post, &[0]).unwrap().exp() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn empty_target_single_frame_is_blank_probability() {
        let post = uniform(1, 2);
        assert!((ctc_log_prob(&post, &[]) - 0.5f64.ln()).abs() < 1e-15);
        assert!((ctc_log_prob_oracle(&post, &[]).unwrap() - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn oracle_rejects_large_problems() {
        assert!(ctc_log_prob_oracle(&uniform(9, 3), &[0]).is_err());
        assert!(ctc_log_prob_oracle(&uniform(3, 6), &[0]).is_err());
    }

    #[test]
    fn loss_of_empty_target_on_one_uniform_frame_is_ln2() {
        let tape = Tape::new();
        let lp = tape.constant(uniform(1, 2).log_probs().clone());
        let loss = ctc_loss(lp, &[], 1).unwrap();
        assert!((loss.value().item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn loss_flags_infeasible_targets() {
        let tape = Tape::new();
        let lp = tape.constant(uniform(2, 2).log_probs().clone());
        assert!(matches!(ctc_loss(lp, &[0, 0], 1), Err(Error::Training(_))));
    }

    #[test]
    fn greedy_spans_and_confidences() {
        let probs = Tensor::from_rows(&[
            vec![0.7, 0.1, 0.2],
            vec![0.9, 0.05, 0.05],
            vec![0.1, 0.1, 0.8],
            vec![0.2, 0.6, 0.2],
        ])
        .unwrap();
        let post = FramePosteriors::from_probs(&probs, E).unwrap();
        let r = greedy_decode(&post);
        assert_eq!(r.tokens, vec![A, B]);
        assert_eq!(r.frame_spans, vec![(0, 1), (3, 3)]);
        assert!((r.confidences[0] - 0.9).abs() < 1e-12);
        assert!((r.confidences[1] - 0.6).abs() < 1e-12);
        let mean = greedy_decode_with(&post, ConfidenceRule::MeanFrame);
        assert!((mean.confidences[0] - 0.8).abs() < 1e-12);
        let first = greedy_decode_with(&post, ConfidenceRule::FirstFrame);
        assert!((first.confidences[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn all_blank_decodes_to_nothing() {
        let probs = Tensor::from_rows(&[vec![0.1, 0.1, 0.8], vec![0.2, 0.2, 0.6]]).unwrap();
        let r = greedy_decode(&FramePosteriors::from_probs(&probs, E).unwrap());
        assert!(r.is_empty());
        assert!(r.confidences.is_empty());
    }
}
