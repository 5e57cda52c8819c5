//! Inference strategies on top of a CTC greedy hypothesis.
//!
//! * `ctc_greedy`: the collapsed best path, no decoder calls.
//! * `maskctc`: mask tokens whose CTC confidence is below `p_thres`, then fill
//!   the `C = max(1, ⌊N/K⌋)` most confident masks per decoder call; the K-th
//!   call fills whatever remains.
//! * `shrink_expand`: mask by decoder confidence, then loop merging runs of
//!   masks, expanding each to its predicted length (0 deletes it) and filling
//!   `C` of them. Each loop costs two decoder calls.
//! * `mask_predict`: start from `target_len` masks and re-mask the least
//!   confident `⌊L·(K−k)/K⌋` positions at iteration `k`.
//! * `restricted_mp`: mask-predict seeded from the CTC hypothesis, never
//!   re-masking more positions than were masked initially.
//!
//! Every strategy records a [`DecodeTrace`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ctc::{greedy_decode_with, ConfidenceRule, CtcGreedyResult};
use crate::error::{Error, Result};
use crate::model::{DecoderPass, Model, TokenId, Vocabulary};
use crate::numerics::{argmax, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    CtcGreedy,
    MaskCtc,
    ShrinkExpand,
    MaskPredict,
    RestrictedMp,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::CtcGreedy,
        Strategy::MaskCtc,
        Strategy::ShrinkExpand,
        Strategy::MaskPredict,
        Strategy::RestrictedMp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::CtcGreedy => "ctc_greedy",
            Strategy::MaskCtc => "maskctc",
            Strategy::ShrinkExpand => "shrink_expand",
            Strategy::MaskPredict => "mask_predict",
            Strategy::RestrictedMp => "restricted_mp",
        }
    }

    /// Default masking threshold for the strategy. The CTC-confidence value
    /// was picked from {0.9, 0.99, 0.999} on a development split.
    pub fn default_threshold(self) -> f64 {
        match self {
            Strategy::ShrinkExpand => 0.5,
            _ => 0.9,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    /// Iteration budget `K`.
    pub iterations: usize,
    pub p_thres: f64,
    /// Shrink-and-expand loop bound; `None` means `2·K`.
    pub max_loop: Option<usize>,
    /// Recompute `C` from the current mask count after every expansion.
    pub recompute_c: bool,
    pub confidence: ConfidenceRule,
    /// Length for plain mask-predict; defaults to the CTC output length.
    pub target_len: Option<usize>,
}

impl DecodeConfig {
    pub fn new(strategy: Strategy, iterations: usize) -> Self {
        DecodeConfig {
            strategy,
            iterations,
            p_thres: strategy.default_threshold(),
            max_loop: None,
            recompute_c: false,
            confidence: ConfidenceRule::MaxFrame,
            target_len: None,
        }
    }

    pub fn with_threshold(mut self, p_thres: f64) -> Self {
        self.p_thres = p_thres;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 && self.strategy != Strategy::CtcGreedy {
            return Err(Error::Config("iterations K must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p_thres) {
            return Err(Error::Config(format!("p_thres {} not in [0, 1]", self.p_thres)));
        }
        if self.max_loop == Some(0) {
            return Err(Error::Config("max_loop must be at least 1".into()));
        }
        Ok(())
    }

    pub fn loop_bound(&self) -> usize {
        self.max_loop.unwrap_or(2 * self.iterations.max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fill {
    pub position: usize,
    pub token: TokenId,
    pub prob: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Masked positions at the time of the decoder call.
    pub masked_positions: Vec<usize>,
    /// `(position, length class)` for every mask before expansion.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub length_predictions: Vec<(usize, usize)>,
    pub filled: Vec<Fill>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub iterations: Vec<IterationRecord>,
    pub initial_masks: usize,
    pub decoder_forward_count: usize,
    pub encoder_forward_count: usize,
    /// Set when the loop bound was hit and leftover masks were filled at once.
    pub force_filled: bool,
}

/// Anything that can run the masked-token decoder.
pub trait MaskPredictor {
    fn vocab(&self) -> &Vocabulary;
    fn decoder_pass(&self, enc: &Tensor, tokens: &[TokenId], with_lengths: bool) -> Result<DecoderPass>;
}

impl MaskPredictor for Model {
    fn vocab(&self) -> &Vocabulary {
        Model::vocab(self)
    }

    fn decoder_pass(&self, enc: &Tensor, tokens: &[TokenId], with_lengths: bool) -> Result<DecoderPass> {
        Model::decoder_pass(self, enc, tokens, with_lengths)
    }
}

struct Counted<'a, P: ?Sized> {
    inner: &'a P,
    calls: usize,
}

impl<P: MaskPredictor + ?Sized> Counted<'_, P> {
    fn pass(&mut self, enc: &Tensor, tokens: &[TokenId], with_lengths: bool) -> Result<DecoderPass> {
        self.calls += 1;
        self.inner.decoder_pass(enc, tokens, with_lengths)
    }
}

fn masked_positions(tokens: &[TokenId], mask: TokenId) -> Vec<usize> {
    (0..tokens.len()).filter(|&i| tokens[i] == mask).collect()
}

/// Most probable token and its probability at each of `positions`.
fn predictions(pass: &DecoderPass, positions: &[usize]) -> Vec<Fill> {
    positions
        .iter()
        .map(|&p| {
            let row = pass.token_log_probs.row(p);
            let token = argmax(row);
            Fill {
                position: p,
                token,
                prob: row[token].exp(),
            }
        })
        .collect()
}

/// The `count` most confident predictions; ties go to the earlier position.
fn top_confident(mut candidates: Vec<Fill>, count: usize) -> Vec<Fill> {
    candidates.sort_by(|a, b| b.prob.total_cmp(&a.prob).then(a.position.cmp(&b.position)));
    candidates.truncate(count);
    candidates.sort_by_key(|f| f.position);
    candidates
}

/// The `count` least confident positions; ties go to the earlier position.
fn least_confident(probs: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(a.cmp(&b)));
    order.truncate(count);
    order.sort_unstable();
    order
}

fn masks_per_step(masks: usize, iterations: usize) -> usize {
    (masks / iterations.max(1)).max(1)
}

/// Merges every run of consecutive masks into a single mask.
pub fn shrink(tokens: &[TokenId], mask: TokenId) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(tokens.len());
    for &t in tokens {
        if t == mask && out.last() == Some(&mask) {
            continue;
        }
        out.push(t);
    }
    out
}

/// Replaces the i-th mask with `lengths[i]` masks (0 deletes it). The total
/// length is capped at `max_len`; masks are served left to right.
pub fn expand(tokens: &[TokenId], lengths: &[usize], mask: TokenId, max_len: usize) -> Result<Vec<TokenId>> {
    let n_masks = tokens.iter().filter(|&&t| t == mask).count();
    if lengths.len() != n_masks {
        return Err(Error::Contract(format!(
            "{} lengths given for {n_masks} masks",
            lengths.len()
        )));
    }
    let observed = tokens.len() - n_masks;
    let mut budget = max_len.saturating_sub(observed);
    let mut out = Vec::with_capacity(tokens.len());
    let mut next = lengths.iter();
    for &t in tokens {
        if t == mask {
            let want = *next.next().unwrap();
            let take = want.min(budget);
            budget -= take;
            out.extend(std::iter::repeat_n(mask, take));
        } else {
            out.push(t);
        }
    }
    Ok(out)
}

/// Conventional Mask-CTC refinement.
pub fn decode_maskctc<P: MaskPredictor + ?Sized>(
    predictor: &P,
    enc: &Tensor,
    ctc: &CtcGreedyResult,
    cfg: &DecodeConfig,
) -> Result<(Vec<TokenId>, DecodeTrace)> {
    cfg.validate()?;
    let mask = predictor.vocab().mask_id();
    let mut tokens = ctc.tokens.clone();
    for (t, &c) in tokens.iter_mut().zip(&ctc.confidences) {
        if c < cfg.p_thres {
            *t = mask;
        }
    }
    let mut trace = DecodeTrace::default();
    let initial = masked_positions(&tokens, mask).len();
    trace.initial_masks = initial;
    let per_step = masks_per_step(initial, cfg.iterations);
    let mut decoder = Counted { inner: predictor, calls: 0 };
    let mut step = 0;
    loop {
        let masked = masked_positions(&tokens, mask);
        if masked.is_empty() {
            break;
        }
        let pass = decoder.pass(enc, &tokens, false)?;
        let candidates = predictions(&pass, &masked);
        let last = step + 1 >= cfg.iterations;
        let chosen = if last { candidates } else { top_confident(candidates, per_step) };
        for f in &chosen {
            tokens[f.position] = f.token;
        }
        trace.iterations.push(IterationRecord {
            masked_positions: masked,
            length_predictions: Vec::new(),
            filled: chosen,
        });
        step += 1;
    }
    trace.decoder_forward_count = decoder.calls;
    Ok((tokens, trace))
}

/// Refinement that can delete and insert tokens through the length head.
pub fn decode_shrink_expand<P: MaskPredictor + ?Sized>(
    predictor: &P,
    enc: &Tensor,
    ctc: &CtcGreedyResult,
    cfg: &DecodeConfig,
) -> Result<(Vec<TokenId>, DecodeTrace)> {
    cfg.validate()?;
    let mask = predictor.vocab().mask_id();
    let mut trace = DecodeTrace::default();
    let mut tokens = ctc.tokens.clone();
    if tokens.is_empty() {
        return Ok((tokens, trace));
    }
    let mut decoder = Counted { inner: predictor, calls: 0 };

    // score the raw hypothesis with the decoder and mask its doubtful tokens
    let pass = decoder.pass(enc, &tokens, false)?;
    let mut initial = Vec::new();
    for (l, t) in tokens.iter_mut().enumerate() {
        if pass.token_log_probs.at(l, *t).exp() < cfg.p_thres {
            *t = mask;
            initial.push(l);
        }
    }
    trace.initial_masks = initial.len();
    trace.iterations.push(IterationRecord {
        masked_positions: initial.clone(),
        ..Default::default()
    });
    let mut per_step = masks_per_step(initial.len(), cfg.iterations);
    let bound = cfg.loop_bound();

    for round in 0..bound {
        tokens = shrink(&tokens, mask);
        let masked = masked_positions(&tokens, mask);
        if masked.is_empty() {
            break;
        }
        let pass = decoder.pass(enc, &tokens, true)?;
        let length_lp = pass
            .length_log_probs
            .as_ref()
            .ok_or_else(|| Error::Contract("decoder returned no length predictions".into()))?;
        let lengths: Vec<usize> = masked.iter().map(|&p| argmax(length_lp.row(p))).collect();
        let cap = 2 * tokens.len();
        tokens = expand(&tokens, &lengths, mask, cap)?;
        let mut record = IterationRecord {
            length_predictions: masked.iter().copied().zip(lengths).collect(),
            ..Default::default()
        };
        let masked = masked_positions(&tokens, mask);
        if masked.is_empty() || tokens.is_empty() {
            trace.iterations.push(record);
            break;
        }
        if cfg.recompute_c {
            per_step = masks_per_step(masked.len(), cfg.iterations);
        }
        let pass = decoder.pass(enc, &tokens, false)?;
        let candidates = predictions(&pass, &masked);
        let last = round + 1 == bound;
        if last && candidates.len() > per_step {
            trace.force_filled = true;
        }
        let chosen = if last { candidates } else { top_confident(candidates, per_step) };
        for f in &chosen {
            tokens[f.position] = f.token;
        }
        record.masked_positions = masked;
        record.filled = chosen;
        trace.iterations.push(record);
    }
    trace.decoder_forward_count = decoder.calls;
    debug_assert!(!tokens.contains(&mask));
    Ok((tokens, trace))
}

/// Mask-predict from an all-mask sequence of `target_len` tokens.
pub fn decode_mask_predict<P: MaskPredictor + ?Sized>(
    predictor: &P,
    enc: &Tensor,
    target_len: usize,
    cfg: &DecodeConfig,
) -> Result<(Vec<TokenId>, DecodeTrace)> {
    cfg.validate()?;
    if target_len == 0 {
        return Err(Error::Contract("mask-predict needs target_len ≥ 1".into()));
    }
    let mask = predictor.vocab().mask_id();
    let tokens = vec![mask; target_len];
    let probs = vec![0.0; target_len];
    let all: Vec<usize> = (0..target_len).collect();
    iterate_mask_predict(predictor, enc, tokens, probs, all, usize::MAX, cfg)
}

/// Mask-predict seeded from the CTC hypothesis with re-masking bounded by
/// the initial mask count.
pub fn decode_restricted_mp<P: MaskPredictor + ?Sized>(
    predictor: &P,
    enc: &Tensor,
    ctc: &CtcGreedyResult,
    cfg: &DecodeConfig,
) -> Result<(Vec<TokenId>, DecodeTrace)> {
    cfg.validate()?;
    let initial: Vec<usize> = (0..ctc.len()).filter(|&i| ctc.confidences[i] < cfg.p_thres).collect();
    if initial.is_empty() {
        return Ok((ctc.tokens.clone(), DecodeTrace::default()));
    }
    let budget = initial.len();
    iterate_mask_predict(
        predictor,
        enc,
        ctc.tokens.clone(),
        ctc.confidences.clone(),
        initial,
        budget,
        cfg,
    )
}

fn iterate_mask_predict<P: MaskPredictor + ?Sized>(
    predictor: &P,
    enc: &Tensor,
    mut tokens: Vec<TokenId>,
    mut probs: Vec<f64>,
    first: Vec<usize>,
    remask_budget: usize,
    cfg: &DecodeConfig,
) -> Result<(Vec<TokenId>, DecodeTrace)> {
    let mask = predictor.vocab().mask_id();
    let len = tokens.len();
    let k_total = cfg.iterations;
    let mut trace = DecodeTrace {
        initial_masks: first.len(),
        ..Default::default()
    };
    let mut decoder = Counted { inner: predictor, calls: 0 };
    for k in 0..k_total {
        let masked = if k == 0 {
            first.clone()
        } else {
            let n = (len * (k_total - k) / k_total).min(remask_budget);
            if n == 0 {
                break;
            }
            least_confident(&probs, n)
        };
        for &p in &masked {
            tokens[p] = mask;
        }
        let pass = decoder.pass(enc, &tokens, false)?;
        let filled = predictions(&pass, &masked);
        for f in &filled {
            tokens[f.position] = f.token;
            probs[f.position] = f.prob;
        }
        trace.iterations.push(IterationRecord {
            masked_positions: masked,
            length_predictions: Vec::new(),
            filled,
        });
    }
    trace.decoder_forward_count = decoder.calls;
    Ok((tokens, trace))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<TokenId>,
    pub ctc: CtcGreedyResult,
    pub trace: DecodeTrace,
}

/// Full inference for one utterance: encoder, CTC greedy pass, then the
/// configured refinement.
pub fn recognize(model: &Model, features: &Tensor, cfg: &DecodeConfig) -> Result<Decoded> {
    cfg.validate()?;
    let enc = model.encode_features(features)?;
    let post = model.ctc_posteriors(&enc)?;
    let ctc = greedy_decode_with(&post, cfg.confidence);
    let (tokens, mut trace) = refine(model, &enc, &ctc, cfg)?;
    trace.encoder_forward_count = 1;
    Ok(Decoded { tokens, ctc, trace })
}

/// Applies the configured strategy to an existing CTC hypothesis.
pub fn refine<P: MaskPredictor + ?Sized>(
    predictor: &P,
    enc: &Tensor,
    ctc: &CtcGreedyResult,
    cfg: &DecodeConfig,
) -> Result<(Vec<TokenId>, DecodeTrace)> {
    match cfg.strategy {
        Strategy::CtcGreedy => Ok((ctc.tokens.clone(), DecodeTrace::default())),
        Strategy::MaskCtc => decode_maskctc(predictor, enc, ctc, cfg),
        Strategy::ShrinkExpand => decode_shrink_expand(predictor, enc, ctc, cfg),
        Strategy::RestrictedMp => decode_restricted_mp(predictor, enc, ctc, cfg),
        Strategy::MaskPredict => match cfg.target_len.unwrap_or(ctc.len()) {
            0 => Ok((Vec::new(), DecodeTrace::default())),
            n => decode_mask_predict(predictor, enc, n, cfg),
        },
    }
}
