//! Training-time masking: masked-token targets for the decoder, and the
//! deletion- and insertion-simulated samples that teach the length head.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TokenId, LENGTH_CLASSES};
use crate::numerics::{Rng, Tensor, Var};

/// Largest length class the length head can emit.
pub const MAX_LENGTH_CLASS: usize = LENGTH_CLASSES - 1;
const DELETION_RETRIES: usize = 8;
const UNLIKELIHOOD_EPS: f64 = 1e-6;

/// A token sequence in which some positions hold the mask symbol.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSequence {
    tokens: Vec<TokenId>,
    mask_id: TokenId,
}

impl MaskedSequence {
    pub fn new(tokens: Vec<TokenId>, mask_id: TokenId) -> Self {
        MaskedSequence { tokens, mask_id }
    }

    /// Replaces `positions` of `reference` with the mask symbol.
    pub fn from_positions(reference: &[TokenId], positions: &[usize], mask_id: TokenId) -> Self {
        let mut tokens = reference.to_vec();
        for &p in positions {
            tokens[p] = mask_id;
        }
        MaskedSequence { tokens, mask_id }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.tokens[i] == self.mask_id
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_masked(i)).collect()
    }

    pub fn observed_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_masked(i)).collect()
    }

    pub fn num_masked(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == self.mask_id).count()
    }

    /// The sequence with every mask removed.
    pub fn observed_tokens(&self) -> Vec<TokenId> {
        self.tokens.iter().copied().filter(|&t| t != self.mask_id).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DlpKind {
    Deletion,
    Insertion,
}

/// Masked sequence plus a target length class for every mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DlpSample {
    pub masked: MaskedSequence,
    /// Masked position → length class.
    pub length_labels: BTreeMap<usize, usize>,
    pub kind: DlpKind,
}

/// Masks `N ~ Uniform{1..L}` distinct uniformly chosen positions.
pub fn sample_mlm_mask(reference: &[TokenId], mask_id: TokenId, rng: &mut Rng) -> Result<MaskedSequence> {
    let positions = sample_mask_positions(reference, rng)?;
    Ok(MaskedSequence::from_positions(reference, &positions, mask_id))
}

fn sample_mask_positions(reference: &[TokenId], rng: &mut Rng) -> Result<Vec<usize>> {
    let len = reference.len();
    if len == 0 {
        return Err(Error::Contract("cannot mask an empty sequence".into()));
    }
    let n = rng.int_in(1, len);
    Ok(rng.distinct(len, n))
}

/// Maximal runs of consecutive positions as `(start, length)`.
fn runs(sorted_positions: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &p in sorted_positions {
        match out.last_mut() {
            Some((start, len)) if *start + *len == p => *len += 1,
            _ => out.push((p, 1)),
        }
    }
    out
}

/// Builds a deletion-simulated sample: each run of masked positions collapses
/// into one mask labelled with the run length. Runs longer than the largest
/// length class are split into adjacent masks.
pub fn deletion_sample_from(reference: &[TokenId], masked_positions: &[usize], mask_id: TokenId) -> DlpSample {
    let mut sorted = masked_positions.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut tokens = Vec::with_capacity(reference.len());
    let mut labels = BTreeMap::new();
    let mut i = 0;
    for (start, len) in runs(&sorted) {
        tokens.extend_from_slice(&reference[i..start]);
        let mut left = len;
        while left > 0 {
            let chunk = left.min(MAX_LENGTH_CLASS);
            labels.insert(tokens.len(), chunk);
            tokens.push(mask_id);
            left -= chunk;
        }
        i = start + len;
    }
    tokens.extend_from_slice(&reference[i..]);
    DlpSample {
        masked: MaskedSequence::new(tokens, mask_id),
        length_labels: labels,
        kind: DlpKind::Deletion,
    }
}

/// Random deletion-simulated sample. Mask patterns with a run beyond the
/// largest class are resampled a bounded number of times, then split.
pub fn make_deletion_sample(reference: &[TokenId], mask_id: TokenId, rng: &mut Rng) -> Result<DlpSample> {
    let mut positions = sample_mask_positions(reference, rng)?;
    for _ in 0..DELETION_RETRIES {
        if runs(&positions).iter().all(|&(_, len)| len <= MAX_LENGTH_CLASS) {
            break;
        }
        positions = sample_mask_positions(reference, rng)?;
    }
    Ok(deletion_sample_from(reference, &positions, mask_id))
}

/// Builds an insertion-simulated sample: one mask (label 0) is inserted
/// before `reference[g]` for every `g` in `gaps` (`g == L` appends).
pub fn insertion_sample_from(reference: &[TokenId], gaps: &[usize], mask_id: TokenId) -> Result<DlpSample> {
    if let Some(&g) = gaps.iter().find(|&&g| g > reference.len()) {
        return Err(Error::Contract(format!("gap {g} beyond sequence of length {}", reference.len())));
    }
    let mut per_gap = vec![0usize; reference.len() + 1];
    for &g in gaps {
        per_gap[g] += 1;
    }
    let mut tokens = Vec::with_capacity(reference.len() + gaps.len());
    let mut labels = BTreeMap::new();
    for (g, &count) in per_gap.iter().enumerate() {
        for _ in 0..count {
            labels.insert(tokens.len(), 0);
            tokens.push(mask_id);
        }
        if let Some(&y) = reference.get(g) {
            tokens.push(y);
        }
    }
    Ok(DlpSample {
        masked: MaskedSequence::new(tokens, mask_id),
        length_labels: labels,
        kind: DlpKind::Insertion,
    })
}

/// Inserts `k ~ Uniform{1..max(1, ⌈L/4⌉)}` masks at uniformly chosen gaps.
pub fn make_insertion_sample(reference: &[TokenId], mask_id: TokenId, rng: &mut Rng) -> Result<DlpSample> {
    let len = reference.len();
    let k = rng.int_in(1, len.div_ceil(4).max(1));
    let gaps: Vec<usize> = (0..k).map(|_| rng.int_in(0, len)).collect();
    insertion_sample_from(reference, &gaps, mask_id)
}

/// Copy of `masked` where each observed token is swapped, with probability
/// `rate`, for a different regular token drawn uniformly from `0..vocab_size`.
/// Returns the noisy sequence and the swapped positions.
pub fn substitute_observed(
    masked: &MaskedSequence,
    vocab_size: usize,
    rate: f64,
    rng: &mut Rng,
) -> (MaskedSequence, Vec<usize>) {
    let mut tokens = masked.tokens.clone();
    let mut swapped = Vec::new();
    if vocab_size < 2 || rate <= 0.0 {
        return (masked.clone(), swapped);
    }
    for (i, t) in tokens.iter_mut().enumerate() {
        if *t == masked.mask_id || rng.uniform() >= rate {
            continue;
        }
        let r = rng.below(vocab_size - 1);
        *t = if r >= *t { r + 1 } else { r };
        swapped.push(i);
    }
    (MaskedSequence::new(tokens, masked.mask_id), swapped)
}

/// Copy of `masked` where each observed token is followed, with probability
/// `rate`, by a spurious copy of itself. Returns the longer sequence and, for
/// every original position, its index in it; the remaining indices are the
/// inserted copies.
pub fn repeat_observed(masked: &MaskedSequence, rate: f64, rng: &mut Rng) -> (MaskedSequence, Vec<usize>) {
    let mut tokens = Vec::with_capacity(masked.len());
    let mut origin = Vec::with_capacity(masked.len());
    for &t in &masked.tokens {
        origin.push(tokens.len());
        tokens.push(t);
        if rate > 0.0 && t != masked.mask_id && rng.uniform() < rate {
            tokens.push(t);
        }
    }
    (MaskedSequence::new(tokens, masked.mask_id), origin)
}

/// Unlikelihood of the given tokens at the given positions, `-Σ ln(1 - p)`.
/// Teaches the decoder to distrust spurious observed tokens.
pub fn unlikelihood_loss<'t>(log_probs: Var<'t>, positions: &[usize], tokens: &[TokenId]) -> Result<Var<'t>> {
    if positions.len() != tokens.len() {
        return Err(Error::Contract("positions and tokens differ in length".into()));
    }
    if positions.is_empty() {
        return Ok(zero(log_probs));
    }
    let p = log_probs.index_rows(positions)?.pick(tokens)?.exp();
    Ok(p.neg().add_scalar(1.0 + UNLIKELIHOOD_EPS).ln().sum().neg())
}

/// Negative log-likelihood of the reference at observed positions.
pub fn observed_loss<'t>(log_probs: Var<'t>, masked: &MaskedSequence, reference: &[TokenId]) -> Result<Var<'t>> {
    if masked.len() != reference.len() {
        return Err(Error::Contract("masked sequence and reference differ in length".into()));
    }
    let positions = masked.observed_positions();
    if positions.is_empty() {
        return Ok(zero(log_probs));
    }
    let targets: Vec<TokenId> = positions.iter().map(|&p| reference[p]).collect();
    Ok(log_probs.index_rows(&positions)?.pick(&targets)?.sum().neg())
}

fn zero<'t>(like: Var<'t>) -> Var<'t> {
    like.tape().constant(Tensor::scalar(0.0))
}

/// Negative log-likelihood of the reference tokens at masked positions.
/// `log_probs` is `[L×|V|]`; observed positions contribute nothing.
pub fn mlm_loss<'t>(log_probs: Var<'t>, masked: &MaskedSequence, reference: &[TokenId]) -> Result<Var<'t>> {
    if masked.len() != reference.len() {
        return Err(Error::Contract(format!(
            "masked sequence has {} positions, reference {}",
            masked.len(),
            reference.len()
        )));
    }
    let positions = masked.masked_positions();
    if positions.is_empty() {
        return Ok(zero(log_probs));
    }
    let targets: Vec<TokenId> = positions.iter().map(|&p| reference[p]).collect();
    Ok(log_probs.index_rows(&positions)?.pick(&targets)?.sum().neg())
}

/// Cross-entropy of the length classes at the sample's masked positions.
pub fn dlp_loss<'t>(length_log_probs: Var<'t>, sample: &DlpSample) -> Result<Var<'t>> {
    if let Some((p, l)) = sample.length_labels.iter().find(|(_, &l)| l > MAX_LENGTH_CLASS) {
        return Err(Error::Contract(format!("length label {l} at {p} exceeds {MAX_LENGTH_CLASS}")));
    }
    if sample.length_labels.is_empty() {
        return Ok(zero(length_log_probs));
    }
    let positions: Vec<usize> = sample.length_labels.keys().copied().collect();
    let labels: Vec<usize> = sample.length_labels.values().copied().collect();
    Ok(length_log_probs.index_rows(&positions)?.pick(&labels)?.sum().neg())
}

/// Objective weights; `alpha` balances CTC against the masked-token loss and
/// `beta` scales the length loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.3, beta: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} not in [0, 1]", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta {} must be finite and non-negative", self.beta)));
        }
        Ok(())
    }
}

/// `α·ctc + (1−α)·mlm + β·dlp`, all as negative log-likelihoods.
pub fn combined_loss<'t>(ctc: Var<'t>, mlm: Var<'t>, dlp: Var<'t>, weights: LossWeights) -> Result<Var<'t>> {
    weights.validate()?;
    ctc.scale(weights.alpha)
        .add(mlm.scale(1.0 - weights.alpha))?
        .add(dlp.scale(weights.beta))
}
