//! Synthetic utterances with CTC-friendly structure.
//!
//! Every token owns a fixed prototype vector. An utterance renders each
//! reference token as its prototype repeated `dup` times, optionally separated
//! by zero-vector silence frames, plus Gaussian noise.
//!
//! On disk a corpus is a directory holding `manifest.jsonl` (one object per
//! utterance: `id`, `reference`, `offset` in bytes, `frames`), `features.bin`
//! (packed little-endian `f64`), `vocab.txt` (one regular token per line) and
//! `meta.json`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TokenId, Vocabulary};
use crate::numerics::{Rng, Tensor};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FEATURES_FILE: &str = "features.bin";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const META_FILE: &str = "meta.json";

/// Silence frames inserted inside a split token.
const SPLIT_GAP: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Frames per token, inclusive bounds.
    pub dup_min: usize,
    pub dup_max: usize,
    /// Upper bound on silence frames inserted between two tokens.
    pub max_silence: usize,
    pub noise_std: f64,
    pub feature_dim: usize,
    /// When non-zero, each token may only be followed by this many fixed
    /// successors, giving the references learnable context.
    pub successors: usize,
    /// Correlation between the prototypes of tokens `2k` and `2k+1`; 0 keeps
    /// them independent.
    pub pair_similarity: f64,
    /// Chance that a token lasting at least two frames is split in two by a
    /// silence gap, which a CTC model tends to read as a repeated token.
    pub split_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 10,
            min_len: 4,
            max_len: 12,
            dup_min: 2,
            dup_max: 4,
            max_silence: 2,
            noise_std: 0.1,
            feature_dim: 16,
            successors: 0,
            pair_similarity: 0.0,
            split_prob: 0.0,
            seed: 1,
        }
    }
}

impl SynthConfig {
    /// Reads a flat TOML file, then applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let cfg: SynthConfig = crate::config::load_flat(path, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab_size == 0 {
            return bad("vocab_size must be at least 1");
        }
        if self.min_len == 0 || self.max_len < self.min_len {
            return bad("need max_len ≥ min_len ≥ 1");
        }
        if self.dup_min == 0 || self.dup_max < self.dup_min {
            return bad("need dup_max ≥ dup_min ≥ 1");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be at least 1");
        }
        if self.successors >= self.vocab_size.max(2) {
            return bad("successors must be below vocab_size");
        }
        if self.pair_similarity > 0.0 && self.successors >= self.vocab_size.div_ceil(2) {
            return bad("with correlated pairs, successors must be below the number of pairs");
        }
        if !(0.0..=1.0).contains(&self.split_prob) {
            return bad("split_prob must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.pair_similarity) {
            return bad("pair_similarity must lie in [0, 1]");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Tensor,
    pub reference: Vec<TokenId>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub feature_dim: usize,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// One prototype row per token with standard normal entries. Odd tokens
/// are correlated with their even neighbour by `pair_similarity`.
pub fn prototypes(cfg: &SynthConfig) -> Tensor {
    let mut rng = Rng::new(cfg.seed).fork(0);
    let d = cfg.feature_dim;
    let mut data: Vec<f64> = (0..cfg.vocab_size * d).map(|_| rng.normal()).collect();
    let s = cfg.pair_similarity;
    if s > 0.0 {
        let own = (1.0 - s * s).sqrt();
        for t in (1..cfg.vocab_size).step_by(2) {
            for j in 0..d {
                data[t * d + j] = s * data[(t - 1) * d + j] + own * data[t * d + j];
            }
        }
    }
    Tensor::new(vec![cfg.vocab_size, d], data).expect("prototype shape")
}

/// Allowed successors per token, or `None` for an unrestricted grammar.
/// Successors never include the token itself. With correlated pairs, no
/// token may be followed by its own pair or by both members of another, so
/// the left context always tells the two apart.
pub fn successor_table(cfg: &SynthConfig) -> Option<Vec<Vec<TokenId>>> {
    if cfg.successors == 0 {
        return None;
    }
    let mut rng = Rng::new(cfg.seed).fork(u64::MAX);
    let v = cfg.vocab_size;
    let table = (0..v)
        .map(|t| {
            if cfg.pair_similarity > 0.0 {
                let pairs: Vec<usize> = (0..v.div_ceil(2)).filter(|&p| p != t / 2).collect();
                let mut picked: Vec<TokenId> = rng
                    .distinct(pairs.len(), cfg.successors)
                    .into_iter()
                    .map(|i| {
                        let first = 2 * pairs[i];
                        if first + 1 < v { first + rng.below(2) } else { first }
                    })
                    .collect();
                picked.sort_unstable();
                picked
            } else {
                rng.distinct(v - 1, cfg.successors)
                    .into_iter()
                    .map(|s| if s >= t { s + 1 } else { s })
                    .collect()
            }
        })
        .collect();
    Some(table)
}

/// Draws a reference with no two equal neighbours (when the vocabulary allows).
fn draw_reference(cfg: &SynthConfig, table: Option<&[Vec<TokenId>]>, rng: &mut Rng) -> Vec<TokenId> {
    let len = rng.int_in(cfg.min_len, cfg.max_len);
    let mut out: Vec<TokenId> = Vec::with_capacity(len);
    for _ in 0..len {
        let tok = match out.last() {
            Some(&prev) if table.is_some() => {
                let next = &table.unwrap()[prev];
                next[rng.below(next.len())]
            }
            Some(&prev) if cfg.vocab_size > 1 => {
                let t = rng.below(cfg.vocab_size - 1);
                if t >= prev {
                    t + 1
                } else {
                    t
                }
            }
            _ => rng.below(cfg.vocab_size),
        };
        out.push(tok);
    }
    out
}

/// Renders `reference` into frames using prototype rows.
pub fn render(cfg: &SynthConfig, protos: &Tensor, reference: &[TokenId], rng: &mut Rng) -> Result<Tensor> {
    let d = cfg.feature_dim;
    let mut rows: Vec<f64> = Vec::new();
    for (i, &tok) in reference.iter().enumerate() {
        if tok >= cfg.vocab_size {
            return Err(Error::Data(format!("token id {tok} outside vocabulary of {}", cfg.vocab_size)));
        }
        if i > 0 && cfg.max_silence > 0 {
            let silence = rng.int_in(0, cfg.max_silence);
            rows.extend(std::iter::repeat_n(0.0, silence * d));
        }
        let dup = rng.int_in(cfg.dup_min, cfg.dup_max);
        let split = if cfg.split_prob > 0.0 && dup >= 2 && rng.uniform() < cfg.split_prob {
            rng.int_in(1, dup - 1)
        } else {
            dup
        };
        for k in 0..dup {
            if k == split {
                rows.extend(std::iter::repeat_n(0.0, SPLIT_GAP * d));
            }
            rows.extend_from_slice(protos.row(tok));
        }
    }
    if cfg.noise_std > 0.0 {
        for v in &mut rows {
            *v += cfg.noise_std * rng.normal();
        }
    }
    let frames = rows.len() / d;
    Tensor::new(vec![frames, d], rows)
}

/// `n` utterances from the primary stream of `cfg.seed`.
pub fn generate_corpus(cfg: &SynthConfig, n: usize) -> Result<Corpus> {
    generate_split(cfg, n, 0)
}

/// Like [`generate_corpus`] but drawn from an independent utterance stream;
/// prototypes are shared so splits of one config describe the same task.
pub fn generate_split(cfg: &SynthConfig, n: usize, split: u64) -> Result<Corpus> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    let vocab = Vocabulary::synthetic(cfg.vocab_size)?;
    let protos = prototypes(cfg);
    let table = successor_table(cfg);
    let mut rng = Rng::new(cfg.seed).fork(split + 1);
    let utterances = (0..n)
        .map(|i| {
            let reference = draw_reference(cfg, table.as_deref(), &mut rng);
            let features = render(cfg, &protos, &reference, &mut rng)?;
            Ok(Utterance {
                id: format!("s{split}u{i:05}"),
                features,
                reference,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Corpus {
        vocab,
        feature_dim: cfg.feature_dim,
        utterances,
    })
}

/// Applies exactly `n_sub` substitutions, `n_del` deletions and `n_ins`
/// insertions at random positions.
pub fn corrupt_reference(
    reference: &[TokenId],
    vocab_size: usize,
    rng: &mut Rng,
    n_sub: usize,
    n_del: usize,
    n_ins: usize,
) -> Result<Vec<TokenId>> {
    if n_sub + n_del > reference.len() {
        return Err(Error::Contract(format!(
            "{n_sub} substitutions + {n_del} deletions exceed length {}",
            reference.len()
        )));
    }
    if (n_sub > 0 && vocab_size < 2) || (n_ins > 0 && vocab_size == 0) {
        return Err(Error::Contract("vocabulary too small for the requested edits".into()));
    }
    let mut order = rng.distinct(reference.len(), n_sub + n_del);
    rng.shuffle(&mut order);
    let (subs, dels) = order.split_at(n_sub);
    let mut out: Vec<Option<TokenId>> = reference.iter().copied().map(Some).collect();
    for &p in subs {
        let t = rng.below(vocab_size - 1);
        let orig = reference[p];
        out[p] = Some(if t >= orig { t + 1 } else { t });
    }
    for &p in dels {
        out[p] = None;
    }
    let mut out: Vec<TokenId> = out.into_iter().flatten().collect();
    for _ in 0..n_ins {
        let gap = rng.int_in(0, out.len());
        out.insert(gap, rng.below(vocab_size));
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    reference: Vec<String>,
    offset: u64,
    frames: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    feature_dim: usize,
    utterances: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    synth: Option<SynthConfig>,
}

/// Writes `corpus` into `dir`, creating it if needed.
pub fn save_corpus(corpus: &Corpus, dir: impl AsRef<Path>, synth: Option<&SynthConfig>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let create = |name: &str| {
        let p = dir.join(name);
        File::create(&p).map(BufWriter::new).map_err(|e| Error::io(&p, e))
    };
    let io = |name: &str| {
        let p = dir.join(name);
        move |e| Error::io(&p, e)
    };

    let mut features = create(FEATURES_FILE)?;
    let mut manifest = create(MANIFEST_FILE)?;
    let mut offset = 0u64;
    for u in &corpus.utterances {
        if u.features.shape()[1] != corpus.feature_dim {
            return Err(Error::Data(format!("utterance {} has the wrong feature width", u.id)));
        }
        for v in u.features.data() {
            features.write_all(&v.to_le_bytes()).map_err(io(FEATURES_FILE))?;
        }
        let entry = ManifestEntry {
            id: u.id.clone(),
            reference: u
                .reference
                .iter()
                .map(|&t| corpus.vocab.token(t).filter(|_| corpus.vocab.is_regular(t)).map(String::from))
                .collect::<Option<_>>()
                .ok_or_else(|| Error::Data(format!("utterance {} has ids outside the vocabulary", u.id)))?,
            offset,
            frames: u.frames(),
        };
        serde_json::to_writer(&mut manifest, &entry)?;
        manifest.write_all(b"\n").map_err(io(MANIFEST_FILE))?;
        offset += (u.features.numel() * 8) as u64;
    }
    features.flush().map_err(io(FEATURES_FILE))?;
    manifest.flush().map_err(io(MANIFEST_FILE))?;

    let mut vocab = create(VOCAB_FILE)?;
    for t in corpus.vocab.regular_tokens() {
        writeln!(vocab, "{t}").map_err(io(VOCAB_FILE))?;
    }
    vocab.flush().map_err(io(VOCAB_FILE))?;

    let meta = Meta {
        feature_dim: corpus.feature_dim,
        utterances: corpus.len(),
        synth: synth.cloned(),
    };
    let mut f = create(META_FILE)?;
    serde_json::to_writer_pretty(&mut f, &meta)?;
    f.flush().map_err(io(META_FILE))
}

/// Reads a corpus directory written by [`save_corpus`].
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let read = |name: &str| {
        let p = dir.join(name);
        std::fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    let meta: Meta = serde_json::from_slice(&read(META_FILE)?)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.join(META_FILE).display())))?;
    let vocab_text = String::from_utf8(read(VOCAB_FILE)?).map_err(|_| Error::Data("vocab.txt is not UTF-8".into()))?;
    let vocab = Vocabulary::new(vocab_text.lines().map(str::trim).filter(|l| !l.is_empty()))?;
    let features = read(FEATURES_FILE)?;
    let d = meta.feature_dim;
    if d == 0 {
        return Err(Error::Data("feature_dim is zero".into()));
    }

    let manifest_path = dir.join(MANIFEST_FILE);
    let file = File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut utterances = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("manifest line {}: {e}", n + 1)))?;
        let reference = entry
            .reference
            .iter()
            .map(|t| vocab.id(t).filter(|&i| vocab.is_regular(i)))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Data(format!("utterance {} uses tokens outside the vocabulary", entry.id)))?;
        let start = entry.offset as usize;
        let end = start + entry.frames * d * 8;
        if end > features.len() {
            return Err(Error::Data(format!("utterance {} runs past the feature file", entry.id)));
        }
        let data = features[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        utterances.push(Utterance {
            id: entry.id,
            features: Tensor::new(vec![entry.frames, d], data)?,
            reference,
        });
    }
    if utterances.len() != meta.utterances {
        return Err(Error::Data(format!(
            "manifest lists {} utterances, meta.json says {}",
            utterances.len(),
            meta.utterances
        )));
    }
    Ok(Corpus {
        vocab,
        feature_dim: d,
        utterances,
    })
}
