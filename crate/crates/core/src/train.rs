//! Training with the combined CTC + masked-token + length objective.
//!
//! Each utterance yields one masked-token sample, one deletion sample and one
//! insertion sample; all three decoder passes share a single encoder forward.
//! Every random draw derives from `(seed, epoch, utterance index)`, so a run
//! resumed from an epoch checkpoint matches an uninterrupted one bitwise.

use std::collections::BTreeMap;
use std::ops::AddAssign;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_loss, min_frames};
use crate::error::{Error, Result};
use crate::masking::{
    combined_loss, dlp_loss, make_deletion_sample, make_insertion_sample, mlm_loss, observed_loss, sample_mlm_mask,
    repeat_observed, substitute_observed, unlikelihood_loss, LossWeights,
};
use crate::model::{
    average_checkpoints, Architecture, DecoderConfig, EncoderConfig, Forward, Model, ModelCheckpoint, ModelConfig,
    PositionalEncoding, TrainState, Vocabulary,
};
use crate::numerics::{derive_seed, Rng, Tape, Var};
use crate::synthdata::{Corpus, Utterance};

/// Flat training configuration. Every key has a default, so a config file
/// only lists what it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub attn_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub conv_kernel: usize,
    pub downsample: usize,
    pub positional_encoding: PositionalEncoding,
    pub dropout: f64,

    pub alpha: f64,
    pub beta: f64,
    /// Weight of the token loss at observed positions of the masked-token
    /// sample; 0 trains masked positions only.
    pub observed_weight: f64,
    /// Chance that an observed token is swapped for a random one before that
    /// loss is taken.
    pub observed_noise: f64,
    /// Chance that an observed token is followed by a spurious copy, which
    /// the decoder is then trained to give low probability.
    pub repeat_noise: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    /// Number of final epoch checkpoints averaged into the final model.
    pub average_last: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            architecture: Architecture::Conformer,
            encoder_layers: 2,
            decoder_layers: 2,
            attn_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            conv_kernel: 7,
            downsample: 2,
            positional_encoding: PositionalEncoding::Sinusoidal,
            dropout: 0.1,
            alpha: 0.3,
            beta: 1.0,
            observed_weight: 0.0,
            observed_noise: 0.1,
            repeat_noise: 0.0,
            epochs: 10,
            batch_size: 8,
            lr: 2e-3,
            warmup_steps: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            grad_clip: 5.0,
            average_last: 3,
            seed: 1,
        }
    }
}

impl TrainConfig {
    /// Reads a flat TOML file, then applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let cfg: TrainConfig = crate::config::load_flat(path, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn objective(&self) -> Objective {
        Objective {
            weights: self.weights(),
            observed_weight: self.observed_weight,
            observed_noise: self.observed_noise,
            repeat_noise: self.repeat_noise,
        }
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            encoder: EncoderConfig {
                architecture: self.architecture,
                num_layers: self.encoder_layers,
                attn_dim: self.attn_dim,
                num_heads: self.num_heads,
                ffn_dim: self.ffn_dim,
                conv_kernel: self.conv_kernel,
                downsample_factor: self.downsample,
            },
            decoder: DecoderConfig {
                num_layers: self.decoder_layers,
                num_heads: self.num_heads,
                ffn_dim: self.ffn_dim,
            },
            dropout: self.dropout,
            positional_encoding: self.positional_encoding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        self.model_config(1).validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        // Both false for NaN.
        let positive = |x: f64| x > 0.0;
        let non_negative = |x: f64| x >= 0.0;
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !positive(self.lr) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !non_negative(self.observed_weight) || !(0.0..=1.0).contains(&self.observed_noise) {
            return bad("observed_weight must be non-negative and observed_noise in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.repeat_noise) {
            return bad("repeat_noise must lie in [0, 1]");
        }
        if !positive(self.adam_eps) || !non_negative(self.grad_clip) {
            return bad("adam_eps must be positive and grad_clip non-negative");
        }
        Ok(())
    }
}

/// Adam with linear warmup followed by inverse square-root decay.
#[derive(Clone, Debug)]
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn learning_rate(cfg: &TrainConfig, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = cfg.warmup_steps.max(1) as f64;
        cfg.lr * (s / w).min((w / s).sqrt())
    }

    fn update(&mut self, cfg: &TrainConfig, model: &mut Model, grads: &[Vec<f64>]) {
        self.step += 1;
        let lr = Self::learning_rate(cfg, self.step);
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let w = model.params_mut().tensor_mut(i).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                w[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// What one utterance contributes to the loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    pub observed_weight: f64,
    pub observed_noise: f64,
    pub repeat_noise: f64,
}

impl Default for Objective {
    fn default() -> Self {
        TrainConfig::default().objective()
    }
}

/// Component losses for one utterance or averaged over an epoch. `mlm`
/// includes the weighted observed-position term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ctc: f64,
    pub mlm: f64,
    pub dlp: f64,
    pub total: f64,
}

impl AddAssign for LossParts {
    fn add_assign(&mut self, o: Self) {
        self.ctc += o.ctc;
        self.mlm += o.mlm;
        self.dlp += o.dlp;
        self.total += o.total;
    }
}

impl LossParts {
    fn scaled(self, s: f64) -> Self {
        LossParts {
            ctc: self.ctc * s,
            mlm: self.mlm * s,
            dlp: self.dlp * s,
            total: self.total * s,
        }
    }
}

/// Builds the combined objective for one utterance. The CTC term is dropped
/// when the reference cannot be aligned to the encoder frames.
pub fn utterance_loss<'t>(
    model: &Model,
    f: &Forward<'t>,
    utt: &Utterance,
    objective: &Objective,
    rng: &mut Rng,
) -> Result<(Var<'t>, LossParts, bool)> {
    let tape = f.tape();
    let reference = &utt.reference;
    if reference.is_empty() {
        return Err(Error::Data(format!("utterance {} has an empty reference", utt.id)));
    }
    let mask = model.vocab().mask_id();
    let enc = model.encode(f, tape.constant(utt.features.clone()))?;

    let feasible = model.output_frames(utt.frames()) >= min_frames(reference);
    let ctc = if feasible {
        ctc_loss(model.ctc_log_probs(f, enc)?, reference, model.vocab().blank_id())?
    } else {
        tape.constant(crate::numerics::Tensor::scalar(0.0))
    };

    let masked = sample_mlm_mask(reference, mask, rng)?;
    let mlm = if objective.observed_weight > 0.0 {
        let (noisy, _) = substitute_observed(&masked, model.vocab().len(), objective.observed_noise, rng);
        let (input, origin) = repeat_observed(&noisy, objective.repeat_noise, rng);
        let states = model.decoder_states(f, enc, input.tokens())?;
        let lp = model.token_log_probs(f, states)?;
        let lp_orig = lp.index_rows(&origin)?;
        let observed = observed_loss(lp_orig, &noisy, reference)?;
        let observed = if input.len() > noisy.len() {
            let copies: Vec<usize> = (0..input.len()).filter(|i| origin.binary_search(i).is_err()).collect();
            let toks: Vec<_> = copies.iter().map(|&i| input.tokens()[i]).collect();
            observed.add(unlikelihood_loss(lp, &copies, &toks)?)?
        } else {
            observed
        };
        mlm_loss(lp_orig, &noisy, reference)?.add(observed.scale(objective.observed_weight))?
    } else {
        let states = model.decoder_states(f, enc, masked.tokens())?;
        mlm_loss(model.token_log_probs(f, states)?, &masked, reference)?
    };

    let del = make_deletion_sample(reference, mask, rng)?;
    let states = model.decoder_states(f, enc, del.masked.tokens())?;
    let dlp_del = dlp_loss(model.length_log_probs(f, states)?, &del)?;

    let ins = make_insertion_sample(reference, mask, rng)?;
    let states = model.decoder_states(f, enc, ins.masked.tokens())?;
    let dlp_ins = dlp_loss(model.length_log_probs(f, states)?, &ins)?;

    let dlp = dlp_del.add(dlp_ins)?;
    let total = combined_loss(ctc, mlm, dlp, objective.weights)?;
    let parts = LossParts {
        ctc: ctc.value().item(),
        mlm: mlm.value().item(),
        dlp: dlp.value().item(),
        total: total.value().item(),
    };
    if !parts.total.is_finite() {
        return Err(Error::Training(format!("non-finite loss on utterance {}", utt.id)));
    }
    Ok((total, parts, feasible))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub step: u64,
    /// Mean per-utterance losses.
    pub loss: LossParts,
    pub skipped_ctc: usize,
}

/// In-memory training state.
pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    adam: Adam,
    epoch: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, vocab: Vocabulary, input_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model_config(input_dim), vocab, cfg.seed)?;
        let adam = Adam::new(&model);
        Ok(Trainer {
            cfg,
            model,
            adam,
            epoch: 0,
        })
    }

    /// Continues from an epoch checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: TrainConfig, ckpt: &ModelCheckpoint) -> Result<Self> {
        cfg.validate()?;
        let state = ckpt
            .train_state
            .as_ref()
            .ok_or_else(|| Error::Data("checkpoint carries no training state".into()))?;
        if cfg.model_config(ckpt.config.input_dim) != ckpt.config || cfg.seed != ckpt.seed {
            return Err(Error::Config("training config does not match the checkpoint".into()));
        }
        let model = Model::from_checkpoint(ckpt)?;
        let mut adam = Adam::new(&model);
        for (i, name) in model.params().names().iter().enumerate() {
            let m = state.first_moment.get(name);
            let v = state.second_moment.get(name);
            match (m, v) {
                (Some(m), Some(v)) if m.numel() == adam.m[i].len() && v.numel() == adam.v[i].len() => {
                    adam.m[i].copy_from_slice(m.data());
                    adam.v[i].copy_from_slice(v.data());
                }
                _ => return Err(Error::CorruptCheckpoint(format!("optimizer state for {name} is missing"))),
            }
        }
        adam.step = state.step;
        Ok(Trainer {
            cfg,
            model,
            adam,
            epoch: state.epoch,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        if corpus.vocab != *self.model.vocab() {
            return Err(Error::Data("corpus vocabulary differs from the model's".into()));
        }
        if corpus.feature_dim != self.model.config().input_dim {
            return Err(Error::Data(format!(
                "corpus features are {}-dimensional, model expects {}",
                corpus.feature_dim,
                self.model.config().input_dim
            )));
        }
        Ok(())
    }

    /// One optimizer step over `batch`; returns summed losses and skipped CTC terms.
    fn step(&mut self, corpus: &Corpus, batch: &[usize], epoch_seed: u64) -> Result<(LossParts, usize)> {
        let objective = self.cfg.objective();
        let mut grads: Vec<Vec<f64>> = self.adam.m.iter().map(|m| vec![0.0; m.len()]).collect();
        let mut sum = LossParts::default();
        let mut skipped = 0;
        for &idx in batch {
            let utt_seed = derive_seed(epoch_seed, idx as u64);
            let mut rng = Rng::new(utt_seed);
            let tape = Tape::new();
            let f = Forward::train(&tape, self.model.params(), self.model.config().dropout, Rng::new(utt_seed).fork(1));
            let (loss, parts, feasible) = utterance_loss(&self.model, &f, &corpus.utterances[idx], &objective, &mut rng)?;
            skipped += usize::from(!feasible);
            let g = tape.backward(loss)?;
            for (acc, gi) in grads.iter_mut().zip(f.param_grads(&g)) {
                for (a, x) in acc.iter_mut().zip(gi) {
                    *a += x;
                }
            }
            sum += parts;
        }
        let scale = 1.0 / batch.len() as f64;
        let mut norm_sq = 0.0;
        for g in &mut grads {
            for x in g.iter_mut() {
                *x *= scale;
                norm_sq += *x * *x;
            }
        }
        if !norm_sq.is_finite() {
            return Err(Error::Training("non-finite gradient".into()));
        }
        let norm = norm_sq.sqrt();
        if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            let s = self.cfg.grad_clip / norm;
            grads.iter_mut().flatten().for_each(|x| *x *= s);
        }
        self.adam.update(&self.cfg, &mut self.model, &grads);
        Ok((sum, skipped))
    }

    /// Runs one epoch over a seeded shuffle of the corpus.
    pub fn train_epoch(&mut self, corpus: &Corpus) -> Result<EpochStats> {
        self.check_corpus(corpus)?;
        let epoch_seed = derive_seed(self.cfg.seed, self.epoch as u64 + 1);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        Rng::new(epoch_seed).fork(0).shuffle(&mut order);
        let mut total = LossParts::default();
        let mut skipped = 0;
        for batch in order.chunks(self.cfg.batch_size) {
            let (parts, s) = self.step(corpus, batch, epoch_seed)?;
            total += parts;
            skipped += s;
        }
        let n = corpus.len().max(1) as f64;
        self.epoch += 1;
        Ok(EpochStats {
            epoch: self.epoch,
            step: self.adam.step,
            loss: total.scaled(1.0 / n),
            skipped_ctc: skipped,
        })
    }

    /// Parameters plus optimizer state.
    pub fn checkpoint(&self) -> ModelCheckpoint {
        let mut ckpt = self.model.to_checkpoint();
        let names = self.model.params().names();
        let moments = |src: &[Vec<f64>]| -> BTreeMap<String, crate::numerics::Tensor> {
            names
                .iter()
                .enumerate()
                .map(|(i, n)| {
                    let shape = self.model.params().tensor(i).shape().to_vec();
                    (n.clone(), crate::numerics::Tensor::new(shape, src[i].clone()).expect("moment shape"))
                })
                .collect()
        };
        ckpt.train_state = Some(TrainState {
            epoch: self.epoch,
            step: self.adam.step,
            first_moment: moments(&self.adam.m),
            second_moment: moments(&self.adam.v),
        });
        ckpt
    }
}

pub fn epoch_checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch{epoch:03}.ckpt"))
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochStats>,
    pub final_checkpoint: PathBuf,
    pub model: Model,
}

/// Trains to `cfg.epochs`, writing `epochNNN.ckpt` after every epoch, the
/// loss log, and `final.ckpt` averaged over the last `average_last` epochs.
pub fn run_training(
    cfg: TrainConfig,
    corpus: &Corpus,
    out_dir: &Path,
    resume: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg.clone(), &ModelCheckpoint::load(p)?)?,
        None => Trainer::new(cfg.clone(), corpus.vocab.clone(), corpus.feature_dim)?,
    };
    let log_path = out_dir.join(TRAIN_LOG);
    let mut log = String::new();
    if resume.is_some() {
        if let Ok(prev) = std::fs::read_to_string(&log_path) {
            log = prev;
        }
    }
    let mut epochs = Vec::new();
    while trainer.epoch() < cfg.epochs {
        let stats = trainer.train_epoch(corpus)?;
        trainer.checkpoint().save(epoch_checkpoint_path(out_dir, stats.epoch))?;
        log.push_str(&serde_json::to_string(&stats)?);
        log.push('\n');
        std::fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;
        on_epoch(&stats);
        epochs.push(stats);
    }
    let last = trainer.epoch();
    let first = last.saturating_sub(cfg.average_last.max(1)) + 1;
    let mut ckpts = Vec::new();
    for e in first..=last {
        let mut c = ModelCheckpoint::load(epoch_checkpoint_path(out_dir, e))?;
        c.train_state = None;
        ckpts.push(c);
    }
    let averaged = if ckpts.is_empty() {
        trainer.model().to_checkpoint()
    } else {
        average_checkpoints(&ckpts)?
    };
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    averaged.save(&final_checkpoint)?;
    Ok(TrainOutcome {
        epochs,
        final_checkpoint,
        model: Model::from_checkpoint(&averaged)?,
    })
}
