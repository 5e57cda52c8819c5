//! Encoder-decoder network: a Transformer or Conformer encoder with a CTC
//! head, and a bidirectional masked-token decoder with token and length heads.

mod checkpoint;
mod config;
mod layers;
mod params;
mod vocab;

pub use checkpoint::{average_checkpoints, ModelCheckpoint, TrainState, FORMAT_VERSION};
pub use config::{
    Architecture, DecoderConfig, EncoderConfig, ModelConfig, PositionalEncoding, LENGTH_CLASSES,
};
pub use params::{Forward, ParamId, ParamStore};
pub use vocab::{TokenId, Vocabulary};

use layers::{sinusoidal_positions, Activation, Attention, ConvModule, FeedForward, LayerNorm, Linear};
use params::Init;

use crate::ctc::FramePosteriors;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tape, Tensor, Var};

#[derive(Clone, Debug)]
enum EncoderBlock {
    Transformer {
        attn_norm: LayerNorm,
        attn: Attention,
        ffn_norm: LayerNorm,
        ffn: FeedForward,
    },
    Conformer {
        ffn1_norm: LayerNorm,
        ffn1: FeedForward,
        attn_norm: LayerNorm,
        attn: Attention,
        conv_norm: LayerNorm,
        conv: ConvModule,
        ffn2_norm: LayerNorm,
        ffn2: FeedForward,
        out_norm: LayerNorm,
    },
}

impl EncoderBlock {
    fn new(init: &mut Init, name: &str, cfg: &EncoderConfig) -> Self {
        let d = cfg.attn_dim;
        let n = |s: &str| format!("{name}.{s}");
        match cfg.architecture {
            Architecture::Transformer => EncoderBlock::Transformer {
                attn_norm: LayerNorm::new(init, &n("attn_norm"), d),
                attn: Attention::new(init, &n("attn"), d, cfg.num_heads),
                ffn_norm: LayerNorm::new(init, &n("ffn_norm"), d),
                ffn: FeedForward::new(init, &n("ffn"), d, cfg.ffn_dim, Activation::Relu),
            },
            Architecture::Conformer => EncoderBlock::Conformer {
                ffn1_norm: LayerNorm::new(init, &n("ffn1_norm"), d),
                ffn1: FeedForward::new(init, &n("ffn1"), d, cfg.ffn_dim, Activation::Swish),
                attn_norm: LayerNorm::new(init, &n("attn_norm"), d),
                attn: Attention::new(init, &n("attn"), d, cfg.num_heads),
                conv_norm: LayerNorm::new(init, &n("conv_norm"), d),
                conv: ConvModule::new(init, &n("conv"), d, cfg.conv_kernel),
                ffn2_norm: LayerNorm::new(init, &n("ffn2_norm"), d),
                ffn2: FeedForward::new(init, &n("ffn2"), d, cfg.ffn_dim, Activation::Swish),
                out_norm: LayerNorm::new(init, &n("out_norm"), d),
            },
        }
    }

    fn apply<'t>(&self, f: &Forward<'t>, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            EncoderBlock::Transformer {
                attn_norm,
                attn,
                ffn_norm,
                ffn,
            } => {
                let h = attn_norm.apply(f, x)?;
                let x = x.add(f.dropout(attn.apply(f, h, h)?)?)?;
                let h = ffn_norm.apply(f, x)?;
                x.add(f.dropout(ffn.apply(f, h)?)?)
            }
            EncoderBlock::Conformer {
                ffn1_norm,
                ffn1,
                attn_norm,
                attn,
                conv_norm,
                conv,
                ffn2_norm,
                ffn2,
                out_norm,
            } => {
                // macaron: half-step FFN on both sides of attention + convolution
                let h = ffn1.apply(f, ffn1_norm.apply(f, x)?)?;
                let x = x.add(f.dropout(h)?.scale(0.5))?;
                let h = attn_norm.apply(f, x)?;
                let x = x.add(f.dropout(attn.apply(f, h, h)?)?)?;
                let h = conv.apply(f, conv_norm.apply(f, x)?)?;
                let x = x.add(f.dropout(h)?)?;
                let h = ffn2.apply(f, ffn2_norm.apply(f, x)?)?;
                let x = x.add(f.dropout(h)?.scale(0.5))?;
                out_norm.apply(f, x)
            }
        }
    }
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    self_norm: LayerNorm,
    self_attn: Attention,
    cross_norm: LayerNorm,
    cross_attn: Attention,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
}

impl DecoderBlock {
    fn new(init: &mut Init, name: &str, d: usize, cfg: &DecoderConfig) -> Self {
        let n = |s: &str| format!("{name}.{s}");
        DecoderBlock {
            self_norm: LayerNorm::new(init, &n("self_norm"), d),
            self_attn: Attention::new(init, &n("self_attn"), d, cfg.num_heads),
            cross_norm: LayerNorm::new(init, &n("cross_norm"), d),
            cross_attn: Attention::new(init, &n("cross_attn"), d, cfg.num_heads),
            ffn_norm: LayerNorm::new(init, &n("ffn_norm"), d),
            ffn: FeedForward::new(init, &n("ffn"), d, cfg.ffn_dim, Activation::Relu),
        }
    }

    fn apply<'t>(&self, f: &Forward<'t>, x: Var<'t>, memory: Var<'t>) -> Result<Var<'t>> {
        let h = self.self_norm.apply(f, x)?;
        let x = x.add(f.dropout(self.self_attn.apply(f, h, h)?)?)?;
        let h = self.cross_norm.apply(f, x)?;
        let x = x.add(f.dropout(self.cross_attn.apply(f, h, memory)?)?)?;
        let h = self.ffn_norm.apply(f, x)?;
        x.add(f.dropout(self.ffn.apply(f, h)?)?)
    }
}

#[derive(Clone, Debug)]
struct Network {
    subsample: Linear,
    encoder: Vec<EncoderBlock>,
    encoder_norm: LayerNorm,
    embedding: ParamId,
    decoder: Vec<DecoderBlock>,
    decoder_norm: LayerNorm,
    ctc_head: Linear,
    token_head: Linear,
    length_head: Linear,
}

/// Output of one decoder forward at inference time.
#[derive(Clone, Debug)]
pub struct DecoderPass {
    /// `[L×|V|]` log-probabilities over ordinary tokens.
    pub token_log_probs: Tensor,
    /// `[L×51]` log-probabilities over length classes, when requested.
    pub length_log_probs: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    vocab: Vocabulary,
    seed: u64,
    params: ParamStore,
    net: Network,
}

impl Model {
    /// Builds a freshly initialized model; identical seeds give bitwise
    /// identical parameters.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        vocab.validate()?;
        let mut store = ParamStore::default();
        let mut rng = Rng::new(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let enc = &config.encoder;
        let d = enc.attn_dim;
        let net = Network {
            subsample: Linear::new(&mut init, "encoder.subsample", config.input_dim * enc.downsample_factor, d),
            encoder: (0..enc.num_layers)
                .map(|i| EncoderBlock::new(&mut init, &format!("encoder.block{i}"), enc))
                .collect(),
            encoder_norm: LayerNorm::new(&mut init, "encoder.norm", d),
            embedding: init.normal("decoder.embedding".into(), &[vocab.embedding_rows(), d], 0.02),
            decoder: (0..config.decoder.num_layers)
                .map(|i| DecoderBlock::new(&mut init, &format!("decoder.block{i}"), d, &config.decoder))
                .collect(),
            decoder_norm: LayerNorm::new(&mut init, "decoder.norm", d),
            ctc_head: Linear::new(&mut init, "ctc_head", d, vocab.ctc_classes()),
            token_head: Linear::new(&mut init, "token_head", d, vocab.len()),
            length_head: Linear::new(&mut init, "length_head", d, LENGTH_CLASSES),
        };
        Ok(Model {
            config,
            vocab,
            seed,
            params: store,
            net,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Number of encoder output frames for `frames` input frames.
    pub fn output_frames(&self, frames: usize) -> usize {
        frames.div_ceil(self.config.encoder.downsample_factor)
    }

    fn add_positions<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        match self.config.positional_encoding {
            PositionalEncoding::None => Ok(x),
            PositionalEncoding::Sinusoidal => {
                let shape = x.shape();
                let pe = x.tape().constant(sinusoidal_positions(shape[0], shape[1]));
                x.add(pe)
            }
        }
    }

    /// `[T×D]` features to `[⌈T/f⌉ × attn_dim]` encoder states.
    pub fn encode<'t>(&self, f: &Forward<'t>, features: Var<'t>) -> Result<Var<'t>> {
        let shape = features.shape();
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return Err(Error::Shape(format!(
                "features must be [T×{}], got {shape:?}",
                self.config.input_dim
            )));
        }
        let factor = self.config.encoder.downsample_factor;
        let frames = shape[0];
        if frames < factor {
            return Err(Error::InputTooShort {
                frames,
                required: factor,
            });
        }
        let out_frames = self.output_frames(frames);
        let padded = out_frames * factor;
        let x = if padded > frames {
            let zeros = f.tape().constant(Tensor::zeros(&[padded - frames, shape[1]]));
            Var::concat_rows(&[features, zeros])?
        } else {
            features
        };
        let x = x.reshape(&[out_frames, factor * shape[1]])?;
        let x = self.net.subsample.apply(f, x)?;
        let mut x = f.dropout(self.add_positions(x)?)?;
        for block in &self.net.encoder {
            x = block.apply(f, x)?;
        }
        self.net.encoder_norm.apply(f, x)
    }

    /// `[T'×(|V|+1)]` CTC log-probabilities; the last column is blank.
    pub fn ctc_log_probs<'t>(&self, f: &Forward<'t>, enc: Var<'t>) -> Result<Var<'t>> {
        self.net.ctc_head.apply(f, enc)?.log_softmax()
    }

    /// Final decoder states `[L×attn_dim]` for a (possibly masked) sequence.
    pub fn decoder_states<'t>(&self, f: &Forward<'t>, enc: Var<'t>, tokens: &[TokenId]) -> Result<Var<'t>> {
        if tokens.is_empty() {
            return Err(Error::Contract("decoder input must not be empty".into()));
        }
        let d = self.config.encoder.attn_dim as f64;
        let x = f.p(self.net.embedding).index_rows(tokens)?.scale(d.sqrt());
        let mut x = f.dropout(self.add_positions(x)?)?;
        for block in &self.net.decoder {
            x = block.apply(f, x, enc)?;
        }
        self.net.decoder_norm.apply(f, x)
    }

    /// `[L×|V|]` token log-probabilities from decoder states.
    pub fn token_log_probs<'t>(&self, f: &Forward<'t>, states: Var<'t>) -> Result<Var<'t>> {
        self.net.token_head.apply(f, states)?.log_softmax()
    }

    /// `[L×51]` length-class log-probabilities from decoder states.
    pub fn length_log_probs<'t>(&self, f: &Forward<'t>, states: Var<'t>) -> Result<Var<'t>> {
        self.net.length_head.apply(f, states)?.log_softmax()
    }

    /// Inference-only encoder forward.
    pub fn encode_features(&self, features: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let f = Forward::eval(&tape, &self.params);
        let enc = self.encode(&f, tape.constant(features.clone()))?;
        Ok((*enc.value()).clone())
    }

    /// Inference-only CTC head.
    pub fn ctc_posteriors(&self, enc: &Tensor) -> Result<FramePosteriors> {
        let tape = Tape::new();
        let f = Forward::eval(&tape, &self.params);
        let lp = self.ctc_log_probs(&f, tape.constant(enc.clone()))?;
        FramePosteriors::new((*lp.value()).clone(), self.vocab.blank_id())
    }

    /// Inference-only decoder forward over `tokens` (may contain masks).
    pub fn decoder_pass(&self, enc: &Tensor, tokens: &[TokenId], with_lengths: bool) -> Result<DecoderPass> {
        let tape = Tape::new();
        let f = Forward::eval(&tape, &self.params);
        let states = self.decoder_states(&f, tape.constant(enc.clone()), tokens)?;
        let token_log_probs = (*self.token_log_probs(&f, states)?.value()).clone();
        let length_log_probs = if with_lengths {
            Some((*self.length_log_probs(&f, states)?.value()).clone())
        } else {
            None
        };
        Ok(DecoderPass {
            token_log_probs,
            length_log_probs,
        })
    }

    /// Rebuilds a model from a checkpoint, checking every parameter name and shape.
    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        let mut model = Model::new(ckpt.config.clone(), ckpt.vocab.clone(), ckpt.seed)?;
        model
            .params
            .load(ckpt.params.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(model)
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            seed: self.seed,
            params: self
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            train_state: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(arch: Architecture) -> Model {
        let mut cfg = ModelConfig::new(3);
        cfg.encoder = EncoderConfig {
            architecture: arch,
            num_layers: 1,
            attn_dim: 8,
            num_heads: 2,
            ffn_dim: 8,
            conv_kernel: 3,
            downsample_factor: 2,
        };
        cfg.decoder = DecoderConfig {
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 8,
        };
        Model::new(cfg, Vocabulary::synthetic(4).unwrap(), 5).unwrap()
    }

    #[test]
    fn encoder_downsamples_with_ceiling() {
        let m = tiny(Architecture::Conformer);
        let feats = Tensor::zeros(&[8, 3]);
        assert_eq!(m.encode_features(&feats).unwrap().shape(), &[4, 8]);
        let feats = Tensor::zeros(&[7, 3]);
        assert_eq!(m.encode_features(&feats).unwrap().shape(), &[4, 8]);
        let short = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            m.encode_features(&short),
            Err(Error::InputTooShort { frames: 1, required: 2 })
        ));
    }

    #[test]
    fn zero_input_gives_finite_output_for_both_architectures() {
        for arch in [Architecture::Transformer, Architecture::Conformer] {
            let mut m = tiny(arch);
            for i in 0..m.params().len() {
                if m.params().names()[i].contains("depthwise") {
                    m.params_mut().tensor_mut(i).data_mut().fill(0.0);
                }
            }
            let enc = m.encode_features(&Tensor::zeros(&[6, 3])).unwrap();
            assert!(enc.is_finite());
        }
    }

    #[test]
    fn heads_produce_normalized_rows() {
        let m = tiny(Architecture::Conformer);
        let enc = m.encode_features(&Tensor::full(&[6, 3], 0.3)).unwrap();
        let post = m.ctc_posteriors(&enc).unwrap();
        assert_eq!(post.log_probs().shape(), &[3, 5]);
        let pass = m.decoder_pass(&enc, &[0, 5, 2], true).unwrap();
        assert_eq!(pass.token_log_probs.shape(), &[3, 4]);
        let lengths = pass.length_log_probs.unwrap();
        assert_eq!(lengths.shape(), &[3, LENGTH_CLASSES]);
        for t in [post.log_probs(), &pass.token_log_probs, &lengths] {
            for row in t.rows() {
                let total: f64 = row.iter().map(|v| v.exp()).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
        assert!(matches!(m.decoder_pass(&enc, &[], false), Err(Error::Contract(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = tiny(Architecture::Conformer);
        let b = tiny(Architecture::Conformer);
        for ((_, x), (_, y)) in a.params().iter().zip(b.params().iter()) {
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}
