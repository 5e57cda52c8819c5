//! Checks shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use maskctc::ctc::{ctc_log_prob, ctc_log_prob_oracle, ctc_loss, FramePosteriors};
use maskctc::model::{Architecture, Forward, Model, ModelConfig, TokenId, Vocabulary};
use maskctc::numerics::gradcheck::{self, relative_error};
use maskctc::numerics::{Rng, Tape, Tensor, Var};
use maskctc::synthdata::Utterance;
use maskctc::train::{utterance_loss, Objective};
use maskctc::Result;

/// Row-normalised log posteriors over `classes` symbols, blank last.
pub fn random_posteriors(rng: &mut Rng, frames: usize, classes: usize) -> FramePosteriors {
    let mut data = Vec::with_capacity(frames * classes);
    for _ in 0..frames {
        let row: Vec<f64> = (0..classes).map(|_| 2.0 * rng.normal()).collect();
        let lse = maskctc::numerics::log_sum_exp(&row);
        data.extend(row.iter().map(|x| x - lse));
    }
    FramePosteriors::new(Tensor::new(vec![frames, classes], data).unwrap(), classes - 1).unwrap()
}

pub struct OracleSummary {
    pub cases: usize,
    pub feasible: usize,
    pub max_abs_error: f64,
}

/// Forward recursion against path enumeration on random small problems:
/// labels of length ≤ 4 over at most 3 tokens, at most 6 frames.
pub fn ctc_oracle_agreement(cases: usize, seed: u64) -> OracleSummary {
    let mut rng = Rng::new(seed);
    let mut s = OracleSummary { cases, feasible: 0, max_abs_error: 0.0 };
    for _ in 0..cases {
        let vocab = rng.int_in(1, 3);
        let frames = rng.int_in(1, 6);
        let len = rng.int_in(0, 4);
        let labels: Vec<TokenId> = (0..len).map(|_| rng.below(vocab)).collect();
        let post = random_posteriors(&mut rng, frames, vocab + 1);
        let dp = ctc_log_prob(&post, &labels);
        let brute = ctc_log_prob_oracle(&post, &labels).unwrap();
        let err = if dp == f64::NEG_INFINITY && brute == f64::NEG_INFINITY {
            0.0
        } else {
            s.feasible += 1;
            (dp - brute).abs()
        };
        s.max_abs_error = s.max_abs_error.max(err);
    }
    s
}

fn all_sequences(vocab: usize, max_len: usize) -> Vec<Vec<TokenId>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for seq in &frontier {
            for t in 0..vocab {
                let mut s: Vec<TokenId> = seq.clone();
                s.push(t);
                next.push(s);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Largest `|Σ_y P(y) − 1|` over random posteriors, summing the forward
/// recursion over every output sequence no longer than the frame count.
pub fn total_probability_deviation(trials: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let vocab = rng.int_in(1, 3);
        let frames = rng.int_in(1, 5);
        let post = random_posteriors(&mut rng, frames, vocab + 1);
        let total: f64 = all_sequences(vocab, frames)
            .iter()
            .map(|y| ctc_log_prob(&post, y).exp())
            .sum();
        worst = worst.max((total - 1.0).abs());
    }
    worst
}

pub const OP_STEP: f64 = 1e-5;

pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
}

type OpFn = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

fn rand_t(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Values bounded away from zero, for `relu` and `ln`.
fn away_from_zero(rng: &mut Rng, shape: &[usize], positive: bool) -> Tensor {
    let mut t = rand_t(rng, shape);
    for x in t.data_mut() {
        let mag = 0.2 + x.abs();
        *x = if positive || *x > 0.0 { mag } else { -mag };
    }
    t
}

/// Weighted sum with fixed pseudo-random weights, so every output element
/// reaches the loss with a distinct coefficient.
fn project<'t>(y: Var<'t>) -> Result<Var<'t>> {
    let shape = y.shape();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
    let w = y.tape().constant(Tensor::new(shape, w)?);
    Ok(y.mul(w)?.sum())
}

/// Every differentiable primitive, each checked by central differences.
pub fn op_gradient_checks(seed: u64) -> Vec<OpCheck> {
    let mut rng = Rng::new(seed);
    let mut cases: Vec<(&'static str, OpFn, Vec<Tensor>)> = Vec::new();
    let a34 = rand_t(&mut rng, &[3, 4]);
    let b34 = rand_t(&mut rng, &[3, 4]);
    let b45 = rand_t(&mut rng, &[4, 5]);
    let b54 = rand_t(&mut rng, &[5, 4]);
    let bias = rand_t(&mut rng, &[4]);
    cases.push(("add", |_, v| project(v[0].add(v[1])?), vec![a34.clone(), b34.clone()]));
    cases.push(("add_broadcast", |_, v| project(v[0].add(v[1])?), vec![a34.clone(), bias.clone()]));
    cases.push(("sub", |_, v| project(v[0].sub(v[1])?), vec![a34.clone(), b34.clone()]));
    cases.push(("mul", |_, v| project(v[0].mul(v[1])?), vec![a34.clone(), b34.clone()]));
    cases.push(("mul_broadcast", |_, v| project(v[0].mul(v[1])?), vec![a34.clone(), bias.clone()]));
    cases.push(("neg", |_, v| project(v[0].neg()), vec![a34.clone()]));
    cases.push(("scale", |_, v| project(v[0].scale(-1.7)), vec![a34.clone()]));
    cases.push(("add_scalar", |_, v| project(v[0].add_scalar(0.3)), vec![a34.clone()]));
    cases.push(("matmul", |_, v| project(v[0].matmul(v[1])?), vec![a34.clone(), b45]));
    cases.push(("matmul_t", |_, v| project(v[0].matmul_t(v[1])?), vec![a34.clone(), b54]));
    cases.push(("transpose", |_, v| project(v[0].transpose()?), vec![a34.clone()]));
    cases.push(("reshape", |_, v| project(v[0].reshape(&[2, 6])?), vec![a34.clone()]));
    cases.push(("sum", |_, v| Ok(v[0].sum().scale(0.5)), vec![a34.clone()]));
    cases.push(("mean", |_, v| Ok(v[0].mean()), vec![a34.clone()]));
    cases.push(("log_softmax", |_, v| project(v[0].log_softmax()?), vec![a34.clone()]));
    cases.push(("softmax", |_, v| project(v[0].softmax()?), vec![a34.clone()]));
    cases.push(("log_sum_exp", |_, v| project(v[0].log_sum_exp()), vec![a34.clone()]));
    cases.push(("log_add_exp", |_, v| project(v[0].log_add_exp(v[1])?), vec![a34.clone(), b34.clone()]));
    cases.push((
        "layer_norm",
        |_, v| project(v[0].layer_norm(v[1], v[2], 1e-5)?),
        vec![a34.clone(), rand_t(&mut rng, &[4]), rand_t(&mut rng, &[4])],
    ));
    cases.push(("glu", |_, v| project(v[0].glu()?), vec![a34.clone()]));
    cases.push(("sigmoid", |_, v| project(v[0].sigmoid()), vec![a34.clone()]));
    cases.push(("swish", |_, v| project(v[0].swish()), vec![a34.clone()]));
    cases.push(("relu", |_, v| project(v[0].relu()), vec![away_from_zero(&mut rng, &[3, 4], false)]));
    cases.push(("exp", |_, v| project(v[0].exp()), vec![a34.clone()]));
    cases.push(("ln", |_, v| project(v[0].ln()), vec![away_from_zero(&mut rng, &[3, 4], true)]));
    cases.push((
        "depthwise_conv1d",
        |_, v| project(v[0].depthwise_conv1d(v[1])?),
        vec![rand_t(&mut rng, &[6, 4]), rand_t(&mut rng, &[3, 4])],
    ));
    cases.push(("index_rows", |_, v| project(v[0].index_rows(&[2, 0, 2])?), vec![a34.clone()]));
    cases.push(("index_cols", |_, v| project(v[0].index_cols(&[3, 1, 1])?), vec![a34.clone()]));
    cases.push(("pick", |_, v| project(v[0].pick(&[1, 3, 0])?), vec![a34.clone()]));
    cases.push(("slice_rows", |_, v| project(v[0].slice_rows(1, 2)?), vec![a34.clone()]));
    cases.push(("slice_cols", |_, v| project(v[0].slice_cols(1, 2)?), vec![a34.clone()]));
    cases.push((
        "concat_rows",
        |_, v| project(Var::concat_rows(&[v[0], v[1]])?),
        vec![a34.clone(), b34.clone()],
    ));
    cases.push((
        "concat_cols",
        |_, v| project(Var::concat_cols(&[v[0], v[1]])?),
        vec![a34.clone(), b34.clone()],
    ));
    cases.push((
        "dropout",
        |_, v| project(v[0].dropout(0.5, &[0.1, 0.9, 0.3, 0.7, 0.6, 0.2, 0.8, 0.4, 0.05, 0.95, 0.45, 0.55])?),
        vec![a34.clone()],
    ));
    cases.push((
        "ctc_loss",
        |_, v| ctc_loss(v[0].log_softmax()?, &[0, 1, 1], 2),
        vec![rand_t(&mut rng, &[6, 3])],
    ));
    cases
        .into_iter()
        .map(|(name, f, inputs)| OpCheck {
            name,
            max_rel_error: gradcheck::check(f, &inputs, OP_STEP).map_or(f64::INFINITY, |c| c.max_rel_error),
        })
        .collect()
}

pub struct ModelCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
}

/// Small model with two encoder and two decoder layers at `d_att = 8`.
pub fn tiny_model(arch: Architecture, input_dim: usize, vocab: usize, seed: u64) -> Model {
    let mut cfg = ModelConfig::new(input_dim);
    cfg.encoder.architecture = arch;
    cfg.encoder.num_layers = 2;
    cfg.encoder.attn_dim = 8;
    cfg.encoder.num_heads = 2;
    cfg.encoder.ffn_dim = 8;
    cfg.encoder.conv_kernel = 3;
    cfg.decoder.num_layers = 2;
    cfg.decoder.num_heads = 2;
    cfg.decoder.ffn_dim = 8;
    cfg.dropout = 0.0;
    Model::new(cfg, Vocabulary::synthetic(vocab).unwrap(), seed).unwrap()
}

fn combined_loss_value(model: &Model, utt: &Utterance, objective: &Objective, seed: u64) -> f64 {
    let tape = Tape::new();
    let f = Forward::eval(&tape, model.params());
    let (loss, _, _) = utterance_loss(model, &f, utt, objective, &mut Rng::new(seed)).unwrap();
    loss.value().item()
}

/// Central differences of the full ctc + mlm + length objective against the
/// tape gradient, on up to `per_tensor` scalars of every parameter tensor.
pub fn combined_loss_gradient_check(arch: Architecture, per_tensor: usize, seed: u64) -> ModelCheck {
    let (input_dim, vocab) = (5, 4);
    let model = tiny_model(arch, input_dim, vocab, seed);
    let mut rng = Rng::new(seed ^ 0x5eed);
    let frames = 14;
    let utt = Utterance {
        id: "g".into(),
        features: rand_t(&mut rng, &[frames, input_dim]),
        reference: vec![0, 2, 1, 3, 2],
    };
    let objective = Objective::default();
    let mask_seed = seed.wrapping_add(17);

    let tape = Tape::new();
    let f = Forward::train(&tape, model.params(), 0.0, Rng::new(0));
    let (loss, _, feasible) = utterance_loss(&model, &f, &utt, &objective, &mut Rng::new(mask_seed)).unwrap();
    assert!(feasible, "gradient fixture must exercise the CTC term");
    let analytic = f.param_grads(&tape.backward(loss).unwrap());

    let mut out = ModelCheck { checked: 0, max_rel_error: 0.0, worst_param: String::new() };
    let mut probe = model.clone();
    for (i, name) in model.params().names().iter().enumerate() {
        let n = model.params().tensor(i).numel();
        let picks: Vec<usize> = if n <= per_tensor { (0..n).collect() } else { rng.distinct(n, per_tensor) };
        for j in picks {
            let orig = probe.params().tensor(i).data()[j];
            probe.params_mut().tensor_mut(i).data_mut()[j] = orig + OP_STEP;
            let up = combined_loss_value(&probe, &utt, &objective, mask_seed);
            probe.params_mut().tensor_mut(i).data_mut()[j] = orig - OP_STEP;
            let down = combined_loss_value(&probe, &utt, &objective, mask_seed);
            probe.params_mut().tensor_mut(i).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * OP_STEP);
            let rel = relative_error(analytic[i][j], numeric);
            if rel > out.max_rel_error {
                out.max_rel_error = rel;
                out.worst_param = format!("{name}[{j}]");
            }
            out.checked += 1;
        }
    }
    out
}
