//! Finite-difference verification of every differentiable op and of full model losses.

use serde::Serialize;

use crate::corpus::{Batch, Triplet, BOS, EOS};
use crate::error::Result;
use crate::model::{forward_loss, Seq2Seq, Variant};
use crate::rng::Lcg64;
use crate::rnn::{RnnConfig, RnnModel};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::transformer::{TransformerConfig, TransformerModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub eps: f64,
    pub op_tol: f64,
    pub model_tol: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            op_tol: 1e-4,
            model_tol: 1e-3,
            trials: 20,
            seed: 7,
        }
    }
}

/// Entries below this magnitude are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub trials: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }
}

type OpFn = dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>;

/// Scalar probe `sum(op(inputs) * weights)` and its gradient w.r.t. every input.
fn probe(op: &OpFn, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> Result<(f64, Vec<Tensor<f64>>)> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = op(&mut g, &vars)?;
    let loss = if g.shape(out).is_empty() {
        g.scale(out, weights.item())?
    } else {
        let w = g.mul_const(out, weights.clone())?;
        g.sum(w)?
    };
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    let per_input = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, per_input))
}

fn output_shape(op: &OpFn, inputs: &[Tensor<f64>]) -> Result<Vec<usize>> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = op(&mut g, &vars)?;
    Ok(g.shape(out).to_vec())
}

fn random(rng: &mut Lcg64, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product::<usize>();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.5, 1.5)).collect()).expect("shape and data agree")
}

/// Values kept away from zero so a kink is never straddled.
fn random_off_zero(rng: &mut Lcg64, shape: &[usize]) -> Tensor<f64> {
    random(rng, shape).map(|x| if x.abs() < 0.05 { x + 0.1f64.copysign(x) } else { x })
}

fn dims(rng: &mut Lcg64) -> (usize, usize) {
    (1 + rng.below(4), 1 + rng.below(5))
}

/// Compares analytic gradients of one op against central differences over `trials` random draws.
pub fn check_op(
    name: &str,
    config: &GradcheckConfig,
    gen: &dyn Fn(&mut Lcg64) -> Vec<Tensor<f64>>,
    op: &OpFn,
) -> Result<GradcheckEntry> {
    let mut rng = Lcg64::fork(config.seed, name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64)));
    let mut worst = 0.0f64;
    let mut checked = 0;
    for _ in 0..config.trials {
        let inputs = gen(&mut rng);
        let shape = output_shape(op, &inputs)?;
        let weights = random(&mut rng, &shape);
        let (_, analytic) = probe(op, &inputs, &weights)?;
        for (i, grad) in analytic.iter().enumerate() {
            for k in 0..inputs[i].len() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[k] += config.eps;
                let mut minus = inputs.clone();
                minus[i].data_mut()[k] -= config.eps;
                let numeric = (probe(op, &plus, &weights)?.0 - probe(op, &minus, &weights)?.0) / (2.0 * config.eps);
                worst = worst.max(relative_error(grad.data()[k], numeric));
                checked += 1;
            }
        }
    }
    Ok(GradcheckEntry {
        name: name.to_string(),
        trials: config.trials,
        checked,
        max_rel_err: worst,
        tolerance: config.op_tol,
        passed: worst < config.op_tol,
    })
}

/// Every differentiable op of the graph.
pub fn op_suite(config: &GradcheckConfig) -> Result<Vec<GradcheckEntry>> {
    let mut out = Vec::new();
    let pair = |rng: &mut Lcg64| {
        let (m, n) = dims(rng);
        vec![random(rng, &[m, n]), random(rng, &[m, n])]
    };
    let single = |rng: &mut Lcg64| {
        let (m, n) = dims(rng);
        vec![random(rng, &[m, n])]
    };
    out.push(check_op("add", config, &pair, &|g, v| g.add(v[0], v[1]))?);
    out.push(check_op("sub", config, &pair, &|g, v| g.sub(v[0], v[1]))?);
    out.push(check_op("mul", config, &pair, &|g, v| g.mul(v[0], v[1]))?);
    out.push(check_op(
        "add_row",
        config,
        &|rng| {
            let (m, n) = dims(rng);
            vec![random(rng, &[m, n]), random(rng, &[1, n])]
        },
        &|g, v| g.add_row(v[0], v[1]),
    )?);
    out.push(check_op("scale", config, &single, &|g, v| g.scale(v[0], -0.7))?);
    out.push(check_op(
        "mul_const",
        config,
        &single,
        &|g, v| {
            let shape = g.shape(v[0]).to_vec();
            let n = shape.iter().product::<usize>();
            let c = Tensor::new(shape, (0..n).map(|i| (i as f64 * 1.3).cos()).collect())?;
            g.mul_const(v[0], c)
        },
    )?);
    out.push(check_op(
        "matmul",
        config,
        &|rng| {
            let (m, k) = dims(rng);
            let n = 1 + rng.below(4);
            vec![random(rng, &[m, k]), random(rng, &[k, n])]
        },
        &|g, v| g.matmul(v[0], v[1]),
    )?);
    out.push(check_op(
        "matmul_t",
        config,
        &|rng| {
            let (m, k) = dims(rng);
            let n = 1 + rng.below(4);
            vec![random(rng, &[m, k]), random(rng, &[n, k])]
        },
        &|g, v| g.matmul_t(v[0], v[1]),
    )?);
    out.push(check_op("transpose", config, &single, &|g, v| g.transpose(v[0]))?);
    out.push(check_op("sigmoid", config, &single, &|g, v| g.sigmoid(v[0]))?);
    out.push(check_op("tanh", config, &single, &|g, v| g.tanh(v[0]))?);
    out.push(check_op(
        "relu",
        config,
        &|rng| {
            let (m, n) = dims(rng);
            vec![random_off_zero(rng, &[m, n])]
        },
        &|g, v| g.relu(v[0]),
    )?);
    out.push(check_op("softmax_rows", config, &single, &|g, v| g.softmax_rows(v[0], None))?);
    out.push(check_op(
        "softmax_rows_masked",
        config,
        &|rng| {
            let (m, n) = dims(rng);
            let n = n + 1;
            // last input encodes the mask: > 0 means blocked, column 0 always open
            let mask = Tensor::new(
                vec![m, n],
                (0..m * n).map(|i| if i % n != 0 && rng.below(3) == 0 { 1.0 } else { -1.0 }).collect(),
            )
            .expect("shape and data agree");
            vec![random(rng, &[m, n]), mask]
        },
        &|g, v| {
            let blocked: Vec<bool> = g.value(v[1]).data().iter().map(|&x| x > 0.0).collect();
            g.softmax_rows(v[0], Some(&blocked))
        },
    )?);
    out.push(check_op(
        "concat_cols",
        config,
        &|rng| {
            let (m, n) = dims(rng);
            let n2 = 1 + rng.below(3);
            vec![random(rng, &[m, n]), random(rng, &[m, n2])]
        },
        &|g, v| g.concat_cols(&[v[0], v[1], v[0]]),
    )?);
    out.push(check_op(
        "concat_rows",
        config,
        &|rng| {
            let (m, n) = dims(rng);
            let m2 = 1 + rng.below(3);
            vec![random(rng, &[m, n]), random(rng, &[m2, n])]
        },
        &|g, v| g.concat_rows(&[v[1], v[0]]),
    )?);
    out.push(check_op(
        "slice_cols",
        config,
        &|rng| {
            let m = 1 + rng.below(4);
            vec![random(rng, &[m, 5])]
        },
        &|g, v| g.slice_cols(v[0], 1, 3),
    )?);
    out.push(check_op(
        "slice_rows",
        config,
        &|rng| {
            let n = 1 + rng.below(4);
            vec![random(rng, &[5, n])]
        },
        &|g, v| g.slice_rows(v[0], 2, 2),
    )?);
    out.push(check_op(
        "embedding",
        config,
        &|rng| {
            let (_, d) = dims(rng);
            vec![random(rng, &[6, d])]
        },
        &|g, v| g.embedding(v[0], &[3, 0, 3, 5, 1]),
    )?);
    out.push(check_op(
        "layer_norm",
        config,
        &|rng| {
            let m = 1 + rng.below(4);
            let n = 2 + rng.below(5);
            vec![random(rng, &[m, n]), random(rng, &[1, n]), random(rng, &[1, n])]
        },
        &|g, v| g.layer_norm(v[0], v[1], v[2]),
    )?);
    out.push(check_op(
        "nll_loss",
        config,
        &|rng| {
            let t = 1 + rng.below(5);
            vec![random(rng, &[t, 7]).map(|x| 2.0 * x)]
        },
        &|g, v| {
            let t = g.value(v[0]).rows();
            let targets: Vec<usize> = (0..t).map(|i| (3 * i + 1) % 7).collect();
            let active: Vec<bool> = (0..t).map(|i| i == 0 || i % 3 != 2).collect();
            g.nll_loss(v[0], &targets, &active)
        },
    )?);
    out.push(check_op("sum", config, &single, &|g, v| g.sum(v[0]))?);
    out.push(check_op(
        "mean_of",
        config,
        &pair,
        &|g, v| {
            let a = g.sum(v[0])?;
            let sq = g.mul(v[1], v[1])?;
            let b = g.sum(sq)?;
            g.mean_of(&[a, b, a])
        },
    )?);
    Ok(out)
}

/// Largest relative error between backprop and central differences over every parameter element.
pub fn check_model_loss<M: Seq2Seq<f64>>(model: &mut M, batch: &Batch, eps: f64) -> Result<(usize, f64)> {
    let analytic = {
        let mut g = Graph::new(model.params());
        let loss = forward_loss(&mut g, &*model, batch)?;
        g.backward(loss)?
    };
    let loss_at = |m: &M| -> Result<f64> {
        let mut g = Graph::inference(m.params());
        let loss = forward_loss(&mut g, m, batch)?;
        Ok(g.value(loss).item())
    };
    let ids: Vec<_> = model.params().ids().collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in ids {
        let n = model.params().get(id).value.len();
        let grad = analytic.param(id).cloned().unwrap_or_else(|| Tensor::zeros(model.params().get(id).value.shape()));
        for k in 0..n {
            let orig = model.params().get(id).value.data()[k];
            model.params_mut().get_mut(id).value.data_mut()[k] = orig + eps;
            let up = loss_at(model)?;
            model.params_mut().get_mut(id).value.data_mut()[k] = orig - eps;
            let down = loss_at(model)?;
            model.params_mut().get_mut(id).value.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(grad.data()[k], numeric));
            checked += 1;
        }
    }
    Ok((checked, worst))
}

/// Two short records over an 11-token vocabulary.
pub fn toy_batch() -> Batch {
    let triplets = vec![
        Triplet {
            id: None,
            review: vec![4, 5, 6, 7, 8],
            query: vec![9, 5],
            tip: vec![BOS, 6, 10, 4, EOS],
            raw_review: String::new(),
            raw_query: String::new(),
            raw_tip: String::new(),
        },
        Triplet {
            id: None,
            review: vec![10, 9, 4],
            query: vec![7],
            tip: vec![BOS, 8, EOS],
            raw_review: String::new(),
            raw_query: String::new(),
            raw_tip: String::new(),
        },
    ];
    Batch::from_triplets(&triplets, vec![0, 1])
}

pub const TOY_VOCAB: usize = 11;

/// End-to-end checks on small RNN and Transformer models with the full query wiring.
pub fn model_suite(config: &GradcheckConfig) -> Result<Vec<GradcheckEntry>> {
    let batch = toy_batch();
    let mut out = Vec::new();
    let mut rnn = RnnModel::<f64>::new(RnnConfig::small(4, 4, Variant::Both), TOY_VOCAB, config.seed)?;
    let (checked, worst) = check_model_loss(&mut rnn, &batch, config.eps)?;
    out.push(GradcheckEntry {
        name: "model:rnn d=4 both".into(),
        trials: 1,
        checked,
        max_rel_err: worst,
        tolerance: config.model_tol,
        passed: worst < config.model_tol,
    });
    let mut tr = TransformerModel::<f64>::new(TransformerConfig::small(2, 8, 2, Variant::Both), TOY_VOCAB, config.seed)?;
    let (checked, worst) = check_model_loss(&mut tr, &batch, config.eps)?;
    out.push(GradcheckEntry {
        name: "model:transformer L=2 d=8 both".into(),
        trials: 1,
        checked,
        max_rel_err: worst,
        tolerance: config.model_tol,
        passed: worst < config.model_tol,
    });
    Ok(out)
}

pub fn run(config: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut entries = op_suite(config)?;
    entries.extend(model_suite(config)?);
    Ok(GradcheckReport { entries })
}
