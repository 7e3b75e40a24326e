//! Finite-difference verification of every differentiable operator and of
//! the assembled model on a toy configuration.
//!
//! Each check reduces the operator output to a scalar through a fixed random
//! linear probe, so every output coordinate contributes to the gradient.
//! Inputs are drawn away from kinks and ties; coordinates whose perturbation
//! still crosses one are skipped by the checker.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionState, Lstm};
use crate::autograd::{grad_check, GradCheckReport, Graph, Tensor, Var};
use crate::backbone::BackboneConfig;
use crate::error::Result;
use crate::losses::{self, LossWeights};
use crate::model::{Model, ModelConfig};
use crate::params::{Bound, ParamStore};

pub const SUITE_TOLERANCE: f64 = 1e-4;
/// Bound met by every single-operator check.
pub const OPERATOR_TOLERANCE: f64 = 1e-6;
/// Operator checks are roundoff-bound, so they use the larger step.
pub const OPERATOR_STEP: f64 = 1e-2;
/// The full model crosses many more kinks; a smaller step skips fewer.
pub const MODEL_STEP: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub name: String,
    pub max_relative_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl SuiteEntry {
    fn new(name: &str, r: GradCheckReport) -> Self {
        SuiteEntry {
            name: name.to_string(),
            max_relative_error: r.max_relative_error,
            checked: r.checked,
            skipped: r.skipped,
        }
    }

    pub fn passes(&self) -> bool {
        self.checked > 0 && self.max_relative_error < SUITE_TOLERANCE
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("valid shape")
}

/// Values with magnitude in `[lo, hi]` and random sign.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// Distinct values spaced at least `gap` apart, in random order.
fn distinct(rng: &mut impl Rng, shape: &[usize], gap: f64) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).expect("valid shape")
}

/// `Σ v·R` for a fixed random `R` of `v`'s shape.
fn probe(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = uniform(&mut rng, &shape, -1.0, 1.0);
    let c = g.constant(&shape, r.data().to_vec())?;
    let prod = g.mul(v, c)?;
    g.sum(prod, None)
}

pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            input_height: 16,
            input_width: 16,
            channels: [2, 3, 4],
        },
        attention: AttentionConfig {
            steps: 3,
            hidden: 3,
            region_height: 2,
            region_width: 2,
        },
        codewords: 2,
        classes: 3,
    }
}

type Check = (&'static str, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>, Vec<Tensor>);

fn operator_checks(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let mut out: Vec<Check> = Vec::new();
    out.push((
        "conv2d",
        Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], 1, 1)?;
            probe(g, y, 1)
        }),
        vec![uniform(rng, &[5, 4, 2], -1.0, 1.0), uniform(rng, &[3, 2, 3, 3], -1.0, 1.0)],
    ));
    out.push((
        "conv2d_strided",
        Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], 2, 0)?;
            probe(g, y, 2)
        }),
        vec![uniform(rng, &[7, 6, 2], -1.0, 1.0), uniform(rng, &[2, 2, 3, 3], -1.0, 1.0)],
    ));
    out.push((
        "maxpool2d",
        Box::new(|g, v| {
            let y = g.maxpool2d(v[0], 2)?;
            probe(g, y, 3)
        }),
        vec![distinct(rng, &[4, 6, 2], 0.05)],
    ));
    out.push((
        "matmul",
        Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe(g, y, 4)
        }),
        vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[4, 5], -1.0, 1.0)],
    ));
    out.push((
        "bias_add",
        Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            let y = g.sub(y, v[1])?;
            let y = g.mul(y, v[1])?;
            probe(g, y, 5)
        }),
        vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[4], -1.0, 1.0)],
    ));
    let act = |rng: &mut ChaCha8Rng| away_from_zero(rng, &[2, 5], 0.05, 2.0);
    out.push(("relu", Box::new(|g, v| { let y = g.relu(v[0]); probe(g, y, 6) }), vec![act(rng)]));
    out.push(("sigmoid", Box::new(|g, v| { let y = g.sigmoid(v[0]); probe(g, y, 7) }), vec![act(rng)]));
    out.push(("tanh", Box::new(|g, v| { let y = g.tanh(v[0]); probe(g, y, 8) }), vec![act(rng)]));
    out.push(("exp", Box::new(|g, v| { let y = g.exp(v[0]); probe(g, y, 9) }), vec![act(rng)]));
    out.push(("softplus", Box::new(|g, v| { let y = g.softplus(v[0]); probe(g, y, 10) }), vec![act(rng)]));
    out.push(("square", Box::new(|g, v| { let y = g.square(v[0]); probe(g, y, 11) }), vec![act(rng)]));
    out.push((
        "softmax",
        Box::new(|g, v| {
            let a = g.softmax(v[0], 0)?;
            let b = g.softmax(v[0], 1)?;
            let s = g.add(a, b)?;
            probe(g, s, 12)
        }),
        vec![act(rng)],
    ));
    out.push((
        "l2_normalize",
        Box::new(|g, v| {
            let y = g.l2_normalize(v[0], 1e-12);
            probe(g, y, 13)
        }),
        vec![act(rng)],
    ));
    out.push((
        "reductions",
        Box::new(|g, v| {
            let a = g.sum(v[0], Some(0))?;
            let b = g.mean(v[0], Some(1))?;
            let m = g.max(v[0], 0)?;
            let n = g.narrow(v[0], 1, 1, 3)?;
            let n = g.reshape(n, &[6])?;
            let all = g.concat(&[a, b, m, n], 0)?;
            probe(g, all, 14)
        }),
        vec![distinct(rng, &[2, 5], 0.1)],
    ));
    out.push((
        "bilinear_sample",
        Box::new(|g, v| {
            let grid = g.affine_grid(v[1], 3, 4)?;
            let y = g.bilinear_sample(v[0], grid)?;
            probe(g, y, 15)
        }),
        vec![
            uniform(rng, &[6, 5, 3], -1.0, 1.0),
            Tensor::from_vec(vec![0.63, 0.71, 0.12, -0.17]),
        ],
    ));
    out.push((
        "attention_mask",
        Box::new(|g, v| {
            let grid = g.affine_grid(v[0], 3, 3)?;
            let (m, _) = g.attention_mask(grid, 6, 5)?;
            probe(g, m, 16)
        }),
        vec![Tensor::from_vec(vec![0.43, 0.52, 0.21, -0.13])],
    ));
    out.push((
        "texture_encode",
        Box::new(|g, v| {
            let s = g.softplus(v[2]);
            let y = g.texture_encode(v[0], v[1], s)?;
            let y = g.l2_normalize(y, 1e-12);
            probe(g, y, 17)
        }),
        vec![
            uniform(rng, &[6, 3], -1.0, 1.0),
            uniform(rng, &[4, 3], -1.0, 1.0),
            uniform(rng, &[4], -1.0, 1.0),
        ],
    ));
    // LSTM parameters followed by the input and the recurrent state
    let mut store = ParamStore::new();
    let lstm = Lstm::new(3, 2, &mut store, rng);
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    let n = inputs.len();
    inputs.push(uniform(rng, &[1, 3], -1.0, 1.0));
    inputs.push(uniform(rng, &[1, 2], -0.5, 0.5));
    inputs.push(uniform(rng, &[1, 2], -0.5, 0.5));
    out.push((
        "lstm_cell",
        Box::new(move |g, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let s = lstm.step(g, &p, v[n], AttentionState { h: v[n + 1], c: v[n + 2] })?;
            let s2 = lstm.step(g, &p, v[n], s)?;
            let hc = g.concat(&[s2.h, s2.c], 1)?;
            probe(g, hc, 18)
        }),
        inputs,
    ));
    out.push((
        "classification_loss",
        Box::new(|g, v| {
            let t = g.constant(&[4], vec![1.0, 0.0, 0.0, 1.0])?;
            let s = g.sigmoid(v[0]);
            losses::classification_loss(g, s, t)
        }),
        vec![uniform(rng, &[4], -2.0, 2.0)],
    ));
    out.push((
        "divergence_loss",
        Box::new(|g, v| losses::divergence_loss(g, &[v[0], v[1], v[2]])),
        vec![
            uniform(rng, &[3, 2], 0.05, 1.0),
            uniform(rng, &[3, 2], 0.05, 1.0),
            uniform(rng, &[3, 2], 0.05, 1.0),
        ],
    ));
    out.push((
        "localization_loss",
        Box::new(|g, v| losses::localization_loss(g, &[v[0], v[1], v[2]])),
        vec![
            Tensor::from_vec(vec![0.9, 0.8, 0.1, 0.0]),
            Tensor::from_vec(vec![0.7, 0.2, 0.3, -0.4]),
            Tensor::from_vec(vec![0.61, 0.83, -0.2, 0.5]),
        ],
    ));
    out
}

/// One check per operator plus the full model on [`toy_model_config`].
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, f, inputs) in operator_checks(&mut rng) {
        let r = grad_check(|g, v| f(g, v), &inputs, OPERATOR_STEP)?;
        out.push(SuiteEntry::new(name, r));
    }
    out.push(SuiteEntry::new("full_model", full_model_check(seed)?));
    Ok(out)
}

/// Loss of a single sample with respect to every parameter and the image.
pub fn full_model_check(seed: u64) -> Result<GradCheckReport> {
    let model = Model::new(toy_model_config(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
    let mut inputs: Vec<Tensor> = model.store.iter().map(|(_, t)| t.clone()).collect();
    let n = inputs.len();
    let b = model.config.backbone;
    inputs.push(uniform(&mut rng, &[b.input_height, b.input_width, 3], 0.0, 1.0));
    let classes = model.config.classes;
    grad_check(
        |g, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let mut t = vec![0.0; classes];
            t[0] = 1.0;
            let target = g.constant(&[classes], t)?;
            let fwd = model.forward(g, &p, v[n])?;
            let l = model.loss(g, &fwd, target, &LossWeights::default())?;
            Ok(l.total)
        },
        &inputs,
        MODEL_STEP,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let entries = run_suite(3).unwrap();
        for e in &entries {
            println!("{:<20} {:.3e} checked {} skipped {}", e.name, e.max_relative_error, e.checked, e.skipped);
        }
        assert!(entries.iter().all(SuiteEntry::passes));
    }

    #[test]
    fn single_operators_meet_the_tight_bound() {
        for seed in [3, 11] {
            for e in run_suite(seed).unwrap().iter().filter(|e| e.name != "full_model") {
                assert!(e.max_relative_error < OPERATOR_TOLERANCE, "{} at seed {seed}: {:.3e}", e.name, e.max_relative_error);
                assert!(e.checked > 0, "{} checked nothing", e.name);
            }
        }
    }
}
