//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

use fedpai::data::{PartitionKind, SyntheticSpec};
use fedpai::federation::{DatasetSource, RunConfig, Strategy, StrategyConfig};
use fedpai::mask::Mask;
use fedpai::nn::{loss_and_grad, Layer, ModelSpec, ModelState};
use fedpai::structured::{hamming_distance, ChannelMask};
use fedpai::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small task that trains in milliseconds.
pub fn toy_run(strategy: Strategy, kappa: f64, rounds: usize) -> RunConfig {
    RunConfig {
        dataset: DatasetSource::Synthetic(SyntheticSpec {
            num_classes: 4,
            samples_per_class: 40,
            input_dim: 8,
            radius: 3.0,
            seed: 11,
        }),
        model: ModelSpec::mlp(8, &[16, 12], 4),
        num_clients: 6,
        partition: PartitionKind::Dirichlet { alpha: 1.0 },
        rounds,
        strategy: StrategyConfig {
            strategy,
            kappa,
            local_epochs: 1,
            batch_size: 8,
            clients_per_round: 0.5,
            grasp_batch: 16,
            ..Default::default()
        },
    }
}

/// A random MLP or CNN with at most `max_params` parameters.
pub fn random_spec(r: &mut ChaCha8Rng, max_params: usize) -> ModelSpec {
    loop {
        let spec = if r.random_bool(0.5) {
            let input = r.random_range(2..8);
            let depth = r.random_range(0..3);
            let hidden: Vec<usize> = (0..depth).map(|_| r.random_range(2..10)).collect();
            ModelSpec::mlp(input, &hidden, r.random_range(2..5))
        } else {
            let in_c = r.random_range(1..3);
            let side = r.random_range(2..5);
            let depth = r.random_range(1..3);
            let chans: Vec<usize> = (0..depth).map(|_| r.random_range(1..4)).collect();
            let k = if r.random_bool(0.5) { 1 } else { 3 };
            ModelSpec::cnn(in_c, side, &chans, k, r.random_range(2..4))
        };
        if spec.num_params() <= max_params {
            return spec;
        }
    }
}

pub fn random_state(spec: &ModelSpec, r: &mut ChaCha8Rng, scale: f64) -> ModelState {
    let params = (0..spec.num_params())
        .map(|_| r.random_range(-scale..scale))
        .collect();
    ModelState::new(params, spec.layout()).unwrap()
}

pub fn random_batch(spec: &ModelSpec, r: &mut ChaCha8Rng, n: usize) -> (Tensor, Vec<usize>) {
    let d = spec.input_len();
    let x = (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut shape = vec![n];
    shape.extend(&spec.input_shape);
    let y = (0..n)
        .map(|_| r.random_range(0..spec.num_classes))
        .collect();
    (Tensor::new(shape, x).unwrap(), y)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn loss_at(spec: &ModelSpec, params: &[f64], x: &Tensor, y: &[usize]) -> f64 {
    let s = ModelState::new(params.to_vec(), spec.layout()).unwrap();
    loss_and_grad(spec, &s, x, y).unwrap().0
}

pub fn grad_at(spec: &ModelSpec, params: &[f64], x: &Tensor, y: &[usize]) -> Vec<f64> {
    let s = ModelState::new(params.to_vec(), spec.layout()).unwrap();
    loss_and_grad(spec, &s, x, y).unwrap().1
}

/// Central finite differences of the loss.
pub fn fd_gradient(spec: &ModelSpec, params: &[f64], x: &Tensor, y: &[usize], h: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = loss_at(spec, &p, x, y);
            p[i] = orig - h;
            let down = loss_at(spec, &p, x, y);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central finite differences of the gradient along `v`.
pub fn fd_hvp(
    spec: &ModelSpec,
    params: &[f64],
    v: &[f64],
    x: &Tensor,
    y: &[usize],
    h: f64,
) -> Vec<f64> {
    let shift = |s: f64| -> Vec<f64> { params.iter().zip(v).map(|(p, d)| p + s * h * d).collect() };
    let up = grad_at(spec, &shift(1.0), x, y);
    let down = grad_at(spec, &shift(-1.0), x, y);
    up.iter()
        .zip(&down)
        .map(|(a, b)| (a - b) / (2.0 * h))
        .collect()
}

/// Keep the `k` largest scores by a full sort (score descending, index ascending).
pub fn brute_top_k(scores: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut bits = vec![false; scores.len()];
    for &i in &order[..k] {
        bits[i] = true;
    }
    bits
}

/// Dense mean of `params ⊙ mask` over all updates, biases always kept.
pub fn dense_mean(updates: &[(ModelState, Mask)]) -> Vec<f64> {
    let n = updates[0].0.len();
    let mut out = vec![0.0; n];
    for (s, m) in updates {
        let keep = s.expand_mask(m).unwrap();
        for i in 0..n {
            if keep[i] {
                out[i] += s.params[i];
            }
        }
    }
    out.iter().map(|v| v / updates.len() as f64).collect()
}

/// Flat model with `n` prunable weights and no biases.
pub fn flat_spec(n: usize) -> ModelSpec {
    ModelSpec {
        layers: vec![Layer::Dense {
            in_dim: 1,
            out_dim: n,
            bias: false,
        }],
        input_shape: vec![1],
        num_classes: n.max(2),
    }
}

/// Direct evaluation of the Early-Bird condition over a list of masks, newest last.
pub fn direct_ebt(masks: &[ChannelMask], eps: f64) -> bool {
    if masks.len() < 2 {
        return false;
    }
    let newest = masks.last().unwrap();
    masks[..masks.len() - 1]
        .iter()
        .all(|m| hamming_distance(m, newest).unwrap() < eps)
}
