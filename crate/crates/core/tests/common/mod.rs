//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use hetfl::data::{load_idx, Dataset};
use hetfl::federation::{client_rng, sample_participants, Simulation};
use hetfl::nn::{loss_and_grad, Batch, LayerLayout, ParamVector};
use hetfl::pruning::Mask;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("data")
}

pub fn mnist_subset() -> (Dataset, Dataset) {
    let d = data_dir();
    let train = load_idx(
        &d.join("mnist-subset-train-images-idx3-ubyte.gz"),
        &d.join("mnist-subset-train-labels-idx1-ubyte.gz"),
    )
    .expect("train fixture");
    let test = load_idx(
        &d.join("mnist-subset-test-images-idx3-ubyte.gz"),
        &d.join("mnist-subset-test-labels-idx1-ubyte.gz"),
    )
    .expect("test fixture");
    (train, test)
}

/// Mean softmax cross-entropy written out directly, no backprop.
pub fn reference_loss(layout: &LayerLayout, theta: &[f64], batch: &Batch) -> f64 {
    let mut total = 0.0;
    for (s, &label) in batch.labels().iter().enumerate() {
        let mut act: Vec<f64> = batch.inputs()[s * batch.dim()..(s + 1) * batch.dim()].to_vec();
        let last = layout.layers().len() - 1;
        for (l, layer) in layout.layers().iter().enumerate() {
            let mut next = vec![0.0; layer.fan_out];
            for (o, z) in next.iter_mut().enumerate() {
                let mut acc = theta[layer.biases().start + o];
                for (i, a) in act.iter().enumerate() {
                    acc += theta[layer.weight_index(o, i)] * a;
                }
                *z = if l < last { acc.max(0.0) } else { acc };
            }
            act = next;
        }
        let max = act.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + act.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - act[label];
    }
    total / batch.len() as f64
}

pub fn central_difference(layout: &LayerLayout, theta: &[f64], batch: &Batch, h: f64) -> Vec<f64> {
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            probe[i] = theta[i] + h;
            let up = reference_loss(layout, &probe, batch);
            probe[i] = theta[i] - h;
            let down = reference_loss(layout, &probe, batch);
            probe[i] = theta[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// A random MLP with at most 100 parameters, parameters and a batch.
pub fn random_small_net(rng: &mut ChaCha8Rng) -> (Arc<LayerLayout>, ParamVector, Batch) {
    loop {
        let hidden_layers = rng.random_range(1..=2);
        let mut sizes = vec![rng.random_range(2..=6)];
        for _ in 0..hidden_layers {
            sizes.push(rng.random_range(2..=6));
        }
        sizes.push(rng.random_range(2..=4));
        let layout = Arc::new(LayerLayout::new(sizes).unwrap());
        if layout.total_len() > 100 {
            continue;
        }
        let values = (0..layout.total_len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let params = ParamVector::from_values(Arc::clone(&layout), values).unwrap();
        let n = rng.random_range(1..=5);
        let inputs = (0..n * layout.input_dim())
            .map(|_| rng.random_range(-1.5..1.5))
            .collect();
        let labels = (0..n)
            .map(|_| rng.random_range(0..layout.num_classes()))
            .collect();
        let batch = Batch::new(inputs, labels, layout.input_dim()).unwrap();
        return (layout, params, batch);
    }
}

pub fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn random_masks(rng: &mut ChaCha8Rng, len: usize, slots: usize) -> Vec<Mask> {
    let p = rng.random_range(0.2..0.9);
    (0..slots)
        .map(|_| Mask::from_bits((0..len).map(|_| rng.random_bool(p)).collect()))
        .collect()
}

/// Per-index signature by scanning every mask.
pub fn brute_signature(masks: &[Mask], index: usize) -> Vec<usize> {
    (0..masks.len()).filter(|&s| masks[s].get(index)).collect()
}

/// Per-index mean over the slots keeping the index, in slot order; the
/// previous value when nobody keeps it.
pub fn brute_aggregate(previous: &[f64], locals: &[Vec<f64>], masks: &[Mask]) -> Vec<f64> {
    (0..previous.len())
        .map(|i| {
            let mut sum = 0.0;
            let mut count = 0u32;
            for (slot, local) in locals.iter().enumerate() {
                if masks[slot].get(i) {
                    sum += local[i];
                    count += 1;
                }
            }
            if count == 0 {
                previous[i]
            } else {
                sum / f64::from(count)
            }
        })
        .collect()
}

/// Plain FedAvg with plain SGD: same client draw, shards, shuffles and
/// initial model as `sim`, no masks. Returns the global model after each
/// round.
pub fn fedavg_reference(sim: &Simulation, rounds: u32) -> Vec<Vec<f64>> {
    let cfg = sim.config();
    let layout = Arc::clone(sim.layout());
    let lr = sim.training().learning_rate;
    let mut global = sim.initial_state().params.values().to_vec();
    let mut history = Vec::new();
    for round in 1..=rounds {
        let participants = sample_participants(cfg, round);
        let mut sum = vec![0.0; global.len()];
        for (slot, &client) in participants.iter().enumerate() {
            let mut rng = client_rng(cfg.seed, round, slot);
            let mut w = global.clone();
            let mut order = sim.shards()[client].clone();
            for _ in 0..cfg.local_epochs {
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.local_batch) {
                    let params = ParamVector::from_values(Arc::clone(&layout), w.clone()).unwrap();
                    let (_, g) = loss_and_grad(&params, &sim.train().batch(chunk)).unwrap();
                    for (wi, gi) in w.iter_mut().zip(&g) {
                        *wi -= lr * gi;
                    }
                }
            }
            for (s, wi) in sum.iter_mut().zip(&w) {
                *s += wi;
            }
        }
        let k = participants.len() as f64;
        global = sum.iter().map(|s| s / k).collect();
        history.push(global.clone());
    }
    history
}
