//! Randomized internal consistency checks run by `hetfl selfcheck`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::federation::{aggregate, decompose_regions, LocalModel};
use crate::nn::{loss_and_grad, masked_sgd_step, Batch, LayerLayout, OptimizerState, ParamVector};
use crate::pruning::{apply_mask, Mask};

/// Deliberate corruption used to confirm that a check can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    Gradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub instances: usize,
    pub failure: Option<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

pub const GRADIENT_TOLERANCE: f64 = 1e-5;

fn random_net(rng: &mut ChaCha8Rng) -> (Arc<LayerLayout>, ParamVector, Batch) {
    let depth = rng.random_range(2..=3);
    let mut sizes: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=5)).collect();
    sizes.push(rng.random_range(2..=4));
    let layout = Arc::new(LayerLayout::new(sizes).expect("random sizes are positive"));
    let values = (0..layout.total_len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let params = ParamVector::from_values(Arc::clone(&layout), values).expect("length matches");
    let n = rng.random_range(1..=6);
    let inputs = (0..n * layout.input_dim())
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let labels = (0..n)
        .map(|_| rng.random_range(0..layout.num_classes()))
        .collect();
    let batch = Batch::new(inputs, labels, layout.input_dim()).expect("shapes match");
    (layout, params, batch)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of the batch loss.
pub fn finite_difference_grad(params: &ParamVector, batch: &Batch, h: f64) -> Vec<f64> {
    let mut probe = params.clone();
    (0..params.len())
        .map(|i| {
            let v = params.values()[i];
            probe.values_mut()[i] = v + h;
            let up = loss_and_grad(&probe, batch).expect("valid batch").0;
            probe.values_mut()[i] = v - h;
            let down = loss_and_grad(&probe, batch).expect("valid batch").0;
            probe.values_mut()[i] = v;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn check_gradients(
    rng: &mut ChaCha8Rng,
    instances: usize,
    fault: Option<Fault>,
) -> CheckResult {
    let mut failure = None;
    for k in 0..instances {
        let (_, params, batch) = random_net(rng);
        let (_, mut grad) = loss_and_grad(&params, &batch).expect("valid batch");
        if fault == Some(Fault::Gradient) {
            grad[0] += 1e-2;
        }
        let numeric = finite_difference_grad(&params, &batch, 1e-5);
        let err = relative_error(&grad, &numeric);
        if err > GRADIENT_TOLERANCE {
            failure = Some(format!("instance {k}: relative error {err:.3e}"));
            break;
        }
    }
    CheckResult {
        name: "gradient_fd",
        instances,
        failure,
    }
}

fn random_masks(rng: &mut ChaCha8Rng, len: usize, slots: usize) -> Vec<Mask> {
    (0..slots)
        .map(|_| (0..len).map(|_| rng.random_bool(0.6)).collect())
        .collect()
}

pub fn check_regions(rng: &mut ChaCha8Rng, instances: usize) -> CheckResult {
    let mut failure = None;
    'outer: for k in 0..instances {
        let len = rng.random_range(1..=64);
        let slots = rng.random_range(1..=6);
        let masks = random_masks(rng, len, slots);
        let partition = decompose_regions(&masks).expect("equal lengths");
        let mut owner = vec![None; len];
        for (r, region) in partition.regions.iter().enumerate() {
            for &i in &region.indices {
                if owner[i].replace(r).is_some() {
                    failure = Some(format!("instance {k}: index {i} in two regions"));
                    break 'outer;
                }
                let signature: Vec<usize> = (0..slots).filter(|&s| masks[s].get(i)).collect();
                if signature != region.signature {
                    failure = Some(format!("instance {k}: wrong signature at index {i}"));
                    break 'outer;
                }
            }
        }
        if owner.iter().any(Option::is_none) {
            failure = Some(format!("instance {k}: partition misses an index"));
            break;
        }
    }
    CheckResult {
        name: "region_partition",
        instances,
        failure,
    }
}

pub fn check_aggregation(rng: &mut ChaCha8Rng, instances: usize) -> CheckResult {
    let mut failure = None;
    for k in 0..instances {
        let len = rng.random_range(2..=64);
        let layout = Arc::new(LayerLayout::new(vec![len - 1, 1]).expect("positive sizes"));
        let slots = rng.random_range(1..=6);
        let masks = random_masks(rng, len, slots);
        let previous = ParamVector::from_values(
            Arc::clone(&layout),
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .expect("length matches");
        let locals: Vec<LocalModel> = masks
            .iter()
            .enumerate()
            .map(|(slot, m)| {
                let raw = ParamVector::from_values(
                    Arc::clone(&layout),
                    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .expect("length matches");
                LocalModel {
                    slot,
                    params: apply_mask(&raw, m).expect("length matches"),
                    mask: m.clone(),
                }
            })
            .collect();
        let partition = decompose_regions(&masks).expect("equal lengths");
        let got = aggregate(&previous, &locals, &partition).expect("consistent inputs");
        for i in 0..len {
            let mut sum = 0.0;
            let mut count = 0;
            for local in &locals {
                if local.mask.get(i) {
                    sum += local.params.values()[i];
                    count += 1;
                }
            }
            let want = if count == 0 {
                previous.values()[i]
            } else {
                sum / f64::from(count)
            };
            if got.values()[i].to_bits() != want.to_bits() {
                failure = Some(format!(
                    "instance {k}: index {i} is {} not {want}",
                    got.values()[i]
                ));
                break;
            }
        }
        if failure.is_some() {
            break;
        }
    }
    CheckResult {
        name: "aggregation",
        instances,
        failure,
    }
}

pub fn check_mask_closure(rng: &mut ChaCha8Rng, instances: usize) -> CheckResult {
    let mut failure = None;
    'outer: for k in 0..instances {
        let (_, params, batch) = random_net(rng);
        let mask: Mask = (0..params.len()).map(|_| rng.random_bool(0.5)).collect();
        let mut params = apply_mask(&params, &mask).expect("length matches");
        let momentum = rng.random_range(0.0..0.9);
        let mut opt = OptimizerState::new(params.len(), 0.1, momentum).expect("valid optimizer");
        for _ in 0..10 {
            let (_, grad) = loss_and_grad(&params, &batch).expect("valid batch");
            masked_sgd_step(&mut params, &grad, &mask, &mut opt).expect("lengths match");
            let leaked = (0..params.len()).find(|&i| {
                !mask.get(i)
                    && (params.values()[i].to_bits() != 0 || opt.momentum_buffer[i].to_bits() != 0)
            });
            if let Some(i) = leaked {
                failure = Some(format!("instance {k}: masked index {i} moved"));
                break 'outer;
            }
        }
    }
    CheckResult {
        name: "mask_closure",
        instances,
        failure,
    }
}

/// Runs every check from one seeded stream.
pub fn run_all(seed: u64, fault: Option<Fault>) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        check_gradients(&mut rng, 100, fault),
        check_regions(&mut rng, 1000),
        check_aggregation(&mut rng, 1000),
        check_mask_closure(&mut rng, 100),
    ]
}
