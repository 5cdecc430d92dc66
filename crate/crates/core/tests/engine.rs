mod common;

use hetfl::data::{synth_blobs, PartitionMode};
use hetfl::federation::{
    client_rng, local_update, FamilyName, FederationConfig, LocalTraining, Simulation,
};
use hetfl::metrics::{weighted_accuracy, WeightedClient};
use hetfl::nn::{argmax, forward, loss_and_grad};
use hetfl::pruning::Mask;

fn blobs_sim(config: FederationConfig) -> Simulation {
    let train = synth_blobs(10, 40, 20, 0.3, 1).unwrap();
    let test = synth_blobs(10, 20, 20, 0.3, 2).unwrap();
    Simulation::new(config, train, test).unwrap()
}

fn small(codename: &str) -> FederationConfig {
    FederationConfig {
        num_clients: 10,
        participation_ratio: codename.len() as f64 / 10.0,
        rounds: 4,
        local_epochs: 2,
        codename: codename.into(),
        hidden: vec![24],
        ..FederationConfig::default()
    }
}

#[test]
fn single_full_batch_step_matches_nn_arithmetic() {
    let sim = blobs_sim(small("1111111111"));
    let state = sim.initial_state();
    let shard = sim.shards()[0].clone();
    let training = LocalTraining {
        epochs: 1,
        batch_size: shard.len(),
        learning_rate: 0.3,
        momentum: 0.5,
    };
    let mask = Mask::ones(state.params.len());
    let got = local_update(
        &state.params,
        &mask,
        sim.train(),
        &shard,
        &training,
        &mut client_rng(0, 1, 0),
    )
    .unwrap();
    // One batch holding the whole shard: order does not change the mean
    // gradient up to summation order, so compare with a tolerance.
    let (_, g) = loss_and_grad(&state.params, &sim.train().batch(&shard)).unwrap();
    for ((a, p), gi) in got.values().iter().zip(state.params.values()).zip(&g) {
        assert!((a - (p - 0.3 * gi)).abs() < 1e-12);
    }
}

#[test]
fn pruned_count_is_invariant_through_training() {
    let sim = blobs_sim(small("1111111111"));
    let state = sim.initial_state();
    let mask: Mask = (0..state.params.len()).map(|i| i % 5 != 0).collect();
    let training = LocalTraining {
        epochs: 3,
        batch_size: 10,
        learning_rate: 0.1,
        momentum: 0.5,
    };
    let out = local_update(
        &state.params,
        &mask,
        sim.train(),
        &sim.shards()[2],
        &training,
        &mut client_rng(0, 1, 2),
    )
    .unwrap();
    let zeros = out
        .values()
        .iter()
        .enumerate()
        .filter(|(i, v)| !mask.get(*i) && v.to_bits() == 0)
        .count();
    assert_eq!(zeros, mask.len() - mask.count_ones());
}

#[test]
fn full_model_matches_fedavg_with_momentum_off() {
    let sim = blobs_sim(FederationConfig {
        momentum: 0.0,
        ..small("11111")
    });
    let reference = common::fedavg_reference(&sim, 3);
    let mut state = sim.initial_state();
    for want in &reference {
        sim.run_round(&mut state).unwrap();
        assert_eq!(state.params.values(), &want[..]);
    }
}

#[test]
fn heterogeneous_run_learns_under_label_skew() {
    let config = FederationConfig {
        partition: PartitionMode::LabelSkew,
        rounds: 15,
        learning_rate: Some(0.1),
        family: FamilyName::Np,
        ..small("1111223344")
    };
    let sim = blobs_sim(config);
    let out = sim.run().unwrap();
    assert_eq!(out.metrics.len(), 15);
    assert!(out.metrics.iter().all(|m| m.gamma_min == 8));
    let last = out.metrics.last().unwrap();
    assert!(last.global_accuracy > 0.5, "{}", last.global_accuracy);
    assert!(last.delta_sq.iter().all(|d| (0.0..1.0).contains(d)));
    assert_eq!(last.amortized_params, {
        let layout = sim.layout();
        // Four full models and six with a quarter of the hidden neurons gone.
        let full = layout.total_len() as f64;
        let neuron = (20 + 1 + 10) as f64;
        (4.0 * full + 6.0 * (full - 6.0 * neuron)) / 10.0
    });
}

#[test]
fn local_accuracy_is_uniform_mean_over_test_portions() {
    let sim = blobs_sim(FederationConfig {
        rounds: 1,
        ..small("1111111111")
    });
    let out = sim.run().unwrap();
    let m = &out.metrics[0];
    let params = &out.final_params;
    let portions =
        hetfl::data::test_portions(sim.train().labels(), sim.shards(), sim.test().labels(), 10);
    let mut seen: Vec<usize> = portions.concat();
    seen.sort_unstable();
    assert_eq!(seen, (0..sim.test().len()).collect::<Vec<_>>());
    let logits = forward(params, &sim.test().batch(&seen)).unwrap();
    let correct: Vec<bool> = (0..seen.len())
        .map(|i| argmax(&logits[i * 10..(i + 1) * 10]) == sim.test().labels()[i])
        .collect();
    let per_client: Vec<f64> = portions
        .iter()
        .map(|p| p.iter().filter(|&&i| correct[i]).count() as f64 / p.len() as f64)
        .collect();
    let want = per_client.iter().sum::<f64>() / 10.0;
    assert!(
        (m.local_weighted_accuracy - want).abs() < 1e-12,
        "{} vs {want}",
        m.local_weighted_accuracy
    );
    let union = correct.iter().filter(|&&c| c).count() as f64 / seen.len() as f64;
    assert!((m.global_accuracy - union).abs() < 1e-15);
    let data = sim.test();
    let one = [WeightedClient {
        weight: 1.0,
        params,
        data,
    }];
    assert_eq!(weighted_accuracy(&one, 32).unwrap(), union);
}

#[test]
fn init_seed_shares_the_starting_model() {
    let a = blobs_sim(FederationConfig {
        seed: 1,
        init_seed: Some(5),
        ..small("1111111111")
    });
    let b = blobs_sim(FederationConfig {
        seed: 2,
        init_seed: Some(5),
        ..small("1111111111")
    });
    assert_eq!(a.initial_state().params, b.initial_state().params);
    assert_ne!(a.run().unwrap().final_params, b.run().unwrap().final_params);
}
