mod common;

use std::sync::Arc;

use hetfl::data::{
    parse_idx_images, parse_idx_labels, partition, to_idx_bytes, Dataset, PartitionMode,
    PartitionSpec,
};
use hetfl::federation::{aggregate, decompose_regions, LocalModel};
use hetfl::metrics::{
    emit_csv, iid_bound, parse_csv, BoundReading, MetricsRecord, TheoryConstants,
};
use hetfl::nn::{loss_and_grad, masked_sgd_step, LayerLayout, OptimizerState, ParamVector};
use hetfl::pruning::{
    apply_mask, generate_mask, pruning_noise, quartile_segments, rank_maskable, Family, Mask,
    MaskableSet, PruningPolicy, SegmentSet,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn family() -> impl Strategy<Value = Family> {
    prop_oneof![Just(Family::Wp), Just(Family::Np), Just(Family::Fs)]
}

fn mlp_params() -> impl Strategy<Value = ParamVector> {
    (2usize..7, 4usize..10, 2usize..4).prop_flat_map(|(i, h, o)| {
        let layout = Arc::new(LayerLayout::mlp(i, &[h], o).unwrap());
        let len = layout.total_len();
        prop::collection::vec(-2.0f64..2.0, len)
            .prop_map(move |v| ParamVector::from_values(Arc::clone(&layout), v).unwrap())
    })
}

fn segments() -> impl Strategy<Value = Vec<usize>> {
    prop::sample::subsequence(vec![1usize, 2, 3, 4], 1..=4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_matches_central_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (layout, params, batch) = common::random_small_net(&mut rng);
        let (_, g) = loss_and_grad(&params, &batch).unwrap();
        let fd = common::central_difference(&layout, params.values(), &batch, 1e-5);
        prop_assert!(common::relative_l2(&g, &fd) <= 1e-5);
    }

    #[test]
    fn masked_coordinates_stay_zero(seed in any::<u64>(), momentum in 0.0f64..0.95, steps in 1usize..15) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, params, batch) = common::random_small_net(&mut rng);
        let mask = common::random_masks(&mut rng, params.len(), 1).remove(0);
        let mut p = apply_mask(&params, &mask).unwrap();
        let mut opt = OptimizerState::new(p.len(), 0.2, momentum).unwrap();
        for _ in 0..steps {
            let (_, g) = loss_and_grad(&p, &batch).unwrap();
            masked_sgd_step(&mut p, &g, &mask, &mut opt).unwrap();
            for i in (0..p.len()).filter(|&i| !mask.get(i)) {
                prop_assert_eq!(p.values()[i].to_bits(), 0);
                prop_assert_eq!(opt.momentum_buffer[i].to_bits(), 0);
            }
        }
    }

    #[test]
    fn sgd_trajectory_is_deterministic(seed in any::<u64>()) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, mut p, batch) = common::random_small_net(&mut rng);
            let mask = Mask::ones(p.len());
            let mut opt = OptimizerState::new(p.len(), 0.1, 0.5).unwrap();
            for _ in 0..5 {
                let (_, g) = loss_and_grad(&p, &batch).unwrap();
                masked_sgd_step(&mut p, &g, &mask, &mut opt).unwrap();
            }
            p.into_values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn regions_partition_indices(seed in any::<u64>(), len in 1usize..=64, slots in 1usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masks = common::random_masks(&mut rng, len, slots);
        let p = decompose_regions(&masks).unwrap();
        let mut all: Vec<usize> = p.regions.iter().flat_map(|r| r.indices.clone()).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
        for r in &p.regions {
            for &i in &r.indices {
                prop_assert_eq!(&common::brute_signature(&masks, i), &r.signature);
            }
        }
    }

    #[test]
    fn aggregation_matches_oracle_in_any_order(seed in any::<u64>(), len in 2usize..=64, slots in 1usize..=6) {
        use rand::seq::SliceRandom;
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masks = common::random_masks(&mut rng, len, slots);
        let layout = Arc::new(LayerLayout::new(vec![len - 1, 1]).unwrap());
        let previous: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
        let locals: Vec<Vec<f64>> = masks
            .iter()
            .map(|m| (0..len).map(|i| if m.get(i) { rng.random_range(-3.0..3.0) } else { 0.0 }).collect())
            .collect();
        let mut models: Vec<LocalModel> = locals
            .iter()
            .zip(&masks)
            .enumerate()
            .map(|(slot, (v, m))| LocalModel {
                slot,
                params: ParamVector::from_values(Arc::clone(&layout), v.clone()).unwrap(),
                mask: m.clone(),
            })
            .collect();
        models.shuffle(&mut rng);
        let prev = ParamVector::from_values(Arc::clone(&layout), previous.clone()).unwrap();
        let got = aggregate(&prev, &models, &decompose_regions(&masks).unwrap()).unwrap();
        let want = common::brute_aggregate(&previous, &locals, &masks);
        prop_assert_eq!(
            got.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            want.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn segments_partition_maskable_set(params in mlp_params(), family in family()) {
        let maskable = MaskableSet::default_for(params.layout(), family).unwrap();
        let segs = quartile_segments(&rank_maskable(&params, &maskable, family).unwrap()).unwrap();
        let mut all: Vec<usize> = segs.sets.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, maskable.indices().to_vec());
    }

    #[test]
    fn kept_count_matches_segment_sizes(params in mlp_params(), family in family(), kept in segments()) {
        let maskable = MaskableSet::default_for(params.layout(), family).unwrap();
        let policy = PruningPolicy { family, kept: SegmentSet::of(&kept), freeze_after_round: None };
        let segs = quartile_segments(&rank_maskable(&params, &maskable, family).unwrap()).unwrap();
        let effective = policy.effective_segments();
        let expected: usize = effective.iter().map(|s| segs.sets[s - 1].len()).sum();
        let mask = generate_mask(&policy, &params, &maskable, 1, None).unwrap();
        let in_set = maskable.indices().iter().filter(|&&i| mask.get(i)).count();
        prop_assert_eq!(in_set, expected);
        let outside = (0..params.len()).filter(|i| !maskable.indices().contains(i)).all(|i| mask.get(i));
        prop_assert!(outside);
    }

    #[test]
    fn more_segments_never_add_noise(params in mlp_params(), family in family(), small in segments(), extra in segments()) {
        let maskable = MaskableSet::default_for(params.layout(), family).unwrap();
        let mut large = small.clone();
        large.extend(extra);
        let noise = |kept: &[usize]| {
            let policy = PruningPolicy { family, kept: SegmentSet::of(kept), freeze_after_round: None };
            pruning_noise(&params, &generate_mask(&policy, &params, &maskable, 1, None).unwrap()).unwrap().delta_sq
        };
        let (a, b) = (noise(&large), noise(&small));
        prop_assert!(a <= b);
        prop_assert!((0.0..1.0).contains(&b));
    }

    #[test]
    fn frozen_mask_ignores_params(a in mlp_params(), round in 4u32..50) {
        let maskable = MaskableSet::default_for(a.layout(), Family::Wp).unwrap();
        let policy = PruningPolicy { family: Family::Wp, kept: SegmentSet::of(&[1, 2]), freeze_after_round: Some(3) };
        let frozen = generate_mask(&policy, &a, &maskable, 3, None).unwrap();
        let b = ParamVector::from_values(Arc::clone(a.layout()), a.values().iter().map(|v| -v * 0.5 + 0.1).collect()).unwrap();
        prop_assert_eq!(generate_mask(&policy, &b, &maskable, round, Some(&frozen)).unwrap(), frozen);
    }

    #[test]
    fn partitions_are_exact(n in 20usize..200, clients in 1usize..10, skew in any::<bool>(), seed in any::<u64>()) {
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + i / 3) % 10).collect();
        let spec = PartitionSpec {
            mode: if skew { PartitionMode::LabelSkew } else { PartitionMode::Iid },
            num_clients: clients,
            classes_per_client: 2,
            seed,
        };
        if let Ok(shards) = partition(&labels, 10, &spec) {
            prop_assert_eq!(shards.len(), clients);
            let mut all: Vec<usize> = shards.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            if skew {
                for s in &shards {
                    let mut ls: Vec<usize> = s.iter().map(|&i| labels[i]).collect();
                    ls.sort_unstable();
                    ls.dedup();
                    prop_assert!(ls.len() <= 2);
                }
            } else {
                let sizes: Vec<usize> = shards.iter().map(Vec::len).collect();
                prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            }
            prop_assert_eq!(shards, partition(&labels, 10, &spec).unwrap());
        }
    }

    #[test]
    fn bound_monotone(
        l in 0.1f64..5.0, g in 0.1f64..5.0, s in 0.0f64..5.0, n in 1.0f64..50.0, t in 1.0f64..10.0,
        q in 1.0f64..1000.0, gamma in 0.5f64..20.0, d in 0.0f64..0.9, avg in 0.0f64..10.0, f0 in 0.0f64..5.0,
    ) {
        let c = TheoryConstants { l, g, sigma_sq: s, k: n, n, t, q, gamma_star: gamma, delta_sq: d, avg_theta_norm_sq: avg, f0 };
        let base = iid_bound(&c, BoundReading::OverQ).unwrap();
        let wider = TheoryConstants { gamma_star: gamma * 2.0, ..c };
        let noisier = TheoryConstants { delta_sq: (d + 1.0) / 2.0, ..c };
        prop_assert!(iid_bound(&wider, BoundReading::OverQ).unwrap() <= base);
        prop_assert!(iid_bound(&noisier, BoundReading::OverQ).unwrap() >= base);
    }

    #[test]
    fn csv_round_trip(rows in prop::collection::vec(
        (any::<u32>(), any::<f64>(), 0.0f64..=1.0, 0.0f64..=1.0, 0usize..20, 0.0f64..1.0, prop::option::of(0.0f64..1e6), 0.0f64..2e5),
        0..8,
    )) {
        let records: Vec<MetricsRecord> = rows
            .into_iter()
            .map(|(round, loss, ag, al, gamma, d, gn, p)| MetricsRecord {
                round,
                loss: if loss.is_nan() { 0.0 } else { loss },
                acc_global: ag,
                acc_local: al,
                gamma_min: gamma,
                delta_sq_mean: d,
                grad_norm_sq: gn,
                params_amortized: p,
                flops_amortized: p * 0.99,
            })
            .collect();
        prop_assert_eq!(parse_csv(&emit_csv(&records)).unwrap(), records);
    }

    #[test]
    fn idx_round_trip(pixels in prop::collection::vec(0u8..=255, 1..6 * 12), seed in any::<u64>()) {
        let rows = 3;
        let cols = 4;
        let count = pixels.len() / (rows * cols);
        prop_assume!(count > 0);
        let inputs: Vec<f64> = pixels[..count * rows * cols].iter().map(|&b| f64::from(b) / 255.0).collect();
        let labels: Vec<usize> = (0..count).map(|i| ((seed as usize) + i) % 10).collect();
        let data = Dataset::new(inputs, labels, rows * cols, 10).unwrap();
        let (img, lab) = to_idx_bytes(&data, rows, cols).unwrap();
        let (n, dim, raw) = parse_idx_images(&img, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!((n, dim), (count, rows * cols));
        prop_assert_eq!(&raw[..], &pixels[..count * rows * cols]);
        let back: Vec<usize> = parse_idx_labels(&lab, std::path::Path::new("mem")).unwrap().into_iter().map(usize::from).collect();
        prop_assert_eq!(back, data.labels().to_vec());
    }
}
