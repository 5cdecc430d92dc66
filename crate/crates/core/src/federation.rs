//! Round engine: sample clients, prune, train locally under masks, and
//! average each coverage region over the clients that trained it.

use std::collections::HashMap;
use std::str::FromStr;
use std::sync::Arc;

use log::warn;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{partition, test_portions, Dataset, PartitionMode, PartitionSpec};
use crate::error::{Error, Result};
use crate::metrics::{self, ModelAccount, RoundMetrics, WeightedClient};
use crate::nn::{
    self, init_params, loss_and_grad, masked_sgd_step, LayerLayout, OptimizerState, ParamVector,
};
use crate::pruning::{
    apply_mask, generate_mask, parse_codename, pruning_noise, Family, Mask, MaskableSet,
    PruningPolicy,
};

/// Pruning family as named in configuration. `pt` is weight pruning whose
/// masks are frozen after the first few rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyName {
    Wp,
    Np,
    Fs,
    Pt,
}

impl FamilyName {
    pub const PT_FREEZE_ROUND: u32 = 3;

    /// Concrete family and freeze round, with an explicit freeze round taking
    /// precedence.
    pub fn resolve(self, freeze_after_round: Option<u32>) -> (Family, Option<u32>) {
        match self {
            FamilyName::Wp => (Family::Wp, freeze_after_round),
            FamilyName::Np => (Family::Np, freeze_after_round),
            FamilyName::Fs => (Family::Fs, freeze_after_round),
            FamilyName::Pt => (
                Family::Wp,
                freeze_after_round.or(Some(Self::PT_FREEZE_ROUND)),
            ),
        }
    }
}

impl FromStr for FamilyName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wp" => Ok(Self::Wp),
            "np" => Ok(Self::Np),
            "fs" => Ok(Self::Fs),
            "pt" => Ok(Self::Pt),
            other => Err(Error::Config(format!("unknown pruning family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UncoveredAction {
    Error,
    #[default]
    Warn,
}

/// How codename digits map onto clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotBinding {
    /// Digit `k` governs the `k`-th client sampled in each round.
    #[default]
    Sampled,
    /// Digit `k` always governs client `k`; requires one digit per client.
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub participation_ratio: f64,
    pub rounds: u32,
    pub local_epochs: usize,
    pub local_batch: usize,
    /// Defaults to `1/√(T·Q)` when unset.
    pub learning_rate: Option<f64>,
    pub momentum: f64,
    pub codename: String,
    pub family: FamilyName,
    pub freeze_after_round: Option<u32>,
    pub seed: u64,
    /// Seed for the initial model; defaults to `seed`.
    pub init_seed: Option<u64>,
    pub partition: PartitionMode,
    pub classes_per_client: usize,
    pub uncovered_region_action: UncoveredAction,
    pub slot_binding: SlotBinding,
    pub hidden: Vec<usize>,
    pub test_batch: usize,
    pub track_grad_norm: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            num_clients: 100,
            participation_ratio: 0.1,
            rounds: 100,
            local_epochs: 5,
            local_batch: 10,
            learning_rate: None,
            momentum: 0.5,
            codename: "1111111111".into(),
            family: FamilyName::Wp,
            freeze_after_round: None,
            seed: 0,
            init_seed: None,
            partition: PartitionMode::Iid,
            classes_per_client: 2,
            uncovered_region_action: UncoveredAction::Warn,
            slot_binding: SlotBinding::Sampled,
            hidden: vec![200],
            test_batch: 128,
            track_grad_norm: true,
        }
    }
}

impl FederationConfig {
    /// `⌊c·N⌋`, with a small tolerance for ratios such as 0.1 that are not
    /// exact in binary.
    pub fn participants_per_round(&self) -> usize {
        (self.participation_ratio * self.num_clients as f64 + 1e-9).floor() as usize
    }

    pub fn effective_learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or_else(|| {
            1.0 / ((self.local_epochs as f64) * f64::from(self.rounds.max(1))).sqrt()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.participation_ratio > 0.0 && self.participation_ratio <= 1.0) {
            return bad(format!(
                "participation_ratio {} outside (0, 1]",
                self.participation_ratio
            ));
        }
        let k = self.participants_per_round();
        if k == 0 || k > self.num_clients {
            return bad(format!(
                "participation_ratio {} with {} clients selects {k} clients per round",
                self.participation_ratio, self.num_clients
            ));
        }
        let assignment = parse_codename(&self.codename)?;
        if assignment.len() != k {
            return bad(format!(
                "codename {:?} has {} digits but {k} clients participate per round",
                self.codename,
                assignment.len()
            ));
        }
        if self.slot_binding == SlotBinding::Static && self.num_clients != k {
            return bad("static slot binding needs every client to participate".into());
        }
        if self.local_epochs == 0 {
            return bad("local_epochs must be at least 1".into());
        }
        if self.local_batch == 0 || self.test_batch == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if self.freeze_after_round == Some(0) {
            return bad("freeze_after_round must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if let Some(lr) = self.learning_rate {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!(
                    "learning_rate {lr} must be finite and non-negative"
                ));
            }
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive".into());
        }
        Ok(())
    }

    pub fn policies(&self) -> Result<Vec<PruningPolicy>> {
        let (family, freeze) = self.family.resolve(self.freeze_after_round);
        Ok(parse_codename(&self.codename)?.policies(family, freeze))
    }
}

const SAMPLING_STREAM: u64 = 1 << 63;

/// RNG for the client draw of `round`.
pub fn round_rng(seed: u64, round: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SAMPLING_STREAM | u64::from(round));
    rng
}

/// RNG for the local training of `slot` in `round`; independent of every
/// other slot so slots can be trained in any order.
pub fn client_rng(seed: u64, round: u32, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((u64::from(round) << 32) | slot as u64);
    rng
}

/// Clients taking part in `round`; entry `k` fills codename slot `k`.
pub fn sample_participants(config: &FederationConfig, round: u32) -> Vec<usize> {
    let k = config.participants_per_round();
    match config.slot_binding {
        SlotBinding::Static => (0..k).collect(),
        SlotBinding::Sampled => {
            let mut rng = round_rng(config.seed, round);
            index::sample(&mut rng, config.num_clients, k).into_vec()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    /// Slots whose mask keeps every index of the region, ascending.
    pub signature: Vec<usize>,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionPartition {
    pub regions: Vec<Region>,
    pub len: usize,
}

/// Groups parameter indices by the exact set of slots that keep them.
/// Regions appear in order of their first index.
pub fn decompose_regions(masks: &[Mask]) -> Result<RegionPartition> {
    let len = masks.first().map_or(0, Mask::len);
    for m in masks {
        m.check_len(len)?;
    }
    let mut regions: Vec<Region> = Vec::new();
    let push = |regions: &mut Vec<Region>, i: usize| {
        let signature = (0..masks.len()).filter(|&s| masks[s].get(i)).collect();
        regions.push(Region {
            signature,
            indices: vec![i],
        });
        regions.len() - 1
    };
    if masks.len() <= 64 {
        let mut lookup: HashMap<u64, usize> = HashMap::new();
        let mut last: Option<(u64, usize)> = None;
        for i in 0..len {
            let key = masks.iter().enumerate().fold(
                0u64,
                |k, (slot, m)| if m.get(i) { k | 1 << slot } else { k },
            );
            let r = match last {
                Some((k, r)) if k == key => r,
                _ => match lookup.get(&key) {
                    Some(&r) => r,
                    None => {
                        let r = push(&mut regions, i);
                        lookup.insert(key, r);
                        last = Some((key, r));
                        continue;
                    }
                },
            };
            regions[r].indices.push(i);
            last = Some((key, r));
        }
    } else {
        let mut lookup: HashMap<Vec<bool>, usize> = HashMap::new();
        for i in 0..len {
            let key: Vec<bool> = masks.iter().map(|m| m.get(i)).collect();
            match lookup.get(&key) {
                Some(&r) => regions[r].indices.push(i),
                None => {
                    let r = push(&mut regions, i);
                    lookup.insert(key, r);
                }
            }
        }
    }
    Ok(RegionPartition { regions, len })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageReport {
    pub per_region_count: Vec<usize>,
    /// Smallest number of slots covering any region; 0 when some index is
    /// kept by nobody.
    pub gamma_min: usize,
    /// Parameters in the empty-signature region.
    pub uncovered: usize,
}

pub fn coverage_index(partition: &RegionPartition) -> CoverageReport {
    let per_region_count: Vec<usize> = partition
        .regions
        .iter()
        .map(|r| r.signature.len())
        .collect();
    let gamma_min = per_region_count.iter().copied().min().unwrap_or(0);
    let uncovered = partition
        .regions
        .iter()
        .filter(|r| r.signature.is_empty())
        .map(|r| r.indices.len())
        .sum();
    CoverageReport {
        per_region_count,
        gamma_min,
        uncovered,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

/// Trains `global ⊙ mask` on one client's shard for the configured epochs.
///
/// Each epoch visits the whole shard once in a freshly shuffled order, in
/// mini-batches of `batch_size`; every step is a masked SGD step with a
/// momentum buffer that starts at zero.
pub fn local_update(
    global: &ParamVector,
    mask: &Mask,
    data: &Dataset,
    shard: &[usize],
    training: &LocalTraining,
    rng: &mut ChaCha8Rng,
) -> Result<ParamVector> {
    if shard.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut params = apply_mask(global, mask)?;
    let mut opt = OptimizerState::new(params.len(), training.learning_rate, training.momentum)?;
    let mut order = shard.to_vec();
    for _ in 0..training.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(training.batch_size.max(1)) {
            let batch = data.batch(chunk);
            let (_, grad) = loss_and_grad(&params, &batch)?;
            masked_sgd_step(&mut params, &grad, mask, &mut opt)?;
        }
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("local training".into()));
    }
    Ok(params)
}

/// Result of one slot's local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalModel {
    pub slot: usize,
    pub params: ParamVector,
    pub mask: Mask,
}

/// Region-wise average of the local models.
///
/// Each index takes the mean over exactly the slots in its region's
/// signature, summed in ascending slot order regardless of the order of
/// `locals`. Indices nobody covered keep their value from `previous`.
pub fn aggregate(
    previous: &ParamVector,
    locals: &[LocalModel],
    partition: &RegionPartition,
) -> Result<ParamVector> {
    let len = previous.len();
    if partition.len != len {
        return Err(Error::Partitioning(format!(
            "partition spans {} indices, model has {len}",
            partition.len
        )));
    }
    let slots = locals.iter().map(|l| l.slot).max().map_or(0, |m| m + 1);
    let mut by_slot: Vec<Option<&LocalModel>> = vec![None; slots];
    for local in locals {
        if by_slot[local.slot].replace(local).is_some() {
            return Err(Error::Partitioning(format!(
                "slot {} appears twice",
                local.slot
            )));
        }
        if local.params.len() != len {
            return Err(Error::Length {
                expected: len,
                actual: local.params.len(),
            });
        }
        local.mask.check_len(len)?;
    }

    let mut out = previous.values().to_vec();
    let mut in_signature = vec![false; slots];
    let mut seen = vec![false; len];
    for region in &partition.regions {
        in_signature.iter_mut().for_each(|b| *b = false);
        for &s in &region.signature {
            if s >= slots || by_slot[s].is_none() {
                return Err(Error::Partitioning(format!(
                    "signature names missing slot {s}"
                )));
            }
            in_signature[s] = true;
        }
        for &i in &region.indices {
            if i >= len || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Partitioning(format!(
                    "index {i} is out of range or repeated"
                )));
            }
            for (s, local) in by_slot.iter().enumerate() {
                if let Some(local) = local {
                    if local.mask.get(i) != in_signature[s] {
                        return Err(Error::Partitioning(format!(
                            "mask of slot {s} disagrees with the region signature at index {i}"
                        )));
                    }
                }
            }
        }
        if region.signature.is_empty() {
            continue;
        }
        let count = region.signature.len() as f64;
        for &i in &region.indices {
            let mut sum = 0.0;
            for &s in &region.signature {
                sum += by_slot[s].expect("checked above").params.values()[i];
            }
            out[i] = sum / count;
        }
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::Partitioning(format!(
            "index {missing} belongs to no region"
        )));
    }
    ParamVector::from_values(Arc::clone(previous.layout()), out)
}

/// Server-side state between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    /// Number of completed rounds; the next round is `round + 1`.
    pub round: u32,
    pub params: ParamVector,
    /// Masks captured at the freeze round, per slot.
    pub frozen: Vec<Option<Mask>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub initial_params: ParamVector,
    pub final_params: ParamVector,
    pub metrics: Vec<RoundMetrics>,
}

impl RunOutput {
    /// Minimum coverage index over all rounds.
    pub fn gamma_min(&self) -> Option<usize> {
        self.metrics.iter().map(|m| m.gamma_min).min()
    }
}

/// A configured federation over fixed train and test data.
#[derive(Debug, Clone)]
pub struct Simulation {
    config: FederationConfig,
    layout: Arc<LayerLayout>,
    train: Dataset,
    test: Dataset,
    shards: Vec<Vec<usize>>,
    client_tests: Vec<Dataset>,
    policies: Vec<PruningPolicy>,
    maskable: MaskableSet,
    training: LocalTraining,
}

impl Simulation {
    pub fn new(config: FederationConfig, train: Dataset, test: Dataset) -> Result<Self> {
        config.validate()?;
        if train.dim() != test.dim() || train.num_classes() != test.num_classes() {
            return Err(Error::Shape("train and test sets disagree on shape".into()));
        }
        if test.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let layout = Arc::new(LayerLayout::mlp(
            train.dim(),
            &config.hidden,
            train.num_classes(),
        )?);
        let spec = PartitionSpec {
            mode: config.partition,
            num_clients: config.num_clients,
            classes_per_client: config.classes_per_client,
            seed: config.seed ^ 0x9e37_79b9_7f4a_7c15,
        };
        let shards = partition(train.labels(), train.num_classes(), &spec)?;
        let client_tests =
            test_portions(train.labels(), &shards, test.labels(), test.num_classes())
                .iter()
                .map(|p| test.subset(p))
                .collect();
        let policies = config.policies()?;
        let family = policies[0].family;
        let maskable = MaskableSet::default_for(&layout, family)?;
        let training = LocalTraining {
            epochs: config.local_epochs,
            batch_size: config.local_batch,
            learning_rate: config.effective_learning_rate(),
            momentum: config.momentum,
        };
        Ok(Self {
            config,
            layout,
            train,
            test,
            shards,
            client_tests,
            policies,
            maskable,
            training,
        })
    }

    /// Replaces the default maskable set of the family.
    pub fn with_maskable(mut self, maskable: MaskableSet) -> Result<Self> {
        if maskable.total() != self.layout.total_len() {
            return Err(Error::Length {
                expected: self.layout.total_len(),
                actual: maskable.total(),
            });
        }
        self.maskable = maskable;
        Ok(self)
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    pub fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    pub fn shards(&self) -> &[Vec<usize>] {
        &self.shards
    }

    pub fn train(&self) -> &Dataset {
        &self.train
    }

    pub fn test(&self) -> &Dataset {
        &self.test
    }

    pub fn training(&self) -> &LocalTraining {
        &self.training
    }

    pub fn policies(&self) -> &[PruningPolicy] {
        &self.policies
    }

    pub fn maskable(&self) -> &MaskableSet {
        &self.maskable
    }

    pub fn initial_state(&self) -> GlobalState {
        let seed = self.config.init_seed.unwrap_or(self.config.seed);
        GlobalState {
            round: 0,
            params: init_params(&self.layout, seed),
            frozen: vec![None; self.policies.len()],
        }
    }

    /// Masks every slot uses in the next round, capturing frozen masks.
    pub fn round_masks(&self, state: &mut GlobalState) -> Result<Vec<Mask>> {
        let round = state.round + 1;
        self.policies
            .iter()
            .enumerate()
            .map(|(slot, policy)| {
                let mask = generate_mask(
                    policy,
                    &state.params,
                    &self.maskable,
                    round,
                    state.frozen[slot].as_ref(),
                )?;
                if policy.freeze_after_round == Some(round) {
                    state.frozen[slot] = Some(mask.clone());
                }
                Ok(mask)
            })
            .collect()
    }

    /// Runs one round and advances `state` to `θ_{q+1}`.
    pub fn run_round(&self, state: &mut GlobalState) -> Result<RoundMetrics> {
        let round = state.round + 1;
        let participants = sample_participants(&self.config, round);
        let masks = self.round_masks(state)?;

        let partition = decompose_regions(&masks)?;
        let coverage = coverage_index(&partition);
        if coverage.uncovered > 0 {
            match self.config.uncovered_region_action {
                UncoveredAction::Error => {
                    return Err(Error::Coverage {
                        round,
                        uncovered: coverage.uncovered,
                    })
                }
                UncoveredAction::Warn => warn!(
                    "round {round}: {} parameters are covered by no client and keep their previous value",
                    coverage.uncovered
                ),
            }
        }

        let locals = participants
            .iter()
            .zip(&masks)
            .enumerate()
            .map(|(slot, (&client, mask))| {
                let mut rng = client_rng(self.config.seed, round, slot);
                let params = local_update(
                    &state.params,
                    mask,
                    &self.train,
                    &self.shards[client],
                    &self.training,
                    &mut rng,
                )?;
                Ok(LocalModel {
                    slot,
                    params,
                    mask: mask.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let next = aggregate(&state.params, &locals, &partition)?;
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("aggregation in round {round}")));
        }

        let global = nn::evaluate_unmasked(&next, &self.test, self.config.test_batch)?;
        let local_accuracy = self.local_accuracy(&next, &participants, &masks)?;

        let delta_sq = masks
            .iter()
            .map(|m| pruning_noise(&state.params, m).map(|n| n.delta_sq))
            .collect::<Result<Vec<_>>>()?;
        let accounts: Vec<ModelAccount> = masks
            .iter()
            .map(|m| metrics::account(&self.layout, m))
            .collect::<Result<_>>()?;
        let amortized = metrics::amortized(&accounts, &metrics::account_full(&self.layout))?;
        let grad_norm_sq = if self.config.track_grad_norm {
            Some(metrics::grad_norm_estimate(
                &next,
                &self.test,
                self.config.test_batch,
            )?)
        } else {
            None
        };

        state.params = next;
        state.round = round;
        Ok(RoundMetrics {
            round,
            global_loss: global.loss,
            global_accuracy: global.accuracy,
            local_weighted_accuracy: local_accuracy,
            gamma_min: coverage.gamma_min,
            uncovered: coverage.uncovered,
            participants,
            delta_sq,
            mask_sparsity: masks.iter().map(Mask::sparsity).collect(),
            grad_norm_sq,
            amortized_params: amortized.params,
            amortized_flops: amortized.flops,
        })
    }

    /// Uniform weights over the participants that have test samples.
    fn local_accuracy(
        &self,
        params: &ParamVector,
        participants: &[usize],
        masks: &[Mask],
    ) -> Result<f64> {
        let scored: Vec<(usize, ParamVector)> = participants
            .iter()
            .zip(masks)
            .filter(|(&client, _)| !self.client_tests[client].is_empty())
            .map(|(&client, m)| Ok((client, apply_mask(params, m)?)))
            .collect::<Result<_>>()?;
        if scored.is_empty() {
            return Ok(f64::NAN);
        }
        let weight = 1.0 / scored.len() as f64;
        let clients: Vec<WeightedClient<'_>> = scored
            .iter()
            .map(|(client, params)| WeightedClient {
                weight,
                params,
                data: &self.client_tests[*client],
            })
            .collect();
        metrics::weighted_accuracy(&clients, self.config.test_batch)
    }

    pub fn run(&self) -> Result<RunOutput> {
        self.run_with(|_| Ok(()))
    }

    /// Runs every round, handing each round's metrics to `sink` as soon as
    /// the round completes.
    pub fn run_with<F>(&self, mut sink: F) -> Result<RunOutput>
    where
        F: FnMut(&RoundMetrics) -> Result<()>,
    {
        let mut state = self.initial_state();
        let initial_params = state.params.clone();
        let mut metrics = Vec::with_capacity(self.config.rounds as usize);
        for _ in 0..self.config.rounds {
            let m = self.run_round(&mut state)?;
            sink(&m)?;
            metrics.push(m);
        }
        Ok(RunOutput {
            initial_params,
            final_params: state.params,
            metrics,
        })
    }
}
