//! Mask generation for weight, neuron and fixed sub-network pruning.
//!
//! Every family ranks the maskable parameters into units (single weights for
//! WP, whole neurons for NP and FS), splits the ranking into four quartile
//! segments `S1..S4` (S1 ranked highest) and keeps the segments named by the
//! client's policy. Indices outside the maskable set are always kept.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerLayout, ParamVector};

pub use crate::mask::Mask;

/// Pruning family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Weight pruning: individual weights ranked by magnitude.
    Wp,
    /// Neuron pruning: hidden neurons ranked by the L1 norm of their incoming weights.
    Np,
    /// Fixed sub-network: neurons kept as a contiguous prefix in index order.
    Fs,
}

impl Family {
    pub fn as_str(&self) -> &'static str {
        match self {
            Family::Wp => "wp",
            Family::Np => "np",
            Family::Fs => "fs",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.as_str().to_uppercase())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wp" => Ok(Family::Wp),
            "np" => Ok(Family::Np),
            "fs" => Ok(Family::Fs),
            other => Err(Error::Config(format!("unknown pruning family {other:?}"))),
        }
    }
}

/// Parameter indices that pruning may remove, in ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskableSet {
    indices: Vec<usize>,
    total: usize,
}

impl MaskableSet {
    pub fn new(mut indices: Vec<usize>, total: usize) -> Result<Self> {
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Maskable("duplicate index".into()));
        }
        if indices.last().is_some_and(|&i| i >= total) {
            return Err(Error::Maskable(format!(
                "index out of range for {total} parameters"
            )));
        }
        Ok(Self { indices, total })
    }

    /// Weight matrix of the first layer.
    pub fn first_layer_weights(layout: &LayerLayout) -> Self {
        Self {
            indices: layout.layers()[0].weights().collect(),
            total: layout.total_len(),
        }
    }

    /// Every parameter attached to a hidden neuron: incoming weights, bias and
    /// outgoing weights.
    pub fn hidden_neurons(layout: &LayerLayout) -> Result<Self> {
        if !layout.has_hidden_layer() {
            return Err(Error::NoHiddenLayer);
        }
        let mut indices: Vec<usize> = neuron_units(layout).into_iter().flatten().collect();
        indices.sort_unstable();
        indices.dedup();
        Ok(Self {
            indices,
            total: layout.total_len(),
        })
    }

    /// The maskable set each family prunes by default.
    pub fn default_for(layout: &LayerLayout, family: Family) -> Result<Self> {
        match family {
            Family::Wp => Ok(Self::first_layer_weights(layout)),
            Family::Np => Self::hidden_neurons(layout),
            Family::Fs if layout.has_hidden_layer() => Self::hidden_neurons(layout),
            Family::Fs => Ok(Self::first_layer_weights(layout)),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    fn membership(&self) -> Vec<bool> {
        let mut member = vec![false; self.total];
        for &i in &self.indices {
            member[i] = true;
        }
        member
    }
}

/// Parameter groups of each hidden neuron, in network order.
fn neuron_units(layout: &LayerLayout) -> Vec<Vec<usize>> {
    let layers = layout.layers();
    let mut units = Vec::new();
    for h in 0..layers.len().saturating_sub(1) {
        let (incoming, outgoing) = (layers[h], layers[h + 1]);
        for j in 0..incoming.fan_out {
            let mut unit: Vec<usize> = (0..incoming.fan_in)
                .map(|i| incoming.weight_index(j, i))
                .collect();
            unit.push(incoming.bias_start + j);
            unit.extend((0..outgoing.fan_out).map(|k| outgoing.weight_index(k, j)));
            units.push(unit);
        }
    }
    units
}

/// Ranked pruning units, highest priority first. Each unit is a group of
/// parameter indices that is kept or removed as a whole.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ranking {
    units: Vec<Vec<usize>>,
}

impl Ranking {
    pub fn units(&self) -> &[Vec<usize>] {
        &self.units
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Parameter indices in rank order.
    pub fn flatten(&self) -> Vec<usize> {
        self.units.iter().flatten().copied().collect()
    }
}

/// Orders the maskable parameters for the given family.
///
/// WP sorts single weights by `|θ|` descending. NP sorts hidden neurons by
/// the L1 norm of their incoming weights, descending. FS keeps neurons in
/// index order (single maskable indices when there is no hidden layer).
/// Ties fall back to ascending index. Neuron units are restricted to the
/// maskable set; neurons with no maskable parameter are dropped.
pub fn rank_maskable(
    params: &ParamVector,
    maskable: &MaskableSet,
    family: Family,
) -> Result<Ranking> {
    let layout = params.layout();
    if maskable.total() != params.len() {
        return Err(Error::Length {
            expected: params.len(),
            actual: maskable.total(),
        });
    }
    if maskable.is_empty() {
        return Err(Error::Maskable("empty maskable set".into()));
    }
    let theta = params.values();
    let units = match family {
        Family::Wp => {
            let mut order = maskable.indices().to_vec();
            order.sort_by(|&a, &b| theta[b].abs().total_cmp(&theta[a].abs()).then(a.cmp(&b)));
            order.into_iter().map(|i| vec![i]).collect()
        }
        Family::Np => {
            if !layout.has_hidden_layer() {
                return Err(Error::NoHiddenLayer);
            }
            let fan_ins = hidden_fan_ins(layout);
            let member = maskable.membership();
            let mut scored: Vec<(f64, Vec<usize>)> = neuron_units(layout)
                .into_iter()
                .zip(fan_ins)
                .map(|(unit, fan_in)| {
                    let score = unit[..fan_in].iter().map(|&i| theta[i].abs()).sum();
                    (
                        score,
                        unit.into_iter().filter(|&i| member[i]).collect::<Vec<_>>(),
                    )
                })
                .filter(|(_, unit)| !unit.is_empty())
                .collect();
            // Stable sort keeps network order among equal scores.
            scored.sort_by(|a, b| b.0.total_cmp(&a.0));
            scored.into_iter().map(|(_, unit)| unit).collect()
        }
        Family::Fs => {
            if layout.has_hidden_layer() {
                let member = maskable.membership();
                neuron_units(layout)
                    .into_iter()
                    .map(|unit| unit.into_iter().filter(|&i| member[i]).collect::<Vec<_>>())
                    .filter(|unit| !unit.is_empty())
                    .collect()
            } else {
                maskable.indices().iter().map(|&i| vec![i]).collect()
            }
        }
    };
    Ok(Ranking { units })
}

fn hidden_fan_ins(layout: &LayerLayout) -> Vec<usize> {
    let layers = layout.layers();
    layers[..layers.len() - 1]
        .iter()
        .flat_map(|l| std::iter::repeat_n(l.fan_in, l.fan_out))
        .collect()
}

/// Unit ranges of the four quartiles; earlier segments take the remainder.
pub fn segment_bounds(len: usize) -> [Range<usize>; 4] {
    let base = len / 4;
    let extra = len % 4;
    let mut start = 0;
    std::array::from_fn(|k| {
        let size = base + usize::from(k < extra);
        let range = start..start + size;
        start += size;
        range
    })
}

/// Quartile segments `S1..S4` as parameter index sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    pub sets: [Vec<usize>; 4],
}

pub fn quartile_segments(ranking: &Ranking) -> Result<Segments> {
    if ranking.len() < 4 {
        return Err(Error::RankingTooShort(ranking.len()));
    }
    let bounds = segment_bounds(ranking.len());
    Ok(Segments {
        sets: bounds.map(|r| ranking.units[r].iter().flatten().copied().collect()),
    })
}

/// Subset of the quartile segments `S1..S4`, stored as a bit set.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct SegmentSet(u8);

impl SegmentSet {
    pub const ALL: SegmentSet = SegmentSet(0b1111);
    pub const EMPTY: SegmentSet = SegmentSet(0);

    /// Builds a set from 1-based segment numbers.
    pub fn of(segments: &[usize]) -> Self {
        let mut bits = 0u8;
        for &s in segments {
            assert!((1..=4).contains(&s), "segment S{s} does not exist");
            bits |= 1 << (s - 1);
        }
        SegmentSet(bits)
    }

    /// Whether 1-based segment `s` is kept.
    pub fn contains(&self, s: usize) -> bool {
        (1..=4).contains(&s) && self.0 & (1 << (s - 1)) != 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn is_superset(&self, other: &SegmentSet) -> bool {
        self.0 & other.0 == other.0
    }

    /// The first `k` segments, `{S1..Sk}`.
    pub fn prefix(k: usize) -> Self {
        SegmentSet(((1u16 << k.min(4)) - 1) as u8)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (1..=4).filter(|&s| self.contains(s))
    }
}

impl fmt::Debug for SegmentSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.iter().map(|s| format!("S{s}")).collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

/// A client's mask rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PruningPolicy {
    pub family: Family,
    pub kept: SegmentSet,
    /// When set, the mask generated in this round is reused for all later rounds.
    pub freeze_after_round: Option<u32>,
}

impl PruningPolicy {
    pub fn full(family: Family) -> Self {
        Self {
            family,
            kept: SegmentSet::ALL,
            freeze_after_round: None,
        }
    }

    /// Segments actually retained. FS keeps a contiguous prefix of the same
    /// size, since a fixed sub-network is always the leading block of neurons.
    pub fn effective_segments(&self) -> SegmentSet {
        match self.family {
            Family::Fs => SegmentSet::prefix(self.kept.len()),
            Family::Wp | Family::Np => self.kept,
        }
    }

    pub fn is_frozen_at(&self, round: u32) -> bool {
        self.freeze_after_round.is_some_and(|f| round > f)
    }
}

/// Builds the mask for `policy` from the current global parameters.
///
/// `round` is 1-based. Once `round` exceeds `freeze_after_round`, the
/// previously captured `frozen` mask is returned unchanged.
pub fn generate_mask(
    policy: &PruningPolicy,
    params: &ParamVector,
    maskable: &MaskableSet,
    round: u32,
    frozen: Option<&Mask>,
) -> Result<Mask> {
    if policy.kept.is_empty() {
        return Err(Error::EmptyPolicy);
    }
    if let Some(frozen) = frozen.filter(|_| policy.is_frozen_at(round)) {
        frozen.check_len(params.len())?;
        return Ok(frozen.clone());
    }
    if policy.kept == SegmentSet::ALL {
        return Ok(Mask::ones(params.len()));
    }
    let ranking = rank_maskable(params, maskable, policy.family)?;
    if ranking.len() < 4 {
        return Err(Error::RankingTooShort(ranking.len()));
    }
    let kept = policy.effective_segments();
    let mut bits = vec![true; params.len()];
    for (k, range) in segment_bounds(ranking.len()).into_iter().enumerate() {
        if kept.contains(k + 1) {
            continue;
        }
        for unit in &ranking.units[range] {
            for &i in unit {
                bits[i] = false;
            }
        }
    }
    Ok(Mask::from_bits(bits))
}

/// `θ ⊙ m`, with masked-out coordinates set to exactly `+0.0`.
pub fn apply_mask(params: &ParamVector, mask: &Mask) -> Result<ParamVector> {
    mask.check_len(params.len())?;
    let values = params
        .values()
        .iter()
        .zip(mask.bits())
        .map(|(&v, &keep)| if keep { v } else { 0.0 })
        .collect();
    ParamVector::from_values(std::sync::Arc::clone(params.layout()), values)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruningNoise {
    /// `‖θ − θ⊙m‖² / ‖θ‖²`.
    pub delta_sq: f64,
    /// Set when `‖θ‖ = 0`; `delta_sq` is then reported as 0.
    pub zero_norm: bool,
}

/// Relative energy removed by `mask`.
pub fn pruning_noise(params: &ParamVector, mask: &Mask) -> Result<PruningNoise> {
    mask.check_len(params.len())?;
    let mut total = 0.0;
    let mut removed = 0.0;
    for (&v, &keep) in params.values().iter().zip(mask.bits()) {
        let sq = v * v;
        total += sq;
        if !keep {
            removed += sq;
        }
    }
    if total == 0.0 {
        return Ok(PruningNoise {
            delta_sq: 0.0,
            zero_norm: true,
        });
    }
    Ok(PruningNoise {
        delta_sq: removed / total,
        zero_norm: false,
    })
}

/// Segments selected by a codename digit.
pub fn digit_segments(digit: char) -> Option<SegmentSet> {
    let segments: &[usize] = match digit {
        '1' => &[1, 2, 3, 4],
        '2' => &[1, 3, 4],
        '3' => &[1, 2, 4],
        '4' => &[1, 2, 3],
        '5' => &[1, 2],
        '6' => &[1, 3],
        '7' => &[1, 4],
        _ => return None,
    };
    Some(SegmentSet::of(segments))
}

/// Per-slot segment choices parsed from a codename such as `"1111223344"`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyAssignment {
    pub codename: String,
    pub slots: Vec<SegmentSet>,
}

impl PolicyAssignment {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn policies(&self, family: Family, freeze_after_round: Option<u32>) -> Vec<PruningPolicy> {
        self.slots
            .iter()
            .map(|&kept| PruningPolicy {
                family,
                kept,
                freeze_after_round,
            })
            .collect()
    }
}

pub fn parse_codename(codename: &str) -> Result<PolicyAssignment> {
    let invalid = |reason: String| Error::Codename {
        codename: codename.to_string(),
        reason,
    };
    if codename.is_empty() {
        return Err(invalid("empty codename".into()));
    }
    let slots = codename
        .chars()
        .map(|c| {
            digit_segments(c).ok_or_else(|| invalid(format!("{c:?} is not a policy digit 1-7")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PolicyAssignment {
        codename: codename.to_string(),
        slots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn params(sizes: &[usize], values: Vec<f64>) -> ParamVector {
        ParamVector::from_values(Arc::new(LayerLayout::new(sizes.to_vec()).unwrap()), values)
            .unwrap()
    }

    #[test]
    fn wp_orders_by_magnitude() {
        let p = params(&[3, 1], vec![0.1, 0.9, 0.5, 0.7]);
        let all = MaskableSet::new(vec![0, 1, 2, 3], 4).unwrap();
        let r = rank_maskable(&p, &all, Family::Wp).unwrap();
        assert_eq!(r.flatten(), vec![1, 3, 2, 0]);

        let ties = params(&[3, 1], vec![-0.5, 0.5, 0.2, -0.5]);
        assert_eq!(
            rank_maskable(&ties, &all, Family::Wp).unwrap().flatten(),
            vec![0, 1, 3, 2]
        );
    }

    #[test]
    fn fs_is_identity_order() {
        let p = params(&[3, 1], vec![0.1, 0.9, 0.5, 0.7]);
        let all = MaskableSet::new(vec![0, 1, 2, 3], 4).unwrap();
        assert_eq!(
            rank_maskable(&p, &all, Family::Fs).unwrap().flatten(),
            vec![0, 1, 2, 3]
        );

        // With a hidden layer the units are neurons in index order.
        let p = params(&[2, 4, 1], (0..17).map(|i| -(i as f64)).collect());
        let set = MaskableSet::default_for(p.layout(), Family::Fs).unwrap();
        let r = rank_maskable(&p, &set, Family::Fs).unwrap();
        assert_eq!(r.len(), 4);
        assert_eq!(r.units()[0], vec![0, 1, 8, 12]);
        assert_eq!(r.units()[3], vec![6, 7, 11, 15]);
    }

    #[test]
    fn np_ranks_neurons_by_incoming_l1() {
        // [2,2,1]: W1 rows (1,1) and (3,-3), b1, W2 (1 x 2), b2.
        let p = params(
            &[2, 2, 1],
            vec![1.0, 1.0, 3.0, -3.0, 0.0, 0.0, 0.5, 0.5, 0.0],
        );
        let set = MaskableSet::hidden_neurons(p.layout()).unwrap();
        let r = rank_maskable(&p, &set, Family::Np).unwrap();
        assert_eq!(r.units(), &[vec![2, 3, 5, 7], vec![0, 1, 4, 6]]);

        let flat = params(&[2, 1], vec![1.0, 1.0, 0.0]);
        let set = MaskableSet::new(vec![0, 1], 3).unwrap();
        assert!(matches!(
            rank_maskable(&flat, &set, Family::Np),
            Err(Error::NoHiddenLayer)
        ));
    }

    #[test]
    fn quartile_sizes() {
        let p = params(&[7, 1], (0..8).map(|i| 8.0 - i as f64).collect());
        let all = MaskableSet::new((0..8).collect(), 8).unwrap();
        let s = quartile_segments(&rank_maskable(&p, &all, Family::Wp).unwrap()).unwrap();
        assert_eq!(s.sets, [vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]]);

        let sizes: Vec<usize> = segment_bounds(6).iter().map(|r| r.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1, 1]);

        let short = MaskableSet::new(vec![0, 1, 2], 8).unwrap();
        let r = rank_maskable(&p, &short, Family::Wp).unwrap();
        assert!(matches!(
            quartile_segments(&r),
            Err(Error::RankingTooShort(3))
        ));
    }

    #[test]
    fn full_policy_keeps_everything() {
        let p = params(&[3, 1], vec![0.1, 0.9, 0.5, 0.7]);
        let set = MaskableSet::first_layer_weights(p.layout());
        for family in [Family::Wp, Family::Np, Family::Fs] {
            let m = generate_mask(&PruningPolicy::full(family), &p, &set, 1, None).unwrap();
            assert!(m.is_all_ones());
        }
        let empty = PruningPolicy {
            kept: SegmentSet::EMPTY,
            ..PruningPolicy::full(Family::Wp)
        };
        assert!(matches!(
            generate_mask(&empty, &p, &set, 1, None),
            Err(Error::EmptyPolicy)
        ));
    }

    #[test]
    fn wp_75_on_mnist_mlp() {
        let layout = Arc::new(LayerLayout::new(vec![784, 200, 10]).unwrap());
        let p = crate::nn::init_params(&layout, 5);
        let set = MaskableSet::first_layer_weights(&layout);
        let policy = PruningPolicy {
            family: Family::Wp,
            kept: SegmentSet::of(&[1, 2, 3]),
            freeze_after_round: None,
        };
        let m = generate_mask(&policy, &p, &set, 1, None).unwrap();
        let in_set = set.indices().iter().filter(|&&i| m.get(i)).count();
        assert_eq!(in_set, 117_600);
        assert_eq!(m.count_ones(), 119_810);
    }

    #[test]
    fn frozen_mask_is_reused() {
        let p = params(&[3, 1], vec![0.1, 0.9, 0.5, 0.7]);
        let set = MaskableSet::new(vec![0, 1, 2, 3], 4).unwrap();
        let policy = PruningPolicy {
            family: Family::Wp,
            kept: SegmentSet::of(&[1, 2, 3]),
            freeze_after_round: Some(3),
        };
        let frozen = Mask::from_bits(vec![false, true, true, true]);
        assert_eq!(
            generate_mask(&policy, &p, &set, 4, Some(&frozen)).unwrap(),
            frozen
        );
        // At or before the freeze round the mask is recomputed.
        let live = generate_mask(&policy, &p, &set, 3, Some(&frozen)).unwrap();
        assert_eq!(live.bits(), &[false, true, true, true]);
        let live = generate_mask(&policy, &p, &set, 2, Some(&Mask::ones(4))).unwrap();
        assert_eq!(live.bits(), &[false, true, true, true]);
    }

    #[test]
    fn apply_mask_cases() {
        let p = params(&[3, 1], vec![4.0, 3.0, 2.0, 1.0]);
        assert_eq!(apply_mask(&p, &Mask::ones(4)).unwrap(), p);
        let m = Mask::from_bits(vec![true, true, false, false]);
        assert_eq!(apply_mask(&p, &m).unwrap().values(), &[4.0, 3.0, 0.0, 0.0]);
        let neg = params(&[3, 1], vec![-4.0, -3.0, -2.0, -1.0]);
        let zeroed = apply_mask(&neg, &m).unwrap();
        assert_eq!(zeroed.values()[2].to_bits(), 0.0f64.to_bits());
        assert!(apply_mask(&p, &Mask::ones(3)).is_err());
    }

    #[test]
    fn noise_cases() {
        let p = params(&[3, 1], vec![4.0, 3.0, 2.0, 1.0]);
        assert_eq!(pruning_noise(&p, &Mask::ones(4)).unwrap().delta_sq, 0.0);
        let top2 = Mask::from_bits(vec![true, true, false, false]);
        assert!((pruning_noise(&p, &top2).unwrap().delta_sq - 1.0 / 6.0).abs() < 1e-15);
        let zero = params(&[3, 1], vec![0.0; 4]);
        let n = pruning_noise(&zero, &top2).unwrap();
        assert!(n.zero_norm);
        assert_eq!(n.delta_sq, 0.0);
    }

    #[test]
    fn codenames() {
        let a = parse_codename("1111111111").unwrap();
        assert_eq!(a.len(), 10);
        assert!(a.slots.iter().all(|&s| s == SegmentSet::ALL));

        let a = parse_codename("1111223344").unwrap();
        assert_eq!(a.slots[4], SegmentSet::of(&[1, 3, 4]));
        assert_eq!(a.slots[6], SegmentSet::of(&[1, 2, 4]));
        assert_eq!(a.slots[8], SegmentSet::of(&[1, 2, 3]));
        assert_eq!(
            parse_codename("567").unwrap().slots,
            vec![
                SegmentSet::of(&[1, 2]),
                SegmentSet::of(&[1, 3]),
                SegmentSet::of(&[1, 4]),
            ]
        );

        assert!(matches!(parse_codename(""), Err(Error::Codename { .. })));
        assert!(matches!(
            parse_codename("1118"),
            Err(Error::Codename { .. })
        ));
        assert!(matches!(
            parse_codename("11a1"),
            Err(Error::Codename { .. })
        ));
    }

    #[test]
    fn fs_keeps_contiguous_prefix() {
        let policy = PruningPolicy {
            family: Family::Fs,
            kept: SegmentSet::of(&[1, 4]),
            freeze_after_round: None,
        };
        assert_eq!(policy.effective_segments(), SegmentSet::of(&[1, 2]));
        let p = params(&[8, 1], (0..9).map(|i| i as f64).collect());
        let set = MaskableSet::first_layer_weights(p.layout());
        let m = generate_mask(&policy, &p, &set, 1, None).unwrap();
        assert_eq!(
            m.bits(),
            &[true, true, true, true, false, false, false, false, true]
        );
    }
}
