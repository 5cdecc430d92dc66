//! Parameter and FLOP accounting, accuracy, convergence-bound calculators and
//! the per-round metrics stream.

use std::fmt::Write as _;
use std::io::Write;
use std::sync::Arc;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::federation::{coverage_index, decompose_regions};
use crate::nn::{dataset_loss_and_grad, evaluate_unmasked, LayerLayout, ParamVector};
use crate::pruning::{generate_mask, parse_codename, Family, Mask, MaskableSet, PruningPolicy};

/// Retained parameters and multiply-accumulates of one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelAccount {
    pub params: u64,
    pub flops: u64,
}

/// Parameters are retained entries; FLOPs are retained weight entries only.
pub fn account(layout: &LayerLayout, mask: &Mask) -> Result<ModelAccount> {
    mask.check_len(layout.total_len())?;
    let bits = mask.bits();
    let params = mask.count_ones() as u64;
    let flops = layout
        .layers()
        .iter()
        .map(|l| bits[l.weights()].iter().filter(|&&b| b).count() as u64)
        .sum();
    Ok(ModelAccount { params, flops })
}

pub fn account_full(layout: &LayerLayout) -> ModelAccount {
    ModelAccount {
        params: layout.total_len() as u64,
        flops: layout.weight_count() as u64,
    }
}

/// Mask of `policy` on an all-zero model with the family's default maskable
/// set. Counts do not depend on the parameter values.
pub fn policy_mask(layout: &Arc<LayerLayout>, policy: &PruningPolicy) -> Result<Mask> {
    let maskable = MaskableSet::default_for(layout, policy.family)?;
    generate_mask(
        policy,
        &ParamVector::zeros(Arc::clone(layout)),
        &maskable,
        1,
        None,
    )
}

pub fn account_policy(layout: &Arc<LayerLayout>, policy: &PruningPolicy) -> Result<ModelAccount> {
    account(layout, &policy_mask(layout, policy)?)
}

/// Mean account over slots, with ratios to the full model truncated to two
/// decimals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Amortized {
    pub params: f64,
    pub flops: f64,
    pub params_ratio: f64,
    pub flops_ratio: f64,
}

pub fn amortized(accounts: &[ModelAccount], full: &ModelAccount) -> Result<Amortized> {
    if accounts.is_empty() {
        return Err(Error::Metrics("no slots to amortize over".into()));
    }
    let n = accounts.len() as u64;
    let params: u64 = accounts.iter().map(|a| a.params).sum();
    let flops: u64 = accounts.iter().map(|a| a.flops).sum();
    let ratio = |sum: u64, whole: u64| {
        if whole == 0 {
            0.0
        } else {
            ((100 * sum) / (n * whole)) as f64 / 100.0
        }
    };
    Ok(Amortized {
        params: params as f64 / n as f64,
        flops: flops as f64 / n as f64,
        params_ratio: ratio(params, full.params),
        flops_ratio: ratio(flops, full.flops),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodenameAccount {
    pub per_slot: Vec<ModelAccount>,
    pub amortized: Amortized,
    pub gamma_min: usize,
}

/// Masks already built for a layout, keyed by policy.
#[derive(Debug, Clone, Default)]
pub struct MaskCache {
    entries: Vec<(PruningPolicy, Mask)>,
}

/// Accounting and coverage for one round of `codename` under `family`.
pub fn account_codename(
    layout: &Arc<LayerLayout>,
    codename: &str,
    family: Family,
) -> Result<CodenameAccount> {
    account_codename_cached(layout, codename, family, &mut MaskCache::default())
}

/// As [`account_codename`], reusing masks across calls on one layout.
pub fn account_codename_cached(
    layout: &Arc<LayerLayout>,
    codename: &str,
    family: Family,
    cache: &mut MaskCache,
) -> Result<CodenameAccount> {
    let policies = parse_codename(codename)?.policies(family, None);
    let cache = &mut cache.entries;
    let mut masks = Vec::with_capacity(policies.len());
    for p in &policies {
        let mask = match cache.iter().find(|(q, _)| q == p) {
            Some((_, m)) => m.clone(),
            None => {
                let m = policy_mask(layout, p)?;
                cache.push((*p, m.clone()));
                m
            }
        };
        masks.push(mask);
    }
    let per_slot = masks
        .iter()
        .map(|m| account(layout, m))
        .collect::<Result<Vec<_>>>()?;
    let amortized = amortized(&per_slot, &account_full(layout))?;
    let gamma_min = coverage_index(&decompose_regions(&masks)?).gamma_min;
    Ok(CodenameAccount {
        per_slot,
        amortized,
        gamma_min,
    })
}

/// A published accounting row for the 784-200-10 MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TableRow {
    pub family: Family,
    pub codename: &'static str,
    pub params: u64,
    pub flops: u64,
    /// `None` where the published coverage index disagrees with the digit
    /// mapping.
    pub gamma_min: Option<usize>,
}

const fn row(
    family: Family,
    codename: &'static str,
    params: u64,
    flops: u64,
    gamma_min: Option<usize>,
) -> TableRow {
    TableRow {
        family,
        codename,
        params,
        flops,
        gamma_min,
    }
}

use Family::{Fs, Np, Wp};

/// Self-consistent published rows. Excluded entirely: WP "1444777777",
/// whose counts repeat the "1455666777" row. Coverage omitted: WP and NP
/// "1111144447", "1111444477", "1455666777", NP "1444777777", FS
/// "1111144447".
pub const TABLE_ROWS: &[TableRow] = &[
    row(Wp, "1111111111", 159010, 158800, Some(10)),
    row(Wp, "1111114444", 143330, 143120, Some(6)),
    row(Wp, "1111144447", 135490, 135280, None),
    row(Wp, "1111223344", 135490, 135280, Some(8)),
    row(Wp, "1111234444", 135490, 135280, Some(6)),
    row(Wp, "1111234567", 123730, 123520, Some(7)),
    row(Wp, "1111444444", 135490, 135280, Some(4)),
    row(Wp, "1111444477", 127650, 127440, None),
    row(Wp, "1111556677", 111970, 111760, Some(6)),
    row(Wp, "1114556677", 108050, 107840, Some(5)),
    row(Wp, "1234556677", 100210, 100000, Some(5)),
    row(Wp, "1455666777", 92370, 92160, None),
    row(Wp, "2233445677", 104130, 103920, Some(5)),
    row(Np, "1111111111", 159010, 158800, Some(10)),
    row(Np, "1111114444", 143110, 142920, Some(6)),
    row(Np, "1111144447", 135160, 134980, None),
    row(Np, "1111223344", 135160, 134980, Some(8)),
    row(Np, "1111234444", 135160, 134980, Some(6)),
    row(Np, "1111234567", 123235, 123070, Some(7)),
    row(Np, "1111444444", 135160, 134980, Some(4)),
    row(Np, "1111444477", 127210, 127040, None),
    row(Np, "1111556677", 111310, 111160, Some(6)),
    row(Np, "1114556677", 107335, 107190, Some(5)),
    row(Np, "1234556677", 99385, 99250, Some(5)),
    row(Np, "1455666777", 91435, 91310, None),
    row(Np, "2233445677", 103360, 103220, Some(5)),
    row(Np, "1444777777", 99385, 99250, None),
    row(Fs, "1111111111", 159010, 158800, Some(10)),
    row(Fs, "1111114444", 143110, 142920, Some(6)),
    row(Fs, "1111144447", 135160, 134980, None),
    row(Fs, "1111444444", 135160, 134980, Some(4)),
    row(Fs, "1111444477", 127210, 127040, Some(4)),
    row(Fs, "1111444777", 123235, 123070, Some(4)),
    row(Fs, "1111777777", 111310, 111160, Some(4)),
    row(Fs, "1114777777", 107335, 107190, Some(3)),
    row(Fs, "1444777777", 99385, 99250, Some(1)),
    row(Fs, "1477777777", 91435, 91310, Some(1)),
];

/// The MLP the table rows describe.
pub fn table_layout() -> Arc<LayerLayout> {
    Arc::new(LayerLayout::mlp(784, &[200], 10).expect("static layout"))
}

/// Describes every cell of `row` that `computed` fails to reproduce.
pub fn table_mismatches(row: &TableRow, computed: &CodenameAccount) -> Vec<String> {
    let mut out = Vec::new();
    if computed.amortized.params != row.params as f64 {
        out.push(format!(
            "PARAs {} != {}",
            computed.amortized.params, row.params
        ));
    }
    if computed.amortized.flops != row.flops as f64 {
        out.push(format!(
            "FLOPs {} != {}",
            computed.amortized.flops, row.flops
        ));
    }
    if let Some(g) = row.gamma_min {
        if computed.gamma_min != g {
            out.push(format!("gamma_min {} != {g}", computed.gamma_min));
        }
    }
    out
}

/// One client in a weighted accuracy: already-masked parameters and the
/// client's test portion.
#[derive(Debug, Clone, Copy)]
pub struct WeightedClient<'a> {
    pub weight: f64,
    pub params: &'a ParamVector,
    pub data: &'a Dataset,
}

/// `Σ_i p_i · Acc_i` with each client's masked model scored on its own
/// test portion.
pub fn weighted_accuracy(clients: &[WeightedClient<'_>], batch_size: usize) -> Result<f64> {
    let total: f64 = clients.iter().map(|c| c.weight).sum();
    if (total - 1.0).abs() > 1e-9 || clients.iter().any(|c| c.weight < 0.0) {
        return Err(Error::Weights(total));
    }
    let mut acc = 0.0;
    for c in clients {
        acc += c.weight * evaluate_unmasked(c.params, c.data, batch_size)?.accuracy;
    }
    Ok(acc)
}

/// `‖∇F(θ)‖²` of the mean loss over `data`.
pub fn grad_norm_estimate(params: &ParamVector, data: &Dataset, chunk: usize) -> Result<f64> {
    let (_, grad) = dataset_loss_and_grad(params, data, chunk)?;
    Ok(grad.iter().map(|g| g * g).sum())
}

/// Inputs to the convergence-bound calculators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryConstants {
    pub l: f64,
    pub g: f64,
    pub sigma_sq: f64,
    /// Number of regions.
    pub k: f64,
    pub n: f64,
    pub t: f64,
    pub q: f64,
    pub gamma_star: f64,
    pub delta_sq: f64,
    /// `(1/Q) Σ_q E‖θ_q‖²`.
    pub avg_theta_norm_sq: f64,
    /// `E[F(θ_0)]`.
    pub f0: f64,
}

/// Which form of the bounds to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundReading {
    /// Middle term over `Q`, noise factor `δ²` outside `I_0`.
    #[default]
    OverQ,
    /// Middle term over `√Q`, `δ²` folded into `I_0`.
    OverSqrtQ,
}

impl TheoryConstants {
    fn validate(&self) -> Result<()> {
        let fields = [
            self.l,
            self.g,
            self.sigma_sq,
            self.k,
            self.n,
            self.t,
            self.q,
            self.gamma_star,
            self.delta_sq,
            self.avg_theta_norm_sq,
            self.f0,
        ];
        if fields.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Theory(
                "constants must be finite and non-negative".into(),
            ));
        }
        if self.gamma_star == 0.0 {
            return Err(Error::Theory("gamma_star must be positive".into()));
        }
        if self.t == 0.0 || self.q == 0.0 {
            return Err(Error::Theory("T and Q must be positive".into()));
        }
        if self.delta_sq >= 1.0 {
            return Err(Error::Theory("delta_sq must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Right-hand side of the IID convergence bound.
pub fn iid_bound(c: &TheoryConstants, reading: BoundReading) -> Result<f64> {
    c.validate()?;
    let g0 = 4.0 * c.f0 + 6.0 * c.l * c.n * c.sigma_sq / (c.gamma_star * c.gamma_star);
    let v0 = 3.0 * c.l * c.l * c.n * c.g / c.gamma_star;
    let i0 = 3.0 * c.l * c.l * c.n;
    let head = g0 / (c.t * c.q).sqrt();
    let noise = i0 / c.gamma_star * c.delta_sq * c.avg_theta_norm_sq;
    Ok(match reading {
        BoundReading::OverQ => head + v0 / c.q + noise,
        BoundReading::OverSqrtQ => head + v0 / c.q.sqrt() + noise,
    })
}

/// Right-hand side of the non-IID convergence bound.
pub fn non_iid_bound(c: &TheoryConstants, reading: BoundReading) -> Result<f64> {
    c.validate()?;
    let h0 = 4.0 * c.f0 + 6.0 * c.l * c.k * c.sigma_sq;
    let i0 = 3.0 * c.l * c.l * c.n;
    let head = h0 / (c.t * c.q).sqrt();
    Ok(match reading {
        BoundReading::OverQ => {
            let u0 = 3.0 * c.l * c.l * c.n * c.g;
            head + u0 / c.q + c.sigma_sq * i0 * c.delta_sq * c.avg_theta_norm_sq
        }
        BoundReading::OverSqrtQ => {
            let v0 = 3.0 * c.l * c.l * c.n * c.g / c.gamma_star;
            head + v0 / c.q.sqrt() + i0 * c.delta_sq / c.gamma_star * c.avg_theta_norm_sq
        }
    })
}

/// Everything measured in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: u32,
    pub participants: Vec<usize>,
    /// Loss of `θ_{q+1}` on the full test set.
    pub global_loss: f64,
    pub global_accuracy: f64,
    /// Uniformly weighted accuracy of each slot's masked `θ_{q+1}` on its
    /// client's test portion; NaN when no participant has test samples.
    pub local_weighted_accuracy: f64,
    pub gamma_min: usize,
    pub uncovered: usize,
    /// Pruning noise of each slot's mask against `θ_q`.
    pub delta_sq: Vec<f64>,
    pub mask_sparsity: Vec<f64>,
    pub grad_norm_sq: Option<f64>,
    pub amortized_params: f64,
    pub amortized_flops: f64,
}

impl RoundMetrics {
    pub fn delta_sq_mean(&self) -> f64 {
        if self.delta_sq.is_empty() {
            0.0
        } else {
            self.delta_sq.iter().sum::<f64>() / self.delta_sq.len() as f64
        }
    }
}

pub const CSV_HEADER: &str =
    "round,loss,acc_global,acc_local,gamma_min,delta_sq_mean,grad_norm_sq,params_amortized,flops_amortized";

/// One row of the metrics stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub round: u32,
    pub loss: f64,
    pub acc_global: f64,
    pub acc_local: f64,
    pub gamma_min: usize,
    pub delta_sq_mean: f64,
    pub grad_norm_sq: Option<f64>,
    pub params_amortized: f64,
    pub flops_amortized: f64,
}

impl From<&RoundMetrics> for MetricsRecord {
    fn from(m: &RoundMetrics) -> Self {
        Self {
            round: m.round,
            loss: m.global_loss,
            acc_global: m.global_accuracy,
            acc_local: m.local_weighted_accuracy,
            gamma_min: m.gamma_min,
            delta_sq_mean: m.delta_sq_mean(),
            grad_norm_sq: m.grad_norm_sq,
            params_amortized: m.amortized_params,
            flops_amortized: m.amortized_flops,
        }
    }
}

fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_json_float(v: f64) -> String {
    if v.is_finite() {
        fmt_float(v)
    } else {
        "null".into()
    }
}

impl MetricsRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.round,
            fmt_float(self.loss),
            fmt_float(self.acc_global),
            fmt_float(self.acc_local),
            self.gamma_min,
            fmt_float(self.delta_sq_mean),
            self.grad_norm_sq.map(fmt_float).unwrap_or_default(),
            fmt_float(self.params_amortized),
            fmt_float(self.flops_amortized),
        )
    }

    pub fn json_line(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{{\"round\":{},\"loss\":{},\"acc_global\":{},\"acc_local\":{},\"gamma_min\":{},\"delta_sq_mean\":{},\"grad_norm_sq\":{},\"params_amortized\":{},\"flops_amortized\":{}}}",
            self.round,
            fmt_json_float(self.loss),
            fmt_json_float(self.acc_global),
            fmt_json_float(self.acc_local),
            self.gamma_min,
            fmt_json_float(self.delta_sq_mean),
            self.grad_norm_sq.map_or_else(|| "null".into(), fmt_json_float),
            fmt_json_float(self.params_amortized),
            fmt_json_float(self.flops_amortized),
        )
        .expect("writing to a String");
        s
    }
}

/// Streams records to a CSV sink and a JSON-lines sink.
#[derive(Debug)]
pub struct MetricsWriter<C: Write, J: Write> {
    csv: C,
    jsonl: J,
}

impl<C: Write, J: Write> MetricsWriter<C, J> {
    /// Writes the CSV header immediately.
    pub fn new(mut csv: C, jsonl: J) -> Result<Self> {
        writeln!(csv, "{CSV_HEADER}")?;
        Ok(Self { csv, jsonl })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        writeln!(self.csv, "{}", record.csv_line())?;
        writeln!(self.jsonl, "{}", record.json_line())?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(C, J)> {
        self.csv.flush()?;
        self.jsonl.flush()?;
        Ok((self.csv, self.jsonl))
    }
}

pub fn emit_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => return Err(Error::Metrics(format!("unexpected header {other:?}"))),
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 9 {
                return Err(Error::Metrics(format!(
                    "line {}: expected 9 fields, got {}",
                    n + 2,
                    fields.len()
                )));
            }
            let bad = |what: &str| Error::Metrics(format!("line {}: bad {what}", n + 2));
            let float = |i: usize, what: &str| fields[i].parse::<f64>().map_err(|_| bad(what));
            Ok(MetricsRecord {
                round: fields[0].parse().map_err(|_| bad("round"))?,
                loss: float(1, "loss")?,
                acc_global: float(2, "acc_global")?,
                acc_local: float(3, "acc_local")?,
                gamma_min: fields[4].parse().map_err(|_| bad("gamma_min"))?,
                delta_sq_mean: float(5, "delta_sq_mean")?,
                grad_norm_sq: if fields[6].is_empty() {
                    None
                } else {
                    Some(float(6, "grad_norm_sq")?)
                },
                params_amortized: float(7, "params_amortized")?,
                flops_amortized: float(8, "flops_amortized")?,
            })
        })
        .collect()
}
