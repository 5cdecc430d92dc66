//! Command-line front end.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 coverage
//! violation, 3 I/O failure, 4 failed check or numerical failure.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::Error;
use crate::federation::{coverage_index, decompose_regions, FamilyName, Simulation};
use crate::metrics::{
    account_codename, account_codename_cached, policy_mask, table_layout, table_mismatches,
    MaskCache, MetricsRecord, MetricsWriter, TABLE_ROWS,
};
use crate::nn::LayerLayout;
use crate::pruning::{parse_codename, Family};
use crate::selfcheck::{self, Fault};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_COVERAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "hetfl",
    version,
    about = "Federated learning with heterogeneous pruned local models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a federation once per seed and write metrics.
    Run(RunArgs),
    /// Print parameter and FLOP counts for a codename.
    Account(AccountArgs),
    /// Print the coverage regions of a codename.
    Coverage(CoverageArgs),
    /// Run randomized internal consistency checks.
    Selfcheck(SelfcheckArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated seeds, overriding the file.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Output directory; falls back to the file, then $HETFL_OUT_DIR.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub codename: Option<String>,
    #[arg(long)]
    pub family: Option<String>,
}

#[derive(Debug, Args)]
pub struct AccountArgs {
    #[arg(long)]
    pub codename: Option<String>,
    #[arg(long, default_value = "wp")]
    pub family: String,
    /// Layer sizes joined by '-'.
    #[arg(long, default_value = "784-200-10")]
    pub layout: String,
    /// Compare against the embedded published rows.
    #[arg(long)]
    pub check_table: bool,
}

#[derive(Debug, Args)]
pub struct CoverageArgs {
    #[arg(long)]
    pub codename: String,
    #[arg(long, default_value = "wp")]
    pub family: String,
    #[arg(long, default_value = "784-200-10")]
    pub layout: String,
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, hide = true)]
    pub inject_gradient_fault: bool,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Coverage { .. } => EXIT_COVERAGE,
        Error::Io(_) | Error::Idx { .. } => EXIT_IO,
        Error::Config(_)
        | Error::Codename { .. }
        | Error::Partition(_)
        | Error::Layout(_)
        | Error::Shape(_)
        | Error::NoHiddenLayer
        | Error::RankingTooShort(_)
        | Error::Maskable(_)
        | Error::EmptyDataset => EXIT_CONFIG,
        _ => EXIT_CHECK,
    }
}

/// Parses `args` (including the program name) and runs the command,
/// writing normal output to `out`.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(&a, out),
        Command::Account(a) => cmd_account(&a, out),
        Command::Coverage(a) => cmd_coverage(&a, out),
        Command::Selfcheck(a) => cmd_selfcheck(&a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn parse_layout(spec: &str) -> crate::Result<Arc<LayerLayout>> {
    let sizes = spec
        .split('-')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| {
            Error::Config(format!(
                "layout {spec:?} is not a '-'-separated list of sizes"
            ))
        })?;
    Ok(Arc::new(LayerLayout::new(sizes)?))
}

fn parse_family(name: &str) -> crate::Result<(Family, Option<u32>)> {
    Ok(name.parse::<FamilyName>()?.resolve(None))
}

#[derive(Debug, Serialize)]
struct Summary {
    codename: String,
    family: FamilyName,
    rounds: u32,
    seeds: Vec<u64>,
    final_global_accuracy: Vec<f64>,
    final_local_accuracy: Vec<f64>,
    mean_global_accuracy: f64,
    std_global_accuracy: f64,
    mean_local_accuracy: f64,
    std_local_accuracy: f64,
    gamma_min: Option<usize>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn io_context(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}

pub fn cmd_run(args: &RunArgs, out: &mut dyn Write) -> crate::Result<i32> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seeds) = &args.seeds {
        config.run.seeds = Some(seeds.clone());
    }
    if let Some(c) = &args.codename {
        config.federation.codename = c.clone();
    }
    if let Some(f) = &args.family {
        config.federation.family = f.parse()?;
    }
    config.validate()?;
    let out_dir = config.out_dir(args.out.as_deref());
    fs::create_dir_all(&out_dir).map_err(|e| io_context(&out_dir, e))?;
    let (train, test) = config.load_data()?;

    let seeds = config.seeds();
    let mut global = Vec::new();
    let mut local = Vec::new();
    let mut gamma_min: Option<usize> = None;
    for &seed in &seeds {
        let mut fed = config.federation.clone();
        fed.seed = seed;
        let sim = Simulation::new(fed, train.clone(), test.clone())?;
        let csv_path = out_dir.join(format!("metrics_seed{seed}.csv"));
        let json_path = out_dir.join(format!("metrics_seed{seed}.jsonl"));
        let csv = File::create(&csv_path).map_err(|e| io_context(&csv_path, e))?;
        let json = File::create(&json_path).map_err(|e| io_context(&json_path, e))?;
        let mut writer = MetricsWriter::new(BufWriter::new(csv), BufWriter::new(json))?;
        let output = sim.run_with(|m| writer.write(&MetricsRecord::from(m)))?;
        writer.finish()?;
        if let Some(last) = output.metrics.last() {
            global.push(last.global_accuracy);
            local.push(last.local_weighted_accuracy);
            writeln!(
                out,
                "seed {seed}: global accuracy {:.4}, local accuracy {:.4}, gamma_min {}",
                last.global_accuracy,
                last.local_weighted_accuracy,
                output.gamma_min().unwrap_or(0)
            )?;
        }
        gamma_min = match (gamma_min, output.gamma_min()) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
    }
    let (mean_global_accuracy, std_global_accuracy) = mean_std(&global);
    let (mean_local_accuracy, std_local_accuracy) = mean_std(&local);
    let summary = Summary {
        codename: config.federation.codename.clone(),
        family: config.federation.family,
        rounds: config.federation.rounds,
        seeds,
        final_global_accuracy: global,
        final_local_accuracy: local,
        mean_global_accuracy,
        std_global_accuracy,
        mean_local_accuracy,
        std_local_accuracy,
        gamma_min,
    };
    let summary_path = out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Metrics(e.to_string()))?;
    fs::write(&summary_path, text + "\n").map_err(|e| io_context(&summary_path, e))?;
    writeln!(out, "wrote {}", out_dir.display())?;
    Ok(EXIT_OK)
}

pub fn cmd_account(args: &AccountArgs, out: &mut dyn Write) -> crate::Result<i32> {
    if args.check_table {
        return check_table(args, out);
    }
    let codename = args.codename.as_deref().ok_or_else(|| {
        Error::Config("account needs --codename unless --check-table is given".into())
    })?;
    let layout = parse_layout(&args.layout)?;
    let (family, _) = parse_family(&args.family)?;
    let a = account_codename(&layout, codename, family)?;
    for (slot, (digit, acc)) in codename.chars().zip(&a.per_slot).enumerate() {
        writeln!(
            out,
            "slot {slot} policy {digit}: params {} flops {}",
            acc.params, acc.flops
        )?;
    }
    writeln!(
        out,
        "amortized: params {} flops {} ratio {:.2}/{:.2} gamma_min {}",
        a.amortized.params,
        a.amortized.flops,
        a.amortized.params_ratio,
        a.amortized.flops_ratio,
        a.gamma_min
    )?;
    Ok(EXIT_OK)
}

fn check_table(args: &AccountArgs, out: &mut dyn Write) -> crate::Result<i32> {
    if args.layout != "784-200-10" {
        return Err(Error::Config(
            "--check-table applies to the 784-200-10 layout only".into(),
        ));
    }
    let layout = table_layout();
    let rows: Vec<_> = match &args.codename {
        Some(c) => {
            let (family, _) = parse_family(&args.family)?;
            TABLE_ROWS
                .iter()
                .filter(|r| r.family == family && r.codename == c)
                .collect()
        }
        None => TABLE_ROWS.iter().collect(),
    };
    if rows.is_empty() {
        return Err(Error::Config("no embedded table row matches".into()));
    }
    let mut failed = 0;
    let mut cache = MaskCache::default();
    for row in rows {
        let computed = account_codename_cached(&layout, row.codename, row.family, &mut cache)?;
        let problems = table_mismatches(row, &computed);
        let status = if problems.is_empty() {
            "ok"
        } else {
            "MISMATCH"
        };
        writeln!(
            out,
            "{} {} {} {} {} {status} {}",
            row.family,
            row.codename,
            computed.amortized.params,
            computed.amortized.flops,
            computed.gamma_min,
            problems.join("; ")
        )?;
        if !problems.is_empty() {
            failed += 1;
        }
    }
    Ok(if failed == 0 { EXIT_OK } else { EXIT_CHECK })
}

pub fn cmd_coverage(args: &CoverageArgs, out: &mut dyn Write) -> crate::Result<i32> {
    let layout = parse_layout(&args.layout)?;
    let (family, _) = parse_family(&args.family)?;
    let masks = parse_codename(&args.codename)?
        .policies(family, None)
        .iter()
        .map(|p| policy_mask(&layout, p))
        .collect::<crate::Result<Vec<_>>>()?;
    let partition = decompose_regions(&masks)?;
    let report = coverage_index(&partition);
    for region in &partition.regions {
        writeln!(
            out,
            "slots {:?}: {} parameters",
            region.signature,
            region.indices.len()
        )?;
    }
    writeln!(
        out,
        "regions {} gamma_min {} uncovered {}",
        partition.regions.len(),
        report.gamma_min,
        report.uncovered
    )?;
    Ok(if report.gamma_min == 0 {
        EXIT_COVERAGE
    } else {
        EXIT_OK
    })
}

pub fn cmd_selfcheck(args: &SelfcheckArgs, out: &mut dyn Write) -> crate::Result<i32> {
    let fault = args.inject_gradient_fault.then_some(Fault::Gradient);
    let results = selfcheck::run_all(args.seed, fault);
    for r in &results {
        match &r.failure {
            None => writeln!(out, "PASS {} ({} instances)", r.name, r.instances)?,
            Some(why) => writeln!(out, "FAIL {} ({} instances): {why}", r.name, r.instances)?,
        }
    }
    Ok(if results.iter().all(|r| r.passed()) {
        EXIT_OK
    } else {
        EXIT_CHECK
    })
}
