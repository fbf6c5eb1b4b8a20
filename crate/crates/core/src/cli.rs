//! Command-line front end.
//!
//! Five subcommands expose the laboratory: `survival` (death-time curve),
//! `qsd-exact` (truncated-kernel quasi-stationary law), `qsd-mc` (conditioned
//! Monte Carlo law at one level), `converge` (TV distance to a reference law
//! at a ladder of levels) and `renewal` (tails of the renewal index and
//! height, with decay-rate fits).
//!
//! Every output starts with the run configuration echoed as JSON — as a `#`
//! comment line in CSV mode, as a `config` field in JSON mode — so results
//! are reproducible from the artifact alone. The echo deliberately omits the
//! thread count and the output path: neither influences a single emitted
//! byte, and identical runs must produce identical artifacts.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::anchored::InitialCondition;
use crate::error::{Error, Result};
use crate::lattice::SimParams;
use crate::qsd::{
    build_kernel, conditional_law_mc, convergence_experiment, yaglom, TruncatedStateSpace,
    TruncationMode,
};
use crate::renewal::{estimate_beta, tail_statistics};
use crate::stats::{wilson_ci, DEFAULT_MIN_COUNT};

/// Power-iteration tolerance for the exact oracle.
const YAGLOM_TOL: f64 = 1e-12;
/// Power-iteration budget; convergence is geometric, so this is generous.
const YAGLOM_MAX_ITER: u32 = 100_000;
/// Depth of the cone-entry decay fit behind `beta_cone`.
const CONE_FIT_DEPTH: u32 = 12;
/// 95% confidence level.
const WILSON_Z: f64 = 1.96;

#[derive(Parser, Debug)]
#[command(
    name = "rightmost",
    version,
    about = "Subcritical oriented percolation seen from its rightmost occupied site"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Monte Carlo survival curve P(T > n) of the anchored chain.
    Survival(SurvivalArgs),
    /// Exact quasi-stationary law of the depth-w truncated kernel.
    QsdExact(QsdExactArgs),
    /// Monte Carlo law of the chain at level n conditioned on survival,
    /// projected to cylinder depth r.
    QsdMc(QsdMcArgs),
    /// TV distance between the anchored law and a truncated-kernel reference
    /// at a ladder of levels.
    Converge(ConvergeArgs),
    /// Tail table of the renewal index I and terminal height Y_I, plus the
    /// fitted survival and cone-entry decay rates.
    Renewal(RenewalArgs),
}

impl Command {
    fn output_path(&self) -> Option<PathBuf> {
        match self {
            Command::Survival(a) => a.output.out.clone(),
            Command::QsdExact(a) => a.out.clone(),
            Command::QsdMc(a) => a.output.out.clone(),
            Command::Converge(a) => a.output.out.clone(),
            Command::Renewal(a) => a.output.out.clone(),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args, Debug)]
struct OutputArgs {
    /// Output format.
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Write the artifact to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimArgs {
    /// Bond probability.
    #[arg(long)]
    p: f64,
    /// Horizon: the largest simulated level.
    #[arg(long)]
    n: u32,
    /// Tracked sites per level.
    #[arg(long, default_value_t = 128)]
    window: usize,
    /// Master seed; trial i reads stream (seed, i).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Monte Carlo trials.
    #[arg(long, default_value_t = 100_000)]
    trials: u64,
    /// Worker threads (0 = runtime default; falls back to RIGHTMOST_THREADS).
    #[arg(long)]
    threads: Option<usize>,
}

impl SimArgs {
    fn params(&self) -> Result<SimParams> {
        SimParams::new(self.p, self.n, self.window, self.seed)
    }

    fn threads(&self) -> usize {
        resolve_threads(self.threads)
    }
}

fn resolve_threads(explicit: Option<usize>) -> usize {
    explicit
        .or_else(|| std::env::var("RIGHTMOST_THREADS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(0)
}

fn parse_initial(s: &str) -> std::result::Result<InitialCondition, Error> {
    s.parse()
}

fn parse_mode(s: &str) -> std::result::Result<TruncationMode, Error> {
    s.parse()
}

#[derive(Args, Debug)]
struct SurvivalArgs {
    #[command(flatten)]
    sim: SimArgs,
    /// Initial configuration: origin, full, or finite:0,-2,...
    #[arg(long, default_value = "origin", value_parser = parse_initial)]
    initial: InitialCondition,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct QsdExactArgs {
    /// Bond probability.
    #[arg(long)]
    p: f64,
    /// Truncation depth: states keep the anchor plus offsets down to -2(w-1).
    #[arg(long, default_value_t = 10)]
    w: usize,
    /// What happens to mass stepping below the truncation depth.
    #[arg(long, default_value = "project", value_parser = parse_mode)]
    mode: TruncationMode,
    /// Output format; this artifact is a single JSON document.
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Write the artifact to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct QsdMcArgs {
    #[command(flatten)]
    sim: SimArgs,
    /// Cylinder depth of the reported law.
    #[arg(long, default_value_t = 3)]
    r: usize,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct ConvergeArgs {
    /// Bond probability.
    #[arg(long)]
    p: f64,
    /// Checkpoint levels, comma separated.
    #[arg(long = "n-list", value_delimiter = ',', required = true)]
    n_list: Vec<u32>,
    /// Tracked sites per level.
    #[arg(long, default_value_t = 128)]
    window: usize,
    /// Master seed; trial i reads stream (seed, i).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Monte Carlo trials.
    #[arg(long, default_value_t = 100_000)]
    trials: u64,
    /// Worker threads (0 = runtime default; falls back to RIGHTMOST_THREADS).
    #[arg(long)]
    threads: Option<usize>,
    /// Cylinder depth at which laws are compared (must be < w).
    #[arg(long, default_value_t = 3)]
    r: usize,
    /// Truncation depth of the reference oracle.
    #[arg(long, default_value_t = 10)]
    w: usize,
    /// Truncation mode of the reference oracle.
    #[arg(long, default_value = "project", value_parser = parse_mode)]
    mode: TruncationMode,
    /// Initial configuration of the simulated chain.
    #[arg(long, default_value = "full", value_parser = parse_initial)]
    initial: InitialCondition,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct RenewalArgs {
    #[command(flatten)]
    sim: SimArgs,
    /// Initial configuration; the renewal tail experiment requires full.
    #[arg(long, default_value = "full", value_parser = parse_initial)]
    initial: InitialCondition,
    /// Smallest per-point sample count admitted to the decay fits.
    #[arg(long = "min-count", default_value_t = DEFAULT_MIN_COUNT)]
    min_count: u64,
    #[command(flatten)]
    output: OutputArgs,
}

/// Full CLI entry point: parses `argv` (binary name included), runs the
/// command, writes the artifact, and maps errors to exit codes.
pub fn run_from<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprint!("{e}");
            return 2;
        }
    };
    let dest = cli.command.output_path();
    let mut buf = Vec::new();
    if let Err(e) = dispatch(cli, &mut buf) {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    let written = match dest {
        Some(path) => fs::write(path, &buf).map_err(Error::from),
        None => std::io::stdout().write_all(&buf).map_err(Error::from),
    };
    match written {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a command (arguments without the binary name) and returns the exact
/// bytes it would emit. This is the hook determinism tests are built on.
pub fn run_command_captured<I, T>(args: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv = std::iter::once(OsString::from("rightmost"))
        .chain(args.into_iter().map(Into::into));
    let cli = Cli::try_parse_from(argv).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut buf = Vec::new();
    dispatch(cli, &mut buf)?;
    Ok(buf)
}

fn dispatch<W: Write>(cli: Cli, out: &mut W) -> Result<()> {
    match cli.command {
        Command::Survival(a) => cmd_survival(a, out),
        Command::QsdExact(a) => cmd_qsd_exact(a, out),
        Command::QsdMc(a) => cmd_qsd_mc(a, out),
        Command::Converge(a) => cmd_converge(a, out),
        Command::Renewal(a) => cmd_renewal(a, out),
    }
}

fn to_json(value: &serde_json::Value) -> String {
    serde_json::to_string_pretty(value).expect("JSON values serialise")
}

fn cmd_survival<W: Write>(a: SurvivalArgs, out: &mut W) -> Result<()> {
    let params = a.sim.params()?;
    let curve =
        crate::renewal::survival_curve(&params, &a.initial, a.sim.trials, a.sim.threads())?;
    let config = json!({
        "artifact": "survival",
        "p": params.p,
        "n_max": params.n_max,
        "window": params.window_width,
        "seed": params.seed,
        "trials": a.sim.trials,
        "initial": a.initial.to_string(),
    });
    let mut rows = Vec::with_capacity(curve.n_max as usize);
    for n in 1..=curve.n_max {
        let s = curve.survivors_past(n);
        let (lo, hi) = wilson_ci(s, curve.trials, WILSON_Z)?;
        rows.push((n, s, s as f64 / curve.trials as f64, lo, hi));
    }
    match a.output.format {
        Format::Csv => {
            writeln!(out, "# {}", json!(config))?;
            writeln!(out, "n,survivors,p_hat,ci_low,ci_high")?;
            for (n, s, p_hat, lo, hi) in rows {
                writeln!(out, "{n},{s},{p_hat},{lo},{hi}")?;
            }
        }
        Format::Json => {
            let rows: Vec<_> = rows
                .into_iter()
                .map(|(n, s, p_hat, lo, hi)| {
                    json!({"n": n, "survivors": s, "p_hat": p_hat, "ci_low": lo, "ci_high": hi})
                })
                .collect();
            writeln!(out, "{}", to_json(&json!({"config": config, "rows": rows})))?;
        }
    }
    Ok(())
}

fn cmd_qsd_exact<W: Write>(a: QsdExactArgs, out: &mut W) -> Result<()> {
    let space = TruncatedStateSpace::new(a.w)?;
    let kernel = build_kernel(a.p, &space, a.mode)?;
    let result = yaglom(&kernel, YAGLOM_TOL, YAGLOM_MAX_ITER)?;
    let config = json!({
        "artifact": "qsd-exact",
        "p": a.p,
        "w": a.w,
        "mode": a.mode.to_string(),
    });
    let states: Vec<_> = result
        .dist
        .probs()
        .iter()
        .enumerate()
        .map(|(s, &prob)| json!({"offsets": space.offsets_of(s), "prob": prob}))
        .collect();
    let doc = json!({
        "config": config,
        "lambda": result.lambda,
        "iterations": result.iterations,
        "final_step_tv": result.final_step_tv,
        "states": states,
    });
    match a.format {
        Format::Json => writeln!(out, "{}", to_json(&doc))?,
        Format::Csv => {
            return Err(Error::InvalidConfig(
                "qsd-exact emits a single JSON document; pass --format json".into(),
            ))
        }
    }
    Ok(())
}

fn cmd_qsd_mc<W: Write>(a: QsdMcArgs, out: &mut W) -> Result<()> {
    let params = a.sim.params()?;
    let law = conditional_law_mc(&params, a.sim.n, a.r, a.sim.trials, a.sim.threads())?;
    let config = json!({
        "artifact": "qsd-mc",
        "p": params.p,
        "n": a.sim.n,
        "window": params.window_width,
        "seed": params.seed,
        "trials": a.sim.trials,
        "r": a.r,
    });
    let mut rows = Vec::new();
    for (pattern, prob) in law.table.iter() {
        let count = law.counter.get(pattern);
        let (lo, hi) = wilson_ci(count, law.survivors, WILSON_Z)?;
        rows.push((pattern.to_string(), count, prob, lo, hi));
    }
    match a.output.format {
        Format::Csv => {
            writeln!(out, "# {}", json!(config))?;
            writeln!(out, "pattern,count,prob,ci_low,ci_high,survivors,trials")?;
            for (pattern, count, prob, lo, hi) in rows {
                writeln!(
                    out,
                    "{pattern},{count},{prob},{lo},{hi},{},{}",
                    law.survivors, law.trials
                )?;
            }
        }
        Format::Json => {
            let rows: Vec<_> = rows
                .into_iter()
                .map(|(pattern, count, prob, lo, hi)| {
                    json!({
                        "pattern": pattern, "count": count, "prob": prob,
                        "ci_low": lo, "ci_high": hi,
                    })
                })
                .collect();
            let doc = json!({
                "config": config,
                "survivors": law.survivors,
                "trials": law.trials,
                "rows": rows,
            });
            writeln!(out, "{}", to_json(&doc))?;
        }
    }
    Ok(())
}

fn cmd_converge<W: Write>(a: ConvergeArgs, out: &mut W) -> Result<()> {
    if a.r >= a.w {
        return Err(Error::InvalidConfig(format!(
            "comparison depth r = {} must be smaller than the oracle depth w = {}",
            a.r, a.w
        )));
    }
    let &n_max = a.n_list.iter().max().ok_or_else(|| {
        Error::InvalidConfig("at least one checkpoint level is required".into())
    })?;
    let params = SimParams::new(a.p, n_max, a.window, a.seed)?;
    let space = TruncatedStateSpace::new(a.w)?;
    let kernel = build_kernel(a.p, &space, a.mode)?;
    let reference = yaglom(&kernel, YAGLOM_TOL, YAGLOM_MAX_ITER)?.dist.project(a.r)?;
    let threads = resolve_threads(a.threads);
    let report = convergence_experiment(
        &params,
        &a.initial,
        &a.n_list,
        a.r,
        &reference,
        a.trials,
        threads,
    )?;
    let config = json!({
        "artifact": "converge",
        "p": a.p,
        "n_list": a.n_list,
        "window": a.window,
        "seed": a.seed,
        "trials": a.trials,
        "r": a.r,
        "w": a.w,
        "mode": a.mode.to_string(),
        "initial": a.initial.to_string(),
    });
    match a.output.format {
        Format::Csv => {
            writeln!(out, "# {}", json!(config))?;
            writeln!(out, "n,tv,ci,samples")?;
            for row in &report.rows {
                writeln!(out, "{},{},{},{}", row.n, row.tv, row.ci_half_width, row.samples)?;
            }
            writeln!(
                out,
                "# {}",
                json!({"tv_monotone_decreasing": report.tv_monotone_decreasing})
            )?;
        }
        Format::Json => {
            let doc = json!({
                "config": config,
                "rows": report.rows,
                "tv_monotone_decreasing": report.tv_monotone_decreasing,
            });
            writeln!(out, "{}", to_json(&doc))?;
        }
    }
    Ok(())
}

fn cmd_renewal<W: Write>(a: RenewalArgs, out: &mut W) -> Result<()> {
    if !matches!(a.initial, InitialCondition::Full) {
        return Err(Error::InvalidConfig(
            "the renewal tail experiment is defined for the full initial condition".into(),
        ));
    }
    let params = a.sim.params()?;
    let threads = a.sim.threads();
    let report = tail_statistics(&params, &a.initial, params.n_max, a.sim.trials, threads)?;
    let beta = estimate_beta(&params, a.sim.trials, CONE_FIT_DEPTH, a.min_count, threads)?;
    let config = json!({
        "artifact": "renewal",
        "p": params.p,
        "n": params.n_max,
        "window": params.window_width,
        "seed": params.seed,
        "trials": a.sim.trials,
        "initial": a.initial.to_string(),
        "min_count": a.min_count,
    });
    match a.output.format {
        Format::Csv => {
            writeln!(out, "# {}", json!(config))?;
            writeln!(out, "m,count_I_ge_m,p_I_ge_m,count_YI_ge_m2,p_YI_ge_m2")?;
            for row in &report.rows {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    row.m, row.count_i_ge_m, row.p_i_ge_m, row.count_yi_ge_m2, row.p_yi_ge_m2
                )?;
            }
            writeln!(
                out,
                "# {}",
                json!({
                    "reaching": report.reaching,
                    "not_reaching": report.not_reaching,
                    "not_reaching_rate": report.not_reaching_rate(),
                })
            )?;
            writeln!(
                out,
                "# {}",
                json!({
                    "beta_survival": beta.beta_survival,
                    "beta_cone": beta.beta_cone,
                    "survival_fit": beta.survival,
                    "cone_fit": beta.cone,
                })
            )?;
        }
        Format::Json => {
            let doc = json!({
                "config": config,
                "n": report.n,
                "trials": report.trials,
                "reaching": report.reaching,
                "not_reaching": report.not_reaching,
                "not_reaching_rate": report.not_reaching_rate(),
                "rows": report.rows,
                "beta": beta,
            });
            writeln!(out, "{}", to_json(&doc))?;
        }
    }
    Ok(())
}
