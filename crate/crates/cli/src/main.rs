#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nrule_core::dynamics::IntegratorConfig;
use nrule_core::ensemble::{
    compare_to_oracle, run_ensemble, EnsembleConfig, OutcomeStats, Significance,
};
use nrule_core::format;
use nrule_core::hilbert::validate;
use nrule_core::oracle::{outcome_distribution, unitary_report, TreeConfig};
use nrule_core::reduction::{
    event_log, run_trajectory, trial_rng, CollapsePolicy, TrajectoryRecord,
};
use nrule_core::scenarios::{self, OracleMode, ScenarioSpec, REGISTRY};
use nrule_core::Error;

const THREADS_ENV: &str = "NRULE_SIM_THREADS";

#[derive(Parser)]
#[command(
    name = "nrule-sim",
    version,
    about = "Stochastic trajectories under truncated-Hamiltonian evolution"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario file.
    Validate { file: PathBuf },
    /// One trajectory; JSON-lines event log.
    Run(RunArgs),
    /// Many trajectories; outcome statistics against the race oracle.
    Ensemble(EnsembleArgs),
    /// Oracle report.
    Oracle(OracleArgs),
    /// Registered scenario ids and their parameters.
    ListScenarios,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Registered id or path to a scenario file.
    scenario: String,
    /// Builder parameter, `name=value`; repeatable.
    #[arg(long = "param", short = 'p', value_parser = parse_param)]
    params: Vec<(String, f64)>,
    #[arg(long)]
    tmax: Option<f64>,
}

#[derive(Args)]
struct NumericArgs {
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long)]
    dt_init: Option<f64>,
    #[arg(long)]
    dt_floor: Option<f64>,
    #[arg(long, default_value = "zero")]
    policy: CollapsePolicy,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    numeric: NumericArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample interval for component moduli.
    #[arg(long, requires = "samples_out")]
    samples: Option<f64>,
    /// CSV destination for samples.
    #[arg(long, requires = "samples")]
    samples_out: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EnsembleArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    numeric: NumericArgs,
    #[arg(long)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// First trial index, for sharded runs.
    #[arg(long, default_value_t = 0)]
    first_trial: u64,
    #[arg(long)]
    bin_width: Option<f64>,
    #[arg(long, default_value_t = 200)]
    bins: usize,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Skip the race oracle comparison.
    #[arg(long, conflicts_with = "assert")]
    no_oracle: bool,
    /// Exit with status 4 on invariant failures or oracle disagreement.
    #[arg(long)]
    assert: bool,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long)]
    mode: Option<OracleMode>,
    /// Sample points for the unitary series.
    #[arg(long, default_value_t = 401)]
    points: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_param(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected name=value, got `{s}`"))?;
    let v: f64 = v
        .trim()
        .parse()
        .map_err(|e| format!("parameter `{k}`: {e}"))?;
    Ok((k.trim().to_string(), v))
}

enum Failure {
    Usage(String),
    Validation(String),
    Numerical(String),
    Assert(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Validation(_) => 2,
            Failure::Numerical(_) => 3,
            Failure::Assert(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m)
            | Failure::Validation(m)
            | Failure::Numerical(m)
            | Failure::Assert(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        if e.is_numerical() {
            return Failure::Numerical(msg);
        }
        match e {
            Error::Validation(_)
            | Error::Format(_)
            | Error::Json(_)
            | Error::ContinuousIntoReady { .. } => Failure::Validation(msg),
            _ => Failure::Usage(msg),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn load(args: &ScenarioArgs) -> CliResult<ScenarioSpec> {
    let params: BTreeMap<String, f64> = args.params.iter().cloned().collect();
    let mut spec = scenarios::resolve(&args.scenario, &params)?;
    if let Some(t) = args.tmax {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Failure::Usage(format!("--tmax must be positive, got {t}")));
        }
        spec.meta.t_max = t;
    }
    Ok(spec)
}

fn integrator(n: &NumericArgs) -> CliResult<IntegratorConfig> {
    let mut cfg = IntegratorConfig::with_tol(n.tol);
    if let Some(h) = n.dt_init {
        cfg.dt_init = h;
    }
    if let Some(f) = n.dt_floor {
        cfg.dt_floor = f;
    }
    cfg.check().map_err(Failure::from)?;
    Ok(cfg)
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| Failure::Usage(e.to_string()))
        }
    }
}

fn write_samples(path: &Path, spec: &ScenarioSpec, rec: &TrajectoryRecord) -> CliResult<()> {
    let io = |e: csv::Error| Failure::Usage(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec!["t".to_string()];
    header.extend(spec.graph.components().iter().map(|c| c.label.clone()));
    w.write_record(&header).map_err(io)?;
    for s in &rec.samples {
        let mut row = vec![s.t.to_string()];
        row.extend(
            s.component_moduli(&spec.graph)
                .iter()
                .map(|m| m.to_string()),
        );
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Failure::Usage(e.to_string()))
}

fn cmd_validate(file: &Path) -> CliResult<()> {
    let text =
        fs::read_to_string(file).map_err(|e| Failure::Usage(format!("{}: {e}", file.display())))?;
    let graph = format::from_json(&text)?;
    let report = validate(&graph);
    if report.is_pass() {
        println!(
            "{}: ok ({} states, {} components)",
            file.display(),
            graph.dim(),
            graph.components().len()
        );
        Ok(())
    } else {
        Err(Failure::Validation(format!(
            "{}:\n{report}",
            file.display()
        )))
    }
}

fn cmd_run(a: &RunArgs) -> CliResult<()> {
    let spec = load(&a.scenario)?;
    let mut cfg = spec.trajectory_config();
    cfg.integrator = integrator(&a.numeric)?;
    cfg.policy = a.numeric.policy;
    cfg.sample_every = a.samples;
    let mut rng = trial_rng(a.seed, 0);
    let mut rec = run_trajectory(&spec.graph, &spec.id, &mut rng, &cfg)?;
    rec.seed = a.seed;
    emit(
        a.out.as_deref(),
        &event_log(&rec, cfg.integrator.tol, cfg.policy),
    )?;
    if let Some(path) = &a.samples_out {
        write_samples(path, &spec, &rec)?;
    }
    Ok(())
}

fn workers(flag: usize) -> CliResult<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| {
            Failure::Usage(format!(
                "{THREADS_ENV} must be a non-negative integer, got `{v}`"
            ))
        }),
        Err(_) => Ok(flag),
    }
}

fn write_csv(path: &Path, stats: &OutcomeStats) -> CliResult<()> {
    let io = |e: csv::Error| Failure::Usage(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["outcome", "count", "frequency", "oracleP", "z"])
        .map_err(io)?;
    match &stats.oracle_comparison {
        Some(c) => {
            for o in &c.outcomes {
                w.write_record([
                    o.outcome.clone(),
                    o.count.to_string(),
                    o.frequency.to_string(),
                    o.oracle_p.to_string(),
                    o.z.to_string(),
                ])
                .map_err(io)?;
            }
        }
        None => {
            for (k, &v) in &stats.outcome_counts {
                let f = v as f64 / stats.n as f64;
                w.write_record([
                    k.clone(),
                    v.to_string(),
                    f.to_string(),
                    String::new(),
                    String::new(),
                ])
                .map_err(io)?;
            }
        }
    }
    w.flush().map_err(|e| Failure::Usage(e.to_string()))
}

fn cmd_ensemble(a: &EnsembleArgs) -> CliResult<()> {
    let spec = load(&a.scenario)?;
    let mut cfg = EnsembleConfig::new(&spec, a.trials, a.seed);
    cfg.first_trial = a.first_trial;
    cfg.workers = workers(a.workers)?;
    cfg.trajectory.integrator = integrator(&a.numeric)?;
    cfg.trajectory.policy = a.numeric.policy;
    cfg.n_bins = a.bins;
    if let Some(w) = a.bin_width {
        cfg.bin_width = w;
    }
    let mut stats = run_ensemble(&spec, &cfg)?;
    if !a.no_oracle {
        let oracle = outcome_distribution(&spec, &TreeConfig::new(spec.meta.t_max))?;
        stats.oracle_comparison = Some(compare_to_oracle(
            &stats,
            &oracle.values,
            Significance::default(),
        ));
    }
    let json = serde_json::to_string_pretty(&stats).expect("stats serialize") + "\n";
    emit(a.report.as_deref(), &json)?;
    if let Some(path) = &a.csv {
        write_csv(path, &stats)?;
    }
    if a.assert {
        let mut problems = Vec::new();
        if !stats.invariant_failures.is_empty() {
            problems.push(format!(
                "{} invariant failures",
                stats.invariant_failures.len()
            ));
        }
        if let Some(c) = stats.oracle_comparison.as_ref().filter(|c| !c.pass) {
            problems.push(format!(
                "oracle comparison failed: chi-square p = {:.3e}, uncovered {:?}",
                c.p_value, c.uncovered
            ));
        }
        if !problems.is_empty() {
            return Err(Failure::Assert(problems.join("; ")));
        }
    }
    Ok(())
}

fn cmd_oracle(a: &OracleArgs) -> CliResult<()> {
    let spec = load(&a.scenario)?;
    let result = match a.mode.unwrap_or(spec.meta.oracle) {
        OracleMode::Race => outcome_distribution(&spec, &TreeConfig::new(spec.meta.t_max))?,
        OracleMode::Unitary => unitary_report(&spec, spec.meta.t_max, a.points)?,
    };
    let json = serde_json::to_string_pretty(&result).expect("oracle result serializes") + "\n";
    emit(a.out.as_deref(), &json)
}

fn cmd_list() {
    for e in REGISTRY {
        let params: Vec<String> = e
            .params
            .iter()
            .map(|p| {
                let v = if p.default.is_nan() {
                    "auto".to_string()
                } else {
                    p.default.to_string()
                };
                format!("{}={v}{}", p.name, if p.integer { " (int)" } else { "" })
            })
            .collect();
        println!("{}\t{}\t{}", e.id, params.join(", "), e.summary);
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Validate { file } => cmd_validate(file),
        Command::Run(a) => cmd_run(a),
        Command::Ensemble(a) => cmd_ensemble(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::ListScenarios => {
            cmd_list();
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
