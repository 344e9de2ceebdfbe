use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use gcshift::csbm::{generate_shifted_pair, write_graph, CsbmParams, ShiftSpec};
use gcshift::numerics::RngState;

use crate::config::{ExperimentSpec, Suite};
use crate::error::{ExpError, Result};
use crate::selftest::{gradient_suite, ot_oracle_suite};
use crate::suites::{
    run_correlate, run_fig1, run_sweep, run_theory, summarize, write_correlate, write_fig1, write_sweep, write_theory,
    Status,
};

#[derive(Parser, Debug)]
#[command(name = "gcshift", version, about = "Synthetic conditional-shift experiments on CSBM graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a CSBM graph (and optionally a shifted target) to disk.
    Gen(GenArgs),
    /// Closed forms vs Monte-Carlo oracles, plus the MLP/GCN error curves.
    Theory(SuiteArgs),
    /// Target homophily sweep with a fixed source p/q.
    SweepPq(SuiteArgs),
    /// Feature-mean shift sweep with coupled rotation.
    SweepDelta(SuiteArgs),
    /// Ŵ₁ and CMD vs target AUC over random pairs.
    Correlate(SuiteArgs),
    /// MLP vs GCN source/target errors only.
    Fig1(SuiteArgs),
    /// OT-oracle and gradient checks.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 128)]
    n: usize,
    #[arg(long, default_value_t = 128)]
    d: usize,
    #[arg(long, default_value_t = 10.0)]
    degree: f64,
    #[arg(long, default_value_t = 5.0)]
    ratio: f64,
    #[arg(long, default_value_t = 1.0)]
    signal: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write a shifted target graph here.
    #[arg(long)]
    target_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    delta: f64,
    #[arg(long, default_value_t = 0.0)]
    theta: f64,
    #[arg(long)]
    ratio_target: Option<f64>,
}

#[derive(Args, Debug)]
struct SuiteArgs {
    /// key = value file applied over the suite defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    points: Option<usize>,
    /// Comma-separated, e.g. ERM,CMD,GCONDA.
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    #[arg(long, default_value_t = 200)]
    cases: usize,
    #[arg(long, default_value_t = 50)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SuiteArgs {
    fn resolve(&self, suite: Suite) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => ExperimentSpec::from_file(suite, path)?,
            None => ExperimentSpec::defaults(suite),
        };
        for kv in &self.overrides {
            spec.apply_override(kv)?;
        }
        if let Some(v) = self.seed {
            spec.seed = v;
        }
        if let Some(v) = self.trials {
            spec.trials = v;
        }
        if let Some(v) = self.points {
            spec.points = Some(v);
        }
        if let Some(v) = &self.methods {
            spec.set("methods", v)?;
        }
        if let Some(v) = &self.out {
            spec.out = v.clone();
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit
/// code: 0 success, 1 failed trials or runtime error, 2 usage error.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(0) => 0,
        Ok(failed) => {
            eprintln!("{failed} trial(s) failed");
            1
        }
        Err(e @ ExpError::Config { .. }) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Returns the number of failed trials or checks.
fn dispatch(command: Command) -> Result<usize> {
    match command {
        Command::Gen(a) => {
            gen(&a)?;
            Ok(0)
        }
        Command::Theory(a) => {
            let spec = a.resolve(Suite::Theory)?;
            let rows = run_theory(&spec)?;
            write_theory(&spec, &rows)?;
            let bad = rows
                .iter()
                .filter(|r| !(r.ok_delta_yx() && r.ok_eps_t_f() && r.ok_delta_yh() && r.ok_eps_t_fg()))
                .count();
            println!(
                "theory: {} grid points, {} outside oracle tolerance (see theory.csv)",
                rows.len(),
                bad
            );
            let fig = ExperimentSpec {
                out: spec.out.clone(),
                seed: spec.seed,
                ..ExperimentSpec::defaults(Suite::Fig1)
            };
            let rows = run_fig1(&fig)?;
            write_fig1(&fig, &rows)?;
            println!("fig1: {} rows", rows.len());
            Ok(0)
        }
        Command::Fig1(a) => {
            let spec = a.resolve(Suite::Fig1)?;
            let rows = run_fig1(&spec)?;
            write_fig1(&spec, &rows)?;
            println!("fig1: {} rows -> {}", rows.len(), spec.out.join("fig1.csv").display());
            Ok(0)
        }
        Command::SweepPq(a) => sweep(a.resolve(Suite::SweepPq)?),
        Command::SweepDelta(a) => sweep(a.resolve(Suite::SweepDelta)?),
        Command::Correlate(a) => {
            let spec = a.resolve(Suite::Correlate)?;
            let rows = run_correlate(&spec)?;
            let c = write_correlate(&spec, &rows)?;
            println!(
                "pairs {}  r(W1, AUC) = {:.3}  r(CMD, AUC) = {:.3}",
                c.pairs, c.r_w1, c.r_cmd
            );
            Ok(rows.iter().filter(|r| r.metrics.is_none()).count())
        }
        Command::Selftest(a) => {
            let (cost, marg) = ot_oracle_suite(a.cases, a.seed)?;
            let mut checks = vec![cost, marg];
            checks.extend(gradient_suite(a.instances, a.seed)?);
            let mut failed = 0;
            for c in &checks {
                println!(
                    "{:<16} {:>4} passed {:>4} failed  worst {:.3e}",
                    c.name, c.passed, c.failed, c.worst
                );
                failed += c.failed;
            }
            Ok(failed)
        }
    }
}

fn sweep(spec: ExperimentSpec) -> Result<usize> {
    let rows = run_sweep(&spec)?;
    write_sweep(&spec, &rows)?;
    println!("{:<6} {:>6} {:>6} {:<12} {:>14}", "p/q", "delta", "theta", "method", "target AUC %");
    for s in summarize(&rows) {
        println!(
            "{:<6} {:>6} {:>6} {:<12} {:>6.1} ± {:<5.1}{}",
            s.ratio_target,
            s.delta,
            s.theta_deg,
            s.method.name(),
            s.auc_mean,
            s.auc_std,
            if s.n_failed > 0 { format!(" ({} failed)", s.n_failed) } else { String::new() }
        );
    }
    Ok(rows.iter().filter(|r| r.status() == Status::Failed).count())
}

fn gen(a: &GenArgs) -> Result<()> {
    let src = CsbmParams {
        n: a.n,
        d: a.d,
        degree: a.degree,
        ratio: a.ratio,
        signal: a.signal,
        ..CsbmParams::default()
    };
    let spec = ShiftSpec {
        delta: a.delta,
        theta_deg: a.theta,
        ratio_target: a.ratio_target.unwrap_or(a.ratio),
        degree_target: a.degree,
    };
    let (gs, gt) = generate_shifted_pair(&src, &spec, &mut RngState::new(a.seed)).map_err(|e| match e {
        gcshift::Error::InvalidParameter(m) => ExpError::Config {
            origin: "gen".into(),
            message: m,
        },
        other => other.into(),
    })?;
    write_graph(&gs, &a.out)?;
    if let Some(path) = &a.target_out {
        write_graph(&gt, path)?;
    }
    Ok(())
}
