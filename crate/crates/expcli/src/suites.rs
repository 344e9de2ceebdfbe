//! Suite runners. Each returns canonically ordered rows; the `write_*`
//! functions turn them into CSV files under the spec's output directory.

use std::path::Path;
use std::time::Instant;

use gcshift::csbm::{generate_shifted_pair, generate_target_from_mu, sample_mu, ShiftSpec};
use gcshift::gnn::ModelKind;
use gcshift::numerics::{mean_std, pearson_r, RngState};
use gcshift::theory::{closed_form, inputs_for, mc_feature, mc_graph, mixing_corrected_h, TargetRule};
use gcshift::trainer::{evaluate, shift_estimates, train, train_with_search, Method, TrainConfig};
use rand::RngCore;
use rayon::prelude::*;

use crate::config::{ExperimentSpec, Suite};
use crate::error::{ExpError, Result};

/// Worker pool sized by `GCSHIFT_WORKERS` (rayon's default when unset or 0).
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let workers = match std::env::var("GCSHIFT_WORKERS") {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| ExpError::Config {
            origin: "GCSHIFT_WORKERS".into(),
            message: format!("expected a worker count, got {v:?}"),
        })?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ExpError::Config {
            origin: "GCSHIFT_WORKERS".into(),
            message: e.to_string(),
        })
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f(v: f64) -> String {
    v.to_string()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

fn trial_rng(spec: &ExperimentSpec, point: usize, trial: usize) -> RngState {
    RngState::new(spec.seed).fork(point as u64).fork(trial as u64)
}

fn writer(dir: &Path, name: &str) -> Result<csv::Writer<std::fs::File>> {
    std::fs::create_dir_all(dir)?;
    Ok(csv::Writer::from_path(dir.join(name))?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    Failed,
}

impl Status {
    pub fn name(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::Failed => "failed",
        }
    }
}

/// Metrics of one trained model on its target graph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialMetrics {
    pub auc: f64,
    pub logloss: f64,
    pub accuracy: f64,
    pub w1_hat: f64,
    pub cmd_value: f64,
    pub alpha: f64,
    pub beta: f64,
    pub k_moments: usize,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub suite: Suite,
    pub point: usize,
    pub ratio_target: f64,
    pub delta: f64,
    pub theta_deg: f64,
    pub method: Method,
    pub trial: usize,
    pub seed: u64,
    /// `None` iff the trial failed.
    pub metrics: Option<TrialMetrics>,
    pub wall_ms: u128,
}

impl ResultRow {
    pub fn status(&self) -> Status {
        if self.metrics.is_some() {
            Status::Ok
        } else {
            Status::Failed
        }
    }
}

pub const RESULT_HEADER: [&str; 19] = [
    "suite",
    "point",
    "ratio_target",
    "delta",
    "theta_deg",
    "method",
    "trial",
    "seed",
    "status",
    "auc",
    "logloss",
    "accuracy",
    "w1_hat",
    "cmd_value",
    "alpha",
    "beta",
    "k_moments",
    "best_epoch",
    "config_hash",
];

fn result_record(r: &ResultRow, hash: &str) -> Vec<String> {
    let m = r.metrics.as_ref();
    vec![
        r.suite.name().into(),
        r.point.to_string(),
        fmt_f(r.ratio_target),
        fmt_f(r.delta),
        fmt_f(r.theta_deg),
        r.method.name().into(),
        r.trial.to_string(),
        r.seed.to_string(),
        r.status().name().into(),
        fmt_opt(m.map(|m| m.auc)),
        fmt_opt(m.map(|m| m.logloss)),
        fmt_opt(m.map(|m| m.accuracy)),
        fmt_opt(m.map(|m| m.w1_hat)),
        fmt_opt(m.map(|m| m.cmd_value)),
        fmt_opt(m.map(|m| m.alpha)),
        fmt_opt(m.map(|m| m.beta)),
        m.map(|m| m.k_moments.to_string()).unwrap_or_default(),
        m.map(|m| m.best_epoch.to_string()).unwrap_or_default(),
        hash.into(),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub point: usize,
    pub ratio_target: f64,
    pub delta: f64,
    pub theta_deg: f64,
    pub method: Method,
    pub n_ok: usize,
    pub n_failed: usize,
    /// Percent, over successful trials.
    pub auc_mean: f64,
    pub auc_std: f64,
    pub logloss_mean: f64,
    pub accuracy_mean: f64,
    pub w1_mean: f64,
    pub cmd_mean: f64,
}

pub const SUMMARY_HEADER: [&str; 14] = [
    "suite",
    "point",
    "ratio_target",
    "delta",
    "theta_deg",
    "method",
    "n_ok",
    "n_failed",
    "auc_mean_pct",
    "auc_std_pct",
    "logloss_mean",
    "accuracy_mean",
    "w1_mean",
    "cmd_mean",
];

/// Mean ± std per `(point, method)`; rows must already be in canonical order.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for group in rows.chunk_by(|a, b| a.point == b.point && a.method == b.method) {
        let ok: Vec<&TrialMetrics> = group.iter().filter_map(|r| r.metrics.as_ref()).collect();
        let col = |f: fn(&TrialMetrics) -> f64| -> Vec<f64> { ok.iter().map(|m| f(m)).collect() };
        let (auc_mean, auc_std) = mean_std(&col(|m| m.auc * 100.0));
        let first = &group[0];
        out.push(SummaryRow {
            point: first.point,
            ratio_target: first.ratio_target,
            delta: first.delta,
            theta_deg: first.theta_deg,
            method: first.method,
            n_ok: ok.len(),
            n_failed: group.len() - ok.len(),
            auc_mean,
            auc_std,
            logloss_mean: mean_std(&col(|m| m.logloss)).0,
            accuracy_mean: mean_std(&col(|m| m.accuracy)).0,
            w1_mean: mean_std(&col(|m| m.w1_hat)).0,
            cmd_mean: mean_std(&col(|m| m.cmd_value)).0,
        });
    }
    out
}

/// Trains `cfg` (with its hyperparameter grid) on the pair and scores the target.
pub fn train_and_score(cfg: &TrainConfig, gs: &gcshift::csbm::Graph, gt: &gcshift::csbm::Graph) -> Result<TrialMetrics> {
    let (chosen, report) = train_with_search(cfg, gs, gt)?;
    let metrics = evaluate(&report.model, gt)?;
    let (w1_hat, cmd_value) = shift_estimates(&report.model, gs, gt, chosen.k_moments)?;
    Ok(TrialMetrics {
        auc: metrics.auc()?,
        logloss: metrics.logloss,
        accuracy: metrics.accuracy,
        w1_hat,
        cmd_value,
        alpha: chosen.alpha,
        beta: chosen.beta,
        k_moments: chosen.k_moments,
        best_epoch: report.best_epoch,
    })
}

fn sweep_trial(spec: &ExperimentSpec, point: usize, shift: &ShiftSpec, trial: usize) -> Vec<ResultRow> {
    let rng = trial_rng(spec, point, trial);
    let seed = rng.fork(1).next_u64();
    let pair = generate_shifted_pair(&spec.source_params(), shift, &mut rng.fork(0));
    spec.methods
        .iter()
        .map(|&method| {
            let start = Instant::now();
            let metrics = match &pair {
                Ok((gs, gt)) => train_and_score(&spec.train_config(method, seed), gs, gt).map_err(|e| e.to_string()),
                Err(e) => Err(e.to_string()),
            };
            let metrics = match metrics {
                Ok(m) => Some(m),
                Err(e) => {
                    log::warn!(
                        "{} point {point} trial {trial} {}: {e}",
                        spec.suite.name(),
                        method.name()
                    );
                    None
                }
            };
            ResultRow {
                suite: spec.suite,
                point,
                ratio_target: shift.ratio_target,
                delta: shift.delta,
                theta_deg: shift.theta_deg,
                method,
                trial,
                seed,
                metrics,
                wall_ms: start.elapsed().as_millis(),
            }
        })
        .collect()
}

/// Every (point, trial) pair of a p/q or δ sweep; rows sorted by
/// (point, method, trial).
pub fn run_sweep(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let points = spec.sweep_points();
    let jobs: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|p| (0..spec.trials).map(move |t| (p, t)))
        .collect();
    let mut rows: Vec<ResultRow> = worker_pool()?.install(|| {
        jobs.par_iter()
            .flat_map_iter(|&(p, t)| {
                let (r, d) = points[p];
                sweep_trial(spec, p, &spec.shift(r, d), t)
            })
            .collect()
    });
    rows.sort_by(|a, b| (a.point, a.method, a.trial).cmp(&(b.point, b.method, b.trial)));
    Ok(rows)
}

/// `results.csv`, `summary.csv` (both deterministic) and `timings.csv`.
pub fn write_sweep(spec: &ExperimentSpec, rows: &[ResultRow]) -> Result<()> {
    let hash = spec.config_hash();
    let mut w = writer(&spec.out, "results.csv")?;
    w.write_record(RESULT_HEADER)?;
    for r in rows {
        w.write_record(result_record(r, &hash))?;
    }
    w.flush()?;

    let mut w = writer(&spec.out, "summary.csv")?;
    w.write_record(SUMMARY_HEADER)?;
    for s in summarize(rows) {
        w.write_record([
            spec.suite.name().to_string(),
            s.point.to_string(),
            fmt_f(s.ratio_target),
            fmt_f(s.delta),
            fmt_f(s.theta_deg),
            s.method.name().into(),
            s.n_ok.to_string(),
            s.n_failed.to_string(),
            fmt_f(s.auc_mean),
            fmt_f(s.auc_std),
            fmt_f(s.logloss_mean),
            fmt_f(s.accuracy_mean),
            fmt_f(s.w1_mean),
            fmt_f(s.cmd_mean),
        ])?;
    }
    w.flush()?;

    let mut w = writer(&spec.out, "timings.csv")?;
    w.write_record(["suite", "point", "method", "trial", "wall_ms"])?;
    for r in rows {
        w.write_record([
            r.suite.name().to_string(),
            r.point.to_string(),
            r.method.name().into(),
            r.trial.to_string(),
            r.wall_ms.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- theory

#[derive(Clone, Debug, PartialEq)]
pub struct TheoryRow {
    pub m: f64,
    pub delta: f64,
    pub r_target: f64,
    pub d_target: f64,
    pub cf: gcshift::theory::ClosedFormReport,
    pub mc_x: gcshift::theory::McShiftAndError,
    pub mc_h: gcshift::theory::McShiftAndError,
    /// Latent shift and error with the neighbor-mixing variance included.
    pub corrected_h: (f64, f64),
}

pub const FEATURE_FLOOR: f64 = 0.01;
pub const GRAPH_FLOOR: f64 = 0.05;

impl TheoryRow {
    pub fn ok_delta_yx(&self) -> bool {
        self.mc_x.shift.agrees_with(self.cf.delta_yx, 3.0, FEATURE_FLOOR)
    }
    pub fn ok_eps_t_f(&self) -> bool {
        self.mc_x.error.agrees_with(self.cf.eps_t_f, 3.0, FEATURE_FLOOR)
    }
    pub fn ok_delta_yh(&self) -> bool {
        self.mc_h.shift.agrees_with(self.cf.delta_yh, 3.0, GRAPH_FLOOR)
    }
    pub fn ok_eps_t_fg(&self) -> bool {
        self.mc_h.error.agrees_with(self.cf.eps_t_fg, 3.0, GRAPH_FLOOR)
    }
    /// `Δ ≥ |ε_T − ε_S| − 1e-9` for the feature pair.
    pub fn bound_f(&self) -> bool {
        self.cf.delta_yx >= (self.cf.eps_t_f - self.cf.eps_s_f).abs() - 1e-9
    }
    /// Same for the latent pair.
    pub fn bound_fg(&self) -> bool {
        self.cf.delta_yh >= (self.cf.eps_t_fg - self.cf.eps_s_fg).abs() - 1e-9
    }
}

pub const THEORY_HEADER: [&str; 32] = [
    "m",
    "delta",
    "r_src",
    "r_tgt",
    "D_tgt",
    "delta_yx_cf",
    "delta_yx_mc",
    "se_delta_yx",
    "delta_yh_cf",
    "delta_yh_clamped",
    "delta_yh_mc",
    "se_delta_yh",
    "eps_s_f_cf",
    "eps_t_f_cf",
    "eps_t_f_mc",
    "se_eps_t_f",
    "eps_s_fg_cf",
    "eps_t_fg_cf",
    "eps_t_fg_mc",
    "se_eps_t_fg",
    "delta_yh_mixcorr",
    "eps_t_fg_mixcorr",
    "ok_delta_yx",
    "ok_eps_t_f",
    "ok_delta_yh",
    "ok_eps_t_fg",
    "bound_f",
    "bound_fg",
    "mc_samples",
    "mc_graphs",
    "graph_n",
    "config_hash",
];

/// Closed forms vs both Monte-Carlo oracles over `signals × deltas × ratios × degrees`.
pub fn run_theory(spec: &ExperimentSpec) -> Result<Vec<TheoryRow>> {
    spec.validate()?;
    let mut grid = Vec::new();
    for &m in &spec.signals {
        for &delta in &spec.deltas {
            for &r in &spec.ratios {
                for &dt in &spec.degrees {
                    grid.push((m, delta, r, dt));
                }
            }
        }
    }
    if let Some(k) = spec.points {
        grid.truncate(k);
    }
    worker_pool()?.install(|| {
        grid.par_iter()
            .enumerate()
            .map(|(i, &(m, delta, r, dt))| {
                let src = gcshift::csbm::CsbmParams {
                    signal: m,
                    ..spec.source_params()
                };
                let shift = ShiftSpec {
                    delta,
                    theta_deg: 0.0,
                    ratio_target: r,
                    degree_target: dt,
                };
                let inp = inputs_for(&src, &shift);
                let rng = RngState::new(spec.seed).fork(i as u64);
                Ok(TheoryRow {
                    m,
                    delta,
                    r_target: r,
                    d_target: dt,
                    cf: closed_form(&inp)?,
                    mc_x: mc_feature(&inp, spec.mc_samples, &mut rng.fork(0))?,
                    mc_h: mc_graph(&src, &shift, spec.mc_graphs, TargetRule::FixedNormal, &mut rng.fork(1))?,
                    corrected_h: mixing_corrected_h(&inp)?,
                })
            })
            .collect()
    })
}

pub fn write_theory(spec: &ExperimentSpec, rows: &[TheoryRow]) -> Result<()> {
    let hash = spec.config_hash();
    let mut w = writer(&spec.out, "theory.csv")?;
    w.write_record(THEORY_HEADER)?;
    for r in rows {
        let b = |v: bool| if v { "1".to_string() } else { "0".to_string() };
        w.write_record([
            fmt_f(r.m),
            fmt_f(r.delta),
            fmt_f(spec.ratio),
            fmt_f(r.r_target),
            fmt_f(r.d_target),
            fmt_f(r.cf.delta_yx),
            fmt_f(r.mc_x.shift.estimate),
            fmt_f(r.mc_x.shift.std_error),
            fmt_f(r.cf.delta_yh),
            b(r.cf.delta_yh_clamped),
            fmt_f(r.mc_h.shift.estimate),
            fmt_f(r.mc_h.shift.std_error),
            fmt_f(r.cf.eps_s_f),
            fmt_f(r.cf.eps_t_f),
            fmt_f(r.mc_x.error.estimate),
            fmt_f(r.mc_x.error.std_error),
            fmt_f(r.cf.eps_s_fg),
            fmt_f(r.cf.eps_t_fg),
            fmt_f(r.mc_h.error.estimate),
            fmt_f(r.mc_h.error.std_error),
            fmt_f(r.corrected_h.0),
            fmt_f(r.corrected_h.1),
            b(r.ok_delta_yx()),
            b(r.ok_eps_t_f()),
            b(r.ok_delta_yh()),
            b(r.ok_eps_t_fg()),
            b(r.bound_f()),
            b(r.bound_fg()),
            spec.mc_samples.to_string(),
            spec.mc_graphs.to_string(),
            spec.n.to_string(),
            hash.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- fig1

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Fig1Model {
    Mlp,
    Gcn1,
    Gcn2,
}

impl Fig1Model {
    pub const ALL: [Fig1Model; 3] = [Fig1Model::Mlp, Fig1Model::Gcn1, Fig1Model::Gcn2];

    pub fn name(self) -> &'static str {
        match self {
            Fig1Model::Mlp => "MLP",
            Fig1Model::Gcn1 => "GCN1",
            Fig1Model::Gcn2 => "GCN2",
        }
    }

    fn kind_and_hidden(self) -> (ModelKind, Vec<usize>) {
        match self {
            Fig1Model::Mlp => (ModelKind::Mlp, vec![16, 16]),
            Fig1Model::Gcn1 => (ModelKind::Gcn, vec![16]),
            Fig1Model::Gcn2 => (ModelKind::Gcn, vec![16, 16]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Fig1Sweep {
    Heterophily,
    Delta,
}

impl Fig1Sweep {
    pub fn name(self) -> &'static str {
        match self {
            Fig1Sweep::Heterophily => "qp",
            Fig1Sweep::Delta => "delta",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fig1Row {
    pub trial: usize,
    pub model: Fig1Model,
    pub sweep: Fig1Sweep,
    /// Index within the sweep, increasing shift.
    pub step: usize,
    pub ratio_target: f64,
    pub delta: f64,
    pub eps_s: f64,
    pub eps_t: f64,
}

impl Fig1Row {
    pub fn gap(&self) -> f64 {
        self.eps_t - self.eps_s
    }
}

fn fig1_trial(spec: &ExperimentSpec, trial: usize) -> Result<Vec<Fig1Row>> {
    let src = spec.source_params();
    let rng = trial_rng(spec, 0, trial);
    let mu = sample_mu(&src, &mut rng.fork(0));
    let identity = ShiftSpec::identity(&src);
    let g_train = generate_target_from_mu(&src, &mu, &identity, &mut rng.fork(1))?;
    let g_test = generate_target_from_mu(&src, &mu, &identity, &mut rng.fork(2))?;
    let mut targets = Vec::new();
    for (k, &r) in spec.ratios.iter().enumerate() {
        let shift = ShiftSpec {
            ratio_target: r,
            ..identity.clone()
        };
        targets.push((Fig1Sweep::Heterophily, k, shift));
    }
    for (k, &d) in spec.deltas.iter().enumerate() {
        targets.push((Fig1Sweep::Delta, k, spec.shift(src.ratio, d)));
    }
    let graphs = targets
        .iter()
        .enumerate()
        .map(|(i, (_, _, s))| generate_target_from_mu(&src, &mu, s, &mut rng.fork(10 + i as u64)))
        .collect::<gcshift::Result<Vec<_>>>()?;

    let seed = rng.fork(3).next_u64();
    let mut rows = Vec::new();
    for model in Fig1Model::ALL {
        let (kind, hidden) = model.kind_and_hidden();
        let cfg = TrainConfig {
            kind,
            hidden,
            ..spec.train_config(Method::Erm, seed)
        };
        let report = train(&cfg, &g_train, &g_train)?;
        let eps_s = 1.0 - evaluate(&report.model, &g_test)?.accuracy;
        for ((sweep, step, shift), g) in targets.iter().zip(&graphs) {
            rows.push(Fig1Row {
                trial,
                model,
                sweep: *sweep,
                step: *step,
                ratio_target: shift.ratio_target,
                delta: shift.delta,
                eps_s,
                eps_t: 1.0 - evaluate(&report.model, g)?.accuracy,
            });
        }
    }
    Ok(rows)
}

/// MLP vs one- and two-layer GCN source/target error along a heterophily
/// sweep (`ratios`) and a mean-shift sweep (`deltas`).
pub fn run_fig1(spec: &ExperimentSpec) -> Result<Vec<Fig1Row>> {
    spec.validate()?;
    let per_trial: Vec<Result<Vec<Fig1Row>>> =
        worker_pool()?.install(|| (0..spec.trials).into_par_iter().map(|t| fig1_trial(spec, t)).collect());
    let mut rows = Vec::new();
    for r in per_trial {
        rows.extend(r?);
    }
    rows.sort_by(|a, b| (a.sweep, a.step, a.model, a.trial).cmp(&(b.sweep, b.step, b.model, b.trial)));
    Ok(rows)
}

pub fn write_fig1(spec: &ExperimentSpec, rows: &[Fig1Row]) -> Result<()> {
    let hash = spec.config_hash();
    let mut w = writer(&spec.out, "fig1.csv")?;
    w.write_record([
        "sweep",
        "step",
        "ratio_target",
        "qp_target",
        "delta",
        "model",
        "trial",
        "eps_s",
        "eps_t",
        "gap",
        "config_hash",
    ])?;
    for r in rows {
        w.write_record([
            r.sweep.name().to_string(),
            r.step.to_string(),
            fmt_f(r.ratio_target),
            fmt_f(1.0 / r.ratio_target),
            fmt_f(r.delta),
            r.model.name().into(),
            r.trial.to_string(),
            fmt_f(r.eps_s),
            fmt_f(r.eps_t),
            fmt_f(r.gap()),
            hash.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- correlate

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelateRow {
    pub pair: usize,
    pub ratio_target: f64,
    pub delta: f64,
    pub theta_deg: f64,
    pub seed: u64,
    pub metrics: Option<TrialMetrics>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correlation {
    pub pairs: usize,
    pub r_w1: f64,
    pub r_cmd: f64,
}

/// `trials` source/target pairs with the target shift drawn uniformly from
/// `ratios × deltas`; ERM-GCN per pair.
pub fn run_correlate(spec: &ExperimentSpec) -> Result<Vec<CorrelateRow>> {
    spec.validate()?;
    let method = spec.methods[0];
    Ok(worker_pool()?.install(|| {
        (0..spec.trials)
            .into_par_iter()
            .map(|pair| {
                let rng = trial_rng(spec, 0, pair);
                let mut pick = rng.fork(2);
                let r = spec.ratios[pick.below(spec.ratios.len())];
                let d = spec.deltas[pick.below(spec.deltas.len())];
                let shift = spec.shift(r, d);
                let seed = rng.fork(1).next_u64();
                let metrics = generate_shifted_pair(&spec.source_params(), &shift, &mut rng.fork(0))
                    .map_err(ExpError::from)
                    .and_then(|(gs, gt)| train_and_score(&spec.train_config(method, seed), &gs, &gt));
                let metrics = metrics
                    .map_err(|e| log::warn!("correlate pair {pair}: {e}"))
                    .ok();
                CorrelateRow {
                    pair,
                    ratio_target: r,
                    delta: d,
                    theta_deg: shift.theta_deg,
                    seed,
                    metrics,
                }
            })
            .collect()
    }))
}

pub fn correlation(rows: &[CorrelateRow]) -> Result<Correlation> {
    let ok: Vec<&TrialMetrics> = rows.iter().filter_map(|r| r.metrics.as_ref()).collect();
    let auc: Vec<f64> = ok.iter().map(|m| m.auc).collect();
    let w1: Vec<f64> = ok.iter().map(|m| m.w1_hat).collect();
    let cmd: Vec<f64> = ok.iter().map(|m| m.cmd_value).collect();
    Ok(Correlation {
        pairs: ok.len(),
        r_w1: pearson_r(&w1, &auc)?,
        r_cmd: pearson_r(&cmd, &auc)?,
    })
}

pub fn write_correlate(spec: &ExperimentSpec, rows: &[CorrelateRow]) -> Result<Correlation> {
    let hash = spec.config_hash();
    let mut w = writer(&spec.out, "correlate.csv")?;
    w.write_record([
        "pair",
        "ratio_target",
        "delta",
        "theta_deg",
        "seed",
        "status",
        "auc",
        "w1_hat",
        "cmd_value",
        "config_hash",
    ])?;
    for r in rows {
        let m = r.metrics.as_ref();
        w.write_record([
            r.pair.to_string(),
            fmt_f(r.ratio_target),
            fmt_f(r.delta),
            fmt_f(r.theta_deg),
            r.seed.to_string(),
            if m.is_some() { "ok" } else { "failed" }.into(),
            fmt_opt(m.map(|m| m.auc)),
            fmt_opt(m.map(|m| m.w1_hat)),
            fmt_opt(m.map(|m| m.cmd_value)),
            hash.clone(),
        ])?;
    }
    w.flush()?;

    let c = correlation(rows)?;
    let mut w = writer(&spec.out, "summary.csv")?;
    w.write_record(["metric", "pearson_r_vs_auc", "pairs", "config_hash"])?;
    w.write_record(["w1_hat".to_string(), fmt_f(c.r_w1), c.pairs.to_string(), hash.clone()])?;
    w.write_record(["cmd".to_string(), fmt_f(c.r_cmd), c.pairs.to_string(), hash])?;
    w.flush()?;
    Ok(c)
}
