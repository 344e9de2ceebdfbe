//! Flat `key = value` experiment configuration with per-suite defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gcshift::csbm::{CsbmParams, ShiftSpec};
use gcshift::trainer::{Method, TrainConfig};
use sha2::{Digest, Sha256};

use crate::error::{ExpError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Theory,
    SweepPq,
    SweepDelta,
    Correlate,
    Fig1,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Theory => "theory",
            Suite::SweepPq => "sweep_pq",
            Suite::SweepDelta => "sweep_delta",
            Suite::Correlate => "correlate",
            Suite::Fig1 => "fig1",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub suite: Suite,
    pub seed: u64,
    /// Seeds per grid point (sweeps, fig1) or number of pairs (correlate).
    pub trials: usize,
    /// Keep only the first `k` grid points.
    pub points: Option<usize>,
    pub methods: Vec<Method>,
    pub out: PathBuf,

    // source CSBM
    pub n: usize,
    pub d: usize,
    pub degree: f64,
    pub ratio: f64,
    pub signal: f64,

    // grids
    pub ratios: Vec<f64>,
    pub deltas: Vec<f64>,
    pub theta_per_delta: f64,
    pub signals: Vec<f64>,
    pub degrees: Vec<f64>,

    // Monte-Carlo oracles
    pub mc_samples: usize,
    pub mc_graphs: usize,

    // training
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub lambda: f64,
    pub k_moments: usize,
    pub hidden: Vec<usize>,
    pub val_fraction: f64,
}

fn range(lo: i32, hi: i32, div: f64) -> Vec<f64> {
    (lo..=hi).map(|i| f64::from(i) / div).collect()
}

impl ExperimentSpec {
    pub fn defaults(suite: Suite) -> Self {
        let base = ExperimentSpec {
            suite,
            seed: 1,
            trials: 30,
            points: None,
            methods: vec![Method::Erm, Method::Cmd, Method::Gconda],
            out: PathBuf::from("out"),
            n: 128,
            d: 128,
            degree: 10.0,
            ratio: 5.0,
            signal: 0.65,
            ratios: vec![5.0],
            deltas: vec![0.0],
            theta_per_delta: 60.0,
            signals: vec![0.65],
            degrees: vec![10.0],
            mc_samples: 100_000,
            mc_graphs: 50,
            epochs: 200,
            warmup_epochs: 50,
            lr: 0.01,
            lambda: 1.0,
            k_moments: 5,
            hidden: vec![16, 16],
            val_fraction: 0.2,
        };
        match suite {
            Suite::Theory => ExperimentSpec {
                trials: 1,
                methods: Vec::new(),
                n: 2000,
                d: 16,
                signal: 1.0,
                ratios: vec![0.5, 1.0, 3.0, 5.0],
                deltas: vec![0.0, 0.25, 0.5, 1.0],
                theta_per_delta: 0.0,
                signals: vec![0.5, 1.0, 2.0],
                ..base
            },
            Suite::SweepPq => ExperimentSpec {
                ratios: range(1, 10, 1.0),
                ..base
            },
            Suite::SweepDelta => ExperimentSpec {
                deltas: range(1, 10, 10.0),
                ..base
            },
            Suite::Correlate => ExperimentSpec {
                trials: 40,
                methods: vec![Method::Erm],
                ratios: range(1, 10, 1.0),
                deltas: range(0, 10, 10.0),
                ..base
            },
            Suite::Fig1 => ExperimentSpec {
                trials: 20,
                methods: Vec::new(),
                n: 512,
                d: 16,
                signal: 0.9,
                ratios: vec![5.0, 2.0, 1.0, 0.5, 0.2],
                deltas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
                theta_per_delta: 0.0,
                ..base
            },
        }
    }

    /// Defaults for `suite`, then the file's keys, in order.
    pub fn from_file(suite: Suite, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut spec = ExperimentSpec::defaults(suite);
        spec.apply_text(&text, path)?;
        Ok(spec)
    }

    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ExpError::Config {
                origin: format!("{}:{}", path.display(), i + 1),
                message: format!("expected key = value, got {line:?}"),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| match e {
                ExpError::Config { message, .. } => ExpError::Config {
                    origin: format!("{}:{}", path.display(), i + 1),
                    message,
                },
                other => other,
            })?;
        }
        Ok(())
    }

    /// Parses `key=value` from the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| ExpError::Config {
            origin: "--set".into(),
            message: format!("expected key=value, got {kv:?}"),
        })?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| ExpError::Config {
            origin: "config".into(),
            message: format!("{key}: cannot parse {value:?} as {what}"),
        };
        fn list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
            v.split(',').map(|s| s.trim().parse().ok()).collect()
        }
        match key {
            "seed" => self.seed = value.parse().map_err(|_| bad("integer"))?,
            "trials" => self.trials = value.parse().map_err(|_| bad("integer"))?,
            "points" => {
                self.points = if value.is_empty() || value == "all" {
                    None
                } else {
                    Some(value.parse().map_err(|_| bad("integer"))?)
                }
            }
            "methods" => {
                self.methods = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|s| Method::parse(s.trim()))
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad("method list"))?
                }
            }
            "out" => self.out = PathBuf::from(value),
            "n" => self.n = value.parse().map_err(|_| bad("integer"))?,
            "d" => self.d = value.parse().map_err(|_| bad("integer"))?,
            "degree" => self.degree = value.parse().map_err(|_| bad("number"))?,
            "ratio" => self.ratio = value.parse().map_err(|_| bad("number"))?,
            "signal" => self.signal = value.parse().map_err(|_| bad("number"))?,
            "ratios" => self.ratios = list(value).ok_or_else(|| bad("number list"))?,
            "deltas" => self.deltas = list(value).ok_or_else(|| bad("number list"))?,
            "theta_per_delta" => self.theta_per_delta = value.parse().map_err(|_| bad("number"))?,
            "signals" => self.signals = list(value).ok_or_else(|| bad("number list"))?,
            "degrees" => self.degrees = list(value).ok_or_else(|| bad("number list"))?,
            "mc_samples" => self.mc_samples = value.parse().map_err(|_| bad("integer"))?,
            "mc_graphs" => self.mc_graphs = value.parse().map_err(|_| bad("integer"))?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad("integer"))?,
            "warmup_epochs" => self.warmup_epochs = value.parse().map_err(|_| bad("integer"))?,
            "lr" => self.lr = value.parse().map_err(|_| bad("number"))?,
            "lambda" => self.lambda = value.parse().map_err(|_| bad("number"))?,
            "k_moments" => self.k_moments = value.parse().map_err(|_| bad("integer"))?,
            "hidden" => {
                self.hidden = if value.is_empty() {
                    Vec::new()
                } else {
                    list(value).ok_or_else(|| bad("integer list"))?
                }
            }
            "val_fraction" => self.val_fraction = value.parse().map_err(|_| bad("number"))?,
            _ => {
                return Err(ExpError::Config {
                    origin: "config".into(),
                    message: format!("unknown key {key:?}"),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| {
            Err(ExpError::Config {
                origin: self.suite.name().into(),
                message,
            })
        };
        if self.trials == 0 {
            return fail("trials must be >= 1".into());
        }
        if self.points == Some(0) {
            return fail("points must be >= 1".into());
        }
        if self.ratios.is_empty() || self.deltas.is_empty() {
            return fail("ratio and delta grids must be nonempty".into());
        }
        if self.suite == Suite::Theory && (self.signals.is_empty() || self.degrees.is_empty()) {
            return fail("signal and degree grids must be nonempty".into());
        }
        if matches!(self.suite, Suite::SweepPq | Suite::SweepDelta | Suite::Correlate) && self.methods.is_empty() {
            return fail("methods must be nonempty".into());
        }
        Ok(())
    }

    /// Every key except `out`, one `key = value` line each, in fixed order.
    pub fn canonical(&self) -> String {
        fn join<T: ToString>(v: &[T]) -> String {
            v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
        }
        let methods: Vec<&str> = self.methods.iter().map(|m| m.name()).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("suite", self.suite.name().into());
        kv("seed", self.seed.to_string());
        kv("trials", self.trials.to_string());
        kv("points", self.points.map_or("all".into(), |p| p.to_string()));
        kv("methods", methods.join(","));
        kv("n", self.n.to_string());
        kv("d", self.d.to_string());
        kv("degree", self.degree.to_string());
        kv("ratio", self.ratio.to_string());
        kv("signal", self.signal.to_string());
        kv("ratios", join(&self.ratios));
        kv("deltas", join(&self.deltas));
        kv("theta_per_delta", self.theta_per_delta.to_string());
        kv("signals", join(&self.signals));
        kv("degrees", join(&self.degrees));
        kv("mc_samples", self.mc_samples.to_string());
        kv("mc_graphs", self.mc_graphs.to_string());
        kv("epochs", self.epochs.to_string());
        kv("warmup_epochs", self.warmup_epochs.to_string());
        kv("lr", self.lr.to_string());
        kv("lambda", self.lambda.to_string());
        kv("k_moments", self.k_moments.to_string());
        kv("hidden", join(&self.hidden));
        kv("val_fraction", self.val_fraction.to_string());
        s
    }

    /// First 16 hex digits of SHA-256 over [`canonical`](Self::canonical).
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn source_params(&self) -> CsbmParams {
        CsbmParams {
            n: self.n,
            d: self.d,
            degree: self.degree,
            ratio: self.ratio,
            signal: self.signal,
            ..CsbmParams::default()
        }
    }

    /// Target shift at `(ratio_target, delta)` with the coupled rotation.
    pub fn shift(&self, ratio_target: f64, delta: f64) -> ShiftSpec {
        ShiftSpec {
            delta,
            theta_deg: self.theta_per_delta * delta,
            ratio_target,
            degree_target: self.degree,
        }
    }

    /// Sweep grid `ratios × deltas`, truncated to `points`.
    pub fn sweep_points(&self) -> Vec<(f64, f64)> {
        let mut pts: Vec<(f64, f64)> = self
            .ratios
            .iter()
            .flat_map(|&r| self.deltas.iter().map(move |&d| (r, d)))
            .collect();
        if let Some(k) = self.points {
            pts.truncate(k);
        }
        pts
    }

    pub fn train_config(&self, method: Method, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            epochs: self.epochs,
            warmup_epochs: if method == Method::Erm { 0 } else { self.warmup_epochs },
            lr: self.lr,
            lambda: self.lambda,
            k_moments: self.k_moments,
            hidden: self.hidden.clone(),
            val_fraction: self.val_fraction,
            ..TrainConfig::for_method(method)
        }
    }
}
