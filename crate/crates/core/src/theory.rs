//! Closed-form conditional shift and expected target error for a linear
//! classifier on CSBM features (`f`) and on one-layer GCN embeddings (`f∘g`),
//! with Monte-Carlo oracles.
//!
//! All latent quantities are signed projections onto `μ/||μ||` in units of σ.
//! With `a′ = √D′·(r′−1)/(r′+1)·m` and `b = √D′·δ·m` the target latent class
//! centroids sit at `s1 = a′ − b` and `s_neg1 = −a′ − b`.

use rand::RngCore;
use rayon::prelude::*;

use crate::csbm::{generate_target, CsbmParams, ShiftSpec};
use crate::error::{Error, Result};
use crate::gnn::{normalize_adjacency, theory_gcn_1layer, AdjMode};
use crate::numerics::{dot, mean_std, norm, std_normal_cdf as phi, RngState};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftInputs {
    pub m: f64,
    pub delta: f64,
    pub r_src: f64,
    pub r_tgt: f64,
    pub d_src: f64,
    pub d_tgt: f64,
}

impl ShiftInputs {
    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0 && self.m.is_finite()) {
            return Err(Error::invalid(format!("m must be > 0, got {}", self.m)));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::invalid(format!("delta must be >= 0, got {}", self.delta)));
        }
        if !(self.r_src > 0.0 && self.r_tgt > 0.0) || !self.r_src.is_finite() || !self.r_tgt.is_finite() {
            return Err(Error::invalid("homophily ratios must be finite and > 0"));
        }
        if !(self.d_src >= 1.0 && self.d_tgt >= 1.0) || !self.d_src.is_finite() || !self.d_tgt.is_finite() {
            return Err(Error::invalid("average degrees must be finite and >= 1"));
        }
        Ok(())
    }

    fn a_tgt(&self) -> f64 {
        self.d_tgt.sqrt() * (self.r_tgt - 1.0) / (self.r_tgt + 1.0) * self.m
    }

    fn b_tgt(&self) -> f64 {
        self.d_tgt.sqrt() * self.delta * self.m
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosedFormReport {
    pub delta_yx: f64,
    pub delta_yh: f64,
    /// Set when the raw latent shift fell outside [0,1] and was clamped.
    pub delta_yh_clamped: bool,
    pub eps_t_f: f64,
    pub eps_t_fg: f64,
    /// δ = 0 errors; the latent one is taken at the target structure (r′, D′).
    pub eps_s_f: f64,
    pub eps_s_fg: f64,
    pub s1: f64,
    pub s_neg1: f64,
}

/// Signed target latent centroid projections `(s1, s_neg1)`.
pub fn latent_centroids(inp: &ShiftInputs) -> Result<(f64, f64)> {
    inp.validate()?;
    let (a, b) = (inp.a_tgt(), inp.b_tgt());
    Ok((a - b, -a - b))
}

/// Feature-level conditional shift `(Φ((1+δ)m) − Φ((1−δ)m))/2`.
pub fn conditional_shift_x(m: f64, delta: f64) -> Result<f64> {
    if !(m > 0.0) || !(delta >= 0.0) || !m.is_finite() || !delta.is_finite() {
        return Err(Error::invalid(format!("need m > 0 and delta >= 0 (got {m}, {delta})")));
    }
    Ok((phi((1.0 + delta) * m) - phi((1.0 - delta) * m)) / 2.0)
}

/// Latent conditional shift `(Φ(−s_neg1) − Φ(s1))/2`, clamped to [0,1]; the flag
/// reports whether clamping happened.
pub fn conditional_shift_h(inp: &ShiftInputs) -> Result<(f64, bool)> {
    let (s1, s_neg1) = latent_centroids(inp)?;
    let raw = (phi(-s_neg1) - phi(s1)) / 2.0;
    let clamped = raw.clamp(0.0, 1.0);
    Ok((clamped, clamped != raw))
}

/// Same formula with `||·||` read as a norm: `(Φ(|s_neg1|) − Φ(|s1|))/2`, unclamped.
pub fn conditional_shift_h_literal(inp: &ShiftInputs) -> Result<f64> {
    let (s1, s_neg1) = latent_centroids(inp)?;
    Ok((phi(s_neg1.abs()) - phi(s1.abs())) / 2.0)
}

/// Diagnostic: the latent shift and target error when the unit latent variance
/// is inflated by the neighbor-label mixing term `4m²h(1−h)`, `h = r′/(1+r′)`,
/// which a Bernoulli-edge graph adds on top of the feature noise.
pub fn mixing_corrected_h(inp: &ShiftInputs) -> Result<(f64, f64)> {
    let (s1, s_neg1) = latent_centroids(inp)?;
    let h = inp.r_tgt / (1.0 + inp.r_tgt);
    let s = (1.0 + 4.0 * inp.m * inp.m * h * (1.0 - h)).sqrt();
    let shift = ((phi(-s_neg1 / s) - phi(s1 / s)) / 2.0).clamp(0.0, 1.0);
    let error = 1.0 - (phi(-s_neg1 / s) + phi(s1 / s)) / 2.0;
    Ok((shift, error))
}

/// `1 − (Φ((1+δ)m) + Φ((1−δ)m))/2`.
pub fn expected_error_f(m: f64, delta: f64) -> Result<f64> {
    conditional_shift_x(m, delta)?;
    Ok(1.0 - (phi((1.0 + delta) * m) + phi((1.0 - delta) * m)) / 2.0)
}

/// `1 − (Φ(−s_neg1) + Φ(s1))/2`.
pub fn expected_error_fg(inp: &ShiftInputs) -> Result<f64> {
    let (s1, s_neg1) = latent_centroids(inp)?;
    Ok(1.0 - (phi(-s_neg1) + phi(s1)) / 2.0)
}

pub fn closed_form(inp: &ShiftInputs) -> Result<ClosedFormReport> {
    let (s1, s_neg1) = latent_centroids(inp)?;
    let (delta_yh, delta_yh_clamped) = conditional_shift_h(inp)?;
    let unshifted = ShiftInputs { delta: 0.0, ..*inp };
    Ok(ClosedFormReport {
        delta_yx: conditional_shift_x(inp.m, inp.delta)?,
        delta_yh,
        delta_yh_clamped,
        eps_t_f: expected_error_f(inp.m, inp.delta)?,
        eps_t_fg: expected_error_fg(inp)?,
        eps_s_f: expected_error_f(inp.m, 0.0)?,
        eps_s_fg: expected_error_fg(&unshifted)?,
        s1,
        s_neg1,
    })
}

/// How the target-optimal linear rule is oriented in the Monte-Carlo oracles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetRule {
    /// Keep the source normal `μ`; move the threshold to the target class midpoint.
    FixedNormal,
    /// Bayes rule under the target class means, flipping orientation when the
    /// positive class sits below the negative one. The source rule is likewise
    /// oriented by the sign of `r − 1`.
    BayesArgmax,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl McEstimate {
    fn from_counts(hits: u64, total: u64) -> Self {
        let p = hits as f64 / total as f64;
        McEstimate {
            estimate: p,
            std_error: (p * (1.0 - p) / total as f64).sqrt(),
            samples: total as usize,
        }
    }

    fn from_groups(vals: &[f64], samples: usize) -> Self {
        let (mean, std) = mean_std(vals);
        McEstimate {
            estimate: mean,
            std_error: std / (vals.len() as f64).sqrt(),
            samples,
        }
    }

    /// `|estimate − value| ≤ max(k·SE, floor)`.
    pub fn agrees_with(&self, value: f64, k: f64, floor: f64) -> bool {
        (self.estimate - value).abs() <= (k * self.std_error).max(floor)
    }
}

/// Disagreement between source- and target-optimal rules, and error of the source rule, on target draws.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McShiftAndError {
    pub shift: McEstimate,
    pub error: McEstimate,
}

const FEATURE_CHUNK: usize = 10_000;
const FEATURE_DIM: usize = 8;

/// Feature-level oracle: draws `x ~ N(target class mean, σ²I)` in a small
/// ambient dimension and compares the source rule `sign(μᵀx)` with the Bayes
/// rule for the shifted means.
pub fn mc_feature(inp: &ShiftInputs, n_samples: usize, rng: &mut RngState) -> Result<McShiftAndError> {
    inp.validate()?;
    if n_samples < 10_000 {
        return Err(Error::invalid(format!("need at least 1e4 samples, got {n_samples}")));
    }
    // μ along the first axis; only its projection matters, the rest is noise.
    let m = inp.m;
    let mean_pos = (1.0 - inp.delta) * m;
    let mean_neg = -(1.0 + inp.delta) * m;
    let mid = (mean_pos + mean_neg) / 2.0;
    let orient = if mean_pos >= mean_neg { 1.0 } else { -1.0 };
    let base = RngState::new(rng.next_u64());

    let chunks = n_samples.div_ceil(FEATURE_CHUNK);
    let counts: Vec<(u64, u64, u64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = base.fork(c as u64);
            let len = FEATURE_CHUNK.min(n_samples - c * FEATURE_CHUNK);
            let (mut disagree, mut wrong) = (0u64, 0u64);
            let mut x = [0.0f64; FEATURE_DIM];
            let mut w = [0.0f64; FEATURE_DIM];
            w[0] = m;
            for _ in 0..len {
                let y = if r.uniform() < 0.5 { 1.0 } else { -1.0 };
                for (k, xk) in x.iter_mut().enumerate() {
                    *xk = r.normal() + if k == 0 { if y > 0.0 { mean_pos } else { mean_neg } } else { 0.0 };
                }
                let t = dot(&w, &x) / norm(&w);
                let src = t.signum();
                let tgt = (orient * (t - mid)).signum();
                disagree += u64::from(src != tgt);
                wrong += u64::from(src != y);
            }
            (disagree, wrong, len as u64)
        })
        .collect();
    let (d, e, n) = counts.iter().fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    Ok(McShiftAndError {
        shift: McEstimate::from_counts(d, n),
        error: McEstimate::from_counts(e, n),
    })
}

pub fn mc_conditional_shift_feature(inp: &ShiftInputs, n_samples: usize, rng: &mut RngState) -> Result<McEstimate> {
    Ok(mc_feature(inp, n_samples, rng)?.shift)
}

/// Graph-level oracle: fresh target CSBM graphs, the parameter-free one-layer
/// GCN (neighbor mean rescaled by `√deg_i`), then the same two rules applied
/// to the projections `μᵀh/||μ||σ`. The target rule's threshold is the midpoint
/// of the empirical per-class mean projections in each graph. Standard errors
/// come from the spread of the per-graph estimates.
pub fn mc_graph(
    src: &CsbmParams,
    spec: &ShiftSpec,
    n_graphs: usize,
    rule: TargetRule,
    rng: &mut RngState,
) -> Result<McShiftAndError> {
    src.validate()?;
    if n_graphs < 10 {
        return Err(Error::invalid(format!("need at least 10 graphs, got {n_graphs}")));
    }
    let src_orient = match rule {
        TargetRule::BayesArgmax if src.ratio < 1.0 => -1.0,
        _ => 1.0,
    };
    let base = RngState::new(rng.next_u64());
    let per_graph: Vec<(f64, f64)> = (0..n_graphs)
        .into_par_iter()
        .map(|k| -> Result<(f64, f64)> {
            let mut r = base.fork(k as u64);
            let g = generate_target(src, spec, &mut r)?;
            let adj = normalize_adjacency(&g, AdjMode::RowMean);
            let h = theory_gcn_1layer(&adj, &g.features, &g.degrees())?;
            let unit_scale = 1.0 / (norm(&g.mu) * src.sigma);
            let t: Vec<f64> = (0..g.n).map(|i| dot(h.row(i), &g.mu) * unit_scale).collect();

            let (mut sp, mut np, mut sn, mut nn) = (0.0, 0usize, 0.0, 0usize);
            for (ti, &y) in t.iter().zip(&g.labels) {
                if y > 0 {
                    sp += ti;
                    np += 1;
                } else {
                    sn += ti;
                    nn += 1;
                }
            }
            if np == 0 || nn == 0 {
                return Err(Error::UndefinedMetric("target graph has a single class"));
            }
            let (cp, cn) = (sp / np as f64, sn / nn as f64);
            let mid = (cp + cn) / 2.0;
            let orient = match rule {
                TargetRule::FixedNormal => 1.0,
                TargetRule::BayesArgmax if cp >= cn => 1.0,
                TargetRule::BayesArgmax => -1.0,
            };
            let (mut disagree, mut wrong) = (0usize, 0usize);
            for (ti, &y) in t.iter().zip(&g.labels) {
                let s = src_orient * ti.signum();
                let tg = (orient * (ti - mid)).signum();
                disagree += usize::from(s != tg);
                wrong += usize::from(s != f64::from(y));
            }
            Ok((disagree as f64 / g.n as f64, wrong as f64 / g.n as f64))
        })
        .collect::<Result<_>>()?;
    let shifts: Vec<f64> = per_graph.iter().map(|p| p.0).collect();
    let errors: Vec<f64> = per_graph.iter().map(|p| p.1).collect();
    let samples = n_graphs * src.n;
    Ok(McShiftAndError {
        shift: McEstimate::from_groups(&shifts, samples),
        error: McEstimate::from_groups(&errors, samples),
    })
}

pub fn mc_conditional_shift_graph(
    src: &CsbmParams,
    spec: &ShiftSpec,
    n_graphs: usize,
    rng: &mut RngState,
) -> Result<McEstimate> {
    Ok(mc_graph(src, spec, n_graphs, TargetRule::FixedNormal, rng)?.shift)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorLevel {
    Feature { n_samples: usize },
    Latent { n_graphs: usize },
}

/// Misclassification rate of the source-optimal rule on target draws.
pub fn mc_expected_error(
    src: &CsbmParams,
    spec: &ShiftSpec,
    level: ErrorLevel,
    rng: &mut RngState,
) -> Result<McEstimate> {
    match level {
        ErrorLevel::Feature { n_samples } => {
            let inp = inputs_for(src, spec);
            Ok(mc_feature(&inp, n_samples, rng)?.error)
        }
        ErrorLevel::Latent { n_graphs } => Ok(mc_graph(src, spec, n_graphs, TargetRule::FixedNormal, rng)?.error),
    }
}

/// Closed-form inputs matching a generator configuration.
pub fn inputs_for(src: &CsbmParams, spec: &ShiftSpec) -> ShiftInputs {
    ShiftInputs {
        m: src.signal,
        delta: spec.delta,
        r_src: src.ratio,
        r_tgt: spec.ratio_target,
        d_src: src.degree,
        d_tgt: spec.degree_target,
    }
}
