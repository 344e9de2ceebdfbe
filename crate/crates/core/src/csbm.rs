//! Contextual stochastic block model graphs and their shifted targets.
//!
//! Features are `x_i = y_i·μ + σ·z_i` with `z_i ~ N(0, I_d)` and `||μ|| = m·σ`,
//! so the signal strength `m` is the only feature-side quantity the closed
//! forms depend on. Edges are Bernoulli(p) inside a class and Bernoulli(q)
//! across classes with `q = 2D / (n(1 + r))` and `p = r·q`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Matrix, RngState};

#[derive(Clone, Debug, PartialEq)]
pub struct CsbmParams {
    pub n: usize,
    pub d: usize,
    /// Target average degree D.
    pub degree: f64,
    /// Homophily ratio r = p/q.
    pub ratio: f64,
    /// Signal strength m = ||μ|| / σ.
    pub signal: f64,
    pub sigma: f64,
    /// Deterministic n/2 split when true, i.i.d. fair coin labels otherwise.
    pub balanced_labels: bool,
}

impl Default for CsbmParams {
    fn default() -> Self {
        CsbmParams {
            n: 128,
            d: 128,
            degree: 10.0,
            ratio: 5.0,
            signal: 1.0,
            sigma: 1.0,
            balanced_labels: true,
        }
    }
}

impl CsbmParams {
    pub fn q(&self) -> f64 {
        2.0 * self.degree / (self.n as f64 * (1.0 + self.ratio))
    }

    pub fn p(&self) -> f64 {
        self.ratio * self.q()
    }

    /// Expected edge homophily p/(p+q) = r/(1+r).
    pub fn expected_homophily(&self) -> f64 {
        self.ratio / (1.0 + self.ratio)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.n % 2 != 0 {
            return Err(Error::invalid(format!("n must be even and >= 2, got {}", self.n)));
        }
        if self.d == 0 {
            return Err(Error::invalid("d must be positive"));
        }
        if !(self.degree >= 1.0) || !self.degree.is_finite() {
            return Err(Error::invalid(format!("degree must be >= 1, got {}", self.degree)));
        }
        if !(self.ratio > 0.0) || !self.ratio.is_finite() {
            return Err(Error::invalid(format!("ratio must be > 0, got {}", self.ratio)));
        }
        if !(self.signal >= 0.0) || !self.signal.is_finite() {
            return Err(Error::invalid(format!("signal must be >= 0, got {}", self.signal)));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid(format!("sigma must be > 0, got {}", self.sigma)));
        }
        let (p, q) = (self.p(), self.q());
        if p > 1.0 || q > 1.0 {
            return Err(Error::invalid(format!(
                "edge probabilities out of range: p={p}, q={q} (n={}, D={}, r={})",
                self.n, self.degree, self.ratio
            )));
        }
        Ok(())
    }
}

/// Target-side perturbation of a CSBM source.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftSpec {
    /// Feature-mean translation fraction δ.
    pub delta: f64,
    /// Rotation of both class means, in degrees.
    pub theta_deg: f64,
    pub ratio_target: f64,
    pub degree_target: f64,
}

impl ShiftSpec {
    /// No shift relative to `src`.
    pub fn identity(src: &CsbmParams) -> Self {
        ShiftSpec {
            delta: 0.0,
            theta_deg: 0.0,
            ratio_target: src.ratio,
            degree_target: src.degree,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("delta", self.delta),
            ("theta", self.theta_deg),
            ("ratio_target", self.ratio_target),
            ("degree_target", self.degree_target),
        ] {
            if !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub n: usize,
    pub d: usize,
    pub features: Matrix,
    /// ±1 per node.
    pub labels: Vec<i8>,
    /// Undirected edges with `i < j`.
    pub edges: Vec<(usize, usize)>,
    /// Generating class-mean direction μ (before any target shift).
    pub mu: Vec<f64>,
}

impl Graph {
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    /// Sorted neighbor lists.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj.iter_mut().for_each(|a| a.sort_unstable());
        adj
    }

    pub fn mean_degree(&self) -> f64 {
        2.0 * self.edges.len() as f64 / self.n as f64
    }

    /// Structural checks: shapes, ±1 labels, no self-loops, sorted unique edges.
    pub fn validate(&self) -> Result<()> {
        if self.features.shape() != (self.n, self.d) {
            return Err(Error::dims(
                "graph features",
                format!("{}x{}", self.n, self.d),
                format!("{:?}", self.features.shape()),
            ));
        }
        if self.labels.len() != self.n {
            return Err(Error::dims("graph labels", self.n, self.labels.len()));
        }
        if self.mu.len() != self.d {
            return Err(Error::dims("graph mu", self.d, self.mu.len()));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l != 1 && l != -1) {
            return Err(Error::invalid(format!("label {l} is not ±1")));
        }
        if !self.features.is_finite() {
            return Err(Error::NonFinite("graph features".into()));
        }
        let mut seen = std::collections::HashSet::with_capacity(self.edges.len());
        for &(i, j) in &self.edges {
            if i >= j || j >= self.n {
                return Err(Error::invalid(format!("edge ({i}, {j}) must satisfy i < j < n")));
            }
            if !seen.insert((i, j)) {
                return Err(Error::invalid(format!("duplicate edge ({i}, {j})")));
            }
        }
        Ok(())
    }
}

/// Bernoulli(p) sampling over a stream of candidate pairs by geometric skips.
struct PairSkipper {
    log_q: f64,
}

impl PairSkipper {
    fn new(p: f64) -> Option<Self> {
        if p <= 0.0 {
            return None;
        }
        Some(PairSkipper {
            log_q: (-p).ln_1p(),
        })
    }

    /// Number of failures before the next success.
    fn skip(&self, rng: &mut RngState) -> u64 {
        if self.log_q == f64::NEG_INFINITY {
            return 0;
        }
        let u = 1.0 - rng.uniform(); // (0, 1]
        let k = (u.ln() / self.log_q).floor();
        if k >= u64::MAX as f64 {
            u64::MAX
        } else {
            k as u64
        }
    }
}

fn push_edge(edges: &mut Vec<(usize, usize)>, a: usize, b: usize) {
    edges.push((a.min(b), a.max(b)));
}

/// All unordered pairs inside `block`, each kept with probability `p`.
fn sample_within(block: &[usize], p: f64, rng: &mut RngState, edges: &mut Vec<(usize, usize)>) {
    let Some(skipper) = PairSkipper::new(p) else {
        return;
    };
    let h = block.len() as u64;
    let total = h * h.saturating_sub(1) / 2;
    // pair index t enumerates (a, b), a < b, row-major over a
    let mut t = skipper.skip(rng);
    let (mut a, mut row_start) = (0u64, 0u64);
    while t < total {
        while t >= row_start + (h - 1 - a) {
            row_start += h - 1 - a;
            a += 1;
        }
        let b = a + 1 + (t - row_start);
        push_edge(edges, block[a as usize], block[b as usize]);
        t = t.saturating_add(1).saturating_add(skipper.skip(rng));
    }
}

/// All pairs `(u, v)` with `u ∈ left`, `v ∈ right`, each kept with probability `p`.
fn sample_across(
    left: &[usize],
    right: &[usize],
    p: f64,
    rng: &mut RngState,
    edges: &mut Vec<(usize, usize)>,
) {
    let Some(skipper) = PairSkipper::new(p) else {
        return;
    };
    let w = right.len() as u64;
    let total = left.len() as u64 * w;
    let mut t = skipper.skip(rng);
    while t < total {
        push_edge(edges, left[(t / w) as usize], right[(t % w) as usize]);
        t = t.saturating_add(1).saturating_add(skipper.skip(rng));
    }
}

fn sample_labels(params: &CsbmParams, rng: &mut RngState) -> Vec<i8> {
    if params.balanced_labels {
        (0..params.n)
            .map(|i| if i < params.n / 2 { 1 } else { -1 })
            .collect()
    } else {
        (0..params.n)
            .map(|_| if rng.uniform() < 0.5 { 1 } else { -1 })
            .collect()
    }
}

/// Draws a CSBM graph with explicit class means for labels +1 and −1.
fn generate_with_means(
    params: &CsbmParams,
    mu_pos: &[f64],
    mu_neg: &[f64],
    mu: Vec<f64>,
    rng: &mut RngState,
) -> Result<Graph> {
    params.validate()?;
    let labels = sample_labels(params, rng);

    let mut features = Matrix::zeros(params.n, params.d);
    for (i, &y) in labels.iter().enumerate() {
        let mean = if y > 0 { mu_pos } else { mu_neg };
        for (v, m) in features.row_mut(i).iter_mut().zip(mean) {
            *v = m + params.sigma * rng.normal();
        }
    }

    let pos: Vec<usize> = (0..params.n).filter(|&i| labels[i] > 0).collect();
    let neg: Vec<usize> = (0..params.n).filter(|&i| labels[i] < 0).collect();
    let mut edges = Vec::with_capacity((params.n as f64 * params.degree * 0.6) as usize);
    sample_within(&pos, params.p(), rng, &mut edges);
    sample_within(&neg, params.p(), rng, &mut edges);
    sample_across(&pos, &neg, params.q(), rng, &mut edges);
    edges.sort_unstable();

    Ok(Graph {
        n: params.n,
        d: params.d,
        features,
        labels,
        edges,
        mu,
    })
}

/// Class-mean direction μ with i.i.d. N(0, 1/d) coordinates, rescaled to `||μ|| = m·σ`.
pub fn sample_mu(params: &CsbmParams, rng: &mut RngState) -> Vec<f64> {
    let scale = 1.0 / (params.d as f64).sqrt();
    loop {
        let mut mu: Vec<f64> = (0..params.d).map(|_| scale * rng.normal()).collect();
        let len = norm(&mu);
        if len > 0.0 {
            let k = params.signal * params.sigma / len;
            mu.iter_mut().for_each(|v| *v *= k);
            return mu;
        }
    }
}

pub fn generate_csbm(params: &CsbmParams, rng: &mut RngState) -> Result<Graph> {
    params.validate()?;
    let mu = sample_mu(params, rng);
    let neg: Vec<f64> = mu.iter().map(|v| -v).collect();
    generate_with_means(params, &mu.clone(), &neg, mu, rng)
}

/// Shifted class means: `(1−δ)μ` and `−(1+δ)μ`, both rotated by θ in the plane
/// spanned by μ and one random unit vector orthogonal to μ.
pub fn shift_mean(mu: &[f64], spec: &ShiftSpec, rng: &mut RngState) -> Result<(Vec<f64>, Vec<f64>)> {
    spec.validate()?;
    let len = norm(mu);
    if len == 0.0 {
        return Err(Error::invalid("shift_mean needs a nonzero mu"));
    }
    let d = mu.len();
    let theta = spec.theta_deg.to_radians();

    // rotated μ = cos θ·μ + sin θ·||μ||·u
    let mut rotated = mu.to_vec();
    if d >= 2 {
        let u = random_orthogonal_unit(mu, rng);
        let (s, c) = theta.sin_cos();
        for (r, (m, uk)) in rotated.iter_mut().zip(mu.iter().zip(&u)) {
            *r = c * m + s * len * uk;
        }
    } else if spec.theta_deg != 0.0 {
        return Err(Error::invalid("rotation needs d >= 2"));
    }

    let pos = rotated.iter().map(|v| (1.0 - spec.delta) * v).collect();
    let neg = rotated.iter().map(|v| -(1.0 + spec.delta) * v).collect();
    Ok((pos, neg))
}

fn random_orthogonal_unit(mu: &[f64], rng: &mut RngState) -> Vec<f64> {
    let mu_sq = dot(mu, mu);
    loop {
        let mut u: Vec<f64> = (0..mu.len()).map(|_| rng.normal()).collect();
        let proj = dot(&u, mu) / mu_sq;
        u.iter_mut().zip(mu).for_each(|(a, m)| *a -= proj * m);
        let len = norm(&u);
        if len > 1e-8 {
            u.iter_mut().for_each(|a| *a /= len);
            return u;
        }
    }
}

/// Source graph from `src` and a target sharing μ, shifted per `spec`.
pub fn generate_shifted_pair(
    src: &CsbmParams,
    spec: &ShiftSpec,
    rng: &mut RngState,
) -> Result<(Graph, Graph)> {
    src.validate()?;
    let tgt = CsbmParams {
        ratio: spec.ratio_target,
        degree: spec.degree_target,
        ..src.clone()
    };
    tgt.validate()?;

    let mu = sample_mu(src, rng);
    let neg: Vec<f64> = mu.iter().map(|v| -v).collect();
    let source = generate_with_means(src, &mu, &neg, mu.clone(), rng)?;
    let (mu_pos, mu_neg) = shift_mean(&mu, spec, rng)?;
    let target = generate_with_means(&tgt, &mu_pos, &mu_neg, mu, rng)?;
    Ok((source, target))
}

/// Only the target side of [`generate_shifted_pair`] (different random stream).
pub fn generate_target(src: &CsbmParams, spec: &ShiftSpec, rng: &mut RngState) -> Result<Graph> {
    src.validate()?;
    let mu = sample_mu(src, rng);
    generate_target_from_mu(src, &mu, spec, rng)
}

/// Target graph for a given source μ; with [`ShiftSpec::identity`] this is a
/// fresh draw from the source distribution.
pub fn generate_target_from_mu(src: &CsbmParams, mu: &[f64], spec: &ShiftSpec, rng: &mut RngState) -> Result<Graph> {
    let tgt = CsbmParams {
        ratio: spec.ratio_target,
        degree: spec.degree_target,
        ..src.clone()
    };
    tgt.validate()?;
    if mu.len() != src.d {
        return Err(Error::dims("mu length", src.d, mu.len()));
    }
    let (mu_pos, mu_neg) = shift_mean(mu, spec, rng)?;
    generate_with_means(&tgt, &mu_pos, &mu_neg, mu.to_vec(), rng)
}

/// Fraction of edges joining same-label nodes.
pub fn edge_homophily(g: &Graph) -> Result<f64> {
    if g.edges.is_empty() {
        return Err(Error::UndefinedMetric("edge homophily of an edgeless graph"));
    }
    let same = g
        .edges
        .iter()
        .filter(|&&(i, j)| g.labels[i] == g.labels[j])
        .count();
    Ok(same as f64 / g.edges.len() as f64)
}

/// Plain-text graph format:
///
/// ```text
/// n d
/// <n labels, ±1>
/// <n feature rows, d values each>
/// E <edge count>
/// <one "i j" line per edge, i < j>
/// mu <d values>
/// ```
pub fn format_graph(g: &Graph) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} {}", g.n, g.d);
    out.push_str(&join(g.labels.iter()));
    out.push('\n');
    for i in 0..g.n {
        out.push_str(&join(g.features.row(i).iter()));
        out.push('\n');
    }
    let _ = writeln!(out, "E {}", g.edges.len());
    for (i, j) in &g.edges {
        let _ = writeln!(out, "{i} {j}");
    }
    let _ = writeln!(out, "mu {}", join(g.mu.iter()));
    out
}

fn join<T: std::fmt::Display>(items: impl Iterator<Item = T>) -> String {
    let mut s = String::new();
    for (k, v) in items.enumerate() {
        if k > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{v}");
    }
    s
}

pub fn write_graph(g: &Graph, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, format_graph(g))?;
    Ok(())
}

pub fn read_graph(path: impl AsRef<Path>) -> Result<Graph> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_graph(&text, path)
}

struct LineReader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    path: PathBuf,
    last: usize,
}

impl<'a> LineReader<'a> {
    fn err(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line,
            message: message.into(),
        }
    }

    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        match self.lines.next() {
            Some((k, l)) => {
                self.last = k + 1;
                Ok((k + 1, l))
            }
            None => Err(self.err(self.last + 1, format!("unexpected end of file, expected {what}"))),
        }
    }

    fn numbers<T: std::str::FromStr>(&self, line: usize, text: &str, count: usize) -> Result<Vec<T>> {
        let vals: Vec<T> = text
            .split_whitespace()
            .map(|t| t.parse::<T>().map_err(|_| self.err(line, format!("bad number {t:?}"))))
            .collect::<Result<_>>()?;
        if vals.len() != count {
            return Err(self.err(line, format!("expected {count} values, found {}", vals.len())));
        }
        Ok(vals)
    }
}

pub fn parse_graph(text: &str, path: impl AsRef<Path>) -> Result<Graph> {
    let mut rd = LineReader {
        lines: text.lines().enumerate(),
        path: path.as_ref().to_path_buf(),
        last: 0,
    };

    let (ln, header) = rd.next("header \"n d\"")?;
    let dims: Vec<usize> = rd.numbers(ln, header, 2)?;
    let (n, d) = (dims[0], dims[1]);

    let (ln, label_line) = rd.next("labels")?;
    let labels: Vec<i8> = rd.numbers(ln, label_line, n)?;
    if labels.iter().any(|&l| l != 1 && l != -1) {
        return Err(rd.err(ln, "labels must be -1 or 1"));
    }

    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let (ln, row) = rd.next("feature row")?;
        data.extend(rd.numbers::<f64>(ln, row, d)?);
    }
    let features = Matrix::from_vec(n, d, data)?;

    let (ln, edge_header) = rd.next("edge header \"E <count>\"")?;
    let count = match edge_header.split_whitespace().collect::<Vec<_>>().as_slice() {
        ["E", c] => c
            .parse::<usize>()
            .map_err(|_| rd.err(ln, format!("bad edge count {c:?}")))?,
        _ => return Err(rd.err(ln, "expected \"E <count>\"")),
    };
    let mut edges = Vec::with_capacity(count);
    let mut seen = std::collections::HashSet::with_capacity(count);
    for _ in 0..count {
        let (ln, e) = rd.next("edge")?;
        let ij: Vec<usize> = rd.numbers(ln, e, 2)?;
        if ij[0] >= ij[1] || ij[1] >= n {
            return Err(rd.err(ln, format!("edge ({}, {}) must satisfy i < j < n", ij[0], ij[1])));
        }
        if !seen.insert((ij[0], ij[1])) {
            return Err(rd.err(ln, format!("duplicate edge ({}, {})", ij[0], ij[1])));
        }
        edges.push((ij[0], ij[1]));
    }

    let (ln, mu_line) = rd.next("mu line")?;
    let mu = match mu_line.strip_prefix("mu") {
        Some(rest) if d == 0 || rest.starts_with(char::is_whitespace) => rd.numbers(ln, rest, d)?,
        _ => return Err(rd.err(ln, "expected \"mu <values>\"")),
    };
    if let Some((ln, extra)) = rd.lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(rd.err(ln + 1, format!("trailing content {extra:?}")));
    }

    let g = Graph {
        n,
        d,
        features,
        labels,
        edges,
        mu,
    };
    g.validate()?;
    Ok(g)
}
