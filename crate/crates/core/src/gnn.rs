//! GCN / MLP encoders with a linear softmax head, exact reverse-mode gradients
//! for the source cross-entropy plus the fixed-plan transport term, and Adam.

use std::fmt::Write as _;
use std::path::Path;

use crate::csbm::Graph;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngState};
use crate::ot::{TransportPlan, CE_CLAMP};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdjMode {
    /// `D̃^{-1/2}(A+I)D̃^{-1/2}`.
    SymSelfLoop,
    /// Mean over neighbors; isolated nodes keep their own row.
    RowMean,
    Identity,
}

/// Sparse normalized propagation operator in CSR layout.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyOp {
    n: usize,
    mode: AdjMode,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl AdjacencyOp {
    pub fn identity(n: usize) -> Self {
        AdjacencyOp {
            n,
            mode: AdjMode::Identity,
            row_ptr: (0..=n).collect(),
            cols: (0..n).collect(),
            vals: vec![1.0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mode(&self) -> AdjMode {
        self.mode
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        for i in 0..self.n {
            let (c, v) = self.row(i);
            for (&j, &w) in c.iter().zip(v) {
                m[(i, j)] += w;
            }
        }
        m
    }

    /// `Â·X`.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.n {
            return Err(Error::dims("adjacency apply", self.n, x.rows()));
        }
        if self.mode == AdjMode::Identity {
            return Ok(x.clone());
        }
        let mut out = Matrix::zeros(self.n, x.cols());
        for i in 0..self.n {
            let (c, v) = self.row(i);
            let dst = out.row_mut(i);
            for (&j, &w) in c.iter().zip(v) {
                dst.iter_mut().zip(x.row(j)).for_each(|(o, xv)| *o += w * xv);
            }
        }
        Ok(out)
    }

    /// `Âᵀ·X`.
    pub fn apply_t(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.n {
            return Err(Error::dims("adjacency apply_t", self.n, x.rows()));
        }
        if self.mode == AdjMode::Identity {
            return Ok(x.clone());
        }
        let mut out = Matrix::zeros(self.n, x.cols());
        for i in 0..self.n {
            let (c, v) = self.row(i);
            let src = x.row(i);
            for (&j, &w) in c.iter().zip(v) {
                out.row_mut(j).iter_mut().zip(src).for_each(|(o, xv)| *o += w * xv);
            }
        }
        Ok(out)
    }
}

pub fn normalize_adjacency(g: &Graph, mode: AdjMode) -> AdjacencyOp {
    let n = g.n;
    if mode == AdjMode::Identity {
        return AdjacencyOp::identity(n);
    }
    let nbrs = g.neighbors();
    let deg: Vec<f64> = nbrs.iter().map(|v| v.len() as f64).collect();
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    row_ptr.push(0);
    for i in 0..n {
        match mode {
            AdjMode::SymSelfLoop => {
                let di = deg[i] + 1.0;
                // neighbor lists are sorted; splice the self-loop in order
                let mut pushed_self = false;
                for &j in &nbrs[i] {
                    if !pushed_self && j > i {
                        cols.push(i);
                        vals.push(1.0 / di);
                        pushed_self = true;
                    }
                    cols.push(j);
                    vals.push(1.0 / (di * (deg[j] + 1.0)).sqrt());
                }
                if !pushed_self {
                    cols.push(i);
                    vals.push(1.0 / di);
                }
            }
            AdjMode::RowMean => {
                if nbrs[i].is_empty() {
                    cols.push(i);
                    vals.push(1.0);
                } else {
                    let w = 1.0 / deg[i];
                    for &j in &nbrs[i] {
                        cols.push(j);
                        vals.push(w);
                    }
                }
            }
            AdjMode::Identity => unreachable!(),
        }
        row_ptr.push(cols.len());
    }
    AdjacencyOp {
        n,
        mode,
        row_ptr,
        cols,
        vals,
    }
}

/// One-layer aggregation used by the latent-space theory: `H_i = √max(deg_i,1) · (Â_mean X)_i`.
pub fn theory_gcn_1layer(adj: &AdjacencyOp, x: &Matrix, degrees: &[usize]) -> Result<Matrix> {
    if adj.mode() != AdjMode::RowMean {
        return Err(Error::invalid("theory_gcn_1layer needs a row-mean adjacency"));
    }
    if degrees.len() != adj.n() {
        return Err(Error::dims("theory_gcn_1layer degrees", adj.n(), degrees.len()));
    }
    let mut h = adj.apply(x)?;
    for (i, &d) in degrees.iter().enumerate() {
        let s = (d.max(1) as f64).sqrt();
        h.row_mut(i).iter_mut().for_each(|v| *v *= s);
    }
    Ok(h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            _ => Err(Error::invalid(format!("unknown activation {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Gcn,
    /// Same stack without propagation.
    Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnModel {
    kind: ModelKind,
    layers: Vec<Matrix>,
    activations: Vec<Activation>,
    head_w: Matrix,
    head_b: Vec<f64>,
}

/// Gradients laid out exactly like the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Matrix>,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &GcnModel) -> Self {
        Gradients {
            layers: model.layers.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect(),
            head_w: Matrix::zeros(model.head_w.rows(), model.head_w.cols()),
            head_b: vec![0.0; model.head_b.len()],
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_scaled(b, 1.0)?;
        }
        self.head_w.add_scaled(&other.head_w, 1.0)?;
        self.head_b.iter_mut().zip(&other.head_b).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.layers.iter().map(|m| m.data()).collect();
        v.push(self.head_w.data());
        v.push(&self.head_b);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

impl GcnModel {
    /// Glorot-uniform weights, zero head bias.
    pub fn new(
        kind: ModelKind,
        in_dim: usize,
        hidden: &[usize],
        activation: Activation,
        n_classes: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        if in_dim == 0 || n_classes < 2 || hidden.contains(&0) {
            return Err(Error::invalid("model dims must be positive and n_classes >= 2"));
        }
        let mut glorot = |r: usize, c: usize| {
            let a = (6.0 / (r + c) as f64).sqrt();
            let data = (0..r * c).map(|_| (2.0 * rng.uniform() - 1.0) * a).collect();
            Matrix::from_vec(r, c, data).expect("shape")
        };
        let mut layers = Vec::with_capacity(hidden.len());
        let mut prev = in_dim;
        for &h in hidden {
            layers.push(glorot(prev, h));
            prev = h;
        }
        let head_w = glorot(prev, n_classes);
        Ok(GcnModel {
            kind,
            activations: vec![activation; layers.len()],
            layers,
            head_w,
            head_b: vec![0.0; n_classes],
        })
    }

    pub fn from_parts(
        kind: ModelKind,
        layers: Vec<Matrix>,
        activations: Vec<Activation>,
        head_w: Matrix,
        head_b: Vec<f64>,
    ) -> Result<Self> {
        if layers.len() != activations.len() {
            return Err(Error::dims("activations", layers.len(), activations.len()));
        }
        for w in layers.windows(2) {
            if w[0].cols() != w[1].rows() {
                return Err(Error::dims("layer chain", w[0].cols(), w[1].rows()));
            }
        }
        if let Some(last) = layers.last() {
            if last.cols() != head_w.rows() {
                return Err(Error::dims("head input", last.cols(), head_w.rows()));
            }
        }
        if head_w.cols() != head_b.len() {
            return Err(Error::dims("head bias", head_w.cols(), head_b.len()));
        }
        let m = GcnModel {
            kind,
            layers,
            activations,
            head_w,
            head_b,
        };
        if !m.params().iter().all(|s| s.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("model weights".into()));
        }
        Ok(m)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn head_w(&self) -> &Matrix {
        &self.head_w
    }

    pub fn head_b(&self) -> &[f64] {
        &self.head_b
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().unwrap_or(&self.head_w).rows()
    }

    pub fn n_classes(&self) -> usize {
        self.head_b.len()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.layers.iter().map(|m| m.data()).collect();
        v.push(self.head_w.data());
        v.push(&self.head_b);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self.layers.iter_mut().map(|m| m.data_mut()).collect();
        v.push(self.head_w.data_mut());
        v.push(&mut self.head_b);
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|s| s.len()).sum()
    }
}

/// Per-layer inputs and pre-activations from one forward pass.
#[derive(Clone, Debug)]
pub struct TapeCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    embed: Matrix,
}

impl TapeCache {
    /// Output of the last propagation layer (the input features when there is none).
    pub fn embedding(&self) -> &Matrix {
        &self.embed
    }
}

pub fn forward(model: &GcnModel, adj: &AdjacencyOp, x: &Matrix) -> Result<(Matrix, TapeCache)> {
    if x.cols() != model.in_dim() {
        return Err(Error::dims("forward features", model.in_dim(), x.cols()));
    }
    if model.kind == ModelKind::Gcn && adj.n() != x.rows() {
        return Err(Error::dims("forward adjacency", x.rows(), adj.n()));
    }
    let mut inputs = Vec::with_capacity(model.layers.len());
    let mut pre = Vec::with_capacity(model.layers.len());
    let mut h = x.clone();
    for (w, act) in model.layers.iter().zip(&model.activations) {
        let hw = h.matmul(w)?;
        let p = match model.kind {
            ModelKind::Gcn => adj.apply(&hw)?,
            ModelKind::Mlp => hw,
        };
        let next = p.map(|v| act.apply(v));
        inputs.push(std::mem::replace(&mut h, next));
        pre.push(p);
    }
    let mut logits = h.matmul(&model.head_w)?;
    for i in 0..logits.rows() {
        logits.row_mut(i).iter_mut().zip(&model.head_b).for_each(|(z, b)| *z += b);
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("forward logits".into()));
    }
    Ok((logits, TapeCache { inputs, pre, embed: h }))
}

/// Reverse pass for upstream gradients on the logits and, optionally, on the embedding.
pub fn backward(
    model: &GcnModel,
    adj: &AdjacencyOp,
    cache: &TapeCache,
    d_logits: &Matrix,
    d_embed: Option<&Matrix>,
) -> Result<Gradients> {
    let n = cache.embed.rows();
    if d_logits.shape() != (n, model.n_classes()) {
        return Err(Error::dims(
            "backward d_logits",
            format!("{:?}", (n, model.n_classes())),
            format!("{:?}", d_logits.shape()),
        ));
    }
    let head_w = cache.embed.t_matmul(d_logits)?;
    let head_b = d_logits.col_means().iter().map(|m| m * n as f64).collect();
    let mut dh = d_logits.matmul_t(&model.head_w)?;
    if let Some(de) = d_embed {
        dh.add_scaled(de, 1.0)?;
    }
    let mut layers = vec![Matrix::zeros(0, 0); model.layers.len()];
    for k in (0..model.layers.len()).rev() {
        let act = model.activations[k];
        let mut dp = dh;
        dp.data_mut()
            .iter_mut()
            .zip(cache.pre[k].data())
            .for_each(|(g, p)| *g *= act.derivative(*p));
        let g = match model.kind {
            ModelKind::Gcn => adj.apply_t(&dp)?,
            ModelKind::Mlp => dp,
        };
        layers[k] = cache.inputs[k].t_matmul(&g)?;
        dh = if k > 0 { g.matmul_t(&model.layers[k])? } else { Matrix::zeros(0, 0) };
    }
    Ok(Gradients {
        layers,
        head_w,
        head_b,
    })
}

pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        row.iter_mut().for_each(|v| {
            *v = (*v - m).exp();
            s += *v;
        });
        row.iter_mut().for_each(|v| *v /= s);
    }
    p
}

/// Class index for a ±1 label: `-1 → 0`, `+1 → 1`.
#[inline]
pub fn class_index(label: i8) -> usize {
    usize::from(label > 0)
}

/// Mean cross-entropy over `idx` and its gradient on the logits (zero outside `idx`).
pub fn cross_entropy(logits: &Matrix, classes: &[usize], idx: &[usize]) -> Result<(f64, Matrix)> {
    if classes.len() != logits.rows() {
        return Err(Error::dims("cross_entropy labels", logits.rows(), classes.len()));
    }
    if idx.is_empty() {
        return Err(Error::invalid("cross_entropy over an empty index set"));
    }
    let k = 1.0 / idx.len() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for &i in idx {
        let z = logits.row(i);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - z[classes[i]];
        let g = grad.row_mut(i);
        for (c, gc) in g.iter_mut().enumerate() {
            *gc = k * ((z[c] - lse).exp() - f64::from(c == classes[i]));
        }
    }
    Ok((loss * k, grad))
}

/// Weights for the transport penalty `λ·Σγ_ij[α||h_i − h_j||² + β·CE(y_i, p_j)]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransportWeights {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl TransportWeights {
    pub fn is_active(&self) -> bool {
        self.lambda != 0.0 && (self.alpha != 0.0 || self.beta != 0.0)
    }
}

/// Fixed-plan transport term between source nodes `src_nodes` and target nodes `tgt_nodes`.
#[derive(Clone, Copy, Debug)]
pub struct TransportTerm<'a> {
    pub plan: &'a TransportPlan,
    pub src_nodes: &'a [usize],
    pub tgt_nodes: &'a [usize],
    pub weights: TransportWeights,
}

pub struct TransportGrads {
    /// `Σγ_ij[α||h_i − h_j||² + β·CE]`, before the λ factor.
    pub value: f64,
    pub d_embed_src: Matrix,
    pub d_embed_tgt: Matrix,
    pub d_logits_tgt: Matrix,
}

/// Value and gradients of the λ-weighted transport term with `γ` held constant.
pub fn transport_grads(
    embed_src: &Matrix,
    classes_src: &[usize],
    embed_tgt: &Matrix,
    logits_tgt: &Matrix,
    term: &TransportTerm<'_>,
) -> Result<TransportGrads> {
    let nb = term.plan.n();
    if term.src_nodes.len() != nb || term.tgt_nodes.len() != nb {
        return Err(Error::dims("transport batch", nb, term.src_nodes.len().max(term.tgt_nodes.len())));
    }
    let TransportWeights { lambda, alpha, beta } = term.weights;
    let probs = softmax_rows(logits_tgt);
    let mut d_embed_src = Matrix::zeros(embed_src.rows(), embed_src.cols());
    let mut d_embed_tgt = Matrix::zeros(embed_tgt.rows(), embed_tgt.cols());
    let mut d_logits_tgt = Matrix::zeros(logits_tgt.rows(), logits_tgt.cols());
    let mut value = 0.0;
    for (a, b, gamma) in term.plan.entries() {
        let (i, j) = (term.src_nodes[a], term.tgt_nodes[b]);
        if alpha != 0.0 {
            let diff: Vec<f64> = embed_src.row(i).iter().zip(embed_tgt.row(j)).map(|(x, y)| x - y).collect();
            value += gamma * alpha * diff.iter().map(|v| v * v).sum::<f64>();
            let k = 2.0 * lambda * alpha * gamma;
            d_embed_src.row_mut(i).iter_mut().zip(&diff).for_each(|(g, v)| *g += k * v);
            d_embed_tgt.row_mut(j).iter_mut().zip(&diff).for_each(|(g, v)| *g -= k * v);
        }
        if beta != 0.0 {
            let y = classes_src[i];
            let p = probs.row(j);
            value += gamma * beta * -p[y].max(CE_CLAMP).ln();
            if p[y] > CE_CLAMP {
                let k = lambda * beta * gamma;
                for (c, g) in d_logits_tgt.row_mut(j).iter_mut().enumerate() {
                    *g += k * (p[c] - f64::from(c == y));
                }
            }
        }
    }
    Ok(TransportGrads {
        value,
        d_embed_src,
        d_embed_tgt,
        d_logits_tgt,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct Domain<'a> {
    pub adj: &'a AdjacencyOp,
    pub x: &'a Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub source_ce: f64,
    /// Unweighted transport value; 0 when the term is inactive.
    pub transport: f64,
}

/// Source CE on `train_idx` plus the optional transport term, with gradients
/// through both branches.
pub fn loss_and_grads(
    model: &GcnModel,
    src: Domain<'_>,
    classes_src: &[usize],
    train_idx: &[usize],
    tgt: Option<Domain<'_>>,
    term: Option<&TransportTerm<'_>>,
) -> Result<(LossParts, Gradients)> {
    let (logits_s, cache_s) = forward(model, src.adj, src.x)?;
    let (ce, d_logits_s) = cross_entropy(&logits_s, classes_src, train_idx)?;
    let mut parts = LossParts {
        total: ce,
        source_ce: ce,
        transport: 0.0,
    };
    let active = term.filter(|t| t.weights.is_active());
    let grads = match (active, tgt) {
        (Some(term), Some(tgt)) => {
            let (logits_t, cache_t) = forward(model, tgt.adj, tgt.x)?;
            let tg = transport_grads(cache_s.embedding(), classes_src, cache_t.embedding(), &logits_t, term)?;
            parts.transport = tg.value;
            parts.total += term.weights.lambda * tg.value;
            let mut g = backward(model, src.adj, &cache_s, &d_logits_s, Some(&tg.d_embed_src))?;
            let gt = backward(model, tgt.adj, &cache_t, &tg.d_logits_tgt, Some(&tg.d_embed_tgt))?;
            g.add_assign(&gt)?;
            g
        }
        (Some(_), None) => return Err(Error::invalid("transport term given without a target domain")),
        _ => backward(model, src.adj, &cache_s, &d_logits_s, None)?,
    };
    if !parts.total.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {} (source CE {}, transport {})",
            parts.total, parts.source_ce, parts.transport
        )));
    }
    Ok((parts, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(model: &GcnModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|s| vec![0.0; s.len()]).collect();
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

pub fn adam_step(model: &mut GcnModel, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<()> {
    let gs = grads.slices();
    let shapes_ok = {
        let ps = model.params();
        ps.len() == gs.len() && ps.iter().zip(&gs).all(|(p, g)| p.len() == g.len())
    };
    if !shapes_ok || state.m.len() != gs.len() {
        return Err(Error::invalid("gradient / optimizer shapes do not match the model"));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, g), m), v) in model
        .params_mut()
        .into_iter()
        .zip(&gs)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for k in 0..p.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

/// `|a − b| / max(|a|, |b|, 1e-5)`; the floor keeps near-zero gradients from
/// amplifying finite-difference noise.
pub fn gradient_rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Worst relative error between `f`'s analytic gradients and central
/// differences with the given step, over every parameter.
pub fn max_gradient_rel_error(
    model: &GcnModel,
    step: f64,
    f: impl Fn(&GcnModel) -> Result<(f64, Gradients)>,
) -> Result<f64> {
    let (_, analytic) = f(model)?;
    let a = analytic.slices();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for s in 0..a.len() {
        for k in 0..a[s].len() {
            let orig = model.params()[s][k];
            probe.params_mut()[s][k] = orig + step;
            let up = f(&probe)?.0;
            probe.params_mut()[s][k] = orig - step;
            let down = f(&probe)?.0;
            probe.params_mut()[s][k] = orig;
            worst = worst.max(gradient_rel_error(a[s][k], (up - down) / (2.0 * step)));
        }
    }
    Ok(worst)
}

const CHECKPOINT_MAGIC: &str = "gcshift-model v1";

fn write_matrix(out: &mut String, m: &Matrix) {
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
}

pub fn format_model(model: &GcnModel) -> String {
    let mut out = String::new();
    let kind = match model.kind {
        ModelKind::Gcn => "gcn",
        ModelKind::Mlp => "mlp",
    };
    let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
    let _ = writeln!(out, "kind {kind}");
    let _ = writeln!(out, "layers {}", model.layers.len());
    for (w, a) in model.layers.iter().zip(&model.activations) {
        let _ = writeln!(out, "layer {} {} {}", a.name(), w.rows(), w.cols());
        write_matrix(&mut out, w);
    }
    let _ = writeln!(out, "head {} {}", model.head_w.rows(), model.head_w.cols());
    write_matrix(&mut out, &model.head_w);
    let bias: Vec<String> = model.head_b.iter().map(|v| v.to_string()).collect();
    let _ = writeln!(out, "bias {}", bias.join(" "));
    out
}

pub fn save_model(model: &GcnModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, format_model(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<GcnModel> {
    let path = path.as_ref();
    parse_model(&std::fs::read_to_string(path)?, path)
}

struct Cursor<'a> {
    path: &'a Path,
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line,
            message: message.into(),
        }
    }

    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        match self.lines.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok((i + 1, l))
            }
            None => Err(self.err(self.last + 1, format!("unexpected end of file, expected {what}"))),
        }
    }

    fn floats(&self, line: usize, s: &str, want: usize) -> Result<Vec<f64>> {
        let v = s
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| self.err(line, format!("bad number {t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if v.len() != want {
            return Err(self.err(line, format!("expected {want} values, found {}", v.len())));
        }
        Ok(v)
    }

    fn count(&self, line: usize, t: Option<&str>) -> Result<usize> {
        t.and_then(|t| t.parse().ok()).ok_or_else(|| self.err(line, "expected a count"))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (i, l) = self.next("matrix row")?;
            data.extend(self.floats(i, l, cols)?);
        }
        Ok(Matrix::from_vec(rows, cols, data).expect("shape"))
    }
}

pub fn parse_model(text: &str, path: impl AsRef<Path>) -> Result<GcnModel> {
    let mut cur = Cursor {
        path: path.as_ref(),
        lines: text.lines().enumerate(),
        last: 0,
    };
    let (i, magic) = cur.next("header")?;
    if magic.trim() != CHECKPOINT_MAGIC {
        return Err(cur.err(i, format!("expected {CHECKPOINT_MAGIC:?}")));
    }
    let (i, kind_line) = cur.next("kind")?;
    let kind = match kind_line.split_whitespace().collect::<Vec<_>>()[..] {
        ["kind", "gcn"] => ModelKind::Gcn,
        ["kind", "mlp"] => ModelKind::Mlp,
        _ => return Err(cur.err(i, "expected `kind gcn|mlp`")),
    };
    let (i, l) = cur.next("layer count")?;
    let mut tok = l.split_whitespace();
    if tok.next() != Some("layers") {
        return Err(cur.err(i, "expected `layers <count>`"));
    }
    let n_layers = cur.count(i, tok.next())?;

    let mut layers = Vec::new();
    let mut acts = Vec::new();
    for _ in 0..n_layers {
        let (i, l) = cur.next("layer header")?;
        let t: Vec<&str> = l.split_whitespace().collect();
        if t.len() != 4 || t[0] != "layer" {
            return Err(cur.err(i, "expected `layer <activation> <rows> <cols>`"));
        }
        acts.push(Activation::parse(t[1]).map_err(|e| cur.err(i, e.to_string()))?);
        let (r, c) = (cur.count(i, Some(t[2]))?, cur.count(i, Some(t[3]))?);
        layers.push(cur.matrix(r, c)?);
    }
    let (i, l) = cur.next("head header")?;
    let t: Vec<&str> = l.split_whitespace().collect();
    if t.len() != 3 || t[0] != "head" {
        return Err(cur.err(i, "expected `head <rows> <cols>`"));
    }
    let (r, c) = (cur.count(i, Some(t[1]))?, cur.count(i, Some(t[2]))?);
    let head_w = cur.matrix(r, c)?;
    let (i, l) = cur.next("bias")?;
    let rest = l.strip_prefix("bias").ok_or_else(|| cur.err(i, "expected `bias <values>`"))?;
    let head_b = cur.floats(i, rest, c)?;
    if let Some((j, l)) = cur.lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(cur.err(j + 1, format!("trailing content {l:?}")));
    }
    GcnModel::from_parts(kind, layers, acts, head_w, head_b).map_err(|e| cur.err(i, e.to_string()))
}
