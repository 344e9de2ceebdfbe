//! Training loops for ERM, CMD and the transport-regularized methods, plus
//! evaluation, validation splitting and node-batch sampling.

use rand::seq::index::sample;

use crate::csbm::Graph;
use crate::error::{Error, Result};
use crate::gnn::{
    adam_step, backward, class_index, cross_entropy, forward, loss_and_grads, normalize_adjacency, softmax_rows,
    Activation, AdamState, AdjMode, AdjacencyOp, Domain, GcnModel, Gradients, ModelKind, TransportTerm,
    TransportWeights,
};
use crate::numerics::{roc_auc, Matrix, RngState};
use crate::ot::{clamped_cross_entropy, cost_joint, cost_label, solve_emd};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Erm,
    Cmd,
    Gconda,
    GcondaPp,
    GcondaDirl,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Erm, Method::Cmd, Method::Gconda, Method::GcondaPp, Method::GcondaDirl];

    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "ERM",
            Method::Cmd => "CMD",
            Method::Gconda => "GCONDA",
            Method::GcondaPp => "GCONDA_PP",
            Method::GcondaDirl => "GCONDA_DIRL",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s) || m.name().replace('_', "-").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }

    pub fn uses_transport(self) -> bool {
        matches!(self, Method::Gconda | Method::GcondaPp | Method::GcondaDirl)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub k_moments: usize,
    pub epochs: usize,
    /// Leading epochs trained on source CE alone; the discrepancy term (and
    /// model selection) starts afterwards.
    pub warmup_epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub val_fraction: f64,
    pub kind: ModelKind,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Erm,
            lambda: 1.0,
            alpha: 0.0,
            beta: 0.0,
            k_moments: 5,
            epochs: 200,
            warmup_epochs: 0,
            lr: 0.01,
            seed: 0,
            val_fraction: 0.2,
            kind: ModelKind::Gcn,
            hidden: vec![16, 16],
            activation: Activation::Silu,
        }
    }
}

impl TrainConfig {
    /// Defaults with the method's α/β regime filled in (both 1 where active).
    pub fn for_method(method: Method) -> Self {
        let (alpha, beta) = match method {
            Method::Gconda => (0.0, 1.0),
            Method::GcondaDirl => (1.0, 0.0),
            Method::GcondaPp => (1.0, 1.0),
            Method::Erm | Method::Cmd => (0.0, 0.0),
        };
        TrainConfig {
            method,
            alpha,
            beta,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        let (a, b) = (self.alpha > 0.0, self.beta > 0.0);
        let ok = match self.method {
            Method::Gconda => !a && b,
            Method::GcondaDirl => a && !b,
            Method::GcondaPp => a && b,
            Method::Erm | Method::Cmd => true,
        };
        if !ok {
            return Err(Error::invalid(format!(
                "{} does not allow alpha = {}, beta = {}",
                self.method.name(),
                self.alpha,
                self.beta
            )));
        }
        if self.method == Method::Cmd && self.k_moments == 0 {
            return Err(Error::invalid("CMD needs at least one moment"));
        }
        if self.epochs == 0 || !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("epochs must be >= 1 and lr > 0"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::invalid(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::invalid(format!("val_fraction must be in (0,1), got {}", self.val_fraction)));
        }
        Ok(())
    }

    fn lambda_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            0.0
        } else {
            self.lambda
        }
    }

    fn transport_weights(&self, epoch: usize) -> TransportWeights {
        TransportWeights {
            lambda: self.lambda_at(epoch),
            alpha: self.alpha,
            beta: self.beta,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub source_ce: f64,
    /// Ŵ₁ of the epoch's plan (transport methods) or the CMD value; `None` for ERM.
    pub discrepancy: Option<f64>,
    pub val_auc: f64,
    pub val_logloss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Parameters after the selected epoch.
    pub model: GcnModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainReport {
    pub fn best(&self) -> &EpochRecord {
        &self.history[self.best_epoch]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub logloss: f64,
    pub accuracy: f64,
}

impl Metrics {
    pub fn auc(&self) -> Result<f64> {
        self.auc.ok_or(Error::UndefinedMetric("ROC AUC needs both classes"))
    }
}

/// Source train / validation split, stratified by label.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

pub fn stratified_split(labels: &[i8], val_fraction: f64, rng: &mut RngState) -> Result<Split> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::invalid(format!("val_fraction must be in (0,1), got {val_fraction}")));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [-1i8, 1] {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < 2 {
            return Err(Error::invalid(format!("class {class} has fewer than 2 source nodes")));
        }
        let k = ((idx.len() as f64 * val_fraction).round() as usize).clamp(1, idx.len() - 1);
        let picked = sample(rng, idx.len(), k);
        let mut is_val = vec![false; idx.len()];
        picked.iter().for_each(|p| is_val[p] = true);
        for (node, v) in idx.into_iter().zip(is_val) {
            if v {
                val.push(node);
            } else {
                train.push(node);
            }
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok(Split { train, val })
}

fn classes_of(g: &Graph) -> Vec<usize> {
    g.labels.iter().map(|&l| class_index(l)).collect()
}

fn adjacency_for(cfg_kind: ModelKind, g: &Graph) -> AdjacencyOp {
    match cfg_kind {
        ModelKind::Gcn => normalize_adjacency(g, AdjMode::SymSelfLoop),
        ModelKind::Mlp => AdjacencyOp::identity(g.n),
    }
}

fn metrics_from_logits(logits: &Matrix, labels: &[i8], idx: &[usize]) -> Result<Metrics> {
    if idx.is_empty() {
        return Err(Error::invalid("evaluation over an empty node set"));
    }
    let probs = softmax_rows(logits);
    let mut scores = Vec::with_capacity(idx.len());
    let mut ys = Vec::with_capacity(idx.len());
    let (mut loss, mut correct) = (0.0, 0usize);
    for &i in idx {
        let p = probs.row(i);
        let c = class_index(labels[i]);
        let mut onehot = [0.0; 2];
        onehot[c] = 1.0;
        loss += clamped_cross_entropy(&onehot, p);
        let pred = usize::from(p[1] > p[0]);
        correct += usize::from(pred == c);
        scores.push(p[1]);
        ys.push(labels[i]);
    }
    let auc = match roc_auc(&scores, &ys) {
        Ok(a) => Some(a),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let n = idx.len() as f64;
    Ok(Metrics {
        auc,
        logloss: loss / n,
        accuracy: correct as f64 / n,
    })
}

/// AUC of the positive-class probability, mean CE and argmax accuracy over all nodes of `g`.
pub fn evaluate(model: &GcnModel, g: &Graph) -> Result<Metrics> {
    let adj = adjacency_for(model.kind(), g);
    let (logits, _) = forward(model, &adj, &g.features)?;
    let all: Vec<usize> = (0..g.n).collect();
    metrics_from_logits(&logits, &g.labels, &all)
}

/// Uniform node sample with its induced subgraph and normalized adjacency.
#[derive(Clone, Debug)]
pub struct NodeBatch {
    pub nodes: Vec<usize>,
    pub graph: Graph,
    pub adj: AdjacencyOp,
}

pub fn sample_batch(g: &Graph, size: usize, rng: &mut RngState) -> Result<NodeBatch> {
    if size == 0 || size > g.n {
        return Err(Error::invalid(format!("batch size must be in 1..={}, got {size}", g.n)));
    }
    let mut nodes = sample(rng, g.n, size).into_vec();
    nodes.sort_unstable();
    let mut new_id = vec![usize::MAX; g.n];
    nodes.iter().enumerate().for_each(|(k, &v)| new_id[v] = k);
    let edges: Vec<(usize, usize)> = g
        .edges
        .iter()
        .filter(|(a, b)| new_id[*a] != usize::MAX && new_id[*b] != usize::MAX)
        .map(|&(a, b)| (new_id[a], new_id[b]))
        .collect();
    let graph = Graph {
        n: size,
        d: g.d,
        features: g.features.select_rows(&nodes),
        labels: nodes.iter().map(|&v| g.labels[v]).collect(),
        edges,
        mu: g.mu.clone(),
    };
    let adj = normalize_adjacency(&graph, AdjMode::SymSelfLoop);
    Ok(NodeBatch { nodes, graph, adj })
}

/// Coordinatewise k-th central moments (k ≥ 2) or the mean (k = 1).
fn moment(h: &Matrix, means: &[f64], k: usize) -> Vec<f64> {
    if k == 1 {
        return means.to_vec();
    }
    let n = h.rows() as f64;
    let mut out = vec![0.0; h.cols()];
    for i in 0..h.rows() {
        for (c, o) in out.iter_mut().enumerate() {
            *o += (h[(i, c)] - means[c]).powi(k as i32);
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// `||E h_s − E h_t||₂ + Σ_{k=2..K} ||c_k(h_s) − c_k(h_t)||₂` with gradients
/// with respect to every row of both inputs. No range normalization is applied.
pub fn cmd_discrepancy(h_s: &Matrix, h_t: &Matrix, k_max: usize) -> Result<(f64, Matrix, Matrix)> {
    if k_max == 0 {
        return Err(Error::invalid("CMD needs K >= 1"));
    }
    if h_s.cols() != h_t.cols() {
        return Err(Error::dims("cmd embedding dim", h_s.cols(), h_t.cols()));
    }
    if h_s.rows() == 0 || h_t.rows() == 0 {
        return Err(Error::invalid("CMD on an empty sample"));
    }
    let (ms, mt) = (h_s.col_means(), h_t.col_means());
    let mut d_s = Matrix::zeros(h_s.rows(), h_s.cols());
    let mut d_t = Matrix::zeros(h_t.rows(), h_t.cols());
    let mut value = 0.0;
    for k in 1..=k_max {
        let (vs, vt) = (moment(h_s, &ms, k), moment(h_t, &mt, k));
        let u: Vec<f64> = vs.iter().zip(&vt).map(|(a, b)| a - b).collect();
        let len = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        value += len;
        if len == 0.0 {
            continue;
        }
        let dir: Vec<f64> = u.iter().map(|v| v / len).collect();
        moment_backward(h_s, &ms, k, &dir, 1.0, &mut d_s);
        moment_backward(h_t, &mt, k, &dir, -1.0, &mut d_t);
    }
    Ok((value, d_s, d_t))
}

/// Accumulates `sign · dirᵀ ∂c_k/∂h` into `out`.
fn moment_backward(h: &Matrix, means: &[f64], k: usize, dir: &[f64], sign: f64, out: &mut Matrix) {
    let n = h.rows() as f64;
    if k == 1 {
        for i in 0..h.rows() {
            out.row_mut(i).iter_mut().zip(dir).for_each(|(o, d)| *o += sign * d / n);
        }
        return;
    }
    let kf = k as f64;
    // ∂c_k[c]/∂h_ic = (k/N)[(h_ic − m_c)^{k−1} − mean_l (h_lc − m_c)^{k−1}]
    let lower = moment(h, means, k - 1);
    let lower_mean: Vec<f64> = if k - 1 == 1 { vec![0.0; h.cols()] } else { lower };
    for i in 0..h.rows() {
        for c in 0..h.cols() {
            let g = kf / n * ((h[(i, c)] - means[c]).powi(k as i32 - 1) - lower_mean[c]);
            out[(i, c)] += sign * dir[c] * g;
        }
    }
}

/// Source CE on `train_idx` plus `λ·CMD(h_s[src_nodes], h_t[tgt_nodes])`.
#[allow(clippy::too_many_arguments)]
pub fn cmd_loss_and_grads(
    model: &GcnModel,
    src: Domain<'_>,
    classes_src: &[usize],
    train_idx: &[usize],
    tgt: Domain<'_>,
    src_nodes: &[usize],
    tgt_nodes: &[usize],
    lambda: f64,
    k_max: usize,
) -> Result<(f64, f64, f64, Gradients)> {
    let (logits_s, cache_s) = forward(model, src.adj, src.x)?;
    let (ce, d_logits_s) = cross_entropy(&logits_s, classes_src, train_idx)?;
    let (_, cache_t) = forward(model, tgt.adj, tgt.x)?;
    let hs = cache_s.embedding().select_rows(src_nodes);
    let ht = cache_t.embedding().select_rows(tgt_nodes);
    let (cmd, ds, dt) = cmd_discrepancy(&hs, &ht, k_max)?;
    let scatter = |rows: &[usize], d: &Matrix, full: &Matrix| {
        let mut out = Matrix::zeros(full.rows(), full.cols());
        for (r, &node) in rows.iter().enumerate() {
            out.row_mut(node).iter_mut().zip(d.row(r)).for_each(|(o, v)| *o += lambda * v);
        }
        out
    };
    let de_s = scatter(src_nodes, &ds, cache_s.embedding());
    let de_t = scatter(tgt_nodes, &dt, cache_t.embedding());
    let mut grads = backward(model, src.adj, &cache_s, &d_logits_s, Some(&de_s))?;
    let zero_logits = Matrix::zeros(tgt.x.rows(), model.n_classes());
    grads.add_assign(&backward(model, tgt.adj, &cache_t, &zero_logits, Some(&de_t))?)?;
    let total = ce + lambda * cmd;
    if !total.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite(format!("loss {total} (source CE {ce}, CMD {cmd})")));
    }
    Ok((total, ce, cmd, grads))
}

fn one_hot(classes: &[usize], nodes: &[usize], l: usize) -> Matrix {
    let mut m = Matrix::zeros(nodes.len(), l);
    for (r, &v) in nodes.iter().enumerate() {
        m[(r, classes[v])] = 1.0;
    }
    m
}

fn better(a: &EpochRecord, b: &EpochRecord) -> bool {
    a.val_auc > b.val_auc || (a.val_auc == b.val_auc && a.val_logloss < b.val_logloss)
}

/// Full-batch training on the labeled source graph, with the unlabeled target
/// graph entering through the method's discrepancy term.
pub fn train(cfg: &TrainConfig, g_src: &Graph, g_tgt: &Graph) -> Result<TrainReport> {
    cfg.validate()?;
    if g_src.d != g_tgt.d {
        return Err(Error::dims("source vs target feature dim", g_src.d, g_tgt.d));
    }
    let root = RngState::new(cfg.seed);
    let mut model = GcnModel::new(cfg.kind, g_src.d, &cfg.hidden, cfg.activation, 2, &mut root.fork(1))?;
    let split = stratified_split(&g_src.labels, cfg.val_fraction, &mut root.fork(2))?;
    let mut batch_rng = root.fork(3);
    if cfg.method != Method::Erm && split.train.len() > g_tgt.n {
        return Err(Error::invalid(format!(
            "target graph ({} nodes) is smaller than the source train batch ({})",
            g_tgt.n,
            split.train.len()
        )));
    }

    let adj_s = adjacency_for(cfg.kind, g_src);
    let adj_t = adjacency_for(cfg.kind, g_tgt);
    let src = Domain { adj: &adj_s, x: &g_src.features };
    let tgt = Domain { adj: &adj_t, x: &g_tgt.features };
    let classes = classes_of(g_src);
    let y_train = one_hot(&classes, &split.train, 2);

    let mut adam = AdamState::new(&model);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, GcnModel)> = None;

    for epoch in 0..cfg.epochs {
        let tgt_nodes: Vec<usize> = if cfg.method == Method::Erm {
            Vec::new()
        } else {
            let mut t = sample(&mut batch_rng, g_tgt.n, split.train.len()).into_vec();
            t.sort_unstable();
            t
        };
        let (source_ce, discrepancy, grads) = match cfg.method {
            Method::Erm => {
                let (parts, g) = loss_and_grads(&model, src, &classes, &split.train, None, None)?;
                (parts.source_ce, None, g)
            }
            Method::Cmd => {
                let (_, ce, cmd, g) = cmd_loss_and_grads(
                    &model,
                    src,
                    &classes,
                    &split.train,
                    tgt,
                    &split.train,
                    &tgt_nodes,
                    cfg.lambda_at(epoch),
                    cfg.k_moments,
                )?;
                (ce, Some(cmd), g)
            }
            Method::Gconda | Method::GcondaPp | Method::GcondaDirl => {
                let (_, cache_s) = forward(&model, &adj_s, &g_src.features)?;
                let (logits_t, cache_t) = forward(&model, &adj_t, &g_tgt.features)?;
                let probs_t = softmax_rows(&logits_t).select_rows(&tgt_nodes);
                let cost = cost_joint(
                    &cache_s.embedding().select_rows(&split.train),
                    &y_train,
                    &cache_t.embedding().select_rows(&tgt_nodes),
                    &probs_t,
                    cfg.alpha,
                    cfg.beta,
                )?;
                let plan = solve_emd(&cost)?;
                let term = TransportTerm {
                    plan: &plan,
                    src_nodes: &split.train,
                    tgt_nodes: &tgt_nodes,
                    weights: cfg.transport_weights(epoch),
                };
                let (parts, g) = loss_and_grads(&model, src, &classes, &split.train, Some(tgt), Some(&term))?;
                (parts.source_ce, Some(plan.total_cost()), g)
            }
        };
        adam_step(&mut model, &grads, &mut adam, cfg.lr)?;

        let (logits, _) = forward(&model, &adj_s, &g_src.features)?;
        let vm = metrics_from_logits(&logits, &g_src.labels, &split.val)?;
        let rec = EpochRecord {
            source_ce,
            discrepancy,
            val_auc: vm.auc()?,
            val_logloss: vm.logloss,
        };
        if epoch >= cfg.warmup_epochs && best.as_ref().map_or(true, |(b, _)| better(&rec, &history[*b])) {
            best = Some((epoch, model.clone()));
        }
        history.push(rec);
    }
    let (best_epoch, model) = best.expect("warmup_epochs < epochs");
    Ok(TrainReport {
        model,
        history,
        best_epoch,
    })
}

/// Method-specific hyperparameter grid: α/β over {0.01, 0.1, 1} for the
/// transport methods, K over {1, 3, 5} for CMD, nothing for ERM.
pub fn search_grid(base: &TrainConfig) -> Vec<TrainConfig> {
    const VALS: [f64; 3] = [0.01, 0.1, 1.0];
    let with = |alpha: f64, beta: f64| TrainConfig {
        alpha,
        beta,
        ..base.clone()
    };
    match base.method {
        Method::Erm => vec![base.clone()],
        Method::Cmd => [1, 3, 5]
            .into_iter()
            .map(|k| TrainConfig {
                k_moments: k,
                ..base.clone()
            })
            .collect(),
        Method::Gconda => VALS.iter().map(|&b| with(0.0, b)).collect(),
        Method::GcondaDirl => VALS.iter().map(|&a| with(a, 0.0)).collect(),
        Method::GcondaPp => VALS.iter().flat_map(|&a| VALS.iter().map(move |&b| with(a, b))).collect(),
    }
}

/// Trains every grid configuration and keeps the one with the best source
/// validation AUC (ties: lower validation logloss, then grid order).
pub fn train_with_search(base: &TrainConfig, g_src: &Graph, g_tgt: &Graph) -> Result<(TrainConfig, TrainReport)> {
    let mut best: Option<(TrainConfig, TrainReport)> = None;
    for cfg in search_grid(base) {
        let report = train(&cfg, g_src, g_tgt)?;
        if best.as_ref().map_or(true, |(_, b)| better(report.best(), b.best())) {
            best = Some((cfg, report));
        }
    }
    Ok(best.expect("grid is never empty"))
}

/// Post-hoc shift estimates for a trained model: Ŵ₁ under the label cost
/// between source labels and target predictions, and CMD between embeddings.
pub fn shift_estimates(model: &GcnModel, g_src: &Graph, g_tgt: &Graph, k_moments: usize) -> Result<(f64, f64)> {
    if g_src.n != g_tgt.n {
        return Err(Error::dims("shift_estimates node counts", g_src.n, g_tgt.n));
    }
    let (_, cache_s) = forward(model, &adjacency_for(model.kind(), g_src), &g_src.features)?;
    let (logits_t, cache_t) = forward(model, &adjacency_for(model.kind(), g_tgt), &g_tgt.features)?;
    let all: Vec<usize> = (0..g_src.n).collect();
    let cost = cost_label(&one_hot(&classes_of(g_src), &all, 2), &softmax_rows(&logits_t))?;
    let w1 = solve_emd(&cost)?.total_cost();
    let (cmd, _, _) = cmd_discrepancy(cache_s.embedding(), cache_t.embedding(), k_moments)?;
    Ok((w1, cmd))
}
