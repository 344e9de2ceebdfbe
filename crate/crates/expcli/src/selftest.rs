//! Exact-OT and gradient self-checks, shared by `gcshift selftest` and the
//! acceptance tests.

use gcshift::csbm::Graph;
use gcshift::gnn::{
    class_index, forward, loss_and_grads, max_gradient_rel_error, normalize_adjacency, softmax_rows, Activation,
    AdjMode, Domain, GcnModel, ModelKind, TransportTerm, TransportWeights,
};
use gcshift::numerics::{Matrix, RngState};
use gcshift::ot::{brute_force_emd, cost_joint, solve_emd, CostMatrix};
use gcshift::trainer::cmd_loss_and_grads;

use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckCounts {
    pub name: &'static str,
    pub passed: usize,
    pub failed: usize,
    /// Largest error observed (cost gap, marginal error or relative gradient error).
    pub worst: f64,
}

impl CheckCounts {
    fn new(name: &'static str) -> Self {
        CheckCounts {
            name,
            passed: 0,
            failed: 0,
            worst: 0.0,
        }
    }

    fn record(&mut self, err: f64, tol: f64) {
        self.worst = self.worst.max(err);
        if err <= tol {
            self.passed += 1;
        } else {
            self.failed += 1;
        }
    }

    pub fn ok(&self) -> bool {
        self.failed == 0 && self.passed > 0
    }
}

pub const OT_TOL: f64 = 1e-9;
pub const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

/// `cases` random cost matrices of size 1..=7: solver cost vs the brute-force
/// permutation minimum, and plan marginals vs `1/n`.
pub fn ot_oracle_suite(cases: usize, seed: u64) -> Result<(CheckCounts, CheckCounts)> {
    let mut cost_check = CheckCounts::new("ot_cost");
    let mut marginal_check = CheckCounts::new("ot_marginals");
    let root = RngState::new(seed);
    for c in 0..cases {
        let mut rng = root.fork(c as u64);
        let n = 1 + rng.below(7);
        let scale = [1e-3, 1.0, 1e3][rng.below(3)];
        let data: Vec<f64> = (0..n * n).map(|_| scale * rng.uniform()).collect();
        let cost = CostMatrix::new(Matrix::from_vec(n, n, data)?)?;
        let plan = solve_emd(&cost)?;
        let oracle = brute_force_emd(&cost)?;
        let gap = (plan.total_cost() - oracle.total_cost()).abs() / scale.max(1.0);
        cost_check.record(gap, OT_TOL);
        let g = plan.gamma();
        let target = 1.0 / n as f64;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let row: f64 = g.row(i).iter().sum();
            let col: f64 = (0..n).map(|k| g[(k, i)]).sum();
            worst = worst.max((row - target).abs()).max((col - target).abs());
        }
        marginal_check.record(worst, OT_TOL);
    }
    Ok((cost_check, marginal_check))
}

fn random_graph(n: usize, d: usize, rng: &mut RngState) -> Result<Graph> {
    let features = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect())?;
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.uniform() < 0.35 {
                edges.push((i, j));
            }
        }
    }
    Ok(Graph {
        n,
        d,
        features,
        labels: (0..n).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect(),
        edges,
        mu: vec![0.0; d],
    })
}

/// Analytic vs central-difference gradients on `instances` random 8-node
/// source/target pairs, for the ERM, GCONDA, GCONDA++ and CMD objectives.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<CheckCounts>> {
    let mut checks = vec![
        CheckCounts::new("grad_erm"),
        CheckCounts::new("grad_gconda"),
        CheckCounts::new("grad_gconda_pp"),
        CheckCounts::new("grad_cmd"),
    ];
    let root = RngState::new(seed);
    const N: usize = 8;
    const D: usize = 3;
    for inst in 0..instances {
        let mut rng = root.fork(inst as u64);
        let gs = random_graph(N, D, &mut rng)?;
        let gt = random_graph(N, D, &mut rng)?;
        let adj_s = normalize_adjacency(&gs, AdjMode::SymSelfLoop);
        let adj_t = normalize_adjacency(&gt, AdjMode::SymSelfLoop);
        let model = GcnModel::new(ModelKind::Gcn, D, &[4, 3], Activation::Silu, 2, &mut rng)?;
        let classes: Vec<usize> = gs.labels.iter().map(|&l| class_index(l)).collect();
        let train: Vec<usize> = (0..N).filter(|_| rng.uniform() < 0.75).collect();
        let train = if train.is_empty() { vec![0] } else { train };
        let src_nodes = [0, 2, 4, 5];
        let tgt_nodes = [1, 3, 6, 7];
        let src = Domain { adj: &adj_s, x: &gs.features };
        let tgt = Domain { adj: &adj_t, x: &gt.features };

        let erm = max_gradient_rel_error(&model, FD_STEP, |m| {
            let (p, g) = loss_and_grads(m, src, &classes, &train, None, None)?;
            Ok((p.total, g))
        })?;
        checks[0].record(erm, GRAD_TOL);

        // The plan is solved once at the current parameters and then held fixed.
        let (_, cache_s) = forward(&model, &adj_s, &gs.features)?;
        let (logits_t, cache_t) = forward(&model, &adj_t, &gt.features)?;
        let y = Matrix::from_rows(
            &src_nodes
                .iter()
                .map(|&i| (0..2).map(|c| f64::from(c == classes[i])).collect())
                .collect::<Vec<_>>(),
        )?;
        for (slot, alpha, beta) in [(1, 0.0, 1.0), (2, 0.5, 0.7)] {
            let cost = cost_joint(
                &cache_s.embedding().select_rows(&src_nodes),
                &y,
                &cache_t.embedding().select_rows(&tgt_nodes),
                &softmax_rows(&logits_t).select_rows(&tgt_nodes),
                alpha,
                beta,
            )?;
            let plan = solve_emd(&cost)?;
            let term = TransportTerm {
                plan: &plan,
                src_nodes: &src_nodes,
                tgt_nodes: &tgt_nodes,
                weights: TransportWeights {
                    lambda: 0.8,
                    alpha,
                    beta,
                },
            };
            let err = max_gradient_rel_error(&model, FD_STEP, |m| {
                let (p, g) = loss_and_grads(m, src, &classes, &train, Some(tgt), Some(&term))?;
                Ok((p.total, g))
            })?;
            checks[slot].record(err, GRAD_TOL);
        }

        let k = 1 + rng.below(4);
        let cmd = max_gradient_rel_error(&model, FD_STEP, |m| {
            let (total, _, _, g) = cmd_loss_and_grads(m, src, &classes, &train, tgt, &src_nodes, &tgt_nodes, 0.8, k)?;
            Ok((total, g))
        })?;
        checks[3].record(cmd, GRAD_TOL);
    }
    Ok(checks)
}
