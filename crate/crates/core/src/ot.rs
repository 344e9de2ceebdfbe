//! Ground costs, exact optimal transport between equal-size uniform batches,
//! and the empirical Wasserstein-1 estimate.
//!
//! With `n` source and `n` target samples of mass `1/n` each, the transport
//! polytope's vertices are permutation matrices scaled by `1/n`, so the exact
//! EMD reduces to a linear assignment problem. Plans are normalized to total
//! mass 1 (rows and columns sum to `1/n`), which makes Ŵ₁ a per-sample average.

use itertools::Itertools;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Lower clamp on predicted probabilities inside cross-entropy costs.
pub const CE_CLAMP: f64 = 1e-7;

/// Square matrix of finite, nonnegative transport costs.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix(Matrix);

impl CostMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::dims("cost matrix", "square", format!("{:?}", m.shape())));
        }
        if let Some(v) = m.data().iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!("cost entries must be finite and >= 0, found {v}")));
        }
        Ok(CostMatrix(m))
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    gamma: Matrix,
    total_cost: f64,
    assignment: Option<Vec<usize>>,
}

impl TransportPlan {
    /// Plan that sends all of source `i`'s mass to target `assignment[i]`.
    pub fn from_assignment(assignment: Vec<usize>, cost: &CostMatrix) -> Result<Self> {
        let n = cost.n();
        if assignment.len() != n {
            return Err(Error::dims("assignment", n, assignment.len()));
        }
        let mut seen = vec![false; n];
        for &j in &assignment {
            if j >= n || std::mem::replace(&mut seen[j], true) {
                return Err(Error::invalid("assignment is not a permutation"));
            }
        }
        let w = 1.0 / n as f64;
        let mut gamma = Matrix::zeros(n, n);
        for (i, &j) in assignment.iter().enumerate() {
            gamma[(i, j)] = w;
        }
        let total_cost = assignment_cost(&assignment, cost);
        Ok(TransportPlan {
            gamma,
            total_cost,
            assignment: Some(assignment),
        })
    }

    /// Any coupling; marginals are checked to within `1e-9`.
    pub fn from_gamma(gamma: Matrix, cost: &CostMatrix) -> Result<Self> {
        let plan = TransportPlan {
            total_cost: transport_cost(&gamma, cost)?,
            gamma,
            assignment: None,
        };
        plan.check_marginals(1e-9)?;
        Ok(plan)
    }

    /// The independent coupling `γ = 1/n²`.
    pub fn independent(cost: &CostMatrix) -> Self {
        let n = cost.n();
        let gamma = Matrix::from_vec(n, n, vec![1.0 / (n * n) as f64; n * n]).expect("square");
        TransportPlan {
            total_cost: transport_cost(&gamma, cost).expect("same shape"),
            gamma,
            assignment: None,
        }
    }

    pub fn n(&self) -> usize {
        self.gamma.rows()
    }

    pub fn gamma(&self) -> &Matrix {
        &self.gamma
    }

    pub fn total_cost(&self) -> f64 {
        self.total_cost
    }

    /// The permutation, when the plan is a scaled permutation matrix.
    pub fn assignment(&self) -> Option<&[usize]> {
        self.assignment.as_deref()
    }

    /// Nonzero entries `(i, j, γ_ij)` in row-major order.
    pub fn entries(&self) -> Vec<(usize, usize, f64)> {
        let n = self.n();
        if let Some(a) = &self.assignment {
            let w = 1.0 / n as f64;
            return a.iter().enumerate().map(|(i, &j)| (i, j, w)).collect();
        }
        let mut out = Vec::new();
        for i in 0..n {
            for (j, &g) in self.gamma.row(i).iter().enumerate() {
                if g != 0.0 {
                    out.push((i, j, g));
                }
            }
        }
        out
    }

    pub fn check_marginals(&self, tol: f64) -> Result<()> {
        let n = self.n();
        let target = 1.0 / n as f64;
        let mut cols = vec![0.0; n];
        for i in 0..n {
            let row = self.gamma.row(i);
            if row.iter().any(|&g| g < 0.0 || !g.is_finite()) {
                return Err(Error::invalid("plan entries must be finite and >= 0"));
            }
            let s: f64 = row.iter().sum();
            if (s - target).abs() > tol {
                return Err(Error::invalid(format!("row {i} sums to {s}, expected {target}")));
            }
            cols.iter_mut().zip(row).for_each(|(c, g)| *c += g);
        }
        if let Some((j, s)) = cols.iter().enumerate().find(|(_, s)| (*s - target).abs() > tol) {
            return Err(Error::invalid(format!("column {j} sums to {s}, expected {target}")));
        }
        Ok(())
    }
}

fn assignment_cost(assignment: &[usize], cost: &CostMatrix) -> f64 {
    let sum: f64 = assignment.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum();
    sum / assignment.len() as f64
}

fn transport_cost(gamma: &Matrix, cost: &CostMatrix) -> Result<f64> {
    if gamma.shape() != cost.matrix().shape() {
        return Err(Error::dims(
            "plan vs cost",
            format!("{:?}", cost.matrix().shape()),
            format!("{:?}", gamma.shape()),
        ));
    }
    Ok(gamma
        .data()
        .iter()
        .zip(cost.matrix().data())
        .map(|(g, c)| g * c)
        .sum())
}

fn check_probability_rows(p: &Matrix, what: &str) -> Result<()> {
    for i in 0..p.rows() {
        let s: f64 = p.row(i).iter().sum();
        if (s - 1.0).abs() > 1e-6 || p.row(i).iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid(format!("{what} row {i} is not a distribution (sum {s})")));
        }
    }
    Ok(())
}

/// `−Σ_c y[c]·log(max(p[c], ε))`.
#[inline]
pub fn clamped_cross_entropy(y: &[f64], p: &[f64]) -> f64 {
    -y.iter()
        .zip(p)
        .filter(|(yc, _)| **yc != 0.0)
        .map(|(yc, pc)| yc * pc.max(CE_CLAMP).ln())
        .sum::<f64>()
}

/// Label cost `c_ij = CE(y_src[i], p_tgt[j])` between one-hot source labels
/// and predicted target distributions.
pub fn cost_label(y_src: &Matrix, p_tgt: &Matrix) -> Result<CostMatrix> {
    if y_src.cols() != p_tgt.cols() {
        return Err(Error::dims("cost_label classes", y_src.cols(), p_tgt.cols()));
    }
    if y_src.rows() != p_tgt.rows() {
        return Err(Error::dims("cost_label batch sizes", y_src.rows(), p_tgt.rows()));
    }
    check_probability_rows(p_tgt, "p_tgt")?;
    let n = y_src.rows();
    let mut c = Matrix::zeros(n, n);
    for i in 0..n {
        let y = y_src.row(i);
        for j in 0..n {
            c[(i, j)] = clamped_cross_entropy(y, p_tgt.row(j));
        }
    }
    CostMatrix::new(c)
}

/// Joint cost `c_ij = α·||h_src[i] − h_tgt[j]||² + β·CE(y_src[i], p_tgt[j])`.
pub fn cost_joint(
    h_src: &Matrix,
    y_src: &Matrix,
    h_tgt: &Matrix,
    p_tgt: &Matrix,
    alpha: f64,
    beta: f64,
) -> Result<CostMatrix> {
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(Error::invalid(format!("alpha, beta must be >= 0 (got {alpha}, {beta})")));
    }
    if h_src.cols() != h_tgt.cols() {
        return Err(Error::dims("cost_joint embedding dim", h_src.cols(), h_tgt.cols()));
    }
    if h_src.rows() != y_src.rows() || h_tgt.rows() != p_tgt.rows() {
        return Err(Error::dims("cost_joint rows", h_src.rows(), y_src.rows()));
    }
    if alpha == 0.0 && beta == 0.0 {
        log::warn!("cost_joint with alpha = beta = 0: every plan is optimal");
    }
    let label = cost_label(y_src, p_tgt)?;
    let n = h_src.rows();
    let mut c = Matrix::zeros(n, n);
    for i in 0..n {
        let hs = h_src.row(i);
        for j in 0..n {
            let mut v = 0.0;
            if alpha != 0.0 {
                let sq: f64 = hs.iter().zip(h_tgt.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                v += alpha * sq;
            }
            if beta != 0.0 {
                v += beta * label.get(i, j);
            }
            c[(i, j)] = v;
        }
    }
    CostMatrix::new(c)
}

/// Exact EMD with uniform marginals via shortest augmenting paths (O(n³)).
pub fn solve_emd(cost: &CostMatrix) -> Result<TransportPlan> {
    let n = cost.n();
    if n == 0 {
        return Err(Error::invalid("solve_emd on an empty batch"));
    }
    let assignment = hungarian(cost);
    TransportPlan::from_assignment(assignment, cost)
}

/// Rows-to-columns assignment minimizing total cost. Dual potentials `u`, `v`
/// and 1-based sentinel column 0, as in the classic dense formulation.
fn hungarian(cost: &CostMatrix) -> Vec<usize> {
    let n = cost.n();
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1]; // owner[j] = row matched to column j
    let mut way = vec![0usize; n + 1];
    let mut min_slack = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        min_slack.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            let row = cost.matrix().row(i0 - 1);
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
                if cur < min_slack[j] {
                    min_slack[j] = cur;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    assignment
}

/// Exhaustive search over all permutations (n ≤ 8). Ties resolve to the
/// lexicographically smallest permutation.
pub fn brute_force_emd(cost: &CostMatrix) -> Result<TransportPlan> {
    let n = cost.n();
    if n == 0 {
        return Err(Error::invalid("brute_force_emd on an empty batch"));
    }
    if n > 8 {
        return Err(Error::invalid(format!("brute_force_emd supports n <= 8, got {n}")));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..n).permutations(n) {
        let c = assignment_cost(&perm, cost);
        if best.as_ref().map_or(true, |(b, _)| c < *b) {
            best = Some((c, perm));
        }
    }
    let (_, perm) = best.expect("n >= 1");
    TransportPlan::from_assignment(perm, cost)
}

/// `Σ_ij γ_ij c_ij`.
pub fn w1_estimate(plan: &TransportPlan, cost: &CostMatrix) -> Result<f64> {
    if plan.n() != cost.n() {
        return Err(Error::dims("w1_estimate", cost.n(), plan.n()));
    }
    match plan.assignment() {
        Some(a) => Ok(assignment_cost(a, cost)),
        None => transport_cost(plan.gamma(), cost),
    }
}

/// Entropic OT with uniform marginals (log-domain Sinkhorn). An approximate
/// alternative to [`solve_emd`] for batches too large for the cubic solver.
pub fn sinkhorn(cost: &CostMatrix, reg: f64, max_iter: usize, tol: f64) -> Result<TransportPlan> {
    let n = cost.n();
    if n == 0 {
        return Err(Error::invalid("sinkhorn on an empty batch"));
    }
    if !(reg > 0.0) {
        return Err(Error::invalid(format!("sinkhorn regularization must be > 0, got {reg}")));
    }
    let log_w = -(n as f64).ln();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];
    let c = cost.matrix();

    let lse = |vals: &mut dyn Iterator<Item = f64>| -> f64 {
        let v: Vec<f64> = vals.collect();
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };

    for _ in 0..max_iter {
        for i in 0..n {
            f[i] = reg * (log_w - lse(&mut (0..n).map(|j| (g[j] - c[(i, j)]) / reg)));
        }
        for j in 0..n {
            g[j] = reg * (log_w - lse(&mut (0..n).map(|i| (f[i] - c[(i, j)]) / reg)));
        }
        // columns are exact after the g-update; stop once rows are too
        let row_err = (0..n)
            .map(|i| {
                let log_row = lse(&mut (0..n).map(|j| (f[i] + g[j] - c[(i, j)]) / reg));
                (log_row.exp() - log_w.exp()).abs()
            })
            .fold(0.0f64, f64::max);
        if row_err < tol {
            break;
        }
    }

    let mut gamma = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            gamma[(i, j)] = ((f[i] + g[j] - c[(i, j)]) / reg).exp();
        }
    }
    let total_cost = transport_cost(&gamma, cost)?;
    Ok(TransportPlan {
        gamma,
        total_cost,
        assignment: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;
    use proptest::prelude::*;

    fn random_cost(n: usize, rng: &mut RngState) -> CostMatrix {
        let data = (0..n * n).map(|_| rng.uniform() * 10.0).collect();
        CostMatrix::new(Matrix::from_vec(n, n, data).unwrap()).unwrap()
    }

    fn one_hot(labels: &[usize], l: usize) -> Matrix {
        let mut m = Matrix::zeros(labels.len(), l);
        for (i, &c) in labels.iter().enumerate() {
            m[(i, c)] = 1.0;
        }
        m
    }

    #[test]
    fn label_cost_examples() {
        let y = one_hot(&[0, 1], 2);
        let uniform = Matrix::from_vec(2, 2, vec![0.5; 4]).unwrap();
        let c = cost_label(&y, &uniform).unwrap();
        for v in c.matrix().data() {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        }
        let confident = Matrix::from_rows(&[vec![1.0 - 1e-7, 1e-7], vec![0.0, 1.0]]).unwrap();
        let c = cost_label(&y, &confident).unwrap();
        assert!(c.get(0, 0) <= 1e-6 && c.get(1, 1) <= 1e-6);
        assert!((c.get(0, 1) - (-CE_CLAMP.ln())).abs() < 1e-12);
        assert!(c.matrix().data().iter().all(|&v| v <= -CE_CLAMP.ln() + 1e-12));

        assert!(cost_label(&one_hot(&[0], 3), &uniform).is_err());
        let not_prob = Matrix::from_vec(2, 2, vec![0.7; 4]).unwrap();
        assert!(cost_label(&y, &not_prob).is_err());
    }

    #[test]
    fn joint_cost_reductions() {
        let mut rng = RngState::new(1);
        let h_s = Matrix::from_vec(3, 2, (0..6).map(|_| rng.normal()).collect()).unwrap();
        let h_t = Matrix::from_vec(3, 2, (0..6).map(|_| rng.normal()).collect()).unwrap();
        let y = one_hot(&[0, 1, 1], 2);
        let p = Matrix::from_rows(&[vec![0.2, 0.8], vec![0.6, 0.4], vec![0.5, 0.5]]).unwrap();
        let label = cost_label(&y, &p).unwrap();

        let only_label = cost_joint(&h_s, &y, &h_t, &p, 0.0, 0.7).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((only_label.get(i, j) - 0.7 * label.get(i, j)).abs() < 1e-15);
            }
        }
        let only_emb = cost_joint(&h_s, &y, &h_t, &p, 2.0, 0.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let sq: f64 = (0..2).map(|k| (h_s[(i, k)] - h_t[(j, k)]).powi(2)).sum();
                assert!((only_emb.get(i, j) - 2.0 * sq).abs() < 1e-12);
            }
        }
        let same = Matrix::from_rows(&[vec![1.0 - 1e-9, 1e-9]]).unwrap();
        let h = Matrix::from_rows(&[vec![0.3, -0.2]]).unwrap();
        let c = cost_joint(&h, &one_hot(&[0], 2), &h, &same, 1.0, 1.0).unwrap();
        assert!(c.get(0, 0) < 1e-8);
        assert!(cost_joint(&h_s, &y, &h_t, &p, 0.0, 0.0).is_ok());
        assert!(cost_joint(&h_s, &y, &h_t, &p, -1.0, 0.0).is_err());
    }

    #[test]
    fn emd_examples() {
        let mut rng = RngState::new(2);
        let mut m = Matrix::zeros(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    m[(i, j)] = 0.5 + rng.uniform();
                }
            }
        }
        let plan = solve_emd(&CostMatrix::new(m).unwrap()).unwrap();
        assert_eq!(plan.assignment().unwrap(), &[0, 1, 2, 3]);
        assert_eq!(plan.total_cost(), 0.0);

        let c = CostMatrix::new(Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap()).unwrap();
        let plan = solve_emd(&c).unwrap();
        assert_eq!(plan.gamma(), &Matrix::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap());
        assert_eq!(plan.total_cost(), 0.0);

        assert!(solve_emd(&CostMatrix::new(Matrix::zeros(0, 0)).unwrap()).is_err());
        assert!(CostMatrix::new(Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn emd_matches_permutation_enumeration_5x5() {
        let mut rng = RngState::new(3);
        for _ in 0..50 {
            let c = random_cost(5, &mut rng);
            let mut best = f64::INFINITY;
            for perm in (0..5).permutations(5) {
                let s: f64 = perm.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum::<f64>() / 5.0;
                best = best.min(s);
            }
            assert!((solve_emd(&c).unwrap().total_cost() - best).abs() < 1e-12);
        }
    }

    #[test]
    fn brute_force_contract() {
        let c = CostMatrix::new(Matrix::from_rows(&[vec![2.5]]).unwrap()).unwrap();
        assert_eq!(brute_force_emd(&c).unwrap().total_cost(), 2.5);
        assert!(brute_force_emd(&random_cost(9, &mut RngState::new(0))).is_err());
        // all-equal costs: lexicographically first permutation
        let flat = CostMatrix::new(Matrix::from_vec(3, 3, vec![1.0; 9]).unwrap()).unwrap();
        assert_eq!(brute_force_emd(&flat).unwrap().assignment().unwrap(), &[0, 1, 2]);
    }

    #[test]
    fn w1_examples() {
        let zero = CostMatrix::new(Matrix::zeros(3, 3)).unwrap();
        assert_eq!(w1_estimate(&solve_emd(&zero).unwrap(), &zero).unwrap(), 0.0);

        let mut m = Matrix::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                m[(i, j)] = if i == j { (i + 1) as f64 } else { 10.0 };
            }
        }
        let c = CostMatrix::new(m).unwrap();
        let id = TransportPlan::from_assignment(vec![0, 1, 2], &c).unwrap();
        assert!((w1_estimate(&id, &c).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn sinkhorn_approaches_emd() {
        let c = random_cost(6, &mut RngState::new(4));
        let exact = solve_emd(&c).unwrap().total_cost();
        let soft = sinkhorn(&c, 0.1, 100000, 1e-10).unwrap();
        soft.check_marginals(1e-6).unwrap();
        assert!(soft.total_cost() >= exact - 1e-9);
        assert!(soft.total_cost() - exact < 0.4, "{} vs {exact}", soft.total_cost());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn emd_agrees_with_brute_force(seed in any::<u64>(), n in 1usize..=7) {
            let c = random_cost(n, &mut RngState::new(seed));
            let fast = solve_emd(&c).unwrap();
            let slow = brute_force_emd(&c).unwrap();
            fast.check_marginals(1e-9).unwrap();
            prop_assert!((fast.total_cost() - slow.total_cost()).abs() <= 1e-9);
            prop_assert!((fast.gamma().data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!((w1_estimate(&fast, &c).unwrap() - fast.total_cost()).abs() < 1e-15);
        }

        #[test]
        fn shift_scale_and_optimality(seed in any::<u64>(), n in 2usize..=6, k in 0.1f64..5.0) {
            let mut rng = RngState::new(seed);
            let c = random_cost(n, &mut rng);
            let base = brute_force_emd(&c).unwrap().total_cost();
            let shifted = CostMatrix::new(c.matrix().map(|v| v + k)).unwrap();
            prop_assert!((brute_force_emd(&shifted).unwrap().total_cost() - (base + k)).abs() < 1e-9);
            let scaled = CostMatrix::new(c.matrix().map(|v| v * k)).unwrap();
            prop_assert!((solve_emd(&scaled).unwrap().total_cost() - base * k).abs() < 1e-9);
            // any feasible plan costs at least as much
            let opt = solve_emd(&c).unwrap().total_cost();
            prop_assert!(opt <= TransportPlan::independent(&c).total_cost() + 1e-12);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.rotate_left(1);
            prop_assert!(opt <= TransportPlan::from_assignment(perm, &c).unwrap().total_cost() + 1e-12);
        }

        #[test]
        fn symmetric_metric_costs_are_symmetric(seed in any::<u64>(), n in 1usize..=7) {
            let mut rng = RngState::new(seed);
            let xs: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let ys: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let build = |a: &[f64], b: &[f64]| {
                let data = a.iter().flat_map(|x| b.iter().map(move |y| (x - y).abs())).collect();
                CostMatrix::new(Matrix::from_vec(n, n, data).unwrap()).unwrap()
            };
            let st = solve_emd(&build(&xs, &ys)).unwrap().total_cost();
            let ts = solve_emd(&build(&ys, &xs)).unwrap().total_cost();
            prop_assert!((st - ts).abs() < 1e-12);
        }
    }
}
