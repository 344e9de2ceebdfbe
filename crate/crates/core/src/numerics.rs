//! Dense matrices, the seeded RNG, the standard normal CDF and the scalar
//! statistics (ROC AUC, Pearson r) shared by every other module.
//!
//! # RNG
//!
//! [`RngState`] wraps xoshiro256++ seeded through SplitMix64. Child streams are
//! derived with [`RngState::fork`], which mixes the parent seed with a stream
//! label and never depends on how many values the parent has already produced.
//! Gaussian draws use the ziggurat sampler from `rand_distr`. All experiment
//! code paths take their randomness from here; nothing reads OS entropy.

use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list().entries(self.data.chunks(self.cols.max(1))).finish()?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims("Matrix::from_vec", rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dims("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of the rows listed in `idx`, in that order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).copy_from_slice(self.row(i));
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dims(
                "matmul",
                format!("lhs cols = rhs rows = {}", self.cols),
                format!("rhs rows {}", other.rows),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dims(
                "t_matmul",
                format!("row count {}", self.rows),
                format!("row count {}", other.rows),
            ));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b_row = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dims(
                "matmul_t",
                format!("col count {}", self.cols),
                format!("col count {}", other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale_in_place(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    /// `self += k · other`.
    pub fn add_scaled(&mut self, other: &Matrix, k: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dims(
                "add_scaled",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn col_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.cols];
        if self.rows == 0 {
            return means;
        }
        for i in 0..self.rows {
            for (m, v) in means.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        let inv = 1.0 / self.rows as f64;
        means.iter_mut().for_each(|m| *m *= inv);
        means
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// SplitMix64 finalizer; used to derive child seeds.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seedable, splittable generator with a draw counter.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    position: u64,
    inner: Xoshiro256PlusPlus,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            position: 0,
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 64-bit words drawn so far.
    pub fn position(&self) -> u64 {
        self.position
    }

    /// Independent child stream keyed by `stream`.
    pub fn fork(&self, stream: u64) -> RngState {
        RngState::new(mix64(self.seed ^ mix64(stream.wrapping_add(0xD1B5_4A32_D192_ED03))))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.random_range(0..n)
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.position += 1;
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

/// Standard normal CDF Φ(x) = erfc(−x/√2)/2.
///
/// `erfc` from `libm` is accurate to a few ulps, so both tails keep full
/// relative precision and Φ(x) + Φ(−x) = 1 to rounding.
pub fn std_normal_cdf(x: f64) -> f64 {
    debug_assert!(x.is_finite(), "std_normal_cdf of non-finite {x}");
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Rows drawn i.i.d. from N(mean, std²·I).
pub fn sample_gaussian_matrix(
    rng: &mut RngState,
    rows: usize,
    cols: usize,
    mean: &[f64],
    std: f64,
) -> Result<Matrix> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::invalid(format!("std must be >= 0, got {std}")));
    }
    if mean.len() != cols {
        return Err(Error::dims("sample_gaussian_matrix mean", cols, mean.len()));
    }
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for (v, mu) in m.row_mut(i).iter_mut().zip(mean) {
            *v = mu + std * rng.normal();
        }
    }
    Ok(m)
}

/// ROC AUC as the Mann–Whitney statistic; tied scores count one half.
///
/// Labels are ±1 with +1 the positive class.
pub fn roc_auc(scores: &[f64], labels: &[i8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dims("roc_auc", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("roc_auc score is NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l > 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("roc_auc needs both classes"));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Midranks (1-based) over tie groups.
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        pos_rank_sum += mid * order[i..j].iter().filter(|&&k| labels[k] > 0).count() as f64;
        i = j;
    }

    let (p, q) = (n_pos as f64, n_neg as f64);
    let u = pos_rank_sum - p * (p + 1.0) / 2.0;
    Ok((u / (p * q)).clamp(0.0, 1.0))
}

/// Sample Pearson correlation coefficient.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::dims("pearson_r", xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(Error::UndefinedMetric("pearson_r needs at least two points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("pearson_r of a zero-variance input"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Sample mean and (n−1) standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::RngCore;

    /// Maclaurin series of erf, summed until terms vanish; fine for |x| <= 4.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        while term.abs() > 1e-18 * sum.abs().max(1e-300) {
            n += 1.0;
            term *= -x * x / n;
            sum += term / (2.0 * n + 1.0);
        }
        2.0 / std::f64::consts::PI.sqrt() * sum
    }

    fn phi_oracle(x: f64) -> f64 {
        0.5 * (1.0 + erf_series(x / std::f64::consts::SQRT_2))
    }

    #[test]
    fn phi_reference_points() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        assert!((std_normal_cdf(1.0) - 0.841345).abs() < 1e-6);
        // series oracle agrees to far better than 1e-10 on a moderate range
        for k in -60..=60 {
            let x = k as f64 * 0.05;
            let err = (std_normal_cdf(x) - phi_oracle(x)).abs();
            assert!(err < 1e-12, "x={x} err={err}");
        }
    }

    #[test]
    fn phi_symmetry_and_monotonicity() {
        let mut rng = RngState::new(11);
        let mut xs: Vec<f64> = (0..2000).map(|_| 10.0 * rng.uniform() - 5.0).collect();
        for &x in &xs {
            assert!((std_normal_cdf(x) + std_normal_cdf(-x) - 1.0).abs() < 1e-12);
        }
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        for w in xs.windows(2) {
            assert!(std_normal_cdf(w[0]) < std_normal_cdf(w[1]), "{:?}", w);
        }
        // far tails saturate in f64 but never decrease
        for k in 0..400 {
            let x = 5.0 + k as f64 * 0.01;
            assert!(std_normal_cdf(x) <= std_normal_cdf(x + 0.01));
            assert!(std_normal_cdf(-x - 0.01) < std_normal_cdf(-x));
        }
    }

    #[test]
    fn gaussian_matrix_degenerate_and_deterministic() {
        let mean = vec![1.5, -2.0, 0.25];
        let m = sample_gaussian_matrix(&mut RngState::new(3), 4, 3, &mean, 0.0).unwrap();
        for i in 0..4 {
            assert_eq!(m.row(i), mean.as_slice());
        }
        let a = sample_gaussian_matrix(&mut RngState::new(9), 5, 3, &mean, 1.0).unwrap();
        let b = sample_gaussian_matrix(&mut RngState::new(9), 5, 3, &mean, 1.0).unwrap();
        assert_eq!(a, b);
        assert!(sample_gaussian_matrix(&mut RngState::new(9), 5, 3, &mean, -1.0).is_err());
    }

    #[test]
    fn gaussian_sample_mean_within_clt_band() {
        let m = sample_gaussian_matrix(&mut RngState::new(5), 100_000, 1, &[0.0], 1.0).unwrap();
        let mean = m.col_means()[0];
        // 3σ/√n ≈ 0.0095; spec band is 0.02
        assert!(mean.abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn fork_is_independent_of_parent_position() {
        let mut a = RngState::new(42);
        let b = RngState::new(42);
        let before = a.fork(7).next_u64();
        for _ in 0..10 {
            a.next_u64();
        }
        assert_eq!(a.position(), 10);
        assert_eq!(before, a.fork(7).next_u64());
        assert_eq!(before, b.fork(7).next_u64());
        assert_ne!(b.fork(7).next_u64(), b.fork(8).next_u64());
    }

    #[test]
    fn auc_examples() {
        let l = [-1i8, -1, 1, 1];
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &l).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &l).unwrap(), 0.0);
        // pairs (pos, neg): (0.35,0.1) win, (0.35,0.4) lose, (0.8,·) win twice => 3/4
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &l).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.5; 4], &l).unwrap(), 0.5);
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[1, 1]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn pearson_examples() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        assert!((pearson_r(&xs, &ys).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson_r(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);
        // cov = 0.5·(…)= 1, var_x = var_y = 2 => r = 0.5
        assert!((pearson_r(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(pearson_r(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    }

    /// Quadratic-time AUC oracle over all positive/negative pairs.
    fn auc_pairs(scores: &[f64], labels: &[i8]) -> f64 {
        let mut wins = 0.0;
        let mut total = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li > 0 && lj < 0 {
                    total += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / total
    }

    proptest! {
        #[test]
        fn auc_matches_pair_enumeration(
            raw in prop::collection::vec((0u8..6, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 5.0).collect();
            let labels: Vec<i8> = raw.iter().map(|(_, b)| if *b { 1 } else { -1 }).collect();
            prop_assume!(labels.iter().any(|&l| l > 0) && labels.iter().any(|&l| l < 0));
            let fast = roc_auc(&scores, &labels).unwrap();
            prop_assert!((fast - auc_pairs(&scores, &labels)).abs() < 1e-12);
            // invariant under strictly increasing transforms
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert!((roc_auc(&warped, &labels).unwrap() - fast).abs() < 1e-12);
        }

        #[test]
        fn matmul_variants_agree(seed in any::<u64>(), r in 1usize..6, k in 1usize..6, c in 1usize..6) {
            let mut rng = RngState::new(seed);
            let a = sample_gaussian_matrix(&mut rng, r, k, &vec![0.0; k], 1.0).unwrap();
            let b = sample_gaussian_matrix(&mut rng, k, c, &vec![0.0; c], 1.0).unwrap();
            let ab = a.matmul(&b).unwrap();
            prop_assert!(ab.max_abs_diff(&a.transpose().t_matmul(&b).unwrap()) < 1e-12);
            prop_assert!(ab.max_abs_diff(&a.matmul_t(&b.transpose()).unwrap()) < 1e-12);
        }
    }
}
