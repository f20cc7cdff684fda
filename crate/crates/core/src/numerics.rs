//! Dense matrices, seeded randomness, and the ranking/spectral primitives the
//! attacks and metrics are built on.
//!
//! Everything here is deterministic: reductions run in a fixed order and the
//! only source of randomness is [`Rng`], a ChaCha8 stream keyed by a `u64`.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting empty shapes and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyMatrix);
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                format!("{} values for {rows}x{cols}", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(
                    format!("row {i} of length {cols}"),
                    format!("length {}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Wraps data produced by internal arithmetic; shape is checked, finiteness
    /// only in debug builds.
    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite matrix entry");
        Self { rows, cols, data }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix::from_vec_unchecked(self.cols, self.rows, out)
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                format!("rhs with {} rows", self.cols),
                format!("{} rows", other.rows),
            ));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix::from_vec_unchecked(self.rows, other.cols, out))
    }

    /// `selfᵀ · other` without materialising the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape(
                format!("rhs with {} rows", self.rows),
                format!("{} rows", other.rows),
            ));
        }
        let mut out = vec![0.0; self.cols * other.cols];
        for r in 0..self.rows {
            let b_row = other.row(r);
            for (i, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix::from_vec_unchecked(self.cols, other.cols, out))
    }

    /// `self · otherᵀ` without materialising the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape(
                format!("rhs with {} cols", self.cols),
                format!("{} cols", other.cols),
            ));
        }
        let mut out = Vec::with_capacity(self.rows * other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.push(dot(a, other.row(j)));
            }
        }
        Ok(Matrix::from_vec_unchecked(self.rows, other.rows, out))
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// `self += factor · other`.
    pub fn add_scaled(&mut self, other: &Matrix, factor: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    /// Copies the selected rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut out = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            out.extend_from_slice(self.row(i));
        }
        Matrix::from_vec_unchecked(indices.len(), self.cols, out)
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hconcat(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().ok_or(Error::EmptyMatrix)?.rows;
        if let Some(p) = parts.iter().find(|p| p.rows != rows) {
            return Err(Error::shape(format!("{rows} rows"), format!("{} rows", p.rows)));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(p.row(r));
            }
        }
        Ok(Matrix::from_vec_unchecked(rows, cols, out))
    }

    /// Subtracts `offset` from every row.
    pub fn sub_row_vector(&self, offset: &[f64]) -> Result<Matrix> {
        if offset.len() != self.cols {
            return Err(Error::shape(
                format!("vector of length {}", self.cols),
                format!("length {}", offset.len()),
            ));
        }
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.cols) {
            for (v, o) in row.iter_mut().zip(offset) {
                *v -= o;
            }
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Seeded, platform-independent random stream (ChaCha8).
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream `stream` under the same seed.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn unit_vector(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| self.normal()).collect();
            let n = norm2(&v);
            if n > 1e-12 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }
}

/// Arithmetic mean of each column.
pub fn column_mean(m: &Matrix) -> Vec<f64> {
    let mut sums = vec![0.0; m.cols()];
    for row in m.iter_rows() {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    let n = m.rows() as f64;
    sums.into_iter().map(|s| s / n).collect()
}

/// Dominant direction of a centered matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomposition {
    /// Unit-norm top right singular vector, first nonzero component `>= 0`.
    pub top_singular_vector: Vec<f64>,
    /// Top eigenvalue of the covariance `(1/n)·XᵀX`, i.e. `‖(1/n)XᵀX·v‖₂`.
    pub top_singular_value: f64,
    pub iterations: usize,
}

pub const POWER_ITERATION_TOL: f64 = 1e-9;
pub const POWER_ITERATION_MAX_ITER: usize = 1000;

/// Power iteration on the `d×d` covariance `(1/n)·centeredᵀ·centered`.
///
/// Stops once the eigen-residual `‖Gv − (vᵀGv)v‖` drops below
/// `tol · trace(G)`, or after `max_iter` multiplications.
pub fn top_singular_vector(
    centered: &Matrix,
    tol: f64,
    max_iter: usize,
    rng: &mut Rng,
) -> Result<SpectralDecomposition> {
    if centered.frobenius_norm() < 1e-12 {
        return Err(Error::DegenerateSpectrum);
    }
    let mut gram = centered.t_matmul(centered)?;
    gram.scale(1.0 / centered.rows() as f64);
    let d = gram.rows();
    let trace: f64 = (0..d).map(|i| gram.get(i, i)).sum();
    if trace < 1e-24 {
        return Err(Error::DegenerateSpectrum);
    }

    let mut v = rng.unit_vector(d);
    let mut w = vec![0.0; d];
    let mut iterations = 0;
    for it in 0..max_iter.max(1) {
        iterations = it + 1;
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = dot(gram.row(i), &v);
        }
        let wn = norm2(&w);
        if wn < 1e-300 {
            // start vector landed in the null space
            v = rng.unit_vector(d);
            continue;
        }
        let rayleigh = dot(&v, &w);
        let residual = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi - rayleigh * vi).powi(2))
            .sum::<f64>()
            .sqrt();
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / wn;
        }
        if residual <= tol * trace {
            break;
        }
    }

    if let Some(first) = v.iter().find(|x| **x != 0.0) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    let value = norm2(
        &(0..d)
            .map(|i| dot(gram.row(i), &v))
            .collect::<Vec<f64>>(),
    );
    Ok(SpectralDecomposition {
        top_singular_vector: v,
        top_singular_value: value,
        iterations,
    })
}

pub(crate) fn check_labels(labels: &[u8]) -> Result<(usize, usize)> {
    let mut pos = 0;
    for &y in labels {
        match y {
            0 => {}
            1 => pos += 1,
            other => return Err(Error::InvalidLabel(other as f64)),
        }
    }
    Ok((pos, labels.len() - pos))
}

/// Rank-based (Mann–Whitney) ROC AUC with ties counted as one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            format!("{} labels", scores.len()),
            format!("{} labels", labels.len()),
        ));
    }
    if scores.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: scores.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let (pos, neg) = check_labels(labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of doubled mid-ranks of positives; every value is an exact integer.
    let mut doubled_rank_sum = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j, doubled mid-rank = i + 1 + j
        let doubled_mid = (i + 1 + j) as u64;
        let group_pos = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        doubled_rank_sum += doubled_mid * group_pos;
        i = j;
    }
    let (p, q) = (pos as u64, neg as u64);
    // 2U = 2·R⁺ − P(P+1)
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / (2 * p * q) as f64)
}

/// Result of deterministic 1-D two-means clustering.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoMeans {
    /// 0 for the lower-center cluster, 1 for the upper.
    pub assignments: Vec<u8>,
    /// Cluster centers, ascending.
    pub centers: (f64, f64),
    pub iterations: usize,
}

impl TwoMeans {
    pub fn boundary(&self) -> f64 {
        0.5 * (self.centers.0 + self.centers.1)
    }

    pub fn sizes(&self) -> (usize, usize) {
        let upper = self.assignments.iter().filter(|&&a| a == 1).count();
        (self.assignments.len() - upper, upper)
    }
}

/// Deterministic 1-D two-means clustering.
///
/// Lloyd iterations are seeded at the minimum-SSE contiguous split of the
/// sorted scores (found by a prefix-sum scan), so the result is the global
/// optimum and independent of input order. Distance ties go to the lower
/// center.
pub fn two_means_1d(scores: &[f64]) -> Result<TwoMeans> {
    if scores.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: scores.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return Err(Error::DegenerateScores);
    }

    let mut centers = best_contiguous_split(scores);
    let mut assignments = vec![0u8; scores.len()];
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut changed = false;
        for (a, &s) in assignments.iter_mut().zip(scores) {
            let next = u8::from((s - centers.1).abs() < (s - centers.0).abs());
            if next != *a {
                *a = next;
                changed = true;
            }
        }
        let (mut sum, mut count) = ([0.0; 2], [0usize; 2]);
        for (&a, &s) in assignments.iter().zip(scores) {
            sum[a as usize] += s;
            count[a as usize] += 1;
        }
        if count[0] == 0 || count[1] == 0 {
            break;
        }
        centers = (sum[0] / count[0] as f64, sum[1] / count[1] as f64);
        if (!changed && iterations > 1) || iterations > 10_000 {
            break;
        }
    }
    Ok(TwoMeans {
        assignments,
        centers,
        iterations,
    })
}

/// Centers of the minimum-SSE split of sorted scores into two non-empty runs.
fn best_contiguous_split(scores: &[f64]) -> (f64, f64) {
    let n = scores.len();
    let shift = scores.iter().sum::<f64>() / n as f64;
    let mut sorted: Vec<f64> = scores.iter().map(|s| s - shift).collect();
    sorted.sort_by(f64::total_cmp);
    let total: f64 = sorted.iter().sum();
    let total_sq: f64 = sorted.iter().map(|v| v * v).sum();
    let (mut sum, mut sq) = (0.0, 0.0);
    let mut best = (f64::INFINITY, 1, 0.0);
    for k in 1..n {
        sum += sorted[k - 1];
        sq += sorted[k - 1] * sorted[k - 1];
        if sorted[k - 1] == sorted[k] {
            continue;
        }
        let (kl, kr) = (k as f64, (n - k) as f64);
        let sse = (sq - sum * sum / kl) + ((total_sq - sq) - (total - sum).powi(2) / kr);
        if sse < best.0 {
            best = (sse, k, sum);
        }
    }
    let (_, k, left_sum) = best;
    (
        left_sum / k as f64 + shift,
        (total - left_sum) / (n - k) as f64 + shift,
    )
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Rng;
    use proptest::prelude::*;

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    fn center(m: &Matrix) -> Matrix {
        m.sub_row_vector(&column_mean(m)).unwrap()
    }

    #[test]
    fn matrix_rejects_bad_input() {
        assert!(matches!(Matrix::new(0, 2, vec![]), Err(Error::EmptyMatrix)));
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(1))
        ));
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = Rng::new(3);
        let a = random_matrix(&mut rng, 5, 3);
        let b = random_matrix(&mut rng, 5, 4);
        let c = random_matrix(&mut rng, 4, 3);
        let ta = a.transpose().matmul(&b).unwrap();
        let tb = a.t_matmul(&b).unwrap();
        for (x, y) in ta.as_slice().iter().zip(tb.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
        let m1 = a.matmul_t(&c).unwrap();
        let m2 = a.matmul(&c.transpose()).unwrap();
        for (x, y) in m1.as_slice().iter().zip(m2.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn column_mean_examples() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(column_mean(&m), vec![2.0, 3.0]);
        let m = Matrix::from_rows(&[vec![5.0, 5.0]]).unwrap();
        assert_eq!(column_mean(&m), vec![5.0, 5.0]);
    }

    #[test]
    fn column_mean_matches_summation_oracle() {
        let mut rng = Rng::new(11);
        let m = random_matrix(&mut rng, 64, 8);
        let got = column_mean(&m);
        for (j, g) in got.iter().enumerate() {
            // column-major summation, a different order from the implementation
            let mut acc = 0.0;
            for i in (0..64).rev() {
                acc += m.get(i, j);
            }
            assert!((g - acc / 64.0).abs() < 1e-12);
        }
    }

    #[test]
    fn power_iteration_two_point_example() {
        let m = Matrix::from_rows(&[vec![1.0, 1.0], vec![-1.0, -1.0]]).unwrap();
        let sd = top_singular_vector(&m, 1e-9, 1000, &mut Rng::new(0)).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert!((sd.top_singular_vector[0] - h).abs() < 1e-9);
        assert!((sd.top_singular_vector[1] - h).abs() < 1e-9);
        // Gram (1/2)·[[2,2],[2,2]] has top eigenvalue 2
        assert!((sd.top_singular_value - 2.0).abs() < 1e-9);
    }

    #[test]
    fn power_iteration_axis_aligned() {
        let mut rng = Rng::new(5);
        let rows: Vec<Vec<f64>> = (0..2000)
            .map(|_| vec![2.0 * rng.normal(), rng.normal()])
            .collect();
        let m = center(&Matrix::from_rows(&rows).unwrap());
        let sd = top_singular_vector(&m, 1e-9, 1000, &mut rng).unwrap();
        assert!(sd.top_singular_vector[0] > 0.99);
        assert!(sd.top_singular_vector[1].abs() < 0.1);
    }

    #[test]
    fn power_iteration_zero_matrix() {
        let m = Matrix::zeros(4, 3);
        assert!(matches!(
            top_singular_vector(&m, 1e-9, 1000, &mut Rng::new(0)),
            Err(Error::DegenerateSpectrum)
        ));
    }

    /// Cyclic Jacobi eigenvalue sweep for small symmetric matrices.
    fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = a.len();
        let mut v: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i][j] * a[i][j])
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                    for row in v.iter_mut() {
                        let vp = row[p];
                        let vq = row[q];
                        row[p] = c * vp - s * vq;
                        row[q] = s * vp + c * vq;
                    }
                }
            }
        }
        let vals = (0..n).map(|i| a[i][i]).collect();
        let vecs = (0..n).map(|j| (0..n).map(|i| v[i][j]).collect()).collect();
        (vals, vecs)
    }

    #[test]
    fn power_iteration_matches_jacobi_oracle() {
        let mut rng = Rng::new(2024);
        for trial in 0..200 {
            let d = 1 + trial % 6;
            let n = 8 + rng.below(40);
            let m = center(&random_matrix(&mut rng, n, d));
            let sd = top_singular_vector(&m, 1e-9, 1000, &mut rng).unwrap();
            let g: Vec<Vec<f64>> = (0..d)
                .map(|i| {
                    (0..d)
                        .map(|j| (0..n).map(|r| m.get(r, i) * m.get(r, j)).sum::<f64>() / n as f64)
                        .collect()
                })
                .collect();
            let (vals, vecs) = jacobi_eigen(g);
            let (imax, &lmax) = vals
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap();
            let mut sorted = vals.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            // power iteration cannot resolve a near-degenerate top pair within 1000 steps
            if d > 1 && (sorted[0] - sorted[1]) / sorted[0] < 0.02 {
                continue;
            }
            assert!(
                (sd.top_singular_value - lmax).abs() < 1e-8 * lmax.max(1.0),
                "trial {trial}: {} vs {lmax}",
                sd.top_singular_value
            );
            let overlap = dot(&sd.top_singular_vector, &vecs[imax]).abs();
            assert!(overlap > 1.0 - 1e-6, "trial {trial}: overlap {overlap}");
            assert!((norm2(&sd.top_singular_vector) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn power_iteration_sign_convention() {
        let mut rng = Rng::new(8);
        for _ in 0..20 {
            let m = center(&random_matrix(&mut rng, 30, 4));
            let sd = top_singular_vector(&m, 1e-9, 1000, &mut rng).unwrap();
            let first = sd.top_singular_vector.iter().find(|x| **x != 0.0).unwrap();
            assert!(*first >= 0.0);
        }
    }

    #[test]
    fn auc_examples() {
        let a = auc(&[0.1, 0.4, 0.4, 0.8], &[0, 0, 1, 1]).unwrap();
        assert_eq!(a, 0.875);
        assert_eq!(auc(&[0.1, 0.2, 0.3, 0.4], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.4, 0.3, 0.2, 0.1], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(auc(&[0.7; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
    }

    #[test]
    fn auc_errors() {
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::SingleClass)));
        assert!(matches!(auc(&[0.1], &[1]), Err(Error::TooFewSamples { .. })));
        assert!(matches!(auc(&[0.1, 0.2], &[0, 2]), Err(Error::InvalidLabel(_))));
    }

    pub(crate) fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut doubled = 0u64;
        let mut pairs = 0u64;
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != 1 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != 0 {
                    continue;
                }
                pairs += 1;
                if si > sj {
                    doubled += 2;
                } else if si == sj {
                    doubled += 1;
                }
            }
        }
        doubled as f64 / (2 * pairs) as f64
    }

    /// Exhaustive minimum-SSE split of sorted scores into two contiguous groups.
    fn best_contiguous_sse(scores: &[f64]) -> f64 {
        let mut s = scores.to_vec();
        s.sort_by(f64::total_cmp);
        let sse = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>()
        };
        (1..s.len())
            .map(|k| sse(&s[..k]) + sse(&s[k..]))
            .fold(f64::INFINITY, f64::min)
    }

    fn clustering_sse(scores: &[f64], tm: &TwoMeans) -> f64 {
        scores
            .iter()
            .zip(&tm.assignments)
            .map(|(s, &a)| {
                let c = if a == 0 { tm.centers.0 } else { tm.centers.1 };
                (s - c).powi(2)
            })
            .sum()
    }

    #[test]
    fn two_means_examples() {
        let tm = two_means_1d(&[0.0, 0.0, 0.0, 10.0, 10.0]).unwrap();
        assert_eq!(tm.assignments, vec![0, 0, 0, 1, 1]);
        assert_eq!(tm.centers, (0.0, 10.0));

        let scores = [1.0, 2.0, 8.0, 9.0];
        let tm = two_means_1d(&scores).unwrap();
        assert_eq!(tm.assignments, vec![0, 0, 1, 1]);
        assert_eq!(tm.centers, (1.5, 8.5));
        assert!((clustering_sse(&scores, &tm) - best_contiguous_sse(&scores)).abs() < 1e-12);

        assert!(matches!(two_means_1d(&[3.0; 4]), Err(Error::DegenerateScores)));
    }

    #[test]
    fn rng_streams_are_reproducible() {
        let mut a = Rng::new(99);
        let mut b = Rng::new(99);
        for _ in 0..1_000_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::with_stream(99, 1);
        let mut d = Rng::new(99);
        assert_ne!(c.next_u64(), d.next_u64());
    }

    proptest! {
        #[test]
        fn auc_equals_pair_counting(
            data in prop::collection::vec((0u8..12, any::<bool>()), 2..512)
        ) {
            // coarse integer-valued scores force plenty of ties
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 * 0.25).collect();
            let labels: Vec<u8> = data.iter().map(|(_, l)| u8::from(*l)).collect();
            let (p, n) = check_labels(&labels).unwrap();
            prop_assume!(p > 0 && n > 0);
            prop_assert_eq!(auc(&scores, &labels).unwrap(), brute_force_auc(&scores, &labels));
        }

        #[test]
        fn two_means_is_optimal_contiguous_split(
            scores in prop::collection::vec(-50.0f64..50.0, 2..=12)
        ) {
            let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assume!(hi - lo > 1e-6);
            let tm = two_means_1d(&scores).unwrap();
            prop_assert!(tm.centers.0 < tm.centers.1);
            let best = best_contiguous_sse(&scores);
            let got = clustering_sse(&scores, &tm);
            prop_assert!((got - best).abs() <= 1e-9 * best.max(1.0), "sse {} vs best {}", got, best);
            let max0 = scores.iter().zip(&tm.assignments).filter(|(_, a)| **a == 0)
                .map(|(s, _)| *s).fold(f64::NEG_INFINITY, f64::max);
            let min1 = scores.iter().zip(&tm.assignments).filter(|(_, a)| **a == 1)
                .map(|(s, _)| *s).fold(f64::INFINITY, f64::min);
            prop_assert!(max0 <= min1);
        }
    }
}
