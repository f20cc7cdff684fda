//! Sample distance correlation between an embedding batch and its labels, and
//! the gradient of the `log dCor` defense loss with respect to the embeddings.
//!
//! The estimator is the plain V-statistic: pairwise Euclidean distances,
//! double centering, then `dCor = dCov²(X,Y) / sqrt(dCov²(X,X)·dCov²(Y,Y))`.
//! All sums run in row-major order so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const DEFAULT_DCOR_FLOOR: f64 = 1e-8;

/// Intermediate matrices of one distance-correlation evaluation.
#[derive(Debug, Clone)]
pub struct DcorWorkspace {
    /// Pairwise embedding distances.
    pub s: Matrix,
    /// Pairwise label distances.
    pub t: Matrix,
    /// Doubly-centered `s`.
    pub a: Matrix,
    /// Doubly-centered `t`.
    pub b: Matrix,
    pub dcov2_xy: f64,
    pub dcov2_xx: f64,
    pub dcov2_yy: f64,
}

fn pairwise_distances(x: &Matrix) -> Matrix {
    let n = x.rows();
    let mut s = Matrix::zeros(n, n);
    for j in 0..n {
        let xj = x.row(j);
        for k in j + 1..n {
            let d = xj
                .iter()
                .zip(x.row(k))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            s.set(j, k, d);
            s.set(k, j, d);
        }
    }
    s
}

fn label_distances(y: &[f64]) -> Matrix {
    let n = y.len();
    let mut t = Matrix::zeros(n, n);
    for j in 0..n {
        for k in 0..n {
            t.set(j, k, (y[j] - y[k]).abs());
        }
    }
    t
}

/// `A_jk = s_jk − s̄_j· − s̄_·k + s̄_··`.
fn double_center(s: &Matrix) -> Matrix {
    let n = s.rows();
    let nf = n as f64;
    let row_means: Vec<f64> = s.iter_rows().map(|r| r.iter().sum::<f64>() / nf).collect();
    let mut col_means = vec![0.0; n];
    for r in s.iter_rows() {
        for (c, v) in col_means.iter_mut().zip(r) {
            *c += v;
        }
    }
    col_means.iter_mut().for_each(|c| *c /= nf);
    let grand = row_means.iter().sum::<f64>() / nf;
    let mut a = Matrix::zeros(n, n);
    for j in 0..n {
        for k in 0..n {
            a.set(j, k, s.get(j, k) - row_means[j] - col_means[k] + grand);
        }
    }
    a
}

fn mean_product(a: &Matrix, b: &Matrix) -> f64 {
    let n = a.rows() as f64;
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| x * y)
        .sum::<f64>()
        / (n * n)
}

/// Converts binary labels to the 0.0/1.0 values used in `t`.
pub fn labels_as_f64(labels: &[u8]) -> Vec<f64> {
    labels.iter().map(|&y| f64::from(y)).collect()
}

/// Distance correlation between embedding rows and scalar labels.
pub fn distance_correlation(embeddings: &Matrix, labels: &[f64]) -> Result<(f64, DcorWorkspace)> {
    let n = embeddings.rows();
    if labels.len() != n {
        return Err(Error::shape(format!("{n} labels"), format!("{}", labels.len())));
    }
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    if let Some(i) = labels.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }

    let s = pairwise_distances(embeddings);
    let t = label_distances(labels);
    let a = double_center(&s);
    let b = double_center(&t);
    let dcov2_xy = mean_product(&a, &b);
    let dcov2_xx = mean_product(&a, &a);
    let dcov2_yy = mean_product(&b, &b);

    if dcov2_yy <= 0.0 {
        return Err(Error::DegenerateLabels);
    }
    if dcov2_xx <= 0.0 {
        return Err(Error::DegenerateEmbeddings);
    }

    let raw = dcov2_xy / (dcov2_xx * dcov2_yy).sqrt();
    debug_assert!(raw > -1e-9 && raw < 1.0 + 1e-9, "dCor out of range: {raw}");
    let dcor = raw.clamp(0.0, 1.0);
    let ws = DcorWorkspace {
        s,
        t,
        a,
        b,
        dcov2_xy: dcov2_xy.max(0.0),
        dcov2_xx,
        dcov2_yy,
    };
    Ok((dcor, ws))
}

/// `log(max(dCor, floor))`, the per-batch estimate of the defense loss.
pub fn dcor_loss(embeddings: &Matrix, labels: &[f64], floor: f64) -> Result<f64> {
    let (dcor, _) = distance_correlation(embeddings, labels)?;
    Ok(dcor.max(floor).ln())
}

/// Gradient of [`dcor_loss`] with respect to every embedding entry.
///
/// Returns the zero matrix when labels or embeddings are degenerate, or when
/// dCor sits at or below `floor`. Coincident row pairs contribute nothing.
pub fn dcor_loss_gradient(embeddings: &Matrix, labels: &[f64], floor: f64) -> Result<Matrix> {
    let (n, d) = embeddings.shape();
    let (dcor, ws) = match distance_correlation(embeddings, labels) {
        Ok(v) => v,
        Err(Error::DegenerateLabels | Error::DegenerateEmbeddings) => {
            return Ok(Matrix::zeros(n, d));
        }
        Err(e) => return Err(e),
    };
    Ok(gradient_from_workspace(embeddings, &ws, dcor, floor))
}

/// Chain rule through `log dCor = log Cxy − ½ log Cxx − ½ log Cyy`.
///
/// Double centering is an orthogonal projection, so `∂ΣA∘B/∂s = B` and
/// `∂ΣA∘A/∂s = 2A`; hence `∂L/∂s_jk = B_jk/ΣA∘B − A_jk/ΣA∘A`.
pub(crate) fn gradient_from_workspace(
    embeddings: &Matrix,
    ws: &DcorWorkspace,
    dcor: f64,
    floor: f64,
) -> Matrix {
    let (n, d) = embeddings.shape();
    let mut grad = Matrix::zeros(n, d);
    if dcor <= floor || ws.dcov2_xy <= 0.0 {
        return grad;
    }
    let nn = (n * n) as f64;
    let sum_ab = ws.dcov2_xy * nn;
    let sum_aa = ws.dcov2_xx * nn;
    let mut diff = vec![0.0; d];
    for j in 0..n {
        let xj = embeddings.row(j);
        let mut acc = vec![0.0; d];
        for k in 0..n {
            let sjk = ws.s.get(j, k);
            if k == j || sjk == 0.0 {
                continue;
            }
            let g = ws.b.get(j, k) / sum_ab - ws.a.get(j, k) / sum_aa;
            let coef = 2.0 * g / sjk;
            for ((df, a), b) in diff.iter_mut().zip(xj).zip(embeddings.row(k)) {
                *df = a - b;
            }
            for (o, df) in acc.iter_mut().zip(&diff) {
                *o += coef * df;
            }
        }
        grad.row_mut(j).copy_from_slice(&acc);
    }
    grad
}
