//! Label-inference attacks available to the non-label party.
//!
//! The spectral attack scores each row of a forward-activation batch by
//! `|⟨x − μ, v⟩|` with `v` the top singular vector of the centered batch,
//! splits the scores with 1-D two-means and names one cluster positive. The
//! norm attack scores each backward-gradient row by its Euclidean norm.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    auc, column_mean, dot, norm2, top_singular_vector, two_means_1d, Matrix, Rng,
    POWER_ITERATION_MAX_ITER, POWER_ITERATION_TOL,
};

/// Seed of the power-iteration start vector. Fixed so the attack is a pure
/// function of its input.
const ATTACK_SEED: u64 = 0x5eed_a77a_c4;

pub const MIN_ATTACK_ROWS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentRule {
    /// Smaller cluster is positive (imbalanced data).
    BySize,
    /// Cluster with the larger score center is positive.
    ByScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakMode {
    Scores,
    HardLabels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Spectral,
    Norm,
}

impl AttackMethod {
    pub fn name(self) -> &'static str {
        match self {
            AttackMethod::Spectral => "spectral",
            AttackMethod::Norm => "norm",
        }
    }
}

impl LeakMode {
    pub fn name(self) -> &'static str {
        match self {
            LeakMode::Scores => "scores",
            LeakMode::HardLabels => "hard_labels",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackPrior {
    pub rule: AssignmentRule,
    /// Population positive ratio, if the attacker knows it. Above 0.5 the
    /// size rule flips to "larger cluster is positive".
    pub expected_positive_ratio: Option<f64>,
}

impl AttackPrior {
    pub fn by_size() -> Self {
        Self {
            rule: AssignmentRule::BySize,
            expected_positive_ratio: None,
        }
    }

    pub fn by_score() -> Self {
        Self {
            rule: AssignmentRule::ByScore,
            expected_positive_ratio: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralAttackResult {
    /// `|⟨x_i − μ, v⟩|`.
    pub scores: Vec<f64>,
    /// `scores` if the positive cluster has the higher center, else `−scores`.
    pub oriented_scores: Vec<f64>,
    pub hard_labels: Vec<u8>,
    /// (positive, negative) cluster sizes.
    pub cluster_sizes: (usize, usize),
    /// Midpoint between the two score centers.
    pub boundary: f64,
    pub degenerate: bool,
}

impl SpectralAttackResult {
    fn abstain(n: usize) -> Self {
        Self {
            scores: vec![0.0; n],
            oriented_scores: vec![0.0; n],
            hard_labels: vec![0; n],
            cluster_sizes: (0, n),
            boundary: 0.0,
            degenerate: true,
        }
    }

    pub fn attack_scores(&self, mode: LeakMode) -> Vec<f64> {
        match mode {
            LeakMode::Scores => self.oriented_scores.clone(),
            LeakMode::HardLabels => self.hard_labels.iter().map(|&y| f64::from(y)).collect(),
        }
    }
}

/// Spectral attack on one batch of activations.
///
/// Degenerate batches (all rows equal, or all scores equal) make the attack
/// abstain instead of failing.
pub fn spectral_attack(activations: &Matrix, prior: &AttackPrior) -> Result<SpectralAttackResult> {
    let n = activations.rows();
    if n < MIN_ATTACK_ROWS {
        return Err(Error::TooFewSamples {
            needed: MIN_ATTACK_ROWS,
            got: n,
        });
    }
    let mu = column_mean(activations);
    let centered = activations.sub_row_vector(&mu)?;
    let mut rng = Rng::new(ATTACK_SEED);
    let spec = match top_singular_vector(&centered, POWER_ITERATION_TOL, POWER_ITERATION_MAX_ITER, &mut rng) {
        Ok(s) => s,
        Err(Error::DegenerateSpectrum) => return Ok(SpectralAttackResult::abstain(n)),
        Err(e) => return Err(e),
    };
    let v = &spec.top_singular_vector;
    let scores: Vec<f64> = centered.iter_rows().map(|r| dot(r, v).abs()).collect();
    let clusters = match two_means_1d(&scores) {
        Ok(c) => c,
        Err(Error::DegenerateScores) => return Ok(SpectralAttackResult::abstain(n)),
        Err(e) => return Err(e),
    };
    // cluster 1 always holds the higher center
    let (size0, size1) = clusters.sizes();
    let positive: u8 = match prior.rule {
        AssignmentRule::ByScore => 1,
        AssignmentRule::BySize => {
            let want_larger = prior.expected_positive_ratio.is_some_and(|r| r > 0.5);
            if size0 == size1 {
                1
            } else if (size0 < size1) != want_larger {
                0
            } else {
                1
            }
        }
    };
    let hard_labels: Vec<u8> = clusters
        .assignments
        .iter()
        .map(|&a| u8::from(a == positive))
        .collect();
    let oriented_scores = if positive == 1 {
        scores.clone()
    } else {
        scores.iter().map(|s| -s).collect()
    };
    let pos = hard_labels.iter().filter(|&&y| y == 1).count();
    Ok(SpectralAttackResult {
        scores,
        oriented_scores,
        hard_labels,
        cluster_sizes: (pos, n - pos),
        boundary: clusters.boundary(),
        degenerate: false,
    })
}

/// Per-row gradient norms; larger means more likely positive.
pub fn norm_attack(grad: &Matrix) -> Result<Vec<f64>> {
    if grad.rows() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: grad.rows(),
        });
    }
    Ok(grad.iter_rows().map(norm2).collect())
}

/// AUC of attack scores against the true labels.
pub fn leak_auc(attack_scores: &[f64], true_labels: &[u8]) -> Result<f64> {
    auc(attack_scores, true_labels)
}

/// Spectral attack run batch by batch over a full activation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchedSpectral {
    pub leak_auc: f64,
    pub attack_scores: Vec<f64>,
    pub batches: usize,
    pub degenerate_batches: usize,
}

/// Row ranges of consecutive batches; a tail shorter than the attack
/// minimum is merged into the previous batch.
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let batch_size = batch_size.max(MIN_ATTACK_ROWS);
    let mut out: Vec<std::ops::Range<usize>> = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        if end - start < MIN_ATTACK_ROWS {
            if let Some(last) = out.last_mut() {
                last.end = end;
                break;
            }
        }
        out.push(start..end);
        start = end;
    }
    out
}

/// Attacks each batch separately, then scores the concatenation.
pub fn batched_spectral_leak(
    activations: &Matrix,
    labels: &[u8],
    batch_size: usize,
    prior: &AttackPrior,
    mode: LeakMode,
) -> Result<BatchedSpectral> {
    if labels.len() != activations.rows() {
        return Err(Error::shape(
            format!("{} labels", activations.rows()),
            format!("{}", labels.len()),
        ));
    }
    let ranges = batch_ranges(activations.rows(), batch_size);
    let mut attack_scores = Vec::with_capacity(labels.len());
    let mut degenerate_batches = 0;
    for r in &ranges {
        let idx: Vec<usize> = r.clone().collect();
        let res = spectral_attack(&activations.select_rows(&idx), prior)?;
        degenerate_batches += usize::from(res.degenerate);
        attack_scores.extend(res.attack_scores(mode));
    }
    Ok(BatchedSpectral {
        leak_auc: leak_auc(&attack_scores, labels)?,
        attack_scores,
        batches: ranges.len(),
        degenerate_batches,
    })
}

/// One row of the offline attack report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReportRow {
    pub layer: String,
    pub method: String,
    pub mode: String,
    pub leak_auc: f64,
    pub n: usize,
    pub degenerate_flag: bool,
}

pub fn write_report<W: Write>(rows: &[AttackReportRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

/// Two-component isotropic Gaussian mixture `(1−ε)·D + ε·W`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub mu_d: Vec<f64>,
    pub mu_w: Vec<f64>,
    /// Per-coordinate variance of both components.
    pub sigma2: f64,
    pub eps_mix: f64,
    pub n: usize,
}

impl MixtureSpec {
    /// `‖μ_D − μ_W‖² = factor · 6σ²/ε` along a random direction.
    pub fn with_separation_factor(
        dim: usize,
        eps_mix: f64,
        sigma2: f64,
        factor: f64,
        n: usize,
        rng: &mut Rng,
    ) -> Self {
        let dist = (factor * 6.0 * sigma2 / eps_mix).sqrt();
        let u = rng.unit_vector(dim);
        Self {
            mu_d: vec![0.0; dim],
            mu_w: u.iter().map(|x| x * dist).collect(),
            sigma2,
            eps_mix,
            n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_mix > 0.0 && self.eps_mix < 0.5) {
            return Err(Error::Config(format!("mixture weight must lie in (0, 0.5), got {}", self.eps_mix)));
        }
        if self.mu_d.len() != self.mu_w.len() || self.mu_d.is_empty() {
            return Err(Error::shape("means of equal nonzero length", format!("{} and {}", self.mu_d.len(), self.mu_w.len())));
        }
        if !(self.sigma2 > 0.0) {
            return Err(Error::Config("sigma2 must be positive".into()));
        }
        Ok(())
    }

    pub fn squared_separation(&self) -> f64 {
        self.mu_d
            .iter()
            .zip(&self.mu_w)
            .map(|(a, b)| (a - b).powi(2))
            .sum()
    }

    pub fn satisfies_separation(&self) -> bool {
        self.squared_separation() >= 6.0 * self.sigma2 / self.eps_mix
    }

    /// Exactly `round(ε·n)` rows from `W` (label 1), the rest from `D`, shuffled.
    pub fn sample(&self, rng: &mut Rng) -> Result<(Matrix, Vec<u8>)> {
        self.validate()?;
        let d = self.mu_d.len();
        let n_w = ((self.eps_mix * self.n as f64).round() as usize).clamp(1, self.n - 1);
        let mut labels: Vec<u8> = (0..self.n).map(|i| u8::from(i < n_w)).collect();
        rng.shuffle(&mut labels);
        let sd = self.sigma2.sqrt();
        let mut data = Vec::with_capacity(self.n * d);
        for &y in &labels {
            let mu = if y == 1 { &self.mu_w } else { &self.mu_d };
            data.extend(mu.iter().map(|m| m + sd * rng.normal()));
        }
        Ok((Matrix::new(self.n, d, data)?, labels))
    }
}

/// Fractions of `D` rows scoring above the boundary and of `W` rows below it.
pub fn misclassification_fractions(result: &SpectralAttackResult, labels: &[u8]) -> (f64, f64) {
    let (mut d_above, mut n_d, mut w_below, mut n_w) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &y) in result.scores.iter().zip(labels) {
        if y == 1 {
            n_w += 1;
            w_below += usize::from(s < result.boundary);
        } else {
            n_d += 1;
            d_above += usize::from(s > result.boundary);
        }
    }
    (d_above as f64 / n_d.max(1) as f64, w_below as f64 / n_w.max(1) as f64)
}
