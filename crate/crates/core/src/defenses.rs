//! Label-party defenses: the distance-correlation penalty, randomized-response
//! label flipping and batch-scaled Gaussian gradient noise.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dcor::{distance_correlation, gradient_from_workspace, labels_as_f64, DEFAULT_DCOR_FLOOR};
use crate::error::{Error, Result};
use crate::nn::{bce_with_logits, MlpStack, StackGrads};
use crate::numerics::{norm2, sigmoid, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseConfig {
    /// Weight of the `log dCor` term.
    pub alpha_d: f64,
    /// Randomized-response budget; `None` disables label flipping.
    pub label_dp_epsilon: Option<f64>,
    /// Noise-power budget for [`perturb_gradients`]; `None` disables it.
    pub grad_noise_s: Option<f64>,
    pub dcor_floor: f64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            alpha_d: 0.0,
            label_dp_epsilon: None,
            grad_noise_s: None,
            dcor_floor: DEFAULT_DCOR_FLOOR,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_d.is_finite() && self.alpha_d >= 0.0) {
            return Err(Error::Config(format!("alpha_d must be >= 0, got {}", self.alpha_d)));
        }
        if let Some(eps) = self.label_dp_epsilon {
            if !(eps.is_finite() && eps > 0.0) {
                return Err(Error::Config(format!("label_dp_epsilon must be > 0, got {eps}")));
            }
        }
        if let Some(s) = self.grad_noise_s {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::Config(format!("grad_noise_s must be >= 0, got {s}")));
            }
        }
        if !(self.dcor_floor.is_finite() && self.dcor_floor > 0.0) {
            return Err(Error::Config(format!("dcor_floor must be > 0, got {}", self.dcor_floor)));
        }
        Ok(())
    }
}

/// `e^ε / (1 + e^ε)`.
pub fn keep_probability(epsilon: f64) -> f64 {
    sigmoid(epsilon)
}

/// Keeps `y` with probability [`keep_probability`], otherwise flips it.
pub fn randomized_response(y: u8, epsilon: f64, rng: &mut Rng) -> u8 {
    if rng.bernoulli(keep_probability(epsilon)) {
        y
    } else {
        1 - y
    }
}

/// Adds i.i.d. Gaussian noise with per-entry std `sqrt(s)·mean‖g_i‖/sqrt(d)`.
pub fn perturb_gradients(g: &Matrix, s: f64, rng: &mut Rng) -> Matrix {
    if s == 0.0 {
        return g.clone();
    }
    let (n, d) = g.shape();
    let mean_norm = g.iter_rows().map(norm2).sum::<f64>() / n as f64;
    let sigma = s.sqrt() * mean_norm / (d as f64).sqrt();
    let mut out = g.clone();
    for v in out.as_mut_slice() {
        *v += sigma * rng.normal();
    }
    out
}

/// Per-example flipped labels, drawn once and reused for the whole run.
#[derive(Debug, Clone)]
pub struct FlippedLabelStore {
    epsilon: Option<f64>,
    flipped: HashMap<u64, u8>,
}

impl FlippedLabelStore {
    pub fn new(epsilon: Option<f64>) -> Self {
        Self {
            epsilon,
            flipped: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.flipped.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flipped.is_empty()
    }

    /// Memoized randomized response; identity when label DP is off.
    pub fn defended_label(&mut self, index: u64, true_y: u8, rng: &mut Rng) -> u8 {
        match self.epsilon {
            None => true_y,
            Some(eps) => *self
                .flipped
                .entry(index)
                .or_insert_with(|| randomized_response(true_y, eps, rng)),
        }
    }

    pub fn defended_labels(&mut self, indices: &[u64], labels: &[u8], rng: &mut Rng) -> Vec<u8> {
        indices
            .iter()
            .zip(labels)
            .map(|(&i, &y)| self.defended_label(i, y, rng))
            .collect()
    }
}

/// Everything the label party derives from one received embedding.
#[derive(Debug, Clone)]
pub struct LabelPartyGradient {
    pub lc: f64,
    /// `log max(dCor, floor)`; `None` if the term was off or dropped.
    pub ld: Option<f64>,
    pub dcor: Option<f64>,
    /// Gradients of `h`; the dCor term does not depend on `h`.
    pub head_grads: StackGrads,
    /// Gradient before any noise.
    pub clean: Matrix,
    /// What is sent back to the non-label party.
    pub payload: Matrix,
}

/// `g = ∇Lc + α_d·∇Ld`, then optional noise.
pub fn combined_label_party_gradient(
    embedding: &Matrix,
    labels: &[u8],
    head: &mut MlpStack,
    cfg: &DefenseConfig,
    rng: &mut Rng,
) -> Result<LabelPartyGradient> {
    let n = embedding.rows();
    if head.output_dim() != 1 {
        return Err(Error::shape("label-party head with one output", format!("{}", head.output_dim())));
    }
    let y = labels_as_f64(labels);
    let logits = head.forward(embedding)?;
    let (lc, dl) = bce_with_logits(logits.as_slice(), &y)?;
    let (head_grads, mut g) = head.backward(&Matrix::from_vec_unchecked(n, 1, dl))?;

    let mut ld = None;
    let mut dcor = None;
    if cfg.alpha_d > 0.0 {
        match distance_correlation(embedding, &y) {
            Ok((value, ws)) => {
                let grad_ld = gradient_from_workspace(embedding, &ws, value, cfg.dcor_floor);
                g.add_scaled(&grad_ld, cfg.alpha_d)?;
                ld = Some(value.max(cfg.dcor_floor).ln());
                dcor = Some(value);
            }
            Err(Error::DegenerateLabels | Error::DegenerateEmbeddings) => {}
            Err(e) => return Err(e),
        }
    }
    let payload = match cfg.grad_noise_s {
        Some(s) => perturb_gradients(&g, s, rng),
        None => g.clone(),
    };
    Ok(LabelPartyGradient {
        lc,
        ld,
        dcor,
        head_grads,
        clean: g,
        payload,
    })
}
