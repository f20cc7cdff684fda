//! Minimal feed-forward network core with exact reverse-mode gradients.
//!
//! Layers compute `act(X·W + b)` with `W` stored `in × out`. A forward pass
//! through [`MlpStack::forward`] caches every layer's input and
//! pre-activation; [`MlpStack::backward`] consumes that cache.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Identity),
            other => Err(Error::Checkpoint(format!("unknown activation code {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `in × out`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    /// Glorot-uniform weights in `±sqrt(6/(fan_in+fan_out))`, zero bias.
    pub fn glorot(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.uniform_range(-limit, limit))
            .collect();
        Layer {
            weight: Matrix::from_vec_unchecked(fan_in, fan_out, data),
            bias: vec![0.0; fan_out],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    fn pre_activation(&self, input: &Matrix) -> Result<Matrix> {
        let mut z = input.matmul(&self.weight)?;
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(z)
    }

    fn activate(&self, pre: &Matrix) -> Matrix {
        let data = pre
            .as_slice()
            .iter()
            .map(|&x| self.activation.apply(x))
            .collect();
        Matrix::from_vec_unchecked(pre.rows(), pre.cols(), data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Per-layer parameter gradients, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct StackGrads {
    pub layers: Vec<LayerGrad>,
}

impl StackGrads {
    /// Weight then bias of each layer, matching [`MlpStack::params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|g| [g.weight.as_slice(), g.bias.as_slice()])
            .collect()
    }
}

#[derive(Debug, Clone)]
struct ForwardCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
}

/// Ordered stack of affine + activation layers.
#[derive(Debug, Clone)]
pub struct MlpStack {
    layers: Vec<Layer>,
    cache: Option<ForwardCache>,
}

impl MlpStack {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    format!("layer {} input width {}", i + 1, pair[0].out_dim()),
                    format!("{}", pair[1].in_dim()),
                ));
            }
        }
        for l in &layers {
            if l.bias.len() != l.out_dim() {
                return Err(Error::shape(
                    format!("bias of length {}", l.out_dim()),
                    format!("{}", l.bias.len()),
                ));
            }
        }
        Ok(Self {
            layers,
            cache: None,
        })
    }

    /// Glorot-initialised stack `input → widths[0] → … → widths[last]`.
    /// Hidden layers use `hidden`; the final layer uses `output`.
    pub fn glorot(
        input: usize,
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        if input == 0 || widths.is_empty() || widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input;
        for (i, &w) in widths.iter().enumerate() {
            let act = if i + 1 == widths.len() { output } else { hidden };
            layers.push(Layer::glorot(fan_in, w, act, rng));
            fan_in = w;
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.cache = None;
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    fn check_input(&self, input: &Matrix) -> Result<()> {
        if input.cols() != self.input_dim() {
            return Err(Error::shape(
                format!("input with {} columns", self.input_dim()),
                format!("{} columns", input.cols()),
            ));
        }
        Ok(())
    }

    /// Forward pass that caches activations for [`backward`](Self::backward).
    pub fn forward(&mut self, input: &Matrix) -> Result<Matrix> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = input.clone();
        for layer in &self.layers {
            let z = layer.pre_activation(&current)?;
            let out = layer.activate(&z);
            inputs.push(current);
            pre.push(z);
            current = out;
        }
        self.cache = Some(ForwardCache { inputs, pre });
        Ok(current)
    }

    /// Output of every layer, without touching the training cache.
    pub fn forward_all(&self, input: &Matrix) -> Result<Vec<Matrix>> {
        self.check_input(input)?;
        let mut outs: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let z = layer.pre_activation(outs.last().unwrap_or(input))?;
            outs.push(layer.activate(&z));
        }
        Ok(outs)
    }

    pub fn predict(&self, input: &Matrix) -> Result<Matrix> {
        Ok(self.forward_all(input)?.pop().expect("non-empty stack"))
    }

    /// Reverse pass from `∂L/∂output`; returns parameter gradients and
    /// `∂L/∂input`. Consumes the cache of the preceding forward pass.
    pub fn backward(&mut self, grad_output: &Matrix) -> Result<(StackGrads, Matrix)> {
        let cache = self.cache.take().ok_or(Error::StaleCache)?;
        let rows = cache.inputs[0].rows();
        if grad_output.shape() != (rows, self.output_dim()) {
            self.cache = Some(cache);
            return Err(Error::StaleCache);
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = grad_output.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let pre = &cache.pre[i];
            for (d, &z) in delta.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                *d *= layer.activation.derivative(z);
            }
            let weight = cache.inputs[i].t_matmul(&delta)?;
            let mut bias = vec![0.0; layer.out_dim()];
            for r in delta.iter_rows() {
                for (b, d) in bias.iter_mut().zip(r) {
                    *b += d;
                }
            }
            let grad_in = delta.matmul_t(&layer.weight)?;
            grads.push(LayerGrad { weight, bias });
            delta = grad_in;
        }
        grads.reverse();
        Ok((StackGrads { layers: grads }, delta))
    }

    /// Mutable parameter slices: weight then bias of each layer.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.cache = None;
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn param_lens(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice().len(), l.bias.len()])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_lens().iter().sum()
    }

    /// Flat copy of every parameter in declaration order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(&l.bias).copied())
            .collect()
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SPLKMLP1";

impl MlpStack {
    /// Writes magic, layer dims and activations, then each layer's weight
    /// (row-major) and bias as little-endian `f64`.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            w.write_all(&(l.in_dim() as u32).to_le_bytes())?;
            w.write_all(&(l.out_dim() as u32).to_le_bytes())?;
            w.write_all(&[l.activation.code()])?;
        }
        for l in &self.layers {
            for v in l.weight.as_slice().iter().chain(&l.bias) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let count = u32::from_le_bytes(u32buf) as usize;
        let mut dims = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut u32buf)?;
            let fan_in = u32::from_le_bytes(u32buf) as usize;
            r.read_exact(&mut u32buf)?;
            let fan_out = u32::from_le_bytes(u32buf) as usize;
            let mut act = [0u8; 1];
            r.read_exact(&mut act)?;
            dims.push((fan_in, fan_out, Activation::from_code(act[0])?));
        }
        let mut read_f64s = |len: usize| -> Result<Vec<f64>> {
            let mut buf = [0u8; 8];
            (0..len)
                .map(|_| {
                    r.read_exact(&mut buf)?;
                    Ok(f64::from_le_bytes(buf))
                })
                .collect()
        };
        let mut layers = Vec::with_capacity(count);
        for (fan_in, fan_out, activation) in dims {
            let weight = Matrix::new(fan_in, fan_out, read_f64s(fan_in * fan_out)?)?;
            let bias = read_f64s(fan_out)?;
            layers.push(Layer {
                weight,
                bias,
                activation,
            });
        }
        Self::new(layers)
    }
}

/// Mean binary cross-entropy on logits and its gradient `(σ(ℓ) − y)/n`.
///
/// Uses `max(ℓ,0) − ℓ·y + ln(1 + e^{−|ℓ|})`, finite for every finite logit.
pub fn bce_with_logits(logits: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != labels.len() {
        return Err(Error::shape(
            format!("{} labels", logits.len()),
            format!("{}", labels.len()),
        ));
    }
    if logits.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&l, &y) in logits.iter().zip(labels) {
        if y != 0.0 && y != 1.0 {
            return Err(Error::InvalidLabel(y));
        }
        loss += l.max(0.0) - l * y + (-l.abs()).exp().ln_1p();
        grad.push((crate::numerics::sigmoid(l) - y) / n);
    }
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, param_lens: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                format!("{} parameter tensors", self.m.len()),
                format!("{} params / {} grads", params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::shape(
                    format!("tensor {i} of length {}", self.m[i].len()),
                    format!("param {} / grad {}", p.len(), g.len()),
                ));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Lookup table mapping category ids to dense rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub weights: Matrix,
}

impl EmbeddingTable {
    /// Uniform init in `±sqrt(6/(vocab+dim))`.
    pub fn glorot(vocab_size: usize, dim: usize, rng: &mut Rng) -> Self {
        Self {
            weights: Layer::glorot(vocab_size, dim, Activation::Identity, rng).weight,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    fn check(&self, indices: &[usize]) -> Result<()> {
        if indices.is_empty() {
            return Err(Error::EmptyMatrix);
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.vocab_size()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                vocab: self.vocab_size(),
            });
        }
        Ok(())
    }

    pub fn lookup(&self, indices: &[usize]) -> Result<Matrix> {
        self.check(indices)?;
        Ok(self.weights.select_rows(indices))
    }

    /// Scatter-adds row gradients into a table-shaped gradient.
    pub fn backward(&self, indices: &[usize], grad: &Matrix) -> Result<Matrix> {
        self.check(indices)?;
        if grad.shape() != (indices.len(), self.dim()) {
            return Err(Error::shape(
                format!("{}x{}", indices.len(), self.dim()),
                format!("{:?}", grad.shape()),
            ));
        }
        let mut out = Matrix::zeros(self.vocab_size(), self.dim());
        for (r, &i) in indices.iter().enumerate() {
            for (o, g) in out.row_mut(i).iter_mut().zip(grad.row(r)) {
                *o += g;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn random_matrix(rng: &mut Rng, n: usize, d: usize) -> Matrix {
        Matrix::new(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap()
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn relu_identity_layer() {
        let layer = Layer {
            weight: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            bias: vec![0.0, 0.0],
            activation: Activation::Relu,
        };
        let mut stack = MlpStack::new(vec![layer]).unwrap();
        let out = stack
            .forward(&Matrix::from_rows(&[vec![-1.0, 2.0]]).unwrap())
            .unwrap();
        assert_eq!(out.as_slice(), &[0.0, 2.0]);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut rng = Rng::new(1);
        let mut stack =
            MlpStack::glorot(3, &[4, 2], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        for p in stack.params_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        let out = stack.forward(&random_matrix(&mut rng, 5, 3)).unwrap();
        assert!(out.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_matches_scalar_loops() {
        let mut rng = Rng::new(2);
        let stack =
            MlpStack::glorot(4, &[5, 3], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let x = random_matrix(&mut rng, 6, 4);
        let out = stack.predict(&x).unwrap();
        for r in 0..6 {
            let mut act: Vec<f64> = x.row(r).to_vec();
            for layer in stack.layers() {
                let mut next = Vec::new();
                for o in 0..layer.out_dim() {
                    let mut z = layer.bias[o];
                    for (i, a) in act.iter().enumerate() {
                        z += a * layer.weight.get(i, o);
                    }
                    next.push(if layer.activation == Activation::Relu { z.max(0.0) } else { z });
                }
                act = next;
            }
            for (o, v) in act.iter().enumerate() {
                assert!((out.get(r, o) - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_and_stale_cache() {
        let mut rng = Rng::new(3);
        let mut stack =
            MlpStack::glorot(3, &[2], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        assert!(matches!(
            stack.forward(&Matrix::zeros(2, 4)),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(stack.backward(&Matrix::zeros(2, 2)), Err(Error::StaleCache)));
        stack.forward(&Matrix::zeros(2, 3)).unwrap();
        assert!(matches!(stack.backward(&Matrix::zeros(5, 2)), Err(Error::StaleCache)));
        stack.backward(&Matrix::zeros(2, 2)).unwrap();
        assert!(matches!(stack.backward(&Matrix::zeros(2, 2)), Err(Error::StaleCache)));
    }

    #[test]
    fn bce_examples() {
        let (l, g) = bce_with_logits(&[0.0], &[1.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g[0] + 0.5).abs() < 1e-12);
        let (l, _) = bce_with_logits(&[1.0], &[0.0]).unwrap();
        assert!((l - (1.0 + 1f64.exp()).ln()).abs() < 1e-12);
        assert!((l - 1.313261687518223).abs() < 1e-12);
        let (l, g) = bce_with_logits(&[30.0], &[1.0]).unwrap();
        assert!(l < 1e-12 && l >= 0.0 && g[0].is_finite());
        let (l, _) = bce_with_logits(&[-800.0], &[1.0]).unwrap();
        assert!((l - 800.0).abs() < 1e-9);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(4);
        let mut stack = MlpStack::glorot(
            3,
            &[5, 4, 1],
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        )
        .unwrap();
        let x = random_matrix(&mut rng, 8, 3);
        let y: Vec<f64> = (0..8).map(|i| (i % 2) as f64).collect();
        let loss = |s: &MlpStack, x: &Matrix| {
            let out = s.predict(x).unwrap();
            bce_with_logits(out.as_slice(), &y).unwrap().0
        };
        let out = stack.forward(&x).unwrap();
        let (_, dl) = bce_with_logits(out.as_slice(), &y).unwrap();
        let (grads, grad_x) = stack.backward(&Matrix::new(8, 1, dl).unwrap()).unwrap();

        let h = 1e-5;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let lens = stack.param_lens();
        for (t, len) in lens.iter().enumerate() {
            for j in 0..*len {
                let mut plus = stack.clone();
                plus.params_mut()[t][j] += h;
                let mut minus = stack.clone();
                minus.params_mut()[t][j] -= h;
                numeric.push((loss(&plus, &x) - loss(&minus, &x)) / (2.0 * h));
                analytic.push(grads.slices()[t][j]);
            }
        }
        for idx in 0..x.as_slice().len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[idx] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[idx] -= h;
            numeric.push((loss(&stack, &xp) - loss(&stack, &xm)) / (2.0 * h));
            analytic.push(grad_x.as_slice()[idx]);
        }
        assert!(max_rel_err(&analytic, &numeric) < 1e-5);
    }

    #[test]
    fn zero_upstream_gradient_and_dead_units() {
        let mut rng = Rng::new(5);
        let mut stack =
            MlpStack::glorot(2, &[3, 1], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let x = random_matrix(&mut rng, 4, 2);
        stack.forward(&x).unwrap();
        let (g, gx) = stack.backward(&Matrix::zeros(4, 1)).unwrap();
        assert!(g.slices().iter().all(|s| s.iter().all(|v| *v == 0.0)));
        assert!(gx.as_slice().iter().all(|v| *v == 0.0));

        // force unit 0 of the hidden layer dead on every row
        stack.layers_mut()[0].bias[0] = -1e6;
        stack.forward(&x).unwrap();
        let (g, _) = stack.backward(&Matrix::new(4, 1, vec![1.0; 4]).unwrap()).unwrap();
        for r in 0..2 {
            assert_eq!(g.layers[0].weight.get(r, 0), 0.0);
        }
        assert_eq!(g.layers[0].bias[0], 0.0);
        assert_eq!(g.layers[1].weight.get(0, 0), 0.0);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut state = AdamState::new(AdamConfig::default(), &[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        let before = p.clone();
        state.step(&mut [&mut p[..]], &[&[0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_size() {
        let cfg = AdamConfig::default();
        for g in [0.3, -4.0, 1e-3] {
            let mut state = AdamState::new(cfg, &[1]);
            let mut p = vec![0.0];
            state.step(&mut [&mut p[..]], &[&[g]]).unwrap();
            // m̂ = g, v̂ = g² after bias correction
            let expected = cfg.lr * g.abs() / (g.abs() + cfg.eps);
            assert!((p[0].abs() - expected).abs() < 1e-15);
            assert!((p[0].abs() - cfg.lr).abs() < 1e-7);
            assert_eq!(p[0].signum(), -g.signum());
        }
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut state = AdamState::new(AdamConfig::default(), &[2]);
        let mut p = vec![0.0; 3];
        assert!(matches!(
            state.step(&mut [&mut p[..]], &[&[0.0; 3]]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    fn train_run(seed: u64, steps: usize) -> (Vec<f64>, Vec<f64>) {
        let mut rng = Rng::new(seed);
        let mut stack =
            MlpStack::glorot(2, &[8, 1], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let mut adam = AdamState::new(
            AdamConfig {
                lr: 0.02,
                ..Default::default()
            },
            &stack.param_lens(),
        );
        let n = 64;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                vec![s + 0.3 * rng.normal(), rng.normal()]
            })
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let y: Vec<f64> = (0..n).map(|i| ((i + 1) % 2) as f64).collect();
        let mut losses = Vec::new();
        for _ in 0..steps {
            let out = stack.forward(&x).unwrap();
            let (l, dl) = bce_with_logits(out.as_slice(), &y).unwrap();
            losses.push(l);
            let (g, _) = stack.backward(&Matrix::new(n, 1, dl).unwrap()).unwrap();
            adam.step(&mut stack.params_mut(), &g.slices()).unwrap();
        }
        (losses, stack.flat_params())
    }

    #[test]
    fn adam_training_is_deterministic_and_converges() {
        let (l1, p1) = train_run(7, 200);
        let (l2, p2) = train_run(7, 200);
        assert_eq!(l1, l2);
        assert_eq!(p1, p2);
        assert!(l1[199] < 0.1 * l1[0], "{} vs {}", l1[199], l1[0]);
    }

    #[test]
    fn embedding_lookup_and_scatter() {
        let table = EmbeddingTable {
            weights: Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
        };
        let out = table.lookup(&[1, 1, 0]).unwrap();
        assert_eq!(out.as_slice(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let g = table
            .backward(&[1, 1, 0], &Matrix::new(3, 2, vec![1.0; 6]).unwrap())
            .unwrap();
        assert_eq!(g.as_slice(), &[1.0, 1.0, 2.0, 2.0]);
        assert!(matches!(
            table.lookup(&[2]),
            Err(Error::IndexOutOfRange { index: 2, vocab: 2 })
        ));
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        let mut rng = Rng::new(9);
        let table = EmbeddingTable::glorot(5, 3, &mut rng);
        let idx = [0, 4, 4, 2, 1, 0];
        let target = random_matrix(&mut rng, 6, 3);
        // L = ½‖lookup − target‖²
        let loss = |t: &EmbeddingTable| {
            let e = t.lookup(&idx).unwrap();
            e.as_slice()
                .iter()
                .zip(target.as_slice())
                .map(|(a, b)| 0.5 * (a - b).powi(2))
                .sum::<f64>()
        };
        let e = table.lookup(&idx).unwrap();
        let mut up = e.clone();
        up.add_scaled(&target, -1.0).unwrap();
        let g = table.backward(&idx, &up).unwrap();
        let h = 1e-5;
        let mut numeric = Vec::new();
        for j in 0..15 {
            let mut p = table.clone();
            p.weights.as_mut_slice()[j] += h;
            let mut m = table.clone();
            m.weights.as_mut_slice()[j] -= h;
            numeric.push((loss(&p) - loss(&m)) / (2.0 * h));
        }
        assert!(max_rel_err(g.as_slice(), &numeric) < 1e-5);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = Rng::new(10);
        let stack = MlpStack::glorot(4, &[3, 2], Activation::Relu, Activation::Identity, &mut rng)
            .unwrap();
        let mut buf = Vec::new();
        stack.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"SPLKMLP1");
        assert_eq!(buf.len(), 8 + 4 + 2 * 9 + 8 * (12 + 3 + 6 + 2));
        let back = MlpStack::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.layers(), stack.layers());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            MlpStack::read_checkpoint(&bad[..]),
            Err(Error::Checkpoint(_))
        ));
    }
}
