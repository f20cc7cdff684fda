//! Two-party split training with an explicit message layer.
//!
//! The non-label party owns the feature extractor `f` and sees only
//! features and [`GradientMessage`]s. The label party owns the head `h`,
//! the labels and the defenses, and sees only [`EmbeddingMessage`]s. Every
//! message crossing the boundary is recorded in an [`AuditLog`].

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Features};
use crate::defenses::{combined_label_party_gradient, DefenseConfig, FlippedLabelStore};
use crate::error::{Error, Result};
use crate::nn::{Activation, AdamConfig, AdamState, EmbeddingTable, MlpStack, StackGrads};
use crate::numerics::{auc, sigmoid, Matrix, Rng};

/// Embedding tables for categorical columns followed by an MLP.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub tables: Vec<EmbeddingTable>,
    pub mlp: MlpStack,
    cached_indices: Option<Vec<Vec<usize>>>,
    continuous_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorGrads {
    pub mlp: StackGrads,
    pub tables: Vec<Matrix>,
}

impl ExtractorGrads {
    /// Same order as [`FeatureExtractor::params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.mlp.slices();
        out.extend(self.tables.iter().map(|t| t.as_slice()));
        out
    }
}

impl FeatureExtractor {
    pub fn new(
        continuous_dim: usize,
        vocab_sizes: &[usize],
        embedding_dim: usize,
        widths: &[usize],
        cut_activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        if continuous_dim == 0 {
            return Err(Error::Config("at least one continuous feature is required".into()));
        }
        if !vocab_sizes.is_empty() && embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        let tables: Vec<EmbeddingTable> = vocab_sizes
            .iter()
            .map(|&v| EmbeddingTable::glorot(v.max(1), embedding_dim, rng))
            .collect();
        let input = continuous_dim + vocab_sizes.len() * embedding_dim;
        let mlp = MlpStack::glorot(input, widths, Activation::Relu, cut_activation, rng)?;
        Ok(Self {
            tables,
            mlp,
            cached_indices: None,
            continuous_dim,
        })
    }

    /// Wraps an existing stack with no categorical inputs.
    pub fn from_mlp(mlp: MlpStack) -> Self {
        let continuous_dim = mlp.input_dim();
        Self {
            tables: Vec::new(),
            mlp,
            cached_indices: None,
            continuous_dim,
        }
    }

    pub fn cut_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    fn input(&self, f: Features<'_>) -> Result<Matrix> {
        if f.continuous.cols() != self.continuous_dim {
            return Err(Error::shape(
                format!("{} continuous columns", self.continuous_dim),
                format!("{}", f.continuous.cols()),
            ));
        }
        if f.categorical.len() != self.tables.len() {
            return Err(Error::shape(
                format!("{} categorical columns", self.tables.len()),
                format!("{}", f.categorical.len()),
            ));
        }
        if self.tables.is_empty() {
            return Ok(f.continuous.clone());
        }
        let looked: Vec<Matrix> = self
            .tables
            .iter()
            .zip(f.categorical)
            .map(|(t, idx)| t.lookup(idx))
            .collect::<Result<_>>()?;
        let mut parts: Vec<&Matrix> = vec![f.continuous];
        parts.extend(looked.iter());
        Matrix::hconcat(&parts)
    }

    pub fn forward(&mut self, f: Features<'_>) -> Result<Matrix> {
        let x = self.input(f)?;
        let out = self.mlp.forward(&x)?;
        self.cached_indices = Some(f.categorical.to_vec());
        Ok(out)
    }

    /// Every layer's output, without touching the training cache.
    pub fn forward_all(&self, f: Features<'_>) -> Result<Vec<Matrix>> {
        self.mlp.forward_all(&self.input(f)?)
    }

    pub fn backward(&mut self, grad_cut: &Matrix) -> Result<ExtractorGrads> {
        let indices = self.cached_indices.take().ok_or(Error::StaleCache)?;
        let (mlp, grad_in) = self.mlp.backward(grad_cut)?;
        let mut tables = Vec::with_capacity(self.tables.len());
        let mut offset = self.continuous_dim;
        for (t, idx) in self.tables.iter().zip(&indices) {
            let cols: Vec<usize> = (offset..offset + t.dim()).collect();
            let rows: Vec<f64> = (0..grad_in.rows())
                .flat_map(|r| cols.iter().map(move |&c| (r, c)))
                .map(|(r, c)| grad_in.get(r, c))
                .collect();
            let part = Matrix::new(grad_in.rows(), t.dim(), rows)?;
            tables.push(t.backward(idx, &part)?);
            offset += t.dim();
        }
        Ok(ExtractorGrads { mlp, tables })
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.mlp.params_mut();
        out.extend(self.tables.iter_mut().map(|t| t.weights.as_mut_slice()));
        out
    }

    pub fn param_lens(&self) -> Vec<usize> {
        let mut out = self.mlp.param_lens();
        out.extend(self.tables.iter().map(|t| t.weights.as_slice().len()));
        out
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = self.mlp.flat_params();
        for t in &self.tables {
            out.extend_from_slice(t.weights.as_slice());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMessage {
    pub batch_id: u64,
    pub embedding: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientMessage {
    pub batch_id: u64,
    pub grad: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Party {
    NonLabel,
    Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Embedding,
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub sender: Party,
    pub receiver: Party,
    pub kind: MessageKind,
    pub batch_id: u64,
    pub shape: (usize, usize),
}

/// Ordered record of everything sent between the parties.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditLog {
    records: Vec<AuditRecord>,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, record: AuditRecord) {
        self.records.push(record);
    }

    fn embedding(&mut self, m: &EmbeddingMessage) {
        self.push(AuditRecord {
            sender: Party::NonLabel,
            receiver: Party::Label,
            kind: MessageKind::Embedding,
            batch_id: m.batch_id,
            shape: m.embedding.shape(),
        });
    }

    fn gradient(&mut self, m: &GradientMessage) {
        self.push(AuditRecord {
            sender: Party::Label,
            receiver: Party::NonLabel,
            kind: MessageKind::Gradient,
            batch_id: m.batch_id,
            shape: m.grad.shape(),
        });
    }

    /// Every record breaking the direction, alternation or id rules.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut last_embedding: Option<&AuditRecord> = None;
        let mut awaiting_gradient = false;
        for (i, r) in self.records.iter().enumerate() {
            match r.kind {
                MessageKind::Embedding => {
                    if (r.sender, r.receiver) != (Party::NonLabel, Party::Label) {
                        out.push(format!("record {i}: embedding sent {:?} -> {:?}", r.sender, r.receiver));
                    }
                    if awaiting_gradient {
                        out.push(format!("record {i}: embedding before the previous gradient"));
                    }
                    if let Some(prev) = last_embedding {
                        if r.batch_id <= prev.batch_id {
                            out.push(format!("record {i}: batch id {} not increasing", r.batch_id));
                        }
                    }
                    last_embedding = Some(r);
                    awaiting_gradient = true;
                }
                MessageKind::Gradient => {
                    if (r.sender, r.receiver) != (Party::Label, Party::NonLabel) {
                        out.push(format!("record {i}: gradient sent {:?} -> {:?}", r.sender, r.receiver));
                    }
                    match last_embedding {
                        Some(e) if awaiting_gradient => {
                            if e.batch_id != r.batch_id {
                                out.push(format!("record {i}: gradient for batch {} answers {}", r.batch_id, e.batch_id));
                            }
                            if e.shape != r.shape {
                                out.push(format!("record {i}: gradient shape {:?} vs embedding {:?}", r.shape, e.shape));
                            }
                        }
                        _ => out.push(format!("record {i}: gradient without a pending embedding")),
                    }
                    awaiting_gradient = false;
                }
            }
        }
        out
    }
}

/// Holds `f`; never sees labels.
#[derive(Debug, Clone)]
pub struct NonLabelParty {
    pub extractor: FeatureExtractor,
    adam: AdamState,
    next_batch_id: u64,
    pending: Option<(u64, (usize, usize))>,
}

impl NonLabelParty {
    pub fn new(extractor: FeatureExtractor, adam: AdamConfig) -> Self {
        let lens = extractor.param_lens();
        Self {
            extractor,
            adam: AdamState::new(adam, &lens),
            next_batch_id: 0,
            pending: None,
        }
    }

    pub fn send_embedding(&mut self, features: Features<'_>) -> Result<EmbeddingMessage> {
        if self.pending.is_some() {
            return Err(Error::Protocol("previous batch has not received its gradient".into()));
        }
        let embedding = self.extractor.forward(features)?;
        let batch_id = self.next_batch_id;
        self.next_batch_id += 1;
        self.pending = Some((batch_id, embedding.shape()));
        Ok(EmbeddingMessage { batch_id, embedding })
    }

    /// Backpropagates `g` through `f` and takes one Adam step.
    pub fn receive_gradient(&mut self, msg: &GradientMessage) -> Result<()> {
        match self.pending {
            Some((id, shape)) if id == msg.batch_id && shape == msg.grad.shape() => {}
            Some((id, _)) => {
                return Err(Error::Protocol(format!(
                    "gradient for batch {} does not answer pending batch {id}",
                    msg.batch_id
                )))
            }
            None => return Err(Error::Protocol("unexpected gradient".into())),
        }
        self.pending = None;
        let grads = self.extractor.backward(&msg.grad)?;
        self.adam.step(&mut self.extractor.params_mut(), &grads.slices())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelStepInfo {
    pub lc: f64,
    pub ld: Option<f64>,
    pub dcor: Option<f64>,
}

/// Holds `h`, the labels and the defenses; never sees features.
#[derive(Debug, Clone)]
pub struct LabelParty {
    pub head: MlpStack,
    adam: AdamState,
    pub defense: DefenseConfig,
    flips: FlippedLabelStore,
    rng: Rng,
    last_batch_id: Option<u64>,
}

impl LabelParty {
    pub fn new(head: MlpStack, adam: AdamConfig, defense: DefenseConfig, rng: Rng) -> Result<Self> {
        defense.validate()?;
        if head.output_dim() != 1 {
            return Err(Error::Config("label-party head must end in one logit".into()));
        }
        let lens = head.param_lens();
        Ok(Self {
            head,
            adam: AdamState::new(adam, &lens),
            defense,
            flips: FlippedLabelStore::new(defense.label_dp_epsilon),
            rng,
            last_batch_id: None,
        })
    }

    /// Computes the loss on its own (possibly flipped) labels, updates `h`
    /// and returns the gradient for the embedding.
    pub fn receive_embedding(
        &mut self,
        msg: &EmbeddingMessage,
        labels: &[u8],
        example_indices: &[u64],
    ) -> Result<(GradientMessage, LabelStepInfo)> {
        if self.last_batch_id.is_some_and(|last| msg.batch_id <= last) {
            return Err(Error::Protocol(format!("batch id {} out of order", msg.batch_id)));
        }
        if labels.len() != msg.embedding.rows() || example_indices.len() != labels.len() {
            return Err(Error::shape(
                format!("{} labels", msg.embedding.rows()),
                format!("{}", labels.len()),
            ));
        }
        if labels.len() < 2 {
            return Err(Error::TooFewSamples {
                needed: 2,
                got: labels.len(),
            });
        }
        self.last_batch_id = Some(msg.batch_id);
        let effective = self.flips.defended_labels(example_indices, labels, &mut self.rng);
        let out = combined_label_party_gradient(&msg.embedding, &effective, &mut self.head, &self.defense, &mut self.rng)?;
        self.adam.step(&mut self.head.params_mut(), &out.head_grads.slices())?;
        Ok((
            GradientMessage {
                batch_id: msg.batch_id,
                grad: out.payload,
            },
            LabelStepInfo {
                lc: out.lc,
                ld: out.ld,
                dcor: out.dcor,
            },
        ))
    }

    pub fn predict_logits(&self, embedding: &Matrix) -> Result<Vec<f64>> {
        Ok(self.head.predict(embedding)?.into_vec())
    }
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub batch_id: u64,
    pub lc: f64,
    pub ld: Option<f64>,
    pub dcor: Option<f64>,
    pub embedding: EmbeddingMessage,
    pub gradient: GradientMessage,
}

/// One full forward/backward exchange on `batch`.
pub fn train_step(nl: &mut NonLabelParty, lp: &mut LabelParty, batch: &Batch, audit: &mut AuditLog) -> Result<StepReport> {
    let emb = nl.send_embedding(batch.features())?;
    audit.embedding(&emb);
    let (grad, info) = lp.receive_embedding(&emb, &batch.labels, &batch.example_indices)?;
    audit.gradient(&grad);
    nl.receive_gradient(&grad)?;
    Ok(StepReport {
        batch_id: emb.batch_id,
        lc: info.lc,
        ld: info.ld,
        dcor: info.dcor,
        embedding: emb,
        gradient: grad,
    })
}

/// Predicted positive probabilities of the composite model.
pub fn predict(nl: &NonLabelParty, lp: &LabelParty, batch: &Batch) -> Result<Vec<f64>> {
    let cut = nl
        .extractor
        .forward_all(batch.features())?
        .pop()
        .expect("non-empty extractor");
    Ok(lp.predict_logits(&cut)?.into_iter().map(sigmoid).collect())
}

/// Test AUC against the true labels.
pub fn evaluate(nl: &NonLabelParty, lp: &LabelParty, test: &Batch) -> Result<f64> {
    auc(&predict(nl, lp, test)?, &test.labels)
}

/// Every `f` layer's output on a dataset, with the experimenter's labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturedActivations {
    pub layers: Vec<Matrix>,
    pub labels: Vec<u8>,
}

pub fn capture_activations(nl: &NonLabelParty, data: &Batch) -> Result<CapturedActivations> {
    if data.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    Ok(CapturedActivations {
        layers: nl.extractor.forward_all(data.features())?,
        labels: data.labels.clone(),
    })
}

/// `layer,row,c0..c{d-1},label` rows for one matrix.
pub fn write_activation_csv<W: Write>(layer: &str, m: &Matrix, labels: Option<&[u8]>, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["layer".to_string(), "row".to_string()];
    header.extend((0..m.cols()).map(|c| format!("c{c}")));
    if labels.is_some() {
        header.push("label".into());
    }
    wr.write_record(&header)?;
    for (r, row) in m.iter_rows().enumerate() {
        let mut rec = vec![layer.to_string(), r.to_string()];
        rec.extend(row.iter().map(|v| format!("{v}")));
        if let Some(l) = labels {
            rec.push(l[r].to_string());
        }
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

/// One `layer<k>.csv` per captured layer plus `labels.csv`.
pub fn dump_activations(dir: &Path, captured: &CapturedActivations) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (k, m) in captured.layers.iter().enumerate() {
        let name = format!("layer{}", k + 1);
        let f = std::fs::File::create(dir.join(format!("{name}.csv")))?;
        write_activation_csv(&name, m, Some(&captured.labels), std::io::BufWriter::new(f))?;
    }
    write_labels_csv(&captured.labels, std::fs::File::create(dir.join("labels.csv"))?)
}

pub fn write_labels_csv<W: Write>(labels: &[u8], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["row", "label"])?;
    for (r, y) in labels.iter().enumerate() {
        wr.write_record([r.to_string(), y.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

/// Matrices of a dump file, grouped by the `layer` column in file order.
pub fn read_activation_csv(path: &Path) -> Result<Vec<(String, Matrix)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    let value_cols: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with('c') && h[1..].parse::<usize>().is_ok())
        .map(|(i, _)| i)
        .collect();
    if value_cols.is_empty() {
        return Err(Error::Config(format!("{}: no c<k> value columns", path.display())));
    }
    let layer_col = header.iter().position(|h| h == "layer");
    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::MalformedRow {
                row: row + 2,
                expected: header.len(),
                got: rec.len(),
            });
        }
        let layer = layer_col.map_or_else(String::new, |i| rec[i].to_string());
        if groups.last().is_none_or(|(l, _)| *l != layer) {
            groups.push((layer, Vec::new()));
        }
        let data = &mut groups.last_mut().expect("pushed").1;
        for &c in &value_cols {
            let v: f64 = rec[c].trim().parse().map_err(|_| Error::UnparseableReal {
                row: row + 2,
                column: header[c].to_string(),
                value: rec[c].to_string(),
            })?;
            data.push(v);
        }
    }
    let d = value_cols.len();
    groups
        .into_iter()
        .map(|(l, data)| Ok((l, Matrix::new(data.len() / d, d, data)?)))
        .collect()
}

/// The `label` column of a CSV file.
pub fn read_labels_csv(path: &Path) -> Result<Vec<u8>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let col = rdr
        .headers()?
        .iter()
        .position(|h| h == "label")
        .ok_or(Error::MissingLabelColumn)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let v: f64 = rec[col].trim().parse().map_err(|_| Error::InvalidLabel(f64::NAN))?;
        if v != 0.0 && v != 1.0 {
            return Err(Error::InvalidLabel(v));
        }
        out.push(v as u8);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::bce_with_logits;

    fn toy_batch(rng: &mut Rng, n: usize, d: usize, offset: u64) -> Batch {
        let data: Vec<f64> = (0..n * d).map(|_| rng.uniform()).collect();
        let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 3 == 0)).collect();
        let idx: Vec<u64> = (0..n as u64).map(|i| i + offset).collect();
        Batch::new(Matrix::new(n, d, data).unwrap(), Vec::new(), labels, idx).unwrap()
    }

    fn parties(seed: u64, defense: DefenseConfig) -> (NonLabelParty, LabelParty) {
        let mut rng = Rng::new(seed);
        let fx = FeatureExtractor::new(3, &[], 4, &[6, 5], Activation::Relu, &mut rng).unwrap();
        let head = MlpStack::glorot(5, &[4, 1], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let adam = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        (
            NonLabelParty::new(fx, adam),
            LabelParty::new(head, adam, defense, Rng::with_stream(seed, 9)).unwrap(),
        )
    }

    #[test]
    fn split_matches_monolithic_gradients() {
        let mut rng = Rng::new(1);
        let (nl, lp) = parties(2, DefenseConfig::default());
        let batch = toy_batch(&mut rng, 10, 3, 0);
        let mut layers = nl.extractor.mlp.layers().to_vec();
        layers.extend(lp.head.layers().iter().cloned());
        let mut mono = MlpStack::new(layers).unwrap();
        let out = mono.forward(&batch.continuous).unwrap();
        let y: Vec<f64> = batch.labels.iter().map(|&v| f64::from(v)).collect();
        let (_, dl) = bce_with_logits(out.as_slice(), &y).unwrap();
        let (mono_grads, _) = mono.backward(&Matrix::new(10, 1, dl).unwrap()).unwrap();

        let mut fx = nl.extractor.clone();
        let mut head = lp.head.clone();
        let emb = fx.forward(batch.features()).unwrap();
        let res = combined_label_party_gradient(&emb, &batch.labels, &mut head, &DefenseConfig::default(), &mut rng)
            .unwrap();
        let f_grads = fx.backward(&res.payload).unwrap();
        let mut split: Vec<f64> = f_grads.slices().concat();
        split.extend(res.head_grads.slices().concat());
        let mono_flat = mono_grads.slices().concat();
        assert_eq!(split.len(), mono_flat.len());
        for (a, b) in split.iter().zip(&mono_flat) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn audit_log_has_two_records_per_step() {
        let mut rng = Rng::new(3);
        let (mut nl, mut lp) = parties(4, DefenseConfig::default());
        let mut audit = AuditLog::new();
        for k in 0..7 {
            let b = toy_batch(&mut rng, 8, 3, 8 * k);
            train_step(&mut nl, &mut lp, &b, &mut audit).unwrap();
        }
        assert_eq!(audit.len(), 14);
        for (i, r) in audit.records().iter().enumerate() {
            let want = if i % 2 == 0 { MessageKind::Embedding } else { MessageKind::Gradient };
            assert_eq!(r.kind, want);
            assert_eq!(r.batch_id, (i / 2) as u64);
        }
        assert!(audit.violations().is_empty());
    }

    #[test]
    fn audit_detects_violations() {
        let mut log = AuditLog::new();
        log.push(AuditRecord {
            sender: Party::Label,
            receiver: Party::NonLabel,
            kind: MessageKind::Embedding,
            batch_id: 0,
            shape: (2, 2),
        });
        log.push(AuditRecord {
            sender: Party::Label,
            receiver: Party::NonLabel,
            kind: MessageKind::Gradient,
            batch_id: 1,
            shape: (2, 3),
        });
        log.push(AuditRecord {
            sender: Party::Label,
            receiver: Party::NonLabel,
            kind: MessageKind::Gradient,
            batch_id: 1,
            shape: (2, 3),
        });
        assert_eq!(log.violations().len(), 4);
    }

    #[test]
    fn out_of_order_gradient_is_rejected() {
        let mut rng = Rng::new(5);
        let (mut nl, _) = parties(6, DefenseConfig::default());
        let b = toy_batch(&mut rng, 6, 3, 0);
        let emb = nl.send_embedding(b.features()).unwrap();
        assert!(matches!(nl.send_embedding(b.features()), Err(Error::Protocol(_))));
        let wrong = GradientMessage {
            batch_id: emb.batch_id + 1,
            grad: Matrix::zeros(6, 5),
        };
        assert!(matches!(nl.receive_gradient(&wrong), Err(Error::Protocol(_))));
    }

    #[test]
    fn replayed_noisy_gradients_reproduce_parameters() {
        let defense = DefenseConfig {
            grad_noise_s: Some(4.0),
            alpha_d: 0.05,
            ..Default::default()
        };
        let (mut nl, mut lp) = parties(7, defense);
        let mut fresh = nl.clone();
        let mut rng = Rng::new(8);
        let mut audit = AuditLog::new();
        let mut log = Vec::new();
        for k in 0..5 {
            let b = toy_batch(&mut rng, 9, 3, 9 * k);
            let rep = train_step(&mut nl, &mut lp, &b, &mut audit).unwrap();
            log.push((b, rep.gradient));
        }
        for (b, g) in &log {
            fresh.send_embedding(b.features()).unwrap();
            fresh.receive_gradient(g).unwrap();
        }
        assert_eq!(fresh.extractor.flat_params(), nl.extractor.flat_params());
        assert!(audit.violations().is_empty());
    }

    #[test]
    fn noisy_payload_differs_from_clean() {
        let mut rng = Rng::new(9);
        let emb = Matrix::new(8, 3, (0..24).map(|_| rng.normal()).collect()).unwrap();
        let labels: Vec<u8> = (0..8).map(|i| u8::from(i < 3)).collect();
        let mut head = MlpStack::glorot(3, &[1], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let cfg = DefenseConfig {
            grad_noise_s: Some(1.0),
            ..Default::default()
        };
        let out = combined_label_party_gradient(&emb, &labels, &mut head, &cfg, &mut rng).unwrap();
        assert_ne!(out.payload, out.clean);
    }

    #[test]
    fn capture_shapes_and_consistency() {
        let mut rng = Rng::new(10);
        let fx = FeatureExtractor::new(3, &[], 4, &[7, 6, 5, 4, 3], Activation::Relu, &mut rng).unwrap();
        let head = MlpStack::glorot(3, &[1], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let mut nl = NonLabelParty::new(fx, AdamConfig::default());
        let lp = LabelParty::new(head, AdamConfig::default(), DefenseConfig::default(), Rng::new(1)).unwrap();
        let b = toy_batch(&mut rng, 100, 3, 0);
        let cap = capture_activations(&nl, &b).unwrap();
        let widths: Vec<(usize, usize)> = cap.layers.iter().map(|m| m.shape()).collect();
        assert_eq!(widths, vec![(100, 7), (100, 6), (100, 5), (100, 4), (100, 3)]);
        assert_eq!(cap, capture_activations(&nl, &b).unwrap());
        let emb = nl.send_embedding(b.features()).unwrap();
        assert_eq!(&emb.embedding, cap.layers.last().unwrap());
        let p = predict(&nl, &lp, &b).unwrap();
        assert_eq!(p.len(), 100);
    }

    #[test]
    fn constant_model_has_half_auc() {
        let mut rng = Rng::new(11);
        let (nl, mut lp) = parties(12, DefenseConfig::default());
        for p in lp.head.params_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        let b = toy_batch(&mut rng, 30, 3, 0);
        assert_eq!(evaluate(&nl, &lp, &b).unwrap(), 0.5);
        let single = Batch::new(b.continuous.clone(), Vec::new(), vec![1; 30], b.example_indices.clone()).unwrap();
        assert!(matches!(evaluate(&nl, &lp, &single), Err(Error::SingleClass)));
    }

    #[test]
    fn categorical_extractor_gradient_matches_finite_differences() {
        let mut rng = Rng::new(13);
        let mut fx = FeatureExtractor::new(2, &[4, 3], 2, &[5, 3], Activation::Identity, &mut rng).unwrap();
        let n = 6;
        let cont = Matrix::new(n, 2, (0..n * 2).map(|_| rng.uniform()).collect()).unwrap();
        let cats = vec![vec![0, 3, 3, 1, 2, 0], vec![2, 2, 0, 1, 1, 0]];
        let target = Matrix::new(n, 3, (0..n * 3).map(|_| rng.normal()).collect()).unwrap();
        let feats = Features {
            continuous: &cont,
            categorical: &cats,
        };
        let loss = |fx: &FeatureExtractor| {
            let out = fx.forward_all(feats).unwrap().pop().unwrap();
            out.as_slice()
                .iter()
                .zip(target.as_slice())
                .map(|(a, b)| 0.5 * (a - b).powi(2))
                .sum::<f64>()
        };
        let out = fx.forward(feats).unwrap();
        let mut up = out.clone();
        up.add_scaled(&target, -1.0).unwrap();
        let grads = fx.backward(&up).unwrap();
        let analytic: Vec<f64> = grads.slices().concat();
        let lens = fx.param_lens();
        let h = 1e-6;
        let mut k = 0;
        for (t, len) in lens.iter().enumerate() {
            for j in 0..*len {
                let mut p = fx.clone();
                p.params_mut()[t][j] += h;
                let mut m = fx.clone();
                m.params_mut()[t][j] -= h;
                let num = (loss(&p) - loss(&m)) / (2.0 * h);
                let a = analytic[k];
                assert!((num - a).abs() / num.abs().max(a.abs()).max(1e-6) < 1e-5, "{t}/{j}: {num} vs {a}");
                k += 1;
            }
        }
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Matrix::from_rows(&[vec![0.5, 1.0], vec![-2.0, 3.25]]).unwrap();
        let cap = CapturedActivations {
            layers: vec![m.clone()],
            labels: vec![0, 1],
        };
        dump_activations(dir.path(), &cap).unwrap();
        let text = std::fs::read_to_string(dir.path().join("layer1.csv")).unwrap();
        assert!(text.starts_with("layer,row,c0,c1,label\n"));
        let back = read_activation_csv(&dir.path().join("layer1.csv")).unwrap();
        assert_eq!(back, vec![("layer1".to_string(), m)]);
        assert_eq!(read_labels_csv(&dir.path().join("labels.csv")).unwrap(), vec![0, 1]);
    }
}
