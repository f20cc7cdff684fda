//! Declarative experiments: build both parties from a config, train, and
//! periodically measure test AUC, forward and backward leak AUC.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::{
    batch_ranges, batched_spectral_leak, leak_auc, norm_attack, AssignmentRule, AttackMethod, AttackPrior, LeakMode,
};
use crate::data::{generate_synthetic, load_csv_dataset, Batch, CsvSource, Dataset, SyntheticSpec};
use crate::dcor::{distance_correlation, labels_as_f64};
use crate::defenses::DefenseConfig;
use crate::error::{Error, Result};
use crate::nn::{Activation, AdamConfig, MlpStack};
use crate::numerics::Rng;
use crate::protocol::{
    capture_activations, dump_activations, evaluate, train_step, write_activation_csv, AuditLog, FeatureExtractor,
    GradientMessage, LabelParty, NonLabelParty,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic(SyntheticSpec),
    Csv(CsvSource),
}

impl DataConfig {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataConfig::Synthetic(s) => generate_synthetic(s),
            DataConfig::Csv(c) => load_csv_dataset(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Widths of `f`; the last one is the cut dimension.
    pub f_widths: Vec<usize>,
    /// Hidden widths of `h`; a one-logit output layer is always appended.
    pub h_widths: Vec<usize>,
    pub embedding_dim: usize,
    pub cut_activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            f_widths: vec![32; 5],
            h_widths: vec![32, 32],
            embedding_dim: 4,
            cut_activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            batch_size: 256,
            epochs: 5,
            seed: 0,
            lr: a.lr,
            adam_beta1: a.beta1,
            adam_beta2: a.beta2,
            adam_eps: a.eps,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub methods: Vec<AttackMethod>,
    pub rule: AssignmentRule,
    pub expected_positive_ratio: Option<f64>,
    pub mode: LeakMode,
    pub eval_every: usize,
    /// Rows per attacked batch; defaults to the training batch size.
    pub batch_size: Option<usize>,
    /// Cap on training rows attacked per evaluation.
    pub max_rows: Option<usize>,
    /// Training rows used for the cut-layer dCor estimate.
    pub dcor_rows: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            methods: vec![AttackMethod::Spectral, AttackMethod::Norm],
            rule: AssignmentRule::BySize,
            expected_positive_ratio: None,
            mode: LeakMode::Scores,
            eval_every: 50,
            batch_size: None,
            max_rows: None,
            dcor_rows: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub defense: DefenseConfig,
    #[serde(default)]
    pub attack: AttackConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.model.f_widths.is_empty() || self.model.f_widths.contains(&0) || self.model.h_widths.contains(&0) {
            return bad("layer widths must be positive and f needs at least one layer".into());
        }
        if self.train.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if self.train.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.train.lr.is_finite() && self.train.lr > 0.0) {
            return bad("lr must be positive".into());
        }
        if self.attack.eval_every == 0 || self.attack.dcor_rows < 2 {
            return bad("eval_every must be >= 1 and dcor_rows >= 2".into());
        }
        if let Some(r) = self.attack.expected_positive_ratio {
            if !(r > 0.0 && r < 1.0) {
                return bad("expected_positive_ratio must lie in (0, 1)".into());
            }
        }
        self.defense.validate()?;
        match &self.data {
            DataConfig::Synthetic(s) => s.validate()?,
            DataConfig::Csv(c) => {
                for p in std::iter::once(&c.train_path).chain(c.test_path.as_ref()) {
                    if !p.is_file() {
                        return bad(format!("data file {} does not exist", p.display()));
                    }
                }
                c.schema.label_column()?;
            }
        }
        Ok(())
    }

    fn prior(&self) -> AttackPrior {
        AttackPrior {
            rule: self.attack.rule,
            expected_positive_ratio: self.attack.expected_positive_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakEntry {
    pub layer: String,
    pub method: String,
    pub mode: String,
    pub leak_auc: Option<f64>,
    pub n: usize,
    pub degenerate: bool,
}

/// One evaluation snapshot; serialized as a single JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    pub train_lc: f64,
    pub train_ld: Option<f64>,
    pub cut_layer_dcor: Option<f64>,
    pub test_auc: Option<f64>,
    pub cut_spectral_leak_auc: Option<f64>,
    pub norm_leak_auc: Option<f64>,
    pub leak: Vec<LeakEntry>,
    pub final_record: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<MetricsRecord>,
    pub audit: AuditLog,
    /// `f` parameters followed by `h` parameters.
    pub final_params: Vec<f64>,
}

impl RunOutcome {
    pub fn final_record(&self) -> &MetricsRecord {
        self.records.last().expect("a run always writes a final record")
    }
}

fn build_parties(cfg: &ExperimentConfig, ds: &Dataset) -> Result<(NonLabelParty, LabelParty)> {
    let seed = cfg.train.seed;
    let mut init = Rng::with_stream(seed, 1);
    let fx = FeatureExtractor::new(
        ds.continuous_dim(),
        &ds.vocab_sizes,
        cfg.model.embedding_dim,
        &cfg.model.f_widths,
        cfg.model.cut_activation,
        &mut init,
    )?;
    let mut widths = cfg.model.h_widths.clone();
    widths.push(1);
    let head = MlpStack::glorot(fx.cut_dim(), &widths, Activation::Relu, Activation::Identity, &mut init)?;
    let adam = cfg.train.adam();
    Ok((
        NonLabelParty::new(fx, adam),
        LabelParty::new(head, adam, cfg.defense, Rng::with_stream(seed, 2))?,
    ))
}

struct Window {
    lc: f64,
    ld: f64,
    ld_count: usize,
    steps: usize,
}

impl Window {
    fn new() -> Self {
        Self {
            lc: 0.0,
            ld: 0.0,
            ld_count: 0,
            steps: 0,
        }
    }
}

fn measure(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    nl: &NonLabelParty,
    lp: &LabelParty,
    last_grad: Option<(&GradientMessage, &[u8])>,
) -> Result<(Option<f64>, Option<f64>, Vec<LeakEntry>)> {
    let test_auc = match evaluate(nl, lp, &ds.test) {
        Ok(v) => Some(v),
        Err(Error::SingleClass) => None,
        Err(e) => return Err(e),
    };
    let dcor_set = ds.train.head(cfg.attack.dcor_rows);
    let cut = nl
        .extractor
        .forward_all(dcor_set.features())?
        .pop()
        .expect("non-empty extractor");
    let cut_dcor = match distance_correlation(&cut, &labels_as_f64(&dcor_set.labels)) {
        Ok((v, _)) => Some(v),
        Err(Error::DegenerateLabels | Error::DegenerateEmbeddings) => None,
        Err(e) => return Err(e),
    };

    let mut entries = Vec::new();
    let mode = cfg.attack.mode;
    for method in &cfg.attack.methods {
        match method {
            AttackMethod::Spectral => {
                let rows = cfg.attack.max_rows.unwrap_or(ds.train.len());
                let subset = ds.train.head(rows);
                let captured = capture_activations(nl, &subset)?;
                let bs = cfg.attack.batch_size.unwrap_or(cfg.train.batch_size);
                for (k, m) in captured.layers.iter().enumerate() {
                    let (auc, degenerate) = match batched_spectral_leak(m, &captured.labels, bs, &cfg.prior(), mode) {
                        Ok(r) => (Some(r.leak_auc), r.degenerate_batches == r.batches),
                        Err(Error::SingleClass) => (None, false),
                        Err(e) => return Err(e),
                    };
                    entries.push(LeakEntry {
                        layer: format!("f{}", k + 1),
                        method: method.name().into(),
                        mode: mode.name().into(),
                        leak_auc: auc,
                        n: m.rows(),
                        degenerate,
                    });
                }
            }
            AttackMethod::Norm => {
                let (value, n) = match last_grad {
                    Some((g, labels)) => {
                        let scores = norm_attack(&g.grad)?;
                        match leak_auc(&scores, labels) {
                            Ok(v) => (Some(v), labels.len()),
                            Err(Error::SingleClass) => (None, labels.len()),
                            Err(e) => return Err(e),
                        }
                    }
                    None => (None, 0),
                };
                entries.push(LeakEntry {
                    layer: "cut_gradient".into(),
                    method: method.name().into(),
                    mode: LeakMode::Scores.name().into(),
                    leak_auc: value,
                    n,
                    degenerate: false,
                });
            }
        }
    }
    Ok((test_auc, cut_dcor, entries))
}

/// Trains per `cfg`, writing one JSON line per evaluation to `metrics`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    mut metrics: Option<&mut dyn Write>,
    dump_dir: Option<&Path>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let ds = cfg.data.load()?;
    let (mut nl, mut lp) = build_parties(cfg, &ds)?;
    let mut shuffle = Rng::with_stream(cfg.train.seed, 3);
    let mut audit = AuditLog::new();
    let n_train = ds.train.len();
    if n_train < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n_train });
    }
    let ranges = {
        // tails shorter than two rows join the previous batch
        let mut r = batch_ranges(n_train, cfg.train.batch_size);
        if r.len() > 1 && r.last().is_some_and(|l| l.len() < 2) {
            let tail = r.pop().expect("len > 1");
            r.last_mut().expect("len > 1").end = tail.end;
        }
        r
    };
    let total_steps = cfg.train.epochs * ranges.len();
    let cut_name = format!("f{}", cfg.model.f_widths.len());

    let mut records = Vec::new();
    let mut window = Window::new();
    let mut last: Option<(GradientMessage, Batch)> = None;
    let mut step = 0;
    for epoch in 0..cfg.train.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        shuffle.shuffle(&mut order);
        for r in &ranges {
            let batch = ds.train.select(&order[r.clone()]);
            let rep = train_step(&mut nl, &mut lp, &batch, &mut audit)
                .map_err(|e| Error::Protocol(format!("step {step} failed: {e}")))?;
            step += 1;
            window.steps += 1;
            window.lc += rep.lc;
            if let Some(ld) = rep.ld {
                window.ld += ld;
                window.ld_count += 1;
            }
            last = Some((rep.gradient, batch));
            let is_final = step == total_steps;
            if step % cfg.attack.eval_every == 0 || is_final {
                let lg = last.as_ref().map(|(g, b)| (g, b.labels.as_slice()));
                let (test_auc, cut_dcor, leak) = measure(cfg, &ds, &nl, &lp, lg)?;
                let find = |method: &str, layer: &str| {
                    leak.iter()
                        .find(|e| e.method == method && e.layer == layer)
                        .and_then(|e| e.leak_auc)
                };
                let rec = MetricsRecord {
                    step,
                    epoch,
                    train_lc: window.lc / window.steps as f64,
                    train_ld: (window.ld_count > 0).then(|| window.ld / window.ld_count as f64),
                    cut_layer_dcor: cut_dcor,
                    test_auc,
                    cut_spectral_leak_auc: find("spectral", &cut_name),
                    norm_leak_auc: find("norm", "cut_gradient"),
                    leak,
                    final_record: is_final,
                };
                if let Some(w) = metrics.as_mut() {
                    serde_json::to_writer(&mut **w, &rec)?;
                    w.write_all(b"\n")?;
                }
                records.push(rec);
                window = Window::new();
            }
        }
    }
    if let Some(w) = metrics.as_mut() {
        w.flush()?;
    }

    if let Some(dir) = dump_dir {
        let rows = cfg.attack.max_rows.unwrap_or(n_train);
        dump_activations(dir, &capture_activations(&nl, &ds.train.head(rows))?)?;
        if let Some((g, b)) = &last {
            let f = std::fs::File::create(dir.join("gradient.csv"))?;
            write_activation_csv("cut_gradient", &g.grad, Some(&b.labels), std::io::BufWriter::new(f))?;
        }
    }

    let mut final_params = nl.extractor.flat_params();
    final_params.extend(lp.head.flat_params());
    Ok(RunOutcome {
        records,
        audit,
        final_params,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Plain-text table of the evaluation records.
pub fn summary_table(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:>7} {:>5} {:>9} {:>9} {:>8} {:>9} {:>10} {:>9}\n",
        "step", "epoch", "train_lc", "train_ld", "cut_dcor", "test_auc", "cut_leak", "norm_leak"
    ));
    for r in records {
        out.push_str(&format!(
            "{:>7} {:>5} {:>9.4} {:>9} {:>8} {:>9} {:>10} {:>9}\n",
            r.step,
            r.epoch,
            r.train_lc,
            fmt_opt(r.train_ld),
            fmt_opt(r.cut_layer_dcor),
            fmt_opt(r.test_auc),
            fmt_opt(r.cut_spectral_leak_auc),
            fmt_opt(r.norm_leak_auc),
        ));
    }
    if let Some(last) = records.last() {
        let layers: Vec<String> = last
            .leak
            .iter()
            .filter(|e| e.method == "spectral")
            .map(|e| format!("{}={}", e.layer, fmt_opt(e.leak_auc)))
            .collect();
        if !layers.is_empty() {
            out.push_str(&format!("final spectral leak by layer: {}\n", layers.join(" ")));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            data: DataConfig::Synthetic(SyntheticSpec {
                n: 600,
                positive_ratio: 0.2,
                dim: 4,
                class_separation: 3.0,
                noise_sigma: 1.0,
                seed: 1,
                categorical_features: 1,
                vocab_size: 4,
                train_fraction: 0.9,
            }),
            model: ModelConfig {
                f_widths: vec![8, 8, 6],
                h_widths: vec![6],
                ..Default::default()
            },
            train: TrainConfig {
                batch_size: 64,
                epochs: 2,
                lr: 0.01,
                ..Default::default()
            },
            defense: DefenseConfig::default(),
            attack: AttackConfig {
                eval_every: 4,
                ..Default::default()
            },
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let good = serde_json::to_string(&small_config()).unwrap();
        assert!(ExperimentConfig::from_json(&good).is_ok());
        let typo = good.replace("\"alpha_d\"", "\"alpha\"");
        assert!(matches!(ExperimentConfig::from_json(&typo), Err(Error::Config(_))));
        let minimal = r#"{"data":{"synthetic":{"n":100,"positive_ratio":0.3,"dim":2,"class_separation":1,"noise_sigma":1,"seed":0}}}"#;
        let cfg = ExperimentConfig::from_json(minimal).unwrap();
        assert_eq!(cfg.model.f_widths.len(), 5);
        assert_eq!(cfg.attack.eval_every, 50);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut cfg = small_config();
        cfg.train.epochs = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = small_config();
        cfg.defense.alpha_d = -0.5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn run_writes_records_and_is_deterministic() {
        let cfg = small_config();
        let mut a = Vec::new();
        let out = run_experiment(&cfg, Some(&mut a), None).unwrap();
        let mut b = Vec::new();
        run_experiment(&cfg, Some(&mut b), None).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), out.records.len());
        for l in &lines {
            let rec: MetricsRecord = serde_json::from_str(l).unwrap();
            assert_eq!(rec.leak.len(), 4);
        }
        assert!(out.final_record().final_record);
        assert!(out.audit.violations().is_empty());
        assert_eq!(out.audit.len(), 2 * out.final_record().step);
    }

    #[test]
    fn attacks_do_not_change_training() {
        let cfg = small_config();
        let with = run_experiment(&cfg, None, None).unwrap();
        let mut quiet = cfg.clone();
        quiet.attack.methods.clear();
        let without = run_experiment(&quiet, None, None).unwrap();
        assert_eq!(with.final_params, without.final_params);
    }

    #[test]
    fn dump_directory_contents() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config();
        cfg.attack.max_rows = Some(50);
        run_experiment(&cfg, None, Some(dir.path())).unwrap();
        for f in ["layer1.csv", "layer2.csv", "layer3.csv", "labels.csv", "gradient.csv"] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
    }
}
