//! Datasets: a synthetic Gaussian benchmark and headered-CSV ingestion.
//!
//! Real-valued columns are min-max normalized with training-split
//! statistics (NA filled with 0 first); categorical columns are mapped to
//! integers by first appearance, NA becoming the empty-string category.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Rows of features, labels and global example ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `n × c`, entries in `[0, 1]`.
    pub continuous: Matrix,
    /// One vector of length `n` per categorical column.
    pub categorical: Vec<Vec<usize>>,
    pub labels: Vec<u8>,
    pub example_indices: Vec<u64>,
}

/// The feature-only view handed to the non-label party.
#[derive(Debug, Clone, Copy)]
pub struct Features<'a> {
    pub continuous: &'a Matrix,
    pub categorical: &'a [Vec<usize>],
}

impl Batch {
    pub fn new(
        continuous: Matrix,
        categorical: Vec<Vec<usize>>,
        labels: Vec<u8>,
        example_indices: Vec<u64>,
    ) -> Result<Self> {
        let n = continuous.rows();
        if labels.len() != n || example_indices.len() != n || categorical.iter().any(|c| c.len() != n) {
            return Err(Error::shape(format!("{n} rows in every field"), "ragged batch"));
        }
        if let Some(&y) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::InvalidLabel(f64::from(y)));
        }
        Ok(Self {
            continuous,
            categorical,
            labels,
            example_indices,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    pub fn features(&self) -> Features<'_> {
        Features {
            continuous: &self.continuous,
            categorical: &self.categorical,
        }
    }

    pub fn select(&self, rows: &[usize]) -> Batch {
        Batch {
            continuous: self.continuous.select_rows(rows),
            categorical: self
                .categorical
                .iter()
                .map(|c| rows.iter().map(|&r| c[r]).collect())
                .collect(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            example_indices: rows.iter().map(|&r| self.example_indices[r]).collect(),
        }
    }

    /// First `n` rows (or all of them).
    pub fn head(&self, n: usize) -> Batch {
        let rows: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Batch,
    pub test: Batch,
    /// Vocabulary size of each categorical column.
    pub vocab_sizes: Vec<usize>,
    /// Source string of every category id, per column.
    pub categories: Vec<Vec<String>>,
    pub continuous_names: Vec<String>,
    pub categorical_names: Vec<String>,
}

impl Dataset {
    pub fn continuous_dim(&self) -> usize {
        self.train.continuous.cols()
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministic uniform in `[0, 1)` from `(seed, salt, index)`.
fn hash_unit(seed: u64, salt: u64, index: u64) -> f64 {
    let h = splitmix64(splitmix64(seed ^ salt.rotate_left(17)) ^ index);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

const SPLIT_SALT: u64 = 0x5917;
const SUBSAMPLE_SALT: u64 = 0x5ab5;

/// Whether example `index` falls in the training split.
pub fn in_train_split(seed: u64, index: u64, train_fraction: f64) -> bool {
    hash_unit(seed, SPLIT_SALT, index) < train_fraction
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub positive_ratio: f64,
    pub dim: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub categorical_features: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

fn default_vocab() -> usize {
    8
}

fn default_train_fraction() -> f64 {
    0.9
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.n < 4 {
            return bad("n must be at least 4");
        }
        if !(self.positive_ratio > 0.0 && self.positive_ratio < 1.0) {
            return bad("positive_ratio must lie in (0, 1)");
        }
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if !(self.class_separation.is_finite() && self.class_separation >= 0.0) {
            return bad("class_separation must be >= 0");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma > 0.0) {
            return bad("noise_sigma must be > 0");
        }
        if self.categorical_features > 0 && self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Per-column min-max scaler fitted on training rows.
#[derive(Debug, Clone, PartialEq)]
struct MinMax {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl MinMax {
    fn fit(rows: &[Vec<f64>], cols: usize) -> Self {
        let mut lo = vec![f64::INFINITY; cols];
        let mut hi = vec![f64::NEG_INFINITY; cols];
        for r in rows {
            for c in 0..cols {
                lo[c] = lo[c].min(r[c]);
                hi[c] = hi[c].max(r[c]);
            }
        }
        Self { lo, hi }
    }

    fn apply(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows.len() * self.lo.len());
        for r in rows {
            for (c, &v) in r.iter().enumerate() {
                let range = self.hi[c] - self.lo[c];
                out.push(if range > 0.0 && range.is_finite() {
                    ((v - self.lo[c]) / range).clamp(0.0, 1.0)
                } else {
                    0.0
                });
            }
        }
        out
    }
}

/// First-appearance integer ids for string categories.
#[derive(Debug, Clone, Default)]
struct CategoryMap {
    ids: HashMap<String, usize>,
    names: Vec<String>,
}

impl CategoryMap {
    fn id(&mut self, value: &str) -> usize {
        if let Some(&i) = self.ids.get(value) {
            return i;
        }
        let i = self.names.len();
        self.ids.insert(value.to_string(), i);
        self.names.push(value.to_string());
        i
    }
}

/// Unnormalized rows before scaling and category mapping.
#[derive(Debug, Clone, Default)]
struct RawRows {
    reals: Vec<Vec<f64>>,
    cats: Vec<Vec<String>>,
    labels: Vec<u8>,
    indices: Vec<u64>,
}

impl RawRows {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn select(&self, keep: impl Fn(usize) -> bool) -> RawRows {
        let mut out = RawRows::default();
        for i in (0..self.len()).filter(|&i| keep(i)) {
            out.reals.push(self.reals[i].clone());
            out.cats.push(self.cats[i].clone());
            out.labels.push(self.labels[i]);
            out.indices.push(self.indices[i]);
        }
        out
    }
}

/// Fits scaling on `train`, maps categories in train-then-test order.
fn preprocess(
    train: RawRows,
    test: RawRows,
    continuous_names: Vec<String>,
    categorical_names: Vec<String>,
) -> Result<Dataset> {
    let c = continuous_names.len();
    if c == 0 {
        return Err(Error::Config("at least one real-valued column is required".into()));
    }
    if train.len() == 0 || test.len() == 0 {
        return Err(Error::TooFewSamples {
            needed: 1,
            got: train.len().min(test.len()),
        });
    }
    let scaler = MinMax::fit(&train.reals, c);
    let k = categorical_names.len();
    let mut maps = vec![CategoryMap::default(); k];
    let mut build = |raw: &RawRows| -> Result<Batch> {
        let continuous = Matrix::new(raw.len(), c, scaler.apply(&raw.reals))?;
        let categorical = (0..k)
            .map(|j| raw.cats.iter().map(|r| maps[j].id(&r[j])).collect())
            .collect();
        Batch::new(continuous, categorical, raw.labels.clone(), raw.indices.clone())
    };
    let train = build(&train)?;
    let test = build(&test)?;
    Ok(Dataset {
        train,
        test,
        vocab_sizes: maps.iter().map(|m| m.names.len()).collect(),
        categories: maps.into_iter().map(|m| m.names).collect(),
        continuous_names,
        categorical_names,
    })
}

/// Class-conditional Gaussians: positives centered at `class_separation·u`
/// for a random unit `u`, negatives at the origin, per-coordinate noise
/// `noise_sigma`. Categorical columns, if any, are uniform and unrelated to
/// the label.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let u = rng.unit_vector(spec.dim);
    let mut raw = RawRows::default();
    for i in 0..spec.n {
        let y = u8::from(rng.bernoulli(spec.positive_ratio));
        let shift = f64::from(y) * spec.class_separation;
        let x: Vec<f64> = u
            .iter()
            .map(|ui| shift * ui + spec.noise_sigma * rng.normal())
            .collect();
        let cats = (0..spec.categorical_features)
            .map(|_| rng.below(spec.vocab_size).to_string())
            .collect();
        raw.reals.push(x);
        raw.cats.push(cats);
        raw.labels.push(y);
        raw.indices.push(i as u64);
    }
    let train = raw.select(|i| in_train_split(spec.seed, i as u64, spec.train_fraction));
    let test = raw.select(|i| !in_train_split(spec.seed, i as u64, spec.train_fraction));
    preprocess(
        train,
        test,
        (0..spec.dim).map(|j| format!("x{j}")).collect(),
        (0..spec.categorical_features).map(|j| format!("c{j}")).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Real,
    Categorical,
    Label,
    /// Global example id; row number is used when absent.
    Index,
    Ignore,
}

/// Column name to kind. Every header column must be declared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub columns: BTreeMap<String, ColumnKind>,
}

impl CsvSchema {
    pub fn label_column(&self) -> Result<&str> {
        let labels: Vec<&String> = self
            .columns
            .iter()
            .filter(|(_, k)| **k == ColumnKind::Label)
            .map(|(n, _)| n)
            .collect();
        match labels.as_slice() {
            [one] => Ok(one.as_str()),
            [] => Err(Error::MissingLabelColumn),
            _ => Err(Error::Config("schema declares more than one label column".into())),
        }
    }
}

/// Where to read CSV data from and how to split it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub train_path: PathBuf,
    /// With no test file the train file is split by index hash.
    #[serde(default)]
    pub test_path: Option<PathBuf>,
    pub schema: CsvSchema,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Fraction of rows kept before splitting.
    #[serde(default = "default_subsample")]
    pub subsample: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_subsample() -> f64 {
    1.0
}

fn is_na(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan")
}

struct Layout {
    kinds: Vec<ColumnKind>,
    continuous_names: Vec<String>,
    categorical_names: Vec<String>,
}

fn layout(header: &csv::StringRecord, schema: &CsvSchema) -> Result<Layout> {
    let label = schema.label_column()?;
    if !header.iter().any(|h| h == label) {
        return Err(Error::MissingLabelColumn);
    }
    let mut kinds = Vec::with_capacity(header.len());
    let mut continuous_names = Vec::new();
    let mut categorical_names = Vec::new();
    for h in header {
        let kind = *schema
            .columns
            .get(h)
            .ok_or_else(|| Error::Config(format!("column '{h}' is not declared in the schema")))?;
        match kind {
            ColumnKind::Real => continuous_names.push(h.to_string()),
            ColumnKind::Categorical => categorical_names.push(h.to_string()),
            _ => {}
        }
        kinds.push(kind);
    }
    for name in schema.columns.keys() {
        if !header.iter().any(|h| h == name) {
            return Err(Error::Config(format!("schema column '{name}' is missing from the file")));
        }
    }
    Ok(Layout {
        kinds,
        continuous_names,
        categorical_names,
    })
}

fn read_raw(path: &Path, schema: &CsvSchema, index_offset: u64) -> Result<(RawRows, Layout)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let header = rdr.headers()?.clone();
    let lay = layout(&header, schema)?;
    let mut raw = RawRows::default();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        // row numbers count the header as row 1
        let line = row + 2;
        if rec.len() != header.len() {
            return Err(Error::MalformedRow {
                row: line,
                expected: header.len(),
                got: rec.len(),
            });
        }
        let mut reals = Vec::new();
        let mut cats = Vec::new();
        let mut label = None;
        let mut index = index_offset + row as u64;
        for ((field, kind), name) in rec.iter().zip(&lay.kinds).zip(&header) {
            let unparseable = || Error::UnparseableReal {
                row: line,
                column: name.to_string(),
                value: field.to_string(),
            };
            match kind {
                ColumnKind::Real => {
                    let v = if is_na(field) {
                        0.0
                    } else {
                        field.trim().parse::<f64>().map_err(|_| unparseable())?
                    };
                    if !v.is_finite() {
                        return Err(unparseable());
                    }
                    reals.push(v);
                }
                ColumnKind::Categorical => {
                    cats.push(if is_na(field) { String::new() } else { field.to_string() });
                }
                ColumnKind::Label => {
                    let v: f64 = field.trim().parse().map_err(|_| unparseable())?;
                    label = Some(if v == 0.0 {
                        0
                    } else if v == 1.0 {
                        1
                    } else {
                        return Err(Error::InvalidLabel(v));
                    });
                }
                ColumnKind::Index => {
                    index = field.trim().parse().map_err(|_| unparseable())?;
                }
                ColumnKind::Ignore => {}
            }
        }
        raw.reals.push(reals);
        raw.cats.push(cats);
        raw.labels.push(label.ok_or(Error::MissingLabelColumn)?);
        raw.indices.push(index);
    }
    Ok((raw, lay))
}

/// Reads one file and preprocesses it with its own statistics.
pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<(Batch, Vec<Vec<String>>)> {
    let (raw, lay) = read_raw(path, schema, 0)?;
    let ds = preprocess(raw.clone(), raw, lay.continuous_names, lay.categorical_names)?;
    Ok((ds.train, ds.categories))
}

/// Loads a train/test pair, or splits a single file by index hash.
pub fn load_csv_dataset(src: &CsvSource) -> Result<Dataset> {
    if !(src.train_fraction > 0.0 && src.train_fraction < 1.0) {
        return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
    }
    if !(src.subsample > 0.0 && src.subsample <= 1.0) {
        return Err(Error::Config("subsample must lie in (0, 1]".into()));
    }
    let keep = |raw: &RawRows| {
        raw.select(|i| src.subsample >= 1.0 || hash_unit(src.seed, SUBSAMPLE_SALT, raw.indices[i]) < src.subsample)
    };
    let (raw, lay) = read_raw(&src.train_path, &src.schema, 0)?;
    let raw = keep(&raw);
    let (train, test) = match &src.test_path {
        Some(p) => {
            let (test, test_lay) = read_raw(p, &src.schema, raw.indices.iter().max().map_or(0, |m| m + 1))?;
            if test_lay.kinds != lay.kinds {
                return Err(Error::Config("train and test files have different column orders".into()));
            }
            (raw, keep(&test))
        }
        None => {
            let train = raw.select(|i| in_train_split(src.seed, raw.indices[i], src.train_fraction));
            let test = raw.select(|i| !in_train_split(src.seed, raw.indices[i], src.train_fraction));
            (train, test)
        }
    };
    preprocess(train, test, lay.continuous_names, lay.categorical_names)
}

/// Writes `train.csv`, `test.csv` and `schema.json` into `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<CsvSource> {
    std::fs::create_dir_all(dir)?;
    let mut columns = BTreeMap::new();
    for n in &ds.continuous_names {
        columns.insert(n.clone(), ColumnKind::Real);
    }
    for n in &ds.categorical_names {
        columns.insert(n.clone(), ColumnKind::Categorical);
    }
    columns.insert("label".into(), ColumnKind::Label);
    columns.insert("index".into(), ColumnKind::Index);
    let schema = CsvSchema { columns };
    for (name, batch) in [("train.csv", &ds.train), ("test.csv", &ds.test)] {
        let mut w = csv::Writer::from_path(dir.join(name))?;
        let mut header: Vec<String> = ds.continuous_names.clone();
        header.extend(ds.categorical_names.iter().cloned());
        header.push("label".into());
        header.push("index".into());
        w.write_record(&header)?;
        for r in 0..batch.len() {
            let mut rec: Vec<String> = batch.continuous.row(r).iter().map(|v| format!("{v}")).collect();
            for (j, col) in batch.categorical.iter().enumerate() {
                rec.push(ds.categories[j][col[r]].clone());
            }
            rec.push(batch.labels[r].to_string());
            rec.push(batch.example_indices[r].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    std::fs::write(dir.join("schema.json"), serde_json::to_string_pretty(&schema)?)?;
    Ok(CsvSource {
        train_path: dir.join("train.csv"),
        test_path: Some(dir.join("test.csv")),
        schema,
        train_fraction: default_train_fraction(),
        subsample: 1.0,
        seed: 0,
    })
}
