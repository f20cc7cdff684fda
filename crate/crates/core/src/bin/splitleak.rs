use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use splitleak::attacks::{
    batched_spectral_leak, leak_auc, norm_attack, write_report, AssignmentRule, AttackPrior, AttackReportRow, LeakMode,
};
use splitleak::data::{generate_synthetic, write_dataset, SyntheticSpec};
use splitleak::experiment::{run_experiment, summary_table, ExperimentConfig};
use splitleak::protocol::{read_activation_csv, read_labels_csv};
use splitleak::{Error, Result};

#[derive(Parser)]
#[command(name = "splitleak", version, about = "Split-learning label leakage simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with periodic attack evaluation.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// JSON-lines metrics file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dump_activations: Option<PathBuf>,
        /// Overrides the training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Attack dumped embeddings or gradients offline.
    Attack {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Spectral)]
        method: Method,
        #[arg(long, value_enum, default_value_t = Rule::BySize)]
        rule: Rule,
        #[arg(long, value_enum, default_value_t = Mode::Scores)]
        mode: Mode,
        /// Rows per attacked batch; one batch by default.
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        expected_positive_ratio: Option<f64>,
        /// Writes per-row attack scores as CSV.
        #[arg(long)]
        scores_out: Option<PathBuf>,
    },
    /// Write a synthetic dataset as train/test CSVs plus schema.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Spectral,
    Norm,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rule {
    #[value(alias = "by_size")]
    BySize,
    #[value(alias = "by_score")]
    ByScore,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Scores,
    #[value(alias = "hard_labels")]
    HardLabels,
}

fn run(config: &Path, out: &Path, dump: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut cfg = ExperimentConfig::from_path(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let file = std::fs::File::create(out)?;
    let mut w = std::io::BufWriter::new(file);
    let outcome = run_experiment(&cfg, Some(&mut w), dump)?;
    w.flush()?;
    let violations = outcome.audit.violations();
    if !violations.is_empty() {
        return Err(Error::Protocol(violations.join("; ")));
    }
    print!("{}", summary_table(&outcome.records));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn attack(
    embeddings: &Path,
    labels: &Path,
    method: Method,
    rule: Rule,
    mode: Mode,
    batch_size: Option<usize>,
    ratio: Option<f64>,
    scores_out: Option<&Path>,
) -> Result<()> {
    let groups = read_activation_csv(embeddings)?;
    let labels = read_labels_csv(labels)?;
    let prior = AttackPrior {
        rule: match rule {
            Rule::BySize => AssignmentRule::BySize,
            Rule::ByScore => AssignmentRule::ByScore,
        },
        expected_positive_ratio: ratio,
    };
    let mode = match mode {
        Mode::Scores => LeakMode::Scores,
        Mode::HardLabels => LeakMode::HardLabels,
    };
    let mut rows = Vec::new();
    let mut scores_csv = Vec::new();
    for (layer, m) in &groups {
        if m.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} rows to match the labels", labels.len()),
                got: format!("{} rows in layer '{layer}'", m.rows()),
            });
        }
        let (auc, scores, degenerate, mode_name) = match method {
            Method::Spectral => {
                let bs = batch_size.unwrap_or(m.rows());
                let r = batched_spectral_leak(m, &labels, bs, &prior, mode)?;
                let degenerate = r.degenerate_batches > 0;
                (r.leak_auc, r.attack_scores, degenerate, mode.name())
            }
            Method::Norm => {
                let s = norm_attack(m)?;
                (leak_auc(&s, &labels)?, s, false, LeakMode::Scores.name())
            }
        };
        for (i, s) in scores.iter().enumerate() {
            scores_csv.push((layer.clone(), i, *s));
        }
        rows.push(AttackReportRow {
            layer: layer.clone(),
            method: match method {
                Method::Spectral => "spectral".into(),
                Method::Norm => "norm".into(),
            },
            mode: mode_name.into(),
            leak_auc: auc,
            n: m.rows(),
            degenerate_flag: degenerate,
        });
    }
    write_report(&rows, std::io::stdout().lock())?;
    if let Some(p) = scores_out {
        let mut w = csv::Writer::from_path(p)?;
        w.write_record(["layer", "row", "score"])?;
        for (l, i, s) in scores_csv {
            w.write_record([l, i.to_string(), format!("{s}")])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn gen_data(spec: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", spec.display())))?;
    let spec: SyntheticSpec = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    let ds = generate_synthetic(&spec)?;
    write_dataset(&ds, out)?;
    println!(
        "wrote {} train and {} test rows ({} + {} positive) to {}",
        ds.train.len(),
        ds.test.len(),
        ds.train.positives(),
        ds.test.positives(),
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            config,
            out,
            dump_activations,
            seed,
        } => run(config, out, dump_activations.as_deref(), *seed),
        Command::Attack {
            embeddings,
            labels,
            method,
            rule,
            mode,
            batch_size,
            expected_positive_ratio,
            scores_out,
        } => attack(
            embeddings,
            labels,
            *method,
            *rule,
            *mode,
            *batch_size,
            *expected_positive_ratio,
            scores_out.as_deref(),
        ),
        Command::GenData { spec, out } => gen_data(spec, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::Config(_) | Error::MissingLabelColumn)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
