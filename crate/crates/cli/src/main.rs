//! `eagle`: command-line driver for augmentation experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use eagle_core::annotate::{agreement, load_records, write_records};
use eagle_core::dataset::{
    generate_synthetic_pairs, generate_synthetic_search, load_pair_dataset, load_search_dataset, make_extreme_split,
    write_pair_dataset, write_search_dataset, SealedTruth, SyntheticSearchSpec, SyntheticSpec,
};
use eagle_core::encoder::EmbeddingModel;
use eagle_core::eval::{pair_scores, precision_at_1, write_metrics_csv, MetricReport, PairEvalSet, Subset};
use eagle_core::experiment::{exit_code_for, parse_override, Experiment, ExperimentConfig, RunReport};
use eagle_core::sampling::write_ids;
use eagle_core::Error;

#[derive(Parser)]
#[command(name = "eagle", version, about = "Select, annotate and retrain on unlabeled inputs")]
struct Cli {
    /// More logging (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config.
    config: PathBuf,
    /// Field overrides such as `--train.epochs=3` or `--seeds=[0,1]`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> eagle_core::Result<ExperimentConfig> {
        let overrides = self
            .overrides
            .iter()
            .map(|o| parse_override(o).map_err(|e| Error::Config(e.to_string())))
            .collect::<eagle_core::Result<Vec<_>>>()?;
        ExperimentConfig::from_file(&self.config, &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Finetune, select a budget with the configured strategy, annotate,
    /// retrain from the base model and evaluate.
    Run(ConfigArgs),
    /// Compare sampling strategies at one budget against annotating the
    /// whole pool.
    Motivate(ConfigArgs),
    /// Per-quantile gain of annotating each deviation bin.
    Quantiles(ConfigArgs),
    /// Select and annotate for one seed without retraining.
    Annotate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Annotate these pool ids (one per line) instead of sampling.
        #[arg(long)]
        ids: Option<PathBuf>,
        /// Annotation records (JSONL).
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Metrics of a stored model on a dataset, or agreement of stored
    /// annotations with a truth file.
    Eval(EvalArgs),
    /// Generate synthetic datasets.
    #[command(subcommand)]
    Synth(Synth),
}

#[derive(Args)]
struct EvalArgs {
    /// Model file; the base model when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Labeled pair file.
    #[arg(long, conflicts_with = "queries")]
    pairs: Option<PathBuf>,
    /// Query file with relevance sets; needs --labels.
    #[arg(long, requires = "labels")]
    queries: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Share of the pairs forming the high/low base-error subsets.
    #[arg(long, default_value_t = 0.6)]
    extreme_fraction: f64,
    /// Annotation records to score against --truth.
    #[arg(long, requires = "truth")]
    annotations: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Also write the metrics as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Synth {
    /// Labeled sentence pairs.
    Pairs {
        #[arg(long, default_value_t = 4000)]
        n: usize,
        #[arg(long, default_value_t = 0.3)]
        flip: f64,
        #[arg(long, default_value_t = 0.0)]
        ambiguous: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        stream: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the extreme split of this fraction next to `--out`.
        #[arg(long)]
        split: Option<f64>,
    },
    /// Queries with relevance sets over a label corpus.
    Search {
        #[arg(long, default_value_t = 1000)]
        n_queries: usize,
        #[arg(long, default_value_t = 200)]
        n_labels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        stream: u64,
        #[arg(long)]
        queries_out: PathBuf,
        #[arg(long)]
        labels_out: PathBuf,
    },
}

fn print_summary(report: &RunReport) {
    println!(
        "config {} | budget {} | {} seed(s)",
        report.config_hash,
        report.budget,
        report.seeds.len()
    );
    for r in &report.summary {
        let se = r.stderr.map(|s| format!(" ± {s:.4}")).unwrap_or_default();
        println!(
            "{:<28} {:<5} {:<18} {:.4}{se}  (n={})",
            r.arm, r.metric, r.subset, r.mean, r.n_seeds
        );
    }
    if let Some(g) = &report.gains {
        for row in &g.rows {
            let se = row.stderr.map(|s| format!(" ± {s:.4}")).unwrap_or_default();
            println!("bin {:>3} size {:>6} gain {:+.4}{se}", row.bin, row.size, row.mean_gain);
        }
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
}

fn experiment(args: &ConfigArgs) -> Result<Experiment, Error> {
    Experiment::new(args.load()?)
}

fn finish(report: RunReport, config: &ExperimentConfig) -> anyhow::Result<ExitCode> {
    print_summary(&report);
    match &config.output_dir {
        Some(dir) => {
            report
                .write(dir)
                .with_context(|| format!("writing outputs to {}", dir.display()))?;
            println!("wrote {}", dir.join("report.json").display());
        }
        None => eprintln!("note: no output_dir configured; nothing written"),
    }
    Ok(ExitCode::from(report.exit_code() as u8))
}

fn run_experiment(args: &ConfigArgs, f: impl FnOnce(&Experiment) -> eagle_core::Result<RunReport>) -> ExitCode {
    let outcome = experiment(args).and_then(|exp| f(&exp).map(|r| (r, exp)));
    match outcome {
        Ok((report, exp)) => finish(report, exp.config()).unwrap_or_else(|e| {
            eprintln!("error: {e:#}");
            ExitCode::from(4)
        }),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e) as u8)
        }
    }
}

fn read_ids(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn annotate(seed: u64, ids: Option<&Path>, out: &Path, args: &ConfigArgs) -> anyhow::Result<ExitCode> {
    let exp = match experiment(args) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(ExitCode::from(exit_code_for(&e) as u8));
        }
    };
    let ids = ids.map(read_ids).transpose()?;
    let (ids, records) = exp.annotate(seed, ids)?;
    write_records(out, &records)?;
    let ids_path = out.with_extension("ids.txt");
    write_ids(&ids_path, &ids)?;
    println!(
        "annotated {} inputs -> {} (ids in {})",
        records.len(),
        out.display(),
        ids_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn eval(a: &EvalArgs) -> anyhow::Result<ExitCode> {
    let base = EmbeddingModel::base();
    let model = match &a.model {
        Some(p) => EmbeddingModel::load(p).with_context(|| p.display().to_string())?,
        None => base.clone(),
    };
    let mut rows: Vec<(String, MetricReport)> = Vec::new();
    if let Some(path) = &a.pairs {
        let data = load_pair_dataset(path)?;
        let eval = PairEvalSet::new(&data, pair_scores(&base, &data)?, a.extreme_fraction)?;
        let scores = pair_scores(&model, &data)?;
        for subset in [Subset::All, Subset::HighBaseError, Subset::LowBaseError] {
            match eval.auc(&scores, &subset) {
                Ok(m) => rows.push((model.id().to_string(), m)),
                Err(Error::UndefinedMetric(msg)) if subset != Subset::All => log::warn!("{msg}"),
                Err(e) => return Err(e.into()),
            }
        }
    }
    if let (Some(q), Some(l)) = (&a.queries, &a.labels) {
        let data = load_search_dataset(q, l)?;
        let p = precision_at_1(&model, &data)?;
        rows.push((
            model.id().to_string(),
            MetricReport {
                metric: "p@1".into(),
                value: p.value,
                stderr: None,
                subset: Some("all".into()),
                n: p.n,
            },
        ));
    }
    if let (Some(ann), Some(truth)) = (&a.annotations, &a.truth) {
        let records = load_records(ann)?;
        let truth = SealedTruth::load_jsonl(truth)?;
        let value = agreement(&records, &truth)?;
        rows.push((
            "annotations".into(),
            MetricReport {
                metric: "agreement".into(),
                value,
                stderr: None,
                subset: None,
                n: records.len(),
            },
        ));
    }
    if rows.is_empty() {
        bail!("nothing to evaluate: give --pairs, --queries/--labels or --annotations/--truth");
    }
    for (who, m) in &rows {
        println!("{}", serde_json::json!({"model": who, "metric": m}));
    }
    if let Some(csv) = &a.csv {
        write_metrics_csv(csv, &rows)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn synth(cmd: &Synth) -> anyhow::Result<ExitCode> {
    match cmd {
        Synth::Pairs {
            n,
            flip,
            ambiguous,
            seed,
            stream,
            out,
            split,
        } => {
            let spec = SyntheticSpec {
                ambiguous_fraction: *ambiguous,
                ..SyntheticSpec::new(*n, *flip, *seed)
            }
            .with_stream(*stream, "synthetic");
            let data = generate_synthetic_pairs(&spec)?;
            write_pair_dataset(&data, out)?;
            println!("wrote {} pairs to {}", data.len(), out.display());
            if let Some(fraction) = split {
                let base = EmbeddingModel::base();
                let s = make_extreme_split(&data, &pair_scores(&base, &data)?, *fraction)?;
                let dir = out
                    .parent()
                    .filter(|p| !p.as_os_str().is_empty())
                    .unwrap_or(Path::new("."));
                let stem = out
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                s.write(dir, &stem)?;
                println!(
                    "extreme split: {} labeled, {} unlabeled ({} easy, {} hard)",
                    s.source_labeled.len(),
                    s.target_unlabeled.len(),
                    s.easy_ids.len(),
                    s.hard_ids.len()
                );
            }
        }
        Synth::Search {
            n_queries,
            n_labels,
            seed,
            stream,
            queries_out,
            labels_out,
        } => {
            let spec = SyntheticSearchSpec {
                stream: *stream,
                ..SyntheticSearchSpec::new(*n_queries, *n_labels, *seed)
            };
            let s = generate_synthetic_search(&spec)?;
            write_search_dataset(&s.dataset, queries_out, labels_out)?;
            println!(
                "wrote {} queries and {} labels (knowledge domain {})",
                s.dataset.queries().len(),
                s.dataset.labels().len(),
                s.knowledge_domain
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::Run(args) => return run_experiment(args, |e| Ok(e.run_eagle())),
        Command::Motivate(args) => return run_experiment(args, Experiment::run_motivation),
        Command::Quantiles(args) => return run_experiment(args, |e| Ok(e.run_quantiles())),
        Command::Annotate { seed, ids, out, config } => annotate(*seed, ids.as_deref(), out, config),
        Command::Eval(a) => eval(a),
        Command::Synth(cmd) => synth(cmd),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        let code = e.downcast_ref::<Error>().map_or(4, exit_code_for);
        ExitCode::from(code as u8)
    })
}
