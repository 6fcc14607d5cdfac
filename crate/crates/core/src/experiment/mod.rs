//! Seeded experiments: the four-step augmentation loop, the sampling-strategy
//! comparison and the per-quantile gain analysis, with persisted reports.

pub mod config;
mod data;
mod pipeline;

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{
    parse_override, AnnotatorConfig, BaseConfig, Budget, DataConfig, DataFiles, ExperimentConfig, SplitKind, Task,
};
pub use data::{prepare, PairSetup, SearchSetup, Setup};

use crate::annotate::{write_records, AnnotationRecord, Transport};
use crate::encoder::{EmbeddingModel, ProjectionInit, Provenance};
use crate::error::{Error, Result};
use crate::eval::{
    annotator_accuracy_by_quantile, gain_table, mean, spearman, stderr, AccuracyRow, GainTable, MetricReport,
};
use crate::sampling::{quantile_partition, write_ids, write_scores_csv, DeviationScore, Strategy};
use pipeline::{Finetuned, SeedRun};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub id: String,
    pub provenance: Vec<Provenance>,
    /// Size of the last finetuning set; 0 for the base model.
    pub train_size: usize,
}

impl ModelSummary {
    /// Id of the model this one was finetuned from.
    pub fn finetuned_from(&self) -> Option<&str> {
        match self.provenance.last() {
            Some(Provenance::Finetuned { from, .. }) => Some(from),
            _ => None,
        }
    }
}

/// One trained model of a seed and how its training set was augmented.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmOutcome {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    pub budget: usize,
    pub selected_ids: Vec<String>,
    /// Fraction of annotations agreeing with the sealed truth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agreement: Option<f64>,
    pub metrics: Vec<MetricReport>,
    pub model: ModelSummary,
    #[serde(skip)]
    pub records: Vec<AnnotationRecord>,
}

impl ArmOutcome {
    pub fn metric(&self, metric: &str, subset: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.metric == metric && m.subset.as_deref() == Some(subset))
            .map(|m| m.value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<StageFailure>,
    /// The model finetuned on the labeled set alone.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<ArmOutcome>,
    pub arms: Vec<ArmOutcome>,
    /// Spearman correlation of deviation and base squared error over the
    /// pool, when the pool truth is known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deviation_vs_base_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub accuracy: Vec<AccuracyRow>,
    #[serde(skip)]
    pub scores: Vec<DeviationScore>,
}

impl SeedOutcome {
    pub fn arm(&self, name: &str) -> Option<&ArmOutcome> {
        self.baseline.iter().chain(&self.arms).find(|a| a.name == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunKind {
    Eagle,
    Motivation,
    Quantiles,
}

/// Mean over successful seeds of one arm's metric on one subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub arm: String,
    pub metric: String,
    pub subset: String,
    pub mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stderr: Option<f64>,
    pub n_seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_secs: f64,
    pub seed_secs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub kind: RunKind,
    pub config_hash: String,
    pub task: Task,
    pub budget: usize,
    pub seeds: Vec<SeedOutcome>,
    pub summary: Vec<SummaryRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gains: Option<GainTable>,
    pub partial: bool,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

impl RunReport {
    /// The report as JSON without timing, for comparing runs.
    pub fn body_json(&self) -> Result<String> {
        let body = RunReport {
            timing: None,
            ..self.clone()
        };
        Ok(serde_json::to_string_pretty(&body)?)
    }

    pub fn succeeded(&self) -> impl Iterator<Item = &SeedOutcome> {
        self.seeds.iter().filter(|s| s.error.is_none())
    }

    pub fn summary_row(&self, arm: &str, metric: &str, subset: &str) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.arm == arm && r.metric == metric && r.subset == subset)
    }

    /// 0 when every seed succeeded, 3 when some failed, 4 when all did.
    pub fn exit_code(&self) -> i32 {
        match self.succeeded().count() {
            0 => 4,
            n if n < self.seeds.len() => 3,
            _ => 0,
        }
    }

    /// Writes `report.json`, `metrics.csv`, the gain table if any, and per
    /// seed `scores.csv` plus `<arm>/selected_ids.txt` and
    /// `<arm>/annotations.jsonl`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        self.write_metrics_csv(dir.join("metrics.csv"))?;
        if let Some(g) = &self.gains {
            g.write_csv(dir.join("gains.csv"))?;
            g.write_dat(dir.join("gains.dat"))?;
        }
        for s in &self.seeds {
            let sd = dir.join(format!("seed-{}", s.seed));
            std::fs::create_dir_all(&sd)?;
            if !s.scores.is_empty() {
                write_scores_csv(sd.join("scores.csv"), &s.scores, &HashMap::new())?;
            }
            for arm in &s.arms {
                let ad = sd.join(&arm.name);
                std::fs::create_dir_all(&ad)?;
                write_ids(ad.join("selected_ids.txt"), &arm.selected_ids)?;
                write_records(ad.join("annotations.jsonl"), &arm.records)?;
            }
        }
        Ok(())
    }

    fn write_metrics_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let err = crate::sampling::csv_err;
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["seed", "arm", "metric", "subset", "value", "stderr", "n"])
            .map_err(err)?;
        for s in self.succeeded() {
            for arm in s.baseline.iter().chain(&s.arms) {
                for m in &arm.metrics {
                    w.write_record([
                        s.seed.to_string(),
                        arm.name.clone(),
                        m.metric.clone(),
                        m.subset.clone().unwrap_or_default(),
                        m.value.to_string(),
                        String::new(),
                        m.n.to_string(),
                    ])
                    .map_err(err)?;
                }
            }
        }
        for r in &self.summary {
            w.write_record([
                "mean".to_string(),
                r.arm.clone(),
                r.metric.clone(),
                r.subset.clone(),
                r.mean.to_string(),
                r.stderr.map(|x| x.to_string()).unwrap_or_default(),
                r.n_seeds.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Exit code for an error raised before any seed ran.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        _ => 4,
    }
}

fn summarize(seeds: &[SeedOutcome]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, String, String)> = Vec::new();
    let mut values: HashMap<(String, String, String), Vec<f64>> = HashMap::new();
    for s in seeds.iter().filter(|s| s.error.is_none()) {
        for arm in s.baseline.iter().chain(&s.arms) {
            for m in &arm.metrics {
                let key = (arm.name.clone(), m.metric.clone(), m.subset.clone().unwrap_or_default());
                let slot = values.entry(key.clone()).or_insert_with(|| {
                    keys.push(key);
                    Vec::new()
                });
                slot.push(m.value);
            }
        }
    }
    keys.into_iter()
        .map(|k| {
            let v = &values[&k];
            let (arm, metric, subset) = k;
            SummaryRow {
                arm,
                metric,
                subset,
                mean: mean(v),
                stderr: stderr(v),
                n_seeds: v.len(),
            }
        })
        .collect()
}

fn failure(err: Error) -> StageFailure {
    match err {
        Error::Stage { stage, source } => StageFailure {
            stage: stage.to_string(),
            message: source.to_string(),
        },
        other => StageFailure {
            stage: "setup".into(),
            message: other.to_string(),
        },
    }
}

/// What one seed produced besides its baseline.
#[derive(Default)]
struct SeedWork {
    arms: Vec<ArmOutcome>,
    accuracy: Vec<AccuracyRow>,
}

/// A prepared experiment: validated config, base model and data split.
pub struct Experiment {
    config: ExperimentConfig,
    f0: EmbeddingModel,
    setup: Setup,
    transport: Option<Arc<dyn Transport>>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let f0 = EmbeddingModel::with_init(
            config.base.dims,
            ProjectionInit::Uniform {
                seed: config.base.seed,
                scale: config.base.scale,
            },
        );
        let setup = prepare(&config, &f0)?;
        Ok(Self {
            config,
            f0,
            setup,
            transport: None,
        })
    }

    /// Routes LLM requests through `transport` instead of HTTP.
    pub fn with_transport(mut self, transport: Arc<dyn Transport>) -> Self {
        self.transport = Some(transport);
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn base_model(&self) -> &EmbeddingModel {
        &self.f0
    }

    pub fn setup(&self) -> &Setup {
        &self.setup
    }

    pub fn budget(&self) -> usize {
        self.config.budget.resolve(self.setup.pool_ids().len())
    }

    fn primary_metric(&self) -> &'static str {
        match self.config.task {
            Task::Pairs => "auc",
            Task::Search => "p@1",
        }
    }

    fn deviation_check(&self, ft: &Finetuned) -> Result<Option<f64>> {
        let Setup::Pairs(PairSetup { truth: Some(truth), .. }) = &self.setup else {
            return Ok(None);
        };
        let z: Vec<f64> = ft.z.iter().map(|s| s.z).collect();
        let err =
            ft.z.iter()
                .map(|s| Ok((s.f0_score - f64::from(truth.label(&s.id)?)).powi(2)))
                .collect::<Result<Vec<f64>>>()?;
        match spearman(&z, &err) {
            Ok(r) => Ok(Some(r)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn run_seeds<F>(&self, kind: RunKind, mut warnings: Vec<String>, work: F) -> RunReport
    where
        F: Fn(&SeedRun, &Finetuned) -> Result<SeedWork> + Sync,
    {
        let start = Instant::now();
        let one = |&seed: &u64| {
            let t = Instant::now();
            let run = SeedRun::new(&self.config, &self.setup, &self.f0, seed, self.transport.clone());
            let outcome = run.finetune().and_then(|ft| {
                let dev = self.deviation_check(&ft).map_err(|e| e.at_stage("score"))?;
                let w = work(&run, &ft)?;
                Ok(SeedOutcome {
                    seed,
                    error: None,
                    baseline: Some(ft.baseline),
                    arms: w.arms,
                    deviation_vs_base_error: dev,
                    accuracy: w.accuracy,
                    scores: ft.z,
                })
            });
            let outcome = outcome.unwrap_or_else(|e| {
                log::error!("seed {seed} failed: {e}");
                SeedOutcome {
                    seed,
                    error: Some(failure(e)),
                    baseline: None,
                    arms: Vec::new(),
                    deviation_vs_base_error: None,
                    accuracy: Vec::new(),
                    scores: Vec::new(),
                }
            });
            (outcome, t.elapsed().as_secs_f64())
        };
        let results: Vec<(SeedOutcome, f64)> = if self.config.parallel_seeds {
            self.config.seeds.par_iter().map(one).collect()
        } else {
            self.config.seeds.iter().map(one).collect()
        };
        let (seeds, seed_secs): (Vec<SeedOutcome>, Vec<f64>) = results.into_iter().unzip();
        for s in &seeds {
            if let Some(e) = &s.error {
                warnings.push(format!("seed {} failed at {}: {}", s.seed, e.stage, e.message));
            }
        }
        let failed = seeds.iter().filter(|s| s.error.is_some()).count();
        RunReport {
            kind,
            config_hash: self.config.hash(),
            task: self.config.task,
            budget: self.budget(),
            summary: summarize(&seeds),
            gains: None,
            partial: failed > 0,
            warnings,
            timing: Some(Timing {
                total_secs: start.elapsed().as_secs_f64(),
                seed_secs,
            }),
            seeds,
        }
    }

    fn budget_warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.budget() == 0 {
            w.push("budget resolves to 0; augmented models equal the baseline".into());
        }
        w
    }

    /// Finetune on the labeled set, select a budget of the pool with the
    /// configured strategy, annotate it, retrain from the base model on the
    /// union, and evaluate both models.
    pub fn run_eagle(&self) -> RunReport {
        let budget = self.budget();
        let strategy = self.config.strategy;
        self.run_seeds(RunKind::Eagle, self.budget_warnings(), |run, ft| {
            Ok(SeedWork {
                arms: vec![run.strategy_arm(ft, strategy, budget)?],
                ..Default::default()
            })
        })
    }

    /// Compares the configured motivation strategies at the same budget,
    /// alongside annotating the whole pool.
    pub fn run_motivation(&self) -> Result<RunReport> {
        if self.config.task != Task::Pairs || !self.setup.has_truth() {
            return Err(Error::Config(
                "the strategy comparison needs a fully labeled pair pool".into(),
            ));
        }
        let budget = self.budget();
        let all = self.setup.pool_ids();
        let strategies = self.config.motivation_strategies.clone();
        Ok(self.run_seeds(RunKind::Motivation, self.budget_warnings(), |run, ft| {
            let mut arms = vec![run.arm(ft, "100%", None, all.clone())?];
            for &s in &strategies {
                arms.push(run.strategy_arm(ft, s, budget)?);
            }
            Ok(SeedWork {
                arms,
                ..Default::default()
            })
        }))
    }

    /// Splits the pool into deviation quantiles (bin 1 highest) and
    /// retrains on each bin's annotations separately; gains are against the
    /// labeled-only baseline of the same seed. An uncertainty arm of one
    /// bin's size is included for reference.
    pub fn run_quantiles(&self) -> RunReport {
        let nq = self.config.n_quantiles;
        let mut report = self.run_seeds(RunKind::Quantiles, Vec::new(), |run, ft| {
            let part = quantile_partition(&ft.z, nq).map_err(|e| e.at_stage("sample"))?;
            let mut arms = Vec::with_capacity(nq + 1);
            for (b, ids) in part.bins.iter().enumerate() {
                arms.push(run.arm(ft, &format!("q{:02}", b + 1), None, ids.clone())?);
            }
            let accuracy = self
                .accuracy_rows(ft, &part.bins, &arms)
                .map_err(|e| e.at_stage("evaluate"))?;
            arms.push(run.strategy_arm(ft, Strategy::Uncertainty, part.bins[0].len())?);
            Ok(SeedWork { arms, accuracy })
        });
        let metric = self.primary_metric();
        let ok: Vec<&SeedOutcome> = report.succeeded().collect();
        if !ok.is_empty() {
            let value = |a: Option<&ArmOutcome>| a.and_then(|a| a.metric(metric, "all")).unwrap_or(f64::NAN);
            let baseline: Vec<f64> = ok.iter().map(|s| value(s.baseline.as_ref())).collect();
            let per_bin: Vec<(usize, Vec<f64>)> = (0..nq)
                .map(|b| {
                    let name = format!("q{:02}", b + 1);
                    let size = ok[0].arm(&name).map_or(0, |a| a.budget);
                    (size, ok.iter().map(|s| value(s.arm(&name))).collect())
                })
                .collect();
            report.gains = Some(gain_table(metric, baseline, &per_bin));
        }
        report
    }

    /// Steps 1 to 3 for one seed: finetune, select `ids` (or a budget by the
    /// configured strategy) and annotate them.
    pub fn annotate(&self, seed: u64, ids: Option<Vec<String>>) -> Result<(Vec<String>, Vec<AnnotationRecord>)> {
        let run = SeedRun::new(&self.config, &self.setup, &self.f0, seed, self.transport.clone());
        let ft = run.finetune()?;
        let ids = match ids {
            Some(ids) => ids,
            None => run
                .select(&ft, self.config.strategy, self.budget())
                .map_err(|e| e.at_stage("sample"))?,
        };
        let records = run.annotate(&ft, &ids).map_err(|e| e.at_stage("annotate"))?;
        Ok((ids, records))
    }

    fn accuracy_rows(&self, ft: &Finetuned, bins: &[Vec<String>], arms: &[ArmOutcome]) -> Result<Vec<AccuracyRow>> {
        let Setup::Pairs(PairSetup { truth: Some(truth), .. }) = &self.setup else {
            return Ok(Vec::new());
        };
        let annotations: HashMap<String, u8> = arms
            .iter()
            .flat_map(|a| &a.records)
            .filter_map(|r| r.assignment.as_pair().map(|l| (r.id.clone(), l)))
            .collect();
        let base: HashMap<String, f64> = ft.z.iter().map(|s| (s.id.clone(), s.f0_score)).collect();
        let tuned: HashMap<String, f64> = ft.z.iter().map(|s| (s.id.clone(), s.f_score)).collect();
        annotator_accuracy_by_quantile(&annotations, truth, bins, &base, &tuned)
    }
}
