//! Stages of one seed: finetune, score, sample, annotate, retrain, evaluate.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use super::config::{AnnotatorConfig, ExperimentConfig};
use super::data::{search_pair, PairSetup, SearchSetup, Setup};
use super::{ArmOutcome, ModelSummary};
use crate::annotate::{
    agreement, annotate_gt, annotate_gt_search, annotate_llm_pairs, annotate_llm_search, annotate_simulated,
    annotate_simulated_search, AnnotationRecord, Assignment, LlmClient, SearchItem, Transport,
};
use crate::encoder::{train_pairs, EmbeddingModel, Encoder, LabelIndex, Provenance, TrainConfig, TrainPair};
use crate::error::{Error, Result};
use crate::eval::{pair_scores, precision_at_1, MetricReport, PairEvalSet, Subset};
use crate::sampling::{
    deviation_scores_pairs, deviation_scores_search, domain_sample, quantile_partition, sample_base_extreme,
    sample_random, sample_top_b, select_uncertain, DeviationScore, ExtremeMode, Strategy,
};

pub(crate) struct SeedRun<'a> {
    pub config: &'a ExperimentConfig,
    pub setup: &'a Setup,
    pub f0: &'a EmbeddingModel,
    pub seed: u64,
    pub train: TrainConfig,
    pub transport: Option<Arc<dyn Transport>>,
}

/// The finetuned model of a seed and what is derived from it.
pub(crate) struct Finetuned {
    pub f: EmbeddingModel,
    pub z: Vec<DeviationScore>,
    pub baseline: ArmOutcome,
}

trait Stage<T> {
    fn stage(self, name: &'static str) -> Result<T>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, name: &'static str) -> Result<T> {
        self.map_err(|e| e.at_stage(name))
    }
}

fn summary(model: &EmbeddingModel) -> ModelSummary {
    let train_size = match model.provenance().last() {
        Some(Provenance::Finetuned { train_size, .. }) => *train_size,
        _ => 0,
    };
    ModelSummary {
        id: model.id().to_string(),
        provenance: model.provenance().to_vec(),
        train_size,
    }
}

impl<'a> SeedRun<'a> {
    pub fn new(
        config: &'a ExperimentConfig,
        setup: &'a Setup,
        f0: &'a EmbeddingModel,
        seed: u64,
        transport: Option<Arc<dyn Transport>>,
    ) -> Self {
        Self {
            config,
            setup,
            f0,
            seed,
            train: config.train.with_seed(seed),
            transport,
        }
    }

    fn labeled_pairs(&self) -> Result<Vec<TrainPair>> {
        match self.setup {
            Setup::Pairs(p) => TrainPair::from_dataset(&p.labeled),
            Setup::Search(s) => Ok(s.labeled_pairs.clone()),
        }
    }

    fn save(&self, arm: &str, model: &EmbeddingModel) -> Result<()> {
        let Some(dir) = self.config.output_dir.as_ref().filter(|_| self.config.save_models) else {
            return Ok(());
        };
        let dir = dir.join(format!("seed-{}", self.seed)).join(arm);
        std::fs::create_dir_all(&dir)?;
        model.save(dir.join("model.json"))
    }

    /// Step 1 plus the no-augmentation baseline.
    pub fn finetune(&self) -> Result<Finetuned> {
        let f = train_pairs(self.f0, &self.labeled_pairs().stage("finetune")?, &self.train).stage("finetune")?;
        self.save("init", &f).stage("finetune")?;
        let z = match self.setup {
            Setup::Pairs(p) => deviation_scores_pairs(&f, self.f0, &p.pool),
            Setup::Search(s) => deviation_scores_search(&f, self.f0, s.pool.queries(), s.pool.labels()),
        }
        .stage("score")?;
        let metrics = self.evaluate(&f).stage("evaluate")?;
        let baseline = ArmOutcome {
            name: "init".into(),
            strategy: None,
            budget: 0,
            selected_ids: Vec::new(),
            agreement: None,
            metrics,
            model: summary(&f),
            records: Vec::new(),
        };
        Ok(Finetuned { f, z, baseline })
    }

    /// Step 2.
    pub fn select(&self, ft: &Finetuned, strategy: Strategy, budget: usize) -> Result<Vec<String>> {
        let ids = self.setup.pool_ids();
        match (strategy, self.setup) {
            (Strategy::Random, _) => sample_random(&ids, budget, self.seed),
            (Strategy::CondInformativeness, _) => sample_top_b(&ft.z, budget),
            (Strategy::CondInformativenessDomain, setup) => {
                let domains = match setup {
                    Setup::Pairs(p) => p.domains.as_ref(),
                    Setup::Search(s) => s.domains.as_ref(),
                };
                let domains =
                    domains.ok_or_else(|| Error::invalid("domain sampling needs a domain on every pool input"))?;
                domain_sample(&ft.z, domains, budget)
            }
            (Strategy::Uncertainty, Setup::Pairs(p)) => {
                let s = pair_scores(&ft.f, &p.pool)?;
                let items: Vec<(&str, f64)> = p.pool.iter().map(|e| e.id.as_str()).zip(s).collect();
                select_uncertain(&items, budget)
            }
            (Strategy::Uncertainty, Setup::Search(s)) => {
                let index = LabelIndex::build(&ft.f, s.pool.labels())?;
                let items: Vec<(&str, f64)> = s
                    .pool
                    .queries()
                    .iter()
                    .map(|q| {
                        let e =
                            ft.f.embed(&q.text)
                                .map_err(|_| Error::EmptyEmbedding { id: q.id.clone() })?;
                        Ok((q.id.as_str(), index.nearest(&e, 1)[0].1))
                    })
                    .collect::<Result<_>>()?;
                select_uncertain(&items, budget)
            }
            (Strategy::BaseConsistent | Strategy::BaseInconsistent, Setup::Pairs(p)) => {
                let truth = p.truth.as_ref().ok_or_else(|| Error::MissingTruth("pool".into()))?;
                let mode = if strategy == Strategy::BaseConsistent {
                    ExtremeMode::Consistent
                } else {
                    ExtremeMode::Inconsistent
                };
                sample_base_extreme(&p.pool, truth, &p.pool_base, budget, mode)
            }
            (Strategy::BaseConsistent | Strategy::BaseInconsistent, Setup::Search(_)) => {
                Err(Error::invalid("base-extreme strategies apply to pairs only"))
            }
        }
    }

    fn quantiles(&self, ft: &Finetuned) -> Result<Option<HashMap<String, usize>>> {
        match &self.config.annotator {
            AnnotatorConfig::Simulated { profile } if profile.per_quantile_accuracy.is_some() => {
                Ok(Some(quantile_partition(&ft.z, self.config.n_quantiles)?.quantile_of()))
            }
            _ => Ok(None),
        }
    }

    fn client(&self) -> Result<LlmClient> {
        let AnnotatorConfig::Llm { llm, .. } = &self.config.annotator else {
            unreachable!("client requested for a non-LLM annotator")
        };
        let mut cfg = llm.clone();
        cfg.cache_dir = self.config.seed_cache_dir(self.seed);
        match &self.transport {
            Some(t) => LlmClient::new(cfg, Box::new(Arc::clone(t))),
            None => LlmClient::http(cfg),
        }
    }

    fn search_items(&self, s: &SearchSetup, ft: &Finetuned, ids: &[String]) -> Result<Vec<SearchItem>> {
        let index = LabelIndex::build(&ft.f, s.pool.labels())?;
        let text: HashMap<&str, &str> = s
            .pool
            .labels()
            .iter()
            .map(|l| (l.id.as_str(), l.text.as_str()))
            .collect();
        let queries: HashMap<&str, &str> = s
            .pool
            .queries()
            .iter()
            .map(|q| (q.id.as_str(), q.text.as_str()))
            .collect();
        ids.iter()
            .map(|id| {
                let q = queries[id.as_str()];
                let e = ft.f.embed(q).map_err(|_| Error::EmptyEmbedding { id: id.clone() })?;
                let candidates = index
                    .nearest(&e, self.config.top_k)
                    .into_iter()
                    .map(|(l, score)| {
                        let t = text[l.as_str()].to_string();
                        (l, t, score)
                    })
                    .collect();
                Ok(SearchItem {
                    id: id.clone(),
                    text: q.to_string(),
                    candidates,
                })
            })
            .collect()
    }

    /// Step 3.
    pub fn annotate(&self, ft: &Finetuned, ids: &[String]) -> Result<Vec<AnnotationRecord>> {
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        let quantiles = self.quantiles(ft)?;
        match self.setup {
            Setup::Pairs(p) => {
                let truth = || p.truth.as_ref().ok_or_else(|| Error::MissingTruth("pool".into()));
                match &self.config.annotator {
                    AnnotatorConfig::Gt => annotate_gt(ids, truth()?),
                    AnnotatorConfig::Simulated { profile } => {
                        annotate_simulated(ids, truth()?, profile, quantiles.as_ref(), self.seed)
                    }
                    AnnotatorConfig::Llm { .. } => {
                        let examples: Vec<_> = ids
                            .iter()
                            .map(|id| {
                                p.pool
                                    .get(id)
                                    .cloned()
                                    .ok_or_else(|| Error::invalid(format!("`{id}` not in pool")))
                            })
                            .collect::<Result<_>>()?;
                        annotate_llm_pairs(&examples, &self.client()?)
                    }
                }
            }
            Setup::Search(s) => {
                let items = self.search_items(s, ft, ids)?;
                let truth = || s.truth.as_ref().ok_or_else(|| Error::MissingTruth("pool".into()));
                match &self.config.annotator {
                    AnnotatorConfig::Gt => annotate_gt_search(&items, truth()?),
                    AnnotatorConfig::Simulated { profile } => {
                        annotate_simulated_search(&items, truth()?, profile, quantiles.as_ref(), self.seed)
                    }
                    AnnotatorConfig::Llm { template, .. } => {
                        annotate_llm_search(&items, template.expect("validated"), &self.client()?)
                    }
                }
            }
        }
    }

    fn agreement(&self, records: &[AnnotationRecord]) -> Result<Option<f64>> {
        if records.is_empty() {
            return Ok(None);
        }
        match self.setup {
            Setup::Pairs(PairSetup { truth: Some(t), .. }) => agreement(records, t).map(Some),
            Setup::Search(SearchSetup { truth: Some(t), .. }) => {
                let mut hits = 0;
                for r in records {
                    let rel = t.relevant(&r.id)?;
                    let Assignment::Search(map) = &r.assignment else {
                        return Err(Error::invalid("pair record in search agreement"));
                    };
                    let shown: BTreeSet<&String> = map.keys().filter(|l| rel.contains(*l)).collect();
                    let pos = r.assignment.positives();
                    let ok = match pos.as_slice() {
                        [] => shown.is_empty(),
                        [one] => rel.contains(*one),
                        _ => false,
                    };
                    hits += usize::from(ok);
                }
                Ok(Some(hits as f64 / records.len() as f64))
            }
            _ => Ok(None),
        }
    }

    /// Step 4: retrain from the base model on the labeled set plus the
    /// annotations, taken in pool order whatever order they were selected in.
    pub fn retrain(&self, records: &[AnnotationRecord]) -> Result<EmbeddingModel> {
        let mut pairs = self.labeled_pairs()?;
        let position: HashMap<String, usize> = self
            .setup
            .pool_ids()
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, i))
            .collect();
        let mut records: Vec<&AnnotationRecord> = records.iter().collect();
        records.sort_by_key(|r| position.get(&r.id).copied().unwrap_or(usize::MAX));
        match self.setup {
            Setup::Pairs(p) => {
                for r in records {
                    let ex = p
                        .pool
                        .get(&r.id)
                        .ok_or_else(|| Error::invalid(format!("`{}` not in pool", r.id)))?;
                    let label = r
                        .assignment
                        .as_pair()
                        .ok_or_else(|| Error::invalid("search record for a pair task"))?;
                    pairs.push(TrainPair {
                        id: ex.id.clone(),
                        text_a: ex.text_a.clone(),
                        text_b: ex.text_b.clone(),
                        target: f64::from(label),
                    });
                }
            }
            Setup::Search(s) => {
                let labels: HashMap<&str, _> = s.pool.labels().iter().map(|l| (l.id.as_str(), l)).collect();
                let queries: HashMap<&str, _> = s.pool.queries().iter().map(|q| (q.id.as_str(), q)).collect();
                for r in records {
                    let Assignment::Search(map) = &r.assignment else {
                        return Err(Error::invalid("pair record for a search task"));
                    };
                    let q = queries
                        .get(r.id.as_str())
                        .ok_or_else(|| Error::invalid(format!("`{}` not in pool", r.id)))?;
                    for (l, &v) in map {
                        let doc = labels.get(l.as_str()).ok_or_else(|| Error::UnknownLabel {
                            query: r.id.clone(),
                            label: l.clone(),
                        })?;
                        pairs.push(search_pair(q, doc, f64::from(v)));
                    }
                }
            }
        }
        train_pairs(self.f0, &pairs, &self.train)
    }

    pub fn evaluate(&self, model: &EmbeddingModel) -> Result<Vec<MetricReport>> {
        let optional = |r: Result<MetricReport>, out: &mut Vec<MetricReport>| match r {
            Ok(m) => {
                out.push(m);
                Ok(())
            }
            Err(Error::UndefinedMetric(msg)) => {
                log::debug!("skipping subset: {msg}");
                Ok(())
            }
            Err(e) => Err(e),
        };
        let mut out = Vec::new();
        match self.setup {
            Setup::Pairs(p) => {
                let eval = PairEvalSet::new(&p.test, p.test_base.clone(), self.config.extreme_fraction)?;
                let scores = pair_scores(model, &p.test)?;
                out.push(eval.auc(&scores, &Subset::All)?);
                for subset in [Subset::HighBaseError, Subset::LowBaseError] {
                    optional(eval.auc(&scores, &subset), &mut out)?;
                }
                if p.test.iter().all(|e| e.domain.is_some()) {
                    let tags: BTreeSet<&String> = p.test.iter().filter_map(|e| e.domain.as_ref()).collect();
                    for t in tags {
                        optional(eval.auc(&scores, &Subset::Domain(t.clone())), &mut out)?;
                    }
                }
            }
            Setup::Search(s) => {
                let p1 = |data: &crate::dataset::SearchDataset, subset: Subset| -> Result<MetricReport> {
                    let r = precision_at_1(model, data)?;
                    Ok(MetricReport {
                        metric: "p@1".into(),
                        value: r.value,
                        stderr: None,
                        subset: Some(subset.name()),
                        n: r.n,
                    })
                };
                out.push(p1(&s.test, Subset::All)?);
                if s.test.queries().iter().all(|q| q.domain.is_some()) {
                    let tags: BTreeSet<&String> = s.test.queries().iter().filter_map(|q| q.domain.as_ref()).collect();
                    for t in tags {
                        let part = s.test.with_queries(|q| q.domain.as_ref() == Some(t));
                        optional(p1(&part, Subset::Domain(t.clone())), &mut out)?;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Steps 3 and 4 for a given selection, then evaluation.
    pub fn arm(&self, ft: &Finetuned, name: &str, strategy: Option<Strategy>, ids: Vec<String>) -> Result<ArmOutcome> {
        let records = self.annotate(ft, &ids).stage("annotate")?;
        let agreement = self.agreement(&records).stage("annotate")?;
        let model = self.retrain(&records).stage("retrain")?;
        self.save(name, &model).stage("retrain")?;
        let metrics = self.evaluate(&model).stage("evaluate")?;
        Ok(ArmOutcome {
            name: name.to_string(),
            strategy,
            budget: ids.len(),
            selected_ids: ids,
            agreement,
            metrics,
            model: summary(&model),
            records,
        })
    }

    /// Sample with `strategy` and run the arm.
    pub fn strategy_arm(&self, ft: &Finetuned, strategy: Strategy, budget: usize) -> Result<ArmOutcome> {
        let ids = self.select(ft, strategy, budget).stage("sample")?;
        self.arm(ft, strategy.name(), Some(strategy), ids)
    }
}
