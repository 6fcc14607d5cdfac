//! Builds the labeled set, unlabeled pool and test set of an experiment.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{DataConfig, ExperimentConfig, SplitKind, Task};
use crate::dataset::LabelDoc;
use crate::dataset::{
    generate_synthetic_pairs, generate_synthetic_search, load_pair_dataset, load_search_dataset, make_extreme_split,
    read_jsonl, PairDataset, SealedSearchTruth, SealedTruth, SearchDataset, SearchQuery, SyntheticSearchSpec,
    SyntheticSpec,
};
use crate::encoder::{EmbeddingModel, Encoder, LabelIndex, TrainPair};
use crate::error::{Error, Result};
use crate::eval::pair_scores;

pub struct PairSetup {
    pub labeled: PairDataset,
    /// Unlabeled; labels live in `truth`.
    pub pool: PairDataset,
    pub truth: Option<SealedTruth>,
    pub test: PairDataset,
    pub pool_base: Vec<f64>,
    pub test_base: Vec<f64>,
    /// Pool id to domain tag, for pools where every example has one.
    pub domains: Option<HashMap<String, String>>,
}

pub struct SearchSetup {
    pub labeled: SearchDataset,
    /// Queries without relevance; relevance lives in `truth`.
    pub pool: SearchDataset,
    pub truth: Option<SealedSearchTruth>,
    pub test: SearchDataset,
    pub domains: Option<HashMap<String, String>>,
    /// Each labeled query against its base top-k labels and its relevant
    /// labels, target 1 for relevant.
    pub labeled_pairs: Vec<TrainPair>,
}

pub enum Setup {
    Pairs(PairSetup),
    Search(SearchSetup),
}

impl Setup {
    pub fn pool_ids(&self) -> Vec<String> {
        match self {
            Setup::Pairs(p) => p.pool.ids(),
            Setup::Search(s) => s.pool.queries().iter().map(|q| q.id.clone()).collect(),
        }
    }

    pub fn labeled_len(&self) -> usize {
        match self {
            Setup::Pairs(p) => p.labeled.len(),
            Setup::Search(s) => s.labeled.queries().len(),
        }
    }

    pub fn has_truth(&self) -> bool {
        match self {
            Setup::Pairs(p) => p.truth.is_some(),
            Setup::Search(s) => s.truth.is_some(),
        }
    }
}

pub fn prepare(config: &ExperimentConfig, f0: &EmbeddingModel) -> Result<Setup> {
    let setup = match config.task {
        Task::Pairs => Setup::Pairs(prepare_pairs(&config.data, f0)?),
        Task::Search => Setup::Search(prepare_search(&config.data, f0, config.top_k)?),
    };
    if setup.pool_ids().is_empty() {
        return Err(Error::invalid("the unlabeled pool is empty"));
    }
    Ok(setup)
}

fn shuffled_split<T: Clone>(items: &[T], labeled_fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = (labeled_fraction * items.len() as f64).floor() as usize;
    let mut labeled: Vec<usize> = order[..k].to_vec();
    let mut pool: Vec<usize> = order[k..].to_vec();
    labeled.sort_unstable();
    pool.sort_unstable();
    (
        labeled.into_iter().map(|i| items[i].clone()).collect(),
        pool.into_iter().map(|i| items[i].clone()).collect(),
    )
}

fn domain_map<'a>(tags: impl Iterator<Item = (&'a str, Option<&'a String>)>) -> Option<HashMap<String, String>> {
    tags.map(|(id, d)| d.map(|d| (id.to_string(), d.clone()))).collect()
}

fn prepare_pairs(data: &DataConfig, f0: &EmbeddingModel) -> Result<PairSetup> {
    let (full, test) = match (&data.synthetic, &data.files) {
        (Some(spec), _) => (
            generate_synthetic_pairs(spec)?,
            generate_synthetic_pairs(&test_pairs_spec(spec, data.test_size))?,
        ),
        (None, Some(files)) => (load_pair_dataset(&files.train)?, load_pair_dataset(&files.test)?),
        (None, None) => return Err(Error::Config("no pair data source".into())),
    };
    let (labeled, pool, truth) = match data.split {
        SplitKind::Extreme => {
            let base = pair_scores(f0, &full)?;
            let split = make_extreme_split(&full, &base, data.split_fraction)?;
            (split.source_labeled, split.target_unlabeled, Some(split.truth))
        }
        SplitKind::Random => {
            let (l, u) = shuffled_split(full.examples(), data.split_fraction, data.split_seed);
            let (pool, truth) = PairDataset::new(format!("{}.pool", full.name), u)?.seal()?;
            (
                PairDataset::new(format!("{}.labeled", full.name), l)?,
                pool,
                Some(truth),
            )
        }
        SplitKind::Given => {
            let files = data.files.as_ref().expect("validated");
            let raw = load_pair_dataset(files.pool.as_ref().expect("validated"))?;
            let (pool, truth) = if let Some(path) = &files.pool_truth {
                let mut stripped = raw.examples().to_vec();
                stripped.iter_mut().for_each(|e| e.label = None);
                (
                    PairDataset::new(raw.name.clone(), stripped)?,
                    Some(SealedTruth::load_jsonl(path)?),
                )
            } else if raw.is_fully_labeled() {
                let (p, t) = raw.seal()?;
                (p, Some(t))
            } else {
                let mut stripped = raw.examples().to_vec();
                stripped.iter_mut().for_each(|e| e.label = None);
                (PairDataset::new(raw.name.clone(), stripped)?, None)
            };
            (full, pool, truth)
        }
    };
    labeled.labels()?;
    test.labels()?;
    let pool_base = pair_scores(f0, &pool)?;
    let test_base = pair_scores(f0, &test)?;
    let domains = domain_map(pool.iter().map(|e| (e.id.as_str(), e.domain.as_ref())));
    Ok(PairSetup {
        labeled,
        pool,
        truth,
        test,
        pool_base,
        test_base,
        domains,
    })
}

fn seal_queries(
    queries: Vec<SearchQuery>,
    labels: &SearchDataset,
) -> Result<(SearchDataset, Option<SealedSearchTruth>)> {
    let complete = queries.iter().all(|q| q.relevant.is_some());
    let ds = SearchDataset::new(queries, labels.labels().to_vec())?;
    let (sealed, truth) = ds.seal();
    Ok((sealed, complete.then_some(truth)))
}

fn prepare_search(data: &DataConfig, f0: &EmbeddingModel, top_k: usize) -> Result<SearchSetup> {
    let (full, test) = match (&data.synthetic_search, &data.files) {
        (Some(spec), _) => (
            generate_synthetic_search(spec)?.dataset,
            generate_synthetic_search(&test_search_spec(spec, data.test_size))?.dataset,
        ),
        (None, Some(files)) => {
            let labels = files.labels.as_ref().expect("validated");
            (
                load_search_dataset(&files.train, labels)?,
                load_search_dataset(&files.test, labels)?,
            )
        }
        (None, None) => return Err(Error::Config("no search data source".into())),
    };
    let (labeled, pool, truth) = match data.split {
        SplitKind::Random => {
            let (l, u) = shuffled_split(full.queries(), data.split_fraction, data.split_seed);
            let (pool, truth) = seal_queries(u, &full)?;
            (SearchDataset::new(l, full.labels().to_vec())?, pool, truth)
        }
        SplitKind::Given => {
            let files = data.files.as_ref().expect("validated");
            let labels = files.labels.as_ref().expect("validated");
            let raw = load_search_dataset(files.pool.as_ref().expect("validated"), labels)?;
            let (pool, mut truth) = seal_queries(raw.queries().to_vec(), &full)?;
            if let Some(path) = &files.pool_truth {
                let rows: Vec<SearchQuery> = read_jsonl(path)?;
                let map: HashMap<String, BTreeSet<String>> = rows
                    .into_iter()
                    .map(|q| (q.id, q.relevant.unwrap_or_default()))
                    .collect();
                truth = Some(SealedSearchTruth::from_map(map));
            }
            (full, pool, truth)
        }
        SplitKind::Extreme => return Err(Error::Config("the extreme split applies to pairs only".into())),
    };
    for q in labeled.queries().iter().chain(test.queries()) {
        if q.relevant.is_none() {
            return Err(Error::Unlabeled(q.id.clone()));
        }
    }
    let pool_ids: HashSet<&str> = pool.queries().iter().map(|q| q.id.as_str()).collect();
    if labeled.queries().iter().any(|q| pool_ids.contains(q.id.as_str())) {
        return Err(Error::invalid("labeled and pool queries overlap"));
    }
    let domains = domain_map(pool.queries().iter().map(|q| (q.id.as_str(), q.domain.as_ref())));
    let labeled_pairs = search_train_pairs(&labeled, f0, top_k)?;
    Ok(SearchSetup {
        labeled,
        pool,
        truth,
        test,
        domains,
        labeled_pairs,
    })
}

pub(crate) fn search_pair(query: &SearchQuery, label: &LabelDoc, target: f64) -> TrainPair {
    TrainPair {
        id: format!("{}|{}", query.id, label.id),
        text_a: query.text.clone(),
        text_b: label.text.clone(),
        target,
    }
}

fn search_train_pairs(labeled: &SearchDataset, f0: &EmbeddingModel, top_k: usize) -> Result<Vec<TrainPair>> {
    let index = LabelIndex::build(f0, labeled.labels())?;
    let by_id: HashMap<&str, &LabelDoc> = labeled.labels().iter().map(|l| (l.id.as_str(), l)).collect();
    let mut out = Vec::new();
    for q in labeled.queries() {
        let rel = q.relevant.as_ref().ok_or_else(|| Error::Unlabeled(q.id.clone()))?;
        let emb = f0
            .embed(&q.text)
            .map_err(|_| Error::EmptyEmbedding { id: q.id.clone() })?;
        let mut ids: BTreeSet<String> = index.nearest(&emb, top_k).into_iter().map(|(l, _)| l).collect();
        ids.extend(rel.iter().cloned());
        for id in ids {
            let target = f64::from(u8::from(rel.contains(&id)));
            out.push(search_pair(q, by_id[id.as_str()], target));
        }
    }
    Ok(out)
}

/// Test draw of the pair generator: same inventory, next stream.
fn test_pairs_spec(spec: &SyntheticSpec, n: usize) -> SyntheticSpec {
    SyntheticSpec {
        n_pairs: n,
        ..spec.with_stream(spec.stream + 1, format!("{}.test", spec.name))
    }
}

fn test_search_spec(spec: &SyntheticSearchSpec, n: usize) -> SyntheticSearchSpec {
    SyntheticSearchSpec {
        n_queries: n,
        stream: spec.stream + 1,
        ..spec.clone()
    }
}
