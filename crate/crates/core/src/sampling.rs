//! Selection of unlabeled inputs for annotation.
//!
//! The deviation score `z` of an input is how far the finetuned model's
//! similarity moved away from the base model's on it. Besides top-`B` by
//! `z`, this module carries the baselines it is compared against: random,
//! uncertainty, and the two ground-truth oracles that pick by base-model
//! error. Ties are always resolved in pool order.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelDoc, PairDataset, SealedTruth, SearchQuery};
use crate::encoder::{dot, Encoder, LabelIndex};
use crate::error::{Error, Result};

/// Deviation between finetuned and base scores.
pub trait Deviation: Sync {
    fn deviation(&self, f_score: f64, f0_score: f64) -> f64;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SquaredError;

impl Deviation for SquaredError {
    fn deviation(&self, f_score: f64, f0_score: f64) -> f64 {
        (f_score - f0_score).powi(2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationScore {
    pub id: String,
    pub z: f64,
    pub f_score: f64,
    pub f0_score: f64,
    /// Base model's nearest label, for search queries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_label_id: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Random,
    Uncertainty,
    CondInformativeness,
    BaseConsistent,
    BaseInconsistent,
    CondInformativenessDomain,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Random,
        Strategy::Uncertainty,
        Strategy::CondInformativeness,
        Strategy::BaseConsistent,
        Strategy::BaseInconsistent,
        Strategy::CondInformativenessDomain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Uncertainty => "uncertainty",
            Strategy::CondInformativeness => "cond-informativeness",
            Strategy::BaseConsistent => "base-consistent",
            Strategy::BaseInconsistent => "base-inconsistent",
            Strategy::CondInformativenessDomain => "cond-informativeness-domain",
        }
    }

    /// Strategies that read sealed ground truth.
    pub fn needs_truth(self) -> bool {
        matches!(self, Strategy::BaseConsistent | Strategy::BaseInconsistent)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown strategy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub strategy: Strategy,
    pub budget: usize,
    pub seed: u64,
}

fn check_budget(budget: usize, pool: usize) -> Result<()> {
    if budget > pool {
        return Err(Error::BudgetTooLarge { budget, pool });
    }
    Ok(())
}

pub fn deviation_scores_pairs<E: Encoder + ?Sized>(f: &E, f0: &E, pool: &PairDataset) -> Result<Vec<DeviationScore>> {
    deviation_scores_pairs_with(f, f0, pool, &SquaredError)
}

pub fn deviation_scores_pairs_with<E: Encoder + ?Sized>(
    f: &E,
    f0: &E,
    pool: &PairDataset,
    dev: &dyn Deviation,
) -> Result<Vec<DeviationScore>> {
    pool.examples()
        .par_iter()
        .map(|ex| {
            let tag = |e: Error| match e {
                Error::EmptyEmbedding { .. } => Error::EmptyEmbedding { id: ex.id.clone() },
                e => e,
            };
            let f_score = f.similarity(&ex.text_a, &ex.text_b).map_err(tag)?;
            let f0_score = f0.similarity(&ex.text_a, &ex.text_b).map_err(tag)?;
            Ok(DeviationScore {
                id: ex.id.clone(),
                z: dev.deviation(f_score, f0_score),
                f_score,
                f0_score,
                anchor_label_id: None,
            })
        })
        .collect()
}

/// Deviation of search queries, measured on the base model's nearest label.
pub fn deviation_scores_search<E: Encoder + ?Sized>(
    f: &E,
    f0: &E,
    queries: &[SearchQuery],
    corpus: &[LabelDoc],
) -> Result<Vec<DeviationScore>> {
    let base_index = LabelIndex::build(f0, corpus)?;
    queries
        .par_iter()
        .map(|q| {
            let tag = |_| Error::EmptyEmbedding { id: q.id.clone() };
            let q0 = f0.embed(&q.text).map_err(tag)?;
            let (anchor, f0_score) = base_index
                .nearest(&q0, 1)
                .into_iter()
                .next()
                .ok_or(Error::EmptyCorpus)?;
            let doc = &corpus[corpus.iter().position(|l| l.id == anchor).expect("from corpus")];
            let qf = f.embed(&q.text).map_err(tag)?;
            let lf = f
                .embed(&doc.text)
                .map_err(|_| Error::EmptyEmbedding { id: doc.id.clone() })?;
            let f_score = dot(&qf, &lf);
            Ok(DeviationScore {
                id: q.id.clone(),
                z: SquaredError.deviation(f_score, f0_score),
                f_score,
                f0_score,
                anchor_label_id: Some(anchor),
            })
        })
        .collect()
}

/// Ids of the `budget` largest values, descending; earlier entries win ties.
pub fn top_by_value(items: &[(&str, f64)], budget: usize) -> Result<Vec<String>> {
    check_budget(budget, items.len())?;
    let mut order: Vec<usize> = (0..items.len()).collect();
    // stable sort keeps pool order among equal values
    order.sort_by(|&i, &j| items[j].1.total_cmp(&items[i].1));
    Ok(order[..budget].iter().map(|&i| items[i].0.to_string()).collect())
}

pub fn sample_top_b(scores: &[DeviationScore], budget: usize) -> Result<Vec<String>> {
    let items: Vec<(&str, f64)> = scores.iter().map(|s| (s.id.as_str(), s.z)).collect();
    top_by_value(&items, budget)
}

/// Uniform sample without replacement.
pub fn sample_random(pool_ids: &[String], budget: usize, seed: u64) -> Result<Vec<String>> {
    check_budget(budget, pool_ids.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, pool_ids.len(), budget)
        .into_iter()
        .map(|i| pool_ids[i].clone())
        .collect())
}

/// Picks the scores closest to 0.5, the decision boundary of 0/1 targets.
pub fn select_uncertain(scores: &[(&str, f64)], budget: usize) -> Result<Vec<String>> {
    let u: Vec<(&str, f64)> = scores.iter().map(|&(id, s)| (id, -(s - 0.5).abs())).collect();
    top_by_value(&u, budget)
}

pub fn sample_uncertainty<E: Encoder + ?Sized>(f: &E, pool: &PairDataset, budget: usize) -> Result<Vec<String>> {
    check_budget(budget, pool.len())?;
    let scores: Vec<f64> = pool
        .examples()
        .par_iter()
        .map(|ex| {
            f.similarity(&ex.text_a, &ex.text_b)
                .map_err(|_| Error::EmptyEmbedding { id: ex.id.clone() })
        })
        .collect::<Result<_>>()?;
    let items: Vec<(&str, f64)> = pool.iter().map(|e| e.id.as_str()).zip(scores).collect();
    select_uncertain(&items, budget)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtremeMode {
    /// Lowest base error.
    Consistent,
    /// Highest base error.
    Inconsistent,
}

/// Ground-truth oracle: rank the pool by base squared error against the
/// sealed labels. `f0_scores` is aligned with the pool order.
pub fn sample_base_extreme(
    pool: &PairDataset,
    truth: &SealedTruth,
    f0_scores: &[f64],
    budget: usize,
    mode: ExtremeMode,
) -> Result<Vec<String>> {
    check_budget(budget, pool.len())?;
    if f0_scores.len() != pool.len() {
        return Err(Error::invalid("base scores not aligned with pool"));
    }
    let items: Vec<(&str, f64)> = pool
        .iter()
        .zip(f0_scores)
        .map(|(ex, &s)| {
            let e = (s - f64::from(truth.label(&ex.id)?)).powi(2);
            Ok((
                ex.id.as_str(),
                match mode {
                    ExtremeMode::Inconsistent => e,
                    ExtremeMode::Consistent => -e,
                },
            ))
        })
        .collect::<Result<_>>()?;
    top_by_value(&items, budget)
}

/// Equal-size bins of the pool by descending value. Bin 0 holds the highest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantilePartition {
    pub bins: Vec<Vec<String>>,
}

impl QuantilePartition {
    pub fn n_quantiles(&self) -> usize {
        self.bins.len()
    }

    /// Id to 1-based quantile index.
    pub fn quantile_of(&self) -> HashMap<String, usize> {
        self.bins
            .iter()
            .enumerate()
            .flat_map(|(b, ids)| ids.iter().map(move |id| (id.clone(), b + 1)))
            .collect()
    }
}

/// Slices items sorted by value (descending, pool-order ties) into `n`
/// bins; the remainder goes one per bin starting from the first.
pub fn partition_by_value(items: &[(&str, f64)], n_quantiles: usize) -> Result<QuantilePartition> {
    if n_quantiles == 0 || n_quantiles > items.len() {
        return Err(Error::invalid(format!(
            "{n_quantiles} quantiles over {} items",
            items.len()
        )));
    }
    let sorted = top_by_value(items, items.len())?;
    let (base, rem) = (items.len() / n_quantiles, items.len() % n_quantiles);
    let mut bins = Vec::with_capacity(n_quantiles);
    let mut start = 0;
    for b in 0..n_quantiles {
        let size = base + usize::from(b < rem);
        bins.push(sorted[start..start + size].to_vec());
        start += size;
    }
    Ok(QuantilePartition { bins })
}

pub fn quantile_partition(scores: &[DeviationScore], n_quantiles: usize) -> Result<QuantilePartition> {
    let items: Vec<(&str, f64)> = scores.iter().map(|s| (s.id.as_str(), s.z)).collect();
    partition_by_value(&items, n_quantiles)
}

/// Mean `z` per domain, ordered by descending mean (ties by first appearance).
pub fn domain_means(scores: &[DeviationScore], domains: &HashMap<String, String>) -> Result<Vec<(String, f64, usize)>> {
    let mut order: Vec<String> = Vec::new();
    let mut acc: HashMap<&str, (f64, usize)> = HashMap::new();
    for s in scores {
        let d = domains.get(&s.id).ok_or_else(|| Error::MissingDomain(s.id.clone()))?;
        let e = acc.entry(d.as_str()).or_insert_with(|| {
            order.push(d.clone());
            (0.0, 0)
        });
        e.0 += s.z;
        e.1 += 1;
    }
    let mut out: Vec<(String, f64, usize)> = order
        .into_iter()
        .map(|d| {
            let (sum, n) = acc[d.as_str()];
            (d, sum / n as f64, n)
        })
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(out)
}

/// Domain-level selection: take domains by descending mean deviation until
/// they can cover the budget, then spread the budget evenly over them.
pub fn domain_sample(
    scores: &[DeviationScore],
    domains: &HashMap<String, String>,
    budget: usize,
) -> Result<Vec<String>> {
    check_budget(budget, scores.len())?;
    let ranked = domain_means(scores, domains)?;
    let mut selected = Vec::new();
    let mut covered = 0;
    for (d, _, n) in &ranked {
        if covered >= budget && !selected.is_empty() {
            break;
        }
        selected.push(d.clone());
        covered += n;
    }

    let sizes: Vec<usize> = selected
        .iter()
        .map(|d| ranked.iter().find(|r| &r.0 == d).expect("ranked").2)
        .collect();
    let k = selected.len();
    let mut share: Vec<usize> = (0..k).map(|i| budget / k + usize::from(i < budget % k)).collect();
    // spill shares that exceed a domain's size onto the next domains with room
    loop {
        let excess: usize = share.iter().zip(&sizes).map(|(s, n)| s.saturating_sub(*n)).sum();
        if excess == 0 {
            break;
        }
        let mut left = excess;
        for i in 0..k {
            share[i] = share[i].min(sizes[i]);
        }
        for i in 0..k {
            let room = sizes[i] - share[i];
            let take = room.min(left);
            share[i] += take;
            left -= take;
        }
    }

    let mut out = Vec::with_capacity(budget);
    for (d, want) in selected.iter().zip(share) {
        let items: Vec<(&str, f64)> = scores
            .iter()
            .filter(|s| domains.get(&s.id) == Some(d))
            .map(|s| (s.id.as_str(), s.z))
            .collect();
        out.extend(top_by_value(&items, want)?);
    }
    Ok(out)
}

/// Writes `id,z,f_score,f0_score,anchor_label_id,domain`.
pub fn write_scores_csv(
    path: impl AsRef<Path>,
    scores: &[DeviationScore],
    domains: &HashMap<String, String>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["id", "z", "f_score", "f0_score", "anchor_label_id", "domain"])
        .map_err(csv_err)?;
    for s in scores {
        w.write_record([
            s.id.as_str(),
            &s.z.to_string(),
            &s.f_score.to_string(),
            &s.f0_score.to_string(),
            s.anchor_label_id.as_deref().unwrap_or(""),
            domains.get(&s.id).map(String::as_str).unwrap_or(""),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Writes one id per line.
pub fn write_ids(path: impl AsRef<Path>, ids: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for id in ids {
        writeln!(f, "{id}")?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PairExample;
    use crate::encoder::{EmbeddingModel, ProjectionInit};
    use proptest::prelude::{any, prop_assert, prop_assert_eq, prop_assume, proptest};
    use proptest::strategy::Strategy as _;
    use std::collections::HashSet;

    fn scores(z: &[f64]) -> Vec<DeviationScore> {
        z.iter()
            .enumerate()
            .map(|(i, &z)| DeviationScore {
                id: format!("x{i}"),
                z,
                f_score: 0.0,
                f0_score: 0.0,
                anchor_label_id: None,
            })
            .collect()
    }

    fn pool(n: usize) -> PairDataset {
        let ex = (0..n)
            .map(|i| {
                PairExample::new(
                    format!("p{i}"),
                    format!("w{i} w{} w7", i * 3),
                    format!("w{} w9 w{i}", i + 1),
                )
            })
            .collect();
        PairDataset::new("pool", ex).unwrap()
    }

    #[test]
    fn identical_models_have_zero_deviation() {
        let m = EmbeddingModel::base();
        let s = deviation_scores_pairs(&m, &m.clone(), &pool(20)).unwrap();
        assert!(s.iter().all(|d| d.z == 0.0));
    }

    #[test]
    fn squared_error_value() {
        assert!((SquaredError.deviation(0.9, 0.3) - 0.36).abs() < 1e-12);
    }

    #[test]
    fn deviation_matches_independent_similarity_calls() {
        let f0 = EmbeddingModel::base();
        let f = EmbeddingModel::with_init(64, ProjectionInit::Uniform { seed: 5, scale: 0.3 });
        let p = pool(50);
        let s = deviation_scores_pairs(&f, &f0, &p).unwrap();
        for (d, ex) in s.iter().zip(p.iter()) {
            assert_eq!(d.id, ex.id);
            let a = f.similarity(&ex.text_a, &ex.text_b).unwrap();
            let b = f0.similarity(&ex.text_a, &ex.text_b).unwrap();
            assert_eq!(d.z, (a - b).powi(2));
        }
    }

    #[test]
    fn empty_text_error_names_example() {
        let ds = PairDataset::new("e", vec![PairExample::new("bad", "", "x y z")]).unwrap();
        let m = EmbeddingModel::base();
        assert!(matches!(
            deviation_scores_pairs(&m, &m, &ds),
            Err(Error::EmptyEmbedding { id }) if id == "bad"
        ));
    }

    fn corpus(texts: &[&str]) -> Vec<LabelDoc> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| LabelDoc {
                id: format!("L{i}"),
                text: t.to_string(),
            })
            .collect()
    }

    fn query(id: &str, text: &str) -> SearchQuery {
        SearchQuery {
            id: id.into(),
            text: text.into(),
            domain: None,
            relevant: None,
        }
    }

    #[test]
    fn search_deviation_identical_models() {
        let m = EmbeddingModel::base();
        let qs = vec![query("q1", "red apples"), query("q2", "blue sky")];
        let s = deviation_scores_search(&m, &m, &qs, &corpus(&["apple", "sky", "sea"])).unwrap();
        assert!(s.iter().all(|d| d.z == 0.0 && d.anchor_label_id.is_some()));
    }

    #[test]
    fn search_single_label_is_forced_anchor() {
        let f0 = EmbeddingModel::base();
        let f = EmbeddingModel::with_init(64, ProjectionInit::Uniform { seed: 3, scale: 0.2 });
        let c = corpus(&["only label"]);
        let qs = vec![query("q1", "first query"), query("q2", "second")];
        for d in deviation_scores_search(&f, &f0, &qs, &c).unwrap() {
            assert_eq!(d.anchor_label_id.as_deref(), Some("L0"));
            let q = qs.iter().find(|q| q.id == d.id).unwrap();
            let gap = f.similarity(&q.text, "only label").unwrap() - f0.similarity(&q.text, "only label").unwrap();
            assert!((d.z - gap * gap).abs() < 1e-15);
        }
    }

    #[test]
    fn search_anchor_comes_from_base_model() {
        // Hand-built three-label fixture: the base model prefers L0, the
        // other model prefers L2.
        let q = "query text";
        let c = corpus(&["alpha", "beta", "gamma"]);
        let mut f0 = EmbeddingModel::with_init(3, ProjectionInit::Zeros);
        let mut f = EmbeddingModel::with_init(3, ProjectionInit::Zeros);
        let set_text = |m: &mut EmbeddingModel, text: &str, row: [f64; 3]| {
            for &(i, _) in crate::encoder::featurize(text).entries() {
                m.set_row(i, row.to_vec()).unwrap();
            }
        };
        set_text(&mut f0, q, [1.0, 0.0, 0.0]);
        set_text(&mut f0, "alpha", [1.0, 0.1, 0.0]);
        set_text(&mut f0, "beta", [0.0, 1.0, 0.0]);
        set_text(&mut f0, "gamma", [0.0, 0.0, 1.0]);
        set_text(&mut f, q, [0.0, 0.0, 1.0]);
        set_text(&mut f, "alpha", [1.0, 0.0, 0.0]);
        set_text(&mut f, "beta", [0.0, 1.0, 0.0]);
        set_text(&mut f, "gamma", [0.0, 0.1, 1.0]);
        assert_eq!(nearest(&f, q, &c), "L2");
        assert_eq!(nearest(&f0, q, &c), "L0");

        let s = deviation_scores_search(&f, &f0, &[query("q", q)], &c).unwrap();
        assert_eq!(s[0].anchor_label_id.as_deref(), Some("L0"));
        assert!((s[0].f_score - f.similarity(q, "alpha").unwrap()).abs() < 1e-15);
    }

    fn nearest(m: &EmbeddingModel, q: &str, c: &[LabelDoc]) -> String {
        crate::encoder::nearest_labels(m, q, c, 1).unwrap()[0].0.clone()
    }

    #[test]
    fn top_b_examples() {
        let s = scores(&[0.5, 0.9, 0.9, 0.1]);
        assert!(sample_top_b(&s, 0).unwrap().is_empty());
        assert_eq!(sample_top_b(&s, 2).unwrap(), vec!["x1", "x2"]);
        assert_eq!(sample_top_b(&s, 4).unwrap(), vec!["x1", "x2", "x0", "x3"]);
        assert!(matches!(sample_top_b(&s, 5), Err(Error::BudgetTooLarge { .. })));
    }

    #[test]
    fn random_sampling() {
        let ids: Vec<String> = (0..10).map(|i| format!("i{i}")).collect();
        let all = sample_random(&ids, 10, 1).unwrap();
        let mut sorted = all.clone();
        sorted.sort();
        let mut expected = ids.clone();
        expected.sort();
        assert_eq!(sorted, expected);
        assert_eq!(sample_random(&ids, 4, 9).unwrap(), sample_random(&ids, 4, 9).unwrap());
        assert!(sample_random(&ids, 11, 0).is_err());
    }

    #[test]
    fn random_sampling_is_uniform() {
        let ids: Vec<String> = (0..4).map(|i| format!("i{i}")).collect();
        let mut counts = HashMap::new();
        for seed in 0..10_000 {
            *counts
                .entry(sample_random(&ids, 1, seed).unwrap()[0].clone())
                .or_insert(0) += 1;
        }
        for id in &ids {
            let c = counts[id];
            assert!((2350..=2650).contains(&c), "{id}: {c}");
        }
    }

    #[test]
    fn uncertainty_examples() {
        let items = [("a", 0.1), ("b", 0.5), ("c", 0.95)];
        assert_eq!(select_uncertain(&items, 1).unwrap(), vec!["b"]);
        let items = [("a", 0.45), ("b", 0.55)];
        assert_eq!(select_uncertain(&items, 2).unwrap(), vec!["a", "b"]);
    }

    #[test]
    fn uncertainty_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        use rand::Rng;
        let ids: Vec<String> = (0..100).map(|i| format!("u{i}")).collect();
        let vals: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
        let items: Vec<(&str, f64)> = ids.iter().map(String::as_str).zip(vals.iter().copied()).collect();
        let got = select_uncertain(&items, 30).unwrap();
        let mut oracle: Vec<(f64, usize)> = vals.iter().enumerate().map(|(i, v)| ((v - 0.5).abs(), i)).collect();
        oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expected: Vec<String> = oracle[..30].iter().map(|&(_, i)| ids[i].clone()).collect();
        assert_eq!(got, expected);
    }

    fn extreme_fixture() -> (PairDataset, SealedTruth, Vec<f64>) {
        // all labels 1; base scores give errors 0.0, 0.5, 1.0
        let ex = (0..3).map(|i| PairExample::new(format!("e{i}"), "a", "b")).collect();
        let pool = PairDataset::new("x", ex).unwrap();
        let truth = SealedTruth::from_pairs((0..3).map(|i| (format!("e{i}"), 1))).unwrap();
        let f0 = vec![1.0, 1.0 - 0.5f64.sqrt(), 0.0];
        (pool, truth, f0)
    }

    #[test]
    fn base_extreme_examples() {
        let (pool, truth, f0) = extreme_fixture();
        assert_eq!(
            sample_base_extreme(&pool, &truth, &f0, 1, ExtremeMode::Inconsistent).unwrap(),
            vec!["e2"]
        );
        assert_eq!(
            sample_base_extreme(&pool, &truth, &f0, 1, ExtremeMode::Consistent).unwrap(),
            vec!["e0"]
        );
        let partial = SealedTruth::from_pairs([("e0".to_string(), 1)]).unwrap();
        assert!(matches!(
            sample_base_extreme(&pool, &partial, &f0, 1, ExtremeMode::Consistent),
            Err(Error::MissingTruth(_))
        ));
    }

    #[test]
    fn quantile_examples() {
        let s = scores(&(0..100).map(f64::from).collect::<Vec<_>>());
        let q = quantile_partition(&s, 20).unwrap();
        assert_eq!(q.n_quantiles(), 20);
        assert!(q.bins.iter().all(|b| b.len() == 5));
        assert_eq!(q.bins[0], vec!["x99", "x98", "x97", "x96", "x95"]);

        let q = quantile_partition(&scores(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]), 3).unwrap();
        assert_eq!(q.bins.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 2, 2]);
        assert!(quantile_partition(&scores(&[1.0]), 2).is_err());
        assert!(quantile_partition(&scores(&[1.0]), 0).is_err());
    }

    fn tags(pairs: &[(&str, &str)]) -> HashMap<String, String> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn domain_mean_arithmetic() {
        let s = scores(&[0.2, 0.4, 0.1]);
        let d = tags(&[("x0", "a"), ("x1", "a"), ("x2", "b")]);
        let m = domain_means(&s, &d).unwrap();
        assert_eq!(m[0].0, "a");
        assert!((m[0].1 - 0.3).abs() < 1e-12);
        assert!((m[1].1 - 0.1).abs() < 1e-12);
        assert_eq!(domain_sample(&s, &d, 3).unwrap().len(), 3);
        assert!(matches!(
            domain_sample(&s, &tags(&[("x0", "a")]), 1),
            Err(Error::MissingDomain(_))
        ));
    }

    #[test]
    fn domain_covering_budget_alone() {
        let s = scores(&[0.3, 0.3, 0.3, 0.3, 0.1, 0.1, 0.1, 0.1]);
        let d: HashMap<String, String> = (0..8)
            .map(|i| (format!("x{i}"), if i < 4 { "a" } else { "b" }.to_string()))
            .collect();
        let mut got = domain_sample(&s, &d, 4).unwrap();
        got.sort();
        assert_eq!(got, vec!["x0", "x1", "x2", "x3"]);
    }

    #[test]
    fn domain_shares_spill_over() {
        // a: 2 items, mean 0.9; b: 6 items, mean 0.2; budget 6 -> 2 + 4
        let z = [0.9, 0.9, 0.1, 0.2, 0.3, 0.2, 0.1, 0.3];
        let d: HashMap<String, String> = (0..8)
            .map(|i| (format!("x{i}"), if i < 2 { "a" } else { "b" }.to_string()))
            .collect();
        let got = domain_sample(&scores(&z), &d, 6).unwrap();
        assert_eq!(got, vec!["x0", "x1", "x4", "x7", "x3", "x5"]);
    }

    fn arb_scores() -> impl proptest::strategy::Strategy<Value = Vec<DeviationScore>> {
        proptest::collection::vec(0u8..20, 1..80)
            .prop_map(|z| scores(&z.into_iter().map(|v| f64::from(v) / 10.0).collect::<Vec<_>>()))
    }

    proptest! {
        #[test]
        fn every_strategy_returns_b_distinct_pool_ids(s in arb_scores(), frac in 0.0f64..=1.0, seed in any::<u64>()) {
            let b = (frac * s.len() as f64) as usize;
            let ids: Vec<String> = s.iter().map(|d| d.id.clone()).collect();
            let pool_ids: HashSet<&String> = ids.iter().collect();
            let d: HashMap<String, String> = ids.iter().enumerate().map(|(i, id)| (id.clone(), format!("d{}", i % 3))).collect();
            let items: Vec<(&str, f64)> = s.iter().map(|d| (d.id.as_str(), d.z / 2.0)).collect();
            for sel in [
                sample_top_b(&s, b).unwrap(),
                sample_random(&ids, b, seed).unwrap(),
                select_uncertain(&items, b).unwrap(),
                domain_sample(&s, &d, b).unwrap(),
            ] {
                prop_assert_eq!(sel.len(), b);
                prop_assert_eq!(sel.iter().collect::<HashSet<_>>().len(), b);
                prop_assert!(sel.iter().all(|id| pool_ids.contains(id)));
            }
        }

        #[test]
        fn top_b_rank_equivalence(s in arb_scores(), frac in 0.0f64..=1.0) {
            let b = (frac * s.len() as f64) as usize;
            let base = sample_top_b(&s, b).unwrap();
            for g in [|z: f64| 2.0 * z + 1.0, |z: f64| z * z * z] {
                let mapped: Vec<DeviationScore> = s.iter().map(|d| DeviationScore { z: g(d.z), ..d.clone() }).collect();
                prop_assert_eq!(&sample_top_b(&mapped, b).unwrap(), &base);
            }
        }

        #[test]
        fn top_b_is_monotone(s in arb_scores(), frac in 0.0f64..=1.0, pick in any::<proptest::sample::Index>(), bump in 0.0f64..5.0) {
            let b = (frac * s.len() as f64) as usize;
            let sel = sample_top_b(&s, b).unwrap();
            let i = pick.index(s.len());
            if sel.contains(&s[i].id) {
                let mut raised = s.clone();
                raised[i].z += bump;
                prop_assert!(sample_top_b(&raised, b).unwrap().contains(&s[i].id));
            }
        }

        #[test]
        fn quantile_bins_cover_and_order(s in arb_scores(), q in 1usize..25) {
            prop_assume!(q <= s.len());
            let p = quantile_partition(&s, q).unwrap();
            let all: Vec<&String> = p.bins.iter().flatten().collect();
            prop_assert_eq!(all.len(), s.len());
            prop_assert_eq!(all.iter().collect::<HashSet<_>>().len(), s.len());
            let sizes: Vec<usize> = p.bins.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let z: HashMap<&str, f64> = s.iter().map(|d| (d.id.as_str(), d.z)).collect();
            for w in p.bins.windows(2) {
                let lo = w[0].iter().map(|id| z[id.as_str()]).fold(f64::INFINITY, f64::min);
                let hi = w[1].iter().map(|id| z[id.as_str()]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(lo >= hi);
            }
        }

        #[test]
        fn extreme_modes_disjoint(errs in proptest::collection::hash_set(0u32..10_000, 2..60), frac in 0.0f64..=0.5) {
            let errs: Vec<f64> = errs.into_iter().map(|e| f64::from(e) / 10_000.0).collect();
            let n = errs.len();
            let ex = (0..n).map(|i| PairExample::new(format!("e{i}"), "a", "b")).collect();
            let pool = PairDataset::new("x", ex).unwrap();
            let truth = SealedTruth::from_pairs((0..n).map(|i| (format!("e{i}"), 0))).unwrap();
            // label 0: error = score^2
            let f0: Vec<f64> = errs.iter().map(|e| e.sqrt()).collect();
            let b = (frac * n as f64) as usize;
            let c: HashSet<String> = sample_base_extreme(&pool, &truth, &f0, b, ExtremeMode::Consistent).unwrap().into_iter().collect();
            let i: HashSet<String> = sample_base_extreme(&pool, &truth, &f0, b, ExtremeMode::Inconsistent).unwrap().into_iter().collect();
            prop_assert!(c.is_disjoint(&i));
        }
    }

    #[test]
    fn deviation_invariant_under_pool_reordering() {
        let f0 = EmbeddingModel::base();
        let f = EmbeddingModel::with_init(64, ProjectionInit::Uniform { seed: 8, scale: 0.1 });
        let p = pool(30);
        let mut rev = p.examples().to_vec();
        rev.reverse();
        let rev = PairDataset::new("rev", rev).unwrap();
        let a: HashMap<String, f64> = deviation_scores_pairs(&f, &f0, &p)
            .unwrap()
            .into_iter()
            .map(|d| (d.id, d.z))
            .collect();
        let b: HashMap<String, f64> = deviation_scores_pairs(&f, &f0, &rev)
            .unwrap()
            .into_iter()
            .map(|d| (d.id, d.z))
            .collect();
        assert_eq!(a, b);
    }
}
