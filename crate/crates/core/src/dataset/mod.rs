//! Pair and search datasets: JSON Lines ingestion, the extreme source/target
//! split, and sealed ground truth.
//!
//! Labels removed from an unlabeled pool are moved into a [`SealedTruth`]
//! rather than dropped. Only annotators that act as oracles and the evaluator
//! take a `SealedTruth`; samplers never do.

mod synthetic;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synthetic::{
    generate_synthetic_pairs, generate_synthetic_search, overlap_fraction, SyntheticSearch, SyntheticSearchSpec,
    SyntheticSpec,
};

/// A sentence pair with an optional binary task label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairExample {
    pub id: String,
    pub text_a: String,
    pub text_b: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    /// Set by the synthetic generator on pairs whose label contradicts
    /// lexical overlap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flipped: Option<bool>,
}

impl PairExample {
    pub fn new(id: impl Into<String>, text_a: impl Into<String>, text_b: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text_a: text_a.into(),
            text_b: text_b.into(),
            label: None,
            domain: None,
            flipped: None,
        }
    }

    pub fn with_label(mut self, label: u8) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_domain(mut self, domain: impl Into<String>) -> Self {
        self.domain = Some(domain.into());
        self
    }

    /// The label, or [`Error::Unlabeled`].
    pub fn require_label(&self) -> Result<u8> {
        self.label.ok_or_else(|| Error::Unlabeled(self.id.clone()))
    }

    fn unlabeled(&self) -> Self {
        Self {
            label: None,
            flipped: None,
            ..self.clone()
        }
    }
}

/// Ordered collection of pairs. Ids are unique and labels are 0 or 1.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairDataset {
    pub name: String,
    examples: Vec<PairExample>,
}

impl PairDataset {
    pub fn new(name: impl Into<String>, examples: Vec<PairExample>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(examples.len());
        for ex in &examples {
            if !seen.insert(ex.id.as_str()) {
                return Err(Error::DuplicateId(ex.id.clone()));
            }
            if let Some(l) = ex.label {
                if l > 1 {
                    return Err(Error::invalid(format!("label {l} of `{}` is not 0 or 1", ex.id)));
                }
            }
        }
        Ok(Self {
            name: name.into(),
            examples,
        })
    }

    pub fn examples(&self) -> &[PairExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, PairExample> {
        self.examples.iter()
    }

    pub fn ids(&self) -> Vec<String> {
        self.examples.iter().map(|e| e.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&PairExample> {
        self.examples.iter().find(|e| e.id == id)
    }

    /// Labels in dataset order; errors on the first unlabeled example.
    pub fn labels(&self) -> Result<Vec<u8>> {
        self.examples.iter().map(PairExample::require_label).collect()
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.examples.iter().all(|e| e.label.is_some())
    }

    /// Examples whose ids are in `ids`, keeping dataset order.
    pub fn subset(&self, name: impl Into<String>, ids: &HashSet<&str>) -> PairDataset {
        PairDataset {
            name: name.into(),
            examples: self
                .examples
                .iter()
                .filter(|e| ids.contains(e.id.as_str()))
                .cloned()
                .collect(),
        }
    }

    /// Appends `other`, rejecting id collisions.
    pub fn concat(&self, name: impl Into<String>, other: &PairDataset) -> Result<PairDataset> {
        let mut all = self.examples.clone();
        all.extend(other.examples.iter().cloned());
        PairDataset::new(name, all)
    }

    /// Copy with labels removed, plus the removed labels in a sealed map.
    pub fn seal(&self) -> Result<(PairDataset, SealedTruth)> {
        let mut truth = HashMap::with_capacity(self.len());
        for ex in &self.examples {
            truth.insert(ex.id.clone(), ex.require_label()?);
        }
        let pool = PairDataset {
            name: self.name.clone(),
            examples: self.examples.iter().map(PairExample::unlabeled).collect(),
        };
        Ok((pool, SealedTruth { labels: truth }))
    }
}

impl<'a> IntoIterator for &'a PairDataset {
    type Item = &'a PairExample;
    type IntoIter = std::slice::Iter<'a, PairExample>;

    fn into_iter(self) -> Self::IntoIter {
        self.examples.iter()
    }
}

/// Labels withheld from an unlabeled pool.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SealedTruth {
    labels: HashMap<String, u8>,
}

#[derive(Serialize, Deserialize)]
struct TruthRecord {
    id: String,
    label: u8,
}

impl SealedTruth {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, u8)>) -> Result<Self> {
        let mut labels = HashMap::new();
        for (id, label) in pairs {
            if label > 1 {
                return Err(Error::invalid(format!("label {label} of `{id}` is not 0 or 1")));
            }
            if labels.insert(id.clone(), label).is_some() {
                return Err(Error::DuplicateId(id));
            }
        }
        Ok(Self { labels })
    }

    pub fn label(&self, id: &str) -> Result<u8> {
        self.labels
            .get(id)
            .copied()
            .ok_or_else(|| Error::MissingTruth(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Writes `{"id", "label"}` lines sorted by id.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut ids: Vec<&String> = self.labels.keys().collect();
        ids.sort();
        let mut out = BufWriter::new(File::create(path)?);
        for id in ids {
            let rec = TruthRecord {
                id: id.clone(),
                label: self.labels[id],
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let recs: Vec<TruthRecord> = read_jsonl(path.as_ref())?;
        Self::from_pairs(recs.into_iter().map(|r| (r.id, r.label)))
    }
}

/// Output of [`make_extreme_split`].
#[derive(Clone, Debug)]
pub struct SplitResult {
    pub source_labeled: PairDataset,
    pub target_unlabeled: PairDataset,
    pub truth: SealedTruth,
    /// Ids of the target side with the lowest base error.
    pub easy_ids: Vec<String>,
    /// Ids of the target side with the highest base error.
    pub hard_ids: Vec<String>,
}

impl SplitResult {
    /// Writes `<stem>.source.jsonl`, `<stem>.target.jsonl` and the sealed
    /// `<stem>.target.truth.jsonl` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        write_pair_dataset(&self.source_labeled, dir.join(format!("{stem}.source.jsonl")))?;
        write_pair_dataset(&self.target_unlabeled, dir.join(format!("{stem}.target.jsonl")))?;
        self.truth.write_jsonl(dir.join(format!("{stem}.target.truth.jsonl")))
    }
}

/// Sizes of the easy and hard sides for a target fraction of `n` examples.
///
/// The target holds `round(fraction * n)` examples; the easy side gets the
/// floor of half of that and the hard side the remainder.
pub fn extreme_split_sizes(n: usize, target_fraction: f64) -> Result<(usize, usize)> {
    if !(0.0..=1.0).contains(&target_fraction) || target_fraction.is_nan() {
        return Err(Error::invalid(format!(
            "target fraction {target_fraction} outside [0, 1]"
        )));
    }
    let total = ((target_fraction * n as f64).round() as usize).min(n);
    let easy = total / 2;
    Ok((easy, total - easy))
}

/// Index sets `(easy, hard)` of the extreme split over per-example errors.
///
/// Easy examples are the lowest errors, hard the highest. Equal errors are
/// resolved in favour of the smaller id on both sides.
pub(crate) fn extreme_indices(ids: &[&str], errors: &[f64], target_fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = ids.len();
    let (n_easy, n_hard) = extreme_split_sizes(n, target_fraction)?;
    let mut asc: Vec<usize> = (0..n).collect();
    asc.sort_by(|&i, &j| errors[i].total_cmp(&errors[j]).then_with(|| ids[i].cmp(ids[j])));
    let easy: Vec<usize> = asc[..n_easy].to_vec();
    let mut rest: Vec<usize> = asc[n_easy..].to_vec();
    rest.sort_by(|&i, &j| errors[j].total_cmp(&errors[i]).then_with(|| ids[i].cmp(ids[j])));
    rest.truncate(n_hard);
    Ok((easy, rest))
}

/// Moves the easiest and hardest examples, by base squared error, into an
/// unlabeled target domain.
///
/// `base_scores` is aligned with the dataset order. Every example must be
/// labeled.
pub fn make_extreme_split(dataset: &PairDataset, base_scores: &[f64], target_fraction: f64) -> Result<SplitResult> {
    if base_scores.len() != dataset.len() {
        return Err(Error::invalid(format!(
            "{} base scores for {} examples",
            base_scores.len(),
            dataset.len()
        )));
    }
    let labels = dataset.labels()?;
    let errors: Vec<f64> = base_scores
        .iter()
        .zip(&labels)
        .map(|(&s, &t)| (s - f64::from(t)).powi(2))
        .collect();
    let ids: Vec<&str> = dataset.iter().map(|e| e.id.as_str()).collect();
    let (easy, hard) = extreme_indices(&ids, &errors, target_fraction)?;

    let target: HashSet<&str> = easy.iter().chain(&hard).map(|&i| ids[i]).collect();
    let source: Vec<PairExample> = dataset
        .iter()
        .filter(|e| !target.contains(e.id.as_str()))
        .cloned()
        .collect();
    let (target_unlabeled, truth) = dataset.subset(format!("{}.target", dataset.name), &target).seal()?;

    Ok(SplitResult {
        source_labeled: PairDataset::new(format!("{}.source", dataset.name), source)?,
        target_unlabeled,
        truth,
        easy_ids: easy.iter().map(|&i| ids[i].to_string()).collect(),
        hard_ids: hard.iter().map(|&i| ids[i].to_string()).collect(),
    })
}

// ---------------------------------------------------------------------------
// Search datasets

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchQuery {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevant: Option<BTreeSet<String>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelDoc {
    pub id: String,
    pub text: String,
}

/// Queries against a fixed label corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchDataset {
    queries: Vec<SearchQuery>,
    labels: Vec<LabelDoc>,
}

impl SearchDataset {
    pub fn new(queries: Vec<SearchQuery>, labels: Vec<LabelDoc>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut label_ids = HashSet::with_capacity(labels.len());
        for l in &labels {
            if !label_ids.insert(l.id.as_str()) {
                return Err(Error::DuplicateId(l.id.clone()));
            }
        }
        let mut query_ids = HashSet::with_capacity(queries.len());
        for q in &queries {
            if !query_ids.insert(q.id.as_str()) {
                return Err(Error::DuplicateId(q.id.clone()));
            }
            for rel in q.relevant.iter().flatten() {
                if !label_ids.contains(rel.as_str()) {
                    return Err(Error::UnknownLabel {
                        query: q.id.clone(),
                        label: rel.clone(),
                    });
                }
            }
        }
        Ok(Self { queries, labels })
    }

    pub fn queries(&self) -> &[SearchQuery] {
        &self.queries
    }

    pub fn labels(&self) -> &[LabelDoc] {
        &self.labels
    }

    /// Same corpus, queries filtered by `keep`.
    pub fn with_queries(&self, keep: impl Fn(&SearchQuery) -> bool) -> SearchDataset {
        SearchDataset {
            queries: self.queries.iter().filter(|q| keep(q)).cloned().collect(),
            labels: self.labels.clone(),
        }
    }

    /// Copy with relevance sets removed, plus the sealed relevance map.
    pub fn seal(&self) -> (SearchDataset, SealedSearchTruth) {
        let mut relevant = HashMap::new();
        let queries = self
            .queries
            .iter()
            .map(|q| {
                relevant.insert(q.id.clone(), q.relevant.clone().unwrap_or_default());
                SearchQuery {
                    relevant: None,
                    ..q.clone()
                }
            })
            .collect();
        (
            SearchDataset {
                queries,
                labels: self.labels.clone(),
            },
            SealedSearchTruth { relevant },
        )
    }
}

/// Relevance sets withheld from unlabeled queries.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SealedSearchTruth {
    relevant: HashMap<String, BTreeSet<String>>,
}

impl SealedSearchTruth {
    pub fn from_map(relevant: HashMap<String, BTreeSet<String>>) -> Self {
        Self { relevant }
    }

    pub fn relevant(&self, query_id: &str) -> Result<&BTreeSet<String>> {
        self.relevant
            .get(query_id)
            .ok_or_else(|| Error::MissingTruth(query_id.to_string()))
    }
}

// ---------------------------------------------------------------------------
// JSON Lines

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub(crate) fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, records: impl IntoIterator<Item = &'a T>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a pair file. Labels other than 0/1 and repeated ids are errors.
pub fn load_pair_dataset(path: impl AsRef<Path>) -> Result<PairDataset> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut examples = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let ex: PairExample = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if let Some(l) = ex.label {
            if l > 1 {
                return Err(parse_err(format!("label {l} is not 0 or 1")));
            }
        }
        if !seen.insert(ex.id.clone()) {
            return Err(Error::DuplicateId(ex.id));
        }
        examples.push(ex);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    PairDataset::new(name, examples)
}

pub fn write_pair_dataset(dataset: &PairDataset, path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(path.as_ref(), dataset.examples())
}

pub fn load_search_dataset(queries_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<SearchDataset> {
    let queries = read_jsonl(queries_path.as_ref())?;
    let labels = read_jsonl(labels_path.as_ref())?;
    SearchDataset::new(queries, labels)
}

pub fn write_search_dataset(
    dataset: &SearchDataset,
    queries_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    write_jsonl(queries_path.as_ref(), dataset.queries())?;
    write_jsonl(labels_path.as_ref(), dataset.labels())
}
