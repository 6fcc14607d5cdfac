//! Hashed character n-gram bi-encoder.
//!
//! Text is featurized into counts of character 3-, 4- and 5-grams hashed
//! into 2^18 buckets, projected linearly to `n_dims` and L2-normalized.
//! Similarity is the dot product of two unit embeddings.
//!
//! The projection has one row per hash bucket. Rows not stored explicitly
//! are generated on demand from the model's [`ProjectionInit`], so a base
//! model costs nothing to hold and a finetuned model only stores the rows
//! training touched.

mod train;

use std::borrow::Cow;
use std::fs::File;
use std::hash::Hasher;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use fnv::{FnvHashMap, FnvHasher};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabelDoc;
use crate::error::{Error, Result};

pub use train::{mse, pair_gradient, train, train_pairs, LrSchedule, TrainConfig, TrainPair};

pub const HASH_BITS: u32 = 18;
pub const HASH_SPACE: u32 = 1 << HASH_BITS;
pub const DEFAULT_DIMS: usize = 64;
pub const NGRAM_SIZES: [usize; 3] = [3, 4, 5];

/// Seed of the reference base model. Fixed so every experiment shares the
/// same prior geometry.
pub const BASE_SEED: u64 = 0x0EA6_1E00_BA5E;
/// Half-width of the uniform initialisation of base projection entries.
pub const BASE_SCALE: f64 = 0.00125;

/// Sparse bag of hashed n-gram counts, sorted by index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureVector {
    entries: Vec<(u32, f64)>,
}

impl FeatureVector {
    pub fn from_entries(mut entries: Vec<(u32, f64)>) -> Self {
        entries.sort_by_key(|&(i, _)| i);
        entries.dedup_by(|next, kept| {
            if next.0 == kept.0 {
                kept.1 += next.1;
                true
            } else {
                false
            }
        });
        Self { entries }
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn total_count(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }
}

/// Lowercased text wrapped in `#` boundary markers.
fn marked(text: &str) -> Vec<char> {
    let mut chars = vec!['#'];
    chars.extend(text.to_lowercase().chars());
    chars.push('#');
    chars
}

/// All character n-grams of the marked text, for n in [`NGRAM_SIZES`].
pub fn char_ngrams(text: &str) -> Vec<String> {
    let chars = marked(text);
    NGRAM_SIZES
        .iter()
        .flat_map(|&n| chars.windows(n).map(|w| w.iter().collect::<String>()))
        .collect()
}

/// FNV-1a of the UTF-8 bytes, folded into the hash space.
pub fn hash_gram(gram: &str) -> u32 {
    let mut h = FnvHasher::default();
    h.write(gram.as_bytes());
    (h.finish() % u64::from(HASH_SPACE)) as u32
}

pub fn featurize(text: &str) -> FeatureVector {
    let chars = marked(text);
    let mut buf = String::new();
    let mut entries = Vec::new();
    for &n in &NGRAM_SIZES {
        for w in chars.windows(n) {
            buf.clear();
            buf.extend(w);
            entries.push((hash_gram(&buf), 1.0));
        }
    }
    FeatureVector::from_entries(entries)
}

/// How rows absent from the explicit row map are produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProjectionInit {
    /// Entries uniform in `[-scale, scale)`, drawn from a ChaCha8 stream per row.
    Uniform {
        seed: u64,
        scale: f64,
    },
    Zeros,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Base {
        model_id: String,
    },
    Finetuned {
        model_id: String,
        from: String,
        config_hash: String,
        data_hash: String,
        train_size: usize,
    },
}

impl Provenance {
    pub fn model_id(&self) -> &str {
        match self {
            Provenance::Base { model_id } | Provenance::Finetuned { model_id, .. } => model_id,
        }
    }
}

/// Anything that maps text to a unit vector.
pub trait Encoder: Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>>;

    fn similarity(&self, a: &str, b: &str) -> Result<f64> {
        Ok(dot(&self.embed(a)?, &self.embed(b)?))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug)]
pub struct EmbeddingModel {
    n_dims: usize,
    init: ProjectionInit,
    rows: FnvHashMap<u32, Vec<f64>>,
    provenance: Vec<Provenance>,
}

impl EmbeddingModel {
    /// The reference base model.
    pub fn base() -> Self {
        Self::with_init(
            DEFAULT_DIMS,
            ProjectionInit::Uniform {
                seed: BASE_SEED,
                scale: BASE_SCALE,
            },
        )
    }

    pub fn with_init(n_dims: usize, init: ProjectionInit) -> Self {
        assert!(n_dims > 0, "n_dims must be positive");
        let model_id = match init {
            ProjectionInit::Uniform { seed, scale } => {
                format!("base-u{n_dims}-{seed:x}-{:x}", scale.to_bits())
            }
            ProjectionInit::Zeros => format!("base-z{n_dims}"),
        };
        Self {
            n_dims,
            init,
            rows: FnvHashMap::default(),
            provenance: vec![Provenance::Base { model_id }],
        }
    }

    pub fn id(&self) -> &str {
        self.provenance.last().expect("provenance is never empty").model_id()
    }

    pub fn n_dims(&self) -> usize {
        self.n_dims
    }

    pub fn init(&self) -> ProjectionInit {
        self.init
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub(crate) fn push_provenance(&mut self, p: Provenance) {
        self.provenance.push(p);
    }

    /// Number of explicitly stored rows.
    pub fn stored_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, index: u32) -> Cow<'_, [f64]> {
        match self.rows.get(&index) {
            Some(r) => Cow::Borrowed(r),
            None => Cow::Owned(self.init_row(index)),
        }
    }

    /// Overwrites one projection row.
    pub fn set_row(&mut self, index: u32, values: Vec<f64>) -> Result<()> {
        if index >= HASH_SPACE {
            return Err(Error::invalid(format!("row {index} outside hash space")));
        }
        if values.len() != self.n_dims {
            return Err(Error::invalid(format!(
                "row has {} values, model has {} dims",
                values.len(),
                self.n_dims
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite projection entry"));
        }
        self.rows.insert(index, values);
        Ok(())
    }

    pub(crate) fn row_mut(&mut self, index: u32) -> &mut Vec<f64> {
        if !self.rows.contains_key(&index) {
            let r = self.init_row(index);
            self.rows.insert(index, r);
        }
        self.rows.get_mut(&index).expect("inserted above")
    }

    fn init_row(&self, index: u32) -> Vec<f64> {
        match self.init {
            ProjectionInit::Zeros => vec![0.0; self.n_dims],
            ProjectionInit::Uniform { seed, scale } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(u64::from(index));
                (0..self.n_dims)
                    .map(|_| scale * (2.0 * rng.random::<f64>() - 1.0))
                    .collect()
            }
        }
    }

    fn add_row(&self, index: u32, weight: f64, out: &mut [f64]) {
        match self.rows.get(&index) {
            Some(r) => out.iter_mut().zip(r).for_each(|(o, v)| *o += weight * v),
            None => out
                .iter_mut()
                .zip(self.init_row(index))
                .for_each(|(o, v)| *o += weight * v),
        }
    }

    /// Projection of a feature vector before normalization.
    pub fn project(&self, features: &FeatureVector) -> Vec<f64> {
        let mut v = vec![0.0; self.n_dims];
        for &(i, c) in features.entries() {
            self.add_row(i, c, &mut v);
        }
        v
    }

    /// Unit embedding of a feature vector. `what` names the input in errors.
    pub fn embed_features(&self, features: &FeatureVector, what: &str) -> Result<Vec<f64>> {
        if features.is_empty() {
            return Err(Error::EmptyEmbedding { id: what.to_string() });
        }
        let mut v = self.project(features);
        let norm = dot(&v, &v).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::EmptyEmbedding { id: what.to_string() });
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }

    /// True when every row either model stores explicitly is bitwise equal
    /// in both, and the row generators agree.
    pub fn same_parameters(&self, other: &EmbeddingModel) -> bool {
        if self.n_dims != other.n_dims || self.init != other.init {
            return false;
        }
        let bits = |r: &[f64]| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        self.rows
            .keys()
            .chain(other.rows.keys())
            .all(|&i| bits(&self.row(i)) == bits(&other.row(i)))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut rows: Vec<(u32, Vec<f64>)> = self.rows.iter().map(|(&i, r)| (i, r.clone())).collect();
        rows.sort_by_key(|r| r.0);
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: 1,
            n_dims: self.n_dims,
            hash_space: HASH_SPACE,
            ngram_sizes: NGRAM_SIZES.to_vec(),
            init: self.init,
            provenance: self.provenance.clone(),
            rows,
        };
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, &file)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: ModelFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if file.format != MODEL_FORMAT || file.version != 1 {
            return Err(Error::invalid(format!(
                "unsupported model file {} v{}",
                file.format, file.version
            )));
        }
        if file.hash_space != HASH_SPACE || file.ngram_sizes != NGRAM_SIZES {
            return Err(Error::invalid("model was built for a different featurizer"));
        }
        if file.provenance.is_empty() {
            return Err(Error::invalid("model file has empty provenance"));
        }
        let mut model = Self {
            n_dims: file.n_dims,
            init: file.init,
            rows: FnvHashMap::default(),
            provenance: file.provenance,
        };
        for (i, r) in file.rows {
            model.set_row(i, r)?;
        }
        Ok(model)
    }
}

const MODEL_FORMAT: &str = "eagle-embedding-model";

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    n_dims: usize,
    hash_space: u32,
    ngram_sizes: Vec<usize>,
    init: ProjectionInit,
    provenance: Vec<Provenance>,
    rows: Vec<(u32, Vec<f64>)>,
}

impl Encoder for EmbeddingModel {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.embed_features(&featurize(text), &format!("{text:?}"))
    }
}

pub fn embed<E: Encoder + ?Sized>(model: &E, text: &str) -> Result<Vec<f64>> {
    model.embed(text)
}

pub fn similarity<E: Encoder + ?Sized>(model: &E, a: &str, b: &str) -> Result<f64> {
    model.similarity(a, b)
}

/// A label corpus embedded once under one model.
pub struct LabelIndex<'a> {
    labels: &'a [LabelDoc],
    embeddings: Vec<Vec<f64>>,
}

impl<'a> LabelIndex<'a> {
    pub fn build<E: Encoder + ?Sized>(model: &E, labels: &'a [LabelDoc]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        use rayon::prelude::*;
        let embeddings = labels
            .par_iter()
            .map(|l| {
                model
                    .embed(&l.text)
                    .map_err(|_| Error::EmptyEmbedding { id: l.id.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { labels, embeddings })
    }

    pub fn labels(&self) -> &'a [LabelDoc] {
        self.labels
    }

    /// Top `k` labels by similarity to an embedded query, descending, ties by
    /// label id.
    pub fn nearest(&self, query: &[f64], k: usize) -> Vec<(String, f64)> {
        let mut scored: Vec<(usize, f64)> = self
            .embeddings
            .iter()
            .enumerate()
            .map(|(j, e)| (j, dot(query, e)))
            .collect();
        let by_rank = |a: &(usize, f64), b: &(usize, f64)| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.labels[a.0].id.cmp(&self.labels[b.0].id))
        };
        let k = k.min(scored.len());
        if k == 0 {
            return Vec::new();
        }
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, by_rank);
            scored.truncate(k);
        }
        scored.sort_by(by_rank);
        scored
            .into_iter()
            .map(|(j, s)| (self.labels[j].id.clone(), s))
            .collect()
    }

    /// Score of one label id, if present.
    pub fn score(&self, query: &[f64], label_id: &str) -> Option<f64> {
        self.labels
            .iter()
            .position(|l| l.id == label_id)
            .map(|j| dot(query, &self.embeddings[j]))
    }
}

/// The `k` most similar labels to `query`, length `min(k, |corpus|)`.
pub fn nearest_labels<E: Encoder + ?Sized>(
    model: &E,
    query: &str,
    corpus: &[LabelDoc],
    k: usize,
) -> Result<Vec<(String, f64)>> {
    let index = LabelIndex::build(model, corpus)?;
    Ok(index.nearest(&model.embed(query)?, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ngrams_of_abc() {
        let mut grams = char_ngrams("abc");
        grams.sort();
        let mut expected = vec!["#ab", "abc", "bc#", "#abc", "abc#", "#abc#"];
        expected.sort();
        assert_eq!(grams, expected);
        let fv = featurize("abc");
        assert_eq!(fv.total_count(), 6.0);
        let hashed = FeatureVector::from_entries(expected.iter().map(|g| (hash_gram(g), 1.0)).collect());
        assert_eq!(fv, hashed);
    }

    #[test]
    fn empty_text_has_no_features() {
        assert!(featurize("").is_empty());
        // "#a#" is a single 3-gram
        assert_eq!(featurize("a").total_count(), 1.0);
        assert!(matches!(
            EmbeddingModel::base().embed(""),
            Err(Error::EmptyEmbedding { .. })
        ));
    }

    #[test]
    fn featurize_lowercases_and_is_deterministic() {
        assert_eq!(featurize("Hello World"), featurize("hello world"));
        assert_eq!(featurize("some text"), featurize("some text"));
    }

    #[test]
    fn zero_projection_is_empty_embedding() {
        let m = EmbeddingModel::with_init(4, ProjectionInit::Zeros);
        assert!(matches!(m.embed("abc"), Err(Error::EmptyEmbedding { .. })));
    }

    #[test]
    fn self_similarity_and_symmetry() {
        let m = EmbeddingModel::base();
        let s = m.similarity("how do i learn rust", "how do i learn rust").unwrap();
        assert!((s - 1.0).abs() < 1e-9);
        let ab = m.similarity("w1 w2 w3", "w3 w9 w12").unwrap();
        let ba = m.similarity("w3 w9 w12", "w1 w2 w3").unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn orthogonal_fixture() {
        // Disjoint gram sets whose rows are placed on orthogonal axes.
        let mut m = EmbeddingModel::with_init(8, ProjectionInit::Zeros);
        let (a, b) = ("xyz", "klm");
        let fa = featurize(a);
        let fb = featurize(b);
        assert!(fa
            .entries()
            .iter()
            .all(|(i, _)| fb.entries().iter().all(|(j, _)| i != j)));
        for (k, &(i, _)) in fa.entries().iter().enumerate() {
            let mut r = vec![0.0; 8];
            r[k % 4] = 1.0 + k as f64;
            m.set_row(i, r).unwrap();
        }
        for (k, &(i, _)) in fb.entries().iter().enumerate() {
            let mut r = vec![0.0; 8];
            r[4 + k % 4] = 0.5 + k as f64;
            m.set_row(i, r).unwrap();
        }
        assert!(m.similarity(a, b).unwrap().abs() < 1e-6);
    }

    #[test]
    fn nearest_labels_contracts() {
        let m = EmbeddingModel::base();
        let corpus: Vec<LabelDoc> = ["red apple pie", "blue sky", "green tea latte"]
            .iter()
            .enumerate()
            .map(|(i, t)| LabelDoc {
                id: format!("L{i}"),
                text: t.to_string(),
            })
            .collect();
        let top = nearest_labels(&m, "blue sky", &corpus, 1).unwrap();
        assert_eq!(top[0].0, "L1");
        assert!((top[0].1 - 1.0).abs() < 1e-9);
        assert_eq!(nearest_labels(&m, "tea", &corpus, 10).unwrap().len(), 3);
        assert!(matches!(nearest_labels(&m, "tea", &[], 3), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn nearest_labels_ties_by_id() {
        let m = EmbeddingModel::base();
        let corpus: Vec<LabelDoc> = ["B", "A", "C"]
            .iter()
            .map(|id| LabelDoc {
                id: id.to_string(),
                text: "same text".into(),
            })
            .collect();
        let ids: Vec<String> = nearest_labels(&m, "query", &corpus, 3)
            .unwrap()
            .into_iter()
            .map(|r| r.0)
            .collect();
        assert_eq!(ids, vec!["A", "B", "C"]);
    }

    #[test]
    fn nearest_matches_full_sort_on_twenty_labels() {
        let m = EmbeddingModel::base();
        let corpus: Vec<LabelDoc> = (0..20)
            .map(|i| LabelDoc {
                id: format!("L{i:02}"),
                text: format!("w{} w{} w{}", i, i * 7 % 13, i % 5),
            })
            .collect();
        let query = "w3 w5 w7";
        let got = nearest_labels(&m, query, &corpus, 10).unwrap();
        // oracle: score every label independently, full sort, truncate
        let mut all: Vec<(String, f64)> = corpus
            .iter()
            .map(|l| (l.id.clone(), m.similarity(query, &l.text).unwrap()))
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(10);
        assert_eq!(got, all);
    }

    #[test]
    fn save_load_is_bit_exact() {
        let mut m = EmbeddingModel::base();
        m.set_row(17, (0..64).map(|i| (i as f64).sin() * 1e-3 + 1.0 / 3.0).collect())
            .unwrap();
        m.set_row(5, vec![f64::MIN_POSITIVE; 64]).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        m.save(f.path()).unwrap();
        let back = EmbeddingModel::load(f.path()).unwrap();
        assert!(back.same_parameters(&m));
        assert_eq!(back.stored_rows(), 2);
        assert_eq!(back.provenance(), m.provenance());
        let bits = |r: &[f64]| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.row(17)), bits(&m.row(17)));
    }

    #[test]
    fn set_row_rejects_bad_rows() {
        let mut m = EmbeddingModel::base();
        assert!(m.set_row(HASH_SPACE, vec![0.0; 64]).is_err());
        assert!(m.set_row(0, vec![0.0; 3]).is_err());
        assert!(m.set_row(0, vec![f64::NAN; 64]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn embeddings_are_unit_norm(text in "[a-z0-9 ]{1,40}") {
            let v = EmbeddingModel::base().embed(&text).unwrap();
            prop_assert!((dot(&v, &v).sqrt() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn nearest_agrees_with_exhaustive_scoring(
            texts in proptest::collection::vec("[a-e ]{1,12}", 1..40),
            query in "[a-e ]{1,12}",
            k in 1usize..50,
        ) {
            let m = EmbeddingModel::base();
            let corpus: Vec<LabelDoc> = texts
                .iter()
                .enumerate()
                .map(|(i, t)| LabelDoc { id: format!("L{i:03}"), text: t.clone() })
                .collect();
            let got = nearest_labels(&m, &query, &corpus, k).unwrap();
            let mut all: Vec<(String, f64)> = corpus
                .iter()
                .map(|l| (l.id.clone(), m.similarity(&query, &l.text).unwrap()))
                .collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            all.truncate(k);
            prop_assert_eq!(got, all);
        }
    }
}
