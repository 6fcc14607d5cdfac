//! Desk-scale synthetic data with a planted lexical-versus-semantic mismatch.
//!
//! Pairs are token sequences over an integer-named vocabulary (`w0`, `w1`,
//! ...). Lexical overlap decides the "base" semantics; a planted subset of
//! pairs has its label negated. Every flipped pair carries a concept: one
//! token on each side drawn from a fixed inventory of concept token pairs.
//! Contrast concepts turn high-overlap pairs into non-duplicates and link
//! concepts turn low-overlap pairs into duplicates, so the flips are
//! learnable from the text but invisible to an overlap-driven scorer.
//!
//! Optionally a further subset is ambiguous: overlap sits exactly at the
//! threshold and the label is a coin flip, so nothing in the text decides it.

use std::collections::{BTreeSet, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LabelDoc, PairDataset, PairExample, SearchDataset, SearchQuery};
use crate::error::{Error, Result};

fn default_vocab() -> usize {
    2000
}
fn default_threshold() -> f64 {
    0.5
}
fn default_sentence_len() -> usize {
    8
}
fn default_concepts() -> usize {
    2
}
fn default_domains() -> usize {
    4
}
fn default_name() -> String {
    "synthetic".to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_pairs: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    pub flip_fraction: f64,
    #[serde(default = "default_threshold")]
    pub overlap_threshold: f64,
    #[serde(default)]
    pub seed: u64,
    /// Tokens per sentence.
    #[serde(default = "default_sentence_len")]
    pub sentence_len: usize,
    /// Concept token pairs of each kind (contrast and link).
    #[serde(default = "default_concepts")]
    pub n_concepts: usize,
    #[serde(default = "default_domains")]
    pub n_domains: usize,
    /// Fraction of pairs at the overlap threshold with a coin-flip label.
    /// These pairs are neither flipped nor covered by the overlap rule.
    #[serde(default)]
    pub ambiguous_fraction: f64,
    /// Selects an independent draw of pairs sharing the concept inventory,
    /// e.g. 0 for train and 1 for test.
    #[serde(default)]
    pub stream: u64,
    #[serde(default = "default_name")]
    pub name: String,
}

impl SyntheticSpec {
    pub fn new(n_pairs: usize, flip_fraction: f64, seed: u64) -> Self {
        Self {
            n_pairs,
            vocab_size: default_vocab(),
            flip_fraction,
            overlap_threshold: default_threshold(),
            seed,
            sentence_len: default_sentence_len(),
            n_concepts: default_concepts(),
            n_domains: default_domains(),
            ambiguous_fraction: 0.0,
            stream: 0,
            name: default_name(),
        }
    }

    /// Same generator, a different draw of pairs.
    pub fn with_stream(&self, stream: u64, name: impl Into<String>) -> Self {
        Self {
            stream,
            name: name.into(),
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size < 10 {
            return Err(Error::invalid("vocab_size must be at least 10"));
        }
        if self.n_pairs < 1 {
            return Err(Error::invalid("n_pairs must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.flip_fraction) {
            return Err(Error::invalid("flip_fraction outside [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.ambiguous_fraction) || self.flip_fraction + self.ambiguous_fraction > 1.0 {
            return Err(Error::invalid("ambiguous_fraction outside [0, 1 - flip_fraction]"));
        }
        if !(0.0..=1.0).contains(&self.overlap_threshold) {
            return Err(Error::invalid("overlap_threshold outside [0, 1]"));
        }
        if self.sentence_len < 3 {
            return Err(Error::invalid("sentence_len must be at least 3"));
        }
        if self.n_domains < 1 {
            return Err(Error::invalid("n_domains must be at least 1"));
        }
        let m = self.sentence_len;
        if self.high_band().is_empty() || self.low_band().is_empty() {
            return Err(Error::invalid(format!(
                "overlap_threshold {} leaves no shared-token count for sentences of {m} tokens",
                self.overlap_threshold
            )));
        }
        let filler = self.vocab_size.saturating_sub(4 * self.n_concepts);
        if filler / self.n_domains < 2 * m {
            return Err(Error::invalid(
                "vocab_size too small for sentence_len, concepts and domains",
            ));
        }
        Ok(())
    }

    /// Shared-token counts that read as duplicates: overlap above both the
    /// threshold and one half. At least one token stays unshared.
    fn high_band(&self) -> Vec<usize> {
        let m = self.sentence_len as f64;
        let lo = self.overlap_threshold.max(0.5);
        (0..self.sentence_len).filter(|&k| k as f64 / m > lo).collect()
    }

    /// Shared-token counts that read as non-duplicates.
    fn low_band(&self) -> Vec<usize> {
        let m = self.sentence_len as f64;
        let hi = self.overlap_threshold.min(0.5);
        (0..self.sentence_len)
            .filter(|&k| (k as f64 / m) < hi && k + 1 < self.sentence_len)
            .collect()
    }
}

/// Fraction of tokens shared between two whitespace-tokenized texts,
/// relative to the longer one.
pub fn overlap_fraction(a: &str, b: &str) -> f64 {
    let ta: HashSet<&str> = a.split_whitespace().collect();
    let tb: HashSet<&str> = b.split_whitespace().collect();
    let denom = ta.len().max(tb.len());
    if denom == 0 {
        return 0.0;
    }
    ta.intersection(&tb).count() as f64 / denom as f64
}

struct Vocab {
    contrast: Vec<(usize, usize)>,
    link: Vec<(usize, usize)>,
    /// Filler token ids per domain.
    domains: Vec<Vec<usize>>,
}

impl Vocab {
    fn build(spec: &SyntheticSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut ids: Vec<usize> = (0..spec.vocab_size).collect();
        ids.shuffle(&mut rng);
        let c = spec.n_concepts;
        let contrast = (0..c).map(|i| (ids[2 * i], ids[2 * i + 1])).collect();
        let link = (0..c).map(|i| (ids[2 * c + 2 * i], ids[2 * c + 2 * i + 1])).collect();
        let filler = &ids[4 * c..];
        let per = filler.len() / spec.n_domains;
        let domains = (0..spec.n_domains)
            .map(|d| filler[d * per..(d + 1) * per].to_vec())
            .collect();
        Self {
            contrast,
            link,
            domains,
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Plain,
    Flip,
    Vague,
}

fn word(id: usize) -> String {
    format!("w{id}")
}

/// Generates labeled pairs. Deterministic in the spec.
///
/// Exactly `floor(flip_fraction * n_pairs)` pairs are flipped and
/// `floor(ambiguous_fraction * n_pairs)` others are ambiguous. The rest have
/// `label = [overlap > overlap_threshold]`.
pub fn generate_synthetic_pairs(spec: &SyntheticSpec) -> Result<PairDataset> {
    spec.validate()?;
    let vocab = Vocab::build(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(spec.stream + 1);

    let n = spec.n_pairs;
    let n_flip = (spec.flip_fraction * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_vague = (spec.ambiguous_fraction * n as f64).floor() as usize;
    let mut kind = vec![Kind::Plain; n];
    for &i in &order[..n_flip] {
        kind[i] = Kind::Flip;
    }
    for &i in &order[n_flip..(n_flip + n_vague).min(n)] {
        kind[i] = Kind::Vague;
    }

    let m = spec.sentence_len;
    let (high, low) = (spec.high_band(), spec.low_band());
    let mut examples = Vec::with_capacity(n);
    for (i, &k) in kind.iter().enumerate() {
        let d = rng.random_range(0..spec.n_domains);
        let lexical_dup = rng.random_bool(0.5);
        let shared = if k == Kind::Vague {
            ((spec.overlap_threshold * m as f64).round() as usize).clamp(1, m - 2)
        } else if lexical_dup {
            *high.choose(&mut rng).expect("validated")
        } else {
            *low.choose(&mut rng).expect("validated")
        };
        let pool = &vocab.domains[d];
        let picked: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), 2 * m - shared)
            .into_iter()
            .map(|j| pool[j])
            .collect();
        let mut a: Vec<usize> = picked[..m].to_vec();
        // b keeps the first `shared` tokens of a and takes fresh ones for the rest
        let mut b: Vec<usize> = picked[..shared].to_vec();
        b.extend_from_slice(&picked[m..]);
        let concepts = match k {
            Kind::Plain => None,
            Kind::Flip if lexical_dup => Some(&vocab.contrast),
            Kind::Flip => Some(&vocab.link),
            Kind::Vague => None,
        };
        if let Some(c) = concepts {
            let (ca, cb) = *c.choose(&mut rng).expect("concepts");
            // replace an unshared token on each side
            a[m - 1] = ca;
            b[m - 1] = cb;
        }
        a.shuffle(&mut rng);
        b.shuffle(&mut rng);
        let base = u8::from(lexical_dup);
        let label = match k {
            Kind::Plain => base,
            Kind::Flip => 1 - base,
            Kind::Vague => u8::from(rng.random_bool(0.5)),
        };
        let join = |t: &[usize]| t.iter().map(|&w| word(w)).collect::<Vec<_>>().join(" ");
        examples.push(PairExample {
            id: format!("{}-{i:05}", spec.name),
            text_a: join(&a),
            text_b: join(&b),
            label: Some(label),
            domain: Some(format!("d{d}")),
            flipped: Some(k == Kind::Flip),
        });
    }
    PairDataset::new(spec.name.clone(), examples)
}

// ---------------------------------------------------------------------------
// Search

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSearchSpec {
    pub n_queries: usize,
    pub n_labels: usize,
    #[serde(default = "default_search_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_search_len")]
    pub sentence_len: usize,
    #[serde(default = "default_search_domains")]
    pub n_domains: usize,
    /// Domain whose queries name their label only through an alias token
    /// absent from the label text.
    #[serde(default)]
    pub knowledge_domain: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub stream: u64,
}

impl SyntheticSearchSpec {
    pub fn new(n_queries: usize, n_labels: usize, seed: u64) -> Self {
        Self {
            n_queries,
            n_labels,
            vocab_size: default_search_vocab(),
            sentence_len: default_search_len(),
            n_domains: default_search_domains(),
            knowledge_domain: 0,
            seed,
            stream: 0,
        }
    }
}

fn default_search_vocab() -> usize {
    3000
}
fn default_search_len() -> usize {
    6
}
fn default_search_domains() -> usize {
    3
}

/// A generated search dataset plus the domain tag of the knowledge domain.
#[derive(Clone, Debug)]
pub struct SyntheticSearch {
    pub dataset: SearchDataset,
    pub knowledge_domain: String,
}

/// Queries against a shared label corpus. Queries in ordinary domains copy
/// half of their relevant label's tokens; queries in the knowledge domain
/// carry the label's alias token and otherwise random filler.
pub fn generate_synthetic_search(spec: &SyntheticSearchSpec) -> Result<SyntheticSearch> {
    let m = spec.sentence_len;
    if spec.n_labels == 0 {
        return Err(Error::EmptyCorpus);
    }
    if m < 2 || spec.n_domains == 0 || spec.knowledge_domain >= spec.n_domains {
        return Err(Error::invalid("bad search spec"));
    }
    if spec.vocab_size < spec.n_labels + spec.n_domains * 2 * m {
        return Err(Error::invalid("vocab_size too small for the label aliases"));
    }
    // The corpus and aliases come from the seed alone; queries from the stream.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut ids: Vec<usize> = (0..spec.vocab_size).collect();
    ids.shuffle(&mut rng);
    let aliases = &ids[..spec.n_labels];
    let filler = &ids[spec.n_labels..];
    let per = filler.len() / spec.n_domains;
    let domain_vocab: Vec<&[usize]> = (0..spec.n_domains).map(|d| &filler[d * per..(d + 1) * per]).collect();

    let join = |t: &[usize]| t.iter().map(|&w| word(w)).collect::<Vec<_>>().join(" ");
    let mut label_domain = Vec::with_capacity(spec.n_labels);
    let mut label_tokens = Vec::with_capacity(spec.n_labels);
    let mut labels = Vec::with_capacity(spec.n_labels);
    for j in 0..spec.n_labels {
        let d = j % spec.n_domains;
        let toks: Vec<usize> = domain_vocab[d].choose_multiple(&mut rng, m).copied().collect();
        labels.push(LabelDoc {
            id: format!("L{j:04}"),
            text: join(&toks),
        });
        label_domain.push(d);
        label_tokens.push(toks);
    }

    rng.set_stream(spec.stream + 1);
    let mut queries = Vec::with_capacity(spec.n_queries);
    for i in 0..spec.n_queries {
        let d = rng.random_range(0..spec.n_domains);
        let candidates: Vec<usize> = (0..spec.n_labels).filter(|&j| label_domain[j] == d).collect();
        let Some(&target) = candidates.choose(&mut rng) else {
            continue;
        };
        let mut toks: Vec<usize> = if d == spec.knowledge_domain {
            let mut t: Vec<usize> = domain_vocab[d].choose_multiple(&mut rng, m - 1).copied().collect();
            t.push(aliases[target]);
            t
        } else {
            let keep = m / 2;
            let mut t: Vec<usize> = label_tokens[target].choose_multiple(&mut rng, keep).copied().collect();
            t.extend(domain_vocab[d].choose_multiple(&mut rng, m - keep));
            t
        };
        toks.shuffle(&mut rng);
        queries.push(SearchQuery {
            id: format!("q{}-{i:05}", spec.stream),
            text: join(&toks),
            domain: Some(format!("d{d}")),
            relevant: Some(BTreeSet::from([labels[target].id.clone()])),
        });
    }
    Ok(SyntheticSearch {
        dataset: SearchDataset::new(queries, labels)?,
        knowledge_domain: format!("d{}", spec.knowledge_domain),
    })
}
