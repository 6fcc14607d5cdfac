//! Annotators: ground-truth oracle, simulated noisy annotator, and an LLM
//! chat-completion client.

pub mod llm;
pub mod prompts;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{SealedSearchTruth, SealedTruth};
use crate::error::{Error, Result};

pub use llm::{
    annotate_llm_pairs, annotate_llm_search, HttpTransport, LlmClient, LlmConfig, Transport, TransportResponse,
};
pub use prompts::{
    build_pair_prompt, build_search_prompt, parse_pair_response, parse_search_response, Prompt, SearchPrompt,
    SearchTemplate, MAX_BATCH,
};

/// A pair label, or a per-label relevance map for a search query.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Assignment {
    Pair(u8),
    Search(BTreeMap<String, u8>),
}

impl Assignment {
    pub fn as_pair(&self) -> Option<u8> {
        match self {
            Assignment::Pair(l) => Some(*l),
            Assignment::Search(_) => None,
        }
    }

    pub fn positives(&self) -> Vec<&str> {
        match self {
            Assignment::Pair(_) => Vec::new(),
            Assignment::Search(m) => m.iter().filter(|(_, &v)| v == 1).map(|(k, _)| k.as_str()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AnnotatorKind {
    Gt,
    Simulated { seed: u64, profile_hash: String },
    Llm { model: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub system: String,
    pub user: String,
    pub response: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub assignment: Assignment,
    pub annotator: AnnotatorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<Transcript>,
}

pub fn write_records(path: impl AsRef<Path>, records: &[AnnotationRecord]) -> Result<()> {
    crate::dataset::write_jsonl(path.as_ref(), records)
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>> {
    crate::dataset::read_jsonl(path.as_ref())
}

/// Accuracy of a simulated annotator, optionally varying by quantile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub default_accuracy: f64,
    /// 1-based quantile index to accuracy. Quantiles absent from the map
    /// use `default_accuracy`.
    #[serde(default, skip_serializing_if = "Option::is_none", with = "quantile_keys")]
    pub per_quantile_accuracy: Option<BTreeMap<usize, f64>>,
}

/// Quantile maps with string keys, as TOML tables require.
mod quantile_keys {
    use std::collections::BTreeMap;

    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(map: &Option<BTreeMap<usize, f64>>, s: S) -> Result<S::Ok, S::Error> {
        map.as_ref()
            .map(|m| {
                m.iter()
                    .map(|(k, v)| (k.to_string(), *v))
                    .collect::<BTreeMap<String, f64>>()
            })
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<BTreeMap<usize, f64>>, D::Error> {
        let Some(raw) = Option::<BTreeMap<String, f64>>::deserialize(d)? else {
            return Ok(None);
        };
        raw.into_iter()
            .map(|(k, v)| {
                k.parse()
                    .map(|q| (q, v))
                    .map_err(|_| D::Error::custom(format!("quantile key `{k}`")))
            })
            .collect::<Result<_, _>>()
            .map(Some)
    }
}

impl NoiseProfile {
    pub fn constant(accuracy: f64) -> Self {
        Self {
            default_accuracy: accuracy,
            per_quantile_accuracy: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if !ok(self.default_accuracy) {
            return Err(Error::invalid(format!(
                "accuracy {} outside [0, 1]",
                self.default_accuracy
            )));
        }
        for (q, &p) in self.per_quantile_accuracy.iter().flatten() {
            if !ok(p) {
                return Err(Error::invalid(format!("accuracy {p} for quantile {q} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("profile serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn accuracy(&self, quantile: Option<usize>) -> Result<f64> {
        match &self.per_quantile_accuracy {
            None => Ok(self.default_accuracy),
            Some(map) => {
                let q = quantile.ok_or_else(|| Error::invalid("quantile-dependent profile needs a quantile index"))?;
                Ok(map.get(&q).copied().unwrap_or(self.default_accuracy))
            }
        }
    }
}

/// Uniform draw in `[0, 1)` keyed by `(seed, id)`, independent of call order.
pub fn keyed_uniform(seed: u64, id: &str) -> f64 {
    keyed_rng(seed, id).random()
}

fn keyed_rng(seed: u64, id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

pub fn annotate_gt(ids: &[String], truth: &SealedTruth) -> Result<Vec<AnnotationRecord>> {
    ids.iter()
        .map(|id| {
            Ok(AnnotationRecord {
                id: id.clone(),
                assignment: Assignment::Pair(truth.label(id)?),
                annotator: AnnotatorKind::Gt,
                transcript: None,
            })
        })
        .collect()
}

/// A query with its filtered candidate labels, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchItem {
    pub id: String,
    pub text: String,
    /// `(label id, label text, finetuned score)`.
    pub candidates: Vec<(String, String, f64)>,
}

/// Oracle over the candidate set: relevant candidates get 1, the rest 0.
/// Relevant labels outside the candidates are not annotated.
pub fn annotate_gt_search(items: &[SearchItem], truth: &SealedSearchTruth) -> Result<Vec<AnnotationRecord>> {
    items
        .iter()
        .map(|it| {
            let rel = truth.relevant(&it.id)?;
            let map = it
                .candidates
                .iter()
                .map(|(l, _, _)| (l.clone(), u8::from(rel.contains(l))))
                .collect();
            Ok(AnnotationRecord {
                id: it.id.clone(),
                assignment: Assignment::Search(map),
                annotator: AnnotatorKind::Gt,
                transcript: None,
            })
        })
        .collect()
}

/// Emits the true label with the applicable accuracy, the flipped label
/// otherwise.
pub fn annotate_simulated(
    ids: &[String],
    truth: &SealedTruth,
    profile: &NoiseProfile,
    quantiles: Option<&HashMap<String, usize>>,
    seed: u64,
) -> Result<Vec<AnnotationRecord>> {
    profile.validate()?;
    let kind = AnnotatorKind::Simulated {
        seed,
        profile_hash: profile.hash(),
    };
    ids.iter()
        .map(|id| {
            let t = truth.label(id)?;
            let a = profile.accuracy(quantiles.and_then(|q| q.get(id).copied()))?;
            let label = if keyed_uniform(seed, id) < a { t } else { 1 - t };
            Ok(AnnotationRecord {
                id: id.clone(),
                assignment: Assignment::Pair(label),
                annotator: kind.clone(),
                transcript: None,
            })
        })
        .collect()
}

/// Simulated search annotator: with the applicable accuracy it marks the
/// best-ranked relevant candidate (or nothing when none is relevant),
/// otherwise a random non-relevant candidate.
pub fn annotate_simulated_search(
    items: &[SearchItem],
    truth: &SealedSearchTruth,
    profile: &NoiseProfile,
    quantiles: Option<&HashMap<String, usize>>,
    seed: u64,
) -> Result<Vec<AnnotationRecord>> {
    profile.validate()?;
    let kind = AnnotatorKind::Simulated {
        seed,
        profile_hash: profile.hash(),
    };
    items
        .iter()
        .map(|it| {
            let rel: &BTreeSet<String> = truth.relevant(&it.id)?;
            let a = profile.accuracy(quantiles.and_then(|q| q.get(&it.id).copied()))?;
            let mut rng = keyed_rng(seed, &it.id);
            let correct = rng.random::<f64>() < a;
            let right = it.candidates.iter().find(|c| rel.contains(&c.0));
            let wrong: Vec<&(String, String, f64)> = it.candidates.iter().filter(|c| !rel.contains(&c.0)).collect();
            let pick = if correct || wrong.is_empty() {
                right.map(|c| c.0.clone())
            } else {
                Some(wrong[rng.random_range(0..wrong.len())].0.clone())
            };
            let map = it
                .candidates
                .iter()
                .map(|(l, _, _)| (l.clone(), u8::from(Some(l) == pick.as_ref())))
                .collect();
            Ok(AnnotationRecord {
                id: it.id.clone(),
                assignment: Assignment::Search(map),
                annotator: kind.clone(),
                transcript: None,
            })
        })
        .collect()
}

/// Fraction of pair records agreeing with the truth.
pub fn agreement(records: &[AnnotationRecord], truth: &SealedTruth) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::UndefinedMetric("no annotations".into()));
    }
    let mut hits = 0;
    for r in records {
        let l = r
            .assignment
            .as_pair()
            .ok_or_else(|| Error::invalid("search record in pair agreement"))?;
        hits += usize::from(l == truth.label(&r.id)?);
    }
    Ok(hits as f64 / records.len() as f64)
}
