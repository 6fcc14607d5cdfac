//! Prompt templates and response parsing.
//!
//! Templates are stored verbatim under `assets/prompts`. A slot line has the
//! form `Name: %s`; numbered slots beyond the batch are dropped.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::dataset::PairExample;
use crate::error::{Error, Result};

pub const MAX_BATCH: usize = 10;

const PAIR_SYSTEM: &str = include_str!("../../assets/prompts/pair.system.txt");
const PAIR_USER: &str = include_str!("../../assets/prompts/pair.user.txt");
const WIKI_SYSTEM: &str = include_str!("../../assets/prompts/wiki-usa.system.txt");
const WIKI_USER: &str = include_str!("../../assets/prompts/wiki-usa.user.txt");
const BOOKS_SYSTEM: &str = include_str!("../../assets/prompts/amazon-books.system.txt");
const BOOKS_USER: &str = include_str!("../../assets/prompts/amazon-books.user.txt");
const KITCHEN_SYSTEM: &str = include_str!("../../assets/prompts/amazon-kitchen.system.txt");
const KITCHEN_USER: &str = include_str!("../../assets/prompts/amazon-kitchen.user.txt");

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchTemplate {
    WikiUsa,
    AmazonBooks,
    AmazonKitchen,
}

impl SearchTemplate {
    fn texts(self) -> (&'static str, &'static str, &'static str) {
        match self {
            SearchTemplate::WikiUsa => (WIKI_SYSTEM, WIKI_USER, "SeeAlsoArticle"),
            SearchTemplate::AmazonBooks => (BOOKS_SYSTEM, BOOKS_USER, "Product"),
            SearchTemplate::AmazonKitchen => (KITCHEN_SYSTEM, KITCHEN_USER, "Product"),
        }
    }
}

impl std::str::FromStr for SearchTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wiki-usa" => Ok(SearchTemplate::WikiUsa),
            "amazon-books" => Ok(SearchTemplate::AmazonBooks),
            "amazon-kitchen" => Ok(SearchTemplate::AmazonKitchen),
            _ => Err(Error::invalid(format!("unknown search template `{s}`"))),
        }
    }
}

/// Fills `Name: %s` lines. `numbered(k)` gives the text for slot `Prefix<k>`
/// or `None` to drop the line; `plain` fills the one unnumbered slot.
fn fill(template: &str, prefix: &str, numbered: impl Fn(usize) -> Option<String>, plain: Option<&str>) -> String {
    let mut out = Vec::new();
    for line in template.split('\n') {
        let Some(name) = line.strip_suffix(": %s") else {
            out.push(line.to_string());
            continue;
        };
        match name.strip_prefix(prefix).and_then(|k| k.parse::<usize>().ok()) {
            Some(k) => {
                if let Some(text) = numbered(k) {
                    out.push(format!("{name}: {text}"));
                }
            }
            None => out.push(format!("{name}: {}", plain.unwrap_or_default())),
        }
    }
    out.join("\n")
}

/// Prompt for up to ten pairs; slot `k` reads `text_a`, a newline, `text_b`.
pub fn build_pair_prompt(batch: &[PairExample]) -> Result<Prompt> {
    if batch.is_empty() || batch.len() > MAX_BATCH {
        return Err(Error::invalid(format!(
            "pair batch of {} (need 1..={MAX_BATCH})",
            batch.len()
        )));
    }
    let user = fill(
        PAIR_USER,
        "Pair",
        |k| batch.get(k - 1).map(|e| format!("{}\n{}", e.text_a, e.text_b)),
        None,
    );
    Ok(Prompt {
        system: PAIR_SYSTEM.to_string(),
        user,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchPrompt {
    pub prompt: Prompt,
    /// Candidate label ids in prompt order (slot 1 first).
    pub order: Vec<String>,
}

/// Prompt for one query over its candidates `(label id, text, score)`,
/// listed by descending score.
pub fn build_search_prompt(
    query: &str,
    candidates: &[(String, String, f64)],
    template: SearchTemplate,
) -> Result<SearchPrompt> {
    if candidates.is_empty() || candidates.len() > MAX_BATCH {
        return Err(Error::invalid(format!(
            "{} candidate labels (need 1..={MAX_BATCH})",
            candidates.len()
        )));
    }
    let mut ranked: Vec<&(String, String, f64)> = candidates.iter().collect();
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2));
    let (system, user, prefix) = template.texts();
    let user = fill(user, prefix, |k| ranked.get(k - 1).map(|c| c.1.clone()), Some(query));
    Ok(SearchPrompt {
        prompt: Prompt {
            system: system.to_string(),
            user,
        },
        order: ranked.into_iter().map(|c| c.0.clone()).collect(),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Parsed<T> {
    pub value: T,
    pub warnings: Vec<String>,
}

static PAIR_TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"Pair ?(\d+)").expect("valid regex"));
static ITEM_TOKEN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?:SeeAlsoArticle|Product) ?(\d+)").expect("valid regex"));

/// Marks every in-range `Pair<k>` as 1. Never fails.
pub fn parse_pair_response(raw: &str, batch_size: usize) -> Parsed<Vec<u8>> {
    let mut value = vec![0u8; batch_size];
    let mut warnings = Vec::new();
    let mut seen = false;
    for cap in PAIR_TOKEN.captures_iter(raw) {
        seen = true;
        match cap[1].parse::<usize>() {
            Ok(k) if (1..=batch_size).contains(&k) => value[k - 1] = 1,
            _ => warnings.push(format!("ignoring out-of-range `{}` for batch of {batch_size}", &cap[0])),
        }
    }
    if !seen && !raw.to_ascii_lowercase().contains("none") {
        warnings.push("no pair tokens in response".to_string());
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Parsed { value, warnings }
}

/// 1-based rank of the first in-range `Product<k>` / `SeeAlsoArticle<k>`.
pub fn parse_search_response(raw: &str, n_candidates: usize) -> Parsed<Option<usize>> {
    let mut warnings = Vec::new();
    let mut value = None;
    for cap in ITEM_TOKEN.captures_iter(raw) {
        match cap[1].parse::<usize>() {
            Ok(k) if (1..=n_candidates).contains(&k) => {
                value = Some(k);
                break;
            }
            _ => warnings.push(format!(
                "ignoring out-of-range `{}` for {n_candidates} candidates",
                &cap[0]
            )),
        }
    }
    if value.is_none() {
        warnings.push("no usable item id in response".to_string());
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Parsed { value, warnings }
}
