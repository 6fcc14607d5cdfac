//! Metrics and analyses over trained models.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{extreme_indices, PairDataset, SealedSearchTruth, SealedTruth, SearchDataset};
use crate::encoder::{Encoder, LabelIndex};
use crate::error::{Error, Result};

/// Area under the ROC curve via midranks.
///
/// Equal to the fraction of positive/negative pairs ordered correctly, with
/// ties counted as one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let midrank = (i + 1 + j) as f64 / 2.0;
        let pos_in_run = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        pos_rank_sum += midrank * pos_in_run as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Pair scores of a model in dataset order.
pub fn pair_scores<E: Encoder + ?Sized>(model: &E, data: &PairDataset) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    data.examples()
        .par_iter()
        .map(|ex| {
            model
                .similarity(&ex.text_a, &ex.text_b)
                .map_err(|_| Error::EmptyEmbedding { id: ex.id.clone() })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionAt1 {
    pub value: f64,
    pub n: usize,
    /// Queries skipped for lacking a relevance set.
    pub excluded: usize,
}

/// Fraction of queries whose top-1 label is relevant, with relevance read
/// from the queries themselves.
pub fn precision_at_1<E: Encoder + ?Sized>(model: &E, data: &SearchDataset) -> Result<PrecisionAt1> {
    p_at_1(model, data, |q| q.relevant.clone())
}

/// As [`precision_at_1`], with relevance read from sealed truth.
pub fn precision_at_1_sealed<E: Encoder + ?Sized>(
    model: &E,
    data: &SearchDataset,
    truth: &SealedSearchTruth,
) -> Result<PrecisionAt1> {
    p_at_1(model, data, |q| truth.relevant(&q.id).ok().cloned())
}

fn p_at_1<E: Encoder + ?Sized>(
    model: &E,
    data: &SearchDataset,
    relevant: impl Fn(&crate::dataset::SearchQuery) -> Option<std::collections::BTreeSet<String>> + Sync,
) -> Result<PrecisionAt1> {
    use rayon::prelude::*;
    let index = LabelIndex::build(model, data.labels())?;
    let hits: Vec<Option<bool>> = data
        .queries()
        .par_iter()
        .map(|q| {
            let Some(rel) = relevant(q) else {
                return Ok(None);
            };
            let emb = model
                .embed(&q.text)
                .map_err(|_| Error::EmptyEmbedding { id: q.id.clone() })?;
            let top = index.nearest(&emb, 1);
            Ok(Some(rel.contains(&top[0].0)))
        })
        .collect::<Result<_>>()?;
    let excluded = hits.iter().filter(|h| h.is_none()).count();
    let n = hits.len() - excluded;
    if n == 0 {
        return Err(Error::UndefinedMetric("no query has a relevance set".into()));
    }
    if excluded > 0 {
        log::warn!("P@1: {excluded} queries without relevance excluded");
    }
    let correct = hits.iter().filter(|h| **h == Some(true)).count();
    Ok(PrecisionAt1 {
        value: correct as f64 / n as f64,
        n,
        excluded,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "tag")]
pub enum Subset {
    All,
    HighBaseError,
    LowBaseError,
    Domain(String),
}

impl Subset {
    pub fn name(&self) -> String {
        match self {
            Subset::All => "all".into(),
            Subset::HighBaseError => "high-base-error".into(),
            Subset::LowBaseError => "low-base-error".into(),
            Subset::Domain(d) => format!("domain={d}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stderr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<String>,
    pub n: usize,
}

/// Labeled evaluation set with the base model's scores, from which the
/// high/low base-error subsets are derived the same way as the extreme
/// split.
pub struct PairEvalSet<'a> {
    pub data: &'a PairDataset,
    pub labels: Vec<u8>,
    pub base_scores: Vec<f64>,
    easy: Vec<usize>,
    hard: Vec<usize>,
}

impl<'a> PairEvalSet<'a> {
    pub fn new(data: &'a PairDataset, base_scores: Vec<f64>, extreme_fraction: f64) -> Result<Self> {
        if base_scores.len() != data.len() {
            return Err(Error::invalid("base scores not aligned with test set"));
        }
        let labels = data.labels()?;
        let errors: Vec<f64> = base_scores
            .iter()
            .zip(&labels)
            .map(|(&s, &t)| (s - f64::from(t)).powi(2))
            .collect();
        let ids: Vec<&str> = data.iter().map(|e| e.id.as_str()).collect();
        let (easy, hard) = extreme_indices(&ids, &errors, extreme_fraction)?;
        Ok(Self {
            data,
            labels,
            base_scores,
            easy,
            hard,
        })
    }

    pub fn indices(&self, subset: &Subset) -> Result<Vec<usize>> {
        Ok(match subset {
            Subset::All => (0..self.data.len()).collect(),
            Subset::HighBaseError => self.hard.clone(),
            Subset::LowBaseError => self.easy.clone(),
            Subset::Domain(tag) => {
                let mut out = Vec::new();
                for (i, ex) in self.data.iter().enumerate() {
                    match &ex.domain {
                        Some(d) if d == tag => out.push(i),
                        Some(_) => {}
                        None => return Err(Error::MissingDomain(ex.id.clone())),
                    }
                }
                out
            }
        })
    }

    /// AUC of `scores` (aligned with the set) restricted to `subset`.
    pub fn auc(&self, scores: &[f64], subset: &Subset) -> Result<MetricReport> {
        subset_metric("auc", scores, &self.labels, &self.indices(subset)?, subset, roc_auc)
    }
}

/// Applies `metric` to the entries at `indices`.
pub fn subset_metric(
    name: &str,
    scores: &[f64],
    labels: &[u8],
    indices: &[usize],
    subset: &Subset,
    metric: impl Fn(&[f64], &[u8]) -> Result<f64>,
) -> Result<MetricReport> {
    if indices.is_empty() {
        return Err(Error::UndefinedMetric(format!("subset {} is empty", subset.name())));
    }
    let s: Vec<f64> = indices.iter().map(|&i| scores[i]).collect();
    let l: Vec<u8> = indices.iter().map(|&i| labels[i]).collect();
    Ok(MetricReport {
        metric: name.to_string(),
        value: metric(&s, &l)?,
        stderr: None,
        subset: Some(subset.name()),
        n: indices.len(),
    })
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation over √n; `None` below two values.
pub fn stderr(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    Some(var.sqrt() / (xs.len() as f64).sqrt())
}

fn midranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && xs[order[j]] == xs[order[i]] {
            j += 1;
        }
        for &k in &order[i..j] {
            ranks[k] = (i + 1 + j) as f64 / 2.0;
        }
        i = j;
    }
    ranks
}

/// Spearman rank correlation (Pearson over midranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("spearman needs two aligned series of length >= 2"));
    }
    let (rx, ry) = (midranks(x), midranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("constant series".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Per-bin gain over the baseline, aggregated over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    /// 1-based, highest deviation first.
    pub bin: usize,
    pub size: usize,
    pub gains: Vec<f64>,
    pub mean_gain: f64,
    pub stderr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainTable {
    pub metric: String,
    pub baseline: Vec<f64>,
    pub rows: Vec<GainRow>,
}

impl GainTable {
    /// Mean of the row means over bins `range` (0-based, half open).
    pub fn mean_over(&self, range: std::ops::Range<usize>) -> f64 {
        let v: Vec<f64> = self.rows[range].iter().map(|r| r.mean_gain).collect();
        mean(&v)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(crate::sampling::csv_err)?;
        w.write_record(["bin", "size", "mean_gain", "stderr", "gains"])
            .map_err(crate::sampling::csv_err)?;
        for r in &self.rows {
            let gains: Vec<String> = r.gains.iter().map(f64::to_string).collect();
            w.write_record([
                r.bin.to_string(),
                r.size.to_string(),
                r.mean_gain.to_string(),
                r.stderr.map(|s| s.to_string()).unwrap_or_default(),
                gains.join(";"),
            ])
            .map_err(crate::sampling::csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Whitespace-separated `bin mean stderr` series for plotting tools.
    pub fn write_dat(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "# bin mean_gain stderr ({})", self.metric)?;
        for r in &self.rows {
            writeln!(f, "{} {} {}", r.bin, r.mean_gain, r.stderr.unwrap_or(0.0))?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Builds a gain table from per-seed baselines and per-seed, per-bin values.
/// `per_bin[b][s]` is the metric after augmenting with bin `b` under seed `s`.
pub fn gain_table(metric: &str, baseline: Vec<f64>, per_bin: &[(usize, Vec<f64>)]) -> GainTable {
    let rows = per_bin
        .iter()
        .enumerate()
        .map(|(b, (size, vals))| {
            let gains: Vec<f64> = vals.iter().zip(&baseline).map(|(v, base)| v - base).collect();
            GainRow {
                bin: b + 1,
                size: *size,
                mean_gain: mean(&gains),
                stderr: stderr(&gains),
                gains,
            }
        })
        .collect();
    GainTable {
        metric: metric.to_string(),
        baseline,
        rows,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub bin: usize,
    pub n: usize,
    /// `None` marks an empty bin.
    pub annotator: Option<f64>,
    pub base_model: Option<f64>,
    pub finetuned_model: Option<f64>,
}

/// Agreement of annotations and of thresholded model scores with the truth,
/// per bin.
///
/// `annotations` maps id to the annotated label; `base_scores` and
/// `finetuned_scores` map id to a model score, read as positive at ≥ 0.5.
pub fn annotator_accuracy_by_quantile(
    annotations: &HashMap<String, u8>,
    truth: &SealedTruth,
    bins: &[Vec<String>],
    base_scores: &HashMap<String, f64>,
    finetuned_scores: &HashMap<String, f64>,
) -> Result<Vec<AccuracyRow>> {
    let frac = |hits: usize, n: usize| (n > 0).then(|| hits as f64 / n as f64);
    let model_acc = |ids: &[String], scores: &HashMap<String, f64>| -> Result<Option<f64>> {
        let mut hits = 0;
        for id in ids {
            let s = scores
                .get(id)
                .ok_or_else(|| Error::invalid(format!("no model score for `{id}`")))?;
            hits += usize::from(u8::from(*s >= 0.5) == truth.label(id)?);
        }
        Ok(frac(hits, ids.len()))
    };
    bins.iter()
        .enumerate()
        .map(|(b, ids)| {
            let mut hits = 0;
            for id in ids {
                let a = annotations
                    .get(id)
                    .ok_or_else(|| Error::invalid(format!("no annotation for `{id}`")))?;
                hits += usize::from(*a == truth.label(id)?);
            }
            Ok(AccuracyRow {
                bin: b + 1,
                n: ids.len(),
                annotator: frac(hits, ids.len()),
                base_model: model_acc(ids, base_scores)?,
                finetuned_model: model_acc(ids, finetuned_scores)?,
            })
        })
        .collect()
}

/// Writes metric reports as CSV.
pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[(String, MetricReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(crate::sampling::csv_err)?;
    w.write_record(["arm", "metric", "subset", "value", "stderr", "n"])
        .map_err(crate::sampling::csv_err)?;
    for (arm, m) in rows {
        w.write_record([
            arm.as_str(),
            &m.metric,
            m.subset.as_deref().unwrap_or("all"),
            &m.value.to_string(),
            &m.stderr.map(|s| s.to_string()).unwrap_or_default(),
            &m.n.to_string(),
        ])
        .map_err(crate::sampling::csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PairExample;
    use proptest::prelude::*;

    fn pair_count_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    num += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 4], &[1, 0, 1, 0]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.9, 0.4, 0.6, 0.1], &[1, 1, 0, 0]).unwrap(), 0.75);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    proptest! {
        #[test]
        fn auc_matches_pair_counting(v in proptest::collection::vec((0u8..30, 0u8..2), 2..200)) {
            let scores: Vec<f64> = v.iter().map(|p| f64::from(p.0) / 7.0).collect();
            let labels: Vec<u8> = v.iter().map(|p| p.1).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let got = roc_auc(&scores, &labels).unwrap();
            prop_assert!((got - pair_count_auc(&scores, &labels)).abs() < 1e-12);
            let cubed: Vec<f64> = scores.iter().map(|s| (s - 1.0).powi(3)).collect();
            prop_assert!((roc_auc(&cubed, &labels).unwrap() - got).abs() < 1e-12);
            let affine: Vec<f64> = scores.iter().map(|s| 3.0 * s - 2.0).collect();
            prop_assert!((roc_auc(&affine, &labels).unwrap() - got).abs() < 1e-12);
        }

        #[test]
        fn auc_negation_complements(v in proptest::collection::hash_set(0u32..100_000, 2..100), bits in any::<u64>()) {
            let scores: Vec<f64> = v.into_iter().map(f64::from).collect();
            let labels: Vec<u8> = (0..scores.len()).map(|i| ((bits >> (i % 64)) & 1) as u8).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            prop_assert!((roc_auc(&scores, &labels).unwrap() + roc_auc(&neg, &labels).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stderr_and_mean() {
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
        assert!((stderr(&[1.0, 2.0, 3.0]).unwrap() - 1.0 / 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(stderr(&[1.0]), None);
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 8.0, 27.0, 64.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    fn eval_fixture() -> (PairDataset, Vec<f64>) {
        let ex = (0..10)
            .map(|i| {
                PairExample::new(format!("t{i}"), "a", "b")
                    .with_label((i % 2) as u8)
                    .with_domain(if i < 5 { "x" } else { "y" })
            })
            .collect();
        let base: Vec<f64> = (0..10).map(|i| f64::from(i) / 10.0).collect();
        (PairDataset::new("t", ex).unwrap(), base)
    }

    #[test]
    fn subsets_partition_the_extreme_slice() {
        let (data, base) = eval_fixture();
        let set = PairEvalSet::new(&data, base.clone(), 0.6).unwrap();
        let hi = set.indices(&Subset::HighBaseError).unwrap();
        let lo = set.indices(&Subset::LowBaseError).unwrap();
        assert_eq!(hi.len() + lo.len(), 6);
        assert!(hi.iter().all(|i| !lo.contains(i)));
        let all = set.auc(&base, &Subset::All).unwrap();
        assert_eq!(all.value, roc_auc(&base, &data.labels().unwrap()).unwrap());
        assert_eq!(set.indices(&Subset::Domain("x".into())).unwrap(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn empty_subset_is_undefined() {
        let (data, base) = eval_fixture();
        let set = PairEvalSet::new(&data, base.clone(), 0.0).unwrap();
        assert!(matches!(
            set.auc(&base, &Subset::HighBaseError),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn accuracy_table() {
        let truth =
            SealedTruth::from_pairs([("a".to_string(), 1), ("b".to_string(), 0), ("c".to_string(), 1)]).unwrap();
        let ann: HashMap<String, u8> = [("a", 1), ("b", 1), ("c", 1)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        let base: HashMap<String, f64> = [("a", 0.5), ("b", 0.49), ("c", 0.2)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        let bins = vec![vec!["a".to_string(), "b".to_string()], vec!["c".to_string()], vec![]];
        let rows = annotator_accuracy_by_quantile(&ann, &truth, &bins, &base, &base).unwrap();
        assert_eq!(rows[0].annotator, Some(0.5));
        assert_eq!(rows[0].base_model, Some(1.0));
        assert_eq!(rows[1].base_model, Some(0.0));
        assert_eq!(rows[2].annotator, None);
    }

    #[test]
    fn gain_rows() {
        let t = gain_table("auc", vec![0.5, 0.6], &[(5, vec![0.6, 0.7]), (5, vec![0.5, 0.6])]);
        assert_eq!(t.rows.len(), 2);
        assert!((t.rows[0].mean_gain - 0.1).abs() < 1e-12);
        assert_eq!(t.rows[1].mean_gain, 0.0);
        assert_eq!(t.rows[1].bin, 2);
    }
}
