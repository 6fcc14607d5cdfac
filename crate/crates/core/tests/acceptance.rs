//! Acceptance suite. Runs as a plain binary so every criterion prints its
//! own PASS/FAIL line; exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use eagle_core::annotate::{
    build_pair_prompt, build_search_prompt, parse_pair_response, parse_search_response, SearchTemplate, Transport,
    TransportResponse,
};
use eagle_core::dataset::{LabelDoc, PairExample, SearchDataset, SearchQuery};
use eagle_core::encoder::{
    featurize, mse, pair_gradient, train_pairs, EmbeddingModel, Encoder, ProjectionInit, TrainConfig, TrainPair,
};
use eagle_core::eval::{precision_at_1, roc_auc};
use eagle_core::experiment::{parse_override, Experiment, ExperimentConfig, Setup};
use eagle_core::sampling::quantile_partition;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Synthetic pair study shared by the first two criteria.
const STUDY: &str = r#"
task = "pairs"
budget = 0.1
seeds = [0, 1, 2, 3, 4]
motivation_strategies = ["random", "uncertainty", "cond-informativeness", "base-consistent", "base-inconsistent"]
[data]
split = "extreme"
split_fraction = 0.6
test_size = 2000
[data.synthetic]
n_pairs = 4000
flip_fraction = 0.3
ambiguous_fraction = 0.2
[annotator]
kind = "simulated"
profile = { default_accuracy = 0.85 }
"#;

fn config(text: &str, overrides: &[&str]) -> ExperimentConfig {
    let o: Vec<_> = overrides.iter().map(|s| parse_override(s).expect("override")).collect();
    ExperimentConfig::from_toml_str(text, &o).expect("config")
}

fn criteria_1_and_2() -> (Outcome, Outcome) {
    let start = Instant::now();
    let exp = Experiment::new(config(STUDY, &[])).expect("experiment");
    let report = exp.run_motivation().expect("motivation run");
    let elapsed = start.elapsed();
    if report.exit_code() != 0 {
        let msg = format!("run failed: {:?}", report.warnings);
        return (outcome(false, &msg), outcome(false, msg));
    }
    let hard = |arm: &str| {
        report
            .summary_row(arm, "auc", "high-base-error")
            .expect("hard-subset row")
            .mean
    };
    let (inc, cond, unc, rnd, none) = (
        hard("base-inconsistent"),
        hard("cond-informativeness"),
        hard("uncertainty"),
        hard("random"),
        hard("init"),
    );
    let ordered = inc >= cond && cond > unc && unc >= rnd && rnd > none;
    let margin = cond - rnd;
    let fast = elapsed < Duration::from_secs(180);
    let c1 = outcome(
        ordered && margin >= 0.02 && fast,
        format!(
            "hard AUC inconsistent {inc:.4} >= cond {cond:.4} > uncertainty {unc:.4} >= random {rnd:.4} > none {none:.4}; \
             cond - random {margin:.4}; {:.1}s",
            elapsed.as_secs_f64()
        ),
    );

    let rho: Vec<f64> = report.seeds.iter().filter_map(|s| s.deviation_vs_base_error).collect();
    let mean = rho.iter().sum::<f64>() / rho.len() as f64;
    let c2 = outcome(
        rho.len() == 5 && mean > 0.3,
        format!("spearman(z, base error) per seed {rho:.3?}, mean {mean:.3} (> 0.3)"),
    );
    (c1, c2)
}

/// O(P·N) pair counting with ties worth one half.
fn auc_by_counting(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut total = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            total += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / total
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < 200 {
        let n = rng.random_range(2..=500);
        let levels = rng.random_range(1..=20);
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random_bool(0.5) {
                    rng.random_range(0..levels) as f64 / levels as f64
                } else {
                    rng.random()
                }
            })
            .collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
        if !labels.contains(&0) || !labels.contains(&1) {
            continue;
        }
        let fast = roc_auc(&scores, &labels).expect("auc");
        worst = worst.max((fast - auc_by_counting(&scores, &labels)).abs());
        done += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-12 && secs < 10.0,
        format!("max |diff| {worst:.2e} over 200 instances, {secs:.2}s"),
    )
}

fn criterion_4() -> Outcome {
    let model = EmbeddingModel::base();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let words = [
        "red", "blue", "lamp", "chair", "oak", "steel", "kettle", "mug", "pan", "rug", "desk", "vase",
    ];
    let text = |rng: &mut ChaCha8Rng, n: usize| -> String {
        (0..n)
            .map(|_| words[rng.random_range(0..words.len())])
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut mismatches = 0;
    for _ in 0..50 {
        let n_labels = rng.random_range(1..=50);
        // short texts over a small vocabulary produce duplicate labels and exact ties
        let labels: Vec<LabelDoc> = (0..n_labels)
            .map(|j| {
                let n = rng.random_range(1..=2);
                LabelDoc {
                    id: format!("l{j:02}"),
                    text: text(&mut rng, n),
                }
            })
            .collect();
        let queries: Vec<SearchQuery> = (0..rng.random_range(1..=30))
            .map(|i| {
                let rel: BTreeSet<String> = (0..rng.random_range(1..=3))
                    .map(|_| format!("l{:02}", rng.random_range(0..n_labels)))
                    .collect();
                SearchQuery {
                    id: format!("q{i}"),
                    text: text(&mut rng, 3),
                    domain: None,
                    relevant: Some(rel),
                }
            })
            .collect();
        let mut hits = 0;
        for q in &queries {
            let mut best: Option<(f64, &str)> = None;
            for l in &labels {
                let s = model.similarity(&q.text, &l.text).expect("similarity");
                let better = match best {
                    None => true,
                    Some((bs, bid)) => s > bs || (s == bs && l.id.as_str() < bid),
                };
                if better {
                    best = Some((s, &l.id));
                }
            }
            hits += usize::from(q.relevant.as_ref().expect("relevant").contains(best.expect("labels").1));
        }
        let expected = hits as f64 / queries.len() as f64;
        let data = SearchDataset::new(queries, labels).expect("dataset");
        if precision_at_1(&model, &data).expect("p@1").value != expected {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches over 50 instances"))
}

fn criterion_5() -> Outcome {
    let text = STUDY.replace("seeds = [0, 1, 2, 3, 4]", "seeds = [0, 1, 2]");
    // the finetuned model's accuracy per deviation bin, from zero-budget runs
    let probe = Experiment::new(config(&text, &["--budget=0", "--strategy=random"])).expect("experiment");
    let Setup::Pairs(setup) = probe.setup() else {
        unreachable!()
    };
    let truth = setup.truth.as_ref().expect("truth");
    let report = probe.run_eagle();
    let mut f_acc = [0.0; 20];
    for s in &report.seeds {
        let part = quantile_partition(&s.scores, 20).expect("partition");
        let f: HashMap<&str, f64> = s.scores.iter().map(|d| (d.id.as_str(), d.f_score)).collect();
        for (b, ids) in part.bins.iter().enumerate() {
            let hits = ids
                .iter()
                .filter(|id| u8::from(f[id.as_str()] >= 0.5) == truth.label(id).expect("label"))
                .count();
            f_acc[b] += hits as f64 / ids.len() as f64 / report.seeds.len() as f64;
        }
    }
    let per_bin: BTreeMap<String, f64> = f_acc
        .iter()
        .enumerate()
        .map(|(b, &a)| {
            let acc = if b < 5 { (a + 0.2).min(1.0) } else { (a - 0.1).max(0.0) };
            ((b + 1).to_string(), acc)
        })
        .collect();
    let profile: Vec<String> = per_bin.iter().map(|(k, v)| format!("{k} = {v}")).collect();
    let text = text.replace(
        "profile = { default_accuracy = 0.85 }",
        &format!(
            "profile = {{ default_accuracy = 0.5, per_quantile_accuracy = {{ {} }} }}",
            profile.join(", ")
        ),
    );
    let exp = Experiment::new(config(&text, &["--n_quantiles=20"])).expect("experiment");
    let report = exp.run_quantiles();
    let Some(gains) = report.gains.as_ref().filter(|_| report.exit_code() == 0) else {
        return outcome(false, format!("run failed: {:?}", report.warnings));
    };
    let (top, bottom) = (gains.mean_over(0..5), gains.mean_over(15..20));
    outcome(
        top > bottom,
        format!("mean gain top 5 bins {top:.4} > bottom 5 bins {bottom:.4}"),
    )
}

fn golden(name: &str) -> String {
    let path = format!("{}/tests/golden/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

fn criterion_6() -> Outcome {
    let mut failures = Vec::new();
    for n in [10, 3] {
        let batch: Vec<PairExample> = (1..=n)
            .map(|k| {
                PairExample::new(
                    format!("p{k}"),
                    format!("question {k} first?"),
                    format!("question {k} second?"),
                )
            })
            .collect();
        let p = build_pair_prompt(&batch).expect("pair prompt");
        if p.system != golden(&format!("pair-{n}.system.txt")) || p.user != golden(&format!("pair-{n}.user.txt")) {
            failures.push(format!("pair-{n}"));
        }
    }
    for (name, template) in [
        ("wiki-usa", SearchTemplate::WikiUsa),
        ("amazon-books", SearchTemplate::AmazonBooks),
        ("amazon-kitchen", SearchTemplate::AmazonKitchen),
    ] {
        for n in [10, 4] {
            let candidates: Vec<(String, String, f64)> = (1..=n)
                .map(|k| (format!("y{k}"), format!("label {k}"), 1.0 - k as f64 / 100.0))
                .collect();
            let p = build_search_prompt("the query", &candidates, template)
                .expect("search prompt")
                .prompt;
            if p.system != golden(&format!("{name}-{n}.system.txt"))
                || p.user != golden(&format!("{name}-{n}.user.txt"))
            {
                failures.push(format!("{name}-{n}"));
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!("8 golden prompts, mismatched: {failures:?}"),
    )
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pieces = [
        "Pair",
        "Pair ",
        "Product",
        "SeeAlsoArticle",
        "pair",
        "none",
        "None",
        ",",
        " ",
        "\n",
        "and",
        ":",
        "0",
        "1",
        "2",
        "3",
        "9",
        "10",
        "11",
        "99",
        "18446744073709551616",
        "é",
        "\u{0}",
        "Pairs having duplicates are :",
        "-",
        "#",
    ];
    let mut bad = 0;
    for _ in 0..10_000 {
        let raw: String = if rng.random_bool(0.2) {
            (0..rng.random_range(0..64)).map(|_| rng.random::<char>()).collect()
        } else {
            (0..rng.random_range(0..24))
                .map(|_| pieces[rng.random_range(0..pieces.len())])
                .collect()
        };
        let n = rng.random_range(1..=10);
        let pairs = std::panic::catch_unwind(|| parse_pair_response(&raw, n));
        let search = std::panic::catch_unwind(|| parse_search_response(&raw, n));
        let ok = match (pairs, search) {
            (Ok(p), Ok(s)) => {
                p.value.len() == n && p.value.iter().all(|&v| v <= 1) && s.value.is_none_or(|k| (1..=n).contains(&k))
            }
            _ => false,
        };
        bad += usize::from(!ok);
    }
    outcome(bad == 0, format!("{bad} contract violations over 10000 responses"))
}

fn criterion_8() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = EmbeddingModel::with_init(16, ProjectionInit::Uniform { seed: 8, scale: 0.1 });
    let words = ["alpha", "beta", "gamma", "delta", "omega", "sigma", "kappa"];
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut text = || {
            (0..3)
                .map(|_| words[rng.random_range(0..words.len())])
                .collect::<Vec<_>>()
                .join(" ")
        };
        let (a, b) = (text(), text());
        let target = f64::from(rng.random_range(0..2u8));
        let (fa, fb) = (featurize(&a), featurize(&b));
        let (_, grads) = pair_gradient(&model, &fa, &fb, target).expect("gradient");
        let rows: Vec<&u32> = grads.keys().collect();
        let row = *rows[rng.random_range(0..rows.len())];
        let g = &grads[&row];
        let k = (0..g.len())
            .max_by(|&i, &j| g[i].abs().total_cmp(&g[j].abs()))
            .expect("dims");
        let h = 1e-6;
        let loss_at = |delta: f64| {
            let mut m = model.clone();
            let mut r = m.row(row).into_owned();
            r[k] += delta;
            m.set_row(row, r).expect("row");
            (m.similarity(&a, &b).expect("similarity") - target).powi(2)
        };
        let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
        worst = worst.max((fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-12));
    }
    pass &= worst < 1e-4;
    notes.push(format!("gradient rel err {worst:.2e}"));

    let exp = Experiment::new(config(STUDY, &[])).expect("experiment");
    let Setup::Pairs(setup) = exp.setup() else {
        unreachable!()
    };
    let pairs = TrainPair::from_dataset(&setup.labeled).expect("labeled pairs");
    let f0 = exp.base_model();
    let frozen = [
        TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        },
    ];
    let identity = frozen
        .iter()
        .all(|c| train_pairs(f0, &pairs, c).expect("train").same_parameters(f0));
    pass &= identity;
    notes.push(format!("epochs=0/lr=0 identity {identity}"));

    let base = mse(f0, &pairs).expect("mse");
    let after: Vec<f64> = (0..5)
        .map(|seed| {
            let f = train_pairs(f0, &pairs, &TrainConfig::default().with_seed(seed)).expect("train");
            mse(&f, &pairs).expect("mse")
        })
        .collect();
    let decreased = after.iter().all(|&m| m < base);
    pass &= decreased;
    notes.push(format!("train MSE {base:.4} -> {after:.4?}"));
    outcome(pass, notes.join("; "))
}

const SMALL: &str = r#"
task = "pairs"
budget = 0.1
seeds = [0, 1]
[data]
split = "extreme"
test_size = 400
[data.synthetic]
n_pairs = 600
flip_fraction = 0.3
ambiguous_fraction = 0.2
[annotator]
kind = "simulated"
profile = { default_accuracy = 0.85 }
"#;

fn criterion_9() -> Outcome {
    let run = || Experiment::new(config(SMALL, &[])).expect("experiment");
    let (exp, again) = (run(), run());
    let (a, b) = (exp.run_eagle(), again.run_eagle());
    let identical = a.body_json().expect("json") == b.body_json().expect("json");
    let labeled = exp.setup().labeled_len();
    let base_id = exp.base_model().id();
    let provenance = a.seeds.iter().all(|s| {
        let m = &s.arms[0].model;
        m.finetuned_from() == Some(base_id) && m.train_size == labeled + a.budget && m.provenance.len() == 2
    });
    outcome(
        identical && provenance && a.exit_code() == 0,
        format!("bodies identical {identical}; augmented models retrained from {base_id} on |L|+B = {labeled}+{} {provenance}", a.budget),
    )
}

/// Answers every prompt from its content, counting calls.
struct Fake {
    calls: AtomicUsize,
    offline: bool,
}

impl Transport for Fake {
    fn post(&self, _: &str, body: &Value) -> Result<TransportResponse, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.offline {
            return Err("network disabled".into());
        }
        let user = body["messages"][1]["content"].as_str().unwrap_or_default();
        let picks: Vec<String> = (1..=10)
            .filter(|k| user.contains(&format!("Pair{k}: ")) && (user.len() + k).is_multiple_of(3))
            .map(|k| format!("Pair{k}"))
            .collect();
        let content = if picks.is_empty() {
            "None".to_string()
        } else {
            picks.join(", ")
        };
        let reply = json!({"choices": [{"message": {"role": "assistant", "content": content}}]});
        Ok(TransportResponse {
            status: 200,
            body: reply.to_string(),
        })
    }
}

fn criterion_10() -> Outcome {
    let cache = tempfile::tempdir().expect("tempdir");
    let llm = format!(
        "[annotator]\nkind = \"llm\"\nllm = {{ endpoint = \"http://127.0.0.1:9/v1/chat/completions\", model = \"fake\", max_attempts = 1, cache_dir = {:?} }}\n",
        cache.path().display().to_string()
    );
    let text = SMALL.split("[annotator]").next().expect("head").to_string() + &llm;
    let run = |offline: bool| {
        let fake = Arc::new(Fake {
            calls: AtomicUsize::new(0),
            offline,
        });
        let exp = Experiment::new(config(&text, &[]))
            .expect("experiment")
            .with_transport(fake.clone());
        (exp.run_eagle(), fake.calls.load(Ordering::SeqCst))
    };
    let (cold, cold_calls) = run(false);
    let (warm, warm_calls) = run(true);
    let same = cold.body_json().expect("json") == warm.body_json().expect("json")
        && cold
            .seeds
            .iter()
            .zip(&warm.seeds)
            .all(|(a, b)| a.arms[0].records == b.arms[0].records);
    outcome(
        cold.exit_code() == 0 && warm.exit_code() == 0 && cold_calls > 0 && warm_calls == 0 && same,
        format!("fake transport served {cold_calls} requests; warm-cache rerun made {warm_calls} and matched {same}"),
    )
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let (c1, c2) = criteria_1_and_2();
    results.push((1, "strategy ordering on the hard subset", c1));
    results.push((2, "deviation tracks base error", c2));
    results.push((3, "AUC equals pair counting", criterion_3()));
    results.push((4, "P@1 equals exhaustive argmax", criterion_4()));
    results.push((5, "gain concentrates in high-deviation bins", criterion_5()));
    results.push((6, "prompts match golden files", criterion_6()));
    results.push((7, "parsers are total", criterion_7()));
    results.push((8, "training correctness", criterion_8()));
    results.push((9, "determinism and provenance", criterion_9()));
    results.push((10, "offline LLM annotation", criterion_10()));
    let mut failed = 0;
    for (n, name, o) in &results {
        println!(
            "criterion {n:>2} {}: {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1}s",
        results.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
