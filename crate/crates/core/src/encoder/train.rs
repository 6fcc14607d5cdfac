use fnv::FnvHashMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{dot, featurize, EmbeddingModel, FeatureVector, Provenance};
use crate::dataset::PairDataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    /// Decays linearly from the base rate towards zero over all steps.
    #[default]
    LinearDecay,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 2,
            batch_size: 32,
            lr_schedule: LrSchedule::LinearDecay,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::LinearDecay => self.learning_rate * (1.0 - step as f64 / total.max(1) as f64),
        }
    }
}

/// One training pair with a real-valued target.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub id: String,
    pub text_a: String,
    pub text_b: String,
    pub target: f64,
}

impl TrainPair {
    pub fn from_dataset(data: &PairDataset) -> Result<Vec<TrainPair>> {
        data.iter()
            .map(|e| {
                Ok(TrainPair {
                    id: e.id.clone(),
                    text_a: e.text_a.clone(),
                    text_b: e.text_b.clone(),
                    target: f64::from(e.require_label()?),
                })
            })
            .collect()
    }
}

struct Prepared {
    a: FeatureVector,
    b: FeatureVector,
    target: f64,
}

/// Squared error of one pair and its gradient with respect to every
/// projection row the pair touches. The normalization Jacobian is included.
pub fn pair_gradient(
    model: &EmbeddingModel,
    a: &FeatureVector,
    b: &FeatureVector,
    target: f64,
) -> Result<(f64, FnvHashMap<u32, Vec<f64>>)> {
    let mut grads = FnvHashMap::default();
    let loss = accumulate(model, a, b, target, 1.0, &mut grads)?;
    Ok((loss, grads))
}

fn accumulate(
    model: &EmbeddingModel,
    a: &FeatureVector,
    b: &FeatureVector,
    target: f64,
    weight: f64,
    grads: &mut FnvHashMap<u32, Vec<f64>>,
) -> Result<f64> {
    let n = model.n_dims();
    let va = model.project(a);
    let vb = model.project(b);
    let na = dot(&va, &va).sqrt();
    let nb = dot(&vb, &vb).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::EmptyEmbedding {
            id: "training pair".into(),
        });
    }
    let ha: Vec<f64> = va.iter().map(|x| x / na).collect();
    let hb: Vec<f64> = vb.iter().map(|x| x / nb).collect();
    let s = dot(&ha, &hb);
    let r = s - target;

    // d/dv of (s - t)^2 through h = v / |v|: 2r (I - h h^T) h_other / |v|
    let ga: Vec<f64> = (0..n).map(|k| 2.0 * r * (hb[k] - s * ha[k]) / na).collect();
    let gb: Vec<f64> = (0..n).map(|k| 2.0 * r * (ha[k] - s * hb[k]) / nb).collect();
    for (fv, g) in [(a, &ga), (b, &gb)] {
        for &(i, c) in fv.entries() {
            let row = grads.entry(i).or_insert_with(|| vec![0.0; n]);
            row.iter_mut().zip(g).for_each(|(acc, gk)| *acc += weight * c * gk);
        }
    }
    Ok(r * r)
}

fn prepare(pairs: &[TrainPair]) -> Result<Vec<Prepared>> {
    pairs
        .iter()
        .map(|p| {
            let a = featurize(&p.text_a);
            let b = featurize(&p.text_b);
            if a.is_empty() || b.is_empty() {
                return Err(Error::EmptyEmbedding { id: p.id.clone() });
            }
            Ok(Prepared { a, b, target: p.target })
        })
        .collect()
}

/// Finetunes a copy of `base` on labeled pairs by minimizing the mean squared
/// error between similarity and label.
pub fn train(base: &EmbeddingModel, data: &PairDataset, config: &TrainConfig) -> Result<EmbeddingModel> {
    train_pairs(base, &TrainPair::from_dataset(data)?, config)
}

/// Mini-batch gradient descent over `pairs`.
///
/// Each epoch visits the pairs in a permutation drawn from `config.seed` and
/// the epoch index. A final batch shorter than `batch_size` is still used.
pub fn train_pairs(base: &EmbeddingModel, pairs: &[TrainPair], config: &TrainConfig) -> Result<EmbeddingModel> {
    if config.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    if config.learning_rate.is_nan() || config.learning_rate < 0.0 {
        return Err(Error::invalid("learning_rate must be non-negative"));
    }
    let prepared = prepare(pairs)?;
    let mut model = base.clone();

    let batches_per_epoch = prepared.len().div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.epochs;
    let mut step = 0;
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        for batch in order.chunks(config.batch_size) {
            let lr = config.lr_at(step, total_steps);
            step += 1;
            if lr == 0.0 {
                continue;
            }
            let mut grads = FnvHashMap::default();
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                let p = &prepared[i];
                accumulate(&model, &p.a, &p.b, p.target, w, &mut grads)?;
            }
            for (i, g) in grads {
                let row = model.row_mut(i);
                row.iter_mut().zip(&g).for_each(|(v, gk)| *v -= lr * gk);
            }
        }
    }

    let data_hash = {
        let mut h = Sha256::new();
        for p in pairs {
            h.update(p.id.as_bytes());
            h.update([0]);
            h.update(p.target.to_bits().to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    };
    let config_hash = config.hash();
    let from = base.id().to_string();
    let model_id = {
        let mut h = Sha256::new();
        h.update(from.as_bytes());
        h.update(config_hash.as_bytes());
        h.update(data_hash.as_bytes());
        format!("ft-{}", hex::encode(&h.finalize()[..8]))
    };
    model.push_provenance(Provenance::Finetuned {
        model_id,
        from,
        config_hash,
        data_hash,
        train_size: pairs.len(),
    });
    Ok(model)
}

/// Mean squared error between similarity and target.
pub fn mse(model: &EmbeddingModel, pairs: &[TrainPair]) -> Result<f64> {
    use rayon::prelude::*;
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("mse of no pairs".into()));
    }
    let total: f64 = pairs
        .par_iter()
        .map(|p| {
            let s = super::Encoder::similarity(model, &p.text_a, &p.text_b)
                .map_err(|_| Error::EmptyEmbedding { id: p.id.clone() })?;
            Ok((s - p.target).powi(2))
        })
        .collect::<Result<Vec<f64>>>()?
        .iter()
        .sum();
    Ok(total / pairs.len() as f64)
}
