//! Fixtures for the benchmarks under `benches/`.

use eagle_core::dataset::{
    generate_synthetic_pairs, generate_synthetic_search, PairDataset, SearchDataset, SyntheticSearchSpec, SyntheticSpec,
};
use eagle_core::encoder::{EmbeddingModel, TrainPair};
use eagle_core::eval::pair_scores;

pub fn pairs(n: usize) -> PairDataset {
    generate_synthetic_pairs(&SyntheticSpec::new(n, 0.3, 0)).expect("synthetic pairs")
}

pub fn train_pairs(n: usize) -> Vec<TrainPair> {
    TrainPair::from_dataset(&pairs(n)).expect("labeled")
}

/// Base-model scores and labels of `n` synthetic pairs.
pub fn scored(n: usize) -> (Vec<f64>, Vec<u8>) {
    let data = pairs(n);
    let scores = pair_scores(&EmbeddingModel::base(), &data).expect("scores");
    (scores, data.labels().expect("labeled"))
}

pub fn search(n_queries: usize, n_labels: usize) -> SearchDataset {
    generate_synthetic_search(&SyntheticSearchSpec::new(n_queries, n_labels, 0))
        .expect("synthetic search")
        .dataset
}
