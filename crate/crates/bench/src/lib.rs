//! Fixtures shared by the criterion benchmarks.

use han_core::bilinear::{BlockParams, PoolingActivation};
use han_core::corpus::{gen_synthetic, Dataset, EncodedLabels};
use han_core::{HanModel, Matrix, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::new(rows, cols, data).expect("finite values")
}

/// Keys, values, queries and block weights for an `n x d` block evaluation.
pub fn block_inputs(n: usize, d: usize, activation: PoolingActivation) -> (Matrix, Matrix, Matrix, BlockParams) {
    let params = BlockParams::xavier(d, activation, &mut ChaCha8Rng::seed_from_u64(1));
    (random_matrix(n, d, 2), random_matrix(n, d, 3), random_matrix(n, d, 4), params)
}

/// Emissions, transitions and start scores for an `n`-step, `labels`-way CRF.
pub fn crf_inputs(n: usize, labels: usize) -> (Matrix, Matrix, Matrix) {
    (random_matrix(n, labels, 5), random_matrix(labels, labels, 6), random_matrix(1, labels, 7))
}

/// A fresh model with hidden size `d` over a synthetic corpus.
pub fn model_and_data(d: usize) -> (HanModel, Dataset) {
    let data = gen_synthetic(0, 32, 4, 3, 12);
    let config = ModelConfig {
        hidden: d,
        embedding: d,
        ..Default::default()
    };
    let model = HanModel::for_dataset(config, &data, &mut ChaCha8Rng::seed_from_u64(0)).expect("valid config");
    (model, data)
}

/// Token ids and gold labels of the longest utterance in `data`.
pub fn longest_example(model: &HanModel, data: &Dataset) -> (Vec<usize>, EncodedLabels) {
    let u = data.utterances.iter().max_by_key(|u| u.len()).expect("non-empty corpus");
    (model.encode_tokens(&u.tokens), data.index().encode(u).expect("labels from the same corpus"))
}
