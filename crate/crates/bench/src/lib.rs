//! Input builders shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taxocap::contrastive::{Batch, ModelDims};
use taxocap::eval::{RelevanceSet, ScoreMatrix};
use taxocap::Matrix;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// A batch of `n` distinct-label pairs with the feature sizes of `dims`.
pub fn batch(dims: ModelDims, n: usize, seed: u64) -> Batch {
    Batch {
        x: random_matrix(n, dims.d_x, seed),
        c: random_matrix(n, dims.d_c, seed ^ 1),
        labels: (0..n).collect(),
    }
}

pub fn dims(n_classes: usize) -> ModelDims {
    ModelDims {
        d_x: 32,
        d_c: 32,
        d_h: 8,
        d_e: 16,
        n_classes,
    }
}

/// Random scores with `relevant` relevant candidates per query.
pub fn scored_queries(queries: usize, candidates: usize, relevant: usize, seed: u64) -> (ScoreMatrix, RelevanceSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = (0..queries * candidates).map(|_| rng.random_range(-1.0..1.0)).collect();
    let sets = (0..queries)
        .map(|_| (0..relevant).map(|_| rng.random_range(0..candidates)).collect())
        .collect();
    (
        ScoreMatrix::new(queries, candidates, scores).expect("finite scores"),
        RelevanceSet::new(sets, candidates).expect("indices in range"),
    )
}
