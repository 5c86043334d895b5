//! Seeded fixtures shared by the benchmarks.

use ndarray::Array2;
use protocurate::embedding::unify_all;
use protocurate::{generate_corpus, CurationSpace, MixtureSpec, PrototypeBank};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.random::<f64>())
}

/// Unified embeddings of an `n`-sample default corpus.
pub fn unified_corpus(n: usize) -> Array2<f64> {
    let corpus = generate_corpus(&MixtureSpec { n_samples: n, ..MixtureSpec::default() }).expect("valid spec");
    unify_all(&corpus.records, CurationSpace::default()).expect("finite embeddings")
}

pub fn warm_bank(warm: &Array2<f64>, k: usize) -> PrototypeBank {
    protocurate::init_kmeans(warm.view(), k, 100, 0).expect("warm-up succeeds")
}
