//! Shared fixtures for the benchmarks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dmcl_core::data::{gen_synthetic, Corpus, SynthConfig};
use dmcl_core::encoders::{EncoderConfig, EncoderParams, TeacherSnapshot};

pub struct Fixture {
    pub corpus: Corpus,
    pub params: EncoderParams,
    pub teacher: TeacherSnapshot,
}

/// A batch-ready corpus with matching encoder parameters.
pub fn fixture(batch: usize) -> Fixture {
    let corpus = gen_synthetic(&SynthConfig {
        num_contexts: 4,
        pairs_per_context: batch.div_ceil(4).max(2),
        vocab_size: 64,
        tokens_per_sentence: 8,
        grid_side: 2,
        patch_width: 8,
        noise_scale: 0.1,
        seed: 1,
    })
    .expect("valid config");
    let params = EncoderParams::init(EncoderConfig::default(), 1).expect("valid config");
    let teacher = TeacherSnapshot::of(&params);
    Fixture {
        corpus,
        params,
        teacher,
    }
}

/// Deterministic feature-space vectors for loss-only benchmarks.
pub fn random_vectors(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}
