#![allow(dead_code)]

use das_core::synth::{generate, SynthConfig, SynthWorld};
use das_core::trainer::TrainConfig;

/// A world small enough to train in well under a second.
pub fn tiny_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        n_users: 60,
        n_ads: 40,
        n_clusters: 4,
        d_sem_user: 12,
        d_sem_ad: 8,
        latent_dim: 4,
        n_interactions: 3000,
        seed,
        ..SynthConfig::default()
    }
}

pub fn tiny_world(seed: u64) -> SynthWorld {
    generate(&tiny_synth(seed)).expect("tiny world")
}

pub fn tiny_train() -> TrainConfig {
    TrainConfig {
        levels: 2,
        codebook_size: 8,
        code_dim: 4,
        batch_size: 16,
        l_neg: 4,
        lr: 5e-3,
        epochs: 2,
        bank_capacity: 4,
        encoder_hidden: vec![16],
        id_dim: 4,
        tower_hidden: 16,
        kmeans_iters: 10,
        ..TrainConfig::default()
    }
}
