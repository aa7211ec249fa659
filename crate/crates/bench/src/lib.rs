//! Shared fixtures for the criterion benches.

use dess_core::data::{generate_ratings, SyntheticRatings};
use dess_core::{BanditConfig, BanditState, ContextVector, Interaction, ItemFeatureStore};

/// A bandit that has already absorbed `steps` updates.
pub fn warmed_bandit(config: BanditConfig, steps: usize) -> BanditState {
    let mut bandit = BanditState::new(config).expect("valid config");
    for (k, x) in contexts(config.dim, config.u_bound, steps).iter().enumerate() {
        let arm = bandit.select_arm(x);
        bandit.update(arm, x, (k % 2) as f64 * config.reward_max()).expect("reward in range");
    }
    bandit
}

/// Deterministic contexts on the nonnegative orthant of the radius-`u` sphere.
pub fn contexts(dim: usize, u: f64, n: usize) -> Vec<ContextVector> {
    (0..n)
        .map(|k| {
            let raw: Vec<f64> = (0..dim).map(|j| 1.0 + ((k * 31 + j * 17) % 97) as f64).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            ContextVector::new(raw.iter().map(|v| v / norm * u).collect(), u).expect("on the sphere")
        })
        .collect()
}

/// A small MovieLens-format stream with genre features.
pub fn stream(interactions: usize) -> (Vec<Interaction>, ItemFeatureStore) {
    let users = (interactions / 100).max(1);
    let cfg = SyntheticRatings { users, items: 400.max(users), interactions, ..Default::default() };
    generate_ratings(&cfg).expect("feasible generator settings")
}
