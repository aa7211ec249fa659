//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;

use dess_core::model::Mode;
use dess_core::{
    batch_solve, AdaptiveModel, BanditConfig, BanditState, Head, IndicatorConfig, Indicators, Interaction, ItemFeatureStore,
    ModelConfig, Observation, Side, SizeLadder, Task,
};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random bandit trajectory: config plus the observation sequence.
pub fn random_trajectory(seed: u64, gamma: f64) -> (BanditConfig, Vec<Observation>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.gen_range(1..=5);
    let arms = rng.gen_range(2..=4);
    let steps = rng.gen_range(1..=200);
    let config = BanditConfig {
        lambda: rng.gen_range(0.1..3.0),
        gamma,
        dim,
        arms,
        u_bound: 1.0,
        ..Default::default()
    };
    let history = (0..steps)
        .map(|_| {
            let raw: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let scale = rng.gen_range(0.0..=1.0) / norm;
            Observation {
                arm: rng.gen_range(0..arms),
                x: raw.iter().map(|v| v * scale).collect(),
                reward: rng.gen_range(0.0..=config.reward_max()),
            }
        })
        .collect();
    (config, history)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrajectoryReport {
    pub max_theta_err: f64,
    pub min_eig_v: f64,
    pub min_eig_v_tilde: f64,
    /// Smallest eigenvalue of `V - V_tilde`.
    pub min_eig_gap: f64,
    pub updates: usize,
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Replay `history` online, checking every arm against the closed form and
/// the matrix invariants after every update.
pub fn check_trajectory(config: BanditConfig, history: &[Observation]) -> TrajectoryReport {
    let mut state = BanditState::new(config).unwrap();
    let mut rep = TrajectoryReport {
        min_eig_v: f64::INFINITY,
        min_eig_v_tilde: f64::INFINITY,
        min_eig_gap: f64::INFINITY,
        ..Default::default()
    };
    for (l, obs) in history.iter().enumerate() {
        let x = state.context(obs.x.clone()).unwrap();
        state.update(obs.arm, &x, obs.reward).unwrap();
        rep.updates += 1;
        for (a, arm) in state.arms.iter().enumerate() {
            let oracle = batch_solve(history, config.gamma, config.lambda, a, l + 1);
            let err = (&arm.theta_hat - oracle).amax();
            rep.max_theta_err = rep.max_theta_err.max(err);
            rep.min_eig_v = rep.min_eig_v.min(min_eig(&arm.v));
            rep.min_eig_v_tilde = rep.min_eig_v_tilde.min(min_eig(&arm.v_tilde));
            rep.min_eig_gap = rep.min_eig_gap.min(min_eig(&(&arm.v - &arm.v_tilde)));
        }
    }
    rep
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_of(vs: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    for v in vs {
        for (a, b) in m.iter_mut().zip(v) {
            *a += b;
        }
    }
    m.iter().map(|a| a / vs.len() as f64).collect()
}

/// From-scratch IND and POD after replaying `prefix`, with `window` (None =
/// all history) applied to the distance sums.
pub fn diversity_oracle(
    prefix: &[(u64, u64)],
    features: &HashMap<u64, Vec<f64>>,
    dim: usize,
    window: Option<usize>,
) -> (HashMap<u64, f64>, HashMap<u64, f64>) {
    let zero = vec![0.0; dim];
    let feat = |i: u64| features.get(&i).cloned().unwrap_or_else(|| zero.clone());
    let mut by_user: HashMap<u64, Vec<u64>> = HashMap::new();
    let mut by_item: HashMap<u64, Vec<u64>> = HashMap::new();
    for &(u, i) in prefix {
        by_user.entry(u).or_default().push(i);
        by_item.entry(i).or_default().push(u);
    }
    let tail = |v: &[u64]| -> Vec<u64> {
        let start = window.map_or(0, |w| v.len().saturating_sub(w));
        v[start..].to_vec()
    };
    let q: HashMap<u64, Vec<f64>> = by_user
        .iter()
        .map(|(&u, items)| (u, mean_of(&items.iter().map(|&i| feat(i)).collect::<Vec<_>>(), dim)))
        .collect();
    let ind = by_user
        .iter()
        .map(|(&u, items)| {
            let value = if items.len() < 2 {
                0.0
            } else {
                let recent = tail(items);
                recent.iter().map(|&i| dist(&feat(i), &q[&u])).sum::<f64>() / recent.len() as f64
            };
            (u, value)
        })
        .collect();
    let pod = by_item
        .iter()
        .map(|(&i, users)| {
            let recent = tail(users);
            let value = if recent.len() < 2 {
                0.0
            } else {
                let qs: Vec<Vec<f64>> = recent.iter().map(|u| q[u].clone()).collect();
                let p = mean_of(&qs, dim);
                qs.iter().map(|v| dist(v, &p)).sum::<f64>() / qs.len() as f64
            };
            (i, value)
        })
        .collect();
    (ind, pod)
}

/// Largest relative error between analytic and central-difference gradients
/// over every dense parameter and every embedding coordinate used by `batch`.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-5)`.
pub fn gradient_check(model: &mut AdaptiveModel, batch: &[Interaction], mode: Mode, h: f64) -> f64 {
    for x in batch {
        model.ensure(Side::User, x.user);
        model.ensure(Side::Item, x.item);
    }
    let (_, grads) = model.loss_and_gradients(batch, mode);
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-5);
    let mut worst: f64 = 0.0;
    for k in 0..model.dense_params().len() {
        let orig = model.dense_params()[k];
        model.dense_params_mut()[k] = orig + h;
        let up = model.loss(batch, mode);
        model.dense_params_mut()[k] = orig - h;
        let down = model.loss(batch, mode);
        model.dense_params_mut()[k] = orig;
        worst = worst.max(rel(grads.dense[k], (up - down) / (2.0 * h)));
    }
    for side in Side::BOTH {
        for (id, g) in &grads.embeddings[side.index()] {
            for c in 0..g.len() {
                let orig = model.embedding(side, *id).unwrap()[c];
                model.embedding_mut(side, *id).unwrap()[c] = orig + h;
                let up = model.loss(batch, mode);
                model.embedding_mut(side, *id).unwrap()[c] = orig - h;
                let down = model.loss(batch, mode);
                model.embedding_mut(side, *id).unwrap()[c] = orig;
                worst = worst.max(rel(g[c], (up - down) / (2.0 * h)));
            }
        }
    }
    worst
}

/// A random batch over a small id space.
pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, ids: u64) -> Vec<Interaction> {
    (0..n)
        .map(|k| {
            let rating = rng.gen_range(1..=10) as f64 / 2.0;
            Interaction::new(rng.gen_range(0..ids), rng.gen_range(0..ids), rating, k as i64)
        })
        .collect()
}

/// A random indicator stream: `(user, item)` pairs, item features (some
/// items deliberately lack them) and the feature dimension.
pub fn random_case(seed: u64) -> (Vec<(u64, u64)>, HashMap<u64, Vec<f64>>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.gen_range(1..=4);
    let items = rng.gen_range(2..15u64);
    let users = rng.gen_range(1..10u64);
    let mut features = HashMap::new();
    for i in 0..items {
        if rng.gen_bool(0.9) {
            features.insert(i, (0..dim).map(|_| f64::from(rng.gen_range(0..3u8))).collect());
        }
    }
    let n = rng.gen_range(1..150);
    let stream = (0..n).map(|_| (rng.gen_range(0..users), rng.gen_range(0..items))).collect();
    (stream, features, dim)
}

/// Largest gap between the incremental indicators and [`diversity_oracle`]
/// over every prefix of a random stream.
pub fn indicator_error(seed: u64, window: Option<usize>) -> f64 {
    let (stream, features, dim) = random_case(seed);
    let store = ItemFeatureStore::from_pairs(features.clone()).unwrap();
    let mut state = Indicators::new(IndicatorConfig { window, ..Default::default() }, store);
    let mut worst: f64 = 0.0;
    for (k, &(u, i)) in stream.iter().enumerate() {
        state.record(u, i);
        let (ind, pod) = diversity_oracle(&stream[..=k], &features, dim, window);
        for (id, v) in &ind {
            worst = worst.max((state.diversity(*id, Side::User) - v).abs());
        }
        for (id, v) in &pod {
            worst = worst.max((state.diversity(*id, Side::Item) - v).abs());
        }
    }
    worst
}

/// A small random model (sizes <= 8, hidden <= 16) with random dense
/// parameters and embeddings, some ids already expanded, and a batch of 2 to 4
/// interactions with pairwise distinct users and pairwise distinct items.
pub fn random_small_model(seed: u64, head: Head, task: Task) -> (AdaptiveModel, Vec<Interaction>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sizes: Vec<usize> = (1..=8).filter(|_| rng.gen_bool(0.4)).collect();
    if sizes.is_empty() {
        sizes.push(rng.gen_range(1..=8));
    }
    let config = ModelConfig { head, task, hidden: rng.gen_range(1..=16), seed, ..Default::default() };
    let mut model = AdaptiveModel::new(config, SizeLadder::new(sizes).unwrap()).unwrap();
    for p in model.dense_params_mut() {
        *p = rng.gen_range(-0.8..0.8);
    }
    let n = rng.gen_range(2..=4u64);
    let batch: Vec<Interaction> = (0..n)
        .map(|k| Interaction::new(10 + k, 20 + (k + 1) % n, rng.gen_range(1..=10) as f64 / 2.0, k as i64))
        .collect();
    let top = model.ladder().top_rung();
    for x in &batch {
        for side in Side::BOTH {
            let id = x.id(side);
            model.ensure(side, id);
            while model.rung(side, id).unwrap() < top && rng.gen_bool(0.5) {
                model.expand(side, id).unwrap();
            }
            for v in model.embedding_mut(side, id).unwrap() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
    }
    (model, batch)
}
