mod common;

use common::{gradient_check, random_small_model};
use dess_core::model::Mode;
use dess_core::{AdaptiveModel, Head, Interaction, ModelConfig, Side, SizeLadder, Task};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HEADS: [Head; 2] = [Head::Mlp, Head::Mf];
const TASKS: [Task; 2] = [Task::Binary, Task::Multiclass];

fn stream(seed: u64, n: usize, users: u64, items: u64) -> Vec<Interaction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| Interaction::new(rng.gen_range(0..users), rng.gen_range(0..items), rng.gen_range(1..=10) as f64 / 2.0, k as i64))
        .collect()
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..120u64 {
        let (head, task) = (HEADS[seed as usize % 2], TASKS[seed as usize / 2 % 2]);
        let mode = if seed % 3 == 0 { Mode::Eval } else { Mode::Train };
        let (mut model, batch) = random_small_model(seed, head, task);
        let err = gradient_check(&mut model, &batch, mode, 1e-5);
        assert!(err < 1e-4, "seed {seed} ({head}, {task}, {mode:?}): relative error {err:.3e}");
    }
}

#[test]
fn batch_norm_outputs_are_standardized() {
    for (k, head) in HEADS.into_iter().enumerate() {
        let config = ModelConfig { head, hidden: 8, seed: k as u64, ..Default::default() };
        let mut model = AdaptiveModel::new(config, SizeLadder::new(vec![4, 8]).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(40 + k as u64);
        for p in model.dense_params_mut() {
            *p = rng.gen_range(-0.5..0.5);
        }
        let batch = stream(k as u64, 64, 40, 30);
        for x in &batch {
            for side in Side::BOTH {
                let id = x.id(side);
                model.ensure(side, id);
                if model.rung(side, id) == Some(0) && rng.gen_bool(0.4) {
                    model.expand(side, id).unwrap();
                }
                for v in model.embedding_mut(side, id).unwrap() {
                    *v = rng.gen_range(-3.0..3.0);
                }
            }
        }
        for side in Side::BOTH {
            let rows = model.normalized_side_batch(side, &batch);
            let n = rows.len() as f64;
            for c in 0..rows[0].len() {
                let mean = rows.iter().map(|r| r[c]).sum::<f64>() / n;
                let var = rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n;
                assert!(mean.abs() < 1e-6, "{side:?} channel {c}: mean {mean}");
                assert!((var - 1.0).abs() < 1e-4, "{side:?} channel {c}: variance {var}");
            }
        }
    }
}

#[test]
fn training_is_bit_identical_under_a_seed() {
    let run = || {
        let config = ModelConfig { hidden: 16, batch: 32, seed: 9, ..Default::default() };
        let mut model = AdaptiveModel::new(config, SizeLadder::default()).unwrap();
        let data = stream(3, 320, 30, 20);
        let mut losses = Vec::new();
        for (k, batch) in data.chunks(32).enumerate() {
            if k == 4 {
                model.expand(Side::User, data[0].user).unwrap();
            }
            losses.push(model.train_step(batch).to_bits());
        }
        (losses, model.evaluate(&data))
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn expansion_preserves_eval_predictions(seed in any::<u64>(), h in 0usize..2, t in 0usize..2, steps in 0usize..4) {
        let config = ModelConfig { head: HEADS[h], task: TASKS[t], hidden: 8, batch: 16, seed, ..Default::default() };
        let mut model = AdaptiveModel::new(config, SizeLadder::new(vec![2, 4, 8, 16]).unwrap()).unwrap();
        let data = stream(seed, 16 * steps, 12, 12);
        for batch in data.chunks(16) {
            model.train_step(batch);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..8 {
            let (user, item) = (rng.gen_range(0..12), rng.gen_range(0..12));
            let side = if rng.gen_bool(0.5) { Side::User } else { Side::Item };
            let id = if side == Side::User { user } else { item };
            if model.at_top(side, id) {
                continue;
            }
            let before = model.forward(user, item, Mode::Eval);
            let (emb_before, _) = model.param_count();
            model.expand(side, id).unwrap();
            let after = model.forward(user, item, Mode::Eval);
            for (a, b) in before.iter().zip(&after) {
                prop_assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
            prop_assert!(model.param_count().0 > emb_before);
        }
    }

    #[test]
    fn temporary_tuning_leaves_the_model_untouched(seed in any::<u64>(), h in 0usize..2) {
        let config = ModelConfig { head: HEADS[h], hidden: 8, batch: 16, seed, ..Default::default() };
        let mut model = AdaptiveModel::new(config, SizeLadder::new(vec![2, 4, 8]).unwrap()).unwrap();
        let data = stream(seed, 48, 6, 6);
        for batch in data.chunks(16) {
            model.train_step(batch);
        }
        let before = model.to_text();
        let first = model.temp_outcome(&data[0]);
        prop_assert_eq!(model.to_text(), before);
        prop_assert_eq!(model.temp_outcome(&data[0]), first);
        let (old, new) = model.temp_evaluate(&data[1], false, Side::Item);
        prop_assert_eq!(old, new);
    }
}
