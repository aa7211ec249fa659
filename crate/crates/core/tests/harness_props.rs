use std::collections::HashSet;

use dess_core::harness::{segment_stream, BanditPolicy, KeepPolicy, SearchPolicy, StreamRun};
use dess_core::{
    AdaptiveModel, BanditConfig, IndicatorConfig, Indicators, Interaction, ItemFeatureStore, ModelConfig, RewardConfig,
    Segment, SegmentMetrics, Side, SizeLadder,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn stream(seed: u64, n: usize) -> Vec<Interaction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| Interaction::new(rng.gen_range(0..25), rng.gen_range(0..40), rng.gen_range(1..=10) as f64 / 2.0, k as i64))
        .collect()
}

fn model(ladder: SizeLadder) -> AdaptiveModel {
    AdaptiveModel::new(ModelConfig { hidden: 8, batch: 25, seed: 4, ..Default::default() }, ladder).unwrap()
}

fn run_with<P: SearchPolicy>(policy: P, ladder: SizeLadder, segments: &[Segment]) -> (StreamRun<P>, Vec<SegmentMetrics>) {
    let indicators = Indicators::new(IndicatorConfig::default(), ItemFeatureStore::default());
    let mut run = StreamRun::new(model(ladder), policy, indicators, RewardConfig::default());
    let metrics = run.run(segments).unwrap();
    (run, metrics)
}

fn bandit() -> BanditPolicy {
    BanditPolicy::new(BanditConfig::default()).unwrap()
}

fn ladder() -> SizeLadder {
    SizeLadder::new(vec![2, 4, 8]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn segments_partition_the_stream(n in 1usize..400, len in 2usize..60, frac in 0.05f64..0.95) {
        let s = stream(n as u64, n);
        match segment_stream(&s, len, frac) {
            Ok(segments) => {
                prop_assert_eq!(segments.len(), n / len);
                let flat: Vec<Interaction> = segments.iter().flat_map(|g| g.all().cloned()).collect();
                prop_assert_eq!(&flat[..], &s[..segments.len() * len]);
                for (i, g) in segments.iter().enumerate() {
                    prop_assert_eq!(g.index, i + 1);
                    prop_assert_eq!(g.train.len(), (frac * len as f64).ceil() as usize);
                }
            }
            Err(_) => prop_assert!(n < len),
        }
    }

    #[test]
    fn sizes_and_memory_only_grow(seed in any::<u64>()) {
        let segments = segment_stream(&stream(seed, 600), 100, 0.8).unwrap();
        let indicators = Indicators::new(IndicatorConfig::default(), ItemFeatureStore::default());
        let mut run = StreamRun::new(model(ladder()), bandit(), indicators, RewardConfig::default());
        let mut rungs: Vec<(Side, u64, usize)> = Vec::new();
        let mut last_params = 0;
        for (i, segment) in segments.iter().enumerate() {
            if i > 0 {
                run.policy_update_pass(&segments[i - 1]).unwrap();
            }
            let m = run.model_update_pass(segment).unwrap();
            prop_assert!(m.emb_params >= last_params);
            last_params = m.emb_params;
            for &(side, id, rung) in &rungs {
                prop_assert!(run.model.rung(side, id).unwrap() >= rung);
            }
            rungs = Side::BOTH
                .into_iter()
                .flat_map(|side| run.model.ids(side).into_iter().map(move |id| (side, id)))
                .map(|(side, id)| (side, id, run.model.rung(side, id).unwrap()))
                .collect();
        }
    }

    #[test]
    fn proxy_regret_is_bounded_by_decisions(seed in any::<u64>()) {
        let segments = segment_stream(&stream(seed, 400), 100, 0.8).unwrap();
        let (run, metrics) = run_with(bandit(), ladder(), &segments);
        for w in metrics.windows(2) {
            prop_assert!(w[1].regret_user >= w[0].regret_user);
            prop_assert!(w[1].regret_item >= w[0].regret_item);
        }
        for side in 0..2 {
            prop_assert!(run.regret[side] <= run.decisions[side] as f64);
        }
        let tally = run.rewards;
        prop_assert_eq!(tally.zeros + tally.ones + tally.other, run.decisions[0] + run.decisions[1]);
        prop_assert_eq!(tally.other, 0);
    }
}

#[test]
fn future_segments_do_not_leak_into_earlier_metrics() {
    let segments = segment_stream(&stream(8, 800), 100, 0.8).unwrap();
    let (_, full) = run_with(bandit(), ladder(), &segments);
    let (_, prefix) = run_with(bandit(), ladder(), &segments[..5]);
    assert_eq!(&full[..5], &prefix[..]);
}

#[test]
fn first_segment_trains_without_decisions() {
    let segments = segment_stream(&stream(2, 300), 100, 0.8).unwrap();
    let (run, metrics) = run_with(bandit(), ladder(), &segments[..1]);
    assert_eq!(run.decisions, [0, 0]);
    assert_eq!(metrics[0].regret_user + metrics[0].regret_item, 0.0);
}

#[test]
fn bandit_on_a_single_size_ladder_matches_the_fixed_baseline() {
    let segments = segment_stream(&stream(6, 500), 100, 0.8).unwrap();
    let (kept, fixed) = run_with(KeepPolicy::default(), SizeLadder::fixed(4), &segments);
    let (searched, dess) = run_with(bandit(), SizeLadder::fixed(4), &segments);
    assert_eq!(fixed, dess);
    assert_eq!(searched.decisions, [0, 0]);
    assert_eq!(kept.model.to_text(), searched.model.to_text());
}

#[test]
fn keep_policy_stores_every_trained_id_at_its_fixed_size() {
    let segments = segment_stream(&stream(5, 500), 100, 0.8).unwrap();
    let (run, metrics) = run_with(KeepPolicy::default(), SizeLadder::fixed(8), &segments);
    let mut users = HashSet::new();
    let mut items = HashSet::new();
    for (segment, m) in segments.iter().zip(&metrics) {
        for x in &segment.train {
            users.insert(x.user);
            items.insert(x.item);
        }
        assert_eq!(m.emb_params, 8 * (users.len() + items.len()));
    }
    assert_eq!(run.expansions, [0, 0]);
}
