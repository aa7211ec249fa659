//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{check_trajectory, gradient_check, indicator_error, random_small_model, random_trajectory};
use dess_core::config::{Mode as RunMode, RunConfig};
use dess_core::data::{generate_ratings, write_ratings, SyntheticRatings};
use dess_core::model::Mode;
use dess_core::runner::{run, run_stream};
use dess_core::synthetic::{loglog_slope, run_benchmark, BenchConfig, BenchPolicy, DriftSpec, EnvConfig, RegretCurve};
use dess_core::{AdaptiveModel, Head, Interaction, ItemFeatureStore, ModelConfig, Side, SizeLadder, Task};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn trajectories() -> (Verdict, Verdict) {
    let started = Instant::now();
    let mut theta_err: f64 = 0.0;
    let mut eig_ok = true;
    let mut worst_margin = f64::INFINITY;
    let mut updates = 0;
    for k in 0..50u64 {
        let gamma = [0.9, 0.99, 1.0][k as usize % 3];
        let (config, history) = random_trajectory(1000 + k, gamma);
        let rep = check_trajectory(config, &history);
        theta_err = theta_err.max(rep.max_theta_err);
        updates += rep.updates;
        let margin = (rep.min_eig_v - config.lambda)
            .min(rep.min_eig_v_tilde - config.lambda)
            .min(rep.min_eig_gap);
        worst_margin = worst_margin.min(margin);
        eig_ok &= rep.min_eig_v >= config.lambda - 1e-10
            && rep.min_eig_v_tilde >= config.lambda - 1e-10
            && rep.min_eig_gap >= -1e-10;
    }
    let elapsed = secs(started.elapsed());
    (
        verdict(
            theta_err < 1e-8 && elapsed < 5.0,
            format!("max |theta - batch| = {theta_err:.2e} (< 1e-8) over 50 trajectories, {elapsed:.2}s (< 5s)"),
        ),
        verdict(eig_ok, format!("{updates} updates, worst eigenvalue margin {worst_margin:.2e} (>= -1e-10)")),
    )
}

/// Least-squares slope of `ln y` on `ln x`.
fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0.ln()).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0.ln() - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0.ln() - mx) * (p.1.ln() - my)).sum();
    sxy / sxx
}

fn final_mean(cfg: &BenchConfig, policy: BenchPolicy, seeds: &[u64]) -> RegretCurve {
    run_benchmark(cfg, policy, seeds).unwrap().mean()
}

// Final regret at each horizon L, each run with its own `corollary_gamma(B_L, d, L)`.
fn sublinearity() -> Verdict {
    let started = Instant::now();
    let seeds: Vec<u64> = (0..10).collect();
    let horizons = [25_000, 30_000, 35_000, 40_000, 45_000, 50_000];
    let mut pass = true;
    let mut parts = Vec::new();
    for changes in [2usize, 5] {
        let bench = |horizon| BenchConfig {
            spec: DriftSpec::abrupt(changes, 0.6, horizon),
            env: EnvConfig::default(),
            lambda: 1.0,
            delta: 0.1,
            checkpoint_every: 1000,
        };
        let mut points = Vec::new();
        let mut within = None;
        for &l in &horizons {
            let curve = final_mean(&bench(l), BenchPolicy::Dess, &seeds);
            points.push((l as f64, curve.last()));
            if l == 50_000 {
                within = loglog_slope(&curve, 25_000, 50_000);
            }
        }
        let across = slope(&points);
        let dess = points.last().unwrap().1;
        let linucb = final_mean(&bench(50_000), BenchPolicy::LinUcb, &seeds).last();
        pass &= across < 0.95 && dess < linucb;
        parts.push(format!(
            "m={changes}: slope {across:.3} (< 0.95), regret at L {dess:.0} vs LinUCB {linucb:.0}, within-run slope {:.3}",
            within.unwrap_or(f64::NAN)
        ));
    }
    let elapsed = secs(started.elapsed());
    pass &= elapsed < 120.0;
    verdict(pass, format!("{}; {elapsed:.1}s (< 120s)", parts.join("; ")))
}

fn gradients() -> Verdict {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for k in 0..20u64 {
        let head = if k % 2 == 0 { Head::Mlp } else { Head::Mf };
        let task = if k % 4 < 2 { Task::Binary } else { Task::Multiclass };
        let (mut model, batch) = random_small_model(500 + k, head, task);
        let mode = if k % 3 == 0 { Mode::Eval } else { Mode::Train };
        worst = worst.max(gradient_check(&mut model, &batch, mode, 1e-5));
    }
    let elapsed = secs(started.elapsed());
    verdict(
        worst < 1e-4 && elapsed < 30.0,
        format!("worst relative error {worst:.2e} (< 1e-4) over 20 configs, {elapsed:.2}s (< 30s)"),
    )
}

fn warmed_model(cold_init: bool) -> AdaptiveModel {
    let config = ModelConfig { hidden: 32, batch: 64, cold_init, seed: 3, ..Default::default() };
    let mut model = AdaptiveModel::new(config, SizeLadder::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let stream: Vec<Interaction> = (0..640)
        .map(|k| Interaction::new(rng.gen_range(0..100), rng.gen_range(0..50), rng.gen_range(1..=5) as f64, k))
        .collect();
    for batch in stream.chunks(64) {
        model.train_step(batch);
    }
    model
}

fn expand_shift(cold_init: bool) -> Vec<f64> {
    let mut model = warmed_model(cold_init);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    (0..100u64)
        .map(|user| {
            let item = rng.gen_range(0..50);
            let before = model.forward(user, item, Mode::Eval);
            model.expand(Side::User, user).unwrap();
            let after = model.forward(user, item, Mode::Eval);
            before.iter().zip(&after).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        })
        .collect()
}

fn ewi() -> Verdict {
    let warm = expand_shift(false);
    let cold = expand_shift(true);
    let worst = warm.iter().cloned().fold(0.0, f64::max);
    let moved = cold.iter().filter(|&&d| d > 1e-3).count();
    verdict(
        worst < 1e-6 && moved >= 90,
        format!("warm max shift {worst:.2e} (< 1e-6) on 100 ids; cold init moved {moved}/100 by > 1e-3 (>= 90)"),
    )
}

fn indicators() -> Verdict {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for k in 0..1000u64 {
        let window = [Some(4), Some(64), None][k as usize % 3];
        worst = worst.max(indicator_error(7000 + k, window));
    }
    verdict(
        worst < 1e-9,
        format!("max |incremental - recomputed| = {worst:.2e} (< 1e-9) over 1000 streams, {:.2}s", secs(started.elapsed())),
    )
}

fn stream_config(mode: RunMode, fixed_size: Option<usize>) -> RunConfig {
    RunConfig { mode, fixed_size, ..Default::default() }
}

fn streaming() -> Verdict {
    let started = Instant::now();
    let (stream, _) = generate_ratings(&SyntheticRatings::default()).unwrap();
    let run_mode = |cfg: RunConfig| run_stream(&cfg, &stream, ItemFeatureStore::default()).unwrap();
    let small = run_mode(stream_config(RunMode::Fixed, Some(2)));
    let large = run_mode(stream_config(RunMode::Fixed, Some(128)));
    let dess = run_mode(stream_config(RunMode::DessFre, None));

    let acc_ok = dess.summary.mean_acc >= small.summary.mean_acc;
    let ratio = dess.summary.final_emb_params as f64 / large.summary.final_emb_params as f64;
    let regret: Vec<f64> = dess.metrics.iter().map(|m| m.regret_user + m.regret_item).collect();
    let second: Vec<f64> = regret.windows(3).map(|w| w[2] - 2.0 * w[1] + w[0]).collect();
    let mean_second = second.iter().sum::<f64>() / second.len().max(1) as f64;
    let elapsed = secs(started.elapsed());
    let pass = acc_ok && ratio <= 0.60 && mean_second <= 0.0 && elapsed < 600.0;
    verdict(
        pass,
        format!(
            "{} interactions, {} segments; (a) acc {:.4} vs fixed-2 {:.4}: {}; (b) params {} / fixed-128 {} = {:.4} (<= 0.60): {}; (c) mean second difference {:.2} (<= 0): {}; {elapsed:.1}s (< 600s)",
            stream.len(),
            dess.metrics.len(),
            dess.summary.mean_acc,
            small.summary.mean_acc,
            if acc_ok { "ok" } else { "fail" },
            dess.summary.final_emb_params,
            large.summary.final_emb_params,
            ratio,
            if ratio <= 0.60 { "ok" } else { "fail" },
            mean_second,
            if mean_second <= 0.0 { "ok" } else { "fail" },
        ),
    )
}

fn reproducibility() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticRatings { users: 200, items: 300, interactions: 12_000, ..Default::default() };
    let (stream, _) = generate_ratings(&spec).unwrap();
    let ratings = dir.path().join("ratings.csv");
    write_ratings(&ratings, &stream).unwrap();
    let once = |mode: RunMode, name: &str, file: &str| {
        let mut cfg = RunConfig { mode, ratings: ratings.clone(), out: dir.path().join(name), seed: 5, ..Default::default() };
        cfg.segment_length = 2000;
        cfg.model.hidden = 64;
        cfg.synthetic.horizon = 3000;
        cfg.synthetic.seeds = 2;
        run(&cfg).unwrap();
        std::fs::read(cfg.out.join(file)).unwrap()
    };
    let mut same = true;
    let mut sizes = Vec::new();
    for (mode, file) in [(RunMode::DessFre, "metrics.csv"), (RunMode::Fixed, "metrics.csv"), (RunMode::Synthetic, "regret.csv")] {
        let a = once(mode, &format!("{mode}-a"), file);
        let b = once(mode, &format!("{mode}-b"), file);
        same &= a == b;
        sizes.push(format!("{mode} {} bytes", a.len()));
    }
    verdict(same, format!("two runs byte-identical: {}", sizes.join(", ")))
}

fn main() -> ExitCode {
    let (c1, c2) = trajectories();
    let checks = [
        (1, c1),
        (2, c2),
        (3, sublinearity()),
        (4, gradients()),
        (5, ewi()),
        (6, indicators()),
        (7, streaming()),
        (8, reproducibility()),
    ];
    let mut failed = 0;
    for (n, v) in &checks {
        println!("criterion {n}: {} {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
