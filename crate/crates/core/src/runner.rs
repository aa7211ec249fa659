//! Experiment dispatch: load data, run the selected mode, write metrics.
//!
//! Stream modes write `metrics.csv` (one row per segment) and `summary.json`.
//! Synthetic mode writes `regret.csv` (DESS and stationary LinUCB curves) and
//! `summary.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{Mode, RunConfig};
use crate::data::{metrics_to_csv, parse_item_features, parse_ratings};
use crate::error::{DessError, Result};
use crate::harness::{segment_stream, BanditPolicy, Interaction, KeepPolicy, RewardTally, SearchPolicy, SegmentMetrics, StreamRun};
use crate::indicators::{Indicators, ItemFeatureStore};
use crate::model::AdaptiveModel;
use crate::synthetic::{curves_csv, loglog_slope, run_benchmark, BenchConfig, BenchPolicy};

/// End-of-run aggregates of a stream mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub segments: usize,
    pub mean_acc: f64,
    pub mean_loss: f64,
    pub final_emb_params: usize,
    pub regret_user: f64,
    pub regret_item: f64,
    pub decisions: [u64; 2],
    pub expansions: [u64; 2],
    pub rewards: RewardTally,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: BenchPolicy,
    pub gamma: f64,
    pub final_regret: f64,
    /// Log-log slope of the mean curve over the second half of the horizon.
    pub second_half_slope: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Outcome {
    Stream(StreamSummary),
    Synthetic(Vec<PolicySummary>),
}

/// What `summary.json` holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub outcome: Outcome,
    /// Regret columns are the counterfactual proxy, not a true dynamic regret.
    pub regret_note: String,
}

/// Results of a stream mode held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamResult {
    pub metrics: Vec<SegmentMetrics>,
    pub summary: StreamSummary,
}

const REGRET_NOTE: &str = "stream regret is a counterfactual proxy: max(reward of the other arm - reward of the chosen arm, 0) per decision";

/// Ratings of `config`, sorted and truncated.
pub fn load_stream(config: &RunConfig) -> Result<Vec<Interaction>> {
    let mut stream = parse_ratings(&config.ratings)?;
    if let Some(n) = config.max_interactions {
        stream.truncate(n);
    }
    Ok(stream)
}

/// Item features as the mode sees them: required by `dess_cv`, ignored by
/// `dess_fre` and `fixed`, optional otherwise.
pub fn load_features(config: &RunConfig) -> Result<ItemFeatureStore> {
    match (config.mode, &config.features) {
        (Mode::DessFre | Mode::Fixed | Mode::Synthetic, _) => Ok(ItemFeatureStore::default()),
        (Mode::DessCv, None) => Err(DessError::Config("dess_cv needs an item-features file".into())),
        (_, None) => Ok(ItemFeatureStore::default()),
        (_, Some(p)) => parse_item_features(p),
    }
}

fn drive<P: SearchPolicy>(config: &RunConfig, policy: P, stream: &[Interaction], features: ItemFeatureStore) -> Result<StreamResult> {
    let segments = segment_stream(stream, config.segment_length, config.train_frac)?;
    let model = AdaptiveModel::new(config.model_config(), config.effective_ladder())?;
    let indicators = Indicators::new(config.indicators, features);
    let mut run = StreamRun::new(model, policy, indicators, config.reward);
    run.record_timing = config.timing;
    let metrics = run.run(&segments)?;
    let n = metrics.len().max(1) as f64;
    let summary = StreamSummary {
        segments: metrics.len(),
        mean_acc: metrics.iter().map(|m| m.acc).sum::<f64>() / n,
        mean_loss: metrics.iter().map(|m| m.loss).sum::<f64>() / n,
        final_emb_params: metrics.last().map_or(0, |m| m.emb_params),
        regret_user: run.regret[0],
        regret_item: run.regret[1],
        decisions: run.decisions,
        expansions: run.expansions,
        rewards: run.rewards,
    };
    Ok(StreamResult { metrics, summary })
}

/// Run a stream mode on an in-memory stream.
pub fn run_stream(config: &RunConfig, stream: &[Interaction], features: ItemFeatureStore) -> Result<StreamResult> {
    config.validate()?;
    match config.mode {
        Mode::Fixed => drive(config, KeepPolicy::default(), stream, features),
        Mode::Synthetic => Err(DessError::Config("synthetic mode has no stream".into())),
        _ => drive(config, BanditPolicy::new(config.bandit_config())?, stream, features),
    }
}

fn bench_config(config: &RunConfig) -> BenchConfig {
    let s = &config.synthetic;
    BenchConfig {
        spec: s.spec(),
        env: s.env,
        lambda: config.bandit.lambda,
        delta: config.bandit.delta,
        checkpoint_every: s.checkpoint_every,
    }
}

/// Files written by [`run`].
#[derive(Debug, Clone, PartialEq)]
pub struct Written {
    pub files: Vec<PathBuf>,
    pub report: RunReport,
}

fn write(dir: &Path, name: &str, body: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, body)?;
    files.push(path);
    Ok(())
}

/// Run `config` end to end and write its outputs under `config.out`.
pub fn run(config: &RunConfig) -> Result<Written> {
    config.validate()?;
    let mut files = Vec::new();
    let outcome = if config.mode == Mode::Synthetic {
        let bench = bench_config(config);
        let seeds: Vec<u64> = (0..config.synthetic.seeds as u64).map(|k| config.seed + k).collect();
        let results = [BenchPolicy::Dess, BenchPolicy::LinUcb]
            .into_iter()
            .map(|p| run_benchmark(&bench, p, &seeds))
            .collect::<Result<Vec<_>>>()?;
        fs::create_dir_all(&config.out)?;
        write(&config.out, "regret.csv", &curves_csv(&results), &mut files)?;
        let horizon = config.synthetic.horizon;
        Outcome::Synthetic(
            results
                .iter()
                .map(|r| {
                    let mean = r.mean();
                    PolicySummary {
                        policy: r.policy,
                        gamma: r.gamma,
                        final_regret: mean.last(),
                        second_half_slope: loglog_slope(&mean, horizon / 2, horizon),
                    }
                })
                .collect(),
        )
    } else {
        let stream = load_stream(config)?;
        let features = load_features(config)?;
        let result = run_stream(config, &stream, features)?;
        fs::create_dir_all(&config.out)?;
        write(&config.out, "metrics.csv", &metrics_to_csv(&result.metrics), &mut files)?;
        Outcome::Stream(result.summary)
    };
    let report = RunReport { config: config.clone(), outcome, regret_note: REGRET_NOTE.into() };
    write(&config.out, "summary.json", &(serde_json::to_string_pretty(&report)? + "\n"), &mut files)?;
    Ok(Written { files, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_metrics_csv, write_ratings};

    fn tiny(dir: &Path, mode: Mode) -> RunConfig {
        let stream: Vec<Interaction> = (0..400)
            .map(|k| Interaction::new(k % 13, k % 17, ((k * 7) % 5 + 1) as f64, k as i64))
            .collect();
        let ratings = dir.join("r.csv");
        write_ratings(&ratings, &stream).unwrap();
        let mut cfg = RunConfig { mode, ratings, out: dir.join("out"), segment_length: 100, ..Default::default() };
        cfg.model.hidden = 8;
        cfg.model.batch = 20;
        cfg.ladder = crate::model::SizeLadder::new(vec![2, 4, 8]).unwrap();
        cfg
    }

    #[test]
    fn stream_run_writes_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path(), Mode::DessFre);
        let written = run(&cfg).unwrap();
        let csv = fs::read_to_string(cfg.out.join("metrics.csv")).unwrap();
        assert_eq!(parse_metrics_csv(&csv).unwrap().len(), 4);
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(cfg.out.join("summary.json")).unwrap()).unwrap();
        assert_eq!(json["outcome"]["segments"], 4);
        assert_eq!(written.files.len(), 2);
    }

    #[test]
    fn missing_dataset_is_reported() {
        let cfg = RunConfig { ratings: "/nonexistent/r.csv".into(), ..Default::default() };
        assert!(run(&cfg).unwrap_err().to_string().contains("dataset not found"));
    }

    #[test]
    fn dess_fre_ignores_absent_features() {
        let cfg = RunConfig { features: Some("/nonexistent/f.tsv".into()), ..Default::default() };
        assert_eq!(load_features(&cfg).unwrap().len(), 0);
        let cfg = RunConfig { mode: Mode::DessCv, ..cfg };
        assert!(load_features(&cfg).is_err());
    }

    #[test]
    fn synthetic_run_writes_curves() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig { mode: Mode::Synthetic, out: dir.path().to_path_buf(), ..Default::default() };
        cfg.synthetic.horizon = 2000;
        cfg.synthetic.seeds = 2;
        cfg.synthetic.checkpoint_every = 500;
        run(&cfg).unwrap();
        let csv = fs::read_to_string(dir.path().join("regret.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 * 4);
        assert!(csv.lines().nth(1).unwrap().starts_with("dess,500,"));
    }
}
