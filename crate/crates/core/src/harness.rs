//! Segmented streaming protocol.
//!
//! The stream is cut into equal segments `D_1..D_T`, each split
//! chronologically into a train and a test part. At step `t` the size-search
//! policy is first refined on all of `D_{t-1}` (validation pass), then frozen
//! to decide permanent size changes for the ids in `D_t`'s train part, after
//! which the model trains on that part and is scored on the test part.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dlinucb::{BanditConfig, BanditState, ContextVector};
use crate::error::{DessError, Result};
use crate::indicators::Indicators;
use crate::model::AdaptiveModel;

/// Ratings strictly above this value are positive in the binary task.
pub const BINARY_THRESHOLD: f64 = 3.5;

/// Arm 0 keeps the current size, arm 1 climbs one rung.
pub const ARM_KEEP: usize = 0;
pub const ARM_INCREASE: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    User,
    Item,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::User, Side::Item];

    pub fn index(self) -> usize {
        match self {
            Side::User => 0,
            Side::Item => 1,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::User => "user",
            Side::Item => "item",
        })
    }
}

impl FromStr for Side {
    type Err = DessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "user" => Ok(Side::User),
            "item" => Ok(Side::Item),
            other => Err(DessError::Config(format!("unknown side: {other}"))),
        }
    }
}

/// One user-item rating event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: u64,
    pub item: u64,
    pub rating: f64,
    pub timestamp: i64,
    /// 1.0 iff `rating > 3.5`.
    pub label: f64,
}

impl Interaction {
    pub fn new(user: u64, item: u64, rating: f64, timestamp: i64) -> Self {
        let label = if rating > BINARY_THRESHOLD { 1.0 } else { 0.0 };
        Self { user, item, rating, timestamp, label }
    }

    /// Class index 0..=4 of the rounded, clamped star rating.
    pub fn class(&self) -> usize {
        (self.rating.round().clamp(1.0, 5.0) as usize) - 1
    }

    pub fn id(&self, side: Side) -> u64 {
        match side {
            Side::User => self.user,
            Side::Item => self.item,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// 1-based segment index `t`.
    pub index: usize,
    pub train: Vec<Interaction>,
    pub test: Vec<Interaction>,
}

impl Segment {
    /// Train then test, i.e. the segment in its original order.
    pub fn all(&self) -> impl Iterator<Item = &Interaction> {
        self.train.iter().chain(&self.test)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Cut `stream` into consecutive segments of `segment_length` (remainder
/// dropped); the first `ceil(train_frac * len)` events of each are train.
pub fn segment_stream(stream: &[Interaction], segment_length: usize, train_frac: f64) -> Result<Vec<Segment>> {
    if stream.is_empty() {
        return Err(DessError::EmptyStream);
    }
    if segment_length < 2 {
        return Err(DessError::Config(format!("segment_length must be >= 2, got {segment_length}")));
    }
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(DessError::Config(format!("train_frac must be in (0,1), got {train_frac}")));
    }
    let cut = ((train_frac * segment_length as f64).ceil() as usize).min(segment_length);
    Ok(stream
        .chunks_exact(segment_length)
        .enumerate()
        .map(|(i, chunk)| Segment { index: i + 1, train: chunk[..cut].to_vec(), test: chunk[cut..].to_vec() })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub threshold: f64,
    /// Use the clamped loss improvement instead of a 0/1 reward.
    pub continuous: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { threshold: 0.0, continuous: false }
    }
}

/// Reward of moving from the old structure's loss to the new one's.
///
/// Binary: 1 iff `L_old - L_new > threshold` (equality gives 0).
/// Continuous: `L_old - L_new` clamped to `[0, reward_max]`.
pub fn reward(l_old: f64, l_new: f64, cfg: &RewardConfig, reward_max: f64) -> Result<f64> {
    if !l_old.is_finite() || !l_new.is_finite() {
        return Err(DessError::NonFiniteLoss);
    }
    let gain = l_old - l_new;
    Ok(if cfg.continuous {
        gain.clamp(0.0, reward_max)
    } else if gain > cfg.threshold {
        1.0
    } else {
        0.0
    })
}

/// Proxy regret increment against the counterfactual arm's realized reward.
pub fn step_regret(chosen: f64, counterfactual: f64) -> f64 {
    (counterfactual - chosen).max(0.0)
}

/// Per-segment report. Column order of the CSV form is the field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMetrics {
    pub t: usize,
    pub acc: f64,
    pub loss: f64,
    pub regret_user: f64,
    pub regret_item: f64,
    pub emb_params: usize,
    pub train_ms: u64,
    pub infer_ms: u64,
}

/// A size-search policy with one 2-arm decision problem per side.
pub trait SearchPolicy {
    /// Exploratory choice used during the validation pass.
    fn select(&self, side: Side, x: &ContextVector) -> usize;
    /// Exploitative choice used for permanent decisions.
    fn select_greedy(&self, side: Side, x: &ContextVector) -> usize;
    fn update(&mut self, side: Side, arm: usize, x: &ContextVector, reward: f64) -> Result<()>;
    /// Number of updates received on one side.
    fn steps(&self, side: Side) -> u64;
    /// Upper bound on admissible rewards.
    fn reward_max(&self) -> f64;
}

/// Discounted LinUCB, one bandit per side.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditPolicy {
    pub bandits: [BanditState; 2],
}

impl BanditPolicy {
    pub fn new(config: BanditConfig) -> Result<Self> {
        if config.arms != 2 {
            return Err(DessError::Config("the size-search policy has exactly two arms".into()));
        }
        Ok(Self { bandits: [BanditState::new(config)?, BanditState::new(config)?] })
    }
}

impl SearchPolicy for BanditPolicy {
    fn select(&self, side: Side, x: &ContextVector) -> usize {
        self.bandits[side.index()].select_arm(x)
    }

    fn select_greedy(&self, side: Side, x: &ContextVector) -> usize {
        self.bandits[side.index()].select_greedy(x)
    }

    fn update(&mut self, side: Side, arm: usize, x: &ContextVector, reward: f64) -> Result<()> {
        self.bandits[side.index()].update(arm, x, reward)
    }

    fn steps(&self, side: Side) -> u64 {
        self.bandits[side.index()].step
    }

    fn reward_max(&self) -> f64 {
        self.bandits[0].config.reward_max()
    }
}

/// Always keeps the current size.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KeepPolicy {
    pub steps: [u64; 2],
}

impl SearchPolicy for KeepPolicy {
    fn select(&self, _: Side, _: &ContextVector) -> usize {
        ARM_KEEP
    }

    fn select_greedy(&self, _: Side, _: &ContextVector) -> usize {
        ARM_KEEP
    }

    fn update(&mut self, side: Side, _: usize, _: &ContextVector, _: f64) -> Result<()> {
        self.steps[side.index()] += 1;
        Ok(())
    }

    fn steps(&self, side: Side) -> u64 {
        self.steps[side.index()]
    }

    fn reward_max(&self) -> f64 {
        1.0
    }
}

/// Counts of rewards fed to the policy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardTally {
    pub zeros: u64,
    pub ones: u64,
    pub other: u64,
}

impl RewardTally {
    fn record(&mut self, r: f64) {
        if r == 0.0 {
            self.zeros += 1;
        } else if r == 1.0 {
            self.ones += 1;
        } else {
            self.other += 1;
        }
    }
}

/// Whole-run state: model, policy, indicators and regret accumulators.
pub struct StreamRun<P: SearchPolicy> {
    pub model: AdaptiveModel,
    pub policy: P,
    pub indicators: Indicators,
    pub reward: RewardConfig,
    pub record_timing: bool,
    /// Cumulative proxy regret per side.
    pub regret: [f64; 2],
    /// Bandit decisions taken per side.
    pub decisions: [u64; 2],
    pub rewards: RewardTally,
    /// Permanent expansions applied per side.
    pub expansions: [u64; 2],
}

impl<P: SearchPolicy> StreamRun<P> {
    pub fn new(model: AdaptiveModel, policy: P, indicators: Indicators, reward: RewardConfig) -> Self {
        Self {
            model,
            policy,
            indicators,
            reward,
            record_timing: false,
            regret: [0.0; 2],
            decisions: [0; 2],
            rewards: RewardTally::default(),
            expansions: [0; 2],
        }
    }

    /// Validation pass over `D_{t-1}` (train then test, in stream order).
    pub fn policy_update_pass(&mut self, previous: &Segment) -> Result<()> {
        let reward_max = self.policy.reward_max();
        for x in previous.all() {
            let active: Vec<Side> = Side::BOTH.into_iter().filter(|&s| !self.model.at_top(s, x.id(s))).collect();
            if !active.is_empty() {
                let outcome = self.model.temp_outcome(x);
                for side in active {
                    let ctx = self.indicators.context_vector(x.id(side), side);
                    let arm = self.policy.select(side, &ctx);
                    let new = outcome.new_for(side).expect("side is below the top rung");
                    let r_keep = reward(outcome.old, outcome.old, &self.reward, reward_max)?;
                    let r_increase = reward(outcome.old, new, &self.reward, reward_max)?;
                    let (chosen, other) = if arm == ARM_INCREASE { (r_increase, r_keep) } else { (r_keep, r_increase) };
                    self.regret[side.index()] += step_regret(chosen, other);
                    self.decisions[side.index()] += 1;
                    self.rewards.record(chosen);
                    self.policy.update(side, arm, &ctx, chosen)?;
                }
            }
            self.indicators.record(x.user, x.item);
        }
        Ok(())
    }

    /// Permanent size decisions for `D_t`'s train ids, training, then evaluation.
    pub fn model_update_pass(&mut self, segment: &Segment) -> Result<SegmentMetrics> {
        let started = Instant::now();
        if segment.index >= 2 {
            for side in Side::BOTH {
                let mut seen = HashSet::new();
                for x in &segment.train {
                    let id = x.id(side);
                    if !seen.insert(id) || self.model.at_top(side, id) {
                        continue;
                    }
                    let ctx = self.indicators.context_vector(id, side);
                    if self.policy.select_greedy(side, &ctx) == ARM_INCREASE {
                        self.model.expand(side, id)?;
                        self.expansions[side.index()] += 1;
                    }
                }
            }
        }
        for batch in segment.train.chunks(self.model.config().batch) {
            self.model.train_step(batch);
        }
        let train_ms = started.elapsed().as_millis() as u64;

        let started = Instant::now();
        let (loss, acc) = self.model.evaluate(&segment.test);
        let infer_ms = started.elapsed().as_millis() as u64;
        let (train_ms, infer_ms) = if self.record_timing { (train_ms, infer_ms) } else { (0, 0) };

        Ok(SegmentMetrics {
            t: segment.index,
            acc,
            loss,
            regret_user: self.regret[0],
            regret_item: self.regret[1],
            emb_params: self.model.param_count().0,
            train_ms,
            infer_ms,
        })
    }

    /// Run the full protocol over all segments.
    pub fn run(&mut self, segments: &[Segment]) -> Result<Vec<SegmentMetrics>> {
        let mut out = Vec::with_capacity(segments.len());
        for (i, segment) in segments.iter().enumerate() {
            if i > 0 {
                self.policy_update_pass(&segments[i - 1])?;
            }
            out.push(self.model_update_pass(segment)?);
        }
        Ok(out)
    }
}
