//! Synthetic drifting linear bandits with known oracle parameters.
//!
//! Every arm's `theta*` lives at norm `S` and moves by rotations in the plane
//! of the first two coordinates, so each drift step has an exact, known
//! magnitude and the realized variation budget can be accounted for. All
//! arms share one context per step, drawn from the nonnegative orthant of the
//! radius-`U` sphere. Rewards are `<x, theta*> + U(-nu, nu)` and the geometry
//! keeps every mean in `[nu, 2 sigma - nu]`, hence every reward in
//! `[0, 2 sigma]`.

use std::f64::consts::FRAC_PI_4;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dlinucb::{corollary_gamma, BanditConfig, BanditState, ContextVector};
use crate::error::{DessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DriftKind {
    /// `changes` equally spaced change points, each moving every arm by `magnitude`.
    Abrupt { changes: usize, magnitude: f64 },
    /// Every arm moves by `rate` at every step.
    Smooth { rate: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    pub kind: DriftKind,
    pub horizon: usize,
    /// Declared variation budget `B_L`.
    pub budget: f64,
}

impl DriftSpec {
    /// Abrupt spec whose declared budget equals its realized one.
    pub fn abrupt(changes: usize, magnitude: f64, horizon: usize) -> Self {
        Self { kind: DriftKind::Abrupt { changes, magnitude }, horizon, budget: changes as f64 * magnitude }
    }

    pub fn smooth(rate: f64, horizon: usize) -> Self {
        Self { kind: DriftKind::Smooth { rate }, horizon, budget: horizon.saturating_sub(1) as f64 * rate }
    }

    /// The variation the construction realizes exactly.
    pub fn realized_budget(&self) -> f64 {
        match self.kind {
            DriftKind::Abrupt { changes, magnitude } => changes as f64 * magnitude,
            DriftKind::Smooth { rate } => self.horizon.saturating_sub(1) as f64 * rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(DessError::Environment("horizon must be >= 1".into()));
        }
        let step = match self.kind {
            DriftKind::Abrupt { changes, magnitude } => {
                if changes >= self.horizon {
                    return Err(DessError::Environment("more change points than steps".into()));
                }
                magnitude
            }
            DriftKind::Smooth { rate } => rate,
        };
        if !(step >= 0.0 && step.is_finite()) {
            return Err(DessError::Environment("drift magnitude must be non-negative".into()));
        }
        // Relative slack for the rounding of m * delta.
        if self.realized_budget() > self.budget * (1.0 + 1e-12) + 1e-15 {
            return Err(DessError::Environment(format!(
                "realized variation {} exceeds declared budget {}",
                self.realized_budget(),
                self.budget
            )));
        }
        Ok(())
    }
}

/// Geometry of the environment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub dim: usize,
    pub arms: usize,
    /// Subgaussian constant; rewards live in `[0, 2 sigma]`.
    pub sigma: f64,
    /// Half-width `nu` of the uniform reward noise.
    pub noise: f64,
    /// Context norm `U`.
    pub u_bound: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { dim: 2, arms: 2, sigma: 0.5, noise: 0.1, u_bound: 1.0 }
    }
}

/// `theta*_{l,a}` for every step and arm.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleTrack {
    pub dim: usize,
    pub arms: usize,
    /// Step-major: `thetas[l][a]` is a `dim`-vector.
    pub thetas: Vec<Vec<Vec<f64>>>,
    pub noise: f64,
    /// Common norm of every parameter vector.
    pub s_bound: f64,
}

impl OracleTrack {
    pub fn horizon(&self) -> usize {
        self.thetas.len()
    }

    pub fn mean_reward(&self, l: usize, arm: usize, x: &[f64]) -> f64 {
        self.thetas[l][arm].iter().zip(x).map(|(a, b)| a * b).sum()
    }

    /// Best arm at step `l` for context `x`; ties go to the lowest index.
    pub fn oracle_arm(&self, l: usize, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_mean = f64::NEG_INFINITY;
        for a in 0..self.arms {
            let m = self.mean_reward(l, a, x);
            if m > best_mean {
                best = a;
                best_mean = m;
            }
        }
        best
    }

    /// `sum_l max_a || theta*_{l+1,a} - theta*_{l,a} ||_2`.
    pub fn measured_budget(&self) -> f64 {
        self.thetas
            .windows(2)
            .map(|w| {
                (0..self.arms)
                    .map(|a| w[1][a].iter().zip(&w[0][a]).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
                    .fold(0.0, f64::max)
            })
            .sum()
    }
}

/// Angular geometry shared by all arms.
struct Band {
    /// Radius of the rotating component.
    rho: f64,
    /// Constant value of every coordinate beyond the first two.
    rest: f64,
    lo: f64,
    hi: f64,
}

impl Band {
    fn new(cfg: &EnvConfig) -> Result<Self> {
        let EnvConfig { dim, sigma, noise, u_bound, .. } = *cfg;
        if dim < 2 {
            return Err(DessError::Environment("rotating drift needs dim >= 2".into()));
        }
        if !(noise >= 0.0 && sigma > 0.0 && u_bound > 0.0) {
            return Err(DessError::Environment("sigma and U must be positive, noise non-negative".into()));
        }
        // Mean rewards over the orthant range from U min_i theta_i to U ||theta||.
        let floor = noise / u_bound;
        let norm = (2.0 * sigma - noise) / u_bound;
        let rest_sq = (dim - 2) as f64 * floor * floor;
        if norm <= 0.0 || norm * norm <= rest_sq + 2.0 * floor * floor {
            return Err(DessError::Environment("mean-reward box is empty".into()));
        }
        let rho = (norm * norm - rest_sq).sqrt();
        let lo = (floor / rho).asin();
        let hi = std::f64::consts::FRAC_PI_2 - lo;
        if lo >= hi {
            return Err(DessError::Environment("mean-reward box is empty".into()));
        }
        Ok(Self { rho, rest: floor, lo, hi })
    }

    fn theta(&self, dim: usize, angle: f64) -> Vec<f64> {
        let mut v = vec![self.rest; dim];
        v[0] = self.rho * angle.cos();
        v[1] = self.rho * angle.sin();
        v
    }

    /// Rotation angle whose chord on the rho-circle is `step`.
    fn angle_for(&self, step: f64) -> Result<f64> {
        let half = step / (2.0 * self.rho);
        if half > 1.0 {
            return Err(DessError::Environment(format!("drift step {step} exceeds the parameter diameter")));
        }
        Ok(2.0 * half.asin())
    }
}

/// Materialize the oracle track of a drift spec.
pub fn make_track(spec: &DriftSpec, cfg: &EnvConfig, seed: u64) -> Result<OracleTrack> {
    spec.validate()?;
    if cfg.arms < 2 {
        return Err(DessError::Environment("need at least 2 arms".into()));
    }
    let band = Band::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x243f_6a88_85a3_08d3);
    let width = band.hi - band.lo;
    let (angle, smooth) = match spec.kind {
        DriftKind::Abrupt { magnitude, .. } => (band.angle_for(magnitude)?, false),
        DriftKind::Smooth { rate } => (band.angle_for(rate)?, true),
    };
    if !smooth && angle > width {
        return Err(DessError::Environment("change magnitude does not fit the mean-reward box".into()));
    }

    // Arms 0 and 1 sit symmetrically about the band centre and trade places at
    // every abrupt change; further arms start at random feasible angles.
    let swing = if smooth { width / 2.0 } else { angle };
    let flip = rng.gen_bool(0.5);
    let mut angles: Vec<f64> = Vec::with_capacity(cfg.arms);
    let mut dirs: Vec<f64> = Vec::with_capacity(cfg.arms);
    for a in 0..cfg.arms {
        let sign = if (a % 2 == 0) ^ flip { 1.0 } else { -1.0 };
        let start = if a < 2 {
            FRAC_PI_4 + sign * swing / 2.0
        } else {
            let span = (width - swing).max(0.0);
            band.lo + rng.gen_range(0.0..=span) + if sign < 0.0 { swing } else { 0.0 }
        };
        angles.push(start);
        dirs.push(-sign);
    }

    let horizon = spec.horizon;
    let change_points: Vec<usize> = match spec.kind {
        DriftKind::Abrupt { changes, .. } => (1..=changes).map(|k| k * horizon / (changes + 1)).collect(),
        DriftKind::Smooth { .. } => Vec::new(),
    };
    let mut next_change = 0;
    let mut thetas = Vec::with_capacity(horizon);
    for l in 0..horizon {
        if l > 0 {
            if smooth {
                for a in 0..cfg.arms {
                    let next = angles[a] + dirs[a] * angle;
                    if next < band.lo || next > band.hi {
                        dirs[a] = -dirs[a];
                    }
                    angles[a] += dirs[a] * angle;
                }
            } else {
                while next_change < change_points.len() && change_points[next_change] == l {
                    for a in 0..cfg.arms {
                        angles[a] += dirs[a] * angle;
                        dirs[a] = -dirs[a];
                    }
                    next_change += 1;
                }
            }
        }
        thetas.push(angles.iter().map(|&phi| band.theta(cfg.dim, phi)).collect());
    }
    let s_bound = (band.rho * band.rho + (cfg.dim - 2) as f64 * band.rest * band.rest).sqrt();
    Ok(OracleTrack { dim: cfg.dim, arms: cfg.arms, thetas, noise: cfg.noise, s_bound })
}

/// One realized step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub mean: f64,
    pub oracle_arm: usize,
    /// Mean-reward gap between the oracle arm and the chosen one.
    pub regret: f64,
}

/// A drifting environment with a step cursor.
#[derive(Debug, Clone)]
pub struct DriftingEnvironment {
    pub spec: DriftSpec,
    pub config: EnvConfig,
    pub track: OracleTrack,
    rng: ChaCha8Rng,
    cursor: usize,
    pending: Option<Vec<f64>>,
}

impl DriftingEnvironment {
    pub fn new(spec: DriftSpec, config: EnvConfig, seed: u64) -> Result<Self> {
        let track = make_track(&spec, &config, seed)?;
        Ok(Self::from_track(spec, config, track, seed))
    }

    /// Use a hand-built oracle track (for tests).
    pub fn from_track(spec: DriftSpec, config: EnvConfig, track: OracleTrack, seed: u64) -> Self {
        Self { spec, config, track, rng: ChaCha8Rng::seed_from_u64(seed), cursor: 0, pending: None }
    }

    /// Index of the next step.
    pub fn step_index(&self) -> usize {
        self.cursor
    }

    pub fn horizon(&self) -> usize {
        self.track.horizon()
    }

    /// Context of the current step, drawn once and shared by all arms.
    pub fn observe(&mut self) -> Result<Vec<f64>> {
        if self.cursor >= self.track.horizon() {
            return Err(DessError::Environment(format!("stepping past horizon {}", self.track.horizon())));
        }
        if self.pending.is_none() {
            let x: Vec<f64> = (0..self.config.dim).map(|_| self.rng.sample::<f64, _>(StandardNormal).abs()).collect();
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            self.pending = Some(x.iter().map(|v| v / norm * self.config.u_bound).collect());
        }
        Ok(self.pending.clone().expect("drawn above"))
    }

    /// Pull `arm` on the current step's context and advance.
    pub fn pull(&mut self, arm: usize) -> Result<StepOutcome> {
        if arm >= self.track.arms {
            return Err(DessError::ArmIndex { arm, arms: self.track.arms });
        }
        let x = self.observe()?;
        self.pending = None;
        let l = self.cursor;
        let mean = self.track.mean_reward(l, arm, &x);
        let nu = self.track.noise;
        let noise = if nu > 0.0 { self.rng.gen_range(-nu..=nu) } else { 0.0 };
        let reward = (mean + noise).clamp(0.0, 2.0 * self.config.sigma);
        let oracle_arm = self.track.oracle_arm(l, &x);
        let regret = self.track.mean_reward(l, oracle_arm, &x) - mean;
        self.cursor += 1;
        Ok(StepOutcome { reward, mean, oracle_arm, regret })
    }

    /// `observe` then `pull`.
    pub fn step(&mut self, arm: usize) -> Result<(Vec<f64>, StepOutcome)> {
        let x = self.observe()?;
        Ok((x, self.pull(arm)?))
    }
}

/// Something that picks arms in a [`DriftingEnvironment`].
pub trait Agent {
    fn choose(&mut self, l: usize, x: &[f64], track: &OracleTrack) -> usize;
    fn observe(&mut self, arm: usize, x: &[f64], reward: f64) -> Result<()>;
}

impl Agent for BanditState {
    fn choose(&mut self, _: usize, x: &[f64], _: &OracleTrack) -> usize {
        let ctx = ContextVector::new(x.to_vec(), self.config.u_bound).expect("environment respects U");
        self.select_arm(&ctx)
    }

    fn observe(&mut self, arm: usize, x: &[f64], reward: f64) -> Result<()> {
        let ctx = ContextVector::new(x.to_vec(), self.config.u_bound)?;
        self.update(arm, &ctx, reward)
    }
}

/// Always plays the oracle arm.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleAgent;

impl Agent for OracleAgent {
    fn choose(&mut self, l: usize, x: &[f64], track: &OracleTrack) -> usize {
        track.oracle_arm(l, x)
    }

    fn observe(&mut self, _: usize, _: &[f64], _: f64) -> Result<()> {
        Ok(())
    }
}

/// Always plays the arm with the lowest mean reward.
#[derive(Debug, Clone, Copy, Default)]
pub struct WorstAgent;

impl Agent for WorstAgent {
    fn choose(&mut self, l: usize, x: &[f64], track: &OracleTrack) -> usize {
        let mut worst = 0;
        for a in 1..track.arms {
            if track.mean_reward(l, a, x) < track.mean_reward(l, worst, x) {
                worst = a;
            }
        }
        worst
    }

    fn observe(&mut self, _: usize, _: &[f64], _: f64) -> Result<()> {
        Ok(())
    }
}

/// Cumulative mean-reward regret sampled at checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretCurve {
    /// Number of steps played at each checkpoint.
    pub steps: Vec<usize>,
    pub cumulative: Vec<f64>,
}

impl RegretCurve {
    pub fn last(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }
}

/// Play `agent` for the full horizon, recording cumulative regret every
/// `every` steps and at the end.
pub fn run_experiment(agent: &mut dyn Agent, env: &mut DriftingEnvironment, every: usize) -> Result<RegretCurve> {
    let every = every.max(1);
    let horizon = env.horizon();
    let mut curve = RegretCurve { steps: Vec::new(), cumulative: Vec::new() };
    let mut total = 0.0;
    while env.step_index() < horizon {
        let l = env.step_index();
        let x = env.observe()?;
        let arm = agent.choose(l, &x, &env.track);
        let out = env.pull(arm)?;
        agent.observe(arm, &x, out.reward)?;
        total += out.regret;
        let played = l + 1;
        if played % every == 0 || played == horizon {
            curve.steps.push(played);
            curve.cumulative.push(total);
        }
    }
    Ok(curve)
}

/// Least-squares slope of `ln R` against `ln l` over checkpoints with `l` in `[from, to]`.
pub fn loglog_slope(curve: &RegretCurve, from: usize, to: usize) -> Option<f64> {
    let pts: Vec<(f64, f64)> = curve
        .steps
        .iter()
        .zip(&curve.cumulative)
        .filter(|(&l, &r)| l >= from && l <= to && r > 0.0)
        .map(|(&l, &r)| ((l as f64).ln(), r.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Point-wise mean of curves sharing their checkpoints.
pub fn mean_curve(curves: &[RegretCurve]) -> RegretCurve {
    let Some(first) = curves.first() else {
        return RegretCurve { steps: Vec::new(), cumulative: Vec::new() };
    };
    let n = curves.len() as f64;
    let cumulative = (0..first.steps.len())
        .map(|i| curves.iter().map(|c| c.cumulative[i]).sum::<f64>() / n)
        .collect();
    RegretCurve { steps: first.steps.clone(), cumulative }
}

/// Which bandit plays the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchPolicy {
    /// Discounted LinUCB with the horizon-tuned discount factor.
    Dess,
    /// Stationary LinUCB (`gamma = 1`).
    LinUcb,
}

impl std::fmt::Display for BenchPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BenchPolicy::Dess => "dess",
            BenchPolicy::LinUcb => "linucb",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub spec: DriftSpec,
    pub env: EnvConfig,
    pub lambda: f64,
    pub delta: f64,
    pub checkpoint_every: usize,
}

impl BenchConfig {
    pub fn bandit_config(&self, policy: BenchPolicy, s_bound: f64) -> BanditConfig {
        let gamma = match policy {
            BenchPolicy::Dess => corollary_gamma(self.spec.budget, self.env.dim, self.spec.horizon as u64),
            BenchPolicy::LinUcb => 1.0,
        };
        BanditConfig {
            lambda: self.lambda,
            gamma,
            sigma: self.env.sigma,
            delta: self.delta,
            s_bound,
            u_bound: self.env.u_bound,
            dim: self.env.dim,
            arms: self.env.arms,
        }
    }
}

/// Per-seed regret curves of one policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub policy: BenchPolicy,
    pub gamma: f64,
    pub seeds: Vec<u64>,
    pub curves: Vec<RegretCurve>,
}

impl BenchResult {
    pub fn mean(&self) -> RegretCurve {
        mean_curve(&self.curves)
    }
}

/// Run `policy` on one environment per seed.
pub fn run_benchmark(cfg: &BenchConfig, policy: BenchPolicy, seeds: &[u64]) -> Result<BenchResult> {
    let mut curves = Vec::with_capacity(seeds.len());
    let mut gamma = 1.0;
    for &seed in seeds {
        let mut env = DriftingEnvironment::new(cfg.spec, cfg.env, seed)?;
        let bandit_cfg = cfg.bandit_config(policy, env.track.s_bound);
        gamma = bandit_cfg.gamma;
        let mut bandit = BanditState::new(bandit_cfg)?;
        curves.push(run_experiment(&mut bandit, &mut env, cfg.checkpoint_every)?);
    }
    Ok(BenchResult { policy, gamma, seeds: seeds.to_vec(), curves })
}

/// CSV with columns `policy,step,seed_<s>...,mean`.
pub fn curves_csv(results: &[BenchResult]) -> String {
    let mut out = String::new();
    let Some(first) = results.first() else { return out };
    out.push_str("policy,step");
    for s in &first.seeds {
        let _ = write!(out, ",seed_{s}");
    }
    out.push_str(",mean\n");
    for r in results {
        let mean = r.mean();
        for (i, step) in mean.steps.iter().enumerate() {
            let _ = write!(out, "{},{step}", r.policy);
            for c in &r.curves {
                let _ = write!(out, ",{}", c.cumulative[i]);
            }
            let _ = writeln!(out, ",{}", mean.cumulative[i]);
        }
    }
    out
}
