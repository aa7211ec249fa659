//! Discounted disjoint-arm linear UCB.
//!
//! Each arm keeps its own discounted ridge state. `V` accumulates the
//! discount-weighted design matrix, `V_tilde` the squared-discount one; the
//! exploration bonus is `beta * sqrt(x' V^-1 V_tilde V^-1 x)`. With
//! `gamma = 1` the recursions reduce to stationary LinUCB.
//!
//! Discounting is applied per arm: an arm's state only moves when that arm is
//! updated, so the weight of an observation decays with the number of later
//! updates to the same arm.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DessError, Result};

/// Hyperparameters of a discounted LinUCB bandit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BanditConfig {
    /// Ridge regularization.
    pub lambda: f64,
    /// Discount factor in (0, 1].
    pub gamma: f64,
    /// Subgaussian constant; rewards must lie in `[0, 2 sigma]`.
    pub sigma: f64,
    /// Failure probability of the confidence ellipsoid.
    pub delta: f64,
    /// Upper bound on the norm of the true parameters.
    pub s_bound: f64,
    /// Upper bound on the norm of contexts.
    pub u_bound: f64,
    pub dim: usize,
    pub arms: usize,
}

impl Default for BanditConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            gamma: 0.99,
            sigma: 0.5,
            delta: 0.1,
            s_bound: 1.0,
            u_bound: std::f64::consts::SQRT_2,
            dim: 2,
            arms: 2,
        }
    }
}

impl BanditConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(DessError::DiscountOutOfRange(self.gamma));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(DessError::Config(format!("delta must be in (0,1), got {}", self.delta)));
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("sigma", self.sigma),
            ("S", self.s_bound),
            ("U", self.u_bound),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DessError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.dim < 1 {
            return Err(DessError::Config("context dimension must be >= 1".into()));
        }
        if self.arms < 2 {
            return Err(DessError::Config(format!("need at least 2 arms, got {}", self.arms)));
        }
        Ok(())
    }

    /// Largest admissible reward.
    pub fn reward_max(&self) -> f64 {
        2.0 * self.sigma
    }
}

/// A context whose Euclidean norm is bounded by `U`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextVector(DVector<f64>);

impl ContextVector {
    pub fn new(values: Vec<f64>, u_bound: f64) -> Result<Self> {
        let x = DVector::from_vec(values);
        let norm = x.norm();
        // Allow rounding slack when the context sits exactly on the bound.
        if !norm.is_finite() || norm > u_bound * (1.0 + 1e-12) {
            return Err(DessError::ContextNorm { norm, bound: u_bound });
        }
        Ok(Self(x))
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Discounted ridge state of a single arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmState {
    pub v: DMatrix<f64>,
    pub v_tilde: DMatrix<f64>,
    pub b: DVector<f64>,
    pub theta_hat: DVector<f64>,
}

impl ArmState {
    pub fn new(dim: usize, lambda: f64) -> Self {
        Self {
            v: DMatrix::identity(dim, dim) * lambda,
            v_tilde: DMatrix::identity(dim, dim) * lambda,
            b: DVector::zeros(dim),
            theta_hat: DVector::zeros(dim),
        }
    }

    /// `x' V^-1 V_tilde V^-1 x`, clamped at zero against rounding.
    pub fn bonus_quadratic(&self, x: &ContextVector) -> f64 {
        let y = solve_spd(&self.v, x.as_vector());
        let q = y.dot(&(&self.v_tilde * &y));
        q.max(0.0)
    }

    pub fn predicted_reward(&self, x: &ContextVector) -> f64 {
        self.theta_hat.dot(x.as_vector())
    }

    fn apply(&mut self, x: &DVector<f64>, r: f64, gamma: f64, lambda: f64) {
        let dim = x.len();
        let outer = x * x.transpose();
        let g2 = gamma * gamma;
        self.v = &self.v * gamma + &outer;
        self.v_tilde = &self.v_tilde * g2 + &outer;
        for i in 0..dim {
            self.v[(i, i)] += (1.0 - gamma) * lambda;
            self.v_tilde[(i, i)] += (1.0 - g2) * lambda;
        }
        self.b = &self.b * gamma + x * r;
        self.theta_hat = solve_spd(&self.v, &self.b);
    }
}

/// Solve `A y = rhs` for symmetric positive definite `A`.
fn solve_spd(a: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    match a.clone().cholesky() {
        Some(ch) => ch.solve(rhs),
        // V >= lambda I, so this only triggers on pathological rounding.
        None => a.clone().lu().solve(rhs).expect("design matrix is singular"),
    }
}

/// Full bandit: configuration, per-arm state and the global update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditState {
    pub config: BanditConfig,
    pub arms: Vec<ArmState>,
    pub step: u64,
}

impl BanditState {
    pub fn new(config: BanditConfig) -> Result<Self> {
        config.validate()?;
        let arms = (0..config.arms).map(|_| ArmState::new(config.dim, config.lambda)).collect();
        Ok(Self { config, arms, step: 0 })
    }

    pub fn context(&self, values: Vec<f64>) -> Result<ContextVector> {
        let x = ContextVector::new(values, self.config.u_bound)?;
        self.check_dim(&x)?;
        Ok(x)
    }

    fn check_dim(&self, x: &ContextVector) -> Result<()> {
        if x.dim() != self.config.dim {
            return Err(DessError::Dimension { expected: self.config.dim, got: x.dim() });
        }
        Ok(())
    }

    /// Confidence-ellipsoid width at the current step count.
    pub fn beta(&self) -> f64 {
        beta_at(&self.config, self.step)
    }

    /// UCB-maximizing arm at the current `beta`; ties go to the lowest index.
    pub fn select_arm(&self, x: &ContextVector) -> usize {
        self.select_arm_with_beta(x, self.beta())
    }

    pub fn select_arm_with_beta(&self, x: &ContextVector, beta: f64) -> usize {
        argmax(self.arms.iter().map(|arm| ucb_score(arm, x, beta)))
    }

    /// Pure exploitation: argmax of `x' theta_hat`, ties to the lowest index.
    pub fn select_greedy(&self, x: &ContextVector) -> usize {
        argmax(self.arms.iter().map(|arm| arm.predicted_reward(x)))
    }

    pub fn scores(&self, x: &ContextVector) -> Vec<f64> {
        let beta = self.beta();
        self.arms.iter().map(|arm| ucb_score(arm, x, beta)).collect()
    }

    pub fn update(&mut self, arm: usize, x: &ContextVector, reward: f64) -> Result<()> {
        if arm >= self.arms.len() {
            return Err(DessError::ArmIndex { arm, arms: self.arms.len() });
        }
        self.check_dim(x)?;
        let max = self.config.reward_max();
        if !(0.0..=max).contains(&reward) {
            return Err(DessError::RewardOutOfRange { reward, max });
        }
        let BanditConfig { gamma, lambda, .. } = self.config;
        self.arms[arm].apply(x.as_vector(), reward, gamma, lambda);
        self.step += 1;
        Ok(())
    }

    /// Serialize to the line-oriented text checkpoint format.
    ///
    /// One `key value...` record per line; matrices are written row-major.
    /// Floats use Rust's shortest round-trip representation.
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut out = String::from("dlinucb v1\n");
        let _ = writeln!(out, "lambda {}", c.lambda);
        let _ = writeln!(out, "gamma {}", c.gamma);
        let _ = writeln!(out, "sigma {}", c.sigma);
        let _ = writeln!(out, "delta {}", c.delta);
        let _ = writeln!(out, "S {}", c.s_bound);
        let _ = writeln!(out, "U {}", c.u_bound);
        let _ = writeln!(out, "d {}", c.dim);
        let _ = writeln!(out, "K {}", c.arms);
        let _ = writeln!(out, "step {}", self.step);
        for (a, arm) in self.arms.iter().enumerate() {
            let _ = writeln!(out, "arm {a}");
            write_values(&mut out, "V", arm.v.transpose().as_slice());
            write_values(&mut out, "V_tilde", arm.v_tilde.transpose().as_slice());
            write_values(&mut out, "b", arm.b.as_slice());
            write_values(&mut out, "theta_hat", arm.theta_hat.as_slice());
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let bad = |m: &str| DessError::Checkpoint(m.to_string());
        if lines.next() != Some("dlinucb v1") {
            return Err(bad("missing header"));
        }
        let mut field = |key: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| bad("truncated"))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(DessError::Checkpoint(format!("expected `{key}`, found `{line}`")));
            }
            Ok(parts.map(str::to_string).collect())
        };
        let scalar = |v: Vec<String>| -> Result<f64> {
            v.first().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad scalar"))
        };
        let config = BanditConfig {
            lambda: scalar(field("lambda")?)?,
            gamma: scalar(field("gamma")?)?,
            sigma: scalar(field("sigma")?)?,
            delta: scalar(field("delta")?)?,
            s_bound: scalar(field("S")?)?,
            u_bound: scalar(field("U")?)?,
            dim: scalar(field("d")?)? as usize,
            arms: scalar(field("K")?)? as usize,
        };
        config.validate()?;
        let step: u64 = field("step")?
            .first()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad step"))?;
        let d = config.dim;
        let mut arms = Vec::with_capacity(config.arms);
        for a in 0..config.arms {
            if field("arm")?.first().map(String::as_str) != Some(&a.to_string()) {
                return Err(bad("arm index out of order"));
            }
            let mut floats = |key: &str, n: usize| -> Result<Vec<f64>> {
                let v: Vec<f64> = field(key)?
                    .iter()
                    .map(|s| s.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| DessError::Checkpoint(format!("{key}: {e}")))?;
                if v.len() != n {
                    return Err(DessError::Checkpoint(format!("{key}: expected {n} values")));
                }
                Ok(v)
            };
            arms.push(ArmState {
                v: DMatrix::from_row_slice(d, d, &floats("V", d * d)?),
                v_tilde: DMatrix::from_row_slice(d, d, &floats("V_tilde", d * d)?),
                b: DVector::from_vec(floats("b", d)?),
                theta_hat: DVector::from_vec(floats("theta_hat", d)?),
            });
        }
        Ok(Self { config, arms, step })
    }
}

fn write_values(out: &mut String, key: &str, values: &[f64]) {
    out.push_str(key);
    for v in values {
        let _ = write!(out, " {v}");
    }
    out.push('\n');
}

fn argmax(scores: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, s) in scores.enumerate() {
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

/// Confidence width for interaction index `l`.
///
/// `sqrt(lambda) S + sigma sqrt(2 ln(1/delta) + d ln(1 + U^2 (1 - gamma^(2l)) / (lambda d (1 - gamma^2))))`,
/// with the geometric ratio replaced by its limit `l` when `gamma = 1`.
pub fn beta_at(config: &BanditConfig, l: u64) -> f64 {
    let BanditConfig { lambda, gamma, sigma, delta, s_bound, u_bound, dim, .. } = *config;
    let d = dim as f64;
    let geometric = if gamma >= 1.0 {
        l as f64
    } else {
        let g2 = gamma * gamma;
        // powi takes i32; larger l means gamma^(2l) is already zero in f64.
        let pow = if l > (i32::MAX / 2) as u64 { 0.0 } else { g2.powi(l as i32) };
        (1.0 - pow) / (1.0 - g2)
    };
    let log_det = d * (1.0 + u_bound * u_bound * geometric / (lambda * d)).ln();
    lambda.sqrt() * s_bound + sigma * (2.0 * (1.0 / delta).ln() + log_det).sqrt()
}

/// `x' theta_hat + beta sqrt(x' V^-1 V_tilde V^-1 x)`.
pub fn ucb_score(arm: &ArmState, x: &ContextVector, beta: f64) -> f64 {
    arm.predicted_reward(x) + beta * arm.bonus_quadratic(x).sqrt()
}

/// One observation in a bandit trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub arm: usize,
    pub x: Vec<f64>,
    pub reward: f64,
}

/// Closed-form discounted ridge estimate for `arm` after the first `upto`
/// observations of `history`.
///
/// Observation `s` of the arm is weighted by `gamma^(n - s)`, where `n` counts
/// the arm's own observations up to `upto`. Builds the weighted sums directly
/// and solves with LU; it shares no code with the online recursion.
pub fn batch_solve(history: &[Observation], gamma: f64, lambda: f64, arm: usize, upto: usize) -> DVector<f64> {
    let dim = history.first().map_or(0, |o| o.x.len());
    let own: Vec<&Observation> = history.iter().take(upto).filter(|o| o.arm == arm).collect();
    let n = own.len();
    let mut v = DMatrix::<f64>::identity(dim, dim) * lambda;
    let mut b = DVector::<f64>::zeros(dim);
    for (s, obs) in own.iter().enumerate() {
        let w = gamma.powi((n - 1 - s) as i32);
        for i in 0..dim {
            b[i] += w * obs.x[i] * obs.reward;
            for j in 0..dim {
                v[(i, j)] += w * obs.x[i] * obs.x[j];
            }
        }
    }
    if dim == 0 {
        return b;
    }
    v.lu().solve(&b).expect("lambda I keeps the system nonsingular")
}

/// Discount factor `1 - (B_L / (sqrt(d) L))^(2/5)`, clamped to `[0.5, 1 - 1e-6]`.
pub fn corollary_gamma(budget: f64, dim: usize, horizon: u64) -> f64 {
    const GAMMA_MIN: f64 = 0.5;
    const GAMMA_MAX: f64 = 1.0 - 1e-6;
    let ratio = budget.max(0.0) / ((dim.max(1) as f64).sqrt() * horizon.max(1) as f64);
    let raw = 1.0 - ratio.powf(0.4);
    raw.clamp(GAMMA_MIN, GAMMA_MAX)
}
