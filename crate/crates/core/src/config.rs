//! Run configuration and its flat `key = value` text form.
//!
//! One setting per line, `#` starts a comment, unknown keys are rejected.
//! Keys and defaults:
//!
//! ```text
//! mode = dess_fre            # dess_cv | dess_fre | fixed | stationary_ablation | synthetic
//! ratings = ratings.csv      # user,item,rating,timestamp
//! features =                 # item<TAB>v1,...,vf; required by dess_cv
//! max_interactions =         # keep only the first n events after sorting
//! segment_length = 5000
//! train_frac = 0.8
//! task = binary              # binary | multiclass
//! head = mlp                 # mlp | mf
//! ladder = 2,4,8,16,64,128
//! fixed_size =               # fixed mode; defaults to the first ladder size
//! hidden = 512
//! eta = 0.001
//! l2 = 0.001
//! batch = 500
//! eps_bn = 0.00001
//! bn_momentum = 0.1
//! cold_init = false
//! lambda = 1
//! gamma = 0.99
//! sigma = 0.5
//! delta = 0.1
//! s_bound = 1
//! window = 256               # or `none` for unbounded
//! fre_cap = 1000
//! ind_cap =                  # defaults to sqrt(f)
//! pod_cap =
//! reward_threshold = 0
//! reward_continuous = false
//! timing = false             # record wall-clock columns (breaks byte-identical reruns)
//! seed = 0
//! out = out
//! drift = abrupt             # synthetic mode: abrupt | smooth
//! changes = 2
//! magnitude = 0.6
//! rate = 0.00001
//! horizon = 50000
//! budget =                   # defaults to the realized budget
//! dim = 2
//! arms = 2
//! noise = 0.1
//! u_bound = 1
//! seeds = 10
//! checkpoint_every = 1000
//! ```

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dlinucb::BanditConfig;
use crate::error::{DessError, Result};
use crate::harness::RewardConfig;
use crate::indicators::{IndicatorConfig, CONTEXT_BOUND};
use crate::model::{ModelConfig, SizeLadder};
use crate::synthetic::{DriftSpec, EnvConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Bandit search on frequency and both diversity indicators.
    DessCv,
    /// Bandit search on frequency only.
    DessFre,
    /// Every embedding at one size.
    Fixed,
    /// Bandit search with a stationary LinUCB (`gamma = 1`).
    StationaryAblation,
    /// Drifting-bandit regret benchmark.
    Synthetic,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::DessCv => "dess_cv",
            Mode::DessFre => "dess_fre",
            Mode::Fixed => "fixed",
            Mode::StationaryAblation => "stationary_ablation",
            Mode::Synthetic => "synthetic",
        })
    }
}

impl FromStr for Mode {
    type Err = DessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dess_cv" => Ok(Mode::DessCv),
            "dess_fre" => Ok(Mode::DessFre),
            "fixed" => Ok(Mode::Fixed),
            "stationary_ablation" => Ok(Mode::StationaryAblation),
            "synthetic" => Ok(Mode::Synthetic),
            other => Err(DessError::Config(format!("unknown mode: {other}"))),
        }
    }
}

/// Synthetic benchmark settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSettings {
    pub smooth: bool,
    pub changes: usize,
    pub magnitude: f64,
    pub rate: f64,
    pub horizon: usize,
    pub budget: Option<f64>,
    pub env: EnvConfig,
    pub seeds: usize,
    pub checkpoint_every: usize,
}

impl Default for SyntheticSettings {
    fn default() -> Self {
        Self {
            smooth: false,
            changes: 2,
            magnitude: 0.6,
            rate: 1e-5,
            horizon: 50_000,
            budget: None,
            env: EnvConfig::default(),
            seeds: 10,
            checkpoint_every: 1000,
        }
    }
}

impl SyntheticSettings {
    pub fn spec(&self) -> DriftSpec {
        let mut spec = if self.smooth {
            DriftSpec::smooth(self.rate, self.horizon)
        } else {
            DriftSpec::abrupt(self.changes, self.magnitude, self.horizon)
        };
        if let Some(b) = self.budget {
            spec.budget = b;
        }
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub ratings: PathBuf,
    pub features: Option<PathBuf>,
    pub max_interactions: Option<usize>,
    pub segment_length: usize,
    pub train_frac: f64,
    pub ladder: SizeLadder,
    pub fixed_size: Option<usize>,
    pub model: ModelConfig,
    pub bandit: BanditConfig,
    pub indicators: IndicatorConfig,
    pub reward: RewardConfig,
    pub timing: bool,
    pub seed: u64,
    pub out: PathBuf,
    pub synthetic: SyntheticSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::DessFre,
            ratings: PathBuf::from("ratings.csv"),
            features: None,
            max_interactions: None,
            segment_length: 5000,
            train_frac: 0.8,
            ladder: SizeLadder::default(),
            fixed_size: None,
            model: ModelConfig::default(),
            bandit: BanditConfig { u_bound: CONTEXT_BOUND, ..BanditConfig::default() },
            indicators: IndicatorConfig::default(),
            reward: RewardConfig::default(),
            timing: false,
            seed: 0,
            out: PathBuf::from("out"),
            synthetic: SyntheticSettings::default(),
        }
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| DessError::Config(format!("{key}: cannot parse {v:?}")))
}

fn optional<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v.is_empty() || v == "none" {
        Ok(None)
    } else {
        value(key, v).map(Some)
    }
}

fn show<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DessError::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| DessError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(DessError::Config(format!("config file not found: {}", path.display())));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Apply one setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let b = &mut self.bandit;
        let s = &mut self.synthetic;
        match key {
            "mode" => self.mode = v.parse()?,
            "ratings" => self.ratings = PathBuf::from(v),
            "features" => self.features = (!v.is_empty()).then(|| PathBuf::from(v)),
            "max_interactions" => self.max_interactions = optional(key, v)?,
            "segment_length" => self.segment_length = value(key, v)?,
            "train_frac" => self.train_frac = value(key, v)?,
            "task" => m.task = v.parse()?,
            "head" => m.head = v.parse()?,
            "ladder" => {
                let sizes = v.split(',').map(|t| value(key, t.trim())).collect::<Result<Vec<usize>>>()?;
                self.ladder = SizeLadder::new(sizes)?;
            }
            "fixed_size" => self.fixed_size = optional(key, v)?,
            "hidden" => m.hidden = value(key, v)?,
            "eta" => m.eta = value(key, v)?,
            "l2" => m.l2 = value(key, v)?,
            "batch" => m.batch = value(key, v)?,
            "eps_bn" => m.eps_bn = value(key, v)?,
            "bn_momentum" => m.bn_momentum = value(key, v)?,
            "cold_init" => m.cold_init = value(key, v)?,
            "lambda" => b.lambda = value(key, v)?,
            "gamma" => b.gamma = value(key, v)?,
            "sigma" => b.sigma = value(key, v)?,
            "delta" => b.delta = value(key, v)?,
            "s_bound" => b.s_bound = value(key, v)?,
            "window" => self.indicators.window = optional(key, v)?,
            "fre_cap" => self.indicators.fre_cap = value(key, v)?,
            "ind_cap" => self.indicators.ind_cap = optional(key, v)?,
            "pod_cap" => self.indicators.pod_cap = optional(key, v)?,
            "reward_threshold" => self.reward.threshold = value(key, v)?,
            "reward_continuous" => self.reward.continuous = value(key, v)?,
            "timing" => self.timing = value(key, v)?,
            "seed" => self.seed = value(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "drift" => {
                s.smooth = match v {
                    "abrupt" => false,
                    "smooth" => true,
                    other => return Err(DessError::Config(format!("unknown drift: {other}"))),
                }
            }
            "changes" => s.changes = value(key, v)?,
            "magnitude" => s.magnitude = value(key, v)?,
            "rate" => s.rate = value(key, v)?,
            "horizon" => s.horizon = value(key, v)?,
            "budget" => s.budget = optional(key, v)?,
            "dim" => s.env.dim = value(key, v)?,
            "arms" => s.env.arms = value(key, v)?,
            "noise" => s.env.noise = value(key, v)?,
            "u_bound" => s.env.u_bound = value(key, v)?,
            "seeds" => s.seeds = value(key, v)?,
            "checkpoint_every" => s.checkpoint_every = value(key, v)?,
            other => return Err(DessError::Config(format!("unknown key: {other}"))),
        }
        Ok(())
    }

    /// The resolved configuration in the same format [`RunConfig::parse`] reads.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let b = &self.bandit;
        let s = &self.synthetic;
        let ladder: Vec<String> = self.ladder.sizes().iter().map(ToString::to_string).collect();
        let features = self.features.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let pairs: Vec<(&str, String)> = vec![
            ("mode", self.mode.to_string()),
            ("ratings", self.ratings.display().to_string()),
            ("features", features),
            ("max_interactions", show(&self.max_interactions)),
            ("segment_length", self.segment_length.to_string()),
            ("train_frac", self.train_frac.to_string()),
            ("task", m.task.to_string()),
            ("head", m.head.to_string()),
            ("ladder", ladder.join(",")),
            ("fixed_size", show(&self.fixed_size)),
            ("hidden", m.hidden.to_string()),
            ("eta", m.eta.to_string()),
            ("l2", m.l2.to_string()),
            ("batch", m.batch.to_string()),
            ("eps_bn", m.eps_bn.to_string()),
            ("bn_momentum", m.bn_momentum.to_string()),
            ("cold_init", m.cold_init.to_string()),
            ("lambda", b.lambda.to_string()),
            ("gamma", b.gamma.to_string()),
            ("sigma", b.sigma.to_string()),
            ("delta", b.delta.to_string()),
            ("s_bound", b.s_bound.to_string()),
            ("window", self.indicators.window.map(|w| w.to_string()).unwrap_or_else(|| "none".into())),
            ("fre_cap", self.indicators.fre_cap.to_string()),
            ("ind_cap", show(&self.indicators.ind_cap)),
            ("pod_cap", show(&self.indicators.pod_cap)),
            ("reward_threshold", self.reward.threshold.to_string()),
            ("reward_continuous", self.reward.continuous.to_string()),
            ("timing", self.timing.to_string()),
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("drift", if s.smooth { "smooth" } else { "abrupt" }.to_string()),
            ("changes", s.changes.to_string()),
            ("magnitude", s.magnitude.to_string()),
            ("rate", s.rate.to_string()),
            ("horizon", s.horizon.to_string()),
            ("budget", show(&s.budget)),
            ("dim", s.env.dim.to_string()),
            ("arms", s.env.arms.to_string()),
            ("noise", s.env.noise.to_string()),
            ("u_bound", s.env.u_bound.to_string()),
            ("seeds", s.seeds.to_string()),
            ("checkpoint_every", s.checkpoint_every.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Model settings with the run seed applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { seed: self.seed, ..self.model }
    }

    /// Ladder actually used by the model in this mode.
    pub fn effective_ladder(&self) -> SizeLadder {
        match self.mode {
            Mode::Fixed => SizeLadder::fixed(self.fixed_size.unwrap_or(self.ladder.sizes()[0])),
            _ => self.ladder.clone(),
        }
    }

    pub fn bandit_config(&self) -> BanditConfig {
        match self.mode {
            Mode::StationaryAblation => BanditConfig { gamma: 1.0, ..self.bandit },
            _ => self.bandit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == Mode::Synthetic {
            let s = &self.synthetic;
            if s.seeds == 0 || s.checkpoint_every == 0 {
                return Err(DessError::Config("seeds and checkpoint_every must be positive".into()));
            }
            return s.spec().validate();
        }
        if self.mode == Mode::DessCv && self.features.is_none() {
            return Err(DessError::Config("dess_cv needs an item-features file (key `features`)".into()));
        }
        if self.segment_length < 2 || !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(DessError::Config("need segment_length >= 2 and 0 < train_frac < 1".into()));
        }
        if self.fixed_size == Some(0) {
            return Err(DessError::Config("fixed_size must be positive".into()));
        }
        self.model_config().validate()?;
        self.bandit_config().validate()?;
        self.indicators.validate()
    }

}
