//! Streaming context features for the size-search policy.
//!
//! FRE is the number of interactions an id has taken part in. IND is the
//! mean distance of a user's rated-item feature vectors to the user's mean
//! interest `Q`; POD is the mean distance of an item's raters' `Q` vectors to
//! their centroid. Distances are taken over a recency window of the most
//! recent `W` events; `Q` itself is a running mean over the full history.

use std::collections::{BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::dlinucb::ContextVector;
use crate::error::{DessError, Result};
use crate::harness::Side;

/// Bound on the norm of every context produced here: both components lie in `[0, 1]`.
pub const CONTEXT_BOUND: f64 = std::f64::consts::SQRT_2;

/// Raw per-item feature vectors, all of the same dimension.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ItemFeatureStore {
    dim: usize,
    features: HashMap<u64, Vec<f64>>,
}

impl ItemFeatureStore {
    pub fn new(dim: usize) -> Self {
        Self { dim, features: HashMap::new() }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (u64, Vec<f64>)>) -> Result<Self> {
        let mut store = Self::default();
        for (id, v) in pairs {
            store.insert(id, v)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, id: u64, v: Vec<f64>) -> Result<()> {
        if v.is_empty() {
            return Err(DessError::Config(format!("item {id}: empty feature vector")));
        }
        if self.features.is_empty() && self.dim == 0 {
            self.dim = v.len();
        } else if v.len() != self.dim {
            return Err(DessError::Dimension { expected: self.dim, got: v.len() });
        }
        self.features.insert(id, v);
        Ok(())
    }

    pub fn get(&self, id: u64) -> Option<&[f64]> {
        self.features.get(&id).map(Vec::as_slice)
    }

    /// Feature dimension `f` (0 for an empty store).
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Sorted `(id, vector)` pairs.
    pub fn sorted(&self) -> Vec<(u64, &[f64])> {
        let mut out: Vec<_> = self.features.iter().map(|(k, v)| (*k, v.as_slice())).collect();
        out.sort_by_key(|(k, _)| *k);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorConfig {
    /// Diversity window; `None` means unbounded.
    pub window: Option<usize>,
    pub fre_cap: f64,
    /// Defaults to `sqrt(f)`, the diameter of one-hot feature space.
    pub ind_cap: Option<f64>,
    pub pod_cap: Option<f64>,
}

impl Default for IndicatorConfig {
    fn default() -> Self {
        Self { window: Some(256), fre_cap: 1000.0, ind_cap: None, pod_cap: None }
    }
}

impl IndicatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == Some(0) {
            return Err(DessError::Config("diversity window must be positive".into()));
        }
        let caps = [Some(self.fre_cap), self.ind_cap, self.pod_cap];
        if caps.iter().flatten().any(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(DessError::Config("indicator caps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UserProfile {
    pub count: u64,
    pub rated_items: VecDeque<u64>,
    pub feature_sum: Vec<f64>,
}

impl UserProfile {
    /// Mean interest `Q`; the zero vector before any interaction.
    pub fn mean_interest(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![0.0; self.feature_sum.len()];
        }
        let n = self.count as f64;
        self.feature_sum.iter().map(|s| s / n).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ItemProfile {
    pub count: u64,
    pub raters: VecDeque<u64>,
}

/// Streaming indicator state for all users and items.
#[derive(Debug, Clone)]
pub struct Indicators {
    config: IndicatorConfig,
    features: ItemFeatureStore,
    users: HashMap<u64, UserProfile>,
    items: HashMap<u64, ItemProfile>,
    missing: BTreeSet<u64>,
    zero: Vec<f64>,
}

impl Indicators {
    pub fn new(config: IndicatorConfig, features: ItemFeatureStore) -> Self {
        let zero = vec![0.0; features.dim()];
        Self {
            config,
            features,
            users: HashMap::new(),
            items: HashMap::new(),
            missing: BTreeSet::new(),
            zero,
        }
    }

    pub fn config(&self) -> &IndicatorConfig {
        &self.config
    }

    pub fn features(&self) -> &ItemFeatureStore {
        &self.features
    }

    /// Items seen in the stream without a feature vector; they contribute zeros.
    pub fn missing_items(&self) -> &BTreeSet<u64> {
        &self.missing
    }

    fn feature(&self, item: u64) -> &[f64] {
        self.features.get(item).unwrap_or(&self.zero)
    }

    pub fn record(&mut self, user: u64, item: u64) {
        if self.features.get(item).is_none() && !self.features.is_empty() {
            self.missing.insert(item);
        }
        let window = self.config.window;
        let f = self.features.get(item).map(<[f64]>::to_vec).unwrap_or_else(|| self.zero.clone());

        let profile = self.users.entry(user).or_insert_with(|| UserProfile {
            feature_sum: vec![0.0; f.len()],
            ..Default::default()
        });
        profile.count += 1;
        push_window(&mut profile.rated_items, item, window);
        for (s, v) in profile.feature_sum.iter_mut().zip(&f) {
            *s += v;
        }

        let item_profile = self.items.entry(item).or_default();
        item_profile.count += 1;
        push_window(&mut item_profile.raters, user, window);
    }

    pub fn user(&self, id: u64) -> Option<&UserProfile> {
        self.users.get(&id)
    }

    pub fn item(&self, id: u64) -> Option<&ItemProfile> {
        self.items.get(&id)
    }

    pub fn frequency(&self, id: u64, side: Side) -> u64 {
        match side {
            Side::User => self.users.get(&id).map_or(0, |p| p.count),
            Side::Item => self.items.get(&id).map_or(0, |p| p.count),
        }
    }

    /// User interest diversity.
    pub fn ind(&self, user: u64) -> f64 {
        let Some(p) = self.users.get(&user) else { return 0.0 };
        if p.count < 2 {
            return 0.0;
        }
        let q = p.mean_interest();
        mean_distance(p.rated_items.iter().map(|&i| self.feature(i)), &q)
    }

    /// Item property diversity, using the raters' current mean interests.
    pub fn pod(&self, item: u64) -> f64 {
        let Some(p) = self.items.get(&item) else { return 0.0 };
        if p.raters.len() < 2 {
            return 0.0;
        }
        let qs: Vec<Vec<f64>> = p
            .raters
            .iter()
            .map(|u| self.users.get(u).map_or_else(|| self.zero.clone(), UserProfile::mean_interest))
            .collect();
        let centroid = mean_vector(qs.iter().map(Vec::as_slice), self.features.dim());
        mean_distance(qs.iter().map(Vec::as_slice), &centroid)
    }

    pub fn diversity(&self, id: u64, side: Side) -> f64 {
        match side {
            Side::User => self.ind(id),
            Side::Item => self.pod(id),
        }
    }

    /// Normalized `(FRE, diversity)` context, each component in `[0, 1]`.
    pub fn context_vector(&self, id: u64, side: Side) -> ContextVector {
        let c = &self.config;
        let fre = self.frequency(id, side) as f64;
        let f_norm = ((1.0 + fre).ln() / (1.0 + c.fre_cap).ln()).min(1.0);
        let default_cap = (self.features.dim().max(1) as f64).sqrt();
        let cap = match side {
            Side::User => c.ind_cap,
            Side::Item => c.pod_cap,
        }
        .unwrap_or(default_cap);
        let g_norm = (self.diversity(id, side) / cap).min(1.0);
        ContextVector::new(vec![f_norm, g_norm], CONTEXT_BOUND).expect("components are clamped to [0, 1]")
    }
}

fn push_window(buf: &mut VecDeque<u64>, id: u64, window: Option<usize>) {
    buf.push_back(id);
    if let Some(w) = window {
        while buf.len() > w {
            buf.pop_front();
        }
    }
}

fn mean_vector<'a>(points: impl Iterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut sum = vec![0.0; dim];
    let mut n = 0usize;
    for p in points {
        for (s, v) in sum.iter_mut().zip(p) {
            *s += v;
        }
        n += 1;
    }
    if n > 0 {
        sum.iter_mut().for_each(|s| *s /= n as f64);
    }
    sum
}

fn mean_distance<'a>(points: impl Iterator<Item = &'a [f64]>, centre: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for p in points {
        total += p.iter().zip(centre).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}
