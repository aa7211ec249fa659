//! Ratings and item-feature files, metrics CSVs, and a MovieLens-format
//! stream generator.
//!
//! Ratings: one `user,item,rating,timestamp` per line, comma separated. A
//! first line whose leading field is not an integer is taken as a header.
//! Item features: `item<TAB>v1,v2,...,vf`, one item per line.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DessError, Result};
use crate::harness::{Interaction, SegmentMetrics};
use crate::indicators::ItemFeatureStore;

pub const METRICS_HEADER: &str = "t,acc,loss,regret_user,regret_item,emb_params,train_ms,infer_ms";

fn read(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(DessError::DatasetNotFound(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> DessError {
    DessError::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

/// Read a ratings file and sort it by timestamp (stable).
pub fn parse_ratings(path: &Path) -> Result<Vec<Interaction>> {
    parse_ratings_str(&read(path)?, path)
}

/// As [`parse_ratings`]; `origin` only labels errors.
pub fn parse_ratings_str(text: &str, origin: &Path) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if i == 0 && fields[0].parse::<u64>().is_err() {
            continue;
        }
        if fields.len() != 4 {
            return Err(parse_err(origin, i + 1, format!("expected 4 fields, found {}", fields.len())));
        }
        let user = fields[0].parse::<u64>().map_err(|e| parse_err(origin, i + 1, format!("user id: {e}")))?;
        let item = fields[1].parse::<u64>().map_err(|e| parse_err(origin, i + 1, format!("item id: {e}")))?;
        let rating = fields[2].parse::<f64>().map_err(|e| parse_err(origin, i + 1, format!("rating: {e}")))?;
        if !rating.is_finite() {
            return Err(parse_err(origin, i + 1, "rating is not finite"));
        }
        let ts = fields[3].parse::<i64>().map_err(|e| parse_err(origin, i + 1, format!("timestamp: {e}")))?;
        out.push(Interaction::new(user, item, rating, ts));
    }
    if out.is_empty() {
        return Err(DessError::EmptyStream);
    }
    out.sort_by_key(|x| x.timestamp);
    Ok(out)
}

pub fn ratings_to_string(stream: &[Interaction]) -> String {
    let mut out = String::with_capacity(stream.len() * 24);
    for x in stream {
        let _ = writeln!(out, "{},{},{},{}", x.user, x.item, x.rating, x.timestamp);
    }
    out
}

pub fn write_ratings(path: &Path, stream: &[Interaction]) -> Result<()> {
    Ok(fs::write(path, ratings_to_string(stream))?)
}

pub fn parse_item_features(path: &Path) -> Result<ItemFeatureStore> {
    parse_item_features_str(&read(path)?, path)
}

pub fn parse_item_features_str(text: &str, origin: &Path) -> Result<ItemFeatureStore> {
    let mut store = ItemFeatureStore::default();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let (id, values) = raw.split_once('\t').ok_or_else(|| parse_err(origin, i + 1, "expected id<TAB>values"))?;
        let id = id.trim().parse::<u64>().map_err(|e| parse_err(origin, i + 1, format!("item id: {e}")))?;
        let v = values
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| parse_err(origin, i + 1, format!("feature: {e}")))?;
        store.insert(id, v).map_err(|e| parse_err(origin, i + 1, e.to_string()))?;
    }
    Ok(store)
}

pub fn features_to_string(store: &ItemFeatureStore) -> String {
    let mut out = String::new();
    for (id, v) in store.sorted() {
        let _ = write!(out, "{id}\t");
        for (k, x) in v.iter().enumerate() {
            let sep = if k == 0 { "" } else { "," };
            let _ = write!(out, "{sep}{x}");
        }
        out.push('\n');
    }
    out
}

pub fn metrics_to_csv(rows: &[SegmentMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            m.t, m.acc, m.loss, m.regret_user, m.regret_item, m.emb_params, m.train_ms, m.infer_ms
        );
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<SegmentMetrics>> {
    let origin = Path::new("<metrics>");
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        _ => return Err(parse_err(origin, 1, "unexpected metrics header")),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(parse_err(origin, i + 1, format!("expected 8 columns, found {}", f.len())));
        }
        let e = |what: &str| parse_err(origin, i + 1, format!("bad {what}"));
        out.push(SegmentMetrics {
            t: f[0].parse().map_err(|_| e("t"))?,
            acc: f[1].parse().map_err(|_| e("acc"))?,
            loss: f[2].parse().map_err(|_| e("loss"))?,
            regret_user: f[3].parse().map_err(|_| e("regret_user"))?,
            regret_item: f[4].parse().map_err(|_| e("regret_item"))?,
            emb_params: f[5].parse().map_err(|_| e("emb_params"))?,
            train_ms: f[6].parse().map_err(|_| e("train_ms"))?,
            infer_ms: f[7].parse().map_err(|_| e("infer_ms"))?,
        });
    }
    Ok(out)
}

/// Shape of a generated MovieLens-like stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRatings {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub genres: usize,
    pub factors: usize,
    /// Zipf exponent of item popularity.
    pub skew: f64,
    /// Nominal length of the timeline in seconds.
    pub span: i64,
    pub seed: u64,
}

impl Default for SyntheticRatings {
    fn default() -> Self {
        Self {
            users: 1000,
            items: 1700,
            interactions: 100_000,
            genres: 19,
            factors: 8,
            skew: 1.15,
            span: 20_000_000,
            seed: 7,
        }
    }
}

/// Minimum number of ratings per user, as in the MovieLens releases.
const MIN_PER_USER: usize = 20;

/// Half-star ratings from a latent-factor model with genre affinities.
///
/// Users sign up at uniform times and spend a lognormal rating budget in a
/// short chain of sessions; items have Zipf popularity and a release time.
/// Item features are multi-hot genre vectors. Ids are 1-based, no (user,
/// item) pair repeats, and the stream is sorted by timestamp.
pub fn generate_ratings(cfg: &SyntheticRatings) -> Result<(Vec<Interaction>, ItemFeatureStore)> {
    if cfg.users == 0 || cfg.items == 0 || cfg.genres == 0 || cfg.factors == 0 || cfg.span <= 0 {
        return Err(DessError::Config("generator sizes must be positive".into()));
    }
    if cfg.interactions < cfg.users * MIN_PER_USER || cfg.interactions > cfg.users * cfg.items / 4 {
        return Err(DessError::Config("interaction count does not fit the user-item grid".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let span = cfg.span as f64;
    let f = cfg.factors;
    let scale = 1.0 / (f as f64).sqrt();
    let latent = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..f).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect() };
    let bias = Normal::new(0.0, 0.35).expect("valid");
    let noise = Normal::new(0.0, 0.45).expect("valid");

    let mut item_genres = Vec::with_capacity(cfg.items);
    let mut item_latent = Vec::with_capacity(cfg.items);
    let mut item_bias = Vec::with_capacity(cfg.items);
    let mut release = Vec::with_capacity(cfg.items);
    for _ in 0..cfg.items {
        let n = rng.gen_range(1..=3.min(cfg.genres));
        item_genres.push(rand::seq::index::sample(&mut rng, cfg.genres, n).into_vec());
        item_latent.push(latent(&mut rng));
        item_bias.push(bias.sample(&mut rng));
        release.push(if rng.gen_bool(0.6) { 0.0 } else { rng.gen_range(0.0..0.8 * span) });
    }
    let mut ranks: Vec<f64> = (1..=cfg.items).map(|r| (r as f64).powf(-cfg.skew)).collect();
    ranks.shuffle(&mut rng);
    let item_pick = WeightedIndex::new(&ranks).map_err(|e| DessError::Config(e.to_string()))?;

    let weights: Vec<f64> = (0..cfg.users).map(|_| rng.sample::<f64, _>(StandardNormal).exp()).collect();
    let total_w: f64 = weights.iter().sum();
    let spare = (cfg.interactions - cfg.users * MIN_PER_USER) as f64;
    let mut budgets: Vec<usize> = weights.iter().map(|w| MIN_PER_USER + (spare * w / total_w).floor() as usize).collect();
    let short = cfg.interactions - budgets.iter().sum::<usize>();
    for k in 0..short {
        budgets[k % cfg.users] += 1;
    }
    let cap = cfg.items / 2;
    let mut overflow = 0;
    for b in budgets.iter_mut() {
        if *b > cap {
            overflow += *b - cap;
            *b = cap;
        }
    }
    for b in budgets.iter_mut() {
        let room = (cap - *b).min(overflow);
        *b += room;
        overflow -= room;
    }

    let mut events: Vec<(f64, Interaction)> = Vec::with_capacity(cfg.interactions);
    for (u, &budget) in budgets.iter().enumerate() {
        let p = latent(&mut rng);
        let b_u = bias.sample(&mut rng);
        let taste: Vec<f64> = (0..cfg.genres).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.3).collect();
        let mut seen = HashSet::with_capacity(budget);
        let mut clock = rng.gen_range(0.0..0.95 * span);
        let mut left = budget;
        while left > 0 {
            let session = rng.gen_range(5..=40).min(left);
            let mut emitted = 0;
            let mut tries = 0;
            while emitted < session {
                tries += 1;
                let i = item_pick.sample(&mut rng);
                if release[i] > clock && tries < 200 * session {
                    continue;
                }
                let affinity: f64 = item_genres[i].iter().map(|&g| taste[g]).sum();
                // Users mostly rate what they expect to like.
                let keen = tries >= 200 * session || rng.gen::<f64>() <= 0.5 + affinity.clamp(-0.5, 0.5);
                if !keen || !seen.insert(i) {
                    continue;
                }
                let dot: f64 = p.iter().zip(&item_latent[i]).map(|(a, b)| a * b).sum();
                let score = 3.5 + b_u + item_bias[i] + 1.2 * dot + affinity + noise.sample(&mut rng);
                let rating = ((score * 2.0).round() / 2.0).clamp(0.5, 5.0);
                clock += rng.gen_range(1.0..90.0);
                events.push((clock, Interaction::new(u as u64 + 1, i as u64 + 1, rating, 0)));
                emitted += 1;
            }
            left -= session;
            let mean_gap = if rng.gen_bool(0.1) { span / 10.0 } else { span / 300.0 };
            clock += -mean_gap * (1.0 - rng.gen::<f64>()).ln();
        }
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let stream = events
        .into_iter()
        .map(|(t, mut x)| {
            x.timestamp = 946_684_800 + t as i64;
            x
        })
        .collect();

    let mut features = ItemFeatureStore::default();
    for (i, gs) in item_genres.iter().enumerate() {
        let mut v = vec![0.0; cfg.genres];
        for &g in gs {
            v[g] = 1.0;
        }
        features.insert(i as u64 + 1, v)?;
    }
    Ok((stream, features))
}
