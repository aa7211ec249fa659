//! Embedding-size-adaptive recommendation model.
//!
//! Every id owns an embedding at some rung `i` of a [`SizeLadder`]. A shared
//! per-side chain of affine maps `W_{k,k+1}, b_k` lifts it to the top size
//! `s_n`, where it is batch-normalized and squashed with `tanh`. The two
//! lifted vectors feed either a concatenation MLP or a dot-product head.
//!
//! Gradients are written out by hand. Dense parameters (chains and head)
//! live in one flat vector described by [`Layout`], which keeps the optimizer
//! and the finite-difference checks simple.

mod checkpoint;
pub mod layers;
mod tensor;

use std::borrow::Cow;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DessError, Result};
use crate::harness::{Interaction, Side};
use layers::{bn_backward, bn_forward, binary_loss_grad, multiclass_loss_grad, BnCache, RunningStats};
use tensor::{axpy, dot, matvec, matvec_t_acc, outer_acc, sigmoid, Mat};

pub use layers::{cross_entropy, mse_loss};

/// Number of classes of the multiclass (5-star) task.
pub const NUM_CLASSES: usize = 5;

/// Candidate embedding sizes, strictly increasing.
///
/// A single-size ladder describes a fixed-size model: there is nothing to
/// climb and the transform chain is empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeLadder {
    sizes: Vec<usize>,
}

impl Default for SizeLadder {
    fn default() -> Self {
        Self { sizes: vec![2, 4, 8, 16, 64, 128] }
    }
}

impl SizeLadder {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() || sizes[0] == 0 {
            return Err(DessError::Config("size ladder needs positive sizes".into()));
        }
        if sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DessError::Config(format!("size ladder must be strictly increasing: {sizes:?}")));
        }
        Ok(Self { sizes })
    }

    pub fn fixed(size: usize) -> Self {
        Self { sizes: vec![size.max(1)] }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn size(&self, rung: usize) -> usize {
        self.sizes[rung]
    }

    pub fn top_rung(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn top_size(&self) -> usize {
        self.sizes[self.top_rung()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Mlp,
    Mf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Binary,
    Multiclass,
}

impl Task {
    pub fn outputs(self) -> usize {
        match self {
            Task::Binary => 1,
            Task::Multiclass => NUM_CLASSES,
        }
    }
}

macro_rules! text_enum {
    ($ty:ty { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = DessError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok(Self::$variant),)+
                    other => Err(DessError::Config(format!("unknown {}: {other}", stringify!($ty).to_lowercase()))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $name,)+ })
            }
        }
    };
}

text_enum!(Head { Mlp => "mlp", Mf => "mf" });
text_enum!(Task { Binary => "binary", Multiclass => "multiclass" });

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub head: Head,
    pub task: Task,
    pub hidden: usize,
    /// Learning rate of both the optimizer and the temporary tuning step.
    pub eta: f64,
    /// Weight decay.
    pub l2: f64,
    pub batch: usize,
    pub eps_bn: f64,
    pub bn_momentum: f64,
    /// Batch-norm + tanh blocks on; switching off is a test hook.
    pub normalize: bool,
    /// Replace warm initialization on expand with fresh random values.
    pub cold_init: bool,
    /// Half-width of the uniform noise added to the identity chain init.
    pub chain_noise: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            head: Head::Mlp,
            task: Task::Binary,
            hidden: 512,
            eta: 0.001,
            l2: 0.001,
            batch: 500,
            eps_bn: 1e-5,
            bn_momentum: 0.1,
            normalize: true,
            cold_init: false,
            chain_noise: 0.01,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("eta", self.eta),
            ("eps_bn", self.eps_bn),
            ("bn_momentum", self.bn_momentum),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DessError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.l2 >= 0.0) || !(self.chain_noise >= 0.0) {
            return Err(DessError::Config("l2 and chain_noise must be non-negative".into()));
        }
        if self.hidden == 0 || self.batch == 0 {
            return Err(DessError::Config("hidden width and batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Offsets of every dense parameter block inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    /// Per side, per transform `k`: offsets of `W_{k,k+1}` (row-major) and `b_k`.
    pub chain: [Vec<(usize, usize)>; 2],
    pub w1: usize,
    pub w2: usize,
    pub b2: usize,
    pub mf_scale: usize,
    pub mf_bias: usize,
    pub len: usize,
}

impl Layout {
    fn new(ladder: &SizeLadder, config: &ModelConfig) -> Self {
        let mut len = 0;
        let mut take = |n: usize| {
            let at = len;
            len += n;
            at
        };
        let sizes = ladder.sizes();
        let mut chain: [Vec<(usize, usize)>; 2] = [Vec::new(), Vec::new()];
        for side in &mut chain {
            for k in 0..sizes.len() - 1 {
                let w = take(sizes[k + 1] * sizes[k]);
                let b = take(sizes[k + 1]);
                side.push((w, b));
            }
        }
        let top = ladder.top_size();
        let out = config.task.outputs();
        let (mut w1, mut w2, mut b2, mut mf_scale, mut mf_bias) = (0, 0, 0, 0, 0);
        match config.head {
            Head::Mlp => {
                w1 = take(config.hidden * 2 * top);
                w2 = take(out * config.hidden);
                b2 = take(out);
            }
            Head::Mf if config.task == Task::Multiclass => {
                mf_scale = take(NUM_CLASSES);
                mf_bias = take(NUM_CLASSES);
            }
            Head::Mf => {}
        }
        Self { chain, w1, w2, b2, mf_scale, mf_bias, len }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    rung: usize,
    vec: Vec<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
}

impl Entry {
    fn new(rung: usize, vec: Vec<f64>) -> Self {
        let n = vec.len();
        Self { rung, vec, adam_m: vec![0.0; n], adam_v: vec![0.0; n] }
    }
}

/// Gradients of the mean batch loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub dense: Vec<f64>,
    /// Per side, `(id, gradient)` in order of first appearance in the batch.
    pub embeddings: [Vec<(u64, Vec<f64>)>; 2],
}

/// Losses of the old structure and of each side's expanded structure after
/// one temporary tuning step. `None` when that side cannot expand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TempOutcome {
    pub old: f64,
    pub new_user: Option<f64>,
    pub new_item: Option<f64>,
}

impl TempOutcome {
    pub fn new_for(&self, side: Side) -> Option<f64> {
        match side {
            Side::User => self.new_user,
            Side::Item => self.new_item,
        }
    }
}

#[derive(Clone, Copy)]
struct EmbView<'a> {
    rung: usize,
    vec: &'a [f64],
}

#[derive(Clone, Copy)]
enum Target {
    Binary(f64),
    Class(usize),
}

struct SideForward {
    rungs: Vec<usize>,
    /// Per example, the input of each transform from the example's rung up.
    layer_inputs: Vec<Vec<Vec<f64>>>,
    bn: Option<BnCache>,
    /// Lifted (and normalized + squashed, when enabled) side representation.
    out: Mat,
}

enum HeadForward {
    Mf { dots: Vec<f64> },
    Mlp { bn1: Option<BnCache>, h1: Mat, bn2: Option<BnCache>, act: Mat },
}

struct Forward {
    n: usize,
    sides: [SideForward; 2],
    head: HeadForward,
    logits: Mat,
}

/// The size-adaptive model with its optimizer state.
#[derive(Debug, Clone)]
pub struct AdaptiveModel {
    config: ModelConfig,
    ladder: SizeLadder,
    layout: Layout,
    dense: Vec<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    adam_t: u64,
    tables: [HashMap<u64, Entry>; 2],
    side_stats: [RunningStats; 2],
    cat_stats: RunningStats,
    hidden_stats: RunningStats,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the random vector of `(side, id)` at `rung`; independent of creation order.
fn id_seed(seed: u64, side: Side, id: u64, rung: usize) -> u64 {
    let mut h = mix(seed ^ 0x5851_f42d_4c95_7f2d);
    h = mix(h ^ side.index() as u64);
    h = mix(h ^ id);
    mix(h ^ (rung as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn uniform_vec(seed: u64, len: usize, half_width: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-half_width..=half_width)).collect()
}

impl AdaptiveModel {
    pub fn new(config: ModelConfig, ladder: SizeLadder) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&ladder, &config);
        let mut dense = vec![0.0; layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed ^ 0xd1b5_4a32_d192_ed03));
        let sizes = ladder.sizes();
        for side in 0..2 {
            for (k, &(w, _)) in layout.chain[side].iter().enumerate() {
                let (rows, cols) = (sizes[k + 1], sizes[k]);
                for r in 0..cols.min(rows) {
                    for c in 0..cols {
                        let noise = if config.chain_noise > 0.0 {
                            rng.gen_range(-config.chain_noise..=config.chain_noise)
                        } else {
                            0.0
                        };
                        dense[w + r * cols + c] = f64::from(r == c) + noise;
                    }
                }
            }
        }
        let top = ladder.top_size();
        let out = config.task.outputs();
        match config.head {
            Head::Mlp => {
                let fan1 = 1.0 / ((2 * top) as f64).sqrt();
                for v in &mut dense[layout.w1..layout.w1 + config.hidden * 2 * top] {
                    *v = rng.gen_range(-fan1..=fan1);
                }
                let fan2 = 1.0 / (config.hidden as f64).sqrt();
                for v in &mut dense[layout.w2..layout.w2 + out * config.hidden] {
                    *v = rng.gen_range(-fan2..=fan2);
                }
            }
            Head::Mf if config.task == Task::Multiclass => {
                for v in &mut dense[layout.mf_scale..layout.mf_scale + NUM_CLASSES] {
                    *v = rng.gen_range(-1.0..=1.0);
                }
            }
            Head::Mf => {}
        }
        let n = layout.len;
        Ok(Self {
            config,
            side_stats: [RunningStats::new(top), RunningStats::new(top)],
            cat_stats: RunningStats::new(2 * top),
            hidden_stats: RunningStats::new(config.hidden),
            ladder,
            layout,
            dense,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            adam_t: 0,
            tables: [HashMap::new(), HashMap::new()],
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn ladder(&self) -> &SizeLadder {
        &self.ladder
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Flat dense parameters (chains and head).
    pub fn dense_params(&self) -> &[f64] {
        &self.dense
    }

    pub fn dense_params_mut(&mut self) -> &mut [f64] {
        &mut self.dense
    }

    /// Current rung of an id; `None` if it has never been materialized.
    pub fn rung(&self, side: Side, id: u64) -> Option<usize> {
        self.tables[side.index()].get(&id).map(|e| e.rung)
    }

    /// Whether the id would be at the top rung (unknown ids sit at rung 0).
    pub fn at_top(&self, side: Side, id: u64) -> bool {
        self.rung(side, id).unwrap_or(0) == self.ladder.top_rung()
    }

    pub fn embedding(&self, side: Side, id: u64) -> Option<&[f64]> {
        self.tables[side.index()].get(&id).map(|e| e.vec.as_slice())
    }

    pub fn embedding_mut(&mut self, side: Side, id: u64) -> Option<&mut [f64]> {
        self.tables[side.index()].get_mut(&id).map(|e| e.vec.as_mut_slice())
    }

    /// Ids of one side, sorted.
    pub fn ids(&self, side: Side) -> Vec<u64> {
        let mut ids: Vec<u64> = self.tables[side.index()].keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    fn fresh_vector(&self, side: Side, id: u64, rung: usize) -> Vec<f64> {
        let size = self.ladder.size(rung);
        uniform_vec(id_seed(self.config.seed, side, id, rung), size, 1.0 / (size as f64).sqrt())
    }

    /// Materialize an id at rung 0 if it does not exist yet.
    pub fn ensure(&mut self, side: Side, id: u64) {
        if !self.tables[side.index()].contains_key(&id) {
            let vec = self.fresh_vector(side, id, 0);
            self.tables[side.index()].insert(id, Entry::new(0, vec));
        }
    }

    /// Place an embedding directly (test hook and checkpoint loading).
    pub fn set_embedding(&mut self, side: Side, id: u64, rung: usize, vec: Vec<f64>) -> Result<()> {
        if rung > self.ladder.top_rung() {
            return Err(DessError::Config(format!("rung {rung} beyond ladder")));
        }
        if vec.len() != self.ladder.size(rung) {
            return Err(DessError::Dimension { expected: self.ladder.size(rung), got: vec.len() });
        }
        self.tables[side.index()].insert(id, Entry::new(rung, vec));
        Ok(())
    }

    /// Set every chain transform to an exact identity pad with zero bias (test hook).
    pub fn set_identity_chain(&mut self) {
        let sizes = self.ladder.sizes().to_vec();
        for side in 0..2 {
            for (k, &(w, b)) in self.layout.chain[side].iter().enumerate() {
                let (rows, cols) = (sizes[k + 1], sizes[k]);
                for r in 0..rows {
                    for c in 0..cols {
                        self.dense[w + r * cols + c] = f64::from(r == c);
                    }
                    self.dense[b + r] = 0.0;
                }
            }
        }
    }

    /// `(W_{k,k+1}, b_k)` of one side as row-major slices.
    pub fn transform(&self, side: Side, k: usize) -> (&[f64], &[f64]) {
        let (w, b) = self.layout.chain[side.index()][k];
        let (rows, cols) = (self.ladder.size(k + 1), self.ladder.size(k));
        (&self.dense[w..w + rows * cols], &self.dense[b..b + rows])
    }

    fn view(&self, side: Side, id: u64) -> (usize, Cow<'_, [f64]>) {
        match self.tables[side.index()].get(&id) {
            Some(e) => (e.rung, Cow::Borrowed(e.vec.as_slice())),
            None => (0, Cow::Owned(self.fresh_vector(side, id, 0))),
        }
    }

    fn target(&self, x: &Interaction) -> Target {
        match self.config.task {
            Task::Binary => Target::Binary(x.label),
            Task::Multiclass => Target::Class(x.class()),
        }
    }

    fn apply_transform(&self, side: usize, k: usize, input: &[f64]) -> Vec<f64> {
        let (w, b) = self.layout.chain[side][k];
        let rows = self.ladder.size(k + 1);
        let cols = input.len();
        let mut out = vec![0.0; rows];
        matvec(&self.dense[w..w + rows * cols], input, Some(&self.dense[b..b + rows]), &mut out);
        out
    }

    fn forward_side(&self, side: usize, views: &[EmbView<'_>], train: bool) -> SideForward {
        let n = views.len();
        let top = self.ladder.top_size();
        let transforms = self.ladder.top_rung();
        let mut lifted = Mat::zeros(n, top);
        let mut layer_inputs = Vec::with_capacity(n);
        for (j, v) in views.iter().enumerate() {
            let mut inputs = Vec::with_capacity(transforms - v.rung);
            let mut cur = v.vec.to_vec();
            for k in v.rung..transforms {
                let next = self.apply_transform(side, k, &cur);
                inputs.push(std::mem::replace(&mut cur, next));
            }
            lifted.row_mut(j).copy_from_slice(&cur);
            layer_inputs.push(inputs);
        }
        let rungs = views.iter().map(|v| v.rung).collect();
        if !self.config.normalize {
            return SideForward { rungs, layer_inputs, bn: None, out: lifted };
        }
        let cache = bn_forward(&lifted, &self.side_stats[side], train, self.config.eps_bn);
        let mut out = cache.xhat.clone();
        out.data.iter_mut().for_each(|v| *v = v.tanh());
        SideForward { rungs, layer_inputs, bn: Some(cache), out }
    }

    fn forward_views(&self, pairs: &[(EmbView<'_>, EmbView<'_>)], train: bool) -> Forward {
        let n = pairs.len();
        let users: Vec<EmbView<'_>> = pairs.iter().map(|p| p.0).collect();
        let items: Vec<EmbView<'_>> = pairs.iter().map(|p| p.1).collect();
        let sides = [self.forward_side(0, &users, train), self.forward_side(1, &items, train)];
        let out_dim = self.config.task.outputs();
        let mut logits = Mat::zeros(n, out_dim);
        let top = self.ladder.top_size();
        let head = match self.config.head {
            Head::Mf => {
                let dots: Vec<f64> = (0..n).map(|j| dot(sides[0].out.row(j), sides[1].out.row(j))).collect();
                for (j, &s) in dots.iter().enumerate() {
                    match self.config.task {
                        Task::Binary => logits.row_mut(j)[0] = s,
                        Task::Multiclass => {
                            let (a, c) = (self.layout.mf_scale, self.layout.mf_bias);
                            for (k, o) in logits.row_mut(j).iter_mut().enumerate() {
                                *o = self.dense[a + k] * s + self.dense[c + k];
                            }
                        }
                    }
                }
                HeadForward::Mf { dots }
            }
            Head::Mlp => {
                let hidden = self.config.hidden;
                let mut cat = Mat::zeros(n, 2 * top);
                for j in 0..n {
                    let row = cat.row_mut(j);
                    row[..top].copy_from_slice(sides[0].out.row(j));
                    row[top..].copy_from_slice(sides[1].out.row(j));
                }
                let (bn1, h1) = if self.config.normalize {
                    let c = bn_forward(&cat, &self.cat_stats, train, self.config.eps_bn);
                    let h = c.xhat.clone();
                    (Some(c), h)
                } else {
                    (None, cat)
                };
                let w1 = &self.dense[self.layout.w1..self.layout.w1 + hidden * 2 * top];
                let mut z = Mat::zeros(n, hidden);
                for j in 0..n {
                    matvec(w1, h1.row(j), None, z.row_mut(j));
                }
                let (bn2, mut act) = if self.config.normalize {
                    let c = bn_forward(&z, &self.hidden_stats, train, self.config.eps_bn);
                    let h = c.xhat.clone();
                    (Some(c), h)
                } else {
                    (None, z)
                };
                act.data.iter_mut().for_each(|v| *v = v.tanh());
                let w2 = &self.dense[self.layout.w2..self.layout.w2 + out_dim * hidden];
                let b2 = &self.dense[self.layout.b2..self.layout.b2 + out_dim];
                for j in 0..n {
                    matvec(w2, act.row(j), Some(b2), logits.row_mut(j));
                }
                HeadForward::Mlp { bn1, h1, bn2, act }
            }
        };
        Forward { n, sides, head, logits }
    }

    /// Mean loss and its gradient with respect to the logits.
    fn loss_and_dlogits(&self, fwd: &Forward, targets: &[Target]) -> (f64, Mat) {
        let n = fwd.n as f64;
        let mut dl = Mat::zeros(fwd.n, fwd.logits.cols);
        let mut total = 0.0;
        for (j, t) in targets.iter().enumerate() {
            match *t {
                Target::Binary(y) => {
                    let (l, g) = binary_loss_grad(fwd.logits.row(j)[0], y);
                    total += l;
                    dl.row_mut(j)[0] = g / n;
                }
                Target::Class(c) => {
                    let (l, g) = multiclass_loss_grad(fwd.logits.row(j), c);
                    total += l;
                    for (o, gi) in dl.row_mut(j).iter_mut().zip(g) {
                        *o = gi / n;
                    }
                }
            }
        }
        (total / n, dl)
    }

    /// Backpropagate `dlogits`. Returns dense gradients (empty unless
    /// `want_dense`) and per-example embedding gradients for each side.
    fn backward(&self, fwd: &Forward, dlogits: &Mat, want_dense: bool) -> (Vec<f64>, [Vec<Vec<f64>>; 2]) {
        let n = fwd.n;
        let top = self.ladder.top_size();
        let out_dim = self.config.task.outputs();
        let mut dense = if want_dense { vec![0.0; self.layout.len] } else { Vec::new() };
        let mut d_out = [Mat::zeros(n, top), Mat::zeros(n, top)];

        match &fwd.head {
            HeadForward::Mf { dots } => {
                for j in 0..n {
                    let g = dlogits.row(j);
                    let d_dot = match self.config.task {
                        Task::Binary => g[0],
                        Task::Multiclass => {
                            let (a, c) = (self.layout.mf_scale, self.layout.mf_bias);
                            if want_dense {
                                for k in 0..NUM_CLASSES {
                                    dense[a + k] += g[k] * dots[j];
                                    dense[c + k] += g[k];
                                }
                            }
                            (0..NUM_CLASSES).map(|k| g[k] * self.dense[a + k]).sum()
                        }
                    };
                    axpy(d_out[0].row_mut(j), d_dot, fwd.sides[1].out.row(j));
                    axpy(d_out[1].row_mut(j), d_dot, fwd.sides[0].out.row(j));
                }
            }
            HeadForward::Mlp { bn1, h1, bn2, act } => {
                let hidden = self.config.hidden;
                let (w1o, w2o, b2o) = (self.layout.w1, self.layout.w2, self.layout.b2);
                let w2 = &self.dense[w2o..w2o + out_dim * hidden];
                let mut d_h2 = Mat::zeros(n, hidden);
                for j in 0..n {
                    let g = dlogits.row(j);
                    if want_dense {
                        outer_acc(&mut dense[w2o..w2o + out_dim * hidden], g, act.row(j));
                        axpy(&mut dense[b2o..b2o + out_dim], 1.0, g);
                    }
                    let row = d_h2.row_mut(j);
                    matvec_t_acc(w2, g, row);
                    for (d, a) in row.iter_mut().zip(act.row(j)) {
                        *d *= 1.0 - a * a;
                    }
                }
                let d_z = match bn2 {
                    Some(c) => bn_backward(&d_h2, c),
                    None => d_h2,
                };
                let w1 = &self.dense[w1o..w1o + hidden * 2 * top];
                let mut d_h1 = Mat::zeros(n, 2 * top);
                for j in 0..n {
                    if want_dense {
                        outer_acc(&mut dense[w1o..w1o + hidden * 2 * top], d_z.row(j), h1.row(j));
                    }
                    matvec_t_acc(w1, d_z.row(j), d_h1.row_mut(j));
                }
                let d_cat = match bn1 {
                    Some(c) => bn_backward(&d_h1, c),
                    None => d_h1,
                };
                for j in 0..n {
                    let row = d_cat.row(j);
                    d_out[0].row_mut(j).copy_from_slice(&row[..top]);
                    d_out[1].row_mut(j).copy_from_slice(&row[top..]);
                }
            }
        }

        let mut emb_grads: [Vec<Vec<f64>>; 2] = [Vec::with_capacity(n), Vec::with_capacity(n)];
        for side in 0..2 {
            let sf = &fwd.sides[side];
            let d_lifted = match &sf.bn {
                Some(cache) => {
                    let mut d_pre = d_out[side].clone();
                    for (d, o) in d_pre.data.iter_mut().zip(&sf.out.data) {
                        *d *= 1.0 - o * o;
                    }
                    bn_backward(&d_pre, cache)
                }
                None => d_out[side].clone(),
            };
            for j in 0..n {
                let mut g = d_lifted.row(j).to_vec();
                let rung = sf.rungs[j];
                for (offset, input) in sf.layer_inputs[j].iter().enumerate().rev() {
                    let k = rung + offset;
                    let (w, b) = self.layout.chain[side][k];
                    let (rows, cols) = (g.len(), input.len());
                    if want_dense {
                        outer_acc(&mut dense[w..w + rows * cols], &g, input);
                        axpy(&mut dense[b..b + rows], 1.0, &g);
                    }
                    let mut prev = vec![0.0; cols];
                    matvec_t_acc(&self.dense[w..w + rows * cols], &g, &mut prev);
                    g = prev;
                }
                emb_grads[side].push(g);
            }
        }
        (dense, emb_grads)
    }

    fn run_batch(&self, batch: &[Interaction], mode: Mode) -> (Forward, Vec<Target>) {
        let store: Vec<(usize, Cow<'_, [f64]>)> =
            batch.iter().flat_map(|x| [self.view(Side::User, x.user), self.view(Side::Item, x.item)]).collect();
        let pairs: Vec<_> = store
            .chunks_exact(2)
            .map(|p| (EmbView { rung: p[0].0, vec: &p[0].1 }, EmbView { rung: p[1].0, vec: &p[1].1 }))
            .collect();
        let targets = batch.iter().map(|x| self.target(x)).collect();
        (self.forward_views(&pairs, mode == Mode::Train), targets)
    }

    /// Raw head output for one pair: one value for the binary task (a logit,
    /// or the plain dot product for the mf head), five logits for multiclass.
    /// Unknown ids are evaluated at their deterministic initial vector
    /// without being stored.
    pub fn forward(&self, user: u64, item: u64, mode: Mode) -> Vec<f64> {
        let x = Interaction::new(user, item, 0.0, 0);
        let (fwd, _) = self.run_batch(std::slice::from_ref(&x), mode);
        fwd.logits.row(0).to_vec()
    }

    /// Lifted side representation fed to the head, for one id.
    pub fn side_representation(&self, side: Side, id: u64, mode: Mode) -> Vec<f64> {
        let (rung, vec) = self.view(side, id);
        let sf = self.forward_side(side.index(), &[EmbView { rung, vec: &vec }], mode == Mode::Train);
        sf.out.row(0).to_vec()
    }

    /// Per-side batch-norm outputs before `tanh` in train mode (diagnostics).
    pub fn normalized_side_batch(&self, side: Side, batch: &[Interaction]) -> Vec<Vec<f64>> {
        let (fwd, _) = self.run_batch(batch, Mode::Train);
        match &fwd.sides[side.index()].bn {
            Some(c) => (0..c.n).map(|j| c.xhat.row(j).to_vec()).collect(),
            None => Vec::new(),
        }
    }

    /// Mean loss and full gradients without touching any state.
    pub fn loss_and_gradients(&self, batch: &[Interaction], mode: Mode) -> (f64, Gradients) {
        let (fwd, targets) = self.run_batch(batch, mode);
        let (loss, dl) = self.loss_and_dlogits(&fwd, &targets);
        let (dense, per_example) = self.backward(&fwd, &dl, true);
        let mut embeddings: [Vec<(u64, Vec<f64>)>; 2] = [Vec::new(), Vec::new()];
        for (side, grads) in per_example.into_iter().enumerate() {
            let mut index: HashMap<u64, usize> = HashMap::new();
            for (x, g) in batch.iter().zip(grads) {
                let id = if side == 0 { x.user } else { x.item };
                match index.get(&id) {
                    Some(&at) => axpy(&mut embeddings[side][at].1, 1.0, &g),
                    None => {
                        index.insert(id, embeddings[side].len());
                        embeddings[side].push((id, g));
                    }
                }
            }
        }
        (loss, Gradients { dense, embeddings })
    }

    /// Mean loss of a batch.
    pub fn loss(&self, batch: &[Interaction], mode: Mode) -> f64 {
        let (fwd, targets) = self.run_batch(batch, mode);
        self.loss_and_dlogits(&fwd, &targets).0
    }

    /// One optimizer step on a mini-batch; returns the pre-update mean loss.
    pub fn train_step(&mut self, batch: &[Interaction]) -> f64 {
        assert!(!batch.is_empty(), "train_step needs a non-empty batch");
        for x in batch {
            self.ensure(Side::User, x.user);
            self.ensure(Side::Item, x.item);
        }
        let (fwd, targets) = self.run_batch(batch, Mode::Train);
        let (loss, dl) = self.loss_and_dlogits(&fwd, &targets);
        let (mut dense_grad, per_example) = self.backward(&fwd, &dl, true);

        let momentum = self.config.bn_momentum;
        for (stats, side) in self.side_stats.iter_mut().zip(&fwd.sides) {
            if let Some(c) = &side.bn {
                stats.absorb(c, momentum);
            }
        }
        if let HeadForward::Mlp { bn1, bn2, .. } = &fwd.head {
            if let Some(c) = bn1 {
                self.cat_stats.absorb(c, momentum);
            }
            if let Some(c) = bn2 {
                self.hidden_stats.absorb(c, momentum);
            }
        }

        self.adam_t += 1;
        let (lr, l2) = (self.config.eta, self.config.l2);
        let bc1 = 1.0 - ADAM_BETA1.powi(self.adam_t.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.adam_t.min(i32::MAX as u64) as i32);
        axpy(&mut dense_grad, l2, &self.dense);
        adam(&mut self.dense, &dense_grad, &mut self.adam_m, &mut self.adam_v, lr, bc1, bc2);

        // Sum per-example embedding gradients per id, in first-appearance order.
        for (side, grads) in per_example.into_iter().enumerate() {
            let mut order: Vec<u64> = Vec::new();
            let mut acc: HashMap<u64, Vec<f64>> = HashMap::new();
            for (x, g) in batch.iter().zip(grads) {
                let id = if side == 0 { x.user } else { x.item };
                match acc.get_mut(&id) {
                    Some(a) => axpy(a, 1.0, &g),
                    None => {
                        order.push(id);
                        acc.insert(id, g);
                    }
                }
            }
            for id in order {
                let mut g = acc.remove(&id).expect("accumulated above");
                let e = self.tables[side].get_mut(&id).expect("ensured above");
                axpy(&mut g, l2, &e.vec);
                adam(&mut e.vec, &g, &mut e.adam_m, &mut e.adam_v, lr, bc1, bc2);
            }
        }
        loss
    }

    /// Mean loss and accuracy on a batch in eval mode. Empty batches give `(0, 0)`.
    pub fn evaluate(&self, batch: &[Interaction]) -> (f64, f64) {
        if batch.is_empty() {
            return (0.0, 0.0);
        }
        let mut loss = 0.0;
        let mut correct = 0usize;
        for chunk in batch.chunks(self.config.batch) {
            let (fwd, targets) = self.run_batch(chunk, Mode::Eval);
            loss += self.loss_and_dlogits(&fwd, &targets).0 * chunk.len() as f64;
            for (j, t) in targets.iter().enumerate() {
                let row = fwd.logits.row(j);
                let hit = match *t {
                    Target::Binary(y) => (sigmoid(row[0]) > 0.5) == (y > 0.5),
                    Target::Class(c) => argmax(row) == c,
                };
                correct += usize::from(hit);
            }
        }
        let n = batch.len() as f64;
        (loss / n, correct as f64 / n)
    }

    fn expanded_vector(&self, side: Side, id: u64, rung: usize, vec: &[f64]) -> Vec<f64> {
        if self.config.cold_init {
            self.fresh_vector(side, id, rung + 1)
        } else {
            self.apply_transform(side.index(), rung, vec)
        }
    }

    /// Grow an id by one rung, warm-initialized through `W_{i,i+1} E + b_i`
    /// (or freshly randomized with `cold_init`). Optimizer moments restart.
    pub fn expand(&mut self, side: Side, id: u64) -> Result<()> {
        self.ensure(side, id);
        let e = &self.tables[side.index()][&id];
        if e.rung >= self.ladder.top_rung() {
            return Err(DessError::TopRung { id });
        }
        let rung = e.rung;
        let next = self.expanded_vector(side, id, rung, &e.vec);
        self.tables[side.index()].insert(id, Entry::new(rung + 1, next));
        Ok(())
    }

    /// Loss on `x` after one plain gradient step (rate `eta`) on copies of the
    /// two embeddings, everything else frozen, eval-mode normalization.
    fn tuned_loss(&self, x: &Interaction, user: EmbView<'_>, item: EmbView<'_>) -> f64 {
        let target = [self.target(x)];
        let fwd = self.forward_views(&[(user, item)], false);
        let (_, dl) = self.loss_and_dlogits(&fwd, &target);
        let (_, grads) = self.backward(&fwd, &dl, false);
        let eta = self.config.eta;
        let mut u = user.vec.to_vec();
        let mut i = item.vec.to_vec();
        axpy(&mut u, -eta, &grads[0][0]);
        axpy(&mut i, -eta, &grads[1][0]);
        let fwd = self.forward_views(
            &[(EmbView { rung: user.rung, vec: &u }, EmbView { rung: item.rung, vec: &i })],
            false,
        );
        self.loss_and_dlogits(&fwd, &target).0
    }

    /// Old-structure loss and, per side, the expanded-structure loss after
    /// temporary tuning. Pure: the model is not modified.
    pub fn temp_outcome(&self, x: &Interaction) -> TempOutcome {
        let (ur, uv) = self.view(Side::User, x.user);
        let (ir, iv) = self.view(Side::Item, x.item);
        let user = EmbView { rung: ur, vec: &uv };
        let item = EmbView { rung: ir, vec: &iv };
        let old = self.tuned_loss(x, user, item);
        let top = self.ladder.top_rung();
        let new_user = (ur < top).then(|| {
            let grown = self.expanded_vector(Side::User, x.user, ur, &uv);
            self.tuned_loss(x, EmbView { rung: ur + 1, vec: &grown }, item)
        });
        let new_item = (ir < top).then(|| {
            let grown = self.expanded_vector(Side::Item, x.item, ir, &iv);
            self.tuned_loss(x, user, EmbView { rung: ir + 1, vec: &grown })
        });
        TempOutcome { old, new_user, new_item }
    }

    /// `(L_old, L_new)` for a proposal on one side; `L_new = L_old` when no
    /// increase is proposed or the id is already at the top rung.
    pub fn temp_evaluate(&self, x: &Interaction, proposed_increase: bool, side: Side) -> (f64, f64) {
        let (ur, uv) = self.view(Side::User, x.user);
        let (ir, iv) = self.view(Side::Item, x.item);
        let user = EmbView { rung: ur, vec: &uv };
        let item = EmbView { rung: ir, vec: &iv };
        let old = self.tuned_loss(x, user, item);
        let rung = if side == Side::User { ur } else { ir };
        if !proposed_increase || rung >= self.ladder.top_rung() {
            return (old, old);
        }
        let new = match side {
            Side::User => {
                let grown = self.expanded_vector(side, x.user, ur, &uv);
                self.tuned_loss(x, EmbView { rung: ur + 1, vec: &grown }, item)
            }
            Side::Item => {
                let grown = self.expanded_vector(side, x.item, ir, &iv);
                self.tuned_loss(x, user, EmbView { rung: ir + 1, vec: &grown })
            }
        };
        (old, new)
    }

    /// `(embedding parameters, total parameters)`.
    pub fn param_count(&self) -> (usize, usize) {
        let emb: usize = self.tables.iter().flat_map(|t| t.values()).map(|e| e.vec.len()).sum();
        (emb, emb + self.layout.len)
    }
}

fn adam(params: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, bc1: f64, bc2: f64) {
    for k in 0..params.len() {
        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * grad[k];
        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * grad[k] * grad[k];
        let m_hat = m[k] / bc1;
        let v_hat = v[k] / bc2;
        params[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
