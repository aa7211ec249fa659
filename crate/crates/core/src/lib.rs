//! Dynamic embedding-size search for streaming recommendation.
//!
//! Every user and item embedding starts at the smallest size of a ladder and
//! may only climb. A discounted (non-stationary) LinUCB policy, fed with
//! frequency and diversity indicators, decides per id whether to climb one
//! rung; the enlarged embedding is warm-initialized through the shared
//! transform chain so the model output is unchanged at the moment of growth.
//!
//! Modules:
//! - [`dlinucb`]: discounted disjoint-arm LinUCB.
//! - [`indicators`]: streaming FRE / IND / POD context features.
//! - [`model`]: the size-adaptive recommendation model.
//! - [`harness`]: segmented streaming protocol (policy pass, model pass).
//! - [`synthetic`]: drifting linear bandit environments and regret curves.
//! - [`data`], [`config`], [`runner`]: ingestion, run configuration, dispatch.

#[cfg(test)]
macro_rules! assert_close {
    ($a:expr, $b:expr, $tol:expr) => {{
        let (a, b): (f64, f64) = ($a, $b);
        assert!((a - b).abs() <= $tol, "{} vs {} (tol {})", a, b, $tol);
    }};
}

pub mod config;
pub mod data;
pub mod dlinucb;
pub mod error;
pub mod harness;
pub mod indicators;
pub mod model;
pub mod runner;
pub mod synthetic;

pub use dlinucb::{batch_solve, beta_at, corollary_gamma, ucb_score, ArmState, BanditConfig, BanditState, ContextVector, Observation};
pub use error::{DessError, Result};
pub use harness::{Interaction, RewardConfig, Segment, SegmentMetrics, Side};
pub use indicators::{IndicatorConfig, Indicators, ItemFeatureStore};
pub use model::{AdaptiveModel, Head, ModelConfig, SizeLadder, Task};
