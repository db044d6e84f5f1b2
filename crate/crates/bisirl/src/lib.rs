//! Bi-level interactive-scenario inverse reinforcement learning (BISIRL) on
//! finite two-agent Markov games.
//!
//! A learner embedded in a two-agent game recovers the expert's reward
//! function by maximum-likelihood IRL on interaction trajectories (the lower
//! level) while tuning its own reward parameter by projected gradient steps
//! on an SPSA-approximated hypergradient (the upper level). Games are finite
//! and tabular, so every expectation has both an exact dynamic-programming
//! evaluation and a seeded Monte-Carlo cross-check.
//!
//! Module map:
//! - [`game`]: Markov games, trajectories, rollout sampling
//! - [`reward`]: linear/tabular reward models over the unit-ball parameter set
//! - [`soft`]: soft value iteration, occupancy measures, conditional
//!   feature expectations
//! - [`mc`]: Monte-Carlo counterparts of the exact quantities
//! - [`lower`]: the maximum-likelihood IRL loss, its gradients, and the
//!   projected-gradient inner loop
//! - [`hypergrad`]: SPSA derivative estimators, conjugate-gradient solves,
//!   hypergradient assembly, and the analytical oracle
//! - [`driver`]: the double-loop algorithm, expert response models, baselines
//! - [`envs`]: attack-graph security game, grid deception game, random games
//! - [`timing`]: wall-clock scaling sweeps of the two hypergradient paths

pub mod driver;
pub mod envs;
pub mod exec;
pub mod game;
pub mod hypergrad;
pub mod lower;
pub mod mc;
pub mod reward;
pub mod soft;
pub mod timing;

pub use game::{DemoSet, JointPolicy, MarginalPolicy, MarkovGame, Step, Trajectory};
pub use reward::{FeatureMap, Reward, RewardModel, RewardParams};
pub use soft::{OccupancyMeasure, SoftSolution};
