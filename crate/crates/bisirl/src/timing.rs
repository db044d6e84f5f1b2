//! Wall-clock scaling of the two hypergradient paths across horizons.
//!
//! The analytical oracle recomputes per-step conditional expectations and so
//! scales quadratically with the horizon; the SPSA estimator only evaluates
//! single-pass quantities and stays linear. This module measures both on
//! the same game family and fits log-log slopes.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::envs::random_game;
use crate::game::{sample_interaction, MarginalPolicy, MarkovGame};
use crate::hypergrad::{
    analytical_hypergradient, estimate_hypergradient, SpsaConfig, UpperObjective, UpperProblem,
};
use crate::reward::RewardModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HypergradMethod {
    Analytical,
    Spsa,
}

impl HypergradMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            HypergradMethod::Analytical => "analytical",
            HypergradMethod::Spsa => "spsa",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingRow {
    pub horizon: usize,
    pub method: HypergradMethod,
    pub millis: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingSweep {
    pub rows: Vec<TimingRow>,
    pub spsa_slope: f64,
    pub analytical_slope: f64,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let lx = x.ln();
        let ly = y.ln();
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

fn with_horizon(game: &MarkovGame, horizon: usize) -> MarkovGame {
    MarkovGame::new(
        game.transition.clone(),
        horizon,
        game.discount,
        game.initial_dist.clone(),
    )
    .expect("horizon swap keeps the game valid")
}

fn time_best_of<F: FnMut()>(repeats: usize, mut f: F) -> f64 {
    f(); // warm-up
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let clock = Instant::now();
        f();
        best = best.min(clock.elapsed().as_secs_f64() * 1e3);
    }
    best
}

/// Times `analytical_hypergradient` against `estimate_hypergradient` on one
/// random game family across `horizons`, reporting best-of-`repeats`
/// milliseconds per row plus fitted log-log slopes.
pub fn hypergrad_timing_sweep(
    horizons: &[usize],
    repeats: usize,
    spsa_n_avg: usize,
    seed: u64,
) -> TimingSweep {
    assert!(!horizons.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = random_game(6, 3, 3, horizons[0].max(1), 0.95, &mut rng);
    let model = RewardModel::tabular_for(&base);
    let theta_l = crate::envs::random_theta_in_ball(model.dim(), &mut rng).into_inner();
    let theta_e = crate::envs::random_theta_in_ball(model.dim(), &mut rng).into_inner();
    let spsa = SpsaConfig {
        p: 1e-3,
        n_avg: spsa_n_avg,
        ..SpsaConfig::default()
    };
    let mut rows = Vec::with_capacity(horizons.len() * 2);
    let mut ana_points = Vec::new();
    let mut spsa_points = Vec::new();
    for &h in horizons {
        let game = with_horizon(&base, h);
        let learner = MarginalPolicy::uniform(h, game.n_states, game.n_actions_learner);
        let expert = MarginalPolicy::uniform(h, game.n_states, game.n_actions_expert);
        let mut demo_rng = ChaCha8Rng::seed_from_u64(seed ^ h as u64);
        let demos = sample_interaction(&game, &learner, &expert, 8, &mut demo_rng).unwrap();
        let problem = UpperProblem {
            game: &game,
            model_l: &model,
            model_e: &model,
            lambda: 0.5,
            objective: UpperObjective::EstimatedReward,
        };

        let ana_ms = time_best_of(repeats, || {
            analytical_hypergradient(&problem, &theta_l, &theta_e, &demos).unwrap();
        });
        rows.push(TimingRow {
            horizon: h,
            method: HypergradMethod::Analytical,
            millis: ana_ms,
        });
        ana_points.push((h as f64, ana_ms.max(1e-6)));

        let spsa_ms = time_best_of(repeats, || {
            let mut est_rng = ChaCha8Rng::seed_from_u64(seed ^ (h as u64) << 8);
            estimate_hypergradient(&problem, &theta_l, &theta_e, &demos, &spsa, &mut est_rng)
                .unwrap();
        });
        rows.push(TimingRow {
            horizon: h,
            method: HypergradMethod::Spsa,
            millis: spsa_ms,
        });
        spsa_points.push((h as f64, spsa_ms.max(1e-6)));
    }
    TimingSweep {
        spsa_slope: loglog_slope(&spsa_points),
        analytical_slope: loglog_slope(&ana_points),
        rows,
    }
}

/// Sampling helper used by the benchmark suite: `n` rollouts through the
/// batched (possibly parallel) path.
pub fn rollout_throughput_probe(game: &MarkovGame, n: usize, seed: u64) -> usize {
    let policy = crate::game::JointPolicy::uniform(game);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    crate::mc::rollout_batch(game, &policy, n, &mut rng).len()
}
