//! The lower-level maximum-likelihood IRL problem.
//!
//! Given the learner's current reward parameter and a batch of interaction
//! demonstrations, fit the expert's reward parameter by minimizing the
//! regularized maximum-entropy trajectory likelihood
//!
//! ```text
//! L(theta_l, theta_e) = E_init[V_0(s0)]
//!                       - (1/d) sum_i sum_h gamma^h (r_l + r_e)(s^ih, a^ih)
//!                       + (lambda/2) ||theta_e||^2
//! ```
//!
//! where `V_0` is the soft value of the induced policy: the log-partition of
//! the trajectory softmax minus the demos' discounted reward score.
//! Averaging over the `d` trajectories and taking next-state terms in
//! expectation makes the analytical gradient exactly the model-vs-empirical
//! feature-expectation gap plus the regularizer:
//! `grad_e L = mu_e(pi) - mu_hat_e(D) + lambda * theta_e`. (The per-step
//! log-policy sum differs from this loss by a zero-mean martingale term
//! whose pathwise gradient does not reduce to feature expectations.)

use ndarray::Array1;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{DemoSet, MarkovGame};
use crate::mc;
use crate::reward::{l2_norm, Reward, RewardModel, RewardParams};
use crate::soft;

#[derive(Debug, Error)]
pub enum LowerError {
    #[error("demo set is empty")]
    EmptyDemoSet,
    #[error("demo horizon {got} does not match game horizon {expected}")]
    HorizonMismatch { expected: usize, got: usize },
}

/// Inner-loop step-size schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    Constant(f64),
    /// Explicit per-step sizes; the last entry repeats past the end.
    PerStep(Vec<f64>),
}

impl StepSchedule {
    pub fn at(&self, t: usize) -> f64 {
        match self {
            StepSchedule::Constant(beta) => *beta,
            StepSchedule::PerStep(betas) => betas[t.min(betas.len() - 1)],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowerConfig {
    /// L2 regularization weight; must be positive.
    pub lambda: f64,
    pub step_sizes: StepSchedule,
    /// Evaluate the model feature expectation exactly via occupancy tensors
    /// (default) or by Monte-Carlo rollouts.
    pub exact_expectations: bool,
    /// Rollouts per gradient when `exact_expectations` is off.
    pub mc_rollouts: usize,
}

impl Default for LowerConfig {
    fn default() -> Self {
        LowerConfig {
            lambda: 0.1,
            step_sizes: StepSchedule::Constant(0.1),
            exact_expectations: true,
            mc_rollouts: 2_000,
        }
    }
}

/// Final iterate and per-step traces of one inner loop.
#[derive(Debug, Clone)]
pub struct LowerState {
    pub theta_e: RewardParams,
    pub loss_history: Vec<f64>,
    pub grad_norm_history: Vec<f64>,
}

fn check_demos(game: &MarkovGame, demos: &DemoSet) -> Result<(), LowerError> {
    let horizon = demos.horizon().ok_or(LowerError::EmptyDemoSet)?;
    if horizon != game.horizon {
        return Err(LowerError::HorizonMismatch {
            expected: game.horizon,
            got: horizon,
        });
    }
    Ok(())
}

/// Empirical feature expectation `(1/d) sum_i sum_h gamma^h phi(s^ih, a^ih)`.
pub fn empirical_feature_expectation(
    demos: &DemoSet,
    model: &RewardModel,
    discount: f64,
) -> Result<Array1<f64>, LowerError> {
    if demos.is_empty() {
        return Err(LowerError::EmptyDemoSet);
    }
    let mut mu = Array1::zeros(model.dim());
    for traj in &demos.trajectories {
        let mut scale = 1.0;
        for st in &traj.steps {
            model.add_scaled_grad(st.state, st.learner_action, st.expert_action, scale, &mut mu);
            scale *= discount;
        }
    }
    Ok(mu / demos.len() as f64)
}

/// Log-partition term: expected soft value of the initial state.
fn log_partition(game: &MarkovGame, solution: &soft::SoftSolution) -> f64 {
    (0..game.n_states)
        .map(|s| game.initial_dist[s] * solution.v[[0, s]])
        .sum()
}

/// Demos' discounted reward score `(1/d) sum_i sum_h gamma^h (r_l + r_e)`.
fn demo_score(game: &MarkovGame, r_l: Reward<'_>, r_e: Reward<'_>, demos: &DemoSet) -> f64 {
    let mut total = 0.0;
    for traj in &demos.trajectories {
        let mut scale = 1.0;
        for st in &traj.steps {
            total += scale
                * (r_l.value(st.state, st.learner_action, st.expert_action)
                    + r_e.value(st.state, st.learner_action, st.expert_action));
            scale *= game.discount;
        }
    }
    total / demos.len() as f64
}

/// Loss evaluated against an already-solved policy, for callers that have
/// the soft solution in hand.
pub fn loss_with_solution(
    game: &MarkovGame,
    solution: &soft::SoftSolution,
    r_l: Reward<'_>,
    r_e: Reward<'_>,
    demos: &DemoSet,
    lambda: f64,
) -> Result<f64, LowerError> {
    check_demos(game, demos)?;
    Ok(log_partition(game, solution) - demo_score(game, r_l, r_e, demos)
        + 0.5 * lambda * r_e.theta.dot(r_e.theta))
}

/// Regularized maximum-entropy likelihood loss of the demo set.
pub fn lower_loss(
    game: &MarkovGame,
    r_l: Reward<'_>,
    r_e: Reward<'_>,
    demos: &DemoSet,
    lambda: f64,
) -> Result<f64, LowerError> {
    check_demos(game, demos)?;
    let solution = soft::solve_soft(game, r_l, r_e);
    loss_with_solution(game, &solution, r_l, r_e, demos, lambda)
}

/// Gradient of the loss in the expert parameter:
/// `mu_e(pi) - mu_hat_e(D) + lambda * theta_e`.
pub fn lower_grad_e(
    game: &MarkovGame,
    r_l: Reward<'_>,
    r_e: Reward<'_>,
    demos: &DemoSet,
    lambda: f64,
) -> Result<Array1<f64>, LowerError> {
    Ok(lower_loss_and_grad_e(game, r_l, r_e, demos, lambda)?.1)
}

/// Loss and expert-parameter gradient from a single soft solve.
pub fn lower_loss_and_grad_e(
    game: &MarkovGame,
    r_l: Reward<'_>,
    r_e: Reward<'_>,
    demos: &DemoSet,
    lambda: f64,
) -> Result<(f64, Array1<f64>), LowerError> {
    check_demos(game, demos)?;
    let solution = soft::solve_soft(game, r_l, r_e);
    let loss = loss_with_solution(game, &solution, r_l, r_e, demos, lambda)?;
    let occ = soft::occupancy(game, &solution.policy);
    let mu_model = soft::feature_expectation(&occ, r_e.model);
    let mu_emp = empirical_feature_expectation(demos, r_e.model, game.discount)?;
    let grad = mu_model - mu_emp + &r_e.theta.mapv(|x| lambda * x);
    Ok((loss, grad))
}

/// Gradient of the loss in the learner parameter:
/// `mu_l(pi) - mu_hat_l(D)` (no regularizer).
pub fn lower_grad_l(
    game: &MarkovGame,
    r_l: Reward<'_>,
    r_e: Reward<'_>,
    demos: &DemoSet,
) -> Result<Array1<f64>, LowerError> {
    check_demos(game, demos)?;
    let solution = soft::solve_soft(game, r_l, r_e);
    let occ = soft::occupancy(game, &solution.policy);
    let mu_model = soft::feature_expectation(&occ, r_l.model);
    let mu_emp = empirical_feature_expectation(demos, r_l.model, game.discount)?;
    Ok(mu_model - mu_emp)
}

/// Monte-Carlo variant of `lower_grad_e`; the model feature expectation is
/// estimated from `n` rollouts of the current policy.
pub fn lower_grad_e_mc(
    game: &MarkovGame,
    r_l: Reward<'_>,
    r_e: Reward<'_>,
    demos: &DemoSet,
    lambda: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array1<f64>, LowerError> {
    check_demos(game, demos)?;
    let solution = soft::solve_soft(game, r_l, r_e);
    let mu_model = mc::feature_expectation(game, &solution.policy, r_e.model, n, rng);
    let mu_emp = empirical_feature_expectation(demos, r_e.model, game.discount)?;
    Ok(mu_model - mu_emp + &r_e.theta.mapv(|x| lambda * x))
}

/// `t_k` projected gradient steps on the expert parameter with the learner
/// parameter held fixed and the demo set frozen. Returns the iterate after
/// the final step together with per-step loss and gradient-norm traces.
#[allow(clippy::too_many_arguments)]
pub fn inner_loop(
    game: &MarkovGame,
    r_l: Reward<'_>,
    model_e: &RewardModel,
    theta_e_init: &RewardParams,
    demos: &DemoSet,
    config: &LowerConfig,
    t_k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LowerState, LowerError> {
    assert!(t_k >= 1, "inner loop needs at least one step");
    assert!(config.lambda > 0.0, "lambda must be positive");
    check_demos(game, demos)?;
    let mut theta = theta_e_init.clone();
    let mut loss_history = Vec::with_capacity(t_k);
    let mut grad_norm_history = Vec::with_capacity(t_k);
    for t in 0..t_k {
        let r_e = Reward::new(model_e, theta.theta());
        let (loss, grad) = if config.exact_expectations {
            lower_loss_and_grad_e(game, r_l, r_e, demos, config.lambda)?
        } else {
            let loss = lower_loss(game, r_l, r_e, demos, config.lambda)?;
            let grad =
                lower_grad_e_mc(game, r_l, r_e, demos, config.lambda, config.mc_rollouts, rng)?;
            (loss, grad)
        };
        loss_history.push(loss);
        grad_norm_history.push(l2_norm(&grad));
        let beta = config.step_sizes.at(t);
        let stepped = theta.theta() - &grad.mapv(|g| beta * g);
        theta = RewardParams::project(stepped).expect("finite gradient step");
    }
    Ok(LowerState {
        theta_e: theta,
        loss_history,
        grad_norm_history,
    })
}
