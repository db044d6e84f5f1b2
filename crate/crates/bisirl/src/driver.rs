//! The double-loop driver: inner maximum-likelihood fitting of the expert
//! reward, outer projected descent on the learner reward through the
//! SPSA-assembled hypergradient, plus the expert-in-the-loop interaction
//! protocol and reference baselines.

use std::time::Instant;

use ndarray::{Array1, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{
    sample_interaction, sample_trajectory, DemoSet, GameError, JointPolicy, MarginalPolicy,
    MarkovGame,
};
use crate::hypergrad::{
    estimate_hypergradient, HypergradError, SpsaConfig, UpperObjective, UpperProblem,
};
use crate::lower::{inner_loop, loss_with_solution, LowerConfig, LowerError};
use crate::reward::{l2_norm, Reward, RewardError, RewardModel, RewardParams};
use crate::soft;

/// Default numerator of the shrinking perturbation radius.
pub const DEFAULT_P_SCALE: f64 = 1.0;
/// Default numerator of the outer step size.
pub const DEFAULT_ALPHA0: f64 = 0.5;

/// Reference schedules: perturbation radius `p(k) = 1/(k+1)` (shifted so the
/// first iteration is defined), outer step `alpha_k = alpha0 / sqrt(K)`, and
/// inner step count `t_k = ceil((k+1)^(1/4) / 2)`.
pub fn schedules(k: usize, total_iterations: usize) -> (f64, f64, usize) {
    (
        DEFAULT_P_SCALE / (k as f64 + 1.0),
        DEFAULT_ALPHA0 / (total_iterations as f64).sqrt(),
        quartic_inner_steps(k),
    )
}

fn quartic_inner_steps(k: usize) -> usize {
    let v = ((k + 1) as f64).powf(0.25) / 2.0;
    // Guard against powf landing a hair above an exact integer.
    ((v - 1e-9).ceil() as usize).max(1)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbationSchedule {
    /// `p(k) = scale / (k + 1)`.
    InverseIteration { scale: f64 },
    Constant { value: f64 },
}

impl PerturbationSchedule {
    pub fn at(&self, k: usize) -> f64 {
        match self {
            PerturbationSchedule::InverseIteration { scale } => scale / (k as f64 + 1.0),
            PerturbationSchedule::Constant { value } => *value,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSizeSchedule {
    /// `alpha_k = alpha0 / sqrt(K)`.
    InverseSqrtTotal { alpha0: f64 },
    Constant { value: f64 },
}

impl StepSizeSchedule {
    pub fn at(&self, _k: usize, total: usize) -> f64 {
        match self {
            StepSizeSchedule::InverseSqrtTotal { alpha0 } => alpha0 / (total as f64).sqrt(),
            StepSizeSchedule::Constant { value } => *value,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InnerStepSchedule {
    /// `t_k = ceil((k+1)^(1/4) / 2)`.
    QuarticGrowth,
    Constant { steps: usize },
}

impl InnerStepSchedule {
    pub fn at(&self, k: usize) -> usize {
        match self {
            InnerStepSchedule::QuarticGrowth => quartic_inner_steps(k),
            InnerStepSchedule::Constant { steps } => (*steps).max(1),
        }
    }
}

/// Which reward defines the upper objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpperObjectiveKind {
    /// The learner's ground-truth reward values.
    #[default]
    TrueReward,
    /// The learner's own current estimate.
    EstimatedReward,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverConfig {
    /// Outer iteration count `K`.
    pub outer_iterations: usize,
    pub schedule_p: PerturbationSchedule,
    pub schedule_alpha: StepSizeSchedule,
    pub schedule_t: InnerStepSchedule,
    pub lower: LowerConfig,
    pub spsa: SpsaConfig,
    /// Interaction trajectories collected per outer iteration.
    pub demos_per_iteration: usize,
    pub upper_objective: UpperObjectiveKind,
    pub seed: u64,
    /// Initial parameters; zero vectors (the uniform policy) when absent.
    #[serde(default)]
    pub theta_l_init: Option<Vec<f64>>,
    #[serde(default)]
    pub theta_e_init: Option<Vec<f64>>,
}

impl Default for DriverConfig {
    fn default() -> Self {
        DriverConfig {
            outer_iterations: 100,
            schedule_p: PerturbationSchedule::InverseIteration {
                scale: DEFAULT_P_SCALE,
            },
            schedule_alpha: StepSizeSchedule::InverseSqrtTotal {
                alpha0: DEFAULT_ALPHA0,
            },
            schedule_t: InnerStepSchedule::QuarticGrowth,
            lower: LowerConfig::default(),
            spsa: SpsaConfig::default(),
            demos_per_iteration: 16,
            upper_objective: UpperObjectiveKind::TrueReward,
            seed: 0,
        theta_l_init: None,
            theta_e_init: None,
        }
    }
}

impl DriverConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.outer_iterations == 0 {
            return Err("outer_iterations must be at least 1".into());
        }
        if self.demos_per_iteration == 0 {
            return Err("demos_per_iteration must be at least 1".into());
        }
        if self.lower.lambda <= 0.0 {
            return Err("lambda must be positive".into());
        }
        for k in 0..self.outer_iterations {
            if self.schedule_p.at(k) <= 0.0 {
                return Err(format!("perturbation schedule non-positive at k={k}"));
            }
            if self.schedule_alpha.at(k, self.outer_iterations) < 0.0 {
                return Err(format!("step-size schedule negative at k={k}"));
            }
        }
        Ok(())
    }
}

/// How the live expert responds while interacting with the learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseMode {
    /// The expert plays its marginal of the joint soft policy induced by
    /// both ground-truth rewards; the demo distribution then matches the
    /// lower-level likelihood model.
    #[default]
    JointSoft,
    /// The expert soft-best-responds to the learner's current marginal:
    /// transitions and rewards are averaged over the learner's actions and
    /// the induced single-agent soft policy is returned.
    BestResponseSoft,
}

/// The ground-truth expert, fixed for the whole run.
#[derive(Debug, Clone)]
pub struct ExpertOracle {
    pub model: RewardModel,
    pub params: RewardParams,
    pub response_mode: ResponseMode,
}

impl ExpertOracle {
    pub fn reward(&self) -> Reward<'_> {
        Reward::new(&self.model, self.params.theta())
    }
}

/// Per-`(h, s)` expert action distribution for the current interaction.
pub fn expert_policy(
    oracle: &ExpertOracle,
    game: &MarkovGame,
    true_l: Reward<'_>,
    learner_marginal: &MarginalPolicy,
) -> MarginalPolicy {
    match oracle.response_mode {
        ResponseMode::JointSoft => {
            soft::solve_soft(game, true_l, oracle.reward()).policy.expert_marginal()
        }
        ResponseMode::BestResponseSoft => best_response_soft(oracle, game, learner_marginal),
    }
}

/// Soft backward induction on the single-agent decision problem obtained by
/// averaging transitions and the expert reward over the learner's marginal.
fn best_response_soft(
    oracle: &ExpertOracle,
    game: &MarkovGame,
    learner_marginal: &MarginalPolicy,
) -> MarginalPolicy {
    let (h_len, ns, nae) = (game.horizon, game.n_states, game.n_actions_expert);
    let r_e = oracle.reward();
    let mut table = Array3::zeros((h_len, ns, nae));
    let mut v_next: Array1<f64> = Array1::zeros(ns);
    let mut v_here: Array1<f64> = Array1::zeros(ns);
    for h in (0..h_len).rev() {
        for s in 0..ns {
            let mut q = vec![0.0; nae];
            for (ae, q_sa) in q.iter_mut().enumerate() {
                for al in 0..game.n_actions_learner {
                    let nu = learner_marginal.table[[h, s, al]];
                    if nu == 0.0 {
                        continue;
                    }
                    let mut future = 0.0;
                    for sp in 0..ns {
                        future += game.transition[[s, al, ae, sp]] * v_next[sp];
                    }
                    *q_sa += nu * (r_e.value(s, al, ae) + game.discount * future);
                }
            }
            let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = q.iter().map(|v| (v - max).exp()).sum();
            v_here[s] = max + z.ln();
            for ae in 0..nae {
                table[[h, s, ae]] = (q[ae] - v_here[s]).exp();
            }
        }
        v_next.assign(&v_here);
    }
    MarginalPolicy { table }
}

#[derive(Debug, Error)]
pub enum DriverPhaseError {
    #[error("demo sampling: {0}")]
    Demo(#[from] GameError),
    #[error("inner loop: {0}")]
    Lower(#[from] LowerError),
    #[error("hypergradient: {0}")]
    Hypergrad(#[from] HypergradError),
    #[error("projection: {0}")]
    Reward(#[from] RewardError),
}

#[derive(Debug, Error)]
#[error("outer iteration {k}: {source}")]
pub struct DriverError {
    pub k: usize,
    #[source]
    pub source: DriverPhaseError,
}

/// Wall-clock milliseconds spent in each phase of one outer iteration.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct PhaseTimings {
    pub demo_ms: f64,
    pub inner_ms: f64,
    pub hyper_ms: f64,
    pub eval_ms: f64,
}

/// Diagnostics recorded once per outer iteration, evaluated at
/// `(theta_l(k), theta_e(k))` with `theta_e(k)` taken after the inner loop.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub k: usize,
    pub theta_l: Vec<f64>,
    pub theta_e: Vec<f64>,
    /// Upper objective value (minus the learner's cumulative reward).
    pub f_value: f64,
    pub hypergrad_norm: f64,
    pub lower_loss: f64,
    /// `|J_e(pi_k) - J_e(pi*)|` under the ground-truth expert reward.
    pub expert_gap: f64,
    #[serde(skip)]
    pub timings: PhaseTimings,
}

#[derive(Debug, Clone)]
pub struct BisirlOutcome {
    pub records: Vec<RunRecord>,
    pub theta_l: RewardParams,
    pub theta_e: RewardParams,
    pub policy: JointPolicy,
}

fn initial_params(init: &Option<Vec<f64>>, dim: usize) -> Result<RewardParams, RewardError> {
    match init {
        Some(values) => RewardParams::new(Array1::from_vec(values.clone())),
        None => Ok(RewardParams::zeros(dim)),
    }
}

/// Runs the full double loop.
///
/// Each outer iteration: (1) play the learner's marginal of the current
/// joint policy against the live expert to collect demonstrations, (2) take
/// `t_k` projected likelihood steps on the expert parameter, (3) assemble
/// the SPSA hypergradient at the refreshed pair, (4) projected step on the
/// learner parameter. Any phase failure aborts with the iteration index
/// attached. Fixed seeds reproduce the full record stream bit for bit.
pub fn run_bisirl(
    game: &MarkovGame,
    model_l: &RewardModel,
    model_e: &RewardModel,
    true_l: Reward<'_>,
    oracle: &ExpertOracle,
    config: &DriverConfig,
) -> Result<BisirlOutcome, DriverError> {
    let fail = |k: usize, source: DriverPhaseError| DriverError { k, source };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut theta_l =
        initial_params(&config.theta_l_init, model_l.dim()).map_err(|e| fail(0, e.into()))?;
    let mut theta_e =
        initial_params(&config.theta_e_init, model_e.dim()).map_err(|e| fail(0, e.into()))?;
    let total = config.outer_iterations;

    // The ground-truth interacting policy, used for the expert value gap.
    let true_solution = soft::solve_soft(game, true_l, oracle.reward());
    let true_occ = soft::occupancy(game, &true_solution.policy);
    let j_e_star = soft::cumulative_reward(&true_occ, oracle.reward());
    let joint_soft_expert = match oracle.response_mode {
        ResponseMode::JointSoft => Some(true_solution.policy.expert_marginal()),
        ResponseMode::BestResponseSoft => None,
    };

    let mut records = Vec::with_capacity(total);
    for k in 0..total {
        let p_k = config.schedule_p.at(k);
        let alpha_k = config.schedule_alpha.at(k, total);
        let t_k = config.schedule_t.at(k);
        let mut timings = PhaseTimings::default();

        // Collect interaction demonstrations under the current joint policy.
        let clock = Instant::now();
        let r_l = Reward::new(model_l, theta_l.theta());
        let current = soft::solve_soft(game, r_l, Reward::new(model_e, theta_e.theta()));
        let learner_marginal = current.policy.learner_marginal();
        let expert_marginal = match &joint_soft_expert {
            Some(fixed) => fixed.clone(),
            None => best_response_soft(oracle, game, &learner_marginal),
        };
        let demos = sample_interaction(
            game,
            &learner_marginal,
            &expert_marginal,
            config.demos_per_iteration,
            &mut rng,
        )
        .map_err(|e| fail(k, e.into()))?;
        timings.demo_ms = clock.elapsed().as_secs_f64() * 1e3;

        let clock = Instant::now();
        let inner = inner_loop(
            game,
            r_l,
            model_e,
            &theta_e,
            &demos,
            &config.lower,
            t_k,
            &mut rng,
        )
        .map_err(|e| fail(k, e.into()))?;
        theta_e = inner.theta_e;
        timings.inner_ms = clock.elapsed().as_secs_f64() * 1e3;

        let clock = Instant::now();
        let objective = match config.upper_objective {
            UpperObjectiveKind::TrueReward => UpperObjective::TrueReward(true_l),
            UpperObjectiveKind::EstimatedReward => UpperObjective::EstimatedReward,
        };
        let problem = UpperProblem {
            game,
            model_l,
            model_e,
            lambda: config.lower.lambda,
            objective,
        };
        let estimate = estimate_hypergradient(
            &problem,
            theta_l.theta(),
            theta_e.theta(),
            &demos,
            &config.spsa.with_p(p_k),
            &mut rng,
        )
        .map_err(|e| fail(k, e.into()))?;
        timings.hyper_ms = clock.elapsed().as_secs_f64() * 1e3;

        // Diagnostics at (theta_l(k), theta_e(k)).
        let clock = Instant::now();
        let eval = soft::solve_soft(game, r_l, Reward::new(model_e, theta_e.theta()));
        let occ = soft::occupancy(game, &eval.policy);
        let f_value = match config.upper_objective {
            UpperObjectiveKind::TrueReward => -soft::cumulative_reward(&occ, true_l),
            UpperObjectiveKind::EstimatedReward => -soft::cumulative_reward(&occ, r_l),
        };
        let j_e = soft::cumulative_reward(&occ, oracle.reward());
        let lower_loss = loss_with_solution(
            game,
            &eval,
            r_l,
            Reward::new(model_e, theta_e.theta()),
            &demos,
            config.lower.lambda,
        )
        .map_err(|e| fail(k, e.into()))?;
        timings.eval_ms = clock.elapsed().as_secs_f64() * 1e3;

        records.push(RunRecord {
            k,
            theta_l: theta_l.theta().to_vec(),
            theta_e: theta_e.theta().to_vec(),
            f_value,
            hypergrad_norm: l2_norm(&estimate.assembled),
            lower_loss,
            expert_gap: (j_e - j_e_star).abs(),
            timings,
        });

        let stepped = theta_l.theta() - &estimate.assembled.mapv(|g| alpha_k * g);
        theta_l = RewardParams::project(stepped).map_err(|e| fail(k, e.into()))?;
    }

    let final_policy = soft::solve_soft(
        game,
        Reward::new(model_l, theta_l.theta()),
        Reward::new(model_e, theta_e.theta()),
    )
    .policy;
    Ok(BisirlOutcome {
        records,
        theta_l,
        theta_e,
        policy: final_policy,
    })
}

/// Exact value of a joint policy under both ground-truth rewards.
#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub policy: JointPolicy,
    pub j_l: f64,
    pub j_e: f64,
}

/// Full-information reference: solve the game with both ground-truth
/// rewards and report the exact cumulative values.
pub fn run_marl_baseline(
    game: &MarkovGame,
    true_l: Reward<'_>,
    true_e: Reward<'_>,
) -> BaselineOutcome {
    let solution = soft::solve_soft(game, true_l, true_e);
    let occ = soft::occupancy(game, &solution.policy);
    BaselineOutcome {
        j_l: soft::cumulative_reward(&occ, true_l),
        j_e: soft::cumulative_reward(&occ, true_e),
        policy: solution.policy,
    }
}

/// Demonstrations for the passive-IRL baseline: rollouts of the joint soft
/// policy induced by the learner's initial reward estimate and the
/// ground-truth expert reward.
pub fn collect_mlirl_demos(
    game: &MarkovGame,
    r_l_init: Reward<'_>,
    r_e_true: Reward<'_>,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> DemoSet {
    let policy = soft::solve_soft(game, r_l_init, r_e_true).policy;
    let trajectories = (0..d)
        .map(|_| sample_trajectory(game, &policy, rng))
        .collect();
    DemoSet { trajectories }
}

#[derive(Debug, Clone)]
pub struct MlirlOutcome {
    pub theta_e: RewardParams,
    pub policy: JointPolicy,
    pub j_l: f64,
    pub j_e: f64,
}

/// Passive maximum-likelihood IRL baseline: fit the expert parameter against
/// a fixed demo set with the learner parameter frozen at its initial value.
#[allow(clippy::too_many_arguments)]
pub fn run_mlirl_baseline(
    game: &MarkovGame,
    model_l: &RewardModel,
    theta_l_init: &RewardParams,
    model_e: &RewardModel,
    theta_e_init: &RewardParams,
    demos: &DemoSet,
    lower_config: &LowerConfig,
    steps: usize,
    true_l: Reward<'_>,
    true_e: Reward<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<MlirlOutcome, LowerError> {
    let r_l = Reward::new(model_l, theta_l_init.theta());
    let theta_e = if steps == 0 {
        theta_e_init.clone()
    } else {
        inner_loop(
            game,
            r_l,
            model_e,
            theta_e_init,
            demos,
            lower_config,
            steps,
            rng,
        )?
        .theta_e
    };
    let policy = soft::solve_soft(game, r_l, Reward::new(model_e, theta_e.theta())).policy;
    let occ = soft::occupancy(game, &policy);
    Ok(MlirlOutcome {
        theta_e,
        j_l: soft::cumulative_reward(&occ, true_l),
        j_e: soft::cumulative_reward(&occ, true_e),
        policy,
    })
}
