//! Finite two-agent Markov games, trajectories, and rollout sampling.
//!
//! States and actions are dense integer indices and the transition model is
//! a dense tensor, which keeps desk-scale games exact: every expectation can
//! be evaluated by dynamic programming and cross-checked by seeded rollouts.

use ndarray::{Array1, Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;

/// Tolerance for probability normalization checks.
pub const PROB_TOL: f64 = 1e-12;

/// Tolerance for policy normalization checks.
pub const POLICY_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum GameError {
    #[error("transition row (s={state}, a_l={learner_action}, a_e={expert_action}) sums to {sum}")]
    RowSum {
        state: usize,
        learner_action: usize,
        expert_action: usize,
        sum: f64,
    },
    #[error(
        "negative probability {value} in transition row (s={state}, a_l={learner_action}, a_e={expert_action})"
    )]
    NegativeTransition {
        state: usize,
        learner_action: usize,
        expert_action: usize,
        value: f64,
    },
    #[error("initial distribution sums to {sum}")]
    InitialDistSum { sum: f64 },
    #[error("negative probability {value} in initial distribution at state {state}")]
    NegativeInitial { state: usize, value: f64 },
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("discount {0} outside (0, 1]")]
    BadDiscount(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("policy row (h={step}, s={state}) sums to {sum}")]
    PolicyRowSum { step: usize, state: usize, sum: f64 },
    #[error("negative policy entry {value} at (h={step}, s={state})")]
    NegativePolicy { step: usize, state: usize, value: f64 },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// A finite-horizon two-agent Markov game with factored actions.
///
/// `transition[[s, a_l, a_e, s']]` is the probability of moving to `s'` when
/// the joint action `(a_l, a_e)` is taken in state `s`. Values are immutable
/// after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovGame {
    pub n_states: usize,
    pub n_actions_learner: usize,
    pub n_actions_expert: usize,
    pub transition: Array4<f64>,
    pub horizon: usize,
    pub discount: f64,
    pub initial_dist: Array1<f64>,
}

impl MarkovGame {
    pub fn new(
        transition: Array4<f64>,
        horizon: usize,
        discount: f64,
        initial_dist: Array1<f64>,
    ) -> Result<Self, GameError> {
        let (n_states, n_actions_learner, n_actions_expert, n_next) = transition.dim();
        if n_next != n_states {
            return Err(GameError::Shape(format!(
                "transition tensor maps {n_states} states onto {n_next} states"
            )));
        }
        if initial_dist.len() != n_states {
            return Err(GameError::Shape(format!(
                "initial distribution has {} entries for {} states",
                initial_dist.len(),
                n_states
            )));
        }
        let game = Self {
            n_states,
            n_actions_learner,
            n_actions_expert,
            transition,
            horizon,
            discount,
            initial_dist,
        };
        game.validate()?;
        Ok(game)
    }

    /// Checks every invariant, reporting the first violation found.
    pub fn validate(&self) -> Result<(), GameError> {
        if self.horizon == 0 {
            return Err(GameError::ZeroHorizon);
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(GameError::BadDiscount(self.discount));
        }
        for s in 0..self.n_states {
            for al in 0..self.n_actions_learner {
                for ae in 0..self.n_actions_expert {
                    let mut sum = 0.0;
                    for sp in 0..self.n_states {
                        let p = self.transition[[s, al, ae, sp]];
                        if p < 0.0 {
                            return Err(GameError::NegativeTransition {
                                state: s,
                                learner_action: al,
                                expert_action: ae,
                                value: p,
                            });
                        }
                        sum += p;
                    }
                    if (sum - 1.0).abs() > PROB_TOL {
                        return Err(GameError::RowSum {
                            state: s,
                            learner_action: al,
                            expert_action: ae,
                            sum,
                        });
                    }
                }
            }
        }
        let mut sum = 0.0;
        for (s, &p) in self.initial_dist.iter().enumerate() {
            if p < 0.0 {
                return Err(GameError::NegativeInitial { state: s, value: p });
            }
            sum += p;
        }
        if (sum - 1.0).abs() > PROB_TOL {
            return Err(GameError::InitialDistSum { sum });
        }
        Ok(())
    }

    pub fn n_joint_actions(&self) -> usize {
        self.n_actions_learner * self.n_actions_expert
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&GameDoc::from(self)).expect("game serialization")
    }

    /// Parses a game document, rejecting anything that violates the
    /// probability invariants.
    pub fn from_json(text: &str) -> Result<Self, GameError> {
        let doc: GameDoc = serde_json::from_str(text)?;
        doc.try_into()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GameDoc {
    n_states: usize,
    n_actions_learner: usize,
    n_actions_expert: usize,
    horizon: usize,
    discount: f64,
    initial_dist: Vec<f64>,
    transition: Vec<Vec<Vec<Vec<f64>>>>,
}

impl From<&MarkovGame> for GameDoc {
    fn from(game: &MarkovGame) -> Self {
        let mut transition = Vec::with_capacity(game.n_states);
        for s in 0..game.n_states {
            let mut per_al = Vec::with_capacity(game.n_actions_learner);
            for al in 0..game.n_actions_learner {
                let mut per_ae = Vec::with_capacity(game.n_actions_expert);
                for ae in 0..game.n_actions_expert {
                    per_ae.push(
                        (0..game.n_states)
                            .map(|sp| game.transition[[s, al, ae, sp]])
                            .collect(),
                    );
                }
                per_al.push(per_ae);
            }
            transition.push(per_al);
        }
        GameDoc {
            n_states: game.n_states,
            n_actions_learner: game.n_actions_learner,
            n_actions_expert: game.n_actions_expert,
            horizon: game.horizon,
            discount: game.discount,
            initial_dist: game.initial_dist.to_vec(),
            transition,
        }
    }
}

impl TryFrom<GameDoc> for MarkovGame {
    type Error = GameError;

    fn try_from(doc: GameDoc) -> Result<Self, GameError> {
        let mut transition = Array4::zeros((
            doc.n_states,
            doc.n_actions_learner,
            doc.n_actions_expert,
            doc.n_states,
        ));
        if doc.transition.len() != doc.n_states {
            return Err(GameError::Shape(format!(
                "transition has {} state rows, expected {}",
                doc.transition.len(),
                doc.n_states
            )));
        }
        for (s, per_al) in doc.transition.iter().enumerate() {
            if per_al.len() != doc.n_actions_learner {
                return Err(GameError::Shape(format!(
                    "state {s} has {} learner-action rows, expected {}",
                    per_al.len(),
                    doc.n_actions_learner
                )));
            }
            for (al, per_ae) in per_al.iter().enumerate() {
                if per_ae.len() != doc.n_actions_expert {
                    return Err(GameError::Shape(format!(
                        "row (s={s}, a_l={al}) has {} expert-action rows, expected {}",
                        per_ae.len(),
                        doc.n_actions_expert
                    )));
                }
                for (ae, row) in per_ae.iter().enumerate() {
                    if row.len() != doc.n_states {
                        return Err(GameError::Shape(format!(
                            "row (s={s}, a_l={al}, a_e={ae}) has {} entries, expected {}",
                            row.len(),
                            doc.n_states
                        )));
                    }
                    for (sp, &p) in row.iter().enumerate() {
                        transition[[s, al, ae, sp]] = p;
                    }
                }
            }
        }
        MarkovGame::new(
            transition,
            doc.horizon,
            doc.discount,
            Array1::from_vec(doc.initial_dist),
        )
    }
}

/// One step of play: the shared state and the factored joint action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub learner_action: usize,
    pub expert_action: usize,
}

/// A single length-`H` record of play.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// A batch of interaction trajectories sharing one horizon.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DemoSet {
    pub trajectories: Vec<Trajectory>,
}

impl DemoSet {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Common horizon of the batch, or `None` when empty.
    pub fn horizon(&self) -> Option<usize> {
        self.trajectories.first().map(|t| t.len())
    }
}

/// Joint policy table `[[h, s, a_l, a_e]]`; rows over the joint action
/// normalize to one for every `(h, s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPolicy {
    pub table: Array4<f64>,
}

impl JointPolicy {
    pub fn uniform(game: &MarkovGame) -> Self {
        let p = 1.0 / game.n_joint_actions() as f64;
        JointPolicy {
            table: Array4::from_elem(
                (
                    game.horizon,
                    game.n_states,
                    game.n_actions_learner,
                    game.n_actions_expert,
                ),
                p,
            ),
        }
    }

    pub fn validate_for(&self, game: &MarkovGame) -> Result<(), GameError> {
        let dim = self.table.dim();
        let want = (
            game.horizon,
            game.n_states,
            game.n_actions_learner,
            game.n_actions_expert,
        );
        if dim != want {
            return Err(GameError::Shape(format!(
                "policy table {dim:?} does not match game {want:?}"
            )));
        }
        for h in 0..game.horizon {
            for s in 0..game.n_states {
                let mut sum = 0.0;
                for al in 0..game.n_actions_learner {
                    for ae in 0..game.n_actions_expert {
                        let p = self.table[[h, s, al, ae]];
                        if p < 0.0 {
                            return Err(GameError::NegativePolicy {
                                step: h,
                                state: s,
                                value: p,
                            });
                        }
                        sum += p;
                    }
                }
                if (sum - 1.0).abs() > POLICY_TOL {
                    return Err(GameError::PolicyRowSum {
                        step: h,
                        state: s,
                        sum,
                    });
                }
            }
        }
        Ok(())
    }

    /// Per-`(h, s)` learner action distribution (sum over expert actions).
    pub fn learner_marginal(&self) -> MarginalPolicy {
        MarginalPolicy {
            table: self.table.sum_axis(ndarray::Axis(3)),
        }
    }

    /// Per-`(h, s)` expert action distribution (sum over learner actions).
    pub fn expert_marginal(&self) -> MarginalPolicy {
        MarginalPolicy {
            table: self.table.sum_axis(ndarray::Axis(2)),
        }
    }
}

/// Per-agent policy table `[[h, s, a]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalPolicy {
    pub table: Array3<f64>,
}

impl MarginalPolicy {
    pub fn uniform(horizon: usize, n_states: usize, n_actions: usize) -> Self {
        MarginalPolicy {
            table: Array3::from_elem((horizon, n_states, n_actions), 1.0 / n_actions as f64),
        }
    }
}

/// Inverse-CDF draw from `weights` given a uniform `u` in [0, 1).
fn sample_index(weights: impl Iterator<Item = f64>, u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding slack past the final cumulative weight.
    last
}

/// Samples one trajectory by executing `policy` on `game`.
///
/// Panics if the policy shape does not match the game. Bit-reproducible for
/// a fixed RNG state.
pub fn sample_trajectory<R: Rng + ?Sized>(
    game: &MarkovGame,
    policy: &JointPolicy,
    rng: &mut R,
) -> Trajectory {
    assert_eq!(
        policy.table.dim(),
        (
            game.horizon,
            game.n_states,
            game.n_actions_learner,
            game.n_actions_expert,
        ),
        "policy shape does not match game"
    );
    let mut state = sample_index(game.initial_dist.iter().copied(), rng.random::<f64>());
    let mut steps = Vec::with_capacity(game.horizon);
    for h in 0..game.horizon {
        let flat = sample_index(
            (0..game.n_joint_actions()).map(|j| {
                policy.table[[
                    h,
                    state,
                    j / game.n_actions_expert,
                    j % game.n_actions_expert,
                ]]
            }),
            rng.random::<f64>(),
        );
        let learner_action = flat / game.n_actions_expert;
        let expert_action = flat % game.n_actions_expert;
        steps.push(Step {
            state,
            learner_action,
            expert_action,
        });
        state = sample_index(
            (0..game.n_states).map(|sp| game.transition[[state, learner_action, expert_action, sp]]),
            rng.random::<f64>(),
        );
    }
    Trajectory { steps }
}

/// Samples one trajectory with the learner and expert acting independently
/// from their marginals given the shared state.
pub fn sample_product_trajectory<R: Rng + ?Sized>(
    game: &MarkovGame,
    learner: &MarginalPolicy,
    expert: &MarginalPolicy,
    rng: &mut R,
) -> Trajectory {
    let mut state = sample_index(game.initial_dist.iter().copied(), rng.random::<f64>());
    let mut steps = Vec::with_capacity(game.horizon);
    for h in 0..game.horizon {
        let learner_action = sample_index(
            (0..game.n_actions_learner).map(|a| learner.table[[h, state, a]]),
            rng.random::<f64>(),
        );
        let expert_action = sample_index(
            (0..game.n_actions_expert).map(|a| expert.table[[h, state, a]]),
            rng.random::<f64>(),
        );
        steps.push(Step {
            state,
            learner_action,
            expert_action,
        });
        state = sample_index(
            (0..game.n_states).map(|sp| game.transition[[state, learner_action, expert_action, sp]]),
            rng.random::<f64>(),
        );
    }
    Trajectory { steps }
}

/// Collects `d` interaction trajectories, one independent RNG stream per
/// trajectory. The result does not depend on how the work is scheduled.
pub fn sample_interaction<R: Rng + ?Sized>(
    game: &MarkovGame,
    learner: &MarginalPolicy,
    expert: &MarginalPolicy,
    d: usize,
    rng: &mut R,
) -> Result<DemoSet, GameError> {
    let want_l = (game.horizon, game.n_states, game.n_actions_learner);
    let want_e = (game.horizon, game.n_states, game.n_actions_expert);
    if learner.table.dim() != want_l {
        return Err(GameError::Shape(format!(
            "learner marginal {:?} does not match game {want_l:?}",
            learner.table.dim()
        )));
    }
    if expert.table.dim() != want_e {
        return Err(GameError::Shape(format!(
            "expert marginal {:?} does not match game {want_e:?}",
            expert.table.dim()
        )));
    }
    let streams = exec::fork_rngs(rng, d);
    let trajectories = exec::map_indexed(d, |i| {
        let mut child = streams[i].clone();
        sample_product_trajectory(game, learner, expert, &mut child)
    });
    Ok(DemoSet { trajectories })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_state_game() -> MarkovGame {
        MarkovGame::new(
            Array4::from_elem((1, 1, 1, 1), 1.0),
            3,
            0.9,
            Array1::from_vec(vec![1.0]),
        )
        .unwrap()
    }

    /// Deterministic chain s -> s+1 (absorbing at the last state).
    pub(crate) fn chain_game(n: usize, horizon: usize, discount: f64) -> MarkovGame {
        let mut t = Array4::zeros((n, 1, 1, n));
        for s in 0..n {
            t[[s, 0, 0, (s + 1).min(n - 1)]] = 1.0;
        }
        let mut init = Array1::zeros(n);
        init[0] = 1.0;
        MarkovGame::new(t, horizon, discount, init).unwrap()
    }

    #[test]
    fn identity_game_validates() {
        single_state_game().validate().unwrap();
    }

    #[test]
    fn bad_row_sum_is_reported() {
        let mut t = Array4::zeros((2, 1, 1, 2));
        t[[0, 0, 0, 0]] = 0.5;
        t[[0, 0, 0, 1]] = 0.6;
        t[[1, 0, 0, 0]] = 1.0;
        let err = MarkovGame::new(t, 1, 1.0, Array1::from_vec(vec![1.0, 0.0])).unwrap_err();
        assert!(err.to_string().contains("sums to 1.1"), "{err}");
    }

    #[test]
    fn negative_initial_probability_is_reported() {
        let mut t = Array4::zeros((2, 1, 1, 2));
        t[[0, 0, 0, 0]] = 1.0;
        t[[1, 0, 0, 1]] = 1.0;
        let err = MarkovGame::new(t, 1, 1.0, Array1::from_vec(vec![-0.1, 1.1])).unwrap_err();
        assert!(err.to_string().contains("negative probability"), "{err}");
    }

    #[test]
    fn chain_trajectory_visits_states_in_order() {
        let game = chain_game(6, 5, 1.0);
        let policy = JointPolicy::uniform(&game);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let traj = sample_trajectory(&game, &policy, &mut rng);
        let states: Vec<usize> = traj.steps.iter().map(|st| st.state).collect();
        assert_eq!(states, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn sampling_is_reproducible() {
        let game = chain_game(4, 4, 1.0);
        let mut t = Array4::zeros((4, 2, 2, 4));
        for s in 0..4 {
            for al in 0..2 {
                for ae in 0..2 {
                    t[[s, al, ae, (s + al + ae) % 4]] = 0.7;
                    t[[s, al, ae, s]] += 0.3;
                }
            }
        }
        let game = MarkovGame::new(t, 4, game.discount, game.initial_dist.clone()).unwrap();
        let policy = JointPolicy::uniform(&game);
        let a = sample_trajectory(&game, &policy, &mut ChaCha8Rng::seed_from_u64(11));
        let b = sample_trajectory(&game, &policy, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_two_action_frequency_is_half() {
        let mut t = Array4::zeros((1, 2, 1, 1));
        t[[0, 0, 0, 0]] = 1.0;
        t[[0, 1, 0, 0]] = 1.0;
        let game = MarkovGame::new(t, 1, 1.0, Array1::from_vec(vec![1.0])).unwrap();
        let policy = JointPolicy::uniform(&game);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mut zeros = 0usize;
        for _ in 0..n {
            let traj = sample_trajectory(&game, &policy, &mut rng);
            if traj.steps[0].learner_action == 0 {
                zeros += 1;
            }
        }
        let freq = zeros as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.01, "frequency {freq}");
    }

    #[test]
    fn deterministic_marginals_repeat_one_trajectory() {
        let game = chain_game(5, 4, 1.0);
        let learner = MarginalPolicy::uniform(4, 5, 1);
        let expert = MarginalPolicy::uniform(4, 5, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let demos = sample_interaction(&game, &learner, &expert, 8, &mut rng).unwrap();
        assert_eq!(demos.len(), 8);
        for t in &demos.trajectories {
            assert_eq!(t, &demos.trajectories[0]);
        }
    }

    #[test]
    fn empty_interaction_batch() {
        let game = chain_game(3, 2, 1.0);
        let learner = MarginalPolicy::uniform(2, 3, 1);
        let expert = MarginalPolicy::uniform(2, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let demos = sample_interaction(&game, &learner, &expert, 0, &mut rng).unwrap();
        assert!(demos.is_empty());
    }

    #[test]
    fn interaction_matches_product_of_marginals() {
        // One state so the joint action frequencies are directly observable.
        let mut t = Array4::zeros((1, 2, 2, 1));
        t.fill(1.0);
        let game = MarkovGame::new(t, 1, 1.0, Array1::from_vec(vec![1.0])).unwrap();
        let mut learner = MarginalPolicy::uniform(1, 1, 2);
        learner.table[[0, 0, 0]] = 0.7;
        learner.table[[0, 0, 1]] = 0.3;
        let mut expert = MarginalPolicy::uniform(1, 1, 2);
        expert.table[[0, 0, 0]] = 0.4;
        expert.table[[0, 0, 1]] = 0.6;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 10_000;
        let demos = sample_interaction(&game, &learner, &expert, d, &mut rng).unwrap();
        let mut counts = [[0usize; 2]; 2];
        for traj in &demos.trajectories {
            let st = traj.steps[0];
            counts[st.learner_action][st.expert_action] += 1;
        }
        let mut tv = 0.0;
        for al in 0..2 {
            for ae in 0..2 {
                let emp = counts[al][ae] as f64 / d as f64;
                let exact = learner.table[[0, 0, al]] * expert.table[[0, 0, ae]];
                tv += 0.5 * (emp - exact).abs();
            }
        }
        assert!(tv < 0.02, "total variation {tv}");
    }

    #[test]
    fn game_json_round_trip_and_rejection() {
        let game = chain_game(3, 2, 0.5);
        let text = game.to_json();
        let back = MarkovGame::from_json(&text).unwrap();
        assert_eq!(game, back);

        let broken = text.replace("1.0", "1.2");
        assert!(MarkovGame::from_json(&broken).is_err());
    }
}
