//! Desk-scale environment constructors.
//!
//! The security game models an attacker/defender interaction on an attack
//! graph; the grid game is a two-agent deception scenario on a small board.
//! Both builders return the game together with per-agent linear reward
//! models whose ground-truth parameters lie inside the unit ball, so the
//! truths are representable points of the learner's own parameter set.

use ndarray::{Array1, Array4};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{GameError, MarkovGame};
use crate::reward::{FeatureMap, RewardError, RewardModel, RewardParams};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("edge ({0}, {1}) references a node outside 0..{2}")]
    BadEdge(usize, usize, usize),
    #[error("edge probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("{0} nodes exceed the tabular limit of 10")]
    TooManyNodes(usize),
    #[error("entry node {0} outside 0..{1}")]
    BadEntryNode(usize, usize),
    #[error("graph field {field} has {got} entries, expected {expected}")]
    FieldLength {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("cell ({0}, {1}) outside a {2}x{3} grid")]
    CellOutOfBounds(usize, usize, usize, usize),
    #[error("landmarks must be distinct")]
    DuplicateLandmark,
    #[error("target landmark index {0} outside 0..{1}")]
    BadTarget(usize, usize),
    #[error("game: {0}")]
    Game(#[from] GameError),
    #[error("reward: {0}")]
    Reward(#[from] RewardError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// A game plus the reward models and ground-truth parameters for both agents.
#[derive(Debug, Clone)]
pub struct BuiltGame {
    pub game: MarkovGame,
    pub model_l: RewardModel,
    pub model_e: RewardModel,
    pub true_theta_l: RewardParams,
    pub true_theta_e: RewardParams,
}

/// An exploit edge of the attack graph.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exploit {
    pub source: usize,
    pub target: usize,
    pub success_prob: f64,
    pub attacker_cost: f64,
    pub defender_cost: f64,
}

/// Attack graph: machines as nodes, exploits as edges.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackGraph {
    pub n_nodes: usize,
    pub edges: Vec<Exploit>,
    /// Reward the attacker collects when the node first becomes compromised.
    pub compromise_reward: Vec<f64>,
    /// Nodes compromised at the start of every episode.
    pub entry_nodes: Vec<usize>,
}

impl AttackGraph {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.n_nodes > 10 {
            return Err(EnvError::TooManyNodes(self.n_nodes));
        }
        for e in &self.edges {
            if e.source >= self.n_nodes || e.target >= self.n_nodes {
                return Err(EnvError::BadEdge(e.source, e.target, self.n_nodes));
            }
            if !(0.0..=1.0).contains(&e.success_prob) {
                return Err(EnvError::BadProbability(e.success_prob));
            }
        }
        if self.compromise_reward.len() != self.n_nodes {
            return Err(EnvError::FieldLength {
                field: "compromise_reward",
                expected: self.n_nodes,
                got: self.compromise_reward.len(),
            });
        }
        for &n in &self.entry_nodes {
            if n >= self.n_nodes {
                return Err(EnvError::BadEntryNode(n, self.n_nodes));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        let graph: AttackGraph = serde_json::from_str(text)?;
        graph.validate()?;
        Ok(graph)
    }

    /// A fixed 4-node, 5-edge graph (16 states) used as the default
    /// security benchmark.
    pub fn four_node_default() -> Self {
        AttackGraph {
            n_nodes: 4,
            edges: vec![
                Exploit { source: 0, target: 1, success_prob: 0.9, attacker_cost: 0.05, defender_cost: 0.04 },
                Exploit { source: 0, target: 2, success_prob: 0.8, attacker_cost: 0.06, defender_cost: 0.05 },
                Exploit { source: 1, target: 3, success_prob: 0.85, attacker_cost: 0.07, defender_cost: 0.05 },
                Exploit { source: 2, target: 3, success_prob: 0.75, attacker_cost: 0.05, defender_cost: 0.06 },
                Exploit { source: 1, target: 2, success_prob: 0.7, attacker_cost: 0.04, defender_cost: 0.04 },
            ],
            compromise_reward: vec![0.0, 0.2, 0.2, 0.35],
            entry_nodes: vec![0],
        }
    }
}

/// Success probability of attack `a` in state `mask` against block `b`.
///
/// Nonzero only when the edge's source is compromised, its target is not,
/// and the defender is not blocking that same edge. Action index `n_edges`
/// is the no-op for both agents.
fn effective_prob(graph: &AttackGraph, mask: usize, block: usize, attack: usize) -> (f64, usize) {
    if attack >= graph.edges.len() {
        return (0.0, 0);
    }
    let edge = &graph.edges[attack];
    let source_owned = mask & (1 << edge.source) != 0;
    let target_clean = mask & (1 << edge.target) == 0;
    if source_owned && target_clean && block != attack {
        (edge.success_prob, edge.target)
    } else {
        (0.0, edge.target)
    }
}

/// Builds the security Markov game over the powerset of nodes.
///
/// The defender (learner) blocks one edge per step or passes; the attacker
/// (expert) attacks one edge or passes. A successful attack flips the target
/// node to compromised and nodes never become clean again. Rewards:
/// attacker gains the target's compromise reward (in expectation over the
/// exploit succeeding) minus the edge's usage cost; the defender receives
/// the negative of the attacker's compromise gain minus its own block cost.
pub fn build_security_game(
    graph: &AttackGraph,
    horizon: usize,
    discount: f64,
) -> Result<BuiltGame, EnvError> {
    graph.validate()?;
    let n_states = 1usize << graph.n_nodes;
    let n_edges = graph.edges.len();
    let n_actions = n_edges + 1; // last index is the no-op
    let mut transition = Array4::zeros((n_states, n_actions, n_actions, n_states));
    for mask in 0..n_states {
        for block in 0..n_actions {
            for attack in 0..n_actions {
                let (p, target) = effective_prob(graph, mask, block, attack);
                if p > 0.0 {
                    transition[[mask, block, attack, mask | (1 << target)]] = p;
                    transition[[mask, block, attack, mask]] = 1.0 - p;
                } else {
                    transition[[mask, block, attack, mask]] = 1.0;
                }
            }
        }
    }
    let mut initial = Array1::zeros(n_states);
    let entry_mask = graph
        .entry_nodes
        .iter()
        .fold(0usize, |acc, &n| acc | (1 << n));
    initial[entry_mask] = 1.0;
    let game = MarkovGame::new(transition, horizon, discount, initial)?;

    // Linear features, two per edge. Coordinate e carries the expected new
    // compromise along edge e; coordinate n_edges + e carries action usage
    // (attacks for the expert, blocks for the learner).
    let dim = 2 * n_edges;
    let mut feat_e = Array4::zeros((n_states, n_actions, n_actions, dim));
    let mut feat_l = Array4::zeros((n_states, n_actions, n_actions, dim));
    for mask in 0..n_states {
        for block in 0..n_actions {
            for attack in 0..n_actions {
                let (p, _) = effective_prob(graph, mask, block, attack);
                if attack < n_edges {
                    feat_e[[mask, block, attack, attack]] = p;
                    feat_e[[mask, block, attack, n_edges + attack]] = 1.0;
                    feat_l[[mask, block, attack, attack]] = p;
                }
                if block < n_edges {
                    feat_l[[mask, block, attack, n_edges + block]] = 1.0;
                }
            }
        }
    }
    let model_e = RewardModel::Linear(FeatureMap::new(feat_e)?);
    let model_l = RewardModel::Linear(FeatureMap::new(feat_l)?);
    let mut theta_e = Array1::zeros(dim);
    let mut theta_l = Array1::zeros(dim);
    for (e, edge) in graph.edges.iter().enumerate() {
        theta_e[e] = graph.compromise_reward[edge.target];
        theta_e[n_edges + e] = -edge.attacker_cost;
        theta_l[e] = -graph.compromise_reward[edge.target];
        theta_l[n_edges + e] = -edge.defender_cost;
    }
    Ok(BuiltGame {
        game,
        model_l,
        model_e,
        true_theta_l: RewardParams::new(theta_l)?,
        true_theta_e: RewardParams::new(theta_e)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    fn manhattan(self, other: Cell) -> usize {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }
}

/// Grid deception scenario: the learner tries to sit on the target landmark
/// while drawing the expert away from it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub learner_start: Cell,
    pub expert_start: Cell,
    pub landmarks: Vec<Cell>,
    pub target_landmark: usize,
    #[serde(default)]
    pub learner_step_cost: f64,
    #[serde(default)]
    pub expert_step_cost: f64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        let check = |c: Cell| -> Result<(), EnvError> {
            if c.x >= self.width || c.y >= self.height {
                Err(EnvError::CellOutOfBounds(c.x, c.y, self.width, self.height))
            } else {
                Ok(())
            }
        };
        check(self.learner_start)?;
        check(self.expert_start)?;
        for &l in &self.landmarks {
            check(l)?;
        }
        for i in 0..self.landmarks.len() {
            for j in i + 1..self.landmarks.len() {
                if self.landmarks[i] == self.landmarks[j] {
                    return Err(EnvError::DuplicateLandmark);
                }
            }
        }
        if self.target_landmark >= self.landmarks.len() {
            return Err(EnvError::BadTarget(
                self.target_landmark,
                self.landmarks.len(),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        let spec: GridSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn three_by_three_default() -> Self {
        GridSpec {
            width: 3,
            height: 3,
            learner_start: Cell { x: 0, y: 0 },
            expert_start: Cell { x: 2, y: 2 },
            landmarks: vec![Cell { x: 0, y: 2 }, Cell { x: 2, y: 0 }],
            target_landmark: 0,
            learner_step_cost: 0.0,
            expert_step_cost: 0.0,
        }
    }

    fn n_cells(&self) -> usize {
        self.width * self.height
    }

    fn cell_index(&self, c: Cell) -> usize {
        c.y * self.width + c.x
    }

    fn cell_at(&self, idx: usize) -> Cell {
        Cell {
            x: idx % self.width,
            y: idx / self.width,
        }
    }

    /// Moves clamp at the walls; action 4 stays put.
    fn apply_move(&self, c: Cell, action: usize) -> Cell {
        match action {
            0 => Cell { x: c.x, y: (c.y + 1).min(self.height - 1) }, // north
            1 => Cell { x: c.x, y: c.y.saturating_sub(1) },          // south
            2 => Cell { x: (c.x + 1).min(self.width - 1), y: c.y },  // east
            3 => Cell { x: c.x.saturating_sub(1), y: c.y },          // west
            _ => c,
        }
    }

    /// Largest Manhattan distance on the board, floored at one so the
    /// feature scaling stays finite on a single-cell grid.
    fn max_distance(&self) -> f64 {
        (((self.width - 1) + (self.height - 1)) as f64).max(1.0)
    }
}

/// Builds the grid game. The joint state is `(learner cell, expert cell)`
/// with five actions per agent (four moves plus stay). Per-step rewards:
///
/// ```text
/// r_l = -dist(learner, target) + dist(expert, target) - step_cost * moved_l
/// r_e = -dist(expert, target)                         - step_cost * moved_e
/// ```
///
/// with Manhattan distances.
pub fn build_grid_game(spec: &GridSpec, horizon: usize, discount: f64) -> Result<BuiltGame, EnvError> {
    spec.validate()?;
    let cells = spec.n_cells();
    let n_states = cells * cells;
    let n_actions = 5;
    let target = spec.landmarks[spec.target_landmark];
    let joint = |l: usize, e: usize| l * cells + e;

    let mut transition = Array4::zeros((n_states, n_actions, n_actions, n_states));
    for l in 0..cells {
        for e in 0..cells {
            let s = joint(l, e);
            for al in 0..n_actions {
                let next_l = spec.cell_index(spec.apply_move(spec.cell_at(l), al));
                for ae in 0..n_actions {
                    let next_e = spec.cell_index(spec.apply_move(spec.cell_at(e), ae));
                    transition[[s, al, ae, joint(next_l, next_e)]] = 1.0;
                }
            }
        }
    }
    let mut initial = Array1::zeros(n_states);
    initial[joint(
        spec.cell_index(spec.learner_start),
        spec.cell_index(spec.expert_start),
    )] = 1.0;
    let game = MarkovGame::new(transition, horizon, discount, initial)?;

    // Features scaled up so the ground-truth coefficients fit in the ball:
    // r = <theta, phi> with phi distances doubled and theta entries halved.
    let d_max = spec.max_distance();
    let mut feat_l = Array4::zeros((n_states, n_actions, n_actions, 3));
    let mut feat_e = Array4::zeros((n_states, n_actions, n_actions, 2));
    for l in 0..cells {
        let dist_l = spec.cell_at(l).manhattan(target) as f64;
        for e in 0..cells {
            let dist_e = spec.cell_at(e).manhattan(target) as f64;
            let s = joint(l, e);
            for al in 0..n_actions {
                for ae in 0..n_actions {
                    feat_l[[s, al, ae, 0]] = -2.0 * dist_l;
                    feat_l[[s, al, ae, 1]] = 2.0 * dist_e;
                    feat_l[[s, al, ae, 2]] = -2.0 * d_max * f64::from(al != 4);
                    feat_e[[s, al, ae, 0]] = -2.0 * dist_e;
                    feat_e[[s, al, ae, 1]] = -2.0 * d_max * f64::from(ae != 4);
                }
            }
        }
    }
    let theta_l = Array1::from_vec(vec![0.5, 0.5, spec.learner_step_cost / (2.0 * d_max)]);
    let theta_e = Array1::from_vec(vec![0.5, spec.expert_step_cost / (2.0 * d_max)]);
    Ok(BuiltGame {
        game,
        model_l: RewardModel::Linear(FeatureMap::new(feat_l)?),
        model_e: RewardModel::Linear(FeatureMap::new(feat_e)?),
        true_theta_l: RewardParams::new(theta_l)?,
        true_theta_e: RewardParams::new(theta_e)?,
    })
}

/// Fixed 2-state / 2x2-action cooperative benchmark with tabular models.
///
/// Matching joint actions push the game toward state 1 and are the only
/// rewarded behavior there; both agents share the same ground-truth reward.
pub fn benchmark_game() -> BuiltGame {
    let mut transition = Array4::zeros((2, 2, 2, 2));
    for s in 0..2 {
        for al in 0..2 {
            for ae in 0..2 {
                let to_one = if al == ae { 0.8 } else { 0.2 };
                transition[[s, al, ae, 1]] = to_one;
                transition[[s, al, ae, 0]] = 1.0 - to_one;
            }
        }
    }
    let game = MarkovGame::new(transition, 6, 0.9, Array1::from_vec(vec![1.0, 0.0]))
        .expect("benchmark game is valid");
    let model = RewardModel::tabular_for(&game);
    let mut theta = Array1::zeros(model.dim());
    let idx = |s: usize, al: usize, ae: usize| (s * 2 + al) * 2 + ae;
    theta[idx(1, 0, 0)] = 0.45;
    theta[idx(1, 1, 1)] = 0.45;
    theta[idx(0, 1, 1)] = 0.15;
    theta[idx(0, 0, 0)] = 0.10;
    let params = RewardParams::new(theta).expect("benchmark truth is in the ball");
    BuiltGame {
        game,
        model_l: model.clone(),
        model_e: model,
        true_theta_l: params.clone(),
        true_theta_e: params,
    }
}

/// Random game with flat-Dirichlet transition rows and initial distribution.
pub fn random_game<R: Rng + ?Sized>(
    n_states: usize,
    n_actions_learner: usize,
    n_actions_expert: usize,
    horizon: usize,
    discount: f64,
    rng: &mut R,
) -> MarkovGame {
    assert!(n_states >= 1 && n_actions_learner >= 1 && n_actions_expert >= 1);
    let mut transition = Array4::zeros((n_states, n_actions_learner, n_actions_expert, n_states));
    for s in 0..n_states {
        for al in 0..n_actions_learner {
            for ae in 0..n_actions_expert {
                let row = dirichlet_flat(n_states, rng);
                for (sp, p) in row.into_iter().enumerate() {
                    transition[[s, al, ae, sp]] = p;
                }
            }
        }
    }
    let initial = Array1::from_vec(dirichlet_flat(n_states, rng));
    MarkovGame::new(transition, horizon, discount, initial).expect("constructed rows normalize")
}

/// Flat Dirichlet sample via normalized unit exponentials.
fn dirichlet_flat<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let mut draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    for d in &mut draws {
        *d /= total;
    }
    draws
}

/// Random feature map with entries uniform in [-1, 1].
pub fn random_feature_map<R: Rng + ?Sized>(
    game: &MarkovGame,
    dim: usize,
    rng: &mut R,
) -> FeatureMap {
    let values = Array4::from_shape_fn(
        (
            game.n_states,
            game.n_actions_learner,
            game.n_actions_expert,
            dim,
        ),
        |_| rng.random::<f64>() * 2.0 - 1.0,
    );
    FeatureMap::new(values).expect("finite random features")
}

/// Uniform draw from the unit ball (direction uniform, radius by cdf).
pub fn random_theta_in_ball<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> RewardParams {
    let mut v: Array1<f64> = Array1::from_iter(
        (0..dim).map(|_| rand_distr::StandardNormal.sample(rng)),
    );
    let norm = v.dot(&v).sqrt();
    if norm > 0.0 {
        let radius = rng.random::<f64>().powf(1.0 / dim as f64);
        v.mapv_inplace(|x| x / norm * radius);
    }
    RewardParams::new(v).expect("ball sample is feasible")
}
