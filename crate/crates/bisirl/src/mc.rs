//! Monte-Carlo estimators mirroring the exact occupancy quantities.
//!
//! These emulate learning from sampled play and serve as independent
//! cross-checks of the dynamic-programming paths in [`crate::soft`]. All
//! estimators fork one RNG stream per rollout and reduce per-chunk partial
//! sums in a fixed order, so results are reproducible and schedule-free.

use ndarray::{Array1, Array4};
use rand::Rng;

use crate::exec;
use crate::game::{sample_trajectory, JointPolicy, MarkovGame, Step, Trajectory};
use crate::reward::{Reward, RewardModel};

const MAX_CHUNKS: usize = 64;

/// Samples `n` trajectories under the joint policy.
pub fn rollout_batch<R: Rng + ?Sized>(
    game: &MarkovGame,
    policy: &JointPolicy,
    n: usize,
    rng: &mut R,
) -> Vec<Trajectory> {
    let streams = exec::fork_rngs(rng, n);
    exec::map_indexed(n, |i| {
        let mut child = streams[i].clone();
        sample_trajectory(game, policy, &mut child)
    })
}

/// Empirical discounted visitation tensor from `n` rollouts; the exact
/// counterpart is [`crate::soft::occupancy`].
pub fn empirical_occupancy<R: Rng + ?Sized>(
    game: &MarkovGame,
    policy: &JointPolicy,
    n: usize,
    rng: &mut R,
) -> Array4<f64> {
    let streams = exec::fork_rngs(rng, n);
    let ranges = exec::chunk_ranges(n, MAX_CHUNKS);
    let shape = (
        game.horizon,
        game.n_states,
        game.n_actions_learner,
        game.n_actions_expert,
    );
    let partials = exec::map_indexed(ranges.len(), |c| {
        let mut acc = Array4::<f64>::zeros(shape);
        for i in ranges[c].clone() {
            let mut child = streams[i].clone();
            let traj = sample_trajectory(game, policy, &mut child);
            let mut scale = 1.0;
            for (h, st) in traj.steps.iter().enumerate() {
                acc[[h, st.state, st.learner_action, st.expert_action]] += scale;
                scale *= game.discount;
            }
        }
        acc
    });
    let mut total = Array4::zeros(shape);
    for p in partials {
        total += &p;
    }
    total / n as f64
}

/// Sample average of `sum_h gamma^h phi(s^h, a^h)` over `n` rollouts.
pub fn feature_expectation<R: Rng + ?Sized>(
    game: &MarkovGame,
    policy: &JointPolicy,
    model: &RewardModel,
    n: usize,
    rng: &mut R,
) -> Array1<f64> {
    let streams = exec::fork_rngs(rng, n);
    let ranges = exec::chunk_ranges(n, MAX_CHUNKS);
    let partials = exec::map_indexed(ranges.len(), |c| {
        let mut acc = Array1::zeros(model.dim());
        for i in ranges[c].clone() {
            let mut child = streams[i].clone();
            let traj = sample_trajectory(game, policy, &mut child);
            add_discounted_features(game.discount, &traj.steps, model, 1.0, &mut acc);
        }
        acc
    });
    let mut total = Array1::zeros(model.dim());
    for p in partials {
        total += &p;
    }
    total / n as f64
}

/// Sample mean and standard error of the discounted cumulative reward.
pub fn cumulative_reward<R: Rng + ?Sized>(
    game: &MarkovGame,
    policy: &JointPolicy,
    reward: Reward<'_>,
    n: usize,
    rng: &mut R,
) -> (f64, f64) {
    assert!(n >= 2, "need at least two rollouts for a standard error");
    let streams = exec::fork_rngs(rng, n);
    let ranges = exec::chunk_ranges(n, MAX_CHUNKS);
    let partials = exec::map_indexed(ranges.len(), |c| {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for i in ranges[c].clone() {
            let mut child = streams[i].clone();
            let traj = sample_trajectory(game, policy, &mut child);
            let mut ret = 0.0;
            let mut scale = 1.0;
            for st in &traj.steps {
                ret += scale * reward.value(st.state, st.learner_action, st.expert_action);
                scale *= game.discount;
            }
            sum += ret;
            sum_sq += ret * ret;
        }
        (sum, sum_sq)
    });
    let (sum, sum_sq) = partials
        .into_iter()
        .fold((0.0, 0.0), |(a, b), (s, q)| (a + s, b + q));
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0) * n as f64 / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Conditional Monte-Carlo estimate of the discounted feature sum over the
/// remaining horizon, starting play at `(h, s)` with an optional forced
/// first joint action.
#[allow(clippy::too_many_arguments)]
pub fn conditional_mu<R: Rng + ?Sized>(
    game: &MarkovGame,
    policy: &JointPolicy,
    model: &RewardModel,
    h: usize,
    s: usize,
    action: Option<(usize, usize)>,
    n: usize,
    rng: &mut R,
) -> Array1<f64> {
    assert!(h < game.horizon && s < game.n_states);
    let streams = exec::fork_rngs(rng, n);
    let ranges = exec::chunk_ranges(n, MAX_CHUNKS);
    let partials = exec::map_indexed(ranges.len(), |c| {
        let mut acc = Array1::zeros(model.dim());
        for i in ranges[c].clone() {
            let mut child = streams[i].clone();
            let steps = rollout_from(game, policy, h, s, action, &mut child);
            add_discounted_features(game.discount, &steps, model, 1.0, &mut acc);
        }
        acc
    });
    let mut total = Array1::zeros(model.dim());
    for p in partials {
        total += &p;
    }
    total / n as f64
}

fn rollout_from<R: Rng + ?Sized>(
    game: &MarkovGame,
    policy: &JointPolicy,
    h0: usize,
    s0: usize,
    forced: Option<(usize, usize)>,
    rng: &mut R,
) -> Vec<Step> {
    let mut state = s0;
    let mut steps = Vec::with_capacity(game.horizon - h0);
    for h in h0..game.horizon {
        let (learner_action, expert_action) = if h == h0 {
            match forced {
                Some(a) => a,
                None => sample_joint(game, policy, h, state, rng),
            }
        } else {
            sample_joint(game, policy, h, state, rng)
        };
        steps.push(Step {
            state,
            learner_action,
            expert_action,
        });
        let u = rng.random::<f64>();
        let mut acc = 0.0;
        let mut next = game.n_states - 1;
        for sp in 0..game.n_states {
            acc += game.transition[[state, learner_action, expert_action, sp]];
            if u < acc {
                next = sp;
                break;
            }
        }
        state = next;
    }
    steps
}

fn sample_joint<R: Rng + ?Sized>(
    game: &MarkovGame,
    policy: &JointPolicy,
    h: usize,
    s: usize,
    rng: &mut R,
) -> (usize, usize) {
    let u = rng.random::<f64>();
    let mut acc = 0.0;
    let mut flat = game.n_joint_actions() - 1;
    for j in 0..game.n_joint_actions() {
        acc += policy.table[[h, s, j / game.n_actions_expert, j % game.n_actions_expert]];
        if u < acc {
            flat = j;
            break;
        }
    }
    (flat / game.n_actions_expert, flat % game.n_actions_expert)
}

fn add_discounted_features(
    discount: f64,
    steps: &[Step],
    model: &RewardModel,
    start_scale: f64,
    out: &mut Array1<f64>,
) {
    let mut scale = start_scale;
    for st in steps {
        model.add_scaled_grad(st.state, st.learner_action, st.expert_action, scale, out);
        scale *= discount;
    }
}
