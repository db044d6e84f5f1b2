//! Exact finite-horizon soft value iteration and occupancy machinery.
//!
//! The joint policy induced by a pair of reward functions is the softmax
//! policy of the entropy-regularized backward recursion
//!
//! ```text
//! Q_h(s, a) = r_l(s, a) + r_e(s, a) + gamma * sum_s' P(s' | s, a) V_{h+1}(s')
//! V_h(s)   = log sum_a exp(Q_h(s, a)),        V_H = 0
//! pi_h(a|s) = exp(Q_h(s, a) - V_h(s))
//! ```
//!
//! Everything downstream (likelihoods, feature expectations, cumulative
//! rewards and their derivatives) is an expectation `E[sum_h gamma^h x_h]`
//! under this policy; this module evaluates those expectations exactly
//! through occupancy tensors and conditional backward recursions.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use serde::Serialize;

use crate::game::{JointPolicy, MarkovGame};
use crate::reward::{Reward, RewardModel};

/// Soft Q/V tables and the joint softmax policy they induce.
#[derive(Debug, Clone)]
pub struct SoftSolution {
    /// `[[h, s, a_l, a_e]]`
    pub q: Array4<f64>,
    /// `[[h, s]]`
    pub v: Array2<f64>,
    pub policy: JointPolicy,
}

impl SoftSolution {
    /// Debug dump; not a stability-guaranteed format.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Dump<'a> {
            q: Vec<f64>,
            q_shape: &'a [usize],
            v: Vec<f64>,
            v_shape: &'a [usize],
            policy: Vec<f64>,
        }
        serde_json::to_string(&Dump {
            q: self.q.iter().copied().collect(),
            q_shape: self.q.shape(),
            v: self.v.iter().copied().collect(),
            v_shape: self.v.shape(),
            policy: self.policy.table.iter().copied().collect(),
        })
        .expect("solution dump")
    }
}

/// Discounted state-action visitation tensor `[[h, s, a_l, a_e]]`; the slice
/// at `h` sums to `gamma^h`.
#[derive(Debug, Clone)]
pub struct OccupancyMeasure {
    pub rho: Array4<f64>,
}

/// Dense reward table `[[s, a_l, a_e]]` for one reward function.
pub fn reward_table(game: &MarkovGame, reward: Reward<'_>) -> Array3<f64> {
    let mut table = Array3::zeros((
        game.n_states,
        game.n_actions_learner,
        game.n_actions_expert,
    ));
    for s in 0..game.n_states {
        for al in 0..game.n_actions_learner {
            for ae in 0..game.n_actions_expert {
                table[[s, al, ae]] = reward.value(s, al, ae);
            }
        }
    }
    table
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Backward soft value iteration with terminal value zero.
pub fn solve_soft(game: &MarkovGame, r_l: Reward<'_>, r_e: Reward<'_>) -> SoftSolution {
    let rewards = &reward_table(game, r_l) + &reward_table(game, r_e);
    solve_soft_table(game, &rewards)
}

/// As `solve_soft` but over a precomputed combined reward table.
pub fn solve_soft_table(game: &MarkovGame, rewards: &Array3<f64>) -> SoftSolution {
    let (h_len, ns, nal, nae) = (
        game.horizon,
        game.n_states,
        game.n_actions_learner,
        game.n_actions_expert,
    );
    let mut q = Array4::zeros((h_len, ns, nal, nae));
    let mut v = Array2::zeros((h_len, ns));
    let mut policy = Array4::zeros((h_len, ns, nal, nae));
    let mut v_next: Array1<f64> = Array1::zeros(ns);
    for h in (0..h_len).rev() {
        for s in 0..ns {
            for al in 0..nal {
                for ae in 0..nae {
                    let mut future = 0.0;
                    for sp in 0..ns {
                        future += game.transition[[s, al, ae, sp]] * v_next[sp];
                    }
                    q[[h, s, al, ae]] = rewards[[s, al, ae]] + game.discount * future;
                }
            }
            let row = q.slice(ndarray::s![h, s, .., ..]);
            let vh = logsumexp(row.iter().copied());
            v[[h, s]] = vh;
            for al in 0..nal {
                for ae in 0..nae {
                    policy[[h, s, al, ae]] = (q[[h, s, al, ae]] - vh).exp();
                }
            }
        }
        v_next.assign(&v.index_axis(Axis(0), h));
    }
    SoftSolution {
        q,
        v,
        policy: JointPolicy { table: policy },
    }
}

/// Exact forward recursion for the discounted visitation tensor.
///
/// `rho[0]` is `initial_dist(s) * pi_0(a|s)`; each later slice pushes the
/// previous one through the transition kernel and multiplies by the policy
/// and one more factor of the discount.
pub fn occupancy(game: &MarkovGame, policy: &JointPolicy) -> OccupancyMeasure {
    policy
        .validate_for(game)
        .expect("policy shape/normalization");
    let (h_len, ns, nal, nae) = (
        game.horizon,
        game.n_states,
        game.n_actions_learner,
        game.n_actions_expert,
    );
    let mut rho = Array4::zeros((h_len, ns, nal, nae));
    // Undiscounted state visitation at the current step.
    let mut visit = game.initial_dist.clone();
    let mut scale = 1.0;
    for h in 0..h_len {
        for s in 0..ns {
            for al in 0..nal {
                for ae in 0..nae {
                    rho[[h, s, al, ae]] = scale * visit[s] * policy.table[[h, s, al, ae]];
                }
            }
        }
        if h + 1 < h_len {
            let mut next = Array1::zeros(ns);
            for s in 0..ns {
                if visit[s] == 0.0 {
                    continue;
                }
                for al in 0..nal {
                    for ae in 0..nae {
                        let mass = visit[s] * policy.table[[h, s, al, ae]];
                        if mass == 0.0 {
                            continue;
                        }
                        for sp in 0..ns {
                            next[sp] += mass * game.transition[[s, al, ae, sp]];
                        }
                    }
                }
            }
            visit = next;
            scale *= game.discount;
        }
    }
    OccupancyMeasure { rho }
}

/// Exact discounted feature expectation `sum_{h,s,a} rho * phi(s, a)`.
pub fn feature_expectation(occ: &OccupancyMeasure, model: &RewardModel) -> Array1<f64> {
    let mut mu = Array1::zeros(model.dim());
    for ((_, s, al, ae), &w) in occ.rho.indexed_iter() {
        if w != 0.0 {
            model.add_scaled_grad(s, al, ae, w, &mut mu);
        }
    }
    mu
}

/// Exact cumulative reward `sum_{h,s,a} rho * r(s, a)`.
pub fn cumulative_reward(occ: &OccupancyMeasure, reward: Reward<'_>) -> f64 {
    let mut total = 0.0;
    for ((_, s, al, ae), &w) in occ.rho.indexed_iter() {
        if w != 0.0 {
            total += w * reward.value(s, al, ae);
        }
    }
    total
}

/// As `cumulative_reward` but over a precomputed reward table.
pub fn cumulative_reward_table(occ: &OccupancyMeasure, rewards: &Array3<f64>) -> f64 {
    let mut total = 0.0;
    for ((_, s, al, ae), &w) in occ.rho.indexed_iter() {
        total += w * rewards[[s, al, ae]];
    }
    total
}

/// Conditional feature-expectation tables at step `h`.
///
/// Returns `(mu_sa, mu_s)` where `mu_sa[[s, al, ae, k]]` is the expected
/// discounted feature sum over the remaining horizon given `s^h = s` and
/// first joint action `(al, ae)`, and `mu_s[[s, k]]` averages it over the
/// policy at `h`. Each call recurses over the tail `h..H`, so evaluating all
/// steps costs quadratic work in the horizon.
pub fn conditional_mu_at(
    game: &MarkovGame,
    policy: &JointPolicy,
    model: &RewardModel,
    h: usize,
) -> (Array4<f64>, Array2<f64>) {
    assert!(h < game.horizon, "step {h} out of range");
    let (ns, nal, nae, k) = (
        game.n_states,
        game.n_actions_learner,
        game.n_actions_expert,
        model.dim(),
    );
    let mut mu_s_next: Array2<f64> = Array2::zeros((ns, k));
    let mut mu_sa = Array4::zeros((ns, nal, nae, k));
    let mut mu_s = Array2::zeros((ns, k));
    for hp in (h..game.horizon).rev() {
        mu_sa.fill(0.0);
        for s in 0..ns {
            for al in 0..nal {
                for ae in 0..nae {
                    {
                        let mut row = mu_sa.slice_mut(ndarray::s![s, al, ae, ..]);
                        for sp in 0..ns {
                            let p = game.transition[[s, al, ae, sp]];
                            if p == 0.0 {
                                continue;
                            }
                            let w = game.discount * p;
                            for (o, &m) in row.iter_mut().zip(mu_s_next.row(sp)) {
                                *o += w * m;
                            }
                        }
                    }
                    let mut own = Array1::zeros(k);
                    model.add_scaled_grad(s, al, ae, 1.0, &mut own);
                    let mut row = mu_sa.slice_mut(ndarray::s![s, al, ae, ..]);
                    row += &own;
                }
            }
        }
        mu_s.fill(0.0);
        for s in 0..ns {
            for al in 0..nal {
                for ae in 0..nae {
                    let w = policy.table[[hp, s, al, ae]];
                    if w == 0.0 {
                        continue;
                    }
                    let row = mu_sa.slice(ndarray::s![s, al, ae, ..]);
                    let mut acc = mu_s.row_mut(s);
                    for (o, &m) in acc.iter_mut().zip(row.iter()) {
                        *o += w * m;
                    }
                }
            }
        }
        mu_s_next.assign(&mu_s);
    }
    (mu_sa, mu_s)
}

/// Conditional feature expectation from `(h, s)`, optionally conditioning on
/// the first joint action.
pub fn conditional_mu(
    game: &MarkovGame,
    solution: &SoftSolution,
    model: &RewardModel,
    h: usize,
    s: usize,
    action: Option<(usize, usize)>,
) -> Array1<f64> {
    assert!(s < game.n_states, "state {s} out of range");
    let (mu_sa, mu_s) = conditional_mu_at(game, &solution.policy, model, h);
    match action {
        Some((al, ae)) => mu_sa.slice(ndarray::s![s, al, ae, ..]).to_owned(),
        None => mu_s.row(s).to_owned(),
    }
}

/// Reward-to-go tables at step `h` under `policy`.
///
/// `j_sa[[s, al, ae]]` is the expected discounted sum of `rewards` over the
/// remaining horizon given `s^h = s` and first action `(al, ae)`; `j_s`
/// averages over the policy at `h`.
pub fn reward_to_go_at(
    game: &MarkovGame,
    policy: &JointPolicy,
    rewards: &Array3<f64>,
    h: usize,
) -> (Array3<f64>, Array1<f64>) {
    assert!(h < game.horizon, "step {h} out of range");
    let (ns, nal, nae) = (
        game.n_states,
        game.n_actions_learner,
        game.n_actions_expert,
    );
    let mut j_s_next: Array1<f64> = Array1::zeros(ns);
    let mut j_sa = Array3::zeros((ns, nal, nae));
    let mut j_s = Array1::zeros(ns);
    for hp in (h..game.horizon).rev() {
        for s in 0..ns {
            for al in 0..nal {
                for ae in 0..nae {
                    let mut future = 0.0;
                    for sp in 0..ns {
                        future += game.transition[[s, al, ae, sp]] * j_s_next[sp];
                    }
                    j_sa[[s, al, ae]] = rewards[[s, al, ae]] + game.discount * future;
                }
            }
            let mut acc = 0.0;
            for al in 0..nal {
                for ae in 0..nae {
                    acc += policy.table[[hp, s, al, ae]] * j_sa[[s, al, ae]];
                }
            }
            j_s[s] = acc;
        }
        j_s_next.assign(&j_s);
    }
    (j_sa, j_s)
}
