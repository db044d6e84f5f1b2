//! Upper-level derivative estimation.
//!
//! The driver needs the total derivative of the upper objective through the
//! lower-level argmin,
//!
//! ```text
//! grad f = grad_l f - (d^2 L / d theta_l d theta_e)
//!            [d^2 L / d theta_e^2]^{-1} grad_e f,
//! ```
//!
//! assembled here from simultaneous-perturbation (SPSA) estimates of each
//! ingredient plus a conjugate-gradient solve against the damped Hessian
//! estimate. An exact analytical evaluation of the same expression is
//! provided as a validation oracle; it expands every conditional expectation
//! by a fresh backward recursion per time step, so its cost grows
//! quadratically with the horizon while the SPSA path stays linear.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::game::{DemoSet, MarkovGame};
use crate::lower::{self, LowerError};
use crate::reward::{Reward, RewardModel};
use crate::soft;

/// Relative residual target for the conjugate-gradient solve.
pub const CG_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum HypergradError {
    #[error("hessian not positive definite")]
    NotPositiveDefinite,
    #[error(transparent)]
    Lower(#[from] LowerError),
}

/// Perturbation law for the simultaneous random direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationLaw {
    /// Independent signs, `P(+1) = P(-1) = 1/2`. Satisfies the bounded
    /// magnitude and bounded inverse-moment conditions with both constants
    /// equal to one.
    #[default]
    Rademacher,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpsaConfig {
    /// Perturbation radius.
    pub p: f64,
    pub perturbation_law: PerturbationLaw,
    /// Independent perturbation draws averaged per estimate. One draw
    /// reproduces the single-sample estimator; averaging trades cost for
    /// variance.
    pub n_avg: usize,
}

impl Default for SpsaConfig {
    fn default() -> Self {
        SpsaConfig {
            p: 1e-3,
            perturbation_law: PerturbationLaw::Rademacher,
            n_avg: 64,
        }
    }
}

impl SpsaConfig {
    pub fn with_p(&self, p: f64) -> Self {
        SpsaConfig { p, ..self.clone() }
    }
}

fn draw_delta<R: Rng + ?Sized>(dim: usize, law: PerturbationLaw, rng: &mut R) -> Array1<f64> {
    match law {
        PerturbationLaw::Rademacher => {
            Array1::from_iter((0..dim).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }))
        }
    }
}

fn draw_deltas<R: Rng + ?Sized>(
    dim: usize,
    config: &SpsaConfig,
    rng: &mut R,
) -> Vec<Array1<f64>> {
    (0..config.n_avg)
        .map(|_| draw_delta(dim, config.perturbation_law, rng))
        .collect()
}

/// Two-sided SPSA gradient estimate, averaged over `n_avg` draws:
/// coordinate `i` of each draw is `[f(x + p D) - f(x - p D)] / (2 p D_i)`.
pub fn spsa_grad<F, R>(
    objective: F,
    theta0: &Array1<f64>,
    config: &SpsaConfig,
    rng: &mut R,
) -> Array1<f64>
where
    F: Fn(&Array1<f64>) -> f64 + Sync,
    R: Rng + ?Sized,
{
    assert!(config.p > 0.0 && config.n_avg >= 1);
    let deltas = draw_deltas(theta0.len(), config, rng);
    let diffs = exec::map_indexed(config.n_avg, |i| {
        let delta = &deltas[i];
        let plus = objective(&(theta0 + &delta.mapv(|d| config.p * d)));
        let minus = objective(&(theta0 - &delta.mapv(|d| config.p * d)));
        plus - minus
    });
    let mut estimate = Array1::zeros(theta0.len());
    for (diff, delta) in diffs.iter().zip(&deltas) {
        for (e, &d) in estimate.iter_mut().zip(delta.iter()) {
            *e += diff / (2.0 * config.p * d);
        }
    }
    estimate / config.n_avg as f64
}

/// SPSA Hessian estimate from gradient differences: row `i` of each draw is
/// `[g(x + p D) - g(x - p D)] / (2 p D_i)`; the average over draws is
/// symmetrized as `(M + M^T) / 2`.
pub fn spsa_hess<G, R>(
    grad_fn: G,
    theta0: &Array1<f64>,
    config: &SpsaConfig,
    rng: &mut R,
) -> Array2<f64>
where
    G: Fn(&Array1<f64>) -> Array1<f64> + Sync,
    R: Rng + ?Sized,
{
    assert!(config.p > 0.0 && config.n_avg >= 1);
    let m = theta0.len();
    let deltas = draw_deltas(m, config, rng);
    let diffs = exec::map_indexed(config.n_avg, |i| {
        let delta = &deltas[i];
        let plus = grad_fn(&(theta0 + &delta.mapv(|d| config.p * d)));
        let minus = grad_fn(&(theta0 - &delta.mapv(|d| config.p * d)));
        plus - minus
    });
    let mut acc = Array2::zeros((m, m));
    for (diff, delta) in diffs.iter().zip(&deltas) {
        for i in 0..m {
            let scale = 1.0 / (2.0 * config.p * delta[i]);
            for j in 0..m {
                acc[[i, j]] += scale * diff[j];
            }
        }
    }
    acc /= config.n_avg as f64;
    let mut sym = Array2::zeros((m, m));
    for i in 0..m {
        for j in 0..m {
            sym[[i, j]] = 0.5 * (acc[[i, j]] + acc[[j, i]]);
        }
    }
    sym
}

/// SPSA estimate of a rectangular second-derivative block: perturbs the
/// `m`-dimensional input of `grad_fn` (which returns `n`-vectors) and forms
/// entry `(a, b)` as `[g(x + p D) - g(x - p D)]_a / (2 p D_b)`. No
/// symmetrization.
pub fn spsa_jacobian<G, R>(
    grad_fn: G,
    theta0: &Array1<f64>,
    out_dim: usize,
    config: &SpsaConfig,
    rng: &mut R,
) -> Array2<f64>
where
    G: Fn(&Array1<f64>) -> Array1<f64> + Sync,
    R: Rng + ?Sized,
{
    assert!(config.p > 0.0 && config.n_avg >= 1);
    let m = theta0.len();
    let deltas = draw_deltas(m, config, rng);
    let diffs = exec::map_indexed(config.n_avg, |i| {
        let delta = &deltas[i];
        let plus = grad_fn(&(theta0 + &delta.mapv(|d| config.p * d)));
        let minus = grad_fn(&(theta0 - &delta.mapv(|d| config.p * d)));
        plus - minus
    });
    let mut acc = Array2::zeros((out_dim, m));
    for (diff, delta) in diffs.iter().zip(&deltas) {
        debug_assert_eq!(diff.len(), out_dim);
        for a in 0..out_dim {
            for b in 0..m {
                acc[[a, b]] += diff[a] / (2.0 * config.p * delta[b]);
            }
        }
    }
    acc / config.n_avg as f64
}

/// Conjugate gradient for `H x = b` with symmetric positive-definite `H`.
/// Stops when the residual falls below `tol * ||b||` or after `max_iter`
/// iterations; detecting non-positive curvature is an error.
pub fn cg_solve(
    hess: &Array2<f64>,
    rhs: &Array1<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<Array1<f64>, HypergradError> {
    let n = rhs.len();
    assert_eq!(hess.nrows(), n);
    assert_eq!(hess.ncols(), n);
    let b_norm = rhs.dot(rhs).sqrt();
    if b_norm == 0.0 {
        return Ok(Array1::zeros(n));
    }
    let mut x = Array1::zeros(n);
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rs_old = r.dot(&r);
    for _ in 0..max_iter {
        let hp = hess.dot(&p);
        let php = p.dot(&hp);
        if php <= 0.0 {
            return Err(HypergradError::NotPositiveDefinite);
        }
        let alpha = rs_old / php;
        x += &p.mapv(|v| alpha * v);
        r -= &hp.mapv(|v| alpha * v);
        let rs_new = r.dot(&r);
        if rs_new.sqrt() <= tol * b_norm {
            break;
        }
        let beta = rs_new / rs_old;
        p = &r + &p.mapv(|v| beta * v);
        rs_old = rs_new;
    }
    Ok(x)
}

fn to_dmatrix(a: &Array2<f64>) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Deterministic positive-definiteness repair: raises every eigenvalue of a
/// symmetric matrix to at least `floor`. Uses an exact symmetric
/// eigendecomposition up to dimension 64 and a Gershgorin diagonal shift
/// beyond that.
pub fn floor_spectrum(mat: &Array2<f64>, floor: f64) -> Array2<f64> {
    let m = mat.nrows();
    assert_eq!(mat.ncols(), m);
    if m <= 64 {
        let eig = nalgebra::SymmetricEigen::new(to_dmatrix(mat));
        let vals = eig.eigenvalues.map(|v| v.max(floor));
        let rebuilt =
            &eig.eigenvectors * nalgebra::DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
        let mut out = Array2::zeros((m, m));
        for i in 0..m {
            for j in 0..m {
                out[[i, j]] = 0.5 * (rebuilt[(i, j)] + rebuilt[(j, i)]);
            }
        }
        out
    } else {
        let mut lowest = f64::INFINITY;
        for i in 0..m {
            let mut radius = 0.0;
            for j in 0..m {
                if j != i {
                    radius += mat[[i, j]].abs();
                }
            }
            lowest = lowest.min(mat[[i, i]] - radius);
        }
        let mut out = mat.clone();
        if lowest < floor {
            let shift = floor - lowest;
            for i in 0..m {
                out[[i, i]] += shift;
            }
        }
        out
    }
}

/// Which reward defines the upper objective `f`.
#[derive(Clone, Copy)]
pub enum UpperObjective<'a> {
    /// The learner's ground-truth reward (received from the environment).
    TrueReward(Reward<'a>),
    /// The learner's current estimate `r_{theta_l}`; with this choice the
    /// analytical oracle and the SPSA estimator target the same function of
    /// `(theta_l, theta_e)`.
    EstimatedReward,
}

/// Everything fixed while differentiating the upper objective.
#[derive(Clone, Copy)]
pub struct UpperProblem<'a> {
    pub game: &'a MarkovGame,
    pub model_l: &'a RewardModel,
    pub model_e: &'a RewardModel,
    /// Lower-level regularization weight; also sets the Hessian floor.
    pub lambda: f64,
    pub objective: UpperObjective<'a>,
}

/// The minimized upper objective: minus the learner's cumulative reward
/// under the policy induced by `(theta_l, theta_e)`.
pub fn upper_value(problem: &UpperProblem<'_>, theta_l: &Array1<f64>, theta_e: &Array1<f64>) -> f64 {
    let r_l = Reward::new(problem.model_l, theta_l);
    let r_e = Reward::new(problem.model_e, theta_e);
    let solution = soft::solve_soft(problem.game, r_l, r_e);
    let occ = soft::occupancy(problem.game, &solution.policy);
    let j = match problem.objective {
        UpperObjective::TrueReward(r) => soft::cumulative_reward(&occ, r),
        UpperObjective::EstimatedReward => soft::cumulative_reward(&occ, r_l),
    };
    -j
}

/// Assembled hypergradient with its ingredients.
#[derive(Debug, Clone)]
pub struct HypergradEstimate {
    pub grad_l_f: Array1<f64>,
    pub grad_e_f: Array1<f64>,
    /// `n x m` cross block of the lower-level Hessian.
    pub jac_le: Array2<f64>,
    /// `m x m` expert block, symmetrized and floored to `lambda / 2`.
    pub hess_ee: Array2<f64>,
    pub cg_solution: Array1<f64>,
    pub assembled: Array1<f64>,
}

/// SPSA-based hypergradient at `(theta_l, theta_e)`.
///
/// Gradients of `f` come from objective-value perturbations; the Hessian
/// and cross blocks come from perturbing `theta_e` inside the exact
/// lower-level gradients. The Hessian estimate is floored to
/// `(lambda / 2) I` before the conjugate-gradient solve. Deterministic for
/// a fixed RNG state.
pub fn estimate_hypergradient<R: Rng + ?Sized>(
    problem: &UpperProblem<'_>,
    theta_l: &Array1<f64>,
    theta_e: &Array1<f64>,
    demos: &DemoSet,
    config: &SpsaConfig,
    rng: &mut R,
) -> Result<HypergradEstimate, HypergradError> {
    if demos.is_empty() {
        return Err(LowerError::EmptyDemoSet.into());
    }
    let grad_l_f = spsa_grad(
        |tl: &Array1<f64>| upper_value(problem, tl, theta_e),
        theta_l,
        config,
        rng,
    );
    let grad_e_f = spsa_grad(
        |te: &Array1<f64>| upper_value(problem, theta_l, te),
        theta_e,
        config,
        rng,
    );
    let r_l = Reward::new(problem.model_l, theta_l);
    let hess_raw = spsa_hess(
        |te: &Array1<f64>| {
            lower::lower_grad_e(
                problem.game,
                r_l,
                Reward::new(problem.model_e, te),
                demos,
                problem.lambda,
            )
            .expect("demos validated")
        },
        theta_e,
        config,
        rng,
    );
    let jac_le = spsa_jacobian(
        |te: &Array1<f64>| {
            lower::lower_grad_l(problem.game, r_l, Reward::new(problem.model_e, te), demos)
                .expect("demos validated")
        },
        theta_e,
        theta_l.len(),
        config,
        rng,
    );
    let hess_ee = floor_spectrum(&hess_raw, problem.lambda / 2.0);
    let m = theta_e.len();
    let cg_solution = cg_solve(&hess_ee, &grad_e_f, CG_TOL, 4 * m + 16)?;
    let assembled = &grad_l_f - &jac_le.dot(&cg_solution);
    Ok(HypergradEstimate {
        grad_l_f,
        grad_e_f,
        jac_le,
        hess_ee,
        cg_solution,
        assembled,
    })
}

/// Exact hypergradient oracle.
///
/// Evaluates the score-function forms of the four derivative blocks under
/// the occupancy measure:
///
/// ```text
/// grad_l f  = -( E[sum_h g^h (mu_l(s,a) - mu_l(s)) J(s,a)] + mu_l(pi) )
/// grad_e f  = -  E[sum_h g^h (mu_e(s,a) - mu_e(s)) J(s,a)]
/// d2L_le    =    E[sum_h g^h (mu_l(s,a) - mu_l(s)) (mu_e(s,a) - mu_e(s))^T]
/// d2L_ee    =    E[sum_h g^h (mu_e(s,a) - mu_e(s)) (mu_e(s,a) - mu_e(s))^T]
///               + lambda I
/// ```
///
/// (the direct `mu_l(pi)` term applies only when the objective is the
/// learner's own reward estimate; reward second derivatives vanish for the
/// linear model kinds), then solves the expert block exactly and assembles
/// the same expression the SPSA path estimates. The per-step conditional
/// expectations are each recomputed over the remaining horizon, which is
/// what makes this path quadratic in the horizon.
pub fn analytical_hypergradient(
    problem: &UpperProblem<'_>,
    theta_l: &Array1<f64>,
    theta_e: &Array1<f64>,
    demos: &DemoSet,
) -> Result<HypergradEstimate, HypergradError> {
    if demos.is_empty() {
        return Err(LowerError::EmptyDemoSet.into());
    }
    let game = problem.game;
    let r_l = Reward::new(problem.model_l, theta_l);
    let r_e = Reward::new(problem.model_e, theta_e);
    let solution = soft::solve_soft(game, r_l, r_e);
    let occ = soft::occupancy(game, &solution.policy);
    let objective_table = match problem.objective {
        UpperObjective::TrueReward(r) => soft::reward_table(game, r),
        UpperObjective::EstimatedReward => soft::reward_table(game, r_l),
    };
    let n = problem.model_l.dim();
    let m = problem.model_e.dim();
    let mut score_l = Array1::zeros(n);
    let mut score_e = Array1::zeros(m);
    let mut jac_le = Array2::zeros((n, m));
    let mut hess_ee = Array2::zeros((m, m));
    let mut centered_l = Array1::zeros(n);
    let mut centered_e = Array1::zeros(m);
    for h in 0..game.horizon {
        let (mu_l_sa, mu_l_s) = soft::conditional_mu_at(game, &solution.policy, problem.model_l, h);
        let (mu_e_sa, mu_e_s) = soft::conditional_mu_at(game, &solution.policy, problem.model_e, h);
        let (j_sa, _) = soft::reward_to_go_at(game, &solution.policy, &objective_table, h);
        for s in 0..game.n_states {
            for al in 0..game.n_actions_learner {
                for ae in 0..game.n_actions_expert {
                    let w = occ.rho[[h, s, al, ae]];
                    if w == 0.0 {
                        continue;
                    }
                    for k in 0..n {
                        centered_l[k] = mu_l_sa[[s, al, ae, k]] - mu_l_s[[s, k]];
                    }
                    for k in 0..m {
                        centered_e[k] = mu_e_sa[[s, al, ae, k]] - mu_e_s[[s, k]];
                    }
                    let wj = w * j_sa[[s, al, ae]];
                    for k in 0..n {
                        score_l[k] += wj * centered_l[k];
                    }
                    for k in 0..m {
                        score_e[k] += wj * centered_e[k];
                    }
                    for a in 0..n {
                        let wl = w * centered_l[a];
                        for b in 0..m {
                            jac_le[[a, b]] += wl * centered_e[b];
                        }
                    }
                    for a in 0..m {
                        let we = w * centered_e[a];
                        for b in 0..m {
                            hess_ee[[a, b]] += we * centered_e[b];
                        }
                    }
                }
            }
        }
    }
    let grad_l_f = match problem.objective {
        UpperObjective::EstimatedReward => {
            let direct = soft::feature_expectation(&occ, problem.model_l);
            (score_l + direct).mapv(|v: f64| -v)
        }
        UpperObjective::TrueReward(_) => score_l.mapv(|v| -v),
    };
    let grad_e_f = score_e.mapv(|v: f64| -v);
    for i in 0..m {
        hess_ee[[i, i]] += problem.lambda;
    }
    // Exact solve; the regularizer makes the expert block positive definite,
    // but the decomposition is still checked.
    let chol = nalgebra::Cholesky::new(to_dmatrix(&hess_ee))
        .ok_or(HypergradError::NotPositiveDefinite)?;
    let rhs = nalgebra::DVector::from_iterator(m, grad_e_f.iter().copied());
    let solved = chol.solve(&rhs);
    let cg_solution = Array1::from_iter(solved.iter().copied());
    let assembled = &grad_l_f - &jac_le.dot(&cg_solution);
    Ok(HypergradEstimate {
        grad_l_f,
        grad_e_f,
        jac_le,
        hess_ee,
        cg_solution,
        assembled,
    })
}

/// Cosine similarity between two vectors, zero when either is null.
pub fn cosine_similarity(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::random_game;
    use crate::game::{sample_interaction, MarginalPolicy};
    use crate::reward::RewardParams;
    use ndarray::{arr1, arr2, Array4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_objective_is_exact_per_draw_in_one_dimension() {
        // With a single coordinate the simultaneous perturbation is a plain
        // central difference, exact for linear objectives on every draw.
        let theta = arr1(&[0.4]);
        let config = SpsaConfig {
            p: 0.05,
            n_avg: 1,
            ..SpsaConfig::default()
        };
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let est = spsa_grad(|t: &Array1<f64>| -3.25 * t[0], &theta, &config, &mut rng);
            assert!((est[0] + 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_objective_cross_terms_cancel_in_expectation() {
        // Each draw carries sign-flip cross terms sum_{j != i} c_j D_j / D_i;
        // they are zero-mean under the Rademacher law, so the averaged
        // estimate converges to c with no perturbation bias.
        let c = arr1(&[1.5, -2.0, 0.25]);
        let theta = arr1(&[0.1, 0.2, 0.3]);
        let config = SpsaConfig {
            p: 0.05,
            n_avg: 20_000,
            ..SpsaConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let est = spsa_grad(|t: &Array1<f64>| c.dot(t), &theta, &config, &mut rng);
        for (e, x) in est.iter().zip(c.iter()) {
            assert!((e - x).abs() < 0.05, "averaged estimate {e} vs {x}");
        }
    }

    #[test]
    fn constant_objective_gives_zero() {
        let theta = arr1(&[0.3, -0.4]);
        let config = SpsaConfig {
            p: 0.1,
            n_avg: 8,
            ..SpsaConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let est = spsa_grad(|_: &Array1<f64>| 3.5, &theta, &config, &mut rng);
        assert_eq!(est.mapv(f64::abs).sum(), 0.0);
    }

    #[test]
    fn quadratic_objective_cross_terms_average_out() {
        let theta = arr1(&[0.5, -0.3, 0.2]);
        let config = SpsaConfig {
            p: 0.01,
            n_avg: 10_000,
            ..SpsaConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let est = spsa_grad(
            |t: &Array1<f64>| 0.5 * t.dot(t),
            &theta,
            &config,
            &mut rng,
        );
        for (e, x) in est.iter().zip(theta.iter()) {
            assert!((e - x).abs() < 0.05, "{e} vs {x}");
        }
    }

    #[test]
    fn regularizer_hessian_has_exact_diagonal_per_draw() {
        let lambda = 0.7;
        let theta = arr1(&[0.2, -0.1, 0.4]);
        let config = SpsaConfig {
            p: 0.05,
            n_avg: 1,
            ..SpsaConfig::default()
        };
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let est = spsa_hess(
                |t: &Array1<f64>| t.mapv(|x| lambda * x),
                &theta,
                &config,
                &mut rng,
            );
            for i in 0..3 {
                assert!((est[[i, i]] - lambda).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_gradient_hessian_is_zero() {
        let theta = arr1(&[0.0, 1.0]);
        let config = SpsaConfig {
            p: 0.1,
            n_avg: 4,
            ..SpsaConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let est = spsa_hess(
            |_: &Array1<f64>| arr1(&[2.0, -1.0]),
            &theta,
            &config,
            &mut rng,
        );
        assert_eq!(est.mapv(f64::abs).sum(), 0.0);
    }

    #[test]
    fn symmetric_matrix_recovered_in_expectation() {
        let a = arr2(&[[2.0, 0.5, 0.3], [0.5, 1.5, 0.4], [0.3, 0.4, 1.0]]);
        let theta = arr1(&[0.1, 0.2, -0.3]);
        let config = SpsaConfig {
            p: 0.01,
            n_avg: 10_000,
            ..SpsaConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let est = spsa_hess(|t: &Array1<f64>| a.dot(t), &theta, &config, &mut rng);
        for i in 0..3 {
            for j in 0..3 {
                let rel = (est[[i, j]] - a[[i, j]]).abs() / a[[i, j]].abs();
                assert!(rel < 0.05, "entry ({i},{j}): {} vs {}", est[[i, j]], a[[i, j]]);
            }
        }
    }

    #[test]
    fn bilinear_jacobian_recovered_in_expectation() {
        // g(x) = B x with B a 2x3 block; perturb the 3-dim input.
        let b = arr2(&[[1.0, -0.5, 0.25], [0.75, 2.0, -1.5]]);
        let theta = arr1(&[0.3, -0.2, 0.1]);
        let config = SpsaConfig {
            p: 0.01,
            n_avg: 10_000,
            ..SpsaConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let est = spsa_jacobian(|t: &Array1<f64>| b.dot(t), &theta, 2, &config, &mut rng);
        let scale = b.mapv(f64::abs).sum() / 6.0;
        for i in 0..2 {
            for j in 0..3 {
                assert!(
                    (est[[i, j]] - b[[i, j]]).abs() < 0.05 * scale.max(1.0),
                    "entry ({i},{j}): {} vs {}",
                    est[[i, j]],
                    b[[i, j]]
                );
            }
        }
    }

    #[test]
    fn one_dimensional_jacobian_is_a_central_difference() {
        let f = |t: &Array1<f64>| arr1(&[(t[0]).sin()]);
        let theta = arr1(&[0.4]);
        let p = 1e-4;
        let config = SpsaConfig {
            p,
            n_avg: 1,
            ..SpsaConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let est = spsa_jacobian(f, &theta, 1, &config, &mut rng);
        let central = ((theta[0] + p).sin() - (theta[0] - p).sin()) / (2.0 * p);
        assert!((est[[0, 0]] - central).abs() < 1e-12);
    }

    #[test]
    fn constant_jacobian_is_zero() {
        let config = SpsaConfig {
            p: 0.1,
            n_avg: 3,
            ..SpsaConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let est = spsa_jacobian(
            |_: &Array1<f64>| arr1(&[1.0, 2.0]),
            &arr1(&[0.0, 0.0, 0.0]),
            2,
            &config,
            &mut rng,
        );
        assert_eq!(est.mapv(f64::abs).sum(), 0.0);
    }

    #[test]
    fn cg_solves_identity_and_diagonal_systems() {
        let eye = Array2::eye(3);
        let rhs = arr1(&[1.0, -2.0, 3.0]);
        let x = cg_solve(&eye, &rhs, 1e-12, 10).unwrap();
        for (xi, bi) in x.iter().zip(rhs.iter()) {
            assert!((xi - bi).abs() < 1e-12);
        }

        let diag = arr2(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 4.0]]);
        let rhs = arr1(&[1.0, 2.0, 4.0]);
        let x = cg_solve(&diag, &rhs, 1e-12, 10).unwrap();
        for xi in x.iter() {
            assert!((xi - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cg_reaches_tight_residual_within_dimension_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = 8;
        let g = Array2::from_shape_fn((m, m), |_| rng.random::<f64>() - 0.5);
        let spd: Array2<f64> = g.t().dot(&g) + Array2::<f64>::eye(m);
        let rhs = Array1::from_shape_fn(m, |_| rng.random::<f64>() - 0.5);
        let x = cg_solve(&spd, &rhs, 1e-10, m).unwrap();
        let residual = (&spd.dot(&x) - &rhs).mapv(|v| v * v).sum().sqrt();
        let rel = residual / rhs.dot(&rhs).sqrt();
        assert!(rel < 1e-8, "relative residual {rel}");
    }

    #[test]
    fn cg_reports_indefinite_systems() {
        let indefinite = arr2(&[[1.0, 0.0], [0.0, -1.0]]);
        let rhs = arr1(&[0.0, 1.0]);
        let err = cg_solve(&indefinite, &rhs, 1e-10, 4).unwrap_err();
        assert_eq!(err.to_string(), "hessian not positive definite");
    }

    #[test]
    fn spectrum_floor_raises_minimum_eigenvalue() {
        let sym = arr2(&[[0.1, 0.3], [0.3, 0.2]]);
        let floored = floor_spectrum(&sym, 0.25);
        let eig = nalgebra::SymmetricEigen::new(to_dmatrix(&floored));
        for v in eig.eigenvalues.iter() {
            assert!(*v >= 0.25 - 1e-9, "eigenvalue {v}");
        }
        // Already well-conditioned matrices pass through unchanged.
        let pd = arr2(&[[2.0, 0.1], [0.1, 1.5]]);
        let kept = floor_spectrum(&pd, 0.25);
        for (a, b) in kept.iter().zip(pd.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn spectrum_floor_gershgorin_path_is_positive_definite() {
        let m = 70;
        let mut mat = Array2::zeros((m, m));
        for i in 0..m {
            mat[[i, i]] = -0.5;
            if i + 1 < m {
                mat[[i, i + 1]] = 0.2;
                mat[[i + 1, i]] = 0.2;
            }
        }
        let floored = floor_spectrum(&mat, 0.05);
        let eig = nalgebra::SymmetricEigen::new(to_dmatrix(&floored));
        for v in eig.eigenvalues.iter() {
            assert!(*v >= 0.05 - 1e-9);
        }
    }

    fn interaction_demos(
        game: &MarkovGame,
        d: usize,
        seed: u64,
    ) -> DemoSet {
        let learner = MarginalPolicy::uniform(game.horizon, game.n_states, game.n_actions_learner);
        let expert = MarginalPolicy::uniform(game.horizon, game.n_states, game.n_actions_expert);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_interaction(game, &learner, &expert, d, &mut rng).unwrap()
    }

    #[test]
    fn degenerate_zero_rewards_produce_a_zero_hypergradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let game = random_game(3, 2, 2, 3, 0.9, &mut rng);
        let zero_l = RewardModel::Linear(
            crate::reward::FeatureMap::new(Array4::zeros((3, 2, 2, 2))).unwrap(),
        );
        let zero_e = RewardModel::Linear(
            crate::reward::FeatureMap::new(Array4::zeros((3, 2, 2, 2))).unwrap(),
        );
        let theta = Array1::zeros(2);
        let problem = UpperProblem {
            game: &game,
            model_l: &zero_l,
            model_e: &zero_e,
            lambda: 0.5,
            objective: UpperObjective::EstimatedReward,
        };
        let demos = interaction_demos(&game, 4, 10);
        let config = SpsaConfig {
            p: 0.1,
            n_avg: 4,
            ..SpsaConfig::default()
        };
        let est =
            estimate_hypergradient(&problem, &theta, &theta, &demos, &config, &mut rng).unwrap();
        assert_eq!(est.assembled.mapv(f64::abs).sum(), 0.0);
    }

    #[test]
    fn estimates_are_bit_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let game = random_game(3, 2, 2, 3, 0.9, &mut rng);
        let model = RewardModel::tabular_for(&game);
        let theta_l = crate::envs::random_theta_in_ball(model.dim(), &mut rng).into_inner();
        let theta_e = crate::envs::random_theta_in_ball(model.dim(), &mut rng).into_inner();
        let demos = interaction_demos(&game, 4, 12);
        let problem = UpperProblem {
            game: &game,
            model_l: &model,
            model_e: &model,
            lambda: 0.3,
            objective: UpperObjective::EstimatedReward,
        };
        let config = SpsaConfig {
            p: 1e-2,
            n_avg: 8,
            ..SpsaConfig::default()
        };
        let a = estimate_hypergradient(
            &problem,
            &theta_l,
            &theta_e,
            &demos,
            &config,
            &mut ChaCha8Rng::seed_from_u64(99),
        )
        .unwrap();
        let b = estimate_hypergradient(
            &problem,
            &theta_l,
            &theta_e,
            &demos,
            &config,
            &mut ChaCha8Rng::seed_from_u64(99),
        )
        .unwrap();
        assert_eq!(a.assembled, b.assembled);
        assert_eq!(a.hess_ee, b.hess_ee);
    }

    /// Single-state, single-step reduction: every block has a closed softmax
    /// form evaluated here with raw exponentials.
    #[test]
    fn single_step_game_reduces_to_softmax_regression() {
        let mut t = Array4::zeros((1, 2, 2, 1));
        t.fill(1.0);
        let game = MarkovGame::new(t, 1, 1.0, arr1(&[1.0])).unwrap();
        let model = RewardModel::tabular_for(&game);
        let theta_l = arr1(&[0.3, -0.1, 0.2, 0.05]);
        let theta_e = arr1(&[-0.2, 0.4, 0.1, -0.3]);
        let lambda = 0.25;
        let demos = interaction_demos(&game, 6, 13);
        let problem = UpperProblem {
            game: &game,
            model_l: &model,
            model_e: &model,
            lambda,
            objective: UpperObjective::EstimatedReward,
        };
        let est = analytical_hypergradient(&problem, &theta_l, &theta_e, &demos).unwrap();

        // Hand-coded logistic-model quantities over the four joint actions.
        let logits: Vec<f64> = (0..4).map(|j| theta_l[j] + theta_e[j]).collect();
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        let pi: Vec<f64> = logits.iter().map(|v| v.exp() / z).collect();
        let j_mean: f64 = (0..4).map(|j| pi[j] * theta_l[j]).sum();

        for b in 0..4 {
            let expect = -(pi[b] * (theta_l[b] - j_mean));
            assert!(
                (est.grad_e_f[b] - expect).abs() < 1e-12,
                "grad_e_f[{b}] {} vs {expect}",
                est.grad_e_f[b]
            );
            let expect_l = -(pi[b] * (theta_l[b] - j_mean) + pi[b]);
            assert!(
                (est.grad_l_f[b] - expect_l).abs() < 1e-12,
                "grad_l_f[{b}] {} vs {expect_l}",
                est.grad_l_f[b]
            );
        }
        for a in 0..4 {
            for b in 0..4 {
                let cov = if a == b { pi[a] - pi[a] * pi[b] } else { -pi[a] * pi[b] };
                assert!((est.jac_le[[a, b]] - cov).abs() < 1e-12);
                let hess = cov + if a == b { lambda } else { 0.0 };
                assert!((est.hess_ee[[a, b]] - hess).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn analytical_hessian_is_positive_definite_at_matched_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let game = random_game(3, 2, 2, 4, 0.9, &mut rng);
        let model = RewardModel::tabular_for(&game);
        let theta_l = Array1::zeros(model.dim());
        let theta_e = crate::envs::random_theta_in_ball(model.dim(), &mut rng).into_inner();
        let demos = interaction_demos(&game, 5, 15);
        let problem = UpperProblem {
            game: &game,
            model_l: &model,
            model_e: &model,
            lambda: 0.2,
            objective: UpperObjective::EstimatedReward,
        };
        let est = analytical_hypergradient(&problem, &theta_l, &theta_e, &demos).unwrap();
        // Cholesky success is the positive-definiteness check.
        assert!(nalgebra::Cholesky::new(to_dmatrix(&est.hess_ee)).is_some());
        let _ = RewardParams::new(theta_e).unwrap();
    }
}
