//! Parameterized reward functions over the unit-ball parameter set.
//!
//! Two kinds are provided: `Linear` over an explicit feature map and
//! `Tabular` (one-hot features, one parameter per `(s, a_l, a_e)` triple).
//! Both are linear forms in the parameter vector, so the gradient is the
//! feature vector itself and every second derivative vanishes exactly.

use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack absorbed by the unit-ball membership check.
pub const BALL_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("non-finite entry at index {0} in parameter vector")]
    NonFiniteParam(usize),
    #[error("parameter norm {norm} exceeds the unit ball")]
    OutsideBall { norm: f64 },
    #[error("non-finite feature entry at (s={state}, a_l={learner_action}, a_e={expert_action}, coord={coord})")]
    NonFiniteFeature {
        state: usize,
        learner_action: usize,
        expert_action: usize,
        coord: usize,
    },
    #[error("feature dimension must be at least 1")]
    ZeroDim,
    #[error("dimension mismatch: parameter has {got} entries, model expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Dense feature tensor `[[s, a_l, a_e, coord]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Array4<f64>,
}

impl FeatureMap {
    pub fn new(values: Array4<f64>) -> Result<Self, RewardError> {
        if values.dim().3 == 0 {
            return Err(RewardError::ZeroDim);
        }
        for ((s, al, ae, k), &v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(RewardError::NonFiniteFeature {
                    state: s,
                    learner_action: al,
                    expert_action: ae,
                    coord: k,
                });
            }
        }
        Ok(FeatureMap { values })
    }

    pub fn dim(&self) -> usize {
        self.values.dim().3
    }

    pub fn feature(&self, s: usize, al: usize, ae: usize) -> ndarray::ArrayView1<'_, f64> {
        self.values
            .slice(ndarray::s![s, al, ae, ..])
    }

    pub fn to_json(&self) -> String {
        let (ns, nal, nae, _) = self.values.dim();
        let mut values = Vec::with_capacity(ns);
        for s in 0..ns {
            let mut per_al = Vec::with_capacity(nal);
            for al in 0..nal {
                let mut per_ae = Vec::with_capacity(nae);
                for ae in 0..nae {
                    per_ae.push(self.feature(s, al, ae).to_vec());
                }
                per_al.push(per_ae);
            }
            values.push(per_al);
        }
        serde_json::to_string_pretty(&FeatureMapDoc {
            dim: self.dim(),
            values,
        })
        .expect("feature map serialization")
    }

    pub fn from_json(text: &str) -> Result<Self, RewardError> {
        let doc: FeatureMapDoc = serde_json::from_str(text)?;
        let ns = doc.values.len();
        let nal = doc.values.first().map_or(0, |v| v.len());
        let nae = doc.values.first().and_then(|v| v.first()).map_or(0, |v| v.len());
        let mut values = Array4::zeros((ns, nal, nae, doc.dim));
        for (s, per_al) in doc.values.iter().enumerate() {
            if per_al.len() != nal {
                return Err(RewardError::DimMismatch {
                    expected: nal,
                    got: per_al.len(),
                });
            }
            for (al, per_ae) in per_al.iter().enumerate() {
                if per_ae.len() != nae {
                    return Err(RewardError::DimMismatch {
                        expected: nae,
                        got: per_ae.len(),
                    });
                }
                for (ae, vec) in per_ae.iter().enumerate() {
                    if vec.len() != doc.dim {
                        return Err(RewardError::DimMismatch {
                            expected: doc.dim,
                            got: vec.len(),
                        });
                    }
                    for (k, &v) in vec.iter().enumerate() {
                        values[[s, al, ae, k]] = v;
                    }
                }
            }
        }
        FeatureMap::new(values)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureMapDoc {
    dim: usize,
    values: Vec<Vec<Vec<Vec<f64>>>>,
}

/// Reward parameterization `r_theta(s, a) = <theta, phi(s, a)>`.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardModel {
    Linear(FeatureMap),
    /// One-hot features: one parameter per `(s, a_l, a_e)` triple.
    Tabular {
        n_states: usize,
        n_actions_learner: usize,
        n_actions_expert: usize,
    },
}

impl RewardModel {
    pub fn tabular_for(game: &crate::game::MarkovGame) -> Self {
        RewardModel::Tabular {
            n_states: game.n_states,
            n_actions_learner: game.n_actions_learner,
            n_actions_expert: game.n_actions_expert,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            RewardModel::Linear(map) => map.dim(),
            RewardModel::Tabular {
                n_states,
                n_actions_learner,
                n_actions_expert,
            } => n_states * n_actions_learner * n_actions_expert,
        }
    }

    fn flat_index(&self, s: usize, al: usize, ae: usize) -> usize {
        match self {
            RewardModel::Tabular {
                n_actions_learner,
                n_actions_expert,
                ..
            } => (s * n_actions_learner + al) * n_actions_expert + ae,
            RewardModel::Linear(_) => unreachable!("flat_index is tabular-only"),
        }
    }

    /// `<theta, phi(s, a)>`.
    pub fn value(&self, theta: &Array1<f64>, s: usize, al: usize, ae: usize) -> f64 {
        debug_assert_eq!(theta.len(), self.dim());
        match self {
            RewardModel::Linear(map) => map.feature(s, al, ae).dot(theta),
            RewardModel::Tabular { .. } => theta[self.flat_index(s, al, ae)],
        }
    }

    /// Gradient of the reward in theta, i.e. the feature vector `phi(s, a)`.
    pub fn grad(&self, s: usize, al: usize, ae: usize) -> Array1<f64> {
        match self {
            RewardModel::Linear(map) => map.feature(s, al, ae).to_owned(),
            RewardModel::Tabular { .. } => {
                let mut v = Array1::zeros(self.dim());
                v[self.flat_index(s, al, ae)] = 1.0;
                v
            }
        }
    }

    /// Second derivative of the reward in theta; identically zero for the
    /// implemented kinds.
    pub fn hess(&self, _s: usize, _al: usize, _ae: usize) -> Array2<f64> {
        Array2::zeros((self.dim(), self.dim()))
    }

    /// `out += w * phi(s, a)` without allocating.
    pub fn add_scaled_grad(&self, s: usize, al: usize, ae: usize, w: f64, out: &mut Array1<f64>) {
        match self {
            RewardModel::Linear(map) => {
                let phi = map.feature(s, al, ae);
                for (o, &f) in out.iter_mut().zip(phi.iter()) {
                    *o += w * f;
                }
            }
            RewardModel::Tabular { .. } => out[self.flat_index(s, al, ae)] += w,
        }
    }
}

/// A parameter vector constrained to the unit L2 ball.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardParams(Array1<f64>);

impl RewardParams {
    /// Accepts `theta` itself; fails when it leaves the ball (beyond the
    /// floating-point slack) or contains non-finite entries.
    pub fn new(theta: Array1<f64>) -> Result<Self, RewardError> {
        check_finite(&theta)?;
        let norm = l2_norm(&theta);
        if norm > 1.0 + BALL_TOL {
            return Err(RewardError::OutsideBall { norm });
        }
        Ok(RewardParams(theta))
    }

    pub fn zeros(dim: usize) -> Self {
        RewardParams(Array1::zeros(dim))
    }

    /// Euclidean projection onto the unit ball: `theta` unchanged inside,
    /// rescaled to norm one outside. Errors only on non-finite input.
    pub fn project(theta: Array1<f64>) -> Result<Self, RewardError> {
        check_finite(&theta)?;
        let norm = l2_norm(&theta);
        // The slack keeps the projection exactly idempotent: rescaling can
        // land a few ulp past one and must not trigger a second rescale.
        if norm <= 1.0 + BALL_TOL {
            Ok(RewardParams(theta))
        } else {
            Ok(RewardParams(theta.mapv(|x| x / norm)))
        }
    }

    pub fn theta(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

fn check_finite(theta: &Array1<f64>) -> Result<(), RewardError> {
    for (i, &x) in theta.iter().enumerate() {
        if !x.is_finite() {
            return Err(RewardError::NonFiniteParam(i));
        }
    }
    Ok(())
}

pub(crate) fn l2_norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// Borrowed (model, parameter) pair; the form every solver routine takes.
#[derive(Clone, Copy)]
pub struct Reward<'a> {
    pub model: &'a RewardModel,
    pub theta: &'a Array1<f64>,
}

impl<'a> Reward<'a> {
    pub fn new(model: &'a RewardModel, theta: &'a Array1<f64>) -> Self {
        Reward { model, theta }
    }

    pub fn value(&self, s: usize, al: usize, ae: usize) -> f64 {
        self.model.value(self.theta, s, al, ae)
    }
}
