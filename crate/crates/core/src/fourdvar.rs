//! Strong-constraint 4DVAR: the variational cost over an assimilation
//! window, its gradient, and a line-search gradient-descent minimizer.
//!
//! ```text
//! J(x0) = ½ (x0 − xb)ᵀ B⁻¹ (x0 − xb) + ½ Σ_k (y_k − H_k x_k)ᵀ R_k⁻¹ (y_k − H_k x_k)
//! x_{k+1} = M(x_k)
//! ```
//!
//! Covariance inverses are applied through cached Cholesky solves.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Covariance, DynamicsModel, ObservationOperator};
use crate::error::{Error, Result};
use crate::linalg::serde_vector;

/// Observation y_k taken at assimilation time `time`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: usize,
    #[serde(with = "serde_vector")]
    pub value: DVector<f64>,
    pub operator: ObservationOperator,
    pub cov: Covariance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssimilationProblem {
    #[serde(with = "serde_vector")]
    pub background: DVector<f64>,
    pub background_cov: Covariance,
    pub observations: Vec<Observation>,
    pub model: DynamicsModel,
    /// Number of assimilation times, x_0 … x_{window-1}.
    pub window: usize,
    /// Model-error covariance. Ignored by the strong-constraint cost; the
    /// particle filters add it in their prediction step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_error_cov: Option<Covariance>,
}

/// Relative step of the central finite-difference gradient.
pub const FD_RELATIVE_STEP: f64 = 1e-5;

const ARMIJO: f64 = 1e-4;
const SHRINK: f64 = 0.5;
const GRADIENT_TOLERANCE: f64 = 1e-8;
const MAX_ITERATIONS: usize = 1000;
const MAX_BACKTRACKS: usize = 60;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimizeOutcome {
    #[serde(with = "serde_vector")]
    pub x_opt: DVector<f64>,
    /// Cost at the start point followed by the cost after each accepted step.
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// A trial point diverged and no acceptable step could be found; `x_opt`
    /// is the best point reached.
    pub diverged: bool,
}

impl AssimilationProblem {
    pub fn dim(&self) -> usize {
        self.background.len()
    }

    pub fn violations(&self) -> Vec<String> {
        self.violations_with(true)
    }

    /// Like [`violations`](Self::violations) but zero covariances are
    /// allowed, as the particle filter treats them as exact.
    pub fn filter_violations(&self) -> Vec<String> {
        self.violations_with(false)
    }

    fn violations_with(&self, strict: bool) -> Vec<String> {
        let d = self.model.dim();
        let mut v = self.model.violations();
        if self.window == 0 {
            v.push("problem: window must be >= 1".into());
        }
        if self.background.len() != d {
            v.push(format!(
                "problem: background has {} entries, model dimension is {d}",
                self.background.len()
            ));
        }
        if self.background_cov.dim() != d || (strict && self.background_cov.is_zero()) {
            v.push(format!(
                "problem: background covariance must be {d}x{d} positive definite"
            ));
        }
        for (i, obs) in self.observations.iter().enumerate() {
            if obs.time >= self.window {
                v.push(format!(
                    "problem: observation {i} at time {} lies outside the window",
                    obs.time
                ));
            }
            if obs.operator.state_dim() != d {
                v.push(format!(
                    "problem: observation {i} operator expects a different state dimension"
                ));
            }
            let p = obs.operator.obs_dim();
            if obs.value.len() != p || obs.cov.dim() != p || (strict && obs.cov.is_zero()) {
                v.push(format!(
                    "problem: observation {i} needs a length-{p} value and a {p}x{p} {} covariance",
                    if strict { "positive-definite" } else { "valid" }
                ));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    fn check_state(&self, x0: &DVector<f64>) -> Result<()> {
        if x0.len() != self.dim() {
            return Err(Error::Shape {
                context: "initial state",
                expected: self.dim(),
                found: x0.len(),
            });
        }
        Ok(())
    }

    /// Model trajectory x_0 … x_{window-1}.
    pub fn trajectory(&self, x0: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        self.check_state(x0)?;
        self.model.trajectory(x0, self.window)
    }

    /// Background term ½ (x0 − xb)ᵀ B⁻¹ (x0 − xb) alone.
    pub fn background_cost(&self, x0: &DVector<f64>) -> Result<f64> {
        self.check_state(x0)?;
        Ok(0.5 * self.background_cov.mahalanobis_sq(&(x0 - &self.background))?)
    }

    pub fn cost(&self, x0: &DVector<f64>) -> Result<f64> {
        let traj = self.trajectory(x0)?;
        let mut j = self.background_cost(x0)?;
        for obs in &self.observations {
            let innovation = &obs.value - obs.operator.apply(&traj[obs.time])?;
            j += 0.5 * obs.cov.mahalanobis_sq(&innovation)?;
        }
        if !j.is_finite() {
            return Err(Error::Divergence { step: self.window });
        }
        Ok(j)
    }

    /// Exact adjoint gradient for linear models, central differences otherwise.
    pub fn gradient(&self, x0: &DVector<f64>) -> Result<DVector<f64>> {
        match self.model.linear_matrix() {
            Some(_) => self.adjoint_gradient(x0),
            None => self.finite_difference_gradient(x0),
        }
    }

    fn adjoint_gradient(&self, x0: &DVector<f64>) -> Result<DVector<f64>> {
        let m = self
            .model
            .linear_matrix()
            .ok_or_else(|| Error::InvalidArgument("adjoint gradient needs a linear model".into()))?;
        let traj = self.trajectory(x0)?;
        // λ_k accumulates H_kᵀ R_k⁻¹ (H_k x_k − y_k) backwards through Mᵀ.
        let mut forcing = vec![DVector::zeros(self.dim()); self.window];
        for obs in &self.observations {
            let misfit = obs.operator.apply(&traj[obs.time])? - &obs.value;
            forcing[obs.time] += obs.operator.matrix().transpose() * obs.cov.solve(&misfit)?;
        }
        let mut lambda = DVector::zeros(self.dim());
        for k in (0..self.window).rev() {
            lambda += &forcing[k];
            if k > 0 {
                lambda = m.transpose() * lambda;
            }
        }
        Ok(self.background_cov.solve(&(x0 - &self.background))? + lambda)
    }

    /// Central differences with step `FD_RELATIVE_STEP · max(|x_i|, 1)`.
    pub fn finite_difference_gradient(&self, x0: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_state(x0)?;
        let mut g = DVector::zeros(self.dim());
        for i in 0..self.dim() {
            let h = FD_RELATIVE_STEP * x0[i].abs().max(1.0);
            let mut plus = x0.clone();
            plus[i] += h;
            let mut minus = x0.clone();
            minus[i] -= h;
            g[i] = (self.cost(&plus)? - self.cost(&minus)?) / (2.0 * h);
        }
        Ok(g)
    }

    /// Gradient descent with Armijo backtracking.
    ///
    /// Each trial step starts from the Barzilai–Borwein length of the
    /// previous iteration and halves until the sufficient-decrease condition
    /// holds, so the cost trace never increases. Stops when ‖∇J‖ < 1e-8 or
    /// after 1000 iterations.
    pub fn minimize(&self, x_init: &DVector<f64>) -> Result<MinimizeOutcome> {
        let mut x = x_init.clone();
        let mut f = self.cost(&x)?;
        let mut g = self.gradient(&x)?;
        let mut trace = vec![f];
        let mut step = 1.0 / g.norm().max(1.0);
        let mut diverged = false;
        // Relative to the starting gradient so the test stays above roundoff.
        let tolerance = GRADIENT_TOLERANCE * g.norm().max(1.0);
        let mut converged = g.norm() < tolerance;
        let mut iterations = 0;

        while !converged && iterations < MAX_ITERATIONS {
            let g_sq = g.norm_squared();
            let mut t = step;
            let mut accepted = None;
            for _ in 0..MAX_BACKTRACKS {
                let trial = &x - &g * t;
                match self.cost(&trial) {
                    Ok(ft) if ft <= f - ARMIJO * t * g_sq => {
                        accepted = Some((trial, ft));
                        break;
                    }
                    Ok(_) => {}
                    Err(Error::Divergence { .. }) => diverged = true,
                    Err(e) => return Err(e),
                }
                t *= SHRINK;
            }
            let Some((x_new, f_new)) = accepted else {
                break;
            };
            let g_new = self.gradient(&x_new)?;
            let s = &x_new - &x;
            let y = &g_new - &g;
            let sy = s.dot(&y);
            step = if sy > 0.0 { s.norm_squared() / sy } else { t * 2.0 };
            x = x_new;
            f = f_new;
            g = g_new;
            trace.push(f);
            iterations += 1;
            diverged = false;
            converged = g.norm() < tolerance;
        }

        Ok(MinimizeOutcome {
            x_opt: x,
            cost_trace: trace,
            iterations,
            converged,
            diverged,
        })
    }
}
