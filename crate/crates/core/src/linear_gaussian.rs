//! Closed-form solutions for linear-Gaussian problems: the 4DVAR normal
//! equations and the Kalman filter. These are reference answers for the
//! iterative minimizer and the particle filters, computed along an
//! independent route (explicit normal matrix, LU solves).

use nalgebra::{DMatrix, DVector};

use crate::dynamics::Covariance;
use crate::error::{Error, Result};
use crate::fourdvar::AssimilationProblem;

fn linear_model(problem: &AssimilationProblem) -> Result<&DMatrix<f64>> {
    problem
        .model
        .linear_matrix()
        .ok_or_else(|| Error::InvalidArgument("closed-form solution needs a linear model".into()))
}

fn inverse(c: &Covariance) -> Result<DMatrix<f64>> {
    c.matrix()
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NotPositiveDefinite("singular covariance".into()))
}

/// Minimizer of the 4DVAR cost by assembling and solving
/// `(B⁻¹ + Σ Gₖᵀ R⁻¹ Gₖ) x = B⁻¹ xb + Σ Gₖᵀ R⁻¹ yₖ` with `Gₖ = H Mᵏ`.
pub fn normal_equations(problem: &AssimilationProblem) -> Result<DVector<f64>> {
    let m = linear_model(problem)?;
    let d = problem.dim();
    let b_inv = inverse(&problem.background_cov)?;
    let mut lhs = b_inv.clone();
    let mut rhs = &b_inv * &problem.background;
    let mut powers = vec![DMatrix::identity(d, d)];
    for k in 1..problem.window {
        let next = m * &powers[k - 1];
        powers.push(next);
    }
    for obs in &problem.observations {
        let g = obs.operator.matrix() * &powers[obs.time];
        let r_inv = inverse(&obs.cov)?;
        lhs += g.transpose() * &r_inv * &g;
        rhs += g.transpose() * &r_inv * &obs.value;
    }
    lhs.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidArgument("normal matrix is singular".into()))
}

/// Filtering mean and covariance at one assimilation time.
#[derive(Clone, Debug)]
pub struct KalmanEstimate {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Exact filtering posteriors p(x_k | y_0..y_k) for a linear model with
/// additive model error `model_error` (zero when `None`), starting from the
/// prior N(xb, B) at time 0.
pub fn kalman_filter(problem: &AssimilationProblem, model_error: Option<&Covariance>) -> Result<Vec<KalmanEstimate>> {
    let m = linear_model(problem)?;
    let d = problem.dim();
    let q = model_error
        .map(|c| c.matrix().clone())
        .unwrap_or_else(|| DMatrix::zeros(d, d));
    let mut mean = problem.background.clone();
    let mut cov = problem.background_cov.matrix().clone();
    let mut out = Vec::with_capacity(problem.window);
    for k in 0..problem.window {
        if k > 0 {
            mean = m * &mean;
            cov = m * &cov * m.transpose() + &q;
        }
        for obs in problem.observations.iter().filter(|o| o.time == k) {
            let h = obs.operator.matrix();
            let s = h * &cov * h.transpose() + obs.cov.matrix();
            let s_inv = s
                .try_inverse()
                .ok_or_else(|| Error::NotPositiveDefinite("singular innovation covariance".into()))?;
            let gain = &cov * h.transpose() * s_inv;
            mean = &mean + &gain * (&obs.value - h * &mean);
            let i_kh = DMatrix::identity(d, d) - &gain * h;
            // Joseph form keeps the covariance symmetric.
            cov = &i_kh * &cov * i_kh.transpose() + &gain * obs.cov.matrix() * gain.transpose();
        }
        out.push(KalmanEstimate {
            mean: mean.clone(),
            cov: cov.clone(),
        });
    }
    Ok(out)
}
