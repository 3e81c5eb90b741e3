//! Bootstrap particle filter with classical systematic resampling, quantum
//! weighted-superposition resampling, and Quantum Variational Resampling
//! (QVR).
//!
//! Per-particle randomness comes from `rng_stream(seed, i)`, so prediction
//! can fan out over threads without changing results.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Covariance, DynamicsModel, ObservationOperator};
use crate::encoding::EncodingScheme;
use crate::error::{Error, Result};
use crate::fourdvar::AssimilationProblem;
use crate::linalg::{serde_vectors, weighted_mean};
use crate::rng::{derive_seed, derive_seed_path, label, rng_from_seed, rng_stream};
use crate::statevector::{qubits_for, Axis, StateVector};

/// Tolerance on `Σw = 1`.
pub const WEIGHT_TOLERANCE: f64 = 1e-10;
/// Target probabilities below this are floored inside the KL divergence.
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleEnsemble {
    #[serde(with = "serde_vectors")]
    pub particles: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn new(particles: Vec<DVector<f64>>, weights: Vec<f64>) -> Result<Self> {
        let e = Self { particles, weights };
        e.validate()?;
        Ok(e)
    }

    pub fn uniform(particles: Vec<DVector<f64>>) -> Result<Self> {
        let n = particles.len();
        Self::new(particles, vec![1.0 / n as f64; n])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.particles.len();
        if n == 0 {
            return Err(Error::InvalidArgument("ensemble is empty".into()));
        }
        if self.weights.len() != n {
            return Err(Error::Shape {
                context: "ensemble weights",
                expected: n,
                found: self.weights.len(),
            });
        }
        let d = self.particles[0].len();
        if let Some(p) = self.particles.iter().find(|p| p.len() != d) {
            return Err(Error::Shape {
                context: "particle dimension",
                expected: d,
                found: p.len(),
            });
        }
        if self.weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(Error::InvalidArgument(format!("weights sum to {sum}, not 1")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.particles[0].len()
    }

    /// `1 / Σ w²`.
    pub fn ess(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    pub fn mean(&self) -> DVector<f64> {
        weighted_mean(&self.particles, &self.weights)
    }

    fn with_uniform_copies(&self, picks: &[usize]) -> Self {
        let n = picks.len();
        Self {
            particles: picks.iter().map(|&i| self.particles[i].clone()).collect(),
            weights: vec![1.0 / n as f64; n],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predicted {
    pub ensemble: ParticleEnsemble,
    /// Particles whose propagation diverged and were clamped into the box.
    pub diverged: usize,
}

/// Propagate every particle and add process noise. Divergent particles are
/// clamped into `bounds` when given, otherwise the divergence is an error.
pub fn predict(
    ensemble: &ParticleEnsemble,
    model: &DynamicsModel,
    process_noise: &Covariance,
    bounds: Option<&EncodingScheme>,
    seed: u64,
) -> Result<Predicted> {
    if process_noise.dim() != ensemble.dim() {
        return Err(Error::Shape {
            context: "process noise",
            expected: ensemble.dim(),
            found: process_noise.dim(),
        });
    }
    let step = |(i, x): (usize, &DVector<f64>)| -> Result<(DVector<f64>, bool)> {
        let mut rng = rng_stream(seed, i as u64);
        let (mut next, diverged) = match model.propagate(x) {
            Ok(y) => (y, false),
            Err(Error::Divergence { step }) => match bounds {
                Some(b) => {
                    let mut y: Vec<f64> = x.iter().map(|v| if v.is_finite() { *v } else { 0.0 }).collect();
                    b.clamp(&mut y);
                    (DVector::from_vec(y), true)
                }
                None => return Err(Error::Divergence { step }),
            },
            Err(e) => return Err(e),
        };
        next += process_noise.sample(&mut rng);
        if let Some(b) = bounds {
            if next.iter().any(|v| !v.is_finite()) {
                let mut y: Vec<f64> = next.iter().map(|v| if v.is_finite() { *v } else { 0.0 }).collect();
                b.clamp(&mut y);
                next = DVector::from_vec(y);
            }
        }
        Ok((next, diverged))
    };
    let out: Vec<(DVector<f64>, bool)> = ensemble
        .particles
        .par_iter()
        .enumerate()
        .map(step)
        .collect::<Result<_>>()?;
    let diverged = out.iter().filter(|(_, d)| *d).count();
    Ok(Predicted {
        ensemble: ParticleEnsemble {
            particles: out.into_iter().map(|(x, _)| x).collect(),
            weights: ensemble.weights.clone(),
        },
        diverged,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Updated {
    pub ensemble: ParticleEnsemble,
    /// Every likelihood vanished and the weights were reset to uniform.
    pub degenerate: bool,
}

/// Multiply weights by the Gaussian likelihood of `y` (log space) and
/// renormalize. A zero `obs_cov` is an exact-match likelihood.
pub fn update_weights(
    ensemble: &ParticleEnsemble,
    y: &DVector<f64>,
    obs_op: &ObservationOperator,
    obs_cov: &Covariance,
) -> Result<Updated> {
    if obs_op.state_dim() != ensemble.dim() || obs_op.obs_dim() != y.len() || obs_cov.dim() != y.len() {
        return Err(Error::Shape {
            context: "observation",
            expected: obs_op.obs_dim(),
            found: y.len(),
        });
    }
    let log_lik: Vec<f64> = ensemble
        .particles
        .par_iter()
        .map(|x| {
            let r = y - obs_op.apply(x)?;
            if obs_cov.is_zero() {
                Ok(if r.iter().all(|v| *v == 0.0) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                })
            } else {
                Ok(-0.5 * obs_cov.mahalanobis_sq(&r)?)
            }
        })
        .collect::<Result<_>>()?;
    let logw: Vec<f64> = ensemble.weights.iter().zip(&log_lik).map(|(w, l)| w.ln() + l).collect();
    let (weights, degenerate) = normalize_log_weights(&logw);
    Ok(Updated {
        ensemble: ParticleEnsemble {
            particles: ensemble.particles.clone(),
            weights,
        },
        degenerate,
    })
}

/// Exponentiate and normalize; all `-inf` (or non-finite) resets to uniform.
pub fn normalize_log_weights(logw: &[f64]) -> (Vec<f64>, bool) {
    let n = logw.len();
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return (vec![1.0 / n as f64; n], true);
    }
    let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    (w.into_iter().map(|v| v / sum).collect(), false)
}

/// One uniform offset, N evenly spaced pointers over the cumulative weights.
pub fn resample_systematic(ensemble: &ParticleEnsemble, seed: u64) -> ParticleEnsemble {
    let n = ensemble.len();
    let offset: f64 = rng_from_seed(seed).random();
    let mut picks = Vec::with_capacity(n);
    let mut cum = ensemble.weights[0];
    let mut i = 0;
    for j in 0..n {
        let u = (j as f64 + offset) / n as f64;
        while u >= cum && i < n - 1 {
            i += 1;
            cum += ensemble.weights[i];
        }
        picks.push(i);
    }
    ensemble.with_uniform_copies(&picks)
}

/// `Σ_i √w_i |i⟩` on `ceil(log2 N)` qubits (at least one), zero-padded.
pub fn weighted_superposition(weights: &[f64]) -> Result<StateVector> {
    let n = qubits_for(weights.len());
    let mut amps = vec![num_complex::Complex64::new(0.0, 0.0); 1 << n];
    for (a, w) in amps.iter_mut().zip(weights) {
        a.re = w.sqrt();
    }
    StateVector::from_amplitudes(amps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantumResampled {
    pub ensemble: ParticleEnsemble,
    /// `max_i | |a_i|² − w_i |` before measurement.
    pub amplitude_error: f64,
}

/// Prepare the weighted superposition, check its probabilities against the
/// weights, measure `shots` times and keep the selected particles.
pub fn resample_quantum(ensemble: &ParticleEnsemble, shots: usize, seed: u64) -> Result<QuantumResampled> {
    let state = weighted_superposition(&ensemble.weights)?;
    let probs = state.probabilities();
    let amplitude_error = probs
        .iter()
        .enumerate()
        .map(|(i, p)| (p - ensemble.weights.get(i).copied().unwrap_or(0.0)).abs())
        .fold(0.0, f64::max);
    if amplitude_error > 1e-12 {
        return Err(Error::Precondition(format!(
            "superposition probabilities deviate from weights by {amplitude_error:e}"
        )));
    }
    let picks = state.sample_indices(shots as u64, seed)?;
    Ok(QuantumResampled {
        ensemble: ensemble.with_uniform_copies(&picks),
        amplitude_error,
    })
}

/// Layers of per-qubit Y rotations on `|0…0⟩`, separated by a ring of
/// controlled-Z gates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QvrAnsatz {
    pub num_qubits: usize,
    pub layers: usize,
    /// Layer-major: `thetas[l * num_qubits + q]`.
    pub thetas: Vec<f64>,
}

impl QvrAnsatz {
    pub fn new(num_qubits: usize, layers: usize, thetas: Vec<f64>) -> Result<Self> {
        if layers == 0 {
            return Err(Error::InvalidArgument("qvr needs at least one layer".into()));
        }
        if thetas.len() != layers * num_qubits {
            return Err(Error::Shape {
                context: "qvr thetas",
                expected: layers * num_qubits,
                found: thetas.len(),
            });
        }
        Ok(Self {
            num_qubits,
            layers,
            thetas,
        })
    }

    pub fn state(&self) -> Result<StateVector> {
        self.state_with(&self.thetas)
    }

    fn state_with(&self, thetas: &[f64]) -> Result<StateVector> {
        let n = self.num_qubits;
        let mut s = StateVector::basis(n, 0)?;
        for l in 0..self.layers {
            if l > 0 {
                entangle_ring(&mut s, n)?;
            }
            for q in 0..n {
                s.apply_rotation(q, Axis::Y, thetas[l * n + q])?;
            }
        }
        Ok(s)
    }

    pub fn probabilities(&self) -> Result<Vec<f64>> {
        Ok(self.state()?.probabilities())
    }
}

fn entangle_ring(s: &mut StateVector, n: usize) -> Result<()> {
    match n {
        1 => Ok(()),
        // A two-qubit "ring" would apply the same CZ twice.
        2 => s.apply_cz(0, 1),
        _ => (0..n).try_for_each(|q| s.apply_cz(q, (q + 1) % n)),
    }
}

/// Direction of the QVR objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `D(p_θ ‖ p)`.
    #[default]
    ModelToTarget,
    /// `D(p ‖ p_θ)`.
    TargetToModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QvrConfig {
    #[serde(default = "qvr_defaults::layers")]
    pub layers: usize,
    #[serde(default = "qvr_defaults::max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "qvr_defaults::learning_rate")]
    pub learning_rate: f64,
    /// Fits ending above this divergence are flagged.
    #[serde(default = "qvr_defaults::threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub direction: KlDirection,
}

mod qvr_defaults {
    pub fn layers() -> usize {
        2
    }
    pub fn max_iterations() -> usize {
        300
    }
    pub fn learning_rate() -> f64 {
        1.0
    }
    pub fn threshold() -> f64 {
        1e-2
    }
}

impl Default for QvrConfig {
    fn default() -> Self {
        Self {
            layers: qvr_defaults::layers(),
            max_iterations: qvr_defaults::max_iterations(),
            learning_rate: qvr_defaults::learning_rate(),
            threshold: qvr_defaults::threshold(),
            direction: KlDirection::ModelToTarget,
        }
    }
}

impl QvrConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.layers == 0 {
            v.push("qvr.layers must be >= 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            v.push(format!(
                "qvr.learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.threshold.is_nan() || self.threshold <= 0.0 {
            v.push(format!("qvr.threshold must be positive, got {}", self.threshold));
        }
        v
    }
}

/// `D(a ‖ b)` where `b` is floored at [`KL_FLOOR`] and renormalized so both
/// arguments are distributions and the value is nonnegative.
pub fn kl_divergence(a: &[f64], b: &[f64]) -> f64 {
    let floored: Vec<f64> = b.iter().map(|v| v.max(KL_FLOOR)).collect();
    let z: f64 = floored.iter().sum();
    a.iter()
        .zip(&floored)
        .filter(|(x, _)| **x > 0.0)
        .map(|(x, y)| x * (x / (y / z)).ln())
        .sum::<f64>()
        .max(0.0)
}

fn qvr_objective(direction: KlDirection, model: &[f64], target: &[f64]) -> f64 {
    match direction {
        KlDirection::ModelToTarget => kl_divergence(model, target),
        KlDirection::TargetToModel => kl_divergence(target, model),
    }
}

/// `∂D/∂p_k` for the chosen direction, with the same flooring.
fn qvr_objective_grad(direction: KlDirection, model: &[f64], target: &[f64]) -> Vec<f64> {
    let zt: f64 = target.iter().map(|v| v.max(KL_FLOOR)).sum();
    let zm: f64 = model.iter().map(|v| v.max(KL_FLOOR)).sum();
    match direction {
        KlDirection::ModelToTarget => model
            .iter()
            .zip(target)
            .map(|(m, t)| (m.max(KL_FLOOR) / (t.max(KL_FLOOR) / zt)).ln() + 1.0)
            .collect(),
        KlDirection::TargetToModel => model
            .iter()
            .zip(target)
            .map(|(m, t)| -t / m.max(KL_FLOOR) + 1.0 / zm)
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QvrFit {
    pub ansatz: QvrAnsatz,
    pub divergence: f64,
    /// Divergence at the start and after every accepted step.
    pub trace: Vec<f64>,
    /// `divergence <= config.threshold`.
    pub converged: bool,
}

/// Fit the QVR ansatz to `target_weights` (padded with zeros to a power of
/// two) by gradient descent with Armijo backtracking. Probability
/// derivatives come from the parameter-shift rule, which is exact for the
/// single-qubit Y rotations.
pub fn qvr_fit(target_weights: &[f64], config: &QvrConfig, seed: u64) -> Result<QvrFit> {
    let violations = config.violations();
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let sum: f64 = target_weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_TOLERANCE || target_weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Precondition(format!(
            "qvr target must be a normalized distribution (sum {sum})"
        )));
    }
    let n = qubits_for(target_weights.len());
    let mut target = target_weights.to_vec();
    target.resize(1 << n, 0.0);
    let mut rng = rng_from_seed(seed);
    let thetas = (0..config.layers * n).map(|_| 0.1 * rng.random::<f64>()).collect();
    let mut ansatz = QvrAnsatz::new(n, config.layers, thetas)?;

    let objective = |a: &QvrAnsatz, th: &[f64]| -> Result<f64> {
        Ok(qvr_objective(
            config.direction,
            &a.state_with(th)?.probabilities(),
            &target,
        ))
    };
    let mut f = objective(&ansatz, &ansatz.thetas)?;
    let mut trace = vec![f];
    let mut step = config.learning_rate;
    for _ in 0..config.max_iterations {
        if f < 1e-14 {
            break;
        }
        let probs = ansatz.probabilities()?;
        let dfdp = qvr_objective_grad(config.direction, &probs, &target);
        let grad: Vec<f64> = (0..ansatz.thetas.len())
            .into_par_iter()
            .map(|i| -> Result<f64> {
                let mut plus = ansatz.thetas.clone();
                plus[i] += std::f64::consts::FRAC_PI_2;
                let mut minus = ansatz.thetas.clone();
                minus[i] -= std::f64::consts::FRAC_PI_2;
                let pp = ansatz.state_with(&plus)?.probabilities();
                let pm = ansatz.state_with(&minus)?.probabilities();
                Ok(pp.iter().zip(&pm).zip(&dfdp).map(|((a, b), g)| 0.5 * (a - b) * g).sum())
            })
            .collect::<Result<_>>()?;
        let g_sq: f64 = grad.iter().map(|g| g * g).sum();
        if g_sq.sqrt() < 1e-12 {
            break;
        }
        let mut t = step;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = ansatz.thetas.iter().zip(&grad).map(|(a, g)| a - t * g).collect();
            let ft = objective(&ansatz, &trial)?;
            if ft <= f - 1e-4 * t * g_sq {
                accepted = Some((trial, ft));
                break;
            }
            t *= 0.5;
        }
        let Some((thetas, ft)) = accepted else {
            break;
        };
        ansatz.thetas = thetas;
        f = ft;
        trace.push(f);
        step = (2.0 * t).min(8.0 * config.learning_rate);
    }
    Ok(QvrFit {
        converged: f <= config.threshold,
        divergence: f,
        ansatz,
        trace,
    })
}

/// Resample N particles by fitting QVR to the weights and measuring the
/// fitted circuit. Outcomes at padded indices (≥ N) are discarded by
/// postselecting on the first N basis states.
pub fn resample_qvr(ensemble: &ParticleEnsemble, config: &QvrConfig, seed: u64) -> Result<(ParticleEnsemble, QvrFit)> {
    let fit = qvr_fit(&ensemble.weights, config, derive_seed(seed, 0))?;
    let n = ensemble.len();
    let probs = fit.ansatz.probabilities()?;
    let kept: Vec<f64> = probs[..n].to_vec();
    let z: f64 = kept.iter().sum();
    // If the fit left no mass on real particles, fall back to the weights.
    let dist: Vec<f64> = if z > 0.0 {
        kept.iter().map(|p| p / z).collect()
    } else {
        ensemble.weights.clone()
    };
    let mut rng = rng_from_seed(derive_seed(seed, 1));
    let mut cdf = Vec::with_capacity(n);
    let mut acc = 0.0;
    for p in &dist {
        acc += p;
        cdf.push(acc);
    }
    let picks: Vec<usize> = (0..n)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            cdf.partition_point(|&c| c <= u).min(n - 1)
        })
        .collect();
    Ok((ensemble.with_uniform_copies(&picks), fit))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Resampler {
    #[default]
    Systematic,
    Quantum,
    Qvr {
        #[serde(default)]
        config: QvrConfig,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PfConfig {
    pub particles: usize,
    #[serde(default)]
    pub resampler: Resampler,
    /// Resample when ESS < threshold · N.
    #[serde(default = "pf_defaults::threshold")]
    pub threshold: f64,
    /// Process noise; falls back to the problem's model-error covariance,
    /// then to zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub process_noise: Option<Covariance>,
}

mod pf_defaults {
    pub fn threshold() -> f64 {
        0.5
    }
}

impl PfConfig {
    pub fn new(particles: usize, resampler: Resampler) -> Self {
        Self {
            particles,
            resampler,
            threshold: pf_defaults::threshold(),
            process_noise: None,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.particles < 2 {
            v.push(format!("pf.particles must be >= 2, got {}", self.particles));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            v.push(format!("pf.threshold must lie in [0, 1], got {}", self.threshold));
        }
        if let Resampler::Qvr { config } = &self.resampler {
            v.extend(config.violations());
        }
        v
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PfStep {
    pub time: usize,
    pub ess: f64,
    pub resampled: bool,
    pub degenerate: bool,
    pub diverged: usize,
    /// Final QVR divergence when QVR resampling ran at this step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qvr_divergence: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PfOutcome {
    #[serde(with = "serde_vectors")]
    pub analysis: Vec<DVector<f64>>,
    pub steps: Vec<PfStep>,
    pub resample_count: usize,
}

/// Particles drawn from the background prior N(xb, B).
pub fn prior_ensemble(problem: &AssimilationProblem, n: usize, seed: u64) -> Result<ParticleEnsemble> {
    let particles = (0..n)
        .map(|i| {
            let mut rng = rng_stream(seed, i as u64);
            &problem.background + problem.background_cov.sample(&mut rng)
        })
        .collect();
    ParticleEnsemble::uniform(particles)
}

/// Resample with the configured scheme; returns the new ensemble and the
/// QVR divergence when applicable.
pub fn resample(
    ensemble: &ParticleEnsemble,
    resampler: &Resampler,
    seed: u64,
) -> Result<(ParticleEnsemble, Option<f64>)> {
    Ok(match resampler {
        Resampler::Systematic => (resample_systematic(ensemble, seed), None),
        Resampler::Quantum => (resample_quantum(ensemble, ensemble.len(), seed)?.ensemble, None),
        Resampler::Qvr { config } => {
            let (e, fit) = resample_qvr(ensemble, config, seed)?;
            (e, Some(fit.divergence))
        }
    })
}

/// Predict → weight → (resample when ESS < threshold·N) over the window,
/// starting from `initial` or from the background prior. The analysis at
/// each time is the weighted mean before resampling.
pub fn run_pf(
    problem: &AssimilationProblem,
    config: &PfConfig,
    initial: Option<ParticleEnsemble>,
    bounds: Option<&EncodingScheme>,
    seed: u64,
) -> Result<PfOutcome> {
    let violations = config.violations();
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let v = problem.filter_violations();
    if !v.is_empty() {
        return Err(Error::Validation(v));
    }
    let d = problem.dim();
    let noise = config
        .process_noise
        .clone()
        .or_else(|| problem.model_error_cov.clone())
        .unwrap_or_else(|| Covariance::zero(d));
    let mut ensemble = match initial {
        Some(e) => {
            e.validate()?;
            e
        }
        None => prior_ensemble(problem, config.particles, derive_seed(seed, label::PRIOR))?,
    };
    let mut analysis = Vec::with_capacity(problem.window);
    let mut steps = Vec::with_capacity(problem.window);
    let mut resample_count = 0;
    for k in 0..problem.window {
        let mut step = PfStep {
            time: k,
            ..PfStep::default()
        };
        if k > 0 {
            let p = predict(
                &ensemble,
                &problem.model,
                &noise,
                bounds,
                derive_seed_path(seed, &[label::PREDICT, k as u64]),
            )?;
            ensemble = p.ensemble;
            step.diverged = p.diverged;
        }
        for obs in problem.observations.iter().filter(|o| o.time == k) {
            let u = update_weights(&ensemble, &obs.value, &obs.operator, &obs.cov)?;
            ensemble = u.ensemble;
            step.degenerate |= u.degenerate;
        }
        step.ess = ensemble.ess();
        analysis.push(ensemble.mean());
        if step.ess < config.threshold * ensemble.len() as f64 {
            let (e, div) = resample(
                &ensemble,
                &config.resampler,
                derive_seed_path(seed, &[label::RESAMPLE, k as u64]),
            )?;
            ensemble = e;
            step.resampled = true;
            step.qvr_divergence = div;
            resample_count += 1;
        }
        steps.push(step);
    }
    Ok(PfOutcome {
        analysis,
        steps,
        resample_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourdvar::Observation;
    use nalgebra::DMatrix;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn points(v: &[f64]) -> Vec<DVector<f64>> {
        v.iter().map(|x| DVector::from_vec(vec![*x])).collect()
    }

    #[test]
    fn ess_examples() {
        let e = ParticleEnsemble::uniform(points(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert!((e.ess() - 4.0).abs() < 1e-12);
        let one = ParticleEnsemble::new(points(&[1.0, 2.0]), vec![1.0, 0.0]).unwrap();
        assert_eq!(one.ess(), 1.0);
        let half = ParticleEnsemble::new(points(&[1.0, 2.0, 3.0, 4.0]), vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        assert_eq!(half.ess(), 2.0);
        assert!(ParticleEnsemble::new(points(&[1.0, 2.0]), vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn predict_identity_without_noise_is_inert() {
        let e = ParticleEnsemble::new(points(&[0.1, -2.0, 3.3]), vec![0.2, 0.3, 0.5]).unwrap();
        let model = DynamicsModel::linear(DMatrix::identity(1, 1));
        let p = predict(&e, &model, &Covariance::zero(1), None, 1).unwrap();
        assert_eq!(p.ensemble, e);
    }

    #[test]
    fn predicted_mean_follows_linear_model() {
        let n = 10_000;
        let e = ParticleEnsemble::uniform(vec![DVector::from_vec(vec![1.0, -1.0]); n]).unwrap();
        let m = DMatrix::from_row_slice(2, 2, &[0.9, 0.3, -0.2, 1.1]);
        let q = Covariance::diagonal(&[0.5, 0.2]).unwrap();
        let p = predict(&e, &DynamicsModel::linear(m.clone()), &q, None, 2).unwrap();
        assert_eq!(p.ensemble.weights, e.weights);
        let expect = m * DVector::from_vec(vec![1.0, -1.0]);
        let mean = p.ensemble.mean();
        for i in 0..2 {
            let se = (q.matrix()[(i, i)] / n as f64).sqrt();
            assert!((mean[i] - expect[i]).abs() < 5.0 * se);
        }
    }

    #[test]
    fn weight_update_examples() {
        let same = ParticleEnsemble::uniform(points(&[0.7; 3])).unwrap();
        let op = ObservationOperator::identity(1);
        let r = Covariance::scalar(1, 2.0).unwrap();
        let y = DVector::from_vec(vec![0.0]);
        let u = update_weights(&same, &y, &op, &r).unwrap();
        assert!(u.ensemble.weights.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-15));

        let two = ParticleEnsemble::uniform(points(&[0.0, 1.5])).unwrap();
        let u = update_weights(&two, &y, &op, &r).unwrap();
        let ratio = u.ensemble.weights[0] / u.ensemble.weights[1];
        assert!((ratio - (0.5 * 1.5f64.powi(2) / 2.0).exp()).abs() < 1e-12);
        assert!((u.ensemble.weights.iter().sum::<f64>() - 1.0).abs() < 1e-10);

        let far = update_weights(
            &two,
            &DVector::from_vec(vec![1e4]),
            &op,
            &Covariance::scalar(1, 1e-6).unwrap(),
        )
        .unwrap();
        assert!(!far.degenerate);
        let exact = update_weights(&two, &DVector::from_vec(vec![9.0]), &op, &Covariance::zero(1)).unwrap();
        assert!(exact.degenerate);
        assert_eq!(exact.ensemble.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn systematic_resampling_examples() {
        let e = ParticleEnsemble::uniform(points(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        let r = resample_systematic(&e, 3);
        let mut xs: Vec<f64> = r.particles.iter().map(|p| p[0]).collect();
        xs.sort_by(f64::total_cmp);
        assert_eq!(xs, vec![1.0, 2.0, 3.0, 4.0]);
        let point = ParticleEnsemble::new(points(&[1.0, 2.0, 3.0]), vec![0.0, 1.0, 0.0]).unwrap();
        assert!(resample_systematic(&point, 5).particles.iter().all(|p| p[0] == 2.0));
    }

    fn copy_counts(e: &ParticleEnsemble, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .map(|v| e.particles.iter().filter(|p| p[0] == *v).count() as f64)
            .collect()
    }

    #[test]
    fn resamplers_are_unbiased() {
        let values = [0.0, 1.0, 2.0, 3.0, 4.0];
        let w = vec![0.05, 0.4, 0.15, 0.3, 0.1];
        let e = ParticleEnsemble::new(points(&values), w.clone()).unwrap();
        let runs = 10_000;
        for quantum in [false, true] {
            let mut sum = [0.0; 5];
            let mut sum_sq = [0.0; 5];
            for s in 0..runs {
                let r = if quantum {
                    resample_quantum(&e, 5, s).unwrap().ensemble
                } else {
                    resample_systematic(&e, s)
                };
                for (i, c) in copy_counts(&r, &values).into_iter().enumerate() {
                    sum[i] += c;
                    sum_sq[i] += c * c;
                }
            }
            for i in 0..5 {
                let mean = sum[i] / runs as f64;
                let var = (sum_sq[i] / runs as f64 - mean * mean).max(1e-12);
                let se = (var / runs as f64).sqrt();
                assert!(
                    (mean - 5.0 * w[i]).abs() <= 3.0 * se.max(1e-9),
                    "quantum={quantum} i={i} mean={mean}"
                );
            }
        }
    }

    #[test]
    fn superposition_matches_weights() {
        let s = weighted_superposition(&[0.5, 0.5]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s.amplitudes()[0].re - h).abs() < 1e-15 && (s.amplitudes()[1].re - h).abs() < 1e-15);
        let w = [0.1, 0.2, 0.3, 0.15, 0.25];
        let e = ParticleEnsemble::new(points(&[0.0, 1.0, 2.0, 3.0, 4.0]), w.to_vec()).unwrap();
        assert!(resample_quantum(&e, 5, 1).unwrap().amplitude_error < 1e-12);
    }

    #[test]
    fn quantum_selection_is_multinomial() {
        let w = [0.1, 0.2, 0.3, 0.15, 0.25];
        let e = ParticleEnsemble::new(points(&[0.0, 1.0, 2.0, 3.0, 4.0]), w.to_vec()).unwrap();
        let mut counts = [0.0; 5];
        let draws = 10_000;
        for s in 0..draws {
            for (i, c) in copy_counts(
                &resample_quantum(&e, 5, s).unwrap().ensemble,
                &[0.0, 1.0, 2.0, 3.0, 4.0],
            )
            .into_iter()
            .enumerate()
            {
                counts[i] += c;
            }
        }
        let total = 5.0 * draws as f64;
        let chi2: f64 = counts
            .iter()
            .zip(w)
            .map(|(c, p)| (c - total * p).powi(2) / (total * p))
            .sum();
        let p_value = 1.0 - ChiSquared::new(4.0).unwrap().cdf(chi2);
        assert!(p_value > 0.001, "chi2 {chi2} p {p_value}");
    }

    #[test]
    fn qvr_examples() {
        let mut point = vec![0.0; 8];
        point[0] = 1.0;
        let fit = qvr_fit(&point, &QvrConfig::default(), 1).unwrap();
        assert!(fit.divergence < 1e-3, "{}", fit.divergence);
        assert!(fit.trace.iter().all(|d| *d >= 0.0));
        assert!(fit.trace.windows(2).all(|w| w[1] <= w[0]));

        let uniform = vec![0.125; 8];
        let fit = qvr_fit(
            &uniform,
            &QvrConfig {
                layers: 1,
                ..QvrConfig::default()
            },
            2,
        )
        .unwrap();
        assert!(fit.divergence < 1e-2, "{}", fit.divergence);
        assert!(fit.converged);

        let rev = qvr_fit(
            &uniform,
            &QvrConfig {
                direction: KlDirection::TargetToModel,
                ..QvrConfig::default()
            },
            2,
        )
        .unwrap();
        assert!(rev.divergence < 1e-2);
        assert!(qvr_fit(&[0.5, 0.6], &QvrConfig::default(), 1).is_err());
    }

    #[test]
    fn kl_is_nonnegative_with_zero_targets() {
        assert!(kl_divergence(&[1.0, 0.0], &[1.0, 0.0]) < 1e-11);
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]) > 10.0);
        assert!(kl_divergence(&[0.3, 0.7], &[0.6, 0.4]) > 0.0);
    }

    #[test]
    fn qvr_resampling_keeps_population() {
        let e = ParticleEnsemble::new(points(&[0.0, 1.0, 2.0]), vec![0.7, 0.2, 0.1]).unwrap();
        let (r, fit) = resample_qvr(&e, &QvrConfig::default(), 4).unwrap();
        assert_eq!(r.len(), 3);
        assert!(fit.divergence >= 0.0);
    }

    fn identity_problem(window: usize) -> AssimilationProblem {
        let truth = DVector::from_vec(vec![0.3, -1.2]);
        AssimilationProblem {
            background: truth.clone(),
            background_cov: Covariance::scalar(2, 1.0).unwrap(),
            observations: (0..window)
                .map(|k| Observation {
                    time: k,
                    value: truth.clone(),
                    operator: ObservationOperator::identity(2),
                    cov: Covariance::zero(2),
                })
                .collect(),
            model: DynamicsModel::linear(DMatrix::identity(2, 2)),
            window,
            model_error_cov: None,
        }
    }

    #[test]
    fn noise_free_filter_started_at_truth_is_exact() {
        let p = identity_problem(4);
        let init = ParticleEnsemble::uniform(vec![p.background.clone(); 10]).unwrap();
        for resampler in [Resampler::Systematic, Resampler::Quantum] {
            let out = run_pf(&p, &PfConfig::new(10, resampler), Some(init.clone()), None, 3).unwrap();
            assert!(out.analysis.iter().all(|a| *a == p.background));
            assert!(out.steps.iter().all(|s| s.ess >= 1.0 && s.ess <= 10.0 + 1e-9));
        }
    }

    #[test]
    fn filter_is_seed_deterministic() {
        let mut p = identity_problem(3);
        p.observations
            .iter_mut()
            .for_each(|o| o.cov = Covariance::scalar(2, 0.5).unwrap());
        p.model_error_cov = Some(Covariance::scalar(2, 0.1).unwrap());
        let cfg = PfConfig::new(64, Resampler::Systematic);
        assert_eq!(
            run_pf(&p, &cfg, None, None, 8).unwrap(),
            run_pf(&p, &cfg, None, None, 8).unwrap()
        );
    }
}
