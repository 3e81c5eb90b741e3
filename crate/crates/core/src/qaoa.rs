//! QAOA over a tabulated (diagonal) cost.
//!
//! The cost Hamiltonian is diagonal, so `U_C(γ)` is an elementwise phase
//! multiply. Phases use the table affinely rescaled onto `[0, π]`; the raw
//! table is used for expectations. The mixer is `e^{-iβX}` on every qubit.
//!
//! Three gradients are provided:
//!
//! * [`parameter_shift_gradient`] is exact. Each angle drives a sum of
//!   commuting Pauli generators (one `X_j` per qubit for β, the Walsh–Pauli
//!   expansion `Σ_S a_S Z_S` of the rescaled table for γ) and the two-point
//!   shift rule is applied to every term separately.
//! * [`naive_shift_gradient`] applies `(L(θ+π/2) − L(θ−π/2))/2` to the shared
//!   angle directly. It is only exact for a single generator with spectrum
//!   {±1/2}, and is kept so the deviation can be measured.
//! * [`adjoint_gradient`] back-propagates through the circuit in `O(p)`
//!   statevector passes; the optimizer uses this one.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::EncodingScheme;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, label, rng_from_seed};
use crate::statevector::{Axis, DiagonalObservable, MeasurementRecord, StateVector};

/// Relative noise floor below which Walsh coefficients are dropped.
const WALSH_EPS: f64 = 1e-14;
const ARMIJO: f64 = 1e-4;
const SHRINK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 40;
// Probabilities below this carry no Fisher information we can resolve.
const FISHER_FLOOR: f64 = 1e-14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaoaParams {
    pub gammas: Vec<f64>,
    pub betas: Vec<f64>,
}

impl QaoaParams {
    pub fn new(gammas: Vec<f64>, betas: Vec<f64>) -> Result<Self> {
        let p = Self { gammas, betas };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(depth: usize) -> Self {
        Self {
            gammas: vec![0.0; depth],
            betas: vec![0.0; depth],
        }
    }

    pub fn depth(&self) -> usize {
        self.gammas.len()
    }

    /// Angles as one vector laid out `[γ_1..γ_p, β_1..β_p]`.
    pub fn to_vec(&self) -> Vec<f64> {
        self.gammas.iter().chain(&self.betas).copied().collect()
    }

    pub fn from_slice(angles: &[f64]) -> Result<Self> {
        if angles.len() % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "angle vector has odd length {}",
                angles.len()
            )));
        }
        let p = angles.len() / 2;
        Self::new(angles[..p].to_vec(), angles[p..].to_vec())
    }

    fn validate(&self) -> Result<()> {
        if self.gammas.len() != self.betas.len() {
            return Err(Error::Shape {
                context: "qaoa betas",
                expected: self.gammas.len(),
                found: self.betas.len(),
            });
        }
        if self.gammas.iter().chain(&self.betas).any(|a| !a.is_finite()) {
            return Err(Error::InvalidArgument("qaoa angles must be finite".into()));
        }
        Ok(())
    }
}

/// Which descent direction [`optimize`] follows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaoaOptimizer {
    #[default]
    Plain,
    Natural,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaoaConfig {
    #[serde(default = "defaults::max_iterations")]
    pub max_iterations: usize,
    /// Initial trial step of the line search.
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: QaoaOptimizer,
    /// Tikhonov term added to the Fisher matrix.
    #[serde(default = "defaults::ridge")]
    pub ridge: f64,
    /// Independent starts; the best final expectation wins.
    #[serde(default = "defaults::restarts")]
    pub restarts: usize,
    /// Shots for the measurement record attached to the result.
    #[serde(default = "defaults::shots")]
    pub shots: u64,
    #[serde(default = "defaults::gradient_tolerance")]
    pub gradient_tolerance: f64,
}

mod defaults {
    pub fn max_iterations() -> usize {
        200
    }
    pub fn learning_rate() -> f64 {
        0.5
    }
    pub fn ridge() -> f64 {
        1e-3
    }
    pub fn restarts() -> usize {
        1
    }
    pub fn shots() -> u64 {
        1024
    }
    pub fn gradient_tolerance() -> f64 {
        1e-8
    }
}

impl Default for QaoaConfig {
    fn default() -> Self {
        Self {
            max_iterations: defaults::max_iterations(),
            learning_rate: defaults::learning_rate(),
            optimizer: QaoaOptimizer::Plain,
            ridge: defaults::ridge(),
            restarts: defaults::restarts(),
            shots: defaults::shots(),
            gradient_tolerance: defaults::gradient_tolerance(),
        }
    }
}

impl QaoaConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.max_iterations == 0 {
            v.push("qaoa.max_iterations must be >= 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            v.push(format!(
                "qaoa.learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.ridge > 0.0 && self.ridge.is_finite()) {
            v.push(format!("qaoa.ridge must be positive, got {}", self.ridge));
        }
        if self.restarts == 0 {
            v.push("qaoa.restarts must be >= 1".to_string());
        }
        if self.shots == 0 {
            v.push("qaoa.shots must be >= 1".to_string());
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaoaResult {
    pub params: QaoaParams,
    pub expectation: f64,
    /// Best-so-far expectation after each iteration (iteration 0 is the start).
    pub trace: Vec<(usize, f64)>,
    pub samples: MeasurementRecord,
    /// Number of full circuit evaluations spent by the optimizer.
    pub evaluations: usize,
}

/// Diagonal cost table together with the phase table derived from it.
#[derive(Clone, Debug)]
pub struct QaoaCost {
    table: DiagonalObservable,
    phases: DiagonalObservable,
}

impl QaoaCost {
    pub fn new(table: DiagonalObservable) -> Self {
        let phases = table.rescaled(0.0, PI);
        Self { table, phases }
    }

    pub fn table(&self) -> &DiagonalObservable {
        &self.table
    }

    /// The table rescaled onto `[0, π]` that drives the phase unitaries.
    pub fn phases(&self) -> &DiagonalObservable {
        &self.phases
    }

    pub fn num_qubits(&self) -> usize {
        self.table.num_qubits()
    }

    /// Coefficients `a_S` of `phases = Σ_S a_S Z_S`, indexed by the bitmask S.
    pub fn walsh_coefficients(&self) -> Vec<f64> {
        let mut a = self.phases.values().to_vec();
        let n = a.len();
        let mut h = 1;
        while h < n {
            for block in a.chunks_mut(2 * h) {
                let (lo, hi) = block.split_at_mut(h);
                for (x, y) in lo.iter_mut().zip(hi.iter_mut()) {
                    let (s, d) = (*x + *y, *x - *y);
                    *x = s;
                    *y = d;
                }
            }
            h *= 2;
        }
        let scale = 1.0 / n as f64;
        a.iter_mut().for_each(|v| *v *= scale);
        a
    }
}

// Circuit evaluation with optional per-term perturbations, used by the
// shift rules.
#[derive(Clone, Copy)]
enum Shift {
    None,
    /// Extra `e^{-i·s·X_q}` after the mixer of `layer`.
    Mixer {
        layer: usize,
        qubit: usize,
        s: f64,
    },
    /// Extra `e^{-i·s·Z_S}` after the phase of `layer`.
    Phase {
        layer: usize,
        mask: usize,
        s: f64,
    },
}

fn run_circuit(cost: &QaoaCost, params: &QaoaParams, shift: Shift) -> Result<StateVector> {
    params.validate()?;
    let mut state = StateVector::uniform(cost.num_qubits())?;
    for (l, (&g, &b)) in params.gammas.iter().zip(&params.betas).enumerate() {
        state.apply_diagonal_phase(cost.phases(), g)?;
        if let Shift::Phase { layer, mask, s } = shift {
            if layer == l {
                let z = Complex64::from_polar(1.0, -s);
                let zc = z.conj();
                for (k, a) in state.amplitudes_mut().iter_mut().enumerate() {
                    *a *= if (k & mask).count_ones() % 2 == 0 { z } else { zc };
                }
            }
        }
        state.apply_mixer(b);
        if let Shift::Mixer { layer, qubit, s } = shift {
            if layer == l {
                state.apply_rotation(qubit, Axis::X, 2.0 * s)?;
            }
        }
    }
    Ok(state)
}

/// `U_M(β_p)U_C(γ_p)···U_M(β_1)U_C(γ_1)|+⟩^n`.
pub fn evolve(cost: &QaoaCost, params: &QaoaParams) -> Result<StateVector> {
    run_circuit(cost, params, Shift::None)
}

/// ⟨ψ(γ,β)| C |ψ(γ,β)⟩ with the raw (unscaled) table.
pub fn expectation(cost: &QaoaCost, params: &QaoaParams) -> Result<f64> {
    evolve(cost, params)?.expectation_diagonal(cost.table())
}

fn shifted_expectation(cost: &QaoaCost, params: &QaoaParams, shift: Shift) -> Result<f64> {
    run_circuit(cost, params, shift)?.expectation_diagonal(cost.table())
}

/// Sum over the commuting generator terms of one angle of
/// `weight · (f(+π/4) − f(−π/4))`, where `f` is any linear functional of
/// the output probabilities.
fn term_shifts(cost: &QaoaCost, depth: usize, walsh: &[f64]) -> Vec<Vec<(f64, Shift, Shift)>> {
    let n = cost.num_qubits();
    let cutoff = WALSH_EPS * walsh.iter().fold(0.0f64, |m, a| m.max(a.abs())).max(1.0);
    let mut out = Vec::with_capacity(2 * depth);
    for layer in 0..depth {
        out.push(
            walsh
                .iter()
                .enumerate()
                .skip(1)
                .filter(|(_, a)| a.abs() > cutoff)
                .map(|(mask, &a)| {
                    (
                        a,
                        Shift::Phase {
                            layer,
                            mask,
                            s: FRAC_PI_4,
                        },
                        Shift::Phase {
                            layer,
                            mask,
                            s: -FRAC_PI_4,
                        },
                    )
                })
                .collect(),
        );
    }
    for layer in 0..depth {
        out.push(
            (0..n)
                .map(|qubit| {
                    (
                        1.0,
                        Shift::Mixer {
                            layer,
                            qubit,
                            s: FRAC_PI_4,
                        },
                        Shift::Mixer {
                            layer,
                            qubit,
                            s: -FRAC_PI_4,
                        },
                    )
                })
                .collect(),
        );
    }
    out
}

/// Exact gradient `[∂γ_1..∂γ_p, ∂β_1..∂β_p]` by term-wise parameter shift.
///
/// For a term `e^{-iφP}` with `P² = I` the expectation is a sinusoid of
/// period π in φ, so `∂_φ f = f(φ+π/4) − f(φ−π/4)`. A shared angle is the sum
/// of such terms weighted by their coefficient. Costs `2(p·n + p·T)` circuit
/// evaluations where `T` is the number of nonzero Walsh terms.
pub fn parameter_shift_gradient(cost: &QaoaCost, params: &QaoaParams) -> Result<Vec<f64>> {
    let walsh = cost.walsh_coefficients();
    term_shifts(cost, params.depth(), &walsh)
        .into_iter()
        .map(|terms| {
            terms.into_iter().try_fold(0.0, |acc, (w, plus, minus)| {
                Ok(acc + w * (shifted_expectation(cost, params, plus)? - shifted_expectation(cost, params, minus)?))
            })
        })
        .collect()
}

/// The textbook rule `(L(θ_i+π/2) − L(θ_i−π/2))/2` applied to each shared
/// angle as a whole. Not exact for QAOA layers; see the module docs.
pub fn naive_shift_gradient(cost: &QaoaCost, params: &QaoaParams) -> Result<Vec<f64>> {
    let base = params.to_vec();
    (0..base.len())
        .map(|i| {
            let mut plus = base.clone();
            plus[i] += FRAC_PI_2;
            let mut minus = base.clone();
            minus[i] -= FRAC_PI_2;
            Ok((expectation(cost, &QaoaParams::from_slice(&plus)?)?
                - expectation(cost, &QaoaParams::from_slice(&minus)?)?)
                / 2.0)
        })
        .collect()
}

/// Central differences with absolute step `h`.
pub fn finite_difference_gradient(cost: &QaoaCost, params: &QaoaParams, h: f64) -> Result<Vec<f64>> {
    let base = params.to_vec();
    (0..base.len())
        .map(|i| {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            Ok((expectation(cost, &QaoaParams::from_slice(&plus)?)?
                - expectation(cost, &QaoaParams::from_slice(&minus)?)?)
                / (2.0 * h))
        })
        .collect()
}

/// Reverse-mode gradient; returns `(expectation, gradient)`.
pub fn adjoint_gradient(cost: &QaoaCost, params: &QaoaParams) -> Result<(f64, Vec<f64>)> {
    let p = params.depth();
    let mut psi = evolve(cost, params)?;
    let table = cost.table().values();
    let phases = cost.phases().values();
    let value = psi.expectation_diagonal(cost.table())?;
    // λ = C ψ, carried backwards alongside ψ.
    let mut lambda = psi.clone();
    for (a, &c) in lambda.amplitudes_mut().iter_mut().zip(table) {
        *a *= c;
    }
    let mut grad = vec![0.0; 2 * p];
    // dE/dθ = 2 Re⟨λ| -iG |ψ⟩ = 2 Im⟨λ|G|ψ⟩.
    let im_inner =
        |l: &[Complex64], g: &[Complex64]| -> f64 { l.iter().zip(g).map(|(a, b)| (a.conj() * b).im).sum::<f64>() };
    for layer in (0..p).rev() {
        let hx = psi.mixer_generator_applied();
        grad[p + layer] = 2.0 * im_inner(lambda.amplitudes(), &hx);
        psi.apply_mixer(-params.betas[layer]);
        lambda.apply_mixer(-params.betas[layer]);
        let hc: Vec<Complex64> = psi.amplitudes().iter().zip(phases).map(|(a, &c)| a * c).collect();
        grad[layer] = 2.0 * im_inner(lambda.amplitudes(), &hc);
        psi.apply_diagonal_phase(cost.phases(), -params.gammas[layer])?;
        lambda.apply_diagonal_phase(cost.phases(), -params.gammas[layer])?;
    }
    Ok((value, grad))
}

/// `∂p_k/∂θ_i` for every angle, by term-wise parameter shift of the
/// probability vector. Rows are angles.
pub fn probability_jacobian(cost: &QaoaCost, params: &QaoaParams) -> Result<Vec<Vec<f64>>> {
    let walsh = cost.walsh_coefficients();
    let dim = 1usize << cost.num_qubits();
    term_shifts(cost, params.depth(), &walsh)
        .into_iter()
        .map(|terms| {
            let mut row = vec![0.0; dim];
            for (w, plus, minus) in terms {
                let pp = run_circuit(cost, params, plus)?.probabilities();
                let pm = run_circuit(cost, params, minus)?.probabilities();
                for (r, (a, b)) in row.iter_mut().zip(pp.iter().zip(&pm)) {
                    *r += w * (a - b);
                }
            }
            Ok(row)
        })
        .collect()
}

/// Classical Fisher information of the measurement distribution,
/// `F_ij = Σ_k ∂_i p_k ∂_j p_k / p_k`.
pub fn fisher_information(cost: &QaoaCost, params: &QaoaParams) -> Result<DMatrix<f64>> {
    let probs = evolve(cost, params)?.probabilities();
    let jac = probability_jacobian(cost, params)?;
    let m = jac.len();
    let mut f = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let v: f64 = probs
                .iter()
                .enumerate()
                .filter(|(_, &p)| p > FISHER_FLOOR)
                .map(|(k, &p)| jac[i][k] * jac[j][k] / p)
                .sum();
            f[(i, j)] = v;
            f[(j, i)] = v;
        }
    }
    Ok(f)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NaturalStep {
    pub params: QaoaParams,
    /// `F + ridge·I` could not be factored and a plain gradient step was taken.
    pub fell_back: bool,
}

/// `θ − η (F + ridge·I)⁻¹ ∇L` for a given metric and gradient.
pub fn natural_step_with(
    params: &QaoaParams,
    gradient: &[f64],
    fisher: &DMatrix<f64>,
    learning_rate: f64,
    ridge: f64,
) -> Result<NaturalStep> {
    if ridge.is_nan() || ridge <= 0.0 {
        return Err(Error::Precondition(format!("ridge must be positive, got {ridge}")));
    }
    let m = gradient.len();
    let g = DVector::from_column_slice(gradient);
    let regularized = fisher + DMatrix::identity(m, m) * ridge;
    let (direction, fell_back) = match regularized.cholesky() {
        Some(c) => {
            let d = c.solve(&g);
            if d.iter().all(|v| v.is_finite()) {
                (d, false)
            } else {
                (g, true)
            }
        }
        None => (g, true),
    };
    let theta = DVector::from_vec(params.to_vec()) - direction * learning_rate;
    Ok(NaturalStep {
        params: QaoaParams::from_slice(theta.as_slice())?,
        fell_back,
    })
}

pub fn natural_gradient_step(
    cost: &QaoaCost,
    params: &QaoaParams,
    learning_rate: f64,
    ridge: f64,
) -> Result<NaturalStep> {
    let (_, grad) = adjoint_gradient(cost, params)?;
    let fisher = fisher_information(cost, params)?;
    natural_step_with(params, &grad, &fisher, learning_rate, ridge)
}

/// Gradient descent on the angles with Armijo backtracking along the chosen
/// direction. The first start is drawn uniformly in `[0, 0.1]`; further
/// restarts draw γ in `[0, 2π)` and β in `[0, π)`. The restart with the
/// lowest final expectation is returned.
pub fn optimize(cost: &QaoaCost, depth: usize, config: &QaoaConfig, seed: u64) -> Result<QaoaResult> {
    if depth == 0 {
        return Err(Error::Precondition("qaoa depth must be >= 1".into()));
    }
    let violations = config.violations();
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let mut best: Option<(QaoaParams, Vec<(usize, f64)>)> = None;
    let mut evaluations = 0;
    for restart in 0..config.restarts {
        let mut rng = rng_from_seed(derive_seed(seed, restart as u64));
        // The first start sits next to the uniform state; later ones cover
        // a full period of the mixer and two of the rescaled phases.
        let (gamma_span, beta_span) = if restart == 0 { (0.1, 0.1) } else { (2.0 * PI, PI) };
        let start: Vec<f64> = (0..2 * depth)
            .map(|i| rng.random::<f64>() * if i < depth { gamma_span } else { beta_span })
            .collect();
        let (params, trace, evals) = descend(cost, QaoaParams::from_slice(&start)?, config)?;
        evaluations += evals;
        let better = match &best {
            None => true,
            Some((_, t)) => trace.last().unwrap().1 < t.last().unwrap().1,
        };
        if better {
            best = Some((params, trace));
        }
    }
    let (params, trace) = best.expect("at least one restart");
    let state = evolve(cost, &params)?;
    let samples = state.measure(config.shots, derive_seed(seed, label::MEASURE))?;
    Ok(QaoaResult {
        expectation: trace.last().unwrap().1,
        params,
        trace,
        samples,
        evaluations,
    })
}

type Descent = (QaoaParams, Vec<(usize, f64)>, usize);

/// Run the descent from a given start; returns the final angles, the
/// best-so-far trace and the number of circuit evaluations.
pub fn optimize_from(cost: &QaoaCost, start: QaoaParams, config: &QaoaConfig) -> Result<Descent> {
    descend(cost, start, config)
}

fn descend(cost: &QaoaCost, start: QaoaParams, config: &QaoaConfig) -> Result<Descent> {
    let mut params = start;
    let (mut f, mut grad) = adjoint_gradient(cost, &params)?;
    let mut evaluations = 1;
    let mut trace = vec![(0, f)];
    let mut step = config.learning_rate;
    for it in 1..=config.max_iterations {
        let g_norm_sq: f64 = grad.iter().map(|g| g * g).sum();
        if g_norm_sq.sqrt() < config.gradient_tolerance {
            break;
        }
        let direction = match config.optimizer {
            QaoaOptimizer::Plain => grad.clone(),
            QaoaOptimizer::Natural => {
                let fisher = fisher_information(cost, &params)?;
                let unit = natural_step_with(&params, &grad, &fisher, 1.0, config.ridge)?;
                params
                    .to_vec()
                    .iter()
                    .zip(unit.params.to_vec())
                    .map(|(a, b)| a - b)
                    .collect()
            }
        };
        let slope: f64 = direction.iter().zip(&grad).map(|(d, g)| d * g).sum();
        if slope <= 0.0 {
            break;
        }
        let theta = params.to_vec();
        let mut t = step;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<f64> = theta.iter().zip(&direction).map(|(a, d)| a - t * d).collect();
            let trial = QaoaParams::from_slice(&trial)?;
            let ft = expectation(cost, &trial)?;
            evaluations += 1;
            if ft <= f - ARMIJO * t * slope {
                accepted = Some(trial);
                break;
            }
            t *= SHRINK;
        }
        let Some(next) = accepted else {
            break;
        };
        params = next;
        (f, grad) = adjoint_gradient(cost, &params)?;
        evaluations += 1;
        trace.push((it, f));
        step = (2.0 * t).min(config.learning_rate * 8.0);
    }
    Ok((params, trace, evaluations))
}

/// Measure the optimized circuit `count` times and decode each outcome.
pub fn sample_particles(
    cost: &QaoaCost,
    result: &QaoaResult,
    count: usize,
    scheme: &EncodingScheme,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    if count == 0 {
        return Err(Error::Precondition("particle count must be >= 1".into()));
    }
    if scheme.num_qubits() != cost.num_qubits() {
        return Err(Error::Shape {
            context: "encoding qubits",
            expected: cost.num_qubits(),
            found: scheme.num_qubits(),
        });
    }
    let state = evolve(cost, &result.params)?;
    state
        .sample_indices(count as u64, seed)?
        .into_iter()
        .map(|k| Ok(DVector::from_vec(scheme.decode(k)?)))
        .collect()
}
