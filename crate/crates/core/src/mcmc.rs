//! Metropolis–Hastings over a discrete (tabulated) target, the
//! Grover-amplified quantum step, exact transition matrices and chain
//! diagnostics.
//!
//! The quantum step fixes one uniform `u`, marks every proposal `x' ≠ x`
//! with `α(x, x') = min(1, p(x')/p(x)) > u`, amplifies the marked set inside
//! the uniform superposition over the kernel support and measures once.
//! Conditional on a move the outcome is uniform over the marked set, so the
//! chain is not the classical MH chain; [`QuantumMode::Corrected`] adds an
//! outer accept/reject against the exact quantum kernel to restore the
//! target.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::io::Write;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, SimRng};
use crate::statevector::{check_qubits, grover_success_probability, DiagonalObservable, StateVector};

/// Stand-in for `ln 0`; keeps differences finite.
const LOG_ZERO: f64 = -1e300;
/// Largest state space for which transition matrices are enumerated.
pub const MAX_ENUMERATED_STATES: usize = 256;

/// Unnormalized log-target over the basis indices of an n-qubit register.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetDistribution {
    log_weights: Vec<f64>,
    log_normalizer: f64,
}

impl TargetDistribution {
    /// `-inf` entries are zero-probability states; NaN and `+inf` are rejected.
    pub fn new(log_weights: Vec<f64>) -> Result<Self> {
        let len = log_weights.len();
        if len < 2 || !len.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "target length {len} is not a power of two >= 2"
            )));
        }
        check_qubits(len.trailing_zeros() as usize)?;
        let mut lw = log_weights;
        for (k, v) in lw.iter_mut().enumerate() {
            if v.is_nan() || *v == f64::INFINITY {
                return Err(Error::InvalidArgument(format!("log weight {k} is {v}")));
            }
            if *v == f64::NEG_INFINITY {
                *v = LOG_ZERO;
            }
        }
        let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max <= LOG_ZERO {
            return Err(Error::InvalidArgument("target has no positive mass".into()));
        }
        let sum: f64 = lw.iter().map(|v| (v - max).exp()).sum();
        Ok(Self {
            log_normalizer: max + sum.ln(),
            log_weights: lw,
        })
    }

    /// `p(k) ∝ exp(-cost[k])`.
    pub fn from_costs(costs: &DiagonalObservable) -> Result<Self> {
        Self::new(costs.values().iter().map(|c| -c).collect())
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn log_normalizer(&self) -> f64 {
        self.log_normalizer
    }

    pub fn num_states(&self) -> usize {
        self.log_weights.len()
    }

    pub fn num_qubits(&self) -> usize {
        self.log_weights.len().trailing_zeros() as usize
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.log_weights
            .iter()
            .map(|v| (v - self.log_normalizer).exp())
            .collect()
    }

    /// `min(1, p(to)/p(from))`.
    pub fn acceptance(&self, from: usize, to: usize) -> f64 {
        (self.log_weights[to] - self.log_weights[from]).min(0.0).exp()
    }
}

/// Symmetric proposal kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProposalKernel {
    /// Every basis state (the current one included) with equal probability.
    UniformGlobal,
    /// Every state at Hamming distance exactly `flip_count`.
    BitflipNeighborhood { flip_count: usize },
}

impl ProposalKernel {
    pub fn validate(&self, num_qubits: usize) -> Result<()> {
        if let Self::BitflipNeighborhood { flip_count } = *self {
            if flip_count == 0 || flip_count > num_qubits {
                return Err(Error::InvalidArgument(format!(
                    "flip_count {flip_count} must lie in 1..={num_qubits}"
                )));
            }
        }
        Ok(())
    }

    /// Proposal support from `current`, in increasing index order.
    pub fn support(&self, current: usize, num_qubits: usize) -> Vec<usize> {
        let dim = 1usize << num_qubits;
        match *self {
            Self::UniformGlobal => (0..dim).collect(),
            Self::BitflipNeighborhood { flip_count } => (0..dim)
                .filter(|&k| (k ^ current).count_ones() as usize == flip_count)
                .collect(),
        }
    }

    fn propose(&self, current: usize, num_qubits: usize, rng: &mut SimRng) -> usize {
        match *self {
            Self::UniformGlobal => rng.random_range(0..1usize << num_qubits),
            Self::BitflipNeighborhood { flip_count } => {
                // Partial Fisher–Yates over the qubit positions.
                let mut qubits: Vec<usize> = (0..num_qubits).collect();
                let mut mask = 0;
                for i in 0..flip_count {
                    let j = rng.random_range(i..num_qubits);
                    qubits.swap(i, j);
                    mask |= 1 << qubits[i];
                }
                current ^ mask
            }
        }
    }
}

/// One classical MH step. Returns `(next, accepted)`.
pub fn mh_step(
    target: &TargetDistribution,
    kernel: &ProposalKernel,
    current: usize,
    rng: &mut SimRng,
) -> (usize, bool) {
    let proposal = kernel.propose(current, target.num_qubits(), rng);
    let alpha = target.acceptance(current, proposal);
    if alpha >= 1.0 || rng.random::<f64>() < alpha {
        (proposal, true)
    } else {
        (current, false)
    }
}

/// How the marked mass ε̂ that sets the Grover iteration count is obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MassEstimate {
    /// Read exactly from the statevector.
    #[default]
    Exact,
    /// Estimated from `shots` oracle-evaluated measurements of the uniform
    /// superposition; each shot costs one oracle call.
    Shots { shots: u64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantumMode {
    /// Amplified fixed-u acceptance set, as described in the module docs.
    #[default]
    Uncorrected,
    /// The amplified move is used as a proposal and passed through an outer
    /// MH test against the exact quantum kernel.
    Corrected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantumStep {
    pub next: usize,
    pub accepted: bool,
    pub oracle_calls: u64,
}

/// Grover iterations for marked mass ε: `floor(π / (4√ε))`.
pub fn grover_iterations(marked_mass: f64) -> usize {
    if marked_mass <= 0.0 {
        return 0;
    }
    (PI / (4.0 * marked_mass.sqrt())).floor() as usize
}

/// Uniform superposition over `support` on an n-qubit register.
fn support_state(num_qubits: usize, support: &[usize]) -> Result<StateVector> {
    let mut amps = vec![Complex64::new(0.0, 0.0); 1 << num_qubits];
    let a = Complex64::new((support.len() as f64).recip().sqrt(), 0.0);
    for &k in support {
        amps[k] = a;
    }
    StateVector::from_amplitudes(amps)
}

/// One uncorrected quantum step (see module docs).
pub fn qmcmc_step(
    target: &TargetDistribution,
    kernel: &ProposalKernel,
    current: usize,
    estimate: MassEstimate,
    rng: &mut SimRng,
) -> Result<QuantumStep> {
    let n = target.num_qubits();
    let u: f64 = rng.random();
    let support = kernel.support(current, n);
    let mut is_marked = vec![false; 1 << n];
    let mut marked_count = 0;
    for &k in &support {
        if k != current && target.acceptance(current, k) > u {
            is_marked[k] = true;
            marked_count += 1;
        }
    }
    let stay = QuantumStep {
        next: current,
        accepted: false,
        oracle_calls: 1,
    };
    if marked_count == 0 {
        return Ok(stay);
    }
    let state = support_state(n, &support)?;
    let (mass, estimate_calls) = match estimate {
        MassEstimate::Exact => (state.marked_probability(|k| is_marked[k]), 0),
        MassEstimate::Shots { shots } => {
            let hits = state
                .sample_indices(shots, rng.random())?
                .into_iter()
                .filter(|&k| is_marked[k])
                .count();
            // A zero estimate still leaves at least one marked state.
            ((hits.max(1)) as f64 / shots as f64, shots)
        }
    };
    let k = grover_iterations(mass);
    let mut amplified = state;
    amplified.amplitude_amplify(|j| is_marked[j], k);
    let outcome = amplified.sample_indices(1, rng.random())?[0];
    let calls = k as u64 + 1 + estimate_calls;
    Ok(if is_marked[outcome] {
        QuantumStep {
            next: outcome,
            accepted: true,
            oracle_calls: calls,
        }
    } else {
        QuantumStep {
            oracle_calls: calls,
            ..stay
        }
    })
}

/// Corrected quantum step: the uncorrected move is a proposal accepted
/// with `min(1, p(x')T(x'→x) / (p(x)T(x→x')))`, where `T` is the exact
/// uncorrected quantum kernel (see [`quantum_kernel_row`]).
pub fn qmcmc_step_corrected(
    target: &TargetDistribution,
    kernel: &ProposalKernel,
    current: usize,
    rng: &mut SimRng,
) -> Result<QuantumStep> {
    let step = qmcmc_step(target, kernel, current, MassEstimate::Exact, rng)?;
    if !step.accepted {
        return Ok(step);
    }
    let x = current;
    let y = step.next;
    let log_ratio = target.log_weights[y] - target.log_weights[x] + quantum_kernel_entry(target, kernel, y, x).ln()
        - quantum_kernel_entry(target, kernel, x, y).ln();
    let alpha = log_ratio.min(0.0).exp();
    if alpha >= 1.0 || rng.random::<f64>() < alpha {
        Ok(step)
    } else {
        Ok(QuantumStep {
            next: x,
            accepted: false,
            ..step
        })
    }
}

/// Classical rejection sampling at a fixed `u`: draw proposals from the
/// kernel until one is acceptable. Each proposal costs one oracle call.
/// Gives up after `max_proposals` and stays.
pub fn rejection_step(
    target: &TargetDistribution,
    kernel: &ProposalKernel,
    current: usize,
    max_proposals: u64,
    rng: &mut SimRng,
) -> QuantumStep {
    let u: f64 = rng.random();
    let n = target.num_qubits();
    for calls in 1..=max_proposals {
        let x = kernel.propose(current, n, rng);
        if x != current && target.acceptance(current, x) > u {
            return QuantumStep {
                next: x,
                accepted: true,
                oracle_calls: calls,
            };
        }
    }
    QuantumStep {
        next: current,
        accepted: false,
        oracle_calls: max_proposals,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepKind {
    Classical,
    Quantum {
        #[serde(default)]
        mode: QuantumMode,
        #[serde(default)]
        estimate: MassEstimate,
    },
}

/// A chain trajectory after burn-in. Per-step arrays share indices with
/// `states`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainRun {
    pub states: Vec<usize>,
    pub accepted_flags: Vec<bool>,
    pub oracle_calls_per_step: Vec<u64>,
    pub accepted: u64,
    pub proposals: u64,
    pub oracle_calls: u64,
    pub seed: u64,
}

impl ChainRun {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }

    /// Visit frequencies over `num_states` states.
    pub fn histogram(&self, num_states: usize) -> Vec<f64> {
        let mut h = vec![0.0; num_states];
        for &s in &self.states {
            h[s] += 1.0;
        }
        let n = self.states.len() as f64;
        h.iter_mut().for_each(|v| *v /= n);
        h
    }

    /// `step,state,accepted,oracle_calls` rows.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "step,state,accepted,oracle_calls")?;
        for (i, ((s, a), c)) in self
            .states
            .iter()
            .zip(&self.accepted_flags)
            .zip(&self.oracle_calls_per_step)
            .enumerate()
        {
            writeln!(out, "{i},{s},{},{c}", u8::from(*a))?;
        }
        Ok(())
    }
}

/// Run `steps` transitions from `start` and keep the states after the
/// first `burn_in`.
pub fn run_chain(
    target: &TargetDistribution,
    kernel: &ProposalKernel,
    kind: StepKind,
    start: usize,
    steps: usize,
    burn_in: usize,
    seed: u64,
) -> Result<ChainRun> {
    kernel.validate(target.num_qubits())?;
    if steps <= burn_in {
        return Err(Error::Precondition(format!(
            "steps ({steps}) must exceed burn_in ({burn_in})"
        )));
    }
    if start >= target.num_states() {
        return Err(Error::BasisIndex {
            index: start,
            num_states: target.num_states(),
        });
    }
    let mut rng = rng_from_seed(seed);
    let kept = steps - burn_in;
    let mut run = ChainRun {
        states: Vec::with_capacity(kept),
        accepted_flags: Vec::with_capacity(kept),
        oracle_calls_per_step: Vec::with_capacity(kept),
        accepted: 0,
        proposals: 0,
        oracle_calls: 0,
        seed,
    };
    let mut x = start;
    for i in 0..steps {
        let step = match kind {
            StepKind::Classical => {
                let (next, accepted) = mh_step(target, kernel, x, &mut rng);
                QuantumStep {
                    next,
                    accepted,
                    oracle_calls: 1,
                }
            }
            StepKind::Quantum {
                mode: QuantumMode::Corrected,
                ..
            } => qmcmc_step_corrected(target, kernel, x, &mut rng)?,
            StepKind::Quantum { estimate, .. } => qmcmc_step(target, kernel, x, estimate, &mut rng)?,
        };
        x = step.next;
        if i >= burn_in {
            run.states.push(x);
            run.accepted_flags.push(step.accepted);
            run.oracle_calls_per_step.push(step.oracle_calls);
            run.accepted += u64::from(step.accepted);
            run.proposals += 1;
            run.oracle_calls += step.oracle_calls;
        }
    }
    Ok(run)
}

/// Exact transition matrix of one step, row `i` holding `P(i → ·)`.
///
/// The quantum kernel integrates over `u` exactly: the marked set only
/// changes at the distinct acceptance ratios, so `[0, 1)` splits into
/// intervals on which the success probability is a Grover closed form.
/// The corrected quantum kernel applies the outer MH test to those rows.
/// Shot-estimated ε̂ is not enumerable and is rejected.
pub fn transition_matrix(kind: StepKind, target: &TargetDistribution, kernel: &ProposalKernel) -> Result<DMatrix<f64>> {
    let dim = target.num_states();
    if dim > MAX_ENUMERATED_STATES {
        return Err(Error::Capacity {
            requested: target.num_qubits(),
            max: MAX_ENUMERATED_STATES.trailing_zeros() as usize,
        });
    }
    kernel.validate(target.num_qubits())?;
    let n = target.num_qubits();
    let mut p = DMatrix::zeros(dim, dim);
    match kind {
        StepKind::Classical => {
            for i in 0..dim {
                let support = kernel.support(i, n);
                let q = 1.0 / support.len() as f64;
                for &j in &support {
                    if j != i {
                        p[(i, j)] = q * target.acceptance(i, j);
                    }
                }
            }
        }
        StepKind::Quantum { mode, estimate } => {
            if estimate != MassEstimate::Exact {
                return Err(Error::InvalidArgument(
                    "shot-estimated quantum kernels cannot be enumerated".into(),
                ));
            }
            for i in 0..dim {
                for (j, t) in quantum_kernel_row(target, kernel, i) {
                    p[(i, j)] = t;
                }
            }
            if mode == QuantumMode::Corrected {
                let t = p.clone();
                let lw = target.log_weights();
                for i in 0..dim {
                    for j in 0..dim {
                        if i != j && t[(i, j)] > 0.0 {
                            let r = lw[j] - lw[i] + t[(j, i)].ln() - t[(i, j)].ln();
                            p[(i, j)] = t[(i, j)] * r.min(0.0).exp();
                        }
                    }
                }
            }
        }
    }
    for i in 0..dim {
        let off: f64 = (0..dim).filter(|&j| j != i).map(|j| p[(i, j)]).sum();
        p[(i, i)] = 1.0 - off;
    }
    Ok(p)
}

/// Off-diagonal entries `(j, P(i → j))` of one row of the uncorrected
/// quantum kernel, integrated exactly over `u`.
pub fn quantum_kernel_row(target: &TargetDistribution, kernel: &ProposalKernel, i: usize) -> Vec<(usize, f64)> {
    let support = kernel.support(i, target.num_qubits());
    let size = support.len() as f64;
    let mut cands: Vec<(f64, usize)> = support
        .iter()
        .filter(|&&j| j != i)
        .map(|&j| (target.acceptance(i, j), j))
        .filter(|(a, _)| *a > 0.0)
        .collect();
    // Descending acceptance: for u in [α_(m+1), α_(m)) the marked set is the
    // first m candidates (ties grouped).
    cands.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut probs = vec![0.0; cands.len()];
    let mut m = 0;
    while m < cands.len() {
        let mut end = m + 1;
        while end < cands.len() && cands[end].0 == cands[m].0 {
            end += 1;
        }
        let hi = cands[m].0;
        let lo = cands.get(end).map_or(0.0, |c| c.0);
        let width = hi - lo;
        let mass = end as f64 / size;
        let success = grover_success_probability(mass, grover_iterations(mass));
        let each = width * success / end as f64;
        for t in &mut probs[..end] {
            *t += each;
        }
        m = end;
    }
    cands.iter().map(|c| c.1).zip(probs).collect()
}

/// Single off-diagonal entry `P(i → j)` of the uncorrected quantum kernel.
pub fn quantum_kernel_entry(target: &TargetDistribution, kernel: &ProposalKernel, i: usize, j: usize) -> f64 {
    quantum_kernel_row(target, kernel, i)
        .into_iter()
        .find(|(k, _)| *k == j)
        .map_or(0.0, |(_, t)| t)
}

/// `max_{i,j} |π_i P_ij − π_j P_ji|` with π the normalized target.
pub fn check_detailed_balance(matrix: &DMatrix<f64>, target: &TargetDistribution) -> Result<f64> {
    let dim = target.num_states();
    if matrix.nrows() != dim || matrix.ncols() != dim {
        return Err(Error::Shape {
            context: "transition matrix",
            expected: dim,
            found: matrix.nrows(),
        });
    }
    let pi = target.probabilities();
    let mut worst: f64 = 0.0;
    for i in 0..dim {
        for j in i + 1..dim {
            worst = worst.max((pi[i] * matrix[(i, j)] - pi[j] * matrix[(j, i)]).abs());
        }
    }
    Ok(worst)
}

/// Stationary distribution of a row-stochastic matrix, from
/// `πᵀ(P − I) = 0` with `Σπ = 1` (one balance equation replaced by the
/// normalization).
pub fn stationary_distribution(matrix: &DMatrix<f64>) -> Result<Vec<f64>> {
    let dim = matrix.nrows();
    let mut a = matrix.transpose() - DMatrix::identity(dim, dim);
    let mut b = nalgebra::DVector::zeros(dim);
    for j in 0..dim {
        a[(dim - 1, j)] = 1.0;
    }
    b[dim - 1] = 1.0;
    let pi = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::InvalidArgument("chain has no unique stationary distribution".into()))?;
    Ok(pi.iter().copied().collect())
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(matrix: &DMatrix<f64>) -> f64 {
    matrix
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Every state reaches every other along positive-probability transitions.
pub fn is_irreducible(matrix: &DMatrix<f64>) -> bool {
    let dim = matrix.nrows();
    let reach = |transpose: bool| {
        let mut seen = vec![false; dim];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for j in 0..dim {
                let w = if transpose { matrix[(j, i)] } else { matrix[(i, j)] };
                if w > 0.0 && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(false) && reach(true)
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub ess: f64,
    pub autocorrelation_time: f64,
    pub acceptance_rate: f64,
}

/// Diagnostics of the state-index series.
pub fn diagnostics(run: &ChainRun) -> Result<ChainDiagnostics> {
    let series: Vec<f64> = run.states.iter().map(|&s| s as f64).collect();
    diagnostics_of(&series, run.acceptance_rate())
}

/// `τ = 1 + 2Σρ_k`, truncated at the first non-positive autocorrelation;
/// `ESS = n/τ`. A constant series has `τ = n`, `ESS = 1`.
pub fn diagnostics_of(series: &[f64], acceptance_rate: f64) -> Result<ChainDiagnostics> {
    let n = series.len();
    if n < 10 {
        return Err(Error::Precondition(format!("chain length {n} < 10")));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = series.iter().map(|x| x - mean).collect();
    let c0 = dev.iter().map(|d| d * d).sum::<f64>() / n as f64;
    let tau = if c0 <= 0.0 {
        n as f64
    } else {
        let mut tau = 1.0;
        for lag in 1..n {
            let c = dev[..n - lag].iter().zip(&dev[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
            let rho = c / c0;
            if rho <= 0.0 {
                break;
            }
            tau += 2.0 * rho;
        }
        tau.min(n as f64)
    };
    Ok(ChainDiagnostics {
        ess: n as f64 / tau,
        autocorrelation_time: tau,
        acceptance_rate,
    })
}
