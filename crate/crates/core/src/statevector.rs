//! Dense statevector simulation of an n-qubit register.
//!
//! Qubit 0 is the least-significant bit of a basis index. Amplitudes are
//! stored as a dense `Vec<Complex64>` of length 2^n, so registers are capped
//! at [`MAX_QUBITS`]. All gate kernels are elementwise or pairwise and may be
//! split across threads; every reduction (norms, inner products,
//! expectations) runs sequentially in index order so results are
//! bit-identical for any thread count.

use std::collections::BTreeMap;
use std::io::Write;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Largest supported register (2^24 amplitudes, 256 MiB).
pub const MAX_QUBITS: usize = 24;

/// Tolerance used to decide whether a state is normalized.
pub const NORM_TOLERANCE: f64 = 1e-10;

// Below this many amplitudes the rayon overhead dominates.
const PARALLEL_THRESHOLD: usize = 1 << 14;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

pub(crate) fn check_qubits(num_qubits: usize) -> Result<()> {
    if num_qubits == 0 || num_qubits > MAX_QUBITS {
        return Err(Error::Capacity {
            requested: num_qubits,
            max: MAX_QUBITS,
        });
    }
    Ok(())
}

/// Number of qubits needed to index `len` entries (at least one).
pub fn qubits_for(len: usize) -> usize {
    let mut n = 1;
    while (1usize << n) < len {
        n += 1;
    }
    n
}

/// Rotation axis for [`StateVector::apply_rotation`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

/// A real-valued observable that is diagonal in the computational basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalObservable {
    values: Vec<f64>,
}

impl DiagonalObservable {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let len = values.len();
        if len < 2 || !len.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "observable length {len} is not a power of two >= 2"
            )));
        }
        check_qubits(len.trailing_zeros() as usize)?;
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "observable value at index {k} is not finite"
            )));
        }
        Ok(Self { values })
    }

    pub fn from_fn(num_qubits: usize, f: impl Fn(usize) -> f64) -> Result<Self> {
        check_qubits(num_qubits)?;
        Self::new((0..1usize << num_qubits).map(f).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_qubits(&self) -> usize {
        self.values.len().trailing_zeros() as usize
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the smallest value; ties resolve to the lowest index.
    pub fn argmin(&self) -> usize {
        let mut best = 0;
        for (k, &v) in self.values.iter().enumerate() {
            if v < self.values[best] {
                best = k;
            }
        }
        best
    }

    /// Affine map of the values onto `[lo, hi]`. A constant table maps to `lo`.
    pub fn rescaled(&self, lo: f64, hi: f64) -> Self {
        let (min, max) = (self.min(), self.max());
        let span = max - min;
        let values = if span > 0.0 {
            self.values.iter().map(|v| lo + (hi - lo) * (v - min) / span).collect()
        } else {
            vec![lo; self.values.len()]
        };
        Self { values }
    }
}

/// Outcome histogram of repeated computational-basis measurements.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub shots: u64,
    pub counts: BTreeMap<usize, u64>,
    pub seed: u64,
}

impl MeasurementRecord {
    /// Outcome with the most counts; ties resolve to the lowest index.
    pub fn most_frequent(&self) -> Option<usize> {
        let mut best: Option<(usize, u64)> = None;
        for (&k, &c) in &self.counts {
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((k, c));
            }
        }
        best.map(|(k, _)| k)
    }

    pub fn frequency(&self, index: usize) -> f64 {
        self.counts.get(&index).copied().unwrap_or(0) as f64 / self.shots as f64
    }
}

/// Exact complex-amplitude state of an n-qubit register.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    num_qubits: usize,
    amplitudes: Vec<Complex64>,
}

impl StateVector {
    /// Uniform superposition, every amplitude 2^(-n/2).
    pub fn uniform(num_qubits: usize) -> Result<Self> {
        check_qubits(num_qubits)?;
        let dim = 1usize << num_qubits;
        let a = Complex64::new((dim as f64).recip().sqrt(), 0.0);
        Ok(Self {
            num_qubits,
            amplitudes: vec![a; dim],
        })
    }

    /// Computational basis state |index⟩.
    pub fn basis(num_qubits: usize, index: usize) -> Result<Self> {
        check_qubits(num_qubits)?;
        let dim = 1usize << num_qubits;
        if index >= dim {
            return Err(Error::BasisIndex { index, num_states: dim });
        }
        let mut amplitudes = vec![ZERO; dim];
        amplitudes[index] = Complex64::new(1.0, 0.0);
        Ok(Self { num_qubits, amplitudes })
    }

    /// Equal superposition over the first `support` basis states, zero elsewhere.
    pub fn uniform_prefix(num_qubits: usize, support: usize) -> Result<Self> {
        check_qubits(num_qubits)?;
        let dim = 1usize << num_qubits;
        if support == 0 || support > dim {
            return Err(Error::InvalidArgument(format!(
                "support {support} must lie in 1..={dim}"
            )));
        }
        let a = Complex64::new((support as f64).recip().sqrt(), 0.0);
        let mut amplitudes = vec![ZERO; dim];
        amplitudes[..support].fill(a);
        Ok(Self { num_qubits, amplitudes })
    }

    /// Wrap explicit amplitudes. The length must be a power of two and the
    /// vector must already be normalized.
    pub fn from_amplitudes(amplitudes: Vec<Complex64>) -> Result<Self> {
        let len = amplitudes.len();
        if len < 2 || !len.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "amplitude count {len} is not a power of two >= 2"
            )));
        }
        let num_qubits = len.trailing_zeros() as usize;
        check_qubits(num_qubits)?;
        let state = Self { num_qubits, amplitudes };
        let norm = state.norm_sqr();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "amplitudes are not normalized (norm² = {norm})"
            )));
        }
        Ok(state)
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    /// ⟨self|other⟩.
    pub fn inner(&self, other: &StateVector) -> Result<Complex64> {
        self.check_dim("inner product", other.dim())?;
        Ok(self
            .amplitudes
            .iter()
            .zip(&other.amplitudes)
            .fold(ZERO, |acc, (a, b)| acc + a.conj() * b))
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a.norm_sqr()).collect()
    }

    /// Total probability of the basis states selected by `marked`.
    pub fn marked_probability(&self, marked: impl Fn(usize) -> bool) -> f64 {
        self.amplitudes
            .iter()
            .enumerate()
            .filter(|(k, _)| marked(*k))
            .map(|(_, a)| a.norm_sqr())
            .sum()
    }

    /// Σ_k |a_k|² · values[k].
    pub fn expectation_diagonal(&self, observable: &DiagonalObservable) -> Result<f64> {
        self.check_dim("expectation", observable.len())?;
        Ok(self
            .amplitudes
            .iter()
            .zip(observable.values())
            .map(|(a, v)| a.norm_sqr() * v)
            .sum())
    }

    /// Multiply amplitude k by e^{-i·gamma·values[k]}.
    pub fn apply_diagonal_phase(&mut self, observable: &DiagonalObservable, gamma: f64) -> Result<()> {
        self.check_dim("diagonal phase", observable.len())?;
        if gamma == 0.0 {
            return Ok(());
        }
        let values = observable.values();
        self.for_each_indexed(|k, a| *a *= Complex64::from_polar(1.0, -gamma * values[k]));
        Ok(())
    }

    /// e^{-i·beta·X} on every qubit.
    pub fn apply_mixer(&mut self, beta: f64) {
        if beta == 0.0 {
            return;
        }
        let (s, c) = beta.sin_cos();
        let kernel = [
            [Complex64::new(c, 0.0), Complex64::new(0.0, -s)],
            [Complex64::new(0.0, -s), Complex64::new(c, 0.0)],
        ];
        for q in 0..self.num_qubits {
            self.apply_single(q, &kernel);
        }
    }

    /// Standard rotation R_axis(angle) = exp(-i·angle/2·σ_axis) on one qubit.
    pub fn apply_rotation(&mut self, qubit: usize, axis: Axis, angle: f64) -> Result<()> {
        self.check_qubit(qubit)?;
        let (s, c) = (angle / 2.0).sin_cos();
        let kernel = match axis {
            Axis::X => [
                [Complex64::new(c, 0.0), Complex64::new(0.0, -s)],
                [Complex64::new(0.0, -s), Complex64::new(c, 0.0)],
            ],
            Axis::Y => [
                [Complex64::new(c, 0.0), Complex64::new(-s, 0.0)],
                [Complex64::new(s, 0.0), Complex64::new(c, 0.0)],
            ],
            Axis::Z => [[Complex64::new(c, -s), ZERO], [ZERO, Complex64::new(c, s)]],
        };
        self.apply_single(qubit, &kernel);
        Ok(())
    }

    /// Controlled-Z: negate amplitudes whose basis index has both bits set.
    pub fn apply_cz(&mut self, qubit_a: usize, qubit_b: usize) -> Result<()> {
        self.check_qubit(qubit_a)?;
        self.check_qubit(qubit_b)?;
        if qubit_a == qubit_b {
            return Err(Error::InvalidArgument(format!(
                "controlled-Z needs distinct qubits, got {qubit_a} twice"
            )));
        }
        let mask = (1usize << qubit_a) | (1usize << qubit_b);
        self.for_each_indexed(|k, a| {
            if k & mask == mask {
                *a = -*a;
            }
        });
        Ok(())
    }

    /// Negate every amplitude whose index satisfies `marked`.
    pub fn oracle_phase_flip(&mut self, marked: impl Fn(usize) -> bool + Sync) {
        self.for_each_indexed(|k, a| {
            if marked(k) {
                *a = -*a;
            }
        });
    }

    /// Apply 2|r⟩⟨r| − I about the normalized reference state r.
    pub fn grover_reflection(&mut self, reference: &StateVector) -> Result<()> {
        self.check_dim("grover reflection", reference.dim())?;
        let rn = reference.norm_sqr();
        if (rn - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "reference state is not normalized (norm² = {rn})"
            )));
        }
        let overlap = reference.inner(self)? * 2.0;
        let r = &reference.amplitudes;
        self.for_each_indexed(|k, a| *a = overlap * r[k] - *a);
        Ok(())
    }

    /// `iterations` rounds of oracle flip followed by reflection about the
    /// input state.
    pub fn amplitude_amplify(&mut self, marked: impl Fn(usize) -> bool + Sync, iterations: usize) {
        if iterations == 0 {
            return;
        }
        let reference = self.clone();
        for _ in 0..iterations {
            self.oracle_phase_flip(&marked);
            self.grover_reflection(&reference)
                .expect("reference shares the dimension and is normalized");
        }
    }

    /// Draw `shots` outcomes in order by inverse-CDF sampling.
    pub fn sample_indices(&self, shots: u64, seed: u64) -> Result<Vec<usize>> {
        if shots == 0 {
            return Err(Error::Precondition("shots must be >= 1".into()));
        }
        let mut cdf = Vec::with_capacity(self.dim());
        let mut acc = 0.0;
        for a in &self.amplitudes {
            acc += a.norm_sqr();
            cdf.push(acc);
        }
        let total = acc;
        let last = self.dim() - 1;
        let mut rng = rng_from_seed(seed);
        Ok((0..shots)
            .map(|_| {
                let u = rng.random::<f64>() * total;
                cdf.partition_point(|&c| c <= u).min(last)
            })
            .collect())
    }

    /// Repeated measurement in the computational basis.
    pub fn measure(&self, shots: u64, seed: u64) -> Result<MeasurementRecord> {
        let mut counts = BTreeMap::new();
        for k in self.sample_indices(shots, seed)? {
            *counts.entry(k).or_insert(0) += 1;
        }
        Ok(MeasurementRecord { shots, counts, seed })
    }

    /// Dump `index,re,im` rows.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "index,re,im")?;
        for (k, a) in self.amplitudes.iter().enumerate() {
            writeln!(out, "{k},{:e},{:e}", a.re, a.im)?;
        }
        Ok(())
    }

    pub(crate) fn amplitudes_mut(&mut self) -> &mut [Complex64] {
        &mut self.amplitudes
    }

    /// H_M|ψ⟩ with H_M = Σ_j X_j (not unitary; used for derivatives).
    pub(crate) fn mixer_generator_applied(&self) -> Vec<Complex64> {
        let n = self.num_qubits;
        let a = &self.amplitudes;
        let f = |k: usize| (0..n).fold(ZERO, |acc, q| acc + a[k ^ (1 << q)]);
        if self.dim() >= PARALLEL_THRESHOLD {
            (0..self.dim()).into_par_iter().map(f).collect()
        } else {
            (0..self.dim()).map(f).collect()
        }
    }

    fn check_dim(&self, context: &'static str, found: usize) -> Result<()> {
        if found != self.dim() {
            return Err(Error::Shape {
                context,
                expected: self.dim(),
                found,
            });
        }
        Ok(())
    }

    fn check_qubit(&self, qubit: usize) -> Result<()> {
        if qubit >= self.num_qubits {
            return Err(Error::QubitIndex {
                qubit,
                num_qubits: self.num_qubits,
            });
        }
        Ok(())
    }

    fn for_each_indexed(&mut self, f: impl Fn(usize, &mut Complex64) + Sync) {
        if self.dim() >= PARALLEL_THRESHOLD {
            self.amplitudes.par_iter_mut().enumerate().for_each(|(k, a)| f(k, a));
        } else {
            self.amplitudes.iter_mut().enumerate().for_each(|(k, a)| f(k, a));
        }
    }

    fn apply_single(&mut self, qubit: usize, m: &[[Complex64; 2]; 2]) {
        let stride = 1usize << qubit;
        let kernel = |chunk: &mut [Complex64]| {
            let (lo, hi) = chunk.split_at_mut(stride);
            for (x, y) in lo.iter_mut().zip(hi.iter_mut()) {
                let (a, b) = (*x, *y);
                *x = m[0][0] * a + m[0][1] * b;
                *y = m[1][0] * a + m[1][1] * b;
            }
        };
        if self.dim() >= PARALLEL_THRESHOLD {
            self.amplitudes.par_chunks_mut(2 * stride).for_each(kernel);
        } else {
            self.amplitudes.chunks_mut(2 * stride).for_each(kernel);
        }
    }
}

/// Closed-form marked-state probability after `iterations` Grover rounds
/// when the initial marked mass is `marked_mass`.
pub fn grover_success_probability(marked_mass: f64, iterations: usize) -> f64 {
    let theta = marked_mass.clamp(0.0, 1.0).sqrt().asin();
    ((2 * iterations + 1) as f64 * theta).sin().powi(2)
}
