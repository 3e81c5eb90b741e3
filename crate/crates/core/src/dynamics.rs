//! Toy forecast models, observation operators, Gaussian covariances and
//! synthetic twin experiments.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourdvar::{AssimilationProblem, Observation};
use crate::linalg::{from_rows, serde_matrix, serde_vectors, to_rows};
use crate::rng::{rng_stream, SimRng};

fn default_sigma() -> f64 {
    10.0
}
fn default_rho() -> f64 {
    28.0
}
fn default_beta() -> f64 {
    8.0 / 3.0
}
fn default_substeps() -> usize {
    1
}

/// Forecast model M advancing a state by one assimilation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DynamicsModel {
    /// x ↦ A·x.
    Linear {
        #[serde(with = "serde_matrix")]
        matrix: DMatrix<f64>,
    },
    /// Lorenz-63 integrated with classic RK4, `substeps` steps of `dt`.
    Lorenz63 {
        #[serde(default = "default_sigma")]
        sigma: f64,
        #[serde(default = "default_rho")]
        rho: f64,
        #[serde(default = "default_beta")]
        beta: f64,
        dt: f64,
        #[serde(default = "default_substeps")]
        substeps: usize,
    },
}

impl DynamicsModel {
    pub fn linear(matrix: DMatrix<f64>) -> Self {
        DynamicsModel::Linear { matrix }
    }

    /// Lorenz-63 with σ=10, ρ=28, β=8/3.
    pub fn lorenz63(dt: f64, substeps: usize) -> Self {
        DynamicsModel::Lorenz63 {
            sigma: default_sigma(),
            rho: default_rho(),
            beta: default_beta(),
            dt,
            substeps,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DynamicsModel::Linear { matrix } => matrix.nrows(),
            DynamicsModel::Lorenz63 { .. } => 3,
        }
    }

    pub fn linear_matrix(&self) -> Option<&DMatrix<f64>> {
        match self {
            DynamicsModel::Linear { matrix } => Some(matrix),
            DynamicsModel::Lorenz63 { .. } => None,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        match self {
            DynamicsModel::Linear { matrix } => {
                if !matrix.is_square() {
                    v.push(format!(
                        "model: linear matrix must be square (got {}x{})",
                        matrix.nrows(),
                        matrix.ncols()
                    ));
                }
                if matrix.iter().any(|x| !x.is_finite()) {
                    v.push("model: linear matrix has non-finite entries".into());
                }
            }
            DynamicsModel::Lorenz63 {
                sigma,
                rho,
                beta,
                dt,
                substeps,
            } => {
                if !(dt.is_finite() && *dt > 0.0) {
                    v.push(format!("model: dt must be > 0 (got {dt})"));
                }
                if *substeps == 0 {
                    v.push("model: substeps must be >= 1".into());
                }
                if ![sigma, rho, beta].iter().all(|p| p.is_finite()) {
                    v.push("model: Lorenz-63 parameters must be finite".into());
                }
            }
        }
        v
    }

    /// Advance one assimilation step.
    pub fn propagate(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Shape {
                context: "propagate",
                expected: self.dim(),
                found: x.len(),
            });
        }
        let out = match self {
            DynamicsModel::Linear { matrix } => matrix * x,
            DynamicsModel::Lorenz63 {
                sigma,
                rho,
                beta,
                dt,
                substeps,
            } => {
                let f = |s: &DVector<f64>| lorenz63_field(s, *sigma, *rho, *beta);
                let mut s = x.clone();
                for _ in 0..*substeps {
                    s = rk4_step(&f, &s, *dt);
                }
                s
            }
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: 1 });
        }
        Ok(out)
    }

    /// States x_0 … x_{steps-1} starting from `x0`.
    pub fn trajectory(&self, x0: &DVector<f64>, steps: usize) -> Result<Vec<DVector<f64>>> {
        let mut out = Vec::with_capacity(steps);
        let mut x = x0.clone();
        for k in 0..steps {
            if k > 0 {
                x = self.propagate(&x).map_err(|e| match e {
                    Error::Divergence { .. } => Error::Divergence { step: k },
                    other => other,
                })?;
            }
            out.push(x.clone());
        }
        Ok(out)
    }
}

fn lorenz63_field(s: &DVector<f64>, sigma: f64, rho: f64, beta: f64) -> DVector<f64> {
    let (x, y, z) = (s[0], s[1], s[2]);
    DVector::from_vec(vec![sigma * (y - x), x * (rho - z) - y, x * y - beta * z])
}

fn rk4_step(f: &impl Fn(&DVector<f64>) -> DVector<f64>, s: &DVector<f64>, dt: f64) -> DVector<f64> {
    let k1 = f(s);
    let k2 = f(&(s + &k1 * (dt / 2.0)));
    let k3 = f(&(s + &k2 * (dt / 2.0)));
    let k4 = f(&(s + &k3 * dt));
    s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Linear observation operator H (p×d).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObservationOperator {
    #[serde(with = "serde_matrix")]
    matrix: DMatrix<f64>,
}

impl ObservationOperator {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "observation operator needs >= 1 row and finite entries".into(),
            ));
        }
        Ok(Self { matrix })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: DMatrix::identity(dim, dim),
        }
    }

    /// Observe the listed coordinates of a `dim`-dimensional state.
    pub fn select(dim: usize, coords: &[usize]) -> Result<Self> {
        if let Some(&c) = coords.iter().find(|&&c| c >= dim) {
            return Err(Error::InvalidArgument(format!(
                "coordinate {c} out of range for dimension {dim}"
            )));
        }
        Self::new(DMatrix::from_fn(coords.len(), dim, |i, j| {
            if coords[i] == j {
                1.0
            } else {
                0.0
            }
        }))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn obs_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.state_dim() {
            return Err(Error::Shape {
                context: "observation operator",
                expected: self.state_dim(),
                found: x.len(),
            });
        }
        Ok(&self.matrix * x)
    }
}

/// Symmetric positive-definite covariance with a cached Cholesky factor.
///
/// The all-zero matrix is also accepted and marks "no noise": sampling
/// returns zeros, while solves against it fail.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Covariance {
    matrix: DMatrix<f64>,
    factor: Option<Cholesky<f64, Dyn>>,
}

impl PartialEq for Covariance {
    fn eq(&self, other: &Self) -> bool {
        self.matrix == other.matrix
    }
}

impl TryFrom<Vec<Vec<f64>>> for Covariance {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Covariance::new(from_rows(&rows)?)
    }
}

impl From<Covariance> for Vec<Vec<f64>> {
    fn from(c: Covariance) -> Self {
        to_rows(&c.matrix)
    }
}

impl Covariance {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::NotPositiveDefinite(format!(
                "{}x{} matrix is not square",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotPositiveDefinite("non-finite entries".into()));
        }
        if matrix.iter().all(|&v| v == 0.0) {
            return Ok(Self { matrix, factor: None });
        }
        let n = matrix.nrows();
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (matrix[(i, j)], matrix[(j, i)]);
                if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::NotPositiveDefinite(format!(
                        "entries ({i},{j}) and ({j},{i}) differ"
                    )));
                }
            }
        }
        let factor = Cholesky::new(matrix.clone())
            .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorization failed".into()))?;
        Ok(Self {
            matrix,
            factor: Some(factor),
        })
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            matrix: DMatrix::zeros(dim, dim),
            factor: None,
        }
    }

    pub fn scalar(dim: usize, variance: f64) -> Result<Self> {
        Self::new(DMatrix::identity(dim, dim) * variance)
    }

    pub fn diagonal(variances: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(variances)))
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn is_zero(&self) -> bool {
        self.factor.is_none()
    }

    /// c·Σ; a zero factor gives the zero covariance.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if c == 0.0 || self.is_zero() {
            return Ok(Self::zero(self.dim()));
        }
        Self::new(&self.matrix * c)
    }

    /// One zero-mean Gaussian draw L·z.
    pub fn sample(&self, rng: &mut SimRng) -> DVector<f64> {
        let n = self.dim();
        match &self.factor {
            None => DVector::zeros(n),
            Some(ch) => {
                let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                ch.l() * z
            }
        }
    }

    /// Σ⁻¹·v via the cached factor.
    pub fn solve(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.dim() {
            return Err(Error::Shape {
                context: "covariance solve",
                expected: self.dim(),
                found: v.len(),
            });
        }
        match &self.factor {
            Some(ch) => Ok(ch.solve(v)),
            None => Err(Error::NotPositiveDefinite("cannot invert the zero covariance".into())),
        }
    }

    /// vᵀ Σ⁻¹ v.
    pub fn mahalanobis_sq(&self, v: &DVector<f64>) -> Result<f64> {
        Ok(v.dot(&self.solve(v)?))
    }
}

/// Noisy observation H·x + ε with ε ~ N(0, noise).
pub fn observe(op: &ObservationOperator, x: &DVector<f64>, noise: &Covariance, seed: u64) -> Result<DVector<f64>> {
    observe_with(op, x, noise, &mut rng_stream(seed, 0))
}

pub fn observe_with(
    op: &ObservationOperator,
    x: &DVector<f64>,
    noise: &Covariance,
    rng: &mut SimRng,
) -> Result<DVector<f64>> {
    if noise.dim() != op.obs_dim() {
        return Err(Error::Shape {
            context: "observation noise",
            expected: op.obs_dim(),
            found: noise.dim(),
        });
    }
    Ok(op.apply(x)? + noise.sample(rng))
}

fn one() -> f64 {
    1.0
}

/// Everything needed to synthesize a twin experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwinConfig {
    pub model: DynamicsModel,
    /// Number of assimilation times; one observation is taken at each.
    pub window: usize,
    /// Mean of the truth initial state.
    pub truth_center: Vec<f64>,
    /// Spread of the truth initial state around `truth_center`; absent means
    /// the truth starts exactly at the center.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_cov: Option<Covariance>,
    pub background_cov: Covariance,
    pub obs_operator: ObservationOperator,
    /// Observation-error covariance R; all zeros means exact observations.
    pub obs_cov: Covariance,
    /// Multiplier on the background perturbation drawn from `background_cov`.
    #[serde(default = "one")]
    pub background_perturbation: f64,
    /// Multiplier on the observation noise drawn from `obs_cov`.
    #[serde(default = "one")]
    pub obs_perturbation: f64,
    /// Model-error covariance Q used by the particle filters' prediction step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_error_cov: Option<Covariance>,
}

impl TwinConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.model.violations();
        let d = self.model.dim();
        if self.window == 0 {
            v.push("twin: window must be >= 1".into());
        }
        if self.truth_center.len() != d {
            v.push(format!(
                "twin: truth_center has {} entries, model dimension is {d}",
                self.truth_center.len()
            ));
        }
        if let Some(c) = &self.truth_cov {
            if c.dim() != d {
                v.push(format!("twin: truth_cov must be {d}x{d}"));
            }
        }
        if self.background_cov.dim() != d || self.background_cov.is_zero() {
            v.push(format!(
                "twin: background_cov must be a {d}x{d} positive-definite matrix"
            ));
        }
        if self.obs_operator.state_dim() != d {
            v.push(format!(
                "twin: obs_operator must have {d} columns (got {})",
                self.obs_operator.state_dim()
            ));
        }
        let p = self.obs_operator.obs_dim();
        // A zero obs_cov describes exact observations; the variational
        // methods reject it later, the filters treat it as an indicator.
        if self.obs_cov.dim() != p {
            v.push(format!("twin: obs_cov must be {p}x{p}"));
        }
        if let Some(q) = &self.model_error_cov {
            if q.dim() != d {
                v.push(format!("twin: model_error_cov must be {d}x{d}"));
            }
        }
        for (name, s) in [
            ("background_perturbation", self.background_perturbation),
            ("obs_perturbation", self.obs_perturbation),
        ] {
            if !(s.is_finite() && s >= 0.0) {
                v.push(format!("twin: {name} must be finite and >= 0"));
            }
        }
        v
    }
}

/// Synthetic truth, its observations, and the assimilation problem built from them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwinExperiment {
    pub seed: u64,
    pub config: TwinConfig,
    #[serde(with = "serde_vectors")]
    pub truth: Vec<DVector<f64>>,
    pub problem: AssimilationProblem,
}

impl TwinExperiment {
    pub fn observations(&self) -> &[Observation] {
        &self.problem.observations
    }

    /// Model run from the background state, the no-assimilation comparator.
    pub fn free_run(&self) -> Result<Vec<DVector<f64>>> {
        self.problem
            .model
            .trajectory(&self.problem.background, self.problem.window)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Draw a truth run, observe it, and perturb the background.
pub fn generate_twin(config: &TwinConfig, seed: u64) -> Result<TwinExperiment> {
    let violations = config.violations();
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let mut truth_rng = rng_stream(seed, 0);
    let mut background_rng = rng_stream(seed, 1);
    let mut obs_rng = rng_stream(seed, 2);

    let mut x0 = DVector::from_column_slice(&config.truth_center);
    if let Some(c) = &config.truth_cov {
        x0 += c.sample(&mut truth_rng);
    }
    let truth = config.model.trajectory(&x0, config.window)?;

    let obs_noise = config.obs_cov.scaled(config.obs_perturbation.powi(2))?;
    let observations = truth
        .iter()
        .enumerate()
        .map(|(k, x)| {
            Ok(Observation {
                time: k,
                value: observe_with(&config.obs_operator, x, &obs_noise, &mut obs_rng)?,
                operator: config.obs_operator.clone(),
                cov: config.obs_cov.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let background = &x0 + config.background_cov.sample(&mut background_rng) * config.background_perturbation;

    let problem = AssimilationProblem {
        background,
        background_cov: config.background_cov.clone(),
        observations,
        model: config.model.clone(),
        window: config.window,
        model_error_cov: config.model_error_cov.clone(),
    };
    Ok(TwinExperiment {
        seed,
        config: config.clone(),
        truth,
        problem,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;

    fn lorenz_twin(seed_noise: f64) -> TwinConfig {
        TwinConfig {
            model: DynamicsModel::lorenz63(0.01, 5),
            window: 6,
            truth_center: vec![1.0, 1.0, 20.0],
            truth_cov: Some(Covariance::scalar(3, 4.0).unwrap()),
            background_cov: Covariance::scalar(3, 1.0).unwrap(),
            obs_operator: ObservationOperator::identity(3),
            obs_cov: Covariance::scalar(3, 0.5).unwrap(),
            background_perturbation: seed_noise,
            obs_perturbation: seed_noise,
            model_error_cov: None,
        }
    }

    #[test]
    fn identity_and_fixed_point() {
        let m = DynamicsModel::linear(DMatrix::identity(3, 3));
        let x = DVector::from_vec(vec![1.0, -2.0, 3.5]);
        assert_eq!(m.propagate(&x).unwrap(), x);
        let l = DynamicsModel::lorenz63(0.01, 10);
        let origin = DVector::zeros(3);
        assert_eq!(l.propagate(&origin).unwrap(), origin);
        assert!(matches!(l.propagate(&DVector::zeros(2)), Err(Error::Shape { .. })));
    }

    // Independent integrator: explicit RK4 over plain arrays.
    fn oracle_rk4(mut s: [f64; 3], dt: f64, steps: usize) -> [f64; 3] {
        let f = |s: [f64; 3]| {
            [
                10.0 * (s[1] - s[0]),
                s[0] * (28.0 - s[2]) - s[1],
                s[0] * s[1] - 8.0 / 3.0 * s[2],
            ]
        };
        let add = |a: [f64; 3], b: [f64; 3], h: f64| [a[0] + h * b[0], a[1] + h * b[1], a[2] + h * b[2]];
        for _ in 0..steps {
            let k1 = f(s);
            let k2 = f(add(s, k1, dt / 2.0));
            let k3 = f(add(s, k2, dt / 2.0));
            let k4 = f(add(s, k3, dt));
            for i in 0..3 {
                s[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        s
    }

    #[test]
    fn rk4_step_halving_error_is_fifth_order() {
        let start = [1.0, 2.0, 20.0];
        let err = |dt: f64| {
            let one = DynamicsModel::lorenz63(dt, 1)
                .propagate(&DVector::from_column_slice(&start))
                .unwrap();
            let two = oracle_rk4(start, dt / 2.0, 2);
            (0..3).map(|i| (one[i] - two[i]).abs()).fold(0.0, f64::max)
        };
        let (e1, e2) = (err(0.01), err(0.005));
        assert!(e1 < 1e4 * 0.01f64.powi(5), "e1 {e1}");
        let ratio = e1 / e2;
        assert!((16.0..64.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn observation_examples() {
        let x = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let id = ObservationOperator::identity(3);
        assert_eq!(observe(&id, &x, &Covariance::zero(3), 1).unwrap(), x);
        let sel = ObservationOperator::select(3, &[2, 0]).unwrap();
        assert_eq!(
            observe(&sel, &x, &Covariance::zero(2), 1).unwrap(),
            DVector::from_vec(vec![2.0, 0.3])
        );
        assert!(observe(&sel, &x, &Covariance::zero(3), 1).is_err());
    }

    #[test]
    fn noise_sample_covariance_matches() {
        let target = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let cov = Covariance::new(target.clone()).unwrap();
        let mut rng = rng_from_seed(42);
        let n = 100_000;
        let mut acc = DMatrix::<f64>::zeros(2, 2);
        for _ in 0..n {
            let e = cov.sample(&mut rng);
            acc += &e * e.transpose();
        }
        acc /= n as f64;
        for i in 0..2 {
            for j in 0..2 {
                let rel = (acc[(i, j)] - target[(i, j)]).abs() / target[(i, j)].abs();
                assert!(rel < 0.05, "entry ({i},{j}) off by {rel}");
            }
        }
    }

    #[test]
    fn covariance_validation() {
        assert!(Covariance::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0])).is_err());
        assert!(Covariance::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_err());
        assert!(Covariance::zero(2).is_zero());
        assert!(Covariance::zero(2).solve(&DVector::zeros(2)).is_err());
        let c: Covariance = serde_json::from_str("[[0.0, 0.0], [0.0, 0.0]]").unwrap();
        assert!(c.is_zero());
        assert!(serde_json::from_str::<Covariance>("[[1.0, 3.0], [3.0, 1.0]]").is_err());
    }

    #[test]
    fn twin_without_noise_observes_truth() {
        let t = generate_twin(&lorenz_twin(0.0), 9).unwrap();
        for (obs, x) in t.observations().iter().zip(&t.truth) {
            assert_eq!(&obs.value, x);
        }
        assert_eq!(t.problem.background, t.truth[0]);
        assert_eq!(t.problem.cost(&t.truth[0]).unwrap(), 0.0);
    }

    #[test]
    fn twin_is_seed_deterministic_and_serializable() {
        let cfg = lorenz_twin(1.0);
        let a = generate_twin(&cfg, 5).unwrap();
        assert_eq!(a, generate_twin(&cfg, 5).unwrap());
        assert_ne!(a.truth[0], generate_twin(&cfg, 6).unwrap().truth[0]);
        let back = TwinExperiment::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(back, a);
    }

    proptest! {
        #[test]
        fn linear_propagation_is_linear(
            entries in proptest::collection::vec(-2.0f64..2.0, 9),
            x in proptest::collection::vec(-5.0f64..5.0, 3),
            y in proptest::collection::vec(-5.0f64..5.0, 3),
            a in -3.0f64..3.0, b in -3.0f64..3.0,
        ) {
            let m = DynamicsModel::linear(DMatrix::from_row_slice(3, 3, &entries));
            let (x, y) = (DVector::from_vec(x), DVector::from_vec(y));
            let lhs = m.propagate(&(&x * a + &y * b)).unwrap();
            let rhs = m.propagate(&x).unwrap() * a + m.propagate(&y).unwrap() * b;
            prop_assert!((lhs - rhs).amax() < 1e-12);
        }
    }
}
