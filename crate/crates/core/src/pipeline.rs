//! Experiment configuration, the cycled hybrid filter (QVPF), method
//! comparison, scaling sweeps and report files.
//!
//! Every run is a twin experiment: the truth, observations and background
//! come from `generate_twin` with a seed derived from the config seed, so
//! methods sharing a seed see identical data.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{generate_twin, Covariance, DynamicsModel, ObservationOperator, TwinConfig, TwinExperiment};
use crate::encoding::EncodingScheme;
use crate::error::{Error, Result};
use crate::fourdvar::{AssimilationProblem, Observation};
use crate::linalg::{linear_fit, rmse, weighted_mean};
use crate::linear_gaussian::kalman_filter;
use crate::mcmc::{
    diagnostics, qmcmc_step, rejection_step, run_chain, MassEstimate, ProposalKernel, QuantumMode, StepKind,
    TargetDistribution,
};
use crate::particle_filter::{
    normalize_log_weights, prior_ensemble, resample, run_pf, ParticleEnsemble, PfConfig, PfStep, Resampler,
};
use crate::qaoa::{evolve, optimize, QaoaConfig, QaoaCost, QaoaParams};
use crate::rng::{derive_seed, derive_seed_path, label, rng_from_seed};
use crate::statevector::DiagonalObservable;

/// Code-version string embedded in every report.
pub const VERSION: &str = concat!("qvpf-core ", env!("CARGO_PKG_VERSION"));
/// Largest tabulated grid, in qubits (d·m), for the grid methods.
pub const MAX_GRID_QUBITS: usize = 16;

/// Box of grid points around the background, on increments `x − xb`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub bits_per_dim: usize,
    /// Half-width in background standard deviations.
    #[serde(default = "defaults::half_width")]
    pub half_width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaoaMethod {
    pub grid: GridConfig,
    #[serde(default = "defaults::depth")]
    pub depth: usize,
    #[serde(default)]
    pub qaoa: QaoaConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QmcmcMethod {
    pub grid: GridConfig,
    #[serde(default = "defaults::kernel")]
    pub kernel: ProposalKernel,
    #[serde(default = "defaults::step")]
    pub step: StepKind,
    pub steps: usize,
    #[serde(default)]
    pub burn_in: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QvpfMethod {
    pub grid: GridConfig,
    pub particles: usize,
    /// Assimilation times per cycle; absent means one cycle over the window.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycle_length: Option<usize>,
    #[serde(default = "defaults::depth")]
    pub depth: usize,
    #[serde(default)]
    pub qaoa: QaoaConfig,
    #[serde(default = "defaults::kernel")]
    pub kernel: ProposalKernel,
    #[serde(default = "defaults::step")]
    pub step: StepKind,
    /// QMCMC moves per particle and cycle.
    #[serde(default = "defaults::chain_steps")]
    pub chain_steps: usize,
    #[serde(default = "defaults::resampler")]
    pub resampler: Resampler,
    #[serde(default = "defaults::threshold")]
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MethodConfig {
    Fourdvar,
    Pf(PfConfig),
    Qaoa(QaoaMethod),
    Qmcmc(QmcmcMethod),
    Qvpf(QvpfMethod),
}

impl MethodConfig {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Fourdvar => "fourdvar",
            Self::Pf(_) => "pf",
            Self::Qaoa(_) => "qaoa",
            Self::Qmcmc(_) => "qmcmc",
            Self::Qvpf(_) => "qvpf",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub twin: TwinConfig,
    pub method: MethodConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Wall-clock timings make reports differ between runs, so they are off
    /// unless asked for.
    #[serde(default)]
    pub timings: bool,
}

mod defaults {
    use super::*;

    pub fn half_width() -> f64 {
        3.0
    }
    pub fn depth() -> usize {
        2
    }
    pub fn kernel() -> ProposalKernel {
        ProposalKernel::BitflipNeighborhood { flip_count: 1 }
    }
    pub fn step() -> StepKind {
        StepKind::Quantum {
            mode: QuantumMode::Corrected,
            estimate: MassEstimate::Exact,
        }
    }
    pub fn chain_steps() -> usize {
        10
    }
    pub fn resampler() -> Resampler {
        Resampler::Quantum
    }
    pub fn threshold() -> f64 {
        0.5
    }
}

fn grid_violations(grid: &GridConfig, d: usize, v: &mut Vec<String>) {
    if grid.bits_per_dim == 0 {
        v.push("method.grid.bits_per_dim must be >= 1".into());
    } else if d * grid.bits_per_dim > MAX_GRID_QUBITS {
        v.push(format!(
            "method.grid: d*bits_per_dim = {} exceeds {MAX_GRID_QUBITS}",
            d * grid.bits_per_dim
        ));
    }
    if !(grid.half_width > 0.0 && grid.half_width.is_finite()) {
        v.push(format!(
            "method.grid.half_width must be positive, got {}",
            grid.half_width
        ));
    }
}

fn kernel_violations(kernel: &ProposalKernel, qubits: usize, v: &mut Vec<String>) {
    if qubits > 0 {
        if let Err(e) = kernel.validate(qubits) {
            v.push(format!("method.kernel: {e}"));
        }
    }
}

fn step_violations(step: &StepKind, v: &mut Vec<String>) {
    if let StepKind::Quantum {
        estimate: MassEstimate::Shots { shots: 0 },
        ..
    } = step
    {
        v.push("method.step.estimate.shots must be >= 1".into());
    }
}

impl PipelineConfig {
    /// Every problem with the config, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.twin.violations();
        let d = self.twin.model.dim();
        let window = self.twin.window;
        let qubits = |g: &GridConfig| d * g.bits_per_dim;
        match &self.method {
            MethodConfig::Fourdvar => {
                if self.twin.obs_cov.is_zero() {
                    v.push("method fourdvar needs a positive-definite twin.obs_cov".into());
                }
            }
            MethodConfig::Pf(pf) => v.extend(pf.violations().into_iter().map(|s| format!("method.{s}"))),
            MethodConfig::Qaoa(m) => {
                grid_violations(&m.grid, d, &mut v);
                if m.depth == 0 {
                    v.push("method.depth must be >= 1".into());
                }
                v.extend(m.qaoa.violations().into_iter().map(|s| format!("method.qaoa: {s}")));
            }
            MethodConfig::Qmcmc(m) => {
                grid_violations(&m.grid, d, &mut v);
                kernel_violations(&m.kernel, qubits(&m.grid), &mut v);
                step_violations(&m.step, &mut v);
                if m.steps <= m.burn_in {
                    v.push(format!(
                        "method.steps ({}) must exceed burn_in ({})",
                        m.steps, m.burn_in
                    ));
                }
            }
            MethodConfig::Qvpf(m) => {
                grid_violations(&m.grid, d, &mut v);
                kernel_violations(&m.kernel, qubits(&m.grid), &mut v);
                step_violations(&m.step, &mut v);
                if m.particles < 2 {
                    v.push(format!("method.particles must be >= 2, got {}", m.particles));
                }
                if m.depth == 0 {
                    v.push("method.depth must be >= 1".into());
                }
                if let Some(l) = m.cycle_length {
                    if l == 0 || l > window {
                        v.push(format!("method.cycle_length must lie in 1..={window}, got {l}"));
                    }
                }
                if !(0.0..=1.0).contains(&m.threshold) {
                    v.push(format!("method.threshold must lie in [0, 1], got {}", m.threshold));
                }
                v.extend(m.qaoa.violations().into_iter().map(|s| format!("method.qaoa: {s}")));
                let probe = PfConfig::new(m.particles.max(2), m.resampler.clone());
                v.extend(probe.violations().into_iter().map(|s| format!("method.{s}")));
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

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Parse and validate a config. Parse errors carry line and column.
pub fn parse_config(text: &str) -> Result<PipelineConfig> {
    let config: PipelineConfig = serde_json::from_str(text)?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Twin experiment shared by every method run with this config's seed.
pub fn twin_for(config: &PipelineConfig) -> Result<TwinExperiment> {
    generate_twin(&config.twin, derive_seed(config.seed, label::TWIN))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourdvarDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub diverged: bool,
    pub cost_trace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaoaDiagnostics {
    pub cycle: usize,
    pub params: QaoaParams,
    pub expectation: f64,
    pub evaluations: usize,
    pub trace: Vec<(usize, f64)>,
    /// Grid index of the lowest tabulated cost and its probability under
    /// the optimized state.
    pub argmin: usize,
    pub argmin_probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub acceptance_rate: f64,
    pub proposals: u64,
    pub oracle_calls: u64,
    pub ess: f64,
    pub autocorrelation_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleDiagnostics {
    pub cycle: usize,
    pub start: usize,
    pub length: usize,
    /// ESS of the importance weights after the QMCMC moves.
    pub ess: f64,
    /// Every importance weight vanished and the weights were reset.
    pub degenerate: bool,
    pub acceptance_rate: f64,
    pub oracle_calls: u64,
    pub resampled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qvr_divergence: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub bits_per_dim: usize,
    pub cell_width: Vec<f64>,
    pub max_quantization_error: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub cycle: usize,
    pub step: u8,
    pub stage: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fourdvar: Option<FourdvarDiagnostics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub qaoa: Vec<QaoaDiagnostics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<ChainSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub filter: Vec<PfStep>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cycles: Vec<CycleDiagnostics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resample_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stages: Vec<StageRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssimilationReport {
    pub version: String,
    pub method: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub truth: Vec<Vec<f64>>,
    pub analysis: Vec<Vec<f64>>,
    /// Free model run from the background, the no-assimilation comparator.
    pub background_run: Vec<Vec<f64>>,
    pub rmse: Vec<f64>,
    pub background_rmse: Vec<f64>,
    pub diagnostics: Diagnostics,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

impl AssimilationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn final_rmse(&self) -> f64 {
        *self.rmse.last().expect("window >= 1")
    }

    pub fn final_background_rmse(&self) -> f64 {
        *self.background_rmse.last().expect("window >= 1")
    }
}

fn rows(v: &[DVector<f64>]) -> Vec<Vec<f64>> {
    v.iter().map(|x| x.iter().copied().collect()).collect()
}

/// Strong-constraint cost of the trajectory from `x0`. Zero-covariance
/// observations add 0 on an exact match and `+∞` otherwise; a diverging
/// trajectory costs `+∞`.
pub fn window_cost(problem: &AssimilationProblem, x0: &DVector<f64>) -> Result<f64> {
    let traj = match problem.model.trajectory(x0, problem.window) {
        Ok(t) => t,
        Err(Error::Divergence { .. }) => return Ok(f64::INFINITY),
        Err(e) => return Err(e),
    };
    let mut j = 0.5 * problem.background_cov.mahalanobis_sq(&(x0 - &problem.background))?;
    for obs in &problem.observations {
        let r = &obs.value - obs.operator.apply(&traj[obs.time])?;
        if obs.cov.is_zero() {
            if r.iter().any(|v| *v != 0.0) {
                return Ok(f64::INFINITY);
            }
        } else {
            j += 0.5 * obs.cov.mahalanobis_sq(&r)?;
        }
    }
    Ok(if j.is_finite() { j } else { f64::INFINITY })
}

/// Grid on increments around the background. The spacing is rounded to a
/// power of two so that the centre node decodes to exactly zero.
pub fn increment_grid(grid: &GridConfig, background_cov: &Covariance) -> Result<EncodingScheme> {
    let levels = 1usize << grid.bits_per_dim;
    let centre = (levels / 2) as f64;
    let (lower, upper): (Vec<f64>, Vec<f64>) = (0..background_cov.dim())
        .map(|i| {
            let sd = background_cov.matrix()[(i, i)].sqrt();
            let raw = 2.0 * grid.half_width * sd / (levels - 1) as f64;
            let delta = 2f64.powi(raw.log2().round() as i32);
            (-centre * delta, ((levels - 1) as f64 - centre) * delta)
        })
        .unzip();
    EncodingScheme::new(grid.bits_per_dim, lower, upper)
}

/// Index of the zero increment.
pub fn centre_index(scheme: &EncodingScheme) -> usize {
    let c = 1usize << (scheme.bits_per_dim() - 1);
    (0..scheme.dims()).fold(0, |acc, i| acc | c << (i * scheme.bits_per_dim()))
}

fn grid_point(problem: &AssimilationProblem, scheme: &EncodingScheme, k: usize) -> Result<DVector<f64>> {
    Ok(&problem.background + DVector::from_vec(scheme.decode(k)?))
}

/// `J(xb + δ_k)` for every grid increment.
pub fn tabulate_window_cost(problem: &AssimilationProblem, scheme: &EncodingScheme) -> Result<Vec<f64>> {
    (0..scheme.num_states())
        .into_par_iter()
        .map(|k| window_cost(problem, &grid_point(problem, scheme, k)?))
        .collect()
}

/// Cost table for QAOA: infinite entries are replaced by a finite ceiling
/// one span above the largest finite cost.
pub fn finite_table(costs: &[f64]) -> Result<DiagonalObservable> {
    let finite = costs.iter().copied().filter(|c| c.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), c| (a.min(c), b.max(c)));
    if !lo.is_finite() {
        return Err(Error::Precondition("every grid point has infinite cost".into()));
    }
    let ceiling = hi + (hi - lo).max(1.0);
    DiagonalObservable::new(costs.iter().map(|&c| if c.is_finite() { c } else { ceiling }).collect())
}

fn grid_summary(scheme: &EncodingScheme) -> GridSummary {
    GridSummary {
        bits_per_dim: scheme.bits_per_dim(),
        cell_width: (0..scheme.dims()).map(|i| scheme.cell_width(i)).collect(),
        max_quantization_error: scheme.max_quantization_error(),
    }
}

fn qaoa_diagnostics(cycle: usize, cost: &QaoaCost, result: &crate::qaoa::QaoaResult) -> Result<QaoaDiagnostics> {
    let argmin = cost.table().argmin();
    let p = evolve(cost, &result.params)?.probabilities()[argmin];
    Ok(QaoaDiagnostics {
        cycle,
        params: result.params.clone(),
        expectation: result.expectation,
        evaluations: result.evaluations,
        trace: result.trace.clone(),
        argmin,
        argmin_probability: p,
    })
}

/// Run the configured method on the config's twin experiment.
pub fn run(config: &PipelineConfig) -> Result<AssimilationReport> {
    config.validate()?;
    let twin = twin_for(config)?;
    run_on(config, &twin)
}

/// Run the configured method on a given twin experiment.
pub fn run_on(config: &PipelineConfig, twin: &TwinExperiment) -> Result<AssimilationReport> {
    config.validate()?;
    let started = Instant::now();
    let problem = &twin.problem;
    let seed = derive_seed(config.seed, label::METHOD);
    let mut diag = Diagnostics::default();
    let mut notes = Vec::new();
    let analysis = match &config.method {
        MethodConfig::Fourdvar => {
            problem.validate()?;
            let out = problem.minimize(&problem.background)?;
            diag.fourdvar = Some(FourdvarDiagnostics {
                iterations: out.iterations,
                converged: out.converged,
                diverged: out.diverged,
                cost_trace: out.cost_trace.clone(),
            });
            problem.trajectory(&out.x_opt)?
        }
        MethodConfig::Pf(pf) => {
            if problem.model_error_cov.is_some() || pf.process_noise.is_some() {
                notes.push("filter adds model error in prediction; the 4DVAR cost is strong-constraint".into());
            }
            let out = run_pf(problem, pf, None, None, seed)?;
            diag.filter = out.steps;
            diag.resample_count = Some(out.resample_count);
            out.analysis
        }
        MethodConfig::Qaoa(m) => {
            let scheme = increment_grid(&m.grid, &problem.background_cov)?;
            diag.grid = Some(grid_summary(&scheme));
            let costs = tabulate_window_cost(problem, &scheme)?;
            let cost = QaoaCost::new(finite_table(&costs)?);
            let result = optimize(&cost, m.depth, &m.qaoa, derive_seed(seed, label::QAOA))?;
            diag.qaoa.push(qaoa_diagnostics(0, &cost, &result)?);
            let best = result
                .samples
                .most_frequent()
                .ok_or_else(|| Error::Precondition("qaoa measured no shots".into()))?;
            problem
                .model
                .trajectory(&grid_point(problem, &scheme, best)?, problem.window)?
        }
        MethodConfig::Qmcmc(m) => {
            let scheme = increment_grid(&m.grid, &problem.background_cov)?;
            diag.grid = Some(grid_summary(&scheme));
            let costs = tabulate_window_cost(problem, &scheme)?;
            let target = TargetDistribution::new(costs.iter().map(|c| -c).collect())?;
            let chain = run_chain(
                &target,
                &m.kernel,
                m.step,
                centre_index(&scheme),
                m.steps,
                m.burn_in,
                derive_seed(seed, label::QMCMC),
            )?;
            let d = diagnostics(&chain)?;
            diag.chain = Some(ChainSummary {
                acceptance_rate: d.acceptance_rate,
                proposals: chain.proposals,
                oracle_calls: chain.oracle_calls,
                ess: d.ess,
                autocorrelation_time: d.autocorrelation_time,
            });
            if matches!(
                m.step,
                StepKind::Quantum {
                    mode: QuantumMode::Uncorrected,
                    ..
                }
            ) {
                notes.push("uncorrected quantum chain does not leave the target invariant".into());
            }
            let points = chain
                .states
                .iter()
                .map(|&k| grid_point(problem, &scheme, k))
                .collect::<Result<Vec<_>>>()?;
            let w = vec![1.0 / points.len() as f64; points.len()];
            problem.model.trajectory(&weighted_mean(&points, &w), problem.window)?
        }
        MethodConfig::Qvpf(m) => {
            if problem.model_error_cov.is_some() {
                notes.push("qvpf propagates particles without model error; model_error_cov is unused".into());
            }
            match run_qvpf_inner(problem, m, seed, &mut diag) {
                Ok(a) => a,
                Err((stage, e)) => {
                    return Err(Error::Stage {
                        stage,
                        partial: Box::new(serde_json::to_value(&diag)?),
                        source: Box::new(e),
                    })
                }
            }
        }
    };
    let rmse_series = analysis.iter().zip(&twin.truth).map(|(a, t)| rmse(a, t)).collect();
    let free = twin.free_run()?;
    let background_rmse = free.iter().zip(&twin.truth).map(|(a, t)| rmse(a, t)).collect();
    Ok(AssimilationReport {
        version: VERSION.to_string(),
        method: config.method.name().to_string(),
        seed: config.seed,
        config: config.clone(),
        truth: rows(&twin.truth),
        analysis: rows(&analysis),
        background_run: rows(&free),
        rmse: rmse_series,
        background_rmse,
        diagnostics: diag,
        notes,
        timings: config.timings.then(|| Timings {
            total_seconds: started.elapsed().as_secs_f64(),
        }),
    })
}

/// Run a QVPF config; errors carry the completed stages' diagnostics.
pub fn run_qvpf(config: &PipelineConfig) -> Result<AssimilationReport> {
    if !matches!(config.method, MethodConfig::Qvpf(_)) {
        return Err(Error::Precondition(format!(
            "run_qvpf needs method qvpf, got {}",
            config.method.name()
        )));
    }
    run(config)
}

/// Observations in `[start, start + len)`, re-timed, around background `xb`.
fn cycle_problem(problem: &AssimilationProblem, xb: &DVector<f64>, start: usize, len: usize) -> AssimilationProblem {
    AssimilationProblem {
        background: xb.clone(),
        background_cov: problem.background_cov.clone(),
        observations: problem
            .observations
            .iter()
            .filter(|o| o.time >= start && o.time < start + len)
            .map(|o| Observation {
                time: o.time - start,
                ..o.clone()
            })
            .collect(),
        model: problem.model.clone(),
        window: len,
        model_error_cov: None,
    }
}

type StageResult<T> = std::result::Result<T, (String, Error)>;

fn stage<T>(name: &str, r: Result<T>) -> StageResult<T> {
    r.map_err(|e| (name.to_string(), e))
}

/// Steps 1–11 per cycle:
/// 1 prior draw, 2 parameter init, 3 cost tabulation, 4–6 QAOA proposal
/// optimization and measurement, 7 importance weights against the QAOA
/// distribution, 8 QMCMC moves, 9 resampling, 10 weighted-mean analysis,
/// 11 forecast of the next cycle's background.
fn run_qvpf_inner(
    problem: &AssimilationProblem,
    m: &QvpfMethod,
    seed: u64,
    diag: &mut Diagnostics,
) -> StageResult<Vec<DVector<f64>>> {
    let window = problem.window;
    let cycle_len = m.cycle_length.unwrap_or(window);
    let n = m.particles;
    let scheme = stage("grid", increment_grid(&m.grid, &problem.background_cov))?;
    diag.grid = Some(grid_summary(&scheme));
    let mut xb = problem.background.clone();
    let mut analysis = Vec::with_capacity(window);
    let mut start = 0;
    let mut cycle = 0;
    while start < window {
        let len = cycle_len.min(window - start);
        let sub = cycle_problem(problem, &xb, start, len);
        let cseed = derive_seed_path(seed, &[label::METHOD, cycle as u64]);
        let mut log = |step: u8, name: &str| {
            diag.stages.push(StageRecord {
                cycle,
                step,
                stage: name.to_string(),
            })
        };

        let _prior = stage("prior", prior_ensemble(&sub, n, derive_seed(cseed, label::PRIOR)))?;
        log(1, "prior particles");
        log(2, "parameter initialization");

        let costs = stage("tabulate", tabulate_window_cost(&sub, &scheme))?;
        let table = stage("tabulate", finite_table(&costs))?;
        let target = stage("tabulate", TargetDistribution::new(costs.iter().map(|c| -c).collect()))?;
        log(3, "cost tabulation");

        let cost = QaoaCost::new(table);
        let result = stage(
            "qaoa",
            optimize(&cost, m.depth, &m.qaoa, derive_seed(cseed, label::QAOA)),
        )?;
        let state = stage("qaoa", evolve(&cost, &result.params))?;
        let q = state.probabilities();
        let picks = stage(
            "qaoa",
            state.sample_indices(n as u64, derive_seed(cseed, label::MEASURE)),
        )?;
        let qd = stage("qaoa", qaoa_diagnostics(cycle, &cost, &result))?;
        diag.qaoa.push(qd);
        log(4, "qaoa state initialization");
        log(5, "qaoa layers");
        log(6, "qaoa measurement and optimization");

        let logw: Vec<f64> = picks.iter().map(|&k| -costs[k] - q[k].ln()).collect();
        let (weights, degenerate) = normalize_log_weights(&logw);
        log(7, "importance weights");

        let moved: Vec<(usize, u64, u64, u64)> = if m.chain_steps == 0 {
            picks.iter().map(|&k| (k, 0, 0, 0)).collect()
        } else {
            stage(
                "qmcmc",
                picks
                    .par_iter()
                    .enumerate()
                    .map(|(i, &k)| {
                        let run = run_chain(
                            &target,
                            &m.kernel,
                            m.step,
                            k,
                            m.chain_steps,
                            0,
                            derive_seed_path(cseed, &[label::QMCMC, i as u64]),
                        )?;
                        Ok((
                            *run.states.last().unwrap(),
                            run.accepted,
                            run.proposals,
                            run.oracle_calls,
                        ))
                    })
                    .collect::<Result<Vec<_>>>(),
            )?
        };
        let accepted: u64 = moved.iter().map(|m| m.1).sum();
        let proposals: u64 = moved.iter().map(|m| m.2).sum();
        let oracle_calls: u64 = moved.iter().map(|m| m.3).sum();
        let particles = stage(
            "qmcmc",
            moved
                .iter()
                .map(|mv| grid_point(&sub, &scheme, mv.0))
                .collect::<Result<Vec<_>>>(),
        )?;
        let mut ensemble = ParticleEnsemble { particles, weights };
        log(8, "qmcmc moves");

        let ess = ensemble.ess();
        let mut resampled = false;
        let mut qvr_divergence = None;
        if ess < m.threshold * n as f64 {
            let (e, div) = stage(
                "resample",
                resample(&ensemble, &m.resampler, derive_seed(cseed, label::RESAMPLE)),
            )?;
            ensemble = e;
            resampled = true;
            qvr_divergence = div;
        }
        log(9, "resampling");

        let trajectories = stage(
            "analysis",
            ensemble
                .particles
                .par_iter()
                .map(|x| sub.model.trajectory(x, len + 1))
                .collect::<Result<Vec<_>>>(),
        )?;
        for t in 0..len {
            let at: Vec<DVector<f64>> = trajectories.iter().map(|tr| tr[t].clone()).collect();
            analysis.push(weighted_mean(&at, &ensemble.weights));
        }
        log(10, "weighted-mean analysis");

        let forecast: Vec<DVector<f64>> = trajectories.iter().map(|tr| tr[len].clone()).collect();
        xb = weighted_mean(&forecast, &ensemble.weights);
        log(11, "advance");

        diag.cycles.push(CycleDiagnostics {
            cycle,
            start,
            length: len,
            ess,
            degenerate,
            acceptance_rate: if proposals == 0 {
                0.0
            } else {
                accepted as f64 / proposals as f64
            },
            oracle_calls,
            resampled,
            qvr_divergence,
        });
        start += len;
        cycle += 1;
    }
    Ok(analysis)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(io_err(&path))?;
    Ok(path)
}

fn csv_row(values: impl IntoIterator<Item = String>) -> String {
    let mut s = values.into_iter().collect::<Vec<_>>().join(",");
    s.push('\n');
    s
}

/// Write `report.json`, `trace_*.csv` and `plotdata_*.csv` into `dir`.
/// Returns the written paths in a fixed order.
pub fn write_report(report: &AssimilationReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = vec![write_file(dir, "report.json", &report.to_json()?)?];

    let mut s = String::from("time,rmse,background_rmse\n");
    for (t, (a, b)) in report.rmse.iter().zip(&report.background_rmse).enumerate() {
        let _ = writeln!(s, "{t},{a},{b}");
    }
    written.push(write_file(dir, "trace_rmse.csv", &s)?);

    let diag = &report.diagnostics;
    if !diag.filter.is_empty() {
        let mut s = String::from("time,ess,resampled,degenerate,rmse\n");
        for (st, r) in diag.filter.iter().zip(&report.rmse) {
            let _ = writeln!(
                s,
                "{},{},{},{},{r}",
                st.time,
                st.ess,
                u8::from(st.resampled),
                u8::from(st.degenerate)
            );
        }
        written.push(write_file(dir, "trace_filter.csv", &s)?);
    }
    if !diag.cycles.is_empty() {
        let mut s = String::from("cycle,start,length,ess,degenerate,acceptance_rate,oracle_calls,resampled\n");
        for c in &diag.cycles {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                c.cycle,
                c.start,
                c.length,
                c.ess,
                u8::from(c.degenerate),
                c.acceptance_rate,
                c.oracle_calls,
                u8::from(c.resampled)
            );
        }
        written.push(write_file(dir, "trace_cycles.csv", &s)?);
    }
    if !diag.qaoa.is_empty() {
        let mut s = String::from("cycle,iteration,expectation\n");
        for q in &diag.qaoa {
            for (it, e) in &q.trace {
                let _ = writeln!(s, "{},{it},{e}", q.cycle);
            }
        }
        written.push(write_file(dir, "trace_qaoa.csv", &s)?);
    }
    if let Some(f) = &diag.fourdvar {
        let mut s = String::from("iteration,cost\n");
        for (i, c) in f.cost_trace.iter().enumerate() {
            let _ = writeln!(s, "{i},{c}");
        }
        written.push(write_file(dir, "trace_fourdvar.csv", &s)?);
    }

    let d = report.truth.first().map_or(0, Vec::len);
    let mut header = vec!["time".to_string()];
    for series in ["truth", "analysis", "background"] {
        header.extend((0..d).map(|i| format!("{series}_{i}")));
    }
    let mut s = csv_row(header);
    for t in 0..report.truth.len() {
        let mut row = vec![t.to_string()];
        for series in [&report.truth, &report.analysis, &report.background_run] {
            row.extend(series[t].iter().map(|v| v.to_string()));
        }
        s.push_str(&csv_row(row));
    }
    written.push(write_file(dir, "plotdata_trajectory.csv", &s)?);
    Ok(written)
}

/// Twin experiment files: `twin.json` and `plotdata_twin.csv`.
pub fn write_twin(twin: &TwinExperiment, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json = write_file(dir, "twin.json", &(twin.to_json()? + "\n"))?;
    let d = twin.problem.dim();
    let p = twin.config.obs_operator.obs_dim();
    let mut header = vec!["time".to_string()];
    header.extend((0..d).map(|i| format!("truth_{i}")));
    header.extend((0..p).map(|i| format!("obs_{i}")));
    header.extend((0..d).map(|i| format!("background_{i}")));
    let free = twin.free_run()?;
    let mut s = csv_row(header);
    for (t, x) in twin.truth.iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(x.iter().map(|v| v.to_string()));
        match twin.observations().iter().find(|o| o.time == t) {
            Some(o) => row.extend(o.value.iter().map(|v| v.to_string())),
            None => row.extend((0..p).map(|_| String::new())),
        }
        row.extend(free[t].iter().map(|v| v.to_string()));
        s.push_str(&csv_row(row));
    }
    let plot = write_file(dir, "plotdata_twin.csv", &s)?;
    Ok(vec![json, plot])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_rmse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_rmse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_ess: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceptance_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_calls: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub version: String,
    pub seed: u64,
    pub final_background_rmse: f64,
    pub rows: Vec<ComparisonRow>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn comparison_row(report: &AssimilationReport) -> ComparisonRow {
    let d = &report.diagnostics;
    let mean_ess = mean(d.filter.iter().map(|s| s.ess)).or_else(|| mean(d.cycles.iter().map(|c| c.ess)));
    let acceptance_rate = d
        .chain
        .as_ref()
        .map(|c| c.acceptance_rate)
        .or_else(|| mean(d.cycles.iter().map(|c| c.acceptance_rate)));
    let oracle_calls = d
        .chain
        .as_ref()
        .map(|c| c.oracle_calls)
        .or_else(|| (!d.cycles.is_empty()).then(|| d.cycles.iter().map(|c| c.oracle_calls).sum()));
    ComparisonRow {
        method: report.method.clone(),
        mean_rmse: mean(report.rmse.iter().copied()),
        final_rmse: Some(report.final_rmse()),
        mean_ess,
        acceptance_rate,
        oracle_calls,
        seconds: report.timings.as_ref().map(|t| t.total_seconds),
        error: None,
    }
}

/// Run every config on one shared twin experiment. Configs must agree on
/// seed and twin; a failing method fills its row's `error` column.
pub fn compare_methods(configs: &[PipelineConfig]) -> Result<ComparisonTable> {
    let first = configs
        .first()
        .ok_or_else(|| Error::Precondition("compare needs at least one config".into()))?;
    if let Some(i) = configs
        .iter()
        .position(|c| c.seed != first.seed || c.twin != first.twin)
    {
        return Err(Error::Precondition(format!(
            "config {i} does not share the twin experiment (seed and twin) of config 0"
        )));
    }
    let mut all = Vec::new();
    for (i, c) in configs.iter().enumerate() {
        all.extend(c.violations().into_iter().map(|v| format!("config {i}: {v}")));
    }
    if !all.is_empty() {
        return Err(Error::Validation(all));
    }
    let twin = twin_for(first)?;
    let rows = configs
        .par_iter()
        .map(|c| match run_on(c, &twin) {
            Ok(r) => comparison_row(&r),
            Err(e) => ComparisonRow {
                method: c.method.name().to_string(),
                mean_rmse: None,
                final_rmse: None,
                mean_ess: None,
                acceptance_rate: None,
                oracle_calls: None,
                seconds: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let free = twin.free_run()?;
    Ok(ComparisonTable {
        version: VERSION.to_string(),
        seed: first.seed,
        final_background_rmse: rmse(free.last().unwrap(), twin.truth.last().unwrap()),
        rows,
    })
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or(String::new(), T::to_string)
}

/// `report.json` plus `plotdata_comparison.csv`.
pub fn write_comparison(table: &ComparisonTable, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json = write_file(dir, "report.json", &(serde_json::to_string_pretty(table)? + "\n"))?;
    let mut s = String::from("method,mean_rmse,final_rmse,mean_ess,acceptance_rate,oracle_calls,seconds,error\n");
    for r in &table.rows {
        s.push_str(&csv_row([
            r.method.clone(),
            opt(&r.mean_rmse),
            opt(&r.final_rmse),
            opt(&r.mean_ess),
            opt(&r.acceptance_rate),
            opt(&r.oracle_calls),
            opt(&r.seconds),
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
        ]));
    }
    let csv = write_file(dir, "plotdata_comparison.csv", &s)?;
    Ok(vec![json, csv])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingKind {
    /// Oracle calls per accepted move against the acceptable mass ε.
    EpsilonScaling,
    /// Filter error against the Kalman mean as the particle count grows.
    ParticleScaling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingConfig {
    pub kind: ScalingKind,
    /// ε values (powers of ½) or particle counts.
    pub grid: Vec<f64>,
    pub seed: u64,
    /// Moves per ε, or filter repetitions per N.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
}

impl ScalingConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.grid.len() < 4 {
            v.push(format!("grid needs >= 4 points, got {}", self.grid.len()));
        }
        let mut sorted = self.grid.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            v.push("grid points must be distinct".into());
        }
        for &g in &self.grid {
            match self.kind {
                ScalingKind::EpsilonScaling => {
                    let n = -g.log2();
                    if !(g > 0.0 && n.fract() == 0.0 && (1.0..=12.0).contains(&n)) {
                        v.push(format!("epsilon {g} is not 2^-n with n in 1..=12"));
                    }
                }
                ScalingKind::ParticleScaling => {
                    if !(g >= 2.0 && g.fract() == 0.0) {
                        v.push(format!("particle count {g} is not an integer >= 2"));
                    }
                }
            }
        }
        if self.trials == Some(0) {
            v.push("trials must be >= 1".into());
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub residuals: Vec<f64>,
}

/// Least squares on `(ln x, ln y)`.
pub fn log_log_fit(x: &[f64], y: &[f64]) -> LineFit {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let (slope, intercept) = linear_fit(&lx, &ly);
    let residuals = lx.iter().zip(&ly).map(|(a, b)| b - (intercept + slope * a)).collect();
    LineFit {
        slope,
        intercept,
        residuals,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingSeries {
    pub name: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub fit: LineFit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub version: String,
    pub config: ScalingConfig,
    pub series: Vec<ScalingSeries>,
}

impl ScalingReport {
    pub fn series(&self, name: &str) -> Option<&ScalingSeries> {
        self.series.iter().find(|s| s.name == name)
    }
}

/// Current state 0 at log-weight 0, one acceptable state at +1, the rest
/// impossible; with the global kernel the acceptable mass is `2^-n`.
fn epsilon_target(n: usize) -> Result<TargetDistribution> {
    let mut lw = vec![f64::NEG_INFINITY; 1 << n];
    lw[0] = 0.0;
    lw[1] = 1.0;
    TargetDistribution::new(lw)
}

fn epsilon_costs(eps: f64, trials: usize, seed: u64) -> Result<(f64, f64)> {
    let n = (-eps.log2()).round() as usize;
    let target = epsilon_target(n)?;
    let kernel = ProposalKernel::UniformGlobal;
    let mut rng = rng_from_seed(derive_seed(seed, 0));
    let (mut calls, mut accepted) = (0u64, 0u64);
    for _ in 0..trials {
        let s = qmcmc_step(&target, &kernel, 0, MassEstimate::Exact, &mut rng)?;
        calls += s.oracle_calls;
        accepted += u64::from(s.accepted);
    }
    let quantum = calls as f64 / accepted.max(1) as f64;
    let mut rng = rng_from_seed(derive_seed(seed, 1));
    let (mut calls, mut accepted) = (0u64, 0u64);
    for _ in 0..trials {
        let s = rejection_step(&target, &kernel, 0, 1000 << n, &mut rng);
        calls += s.oracle_calls;
        accepted += u64::from(s.accepted);
    }
    let classical = calls as f64 / accepted.max(1) as f64;
    Ok((quantum, classical))
}

/// Linear-Gaussian twin used by the particle sweep.
pub fn particle_scaling_twin(seed: u64) -> Result<TwinExperiment> {
    let config = TwinConfig {
        model: DynamicsModel::linear(DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.95])),
        window: 5,
        truth_center: vec![1.0, -0.5],
        truth_cov: None,
        background_cov: Covariance::scalar(2, 1.0)?,
        obs_operator: ObservationOperator::identity(2),
        obs_cov: Covariance::scalar(2, 0.5)?,
        background_perturbation: 1.0,
        obs_perturbation: 1.0,
        model_error_cov: Some(Covariance::scalar(2, 0.1)?),
    };
    generate_twin(&config, derive_seed(seed, label::TWIN))
}

fn particle_errors(twin: &TwinExperiment, n: usize, resampler: &Resampler, trials: usize, seed: u64) -> Result<f64> {
    let problem = &twin.problem;
    let kalman = kalman_filter(problem, problem.model_error_cov.as_ref())?;
    let exact = &kalman.last().unwrap().mean;
    let cfg = PfConfig::new(n, resampler.clone());
    let sq: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|r| {
            let out = run_pf(problem, &cfg, None, None, derive_seed_path(seed, &[n as u64, r as u64]))?;
            Ok(rmse(out.analysis.last().unwrap(), exact).powi(2))
        })
        .collect::<Result<_>>()?;
    Ok((sq.iter().sum::<f64>() / trials as f64).sqrt())
}

pub fn scaling_experiment(config: &ScalingConfig) -> Result<ScalingReport> {
    let v = config.violations();
    if !v.is_empty() {
        return Err(Error::Precondition(v.join("; ")));
    }
    let seed = derive_seed(config.seed, label::SCALING);
    let x = config.grid.clone();
    let series = match config.kind {
        ScalingKind::EpsilonScaling => {
            let trials = config.trials.unwrap_or(400);
            let costs = x
                .par_iter()
                .enumerate()
                .map(|(i, &eps)| epsilon_costs(eps, trials, derive_seed(seed, i as u64)))
                .collect::<Result<Vec<_>>>()?;
            let quantum: Vec<f64> = costs.iter().map(|c| c.0).collect();
            let classical: Vec<f64> = costs.iter().map(|c| c.1).collect();
            vec![
                ScalingSeries {
                    name: "quantum".into(),
                    fit: log_log_fit(&x, &quantum),
                    x: x.clone(),
                    y: quantum,
                },
                ScalingSeries {
                    name: "classical".into(),
                    fit: log_log_fit(&x, &classical),
                    x: x.clone(),
                    y: classical,
                },
            ]
        }
        ScalingKind::ParticleScaling => {
            let trials = config.trials.unwrap_or(16);
            let twin = particle_scaling_twin(config.seed)?;
            let mut out = Vec::new();
            for (name, resampler) in [("classical", Resampler::Systematic), ("quantum", Resampler::Quantum)] {
                let y = x
                    .iter()
                    .map(|&n| {
                        particle_errors(
                            &twin,
                            n as usize,
                            &resampler,
                            trials,
                            derive_seed(seed, out.len() as u64),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                out.push(ScalingSeries {
                    name: name.into(),
                    fit: log_log_fit(&x, &y),
                    x: x.clone(),
                    y,
                });
            }
            out
        }
    };
    Ok(ScalingReport {
        version: VERSION.to_string(),
        config: config.clone(),
        series,
    })
}

/// `report.json` plus `plotdata_scaling.csv` (series, x, y, fitted y).
pub fn write_scaling(report: &ScalingReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json = write_file(dir, "report.json", &(serde_json::to_string_pretty(report)? + "\n"))?;
    let mut s = String::from("series,x,y,fitted\n");
    for series in &report.series {
        for (x, y) in series.x.iter().zip(&series.y) {
            let fitted = (series.fit.intercept + series.fit.slope * x.ln()).exp();
            let _ = writeln!(s, "{},{x},{y},{fitted}", series.name);
        }
    }
    let csv = write_file(dir, "plotdata_scaling.csv", &s)?;
    Ok(vec![json, csv])
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn identity_twin(window: usize) -> TwinConfig {
        TwinConfig {
            model: DynamicsModel::linear(DMatrix::identity(2, 2)),
            window,
            truth_center: vec![0.5, -1.0],
            truth_cov: None,
            background_cov: Covariance::scalar(2, 1.0).unwrap(),
            obs_operator: ObservationOperator::identity(2),
            obs_cov: Covariance::zero(2),
            background_perturbation: 0.0,
            obs_perturbation: 0.0,
            model_error_cov: None,
        }
    }

    fn qvpf(window: usize) -> PipelineConfig {
        PipelineConfig {
            seed: 5,
            twin: identity_twin(window),
            method: MethodConfig::Qvpf(QvpfMethod {
                grid: GridConfig {
                    bits_per_dim: 2,
                    half_width: 3.0,
                },
                particles: 64,
                cycle_length: Some(2),
                depth: 2,
                qaoa: QaoaConfig::default(),
                kernel: defaults::kernel(),
                step: defaults::step(),
                chain_steps: 3,
                resampler: Resampler::Quantum,
                threshold: 0.5,
            }),
            output: None,
            timings: false,
        }
    }

    #[test]
    fn increment_grid_contains_zero() {
        for bits in 1..6 {
            for var in [0.3, 1.0, 7.5] {
                let g = GridConfig {
                    bits_per_dim: bits,
                    half_width: 3.0,
                };
                let s = increment_grid(&g, &Covariance::scalar(2, var).unwrap()).unwrap();
                assert_eq!(s.decode(centre_index(&s)).unwrap(), vec![0.0, 0.0]);
                let hw = 3.0 * var.sqrt();
                let span = s.upper()[0] - s.lower()[0];
                assert!(span <= 2.0 * hw * 2f64.sqrt() + 1e-12 && span >= 2.0 * hw / 2f64.sqrt() - 1e-12);
            }
        }
    }

    #[test]
    fn window_cost_handles_exact_observations() {
        let twin = generate_twin(&identity_twin(3), 1).unwrap();
        let p = &twin.problem;
        assert_eq!(window_cost(p, &p.background).unwrap(), 0.0);
        let off = &p.background + DVector::from_vec(vec![1e-9, 0.0]);
        assert_eq!(window_cost(p, &off).unwrap(), f64::INFINITY);
        let t = finite_table(&[0.0, f64::INFINITY, 2.0, 1.0]).unwrap();
        assert_eq!(t.values(), &[0.0, 4.0, 2.0, 1.0]);
        assert!(finite_table(&[f64::INFINITY; 2]).is_err());
    }

    #[test]
    fn noise_free_qvpf_is_exact() {
        let report = run_qvpf(&qvpf(4)).unwrap();
        assert_eq!(report.rmse.len(), 4);
        assert!(report.rmse.iter().all(|r| *r == 0.0), "{:?}", report.rmse);
        assert_eq!(report.diagnostics.cycles.len(), 2);
        let steps: Vec<u8> = report.diagnostics.stages.iter().map(|s| s.step).collect();
        assert_eq!(steps, [(1..=11).collect::<Vec<u8>>(), (1..=11).collect()].concat());
    }

    #[test]
    fn reports_are_deterministic() {
        let c = qvpf(3);
        assert_eq!(run(&c).unwrap().to_json().unwrap(), run(&c).unwrap().to_json().unwrap());
    }

    #[test]
    fn violations_are_collected() {
        let mut c = qvpf(3);
        c.twin.window = 0;
        if let MethodConfig::Qvpf(m) = &mut c.method {
            m.particles = 1;
            m.grid.bits_per_dim = 9;
            m.threshold = 2.0;
        }
        let v = c.violations();
        assert!(v.len() >= 4, "{v:?}");
        assert!(run(&c).unwrap_err().is_validation());
    }

    #[test]
    fn scaling_grid_must_be_usable() {
        let c = ScalingConfig {
            kind: ScalingKind::EpsilonScaling,
            grid: vec![0.25, 0.125, 0.3],
            seed: 1,
            trials: None,
        };
        assert_eq!(c.violations().len(), 2);
        assert!(matches!(scaling_experiment(&c), Err(Error::Precondition(_))));
    }

    #[test]
    fn log_log_fit_recovers_power_law() {
        let x = [1.0, 10.0, 100.0, 1000.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-0.5)).collect();
        let f = log_log_fit(&x, &y);
        assert!((f.slope + 0.5).abs() < 1e-12);
        assert!((f.intercept - 3f64.ln()).abs() < 1e-12);
        assert!(f.residuals.iter().all(|r| r.abs() < 1e-12));
    }
}
