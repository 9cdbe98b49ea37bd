//! Regularized diffusion (adapt, smooth, combine), its non-incremental
//! variant and the centralized reference recursion.

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::Mutex;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{centroid_and_disagreement, test_error, MetricRow, RunRecord};
use crate::risks::{weighted_gradient_sum, Sample, SmoothRisk};
use crate::smoothing::{Regularizer, SmoothingError};
use crate::topology::{CombinationMatrix, PerronVector};

/// Iterates with any component above this magnitude abort the run.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("invalid diffusion config: {0}")]
    InvalidConfig(String),
    #[error("agent {agent}: {reason}")]
    InvalidAgent { agent: usize, reason: String },
    #[error("divergence detected at iteration {iteration} (agent {agent})")]
    DivergenceDetected { iteration: usize, agent: usize },
    #[error("network has {matrix} agents but {agents} agent specs were given")]
    NetworkSizeMismatch { matrix: usize, agents: usize },
    #[error(transparent)]
    Smoothing(#[from] SmoothingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentClass {
    FullyInformed,
    DataInformed,
    StructureInformed,
    Custom,
}

/// Local cost `J_k + R_k` of one agent.
#[derive(Debug, Clone)]
pub struct AgentSpec {
    pub risk: SmoothRisk,
    pub regularizer: Regularizer,
    pub class: AgentClass,
}

impl AgentSpec {
    pub fn custom(risk: SmoothRisk, regularizer: Regularizer) -> Self {
        Self { risk, regularizer, class: AgentClass::Custom }
    }

    pub fn dim(&self) -> usize {
        self.risk.dim()
    }

    /// Checks dimensions and the class profile: structure-informed agents
    /// carry no risk and data-informed agents no regularizer.
    pub fn validate(&self, agent: usize) -> Result<(), EngineError> {
        let bad = |reason: String| EngineError::InvalidAgent { agent, reason };
        self.regularizer.validate(self.dim()).map_err(|e| bad(e.to_string()))?;
        match self.class {
            AgentClass::StructureInformed if !self.risk.is_zero() => {
                Err(bad("structure-informed agents must have a zero risk".into()))
            }
            AgentClass::DataInformed if !self.regularizer.is_zero() => {
                Err(bad("data-informed agents must have a zero regularizer".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    RegularizedDiffusion,
    NonIncremental,
    CentralizedReference,
}

/// Smoothing parameter: fixed, or coupled to the step as `delta = mu^(1/2 - kappa)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Smoothing {
    Fixed(f64),
    Coupled { kappa: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionConfig {
    pub mu: f64,
    pub smoothing: Smoothing,
    pub n_iterations: usize,
    pub variant: Variant,
    pub seed: u64,
    /// Use exact gradients instead of sampled ones.
    pub exact_gradients: bool,
    /// Initial iterate shared by all agents; zero when absent.
    pub init: Option<DVector<f64>>,
}

impl DiffusionConfig {
    pub fn new(mu: f64, delta: f64, n_iterations: usize) -> Self {
        Self {
            mu,
            smoothing: Smoothing::Fixed(delta),
            n_iterations,
            variant: Variant::RegularizedDiffusion,
            seed: 0,
            exact_gradients: false,
            init: None,
        }
    }

    pub fn delta(&self) -> f64 {
        match self.smoothing {
            Smoothing::Fixed(d) => d,
            Smoothing::Coupled { kappa } => self.mu.powf(0.5 - kappa),
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |s: String| Err(EngineError::InvalidConfig(s));
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return bad(format!("mu must be positive, got {}", self.mu));
        }
        if let Smoothing::Coupled { kappa } = self.smoothing {
            if !(kappa > 0.25 && kappa < 0.5) {
                return bad(format!("kappa must lie in (1/4, 1/2), got {kappa}"));
            }
        }
        let delta = self.delta();
        if !(delta > 0.0 && delta.is_finite()) {
            return bad(format!("delta must be positive, got {delta}"));
        }
        if self.mu > 2.0 * delta {
            return bad(format!("mu = {} exceeds 2 delta = {}", self.mu, 2.0 * delta));
        }
        Ok(())
    }
}

/// Stacked per-agent iterates.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub w: Vec<DVector<f64>>,
    pub iteration: usize,
}

impl NetworkState {
    pub fn uniform(n_agents: usize, w0: DVector<f64>) -> Self {
        Self { w: vec![w0; n_agents], iteration: 0 }
    }

    fn check_finite(&self) -> Result<(), EngineError> {
        for (agent, w) in self.w.iter().enumerate() {
            if w.iter().any(|x| !(x.abs() <= DIVERGENCE_THRESHOLD)) {
                return Err(EngineError::DivergenceDetected { iteration: self.iteration, agent });
            }
        }
        Ok(())
    }
}

/// Counter-based random streams: the generator for `(agent, iteration)` is
/// keyed directly by the master seed and those indices, so runs that share
/// a seed see identical draws regardless of variant or scheduling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStreams {
    seed: u64,
    domain: u64,
}

/// Stream domains keep draws for different purposes independent.
pub const DOMAIN_GRADIENT: u64 = 0x6772_6164;
pub const DOMAIN_TEST_SET: u64 = 0x7465_7374;
pub const DOMAIN_SETUP: u64 = 0x7365_7475;

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed, domain: DOMAIN_GRADIENT }
    }

    pub fn with_domain(seed: u64, domain: u64) -> Self {
        Self { seed, domain }
    }

    pub fn stream(&self, agent: usize, iteration: usize) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&(agent as u64).to_le_bytes());
        key[16..24].copy_from_slice(&(iteration as u64).to_le_bytes());
        key[24..].copy_from_slice(&self.domain.to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }
}

fn check_network(agents: &[AgentSpec], a: &CombinationMatrix, state: &NetworkState) -> Result<(), EngineError> {
    if agents.len() != a.n() || state.w.len() != a.n() {
        return Err(EngineError::NetworkSizeMismatch { matrix: a.n(), agents: agents.len() });
    }
    Ok(())
}

fn local_gradient(
    agent: &AgentSpec,
    w: &DVector<f64>,
    config: &DiffusionConfig,
    rngs: &RngStreams,
    k: usize,
    iteration: usize,
) -> DVector<f64> {
    if config.exact_gradients {
        agent.risk.exact_gradient(w)
    } else {
        let mut rng = rngs.stream(k, iteration);
        let obs = agent.risk.draw(&mut rng);
        agent.risk.stochastic_gradient(w, &obs)
    }
}

fn moreau_gradient(r: &Regularizer, x: &DVector<f64>, delta: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    r.moreau_gradient_into(x.as_slice(), delta, g.as_mut_slice());
    g
}

/// `w_k <- sum_l a_lk psi_l`, summed in ascending `l`.
fn combine(psi: &[DVector<f64>], a: &CombinationMatrix) -> Vec<DVector<f64>> {
    let dim = psi.first().map_or(0, |p| p.len());
    a.in_weights()
        .iter()
        .map(|incoming| {
            let mut w = DVector::zeros(dim);
            for &(l, weight) in incoming {
                w.axpy(weight, &psi[l], 1.0);
            }
            w
        })
        .collect()
}

fn adapt_and_combine(
    state: &NetworkState,
    agents: &[AgentSpec],
    a: &CombinationMatrix,
    config: &DiffusionConfig,
    rngs: &RngStreams,
    at_pre_adapt: bool,
) -> Result<NetworkState, EngineError> {
    check_network(agents, a, state)?;
    let mu = config.mu;
    let delta = config.delta();
    let iteration = state.iteration + 1;
    let psi: Vec<DVector<f64>> = agents
        .iter()
        .zip(&state.w)
        .enumerate()
        .map(|(k, (agent, w))| {
            let phi = w - local_gradient(agent, w, config, rngs, k, iteration) * mu;
            let at = if at_pre_adapt { w } else { &phi };
            let r_grad = moreau_gradient(&agent.regularizer, at, delta);
            phi - r_grad * mu
        })
        .collect();
    let next = NetworkState { w: combine(&psi, a), iteration };
    next.check_finite()?;
    Ok(next)
}

/// One iteration of regularized diffusion: the regularizer gradient is taken
/// at the adapted point `phi_k`.
pub fn step_regularized_diffusion(
    state: &NetworkState,
    agents: &[AgentSpec],
    a: &CombinationMatrix,
    config: &DiffusionConfig,
    rngs: &RngStreams,
) -> Result<NetworkState, EngineError> {
    adapt_and_combine(state, agents, a, config, rngs, false)
}

/// Non-incremental variant: the regularizer gradient is taken at the
/// previous iterate `w_{k,i-1}`.
pub fn step_non_incremental(
    state: &NetworkState,
    agents: &[AgentSpec],
    a: &CombinationMatrix,
    config: &DiffusionConfig,
    rngs: &RngStreams,
) -> Result<NetworkState, EngineError> {
    adapt_and_combine(state, agents, a, config, rngs, true)
}

/// Gradient of the smoothed aggregate `sum_k p_k (J_k + R_k^delta)`.
pub fn aggregate_smoothed_gradient(
    w: &DVector<f64>,
    agents: &[AgentSpec],
    p: &PerronVector,
    delta: f64,
) -> DVector<f64> {
    let terms: Vec<(f64, &SmoothRisk)> = agents.iter().enumerate().map(|(k, ag)| (p[k], &ag.risk)).collect();
    let mut g = weighted_gradient_sum(&terms, w);
    for (k, agent) in agents.iter().enumerate() {
        if !agent.regularizer.is_zero() {
            g.axpy(p[k], &moreau_gradient(&agent.regularizer, w, delta), 1.0);
        }
    }
    g
}

/// Centralized operator `T_c(w) = w - mu sum_k p_k (grad J_k(w) + grad R_k^delta(w))`.
pub fn step_centralized(
    w: &DVector<f64>,
    agents: &[AgentSpec],
    p: &PerronVector,
    config: &DiffusionConfig,
) -> Result<DVector<f64>, EngineError> {
    let next = w - aggregate_smoothed_gradient(w, agents, p, config.delta()) * config.mu;
    if next.iter().any(|x| !(x.abs() <= DIVERGENCE_THRESHOLD)) {
        return Err(EngineError::DivergenceDetected { iteration: 0, agent: 0 });
    }
    Ok(next)
}

/// Receives per-iteration metric rows; shared across concurrently running
/// repetitions, keyed by run id.
pub trait MetricsSink: Send + Sync {
    fn record(&self, run_id: &str, row: &MetricRow);
}

/// Discards all rows.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&self, _run_id: &str, _row: &MetricRow) {}
}

/// Collects rows in memory per run id.
#[derive(Default)]
pub struct MemorySink {
    rows: Mutex<BTreeMap<String, Vec<MetricRow>>>,
}

impl MemorySink {
    pub fn take(&self) -> BTreeMap<String, Vec<MetricRow>> {
        std::mem::take(&mut *self.rows.lock().expect("sink poisoned"))
    }
}

impl MetricsSink for MemorySink {
    fn record(&self, run_id: &str, row: &MetricRow) {
        self.rows
            .lock()
            .expect("sink poisoned")
            .entry(run_id.to_string())
            .or_default()
            .push(row.clone());
    }
}

/// Per-run inputs that only affect the metrics.
#[derive(Debug, Clone)]
pub struct RunContext<'a> {
    pub run_id: String,
    /// Reference point for MSD, usually `w_delta°`.
    pub target: DVector<f64>,
    /// Weights of the centroid; the Perron vector for primitive networks.
    pub centroid_weights: PerronVector,
    pub test_set: Option<&'a [Sample]>,
    /// Test error is measured every `test_every` iterations and at the end.
    pub test_every: usize,
}

fn metric_row(state: &NetworkState, ctx: &RunContext, last: bool) -> MetricRow {
    let n = state.w.len() as f64;
    let msd_network = state.w.iter().map(|w| (w - &ctx.target).norm_squared()).sum::<f64>() / n;
    let (centroid, disagreement) = centroid_and_disagreement(&state.w, &ctx.centroid_weights);
    let measure = ctx.test_every > 0 && (state.iteration.is_multiple_of(ctx.test_every) || last);
    let test_error = ctx
        .test_set
        .filter(|_| measure)
        .map(|set| state.w.iter().map(|w| test_error(w, set)).sum::<f64>() / n);
    MetricRow {
        iter: state.iteration,
        msd_network,
        msd_centroid: (centroid - &ctx.target).norm_squared(),
        disagreement,
        test_error,
    }
}

/// Stable fingerprint of a configuration, recorded with each run.
pub fn fingerprint(config: &DiffusionConfig) -> u64 {
    let mut h = DefaultHasher::new();
    format!("{config:?}").hash(&mut h);
    h.finish()
}

/// Runs `config.n_iterations` steps and returns the full metric trace; rows
/// are also streamed to `sink`.
pub fn run(
    agents: &[AgentSpec],
    a: &CombinationMatrix,
    config: &DiffusionConfig,
    ctx: &RunContext,
    sink: &dyn MetricsSink,
) -> Result<RunRecord, EngineError> {
    config.validate()?;
    let dim = agents.first().map_or(0, AgentSpec::dim);
    for (k, agent) in agents.iter().enumerate() {
        agent.validate(k)?;
        if agent.dim() != dim {
            return Err(EngineError::InvalidAgent {
                agent: k,
                reason: format!("dimension {} differs from {dim}", agent.dim()),
            });
        }
    }
    let w0 = match &config.init {
        Some(w) if w.len() != dim => {
            return Err(EngineError::InvalidConfig(format!("init has dimension {} not {dim}", w.len())))
        }
        Some(w) => w.clone(),
        None => DVector::zeros(dim),
    };
    let mut state = NetworkState::uniform(a.n(), w0);
    check_network(agents, a, &state)?;
    let rngs = RngStreams::new(config.seed);
    let mut rows = Vec::with_capacity(config.n_iterations + 1);
    let emit = |state: &NetworkState, rows: &mut Vec<MetricRow>| {
        let row = metric_row(state, ctx, state.iteration == config.n_iterations);
        sink.record(&ctx.run_id, &row);
        rows.push(row);
    };
    emit(&state, &mut rows);
    for _ in 0..config.n_iterations {
        state = match config.variant {
            Variant::RegularizedDiffusion => step_regularized_diffusion(&state, agents, a, config, &rngs)?,
            Variant::NonIncremental => step_non_incremental(&state, agents, a, config, &rngs)?,
            Variant::CentralizedReference => {
                let iteration = state.iteration + 1;
                let w = step_centralized(&state.w[0], agents, &ctx.centroid_weights, config)
                    .map_err(|_| EngineError::DivergenceDetected { iteration, agent: 0 })?;
                NetworkState { w: vec![w; a.n()], iteration }
            }
        };
        emit(&state, &mut rows);
    }
    Ok(RunRecord { run_id: ctx.run_id.clone(), seed: config.seed, fingerprint: fingerprint(config), rows })
}
