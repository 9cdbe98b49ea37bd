//! Experiment configuration: TOML grammar, overrides and validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use super::ExperimentError;
use crate::engine::{AgentClass, Variant};
use crate::risks::QuadraticNoise;
use crate::smoothing::Regularizer;
use crate::topology::NetworkSpec;

/// Top-level experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Directory receiving CSVs and the resolved-config echo; defaults to
    /// `out/<name>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    pub network: NetworkSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roster: Option<RosterSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub agents: Vec<AgentEntry>,
    pub algorithm: AlgorithmSpec,
    #[serde(default)]
    pub metrics: MetricsSpec,
    #[serde(default)]
    pub verify: VerifySpec,
}

/// Feature model shared by logistic agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub dim: usize,
    /// Number of leading template coordinates equal to one.
    pub informative: usize,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default)]
    pub eval_seed: u64,
    #[serde(default)]
    pub test_size: usize,
    #[serde(default = "default_test_sigma")]
    pub test_sigma: f64,
}

fn default_eval_samples() -> usize {
    crate::risks::DEFAULT_EVAL_SAMPLES
}

fn default_test_sigma() -> f64 {
    1.0
}

/// Risk of a single agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RiskSpec {
    Zero,
    /// `w^T H w / 2 - b^T w`, with `hessian` given row by row.
    Quadratic {
        hessian: Vec<Vec<f64>>,
        b: Vec<f64>,
        #[serde(default)]
        noise: QuadraticNoise,
    },
    /// Logistic loss on the `[data]` feature model with noise level `sigma`.
    LogisticL2 { rho2: f64, sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentEntry {
    #[serde(default = "default_class")]
    pub class: AgentClass,
    pub risk: RiskSpec,
    #[serde(default = "default_regularizer")]
    pub regularizer: Regularizer,
}

fn default_class() -> AgentClass {
    AgentClass::Custom
}

fn default_regularizer() -> Regularizer {
    Regularizer::Zero
}

/// Generators that expand into an explicit agent list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RosterSpec {
    /// Fully-, data- and structure-informed logistic agents. Fully- and
    /// structure-informed agents each learn `mask_size` irrelevant
    /// coordinates drawn uniformly at random and regularize them with
    /// `rho1 ||w_g||_1`. Training noise levels are log-uniform in
    /// `[sigma_min, sigma_max]` unless listed in `sigmas`.
    HeterogeneousLogistic {
        fully_informed: usize,
        data_informed: usize,
        structure_informed: usize,
        mask_size: usize,
        rho1: f64,
        rho2: f64,
        #[serde(default = "default_sigma_min")]
        sigma_min: f64,
        #[serde(default = "default_sigma_max")]
        sigma_max: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigmas: Option<Vec<f64>>,
        #[serde(default)]
        seed: u64,
    },
    /// Quadratic risks `H_k = Q_k diag(eig) Q_k^T` with eigenvalues uniform
    /// in `[eig_min, eig_max]`, random orthogonal `Q_k` and
    /// `b_k ~ N(0, b_scale^2 I)`. With `mask_size > 0` every agent carries
    /// `rho1 ||w_g||_1` on a random mask of that size.
    RandomQuadratic {
        n_agents: usize,
        dim: usize,
        eig_min: f64,
        eig_max: f64,
        #[serde(default = "default_b_scale")]
        b_scale: f64,
        #[serde(default)]
        noise: QuadraticNoise,
        #[serde(default)]
        rho1: f64,
        #[serde(default)]
        mask_size: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_sigma_min() -> f64 {
    0.1
}

fn default_sigma_max() -> f64 {
    1.0
}

fn default_b_scale() -> f64 {
    1.0
}

/// Comparison arms sharing the roster and random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// The agents as configured.
    Regularized,
    /// All regularizers replaced by zero.
    Unregularized,
    /// Identity combination matrix.
    NonCooperative,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Regularized => "regularized",
            Arm::Unregularized => "unregularized",
            Arm::NonCooperative => "non_cooperative",
        }
    }
}

fn default_arms() -> Vec<Arm> {
    vec![Arm::Regularized]
}

fn default_repetitions() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmSpec {
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_sweep: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Couples `delta = mu^(1/2 - kappa)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    /// Smoothing values for bias verification.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_sweep: Option<Vec<f64>>,
    pub iterations: usize,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub exact_gradients: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<Vec<f64>>,
    #[serde(default = "default_arms")]
    pub arms: Vec<Arm>,
}

fn default_variant() -> Variant {
    Variant::RegularizedDiffusion
}

impl AlgorithmSpec {
    /// Step sizes to run: the sweep if present, else the single `mu`.
    pub fn mus(&self) -> Vec<f64> {
        self.mu_sweep.clone().or(self.mu.map(|m| vec![m])).unwrap_or_default()
    }

    /// Smoothing for step `mu`.
    pub fn delta_for(&self, mu: f64) -> Option<f64> {
        match (self.kappa, self.delta) {
            (Some(kappa), _) => Some(mu.powf(0.5 - kappa)),
            (None, Some(d)) => Some(d),
            _ => None,
        }
    }
}

/// Reference point for MSD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Minimizer of the smoothed aggregate.
    Smoothed,
    /// Minimizer of the non-smooth aggregate.
    Nonsmooth,
    /// The origin; skips the oracle solve.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSpec {
    #[serde(default = "default_oracle_tol")]
    pub oracle_tol: f64,
    #[serde(default = "default_window")]
    pub window_fraction: f64,
    /// Measure test error every this many iterations (0 disables it).
    #[serde(default)]
    pub test_every: usize,
    #[serde(default = "default_target")]
    pub target: Target,
    /// Write one CSV per run (summaries are always written).
    #[serde(default = "default_true")]
    pub write_runs: bool,
}

fn default_oracle_tol() -> f64 {
    crate::solvers::DEFAULT_TOLERANCE
}

fn default_window() -> f64 {
    0.2
}

fn default_target() -> Target {
    Target::Smoothed
}

fn default_true() -> bool {
    true
}

impl Default for MetricsSpec {
    fn default() -> Self {
        Self {
            oracle_tol: default_oracle_tol(),
            window_fraction: default_window(),
            test_every: 0,
            target: default_target(),
            write_runs: true,
        }
    }
}

/// Settings of the bound-verification sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySpec {
    /// Steps as fractions of the largest contractive step.
    #[serde(default = "default_factors")]
    pub contraction_factors: Vec<f64>,
    #[serde(default = "default_contraction_steps")]
    pub contraction_steps: usize,
}

fn default_factors() -> Vec<f64> {
    vec![0.5, 0.1]
}

fn default_contraction_steps() -> usize {
    500
}

impl Default for VerifySpec {
    fn default() -> Self {
        Self { contraction_factors: default_factors(), contraction_steps: default_contraction_steps() }
    }
}

fn invalid(field: &str, message: impl Into<String>) -> ExperimentError {
    ExperimentError::Validation { field: field.to_string(), message: message.into() }
}

fn parse_override_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn find_key_paths(table: &Table, key: &str, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    for (k, v) in table {
        prefix.push(k.clone());
        if k == key {
            out.push(prefix.clone());
        }
        if let Value::Table(t) = v {
            find_key_paths(t, key, prefix, out);
        }
        prefix.pop();
    }
}

/// Known homes of bare keys that may be absent from the file.
fn default_home(key: &str) -> Option<&'static str> {
    match key {
        "mu" | "mu_sweep" | "delta" | "kappa" | "delta_sweep" | "iterations" | "repetitions" | "seed"
        | "exact_gradients" | "variant" | "arms" | "init" => Some("algorithm"),
        "oracle_tol" | "window_fraction" | "test_every" | "target" | "write_runs" => Some("metrics"),
        "contraction_factors" | "contraction_steps" => Some("verify"),
        "output_dir" | "name" => Some(""),
        _ => None,
    }
}

/// Applies `key=value` overrides to a parsed TOML document. Keys are
/// dotted paths (`algorithm.mu`) or bare names resolved to the unique
/// matching key in the document.
pub fn apply_overrides(doc: &mut Table, overrides: &[String]) -> Result<(), ExperimentError> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| ExperimentError::Override(format!("`{item}` is not of the form key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let path: Vec<String> = if key.contains('.') {
            key.split('.').map(str::to_string).collect()
        } else {
            let mut found = Vec::new();
            find_key_paths(doc, key, &mut Vec::new(), &mut found);
            match found.len() {
                1 => found.remove(0),
                0 => match default_home(key) {
                    Some("") => vec![key.to_string()],
                    Some(home) => vec![home.to_string(), key.to_string()],
                    None => return Err(ExperimentError::Override(format!("no config key named `{key}`"))),
                },
                _ => {
                    let names: Vec<String> = found.iter().map(|p| p.join(".")).collect();
                    return Err(ExperimentError::Override(format!(
                        "`{key}` is ambiguous; use one of {}",
                        names.join(", ")
                    )));
                }
            }
        };
        let mut cursor = &mut *doc;
        for segment in &path[..path.len() - 1] {
            let entry = cursor.entry(segment.clone()).or_insert_with(|| Value::Table(Table::new()));
            cursor = entry
                .as_table_mut()
                .ok_or_else(|| ExperimentError::Override(format!("`{segment}` in `{key}` is not a table")))?;
        }
        cursor.insert(path[path.len() - 1].clone(), parse_override_value(raw));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parses a config document after applying overrides, then validates it.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ExperimentError> {
        let mut doc: Table = toml::from_str(text).map_err(|e| ExperimentError::ConfigParse(e.to_string()))?;
        apply_overrides(&mut doc, overrides)?;
        let config: Self = Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| ExperimentError::ConfigParse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::ConfigParse(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn output_dir(&self) -> String {
        self.output_dir.clone().unwrap_or_else(|| format!("out/{}", self.name))
    }

    /// Number of agents the roster or explicit list defines.
    pub fn n_agents(&self) -> usize {
        match &self.roster {
            Some(RosterSpec::HeterogeneousLogistic { fully_informed, data_informed, structure_informed, .. }) => {
                fully_informed + data_informed + structure_informed
            }
            Some(RosterSpec::RandomQuadratic { n_agents, .. }) => *n_agents,
            None => self.agents.len(),
        }
    }

    /// Problem dimension implied by the config.
    pub fn dim(&self) -> Option<usize> {
        if let Some(RosterSpec::RandomQuadratic { dim, .. }) = &self.roster {
            return Some(*dim);
        }
        if let Some(d) = &self.data {
            return Some(d.dim);
        }
        self.agents.iter().find_map(|a| match &a.risk {
            RiskSpec::Quadratic { b, .. } => Some(b.len()),
            _ => None,
        })
    }

    /// Checks the invariants that can be decided without building the
    /// problem; each error names the offending field.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let alg = &self.algorithm;
        if self.roster.is_some() && !self.agents.is_empty() {
            return Err(invalid("agents", "give either [roster] or [[agents]], not both"));
        }
        if self.n_agents() == 0 {
            return Err(invalid("agents", "the experiment has no agents"));
        }
        if self.network.topology.n_agents() != self.n_agents() {
            return Err(invalid(
                "network.topology.n_agents",
                format!("network has {} agents but the roster defines {}", self.network.topology.n_agents(), self.n_agents()),
            ));
        }
        let dim = self.dim().ok_or_else(|| invalid("agents", "cannot infer the problem dimension"))?;
        if dim == 0 {
            return Err(invalid("data.dim", "dimension must be positive"));
        }
        let needs_data = matches!(self.roster, Some(RosterSpec::HeterogeneousLogistic { .. }))
            || self.agents.iter().any(|a| matches!(a.risk, RiskSpec::LogisticL2 { .. }));
        if let Some(d) = &self.data {
            if d.informative > d.dim {
                return Err(invalid("data.informative", "more informative coordinates than dimensions"));
            }
            if d.eval_samples == 0 {
                return Err(invalid("data.eval_samples", "must be positive"));
            }
            if !(d.test_sigma >= 0.0) {
                return Err(invalid("data.test_sigma", "must be nonnegative"));
            }
        } else if needs_data {
            return Err(invalid("data", "logistic risks need a [data] block"));
        }
        for (k, agent) in self.agents.iter().enumerate() {
            let field = |f: &str| format!("agents[{k}].{f}");
            match &agent.risk {
                RiskSpec::Quadratic { hessian, b, .. } => {
                    if b.len() != dim {
                        return Err(invalid(&field("risk.b"), format!("length {} differs from dimension {dim}", b.len())));
                    }
                    if hessian.len() != dim || hessian.iter().any(|row| row.len() != dim) {
                        return Err(invalid(&field("risk.hessian"), format!("must be {dim} x {dim}")));
                    }
                }
                RiskSpec::LogisticL2 { rho2, sigma } => {
                    if !(*rho2 >= 0.0) {
                        return Err(invalid(&field("risk.rho2"), "must be nonnegative"));
                    }
                    if !(*sigma >= 0.0) {
                        return Err(invalid(&field("risk.sigma"), "must be nonnegative"));
                    }
                }
                RiskSpec::Zero => {}
            }
            agent
                .regularizer
                .validate(dim)
                .map_err(|e| invalid(&field("regularizer"), e.to_string()))?;
        }
        if let Some(roster) = &self.roster {
            validate_roster(roster, self.data.as_ref())?;
        }

        let mus = alg.mus();
        if mus.is_empty() {
            return Err(invalid("algorithm.mu", "give mu or mu_sweep"));
        }
        if let Some(bad) = mus.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
            return Err(invalid("algorithm.mu", format!("step sizes must be positive, got {bad}")));
        }
        if alg.kappa.is_some() && alg.delta.is_some() {
            return Err(invalid("algorithm.kappa", "give delta or kappa, not both"));
        }
        if let Some(kappa) = alg.kappa {
            if !(kappa > 0.25 && kappa < 0.5) {
                return Err(invalid("algorithm.kappa", format!("must lie in (1/4, 1/2), got {kappa}")));
            }
        }
        if let Some(d) = alg.delta {
            if !(d > 0.0 && d.is_finite()) {
                return Err(invalid("algorithm.delta", format!("must be positive, got {d}")));
            }
        }
        if alg.kappa.is_none() && alg.delta.is_none() {
            return Err(invalid("algorithm.delta", "give delta or kappa"));
        }
        for &mu in &mus {
            let delta = alg.delta_for(mu).expect("checked above");
            if mu > 2.0 * delta {
                return Err(invalid(
                    "algorithm.mu",
                    format!("mu = {mu} exceeds 2 delta = {} (delta = {delta})", 2.0 * delta),
                ));
            }
        }
        if let Some(sweep) = &alg.delta_sweep {
            if let Some(bad) = sweep.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
                return Err(invalid("algorithm.delta_sweep", format!("values must be positive, got {bad}")));
            }
        }
        if alg.repetitions == 0 {
            return Err(invalid("algorithm.repetitions", "must be at least 1"));
        }
        if alg.arms.is_empty() {
            return Err(invalid("algorithm.arms", "list at least one arm"));
        }
        if let Some(init) = &alg.init {
            if init.len() != dim {
                return Err(invalid("algorithm.init", format!("length {} differs from dimension {dim}", init.len())));
            }
        }
        let m = &self.metrics;
        if !(m.window_fraction > 0.0 && m.window_fraction <= 1.0) {
            return Err(invalid("metrics.window_fraction", "must lie in (0, 1]"));
        }
        if !(m.oracle_tol > 0.0) {
            return Err(invalid("metrics.oracle_tol", "must be positive"));
        }
        if m.test_every > 0 && self.data.as_ref().is_none_or(|d| d.test_size == 0) {
            return Err(invalid("data.test_size", "test error needs a nonempty test set"));
        }
        if self.verify.contraction_factors.iter().any(|f| !(*f > 0.0)) {
            return Err(invalid("verify.contraction_factors", "factors must be positive"));
        }
        Ok(())
    }
}

fn validate_roster(roster: &RosterSpec, data: Option<&DataSpec>) -> Result<(), ExperimentError> {
    match roster {
        RosterSpec::HeterogeneousLogistic {
            fully_informed,
            data_informed,
            mask_size,
            rho1,
            rho2,
            sigma_min,
            sigma_max,
            sigmas,
            ..
        } => {
            let data = data.ok_or_else(|| invalid("data", "logistic rosters need a [data] block"))?;
            if fully_informed + data_informed == 0 {
                return Err(invalid("roster.data_informed", "at least one agent must observe data"));
            }
            if *mask_size > data.dim - data.informative {
                return Err(invalid("roster.mask_size", "exceeds the number of irrelevant coordinates"));
            }
            if !(*rho1 >= 0.0) || !(*rho2 > 0.0) {
                return Err(invalid("roster.rho2", "rho1 must be >= 0 and rho2 > 0"));
            }
            if !(*sigma_min > 0.0 && sigma_min <= sigma_max) {
                return Err(invalid("roster.sigma_min", "need 0 < sigma_min <= sigma_max"));
            }
            if let Some(s) = sigmas {
                if s.len() != fully_informed + data_informed {
                    return Err(invalid("roster.sigmas", "need one sigma per data-observing agent"));
                }
            }
        }
        RosterSpec::RandomQuadratic { n_agents, dim, eig_min, eig_max, mask_size, rho1, .. } => {
            if *n_agents == 0 || *dim == 0 {
                return Err(invalid("roster.n_agents", "need at least one agent and dimension"));
            }
            if !(*eig_min > 0.0 && eig_min <= eig_max) {
                return Err(invalid("roster.eig_min", "need 0 < eig_min <= eig_max"));
            }
            if mask_size > dim {
                return Err(invalid("roster.mask_size", "exceeds the dimension"));
            }
            if !(*rho1 >= 0.0) {
                return Err(invalid("roster.rho1", "must be nonnegative"));
            }
        }
    }
    Ok(())
}
