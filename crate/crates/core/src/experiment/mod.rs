//! Experiment orchestration: roster expansion, Monte-Carlo runs, sweeps,
//! artifacts and bound verification.

mod config;
pub mod presets;
mod verify;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

pub use config::{
    apply_overrides, AgentEntry, AlgorithmSpec, Arm, DataSpec, ExperimentConfig, MetricsSpec, RiskSpec, RosterSpec,
    Target, VerifySpec,
};
pub use verify::{
    verify, Criterion, Status, VerifyKind, VerifyReport, BIAS_SLOPE_MIN, CONTRACTION_SLACK, MSD_SLOPE_BAND,
};

use crate::engine::{
    run, AgentClass, AgentSpec, DiffusionConfig, EngineError, NullSink, RngStreams, RunContext, Smoothing,
    DOMAIN_TEST_SET,
};
use crate::metrics::{mean_and_ci, write_run_csv, write_sweep_csv, RunRecord, SweepPoint, SweepSummary};
use crate::risks::{DataModel, EvalNoise, LogisticRisk, QuadraticRisk, RiskError, Sample, SmoothRisk};
use crate::smoothing::Regularizer;
use crate::solvers::{solve_nonsmooth, solve_smoothed, SolverError};
use crate::topology::{CombinationMatrix, PerronVector, TopologyError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config parse error: {0}")]
    ConfigParse(String),
    #[error("invalid value for `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("bad override: {0}")]
    Override(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("run {run_id}: {source}")]
    Run { run_id: String, source: EngineError },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// A fully built problem ready to run.
pub struct Problem {
    /// The config with any roster expanded into explicit agents.
    pub config: ExperimentConfig,
    pub agents: Vec<AgentSpec>,
    pub a: CombinationMatrix,
    pub p: PerronVector,
    pub test_set: Vec<Sample>,
}

fn random_mask(rng: &mut impl Rng, candidates: std::ops::Range<usize>, size: usize) -> Vec<usize> {
    let offset = candidates.start;
    let mut mask: Vec<usize> =
        sample_indices(rng, candidates.len(), size).into_iter().map(|i| i + offset).collect();
    mask.sort_unstable();
    mask
}

fn expand_roster(roster: &RosterSpec, data: Option<&DataSpec>) -> Vec<AgentEntry> {
    match roster {
        RosterSpec::HeterogeneousLogistic {
            fully_informed,
            data_informed,
            structure_informed,
            mask_size,
            rho1,
            rho2,
            sigma_min,
            sigma_max,
            sigmas,
            seed,
        } => {
            let data = data.expect("validated");
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let observing = fully_informed + data_informed;
            let sigmas: Vec<f64> = sigmas.clone().unwrap_or_else(|| {
                let (lo, hi) = (sigma_min.ln(), sigma_max.ln());
                (0..observing).map(|_| (lo + (hi - lo) * rng.random::<f64>()).exp()).collect()
            });
            let mut agents = Vec::with_capacity(observing + structure_informed);
            let mask = |rng: &mut ChaCha8Rng| Regularizer::group_l1(*rho1, random_mask(rng, data.informative..data.dim, *mask_size));
            for (k, sigma) in sigmas.iter().enumerate() {
                let fully = k < *fully_informed;
                agents.push(AgentEntry {
                    class: if fully { AgentClass::FullyInformed } else { AgentClass::DataInformed },
                    risk: RiskSpec::LogisticL2 { rho2: *rho2, sigma: *sigma },
                    regularizer: if fully { mask(&mut rng) } else { Regularizer::Zero },
                });
            }
            for _ in 0..*structure_informed {
                agents.push(AgentEntry {
                    class: AgentClass::StructureInformed,
                    risk: RiskSpec::Zero,
                    regularizer: mask(&mut rng),
                });
            }
            agents
        }
        RosterSpec::RandomQuadratic { n_agents, dim, eig_min, eig_max, b_scale, noise, rho1, mask_size, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let m = *dim;
            (0..*n_agents)
                .map(|_| {
                    let gauss = DMatrix::from_fn(m, m, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let q = gauss.qr().q();
                    let eig = DVector::from_fn(m, |_, _| eig_min + (eig_max - eig_min) * rng.random::<f64>());
                    let h = &q * DMatrix::from_diagonal(&eig) * q.transpose();
                    let h = (&h + h.transpose()) * 0.5;
                    let b: Vec<f64> = (0..m).map(|_| b_scale * rng.sample::<f64, _>(StandardNormal)).collect();
                    let regularizer = if *mask_size > 0 && *rho1 > 0.0 {
                        Regularizer::group_l1(*rho1, random_mask(&mut rng, 0..m, *mask_size))
                    } else {
                        Regularizer::Zero
                    };
                    AgentEntry {
                        class: AgentClass::Custom,
                        risk: RiskSpec::Quadratic {
                            hessian: (0..m).map(|i| h.row(i).iter().copied().collect()).collect(),
                            b,
                            noise: *noise,
                        },
                        regularizer,
                    }
                })
                .collect()
        }
    }
}

/// Expands the roster so the config lists every agent explicitly.
pub fn resolve(config: &ExperimentConfig) -> ExperimentConfig {
    let mut out = config.clone();
    if let Some(roster) = out.roster.take() {
        out.agents = expand_roster(&roster, out.data.as_ref());
    }
    out
}

fn build_agent(entry: &AgentEntry, dim: usize, data: Option<(&DataSpec, &Arc<EvalNoise>)>) -> Result<AgentSpec, RiskError> {
    let risk = match &entry.risk {
        RiskSpec::Zero => SmoothRisk::Zero { dim },
        RiskSpec::Quadratic { hessian, b, noise } => SmoothRisk::Quadratic(QuadraticRisk::new(
            DMatrix::from_row_iterator(dim, dim, hessian.iter().flatten().copied()),
            DVector::from_column_slice(b),
            *noise,
        )?),
        RiskSpec::LogisticL2 { rho2, sigma } => {
            let (spec, eval) = data.expect("validated");
            let model = DataModel::new(DataModel::block_template(spec.dim, spec.informative), *sigma)?;
            SmoothRisk::LogisticL2(LogisticRisk::new(*rho2, model, eval.clone())?)
        }
    };
    Ok(AgentSpec { risk, regularizer: entry.regularizer.clone(), class: entry.class })
}

/// Builds network, agents and test set from a validated config.
pub fn build_problem(config: &ExperimentConfig) -> Result<Problem, ExperimentError> {
    config.validate()?;
    let resolved = resolve(config);
    let dim = resolved.dim().expect("validated");
    let (_, a) = resolved.network.build()?;
    let p = a.perron_vector()?;
    let needs_eval = resolved.agents.iter().any(|e| matches!(e.risk, RiskSpec::LogisticL2 { .. }));
    let eval = match &resolved.data {
        Some(d) if needs_eval => Some(Arc::new(EvalNoise::new(d.dim, d.eval_samples, d.eval_seed))),
        _ => None,
    };
    let data = resolved.data.as_ref().zip(eval.as_ref());
    let agents = resolved
        .agents
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let agent = build_agent(e, dim, data)?;
            agent.validate(k).map_err(|err| ExperimentError::Validation {
                field: format!("agents[{k}]"),
                message: err.to_string(),
            })?;
            Ok(agent)
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    let test_set = match &resolved.data {
        Some(d) if d.test_size > 0 => {
            let model = DataModel::new(DataModel::block_template(d.dim, d.informative), d.test_sigma)?;
            let mut rng = RngStreams::with_domain(resolved.algorithm.seed, DOMAIN_TEST_SET).stream(0, 0);
            model.draw_set(d.test_size, &mut rng)
        }
        _ => Vec::new(),
    };
    Ok(Problem { config: resolved, agents, a, p, test_set })
}

/// Per-repetition seed; repetition 0 uses the base seed.
pub fn repetition_seed(seed: u64, rep: usize) -> u64 {
    seed ^ (rep as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs tasks on a pool of `workers` threads (all cores when `None`),
/// returning results in input order.
pub fn run_pool<T, R, F>(workers: Option<usize>, tasks: Vec<T>, f: F) -> Result<Vec<R>, ExperimentError>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Send + Sync,
{
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder.build().map_err(|e| ExperimentError::Pool(e.to_string()))?;
    Ok(pool.install(|| tasks.into_par_iter().map(f).collect()))
}

/// One finished run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub arm: Arm,
    pub mu: f64,
    pub delta: f64,
    pub repetition: usize,
    pub record: RunRecord,
}

/// All runs of an experiment plus their summaries.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub runs: Vec<RunOutcome>,
    pub summaries: Vec<SweepSummary>,
    /// Steady-state results that could not be computed, with the reason.
    pub notes: Vec<String>,
}

impl ExperimentOutcome {
    pub fn records(&self, arm: Arm, mu: f64) -> Vec<&RunRecord> {
        self.runs.iter().filter(|r| r.arm == arm && r.mu == mu).map(|r| &r.record).collect()
    }
}

/// Agents and combination matrix of an arm.
pub fn arm_setup(problem: &Problem, arm: Arm) -> (Vec<AgentSpec>, CombinationMatrix, PerronVector) {
    match arm {
        Arm::Regularized => (problem.agents.clone(), problem.a.clone(), problem.p.clone()),
        Arm::Unregularized => {
            let agents = problem
                .agents
                .iter()
                .map(|a| AgentSpec { regularizer: Regularizer::Zero, ..a.clone() })
                .collect();
            (agents, problem.a.clone(), problem.p.clone())
        }
        Arm::NonCooperative => {
            let n = problem.agents.len();
            (problem.agents.clone(), CombinationMatrix::non_cooperative(n), PerronVector::uniform(n))
        }
    }
}

/// MSD reference point for smoothing `delta`.
pub fn target_point(problem: &Problem, delta: f64) -> Result<DVector<f64>, ExperimentError> {
    let dim = problem.agents[0].dim();
    let tol = problem.config.metrics.oracle_tol;
    Ok(match problem.config.metrics.target {
        Target::Zero => DVector::zeros(dim),
        Target::Smoothed => solve_smoothed(&problem.agents, &problem.p, delta, tol)?.w_star,
        Target::Nonsmooth => solve_nonsmooth(&problem.agents, &problem.p, tol)?.w_star,
    })
}

/// Diffusion settings of one run.
pub fn diffusion_config(alg: &AlgorithmSpec, mu: f64, rep: usize) -> DiffusionConfig {
    DiffusionConfig {
        mu,
        smoothing: match (alg.kappa, alg.delta) {
            (Some(kappa), _) => Smoothing::Coupled { kappa },
            (None, d) => Smoothing::Fixed(d.expect("validated")),
        },
        n_iterations: alg.iterations,
        variant: alg.variant,
        seed: repetition_seed(alg.seed, rep),
        exact_gradients: alg.exact_gradients,
        init: alg.init.as_ref().map(|v| DVector::from_column_slice(v)),
    }
}

/// Mean network MSD over the last `window_fraction` of one trace.
pub fn window_mean_msd(record: &RunRecord, window_fraction: f64) -> f64 {
    let len = record.rows.len();
    let window = ((len as f64 * window_fraction).round() as usize).clamp(1, len.max(1));
    record.rows[len - window..].iter().map(|r| r.msd_network).sum::<f64>() / window as f64
}

/// Mean test error over the last `window_fraction` of the measured points.
pub fn final_test_error(record: &RunRecord, window_fraction: f64) -> Option<f64> {
    let errs: Vec<f64> = record.rows.iter().filter_map(|r| r.test_error).collect();
    if errs.is_empty() {
        return None;
    }
    let window = ((errs.len() as f64 * window_fraction).round() as usize).clamp(1, errs.len());
    Some(errs[errs.len() - window..].iter().sum::<f64>() / window as f64)
}

/// Final-window test error of an arm across repetitions: `(mean, 95% half-width)`.
pub fn arm_test_error(outcome: &ExperimentOutcome, arm: Arm, mu: f64, window_fraction: f64) -> Option<(f64, f64)> {
    let per_rep: Option<Vec<f64>> =
        outcome.records(arm, mu).iter().map(|r| final_test_error(r, window_fraction)).collect();
    per_rep.filter(|v| !v.is_empty()).map(|v| mean_and_ci(&v))
}

/// Executes every (arm, step size, repetition) combination.
pub fn run_experiment(problem: &Problem, workers: Option<usize>) -> Result<ExperimentOutcome, ExperimentError> {
    let cfg = &problem.config;
    let alg = &cfg.algorithm;
    let mus = alg.mus();
    let mut targets = BTreeMap::new();
    for &mu in &mus {
        let delta = alg.delta_for(mu).expect("validated");
        if let std::collections::btree_map::Entry::Vacant(e) = targets.entry(delta.to_bits()) {
            e.insert(target_point(problem, delta)?);
        }
    }
    let arms: Vec<(Arm, Vec<AgentSpec>, CombinationMatrix, PerronVector)> = alg
        .arms
        .iter()
        .map(|&arm| {
            let (agents, a, p) = arm_setup(problem, arm);
            (arm, agents, a, p)
        })
        .collect();
    let mut tasks = Vec::new();
    for (ai, _) in arms.iter().enumerate() {
        for (mi, &mu) in mus.iter().enumerate() {
            for rep in 0..alg.repetitions {
                tasks.push((ai, mi, mu, rep));
            }
        }
    }
    let results = run_pool(workers, tasks, |(ai, mi, mu, rep)| {
        let (arm, agents, a, p) = &arms[ai];
        let config = diffusion_config(alg, mu, rep);
        let delta = config.delta();
        let run_id = format!("{}_mu{mi}_rep{rep:03}", arm.name());
        let ctx = RunContext {
            run_id: run_id.clone(),
            target: targets[&delta.to_bits()].clone(),
            centroid_weights: p.clone(),
            test_set: (!problem.test_set.is_empty()).then_some(problem.test_set.as_slice()),
            test_every: cfg.metrics.test_every,
        };
        run(agents, a, &config, &ctx, &NullSink)
            .map(|record| RunOutcome { arm: *arm, mu, delta, repetition: rep, record })
            .map_err(|source| ExperimentError::Run { run_id, source })
    })?;
    let runs = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut outcome = ExperimentOutcome { runs, summaries: Vec::new(), notes: Vec::new() };
    summarize(cfg, &mus, &mut outcome);
    Ok(outcome)
}

fn summarize(cfg: &ExperimentConfig, mus: &[f64], outcome: &mut ExperimentOutcome) {
    let frac = cfg.metrics.window_fraction;
    let mut summaries = Vec::new();
    let mut notes = Vec::new();
    for &arm in &cfg.algorithm.arms {
        let mut samples = Vec::new();
        for &mu in mus {
            let records = outcome.records(arm, mu);
            let owned: Vec<RunRecord> = records.iter().map(|r| (*r).clone()).collect();
            if let Err(e) = crate::metrics::steady_state_msd(&owned, frac) {
                notes.push(format!("steady-state MSD for {} at mu = {mu}: {e}", arm.name()));
            }
            samples.push(records.iter().map(|r| window_mean_msd(r, frac)).collect::<Vec<f64>>());
        }
        summaries.push(SweepSummary::from_samples(&format!("msd:{}", arm.name()), mus, &samples));
        if cfg.metrics.test_every > 0 {
            for &mu in mus {
                let records = outcome.records(arm, mu);
                let Some(first) = records.first() else { continue };
                let mut points = Vec::new();
                for (idx, row) in first.rows.iter().enumerate() {
                    if row.test_error.is_none() {
                        continue;
                    }
                    let vals: Vec<f64> = records.iter().filter_map(|r| r.rows[idx].test_error).collect();
                    let (mean, ci_half_width) = mean_and_ci(&vals);
                    points.push(SweepPoint { value: row.iter as f64, mean, ci_half_width, repetitions: vals.len() });
                }
                let axis = if mus.len() > 1 {
                    format!("test_error:{}:mu={mu}", arm.name())
                } else {
                    format!("test_error:{}", arm.name())
                };
                summaries.push(SweepSummary { axis, points, slope: f64::NAN, intercept: f64::NAN });
            }
        }
    }
    outcome.summaries = summaries;
    outcome.notes = notes;
}

/// Name of the resolved-config echo written next to the CSVs.
pub const ECHO_FILE: &str = "resolved_config.toml";

/// Writes the resolved config, run CSVs and `sweep.csv` into `dir`.
pub fn write_artifacts(dir: &Path, problem: &Problem, outcome: &ExperimentOutcome) -> Result<Vec<PathBuf>, ExperimentError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let echo = dir.join(ECHO_FILE);
    std::fs::write(&echo, problem.config.to_toml_string())?;
    written.push(echo);
    if problem.config.metrics.write_runs {
        for run in &outcome.runs {
            written.push(write_run_csv(dir, &run.record)?);
        }
    }
    written.push(write_sweep_csv(dir, &outcome.summaries)?);
    Ok(written)
}

/// Loads, runs and writes one experiment; returns the outcome and the
/// summary lines to print.
pub fn cli_run(
    config: &ExperimentConfig,
    workers: Option<usize>,
) -> Result<(ExperimentOutcome, Vec<String>), ExperimentError> {
    let problem = build_problem(config)?;
    let outcome = run_experiment(&problem, workers)?;
    let dir = PathBuf::from(problem.config.output_dir());
    write_artifacts(&dir, &problem, &outcome)?;
    let mut lines = vec![format!(
        "{}: {} runs written to {}",
        problem.config.name,
        outcome.runs.len(),
        dir.display()
    )];
    let frac = problem.config.metrics.window_fraction;
    for &arm in &problem.config.algorithm.arms {
        for mu in problem.config.algorithm.mus() {
            let recs = outcome.records(arm, mu);
            let (m, ci) = mean_and_ci(&recs.iter().map(|r| window_mean_msd(r, frac)).collect::<Vec<_>>());
            let mut line = format!("  {:<16} mu={mu:<8} steady-state MSD {m:.4e} +- {ci:.1e}", arm.name());
            if let Some((te, te_ci)) = arm_test_error(&outcome, arm, mu, frac) {
                line.push_str(&format!("  final test error {te:.4} +- {te_ci:.4}"));
            }
            lines.push(line);
        }
    }
    lines.extend(outcome.notes.iter().map(|n| format!("  note: {n}")));
    Ok((outcome, lines))
}

/// Runs one verification and writes its echo and `sweep.csv`; returns the
/// report.
pub fn cli_verify(
    config: &ExperimentConfig,
    kind: VerifyKind,
    workers: Option<usize>,
) -> Result<VerifyReport, ExperimentError> {
    let problem = build_problem(config)?;
    let report = verify(&problem, kind, workers)?;
    let dir = PathBuf::from(problem.config.output_dir());
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(ECHO_FILE), problem.config.to_toml_string())?;
    write_sweep_csv(&dir, &report.summaries)?;
    Ok(report)
}
