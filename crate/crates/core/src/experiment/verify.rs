//! Empirical checks of the smoothing-bias bound, centralized contraction
//! and steady-state MSD scaling.

use nalgebra::DVector;

use super::{
    diffusion_config, run_pool, target_point, window_mean_msd, ExperimentError, Problem,
};
use crate::engine::{run, step_centralized, DiffusionConfig, NullSink, RunContext};
use crate::metrics::{loglog_slope, mean_and_ci, steady_state_msd, SweepPoint, SweepSummary};
use crate::solvers::{
    bias_bound_rhs, curvature_constants, gamma_c, max_contractive_step, recover_subgradients, solve_nonsmooth,
    solve_smoothed,
};

/// Minimum log-log slope of measured bias against `delta`.
pub const BIAS_SLOPE_MIN: f64 = 0.9;
/// Allowed excess of a measured contraction ratio over `gamma_c`.
pub const CONTRACTION_SLACK: f64 = 1e-6;
/// Accepted band for the log-log slope of steady-state MSD against `mu`.
pub const MSD_SLOPE_BAND: (f64, f64) = (0.8, 1.3);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyKind {
    Bias,
    Contraction,
    Msd,
}

impl std::str::FromStr for VerifyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bias" => Ok(Self::Bias),
            "contraction" => Ok(Self::Contraction),
            "msd" => Ok(Self::Msd),
            other => Err(format!("unknown verification `{other}` (expected bias, contraction or msd)")),
        }
    }
}

/// Result tag of one report line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    /// The check could not be applied, e.g. no contraction is guaranteed.
    Warn,
    /// Context for the other lines.
    Info,
}

/// One line of a verification report.
#[derive(Debug, Clone, PartialEq)]
pub struct Criterion {
    pub name: String,
    pub status: Status,
    pub detail: String,
}

impl Criterion {
    fn check(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        let status = if passed { Status::Pass } else { Status::Fail };
        Self { name: name.into(), status, detail: detail.into() }
    }

    fn warn(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Self { name: name.into(), status: Status::Warn, detail: detail.into() }
    }

    fn info(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Self { name: name.into(), status: Status::Info, detail: detail.into() }
    }

    pub fn passed(&self) -> Option<bool> {
        match self.status {
            Status::Pass => Some(true),
            Status::Fail => Some(false),
            Status::Warn | Status::Info => None,
        }
    }

    pub fn line(&self) -> String {
        let tag = match self.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Warn => "WARN",
            Status::Info => "INFO",
        };
        format!("{tag} {}: {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub criteria: Vec<Criterion>,
    pub summaries: Vec<SweepSummary>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.criteria.iter().all(|c| c.status != Status::Fail)
    }
}

pub fn verify(problem: &Problem, kind: VerifyKind, workers: Option<usize>) -> Result<VerifyReport, ExperimentError> {
    match kind {
        VerifyKind::Bias => verify_bias(problem),
        VerifyKind::Contraction => verify_contraction(problem),
        VerifyKind::Msd => verify_msd(problem, workers),
    }
}

fn missing(field: &str, message: &str) -> ExperimentError {
    ExperimentError::Validation { field: field.into(), message: message.into() }
}

fn point(value: f64, mean: f64) -> SweepPoint {
    SweepPoint { value, mean, ci_half_width: 0.0, repetitions: 1 }
}

/// `||w° - w_delta°||^2` against the bound over the configured `delta_sweep`.
fn verify_bias(problem: &Problem) -> Result<VerifyReport, ExperimentError> {
    let deltas = problem
        .config
        .algorithm
        .delta_sweep
        .clone()
        .ok_or_else(|| missing("algorithm.delta_sweep", "bias verification needs a delta sweep"))?;
    let tol = problem.config.metrics.oracle_tol;
    let (agents, p) = (&problem.agents, &problem.p);
    let (lambda_l, _) = curvature_constants(agents, p);
    let w_star = solve_nonsmooth(agents, p, tol)?.w_star;
    let r_star = recover_subgradients(agents, p, &w_star)?;
    // both oracles are accurate to about tol / lambda_L, which bounds the
    // smallest bias that can be resolved
    let floor = (10.0 * tol / lambda_l).powi(2);

    let mut criteria = Vec::new();
    let mut bias_pts = Vec::new();
    let mut bound_pts = Vec::new();
    for &delta in &deltas {
        let w_delta = solve_smoothed(agents, p, delta, tol)?.w_star;
        let bias = (&w_star - &w_delta).norm_squared();
        let bound = bias_bound_rhs(agents, p, delta, &r_star)?;
        criteria.push(Criterion::check(
            format!("bias bound at delta={delta:e}"),
            bias <= bound,
            format!("measured {bias:.6e} <= bound {bound:.6e}"),
        ));
        bias_pts.push(point(delta, bias));
        bound_pts.push(point(delta, bound));
    }
    let resolved: Vec<&SweepPoint> = bias_pts.iter().filter(|pt| pt.mean > floor).collect();
    let (slope, intercept) = if resolved.len() >= 3 {
        let xs: Vec<f64> = resolved.iter().map(|pt| pt.value).collect();
        let ys: Vec<f64> = resolved.iter().map(|pt| pt.mean).collect();
        loglog_slope(&xs, &ys).unwrap_or((f64::NAN, f64::NAN))
    } else {
        (f64::NAN, f64::NAN)
    };
    criteria.push(if resolved.is_empty() {
        Criterion::check(
            "bias log-log slope",
            true,
            format!("bias is below the oracle resolution {floor:.1e} at every delta, so it vanishes faster than any power"),
        )
    } else if resolved.len() < 3 {
        Criterion::check(
            "bias log-log slope",
            false,
            format!("only {} sweep points resolve a nonzero bias; need 3 for a fit", resolved.len()),
        )
    } else {
        Criterion::check(
            "bias log-log slope",
            slope >= BIAS_SLOPE_MIN,
            format!("slope {slope:.4} >= {BIAS_SLOPE_MIN} over {} points", resolved.len()),
        )
    });
    let summaries = vec![
        SweepSummary { axis: "bias".into(), points: bias_pts, slope, intercept },
        SweepSummary { axis: "bias_bound".into(), points: bound_pts, slope: f64::NAN, intercept: f64::NAN },
    ];
    Ok(VerifyReport { criteria, summaries })
}

/// Per-step contraction of `T_c` at fractions of the largest contractive step.
fn verify_contraction(problem: &Problem) -> Result<VerifyReport, ExperimentError> {
    let alg = &problem.config.algorithm;
    let delta = alg
        .delta
        .ok_or_else(|| missing("algorithm.delta", "contraction verification needs a fixed delta"))?;
    let tol = problem.config.metrics.oracle_tol;
    let verify = &problem.config.verify;
    let (agents, p) = (&problem.agents, &problem.p);
    let (lambda_l, lambda_u) = curvature_constants(agents, p);
    let mu_star = max_contractive_step(delta, lambda_l, lambda_u);
    let w_delta = solve_smoothed(agents, p, delta, tol)?.w_star;
    let dim = w_delta.len();
    let init = alg.init.as_ref().map_or_else(|| DVector::from_element(dim, 10.0), |v| DVector::from_column_slice(v));
    // below this distance the reference point's own error dominates
    let floor = 1e3 * tol / lambda_l;

    let mut criteria = vec![Criterion::info(
        "constants",
        format!("lambda_L = {lambda_l:.6}, lambda_U = {lambda_u:.6}, delta = {delta}, mu* = {mu_star:.6e}"),
    )];
    let mut ratio_pts = Vec::new();
    let mut gamma_pts = Vec::new();
    for &factor in &verify.contraction_factors {
        let mu = factor * mu_star;
        let gamma = gamma_c(mu, delta, lambda_l, lambda_u);
        let config = DiffusionConfig::new(mu, delta, verify.contraction_steps);
        let mut w = init.clone();
        let mut max_ratio = 0.0f64;
        let mut measured = 0usize;
        for _ in 0..verify.contraction_steps {
            let before = (&w - &w_delta).norm();
            if before <= floor {
                break;
            }
            let next = match step_centralized(&w, agents, p, &config) {
                Ok(next) => next,
                Err(_) => {
                    max_ratio = f64::INFINITY;
                    break;
                }
            };
            max_ratio = max_ratio.max((&next - &w_delta).norm() / before);
            measured += 1;
            w = next;
        }
        let name = format!("contraction at mu={factor}*mu*");
        if gamma < 1.0 {
            criteria.push(Criterion::check(
                name,
                measured > 0 && max_ratio <= gamma + CONTRACTION_SLACK,
                format!("max ratio {max_ratio:.9} <= gamma_c {gamma:.9} + {CONTRACTION_SLACK:e} over {measured} steps"),
            ));
        } else {
            criteria.push(Criterion::warn(
                name,
                format!(
                    "gamma_c = {gamma:.6} >= 1, so no contraction is guaranteed; measured max ratio {max_ratio:.6}"
                ),
            ));
        }
        ratio_pts.push(point(factor, max_ratio));
        gamma_pts.push(point(factor, gamma));
    }
    let summaries = vec![
        SweepSummary { axis: "contraction_ratio_max".into(), points: ratio_pts, slope: f64::NAN, intercept: f64::NAN },
        SweepSummary { axis: "gamma_c".into(), points: gamma_pts, slope: f64::NAN, intercept: f64::NAN },
    ];
    Ok(VerifyReport { criteria, summaries })
}

/// Steady-state network MSD against `mu` with `delta = mu^(1/2 - kappa)`.
fn verify_msd(problem: &Problem, workers: Option<usize>) -> Result<VerifyReport, ExperimentError> {
    let alg = &problem.config.algorithm;
    if alg.kappa.is_none() {
        return Err(missing("algorithm.kappa", "msd verification couples delta to mu through kappa"));
    }
    let mus = alg.mus();
    let frac = problem.config.metrics.window_fraction;
    let targets = mus
        .iter()
        .map(|&mu| target_point(problem, alg.delta_for(mu).expect("kappa set")))
        .collect::<Result<Vec<_>, _>>()?;
    let tasks: Vec<(usize, usize)> = (0..mus.len()).flat_map(|m| (0..alg.repetitions).map(move |r| (m, r))).collect();
    let records = run_pool(workers, tasks, |(m, rep)| {
        let config = diffusion_config(alg, mus[m], rep);
        let run_id = format!("msd_mu{m}_rep{rep:03}");
        let ctx = RunContext {
            run_id: run_id.clone(),
            target: targets[m].clone(),
            centroid_weights: problem.p.clone(),
            test_set: None,
            test_every: 0,
        };
        run(&problem.agents, &problem.a, &config, &ctx, &NullSink)
            .map_err(|source| ExperimentError::Run { run_id, source })
    })?
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    let mut criteria = Vec::new();
    let mut points = Vec::new();
    for (m, &mu) in mus.iter().enumerate() {
        let recs: Vec<_> = records[m * alg.repetitions..(m + 1) * alg.repetitions].to_vec();
        let gate = steady_state_msd(&recs, frac);
        let (mean, ci) = mean_and_ci(&recs.iter().map(|r| window_mean_msd(r, frac)).collect::<Vec<_>>());
        criteria.push(match gate {
            Ok(v) => Criterion::check(
                format!("stationary window at mu={mu}"),
                true,
                format!("steady-state MSD {v:.6e} +- {ci:.1e} over {} repetitions", recs.len()),
            ),
            Err(e) => Criterion::check(format!("stationary window at mu={mu}"), false, e.to_string()),
        });
        points.push(SweepPoint { value: mu, mean, ci_half_width: ci, repetitions: recs.len() });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.value).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.mean).collect();
    let (slope, intercept) = loglog_slope(&xs, &ys).unwrap_or((f64::NAN, f64::NAN));
    let (lo, hi) = MSD_SLOPE_BAND;
    criteria.push(Criterion::check(
        "msd log-log slope",
        slope >= lo && slope <= hi,
        format!("slope {slope:.4} in [{lo}, {hi}]"),
    ));
    Ok(VerifyReport { criteria, summaries: vec![SweepSummary { axis: "msd".into(), points, slope, intercept }] })
}
