//! High-accuracy reference minimizers of the aggregate problems
//! `min sum_k p_k (J_k + R_k)` and `min sum_k p_k (J_k + R_k^delta)`, plus
//! the smoothing-bias bound and contraction constants.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::engine::{aggregate_smoothed_gradient, AgentSpec};
use crate::risks::{weighted_gradient_sum, SmoothRisk};
use crate::smoothing::{smooth_eval, ProximityFunction, Regularizer, SmoothingError};
use crate::topology::PerronVector;

pub const DEFAULT_TOLERANCE: f64 = 1e-10;
const NONSMOOTH_MAX_ITERS: usize = 1_000_000;
const SMOOTHED_MAX_ITERS: usize = 1_000_000;
const SUBGRADIENT_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("solver did not converge in {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("aggregate regularizer has no closed-form prox: {0}")]
    NonSeparableSum(String),
    #[error("aggregate risk is not strongly convex (lambda_L = {0:e})")]
    NotStronglyConvex(f64),
    #[error("no valid subgradient allocation at coordinate {coordinate}: stationarity residual {residual:e}")]
    SubgradientInfeasible { coordinate: usize, residual: f64 },
    #[error("expected {expected} agents, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Smoothing(#[from] SmoothingError),
}

/// Result of a reference solve.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub w_star: DVector<f64>,
    pub objective: f64,
    /// First-order optimality measure at `w_star`.
    pub residual: f64,
    pub iterations: usize,
}

/// `sum_k p_k J_k` with quadratic terms folded into one Hessian.
struct AggregateRisk<'a> {
    hessian: DMatrix<f64>,
    b: DVector<f64>,
    others: Vec<(f64, &'a SmoothRisk)>,
}

impl<'a> AggregateRisk<'a> {
    fn new(agents: &'a [AgentSpec], p: &PerronVector) -> Self {
        let dim = agents.first().map_or(0, AgentSpec::dim);
        let mut hessian = DMatrix::zeros(dim, dim);
        let mut b = DVector::zeros(dim);
        let mut others = Vec::new();
        for (k, agent) in agents.iter().enumerate() {
            match &agent.risk {
                SmoothRisk::Zero { .. } => {}
                SmoothRisk::Quadratic(q) => {
                    hessian += &q.hessian * p[k];
                    b += &q.b * p[k];
                }
                other => others.push((p[k], other)),
            }
        }
        Self { hessian, b, others }
    }

    fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        let mut g = &self.hessian * w - &self.b;
        if !self.others.is_empty() {
            g += weighted_gradient_sum(&self.others, w);
        }
        g
    }

    fn value(&self, w: &DVector<f64>) -> f64 {
        0.5 * w.dot(&(&self.hessian * w)) - self.b.dot(w)
            + self.others.iter().map(|(c, r)| c * r.value(w)).sum::<f64>()
    }

    /// Lipschitz constant of the aggregate gradient.
    fn lipschitz(&self) -> f64 {
        let quad = if self.hessian.nrows() > 0 {
            SymmetricEigen::new(self.hessian.clone()).eigenvalues.max().max(0.0)
        } else {
            0.0
        };
        quad + self.others.iter().map(|(c, r)| c * r.curvature_bounds().1).sum::<f64>()
    }
}

/// Strong-convexity constant of the aggregate risk and the largest local
/// smoothness constant, `(lambda_L, lambda_U)`. Quadratic aggregates use
/// the exact minimum eigenvalue of `sum_k p_k H_k`; otherwise `lambda_L` is
/// `sum_k p_k lambda_L(J_k)`.
pub fn curvature_constants(agents: &[AgentSpec], p: &PerronVector) -> (f64, f64) {
    let upper = agents.iter().map(|a| a.risk.curvature_bounds().1).fold(0.0, f64::max);
    let all_quadratic = agents.iter().all(|a| a.risk.hessian().is_some());
    let lower = if all_quadratic && !agents.is_empty() {
        let dim = agents[0].dim();
        let mut h = DMatrix::zeros(dim, dim);
        for (k, a) in agents.iter().enumerate() {
            h += a.risk.hessian().expect("quadratic") * p[k];
        }
        SymmetricEigen::new(h).eigenvalues.min()
    } else {
        agents.iter().enumerate().map(|(k, a)| p[k] * a.risk.curvature_bounds().0).sum()
    };
    (lower, upper)
}

/// Contraction factor of the centralized operator,
/// `1 - mu lambda_L + mu^2 lambda_U^2 / (2 - mu/delta)`; infinite for `mu >= 2 delta`.
pub fn gamma_c(mu: f64, delta: f64, lambda_l: f64, lambda_u: f64) -> f64 {
    let denom = 2.0 - mu / delta;
    if denom <= 0.0 {
        return f64::INFINITY;
    }
    1.0 - mu * lambda_l + mu * mu * lambda_u * lambda_u / denom
}

/// Largest step with `gamma_c < 1`: the positive root of `gamma_c(mu) = 1`.
pub fn max_contractive_step(delta: f64, lambda_l: f64, lambda_u: f64) -> f64 {
    2.0 * lambda_l / (lambda_u * lambda_u + lambda_l / delta)
}

/// Step in `(0, 2 delta)` minimizing `gamma_c`, by golden-section search.
pub fn best_contractive_step(delta: f64, lambda_l: f64, lambda_u: f64) -> f64 {
    let f = |mu: f64| gamma_c(mu, delta, lambda_l, lambda_u);
    let (mut a, mut b) = (0.0, max_contractive_step(delta, lambda_l, lambda_u).min(2.0 * delta));
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..200 {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    0.5 * (a + b)
}

/// Closed-form prox of `t * sum_k p_k R_k` for separable aggregates:
/// per-coordinate weighted l1 thresholds, an intersection of boxes, or
/// concentric balls. Balls cannot be mixed with the other kinds.
#[derive(Debug, Clone)]
struct AggregateProx {
    thresholds: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    ball: Option<f64>,
}

fn leaves(r: &Regularizer, scale: f64, out: &mut Vec<(f64, Regularizer)>) {
    match r {
        Regularizer::Zero => {}
        Regularizer::WeightedSum { parts } => {
            for part in parts {
                leaves(&part.regularizer, scale * part.weight, out);
            }
        }
        leaf if scale != 0.0 => out.push((scale, leaf.clone())),
        _ => {}
    }
}

impl AggregateProx {
    fn new(agents: &[AgentSpec], p: &PerronVector, dim: usize) -> Result<Self, SolverError> {
        let mut agg = Self {
            thresholds: vec![0.0; dim],
            lo: vec![f64::NEG_INFINITY; dim],
            hi: vec![f64::INFINITY; dim],
            ball: None,
        };
        let mut separable = false;
        for (k, agent) in agents.iter().enumerate() {
            let mut ls = Vec::new();
            leaves(&agent.regularizer, p[k], &mut ls);
            for (c, leaf) in ls {
                match leaf {
                    Regularizer::L1 { rho } => {
                        separable = true;
                        agg.thresholds.iter_mut().for_each(|t| *t += c * rho);
                    }
                    Regularizer::GroupL1 { rho, mask } => {
                        separable = true;
                        for i in mask {
                            agg.thresholds[i] += c * rho;
                        }
                    }
                    Regularizer::IndicatorBox { lo, hi } => {
                        separable = true;
                        agg.lo.iter_mut().for_each(|l| *l = l.max(lo));
                        agg.hi.iter_mut().for_each(|h| *h = h.min(hi));
                    }
                    Regularizer::IndicatorBall { radius } => {
                        agg.ball = Some(agg.ball.map_or(radius, |r: f64| r.min(radius)));
                    }
                    Regularizer::Zero | Regularizer::WeightedSum { .. } => unreachable!("flattened"),
                }
            }
        }
        if separable && agg.ball.is_some() {
            return Err(SolverError::NonSeparableSum(
                "a ball indicator combined with coordinate-wise regularizers".into(),
            ));
        }
        if let Some(i) = (0..dim).find(|&i| agg.lo[i] > agg.hi[i]) {
            return Err(SolverError::NonSeparableSum(format!("empty box intersection at coordinate {i}")));
        }
        Ok(agg)
    }

    fn prox(&self, w: &mut DVector<f64>, t: f64) {
        if let Some(radius) = self.ball {
            let norm = w.norm();
            if norm > radius {
                *w *= radius / norm;
            }
            return;
        }
        for i in 0..w.len() {
            let thr = t * self.thresholds[i];
            let x = w[i];
            let soft = if x > thr {
                x - thr
            } else if x < -thr {
                x + thr
            } else {
                0.0
            };
            w[i] = soft.clamp(self.lo[i], self.hi[i]);
        }
    }
}

fn check_sizes(agents: &[AgentSpec], p: &PerronVector) -> Result<usize, SolverError> {
    if agents.len() != p.len() {
        return Err(SolverError::SizeMismatch { expected: p.len(), got: agents.len() });
    }
    Ok(agents.first().map_or(0, AgentSpec::dim))
}

fn nonsmooth_objective(agents: &[AgentSpec], p: &PerronVector, risk: &AggregateRisk, w: &DVector<f64>) -> f64 {
    risk.value(w)
        + agents
            .iter()
            .enumerate()
            .filter(|(_, a)| !a.regularizer.is_zero())
            .map(|(k, a)| p[k] * a.regularizer.evaluate(w.as_slice()))
            .sum::<f64>()
}

/// `sum_k p_k (J_k(w) + R_k(w))`.
pub fn aggregate_objective(agents: &[AgentSpec], p: &PerronVector, w: &DVector<f64>) -> f64 {
    nonsmooth_objective(agents, p, &AggregateRisk::new(agents, p), w)
}

/// `sum_k p_k (J_k(w) + R_k^delta(w))` with the Moreau envelope.
pub fn smoothed_objective(
    agents: &[AgentSpec],
    p: &PerronVector,
    delta: f64,
    w: &DVector<f64>,
) -> Result<f64, SolverError> {
    let mut total = AggregateRisk::new(agents, p).value(w);
    for (k, a) in agents.iter().enumerate() {
        if !a.regularizer.is_zero() {
            total += p[k] * smooth_eval(&a.regularizer, w, delta, &ProximityFunction::Quadratic)?;
        }
    }
    Ok(total)
}

/// `w°` by accelerated proximal gradient with adaptive restart, step
/// `1/L`, stopped on the fixed-point residual
/// `||w - prox_{eta R}(w - eta grad J(w))|| < tol`.
pub fn solve_nonsmooth(agents: &[AgentSpec], p: &PerronVector, tol: f64) -> Result<OracleSolution, SolverError> {
    let dim = check_sizes(agents, p)?;
    let (lambda_l, _) = curvature_constants(agents, p);
    if !(lambda_l > 0.0) {
        return Err(SolverError::NotStronglyConvex(lambda_l));
    }
    let risk = AggregateRisk::new(agents, p);
    let reg = AggregateProx::new(agents, p, dim)?;
    let eta = 1.0 / risk.lipschitz().max(f64::MIN_POSITIVE);
    let step = |y: &DVector<f64>| {
        let mut next = y - risk.gradient(y) * eta;
        reg.prox(&mut next, eta);
        next
    };

    let mut x = DVector::zeros(dim);
    reg.prox(&mut x, eta);
    let mut y = x.clone();
    let mut theta = 1.0f64;
    let mut residual = f64::INFINITY;
    for it in 1..=NONSMOOTH_MAX_ITERS {
        let next = step(&y);
        // gradient-mapping restart once momentum stops pointing downhill
        if (&y - &next).dot(&(&next - &x)) > 0.0 {
            theta = 1.0;
        }
        let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        let moved = (&next - &y).norm();
        y = &next + (&next - &x) * ((theta - 1.0) / theta_next);
        theta = theta_next;
        x = next;
        if moved < tol || it % 50 == 0 {
            residual = (&x - step(&x)).norm();
            if residual < tol {
                let objective = nonsmooth_objective(agents, p, &risk, &x);
                return Ok(OracleSolution { w_star: x, objective, residual, iterations: it });
            }
        }
    }
    Err(SolverError::NonConvergence { iterations: NONSMOOTH_MAX_ITERS, residual })
}

/// `w_delta°` by accelerated gradient descent on the smoothed aggregate
/// with step `1/L` and gradient-based momentum restart, stopped when
/// `||grad|| < tol`.
pub fn solve_smoothed(
    agents: &[AgentSpec],
    p: &PerronVector,
    delta: f64,
    tol: f64,
) -> Result<OracleSolution, SolverError> {
    let dim = check_sizes(agents, p)?;
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(SmoothingError::NonPositiveDelta(delta).into());
    }
    for a in agents {
        a.regularizer.validate(dim)?;
    }
    let (lambda_l, _) = curvature_constants(agents, p);
    if !(lambda_l > 0.0) {
        return Err(SolverError::NotStronglyConvex(lambda_l));
    }
    let risk = AggregateRisk::new(agents, p);
    let regs: Vec<(f64, &Regularizer)> = agents
        .iter()
        .enumerate()
        .filter(|(_, a)| !a.regularizer.is_zero())
        .map(|(k, a)| (p[k], &a.regularizer))
        .collect();
    let lipschitz = risk.lipschitz() + regs.iter().map(|(c, _)| c / delta).sum::<f64>();
    let step = 1.0 / lipschitz;
    let gradient = |w: &DVector<f64>| {
        let mut g = risk.gradient(w);
        let mut buf = DVector::zeros(w.len());
        for (c, r) in &regs {
            r.moreau_gradient_into(w.as_slice(), delta, buf.as_mut_slice());
            g.axpy(*c, &buf, 1.0);
        }
        g
    };

    let mut x = DVector::zeros(dim);
    let mut y = x.clone();
    let mut t = 1.0f64;
    for it in 0..SMOOTHED_MAX_ITERS {
        let g = gradient(&y);
        let norm = g.norm();
        if norm < tol {
            let objective = smoothed_objective(agents, p, delta, &y)?;
            return Ok(OracleSolution { w_star: y, objective, residual: norm, iterations: it });
        }
        let next = &y - &g * step;
        if g.dot(&(&next - &x)) > 0.0 {
            t = 1.0;
            y = next.clone();
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &next + (&next - &x) * ((t - 1.0) / t_next);
            t = t_next;
        }
        x = next;
    }
    Err(SolverError::NonConvergence { iterations: SMOOTHED_MAX_ITERS, residual: gradient(&y).norm() })
}

/// Closed interval, possibly unbounded.
#[derive(Debug, Clone, Copy)]
struct Interval(f64, f64);

impl Interval {
    fn add(self, other: Interval) -> Interval {
        Interval(self.0 + other.0, self.1 + other.1)
    }
}

fn is_zero_coord(x: f64, scale: f64) -> bool {
    x.abs() <= 1e-12 * scale
}

/// Subdifferential of a coordinate-wise leaf at coordinate `i`.
fn leaf_interval(leaf: &Regularizer, w: &DVector<f64>, i: usize, scale: f64) -> Interval {
    let x = w[i];
    let l1 = |rho: f64| {
        if is_zero_coord(x, scale) {
            Interval(-rho, rho)
        } else {
            Interval(rho * x.signum(), rho * x.signum())
        }
    };
    match leaf {
        Regularizer::L1 { rho } => l1(*rho),
        Regularizer::GroupL1 { rho, mask } if mask.contains(&i) => l1(*rho),
        Regularizer::IndicatorBox { lo, hi } => {
            let at_hi = (x - hi).abs() <= 1e-12 * scale;
            let at_lo = (x - lo).abs() <= 1e-12 * scale;
            Interval(if at_lo { f64::NEG_INFINITY } else { 0.0 }, if at_hi { f64::INFINITY } else { 0.0 })
        }
        _ => Interval(0.0, 0.0),
    }
}

/// Finds `c` with `sum_k p_k clamp(c, a_k, b_k) = target` by bisection.
fn water_fill(weights: &[f64], intervals: &[Interval], target: f64) -> Option<f64> {
    let f = |c: f64| -> f64 {
        weights.iter().zip(intervals).map(|(p, iv)| p * c.clamp(iv.0, iv.1)).sum::<f64>() - target
    };
    let mut span = 1.0 + target.abs() / weights.iter().copied().fold(f64::INFINITY, f64::min);
    for iv in intervals {
        for e in [iv.0, iv.1] {
            if e.is_finite() {
                span = span.max(e.abs() + 1.0);
            }
        }
    }
    let (mut lo, mut hi) = (-span, span);
    if f(lo) > 0.0 || f(hi) < 0.0 {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Subgradients `r_k° in dR_k(w°)` with `sum_k p_k (grad J_k(w°) + r_k°) = 0`.
///
/// Coordinates where a subgradient is single-valued take that value; the
/// remaining residual is shared among agents with set-valued
/// subdifferentials through a common value `c`, clamped to each agent's
/// interval, so agents contribute in proportion to `p_k` until they hit
/// their bounds.
pub fn recover_subgradients(
    agents: &[AgentSpec],
    p: &PerronVector,
    w_star: &DVector<f64>,
) -> Result<Vec<DVector<f64>>, SolverError> {
    let dim = check_sizes(agents, p)?;
    let risks: Vec<(f64, &SmoothRisk)> = agents.iter().enumerate().map(|(k, a)| (p[k], &a.risk)).collect();
    let residual = -weighted_gradient_sum(&risks, w_star);
    let scale = w_star.amax().max(1.0);
    let flat: Vec<Vec<(f64, Regularizer)>> = agents
        .iter()
        .map(|a| {
            let mut out = Vec::new();
            leaves(&a.regularizer, 1.0, &mut out);
            out
        })
        .collect();
    let mut r = vec![DVector::zeros(dim); agents.len()];

    let has_ball = flat.iter().flatten().any(|(_, l)| matches!(l, Regularizer::IndicatorBall { .. }));
    if has_ball {
        if flat.iter().flatten().any(|(_, l)| !matches!(l, Regularizer::IndicatorBall { .. })) {
            return Err(SolverError::NonSeparableSum(
                "a ball indicator combined with coordinate-wise regularizers".into(),
            ));
        }
        // subgradients are nonnegative multiples of w° on the boundary
        let owners: Vec<usize> = (0..agents.len()).filter(|&k| !flat[k].is_empty()).collect();
        let total: f64 = owners.iter().map(|&k| p[k]).sum();
        let norm = w_star.norm();
        let along = if norm > 0.0 { residual.dot(w_star) / norm } else { 0.0 };
        let off = (&residual - w_star * (along / norm.max(f64::MIN_POSITIVE))).norm();
        let radius = flat[owners[0]][0].1.clone();
        let Regularizer::IndicatorBall { radius } = radius else { unreachable!() };
        let on_boundary = norm >= radius * (1.0 - 1e-10);
        if (!on_boundary && residual.norm() > SUBGRADIENT_TOL) || off > SUBGRADIENT_TOL || along < -SUBGRADIENT_TOL {
            return Err(SolverError::SubgradientInfeasible { coordinate: 0, residual: residual.norm() });
        }
        for &k in &owners {
            r[k] = &residual / total;
        }
        return Ok(r);
    }

    for i in 0..dim {
        let mut fixed = 0.0;
        let mut free_idx = Vec::new();
        let mut free_w = Vec::new();
        let mut free_iv = Vec::new();
        for (k, leaves) in flat.iter().enumerate() {
            let iv = leaves
                .iter()
                .map(|(c, leaf)| {
                    let Interval(a, b) = leaf_interval(leaf, w_star, i, scale);
                    Interval(c * a, c * b)
                })
                .fold(Interval(0.0, 0.0), Interval::add);
            if iv.0 == iv.1 {
                r[k][i] = iv.0;
                fixed += p[k] * iv.0;
            } else {
                free_idx.push(k);
                free_w.push(p[k]);
                free_iv.push(iv);
            }
        }
        let remaining = residual[i] - fixed;
        if free_idx.is_empty() {
            if remaining.abs() > SUBGRADIENT_TOL {
                return Err(SolverError::SubgradientInfeasible { coordinate: i, residual: remaining });
            }
            continue;
        }
        let c = water_fill(&free_w, &free_iv, remaining)
            .ok_or(SolverError::SubgradientInfeasible { coordinate: i, residual: remaining })?;
        let mut allocated = 0.0;
        for ((&k, iv), pk) in free_idx.iter().zip(&free_iv).zip(&free_w) {
            r[k][i] = c.clamp(iv.0, iv.1);
            allocated += pk * r[k][i];
        }
        if (allocated - remaining).abs() > SUBGRADIENT_TOL {
            return Err(SolverError::SubgradientInfeasible { coordinate: i, residual: allocated - remaining });
        }
    }
    Ok(r)
}

/// Right-hand side of the smoothing-bias bound,
/// `delta (2 / lambda_L) sum_k p_k d(r_k°)` with quadratic `d`.
pub fn bias_bound_rhs(
    agents: &[AgentSpec],
    p: &PerronVector,
    delta: f64,
    r_star: &[DVector<f64>],
) -> Result<f64, SolverError> {
    check_sizes(agents, p)?;
    if r_star.len() != agents.len() {
        return Err(SolverError::SizeMismatch { expected: agents.len(), got: r_star.len() });
    }
    let (lambda_l, _) = curvature_constants(agents, p);
    if !(lambda_l > 0.0) {
        return Err(SolverError::NotStronglyConvex(lambda_l));
    }
    let d = ProximityFunction::Quadratic;
    let sum: f64 = r_star.iter().enumerate().map(|(k, r)| p[k] * d.value(r)).sum();
    Ok(delta * (2.0 / lambda_l) * sum)
}

/// Fixed-point residual `||T_c(w) - w||` of the centralized operator.
pub fn centralized_residual(agents: &[AgentSpec], p: &PerronVector, mu: f64, delta: f64, w: &DVector<f64>) -> f64 {
    aggregate_smoothed_gradient(w, agents, p, delta).norm() * mu
}
