//! Differentiable stochastic risks `J_k` and the synthetic data model.
//!
//! Logistic risks share a frozen evaluation set. A labelled feature
//! `h = gamma t + v` enters the logistic loss only through `z = gamma h`,
//! and `z = t + gamma v` has the same law as `t + sigma xi` with
//! `xi ~ N(0, I)`. One frozen matrix of `xi` draws therefore serves every
//! agent, whatever its noise level, and lets aggregate gradients over many
//! agents reuse a single pass over the evaluation set.

use std::sync::{Arc, OnceLock};

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiskError {
    #[error("risk dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("quadratic Hessian must be symmetric positive definite for streaming samples")]
    NotPositiveDefinite,
    #[error("quadratic Hessian must be symmetric")]
    NotSymmetric,
    #[error("invalid risk parameter: {0}")]
    InvalidParameter(String),
}

/// A labelled observation. For classification `gamma` is `+1` or `-1`; for
/// the streaming least-squares model it is the real-valued response.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub gamma: f64,
    pub h: DVector<f64>,
}

/// What one stochastic-gradient evaluation consumes.
#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    Labelled(Sample),
    /// Additive gradient perturbation for synthetic-noise quadratics.
    Noise(DVector<f64>),
    None,
}

fn standard_normal_vector(dim: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Feature model `h = gamma t + v`, `v ~ N(0, sigma^2 I)`, `gamma = +-1`
/// with equal probability.
#[derive(Debug, Clone, PartialEq)]
pub struct DataModel {
    pub template: DVector<f64>,
    pub sigma: f64,
}

impl DataModel {
    /// Template with `informative` leading ones followed by zeros.
    pub fn block_template(dim: usize, informative: usize) -> DVector<f64> {
        DVector::from_fn(dim, |i, _| if i < informative { 1.0 } else { 0.0 })
    }

    pub fn new(template: DVector<f64>, sigma: f64) -> Result<Self, RiskError> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(RiskError::InvalidParameter(format!("noise sigma must be >= 0, got {sigma}")));
        }
        Ok(Self { template, sigma })
    }

    pub fn dim(&self) -> usize {
        self.template.len()
    }

    pub fn draw(&self, rng: &mut impl Rng) -> Sample {
        let gamma = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let h = &self.template * gamma + standard_normal_vector(self.dim(), rng) * self.sigma;
        Sample { gamma, h }
    }

    pub fn draw_set(&self, n: usize, rng: &mut impl Rng) -> Vec<Sample> {
        (0..n).map(|_| self.draw(rng)).collect()
    }
}

/// Frozen standard-normal draws backing population logistic gradients.
#[derive(Debug)]
pub struct EvalNoise {
    /// One column per evaluation sample.
    xi: DMatrix<f64>,
    mean: OnceLock<DVector<f64>>,
    second_moment: OnceLock<DMatrix<f64>>,
}

/// Default size of the frozen evaluation set.
pub const DEFAULT_EVAL_SAMPLES: usize = 100_000;

impl EvalNoise {
    pub fn new(dim: usize, n_samples: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xi = DMatrix::from_fn(dim, n_samples.max(1), |_, _| rng.sample::<f64, _>(StandardNormal));
        Self { xi, mean: OnceLock::new(), second_moment: OnceLock::new() }
    }

    pub fn dim(&self) -> usize {
        self.xi.nrows()
    }

    pub fn len(&self) -> usize {
        self.xi.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.xi.ncols() == 0
    }

    fn mean(&self) -> &DVector<f64> {
        self.mean.get_or_init(|| self.xi.column_mean())
    }

    fn second_moment(&self) -> &DMatrix<f64> {
        self.second_moment
            .get_or_init(|| (&self.xi * self.xi.transpose()) / self.len() as f64)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `J(w) = E ln(1 + exp(-gamma h^T w)) + rho2 ||w||^2`.
#[derive(Debug, Clone)]
pub struct LogisticRisk {
    pub rho2: f64,
    pub model: DataModel,
    eval: Arc<EvalNoise>,
}

impl LogisticRisk {
    pub fn new(rho2: f64, model: DataModel, eval: Arc<EvalNoise>) -> Result<Self, RiskError> {
        if !(rho2 >= 0.0 && rho2.is_finite()) {
            return Err(RiskError::InvalidParameter(format!("rho2 must be >= 0, got {rho2}")));
        }
        if eval.dim() != model.dim() {
            return Err(RiskError::DimensionMismatch { expected: model.dim(), got: eval.dim() });
        }
        Ok(Self { rho2, model, eval })
    }

    pub fn eval_noise(&self) -> &Arc<EvalNoise> {
        &self.eval
    }

    /// `xi^T w` for every evaluation sample.
    fn projections(&self, w: &DVector<f64>) -> DVector<f64> {
        self.eval.xi.tr_mul(w)
    }

    fn value(&self, w: &DVector<f64>) -> f64 {
        let tw = self.model.template.dot(w);
        let a = self.projections(w);
        let loss: f64 = a.iter().map(|aj| softplus(-(tw + self.model.sigma * aj))).sum();
        loss / self.eval.len() as f64 + self.rho2 * w.norm_squared()
    }

    /// Empirical `lambda_max(E z z^T)` on the frozen set.
    fn feature_second_moment_max(&self) -> f64 {
        let t = &self.model.template;
        let s = self.model.sigma;
        let m = self.eval.mean();
        let cross = t * m.transpose();
        let moment = t * t.transpose() + (&cross + cross.transpose()) * s + self.eval.second_moment() * (s * s);
        SymmetricEigen::new(moment).eigenvalues.max()
    }
}

/// Rule for the gradient perturbation of a quadratic risk.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum QuadraticNoise {
    /// Stochastic gradients equal exact gradients.
    #[default]
    Exact,
    /// Exact gradient plus `N(0, variance I)`.
    Synthetic { variance: f64 },
    /// Least-mean-squares data: `h ~ N(0, H)`, `gamma = h^T w* + e`,
    /// `e ~ N(0, noise_variance)` with `H w* = b`; gradient `h h^T w - gamma h`.
    Streaming { noise_variance: f64 },
}

/// `J(w) = w^T H w / 2 - b^T w`.
#[derive(Debug, Clone)]
pub struct QuadraticRisk {
    pub hessian: DMatrix<f64>,
    pub b: DVector<f64>,
    pub noise: QuadraticNoise,
    streaming: Option<(DMatrix<f64>, DVector<f64>)>,
}

impl QuadraticRisk {
    pub fn new(hessian: DMatrix<f64>, b: DVector<f64>, noise: QuadraticNoise) -> Result<Self, RiskError> {
        let m = b.len();
        if hessian.nrows() != m || hessian.ncols() != m {
            return Err(RiskError::DimensionMismatch { expected: m, got: hessian.nrows() });
        }
        if (&hessian - hessian.transpose()).amax() > 1e-12 * hessian.amax().max(1.0) {
            return Err(RiskError::NotSymmetric);
        }
        let streaming = match noise {
            QuadraticNoise::Exact => None,
            QuadraticNoise::Synthetic { variance } => {
                if !(variance >= 0.0 && variance.is_finite()) {
                    return Err(RiskError::InvalidParameter(format!(
                        "synthetic noise variance must be >= 0, got {variance}"
                    )));
                }
                None
            }
            QuadraticNoise::Streaming { noise_variance } => {
                if !(noise_variance >= 0.0 && noise_variance.is_finite()) {
                    return Err(RiskError::InvalidParameter(format!(
                        "streaming noise variance must be >= 0, got {noise_variance}"
                    )));
                }
                let chol = Cholesky::new(hessian.clone()).ok_or(RiskError::NotPositiveDefinite)?;
                let target = chol.solve(&b);
                Some((chol.l(), target))
            }
        };
        Ok(Self { hessian, b, noise, streaming })
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(DMatrix::identity(dim, dim), DVector::zeros(dim), QuadraticNoise::Exact)
            .expect("identity quadratic is valid")
    }
}

/// A differentiable risk with exact and sampled gradients.
#[derive(Debug, Clone)]
pub enum SmoothRisk {
    Zero { dim: usize },
    Quadratic(QuadraticRisk),
    LogisticL2(LogisticRisk),
}

impl SmoothRisk {
    pub fn dim(&self) -> usize {
        match self {
            Self::Zero { dim } => *dim,
            Self::Quadratic(q) => q.b.len(),
            Self::LogisticL2(l) => l.model.dim(),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Self::Zero { .. })
    }

    pub fn value(&self, w: &DVector<f64>) -> f64 {
        match self {
            Self::Zero { .. } => 0.0,
            Self::Quadratic(q) => 0.5 * w.dot(&(&q.hessian * w)) - q.b.dot(w),
            Self::LogisticL2(l) => l.value(w),
        }
    }

    pub fn exact_gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Zero { .. } => DVector::zeros(w.len()),
            Self::Quadratic(q) => &q.hessian * w - &q.b,
            Self::LogisticL2(_) => weighted_gradient_sum(&[(1.0, self)], w),
        }
    }

    /// Draws the data one stochastic-gradient evaluation needs.
    pub fn draw(&self, rng: &mut impl Rng) -> Observation {
        match self {
            Self::Zero { .. } => Observation::None,
            Self::LogisticL2(l) => Observation::Labelled(l.model.draw(rng)),
            Self::Quadratic(q) => match q.noise {
                QuadraticNoise::Exact => Observation::None,
                QuadraticNoise::Synthetic { variance } => {
                    Observation::Noise(standard_normal_vector(q.b.len(), rng) * variance.sqrt())
                }
                QuadraticNoise::Streaming { noise_variance } => {
                    let (l, target) = q.streaming.as_ref().expect("streaming factor cached");
                    let h = l * standard_normal_vector(q.b.len(), rng);
                    let e: f64 = rng.sample(StandardNormal);
                    let gamma = h.dot(target) + noise_variance.sqrt() * e;
                    Observation::Labelled(Sample { gamma, h })
                }
            },
        }
    }

    /// Instantaneous gradient `grad Q(w; x)` for an observation produced by
    /// [`SmoothRisk::draw`].
    pub fn stochastic_gradient(&self, w: &DVector<f64>, obs: &Observation) -> DVector<f64> {
        match (self, obs) {
            (Self::Zero { .. }, _) => DVector::zeros(w.len()),
            (Self::LogisticL2(l), Observation::Labelled(s)) => {
                let scale = -s.gamma * sigmoid(-s.gamma * s.h.dot(w));
                &s.h * scale + w * (2.0 * l.rho2)
            }
            (Self::Quadratic(q), Observation::Labelled(s)) if q.streaming.is_some() => {
                &s.h * (s.h.dot(w) - s.gamma)
            }
            (Self::Quadratic(_), Observation::Noise(n)) => self.exact_gradient(w) + n,
            _ => self.exact_gradient(w),
        }
    }

    /// Strong-convexity and smoothness constants `(lambda_L, lambda_U)`.
    pub fn curvature_bounds(&self) -> (f64, f64) {
        match self {
            Self::Zero { .. } => (0.0, 0.0),
            Self::Quadratic(q) => {
                let eig = SymmetricEigen::new(q.hessian.clone()).eigenvalues;
                (eig.min(), eig.max())
            }
            Self::LogisticL2(l) => {
                let lower = 2.0 * l.rho2;
                (lower, 0.25 * l.feature_second_moment_max() + lower)
            }
        }
    }

    /// Hessian of a quadratic risk, zero matrix for the zero risk.
    pub fn hessian(&self) -> Option<DMatrix<f64>> {
        match self {
            Self::Zero { dim } => Some(DMatrix::zeros(*dim, *dim)),
            Self::Quadratic(q) => Some(q.hessian.clone()),
            Self::LogisticL2(_) => None,
        }
    }
}

/// `sum_k c_k grad J_k(w)`. Logistic terms sharing a frozen evaluation set
/// and template are evaluated in a single pass over that set.
pub fn weighted_gradient_sum(terms: &[(f64, &SmoothRisk)], w: &DVector<f64>) -> DVector<f64> {
    let mut total = DVector::zeros(w.len());
    let mut logistic: Vec<(f64, &LogisticRisk)> = Vec::new();
    for (c, risk) in terms {
        match risk {
            SmoothRisk::LogisticL2(l) => logistic.push((*c, l)),
            other => total += other.exact_gradient(w) * *c,
        }
    }
    let mut done = vec![false; logistic.len()];
    for i in 0..logistic.len() {
        if done[i] {
            continue;
        }
        let lead = logistic[i].1;
        let group: Vec<usize> = (i..logistic.len())
            .filter(|&j| {
                !done[j]
                    && Arc::ptr_eq(&logistic[j].1.eval, &lead.eval)
                    && logistic[j].1.model.template == lead.model.template
            })
            .collect();
        for &j in &group {
            done[j] = true;
        }
        let t = &lead.model.template;
        let tw = t.dot(w);
        let a = lead.projections(w);
        let n = lead.eval.len() as f64;
        // -(1/n) sum_j sum_k c_k s_kj (t + sigma_k xi_j)
        let mut along_t = 0.0;
        let mut along_xi = DVector::zeros(a.len());
        for &j in &group {
            let (c, l) = logistic[j];
            let sigma = l.model.sigma;
            let mut sum_s = 0.0;
            for (acc, aj) in along_xi.iter_mut().zip(a.iter()) {
                let s = sigmoid(-(tw + sigma * aj));
                sum_s += s;
                *acc += c * sigma * s;
            }
            along_t += c * sum_s;
            total += w * (2.0 * c * l.rho2);
        }
        total -= t * (along_t / n);
        total -= (&lead.eval.xi * along_xi) / n;
    }
    total
}

/// Least-squares fit of `E||s||^2 <= beta^2 ||w||^2 + sigma^2` over a grid,
/// where `s` is the gradient noise. Returns `(beta^2, sigma^2)` clamped to
/// nonnegative values.
pub fn noise_moments(
    risk: &SmoothRisk,
    w_grid: &[DVector<f64>],
    n_draws: usize,
    rng: &mut impl Rng,
) -> (f64, f64) {
    let mut xs = Vec::with_capacity(w_grid.len());
    let mut ms = Vec::with_capacity(w_grid.len());
    for w in w_grid {
        let g = risk.exact_gradient(w);
        let mut acc = 0.0;
        for _ in 0..n_draws {
            let obs = risk.draw(rng);
            acc += (risk.stochastic_gradient(w, &obs) - &g).norm_squared();
        }
        xs.push(w.norm_squared());
        ms.push(acc / n_draws.max(1) as f64);
    }
    fit_affine_nonnegative(&xs, &ms)
}

fn fit_affine_nonnegative(xs: &[f64], ms: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_m = ms.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mean_x).powi(2)).sum();
    let sxm: f64 = xs.iter().zip(ms).map(|(x, m)| (x - mean_x) * (m - mean_m)).sum();
    if sxx <= 1e-300 {
        return (0.0, mean_m.max(0.0));
    }
    let slope = sxm / sxx;
    let intercept = mean_m - slope * mean_x;
    if slope < 0.0 {
        (0.0, mean_m.max(0.0))
    } else if intercept < 0.0 {
        let through_origin = xs.iter().zip(ms).map(|(x, m)| x * m).sum::<f64>()
            / xs.iter().map(|x| x * x).sum::<f64>();
        (through_origin.max(0.0), 0.0)
    } else {
        (slope, intercept)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn logistic(sigma: f64, n: usize) -> SmoothRisk {
        let model = DataModel::new(DataModel::block_template(4, 2), sigma).unwrap();
        let eval = Arc::new(EvalNoise::new(4, n, 7));
        SmoothRisk::LogisticL2(LogisticRisk::new(0.01, model, eval).unwrap())
    }

    #[test]
    fn identity_quadratic_gradient() {
        let q = SmoothRisk::Quadratic(QuadraticRisk::identity(2));
        assert_eq!(q.exact_gradient(&v(&[1.0, 2.0])), v(&[1.0, 2.0]));
    }

    #[test]
    fn zero_risk_gradients_vanish() {
        let z = SmoothRisk::Zero { dim: 3 };
        let w = v(&[1.0, -2.0, 3.0]);
        assert_eq!(z.exact_gradient(&w), DVector::zeros(3));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs = z.draw(&mut rng);
        assert_eq!(z.stochastic_gradient(&w, &obs), DVector::zeros(3));
    }

    #[test]
    fn logistic_gradient_at_origin_is_half_mean_feature() {
        let risk = logistic(0.7, 5000);
        let SmoothRisk::LogisticL2(l) = &risk else { unreachable!() };
        // direct formula: mean over samples of -z/2 with z = t + sigma xi
        let mut direct = DVector::zeros(4);
        for j in 0..l.eval.len() {
            let z = &l.model.template + l.eval.xi.column(j) * l.model.sigma;
            direct -= z * 0.5;
        }
        direct /= l.eval.len() as f64;
        let g = risk.exact_gradient(&DVector::zeros(4));
        assert!((g - direct).amax() < 1e-12);
    }

    #[test]
    fn logistic_sample_gradient_at_origin() {
        let risk = logistic(0.5, 10);
        let h = v(&[1.0, 0.5, -0.3, 2.0]);
        let obs = Observation::Labelled(Sample { gamma: 1.0, h: h.clone() });
        let g = risk.stochastic_gradient(&DVector::zeros(4), &obs);
        assert!((g + h * 0.5).amax() < 1e-15);
    }

    #[test]
    fn block_template_layout() {
        assert_eq!(DataModel::block_template(4, 2), v(&[1.0, 1.0, 0.0, 0.0]));
    }

    #[test]
    fn streaming_quadratic_requires_definite_hessian() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let err = QuadraticRisk::new(h, v(&[0.0, 0.0]), QuadraticNoise::Streaming { noise_variance: 0.1 });
        assert_eq!(err.unwrap_err(), RiskError::NotPositiveDefinite);
    }

    #[test]
    fn affine_fit_clamps() {
        let (b, s) = fit_affine_nonnegative(&[0.0, 1.0, 2.0], &[3.0, 2.0, 1.0]);
        assert_eq!(b, 0.0);
        assert!((s - 2.0).abs() < 1e-12);
        let (b, s) = fit_affine_nonnegative(&[1.0, 2.0], &[1.0, 3.0]);
        assert_eq!(s, 0.0);
        assert!((b - 1.4).abs() < 1e-12);
    }

    #[test]
    fn grouped_aggregate_matches_individual_sum() {
        let eval = Arc::new(EvalNoise::new(4, 3000, 11));
        let t = DataModel::block_template(4, 2);
        let risks: Vec<SmoothRisk> = [0.2, 0.9]
            .iter()
            .map(|s| {
                SmoothRisk::LogisticL2(
                    LogisticRisk::new(0.05, DataModel::new(t.clone(), *s).unwrap(), eval.clone()).unwrap(),
                )
            })
            .collect();
        let w = v(&[0.3, -0.1, 0.7, 0.2]);
        let grouped = weighted_gradient_sum(&[(0.4, &risks[0]), (0.6, &risks[1])], &w);
        let separate = risks[0].exact_gradient(&w) * 0.4 + risks[1].exact_gradient(&w) * 0.6;
        assert!((grouped - separate).amax() < 1e-13);
    }
}
