//! Non-smooth regularizers and their conjugate-smoothed surrogates.
//!
//! With the quadratic proximity function the smoothed regularizer is the
//! Moreau envelope, whose gradient is `(w - prox_{delta R}(w)) / delta`.
//! Other proximity functions are handled by the low-dimensional numerical
//! routines in [`conjugate`].

pub mod conjugate;
mod proximity;

use std::collections::BTreeSet;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use conjugate::{conjugate_smooth_gradient_oracle, smooth_eval_numerical, Conjugate};
pub use proximity::ProximityFunction;

/// Largest dimension accepted by the numerical (non-quadratic) routines.
pub const MAX_GENERIC_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SmoothingError {
    #[error("smoothing parameter must be positive, got {0}")]
    NonPositiveDelta(f64),
    #[error("weighted sum has overlapping supports; its prox has no closed form")]
    NonSeparableSum,
    #[error("dimension {dim} exceeds {max} for a generic proximity function")]
    DimensionTooLargeForGenericProximity { dim: usize, max: usize },
    #[error("conjugate not available in closed form for {0}")]
    ConjugateUnavailable(&'static str),
    #[error("mask index {index} out of range for dimension {dim}")]
    MaskOutOfRange { index: usize, dim: usize },
    #[error("invalid regularizer parameter: {0}")]
    InvalidParameter(String),
    #[error("inner solver did not converge in {0} iterations")]
    NoConvergence(usize),
}

/// A closed convex, possibly non-smooth or extended-valued, regularizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Regularizer {
    Zero,
    /// `rho * ||w||_1`
    L1 { rho: f64 },
    /// `rho * ||D w||_1` with `D` the 0/1 diagonal selecting `mask`.
    GroupL1 { rho: f64, mask: Vec<usize> },
    /// Indicator of `{w : lo <= w_i <= hi for all i}`.
    IndicatorBox { lo: f64, hi: f64 },
    /// Indicator of the centred Euclidean ball of the given radius.
    IndicatorBall { radius: f64 },
    /// `sum_j weight_j * R_j`; parts must act on disjoint coordinates.
    WeightedSum { parts: Vec<WeightedPart> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedPart {
    pub weight: f64,
    pub regularizer: Regularizer,
}

/// Coordinates a regularizer depends on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Support {
    Empty,
    All,
    Coords(BTreeSet<usize>),
}

impl Support {
    fn overlaps(&self, other: &Support) -> bool {
        match (self, other) {
            (Support::Empty, _) | (_, Support::Empty) => false,
            (Support::All, _) | (_, Support::All) => true,
            (Support::Coords(a), Support::Coords(b)) => !a.is_disjoint(b),
        }
    }

    pub fn contains(&self, i: usize) -> bool {
        match self {
            Support::Empty => false,
            Support::All => true,
            Support::Coords(c) => c.contains(&i),
        }
    }
}

fn check_delta(delta: f64) -> Result<(), SmoothingError> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(SmoothingError::NonPositiveDelta(delta))
    }
}

#[inline]
fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

impl Regularizer {
    pub fn l1(rho: f64) -> Self {
        Self::L1 { rho }
    }

    pub fn group_l1(rho: f64, mask: impl IntoIterator<Item = usize>) -> Self {
        let mask: BTreeSet<usize> = mask.into_iter().collect();
        Self::GroupL1 {
            rho,
            mask: mask.into_iter().collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Self::Zero => true,
            Self::L1 { rho } | Self::GroupL1 { rho, .. } => *rho == 0.0,
            Self::WeightedSum { parts } => parts
                .iter()
                .all(|p| p.weight == 0.0 || p.regularizer.is_zero()),
            Self::IndicatorBox { .. } | Self::IndicatorBall { .. } => false,
        }
    }

    pub fn support(&self) -> Support {
        if self.is_zero() {
            return Support::Empty;
        }
        match self {
            Self::GroupL1 { mask, .. } => Support::Coords(mask.iter().copied().collect()),
            Self::WeightedSum { parts } => {
                let mut coords = BTreeSet::new();
                for part in parts.iter().filter(|p| p.weight != 0.0) {
                    match part.regularizer.support() {
                        Support::All => return Support::All,
                        Support::Coords(c) => coords.extend(c),
                        Support::Empty => {}
                    }
                }
                Support::Coords(coords)
            }
            _ => Support::All,
        }
    }

    /// Checks parameters against a working dimension.
    pub fn validate(&self, dim: usize) -> Result<(), SmoothingError> {
        let invalid = |msg: String| Err(SmoothingError::InvalidParameter(msg));
        match self {
            Self::Zero => Ok(()),
            Self::L1 { rho } => {
                if *rho < 0.0 || !rho.is_finite() {
                    return invalid(format!("rho must be finite and nonnegative, got {rho}"));
                }
                Ok(())
            }
            Self::GroupL1 { rho, mask } => {
                if *rho < 0.0 || !rho.is_finite() {
                    return invalid(format!("rho must be finite and nonnegative, got {rho}"));
                }
                let mut seen = BTreeSet::new();
                for &index in mask {
                    if index >= dim {
                        return Err(SmoothingError::MaskOutOfRange { index, dim });
                    }
                    if !seen.insert(index) {
                        return invalid(format!("mask index {index} repeated"));
                    }
                }
                Ok(())
            }
            Self::IndicatorBox { lo, hi } => {
                if lo.is_nan() || hi.is_nan() || lo > hi {
                    return invalid(format!("box bounds must satisfy lo <= hi, got [{lo}, {hi}]"));
                }
                Ok(())
            }
            Self::IndicatorBall { radius } => {
                if *radius < 0.0 || !radius.is_finite() {
                    return invalid(format!("ball radius must be finite and nonnegative, got {radius}"));
                }
                Ok(())
            }
            Self::WeightedSum { parts } => {
                let mut supports: Vec<Support> = Vec::new();
                for part in parts {
                    if part.weight < 0.0 || !part.weight.is_finite() {
                        return invalid(format!("part weight must be nonnegative, got {}", part.weight));
                    }
                    part.regularizer.validate(dim)?;
                    if part.weight == 0.0 {
                        continue;
                    }
                    let s = part.regularizer.support();
                    if supports.iter().any(|o| o.overlaps(&s)) {
                        return Err(SmoothingError::NonSeparableSum);
                    }
                    supports.push(s);
                }
                Ok(())
            }
        }
    }

    /// `R(w)`, `+inf` outside the domain of an indicator.
    pub fn evaluate(&self, w: &[f64]) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::L1 { rho } => rho * w.iter().map(|x| x.abs()).sum::<f64>(),
            Self::GroupL1 { rho, mask } => rho * mask.iter().map(|&i| w[i].abs()).sum::<f64>(),
            Self::IndicatorBox { lo, hi } => {
                if w.iter().all(|x| x >= lo && x <= hi) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            Self::IndicatorBall { radius } => {
                let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm <= radius * (1.0 + 1e-12) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            Self::WeightedSum { parts } => parts
                .iter()
                .filter(|p| p.weight != 0.0)
                .map(|p| p.weight * p.regularizer.evaluate(w))
                .sum(),
        }
    }

    /// `prox_{delta R}(w) = argmin_u R(u) + ||w - u||^2 / (2 delta)`.
    pub fn prox(&self, w: &DVector<f64>, delta: f64) -> Result<DVector<f64>, SmoothingError> {
        check_delta(delta)?;
        self.validate(w.len())?;
        let mut out = w.clone();
        self.prox_in_place(out.as_mut_slice(), delta);
        Ok(out)
    }

    /// Unchecked in-place prox; callers must have validated the regularizer
    /// for this dimension and checked `delta > 0`.
    pub(crate) fn prox_in_place(&self, w: &mut [f64], delta: f64) {
        match self {
            Self::Zero => {}
            Self::L1 { rho } => {
                let t = delta * rho;
                w.iter_mut().for_each(|x| *x = soft_threshold(*x, t));
            }
            Self::GroupL1 { rho, mask } => {
                let t = delta * rho;
                for &i in mask {
                    w[i] = soft_threshold(w[i], t);
                }
            }
            Self::IndicatorBox { lo, hi } => {
                w.iter_mut().for_each(|x| *x = x.clamp(*lo, *hi));
            }
            Self::IndicatorBall { radius } => {
                let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > *radius {
                    let scale = radius / norm;
                    w.iter_mut().for_each(|x| *x *= scale);
                }
            }
            Self::WeightedSum { parts } => {
                // disjoint supports: each part only rewrites its own coordinates
                for part in parts.iter().filter(|p| p.weight != 0.0) {
                    part.regularizer.prox_in_place(w, delta * part.weight);
                }
            }
        }
    }

    /// Gradient of the Moreau envelope, `(w - prox_{delta R}(w)) / delta`.
    pub fn moreau_gradient(
        &self,
        w: &DVector<f64>,
        delta: f64,
    ) -> Result<DVector<f64>, SmoothingError> {
        let prox = self.prox(w, delta)?;
        Ok((w - prox) / delta)
    }

    /// Unchecked, allocation-free form of [`Regularizer::moreau_gradient`].
    pub(crate) fn moreau_gradient_into(&self, w: &[f64], delta: f64, out: &mut [f64]) {
        out.copy_from_slice(w);
        self.prox_in_place(out, delta);
        for (g, x) in out.iter_mut().zip(w) {
            *g = (x - *g) / delta;
        }
    }

    /// Closed-form conjugate `R*(u) = sup_w u^T w - R(w)` in dimension `dim`.
    pub fn conjugate(&self, dim: usize) -> Result<Conjugate, SmoothingError> {
        self.validate(dim)?;
        match self {
            Self::Zero => Ok(Conjugate::BoxIndicator {
                bounds: vec![0.0; dim],
            }),
            Self::L1 { rho } => Ok(Conjugate::BoxIndicator {
                bounds: vec![*rho; dim],
            }),
            Self::GroupL1 { rho, mask } => {
                let mut bounds = vec![0.0; dim];
                for &i in mask {
                    bounds[i] = *rho;
                }
                Ok(Conjugate::BoxIndicator { bounds })
            }
            Self::IndicatorBox { lo, hi } => Ok(Conjugate::BoxSupport { lo: *lo, hi: *hi }),
            Self::IndicatorBall { radius } => Ok(Conjugate::BallSupport { radius: *radius }),
            Self::WeightedSum { .. } => Err(SmoothingError::ConjugateUnavailable("weighted_sum")),
        }
    }
}

/// Free-function form of [`Regularizer::prox`].
pub fn prox(r: &Regularizer, w: &DVector<f64>, delta: f64) -> Result<DVector<f64>, SmoothingError> {
    r.prox(w, delta)
}

/// Free-function form of [`Regularizer::moreau_gradient`].
pub fn moreau_gradient(
    r: &Regularizer,
    w: &DVector<f64>,
    delta: f64,
) -> Result<DVector<f64>, SmoothingError> {
    r.moreau_gradient(w, delta)
}

/// Smoothed value `R^delta(w)`: the Moreau envelope in closed form for the
/// quadratic proximity function, the numerical infimal convolution otherwise.
pub fn smooth_eval(
    r: &Regularizer,
    w: &DVector<f64>,
    delta: f64,
    d: &ProximityFunction,
) -> Result<f64, SmoothingError> {
    check_delta(delta)?;
    match d {
        ProximityFunction::Quadratic => {
            let p = r.prox(w, delta)?;
            Ok(r.evaluate(p.as_slice()) + (w - &p).norm_squared() / (2.0 * delta))
        }
        _ => smooth_eval_numerical(r, w, delta, d),
    }
}

/// A regularizer paired with its smoothing parameter and proximity function.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedRegularizer {
    base: Regularizer,
    delta: f64,
    proximity: ProximityFunction,
}

impl SmoothedRegularizer {
    pub fn new(
        base: Regularizer,
        delta: f64,
        proximity: ProximityFunction,
    ) -> Result<Self, SmoothingError> {
        check_delta(delta)?;
        proximity.validate()?;
        Ok(Self {
            base,
            delta,
            proximity,
        })
    }

    /// Moreau envelope of `base`.
    pub fn moreau(base: Regularizer, delta: f64) -> Result<Self, SmoothingError> {
        Self::new(base, delta, ProximityFunction::Quadratic)
    }

    pub fn base(&self) -> &Regularizer {
        &self.base
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn proximity(&self) -> &ProximityFunction {
        &self.proximity
    }

    pub fn value(&self, w: &DVector<f64>) -> Result<f64, SmoothingError> {
        smooth_eval(&self.base, w, self.delta, &self.proximity)
    }

    pub fn gradient(&self, w: &DVector<f64>) -> Result<DVector<f64>, SmoothingError> {
        match self.proximity {
            ProximityFunction::Quadratic => self.base.moreau_gradient(w, self.delta),
            _ => conjugate_smooth_gradient_oracle(&self.base, w, self.delta, &self.proximity),
        }
    }
}
