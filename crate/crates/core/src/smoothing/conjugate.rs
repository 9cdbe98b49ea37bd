//! Conjugate-side routines for generic proximity functions.
//!
//! These solve the two equivalent forms of the smoothed regularizer
//! numerically and are only meant for low-dimensional checks:
//!
//! * gradient: `argmax_u { w^T u - R*(u) - delta d(u) }`
//! * value: `min_u { R(u) + delta d*((w - u) / delta) }`

use nalgebra::DVector;

use super::{check_delta, ProximityFunction, Regularizer, SmoothingError, MAX_GENERIC_DIM};

const INNER_TOL: f64 = 1e-13;
const INNER_MAX_ITERS: usize = 200_000;

/// Closed-form conjugates of the supported regularizer kinds.
#[derive(Debug, Clone, PartialEq)]
pub enum Conjugate {
    /// Indicator of `{u : |u_i| <= bounds_i}`; a zero bound pins `u_i = 0`.
    BoxIndicator { bounds: Vec<f64> },
    /// Support function of `[lo, hi]^M`: `sum_i max(lo u_i, hi u_i)`.
    BoxSupport { lo: f64, hi: f64 },
    /// Support function of the ball: `radius * ||u||`.
    BallSupport { radius: f64 },
}

impl Conjugate {
    pub fn value(&self, u: &DVector<f64>) -> f64 {
        match self {
            Self::BoxIndicator { bounds } => {
                if u.iter().zip(bounds).all(|(x, b)| x.abs() <= *b) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            Self::BoxSupport { lo, hi } => u.iter().map(|x| (lo * x).max(hi * x)).sum(),
            Self::BallSupport { radius } => radius * u.norm(),
        }
    }

    /// `argmin_u t * R*(u) + ||u - v||^2 / 2`, derived directly from the
    /// conjugate rather than through the Moreau identity.
    pub fn prox(&self, v: &DVector<f64>, t: f64) -> DVector<f64> {
        match self {
            Self::BoxIndicator { bounds } => DVector::from_iterator(
                v.len(),
                v.iter().zip(bounds).map(|(x, b)| x.clamp(-b, *b)),
            ),
            Self::BoxSupport { lo, hi } => v.map(|x| {
                if x > t * hi {
                    x - t * hi
                } else if x < t * lo {
                    x - t * lo
                } else {
                    0.0
                }
            }),
            Self::BallSupport { radius } => {
                let norm = v.norm();
                if norm <= t * radius {
                    DVector::zeros(v.len())
                } else {
                    v * (1.0 - t * radius / norm)
                }
            }
        }
    }
}

fn check_generic_dim(dim: usize) -> Result<(), SmoothingError> {
    if dim > MAX_GENERIC_DIM {
        Err(SmoothingError::DimensionTooLargeForGenericProximity {
            dim,
            max: MAX_GENERIC_DIM,
        })
    } else {
        Ok(())
    }
}

/// `grad R^delta(w)` as the maximizer of the strongly concave conjugate
/// problem, by proximal gradient ascent with backtracking.
pub fn conjugate_smooth_gradient_oracle(
    r: &Regularizer,
    w: &DVector<f64>,
    delta: f64,
    d: &ProximityFunction,
) -> Result<DVector<f64>, SmoothingError> {
    check_delta(delta)?;
    check_generic_dim(w.len())?;
    d.validate()?;
    d.check_dim(w.len())?;
    let conj = r.conjugate(w.len())?;

    // minimize R*(u) + f(u), f(u) = delta d(u) - w^T u
    let f = |u: &DVector<f64>| delta * d.value(u) - w.dot(u);
    let grad_f = |u: &DVector<f64>| d.gradient(u) * delta - w;

    let mut u = DVector::zeros(w.len());
    let mut step = 1.0 / delta;
    for _ in 0..INNER_MAX_ITERS {
        let g = grad_f(&u);
        let fu = f(&u);
        let next = loop {
            let candidate = conj.prox(&(&u - &g * step), step);
            let diff = &candidate - &u;
            let model = fu + g.dot(&diff) + diff.norm_squared() / (2.0 * step);
            if f(&candidate) <= model + 1e-15 * fu.abs().max(1.0) {
                break candidate;
            }
            step *= 0.5;
        };
        let change = (&next - &u).norm();
        u = next;
        if change <= INNER_TOL * u.norm().max(1.0) {
            return Ok(u);
        }
    }
    Err(SmoothingError::NoConvergence(INNER_MAX_ITERS))
}

/// `R^delta(w) = min_u { R(u) + delta d*((w - u) / delta) }` by proximal
/// gradient on `u` with step `delta` (`d*` is 1-smooth, so the smooth part
/// has a `1/delta`-Lipschitz gradient).
pub fn smooth_eval_numerical(
    r: &Regularizer,
    w: &DVector<f64>,
    delta: f64,
    d: &ProximityFunction,
) -> Result<f64, SmoothingError> {
    check_delta(delta)?;
    check_generic_dim(w.len())?;
    d.validate()?;
    d.check_dim(w.len())?;
    r.validate(w.len())?;

    let smooth = |u: &DVector<f64>| delta * d.conjugate(&((w - u) / delta));
    let mut u = r.prox(w, delta)?;
    for _ in 0..INNER_MAX_ITERS {
        let mut next = &u + d.conjugate_gradient(&((w - &u) / delta)) * delta;
        r.prox_in_place(next.as_mut_slice(), delta);
        let change = (&next - &u).norm();
        u = next;
        if change <= INNER_TOL * u.norm().max(1.0) {
            return Ok(r.evaluate(u.as_slice()) + smooth(&u));
        }
    }
    Err(SmoothingError::NoConvergence(INNER_MAX_ITERS))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn l1_oracle_clamps_maximizer() {
        // max_u 3u - u^2/2 over |u| <= 1 -> u = 1, matching (3 - prox(3)) / 1
        let u = conjugate_smooth_gradient_oracle(
            &Regularizer::l1(1.0),
            &v(&[3.0]),
            1.0,
            &ProximityFunction::Quadratic,
        )
        .unwrap();
        assert!((u[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_at_origin_is_zero() {
        let u = conjugate_smooth_gradient_oracle(
            &Regularizer::l1(1.0),
            &v(&[0.0, 0.0]),
            0.4,
            &ProximityFunction::Cosh,
        )
        .unwrap();
        assert!(u.amax() < 1e-14);
    }

    #[test]
    fn box_oracle_matches_moreau_gradient() {
        let r = Regularizer::IndicatorBox { lo: -1.0, hi: 1.0 };
        let w = v(&[2.0]);
        let u = conjugate_smooth_gradient_oracle(&r, &w, 1.0, &ProximityFunction::Quadratic).unwrap();
        let g = r.moreau_gradient(&w, 1.0).unwrap();
        assert!((u - g).amax() < 1e-10);
    }

    #[test]
    fn weighted_sum_has_no_closed_form_conjugate() {
        let r = Regularizer::WeightedSum { parts: vec![] };
        let err = conjugate_smooth_gradient_oracle(&r, &v(&[1.0]), 1.0, &ProximityFunction::Quadratic)
            .unwrap_err();
        assert!(matches!(err, SmoothingError::ConjugateUnavailable(_)));
    }

    #[test]
    fn generic_routines_reject_large_dimension() {
        let w = DVector::zeros(MAX_GENERIC_DIM + 1);
        let d = ProximityFunction::Cosh;
        let r = Regularizer::l1(1.0);
        assert!(matches!(
            conjugate_smooth_gradient_oracle(&r, &w, 1.0, &d),
            Err(SmoothingError::DimensionTooLargeForGenericProximity { .. })
        ));
        assert!(matches!(
            smooth_eval_numerical(&r, &w, 1.0, &d),
            Err(SmoothingError::DimensionTooLargeForGenericProximity { .. })
        ));
    }

    #[test]
    fn primal_and_dual_values_agree_for_cosh() {
        // R^delta(w) = w^T u* - R*(u*) - delta d(u*) at the dual maximizer u*
        let d = ProximityFunction::Cosh;
        let cases: [(Regularizer, &[f64]); 3] = [
            (Regularizer::l1(0.8), &[1.3, -0.2, 2.5]),
            (Regularizer::IndicatorBox { lo: -0.5, hi: 1.0 }, &[1.7, -2.0, 0.3]),
            (Regularizer::IndicatorBall { radius: 1.0 }, &[1.5, 0.5, -1.0]),
        ];
        for (r, w) in cases {
            let w = v(w);
            let delta = 0.6;
            let primal = smooth_eval_numerical(&r, &w, delta, &d).unwrap();
            let u = conjugate_smooth_gradient_oracle(&r, &w, delta, &d).unwrap();
            let conj = r.conjugate(w.len()).unwrap();
            let dual = w.dot(&u) - conj.value(&u) - delta * d.value(&u);
            assert!((primal - dual).abs() < 1e-8, "{r:?}: {primal} vs {dual}");
        }
    }

    #[test]
    fn numerical_value_matches_moreau_for_quadratic() {
        let d = ProximityFunction::Quadratic;
        let r = Regularizer::group_l1(0.7, [0, 2]);
        let w = v(&[1.0, -3.0, 0.2]);
        let closed = super::super::smooth_eval(&r, &w, 0.5, &d).unwrap();
        let numeric = smooth_eval_numerical(&r, &w, 0.5, &d).unwrap();
        assert!((closed - numeric).abs() < 1e-12);
    }
}
