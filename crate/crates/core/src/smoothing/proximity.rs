use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::SmoothingError;

/// Strongly convex proximity function `d`, centred (`min d = d(0) = 0`) and
/// normalized so that `d(u) >= ||u||^2 / 2`. Under this normalization
/// `d*(0) = 0` for every variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProximityFunction {
    /// `||u||^2 / 2`; smoothing with it yields the Moreau envelope.
    Quadratic,
    /// `sum_i c_i u_i^2 / 2` with every `c_i >= 1`.
    DiagonalQuadratic { scales: Vec<f64> },
    /// `sum_i (cosh(u_i) - 1)`.
    Cosh,
}

impl ProximityFunction {
    pub fn validate(&self) -> Result<(), SmoothingError> {
        if let Self::DiagonalQuadratic { scales } = self {
            if let Some(c) = scales.iter().find(|c| !(**c >= 1.0 && c.is_finite())) {
                return Err(SmoothingError::InvalidParameter(format!(
                    "diagonal proximity scales must be >= 1, got {c}"
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn check_dim(&self, dim: usize) -> Result<(), SmoothingError> {
        match self {
            Self::DiagonalQuadratic { scales } if scales.len() != dim => {
                Err(SmoothingError::InvalidParameter(format!(
                    "proximity has {} scales but dimension is {dim}",
                    scales.len()
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn value(&self, u: &DVector<f64>) -> f64 {
        match self {
            Self::Quadratic => 0.5 * u.norm_squared(),
            Self::DiagonalQuadratic { scales } => {
                0.5 * u.iter().zip(scales).map(|(x, c)| c * x * x).sum::<f64>()
            }
            Self::Cosh => u.iter().map(|x| x.cosh() - 1.0).sum(),
        }
    }

    pub fn gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Quadratic => u.clone(),
            Self::DiagonalQuadratic { scales } => {
                DVector::from_iterator(u.len(), u.iter().zip(scales).map(|(x, c)| c * x))
            }
            Self::Cosh => u.map(f64::sinh),
        }
    }

    /// `d*(v) = sup_u v^T u - d(u)`.
    pub fn conjugate(&self, v: &DVector<f64>) -> f64 {
        match self {
            Self::Quadratic => 0.5 * v.norm_squared(),
            Self::DiagonalQuadratic { scales } => {
                0.5 * v.iter().zip(scales).map(|(x, c)| x * x / c).sum::<f64>()
            }
            Self::Cosh => v
                .iter()
                .map(|x| x * x.asinh() - (1.0 + x * x).sqrt() + 1.0)
                .sum(),
        }
    }

    /// `grad d*(v)`; 1-Lipschitz because `d` is 1-strongly convex.
    pub fn conjugate_gradient(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Quadratic => v.clone(),
            Self::DiagonalQuadratic { scales } => {
                DVector::from_iterator(v.len(), v.iter().zip(scales).map(|(x, c)| x / c))
            }
            Self::Cosh => v.map(f64::asinh),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all() -> Vec<ProximityFunction> {
        vec![
            ProximityFunction::Quadratic,
            ProximityFunction::DiagonalQuadratic { scales: vec![1.0, 2.5, 4.0] },
            ProximityFunction::Cosh,
        ]
    }

    #[test]
    fn normalization_holds() {
        let pts = [[0.0, 0.0, 0.0], [0.3, -1.0, 2.0], [-4.0, 0.1, 0.5]];
        for d in all() {
            for p in pts {
                let u = DVector::from_column_slice(&p);
                assert!(d.value(&u) >= 0.5 * u.norm_squared() - 1e-15);
            }
            let zero = DVector::zeros(3);
            assert_eq!(d.value(&zero), 0.0);
            assert_eq!(d.conjugate(&zero), 0.0);
        }
    }

    #[test]
    fn fenchel_young_is_tight_at_gradient() {
        // d(u) + d*(grad d(u)) = u^T grad d(u)
        let u = DVector::from_column_slice(&[0.4, -1.2, 0.9]);
        for d in all() {
            let g = d.gradient(&u);
            let gap = d.value(&u) + d.conjugate(&g) - u.dot(&g);
            assert!(gap.abs() < 1e-12, "{d:?}: {gap}");
            let back = d.conjugate_gradient(&g);
            assert!((back - &u).amax() < 1e-12);
        }
    }

    #[test]
    fn scales_below_one_rejected() {
        let d = ProximityFunction::DiagonalQuadratic { scales: vec![1.0, 0.5] };
        assert!(d.validate().is_err());
    }
}
