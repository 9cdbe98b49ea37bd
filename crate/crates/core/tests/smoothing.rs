use nalgebra::DVector;
use proptest::prelude::*;
use smoothdiff::smoothing::{
    conjugate_smooth_gradient_oracle, smooth_eval, ProximityFunction, Regularizer, SmoothedRegularizer, WeightedPart,
};

const DIM: usize = 4;

fn vec_strategy(dim: usize, scale: f64) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-scale..scale, dim).prop_map(DVector::from_vec)
}

fn separable_regularizer() -> impl Strategy<Value = Regularizer> {
    prop_oneof![
        Just(Regularizer::Zero),
        (0.01f64..3.0).prop_map(Regularizer::l1),
        ((0.01f64..3.0), prop::collection::btree_set(0..DIM, 0..=DIM))
            .prop_map(|(rho, mask)| Regularizer::group_l1(rho, mask)),
        ((-2.0f64..0.0), (0.0f64..2.0)).prop_map(|(lo, hi)| Regularizer::IndicatorBox { lo, hi }),
    ]
}

fn finite_regularizer() -> impl Strategy<Value = Regularizer> {
    prop_oneof![
        (0.01f64..3.0).prop_map(Regularizer::l1),
        ((0.01f64..3.0), prop::collection::btree_set(0..DIM, 1..=DIM))
            .prop_map(|(rho, mask)| Regularizer::group_l1(rho, mask)),
        ((0.01f64..2.0), (0.01f64..2.0)).prop_map(|(a, b)| Regularizer::WeightedSum {
            parts: vec![
                WeightedPart { weight: a, regularizer: Regularizer::group_l1(1.0, [0, 1]) },
                WeightedPart { weight: b, regularizer: Regularizer::group_l1(1.0, [2]) },
            ],
        }),
    ]
}

fn any_regularizer() -> impl Strategy<Value = Regularizer> {
    prop_oneof![separable_regularizer(), (0.1f64..3.0).prop_map(|radius| Regularizer::IndicatorBall { radius }),]
}

fn prox_objective(r: &Regularizer, u: &DVector<f64>, w: &DVector<f64>, delta: f64) -> f64 {
    r.evaluate(u.as_slice()) + (u - w).norm_squared() / (2.0 * delta)
}

/// Golden-section minimization of a unimodal function on `[lo, hi]`.
fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let a = hi - phi * (hi - lo);
        let b = lo + phi * (hi - lo);
        if f(a) <= f(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    0.5 * (lo + hi)
}

/// Coordinate-wise brute-force prox of a separable regularizer.
fn brute_force_prox(r: &Regularizer, w: &DVector<f64>, delta: f64) -> DVector<f64> {
    DVector::from_fn(w.len(), |i, _| {
        let cost = |x: f64| {
            let pen = match r {
                Regularizer::Zero => 0.0,
                Regularizer::L1 { rho } => rho * x.abs(),
                Regularizer::GroupL1 { rho, mask } => {
                    if mask.contains(&i) {
                        rho * x.abs()
                    } else {
                        0.0
                    }
                }
                _ => unreachable!(),
            };
            pen + (x - w[i]).powi(2) / (2.0 * delta)
        };
        match r {
            Regularizer::IndicatorBox { lo, hi } => golden_min(|x| (x - w[i]).powi(2), *lo, *hi),
            _ => golden_min(cost, -10.0, 10.0),
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn separable_prox_matches_brute_force(
        r in separable_regularizer(),
        w in vec_strategy(DIM, 5.0),
        delta in 0.01f64..3.0,
    ) {
        let p = r.prox(&w, delta).unwrap();
        let q = brute_force_prox(&r, &w, delta);
        // argmin located to sqrt(machine epsilon); objective values compare exactly
        prop_assert!((&p - &q).amax() < 1e-6, "prox {p} vs brute force {q}");
        prop_assert!(prox_objective(&r, &p, &w, delta) <= prox_objective(&r, &q, &w, delta) + 1e-12);
    }

    #[test]
    fn ball_prox_satisfies_projection_inequality(
        radius in 0.1f64..3.0,
        w in vec_strategy(DIM, 5.0),
        delta in 0.01f64..3.0,
        probes in prop::collection::vec(vec_strategy(DIM, 1.0), 20),
    ) {
        let r = Regularizer::IndicatorBall { radius };
        let p = r.prox(&w, delta).unwrap();
        prop_assert!(p.norm() <= radius * (1.0 + 1e-12));
        let best = prox_objective(&r, &p, &w, delta);
        for probe in &probes {
            // a feasible point inside the ball
            let q = probe * (radius / probe.norm().max(1.0));
            prop_assert!((&w - &p).dot(&(&q - &p)) <= 1e-9);
            prop_assert!(best <= prox_objective(&r, &q, &w, delta) + 1e-12);
        }
    }

    #[test]
    fn weighted_sum_prox_is_partwise(
        a in 0.01f64..3.0,
        b in 0.01f64..3.0,
        w in vec_strategy(DIM, 5.0),
        delta in 0.01f64..3.0,
    ) {
        let first = Regularizer::group_l1(1.0, [0, 1]);
        let second = Regularizer::IndicatorBox { lo: -0.5, hi: 0.5 };
        let sum = Regularizer::WeightedSum {
            parts: vec![
                WeightedPart { weight: a, regularizer: first.clone() },
                WeightedPart { weight: b, regularizer: Regularizer::group_l1(1.0, [3]) },
            ],
        };
        let p = sum.prox(&w, delta).unwrap();
        let p_first = first.prox(&w, a * delta).unwrap();
        let p_second = Regularizer::group_l1(1.0, [3]).prox(&w, b * delta).unwrap();
        prop_assert_eq!(p[0], p_first[0]);
        prop_assert_eq!(p[1], p_first[1]);
        prop_assert_eq!(p[2], w[2]);
        prop_assert_eq!(p[3], p_second[3]);
        // overlapping supports are rejected
        let bad = Regularizer::WeightedSum {
            parts: vec![
                WeightedPart { weight: a, regularizer: Regularizer::l1(1.0) },
                WeightedPart { weight: b, regularizer: second },
            ],
        };
        prop_assert!(bad.validate(DIM).is_err());
    }

    #[test]
    fn envelope_below_regularizer_and_gap_shrinks_with_delta(
        r in finite_regularizer(),
        w in vec_strategy(DIM, 5.0),
    ) {
        let base = r.evaluate(w.as_slice());
        let mut previous_gap = f64::INFINITY;
        for delta in [1e-1, 1e-2, 1e-3] {
            let env = smooth_eval(&r, &w, delta, &ProximityFunction::Quadratic).unwrap();
            prop_assert!(env <= base + 1e-9);
            let gap = base - env;
            prop_assert!(gap <= previous_gap + 1e-12);
            previous_gap = gap;
        }
    }

    #[test]
    fn envelope_gradient_matches_finite_differences(
        r in finite_regularizer(),
        w in vec_strategy(DIM, 5.0),
        delta in 0.1f64..2.0,
    ) {
        let s = SmoothedRegularizer::moreau(r, delta).unwrap();
        let g = s.gradient(&w).unwrap();
        let h = 1e-6;
        for i in 0..DIM {
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (s.value(&plus).unwrap() - s.value(&minus).unwrap()) / (2.0 * h);
            prop_assert!((fd - g[i]).abs() < 1e-5, "coordinate {i}: fd {fd} vs gradient {}", g[i]);
        }
    }

    #[test]
    fn diagonal_proximity_oracle_matches_clipped_form(
        rho in 0.1f64..2.0,
        scales in prop::collection::vec(1.0f64..4.0, DIM),
        w in vec_strategy(DIM, 3.0),
        delta in 0.2f64..2.0,
    ) {
        let d = ProximityFunction::DiagonalQuadratic { scales: scales.clone() };
        let g = conjugate_smooth_gradient_oracle(&Regularizer::l1(rho), &w, delta, &d).unwrap();
        for i in 0..DIM {
            let expected = (w[i] / (delta * scales[i])).clamp(-rho, rho);
            prop_assert!((g[i] - expected).abs() < 1e-8);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn envelope_gradient_is_lipschitz_and_cocoercive(
        r in any_regularizer(),
        x in vec_strategy(DIM, 5.0),
        y in vec_strategy(DIM, 5.0),
        delta in 0.01f64..3.0,
    ) {
        let gx = r.moreau_gradient(&x, delta).unwrap();
        let gy = r.moreau_gradient(&y, delta).unwrap();
        let dg = &gx - &gy;
        let dx = &x - &y;
        prop_assert!(dg.norm() <= dx.norm() / delta * (1.0 + 1e-9) + 1e-12);
        prop_assert!(dg.dot(&dx) >= delta * dg.norm_squared() - 1e-9 * (1.0 + dx.norm_squared()));
    }
}

#[test]
fn cosh_gradient_oracle_is_finite_difference_of_numerical_envelope() {
    let r = Regularizer::l1(0.7);
    let w = DVector::from_vec(vec![1.3, -0.2, 0.05]);
    let delta = 0.5;
    let d = ProximityFunction::Cosh;
    let g = conjugate_smooth_gradient_oracle(&r, &w, delta, &d).unwrap();
    let h = 1e-5;
    for i in 0..w.len() {
        let mut plus = w.clone();
        let mut minus = w.clone();
        plus[i] += h;
        minus[i] -= h;
        let fd = (smooth_eval(&r, &plus, delta, &d).unwrap() - smooth_eval(&r, &minus, delta, &d).unwrap()) / (2.0 * h);
        assert!((fd - g[i]).abs() < 1e-5, "coordinate {i}: fd {fd} vs oracle {}", g[i]);
    }
}

#[test]
fn l1_envelope_is_huber() {
    let r = Regularizer::l1(1.0);
    for (x, expected) in [(3.0, 2.5), (-3.0, 2.5), (0.5, 0.125), (0.0, 0.0)] {
        let w = DVector::from_element(1, x);
        let v = smooth_eval(&r, &w, 1.0, &ProximityFunction::Quadratic).unwrap();
        assert!((v - expected).abs() < 1e-15, "x = {x}: {v}");
    }
}
