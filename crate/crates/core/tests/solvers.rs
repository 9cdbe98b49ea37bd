use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use smoothdiff::engine::{aggregate_smoothed_gradient, AgentSpec};
use smoothdiff::experiment::{build_problem, presets, ExperimentConfig};
use smoothdiff::risks::{QuadraticNoise, QuadraticRisk, SmoothRisk};
use smoothdiff::smoothing::Regularizer;
use smoothdiff::solvers::{
    aggregate_objective, bias_bound_rhs, recover_subgradients, smoothed_objective, solve_nonsmooth, solve_smoothed,
};
use smoothdiff::topology::PerronVector;

const DIM: usize = 3;

fn random_spd(entries: &[f64], shift: f64) -> DMatrix<f64> {
    let g = DMatrix::from_row_slice(DIM, DIM, entries);
    &g * g.transpose() / DIM as f64 + DMatrix::identity(DIM, DIM) * shift
}

fn agent_strategy() -> impl Strategy<Value = AgentSpec> {
    (
        prop::collection::vec(-1.0f64..1.0, DIM * DIM),
        0.2f64..1.0,
        prop::collection::vec(-2.0f64..2.0, DIM),
        prop_oneof![
            Just(Regularizer::Zero),
            (0.05f64..1.5).prop_map(Regularizer::l1),
            ((0.05f64..1.5), prop::collection::btree_set(0..DIM, 1..=DIM))
                .prop_map(|(rho, mask)| Regularizer::group_l1(rho, mask)),
            Just(Regularizer::IndicatorBox { lo: -0.5, hi: 0.5 }),
        ],
    )
        .prop_map(|(entries, shift, b, regularizer)| {
            let risk = QuadraticRisk::new(random_spd(&entries, shift), DVector::from_vec(b), QuadraticNoise::Exact);
            AgentSpec::custom(SmoothRisk::Quadratic(risk.unwrap()), regularizer)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn nonsmooth_solution_beats_perturbations(
        agents in prop::collection::vec(agent_strategy(), 1..5),
        dirs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, DIM), 20),
    ) {
        let p = PerronVector::uniform(agents.len());
        let sol = solve_nonsmooth(&agents, &p, 1e-11).unwrap();
        let best = aggregate_objective(&agents, &p, &sol.w_star);
        prop_assert!((best - sol.objective).abs() < 1e-12 * best.abs().max(1.0));
        for d in &dirs {
            for eps in [1e-3, 1e-1] {
                let w = &sol.w_star + DVector::from_column_slice(d) * eps;
                prop_assert!(best <= aggregate_objective(&agents, &p, &w) + 1e-10);
            }
        }
    }

    #[test]
    fn smoothed_solution_is_stationary_and_bias_is_bounded(
        agents in prop::collection::vec(agent_strategy(), 1..5),
        delta in 0.01f64..0.5,
    ) {
        let p = PerronVector::uniform(agents.len());
        let smooth = solve_smoothed(&agents, &p, delta, 1e-11).unwrap();
        prop_assert!(aggregate_smoothed_gradient(&smooth.w_star, &agents, &p, delta).norm() < 1e-10);
        let base = smoothed_objective(&agents, &p, delta, &smooth.w_star).unwrap();
        for i in 0..DIM {
            let mut w = smooth.w_star.clone();
            w[i] += 1e-3;
            prop_assert!(base <= smoothed_objective(&agents, &p, delta, &w).unwrap() + 1e-12);
        }

        let exact = solve_nonsmooth(&agents, &p, 1e-12).unwrap();
        let r_star = recover_subgradients(&agents, &p, &exact.w_star).unwrap();
        let bound = bias_bound_rhs(&agents, &p, delta, &r_star).unwrap();
        let bias = (&smooth.w_star - &exact.w_star).norm_squared();
        prop_assert!(bias <= bound + 1e-9, "bias {bias} exceeds bound {bound}");
    }
}

#[test]
fn desk_scale_logistic_oracle_converges() {
    let text = presets::preset("paper-fig3").unwrap();
    let config = ExperimentConfig::from_toml_str(text, &["eval_samples=20000".to_string()]).unwrap();
    let problem = build_problem(&config).unwrap();
    let delta = 0.25;
    let sol = solve_smoothed(&problem.agents, &problem.p, delta, 1e-9).unwrap();
    let g = aggregate_smoothed_gradient(&sol.w_star, &problem.agents, &problem.p, delta);
    assert!(g.norm() < 1e-9, "gradient norm {}", g.norm());
    // the irrelevant coordinates carry no class information
    let informative: f64 = sol.w_star.rows(0, 10).iter().sum::<f64>() / 10.0;
    let irrelevant = sol.w_star.rows(10, 10).amax();
    assert!(informative > 10.0 * irrelevant, "{informative} vs {irrelevant}");
}
