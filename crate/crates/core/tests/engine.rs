use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use smoothdiff::engine::{
    run, step_centralized, step_non_incremental, step_regularized_diffusion, AgentSpec, DiffusionConfig, MemorySink,
    NetworkState, NullSink, RngStreams, RunContext, Variant,
};
use smoothdiff::risks::{QuadraticNoise, QuadraticRisk, SmoothRisk};
use smoothdiff::smoothing::Regularizer;
use smoothdiff::solvers::solve_smoothed;
use smoothdiff::topology::{CombinationMatrix, Graph, PerronVector, WeightingRule};

fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

fn quad(h: DMatrix<f64>, b: DVector<f64>, noise: QuadraticNoise) -> SmoothRisk {
    SmoothRisk::Quadratic(QuadraticRisk::new(h, b, noise).unwrap())
}

fn ring_network(n: usize) -> (CombinationMatrix, PerronVector) {
    let a = CombinationMatrix::build(&Graph::ring(n).unwrap(), &WeightingRule::Metropolis).unwrap();
    let p = a.perron_vector().unwrap();
    (a, p)
}

fn heterogeneous_agents(n: usize, regularizer: impl Fn(usize) -> Regularizer, noise: QuadraticNoise) -> Vec<AgentSpec> {
    (0..n)
        .map(|k| {
            let s = 1.0 + 0.1 * k as f64;
            let h = DMatrix::from_row_slice(2, 2, &[s, 0.2, 0.2, 2.0 - 0.05 * k as f64]);
            AgentSpec::custom(quad(h, v(&[k as f64 - 1.0, 0.5]), noise), regularizer(k))
        })
        .collect()
}

fn context(dim: usize, p: PerronVector) -> RunContext<'static> {
    RunContext { run_id: "t".into(), target: DVector::zeros(dim), centroid_weights: p, test_set: None, test_every: 0 }
}

#[test]
fn single_agent_matches_damped_proximal_recursion() {
    let h = DMatrix::from_row_slice(2, 2, &[1.5, 0.3, 0.3, 0.8]);
    let b = v(&[2.0, -0.4]);
    let r = Regularizer::l1(0.6);
    let agents = vec![AgentSpec::custom(quad(h.clone(), b.clone(), QuadraticNoise::Exact), r.clone())];
    let a = CombinationMatrix::non_cooperative(1);
    let (mu, delta) = (0.05, 0.2);
    let mut config = DiffusionConfig::new(mu, delta, 0);
    config.exact_gradients = true;
    let rngs = RngStreams::new(0);
    let mut state = NetworkState::uniform(1, v(&[3.0, -2.0]));
    let mut w = v(&[3.0, -2.0]);
    for _ in 0..200 {
        state = step_regularized_diffusion(&state, &agents, &a, &config, &rngs).unwrap();
        let phi = &w - (&h * &w - &b) * mu;
        let prox = r.prox(&phi, delta).unwrap();
        w = &phi * (1.0 - mu / delta) + prox * (mu / delta);
        assert!((&state.w[0] - &w).amax() < 1e-12);
    }
}

#[test]
fn variants_coincide_without_regularization() {
    let n = 5;
    let agents = heterogeneous_agents(n, |_| Regularizer::Zero, QuadraticNoise::Synthetic { variance: 0.3 });
    let (a, _) = ring_network(n);
    let config = DiffusionConfig::new(0.02, 0.1, 0);
    let rngs = RngStreams::new(42);
    let mut s1 = NetworkState::uniform(n, v(&[1.0, 1.0]));
    let mut s2 = s1.clone();
    for _ in 0..100 {
        s1 = step_regularized_diffusion(&s1, &agents, &a, &config, &rngs).unwrap();
        s2 = step_non_incremental(&s2, &agents, &a, &config, &rngs).unwrap();
        assert_eq!(s1, s2);
    }
}

#[test]
fn variants_differ_with_regularization() {
    let n = 3;
    let agents = heterogeneous_agents(n, |_| Regularizer::l1(0.5), QuadraticNoise::Exact);
    let (a, _) = ring_network(n);
    let mut config = DiffusionConfig::new(0.05, 0.1, 0);
    config.exact_gradients = true;
    let rngs = RngStreams::new(0);
    // inside |w| < delta rho the envelope gradient is linear, so its argument matters
    let s = NetworkState::uniform(n, v(&[0.03, -0.02]));
    let s1 = step_regularized_diffusion(&s, &agents, &a, &config, &rngs).unwrap();
    let s2 = step_non_incremental(&s, &agents, &a, &config, &rngs).unwrap();
    assert_ne!(s1, s2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn identical_agents_stay_in_consensus(
        n in 2usize..8,
        seed in any::<u64>(),
        w0 in prop::collection::vec(-3.0f64..3.0, 2),
        rho in 0.0f64..1.0,
    ) {
        let h = DMatrix::from_row_slice(2, 2, &[1.2, 0.1, 0.1, 0.9]);
        let agent = AgentSpec::custom(quad(h, v(&[0.5, -0.5]), QuadraticNoise::Exact), Regularizer::l1(rho));
        let agents = vec![agent; n];
        let g = Graph::random_geometric(n, 0.6, seed).unwrap();
        let a = CombinationMatrix::build(&g, &WeightingRule::Metropolis).unwrap();
        let mut config = DiffusionConfig::new(0.05, 0.2, 0);
        config.exact_gradients = true;
        let rngs = RngStreams::new(seed);
        let mut state = NetworkState::uniform(n, DVector::from_vec(w0));
        for _ in 0..50 {
            state = step_regularized_diffusion(&state, &agents, &a, &config, &rngs).unwrap();
            for w in &state.w {
                prop_assert!((w - &state.w[0]).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn centralized_step_is_the_affine_map_without_regularization(
        w in prop::collection::vec(-5.0f64..5.0, 2),
        mu in 0.001f64..0.2,
    ) {
        let n = 4;
        let agents = heterogeneous_agents(n, |_| Regularizer::Zero, QuadraticNoise::Exact);
        let (_, p) = ring_network(n);
        let config = DiffusionConfig::new(mu, 1.0, 0);
        let w = DVector::from_vec(w);
        let mut h_bar = DMatrix::zeros(2, 2);
        let mut b_bar = DVector::zeros(2);
        for (k, agent) in agents.iter().enumerate() {
            h_bar += agent.risk.hessian().unwrap() * p[k];
            b_bar += -agent.risk.exact_gradient(&DVector::zeros(2)) * p[k];
        }
        let expected = (DMatrix::identity(2, 2) - h_bar * mu) * &w + b_bar * mu;
        let got = step_centralized(&w, &agents, &p, &config).unwrap();
        prop_assert!((got - expected).amax() < 1e-12);
    }
}

#[test]
fn smoothed_minimizer_is_a_fixed_point_of_the_centralized_map() {
    let n = 4;
    let agents = heterogeneous_agents(n, |k| Regularizer::group_l1(0.8, [k % 2]), QuadraticNoise::Exact);
    let (_, p) = ring_network(n);
    let delta = 0.3;
    let w_star = solve_smoothed(&agents, &p, delta, 1e-12).unwrap().w_star;
    let next = step_centralized(&w_star, &agents, &p, &DiffusionConfig::new(0.05, delta, 0)).unwrap();
    assert!((next - &w_star).norm() < 1e-12);
}

#[test]
fn runs_are_deterministic_and_seed_dependent() {
    let n = 4;
    let agents = heterogeneous_agents(n, |_| Regularizer::l1(0.3), QuadraticNoise::Streaming { noise_variance: 0.1 });
    let (a, p) = ring_network(n);
    let mut config = DiffusionConfig::new(0.01, 0.1, 300);
    config.seed = 9;
    let ctx = context(2, p);
    let sink = MemorySink::default();
    let first = run(&agents, &a, &config, &ctx, &sink).unwrap();
    let second = run(&agents, &a, &config, &ctx, &NullSink).unwrap();
    assert_eq!(first, second);
    assert_eq!(first.rows.len(), 301);
    assert_eq!(sink.take()["t"], first.rows);
    config.seed = 10;
    let third = run(&agents, &a, &config, &ctx, &NullSink).unwrap();
    assert_ne!(first.rows, third.rows);
}

#[test]
fn centralized_variant_keeps_agents_identical() {
    let n = 4;
    let agents = heterogeneous_agents(n, |_| Regularizer::l1(0.3), QuadraticNoise::Exact);
    let (a, p) = ring_network(n);
    let mut config = DiffusionConfig::new(0.05, 0.2, 50);
    config.variant = Variant::CentralizedReference;
    config.init = Some(v(&[2.0, 2.0]));
    let record = run(&agents, &a, &config, &context(2, p), &NullSink).unwrap();
    assert!(record.rows.iter().all(|r| r.disagreement == 0.0));
    assert!(record.rows.last().unwrap().msd_network < record.rows[0].msd_network);
}
