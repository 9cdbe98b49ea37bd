//! Agent networks, combination matrices and their Perron vectors.
//!
//! Conventions: `a[(l, k)]` scales the iterate travelling from agent `l` to
//! agent `k`, so the matrix is left-stochastic (every column sums to one) and
//! the Perron vector `p` is its right eigenvector at eigenvalue one.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Column-sum slack tolerated for user-supplied weights.
pub const EXPLICIT_WEIGHT_TOL: f64 = 1e-9;
const PERRON_TOL: f64 = 1e-13;
const PERRON_MAX_ITERS: usize = 100_000;
const LAMBDA2_TOL: f64 = 1e-10;
const LAMBDA2_MAX_SQUARINGS: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("graph must contain at least one agent")]
    Empty,
    #[error("edge ({from} -> {to}) references an agent outside 0..{n}")]
    EdgeOutOfRange { from: usize, to: usize, n: usize },
    #[error("graph is not strongly connected (agent {unreachable} unreachable from agent 0 in some direction)")]
    NotStronglyConnected { unreachable: usize },
    #[error("no agent has a self-loop")]
    NoSelfLoop,
    #[error("column {column} sums to {sum}, expected 1")]
    ColumnSumViolation { column: usize, sum: f64 },
    #[error("weight a[{from},{to}] = {weight} is invalid: {reason}")]
    InvalidWeight {
        from: usize,
        to: usize,
        weight: f64,
        reason: &'static str,
    },
    #[error("metropolis weights require an undirected graph; edge ({from} -> {to}) has no reverse")]
    AsymmetricGraph { from: usize, to: usize },
    #[error("power iteration did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },
}

/// A directed graph over agents `0..n`; an edge `(l, k)` means `l` is a
/// neighbour of `k`, i.e. `l` sends to `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n_agents: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl Graph {
    pub fn new(
        n_agents: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, TopologyError> {
        if n_agents == 0 {
            return Err(TopologyError::Empty);
        }
        let mut set = BTreeSet::new();
        for (from, to) in edges {
            if from >= n_agents || to >= n_agents {
                return Err(TopologyError::EdgeOutOfRange {
                    from,
                    to,
                    n: n_agents,
                });
            }
            set.insert((from, to));
        }
        Ok(Self {
            n_agents,
            edges: set,
        })
    }

    /// Builds a graph from undirected pairs, inserting both directions.
    pub fn undirected(
        n_agents: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
        self_loops: bool,
    ) -> Result<Self, TopologyError> {
        let mut edges = Vec::new();
        for (a, b) in pairs {
            edges.push((a, b));
            edges.push((b, a));
        }
        if self_loops {
            edges.extend((0..n_agents).map(|k| (k, k)));
        }
        Self::new(n_agents, edges)
    }

    pub fn complete(n_agents: usize) -> Result<Self, TopologyError> {
        let edges = (0..n_agents).flat_map(|l| (0..n_agents).map(move |k| (l, k)));
        Self::new(n_agents, edges)
    }

    /// Bidirectional ring with self-loops on every agent.
    pub fn ring(n_agents: usize) -> Result<Self, TopologyError> {
        let pairs = (0..n_agents).map(|k| (k, (k + 1) % n_agents));
        Self::undirected(n_agents, pairs, true)
    }

    /// Random geometric graph on the unit square with self-loops. If the
    /// radius leaves the graph disconnected it is grown by 10% until it is
    /// not; the node positions stay fixed, so the result is a deterministic
    /// function of `(n_agents, radius, seed)`.
    pub fn random_geometric(
        n_agents: usize,
        radius: f64,
        seed: u64,
    ) -> Result<Self, TopologyError> {
        if n_agents == 0 {
            return Err(TopologyError::Empty);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<(f64, f64)> = (0..n_agents)
            .map(|_| (rng.random::<f64>(), rng.random::<f64>()))
            .collect();
        let mut r = radius.max(1e-3);
        loop {
            let mut pairs = Vec::new();
            for a in 0..n_agents {
                for b in (a + 1)..n_agents {
                    let (dx, dy) = (points[a].0 - points[b].0, points[a].1 - points[b].1);
                    if dx.hypot(dy) <= r {
                        pairs.push((a, b));
                    }
                }
            }
            let graph = Self::undirected(n_agents, pairs, true)?;
            if graph.is_strongly_connected() {
                return Ok(graph);
            }
            r *= 1.1;
        }
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges.contains(&(from, to))
    }

    /// In-neighbourhood `N_k` of agent `k` (includes `k` when it has a self-loop).
    pub fn neighbours(&self, k: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|&&(_, to)| to == k)
            .map(|&(from, _)| from)
            .collect()
    }

    pub fn has_self_loop(&self) -> bool {
        (0..self.n_agents).any(|k| self.has_edge(k, k))
    }

    pub fn is_strongly_connected(&self) -> bool {
        self.first_unreachable().is_none()
    }

    fn first_unreachable(&self) -> Option<usize> {
        let n = self.n_agents;
        let mut forward = vec![Vec::new(); n];
        let mut backward = vec![Vec::new(); n];
        for &(from, to) in &self.edges {
            forward[from].push(to);
            backward[to].push(from);
        }
        for adjacency in [&forward, &backward] {
            let mut seen = vec![false; n];
            let mut queue = VecDeque::from([0usize]);
            seen[0] = true;
            while let Some(v) = queue.pop_front() {
                for &w in &adjacency[v] {
                    if !seen[w] {
                        seen[w] = true;
                        queue.push_back(w);
                    }
                }
            }
            if let Some(k) = seen.iter().position(|&s| !s) {
                return Some(k);
            }
        }
        None
    }

    fn validate_connectivity(&self) -> Result<(), TopologyError> {
        if let Some(unreachable) = self.first_unreachable() {
            return Err(TopologyError::NotStronglyConnected { unreachable });
        }
        if !self.has_self_loop() {
            return Err(TopologyError::NoSelfLoop);
        }
        Ok(())
    }
}

/// How combination weights are derived from a graph.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightingRule {
    /// `a_{lk} = 1 / |N_k|` for every in-neighbour `l` of `k`.
    UniformAveraging,
    /// `a_{lk} = 1 / max(n_k, n_l)` off the diagonal, self weight takes the residual.
    Metropolis,
    /// User weights keyed by `(from, to)`; validated, never modified.
    Explicit(BTreeMap<(usize, usize), f64>),
}

/// Left-stochastic combination matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinationMatrix {
    a: DMatrix<f64>,
    primitive: bool,
}

impl CombinationMatrix {
    pub fn build(graph: &Graph, rule: &WeightingRule) -> Result<Self, TopologyError> {
        graph.validate_connectivity()?;
        let n = graph.n_agents();
        let mut a = DMatrix::zeros(n, n);
        match rule {
            WeightingRule::UniformAveraging => {
                for k in 0..n {
                    let nbrs = graph.neighbours(k);
                    let w = 1.0 / nbrs.len() as f64;
                    for l in nbrs {
                        a[(l, k)] = w;
                    }
                }
            }
            WeightingRule::Metropolis => {
                for (from, to) in graph.edges() {
                    if !graph.has_edge(to, from) {
                        return Err(TopologyError::AsymmetricGraph { from, to });
                    }
                }
                let degree: Vec<usize> = (0..n)
                    .map(|k| {
                        let nbrs = graph.neighbours(k);
                        nbrs.len() + usize::from(!nbrs.contains(&k))
                    })
                    .collect();
                for k in 0..n {
                    let mut off_diagonal = 0.0;
                    for l in graph.neighbours(k) {
                        if l != k {
                            let w = 1.0 / degree[k].max(degree[l]) as f64;
                            a[(l, k)] = w;
                            off_diagonal += w;
                        }
                    }
                    a[(k, k)] = 1.0 - off_diagonal;
                }
            }
            WeightingRule::Explicit(weights) => {
                for (&(from, to), &weight) in weights {
                    if from >= n || to >= n {
                        return Err(TopologyError::EdgeOutOfRange { from, to, n });
                    }
                    if !weight.is_finite() || weight < 0.0 {
                        return Err(TopologyError::InvalidWeight {
                            from,
                            to,
                            weight,
                            reason: "weights must be finite and nonnegative",
                        });
                    }
                    if weight > 0.0 && !graph.has_edge(from, to) {
                        return Err(TopologyError::InvalidWeight {
                            from,
                            to,
                            weight,
                            reason: "positive weight on a pair that is not an edge",
                        });
                    }
                    a[(from, to)] = weight;
                }
                for k in 0..n {
                    let sum: f64 = a.column(k).iter().sum();
                    if (sum - 1.0).abs() > EXPLICIT_WEIGHT_TOL {
                        return Err(TopologyError::ColumnSumViolation { column: k, sum });
                    }
                }
                // Connectivity of the weighted support, not just the declared graph.
                let support = Graph::new(
                    n,
                    graph.edges().filter(|&(l, k)| a[(l, k)] > 0.0),
                )?;
                support.validate_connectivity()?;
            }
        }
        Ok(Self { a, primitive: true })
    }

    /// The identity combination: every agent keeps its own iterate. Used for
    /// non-cooperative baselines; it is not primitive and has no Perron vector.
    pub fn non_cooperative(n: usize) -> Self {
        Self {
            a: DMatrix::identity(n, n),
            primitive: false,
        }
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn weight(&self, from: usize, to: usize) -> f64 {
        self.a[(from, to)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn is_primitive(&self) -> bool {
        self.primitive
    }

    /// Largest deviation of a column sum from one.
    pub fn column_sum_error(&self) -> f64 {
        (0..self.n())
            .map(|k| (self.a.column(k).sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Nonzero weights into each agent, `(from, weight)` sorted by `from`.
    pub fn in_weights(&self) -> Vec<Vec<(usize, f64)>> {
        (0..self.n())
            .map(|k| {
                (0..self.n())
                    .filter(|&l| self.a[(l, k)] != 0.0)
                    .map(|l| (l, self.a[(l, k)]))
                    .collect()
            })
            .collect()
    }

    pub fn perron_vector(&self) -> Result<PerronVector, TopologyError> {
        perron_vector(self)
    }
}

/// Positive, normalized right eigenvector of `A` at eigenvalue one.
#[derive(Debug, Clone, PartialEq)]
pub struct PerronVector(DVector<f64>);

impl PerronVector {
    /// Uniform weights; the Perron vector of any doubly stochastic matrix.
    pub fn uniform(n: usize) -> Self {
        Self(DVector::from_element(n, 1.0 / n as f64))
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        self.0.as_slice()
    }
}

impl std::ops::Index<usize> for PerronVector {
    type Output = f64;
    fn index(&self, k: usize) -> &f64 {
        &self.0[k]
    }
}

/// Power iteration `p <- A p`, renormalized to unit sum, starting from the
/// uniform vector.
pub fn perron_vector(a: &CombinationMatrix) -> Result<PerronVector, TopologyError> {
    if !a.is_primitive() {
        return Err(TopologyError::NotStronglyConnected { unreachable: 0 });
    }
    let n = a.n();
    let mut p = DVector::from_element(n, 1.0 / n as f64);
    for _ in 0..PERRON_MAX_ITERS {
        let mut next = a.matrix() * &p;
        let total = next.sum();
        next /= total;
        let change = (&next - &p).amax();
        p = next;
        if change <= PERRON_TOL * p.amax() {
            return Ok(PerronVector(p));
        }
    }
    Err(TopologyError::NoConvergence {
        iterations: PERRON_MAX_ITERS,
    })
}

/// `|lambda_2(A)|`: spectral radius of the deflated operator `A^T - 1 p^T`,
/// whose spectrum is `{0, lambda_2, ..., lambda_N}`.
///
/// Estimated from the growth of `B^(2^j)` under repeated normalized squaring,
/// `rho(B) = lim ||B^m||^(1/m)`. Unlike vector power iteration this also
/// converges when the dominant eigenvalues form a complex pair or a
/// `+/-` pair of equal modulus.
pub fn second_eigenvalue_modulus(a: &CombinationMatrix) -> Result<f64, TopologyError> {
    let n = a.n();
    if n == 1 {
        return Ok(0.0);
    }
    let p = perron_vector(a)?;
    let ones = DVector::from_element(n, 1.0);
    let mut power = a.matrix().transpose() - &ones * p.as_vector().transpose();
    // power^(2^j) == exp(log_scale) * current, tracked in log space
    let mut log_scale = 0.0;
    let mut previous = f64::NAN;
    for j in 0..LAMBDA2_MAX_SQUARINGS {
        let norm = power.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Ok(0.0);
        }
        let estimate = ((log_scale + norm.ln()) / 2f64.powi(j as i32)).exp();
        if estimate < 1e-14 {
            return Ok(0.0);
        }
        if (estimate - previous).abs() <= LAMBDA2_TOL * estimate.max(1e-300) {
            return Ok(estimate.min(1.0));
        }
        previous = estimate;
        let scaled = power / norm;
        log_scale = 2.0 * (log_scale + norm.ln());
        power = &scaled * &scaled;
    }
    Err(TopologyError::NoConvergence {
        iterations: LAMBDA2_MAX_SQUARINGS,
    })
}

/// Serializable description of a network, as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub topology: TopologySpec,
    pub rule: RuleSpec,
    /// `(from, to, weight)` triples, required when `rule = "explicit"`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub weights: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologySpec {
    Complete {
        n_agents: usize,
    },
    Ring {
        n_agents: usize,
    },
    RandomGeometric {
        n_agents: usize,
        radius: f64,
        seed: u64,
    },
    Edges {
        n_agents: usize,
        edges: Vec<(usize, usize)>,
        #[serde(default)]
        undirected: bool,
        #[serde(default)]
        self_loops: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleSpec {
    Uniform,
    Metropolis,
    Explicit,
}

impl TopologySpec {
    pub fn n_agents(&self) -> usize {
        match self {
            Self::Complete { n_agents }
            | Self::Ring { n_agents }
            | Self::RandomGeometric { n_agents, .. }
            | Self::Edges { n_agents, .. } => *n_agents,
        }
    }

    pub fn build(&self) -> Result<Graph, TopologyError> {
        match self {
            Self::Complete { n_agents } => Graph::complete(*n_agents),
            Self::Ring { n_agents } => Graph::ring(*n_agents),
            Self::RandomGeometric {
                n_agents,
                radius,
                seed,
            } => Graph::random_geometric(*n_agents, *radius, *seed),
            Self::Edges {
                n_agents,
                edges,
                undirected,
                self_loops,
            } => {
                if *undirected {
                    Graph::undirected(*n_agents, edges.iter().copied(), *self_loops)
                } else {
                    let loops = if *self_loops { *n_agents } else { 0 };
                    Graph::new(
                        *n_agents,
                        edges.iter().copied().chain((0..loops).map(|k| (k, k))),
                    )
                }
            }
        }
    }
}

impl NetworkSpec {
    pub fn build(&self) -> Result<(Graph, CombinationMatrix), TopologyError> {
        let graph = self.topology.build()?;
        let rule = match self.rule {
            RuleSpec::Uniform => WeightingRule::UniformAveraging,
            RuleSpec::Metropolis => WeightingRule::Metropolis,
            RuleSpec::Explicit => WeightingRule::Explicit(
                self.weights
                    .iter()
                    .map(|&(from, to, w)| ((from, to), w))
                    .collect(),
            ),
        };
        let a = CombinationMatrix::build(&graph, &rule)?;
        Ok((graph, a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complete_uniform_has_uniform_columns() {
        let g = Graph::complete(3).unwrap();
        let a = CombinationMatrix::build(&g, &WeightingRule::UniformAveraging).unwrap();
        for l in 0..3 {
            for k in 0..3 {
                assert!((a.weight(l, k) - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn metropolis_ring_is_doubly_stochastic() {
        let g = Graph::ring(4).unwrap();
        let a = CombinationMatrix::build(&g, &WeightingRule::Metropolis).unwrap();
        for i in 0..4 {
            let col: f64 = (0..4).map(|l| a.weight(l, i)).sum();
            let row: f64 = (0..4).map(|k| a.weight(i, k)).sum();
            assert!((col - 1.0).abs() < 1e-12);
            assert!((row - 1.0).abs() < 1e-12);
        }
        // degree 3 everywhere: 1/3 to each neighbour, 1/3 kept
        assert!((a.weight(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(a.weight(0, 2), 0.0);
    }

    #[test]
    fn one_way_pair_is_not_strongly_connected() {
        let g = Graph::new(2, [(0, 0), (1, 1), (0, 1)]).unwrap();
        let err = CombinationMatrix::build(&g, &WeightingRule::UniformAveraging).unwrap_err();
        assert!(matches!(err, TopologyError::NotStronglyConnected { .. }));
    }

    #[test]
    fn missing_self_loop_rejected() {
        let g = Graph::new(2, [(0, 1), (1, 0)]).unwrap();
        let err = CombinationMatrix::build(&g, &WeightingRule::UniformAveraging).unwrap_err();
        assert_eq!(err, TopologyError::NoSelfLoop);
    }

    #[test]
    fn single_self_loop_suffices() {
        let g = Graph::new(3, [(0, 0), (0, 1), (1, 2), (2, 0)]).unwrap();
        let a = CombinationMatrix::build(&g, &WeightingRule::UniformAveraging).unwrap();
        let p = a.perron_vector().unwrap();
        let residual = (a.matrix() * p.as_vector() - p.as_vector()).amax();
        assert!(residual < 1e-12);
    }

    #[test]
    fn explicit_weights_validated_not_modified() {
        let g = Graph::complete(2).unwrap();
        let weights: BTreeMap<_, _> =
            [((0, 0), 0.8), ((1, 0), 0.2), ((0, 1), 0.4), ((1, 1), 0.6)].into();
        let a = CombinationMatrix::build(&g, &WeightingRule::Explicit(weights)).unwrap();
        assert_eq!(a.weight(1, 0), 0.2);
        assert_eq!(a.weight(0, 1), 0.4);

        let bad: BTreeMap<_, _> =
            [((0, 0), 0.8), ((1, 0), 0.2), ((0, 1), 0.4), ((1, 1), 0.6 + 2e-9)].into();
        let err = CombinationMatrix::build(&g, &WeightingRule::Explicit(bad)).unwrap_err();
        assert!(matches!(err, TopologyError::ColumnSumViolation { column: 1, .. }));
    }

    #[test]
    fn explicit_weight_off_graph_rejected() {
        let g = Graph::ring(4).unwrap();
        let mut w = BTreeMap::new();
        for k in 0..4 {
            w.insert((k, k), 0.5);
            w.insert(((k + 2) % 4, k), 0.5);
        }
        let err = CombinationMatrix::build(&g, &WeightingRule::Explicit(w)).unwrap_err();
        assert!(matches!(err, TopologyError::InvalidWeight { .. }));
    }

    #[test]
    fn metropolis_requires_symmetry() {
        let g = Graph::new(3, [(0, 0), (1, 1), (2, 2), (0, 1), (1, 2), (2, 0)]).unwrap();
        let err = CombinationMatrix::build(&g, &WeightingRule::Metropolis).unwrap_err();
        assert!(matches!(err, TopologyError::AsymmetricGraph { .. }));
    }

    #[test]
    fn perron_of_two_by_two() {
        // eigenvector of [[0.8, 0.4], [0.2, 0.6]] at 1: 0.2 p1 = 0.4 p2, so p = (2/3, 1/3)
        let g = Graph::complete(2).unwrap();
        let weights: BTreeMap<_, _> =
            [((0, 0), 0.8), ((1, 0), 0.2), ((0, 1), 0.4), ((1, 1), 0.6)].into();
        let a = CombinationMatrix::build(&g, &WeightingRule::Explicit(weights)).unwrap();
        let p = a.perron_vector().unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identity_has_no_perron_vector() {
        let a = CombinationMatrix::non_cooperative(3);
        assert!(a.perron_vector().is_err());
        assert!(second_eigenvalue_modulus(&a).is_err());
    }

    #[test]
    fn lambda2_of_rank_one_matrix_is_zero() {
        let g = Graph::complete(3).unwrap();
        let a = CombinationMatrix::build(&g, &WeightingRule::UniformAveraging).unwrap();
        assert!(second_eigenvalue_modulus(&a).unwrap() < 1e-8);
    }

    #[test]
    fn lambda2_single_agent_is_zero() {
        let g = Graph::complete(1).unwrap();
        let a = CombinationMatrix::build(&g, &WeightingRule::UniformAveraging).unwrap();
        assert_eq!(second_eigenvalue_modulus(&a).unwrap(), 0.0);
    }

    #[test]
    fn lambda2_of_metropolis_ring() {
        // ring of 4 with weights 1/3: eigenvalues 1/3 + 2/3 cos(2 pi j / 4) = {1, 1/3, -1/3, 1/3}
        let g = Graph::ring(4).unwrap();
        let a = CombinationMatrix::build(&g, &WeightingRule::Metropolis).unwrap();
        let l2 = second_eigenvalue_modulus(&a).unwrap();
        assert!((l2 - 1.0 / 3.0).abs() < 1e-8, "{l2}");
    }

    #[test]
    fn random_geometric_is_deterministic_and_connected() {
        let g1 = Graph::random_geometric(12, 0.1, 7).unwrap();
        let g2 = Graph::random_geometric(12, 0.1, 7).unwrap();
        assert_eq!(g1, g2);
        assert!(g1.is_strongly_connected());
    }

    #[test]
    fn network_spec_round_trips_through_toml() {
        let spec = NetworkSpec {
            topology: TopologySpec::Edges {
                n_agents: 3,
                edges: vec![(0, 1), (1, 2)],
                undirected: true,
                self_loops: true,
            },
            rule: RuleSpec::Metropolis,
            weights: vec![],
        };
        let text = toml::to_string(&spec).unwrap();
        let back: NetworkSpec = toml::from_str(&text).unwrap();
        assert_eq!(spec, back);
        let (_, a) = back.build().unwrap();
        assert!(a.column_sum_error() < 1e-12);
    }
}
