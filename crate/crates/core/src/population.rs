//! User profiles, the group-structured association graph, and the hidden
//! coupling parameters that tie group members together.

use std::collections::{BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Default margin keeping sampled probabilities away from 0 and 1.
pub const DEFAULT_EPSILON: f64 = 0.05;

const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    TwoState,
    RState,
    Markov,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::TwoState => "two-state",
            ModelKind::RState => "r-state",
            ModelKind::Markov => "markov",
        }
    }
}

/// Transition support `F` of a Markov model over `r` states.
///
/// Edges are kept sorted row-major. The free parameters of a chain are the
/// transition probabilities on `F` minus the last out-edge of every state,
/// giving `d = |F| - r` coordinates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MarkovStructure {
    r: usize,
    edges: Vec<(usize, usize)>,
}

impl MarkovStructure {
    pub fn new(r: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if r < 2 {
            return Err(Error::Config(format!("markov model needs r >= 2, got {r}")));
        }
        let set: BTreeSet<(usize, usize)> = edges.into_iter().collect();
        if let Some(&(i, j)) = set.iter().find(|&&(i, j)| i >= r || j >= r) {
            return Err(Error::Config(format!("edge ({i},{j}) outside {r} states")));
        }
        let structure = MarkovStructure { r, edges: set.into_iter().collect() };
        structure.validate()?;
        Ok(structure)
    }

    /// Every transition allowed.
    pub fn complete(r: usize) -> Result<Self> {
        Self::new(r, (0..r).flat_map(|i| (0..r).map(move |j| (i, j))))
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn out_edges(&self, state: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |e| e.0 == state).map(|e| e.1)
    }

    pub fn out_degree(&self, state: usize) -> usize {
        self.out_edges(state).count()
    }

    pub fn free_dim(&self) -> usize {
        self.edges.len() - self.r
    }

    /// Transitions carrying free parameters, in canonical order.
    pub fn free_positions(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.free_dim());
        for state in 0..self.r {
            let targets: Vec<usize> = self.out_edges(state).collect();
            if let Some((_, rest)) = targets.split_last() {
                out.extend(rest.iter().map(|&j| (state, j)));
            }
        }
        out
    }

    /// Support of a row-stochastic matrix.
    pub fn from_matrix(matrix: &[Vec<f64>]) -> Result<Self> {
        let r = matrix.len();
        let edges = matrix
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().enumerate().filter(|(_, &v)| v > 0.0).map(move |(j, _)| (i, j)));
        Self::new(r, edges.collect::<Vec<_>>())
    }

    fn validate(&self) -> Result<()> {
        if let Some(state) = (0..self.r).find(|&s| self.out_degree(s) == 0) {
            return Err(Error::Config(format!("state {state} has no outgoing transition")));
        }
        let forward = self.reachable(false);
        let backward = self.reachable(true);
        if forward.iter().chain(backward.iter()).any(|&seen| !seen) {
            return Err(Error::Config("markov structure is reducible".into()));
        }
        let period = self.period();
        if period != 1 {
            return Err(Error::Config(format!("markov structure is periodic (period {period})")));
        }
        Ok(())
    }

    fn reachable(&self, reverse: bool) -> Vec<bool> {
        let mut seen = vec![false; self.r];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &(a, b) in &self.edges {
                let (from, to) = if reverse { (b, a) } else { (a, b) };
                if from == u && !seen[to] {
                    seen[to] = true;
                    queue.push_back(to);
                }
            }
        }
        seen
    }

    /// gcd over edges of `level(u) + 1 - level(v)` for BFS levels from state 0.
    fn period(&self) -> usize {
        let mut level = vec![usize::MAX; self.r];
        level[0] = 0;
        let mut queue = VecDeque::from([0usize]);
        while let Some(u) = queue.pop_front() {
            for v in self.out_edges(u) {
                if level[v] == usize::MAX {
                    level[v] = level[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        self.edges.iter().fold(0usize, |g, &(u, v)| {
            let diff = (level[u] as i64 + 1 - level[v] as i64).unsigned_abs() as usize;
            gcd(g, diff)
        })
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Density the profiles are drawn from: uniform on the support truncated by
/// `epsilon` away from the boundary.
#[derive(Clone, Debug)]
pub struct DensitySpec {
    pub kind: ModelKind,
    pub r: usize,
    pub epsilon: f64,
    pub structure: Option<MarkovStructure>,
}

impl DensitySpec {
    pub fn two_state(epsilon: f64) -> Self {
        DensitySpec { kind: ModelKind::TwoState, r: 2, epsilon, structure: None }
    }

    pub fn r_state(r: usize, epsilon: f64) -> Self {
        DensitySpec { kind: ModelKind::RState, r, epsilon, structure: None }
    }

    pub fn markov(structure: MarkovStructure, epsilon: f64) -> Self {
        DensitySpec { kind: ModelKind::Markov, r: structure.r(), epsilon, structure: Some(structure) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!("epsilon must lie in (0, 0.5), got {}", self.epsilon)));
        }
        match self.kind {
            ModelKind::TwoState if self.r != 2 => {
                Err(Error::Config(format!("two-state model requires r = 2, got {}", self.r)))
            }
            ModelKind::TwoState => Ok(()),
            ModelKind::RState => {
                if self.r < 2 {
                    return Err(Error::Config(format!("r-state model needs r >= 2, got {}", self.r)));
                }
                if self.r as f64 * self.epsilon >= 1.0 {
                    return Err(Error::Config(format!("epsilon {} too large for {} symbols", self.epsilon, self.r)));
                }
                Ok(())
            }
            ModelKind::Markov => {
                let structure = self
                    .structure
                    .as_ref()
                    .ok_or_else(|| Error::Config("markov density without transition structure".into()))?;
                if structure.r() != self.r {
                    return Err(Error::Config("markov structure size disagrees with r".into()));
                }
                let max_deg = (0..self.r).map(|s| structure.out_degree(s)).max().unwrap_or(1);
                if max_deg as f64 * self.epsilon >= 1.0 {
                    return Err(Error::Config(format!("epsilon {} too large for out-degree {max_deg}", self.epsilon)));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Params {
    /// `P(X = 1)`.
    TwoState(f64),
    /// `(p(1), .., p(r-1))`; `p(0)` is the remainder.
    RState(Vec<f64>),
    /// Row-stochastic matrix and its free-parameter vector.
    Markov { matrix: Vec<Vec<f64>>, free: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserProfile {
    pub user_id: usize,
    pub params: Params,
}

impl UserProfile {
    pub fn two_state(user_id: usize, p: f64) -> Self {
        UserProfile { user_id, params: Params::TwoState(p) }
    }

    pub fn r_state(user_id: usize, probs: Vec<f64>) -> Self {
        UserProfile { user_id, params: Params::RState(probs) }
    }

    pub fn markov(user_id: usize, matrix: Vec<Vec<f64>>, structure: &MarkovStructure) -> Self {
        let free = structure.free_positions().iter().map(|&(i, j)| matrix[i][j]).collect();
        UserProfile { user_id, params: Params::Markov { matrix, free } }
    }

    /// The statistic vector the adversary compares fingerprints against.
    pub fn vector(&self) -> Vec<f64> {
        match &self.params {
            Params::TwoState(p) => vec![*p],
            Params::RState(v) => v.clone(),
            Params::Markov { free, .. } => free.clone(),
        }
    }

    /// Full single-time distribution over `r` symbols (i.i.d. models only).
    pub fn marginal(&self) -> Option<Vec<f64>> {
        match &self.params {
            Params::TwoState(p) => Some(vec![1.0 - p, *p]),
            Params::RState(v) => {
                let mut out = Vec::with_capacity(v.len() + 1);
                out.push(1.0 - v.iter().sum::<f64>());
                out.extend_from_slice(v);
                Some(out)
            }
            Params::Markov { .. } => None,
        }
    }

    fn validate(&self, kind: ModelKind, r: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("user {}: {msg}", self.user_id)));
        match (&self.params, kind) {
            (Params::TwoState(p), ModelKind::TwoState) => {
                if !(*p > 0.0 && *p < 1.0) {
                    return bad(format!("p = {p} not in (0,1)"));
                }
            }
            (Params::RState(v), ModelKind::RState) => {
                if v.len() != r - 1 {
                    return bad(format!("expected {} probabilities, got {}", r - 1, v.len()));
                }
                let sum: f64 = v.iter().sum();
                if v.iter().any(|&x| !(x > 0.0 && x < 1.0)) || sum >= 1.0 {
                    return bad(format!("probabilities {v:?} outside the open simplex"));
                }
            }
            (Params::Markov { matrix, .. }, ModelKind::Markov) => {
                if matrix.len() != r || matrix.iter().any(|row| row.len() != r) {
                    return bad(format!("transition matrix must be {r}x{r}"));
                }
                for (i, row) in matrix.iter().enumerate() {
                    let sum: f64 = row.iter().sum();
                    if row.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (sum - 1.0).abs() > ROW_SUM_TOL {
                        return bad(format!("row {i} is not stochastic (sum {sum})"));
                    }
                }
            }
            _ => return bad(format!("profile does not match model {}", kind.as_str())),
        }
        Ok(())
    }
}

/// Draws `n` profiles i.i.d. and uniformly on the truncated support.
pub fn sample_profiles(n: usize, density: &DensitySpec, seed: u64) -> Result<Vec<UserProfile>> {
    if n == 0 {
        return Err(Error::Config("population must have at least one user".into()));
    }
    density.validate()?;
    let mut rng = seed::rng(seed);
    let eps = density.epsilon;
    let profiles = (0..n)
        .map(|u| match density.kind {
            ModelKind::TwoState => UserProfile::two_state(u, eps + (1.0 - 2.0 * eps) * rng.gen::<f64>()),
            ModelKind::RState => {
                let full = truncated_simplex(&mut rng, density.r, eps);
                UserProfile::r_state(u, full[1..].to_vec())
            }
            ModelKind::Markov => {
                let structure = density.structure.as_ref().expect("validated");
                let r = structure.r();
                let mut matrix = vec![vec![0.0; r]; r];
                for (state, row) in matrix.iter_mut().enumerate() {
                    let targets: Vec<usize> = structure.out_edges(state).collect();
                    let probs = truncated_simplex(&mut rng, targets.len(), eps);
                    for (&j, p) in targets.iter().zip(probs) {
                        row[j] = p;
                    }
                }
                UserProfile::markov(u, matrix, structure)
            }
        })
        .collect();
    Ok(profiles)
}

/// Uniform point of the `k`-simplex with every coordinate at least `eps`.
fn truncated_simplex<R: Rng>(rng: &mut R, k: usize, eps: f64) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    // Normalized exponentials are Dirichlet(1, .., 1).
    let raw: Vec<f64> = (0..k).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let total: f64 = raw.iter().sum();
    let scale = 1.0 - k as f64 * eps;
    let mut out: Vec<f64> = raw.iter().map(|x| eps + scale * x / total).collect();
    let sum: f64 = out.iter().sum();
    // Put the rounding residue on the largest entry so rows sum to 1.
    let imax = (0..k).max_by(|&a, &b| out[a].total_cmp(&out[b])).unwrap_or(0);
    out[imax] += 1.0 - sum;
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Chain,
    Complete,
}

/// Undirected association graph partitioned into disjoint connected groups.
#[derive(Clone, Debug, PartialEq)]
pub struct AssociationGraph {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
    groups: Vec<Vec<usize>>,
    group_of: Vec<usize>,
}

impl AssociationGraph {
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>, groups: Vec<Vec<usize>>) -> Result<Self> {
        let mut group_of = vec![usize::MAX; n];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Config(format!("group {g} is empty")));
            }
            for &u in members {
                if u >= n || group_of[u] != usize::MAX {
                    return Err(Error::Config(format!("user {u} is out of range or in two groups")));
                }
                group_of[u] = g;
            }
        }
        if let Some(u) = group_of.iter().position(|&g| g == usize::MAX) {
            return Err(Error::Config(format!("user {u} belongs to no group")));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a == b || a >= n || b >= n {
                return Err(Error::Config(format!("invalid edge ({a},{b})")));
            }
            if group_of[a] != group_of[b] {
                return Err(Error::Config(format!("edge ({a},{b}) crosses groups")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        let groups: Vec<Vec<usize>> = groups
            .into_iter()
            .map(|mut g| {
                g.sort_unstable();
                g
            })
            .collect();
        let graph = AssociationGraph { n, edges: set, groups, group_of };
        for (g, members) in graph.groups.iter().enumerate() {
            if !graph.is_connected(members) {
                return Err(Error::Config(format!("group {g} is not connected")));
            }
        }
        Ok(graph)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group_of(&self, user: usize) -> usize {
        self.group_of[user]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn max_group_size(&self) -> usize {
        self.groups.iter().map(Vec::len).max().unwrap_or(0)
    }

    fn is_connected(&self, members: &[usize]) -> bool {
        let Some(&start) = members.first() else { return true };
        let mut seen = BTreeSet::from([start]);
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            for &(a, b) in &self.edges {
                let next = if a == u {
                    b
                } else if b == u {
                    a
                } else {
                    continue;
                };
                if seen.insert(next) {
                    stack.push(next);
                }
            }
        }
        seen.len() == members.len()
    }
}

/// Builds a graph of consecutive blocks, relabeled by a seeded shuffle.
pub fn build_group_graph(group_sizes: &[usize], topology: Topology, seed: u64) -> Result<AssociationGraph> {
    if group_sizes.is_empty() {
        return Err(Error::Config("group size list is empty".into()));
    }
    if group_sizes.contains(&0) {
        return Err(Error::Config("group sizes must be at least 1".into()));
    }
    let n: usize = group_sizes.iter().sum();
    let mut label: Vec<usize> = (0..n).collect();
    label.shuffle(&mut seed::rng(seed));

    let mut groups = Vec::with_capacity(group_sizes.len());
    let mut edges = Vec::new();
    let mut start = 0;
    for &size in group_sizes {
        let block: Vec<usize> = (start..start + size).map(|i| label[i]).collect();
        match topology {
            Topology::Chain => edges.extend(block.windows(2).map(|w| (w[0], w[1]))),
            Topology::Complete => {
                for a in 0..size {
                    for b in a + 1..size {
                        edges.push((block[a], block[b]));
                    }
                }
            }
        }
        groups.push(block);
        start += size;
    }
    AssociationGraph::new(n, edges, groups)
}

/// Hidden parameters of the generator's inter-user dependence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingSpec {
    /// Latent weight per group.
    pub w: Vec<f64>,
    /// Mixing coefficient per user.
    pub lambda: Vec<f64>,
    /// Probability that a Markov group shares its driving variate at a step.
    pub mu: f64,
}

impl CouplingSpec {
    /// No dependence at all.
    pub fn independent(graph: &AssociationGraph) -> Self {
        CouplingSpec { w: vec![0.5; graph.groups().len()], lambda: vec![0.0; graph.n()], mu: 0.0 }
    }

    /// Same `w` for every group and the same `lambda` for every grouped user.
    pub fn uniform(graph: &AssociationGraph, w: f64, lambda: f64, mu: f64) -> Self {
        let lambda =
            (0..graph.n()).map(|u| if graph.groups()[graph.group_of(u)].len() >= 2 { lambda } else { 0.0 }).collect();
        CouplingSpec { w: vec![w; graph.groups().len()], lambda, mu }
    }

    fn validate(&self, graph: &AssociationGraph) -> Result<()> {
        if self.w.len() != graph.groups().len() || self.lambda.len() != graph.n() {
            return Err(Error::Config("coupling vectors do not match the graph".into()));
        }
        if let Some(w) = self.w.iter().find(|&&w| !(w > 0.0 && w < 1.0)) {
            return Err(Error::Config(format!("latent weight {w} not in (0,1)")));
        }
        for (u, &l) in self.lambda.iter().enumerate() {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("lambda[{u}] = {l} not in [0,1]")));
            }
            if l > 0.0 && graph.groups()[graph.group_of(u)].len() < 2 {
                return Err(Error::Config(format!("isolated user {u} has nonzero lambda")));
            }
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::Config(format!("mu = {} not in [0,1]", self.mu)));
        }
        Ok(())
    }
}

/// Everything the generator needs: profiles, graph and hidden coupling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PopulationDoc", into = "PopulationDoc")]
pub struct Population {
    pub model: ModelKind,
    pub r: usize,
    pub profiles: Vec<UserProfile>,
    pub graph: AssociationGraph,
    pub coupling: CouplingSpec,
    pub structure: Option<MarkovStructure>,
}

impl Population {
    pub fn new(
        model: ModelKind,
        r: usize,
        profiles: Vec<UserProfile>,
        graph: AssociationGraph,
        coupling: CouplingSpec,
    ) -> Result<Self> {
        if profiles.len() != graph.n() {
            return Err(Error::Config(format!("{} profiles for a graph on {} users", profiles.len(), graph.n())));
        }
        for (u, p) in profiles.iter().enumerate() {
            if p.user_id != u {
                return Err(Error::Config(format!("profile {u} carries user id {}", p.user_id)));
            }
            p.validate(model, r)?;
        }
        let structure = match model {
            ModelKind::Markov => {
                let Params::Markov { matrix, .. } = &profiles[0].params else { unreachable!() };
                let structure = MarkovStructure::from_matrix(matrix)?;
                for p in &profiles {
                    let Params::Markov { matrix, .. } = &p.params else { unreachable!() };
                    if MarkovStructure::from_matrix(matrix)? != structure {
                        return Err(Error::Config(format!("user {} has a different transition support", p.user_id)));
                    }
                }
                Some(structure)
            }
            _ => None,
        };
        coupling.validate(&graph)?;
        Ok(Population { model, r, profiles, graph, coupling, structure })
    }

    pub fn n(&self) -> usize {
        self.profiles.len()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum ProfileDoc {
    Scalar(f64),
    Vector(Vec<f64>),
    Matrix(Vec<Vec<f64>>),
}

/// On-disk layout of a population.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct PopulationDoc {
    n: usize,
    model: ModelKind,
    r: usize,
    profiles: Vec<ProfileDoc>,
    groups: Vec<Vec<usize>>,
    edges: Vec<[usize; 2]>,
    coupling: CouplingSpec,
}

impl From<Population> for PopulationDoc {
    fn from(pop: Population) -> Self {
        PopulationDoc {
            n: pop.n(),
            model: pop.model,
            r: pop.r,
            profiles: pop
                .profiles
                .iter()
                .map(|p| match &p.params {
                    Params::TwoState(x) => ProfileDoc::Scalar(*x),
                    Params::RState(v) => ProfileDoc::Vector(v.clone()),
                    Params::Markov { matrix, .. } => ProfileDoc::Matrix(matrix.clone()),
                })
                .collect(),
            groups: pop.graph.groups().to_vec(),
            edges: pop.graph.edges().iter().map(|&(a, b)| [a, b]).collect(),
            coupling: pop.coupling,
        }
    }
}

impl TryFrom<PopulationDoc> for Population {
    type Error = Error;

    fn try_from(doc: PopulationDoc) -> Result<Self> {
        if doc.profiles.len() != doc.n {
            return Err(Error::Config(format!("n = {} but {} profiles", doc.n, doc.profiles.len())));
        }
        let graph = AssociationGraph::new(doc.n, doc.edges.iter().map(|e| (e[0], e[1])), doc.groups)?;
        let mut structure = None;
        let profiles = doc
            .profiles
            .into_iter()
            .enumerate()
            .map(|(u, p)| match (doc.model, p) {
                (ModelKind::TwoState, ProfileDoc::Scalar(x)) => Ok(UserProfile::two_state(u, x)),
                (ModelKind::RState, ProfileDoc::Vector(v)) => Ok(UserProfile::r_state(u, v)),
                (ModelKind::Markov, ProfileDoc::Matrix(m)) => {
                    if structure.is_none() {
                        structure = Some(MarkovStructure::from_matrix(&m)?);
                    }
                    Ok(UserProfile::markov(u, m, structure.as_ref().expect("set above")))
                }
                (model, _) => Err(Error::Config(format!("profile {u} does not match model {}", model.as_str()))),
            })
            .collect::<Result<Vec<_>>>()?;
        Population::new(doc.model, doc.r, profiles, graph, doc.coupling)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tight_epsilon_pins_the_single_profile() {
        let profiles = sample_profiles(1, &DensitySpec::two_state(0.49), 7).unwrap();
        let Params::TwoState(p) = profiles[0].params else { panic!() };
        assert!(p > 0.49 && p < 0.51);
    }

    #[test]
    fn r_state_profiles_live_in_the_open_simplex() {
        let profiles = sample_profiles(3, &DensitySpec::r_state(3, DEFAULT_EPSILON), 1).unwrap();
        for p in &profiles {
            let v = p.vector();
            assert_eq!(v.len(), 2);
            assert!(v.iter().all(|&x| x > 0.0));
            assert!(v.iter().sum::<f64>() < 1.0);
        }
    }

    #[test]
    fn full_binary_markov_has_two_free_parameters() {
        let structure = MarkovStructure::complete(2).unwrap();
        assert_eq!(structure.free_dim(), 2);
        assert_eq!(structure.free_positions(), vec![(0, 0), (1, 0)]);
        let density = DensitySpec::markov(structure, DEFAULT_EPSILON);
        let profiles = sample_profiles(4, &density, 3).unwrap();
        for p in &profiles {
            let Params::Markov { matrix, free } = &p.params else { panic!() };
            assert_eq!(free.len(), 2);
            assert_eq!(free[0], matrix[0][0]);
            assert_eq!(free[1], matrix[1][0]);
            for row in matrix {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn invalid_densities_are_rejected() {
        assert!(matches!(sample_profiles(3, &DensitySpec::two_state(0.0), 1), Err(Error::Config(_))));
        assert!(matches!(sample_profiles(3, &DensitySpec::two_state(0.5), 1), Err(Error::Config(_))));
        assert!(matches!(sample_profiles(0, &DensitySpec::two_state(0.1), 1), Err(Error::Config(_))));
        assert!(matches!(sample_profiles(2, &DensitySpec::r_state(4, 0.3), 1), Err(Error::Config(_))));
    }

    #[test]
    fn reducible_and_periodic_structures_are_rejected() {
        // 0 -> 1 only, 1 -> 1: state 0 unreachable from 1.
        assert!(MarkovStructure::new(2, [(0, 1), (1, 1)]).is_err());
        // Deterministic 2-cycle.
        assert!(MarkovStructure::new(2, [(0, 1), (1, 0)]).is_err());
        // 3-cycle plus a chord: cycle lengths 3 and 2 give period 1.
        assert!(MarkovStructure::new(3, [(0, 1), (1, 2), (2, 0), (1, 0)]).is_ok());
        // State without out-edge.
        assert!(MarkovStructure::new(2, [(0, 1), (0, 0)]).is_err());
    }

    #[test]
    fn singleton_blocks_have_no_edges() {
        let g = build_group_graph(&[1, 1, 1], Topology::Complete, 5).unwrap();
        assert!(g.edges().is_empty());
        assert_eq!(g.groups().len(), 3);
        assert!(g.groups().iter().all(|b| b.len() == 1));
    }

    #[test]
    fn pair_block_is_a_single_edge() {
        let g = build_group_graph(&[2], Topology::Complete, 9).unwrap();
        assert_eq!(g.edges().iter().copied().collect::<Vec<_>>(), vec![(0, 1)]);
    }

    #[test]
    fn chain_of_three_is_a_path() {
        let g = build_group_graph(&[3], Topology::Chain, 11).unwrap();
        assert_eq!(g.edges().len(), 2);
        let mut degree = [0; 3];
        for &(a, b) in g.edges() {
            degree[a] += 1;
            degree[b] += 1;
        }
        degree.sort_unstable();
        assert_eq!(degree, [1, 1, 2]);
    }

    #[test]
    fn empty_size_list_is_a_config_error() {
        assert!(matches!(build_group_graph(&[], Topology::Chain, 0), Err(Error::Config(_))));
    }

    #[test]
    fn cross_group_edges_are_rejected() {
        assert!(AssociationGraph::new(3, [(0, 1)], vec![vec![0], vec![1], vec![2]]).is_err());
        assert!(AssociationGraph::new(3, [], vec![vec![0, 1], vec![2]]).is_err());
    }

    #[test]
    fn population_json_round_trip() {
        let structure = MarkovStructure::new(3, [(0, 0), (0, 1), (1, 2), (2, 0), (2, 2)]).unwrap();
        let density = DensitySpec::markov(structure, 0.05);
        let profiles = sample_profiles(4, &density, 2).unwrap();
        let graph = build_group_graph(&[2, 2], Topology::Complete, 2).unwrap();
        let coupling = CouplingSpec::uniform(&graph, 0.5, 0.0, 0.4);
        let pop = Population::new(ModelKind::Markov, 3, profiles, graph, coupling).unwrap();
        let json = serde_json::to_string(&pop).unwrap();
        for key in [
            "\"n\"",
            "\"model\"",
            "\"r\"",
            "\"profiles\"",
            "\"groups\"",
            "\"edges\"",
            "\"coupling\"",
            "\"lambda\"",
            "\"mu\"",
        ] {
            assert!(json.contains(key), "missing {key}");
        }
        let back: Population = serde_json::from_str(&json).unwrap();
        assert_eq!(back, pop);
    }
}
