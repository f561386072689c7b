//! True data generation.
//!
//! i.i.d. models use a latent-mixture coupling: each group draws a latent
//! symbol `W(k)` per time step and member `u` copies it with probability
//! `lambda_u`, otherwise draws from a residual distribution chosen so that the
//! member's marginal is exactly its profile. For two-state groups this gives
//! `Cov(X_i, X_j) = lambda_i * lambda_j * w * (1 - w)`.
//!
//! Markov groups are coupled through shared driving variates: at each step,
//! with probability `mu`, every member feeds the same uniform into its
//! inverse-CDF transition draw. Marginals and transition laws are unchanged.
//! This dependence model is a construction of this crate, not a given of the
//! underlying threat model.

use std::io::{Read, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::population::{ModelKind, Params, Population};
use crate::seed::{self, tag};

const FEASIBILITY_TOL: f64 = 1e-12;

/// Pipeline stage a trace matrix belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Stage {
    True,
    Obfuscated,
    Anonymized,
}

impl Stage {
    pub fn code(self) -> u8 {
        match self {
            Stage::True => 0,
            Stage::Obfuscated => 1,
            Stage::Anonymized => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Stage::True),
            1 => Ok(Stage::Obfuscated),
            2 => Ok(Stage::Anonymized),
            other => Err(Error::Config(format!("unknown stage code {other}"))),
        }
    }
}

/// `m x n` symbol matrix, stored column-major (one contiguous column per user).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceMatrix {
    m: usize,
    n: usize,
    r: u8,
    stage: Stage,
    data: Vec<u8>,
}

impl TraceMatrix {
    pub fn from_columns(columns: Vec<Vec<u8>>, r: u8, stage: Stage) -> Result<Self> {
        let n = columns.len();
        let m = columns.first().map_or(0, Vec::len);
        if r < 2 {
            return Err(Error::Config(format!("alphabet size {r} < 2")));
        }
        let mut data = Vec::with_capacity(m * n);
        for (u, col) in columns.into_iter().enumerate() {
            if col.len() != m {
                return Err(Error::DimensionMismatch(format!("column {u} has {} samples, expected {m}", col.len())));
            }
            if let Some(&bad) = col.iter().find(|&&x| x >= r) {
                return Err(Error::Domain(format!("symbol {bad} in column {u} is not below r = {r}")));
            }
            data.extend(col);
        }
        Ok(TraceMatrix { m, n, r, stage, data })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn r(&self) -> u8 {
        self.r
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn col(&self, u: usize) -> &[u8] {
        &self.data[u * self.m..(u + 1) * self.m]
    }

    pub fn get(&self, k: usize, u: usize) -> u8 {
        self.data[u * self.m + k]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[u8]> {
        (0..self.n).map(move |u| self.col(u))
    }

    pub fn into_columns(self) -> Vec<Vec<u8>> {
        if self.m == 0 {
            return vec![Vec::new(); self.n];
        }
        self.data.chunks(self.m).map(<[u8]>::to_vec).collect()
    }

    /// Same data under a new stage, enforcing the allowed transitions.
    pub(crate) fn advance(mut self, next: Stage) -> Result<Self> {
        let ok = matches!(
            (self.stage, next),
            (Stage::True, Stage::Obfuscated)
                | (Stage::True, Stage::Anonymized)
                | (Stage::Obfuscated, Stage::Anonymized)
        );
        if !ok {
            return Err(Error::Mechanism(format!("illegal stage transition {:?} -> {:?}", self.stage, next)));
        }
        self.stage = next;
        Ok(self)
    }

    /// CSV with one row per time index and header `k,u0,u1,...`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let header = std::iter::once("k".to_string()).chain((0..self.n).map(|u| format!("u{u}")));
        w.write_record(header)?;
        let mut row = Vec::with_capacity(self.n + 1);
        for k in 0..self.m {
            row.clear();
            row.push(k.to_string());
            row.extend((0..self.n).map(|u| self.get(k, u).to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, r: u8, stage: Stage) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr.headers()?.clone();
        let n = header.len().saturating_sub(1);
        if header.get(0) != Some("k") || header.iter().skip(1).enumerate().any(|(u, h)| h != format!("u{u}")) {
            return Err(Error::Config("trace CSV header must be k,u0,u1,...".into()));
        }
        let mut columns = vec![Vec::new(); n];
        for (k, record) in rdr.records().enumerate() {
            let record = record?;
            if record.len() != n + 1 {
                return Err(Error::DimensionMismatch(format!("row {k} has {} fields", record.len())));
            }
            for (u, field) in record.iter().skip(1).enumerate() {
                let sym: u8 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("row {k}, column u{u}: bad symbol {field:?}")))?;
                columns[u].push(sym);
            }
        }
        TraceMatrix::from_columns(columns, r, stage)
    }

    /// Binary layout: `"CMTR"`, u32 m, u32 n, u8 r, u8 stage, then row-major
    /// symbol bytes. Integers are little-endian.
    pub fn write_binary<W: Write>(&self, mut writer: W) -> Result<()> {
        writer.write_all(b"CMTR")?;
        writer.write_all(&(self.m as u32).to_le_bytes())?;
        writer.write_all(&(self.n as u32).to_le_bytes())?;
        writer.write_all(&[self.r, self.stage.code()])?;
        let mut row = vec![0u8; self.n];
        for k in 0..self.m {
            for (u, slot) in row.iter_mut().enumerate() {
                *slot = self.get(k, u);
            }
            writer.write_all(&row)?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut reader: R) -> Result<Self> {
        let mut head = [0u8; 14];
        reader.read_exact(&mut head)?;
        if &head[0..4] != b"CMTR" {
            return Err(Error::Config("bad trace magic".into()));
        }
        let m = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes")) as usize;
        let n = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
        let r = head[12];
        let stage = Stage::from_code(head[13])?;
        let mut bytes = vec![0u8; m * n];
        reader.read_exact(&mut bytes)?;
        let columns = (0..n).map(|u| (0..m).map(|k| bytes[k * n + u]).collect()).collect();
        TraceMatrix::from_columns(columns, r, stage)
    }
}

/// Covariance of two coupled two-state users, `lambda_i lambda_j w (1 - w)`,
/// after checking both residual probabilities are valid.
pub fn pair_covariance(w: f64, lambda_i: f64, lambda_j: f64, p_i: f64, p_j: f64) -> Result<f64> {
    residual_probability(p_i, lambda_i, w).ok_or_else(|| infeasible(0, p_i, lambda_i, w))?;
    residual_probability(p_j, lambda_j, w).ok_or_else(|| infeasible(1, p_j, lambda_j, w))?;
    Ok(lambda_i * lambda_j * w * (1.0 - w))
}

fn infeasible(user: usize, p: f64, lambda: f64, w: f64) -> Error {
    Error::CouplingInfeasible {
        user,
        detail: format!("p = {p} outside [lambda w, lambda w + 1 - lambda] for lambda = {lambda}, w = {w}"),
    }
}

/// Probability of 1 in the residual draw, if it is a valid probability.
fn residual_probability(p: f64, lambda: f64, w: f64) -> Option<f64> {
    if lambda >= 1.0 {
        return ((p - w).abs() <= FEASIBILITY_TOL).then_some(w);
    }
    let rho = (p - lambda * w) / (1.0 - lambda);
    (-FEASIBILITY_TOL..=1.0 + FEASIBILITY_TOL).contains(&rho).then(|| rho.clamp(0.0, 1.0))
}

/// Exact single-time joint `[p00, p01, p10, p11]` of two two-state users.
pub fn pair_joint(pop: &Population, i: usize, j: usize) -> Result<[f64; 4]> {
    let (Params::TwoState(p_i), Params::TwoState(p_j)) = (&pop.profiles[i].params, &pop.profiles[j].params) else {
        return Err(Error::Config("pair joints are defined for the two-state model only".into()));
    };
    let cov = if pop.graph.group_of(i) == pop.graph.group_of(j) {
        let w = pop.coupling.w[pop.graph.group_of(i)];
        pair_covariance(w, pop.coupling.lambda[i], pop.coupling.lambda[j], *p_i, *p_j)?
    } else {
        0.0
    };
    let p11 = p_i * p_j + cov;
    Ok([1.0 - p_i - p_j + p11, p_j - p11, p_i - p11, p11])
}

struct MemberPlan {
    user: usize,
    lambda: f64,
    residual_cdf: Vec<f64>,
}

struct GroupPlan {
    latent_cdf: Vec<f64>,
    members: Vec<MemberPlan>,
}

fn cdf(probs: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = probs
        .iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = f64::INFINITY;
    }
    out
}

fn draw(cdf: &[f64], u: f64) -> u8 {
    cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1) as u8
}

fn plan_groups(pop: &Population) -> Result<Vec<GroupPlan>> {
    pop.graph
        .groups()
        .iter()
        .enumerate()
        .map(|(g, members)| {
            let latent = match pop.model {
                ModelKind::TwoState => {
                    let w = pop.coupling.w[g];
                    vec![1.0 - w, w]
                }
                // The first member's marginal serves as the group's latent law.
                _ => pop.profiles[members[0]].marginal().expect("i.i.d. model"),
            };
            let members = members
                .iter()
                .map(|&u| {
                    let lambda = pop.coupling.lambda[u];
                    let marginal = pop.profiles[u].marginal().expect("i.i.d. model");
                    let residual =
                        residual_distribution(&marginal, &latent, lambda).ok_or_else(|| Error::CouplingInfeasible {
                            user: u,
                            detail: format!(
                                "marginal {marginal:?} cannot be reached with lambda = {lambda} and latent {latent:?}"
                            ),
                        })?;
                    Ok(MemberPlan { user: u, lambda, residual_cdf: cdf(&residual) })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(GroupPlan { latent_cdf: cdf(&latent), members })
        })
        .collect()
}

fn residual_distribution(marginal: &[f64], latent: &[f64], lambda: f64) -> Option<Vec<f64>> {
    if lambda >= 1.0 {
        let equal = marginal.iter().zip(latent).all(|(a, b)| (a - b).abs() <= FEASIBILITY_TOL);
        return equal.then(|| latent.to_vec());
    }
    let rho: Vec<f64> = marginal.iter().zip(latent).map(|(p, l)| (p - lambda * l) / (1.0 - lambda)).collect();
    rho.iter()
        .all(|x| (-FEASIBILITY_TOL..=1.0 + FEASIBILITY_TOL).contains(x))
        .then(|| rho.into_iter().map(|x| x.clamp(0.0, 1.0)).collect())
}

/// Checks that every user's residual distribution is valid.
pub fn check_coupling(pop: &Population) -> Result<()> {
    match pop.model {
        ModelKind::Markov => Ok(()),
        _ => plan_groups(pop).map(|_| ()),
    }
}

/// i.i.d. traces for the two-state and r-state models.
pub fn generate_iid_traces(pop: &Population, m: usize, seed: u64) -> Result<TraceMatrix> {
    if pop.model == ModelKind::Markov {
        return Err(Error::Config("use generate_markov_traces for the markov model".into()));
    }
    let plans = plan_groups(pop)?;
    let per_group: Vec<Vec<(usize, Vec<u8>)>> = plans
        .par_iter()
        .enumerate()
        .map(|(g, plan)| {
            let mut rng = seed::rng(seed::derive(seed, g as u64, 0, tag::GROUP));
            let mut cols = vec![Vec::with_capacity(m); plan.members.len()];
            for _ in 0..m {
                let latent = draw(&plan.latent_cdf, rng.gen());
                for (member, col) in plan.members.iter().zip(cols.iter_mut()) {
                    let copy = rng.gen::<f64>() < member.lambda;
                    let own = draw(&member.residual_cdf, rng.gen());
                    col.push(if copy { latent } else { own });
                }
            }
            plan.members.iter().map(|mp| mp.user).zip(cols).collect()
        })
        .collect();
    assemble(pop, per_group)
}

fn assemble(pop: &Population, per_group: Vec<Vec<(usize, Vec<u8>)>>) -> Result<TraceMatrix> {
    let mut columns = vec![Vec::new(); pop.n()];
    for (u, col) in per_group.into_iter().flatten() {
        columns[u] = col;
    }
    TraceMatrix::from_columns(columns, pop.r as u8, Stage::True)
}

/// Stationary distribution by iterating the lazy chain `(I + P) / 2`, which
/// shares the stationary law of `P` and converges for any irreducible chain.
pub fn stationary_distribution(matrix: &[Vec<f64>]) -> Vec<f64> {
    let r = matrix.len();
    let mut pi = vec![1.0 / r as f64; r];
    for _ in 0..1_000_000 {
        let mut next = vec![0.0; r];
        for (i, row) in matrix.iter().enumerate() {
            for (j, p) in row.iter().enumerate() {
                next[j] += pi[i] * p;
            }
        }
        let residual = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        for (p, n) in pi.iter_mut().zip(&next) {
            *p = 0.5 * (*p + n);
        }
        if residual < 1e-14 {
            break;
        }
    }
    let total: f64 = pi.iter().sum();
    pi.iter().map(|p| p / total).collect()
}

/// Markov traces. With `burn_in == 0` each chain starts from its stationary
/// law; otherwise it starts in state 0 and `burn_in` steps are discarded.
pub fn generate_markov_traces(pop: &Population, m: usize, burn_in: usize, seed: u64) -> Result<TraceMatrix> {
    if pop.model != ModelKind::Markov {
        return Err(Error::Config("generate_markov_traces needs the markov model".into()));
    }
    if pop.structure.is_none() {
        return Err(Error::Config("markov population without structure".into()));
    }
    let mu = pop.coupling.mu;
    let chains: Vec<(Vec<f64>, Vec<Vec<f64>>)> = pop
        .profiles
        .iter()
        .map(|p| {
            let Params::Markov { matrix, .. } = &p.params else { unreachable!("validated population") };
            (cdf(&stationary_distribution(matrix)), matrix.iter().map(|row| cdf(row)).collect())
        })
        .collect();

    let per_group: Vec<Vec<(usize, Vec<u8>)>> = pop
        .graph
        .groups()
        .par_iter()
        .enumerate()
        .map(|(g, members)| {
            let mut rng = seed::rng(seed::derive(seed, g as u64, 1, tag::GROUP));
            let mut variates = vec![0.0; members.len()];
            let step = |rng: &mut seed::SimRng, variates: &mut [f64]| {
                if rng.gen::<f64>() < mu {
                    let shared = rng.gen::<f64>();
                    variates.iter_mut().for_each(|v| *v = shared);
                } else {
                    variates.iter_mut().for_each(|v| *v = rng.gen());
                }
            };
            let mut state: Vec<u8> = if burn_in == 0 {
                step(&mut rng, &mut variates);
                members.iter().zip(&variates).map(|(&u, &v)| draw(&chains[u].0, v)).collect()
            } else {
                vec![0; members.len()]
            };
            for _ in 0..burn_in {
                step(&mut rng, &mut variates);
                for ((s, &u), &v) in state.iter_mut().zip(members).zip(&variates) {
                    *s = draw(&chains[u].1[*s as usize], v);
                }
            }
            let mut cols = vec![Vec::with_capacity(m); members.len()];
            for k in 0..m {
                if k > 0 {
                    step(&mut rng, &mut variates);
                    for ((s, &u), &v) in state.iter_mut().zip(members).zip(&variates) {
                        *s = draw(&chains[u].1[*s as usize], v);
                    }
                }
                for (col, &s) in cols.iter_mut().zip(&state) {
                    col.push(s);
                }
            }
            members.iter().copied().zip(cols).collect()
        })
        .collect();
    assemble(pop, per_group)
}

/// Dispatches on the population's model.
pub fn generate_traces(pop: &Population, m: usize, burn_in: usize, seed: u64) -> Result<TraceMatrix> {
    match pop.model {
        ModelKind::Markov => generate_markov_traces(pop, m, burn_in, seed),
        _ => generate_iid_traces(pop, m, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::{
        build_group_graph, sample_profiles, CouplingSpec, DensitySpec, MarkovStructure, Topology, UserProfile,
    };

    fn two_state_pair(p: [f64; 2], lambda: [f64; 2], w: f64) -> Population {
        let graph = build_group_graph(&[2], Topology::Complete, 0).unwrap();
        let profiles = vec![UserProfile::two_state(0, p[0]), UserProfile::two_state(1, p[1])];
        let coupling = CouplingSpec { w: vec![w], lambda: lambda.to_vec(), mu: 0.0 };
        Population::new(ModelKind::TwoState, 2, profiles, graph, coupling).unwrap()
    }

    /// Exact joint of the latent construction by enumerating
    /// (latent, copy_i, copy_j, own_i, own_j).
    fn enumerate_latent_cov(p: [f64; 2], lambda: [f64; 2], w: f64) -> f64 {
        let rho: Vec<f64> = (0..2).map(|u| residual_probability(p[u], lambda[u], w).unwrap()).collect();
        let bern = |x: u8, q: f64| if x == 1 { q } else { 1.0 - q };
        let mut joint = [[0.0; 2]; 2];
        for wl in 0..2u8 {
            for ci in 0..2u8 {
                for cj in 0..2u8 {
                    for oi in 0..2u8 {
                        for oj in 0..2u8 {
                            let prob = bern(wl, w)
                                * bern(ci, lambda[0])
                                * bern(cj, lambda[1])
                                * bern(oi, rho[0])
                                * bern(oj, rho[1]);
                            let xi = if ci == 1 { wl } else { oi };
                            let xj = if cj == 1 { wl } else { oj };
                            joint[xi as usize][xj as usize] += prob;
                        }
                    }
                }
            }
        }
        let pi = joint[1][0] + joint[1][1];
        let pj = joint[0][1] + joint[1][1];
        joint[1][1] - pi * pj
    }

    #[test]
    fn covariance_closed_form_matches_enumeration() {
        let cases = [([0.5, 0.5], [1.0, 1.0], 0.5), ([0.5, 0.5], [0.6, 0.6], 0.5), ([0.3, 0.3], [0.5, 0.8], 0.25)];
        for (p, lambda, w) in cases {
            let brute = enumerate_latent_cov(p, lambda, w);
            let closed = pair_covariance(w, lambda[0], lambda[1], p[0], p[1]).unwrap();
            assert!((brute - closed).abs() < 1e-15, "{p:?} {lambda:?} {w}: {brute} vs {closed}");
        }
    }

    #[test]
    fn covariance_worked_values() {
        assert_eq!(pair_covariance(0.5, 0.0, 0.7, 0.4, 0.5).unwrap(), 0.0);
        assert!((pair_covariance(0.5, 1.0, 1.0, 0.5, 0.5).unwrap() - 0.25).abs() < 1e-15);
        assert!((pair_covariance(0.5, 0.6, 0.6, 0.5, 0.5).unwrap() - 0.09).abs() < 1e-15);
        assert!((pair_covariance(0.25, 0.5, 0.8, 0.3, 0.3).unwrap() - 0.075).abs() < 1e-15);
    }

    #[test]
    fn infeasible_coupling_names_the_user() {
        let graph = build_group_graph(&[2], Topology::Complete, 0).unwrap();
        let profiles = vec![UserProfile::two_state(0, 0.5), UserProfile::two_state(1, 0.05)];
        let coupling = CouplingSpec { w: vec![0.5], lambda: vec![0.6, 0.6], mu: 0.0 };
        let pop = Population::new(ModelKind::TwoState, 2, profiles, graph.clone(), coupling).unwrap();
        match generate_iid_traces(&pop, 10, 1) {
            Err(Error::CouplingInfeasible { user, .. }) => assert_eq!(user, 1),
            other => panic!("expected infeasible coupling, got {other:?}"),
        }
    }

    #[test]
    fn full_coupling_duplicates_columns() {
        let pop = two_state_pair([0.5, 0.5], [1.0, 1.0], 0.5);
        let x = generate_iid_traces(&pop, 2000, 4).unwrap();
        assert_eq!(x.col(0), x.col(1));
    }

    #[test]
    fn empirical_covariance_tracks_closed_form() {
        let pop = two_state_pair([0.5, 0.5], [0.6, 0.6], 0.5);
        let m = 100_000;
        let x = generate_iid_traces(&pop, m, 8).unwrap();
        let mean = |c: &[u8]| c.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
        let (a, b) = (x.col(0), x.col(1));
        let both = a.iter().zip(b).filter(|(&p, &q)| p == 1 && q == 1).count() as f64 / m as f64;
        let cov = both - mean(a) * mean(b);
        // Standard error of the plug-in covariance is below 0.25 / sqrt(m).
        assert!((cov - 0.09).abs() < 4.0 * 0.25 / (m as f64).sqrt(), "cov {cov}");
    }

    #[test]
    fn generation_is_deterministic() {
        let graph = build_group_graph(&[2, 3, 1], Topology::Chain, 3).unwrap();
        let profiles = sample_profiles(6, &DensitySpec::two_state(0.3), 3).unwrap();
        let coupling = CouplingSpec::uniform(&graph, 0.5, 0.6, 0.0);
        let pop = Population::new(ModelKind::TwoState, 2, profiles, graph, coupling).unwrap();
        assert_eq!(generate_iid_traces(&pop, 500, 9).unwrap(), generate_iid_traces(&pop, 500, 9).unwrap());
        assert_ne!(generate_iid_traces(&pop, 500, 9).unwrap(), generate_iid_traces(&pop, 500, 10).unwrap());
    }

    #[test]
    fn symmetric_chain_is_uniform_at_stationarity() {
        let pi = stationary_distribution(&[vec![0.7, 0.3], vec![0.3, 0.7]]);
        assert!((pi[0] - 0.5).abs() < 1e-12 && (pi[1] - 0.5).abs() < 1e-12);
        let pi = stationary_distribution(&[vec![0.9, 0.1], vec![0.3, 0.7]]);
        assert!((pi[0] - 0.75).abs() < 1e-12);
    }

    fn markov_population(mu: f64, same_matrix: bool) -> Population {
        let structure = MarkovStructure::complete(3).unwrap();
        let mut profiles = sample_profiles(2, &DensitySpec::markov(structure.clone(), 0.05), 21).unwrap();
        if same_matrix {
            let Params::Markov { matrix, .. } = profiles[0].params.clone() else { unreachable!() };
            profiles[1] = UserProfile::markov(1, matrix, &structure);
        }
        let graph = build_group_graph(&[2], Topology::Complete, 0).unwrap();
        let coupling = CouplingSpec::uniform(&graph, 0.5, 0.0, mu);
        Population::new(ModelKind::Markov, 3, profiles, graph, coupling).unwrap()
    }

    #[test]
    fn fully_shared_variates_give_identical_trajectories() {
        let pop = markov_population(1.0, true);
        let x = generate_markov_traces(&pop, 1000, 0, 5).unwrap();
        assert_eq!(x.col(0), x.col(1));
    }

    #[test]
    fn burn_in_start_runs() {
        let pop = markov_population(0.3, false);
        let x = generate_markov_traces(&pop, 100, 50, 5).unwrap();
        assert_eq!((x.m(), x.n()), (100, 2));
        assert!(x.col(0).iter().all(|&s| s < 3));
    }

    #[test]
    fn csv_and_binary_round_trip() {
        let cols = vec![vec![0, 1, 2], vec![2, 2, 0]];
        let t = TraceMatrix::from_columns(cols, 3, Stage::Anonymized).unwrap();
        let mut csv_bytes = Vec::new();
        t.write_csv(&mut csv_bytes).unwrap();
        let text = String::from_utf8(csv_bytes.clone()).unwrap();
        assert_eq!(text, "k,u0,u1\n0,0,2\n1,1,2\n2,2,0\n");
        assert_eq!(TraceMatrix::read_csv(&csv_bytes[..], 3, Stage::Anonymized).unwrap(), t);

        let mut bin = Vec::new();
        t.write_binary(&mut bin).unwrap();
        assert_eq!(&bin[..4], b"CMTR");
        assert_eq!(bin.len(), 14 + 6);
        assert_eq!(&bin[14..], &[0, 2, 1, 2, 2, 0]);
        assert_eq!(TraceMatrix::read_binary(&bin[..]).unwrap(), t);
    }

    #[test]
    fn out_of_alphabet_symbols_are_rejected() {
        assert!(TraceMatrix::from_columns(vec![vec![0, 2]], 2, Stage::True).is_err());
    }
}
