//! Privacy mechanisms: anonymization, independent obfuscation, and the
//! pairwise decorrelating channel for groups of at most two users.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::population::AssociationGraph;
use crate::seed::{self, tag};
use crate::tracegen::{Stage, TraceMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    None,
    Independent,
    JointDecorrelating,
}

/// Ground truth of one mechanism application. Never shown to the adversary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismRecord {
    /// `pi[u]` is the pseudonym assigned to user `u`.
    pub pi: Vec<usize>,
    /// Realized per-user noise probabilities `R_u`.
    pub r: Vec<f64>,
    pub a_n: f64,
    pub scheme: Scheme,
}

impl MechanismRecord {
    pub fn inverse_permutation(&self) -> Vec<usize> {
        invert(&self.pi)
    }
}

pub fn invert(pi: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; pi.len()];
    for (u, &p) in pi.iter().enumerate() {
        inv[p] = u;
    }
    inv
}

pub fn is_bijection(pi: &[usize]) -> bool {
    let mut seen = vec![false; pi.len()];
    pi.iter().all(|&p| p < pi.len() && !std::mem::replace(&mut seen[p], true))
}

/// Uniform random permutation of `n` users.
pub fn random_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut pi: Vec<usize> = (0..n).collect();
    pi.shuffle(&mut seed::rng(seed));
    pi
}

/// Relabels users: output column `pi[u]` is input column `u`.
pub fn anonymize(traces: TraceMatrix, pi: &[usize]) -> Result<TraceMatrix> {
    if pi.len() != traces.n() || !is_bijection(pi) {
        return Err(Error::Mechanism(format!(
            "permutation of length {} is not a bijection on {} users",
            pi.len(),
            traces.n()
        )));
    }
    if traces.stage() == Stage::Anonymized {
        return Err(Error::Mechanism("traces are already anonymized".into()));
    }
    let (r, stage) = (traces.r(), traces.stage());
    let mut columns = traces.into_columns();
    let inv = invert(pi);
    let permuted = inv.iter().map(|&u| std::mem::take(&mut columns[u])).collect();
    TraceMatrix::from_columns(permuted, r, stage)?.advance(Stage::Anonymized)
}

/// Applies the inverse relabeling. Used to restore pseudonymous data for
/// scoring; it does not change the stage.
pub fn deanonymize_columns(traces: &TraceMatrix, pi: &[usize]) -> Vec<Vec<u8>> {
    pi.iter().map(|&p| traces.col(p).to_vec()).collect()
}

/// Replaces each sample, with probability `rate`, by a uniformly chosen
/// different symbol.
fn corrupt<R: Rng>(col: &mut [u8], rate: f64, r: u8, rng: &mut R) {
    for x in col.iter_mut() {
        let flip = rng.gen::<f64>() < rate;
        let offset = if r == 2 { 1 } else { 1 + rng.gen_range(0..r - 1) };
        if flip {
            *x = (*x + offset) % r;
        }
    }
}

/// Per-user noise `R_u ~ Uniform[0, a_n]`, fixed over all `m` samples.
pub fn obfuscate_independent(traces: &TraceMatrix, a_n: f64, seed: u64) -> Result<(TraceMatrix, Vec<f64>)> {
    if !(0.0..=1.0).contains(&a_n) {
        return Err(Error::Mechanism(format!("noise level {a_n} outside [0, 1]")));
    }
    if traces.stage() != Stage::True {
        return Err(Error::Mechanism("obfuscation applies to true traces only".into()));
    }
    let r = traces.r();
    let (noise, columns): (Vec<f64>, Vec<Vec<u8>>) = (0..traces.n())
        .into_par_iter()
        .map(|u| {
            let mut rng = seed::rng(seed::derive(seed, u as u64, 0, tag::NOISE));
            let rate = a_n * rng.gen::<f64>();
            let mut col = traces.col(u).to_vec();
            corrupt(&mut col, rate, r, &mut rng);
            (rate, col)
        })
        .unzip();
    let out = TraceMatrix::from_columns(columns, r, Stage::True)?.advance(Stage::Obfuscated)?;
    Ok((out, noise))
}

/// Two-state marginal after flipping with probability `rate`.
pub fn obfuscated_marginal(p: f64, rate: f64) -> f64 {
    p + (1.0 - 2.0 * p) * rate
}

/// Flip rule applied to the driven user for one driver symbol.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipRule {
    /// Driven symbol that may be flipped.
    pub from: u8,
    pub prob: f64,
}

/// Conditional flip channel that zeroes the covariance of an associated pair.
///
/// The driver is the side attaining `max{p_i, 1-p_i, p_j, 1-p_j}`. Its samples
/// are untouched. When the driver shows its minority symbol the driven
/// sample is flipped, with the minimal probability that makes the driven
/// conditional equal its majority-side conditional. The driven marginal moves
/// to that conditional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairChannel {
    pub driver: usize,
    pub driven: usize,
    /// Indexed by driver symbol.
    pub rules: [FlipRule; 2],
    /// `P(driven = 1)` after the channel.
    pub driven_marginal: f64,
    /// Expected fraction of flipped samples, indexed like `users()`.
    pub flip_rate_driver: f64,
    pub flip_rate_driven: f64,
}

impl PairChannel {
    pub fn identity(driver: usize, driven: usize, driven_marginal: f64) -> Self {
        PairChannel {
            driver,
            driven,
            rules: [FlipRule { from: 0, prob: 0.0 }; 2],
            driven_marginal,
            flip_rate_driver: 0.0,
            flip_rate_driven: 0.0,
        }
    }

    /// Exact output joint `[q00, q01, q10, q11]` over `(X_i, X_j)` for an
    /// input joint in the same layout, where `i < j` are the pair's slots 0/1.
    pub fn apply_to_joint(&self, joint: &[f64; 4]) -> [f64; 4] {
        let driver_slot = usize::from(self.driver > self.driven);
        let mut out = [0.0; 4];
        for a in 0..2usize {
            for b in 0..2usize {
                let mass = joint[2 * a + b];
                let (d, v) = if driver_slot == 0 { (a, b) } else { (b, a) };
                let rule = self.rules[d];
                let flip = if v as u8 == rule.from { rule.prob } else { 0.0 };
                for (v_out, w) in [(v, 1.0 - flip), (1 - v, flip)] {
                    let (oa, ob) = if driver_slot == 0 { (d, v_out) } else { (v_out, d) };
                    out[2 * oa + ob] += mass * w;
                }
            }
        }
        out
    }
}

/// Upper bound on the driven flip rate, `|Cov| / max{p_i, 1-p_i, p_j, 1-p_j}`.
pub fn decorrelation_bound(p_i: f64, p_j: f64, p11: f64) -> f64 {
    (p11 - p_i * p_j).abs() / p_i.max(1.0 - p_i).max(p_j).max(1.0 - p_j)
}

/// Builds the decorrelating channel for users `i` and `j` with marginals
/// `p_i`, `p_j` and `P(X_i = 1, X_j = 1) = p11`. Ties go to `i`, which should
/// be the lower user index.
pub fn build_pair_channel(i: usize, j: usize, p_i: f64, p_j: f64, p11: f64) -> Result<PairChannel> {
    let valid_marginals = (0.0..=1.0).contains(&p_i) && (0.0..=1.0).contains(&p_j);
    let lo = (p_i + p_j - 1.0).max(0.0);
    let hi = p_i.min(p_j);
    if !valid_marginals || p11 < lo - 1e-15 || p11 > hi + 1e-15 {
        return Err(Error::Domain(format!("invalid joint: p_i = {p_i}, p_j = {p_j}, p11 = {p11}")));
    }
    let p11 = p11.clamp(lo, hi);
    let driver_is_i = p_i.max(1.0 - p_i) >= p_j.max(1.0 - p_j);
    let (driver, driven, p_d, p_v) = if driver_is_i { (i, j, p_i, p_j) } else { (j, i, p_j, p_i) };

    // Driver marginal over {0, 1} and driven conditionals q[s] = P(driven = 1 | driver = s).
    let pi_d = [1.0 - p_d, p_d];
    let p10 = p_v - p11; // P(driver = 0, driven = 1)
    let majority = usize::from(p_d >= 0.5);
    let minority = 1 - majority;
    if pi_d[minority] <= 0.0 {
        return Ok(PairChannel::identity(driver, driven, p_v));
    }
    let q = [p10 / pi_d[0], p11 / pi_d[1]];
    let target = q[majority];
    let gap = target - q[minority];

    let mut rules = [FlipRule { from: 0, prob: 0.0 }; 2];
    rules[minority] = if gap > 0.0 {
        FlipRule { from: 0, prob: gap / (1.0 - q[minority]) }
    } else if gap < 0.0 {
        FlipRule { from: 1, prob: -gap / q[minority] }
    } else {
        FlipRule { from: 0, prob: 0.0 }
    };
    Ok(PairChannel {
        driver,
        driven,
        rules,
        driven_marginal: target,
        flip_rate_driver: 0.0,
        flip_rate_driven: pi_d[minority] * gap.abs(),
    })
}

/// Exact joint statistics of one associated pair, used to configure the
/// decorrelating channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairJoint {
    pub i: usize,
    pub j: usize,
    pub p_i: f64,
    pub p_j: f64,
    pub p11: f64,
}

/// Decorrelates every associated pair, then applies independent obfuscation
/// at level `a_n`. Groups larger than two are not supported.
pub fn obfuscate_joint(
    traces: &TraceMatrix,
    graph: &AssociationGraph,
    joints: &[PairJoint],
    a_n: f64,
    seed: u64,
) -> Result<(TraceMatrix, MechanismRecord, Vec<PairChannel>)> {
    if traces.stage() != Stage::True {
        return Err(Error::Mechanism("obfuscation applies to true traces only".into()));
    }
    if traces.r() != 2 {
        return Err(Error::Mechanism("joint decorrelation is defined for two-state data".into()));
    }
    if graph.n() != traces.n() {
        return Err(Error::DimensionMismatch(format!("graph on {} users, traces on {}", graph.n(), traces.n())));
    }
    if let Some((g, members)) = graph.groups().iter().enumerate().find(|(_, m)| m.len() > 2) {
        return Err(Error::UnsupportedTopology { group: g, size: members.len() });
    }
    let by_pair: BTreeMap<(usize, usize), &PairJoint> =
        joints.iter().map(|pj| ((pj.i.min(pj.j), pj.i.max(pj.j)), pj)).collect();

    let mut columns = traces.clone().into_columns();
    let mut channels = Vec::new();
    for (e, &(a, b)) in graph.edges().iter().enumerate() {
        let pj =
            by_pair.get(&(a, b)).ok_or_else(|| Error::Mechanism(format!("no joint supplied for edge ({a},{b})")))?;
        let (p_a, p_b) = if pj.i == a { (pj.p_i, pj.p_j) } else { (pj.p_j, pj.p_i) };
        let channel = build_pair_channel(a, b, p_a, p_b, pj.p11)?;
        let mut rng = seed::rng(seed::derive(seed, e as u64, 0, tag::CHANNEL));
        let driver = std::mem::take(&mut columns[channel.driver]);
        let driven = &mut columns[channel.driven];
        for (d, v) in driver.iter().zip(driven.iter_mut()) {
            let rule = channel.rules[*d as usize];
            let u = rng.gen::<f64>();
            if *v == rule.from && u < rule.prob {
                *v = 1 - *v;
            }
        }
        columns[channel.driver] = driver;
        channels.push(channel);
    }
    let decorrelated = TraceMatrix::from_columns(columns, 2, Stage::True)?;
    let (out, noise) = obfuscate_independent(&decorrelated, a_n, seed)?;
    let record = MechanismRecord { pi: Vec::new(), r: noise, a_n, scheme: Scheme::JointDecorrelating };
    Ok((out, record, channels))
}

/// Realized corruption fractions `A_m(u)` and their pooled value `A_m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub per_user: Vec<f64>,
    pub pooled: f64,
}

pub fn measure_noise(truth: &TraceMatrix, observed: &TraceMatrix) -> Result<NoiseReport> {
    if truth.m() != observed.m() || truth.n() != observed.n() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} truth vs {}x{} obfuscated",
            truth.m(),
            truth.n(),
            observed.m(),
            observed.n()
        )));
    }
    if truth.stage() != Stage::True || observed.stage() != Stage::Obfuscated {
        return Err(Error::Mechanism("noise audit compares TRUE against OBFUSCATED traces".into()));
    }
    let m = truth.m();
    let counts: Vec<usize> =
        (0..truth.n()).map(|u| truth.col(u).iter().zip(observed.col(u)).filter(|(a, b)| a != b).count()).collect();
    let per_user = counts.iter().map(|&c| if m == 0 { 0.0 } else { c as f64 / m as f64 }).collect();
    let total: usize = counts.iter().sum();
    let cells = m * truth.n();
    let pooled = if cells == 0 { 0.0 } else { total as f64 / cells as f64 };
    Ok(NoiseReport { per_user, pooled })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(cols: Vec<Vec<u8>>) -> TraceMatrix {
        TraceMatrix::from_columns(cols, 2, Stage::True).unwrap()
    }

    #[test]
    fn identity_permutation_only_changes_stage() {
        let x = matrix(vec![vec![0, 1, 1], vec![1, 1, 0]]);
        let y = anonymize(x.clone(), &[0, 1]).unwrap();
        assert_eq!(y.stage(), Stage::Anonymized);
        assert_eq!(y.col(0), x.col(0));
        assert_eq!(y.col(1), x.col(1));
    }

    #[test]
    fn swap_exchanges_columns() {
        let x = matrix(vec![vec![0, 0], vec![1, 1]]);
        let y = anonymize(x, &[1, 0]).unwrap();
        assert_eq!(y.col(0), &[1, 1]);
        assert_eq!(y.col(1), &[0, 0]);
    }

    #[test]
    fn three_cycle_moves_column_zero_to_two() {
        let x = matrix(vec![vec![0, 0], vec![1, 0], vec![1, 1]]);
        let y = anonymize(x.clone(), &[2, 0, 1]).unwrap();
        assert_eq!(y.col(2), x.col(0));
        assert_eq!(y.col(0), x.col(1));
        assert_eq!(y.col(1), x.col(2));
    }

    #[test]
    fn non_bijections_are_rejected() {
        let x = matrix(vec![vec![0], vec![1]]);
        assert!(matches!(anonymize(x.clone(), &[0, 0]), Err(Error::Mechanism(_))));
        assert!(matches!(anonymize(x, &[0]), Err(Error::Mechanism(_))));
    }

    #[test]
    fn zero_noise_is_identity() {
        let x = matrix(vec![vec![0, 1, 1, 0], vec![1, 1, 0, 0]]);
        let (z, r) = obfuscate_independent(&x, 0.0, 3).unwrap();
        assert_eq!(z.into_columns(), x.into_columns());
        assert!(r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noise_level_out_of_range_is_rejected() {
        let x = matrix(vec![vec![0]]);
        assert!(obfuscate_independent(&x, 1.5, 0).is_err());
        assert!(obfuscate_independent(&x, -0.1, 0).is_err());
    }

    #[test]
    fn r_ary_corruption_never_keeps_the_symbol() {
        let x = TraceMatrix::from_columns(vec![vec![0, 1, 2, 3, 4]; 3], 5, Stage::True).unwrap();
        let (z, r) = obfuscate_independent(&x, 1.0, 7).unwrap();
        let report = measure_noise(&x, &z).unwrap();
        for u in 0..3 {
            assert!(r[u] <= 1.0);
            assert!(z.col(u).iter().all(|&s| s < 5));
        }
        assert!(report.pooled <= 1.0);
    }

    #[test]
    fn obfuscated_marginal_formula() {
        assert!((obfuscated_marginal(0.3, 0.1) - 0.34).abs() < 1e-15);
        assert_eq!(obfuscated_marginal(0.5, 0.37), 0.5);
        assert!((obfuscated_marginal(0.2, 1.0) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn independent_joint_gives_identity_channel() {
        let c = build_pair_channel(0, 1, 0.3, 0.6, 0.18).unwrap();
        assert_eq!(c.flip_rate_driven, 0.0);
        assert!(c.rules.iter().all(|r| r.prob == 0.0));
    }

    #[test]
    fn fair_pair_channel() {
        let c = build_pair_channel(0, 1, 0.5, 0.5, 0.3).unwrap();
        assert_eq!((c.driver, c.driven), (0, 1));
        assert!((c.flip_rate_driven - 0.1).abs() < 1e-15);
        assert!((c.driven_marginal - 0.6).abs() < 1e-15);
        assert_eq!(c.flip_rate_driver, 0.0);
    }

    #[test]
    fn skewed_pair_channel() {
        let c = build_pair_channel(0, 1, 0.8, 0.5, 0.45).unwrap();
        assert_eq!(c.driver, 0);
        assert_eq!(c.rules[1].prob, 0.0);
        assert_eq!(c.rules[0].from, 0);
        assert!((c.driven_marginal - 0.5625).abs() < 1e-15);
        assert!((c.flip_rate_driven - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn driver_can_be_the_second_user() {
        let c = build_pair_channel(0, 1, 0.5, 0.8, 0.45).unwrap();
        assert_eq!((c.driver, c.driven), (1, 0));
        assert!((c.flip_rate_driven - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn invalid_joint_is_a_domain_error() {
        assert!(matches!(build_pair_channel(0, 1, 0.5, 0.5, 0.6), Err(Error::Domain(_))));
        assert!(matches!(build_pair_channel(0, 1, 0.8, 0.5, 0.2), Err(Error::Domain(_))));
    }

    #[test]
    fn measure_noise_counts_mismatches() {
        let x = matrix(vec![vec![0, 0, 0, 0]]);
        let z = matrix(vec![vec![1, 0, 0, 0]]).advance(Stage::Obfuscated).unwrap();
        let report = measure_noise(&x, &z).unwrap();
        assert_eq!(report.per_user, vec![0.25]);
        assert_eq!(report.pooled, 0.25);

        let same = x.clone().advance(Stage::Obfuscated).unwrap();
        assert_eq!(measure_noise(&x, &same).unwrap().pooled, 0.0);
        let short = matrix(vec![vec![0, 0]]).advance(Stage::Obfuscated).unwrap();
        assert!(matches!(measure_noise(&x, &short), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn joint_scheme_rejects_triples() {
        let graph = crate::population::build_group_graph(&[3], crate::population::Topology::Chain, 0).unwrap();
        let x = matrix(vec![vec![0]; 3]);
        assert!(matches!(obfuscate_joint(&x, &graph, &[], 0.0, 0), Err(Error::UnsupportedTopology { size: 3, .. })));
    }

    #[test]
    fn joint_scheme_on_edgeless_graph_matches_independent() {
        let graph = crate::population::build_group_graph(&[1, 1], crate::population::Topology::Chain, 0).unwrap();
        let x = matrix(vec![vec![0, 1, 1, 0, 1], vec![1, 1, 0, 0, 0]]);
        let (z, record, channels) = obfuscate_joint(&x, &graph, &[], 0.3, 5).unwrap();
        let (z2, r2) = obfuscate_independent(&x, 0.3, 5).unwrap();
        assert!(channels.is_empty());
        assert_eq!(z, z2);
        assert_eq!(record.r, r2);
    }
}
