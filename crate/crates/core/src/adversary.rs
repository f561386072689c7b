//! The statistical-matching adversary.
//!
//! Given anonymized (possibly obfuscated) traces and the public knowledge
//! (marginal profiles and association graph), the attack
//!
//! 1. reconstructs the association graph over pseudonyms by thresholding
//!    pairwise covariance (two-state) or plug-in mutual information;
//! 2. picks, among reconstructed components of the target group's size, the
//!    one whose sorted fingerprints are closest to the group's sorted profiles;
//! 3. matches members to pseudonyms by a minimum-distance assignment;
//! 4. reports the matched pseudonym's samples as the target's samples.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment;
use crate::error::{Error, Result};
use crate::population::{MarkovStructure, ModelKind, Population};
use crate::tracegen::{Stage, TraceMatrix};

/// Everything the adversary is allowed to know: no permutation, no noise
/// realizations, no coupling parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversaryKnowledge {
    pub model: ModelKind,
    pub r: usize,
    /// Statistic vector of each user's profile.
    pub profiles: Vec<Vec<f64>>,
    pub groups: Vec<Vec<usize>>,
    pub edges: Vec<[usize; 2]>,
    /// Markov transition support, row-major.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structure: Option<Vec<[usize; 2]>>,
    /// Configured noise level of the obfuscation mechanism, if any.
    #[serde(default)]
    pub a_n: Option<f64>,
}

impl AdversaryKnowledge {
    pub fn from_population(pop: &Population, a_n: Option<f64>) -> Self {
        AdversaryKnowledge {
            model: pop.model,
            r: pop.r,
            profiles: pop.profiles.iter().map(|p| p.vector()).collect(),
            groups: pop.graph.groups().to_vec(),
            edges: pop.graph.edges().iter().map(|&(a, b)| [a, b]).collect(),
            structure: pop.structure.as_ref().map(|s| s.edges().iter().map(|&(a, b)| [a, b]).collect()),
            a_n,
        }
    }

    pub fn n(&self) -> usize {
        self.profiles.len()
    }

    fn markov_structure(&self) -> Result<Option<MarkovStructure>> {
        match (&self.structure, self.model) {
            (Some(edges), ModelKind::Markov) => {
                MarkovStructure::new(self.r, edges.iter().map(|e| (e[0], e[1]))).map(Some)
            }
            (None, ModelKind::Markov) => Err(Error::Config("markov knowledge lacks the transition support".into())),
            _ => Ok(None),
        }
    }

    fn group_of(&self, user: usize) -> Option<&Vec<usize>> {
        self.groups.iter().find(|g| g.contains(&user))
    }
}

/// Empirical statistic of one pseudonym's column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub values: Vec<f64>,
    /// Coordinates that could be estimated (a Markov state never visited
    /// leaves its transition frequencies undefined).
    pub valid: Vec<bool>,
}

impl Fingerprint {
    fn full(values: Vec<f64>) -> Self {
        let valid = vec![true; values.len()];
        Fingerprint { values, valid }
    }

    pub fn is_complete(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    /// Euclidean distance to a profile vector over the valid coordinates.
    pub fn distance(&self, profile: &[f64]) -> f64 {
        self.values
            .iter()
            .zip(&self.valid)
            .zip(profile)
            .filter(|((_, &ok), _)| ok)
            .map(|((x, _), p)| (x - p).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Per-pseudonym fingerprints. Markov transitions are counted circularly,
/// pairing the last sample with the first, so every visit has a successor.
pub fn fingerprint(y: &TraceMatrix, model: ModelKind, structure: Option<&MarkovStructure>) -> Result<Vec<Fingerprint>> {
    if y.m() == 0 {
        return Err(Error::Domain("cannot fingerprint an empty trace".into()));
    }
    if y.stage() != Stage::Anonymized {
        return Err(Error::Domain("fingerprints are computed on anonymized traces".into()));
    }
    let m = y.m() as f64;
    let r = y.r() as usize;
    let fps = y
        .columns()
        .map(|col| match model {
            ModelKind::TwoState => Fingerprint::full(vec![col.iter().filter(|&&x| x == 1).count() as f64 / m]),
            ModelKind::RState => {
                let mut counts = vec![0usize; r];
                col.iter().for_each(|&x| counts[x as usize] += 1);
                Fingerprint::full(counts[1..].iter().map(|&c| c as f64 / m).collect())
            }
            ModelKind::Markov => {
                let structure = structure.expect("markov fingerprints need the transition support");
                let mut visits = vec![0usize; r];
                let mut trans = vec![vec![0usize; r]; r];
                for (k, &a) in col.iter().enumerate() {
                    let b = col[(k + 1) % col.len()];
                    visits[a as usize] += 1;
                    trans[a as usize][b as usize] += 1;
                }
                let (values, valid) = structure
                    .free_positions()
                    .iter()
                    .map(|&(i, j)| match visits[i] {
                        0 => (0.0, false),
                        v => (trans[i][j] as f64 / v as f64, true),
                    })
                    .unzip();
                Fingerprint { values, valid }
            }
        })
        .collect();
    Ok(fps)
}

/// Per-symbol bitsets of one column.
struct SymbolBits {
    words: Vec<Vec<u64>>,
    counts: Vec<usize>,
}

impl SymbolBits {
    fn new(col: &[u8], r: usize) -> Self {
        let nwords = col.len().div_ceil(64);
        let mut words = vec![vec![0u64; nwords]; r];
        let mut counts = vec![0usize; r];
        for (k, &x) in col.iter().enumerate() {
            words[x as usize][k / 64] |= 1 << (k % 64);
            counts[x as usize] += 1;
        }
        SymbolBits { words, counts }
    }

    fn joint(&self, other: &SymbolBits, a: usize, b: usize) -> usize {
        self.words[a].iter().zip(&other.words[b]).map(|(x, y)| (x & y).count_ones() as usize).sum()
    }
}

/// Default edge threshold `m^(-1/3)`.
pub fn default_tau(m: usize) -> f64 {
    (m as f64).powf(-1.0 / 3.0)
}

/// Plug-in mutual information in bits from a joint count table.
pub fn plug_in_mi(joint: &[Vec<usize>], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    let rows: Vec<f64> = joint.iter().map(|row| row.iter().sum::<usize>() as f64).collect();
    let cols: Vec<f64> =
        (0..joint.first().map_or(0, Vec::len)).map(|b| joint.iter().map(|row| row[b]).sum::<usize>() as f64).collect();
    let mut mi = 0.0;
    for (a, row) in joint.iter().enumerate() {
        for (b, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / t * (c * t / (rows[a] * cols[b])).log2();
            }
        }
    }
    mi.max(0.0)
}

/// Edge statistic of one pseudonym pair: |covariance| for the two-state
/// model, plug-in mutual information otherwise.
fn edge_statistic(a: &SymbolBits, b: &SymbolBits, m: usize, model: ModelKind, r: usize) -> f64 {
    if model == ModelKind::TwoState {
        let mf = m as f64;
        let both = a.joint(b, 1, 1) as f64 / mf;
        return (both - a.counts[1] as f64 / mf * (b.counts[1] as f64 / mf)).abs();
    }
    let joint: Vec<Vec<usize>> = (0..r).map(|x| (0..r).map(|z| a.joint(b, x, z)).collect()).collect();
    plug_in_mi(&joint, m)
}

/// Pseudonym pairs whose edge statistic exceeds `tau`.
pub fn reconstruct_graph(y: &TraceMatrix, model: ModelKind, tau: f64) -> BTreeSet<(usize, usize)> {
    let r = y.r() as usize;
    let bits: Vec<SymbolBits> = y.columns().map(|c| SymbolBits::new(c, r)).collect();
    let m = y.m();
    (0..y.n())
        .into_par_iter()
        .flat_map_iter(|i| {
            let bits = &bits;
            (i + 1..y.n())
                .filter_map(move |j| (edge_statistic(&bits[i], &bits[j], m, model, r) > tau).then_some((i, j)))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// Connected components, each sorted, ordered by smallest member.
pub fn components(n: usize, edges: &BTreeSet<(usize, usize)>) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for u in 0..n {
        let root = find(&mut parent, u);
        by_root.entry(root).or_default().push(u);
    }
    by_root.into_values().collect()
}

fn sorted_stack<'a>(vectors: impl Iterator<Item = (&'a [f64], Option<&'a [bool]>)>) -> (Vec<f64>, Vec<bool>) {
    let mut items: Vec<(&[f64], Option<&[bool]>)> = vectors.collect();
    items.sort_by(|a, b| {
        a.0.iter().zip(b.0).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut values = Vec::new();
    let mut valid = Vec::new();
    for (v, ok) in items {
        values.extend_from_slice(v);
        match ok {
            Some(ok) => valid.extend_from_slice(ok),
            None => valid.extend(std::iter::repeat_n(true, v.len())),
        }
    }
    (values, valid)
}

/// Index into `components` of the candidate closest to the target group.
/// Only components of the target's size are considered; ties keep the first.
pub fn match_group(target_profiles: &[Vec<f64>], components: &[Vec<usize>], fps: &[Fingerprint]) -> Result<usize> {
    let s = target_profiles.len();
    let (target, _) = sorted_stack(target_profiles.iter().map(|p| (p.as_slice(), None)));
    let mut best: Option<(usize, f64)> = None;
    for (idx, comp) in components.iter().enumerate().filter(|(_, c)| c.len() == s) {
        let (values, valid) =
            sorted_stack(comp.iter().map(|&p| (fps[p].values.as_slice(), Some(fps[p].valid.as_slice()))));
        let d = values
            .iter()
            .zip(&valid)
            .zip(&target)
            .filter(|((_, &ok), _)| ok)
            .map(|((x, _), t)| (x - t).powi(2))
            .sum::<f64>()
            .sqrt();
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((idx, d));
        }
    }
    best.map(|(idx, _)| idx).ok_or_else(|| Error::AttackFailed(format!("no reconstructed component of size {s}")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemberMatch {
    /// `assignment[i]` indexes the pseudonym matched to profile `i`.
    pub assignment: Vec<usize>,
    pub cost: f64,
    pub ambiguous: bool,
}

/// Minimum total-distance bijection between profiles and fingerprints.
pub fn match_members(profiles: &[Vec<f64>], fps: &[&Fingerprint]) -> Result<MemberMatch> {
    if profiles.len() != fps.len() {
        return Err(Error::DimensionMismatch(format!("{} profiles vs {} fingerprints", profiles.len(), fps.len())));
    }
    let cost: Vec<Vec<f64>> = profiles.iter().map(|p| fps.iter().map(|f| f.distance(p)).collect()).collect();
    let a = assignment::solve(&cost);
    Ok(MemberMatch { assignment: a.rows_to_cols, cost: a.cost, ambiguous: a.ambiguous })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Edge threshold; `None` selects `m^(-1/3)`.
    #[serde(default)]
    pub tau: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub edges: Vec<[usize; 2]>,
    /// Pseudonyms of the matched component.
    pub group: Vec<usize>,
    /// Pseudonym -> claimed user, for the target's group.
    pub ident: BTreeMap<usize, usize>,
    pub success: Option<bool>,
    pub sample_errors: Option<usize>,
    pub m: usize,
    pub target: usize,
    pub ambiguous: bool,
    #[serde(skip)]
    pub estimates: Vec<u8>,
}

impl AttackOutcome {
    /// Pseudonym claimed for `user`, if any.
    pub fn pseudonym_of(&self, user: usize) -> Option<usize> {
        self.ident.iter().find(|(_, &u)| u == user).map(|(&p, _)| p)
    }

    /// Scores against the hidden permutation (`pi[u]` = pseudonym of `u`) and
    /// the target's true samples.
    pub fn score(&mut self, pi: &[usize], group_members: &[usize], true_target: &[u8]) -> Result<()> {
        if true_target.len() != self.estimates.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} true samples vs {} estimates",
                true_target.len(),
                self.estimates.len()
            )));
        }
        let all_right = group_members.iter().all(|&u| self.pseudonym_of(u) == Some(pi[u]));
        self.success = Some(all_right && self.ident.len() == group_members.len());
        self.sample_errors = Some(self.estimates.iter().zip(true_target).filter(|(a, b)| a != b).count());
        Ok(())
    }
}

/// Runs the full matching pipeline against `target_user`.
pub fn run_attack(
    y: &TraceMatrix,
    knowledge: &AdversaryKnowledge,
    target_user: usize,
    config: &AttackConfig,
) -> Result<AttackOutcome> {
    if y.n() != knowledge.n() {
        return Err(Error::DimensionMismatch(format!("{} pseudonyms vs {} known users", y.n(), knowledge.n())));
    }
    if y.r() as usize != knowledge.r {
        return Err(Error::DimensionMismatch(format!("alphabet {} vs known r = {}", y.r(), knowledge.r)));
    }
    let group = knowledge
        .group_of(target_user)
        .ok_or_else(|| Error::Config(format!("target user {target_user} is not in any known group")))?;
    let structure = knowledge.markov_structure()?;
    let fps = fingerprint(y, knowledge.model, structure.as_ref())?;
    if let Some(bad) = fps.iter().position(|f| f.values.len() != knowledge.profiles[0].len()) {
        return Err(Error::DimensionMismatch(format!("fingerprint {bad} does not match the profile dimension")));
    }
    let tau = config.tau.unwrap_or_else(|| default_tau(y.m()));
    let edges = reconstruct_graph(y, knowledge.model, tau);
    let comps = components(y.n(), &edges);

    let profiles: Vec<Vec<f64>> = group.iter().map(|&u| knowledge.profiles[u].clone()).collect();
    let chosen = &comps[match_group(&profiles, &comps, &fps)?];
    let chosen_fps: Vec<&Fingerprint> = chosen.iter().map(|&p| &fps[p]).collect();
    let members = match_members(&profiles, &chosen_fps)?;

    let ident: BTreeMap<usize, usize> =
        group.iter().zip(&members.assignment).map(|(&user, &slot)| (chosen[slot], user)).collect();
    let target_pseudonym = ident.iter().find(|(_, &u)| u == target_user).map(|(&p, _)| p).expect("bijection");
    Ok(AttackOutcome {
        edges: edges.iter().map(|&(a, b)| [a, b]).collect(),
        group: chosen.clone(),
        ident,
        success: None,
        sample_errors: None,
        m: y.m(),
        target: target_user,
        ambiguous: members.ambiguous,
        estimates: y.col(target_pseudonym).to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn anon(cols: Vec<Vec<u8>>, r: u8) -> TraceMatrix {
        TraceMatrix::from_columns(cols, r, Stage::True).unwrap().advance(Stage::Anonymized).unwrap()
    }

    #[test]
    fn two_state_fingerprint_is_the_mean() {
        let fps = fingerprint(&anon(vec![vec![1, 1, 0, 1]], 2), ModelKind::TwoState, None).unwrap();
        assert_eq!(fps[0].values, vec![0.75]);
    }

    #[test]
    fn r_state_fingerprint_drops_symbol_zero() {
        let fps = fingerprint(&anon(vec![vec![0, 1, 2, 1]], 3), ModelKind::RState, None).unwrap();
        assert_eq!(fps[0].values, vec![0.5, 0.25]);
    }

    #[test]
    fn markov_fingerprint_counts_transitions_circularly() {
        let structure = MarkovStructure::complete(2).unwrap();
        let fps = fingerprint(&anon(vec![vec![0, 0, 1, 1, 0]], 2), ModelKind::Markov, Some(&structure)).unwrap();
        // Free coordinates are p(0,0) and p(1,0): p(0,1) = 1/3 gives p(0,0) = 2/3.
        assert!((fps[0].values[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((fps[0].values[1] - 0.5).abs() < 1e-15);
        assert!(fps[0].is_complete());
    }

    #[test]
    fn markov_fingerprint_flags_unvisited_states() {
        let structure = MarkovStructure::complete(3).unwrap();
        let fps = fingerprint(&anon(vec![vec![0, 1, 0, 1]], 3), ModelKind::Markov, Some(&structure)).unwrap();
        assert!(!fps[0].is_complete());
        assert_eq!(fps[0].valid, vec![true, true, true, true, false, false]);
    }

    #[test]
    fn empty_trace_cannot_be_fingerprinted() {
        let y = anon(vec![vec![], vec![]], 2);
        assert!(fingerprint(&y, ModelKind::TwoState, None).is_err());
    }

    #[test]
    fn identical_and_opposite_columns_are_edges() {
        let y = anon(vec![vec![1, 0, 1, 0], vec![1, 0, 1, 0], vec![0, 1, 0, 1]], 2);
        let edges = reconstruct_graph(&y, ModelKind::TwoState, 0.1);
        assert_eq!(edges.into_iter().collect::<Vec<_>>(), vec![(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn mi_edge_rule_for_r_state() {
        let y = anon(vec![vec![0, 1, 2, 0, 1, 2], vec![0, 1, 2, 0, 1, 2], vec![0, 0, 0, 0, 0, 0]], 3);
        let edges = reconstruct_graph(&y, ModelKind::RState, 0.5);
        assert_eq!(edges.into_iter().collect::<Vec<_>>(), vec![(0, 1)]);
    }

    #[test]
    fn plug_in_mi_of_identical_fair_bits_is_one() {
        assert!((plug_in_mi(&[vec![5, 0], vec![0, 5]], 10) - 1.0).abs() < 1e-12);
        assert_eq!(plug_in_mi(&[vec![1, 1], vec![1, 1]], 4), 0.0);
    }

    #[test]
    fn components_follow_edges() {
        let edges = BTreeSet::from([(0, 3), (3, 4), (1, 2)]);
        assert_eq!(components(6, &edges), vec![vec![0, 3, 4], vec![1, 2], vec![5]]);
    }

    fn fp(v: &[f64]) -> Fingerprint {
        Fingerprint::full(v.to_vec())
    }

    #[test]
    fn nearest_component_is_chosen() {
        let fps = vec![fp(&[0.72]), fp(&[0.19]), fp(&[0.40]), fp(&[0.90]), fp(&[0.5])];
        let comps = vec![vec![0, 1], vec![2, 3], vec![4]];
        let target = vec![vec![0.7], vec![0.2]];
        assert_eq!(match_group(&target, &comps, &fps).unwrap(), 0);
    }

    #[test]
    fn single_candidate_is_returned_regardless_of_distance() {
        let fps = vec![fp(&[0.9]), fp(&[0.95]), fp(&[0.1])];
        let comps = vec![vec![0, 1], vec![2]];
        assert_eq!(match_group(&[vec![0.1], vec![0.2]], &comps, &fps).unwrap(), 0);
    }

    #[test]
    fn exact_match_wins() {
        let fps = vec![fp(&[0.3]), fp(&[0.31]), fp(&[0.6])];
        let comps = vec![vec![0], vec![1], vec![2]];
        assert_eq!(match_group(&[vec![0.31]], &comps, &fps).unwrap(), 1);
    }

    #[test]
    fn missing_group_size_fails_the_attack() {
        let fps = vec![fp(&[0.3]), fp(&[0.6])];
        let comps = vec![vec![0], vec![1]];
        assert!(matches!(match_group(&[vec![0.3], vec![0.6]], &comps, &fps), Err(Error::AttackFailed(_))));
    }

    #[test]
    fn members_match_nearest() {
        let a = fp(&[0.68]);
        let b = fp(&[0.21]);
        let m = match_members(&[vec![0.2], vec![0.7]], &[&a, &b]).unwrap();
        assert_eq!(m.assignment, vec![1, 0]);
        assert!(!m.ambiguous);
    }

    #[test]
    fn single_member_match() {
        let a = fp(&[0.1]);
        assert_eq!(match_members(&[vec![0.9]], &[&a]).unwrap().assignment, vec![0]);
    }

    #[test]
    fn identical_fingerprints_are_flagged() {
        let a = fp(&[0.5]);
        let m = match_members(&[vec![0.2], vec![0.7]], &[&a, &a]).unwrap();
        assert_eq!(m.assignment, vec![0, 1]);
        assert!(m.ambiguous);
    }

    #[test]
    fn member_size_mismatch() {
        let a = fp(&[0.5]);
        assert!(matches!(match_members(&[vec![0.2], vec![0.7]], &[&a]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn outcome_json_has_contract_fields() {
        let outcome = AttackOutcome {
            edges: vec![[0, 1]],
            group: vec![0, 1],
            ident: BTreeMap::from([(0, 1), (1, 0)]),
            success: Some(true),
            sample_errors: Some(0),
            m: 4,
            target: 0,
            ambiguous: false,
            estimates: vec![0; 4],
        };
        let v: serde_json::Value = serde_json::to_value(&outcome).unwrap();
        for key in ["edges", "group", "ident", "success", "sample_errors", "m"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["ident"]["0"], 1);
    }
}
