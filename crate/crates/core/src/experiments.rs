//! Monte Carlo sweeps over the observation count `m` (and optionally the
//! noise level and population size).
//!
//! Every trial draws a fresh population, traces, mechanism realization and
//! permutation from seeds derived as `seed::derive(master, point, trial, tag)`,
//! so a sweep is reproducible from its master seed and independent of how
//! trials are scheduled across threads.

use std::io::Write;
use std::time::Instant;

use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{reconstruct_graph, run_attack, AdversaryKnowledge, AttackConfig};
use crate::error::{Error, Result};
use crate::mechanisms::{
    anonymize, measure_noise, obfuscate_independent, obfuscate_joint, random_permutation, PairJoint,
};
use crate::population::{
    build_group_graph, sample_profiles, CouplingSpec, DensitySpec, MarkovStructure, ModelKind, Population, Topology,
    DEFAULT_EPSILON,
};
use crate::seed::{self, tag};
use crate::tracegen::{check_coupling, generate_traces, pair_joint, TraceMatrix};

/// Attempts at drawing a population whose coupling is feasible.
pub const RETRY_BOUND: u64 = 16;

pub const CSV_HEADER: [&str; 16] = [
    "model",
    "n",
    "m",
    "s",
    "r",
    "a_n",
    "coupling",
    "trials",
    "success_rate",
    "pe_mean",
    "pe_lo",
    "pe_hi",
    "edge_precision",
    "edge_recall",
    "mean_noise",
    "seconds",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MechanismKind {
    #[default]
    None,
    Independent,
    Joint,
}

/// Noise level, either fixed or scaled with the population as
/// `c * n^-(1/s + beta)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NoiseLevel {
    Fixed(f64),
    Scaled { c: f64, beta: f64 },
}

impl Default for NoiseLevel {
    fn default() -> Self {
        NoiseLevel::Fixed(0.0)
    }
}

impl NoiseLevel {
    pub fn value(self, n: usize, s: usize) -> f64 {
        match self {
            NoiseLevel::Fixed(a) => a,
            NoiseLevel::Scaled { c, beta } => c * (n as f64).powf(-(1.0 / s as f64 + beta)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingParams {
    #[serde(default = "half")]
    pub w: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub mu: f64,
}

fn half() -> f64 {
    0.5
}

impl Default for CouplingParams {
    fn default() -> Self {
        CouplingParams { w: 0.5, lambda: 0.0, mu: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub m: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub a_n: Vec<NoiseLevel>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub n: Vec<usize>,
}

fn schema_v1() -> u32 {
    1
}

fn two() -> usize {
    2
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn complete() -> Topology {
    Topology::Complete
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(default = "schema_v1")]
    pub schema_version: u32,
    pub model: ModelKind,
    pub n: usize,
    /// Uniform group size.
    pub s: usize,
    #[serde(default = "two")]
    pub r: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "complete")]
    pub topology: Topology,
    #[serde(default)]
    pub coupling: CouplingParams,
    #[serde(default)]
    pub mechanism: MechanismKind,
    #[serde(default)]
    pub noise: NoiseLevel,
    pub grid: Grid,
    pub trials: usize,
    pub seed: u64,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub target_user: usize,
    /// Markov transition support; every transition when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub markov_edges: Option<Vec<[usize; 2]>>,
    #[serde(default)]
    pub burn_in: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub n: usize,
    pub m: usize,
    pub a_n: f64,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != 1 {
            return Err(Error::Config(format!("unsupported schema_version {}", self.schema_version)));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.grid.m.is_empty() {
            return Err(Error::Config("sweep grid over m is empty".into()));
        }
        if self.grid.m.contains(&0) {
            return Err(Error::Config("grid values of m must be positive".into()));
        }
        if self.s == 0 {
            return Err(Error::Config("group size s must be at least 1".into()));
        }
        for n in self.ns() {
            if n == 0 || n % self.s != 0 {
                return Err(Error::Config(format!("group size {} does not divide n = {n}", self.s)));
            }
            if self.target_user >= n {
                return Err(Error::Config(format!("target user {} outside n = {n}", self.target_user)));
            }
        }
        if self.mechanism == MechanismKind::Joint && (self.model != ModelKind::TwoState || self.s > 2) {
            return Err(Error::Config("joint decorrelation needs the two-state model with s <= 2".into()));
        }
        self.density()?.validate()?;
        Ok(())
    }

    fn ns(&self) -> Vec<usize> {
        if self.grid.n.is_empty() {
            vec![self.n]
        } else {
            self.grid.n.clone()
        }
    }

    fn levels(&self) -> Vec<NoiseLevel> {
        if self.grid.a_n.is_empty() {
            vec![self.noise]
        } else {
            self.grid.a_n.clone()
        }
    }

    /// Grid points in row order: `n`, then noise level, then `m`.
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for n in self.ns() {
            for level in self.levels() {
                let a_n = match self.mechanism {
                    MechanismKind::None => 0.0,
                    _ => level.value(n, self.s),
                };
                out.extend(self.grid.m.iter().map(|&m| GridPoint { n, m, a_n }));
            }
        }
        out
    }

    fn density(&self) -> Result<DensitySpec> {
        Ok(match self.model {
            ModelKind::TwoState => DensitySpec::two_state(self.epsilon),
            ModelKind::RState => DensitySpec::r_state(self.r, self.epsilon),
            ModelKind::Markov => {
                let structure = match &self.markov_edges {
                    Some(edges) => MarkovStructure::new(self.r, edges.iter().map(|e| (e[0], e[1])))?,
                    None => MarkovStructure::complete(self.r)?,
                };
                DensitySpec::markov(structure, self.epsilon)
            }
        })
    }
}

/// Aggregated counts for one grid point. Rates are derived from counts so
/// aggregation does not depend on trial order.
#[derive(Clone, Debug, PartialEq)]
pub struct PointStats {
    pub point: GridPoint,
    pub trials: usize,
    pub successes: usize,
    pub sample_errors: usize,
    pub samples: usize,
    pub precision_sum: f64,
    pub recall_sum: f64,
    pub noise_sum: f64,
    pub degenerate_trials: usize,
    pub seconds: f64,
}

struct TrialResult {
    success: bool,
    sample_errors: usize,
    samples: usize,
    precision: f64,
    recall: f64,
    noise: f64,
}

enum TrialOutcome {
    Done(TrialResult),
    Degenerate,
}

/// Draws a population whose coupling is feasible, resampling up to
/// [`RETRY_BOUND`] times; `None` when every attempt failed.
pub fn draw_population(spec: &ExperimentSpec, n: usize, point: u64, trial: u64) -> Result<Option<Population>> {
    let density = spec.density()?;
    let sizes = vec![spec.s; n / spec.s];
    for attempt in 0..RETRY_BOUND {
        let profiles =
            sample_profiles(n, &density, seed::derive(spec.seed, point, trial, tag::PROFILES ^ (attempt << 32)))?;
        let graph = build_group_graph(
            &sizes,
            spec.topology,
            seed::derive(spec.seed, point, trial, tag::GRAPH ^ (attempt << 32)),
        )?;
        let c = spec.coupling;
        let coupling = CouplingSpec::uniform(&graph, c.w, c.lambda, c.mu);
        let pop = Population::new(spec.model, density.r, profiles, graph, coupling)?;
        match check_coupling(&pop) {
            Ok(()) => return Ok(Some(pop)),
            Err(Error::CouplingInfeasible { user, detail }) => {
                debug!("point {point} trial {trial} attempt {attempt}: user {user} infeasible ({detail})");
            }
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

fn edge_scores(
    pop: &Population,
    pi: &[usize],
    pseudonym_edges: &std::collections::BTreeSet<(usize, usize)>,
) -> (f64, f64) {
    let inv = crate::mechanisms::invert(pi);
    let tp = pseudonym_edges.iter().filter(|&&(a, b)| pop.graph.has_edge(inv[a], inv[b])).count();
    let predicted = pseudonym_edges.len();
    let actual = pop.graph.edges().len();
    let precision = if predicted == 0 { 1.0 } else { tp as f64 / predicted as f64 };
    let recall = if actual == 0 { 1.0 } else { tp as f64 / actual as f64 };
    (precision, recall)
}

fn run_trial(spec: &ExperimentSpec, point: &GridPoint, point_index: u64, trial: u64) -> Result<TrialOutcome> {
    let Some(pop) = draw_population(spec, point.n, point_index, trial)? else {
        return Ok(TrialOutcome::Degenerate);
    };
    let x = generate_traces(&pop, point.m, spec.burn_in, seed::derive(spec.seed, point_index, trial, tag::TRACES))?;
    let noise_seed = seed::derive(spec.seed, point_index, trial, tag::NOISE);
    let (z, noise): (TraceMatrix, f64) = match spec.mechanism {
        MechanismKind::None => (x.clone(), 0.0),
        MechanismKind::Independent => {
            let (z, _) = obfuscate_independent(&x, point.a_n, noise_seed)?;
            let noise = measure_noise(&x, &z)?.pooled;
            (z, noise)
        }
        MechanismKind::Joint => {
            let joints = pop
                .graph
                .edges()
                .iter()
                .map(|&(i, j)| {
                    let joint = pair_joint(&pop, i, j)?;
                    Ok(PairJoint { i, j, p_i: joint[2] + joint[3], p_j: joint[1] + joint[3], p11: joint[3] })
                })
                .collect::<Result<Vec<_>>>()?;
            let (z, _, _) = obfuscate_joint(&x, &pop.graph, &joints, point.a_n, noise_seed)?;
            let noise = measure_noise(&x, &z)?.pooled;
            (z, noise)
        }
    };
    let pi = random_permutation(point.n, seed::derive(spec.seed, point_index, trial, tag::PERMUTATION));
    let y = anonymize(z, &pi)?;
    let a_n = (spec.mechanism != MechanismKind::None).then_some(point.a_n);
    let knowledge = AdversaryKnowledge::from_population(&pop, a_n);
    let target = spec.target_user;
    let group = &pop.graph.groups()[pop.graph.group_of(target)];

    let result = match run_attack(&y, &knowledge, target, &spec.attack) {
        Ok(mut outcome) => {
            outcome.score(&pi, group, x.col(target))?;
            let pseudonym_edges = outcome.edges.iter().map(|e| (e[0], e[1])).collect();
            let (precision, recall) = edge_scores(&pop, &pi, &pseudonym_edges);
            TrialResult {
                success: outcome.success == Some(true),
                sample_errors: outcome.sample_errors.unwrap_or(point.m),
                samples: point.m,
                precision,
                recall,
                noise,
            }
        }
        Err(Error::AttackFailed(reason)) => {
            debug!("point {point_index} trial {trial}: attack failed ({reason})");
            let tau = spec.attack.tau.unwrap_or_else(|| crate::adversary::default_tau(point.m));
            let edges = reconstruct_graph(&y, spec.model, tau);
            let (precision, recall) = edge_scores(&pop, &pi, &edges);
            TrialResult { success: false, sample_errors: point.m, samples: point.m, precision, recall, noise }
        }
        Err(e) => return Err(e),
    };
    Ok(TrialOutcome::Done(result))
}

/// Runs every trial of one grid point.
pub fn run_point(spec: &ExperimentSpec, point: &GridPoint, point_index: usize) -> Result<PointStats> {
    spec.validate()?;
    let start = Instant::now();
    let outcomes = (0..spec.trials as u64)
        .into_par_iter()
        .map(|t| run_trial(spec, point, point_index as u64, t))
        .collect::<Result<Vec<_>>>()?;
    let mut stats = PointStats {
        point: *point,
        trials: 0,
        successes: 0,
        sample_errors: 0,
        samples: 0,
        precision_sum: 0.0,
        recall_sum: 0.0,
        noise_sum: 0.0,
        degenerate_trials: 0,
        seconds: 0.0,
    };
    for outcome in outcomes {
        match outcome {
            TrialOutcome::Degenerate => stats.degenerate_trials += 1,
            TrialOutcome::Done(t) => {
                stats.trials += 1;
                stats.successes += usize::from(t.success);
                stats.sample_errors += t.sample_errors;
                stats.samples += t.samples;
                stats.precision_sum += t.precision;
                stats.recall_sum += t.recall;
                stats.noise_sum += t.noise;
            }
        }
    }
    stats.seconds = start.elapsed().as_secs_f64();
    if stats.degenerate_trials > 0 {
        warn!(
            "grid point m = {}, n = {}: {} trial(s) degenerate after {RETRY_BOUND} coupling attempts",
            point.m, point.n, stats.degenerate_trials
        );
    }
    Ok(stats)
}

/// Wilson score interval at 95% confidence.
pub fn wilson_interval(successes: usize, total: usize) -> (f64, f64) {
    if total == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054_f64;
    let n = total as f64;
    let p = successes as f64 / n;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0).min(p), (centre + half).min(1.0).max(p))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: ModelKind,
    pub n: usize,
    pub m: usize,
    pub s: usize,
    pub r: usize,
    pub a_n: f64,
    pub coupling: f64,
    pub trials: usize,
    pub success_rate: f64,
    pub pe_mean: f64,
    pub pe_lo: f64,
    pub pe_hi: f64,
    pub edge_precision: f64,
    pub edge_recall: f64,
    pub mean_noise: f64,
    pub seconds: f64,
    /// Some trials could not draw a feasible coupling.
    #[serde(default)]
    pub degenerate: bool,
}

impl SweepRow {
    fn from_stats(spec: &ExperimentSpec, stats: &PointStats) -> Self {
        let t = stats.trials.max(1) as f64;
        let pe_mean = if stats.samples == 0 { 0.0 } else { stats.sample_errors as f64 / stats.samples as f64 };
        let (pe_lo, pe_hi) = wilson_interval(stats.sample_errors, stats.samples);
        SweepRow {
            model: spec.model,
            n: stats.point.n,
            m: stats.point.m,
            s: spec.s,
            r: spec.density().map(|d| d.r).unwrap_or(spec.r),
            a_n: stats.point.a_n,
            coupling: spec.coupling.lambda,
            trials: stats.trials,
            success_rate: stats.successes as f64 / t,
            pe_mean,
            pe_lo,
            pe_hi,
            edge_precision: stats.precision_sum / t,
            edge_recall: stats.recall_sum / t,
            mean_noise: stats.noise_sum / t,
            seconds: stats.seconds,
            degenerate: stats.degenerate_trials > 0,
        }
    }

    fn csv_record(&self) -> [String; 16] {
        [
            self.model.as_str().to_string(),
            self.n.to_string(),
            self.m.to_string(),
            self.s.to_string(),
            self.r.to_string(),
            self.a_n.to_string(),
            self.coupling.to_string(),
            self.trials.to_string(),
            self.success_rate.to_string(),
            self.pe_mean.to_string(),
            self.pe_lo.to_string(),
            self.pe_hi.to_string(),
            self.edge_precision.to_string(),
            self.edge_recall.to_string(),
            self.mean_noise.to_string(),
            format!("{:.3}", self.seconds),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn any_degenerate(&self) -> bool {
        self.rows.iter().any(|r| r.degenerate)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_HEADER)?;
        for row in &self.rows {
            w.write_record(row.csv_record())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("CSV output is UTF-8"))
    }

    /// `(m, success_rate)` pairs, in row order.
    pub fn success_curve(&self) -> Vec<(usize, f64)> {
        self.rows.iter().map(|r| (r.m, r.success_rate)).collect()
    }
}

/// Evaluates every grid point in order.
pub fn sweep(spec: &ExperimentSpec) -> Result<SweepResult> {
    spec.validate()?;
    let mut rows = Vec::new();
    for (idx, point) in spec.points().iter().enumerate() {
        let stats = run_point(spec, point, idx)?;
        let row = SweepRow::from_stats(spec, &stats);
        info!(
            "n = {} m = {} a_n = {:.4}: success {:.3}, P_e {:.4}, {:.2}s",
            row.n, row.m, row.a_n, row.success_rate, row.pe_mean, row.seconds
        );
        rows.push(row);
    }
    Ok(SweepResult { rows })
}

/// Observation count at which success crosses `level`, by linear
/// interpolation in `log m` between the bracketing rows.
pub fn detect_threshold(curve: &[(usize, f64)], level: f64) -> Result<f64> {
    if curve.len() < 2 {
        return Err(Error::Config("threshold detection needs at least two rows".into()));
    }
    if curve.windows(2).any(|w| w[0].0 >= w[1].0) || curve[0].0 == 0 {
        return Err(Error::Config("rows must be sorted by strictly increasing positive m".into()));
    }
    if curve[0].1 == level {
        return Ok(curve[0].0 as f64);
    }
    for w in curve.windows(2) {
        let ((m0, s0), (m1, s1)) = (w[0], w[1]);
        let crosses = (s0 < level && s1 >= level) || (s0 > level && s1 <= level);
        if crosses {
            let t = (level - s0) / (s1 - s0);
            let (l0, l1) = ((m0 as f64).ln(), (m1 as f64).ln());
            return Ok((l0 + t * (l1 - l0)).exp());
        }
    }
    Err(Error::NoThreshold { level })
}
