//! Command-line front end.
//!
//! File layout keeps the adversary's inputs apart from ground truth:
//! `mech` writes `observed.csv` and `knowledge.json` for the attacker and
//! seals the permutation and true traces into `truth.json` and
//! `truth_traces.csv`. `attack` reads the truth files only when `--truth` is
//! given, and only to score the outcome.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use crate::adversary::{run_attack, AdversaryKnowledge, AttackConfig};
use crate::error::Error;
use crate::experiments::{self, ExperimentSpec};
use crate::mechanisms::{
    anonymize, measure_noise, obfuscate_independent, obfuscate_joint, random_permutation, MechanismRecord, PairChannel,
    PairJoint, Scheme,
};
use crate::oracle::{exact_mi_anonymized, pair_channel_matrix, TinyInstance};
use crate::population::Population;
use crate::seed::{self, tag};
use crate::tracegen::{generate_traces, pair_joint, Stage, TraceMatrix};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DEGENERATE: i32 = 3;

pub const THREADS_ENV: &str = "CORRMATCH_THREADS";

#[derive(Debug, Parser)]
#[command(name = "corrmatch", version, about = "De-anonymization of correlated users: simulation and attack")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads (default: CORRMATCH_THREADS, else all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Args)]
pub struct Output {
    /// Output directory, created if absent.
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite existing output files.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a population and its true traces.
    Gen {
        /// Experiment spec, or a fixed population document.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        output: Output,
        #[arg(long)]
        seed: Option<u64>,
        /// Observations per user (default: first m of the spec grid).
        #[arg(long)]
        m: Option<usize>,
    },
    /// Obfuscate and anonymize true traces.
    Mech {
        /// Directory written by `gen`.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        output: Output,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "independent")]
        scheme: SchemeArg,
        #[arg(long, default_value_t = 0.0)]
        a_n: f64,
    },
    /// Run the matching attack on observed traces.
    Attack {
        /// Directory written by `mech`.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        output: Output,
        #[arg(long, default_value_t = 0)]
        target: usize,
        /// Edge threshold (default m^(-1/3)).
        #[arg(long)]
        tau: Option<f64>,
        /// Sealed truth record, used only to score the outcome.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Run a full Monte Carlo sweep.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        output: Output,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Exact computations on tiny instances.
    Oracle {
        #[arg(long, value_enum, conflicts_with = "config")]
        preset: Option<Preset>,
        /// Tiny-instance document.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        user: usize,
        #[arg(long, default_value_t = 0)]
        k: usize,
        /// Also write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Measure the realized noise level A_m of independent obfuscation.
    NoiseAudit {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        output: Output,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SchemeArg {
    None,
    Independent,
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// One fair user, m = 1.
    FairN1,
    /// Two independent fair users, m = 1.
    PairMiN2m1,
    /// Two identical fair users, m = 1.
    CorrelatedN2m1,
    /// Correlated pair before and after decorrelation, m = 1.
    DecorrelatedN2m1,
}

#[derive(Debug)]
struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError { code: EXIT_CONFIG, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_)
            | Error::CouplingInfeasible { .. }
            | Error::Domain(_)
            | Error::UnsupportedTopology { .. }
            | Error::DimensionMismatch(_)
            | Error::BudgetExceeded { .. }
            | Error::Json(_)
            | Error::Csv(_) => EXIT_CONFIG,
            Error::AttackFailed(_) | Error::NoThreshold { .. } => EXIT_DEGENERATE,
            Error::Mechanism(_) | Error::Io(_) => EXIT_INTERNAL,
        };
        CliError { code, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name), runs, and returns the exit
/// code. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    init_threads(cli.threads);
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

fn init_threads(flag: Option<usize>) {
    let threads = flag.or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()));
    if let Some(t) = threads.filter(|&t| t > 0) {
        // Fails harmlessly if a pool already exists in this process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
}

fn dispatch(command: Command) -> CliResult<i32> {
    match command {
        Command::Gen { config, output, seed, m } => cmd_gen(&config, &output, seed, m),
        Command::Mech { input, output, seed, scheme, a_n } => cmd_mech(&input, &output, seed, scheme, a_n),
        Command::Attack { input, output, target, tau, truth } => {
            cmd_attack(&input, &output, target, tau, truth.as_deref())
        }
        Command::Sweep { config, output, seed } => cmd_sweep(&config, &output, seed),
        Command::Oracle { preset, config, user, k, out, force } => {
            cmd_oracle(preset, config.as_deref(), user, k, out.as_deref(), force)
        }
        Command::NoiseAudit { config, output, seed } => cmd_noise_audit(&config, &output, seed),
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> CliResult<T> {
    serde_json::from_str(text)
        .map_err(|e| CliError::config(format!("{}:{}:{}: {}", path.display(), e.line(), e.column(), e)))
}

fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    parse_json(path, &read_text(path)?)
}

fn load_spec(path: &Path, seed: Option<u64>) -> CliResult<ExperimentSpec> {
    let mut spec: ExperimentSpec = load_json(path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    Ok(spec)
}

/// Checks that none of `names` exists in `dir` unless `force`, creating the
/// directory if needed.
fn prepare_out(output: &Output, names: &[&str]) -> CliResult<Vec<PathBuf>> {
    fs::create_dir_all(&output.out).map_err(|e| CliError {
        code: EXIT_INTERNAL,
        message: format!("cannot create {}: {e}", output.out.display()),
    })?;
    let paths: Vec<PathBuf> = names.iter().map(|n| output.out.join(n)).collect();
    if !output.force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(CliError::config(format!("{} exists; pass --force to overwrite", p.display())));
        }
    }
    Ok(paths)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError { code: EXIT_INTERNAL, message: format!("cannot write {}: {e}", path.display()) })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(Error::from)?;
    writeln!(w).and_then(|_| w.flush()).map_err(Error::from)?;
    Ok(())
}

fn write_traces(path: &Path, traces: &TraceMatrix) -> CliResult<()> {
    let mut w = create(path)?;
    traces.write_csv(&mut w)?;
    w.flush().map_err(Error::from)?;
    Ok(())
}

fn read_traces(path: &Path, r: usize, stage: Stage) -> CliResult<TraceMatrix> {
    let file = File::open(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    Ok(TraceMatrix::read_csv(BufReader::new(file), r as u8, stage)?)
}

fn cmd_gen(config: &Path, output: &Output, seed: Option<u64>, m: Option<usize>) -> CliResult<i32> {
    let text = read_text(config)?;
    let value: serde_json::Value = parse_json(config, &text)?;
    let (pop, m, master) = if value.get("profiles").is_some() {
        let pop: Population = parse_json(config, &text)?;
        let m = m.ok_or_else(|| CliError::config("--m is required with a population document"))?;
        (pop, m, seed.unwrap_or(0))
    } else {
        let spec = load_spec(config, seed)?;
        let pop = experiments::draw_population(&spec, spec.n, 0, 0)?.ok_or_else(|| CliError {
            code: EXIT_DEGENERATE,
            message: format!("no feasible coupling after {} attempts", experiments::RETRY_BOUND),
        })?;
        (pop, m.unwrap_or(spec.grid.m[0]), spec.seed)
    };
    if m == 0 {
        return Err(CliError::config("m must be positive"));
    }
    let burn_in = value.get("burn_in").and_then(|b| b.as_u64()).unwrap_or(0) as usize;
    let paths = prepare_out(output, &["population.json", "traces.csv", "knowledge.json"])?;
    let traces = generate_traces(&pop, m, burn_in, seed::derive(master, 0, 0, tag::TRACES))?;
    write_json(&paths[0], &pop)?;
    write_traces(&paths[1], &traces)?;
    write_json(&paths[2], &AdversaryKnowledge::from_population(&pop, None))?;
    info!("wrote {} users x {} samples to {}", pop.n(), m, output.out.display());
    Ok(EXIT_OK)
}

/// Contents of `truth.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct TruthRecord {
    pub record: MechanismRecord,
    pub groups: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub channels: Vec<PairChannel>,
    /// True traces, relative to the truth record's directory.
    pub traces: String,
}

fn cmd_mech(input: &Path, output: &Output, seed: Option<u64>, scheme: SchemeArg, a_n: f64) -> CliResult<i32> {
    let pop: Population = load_json(&input.join("population.json"))?;
    let x = read_traces(&input.join("traces.csv"), pop.r, Stage::True)?;
    if x.n() != pop.n() {
        return Err(CliError::config(format!("traces have {} users, population {}", x.n(), pop.n())));
    }
    let master = seed.unwrap_or(0);
    let noise_seed = seed::derive(master, 0, 0, tag::NOISE);
    let paths = prepare_out(output, &["observed.csv", "knowledge.json", "truth.json", "truth_traces.csv"])?;
    let (z, r, channels, scheme) = match scheme {
        SchemeArg::None => (x.clone(), vec![0.0; x.n()], vec![], Scheme::None),
        SchemeArg::Independent => {
            let (z, r) = obfuscate_independent(&x, a_n, noise_seed)?;
            (z, r, vec![], Scheme::Independent)
        }
        SchemeArg::Joint => {
            let joints = pop
                .graph
                .edges()
                .iter()
                .map(|&(i, j)| {
                    let q = pair_joint(&pop, i, j)?;
                    Ok(PairJoint { i, j, p_i: q[2] + q[3], p_j: q[1] + q[3], p11: q[3] })
                })
                .collect::<crate::Result<Vec<_>>>()?;
            let (z, record, channels) = obfuscate_joint(&x, &pop.graph, &joints, a_n, noise_seed)?;
            (z, record.r, channels, Scheme::JointDecorrelating)
        }
    };
    let pi = random_permutation(x.n(), seed::derive(master, 0, 0, tag::PERMUTATION));
    let y = anonymize(z, &pi)?;
    let a_n_known = (!matches!(scheme, Scheme::None)).then_some(a_n);
    write_traces(&paths[0], &y)?;
    write_json(&paths[1], &AdversaryKnowledge::from_population(&pop, a_n_known))?;
    let truth = TruthRecord {
        record: MechanismRecord { pi, r, a_n, scheme },
        groups: pop.graph.groups().to_vec(),
        channels,
        traces: "truth_traces.csv".into(),
    };
    write_json(&paths[2], &truth)?;
    write_traces(&paths[3], &x)?;
    Ok(EXIT_OK)
}

fn cmd_attack(input: &Path, output: &Output, target: usize, tau: Option<f64>, truth: Option<&Path>) -> CliResult<i32> {
    let knowledge: AdversaryKnowledge = load_json(&input.join("knowledge.json"))?;
    let y = read_traces(&input.join("observed.csv"), knowledge.r, Stage::Anonymized)?;
    let paths = prepare_out(output, &["outcome.json"])?;
    let mut outcome = run_attack(&y, &knowledge, target, &AttackConfig { tau })?;
    if let Some(truth_path) = truth {
        let record: TruthRecord = load_json(truth_path)?;
        let dir = truth_path.parent().unwrap_or(Path::new("."));
        let x = read_traces(&dir.join(&record.traces), knowledge.r, Stage::True)?;
        let group = record
            .groups
            .iter()
            .find(|g| g.contains(&target))
            .ok_or_else(|| CliError::config(format!("target {target} not in the truth record")))?;
        if x.n() <= target || record.record.pi.len() != x.n() {
            return Err(CliError::config("truth record does not match the observed traces"));
        }
        outcome.score(&record.record.pi, group, x.col(target))?;
        println!(
            "target {target}: success = {}, sample errors = {}/{}",
            outcome.success == Some(true),
            outcome.sample_errors.unwrap_or(0),
            outcome.m
        );
    }
    write_json(&paths[0], &outcome)?;
    Ok(EXIT_OK)
}

fn cmd_sweep(config: &Path, output: &Output, seed: Option<u64>) -> CliResult<i32> {
    let spec = load_spec(config, seed)?;
    let paths = prepare_out(output, &["sweep.csv", "sweep.json"])?;
    let result = experiments::sweep(&spec)?;
    let mut w = create(&paths[0])?;
    result.write_csv(&mut w)?;
    w.flush().map_err(Error::from)?;
    write_json(&paths[1], &result)?;
    for row in &result.rows {
        println!(
            "n={} m={} a_n={:.4}: success {:.3}  P_e {:.4} [{:.4}, {:.4}]",
            row.n, row.m, row.a_n, row.success_rate, row.pe_mean, row.pe_lo, row.pe_hi
        );
    }
    if result.any_degenerate() {
        eprintln!("error: some grid points had no feasible coupling");
        return Ok(EXIT_DEGENERATE);
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
pub struct OracleLine {
    pub label: String,
    pub n: usize,
    pub m: usize,
    pub user: usize,
    pub k: usize,
    pub mi_bits: f64,
}

/// Exact mutual-information values for a preset.
pub fn preset_report(preset: Preset) -> crate::Result<Vec<OracleLine>> {
    let line = |label: &str, inst: &TinyInstance| -> crate::Result<OracleLine> {
        Ok(OracleLine {
            label: label.into(),
            n: inst.n,
            m: inst.m,
            user: 0,
            k: 0,
            mi_bits: exact_mi_anonymized(inst, 0, 0)?,
        })
    };
    Ok(match preset {
        Preset::FairN1 => vec![line("one fair user", &TinyInstance::independent(&[0.5], 1)?)?],
        Preset::PairMiN2m1 => vec![line("two independent fair users", &TinyInstance::independent(&[0.5, 0.5], 1)?)?],
        Preset::CorrelatedN2m1 => {
            vec![line("two identical fair users", &TinyInstance::pair([0.5, 0.0, 0.0, 0.5], 1)?)?]
        }
        Preset::DecorrelatedN2m1 => {
            let joint = [0.4, 0.1, 0.1, 0.4];
            let channel = crate::mechanisms::build_pair_channel(0, 1, 0.5, 0.5, 0.4)?;
            let raw = TinyInstance::pair(joint, 1)?;
            let decorrelated = raw.clone().with_channel(pair_channel_matrix(&channel))?;
            vec![line("correlated pair", &raw)?, line("after decorrelation", &decorrelated)?]
        }
    })
}

fn cmd_oracle(
    preset: Option<Preset>,
    config: Option<&Path>,
    user: usize,
    k: usize,
    out: Option<&Path>,
    force: bool,
) -> CliResult<i32> {
    let lines = match (preset, config) {
        (Some(p), _) => preset_report(p)?,
        (None, Some(path)) => {
            let inst: TinyInstance = load_json(path)?;
            let inst = match inst.channel {
                Some(ch) => TinyInstance::from_joint(inst.n, inst.m, inst.joint)?.with_channel(ch)?,
                None => TinyInstance::from_joint(inst.n, inst.m, inst.joint)?,
            };
            let mi = exact_mi_anonymized(&inst, user, k)?;
            vec![OracleLine { label: path.display().to_string(), n: inst.n, m: inst.m, user, k, mi_bits: mi }]
        }
        (None, None) => return Err(CliError::config("oracle needs --preset or --config")),
    };
    println!("{:<28} {:>3} {:>3} {:>4} {:>3} {:>12}", "instance", "n", "m", "user", "k", "I (bits)");
    for l in &lines {
        println!("{:<28} {:>3} {:>3} {:>4} {:>3} {:>12.9}", l.label, l.n, l.m, l.user, l.k, l.mi_bits);
    }
    if let Some(path) = out {
        if path.exists() && !force {
            return Err(CliError::config(format!("{} exists; pass --force to overwrite", path.display())));
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(Error::from)?;
        }
        write_json(path, &lines)?;
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
pub struct NoiseAuditRow {
    pub n: usize,
    pub m: usize,
    pub a_n: f64,
    pub measured: f64,
    pub expected: f64,
}

fn cmd_noise_audit(config: &Path, output: &Output, seed: Option<u64>) -> CliResult<i32> {
    let mut spec = load_spec(config, seed)?;
    spec.mechanism = experiments::MechanismKind::Independent;
    let paths = prepare_out(output, &["noise_audit.json"])?;
    let mut rows = Vec::new();
    for (idx, point) in spec.points().iter().enumerate() {
        let a_n = point.a_n;
        let pop = experiments::draw_population(&spec, point.n, idx as u64, 0)?
            .ok_or_else(|| CliError { code: EXIT_DEGENERATE, message: "no feasible coupling".into() })?;
        let x = generate_traces(&pop, point.m, spec.burn_in, seed::derive(spec.seed, idx as u64, 0, tag::TRACES))?;
        let (z, _) = obfuscate_independent(&x, a_n, seed::derive(spec.seed, idx as u64, 0, tag::NOISE))?;
        let measured = measure_noise(&x, &z)?.pooled;
        println!("n={} m={} a_n={a_n:.5}: A_m = {measured:.5} (expected {:.5})", point.n, point.m, a_n / 2.0);
        rows.push(NoiseAuditRow { n: point.n, m: point.m, a_n, measured, expected: a_n / 2.0 });
    }
    write_json(&paths[0], &rows)?;
    Ok(EXIT_OK)
}
