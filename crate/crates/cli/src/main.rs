//! `shai-sim`: generate a corpus, run the offline analyzer, benchmark the
//! monitors, sweep mispredictions and inject faults.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use shai_core::analyzer::{
    load_oa, parse_predictions, persist_oa, render_predictions, run_oa, Manifest, ManifestError, OaError, OaOptions,
    PersistError,
};
use shai_core::bench::{parse_point, run_with, sweep_with, BenchError, MetricsReport, Overrides, RunConfig};
use shai_core::model::{Region, TaskId};
use shai_core::monitor::{Mode, TickCosts};
use shai_core::pipeline::corpus::load_metadata;
use shai_core::pipeline::faults::{inject, Fault};
use shai_core::pipeline::session::{parse_sessions, render_sessions, workload, ScriptError};
use shai_core::pipeline::{Corpus, CorpusError, CorpusSpec, System, SystemConfig, SystemError, WorkloadSpec};
use shai_core::policy::{parse_policy_file, ParseError};
use thiserror::Error;

const SEED_ENV: &str = "SHAI_SIM_SEED";

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error(transparent)]
    Oa(#[from] OaError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("{path}: {source}")]
    Policy { path: PathBuf, source: ParseError },
    #[error("{path}: {source}")]
    Manifest { path: PathBuf, source: ManifestError },
    #[error("{path}: {source}")]
    Script { path: PathBuf, source: ScriptError },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Bench(BenchError::Config(_)) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "shai-sim", version, about = "Hybrid information-flow enforcement simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic social-search corpus directory.
    Gen(GenArgs),
    /// Run the offline analyzer and persist its output.
    Oa(OaArgs),
    /// Run session workloads and emit metrics.
    Run(RunArgs),
    /// Slow-path interceptions across mispredict fractions.
    Sweep(SweepArgs),
    /// Inject the six fault scenarios.
    Faults(FaultArgs),
    /// Re-render a metrics CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 5000)]
    docs: usize,
    #[arg(long, default_value_t = 3)]
    regions: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct OaArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    policies: PathBuf,
    /// Directory holding `clock` and `lists/<id>`.
    #[arg(long)]
    metadata: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Analyzer worker threads.
    #[arg(long)]
    parallel: Option<usize>,
    /// Skip instances marked inactive in the manifest.
    #[arg(long)]
    active_only: bool,
    /// Prediction log written by an earlier `run`.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct Common {
    /// Corpus directory written by `gen`.
    #[arg(long)]
    corpus: PathBuf,
    /// Manifest to use instead of the corpus one.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Persisted analyzer output to load instead of analyzing.
    #[arg(long)]
    oa: Option<PathBuf>,
    /// Prediction log from an earlier run.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Comma-separated modes: shai, dynamic, baseline or all.
    #[arg(long, value_delimiter = ',')]
    mode: Vec<String>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Worker threads for the analyzer; above 1 the modes also run concurrently.
    #[arg(long)]
    parallel: Option<usize>,
    #[arg(long)]
    patch_slowpath: bool,
    /// Ticks per light-weight context reset.
    #[arg(long)]
    tick_lwc: Option<u64>,
    /// Ticks per process re-exec.
    #[arg(long)]
    tick_exec: Option<u64>,
    /// Ticks per monitor entry.
    #[arg(long)]
    tick_rm: Option<u64>,
    /// `csv` or `text`.
    #[arg(long, default_value = "csv")]
    format: String,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// `<len>x<count>`; repeatable or comma-separated.
    #[arg(long, value_delimiter = ',')]
    sessions: Vec<String>,
    #[arg(long, default_value_t = 0.0)]
    mispredict: f64,
    /// Session script file to run instead of a generated workload.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Directory for per-mode interception logs.
    #[arg(long)]
    log_dir: Option<PathBuf>,
    /// Where to write unpredicted (task, region) pairs.
    #[arg(long)]
    predictions_out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1.0")]
    mispredict: Vec<f64>,
    #[arg(long, default_value = "8x40")]
    sessions: String,
}

#[derive(Args)]
struct FaultArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated modes; defaults to shai,dynamic.
    #[arg(long, value_delimiter = ',')]
    mode: Vec<String>,
    /// Only these scenarios (F1 to F6).
    #[arg(long, value_delimiter = ',')]
    fault: Vec<String>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "text")]
    format: String,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_owned(), source }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn seed(flag: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| CliError::Usage(format!("{SEED_ENV}=`{v}` is not a seed"))),
        Err(_) => Ok(flag),
    }
}

fn modes(names: &[String], default: &[Mode]) -> Result<Vec<Mode>> {
    if names.is_empty() {
        return Ok(default.to_vec());
    }
    let mut out = BTreeSet::new();
    for n in names {
        if n == "all" {
            out.extend(Mode::ALL);
        } else {
            out.insert(n.parse::<Mode>().map_err(|e| CliError::Usage(e.to_string()))?);
        }
    }
    Ok(out.into_iter().collect())
}

fn check_format(f: &str) -> Result<()> {
    match f {
        "csv" | "text" => Ok(()),
        _ => Err(CliError::Usage(format!("unknown format `{f}` (expected csv or text)"))),
    }
}

fn load_predictions(path: Option<&Path>) -> Result<BTreeSet<(TaskId, Region)>> {
    match path {
        Some(p) => Ok(parse_predictions(&read(p)?)?),
        None => Ok(BTreeSet::new()),
    }
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::parse(&read(path)?).map_err(|source| CliError::Manifest { path: path.to_owned(), source })
}

/// Metadata directory clock, 0 when the file is absent.
fn read_clock(dir: &Path) -> Result<i64> {
    let path = dir.join("clock");
    if !path.exists() {
        return Ok(0);
    }
    let text = read(&path)?;
    text.trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("{}: `{}` is not a clock value", path.display(), text.trim())))
}

struct Loaded {
    corpus: Corpus,
    cfg: RunConfig,
    ov: Overrides,
}

fn load(c: &Common, default_modes: &[Mode]) -> Result<Loaded> {
    check_format(&c.format)?;
    let defaults = TickCosts::default();
    let cfg = RunConfig {
        modes: modes(&c.mode, default_modes)?,
        seed: seed(c.seed)?,
        ticks: TickCosts {
            rm_entry: c.tick_rm.unwrap_or(defaults.rm_entry),
            lwc_reset: c.tick_lwc.unwrap_or(defaults.lwc_reset),
            exec_reset: c.tick_exec.unwrap_or(defaults.exec_reset),
        },
        patch_slowpath: c.patch_slowpath,
        parallel: c.parallel.is_some_and(|n| n > 1),
        oa_threads: c.parallel,
        ..RunConfig::default()
    };
    let ov = Overrides {
        manifest: c.manifest.as_deref().map(load_manifest).transpose()?,
        oa: c.oa.as_deref().map(load_oa).transpose()?,
        predictions: load_predictions(c.predictions.as_deref())?,
    };
    Ok(Loaded { corpus: Corpus::load_dir(&c.corpus)?, cfg, ov })
}

fn gen(a: GenArgs) -> Result<()> {
    let spec =
        CorpusSpec { users: a.users, docs: a.docs, regions: a.regions, seed: seed(a.seed)?, ..CorpusSpec::default() };
    let corpus = Corpus::generate(&spec)?;
    corpus.write_dir(&a.out)?;
    let sample =
        workload(&corpus, &WorkloadSpec { session_len: 8, sessions: 20, seed: spec.seed, ..WorkloadSpec::default() });
    write(&a.out.join("sessions.txt"), &render_sessions(&sample))?;
    eprintln!(
        "wrote {} users, {} documents, {} regions to {}",
        corpus.users.len(),
        corpus.docs.len(),
        corpus.regions.len(),
        a.out.display()
    );
    Ok(())
}

fn oa(a: OaArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let policies = parse_policy_file(&read(&a.policies)?)
        .map_err(|source| CliError::Policy { path: a.policies.clone(), source })?;
    let meta = load_metadata(&a.metadata, read_clock(&a.metadata)?)?;
    let opts = OaOptions {
        active_only: a.active_only,
        threads: a.parallel,
        predictions: load_predictions(a.predictions.as_deref())?,
    };
    let (out, stats) = run_oa(&manifest, &policies, &meta, &opts)?;
    persist_oa(&out, &a.out)?;
    eprintln!("{stats}");
    Ok(())
}

fn run(a: RunArgs) -> Result<bool> {
    let l = load(&a.common, &Mode::ALL)?;
    let mut cfg = l.cfg;
    cfg.mispredict = a.mispredict;
    if !a.sessions.is_empty() {
        cfg.points = a.sessions.iter().map(|s| parse_point(s)).collect::<std::result::Result<_, _>>()?;
    }
    if let Some(script) = &a.script {
        return run_script(&l.corpus, &cfg, &l.ov, script, &a.common);
    }
    let outcome = run_with(&l.corpus, &cfg, &l.ov)?;
    let text = if a.common.format == "csv" { outcome.report.to_csv() } else { outcome.report.to_text() };
    emit(a.common.out.as_deref(), &text)?;
    if let Some(dir) = &a.log_dir {
        for (mode, log) in &outcome.logs {
            write(&dir.join(format!("{mode}.csv")), log)?;
        }
    }
    if let Some(p) = &a.predictions_out {
        write(p, &render_predictions(&outcome.predictions))?;
    }
    if outcome.leaks > 0 {
        eprintln!("{} leaking flows detected", outcome.leaks);
    }
    Ok(true)
}

const SCRIPT_HEADER: &str =
    "mode,session,user,region,queries,delivered,interceptions,slowpath_interceptions,denials,rm_ticks,reset_ticks";

fn run_script(corpus: &Corpus, cfg: &RunConfig, ov: &Overrides, path: &Path, c: &Common) -> Result<bool> {
    let scripts = parse_sessions(&read(path)?).map_err(|source| CliError::Script { path: path.to_owned(), source })?;
    let manifest = ov.manifest.as_ref().unwrap_or(&corpus.manifest);
    let mut out = format!("{SCRIPT_HEADER}\n");
    for &mode in &cfg.modes {
        let sc = SystemConfig {
            ticks: cfg.ticks,
            patch_slowpath: cfg.patch_slowpath,
            threads: cfg.oa_threads,
            predictions: ov.predictions.clone(),
            ..SystemConfig::new(mode)
        };
        let oa = if mode == Mode::Shai { ov.oa.clone() } else { None };
        let mut sys = System::build(corpus, manifest, oa, sc)?;
        for s in &scripts {
            let st = sys.run_session(s)?;
            let _ = writeln!(
                out,
                "{mode},{},{},{},{},{},{},{},{},{},{}",
                st.session,
                s.user,
                s.region,
                st.queries,
                st.delivered,
                st.interceptions,
                st.slowpath_interceptions,
                st.denials,
                st.rm_ticks,
                st.reset_ticks
            );
        }
    }
    emit(c.out.as_deref(), &out)?;
    Ok(true)
}

fn sweep(a: SweepArgs) -> Result<bool> {
    let l = load(&a.common, &[Mode::Dynamic, Mode::Shai])?;
    let point = parse_point(&a.sessions)?;
    let report = sweep_with(&l.corpus, &l.cfg, &l.ov, &a.mispredict, point)?;
    let text = if a.common.format == "csv" { report.to_csv() } else { report.to_text() };
    emit(a.common.out.as_deref(), &text)?;
    Ok(true)
}

fn faults(a: FaultArgs) -> Result<bool> {
    let modes = modes(&a.mode, &[Mode::Dynamic, Mode::Shai])?;
    let wanted: Vec<Fault> = if a.fault.is_empty() {
        Fault::ALL.to_vec()
    } else {
        a.fault.iter().map(|f| f.parse::<Fault>().map_err(|e| CliError::Usage(e.to_string()))).collect::<Result<_>>()?
    };
    let corpus = Corpus::load_dir(&a.corpus)?;
    let mut all_blocked = true;
    for mode in modes {
        let mut sys = System::new(&corpus, SystemConfig::new(mode))?;
        for &f in &wanted {
            let r = inject(&mut sys, &corpus, f)?;
            all_blocked &= r.blocked();
            println!("{r}");
        }
    }
    Ok(all_blocked)
}

fn report(a: ReportArgs) -> Result<()> {
    check_format(&a.format)?;
    let text = read(&a.input)?;
    let r = MetricsReport::parse_csv(&text)?;
    print!("{}", if a.format == "csv" { r.to_csv() } else { r.to_text() });
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Gen(a) => gen(a).map(|_| true),
        Cmd::Oa(a) => oa(a).map(|_| true),
        Cmd::Run(a) => run(a),
        Cmd::Sweep(a) => sweep(a),
        Cmd::Faults(a) => faults(a),
        Cmd::Report(a) => report(a).map(|_| true),
    };
    match r {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("shai-sim: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_lists() {
        assert_eq!(modes(&[], &[Mode::Shai]).unwrap(), vec![Mode::Shai]);
        assert_eq!(modes(&["all".into()], &[]).unwrap(), Mode::ALL.to_vec());
        assert_eq!(modes(&["shai".into(), "dynamic".into()], &[]).unwrap(), vec![Mode::Dynamic, Mode::Shai]);
        assert!(matches!(modes(&["fast".into()], &[]), Err(CliError::Usage(_))));
    }
}
