//! Benchmark runs, misprediction sweeps and their reports.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::analyzer::{Manifest, OaOutput};
use crate::model::{Region, TaskId};
use crate::monitor::{Mode, TickCosts};
use crate::pipeline::corpus::Corpus;
use crate::pipeline::provenance::detect;
use crate::pipeline::session::{workload, WorkloadSpec};
use crate::pipeline::system::{SessionStats, System, SystemConfig, SystemError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("line {line}: {msg}")]
    Csv { line: usize, msg: String },
}

/// `<len>x<count>`, e.g. `8x100`.
pub fn parse_point(s: &str) -> Result<(usize, usize), BenchError> {
    let bad = || BenchError::Config(format!("expected <length>x<count>, found `{s}`"));
    let (l, c) = s.split_once('x').ok_or_else(bad)?;
    Ok((l.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub modes: Vec<Mode>,
    /// (session length, session count) pairs.
    pub points: Vec<(usize, usize)>,
    pub mispredict: f64,
    pub seed: u64,
    pub ticks: TickCosts,
    pub patch_slowpath: bool,
    /// Run the modes on separate threads.
    pub parallel: bool,
    /// Analyzer worker threads.
    pub oa_threads: Option<usize>,
}

/// Replacements for what the corpus itself provides.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Drives the analysis and the task registry instead of the corpus manifest.
    pub manifest: Option<Manifest>,
    /// A persisted analysis to load instead of analyzing (Shai only).
    pub oa: Option<OaOutput>,
    /// Prediction log from an earlier run.
    pub predictions: BTreeSet<(TaskId, Region)>,
}

/// A run's report plus what the systems observed along the way.
#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    pub report: MetricsReport,
    /// Unpredicted (instance, region) pairs seen by the Shai monitor.
    pub predictions: BTreeSet<(TaskId, Region)>,
    /// Interception log CSV per mode.
    pub logs: Vec<(Mode, String)>,
    /// Leaking flows found by the provenance detector, over all modes.
    pub leaks: usize,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            modes: Mode::ALL.to_vec(),
            points: [1, 2, 4, 8, 16, 32].into_iter().map(|l| (l, 50)).collect(),
            mispredict: 0.0,
            seed: 7,
            ticks: TickCosts::default(),
            patch_slowpath: false,
            parallel: false,
            oa_threads: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if !(0.0..=1.0).contains(&self.mispredict) {
            return Err(BenchError::Config(format!("mispredict fraction {} is outside [0, 1]", self.mispredict)));
        }
        Ok(())
    }

    fn system(&self, mode: Mode, ov: &Overrides) -> SystemConfig {
        SystemConfig {
            ticks: self.ticks,
            patch_slowpath: self.patch_slowpath,
            threads: self.oa_threads,
            predictions: ov.predictions.clone(),
            ..SystemConfig::new(mode)
        }
    }

    fn build(&self, corpus: &Corpus, mode: Mode, ov: &Overrides) -> Result<System, SystemError> {
        let manifest = ov.manifest.as_ref().unwrap_or(&corpus.manifest);
        let oa = if mode == Mode::Shai { ov.oa.clone() } else { None };
        System::build(corpus, manifest, oa, self.system(mode, ov))
    }

    fn workload(&self, len: usize, count: usize, mispredict: f64) -> WorkloadSpec {
        WorkloadSpec { session_len: len, sessions: count, mispredict, seed: self.seed, ..WorkloadSpec::default() }
    }
}

/// One configuration point. Interception and tick counts cover only what is
/// attributed to the measured sessions.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub mode: Mode,
    pub session_len: usize,
    pub sessions: usize,
    pub interceptions_total: u64,
    pub interceptions_per_query: f64,
    pub fastpath_opens: u64,
    pub slowpath_opens: u64,
    pub denials: u64,
    pub reset_ticks: u64,
    pub rm_ticks: u64,
}

impl MetricsRow {
    fn from_stats(mode: Mode, len: usize, stats: &[SessionStats]) -> MetricsRow {
        let sum = |f: fn(&SessionStats) -> u64| stats.iter().map(f).sum::<u64>();
        let total = sum(|s| s.interceptions as u64);
        let queries = (len * stats.len()).max(1);
        MetricsRow {
            mode,
            session_len: len,
            sessions: stats.len(),
            interceptions_total: total,
            interceptions_per_query: total as f64 / queries as f64,
            fastpath_opens: sum(|s| s.fastpath),
            slowpath_opens: sum(|s| s.slowpath),
            denials: sum(|s| s.denials),
            reset_ticks: sum(|s| s.reset_ticks),
            rm_ticks: sum(|s| s.rm_ticks),
        }
    }

    pub fn queries(&self) -> usize {
        (self.session_len * self.sessions).max(1)
    }

    pub fn rm_ticks_per_query(&self) -> f64 {
        self.rm_ticks as f64 / self.queries() as f64
    }

    /// Monitor entries plus resets, per query.
    pub fn overhead_ticks_per_query(&self) -> f64 {
        (self.rm_ticks + self.reset_ticks) as f64 / self.queries() as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "mode,session_len,sessions,interceptions_total,interceptions_per_query,fastpath_opens,slowpath_opens,denials,reset_ticks,rm_ticks";

    pub fn row(&self, mode: Mode, len: usize) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.mode == mode && r.session_len == len)
    }

    /// Rows ordered by mode, then session length.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| a.mode.cmp(&b.mode).then(a.session_len.cmp(&b.session_len)));
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.mode,
                r.session_len,
                r.sessions,
                r.interceptions_total,
                r.interceptions_per_query,
                r.fastpath_opens,
                r.slowpath_opens,
                r.denials,
                r.reset_ticks,
                r.rm_ticks
            );
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<MetricsReport, BenchError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == Self::CSV_HEADER => {}
            _ => return Err(BenchError::Csv { line: 1, msg: "missing or wrong header".into() }),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            let err = |msg: String| BenchError::Csv { line: i + 1, msg };
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 10 {
                return Err(err(format!("expected 10 fields, found {}", f.len())));
            }
            fn num<T: FromStr>(s: &str) -> Result<T, String> {
                s.parse().map_err(|_| format!("bad number `{s}`"))
            }
            let row = (|| {
                Ok::<_, String>(MetricsRow {
                    mode: f[0].parse().map_err(|e: crate::monitor::BadMode| e.to_string())?,
                    session_len: num(f[1])?,
                    sessions: num(f[2])?,
                    interceptions_total: num(f[3])?,
                    interceptions_per_query: num(f[4])?,
                    fastpath_opens: num(f[5])?,
                    slowpath_opens: num(f[6])?,
                    denials: num(f[7])?,
                    reset_ticks: num(f[8])?,
                    rm_ticks: num(f[9])?,
                })
            })()
            .map_err(err)?;
            rows.push(row);
        }
        Ok(MetricsReport { rows })
    }

    /// Plain-text report with the amortization table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<9} {:>6} {:>8} {:>12} {:>11} {:>10} {:>10} {:>8} {:>13}",
            "mode", "len", "sessions", "intercepts", "per query", "fast", "slow", "denials", "ticks/query"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<9} {:>6} {:>8} {:>12} {:>11.4} {:>10} {:>10} {:>8} {:>13.4}",
                r.mode.to_string(),
                r.session_len,
                r.sessions,
                r.interceptions_total,
                r.interceptions_per_query,
                r.fastpath_opens,
                r.slowpath_opens,
                r.denials,
                r.overhead_ticks_per_query()
            );
        }
        let shai: Vec<&MetricsRow> = self.rows.iter().filter(|r| r.mode == Mode::Shai).collect();
        if !shai.is_empty() {
            let _ = writeln!(out, "\namortization (shai): interceptions per query against 4/L");
            for r in shai {
                let expected = if r.session_len == 0 { f64::NAN } else { 4.0 / r.session_len as f64 };
                let _ = writeln!(
                    out,
                    "  L={:<6} measured {:>9.4}  4/L {:>9.4}",
                    r.session_len, r.interceptions_per_query, expected
                );
            }
        }
        out
    }
}

struct ModeRun {
    rows: Vec<MetricsRow>,
    predictions: BTreeSet<(TaskId, Region)>,
    log: String,
    leaks: usize,
}

fn run_mode(corpus: &Corpus, cfg: &RunConfig, ov: &Overrides, mode: Mode) -> Result<ModeRun, BenchError> {
    let mut sys = cfg.build(corpus, mode, ov)?;
    let mut rows = Vec::new();
    for &(len, count) in &cfg.points {
        let scripts = workload(corpus, &cfg.workload(len, count, cfg.mispredict));
        let stats = scripts.iter().map(|s| sys.run_session(s)).collect::<Result<Vec<_>, _>>()?;
        rows.push(MetricsRow::from_stats(mode, len, &stats));
    }
    Ok(ModeRun {
        rows,
        predictions: sys.shai().map(|m| m.predictions().clone()).unwrap_or_default(),
        log: sys.log().to_csv(),
        leaks: detect(&sys.sandbox, &sys.meta, &sys.audience, &sys.regions).len(),
    })
}

/// Runs every (mode, point) combination. Each mode gets its own system.
pub fn run(corpus: &Corpus, cfg: &RunConfig) -> Result<MetricsReport, BenchError> {
    Ok(run_with(corpus, cfg, &Overrides::default())?.report)
}

pub fn run_with(corpus: &Corpus, cfg: &RunConfig, ov: &Overrides) -> Result<RunOutcome, BenchError> {
    cfg.validate()?;
    let per_mode: Vec<Result<ModeRun, BenchError>> = if cfg.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = cfg.modes.iter().map(|&m| s.spawn(move || run_mode(corpus, cfg, ov, m))).collect();
            handles.into_iter().map(|h| h.join().expect("bench thread panicked")).collect()
        })
    } else {
        cfg.modes.iter().map(|&m| run_mode(corpus, cfg, ov, m)).collect()
    };
    let mut out = RunOutcome::default();
    for (run, &mode) in per_mode.into_iter().zip(&cfg.modes) {
        let run = run?;
        out.report.rows.extend(run.rows);
        out.predictions.extend(run.predictions);
        out.logs.push((mode, run.log));
        out.leaks += run.leaks;
    }
    out.report.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub mode: Mode,
    pub mispredict: f64,
    pub sessions: usize,
    pub session_len: usize,
    /// Session-attributed slow-path opens and write checks.
    pub slowpath: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

/// Least-squares fit of `y = slope * x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// 1 when the data has no variance.
    pub r2: f64,
}

pub fn linear_fit(points: &[(f64, f64)]) -> LinearFit {
    let n = points.len() as f64;
    if points.is_empty() {
        return LinearFit { slope: 0.0, intercept: 0.0, r2: 1.0 };
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    let intercept = my - slope * mx;
    let ss_tot: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let ss_res: f64 = points.iter().map(|p| (p.1 - (slope * p.0 + intercept)).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    LinearFit { slope, intercept, r2 }
}

impl SweepReport {
    pub const CSV_HEADER: &'static str = "mode,mispredict,sessions,session_len,slowpath_interceptions";

    pub fn fit(&self, mode: Mode) -> LinearFit {
        let pts: Vec<(f64, f64)> =
            self.rows.iter().filter(|r| r.mode == mode).map(|r| (r.mispredict, r.slowpath as f64)).collect();
        linear_fit(&pts)
    }

    pub fn at(&self, mode: Mode, mispredict: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.mode == mode && r.mispredict == mispredict)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.mode, r.mispredict, r.sessions, r.session_len, r.slowpath);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<9} {:>10} {:>10}\n", "mode", "mispredict", "slow-path");
        for r in &self.rows {
            let _ = writeln!(out, "{:<9} {:>10.2} {:>10}", r.mode.to_string(), r.mispredict, r.slowpath);
        }
        let mut modes: Vec<Mode> = self.rows.iter().map(|r| r.mode).collect();
        modes.dedup();
        for m in modes {
            let f = self.fit(m);
            let _ = writeln!(out, "{m}: slope {:.2}, intercept {:.2}, R^2 {:.4}", f.slope, f.intercept, f.r2);
        }
        out
    }
}

/// Slow-path counts at each mispredict fraction, on the same scripts per
/// fraction for every mode.
pub fn sweep(
    corpus: &Corpus,
    cfg: &RunConfig,
    fractions: &[f64],
    point: (usize, usize),
) -> Result<SweepReport, BenchError> {
    sweep_with(corpus, cfg, &Overrides::default(), fractions, point)
}

pub fn sweep_with(
    corpus: &Corpus,
    cfg: &RunConfig,
    ov: &Overrides,
    fractions: &[f64],
    (len, count): (usize, usize),
) -> Result<SweepReport, BenchError> {
    if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(BenchError::Config(format!("mispredict fraction {f} is outside [0, 1]")));
    }
    let mut report = SweepReport::default();
    for &mode in &cfg.modes {
        let mut sys = cfg.build(corpus, mode, ov)?;
        for &f in fractions {
            let scripts = workload(corpus, &cfg.workload(len, count, f));
            let mut slowpath = 0;
            for s in &scripts {
                slowpath += sys.run_session(s)?.slowpath_interceptions as u64;
            }
            report.rows.push(SweepRow { mode, mispredict: f, sessions: count, session_len: len, slowpath });
        }
    }
    Ok(report)
}
