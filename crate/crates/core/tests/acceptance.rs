//! Acceptance criteria 1 to 9, one PASS/FAIL line each.

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shai_core::analyzer::{run_oa, ClassSpec, Manifest, OaOptions, TaskSpec};
use shai_core::bench::{self, RunConfig};
use shai_core::meta::MetadataView;
use shai_core::model::{ClassId, ConduitId, Principal, TaskId};
use shai_core::monitor::{HookCx, Mode, Monitor, SessionMonitor};
use shai_core::pipeline::corpus::{Corpus, CorpusSpec};
use shai_core::pipeline::faults::run_all;
use shai_core::pipeline::provenance::detect;
use shai_core::pipeline::session::{random_traces, SessionScript};
use shai_core::pipeline::system::{System, SystemConfig};
use shai_core::policy::{parse_policy_file, PolicySet};
use shai_core::restrict::is_as_restr;
use shai_core::restrict::oracle::{semantic_implies, Universe};
use shai_core::sandbox::{Boundary, Conduit, ConduitKind, PolicyRef};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sys_e() -> Corpus {
    Corpus::generate(&CorpusSpec::default()).expect("default corpus")
}

fn system(corpus: &Corpus, mode: Mode) -> System {
    System::new(corpus, SystemConfig::new(mode)).expect("system builds")
}

/// Soundness of the restrictiveness kernel against the brute-force oracle.
fn c1() -> Outcome {
    let start = Instant::now();
    let mut g = common::Gen::new(1);
    let (mut okays, mut violations) = (0, Vec::new());
    for _ in 0..10_000 {
        let (r1, r2) = g.pair();
        let sigma = g.meta();
        let res = is_as_restr(&r1, &r2, &sigma);
        if !res.okay {
            continue;
        }
        okays += 1;
        let u = Universe::covering(&[&r1, &r2], sigma.clock());
        match semantic_implies(&r1, &r2, &res.conds, &u) {
            Ok(true) => {}
            other => violations.push(format!("{r1} => {r2}: {other:?}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        violations.is_empty() && okays > 0 && secs < 60.0,
        format!(
            "10000 triples, {okays} okay, {} violations {}",
            violations.len(),
            violations.first().map(String::as_str).unwrap_or("")
        ),
    )
}

/// Every certified access is allowed by the slow path.
fn c2(corpus: &Corpus) -> Outcome {
    let start = Instant::now();
    let mut sys = system(corpus, Mode::Shai);
    let oa = sys.oa.clone().expect("shai runs the analyzer");
    let mut tasks = BTreeMap::new();
    let mut members: BTreeMap<ClassId, ConduitId> = BTreeMap::new();
    for c in sys.sandbox.store.iter() {
        if let Some(class) = c.class() {
            members.entry(class.clone()).or_insert_with(|| c.id.clone());
        }
    }
    let (mut allowed, mut denied) = (0usize, Vec::new());
    for acc in &oa.certified {
        let task = *tasks.entry(acc.task.clone()).or_insert_with(|| {
            let t = sys.sandbox.spawn(&format!("replay.{}", acc.task));
            sys.monitor.register(&mut sys.sandbox, &sys.meta, t, &acc.task, None).expect("registry instance");
            t
        });
        let probe;
        let conduit = match members.get(&acc.class).and_then(|id| sys.sandbox.store.get(id)) {
            Some(c) => c,
            None => {
                let id = format!("probe/{}", acc.class);
                probe = Conduit::new(id, ConduitKind::File, Boundary::Internal, PolicyRef::Class(acc.class.clone()));
                &probe
            }
        };
        let cx = HookCx { store: &sys.sandbox.store, meta: &sys.meta, session: None, label: "replay" };
        let v = sys.monitor.open(&cx, task, conduit, acc.mode);
        match v.decision {
            Ok(()) => allowed += 1,
            Err(d) => denied.push(format!("{} {} {}: {d}", acc.mode, acc.task, acc.class)),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        denied.is_empty() && allowed > 0 && secs < 30.0,
        format!(
            "{allowed}/{} certified accesses allowed {}",
            oa.certified.len(),
            denied.first().map(String::as_str).unwrap_or("")
        ),
    )
}

type Decisions = BTreeMap<String, usize>;

fn decisions(sys: &System) -> Decisions {
    let mut m = BTreeMap::new();
    for r in &sys.sandbox.records {
        *m.entry(format!("{:?} {} {:?} {} {}", r.session, r.task, r.op, r.conduit, r.allowed)).or_default() += 1;
    }
    m
}

fn replay(sys: &mut System, traces: &[SessionScript]) -> usize {
    traces.iter().map(|t| sys.run_session(t).expect("session runs").interceptions).sum()
}

/// Shai and Dynamic decide identically on random traces.
fn c3(corpus: &Corpus, traces: &[SessionScript]) -> (Outcome, Decisions) {
    let mut shai = system(corpus, Mode::Shai);
    let mut dynamic = system(corpus, Mode::Dynamic);
    replay(&mut shai, traces);
    replay(&mut dynamic, traces);
    let (a, b) = (decisions(&shai), decisions(&dynamic));
    let denials = shai.sandbox.records.iter().filter(|r| !r.allowed).count();
    let out = check(
        a == b,
        format!(
            "{} traces, {} accesses ({denials} denied), multisets equal: {}",
            traces.len(),
            shai.sandbox.records.len(),
            a == b
        ),
    );
    (out, a)
}

/// Exactly four interceptions per predicted session at every length.
fn c4(corpus: &Corpus) -> Outcome {
    let cfg = RunConfig {
        modes: vec![Mode::Shai],
        points: vec![(1, 20), (8, 20), (32, 10), (1000, 2)],
        ..RunConfig::default()
    };
    let report = bench::run(corpus, &cfg).map_err(|e| e.to_string())?;
    let mut detail = Vec::new();
    let mut ok = true;
    for r in &report.rows {
        // interceptions/query as an exact fraction total/queries == 4/L
        let exact = r.interceptions_total == 4 * r.sessions as u64
            && r.interceptions_total * r.session_len as u64 == 4 * r.queries() as u64;
        ok &= exact;
        detail.push(format!("L={} {}/{}", r.session_len, r.interceptions_total, r.queries()));
    }
    check(ok, detail.join(", "))
}

/// Interceptions and modeled ticks follow the amortization trend.
fn c5(corpus: &Corpus) -> Outcome {
    let lens = [1, 2, 4, 8, 16, 32];
    let cfg = RunConfig {
        modes: vec![Mode::Dynamic, Mode::Shai],
        points: lens.iter().map(|&l| (l, 20)).collect(),
        ..RunConfig::default()
    };
    let report = bench::run(corpus, &cfg).map_err(|e| e.to_string())?;
    let get = |m, l| report.row(m, l).expect("row");
    let fewer = lens
        .iter()
        .all(|&l| get(Mode::Shai, l).interceptions_per_query < get(Mode::Dynamic, l).interceptions_per_query);
    let shai_ticks: Vec<f64> = lens.iter().map(|&l| get(Mode::Shai, l).overhead_ticks_per_query()).collect();
    let monotone = shai_ticks.windows(2).all(|w| w[1] <= w[0]);
    let dyn_ticks: Vec<f64> = lens.iter().map(|&l| get(Mode::Dynamic, l).rm_ticks_per_query()).collect();
    let mean = dyn_ticks.iter().sum::<f64>() / dyn_ticks.len() as f64;
    let spread = dyn_ticks.iter().map(|t| (t - mean).abs() / mean).fold(0.0, f64::max);
    check(
        fewer && monotone && spread <= 0.10,
        format!(
            "shai<dynamic at all L: {fewer}; shai ticks/query {:?} monotone: {monotone}; dynamic rm ticks/query within {:.1}% of {mean:.2}",
            shai_ticks.iter().map(|t| format!("{t:.3}")).collect::<Vec<_>>(),
            spread * 100.0
        ),
    )
}

/// Slow-path counts grow linearly with the mispredicted share.
fn c6(corpus: &Corpus) -> Outcome {
    let cfg = RunConfig { modes: vec![Mode::Shai, Mode::Dynamic], ..RunConfig::default() };
    let fractions = [0.0, 0.25, 0.5, 0.75, 1.0];
    let report = bench::sweep(corpus, &cfg, &fractions, (8, 40)).map_err(|e| e.to_string())?;
    let fit = report.fit(Mode::Shai);
    let shai_full = report.at(Mode::Shai, 1.0).expect("point").slowpath;
    let dyn_full = report.at(Mode::Dynamic, 1.0).expect("point").slowpath;
    let counts: Vec<u64> = fractions.iter().map(|&f| report.at(Mode::Shai, f).expect("point").slowpath).collect();
    check(
        fit.r2 >= 0.98 && shai_full <= dyn_full,
        format!("shai slow-path {counts:?}, R^2 {:.4}; at 1.0 shai {shai_full} <= dynamic {dyn_full}", fit.r2),
    )
}

/// Every fault is blocked and no run leaks.
fn c7(corpus: &Corpus, traces: &[SessionScript]) -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for mode in [Mode::Shai, Mode::Dynamic] {
        let mut sys = system(corpus, mode);
        replay(&mut sys, traces);
        let scripts = shai_core::pipeline::session::workload(
            corpus,
            &shai_core::pipeline::session::WorkloadSpec {
                sessions: 30,
                session_len: 4,
                mispredict: 0.5,
                ..Default::default()
            },
        );
        replay(&mut sys, &scripts);
        let reports = run_all(&mut sys, corpus).map_err(|e| e.to_string())?;
        let blocked = reports.iter().filter(|r| r.blocked()).count();
        let leaks = detect(&sys.sandbox, &sys.meta, &sys.audience, &sys.regions).len();
        ok &= blocked == reports.len() && leaks == 0;
        lines.push(format!("{mode}: {blocked}/{} blocked, {leaks} leaking flows", reports.len()));
    }
    check(ok, lines.join("; "))
}

fn dedup_checks(n: usize, k: usize, tasks: usize) -> u64 {
    let mut text = String::new();
    for i in 0..k {
        text.push_str(&format!(
            "policy p{i} {{ read :- key(owner{i}) | key(X) & in(group{i}, X); update :- true; declassify :- propagate; }}\n"
        ));
    }
    text.push_str("policy sink { read :- false; update :- true; declassify :- propagate; }\n");
    let policies: PolicySet = parse_policy_file(&text).expect("policies parse");
    let mut m = Manifest::default();
    for t in 0..tasks {
        let id = TaskId::new(format!("t{t}"));
        m.tasks.insert(
            id,
            TaskSpec { user: Principal::new(format!("t{t}")), region: None, taint: vec!["sink".into()], active: true },
        );
    }
    for c in 0..n {
        let class = ClassId::new(format!("c{c:05}"));
        m.classes.insert(class.clone(), ClassSpec::new(&format!("p{}", c % k), &format!("files/c{c:05}")).unwrap());
        for t in 0..tasks {
            let id = TaskId::new(format!("t{t}"));
            m.reads.insert((id.clone(), class.clone()));
            m.writes.insert((id, class.clone()));
        }
    }
    let (_, stats) = run_oa(&m, &policies, &MetadataView::new(0), &OaOptions::default()).expect("oa runs");
    stats.checks
}

/// Analyzer work scales with policy classes, not conduits.
fn c8() -> Outcome {
    let tasks = 4;
    let mut ok = true;
    let mut lines = Vec::new();
    for k in [10, 100] {
        let big = dedup_checks(10_000, k, tasks);
        let small = dedup_checks(1_000, k, tasks);
        let expect = (tasks * k * 2) as f64;
        ok &= (big as f64 / expect) <= 1.1 && (big as f64 / expect) >= 1.0 / 1.1 && big == small;
        lines.push(format!("K={k}: {big} checks at N=10^4, {small} at N=10^3, expected {expect}"));
    }
    check(ok, lines.join("; "))
}

/// Pruning half the manifest's access lines changes no decision.
fn c9(corpus: &Corpus, traces: &[SessionScript], reference: &Decisions) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut pruned = corpus.manifest.clone();
    for set in [&mut pruned.reads, &mut pruned.writes] {
        let mut entries: Vec<_> = set.iter().cloned().collect();
        entries.shuffle(&mut rng);
        let drop = entries.len() / 2;
        for e in &entries[..drop] {
            set.remove(e);
        }
    }
    let mut full = system(corpus, Mode::Shai);
    let mut sys = System::build(corpus, &pruned, None, SystemConfig::new(Mode::Shai)).map_err(|e| e.to_string())?;
    let before = replay(&mut full, traces);
    let after = replay(&mut sys, traces);
    let same = decisions(&sys) == *reference;
    check(same, format!("decisions unchanged: {same}; interceptions {before} with full manifest, {after} pruned"))
}

fn main() -> ExitCode {
    let total = Instant::now();
    let corpus = sys_e();
    let traces = random_traces(&corpus, 1000, 5, 3);
    let mut results: Vec<(u32, Outcome, Duration)> = Vec::new();
    let mut run = |n: u32, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let r = f();
        results.push((n, r, t.elapsed()));
    };
    run(1, &mut c1);
    run(2, &mut || c2(&corpus));
    let mut reference = Decisions::new();
    run(3, &mut || {
        let (r, d) = c3(&corpus, &traces);
        reference = d;
        r
    });
    run(4, &mut || c4(&corpus));
    run(5, &mut || c5(&corpus));
    run(6, &mut || c6(&corpus));
    run(7, &mut || c7(&corpus, &traces));
    run(8, &mut c8);
    run(9, &mut || c9(&corpus, &traces, &reference));

    let mut failed = 0;
    for (n, r, t) in &results {
        let (tag, detail) = match r {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n}: {tag} ({:.1}s) {detail}", t.as_secs_f64());
    }
    println!(
        "{} of {} criteria passed in {:.1}s",
        results.len() - failed,
        results.len(),
        total.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
