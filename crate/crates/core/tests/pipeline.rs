use std::collections::BTreeMap;

use shai_core::model::{ConduitId, Principal};
use shai_core::monitor::{install_pipes, Denial, InterceptKind, Mode, SessionMonitor};
use shai_core::pipeline::corpus::{worker_instance, Corpus, CorpusSpec, DocKind};
use shai_core::pipeline::engine::QueryMsg;
use shai_core::pipeline::faults::{run_all, Fault};
use shai_core::pipeline::provenance::detect;
use shai_core::pipeline::session::{away_region, random_traces, workload, SessionOp, SessionScript, WorkloadSpec};
use shai_core::pipeline::system::{System, SystemConfig};
use shai_core::policy::{eval_rule, Facts, SessionContext};

fn corpus() -> Corpus {
    Corpus::generate(&CorpusSpec { users: 24, docs: 600, regions: 3, ..CorpusSpec::default() }).unwrap()
}

fn system(c: &Corpus, mode: Mode) -> System {
    System::new(c, SystemConfig::new(mode)).unwrap()
}

fn hot_session(c: &Corpus, user: usize, len: usize) -> SessionScript {
    let u = &c.users[user];
    let words: Vec<String> = c.frequent_words(2).to_vec();
    SessionScript { user: u.id.clone(), region: u.home.clone(), ops: vec![SessionOp::Query(words); len] }
}

#[test]
fn proportions_and_symmetry() {
    let c = Corpus::generate(&CorpusSpec::default()).unwrap();
    let mut by_kind = [0usize; 3];
    for d in &c.docs {
        match d.kind {
            DocKind::Public | DocKind::Censored(_) => by_kind[0] += 1,
            DocKind::Private(_) => by_kind[1] += 1,
            DocKind::Friends(_) | DocKind::Fof(_) => by_kind[2] += 1,
        }
    }
    assert_eq!(by_kind, [2500, 1500, 1000]);
    let censored = c.docs.iter().filter(|d| matches!(d.kind, DocKind::Censored(_))).count();
    assert_eq!(censored, 55);

    // full pairwise scan of the friend lists
    let friends = |u: &Principal| c.meta.list(&format!("{u}.friends").into()).unwrap().entries.clone();
    for a in &c.users {
        let fa = friends(&a.id);
        assert_eq!(fa.len(), 50);
        assert!(!fa.contains(a.id.as_str()));
        for b in &c.users {
            assert_eq!(fa.contains(b.id.as_str()), friends(&b.id).contains(a.id.as_str()));
        }
    }
}

#[test]
fn corpus_directory_round_trip() {
    let c = corpus();
    let dir = tempfile::tempdir().unwrap();
    c.write_dir(dir.path()).unwrap();
    let back = Corpus::load_dir(dir.path()).unwrap();
    assert_eq!(back.docs, c.docs);
    assert_eq!(back.users, c.users);
    assert_eq!(back.regions, c.regions);
    assert_eq!(back.manifest, c.manifest);
    assert_eq!(back.policies.serialize(), c.policies.serialize());
    assert_eq!(back.profiles, c.profiles);
    assert_eq!(back.vocabulary, c.vocabulary);
    assert_eq!(back.meta.lists().count(), c.meta.lists().count());
}

#[test]
fn indexer_costs() {
    let c = corpus();
    let shai = system(&c, Mode::Shai);
    let dynamic = system(&c, Mode::Dynamic);
    // registration plus one interception per created shard
    assert_eq!(shai.index_stats.interceptions, 1 + shai.index_stats.shards);
    assert!(dynamic.index_stats.interceptions > shai.index_stats.interceptions);
    assert_eq!(system(&c, Mode::Baseline).index_stats.interceptions, 0);

    let empty = Corpus::generate(&CorpusSpec { users: 4, docs: 0, ..CorpusSpec::default() }).unwrap();
    let s = system(&empty, Mode::Shai);
    assert_eq!(s.index_stats.postings, 0);
    assert!(s.index().is_empty());
}

#[test]
fn search_matches_semantic_filter() {
    let c = corpus();
    let sys = system(&c, Mode::Shai);
    let words: Vec<String> = c.frequent_words(3)[1..].to_vec();
    for u in c.users.iter().take(6) {
        let q = QueryMsg { user: u.id.clone(), region: u.home.clone(), words: words.clone() };
        let got = sys.search(&q);
        // oracle: brute-force scan over every document
        let mut expect: Vec<(usize, &ConduitId)> = c
            .docs
            .iter()
            .filter(|d| {
                let p = c.policies.get(d.kind.class().as_str()).unwrap();
                eval_rule(p.read(), &Facts::new(u.id.as_str(), u.home.as_str(), c.meta.clock(), &c.meta)).unwrap()
            })
            .map(|d| {
                let toks: Vec<&str> = d.text.split(|ch: char| !ch.is_ascii_alphanumeric()).collect();
                (words.iter().filter(|w| toks.contains(&w.as_str())).count(), &d.id)
            })
            .filter(|(n, _)| *n > 0)
            .collect();
        expect.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)));
        let expect: Vec<ConduitId> = expect.into_iter().take(10).map(|(_, d)| d.clone()).collect();
        assert_eq!(got, expect);
    }
}

#[test]
fn four_interceptions_per_predicted_session() {
    let c = corpus();
    let mut sys = system(&c, Mode::Shai);
    for (i, len) in [0, 1, 8, 32].into_iter().enumerate() {
        let s = sys.run_session(&hot_session(&c, i, len)).unwrap();
        assert_eq!(s.interceptions, 4, "length {len}");
        assert_eq!(s.denials, 0);
        assert_eq!(s.delivered, 10 * len);
    }
}

#[test]
fn dynamic_cost_grows_with_queries() {
    let c = corpus();
    let mut sys = system(&c, Mode::Dynamic);
    for len in [0, 1, 4] {
        let s = sys.run_session(&hot_session(&c, 2, len)).unwrap();
        assert_eq!(s.interceptions, 3 + len * (3 + 2 * 10), "length {len}");
    }
    let mut base = system(&c, Mode::Baseline);
    assert_eq!(base.run_session(&hot_session(&c, 2, 4)).unwrap().interceptions, 0);
}

#[test]
fn mispredicted_session_takes_slow_paths_for_region_classes() {
    let c = corpus();
    let mut sys = system(&c, Mode::Shai);
    let mut s = hot_session(&c, 3, 2);
    s.region = away_region(&c, &s.region);
    let q = QueryMsg { user: s.user.clone(), region: s.region.clone(), words: c.frequent_words(2).to_vec() };
    // region-conditioned classes: every public or censored result
    let region_docs = sys
        .search(&q)
        .iter()
        .filter(|d| matches!(DocKind::of_conduit(d.as_str()), Some(DocKind::Public | DocKind::Censored(_))))
        .count();
    let stats = sys.run_session(&s).unwrap();
    // one slow-path receive per region-conditioned result, in each query
    assert_eq!(stats.interceptions, 4 + s.queries() * region_docs);
    assert_eq!(stats.denials, 0);
    let shai = sys.shai().unwrap();
    assert!(shai.predictions().contains(&(format!("worker.{}", s.user).into(), s.region.clone())));
}

#[test]
fn predicted_instance_restores_the_budget() {
    let c = corpus();
    let mut s = hot_session(&c, 3, 2);
    s.region = away_region(&c, &s.region);
    let mut config = SystemConfig::new(Mode::Shai);
    config.predictions.insert((format!("worker.{}", s.user).into(), s.region.clone()));
    let mut sys = System::new(&c, config).unwrap();
    assert_eq!(sys.run_session(&s).unwrap().interceptions, 4);
}

#[test]
fn faults_blocked_in_enforcing_modes() {
    let c = corpus();
    for mode in [Mode::Shai, Mode::Dynamic] {
        let mut sys = system(&c, mode);
        for r in run_all(&mut sys, &c).unwrap() {
            assert!(r.blocked(), "{r}");
        }
        assert!(detect(&sys.sandbox, &sys.meta, &sys.audience, &sys.regions).is_empty());
    }
    let mut base = system(&c, Mode::Baseline);
    let reports = run_all(&mut base, &c).unwrap();
    let leaked: Vec<Fault> = reports.iter().filter(|r| !r.blocked()).map(|r| r.fault).collect();
    // the sandbox itself refuses data on fd-only pipes
    assert!(!leaked.contains(&Fault::DataOnFdPipe));
    assert_eq!(leaked.len(), 5);
}

#[test]
fn reregistration_reports_open_write_leak() {
    let c = corpus();
    let mut sys = system(&c, Mode::Shai);
    let r = shai_core::pipeline::faults::inject(&mut sys, &c, Fault::ReregisterWithOpenWrite).unwrap();
    assert_eq!(r.denial, Some(shai_core::monitor::Denial::OpenWriteLeak));
}

fn decisions(sys: &System) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for r in &sys.sandbox.records {
        let key = format!("{:?} {} {:?} {} {}", r.session, r.task, r.op, r.conduit, r.allowed);
        *m.entry(key).or_default() += 1;
    }
    m
}

#[test]
fn modes_agree_on_random_traces() {
    let c = corpus();
    let traces = random_traces(&c, 60, 6, 11);
    let mut shai = system(&c, Mode::Shai);
    let mut dynamic = system(&c, Mode::Dynamic);
    for t in &traces {
        shai.run_session(t).unwrap();
        dynamic.run_session(t).unwrap();
    }
    assert_eq!(decisions(&shai), decisions(&dynamic));
    assert!(shai.sandbox.records.iter().any(|r| !r.allowed));
    for sys in [&shai, &dynamic] {
        assert!(detect(&sys.sandbox, &sys.meta, &sys.audience, &sys.regions).is_empty());
    }
}

#[test]
fn buggy_engine_is_contained() {
    let c = corpus();
    for mode in [Mode::Shai, Mode::Dynamic] {
        let mut config = SystemConfig::new(mode);
        config.buggy_engine = true;
        let mut sys = System::new(&c, config).unwrap();
        for s in workload(&c, &WorkloadSpec { sessions: 10, session_len: 3, ..WorkloadSpec::default() }) {
            sys.run_session(&s).unwrap();
        }
        assert!(sys.sandbox.counters.denials > 0);
        assert!(detect(&sys.sandbox, &sys.meta, &sys.audience, &sys.regions).is_empty());
        assert!(sys.log().count(InterceptKind::SlowPathOpen) > 0);
    }
}

#[test]
fn identical_runs_are_deterministic() {
    let c = corpus();
    let scripts =
        workload(&c, &WorkloadSpec { sessions: 8, session_len: 2, mispredict: 0.5, ..WorkloadSpec::default() });
    let run = || {
        let mut sys = system(&c, Mode::Shai);
        let stats: Vec<_> = scripts.iter().map(|s| sys.run_session(s).unwrap()).collect();
        (stats, sys.log().to_csv())
    };
    assert_eq!(run(), run());
}

#[test]
fn session_refused_for_wrong_principal() {
    let c = corpus();
    for mode in [Mode::Shai, Mode::Dynamic] {
        let mut sys = system(&c, mode);
        let (owner, other) = (&c.users[0], &c.users[1]);
        let worker = sys.sandbox.spawn("worker");
        sys.sandbox.set_session(worker, Some(99));
        let pipes = install_pipes(&mut sys.sandbox.store, sys.engine, 99);
        let inst = worker_instance(&owner.id);
        sys.monitor.register(&mut sys.sandbox, &sys.meta, worker, &inst, Some(&pipes)).unwrap();
        sys.monitor.accept(&mut sys.sandbox, &sys.meta, worker, 99).unwrap();
        let cred = SessionContext::new(other.id.as_str(), other.home.as_str(), 0);
        let r = sys.monitor.authenticate(&mut sys.sandbox, &sys.meta, worker, &cred);
        assert_eq!(r, Err(Denial::SessionRefused));
        // only the two pipe ends remain; the connection handle is gone
        assert_eq!(sys.sandbox.handle_count(worker), 2);
    }
}
