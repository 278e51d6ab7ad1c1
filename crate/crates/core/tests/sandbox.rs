use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;
use shai_core::meta::MetadataView;
use shai_core::model::{AccessMode, ClassId, ConduitId, Rights, TaskHandle};
use shai_core::monitor::{result_pipe_policy, Denial, HookCx, Monitor, Verdict};
use shai_core::policy::parse_policy;
use shai_core::sandbox::{
    AccessRequest, Boundary, CapabilitySet, Conduit, ConduitKind, ConduitStore, KvFilter, LinkTarget, OpKind, Outcome,
    PolicyRef, Sandbox,
};

/// Refuses every decision it is asked for and counts them. Data writes are
/// only logged.
#[derive(Default)]
struct Refuser {
    calls: usize,
    writes: usize,
}

impl Refuser {
    fn no(&mut self) -> Verdict {
        self.calls += 1;
        Verdict::slow(Err(Denial::ReadNotImplied))
    }
}

impl Monitor for Refuser {
    fn open(&mut self, _: &HookCx<'_>, _: TaskHandle, _: &Conduit, _: AccessMode) -> Verdict {
        self.no()
    }
    fn create(&mut self, _: &HookCx<'_>, _: TaskHandle, _: &Conduit) -> Verdict {
        self.no()
    }
    fn write(&mut self, _: &HookCx<'_>, _: TaskHandle, _: &Conduit) -> Verdict {
        self.writes += 1;
        Verdict::logged()
    }
    fn send_descriptor(&mut self, _: &HookCx<'_>, _: TaskHandle, _: &Conduit) -> Verdict {
        Verdict::logged()
    }
    fn receive(&mut self, _: &HookCx<'_>, _: TaskHandle, _: &Conduit) -> Verdict {
        self.no()
    }
    fn closed(&mut self, _: TaskHandle, _: &ConduitId, _: Rights) {}
}

fn class(i: usize) -> ClassId {
    ClassId::new(format!("c{i}"))
}

fn world(n: usize) -> (Sandbox, MetadataView) {
    let mut meta = MetadataView::new(0);
    let p = Arc::new(parse_policy("read :- true; update :- true; declassify :- propagate;").unwrap());
    let mut store = ConduitStore::default();
    for i in 0..n {
        meta.set_policy(class(i), p.clone());
        store.insert(
            Conduit::new(format!("docs/{i}"), ConduitKind::File, Boundary::Ingress, PolicyRef::Class(class(i)))
                .with_content(format!("doc {i}")),
        );
    }
    (Sandbox::new(store), meta)
}

proptest! {
    /// An open succeeds without the monitor exactly when a capability covers
    /// it; every other open reaches the monitor.
    #[test]
    fn every_uncovered_open_is_mediated(
        granted in proptest::collection::btree_map(0usize..12, 1u8..4, 0..12),
        opens in proptest::collection::vec((0usize..12, any::<bool>()), 1..40),
    ) {
        let (mut sb, meta) = world(12);
        let task = sb.spawn("t");
        let mut caps = CapabilitySet::new();
        for (&i, &bits) in &granted {
            let rights = [Rights::NONE, Rights::READ, Rights::WRITE, Rights::READ_WRITE][bits as usize];
            caps.add_group(&format!("g{i}"), rights);
            caps.link(LinkTarget::Class(class(i)), &format!("g{i}"));
        }
        sb.install(task, caps.clone(), KvFilter::new());
        let mut mon = Refuser::default();
        let mut expected_calls = 0;
        for (i, write) in opens {
            let mode = if write { AccessMode::Write } else { AccessMode::Read };
            let covered = caps.covers(&LinkTarget::Class(class(i)), mode.rights());
            expected_calls += usize::from(!covered);
            let r = sb.access(&mut mon, &meta, task, AccessRequest::Open { conduit: format!("docs/{i}").into(), mode });
            prop_assert_eq!(r.is_ok(), covered);
        }
        prop_assert_eq!(mon.calls, expected_calls);
        prop_assert_eq!(sb.counters.slowpath as usize, expected_calls);
        prop_assert!(sb.records.iter().all(|r| matches!(r.op, OpKind::Open(_))));
    }

    /// Lookups cost at most floor(log2 n) + 1 comparisons.
    #[test]
    fn lookups_are_logarithmic(n in 1usize..600, probes in proptest::collection::vec(0usize..600, 1..20)) {
        let mut caps = CapabilitySet::new();
        for i in 0..n {
            caps.add_group(&format!("g{i:04}"), Rights::READ);
            caps.link(LinkTarget::Class(class(i)), &format!("g{i:04}"));
        }
        let bound = usize::BITS - n.leading_zeros();
        for p in probes {
            let l = caps.lookup(&LinkTarget::Class(class(p)));
            prop_assert!(l.comparisons <= bound, "{} comparisons over {} groups", l.comparisons, n);
            prop_assert_eq!(l.rights == Rights::READ, p < n);
        }
    }

    /// The KV filter matches a key iff some allowed non-empty prefix starts it.
    #[test]
    fn kv_filter_is_prefix_match(
        prefixes in proptest::collection::btree_set("[ab:]{0,4}", 0..6),
        keys in proptest::collection::vec("[ab:]{0,6}", 1..20),
    ) {
        let mut f = KvFilter::new();
        for p in &prefixes {
            f.allow_get(p.clone());
        }
        for k in &keys {
            let oracle = prefixes.iter().any(|p| !p.is_empty() && k.starts_with(p.as_str()));
            prop_assert_eq!(f.allows_get(k), oracle, "{:?} against {:?}", k, prefixes);
        }
    }
}

#[test]
fn fd_only_pipes_refuse_data_without_asking() {
    let (mut sb, meta) = world(1);
    let pipe = Conduit::new(
        "pipe/fd/0",
        ConduitKind::Pipe,
        Boundary::Internal,
        PolicyRef::Inline(Arc::new(result_pipe_policy())),
    );
    sb.store.insert(pipe);
    let (a, b) = (sb.spawn("a"), sb.spawn("b"));
    let mut caps = CapabilitySet::new();
    caps.add_group("all", Rights::READ_WRITE);
    caps.link(LinkTarget::Conduit("pipe/fd/0".into()), "all");
    caps.link(LinkTarget::Class(class(0)), "all");
    sb.install(a, caps, KvFilter::new());
    let mut mon = Refuser::default();

    let Ok(Outcome::Opened(p)) =
        sb.access(&mut mon, &meta, a, AccessRequest::Open { conduit: "pipe/fd/0".into(), mode: AccessMode::Write })
    else {
        panic!("pipe open is covered");
    };
    let r = sb.access(&mut mon, &meta, a, AccessRequest::Write { handle: p, data: "secret".into() });
    assert_eq!(r, Err(Denial::FdOnlyData));
    assert_eq!(sb.counters.blocked_fd_data, 1);

    // a descriptor goes through, but the receiver holds no capability
    let Ok(Outcome::Opened(fd)) =
        sb.access(&mut mon, &meta, a, AccessRequest::Open { conduit: "docs/0".into(), mode: AccessMode::Read })
    else {
        panic!("doc open is covered");
    };
    let r = sb.access(&mut mon, &meta, a, AccessRequest::SendFd { pipe: p, fd, to: b });
    assert_eq!(r, Err(Denial::ReadNotImplied));
    assert_eq!(mon.calls, 1);
    assert_eq!(sb.handle_count(b), 0);
}

#[test]
fn writes_append_versions_and_track_provenance() {
    let (mut sb, meta) = world(2);
    sb.store.insert(Conduit::new("out", ConduitKind::File, Boundary::Egress, PolicyRef::Class(class(1))));
    let t = sb.spawn("t");
    let mut caps = CapabilitySet::new();
    caps.add_group("rw", Rights::READ_WRITE);
    caps.link(LinkTarget::Class(class(0)), "rw");
    caps.link(LinkTarget::Class(class(1)), "rw");
    sb.install(t, caps, KvFilter::new());
    let mut mon = Refuser::default();
    let Ok(Outcome::Opened(h)) =
        sb.access(&mut mon, &meta, t, AccessRequest::Open { conduit: "docs/0".into(), mode: AccessMode::Read })
    else {
        panic!()
    };
    assert_eq!(sb.access(&mut mon, &meta, t, AccessRequest::Read { handle: h }), Ok(Outcome::Data("doc 0".into())));
    let Ok(Outcome::Opened(w)) =
        sb.access(&mut mon, &meta, t, AccessRequest::Open { conduit: "out".into(), mode: AccessMode::Write })
    else {
        panic!()
    };
    for text in ["one", "two"] {
        sb.access(&mut mon, &meta, t, AccessRequest::Write { handle: w, data: text.into() }).unwrap();
    }
    let out = sb.store.get(&"out".into()).unwrap();
    assert_eq!(out.versions().len(), 2);
    assert_eq!(sb.egress.len(), 2);
    assert_eq!(sb.egress[0].provenance, BTreeSet::from([ConduitId::from("docs/0")]));
    assert_eq!((mon.calls, mon.writes), (0, 2));
    // reading through a write-only handle is refused by the sandbox itself
    assert_eq!(sb.access(&mut mon, &meta, t, AccessRequest::Read { handle: w }), Err(Denial::NotPermitted));
}
