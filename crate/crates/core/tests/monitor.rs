mod common;

use common::{setup, LISTS, PRINCIPALS};
use proptest::prelude::*;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shai_core::analyzer::{class_view, run_oa, OaOptions};
use shai_core::meta::MetaChange;
use shai_core::model::{AccessMode, ListId, Principal};
use shai_core::monitor::{Denial, Mode, ValidAccessList};
use shai_core::pipeline::corpus::{friends_list, Corpus, CorpusSpec, DocKind};
use shai_core::pipeline::system::{System, SystemConfig};
use shai_core::sandbox::AccessRequest;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    /// Incremental revalidation agrees with recomputing every entry.
    #[test]
    fn revalidation_matches_recompute(seed in any::<u64>(), steps in 1usize..30) {
        let s = setup(seed);
        let (out, _) = run_oa(&s.manifest, &s.policies, &s.meta, &OaOptions::default()).unwrap();
        let mut meta = class_view(&s.manifest, &s.policies, &s.meta).unwrap();
        let mut valid = ValidAccessList::new(&out, &meta);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for _ in 0..steps {
            let list = ListId::from(*LISTS.choose(&mut rng).unwrap());
            let entry = PRINCIPALS.choose(&mut rng).unwrap().to_string();
            let change = if rng.random_bool(0.5) {
                MetaChange::ListAdd { list, entry }
            } else {
                MetaChange::ListRemove { list, entry }
            };
            meta.apply(&change);
            let before: Vec<bool> = out.certified.iter().map(|c| valid.is_valid(c.mode, &c.task, &c.class)).collect();
            let transitions = valid.apply(&change, &meta);
            for (c, was) in out.certified.iter().zip(before) {
                let now = c.valid_under(&meta);
                prop_assert_eq!(valid.is_valid(c.mode, &c.task, &c.class), now);
                let reported = transitions.iter().any(|t| t.task == c.task && t.class == c.class && t.mode == c.mode);
                prop_assert_eq!(reported, was != now);
            }
        }
    }
}

fn corpus() -> Corpus {
    Corpus::generate(&CorpusSpec { users: 16, docs: 400, regions: 2, ..CorpusSpec::default() }).unwrap()
}

/// A friends-only document, its owner and one friend of the owner.
fn friend_doc(c: &Corpus) -> (shai_core::ConduitId, Principal, Principal) {
    for d in &c.docs {
        if let DocKind::Friends(owner) = &d.kind {
            let list = c.meta.list(&friends_list(owner)).unwrap();
            if let Some(f) = list.entries.iter().next() {
                return (d.id.clone(), owner.clone(), Principal::from(f.as_str()));
            }
        }
    }
    panic!("corpus has no friends document");
}

fn read_as(sys: &mut System, c: &Corpus, user: &Principal, doc: &shai_core::ConduitId) -> Result<(), Denial> {
    let home = c.user(user.as_str()).unwrap().home.clone();
    let live = sys.open_session(user, &home).unwrap();
    let r = sys.direct_read(&live, AccessRequest::Open { conduit: doc.clone(), mode: AccessMode::Read });
    sys.close_session(&live);
    r
}

#[test]
fn unfriending_revokes_future_reads() {
    let c = corpus();
    let (doc, owner, friend) = friend_doc(&c);
    for mode in [Mode::Shai, Mode::Dynamic] {
        let mut sys = System::new(&c, SystemConfig::new(mode)).unwrap();
        assert_eq!(read_as(&mut sys, &c, &friend, &doc), Ok(()), "{mode}");
        let t = sys.change_metadata(&MetaChange::ListRemove { list: friends_list(&owner), entry: friend.to_string() });
        if mode == Mode::Shai {
            assert!(t.iter().any(|t| !t.valid && t.task.as_str() == format!("worker.{friend}")));
        }
        assert_eq!(read_as(&mut sys, &c, &friend, &doc), Err(Denial::ReadNotImplied), "{mode}");
        // the owner is unaffected
        assert_eq!(read_as(&mut sys, &c, &owner, &doc), Ok(()), "{mode}");
        sys.change_metadata(&MetaChange::ListAdd { list: friends_list(&owner), entry: friend.to_string() });
        assert_eq!(read_as(&mut sys, &c, &friend, &doc), Ok(()), "{mode}");
    }
}

#[test]
fn friend_read_is_a_fast_path_in_shai() {
    let c = corpus();
    let (doc, _, friend) = friend_doc(&c);
    let mut sys = System::new(&c, SystemConfig::new(Mode::Shai)).unwrap();
    let before = sys.sandbox.counters;
    read_as(&mut sys, &c, &friend, &doc).unwrap();
    let after = sys.sandbox.counters;
    assert_eq!(after.slowpath, before.slowpath);
    assert!(after.fastpath > before.fastpath);
}

#[test]
fn reregistration_cannot_lower_taint() {
    let c = corpus();
    let mut sys = System::new(&c, SystemConfig::new(Mode::Shai)).unwrap();
    let (a, b) = (&c.users[0], &c.users[1]);
    let live = sys.open_session(&a.id, &a.home).unwrap();
    let shai_core::pipeline::system::Rm::Shai(m) = &mut sys.monitor else { unreachable!() };
    // the public frontend instance is strictly less restrictive than a worker
    let r = m.reregister(&mut sys.sandbox, &sys.meta, live.worker, &"frontend".into());
    assert_eq!(r, Err(Denial::TaintDecrease));
    let r = m.reregister(&mut sys.sandbox, &sys.meta, live.worker, &format!("worker.{}", b.id).into());
    assert!(r.is_err());
    sys.close_session(&live);
}
