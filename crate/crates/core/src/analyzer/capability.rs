//! Compilation of certified accesses into capability blueprints.
//!
//! A group stands for one link directory: a single capability that opens
//! every member class. Classes land in the same group when they share the
//! store, the rights and the kinds of conditions they depend on. Each member
//! keeps its own conditions, so the monitor can leave an individual member
//! out of a grant when its conditions stop holding.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::{CertifiedAccess, Manifest, OaOutput};
use crate::model::{ClassId, Region, Rights, TaskId};
use crate::restrict::{Conds, StateCondition};

/// Where a class's conduits live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StoreKind {
    Files,
    Kv,
}

impl StoreKind {
    /// Conduits under `kv/` are key-value tuples; everything else is a file.
    pub fn of_glob(members: &str) -> StoreKind {
        if members.starts_with("kv/") {
            StoreKind::Kv
        } else {
            StoreKind::Files
        }
    }
}

impl fmt::Display for StoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StoreKind::Files => "files",
            StoreKind::Kv => "kv",
        })
    }
}

/// One class inside a group.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct GroupMember {
    pub class: ClassId,
    pub conds: Conds,
    pub regions: BTreeSet<Region>,
}

impl GroupMember {
    pub fn is_region_dependent(&self) -> bool {
        !self.regions.is_empty()
    }

    /// True if the member may be granted to a session in `region`.
    pub fn usable_in(&self, region: &Region) -> bool {
        self.regions.iter().all(|r| r == region)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSpec {
    /// `files/r/inc`, `kv/r/static`, ...
    pub id: String,
    pub store: StoreKind,
    pub rights: Rights,
    /// Sorted by class.
    pub members: Vec<GroupMember>,
}

/// A task's compiled capabilities, groups sorted by id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Blueprint {
    pub task: TaskId,
    pub groups: Vec<GroupSpec>,
}

impl Blueprint {
    /// Every (class, rights) pair the blueprint grants.
    pub fn grants(&self) -> BTreeMap<&ClassId, Rights> {
        let mut out = BTreeMap::new();
        for g in &self.groups {
            for m in &g.members {
                out.insert(&m.class, g.rights);
            }
        }
        out
    }
}

fn signature(conds: &Conds, regions: &BTreeSet<Region>) -> String {
    let inc = conds.iter().any(|c| matches!(c, StateCondition::ListIncludes(..)));
    let exc = conds.iter().any(|c| matches!(c, StateCondition::ListExcludes(..)));
    let kinds: Vec<&str> = [(inc, "inc"), (exc, "exc"), (!regions.is_empty(), "reg")]
        .into_iter()
        .filter_map(|(on, name)| on.then_some(name))
        .collect();
    if kinds.is_empty() {
        "static".to_owned()
    } else {
        kinds.join("+")
    }
}

/// Compiles one blueprint per task appearing in `out`.
pub fn compile_capabilities(out: &OaOutput, manifest: &Manifest) -> BTreeMap<TaskId, Blueprint> {
    // (task, class) -> merged rights, conds and regions over both modes.
    let mut merged: BTreeMap<(&TaskId, &ClassId), (Rights, Conds, BTreeSet<Region>)> = BTreeMap::new();
    for CertifiedAccess { mode, task, class, conds, regions } in &out.certified {
        let e = merged.entry((task, class)).or_default();
        e.0 = e.0.union(mode.rights());
        e.1.extend(conds.iter().cloned());
        e.2.extend(regions.iter().cloned());
    }

    let mut groups: BTreeMap<&TaskId, BTreeMap<String, GroupSpec>> = BTreeMap::new();
    for ((task, class), (rights, conds, regions)) in merged {
        let store = manifest.classes.get(class).map_or(StoreKind::Files, |c| StoreKind::of_glob(&c.members));
        let id = format!("{store}/{rights}/{}", signature(&conds, &regions));
        groups
            .entry(task)
            .or_default()
            .entry(id.clone())
            .or_insert_with(|| GroupSpec { id, store, rights, members: Vec::new() })
            .members
            .push(GroupMember { class: class.clone(), conds, regions });
    }

    groups
        .into_iter()
        .map(|(task, gs)| {
            let mut groups: Vec<GroupSpec> = gs.into_values().collect();
            for g in &mut groups {
                g.members.sort();
            }
            (task.clone(), Blueprint { task: task.clone(), groups })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AccessMode, ListId};
    use crate::policy::PolicyHash;

    fn access(mode: AccessMode, class: &str, conds: Conds, region: Option<&str>) -> CertifiedAccess {
        CertifiedAccess {
            mode,
            task: TaskId::from("w"),
            class: ClassId::from(class),
            conds,
            regions: region.into_iter().map(Region::from).collect(),
        }
    }

    #[test]
    fn groups_by_condition_kind() {
        let manifest = Manifest::parse(
            "class a policy=p members=docs/a/*\nclass b policy=p members=docs/b/*\n\
             class c policy=p members=docs/c/*\nclass prof policy=p members=kv/profile:w\n",
        )
        .unwrap();
        let pe = |c: &str| StateCondition::PolicyEquals(ClassId::from(c), PolicyHash::of_text(c));
        let inc = |e: &str| StateCondition::ListIncludes(ListId::from("l"), e.into());
        let out = OaOutput::new(
            vec![
                access(AccessMode::Read, "a", Conds::from([pe("a")]), None),
                access(AccessMode::Read, "b", Conds::from([pe("b"), inc("x")]), None),
                access(AccessMode::Read, "c", Conds::from([pe("c"), inc("y")]), None),
                access(AccessMode::Read, "prof", Conds::from([pe("prof")]), None),
                access(AccessMode::Write, "prof", Conds::from([pe("prof")]), None),
            ],
            0,
        );
        let bp = &compile_capabilities(&out, &manifest)[&TaskId::from("w")];
        let ids: Vec<&str> = bp.groups.iter().map(|g| g.id.as_str()).collect();
        assert_eq!(ids, ["files/r/inc", "files/r/static", "kv/rw/static"]);
        assert_eq!(bp.groups[0].members.len(), 2);
        assert_eq!(bp.grants().len(), 4);
        assert!(compile_capabilities(&OaOutput::default(), &manifest).is_empty());
    }
}
