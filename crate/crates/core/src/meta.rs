//! Policy-relevant metadata: class policies, named lists and the clock.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use crate::model::{ClassId, ListId};
use crate::policy::{Lists, Policy};

/// A metadata list such as a friends list or a regional blacklist.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MetaList {
    pub entries: BTreeSet<String>,
    pub last_updated: i64,
}

impl MetaList {
    pub fn contains(&self, entry: &str) -> bool {
        self.entries.contains(entry)
    }
}

/// A snapshot of the metadata. Cloning is cheap enough for tests and the
/// analyzer; the monitors mutate their own copy through [`MetaChange`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetadataView {
    policies: BTreeMap<ClassId, Arc<Policy>>,
    lists: BTreeMap<ListId, MetaList>,
    clock: i64,
}

/// One mutation of the authoritative metadata.
#[derive(Debug, Clone, PartialEq)]
pub enum MetaChange {
    PolicySet { class: ClassId, policy: Arc<Policy> },
    ListAdd { list: ListId, entry: String },
    ListRemove { list: ListId, entry: String },
    Clock(i64),
}

impl fmt::Display for MetaChange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetaChange::PolicySet { class, policy } => write!(f, "policy-set {class} {}", policy.class_id()),
            MetaChange::ListAdd { list, entry } => write!(f, "list-add {list} {entry}"),
            MetaChange::ListRemove { list, entry } => write!(f, "list-remove {list} {entry}"),
            MetaChange::Clock(t) => write!(f, "clock {t}"),
        }
    }
}

impl MetadataView {
    pub fn new(clock: i64) -> MetadataView {
        MetadataView { clock: clock.max(0), ..MetadataView::default() }
    }

    pub fn clock(&self) -> i64 {
        self.clock
    }

    pub fn set_clock(&mut self, clock: i64) {
        self.clock = clock.max(0);
    }

    pub fn policy(&self, class: &ClassId) -> Option<&Arc<Policy>> {
        self.policies.get(class)
    }

    pub fn policies(&self) -> impl Iterator<Item = (&ClassId, &Arc<Policy>)> {
        self.policies.iter()
    }

    pub fn set_policy(&mut self, class: ClassId, policy: Arc<Policy>) {
        self.policies.insert(class, policy);
    }

    pub fn list(&self, id: &ListId) -> Option<&MetaList> {
        self.lists.get(id)
    }

    pub fn lists(&self) -> impl Iterator<Item = (&ListId, &MetaList)> {
        self.lists.iter()
    }

    /// Creates the list if needed and replaces its entries.
    pub fn set_list(&mut self, id: ListId, entries: impl IntoIterator<Item = String>) {
        let clock = self.clock;
        self.lists.insert(id, MetaList { entries: entries.into_iter().collect(), last_updated: clock });
    }

    /// Applies a change. Returns false if it was a no-op.
    pub fn apply(&mut self, change: &MetaChange) -> bool {
        let clock = self.clock;
        match change {
            MetaChange::PolicySet { class, policy } => {
                let old = self.policies.insert(class.clone(), policy.clone());
                old.map(|p| p.class_id()) != Some(policy.class_id())
            }
            MetaChange::ListAdd { list, entry } => {
                let l = self.lists.entry(list.clone()).or_default();
                l.last_updated = clock;
                l.entries.insert(entry.clone())
            }
            MetaChange::ListRemove { list, entry } => match self.lists.get_mut(list) {
                Some(l) => {
                    l.last_updated = clock;
                    l.entries.remove(entry)
                }
                None => false,
            },
            MetaChange::Clock(t) => {
                let changed = self.clock != *t;
                self.set_clock(*t);
                changed
            }
        }
    }
}

impl Lists for MetadataView {
    fn list_contains(&self, list: &ListId, entry: &str) -> Option<bool> {
        self.lists.get(list).map(|l| l.contains(entry))
    }
}
