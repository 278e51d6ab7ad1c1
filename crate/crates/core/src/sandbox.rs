//! Simulated capability sandbox.
//!
//! Every conduit operation of a sandboxed task goes through
//! [`Sandbox::access`]. An access either matches a capability and proceeds
//! without the monitor (the fast path), or is handed to the active
//! [`Monitor`] whose verdict is applied. Descriptor transfers additionally
//! require the receiver to hold a read capability on the transferred conduit,
//! and fd-only pipes refuse data bytes outright.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use crate::meta::MetadataView;
use crate::model::{AccessMode, ClassId, ConduitId, Rights, TaskHandle};
use crate::monitor::{Denial, HookCx, Monitor, Path, Verdict};
use crate::policy::{Policy, SessionContext};
use crate::restrict::Target;

/// What a conduit physically is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConduitKind {
    File,
    Kv,
    Pipe,
    Connection,
}

/// Where a conduit sits relative to the pipeline boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Boundary {
    Ingress,
    Internal,
    Egress,
    /// A client connection: queries come in and results go out.
    Both,
}

impl Boundary {
    pub fn is_ingress(self) -> bool {
        matches!(self, Boundary::Ingress | Boundary::Both)
    }

    pub fn is_egress(self) -> bool {
        matches!(self, Boundary::Egress | Boundary::Both)
    }
}

/// Where a conduit's policy comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyRef {
    /// The class policy in the current metadata.
    Class(ClassId),
    /// A policy fixed at creation, for runtime conduits.
    Inline(Arc<Policy>),
}

/// One immutable content version.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Version {
    pub data: String,
    /// Ingress conduits the content depends on.
    pub provenance: BTreeSet<ConduitId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conduit {
    pub id: ConduitId,
    pub kind: ConduitKind,
    pub boundary: Boundary,
    pub policy: PolicyRef,
    versions: Vec<Version>,
    /// The authenticated session on the far end of a connection.
    pub session: Option<SessionContext>,
}

impl Conduit {
    pub fn new(id: impl Into<ConduitId>, kind: ConduitKind, boundary: Boundary, policy: PolicyRef) -> Conduit {
        Conduit { id: id.into(), kind, boundary, policy, versions: Vec::new(), session: None }
    }

    pub fn with_content(mut self, data: impl Into<String>) -> Conduit {
        let provenance = if self.boundary.is_ingress() { BTreeSet::from([self.id.clone()]) } else { BTreeSet::new() };
        self.versions.push(Version { data: data.into(), provenance });
        self
    }

    pub fn class(&self) -> Option<&ClassId> {
        match &self.policy {
            PolicyRef::Class(c) => Some(c),
            PolicyRef::Inline(_) => None,
        }
    }

    /// Resolves the policy; `None` if the class has no policy (fail closed).
    pub fn resolve_policy(&self, meta: &MetadataView) -> Option<Arc<Policy>> {
        match &self.policy {
            PolicyRef::Class(c) => meta.policy(c).cloned(),
            PolicyRef::Inline(p) => Some(p.clone()),
        }
    }

    pub fn latest(&self) -> Option<&Version> {
        self.versions.last()
    }

    pub fn versions(&self) -> &[Version] {
        &self.versions
    }

    pub fn link_target(&self) -> LinkTarget {
        match &self.policy {
            PolicyRef::Class(c) => LinkTarget::Class(c.clone()),
            PolicyRef::Inline(_) => LinkTarget::Conduit(self.id.clone()),
        }
    }

    /// Writes never modify existing content; each write adds a version.
    fn append(&mut self, v: Version) {
        self.versions.push(v);
    }
}

/// All conduits of a simulation run.
#[derive(Debug, Clone, Default)]
pub struct ConduitStore {
    conduits: BTreeMap<ConduitId, Conduit>,
}

impl ConduitStore {
    pub fn insert(&mut self, c: Conduit) -> Option<Conduit> {
        self.conduits.insert(c.id.clone(), c)
    }

    pub fn get(&self, id: &ConduitId) -> Option<&Conduit> {
        self.conduits.get(id)
    }

    pub fn get_mut(&mut self, id: &ConduitId) -> Option<&mut Conduit> {
        self.conduits.get_mut(id)
    }

    pub fn contains(&self, id: &ConduitId) -> bool {
        self.conduits.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Conduit> {
        self.conduits.values()
    }

    pub fn len(&self) -> usize {
        self.conduits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conduits.is_empty()
    }

    /// Adds content written from outside the pipeline (a client's query).
    pub fn external_write(&mut self, id: &ConduitId, data: impl Into<String>) -> bool {
        match self.conduits.get_mut(id) {
            Some(c) => {
                let provenance = BTreeSet::from([c.id.clone()]);
                c.append(Version { data: data.into(), provenance });
                true
            }
            None => false,
        }
    }
}

/// What a capability link points at: a whole class or a single runtime conduit.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LinkTarget {
    Class(ClassId),
    Conduit(ConduitId),
}

impl fmt::Display for LinkTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinkTarget::Class(c) => write!(f, "class:{c}"),
            LinkTarget::Conduit(c) => write!(f, "conduit:{c}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapGroup {
    pub id: String,
    pub rights: Rights,
}

/// Result of one capability lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lookup {
    pub rights: Rights,
    /// Key comparisons performed by the ordered search.
    pub comparisons: u32,
}

/// A task's capabilities: groups ordered by id, plus the links that place
/// each class or conduit in a group.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CapabilitySet {
    groups: Vec<CapGroup>,
    links: HashMap<LinkTarget, String>,
}

impl CapabilitySet {
    pub fn new() -> CapabilitySet {
        CapabilitySet::default()
    }

    /// Adds a group, or widens its rights if it exists.
    pub fn add_group(&mut self, id: &str, rights: Rights) {
        match self.groups.binary_search_by(|g| g.id.as_str().cmp(id)) {
            Ok(i) => self.groups[i].rights = self.groups[i].rights.union(rights),
            Err(i) => self.groups.insert(i, CapGroup { id: id.to_owned(), rights }),
        }
    }

    /// Places `target` in group `group`, which must exist.
    pub fn link(&mut self, target: LinkTarget, group: &str) {
        debug_assert!(self.groups.iter().any(|g| g.id == group), "link into missing group {group}");
        self.links.insert(target, group.to_owned());
    }

    pub fn unlink(&mut self, target: &LinkTarget) {
        self.links.remove(target);
    }

    pub fn groups(&self) -> &[CapGroup] {
        &self.groups
    }

    pub fn links(&self) -> impl Iterator<Item = (&LinkTarget, &str)> {
        self.links.iter().map(|(t, g)| (t, g.as_str()))
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    /// The rights held on `target`, found by binary search over the groups.
    pub fn lookup(&self, target: &LinkTarget) -> Lookup {
        let Some(group) = self.links.get(target) else {
            return Lookup { rights: Rights::NONE, comparisons: 0 };
        };
        let (mut lo, mut hi, mut comparisons) = (0usize, self.groups.len(), 0u32);
        while lo < hi {
            let mid = (lo + hi) / 2;
            comparisons += 1;
            match self.groups[mid].id.as_str().cmp(group.as_str()) {
                std::cmp::Ordering::Equal => return Lookup { rights: self.groups[mid].rights, comparisons },
                std::cmp::Ordering::Less => lo = mid + 1,
                std::cmp::Ordering::Greater => hi = mid,
            }
        }
        Lookup { rights: Rights::NONE, comparisons }
    }

    pub fn covers(&self, target: &LinkTarget, wanted: Rights) -> bool {
        !wanted.is_empty() && self.lookup(target).rights.covers(wanted)
    }
}

/// Key-value request filter installed on a task's store socket.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvFilter {
    get_prefixes: BTreeSet<String>,
}

impl KvFilter {
    pub fn new() -> KvFilter {
        KvFilter::default()
    }

    pub fn allow_get(&mut self, prefix: impl Into<String>) {
        self.get_prefixes.insert(prefix.into());
    }

    /// True if some allowed prefix is a prefix of `key`.
    pub fn allows_get(&self, key: &str) -> bool {
        !key.is_empty()
            && key
                .char_indices()
                .map(|(i, _)| i)
                .skip(1)
                .chain([key.len()])
                .any(|end| self.get_prefixes.contains(&key[..end]))
    }

    pub fn is_empty(&self) -> bool {
        self.get_prefixes.is_empty()
    }
}

/// The conduit id under which a key-value tuple is stored.
pub fn kv_conduit(key: &str) -> ConduitId {
    ConduitId::new(format!("kv/{key}"))
}

/// An open descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Handle(pub u32);

impl fmt::Display for Handle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "fd{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct HandleEntry {
    conduit: ConduitId,
    rights: Rights,
}

#[derive(Debug, Clone, Default)]
struct TaskState {
    label: String,
    caps: CapabilitySet,
    kv: KvFilter,
    handles: BTreeMap<Handle, HandleEntry>,
    provenance: BTreeSet<ConduitId>,
    session: Option<u64>,
}

/// The only ways a task can touch a conduit.
#[derive(Debug, Clone, PartialEq)]
pub enum AccessRequest {
    Open { conduit: ConduitId, mode: AccessMode },
    Create { conduit: Conduit },
    Read { handle: Handle },
    Write { handle: Handle, data: String },
    SendFd { pipe: Handle, fd: Handle, to: TaskHandle },
    KvGet { key: String },
    Close { handle: Handle },
}

/// Operation kinds, for logs and mediation tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    Open(AccessMode),
    Create,
    Read,
    Write,
    SendFd,
    KvGet,
    Close,
}

impl OpKind {
    pub const ALL: [OpKind; 8] = [
        OpKind::Open(AccessMode::Read),
        OpKind::Open(AccessMode::Write),
        OpKind::Create,
        OpKind::Read,
        OpKind::Write,
        OpKind::SendFd,
        OpKind::KvGet,
        OpKind::Close,
    ];
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpKind::Open(m) => write!(f, "open-{m}"),
            OpKind::Create => f.write_str("create"),
            OpKind::Read => f.write_str("read"),
            OpKind::Write => f.write_str("write"),
            OpKind::SendFd => f.write_str("send-fd"),
            OpKind::KvGet => f.write_str("kv-get"),
            OpKind::Close => f.write_str("close"),
        }
    }
}

impl AccessRequest {
    pub fn kind(&self) -> OpKind {
        match self {
            AccessRequest::Open { mode, .. } => OpKind::Open(*mode),
            AccessRequest::Create { .. } => OpKind::Create,
            AccessRequest::Read { .. } => OpKind::Read,
            AccessRequest::Write { .. } => OpKind::Write,
            AccessRequest::SendFd { .. } => OpKind::SendFd,
            AccessRequest::KvGet { .. } => OpKind::KvGet,
            AccessRequest::Close { .. } => OpKind::Close,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Opened(Handle),
    Data(String),
    Written,
    /// The receiver's new handle.
    Transferred(Handle),
    Closed,
}

/// One decided access, for cross-mode comparisons.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AccessRecord {
    pub session: Option<u64>,
    pub task: String,
    pub op: OpKind,
    pub conduit: ConduitId,
    pub allowed: bool,
}

/// A successful write to an egress conduit, for the leak detector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EgressWrite {
    pub conduit: ConduitId,
    pub provenance: BTreeSet<ConduitId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SandboxCounters {
    /// Accesses served from a capability with no monitor involvement.
    pub fastpath: u64,
    /// Accesses the monitor had to decide.
    pub slowpath: u64,
    /// Accesses the monitor saw but only logged.
    pub logged: u64,
    pub denials: u64,
    /// Data writes refused on fd-only pipes.
    pub blocked_fd_data: u64,
    /// Receiver-capability lookups and the worst comparison count seen.
    pub transfer_lookups: u64,
    pub max_lookup_comparisons: u32,
}

#[derive(Debug, Clone, Default)]
pub struct Sandbox {
    pub store: ConduitStore,
    tasks: BTreeMap<TaskHandle, TaskState>,
    next_task: u32,
    next_handle: u32,
    pub counters: SandboxCounters,
    pub records: Vec<AccessRecord>,
    pub egress: Vec<EgressWrite>,
}

impl Sandbox {
    pub fn new(store: ConduitStore) -> Sandbox {
        Sandbox { store, ..Sandbox::default() }
    }

    pub fn spawn(&mut self, label: &str) -> TaskHandle {
        let h = TaskHandle(self.next_task);
        self.next_task += 1;
        self.tasks.insert(h, TaskState { label: label.to_owned(), ..TaskState::default() });
        h
    }

    pub fn label(&self, task: TaskHandle) -> &str {
        self.tasks.get(&task).map_or("?", |t| t.label.as_str())
    }

    pub fn set_session(&mut self, task: TaskHandle, session: Option<u64>) {
        if let Some(t) = self.tasks.get_mut(&task) {
            t.session = session;
        }
    }

    pub fn session_of(&self, task: TaskHandle) -> Option<u64> {
        self.tasks.get(&task).and_then(|t| t.session)
    }

    pub fn caps(&self, task: TaskHandle) -> Option<&CapabilitySet> {
        self.tasks.get(&task).map(|t| &t.caps)
    }

    pub fn caps_mut(&mut self, task: TaskHandle) -> Option<&mut CapabilitySet> {
        self.tasks.get_mut(&task).map(|t| &mut t.caps)
    }

    pub fn kv_filter(&self, task: TaskHandle) -> Option<&KvFilter> {
        self.tasks.get(&task).map(|t| &t.kv)
    }

    pub fn kv_filter_mut(&mut self, task: TaskHandle) -> Option<&mut KvFilter> {
        self.tasks.get_mut(&task).map(|t| &mut t.kv)
    }

    /// Replaces a task's capabilities and KV filter.
    pub fn install(&mut self, task: TaskHandle, caps: CapabilitySet, kv: KvFilter) {
        if let Some(t) = self.tasks.get_mut(&task) {
            t.caps = caps;
            t.kv = kv;
        }
    }

    pub fn provenance(&self, task: TaskHandle) -> BTreeSet<ConduitId> {
        self.tasks.get(&task).map(|t| t.provenance.clone()).unwrap_or_default()
    }

    /// Conduits the task holds write handles on.
    pub fn write_handles(&self, task: TaskHandle) -> Vec<ConduitId> {
        self.tasks
            .get(&task)
            .map(|t| t.handles.values().filter(|h| h.rights.covers(Rights::WRITE)).map(|h| h.conduit.clone()).collect())
            .unwrap_or_default()
    }

    pub fn handle_count(&self, task: TaskHandle) -> usize {
        self.tasks.get(&task).map_or(0, |t| t.handles.len())
    }

    /// Drops everything the task holds: capabilities, handles and state.
    pub fn wipe(&mut self, task: TaskHandle) {
        if let Some(t) = self.tasks.get_mut(&task) {
            let label = std::mem::take(&mut t.label);
            *t = TaskState { label, ..TaskState::default() };
        }
    }

    /// A handle issued by the monitor itself, outside any task request.
    pub(crate) fn grant_handle(&mut self, task: TaskHandle, conduit: ConduitId, rights: Rights) -> Option<Handle> {
        self.tasks.contains_key(&task).then(|| self.new_handle(task, conduit, rights))
    }

    /// Closes every handle `task` holds on `conduit`.
    pub(crate) fn revoke_handles(&mut self, task: TaskHandle, conduit: &ConduitId) {
        if let Some(t) = self.tasks.get_mut(&task) {
            t.handles.retain(|_, h| &h.conduit != conduit);
        }
    }

    fn new_handle(&mut self, task: TaskHandle, conduit: ConduitId, rights: Rights) -> Handle {
        let h = Handle(self.next_handle);
        self.next_handle += 1;
        if let Some(t) = self.tasks.get_mut(&task) {
            t.handles.insert(h, HandleEntry { conduit, rights });
        }
        h
    }

    fn handle(&self, task: TaskHandle, h: Handle) -> Result<&HandleEntry, Denial> {
        self.tasks.get(&task).and_then(|t| t.handles.get(&h)).ok_or(Denial::BadHandle)
    }

    fn conduit(&self, id: &ConduitId) -> Result<&Conduit, Denial> {
        self.store.get(id).ok_or_else(|| Denial::NoSuchConduit(id.clone()))
    }

    fn cx<'a>(&'a self, meta: &'a MetadataView, task: TaskHandle) -> HookCx<'a> {
        HookCx { store: &self.store, meta, session: self.session_of(task), label: self.label(task) }
    }

    fn apply(&mut self, task: TaskHandle, target: LinkTarget, verdict: &Verdict, rights: Rights) -> Result<(), Denial> {
        match verdict.path {
            Path::Fast => self.counters.fastpath += 1,
            Path::Logged => self.counters.logged += 1,
            Path::Slow => self.counters.slowpath += 1,
        }
        if let Err(d) = &verdict.decision {
            return Err(d.clone());
        }
        if verdict.patch {
            if let Some(caps) = self.caps_mut(task) {
                let group = format!("patched/{rights}");
                caps.add_group(&group, rights);
                caps.link(target, &group);
            }
        }
        Ok(())
    }

    /// The single conduit-access entry point.
    pub fn access(
        &mut self,
        mon: &mut dyn Monitor,
        meta: &MetadataView,
        task: TaskHandle,
        req: AccessRequest,
    ) -> Result<Outcome, Denial> {
        let op = req.kind();
        let (conduit, result) = self.dispatch(mon, meta, task, req);
        if result.is_err() {
            self.counters.denials += 1;
        }
        if !matches!(op, OpKind::Read | OpKind::Close) {
            let session = self.session_of(task);
            let label = self.label(task).to_owned();
            self.records.push(AccessRecord { session, task: label, op, conduit, allowed: result.is_ok() });
        }
        result
    }

    fn dispatch(
        &mut self,
        mon: &mut dyn Monitor,
        meta: &MetadataView,
        task: TaskHandle,
        req: AccessRequest,
    ) -> (ConduitId, Result<Outcome, Denial>) {
        if !self.tasks.contains_key(&task) {
            return (ConduitId::from("?"), Err(Denial::NoSuchTask));
        }
        match req {
            AccessRequest::Open { conduit, mode } => {
                let r = self.open(mon, meta, task, &conduit, mode);
                (conduit, r)
            }
            AccessRequest::Create { conduit } => {
                let id = conduit.id.clone();
                (id, self.create(mon, meta, task, conduit))
            }
            AccessRequest::Read { handle } => match self.handle(task, handle).cloned() {
                Ok(h) => {
                    let r = self.read(task, &h);
                    (h.conduit, r)
                }
                Err(d) => (ConduitId::from("?"), Err(d)),
            },
            AccessRequest::Write { handle, data } => match self.handle(task, handle).cloned() {
                Ok(h) => {
                    let r = self.write(mon, meta, task, &h, data);
                    (h.conduit, r)
                }
                Err(d) => (ConduitId::from("?"), Err(d)),
            },
            AccessRequest::SendFd { pipe, fd, to } => self.send_fd(mon, meta, task, pipe, fd, to),
            AccessRequest::KvGet { key } => {
                let id = kv_conduit(&key);
                let r = self.kv_get(mon, meta, task, &key, &id);
                (id, r)
            }
            AccessRequest::Close { handle } => {
                let entry = self.tasks.get_mut(&task).and_then(|t| t.handles.remove(&handle));
                match entry {
                    Some(h) => {
                        mon.closed(task, &h.conduit, h.rights);
                        (h.conduit, Ok(Outcome::Closed))
                    }
                    None => (ConduitId::from("?"), Err(Denial::BadHandle)),
                }
            }
        }
    }

    fn open(
        &mut self,
        mon: &mut dyn Monitor,
        meta: &MetadataView,
        task: TaskHandle,
        id: &ConduitId,
        mode: AccessMode,
    ) -> Result<Outcome, Denial> {
        let c = self.conduit(id)?;
        let target = c.link_target();
        let covered = self.tasks[&task].caps.covers(&target, mode.rights());
        let verdict = if covered { Verdict::fast() } else { mon.open(&self.cx(meta, task), task, c, mode) };
        self.apply(task, target, &verdict, mode.rights())?;
        Ok(Outcome::Opened(self.new_handle(task, id.clone(), mode.rights())))
    }

    fn create(
        &mut self,
        mon: &mut dyn Monitor,
        meta: &MetadataView,
        task: TaskHandle,
        conduit: Conduit,
    ) -> Result<Outcome, Denial> {
        if self.store.contains(&conduit.id) {
            return Err(Denial::AlreadyExists(conduit.id));
        }
        let verdict = mon.create(&self.cx(meta, task), task, &conduit);
        self.apply(task, conduit.link_target(), &verdict, Rights::WRITE)?;
        let id = conduit.id.clone();
        self.store.insert(conduit);
        Ok(Outcome::Opened(self.new_handle(task, id, Rights::WRITE)))
    }

    fn read(&mut self, task: TaskHandle, h: &HandleEntry) -> Result<Outcome, Denial> {
        if !h.rights.covers(Rights::READ) {
            return Err(Denial::NotPermitted);
        }
        let c = self.conduit(&h.conduit)?;
        let (data, prov) = match c.latest() {
            Some(v) => (v.data.clone(), v.provenance.clone()),
            None => (String::new(), BTreeSet::new()),
        };
        let ingress = c.boundary.is_ingress().then(|| c.id.clone());
        if let Some(t) = self.tasks.get_mut(&task) {
            t.provenance.extend(prov);
            t.provenance.extend(ingress);
        }
        Ok(Outcome::Data(data))
    }

    fn write(
        &mut self,
        mon: &mut dyn Monitor,
        meta: &MetadataView,
        task: TaskHandle,
        h: &HandleEntry,
        data: String,
    ) -> Result<Outcome, Denial> {
        if !h.rights.covers(Rights::WRITE) {
            return Err(Denial::NotPermitted);
        }
        let c = self.conduit(&h.conduit)?;
        let policy = c.resolve_policy(meta).ok_or(Denial::PolicyMissing)?;
        if Target::new(None, &policy).is_fd_only() {
            self.counters.blocked_fd_data += 1;
            return Err(Denial::FdOnlyData);
        }
        let verdict = mon.write(&self.cx(meta, task), task, c);
        self.apply(task, c.link_target(), &verdict, Rights::WRITE)?;
        let provenance = self.provenance(task);
        let c = self.store.get_mut(&h.conduit).expect("checked above");
        if c.boundary.is_egress() {
            self.egress.push(EgressWrite { conduit: c.id.clone(), provenance: provenance.clone() });
        }
        c.append(Version { data, provenance });
        Ok(Outcome::Written)
    }

    fn send_fd(
        &mut self,
        mon: &mut dyn Monitor,
        meta: &MetadataView,
        task: TaskHandle,
        pipe: Handle,
        fd: Handle,
        to: TaskHandle,
    ) -> (ConduitId, Result<Outcome, Denial>) {
        let fd_entry = match self.handle(task, fd) {
            Ok(h) => h.clone(),
            Err(d) => return (ConduitId::from("?"), Err(d)),
        };
        let id = fd_entry.conduit.clone();
        let r = (|| {
            let pipe_entry = self.handle(task, pipe)?.clone();
            if !pipe_entry.rights.covers(Rights::WRITE) {
                return Err(Denial::NotPermitted);
            }
            if !self.tasks.contains_key(&to) {
                return Err(Denial::NoSuchTask);
            }
            let pipe_c = self.conduit(&pipe_entry.conduit)?;
            if pipe_c.kind != ConduitKind::Pipe {
                return Err(Denial::NotPermitted);
            }
            let verdict = mon.send_descriptor(&self.cx(meta, task), task, pipe_c);
            if let Err(d) = verdict.decision {
                self.counters.slowpath += u64::from(verdict.path == Path::Slow);
                return Err(d);
            }
            if verdict.path == Path::Slow {
                self.counters.slowpath += 1;
            }

            let target = self.conduit(&id)?.link_target();
            let lookup = self.tasks[&to].caps.lookup(&target);
            self.counters.transfer_lookups += 1;
            self.counters.max_lookup_comparisons = self.counters.max_lookup_comparisons.max(lookup.comparisons);
            let c = self.conduit(&id)?;
            let verdict = if lookup.rights.covers(Rights::READ) {
                Verdict::fast()
            } else {
                mon.receive(&self.cx(meta, to), to, c)
            };
            self.apply(to, target, &verdict, Rights::READ)?;
            let rights = if fd_entry.rights.covers(Rights::READ) { Rights::READ } else { Rights::NONE };
            Ok(Outcome::Transferred(self.new_handle(to, id.clone(), rights)))
        })();
        (id, r)
    }

    fn kv_get(
        &mut self,
        mon: &mut dyn Monitor,
        meta: &MetadataView,
        task: TaskHandle,
        key: &str,
        id: &ConduitId,
    ) -> Result<Outcome, Denial> {
        let c = self.conduit(id)?;
        let verdict = if self.tasks[&task].kv.allows_get(key) {
            Verdict::fast()
        } else {
            mon.open(&self.cx(meta, task), task, c, AccessMode::Read)
        };
        self.apply(task, c.link_target(), &verdict, Rights::READ)?;
        let h = HandleEntry { conduit: id.clone(), rights: Rights::READ };
        self.read(task, &h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_lookup_is_logarithmic() {
        let mut caps = CapabilitySet::new();
        for i in 0..64 {
            caps.add_group(&format!("g{i:02}"), Rights::READ);
            caps.link(LinkTarget::Class(ClassId::new(format!("c{i}"))), &format!("g{i:02}"));
        }
        for i in 0..64 {
            let l = caps.lookup(&LinkTarget::Class(ClassId::new(format!("c{i}"))));
            assert_eq!(l.rights, Rights::READ);
            assert!(l.comparisons <= 7, "{}", l.comparisons);
        }
        assert_eq!(caps.lookup(&LinkTarget::Class(ClassId::from("nope"))).rights, Rights::NONE);
    }

    #[test]
    fn widening_rights() {
        let mut caps = CapabilitySet::new();
        caps.add_group("g", Rights::READ);
        caps.add_group("g", Rights::WRITE);
        caps.link(LinkTarget::Conduit(ConduitId::from("p")), "g");
        assert!(caps.covers(&LinkTarget::Conduit(ConduitId::from("p")), Rights::READ_WRITE));
        assert!(!caps.covers(&LinkTarget::Conduit(ConduitId::from("p")), Rights::NONE));
    }

    #[test]
    fn kv_prefixes() {
        let mut f = KvFilter::new();
        f.allow_get("profile:alice");
        assert!(f.allows_get("profile:alice"));
        assert!(!f.allows_get("profile:bob"));
        assert!(!f.allows_get("profile:al"));
        assert!(!KvFilter::new().allows_get("x"));
    }
}
