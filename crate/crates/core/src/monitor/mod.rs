//! Reference monitors.
//!
//! The sandbox consults a [`Monitor`] whenever it cannot decide an access on
//! its own. Session lifecycle events (registration, accepting a connection,
//! authentication, reset) go through [`SessionMonitor`]. Three monitors are
//! provided: [`ShaiMonitor`] (capabilities from the offline analysis plus
//! slow-path checks), [`DynamicMonitor`] (runtime taint tracking) and
//! [`Baseline`] (no enforcement).

pub mod dynamic;
pub mod shai;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

pub use dynamic::DynamicMonitor;
pub use shai::{ShaiConfig, ShaiMonitor, Transition, ValidAccessList};

use crate::meta::{MetaChange, MetadataView};
use crate::model::{AccessMode, ConduitId, Rights, TaskHandle, TaskId};
use crate::policy::{parse_rule, DeclassRule, Policy, Rule, SessionContext, Taint};
use crate::restrict::{is_as_restr_with_declass, policy_eval, taint_is_as_restr, Target, Writer};
use crate::sandbox::{Boundary, Conduit, ConduitKind, ConduitStore, Handle, PolicyRef, Sandbox};

/// Why an access was refused.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Denial {
    #[error("bad handle")]
    BadHandle,
    #[error("no such conduit `{0}`")]
    NoSuchConduit(ConduitId),
    #[error("no such task")]
    NoSuchTask,
    #[error("conduit `{0}` already exists")]
    AlreadyExists(ConduitId),
    #[error("handle lacks the required right")]
    NotPermitted,
    #[error("conduit has no policy")]
    PolicyMissing,
    #[error("data write on a descriptor-only pipe")]
    FdOnlyData,
    #[error("read-not-implied")]
    ReadNotImplied,
    #[error("update-rule-failed")]
    UpdateRuleFailed,
    #[error("declass-failed")]
    DeclassFailed,
    #[error("no-receiver-capability")]
    NoReceiverCapability,
    #[error("taint-decrease")]
    TaintDecrease,
    #[error("open-write-leak")]
    OpenWriteLeak,
    #[error("session refused")]
    SessionRefused,
    #[error("unknown task instance `{0}`")]
    UnknownInstance(TaskId),
    #[error("task is not registered")]
    NotRegistered,
}

/// How an access was decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Path {
    /// No monitor involvement.
    Fast,
    /// The monitor recorded the access without deciding it.
    Logged,
    /// The monitor ran a policy check.
    Slow,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub decision: Result<(), Denial>,
    pub path: Path,
    /// Add the conduit to the task's capabilities after allowing.
    pub patch: bool,
}

impl Verdict {
    pub fn fast() -> Verdict {
        Verdict { decision: Ok(()), path: Path::Fast, patch: false }
    }

    pub fn logged() -> Verdict {
        Verdict { decision: Ok(()), path: Path::Logged, patch: false }
    }

    pub fn slow(decision: Result<(), Denial>) -> Verdict {
        Verdict { decision, path: Path::Slow, patch: false }
    }
}

/// What a monitor hook may look at.
pub struct HookCx<'a> {
    pub store: &'a ConduitStore,
    pub meta: &'a MetadataView,
    pub session: Option<u64>,
    pub label: &'a str,
}

/// Per-access hooks, called by the sandbox.
pub trait Monitor {
    /// An open the task's capabilities do not cover.
    fn open(&mut self, cx: &HookCx<'_>, task: TaskHandle, c: &Conduit, mode: AccessMode) -> Verdict;
    /// Creation of a new conduit.
    fn create(&mut self, cx: &HookCx<'_>, task: TaskHandle, c: &Conduit) -> Verdict;
    /// A data write through an open handle.
    fn write(&mut self, cx: &HookCx<'_>, task: TaskHandle, c: &Conduit) -> Verdict;
    /// A descriptor sent over `pipe`.
    fn send_descriptor(&mut self, cx: &HookCx<'_>, task: TaskHandle, pipe: &Conduit) -> Verdict;
    /// A received descriptor the receiver's capabilities do not cover.
    fn receive(&mut self, cx: &HookCx<'_>, to: TaskHandle, c: &Conduit) -> Verdict;
    fn closed(&mut self, task: TaskHandle, conduit: &ConduitId, rights: Rights);
}

/// The pipes between one worker and the search engine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionPipes {
    pub engine: TaskHandle,
    /// Worker to engine: query text.
    pub query: ConduitId,
    /// Engine to worker: result descriptors only.
    pub results: ConduitId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipeHandles {
    pub worker_query: Handle,
    pub worker_results: Handle,
    pub engine_query: Handle,
    pub engine_results: Handle,
}

/// Result of a metadata change as seen by a monitor.
pub type Revalidation = Vec<Transition>;

/// Session lifecycle events.
pub trait SessionMonitor: Monitor {
    fn mode(&self) -> Mode;

    /// Binds `task` to a task instance and hands it the session pipes.
    fn register(
        &mut self,
        sb: &mut Sandbox,
        meta: &MetadataView,
        task: TaskHandle,
        instance: &TaskId,
        pipes: Option<&SessionPipes>,
    ) -> Result<Option<PipeHandles>, Denial>;

    /// Creates the session's client connection and returns the worker's handle.
    fn accept(
        &mut self,
        sb: &mut Sandbox,
        meta: &MetadataView,
        task: TaskHandle,
        session: u64,
    ) -> Result<Handle, Denial>;

    fn authenticate(
        &mut self,
        sb: &mut Sandbox,
        meta: &MetadataView,
        task: TaskHandle,
        cred: &SessionContext,
    ) -> Result<(), Denial>;

    /// Returns the task to a clean state.
    fn reset(&mut self, sb: &mut Sandbox, task: TaskHandle);

    /// Called after `change` has been applied to `meta`.
    fn on_metadata_change(&mut self, meta: &MetadataView, change: &MetaChange) -> Revalidation;

    fn log(&self) -> &InterceptionLog;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mode {
    Baseline,
    Dynamic,
    Shai,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Baseline, Mode::Dynamic, Mode::Shai];
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Dynamic => "dynamic",
            Mode::Shai => "shai",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown mode `{0}` (expected baseline, dynamic or shai)")]
pub struct BadMode(pub String);

impl FromStr for Mode {
    type Err = BadMode;

    fn from_str(s: &str) -> Result<Mode, BadMode> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "dynamic" => Ok(Mode::Dynamic),
            "shai" => Ok(Mode::Shai),
            _ => Err(BadMode(s.to_owned())),
        }
    }
}

/// Kinds of control transfer into the monitor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InterceptKind {
    Register,
    Accept,
    Authenticate,
    Reset,
    SlowPathOpen,
    WriteCheck,
}

impl InterceptKind {
    pub const ALL: [InterceptKind; 6] = [
        InterceptKind::Register,
        InterceptKind::Accept,
        InterceptKind::Authenticate,
        InterceptKind::Reset,
        InterceptKind::SlowPathOpen,
        InterceptKind::WriteCheck,
    ];
}

impl fmt::Display for InterceptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InterceptKind::Register => "register",
            InterceptKind::Accept => "accept",
            InterceptKind::Authenticate => "authenticate",
            InterceptKind::Reset => "reset",
            InterceptKind::SlowPathOpen => "slow-path-open",
            InterceptKind::WriteCheck => "write-check",
        })
    }
}

/// Modeled costs, in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TickCosts {
    /// One entry into the monitor.
    pub rm_entry: u64,
    /// Resetting a light-weight context.
    pub lwc_reset: u64,
    /// Re-executing a process.
    pub exec_reset: u64,
}

impl Default for TickCosts {
    fn default() -> TickCosts {
        TickCosts { rm_entry: 1, lwc_reset: 2, exec_reset: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interception {
    pub session: Option<u64>,
    pub kind: InterceptKind,
    pub task: String,
    pub conduit: String,
    pub allowed: bool,
    /// Cumulative modeled ticks after this entry.
    pub tick: u64,
}

/// Every control transfer into a monitor, in order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InterceptionLog {
    entries: Vec<Interception>,
    rm_ticks: u64,
    reset_ticks: u64,
}

impl InterceptionLog {
    pub const CSV_HEADER: &'static str = "session_id,kind,task,conduit,decision,tick";

    pub fn record(
        &mut self,
        ticks: &TickCosts,
        session: Option<u64>,
        kind: InterceptKind,
        task: &str,
        conduit: &str,
        allowed: bool,
    ) {
        self.rm_ticks += ticks.rm_entry;
        let tick = self.rm_ticks + self.reset_ticks;
        self.entries.push(Interception {
            session,
            kind,
            task: task.to_owned(),
            conduit: conduit.to_owned(),
            allowed,
            tick,
        });
    }

    pub fn charge_reset(&mut self, ticks: u64) {
        self.reset_ticks += ticks;
    }

    pub fn entries(&self) -> &[Interception] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, kind: InterceptKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).count()
    }

    pub fn for_session(&self, session: u64) -> impl Iterator<Item = &Interception> {
        self.entries.iter().filter(move |e| e.session == Some(session))
    }

    pub fn rm_ticks(&self) -> u64 {
        self.rm_ticks
    }

    pub fn reset_ticks(&self) -> u64 {
        self.reset_ticks
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for e in &self.entries {
            let session = e.session.map_or_else(|| "-".to_owned(), |s| s.to_string());
            let decision = if e.allowed { "allow" } else { "deny" };
            out.push_str(&format!("{session},{},{},{},{decision},{}\n", e.kind, e.task, e.conduit, e.tick));
        }
        out
    }
}

/// Runtime read check: the taint must be at least as restrictive as the
/// conduit's read rule.
pub fn read_check(taint: &Taint, policy: &Policy, meta: &MetadataView) -> Result<(), Denial> {
    if taint_is_as_restr(taint, policy.read(), meta).okay {
        Ok(())
    } else {
        Err(Denial::ReadNotImplied)
    }
}

/// Runtime write check: declassification from the taint into the target,
/// then the target's update rule.
pub fn write_check(taint: &Taint, writer: &Writer, target: &Target<'_>, meta: &MetadataView) -> Result<(), Denial> {
    if !is_as_restr_with_declass(taint, target, meta).okay {
        return Err(Denial::DeclassFailed);
    }
    if !policy_eval(target.policy.update(), writer, meta).okay {
        return Err(Denial::UpdateRuleFailed);
    }
    Ok(())
}

/// The connection conduit of a session.
pub fn conn_id(session: u64) -> ConduitId {
    ConduitId::new(format!("conn/{session}"))
}

/// Policy of a connection before authentication: nothing may be read from it.
fn unauthenticated() -> Policy {
    Policy::new(Rule::falsity(), Rule::truth(), DeclassRule::propagate())
}

/// Policy of a connection authenticated as `cred`.
pub fn conn_policy(cred: &SessionContext) -> Policy {
    let read = parse_rule(&format!("key({}) & region({})", cred.principal, cred.region))
        .expect("identifiers form a valid rule");
    Policy::new(read, Rule::truth(), DeclassRule::propagate())
}

/// Creates the session's connection and hands the worker a read-write handle.
pub(crate) fn open_connection(sb: &mut Sandbox, task: TaskHandle, session: u64) -> Result<Handle, Denial> {
    let id = conn_id(session);
    if sb.store.contains(&id) {
        return Err(Denial::AlreadyExists(id));
    }
    let c = Conduit::new(
        id.clone(),
        ConduitKind::Connection,
        Boundary::Both,
        PolicyRef::Inline(Arc::new(unauthenticated())),
    );
    sb.store.insert(c);
    sb.set_session(task, Some(session));
    sb.grant_handle(task, id, Rights::READ_WRITE).ok_or(Denial::NoSuchTask)
}

/// Binds a connection to its authenticated principal and region.
pub(crate) fn bind_connection(sb: &mut Sandbox, conn: &ConduitId, cred: &SessionContext) {
    if let Some(c) = sb.store.get_mut(conn) {
        c.policy = PolicyRef::Inline(Arc::new(conn_policy(cred)));
        c.session = Some(cred.clone());
    }
}

/// Hands out both ends of the session pipes.
pub(crate) fn grant_pipes(sb: &mut Sandbox, worker: TaskHandle, pipes: &SessionPipes) -> Result<PipeHandles, Denial> {
    for id in [&pipes.query, &pipes.results] {
        if !sb.store.contains(id) {
            return Err(Denial::NoSuchConduit(id.clone()));
        }
    }
    let mut grant = |t, id: &ConduitId, r| sb.grant_handle(t, id.clone(), r).ok_or(Denial::NoSuchTask);
    Ok(PipeHandles {
        worker_query: grant(worker, &pipes.query, Rights::WRITE)?,
        worker_results: grant(worker, &pipes.results, Rights::READ)?,
        engine_query: grant(pipes.engine, &pipes.query, Rights::READ)?,
        engine_results: grant(pipes.engine, &pipes.results, Rights::WRITE)?,
    })
}

/// Wipes the worker and closes the engine's ends of its pipes.
pub(crate) fn release(sb: &mut Sandbox, task: TaskHandle, pipes: Option<&SessionPipes>) {
    sb.wipe(task);
    if let Some(p) = pipes {
        sb.revoke_handles(p.engine, &p.query);
        sb.revoke_handles(p.engine, &p.results);
    }
}

/// Policy of the query pipe: nothing can be read from it except by fully
/// tainted tasks, and the content may only leave as descriptors.
pub fn query_pipe_policy() -> Policy {
    Policy::new(
        Rule::falsity(),
        Rule::truth(),
        DeclassRule::propagate().with_escape(vec![crate::policy::Atom::FdOnly], Rule::truth()).expect("valid escape"),
    )
}

/// Policy of the result pipe: public, descriptors only.
pub fn result_pipe_policy() -> Policy {
    Policy::new(Rule::truth(), Rule::fd_only(), DeclassRule::propagate())
}

/// Adds a session's pipes to the store.
pub fn install_pipes(store: &mut ConduitStore, engine: TaskHandle, session: u64) -> SessionPipes {
    let query = ConduitId::new(format!("pipe/q/{session}"));
    let results = ConduitId::new(format!("pipe/fd/{session}"));
    store.insert(Conduit::new(
        query.clone(),
        ConduitKind::Pipe,
        Boundary::Internal,
        PolicyRef::Inline(Arc::new(query_pipe_policy())),
    ));
    store.insert(Conduit::new(
        results.clone(),
        ConduitKind::Pipe,
        Boundary::Internal,
        PolicyRef::Inline(Arc::new(result_pipe_policy())),
    ));
    SessionPipes { engine, query, results }
}

/// No enforcement: every access is allowed and nothing is intercepted.
#[derive(Debug, Clone, Default)]
pub struct Baseline {
    log: InterceptionLog,
    pipes: std::collections::BTreeMap<TaskHandle, SessionPipes>,
}

impl Baseline {
    pub fn new() -> Baseline {
        Baseline::default()
    }
}

impl Monitor for Baseline {
    fn open(&mut self, _: &HookCx<'_>, _: TaskHandle, _: &Conduit, _: AccessMode) -> Verdict {
        Verdict::fast()
    }

    fn create(&mut self, _: &HookCx<'_>, _: TaskHandle, _: &Conduit) -> Verdict {
        Verdict::fast()
    }

    fn write(&mut self, _: &HookCx<'_>, _: TaskHandle, _: &Conduit) -> Verdict {
        Verdict::fast()
    }

    fn send_descriptor(&mut self, _: &HookCx<'_>, _: TaskHandle, _: &Conduit) -> Verdict {
        Verdict::fast()
    }

    fn receive(&mut self, _: &HookCx<'_>, _: TaskHandle, _: &Conduit) -> Verdict {
        Verdict::fast()
    }

    fn closed(&mut self, _: TaskHandle, _: &ConduitId, _: Rights) {}
}

impl SessionMonitor for Baseline {
    fn mode(&self) -> Mode {
        Mode::Baseline
    }

    fn register(
        &mut self,
        sb: &mut Sandbox,
        _: &MetadataView,
        task: TaskHandle,
        _: &TaskId,
        pipes: Option<&SessionPipes>,
    ) -> Result<Option<PipeHandles>, Denial> {
        let Some(p) = pipes else { return Ok(None) };
        self.pipes.insert(task, p.clone());
        grant_pipes(sb, task, p).map(Some)
    }

    fn accept(&mut self, sb: &mut Sandbox, _: &MetadataView, task: TaskHandle, session: u64) -> Result<Handle, Denial> {
        open_connection(sb, task, session)
    }

    fn authenticate(
        &mut self,
        sb: &mut Sandbox,
        _: &MetadataView,
        task: TaskHandle,
        cred: &SessionContext,
    ) -> Result<(), Denial> {
        let session = sb.session_of(task).ok_or(Denial::NotRegistered)?;
        bind_connection(sb, &conn_id(session), cred);
        Ok(())
    }

    fn reset(&mut self, sb: &mut Sandbox, task: TaskHandle) {
        release(sb, task, self.pipes.remove(&task).as_ref());
    }

    fn on_metadata_change(&mut self, _: &MetadataView, _: &MetaChange) -> Revalidation {
        Vec::new()
    }

    fn log(&self) -> &InterceptionLog {
        &self.log
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_csv_and_ticks() {
        let ticks = TickCosts::default();
        let mut log = InterceptionLog::default();
        assert_eq!(log.to_csv(), "session_id,kind,task,conduit,decision,tick\n");
        log.record(&ticks, Some(3), InterceptKind::Register, "t0", "-", true);
        log.charge_reset(ticks.lwc_reset);
        log.record(&ticks, None, InterceptKind::WriteCheck, "t1", "docs/x", false);
        assert_eq!(log.rm_ticks(), 2);
        assert_eq!(log.reset_ticks(), 2);
        assert_eq!(log.count(InterceptKind::Register), 1);
        assert_eq!(log.for_session(3).count(), 1);
        assert!(log.to_csv().ends_with("3,register,t0,-,allow,1\n-,write-check,t1,docs/x,deny,4\n"));
    }

    #[test]
    fn modes_parse() {
        for m in Mode::ALL {
            assert_eq!(m.to_string().parse::<Mode>(), Ok(m));
        }
        assert!("thoth".parse::<Mode>().is_err());
    }

    #[test]
    fn conn_policy_binds_key_and_region() {
        let p = conn_policy(&SessionContext::new("u001", "r1", 0));
        assert_eq!(p.read().to_string(), "key(u001) & region(r1)");
    }
}
