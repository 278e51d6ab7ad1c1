//! Pure-dynamic baseline monitor.
//!
//! Every task carries a taint that grows as it reads. Opens for reading are
//! only logged and folded into the taint at the next write check; every
//! write, creation and descriptor send is checked against the folded taint.
//! Tasks serving an authenticated session additionally have their reads
//! checked against their own connection as they happen.

use std::collections::BTreeMap;

use super::{
    bind_connection, conn_id, grant_pipes, open_connection, release, write_check, Denial, HookCx, InterceptKind,
    InterceptionLog, Mode, Monitor, PipeHandles, Revalidation, SessionMonitor, SessionPipes, TickCosts, Verdict,
};
use crate::analyzer::Instance;
use crate::meta::{MetaChange, MetadataView};
use crate::model::{AccessMode, ConduitId, Principal, Region, Rights, TaskHandle, TaskId};
use crate::policy::{SessionContext, Taint, TaintComponent};
use crate::restrict::{is_as_restr_with_declass, Target, Writer};
use crate::sandbox::{Conduit, ConduitStore, Handle, Sandbox};

#[derive(Debug, Clone, Default)]
struct DynTask {
    user: Option<Principal>,
    home: Option<Region>,
    taint: Taint,
    /// Reads not yet folded into the taint.
    open_log: Vec<ConduitId>,
    conn: Option<ConduitId>,
    session: Option<SessionContext>,
    pipes: Option<SessionPipes>,
}

impl DynTask {
    fn writer(&self, descriptor_only: bool) -> Writer {
        Writer {
            principal: self
                .session
                .as_ref()
                .map(|s| s.principal.clone())
                .or_else(|| self.user.clone())
                .unwrap_or_else(|| Principal::from("~anonymous")),
            region: self.session.as_ref().map(|s| s.region.clone()).or_else(|| self.home.clone()),
            descriptor_only,
        }
    }

    /// Conjoins every logged read into the taint. Conduits whose policy
    /// cannot be resolved fail the fold.
    fn fold(&mut self, store: &ConduitStore, meta: &MetadataView) -> Result<(), Denial> {
        for id in self.open_log.drain(..) {
            let c = store.get(&id).ok_or_else(|| Denial::NoSuchConduit(id.clone()))?;
            let policy = c.resolve_policy(meta).ok_or(Denial::PolicyMissing)?;
            self.taint.add(TaintComponent { source: c.class().cloned(), policy });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct DynamicMonitor {
    users: BTreeMap<TaskId, (Principal, Option<Region>)>,
    tasks: BTreeMap<TaskHandle, DynTask>,
    log: InterceptionLog,
    ticks: TickCosts,
}

impl DynamicMonitor {
    /// `registry` only supplies the user and home region each task runs as.
    pub fn new(registry: impl IntoIterator<Item = Instance>, ticks: TickCosts) -> DynamicMonitor {
        DynamicMonitor {
            users: registry.into_iter().map(|i| (i.id, (i.user, i.region))).collect(),
            ticks,
            ..DynamicMonitor::default()
        }
    }

    /// The task's taint with pending reads folded in.
    pub fn taint(&mut self, store: &ConduitStore, meta: &MetadataView, task: TaskHandle) -> Option<&Taint> {
        let t = self.tasks.get_mut(&task)?;
        t.fold(store, meta).ok()?;
        Some(&t.taint)
    }

    pub fn pending_reads(&self, task: TaskHandle) -> usize {
        self.tasks.get(&task).map_or(0, |t| t.open_log.len())
    }

    fn intercept(&mut self, session: Option<u64>, kind: InterceptKind, task: &str, conduit: &str, allowed: bool) {
        self.log.record(&self.ticks, session, kind, task, conduit, allowed);
    }

    fn read(&mut self, cx: &HookCx<'_>, task: TaskHandle, c: &Conduit) -> Verdict {
        let t = self.tasks.entry(task).or_default();
        let bound = t.session.is_some() && t.conn.as_ref() != Some(&c.id);
        if !bound {
            t.open_log.push(c.id.clone());
            return Verdict::logged();
        }
        let conn = t.conn.clone().expect("bound tasks have a connection");
        let decision = (|| {
            let policy = c.resolve_policy(cx.meta).ok_or(Denial::PolicyMissing)?;
            let conn_policy =
                cx.store.get(&conn).and_then(|c| c.resolve_policy(cx.meta)).ok_or(Denial::PolicyMissing)?;
            let mut component = Taint::empty();
            component.add(TaintComponent { source: c.class().cloned(), policy });
            if is_as_restr_with_declass(&component, &Target::new(None, &conn_policy), cx.meta).okay {
                Ok(())
            } else {
                Err(Denial::ReadNotImplied)
            }
        })();
        if decision.is_ok() {
            t.open_log.push(c.id.clone());
        }
        self.intercept(cx.session, InterceptKind::SlowPathOpen, cx.label, c.id.as_str(), decision.is_ok());
        Verdict::slow(decision)
    }

    fn check_write(&mut self, cx: &HookCx<'_>, task: TaskHandle, c: &Conduit, descriptors: bool) -> Verdict {
        let t = self.tasks.entry(task).or_default();
        let decision = (|| {
            t.fold(cx.store, cx.meta)?;
            let policy = c.resolve_policy(cx.meta).ok_or(Denial::PolicyMissing)?;
            let target = Target::new(c.class(), &policy);
            write_check(&t.taint, &t.writer(descriptors || target.is_fd_only()), &target, cx.meta)
        })();
        self.intercept(cx.session, InterceptKind::WriteCheck, cx.label, c.id.as_str(), decision.is_ok());
        Verdict::slow(decision)
    }
}

impl Monitor for DynamicMonitor {
    fn open(&mut self, cx: &HookCx<'_>, task: TaskHandle, c: &Conduit, mode: AccessMode) -> Verdict {
        match mode {
            AccessMode::Read => self.read(cx, task, c),
            AccessMode::Write => self.check_write(cx, task, c, false),
        }
    }

    fn create(&mut self, cx: &HookCx<'_>, task: TaskHandle, c: &Conduit) -> Verdict {
        self.check_write(cx, task, c, false)
    }

    fn write(&mut self, cx: &HookCx<'_>, task: TaskHandle, c: &Conduit) -> Verdict {
        self.check_write(cx, task, c, false)
    }

    fn send_descriptor(&mut self, cx: &HookCx<'_>, task: TaskHandle, pipe: &Conduit) -> Verdict {
        self.check_write(cx, task, pipe, true)
    }

    fn receive(&mut self, cx: &HookCx<'_>, to: TaskHandle, c: &Conduit) -> Verdict {
        let mut v = self.read(cx, to, c);
        if v.decision == Err(Denial::ReadNotImplied) {
            v.decision = Err(Denial::NoReceiverCapability);
        }
        v
    }

    fn closed(&mut self, _: TaskHandle, _: &ConduitId, _: Rights) {}
}

impl SessionMonitor for DynamicMonitor {
    fn mode(&self) -> Mode {
        Mode::Dynamic
    }

    /// Processes start as their user with an empty taint; nothing is
    /// intercepted.
    fn register(
        &mut self,
        sb: &mut Sandbox,
        _: &MetadataView,
        task: TaskHandle,
        instance: &TaskId,
        pipes: Option<&SessionPipes>,
    ) -> Result<Option<PipeHandles>, Denial> {
        let (user, home) =
            self.users.get(instance).cloned().ok_or_else(|| Denial::UnknownInstance(instance.clone()))?;
        let handles = pipes.map(|p| grant_pipes(sb, task, p)).transpose()?;
        let t = self.tasks.entry(task).or_default();
        t.user = Some(user);
        t.home = home;
        if let Some(p) = pipes {
            t.open_log.push(p.results.clone());
            t.pipes = Some(p.clone());
            self.tasks.entry(p.engine).or_default().open_log.push(p.query.clone());
        }
        Ok(handles)
    }

    fn accept(&mut self, sb: &mut Sandbox, _: &MetadataView, task: TaskHandle, session: u64) -> Result<Handle, Denial> {
        let r = open_connection(sb, task, session);
        if r.is_ok() {
            let t = self.tasks.entry(task).or_default();
            t.conn = Some(conn_id(session));
            t.open_log.push(conn_id(session));
        }
        let label = sb.label(task).to_owned();
        self.intercept(Some(session), InterceptKind::Accept, &label, conn_id(session).as_str(), r.is_ok());
        r
    }

    fn authenticate(
        &mut self,
        sb: &mut Sandbox,
        _: &MetadataView,
        task: TaskHandle,
        cred: &SessionContext,
    ) -> Result<(), Denial> {
        let session = sb.session_of(task);
        let r = (|| {
            let conn = conn_id(session.ok_or(Denial::NotRegistered)?);
            bind_connection(sb, &conn, cred);
            let t = self.tasks.get_mut(&task).ok_or(Denial::NotRegistered)?;
            if t.user.as_ref().is_some_and(|u| *u != cred.principal) {
                sb.revoke_handles(task, &conn);
                return Err(Denial::SessionRefused);
            }
            t.session = Some(cred.clone());
            Ok(())
        })();
        let label = sb.label(task).to_owned();
        let conn = session.map_or_else(|| "-".to_owned(), |s| conn_id(s).to_string());
        self.intercept(session, InterceptKind::Authenticate, &label, &conn, r.is_ok());
        r
    }

    /// Sheds the taint by re-executing the task.
    fn reset(&mut self, sb: &mut Sandbox, task: TaskHandle) {
        let (session, label) = (sb.session_of(task), sb.label(task).to_owned());
        self.log.charge_reset(self.ticks.exec_reset);
        self.intercept(session, InterceptKind::Reset, &label, "-", true);
        let pipes = self.tasks.remove(&task).and_then(|t| t.pipes);
        release(sb, task, pipes.as_ref());
    }

    fn on_metadata_change(&mut self, _: &MetadataView, _: &MetaChange) -> Revalidation {
        Vec::new()
    }

    fn log(&self) -> &InterceptionLog {
        &self.log
    }
}
