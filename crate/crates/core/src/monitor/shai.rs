//! The hybrid reference monitor.
//!
//! At registration a task is bound to an analyzed instance and receives the
//! capabilities compiled from that instance's currently valid certified
//! accesses. After that the monitor only runs when the sandbox faults: for
//! accesses outside the capabilities, conduit creation and session events.
//! Certified accesses are revalidated eagerly on every metadata change, but
//! capabilities already handed out are never revoked.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::{
    bind_connection, conn_id, grant_pipes, open_connection, read_check, release, write_check, Denial, HookCx,
    InterceptKind, InterceptionLog, Mode, Monitor, PipeHandles, Revalidation, SessionMonitor, SessionPipes, TickCosts,
    Verdict,
};
use crate::analyzer::{
    compile_capabilities, instances, predicted_instance, Blueprint, CertifiedAccess, ClassSpec, GroupMember, Instance,
    Manifest, OaError, OaOptions, OaOutput, StoreKind,
};
use crate::meta::{MetaChange, MetadataView};
use crate::model::{AccessMode, ClassId, ConduitId, ListId, Principal, Region, Rights, TaskHandle, TaskId};
use crate::policy::{PolicySet, SessionContext, Taint};
use crate::restrict::{is_as_restr_with_declass, taint_is_as_restr, Target, Writer};
use crate::sandbox::{Conduit, Handle, LinkTarget, Sandbox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ShaiConfig {
    /// Add slow-path allows to the task's capabilities.
    pub patch_slowpath: bool,
    pub ticks: TickCosts,
}

/// A certified access changing validity.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Transition {
    pub mode: AccessMode,
    pub task: TaskId,
    pub class: ClassId,
    pub valid: bool,
}

/// The certified accesses together with whether their conditions hold
/// under the current metadata.
#[derive(Debug, Clone, Default)]
pub struct ValidAccessList {
    entries: Vec<CertifiedAccess>,
    valid: Vec<bool>,
    index: HashMap<(AccessMode, TaskId, ClassId), usize>,
    by_list: HashMap<ListId, Vec<usize>>,
    by_class: HashMap<ClassId, Vec<usize>>,
}

impl ValidAccessList {
    pub fn new(oa: &OaOutput, meta: &MetadataView) -> ValidAccessList {
        let mut v = ValidAccessList::default();
        for (i, c) in oa.certified.iter().enumerate() {
            v.index.insert((c.mode, c.task.clone(), c.class.clone()), i);
            for cond in &c.conds {
                if let Some(l) = cond.list() {
                    v.by_list.entry(l.clone()).or_default().push(i);
                }
                if let Some(cl) = cond.class() {
                    v.by_class.entry(cl.clone()).or_default().push(i);
                }
            }
            v.valid.push(c.valid_under(meta));
            v.entries.push(c.clone());
        }
        v
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_valid(&self, mode: AccessMode, task: &TaskId, class: &ClassId) -> bool {
        self.index.get(&(mode, task.clone(), class.clone())).is_some_and(|&i| self.valid[i])
    }

    /// True if every mode in `rights` is certified and valid.
    pub fn covers(&self, task: &TaskId, class: &ClassId, rights: Rights) -> bool {
        [AccessMode::Read, AccessMode::Write]
            .into_iter()
            .filter(|m| rights.covers(m.rights()))
            .all(|m| self.is_valid(m, task, class))
    }

    pub fn valid_entries(&self) -> impl Iterator<Item = &CertifiedAccess> {
        self.entries.iter().zip(&self.valid).filter(|(_, v)| **v).map(|(c, _)| c)
    }

    /// Re-evaluates the entries whose conditions mention what `change`
    /// touched. `meta` must already reflect the change.
    pub fn apply(&mut self, change: &MetaChange, meta: &MetadataView) -> Vec<Transition> {
        let touched = match change {
            MetaChange::ListAdd { list, .. } | MetaChange::ListRemove { list, .. } => self.by_list.get(list),
            MetaChange::PolicySet { class, .. } => self.by_class.get(class),
            MetaChange::Clock(_) => None,
        };
        let mut out = Vec::new();
        for &i in touched.into_iter().flatten() {
            let now = self.entries[i].valid_under(meta);
            if now != self.valid[i] {
                self.valid[i] = now;
                let c = &self.entries[i];
                out.push(Transition { mode: c.mode, task: c.task.clone(), class: c.class.clone(), valid: now });
            }
        }
        out.sort();
        out.dedup();
        out
    }
}

#[derive(Debug, Clone)]
struct Registered {
    instance: TaskId,
    /// `None` for tasks that asked for an unknown instance.
    user: Option<Principal>,
    home: Option<Region>,
    taint: Taint,
    session: Option<SessionContext>,
    pipes: Option<SessionPipes>,
}

impl Registered {
    fn writer(&self, descriptor_only: bool) -> Writer {
        Writer {
            principal: self.user.clone().unwrap_or_else(|| Principal::from("~anonymous")),
            region: self.session.as_ref().map(|s| s.region.clone()).or_else(|| self.home.clone()),
            descriptor_only,
        }
    }
}

pub struct ShaiMonitor {
    registry: BTreeMap<TaskId, Instance>,
    classes: BTreeMap<ClassId, ClassSpec>,
    blueprints: BTreeMap<TaskId, Blueprint>,
    valid: ValidAccessList,
    tasks: BTreeMap<TaskHandle, Registered>,
    predictions: BTreeSet<(TaskId, Region)>,
    log: InterceptionLog,
    config: ShaiConfig,
}

impl ShaiMonitor {
    /// `registry` holds the trusted task instances; `manifest` supplies class
    /// definitions and `oa` the certified accesses.
    pub fn new(
        registry: impl IntoIterator<Item = Instance>,
        manifest: &Manifest,
        oa: &OaOutput,
        meta: &MetadataView,
        config: ShaiConfig,
    ) -> ShaiMonitor {
        ShaiMonitor {
            registry: registry.into_iter().map(|i| (i.id.clone(), i)).collect(),
            classes: manifest.classes.clone(),
            blueprints: compile_capabilities(oa, manifest),
            valid: ValidAccessList::new(oa, meta),
            tasks: BTreeMap::new(),
            predictions: BTreeSet::new(),
            log: InterceptionLog::default(),
            config,
        }
    }

    /// Builds the registry from the manifest's task lines.
    pub fn from_manifest(
        manifest: &Manifest,
        policies: &PolicySet,
        opts: &OaOptions,
        oa: &OaOutput,
        meta: &MetadataView,
        config: ShaiConfig,
    ) -> Result<ShaiMonitor, OaError> {
        let opts = OaOptions { active_only: false, ..opts.clone() };
        Ok(ShaiMonitor::new(instances(manifest, policies, &opts)?, manifest, oa, meta, config))
    }

    pub fn valid(&self) -> &ValidAccessList {
        &self.valid
    }

    /// Unpredicted (instance, region) pairs seen at authentication.
    pub fn predictions(&self) -> &BTreeSet<(TaskId, Region)> {
        &self.predictions
    }

    pub fn taint(&self, task: TaskHandle) -> Option<&Taint> {
        self.tasks.get(&task).map(|r| &r.taint)
    }

    pub fn instance_of(&self, task: TaskHandle) -> Option<&TaskId> {
        self.tasks.get(&task).map(|r| &r.instance)
    }

    pub fn blueprint(&self, instance: &TaskId) -> Option<&Blueprint> {
        self.blueprints.get(instance)
    }

    fn intercept(&mut self, session: Option<u64>, kind: InterceptKind, task: &str, conduit: &str, allowed: bool) {
        self.log.record(&self.config.ticks, session, kind, task, conduit, allowed);
    }

    /// Links the valid members of `instance`'s groups chosen by `pick`.
    fn grant(&self, sb: &mut Sandbox, task: TaskHandle, instance: &TaskId, pick: impl Fn(&GroupMember) -> bool) {
        let Some(bp) = self.blueprints.get(instance) else { return };
        let mut prefixes = Vec::new();
        if let Some(caps) = sb.caps_mut(task) {
            for g in &bp.groups {
                caps.add_group(&g.id, g.rights);
                for m in g.members.iter().filter(|m| pick(m) && self.valid.covers(instance, &m.class, g.rights)) {
                    caps.link(LinkTarget::Class(m.class.clone()), &g.id);
                    if g.store == StoreKind::Kv {
                        if let Some(spec) = self.classes.get(&m.class) {
                            let p = spec.literal_prefix();
                            prefixes.push(p.strip_prefix("kv/").unwrap_or(p).to_owned());
                        }
                    }
                }
            }
        }
        if let Some(kv) = sb.kv_filter_mut(task) {
            for p in prefixes {
                kv.allow_get(p);
            }
        }
    }

    fn validate_pipes(&self, reg: &Registered, pipes: &SessionPipes, cx: &HookCx<'_>) -> Result<(), Denial> {
        let get = |id: &ConduitId| cx.store.get(id).ok_or_else(|| Denial::NoSuchConduit(id.clone()));
        let (q, r) = (get(&pipes.query)?, get(&pipes.results)?);
        let qp = q.resolve_policy(cx.meta).ok_or(Denial::PolicyMissing)?;
        let rp = r.resolve_policy(cx.meta).ok_or(Denial::PolicyMissing)?;
        write_check(&reg.taint, &reg.writer(false), &Target::new(None, &qp), cx.meta)?;
        read_check(&reg.taint, &rp, cx.meta)?;
        let engine = self.tasks.get(&pipes.engine).ok_or(Denial::NotRegistered)?;
        read_check(&engine.taint, &qp, cx.meta)?;
        write_check(&engine.taint, &engine.writer(true), &Target::new(None, &rp), cx.meta)
    }

    fn decide_read(&self, cx: &HookCx<'_>, task: TaskHandle, c: &Conduit) -> Result<(), Denial> {
        let reg = self.tasks.get(&task).ok_or(Denial::NotRegistered)?;
        let policy = c.resolve_policy(cx.meta).ok_or(Denial::PolicyMissing)?;
        read_check(&reg.taint, &policy, cx.meta)
    }

    fn decide_write(&self, cx: &HookCx<'_>, task: TaskHandle, c: &Conduit) -> Result<(), Denial> {
        let reg = self.tasks.get(&task).ok_or(Denial::NotRegistered)?;
        let policy = c.resolve_policy(cx.meta).ok_or(Denial::PolicyMissing)?;
        let target = Target::new(c.class(), &policy);
        write_check(&reg.taint, &reg.writer(target.is_fd_only()), &target, cx.meta)
    }

    fn slow(&mut self, cx: &HookCx<'_>, kind: InterceptKind, c: &Conduit, decision: Result<(), Denial>) -> Verdict {
        self.intercept(cx.session, kind, cx.label, c.id.as_str(), decision.is_ok());
        let patch = self.config.patch_slowpath && decision.is_ok();
        Verdict { patch, ..Verdict::slow(decision) }
    }

    /// Moves a running task to a more restrictive instance.
    pub fn reregister(
        &mut self,
        sb: &mut Sandbox,
        meta: &MetadataView,
        task: TaskHandle,
        instance: &TaskId,
    ) -> Result<(), Denial> {
        let r = self.try_reregister(sb, meta, task, instance);
        let (session, label) = (sb.session_of(task), sb.label(task).to_owned());
        self.intercept(session, InterceptKind::Register, &label, "-", r.is_ok());
        r
    }

    fn try_reregister(
        &mut self,
        sb: &mut Sandbox,
        meta: &MetadataView,
        task: TaskHandle,
        instance: &TaskId,
    ) -> Result<(), Denial> {
        let current = self.tasks.get(&task).ok_or(Denial::NotRegistered)?;
        let next = self.registry.get(instance).ok_or_else(|| Denial::UnknownInstance(instance.clone()))?;
        if current.taint.components().any(|c| !taint_is_as_restr(&next.taint, c.policy.read(), meta).okay) {
            return Err(Denial::TaintDecrease);
        }
        for id in sb.write_handles(task) {
            let c = sb.store.get(&id).ok_or_else(|| Denial::NoSuchConduit(id.clone()))?;
            let policy = c.resolve_policy(meta).ok_or(Denial::PolicyMissing)?;
            if !is_as_restr_with_declass(&next.taint, &Target::new(c.class(), &policy), meta).okay {
                return Err(Denial::OpenWriteLeak);
            }
        }
        let session = current.session.clone();
        let reg = Registered {
            instance: next.id.clone(),
            user: Some(next.user.clone()),
            home: next.region.clone(),
            taint: next.taint.clone(),
            session: session.clone(),
            pipes: current.pipes.clone(),
        };
        sb.install(task, Default::default(), Default::default());
        let region = session.map(|s| s.region);
        self.grant(sb, task, &reg.instance, |m| region.as_ref().map_or(!m.is_region_dependent(), |r| m.usable_in(r)));
        self.tasks.insert(task, reg);
        Ok(())
    }
}

impl Monitor for ShaiMonitor {
    fn open(&mut self, cx: &HookCx<'_>, task: TaskHandle, c: &Conduit, mode: AccessMode) -> Verdict {
        let decision = match mode {
            AccessMode::Read => self.decide_read(cx, task, c),
            AccessMode::Write => self.decide_write(cx, task, c),
        };
        self.slow(cx, InterceptKind::SlowPathOpen, c, decision)
    }

    fn create(&mut self, cx: &HookCx<'_>, task: TaskHandle, c: &Conduit) -> Verdict {
        let decision = self.decide_write(cx, task, c);
        self.slow(cx, InterceptKind::WriteCheck, c, decision)
    }

    /// Write handles were checked when they were opened, and the taint of
    /// a task never changes while it holds them.
    fn write(&mut self, _: &HookCx<'_>, _: TaskHandle, _: &Conduit) -> Verdict {
        Verdict::fast()
    }

    fn send_descriptor(&mut self, _: &HookCx<'_>, _: TaskHandle, _: &Conduit) -> Verdict {
        Verdict::fast()
    }

    fn receive(&mut self, cx: &HookCx<'_>, to: TaskHandle, c: &Conduit) -> Verdict {
        let decision = self.decide_read(cx, to, c).map_err(|d| match d {
            Denial::ReadNotImplied => Denial::NoReceiverCapability,
            d => d,
        });
        self.slow(cx, InterceptKind::SlowPathOpen, c, decision)
    }

    fn closed(&mut self, _: TaskHandle, _: &ConduitId, _: Rights) {}
}

impl SessionMonitor for ShaiMonitor {
    fn mode(&self) -> Mode {
        Mode::Shai
    }

    fn register(
        &mut self,
        sb: &mut Sandbox,
        meta: &MetadataView,
        task: TaskHandle,
        instance: &TaskId,
        pipes: Option<&SessionPipes>,
    ) -> Result<Option<PipeHandles>, Denial> {
        let (session, label) = (sb.session_of(task), sb.label(task).to_owned());
        let r = (|| {
            if self.tasks.contains_key(&task) {
                return Err(Denial::NotPermitted);
            }
            let Some(inst) = self.registry.get(instance) else {
                self.tasks.insert(
                    task,
                    Registered {
                        instance: instance.clone(),
                        user: None,
                        home: None,
                        taint: Taint::empty(),
                        session: None,
                        pipes: None,
                    },
                );
                return Err(Denial::UnknownInstance(instance.clone()));
            };
            let reg = Registered {
                instance: inst.id.clone(),
                user: Some(inst.user.clone()),
                home: inst.region.clone(),
                taint: inst.taint.clone(),
                session: None,
                pipes: pipes.cloned(),
            };
            if let Some(p) = pipes {
                let cx = HookCx { store: &sb.store, meta, session, label: &label };
                self.validate_pipes(&reg, p, &cx)?;
            }
            self.grant(sb, task, &reg.instance, |m| !m.is_region_dependent());
            self.tasks.insert(task, reg);
            pipes.map(|p| grant_pipes(sb, task, p)).transpose()
        })();
        self.intercept(session, InterceptKind::Register, &label, instance.as_str(), r.is_ok());
        r
    }

    fn accept(&mut self, sb: &mut Sandbox, _: &MetadataView, task: TaskHandle, session: u64) -> Result<Handle, Denial> {
        let r = if self.tasks.contains_key(&task) {
            open_connection(sb, task, session)
        } else {
            Err(Denial::NotRegistered)
        };
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
        let label = sb.label(task).to_owned();
        let r = self.try_authenticate(sb, task, session, cred);
        let conn = session.map_or_else(|| "-".to_owned(), |s| conn_id(s).to_string());
        self.intercept(session, InterceptKind::Authenticate, &label, &conn, r.is_ok());
        r
    }

    fn reset(&mut self, sb: &mut Sandbox, task: TaskHandle) {
        let (session, label) = (sb.session_of(task), sb.label(task).to_owned());
        self.log.charge_reset(self.config.ticks.lwc_reset);
        self.intercept(session, InterceptKind::Reset, &label, "-", true);
        let pipes = self.tasks.remove(&task).and_then(|r| r.pipes);
        release(sb, task, pipes.as_ref());
    }

    fn on_metadata_change(&mut self, meta: &MetadataView, change: &MetaChange) -> Revalidation {
        self.valid.apply(change, meta)
    }

    fn log(&self) -> &InterceptionLog {
        &self.log
    }
}

impl ShaiMonitor {
    fn try_authenticate(
        &mut self,
        sb: &mut Sandbox,
        task: TaskHandle,
        session: Option<u64>,
        cred: &SessionContext,
    ) -> Result<(), Denial> {
        let session = session.ok_or(Denial::NotRegistered)?;
        let conn = conn_id(session);
        bind_connection(sb, &conn, cred);
        let reg = self.tasks.get(&task).ok_or(Denial::NotRegistered)?;
        if reg.user.as_ref() != Some(&cred.principal) {
            sb.revoke_handles(task, &conn);
            return Err(Denial::SessionRefused);
        }
        let region = cred.region.clone();
        let (mut instance, mut taint) = (reg.instance.clone(), reg.taint.clone());
        match reg.home.clone() {
            Some(home) if home != region => {
                let predicted = predicted_instance(&reg.instance, &region);
                match self.registry.get(&predicted) {
                    Some(inst) => {
                        instance = inst.id.clone();
                        taint = inst.taint.clone();
                    }
                    None => {
                        // Region-dependent members stay out of the grant and
                        // are checked on the slow path.
                        self.predictions.insert((reg.instance.clone(), region.clone()));
                        taint = taint.rebind_region(&home, &region);
                        instance = predicted;
                    }
                }
            }
            _ => {}
        }
        self.grant(sb, task, &instance, |m| m.is_region_dependent() && m.usable_in(&region));
        let reg = self.tasks.get_mut(&task).expect("checked above");
        reg.taint = taint;
        reg.session = Some(cred.clone());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::restrict::StateCondition;

    fn access(task: &str, class: &str, list: &str, entry: &str) -> CertifiedAccess {
        CertifiedAccess {
            mode: AccessMode::Read,
            task: TaskId::from(task),
            class: ClassId::from(class),
            conds: BTreeSet::from([StateCondition::ListIncludes(ListId::from(list), entry.into())]),
            regions: BTreeSet::new(),
        }
    }

    #[test]
    fn revalidation_tracks_list_changes() {
        let mut meta = MetadataView::new(0);
        meta.set_list(ListId::from("bob.friends"), ["alice".to_owned()]);
        let oa = OaOutput::new(vec![access("wa", "friends.bob", "bob.friends", "alice")], 0);
        let mut valid = ValidAccessList::new(&oa, &meta);
        let key = (AccessMode::Read, TaskId::from("wa"), ClassId::from("friends.bob"));
        assert!(valid.is_valid(key.0, &key.1, &key.2));

        let change = MetaChange::ListRemove { list: ListId::from("bob.friends"), entry: "alice".into() };
        meta.apply(&change);
        let t = valid.apply(&change, &meta);
        assert_eq!(t.len(), 1);
        assert!(!t[0].valid);
        assert!(!valid.is_valid(key.0, &key.1, &key.2));

        let unrelated = MetaChange::ListAdd { list: ListId::from("carol.friends"), entry: "alice".into() };
        meta.apply(&unrelated);
        assert!(valid.apply(&unrelated, &meta).is_empty());

        let back = MetaChange::ListAdd { list: ListId::from("bob.friends"), entry: "alice".into() };
        meta.apply(&back);
        assert!(valid.apply(&back, &meta)[0].valid);
        assert_eq!(valid.valid_entries().count(), 1);
    }
}
