//! The running pipeline: sandbox, monitor, indexer, engine and workers.

use std::collections::BTreeSet;

use thiserror::Error;

use super::corpus::{profile_key, worker_instance, Corpus, ENGINE, INDEXER};
use super::engine::{shard_id, snippet, Index, QueryMsg};
use super::session::{SessionOp, SessionScript};
use crate::analyzer::{class_view, instances, run_oa, Manifest, OaError, OaOptions, OaOutput};
use crate::meta::{MetaChange, MetadataView};
use crate::model::{AccessMode, ClassId, ConduitId, Principal, Region, Rights, TaskHandle, TaskId};
use crate::monitor::dynamic::DynamicMonitor;
use crate::monitor::shai::{ShaiConfig, ShaiMonitor};
use crate::monitor::{
    conn_id, install_pipes, Baseline, Denial, HookCx, InterceptKind, InterceptionLog, Mode, Monitor, PipeHandles,
    Revalidation, SessionMonitor, SessionPipes, TickCosts, Verdict,
};
use crate::policy::{eval_rule, Facts, SessionContext};
use crate::sandbox::{
    kv_conduit, AccessRequest, Boundary, Conduit, ConduitKind, ConduitStore, Handle, Outcome, PolicyRef, Sandbox,
};

pub const PUBLIC_LOG: &str = "log/public";

#[derive(Debug, Error)]
pub enum SystemError {
    #[error(transparent)]
    Oa(#[from] OaError),
    #[error("{step} denied: {denial}")]
    Denied { step: &'static str, denial: Denial },
    #[error("unexpected outcome from {0}")]
    Outcome(&'static str),
    #[error("the corpus has no {0}")]
    Unavailable(&'static str),
}

fn denied(step: &'static str) -> impl FnOnce(Denial) -> SystemError {
    move |denial| SystemError::Denied { step, denial }
}

/// The monitor a system runs under.
pub enum Rm {
    Baseline(Baseline),
    Dynamic(DynamicMonitor),
    Shai(Box<ShaiMonitor>),
}

macro_rules! delegate {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            Rm::Baseline($m) => $e,
            Rm::Dynamic($m) => $e,
            Rm::Shai($m) => $e,
        }
    };
}

impl Monitor for Rm {
    fn open(&mut self, cx: &HookCx<'_>, task: TaskHandle, c: &Conduit, mode: AccessMode) -> Verdict {
        delegate!(self, m => m.open(cx, task, c, mode))
    }

    fn create(&mut self, cx: &HookCx<'_>, task: TaskHandle, c: &Conduit) -> Verdict {
        delegate!(self, m => m.create(cx, task, c))
    }

    fn write(&mut self, cx: &HookCx<'_>, task: TaskHandle, c: &Conduit) -> Verdict {
        delegate!(self, m => m.write(cx, task, c))
    }

    fn send_descriptor(&mut self, cx: &HookCx<'_>, task: TaskHandle, pipe: &Conduit) -> Verdict {
        delegate!(self, m => m.send_descriptor(cx, task, pipe))
    }

    fn receive(&mut self, cx: &HookCx<'_>, to: TaskHandle, c: &Conduit) -> Verdict {
        delegate!(self, m => m.receive(cx, to, c))
    }

    fn closed(&mut self, task: TaskHandle, conduit: &ConduitId, rights: Rights) {
        delegate!(self, m => m.closed(task, conduit, rights))
    }
}

impl SessionMonitor for Rm {
    fn mode(&self) -> Mode {
        delegate!(self, m => m.mode())
    }

    fn register(
        &mut self,
        sb: &mut Sandbox,
        meta: &MetadataView,
        task: TaskHandle,
        instance: &TaskId,
        pipes: Option<&SessionPipes>,
    ) -> Result<Option<PipeHandles>, Denial> {
        delegate!(self, m => m.register(sb, meta, task, instance, pipes))
    }

    fn accept(
        &mut self,
        sb: &mut Sandbox,
        meta: &MetadataView,
        task: TaskHandle,
        session: u64,
    ) -> Result<Handle, Denial> {
        delegate!(self, m => m.accept(sb, meta, task, session))
    }

    fn authenticate(
        &mut self,
        sb: &mut Sandbox,
        meta: &MetadataView,
        task: TaskHandle,
        cred: &SessionContext,
    ) -> Result<(), Denial> {
        delegate!(self, m => m.authenticate(sb, meta, task, cred))
    }

    fn reset(&mut self, sb: &mut Sandbox, task: TaskHandle) {
        delegate!(self, m => m.reset(sb, task))
    }

    fn on_metadata_change(&mut self, meta: &MetadataView, change: &MetaChange) -> Revalidation {
        delegate!(self, m => m.on_metadata_change(meta, change))
    }

    fn log(&self) -> &InterceptionLog {
        delegate!(self, m => m.log())
    }
}

#[derive(Debug, Clone)]
pub struct SystemConfig {
    pub mode: Mode,
    pub ticks: TickCosts,
    pub patch_slowpath: bool,
    pub top_k: usize,
    pub shards: usize,
    /// The engine skips the per-user result filter.
    pub buggy_engine: bool,
    pub threads: Option<usize>,
    /// Unpredicted (task, region) pairs from an earlier prediction log.
    pub predictions: BTreeSet<(TaskId, Region)>,
}

impl SystemConfig {
    pub fn new(mode: Mode) -> SystemConfig {
        SystemConfig {
            mode,
            ticks: TickCosts::default(),
            patch_slowpath: false,
            top_k: 10,
            shards: 16,
            buggy_engine: false,
            threads: None,
            predictions: BTreeSet::new(),
        }
    }

    fn oa_options(&self) -> OaOptions {
        OaOptions { active_only: false, threads: self.threads, predictions: self.predictions.clone() }
    }
}

/// What building the index cost.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IndexStats {
    pub docs: usize,
    pub shards: usize,
    pub postings: usize,
    /// Interceptions charged to the indexer, registration included.
    pub interceptions: usize,
}

/// Per-session counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SessionStats {
    pub session: u64,
    pub queries: usize,
    /// Descriptors the worker received.
    pub delivered: usize,
    pub interceptions: usize,
    pub slowpath_interceptions: usize,
    pub fastpath: u64,
    pub slowpath: u64,
    pub denials: u64,
    pub rm_ticks: u64,
    pub reset_ticks: u64,
}

/// A session between accept and reset.
#[derive(Debug, Clone)]
pub struct LiveSession {
    pub id: u64,
    pub worker: TaskHandle,
    pub conn: Handle,
    pub pipes: PipeHandles,
    pub cred: SessionContext,
}

pub struct System {
    pub sandbox: Sandbox,
    /// Base metadata with every class bound to its policy.
    pub meta: MetadataView,
    pub monitor: Rm,
    pub oa: Option<OaOutput>,
    pub config: SystemConfig,
    pub index_stats: IndexStats,
    pub engine: TaskHandle,
    pub indexer: TaskHandle,
    /// Everyone an unsessioned egress write is visible to.
    pub audience: Vec<Principal>,
    pub regions: Vec<Region>,
    index: Index,
    next_session: u64,
}

fn populate(corpus: &Corpus) -> ConduitStore {
    let mut store = ConduitStore::default();
    for d in &corpus.docs {
        let c = Conduit::new(d.id.clone(), ConduitKind::File, Boundary::Ingress, PolicyRef::Class(d.kind.class()));
        store.insert(c.with_content(d.text.clone()));
    }
    for (u, text) in &corpus.profiles {
        let class = ClassId::new(format!("profile.{u}"));
        let c = Conduit::new(kv_conduit(&profile_key(u)), ConduitKind::Kv, Boundary::Ingress, PolicyRef::Class(class));
        store.insert(c.with_content(text.clone()));
    }
    let log =
        Conduit::new(PUBLIC_LOG, ConduitKind::File, Boundary::Egress, PolicyRef::Class(ClassId::from("publiclog")));
    store.insert(log);
    store
}

impl System {
    pub fn new(corpus: &Corpus, config: SystemConfig) -> Result<System, SystemError> {
        System::build(corpus, &corpus.manifest, None, config)
    }

    /// `manifest` drives the offline analysis and the task registry; `oa`
    /// is computed from it when not supplied.
    pub fn build(
        corpus: &Corpus,
        manifest: &Manifest,
        oa: Option<OaOutput>,
        config: SystemConfig,
    ) -> Result<System, SystemError> {
        let meta = class_view(manifest, &corpus.policies, &corpus.meta)?;
        let opts = config.oa_options();
        let (monitor, oa) = match config.mode {
            Mode::Baseline => (Rm::Baseline(Baseline::new()), oa),
            Mode::Dynamic => {
                (Rm::Dynamic(DynamicMonitor::new(instances(manifest, &corpus.policies, &opts)?, config.ticks)), oa)
            }
            Mode::Shai => {
                let oa = match oa {
                    Some(oa) => oa,
                    None => run_oa(manifest, &corpus.policies, &corpus.meta, &opts)?.0,
                };
                let shai_config = ShaiConfig { patch_slowpath: config.patch_slowpath, ticks: config.ticks };
                let m = ShaiMonitor::from_manifest(manifest, &corpus.policies, &opts, &oa, &meta, shai_config)?;
                (Rm::Shai(Box::new(m)), Some(oa))
            }
        };
        let mut sandbox = Sandbox::new(populate(corpus));
        let engine = sandbox.spawn(ENGINE);
        let indexer = sandbox.spawn(INDEXER);
        let mut sys = System {
            sandbox,
            meta,
            monitor,
            oa,
            config,
            index_stats: IndexStats::default(),
            engine,
            indexer,
            audience: corpus.users.iter().map(|u| u.id.clone()).chain([Principal::from("outsider")]).collect(),
            regions: corpus.regions.clone(),
            index: Index::default(),
            next_session: 0,
        };
        sys.monitor
            .register(&mut sys.sandbox, &sys.meta, engine, &TaskId::from(ENGINE), None)
            .map_err(denied("engine registration"))?;
        sys.run_indexer(corpus)?;
        sys.load_index()?;
        Ok(sys)
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn log(&self) -> &InterceptionLog {
        self.monitor.log()
    }

    pub fn shai(&self) -> Option<&ShaiMonitor> {
        match &self.monitor {
            Rm::Shai(m) => Some(m),
            _ => None,
        }
    }

    pub fn index(&self) -> &Index {
        &self.index
    }

    pub fn access(&mut self, task: TaskHandle, req: AccessRequest) -> Result<Outcome, Denial> {
        self.sandbox.access(&mut self.monitor, &self.meta, task, req)
    }

    pub fn open(&mut self, task: TaskHandle, conduit: &ConduitId, mode: AccessMode) -> Result<Handle, Denial> {
        match self.access(task, AccessRequest::Open { conduit: conduit.clone(), mode })? {
            Outcome::Opened(h) => Ok(h),
            _ => unreachable!("open yields a handle"),
        }
    }

    pub fn read(&mut self, task: TaskHandle, handle: Handle) -> Result<String, Denial> {
        match self.access(task, AccessRequest::Read { handle })? {
            Outcome::Data(d) => Ok(d),
            _ => unreachable!("read yields data"),
        }
    }

    pub fn write(&mut self, task: TaskHandle, handle: Handle, data: impl Into<String>) -> Result<(), Denial> {
        self.access(task, AccessRequest::Write { handle, data: data.into() }).map(drop)
    }

    pub fn close(&mut self, task: TaskHandle, handle: Handle) {
        let _ = self.access(task, AccessRequest::Close { handle });
    }

    /// Opens, reads and closes.
    pub fn slurp(&mut self, task: TaskHandle, conduit: &ConduitId) -> Result<String, Denial> {
        let h = self.open(task, conduit, AccessMode::Read)?;
        let data = self.read(task, h);
        self.close(task, h);
        data
    }

    fn run_indexer(&mut self, corpus: &Corpus) -> Result<(), SystemError> {
        let before = self.log().len();
        let task = self.indexer;
        self.monitor
            .register(&mut self.sandbox, &self.meta, task, &TaskId::from(INDEXER), None)
            .map_err(denied("indexer registration"))?;
        let mut index = Index::default();
        for d in &corpus.docs {
            let text = self.slurp(task, &d.id).map_err(denied("indexer read"))?;
            index.add(&d.id, &text);
        }
        let shards = index.shard_texts(self.config.shards);
        for (i, text) in shards.iter().enumerate() {
            let conduit = Conduit::new(
                shard_id(i),
                ConduitKind::File,
                Boundary::Internal,
                PolicyRef::Class(ClassId::from("index")),
            );
            let h = match self.access(task, AccessRequest::Create { conduit }).map_err(denied("index create"))? {
                Outcome::Opened(h) => h,
                _ => return Err(SystemError::Outcome("create")),
            };
            self.write(task, h, text.clone()).map_err(denied("index write"))?;
            self.close(task, h);
        }
        self.index_stats = IndexStats {
            docs: corpus.docs.len(),
            shards: shards.len(),
            postings: index.len(),
            interceptions: self.log().len() - before,
        };
        Ok(())
    }

    fn load_index(&mut self) -> Result<(), SystemError> {
        let mut index = Index::default();
        for i in 0..self.index_stats.shards {
            index.merge_shard(&self.slurp(self.engine, &shard_id(i)).map_err(denied("index load"))?);
        }
        self.index = index;
        Ok(())
    }

    /// Whether `user` in `region` may read `doc`, by direct evaluation.
    pub fn visible(&self, doc: &ConduitId, user: &str, region: &str) -> bool {
        let Some(policy) = self.sandbox.store.get(doc).and_then(|c| c.resolve_policy(&self.meta)) else {
            return false;
        };
        eval_rule(policy.read(), &Facts::new(user, region, self.meta.clock(), &self.meta)).unwrap_or(false)
    }

    /// The engine's answer to a query, before any descriptor is sent.
    pub fn search(&self, q: &QueryMsg) -> Vec<ConduitId> {
        let buggy = self.config.buggy_engine;
        self.index.search(&q.words, self.config.top_k, |d| buggy || self.visible(d, q.user.as_str(), q.region.as_str()))
    }

    /// Register, accept and authenticate a worker for `user` connecting
    /// from `region`. On failure the worker is reset.
    pub fn open_session(&mut self, user: &Principal, region: &Region) -> Result<LiveSession, SystemError> {
        let id = self.next_session;
        self.next_session += 1;
        let worker = self.sandbox.spawn(&worker_instance(user).to_string());
        self.sandbox.set_session(worker, Some(id));
        let pipes = install_pipes(&mut self.sandbox.store, self.engine, id);
        let cred = SessionContext { principal: user.clone(), region: region.clone(), clock: self.meta.clock() };
        let r = (|| {
            let instance = worker_instance(user);
            let pipes = self
                .monitor
                .register(&mut self.sandbox, &self.meta, worker, &instance, Some(&pipes))
                .map_err(denied("register"))?
                .ok_or(SystemError::Outcome("register"))?;
            let conn = self.monitor.accept(&mut self.sandbox, &self.meta, worker, id).map_err(denied("accept"))?;
            self.monitor.authenticate(&mut self.sandbox, &self.meta, worker, &cred).map_err(denied("authenticate"))?;
            Ok(LiveSession { id, worker, conn, pipes, cred: cred.clone() })
        })();
        if r.is_err() {
            self.monitor.reset(&mut self.sandbox, worker);
        }
        r
    }

    pub fn close_session(&mut self, live: &LiveSession) {
        self.monitor.reset(&mut self.sandbox, live.worker);
    }

    /// One keyword query end to end. Returns the number of descriptors the
    /// worker received.
    pub fn query(&mut self, live: &LiveSession, words: &[String]) -> Result<usize, Denial> {
        let worker = live.worker;
        self.sandbox.store.external_write(&conn_id(live.id), words.join(","));
        let asked = self.read(worker, live.conn)?;
        let msg = QueryMsg {
            user: live.cred.principal.clone(),
            region: live.cred.region.clone(),
            words: asked.split(',').filter(|w| !w.is_empty()).map(str::to_owned).collect(),
        };
        self.write(worker, live.pipes.worker_query, msg.render())?;

        self.sandbox.set_session(self.engine, Some(live.id));
        let received = self.serve(live);
        self.sandbox.set_session(self.engine, None);

        let mut reply = String::new();
        let mut delivered = 0;
        for fd in received? {
            if let Ok(text) = self.read(worker, fd) {
                reply.push_str(snippet(&text));
                reply.push('\n');
            }
            self.close(worker, fd);
            delivered += 1;
        }
        if let Ok(Outcome::Data(prefs)) =
            self.access(worker, AccessRequest::KvGet { key: profile_key(&live.cred.principal) })
        {
            reply.push_str(prefs.trim_end());
            reply.push('\n');
        }
        self.write(worker, live.conn, reply)?;
        Ok(delivered)
    }

    /// The engine side of a query: read it, search and send descriptors.
    fn serve(&mut self, live: &LiveSession) -> Result<Vec<Handle>, Denial> {
        let engine = self.engine;
        let text = self.read(engine, live.pipes.engine_query)?;
        let Some(msg) = QueryMsg::parse(&text) else { return Ok(Vec::new()) };
        let mut received = Vec::new();
        for doc in self.search(&msg) {
            let Ok(fd) = self.open(engine, &doc, AccessMode::Read) else { continue };
            let sent =
                self.access(engine, AccessRequest::SendFd { pipe: live.pipes.engine_results, fd, to: live.worker });
            if let Ok(Outcome::Transferred(h)) = sent {
                received.push(h);
            }
            self.close(engine, fd);
        }
        Ok(received)
    }

    /// The worker opens a conduit itself and echoes it to the client.
    pub fn direct_read(&mut self, live: &LiveSession, req: AccessRequest) -> Result<(), Denial> {
        let data = match self.access(live.worker, req)? {
            Outcome::Opened(h) => {
                let d = self.read(live.worker, h);
                self.close(live.worker, h);
                d?
            }
            Outcome::Data(d) => d,
            _ => return Ok(()),
        };
        self.write(live.worker, live.conn, format!("{}\n", snippet(&data)))
    }

    pub fn run_session(&mut self, script: &SessionScript) -> Result<SessionStats, SystemError> {
        let counters = self.sandbox.counters;
        let reset_before = self.log().reset_ticks();
        let live = self.open_session(&script.user, &script.region)?;
        let mut delivered = 0;
        for op in &script.ops {
            match op {
                SessionOp::Query(words) => delivered += self.query(&live, words).unwrap_or(0),
                SessionOp::Open(doc) => {
                    let _ =
                        self.direct_read(&live, AccessRequest::Open { conduit: doc.clone(), mode: AccessMode::Read });
                }
                SessionOp::Profile(u) => {
                    let _ = self.direct_read(&live, AccessRequest::KvGet { key: profile_key(u) });
                }
            }
        }
        self.close_session(&live);

        let log = self.log();
        let (mut interceptions, mut slow) = (0, 0);
        for e in log.for_session(live.id) {
            interceptions += 1;
            slow += usize::from(matches!(e.kind, InterceptKind::SlowPathOpen | InterceptKind::WriteCheck));
        }
        let c = &self.sandbox.counters;
        Ok(SessionStats {
            session: live.id,
            queries: script.queries(),
            delivered,
            interceptions,
            slowpath_interceptions: slow,
            fastpath: c.fastpath - counters.fastpath,
            slowpath: c.slowpath - counters.slowpath,
            denials: c.denials - counters.denials,
            rm_ticks: interceptions as u64 * self.config.ticks.rm_entry,
            reset_ticks: log.reset_ticks() - reset_before,
        })
    }

    /// Applies a metadata change and lets the monitor revalidate.
    pub fn change_metadata(&mut self, change: &MetaChange) -> Revalidation {
        if self.meta.apply(change) {
            self.monitor.on_metadata_change(&self.meta, change)
        } else {
            Vec::new()
        }
    }
}
