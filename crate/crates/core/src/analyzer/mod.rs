//! The offline analyzer (OA).
//!
//! For every task instance and every conduit class it is expected to read,
//! the OA checks that the instance's taint is at least as restrictive as the
//! class's read rule. For every expected write it checks declassification
//! from the taint into the class and the class's update rule. Successful
//! checks become [`CertifiedAccess`] records carrying the state conditions
//! under which they stay valid.
//!
//! Checks are run once per distinct policy, not once per class: classes with
//! structurally equal policies share a single kernel call per task and mode.

pub mod capability;
pub mod manifest;
pub mod persist;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

pub use capability::{compile_capabilities, Blueprint, GroupMember, GroupSpec, StoreKind};
pub use manifest::{ClassSpec, Manifest, ManifestError, TaskSpec};
pub use persist::{load_oa, parse_predictions, persist_oa, render_predictions, PersistError};

use crate::meta::MetadataView;
use crate::model::{AccessMode, ClassId, ConduitId, Principal, Region, TaskId};
use crate::policy::{Policy, PolicyHash, PolicySet, Taint};
use crate::restrict::{
    is_as_restr_with_declass, policy_eval, taint_is_as_restr, CheckResult, Conds, StateCondition, Target, Writer,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OaError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("policy `{name}` used by {user} is not defined")]
    UnknownPolicy { name: String, user: String },
}

/// One certified access: `mode` by `task` on every conduit of `class`, valid
/// while `conds` hold and the session connects from one of `regions` (any
/// region when empty).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CertifiedAccess {
    pub mode: AccessMode,
    pub task: TaskId,
    pub class: ClassId,
    pub conds: Conds,
    pub regions: BTreeSet<Region>,
}

impl CertifiedAccess {
    /// True if the conditions hold under `meta`, ignoring regions.
    pub fn valid_under(&self, meta: &MetadataView) -> bool {
        self.conds.iter().all(|c| c.holds(meta))
    }

    /// True if the certification does not depend on the session region, or
    /// depends only on `region`.
    pub fn usable_in(&self, region: &Region) -> bool {
        self.regions.iter().all(|r| r == region)
    }

    pub fn is_region_dependent(&self) -> bool {
        !self.regions.is_empty()
    }
}

/// The analyzer's output.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OaOutput {
    /// Sorted by (mode, task, class).
    pub certified: Vec<CertifiedAccess>,
    /// Policy hash of every class referenced by `certified`.
    pub snapshot: BTreeMap<ClassId, PolicyHash>,
    pub generated_at: i64,
}

impl OaOutput {
    pub fn new(mut certified: Vec<CertifiedAccess>, generated_at: i64) -> OaOutput {
        certified.sort();
        certified.dedup_by(|a, b| (a.mode, &a.task, &a.class) == (b.mode, &b.task, &b.class));
        let mut snapshot = BTreeMap::new();
        for c in &certified {
            for cond in &c.conds {
                if let StateCondition::PolicyEquals(class, hash) = cond {
                    snapshot.insert(class.clone(), *hash);
                }
            }
        }
        OaOutput { certified, snapshot, generated_at }
    }

    pub fn for_task<'a>(&'a self, task: &'a TaskId) -> impl Iterator<Item = &'a CertifiedAccess> + 'a {
        self.certified.iter().filter(move |c| &c.task == task)
    }

    pub fn tasks(&self) -> BTreeSet<&TaskId> {
        self.certified.iter().map(|c| &c.task).collect()
    }
}

/// Work counters of one OA run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OaStats {
    pub instances: usize,
    /// Distinct policies among the referenced classes.
    pub policy_classes: usize,
    /// Restrictiveness-kernel invocations.
    pub checks: u64,
    pub certified: usize,
}

impl fmt::Display for OaStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} instances, {} policy classes, {} checks, {} certified accesses",
            self.instances, self.policy_classes, self.checks, self.certified
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct OaOptions {
    /// Skip instances marked `active=0`; they run on the slow path.
    pub active_only: bool,
    /// Worker threads; `None` or 1 runs serially.
    pub threads: Option<usize>,
    /// Observed (task, region) pairs that were not predicted; each adds an
    /// instance `task@region` with the taint rebound to that region.
    pub predictions: BTreeSet<(TaskId, Region)>,
}

/// Conduits that share a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyClass {
    pub policy: Arc<Policy>,
    pub members: Vec<ConduitId>,
}

/// Partitions conduits by policy identity.
pub fn dedup_by_policy(
    conduits: impl IntoIterator<Item = (ConduitId, Arc<Policy>)>,
) -> BTreeMap<PolicyHash, PolicyClass> {
    let mut out: BTreeMap<PolicyHash, PolicyClass> = BTreeMap::new();
    for (id, policy) in conduits {
        out.entry(policy.class_id())
            .or_insert_with(|| PolicyClass { policy: policy.clone(), members: Vec::new() })
            .members
            .push(id);
    }
    out
}

/// A resolved task instance.
#[derive(Debug, Clone)]
pub struct Instance {
    pub id: TaskId,
    pub user: Principal,
    pub region: Option<Region>,
    pub taint: Taint,
    pub reads: BTreeSet<ClassId>,
    pub writes: BTreeSet<ClassId>,
}

impl Instance {
    pub fn writer(&self, target: &Target<'_>) -> Writer {
        Writer { principal: self.user.clone(), region: self.region.clone(), descriptor_only: target.is_fd_only() }
    }
}

/// Builds a taint from policy names.
pub fn taint_of(names: &[String], policies: &PolicySet, user: &str) -> Result<Taint, OaError> {
    let mut list = Vec::new();
    for n in names {
        let p = policies.get(n).ok_or_else(|| OaError::UnknownPolicy { name: n.clone(), user: user.to_owned() })?;
        list.push(p.clone());
    }
    Ok(Taint::of(list))
}

/// The instance id used for a task observed in an unpredicted region.
pub fn predicted_instance(task: &TaskId, region: &Region) -> TaskId {
    TaskId::new(format!("{task}@{region}"))
}

/// Resolves manifest tasks (plus prediction-log instances) into instances.
pub fn instances(manifest: &Manifest, policies: &PolicySet, opts: &OaOptions) -> Result<Vec<Instance>, OaError> {
    let mut out = Vec::new();
    for (id, spec) in &manifest.tasks {
        if opts.active_only && !spec.active {
            continue;
        }
        let taint = taint_of(&spec.taint, policies, id.as_str())?;
        let select = |set: &BTreeSet<(TaskId, ClassId)>| -> BTreeSet<ClassId> {
            set.iter().filter(|(t, _)| t == id).map(|(_, c)| c.clone()).collect()
        };
        let inst = Instance {
            id: id.clone(),
            user: spec.user.clone(),
            region: spec.region.clone(),
            taint,
            reads: select(&manifest.reads),
            writes: select(&manifest.writes),
        };
        for (task, region) in &opts.predictions {
            match &inst.region {
                Some(home) if task == id && home != region => out.push(Instance {
                    id: predicted_instance(id, region),
                    region: Some(region.clone()),
                    taint: inst.taint.rebind_region(home, region),
                    ..inst.clone()
                }),
                _ => {}
            }
        }
        out.push(inst);
    }
    Ok(out)
}

/// Metadata view with every manifest class bound to its policy.
pub fn class_view(manifest: &Manifest, policies: &PolicySet, base: &MetadataView) -> Result<MetadataView, OaError> {
    let mut view = base.clone();
    for (id, spec) in &manifest.classes {
        let p = policies
            .get(&spec.policy)
            .ok_or_else(|| OaError::UnknownPolicy { name: spec.policy.clone(), user: id.to_string() })?;
        view.set_policy(id.clone(), p.clone());
    }
    Ok(view)
}

/// The read check: the taint must be at least as restrictive as the class's
/// read rule.
pub fn check_read(taint: &Taint, class: &ClassId, policy: &Policy, meta: &MetadataView) -> CheckResult {
    taint_is_as_restr(taint, policy.read(), meta)
        .with_cond(StateCondition::PolicyEquals(class.clone(), policy.class_id()))
}

/// The write check: declassification from the taint into the conduit, and
/// the conduit's update rule for the writer.
pub fn check_write(taint: &Taint, writer: &Writer, target: &Target<'_>, meta: &MetadataView) -> CheckResult {
    let declass = is_as_restr_with_declass(taint, target, meta);
    if !declass.okay {
        return declass;
    }
    declass.and(policy_eval(target.policy.update(), writer, meta))
}

#[derive(Clone)]
struct Job<'a> {
    mode: AccessMode,
    inst: &'a Instance,
    policy: Arc<Policy>,
    classes: Vec<ClassId>,
}

fn run_job(job: &Job<'_>, meta: &MetadataView, counter: &AtomicU64) -> Vec<CertifiedAccess> {
    counter.fetch_add(1, Ordering::Relaxed);
    let result = match job.mode {
        AccessMode::Read => taint_is_as_restr(&job.inst.taint, job.policy.read(), meta),
        AccessMode::Write => {
            let target = Target::new(None, &job.policy);
            check_write(&job.inst.taint, &job.inst.writer(&target), &target, meta)
        }
    };
    if !result.okay {
        return Vec::new();
    }
    job.classes
        .iter()
        .map(|class| {
            let mut conds = result.conds.clone();
            conds.insert(StateCondition::PolicyEquals(class.clone(), job.policy.class_id()));
            CertifiedAccess {
                mode: job.mode,
                task: job.inst.id.clone(),
                class: class.clone(),
                conds,
                regions: result.regions.clone(),
            }
        })
        .collect()
}

fn run_jobs(
    jobs: &[Job<'_>],
    meta: &MetadataView,
    counter: &AtomicU64,
    threads: Option<usize>,
) -> Vec<CertifiedAccess> {
    #[cfg(feature = "parallel")]
    if let Some(n) = threads.filter(|n| *n > 1) {
        use rayon::prelude::*;
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            return pool.install(|| jobs.par_iter().flat_map_iter(|j| run_job(j, meta, counter)).collect());
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    jobs.iter().flat_map(|j| run_job(j, meta, counter)).collect()
}

/// Runs the analysis. `meta` supplies lists and the clock; class policies
/// come from the manifest.
pub fn run_oa(
    manifest: &Manifest,
    policies: &PolicySet,
    meta: &MetadataView,
    opts: &OaOptions,
) -> Result<(OaOutput, OaStats), OaError> {
    let view = class_view(manifest, policies, meta)?;
    let insts = instances(manifest, policies, opts)?;

    let mut jobs: Vec<Job<'_>> = Vec::new();
    let mut referenced = BTreeSet::new();
    for inst in &insts {
        for (mode, classes) in [(AccessMode::Read, &inst.reads), (AccessMode::Write, &inst.writes)] {
            let mut by_policy: BTreeMap<PolicyHash, Job<'_>> = BTreeMap::new();
            for class in classes {
                let policy = view.policy(class).expect("class view covers every manifest class").clone();
                referenced.insert(policy.class_id());
                by_policy
                    .entry(policy.class_id())
                    .or_insert_with(|| Job { mode, inst, policy, classes: Vec::new() })
                    .classes
                    .push(class.clone());
            }
            jobs.extend(by_policy.into_values());
        }
    }

    let counter = AtomicU64::new(0);
    let certified = run_jobs(&jobs, &view, &counter, opts.threads);
    let out = OaOutput::new(certified, view.clock());
    let stats = OaStats {
        instances: insts.len(),
        policy_classes: referenced.len(),
        checks: counter.load(Ordering::Relaxed),
        certified: out.certified.len(),
    };
    Ok((out, stats))
}
