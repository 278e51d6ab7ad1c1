//! The policy-comparison kernel shared by the offline analyzer and both
//! runtime monitors.
//!
//! [`is_as_restr`] decides whether one rule is at least as restrictive as
//! another by covering every disjunct of the first with some disjunct of the
//! second. Atoms that cannot be discharged syntactically are evaluated against
//! the metadata snapshot and, when they hold, recorded as [`StateCondition`]s:
//! the result stays valid only while those conditions hold.

pub mod oracle;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::meta::MetadataView;
use crate::model::{ClassId, ListId, Principal, Region};
use crate::policy::{Atom, Conjunct, Policy, PolicyHash, Rule, Taint, Term};

/// A fact about metadata under which a check result remains valid.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StateCondition {
    PolicyEquals(ClassId, PolicyHash),
    ListIncludes(ListId, String),
    ListExcludes(ListId, String),
}

impl StateCondition {
    /// Evaluates the condition. Missing lists and classes fail.
    pub fn holds(&self, meta: &MetadataView) -> bool {
        match self {
            StateCondition::PolicyEquals(class, hash) => meta.policy(class).is_some_and(|p| p.class_id() == *hash),
            StateCondition::ListIncludes(l, e) => meta.list(l).is_some_and(|l| l.contains(e)),
            StateCondition::ListExcludes(l, e) => meta.list(l).is_some_and(|l| !l.contains(e)),
        }
    }

    pub fn list(&self) -> Option<&ListId> {
        match self {
            StateCondition::ListIncludes(l, _) | StateCondition::ListExcludes(l, _) => Some(l),
            StateCondition::PolicyEquals(..) => None,
        }
    }

    pub fn class(&self) -> Option<&ClassId> {
        match self {
            StateCondition::PolicyEquals(c, _) => Some(c),
            _ => None,
        }
    }
}

impl fmt::Display for StateCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateCondition::PolicyEquals(c, h) => write!(f, "polEq:{c}={h}"),
            StateCondition::ListIncludes(l, e) => write!(f, "inc:{l}:{e}"),
            StateCondition::ListExcludes(l, e) => write!(f, "exc:{l}:{e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("bad state condition `{0}`")]
pub struct BadCondition(pub String);

impl FromStr for StateCondition {
    type Err = BadCondition;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || BadCondition(s.to_owned());
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "polEq" => {
                let (class, hash) = rest.split_once('=').ok_or_else(bad)?;
                let hash = PolicyHash::parse_hex(hash).ok_or_else(bad)?;
                Ok(StateCondition::PolicyEquals(ClassId::from(class), hash))
            }
            "inc" | "exc" => {
                let (list, entry) = rest.split_once(':').ok_or_else(bad)?;
                if list.is_empty() || entry.is_empty() {
                    return Err(bad());
                }
                let (list, entry) = (ListId::from(list), entry.to_owned());
                Ok(if kind == "inc" {
                    StateCondition::ListIncludes(list, entry)
                } else {
                    StateCondition::ListExcludes(list, entry)
                })
            }
            _ => Err(bad()),
        }
    }
}

pub type Conds = BTreeSet<StateCondition>;

/// Outcome of a kernel check.
///
/// `regions` lists the session regions the result depends on: a covering
/// disjunct matched a `region(r)` atom of the checked rule. Such results are
/// only usable by sessions that actually connect from `r`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CheckResult {
    pub okay: bool,
    pub conds: Conds,
    pub regions: BTreeSet<Region>,
}

impl CheckResult {
    pub fn ok() -> CheckResult {
        CheckResult { okay: true, ..CheckResult::default() }
    }

    pub fn fail() -> CheckResult {
        CheckResult::default()
    }

    /// Conjunction of two results.
    pub fn and(mut self, other: CheckResult) -> CheckResult {
        if !self.okay || !other.okay {
            return CheckResult::fail();
        }
        self.conds.extend(other.conds);
        self.regions.extend(other.regions);
        self
    }

    pub fn with_cond(mut self, c: StateCondition) -> CheckResult {
        if self.okay {
            self.conds.insert(c);
        }
        self
    }

    /// True if every condition holds under `meta`.
    pub fn still_holds(&self, meta: &MetadataView) -> bool {
        self.okay && self.conds.iter().all(|c| c.holds(meta))
    }
}

/// Who a ground or skolemized conjunct talks about.
enum Who<'a> {
    Ground(&'a str),
    Skolem,
    Unknown,
}

fn who(d1: &Conjunct) -> Who<'_> {
    match d1.ground_key() {
        Some(p) => Who::Ground(p),
        None if d1.has_var() => Who::Skolem,
        None => Who::Unknown,
    }
}

fn list_atom(list: &ListId, entry: Term, positive: bool) -> Atom {
    if positive {
        Atom::ListHas(list.clone(), entry)
    } else {
        Atom::ListLacks(list.clone(), entry)
    }
}

/// Tries to show that every model of `d1` satisfies `d2`.
fn cover(d1: &Conjunct, d2: &Conjunct, meta: &MetadataView) -> Option<CheckResult> {
    let subject = who(d1);
    let mut out = CheckResult::ok();
    for a in d2.atoms() {
        match a {
            Atom::True | Atom::Key(Term::Var) => {}
            Atom::False => return None,
            Atom::Key(Term::Id(q)) => match subject {
                Who::Ground(p) if p == q => {}
                _ => return None,
            },
            Atom::RegionIs(r) => {
                if d1.region() != Some(r) {
                    return None;
                }
                out.regions.insert(r.clone());
            }
            Atom::ListHas(l, t) | Atom::ListLacks(l, t) => {
                let positive = matches!(a, Atom::ListHas(..));
                let entry = match (t, &subject) {
                    (Term::Id(e), _) => Term::Id(e.clone()),
                    (Term::Var, Who::Ground(p)) => Term::id(*p),
                    (Term::Var, Who::Skolem) => Term::Var,
                    (Term::Var, Who::Unknown) => return None,
                };
                if d1.contains(&list_atom(l, entry.clone(), positive)) {
                    continue;
                }
                let Term::Id(e) = entry else { return None };
                let member = meta.list(l)?.contains(&e);
                if member != positive {
                    return None;
                }
                out.conds.insert(if positive {
                    StateCondition::ListIncludes(l.clone(), e)
                } else {
                    StateCondition::ListExcludes(l.clone(), e)
                });
            }
            Atom::TimeAfter(t) => {
                let implied = d1.atoms().any(|b| matches!(b, Atom::TimeAfter(t1) if t1 >= t));
                if !implied && meta.clock() <= *t {
                    return None;
                }
            }
            Atom::FdOnly => {
                if !d1.contains(&Atom::FdOnly) {
                    return None;
                }
            }
        }
    }
    Some(out)
}

/// Checks that `r1` is at least as restrictive as `r2`: every session allowed
/// by `r1` is allowed by `r2`, given the returned conditions.
pub fn is_as_restr(r1: &Rule, r2: &Rule, meta: &MetadataView) -> CheckResult {
    let mut total = CheckResult::ok();
    for d1 in r1.disjuncts() {
        let best = r2.disjuncts().filter_map(|d2| cover(d1, d2, meta)).min_by_key(|c| (c.conds.len(), c.regions.len()));
        match best {
            Some(c) => total = total.and(c),
            None => return CheckResult::fail(),
        }
    }
    total
}

/// [`is_as_restr`] with a taint as the restrictive side: the taint's
/// requirement is the conjunction of its components' read rules.
pub fn taint_is_as_restr(taint: &Taint, r2: &Rule, meta: &MetadataView) -> CheckResult {
    is_as_restr(&taint.requirement(), r2, meta)
}

/// The downstream conduit of a write.
#[derive(Debug, Clone, Copy)]
pub struct Target<'a> {
    /// Conduit class, when the conduit belongs to one.
    pub class: Option<&'a ClassId>,
    pub policy: &'a Policy,
}

impl<'a> Target<'a> {
    pub fn new(class: Option<&'a ClassId>, policy: &'a Policy) -> Target<'a> {
        Target { class, policy }
    }

    /// True if the conduit's update rule forbids all data writes.
    pub fn is_fd_only(&self) -> bool {
        self.policy.update().disjuncts().all(|d| d.contains(&Atom::FdOnly))
    }
}

fn trigger_holds(trigger: &Conjunct, target: &Target<'_>, meta: &MetadataView) -> Option<Conds> {
    let mut conds = Conds::new();
    for a in trigger.atoms() {
        match a {
            Atom::True => {}
            Atom::FdOnly if target.is_fd_only() => {}
            Atom::TimeAfter(t) if meta.clock() > *t => {}
            Atom::ListHas(l, Term::Id(e)) if meta.list(l)?.contains(e) => {
                conds.insert(StateCondition::ListIncludes(l.clone(), e.clone()));
            }
            Atom::ListLacks(l, Term::Id(e)) if !meta.list(l)?.contains(e) => {
                conds.insert(StateCondition::ListExcludes(l.clone(), e.clone()));
            }
            _ => return None,
        }
    }
    Some(conds)
}

/// One requirement produced by declassification, with the conditions under
/// which its trigger held.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relaxed {
    pub rule: Rule,
    pub conds: Conds,
}

/// The requirements a component imposes on `target`: the results of every
/// satisfied escape, or the unrelaxed read rule when none is satisfied.
pub fn apply_declass_with_conds(component: &Policy, target: &Target<'_>, meta: &MetadataView) -> Vec<Relaxed> {
    let out: Vec<Relaxed> = component
        .declassify()
        .escapes()
        .filter_map(|e| trigger_holds(&e.trigger, target, meta).map(|conds| Relaxed { rule: e.result.clone(), conds }))
        .collect();
    if out.is_empty() {
        vec![Relaxed { rule: component.read().clone(), conds: Conds::new() }]
    } else {
        out
    }
}

/// The rules only; see [`apply_declass_with_conds`].
pub fn apply_declass(component: &Policy, target: &Target<'_>, meta: &MetadataView) -> Vec<Rule> {
    apply_declass_with_conds(component, target, meta).into_iter().map(|r| r.rule).collect()
}

/// Checks that data carrying `taint` may flow into `target`: for every
/// component, some declassified requirement must be implied by the target's
/// read rule.
pub fn is_as_restr_with_declass(taint: &Taint, target: &Target<'_>, meta: &MetadataView) -> CheckResult {
    let mut total = CheckResult::ok();
    if let Some(class) = target.class {
        total.conds.insert(StateCondition::PolicyEquals(class.clone(), target.policy.class_id()));
    }
    for comp in taint.components() {
        let best = apply_declass_with_conds(&comp.policy, target, meta)
            .into_iter()
            .filter_map(|relaxed| {
                let mut c = is_as_restr(target.policy.read(), &relaxed.rule, meta);
                c.okay.then(|| {
                    c.conds.extend(relaxed.conds);
                    c
                })
            })
            .min_by_key(|c| (c.conds.len(), c.regions.len()));
        let Some(mut c) = best else { return CheckResult::fail() };
        if let Some(src) = &comp.source {
            c.conds.insert(StateCondition::PolicyEquals(src.clone(), comp.policy.class_id()));
        }
        total = total.and(c);
    }
    total
}

/// The parameters a writer is evaluated with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Writer {
    pub principal: Principal,
    /// `None` for tasks not bound to a region.
    pub region: Option<Region>,
    /// The write transfers descriptors only.
    pub descriptor_only: bool,
}

impl Writer {
    pub fn new(principal: &str) -> Writer {
        Writer { principal: Principal::from(principal), region: None, descriptor_only: false }
    }

    pub fn in_region(mut self, region: &str) -> Writer {
        self.region = Some(Region::from(region));
        self
    }

    pub fn descriptors(mut self) -> Writer {
        self.descriptor_only = true;
        self
    }
}

fn eval_update_conjunct(d: &Conjunct, w: &Writer, meta: &MetadataView) -> Option<CheckResult> {
    let mut out = CheckResult::ok();
    for a in d.atoms() {
        match a {
            Atom::True | Atom::Key(Term::Var) => {}
            Atom::False => return None,
            Atom::Key(Term::Id(p)) if *p == w.principal.as_str() => {}
            Atom::Key(_) => return None,
            Atom::RegionIs(r) => {
                if w.region.as_ref() != Some(r) {
                    return None;
                }
                out.regions.insert(r.clone());
            }
            Atom::ListHas(l, t) | Atom::ListLacks(l, t) => {
                let positive = matches!(a, Atom::ListHas(..));
                let e = match t {
                    Term::Var => w.principal.as_str(),
                    Term::Id(e) => e.as_str(),
                };
                if meta.list(l)?.contains(e) != positive {
                    return None;
                }
                out.conds.insert(if positive {
                    StateCondition::ListIncludes(l.clone(), e.to_owned())
                } else {
                    StateCondition::ListExcludes(l.clone(), e.to_owned())
                });
            }
            Atom::TimeAfter(t) => {
                if meta.clock() <= *t {
                    return None;
                }
            }
            Atom::FdOnly => {
                if !w.descriptor_only {
                    return None;
                }
            }
        }
    }
    Some(out)
}

/// Evaluates an update rule for a writer. Missing lists fail closed.
pub fn policy_eval(update: &Rule, writer: &Writer, meta: &MetadataView) -> CheckResult {
    update
        .disjuncts()
        .filter_map(|d| eval_update_conjunct(d, writer, meta))
        .min_by_key(|c| (c.conds.len(), c.regions.len()))
        .unwrap_or_else(CheckResult::fail)
}
