//! The policy algebra.
//!
//! A conduit's [`Policy`] bundles three rules: who may read the conduit
//! directly (`read`), who may write it and with what kind of content
//! (`update`), and how the read requirement may be relaxed for data derived
//! downstream (`declassify`). Rules are kept in disjunctive normal form: a
//! [`Rule`] is a set of [`Conjunct`]s and a conjunct is a set of [`Atom`]s.
//!
//! Each conjunct carries at most one variable. The variable is always bound by
//! a `key(X)` atom of the same conjunct, so it denotes the principal of the
//! session the rule is evaluated against. That is enough for owner, friends and
//! friends-of-friends policies and keeps the restrictiveness check a
//! disjunct-wise cover test.

mod eval;
mod parse;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{is_ident, ClassId, ListId, Principal, Region};

pub use eval::{eval_conjunct, eval_rule, EvalError, Facts, Lists};
pub use parse::{parse_policy, parse_policy_file, parse_rule, ParseError, ParseErrorKind, PolicySet};

/// Argument of `key`, `in` and `notin`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    /// The conjunct's variable, bound to the session principal by `key(X)`.
    Var,
    Id(String),
}

impl Term {
    pub fn id(s: impl Into<String>) -> Term {
        Term::Id(s.into())
    }

    fn substitute(&self, value: &str) -> Term {
        match self {
            Term::Var => Term::Id(value.to_owned()),
            t => t.clone(),
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Var => f.write_str("X"),
            Term::Id(s) => f.write_str(s),
        }
    }
}

/// A single predicate.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Atom {
    True,
    False,
    /// The session principal is `p`, or binds the variable to it.
    Key(Term),
    RegionIs(Region),
    /// The list contains the entry.
    ListHas(ListId, Term),
    /// The list does not contain the entry.
    ListLacks(ListId, Term),
    /// The clock is strictly past the timestamp (seconds).
    TimeAfter(i64),
    /// The flow carries only file descriptors, never data bytes.
    FdOnly,
}

impl Atom {
    pub fn key(p: &str) -> Atom {
        Atom::Key(Term::id(p))
    }

    pub fn key_var() -> Atom {
        Atom::Key(Term::Var)
    }

    pub fn region(r: &str) -> Atom {
        Atom::RegionIs(Region::from(r))
    }

    pub fn has(list: &str, entry: Term) -> Atom {
        Atom::ListHas(ListId::from(list), entry)
    }

    pub fn lacks(list: &str, entry: Term) -> Atom {
        Atom::ListLacks(ListId::from(list), entry)
    }

    pub fn term(&self) -> Option<&Term> {
        match self {
            Atom::Key(t) | Atom::ListHas(_, t) | Atom::ListLacks(_, t) => Some(t),
            _ => None,
        }
    }

    pub fn mentions_var(&self) -> bool {
        self.term() == Some(&Term::Var)
    }

    fn substitute(&self, value: &str) -> Atom {
        match self {
            Atom::Key(t) => Atom::Key(t.substitute(value)),
            Atom::ListHas(l, t) => Atom::ListHas(l.clone(), t.substitute(value)),
            Atom::ListLacks(l, t) => Atom::ListLacks(l.clone(), t.substitute(value)),
            a => a.clone(),
        }
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::True => f.write_str("true"),
            Atom::False => f.write_str("false"),
            Atom::Key(t) => write!(f, "key({t})"),
            Atom::RegionIs(r) => write!(f, "region({r})"),
            Atom::ListHas(l, t) => write!(f, "in({l}, {t})"),
            Atom::ListLacks(l, t) => write!(f, "notin({l}, {t})"),
            Atom::TimeAfter(t) => write!(f, "after({t})"),
            Atom::FdOnly => f.write_str("fdonly"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuleError {
    #[error("variable used in `{0}` is not bound by a key(X) atom of the same conjunct")]
    UnboundVariable(String),
    #[error("identifier `{0}` is not valid")]
    BadIdentifier(String),
    #[error("atom `{0}` is not allowed in a declassification trigger")]
    BadTrigger(String),
}

/// A conjunction of atoms in normal form.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Conjunct(BTreeSet<Atom>);

impl Conjunct {
    /// Normalizes a raw atom set. Returns `None` when the conjunction is
    /// unsatisfiable. The caller must have checked variable binding.
    fn normalize(raw: impl IntoIterator<Item = Atom>) -> Option<Conjunct> {
        let mut atoms: BTreeSet<Atom> = raw.into_iter().filter(|a| *a != Atom::True).collect();
        if atoms.contains(&Atom::False) {
            return None;
        }

        let ground_keys: BTreeSet<String> = atoms
            .iter()
            .filter_map(|a| match a {
                Atom::Key(Term::Id(p)) => Some(p.clone()),
                _ => None,
            })
            .collect();
        if ground_keys.len() > 1 {
            return None;
        }
        if let Some(p) = ground_keys.iter().next() {
            if atoms.iter().any(Atom::mentions_var) {
                atoms = atoms.iter().map(|a| a.substitute(p)).collect();
            }
        }
        // key(X) with no other use of X always holds.
        if atoms.contains(&Atom::key_var()) && atoms.iter().filter(|a| a.mentions_var()).count() == 1 {
            atoms.remove(&Atom::key_var());
        }

        let regions = atoms.iter().filter(|a| matches!(a, Atom::RegionIs(_))).count();
        if regions > 1 {
            return None;
        }
        for a in &atoms {
            if let Atom::ListHas(l, t) = a {
                if atoms.contains(&Atom::ListLacks(l.clone(), t.clone())) {
                    return None;
                }
            }
        }
        let latest = atoms
            .iter()
            .filter_map(|a| match a {
                Atom::TimeAfter(t) => Some(*t),
                _ => None,
            })
            .max();
        if let Some(latest) = latest {
            atoms.retain(|a| !matches!(a, Atom::TimeAfter(t) if *t != latest));
        }

        if atoms.is_empty() {
            atoms.insert(Atom::True);
        }
        Some(Conjunct(atoms))
    }

    pub fn atoms(&self) -> impl Iterator<Item = &Atom> {
        self.0.iter()
    }

    pub fn contains(&self, atom: &Atom) -> bool {
        self.0.contains(atom)
    }

    pub fn is_true(&self) -> bool {
        self.0.len() == 1 && self.0.contains(&Atom::True)
    }

    pub fn has_var(&self) -> bool {
        self.0.iter().any(Atom::mentions_var)
    }

    /// The ground principal named by a `key(p)` atom, if any.
    pub fn ground_key(&self) -> Option<&str> {
        self.0.iter().find_map(|a| match a {
            Atom::Key(Term::Id(p)) => Some(p.as_str()),
            _ => None,
        })
    }

    pub fn region(&self) -> Option<&Region> {
        self.0.iter().find_map(|a| match a {
            Atom::RegionIs(r) => Some(r),
            _ => None,
        })
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn is_subset(&self, other: &Conjunct) -> bool {
        self.0.is_subset(&other.0)
    }
}

impl fmt::Display for Conjunct {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, a) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" & ")?;
            }
            write!(f, "{a}")?;
        }
        Ok(())
    }
}

fn check_conjunct(atoms: &[Atom]) -> Result<(), RuleError> {
    for a in atoms {
        let idents: Vec<&str> = match a {
            Atom::Key(Term::Id(p)) => vec![p],
            Atom::RegionIs(r) => vec![r.as_str()],
            Atom::ListHas(l, t) | Atom::ListLacks(l, t) => match t {
                Term::Id(e) => vec![l.as_str(), e],
                Term::Var => vec![l.as_str()],
            },
            _ => vec![],
        };
        if let Some(bad) = idents.into_iter().find(|s| !is_ident(s)) {
            return Err(RuleError::BadIdentifier(bad.to_owned()));
        }
    }
    let bound = atoms.contains(&Atom::key_var());
    if let Some(unbound) = atoms.iter().find(|a| a.mentions_var() && !bound) {
        return Err(RuleError::UnboundVariable(unbound.to_string()));
    }
    Ok(())
}

/// A rule in disjunctive normal form. The empty rule is FALSE.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Rule {
    disjuncts: BTreeSet<Conjunct>,
}

impl Rule {
    /// The most restrictive rule: nobody.
    pub fn falsity() -> Rule {
        Rule::default()
    }

    /// The all-permissive rule.
    pub fn truth() -> Rule {
        Rule { disjuncts: BTreeSet::from([Conjunct(BTreeSet::from([Atom::True]))]) }
    }

    /// `key(p)`.
    pub fn only(p: &str) -> Rule {
        Rule::from_conjuncts([vec![Atom::key(p)]]).expect("valid principal")
    }

    /// The rule that admits only descriptor transfers, used to recognize
    /// fd-only conduits from their update rule.
    pub fn fd_only() -> Rule {
        Rule { disjuncts: BTreeSet::from([Conjunct(BTreeSet::from([Atom::FdOnly]))]) }
    }

    /// Builds a normalized rule from raw conjunctions.
    pub fn from_conjuncts<I, C>(conjuncts: I) -> Result<Rule, RuleError>
    where
        I: IntoIterator<Item = C>,
        C: IntoIterator<Item = Atom>,
    {
        let mut raw = Vec::new();
        for c in conjuncts {
            let atoms: Vec<Atom> = c.into_iter().collect();
            check_conjunct(&atoms)?;
            raw.push(atoms);
        }
        Ok(Rule::normalized(raw.into_iter().filter_map(Conjunct::normalize)))
    }

    fn normalized(conjuncts: impl IntoIterator<Item = Conjunct>) -> Rule {
        let set: BTreeSet<Conjunct> = conjuncts.into_iter().collect();
        if set.iter().any(Conjunct::is_true) {
            return Rule::truth();
        }
        // Absorption: D | (D & E) == D.
        let kept = set.iter().filter(|d| !set.iter().any(|e| e != *d && e.is_subset(d))).cloned().collect();
        Rule { disjuncts: kept }
    }

    /// Re-normalizes; idempotent on any rule built through the public API.
    pub fn normalize(&self) -> Rule {
        Rule::normalized(self.disjuncts.iter().filter_map(|c| Conjunct::normalize(c.0.iter().cloned())))
    }

    pub fn disjuncts(&self) -> impl Iterator<Item = &Conjunct> {
        self.disjuncts.iter()
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.disjuncts.len()
    }

    pub fn is_false(&self) -> bool {
        self.disjuncts.is_empty()
    }

    pub fn is_true(&self) -> bool {
        self.disjuncts.len() == 1 && self.disjuncts.iter().next().is_some_and(Conjunct::is_true)
    }

    pub fn is_ground(&self) -> bool {
        !self.disjuncts.iter().any(Conjunct::has_var)
    }

    /// Disjunction.
    pub fn or(&self, other: &Rule) -> Rule {
        Rule::normalized(self.disjuncts.iter().chain(other.disjuncts.iter()).cloned())
    }

    /// Conjunction, distributed back into DNF. Both operands' variables denote
    /// the session principal, so merging them is sound.
    pub fn and(&self, other: &Rule) -> Rule {
        let mut out = Vec::with_capacity(self.len() * other.len());
        for a in &self.disjuncts {
            for b in &other.disjuncts {
                if let Some(c) = Conjunct::normalize(a.0.iter().chain(b.0.iter()).cloned()) {
                    out.push(c);
                }
            }
        }
        Rule::normalized(out)
    }

    /// Replaces every `region(from)` atom by `region(to)`.
    pub fn rebind_region(&self, from: &Region, to: &Region) -> Rule {
        let swap = |a: &Atom| match a {
            Atom::RegionIs(r) if r == from => Atom::RegionIs(to.clone()),
            a => a.clone(),
        };
        Rule::normalized(self.disjuncts.iter().filter_map(|c| Conjunct::normalize(c.0.iter().map(swap))))
    }

    pub fn mentions_region(&self) -> bool {
        self.disjuncts.iter().any(|c| c.region().is_some())
    }

    /// Every list referenced by the rule.
    pub fn lists(&self) -> BTreeSet<&ListId> {
        self.disjuncts
            .iter()
            .flat_map(|c| c.atoms())
            .filter_map(|a| match a {
                Atom::ListHas(l, _) | Atom::ListLacks(l, _) => Some(l),
                _ => None,
            })
            .collect()
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.disjuncts.is_empty() {
            return f.write_str("false");
        }
        for (i, c) in self.disjuncts.iter().enumerate() {
            if i > 0 {
                f.write_str(" | ")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

/// One relaxation: when `trigger` holds for the downstream conduit and the
/// global state, `result` replaces the read requirement.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Escape {
    pub trigger: Conjunct,
    pub result: Rule,
}

/// The declassify rule. The propagated requirement is always the policy's own
/// read rule; the escapes list how it may be relaxed.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct DeclassRule {
    escapes: BTreeSet<Escape>,
}

impl DeclassRule {
    /// No declassification.
    pub fn propagate() -> DeclassRule {
        DeclassRule::default()
    }

    /// Adds `until trigger => result`. Unsatisfiable triggers are dropped.
    pub fn with_escape(mut self, trigger: Vec<Atom>, result: Rule) -> Result<DeclassRule, RuleError> {
        for a in &trigger {
            match a {
                Atom::True | Atom::False | Atom::TimeAfter(_) | Atom::FdOnly => {}
                Atom::ListHas(_, Term::Id(_)) | Atom::ListLacks(_, Term::Id(_)) => {}
                other => return Err(RuleError::BadTrigger(other.to_string())),
            }
        }
        check_conjunct(&trigger)?;
        if let Some(trigger) = Conjunct::normalize(trigger) {
            self.escapes.insert(Escape { trigger, result });
        }
        Ok(self)
    }

    pub fn escapes(&self) -> impl Iterator<Item = &Escape> {
        self.escapes.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.escapes.is_empty()
    }
}

impl fmt::Display for DeclassRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("propagate")?;
        for e in &self.escapes {
            write!(f, " until {} => {}", e.trigger, e.result)?;
        }
        Ok(())
    }
}

/// Content hash of a policy's canonical text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PolicyHash([u8; 16]);

impl PolicyHash {
    pub fn of_text(text: &str) -> PolicyHash {
        let digest = Sha256::digest(text.as_bytes());
        let mut out = [0u8; 16];
        out.copy_from_slice(&digest[..16]);
        PolicyHash(out)
    }

    pub fn parse_hex(s: &str) -> Option<PolicyHash> {
        let bytes = hex::decode(s).ok()?;
        let arr: [u8; 16] = bytes.try_into().ok()?;
        Some(PolicyHash(arr))
    }
}

impl fmt::Display for PolicyHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

/// A conduit's three-rule policy. Immutable; the class id is computed once.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Policy {
    read: Rule,
    update: Rule,
    declassify: DeclassRule,
    class_id: PolicyHash,
}

impl Policy {
    pub fn new(read: Rule, update: Rule, declassify: DeclassRule) -> Policy {
        let text = Self::body_text(&read, &update, &declassify);
        Policy { class_id: PolicyHash::of_text(&text), read, update, declassify }
    }

    fn body_text(read: &Rule, update: &Rule, declassify: &DeclassRule) -> String {
        format!("read :- {read}; update :- {update}; declassify :- {declassify};")
    }

    pub fn read(&self) -> &Rule {
        &self.read
    }

    pub fn update(&self) -> &Rule {
        &self.update
    }

    pub fn declassify(&self) -> &DeclassRule {
        &self.declassify
    }

    pub fn class_id(&self) -> PolicyHash {
        self.class_id
    }

    /// Canonical text of the policy body; the class id hashes exactly this.
    pub fn serialize(&self) -> String {
        Self::body_text(&self.read, &self.update, &self.declassify)
    }

    /// Canonical text wrapped in a named block, as found in policy files.
    pub fn serialize_named(&self, name: &str) -> String {
        format!(
            "policy {name} {{ read :- {}; update :- {}; declassify :- {}; }}",
            self.read, self.update, self.declassify
        )
    }

    /// A copy with `region(from)` replaced by `region(to)` in the read rule
    /// and every escape result.
    pub fn rebind_region(&self, from: &Region, to: &Region) -> Policy {
        let mut declass = DeclassRule::propagate();
        for e in &self.declassify.escapes {
            declass.escapes.insert(Escape { trigger: e.trigger.clone(), result: e.result.rebind_region(from, to) });
        }
        Policy::new(self.read.rebind_region(from, to), self.update.clone(), declass)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize())
    }
}

/// One conjunct of a taint. `source` names the conduit class the policy came
/// from when the component was acquired by reading a conduit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaintComponent {
    pub source: Option<ClassId>,
    pub policy: Arc<Policy>,
}

/// A set of policies interpreted conjunctively. Components are keyed by class
/// id, so re-reading a class never grows the taint.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Taint {
    components: BTreeMap<PolicyHash, TaintComponent>,
}

impl Taint {
    pub fn empty() -> Taint {
        Taint::default()
    }

    pub fn of(policies: impl IntoIterator<Item = Arc<Policy>>) -> Taint {
        let mut t = Taint::empty();
        for p in policies {
            t.add(TaintComponent { source: None, policy: p });
        }
        t
    }

    /// Returns true if the component was new.
    pub fn add(&mut self, c: TaintComponent) -> bool {
        let key = c.policy.class_id();
        if self.components.contains_key(&key) {
            return false;
        }
        self.components.insert(key, c);
        true
    }

    pub fn components(&self) -> impl Iterator<Item = &TaintComponent> {
        self.components.values()
    }

    pub fn class_ids(&self) -> BTreeSet<PolicyHash> {
        self.components.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// The conjunction of every component's read requirement. The empty taint
    /// is TRUE.
    pub fn requirement(&self) -> Rule {
        self.components.values().fold(Rule::truth(), |acc, c| acc.and(c.policy.read()))
    }

    pub fn rebind_region(&self, from: &Region, to: &Region) -> Taint {
        let mut out = Taint::empty();
        for c in self.components.values() {
            out.add(TaintComponent { source: c.source.clone(), policy: Arc::new(c.policy.rebind_region(from, to)) });
        }
        out
    }
}

/// The parameters of an authenticated session.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SessionContext {
    pub principal: Principal,
    pub region: Region,
    pub clock: i64,
}

impl SessionContext {
    pub fn new(principal: &str, region: &str, clock: i64) -> SessionContext {
        SessionContext { principal: Principal::from(principal), region: Region::from(region), clock: clock.max(0) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rule(text: &str) -> Rule {
        parse_rule(text).unwrap()
    }

    #[test]
    fn constants() {
        assert!(Rule::falsity().is_false());
        assert!(Rule::truth().is_true());
        assert_eq!(Rule::falsity().to_string(), "false");
        assert_eq!(Rule::truth().to_string(), "true");
        assert_eq!(rule("true | key(alice)"), Rule::truth());
        assert_eq!(rule("false"), Rule::falsity());
        assert_eq!(rule("key(alice) & false | false"), Rule::falsity());
    }

    #[test]
    fn grounding_and_contradictions() {
        assert_eq!(rule("key(X) & key(alice) & in(l, X)"), rule("key(alice) & in(l, alice)"));
        assert!(rule("key(alice) & key(bob)").is_false());
        assert!(rule("region(r1) & region(r2)").is_false());
        assert!(rule("in(l, a) & notin(l, a)").is_false());
        assert_eq!(rule("after(5) & after(9)"), rule("after(9)"));
        assert_eq!(rule("key(X)"), Rule::truth());
    }

    #[test]
    fn absorption() {
        assert_eq!(rule("key(alice) | key(alice) & region(r1)"), rule("key(alice)"));
        let r = rule("key(bob) | key(X) & in(bob.friends, X)");
        assert_eq!(r.len(), 2);
        assert_eq!(r.normalize(), r);
    }

    #[test]
    fn conjunction_distributes() {
        let a = rule("key(alice) | key(bob)");
        let b = rule("region(r1)");
        assert_eq!(a.and(&b), rule("key(alice) & region(r1) | key(bob) & region(r1)"));
        assert_eq!(a.and(&Rule::falsity()), Rule::falsity());
        assert_eq!(a.and(&Rule::truth()), a);
    }

    #[test]
    fn class_id_ignores_construction_order() {
        let p1 = parse_policy("read :- key(b) | key(a); update :- true; declassify :- propagate;").unwrap();
        let p2 = parse_policy("update :- true; declassify :- propagate; read :- key(a) | key(b);").unwrap();
        assert_eq!(p1.class_id(), p2.class_id());
        assert_eq!(p1.serialize(), p2.serialize());
    }

    #[test]
    fn taint_dedups_by_class() {
        let p = Arc::new(parse_policy("read :- key(a); update :- true; declassify :- propagate;").unwrap());
        let mut t = Taint::empty();
        assert!(t.add(TaintComponent { source: None, policy: p.clone() }));
        assert!(!t.add(TaintComponent { source: Some(ClassId::from("c")), policy: p }));
        assert_eq!(t.len(), 1);
        assert!(Taint::empty().requirement().is_true());
    }

    #[test]
    fn region_rebinding() {
        let p = parse_policy("read :- key(a) & region(r1); update :- false; declassify :- propagate;").unwrap();
        let q = p.rebind_region(&Region::from("r1"), &Region::from("r2"));
        assert_eq!(q.read(), &rule("key(a) & region(r2)"));
        assert_ne!(p.class_id(), q.class_id());
    }
}
