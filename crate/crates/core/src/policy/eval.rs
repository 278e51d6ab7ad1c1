//! Model semantics of rules: evaluation against a concrete session and
//! metadata state.

use thiserror::Error;

use super::{Atom, Conjunct, Rule, Term};
use crate::model::ListId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("metadata list `{0}` does not exist")]
    MissingList(ListId),
}

/// Read access to metadata lists.
pub trait Lists {
    /// `None` when the list does not exist.
    fn list_contains(&self, list: &ListId, entry: &str) -> Option<bool>;
}

/// Everything an atom can be evaluated against.
#[derive(Clone, Copy)]
pub struct Facts<'a> {
    pub principal: &'a str,
    pub region: &'a str,
    pub clock: i64,
    /// The flow being judged carries only descriptors.
    pub descriptor_only: bool,
    pub lists: &'a dyn Lists,
}

impl<'a> Facts<'a> {
    pub fn new(principal: &'a str, region: &'a str, clock: i64, lists: &'a dyn Lists) -> Facts<'a> {
        Facts { principal, region, clock, descriptor_only: false, lists }
    }

    fn resolve<'t>(&self, t: &'t Term) -> &'t str
    where
        'a: 't,
    {
        match t {
            Term::Var => self.principal,
            Term::Id(s) => s,
        }
    }

    fn member(&self, list: &ListId, t: &Term) -> Result<bool, EvalError> {
        self.lists.list_contains(list, self.resolve(t)).ok_or_else(|| EvalError::MissingList(list.clone()))
    }
}

fn eval_atom(a: &Atom, f: &Facts<'_>) -> Result<bool, EvalError> {
    Ok(match a {
        Atom::True => true,
        Atom::False => false,
        Atom::Key(Term::Var) => true,
        Atom::Key(Term::Id(p)) => f.principal == p,
        Atom::RegionIs(r) => f.region == r.as_str(),
        Atom::ListHas(l, t) => f.member(l, t)?,
        Atom::ListLacks(l, t) => !f.member(l, t)?,
        Atom::TimeAfter(t) => f.clock > *t,
        Atom::FdOnly => f.descriptor_only,
    })
}

/// Evaluates one conjunct. A missing list is an error even if another atom
/// already failed, so callers see the problem consistently.
pub fn eval_conjunct(c: &Conjunct, f: &Facts<'_>) -> Result<bool, EvalError> {
    let mut all = true;
    for a in c.atoms() {
        all &= eval_atom(a, f)?;
    }
    Ok(all)
}

/// True if some disjunct holds. Disjuncts over missing lists are skipped; if
/// none holds and one was skipped the error is returned so fail-closed
/// callers can treat it as false.
pub fn eval_rule(r: &Rule, f: &Facts<'_>) -> Result<bool, EvalError> {
    let mut first_err = None;
    for c in r.disjuncts() {
        match eval_conjunct(c, f) {
            Ok(true) => return Ok(true),
            Ok(false) => {}
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(false),
    }
}
