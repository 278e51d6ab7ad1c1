//! Brute-force semantic implication over finite universes.
//!
//! This evaluator shares no code with the kernel or with
//! [`crate::policy::eval_rule`]; it exists to test them. A model fixes the
//! session principal and region, the clock, whether the flow is
//! descriptor-only, and the membership of every (list, entry) pair the rules
//! can observe.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::{Conds, StateCondition};
use crate::meta::MetadataView;
use crate::policy::{Atom, Rule, Term};

/// Upper bound on enumerated models per query.
pub const MAX_MODELS: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error("universe has {0} models, more than {MAX_MODELS}")]
    TooLarge(u64),
}

const FRESH_PRINCIPAL: &str = "~nobody";
const FRESH_REGION: &str = "~elsewhere";

/// The finite set of sessions and clocks to enumerate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Universe {
    pub principals: Vec<String>,
    pub regions: Vec<String>,
    pub clocks: Vec<i64>,
    pub descriptor_only: Vec<bool>,
}

fn collect(rules: &[&Rule], f: &mut impl FnMut(&Atom)) {
    for r in rules {
        for d in r.disjuncts() {
            for a in d.atoms() {
                f(a);
            }
        }
    }
}

impl Universe {
    /// Every principal, region and timestamp mentioned by `rules`, plus one
    /// unmentioned principal and region. Clocks never go below `clock_floor`.
    pub fn covering(rules: &[&Rule], clock_floor: i64) -> Universe {
        let mut principals = BTreeSet::new();
        let mut regions = BTreeSet::new();
        let mut clocks = BTreeSet::from([clock_floor]);
        let mut fd = false;
        collect(rules, &mut |a| match a {
            Atom::Key(Term::Id(p)) | Atom::ListHas(_, Term::Id(p)) | Atom::ListLacks(_, Term::Id(p)) => {
                principals.insert(p.clone());
            }
            Atom::RegionIs(r) => {
                regions.insert(r.as_str().to_owned());
            }
            Atom::TimeAfter(t) => {
                clocks.extend([*t, t.saturating_add(1)]);
            }
            Atom::FdOnly => fd = true,
            _ => {}
        });
        principals.insert(FRESH_PRINCIPAL.to_owned());
        regions.insert(FRESH_REGION.to_owned());
        Universe {
            principals: principals.into_iter().collect(),
            regions: regions.into_iter().collect(),
            clocks: clocks.into_iter().filter(|c| *c >= clock_floor).collect(),
            descriptor_only: if fd { vec![false, true] } else { vec![false] },
        }
    }
}

struct Model<'a> {
    principal: &'a str,
    region: &'a str,
    clock: i64,
    descriptor_only: bool,
    members: &'a BTreeMap<(String, String), bool>,
}

fn term<'a>(t: &'a Term, m: &Model<'a>) -> &'a str {
    match t {
        Term::Var => m.principal,
        Term::Id(s) => s,
    }
}

fn member(list: &str, entry: &str, m: &Model<'_>) -> bool {
    m.members.get(&(list.to_owned(), entry.to_owned())).copied().unwrap_or(false)
}

fn holds(r: &Rule, m: &Model<'_>) -> bool {
    r.disjuncts().any(|d| {
        d.atoms().all(|a| match a {
            Atom::True => true,
            Atom::False => false,
            Atom::Key(t) => term(t, m) == m.principal,
            Atom::RegionIs(r) => r.as_str() == m.region,
            Atom::ListHas(l, t) => member(l.as_str(), term(t, m), m),
            Atom::ListLacks(l, t) => !member(l.as_str(), term(t, m), m),
            Atom::TimeAfter(t) => m.clock > *t,
            Atom::FdOnly => m.descriptor_only,
        })
    })
}

/// The (list, entry) pairs the rules observe when the session principal is `p`.
fn observed_pairs(rules: &[&Rule], p: &str) -> BTreeSet<(String, String)> {
    let mut out = BTreeSet::new();
    collect(rules, &mut |a| {
        if let Atom::ListHas(l, t) | Atom::ListLacks(l, t) = a {
            let e = match t {
                Term::Var => p.to_owned(),
                Term::Id(e) => e.clone(),
            };
            out.insert((l.as_str().to_owned(), e));
        }
    });
    out
}

fn fixed_by(conds: &Conds) -> BTreeMap<(String, String), bool> {
    conds
        .iter()
        .filter_map(|c| match c {
            StateCondition::ListIncludes(l, e) => Some(((l.as_str().to_owned(), e.clone()), true)),
            StateCondition::ListExcludes(l, e) => Some(((l.as_str().to_owned(), e.clone()), false)),
            StateCondition::PolicyEquals(..) => None,
        })
        .collect()
}

/// Enumerates models; `membership` decides, per principal, which pairs are
/// fixed and which are free.
fn for_all_models(
    r1: &Rule,
    r2: &Rule,
    u: &Universe,
    mut membership: impl FnMut(&str) -> (BTreeMap<(String, String), bool>, Vec<(String, String)>),
) -> Result<bool, OracleError> {
    let sessions = (u.regions.len() * u.clocks.len() * u.descriptor_only.len()) as u64;
    let mut plans = Vec::new();
    let mut total: u64 = 0;
    for p in &u.principals {
        let (fixed, free) = membership(p);
        let assignments = 1u64.checked_shl(free.len() as u32).unwrap_or(u64::MAX);
        total = total.saturating_add(assignments.saturating_mul(sessions));
        plans.push((p, fixed, free));
    }
    if total > MAX_MODELS {
        return Err(OracleError::TooLarge(total));
    }
    for (p, fixed, free) in plans {
        for bits in 0u64..(1u64 << free.len()) {
            let mut members = fixed.clone();
            for (i, pair) in free.iter().enumerate() {
                members.insert(pair.clone(), bits >> i & 1 == 1);
            }
            for region in &u.regions {
                for &clock in &u.clocks {
                    for &descriptor_only in &u.descriptor_only {
                        let m = Model { principal: p, region, clock, descriptor_only, members: &members };
                        if holds(r1, &m) && !holds(r2, &m) {
                            return Ok(false);
                        }
                    }
                }
            }
        }
    }
    Ok(true)
}

/// True iff every model of `r1` that satisfies the list conditions in `conds`
/// is a model of `r2`. List contents not fixed by `conds` range freely.
pub fn semantic_implies(r1: &Rule, r2: &Rule, conds: &Conds, u: &Universe) -> Result<bool, OracleError> {
    let fixed = fixed_by(conds);
    for_all_models(r1, r2, u, |p| {
        let free = observed_pairs(&[r1, r2], p).into_iter().filter(|k| !fixed.contains_key(k)).collect();
        (fixed.clone(), free)
    })
}

/// True iff every session of `u` allowed by `r1` is allowed by `r2`, with the
/// lists fixed to their contents in `meta`. Missing lists are empty.
pub fn implies_at(r1: &Rule, r2: &Rule, meta: &MetadataView, u: &Universe) -> Result<bool, OracleError> {
    for_all_models(r1, r2, u, |p| {
        let fixed = observed_pairs(&[r1, r2], p)
            .into_iter()
            .map(|(l, e)| {
                let present = meta.lists().any(|(id, list)| id.as_str() == l && list.entries.contains(&e));
                ((l, e), present)
            })
            .collect();
        (fixed, Vec::new())
    })
}
