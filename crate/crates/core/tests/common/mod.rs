//! Random rules and metadata states over a small universe.

#![allow(dead_code)]

use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shai_core::analyzer::Manifest;
use shai_core::meta::MetadataView;
use shai_core::model::ListId;
use shai_core::policy::{parse_policy_file, parse_rule, PolicySet, Rule};

pub const PRINCIPALS: [&str; 4] = ["alice", "bob", "carol", "dave"];
pub const REGIONS: [&str; 2] = ["r0", "r1"];
pub const LISTS: [&str; 3] = ["l0", "l1", "l2"];
pub const TIMES: [i64; 3] = [5, 10, 15];

pub struct Gen {
    pub rng: ChaCha8Rng,
}

impl Gen {
    pub fn new(seed: u64) -> Gen {
        Gen { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn pick<'a>(&mut self, xs: &'a [&'a str]) -> &'a str {
        xs.choose(&mut self.rng).expect("non-empty")
    }

    pub fn atom(&mut self) -> String {
        match self.rng.random_range(0..10) {
            0 | 1 => format!("key({})", self.pick(&PRINCIPALS)),
            2 => "key(X)".into(),
            3 | 4 => format!("region({})", self.pick(&REGIONS)),
            5 => format!("in({}, {})", self.pick(&LISTS), self.pick(&PRINCIPALS)),
            6 => format!("notin({}, {})", self.pick(&LISTS), self.pick(&PRINCIPALS)),
            7 => format!("in({}, X)", self.pick(&LISTS)),
            8 => format!("after({})", TIMES.choose(&mut self.rng).unwrap()),
            _ => format!("notin({}, X)", self.pick(&LISTS)),
        }
    }

    pub fn conjunct(&mut self) -> Vec<String> {
        let n = self.rng.random_range(1..=3);
        let mut atoms: Vec<String> = (0..n).map(|_| self.atom()).collect();
        if atoms.iter().any(|a| a.contains('X')) && !atoms.iter().any(|a| a == "key(X)") {
            atoms.push("key(X)".into());
        }
        atoms
    }

    pub fn dnf(&mut self) -> Vec<Vec<String>> {
        let n = self.rng.random_range(1..=3);
        (0..n).map(|_| self.conjunct()).collect()
    }

    /// A weaker variant: atoms dropped and occasionally a disjunct added.
    pub fn weaken(&mut self, d: &[Vec<String>]) -> Vec<Vec<String>> {
        let mut out: Vec<Vec<String>> = d
            .iter()
            .map(|c| {
                let mut kept: Vec<String> = c.iter().filter(|_| self.rng.random_bool(0.7)).cloned().collect();
                if kept.iter().any(|a| a.contains('X')) && !kept.iter().any(|a| a == "key(X)") {
                    kept.push("key(X)".into());
                }
                if kept.is_empty() {
                    kept.push("true".into());
                }
                kept
            })
            .collect();
        if self.rng.random_bool(0.3) {
            out.push(self.conjunct());
        }
        out
    }

    pub fn text(d: &[Vec<String>]) -> String {
        d.iter().map(|c| c.join(" & ")).collect::<Vec<_>>().join(" | ")
    }

    pub fn rule(&mut self) -> Rule {
        match self.rng.random_range(0..40) {
            0 => Rule::truth(),
            1 => Rule::falsity(),
            _ => parse_rule(&Gen::text(&self.dnf())).expect("generated rules parse"),
        }
    }

    /// A (restrictive, permissive) pair; often related so that checks succeed.
    pub fn pair(&mut self) -> (Rule, Rule) {
        let d1 = self.dnf();
        let r1 = parse_rule(&Gen::text(&d1)).expect("parses");
        let r2 = if self.rng.random_bool(0.6) {
            parse_rule(&Gen::text(&self.weaken(&d1))).expect("parses")
        } else {
            self.rule()
        };
        (r1, r2)
    }

    pub fn meta(&mut self) -> MetadataView {
        let mut m = MetadataView::new(*[0, 7, 12, 20].choose(&mut self.rng).unwrap());
        for l in LISTS {
            let entries: Vec<String> =
                PRINCIPALS.iter().filter(|_| self.rng.random_bool(0.5)).map(|p| p.to_string()).collect();
            m.set_list(ListId::from(l), entries);
        }
        m
    }
}

pub struct Setup {
    pub manifest: Manifest,
    pub policies: PolicySet,
    pub meta: MetadataView,
}

/// Worker-shaped tasks (`key(u) & region(r)`) reading and writing classes
/// with random read rules.
pub fn setup(seed: u64) -> Setup {
    let mut g = Gen::new(seed);
    let mut pol = String::new();
    let mut man = String::new();
    let kinds = g.rng.random_range(2..6);
    for k in 0..kinds {
        let read = g.rule();
        let _ = writeln!(pol, "policy p{k} {{ read :- {read}; update :- true; declassify :- propagate; }}");
    }
    for (i, u) in PRINCIPALS.iter().enumerate() {
        let r = REGIONS[i % REGIONS.len()];
        let _ = writeln!(
            pol,
            "policy w.{u} {{ read :- key({u}) & region({r}); update :- false; declassify :- propagate; }}"
        );
        let _ = writeln!(man, "task t.{u} user={u} region={r} taint=w.{u}");
    }
    let classes = g.rng.random_range(1..12);
    for c in 0..classes {
        let _ = writeln!(man, "class c{c} policy=p{} members=docs/c{c}/*", g.rng.random_range(0..kinds));
        for u in PRINCIPALS {
            if g.rng.random_bool(0.6) {
                let _ = writeln!(man, "reads t.{u} c{c}");
            }
            if g.rng.random_bool(0.3) {
                let _ = writeln!(man, "writes t.{u} c{c}");
            }
        }
    }
    Setup { manifest: Manifest::parse(&man).unwrap(), policies: parse_policy_file(&pol).unwrap(), meta: g.meta() }
}
