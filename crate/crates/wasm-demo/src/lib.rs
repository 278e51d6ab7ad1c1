//! Browser bindings: a restrictiveness checker with a brute-force cross
//! check, session amortization on a small generated corpus, and a
//! misprediction sweep.

use std::fmt::Write as _;

use shai_core::bench::{run, sweep, RunConfig};
use shai_core::monitor::Mode;
use shai_core::pipeline::{Corpus, CorpusSpec};
use shai_core::policy::parse_rule;
use shai_core::restrict::is_as_restr;
use shai_core::restrict::oracle::{implies_at, semantic_implies, Universe};
use shai_core::{ListId, MetadataView};
use wasm_bindgen::prelude::wasm_bindgen;

/// `name: entry entry ...` per line; blank lines and `#` comments skipped.
fn parse_lists(text: &str, clock: i64) -> Result<MetadataView, String> {
    let mut meta = MetadataView::new(clock);
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (name, entries) =
            line.split_once(':').ok_or_else(|| format!("lists line {}: expected `name: entries`", i + 1))?;
        meta.set_list(ListId::new(name.trim()), entries.split_whitespace().map(str::to_owned));
    }
    Ok(meta)
}

fn numbers<T: std::str::FromStr>(text: &str) -> Result<Vec<T>, String> {
    text.split(',').map(|s| s.trim().parse::<T>().map_err(|_| format!("`{}` is not a number", s.trim()))).collect()
}

fn demo_corpus() -> Result<Corpus, String> {
    Corpus::generate(&CorpusSpec { users: 24, docs: 300, regions: 3, seed: 7, ..CorpusSpec::default() })
        .map_err(|e| e.to_string())
}

fn check_inner(r1: &str, r2: &str, lists: &str, clock: i64) -> Result<String, String> {
    let r1 = parse_rule(r1).map_err(|e| format!("rule 1: {e}"))?;
    let r2 = parse_rule(r2).map_err(|e| format!("rule 2: {e}"))?;
    let meta = parse_lists(lists, clock)?;
    let res = is_as_restr(&r1, &r2, &meta);
    let mut out = String::new();
    let verdict = if res.okay { "at least as restrictive" } else { "not shown to be at least as restrictive" };
    let _ = writeln!(out, "{r1}\n  is {verdict} as\n{r2}\n");
    if res.okay {
        if res.conds.is_empty() {
            out.push_str("holds in every metadata state\n");
        } else {
            out.push_str("valid while:\n");
            for c in &res.conds {
                let _ = writeln!(out, "  {c}");
            }
        }
        if !res.regions.is_empty() {
            let regions: Vec<String> = res.regions.iter().map(ToString::to_string).collect();
            let _ = writeln!(out, "only for sessions in: {}", regions.join(", "));
        }
    }
    let u = Universe::covering(&[&r1, &r2], clock);
    match implies_at(&r1, &r2, &meta, &u) {
        Ok(v) => {
            let _ =
                writeln!(out, "\nbrute force on these lists: {}", if v { "implies" } else { "counterexample found" });
        }
        Err(e) => {
            let _ = writeln!(out, "\nbrute force skipped: {e}");
        }
    }
    if res.okay {
        if let Ok(v) = semantic_implies(&r1, &r2, &res.conds, &u) {
            let _ =
                writeln!(out, "brute force under the recorded conditions: {}", if v { "implies" } else { "VIOLATED" });
        }
    }
    Ok(out)
}

/// Checks whether `r1` is at least as restrictive as `r2`.
#[wasm_bindgen]
pub fn check(r1: &str, r2: &str, lists: &str, clock: i64) -> String {
    check_inner(r1, r2, lists, clock).unwrap_or_else(|e| format!("error: {e}"))
}

fn amortize_inner(lens: &str, sessions: usize) -> Result<String, String> {
    let lens: Vec<usize> = numbers(lens)?;
    if lens.contains(&0) || sessions == 0 {
        return Err("session lengths and counts must be positive".into());
    }
    let cfg = RunConfig {
        modes: vec![Mode::Dynamic, Mode::Shai],
        points: lens.iter().map(|&l| (l, sessions)).collect(),
        ..RunConfig::default()
    };
    let report = run(&demo_corpus()?, &cfg).map_err(|e| e.to_string())?;
    Ok(report.to_text())
}

/// Interceptions per query at each comma-separated session length.
#[wasm_bindgen]
pub fn amortize(lens: &str, sessions: usize) -> String {
    amortize_inner(lens, sessions).unwrap_or_else(|e| format!("error: {e}"))
}

fn mispredict_inner(fractions: &str, len: usize, sessions: usize) -> Result<String, String> {
    let fractions: Vec<f64> = numbers(fractions)?;
    let cfg = RunConfig { modes: vec![Mode::Dynamic, Mode::Shai], ..RunConfig::default() };
    let report = sweep(&demo_corpus()?, &cfg, &fractions, (len, sessions)).map_err(|e| e.to_string())?;
    Ok(report.to_text())
}

/// Slow-path interceptions at each comma-separated mispredict fraction.
#[wasm_bindgen]
pub fn mispredict(fractions: &str, len: usize, sessions: usize) -> String {
    mispredict_inner(fractions, len, sessions).unwrap_or_else(|e| format!("error: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn friend_rule_needs_a_list_condition() {
        let out = check("key(bob)", "in(friends.alice, X) & key(X)", "friends.alice: bob carol", 0);
        assert!(out.contains("is at least as restrictive"), "{out}");
        assert!(out.contains("inc:friends.alice:bob"), "{out}");
        assert!(!out.contains("VIOLATED"));
        let out = check("key(dave)", "in(friends.alice, X) & key(X)", "friends.alice: bob carol", 0);
        assert!(out.contains("not shown"), "{out}");
        assert!(out.contains("counterexample"), "{out}");
    }

    #[test]
    fn bad_input_is_reported() {
        assert!(check("frob(a)", "true", "", 0).starts_with("error: rule 1"));
        assert!(check("true", "true", "no colon here", 0).starts_with("error: lists line 1"));
        assert!(amortize("1,x", 5).starts_with("error"));
        assert!(mispredict("2.0", 4, 5).starts_with("error"));
    }

    #[test]
    fn cost_tables_render() {
        let a = amortize("1,8", 5);
        assert!(a.contains("shai") && a.contains("dynamic"), "{a}");
        let s = mispredict("0,1", 4, 5);
        assert!(s.contains("R^2"), "{s}");
    }
}
