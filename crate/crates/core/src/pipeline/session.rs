//! Session scripts and workload generation.
//!
//! ```text
//! session u001 r1 w000,w003;w001
//! session u002 r2 -
//! session u003 r0 w002;open:docs/private/u004/d00017;kv:u005
//! ```
//!
//! Each `;`-separated item is a keyword query, a direct document open
//! (`open:`) or a profile lookup (`kv:`). `-` is a session without queries.

use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::corpus::Corpus;
use crate::model::{ConduitId, Principal, Region};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionOp {
    Query(Vec<String>),
    /// The worker opens a document directly instead of going through the
    /// engine.
    Open(ConduitId),
    /// The worker fetches a user's profile.
    Profile(Principal),
}

impl fmt::Display for SessionOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SessionOp::Query(words) => f.write_str(&words.join(",")),
            SessionOp::Open(id) => write!(f, "open:{id}"),
            SessionOp::Profile(u) => write!(f, "kv:{u}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionScript {
    pub user: Principal,
    pub region: Region,
    pub ops: Vec<SessionOp>,
}

impl SessionScript {
    pub fn queries(&self) -> usize {
        self.ops.len()
    }
}

impl fmt::Display for SessionScript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "session {} {} ", self.user, self.region)?;
        if self.ops.is_empty() {
            return f.write_str("-");
        }
        for (i, op) in self.ops.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            write!(f, "{op}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {msg}")]
pub struct ScriptError {
    pub line: usize,
    pub msg: String,
}

fn parse_op(item: &str) -> SessionOp {
    if let Some(id) = item.strip_prefix("open:") {
        SessionOp::Open(ConduitId::from(id))
    } else if let Some(u) = item.strip_prefix("kv:") {
        SessionOp::Profile(Principal::from(u))
    } else {
        SessionOp::Query(item.split(',').filter(|w| !w.is_empty()).map(str::to_owned).collect())
    }
}

pub fn parse_sessions(text: &str) -> Result<Vec<SessionScript>, ScriptError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: &str| ScriptError { line: i + 1, msg: msg.to_owned() };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [kw, user, region, rest @ ..] = fields.as_slice() else {
            return Err(err("expected `session <user> <region> <queries>`"));
        };
        if *kw != "session" {
            return Err(err("expected `session`"));
        }
        let ops = match rest {
            [] | ["-"] => Vec::new(),
            [items] => items.split(';').map(parse_op).collect(),
            _ => return Err(err("queries must not contain spaces")),
        };
        out.push(SessionScript { user: Principal::from(*user), region: Region::from(*region), ops });
    }
    Ok(out)
}

pub fn render_sessions(scripts: &[SessionScript]) -> String {
    scripts.iter().map(|s| format!("{s}\n")).collect()
}

/// Parameters for generated session scripts.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub session_len: usize,
    pub sessions: usize,
    /// Share of sessions that connect from a region other than the user's
    /// home region.
    pub mispredict: f64,
    /// Queries draw from this many of the most frequent words.
    pub hot_words: usize,
    pub words_per_query: usize,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> WorkloadSpec {
        WorkloadSpec { session_len: 8, sessions: 100, mispredict: 0.0, hot_words: 8, words_per_query: 2, seed: 7 }
    }
}

/// Keyword-query sessions over random users. The mispredicted sessions are
/// a prefix of a fixed random order, so raising `mispredict` only adds
/// mispredicted sessions.
pub fn workload(corpus: &Corpus, spec: &WorkloadSpec) -> Vec<SessionScript> {
    if corpus.users.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let hot = corpus.frequent_words(spec.hot_words);
    let mut scripts: Vec<SessionScript> = (0..spec.sessions)
        .map(|_| {
            let user = corpus.users.choose(&mut rng).expect("non-empty");
            let ops = (0..spec.session_len)
                .map(|_| SessionOp::Query(hot.choose_multiple(&mut rng, spec.words_per_query).cloned().collect()))
                .collect();
            SessionScript { user: user.id.clone(), region: user.home.clone(), ops }
        })
        .collect();
    let mut order: Vec<usize> = (0..scripts.len()).collect();
    order.shuffle(&mut rng);
    let n = (spec.mispredict.clamp(0.0, 1.0) * scripts.len() as f64).round() as usize;
    for &i in &order[..n] {
        scripts[i].region = away_region(corpus, &scripts[i].region);
    }
    scripts
}

/// The next region after `home`, or `home` itself if there is only one.
pub fn away_region(corpus: &Corpus, home: &Region) -> Region {
    let pos = corpus.regions.iter().position(|r| r == home).unwrap_or(0);
    corpus.regions.get((pos + 1) % corpus.regions.len().max(1)).cloned().unwrap_or_else(|| home.clone())
}

/// Random mixed traces: queries, direct opens of arbitrary documents and
/// profile lookups, from home or away regions.
pub fn random_traces(corpus: &Corpus, sessions: usize, max_ops: usize, seed: u64) -> Vec<SessionScript> {
    if corpus.users.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hot = corpus.frequent_words(12);
    (0..sessions)
        .map(|_| {
            let user = corpus.users.choose(&mut rng).expect("non-empty");
            let region = if rng.random_bool(0.3) {
                corpus.regions.choose(&mut rng).cloned().unwrap_or_else(|| user.home.clone())
            } else {
                user.home.clone()
            };
            let ops = (0..rng.random_range(0..=max_ops))
                .map(|_| match rng.random_range(0..4) {
                    0 if !corpus.docs.is_empty() => {
                        SessionOp::Open(corpus.docs.choose(&mut rng).expect("non-empty").id.clone())
                    }
                    1 => SessionOp::Profile(corpus.users.choose(&mut rng).expect("non-empty").id.clone()),
                    _ => SessionOp::Query(hot.choose_multiple(&mut rng, 2).cloned().collect()),
                })
                .collect();
            SessionScript { user: user.id.clone(), region, ops }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::corpus::CorpusSpec;

    #[test]
    fn scripts_round_trip() {
        let text = "session u001 r1 a,b;open:docs/public/d00001;kv:u002\nsession u002 r0 -\n# comment\n";
        let s = parse_sessions(text).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].ops[1], SessionOp::Open("docs/public/d00001".into()));
        assert!(s[1].ops.is_empty());
        assert_eq!(render_sessions(&s), "session u001 r1 a,b;open:docs/public/d00001;kv:u002\nsession u002 r0 -\n");
        assert_eq!(parse_sessions("session u1\n").unwrap_err().line, 1);
        assert!(parse_sessions("sess u1 r0 -\n").is_err());
    }

    #[test]
    fn mispredicted_sessions_nest() {
        let c = Corpus::generate(&CorpusSpec { users: 20, docs: 50, ..CorpusSpec::default() }).unwrap();
        let spec = |m| WorkloadSpec { sessions: 40, mispredict: m, ..WorkloadSpec::default() };
        let away = |m| -> Vec<bool> {
            workload(&c, &spec(m)).iter().map(|s| c.user(s.user.as_str()).unwrap().home != s.region).collect()
        };
        let (half, all) = (away(0.5), away(1.0));
        assert_eq!(half.iter().filter(|a| **a).count(), 20);
        assert!(all.iter().all(|a| *a));
        assert!(away(0.0).iter().all(|a| !*a));
        assert!(half.iter().zip(&away(0.75)).all(|(h, t)| !*h || *t));
    }
}
