//! Toy inverted index and ranked keyword search.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::model::{ConduitId, Principal, Region};

/// Token to document postings.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Index {
    postings: BTreeMap<String, BTreeSet<ConduitId>>,
}

impl Index {
    pub fn add(&mut self, doc: &ConduitId, text: &str) {
        for word in tokens(text) {
            self.postings.entry(word.to_owned()).or_default().insert(doc.clone());
        }
    }

    pub fn postings(&self, word: &str) -> Option<&BTreeSet<ConduitId>> {
        self.postings.get(word)
    }

    /// Number of (token, doc) pairs.
    pub fn len(&self) -> usize {
        self.postings.values().map(BTreeSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.postings.is_empty()
    }

    pub fn tokens(&self) -> usize {
        self.postings.len()
    }

    /// Splits the index into `shards` texts by a stable hash of the token.
    /// Each line is `token doc doc ...`.
    pub fn shard_texts(&self, shards: usize) -> Vec<String> {
        let mut out = vec![String::new(); shards.max(1)];
        for (word, docs) in &self.postings {
            let s = shard_of(word, out.len());
            out[s].push_str(word);
            for d in docs {
                let _ = write!(out[s], " {d}");
            }
            out[s].push('\n');
        }
        out
    }

    pub fn merge_shard(&mut self, text: &str) {
        for line in text.lines() {
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            self.postings.entry(word.to_owned()).or_default().extend(parts.map(ConduitId::from));
        }
    }

    /// The top `k` documents passing `visible`, scored by the number of
    /// distinct query words they contain; ties break by document id.
    pub fn search(&self, words: &[String], k: usize, visible: impl Fn(&ConduitId) -> bool) -> Vec<ConduitId> {
        let mut scores: BTreeMap<&ConduitId, usize> = BTreeMap::new();
        let distinct: BTreeSet<&str> = words.iter().map(String::as_str).collect();
        for w in distinct {
            for d in self.postings.get(w).into_iter().flatten() {
                *scores.entry(d).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&ConduitId, usize)> = scores.into_iter().filter(|(d, _)| visible(d)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.into_iter().take(k).map(|(d, _)| d.clone()).collect()
    }
}

fn tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_ascii_alphanumeric()).filter(|w| !w.is_empty())
}

fn shard_of(word: &str, shards: usize) -> usize {
    // FNV-1a, so shard assignment does not depend on the std hasher.
    let h = word.bytes().fold(0xcbf2_9ce4_8422_2325_u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3));
    (h % shards as u64) as usize
}

pub fn shard_id(i: usize) -> ConduitId {
    ConduitId::new(format!("index/shard-{i:02}"))
}

/// What the worker sends the engine: the session hint plus keywords.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryMsg {
    pub user: Principal,
    pub region: Region,
    pub words: Vec<String>,
}

impl QueryMsg {
    pub fn render(&self) -> String {
        format!("q {} {} {}", self.user, self.region, self.words.join(","))
    }

    pub fn parse(text: &str) -> Option<QueryMsg> {
        let mut parts = text.trim_end().splitn(4, ' ');
        if parts.next()? != "q" {
            return None;
        }
        let user = Principal::from(parts.next()?);
        let region = Region::from(parts.next()?);
        let words = parts.next().unwrap_or("").split(',').filter(|w| !w.is_empty()).map(str::to_owned).collect();
        Some(QueryMsg { user, region, words })
    }
}

/// The first line of a document.
pub fn snippet(text: &str) -> &str {
    text.lines().next().unwrap_or("")
}
