//! The pipeline manifest: task instances, expected accesses and conduit
//! classes.
//!
//! ```text
//! task worker_alice user=alice region=r0 taint=worker.alice
//! task indexer user=indexer region=* taint=engine active=1
//! class docs.public policy=public members=docs/public/*
//! reads worker_alice docs.public
//! writes indexer index
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use globset::{Glob, GlobMatcher};
use thiserror::Error;

use crate::model::{is_ident, ClassId, Principal, Region, TaskId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ManifestError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: task `{task}` is not declared")]
    UnknownTask { line: usize, task: String },
    #[error("line {line}: class `{class}` is not declared")]
    UnknownClass { line: usize, class: String },
    #[error("line {line}: `{name}` declared twice")]
    Duplicate { line: usize, name: String },
}

/// A task instance specialized to predicted runtime parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub user: Principal,
    /// `None` for tasks not bound to a region (`region=*`).
    pub region: Option<Region>,
    /// Policy names whose conjunction is the instance's steady-state taint.
    pub taint: Vec<String>,
    pub active: bool,
}

/// A named group of conduits sharing one policy.
#[derive(Debug, Clone)]
pub struct ClassSpec {
    pub policy: String,
    pub members: String,
    matcher: GlobMatcher,
}

impl PartialEq for ClassSpec {
    fn eq(&self, other: &Self) -> bool {
        self.policy == other.policy && self.members == other.members
    }
}

impl ClassSpec {
    pub fn new(policy: &str, members: &str) -> Result<ClassSpec, globset::Error> {
        let matcher = Glob::new(members)?.compile_matcher();
        Ok(ClassSpec { policy: policy.to_owned(), members: members.to_owned(), matcher })
    }

    pub fn matches(&self, conduit: &str) -> bool {
        self.matcher.is_match(conduit)
    }

    /// The literal part of the glob before the first metacharacter.
    pub fn literal_prefix(&self) -> &str {
        let end = self.members.find(['*', '?', '[', '{']).unwrap_or(self.members.len());
        &self.members[..end]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub tasks: BTreeMap<TaskId, TaskSpec>,
    pub classes: BTreeMap<ClassId, ClassSpec>,
    pub reads: BTreeSet<(TaskId, ClassId)>,
    pub writes: BTreeSet<(TaskId, ClassId)>,
}

fn kv<'a>(field: &'a str, key: &str, line: usize) -> Result<&'a str, ManifestError> {
    field
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .ok_or_else(|| ManifestError::Syntax { line, msg: format!("expected `{key}=...`, found `{field}`") })
}

fn ident(s: &str, line: usize) -> Result<&str, ManifestError> {
    if is_ident(s) {
        Ok(s)
    } else {
        Err(ManifestError::Syntax { line, msg: format!("bad identifier `{s}`") })
    }
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Manifest, ManifestError> {
        let mut m = Manifest::default();
        let mut accesses = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            let syntax = |msg: &str| ManifestError::Syntax { line, msg: msg.to_owned() };
            match fields[0] {
                "task" => {
                    if !(5..=6).contains(&fields.len()) {
                        return Err(syntax("expected `task ID user=P region=R taint=P1,... [active=0|1]`"));
                    }
                    let id = ident(fields[1], line)?;
                    let user = ident(kv(fields[2], "user", line)?, line)?;
                    let region = match kv(fields[3], "region", line)? {
                        "*" => None,
                        r => Some(Region::from(ident(r, line)?)),
                    };
                    let taint = kv(fields[4], "taint", line)?;
                    let taint = if taint.is_empty() {
                        Vec::new()
                    } else {
                        taint.split(',').map(|p| ident(p, line).map(str::to_owned)).collect::<Result<_, _>>()?
                    };
                    let active = match fields.get(5) {
                        None => true,
                        Some(f) => match kv(f, "active", line)? {
                            "1" => true,
                            "0" => false,
                            _ => return Err(syntax("active must be 0 or 1")),
                        },
                    };
                    let spec = TaskSpec { user: Principal::from(user), region, taint, active };
                    if m.tasks.insert(TaskId::from(id), spec).is_some() {
                        return Err(ManifestError::Duplicate { line, name: id.to_owned() });
                    }
                }
                "class" => {
                    if fields.len() != 4 {
                        return Err(syntax("expected `class ID policy=NAME members=GLOB`"));
                    }
                    let id = ident(fields[1], line)?;
                    let policy = ident(kv(fields[2], "policy", line)?, line)?;
                    let members = kv(fields[3], "members", line)?;
                    let spec = ClassSpec::new(policy, members).map_err(|e| syntax(&format!("bad glob: {e}")))?;
                    if m.classes.insert(ClassId::from(id), spec).is_some() {
                        return Err(ManifestError::Duplicate { line, name: id.to_owned() });
                    }
                }
                kind @ ("reads" | "writes") => {
                    if fields.len() != 3 {
                        return Err(syntax(&format!("expected `{kind} TASK CLASS`")));
                    }
                    accesses.push((line, kind == "reads", TaskId::from(fields[1]), ClassId::from(fields[2])));
                }
                other => return Err(syntax(&format!("unknown directive `{other}`"))),
            }
        }
        for (line, is_read, task, class) in accesses {
            if !m.tasks.contains_key(&task) {
                return Err(ManifestError::UnknownTask { line, task: task.to_string() });
            }
            if !m.classes.contains_key(&class) {
                return Err(ManifestError::UnknownClass { line, class: class.to_string() });
            }
            if is_read {
                m.reads.insert((task, class));
            } else {
                m.writes.insert((task, class));
            }
        }
        Ok(m)
    }

    /// The class a conduit belongs to: the first class, in id order, whose
    /// glob matches.
    pub fn class_of(&self, conduit: &str) -> Option<&ClassId> {
        self.classes.iter().find(|(_, c)| c.matches(conduit)).map(|(id, _)| id)
    }
}

impl fmt::Display for Manifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (id, t) in &self.tasks {
            let region = t.region.as_ref().map_or("*", |r| r.as_str());
            write!(f, "task {id} user={} region={region} taint={}", t.user, t.taint.join(","))?;
            if !t.active {
                f.write_str(" active=0")?;
            }
            writeln!(f)?;
        }
        for (id, c) in &self.classes {
            writeln!(f, "class {id} policy={} members={}", c.policy, c.members)?;
        }
        for (t, c) in &self.reads {
            writeln!(f, "reads {t} {c}")?;
        }
        for (t, c) in &self.writes {
            writeln!(f, "writes {t} {c}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "\
# sample
task worker_alice user=alice region=r0 taint=worker.alice
task indexer user=indexer region=* taint=engine active=0
class docs.public policy=public members=docs/public/*
class profile.alice policy=profile.alice members=kv/profile:alice
reads worker_alice docs.public
writes indexer docs.public
";

    #[test]
    fn parses_and_round_trips() {
        let m = Manifest::parse(TEXT).unwrap();
        assert_eq!(m.tasks.len(), 2);
        assert!(!m.tasks[&TaskId::from("indexer")].active);
        assert_eq!(m.tasks[&TaskId::from("indexer")].region, None);
        assert_eq!(m.class_of("docs/public/d17"), Some(&ClassId::from("docs.public")));
        assert_eq!(m.class_of("docs/private/d17"), None);
        assert_eq!(m.classes[&ClassId::from("profile.alice")].literal_prefix(), "kv/profile:alice");
        assert_eq!(Manifest::parse(&m.to_string()).unwrap(), m);
    }

    #[test]
    fn rejects_dangling_references() {
        let e = Manifest::parse("reads ghost docs\n").unwrap_err();
        assert_eq!(e, ManifestError::UnknownTask { line: 1, task: "ghost".into() });
        let e = Manifest::parse("task t user=u region=* taint=\nreads t nope\n").unwrap_err();
        assert_eq!(e, ManifestError::UnknownClass { line: 2, class: "nope".into() });
        assert!(matches!(Manifest::parse("frobnicate\n"), Err(ManifestError::Syntax { line: 1, .. })));
    }
}
