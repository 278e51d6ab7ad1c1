//! Text persistence of [`OaOutput`].
//!
//! ```text
//! oa-v1 <generatedAt> <checksum>
//! R worker_alice friends.bob polEq:friends.bob=<hash> inc:bob.friends:alice
//! R worker_alice docs.public polEq:docs.public=<hash> exc:blacklist.r0:public reg:r0
//! ```
//!
//! The checksum is the first 16 hex digits of the SHA-256 of everything after
//! the header line.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{CertifiedAccess, OaOutput};
use crate::model::{is_ident, AccessMode, ClassId, Region, TaskId};
use crate::restrict::StateCondition;

const MAGIC: &str = "oa-v1";

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("unsupported format `{0}`, expected {MAGIC}")]
    Version(String),
    #[error("file is truncated: {0}")]
    Truncated(&'static str),
    #[error("line {line}: {msg}")]
    BadLine { line: usize, msg: String },
    #[error("checksum mismatch: header says {expected}, content hashes to {actual}")]
    Checksum { expected: String, actual: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn checksum(body: &str) -> String {
    hex::encode(&Sha256::digest(body.as_bytes())[..8])
}

fn record(c: &CertifiedAccess, out: &mut String) {
    let mode = match c.mode {
        AccessMode::Read => 'R',
        AccessMode::Write => 'W',
    };
    let _ = write!(out, "{mode} {} {}", c.task, c.class);
    for cond in &c.conds {
        let _ = write!(out, " {cond}");
    }
    for r in &c.regions {
        let _ = write!(out, " reg:{r}");
    }
    out.push('\n');
}

/// Renders the output; identical outputs render byte-identically.
pub fn render_oa(out: &OaOutput) -> String {
    let mut body = String::new();
    for c in &out.certified {
        record(c, &mut body);
    }
    format!("{MAGIC} {} {}\n{body}", out.generated_at, checksum(&body))
}

fn parse_record(line_no: usize, line: &str) -> Result<CertifiedAccess, PersistError> {
    let bad = |msg: String| PersistError::BadLine { line: line_no, msg };
    let mut fields = line.split(' ');
    let mode = match fields.next() {
        Some("R") => AccessMode::Read,
        Some("W") => AccessMode::Write,
        other => return Err(bad(format!("bad mode `{}`", other.unwrap_or("")))),
    };
    let mut ident = |what: &str| -> Result<String, PersistError> {
        match fields.next() {
            Some(s) if is_ident(s) => Ok(s.to_owned()),
            other => Err(bad(format!("bad {what} `{}`", other.unwrap_or("")))),
        }
    };
    let task = TaskId::from(ident("task")?);
    let class = ClassId::from(ident("class")?);
    let mut conds = BTreeSet::new();
    let mut regions = BTreeSet::new();
    for tok in fields {
        if let Some(r) = tok.strip_prefix("reg:") {
            if !is_ident(r) {
                return Err(bad(format!("bad region `{r}`")));
            }
            regions.insert(Region::from(r));
        } else {
            conds.insert(tok.parse::<StateCondition>().map_err(|e| bad(e.to_string()))?);
        }
    }
    Ok(CertifiedAccess { mode, task, class, conds, regions })
}

/// Parses rendered output.
pub fn parse_oa(text: &str) -> Result<OaOutput, PersistError> {
    let (header, body) = text.split_once('\n').ok_or(PersistError::Truncated("missing header line"))?;
    let mut h = header.split(' ');
    let magic = h.next().unwrap_or("");
    if magic != MAGIC {
        return Err(PersistError::Version(magic.to_owned()));
    }
    let generated_at = h
        .next()
        .and_then(|s| s.parse::<i64>().ok())
        .ok_or(PersistError::BadLine { line: 1, msg: "bad timestamp".into() })?;
    let expected = h.next().ok_or(PersistError::BadLine { line: 1, msg: "missing checksum".into() })?;

    let mut certified = Vec::new();
    for (i, line) in body.lines().enumerate() {
        certified.push(parse_record(i + 2, line)?);
    }
    if !body.is_empty() && !body.ends_with('\n') {
        return Err(PersistError::Truncated("last record is not terminated"));
    }
    let actual = checksum(body);
    if actual != expected {
        return Err(PersistError::Checksum { expected: expected.to_owned(), actual });
    }
    Ok(OaOutput::new(certified, generated_at))
}

pub fn persist_oa(out: &OaOutput, path: &Path) -> Result<(), PersistError> {
    fs::write(path, render_oa(out))?;
    Ok(())
}

pub fn load_oa(path: &Path) -> Result<OaOutput, PersistError> {
    parse_oa(&fs::read_to_string(path)?)
}

/// Prediction log: one `<task> <region>` pair per line, `#` comments allowed.
pub fn render_predictions(p: &BTreeSet<(TaskId, Region)>) -> String {
    p.iter().map(|(t, r)| format!("{t} {r}\n")).collect()
}

pub fn parse_predictions(text: &str) -> Result<BTreeSet<(TaskId, Region)>, PersistError> {
    let mut out = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_whitespace().collect::<Vec<_>>()[..] {
            [t, r] if is_ident(t) && is_ident(r) => {
                out.insert((TaskId::from(t), Region::from(r)));
            }
            _ => {
                return Err(PersistError::BadLine {
                    line: i + 1,
                    msg: format!("expected `<task> <region>`, found `{line}`"),
                })
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ListId;
    use crate::policy::PolicyHash;

    fn sample() -> OaOutput {
        let c = CertifiedAccess {
            mode: AccessMode::Read,
            task: TaskId::from("worker_alice"),
            class: ClassId::from("friends.bob"),
            conds: BTreeSet::from([
                StateCondition::PolicyEquals(ClassId::from("friends.bob"), PolicyHash::of_text("x")),
                StateCondition::ListIncludes(ListId::from("bob.friends"), "alice".into()),
            ]),
            regions: BTreeSet::from([Region::from("r0")]),
        };
        OaOutput::new(vec![c], 42)
    }

    #[test]
    fn round_trips() {
        for out in [OaOutput::default(), sample()] {
            let text = render_oa(&out);
            let back = parse_oa(&text).unwrap();
            assert_eq!(back, out);
            assert_eq!(render_oa(&back), text);
        }
        assert!(render_oa(&sample()).contains(" reg:r0\n"));
    }

    #[test]
    fn prediction_log() {
        let p = BTreeSet::from([(TaskId::from("worker.u001"), Region::from("r2"))]);
        assert_eq!(parse_predictions(&render_predictions(&p)).unwrap(), p);
        assert_eq!(parse_predictions("# none\n\n").unwrap(), BTreeSet::new());
        assert!(matches!(parse_predictions("a b c"), Err(PersistError::BadLine { line: 1, .. })));
    }

    #[test]
    fn detects_damage() {
        let text = render_oa(&sample());
        assert!(matches!(parse_oa(&text.replacen("oa-v1", "oa-v2", 1)), Err(PersistError::Version(_))));
        assert!(matches!(parse_oa(&text.replace("alice", "alicf")), Err(PersistError::Checksum { .. })));
        assert!(matches!(parse_oa(&text.replace("inc:", "inq:")), Err(PersistError::BadLine { line: 2, .. })));
        assert!(matches!(parse_oa(&text[..text.len() - 1]), Err(PersistError::Truncated(_))));
        assert!(matches!(parse_oa("oa-v1 0"), Err(PersistError::Truncated(_))));
    }
}
