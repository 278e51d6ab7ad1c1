//! Fault injection: six ways a buggy or compromised task tries to leak data.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use super::corpus::{Corpus, DocKind, FRONTEND};
use super::provenance::{detect_from, Leak};
use super::system::{LiveSession, Rm, System, SystemError, PUBLIC_LOG};
use crate::model::{AccessMode, ConduitId, Principal, Region, TaskId};
use crate::monitor::{Denial, Mode, SessionMonitor};
use crate::pipeline::corpus::worker_instance;
use crate::sandbox::{AccessRequest, Outcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Fault {
    /// The engine sends the worker another user's private document.
    WrongUserFd,
    /// The engine writes document bytes on the descriptor-only pipe.
    DataOnFdPipe,
    /// The worker opens another user's private document itself.
    DirectOpen,
    /// A task holding a public write handle takes on a private taint.
    ReregisterWithOpenWrite,
    /// A censored document is served to a session in the censoring region.
    CensoredRegion,
    /// The worker copies its user's private data to a public log.
    PublicLogCopy,
}

impl Fault {
    pub const ALL: [Fault; 6] = [
        Fault::WrongUserFd,
        Fault::DataOnFdPipe,
        Fault::DirectOpen,
        Fault::ReregisterWithOpenWrite,
        Fault::CensoredRegion,
        Fault::PublicLogCopy,
    ];

    pub fn describe(self) -> &'static str {
        match self {
            Fault::WrongUserFd => "engine transfers another user's private document",
            Fault::DataOnFdPipe => "engine writes data on the fd-only pipe",
            Fault::DirectOpen => "worker opens another user's private document",
            Fault::ReregisterWithOpenWrite => "task with an open public write handle takes a private taint",
            Fault::CensoredRegion => "censored document served in the censoring region",
            Fault::PublicLogCopy => "worker writes a private snippet to the public log",
        }
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = Fault::ALL.iter().position(|x| x == self).expect("listed");
        write!(f, "F{}", i + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown fault `{0}` (expected F1 to F6)")]
pub struct BadFault(pub String);

impl FromStr for Fault {
    type Err = BadFault;

    fn from_str(s: &str) -> Result<Fault, BadFault> {
        Fault::ALL.into_iter().find(|f| f.to_string().eq_ignore_ascii_case(s)).ok_or_else(|| BadFault(s.to_owned()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultReport {
    pub fault: Fault,
    pub mode: Mode,
    /// The denial that stopped the injected access, if any.
    pub denial: Option<Denial>,
    pub leaks: Vec<Leak>,
}

impl FaultReport {
    pub fn blocked(&self) -> bool {
        self.denial.is_some() && self.leaks.is_empty()
    }
}

impl fmt::Display for FaultReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.blocked() { "blocked" } else { "LEAKED" };
        write!(f, "{} {:<8} {verdict}", self.fault, self.mode)?;
        if let Some(d) = &self.denial {
            write!(f, " ({d})")?;
        }
        if !self.leaks.is_empty() {
            write!(f, " [{} leaking flows]", self.leaks.len())?;
        }
        write!(f, ": {}", self.fault.describe())
    }
}

struct Actors {
    victim: Principal,
    victim_home: Region,
    victim_doc: ConduitId,
    attacker: Principal,
    attacker_home: Region,
}

fn actors(corpus: &Corpus) -> Result<Actors, SystemError> {
    let doc = corpus
        .docs
        .iter()
        .find(|d| matches!(d.kind, DocKind::Private(_)))
        .ok_or(SystemError::Unavailable("private document"))?;
    let DocKind::Private(victim) = &doc.kind else { unreachable!() };
    let home = |u: &Principal| corpus.user(u.as_str()).map(|u| u.home.clone());
    let attacker = corpus.users.iter().find(|u| &u.id != victim).ok_or(SystemError::Unavailable("second user"))?;
    Ok(Actors {
        victim: victim.clone(),
        victim_home: home(victim).ok_or(SystemError::Unavailable("owner of the private document"))?,
        victim_doc: doc.id.clone(),
        attacker: attacker.id.clone(),
        attacker_home: attacker.home.clone(),
    })
}

/// The engine sends `doc` to the session's worker; if it arrives, the
/// worker forwards its snippet to the client.
fn push_fd(sys: &mut System, live: &LiveSession, doc: &ConduitId) -> Result<(), Denial> {
    sys.sandbox.set_session(sys.engine, Some(live.id));
    let r = (|| {
        let fd = sys.open(sys.engine, doc, AccessMode::Read)?;
        let sent =
            sys.access(sys.engine, AccessRequest::SendFd { pipe: live.pipes.engine_results, fd, to: live.worker });
        sys.close(sys.engine, fd);
        let Outcome::Transferred(h) = sent? else { return Ok(()) };
        let text = sys.read(live.worker, h)?;
        sys.write(live.worker, live.conn, text)
    })();
    sys.sandbox.set_session(sys.engine, None);
    r
}

fn in_session(
    sys: &mut System,
    user: &Principal,
    region: &Region,
    body: impl FnOnce(&mut System, &LiveSession) -> Result<(), Denial>,
) -> Result<Option<Denial>, SystemError> {
    let live = sys.open_session(user, region)?;
    let r = body(sys, &live);
    sys.close_session(&live);
    Ok(r.err())
}

/// Runs one scenario against a running system.
pub fn inject(sys: &mut System, corpus: &Corpus, fault: Fault) -> Result<FaultReport, SystemError> {
    let a = actors(corpus)?;
    let egress_before = sys.sandbox.egress.len();
    let denial = match fault {
        Fault::WrongUserFd => {
            in_session(sys, &a.attacker, &a.attacker_home, |sys, live| push_fd(sys, live, &a.victim_doc))?
        }
        Fault::DataOnFdPipe => in_session(sys, &a.attacker, &a.attacker_home, |sys, live| {
            sys.sandbox.set_session(sys.engine, Some(live.id));
            let r = (|| {
                let text = sys.slurp(sys.engine, &a.victim_doc)?;
                sys.write(sys.engine, live.pipes.engine_results, text)?;
                let leaked = sys.read(live.worker, live.pipes.worker_results)?;
                sys.write(live.worker, live.conn, leaked)
            })();
            sys.sandbox.set_session(sys.engine, None);
            r
        })?,
        Fault::DirectOpen => in_session(sys, &a.attacker, &a.attacker_home, |sys, live| {
            let text = sys.slurp(live.worker, &a.victim_doc)?;
            sys.write(live.worker, live.conn, text)
        })?,
        Fault::ReregisterWithOpenWrite => reregister_with_open_write(sys, &a)?,
        Fault::CensoredRegion => {
            let (doc, region) = corpus
                .docs
                .iter()
                .find_map(|d| match &d.kind {
                    DocKind::Censored(r) => Some((d.id.clone(), r.clone())),
                    _ => None,
                })
                .ok_or(SystemError::Unavailable("censored document"))?;
            let user = corpus.users.iter().find(|u| u.home == region).unwrap_or(&corpus.users[0]).id.clone();
            in_session(sys, &user, &region, |sys, live| push_fd(sys, live, &doc))?
        }
        Fault::PublicLogCopy => in_session(sys, &a.victim, &a.victim_home, |sys, live| {
            let text = sys.slurp(live.worker, &a.victim_doc)?;
            let log = sys.open(live.worker, &ConduitId::from(PUBLIC_LOG), AccessMode::Write)?;
            sys.write(live.worker, log, text)
        })?,
    };
    let leaks = detect_from(&sys.sandbox, &sys.meta, &sys.audience, &sys.regions, egress_before);
    Ok(FaultReport { fault, mode: sys.mode(), denial, leaks })
}

/// A frontend task opens the public log for writing, then tries to become
/// the victim's worker (Shai) or reads the victim's document (otherwise),
/// and writes what it read to the log.
fn reregister_with_open_write(sys: &mut System, a: &Actors) -> Result<Option<Denial>, SystemError> {
    let task = sys.sandbox.spawn(FRONTEND);
    sys.monitor
        .register(&mut sys.sandbox, &sys.meta, task, &TaskId::from(FRONTEND), None)
        .map_err(|denial| SystemError::Denied { step: "frontend registration", denial })?;
    let r = (|| {
        let log = sys.open(task, &ConduitId::from(PUBLIC_LOG), AccessMode::Write)?;
        if let Rm::Shai(m) = &mut sys.monitor {
            m.reregister(&mut sys.sandbox, &sys.meta, task, &worker_instance(&a.victim))?;
        }
        let text = sys.slurp(task, &a.victim_doc)?;
        sys.write(task, log, text)
    })();
    sys.monitor.reset(&mut sys.sandbox, task);
    Ok(r.err())
}

/// Every scenario, each against `sys`.
pub fn run_all(sys: &mut System, corpus: &Corpus) -> Result<Vec<FaultReport>, SystemError> {
    Fault::ALL.into_iter().map(|f| inject(sys, corpus, f)).collect()
}
