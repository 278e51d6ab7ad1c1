//! The simulated search pipeline: corpus, indexer, search engine, per-user
//! workers, the leak detector and fault injection.

pub mod corpus;
pub mod engine;
pub mod faults;
pub mod provenance;
pub mod session;
pub mod system;

pub use corpus::{Corpus, CorpusError, CorpusSpec};
pub use faults::{Fault, FaultReport};
pub use session::{SessionOp, SessionScript, WorkloadSpec};
pub use system::{SessionStats, System, SystemConfig, SystemError};
