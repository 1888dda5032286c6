//! Deterministic single-hop radio network simulator with leader-election
//! protocols under the four collision-detection models, good-partition
//! tooling, and checkers for necessary conditions of energy lower bounds.

pub mod channel;
pub mod dense;
pub mod error;
pub mod experiment;
pub mod lowerbound;
pub mod partitions;
pub mod protocols;
pub mod runtime;
pub mod tradeoff;
pub mod util;

pub use channel::{resolve_slot, Action, CdModel, DeviceId, Feedback, Message, SlotOutcome};
pub use error::{Error, Result};
pub use runtime::{execute, Protocol, ProtocolConfig, RunReport, Transcript, Verdict};
