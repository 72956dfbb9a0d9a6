//! Core of the collaborative annotation platform.
//!
//! Everything in this crate is pure computation over owned data: no IO, no
//! clocks, no threads. Callers pass the current time into every operation
//! that needs one, which keeps the protocol engine and the broker fully
//! deterministic under test. The `care-server` crate wires this core to
//! sockets, files and the command line.
//!
//! Module map:
//!
//! - [`model`]: users, documents, label sets, inline commentaries, studies
//! - [`anchoring`]: selector description and re-location in document text
//! - [`analytics`]: behavioral event taxonomy and reading metrics
//! - [`protocol`]: client wire messages
//! - [`broker`]: worker registry, skill routing and assistance jobs
//! - [`state`]: the replicated platform state and its journal records
//! - [`engine`]: the sans-IO server combining sessions, state and broker

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod analytics;
pub mod anchoring;
pub mod broker;
pub mod engine;
pub mod model;
pub mod protocol;
pub mod state;

mod secret;

pub use anchoring::{anchor, describe, reanchor_all, AnchorError, AnchorMethod, AnchorResult, DocumentText, SelectorSet};
pub use engine::{peppered, Engine, EngineConfig, Outbound};
pub use model::{
    CommentaryId, Document, DocumentId, InlineCommentary, LabelSet, Origin, Role, Study, Timestamp, User, UserId,
};
pub use secret::{constant_time_eq, hash_password, verify_password, PasswordHash};
pub use state::{Journal, MemoryJournal, Record, State};
