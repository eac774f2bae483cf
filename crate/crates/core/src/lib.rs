//! Group discussion rooms with an AI devil's advocate.
//!
//! Participants talk in a public channel and may privately tell the advocate
//! about views they would rather not voice themselves. Every few human turns
//! the advocate speaks once: it restates a queued dissent as its own opinion,
//! or, when nobody has dissented, argues gently against the emerging
//! consensus. Near-repeats of its earlier messages are suppressed.

pub mod agents;
pub mod clock;
pub mod config;
pub mod gateway;
pub mod harness;
pub mod hub;
pub mod model;
pub mod protocol;
pub mod scheduler;
pub mod store;
pub mod template;
