//! Cache-occupancy side channels: native probing, simulation, remote timing
//! servers, browser payload generation, array-resize offset recovery and
//! trace classification.

pub mod analysis;
pub mod dns;
pub mod error;
pub mod par;
pub mod payload;
pub mod probe;
pub mod rng;
pub mod sim;
pub mod trace;
pub mod v8;
pub mod victim;
pub mod ws;

pub use error::{Error, Result};
pub use trace::{ArchProfile, Dataset, Memorygram, Sample, SampleKind, Technique, World};
