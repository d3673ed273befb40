//! Near-real-time data-quality monitoring for streamed detector-plot images.
//!
//! Images land in an input directory and flow through four stages:
//!
//! ```text
//! feeder ──orders──▶ balancer ──round robin──▶ predict workers ──reports──▶ keeper
//! ```
//!
//! Every stage shares one [`store::Store`], the persistent record of plot
//! types, labels, images, models, thresholds and inferences. The
//! [`analytics`] module reads that record back out as confusion matrices,
//! threshold recommendations, latency histograms and daily digests, and
//! [`sim`] drives the whole thing end to end on synthetic streams.
//!
//! Each capability has a runnable program under `examples/`.

pub mod analytics;
pub mod balancer;
pub mod domain;
pub mod image;
pub mod ingest;
pub mod keeper;
pub mod layout;
pub mod pipeline;
pub mod predict;
pub mod sim;
pub mod store;
pub mod time;
pub mod wire;

#[cfg(test)]
mod testutil;

pub use domain::*;
pub use time::{Clock, ManualClock, SystemClock, TimeRange, Timestamp};
