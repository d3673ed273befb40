//! HTTP service and command line over the hydra monitoring pipeline.
//!
//! [`routes::router`] builds the JSON API consumed by the operator UI and
//! by scripts; [`cli`] implements the `hydra` binary.

pub mod cli;
pub mod config;
pub mod error;
pub mod routes;

pub use config::{ApiConfig, PollHints};
pub use error::{ApiError, ErrorBody};
pub use routes::{router, AppState, USER_HEADER};
