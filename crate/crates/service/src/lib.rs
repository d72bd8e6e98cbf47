//! HTTP service and console front end for aggquery.
//!
//! [`engine::QueryService`] owns loaded corpora and in-flight queries and
//! moves each query through clarifying, filtering, aggregating and done.
//! [`api::router`] exposes it over HTTP; [`console`] renders it as text.

pub mod api;
pub mod console;
pub mod engine;
pub mod error;

pub use api::router;
pub use engine::{Phase, QueryService, ServiceConfig};
pub use error::{ApiError, ErrorCode};
