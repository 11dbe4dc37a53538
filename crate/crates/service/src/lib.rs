//! HTTP/JSON service over datasets, interactive sessions, replay and evaluation.

pub mod api;
pub mod config;
pub mod error;
pub mod projection;
pub mod store;

pub use api::{router, serve, AppState, API_SCHEMA_VERSION};
pub use config::ServiceConfig;
pub use error::{ApiError, ServiceError};
