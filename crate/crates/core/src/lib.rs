//! Prompt-based fine-grained entity typing with a masked language model.

pub mod backend;
pub mod datasets;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod optim;
pub mod schema;
pub mod selfsup;
pub mod synthetic;
pub mod templates;
pub mod training;
pub mod typing_model;
pub mod verbalizer;

pub use error::{Error, ErrorKind, Result};
pub use exec::Execution;
pub use schema::{EntityType, LabelSchema};
