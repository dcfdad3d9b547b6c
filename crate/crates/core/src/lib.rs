pub mod autodiff;
pub mod error;

pub use error::{Error, Result};
pub mod checkpoint;
pub mod context;
pub mod corpus;
pub mod gan;
pub mod inference;
pub mod metrics;
pub mod synthetic;
pub mod vae;
pub mod verify;
