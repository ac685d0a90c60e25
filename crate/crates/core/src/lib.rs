pub mod autodiff;
pub mod config;
pub mod error;
pub mod evalbench;
pub mod expert;
pub mod metrics;
pub mod mili;
pub mod persist;
pub mod pipeline;
pub mod policy;
pub mod seeding;
pub mod world;

pub use error::{Error, Result};
