pub mod analytics;
pub mod error;
pub mod impairments;
pub mod link;
pub mod optimizer;
pub mod scenario;
pub mod waveform;

pub use error::{Error, Result};
