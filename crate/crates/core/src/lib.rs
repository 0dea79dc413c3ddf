pub mod encoder;
pub mod docformer;
pub mod error;
pub mod ingest;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod schema;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
