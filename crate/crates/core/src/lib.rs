pub mod cache;
pub mod encoder;
pub mod error;
pub mod ingest;
pub mod kernel;
pub mod linear;
pub mod metrics;
pub mod model;
pub mod onnx_graph;
pub mod pipeline;
pub mod preprocess;
pub mod report;
pub mod select;

pub use error::{CacheError, Error, ErrorClass, Result};
