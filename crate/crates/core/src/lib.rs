//! Knowledge-graph path retrieval toolkit: directed line-graph transformation
//! of question subgraphs, rationalized path labeling, a bidirectional
//! graph-convolution retriever trained with path and question-triple losses,
//! and stochastic path-rollout inference with evaluation metrics.

pub mod adam;
pub mod annotate;
pub mod embed;
pub mod error;
pub mod infer;
pub mod kg;
pub mod line_graph;
pub mod metrics;
pub mod model;
pub mod paths;
pub mod synth;
pub mod test_support;
pub mod train;

pub use error::{Error, Result};
