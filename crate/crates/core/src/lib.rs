//! Graph autoencoders with one-hop linear or multi-layer GCN encoders, trained
//! from scratch, plus the link-prediction and node-clustering evaluation harness.

pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sparse;
pub mod split;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, NormalizedAdjacency};
pub use model::{Encoding, ModelKind, ParamSet};
pub use split::EdgeSplit;
pub use trainer::{TrainConfig, TrainRecord};
