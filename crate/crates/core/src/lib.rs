pub mod cost;
pub mod error;
pub mod exit_policy;
pub mod graph;
pub mod harness;
pub mod runtime;
pub mod tensor;
pub mod trainer;

pub use cost::CostTable;
pub use error::{Error, Result};
pub use exit_policy::{ConfidenceProfile, ExitPlan};
pub use graph::{NetworkConfig, NetworkGraph, NodeId};
pub use runtime::{EvalTrace, Evaluator};
pub use tensor::{Tape, Tensor, Var};
pub use trainer::{Dataset, TrainConfig};
pub use harness::ExperimentConfig;
