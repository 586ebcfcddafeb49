//! Conditional density estimators and set aggregators.

pub mod deepset;
pub mod flow;
pub mod made;
pub mod transforms;

pub use deepset::{AggregatorKind, DeepSet, Embedding};
pub use flow::{base_log_density, ConditionalFlow, FlowCache, FlowConfig};
pub use made::{Activation, MaskedMlp, MlpCache};
pub use transforms::TransformKind;
