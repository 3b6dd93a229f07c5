//! Neural architecture search over fine-grained 3D video backbones.

pub mod cost;
pub mod data;
pub mod driver;
pub mod error;
pub mod fair;
pub mod net;
pub mod search;
pub mod space;
pub mod supernet;
pub mod tensor;

pub use cost::{cost_report, hinge_cost, CostReport, TensorShape};
pub use driver::{run_search, run_train, RunConfig, SearchOutcome, TrainConfig};
pub use error::{Error, Result};
pub use fair::{FairPattern, PatternMode};
pub use search::{ArchParams, SearchConfig};
pub use space::{ArchitectureSpec, GroupChoice, SearchSpace};
pub use supernet::{Supernet, SupernetConfig};
pub use tensor::{Tape, Tensor};
