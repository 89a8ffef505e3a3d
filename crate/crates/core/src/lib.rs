//! Model-free episodic Q-learning over adaptively refined ball partitions
//! of a continuous state-action space, with the baselines, test MDPs,
//! numerical oracles and experiment harness used to evaluate it.

pub mod agent;
pub mod baselines;
pub mod env;
pub mod error;
pub mod harness;
pub mod metric_space;
pub mod oracle;
pub mod partition;

pub use agent::{EpisodeRecord, HyperParams, Learner, Policy, StepRecord, ZoomAgent};
pub use baselines::NetAgent;
pub use env::{Environment, SeedStream};
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, RunOptions};
pub use metric_space::MetricSpace;
pub use oracle::{RegretRecord, ValueTable};
pub use partition::Partition;
