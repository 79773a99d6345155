//! Federated learning under a random access model (RAM).
//!
//! A single user's update survives each communication round; which one is
//! decided by a stationary erasure channel whose weights the server never
//! sees. Training can target either the usual expected loss (FedAvg) or a
//! risk-aware objective mixing the CVaR of the per-user losses with their
//! mean, which keeps rarely relayed users from being starved.
//!
//! Module map:
//!
//! - [`numerics`]: logistic regression / ReLU MLP with exact gradients.
//! - [`data`]: IDX ingestion, synthetic blobs, heterogeneous partitioning, batching.
//! - [`ram`]: the erasure channel (weights, sampling, relay).
//! - [`risk`]: discrete CVaR, the per-user composite objective and its gradients.
//! - [`fed`]: the round engine (local updates, relay, broadcast, history).

pub mod data;
pub mod fed;
pub mod numerics;
pub mod ram;
pub mod risk;
pub mod seeding;

pub use data::{BlobLayout, Dataset, Partition, PartitionSpec};
pub use fed::{
    evaluate, local_update, train, Execution, Federation, FedError, LocalPair, Metrics,
    RoundRecord, RunHistory, Seeds, TrainConfig, UserShard,
};
pub use numerics::{Batch, ModelArch, ModelKind, ModelParams};
pub use ram::{RamDistribution, RamRng, SkewKind};
pub use risk::{RiskConfig, RiskState};
