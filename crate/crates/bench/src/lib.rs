//! Benchmark fixtures shared by the criterion targets.

use fedcvar_core::data::{gen_synthetic_2d, partition_heterogeneous, Dataset, PartitionSpec};
use fedcvar_core::fed::{Execution, Federation, Seeds, TrainConfig};
use fedcvar_core::numerics::{init_params, Batch, ModelArch, ModelParams};
use fedcvar_core::risk::RiskConfig;

/// An MLP of the given shape with a deterministic batch of `rows` inputs.
pub fn mlp_fixture(input: usize, hidden: Vec<usize>, classes: usize, rows: usize) -> (ModelParams, Batch) {
    let arch = ModelArch::mlp(input, hidden, classes).expect("valid architecture");
    let params = init_params(&arch, 1);
    let features = (0..rows * input).map(|i| ((i * 37 % 101) as f64) / 101.0).collect();
    let labels = (0..rows).map(|i| i % classes).collect();
    (params, Batch::new(features, labels, input).expect("valid batch"))
}

/// A three-user synthetic federation ready to run rounds.
pub fn federation(execution: Execution, workers: usize) -> Federation {
    let data: Dataset = gen_synthetic_2d(3, 200, 0.5, 3).expect("valid synthetic data");
    let spec = PartitionSpec { num_users: 3, frequent_fraction: 67.0, frequent_pattern_fraction: 67.0, seed: 5 };
    let shards = partition_heterogeneous(&data, &spec).expect("valid partition").shards;
    let cfg = TrainConfig {
        num_users: 3,
        global_rounds: 1,
        local_epochs: 5,
        batch_size: 32,
        lr_theta: 0.05,
        lr_t: 0.01,
        risk: RiskConfig::new(0.1, 0.1).expect("valid risk"),
        t_init: 0.0,
        seeds: Seeds { init: 1, ram: 2, shuffle: 3 },
        execution,
        workers,
    };
    let arch = ModelArch::logreg(2, 3).expect("valid architecture");
    Federation::new(shards, &[0.5, 0.4, 0.1], arch, cfg).expect("valid federation")
}
