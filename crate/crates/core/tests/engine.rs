//! Round engine: execution modes, the FedAvg reduction and edge cases.

use fedcvar_core::data::{batch_indices, gen_synthetic_2d, partition_heterogeneous, Dataset, PartitionSpec};
use fedcvar_core::fed::{train, Execution, Federation, Seeds, TrainConfig};
use fedcvar_core::numerics::{init_params, loss_and_grad, ModelArch, ModelParams};
use fedcvar_core::ram::{RamDistribution, RamRng};
use fedcvar_core::risk::RiskConfig;
use fedcvar_core::seeding::derive;

const WEIGHTS: [f64; 3] = [0.5, 0.4, 0.1];

fn shards() -> Vec<Dataset> {
    let data = gen_synthetic_2d(3, 60, 0.5, 9).unwrap();
    let spec = PartitionSpec { num_users: 3, frequent_fraction: 67.0, frequent_pattern_fraction: 67.0, seed: 4 };
    partition_heterogeneous(&data, &spec).unwrap().shards
}

fn config(risk: RiskConfig, rounds: usize, execution: Execution, workers: usize) -> TrainConfig {
    TrainConfig {
        num_users: 3,
        global_rounds: rounds,
        local_epochs: 2,
        batch_size: 16,
        lr_theta: 0.05,
        lr_t: 0.02,
        risk,
        t_init: 0.1,
        seeds: Seeds { init: 21, ram: 22, shuffle: 23 },
        execution,
        workers,
    }
}

fn arch() -> ModelArch {
    ModelArch::logreg(2, 3).unwrap()
}

fn trajectory(cfg: TrainConfig) -> Vec<(usize, f64, Vec<u64>)> {
    let mut fed = Federation::new(shards(), &WEIGHTS, arch(), cfg).unwrap();
    let mut out = Vec::new();
    for _ in 0..fed.config().global_rounds {
        let user = fed.run_round().unwrap().selected_user;
        let bits = fed.theta_global().values().iter().map(|v| v.to_bits()).collect();
        out.push((user, fed.t_global(), bits));
    }
    out
}

#[test]
fn execution_mode_and_worker_count_do_not_change_the_trajectory() {
    let risk = RiskConfig::new(0.2, 0.1).unwrap();
    let eager = trajectory(config(risk, 40, Execution::Eager, 1));
    assert_eq!(eager, trajectory(config(risk, 40, Execution::Eager, 3)));
    assert_eq!(eager, trajectory(config(risk, 40, Execution::OnDemand, 1)));
}

/// Plain FedAvg under the same locked seeds, written against the public
/// building blocks only: every round the relayed user's local SGD result
/// becomes the global model.
fn reference_fedavg(shards: &[Dataset], cfg: &TrainConfig, rounds: usize) -> Vec<ModelParams> {
    let ram = RamDistribution::new(&WEIGHTS).unwrap();
    let mut rng = RamRng::from_seed(cfg.seeds.ram);
    let mut theta = init_params(&arch(), cfg.seeds.init);
    let mut out = Vec::new();
    for round in 0..rounds {
        let user = ram.sample(&mut rng);
        let data = &shards[user];
        let seed = derive(cfg.seeds.shuffle, &[user as u64, round as u64]);
        for epoch in 0..cfg.local_epochs {
            for idx in batch_indices(data.len(), cfg.batch_size.min(data.len()), seed, epoch as u64) {
                let batch = data.subset(&idx).unwrap().as_batch();
                let (_, grad) = loss_and_grad(&theta, &batch).unwrap();
                for (v, g) in theta.values_mut().iter_mut().zip(&grad) {
                    *v -= cfg.lr_theta * g;
                }
            }
        }
        out.push(theta.clone());
    }
    out
}

#[test]
fn gamma_one_is_fedavg_for_200_rounds() {
    for alpha in [1.0, 0.3] {
        let cfg = config(RiskConfig::new(alpha, 1.0).unwrap(), 200, Execution::Eager, 1);
        let reference = reference_fedavg(&shards(), &cfg, 200);
        let mut fed = Federation::new(shards(), &WEIGHTS, arch(), cfg).unwrap();
        for expected in &reference {
            fed.run_round().unwrap();
            for (a, b) in fed.theta_global().values().iter().zip(expected.values()) {
                assert!((a - b).abs() <= 1e-12, "alpha {alpha}, round {}: {a} vs {b}", fed.round());
            }
            // With γ = 1 the threshold has zero gradient.
            assert_eq!(fed.t_global(), 0.1);
        }
    }
}

#[test]
fn point_mass_channel_only_relays_one_user() {
    let cfg = config(RiskConfig::new(0.5, 0.5).unwrap(), 30, Execution::OnDemand, 1);
    let fed = train(shards(), &[0.0, 1.0, 0.0], arch(), cfg).unwrap();
    assert!(fed.history().selections().all(|u| u == 1));
}

#[test]
fn single_user_federation_is_local_training() {
    let data = gen_synthetic_2d(3, 30, 0.5, 2).unwrap();
    let mut cfg = config(RiskConfig::new(0.5, 0.5).unwrap(), 10, Execution::Eager, 1);
    cfg.num_users = 1;
    let fed = train(vec![data], &[1.0], arch(), cfg).unwrap();
    assert_eq!(fed.history().len(), 10);
    assert!(fed.history().selections().all(|u| u == 0));
    assert!(fed.theta_global().is_finite());
}

#[test]
fn divergence_is_reported_with_history() {
    let mut cfg = config(RiskConfig::new(0.5, 0.5).unwrap(), 50, Execution::Eager, 1);
    cfg.lr_theta = 1e308;
    let Err(err) = train(shards(), &WEIGHTS, arch(), cfg) else { panic!("training should diverge") };
    assert!(matches!(err.error, fedcvar_core::FedError::Divergence { .. }), "{:?}", err.error);
    assert!(err.history.len() < 50);
}

#[test]
fn synthetic_layouts_are_separable() {
    use fedcvar_core::data::{gen_synthetic_2d_with, BlobLayout};
    use fedcvar_core::fed::evaluate;
    for layout in [BlobLayout::Ring, BlobLayout::RingWithCenter] {
        let data = gen_synthetic_2d_with(layout, 3, 200, 0.4, 5).unwrap();
        let test = gen_synthetic_2d_with(layout, 3, 200, 0.4, 6).unwrap();
        let mut cfg = config(RiskConfig::risk_neutral(), 300, Execution::Eager, 1);
        cfg.num_users = 1;
        cfg.batch_size = 32;
        cfg.lr_theta = 0.1;
        let fed = train(vec![data], &[1.0], arch(), cfg).unwrap();
        let m = evaluate(fed.theta_global(), &test).unwrap();
        assert!(m.overall_acc >= 0.95, "{layout:?}: pooled accuracy {}", m.overall_acc);
    }
}
