use dacfl::config::{Algorithm, ExperimentConfig, StepsMode, TopologyChoice};
use dacfl::data::PartitionMode;
use dacfl::fedsim::{run_algorithm, run_experiment, Environment, Simulation};
use dacfl::metrics::write_metrics;
use dacfl::model::ParamVector;

fn small(algorithm: Algorithm) -> ExperimentConfig {
    ExperimentConfig {
        algorithm,
        nodes: 6,
        rounds: 15,
        batch_size: 10,
        per_class: 30,
        test_per_class: 20,
        classes: 4,
        dim: 5,
        hidden_dim: 8,
        lr: 0.05,
        ..Default::default()
    }
}

fn mean_gap(sim: &Simulation) -> f64 {
    let x = ParamVector::mean(sim.state().consensus.as_ref().unwrap().estimates()).unwrap();
    let w = ParamVector::mean(&sim.state().models).unwrap();
    let scale = w.values().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    x.max_abs_diff(&w) / scale
}

#[test]
fn dacfl_estimates_track_the_model_mean() {
    for (topology, time_varying) in [
        (TopologyChoice::Dense, false),
        (TopologyChoice::Dense, true),
        (TopologyChoice::Sparse, true),
        (TopologyChoice::Uniform, false),
    ] {
        let cfg = ExperimentConfig {
            topology,
            time_varying,
            tv_period: 3,
            steps_mode: StepsMode::FullEpoch,
            ..small(Algorithm::Dacfl)
        };
        let env = Environment::build(&cfg).unwrap();
        let mut sim = Simulation::new(&cfg, &env).unwrap();
        assert_eq!(mean_gap(&sim), 0.0);
        for _ in 0..cfg.rounds {
            sim.step().unwrap();
            assert!(mean_gap(&sim) <= 1e-9, "{topology} tv={time_varying}: {}", mean_gap(&sim));
        }
    }
}

#[test]
fn single_node_trajectories_coincide() {
    let cfg = ExperimentConfig { nodes: 1, ..small(Algorithm::Dacfl) };
    let env = Environment::build(&cfg).unwrap();
    let trajectory = |alg| {
        let mut sim = Simulation::new(&ExperimentConfig { algorithm: alg, ..cfg.clone() }, &env).unwrap();
        (0..cfg.rounds)
            .map(|_| {
                sim.step().unwrap();
                sim.state().models[0].clone()
            })
            .collect::<Vec<_>>()
    };
    let reference = trajectory(Algorithm::Dacfl);
    for alg in [Algorithm::Cdsgd, Algorithm::Dpsgd, Algorithm::Fedavg] {
        assert_eq!(trajectory(alg), reference, "{alg}");
    }
}

#[test]
fn reinitializing_from_the_mixed_model_changes_the_trajectory() {
    let cfg = small(Algorithm::Dacfl);
    let env = Environment::build(&cfg).unwrap();
    let mut dacfl = Simulation::new(&cfg, &env).unwrap();
    let mut dpsgd = Simulation::new(&ExperimentConfig { algorithm: Algorithm::Dpsgd, ..cfg.clone() }, &env).unwrap();
    dacfl.step().unwrap();
    dpsgd.step().unwrap();
    assert_ne!(dacfl.state().models, dpsgd.state().models);
}

#[test]
fn cdsgd_and_dpsgd_share_training_and_differ_in_output() {
    let cfg = small(Algorithm::Cdsgd);
    let env = Environment::build(&cfg).unwrap();
    let mut cdsgd = Simulation::new(&cfg, &env).unwrap();
    let mut dpsgd = Simulation::new(&ExperimentConfig { algorithm: Algorithm::Dpsgd, ..cfg.clone() }, &env).unwrap();
    for _ in 0..5 {
        let a = cdsgd.step().unwrap();
        let b = dpsgd.step().unwrap();
        assert_eq!(cdsgd.state().models, dpsgd.state().models);
        assert_eq!(b.evaluations.len(), 1);
        assert_eq!(a.evaluations.len(), cfg.nodes);
        assert_eq!(b.record.var_acc, 0.0);
    }
}

#[test]
fn single_model_algorithms_report_zero_variance() {
    for alg in [Algorithm::Fedavg, Algorithm::Dpsgd] {
        let result = run_experiment(&small(alg)).unwrap();
        assert!(result.output.metrics.iter().all(|r| r.var_acc == 0.0), "{alg}");
    }
}

#[test]
fn metrics_rows_and_learning_rate_schedule() {
    let cfg = small(Algorithm::Dacfl);
    let out = run_experiment(&cfg).unwrap().output;
    assert_eq!(out.metrics.len(), cfg.rounds);
    for (t, r) in out.metrics.iter().enumerate() {
        assert_eq!(r.round, t + 1);
        assert_eq!(r.lambda, cfg.lr * cfg.lr_decay.powi(t as i32));
        assert!((0.0..=1.0).contains(&r.avg_acc) && r.var_acc >= 0.0 && r.avg_loss >= 0.0);
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let cfg = ExperimentConfig { topology: TopologyChoice::Sparse, time_varying: true, tv_period: 4, ..small(Algorithm::Dacfl) };
    let csv = || {
        let mut buf = Vec::new();
        write_metrics(&run_experiment(&cfg).unwrap().output.metrics, &mut buf).unwrap();
        buf
    };
    assert_eq!(csv(), csv());
}

#[test]
fn noniid_partition_runs_every_algorithm() {
    let cfg = ExperimentConfig { partition: PartitionMode::NonIid, ..small(Algorithm::Dacfl) };
    let env = Environment::build(&cfg).unwrap();
    for alg in Algorithm::ALL {
        let out = run_algorithm(&cfg, &env, *alg).unwrap();
        assert_eq!(out.metrics.len(), cfg.rounds);
    }
}

#[test]
fn sparse_topology_spreads_cdsgd_more_than_dacfl() {
    let cfg = ExperimentConfig {
        topology: TopologyChoice::Sparse,
        steps_mode: StepsMode::FullEpoch,
        ..Default::default()
    };
    let env = Environment::build(&cfg).unwrap();
    let var = |alg| run_algorithm(&cfg, &env, alg).unwrap().metrics.last().unwrap().var_acc;
    assert!(var(Algorithm::Cdsgd) > var(Algorithm::Dacfl));
}

#[test]
fn shard_smaller_than_batch_is_rejected() {
    let cfg = ExperimentConfig { batch_size: 500, ..small(Algorithm::Dacfl) };
    assert!(run_experiment(&cfg).is_err());
}
