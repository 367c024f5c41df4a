use sage_core::data::ClientShard;
use sage_core::federation::{run_experiment, ExperimentConfig, Simulation, Strategy};
use sage_core::report::{read_trace_csv, trace_csv_string};

fn small(strategy: Strategy, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        num_clients: 4,
        clients_per_round: 4,
        rounds: 50,
        strategy,
        seed,
        ..ExperimentConfig::default()
    };
    cfg.partition.num_clients = 4;
    cfg.partition.seed = seed;
    cfg.partition.samples_per_class = 100;
    cfg
}

/// Accuracy of classifying each test point by its nearest class mean of the
/// training pools, with every hidden label revealed.
fn nearest_centroid_accuracy(sim: &Simulation) -> f64 {
    let cfg = sim.config();
    let (c, d) = (cfg.model.num_classes, cfg.model.input_dim);
    let mut sums = vec![vec![0.0; d]; c];
    let mut counts = vec![0usize; c];
    let mut add = |label: usize, x: &[f64]| {
        counts[label] += 1;
        sums[label].iter_mut().zip(x).for_each(|(s, v)| *s += v);
    };
    for ClientShard {
        labeled, unlabeled, ..
    } in sim.shards()
    {
        labeled.iter().for_each(|s| add(s.label, &s.features));
        unlabeled
            .iter()
            .filter(|u| !u.is_copy())
            .for_each(|u| add(u.hidden_label(), u.features()));
    }
    let centroids: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s.iter().map(|v| v / n as f64).collect())
        .collect();
    let test = sim.test_set();
    let correct = test
        .samples
        .iter()
        .filter(|s| {
            let dist = |m: &Vec<f64>| -> f64 {
                m.iter()
                    .zip(&s.features)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum()
            };
            let best = (0..c)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap();
            best == s.label
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn upper_bound_solves_a_separable_task() {
    let mut cfg = small(Strategy::SupervisedUpperBound, 1);
    cfg.task.class_separation = 6.0;
    let sim = Simulation::new(cfg).unwrap();
    let oracle = nearest_centroid_accuracy(&sim);
    assert!(oracle > 0.99, "nearest-centroid oracle {oracle}");
    let acc = sim.run().unwrap().final_accuracy();
    assert!(acc > 0.95, "upper bound {acc}, oracle {oracle}");
}

#[test]
fn every_strategy_runs_and_learns_something() {
    for strategy in Strategy::ALL {
        let mut cfg = small(strategy, 2);
        cfg.rounds = 10;
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.trace.len(), 10);
        assert!(out.final_params.is_finite(), "{strategy}");
        // Ten balanced classes: chance is 0.1.
        assert!(
            out.final_accuracy() > 0.3,
            "{strategy}: {}",
            out.final_accuracy()
        );
        let uses_pseudo = strategy.pseudo_mode().is_some();
        assert_eq!(
            out.trace.iter().any(|m| m.pseudo_count > 0),
            uses_pseudo,
            "{strategy}"
        );
    }
}

#[test]
fn trace_csv_is_reproducible_and_parses_back() {
    let mut cfg = small(Strategy::Sage, 3);
    cfg.rounds = 5;
    cfg.partition.dirichlet_alpha = 0.1;
    let a = trace_csv_string(&run_experiment(&cfg).unwrap().trace).unwrap();
    let b = trace_csv_string(&run_experiment(&cfg).unwrap().trace).unwrap();
    assert_eq!(a, b);
    let rows = read_trace_csv(a.as_bytes()).unwrap();
    assert_eq!(
        rows.iter().map(|r| r.round).collect::<Vec<_>>(),
        vec![1, 2, 3, 4, 5]
    );

    cfg.seed = 4;
    let c = trace_csv_string(&run_experiment(&cfg).unwrap().trace).unwrap();
    assert_ne!(a, c);
}
