//! End-to-end runs of the per-frame pipeline on simulated sequences.

use markerslam::eval::ate_rmse;
use markerslam::experiment::{
    build_prior_map, render_tables, run_matrix, run_sequence, simulate_dataset, Column, ExperimentConfig,
    TableFormat, TableKind,
};
use markerslam::graph::{VarId, Weighting};
use markerslam::map_store::{load_map, map_to_string};
use markerslam::sim::{default_environment, simulate_sequence, NoiseConfig, SequenceSpec};
use markerslam::{Mode, SolverConfig};

fn zero_noise_sequence() -> (markerslam::sim::Environment, markerslam::sim::Sequence) {
    let env = default_environment(11).unwrap();
    let spec = SequenceSpec {
        duration: 30.0,
        rate: 10.0,
        target_length: 8.2,
        seed: 99,
    };
    let seq = simulate_sequence("zero", &spec, &env, &NoiseConfig::zero()).unwrap();
    (env, seq)
}

fn max_position_error(a: &[(f64, markerslam::Pose)], b: &[(f64, markerslam::Pose)]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            assert_eq!(x.0, y.0);
            (x.1.translation - y.1.translation).norm()
        })
        .fold(0.0, f64::max)
}

/// Small dataset: short evaluation sequences keep the matrix cheap.
fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.recipe.evaluation_duration = 3.0;
    cfg.recipe.evaluation_lengths = vec![0.8, 0.85];
    cfg.deltas = vec![0.0, 0.25, 0.5];
    cfg
}

#[test]
fn zero_noise_slam_recovers_ground_truth() {
    let (_, seq) = zero_noise_sequence();
    let origin = seq.ground_truth.samples()[0].1;
    let weighting = Weighting::from_noise(&NoiseConfig::zero());
    let run = run_sequence(&seq, Mode::Slam, None, weighting, SolverConfig::default(), Some(origin)).unwrap();
    assert_eq!(run.reports.len(), 300);
    assert!(run.reports.iter().all(|r| r.wall_time_ms.is_finite() && r.wall_time_ms >= 0.0));
    let last = run.reports.last().unwrap();
    assert!(last.final_cost <= 1e-16, "final cost {}", last.final_cost);
    assert!(max_position_error(run.trajectory.samples(), seq.ground_truth.samples()) <= 1e-6);
    let ate = ate_rmse(&run.trajectory, &seq.ground_truth, 0.05).unwrap();
    assert!(ate.rmse <= 1e-6);
}

#[test]
fn modes_agree_given_the_true_map() {
    let (env, seq) = zero_noise_sequence();
    let weighting = Weighting::from_noise(&NoiseConfig::zero());
    let origin = seq.ground_truth.samples()[0].1;
    let mut trajectories = Vec::new();
    for mode in Mode::ALL {
        let map = mode.uses_prior_map().then_some(&env.markers);
        let run = run_sequence(&seq, mode, map, weighting, SolverConfig::default(), Some(origin)).unwrap();
        let ate = ate_rmse(&run.trajectory, &seq.ground_truth, 0.05).unwrap();
        assert!(ate.rmse <= 1e-6, "{mode}: {}", ate.rmse);
        trajectories.push(run.trajectory);
    }
    for t in &trajectories[1..] {
        assert!(max_position_error(t.samples(), trajectories[0].samples()) <= 1e-6);
    }
}

#[test]
fn localization_never_moves_the_map() {
    let env = default_environment(3).unwrap();
    let spec = SequenceSpec {
        duration: 10.0,
        rate: 10.0,
        target_length: 2.7,
        seed: 4,
    };
    let seq = simulate_sequence("loc", &spec, &env, &NoiseConfig::default()).unwrap();
    let mut graph = markerslam::FactorGraph::with_mode(
        Mode::Localization,
        Some(&env.markers),
        Weighting::default(),
        SolverConfig::default(),
    )
    .unwrap();
    let bits = |g: &markerslam::FactorGraph| -> Vec<[u64; 7]> {
        env.markers
            .ids()
            .map(|id| {
                let p = g.estimate(VarId::marker(id)).unwrap();
                let [x, y, z, w] = p.rotation.xyzw();
                [p.translation.x, p.translation.y, p.translation.z, x, y, z, w].map(f64::to_bits)
            })
            .collect()
    };
    let before = bits(&graph);
    for (f, u) in seq.frames.iter().zip(&seq.odometry) {
        graph.process_frame(f, u.as_ref()).unwrap();
        assert_eq!(bits(&graph), before);
    }
}

#[test]
fn zero_noise_prior_map_matches_ground_truth() {
    let mut cfg = small_config();
    cfg.noise = NoiseConfig::zero();
    let dataset = simulate_dataset(&cfg).unwrap();
    let map = build_prior_map(&cfg, &dataset).unwrap();
    assert_eq!(map.len(), dataset.environment.markers.len());
    for (id, truth) in dataset.environment.markers.iter() {
        let est = map.get(id).unwrap();
        assert!((est.translation - truth.translation).norm() <= 1e-6);
    }
}

#[test]
fn default_noise_prior_map_is_close_but_imperfect() {
    let cfg = small_config();
    let dataset = simulate_dataset(&cfg).unwrap();
    let map = build_prior_map(&cfg, &dataset).unwrap();
    for (id, truth) in dataset.environment.markers.iter() {
        let err = (map.get(id).unwrap().translation - truth.translation).norm();
        assert!(err > 0.0 && err < 0.05, "marker {id}: {err}");
    }
    let text = map_to_string(&map);
    let reloaded = load_map(text.as_bytes()).unwrap();
    assert_eq!(reloaded, map);
    assert_eq!(map_to_string(&reloaded), text);
}

#[test]
fn small_matrix_structure_and_determinism() {
    let cfg = small_config();
    let dataset = simulate_dataset(&cfg).unwrap();
    let prior = build_prior_map(&cfg, &dataset).unwrap();
    let table = run_matrix(&cfg, &dataset, &prior);
    // per sequence: one Slam row plus one row per displacement for each prior mode
    assert_eq!(table.rows.len(), 2 * (1 + 2 * 3));
    assert_eq!(table.errors().count(), 0);
    for mode in [Mode::SlamWithPrior, Mode::Localization] {
        assert!(table.rows.iter().any(|r| r.mode == mode && r.delta_p == Some(0.0)));
    }
    assert!(table.rows.iter().filter(|r| r.mode == Mode::Slam).all(|r| r.delta_p.is_none()));

    for a in table.averages() {
        let col: Vec<f64> = table
            .rows
            .iter()
            .filter(|r| Column { mode: r.mode, delta_p: r.delta_p } == a.column)
            .map(|r| r.stats().unwrap().ate_rmse)
            .collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        assert!((mean - a.ate_rmse).abs() <= 1e-12);
    }

    let mut parallel = cfg.clone();
    parallel.parallel = true;
    let again = run_matrix(&parallel, &dataset, &prior);
    assert_eq!(
        render_tables(&table, TableFormat::Csv, TableKind::Ate),
        render_tables(&again, TableFormat::Csv, TableKind::Ate)
    );
}

#[test]
fn slam_rows_ignore_the_sweep() {
    let mut a = small_config();
    a.modes = vec![Mode::Slam];
    let mut b = a.clone();
    b.deltas = vec![0.4];
    let dataset = simulate_dataset(&a).unwrap();
    let prior = build_prior_map(&a, &dataset).unwrap();
    let ta = run_matrix(&a, &dataset, &prior);
    let tb = run_matrix(&b, &dataset, &prior);
    let ates = |t: &markerslam::experiment::ResultTable| -> Vec<f64> {
        t.rows.iter().map(|r| r.stats().unwrap().ate_rmse).collect()
    };
    assert_eq!(ates(&ta), ates(&tb));
}

#[test]
fn failing_cell_becomes_error_row() {
    let cfg = small_config();
    let dataset = simulate_dataset(&cfg).unwrap();
    // a prior map without any marker cannot localize the first frame
    let empty = markerslam::MarkerMap::new("empty");
    let mut only_loc = cfg.clone();
    only_loc.modes = vec![Mode::Slam, Mode::Localization];
    let table = run_matrix(&only_loc, &dataset, &empty);
    assert_eq!(table.rows.len(), 2 * (1 + 3));
    assert!(table.rows.iter().filter(|r| r.mode == Mode::Slam).all(|r| r.outcome.is_ok()));
    assert_eq!(table.errors().count(), 2 * 3);
    let csv = render_tables(&table, TableFormat::Csv, TableKind::Ate);
    assert_eq!(csv.lines().count(), 1 + 8 + 1);
}
