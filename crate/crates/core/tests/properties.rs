//! Property tests of the algebraic and bookkeeping invariants.

use nalgebra::Vector3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use markerslam::eval::{ate_rmse, TrajectoryRecord};
use markerslam::experiment::{CellStats, Column, ResultRow, ResultTable};
use markerslam::graph::{relative_jacobians, relative_residual};
use markerslam::map_store::perturb;
use markerslam::{MarkerMap, Mode, Pose, Twist};

fn vec3(range: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

/// Twists with rotation angle below 3 rad, away from the log's cut at pi.
fn twist() -> impl Strategy<Value = Twist> {
    (vec3(1.0), 0.0..3.0f64, vec3(5.0)).prop_map(|(axis, angle, t)| {
        let rot = if axis.norm() > 1e-6 { axis.normalize() * angle } else { Vector3::zeros() };
        Twist::new(rot, t)
    })
}

fn pose() -> impl Strategy<Value = Pose> {
    twist().prop_map(|xi| Pose::exp(&xi))
}

fn gap(a: &Pose, b: &Pose) -> f64 {
    (a.matrix() - b.matrix()).abs().max()
}

proptest! {
    #[test]
    fn exp_log_round_trip(xi in twist()) {
        let back = Pose::exp(&xi).log();
        prop_assert!((back.to_vector() - xi.to_vector()).abs().max() <= 1e-10);
    }

    #[test]
    fn group_laws(a in pose(), b in pose(), c in pose()) {
        prop_assert!(gap(&a.compose(&b).compose(&c), &a.compose(&b.compose(&c))) <= 1e-10);
        prop_assert!(gap(&a.compose(&a.inverse()), &Pose::identity()) <= 1e-10);
        prop_assert!(gap(&a.between(&b), &a.inverse().compose(&b)) <= 1e-10);
        prop_assert!(a.rotation.xyzw()[3] >= 0.0);
    }

    #[test]
    fn residual_vanishes_on_exact_measurement(a in pose(), b in pose()) {
        let z = a.between(&b);
        prop_assert!(relative_residual(&a, &b, &z).abs().max() <= 1e-12);
        let (r, _, _) = relative_jacobians(&a, &b, &z);
        prop_assert_eq!(r, relative_residual(&a, &b, &z));
    }

    #[test]
    fn perturbation_moves_exactly_delta(seed in any::<u64>(), delta in 0.0..3.0f64, poses in prop::collection::vec(pose(), 1..15)) {
        let mut map = MarkerMap::new("p");
        for (i, p) in poses.iter().enumerate() {
            map.insert(i as u32, *p);
        }
        let out = perturb(&map, delta, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(out.len(), map.len());
        for (id, p) in map.iter() {
            let q = out.get(id).unwrap();
            prop_assert!(((q.translation - p.translation).norm() - delta).abs() <= 1e-12);
            prop_assert_eq!(q.rotation, p.rotation);
        }
    }

    #[test]
    fn ate_is_rigid_invariant(g in pose(), pts in prop::collection::vec(vec3(3.0), 4..30), noise in prop::collection::vec(vec3(0.1), 30)) {
        let rec = |ps: &[Vector3<f64>]| TrajectoryRecord::from_samples(
            ps.iter().enumerate().map(|(i, p)| (i as f64, Pose::from_translation(*p))).collect()
        ).unwrap();
        let reference = rec(&pts);
        let noisy: Vec<Vector3<f64>> = pts.iter().zip(&noise).map(|(p, n)| p + n).collect();
        let est = rec(&noisy);
        let Ok(base) = ate_rmse(&est, &reference, 0.1) else { return Ok(()) };
        let moved = ate_rmse(&est.transformed(&g), &reference, 0.1).unwrap();
        prop_assert!((moved.rmse - base.rmse).abs() <= 1e-10);
    }

    #[test]
    fn averages_equal_column_means(values in prop::collection::vec((1usize..8, 0usize..3, 0.0..1.0f64, 0.0..10.0f64), 0..40)) {
        let deltas = [0.0, 0.25, 0.5];
        let mut rows = Vec::new();
        for (seq, k, ate, ms) in values {
            let (mode, delta_p) = match k { 0 => (Mode::Slam, None), 1 => (Mode::SlamWithPrior, Some(deltas[seq % 3])), _ => (Mode::Localization, Some(deltas[seq % 3])) };
            if rows.iter().any(|r: &ResultRow| r.sequence == seq && r.mode == mode && r.delta_p == delta_p) {
                continue;
            }
            rows.push(ResultRow {
                sequence: seq,
                length_m: 8.0 + seq as f64 / 10.0,
                mode,
                delta_p,
                outcome: Ok(CellStats { ate_rmse: ate, runtime_mean_ms: ms, runtime_median_ms: ms, runtime_p95_ms: ms, mean_iterations: 2.0, frames: 10 }),
            });
        }
        let table = ResultTable::new(rows);
        for a in table.averages() {
            let col: Vec<&CellStats> = table.rows.iter()
                .filter(|r| Column { mode: r.mode, delta_p: r.delta_p } == a.column)
                .filter_map(|r| r.stats())
                .collect();
            let n = col.len() as f64;
            prop_assert!((col.iter().map(|s| s.ate_rmse).sum::<f64>() / n - a.ate_rmse).abs() <= 1e-12);
            prop_assert!((col.iter().map(|s| s.runtime_mean_ms).sum::<f64>() / n - a.runtime_mean_ms).abs() <= 1e-12);
        }
    }
}
