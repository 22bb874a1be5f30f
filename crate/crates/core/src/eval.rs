//! Trajectory records, absolute trajectory error and runtime statistics.
//!
//! ATE follows the usual recipe: associate samples by timestamp, find the
//! rigid transform (unit scale) that best maps estimated positions onto the
//! reference, and report the RMSE of the remaining translation errors.

use std::fs;
use std::io::{self, BufRead};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::graph::OptimizationReport;
use crate::map_store::{parse_pose_fields, pose_fields, MapError};
use crate::se3::{Pose, Rotation};

/// Ratio of the second to first singular value of the centered point cloud
/// below which the alignment is considered rank deficient.
const DEGENERACY_RATIO: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trajectory is empty")]
    Empty,
    #[error("only {0} timestamp pairs associated, at least 3 required")]
    TooFewPairs(usize),
    #[error("point sets differ in size ({0} vs {1})")]
    SizeMismatch(usize, usize),
    #[error("degenerate point configuration (rank < 2)")]
    Degenerate,
    #[error("timestamps must be strictly increasing (t={0} after t={1})")]
    NonMonotonic(f64, f64),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Ordered `(timestamp, pose)` samples with strictly increasing timestamps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryRecord {
    samples: Vec<(f64, Pose)>,
}

impl TrajectoryRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_samples(samples: Vec<(f64, Pose)>) -> Result<Self, EvalError> {
        let mut out = Self::new();
        for (t, p) in samples {
            out.push(t, p)?;
        }
        Ok(out)
    }

    pub fn push(&mut self, timestamp: f64, pose: Pose) -> Result<(), EvalError> {
        if let Some(&(last, _)) = self.samples.last() {
            if !(timestamp > last) {
                return Err(EvalError::NonMonotonic(timestamp, last));
            }
        }
        self.samples.push((timestamp, pose));
        Ok(())
    }

    pub fn samples(&self) -> &[(f64, Pose)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn timestamps(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|(t, _)| *t)
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.samples.iter().map(|(_, p)| p.translation).collect()
    }

    /// Length of the polyline through the sample positions.
    pub fn path_length(&self) -> f64 {
        self.samples
            .windows(2)
            .map(|w| (w[1].1.translation - w[0].1.translation).norm())
            .sum()
    }

    /// Applies `transform * pose` to every sample.
    pub fn transformed(&self, transform: &Pose) -> Self {
        Self {
            samples: self
                .samples
                .iter()
                .map(|(t, p)| (*t, transform.compose(p)))
                .collect(),
        }
    }
}

/// `timestamp tx ty tz qx qy qz qw` per line with a comment header.
pub fn trajectory_to_string(traj: &TrajectoryRecord) -> String {
    let mut out = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for (t, p) in traj.samples() {
        out.push_str(&format!("{t} {}\n", pose_fields(p)));
    }
    out
}

pub fn load_trajectory<R: BufRead>(source: R) -> Result<TrajectoryRecord, EvalError> {
    let mut traj = TrajectoryRecord::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(EvalError::Parse {
                line: lineno,
                reason: format!("expected 8 fields, found {}", fields.len()),
            });
        }
        let t: f64 = fields[0]
            .parse()
            .ok()
            .filter(|t: &f64| t.is_finite())
            .ok_or_else(|| EvalError::Parse {
                line: lineno,
                reason: format!("invalid timestamp {:?}", fields[0]),
            })?;
        let pose = parse_pose_fields(&fields[1..], lineno).map_err(|e| match e {
            MapError::Parse { line, reason } => EvalError::Parse { line, reason },
            other => EvalError::Parse {
                line: lineno,
                reason: other.to_string(),
            },
        })?;
        traj.push(t, pose).map_err(|e| EvalError::Parse {
            line: lineno,
            reason: e.to_string(),
        })?;
    }
    Ok(traj)
}

pub fn write_trajectory_file(traj: &TrajectoryRecord, path: &Path) -> Result<(), EvalError> {
    fs::write(path, trajectory_to_string(traj))?;
    Ok(())
}

pub fn read_trajectory_file(path: &Path) -> Result<TrajectoryRecord, EvalError> {
    load_trajectory(io::BufReader::new(fs::File::open(path)?))
}

/// Greedy nearest-timestamp association: each estimated sample, in time
/// order, takes the closest reference sample not yet used, if it lies within
/// `max_dt`. Returns `(estimate index, reference index)` pairs.
pub fn associate(
    est: &TrajectoryRecord,
    reference: &TrajectoryRecord,
    max_dt: f64,
) -> Result<Vec<(usize, usize)>, EvalError> {
    if est.is_empty() || reference.is_empty() {
        return Err(EvalError::Empty);
    }
    let ref_t: Vec<f64> = reference.timestamps().collect();
    let mut used = vec![false; ref_t.len()];
    let mut pairs = Vec::new();
    for (i, t) in est.timestamps().enumerate() {
        // reference timestamps are sorted; inspect the window around t
        let pos = ref_t.partition_point(|&r| r < t - max_dt);
        let best = ref_t[pos..]
            .iter()
            .enumerate()
            .take_while(|(_, &r)| r <= t + max_dt)
            .filter(|(k, _)| !used[pos + k])
            .map(|(k, &r)| (pos + k, (r - t).abs()))
            .filter(|(_, d)| *d <= max_dt)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((j, _)) = best {
            used[j] = true;
            pairs.push((i, j));
        }
    }
    if pairs.len() < 3 {
        return Err(EvalError::TooFewPairs(pairs.len()));
    }
    Ok(pairs)
}

/// Least-squares rigid transform `(R, t)` minimizing `sum |q_i - (R p_i + t)|^2`
/// via SVD of the centered cross-covariance, with the determinant sign
/// correction so that `det(R) = +1`.
pub fn umeyama_align(
    p: &[Vector3<f64>],
    q: &[Vector3<f64>],
) -> Result<(Matrix3<f64>, Vector3<f64>), EvalError> {
    if p.len() != q.len() {
        return Err(EvalError::SizeMismatch(p.len(), q.len()));
    }
    if p.len() < 3 {
        return Err(EvalError::TooFewPairs(p.len()));
    }
    let n = p.len() as f64;
    let mu_p = p.iter().sum::<Vector3<f64>>() / n;
    let mu_q = q.iter().sum::<Vector3<f64>>() / n;

    let mut cov_p = Matrix3::zeros();
    let mut cross = Matrix3::zeros();
    for (a, b) in p.iter().zip(q) {
        let da = a - mu_p;
        let db = b - mu_q;
        cov_p += da * da.transpose();
        cross += db * da.transpose();
    }
    let sv = cov_p.singular_values();
    let mut s = [sv[0], sv[1], sv[2]];
    s.sort_by(|a, b| b.total_cmp(a));
    if !(s[0] > 0.0) || s[1] <= DEGENERACY_RATIO * s[0] {
        return Err(EvalError::Degenerate);
    }

    let svd = cross.svd(true, true);
    let u = svd.u.ok_or(EvalError::Degenerate)?;
    let v_t = svd.v_t.ok_or(EvalError::Degenerate)?;
    let mut d = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        // flip the axis of the smallest singular value
        let smallest = (0..3)
            .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
            .unwrap_or(2);
        d[(smallest, smallest)] = -1.0;
    }
    let r = u * d * v_t;
    let t = mu_q - r * mu_p;
    Ok((r, t))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AteResult {
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    /// Transform applied to the estimate to bring it onto the reference.
    pub alignment: Pose,
    pub pairs: usize,
}

/// Translation ATE after rigid (unit-scale) alignment of `est` onto `reference`.
pub fn ate_rmse(
    est: &TrajectoryRecord,
    reference: &TrajectoryRecord,
    max_dt: f64,
) -> Result<AteResult, EvalError> {
    let pairs = associate(est, reference, max_dt)?;
    let p: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| est.samples()[i].1.translation).collect();
    let q: Vec<Vector3<f64>> = pairs
        .iter()
        .map(|&(_, j)| reference.samples()[j].1.translation)
        .collect();
    let (mut r, mut t) = umeyama_align(&p, &q)?;
    // The closed form carries rounding; never report worse than no alignment.
    let sq = |r: &Matrix3<f64>, t: &Vector3<f64>| -> f64 {
        p.iter().zip(&q).map(|(a, b)| (b - (r * a + t)).norm_squared()).sum()
    };
    if sq(&Matrix3::identity(), &Vector3::zeros()) <= sq(&r, &t) {
        r = Matrix3::identity();
        t = Vector3::zeros();
    }
    let mut errors: Vec<f64> = p.iter().zip(&q).map(|(a, b)| (b - (r * a + t)).norm()).collect();
    let n = errors.len() as f64;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let mean = errors.iter().sum::<f64>() / n;
    let max = errors.iter().copied().fold(0.0, f64::max);
    errors.sort_by(f64::total_cmp);
    Ok(AteResult {
        rmse,
        mean,
        median: median_sorted(&errors),
        max,
        alignment: Pose::new(Rotation::from_matrix(&r), t),
        pairs: pairs.len(),
    })
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RuntimeStats {
    pub mean_ms: f64,
    pub median_ms: f64,
    /// Nearest-rank 95th percentile.
    pub p95_ms: f64,
}

pub fn runtime_stats(reports: &[OptimizationReport]) -> Result<RuntimeStats, EvalError> {
    let times: Vec<f64> = reports.iter().map(|r| r.wall_time_ms).collect();
    runtime_stats_ms(&times)
}

pub fn runtime_stats_ms(times: &[f64]) -> Result<RuntimeStats, EvalError> {
    if times.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = times.len();
    let mean_ms = times.iter().sum::<f64>() / n as f64;
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    Ok(RuntimeStats {
        mean_ms,
        median_ms: median_sorted(&sorted),
        p95_ms: sorted[rank - 1],
    })
}
