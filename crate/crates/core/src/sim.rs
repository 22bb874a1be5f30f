//! Deterministic synthetic marker world: wall-mounted markers in a box room,
//! smooth closed hand-held trajectories, noisy detections and odometry.
//!
//! World frame: `x`/`y` horizontal with the room centered on the origin,
//! `z` up with the floor at `z = 0`. Cameras look along their `+z` axis
//! (`x` right, `y` down). A marker's `+z` axis is its face normal and points
//! into the room.

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{trajectory_to_string, TrajectoryRecord};
use crate::map_store::{map_to_string, parse_pose_fields, pose_fields, MarkerId, MarkerMap};
use crate::se3::{Pose, Rotation, Twist};

pub const DEFAULT_MARKERS: usize = 5;
pub const MARKER_SIDE: f64 = 0.2;
pub const DEFAULT_HALF_EXTENTS: [f64; 3] = [3.0, 3.0, 1.5];

pub const MAX_RANGE: f64 = 6.0;
pub const MAX_VIEW_ANGLE_DEG: f64 = 70.0;
pub const MAX_INCIDENCE_DEG: f64 = 70.0;

const MIN_MARKER_HEIGHT: f64 = 0.5;
const MAX_MARKER_HEIGHT: f64 = 2.0;
const MIN_SPACING: f64 = 0.5;
const CORNER_MARGIN: f64 = 0.4;
const PLACEMENT_ATTEMPTS: usize = 10_000;

/// Keep-out distance between the path and the walls.
const WALL_CLEARANCE: f64 = 0.5;
const CAMERA_HEIGHT: f64 = 1.3;
const LOOK_HEIGHT: f64 = 1.25;
/// One loop of the path per this many seconds of sequence.
const SECONDS_PER_LOOP: f64 = 30.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("at least one marker is required")]
    NoMarkers,
    #[error("{requested} markers exceed wall capacity of {capacity} at {MIN_SPACING} m spacing")]
    TooManyMarkers { requested: usize, capacity: usize },
    #[error("room too small for marker placement: {0}")]
    RoomTooSmall(String),
    #[error("duration and frame rate must be positive")]
    InvalidTiming,
    #[error("target path length {target} m cannot be reached inside the room")]
    Unreachable { target: f64 },
    #[error("detection log line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Standard deviations of the measurement noise.
///
/// Detection translation noise scales with range: the per-component sigma is
/// `detection_trans_sigma_per_m * range`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub detection_trans_sigma_per_m: f64,
    pub detection_rot_sigma: f64,
    pub odometry_trans_sigma: f64,
    pub odometry_rot_sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            detection_trans_sigma_per_m: 0.005,
            detection_rot_sigma: 0.3_f64.to_radians(),
            odometry_trans_sigma: 0.002,
            odometry_rot_sigma: 0.05_f64.to_radians(),
        }
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self {
            detection_trans_sigma_per_m: 0.0,
            detection_rot_sigma: 0.0,
            odometry_trans_sigma: 0.0,
            odometry_rot_sigma: 0.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        [
            self.detection_trans_sigma_per_m,
            self.detection_rot_sigma,
            self.odometry_trans_sigma,
            self.odometry_rot_sigma,
        ]
        .iter()
        .all(|s| s.is_finite() && *s >= 0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Environment {
    /// Ground-truth marker poses.
    pub markers: MarkerMap,
    pub half_extents: Vector3<f64>,
    pub marker_side: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SequenceSpec {
    pub duration: f64,
    pub rate: f64,
    pub target_length: f64,
    pub seed: u64,
}

impl SequenceSpec {
    pub fn frame_count(&self) -> usize {
        (self.duration * self.rate).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub marker: MarkerId,
    /// Camera-from-marker relative pose.
    pub pose: Pose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameObservations {
    pub timestamp: f64,
    pub detections: Vec<Detection>,
    pub ground_truth: Pose,
}

/// Marker pose on a wall with inward normal `normal` (horizontal).
fn wall_marker_pose(position: Vector3<f64>, normal: Vector3<f64>) -> Pose {
    let normal = normal.normalize();
    let up = if normal.z.abs() > 0.9 { Vector3::y() } else { Vector3::z() };
    let x = up.cross(&normal).normalize();
    let y = normal.cross(&x);
    let r = Matrix3::from_columns(&[x, y, normal]);
    Pose::new(Rotation::from_matrix(&r), position)
}

/// Places `n_markers` on the four vertical walls at heights 0.5-2.0 m,
/// facing inward, at least 0.5 m apart. Walls are visited round-robin from
/// a random start so every wall carries a marker once `n >= 4`.
pub fn make_environment(
    n_markers: usize,
    half_extents: Vector3<f64>,
    seed: u64,
) -> Result<Environment, SimError> {
    if n_markers == 0 {
        return Err(SimError::NoMarkers);
    }
    if 2.0 * half_extents.z < MAX_MARKER_HEIGHT
        || half_extents.x <= CORNER_MARGIN
        || half_extents.y <= CORNER_MARGIN
    {
        return Err(SimError::RoomTooSmall(format!("half extents {half_extents:?}")));
    }
    // (axis, sign) of each wall plane; inward normal is -sign along axis
    let walls = [(0usize, 1.0), (1, 1.0), (0, -1.0), (1, -1.0)];
    let span = |axis: usize| half_extents[1 - axis] - CORNER_MARGIN;
    let rows = ((MAX_MARKER_HEIGHT - MIN_MARKER_HEIGHT) / MIN_SPACING).floor() as usize + 1;
    let capacity_of = |axis: usize| ((2.0 * span(axis) / MIN_SPACING).floor() as usize + 1) * rows;
    let capacity: usize = walls.iter().map(|&(a, _)| capacity_of(a)).sum();
    if n_markers > capacity {
        return Err(SimError::TooManyMarkers {
            requested: n_markers,
            capacity,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = walls;
    order.shuffle(&mut rng);
    let mut placed: Vec<Pose> = Vec::with_capacity(n_markers);
    for i in 0..n_markers {
        let mut found = None;
        for attempt in 0..PLACEMENT_ATTEMPTS {
            // fall back to any wall once the assigned one looks full
            let (axis, sign) = if attempt < PLACEMENT_ATTEMPTS / 2 {
                order[i % 4]
            } else {
                order[rng.random_range(0..4)]
            };
            let along = rng.random_range(-span(axis)..=span(axis));
            let height = rng.random_range(MIN_MARKER_HEIGHT..=MAX_MARKER_HEIGHT);
            let mut pos = Vector3::new(0.0, 0.0, height);
            pos[axis] = sign * half_extents[axis];
            pos[1 - axis] = along;
            if placed.iter().all(|p| (p.translation - pos).norm() >= MIN_SPACING) {
                let mut normal = Vector3::zeros();
                normal[axis] = -sign;
                found = Some(wall_marker_pose(pos, normal));
                break;
            }
        }
        match found {
            Some(p) => placed.push(p),
            None => {
                return Err(SimError::TooManyMarkers {
                    requested: n_markers,
                    capacity: placed.len(),
                })
            }
        }
    }
    let mut markers = MarkerMap::new(format!("ground truth, seed {seed}"));
    for (i, p) in placed.into_iter().enumerate() {
        markers.insert(i as MarkerId, p);
    }
    Ok(Environment {
        markers,
        half_extents,
        marker_side: MARKER_SIDE,
    })
}

pub fn default_environment(seed: u64) -> Result<Environment, SimError> {
    make_environment(DEFAULT_MARKERS, Vector3::from(DEFAULT_HALF_EXTENTS), seed)
}

/// Shape parameters of a wobbly closed loop around the room center.
struct LoopShape {
    loops: f64,
    aspect: f64,
    wobble: f64,
    wobble_freq: f64,
    wobble_phase: f64,
    start_angle: f64,
    direction: f64,
    lift: f64,
    lift_freq: f64,
    lift_phase: f64,
    yaw_amp: f64,
    yaw_freq: f64,
    pitch_amp: f64,
}

impl LoopShape {
    fn sample(rng: &mut ChaCha8Rng, duration: f64) -> Self {
        let loops = (duration / SECONDS_PER_LOOP).ceil().max(1.0);
        Self {
            loops,
            aspect: rng.random_range(0.8..1.25),
            wobble: rng.random_range(0.1..0.25),
            wobble_freq: rng.random_range(2..=4) as f64,
            wobble_phase: rng.random_range(0.0..TAU),
            start_angle: rng.random_range(0.0..TAU),
            direction: if rng.random_bool(0.5) { 1.0 } else { -1.0 },
            lift: rng.random_range(0.08..0.2),
            lift_freq: rng.random_range(1..=3) as f64,
            lift_phase: rng.random_range(0.0..TAU),
            yaw_amp: rng.random_range(5.0_f64..15.0).to_radians(),
            yaw_freq: rng.random_range(2..=5) as f64,
            pitch_amp: rng.random_range(2.0_f64..6.0).to_radians(),
        }
    }

    /// Offset from the loop center at phase `s` in [0, 1) for unit scale.
    fn offset(&self, s: f64) -> Vector3<f64> {
        let a = self.start_angle + self.direction * TAU * self.loops * s;
        let r = 1.0 + self.wobble * (TAU * self.wobble_freq * self.loops * s + self.wobble_phase).sin();
        Vector3::new(
            self.aspect * r * a.cos(),
            r * a.sin() / self.aspect,
            self.lift * (TAU * self.lift_freq * self.loops * s + self.lift_phase).sin(),
        )
    }

    fn orientation(&self, position: &Vector3<f64>, s: f64) -> Rotation {
        let target = Vector3::new(0.0, 0.0, LOOK_HEIGHT);
        let to_center = target - position;
        let base_yaw = to_center.y.atan2(to_center.x);
        let yaw = base_yaw + self.yaw_amp * (TAU * self.yaw_freq * self.loops * s).sin();
        let horizontal = Vector3::new(to_center.x, to_center.y, 0.0).norm();
        let pitch = to_center.z.atan2(horizontal)
            + self.pitch_amp * (TAU * (self.yaw_freq + 1.0) * self.loops * s + 1.0).sin();
        let forward = Vector3::new(yaw.cos() * pitch.cos(), yaw.sin() * pitch.cos(), pitch.sin());
        let right = forward.cross(&Vector3::z()).normalize();
        let down = forward.cross(&right);
        Rotation::from_matrix(&Matrix3::from_columns(&[right, down, forward]))
    }
}

/// Samples a smooth closed loop around the room center at `spec.rate`,
/// scaled so the sampled polyline is `spec.target_length` long. The camera
/// heading is steered toward the room center with a small periodic sway.
pub fn make_trajectory(spec: &SequenceSpec, env: &Environment) -> Result<TrajectoryRecord, SimError> {
    if !(spec.duration > 0.0) || !(spec.rate > 0.0) {
        return Err(SimError::InvalidTiming);
    }
    let n = spec.frame_count();
    if n < 2 {
        return Err(SimError::InvalidTiming);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shape = LoopShape::sample(&mut rng, spec.duration);
    let phases: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
    let unit: Vec<Vector3<f64>> = phases.iter().map(|&s| shape.offset(s)).collect();
    let unit_length: f64 = unit.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    let scale = spec.target_length / unit_length;

    let center = Vector3::new(0.0, 0.0, CAMERA_HEIGHT);
    let positions: Vec<Vector3<f64>> = unit.iter().map(|u| center + u * scale).collect();
    let h = &env.half_extents;
    let fits = positions.iter().all(|p| {
        p.x.abs() <= h.x - WALL_CLEARANCE
            && p.y.abs() <= h.y - WALL_CLEARANCE
            && p.z >= 0.3
            && p.z <= 2.0 * h.z - 0.3
    });
    if !(spec.target_length > 0.0) || !fits {
        return Err(SimError::Unreachable {
            target: spec.target_length,
        });
    }

    let mut traj = TrajectoryRecord::new();
    for (i, (p, &s)) in positions.iter().zip(&phases).enumerate() {
        let pose = Pose::new(shape.orientation(p, s), *p);
        traj.push(i as f64 / spec.rate, pose)
            .expect("sample times increase");
    }
    Ok(traj)
}

/// Range, field-of-view and incidence test for a marker seen from `camera`.
pub fn visible(camera: &Pose, marker: &Pose, _env: &Environment) -> bool {
    let ray = marker.translation - camera.translation;
    let range = ray.norm();
    if !(range < MAX_RANGE) || range <= 0.0 {
        return false;
    }
    let forward = camera.rotation.rotate(&Vector3::z());
    let normal = marker.rotation.rotate(&Vector3::z());
    let view_cos = forward.dot(&ray) / range;
    let incidence_cos = normal.dot(&(-ray)) / range;
    view_cos > MAX_VIEW_ANGLE_DEG.to_radians().cos() && incidence_cos > MAX_INCIDENCE_DEG.to_radians().cos()
}

fn gaussian3<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> Vector3<f64> {
    Vector3::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    ) * sigma
}

fn perturbed<R: Rng + ?Sized>(truth: Pose, rot_sigma: f64, trans_sigma: f64, rng: &mut R) -> Pose {
    if rot_sigma == 0.0 && trans_sigma == 0.0 {
        return truth;
    }
    let eta = Twist::new(gaussian3(rng, rot_sigma), gaussian3(rng, trans_sigma));
    truth.compose(&Pose::exp(&eta))
}

/// Detections of every visible marker, `Z = between(camera, marker) * exp(eta)`,
/// in ascending marker id order.
pub fn observe<R: Rng + ?Sized>(
    camera: &Pose,
    timestamp: f64,
    env: &Environment,
    noise: &NoiseConfig,
    rng: &mut R,
) -> FrameObservations {
    let detections = env
        .markers
        .iter()
        .filter(|(_, m)| visible(camera, m, env))
        .map(|(id, m)| {
            let truth = camera.between(m);
            let range = truth.translation.norm();
            Detection {
                marker: id,
                pose: perturbed(
                    truth,
                    noise.detection_rot_sigma,
                    noise.detection_trans_sigma_per_m * range,
                    rng,
                ),
            }
        })
        .collect();
    FrameObservations {
        timestamp,
        detections,
        ground_truth: *camera,
    }
}

/// Noisy relative motion `between(gt_a, gt_b) * exp(eta)`.
pub fn odometry_between<R: Rng + ?Sized>(gt_a: &Pose, gt_b: &Pose, noise: &NoiseConfig, rng: &mut R) -> Pose {
    perturbed(
        gt_a.between(gt_b),
        noise.odometry_rot_sigma,
        noise.odometry_trans_sigma,
        rng,
    )
}

/// A simulated sequence: ground truth, per-frame detections and the
/// odometry into each frame (`None` for the first).
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub spec: SequenceSpec,
    pub ground_truth: TrajectoryRecord,
    pub frames: Vec<FrameObservations>,
    pub odometry: Vec<Option<Pose>>,
}

/// Seed mixing (SplitMix64 finalizer) for deriving independent streams.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    tags.iter().fold(mix(master.wrapping_add(0x9e37_79b9_7f4a_7c15)), |acc, &t| {
        mix(acc ^ t.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0x2545_f491_4f6c_dd1d))
    })
}

pub fn simulate_sequence(
    name: &str,
    spec: &SequenceSpec,
    env: &Environment,
    noise: &NoiseConfig,
) -> Result<Sequence, SimError> {
    let ground_truth = make_trajectory(spec, env)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[1]));
    let mut frames = Vec::with_capacity(ground_truth.len());
    let mut odometry = Vec::with_capacity(ground_truth.len());
    let mut prev: Option<Pose> = None;
    for (t, pose) in ground_truth.samples() {
        frames.push(observe(pose, *t, env, noise, &mut rng));
        odometry.push(prev.map(|p| odometry_between(&p, pose, noise, &mut rng)));
        prev = Some(*pose);
    }
    Ok(Sequence {
        name: name.to_string(),
        spec: *spec,
        ground_truth,
        frames,
        odometry,
    })
}

/// Recipe for a full dataset: one long mapping sequence and several short
/// evaluation sequences in one environment.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecipe {
    pub master_seed: u64,
    pub n_markers: usize,
    pub half_extents: Vector3<f64>,
    pub rate: f64,
    pub mapping_duration: f64,
    pub mapping_length: f64,
    pub evaluation_duration: f64,
    pub evaluation_lengths: Vec<f64>,
}

impl Default for DatasetRecipe {
    fn default() -> Self {
        Self {
            master_seed: 2024,
            n_markers: DEFAULT_MARKERS,
            half_extents: Vector3::from(DEFAULT_HALF_EXTENTS),
            rate: 10.0,
            mapping_duration: 60.0,
            mapping_length: 16.4,
            evaluation_duration: 30.0,
            evaluation_lengths: vec![8.07, 8.34, 8.21, 8.46, 8.19, 8.22, 8.57],
        }
    }
}

impl DatasetRecipe {
    pub fn environment(&self) -> Result<Environment, SimError> {
        make_environment(
            self.n_markers,
            self.half_extents,
            derive_seed(self.master_seed, &[0xE7]),
        )
    }

    pub fn mapping_spec(&self) -> SequenceSpec {
        SequenceSpec {
            duration: self.mapping_duration,
            rate: self.rate,
            target_length: self.mapping_length,
            seed: derive_seed(self.master_seed, &[0x3A, 0]),
        }
    }

    /// Specs of the evaluation sequences, numbered from 1.
    pub fn evaluation_specs(&self) -> Vec<SequenceSpec> {
        self.evaluation_lengths
            .iter()
            .enumerate()
            .map(|(i, &len)| SequenceSpec {
                duration: self.evaluation_duration,
                rate: self.rate,
                target_length: len,
                seed: derive_seed(self.master_seed, &[0x5E, i as u64 + 1]),
            })
            .collect()
    }
}

/// One detection per line: `timestamp id tx ty tz qx qy qz qw`.
pub fn detection_log_to_string(frames: &[FrameObservations]) -> String {
    let mut out = String::from("# timestamp marker_id tx ty tz qx qy qz qw\n");
    for f in frames {
        for d in &f.detections {
            let _ = writeln!(out, "{} {} {}", f.timestamp, d.marker, pose_fields(&d.pose));
        }
    }
    out
}

/// Parses a detection log into `(timestamp, detection)` records.
pub fn load_detection_log<R: BufRead>(source: R) -> Result<Vec<(f64, Detection)>, SimError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let parse_err = |reason: String| SimError::Parse { line: lineno, reason };
        if fields.len() != 9 {
            return Err(parse_err(format!("expected 9 fields, found {}", fields.len())));
        }
        let t: f64 = fields[0]
            .parse()
            .map_err(|_| parse_err(format!("invalid timestamp {:?}", fields[0])))?;
        let marker: MarkerId = fields[1]
            .parse()
            .map_err(|_| parse_err(format!("invalid marker id {:?}", fields[1])))?;
        let pose = parse_pose_fields(&fields[2..], lineno).map_err(|e| parse_err(e.to_string()))?;
        out.push((t, Detection { marker, pose }));
    }
    Ok(out)
}

/// Writes `<name>_groundtruth.txt`, `<name>_detections.txt` and
/// `<name>_odometry.txt` (relative motion into each frame, trajectory format).
pub fn write_sequence(dir: &Path, seq: &Sequence) -> Result<(), SimError> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join(format!("{}_groundtruth.txt", seq.name)),
        trajectory_to_string(&seq.ground_truth),
    )?;
    fs::write(
        dir.join(format!("{}_detections.txt", seq.name)),
        detection_log_to_string(&seq.frames),
    )?;
    let mut odom = TrajectoryRecord::new();
    for (f, u) in seq.frames.iter().zip(&seq.odometry) {
        if let Some(u) = u {
            odom.push(f.timestamp, *u).expect("frame times increase");
        }
    }
    fs::write(dir.join(format!("{}_odometry.txt", seq.name)), trajectory_to_string(&odom))?;
    Ok(())
}

pub fn write_environment(dir: &Path, env: &Environment) -> Result<(), SimError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("markers_groundtruth.mmap"), map_to_string(&env.markers))?;
    Ok(())
}

/// Angle between two unit directions, degrees.
pub fn angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a.dot(b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos() * 180.0 / PI
}
