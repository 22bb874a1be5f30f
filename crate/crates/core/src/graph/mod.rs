//! Marker pose graph: keyframe and marker variables, relative-pose factors,
//! the three operating modes and the per-frame front end.
//!
//! * [`Mode::Slam`] builds the marker map from scratch. Markers enter the
//!   graph at their first detection; the first keyframe anchors the gauge.
//! * [`Mode::SlamWithPrior`] seeds every marker from a prior map but keeps
//!   them free, so detections can pull a wrong map back into shape.
//! * [`Mode::Localization`] inserts the prior map as fixed variables and only
//!   estimates keyframes.
//!
//! Every processed frame becomes a keyframe and the whole graph is re-solved
//! from the previous estimates.

mod residual;
mod skyline;
mod solver;

use std::collections::HashMap;
use std::fmt;

use nalgebra::Matrix6;
use thiserror::Error;

use crate::map_store::{MarkerId, MarkerMap};
use crate::se3::Pose;
use crate::sim::{FrameObservations, NoiseConfig};

pub use residual::{
    marker_residual, numeric_jacobian, odometry_residual, prior_residual, relative_jacobians,
    relative_residual, prior_jacobian, FD_STEP,
};
pub use skyline::Skyline;
pub use solver::{JacobianMode, OptimizationReport, SolverConfig, Termination};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Slam,
    SlamWithPrior,
    Localization,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Slam, Mode::SlamWithPrior, Mode::Localization];

    pub fn uses_prior_map(self) -> bool {
        !matches!(self, Mode::Slam)
    }

    /// Command-line / CSV name.
    pub fn name(self) -> &'static str {
        match self {
            Mode::Slam => "slam",
            Mode::SlamWithPrior => "slam-prior",
            Mode::Localization => "localization",
        }
    }

    pub fn from_name(s: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VarKind {
    Keyframe,
    Marker,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId {
    pub kind: VarKind,
    pub index: u32,
}

impl VarId {
    pub fn keyframe(index: u32) -> Self {
        Self {
            kind: VarKind::Keyframe,
            index,
        }
    }

    pub fn marker(id: MarkerId) -> Self {
        Self {
            kind: VarKind::Marker,
            index: id,
        }
    }
}

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            VarKind::Keyframe => write!(f, "x{}", self.index),
            VarKind::Marker => write!(f, "m{}", self.index),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variable {
    pub id: VarId,
    pub estimate: Pose,
    pub fixed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FactorKind {
    MarkerObservation,
    Odometry,
    PosePrior,
}

/// Relative-pose measurement between `from` and `to` (or a unary prior on
/// `from`), whitened by an upper-triangular square-root information matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Factor {
    pub kind: FactorKind,
    pub from: VarId,
    pub to: Option<VarId>,
    pub measurement: Pose,
    pub sqrt_information: Matrix6<f64>,
}

impl Factor {
    pub fn marker_observation(
        keyframe: VarId,
        marker: VarId,
        z: Pose,
        sqrt_information: Matrix6<f64>,
    ) -> Result<Self, GraphError> {
        if keyframe.kind != VarKind::Keyframe || marker.kind != VarKind::Marker {
            return Err(GraphError::InvalidFactor(format!(
                "marker observation must link a keyframe to a marker, got {keyframe} -> {marker}"
            )));
        }
        Self::checked(FactorKind::MarkerObservation, keyframe, Some(marker), z, sqrt_information)
    }

    pub fn odometry(
        a: VarId,
        b: VarId,
        u: Pose,
        sqrt_information: Matrix6<f64>,
    ) -> Result<Self, GraphError> {
        if a.kind != VarKind::Keyframe || b.kind != VarKind::Keyframe || a == b {
            return Err(GraphError::InvalidFactor(format!(
                "odometry must link two distinct keyframes, got {a} -> {b}"
            )));
        }
        Self::checked(FactorKind::Odometry, a, Some(b), u, sqrt_information)
    }

    pub fn pose_prior(
        var: VarId,
        prior: Pose,
        sqrt_information: Matrix6<f64>,
    ) -> Result<Self, GraphError> {
        Self::checked(FactorKind::PosePrior, var, None, prior, sqrt_information)
    }

    fn checked(
        kind: FactorKind,
        from: VarId,
        to: Option<VarId>,
        measurement: Pose,
        sqrt_information: Matrix6<f64>,
    ) -> Result<Self, GraphError> {
        let upper = (0..6).all(|i| (0..i).all(|j| sqrt_information[(i, j)] == 0.0));
        let finite = sqrt_information.iter().all(|v| v.is_finite());
        let positive = (0..6).all(|i| sqrt_information[(i, i)] > 0.0);
        if !(upper && finite && positive) {
            return Err(GraphError::InvalidFactor(
                "sqrt information must be upper triangular with a positive diagonal".into(),
            ));
        }
        Ok(Self {
            kind,
            from,
            to,
            measurement,
            sqrt_information,
        })
    }
}

/// Standard deviations never go below this when forming square-root
/// information, so a noise-free configuration still has finite weights.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Detection ranges below this are clamped when scaling translation noise.
const MIN_RANGE: f64 = 0.1;

/// Measurement weights derived from the generative noise model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Weighting {
    pub detection_rot_sigma: f64,
    pub detection_trans_sigma_per_m: f64,
    pub odometry_rot_sigma: f64,
    pub odometry_trans_sigma: f64,
}

impl Weighting {
    pub fn from_noise(noise: &NoiseConfig) -> Self {
        Self {
            detection_rot_sigma: noise.detection_rot_sigma,
            detection_trans_sigma_per_m: noise.detection_trans_sigma_per_m,
            odometry_rot_sigma: noise.odometry_rot_sigma,
            odometry_trans_sigma: noise.odometry_trans_sigma,
        }
    }

    pub fn detection_sqrt_info(&self, z: &Pose) -> Matrix6<f64> {
        let range = z.translation.norm().max(MIN_RANGE);
        diag_sqrt_info(
            self.detection_rot_sigma,
            self.detection_trans_sigma_per_m * range,
        )
    }

    pub fn odometry_sqrt_info(&self) -> Matrix6<f64> {
        diag_sqrt_info(self.odometry_rot_sigma, self.odometry_trans_sigma)
    }
}

impl Default for Weighting {
    fn default() -> Self {
        Self::from_noise(&NoiseConfig::default())
    }
}

fn diag_sqrt_info(rot_sigma: f64, trans_sigma: f64) -> Matrix6<f64> {
    let r = 1.0 / rot_sigma.max(SIGMA_FLOOR);
    let t = 1.0 / trans_sigma.max(SIGMA_FLOOR);
    Matrix6::from_diagonal(&nalgebra::Vector6::new(r, r, r, t, t, t))
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("factor {factor} references missing variable {variable}")]
    DanglingEndpoint { factor: usize, variable: VarId },
    #[error("variable {0} already exists")]
    DuplicateVariable(VarId),
    #[error("invalid factor: {0}")]
    InvalidFactor(String),
    #[error("mode {0} requires a prior map")]
    PriorMapRequired(Mode),
    #[error("slam mode does not take a prior map")]
    PriorMapForbidden,
    #[error("mode can only be configured on an empty graph")]
    AlreadyConfigured,
    #[error("frame at t={timestamp} has no usable detections and no odometry")]
    DisconnectedFrame { timestamp: f64 },
    #[error("frame at t={timestamp} cannot be localized: no detection of a known marker")]
    CannotInitialize { timestamp: f64 },
    #[error("frame at t={timestamp} is not after the previous frame at t={previous}")]
    OutOfOrder { timestamp: f64, previous: f64 },
}

/// Iterations of the small Gauss-Newton used for single-frame localization.
const LOCALIZE_ITERS: usize = 10;

#[derive(Clone, Debug)]
pub struct FactorGraph {
    mode: Mode,
    configured: bool,
    variables: Vec<Variable>,
    index: HashMap<VarId, usize>,
    factors: Vec<Factor>,
    weighting: Weighting,
    solver: SolverConfig,
    origin: Pose,
    keyframe_times: Vec<f64>,
    dropped_observations: usize,
}

impl FactorGraph {
    pub fn new(weighting: Weighting, solver: SolverConfig) -> Self {
        Self {
            mode: Mode::Slam,
            configured: false,
            variables: Vec::new(),
            index: HashMap::new(),
            factors: Vec::new(),
            weighting,
            solver,
            origin: Pose::identity(),
            keyframe_times: Vec::new(),
            dropped_observations: 0,
        }
    }

    /// Fresh graph in `mode`, see [`FactorGraph::configure_mode`].
    pub fn with_mode(
        mode: Mode,
        prior_map: Option<&MarkerMap>,
        weighting: Weighting,
        solver: SolverConfig,
    ) -> Result<Self, GraphError> {
        let mut g = Self::new(weighting, solver);
        g.configure_mode(mode, prior_map)?;
        Ok(g)
    }

    /// Sets the operating mode. Prior-map modes insert every map marker:
    /// free for [`Mode::SlamWithPrior`], fixed for [`Mode::Localization`].
    pub fn configure_mode(
        &mut self,
        mode: Mode,
        prior_map: Option<&MarkerMap>,
    ) -> Result<(), GraphError> {
        if !self.variables.is_empty() || !self.factors.is_empty() {
            return Err(GraphError::AlreadyConfigured);
        }
        match (mode, prior_map) {
            (Mode::Slam, Some(_)) => return Err(GraphError::PriorMapForbidden),
            (Mode::SlamWithPrior | Mode::Localization, None) => {
                return Err(GraphError::PriorMapRequired(mode))
            }
            _ => {}
        }
        self.mode = mode;
        self.configured = true;
        if let Some(map) = prior_map {
            let fixed = mode == Mode::Localization;
            for (id, pose) in map.iter() {
                self.add_variable(VarId::marker(id), *pose, fixed)?;
            }
        }
        Ok(())
    }

    /// Initial estimate (and anchor) of the first keyframe in SLAM mode.
    pub fn set_origin(&mut self, origin: Pose) {
        self.origin = origin;
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn solver_config(&self) -> &SolverConfig {
        &self.solver
    }

    pub fn weighting(&self) -> &Weighting {
        &self.weighting
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn variable(&self, id: VarId) -> Option<&Variable> {
        self.index.get(&id).map(|&i| &self.variables[i])
    }

    pub fn estimate(&self, id: VarId) -> Option<Pose> {
        self.variable(id).map(|v| v.estimate)
    }

    /// Observations dropped because they referenced markers outside the
    /// fixed map (localization mode only).
    pub fn dropped_observations(&self) -> usize {
        self.dropped_observations
    }

    pub fn keyframe_count(&self) -> usize {
        self.keyframe_times.len()
    }

    pub fn add_variable(&mut self, id: VarId, estimate: Pose, fixed: bool) -> Result<(), GraphError> {
        if self.index.contains_key(&id) {
            return Err(GraphError::DuplicateVariable(id));
        }
        self.index.insert(id, self.variables.len());
        self.variables.push(Variable {
            id,
            estimate,
            fixed,
        });
        Ok(())
    }

    /// Appends a factor. Endpoints are validated lazily by
    /// [`FactorGraph::total_cost`] and [`FactorGraph::optimize`].
    pub fn add_factor(&mut self, factor: Factor) {
        self.factors.push(factor);
    }

    pub fn set_fixed(&mut self, id: VarId, fixed: bool) -> bool {
        match self.index.get(&id) {
            Some(&i) => {
                self.variables[i].fixed = fixed;
                true
            }
            None => false,
        }
    }

    /// Timestamped keyframe estimates in insertion order.
    pub fn trajectory(&self) -> Vec<(f64, Pose)> {
        self.keyframe_times
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.variables[self.index[&VarId::keyframe(i as u32)]].estimate))
            .collect()
    }

    /// Current marker estimates as a map.
    pub fn marker_map(&self, source: &str) -> MarkerMap {
        let mut map = MarkerMap::new(source);
        for v in self.variables.iter().filter(|v| v.id.kind == VarKind::Marker) {
            map.insert(v.id.index, v.estimate);
        }
        map
    }

    /// Adds one frame as a keyframe with its odometry and marker factors,
    /// then re-solves the whole graph. The report's wall time covers the
    /// solver call only.
    pub fn process_frame(
        &mut self,
        frame: &FrameObservations,
        odom: Option<&Pose>,
    ) -> Result<OptimizationReport, GraphError> {
        if let Some(&previous) = self.keyframe_times.last() {
            if !(frame.timestamp > previous) {
                return Err(GraphError::OutOfOrder {
                    timestamp: frame.timestamp,
                    previous,
                });
            }
        }
        let first = self.keyframe_times.is_empty();
        let odom = if first { None } else { odom };

        let mut detections = Vec::with_capacity(frame.detections.len());
        let mut dropped = 0;
        for d in &frame.detections {
            let known = self.index.contains_key(&VarId::marker(d.marker));
            if self.mode == Mode::Localization && !known {
                dropped += 1;
            } else {
                detections.push(d);
            }
        }
        if detections.is_empty() && odom.is_none() {
            return Err(GraphError::DisconnectedFrame {
                timestamp: frame.timestamp,
            });
        }

        let known: Vec<(Pose, Pose, Matrix6<f64>)> = detections
            .iter()
            .filter_map(|d| {
                self.estimate(VarId::marker(d.marker))
                    .map(|m| (m, d.pose, self.weighting.detection_sqrt_info(&d.pose)))
            })
            .collect();

        let kf_index = self.keyframe_times.len() as u32;
        let kf = VarId::keyframe(kf_index);
        let prev = kf_index.checked_sub(1).map(VarId::keyframe);
        let initial = if first {
            match self.mode {
                Mode::Slam => self.origin,
                _ => localize_single_frame(&known).ok_or(GraphError::CannotInitialize {
                    timestamp: frame.timestamp,
                })?,
            }
        } else if let Some(u) = odom {
            self.estimate(prev.expect("non-first keyframe has a predecessor"))
                .expect("previous keyframe exists")
                .compose(u)
        } else {
            match localize_single_frame(&known) {
                Some(p) => p,
                None => self
                    .estimate(prev.expect("non-first keyframe has a predecessor"))
                    .expect("previous keyframe exists"),
            }
        };
        let anchor = first && self.mode != Mode::Localization;
        self.add_variable(kf, initial, anchor)?;
        self.keyframe_times.push(frame.timestamp);
        self.dropped_observations += dropped;

        if let (Some(u), Some(prev)) = (odom, prev) {
            let f = Factor::odometry(prev, kf, *u, self.weighting.odometry_sqrt_info())?;
            self.add_factor(f);
        }
        for d in detections {
            let mid = VarId::marker(d.marker);
            if !self.index.contains_key(&mid) {
                // lazily created marker, seeded from this detection
                self.add_variable(mid, initial.compose(&d.pose), false)?;
            }
            let f = Factor::marker_observation(kf, mid, d.pose, self.weighting.detection_sqrt_info(&d.pose))?;
            self.add_factor(f);
        }

        let cfg = self.solver.clone();
        self.optimize(&cfg)
    }
}

/// Camera pose from detections of markers with known poses: the first
/// detection inverted, refined by Gauss-Newton over all of them.
pub fn localize_single_frame(known: &[(Pose, Pose, Matrix6<f64>)]) -> Option<Pose> {
    let (m0, z0, _) = known.first()?;
    let mut x = m0.compose(&z0.inverse());
    if known.len() == 1 {
        return Some(x);
    }
    for _ in 0..LOCALIZE_ITERS {
        let mut h = Matrix6::zeros();
        let mut g = nalgebra::Vector6::zeros();
        for (m, z, s) in known {
            let (r, jx, _) = relative_jacobians(&x, m, z);
            let wj = s * jx;
            h += wj.transpose() * wj;
            g += wj.transpose() * (s * r);
        }
        let Some(chol) = h.cholesky() else { break };
        let step = chol.solve(&-g);
        x = x.retract(&crate::se3::Twist::from_vector(&step));
        if step.norm() < 1e-12 {
            break;
        }
    }
    Some(x)
}
