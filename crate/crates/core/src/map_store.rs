//! Marker maps: the `.mmap` text format and random position perturbation.
//!
//! File layout, UTF-8:
//!
//! ```text
//! # marker map
//! # source: <free text>
//! # id tx ty tz qx qy qz qw
//! 0 0 0 0 0 0 0 1
//! ```
//!
//! Numbers are written in the shortest decimal form that parses back to the
//! same `f64`, so save -> load -> save is byte-stable.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::se3::{Pose, Rotation};

pub type MarkerId = u32;

/// Quaternions further than this from unit norm are rejected on load.
pub const QUAT_NORM_TOL: f64 = 1e-6;

const SOURCE_PREFIX: &str = "# source: ";

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MarkerMap {
    entries: BTreeMap<MarkerId, Pose>,
    pub source: String,
}

impl MarkerMap {
    pub fn new(source: impl Into<String>) -> Self {
        Self {
            entries: BTreeMap::new(),
            source: source.into(),
        }
    }

    /// Inserts or replaces; returns the previous pose.
    pub fn insert(&mut self, id: MarkerId, pose: Pose) -> Option<Pose> {
        self.entries.insert(id, pose)
    }

    pub fn get(&self, id: MarkerId) -> Option<&Pose> {
        self.entries.get(&id)
    }

    pub fn contains(&self, id: MarkerId) -> bool {
        self.entries.contains_key(&id)
    }

    /// Entries in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (MarkerId, &Pose)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn ids(&self) -> impl Iterator<Item = MarkerId> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum MapError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("perturbation magnitude must be finite and non-negative, got {0}")]
    InvalidDelta(f64),
}

fn parse_err(line: usize, reason: impl Into<String>) -> MapError {
    MapError::Parse {
        line,
        reason: reason.into(),
    }
}

/// Canonical text form of a map.
pub fn map_to_string(map: &MarkerMap) -> String {
    let mut out = String::from("# marker map\n");
    // keep the header single-line whatever the tag contains
    let source = map.source.replace(['\n', '\r'], " ");
    out.push_str(SOURCE_PREFIX);
    out.push_str(&source);
    out.push('\n');
    out.push_str("# id tx ty tz qx qy qz qw\n");
    for (id, pose) in map.iter() {
        out.push_str(&format!("{id} {}\n", pose_fields(pose)));
    }
    out
}

/// `tx ty tz qx qy qz qw`, shortest round-trip decimal form.
pub fn pose_fields(pose: &Pose) -> String {
    let t = &pose.translation;
    let [x, y, z, w] = pose.rotation.xyzw();
    format!("{} {} {} {} {} {} {}", t.x, t.y, t.z, x, y, z, w)
}

/// Parses seven numbers (`tx ty tz qx qy qz qw`) into a pose, applying the
/// unit-norm rule. `line` is only used for error messages.
pub fn parse_pose_fields(fields: &[&str], line: usize) -> Result<Pose, MapError> {
    if fields.len() != 7 {
        return Err(parse_err(line, format!("expected 7 pose fields, found {}", fields.len())));
    }
    let mut v = [0.0; 7];
    for (slot, text) in v.iter_mut().zip(fields) {
        let x: f64 = text
            .parse()
            .map_err(|_| parse_err(line, format!("invalid number {text:?}")))?;
        if !x.is_finite() {
            return Err(parse_err(line, format!("non-finite number {text:?}")));
        }
        *slot = x;
    }
    let norm = (v[3] * v[3] + v[4] * v[4] + v[5] * v[5] + v[6] * v[6]).sqrt();
    if (norm - 1.0).abs() > QUAT_NORM_TOL {
        return Err(parse_err(line, format!("quaternion norm {norm} is not unit")));
    }
    let rotation = Rotation::try_from_xyzw(v[3], v[4], v[5], v[6])
        .ok_or_else(|| parse_err(line, "degenerate quaternion"))?;
    Ok(Pose::new(rotation, Vector3::new(v[0], v[1], v[2])))
}

pub fn save_map<W: Write>(map: &MarkerMap, mut sink: W) -> io::Result<()> {
    sink.write_all(map_to_string(map).as_bytes())
}

pub fn load_map<R: BufRead>(source: R) -> Result<MarkerMap, MapError> {
    let mut map = MarkerMap::default();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if let Some(tag) = line.strip_prefix(SOURCE_PREFIX) {
            map.source = tag.to_string();
            continue;
        }
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(parse_err(lineno, format!("expected 8 fields, found {}", fields.len())));
        }
        let id: MarkerId = fields[0]
            .parse()
            .map_err(|_| parse_err(lineno, format!("invalid marker id {:?}", fields[0])))?;
        let pose = parse_pose_fields(&fields[1..], lineno)?;
        if map.insert(id, pose).is_some() {
            return Err(parse_err(lineno, format!("duplicate marker id {id}")));
        }
    }
    Ok(map)
}

pub fn write_map_file(map: &MarkerMap, path: &Path) -> Result<(), MapError> {
    fs::write(path, map_to_string(map))?;
    Ok(())
}

pub fn read_map_file(path: &Path) -> Result<MarkerMap, MapError> {
    let file = fs::File::open(path)?;
    load_map(io::BufReader::new(file))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbationConfig {
    /// Displacement magnitude in meters.
    pub delta: f64,
    pub seed: u64,
}

impl PerturbationConfig {
    pub fn apply(&self, map: &MarkerMap) -> Result<MarkerMap, MapError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        perturb(map, self.delta, &mut rng)
    }
}

/// Moves every marker position by exactly `delta` along an independent
/// uniformly random 3D direction. Orientations and ids are untouched.
pub fn perturb<R: Rng + ?Sized>(map: &MarkerMap, delta: f64, rng: &mut R) -> Result<MarkerMap, MapError> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(MapError::InvalidDelta(delta));
    }
    if delta == 0.0 {
        return Ok(map.clone());
    }
    let mut out = MarkerMap::new(format!("{} | perturbed dp={delta}", map.source));
    for (id, pose) in map.iter() {
        let u = random_unit_vector(rng);
        out.insert(id, Pose::new(pose.rotation, pose.translation + u * delta));
    }
    Ok(out)
}

/// Uniform direction on the unit sphere from normalized Gaussian draws.
pub fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::Twist;
    use proptest::prelude::*;
    use rand::Rng;

    fn sample_map(seed: u64, n: usize) -> MarkerMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = MarkerMap::new("test");
        for i in 0..n {
            let xi = Twist::new(
                random_unit_vector(&mut rng) * rng.random_range(0.0..3.0),
                random_unit_vector(&mut rng) * rng.random_range(0.0..4.0),
            );
            map.insert(i as MarkerId * 3, Pose::exp(&xi));
        }
        map
    }

    #[test]
    fn empty_map_is_header_only() {
        let text = map_to_string(&MarkerMap::new("empty"));
        assert!(text.lines().all(|l| l.starts_with('#')));
        let back = load_map(text.as_bytes()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.source, "empty");
    }

    #[test]
    fn identity_marker_line() {
        let mut map = MarkerMap::new("id");
        map.insert(0, Pose::identity());
        let text = map_to_string(&map);
        assert_eq!(text.lines().last().unwrap(), "0 0 0 0 0 0 0 1");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let cases = [
            ("# h\n0 0 0 0 0 0 0 1\n0 1 0 0 0 0 0 1\n", 3, "duplicate"),
            ("0 0 0 0 0 0 1\n", 1, "expected 8"),
            ("\n\n1 0 0 NaN 0 0 0 1\n", 3, "non-finite"),
            ("1 0 0 inf 0 0 0 1\n", 1, "non-finite"),
            ("1 0 0 0 0 0 0 1.1\n", 1, "not unit"),
            ("x 0 0 0 0 0 0 1\n", 1, "marker id"),
        ];
        for (text, line, needle) in cases {
            match load_map(text.as_bytes()) {
                Err(MapError::Parse { line: l, reason }) => {
                    assert_eq!(l, line, "{text:?}");
                    assert!(reason.contains(needle), "{reason}");
                }
                other => panic!("expected parse error for {text:?}, got {other:?}"),
            }
        }
    }

    #[test]
    fn near_unit_quaternion_is_renormalized() {
        let map = load_map("4 1 2 3 0 0 0 1.0000005\n".as_bytes()).unwrap();
        let [_, _, _, w] = map.get(4).unwrap().rotation.xyzw();
        assert_eq!(w, 1.0);
        let map = load_map("4 1 2 3 0 0 0 -1\n".as_bytes()).unwrap();
        assert_eq!(map.get(4).unwrap().rotation.xyzw(), [0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_delta_is_identity() {
        let map = sample_map(1, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(perturb(&map, 0.0, &mut rng).unwrap(), map);
        assert!(perturb(&map, -0.1, &mut rng).is_err());
        assert!(perturb(&map, f64::NAN, &mut rng).is_err());
    }

    #[test]
    fn displacement_is_exact() {
        let map = sample_map(2, 50);
        for delta in [0.1, 0.2, 0.3, 0.4, 0.5, 2.0] {
            let out = PerturbationConfig { delta, seed: 5 }.apply(&map).unwrap();
            assert_eq!(out.len(), map.len());
            for (id, p) in map.iter() {
                let q = out.get(id).unwrap();
                assert!(((q.translation - p.translation).norm() - delta).abs() <= 1e-12);
                assert_eq!(q.rotation.xyzw(), p.rotation.xyzw());
            }
        }
    }

    #[test]
    fn perturbation_is_deterministic() {
        let map = sample_map(3, 10);
        let cfg = PerturbationConfig { delta: 0.1, seed: 77 };
        assert_eq!(cfg.apply(&map).unwrap(), cfg.apply(&map).unwrap());
    }

    #[test]
    fn directions_are_unbiased() {
        let mut map = MarkerMap::new("grid");
        for i in 0..10_000 {
            map.insert(i, Pose::identity());
        }
        let out = PerturbationConfig { delta: 0.1, seed: 11 }.apply(&map).unwrap();
        let mean: Vector3<f64> = out.iter().map(|(_, p)| p.translation / 0.1).sum::<Vector3<f64>>() / 10_000.0;
        for k in 0..3 {
            assert!(mean[k].abs() < 0.02, "component {k}: {}", mean[k]);
        }
    }

    proptest! {
        #[test]
        fn save_load_save_is_byte_stable(seed in any::<u64>(), n in 0usize..20) {
            let text = map_to_string(&sample_map(seed, n));
            let back = load_map(text.as_bytes()).unwrap();
            prop_assert_eq!(map_to_string(&back), text);
        }
    }
}
