//! Scene types, invariant checks and the SPG3 scene format.
//!
//! A scene is stored as two files: a binary point payload
//!
//! ```text
//! "SPG3" | u32 LE version (=1) | u32 LE N | N × (x y z r g b) f32 LE
//! ```
//!
//! and a JSON sidecar next to it (same stem, `.json` extension) holding the
//! class count, the ground-truth boxes and optionally per-point superpoint
//! labels.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SPG3";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 12;
const ROW_LEN: usize = 24;

/// Points with positions in meters and colors in `[0, 1]`. Stored in single
/// precision, which is exactly what the file format holds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f32; 3]>,
    pub colors: Vec<[f32; 3]>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f32; 3]>, colors: Vec<[f32; 3]>) -> Result<Self> {
        if positions.len() != colors.len() {
            return Err(Error::shape("PointCloud::new", positions.len(), colors.len()));
        }
        Ok(Self { positions, colors })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, i: usize) -> [f64; 3] {
        self.positions[i].map(f64::from)
    }

    pub fn color(&self, i: usize) -> [f64; 3] {
        self.colors[i].map(f64::from)
    }

    /// Axis-aligned bounds `(min, max)` of the positions.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = self.positions.first()?.map(f64::from);
        let mut lo = first;
        let mut hi = first;
        for p in &self.positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a] as f64);
                hi[a] = hi[a].max(p[a] as f64);
            }
        }
        Some((lo, hi))
    }

    pub fn translated(&self, t: [f64; 3]) -> Self {
        Self {
            positions: self
                .positions
                .iter()
                .map(|p| [0, 1, 2].map(|a| (p[a] as f64 + t[a]) as f32))
                .collect(),
            colors: self.colors.clone(),
        }
    }
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub center: [f64; 3],
    pub size: [f64; 3],
}

impl Box3 {
    pub fn new(center: [f64; 3], size: [f64; 3]) -> Self {
        Self { center, size }
    }

    pub fn from_min_max(min: [f64; 3], max: [f64; 3]) -> Self {
        Self {
            center: [0, 1, 2].map(|a| 0.5 * (min[a] + max[a])),
            size: [0, 1, 2].map(|a| max[a] - min[a]),
        }
    }

    pub fn min(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.center[a] - 0.5 * self.size[a])
    }

    pub fn max(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.center[a] + 0.5 * self.size[a])
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }

    /// Closed-interval containment.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a])
    }

    /// Volume of the overlap with `other`, zero when disjoint.
    pub fn intersection_volume(&self, other: &Box3) -> f64 {
        let (a_lo, a_hi, b_lo, b_hi) = (self.min(), self.max(), other.min(), other.max());
        (0..3)
            .map(|a| (a_hi[a].min(b_hi[a]) - a_lo[a].max(b_lo[a])).max(0.0))
            .product()
    }

    pub fn is_valid(&self) -> bool {
        self.center.iter().all(|v| v.is_finite())
            && self.size.iter().all(|v| v.is_finite() && *v > 0.0)
    }

    pub fn translated(&self, t: [f64; 3]) -> Self {
        Self {
            center: [0, 1, 2].map(|a| self.center[a] + t[a]),
            size: self.size,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    #[serde(flatten)]
    pub bbox: Box3,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    pub ground_truth: Vec<LabeledBox>,
    pub class_count: usize,
    /// Precomputed per-point superpoint labels, if the sidecar carries them.
    pub superpoint_labels: Option<Vec<u32>>,
}

/// The JSON half of a stored scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub class_count: usize,
    pub boxes: Vec<LabeledBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub superpoint_labels: Option<Vec<u32>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ViolationKind {
    EmptyCloud,
    NonFinitePosition,
    ColorOutOfRange,
    InvalidBox,
    ClassOutOfRange,
    BoxOutsideCloud,
    LabelCount,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub index: usize,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} #{}: {}", self.kind, self.index, self.detail)
    }
}

/// Lists every broken invariant, sorted by `(kind, index)`. Empty iff the
/// scene is valid.
pub fn validate_scene(scene: &Scene) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |kind, index, detail: String| out.push(Violation { kind, index, detail });
    let cloud = &scene.cloud;
    if cloud.is_empty() {
        push(ViolationKind::EmptyCloud, 0, "point cloud has no points".into());
    }
    if cloud.positions.len() != cloud.colors.len() {
        push(
            ViolationKind::LabelCount,
            0,
            format!("{} positions but {} colors", cloud.positions.len(), cloud.colors.len()),
        );
    }
    for (i, p) in cloud.positions.iter().enumerate() {
        if let Some(a) = p.iter().position(|v| !v.is_finite()) {
            push(ViolationKind::NonFinitePosition, i, format!("point {i} axis {a} is {}", p[a]));
        }
    }
    for (i, c) in cloud.colors.iter().enumerate() {
        for (ch, v) in c.iter().enumerate() {
            if !(0.0..=1.0).contains(v) {
                push(
                    ViolationKind::ColorOutOfRange,
                    i,
                    format!("point {i} channel {ch} = {v} outside [0, 1]"),
                );
            }
        }
    }
    let bounds = cloud.bounds();
    for (i, b) in scene.ground_truth.iter().enumerate() {
        if !b.bbox.is_valid() {
            push(
                ViolationKind::InvalidBox,
                i,
                format!("box {i} has center {:?} size {:?}", b.bbox.center, b.bbox.size),
            );
            continue;
        }
        if b.class_id >= scene.class_count {
            push(
                ViolationKind::ClassOutOfRange,
                i,
                format!("box {i} class {} not below {}", b.class_id, scene.class_count),
            );
        }
        if let Some((lo, hi)) = bounds {
            let (blo, bhi) = (b.bbox.min(), b.bbox.max());
            if (0..3).any(|a| bhi[a] < lo[a] || blo[a] > hi[a]) {
                push(
                    ViolationKind::BoxOutsideCloud,
                    i,
                    format!("box {i} does not intersect the cloud bounds"),
                );
            }
        }
    }
    if let Some(labels) = &scene.superpoint_labels {
        if labels.len() != cloud.len() {
            push(
                ViolationKind::LabelCount,
                1,
                format!("{} superpoint labels for {} points", labels.len(), cloud.len()),
            );
        }
    }
    out.sort_by_key(|v| (v.kind, v.index));
    out
}

/// The sidecar path for a scene file: same stem, `.json` extension.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn encode_points(cloud: &PointCloud) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(HEADER_LEN + ROW_LEN * cloud.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for (p, c) in cloud.positions.iter().zip(&cloud.colors) {
        for v in p.iter().chain(c) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

pub fn decode_points(bytes: &[u8]) -> Result<PointCloud> {
    let format = |offset: usize, reason: String| Error::Format { offset, reason };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(format(0, "bad magic, expected \"SPG3\"".into()));
    }
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| format(bytes.len(), "truncated header".into()))
    };
    let version = word(4)?;
    if version != VERSION {
        return Err(format(4, format!("unsupported version {version}")));
    }
    let n = word(8)? as usize;
    let expected = HEADER_LEN + n * ROW_LEN;
    if bytes.len() < expected {
        return Err(format(
            bytes.len(),
            format!("truncated payload: {n} points need {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(format(expected, "trailing bytes after point payload".into()));
    }
    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = [0f32; 6];
        for (j, v) in row.iter_mut().enumerate() {
            let at = HEADER_LEN + i * ROW_LEN + j * 4;
            *v = f32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]);
            if !v.is_finite() {
                return Err(format(at, format!("non-finite value in point {i}")));
            }
        }
        positions.push([row[0], row[1], row[2]]);
        colors.push([row[3], row[4], row[5]]);
    }
    Ok(PointCloud { positions, colors })
}

impl Scene {
    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            class_count: self.class_count,
            boxes: self.ground_truth.clone(),
            superpoint_labels: self.superpoint_labels.clone(),
        }
    }

    pub fn translated(&self, t: [f64; 3]) -> Self {
        Self {
            cloud: self.cloud.translated(t),
            ground_truth: self
                .ground_truth
                .iter()
                .map(|b| LabeledBox {
                    bbox: b.bbox.translated(t),
                    class_id: b.class_id,
                })
                .collect(),
            class_count: self.class_count,
            superpoint_labels: self.superpoint_labels.clone(),
        }
    }
}

pub fn sidecar_to_string(sidecar: &Sidecar) -> Result<String> {
    let mut text = serde_json::to_string_pretty(sidecar)?;
    text.push('\n');
    Ok(text)
}

pub fn load_sidecar(path: &Path) -> Result<Sidecar> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes `path` and its sidecar. Invalid scenes are rejected before any
/// byte is written.
pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    let violations = validate_scene(scene);
    if !violations.is_empty() {
        return Err(Error::InvalidScene(violations.iter().map(ToString::to_string).collect()));
    }
    let side = sidecar_to_string(&scene.sidecar())?;
    std::fs::write(path, encode_points(&scene.cloud)).map_err(|e| Error::io(path, e))?;
    let sp = sidecar_path(path);
    std::fs::write(&sp, side).map_err(|e| Error::io(sp, e))
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let cloud = decode_points(&bytes)?;
    let side = load_sidecar(&sidecar_path(path))?;
    let scene = Scene {
        cloud,
        ground_truth: side.boxes,
        class_count: side.class_count,
        superpoint_labels: side.superpoint_labels,
    };
    let violations = validate_scene(&scene);
    if !violations.is_empty() {
        return Err(Error::InvalidScene(violations.iter().map(ToString::to_string).collect()));
    }
    Ok(scene)
}
