//! Synthetic rooms: floating boxes sampled on their surfaces, floor clutter,
//! and oracle superpoint labels.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scene::{Box3, LabeledBox, PointCloud, Scene};

/// Size range per class, as (min, max) edge lengths per axis in meters.
const CLASS_SHAPES: [[(f64, f64); 3]; 4] = [
    [(0.6, 0.9), (0.5, 0.8), (0.15, 0.25)],
    [(0.25, 0.4), (0.25, 0.4), (0.6, 0.9)],
    [(0.3, 0.45), (0.3, 0.45), (0.3, 0.45)],
    [(0.7, 1.0), (0.25, 0.35), (0.3, 0.45)],
];

const CLASS_COLORS: [[f64; 3]; 4] = [[0.8, 0.3, 0.2], [0.2, 0.6, 0.3], [0.2, 0.3, 0.8], [0.8, 0.7, 0.2]];

/// Lowest allowed box bottom, keeping objects off the floor clutter.
pub const MIN_ELEVATION: f64 = 0.1;
/// Edge of the square floor tiles that group clutter into superpoints.
pub const CLUTTER_TILE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub objects: (usize, usize),
    /// Scale applied to every class's size range.
    pub size_scale: f64,
    pub class_count: usize,
    pub points_per_object: usize,
    pub clutter_points: usize,
    pub seed: u64,
    /// Room footprint `(x, y)` and height in meters.
    pub room: [f64; 3],
    /// Minimum gap between placed boxes.
    pub gap: f64,
    pub max_retries: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            objects: (3, 6),
            size_scale: 1.0,
            class_count: 4,
            points_per_object: 650,
            clutter_points: 1000,
            seed: 0,
            room: [4.0, 4.0, 2.0],
            gap: 0.1,
            max_retries: 1000,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |arg: &'static str, reason: &str| {
            Err(Error::InvalidArgument {
                arg,
                reason: reason.into(),
            })
        };
        if self.objects.0 > self.objects.1 {
            return bad("objects", "minimum exceeds maximum");
        }
        if self.class_count == 0 || self.class_count > CLASS_SHAPES.len() {
            return bad("class_count", "must be between 1 and 4");
        }
        if self.objects.1 > 0 && self.points_per_object == 0 {
            return bad("points_per_object", "must be at least 1");
        }
        if self.objects.1 == 0 && self.clutter_points == 0 {
            return bad("clutter_points", "a scene needs at least one point");
        }
        if !(self.size_scale > 0.0 && self.size_scale.is_finite()) {
            return bad("size_scale", "must be positive");
        }
        if self.room.iter().any(|&v| !(v > 0.0 && v.is_finite())) || !(self.gap >= 0.0) {
            return bad("room", "extent must be positive and gap non-negative");
        }
        Ok(())
    }
}

fn overlaps(a: &Box3, b: &Box3, gap: f64) -> bool {
    let (a_lo, a_hi, b_lo, b_hi) = (a.min(), a.max(), b.min(), b.max());
    (0..3).all(|k| a_lo[k] < b_hi[k] + gap && b_lo[k] < a_hi[k] + gap)
}

/// A point drawn uniformly from the surface of `b`.
fn surface_point<R: Rng>(b: &Box3, rng: &mut R) -> [f64; 3] {
    let s = b.size;
    let areas = [s[1] * s[2], s[0] * s[2], s[0] * s[1]];
    let mut pick = rng.gen_range(0.0..areas.iter().sum::<f64>());
    let mut axis = 2;
    for (k, &a) in areas.iter().enumerate() {
        if pick < a {
            axis = k;
            break;
        }
        pick -= a;
    }
    let (lo, hi) = (b.min(), b.max());
    let mut p = [0, 1, 2].map(|k| rng.gen_range(lo[k]..hi[k]));
    p[axis] = if rng.gen_bool(0.5) { lo[axis] } else { hi[axis] };
    p
}

fn place_boxes<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Result<Vec<LabeledBox>> {
    let count = rng.gen_range(spec.objects.0..=spec.objects.1);
    let mut placed: Vec<LabeledBox> = Vec::with_capacity(count);
    let mut retries = 0;
    while placed.len() < count {
        let class_id = rng.gen_range(0..spec.class_count);
        let size = CLASS_SHAPES[class_id].map(|(lo, hi)| rng.gen_range(lo..hi) * spec.size_scale);
        let room = spec.room;
        let fits = (0..2).all(|k| size[k] < room[k]) && size[2] + MIN_ELEVATION < room[2];
        let candidate = fits.then(|| {
            let center = [
                rng.gen_range(size[0] / 2.0..room[0] - size[0] / 2.0),
                rng.gen_range(size[1] / 2.0..room[1] - size[1] / 2.0),
                rng.gen_range(MIN_ELEVATION + size[2] / 2.0..room[2] - size[2] / 2.0),
            ];
            Box3::new(center, size)
        });
        match candidate {
            Some(b) if !placed.iter().any(|p| overlaps(&p.bbox, &b, spec.gap)) => {
                placed.push(LabeledBox { bbox: b, class_id });
            }
            _ => {
                retries += 1;
                if retries > spec.max_retries {
                    return Err(Error::Placement {
                        retries: spec.max_retries,
                    });
                }
            }
        }
    }
    Ok(placed)
}

/// Generates a scene with oracle superpoint labels: each object split into
/// two halves along its longest axis, clutter grouped by floor tile.
pub fn synth(spec: &SynthSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let boxes = place_boxes(spec, &mut rng)?;
    let mut positions: Vec<[f32; 3]> = Vec::new();
    let mut colors: Vec<[f32; 3]> = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    for (k, b) in boxes.iter().enumerate() {
        let jitter = [0, 1, 2].map(|_| rng.gen_range(-0.1..0.1));
        let base = [0, 1, 2].map(|c| (CLASS_COLORS[b.class_id][c] + jitter[c]).clamp(0.0, 1.0));
        let long = (0..3).fold(0, |m, a| if b.bbox.size[a] > b.bbox.size[m] { a } else { m });
        for _ in 0..spec.points_per_object {
            let p = surface_point(&b.bbox, &mut rng);
            let half = u32::from(p[long] > b.bbox.center[long]);
            positions.push(p.map(|v| v as f32));
            colors.push(base.map(|c| (c + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0) as f32));
            labels.push(2 * k as u32 + half);
        }
    }
    let tiles_x = (spec.room[0] / CLUTTER_TILE).ceil() as u32;
    let background = 2 * boxes.len() as u32;
    for _ in 0..spec.clutter_points {
        let x = rng.gen_range(0.0..spec.room[0]);
        let y = rng.gen_range(0.0..spec.room[1]);
        let z = rng.gen_range(0.0..0.02);
        let gray = rng.gen_range(0.35..0.55);
        positions.push([x as f32, y as f32, z as f32]);
        colors.push([gray as f32; 3]);
        let tile = (y / CLUTTER_TILE) as u32 * tiles_x + (x / CLUTTER_TILE) as u32;
        labels.push(background + tile);
    }
    Ok(Scene {
        cloud: PointCloud::new(positions, colors)?,
        ground_truth: boxes,
        class_count: spec.class_count,
        superpoint_labels: Some(labels),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{save_scene, validate_scene};
    use proptest::prelude::*;

    #[test]
    fn single_object_points_lie_on_its_surface() {
        let spec = SynthSpec {
            objects: (1, 1),
            clutter_points: 0,
            ..SynthSpec::default()
        };
        let scene = synth(&spec).unwrap();
        let b = scene.ground_truth[0].bbox;
        let (lo, hi) = (b.min(), b.max());
        for i in 0..scene.cloud.len() {
            let p = scene.cloud.position(i);
            assert!((0..3).all(|a| p[a] >= lo[a] - 1e-6 && p[a] <= hi[a] + 1e-6));
            let on_face = (0..3).any(|a| (p[a] - lo[a]).abs() < 1e-6 || (p[a] - hi[a]).abs() < 1e-6);
            assert!(on_face, "point {i} is not on a face");
        }
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            seed: 11,
            ..SynthSpec::default()
        };
        let (a, b) = (dir.path().join("a.spg3"), dir.path().join("b.spg3"));
        save_scene(&synth(&spec).unwrap(), &a).unwrap();
        save_scene(&synth(&spec).unwrap(), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let side = |p: &std::path::Path| std::fs::read(crate::scene::sidecar_path(p)).unwrap();
        assert_eq!(side(&a), side(&b));
    }

    #[test]
    fn oracle_groups_sit_in_exactly_one_box() {
        let scene = synth(&SynthSpec {
            seed: 3,
            ..SynthSpec::default()
        })
        .unwrap();
        let labels = scene.superpoint_labels.as_ref().unwrap();
        let objects = 2 * scene.ground_truth.len() as u32;
        for g in 0..objects {
            let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == g).collect();
            assert!(!members.is_empty());
            let holders: Vec<usize> = (0..scene.ground_truth.len())
                .filter(|&k| {
                    let (lo, hi) = (scene.ground_truth[k].bbox.min(), scene.ground_truth[k].bbox.max());
                    members.iter().all(|&i| {
                        let p = scene.cloud.position(i);
                        (0..3).all(|a| p[a] >= lo[a] - 1e-6 && p[a] <= hi[a] + 1e-6)
                    })
                })
                .collect();
            assert_eq!(holders.len(), 1, "group {g}");
        }
    }

    #[test]
    fn crowded_room_reports_placement_failure() {
        let spec = SynthSpec {
            objects: (40, 40),
            room: [2.0, 2.0, 2.0],
            max_retries: 50,
            ..SynthSpec::default()
        };
        let err = synth(&spec).unwrap_err();
        assert!(matches!(err, Error::Placement { retries: 50 }));
        assert!(err.to_string().contains("smaller objects"));
    }

    #[test]
    fn default_scenes_have_about_4000_points() {
        let sizes: Vec<usize> = (0..10)
            .map(|s| {
                synth(&SynthSpec {
                    seed: s,
                    ..SynthSpec::default()
                })
                .unwrap()
                .cloud
                .len()
            })
            .collect();
        let mean = sizes.iter().sum::<usize>() as f64 / sizes.len() as f64;
        assert!((3000.0..5000.0).contains(&mean), "{sizes:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn scenes_validate(seed in 0u64..1000, lo in 1usize..4, extra in 0usize..3) {
            let spec = SynthSpec { seed, objects: (lo, lo + extra), points_per_object: 80, clutter_points: 50, ..SynthSpec::default() };
            let scene = synth(&spec).unwrap();
            prop_assert!(validate_scene(&scene).is_empty());
            for (i, a) in scene.ground_truth.iter().enumerate() {
                prop_assert!(a.bbox.min()[2] >= MIN_ELEVATION);
                for b in &scene.ground_truth[i + 1..] {
                    prop_assert_eq!(a.bbox.intersection_volume(&b.bbox), 0.0);
                }
            }
        }
    }
}
