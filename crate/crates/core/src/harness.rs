//! Runnable protocols shared by the command line and the acceptance suite:
//! scene sets, partitions and the overfit loop.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use std::path::Path;

use crate::autodiff::ParamStore;
use crate::config::{invalid, parse_num, parse_pairs, PipelineConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult, DEFAULT_THRESHOLDS};
use crate::head::Detection;
use crate::matching::LossBreakdown;
use crate::pipeline::{infer, init_params, prepare, PreparedScene, Trainer};
use crate::scene::Scene;
use crate::superpoint::{load_partition, segment_points, SuperpointPartition};
use crate::synth::{synth, SynthSpec};

/// Pipeline settings plus the options of the runnable commands. The
/// pipeline `seed` also seeds scene generation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub synth: SynthSpec,
    pub scenes: usize,
    pub steps: usize,
    pub gradcheck_instances: usize,
    /// Progress line every this many steps; 0 disables it.
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            synth: SynthSpec::default(),
            scenes: 5,
            steps: 500,
            gradcheck_instances: 3,
            log_every: 50,
        }
    }
}

impl RunConfig {
    /// Sets one key; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.pipeline.set(key, value)? {
            return Ok(());
        }
        match key {
            "scenes" => self.scenes = parse_num(key, value)?,
            "steps" => self.steps = parse_num(key, value)?,
            "gradcheck_instances" => self.gradcheck_instances = parse_num(key, value)?,
            "log_every" => self.log_every = parse_num(key, value)?,
            "objects_min" => self.synth.objects.0 = parse_num(key, value)?,
            "objects_max" => self.synth.objects.1 = parse_num(key, value)?,
            "size_scale" => self.synth.size_scale = parse_num(key, value)?,
            "class_count" => self.synth.class_count = parse_num(key, value)?,
            "points_per_object" => self.synth.points_per_object = parse_num(key, value)?,
            "clutter_points" => self.synth.clutter_points = parse_num(key, value)?,
            "room" => {
                let v: Vec<f64> = value
                    .split(',')
                    .map(|v| parse_num(key, v.trim()))
                    .collect::<Result<_>>()?;
                self.synth.room = v
                    .try_into()
                    .map_err(|_| invalid(key, "expected three comma-separated extents"))?;
            }
            "gap" => self.synth.gap = parse_num(key, value)?,
            "max_retries" => self.synth.max_retries = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_pairs(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = Self::default();
        config.apply_text(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// The scene generator settings, seeded from the pipeline seed.
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: self.pipeline.seed,
            ..self.synth.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.synth_spec().validate()?;
        if self.scenes == 0 {
            return Err(invalid("scenes", "must be at least 1"));
        }
        if self.gradcheck_instances == 0 {
            return Err(invalid("gradcheck_instances", "must be at least 1"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = self.pipeline.to_text();
        let sy = &self.synth;
        let room: Vec<String> = sy.room.iter().map(f64::to_string).collect();
        let lines = [
            ("scenes", self.scenes.to_string()),
            ("steps", self.steps.to_string()),
            ("gradcheck_instances", self.gradcheck_instances.to_string()),
            ("log_every", self.log_every.to_string()),
            ("objects_min", sy.objects.0.to_string()),
            ("objects_max", sy.objects.1.to_string()),
            ("size_scale", sy.size_scale.to_string()),
            ("class_count", sy.class_count.to_string()),
            ("points_per_object", sy.points_per_object.to_string()),
            ("clutter_points", sy.clutter_points.to_string()),
            ("room", room.join(",")),
            ("gap", sy.gap.to_string()),
            ("max_retries", sy.max_retries.to_string()),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// `count` scenes; scene `i` uses seed `spec.seed + i`.
pub fn synth_scenes(spec: &SynthSpec, count: usize) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| {
            synth(&SynthSpec {
                seed: spec.seed.wrapping_add(i as u64),
                ..spec.clone()
            })
        })
        .collect()
}

/// Stored labels when the scene has them, otherwise a fresh segmentation.
pub fn partition_for(scene: &Scene, config: &PipelineConfig) -> Result<SuperpointPartition> {
    match scene.superpoint_labels {
        Some(_) => load_partition(scene),
        None => segment_points(&scene.cloud, &config.segment),
    }
}

pub fn prepare_all(scenes: &[Scene], config: &PipelineConfig) -> Result<Vec<PreparedScene>> {
    scenes
        .iter()
        .map(|s| prepare(s, &partition_for(s, config)?, config))
        .collect()
}

pub struct OverfitRun {
    pub params: ParamStore,
    /// Mean loss over the scenes at each step, before that step's update.
    pub losses: Vec<LossBreakdown>,
    pub detections: Vec<Vec<Detection>>,
    pub eval: EvalResult,
    pub elapsed: Duration,
}

impl OverfitRun {
    /// Relative drop of the total loss from `from` (1-based step) to the
    /// last step.
    pub fn loss_drop(&self, from: usize) -> Option<f64> {
        let start = self.losses.get(from.checked_sub(1)?)?.total;
        let end = self.losses.last()?.total;
        Some(1.0 - end / start)
    }
}

/// Trains fresh parameters on `scenes` with every scene in every step, then
/// runs inference and evaluation on the same scenes.
pub fn overfit(
    scenes: &[Scene],
    config: &PipelineConfig,
    steps: usize,
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<OverfitRun> {
    let start = Instant::now();
    let prepared = prepare_all(scenes, config)?;
    let classes = scenes.iter().map(|s| s.class_count).max().unwrap_or(1);
    let mut trainer = Trainer::new(init_params(config, classes)?, config.clone());
    let mut losses = Vec::with_capacity(steps);
    for step in 1..=steps {
        let loss = trainer.step(&prepared)?;
        on_step(step, &loss);
        losses.push(loss);
    }
    let detections = prepared
        .iter()
        .map(|p| infer(&trainer.params, p, config))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<_> = prepared.iter().map(PreparedScene::world_ground_truth).collect();
    let eval = evaluate(&detections, &gts, &DEFAULT_THRESHOLDS);
    Ok(OverfitRun {
        params: trainer.params,
        losses,
        detections,
        eval,
        elapsed: start.elapsed(),
    })
}

pub const LOSS_CSV_HEADER: &str = "step,total,vote,cntr,box,cls";

pub fn loss_csv(losses: &[LossBreakdown]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{},{},{},{},{},{}", i + 1, l.total, l.vote, l.cntr, l.bbox, l.cls);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_overfit_runs_end_to_end() {
        let spec = SynthSpec {
            objects: (1, 2),
            points_per_object: 120,
            clutter_points: 60,
            seed: 4,
            ..SynthSpec::default()
        };
        let scenes = synth_scenes(&spec, 2).unwrap();
        let config = PipelineConfig {
            channels: 8,
            widths: vec![8, 8, 8],
            ..PipelineConfig::default()
        };
        let mut seen = 0;
        let run = overfit(&scenes, &config, 3, |_, _| seen += 1).unwrap();
        assert_eq!((seen, run.losses.len()), (3, 3));
        assert!(run.losses.iter().all(|l| l.total.is_finite()));
        assert_eq!(run.detections.len(), 2);
        let csv = loss_csv(&run.losses);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("step,total,vote,cntr,box,cls\n1,"));
        assert!(run.loss_drop(1).is_some() && run.loss_drop(4).is_none());
    }

    #[test]
    fn unlabeled_scenes_are_segmented() {
        let mut scene = synth(&SynthSpec {
            objects: (1, 1),
            points_per_object: 200,
            clutter_points: 0,
            ..SynthSpec::default()
        })
        .unwrap();
        scene.superpoint_labels = None;
        let p = partition_for(&scene, &PipelineConfig::default()).unwrap();
        assert_eq!(p.point_labels.len(), 200);
        assert!(p.count >= 1);
    }

    #[test]
    fn run_config_round_trips_and_rejects_unknown_keys() {
        let mut config = RunConfig::default();
        config.apply_text("steps = 7\nroom = 3,3.5,2\nchannels = 16\nwidths = 8,8,8\nseed = 9").unwrap();
        assert_eq!((config.steps, config.synth.room, config.pipeline.channels), (7, [3.0, 3.5, 2.0], 16));
        assert_eq!(config.synth_spec().seed, 9);
        assert_eq!(RunConfig::from_text(&config.to_text()).unwrap(), config);
        assert!(matches!(RunConfig::from_text("stepz = 3"), Err(Error::Config(_))));
        assert!(RunConfig::from_text("room = 1,2").is_err());
        assert!(RunConfig::from_text("scenes = 0").is_err());
        assert!(RunConfig::from_text("objects_min = 4\nobjects_max = 2").is_err());
    }
}
