//! Pipeline hyperparameters and the flat `key = value` text format they are
//! read from.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grouping::{GroupingConfig, SoftmaxMode};
use crate::matching::LossWeights;
use crate::superpoint::SegmentConfig;
use crate::voxel::KernelExtent;

/// Which positions the featurizer sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionMode {
    /// Offsets from the scene's minimum corner.
    SceneMin,
    Raw,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Featurizer voxel edge in meters.
    pub voxel_size: f64,
    /// Seed and fusion voxel edge in meters.
    pub output_voxel_size: f64,
    pub channels: usize,
    pub iterations: usize,
    pub widths: Vec<usize>,
    pub neighbours: usize,
    pub top_r: usize,
    pub lambda_cls: f64,
    pub lambda_reg: f64,
    pub loss_weights: LossWeights,
    pub nms_iou: f64,
    pub score_floor: f64,
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub kernel: KernelExtent,
    pub softmax: SoftmaxMode,
    pub attention: bool,
    /// Keep seeds next to their votes; when false only votes are grouped.
    pub merge_seeds: bool,
    pub positions: PositionMode,
    pub segment: SegmentConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.02,
            output_voxel_size: 0.04,
            channels: 64,
            iterations: 3,
            widths: vec![64, 128, 128],
            neighbours: 8,
            top_r: 18,
            lambda_cls: 1.0,
            lambda_reg: 1.0,
            loss_weights: LossWeights::default(),
            nms_iou: 0.5,
            score_floor: 0.01,
            seed: 0,
            lr: 1e-3,
            weight_decay: 1e-4,
            kernel: KernelExtent::Cube3,
            softmax: SoftmaxMode::Scalar,
            attention: true,
            merge_seeds: true,
            positions: PositionMode::SceneMin,
            segment: SegmentConfig::default(),
        }
    }
}

pub(crate) fn invalid(key: &str, reason: impl Into<String>) -> Error {
    Error::Config(format!("`{key}`: {}", reason.into()))
}

pub(crate) fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| invalid(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(invalid(key, format!("expected true or false, got `{value}`"))),
    }
}

/// Splits `key = value` lines; `#` starts a comment. Duplicate keys are an
/// error.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl PipelineConfig {
    /// Sets one key. Returns `Ok(false)` when the key is not a pipeline key so
    /// callers can try their own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "voxel_size" => self.voxel_size = parse_num(key, value)?,
            "output_voxel_size" => self.output_voxel_size = parse_num(key, value)?,
            "channels" => self.channels = parse_num(key, value)?,
            "iterations" => self.iterations = parse_num(key, value)?,
            "widths" => {
                self.widths = value
                    .split(',')
                    .map(|v| parse_num(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            "neighbours" => self.neighbours = parse_num(key, value)?,
            "top_r" => self.top_r = parse_num(key, value)?,
            "lambda_cls" => self.lambda_cls = parse_num(key, value)?,
            "lambda_reg" => self.lambda_reg = parse_num(key, value)?,
            "beta_vote" => self.loss_weights.vote = parse_num(key, value)?,
            "beta_cntr" => self.loss_weights.cntr = parse_num(key, value)?,
            "beta_box" => self.loss_weights.bbox = parse_num(key, value)?,
            "beta_cls" => self.loss_weights.cls = parse_num(key, value)?,
            "nms_iou" => self.nms_iou = parse_num(key, value)?,
            "score_floor" => self.score_floor = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "kernel" => {
                self.kernel = match value {
                    "cube3" => KernelExtent::Cube3,
                    "point" => KernelExtent::Point,
                    _ => return Err(invalid(key, "expected cube3 or point")),
                }
            }
            "softmax" => {
                self.softmax = match value {
                    "scalar" => SoftmaxMode::Scalar,
                    "per_channel" => SoftmaxMode::PerChannel,
                    _ => return Err(invalid(key, "expected scalar or per_channel")),
                }
            }
            "attention" => self.attention = parse_bool(key, value)?,
            "merge_seeds" => self.merge_seeds = parse_bool(key, value)?,
            "positions" => {
                self.positions = match value {
                    "scene_min" => PositionMode::SceneMin,
                    "raw" => PositionMode::Raw,
                    _ => return Err(invalid(key, "expected scene_min or raw")),
                }
            }
            "segment_k" => self.segment.graph_k = parse_num(key, value)?,
            "segment_threshold" => self.segment.merge_threshold = parse_num(key, value)?,
            "segment_beta_pos" => self.segment.beta_pos = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses a config text; unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (k, v) in parse_pairs(text)? {
            if !config.set(&k, &v)? {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &self.loss_weights;
        let widths: Vec<String> = self.widths.iter().map(usize::to_string).collect();
        let kernel = match self.kernel {
            KernelExtent::Cube3 => "cube3",
            KernelExtent::Point => "point",
        };
        let softmax = match self.softmax {
            SoftmaxMode::Scalar => "scalar",
            SoftmaxMode::PerChannel => "per_channel",
        };
        let positions = match self.positions {
            PositionMode::SceneMin => "scene_min",
            PositionMode::Raw => "raw",
        };
        let lines = [
            ("voxel_size", self.voxel_size.to_string()),
            ("output_voxel_size", self.output_voxel_size.to_string()),
            ("channels", self.channels.to_string()),
            ("iterations", self.iterations.to_string()),
            ("widths", widths.join(",")),
            ("neighbours", self.neighbours.to_string()),
            ("top_r", self.top_r.to_string()),
            ("lambda_cls", self.lambda_cls.to_string()),
            ("lambda_reg", self.lambda_reg.to_string()),
            ("beta_vote", w.vote.to_string()),
            ("beta_cntr", w.cntr.to_string()),
            ("beta_box", w.bbox.to_string()),
            ("beta_cls", w.cls.to_string()),
            ("nms_iou", self.nms_iou.to_string()),
            ("score_floor", self.score_floor.to_string()),
            ("seed", self.seed.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("kernel", kernel.to_string()),
            ("softmax", softmax.to_string()),
            ("attention", self.attention.to_string()),
            ("merge_seeds", self.merge_seeds.to_string()),
            ("positions", positions.to_string()),
            ("segment_k", self.segment.graph_k.to_string()),
            ("segment_threshold", self.segment.merge_threshold.to_string()),
            ("segment_beta_pos", self.segment.beta_pos.to_string()),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("voxel_size", self.voxel_size), ("output_voxel_size", self.output_voxel_size)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(k, "must be positive"));
            }
        }
        for (k, v) in [
            ("lambda_cls", self.lambda_cls),
            ("lambda_reg", self.lambda_reg),
            ("beta_vote", self.loss_weights.vote),
            ("beta_cntr", self.loss_weights.cntr),
            ("beta_box", self.loss_weights.bbox),
            ("beta_cls", self.loss_weights.cls),
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("score_floor", self.score_floor),
            ("nms_iou", self.nms_iou),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(k, "must be finite and non-negative"));
            }
        }
        if self.output_voxel_size < self.voxel_size {
            return Err(invalid("output_voxel_size", "must not be smaller than voxel_size"));
        }
        for (k, v) in [
            ("channels", self.channels),
            ("iterations", self.iterations),
            ("neighbours", self.neighbours),
            ("top_r", self.top_r),
            ("segment_k", self.segment.graph_k),
        ] {
            if v == 0 {
                return Err(invalid(k, "must be at least 1"));
            }
        }
        if self.widths.len() != self.iterations {
            return Err(invalid(
                "widths",
                format!("{} entries for {} iterations", self.widths.len(), self.iterations),
            ));
        }
        if self.widths.contains(&0) {
            return Err(invalid("widths", "entries must be at least 1"));
        }
        Ok(())
    }

    pub fn grouping(&self) -> GroupingConfig {
        GroupingConfig {
            channels: self.channels,
            iterations: self.iterations,
            widths: self.widths.clone(),
            k: self.neighbours,
            fusion_voxel_size: self.output_voxel_size,
            kernel: self.kernel,
            softmax: self.softmax,
            attention: self.attention,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = PipelineConfig::default();
        c.top_r = 5;
        c.widths = vec![8, 16];
        c.iterations = 2;
        c.softmax = SoftmaxMode::PerChannel;
        c.positions = PositionMode::Raw;
        c.lr = 3e-4;
        assert_eq!(PipelineConfig::from_text(&c.to_text()).unwrap(), c);
        assert_eq!(PipelineConfig::from_text("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn defaults() {
        let c = PipelineConfig::default();
        assert_eq!((c.voxel_size, c.output_voxel_size), (0.02, 0.04));
        assert_eq!((c.channels, c.iterations, c.neighbours, c.top_r), (64, 3, 8, 18));
        assert_eq!(c.grouping().head_width(), 390);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "nope = 1",
            "top_r = 0",
            "top_r = x",
            "voxel_size = -1",
            "iterations = 2",
            "attention = yes",
            "seed",
            "lr = 1\nlr = 2",
            "kernel = cube5",
        ] {
            let err = PipelineConfig::from_text(text).unwrap_err();
            assert!(err.is_validation(), "{text}: {err}");
        }
    }

    #[test]
    fn comments_and_whitespace() {
        let c = PipelineConfig::from_text("# header\n  top_r=4  # inline\n\nneighbours = 3\n").unwrap();
        assert_eq!((c.top_r, c.neighbours), (4, 3));
    }
}
