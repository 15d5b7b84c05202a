//! End-to-end orchestration: featurize, vote, merge, group, predict, and
//! either match + loss + update or score + NMS.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamConfig, AdamW, Bound, ParamStore, Tape, Tensor, Var};
use crate::config::{PipelineConfig, PositionMode};
use crate::error::{Error, Result, StageExt};
use crate::grouping::{init_grouping_params, run_grouping_stack, GroupingLayout, GroupingOutput, SceneFrame};
use crate::head::{box_row, decode_boxes, fuse_score, head_forward, init_head_params, nms3d, sigmoid, Detection, HeadOutput, Proposal, HEAD_HIDDEN};
use crate::matching::{build_cost_matrix, centerness_targets, multiple_match, total_loss, Assignment, LossBreakdown, LossVars, ProposalView};
use crate::scene::{Box3, LabeledBox, Scene};
use crate::superpoint::{transfer_to_voxels, SuperpointPartition};
use crate::voting::{apply_votes, init_vote_params, merge_seed_vote, vote_branch, vote_loss, votes_only, MergedSet, VoteOutput};
use crate::voxel::{assign_voxels, scatter_mean, scatter_mean_var, voxel_center};

pub const FEATURIZER_INPUT: usize = 6;

/// Every trainable parameter for `class_count` classes, seeded from
/// `config.seed`.
pub fn init_params(config: &PipelineConfig, class_count: usize) -> Result<ParamStore> {
    config.validate()?;
    if class_count == 0 {
        return Err(Error::InvalidArgument {
            arg: "class_count",
            reason: "must be at least 1".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let c = config.channels;
    store.init_linear("feat.l0", FEATURIZER_INPUT, c, &mut rng)?;
    store.init_linear("feat.l1", c, c, &mut rng)?;
    init_vote_params(&mut store, c, &mut rng)?;
    let grouping = config.grouping();
    init_grouping_params(&mut store, &grouping, &mut rng)?;
    init_head_params(&mut store, grouping.head_width(), HEAD_HIDDEN, class_count, &mut rng)?;
    Ok(store)
}

/// Everything about a scene that does not depend on the parameters. All
/// geometry is expressed relative to `origin`, the cloud's minimum corner.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub origin: [f64; 3],
    pub frame: SceneFrame,
    /// Featurizer input per fine voxel: position then mean color.
    pub fine_input: Tensor,
    pub fine_to_seed: Vec<usize>,
    /// `M×3` seed voxel centers.
    pub seed_positions: Tensor,
    /// Superpoint per seed, densely renumbered over the seeds.
    pub seed_labels: Vec<usize>,
    pub superpoints: usize,
    /// Partition label of each renumbered superpoint.
    pub superpoint_ids: Vec<usize>,
    pub ground_truth: Vec<LabeledBox>,
    pub class_count: usize,
}

impl PreparedScene {
    pub fn seeds(&self) -> usize {
        self.seed_positions.rows()
    }

    /// Ground truth in scene coordinates.
    pub fn world_ground_truth(&self) -> Vec<LabeledBox> {
        self.ground_truth
            .iter()
            .map(|b| LabeledBox {
                bbox: b.bbox.translated(self.origin),
                class_id: b.class_id,
            })
            .collect()
    }
}

pub fn prepare(scene: &Scene, partition: &SuperpointPartition, config: &PipelineConfig) -> Result<PreparedScene> {
    config.validate()?;
    let n = scene.cloud.len();
    if partition.point_labels.len() != n {
        return Err(Error::shape("prepare", format!("{n} superpoint labels"), partition.point_labels.len()));
    }
    let (origin, max) = scene.cloud.bounds().ok_or(Error::Empty { op: "prepare" })?;
    let local: Vec<f64> = (0..n)
        .flat_map(|i| {
            let p = scene.cloud.position(i);
            [p[0] - origin[0], p[1] - origin[1], p[2] - origin[2]]
        })
        .collect();
    let local = Tensor::from_vec(n, 3, local)?;
    let colors = Tensor::from_vec(n, 3, (0..n).flat_map(|i| scene.cloud.color(i)).collect())?;

    let (fine_coords, point_to_fine) = assign_voxels(&local, config.voxel_size)?;
    let fine_colors = scatter_mean(&colors, &point_to_fine, fine_coords.len())?.values;
    let shift = match config.positions {
        PositionMode::SceneMin => [0.0; 3],
        PositionMode::Raw => origin,
    };
    let mut fine_input = Tensor::zeros(fine_coords.len(), FEATURIZER_INPUT);
    let mut fine_centers = Tensor::zeros(fine_coords.len(), 3);
    for (v, &c) in fine_coords.iter().enumerate() {
        let p = voxel_center(c, config.voxel_size);
        fine_centers.row_mut(v).copy_from_slice(&p);
        let row = fine_input.row_mut(v);
        for a in 0..3 {
            row[a] = p[a] + shift[a];
        }
        row[3..].copy_from_slice(fine_colors.row(v));
    }

    let (seed_coords, fine_to_seed) = assign_voxels(&fine_centers, config.output_voxel_size)?;
    let m = seed_coords.len();
    let mut seed_positions = Tensor::zeros(m, 3);
    for (s, &c) in seed_coords.iter().enumerate() {
        seed_positions.row_mut(s).copy_from_slice(&voxel_center(c, config.output_voxel_size));
    }
    let point_to_seed: Vec<usize> = point_to_fine.iter().map(|&f| fine_to_seed[f]).collect();
    let raw_labels = transfer_to_voxels(&partition.point_labels, &point_to_seed, m)?;
    let compact = SuperpointPartition::from_raw_labels(&raw_labels);
    let mut superpoint_ids = vec![0; compact.count];
    for (&dense, &raw) in compact.point_labels.iter().zip(&raw_labels) {
        superpoint_ids[dense] = raw;
    }

    let ground_truth = scene
        .ground_truth
        .iter()
        .map(|b| LabeledBox {
            bbox: b.bbox.translated(origin.map(|v| -v)),
            class_id: b.class_id,
        })
        .collect();
    Ok(PreparedScene {
        origin,
        frame: SceneFrame {
            origin: [0.0; 3],
            min: [0.0; 3],
            max: [0, 1, 2].map(|a| max[a] - origin[a]),
        },
        fine_input,
        fine_to_seed,
        seed_positions,
        seed_labels: compact.point_labels,
        superpoints: compact.count,
        superpoint_ids,
        ground_truth,
        class_count: scene.class_count,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageTiming {
    pub stage: &'static str,
    pub elapsed: Duration,
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub seed_positions: Var,
    pub seed_features: Var,
    pub vote: VoteOutput,
    pub merged: MergedSet,
    pub grouping: GroupingOutput,
    pub head: HeadOutput,
    /// `L×6` decoded boxes in the prepared frame.
    pub boxes: Var,
    pub timings: Vec<StageTiming>,
}

struct Timer {
    last: Instant,
    timings: Vec<StageTiming>,
}

impl Timer {
    fn new() -> Self {
        Self {
            last: Instant::now(),
            timings: Vec::new(),
        }
    }

    fn lap(&mut self, stage: &'static str) {
        let now = Instant::now();
        self.timings.push(StageTiming {
            stage,
            elapsed: now - self.last,
        });
        self.last = now;
    }
}

pub fn forward(
    tape: &mut Tape,
    params: &Bound,
    scene: &PreparedScene,
    config: &PipelineConfig,
    frozen: Option<&GroupingLayout>,
) -> Result<ForwardTrace> {
    let mut timer = Timer::new();
    let input = tape.constant(scene.fine_input.clone());
    let seed_features = (|| {
        let h = params.linear(tape, "feat.l0", input)?;
        let h = tape.elu(h);
        let h = params.linear(tape, "feat.l1", h)?;
        Ok(scatter_mean_var(tape, h, &scene.fine_to_seed, scene.seeds())?.0)
    })()
    .stage("featurize")?;
    timer.lap("featurize");

    let seed_positions = tape.constant(scene.seed_positions.clone());
    let (vote, merged) = (|| {
        let vote = vote_branch(tape, params, seed_features)?;
        let votes = apply_votes(tape, seed_positions, seed_features, &vote)?;
        let merged = if config.merge_seeds {
            merge_seed_vote(tape, (seed_positions, seed_features), votes, &scene.seed_labels)?
        } else {
            votes_only(votes, &scene.seed_labels)
        };
        Ok((vote, merged))
    })()
    .stage("vote")?;
    timer.lap("vote");

    let grouping = run_grouping_stack(
        tape,
        params,
        &merged,
        scene.superpoints,
        &scene.frame,
        &config.grouping(),
        frozen,
    )
    .stage("grouping")?;
    timer.lap("grouping");

    let (head, boxes) = (|| {
        let head = head_forward(tape, params, grouping.head_input)?;
        let boxes = decode_boxes(tape, grouping.init.centroids, head.reg)?;
        Ok((head, boxes))
    })()
    .stage("head")?;
    timer.lap("head");

    Ok(ForwardTrace {
        seed_positions,
        seed_features,
        vote,
        merged,
        grouping,
        head,
        boxes,
        timings: timer.timings,
    })
}

/// One proposal per superpoint, boxes in scene coordinates.
pub fn proposals(tape: &Tape, trace: &ForwardTrace, scene: &PreparedScene) -> Vec<Proposal> {
    let boxes = tape.value(trace.boxes);
    let cls = tape.value(trace.head.cls);
    let cntr = tape.value(trace.head.cntr);
    (0..boxes.rows())
        .map(|i| {
            let logits = cls.row(i).to_vec();
            let (class_id, score) = fuse_score(&logits, cntr.get(i, 0));
            Proposal {
                superpoint: scene.superpoint_ids[i],
                bbox: box_row(boxes, i).translated(scene.origin),
                class_logits: logits,
                centerness_logit: cntr.get(i, 0),
                class_id,
                score,
            }
        })
        .collect()
}

/// Score floor then class-wise NMS, in descending score order.
pub fn select_detections(proposals: &[Proposal], score_floor: f64, nms_iou: f64) -> Vec<Detection> {
    let candidates: Vec<Detection> = proposals
        .iter()
        .filter(|p| p.score >= score_floor)
        .map(Proposal::detection)
        .collect();
    nms3d(&candidates, nms_iou).into_iter().map(|i| candidates[i]).collect()
}

pub fn infer(params: &ParamStore, scene: &PreparedScene, config: &PipelineConfig) -> Result<Vec<Detection>> {
    let mut tape = Tape::new();
    let bound = params.bind_constant(&mut tape);
    let trace = forward(&mut tape, &bound, scene, config, None)?;
    Ok(select_detections(
        &proposals(&tape, &trace, scene),
        config.score_floor,
        config.nms_iou,
    ))
}

/// The discrete choices of one training forward pass. Reusing them makes
/// the loss a smooth function of the parameters.
#[derive(Clone, Debug)]
pub struct Frozen {
    pub layout: GroupingLayout,
    pub assignment: Assignment,
    pub centerness: Vec<f64>,
}

/// Matches the proposals of `trace` to the ground truth and computes the
/// centerness targets of the positives.
fn assign(
    tape: &Tape,
    trace: &ForwardTrace,
    scene: &PreparedScene,
    config: &PipelineConfig,
) -> Result<(Assignment, Vec<f64>)> {
    let centroids = tape.value(trace.grouping.init.centroids);
    let boxes = tape.value(trace.boxes);
    let cls = tape.value(trace.head.cls);
    let views: Vec<ProposalView> = (0..boxes.rows())
        .map(|i| {
            let c = centroids.row(i);
            ProposalView {
                centroid: [c[0], c[1], c[2]],
                bbox: box_row(boxes, i),
                class_probs: cls.row(i).iter().map(|&z| sigmoid(z)).collect(),
            }
        })
        .collect();
    let costs = build_cost_matrix(&views, &scene.ground_truth, config.lambda_cls, config.lambda_reg);
    let assignment = multiple_match(&costs, config.top_r);
    let centerness = centerness_targets(centroids, &assignment, &scene.ground_truth).stage("match")?;
    Ok((assignment, centerness))
}

/// The label assignment the loss would use for `scene` under `params`.
pub fn match_scene(params: &ParamStore, scene: &PreparedScene, config: &PipelineConfig) -> Result<Assignment> {
    let mut tape = Tape::new();
    let bound = params.bind_constant(&mut tape);
    let trace = forward(&mut tape, &bound, scene, config, None)?;
    Ok(assign(&tape, &trace, scene, config)?.0)
}

pub struct SceneLoss {
    pub trace: ForwardTrace,
    pub loss: LossVars,
    pub frozen: Frozen,
}

pub fn scene_loss(
    tape: &mut Tape,
    params: &Bound,
    scene: &PreparedScene,
    config: &PipelineConfig,
    frozen: Option<&Frozen>,
) -> Result<SceneLoss> {
    let trace = forward(tape, params, scene, config, frozen.map(|f| &f.layout))?;
    let (assignment, centerness) = match frozen {
        Some(f) => (f.assignment.clone(), f.centerness.clone()),
        None => assign(tape, &trace, scene, config)?,
    };
    let loss = (|| {
        let vote = vote_loss(tape, trace.vote.coord, &scene.seed_positions, &scene.ground_truth)?;
        total_loss(
            tape,
            trace.head.cls,
            trace.boxes,
            trace.head.cntr,
            vote.value,
            &assignment,
            &centerness,
            &scene.ground_truth,
            &config.loss_weights,
        )
    })()
    .stage("loss")?;
    let frozen = Frozen {
        layout: trace.grouping.layout.clone(),
        assignment,
        centerness,
    };
    Ok(SceneLoss { trace, loss, frozen })
}

/// Loss breakdown and parameter gradients for one scene.
pub fn scene_gradients(
    params: &ParamStore,
    scene: &PreparedScene,
    config: &PipelineConfig,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = scene_loss(&mut tape, &bound, scene, config, None)?;
    let grads = tape.backward(out.loss.total);
    Ok((out.loss.breakdown, bound.grads(&tape, &grads)))
}

pub struct Trainer {
    pub params: ParamStore,
    pub optimizer: AdamW,
    pub config: PipelineConfig,
}

impl Trainer {
    pub fn new(params: ParamStore, config: PipelineConfig) -> Self {
        let optimizer = AdamW::new(AdamConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        });
        Self {
            params,
            optimizer,
            config,
        }
    }

    /// One optimizer step on the mean loss of `scenes`, accumulated in order.
    /// Returns the mean loss breakdown before the update.
    pub fn step(&mut self, scenes: &[PreparedScene]) -> Result<LossBreakdown> {
        if scenes.is_empty() {
            return Err(Error::Empty { op: "train_step" });
        }
        let inv = 1.0 / scenes.len() as f64;
        let mut mean = LossBreakdown::default();
        let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
        for scene in scenes {
            let (b, grads) = scene_gradients(&self.params, scene, &self.config)?;
            mean.total += b.total * inv;
            mean.vote += b.vote * inv;
            mean.cntr += b.cntr * inv;
            mean.bbox += b.bbox * inv;
            mean.cls += b.cls * inv;
            for (k, g) in grads {
                let g = g.scale(inv);
                match acc.get_mut(&k) {
                    Some(a) => a.add_assign(&g),
                    None => {
                        acc.insert(k, g);
                    }
                }
            }
        }
        self.optimizer.step(&mut self.params, &acc).stage("optimizer")?;
        Ok(mean)
    }
}

/// Largest `|Δ|` between a box and its counterpart after translating the
/// scene; used by translation checks.
pub fn max_box_offset(a: &[Proposal], b: &[Proposal], t: [f64; 3]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(p, q)| {
            let moved: Box3 = p.bbox.translated(t);
            (0..3).flat_map(move |k| [(moved.center[k] - q.bbox.center[k]).abs(), (moved.size[k] - q.bbox.size[k]).abs()])
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::rel_error;
    use crate::scene::PointCloud;
    use rand::{Rng, SeedableRng};

    fn small_config() -> PipelineConfig {
        PipelineConfig {
            channels: 8,
            widths: vec![8, 12, 12],
            ..PipelineConfig::default()
        }
    }

    /// Two boxes sampled on their surfaces, each split into halves along x.
    fn toy_scene(seed: u64) -> (Scene, SuperpointPartition) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let boxes = [
            LabeledBox {
                bbox: Box3::new([0.5, 0.5, 0.4], [0.4, 0.3, 0.3]),
                class_id: 0,
            },
            LabeledBox {
                bbox: Box3::new([1.4, 0.8, 0.5], [0.3, 0.5, 0.4]),
                class_id: 1,
            },
        ];
        let mut positions = Vec::new();
        let mut colors = Vec::new();
        let mut labels = Vec::new();
        for (k, b) in boxes.iter().enumerate() {
            for _ in 0..150 {
                let (lo, hi) = (b.bbox.min(), b.bbox.max());
                let mut p = [0, 1, 2].map(|a| rng.gen_range(lo[a]..hi[a]));
                let axis = rng.gen_range(0..3);
                p[axis] = if rng.gen_bool(0.5) { lo[axis] } else { hi[axis] };
                labels.push(2 * k + usize::from(p[0] > b.bbox.center[0]));
                positions.push(p.map(|v| v as f32));
                colors.push([0.2 + 0.5 * k as f32, 0.4, 0.6]);
            }
        }
        let scene = Scene {
            cloud: PointCloud::new(positions, colors).unwrap(),
            ground_truth: boxes.to_vec(),
            class_count: 2,
            superpoint_labels: None,
        };
        (scene, SuperpointPartition::from_raw_labels(&labels))
    }

    #[test]
    fn one_proposal_per_superpoint_and_default_widths() {
        let (scene, part) = toy_scene(0);
        let config = PipelineConfig::default();
        let params = init_params(&config, 2).unwrap();
        let prep = prepare(&scene, &part, &config).unwrap();
        assert_eq!(prep.superpoints, part.count);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let trace = forward(&mut tape, &bound, &prep, &config, None).unwrap();
        assert_eq!(trace.merged.len(), 2 * prep.seeds());
        assert_eq!(tape.value(trace.grouping.head_input).cols(), 390);
        assert_eq!(tape.value(trace.vote.raw).cols(), 67);
        let props = proposals(&tape, &trace, &prep);
        assert_eq!(props.len(), part.count);
        assert_eq!(trace.timings.len(), 4);
    }

    #[test]
    fn forward_is_deterministic() {
        let (scene, part) = toy_scene(1);
        let config = small_config();
        let params = init_params(&config, 2).unwrap();
        let prep = prepare(&scene, &part, &config).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let trace = forward(&mut tape, &bound, &prep, &config, None).unwrap();
            proposals(&tape, &trace, &prep)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let (scene, part) = toy_scene(2);
        let config = PipelineConfig {
            lr: 0.0,
            ..small_config()
        };
        let params = init_params(&config, 2).unwrap();
        let prep = prepare(&scene, &part, &config).unwrap();
        let mut trainer = Trainer::new(params.clone(), config);
        let loss = trainer.step(&[prep]).unwrap();
        assert!(loss.total.is_finite());
        assert_eq!(trainer.params, params);
    }

    #[test]
    fn loss_gradient_spot_check() {
        let (scene, part) = toy_scene(3);
        let config = small_config();
        let params = init_params(&config, 2).unwrap();
        let prep = prepare(&scene, &part, &config).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let base = scene_loss(&mut tape, &bound, &prep, &config, None).unwrap();
        let grads = bound.grads(&tape, &tape.backward(base.loss.total));
        let frozen = base.frozen;
        let eval = |p: &ParamStore| {
            let mut t = Tape::new();
            let b = p.bind_constant(&mut t);
            scene_loss(&mut t, &b, &prep, &config, Some(&frozen)).unwrap().loss.breakdown.total
        };
        let names: Vec<String> = params.names().map(str::to_string).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-5;
        for _ in 0..10 {
            let name = &names[rng.gen_range(0..names.len())];
            let len = params.get(name).unwrap().len();
            let idx = rng.gen_range(0..len);
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.perturb(name, idx, h).unwrap();
            minus.perturb(name, idx, -h).unwrap();
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let analytic = grads[name].data()[idx];
            assert!(rel_error(analytic, numeric) < 1e-3, "{name}[{idx}]: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn translation_moves_boxes() {
        let (mut scene, part) = toy_scene(4);
        // Grid-aligned coordinates keep the f32 translation exact.
        for p in scene.cloud.positions.iter_mut() {
            *p = p.map(|v| (v * 1024.0).round() / 1024.0);
        }
        let config = small_config();
        let params = init_params(&config, 2).unwrap();
        let t = [1.5, -2.25, 0.75];
        let run = |s: &Scene| {
            let prep = prepare(s, &part, &config).unwrap();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let trace = forward(&mut tape, &bound, &prep, &config, None).unwrap();
            proposals(&tape, &trace, &prep)
        };
        let a = run(&scene);
        let b = run(&scene.translated(t));
        assert!(max_box_offset(&a, &b, t) < 1e-9);
    }

    #[test]
    fn score_floor_and_nms_limits() {
        let (scene, part) = toy_scene(5);
        let config = small_config();
        let params = init_params(&config, 2).unwrap();
        let prep = prepare(&scene, &part, &config).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let trace = forward(&mut tape, &bound, &prep, &config, None).unwrap();
        let props = proposals(&tape, &trace, &prep);
        assert!(select_detections(&props, 1.1, 0.5).is_empty());
        assert_eq!(select_detections(&props, 0.0, 1.0).len(), props.len());
    }

    #[test]
    fn votes_only_groups_m_elements() {
        let (scene, part) = toy_scene(6);
        let config = PipelineConfig {
            merge_seeds: false,
            attention: false,
            ..small_config()
        };
        let params = init_params(&config, 2).unwrap();
        let prep = prepare(&scene, &part, &config).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = scene_loss(&mut tape, &bound, &prep, &config, None).unwrap();
        assert_eq!(out.trace.merged.len(), prep.seeds());
        assert!(out.loss.breakdown.total.is_finite());
    }
}
