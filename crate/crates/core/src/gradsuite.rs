//! Finite-difference checks of every differentiable operator on seeded
//! random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{finite_diff_check, finite_diff_check_params, DEFAULT_STEP, DEFAULT_TOL};
use crate::autodiff::{GradReport, ParamStore, Tensor};
use crate::error::Result;
use crate::grouping::{init_grouping_params, superpoint_attention, superpoint_voxel_fusion, FusionLayout, GroupingConfig, SoftmaxMode, HIDDEN_EXTRA};
use crate::head::{decode_boxes, head_forward, init_head_params};
use crate::matching::{total_loss, Assignment, LossWeights};
use crate::scene::{Box3, LabeledBox};
use crate::superpoint::knn_superpoints;
use crate::voting::{init_vote_params, vote_branch, vote_loss};
use crate::voxel::{broadcast_var, scatter_mean_var, sparse_conv3_var, KernelExtent, Rulebook};

pub const SUITE_OPS: [&str; 16] = [
    "linear",
    "elu",
    "layer_norm",
    "scatter_mean",
    "broadcast",
    "sparse_conv3",
    "decode_boxes",
    "vote_branch",
    "superpoint_attention",
    "superpoint_voxel_fusion",
    "head_forward",
    "loss_vote",
    "loss_cls",
    "loss_box",
    "loss_cntr",
    "loss_total",
];

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("shape matches data")
}

/// Labels for `n` rows that use every group in `[0, groups)`.
fn covering_labels(rng: &mut ChaCha8Rng, n: usize, groups: usize) -> Vec<usize> {
    (0..n).map(|i| if i < groups { i } else { rng.gen_range(0..groups) }).collect()
}

struct LossToy {
    gts: Vec<LabeledBox>,
    assignment: Assignment,
    centerness: Vec<f64>,
    cls: Tensor,
    boxes: Tensor,
    cntr: Tensor,
}

fn loss_toy(rng: &mut ChaCha8Rng) -> LossToy {
    let gts = vec![
        LabeledBox {
            bbox: Box3::new([0.0, 0.0, 0.0], [1.0, 0.8, 0.6]),
            class_id: 0,
        },
        LabeledBox {
            bbox: Box3::new([2.0, 0.0, 0.0], [0.6, 0.6, 1.0]),
            class_id: 2,
        },
    ];
    let assignment = Assignment {
        matched: vec![Some(0), Some(1), None, Some(0)],
        positives: vec![vec![0, 3], vec![1]],
        costs: vec![vec![-1.0, -0.5], vec![-0.7]],
    };
    let mut boxes = Tensor::zeros(4, 6);
    for (p, g) in [(0, 0), (1, 1), (2, 0), (3, 0)] {
        let b = gts[g].bbox;
        for a in 0..3 {
            boxes.set(p, a, b.center[a] + rng.gen_range(-0.2..0.2));
            boxes.set(p, 3 + a, b.size[a] * rng.gen_range(0.7..1.3));
        }
    }
    LossToy {
        gts,
        assignment,
        centerness: vec![rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)],
        cls: random(rng, 4, 3).scale(2.0),
        boxes,
        cntr: random(rng, 4, 1).scale(2.0),
    }
}

fn loss_check(name: &str, toy: &LossToy, weights: LossWeights) -> Result<GradReport> {
    finite_diff_check(
        name,
        |tape, v| {
            let vote = tape.constant(Tensor::scalar(0.0));
            Ok(total_loss(tape, v[0], v[1], v[2], vote, &toy.assignment, &toy.centerness, &toy.gts, &weights)?.total)
        },
        &[toy.cls.clone(), toy.boxes.clone(), toy.cntr.clone()],
        DEFAULT_STEP,
        DEFAULT_TOL,
    )
}

fn only(vote: f64, cntr: f64, bbox: f64, cls: f64) -> LossWeights {
    LossWeights { vote, cntr, bbox, cls }
}

/// Runs every op in [`SUITE_OPS`] on `instances` random instances; report
/// names are `op#i`.
pub fn run_gradient_suite(seed: u64, instances: usize) -> Result<Vec<GradReport>> {
    let mut reports = Vec::new();
    for i in 0..instances {
        let inst = seed.wrapping_mul(1000).wrapping_add(i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(inst);
        for op in SUITE_OPS {
            let mut r = check_op(op, &mut rng)?;
            r.op = format!("{op}#{i}");
            reports.push(r);
        }
    }
    Ok(reports)
}

fn check_op(op: &str, rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let (step, tol) = (DEFAULT_STEP, DEFAULT_TOL);
    match op {
        "linear" => {
            let inputs = [random(rng, 4, 3), random(rng, 3, 5), random(rng, 1, 5)];
            finite_diff_check(op, |t, v| t.linear(v[0], v[1], v[2]), &inputs, step, tol)
        }
        "elu" => {
            let x = random(rng, 4, 3).scale(2.0);
            finite_diff_check(op, |t, v| Ok(t.elu(v[0])), &[x], step, tol)
        }
        "layer_norm" => {
            let inputs = [random(rng, 3, 5), random(rng, 1, 5), random(rng, 1, 5)];
            finite_diff_check(op, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5), &inputs, step, tol)
        }
        "scatter_mean" => {
            let labels = covering_labels(rng, 7, 3);
            let x = random(rng, 7, 3);
            finite_diff_check(op, |t, v| Ok(scatter_mean_var(t, v[0], &labels, 3)?.0), &[x], step, tol)
        }
        "broadcast" => {
            let labels = covering_labels(rng, 7, 3);
            let g = random(rng, 3, 4);
            finite_diff_check(op, |t, v| broadcast_var(t, v[0], &labels), &[g], step, tol)
        }
        "sparse_conv3" => {
            let mut coords: Vec<[i32; 3]> = (0..14).map(|_| [0, 1, 2].map(|_| rng.gen_range(0..4))).collect();
            coords.sort_unstable();
            coords.dedup();
            let rules = Rulebook::build(&coords, KernelExtent::Cube3);
            let inputs = [random(rng, coords.len(), 2), random(rng, 27 * 2, 3), random(rng, 1, 3)];
            finite_diff_check(op, |t, v| sparse_conv3_var(t, v[0], &rules, v[1], v[2]), &inputs, step, tol)
        }
        "decode_boxes" => {
            let inputs = [random(rng, 4, 3), random(rng, 4, 6)];
            finite_diff_check(op, |t, v| decode_boxes(t, v[0], v[1]), &inputs, step, tol)
        }
        "vote_branch" => {
            let mut store = ParamStore::new();
            init_vote_params(&mut store, 4, rng)?;
            let x = random(rng, 6, 4);
            finite_diff_check_params(op, |t, b, v| Ok(vote_branch(t, b, v[0])?.raw), &store, &[x], step, tol)
        }
        "superpoint_attention" => {
            let (w_in, d) = (HIDDEN_EXTRA + 2, 3);
            let config = GroupingConfig {
                channels: w_in - HIDDEN_EXTRA,
                iterations: 1,
                widths: vec![d],
                ..GroupingConfig::default()
            };
            let mut store = ParamStore::new();
            init_grouping_params(&mut store, &config, rng)?;
            let cents = random(rng, 5, 3);
            let pts: Vec<[f64; 3]> = (0..5).map(|r| [cents.get(r, 0), cents.get(r, 1), cents.get(r, 2)]).collect();
            let table = knn_superpoints(&pts, 3)?;
            let feats = random(rng, 5, w_in);
            finite_diff_check_params(
                op,
                |t, b, v| Ok(superpoint_attention(t, b, "group0", v[0], v[1], &table, SoftmaxMode::Scalar)?.features),
                &store,
                &[cents.clone(), feats],
                step,
                tol,
            )
        }
        "superpoint_voxel_fusion" => {
            let (c, d, e, l) = (3, 2, 10, 3);
            let mut store = ParamStore::new();
            store.init_linear("f.conv", 27 * (c + d), c, rng)?;
            store.init_norm("f.norm", c)?;
            store.set("f.norm.gain", random(rng, 1, c))?;
            store.set("f.norm.shift", random(rng, 1, c))?;
            let pos = random(rng, e, 3).scale(0.08);
            let labels = covering_labels(rng, e, l);
            let layout = FusionLayout::build(&pos, &labels, 0.04, KernelExtent::Cube3)?;
            finite_diff_check_params(
                op,
                |t, b, v| superpoint_voxel_fusion(t, b, "f", v[0], v[1], &labels, &layout),
                &store,
                &[random(rng, l, d), random(rng, e, c)],
                step,
                tol,
            )
        }
        "head_forward" => {
            let mut store = ParamStore::new();
            init_head_params(&mut store, 6, 5, 3, rng)?;
            let x = random(rng, 4, 6);
            finite_diff_check_params(
                op,
                |t, b, v| {
                    let h = head_forward(t, b, v[0])?;
                    t.concat_cols(&[h.cls, h.reg, h.cntr])
                },
                &store,
                &[x],
                step,
                tol,
            )
        }
        "loss_vote" => {
            let boxes = [LabeledBox {
                bbox: Box3::new([0.0; 3], [1.0; 3]),
                class_id: 0,
            }];
            let seeds = random(rng, 6, 3).scale(0.7);
            let offsets = random(rng, 6, 3).scale(1.5);
            finite_diff_check(op, |t, v| Ok(vote_loss(t, v[0], &seeds, &boxes)?.value), &[offsets], step, tol)
        }
        "loss_cls" => loss_check(op, &loss_toy(rng), only(0.0, 0.0, 0.0, 1.0)),
        "loss_box" => loss_check(op, &loss_toy(rng), only(0.0, 0.0, 1.0, 0.0)),
        "loss_cntr" => loss_check(op, &loss_toy(rng), only(0.0, 1.0, 0.0, 0.0)),
        "loss_total" => loss_check(op, &loss_toy(rng), LossWeights::default()),
        other => Err(crate::Error::InvalidArgument {
            arg: "op",
            reason: format!("no gradient check named `{other}`"),
        }),
    }
}
