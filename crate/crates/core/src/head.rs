//! Detection head over superpoint features, face-distance box decoding,
//! score fusion and class-wise 3D NMS.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::eval::iou3d;
use crate::scene::Box3;

pub const HEAD_HIDDEN: usize = 256;
pub const SHARED_LAYERS: usize = 2;
/// Initial foreground probability encoded in the classification bias.
pub const CLS_PRIOR: f64 = 0.01;

pub fn init_head_params<R: Rng>(
    store: &mut ParamStore,
    in_width: usize,
    hidden: usize,
    classes: usize,
    rng: &mut R,
) -> Result<()> {
    let mut w = in_width;
    for i in 0..SHARED_LAYERS {
        let p = format!("head.shared{i}");
        store.init_linear(&p, w, hidden, rng)?;
        store.init_norm(&format!("{p}.norm"), hidden)?;
        w = hidden;
    }
    store.init_linear("head.cls", hidden, classes, rng)?;
    store.set(
        "head.cls.bias",
        Tensor::filled(1, classes, -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln()),
    )?;
    store.init_linear("head.reg", hidden, 6, rng)?;
    store.init_linear("head.cntr", hidden, 1, rng)
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `L×K` class logits.
    pub cls: Var,
    /// `L×6` log face distances `(x⁻, x⁺, y⁻, y⁺, z⁻, z⁺)`.
    pub reg: Var,
    /// `L×1` centerness logit.
    pub cntr: Var,
}

pub fn head_forward(tape: &mut Tape, params: &Bound, features: Var) -> Result<HeadOutput> {
    let mut h = features;
    for i in 0..SHARED_LAYERS {
        h = params.linear_norm_elu(tape, &format!("head.shared{i}"), h)?;
    }
    Ok(HeadOutput {
        cls: params.linear(tape, "head.cls", h)?,
        reg: params.linear(tape, "head.reg", h)?,
        cntr: params.linear(tape, "head.cntr", h)?,
    })
}

/// Box from a reference point and log face distances.
pub fn decode_box(centroid: [f64; 3], reg: [f64; 6]) -> Box3 {
    let d = reg.map(f64::exp);
    Box3 {
        center: [0, 1, 2].map(|a| centroid[a] + 0.5 * (d[2 * a + 1] - d[2 * a])),
        size: [0, 1, 2].map(|a| d[2 * a] + d[2 * a + 1]),
    }
}

/// Inverse of [`decode_box`] for a point strictly inside the box.
pub fn encode_box(centroid: [f64; 3], bbox: &Box3) -> Result<[f64; 6]> {
    let (lo, hi) = (bbox.min(), bbox.max());
    let mut out = [0.0; 6];
    for a in 0..3 {
        let (below, above) = (centroid[a] - lo[a], hi[a] - centroid[a]);
        if below <= 0.0 || above <= 0.0 {
            return Err(Error::InvalidArgument {
                arg: "centroid",
                reason: format!("not strictly inside the box on axis {a}"),
            });
        }
        out[2 * a] = below.ln();
        out[2 * a + 1] = above.ln();
    }
    Ok(out)
}

/// Differentiable batch decode: `L×3` centroids and `L×6` regression give
/// `L×6` boxes laid out as `(center, size)`.
pub fn decode_boxes(tape: &mut Tape, centroids: Var, reg: Var) -> Result<Var> {
    let (c, r) = (tape.value(centroids), tape.value(reg));
    let l = c.rows();
    if c.cols() != 3 || r.shape() != (l, 6) {
        return Err(Error::shape(
            "decode_boxes",
            format!("{l}x3 centroids and {l}x6 regression"),
            format!("{:?} / {:?}", c.shape(), r.shape()),
        ));
    }
    let d = r.map(f64::exp);
    let mut value = Tensor::zeros(l, 6);
    for i in 0..l {
        let b = decode_box(
            [c.get(i, 0), c.get(i, 1), c.get(i, 2)],
            [0, 1, 2, 3, 4, 5].map(|j| r.get(i, j)),
        );
        value.row_mut(i)[..3].copy_from_slice(&b.center);
        value.row_mut(i)[3..].copy_from_slice(&b.size);
    }
    Ok(tape.push(value, vec![centroids, reg], move |g, need| {
        let gc = need[0].then(|| g.slice_cols(0, 3));
        let gr = need[1].then(|| {
            let mut gr = Tensor::zeros(l, 6);
            for i in 0..l {
                for a in 0..3 {
                    let (gcen, gsize) = (g.get(i, a), g.get(i, 3 + a));
                    let (lo, hi) = (d.get(i, 2 * a), d.get(i, 2 * a + 1));
                    gr.set(i, 2 * a, lo * (gsize - 0.5 * gcen));
                    gr.set(i, 2 * a + 1, hi * (gsize + 0.5 * gcen));
                }
            }
            gr
        });
        vec![gc, gr]
    }))
}

/// Row `i` of a decoded `L×6` box tensor.
pub fn box_row(boxes: &Tensor, i: usize) -> Box3 {
    let r = boxes.row(i);
    Box3::new([r[0], r[1], r[2]], [r[3], r[4], r[5]])
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(argmax class, max_c σ(cls_c) · σ(centerness))`; ties pick the lower
/// class id.
pub fn fuse_score(cls_logits: &[f64], centerness_logit: f64) -> (usize, f64) {
    let mut best = 0;
    for (c, &v) in cls_logits.iter().enumerate() {
        if v > cls_logits[best] {
            best = c;
        }
    }
    let p = cls_logits.get(best).map_or(0.0, |&v| sigmoid(v));
    (best, p * sigmoid(centerness_logit))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: Box3,
    pub class_id: usize,
    pub score: f64,
}

/// One proposal per superpoint before filtering.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub superpoint: usize,
    pub bbox: Box3,
    pub class_logits: Vec<f64>,
    pub centerness_logit: f64,
    pub class_id: usize,
    pub score: f64,
}

impl Proposal {
    pub fn detection(&self) -> Detection {
        Detection {
            bbox: self.bbox,
            class_id: self.class_id,
            score: self.score,
        }
    }
}

/// Indices ordered by descending score, ties by ascending index.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy class-wise NMS. Returns kept indices in rank order; a detection is
/// dropped when an already-kept detection of its class overlaps it with IoU
/// above `iou_threshold`.
pub fn nms3d(detections: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let scores: Vec<f64> = detections.iter().map(|d| d.score).collect();
    let mut kept: Vec<usize> = Vec::new();
    for i in rank_by_score(&scores) {
        let d = &detections[i];
        let suppressed = kept.iter().any(|&j| {
            let k = &detections[j];
            k.class_id == d.class_id && iou3d(&k.bbox, &d.bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

pub fn detections_to_json(detections: &[Detection]) -> Result<String> {
    let mut s = serde_json::to_string_pretty(detections)?;
    s.push('\n');
    Ok(s)
}

pub fn detections_from_json(text: &str) -> Result<Vec<Detection>> {
    Ok(serde_json::from_str(text)?)
}
