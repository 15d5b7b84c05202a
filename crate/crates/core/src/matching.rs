//! Proposal-to-ground-truth assignment (focal + DIoU cost, inside-box
//! gating, top-r per ground truth) and the training loss stack.

use serde::Serialize;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::head::{box_row, sigmoid};
use crate::scene::{Box3, LabeledBox};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
const PROB_CLAMP: f64 = 1e-7;

/// `(IoU, d², c²)` of two boxes: overlap ratio, squared center distance and
/// squared diagonal of the enclosing box.
fn diou_terms(a: &Box3, b: &Box3) -> (f64, f64, f64) {
    let inter = a.intersection_volume(b);
    let iou = if inter > 0.0 {
        inter / (a.volume() + b.volume() - inter)
    } else {
        0.0
    };
    let (a_lo, a_hi, b_lo, b_hi) = (a.min(), a.max(), b.min(), b.max());
    let mut d2 = 0.0;
    let mut c2 = 0.0;
    for ax in 0..3 {
        d2 += (a.center[ax] - b.center[ax]).powi(2);
        c2 += (a_hi[ax].max(b_hi[ax]) - a_lo[ax].min(b_lo[ax])).powi(2);
    }
    (iou, d2, c2)
}

/// IoU minus squared center distance over squared enclosing diagonal.
pub fn diou(a: &Box3, b: &Box3) -> f64 {
    let (iou, d2, c2) = diou_terms(a, b);
    iou - d2 / c2
}

/// `diou(pred, gt)` and its gradient with respect to the predicted center
/// and size.
pub fn diou_with_grad(pred: &Box3, gt: &Box3) -> (f64, [f64; 3], [f64; 3]) {
    let (p_lo, p_hi, g_lo, g_hi) = (pred.min(), pred.max(), gt.min(), gt.max());
    let overlap = [0, 1, 2].map(|a| (p_hi[a].min(g_hi[a]) - p_lo[a].max(g_lo[a])).max(0.0));
    let inter: f64 = overlap.iter().product();
    let vp = pred.volume();
    let union = vp + gt.volume() - inter;
    let iou = inter / union;
    let enclose = [0, 1, 2].map(|a| p_hi[a].max(g_hi[a]) - p_lo[a].min(g_lo[a]));
    let c2: f64 = enclose.iter().map(|e| e * e).sum();
    let delta = [0, 1, 2].map(|a| pred.center[a] - gt.center[a]);
    let d2: f64 = delta.iter().map(|d| d * d).sum();

    let mut g_center = [0.0; 3];
    let mut g_size = [0.0; 3];
    for a in 0..3 {
        let others = |v: &[f64; 3]| -> f64 { (0..3).filter(|&b| b != a).map(|b| v[b]).product() };
        // Derivatives with respect to this axis' low and high faces.
        let (mut di_lo, mut di_hi) = (0.0, 0.0);
        if overlap[a] > 0.0 {
            let rest = others(&overlap);
            if p_hi[a] < g_hi[a] {
                di_hi = rest;
            }
            if p_lo[a] > g_lo[a] {
                di_lo = -rest;
            }
        }
        let dv = others(&pred.size);
        let (dv_lo, dv_hi) = (-dv, dv);
        let diou_lo = (di_lo * union - inter * (dv_lo - di_lo)) / (union * union);
        let diou_hi = (di_hi * union - inter * (dv_hi - di_hi)) / (union * union);
        let de_hi = if p_hi[a] > g_hi[a] { 1.0 } else { 0.0 };
        let de_lo = if p_lo[a] < g_lo[a] { -1.0 } else { 0.0 };
        let dc2_lo = 2.0 * enclose[a] * de_lo;
        let dc2_hi = 2.0 * enclose[a] * de_hi;
        let pen_lo = -d2 * dc2_lo / (c2 * c2);
        let pen_hi = -d2 * dc2_hi / (c2 * c2);
        let pen_center = 2.0 * delta[a] / c2;
        // lo = c − s/2, hi = c + s/2.
        g_center[a] = (diou_lo + diou_hi) - (pen_lo + pen_hi) - pen_center;
        g_size[a] = 0.5 * (diou_hi - diou_lo) - 0.5 * (pen_hi - pen_lo);
    }
    (iou - d2 / c2, g_center, g_size)
}

/// Two-term focal matching cost of the ground-truth class probability;
/// lower is a better match.
pub fn focal_cost(p: f64, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let pos = alpha * (1.0 - p).powf(gamma) * -p.ln();
    let neg = (1.0 - alpha) * p.powf(gamma) * -(1.0 - p).ln();
    pos - neg
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub proposals: usize,
    pub gts: usize,
    /// Row-major `P×G`; `+∞` where the proposal is outside the box.
    pub values: Vec<f64>,
    pub inside: Vec<bool>,
}

impl CostMatrix {
    pub fn get(&self, p: usize, g: usize) -> f64 {
        self.values[p * self.gts + g]
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }
}

/// What the cost matrix needs to know about each proposal.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalView {
    pub centroid: [f64; 3],
    pub bbox: Box3,
    /// Per-class probabilities after the sigmoid.
    pub class_probs: Vec<f64>,
}

pub fn build_cost_matrix(proposals: &[ProposalView], gts: &[LabeledBox], lambda_cls: f64, lambda_reg: f64) -> CostMatrix {
    let (p, g) = (proposals.len(), gts.len());
    let mut values = vec![f64::INFINITY; p * g];
    let mut inside = vec![false; p * g];
    for (i, prop) in proposals.iter().enumerate() {
        for (k, gt) in gts.iter().enumerate() {
            if !gt.bbox.contains(prop.centroid) {
                continue;
            }
            let prob = prop.class_probs.get(gt.class_id).copied().unwrap_or(0.0);
            let cls = focal_cost(prob, FOCAL_ALPHA, FOCAL_GAMMA);
            values[i * g + k] = lambda_cls * cls - lambda_reg * diou(&prop.bbox, &gt.bbox);
            inside[i * g + k] = true;
        }
    }
    CostMatrix {
        proposals: p,
        gts: g,
        values,
        inside,
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Assignment {
    /// Matched ground truth per proposal, `None` for negatives.
    pub matched: Vec<Option<usize>>,
    /// Positive proposals per ground truth in ascending cost order.
    pub positives: Vec<Vec<usize>>,
    /// Cost of each `(gt, proposal)` positive, aligned with `positives`.
    pub costs: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct AssignmentJson {
    positives: Vec<(usize, usize, f64)>,
}

impl Assignment {
    pub fn positive_count(&self) -> usize {
        self.positives.iter().map(Vec::len).sum()
    }

    /// `(gt, proposal)` pairs, ground truths in order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.positives
            .iter()
            .enumerate()
            .flat_map(|(g, ps)| ps.iter().map(move |&p| (g, p)))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let positives = self
            .positives
            .iter()
            .zip(&self.costs)
            .enumerate()
            .flat_map(|(g, (ps, cs))| ps.iter().zip(cs).map(move |(&p, &c)| (g, p, c)))
            .collect();
        let mut s = serde_json::to_string_pretty(&AssignmentJson { positives })?;
        s.push('\n');
        Ok(s)
    }
}

/// Top-`r` lowest finite costs per ground truth (ties → lower proposal
/// index). A proposal selected by several ground truths keeps the one with
/// the lower cost (ties → lower gt index) and leaves the others without
/// replacement.
pub fn multiple_match(costs: &CostMatrix, r: usize) -> Assignment {
    let (p, g) = (costs.proposals, costs.gts);
    let mut picked: Vec<Vec<usize>> = Vec::with_capacity(g);
    for k in 0..g {
        let mut cand: Vec<usize> = (0..p).filter(|&i| costs.get(i, k).is_finite()).collect();
        cand.sort_by(|&a, &b| costs.get(a, k).total_cmp(&costs.get(b, k)).then(a.cmp(&b)));
        cand.truncate(r);
        picked.push(cand);
    }
    let mut matched: Vec<Option<usize>> = vec![None; p];
    for (k, list) in picked.iter().enumerate() {
        for &i in list {
            matched[i] = match matched[i] {
                Some(prev) if costs.get(i, prev) <= costs.get(i, k) => Some(prev),
                _ => Some(k),
            };
        }
    }
    let positives: Vec<Vec<usize>> = picked
        .iter()
        .enumerate()
        .map(|(k, list)| list.iter().copied().filter(|&i| matched[i] == Some(k)).collect())
        .collect();
    let costs_out = positives
        .iter()
        .enumerate()
        .map(|(k, list)| list.iter().map(|&i| costs.get(i, k)).collect())
        .collect();
    Assignment {
        matched,
        positives,
        costs: costs_out,
    }
}

/// Cube root of the per-axis ratio of the nearer to the farther face
/// distance.
pub fn centerness_target(position: [f64; 3], bbox: &Box3) -> Result<f64> {
    if !bbox.contains(position) {
        return Err(Error::InvalidArgument {
            arg: "position",
            reason: "outside the box".into(),
        });
    }
    let (lo, hi) = (bbox.min(), bbox.max());
    let mut prod = 1.0;
    for a in 0..3 {
        let (d0, d1) = (position[a] - lo[a], hi[a] - position[a]);
        prod *= d0.min(d1) / d0.max(d1);
    }
    Ok(prod.cbrt())
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Sigmoid focal loss summed over all entries; `targets` is 0/1.
/// Returns the value and the gradient with respect to the logits.
pub fn sigmoid_focal_loss(logits: &Tensor, targets: &Tensor, alpha: f64, gamma: f64) -> (f64, Tensor) {
    let mut grad = Tensor::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (i, (&z, &t)) in logits.data().iter().zip(targets.data()).enumerate() {
        let p = sigmoid(z);
        let (log_p, log_q) = (-softplus(-z), -softplus(z));
        let (loss, g) = if t > 0.5 {
            let q = 1.0 - p;
            (alpha * q.powf(gamma) * -log_p, alpha * q.powf(gamma) * (gamma * p * log_p - q))
        } else {
            (
                (1.0 - alpha) * p.powf(gamma) * -log_q,
                (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * log_q),
            )
        };
        total += loss;
        grad.data_mut()[i] = g;
    }
    (total, grad)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub vote: f64,
    pub cntr: f64,
    pub bbox: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            vote: 1.0,
            cntr: 1.0,
            bbox: 1.0,
            cls: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub vote: f64,
    pub cntr: f64,
    #[serde(rename = "box")]
    pub bbox: f64,
    pub cls: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Per-positive centerness targets, aligned with `assignment.pairs()`.
pub fn centerness_targets(centroids: &Tensor, assignment: &Assignment, gts: &[LabeledBox]) -> Result<Vec<f64>> {
    assignment
        .pairs()
        .into_iter()
        .map(|(g, p)| {
            let c = centroids.row(p);
            centerness_target([c[0], c[1], c[2]], &gts[g].bbox)
        })
        .collect()
}

/// Weighted sum of the vote, centerness, box and classification losses.
///
/// `boxes` are the decoded `L×6` proposal boxes, `cls` the `L×K` logits and
/// `cntr` the `L×1` centerness logits. `cntr_targets` follows
/// `assignment.pairs()`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    cls: Var,
    boxes: Var,
    cntr: Var,
    vote: Var,
    assignment: &Assignment,
    cntr_targets: &[f64],
    gts: &[LabeledBox],
    weights: &LossWeights,
) -> Result<LossVars> {
    let pairs = assignment.pairs();
    if cntr_targets.len() != pairs.len() {
        return Err(Error::shape("total_loss", pairs.len(), cntr_targets.len()));
    }
    let logits = tape.value(cls);
    let (l, k) = logits.shape();
    if tape.value(boxes).shape() != (l, 6) || tape.value(cntr).shape() != (l, 1) {
        return Err(Error::shape(
            "total_loss",
            format!("{l}x6 boxes and {l}x1 centerness"),
            format!("{:?} / {:?}", tape.value(boxes).shape(), tape.value(cntr).shape()),
        ));
    }
    let positives = pairs.len();
    let norm = positives.max(1) as f64;

    let mut targets = Tensor::zeros(l, k);
    for &(g, p) in &pairs {
        let c = gts[g].class_id;
        if c >= k {
            return Err(Error::LabelOutOfRange {
                op: "total_loss",
                label: c,
                count: k,
            });
        }
        targets.set(p, c, 1.0);
    }
    let (cls_sum, cls_grad) = sigmoid_focal_loss(logits, &targets, FOCAL_ALPHA, FOCAL_GAMMA);
    let l_cls = cls_sum / norm;
    let cls_var = tape.scalar_op(vec![cls], l_cls, vec![cls_grad.scale(1.0 / norm)])?;

    let box_values = tape.value(boxes);
    let mut box_grad = Tensor::zeros(l, 6);
    let mut box_sum = 0.0;
    for &(g, p) in &pairs {
        let (d, gc, gs) = diou_with_grad(&box_row(box_values, p), &gts[g].bbox);
        box_sum += 1.0 - d;
        for a in 0..3 {
            box_grad.data_mut()[p * 6 + a] -= gc[a] / norm;
            box_grad.data_mut()[p * 6 + 3 + a] -= gs[a] / norm;
        }
    }
    let l_box = if positives > 0 { box_sum / norm } else { 0.0 };
    let box_var = tape.scalar_op(vec![boxes], l_box, vec![box_grad])?;

    let z = tape.value(cntr);
    let mut cntr_grad = Tensor::zeros(l, 1);
    let mut cntr_sum = 0.0;
    for (&(_, p), &t) in pairs.iter().zip(cntr_targets) {
        let zi = z.get(p, 0);
        let entropy = if t > 0.0 && t < 1.0 {
            -(t * t.ln() + (1.0 - t) * (1.0 - t).ln())
        } else {
            0.0
        };
        cntr_sum += softplus(zi) - t * zi - entropy;
        cntr_grad.data_mut()[p] += (sigmoid(zi) - t) / norm;
    }
    let l_cntr = cntr_sum / norm;
    let cntr_var = tape.scalar_op(vec![cntr], l_cntr, vec![cntr_grad])?;

    let l_vote = tape.value(vote).item();
    let terms = [
        (vote, weights.vote),
        (cntr_var, weights.cntr),
        (box_var, weights.bbox),
        (cls_var, weights.cls),
    ];
    let mut total = tape.scale(terms[0].0, terms[0].1);
    for &(v, w) in &terms[1..] {
        let s = tape.scale(v, w);
        total = tape.add(total, s)?;
    }
    let breakdown = LossBreakdown {
        total: tape.value(total).item(),
        vote: l_vote,
        cntr: l_cntr,
        bbox: l_box,
        cls: l_cls,
    };
    Ok(LossVars { total, breakdown })
}
