//! Geometry-aware voting: per-seed coordinate and feature offsets, vote
//! voxels, the merged seed+vote set and the vote regression loss.

use rand::Rng;

use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scene::LabeledBox;

pub const VOTE_HIDDEN_LAYERS: usize = 3;

/// Registers the vote branch: three `C→C` linear+norm+elu layers and a
/// final `C→C+3` linear.
pub fn init_vote_params<R: Rng>(store: &mut ParamStore, channels: usize, rng: &mut R) -> Result<()> {
    for i in 0..VOTE_HIDDEN_LAYERS {
        let prefix = format!("vote.hidden{i}");
        store.init_linear(&prefix, channels, channels, rng)?;
        store.init_norm(&format!("{prefix}.norm"), channels)?;
    }
    store.init_linear("vote.out", channels, channels + 3, rng)?;
    // Coordinate offsets start at zero.
    for name in ["vote.out.weight", "vote.out.bias"] {
        let mut t = store.get(name).expect("just inserted").clone();
        for r in 0..t.rows() {
            for c in 0..3 {
                t.set(r, c, 0.0);
            }
        }
        store.set(name, t)?;
    }
    Ok(())
}

/// Offsets on the tape: `coord` is `M×3`, `feature` is `M×C`.
#[derive(Clone, Copy, Debug)]
pub struct VoteOutput {
    pub coord: Var,
    pub feature: Var,
    /// The raw `M×(C+3)` branch output before splitting.
    pub raw: Var,
}

pub fn vote_branch(tape: &mut Tape, params: &Bound, seed_features: Var) -> Result<VoteOutput> {
    let mut h = seed_features;
    for i in 0..VOTE_HIDDEN_LAYERS {
        h = params.linear_norm_elu(tape, &format!("vote.hidden{i}"), h)?;
    }
    let raw = params.linear(tape, "vote.out", h)?;
    let width = tape.value(raw).cols();
    let channels = tape.value(seed_features).cols();
    if width != channels + 3 {
        return Err(Error::shape("vote_branch", format!("output width {}", channels + 3), width));
    }
    let coord = tape.slice_cols(raw, 0, 3)?;
    let feature = tape.slice_cols(raw, 3, width)?;
    Ok(VoteOutput { coord, feature, raw })
}

/// `o = v + Δv` for positions and features.
pub fn apply_votes(tape: &mut Tape, seed_positions: Var, seed_features: Var, out: &VoteOutput) -> Result<(Var, Var)> {
    let positions = tape.add(seed_positions, out.coord)?;
    let features = tape.add(seed_features, out.feature)?;
    Ok((positions, features))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Seed,
    Vote,
}

/// Elements that are grouped by superpoint. With both halves present, rows
/// `[0, M)` are seeds and rows `[M, 2M)` their votes.
#[derive(Clone, Debug)]
pub struct MergedSet {
    pub positions: Var,
    pub features: Var,
    pub labels: Vec<usize>,
    pub source: Vec<Source>,
}

impl MergedSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Stacks seeds over votes; each vote inherits its seed's label.
pub fn merge_seed_vote(
    tape: &mut Tape,
    seeds: (Var, Var),
    votes: (Var, Var),
    seed_labels: &[usize],
) -> Result<MergedSet> {
    let m = tape.value(seeds.0).rows();
    for (what, v) in [("seed features", seeds.1), ("vote positions", votes.0), ("vote features", votes.1)] {
        if tape.value(v).rows() != m {
            return Err(Error::shape("merge_seed_vote", format!("{m} rows of {what}"), tape.value(v).rows()));
        }
    }
    if seed_labels.len() != m {
        return Err(Error::shape("merge_seed_vote", format!("{m} labels"), seed_labels.len()));
    }
    let positions = tape.concat_rows(&[seeds.0, votes.0])?;
    let features = tape.concat_rows(&[seeds.1, votes.1])?;
    let labels = seed_labels.iter().chain(seed_labels).copied().collect();
    let source = std::iter::repeat(Source::Seed)
        .take(m)
        .chain(std::iter::repeat(Source::Vote).take(m))
        .collect();
    Ok(MergedSet {
        positions,
        features,
        labels,
        source,
    })
}

/// Votes alone, without the seed half.
pub fn votes_only(votes: (Var, Var), seed_labels: &[usize]) -> MergedSet {
    MergedSet {
        positions: votes.0,
        features: votes.1,
        labels: seed_labels.to_vec(),
        source: vec![Source::Vote; seed_labels.len()],
    }
}

/// Regression target per seed: offset to the nearest containing box center,
/// or `None` for seeds outside every box.
pub fn vote_targets(seed_positions: &Tensor, boxes: &[LabeledBox]) -> Vec<Option<[f64; 3]>> {
    (0..seed_positions.rows())
        .map(|r| {
            let p = seed_positions.row(r);
            let p = [p[0], p[1], p[2]];
            let mut best: Option<(f64, [f64; 3])> = None;
            for b in boxes.iter().filter(|b| b.bbox.contains(p)) {
                let d = [0, 1, 2].map(|a| b.bbox.center[a] - p[a]);
                let dist = d.iter().map(|v| v * v).sum::<f64>();
                if best.map_or(true, |(bd, _)| dist < bd) {
                    best = Some((dist, d));
                }
            }
            best.map(|(_, d)| d)
        })
        .collect()
}

/// Huber loss with unit threshold.
#[inline]
pub fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

#[inline]
fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VoteLoss {
    pub value: Var,
    /// Seeds inside at least one box; zero means the loss is identically 0.
    pub supervised: usize,
}

/// Smooth-L1 between predicted coordinate offsets and their targets, summed
/// over axes and averaged over in-box seeds.
pub fn vote_loss(tape: &mut Tape, coord_offsets: Var, seed_positions: &Tensor, boxes: &[LabeledBox]) -> Result<VoteLoss> {
    let pred = tape.value(coord_offsets);
    if pred.shape() != (seed_positions.rows(), 3) || seed_positions.cols() != 3 {
        return Err(Error::shape(
            "vote_loss",
            format!("{}x3", seed_positions.rows()),
            format!("{:?}", pred.shape()),
        ));
    }
    let targets = vote_targets(seed_positions, boxes);
    let supervised = targets.iter().flatten().count();
    let mut grad = Tensor::zeros(pred.rows(), 3);
    let mut total = 0.0;
    if supervised > 0 {
        let inv = 1.0 / supervised as f64;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                for a in 0..3 {
                    let d = pred.get(r, a) - t[a];
                    total += smooth_l1(d);
                    grad.set(r, a, smooth_l1_grad(d) * inv);
                }
            }
        }
        total *= inv;
    }
    let value = tape.scalar_op(vec![coord_offsets], total, vec![grad])?;
    Ok(VoteLoss { value, supervised })
}
