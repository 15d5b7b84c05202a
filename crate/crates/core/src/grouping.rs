//! Superpoint grouping: initial superpoint features, attention over the
//! k nearest superpoints, superpoint-voxel fusion and the iterated stack
//! whose per-iteration outputs feed the head.

use rand::Rng;

use crate::autodiff::tensor::gemm_raw;
use crate::autodiff::{column_sums, Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::superpoint::{knn_superpoints, NeighbourTable};
use crate::voting::MergedSet;
use crate::voxel::{assign_voxels, scatter_mean, scatter_mean_var, KernelExtent, Rulebook};

/// Extra columns appended to the pooled features in [`init_hidden`]: the
/// centroid and its normalized copy.
pub const HIDDEN_EXTRA: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoftmaxMode {
    /// Channel-summed logit, one weight per neighbour.
    Scalar,
    /// Independent softmax per channel.
    PerChannel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupingConfig {
    /// Merged-set feature width.
    pub channels: usize,
    pub iterations: usize,
    /// Attention output width per iteration.
    pub widths: Vec<usize>,
    pub k: usize,
    pub fusion_voxel_size: f64,
    pub kernel: KernelExtent,
    pub softmax: SoftmaxMode,
    /// When false, attention reduces to `layer_norm(residual(s^f))`.
    pub attention: bool,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            iterations: 3,
            widths: vec![64, 128, 128],
            k: 8,
            fusion_voxel_size: 0.04,
            kernel: KernelExtent::Cube3,
            softmax: SoftmaxMode::Scalar,
            attention: true,
        }
    }
}

impl GroupingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument {
                arg: "iterations",
                reason: "must be at least 1".into(),
            });
        }
        if self.widths.len() < self.iterations {
            return Err(Error::InvalidArgument {
                arg: "widths",
                reason: format!("{} widths for {} iterations", self.widths.len(), self.iterations),
            });
        }
        if self.k == 0 || self.channels == 0 || self.widths.contains(&0) {
            return Err(Error::InvalidArgument {
                arg: "grouping",
                reason: "k, channels and widths must be positive".into(),
            });
        }
        Ok(())
    }

    /// Attention input width of iteration `i`.
    pub fn input_width(&self, i: usize) -> usize {
        if i == 0 {
            self.channels + HIDDEN_EXTRA
        } else {
            self.channels
        }
    }

    pub fn head_width(&self) -> usize {
        self.input_width(0) + self.widths[..self.iterations].iter().sum::<usize>()
    }

    /// Iterations whose fusion output is consumed by a later iteration.
    pub fn fused_iterations(&self) -> usize {
        self.iterations - 1
    }
}

pub fn init_grouping_params<R: Rng>(store: &mut ParamStore, config: &GroupingConfig, rng: &mut R) -> Result<()> {
    config.validate()?;
    let c = config.channels;
    for i in 0..config.iterations {
        let (w_in, d) = (config.input_width(i), config.widths[i]);
        let p = format!("group{i}");
        store.init_linear(&format!("{p}.coord"), 3, d, rng)?;
        store.init_linear(&format!("{p}.feat"), w_in, d, rng)?;
        store.init_linear(&format!("{p}.value"), w_in, d, rng)?;
        if w_in != d {
            store.init_linear(&format!("{p}.residual"), w_in, d, rng)?;
        }
        store.init_norm(&format!("{p}.norm"), d)?;
        if i < config.fused_iterations() {
            store.init_linear(&format!("{p}.fusion.conv"), config.kernel.volume() * (c + d), c, rng)?;
            store.init_norm(&format!("{p}.fusion.norm"), c)?;
        }
    }
    Ok(())
}

/// Frame used to express superpoint centroids as features.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneFrame {
    /// Subtracted from centroids before they enter the feature vector.
    pub origin: [f64; 3],
    /// Scene bounding volume for min-max normalization.
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl SceneFrame {
    pub fn translated(&self, t: [f64; 3]) -> Self {
        let add = |p: [f64; 3]| [p[0] + t[0], p[1] + t[1], p[2] + t[2]];
        Self {
            origin: add(self.origin),
            min: add(self.min),
            max: add(self.max),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct InitHidden {
    /// `L×(C+6)`: pooled features, centroid − origin, normalized centroid.
    pub hidden: Var,
    /// `L×3` superpoint centroids of the merged positions.
    pub centroids: Var,
}

/// Pools merged features and positions per superpoint.
pub fn init_hidden(tape: &mut Tape, merged: &MergedSet, count: usize, frame: &SceneFrame) -> Result<InitHidden> {
    let (features, _) = scatter_mean_var(tape, merged.features, &merged.labels, count)?;
    let (centroids, _) = scatter_mean_var(tape, merged.positions, &merged.labels, count)?;

    let shift = tape.constant(Tensor::from_vec(1, 3, frame.origin.map(|v| -v).to_vec())?);
    let eye = tape.constant(Tensor::identity(3));
    let local = tape.linear(centroids, eye, shift)?;

    let mut scale = Tensor::zeros(3, 3);
    let mut offset = Tensor::zeros(1, 3);
    for a in 0..3 {
        let extent = frame.max[a] - frame.min[a];
        if extent > 0.0 {
            scale.set(a, a, 1.0 / extent);
            offset.set(0, a, -frame.min[a] / extent);
        } else {
            offset.set(0, a, 0.5);
        }
    }
    let (scale, offset) = (tape.constant(scale), tape.constant(offset));
    let normalized = tape.linear(centroids, scale, offset)?;
    let hidden = tape.concat_cols(&[features, local, normalized])?;
    Ok(InitHidden { hidden, centroids })
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub features: Var,
    /// Fused weights, `(L·k)×1` (scalar mode) or `(L·k)×D` (per-channel);
    /// rows `[i·k, (i+1)·k)` belong to superpoint `i`.
    pub weights: Option<Var>,
}

/// Neighbour ids row by row, each row sorted ascending so the aggregation
/// order does not depend on the order the table lists them in.
fn sorted_neighbours(table: &NeighbourTable) -> Vec<usize> {
    let mut flat = Vec::with_capacity(table.indices.len());
    for i in 0..table.rows() {
        let mut row = table.row(i).to_vec();
        row.sort_unstable();
        flat.extend(row);
    }
    flat
}

fn residual(tape: &mut Tape, params: &Bound, prefix: &str, features: Var, width: usize) -> Result<Var> {
    if tape.value(features).cols() == width {
        Ok(features)
    } else {
        params.linear(tape, &format!("{prefix}.residual"), features)
    }
}

/// One attention application over `L` superpoints with `table` neighbours.
pub fn superpoint_attention(
    tape: &mut Tape,
    params: &Bound,
    prefix: &str,
    centroids: Var,
    features: Var,
    table: &NeighbourTable,
    mode: SoftmaxMode,
) -> Result<Attention> {
    let l = tape.value(features).rows();
    if table.rows() != l || tape.value(centroids).rows() != l {
        return Err(Error::shape(
            "superpoint_attention",
            format!("{l} neighbour rows and centroids"),
            format!("{} / {}", table.rows(), tape.value(centroids).rows()),
        ));
    }
    let k = table.k;
    let neighbours = sorted_neighbours(table);
    let owners: Vec<usize> = (0..l).flat_map(|i| std::iter::repeat(i).take(k)).collect();

    let s_c = tape.gather_rows(centroids, &owners)?;
    let n_c = tape.gather_rows(centroids, &neighbours)?;
    let d_c = tape.sub(s_c, n_c)?;
    let w_c = params.linear(tape, &format!("{prefix}.coord"), d_c)?;

    let s_f = tape.gather_rows(features, &owners)?;
    let n_f = tape.gather_rows(features, &neighbours)?;
    let d_f = tape.sub(s_f, n_f)?;
    let w_f = params.linear(tape, &format!("{prefix}.feat"), d_f)?;

    let width = tape.value(w_c).cols();
    let product = tape.mul(w_c, w_f)?;
    let temperature = 1.0 / (width as f64).sqrt();
    let values = params.linear(tape, &format!("{prefix}.value"), features)?;
    let values = tape.gather_rows(values, &neighbours)?;
    let (weights, weighted) = match mode {
        SoftmaxMode::Scalar => {
            let logits = tape.row_sum(product);
            let logits = tape.scale(logits, temperature);
            let w = tape.group_softmax(logits, k)?;
            (w, tape.mul_col(values, w)?)
        }
        SoftmaxMode::PerChannel => {
            let logits = tape.scale(product, temperature);
            let w = tape.group_softmax(logits, k)?;
            (w, tape.mul(values, w)?)
        }
    };
    let aggregated = tape.scatter_sum(weighted, &owners, l)?;
    let res = residual(tape, params, prefix, features, width)?;
    let sum = tape.add(aggregated, res)?;
    let out = params.norm(tape, &format!("{prefix}.norm"), sum)?;
    Ok(Attention {
        features: out,
        weights: Some(weights),
    })
}

/// The attention-free stand-in: `layer_norm(residual(s^f))`.
pub fn identity_attention(tape: &mut Tape, params: &Bound, prefix: &str, features: Var, width: usize) -> Result<Attention> {
    let res = residual(tape, params, prefix, features, width)?;
    let out = params.norm(tape, &format!("{prefix}.norm"), res)?;
    Ok(Attention {
        features: out,
        weights: None,
    })
}

/// Voxelization of the merged positions at the fusion resolution, shared by
/// every fusion step of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionLayout {
    pub element_to_voxel: Vec<usize>,
    pub voxel_count: usize,
    pub rules: Rulebook,
    /// Element labels the layout was built for.
    pub labels: Vec<usize>,
    /// Per voxel, the share of its elements carrying each superpoint label,
    /// as CSR rows into `mix`.
    pub mix_start: Vec<usize>,
    pub mix: Vec<(usize, f64)>,
}

impl FusionLayout {
    pub fn build(positions: &Tensor, labels: &[usize], voxel_size: f64, extent: KernelExtent) -> Result<Self> {
        if positions.rows() == 0 {
            return Err(Error::Empty { op: "superpoint_voxel_fusion" });
        }
        if labels.len() != positions.rows() {
            return Err(Error::shape("FusionLayout::build", positions.rows(), labels.len()));
        }
        let (coords, element_to_voxel) = assign_voxels(positions, voxel_size)?;
        let mut members: Vec<(usize, usize)> = element_to_voxel.iter().copied().zip(labels.iter().copied()).collect();
        members.sort_unstable();
        let mut counts = vec![0usize; coords.len()];
        for &v in &element_to_voxel {
            counts[v] += 1;
        }
        let mut mix_start = vec![0; coords.len() + 1];
        let mut mix: Vec<(usize, f64)> = Vec::new();
        for run in members.chunk_by(|a, b| a == b) {
            let (v, l) = run[0];
            mix.push((l, run.len() as f64 / counts[v] as f64));
            mix_start[v + 1] = mix.len();
        }
        Ok(Self {
            element_to_voxel,
            voxel_count: coords.len(),
            rules: Rulebook::build(&coords, extent),
            labels: labels.to_vec(),
            mix_start,
            mix,
        })
    }

    fn voxel_mix(&self, v: usize) -> &[(usize, f64)] {
        &self.mix[self.mix_start[v]..self.mix_start[v + 1]]
    }
}

/// Sparse conv over voxels whose input is `[f̄_v, Σ_l mix_vl · h_l]`.
///
/// Equal to scattering the broadcast superpoint rows and convolving the
/// concatenation, but the superpoint half is multiplied by the kernel once
/// per superpoint instead of once per voxel pair.
fn factored_fusion_conv(tape: &mut Tape, f: Var, h: Var, layout: &FusionLayout, weights: Var, bias: Var) -> Result<Var> {
    let (tf, th, tw, tb) = (tape.value(f), tape.value(h), tape.value(weights), tape.value(bias));
    let (c, d, c_out) = (tf.cols(), th.cols(), tw.cols());
    let c_in = c + d;
    let vol = layout.rules.extent.volume();
    if tf.rows() != layout.voxel_count || tw.rows() != vol * c_in || tb.shape() != (1, c_out) {
        return Err(Error::shape(
            "superpoint_voxel_fusion",
            format!("{} voxel rows, {}x{} kernel, 1x{} bias", layout.voxel_count, vol * c_in, c_out, c_out),
            format!("{:?} / {:?} / {:?}", tf.shape(), tw.shape(), tb.shape()),
        ));
    }
    if let Some(&(l, _)) = layout.mix.iter().find(|&&(l, _)| l >= th.rows()) {
        return Err(Error::LabelOutOfRange {
            op: "superpoint_voxel_fusion",
            label: l,
            count: th.rows(),
        });
    }
    let l_count = th.rows();
    let block = move |o: usize| o * c_in * c_out;

    // Per-offset superpoint products h · W_o^h, each L×C_out.
    let mut projected = vec![0.0; vol * l_count * c_out];
    for o in 0..vol {
        if layout.rules.pairs[o].is_empty() {
            continue;
        }
        let w_h = &tw.data()[block(o) + c * c_out..block(o + 1)];
        let dst = &mut projected[o * l_count * c_out..(o + 1) * l_count * c_out];
        gemm_raw(l_count, d, c_out, th.data(), d, false, w_h, c_out, false, dst, c_out, 0.0);
    }

    let mut out = Tensor::zeros(layout.voxel_count, c_out);
    for r in 0..out.rows() {
        out.row_mut(r).copy_from_slice(tb.data());
    }
    let mut gathered = Vec::new();
    let mut product = Vec::new();
    for (o, pairs) in layout.rules.pairs.iter().enumerate() {
        if pairs.is_empty() {
            continue;
        }
        gathered.clear();
        for &(src, _) in pairs {
            gathered.extend_from_slice(tf.row(src));
        }
        product.clear();
        product.resize(pairs.len() * c_out, 0.0);
        let w_f = &tw.data()[block(o)..block(o) + c * c_out];
        gemm_raw(pairs.len(), c, c_out, &gathered, c, false, w_f, c_out, false, &mut product, c_out, 0.0);
        let proj = &projected[o * l_count * c_out..(o + 1) * l_count * c_out];
        for (k, &(src, dst)) in pairs.iter().enumerate() {
            let row = out.row_mut(dst);
            for (a, v) in row.iter_mut().zip(&product[k * c_out..(k + 1) * c_out]) {
                *a += v;
            }
            for &(l, share) in layout.voxel_mix(src) {
                for (a, v) in row.iter_mut().zip(&proj[l * c_out..(l + 1) * c_out]) {
                    *a += share * v;
                }
            }
        }
    }

    let (tf, th, tw) = (tf.clone(), th.clone(), tw.clone());
    let layout = layout.clone();
    Ok(tape.push(out, vec![f, h, weights, bias], move |g, need| {
        let mut gf = need[0].then(|| Tensor::zeros(tf.rows(), c));
        let mut gh = need[1].then(|| Tensor::zeros(l_count, d));
        let mut gw = need[2].then(|| Tensor::zeros(vol * c_in, c_out));
        let mut g_sub = Vec::new();
        let mut f_sub = Vec::new();
        let mut tmp = Vec::new();
        let mut g_proj = vec![0.0; l_count * c_out];
        for (o, pairs) in layout.rules.pairs.iter().enumerate() {
            if pairs.is_empty() {
                continue;
            }
            let p = pairs.len();
            g_sub.clear();
            for &(_, dst) in pairs {
                g_sub.extend_from_slice(g.row(dst));
            }
            let w_f = &tw.data()[block(o)..block(o) + c * c_out];
            let w_h = &tw.data()[block(o) + c * c_out..block(o + 1)];
            if let Some(gf) = gf.as_mut() {
                tmp.clear();
                tmp.resize(p * c, 0.0);
                gemm_raw(p, c_out, c, &g_sub, c_out, false, w_f, c_out, true, &mut tmp, c, 0.0);
                for (k, &(src, _)) in pairs.iter().enumerate() {
                    for (a, v) in gf.row_mut(src).iter_mut().zip(&tmp[k * c..(k + 1) * c]) {
                        *a += v;
                    }
                }
            }
            if let Some(gw) = gw.as_mut() {
                f_sub.clear();
                for &(src, _) in pairs {
                    f_sub.extend_from_slice(tf.row(src));
                }
                let gw_f = &mut gw.data_mut()[block(o)..block(o) + c * c_out];
                gemm_raw(c, p, c_out, &f_sub, c, true, &g_sub, c_out, false, gw_f, c_out, 0.0);
            }
            if gh.is_some() || gw.is_some() {
                g_proj.iter_mut().for_each(|v| *v = 0.0);
                for (k, &(src, _)) in pairs.iter().enumerate() {
                    let gk = &g_sub[k * c_out..(k + 1) * c_out];
                    for &(l, share) in layout.voxel_mix(src) {
                        for (a, v) in g_proj[l * c_out..(l + 1) * c_out].iter_mut().zip(gk) {
                            *a += share * v;
                        }
                    }
                }
                if let Some(gh) = gh.as_mut() {
                    gemm_raw(l_count, c_out, d, &g_proj, c_out, false, w_h, c_out, true, gh.data_mut(), d, 1.0);
                }
                if let Some(gw) = gw.as_mut() {
                    let gw_h = &mut gw.data_mut()[block(o) + c * c_out..block(o + 1)];
                    gemm_raw(d, l_count, c_out, th.data(), d, true, &g_proj, c_out, false, gw_h, c_out, 0.0);
                }
            }
        }
        let gb = need[3].then(|| column_sums(g));
        vec![gf, gh, gw, gb]
    }))
}

/// Broadcast, concat, revoxelize, sparse conv + norm + elu, and map back to
/// the merged elements. Returns the refined `E×C` merged features.
pub fn superpoint_voxel_fusion(
    tape: &mut Tape,
    params: &Bound,
    prefix: &str,
    superpoint_features: Var,
    merged_features: Var,
    labels: &[usize],
    layout: &FusionLayout,
) -> Result<Var> {
    if labels.len() != tape.value(merged_features).rows() || layout.labels != labels {
        return Err(Error::shape(
            "superpoint_voxel_fusion",
            format!("{} labels matching the layout", tape.value(merged_features).rows()),
            format!("{} labels", labels.len()),
        ));
    }
    let (voxels, _) = scatter_mean_var(tape, merged_features, &layout.element_to_voxel, layout.voxel_count)?;
    let w = params.get(&format!("{prefix}.conv.weight"))?;
    let b = params.get(&format!("{prefix}.conv.bias"))?;
    let conv = factored_fusion_conv(tape, voxels, superpoint_features, layout, w, b)?;
    let conv = params.norm(tape, &format!("{prefix}.norm"), conv)?;
    let conv = tape.elu(conv);
    tape.gather_rows(conv, &layout.element_to_voxel)
}

/// Discrete structure of one forward pass; can be frozen and reused so the
/// stack is a smooth function of its inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupingLayout {
    pub neighbours: NeighbourTable,
    pub fusion: FusionLayout,
}

impl GroupingLayout {
    pub fn build(centroids: &Tensor, positions: &Tensor, labels: &[usize], config: &GroupingConfig) -> Result<Self> {
        let points: Vec<[f64; 3]> = (0..centroids.rows())
            .map(|r| {
                let c = centroids.row(r);
                [c[0], c[1], c[2]]
            })
            .collect();
        Ok(Self {
            neighbours: knn_superpoints(&points, config.k)?,
            fusion: FusionLayout::build(positions, labels, config.fusion_voxel_size, config.kernel)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct GroupingOutput {
    pub init: InitHidden,
    /// Attention output per iteration.
    pub outputs: Vec<Var>,
    pub weights: Vec<Option<Var>>,
    /// `concat(init.hidden, outputs…)`.
    pub head_input: Var,
    pub layout: GroupingLayout,
}

pub fn run_grouping_stack(
    tape: &mut Tape,
    params: &Bound,
    merged: &MergedSet,
    count: usize,
    frame: &SceneFrame,
    config: &GroupingConfig,
    frozen: Option<&GroupingLayout>,
) -> Result<GroupingOutput> {
    config.validate()?;
    let init = init_hidden(tape, merged, count, frame)?;
    let layout = match frozen {
        Some(l) => l.clone(),
        None => GroupingLayout::build(tape.value(init.centroids), tape.value(merged.positions), &merged.labels, config)?,
    };
    let mut outputs = Vec::with_capacity(config.iterations);
    let mut weights = Vec::with_capacity(config.iterations);
    let mut state = init.hidden;
    let mut merged_features = merged.features;
    for i in 0..config.iterations {
        let prefix = format!("group{i}");
        let width = config.widths[i];
        let att = if config.attention {
            superpoint_attention(tape, params, &prefix, init.centroids, state, &layout.neighbours, config.softmax)?
        } else {
            identity_attention(tape, params, &prefix, state, width)?
        };
        outputs.push(att.features);
        weights.push(att.weights);
        if i < config.fused_iterations() {
            merged_features = superpoint_voxel_fusion(
                tape,
                params,
                &format!("{prefix}.fusion"),
                att.features,
                merged_features,
                &merged.labels,
                &layout.fusion,
            )?;
            state = scatter_mean_var(tape, merged_features, &merged.labels, count)?.0;
        }
    }
    let mut parts = vec![init.hidden];
    parts.extend(&outputs);
    let head_input = tape.concat_cols(&parts)?;
    Ok(GroupingOutput {
        init,
        outputs,
        weights,
        head_input,
        layout,
    })
}

/// Plain-tensor pooled features, for checks that do not need a tape.
pub fn pooled_features(features: &Tensor, labels: &[usize], count: usize) -> Result<Tensor> {
    Ok(scatter_mean(features, labels, count)?.values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{finite_diff_check_params, DEFAULT_STEP, DEFAULT_TOL};
    use crate::autodiff::{elu, NORM_EPS};
    use crate::voting::Source;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn small_config() -> GroupingConfig {
        GroupingConfig {
            channels: 3,
            iterations: 2,
            widths: vec![3, 4],
            k: 2,
            fusion_voxel_size: 0.5,
            ..Default::default()
        }
    }

    fn frame() -> SceneFrame {
        SceneFrame {
            origin: [-1.0; 3],
            min: [-1.0; 3],
            max: [1.0; 3],
        }
    }

    fn merged(tape: &mut Tape, pos: &Tensor, feat: &Tensor, labels: &[usize], leaf: bool) -> MergedSet {
        let (p, f) = if leaf {
            (tape.leaf(pos.clone()), tape.leaf(feat.clone()))
        } else {
            (tape.constant(pos.clone()), tape.constant(feat.clone()))
        };
        MergedSet {
            positions: p,
            features: f,
            labels: labels.to_vec(),
            source: vec![Source::Seed; labels.len()],
        }
    }

    #[test]
    fn default_widths() {
        let c = GroupingConfig::default();
        assert_eq!(c.input_width(0), 70);
        assert_eq!(c.head_width(), 390);
        let one = GroupingConfig {
            iterations: 1,
            widths: vec![64],
            ..Default::default()
        };
        assert_eq!(one.head_width(), 134);
        let short = GroupingConfig {
            widths: vec![64, 128],
            ..Default::default()
        };
        assert!(short.validate().is_err());
    }

    #[test]
    fn init_hidden_single_superpoint_at_center() {
        let mut tape = Tape::new();
        let pos = Tensor::from_rows(&[[0.0, 0.0, 0.0]]).unwrap();
        let m = merged(&mut tape, &pos, &Tensor::zeros(1, 64), &[0], false);
        let h = init_hidden(&mut tape, &m, 1, &frame()).unwrap();
        let row = tape.value(h.hidden).row(0).to_vec();
        assert_eq!(row.len(), 70);
        assert_eq!(&row[64..67], &[1.0, 1.0, 1.0]);
        assert_eq!(&row[67..], &[0.5, 0.5, 0.5]);

        let flat = SceneFrame {
            origin: [0.0; 3],
            min: [0.0, -1.0, 2.0],
            max: [0.0, 1.0, 2.0],
        };
        let h = init_hidden(&mut tape, &m, 1, &flat).unwrap();
        assert_eq!(&tape.value(h.hidden).row(0)[67..], &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn init_hidden_pools_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pos = random(9, 3, &mut rng);
        let feat = random(9, 64, &mut rng);
        let labels: Vec<usize> = (0..9).map(|i| i % 4).collect();
        let mut tape = Tape::new();
        let m = merged(&mut tape, &pos, &feat, &labels, false);
        let h = init_hidden(&mut tape, &m, 4, &frame()).unwrap();
        let hv = tape.value(h.hidden);
        for g in 0..4 {
            let members: Vec<usize> = (0..9).filter(|&i| labels[i] == g).collect();
            for c in 0..64 {
                let mean = members.iter().map(|&i| feat.get(i, c)).sum::<f64>() / members.len() as f64;
                assert!((hv.get(g, c) - mean).abs() < 1e-12);
            }
        }
    }

    fn attention_store(w_in: usize, d: usize, seed: u64) -> ParamStore {
        let config = GroupingConfig {
            channels: w_in - HIDDEN_EXTRA,
            iterations: 1,
            widths: vec![d],
            ..Default::default()
        };
        let mut s = ParamStore::new();
        init_grouping_params(&mut s, &config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        s
    }

    #[test]
    fn single_neighbour_weight_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = attention_store(8, 5, 0);
        let mut tape = Tape::new();
        let b = s.bind(&mut tape);
        let c = tape.constant(random(3, 3, &mut rng));
        let f = tape.constant(random(3, 8, &mut rng));
        let table = knn_superpoints(&[[0.0; 3], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]], 1).unwrap();
        let a = superpoint_attention(&mut tape, &b, "group0", c, f, &table, SoftmaxMode::Scalar).unwrap();
        assert!(tape.value(a.weights.unwrap()).data().iter().all(|&w| w == 1.0));

        // Oracle: layer_norm(linear(n^f) + residual(s^f)).
        let tf = tape.value(f).clone();
        let lin = |name: &str, x: &Tensor| {
            let mut y = x.matmul(s.get(&format!("group0.{name}.weight")).unwrap());
            for r in 0..y.rows() {
                for (v, bias) in y.row_mut(r).iter_mut().zip(s.get(&format!("group0.{name}.bias")).unwrap().data()) {
                    *v += bias;
                }
            }
            y
        };
        let expect = lin("value", &tf.gather_rows(&table.indices)).zip_map(&lin("residual", &tf), |a, b| a + b);
        for r in 0..3 {
            let row = expect.row(r);
            let mean = row.iter().sum::<f64>() / 5.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0;
            for c in 0..5 {
                let want = (row[c] - mean) / (var + NORM_EPS).sqrt();
                assert!((tape.value(a.features).get(r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_logits_give_uniform_weights() {
        // Equal features and coincident centroids make every logit zero.
        let s = attention_store(7, 4, 1);
        let mut tape = Tape::new();
        let b = s.bind(&mut tape);
        let c = tape.constant(Tensor::zeros(9, 3));
        let f = tape.constant(Tensor::filled(9, 7, 0.3));
        let table = knn_superpoints(&vec![[0.0; 3]; 9], 8).unwrap();
        let a = superpoint_attention(&mut tape, &b, "group0", c, f, &table, SoftmaxMode::Scalar).unwrap();
        assert!(tape.value(a.weights.unwrap()).data().iter().all(|&w| (w - 0.125).abs() < 1e-15));
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (seed, mode) in [(0, SoftmaxMode::Scalar), (1, SoftmaxMode::Scalar), (2, SoftmaxMode::PerChannel)] {
            let s = attention_store(8, 3, seed);
            let cents = random(5, 3, &mut rng);
            let pts: Vec<[f64; 3]> = (0..5).map(|r| [cents.get(r, 0), cents.get(r, 1), cents.get(r, 2)]).collect();
            let table = knn_superpoints(&pts, 3).unwrap();
            let r = finite_diff_check_params(
                "superpoint_attention",
                |tape, b, v| Ok(superpoint_attention(tape, b, "group0", v[0], v[1], &table, mode)?.features),
                &s,
                &[cents.clone(), random(5, 8, &mut rng)],
                DEFAULT_STEP,
                DEFAULT_TOL,
            )
            .unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    fn fusion_store(c: usize, d: usize, extent: KernelExtent, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        s.init_linear("f.conv", extent.volume() * (c + d), c, &mut rng).unwrap();
        s.init_norm("f.norm", c).unwrap();
        // Random norm affine so the check covers it.
        s.set("f.norm.gain", random(1, c, &mut rng)).unwrap();
        s.set("f.norm.shift", random(1, c, &mut rng)).unwrap();
        s
    }

    #[test]
    fn fusion_single_element_composes_identities() {
        let mut s = fusion_store(2, 2, KernelExtent::Cube3, 0);
        let mut w = Tensor::zeros(27 * 4, 2);
        for c in 0..2 {
            w.set(13 * 4 + c, c, 1.0);
            w.set(13 * 4 + 2 + c, c, 1.0);
        }
        s.set("f.conv.weight", w).unwrap();
        s.set("f.conv.bias", Tensor::zeros(1, 2)).unwrap();
        s.set("f.norm.gain", Tensor::filled(1, 2, 1.0)).unwrap();
        s.set("f.norm.shift", Tensor::zeros(1, 2)).unwrap();
        let mut tape = Tape::new();
        let b = s.bind(&mut tape);
        let sp = tape.constant(Tensor::from_rows(&[[0.5, -1.0]]).unwrap());
        let mf = tape.constant(Tensor::from_rows(&[[2.0, 1.0]]).unwrap());
        let layout = FusionLayout::build(&Tensor::zeros(1, 3), &[0], 0.04, KernelExtent::Cube3).unwrap();
        let out = superpoint_voxel_fusion(&mut tape, &b, "f", sp, mf, &[0], &layout).unwrap();
        // concat (2, 1, 0.5, −1); the kernel adds the halves.
        let sum = [2.5, 0.0];
        let mean = 1.25;
        let var = 1.25f64 * 1.25;
        for c in 0..2 {
            let want = elu((sum[c] - mean) / (var + NORM_EPS).sqrt());
            assert!((tape.value(out).get(0, c) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn coincident_elements_share_refined_features() {
        let s = fusion_store(2, 3, KernelExtent::Cube3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let b = s.bind(&mut tape);
        let sp = tape.constant(random(2, 3, &mut rng));
        let mf = tape.constant(random(2, 2, &mut rng));
        let pos = Tensor::from_rows(&[[0.1, 0.1, 0.1], [0.1, 0.1, 0.1]]).unwrap();
        let layout = FusionLayout::build(&pos, &[0, 1], 0.04, KernelExtent::Cube3).unwrap();
        let out = superpoint_voxel_fusion(&mut tape, &b, "f", sp, mf, &[0, 1], &layout).unwrap();
        assert_eq!(tape.value(out).row(0), tape.value(out).row(1));
    }

    #[test]
    fn fusion_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..3 {
            let s = fusion_store(3, 2, KernelExtent::Cube3, seed);
            let pos = random(10, 3, &mut rng).scale(0.08);
            let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
            let layout = FusionLayout::build(&pos, &labels, 0.04, KernelExtent::Cube3).unwrap();
            let r = finite_diff_check_params(
                "superpoint_voxel_fusion",
                |tape, b, v| superpoint_voxel_fusion(tape, b, "f", v[0], v[1], &labels, &layout),
                &s,
                &[random(3, 2, &mut rng), random(10, 3, &mut rng)],
                DEFAULT_STEP,
                DEFAULT_TOL,
            )
            .unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn factored_fusion_matches_concat_conv() {
        use crate::voxel::sparse_conv3_var;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for seed in 0..3 {
            let (c, d, e, l) = (3, 4, 40, 5);
            let s = fusion_store(c, d, KernelExtent::Cube3, seed);
            // Coarse positions so voxels hold several elements and labels.
            let pos = random(e, 3, &mut rng).scale(0.06);
            let labels: Vec<usize> = (0..e).map(|_| rng.gen_range(0..l)).collect();
            let layout = FusionLayout::build(&pos, &labels, 0.04, KernelExtent::Cube3).unwrap();
            assert!(layout.mix.len() > layout.voxel_count);
            let (sp, mf) = (random(l, d, &mut rng), random(e, c, &mut rng));

            let mut tape = Tape::new();
            let b = s.bind(&mut tape);
            let (sp_v, mf_v) = (tape.leaf(sp.clone()), tape.leaf(mf.clone()));
            let fast = superpoint_voxel_fusion(&mut tape, &b, "f", sp_v, mf_v, &labels, &layout).unwrap();
            let seed_grad = random(e, c, &mut rng);
            let fast_grads = tape.backward_with(fast, seed_grad.clone());

            let mut t2 = Tape::new();
            let b2 = s.bind(&mut t2);
            let (sp2, mf2) = (t2.leaf(sp), t2.leaf(mf));
            let hb = t2.gather_rows(sp2, &labels).unwrap();
            let cat = t2.concat_cols(&[mf2, hb]).unwrap();
            let (vox, _) = scatter_mean_var(&mut t2, cat, &layout.element_to_voxel, layout.voxel_count).unwrap();
            let (w, bias) = (b2.get("f.conv.weight").unwrap(), b2.get("f.conv.bias").unwrap());
            let conv = sparse_conv3_var(&mut t2, vox, &layout.rules, w, bias).unwrap();
            let conv = b2.norm(&mut t2, "f.norm", conv).unwrap();
            let conv = t2.elu(conv);
            let slow = t2.gather_rows(conv, &layout.element_to_voxel).unwrap();
            let slow_grads = t2.backward_with(slow, seed_grad);

            assert!(tape.value(fast).max_abs_diff(t2.value(slow)) < 1e-12);
            for (a, b) in [(sp_v, sp2), (mf_v, mf2)] {
                assert!(fast_grads.get(a).unwrap().max_abs_diff(slow_grads.get(b).unwrap()) < 1e-12);
            }
            let ga = b.grads(&tape, &fast_grads);
            let gb = b2.grads(&t2, &slow_grads);
            for (k, g) in &ga {
                assert!(g.max_abs_diff(&gb[k]) < 1e-12, "{k}");
            }
        }
    }

    /// Random merged set whose labels cover `[0, count)`.
    fn random_scene(rng: &mut ChaCha8Rng, e: usize, count: usize, c: usize) -> (Tensor, Tensor, Vec<usize>) {
        let pos = random(e, 3, rng).scale(0.3);
        let feat = random(e, c, rng);
        let labels = (0..e).map(|i| if i < count { i } else { rng.gen_range(0..count) }).collect();
        (pos, feat, labels)
    }

    #[test]
    fn stack_gradients_with_frozen_layout() {
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for seed in 0..3 {
            let mut s = ParamStore::new();
            init_grouping_params(&mut s, &config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let (pos, feat, labels) = random_scene(&mut rng, 12, 4, 3);
            let mut tape = Tape::new();
            let b = s.bind(&mut tape);
            let m = merged(&mut tape, &pos, &feat, &labels, false);
            let layout = run_grouping_stack(&mut tape, &b, &m, 4, &frame(), &config, None).unwrap().layout;
            let r = finite_diff_check_params(
                "grouping_stack",
                |tape, b, v| {
                    let m = MergedSet {
                        positions: v[0],
                        features: v[1],
                        labels: labels.clone(),
                        source: vec![Source::Seed; labels.len()],
                    };
                    Ok(run_grouping_stack(tape, b, &m, 4, &frame(), &config, Some(&layout))?.head_input)
                },
                &s,
                &[pos, feat],
                DEFAULT_STEP,
                DEFAULT_TOL,
            )
            .unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn every_stack_parameter_gets_gradient() {
        let config = small_config();
        let mut s = ParamStore::new();
        init_grouping_params(&mut s, &config, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (pos, feat, labels) = random_scene(&mut rng, 30, 6, 3);
        let mut tape = Tape::new();
        let b = s.bind(&mut tape);
        let m = merged(&mut tape, &pos, &feat, &labels, true);
        let out = run_grouping_stack(&mut tape, &b, &m, 6, &frame(), &config, None).unwrap();
        let proj = random(6, config.head_width(), &mut rng);
        let loss = tape.weighted_sum(out.head_input, &proj).unwrap();
        let grads = b.grads(&tape, &tape.backward(loss));
        for (name, g) in grads {
            assert!(g.data().iter().any(|&v| v != 0.0), "{name} has zero gradient");
        }
    }

    #[test]
    fn head_width_and_fixed_centroids() {
        let config = GroupingConfig {
            fusion_voxel_size: 0.1,
            ..Default::default()
        };
        let mut s = ParamStore::new();
        init_grouping_params(&mut s, &config, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (pos, feat, labels) = random_scene(&mut rng, 40, 10, 64);
        let mut tape = Tape::new();
        let b = s.bind(&mut tape);
        let m = merged(&mut tape, &pos, &feat, &labels, false);
        let before = pooled_features(&pos, &labels, 10).unwrap();
        let out = run_grouping_stack(&mut tape, &b, &m, 10, &frame(), &config, None).unwrap();
        assert_eq!(tape.value(out.head_input).shape(), (10, 390));
        assert_eq!(tape.value(out.init.centroids), &before);
        assert_eq!(tape.value(m.positions), &pos);
    }

    #[test]
    fn attention_ablation_skips_weights() {
        let config = GroupingConfig {
            attention: false,
            ..small_config()
        };
        let mut s = ParamStore::new();
        init_grouping_params(&mut s, &config, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (pos, feat, labels) = random_scene(&mut rng, 12, 4, 3);
        let mut tape = Tape::new();
        let b = s.bind(&mut tape);
        let m = merged(&mut tape, &pos, &feat, &labels, false);
        let out = run_grouping_stack(&mut tape, &b, &m, 4, &frame(), &config, None).unwrap();
        assert!(out.weights.iter().all(Option::is_none));
        assert!(tape.value(out.head_input).all_finite());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn weights_are_simplex_and_order_free(seed in 0u64..10_000, l in 1usize..12, k in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = attention_store(8, 4, seed);
            let cents = random(l, 3, &mut rng);
            let pts: Vec<[f64; 3]> = (0..l).map(|r| [cents.get(r, 0), cents.get(r, 1), cents.get(r, 2)]).collect();
            let table = knn_superpoints(&pts, k).unwrap();
            let feats = random(l, 8, &mut rng);
            let run = |table: &NeighbourTable| {
                let mut tape = Tape::new();
                let b = s.bind(&mut tape);
                let c = tape.constant(cents.clone());
                let f = tape.constant(feats.clone());
                let a = superpoint_attention(&mut tape, &b, "group0", c, f, table, SoftmaxMode::Scalar).unwrap();
                (tape.value(a.features).clone(), tape.value(a.weights.unwrap()).clone())
            };
            let (out, w) = run(&table);
            for i in 0..l {
                let row = &w.data()[i * k..(i + 1) * k];
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            let mut shuffled = table.clone();
            for i in 0..l {
                shuffled.indices[i * k..(i + 1) * k].reverse();
            }
            prop_assert_eq!(run(&shuffled).0, out);
        }

        #[test]
        fn attention_is_translation_invariant(seed in 0u64..10_000, t in prop::array::uniform3(-50.0f64..50.0)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = attention_store(8, 4, seed);
            // Centroids on a 1/8 grid keep the shifted differences exact.
            let cents = Tensor::from_vec(6, 3, (0..18).map(|_| rng.gen_range(-8..8) as f64 / 8.0).collect()).unwrap();
            let shift = t.map(|v| (v * 8.0).round() / 8.0);
            let moved = Tensor::from_vec(6, 3, (0..18).map(|i| cents.data()[i] + shift[i % 3]).collect()).unwrap();
            let pts: Vec<[f64; 3]> = (0..6).map(|r| [cents.get(r, 0), cents.get(r, 1), cents.get(r, 2)]).collect();
            let table = knn_superpoints(&pts, 3).unwrap();
            let feats = random(6, 8, &mut rng);
            let run = |c: &Tensor| {
                let mut tape = Tape::new();
                let b = s.bind(&mut tape);
                let c = tape.constant(c.clone());
                let f = tape.constant(feats.clone());
                let a = superpoint_attention(&mut tape, &b, "group0", c, f, &table, SoftmaxMode::Scalar).unwrap();
                tape.value(a.features).clone()
            };
            prop_assert_eq!(run(&cents), run(&moved));
        }
    }
}
