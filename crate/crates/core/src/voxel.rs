//! Sparse hash-grid voxelization, labeled scatter/broadcast reductions and
//! submanifold sparse 3D convolution.

use std::collections::HashMap;

use crate::autodiff::{check_labels, column_sums, scatter_add, Tape, Tensor, Var};
use crate::autodiff::tensor::gemm_raw;
use crate::error::{Error, Result};
use crate::scene::PointCloud;

pub type Coord = [i32; 3];

/// Unique integer voxel coordinates with one feature row each, in
/// canonical `(z, y, x)` lexicographic order.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseVoxelSet {
    pub coords: Vec<Coord>,
    pub features: Tensor,
    pub voxel_size: f64,
    /// Voxel index of every source point/element, when built from one.
    pub point_to_voxel: Option<Vec<usize>>,
}

impl SparseVoxelSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn centers(&self) -> Vec<[f64; 3]> {
        self.coords.iter().map(|&c| voxel_center(c, self.voxel_size)).collect()
    }

    pub fn index(&self) -> HashMap<Coord, usize> {
        self.coords.iter().enumerate().map(|(i, &c)| (c, i)).collect()
    }
}

#[inline]
fn canonical_key(c: &Coord) -> (i32, i32, i32) {
    (c[2], c[1], c[0])
}

#[inline]
pub fn quantize(p: [f64; 3], voxel_size: f64) -> Coord {
    p.map(|v| (v / voxel_size).floor() as i32)
}

/// Continuous position of a voxel: `(coords + 0.5) · voxel_size`.
#[inline]
pub fn voxel_center(coords: Coord, voxel_size: f64) -> [f64; 3] {
    coords.map(|c| (c as f64 + 0.5) * voxel_size)
}

/// Buckets positions into voxels. Returns the canonical coordinate list and
/// the voxel index of every input position.
fn bucket(positions: impl ExactSizeIterator<Item = [f64; 3]>, voxel_size: f64) -> (Vec<Coord>, Vec<usize>) {
    let raw: Vec<Coord> = positions.map(|p| quantize(p, voxel_size)).collect();
    let mut coords = raw.clone();
    coords.sort_unstable_by_key(canonical_key);
    coords.dedup();
    let index: HashMap<Coord, usize> = coords.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let map = raw.iter().map(|c| index[c]).collect();
    (coords, map)
}

fn check_size(voxel_size: f64) -> Result<()> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::InvalidArgument {
            arg: "voxel_size",
            reason: format!("must be positive and finite, got {voxel_size}"),
        });
    }
    Ok(())
}

/// Canonical voxel coordinates of `E×3` positions and each row's voxel.
pub fn assign_voxels(positions: &Tensor, voxel_size: f64) -> Result<(Vec<Coord>, Vec<usize>)> {
    check_size(voxel_size)?;
    if positions.cols() != 3 {
        return Err(Error::shape("assign_voxels", "3 columns", positions.cols()));
    }
    Ok(bucket(
        (0..positions.rows()).map(|r| {
            let p = positions.row(r);
            [p[0], p[1], p[2]]
        }),
        voxel_size,
    ))
}

/// Voxelizes a cloud; each voxel's feature is the mean color of its points.
pub fn voxelize(cloud: &PointCloud, voxel_size: f64) -> Result<SparseVoxelSet> {
    check_size(voxel_size)?;
    if cloud.is_empty() {
        return Err(Error::Empty { op: "voxelize" });
    }
    let (coords, map) = bucket((0..cloud.len()).map(|i| cloud.position(i)), voxel_size);
    let colors = Tensor::from_vec(
        cloud.len(),
        3,
        cloud.colors.iter().flat_map(|c| c.map(f64::from)).collect(),
    )?;
    let features = scatter_mean(&colors, &map, coords.len())?.values;
    Ok(SparseVoxelSet {
        coords,
        features,
        voxel_size,
        point_to_voxel: Some(map),
    })
}

/// Voxelizes arbitrary continuous positions carrying feature rows, averaging
/// features per voxel. The returned map sends every element to its voxel.
pub fn revoxelize(positions: &Tensor, features: &Tensor, voxel_size: f64) -> Result<(SparseVoxelSet, Vec<usize>)> {
    check_size(voxel_size)?;
    if positions.rows() == 0 {
        return Err(Error::Empty { op: "revoxelize" });
    }
    if positions.cols() != 3 || features.rows() != positions.rows() {
        return Err(Error::shape(
            "revoxelize",
            format!("{}x3 positions with matching features", positions.rows()),
            format!("{:?} / {:?}", positions.shape(), features.shape()),
        ));
    }
    let (coords, map) = assign_voxels(positions, voxel_size)?;
    let features = scatter_mean(features, &map, coords.len())?.values;
    Ok((
        SparseVoxelSet {
            coords,
            features,
            voxel_size,
            point_to_voxel: Some(map.clone()),
        },
        map,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScatterMean {
    pub values: Tensor,
    /// Groups without members; their rows are zero.
    pub empty_groups: Vec<usize>,
}

fn group_counts(labels: &[usize], groups: usize) -> Vec<usize> {
    let mut counts = vec![0usize; groups];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}

pub fn scatter_mean(features: &Tensor, labels: &[usize], groups: usize) -> Result<ScatterMean> {
    if features.rows() == 0 {
        return Err(Error::Empty { op: "scatter_mean" });
    }
    check_labels("scatter_mean", features, labels, groups)?;
    let counts = group_counts(labels, groups);
    let mut values = scatter_add(features, labels, groups);
    let mut empty_groups = Vec::new();
    for (g, &n) in counts.iter().enumerate() {
        if n == 0 {
            empty_groups.push(g);
        } else {
            let inv = 1.0 / n as f64;
            values.row_mut(g).iter_mut().for_each(|v| *v *= inv);
        }
    }
    Ok(ScatterMean { values, empty_groups })
}

/// Differentiable [`scatter_mean`]; the backward pass hands each member
/// `1/|group|` of its group's gradient.
pub fn scatter_mean_var(tape: &mut Tape, x: Var, labels: &[usize], groups: usize) -> Result<(Var, Vec<usize>)> {
    let ScatterMean { values, empty_groups } = scatter_mean(tape.value(x), labels, groups)?;
    let counts = group_counts(labels, groups);
    let labels = labels.to_vec();
    let var = tape.push(values, vec![x], move |g, _| {
        let mut out = g.gather_rows(&labels);
        for (r, &l) in labels.iter().enumerate() {
            let inv = 1.0 / counts[l] as f64;
            out.row_mut(r).iter_mut().for_each(|v| *v *= inv);
        }
        vec![Some(out)]
    });
    Ok((var, empty_groups))
}

/// Row `e` of the result is `group_features[labels[e]]`.
pub fn broadcast(group_features: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= group_features.rows()) {
        return Err(Error::LabelOutOfRange {
            op: "broadcast",
            label: bad,
            count: group_features.rows(),
        });
    }
    Ok(group_features.gather_rows(labels))
}

/// Differentiable [`broadcast`]; the backward pass scatter-sums.
pub fn broadcast_var(tape: &mut Tape, group_features: Var, labels: &[usize]) -> Result<Var> {
    tape.gather_rows(group_features, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelExtent {
    /// 3×3×3 neighbourhood.
    Cube3,
    /// Center site only.
    Point,
}

impl KernelExtent {
    /// Offsets `(dz, dy, dx)` in lexicographic order, returned as `[dx, dy, dz]`.
    pub fn offsets(self) -> Vec<Coord> {
        match self {
            KernelExtent::Point => vec![[0, 0, 0]],
            KernelExtent::Cube3 => {
                let mut out = Vec::with_capacity(27);
                for dz in -1..=1 {
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            out.push([dx, dy, dz]);
                        }
                    }
                }
                out
            }
        }
    }

    pub fn volume(self) -> usize {
        match self {
            KernelExtent::Cube3 => 27,
            KernelExtent::Point => 1,
        }
    }
}

/// Sparse convolution weights: offset `o` owns rows `[o·C_in, (o+1)·C_in)`
/// of `weights`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel3 {
    pub extent: KernelExtent,
    pub weights: Tensor,
    pub bias: Tensor,
}

impl ConvKernel3 {
    pub fn in_channels(&self) -> usize {
        self.weights.rows() / self.extent.volume()
    }

    pub fn out_channels(&self) -> usize {
        self.weights.cols()
    }

    /// Center slice = identity, everything else zero.
    pub fn identity(extent: KernelExtent, channels: usize) -> Self {
        let vol = extent.volume();
        let center = vol / 2;
        let mut weights = Tensor::zeros(vol * channels, channels);
        for c in 0..channels {
            weights.set(center * channels + c, c, 1.0);
        }
        Self {
            extent,
            weights,
            bias: Tensor::zeros(1, channels),
        }
    }
}

/// Input/output site pairs per kernel offset for a fixed active set.
#[derive(Clone, Debug, PartialEq)]
pub struct Rulebook {
    pub extent: KernelExtent,
    pub sites: usize,
    /// `pairs[o]` lists `(input site, output site)` with `input = output + offset[o]`.
    pub pairs: Vec<Vec<(usize, usize)>>,
}

impl Rulebook {
    pub fn build(coords: &[Coord], extent: KernelExtent) -> Self {
        let index: HashMap<Coord, usize> = coords.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let pairs = extent
            .offsets()
            .into_iter()
            .map(|o| {
                coords
                    .iter()
                    .enumerate()
                    .filter_map(|(out, c)| {
                        let n = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
                        index.get(&n).map(|&inp| (inp, out))
                    })
                    .collect()
            })
            .collect();
        Self {
            extent,
            sites: coords.len(),
            pairs,
        }
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }
}

fn conv_forward(x: &Tensor, rules: &Rulebook, w: &Tensor, b: &Tensor) -> Tensor {
    let (c_in, c_out) = (x.cols(), w.cols());
    let mut out = Tensor::zeros(x.rows(), c_out);
    for r in 0..out.rows() {
        out.row_mut(r).copy_from_slice(b.data());
    }
    let mut gathered = Vec::new();
    let mut product = Vec::new();
    for (o, pairs) in rules.pairs.iter().enumerate() {
        if pairs.is_empty() {
            continue;
        }
        let w_o = &w.data()[o * c_in * c_out..(o + 1) * c_in * c_out];
        let p = pairs.len();
        gathered.clear();
        for &(inp, _) in pairs {
            gathered.extend_from_slice(x.row(inp));
        }
        product.clear();
        product.resize(p * c_out, 0.0);
        gemm_raw(p, c_in, c_out, &gathered, c_in, false, w_o, c_out, false, &mut product, c_out, 0.0);
        for (k, &(_, dst)) in pairs.iter().enumerate() {
            for (a, v) in out.row_mut(dst).iter_mut().zip(&product[k * c_out..(k + 1) * c_out]) {
                *a += v;
            }
        }
    }
    out
}

/// Differentiable submanifold convolution over the sites described by
/// `rules`. `weights` is `(volume·C_in)×C_out`, `bias` is `1×C_out`.
pub fn sparse_conv3_var(tape: &mut Tape, x: Var, rules: &Rulebook, weights: Var, bias: Var) -> Result<Var> {
    let (tx, tw, tb) = (tape.value(x), tape.value(weights), tape.value(bias));
    let vol = rules.extent.volume();
    if tx.rows() != rules.sites {
        return Err(Error::shape("sparse_conv3", format!("{} sites", rules.sites), tx.rows()));
    }
    if tw.rows() != vol * tx.cols() {
        return Err(Error::shape(
            "sparse_conv3",
            format!("{} weight rows for {} input channels", vol * tx.cols(), tx.cols()),
            tw.rows(),
        ));
    }
    if tb.shape() != (1, tw.cols()) {
        return Err(Error::shape("sparse_conv3", format!("bias 1x{}", tw.cols()), format!("{:?}", tb.shape())));
    }
    let value = conv_forward(tx, rules, tw, tb);
    let tx = tx.clone();
    let tw = tw.clone();
    let rules = rules.clone();
    Ok(tape.push(value, vec![x, weights, bias], move |g, need| {
        let (c_in, c_out) = (tx.cols(), tw.cols());
        let mut gx = need[0].then(|| Tensor::zeros(tx.rows(), c_in));
        let mut gw = need[1].then(|| Tensor::zeros(tw.rows(), c_out));
        let mut g_sub = Vec::new();
        let mut x_sub = Vec::new();
        let mut tmp = Vec::new();
        for (o, pairs) in rules.pairs.iter().enumerate() {
            if pairs.is_empty() {
                continue;
            }
            let p = pairs.len();
            g_sub.clear();
            for &(_, dst) in pairs {
                g_sub.extend_from_slice(g.row(dst));
            }
            if let Some(gx) = gx.as_mut() {
                let w_o = &tw.data()[o * c_in * c_out..(o + 1) * c_in * c_out];
                tmp.clear();
                tmp.resize(p * c_in, 0.0);
                gemm_raw(p, c_out, c_in, &g_sub, c_out, false, w_o, c_out, true, &mut tmp, c_in, 0.0);
                for (k, &(src, _)) in pairs.iter().enumerate() {
                    for (a, v) in gx.row_mut(src).iter_mut().zip(&tmp[k * c_in..(k + 1) * c_in]) {
                        *a += v;
                    }
                }
            }
            if let Some(gw) = gw.as_mut() {
                x_sub.clear();
                for &(src, _) in pairs {
                    x_sub.extend_from_slice(tx.row(src));
                }
                let gw_o = &mut gw.data_mut()[o * c_in * c_out..(o + 1) * c_in * c_out];
                gemm_raw(c_in, p, c_out, &x_sub, c_in, true, &g_sub, c_out, false, gw_o, c_out, 0.0);
            }
        }
        let gb = need[2].then(|| column_sums(g));
        vec![gx, gw, gb]
    }))
}

/// Applies `kernel` to a voxel set; the output keeps the input's sites.
pub fn sparse_conv3(voxels: &SparseVoxelSet, kernel: &ConvKernel3) -> Result<SparseVoxelSet> {
    if kernel.in_channels() != voxels.features.cols() || kernel.weights.rows() % kernel.extent.volume() != 0 {
        return Err(Error::shape(
            "sparse_conv3",
            format!("kernel input width {}", voxels.features.cols()),
            kernel.in_channels(),
        ));
    }
    let rules = Rulebook::build(&voxels.coords, kernel.extent);
    let mut tape = Tape::new();
    let x = tape.constant(voxels.features.clone());
    let w = tape.constant(kernel.weights.clone());
    let b = tape.constant(kernel.bias.clone());
    let y = sparse_conv3_var(&mut tape, x, &rules, w, b)?;
    Ok(SparseVoxelSet {
        coords: voxels.coords.clone(),
        features: tape.value(y).clone(),
        voxel_size: voxels.voxel_size,
        point_to_voxel: voxels.point_to_voxel.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{finite_diff_check, DEFAULT_STEP, DEFAULT_TOL};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_point_voxel() {
        let cloud = PointCloud::new(vec![[0.0; 3]], vec![[0.2, 0.4, 0.6]]).unwrap();
        let v = voxelize(&cloud, 0.02).unwrap();
        assert_eq!(v.coords, vec![[0, 0, 0]]);
        assert_eq!(v.features.row(0), &[0.2f32 as f64, 0.4f32 as f64, 0.6f32 as f64]);
    }

    #[test]
    fn floor_quantization() {
        // Oracle: floor division per axis, evaluated on the same f32 inputs.
        let p = [0.05f32, 0.03, -0.01];
        let expect = p.map(|v| (v as f64 / 0.02).floor() as i32);
        assert_eq!(expect, [2, 1, -1]);
        let cloud = PointCloud::new(vec![p], vec![[0.0; 3]]).unwrap();
        assert_eq!(voxelize(&cloud, 0.02).unwrap().coords, vec![[2, 1, -1]]);
    }

    #[test]
    fn shared_voxel_averages_colors() {
        let cloud = PointCloud::new(vec![[0.001; 3], [0.002; 3]], vec![[0.0, 0.5, 1.0], [1.0, 0.5, 0.0]]).unwrap();
        let v = voxelize(&cloud, 0.02).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v.features.row(0), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn voxelize_errors() {
        assert!(voxelize(&PointCloud::default(), 0.02).is_err());
        let cloud = PointCloud::new(vec![[0.0; 3]], vec![[0.0; 3]]).unwrap();
        assert!(voxelize(&cloud, 0.0).is_err());
    }

    #[test]
    fn voxel_centers() {
        let close = |a: [f64; 3], b: [f64; 3]| (0..3).all(|i| (a[i] - b[i]).abs() < 1e-15);
        assert!(close(voxel_center([0, 0, 0], 0.02), [0.01, 0.01, 0.01]));
        assert!(close(voxel_center([-1, 0, 0], 0.02), [-0.01, 0.01, 0.01]));
        assert!(close(voxel_center([2, 1, -1], 0.02), [0.05, 0.03, -0.01]));
        // Inverse of the floor example: the center quantizes back to its voxel.
        assert_eq!(quantize(voxel_center([2, 1, -1], 0.02), 0.02), [2, 1, -1]);
    }

    #[test]
    fn canonical_order_is_zyx() {
        let cloud = PointCloud::new(
            vec![[0.5, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.5], [0.0, 0.0, 0.0]],
            vec![[0.0; 3]; 4],
        )
        .unwrap();
        let v = voxelize(&cloud, 0.1).unwrap();
        assert_eq!(v.coords, vec![[0, 0, 0], [5, 0, 0], [0, 5, 0], [0, 0, 5]]);
    }

    #[test]
    fn scatter_mean_cases() {
        let f = Tensor::from_vec(2, 1, vec![1.0, 3.0]).unwrap();
        assert_eq!(scatter_mean(&f, &[0, 0], 1).unwrap().values.data(), &[2.0]);
        assert_eq!(scatter_mean(&f, &[0, 1], 2).unwrap().values, f);
        let r = scatter_mean(&f, &[0, 0], 3).unwrap();
        assert_eq!(r.empty_groups, vec![1, 2]);
        assert_eq!(r.values.row(2), &[0.0]);
        assert!(matches!(scatter_mean(&f, &[0, 2], 2), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn scatter_mean_matches_group_and_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random(7, 3, &mut rng);
        let labels: Vec<usize> = (0..7).map(|_| rng.gen_range(0..2)).collect();
        let got = scatter_mean(&f, &labels, 2).unwrap().values;
        for g in 0..2 {
            let members: Vec<usize> = (0..7).filter(|&i| labels[i] == g).collect();
            for c in 0..3 {
                let mean = members.iter().map(|&i| f.get(i, c)).sum::<f64>() / members.len().max(1) as f64;
                assert!((got.get(g, c) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn broadcast_cases() {
        let g = Tensor::from_vec(1, 2, vec![4.0, 5.0]).unwrap();
        let b = broadcast(&g, &[0, 0, 0]).unwrap();
        assert_eq!(b.shape(), (3, 2));
        assert!((0..3).all(|r| b.row(r) == [4.0, 5.0]));
        assert!(broadcast(&g, &[1]).is_err());

        let f = Tensor::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let s = scatter_mean(&f, &[0, 1, 2], 3).unwrap().values;
        assert_eq!(broadcast(&s, &[0, 1, 2]).unwrap(), f);
    }

    #[test]
    fn broadcast_and_scatter_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..3 {
            let g = random(3, 2, &mut rng);
            let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..3)).collect();
            let l = labels.clone();
            let r = finite_diff_check("broadcast", move |t, v| broadcast_var(t, v[0], &l), &[g], DEFAULT_STEP, 1e-6)
                .unwrap();
            assert!(r.passed, "{r:?}");

            let x = random(6, 2, &mut rng);
            let r = finite_diff_check(
                "scatter_mean",
                move |t, v| Ok(scatter_mean_var(t, v[0], &labels, 4)?.0),
                &[x],
                DEFAULT_STEP,
                DEFAULT_TOL,
            )
            .unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn revoxelize_cases() {
        let pos = Tensor::from_vec(2, 3, vec![0.01, 0.01, 0.01, 0.01, 0.01, 0.01]).unwrap();
        let f = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let (v, map) = revoxelize(&pos, &f, 0.04).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v.features.row(0), &[2.0, 4.0]);
        assert_eq!(map, vec![0, 0]);

        let (v, _) = revoxelize(&pos.gather_rows(&[0]), &f.gather_rows(&[0]), 0.04).unwrap();
        assert_eq!(v.features.row(0), &[1.0, 2.0]);
        assert!(revoxelize(&Tensor::zeros(0, 3), &Tensor::zeros(0, 2), 0.04).is_err());
    }

    #[test]
    fn revoxelize_matches_bucket_and_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pos = random(20, 3, &mut rng).scale(0.06);
        let f = random(20, 2, &mut rng);
        let (v, map) = revoxelize(&pos, &f, 0.04).unwrap();
        let mut buckets: Vec<(Coord, Vec<usize>)> = Vec::new();
        for e in 0..20 {
            let c = [0, 1, 2].map(|a| (pos.get(e, a) / 0.04).floor() as i32);
            match buckets.iter_mut().find(|(k, _)| *k == c) {
                Some((_, m)) => m.push(e),
                None => buckets.push((c, vec![e])),
            }
        }
        assert_eq!(buckets.len(), v.len());
        for (c, members) in buckets {
            let i = v.coords.iter().position(|&k| k == c).unwrap();
            for &e in &members {
                assert_eq!(map[e], i);
            }
            for ch in 0..2 {
                let mean = members.iter().map(|&e| f.get(e, ch)).sum::<f64>() / members.len() as f64;
                assert!((v.features.get(i, ch) - mean).abs() < 1e-15);
            }
        }
    }

    fn voxels(coords: Vec<Coord>, features: Tensor) -> SparseVoxelSet {
        SparseVoxelSet {
            coords,
            features,
            voxel_size: 1.0,
            point_to_voxel: None,
        }
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let coords = vec![[0, 0, 0], [1, 0, 0], [1, 1, 0], [3, 2, 1]];
        let v = voxels(coords, random(4, 3, &mut rng));
        for extent in [KernelExtent::Cube3, KernelExtent::Point] {
            let out = sparse_conv3(&v, &ConvKernel3::identity(extent, 3)).unwrap();
            assert_eq!(out.features, v.features);
            assert_eq!(out.coords, v.coords);
        }
    }

    #[test]
    fn isolated_site_sees_only_center_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = voxels(vec![[4, 4, 4]], random(1, 2, &mut rng));
        let kernel = ConvKernel3 {
            extent: KernelExtent::Cube3,
            weights: random(27 * 2, 3, &mut rng),
            bias: random(1, 3, &mut rng),
        };
        let out = sparse_conv3(&v, &kernel).unwrap();
        let center = kernel.weights.slice_rows(13 * 2, 14 * 2);
        let expect = v.features.matmul(&center);
        for c in 0..3 {
            assert!((out.features.get(0, c) - expect.get(0, c) - kernel.bias.get(0, c)).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_dimension_mismatch() {
        let v = voxels(vec![[0, 0, 0]], Tensor::zeros(1, 2));
        assert!(sparse_conv3(&v, &ConvKernel3::identity(KernelExtent::Cube3, 3)).is_err());
    }

    /// Dense zero-padded 3×3×3 convolution over a 4³ grid, read back at the
    /// active sites only.
    fn dense_oracle(grid: &[Option<Vec<f64>>], kernel: &ConvKernel3, n: i32) -> Vec<Vec<f64>> {
        let (c_in, c_out) = (kernel.in_channels(), kernel.out_channels());
        let at = |x: i32, y: i32, z: i32| -> Option<&Vec<f64>> {
            if x < 0 || y < 0 || z < 0 || x >= n || y >= n || z >= n {
                return None;
            }
            grid[(z * n * n + y * n + x) as usize].as_ref()
        };
        let mut out = Vec::new();
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    if at(x, y, z).is_none() {
                        continue;
                    }
                    let mut acc = kernel.bias.data().to_vec();
                    let mut o = 0;
                    for dz in -1..=1 {
                        for dy in -1..=1 {
                            for dx in -1..=1 {
                                if let Some(f) = at(x + dx, y + dy, z + dz) {
                                    for i in 0..c_in {
                                        for j in 0..c_out {
                                            acc[j] += f[i] * kernel.weights.get(o * c_in + i, j);
                                        }
                                    }
                                }
                                o += 1;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn matches_dense_convolution_on_4cubed_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..3 {
            let n = 4;
            let grid: Vec<Option<Vec<f64>>> = (0..64)
                .map(|_| rng.gen_bool(0.5).then(|| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()))
                .collect();
            let mut coords = Vec::new();
            let mut feats = Vec::new();
            for z in 0..n {
                for y in 0..n {
                    for x in 0..n {
                        if let Some(f) = &grid[(z * n * n + y * n + x) as usize] {
                            coords.push([x, y, z]);
                            feats.extend_from_slice(f);
                        }
                    }
                }
            }
            let m = coords.len();
            let v = voxels(coords, Tensor::from_vec(m, 3, feats).unwrap());
            let kernel = ConvKernel3 {
                extent: KernelExtent::Cube3,
                weights: random(27 * 3, 2, &mut rng),
                bias: random(1, 2, &mut rng),
            };
            let out = sparse_conv3(&v, &kernel).unwrap();
            let oracle = dense_oracle(&grid, &kernel, n);
            for (r, row) in oracle.iter().enumerate() {
                for (c, &e) in row.iter().enumerate() {
                    assert!((out.features.get(r, c) - e).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..3 {
            let coords: Vec<Coord> = vec![[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 1], [2, 2, 2]];
            let rules = Rulebook::build(&coords, KernelExtent::Cube3);
            let inputs = [random(5, 2, &mut rng), random(27 * 2, 3, &mut rng), random(1, 3, &mut rng)];
            let r = finite_diff_check(
                "sparse_conv3",
                move |t, v| sparse_conv3_var(t, v[0], &rules, v[1], v[2]),
                &inputs,
                DEFAULT_STEP,
                DEFAULT_TOL,
            )
            .unwrap();
            assert!(r.passed, "{r:?}");
        }
    }
}
