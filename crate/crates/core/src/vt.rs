//! Sparse view transformation from image features to voxels and BEV cells.
//!
//! Each voxel is represented by five sample points (its centre and the
//! centre shifted by a quarter cell along ±x and ±y). A row of the local
//! matrix averages the feature pixels hit by those points over all cameras;
//! a row of the global matrix does the same for every voxel of a pillar.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{project_points, CameraRig, GridSpec, Vec3, LEVEL_STRIDES};
use crate::nn::{Conv3d, ParamStore};
use crate::tensor::{ConvSpec, Real, Tensor};

const MAGIC: &[u8; 4] = b"IVTM";
const VERSION: u32 = 1;

/// Compressed sparse rows with `u32` column indices.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseCsr {
    pub rows: usize,
    pub cols: usize,
    pub offsets: Vec<usize>,
    pub indices: Vec<u32>,
    pub values: Vec<f32>,
}

impl SparseCsr {
    pub fn empty(rows: usize, cols: usize) -> Self {
        SparseCsr { rows, cols, offsets: vec![0; rows + 1], indices: Vec::new(), values: Vec::new() }
    }

    /// Builds a row-normalized matrix from per-row column hits; a column hit
    /// `m` times among `k` hits gets weight `m / k`.
    pub fn from_hits(cols: usize, hits: &[Vec<u32>]) -> Self {
        let mut offsets = Vec::with_capacity(hits.len() + 1);
        let (mut indices, mut values) = (Vec::new(), Vec::new());
        offsets.push(0);
        for row in hits {
            let mut counts = BTreeMap::new();
            for &c in row {
                *counts.entry(c).or_insert(0usize) += 1;
            }
            let k = row.len() as f64;
            for (c, m) in counts {
                indices.push(c);
                values.push((m as f64 / k) as f32);
            }
            offsets.push(indices.len());
        }
        SparseCsr { rows: hits.len(), cols, offsets, indices, values }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> (&[u32], &[f32]) {
        let (a, b) = (self.offsets[r], self.offsets[r + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn row_is_empty(&self, r: usize) -> bool {
        self.offsets[r] == self.offsets[r + 1]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::format("sparse matrix", msg));
        if self.offsets.len() != self.rows + 1 || self.offsets[0] != 0 {
            return bad(format!("{} offsets for {} rows", self.offsets.len(), self.rows));
        }
        if self.offsets.windows(2).any(|w| w[0] > w[1]) {
            return bad("row offsets decrease".into());
        }
        if *self.offsets.last().unwrap() != self.nnz() || self.indices.len() != self.nnz() {
            return bad("last offset differs from nnz".into());
        }
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            if cols.iter().any(|&c| c as usize >= self.cols) {
                return bad(format!("row {r} has a column out of bounds"));
            }
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("row {r} columns not strictly increasing"));
            }
            if vals.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return bad(format!("row {r} has a negative or non-finite weight"));
            }
            if !vals.is_empty() {
                let s: f64 = vals.iter().map(|&v| v as f64).sum();
                if (s - 1.0).abs() > 1e-6 {
                    return bad(format!("row {r} sums to {s}"));
                }
            }
        }
        Ok(())
    }

    /// Row-major dense copy.
    pub fn to_dense(&self) -> Vec<f32> {
        let mut d = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                d[r * self.cols + c as usize] = v;
            }
        }
        d
    }

    fn write_to(&self, w: &mut impl Write) -> Result<()> {
        for n in [self.rows, self.cols, self.nnz()] {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        for &o in &self.offsets {
            w.write_all(&(o as u64).to_le_bytes())?;
        }
        for &c in &self.indices {
            w.write_all(&c.to_le_bytes())?;
        }
        for &v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads one matrix; `Ok(None)` at a clean end of input.
    fn read_from(r: &mut impl Read) -> Result<Option<Self>> {
        let mut first = [0u8; 8];
        let mut got = 0;
        while got < 8 {
            let n = r.read(&mut first[got..])?;
            if n == 0 {
                break;
            }
            got += n;
        }
        match got {
            0 => return Ok(None),
            8 => {}
            _ => return Err(Error::format("VT cache", "truncated matrix header")),
        }
        let rows = u64::from_le_bytes(first) as usize;
        let cols = read_u64(r)? as usize;
        let nnz = read_u64(r)? as usize;
        let offsets = (0..=rows).map(|_| read_u64(r).map(|v| v as usize)).collect::<Result<_>>()?;
        let indices = (0..nnz).map(|_| read_u32(r)).collect::<Result<_>>()?;
        let values = (0..nnz).map(|_| read_u32(r).map(f32::from_bits)).collect::<Result<_>>()?;
        let m = SparseCsr { rows, cols, offsets, indices, values };
        m.validate()?;
        Ok(Some(m))
    }
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::format("VT cache", "truncated"))?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::format("VT cache", "truncated"))?;
    Ok(u32::from_le_bytes(b))
}

/// Matrices of one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct VtLevel {
    pub grid: GridSpec,
    /// Feature map `(height, width)` at this level.
    pub feature_hw: (usize, usize),
    pub local: Rc<SparseCsr>,
    pub global: Rc<SparseCsr>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VtMatrices {
    pub num_cameras: usize,
    pub levels: Vec<VtLevel>,
}

/// Sample points of a voxel: centre, then ±x and ±y quarter-cell offsets.
pub fn sample_points(grid: &GridSpec, idx: usize) -> [Vec3; 5] {
    let [i, j, k] = grid.unindex(idx);
    let c = grid.center(i, j, k);
    let cs = grid.cell_size();
    let (dx, dy) = (cs[0] / 4.0, cs[1] / 4.0);
    [
        c,
        [c[0] + dx, c[1], c[2]],
        [c[0] - dx, c[1], c[2]],
        [c[0], c[1] + dy, c[2]],
        [c[0], c[1] - dy, c[2]],
    ]
}

/// Columns hit by each voxel's sample points at one level.
fn voxel_hits(rig: &CameraRig, grid: &GridSpec, stride: usize, hw: (usize, usize)) -> Vec<Vec<u32>> {
    let (h, w) = hw;
    let n = grid.num_cells();
    let points: Vec<Vec3> = (0..n).flat_map(|v| sample_points(grid, v)).collect();
    let proj = project_points(&points, rig);
    let mut hits = vec![Vec::new(); n];
    for (cam, ps) in proj.iter().enumerate() {
        for (pi, p) in ps.iter().enumerate() {
            if !p.valid {
                continue;
            }
            let px = ((p.u / stride as f64).floor() as usize).min(w - 1);
            let py = ((p.v / stride as f64).floor() as usize).min(h - 1);
            hits[pi / 5].push(((cam * h + py) * w + px) as u32);
        }
    }
    hits
}

/// Builds per-level matrices. `feature_hw[l]` is the feature map size of
/// level `l + 1`, whose voxel grid is the base grid halved `l` times.
pub fn build_vt(rig: &CameraRig, spec: &GridSpec, feature_hw: &[(usize, usize)]) -> Result<VtMatrices> {
    rig.validate()?;
    spec.validate()?;
    if feature_hw.is_empty() || feature_hw.len() > LEVEL_STRIDES.len() {
        return Err(Error::Contract(format!("{} feature levels requested", feature_hw.len())));
    }
    let ncam = rig.len();
    let mut levels = Vec::with_capacity(feature_hw.len());
    for (l, &hw) in feature_hw.iter().enumerate() {
        let grid = spec.downsampled(l)?;
        let cols = ncam * hw.0 * hw.1;
        if cols > u32::MAX as usize {
            return Err(Error::Contract("feature columns exceed u32 range".into()));
        }
        let hits = voxel_hits(rig, &grid, LEVEL_STRIDES[l], hw);
        if hits.iter().all(Vec::is_empty) {
            return Err(Error::DegenerateRig(format!("no voxel of level {} is visible", l + 1)));
        }
        let [x, y, z] = grid.resolution;
        let pillars: Vec<Vec<u32>> = (0..x * y).map(|p| hits[p * z..(p + 1) * z].concat()).collect();
        levels.push(VtLevel {
            grid,
            feature_hw: hw,
            local: Rc::new(SparseCsr::from_hits(cols, &hits)),
            global: Rc::new(SparseCsr::from_hits(cols, &pillars)),
        });
    }
    Ok(VtMatrices { num_cameras: ncam, levels })
}

impl VtMatrices {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for lvl in &self.levels {
            lvl.local.write_to(w)?;
            lvl.global.write_to(w)?;
        }
        Ok(())
    }

    /// Reads a cache and checks it against the expected layout.
    pub fn read_from(
        r: &mut impl Read,
        num_cameras: usize,
        spec: &GridSpec,
        feature_hw: &[(usize, usize)],
    ) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::format("VT cache", "missing header"))?;
        if &magic != MAGIC {
            return Err(Error::format("VT cache", "bad magic"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::format("VT cache", format!("unsupported version {version}")));
        }
        let mut mats = Vec::new();
        while let Some(m) = SparseCsr::read_from(r)? {
            mats.push(m);
        }
        if mats.len() != 2 * feature_hw.len() {
            return Err(Error::format(
                "VT cache",
                format!("{} matrices for {} levels", mats.len(), feature_hw.len()),
            ));
        }
        let mut levels = Vec::new();
        let mut it = mats.into_iter();
        for (l, &hw) in feature_hw.iter().enumerate() {
            let grid = spec.downsampled(l)?;
            let (local, global) = (it.next().unwrap(), it.next().unwrap());
            let cols = num_cameras * hw.0 * hw.1;
            let [x, y, _] = grid.resolution;
            if local.rows != grid.num_cells() || global.rows != x * y || local.cols != cols || global.cols != cols {
                return Err(Error::format("VT cache", format!("level {} shape mismatch", l + 1)));
            }
            levels.push(VtLevel { grid, feature_hw: hw, local: Rc::new(local), global: Rc::new(global) });
        }
        Ok(VtMatrices { num_cameras, levels })
    }
}

impl<T: Real> Tensor<T> {
    /// `out[r, i] = sum_j m[i, j] x[r, j]` for `self: [R, cols]`, giving
    /// `[R, m.rows]`. Weights are renormalized by their row sum in `f64`, so
    /// a constant input reproduces the constant exactly.
    pub fn apply_csr(&self, m: &Rc<SparseCsr>) -> Result<Self> {
        const OP: &str = "apply_csr";
        if self.ndim() != 2 || self.shape()[1] != m.cols {
            return Err(Error::shape(OP, format!("input {:?} for matrix with {} columns", self.shape(), m.cols)));
        }
        Self::ensure_finite(OP, &[self])?;
        let r_in = self.shape()[0];
        let norm: Rc<Vec<f64>> = Rc::new(
            (0..m.rows)
                .map(|r| {
                    let s: f64 = m.row(r).1.iter().map(|&v| v as f64).sum();
                    if s > 0.0 {
                        1.0 / s
                    } else {
                        0.0
                    }
                })
                .collect(),
        );
        let mut out = vec![T::ZERO; r_in * m.rows];
        {
            let x = self.data();
            for ch in 0..r_in {
                let xs = &x[ch * m.cols..][..m.cols];
                for r in 0..m.rows {
                    let (cols, vals) = m.row(r);
                    let mut acc = 0.0f64;
                    for (&c, &v) in cols.iter().zip(vals) {
                        acc += v as f64 * xs[c as usize].to_f64();
                    }
                    out[ch * m.rows + r] = T::from_f64(acc * norm[r]);
                }
            }
        }
        let m = Rc::clone(m);
        Ok(Self::make(OP, vec![r_in, m.rows], out, vec![self.clone()], move |ctx| {
            let mut g = vec![0.0f64; r_in * m.cols];
            for ch in 0..r_in {
                for r in 0..m.rows {
                    let gr = ctx.grad[ch * m.rows + r].to_f64() * norm[r];
                    if gr == 0.0 {
                        continue;
                    }
                    let (cols, vals) = m.row(r);
                    for (&c, &v) in cols.iter().zip(vals) {
                        g[ch * m.cols + c as usize] += v as f64 * gr;
                    }
                }
            }
            vec![Some(g.into_iter().map(T::from_f64).collect())]
        }))
    }
}

/// Lifts one level's features `[B, N_cam, C, H, W]` into the local volume
/// `[B, C, X, Y, Z]` and BEV plane `[B, C, X, Y]`.
pub fn apply_vt<T: Real>(features: &Tensor<T>, level: &VtLevel) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = features.shape();
    let (h, w) = level.feature_hw;
    if s.len() != 5 || s[3] != h || s[4] != w || s[1] * h * w != level.local.cols {
        return Err(Error::shape(
            "apply_vt",
            format!("features {s:?} for matrices with {} columns over {h}x{w} maps", level.local.cols),
        ));
    }
    let (b, ncam, c) = (s[0], s[1], s[2]);
    let flat = features.permute(&[0, 2, 1, 3, 4])?.reshape(&[b * c, ncam * h * w])?;
    let [x, y, z] = level.grid.resolution;
    let local = flat.apply_csr(&level.local)?.reshape(&[b, c, x, y, z])?;
    let bev = flat.apply_csr(&level.global)?.reshape(&[b, c, x, y])?;
    Ok((local, bev))
}

/// Gate blending local voxel features with height-broadcast BEV features.
pub struct FusionGate<T: Real = f32> {
    pub conv: Conv3d<T>,
}

impl<T: Real> FusionGate<T> {
    pub fn new(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(FusionGate { conv: Conv3d::new(store, name, 2 * channels, 1, 1, ConvSpec::default(), true, rng)? })
    }

    /// `A * local + (1 - A) * bev_z` with `A = sigmoid(conv(local ++ bev_z))`.
    /// Without a gate the two are averaged.
    pub fn fuse(gate: Option<&Self>, local: &Tensor<T>, bev: &Tensor<T>) -> Result<Tensor<T>> {
        let ls = local.shape().to_vec();
        let bs = bev.shape();
        if ls.len() != 5 || bs.len() != 4 || bs != &ls[..4] {
            return Err(Error::shape("global_local_fusion", format!("local {ls:?} with bev {bs:?}")));
        }
        let bev_z = bev.reshape(&[ls[0], ls[1], ls[2], ls[3], 1])?.expand(&ls)?;
        let Some(gate) = gate else {
            return local.add(&bev_z)?.scale(0.5);
        };
        if gate.conv.weight.shape()[1] != 2 * ls[1] {
            return Err(Error::shape("global_local_fusion", "gate channel count mismatch"));
        }
        let a = gate.conv.forward(&Tensor::concat(&[local.clone(), bev_z.clone()], 1)?)?.sigmoid()?;
        let a = a.expand(&ls)?;
        // bev_z + A * (local - bev_z)
        bev_z.add(&a.mul(&local.sub(&bev_z)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Camera;
    use rand::SeedableRng;
    use std::f64::consts::PI;

    fn single_cam_rig() -> CameraRig {
        CameraRig { cameras: vec![Camera::facing([0.0; 3], 0.0, PI / 2.0, 64, 64)] }
    }

    #[test]
    fn single_hit_voxel_gets_unit_weight() {
        // A tiny voxel far ahead projecting to image (36, 36): all five
        // samples land in feature pixel (4, 4).
        let grid = GridSpec::new([9.99, -1.26, -1.26], [10.01, -1.24, -1.24], [1, 1, 1]).unwrap();
        let vt = build_vt(&single_cam_rig(), &grid, &[(8, 8)]).unwrap();
        let m = &vt.levels[0].local;
        assert_eq!(m.nnz(), 1);
        assert_eq!(m.values, vec![1.0]);
        assert_eq!(m.indices, vec![4 * 8 + 4]);
        m.validate().unwrap();
    }

    #[test]
    fn voxels_behind_camera_have_empty_rows() {
        let grid = GridSpec::new([-4.0, -1.0, -1.0], [4.0, 1.0, 1.0], [4, 2, 2]).unwrap();
        let vt = build_vt(&single_cam_rig(), &grid, &[(8, 8)]).unwrap();
        let m = &vt.levels[0].local;
        for v in 0..grid.num_cells() {
            let [i, _, _] = grid.unindex(v);
            assert_eq!(m.row_is_empty(v), i < 2, "voxel {v}");
        }
    }

    #[test]
    fn invisible_grid_is_degenerate() {
        let grid = GridSpec::new([-4.0, -1.0, -1.0], [-2.0, 1.0, 1.0], [2, 2, 2]).unwrap();
        assert!(matches!(build_vt(&single_cam_rig(), &grid, &[(8, 8)]), Err(Error::DegenerateRig(_))));
    }

    #[test]
    fn csr_apply_matches_gather_for_permutation() {
        let m = Rc::new(SparseCsr::from_hits(4, &[vec![2], vec![0], vec![3], vec![]]));
        let x = Tensor::<f32>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 4]).unwrap();
        assert_eq!(x.apply_csr(&m).unwrap().to_vec(), vec![3.0, 1.0, 4.0, 0.0]);
        let empty = Rc::new(SparseCsr::empty(3, 4));
        assert_eq!(x.apply_csr(&empty).unwrap().to_vec(), vec![0.0; 3]);
    }

    #[test]
    fn duplicate_hits_merge() {
        let m = SparseCsr::from_hits(5, &[vec![4, 1, 4]]);
        assert_eq!(m.indices, vec![1, 4]);
        assert_eq!(m.values, vec![(1.0f64 / 3.0) as f32, (2.0f64 / 3.0) as f32]);
        m.validate().unwrap();
    }

    #[test]
    fn fusion_without_gate_averages() {
        let local = Tensor::<f64>::full(&[1, 2, 2, 2, 3], 4.0).unwrap();
        let bev = Tensor::<f64>::full(&[1, 2, 2, 2], 2.0).unwrap();
        let f = FusionGate::fuse(None, &local, &bev).unwrap();
        assert!(f.to_vec().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn fusion_gate_saturation() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gate = FusionGate::new(&mut store, "g", 2, &mut rng).unwrap();
        let local = Tensor::<f64>::from_f64(&(0..24).map(|v| v as f64).collect::<Vec<_>>(), &[1, 2, 2, 2, 3]).unwrap();
        let bev = Tensor::<f64>::from_f64(&[-1.0, -2.0, -3.0, -4.0, 5.0, 6.0, 7.0, 8.0], &[1, 2, 2, 2]).unwrap();
        gate.conv.weight.set_data(vec![0.0; 4]).unwrap();
        for (b, want_local) in [(100.0, true), (-100.0, false)] {
            gate.conv.bias.as_ref().unwrap().set_data(vec![b]).unwrap();
            let f = FusionGate::fuse(Some(&gate), &local, &bev).unwrap().to_vec();
            let bz = bev.reshape(&[1, 2, 2, 2, 1]).unwrap().expand(&[1, 2, 2, 2, 3]).unwrap().to_vec();
            let want = if want_local { local.to_vec() } else { bz };
            for (a, w) in f.iter().zip(&want) {
                assert!((a - w).abs() < 1e-9);
            }
        }
        gate.conv.bias.as_ref().unwrap().set_data(vec![0.0]).unwrap();
        let f = FusionGate::fuse(Some(&gate), &local, &bev).unwrap();
        let avg = FusionGate::fuse(None, &local, &bev).unwrap();
        assert_eq!(f.to_vec(), avg.to_vec());
    }

    #[test]
    fn cache_round_trip() {
        let grid = GridSpec::new([-8.0, -8.0, -2.0], [8.0, 8.0, 2.0], [8, 8, 4]).unwrap();
        let rig = CameraRig::ring(4, 1.0, 0.0, 1.5, 64, 64);
        let dims = [(8, 8), (4, 4)];
        let vt = build_vt(&rig, &grid, &dims).unwrap();
        let mut buf = Vec::new();
        vt.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"IVTM");
        let back = VtMatrices::read_from(&mut buf.as_slice(), 4, &grid, &dims).unwrap();
        assert_eq!(back, vt);
        assert!(VtMatrices::read_from(&mut &buf[..buf.len() - 3], 4, &grid, &dims).is_err());
        assert!(VtMatrices::read_from(&mut buf.as_slice(), 4, &grid, &dims[..1]).is_err());
    }
}
