//! Query interaction and feature sampling used by the refinement stack.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geometry::{scale_to_level, CameraRig, GridSpec, Vec3};
use crate::tensor::{Real, Tensor};

/// Offset order of the 27 sparse-conv taps; tap 13 is the centre.
pub fn tap_offsets() -> [[i64; 3]; 27] {
    std::array::from_fn(|o| [o as i64 / 9 - 1, (o as i64 / 3) % 3 - 1, o as i64 % 3 - 1])
}

pub const CENTER_TAP: usize = 13;

/// Points grouped into cubic cells of side `cell`: the cell of every point,
/// and for every occupied cell (sorted by coordinate) the index of each of
/// its 27 neighbours, if occupied.
#[derive(Clone, Debug, PartialEq)]
pub struct Voxelization {
    pub cell_of_point: Vec<usize>,
    pub cells: Vec<[i64; 3]>,
    pub neighbors: Vec<[Option<usize>; 27]>,
}

pub fn voxelize(points: &[Vec3], origin: Vec3, cell: Vec3) -> Voxelization {
    let coord = |p: &Vec3| -> [i64; 3] { std::array::from_fn(|a| ((p[a] - origin[a]) / cell[a]).floor() as i64) };
    let mut cells: Vec<[i64; 3]> = points.iter().map(coord).collect();
    cells.sort_unstable();
    cells.dedup();
    let lookup: HashMap<[i64; 3], usize> = cells.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let cell_of_point = points.iter().map(|p| lookup[&coord(p)]).collect();
    let taps = tap_offsets();
    let neighbors = cells
        .iter()
        .map(|c| std::array::from_fn(|o| lookup.get(&std::array::from_fn(|a| c[a] + taps[o][a])).copied()))
        .collect();
    Voxelization { cell_of_point, cells, neighbors }
}

/// Sparse 3x3x3 convolution over occupied cells. `q: [M, C]` rows are summed
/// per cell, convolved with `weights: [27, C, C]` using only occupied
/// neighbours, and the cell outputs are handed back to each member row.
/// Returns the `[M, C]` interaction term.
pub fn sparse_self_attention<T: Real>(q: &Tensor<T>, vox: &Voxelization, weights: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, c) = (q.shape()[0], q.shape()[1]);
    if weights.shape() != [27, c, c] || vox.cell_of_point.len() != m {
        return Err(Error::shape(
            "sparse_self_attention",
            format!("queries {:?}, weights {:?}, {} points", q.shape(), weights.shape(), vox.cell_of_point.len()),
        ));
    }
    let n = vox.cells.len();
    let agg = q.scatter_add_rows(&vox.cell_of_point, n)?;
    // Row `n` is all zeros and stands in for empty neighbours.
    let padded = Tensor::concat(&[agg, Tensor::zeros(&[1, c])?], 0)?;
    let mut out: Option<Tensor<T>> = None;
    for o in 0..27 {
        let idx: Vec<usize> = vox.neighbors.iter().map(|nb| nb[o].unwrap_or(n)).collect();
        if idx.iter().all(|&i| i == n) {
            continue;
        }
        let w = weights.narrow(0, o, 1)?.reshape(&[c, c])?;
        let term = padded.gather_rows(&idx)?.matmul(&w)?;
        out = Some(match out {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    // Every cell is its own centre neighbour, so `out` is always set.
    out.expect("centre tap present").gather_rows(&vox.cell_of_point)
}

/// Convex combination `sum_l w[:, l] * samples[l]` with `w: [M, L]`.
pub fn weighted_sum<T: Real>(samples: &[Tensor<T>], w: &Tensor<T>) -> Result<Tensor<T>> {
    if samples.is_empty() || w.ndim() != 2 || w.shape()[1] != samples.len() {
        return Err(Error::shape("weighted_sum", format!("{} samples with weights {:?}", samples.len(), w.shape())));
    }
    let shape = samples[0].shape().to_vec();
    let mut acc: Option<Tensor<T>> = None;
    for (l, s) in samples.iter().enumerate() {
        let term = w.narrow(1, l, 1)?.expand(&shape)?.mul(s)?;
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    Ok(acc.unwrap())
}

/// Per-level image features at each point, averaged over the cameras that
/// see it. `levels[l]: [B, N, C, H_l, W_l]`; returns `[M, C]` per level.
pub fn sample_visual<T: Real>(levels: &[Tensor<T>], b: usize, points: &[Vec3], rig: &CameraRig) -> Result<Vec<Tensor<T>>> {
    let m = points.len();
    let proj = crate::geometry::project_points(points, rig);
    let mut counts = vec![0usize; m];
    for cam in &proj {
        for (q, p) in cam.iter().enumerate() {
            counts[q] += p.valid as usize;
        }
    }
    let mut out = Vec::with_capacity(levels.len());
    for (l, feats) in levels.iter().enumerate() {
        let s = feats.shape();
        if s.len() != 5 || s[1] != rig.len() || b >= s[0] {
            return Err(Error::shape("sample_visual", format!("level {l} features {s:?}")));
        }
        let (c, h, w) = (s[2], s[3], s[4]);
        let mut acc: Option<Tensor<T>> = None;
        for (n, cam) in proj.iter().enumerate() {
            if !cam.iter().any(|p| p.valid) {
                continue;
            }
            let mut coords = Vec::with_capacity(2 * m);
            let mut weight = Vec::with_capacity(m);
            for (q, p) in cam.iter().enumerate() {
                if p.valid {
                    let (fu, fv) = scale_to_level(p.u, p.v, l + 1)?;
                    coords.extend([fv, fu]);
                    weight.push(1.0 / counts[q] as f64);
                } else {
                    coords.extend([0.0, 0.0]);
                    weight.push(0.0);
                }
            }
            let fmap = feats.narrow(0, b, 1)?.narrow(1, n, 1)?.reshape(&[c, h, w])?;
            let sampled = fmap.bilinear_sample_2d(&Tensor::from_f64(&coords, &[m, 2])?)?;
            let term = Tensor::from_f64(&weight, &[m, 1])?.expand(&[m, c])?.mul(&sampled)?;
            acc = Some(match acc {
                Some(a) => a.add(&term)?,
                None => term,
            });
        }
        out.push(match acc {
            Some(a) => a,
            None => Tensor::zeros(&[m, c])?,
        });
    }
    Ok(out)
}

/// Continuous grid coordinate of `x` on an axis of `n` cells, with node `i`
/// at the centre of cell `i`.
fn grid_coord(x: f64, min: f64, max: f64, n: usize) -> f64 {
    (x - min) / ((max - min) / n as f64) - 0.5
}

/// BEV features at each point's `(x, y)`; `bev[l]: [B, C, X_l, Y_l]` over
/// the extent of `grid`.
pub fn sample_bev<T: Real>(bev: &[Tensor<T>], b: usize, points: &[Vec3], grid: &GridSpec) -> Result<Vec<Tensor<T>>> {
    let m = points.len();
    bev.iter()
        .map(|t| {
            let s = t.shape();
            if s.len() != 4 || b >= s[0] {
                return Err(Error::shape("sample_bev", format!("{s:?}")));
            }
            let coords: Vec<f64> = points
                .iter()
                .flat_map(|p| {
                    [grid_coord(p[0], grid.min[0], grid.max[0], s[2]), grid_coord(p[1], grid.min[1], grid.max[1], s[3])]
                })
                .collect();
            t.narrow(0, b, 1)?.reshape(&s[1..])?.bilinear_sample_2d(&Tensor::from_f64(&coords, &[m, 2])?)
        })
        .collect()
}

/// Volume features at each point; `vols[l]: [B, C, X_l, Y_l, Z_l]`.
pub fn sample_volume<T: Real>(vols: &[Tensor<T>], b: usize, points: &[Vec3], grid: &GridSpec) -> Result<Vec<Tensor<T>>> {
    let m = points.len();
    vols.iter()
        .map(|t| {
            let s = t.shape();
            if s.len() != 5 || b >= s[0] {
                return Err(Error::shape("sample_volume", format!("{s:?}")));
            }
            let coords: Vec<f64> = points
                .iter()
                .flat_map(|p| std::array::from_fn::<f64, 3, _>(|a| grid_coord(p[a], grid.min[a], grid.max[a], s[2 + a])))
                .collect();
            t.narrow(0, b, 1)?.reshape(&s[1..])?.trilinear_sample_3d(&Tensor::from_f64(&coords, &[m, 3])?)
        })
        .collect()
}
