//! Cameras, voxel grids and boxes.
//!
//! World frame: right-handed metres, x forward, y left, z up. Camera frame:
//! x right, y down, z along the optical axis. Flattened voxel index is
//! `(i * Y + j) * Z + k` everywhere, including file formats.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];
pub type Mat4 = [[f64; 4]; 4];
pub type Vec3 = [f64; 3];

/// Feature strides of the three pyramid levels.
pub const LEVEL_STRIDES: [usize; 3] = [8, 16, 32];

pub fn mat4_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut c = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            c[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub fn mat4_apply(m: &Mat4, p: Vec3) -> [f64; 4] {
    let h = [p[0], p[1], p[2], 1.0];
    let mut out = [0.0; 4];
    for (i, row) in m.iter().enumerate() {
        out[i] = (0..4).map(|k| row[k] * h[k]).sum();
    }
    out
}

/// Inverse of a rigid transform `[R | t]`.
pub fn rigid_inverse(m: &Mat4) -> Mat4 {
    let mut inv = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            inv[i][j] = m[j][i];
        }
    }
    for i in 0..3 {
        inv[i][3] = -(0..3).map(|k| m[k][i] * m[k][3]).sum::<f64>();
    }
    inv[3][3] = 1.0;
    inv
}

/// Rigid transform rotating by `yaw` about z, then translating.
pub fn yaw_transform(yaw: f64, t: Vec3) -> Mat4 {
    let (s, c) = yaw.sin_cos();
    [[c, -s, 0.0, t[0]], [s, c, 0.0, t[1]], [0.0, 0.0, 1.0, t[2]], [0.0, 0.0, 0.0, 1.0]]
}

/// Axis-aligned voxel grid over a metric box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub min: Vec3,
    pub max: Vec3,
    pub resolution: [usize; 3],
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { min: [-10.0, -10.0, -2.0], max: [10.0, 10.0, 2.0], resolution: [40, 40, 8] }
    }
}

impl GridSpec {
    pub fn new(min: Vec3, max: Vec3, resolution: [usize; 3]) -> Result<Self> {
        let g = GridSpec { min, max, resolution };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.min[a].is_finite() && self.max[a].is_finite() && self.max[a] > self.min[a]) {
                return Err(Error::Contract(format!(
                    "grid axis {a}: max {} must exceed min {}",
                    self.max[a], self.min[a]
                )));
            }
            if self.resolution[a] == 0 {
                return Err(Error::Contract(format!("grid axis {a} has zero resolution")));
            }
        }
        Ok(())
    }

    pub fn cell_size(&self) -> Vec3 {
        std::array::from_fn(|a| (self.max[a] - self.min[a]) / self.resolution[a] as f64)
    }

    pub fn num_cells(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        let [_, y, z] = self.resolution;
        (i * y + j) * z + k
    }

    pub fn unindex(&self, idx: usize) -> [usize; 3] {
        let [_, y, z] = self.resolution;
        [idx / (y * z), (idx / z) % y, idx % z]
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let cs = self.cell_size();
        let ijk = [i, j, k];
        std::array::from_fn(|a| self.min[a] + (ijk[a] as f64 + 0.5) * cs[a])
    }

    /// All cell centres in flattened order.
    pub fn voxel_centers(&self) -> Vec<Vec3> {
        (0..self.num_cells())
            .map(|idx| {
                let [i, j, k] = self.unindex(idx);
                self.center(i, j, k)
            })
            .collect()
    }

    /// Same extent with every resolution divided by `2^level`.
    pub fn downsampled(&self, level: usize) -> Result<Self> {
        let f = 1usize << level;
        if self.resolution.iter().any(|&r| r % f != 0) {
            return Err(Error::Contract(format!(
                "resolution {:?} not divisible by {f}",
                self.resolution
            )));
        }
        Ok(GridSpec { resolution: self.resolution.map(|r| r / f), ..*self })
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn clamp(&self, p: Vec3) -> Vec3 {
        std::array::from_fn(|a| p[a].clamp(self.min[a], self.max[a]))
    }
}

/// Pinhole camera with a rigid world-to-camera extrinsic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub intrinsics: Mat3,
    pub world_to_camera: Mat4,
    pub width: usize,
    pub height: usize,
}

/// One point seen by one camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

impl Camera {
    /// Camera at `position` looking horizontally along heading `yaw`, with
    /// the principal point at the image centre.
    pub fn facing(position: Vec3, yaw: f64, hfov: f64, width: usize, height: usize) -> Self {
        let f = width as f64 / 2.0 / (hfov / 2.0).tan();
        let intrinsics = [[f, 0.0, width as f64 / 2.0], [0.0, f, height as f64 / 2.0], [0.0, 0.0, 1.0]];
        let (s, c) = yaw.sin_cos();
        let rows = [[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]];
        let mut e = [[0.0; 4]; 4];
        for i in 0..3 {
            e[i][..3].copy_from_slice(&rows[i]);
            e[i][3] = -(0..3).map(|k| rows[i][k] * position[k]).sum::<f64>();
        }
        e[3][3] = 1.0;
        Camera { intrinsics, world_to_camera: e, width, height }
    }

    /// `K4 * E`: world homogeneous point to `(d*u, d*v, d, 1)`.
    pub fn world_to_image(&self) -> Mat4 {
        let mut k4 = [[0.0; 4]; 4];
        for i in 0..3 {
            k4[i][..3].copy_from_slice(&self.intrinsics[i]);
        }
        k4[3][3] = 1.0;
        mat4_mul(&k4, &self.world_to_camera)
    }

    pub fn project(&self, p: Vec3) -> Projection {
        self.project_with(&self.world_to_image(), p)
    }

    fn project_with(&self, t: &Mat4, p: Vec3) -> Projection {
        let h = mat4_apply(t, p);
        let depth = h[2];
        let (u, v) = (h[0] / depth, h[1] / depth);
        let valid = depth > 0.0
            && u >= 0.0
            && v >= 0.0
            && u < self.width as f64
            && v < self.height as f64;
        Projection { u, v, depth, valid }
    }

    /// World point on the ray through pixel `(u, v)` at `depth`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let k = &self.intrinsics;
        let y = (v - k[1][2]) / k[1][1];
        let x = (u - k[0][2] - k[0][1] * y) / k[0][0];
        let cam = [x * depth, y * depth, depth];
        let inv = rigid_inverse(&self.world_to_camera);
        let w = mat4_apply(&inv, cam);
        [w[0], w[1], w[2]]
    }

    /// Optical centre in world coordinates.
    pub fn position(&self) -> Vec3 {
        let inv = rigid_inverse(&self.world_to_camera);
        [inv[0][3], inv[1][3], inv[2][3]]
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k[0][0] > 0.0 && k[1][1] > 0.0) {
            return Err(Error::Contract("focal lengths must be positive".into()));
        }
        if k[1][0] != 0.0 || k[2][0] != 0.0 || k[2][1] != 0.0 || k[2][2] != 1.0 {
            return Err(Error::Contract("intrinsics must be upper-triangular with k22 = 1".into()));
        }
        if self.world_to_camera[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Contract("extrinsic bottom row must be (0, 0, 0, 1)".into()));
        }
        let r = &self.world_to_camera;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(Error::Contract("extrinsic rotation is not orthonormal".into()));
                }
            }
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Contract("image size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
}

impl CameraRig {
    /// `n` cameras on a horizontal ring of `radius` at height `z`, each
    /// facing outward.
    pub fn ring(n: usize, radius: f64, z: f64, hfov: f64, width: usize, height: usize) -> Self {
        let cameras = (0..n)
            .map(|i| {
                let yaw = 2.0 * PI * i as f64 / n as f64;
                let pos = [radius * yaw.cos(), radius * yaw.sin(), z];
                Camera::facing(pos, yaw, hfov, width, height)
            })
            .collect();
        CameraRig { cameras }
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// Shared image size of all cameras.
    pub fn image_size(&self) -> Result<(usize, usize)> {
        let first = self.cameras.first().ok_or_else(|| Error::Contract("camera rig is empty".into()))?;
        if self.cameras.iter().any(|c| (c.width, c.height) != (first.width, first.height)) {
            return Err(Error::Contract("cameras disagree on image size".into()));
        }
        Ok((first.width, first.height))
    }

    pub fn validate(&self) -> Result<()> {
        self.image_size()?;
        self.cameras.iter().try_for_each(Camera::validate)
    }
}

/// Projects every point into every camera: `out[cam][point]`.
pub fn project_points(points: &[Vec3], rig: &CameraRig) -> Vec<Vec<Projection>> {
    rig.cameras
        .iter()
        .map(|cam| {
            let t = cam.world_to_image();
            points.iter().map(|&p| cam.project_with(&t, p)).collect()
        })
        .collect()
}

/// Pixel coordinates on the feature grid of pyramid `level` (1-based).
pub fn scale_to_level(u: f64, v: f64, level: usize) -> Result<(f64, f64)> {
    let stride = level
        .checked_sub(1)
        .and_then(|l| LEVEL_STRIDES.get(l))
        .ok_or_else(|| Error::Contract(format!("unknown pyramid level {level}")))?;
    Ok((u / *stride as f64, v / *stride as f64))
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

/// Oriented 3D box resting in the world frame. `length` runs along the
/// heading, `width` across it, `height` along z.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox3D {
    pub center: Vec3,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub class: u8,
}

/// Serialized box: `box` holds `(x, y, z, l, h, w, yaw, vx, vy)`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxRecord {
    #[serde(rename = "box")]
    values: [f64; 9],
    class: u8,
}

impl Serialize for BBox3D {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        BoxRecord { values: self.to_params(), class: self.class }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox3D {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = BoxRecord::deserialize(d)?;
        BBox3D::from_params(r.values, r.class).map_err(serde::de::Error::custom)
    }
}

impl BBox3D {
    /// Parameters in output order `(x, y, z, l, h, w, yaw, vx, vy)`.
    pub fn to_params(&self) -> [f64; 9] {
        let [x, y, z] = self.center;
        [x, y, z, self.length, self.height, self.width, self.yaw, self.velocity[0], self.velocity[1]]
    }

    pub fn from_params(p: [f64; 9], class: u8) -> Result<Self> {
        let b = BBox3D {
            center: [p[0], p[1], p[2]],
            length: p[3],
            height: p[4],
            width: p[5],
            yaw: wrap_angle(p[6]),
            velocity: [p[7], p[8]],
            class,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0 && self.width > 0.0 && self.height > 0.0) {
            return Err(Error::Contract(format!("box sizes must be positive: {self:?}")));
        }
        if !(-PI..PI).contains(&self.yaw) {
            return Err(Error::Contract(format!("box yaw {} outside [-pi, pi)", self.yaw)));
        }
        Ok(())
    }

    /// Point expressed in the box frame (x along heading).
    pub fn to_local(&self, p: Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
    }

    /// Strict interior test, so a box exactly one cell wide centred on a
    /// cell centre claims only that cell.
    pub fn contains(&self, p: Vec3) -> bool {
        let l = self.to_local(p);
        l[0].abs() < self.length / 2.0 && l[1].abs() < self.width / 2.0 && l[2].abs() < self.height / 2.0
    }

    /// Ray parameter of the first entry into the box, if any (`t > 0`).
    pub fn ray_hit(&self, origin: Vec3, dir: Vec3) -> Option<f64> {
        let o = self.to_local(origin);
        let (s, c) = self.yaw.sin_cos();
        let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
        let half = [self.length / 2.0, self.width / 2.0, self.height / 2.0];
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for a in 0..3 {
            if d[a].abs() < 1e-12 {
                if o[a].abs() > half[a] {
                    return None;
                }
            } else {
                let ta = (-half[a] - o[a]) / d[a];
                let tb = (half[a] - o[a]) / d[a];
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
        }
        (t1 >= t0 && t1 > 0.0).then_some(if t0 > 0.0 { t0 } else { t1 })
    }
}

/// Per-voxel class labels over a grid; label 0 is free.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OccupancyGrid {
    pub resolution: [usize; 3],
    pub labels: Vec<u8>,
}

impl OccupancyGrid {
    pub fn empty(resolution: [usize; 3]) -> Self {
        OccupancyGrid { resolution, labels: vec![0; resolution.iter().product()] }
    }

    pub fn new(resolution: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        if labels.len() != resolution.iter().product::<usize>() {
            return Err(Error::Contract(format!(
                "{} labels for resolution {resolution:?}",
                labels.len()
            )));
        }
        Ok(OccupancyGrid { resolution, labels })
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        let [_, y, z] = self.resolution;
        self.labels[(i * y + j) * z + k]
    }

    pub fn occupied(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }
}

/// Labels each cell with the class of the last box containing its centre.
pub fn boxes_to_occupancy(boxes: &[BBox3D], spec: &GridSpec) -> OccupancyGrid {
    let mut grid = OccupancyGrid::empty(spec.resolution);
    for (idx, c) in spec.voxel_centers().into_iter().enumerate() {
        if let Some(b) = boxes.iter().rev().find(|b| b.contains(c)) {
            grid.labels[idx] = b.class;
        }
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_cam(width: usize, height: usize) -> Camera {
        Camera::facing([0.0; 3], 0.0, PI / 2.0, width, height)
    }

    #[test]
    fn optical_axis_point_hits_principal_point() {
        let cam = unit_cam(64, 48);
        let p = cam.project([5.0, 0.0, 0.0]);
        assert_eq!((p.u, p.v, p.depth, p.valid), (32.0, 24.0, 5.0, true));
    }

    #[test]
    fn point_behind_is_invalid() {
        let p = unit_cam(64, 48).project([-1.0, 0.0, 0.0]);
        assert!(p.depth < 0.0);
        assert!(!p.valid);
    }

    #[test]
    fn left_and_up_map_to_image_left_and_top() {
        let cam = unit_cam(64, 48);
        let left = cam.project([5.0, 1.0, 0.0]);
        let up = cam.project([5.0, 0.0, 1.0]);
        assert!(left.u < 32.0);
        assert!(up.v < 24.0);
    }

    #[test]
    fn level_scaling() {
        assert_eq!(scale_to_level(160.0, 96.0, 1).unwrap(), (20.0, 12.0));
        assert_eq!(scale_to_level(0.0, 0.0, 2).unwrap(), (0.0, 0.0));
        assert_eq!(scale_to_level(1600.0, 900.0, 3).unwrap(), (50.0, 28.125));
        assert!(scale_to_level(1.0, 1.0, 0).is_err());
        assert!(scale_to_level(1.0, 1.0, 4).is_err());
    }

    #[test]
    fn voxel_center_examples() {
        let g = GridSpec::new([-1.0; 3], [1.0; 3], [2, 2, 2]).unwrap();
        assert_eq!(g.voxel_centers()[0], [-0.5, -0.5, -0.5]);
        let one = GridSpec::new([0.0, 2.0, -4.0], [2.0, 6.0, 0.0], [1, 1, 1]).unwrap();
        assert_eq!(one.voxel_centers(), vec![[1.0, 4.0, -2.0]]);
        let full = GridSpec::new([-50.0, -50.0, -5.0], [50.0, 50.0, 3.0], [200, 200, 16]).unwrap();
        assert_eq!(full.center(0, 0, 0), [-49.75, -49.75, -4.75]);
        assert_eq!(full.index(1, 2, 3), (200 + 2) * 16 + 3);
        assert_eq!(full.unindex(full.index(7, 199, 15)), [7, 199, 15]);
    }

    #[test]
    fn invalid_grids_rejected() {
        assert!(GridSpec::new([0.0; 3], [0.0, 1.0, 1.0], [1, 1, 1]).is_err());
        assert!(GridSpec::new([0.0; 3], [1.0; 3], [1, 0, 1]).is_err());
    }

    #[test]
    fn empty_scene_is_free() {
        let g = GridSpec::default();
        assert_eq!(boxes_to_occupancy(&[], &g).occupied(), 0);
    }

    #[test]
    fn unit_box_on_cell_center_claims_one_cell() {
        let g = GridSpec::new([-2.0; 3], [2.0; 3], [4, 4, 4]).unwrap();
        let b = BBox3D {
            center: g.center(2, 1, 3),
            length: 1.0,
            width: 1.0,
            height: 1.0,
            yaw: 0.0,
            velocity: [0.0; 2],
            class: 4,
        };
        let occ = boxes_to_occupancy(&[b], &g);
        assert_eq!(occ.occupied(), 1);
        assert_eq!(occ.get(2, 1, 3), 4);
    }

    #[test]
    fn rotated_box_matches_inverse_rotation_oracle() {
        let g = GridSpec::new([-4.0, -4.0, -1.0], [4.0, 4.0, 1.0], [16, 16, 4]).unwrap();
        let b = BBox3D {
            center: [0.3, -0.2, 0.0],
            length: 4.0,
            width: 1.5,
            height: 1.2,
            yaw: PI / 4.0,
            velocity: [1.0, 0.0],
            class: 10,
        };
        let occ = boxes_to_occupancy(&[b], &g);
        let (s, c) = (-PI / 4.0).sin_cos();
        for (idx, p) in g.voxel_centers().into_iter().enumerate() {
            let (dx, dy, dz) = (p[0] - 0.3, p[1] + 0.2, p[2]);
            let (lx, ly) = (c * dx - s * dy, s * dx + c * dy);
            let inside = lx.abs() < 2.0 && ly.abs() < 0.75 && dz.abs() < 0.6;
            assert_eq!(occ.labels[idx] == 10, inside, "cell {idx}");
        }
        assert!(occ.occupied() > 10);
    }

    #[test]
    fn later_boxes_win() {
        let g = GridSpec::new([-2.0; 3], [2.0; 3], [4, 4, 4]).unwrap();
        let mk = |class| BBox3D {
            center: [0.0; 3],
            length: 2.0,
            width: 2.0,
            height: 2.0,
            yaw: 0.0,
            velocity: [0.0; 2],
            class,
        };
        let occ = boxes_to_occupancy(&[mk(3), mk(7)], &g);
        assert!(occ.labels.iter().all(|&l| l == 0 || l == 7));
        assert_eq!(occ.occupied(), 8);
    }

    #[test]
    fn box_json_order() {
        let b = BBox3D {
            center: [1.0, 2.0, 3.0],
            length: 4.0,
            width: 2.0,
            height: 1.5,
            yaw: 0.5,
            velocity: [0.1, -0.2],
            class: 4,
        };
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(s, r#"{"box":[1.0,2.0,3.0,4.0,1.5,2.0,0.5,0.1,-0.2],"class":4}"#);
        assert_eq!(serde_json::from_str::<BBox3D>(&s).unwrap(), b);
    }

    #[test]
    fn ray_hits_box_front_face() {
        let b = BBox3D {
            center: [5.0, 0.0, 0.0],
            length: 2.0,
            width: 2.0,
            height: 2.0,
            yaw: 0.0,
            velocity: [0.0; 2],
            class: 1,
        };
        assert_eq!(b.ray_hit([0.0; 3], [1.0, 0.0, 0.0]), Some(4.0));
        assert_eq!(b.ray_hit([0.0; 3], [-1.0, 0.0, 0.0]), None);
        assert_eq!(b.ray_hit([0.0; 3], [0.0, 1.0, 0.0]), None);
    }

    fn arb_camera() -> impl Strategy<Value = Camera> {
        (-3.0..3.0f64, -3.0..3.0f64, -1.0..1.0f64, -PI..PI, 0.8..2.0f64)
            .prop_map(|(x, y, z, yaw, fov)| Camera::facing([x, y, z], yaw, fov, 96, 64))
    }

    proptest! {
        #[test]
        fn projection_matches_homogeneous_oracle(cam in arb_camera(), p in prop::array::uniform3(-10.0..10.0f64)) {
            let got = cam.project(p);
            // Oracle: K (R p + t) then divide.
            let e = &cam.world_to_camera;
            let pc: Vec<f64> = (0..3).map(|i| e[i][0] * p[0] + e[i][1] * p[1] + e[i][2] * p[2] + e[i][3]).collect();
            let k = &cam.intrinsics;
            let img: Vec<f64> = (0..3).map(|i| k[i][0] * pc[0] + k[i][1] * pc[1] + k[i][2] * pc[2]).collect();
            prop_assume!(img[2].abs() > 1e-3);
            let (u, v) = (img[0] / img[2], img[1] / img[2]);
            let tol = 1e-5 * (1.0 + u.abs().max(v.abs()));
            prop_assert!((got.u - u).abs() < tol && (got.v - v).abs() < tol);
            prop_assert!((got.depth - pc[2]).abs() < 1e-9);
            let valid = pc[2] > 0.0 && u >= 0.0 && u < 96.0 && v >= 0.0 && v < 64.0;
            prop_assert_eq!(got.valid, valid);
        }

        #[test]
        fn projection_is_rigid_equivariant(cam in arb_camera(), p in prop::array::uniform3(-10.0..10.0f64),
                                           yaw in -PI..PI, t in prop::array::uniform3(-5.0..5.0f64)) {
            let g = yaw_transform(yaw, t);
            let moved = mat4_apply(&g, p);
            let cam2 = Camera { world_to_camera: mat4_mul(&cam.world_to_camera, &rigid_inverse(&g)), ..cam.clone() };
            let a = cam.project(p);
            let b = cam2.project([moved[0], moved[1], moved[2]]);
            prop_assume!(a.depth.abs() > 1e-2);
            let tol = 1e-5 * (1.0 + a.u.abs().max(a.v.abs()));
            prop_assert!((a.u - b.u).abs() < tol && (a.v - b.v).abs() < tol && (a.depth - b.depth).abs() < 1e-5);
        }

        #[test]
        fn valid_points_round_trip(cam in arb_camera(), u in 0.0..96.0f64, v in 0.0..64.0f64, d in 0.1..30.0f64) {
            let p = cam.unproject(u, v, d);
            let pr = cam.project(p);
            prop_assert!(pr.valid || u.max(pr.u) >= 96.0 - 1e-9 || v.max(pr.v) >= 64.0 - 1e-9);
            let back = cam.unproject(pr.u, pr.v, pr.depth);
            for a in 0..3 {
                prop_assert!((back[a] - p[a]).abs() < 1e-4);
            }
        }

        #[test]
        fn disjoint_box_order_is_irrelevant(seed_boxes in prop::collection::vec((0usize..4, 0usize..4, 1u8..11), 1..5)) {
            let g = GridSpec::new([-4.0, -4.0, -1.0], [4.0, 4.0, 1.0], [16, 16, 4]).unwrap();
            let mut used = std::collections::HashSet::new();
            let boxes: Vec<BBox3D> = seed_boxes.into_iter().filter(|(i, j, _)| used.insert((*i, *j))).map(|(i, j, class)| BBox3D {
                center: [-3.0 + 2.0 * i as f64, -3.0 + 2.0 * j as f64, 0.0],
                length: 1.6, width: 1.2, height: 1.0, yaw: 0.3, velocity: [0.0; 2], class,
            }).collect();
            let fwd = boxes_to_occupancy(&boxes, &g);
            let rev: Vec<_> = boxes.iter().rev().copied().collect();
            prop_assert_eq!(fwd, boxes_to_occupancy(&rev, &g));
        }

        #[test]
        fn wrap_angle_range(a in -50.0..50.0f64) {
            let w = wrap_angle(a);
            prop_assert!((-PI..PI).contains(&w));
            prop_assert!(((a - w) / (2.0 * PI) - ((a - w) / (2.0 * PI)).round()).abs() < 1e-9);
        }
    }
}
