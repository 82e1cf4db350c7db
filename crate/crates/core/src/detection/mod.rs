//! Auxiliary 3D detection branch: learnable queries refined against image,
//! BEV and volume features, supervised through set-matched boxes.

pub mod attention;
pub mod matching;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classes::NUM_DET_CLASSES;
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, BBox3D, CameraRig, GridSpec, Vec3};
use crate::nn::{LayerNorm, Linear, Mlp2, ParamStore};
use crate::tensor::{Real, Tensor};

pub use attention::{sample_bev, sample_visual, sample_volume, sparse_self_attention, voxelize, weighted_sum};
pub use matching::{hungarian, match_queries, MatchResult};

/// Width of the internal box encoding:
/// `(x, y, z)` normalized to the grid extent, log size ratios `(l, h, w)`
/// against the default size, `(sin yaw, cos yaw)` and `(vx, vy)`.
pub const BOX_CODE: usize = 10;

const SAMPLER_GAIN: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionConfig {
    pub queries: usize,
    pub channels: usize,
    pub layers: usize,
    /// Self-attention cell side in base-grid cells.
    pub voxel_cells: usize,
    /// Box size `(l, h, w)` emitted for a zero size residual.
    pub default_size: [f64; 3],
    pub self_attention: bool,
    pub visual: bool,
    pub bev: bool,
    pub volume: bool,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            queries: 100,
            channels: 32,
            layers: 6,
            voxel_cells: 4,
            default_size: [2.0, 1.5, 1.5],
            self_attention: true,
            visual: true,
            bev: true,
            volume: true,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queries == 0 || self.channels == 0 || self.layers == 0 || self.voxel_cells == 0 {
            return Err(Error::Contract(format!("detection sizes must be positive: {self:?}")));
        }
        if self.default_size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Contract(format!("default box size {:?}", self.default_size)));
        }
        Ok(())
    }

    pub fn heads_per_layer(&self) -> usize {
        self.visual as usize + self.bev as usize + self.volume as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaModule {
    Visual,
    Bev,
    Volume,
}

impl CaModule {
    pub fn name(self) -> &'static str {
        match self {
            CaModule::Visual => "visual",
            CaModule::Bev => "bev",
            CaModule::Volume => "volume",
        }
    }
}

/// Internal box code of a ground-truth box.
pub fn encode_box(b: &BBox3D, grid: &GridSpec, default_size: [f64; 3]) -> [f64; BOX_CODE] {
    let n: [f64; 3] = std::array::from_fn(|a| (b.center[a] - grid.min[a]) / (grid.max[a] - grid.min[a]));
    let (s, c) = b.yaw.sin_cos();
    [
        n[0],
        n[1],
        n[2],
        (b.length / default_size[0]).ln(),
        (b.height / default_size[1]).ln(),
        (b.width / default_size[2]).ln(),
        s,
        c,
        b.velocity[0],
        b.velocity[1],
    ]
}

/// Output parameters `(x, y, z, l, h, w, yaw, vx, vy)` of an internal code.
pub fn decode_box(code: &[f64], grid: &GridSpec, default_size: [f64; 3]) -> [f64; 9] {
    let xyz: [f64; 3] = std::array::from_fn(|a| grid.min[a] + code[a] * (grid.max[a] - grid.min[a]));
    [
        xyz[0],
        xyz[1],
        xyz[2],
        default_size[0] * code[3].exp(),
        default_size[1] * code[4].exp(),
        default_size[2] * code[5].exp(),
        wrap_angle(code[6].atan2(code[7])),
        code[8],
        code[9],
    ]
}

/// Normalized `[0, 1]^3` location to world meters.
pub fn denormalize(grid: &GridSpec, n: &[f64]) -> Vec3 {
    std::array::from_fn(|a| grid.min[a] + n[a] * (grid.max[a] - grid.min[a]))
}

/// One supervised prediction: per-query class logits over the detection
/// classes plus background (last), and internal box codes.
pub struct HeadOutput<T: Real = f32> {
    pub layer: usize,
    pub module: CaModule,
    pub class_logits: Tensor<T>,
    pub boxes: Tensor<T>,
}

impl<T: Real> HeadOutput<T> {
    /// Decoded `(x, y, z, l, h, w, yaw, vx, vy)` per query.
    pub fn decoded_boxes(&self, grid: &GridSpec, default_size: [f64; 3]) -> Vec<[f64; 9]> {
        self.boxes.to_f64_vec().chunks(BOX_CODE).map(|c| decode_box(c, grid, default_size)).collect()
    }

    pub fn name(&self) -> String {
        format!("l{}_{}", self.layer + 1, self.module.name())
    }
}

pub struct DetectionOutput<T: Real = f32> {
    pub heads: Vec<HeadOutput<T>>,
    /// Normalized points after each layer, `[M, 3]`.
    pub points: Vec<Tensor<T>>,
}

/// Per-sample inputs to the refinement stack.
pub struct DetectionInputs<'a, T: Real> {
    /// Image pyramid levels `[B, N, C, H_l, W_l]`.
    pub pyramid: &'a [Tensor<T>],
    /// Global BEV features `[B, C, X_l, Y_l]`.
    pub bev: &'a [Tensor<T>],
    /// Volume logits `[B, C_logit, X_l, Y_l, Z_l]`.
    pub logits: &'a [Tensor<T>],
    pub rig: &'a CameraRig,
    pub grid: &'a GridSpec,
}

struct Head<T: Real> {
    class: Mlp2<T>,
    boxes: Mlp2<T>,
}

impl<T: Real> Head<T> {
    fn new(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Head {
            class: Mlp2::new(store, &format!("{name}.class"), [c, c, NUM_DET_CLASSES + 1], rng)?,
            boxes: Mlp2::new(store, &format!("{name}.box"), [c, c, BOX_CODE], rng)?,
        })
    }
}

/// Level weights, point offsets and head of one cross-attention position.
struct CaBlock<T: Real> {
    module: CaModule,
    weights: Mlp2<T>,
    offset: Mlp2<T>,
    head: Head<T>,
    value: Option<Linear<T>>,
    norm: LayerNorm<T>,
}

pub struct AuxDetection<T: Real = f32> {
    pub cfg: DetectionConfig,
    pub queries: Tensor<T>,
    sampler: Mlp2<T>,
    self_attn: Option<(Tensor<T>, LayerNorm<T>)>,
    blocks: Vec<CaBlock<T>>,
}

impl<T: Real> AuxDetection<T> {
    /// `logit_channels` is the channel count of the sampled volume logits.
    pub fn new(store: &mut ParamStore<T>, cfg: &DetectionConfig, logit_channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let queries = store.uniform("det.queries", &[cfg.queries, c], 1, rng)?;
        let sampler = Mlp2::new(store, "det.sampler", [c, c, 3], rng)?;
        // Spread the initial points over the extent instead of its midpoint.
        let w = &sampler.out.weight;
        w.set_data(w.to_vec().into_iter().map(|v| v * T::from_f64(SAMPLER_GAIN)).collect())?;
        let self_attn = if cfg.self_attention {
            Some((store.uniform("det.self_attn", &[27, c, c], 27 * c, rng)?, LayerNorm::new(store, "det.self_attn_norm", c)?))
        } else {
            None
        };
        let mut blocks = Vec::new();
        for (module, on, levels) in
            [(CaModule::Visual, cfg.visual, 3), (CaModule::Bev, cfg.bev, 3), (CaModule::Volume, cfg.volume, 4)]
        {
            if !on {
                continue;
            }
            let name = format!("det.{}", module.name());
            blocks.push(CaBlock {
                module,
                weights: Mlp2::new(store, &format!("{name}.weights"), [c, c, levels], rng)?,
                offset: Mlp2::new(store, &format!("{name}.offset"), [c, c, 3], rng)?,
                head: Head::new(store, &format!("{name}.head"), c, rng)?,
                value: if module == CaModule::Volume {
                    Some(Linear::new(store, &format!("{name}.value"), logit_channels, c, rng)?)
                } else {
                    None
                },
                norm: LayerNorm::new(store, &format!("{name}.norm"), c)?,
            });
        }
        Ok(AuxDetection { cfg: cfg.clone(), queries, sampler, self_attn, blocks })
    }

    /// Normalized sampling locations `[M, 3]` in `[0, 1]^3`.
    pub fn decode_points(&self, q: &Tensor<T>) -> Result<Tensor<T>> {
        self.sampler.forward(q)?.sigmoid()
    }

    /// Runs the refinement stack for batch element `b`.
    pub fn forward(&self, inp: &DetectionInputs<'_, T>, b: usize) -> Result<DetectionOutput<T>> {
        let grid = inp.grid;
        let m = self.cfg.queries;
        let cell: Vec3 = std::array::from_fn(|a| grid.cell_size()[a] * self.cfg.voxel_cells as f64);
        let world = |s: &Tensor<T>| -> Vec<Vec3> { s.to_f64_vec().chunks(3).map(|n| denormalize(grid, n)).collect() };

        let mut q = self.queries.clone();
        let mut s = self.decode_points(&q)?;
        let mut heads = Vec::new();
        let mut points = Vec::new();
        for layer in 0..self.cfg.layers {
            if let Some((w, norm)) = &self.self_attn {
                let vox = voxelize(&world(&s), grid.min, cell);
                q = norm.forward(&q.add(&sparse_self_attention(&q, &vox, w)?)?)?;
            }
            for blk in &self.blocks {
                let pts = world(&s);
                let samples = match blk.module {
                    CaModule::Visual => sample_visual(inp.pyramid, b, &pts, inp.rig)?,
                    CaModule::Bev => sample_bev(inp.bev, b, &pts, grid)?,
                    CaModule::Volume => sample_volume(inp.logits, b, &pts, grid)?,
                };
                let expected = blk.weights.out.out_features();
                if samples.len() != expected {
                    return Err(Error::Contract(format!(
                        "{} cross-attention needs {expected} scales, got {}",
                        blk.module.name(),
                        samples.len()
                    )));
                }
                let w = blk.weights.forward(&q)?.softmax(1)?;
                let mut sampled = weighted_sum(&samples, &w)?;
                if let Some(v) = &blk.value {
                    sampled = v.forward(&sampled)?;
                }
                q = blk.norm.forward(&q.add(&sampled)?)?;
                s = s.add(&blk.offset.forward(&q)?)?.clamp(0.0, 1.0)?;

                let raw = blk.head.boxes.forward(&q)?;
                let rest = raw.narrow(1, 3, BOX_CODE - 3)?;
                let xyz = s.add(&raw.narrow(1, 0, 3)?)?;
                heads.push(HeadOutput {
                    layer,
                    module: blk.module,
                    class_logits: blk.head.class.forward(&q)?,
                    boxes: Tensor::concat(&[xyz, rest], 1)?,
                });
            }
            debug_assert_eq!(s.shape(), [m, 3]);
            points.push(s.clone());
        }
        Ok(DetectionOutput { heads, points })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup(cfg: &DetectionConfig) -> (ParamStore<f64>, AuxDetection<f64>, GridSpec, CameraRig) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let det = AuxDetection::new(&mut store, cfg, 4, &mut rng).unwrap();
        let grid = GridSpec::new([-8.0, -8.0, -2.0], [8.0, 8.0, 2.0], [16, 16, 8]).unwrap();
        let rig = CameraRig::ring(2, 1.0, 0.0, 1.3, 64, 64);
        (store, det, grid, rig)
    }

    fn features(c: usize, seed: u64, grad: bool) -> (Vec<Tensor<f64>>, Vec<Tensor<f64>>, Vec<Tensor<f64>>) {
        let mut x = seed as f64;
        let mut rnd = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let v: Vec<f64> = (0..n)
                .map(|_| {
                    x += 1.0;
                    (x * 12.9898).sin()
                })
                .collect();
            if grad {
                Tensor::param(v, shape).unwrap()
            } else {
                Tensor::from_vec(v, shape).unwrap()
            }
        };
        let pyr = vec![rnd(&[1, 2, c, 8, 8]), rnd(&[1, 2, c, 4, 4]), rnd(&[1, 2, c, 2, 2])];
        let bev = vec![rnd(&[1, c, 16, 16]), rnd(&[1, c, 8, 8]), rnd(&[1, c, 4, 4])];
        let logits = vec![rnd(&[1, 4, 16, 16, 8]), rnd(&[1, 4, 8, 8, 4]), rnd(&[1, 4, 4, 4, 2]), rnd(&[1, 4, 2, 2, 1])];
        (pyr, bev, logits)
    }

    fn small() -> DetectionConfig {
        DetectionConfig { queries: 12, channels: 6, layers: 2, ..Default::default() }
    }

    #[test]
    fn head_count_is_three_per_layer() {
        for layers in [1, 6] {
            let cfg = DetectionConfig { layers, ..small() };
            let (_, det, grid, rig) = setup(&cfg);
            let (pyr, bev, logits) = features(6, 0, false);
            let out = det.forward(&DetectionInputs { pyramid: &pyr, bev: &bev, logits: &logits, rig: &rig, grid: &grid }, 0).unwrap();
            assert_eq!(out.heads.len(), 3 * layers);
            assert_eq!(out.heads[0].class_logits.shape(), [12, NUM_DET_CLASSES + 1]);
            assert_eq!(out.heads[0].boxes.shape(), [12, BOX_CODE]);
            for p in &out.points {
                assert!(p.to_vec().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn zero_parameters_trace() {
        let (store, det, grid, rig) = setup(&small());
        for p in store.params() {
            p.set_data(vec![0.0; p.numel()]).unwrap();
        }
        let (pyr, bev, logits) = features(6, 1, false);
        let out = det.forward(&DetectionInputs { pyramid: &pyr, bev: &bev, logits: &logits, rig: &rig, grid: &grid }, 0).unwrap();
        for h in &out.heads {
            assert!(h.class_logits.to_vec().iter().all(|&v| v == 0.0));
            for b in h.decoded_boxes(&grid, det.cfg.default_size) {
                assert_eq!(&b[..6], &[0.0, 0.0, 0.0, 2.0, 1.5, 1.5]);
                assert_eq!(b[6], 0.0);
            }
        }
    }

    #[test]
    fn decode_points_maps_to_extent() {
        let (store, det, grid, _) = setup(&small());
        let q = store.get("det.queries").unwrap().clone();
        let s = det.decode_points(&q).unwrap().to_vec();
        let h = det.sampler.hidden.forward(&q).unwrap().relu().unwrap();
        let pre = det.sampler.out.forward(&h).unwrap().to_vec();
        for (n, z) in s.chunks(3).zip(pre.chunks(3)) {
            let p = denormalize(&grid, n);
            for a in 0..3 {
                let want = grid.min[a] + (grid.max[a] - grid.min[a]) / (1.0 + (-z[a]).exp());
                assert!((p[a] - want).abs() < 1e-12);
                assert!(grid.min[a] <= p[a] && p[a] <= grid.max[a]);
            }
        }
    }

    #[test]
    fn gradients_reach_queries_and_all_feature_paths() {
        let (store, det, grid, rig) = setup(&small());
        let (pyr, bev, logits) = features(6, 2, true);
        let out = det.forward(&DetectionInputs { pyramid: &pyr, bev: &bev, logits: &logits, rig: &rig, grid: &grid }, 0).unwrap();
        let mut total = out.heads[0].class_logits.abs().unwrap().sum().unwrap();
        for h in &out.heads[1..] {
            total = total.add(&h.class_logits.abs().unwrap().sum().unwrap()).unwrap();
            total = total.add(&h.boxes.sum().unwrap()).unwrap();
        }
        total.backward().unwrap();
        let norm = |t: &Tensor<f64>| t.grad().map_or(0.0, |g| g.iter().map(|v| v * v).sum::<f64>());
        assert!(norm(store.get("det.queries").unwrap()) > 0.0);
        assert!(pyr.iter().map(norm).sum::<f64>() > 0.0);
        assert!(bev.iter().map(norm).sum::<f64>() > 0.0);
        assert!(logits.iter().map(norm).sum::<f64>() > 0.0);
    }

    #[test]
    fn box_code_round_trip() {
        let grid = GridSpec::default();
        let b = BBox3D::from_params([1.0, -2.0, 0.5, 4.0, 1.6, 1.8, 2.5, 0.3, -0.1], 4).unwrap();
        let d = decode_box(&encode_box(&b, &grid, [2.0, 1.5, 1.5]), &grid, [2.0, 1.5, 1.5]);
        for (x, y) in d.iter().zip(b.to_params()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn disabled_modules_drop_heads() {
        let cfg = DetectionConfig { bev: false, volume: false, self_attention: false, ..small() };
        let (_, det, grid, rig) = setup(&cfg);
        let (pyr, _, _) = features(6, 0, false);
        let out = det.forward(&DetectionInputs { pyramid: &pyr, bev: &[], logits: &[], rig: &rig, grid: &grid }, 0).unwrap();
        assert_eq!(out.heads.len(), cfg.layers);
        assert!(out.heads.iter().all(|h| h.module == CaModule::Visual));
    }
}
