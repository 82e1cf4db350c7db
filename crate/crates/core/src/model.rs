//! The full network: image pyramid, view transformation, 3D trunk, head and
//! the optional auxiliary detection branch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classes::NUM_CLASSES;
use crate::config::ModelConfig;
use crate::detection::{AuxDetection, DetectionInputs, DetectionOutput};
use crate::error::{Error, Result};
use crate::geometry::{CameraRig, GridSpec, OccupancyGrid, LEVEL_STRIDES};
use crate::image_encoder::{grid_mask, ImageEncoder};
use crate::nn::ParamStore;
use crate::occnet::{argmax_grids, merge_scales, Decoder3d, Encoder3d, OccHead};
use crate::tensor::Tensor;
use crate::vt::{apply_vt, build_vt, FusionGate, VtMatrices};

/// Offset between the main-branch and detection-branch init streams, so
/// toggling the branch leaves the main weights untouched.
const DET_STREAM: u64 = 0x5eed_0de7;

/// Everything one forward pass produces.
pub struct ForwardOutput {
    /// Image pyramid `[B, N, C, H/s, W/s]`, strides 8, 16, 32.
    pub pyramid: Vec<Tensor<f32>>,
    /// Global BEV planes `[B, C, X_l, Y_l]`.
    pub bev: Vec<Tensor<f32>>,
    /// Volume logits `[B, C, X_l, Y_l, Z_l]`, finest first.
    pub logits: Vec<Tensor<f32>>,
    /// Class probabilities per logit scale, finest first.
    pub probs: Vec<Tensor<f32>>,
    /// One detection output per batch element; empty without the branch.
    pub detection: Vec<DetectionOutput<f32>>,
}

impl ForwardOutput {
    pub fn predictions(&self) -> Result<Vec<OccupancyGrid>> {
        argmax_grids(&self.probs[0])
    }
}

pub struct OccModel {
    pub cfg: ModelConfig,
    pub grid: GridSpec,
    pub rig: CameraRig,
    pub store: ParamStore<f32>,
    pub vt: VtMatrices,
    image: ImageEncoder<f32>,
    gates: Vec<Option<FusionGate<f32>>>,
    encoder: Encoder3d<f32>,
    decoder: Decoder3d<f32>,
    head: OccHead<f32>,
    det: Option<AuxDetection<f32>>,
}

/// Feature map sizes of the lifted levels for `(width, height)` images.
pub fn feature_sizes(image: (usize, usize), scales: usize) -> Vec<(usize, usize)> {
    LEVEL_STRIDES[..scales].iter().map(|&s| (image.1 / s, image.0 / s)).collect()
}

impl OccModel {
    pub fn new(cfg: &ModelConfig, grid: &GridSpec, rig: &CameraRig, seed: u64) -> Result<Self> {
        let vt = build_vt(rig, grid, &feature_sizes(rig.image_size()?, cfg.scales))?;
        Self::with_vt(cfg, grid, rig, vt, seed)
    }

    /// Builds the model around precomputed view-transformation matrices.
    pub fn with_vt(cfg: &ModelConfig, grid: &GridSpec, rig: &CameraRig, vt: VtMatrices, seed: u64) -> Result<Self> {
        if vt.num_cameras != rig.len() || vt.levels.len() != cfg.scales {
            return Err(Error::Contract(format!(
                "view transform for {} cameras / {} levels, model needs {} / {}",
                vt.num_cameras,
                vt.levels.len(),
                rig.len(),
                cfg.scales
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = ImageEncoder::new(&mut store, &cfg.image, &mut rng)?;
        let c = cfg.image.feature_channels;
        let gates = (0..cfg.scales)
            .map(|l| {
                if cfg.fusion_gate {
                    FusionGate::new(&mut store, &format!("vt.gate{l}"), c, &mut rng).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?;
        let encoder = Encoder3d::new(&mut store, c, &cfg.occ, &mut rng)?;
        let decoder = Decoder3d::new(&mut store, &cfg.occ, &mut rng)?;
        let head = OccHead::new(&mut store, cfg.occ.logit_channels, NUM_CLASSES, &mut rng)?;
        let det = if cfg.aux {
            let mut drng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(DET_STREAM));
            Some(AuxDetection::new(&mut store, &cfg.det, cfg.occ.logit_channels, &mut drng)?)
        } else {
            None
        };
        Ok(OccModel {
            cfg: cfg.clone(),
            grid: *grid,
            rig: rig.clone(),
            store,
            vt,
            image,
            gates,
            encoder,
            decoder,
            head,
            det,
        })
    }

    pub fn has_aux(&self) -> bool {
        self.det.is_some()
    }

    pub fn detection(&self) -> Option<&AuxDetection<f32>> {
        self.det.as_ref()
    }

    /// Runs the network on `[B, N, 3, H, W]` images. `train` selects batch
    /// statistics; `aux` also runs the detection branch; `mask_seed`
    /// applies grid-mask augmentation.
    pub fn forward(&self, images: &Tensor<f32>, train: bool, aux: bool, mask_seed: Option<u64>) -> Result<ForwardOutput> {
        let s = images.shape();
        let (w, h) = self.rig.image_size()?;
        if s.len() != 5 || s[1] != self.rig.len() || s[3] != h || s[4] != w {
            return Err(Error::shape(
                "forward",
                format!("images {s:?} for {} cameras of {w}x{h}", self.rig.len()),
            ));
        }
        let masked;
        let input = match mask_seed {
            Some(seed) => {
                masked = grid_mask(images, &self.cfg.grid_mask, seed)?;
                &masked
            }
            None => images,
        };
        let pyramid = self.image.encode(input, train)?;
        let mut fused = Vec::with_capacity(self.cfg.scales);
        let mut bev = Vec::with_capacity(self.cfg.scales);
        for (l, lvl) in self.vt.levels.iter().enumerate() {
            let (local, plane) = apply_vt(&pyramid[l], lvl)?;
            fused.push(FusionGate::fuse(self.gates[l].as_ref(), &local, &plane)?);
            bev.push(plane);
        }
        let merged = merge_scales(&fused, &[])?;
        let encoded = self.encoder.forward(&merged[0], train)?;
        let logits = self.decoder.forward(&encoded, train)?;
        let probs = logits.iter().map(|l| self.head.probabilities(l)).collect::<Result<Vec<_>>>()?;
        let mut detection = Vec::new();
        if let (true, Some(det)) = (aux, &self.det) {
            let inputs = DetectionInputs { pyramid: &pyramid, bev: &bev, logits: &logits, rig: &self.rig, grid: &self.grid };
            for b in 0..s[0] {
                detection.push(det.forward(&inputs, b)?);
            }
        }
        Ok(ForwardOutput { pyramid, bev, logits, probs, detection })
    }

    /// Inference: running statistics, no augmentation, no auxiliary branch.
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Vec<OccupancyGrid>> {
        crate::tensor::no_grad(|| self.forward(images, false, false, None)?.predictions())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::synth::{generate, SceneSpec};

    fn tiny() -> (ModelConfig, SceneSpec) {
        let mut cfg = RunConfig::default();
        cfg.scene.grid = GridSpec::new([-8.0, -8.0, -2.0], [8.0, 8.0, 2.0], [16, 16, 8]).unwrap();
        cfg.scene.image_size = [64, 64];
        cfg.model.det.queries = 10;
        cfg.model.det.layers = 1;
        cfg.validate().unwrap();
        (cfg.model, cfg.scene)
    }

    #[test]
    fn end_to_end_shapes() {
        let (mcfg, spec) = tiny();
        let s = generate(&spec).unwrap();
        let model = OccModel::new(&mcfg, &spec.grid, &s.rig, 0).unwrap();
        let out = model.forward(&s.image_tensor().unwrap(), true, true, Some(1)).unwrap();
        let dims: Vec<Vec<usize>> = out.probs.iter().map(|p| p.shape().to_vec()).collect();
        assert_eq!(
            dims,
            vec![vec![1, 17, 16, 16, 8], vec![1, 17, 8, 8, 4], vec![1, 17, 4, 4, 2], vec![1, 17, 2, 2, 1]]
        );
        assert_eq!(out.detection.len(), 1);
        assert_eq!(out.detection[0].heads.len(), 3);
        let p = out.probs[0].to_vec();
        let n = 16 * 16 * 8;
        for v in 0..n {
            let sum: f32 = (0..17).map(|c| p[c * n + v]).sum();
            assert!((sum - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn aux_toggle_leaves_inference_identical() {
        let (mut mcfg, spec) = tiny();
        let s = generate(&spec).unwrap();
        let x = s.image_tensor().unwrap();
        let with = OccModel::new(&mcfg, &spec.grid, &s.rig, 4).unwrap();
        mcfg.aux = false;
        let without = OccModel::new(&mcfg, &spec.grid, &s.rig, 4).unwrap();
        let a = with.forward(&x, false, false, None).unwrap();
        let b = without.forward(&x, false, false, None).unwrap();
        assert_eq!(a.probs[0].to_vec(), b.probs[0].to_vec());
        assert_eq!(with.predict(&x).unwrap(), without.predict(&x).unwrap());
    }

    #[test]
    fn ablation_toggles_keep_shapes() {
        let (mut mcfg, spec) = tiny();
        mcfg.occ.encoder = false;
        mcfg.occ.decoder = false;
        mcfg.fusion_gate = false;
        mcfg.det.self_attention = false;
        mcfg.det.volume = false;
        let s = generate(&spec).unwrap();
        let model = OccModel::new(&mcfg, &spec.grid, &s.rig, 0).unwrap();
        let out = model.forward(&s.image_tensor().unwrap(), true, true, None).unwrap();
        assert_eq!(out.probs.len(), 4);
        assert_eq!(out.probs[0].shape(), [1, 17, 16, 16, 8]);
        assert_eq!(out.detection[0].heads.len(), 2);
    }
}
