//! 3D trunk: scale merging, residual encoder, FPN decoder and the per-voxel
//! classification head.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::OccupancyGrid;
use crate::nn::{BatchNorm, Conv3d, ParamStore};
use crate::tensor::{ConvSpec, Real, Tensor, Upsample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OccNetConfig {
    /// Widths of the four residual stages.
    pub encoder_channels: [usize; 4],
    /// Shared channel count of all logit scales.
    pub logit_channels: usize,
    pub encoder: bool,
    pub decoder: bool,
}

impl Default for OccNetConfig {
    fn default() -> Self {
        OccNetConfig { encoder_channels: [8, 16, 32, 64], logit_channels: 16, encoder: true, decoder: true }
    }
}

fn dims5(op: &'static str, t: &Tensor<impl Real>) -> Result<[usize; 5]> {
    <[usize; 5]>::try_from(t.shape()).map_err(|_| Error::shape(op, format!("expected [B, C, X, Y, Z], got {:?}", t.shape())))
}

/// Adds each coarser volume, upsampled 2x, into the next finer one, starting
/// from the coarsest. `volumes[0]` is the finest; `projections[l]` maps the
/// channels of level `l + 1` onto level `l` when they differ.
pub fn merge_scales<T: Real>(volumes: &[Tensor<T>], projections: &[Option<&Conv3d<T>>]) -> Result<Vec<Tensor<T>>> {
    const OP: &str = "merge_scales";
    if volumes.is_empty() {
        return Err(Error::shape(OP, "no volumes"));
    }
    let mut out: Vec<Tensor<T>> = volumes.to_vec();
    for l in (0..volumes.len() - 1).rev() {
        let fine = dims5(OP, &out[l])?;
        let coarse = dims5(OP, &out[l + 1])?;
        if fine[0] != coarse[0] || (2..5).any(|a| fine[a] != 2 * coarse[a]) {
            return Err(Error::shape(OP, format!("cannot merge {coarse:?} into {fine:?}")));
        }
        let mut up = out[l + 1].upsample([2, 2, 2], Upsample::Trilinear)?;
        match projections.get(l).copied().flatten() {
            Some(p) => up = p.forward(&up)?,
            None if coarse[1] != fine[1] => {
                return Err(Error::shape(OP, format!("channels {} vs {} need a projection", coarse[1], fine[1])))
            }
            None => {}
        }
        out[l] = out[l].add(&up)?;
    }
    Ok(out)
}

struct BasicBlock<T: Real> {
    conv1: Conv3d<T>,
    bn1: BatchNorm<T>,
    conv2: Conv3d<T>,
    bn2: BatchNorm<T>,
    shortcut: Option<(Conv3d<T>, BatchNorm<T>)>,
}

impl<T: Real> BasicBlock<T> {
    fn new(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let shortcut = if stride != 1 || cin != cout {
            Some((
                Conv3d::new(store, &format!("{name}.down"), cin, cout, 1, ConvSpec::new(stride, 0), false, rng)?,
                BatchNorm::new(store, &format!("{name}.down_bn"), cout)?,
            ))
        } else {
            None
        };
        Ok(BasicBlock {
            conv1: Conv3d::new(store, &format!("{name}.conv1"), cin, cout, 3, ConvSpec::new(stride, 1), false, rng)?,
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), cout)?,
            conv2: Conv3d::new(store, &format!("{name}.conv2"), cout, cout, 3, ConvSpec::new(1, 1), false, rng)?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), cout)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, train)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        y.add(&skip)?.relu()
    }
}

enum EncoderStage<T: Real> {
    Residual(Vec<BasicBlock<T>>),
    /// Ablation stand-in: a strided pointwise projection.
    Projection(Conv3d<T>),
}

/// 3D ResNet18-style encoder: four stages of two basic blocks, stride 2
/// between stages.
pub struct Encoder3d<T: Real = f32> {
    stages: Vec<EncoderStage<T>>,
}

impl<T: Real> Encoder3d<T> {
    pub fn new(store: &mut ParamStore<T>, cin: usize, cfg: &OccNetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut stages = Vec::new();
        let mut c = cin;
        for (s, &w) in cfg.encoder_channels.iter().enumerate() {
            let stride = if s == 0 { 1 } else { 2 };
            let name = format!("occ.enc.stage{s}");
            stages.push(if cfg.encoder {
                EncoderStage::Residual(vec![
                    BasicBlock::new(store, &format!("{name}.block0"), c, w, stride, rng)?,
                    BasicBlock::new(store, &format!("{name}.block1"), w, w, 1, rng)?,
                ])
            } else {
                EncoderStage::Projection(Conv3d::new(store, &format!("{name}.proj"), c, w, 1, ConvSpec::new(stride, 0), true, rng)?)
            });
            c = w;
        }
        Ok(Encoder3d { stages })
    }

    /// Stage outputs, finest first. Every spatial dim must be divisible by
    /// `2^(stages - 1)`.
    pub fn forward(&self, x: &Tensor<T>, train: bool) -> Result<Vec<Tensor<T>>> {
        let d = dims5("encode3d", x)?;
        let f = 1 << (self.stages.len() - 1);
        if d[2..].iter().any(|&n| n % f != 0) {
            return Err(Error::Contract(format!(
                "volume {:?} not divisible by {f} for {} encoder stages",
                &d[2..],
                self.stages.len()
            )));
        }
        let mut outs = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for st in &self.stages {
            h = match st {
                EncoderStage::Residual(blocks) => {
                    for b in blocks {
                        h = b.forward(&h, train)?;
                    }
                    h
                }
                EncoderStage::Projection(p) => p.forward(&h)?,
            };
            outs.push(h.clone());
        }
        Ok(outs)
    }
}

/// 3D feature pyramid: lateral pointwise conv + BN per level, top-down
/// trilinear upsample-add, 3x3x3 smoothing per output scale.
pub struct Decoder3d<T: Real = f32> {
    lateral: Vec<(Conv3d<T>, BatchNorm<T>)>,
    smooth: Option<Vec<Conv3d<T>>>,
}

impl<T: Real> Decoder3d<T> {
    pub fn new(store: &mut ParamStore<T>, cfg: &OccNetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = cfg.logit_channels;
        let mut lateral = Vec::new();
        for (l, &cin) in cfg.encoder_channels.iter().enumerate() {
            lateral.push((
                Conv3d::new(store, &format!("occ.dec.lateral{l}"), cin, c, 1, ConvSpec::default(), false, rng)?,
                BatchNorm::new(store, &format!("occ.dec.lateral{l}_bn"), c)?,
            ));
        }
        let smooth = if cfg.decoder {
            Some(
                (0..lateral.len())
                    .map(|l| Conv3d::new(store, &format!("occ.dec.smooth{l}"), c, c, 3, ConvSpec::new(1, 1), true, rng))
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        Ok(Decoder3d { lateral, smooth })
    }

    /// Logit volumes, finest first, all with the same channel count.
    pub fn forward(&self, encoded: &[Tensor<T>], train: bool) -> Result<Vec<Tensor<T>>> {
        if encoded.len() != self.lateral.len() {
            return Err(Error::Contract(format!(
                "decoder expects {} levels, got {}",
                self.lateral.len(),
                encoded.len()
            )));
        }
        let lat: Vec<Tensor<T>> = encoded
            .iter()
            .zip(&self.lateral)
            .map(|(x, (conv, bn))| bn.forward(&conv.forward(x)?, train))
            .collect::<Result<_>>()?;
        let Some(smooth) = &self.smooth else {
            return Ok(lat);
        };
        let n = lat.len();
        let mut out = vec![None; n];
        let mut top: Option<Tensor<T>> = None;
        for l in (0..n).rev() {
            let mut t = lat[l].clone();
            if let Some(up) = &top {
                t = t.add(&up.upsample([2, 2, 2], Upsample::Trilinear)?)?;
            }
            out[l] = Some(smooth[l].forward(&t)?);
            top = Some(t);
        }
        Ok(out.into_iter().map(Option::unwrap).collect())
    }
}

/// Shared per-voxel MLP `C -> C -> classes` followed by a softmax.
pub struct OccHead<T: Real = f32> {
    hidden: Conv3d<T>,
    pub out: Conv3d<T>,
}

impl<T: Real> OccHead<T> {
    pub fn new(store: &mut ParamStore<T>, channels: usize, classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(OccHead {
            hidden: Conv3d::new(store, "occ.head.0", channels, channels, 1, ConvSpec::default(), true, rng)?,
            out: Conv3d::new(store, "occ.head.1", channels, classes, 1, ConvSpec::default(), true, rng)?,
        })
    }

    /// Class probabilities `[B, classes, X, Y, Z]`.
    pub fn probabilities(&self, logits: &Tensor<T>) -> Result<Tensor<T>> {
        self.out.forward(&self.hidden.forward(logits)?.relu()?)?.softmax(1)
    }
}

/// Per-voxel argmax of `[B, classes, X, Y, Z]` probabilities, lowest class
/// on ties.
pub fn argmax_grids<T: Real>(probs: &Tensor<T>) -> Result<Vec<OccupancyGrid>> {
    let [b, _, x, y, z] = dims5("argmax_grids", probs)?;
    let labels = probs.argmax(1);
    let n = x * y * z;
    (0..b)
        .map(|i| OccupancyGrid::new([x, y, z], labels[i * n..(i + 1) * n].iter().map(|&l| l as u8).collect()))
        .collect()
}
