//! Multi-scale image features: a small strided CNN with an FPN on top, and
//! grid-mask augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LEVEL_STRIDES;
use crate::nn::{BatchNorm, Conv2d, ParamStore};
use crate::tensor::{Real, Tensor, Upsample};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridMaskConfig {
    pub prob: f64,
    pub ratio: f64,
    /// Inclusive range the grid period (pixels) is drawn from.
    pub period: (usize, usize),
}

impl Default for GridMaskConfig {
    fn default() -> Self {
        GridMaskConfig { prob: 0.5, ratio: 0.5, period: (8, 32) }
    }
}

/// Zeroes a regular grid of square holes in each `[3, H, W]` image of a
/// `[B, N, 3, H, W]` batch with probability `prob`. Hole side is
/// `floor(ratio * period)` pixels at a random phase.
pub fn grid_mask(images: &Tensor<f32>, cfg: &GridMaskConfig, seed: u64) -> Result<Tensor<f32>> {
    let s = images.shape();
    if s.len() != 5 {
        return Err(Error::shape("grid_mask", format!("expected [B, N, 3, H, W], got {s:?}")));
    }
    if !(cfg.ratio > 0.0 && cfg.ratio < 1.0) || !(0.0..=1.0).contains(&cfg.prob) {
        return Err(Error::Contract(format!("grid mask ratio {} / prob {} out of range", cfg.ratio, cfg.prob)));
    }
    if cfg.period.0 == 0 || cfg.period.0 > cfg.period.1 {
        return Err(Error::Contract(format!("grid mask period range {:?}", cfg.period)));
    }
    let (c, h, w) = (s[2], s[3], s[4]);
    let mut data = images.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for img in data.chunks_mut(c * h * w) {
        if !rng.random_bool(cfg.prob) {
            continue;
        }
        let d = rng.random_range(cfg.period.0..=cfg.period.1);
        let side = (cfg.ratio * d as f64).floor() as usize;
        let (dy, dx) = (rng.random_range(0..d), rng.random_range(0..d));
        if side == 0 {
            continue;
        }
        for y in 0..h {
            if (y + dy) % d >= side {
                continue;
            }
            for x in 0..w {
                if (x + dx) % d < side {
                    for ch in 0..c {
                        img[(ch * h + y) * w + x] = 0.0;
                    }
                }
            }
        }
    }
    Tensor::from_vec(data, s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageEncoderConfig {
    /// Output channels of the five stride-2 stages.
    pub stage_channels: [usize; 5],
    /// Shared channel count of the pyramid levels.
    pub feature_channels: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        ImageEncoderConfig { stage_channels: [8, 16, 32, 48, 64], feature_channels: 32 }
    }
}

struct Stage<T: Real> {
    conv: Conv2d<T>,
    bn: BatchNorm<T>,
}

pub struct ImageEncoder<T: Real = f32> {
    stages: Vec<Stage<T>>,
    lateral: Vec<Conv2d<T>>,
    smooth: Vec<Conv2d<T>>,
    pub feature_channels: usize,
}

impl<T: Real> ImageEncoder<T> {
    pub fn new(store: &mut ParamStore<T>, cfg: &ImageEncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &cout) in cfg.stage_channels.iter().enumerate() {
            stages.push(Stage {
                conv: Conv2d::new(store, &format!("img.stage{i}.conv"), cin, cout, 3, 2, 1, false, rng)?,
                bn: BatchNorm::new(store, &format!("img.stage{i}.bn"), cout)?,
            });
            cin = cout;
        }
        let c = cfg.feature_channels;
        let mut lateral = Vec::new();
        let mut smooth = Vec::new();
        for l in 0..3 {
            let cin = cfg.stage_channels[2 + l];
            lateral.push(Conv2d::new(store, &format!("img.fpn.lateral{l}"), cin, c, 1, 1, 0, true, rng)?);
            smooth.push(Conv2d::new(store, &format!("img.fpn.smooth{l}"), c, c, 3, 1, 1, true, rng)?);
        }
        Ok(ImageEncoder { stages, lateral, smooth, feature_channels: c })
    }

    /// `[B, N, 3, H, W]` images to three `[B, N, C, H/s, W/s]` levels with
    /// strides 8, 16, 32.
    pub fn encode(&self, images: &Tensor<T>, train: bool) -> Result<Vec<Tensor<T>>> {
        let s = images.shape().to_vec();
        if s.len() != 5 || s[2] != 3 {
            return Err(Error::shape("encode", format!("expected [B, N, 3, H, W], got {s:?}")));
        }
        let (b, n, h, w) = (s[0], s[1], s[3], s[4]);
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Contract(format!("image size {h}x{w} must be divisible by 32")));
        }
        let mut x = images.reshape(&[b * n, 3, h, w])?;
        let mut taps = Vec::new();
        for (i, st) in self.stages.iter().enumerate() {
            x = st.bn.forward(&st.conv.forward(&x)?, train)?.relu()?;
            if i >= 2 {
                taps.push(x.clone());
            }
        }
        let mut levels = vec![None, None, None];
        let mut top: Option<Tensor<T>> = None;
        for l in (0..3).rev() {
            let mut p = self.lateral[l].forward(&taps[l])?;
            if let Some(t) = &top {
                p = p.add(&t.upsample_2d(2, Upsample::Nearest)?)?;
            }
            levels[l] = Some(self.smooth[l].forward(&p)?);
            top = Some(p);
        }
        let c = self.feature_channels;
        levels
            .into_iter()
            .zip(LEVEL_STRIDES)
            .map(|(f, stride)| f.unwrap().reshape(&[b, n, c, h / stride, w / stride]))
            .collect()
    }
}
