//! Interpolated sampling and resampling.
//!
//! Sample coordinates are continuous array indices: node `i` sits at
//! coordinate `i`. Corners outside the array read as zero.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Resampling kernel for [`Tensor::upsample`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upsample {
    Nearest,
    /// Half-pixel-centred linear interpolation with edge clamping, so a
    /// constant field stays constant.
    Trilinear,
}

/// Lower corner and fractional offset of a coordinate.
#[inline]
fn cell<T: Real>(c: T) -> (isize, T) {
    let f = c.floor();
    (f.to_f64() as isize, c - f)
}

impl<T: Real> Tensor<T> {
    /// Samples `self: [C, H, W]` at `coords: [P, 2]` holding `(row, col)`
    /// pairs; returns `[P, C]`.
    pub fn bilinear_sample_2d(&self, coords: &Self) -> Result<Self> {
        const OP: &str = "bilinear_sample_2d";
        let (c, h, w) = match *self.shape() {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::shape(OP, format!("feature map must be [C, H, W], got {:?}", self.shape()))),
        };
        if coords.ndim() != 2 || coords.shape()[1] != 2 {
            return Err(Error::shape(OP, format!("coords must be [P, 2], got {:?}", coords.shape())));
        }
        Self::ensure_finite(OP, &[self, coords])?;
        let p = coords.shape()[0];
        let hw = h * w;
        let at = move |i: isize, j: isize| -> Option<usize> {
            (i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w).then(|| i as usize * w + j as usize)
        };
        let mut out = vec![T::ZERO; p * c];
        {
            let (f, xy) = (self.data(), coords.data());
            for q in 0..p {
                let (i0, fi) = cell(xy[2 * q]);
                let (j0, fj) = cell(xy[2 * q + 1]);
                let corners = [
                    (i0, j0, (T::ONE - fi) * (T::ONE - fj)),
                    (i0 + 1, j0, fi * (T::ONE - fj)),
                    (i0, j0 + 1, (T::ONE - fi) * fj),
                    (i0 + 1, j0 + 1, fi * fj),
                ];
                for (ci, cj, wgt) in corners {
                    if let Some(off) = at(ci, cj) {
                        for ch in 0..c {
                            out[q * c + ch] += wgt * f[ch * hw + off];
                        }
                    }
                }
            }
        }
        Ok(Self::make(OP, vec![p, c], out, vec![self.clone(), coords.clone()], move |ctx| {
            let (f, xy) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let mut gf = vec![T::ZERO; c * hw];
            let mut gc = vec![T::ZERO; p * 2];
            let val = |ci: isize, cj: isize, ch: usize| at(ci, cj).map_or(T::ZERO, |o| f[ch * hw + o]);
            for q in 0..p {
                let (i0, fi) = cell(xy[2 * q]);
                let (j0, fj) = cell(xy[2 * q + 1]);
                let g = &ctx.grad[q * c..][..c];
                let corners = [
                    (i0, j0, (T::ONE - fi) * (T::ONE - fj)),
                    (i0 + 1, j0, fi * (T::ONE - fj)),
                    (i0, j0 + 1, (T::ONE - fi) * fj),
                    (i0 + 1, j0 + 1, fi * fj),
                ];
                for (ci, cj, wgt) in corners {
                    if let Some(off) = at(ci, cj) {
                        for ch in 0..c {
                            gf[ch * hw + off] += wgt * g[ch];
                        }
                    }
                }
                let (mut di, mut dj) = (T::ZERO, T::ZERO);
                for ch in 0..c {
                    let v00 = val(i0, j0, ch);
                    let v10 = val(i0 + 1, j0, ch);
                    let v01 = val(i0, j0 + 1, ch);
                    let v11 = val(i0 + 1, j0 + 1, ch);
                    di += g[ch] * ((T::ONE - fj) * (v10 - v00) + fj * (v11 - v01));
                    dj += g[ch] * ((T::ONE - fi) * (v01 - v00) + fi * (v11 - v10));
                }
                gc[2 * q] = di;
                gc[2 * q + 1] = dj;
            }
            vec![Some(gf), Some(gc)]
        }))
    }

    /// Samples `self: [C, X, Y, Z]` at `coords: [P, 3]`; returns `[P, C]`.
    pub fn trilinear_sample_3d(&self, coords: &Self) -> Result<Self> {
        const OP: &str = "trilinear_sample_3d";
        let (c, dims) = match *self.shape() {
            [c, x, y, z] => (c, [x, y, z]),
            _ => return Err(Error::shape(OP, format!("volume must be [C, X, Y, Z], got {:?}", self.shape()))),
        };
        if coords.ndim() != 2 || coords.shape()[1] != 3 {
            return Err(Error::shape(OP, format!("coords must be [P, 3], got {:?}", coords.shape())));
        }
        Self::ensure_finite(OP, &[self, coords])?;
        let p = coords.shape()[0];
        let vol = dims.iter().product::<usize>();
        let at = move |i: [isize; 3]| -> Option<usize> {
            (0..3)
                .all(|a| i[a] >= 0 && (i[a] as usize) < dims[a])
                .then(|| (i[0] as usize * dims[1] + i[1] as usize) * dims[2] + i[2] as usize)
        };
        // Corner (bits of k) -> index and per-axis weights.
        let corners = move |xyz: &[T]| {
            let cs = [cell(xyz[0]), cell(xyz[1]), cell(xyz[2])];
            let mut out = [([0isize; 3], [T::ZERO; 3]); 8];
            for (k, slot) in out.iter_mut().enumerate() {
                for a in 0..3 {
                    let hi = (k >> (2 - a)) & 1 == 1;
                    slot.0[a] = cs[a].0 + hi as isize;
                    slot.1[a] = if hi { cs[a].1 } else { T::ONE - cs[a].1 };
                }
            }
            out
        };
        let mut out = vec![T::ZERO; p * c];
        {
            let (f, xyz) = (self.data(), coords.data());
            for q in 0..p {
                for (idx, w) in corners(&xyz[3 * q..3 * q + 3]) {
                    if let Some(off) = at(idx) {
                        let wgt = w[0] * w[1] * w[2];
                        for ch in 0..c {
                            out[q * c + ch] += wgt * f[ch * vol + off];
                        }
                    }
                }
            }
        }
        Ok(Self::make(OP, vec![p, c], out, vec![self.clone(), coords.clone()], move |ctx| {
            let (f, xyz) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let mut gf = vec![T::ZERO; c * vol];
            let mut gc = vec![T::ZERO; p * 3];
            for q in 0..p {
                let g = &ctx.grad[q * c..][..c];
                for (k, (idx, w)) in corners(&xyz[3 * q..3 * q + 3]).into_iter().enumerate() {
                    let Some(off) = at(idx) else { continue };
                    let wgt = w[0] * w[1] * w[2];
                    let mut dot = T::ZERO;
                    for ch in 0..c {
                        gf[ch * vol + off] += wgt * g[ch];
                        dot += g[ch] * f[ch * vol + off];
                    }
                    for a in 0..3 {
                        let hi = (k >> (2 - a)) & 1 == 1;
                        let others: T = (0..3).filter(|&b| b != a).map(|b| w[b]).fold(T::ONE, |acc, v| acc * v);
                        let sign = if hi { T::ONE } else { -T::ONE };
                        gc[3 * q + a] += sign * others * dot;
                    }
                }
            }
            vec![Some(gf), Some(gc)]
        }))
    }

    /// Upsamples the three trailing axes of `[B, C, X, Y, Z]` by integer
    /// factors.
    pub fn upsample(&self, factors: [usize; 3], mode: Upsample) -> Result<Self> {
        const OP: &str = "upsample";
        let [b, c, x, y, z] = <[usize; 5]>::try_from(self.shape())
            .map_err(|_| Error::shape(OP, format!("expected rank 5, got {:?}", self.shape())))?;
        if factors.contains(&0) {
            return Err(Error::shape(OP, "factors must be positive"));
        }
        Self::ensure_finite(OP, &[self])?;
        let ins = [x, y, z];
        let outs = [x * factors[0], y * factors[1], z * factors[2]];
        // Per-axis (lo, hi, weight of hi) tables.
        let tables: Vec<Vec<(usize, usize, T)>> = (0..3)
            .map(|a| {
                (0..outs[a])
                    .map(|o| match mode {
                        Upsample::Nearest => {
                            let i = o / factors[a];
                            (i, i, T::ZERO)
                        }
                        Upsample::Trilinear => {
                            let src = ((o as f64 + 0.5) / factors[a] as f64 - 0.5).max(0.0);
                            let lo = (src.floor() as usize).min(ins[a] - 1);
                            let hi = (lo + 1).min(ins[a] - 1);
                            (lo, hi, T::from_f64(src - lo as f64))
                        }
                    })
                    .collect()
            })
            .collect();
        let (iv, ov) = (x * y * z, outs.iter().product::<usize>());
        let taps = move |ox: usize, oy: usize, oz: usize| {
            let (tx, ty, tz) = (tables[0][ox], tables[1][oy], tables[2][oz]);
            let mut out = [(0usize, T::ZERO); 8];
            for (k, slot) in out.iter_mut().enumerate() {
                let (ix, wx) = if k & 4 != 0 { (tx.1, tx.2) } else { (tx.0, T::ONE - tx.2) };
                let (iy, wy) = if k & 2 != 0 { (ty.1, ty.2) } else { (ty.0, T::ONE - ty.2) };
                let (iz, wz) = if k & 1 != 0 { (tz.1, tz.2) } else { (tz.0, T::ONE - tz.2) };
                *slot = ((ix * y + iy) * z + iz, wx * wy * wz);
            }
            out
        };
        let taps = std::rc::Rc::new(taps);
        let mut out = vec![T::ZERO; b * c * ov];
        {
            let src = self.data();
            for ox in 0..outs[0] {
                for oy in 0..outs[1] {
                    for oz in 0..outs[2] {
                        let o = (ox * outs[1] + oy) * outs[2] + oz;
                        for (i, w) in taps(ox, oy, oz) {
                            if w == T::ZERO {
                                continue;
                            }
                            for plane in 0..b * c {
                                out[plane * ov + o] += w * src[plane * iv + i];
                            }
                        }
                    }
                }
            }
        }
        let taps_b = std::rc::Rc::clone(&taps);
        Ok(Self::make(OP, vec![b, c, outs[0], outs[1], outs[2]], out, vec![self.clone()], move |ctx| {
            let mut g = vec![T::ZERO; b * c * iv];
            for ox in 0..outs[0] {
                for oy in 0..outs[1] {
                    for oz in 0..outs[2] {
                        let o = (ox * outs[1] + oy) * outs[2] + oz;
                        for (i, w) in taps_b(ox, oy, oz) {
                            if w == T::ZERO {
                                continue;
                            }
                            for plane in 0..b * c {
                                g[plane * iv + i] += w * ctx.grad[plane * ov + o];
                            }
                        }
                    }
                }
            }
            vec![Some(g)]
        }))
    }

    /// Nearest/linear upsampling of `[B, C, H, W]`.
    pub fn upsample_2d(&self, factor: usize, mode: Upsample) -> Result<Self> {
        let s = self.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::shape("upsample_2d", format!("expected rank 4, got {s:?}")));
        }
        let y = self.reshape(&[s[0], s[1], 1, s[2], s[3]])?.upsample([1, factor, factor], mode)?;
        y.reshape(&[s[0], s[1], s[2] * factor, s[3] * factor])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feat() -> Tensor<f64> {
        Tensor::from_vec((0..2 * 3 * 4).map(|v| v as f64 * 0.5 - 2.0).collect(), &[2, 3, 4]).unwrap()
    }

    #[test]
    fn on_grid_bilinear_returns_stored_value() {
        let f = feat();
        let xy = Tensor::from_vec(vec![1.0, 2.0, 0.0, 3.0], &[2, 2]).unwrap();
        let s = f.bilinear_sample_2d(&xy).unwrap().to_vec();
        let fd = f.to_vec();
        assert_eq!(s[0], fd[4 + 2]);
        assert_eq!(s[1], fd[12 + 4 + 2]);
        assert_eq!(s[2], fd[3]);
        assert_eq!(s[3], fd[12 + 3]);
    }

    #[test]
    fn bilinear_outside_reads_zero() {
        let f = feat();
        let xy = Tensor::from_vec(vec![-5.0, 1.0, 1.0, 9.0], &[2, 2]).unwrap();
        assert!(f.bilinear_sample_2d(&xy).unwrap().to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trilinear_matches_corner_blend() {
        let dims = [3usize, 4, 2];
        let vol: Vec<f64> = (0..24).map(|v| ((v * 7) % 11) as f64).collect();
        let f = Tensor::from_vec(vol.clone(), &[1, 3, 4, 2]).unwrap();
        let (x, y, z) = (1.25, 2.5, 0.75);
        let p = Tensor::from_vec(vec![x, y, z], &[1, 3]).unwrap();
        let got = f.trilinear_sample_3d(&p).unwrap().item();
        let v = |i: usize, j: usize, k: usize| vol[(i * dims[1] + j) * dims[2] + k];
        let c00 = v(1, 2, 0) * 0.75 + v(2, 2, 0) * 0.25;
        let c01 = v(1, 2, 1) * 0.75 + v(2, 2, 1) * 0.25;
        let c10 = v(1, 3, 0) * 0.75 + v(2, 3, 0) * 0.25;
        let c11 = v(1, 3, 1) * 0.75 + v(2, 3, 1) * 0.25;
        let c0 = c00 * 0.5 + c10 * 0.5;
        let c1 = c01 * 0.5 + c11 * 0.5;
        let want = c0 * 0.25 + c1 * 0.75;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn upsample_preserves_constants() {
        let x = Tensor::<f32>::full(&[1, 2, 2, 3, 1], 4.5).unwrap();
        for mode in [Upsample::Nearest, Upsample::Trilinear] {
            let y = x.upsample([2, 2, 2], mode).unwrap();
            assert_eq!(y.shape(), &[1, 2, 4, 6, 2]);
            assert!(y.to_vec().iter().all(|&v| (v - 4.5).abs() < 1e-6));
        }
    }

    #[test]
    fn nearest_upsample_repeats() {
        let x = Tensor::<f32>::from_vec(vec![1.0, 2.0], &[1, 1, 1, 1, 2]).unwrap();
        let y = x.upsample([1, 1, 2], Upsample::Nearest).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 1.0, 2.0, 2.0]);
    }
}
