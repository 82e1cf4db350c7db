use super::{ops::split_axis, Real, Tensor};
use crate::error::{Error, Result};

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Elements reduced per channel.
    pub count: usize,
}

impl<T: Real> Tensor<T> {
    /// Batch normalization over axis 1 of `[B, C, ...]`.
    ///
    /// With `running = None` the batch statistics normalize the input and are
    /// returned; otherwise the supplied `(mean, var)` are used as constants.
    pub fn batch_norm(
        &self,
        gamma: &Self,
        beta: &Self,
        running: Option<(&[T], &[T])>,
        eps: f64,
    ) -> Result<(Self, Option<BatchStats<T>>)> {
        const OP: &str = "batch_norm";
        if self.ndim() < 2 {
            return Err(Error::shape(OP, format!("need [B, C, ...], got {:?}", self.shape())));
        }
        let c = self.shape()[1];
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape(OP, format!("affine params must be [{c}]")));
        }
        Self::ensure_finite(OP, &[self, gamma, beta])?;
        let (outer, _, inner) = split_axis(self.shape(), 1);
        let count = outer * inner;
        let eps = T::from_f64(eps);

        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::shape(OP, "running stats length"));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                if count < 2 {
                    return Err(Error::Contract(format!(
                        "batch_norm in training mode needs >= 2 values per channel, got {count}"
                    )));
                }
                let x = self.data();
                let n = T::from_f64(count as f64);
                let mut mean = vec![T::ZERO; c];
                let mut var = vec![T::ZERO; c];
                for ch in 0..c {
                    let mut s = T::ZERO;
                    for o in 0..outer {
                        s += x[(o * c + ch) * inner..][..inner].iter().copied().sum::<T>();
                    }
                    let m = s / n;
                    let mut q = T::ZERO;
                    for o in 0..outer {
                        for &v in &x[(o * c + ch) * inner..][..inner] {
                            q += (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = q / n;
                }
                let stats = BatchStats { mean: mean.clone(), var: var.clone(), count };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        let mut out = vec![T::ZERO; self.numel()];
        {
            let (x, g, b) = (self.data(), gamma.data(), beta.data());
            for o in 0..outer {
                for ch in 0..c {
                    let off = (o * c + ch) * inner;
                    let (m, s, gg, bb) = (mean[ch], inv_std[ch], g[ch], b[ch]);
                    for (y, &v) in out[off..off + inner].iter_mut().zip(&x[off..off + inner]) {
                        *y = (v - m) * s * gg + bb;
                    }
                }
            }
        }
        let train = running.is_none();
        let y = Self::make(
            OP,
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |ctx| {
                let (x, g) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut gx = vec![T::ZERO; x.len()];
                let mut gg = vec![T::ZERO; c];
                let mut gb = vec![T::ZERO; c];
                let n = T::from_f64(count as f64);
                for ch in 0..c {
                    let (m, s) = (mean[ch], inv_std[ch]);
                    let mut sum_dy = T::ZERO;
                    let mut sum_dy_xhat = T::ZERO;
                    for o in 0..outer {
                        let off = (o * c + ch) * inner;
                        for i in off..off + inner {
                            let xhat = (x[i] - m) * s;
                            sum_dy += ctx.grad[i];
                            sum_dy_xhat += ctx.grad[i] * xhat;
                        }
                    }
                    gg[ch] = sum_dy_xhat;
                    gb[ch] = sum_dy;
                    let k = g[ch] * s;
                    for o in 0..outer {
                        let off = (o * c + ch) * inner;
                        for i in off..off + inner {
                            gx[i] = if train {
                                let xhat = (x[i] - m) * s;
                                k * (ctx.grad[i] - sum_dy / n - xhat * sum_dy_xhat / n)
                            } else {
                                k * ctx.grad[i]
                            };
                        }
                    }
                }
                vec![Some(gx), Some(gg), Some(gb)]
            },
        );
        Ok((y, stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_per_channel() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 3.0, 10.0, 10.0, 5.0, 7.0, 20.0, 40.0], &[2, 2, 2]).unwrap();
        let g = Tensor::<f64>::from_vec(vec![1.0, 1.0], &[2]).unwrap();
        let b = Tensor::<f64>::from_vec(vec![0.0, 0.0], &[2]).unwrap();
        let (y, stats) = x.batch_norm(&g, &b, None, 0.0).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![4.0, 20.0]);
        let y = y.to_vec();
        let ch0: f64 = [y[0], y[1], y[4], y[5]].iter().sum();
        assert!(ch0.abs() < 1e-12);
        let var0: f64 = [y[0], y[1], y[4], y[5]].iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((var0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let x = Tensor::<f32>::from_vec(vec![2.0, 4.0], &[1, 1, 2]).unwrap();
        let g = Tensor::<f32>::from_vec(vec![2.0], &[1]).unwrap();
        let b = Tensor::<f32>::from_vec(vec![1.0], &[1]).unwrap();
        let (y, stats) = x.batch_norm(&g, &b, Some((&[2.0], &[4.0])), 0.0).unwrap();
        assert!(stats.is_none());
        assert_eq!(y.to_vec(), vec![1.0, 3.0]);
    }

    #[test]
    fn single_value_per_channel_rejected_in_training() {
        let x = Tensor::<f32>::zeros(&[1, 3, 1]).unwrap();
        let g = Tensor::<f32>::full(&[3], 1.0).unwrap();
        let b = Tensor::<f32>::zeros(&[3]).unwrap();
        assert!(x.batch_norm(&g, &b, None, 1e-5).is_err());
    }
}
