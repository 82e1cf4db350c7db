//! Convolutions over up to three spatial dims via im2col + GEMM.
//!
//! All convolutions run on `[B, C, D, H, W]`; the 2-D variants insert a unit
//! depth axis.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Stride and zero padding per spatial axis `(d, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvSpec { stride: [stride; 3], padding: [padding; 3] }
    }

    fn planar(self) -> Self {
        ConvSpec {
            stride: [1, self.stride[1], self.stride[2]],
            padding: [0, self.padding[1], self.padding[2]],
        }
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec::new(1, 0)
    }
}

/// Output length along one axis: `floor((n + 2p - k) / s) + 1`.
pub fn conv_out_len(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (n + 2 * p).checked_sub(k).map(|v| v / s + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    cin: usize,
    inp: [usize; 3],
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    out: [usize; 3],
}

impl Geom {
    fn in_vol(&self) -> usize {
        self.inp.iter().product()
    }
    fn out_vol(&self) -> usize {
        self.out.iter().product()
    }
    fn rows(&self) -> usize {
        self.cin * self.k.iter().product::<usize>()
    }
    fn is_pointwise(&self) -> bool {
        self.k == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    /// Visits `(row, column, input offset)` for every in-bounds tap, one
    /// contiguous output run at a time.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [k0, k1, k2] = self.k;
        let [i0n, i1n, i2n] = self.inp;
        let [o0n, o1n, o2n] = self.out;
        let [s0, s1, s2] = self.stride;
        let [p0, p1, p2] = self.pad.map(|p| p as isize);
        for c in 0..self.cin {
            for a in 0..k0 {
                for b in 0..k1 {
                    for e in 0..k2 {
                        let row = ((c * k0 + a) * k1 + b) * k2 + e;
                        for o0 in 0..o0n {
                            let i0 = (o0 * s0 + a) as isize - p0;
                            if i0 < 0 || i0 >= i0n as isize {
                                continue;
                            }
                            for o1 in 0..o1n {
                                let i1 = (o1 * s1 + b) as isize - p1;
                                if i1 < 0 || i1 >= i1n as isize {
                                    continue;
                                }
                                let base = ((c * i0n + i0 as usize) * i1n + i1 as usize) * i2n;
                                let col0 = (o0 * o1n + o1) * o2n;
                                // o2 range whose tap lands inside [0, i2n)
                                let lo = if p2 > e as isize {
                                    ((p2 - e as isize) as usize).div_ceil(s2)
                                } else {
                                    0
                                };
                                let hi_num = i2n as isize + p2 - e as isize;
                                if hi_num <= 0 {
                                    continue;
                                }
                                let hi = ((hi_num as usize).div_ceil(s2)).min(o2n);
                                if lo >= hi {
                                    continue;
                                }
                                let i2_start = (lo * s2 + e) as isize - p2;
                                f(row, col0 + lo, base + i2_start as usize, hi - lo);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let ov = self.out_vol();
        let s2 = self.stride[2];
        cols.fill(T::ZERO);
        self.for_each_run(|row, col, src, len| {
            let dst = &mut cols[row * ov + col..][..len];
            if s2 == 1 {
                dst.copy_from_slice(&x[src..src + len]);
            } else {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = x[src + j * s2];
                }
            }
        });
    }

    fn col2im<T: Real>(&self, cols: &[T], x: &mut [T]) {
        let ov = self.out_vol();
        let s2 = self.stride[2];
        self.for_each_run(|row, col, src, len| {
            let s = &cols[row * ov + col..][..len];
            if s2 == 1 {
                for (d, &v) in x[src..src + len].iter_mut().zip(s) {
                    *d += v;
                }
            } else {
                for (j, &v) in s.iter().enumerate() {
                    x[src + j * s2] += v;
                }
            }
        });
    }
}

fn spatial5(op: &'static str, t: &[usize]) -> Result<[usize; 5]> {
    <[usize; 5]>::try_from(t).map_err(|_| Error::shape(op, format!("expected rank 5, got {t:?}")))
}

impl<T: Real> Tensor<T> {
    /// 3-D convolution. `x: [B, Cin, D, H, W]`, `w: [Cout, Cin, kd, kh, kw]`,
    /// `bias: [Cout]`.
    pub fn conv3d(&self, w: &Self, bias: Option<&Self>, spec: ConvSpec) -> Result<Self> {
        const OP: &str = "conv3d";
        let [b, cin, d, h, wd] = spatial5(OP, self.shape())?;
        let [cout, wcin, k0, k1, k2] = spatial5(OP, w.shape())?;
        if wcin != cin {
            return Err(Error::shape(OP, format!("input has {cin} channels, weight expects {wcin}")));
        }
        if let Some(bias) = bias {
            if bias.shape() != [cout] {
                return Err(Error::shape(OP, format!("bias {:?} for {cout} outputs", bias.shape())));
            }
        }
        let k = [k0, k1, k2];
        let inp = [d, h, wd];
        let mut out_dims = [0; 3];
        for a in 0..3 {
            if spec.stride[a] == 0 {
                return Err(Error::shape(OP, "stride must be positive"));
            }
            out_dims[a] = conv_out_len(inp[a], k[a], spec.stride[a], spec.padding[a])
                .ok_or_else(|| Error::shape(OP, format!("kernel {k:?} larger than padded input {inp:?}")))?;
        }
        let mut tensors = vec![self, w];
        if let Some(bias) = bias {
            tensors.push(bias);
        }
        Self::ensure_finite(OP, &tensors)?;

        let g = Geom { cin, inp, k, stride: spec.stride, pad: spec.padding, out: out_dims };
        let (iv, ov, rows) = (g.in_vol(), g.out_vol(), g.rows());
        let mut out = vec![T::ZERO; b * cout * ov];
        {
            let x = self.data();
            let wt = w.data();
            let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::ZERO; rows * ov] };
            for n in 0..b {
                let xs = &x[n * cin * iv..][..cin * iv];
                let cols_ref: &[T] = if g.is_pointwise() {
                    xs
                } else {
                    g.im2col(xs, &mut cols);
                    &cols
                };
                T::gemm(cout, rows, ov, T::ONE, &wt, false, cols_ref, false, T::ZERO, &mut out[n * cout * ov..][..cout * ov]);
            }
            if let Some(bias) = bias {
                let bd = bias.data();
                for n in 0..b {
                    for c in 0..cout {
                        for v in &mut out[(n * cout + c) * ov..][..ov] {
                            *v += bd[c];
                        }
                    }
                }
            }
        }

        let mut inputs = vec![self.clone(), w.clone()];
        let has_bias = bias.is_some();
        if let Some(bias) = bias {
            inputs.push(bias.clone());
        }
        Ok(Self::make(OP, vec![b, cout, out_dims[0], out_dims[1], out_dims[2]], out, inputs, move |ctx| {
            let x = ctx.inputs[0].data();
            let wt = ctx.inputs[1].data();
            let need_x = ctx.inputs[0].requires_grad();
            let mut gx = if need_x { vec![T::ZERO; b * cin * iv] } else { Vec::new() };
            let mut gw = vec![T::ZERO; cout * rows];
            let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::ZERO; rows * ov] };
            let mut dcols = vec![T::ZERO; if need_x && !g.is_pointwise() { rows * ov } else { 0 }];
            for n in 0..b {
                let go = &ctx.grad[n * cout * ov..][..cout * ov];
                let xs = &x[n * cin * iv..][..cin * iv];
                let cols_ref: &[T] = if g.is_pointwise() {
                    xs
                } else {
                    g.im2col(xs, &mut cols);
                    &cols
                };
                T::gemm(cout, ov, rows, T::ONE, go, false, cols_ref, true, T::ONE, &mut gw);
                if need_x {
                    if g.is_pointwise() {
                        T::gemm(rows, cout, ov, T::ONE, &wt, true, go, false, T::ZERO, &mut gx[n * cin * iv..][..cin * iv]);
                    } else {
                        T::gemm(rows, cout, ov, T::ONE, &wt, true, go, false, T::ZERO, &mut dcols);
                        g.col2im(&dcols, &mut gx[n * cin * iv..][..cin * iv]);
                    }
                }
            }
            let mut grads = vec![need_x.then_some(gx), Some(gw)];
            if has_bias {
                let mut gb = vec![T::ZERO; cout];
                for n in 0..b {
                    for (c, gbc) in gb.iter_mut().enumerate() {
                        *gbc += ctx.grad[(n * cout + c) * ov..][..ov].iter().copied().sum();
                    }
                }
                grads.push(Some(gb));
            }
            grads
        }))
    }

    /// Transposed 3-D convolution (adjoint of [`Tensor::conv3d`]).
    /// `x: [B, Cin, D, H, W]`, `w: [Cin, Cout, kd, kh, kw]`; output length per
    /// axis is `(n - 1) * s - 2p + k`.
    pub fn conv_transpose3d(&self, w: &Self, bias: Option<&Self>, spec: ConvSpec) -> Result<Self> {
        const OP: &str = "conv_transpose3d";
        let [b, cin, d, h, wd] = spatial5(OP, self.shape())?;
        let [wcin, cout, k0, k1, k2] = spatial5(OP, w.shape())?;
        if wcin != cin {
            return Err(Error::shape(OP, format!("input has {cin} channels, weight expects {wcin}")));
        }
        if let Some(bias) = bias {
            if bias.shape() != [cout] {
                return Err(Error::shape(OP, format!("bias {:?} for {cout} outputs", bias.shape())));
            }
        }
        let k = [k0, k1, k2];
        let small = [d, h, wd];
        let mut big = [0; 3];
        for a in 0..3 {
            let full = (small[a] - 1) * spec.stride[a] + k[a];
            big[a] = full
                .checked_sub(2 * spec.padding[a])
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::shape(OP, "padding exceeds output"))?;
        }
        let mut tensors = vec![self, w];
        if let Some(bias) = bias {
            tensors.push(bias);
        }
        Self::ensure_finite(OP, &tensors)?;

        // Geometry of the forward convolution this op is the adjoint of.
        let g = Geom { cin: cout, inp: big, k, stride: spec.stride, pad: spec.padding, out: small };
        let (bv, sv, rows) = (g.in_vol(), g.out_vol(), g.rows());
        let mut out = vec![T::ZERO; b * cout * bv];
        {
            let x = self.data();
            let wt = w.data();
            let mut cols = vec![T::ZERO; rows * sv];
            for n in 0..b {
                let xs = &x[n * cin * sv..][..cin * sv];
                T::gemm(rows, cin, sv, T::ONE, &wt, true, xs, false, T::ZERO, &mut cols);
                g.col2im(&cols, &mut out[n * cout * bv..][..cout * bv]);
            }
            if let Some(bias) = bias {
                let bd = bias.data();
                for n in 0..b {
                    for c in 0..cout {
                        for v in &mut out[(n * cout + c) * bv..][..bv] {
                            *v += bd[c];
                        }
                    }
                }
            }
        }
        let mut inputs = vec![self.clone(), w.clone()];
        let has_bias = bias.is_some();
        if let Some(bias) = bias {
            inputs.push(bias.clone());
        }
        Ok(Self::make(OP, vec![b, cout, big[0], big[1], big[2]], out, inputs, move |ctx| {
            let x = ctx.inputs[0].data();
            let wt = ctx.inputs[1].data();
            let need_x = ctx.inputs[0].requires_grad();
            let mut gx = if need_x { vec![T::ZERO; b * cin * sv] } else { Vec::new() };
            let mut gw = vec![T::ZERO; cin * rows];
            let mut cols = vec![T::ZERO; rows * sv];
            for n in 0..b {
                g.im2col(&ctx.grad[n * cout * bv..][..cout * bv], &mut cols);
                let xs = &x[n * cin * sv..][..cin * sv];
                T::gemm(cin, sv, rows, T::ONE, xs, false, &cols, true, T::ONE, &mut gw);
                if need_x {
                    T::gemm(cin, rows, sv, T::ONE, &wt, false, &cols, false, T::ZERO, &mut gx[n * cin * sv..][..cin * sv]);
                }
            }
            let mut grads = vec![need_x.then_some(gx), Some(gw)];
            if has_bias {
                let mut gb = vec![T::ZERO; cout];
                for n in 0..b {
                    for (c, gbc) in gb.iter_mut().enumerate() {
                        *gbc += ctx.grad[(n * cout + c) * bv..][..bv].iter().copied().sum();
                    }
                }
                grads.push(Some(gb));
            }
            grads
        }))
    }

    /// 2-D convolution. `x: [B, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`.
    pub fn conv2d(&self, w: &Self, bias: Option<&Self>, stride: usize, padding: usize) -> Result<Self> {
        let (xs, ws) = (self.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape("conv2d", format!("{xs:?} with weight {ws:?}")));
        }
        let x5 = self.reshape(&[xs[0], xs[1], 1, xs[2], xs[3]])?;
        let w5 = w.reshape(&[ws[0], ws[1], 1, ws[2], ws[3]])?;
        let y = x5.conv3d(&w5, bias, ConvSpec::new(stride, padding).planar())?;
        let ys = y.shape().to_vec();
        y.reshape(&[ys[0], ys[1], ys[3], ys[4]])
    }
}
