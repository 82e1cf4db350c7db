//! Elementwise, shape, reduction and indexing ops.

use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `(outer, dim, inner)` split of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tensor<T> {
    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Self> {
        Self::ensure_finite(name, &[self])?;
        let data: Vec<T> = self.data().iter().map(|&v| f(v)).collect();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        Ok(Self::make(name, self.shape().to_vec(), data, vec![self.clone()], move |ctx| {
            let x = ctx.inputs[0].data();
            vec![Some(
                ctx.grad
                    .iter()
                    .zip(x.iter().zip(ctx.out))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect(),
            )]
        }))
    }

    pub fn relu(&self) -> Result<Self> {
        self.unary(
            "relu",
            |x| x.max(T::ZERO),
            |x, _| if x > T::ZERO { T::ONE } else { T::ZERO },
        )
    }

    pub fn sigmoid(&self) -> Result<Self> {
        self.unary("sigmoid", sigmoid, |_, y| y * (T::ONE - y))
    }

    pub fn exp(&self) -> Result<Self> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn log(&self) -> Result<Self> {
        self.unary("log", |x| x.ln(), |x, _| T::ONE / x)
    }

    pub fn abs(&self) -> Result<Self> {
        self.unary(
            "abs",
            |x| x.abs(),
            |x, _| {
                if x > T::ZERO {
                    T::ONE
                } else if x < T::ZERO {
                    -T::ONE
                } else {
                    T::ZERO
                }
            },
        )
    }

    pub fn neg(&self) -> Result<Self> {
        self.unary("neg", |x| -x, |_, _| -T::ONE)
    }

    /// `x^p` for non-negative `x`.
    pub fn powf(&self, p: f64) -> Result<Self> {
        let pt = T::from_f64(p);
        if self.data().iter().any(|&v| v < T::ZERO) {
            return Err(Error::Contract("powf needs non-negative input".into()));
        }
        self.unary("powf", move |x| x.powf(pt), move |x, _| {
            if x == T::ZERO {
                if p == 1.0 {
                    T::ONE
                } else {
                    T::ZERO
                }
            } else {
                pt * x.powf(pt - T::ONE)
            }
        })
    }

    pub fn scale(&self, s: f64) -> Result<Self> {
        let s = T::from_f64(s);
        self.unary("scale", move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Result<Self> {
        let s = T::from_f64(s);
        self.unary("add_scalar", move |x| x + s, |_, _| T::ONE)
    }

    /// Clamp into `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Self> {
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        self.unary(
            "clamp",
            move |x| x.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { T::ONE } else { T::ZERO },
        )
    }

    fn binary(
        &self,
        other: &Self,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        df: impl Fn(T, T, T) -> (T, T) + 'static,
    ) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Self::ensure_finite(name, &[self, other])?;
        let data: Vec<T> = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
        };
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        Ok(Self::make(
            name,
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |ctx| {
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut ga = Vec::with_capacity(a.len());
                let mut gb = Vec::with_capacity(a.len());
                for i in 0..a.len() {
                    let (da, db) = df(a[i], b[i], ctx.out[i]);
                    ga.push(ctx.grad[i] * da);
                    gb.push(ctx.grad[i] * db);
                }
                vec![Some(ga), Some(gb)]
            },
        ))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.binary(other, "add", |a, b| a + b, |_, _, _| (T::ONE, T::ONE))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.binary(other, "sub", |a, b| a - b, |_, _, _| (T::ONE, -T::ONE))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.binary(other, "mul", |a, b| a * b, |a, b, _| (b, a))
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.binary(other, "div", |a, b| a / b, |_, b, y| (T::ONE / b, -y / b))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Result<Self> {
        Self::ensure_finite("sum", &[self])?;
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        Ok(Self::make("sum", vec![1], vec![s], vec![self.clone()], move |ctx| {
            vec![Some(vec![ctx.grad[0]; n])]
        }))
    }

    pub fn mean(&self) -> Result<Self> {
        let n = self.numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Sums over `axis`, removing it (a 1-D input yields shape `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.ndim() {
            return Err(Error::shape("sum_axis", format!("axis {axis} of {:?}", self.shape())));
        }
        Self::ensure_finite("sum_axis", &[self])?;
        let (outer, dim, inner) = split_axis(self.shape(), axis);
        let mut out = vec![T::ZERO; outer * inner];
        {
            let x = self.data();
            for o in 0..outer {
                for d in 0..dim {
                    let src = &x[(o * dim + d) * inner..][..inner];
                    let dst = &mut out[o * inner..][..inner];
                    for (a, &b) in dst.iter_mut().zip(src) {
                        *a += b;
                    }
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Self::make("sum_axis", shape, out, vec![self.clone()], move |ctx| {
            let mut g = vec![T::ZERO; outer * dim * inner];
            for o in 0..outer {
                for d in 0..dim {
                    g[(o * dim + d) * inner..][..inner]
                        .copy_from_slice(&ctx.grad[o * inner..][..inner]);
                }
            }
            vec![Some(g)]
        }))
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.ndim() {
            return Err(Error::shape("softmax", format!("axis {axis} of {:?}", self.shape())));
        }
        Self::ensure_finite("softmax", &[self])?;
        let (outer, dim, inner) = split_axis(self.shape(), axis);
        let mut out = vec![T::ZERO; self.numel()];
        {
            let x = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |d: usize| (o * dim + d) * inner + i;
                    let mut m = x[idx(0)];
                    for d in 1..dim {
                        m = m.max(x[idx(d)]);
                    }
                    let mut z = T::ZERO;
                    for d in 0..dim {
                        let e = (x[idx(d)] - m).exp();
                        out[idx(d)] = e;
                        z += e;
                    }
                    for d in 0..dim {
                        out[idx(d)] /= z;
                    }
                }
            }
        }
        Ok(Self::make("softmax", self.shape().to_vec(), out, vec![self.clone()], move |ctx| {
            let y = ctx.out;
            let mut g = vec![T::ZERO; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |d: usize| (o * dim + d) * inner + i;
                    let dot: T = (0..dim).map(|d| ctx.grad[idx(d)] * y[idx(d)]).sum();
                    for d in 0..dim {
                        g[idx(d)] = y[idx(d)] * (ctx.grad[idx(d)] - dot);
                    }
                }
            }
            vec![Some(g)]
        }))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        Self::ensure_finite("matmul", &[self, other])?;
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; m * n];
        T::gemm(m, k, n, T::ONE, &self.data(), false, &other.data(), false, T::ZERO, &mut out);
        Ok(Self::make(
            "matmul",
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            move |ctx| {
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut ga = vec![T::ZERO; m * k];
                let mut gb = vec![T::ZERO; k * n];
                T::gemm(m, n, k, T::ONE, ctx.grad, false, &b, true, T::ZERO, &mut ga);
                T::gemm(k, m, n, T::ONE, &a, true, ctx.grad, false, T::ZERO, &mut gb);
                vec![Some(ga), Some(gb)]
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.contains(&0) || numel(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape()),
            ));
        }
        Ok(Self::make("reshape", shape.to_vec(), self.to_vec(), vec![self.clone()], |ctx| {
            vec![Some(ctx.grad.to_vec())]
        }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let nd = self.ndim();
        let mut check = axes.to_vec();
        check.sort_unstable();
        if check != (0..nd).collect::<Vec<_>>() {
            return Err(Error::shape("permute", format!("axes {axes:?} for rank {nd}")));
        }
        let in_strides = strides(self.shape());
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let map = strided_offsets(&out_shape, &src_strides);
        let out: Vec<T> = {
            let x = self.data();
            map.iter().map(|&i| x[i]).collect()
        };
        Ok(Self::make("permute", out_shape, out, vec![self.clone()], move |ctx| {
            let mut g = vec![T::ZERO; ctx.grad.len()];
            for (o, &i) in map.iter().enumerate() {
                g[i] = ctx.grad[o];
            }
            vec![Some(g)]
        }))
    }

    /// Broadcasts size-1 axes to `shape` (same rank).
    pub fn expand(&self, shape: &[usize]) -> Result<Self> {
        let s = self.shape();
        if s.len() != shape.len() || s.iter().zip(shape).any(|(&a, &b)| a != b && a != 1) || shape.contains(&0) {
            return Err(Error::shape("expand", format!("{s:?} -> {shape:?}")));
        }
        let in_strides = strides(s);
        let src_strides: Vec<usize> = s
            .iter()
            .zip(&in_strides)
            .map(|(&d, &st)| if d == 1 { 0 } else { st })
            .collect();
        let map = strided_offsets(shape, &src_strides);
        let out: Vec<T> = {
            let x = self.data();
            map.iter().map(|&i| x[i]).collect()
        };
        let n_in = self.numel();
        Ok(Self::make("expand", shape.to_vec(), out, vec![self.clone()], move |ctx| {
            let mut g = vec![T::ZERO; n_in];
            for (o, &i) in map.iter().enumerate() {
                g[i] += ctx.grad[o];
            }
            vec![Some(g)]
        }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.ndim() || len == 0 || start + len > self.shape()[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} [{start}, +{len}) of {:?}", self.shape()),
            ));
        }
        let (outer, dim, inner) = split_axis(self.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let x = self.data();
            for o in 0..outer {
                out.extend_from_slice(&x[(o * dim + start) * inner..][..len * inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Self::make("narrow", shape, out, vec![self.clone()], move |ctx| {
            let mut g = vec![T::ZERO; outer * dim * inner];
            for o in 0..outer {
                g[(o * dim + start) * inner..][..len * inner]
                    .copy_from_slice(&ctx.grad[o * len * inner..][..len * inner]);
            }
            vec![Some(g)]
        }))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(parts: &[Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let nd = first.ndim();
        if axis >= nd {
            return Err(Error::shape("concat", format!("axis {axis} for rank {nd}")));
        }
        for p in parts {
            let ok = p.ndim() == nd
                && (0..nd).all(|a| a == axis || p.shape()[a] == first.shape()[a]);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", first.shape(), p.shape()),
                ));
            }
        }
        let dims: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = dims.iter().sum();
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        {
            let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
            for o in 0..outer {
                for (d, x) in dims.iter().zip(&datas) {
                    out.extend_from_slice(&x[o * d * inner..][..d * inner]);
                }
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Self::make("concat", shape, out, parts.to_vec(), move |ctx| {
            let mut grads: Vec<Vec<T>> =
                dims.iter().map(|d| Vec::with_capacity(outer * d * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (d, g) in dims.iter().zip(grads.iter_mut()) {
                    g.extend_from_slice(&ctx.grad[off..off + d * inner]);
                    off += d * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// Rows of a `[n, c]` tensor: `out[i] = x[idx[i]]`.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        if self.ndim() != 2 || idx.is_empty() {
            return Err(Error::shape("gather_rows", format!("{:?}", self.shape())));
        }
        let (n, c) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of {n}")));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        {
            let x = self.data();
            for &i in idx {
                out.extend_from_slice(&x[i * c..][..c]);
            }
        }
        let idx = idx.to_vec();
        Ok(Self::make("gather_rows", vec![idx.len(), c], out, vec![self.clone()], move |ctx| {
            let mut g = vec![T::ZERO; n * c];
            for (r, &i) in idx.iter().enumerate() {
                for (a, &b) in g[i * c..][..c].iter_mut().zip(&ctx.grad[r * c..][..c]) {
                    *a += b;
                }
            }
            vec![Some(g)]
        }))
    }

    /// `out[idx[i]] += x[i]` into `rows` zero rows. Summation runs in input
    /// order, so results do not depend on scheduling.
    pub fn scatter_add_rows(&self, idx: &[usize], rows: usize) -> Result<Self> {
        if self.ndim() != 2 || idx.len() != self.shape()[0] || rows == 0 {
            return Err(Error::shape(
                "scatter_add_rows",
                format!("{:?} with {} indices", self.shape(), idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("scatter_add_rows", format!("row {bad} out of {rows}")));
        }
        let c = self.shape()[1];
        let mut out = vec![T::ZERO; rows * c];
        {
            let x = self.data();
            for (r, &i) in idx.iter().enumerate() {
                for (a, &b) in out[i * c..][..c].iter_mut().zip(&x[r * c..][..c]) {
                    *a += b;
                }
            }
        }
        let idx = idx.to_vec();
        Ok(Self::make("scatter_add_rows", vec![rows, c], out, vec![self.clone()], move |ctx| {
            let mut g = Vec::with_capacity(idx.len() * c);
            for &i in &idx {
                g.extend_from_slice(&ctx.grad[i * c..][..c]);
            }
            vec![Some(g)]
        }))
    }

    /// Index of the maximum along `axis` (ties resolve to the lowest index).
    pub fn argmax(&self, axis: usize) -> Vec<usize> {
        let (outer, dim, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for d in 1..dim {
                    if x[(o * dim + d) * inner + i] > x[(o * dim + best) * inner + i] {
                        best = d;
                    }
                }
                out.push(best);
            }
        }
        out
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Source offset for every output position of `shape` given per-axis source
/// strides.
fn strided_offsets(shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n = numel(shape);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for a in (0..shape.len()).rev() {
            idx[a] += 1;
            off += src_strides[a];
            if idx[a] < shape[a] {
                break;
            }
            off -= src_strides[a] * shape[a];
            idx[a] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f32], shape: &[usize]) -> Tensor<f32> {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let i = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        assert_eq!(a.matmul(&i).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = t(&[1.0; 6], &[2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::Shape { op: "matmul", .. })));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(&[1.0, 2.0, 3.0, -1.0, 0.0, 5.0], &[2, 3]);
        let y = x.softmax(1).unwrap().to_vec();
        for r in 0..2 {
            let s: f32 = y[r * 3..r * 3 + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(y[r * 3..r * 3 + 3].iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn permute_roundtrip() {
        let x = t(&(0..24).map(|v| v as f32).collect::<Vec<_>>(), &[2, 3, 4]);
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        // y[k, i, j] == x[i, j, k]
        assert_eq!(y.data()[1 * 6 + 1 * 3 + 2], x.data()[1 * 12 + 2 * 4 + 1]);
        let z = y.permute(&[1, 2, 0]).unwrap();
        assert_eq!(z.to_vec(), x.to_vec());
    }

    #[test]
    fn expand_broadcasts_and_sums_back() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2, 1]).unwrap();
        let y = x.expand(&[2, 3]).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        y.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn scatter_then_gather_reproduces_rows() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        let idx = [4, 0, 2];
        let s = x.scatter_add_rows(&idx, 5).unwrap();
        assert_eq!(s.gather_rows(&idx).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn narrow_and_concat_invert() {
        let x = t(&(0..12).map(|v| v as f32).collect::<Vec<_>>(), &[2, 6]);
        let a = x.narrow(1, 0, 2).unwrap();
        let b = x.narrow(1, 2, 4).unwrap();
        assert_eq!(Tensor::concat(&[a, b], 1).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn argmax_ties_lowest() {
        let x = t(&[0.5, 0.5, 0.1, 0.2, 0.9, 0.9], &[2, 3]);
        assert_eq!(x.argmax(1), vec![0, 1]);
    }

    #[test]
    fn log_of_zero_is_numeric_error() {
        let x = t(&[0.0], &[1]);
        assert!(matches!(x.log(), Err(Error::NonFinite { op: "log" })));
    }
}
