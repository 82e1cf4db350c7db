//! Parameter registry and the small set of layers the model is built from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Real, Tensor};

/// Named trainable parameters and non-trainable buffers, in registration
/// order.
pub struct ParamStore<T: Real = f32> {
    params: Vec<(String, Tensor<T>)>,
    buffers: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { params: Vec::new(), buffers: Vec::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    fn check_fresh(&self, name: &str) -> Result<()> {
        if self.get(name).is_some() {
            return Err(Error::Contract(format!("tensor `{name}` registered twice")));
        }
        Ok(())
    }

    pub fn param(&mut self, name: &str, data: Vec<T>, shape: &[usize]) -> Result<Tensor<T>> {
        self.check_fresh(name)?;
        let t = Tensor::param(data, shape)?;
        self.params.push((name.to_string(), t.clone()));
        Ok(t)
    }

    pub fn buffer(&mut self, name: &str, data: Vec<T>, shape: &[usize]) -> Result<Tensor<T>> {
        self.check_fresh(name)?;
        let t = Tensor::from_vec(data, shape)?;
        self.buffers.push((name.to_string(), t.clone()));
        Ok(t)
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialisation.
    pub fn uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<T>> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
        self.param(name, data, shape)
    }

    pub fn filled(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor<T>> {
        self.param(name, vec![T::from_f64(value); shape.iter().product()], shape)
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn named_params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn named_buffers(&self) -> &[(String, Tensor<T>)] {
        &self.buffers
    }

    /// Parameters followed by buffers.
    pub fn named_tensors(&self) -> impl Iterator<Item = &(String, Tensor<T>)> {
        self.params.iter().chain(&self.buffers)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.named_tensors().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Parameters whose name starts with `prefix`.
    pub fn params_with_prefix(&self, prefix: &str) -> Vec<Tensor<T>> {
        self.params.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.clone()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, p) in &self.params {
            p.zero_grad();
        }
    }

    /// Registers every parameter that received no gradient with a zero one,
    /// so branches that were switched off do not stall the optimizer.
    pub fn fill_missing_grads(&self) {
        for (_, p) in &self.params {
            if p.grad_ref().is_none() {
                let zeros = vec![T::ZERO; p.numel()];
                p.accumulate(&zeros);
            }
        }
    }
}

/// `y = x W + b` over rows of `x: [N, in]`; `W: [in, out]`.
pub struct Linear<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Linear {
            weight: store.uniform(&format!("{name}.weight"), &[fan_in, fan_out], fan_in, rng)?,
            bias: store.uniform(&format!("{name}.bias"), &[fan_out], fan_in, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.matmul(&self.weight)?;
        let (n, out) = (y.shape()[0], y.shape()[1]);
        y.add(&self.bias.reshape(&[1, out])?.expand(&[n, out])?)
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Two linear layers with a ReLU between them.
pub struct Mlp2<T: Real = f32> {
    pub hidden: Linear<T>,
    pub out: Linear<T>,
}

impl<T: Real> Mlp2<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        dims: [usize; 3],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Mlp2 {
            hidden: Linear::new(store, &format!("{name}.0"), dims[0], dims[1], rng)?,
            out: Linear::new(store, &format!("{name}.1"), dims[1], dims[2], rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.out.forward(&self.hidden.forward(x)?.relu()?)
    }
}

/// Per-row normalization over the last axis of `[N, C]` with a learned
/// affine map.
pub struct LayerNorm<T: Real = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.filled(&format!("{name}.gamma"), &[channels], 1.0)?,
            beta: store.filled(&format!("{name}.beta"), &[channels], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.gamma.numel() {
            return Err(Error::shape("layer_norm", format!("{s:?} for {} channels", self.gamma.numel())));
        }
        let (n, c) = (s[0], s[1]);
        let col = |t: Tensor<T>| -> Result<Tensor<T>> { t.reshape(&[n, 1])?.expand(&[n, c]) };
        let centered = x.sub(&col(x.sum_axis(1)?.scale(1.0 / c as f64)?)?)?;
        let var = centered.mul(&centered)?.sum_axis(1)?.scale(1.0 / c as f64)?;
        let normed = centered.div(&col(var.add_scalar(self.eps)?.powf(0.5)?)?)?;
        let row = |t: &Tensor<T>| -> Result<Tensor<T>> { t.reshape(&[1, c])?.expand(&[n, c]) };
        normed.mul(&row(&self.gamma)?)?.add(&row(&self.beta)?)
    }
}

/// 3-D convolution with cubic kernel and optional bias.
pub struct Conv3d<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub spec: ConvSpec,
}

impl<T: Real> Conv3d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = cin * kernel.pow(3);
        let weight = store.uniform(&format!("{name}.weight"), &[cout, cin, kernel, kernel, kernel], fan_in, rng)?;
        let bias = if bias {
            Some(store.uniform(&format!("{name}.bias"), &[cout], fan_in, rng)?)
        } else {
            None
        };
        Ok(Conv3d { weight, bias, spec })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv3d(&self.weight, self.bias.as_ref(), self.spec)
    }
}

/// 2-D convolution with square kernel.
pub struct Conv2d<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = cin * kernel * kernel;
        let weight = store.uniform(&format!("{name}.weight"), &[cout, cin, kernel, kernel], fan_in, rng)?;
        let bias = if bias {
            Some(store.uniform(&format!("{name}.bias"), &[cout], fan_in, rng)?)
        } else {
            None
        };
        Ok(Conv2d { weight, bias, stride, padding })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.weight, self.bias.as_ref(), self.stride, self.padding)
    }
}

/// Batch normalization over axis 1 with running statistics.
pub struct BatchNorm<T: Real = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.filled(&format!("{name}.gamma"), &[channels], 1.0)?,
            beta: store.filled(&format!("{name}.beta"), &[channels], 0.0)?,
            running_mean: store.buffer(&format!("{name}.running_mean"), vec![T::ZERO; channels], &[channels])?,
            running_var: store.buffer(&format!("{name}.running_var"), vec![T::ONE; channels], &[channels])?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// Training mode normalizes with batch statistics and folds them into
    /// the running estimates; evaluation mode uses the running estimates.
    pub fn forward(&self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        if !train {
            let (m, v) = (self.running_mean.data(), self.running_var.data());
            return Ok(x.batch_norm(&self.gamma, &self.beta, Some((&m, &v)), self.eps)?.0);
        }
        let (y, stats) = x.batch_norm(&self.gamma, &self.beta, None, self.eps)?;
        let stats = stats.expect("training mode returns statistics");
        let n = stats.count as f64;
        let mo = self.momentum;
        let mean: Vec<T> = self
            .running_mean
            .data()
            .iter()
            .zip(&stats.mean)
            .map(|(&r, &b)| T::from_f64((1.0 - mo) * r.to_f64() + mo * b.to_f64()))
            .collect();
        let var: Vec<T> = self
            .running_var
            .data()
            .iter()
            .zip(&stats.var)
            .map(|(&r, &b)| T::from_f64((1.0 - mo) * r.to_f64() + mo * b.to_f64() * n / (n - 1.0)))
            .collect();
        self.running_mean.set_data(mean)?;
        self.running_var.set_data(var)?;
        Ok(y)
    }
}
