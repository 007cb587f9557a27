//! Parameter storage and the small set of layers the models are built from.
//!
//! Parameters are initialized from a seeded ChaCha RNG rather than the
//! tensor backend's unseeded generator, so a fixed seed gives bit-identical
//! weights. Layer norm and softmax are composed from primitive ops so that
//! every layer is differentiable.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::Linear;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// `U(-bound, bound)`.
    Uniform(f32),
    /// `N(0, std^2)`.
    Normal(f32),
    Const(f32),
}

struct StoreInner {
    vars: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Tensor>,
    loaded: BTreeMap<String, Tensor>,
    rng: ChaCha8Rng,
}

/// Named trainable variables plus fixed buffers, shared by scoped handles.
#[derive(Clone)]
pub struct ParamStore {
    inner: Rc<RefCell<StoreInner>>,
    prefix: String,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self::with_loaded(seed, BTreeMap::new())
    }

    /// Store whose parameters come from `tensors` where present and are
    /// freshly initialized otherwise.
    pub fn with_loaded(seed: u64, tensors: BTreeMap<String, Tensor>) -> Self {
        Self {
            inner: Rc::new(RefCell::new(StoreInner {
                vars: BTreeMap::new(),
                buffers: BTreeMap::new(),
                loaded: tensors,
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            prefix: String::new(),
            device: Device::Cpu,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn pp(&self, name: &str) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Self {
            inner: self.inner.clone(),
            prefix,
            device: self.device.clone(),
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    fn sample(&self, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut inner = self.inner.borrow_mut();
        let values: Vec<f32> = match init {
            Init::Uniform(bound) => (0..n)
                .map(|_| inner.rng.random_range(-bound..=bound))
                .collect(),
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f32 = StandardNormal.sample(&mut inner.rng);
                    z * std
                })
                .collect(),
            Init::Const(c) => vec![c; n],
        };
        Ok(Tensor::from_vec(values, shape, &self.device)?)
    }

    fn take_loaded(&self, name: &str, shape: &[usize]) -> Result<Option<Tensor>> {
        let loaded = self.inner.borrow_mut().loaded.remove(name);
        match loaded {
            Some(t) if t.dims() != shape => Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, model expects {shape:?}",
                t.dims()
            ))),
            Some(t) => Ok(Some(t.to_dtype(DType::F32)?)),
            None => Ok(None),
        }
    }

    /// Trainable variable, loaded if available.
    pub fn var(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        if let Some(v) = self.inner.borrow().vars.get(&full) {
            return Ok(v.as_tensor().clone());
        }
        let value = match self.take_loaded(&full, shape)? {
            Some(t) => t,
            None => self.sample(shape, init)?,
        };
        let var = Var::from_tensor(&value)?;
        let t = var.as_tensor().clone();
        self.inner.borrow_mut().vars.insert(full, var);
        Ok(t)
    }

    /// Fixed, non-trainable tensor saved alongside the variables.
    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        if let Some(t) = self.inner.borrow().buffers.get(&full) {
            return Ok(t.clone());
        }
        let value = match self.take_loaded(&full, shape)? {
            Some(t) => t,
            None => self.sample(shape, init)?,
        };
        self.inner.borrow_mut().buffers.insert(full, value.clone());
        Ok(value)
    }

    /// Variables whose name starts with `prefix`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.inner
            .borrow()
            .vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn all_vars(&self) -> Vec<(String, Var)> {
        self.inner
            .borrow()
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Every variable and buffer by name.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let inner = self.inner.borrow();
        inner
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .chain(inner.buffers.iter().map(|(k, t)| (k.clone(), t.clone())))
            .collect()
    }

    /// Names that were supplied for loading but never requested by the model.
    pub fn unused_loaded(&self) -> Vec<String> {
        self.inner.borrow().loaded.keys().cloned().collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.inner
            .borrow()
            .vars
            .values()
            .map(|v| v.elem_count())
            .sum()
    }
}

pub fn linear(p: &ParamStore, in_dim: usize, out_dim: usize) -> Result<Linear> {
    let bound = 1.0 / (in_dim as f32).sqrt();
    let w = p.var("weight", &[out_dim, in_dim], Init::Uniform(bound))?;
    let b = p.var("bias", &[out_dim], Init::Uniform(bound))?;
    Ok(Linear::new(w, Some(b)))
}

pub fn linear_zero(p: &ParamStore, in_dim: usize, out_dim: usize) -> Result<Linear> {
    let w = p.var("weight", &[out_dim, in_dim], Init::Const(0.0))?;
    let b = p.var("bias", &[out_dim], Init::Const(0.0))?;
    Ok(Linear::new(w, Some(b)))
}

/// Zero-padded `k x k` convolution with stride 1 or 2 and "same" padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `(c_out, c_in, k, k)`.
    weight: Tensor,
    bias: Tensor,
    stride: usize,
}

impl Conv2d {
    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (c_out, _, k, _) = self.weight.dims4()?;
        x.conv2d(&self.weight, k / 2, self.stride, 1, 1)?
            .broadcast_add(&self.bias.reshape((1, c_out, 1, 1))?)
    }
}

pub fn conv2d(
    p: &ParamStore,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
) -> Result<Conv2d> {
    if kernel % 2 == 0 || !(stride == 1 || stride == 2) {
        return Err(Error::param(
            "conv2d",
            format!("need odd kernel and stride 1 or 2, got {kernel}/{stride}"),
        ));
    }
    let bound = 1.0 / ((c_in * kernel * kernel) as f32).sqrt();
    Ok(Conv2d {
        weight: p.var(
            "weight",
            &[c_out, c_in, kernel, kernel],
            Init::Uniform(bound),
        )?,
        bias: p.var("bias", &[c_out], Init::Uniform(bound))?,
        stride,
    })
}

/// 2x2 stride-2 transposed convolution (exact 2x upsampling).
#[derive(Debug, Clone)]
pub struct UpConv2x {
    /// `(c_in, c_out, 2, 2)`.
    weight: Tensor,
    bias: Tensor,
}

impl UpConv2x {
    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

impl Module for UpConv2x {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c_in, h, w) = x.dims4()?;
        let c_out = self.weight.dim(1)?;
        let wm = self
            .weight
            .reshape((1, c_in, c_out * 4))?
            .broadcast_as((b, c_in, c_out * 4))?
            .contiguous()?;
        x.flatten_from(2)?
            .transpose(1, 2)?
            .contiguous()?
            .matmul(&wm)?
            .reshape((b, h, w, c_out, 2, 2))?
            .permute((0, 3, 1, 4, 2, 5))?
            .reshape((b, c_out, 2 * h, 2 * w))?
            .broadcast_add(&self.bias.reshape((1, c_out, 1, 1))?)
    }
}

pub fn conv_transpose2x(p: &ParamStore, c_in: usize, c_out: usize) -> Result<UpConv2x> {
    let bound = 1.0 / ((c_out * 4) as f32).sqrt();
    Ok(UpConv2x {
        weight: p.var("weight", &[c_in, c_out, 2, 2], Init::Uniform(bound))?,
        bias: p.var("bias", &[c_out], Init::Uniform(bound))?,
    })
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(p: &ParamStore, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: p.var("weight", &[dim], Init::Const(1.0))?,
            bias: p.var("bias", &[dim], Init::Const(0.0))?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let mean = xs.mean_keepdim(D::Minus1)?;
        let centered = xs.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

/// Fully connected stack with ReLU between layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(p: &ParamStore, dims: &[usize]) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| linear(&p.pp(&format!("l{i}")), d[0], d[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Same as `new`, with the last layer initialized to zero.
    pub fn new_zero_last(p: &ParamStore, dims: &[usize]) -> Result<Self> {
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let pp = p.pp(&format!("l{i}"));
                if i + 1 == n {
                    linear_zero(&pp, d[0], d[1])
                } else {
                    linear(&pp, d[0], d[1])
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }
}

impl Module for Mlp {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let mut x = xs.clone();
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(&x)?;
            if i + 1 < n {
                x = x.relu()?;
            }
        }
        Ok(x)
    }
}

/// Multi-head attention over `(batch, seq, dim)` inputs.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
}

impl Attention {
    pub fn new(p: &ParamStore, dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::param(
                "heads",
                format!("{dim} is not divisible by {heads}"),
            ));
        }
        Ok(Self {
            q: linear(&p.pp("q"), dim, dim)?,
            k: linear(&p.pp("k"), dim, dim)?,
            v: linear(&p.pp("v"), dim, dim)?,
            out: linear(&p.pp("out"), dim, dim)?,
            heads,
            dim,
        })
    }

    fn split_heads(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        x.reshape((b, n, self.heads, self.dim / self.heads))?
            .transpose(1, 2)?
            .contiguous()
    }

    /// Returns the attended values and the head-averaged attention weights
    /// `(batch, n_query, n_key)`.
    pub fn forward_with_weights(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
    ) -> candle_core::Result<(Tensor, Tensor)> {
        let (b, nq, _) = q.dims3()?;
        let qh = self.split_heads(&self.q.forward(q)?)?;
        let kh = self.split_heads(&self.k.forward(k)?)?;
        let vh = self.split_heads(&self.v.forward(v)?)?;
        let scale = 1.0 / ((self.dim / self.heads) as f64).sqrt();
        let logits = (qh.matmul(&kh.transpose(2, 3)?.contiguous()?)? * scale)?;
        let weights = candle_nn::ops::softmax(&logits, D::Minus1)?;
        let attended = weights
            .matmul(&vh)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, nq, self.dim))?;
        Ok((self.out.forward(&attended)?, weights.mean(1)?))
    }

    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> candle_core::Result<Tensor> {
        Ok(self.forward_with_weights(q, k, v)?.0)
    }
}

/// Random Fourier features of 2-D coordinates in `[0, 1]`: `[sin, cos]` of
/// `2π (2c - 1) G` for a fixed Gaussian matrix `G` of shape `(2, dim / 2)`.
#[derive(Debug, Clone)]
pub struct FourierEncoding {
    gaussian: Tensor,
}

impl FourierEncoding {
    pub fn new(p: &ParamStore, dim: usize) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(Error::param(
                "dim",
                "Fourier encoding needs an even dimension",
            ));
        }
        Ok(Self {
            gaussian: p.buffer("gaussian", &[2, dim / 2], Init::Normal(1.0))?,
        })
    }

    /// `coords`: `(n, 2)` as `(x, y)` in `[0, 1]`. Returns `(n, dim)`.
    pub fn encode(&self, coords: &Tensor) -> candle_core::Result<Tensor> {
        let c = ((coords * 2.0)? - 1.0)?;
        let proj = (c.matmul(&self.gaussian)? * (2.0 * std::f64::consts::PI))?;
        Tensor::cat(&[proj.sin()?, proj.cos()?], D::Minus1)
    }
}

pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> candle_core::Result<Tensor> {
    // max(x, 0) - x t + log(1 + exp(-|x|))
    let relu = logits.relu()?;
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    (relu - logits.mul(targets)?)? + softplus
}
