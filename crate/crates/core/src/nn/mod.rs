//! Small neural-network toolkit on top of `candle-core`.
//!
//! Parameters live in a [`ParamStore`] with deterministic seeded initialization, so
//! two stores built from the same seed hold bit-identical weights. Layers are plain
//! structs holding [`Var`]s; the store's training flag controls whether spectral
//! normalization advances its power iteration during a forward pass.

mod adam;
pub mod gradcheck;
mod im2col;

pub use adam::{Adam, AdamConfig};
pub use im2col::PatchGeometry;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use im2col::Im2Col;

/// Leaky-ReLU slope used throughout the networks.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Variance floor for instance normalization.
pub const IN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal { std: f64 },
    /// He-normal with the given fan-in.
    Kaiming { fan_in: usize },
}

struct StoreInner {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// Owns every parameter and buffer of one network.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
    training: TrainFlag,
    dtype: DType,
    device: Device,
}

/// Shared train/eval switch.
#[derive(Clone, Debug, Default)]
pub struct TrainFlag(Arc<AtomicBool>);

impl TrainFlag {
    pub fn get(&self) -> bool {
        self.0.load(Ordering::Relaxed)
    }

    pub fn set(&self, on: bool) {
        self.0.store(on, Ordering::Relaxed)
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            inner: Arc::new(Mutex::new(StoreInner {
                params: BTreeMap::new(),
                buffers: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            training: TrainFlag::default(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn set_training(&self, on: bool) {
        self.training.set(on)
    }

    pub fn is_training(&self) -> bool {
        self.training.get()
    }

    /// Trainable parameters sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().unwrap();
        inner.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Parameters and buffers, keyed by name.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let inner = self.inner.lock().unwrap();
        inner
            .params
            .iter()
            .chain(inner.buffers.iter())
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    /// Overwrites every parameter and buffer from `tensors`. All names must be present
    /// with matching shapes; extra entries are rejected.
    pub fn load(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let inner = self.inner.lock().unwrap();
        let mut seen = 0;
        for (name, var) in inner.params.iter().chain(inner.buffers.iter()) {
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if src.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{name}`: stored {:?}, expected {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?)?;
            seen += 1;
        }
        if seen != tensors.len() {
            let known: Vec<_> = tensors
                .keys()
                .filter(|k| !inner.params.contains_key(*k) && !inner.buffers.contains_key(*k))
                .cloned()
                .collect();
            return Err(Error::Checkpoint(format!("unexpected tensors: {known:?}")));
        }
        Ok(())
    }

    fn create(&self, name: String, shape: &[usize], init: Init, buffer: bool) -> Result<Var> {
        let mut inner = self.inner.lock().unwrap();
        if inner.params.contains_key(&name) || inner.buffers.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let count: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; count],
            Init::Const(c) => vec![c; count],
            Init::Normal { std } => sample_normal(&mut inner.rng, std, count),
            Init::Kaiming { fan_in } => {
                sample_normal(&mut inner.rng, (2.0 / fan_in.max(1) as f64).sqrt(), count)
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        if buffer {
            inner.buffers.insert(name, var.clone());
        } else {
            inner.params.insert(name, var.clone());
        }
        Ok(var)
    }
}

fn sample_normal(rng: &mut ChaCha8Rng, std: f64, count: usize) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; count];
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..count).map(|_| dist.sample(rng)).collect()
}

/// Name prefix into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.store.create(self.full(name), shape, init, false)
    }

    /// A non-trainable tensor that is still checkpointed.
    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.store.create(self.full(name), shape, init, true)
    }

    pub fn training_flag(&self) -> TrainFlag {
        self.store.training.clone()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv2dConfig {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
    pub spectral_norm: bool,
    /// Weight initialization; `None` means He-normal.
    pub init: Option<Init>,
}

impl Conv2dConfig {
    pub fn k3(spectral_norm: bool) -> Self {
        Self {
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: true,
            spectral_norm,
            init: None,
        }
    }

    pub fn k3s2(spectral_norm: bool) -> Self {
        Self {
            stride: 2,
            ..Self::k3(spectral_norm)
        }
    }

    pub fn k4s2(spectral_norm: bool) -> Self {
        Self {
            kernel: 4,
            stride: 2,
            padding: 1,
            ..Self::k3(spectral_norm)
        }
    }

    pub fn k1(spectral_norm: bool) -> Self {
        Self {
            kernel: 1,
            padding: 0,
            ..Self::k3(spectral_norm)
        }
    }

    pub fn with_init(mut self, init: Init) -> Self {
        self.init = Some(init);
        self
    }
}

/// 2-D convolution computed as a matrix product over extracted patches.
#[derive(Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    spectral: Option<SpectralNorm>,
    geometry: PatchGeometry,
    in_channels: usize,
    out_channels: usize,
}

impl Conv2d {
    pub fn new(scope: &Scope, in_channels: usize, out_channels: usize, cfg: Conv2dConfig) -> Result<Self> {
        let k = cfg.kernel;
        let fan_in = in_channels * k * k;
        let init = cfg.init.unwrap_or(Init::Kaiming { fan_in });
        let weight = scope.param("weight", &[out_channels, in_channels, k, k], init)?;
        let bias = if cfg.bias {
            Some(scope.param("bias", &[out_channels], Init::Zeros)?)
        } else {
            None
        };
        let spectral = if cfg.spectral_norm {
            Some(SpectralNorm::new(scope, &weight)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            spectral,
            geometry: PatchGeometry {
                kernel: k,
                stride: cfg.stride,
                padding: cfg.padding,
            },
            in_channels,
            out_channels,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn geometry(&self) -> PatchGeometry {
        self.geometry
    }

    pub fn raw_weight(&self) -> &Var {
        &self.weight
    }

    pub fn spectral_norm(&self) -> Option<&SpectralNorm> {
        self.spectral.as_ref()
    }

    /// The weight actually applied, as a `[out, in·k·k]` matrix.
    fn weight_matrix(&self) -> Result<Tensor> {
        let w = self
            .weight
            .as_tensor()
            .reshape((self.out_channels, self.in_channels * self.geometry.kernel * self.geometry.kernel))?;
        match &self.spectral {
            Some(sn) => sn.normalize(&w),
            None => Ok(w),
        }
    }

    /// Effective (normalized) weight evaluated from the stored power-iteration state,
    /// without advancing it.
    pub fn effective_weight(&self) -> Result<Tensor> {
        let w = self.weight.as_tensor().detach();
        let w = w.reshape((self.out_channels, ()))?;
        match &self.spectral {
            Some(sn) => Ok(w.broadcast_div(&sn.sigma(&w)?)?),
            None => Ok(w),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let bias = self.bias.as_ref().map(|b| b.as_tensor());
        conv2d(x, &self.weight_matrix()?, bias, self.geometry)
    }
}

/// Convolution of `[N, C, H, W]` with a `[out, C·k·k]` weight matrix.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: PatchGeometry) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (out_channels, cols_per_out) = weight.dims2()?;
    if c * g.kernel * g.kernel != cols_per_out {
        return Err(Error::invalid(format!(
            "conv expects {} input channels, got {c}",
            cols_per_out / (g.kernel * g.kernel)
        )));
    }
    let (ho, wo) = match (g.out_size(h), g.out_size(w)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => return Err(Error::invalid(format!("input {h}x{w} too small for kernel {}", g.kernel))),
    };
    let cols = x.contiguous()?.apply_op1(Im2Col { geometry: g })?;
    let y = weight.matmul(&cols)?;
    let y = match bias {
        Some(b) => y.broadcast_add(&b.unsqueeze(1)?)?,
        None => y,
    };
    Ok(y.reshape((out_channels, n, ho, wo))?.transpose(0, 1)?.contiguous()?)
}

/// Spectral normalization by one step of power iteration per training forward.
#[derive(Clone)]
pub struct SpectralNorm {
    u: Var,
    v: Var,
    training: TrainFlag,
}

const SN_EPS: f64 = 1e-12;
const SN_WARMUP_ITERS: usize = 15;

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_all()?.sqrt()?.maximum(SN_EPS)?;
    Ok(x.broadcast_div(&norm)?)
}

impl SpectralNorm {
    fn new(scope: &Scope, weight: &Var) -> Result<Self> {
        let dims = weight.dims();
        let rows = dims[0];
        let cols: usize = dims[1..].iter().product();
        let u = scope.buffer("sn_u", &[rows], Init::Normal { std: 1.0 })?;
        let v = scope.buffer("sn_v", &[cols], Init::Zeros)?;
        let sn = Self {
            u,
            v,
            training: scope.training_flag(),
        };
        u_normalize(&sn.u)?;
        let w = weight.as_tensor().reshape((rows, cols))?;
        for _ in 0..SN_WARMUP_ITERS {
            sn.power_step(&w)?;
        }
        Ok(sn)
    }

    fn power_step(&self, w: &Tensor) -> Result<()> {
        let w = w.detach();
        let v = l2_normalize(&w.t()?.matmul(&self.u.as_tensor().unsqueeze(1)?)?.squeeze(1)?)?;
        let u = l2_normalize(&w.matmul(&v.unsqueeze(1)?)?.squeeze(1)?)?;
        self.v.set(&v)?;
        self.u.set(&u)?;
        Ok(())
    }

    /// `uᵀ W v`, differentiable in `W`, clamped away from zero.
    fn sigma(&self, w: &Tensor) -> Result<Tensor> {
        let u = self.u.as_tensor().detach().unsqueeze(0)?;
        let v = self.v.as_tensor().detach().unsqueeze(1)?;
        Ok(u.matmul(w)?.matmul(&v)?.maximum(SN_EPS)?)
    }

    fn normalize(&self, w: &Tensor) -> Result<Tensor> {
        if self.training.get() {
            self.power_step(w)?;
        }
        Ok(w.broadcast_div(&self.sigma(w)?)?)
    }

    pub fn u(&self) -> Tensor {
        self.u.as_tensor().detach()
    }
}

fn u_normalize(u: &Var) -> Result<()> {
    let n = l2_normalize(u.as_tensor())?;
    u.set(&n)?;
    Ok(())
}

/// Per-instance, per-channel standardization of an `[N, C, H, W]` tensor.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let flat = x.reshape((n, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let out = centered.broadcast_div(&(var + IN_EPS)?.sqrt()?)?;
    Ok(out.reshape((n, c, h, w))?)
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * LEAKY_SLOPE)?)?)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, factor, w, factor))?
        .reshape((n, c, h * factor, w * factor))?)
}

/// Nearest-neighbour resampling to `(h, w)`; only integer up-scaling is supported.
pub fn resize_nearest(x: &Tensor, (th, tw): (usize, usize)) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if th % h != 0 || tw % w != 0 || th / h != tw / w {
        return Err(Error::invalid(format!("cannot resample {h}x{w} to {th}x{tw} with a uniform integer factor")));
    }
    upsample_nearest(x, th / h)
}

/// 2×2 average pooling with stride 2.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!("avg_pool2 needs even sizes, got {h}x{w}")));
    }
    Ok(x.reshape((n, c, h / 2, 2, w / 2, 2))?
        .sum(5)?
        .sum(3)?
        .affine(0.25, 0.0)?)
}

/// Channel softmax of `[N, C, ...]` logits along dimension 1.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    softmax(x, 1)
}

/// Max-shifted softmax along `dim`.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(dim)?;
    Ok(e.broadcast_div(&s)?)
}

/// Logistic function written with primitive ops so it stays differentiable. Only
/// `exp(-|x|)` is ever evaluated, so large logits of either sign neither overflow
/// nor poison the backward pass.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    let e = x.abs()?.neg()?.exp()?;
    let denom = (&e + 1.0)?;
    let pos = denom.recip()?;
    let neg = (&e / &denom)?;
    Ok(x.ge(0.0)?.where_cond(&pos, &neg)?)
}

/// Returns `true` when every element is finite.
pub fn all_finite(x: &Tensor) -> Result<bool> {
    let v = x.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok(v.iter().all(|a| a.is_finite()))
}

pub fn scalar(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
