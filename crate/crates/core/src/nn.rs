//! Named parameter store and the handful of layers shared by every network.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names. Layers are free
//! functions that look their weights up by prefix, so one store can hold
//! several networks and be saved as a flat set of named arrays. Frozen
//! parameters are handed out detached and never reach an optimizer.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::store::NamedArray;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    /// Normal with std `1/sqrt(fan_in)`, fan-in taken from the first axis.
    FanIn,
}

#[derive(Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
    frozen: BTreeSet<String>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("params", &self.vars.len())
            .field("frozen", &self.frozen.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            vars: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    /// Register a new parameter drawn from `init`.
    pub fn create<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<()> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => (0..n)
                .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect::<Vec<f64>>(),
            Init::FanIn => {
                let fan = shape.first().copied().unwrap_or(1).max(1) as f64;
                let std = fan.sqrt().recip();
                (0..n)
                    .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                    .collect::<Vec<f64>>()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
        Ok(())
    }

    /// Parameter tensor; detached when frozen.
    pub fn get(&self, name: &str) -> Result<Tensor> {
        let v = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        if self.frozen.contains(name) {
            Ok(v.as_detached_tensor())
        } else {
            Ok(v.as_tensor().clone())
        }
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn freeze_prefix(&mut self, prefix: &str) {
        for k in self.vars.keys().filter(|k| k.starts_with(prefix)) {
            self.frozen.insert(k.clone());
        }
    }

    pub fn freeze_all(&mut self) {
        self.frozen = self.vars.keys().cloned().collect();
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| !self.frozen.contains(*k))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Move every parameter of `other` into this store. Names must not clash.
    pub fn absorb(&mut self, other: ParamStore) -> Result<()> {
        for (k, v) in other.vars {
            if self.vars.contains_key(&k) {
                return Err(Error::Config(format!("parameter {k} present in both stores")));
            }
            let v = if v.dtype() == self.dtype {
                v
            } else {
                Var::from_tensor(&v.as_tensor().to_dtype(self.dtype)?)?
            };
            if other.frozen.contains(&k) {
                self.frozen.insert(k.clone());
            }
            self.vars.insert(k, v);
        }
        Ok(())
    }

    /// Deep copy with fresh variables, optionally in a different precision.
    pub fn deep_clone(&self, dtype: DType) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            let t = v.as_tensor().to_dtype(dtype)?.copy()?;
            vars.insert(k.clone(), Var::from_tensor(&t)?);
        }
        Ok(Self {
            dtype,
            device: self.device.clone(),
            vars,
            frozen: self.frozen.clone(),
        })
    }

    /// Subset of parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> Result<Self> {
        let mut out = Self::new(self.dtype);
        for (k, v) in self.vars.iter().filter(|(k, _)| k.starts_with(prefix)) {
            out.vars
                .insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
            if self.frozen.contains(k) {
                out.frozen.insert(k.clone());
            }
        }
        Ok(out)
    }

    pub fn to_arrays(&self) -> Result<BTreeMap<String, NamedArray>> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.vars {
            let t = v.as_tensor();
            let shape = t.dims().to_vec();
            let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            out.insert(k.clone(), NamedArray::f32(shape, data)?);
        }
        Ok(out)
    }

    /// Build a store from named `f32` arrays (as written by [`Self::to_arrays`]).
    pub fn from_arrays<'a>(
        arrays: impl IntoIterator<Item = (&'a String, &'a NamedArray)>,
        dtype: DType,
    ) -> Result<Self> {
        let mut out = Self::new(dtype);
        for (k, a) in arrays {
            let data = a
                .as_f32()
                .ok_or_else(|| Error::Config(format!("parameter {k} is not f32")))?;
            let t = Tensor::from_slice(data, a.shape.as_slice(), &out.device)?.to_dtype(dtype)?;
            out.vars.insert(k.clone(), Var::from_tensor(&t)?);
        }
        Ok(out)
    }

    /// `θ̄ ← τ·θ̄ + (1−τ)·θ` for every parameter of `self`, read from `online`.
    pub fn ema_update(&self, online: &ParamStore, tau: f64) -> Result<()> {
        for (k, target) in &self.vars {
            let src = online
                .vars
                .get(k)
                .ok_or_else(|| Error::Shape(format!("online store lacks {k}")))?;
            if src.dims() != target.dims() {
                return Err(Error::Shape(format!(
                    "{k}: target {:?} vs online {:?}",
                    target.dims(),
                    src.dims()
                )));
            }
            let next = ((target.as_tensor() * tau)? + (src.as_tensor() * (1.0 - tau))?)?;
            target.set(&next)?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and f32 payloads.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in &self.vars {
            h.update(k.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let data: Vec<f32> = v.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            for x in data {
                h.update(x.to_le_bytes());
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Overwrite one element (flat index) of a parameter; used by finite-difference checks.
    pub fn nudge(&self, name: &str, index: usize, delta: f64) -> Result<()> {
        let v = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        let shape = v.dims().to_vec();
        let mut flat: Vec<f64> = v.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        flat[index] += delta;
        let t = Tensor::from_vec(flat, shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
        v.set(&t)?;
        Ok(())
    }
}

/// Adam with global-norm gradient clipping over the trainable parameters of a store.
pub struct Trainer {
    opt: AdamW,
    vars: Vec<Var>,
    clip: f64,
}

impl Trainer {
    pub fn new(store: &ParamStore, lr: f64, clip: f64) -> Result<Self> {
        let vars = store.trainable_vars();
        let opt = AdamW::new(
            vars.clone(),
            ParamsAdamW {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.0,
            },
        )?;
        Ok(Self { opt, vars, clip })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt.set_learning_rate(lr);
    }

    pub fn lr(&self) -> f64 {
        self.opt.learning_rate()
    }

    /// Backpropagate `loss`, clip, step. Returns the pre-clip gradient norm.
    pub fn step(&mut self, loss: &Tensor) -> Result<f64> {
        let mut grads = loss.backward()?;
        let norm = grad_norm(&grads, &self.vars)?;
        if self.clip > 0.0 && norm > self.clip {
            let s = self.clip / (norm + 1e-12);
            for v in &self.vars {
                if let Some(g) = grads.remove(v.as_tensor()) {
                    grads.insert(v.as_tensor(), (g * s)?);
                }
            }
        }
        if self.opt.learning_rate() > 0.0 {
            self.opt.step(&grads)?;
        }
        Ok(norm)
    }
}

fn grad_norm(grads: &GradStore, vars: &[Var]) -> Result<f64> {
    let mut total = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            total += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(total.sqrt())
}

// ---------------------------------------------------------------------------
// layers

/// `x W + b` over the last axis; `W` is `[in, out]`.
pub fn linear(ps: &ParamStore, name: &str, x: &Tensor) -> Result<Tensor> {
    let w = ps.get(&format!("{name}.w"))?;
    let b = ps.get(&format!("{name}.b"))?;
    let dims = x.dims().to_vec();
    let din = *dims.last().ok_or_else(|| Error::Shape("linear on scalar".into()))?;
    if din != w.dim(0)? {
        return Err(Error::Shape(format!(
            "{name}: input width {din} but weight is {:?}",
            w.dims()
        )));
    }
    let rows: usize = dims[..dims.len() - 1].iter().product();
    let y = x.reshape((rows, din))?.matmul(&w)?.broadcast_add(&b)?;
    let mut out = dims;
    *out.last_mut().expect("non-empty") = w.dim(1)?;
    Ok(y.reshape(out)?)
}

pub fn init_linear<R: Rng>(
    ps: &mut ParamStore,
    name: &str,
    din: usize,
    dout: usize,
    rng: &mut R,
) -> Result<()> {
    ps.create(&format!("{name}.w"), &[din, dout], Init::FanIn, rng)?;
    ps.create(&format!("{name}.b"), &[dout], Init::Zeros, rng)
}

pub fn init_linear_zero<R: Rng>(
    ps: &mut ParamStore,
    name: &str,
    din: usize,
    dout: usize,
    rng: &mut R,
) -> Result<()> {
    ps.create(&format!("{name}.w"), &[din, dout], Init::Zeros, rng)?;
    ps.create(&format!("{name}.b"), &[dout], Init::Zeros, rng)
}

/// Two-layer SiLU perceptron `{name}.l0`, `{name}.l1`.
pub fn mlp(ps: &ParamStore, name: &str, x: &Tensor) -> Result<Tensor> {
    let h = silu(&linear(ps, &format!("{name}.l0"), x)?)?;
    linear(ps, &format!("{name}.l1"), &h)
}

/// `x · sigmoid(x)`. Smooth, so units cannot die the way ReLU units do.
pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok((x / (x.neg()?.exp()? + 1.0)?)?)
}

pub fn init_mlp<R: Rng>(
    ps: &mut ParamStore,
    name: &str,
    din: usize,
    hidden: usize,
    dout: usize,
    rng: &mut R,
) -> Result<()> {
    init_linear(ps, &format!("{name}.l0"), din, hidden, rng)?;
    init_linear(ps, &format!("{name}.l1"), hidden, dout, rng)
}

/// Layer normalisation over the last axis without affine parameters.
pub fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let c = x.broadcast_sub(&x.mean_keepdim(D::Minus1)?)?;
    let var = c.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(c.broadcast_div(&(var + 1e-5)?.sqrt()?)?)
}

/// Softmax over the last axis, written out so that it differentiates.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// `softplus(x) = max(x,0) + log(1 + exp(-|x|))`, stable for large |x|.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Sinusoidal embedding of integer steps, `[n] -> [n, dim]`.
pub fn timestep_embedding(steps: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(steps.len() * dim);
    for &s in steps {
        for i in 0..dim {
            let k = i % half.max(1);
            let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
            let a = s as f64 * freq;
            v.push(if i < half { a.sin() } else { a.cos() });
        }
    }
    Ok(Tensor::from_vec(v, (steps.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Pre-LN multi-head attention block: `{name}.q`, `{name}.kv`, `{name}.o`, `{name}.ff`.
#[derive(Debug, Clone, Copy)]
pub struct BlockDims {
    pub d: usize,
    pub heads: usize,
    pub hidden: usize,
}

pub fn init_block<R: Rng>(
    ps: &mut ParamStore,
    name: &str,
    dims: BlockDims,
    rng: &mut R,
) -> Result<()> {
    if dims.heads == 0 || dims.d % dims.heads != 0 {
        return Err(Error::Config(format!(
            "{name}: width {} not divisible by {} heads",
            dims.d, dims.heads
        )));
    }
    init_linear(ps, &format!("{name}.q"), dims.d, dims.d, rng)?;
    init_linear(ps, &format!("{name}.kv"), dims.d, 2 * dims.d, rng)?;
    init_linear(ps, &format!("{name}.o"), dims.d, dims.d, rng)?;
    init_mlp(ps, &format!("{name}.ff"), dims.d, dims.hidden, dims.d, rng)
}

/// Keys and values `[B, h, N, d/h]` of `LN(x)` for `x: [B, N, d]`.
pub fn block_kv(
    ps: &ParamStore,
    name: &str,
    x: &Tensor,
    heads: usize,
) -> Result<(Tensor, Tensor)> {
    let (b, n, d) = x.dims3()?;
    let kv = linear(ps, &format!("{name}.kv"), &layer_norm(x)?)?;
    let kv = kv.reshape((b, n, 2, heads, d / heads))?;
    let k = kv.narrow(2, 0, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?;
    let v = kv.narrow(2, 1, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?;
    Ok((k, v))
}

/// Attention of the rows `xq: [B, Nq, d]` over precomputed keys/values,
/// followed by the residual and feed-forward sublayers. `bias` is an additive
/// logit mask broadcastable to `[B, h, Nq, N]`. Returns the block output and
/// the attention probabilities `[B, h, Nq, N]`.
pub fn block_with_kv(
    ps: &ParamStore,
    name: &str,
    xq: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    bias: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let (b, nq, d) = xq.dims3()?;
    let dh = d / heads;
    let q = linear(ps, &format!("{name}.q"), &layer_norm(xq)?)?
        .reshape((b, nq, heads, dh))?
        .transpose(1, 2)?
        .contiguous()?;
    let mut logits = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
    if let Some(m) = bias {
        logits = logits.broadcast_add(m)?;
    }
    let p = softmax_last(&logits)?;
    let att = p
        .matmul(&v.contiguous()?)?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, nq, d))?;
    let x = (xq + linear(ps, &format!("{name}.o"), &att)?)?;
    let x = (&x + mlp(ps, &format!("{name}.ff"), &layer_norm(&x)?)?)?;
    Ok((x, p))
}

/// Multi-head self-attention over already-normalised `h: [B, N, d]` using
/// the `{name}.q`, `{name}.kv` and `{name}.o` projections of a block.
pub fn self_attention(ps: &ParamStore, name: &str, h: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, d) = h.dims3()?;
    let dh = d / heads;
    let q = linear(ps, &format!("{name}.q"), h)?
        .reshape((b, n, heads, dh))?
        .transpose(1, 2)?
        .contiguous()?;
    let kv = linear(ps, &format!("{name}.kv"), h)?.reshape((b, n, 2, heads, dh))?;
    let k = kv.narrow(2, 0, 1)?.squeeze(2)?.permute((0, 2, 3, 1))?.contiguous()?;
    let v = kv.narrow(2, 1, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?;
    let p = softmax_last(&(q.matmul(&k)? / (dh as f64).sqrt())?)?;
    let att = p.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, n, d))?;
    linear(ps, &format!("{name}.o"), &att)
}

/// Full self-attention block over `x: [B, N, d]`.
pub fn block(
    ps: &ParamStore,
    name: &str,
    x: &Tensor,
    heads: usize,
    bias: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let (k, v) = block_kv(ps, name, x, heads)?;
    block_with_kv(ps, name, x, &k, &v, heads, bias)
}

/// Additive key mask `[B, 1, 1, N]`: 0 where `valid`, a large negative number elsewhere.
pub fn key_mask(valid: &[Vec<bool>], dtype: DType) -> Result<Tensor> {
    let b = valid.len();
    let n = valid.first().map_or(0, Vec::len);
    let v: Vec<f32> = valid
        .iter()
        .flat_map(|row| row.iter().map(|&ok| if ok { 0.0 } else { -1e9 }))
        .collect();
    Ok(Tensor::from_vec(v, (b, 1, 1, n), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Standard-normal tensor drawn from `rng`, so that draws are reproducible.
pub fn gaussian<R: Rng>(shape: &[usize], dtype: DType, rng: &mut R) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) as f32)
        .collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn to_vec2(t: &Tensor) -> Result<Vec<Vec<f32>>> {
    Ok(t.to_dtype(DType::F32)?.to_vec2()?)
}

pub fn to_vec1(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
}

/// `[rows, cols]` tensor from row-major `f32` data.
pub fn matrix(data: &[f32], rows: usize, cols: usize, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_slice(data, (rows, cols), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn from_f64(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Analytic gradient of `loss` with respect to selected elements of one
/// parameter next to a central finite difference with step `h`. Returns
/// `(analytic, numeric)` per element. Meant for 64-bit stores.
pub fn finite_difference_check(
    ps: &ParamStore,
    name: &str,
    indices: &[usize],
    h: f64,
    loss: &dyn Fn(&ParamStore) -> Result<Tensor>,
) -> Result<Vec<(f64, f64)>> {
    let var = ps
        .var(name)
        .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
    let grads = loss(ps)?.backward()?;
    let g = match grads.get(var.as_tensor()) {
        Some(g) => g.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?,
        None => vec![0.0; var.elem_count()],
    };
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        ps.nudge(name, i, h)?;
        let up = scalar(&loss(ps)?)?;
        ps.nudge(name, i, -2.0 * h)?;
        let down = scalar(&loss(ps)?)?;
        ps.nudge(name, i, h)?;
        out.push((g[i], (up - down) / (2.0 * h)));
    }
    Ok(out)
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
