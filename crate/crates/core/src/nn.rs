//! Parameter storage and the small set of differentiable layers the model is
//! built from. Feature maps are channels-last: `(batch, height, width, channels)`.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::bilinear_taps;
use crate::error::{Error, Result};
use crate::rng;

/// Training mode selects batch statistics in normalization layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `(-bound, bound)`.
    Uniform(f64),
}

struct Entry {
    var: Var,
    trainable: bool,
}

struct StoreInner {
    vars: BTreeMap<String, Entry>,
    rng: ChaCha8Rng,
}

/// Named, flat collection of parameters and buffers.
///
/// Cloning is shallow; [`ParamStore::pp`] returns a view that prefixes names.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
    prefix: String,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(StoreInner {
                vars: BTreeMap::new(),
                rng: rng::stream(seed, "init"),
            })),
            prefix: String::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Self {
            prefix,
            ..self.clone()
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn create(&self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<Var> {
        let full = self.full_name(name);
        let mut inner = self.inner.lock().expect("param store poisoned");
        if inner.vars.contains_key(&full) {
            return Err(Error::Dimension(format!("parameter {full} defined twice")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| inner.rng.gen_range(-b..b)).collect(),
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        inner.vars.insert(
            full,
            Entry {
                var: var.clone(),
                trainable,
            },
        );
        Ok(var)
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        Ok(self.create(name, shape, init, true)?.as_tensor().clone())
    }

    /// Non-trainable state (e.g. running statistics), saved with checkpoints.
    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.create(name, shape, init, false)
    }

    /// Trainable parameters in name order.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner
            .vars
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.clone(), e.var.clone()))
            .collect()
    }

    /// Every variable (parameters and buffers) in name order.
    pub fn all(&self) -> Vec<(String, Var, bool)> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner
            .vars
            .iter()
            .map(|(k, e)| (k.clone(), e.var.clone(), e.trainable))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner.vars.get(name).map(|e| e.var.clone())
    }

    /// Total number of trainable scalars.
    pub fn count_trainable(&self) -> usize {
        self.trainable().iter().map(|(_, v)| v.elem_count()).sum()
    }
}

/// Affine map over the last axis (a 1x1 convolution for feature maps).
#[derive(Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &ParamStore, name: &str, inp: usize, out: usize, bias: bool) -> Result<Self> {
        let ps = ps.pp(name);
        let bound = 1.0 / (inp as f64).sqrt();
        let weight = ps.param("weight", &[inp, out], Init::Uniform(bound))?;
        let bias = if bias {
            Some(ps.param("bias", &[out], Init::Uniform(bound))).transpose()?
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim(1).expect("2-d weight")
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let inp = *dims
            .last()
            .ok_or_else(|| Error::Dimension("scalar input".into()))?;
        let rows = x.elem_count() / inp.max(1);
        let y = x.reshape((rows, inp))?.matmul(&self.weight)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

/// Normalization over the last axis.
#[derive(Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &ParamStore, name: &str, dim: usize) -> Result<Self> {
        let ps = ps.pp(name);
        Ok(Self {
            gamma: ps.param("weight", &[dim], Init::Ones)?,
            beta: ps.param("bias", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let y = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Batch normalization over every axis except the last.
#[derive(Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn new(ps: &ParamStore, name: &str, dim: usize) -> Result<Self> {
        let ps = ps.pp(name);
        Ok(Self {
            gamma: ps.param("weight", &[dim], Init::Ones)?,
            beta: ps.param("bias", &[dim], Init::Zeros)?,
            running_mean: ps.buffer("running_mean", &[dim], Init::Zeros)?,
            running_var: ps.buffer("running_var", &[dim], Init::Ones)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = x.dim(D::Minus1)?;
        let flat = x.reshape((x.elem_count() / c, c))?;
        let (mean, var) = match mode {
            Mode::Train => {
                let n = flat.dim(0)?;
                let mean = flat.mean_keepdim(0)?;
                let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(0)?;
                let m = self.momentum;
                let unbiased = if n > 1 {
                    n as f64 / (n as f64 - 1.0)
                } else {
                    1.0
                };
                let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                    + (mean.detach().squeeze(0)? * m)?)?;
                let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                    + (var.detach().squeeze(0)? * (m * unbiased))?)?;
                self.running_mean.set(&new_mean)?;
                self.running_var.set(&new_var)?;
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.as_tensor().unsqueeze(0)?,
                self.running_var.as_tensor().unsqueeze(0)?,
            ),
        };
        let y = flat
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)?;
        Ok(y.reshape(x.shape())?)
    }
}

/// 3x3 convolution, stride 1, zero padding 1, via explicit im2col.
#[derive(Clone)]
pub struct Conv3x3 {
    proj: Linear,
}

impl Conv3x3 {
    pub fn new(ps: &ParamStore, name: &str, inp: usize, out: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(ps, name, 9 * inp, out, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, h, w, _) = x.dims4()?;
        let padded = x.pad_with_zeros(1, 1, 1)?.pad_with_zeros(2, 1, 1)?;
        let mut taps = Vec::with_capacity(9);
        for dy in 0..3 {
            for dx in 0..3 {
                taps.push(padded.narrow(1, dy, h)?.narrow(2, dx, w)?);
            }
        }
        let cols = Tensor::cat(&taps, 3)?;
        self.proj.forward(&cols)
    }
}

struct ReluPatterns {
    masks: Vec<Tensor>,
    next: usize,
    replay: bool,
}

thread_local! {
    static RELU_PATTERNS: RefCell<Option<ReluPatterns>> = const { RefCell::new(None) };
}

/// ReLU that can record its activation pattern and replay it later.
pub fn relu(x: &Tensor) -> Result<Tensor> {
    RELU_PATTERNS.with(|cell| match cell.borrow_mut().as_mut() {
        None => Ok(x.relu()?),
        Some(p) if !p.replay => {
            p.masks.push(x.ge(0.0)?.to_dtype(x.dtype())?);
            Ok(x.relu()?)
        }
        Some(p) => {
            let m = p.masks.get(p.next).cloned().ok_or_else(|| {
                Error::Dimension("replayed more ReLU calls than were recorded".into())
            })?;
            p.next += 1;
            Ok((x * m)?)
        }
    })
}

/// Freezes every [`relu`] on this thread to the pattern seen at a base point,
/// so nearby evaluations stay on one linear piece. Dropping the guard
/// restores ordinary ReLU.
pub struct ReluFreeze(());

impl ReluFreeze {
    /// Start recording; the next forward pass defines the pattern.
    pub fn record() -> Self {
        RELU_PATTERNS.with(|cell| {
            *cell.borrow_mut() = Some(ReluPatterns {
                masks: Vec::new(),
                next: 0,
                replay: false,
            })
        });
        Self(())
    }

    /// Replay the recorded pattern from the first call again.
    pub fn rewind(&self) {
        RELU_PATTERNS.with(|cell| {
            if let Some(p) = cell.borrow_mut().as_mut() {
                p.replay = true;
                p.next = 0;
            }
        });
    }
}

impl Drop for ReluFreeze {
    fn drop(&mut self) {
        RELU_PATTERNS.with(|cell| *cell.borrow_mut() = None);
    }
}

/// 3x3 convolution, batch normalization, ReLU.
#[derive(Clone)]
pub struct Cbr {
    conv: Conv3x3,
    bn: BatchNorm,
}

impl Cbr {
    pub fn new(ps: &ParamStore, name: &str, inp: usize, out: usize) -> Result<Self> {
        let ps = ps.pp(name);
        Ok(Self {
            conv: Conv3x3::new(&ps, "conv", inp, out)?,
            bn: BatchNorm::new(&ps, "bn", out)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        relu(&self.bn.forward(&self.conv.forward(x)?, mode)?)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(ps: &ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        let ps = ps.pp(name);
        Ok(Self {
            fc1: Linear::new(&ps, "fc1", dim, hidden, true)?,
            fc2: Linear::new(&ps, "fc2", hidden, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&gelu(&self.fc1.forward(x)?)?)
    }
}

/// Multi-head self-attention over `(N, T, C)` token sets.
#[derive(Clone)]
pub struct SelfAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(ps: &ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        let ps = ps.pp(name);
        Ok(Self {
            qkv: Linear::new(&ps, "qkv", dim, 3 * dim, true)?,
            proj: Linear::new(&ps, "proj", dim, dim, true)?,
            heads,
        })
    }

    /// `bias` broadcasts against `(N, heads, T, T)` after an inserted head axis,
    /// i.e. pass `(N, 1, T)` for a key mask.
    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (n, t, c) = x.dims3()?;
        let dh = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((n, t, 3, self.heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let (q, k, v) = (qkv.get(0)?, qkv.get(1)?, qkv.get(2)?);
        let bias = bias.map(|b| b.unsqueeze(1)).transpose()?;
        let out = attention(&q, &k, &v, dh, bias.as_ref())?
            .transpose(1, 2)?
            .reshape((n, t, c))?;
        self.proj.forward(&out)
    }
}

/// Softmax over the last axis.
/// Tanh-approximated GELU built from primitive ops. The fused candle op
/// back-propagates with truncated constants, off by about 1e-5 relative.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = ((x + ((x.sqr()? * x)? * 0.044715)?)? * c)?;
    Ok(((x * 0.5)? * (inner.tanh()? + 1.0)?)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    // The shift is a constant for differentiation purposes.
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Additive attention bias from a key mask of shape `(batch, keys)`, 1 = keep.
/// Masked keys get a large negative score, so their weight underflows to exactly 0.
pub fn key_mask_bias(mask: &Tensor) -> Result<Tensor> {
    let (b, l) = mask.dims2()?;
    Ok(((mask - 1.0)? * 1e9)?.reshape((b, 1, l))?)
}

/// Scaled dot-product attention: `softmax(q k^T / sqrt(scale_dim) + bias) v`.
///
/// `q: (.., Tq, d)`, `k: (.., Tk, d)`, `v: (.., Tk, dv)`; `bias` broadcasts
/// against `(.., Tq, Tk)`.
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    scale_dim: usize,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let scores =
        (q.contiguous()?.broadcast_matmul(&k.t()?.contiguous()?)? / (scale_dim as f64).sqrt())?;
    let scores = match bias {
        Some(b) => scores.broadcast_add(b)?,
        None => scores,
    };
    let weights = softmax_last(&scores)?;
    Ok(weights.broadcast_matmul(&v.contiguous()?)?)
}

/// Attention weights only; same conventions as [`attention`].
pub fn attention_weights(
    q: &Tensor,
    k: &Tensor,
    scale_dim: usize,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let scores =
        (q.contiguous()?.broadcast_matmul(&k.t()?.contiguous()?)? / (scale_dim as f64).sqrt())?;
    let scores = match bias {
        Some(b) => scores.broadcast_add(b)?,
        None => scores,
    };
    softmax_last(&scores)
}

fn interp_matrix(in_len: usize, out_len: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let mut m = vec![0f64; out_len * in_len];
    for (o, (i0, i1, w1)) in bilinear_taps(in_len, out_len).into_iter().enumerate() {
        m[o * in_len + i0] += 1.0 - w1;
        m[o * in_len + i1] += w1;
    }
    Ok(Tensor::from_vec(m, (out_len, in_len), dev)?.to_dtype(dtype)?)
}

/// Half-pixel bilinear resize of `(N, H, W, C)` to `(N, out_h, out_w, C)`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, h, w, c) = x.dims4()?;
    let mut y = x.clone();
    if out_h != h {
        let rh = interp_matrix(h, out_h, x.dtype(), x.device())?;
        y = rh
            .broadcast_matmul(&y.reshape((n, h, w * c))?)?
            .reshape((n, out_h, w, c))?;
    }
    if out_w != w {
        let rw = interp_matrix(w, out_w, x.dtype(), x.device())?;
        y = rw
            .broadcast_matmul(&y.reshape((n * out_h, w, c))?)?
            .reshape((n, out_h, out_w, c))?;
    }
    Ok(y)
}

/// `(B, n*h, n*w, C)` -> `(B*n*n, h, w, C)`, tiles row-major within each batch item.
pub fn split_grid(x: &Tensor, n: usize) -> Result<Tensor> {
    let (b, hh, ww, c) = x.dims4()?;
    if n == 0 || hh % n != 0 || ww % n != 0 {
        return Err(Error::Dimension(format!(
            "{hh}x{ww} does not split into a {n}x{n} grid"
        )));
    }
    let (h, w) = (hh / n, ww / n);
    Ok(x.reshape((b, n, h, n, w, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b * n * n, h, w, c))?)
}

/// Inverse of [`split_grid`].
pub fn assemble_grid(x: &Tensor, n: usize) -> Result<Tensor> {
    let (bn, h, w, c) = x.dims4()?;
    if n == 0 || bn % (n * n) != 0 {
        return Err(Error::Dimension(format!(
            "batch {bn} is not a multiple of {n}x{n} tiles"
        )));
    }
    let b = bn / (n * n);
    Ok(x.reshape((b, n, n, h, w, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, n * h, n * w, c))?)
}

/// Strided sub-grids: `(B, n*h, n*w, C)` -> `(B*n*n, h, w, C)` where sub-grid
/// `(n1, n2)` holds entries `[n1::n, n2::n]`.
pub fn patchify(x: &Tensor, n: usize) -> Result<Tensor> {
    let (b, hh, ww, c) = x.dims4()?;
    if n == 0 || hh % n != 0 || ww % n != 0 {
        return Err(Error::Dimension(format!(
            "{hh}x{ww} is not divisible by {n}"
        )));
    }
    let (h, w) = (hh / n, ww / n);
    Ok(x.reshape((b, h, n, w, n, c))?
        .permute((0, 2, 4, 1, 3, 5))?
        .contiguous()?
        .reshape((b * n * n, h, w, c))?)
}

/// Inverse of [`patchify`].
pub fn regroup(x: &Tensor, n: usize) -> Result<Tensor> {
    let (bn, h, w, c) = x.dims4()?;
    if n == 0 || bn % (n * n) != 0 {
        return Err(Error::Dimension(format!(
            "batch {bn} is not a multiple of {n}x{n} sub-grids"
        )));
    }
    let b = bn / (n * n);
    Ok(x.reshape((b, n, n, h, w, c))?
        .permute((0, 3, 1, 4, 2, 5))?
        .contiguous()?
        .reshape((b, h * n, w * n, c))?)
}

/// Swap the two spatial axes of `(N, H, W, C)`.
pub fn transpose_hw(x: &Tensor) -> Result<Tensor> {
    Ok(x.transpose(1, 2)?.contiguous()?)
}

/// Select `count` consecutive items per group along the batch axis, where
/// the batch is laid out as groups of `group` items.
pub fn take_views(x: &Tensor, group: usize, start: usize, count: usize) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let b = dims[0] / group;
    let mut grouped = vec![b, group];
    grouped.extend_from_slice(&dims[1..]);
    let mut out = vec![b * count];
    out.extend_from_slice(&dims[1..]);
    Ok(x.reshape(grouped)?
        .narrow(1, start, count)?
        .contiguous()?
        .reshape(out)?)
}

/// Interleave remote items `(B, ..)` and close items `(B*k, ..)` into groups
/// `[remote, close_0, .., close_{k-1}]` along the batch axis.
pub fn join_views(remote: &Tensor, close: &Tensor) -> Result<Tensor> {
    let dims = remote.dims().to_vec();
    let b = dims[0];
    let k = close.dim(0)? / b;
    let mut r = vec![b, 1];
    r.extend_from_slice(&dims[1..]);
    let mut c = vec![b, k];
    c.extend_from_slice(&dims[1..]);
    let joined = Tensor::cat(&[remote.reshape(r)?, close.reshape(c)?], 1)?;
    let mut out = vec![b * (1 + k)];
    out.extend_from_slice(&dims[1..]);
    Ok(joined.reshape(out)?)
}

/// Repeat every batch item `k` times consecutively.
pub fn repeat_items(x: &Tensor, k: usize) -> Result<Tensor> {
    if k == 1 {
        return Ok(x.clone());
    }
    let dims = x.dims().to_vec();
    let mut expanded = vec![dims[0], k];
    expanded.extend_from_slice(&dims[1..]);
    let mut u = vec![dims[0], 1];
    u.extend_from_slice(&dims[1..]);
    let mut out = vec![dims[0] * k];
    out.extend_from_slice(&dims[1..]);
    Ok(x.reshape(u)?
        .broadcast_as(expanded)?
        .contiguous()?
        .reshape(out)?)
}

/// Host copy of a tensor as `f64`.
pub fn to_f64_vec(x: &Tensor) -> Result<Vec<f64>> {
    Ok(x.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn from_f64(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        from_f64((0..n).map(|v| v as f64).collect(), shape, DType::F64).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "nn-test");
        let n: usize = shape.iter().product();
        from_f64(
            (0..n).map(|_| r.gen_range(-1.0..1.0)).collect(),
            shape,
            DType::F64,
        )
        .unwrap()
    }

    #[test]
    fn grid_round_trip_is_exact() {
        let x = random(&[2, 8, 8, 3], 1);
        let tiles = split_grid(&x, 2).unwrap();
        assert_eq!(tiles.dims(), &[8, 4, 4, 3]);
        let back = assemble_grid(&tiles, 2).unwrap();
        assert_eq!(to_f64_vec(&back).unwrap(), to_f64_vec(&x).unwrap());
    }

    #[test]
    fn tensor_grid_matches_raster_grid() {
        let x = ramp(&[1, 4, 4, 1]);
        let tiles = split_grid(&x, 2).unwrap();
        let first = to_f64_vec(&tiles.get(0).unwrap()).unwrap();
        let second = to_f64_vec(&tiles.get(1).unwrap()).unwrap();
        assert_eq!(first, vec![0.0, 1.0, 4.0, 5.0]);
        assert_eq!(second, vec![2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn patchify_takes_strided_entries() {
        let x = ramp(&[1, 4, 4, 1]);
        let p = patchify(&x, 2).unwrap();
        assert_eq!(p.dims(), &[4, 2, 2, 1]);
        // Sub-grid (0,0): even rows, even columns.
        assert_eq!(
            to_f64_vec(&p.get(0).unwrap()).unwrap(),
            vec![0.0, 2.0, 8.0, 10.0]
        );
        // Sub-grid (0,1): even rows, odd columns.
        assert_eq!(
            to_f64_vec(&p.get(1).unwrap()).unwrap(),
            vec![1.0, 3.0, 9.0, 11.0]
        );
        // Sub-grid (1,0): odd rows, even columns.
        assert_eq!(
            to_f64_vec(&p.get(2).unwrap()).unwrap(),
            vec![4.0, 6.0, 12.0, 14.0]
        );
        let back = regroup(&p, 2).unwrap();
        assert_eq!(to_f64_vec(&back).unwrap(), to_f64_vec(&x).unwrap());
    }

    #[test]
    fn patchify_of_one_is_identity() {
        let x = random(&[2, 3, 3, 2], 2);
        assert_eq!(
            to_f64_vec(&patchify(&x, 1).unwrap()).unwrap(),
            to_f64_vec(&x).unwrap()
        );
    }

    #[test]
    fn tensor_resize_matches_raster_resize() {
        let x = random(&[1, 5, 7, 3], 3);
        let y = resize_bilinear(&x, 9, 4).unwrap();
        let vals: Vec<f32> = to_f64_vec(&x).unwrap().iter().map(|&v| v as f32).collect();
        let raster = crate::data::Raster::from_vec(5, 7, 3, vals).unwrap();
        let expected = crate::data::resize_bilinear(&raster, 9, 4);
        for (a, b) in to_f64_vec(&y).unwrap().iter().zip(&expected.data) {
            assert!((a - *b as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_keys_get_exactly_zero_weight() {
        let q = random(&[1, 3, 4], 4);
        let k = random(&[1, 5, 4], 5);
        let mask = from_f64(vec![1.0, 1.0, 0.0, 1.0, 0.0], &[1, 5], DType::F64).unwrap();
        let w = attention_weights(&q, &k, 4, Some(&key_mask_bias(&mask).unwrap())).unwrap();
        let w = w.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        for row in &w {
            assert_eq!(row[2], 0.0);
            assert_eq!(row[4], 0.0);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn join_and_take_views_are_inverse() {
        let remote = random(&[2, 2, 2, 1], 6);
        let close = random(&[8, 2, 2, 1], 7);
        let joined = join_views(&remote, &close).unwrap();
        assert_eq!(joined.dims(), &[10, 2, 2, 1]);
        let r = take_views(&joined, 5, 0, 1).unwrap();
        let c = take_views(&joined, 5, 1, 4).unwrap();
        assert_eq!(to_f64_vec(&r).unwrap(), to_f64_vec(&remote).unwrap());
        assert_eq!(to_f64_vec(&c).unwrap(), to_f64_vec(&close).unwrap());
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let ps = ParamStore::new(DType::F64, 0);
        let bn = BatchNorm::new(&ps, "bn", 2).unwrap();
        let x = random(&[4, 3, 3, 2], 8);
        let y_eval = bn.forward(&x, Mode::Eval).unwrap();
        // Fresh running stats are mean 0, var 1: eval is ~identity.
        for (a, b) in to_f64_vec(&y_eval)
            .unwrap()
            .iter()
            .zip(to_f64_vec(&x).unwrap())
        {
            assert!((a - b / (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);
        }
        let y = bn.forward(&x, Mode::Train).unwrap();
        let v = to_f64_vec(&y).unwrap();
        let mean0: f64 = v.iter().step_by(2).sum::<f64>() / 36.0;
        assert!(mean0.abs() < 1e-12);
        let rm = to_f64_vec(ps.get("bn.running_mean").unwrap().as_tensor()).unwrap();
        assert!(rm.iter().any(|&m| m != 0.0));
    }
}
