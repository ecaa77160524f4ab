//! Parameter storage and the transformer building blocks shared by the codec,
//! the supervision heads and the language model.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Tensor, Var, D};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::CounterRng;

/// Large negative additive mask value; `exp` of it underflows to exactly 0.
pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Uniform in `[-a, a]`.
    Uniform(f64),
    Normal(f64),
}

/// Named trainable parameters. Initial values are a pure function of the
/// store seed and the parameter name, so creation order never matters.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<BTreeMap<String, Var>>>,
    dtype: DType,
    device: Device,
    seed: u64,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.map().len())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(BTreeMap::new())),
            dtype,
            device: Device::Cpu,
            seed,
        }
    }

    fn map(&self) -> MutexGuard<'_, BTreeMap<String, Var>> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    fn get_or_init(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.map().get(name) {
            if v.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter {name}: stored {:?}, requested {:?}",
                    v.dims(),
                    shape
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let mut rng = CounterRng::new(self.seed, name);
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Uniform(a) => (0..n).map(|_| (2.0 * rng.unit() - 1.0) * a).collect(),
            Init::Normal(s) => (0..n).map(|_| rng.normal() * s).collect(),
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.map().insert(name.to_string(), var);
        Ok(out)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.map().values().cloned().collect()
    }

    /// Variables whose name starts with `prefix`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.map()
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.map()
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.map().values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites stored values with `tensors`; names must already exist.
    pub fn load_tensors(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let map = self.map();
        for (name, var) in map.iter() {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "parameter {name}: checkpoint {:?}, model {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        if let Some(extra) = tensors.keys().find(|k| !map.contains_key(*k)) {
            return Err(Error::Data(format!("checkpoint has unknown parameter {extra}")));
        }
        Ok(())
    }

    /// SHA-256 over parameter names, shapes and f32 little-endian values.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.map().iter() {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let vals = var
                .as_tensor()
                .flatten_all()?
                .to_dtype(DType::F32)?
                .to_vec1::<f32>()?;
            for v in vals {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// A name prefix into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Scope {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.get_or_init(&full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

/// Applies `f` to the last dimension of `x` after flattening leading dims.
fn map_2d(x: &Tensor, f: impl FnOnce(&Tensor) -> candle_core::Result<Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let last = *dims.last().ok_or_else(|| Error::Shape("scalar input".into()))?;
    let rows: usize = dims[..dims.len() - 1].iter().product();
    let y = f(&x.reshape((rows, last))?)?;
    let mut out_dims = dims[..dims.len() - 1].to_vec();
    out_dims.push(y.dim(1)?);
    Ok(y.reshape(out_dims)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: Tensor,
    b: Option<Tensor>,
}

impl Linear {
    pub fn new(s: &Scope, input: usize, output: usize) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        Ok(Self {
            w: s.get("weight", &[input, output], Init::Uniform(bound))?,
            b: Some(s.get("bias", &[output], Init::Zeros)?),
        })
    }

    pub fn no_bias(s: &Scope, input: usize, output: usize) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        Ok(Self {
            w: s.get("weight", &[input, output], Init::Uniform(bound))?,
            b: None,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.w
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.b.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match &self.b {
            // Folding the bias into the matmul as an extra input column keeps
            // its gradient a gemm instead of a slow strided reduction.
            Some(b) => map_2d(x, |x2| {
                let ones = Tensor::ones((x2.dim(0)?, 1), x2.dtype(), x2.device())?;
                let xa = Tensor::cat(&[x2, &ones], 1)?;
                let wa = Tensor::cat(&[&self.w, &b.unsqueeze(0)?], 0)?;
                xa.matmul(&wa)
            }),
            None => map_2d(x, |x2| x2.matmul(&self.w)),
        }
    }
}

/// Layer normalization. The affine-free variant is used wherever a linear
/// layer follows, which can absorb the scale and shift exactly.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    affine: Option<(Tensor, Tensor)>,
}

impl LayerNorm {
    pub fn new(s: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            affine: Some((s.get("gamma", &[dim], Init::Ones)?, s.get("beta", &[dim], Init::Zeros)?)),
        })
    }

    pub fn plain() -> Self {
        Self { affine: None }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let xn = crate::ops::normalize_last_dim(x)?;
        match &self.affine {
            Some((g, b)) => Ok(xn.broadcast_mul(g)?.broadcast_add(b)?),
            None => Ok(xn),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    table: Tensor,
}

impl Embedding {
    pub fn new(s: &Scope, count: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: s.get("table", &[count, dim], Init::Normal(0.02_f64.max(1.0 / (dim as f64).sqrt())))?,
        })
    }

    pub fn count(&self) -> usize {
        self.table.dim(0).unwrap_or(0)
    }

    /// Looks up `ids` of shape `[..]`, returning `[.., dim]`.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let mut dims = ids.dims().to_vec();
        let flat = ids.flatten_all()?;
        let out = self.table.index_select(&flat, 0)?;
        dims.push(self.table.dim(1)?);
        Ok(out.reshape(dims)?)
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(s: &Scope, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(&s.pp("up"), dim, hidden)?,
            down: Linear::new(&s.pp("down"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.relu()?)
    }
}

/// Keys and values cached for incremental decoding, shape `[B, H, T, dh]`.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    k: Option<Tensor>,
    v: Option<Tensor>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.k.as_ref().map(|k| k.dim(2).unwrap_or(0)).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(s: &Scope, dim: usize, heads: usize) -> Result<Self> {
        Self::with_kv_dim(s, dim, dim, heads)
    }

    /// Attention whose keys/values come from a memory of width `kv_dim`.
    pub fn with_kv_dim(s: &Scope, dim: usize, kv_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(&s.pp("q"), dim, dim)?,
            k: Linear::new(&s.pp("k"), kv_dim, dim)?,
            v: Linear::new(&s.pp("v"), kv_dim, dim)?,
            o: Linear::new(&s.pp("o"), dim, dim)?,
            heads,
            head_dim: dim / heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        Ok(x
            .reshape((b, t, self.heads, self.head_dim))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    fn attend(&self, q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let kt = k.transpose(2, 3)?.contiguous()?;
        let mut scores = (q.matmul(&kt)? * scale)?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let weights = crate::ops::softmax_last_dim(&scores)?;
        let out = weights.matmul(v)?;
        let (b, _, t, _) = out.dims4()?;
        Ok(out.transpose(1, 2)?.reshape((b, t, self.heads * self.head_dim))?)
    }

    /// `x`: `[B, Tq, D]`; `memory`: `[B, Tk, Dkv]`; `mask` broadcastable to
    /// `[B, H, Tq, Tk]` and additive.
    pub fn forward(&self, x: &Tensor, memory: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let q = self.split_heads(&self.q.forward(x)?)?;
        let k = self.split_heads(&self.k.forward(memory)?)?;
        let v = self.split_heads(&self.v.forward(memory)?)?;
        self.o.forward(&self.attend(&q, &k, &v, mask)?)
    }

    /// Self-attention over new positions `x`, appending their keys/values to
    /// `cache`. Queries see every cached position plus new ones causally.
    pub fn forward_cached(&self, x: &Tensor, cache: &mut KvCache) -> Result<Tensor> {
        let q = self.split_heads(&self.q.forward(x)?)?;
        let k_new = self.split_heads(&self.k.forward(x)?)?;
        let v_new = self.split_heads(&self.v.forward(x)?)?;
        let past = cache.len();
        let k = match &cache.k {
            Some(k) => Tensor::cat(&[k, &k_new], 2)?,
            None => k_new,
        };
        let v = match &cache.v {
            Some(v) => Tensor::cat(&[v, &v_new], 2)?,
            None => v_new,
        };
        let tq = x.dim(1)?;
        let mask = if tq > 1 {
            Some(causal_mask_offset(tq, past, x.dtype(), x.device())?)
        } else {
            None
        };
        let out = self.attend(&q, &k, &v, mask.as_ref())?;
        cache.k = Some(k);
        cache.v = Some(v);
        self.o.forward(&out)
    }
}

/// Additive causal mask `[T, T]`: 0 on and below the diagonal.
pub fn causal_mask(t: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    causal_mask_offset(t, 0, dtype, device)
}

/// Causal mask for `tq` new queries that follow `past` cached keys.
pub fn causal_mask_offset(tq: usize, past: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let tk = past + tq;
    let data: Vec<f64> = (0..tq)
        .flat_map(|i| (0..tk).map(move |j| if j <= past + i { 0.0 } else { MASK_NEG }))
        .collect();
    Ok(Tensor::from_vec(data, (tq, tk), device)?.to_dtype(dtype)?)
}

/// Additive key-padding mask `[B, 1, 1, T]` from per-row valid lengths.
pub fn key_padding_mask(lengths: &[usize], t: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f64> = lengths
        .iter()
        .flat_map(|&n| (0..t).map(move |j| if j < n { 0.0 } else { MASK_NEG }))
        .collect();
    Ok(Tensor::from_vec(data, (lengths.len(), 1, 1, t), device)?.to_dtype(dtype)?)
}

/// Pre-norm transformer block with optional cross-attention.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    cross: Option<(LayerNorm, MultiHeadAttention)>,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

impl TransformerBlock {
    pub fn new(s: &Scope, dim: usize, heads: usize, cross_kv_dim: Option<usize>) -> Result<Self> {
        let cross = match cross_kv_dim {
            Some(kv) => Some((
                LayerNorm::plain(),
                MultiHeadAttention::with_kv_dim(&s.pp("cross"), dim, kv, heads)?,
            )),
            None => None,
        };
        Ok(Self {
            ln_self: LayerNorm::plain(),
            self_attn: MultiHeadAttention::new(&s.pp("self_attn"), dim, heads)?,
            cross,
            ln_ff: LayerNorm::plain(),
            ff: FeedForward::new(&s.pp("ff"), dim, 4 * dim)?,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        mask: Option<&Tensor>,
        memory: Option<(&Tensor, Option<&Tensor>)>,
    ) -> Result<Tensor> {
        let h = self.ln_self.forward(x)?;
        let mut x = (x + self.self_attn.forward(&h, &h, mask)?)?;
        if let (Some((ln, attn)), Some((mem, mem_mask))) = (&self.cross, memory) {
            let h = ln.forward(&x)?;
            x = (x + attn.forward(&h, mem, mem_mask)?)?;
        }
        let h = self.ln_ff.forward(&x)?;
        Ok((&x + self.ff.forward(&h)?)?)
    }

    pub fn forward_cached(&self, x: &Tensor, cache: &mut KvCache) -> Result<Tensor> {
        let h = self.ln_self.forward(x)?;
        let x = (x + self.self_attn.forward_cached(&h, cache)?)?;
        let h = self.ln_ff.forward(&x)?;
        Ok((&x + self.ff.forward(&h)?)?)
    }
}

/// Depthwise 1-D convolution over time with "same" zero padding.
#[derive(Debug, Clone)]
pub struct DepthwiseConv {
    kernel: Tensor,
    bias: Tensor,
    width: usize,
}

impl DepthwiseConv {
    pub fn new(s: &Scope, dim: usize, width: usize) -> Result<Self> {
        if width % 2 == 0 {
            return Err(Error::Config("depthwise kernel width must be odd".into()));
        }
        Ok(Self {
            kernel: s.get("kernel", &[width, dim], Init::Uniform(1.0 / (width as f64).sqrt()))?,
            bias: s.get("bias", &[dim], Init::Zeros)?,
            width,
        })
    }

    /// `x`: `[B, T, D]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let t = x.dim(1)?;
        let pad = self.width / 2;
        let padded = x.pad_with_zeros(1, pad, pad)?;
        let mut acc: Option<Tensor> = None;
        for k in 0..self.width {
            let tap = padded.narrow(1, k, t)?.broadcast_mul(&self.kernel.get(k)?)?;
            acc = Some(match acc {
                Some(a) => (a + tap)?,
                None => tap,
            });
        }
        Ok(acc.expect("width >= 1").broadcast_add(&self.bias)?)
    }
}

/// Conformer block: half-step FFN, self-attention, convolution module,
/// half-step FFN, final norm. Non-causal.
#[derive(Debug, Clone)]
pub struct ConformerBlock {
    ln_ff1: LayerNorm,
    ff1: FeedForward,
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_conv: LayerNorm,
    pointwise_in: Linear,
    depthwise: DepthwiseConv,
    ln_depth: LayerNorm,
    pointwise_out: Linear,
    ln_ff2: LayerNorm,
    ff2: FeedForward,
    ln_out: LayerNorm,
}

impl ConformerBlock {
    pub fn new(s: &Scope, dim: usize, heads: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            ln_ff1: LayerNorm::plain(),
            ff1: FeedForward::new(&s.pp("ff1"), dim, 4 * dim)?,
            ln_attn: LayerNorm::plain(),
            attn: MultiHeadAttention::new(&s.pp("attn"), dim, heads)?,
            ln_conv: LayerNorm::plain(),
            pointwise_in: Linear::new(&s.pp("pw_in"), dim, 2 * dim)?,
            depthwise: DepthwiseConv::new(&s.pp("dw"), dim, kernel)?,
            ln_depth: LayerNorm::new(&s.pp("ln_dw"), dim)?,
            pointwise_out: Linear::new(&s.pp("pw_out"), dim, dim)?,
            ln_ff2: LayerNorm::plain(),
            ff2: FeedForward::new(&s.pp("ff2"), dim, 4 * dim)?,
            ln_out: LayerNorm::new(&s.pp("ln_out"), dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + (self.ff1.forward(&self.ln_ff1.forward(x)?)? * 0.5)?)?;
        let h = self.ln_attn.forward(&x)?;
        let x = (&x + self.attn.forward(&h, &h, None)?)?;
        let h = self.pointwise_in.forward(&self.ln_conv.forward(&x)?)?;
        let dim = h.dim(D::Minus1)? / 2;
        let glu = (h.narrow(D::Minus1, 0, dim)? * candle_nn::ops::sigmoid(&h.narrow(D::Minus1, dim, dim)?)?)?;
        let h = self.ln_depth.forward(&self.depthwise.forward(&glu)?)?.silu()?;
        let x = (&x + self.pointwise_out.forward(&h)?)?;
        let x = (&x + (self.ff2.forward(&self.ln_ff2.forward(&x)?)? * 0.5)?)?;
        self.ln_out.forward(&x)
    }
}

/// Learned absolute positions `[max_len, dim]`.
#[derive(Debug, Clone)]
pub struct Positions {
    table: Tensor,
}

impl Positions {
    pub fn new(s: &Scope, max_len: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: s.get("table", &[max_len, dim], Init::Normal(0.02))?,
        })
    }

    pub fn max_len(&self) -> usize {
        self.table.dim(0).unwrap_or(0)
    }

    /// Positions `[start, start + len)` as `[1, len, dim]`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Tensor> {
        if start + len > self.max_len() {
            return Err(Error::ContextOverflow {
                len: start + len,
                max: self.max_len(),
            });
        }
        Ok(self.table.narrow(0, start, len)?.unsqueeze(0)?)
    }
}

/// Mean token cross-entropy. `logits`: `[N, V]`; `targets`: `N` ids;
/// `weights`: optional per-row weights (0 drops a row). Returns a scalar.
pub fn cross_entropy(logits: &Tensor, targets: &[u32], weights: Option<&[f64]>) -> Result<Tensor> {
    let (n, v) = logits.dims2()?;
    if targets.len() != n {
        return Err(Error::Shape(format!("{} targets for {n} rows", targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(Error::Vocabulary { token: t, vocab: v });
    }
    let nll = crate::ops::row_nll(logits, targets)?;
    match weights {
        None => Ok((nll.sum_all()? / n as f64)?),
        Some(w) => {
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return Err(Error::InvalidTarget("all rows carry zero weight".into()));
            }
            let wt = Tensor::from_vec(w.to_vec(), n, logits.device())?.to_dtype(logits.dtype())?;
            Ok(((nll * wt)?.sum_all()? / total)?)
        }
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Row-wise argmax of a `[N, V]` tensor.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<u32>> {
    Ok(logits.argmax(D::Minus1)?.to_vec1::<u32>()?)
}

/// Largest relative error between autodiff gradients and central finite
/// differences over `samples` randomly chosen parameter entries. Meant for
/// f64 stores; `loss` must be smooth around the current point.
pub fn gradient_check(
    params: &[Var],
    loss: impl Fn() -> Result<Tensor>,
    samples: usize,
    eps: f64,
    seed: u64,
) -> Result<f64> {
    if params.is_empty() {
        return Err(Error::InvalidInput("no parameters to check".into()));
    }
    let grads = loss()?.backward()?;
    let mut rng = CounterRng::new(seed, "gradient-check");
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let var = &params[rng.below(params.len() as u64) as usize];
        let n = var.elem_count();
        let k = rng.below(n as u64) as usize;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[k],
            None => 0.0,
        };
        let orig = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let eval_at = |delta: f64| -> Result<f64> {
            let mut v = orig.clone();
            v[k] += delta;
            let t = Tensor::from_vec(v, var.dims(), var.device())?.to_dtype(var.dtype())?;
            var.set(&t)?;
            scalar(&loss()?)
        };
        let plus = eval_at(eps)?;
        let minus = eval_at(-eps)?;
        var.set(&Tensor::from_vec(orig, var.dims(), var.device())?.to_dtype(var.dtype())?)?;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_are_order_independent() {
        let a = ParamStore::new(DType::F64, 3);
        let b = ParamStore::new(DType::F64, 3);
        let x1 = a.root().get("x", &[3], Init::Normal(1.0)).unwrap();
        let _ = a.root().get("y", &[3], Init::Normal(1.0)).unwrap();
        let _ = b.root().get("y", &[3], Init::Normal(1.0)).unwrap();
        let x2 = b.root().get("x", &[3], Init::Normal(1.0)).unwrap();
        assert_eq!(x1.to_vec1::<f64>().unwrap(), x2.to_vec1::<f64>().unwrap());
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
    }

    #[test]
    fn cross_entropy_uniform_is_log_v() {
        let logits = Tensor::zeros((3, 512), DType::F64, &Device::Cpu).unwrap();
        let ce = scalar(&cross_entropy(&logits, &[0, 5, 511], None).unwrap()).unwrap();
        assert!((ce - (512f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn causal_mask_shape() {
        let m = causal_mask_offset(2, 3, DType::F64, &Device::Cpu).unwrap();
        let rows = m.to_vec2::<f64>().unwrap();
        assert_eq!(rows[0], vec![0.0, 0.0, 0.0, 0.0, MASK_NEG]);
        assert_eq!(rows[1], vec![0.0; 5]);
    }

    #[test]
    fn cached_attention_matches_full_pass() {
        let store = ParamStore::new(DType::F64, 1);
        let block = TransformerBlock::new(&store.root(), 8, 2, None).unwrap();
        let x = Tensor::from_vec(
            (0..40).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect::<Vec<_>>(),
            (1, 5, 8),
            &Device::Cpu,
        )
        .unwrap();
        let mask = causal_mask(5, DType::F64, &Device::Cpu).unwrap();
        let full = block.forward(&x, Some(&mask), None).unwrap();
        let mut cache = KvCache::default();
        let first = block.forward_cached(&x.narrow(1, 0, 3).unwrap(), &mut cache).unwrap();
        let rest: Vec<Tensor> = (3..5)
            .map(|i| block.forward_cached(&x.narrow(1, i, 1).unwrap(), &mut cache).unwrap())
            .collect();
        let inc = Tensor::cat(&[&first, &rest[0], &rest[1]], 1).unwrap();
        let diff = (full - inc).unwrap().abs().unwrap().max_all().unwrap();
        assert!(scalar(&diff).unwrap() < 1e-12);
    }
}
