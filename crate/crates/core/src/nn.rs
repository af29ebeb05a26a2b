//! Parameter storage and the layers shared by both branches.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{Grads, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)) over the last two axes.
    Xavier,
    Normal(f64),
}

/// Named parameter tensors, keyed by canonical module path.
///
/// Each tensor is initialised from its own RNG stream derived from
/// `(seed, name)`, so values do not depend on which other parameters exist.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    seed: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { seed, ..Default::default() }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()));
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Xavier => {
                let r = shape.len();
                let (fi, fo) = match r {
                    0 => (1, 1),
                    1 => (shape[0], shape[0]),
                    _ => (shape[..r - 1].iter().product(), shape[r - 1]),
                };
                let a = (6.0 / (fi + fo) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-a..a)).collect()
            }
            Init::Normal(std) => (0..n)
                .map(|_| {
                    // Box-Muller
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen();
                    std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                })
                .collect(),
        };
        let id = self.tensors.len();
        self.tensors.push(Tensor::new(shape, data).expect("param shape"));
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Mutable views of every tensor's data, in id order.
    pub fn data_mut(&mut self) -> Vec<&mut [f64]> {
        self.tensors.iter_mut().map(Tensor::data_mut).collect()
    }

    /// Replaces a tensor's values, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let id = self.find(name).ok_or_else(|| Error::Validation(format!("unknown parameter {name}")))?;
        if t.shape() != self.tensors[id.0].shape() {
            return shape_err(
                "ParamStore::set",
                format!("{name}: {:?} vs {:?}", t.shape(), self.tensors[id.0].shape()),
            );
        }
        self.tensors[id.0] = t;
        Ok(())
    }

    /// Zeroes every parameter whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            if name.starts_with(prefix) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// A forward pass in progress: one tape plus lazily bound parameter leaves.
pub struct Ctx<'a> {
    tape: Tape,
    store: &'a ParamStore,
    bound: RefCell<Vec<Option<Var>>>,
    differentiable: bool,
}

impl<'a> Ctx<'a> {
    /// Parameters become differentiable leaves.
    pub fn new(store: &'a ParamStore) -> Self {
        Self { tape: Tape::new(), store, bound: RefCell::new(vec![None; store.len()]), differentiable: true }
    }

    /// Parameters become constants; no gradient bookkeeping.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self { differentiable: false, ..Self::new(store) }
    }

    /// Uses caller-supplied leaves for every parameter (all on one tape),
    /// e.g. the inputs handed out by [`crate::grad_check`].
    pub fn with_bindings(store: &'a ParamStore, vars: &[Var]) -> Result<Self> {
        if vars.len() != store.len() {
            return invalid(format!("{} bindings for {} parameters", vars.len(), store.len()));
        }
        let tape = vars.first().map(|v| v.tape().clone()).unwrap_or_default();
        Ok(Self { tape, store, bound: RefCell::new(vars.iter().cloned().map(Some).collect()), differentiable: true })
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn p(&self, id: ParamId) -> Var {
        let mut bound = self.bound.borrow_mut();
        if let Some(v) = &bound[id.0] {
            return v.clone();
        }
        let t = self.store.get(id).clone();
        let v = if self.differentiable { self.tape.param(t) } else { self.tape.constant(t) };
        bound[id.0] = Some(v.clone());
        v
    }

    pub fn constant(&self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Per-parameter gradients; parameters that did not take part get `None`.
    pub fn param_grads(&self, grads: &Grads) -> Vec<Option<Vec<f64>>> {
        self.bound.borrow().iter().map(|b| b.as_ref().and_then(|v| grads.get(v)).map(<[f64]>::to_vec)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            w: store.add(&format!("{name}.weight"), &[d_in, d_out], Init::Xavier),
            b: store.add(&format!("{name}.bias"), &[d_out], Init::Zeros),
        }
    }

    /// Applies `x · W + b` over the last axis of `x`.
    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let shape = x.shape();
        if shape.len() == 1 {
            let n = ctx.store.get(self.b).numel();
            return x.reshape(&[1, shape[0]])?.matmul(&ctx.p(self.w))?.add(&ctx.p(self.b))?.reshape(&[n]);
        }
        x.matmul(&ctx.p(self.w))?.add(&ctx.p(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, eps: f64) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), &[d], Init::Ones),
            beta: store.add(&format!("{name}.beta"), &[d], Init::Zeros),
            eps,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        x.layer_norm(&ctx.p(self.gamma), &ctx.p(self.beta), self.eps)
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize]) -> Self {
        let layers =
            dims.windows(2).enumerate().map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1])).collect();
        Self { layers }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(ctx, &h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

/// Pre-norm residual feed-forward block: `x + W2·relu(W1·LN(x))`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, ratio: usize, eps: f64) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d, eps),
            up: Linear::new(store, &format!("{name}.up"), d, d * ratio),
            down: Linear::new(store, &format!("{name}.down"), d * ratio, d),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let h = self.norm.forward(ctx, x)?;
        let h = self.up.forward(ctx, &h)?.relu()?;
        x.add(&self.down.forward(ctx, &h)?)
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

/// Output of one attention call; `weights` is `[B, heads, Sq, Sk]`.
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d),
            k: Linear::new(store, &format!("{name}.k"), d, d),
            v: Linear::new(store, &format!("{name}.v"), d, d),
            out: Linear::new(store, &format!("{name}.out"), d, d),
            heads,
        }
    }

    /// `query` is `[B, Sq, d]`; `key`/`value` are `[B, Sk, d]`.
    /// `key_bias`, when given, is added to the logits and must broadcast to
    /// `[B, heads, Sq, Sk]` (use large negative entries to mask keys).
    pub fn forward(
        &self,
        ctx: &Ctx,
        query: &Var,
        key: &Var,
        value: &Var,
        key_bias: Option<&Var>,
    ) -> Result<AttentionOutput> {
        let qs = query.shape();
        let ks = key.shape();
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || value.shape() != ks {
            return shape_err("attention", format!("query {:?}, key {:?}, value {:?}", qs, ks, value.shape()));
        }
        let (b, sq, d) = (qs[0], qs[1], qs[2]);
        let sk = ks[1];
        let h = self.heads;
        let dk = d / h;
        let split = |x: Var, s: usize| -> Result<Var> { x.reshape(&[b, s, h, dk])?.permute(&[0, 2, 1, 3]) };
        let q = split(self.q.forward(ctx, query)?, sq)?;
        let k = split(self.k.forward(ctx, key)?, sk)?;
        let v = split(self.v.forward(ctx, value)?, sk)?;
        let mut logits = q.matmul_t(&k)?.scale(1.0 / (dk as f64).sqrt())?;
        if let Some(bias) = key_bias {
            logits = logits.add(bias)?;
        }
        let weights = logits.softmax()?;
        let ctxv = weights.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, sq, d])?;
        Ok(AttentionOutput { output: self.out.forward(ctx, &ctxv)?, weights })
    }
}

/// Additive logit bias excluding masked keys: `[1, 1, 1, Sk]`, 0 for kept, -1e9 for masked.
pub fn key_mask_bias(ctx: &Ctx, mask: &[bool]) -> Result<Var> {
    if !mask.iter().any(|&m| m) {
        return invalid("attention mask excludes every key");
    }
    let data = mask.iter().map(|&m| if m { 0.0 } else { -1e9 }).collect();
    Ok(ctx.constant(Tensor::new(&[1, 1, 1, mask.len()], data)?))
}

/// Fixed sinusoidal encoding of scalar positions: `[positions.len(), d]`,
/// even channels sine, odd channels cosine.
pub fn sine_encoding(positions: &[f64], d: usize) -> Tensor {
    let mut data = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        for c in 0..d {
            let i = (c / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * i / d as f64);
            data.push(if c % 2 == 0 { (p * freq).sin() } else { (p * freq).cos() });
        }
    }
    Tensor::new(&[positions.len(), d], data).expect("sine encoding shape")
}

/// 2-D sine encoding of an `h×w` grid, `[h·w, d]`: first half of the channels
/// encodes the row, second half the column.
pub fn sine_encoding_2d(h: usize, w: usize, d: usize) -> Tensor {
    let half = d / 2;
    let rows = sine_encoding(&(0..h).map(|r| r as f64).collect::<Vec<_>>(), half);
    let cols = sine_encoding(&(0..w).map(|c| c as f64).collect::<Vec<_>>(), d - half);
    let mut data = Vec::with_capacity(h * w * d);
    for r in 0..h {
        for c in 0..w {
            data.extend_from_slice(&rows.data()[r * half..(r + 1) * half]);
            data.extend_from_slice(&cols.data()[c * (d - half)..(c + 1) * (d - half)]);
        }
    }
    Tensor::new(&[h * w, d], data).expect("2-D sine encoding shape")
}

/// Learned token embedding table.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, d: usize) -> Self {
        Self { table: store.add(&format!("{name}.table"), &[vocab, d], Init::Normal(0.5)), vocab }
    }

    /// Row lookup; ids at or beyond the vocabulary size are errors.
    pub fn forward(&self, ctx: &Ctx, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::Invalid(format!("token id {bad} >= vocab size {}", self.vocab)));
        }
        ctx.p(self.table).index_select(ids)
    }
}

/// Same-padded 2-D convolution over `[H, W, C]` maps.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, k: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            w: store.add(&format!("{name}.weight"), &[k, k, c_in, c_out], Init::Xavier),
            b: store.add(&format!("{name}.bias"), &[c_out], Init::Zeros),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        x.conv2d(&ctx.p(self.w), &ctx.p(self.b))
    }
}
