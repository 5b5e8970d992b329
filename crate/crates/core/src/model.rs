//! Transformer encoder with a pooled-`[CLS]` regression head.
//!
//! Layout: token + position + segment embeddings, layer-normalized; a stack
//! of post-norm blocks (multi-head self-attention, residual, layer norm, GELU
//! feed-forward, residual, layer norm); a tanh pooler on the first position;
//! dropout; and a linear head with one output per competency.
//!
//! Gradients are derived by hand in [`backward`]. Every activation the
//! backward pass needs is kept in a [`ForwardCache`] when running in
//! [`Mode::Train`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::COMPETENCIES;
use crate::error::{AesError, Result};
use crate::tensor::{linear, linear_backward, ParamStore, Scalar, Tensor};
use crate::tokenizer::TokenizedInput;

pub const INIT_STD: f64 = 0.02;
pub const MASK_VALUE: f64 = -1e9;
pub const TYPE_VOCAB_SIZE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub max_positions: usize,
    /// Dropout on the pooled vector before the head.
    pub dropout_rate: f64,
    #[serde(default)]
    pub attention_dropout: f64,
    #[serde(default)]
    pub hidden_dropout: f64,
    pub head_outputs: usize,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
}

fn default_ln_eps() -> f64 {
    1e-12
}

impl ModelConfig {
    /// 12 layers, hidden 768, 12 heads: the standard base encoder size.
    pub fn base(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            hidden: 768,
            layers: 12,
            heads: 12,
            intermediate: 3072,
            max_positions: 512,
            dropout_rate: 0.3,
            attention_dropout: 0.0,
            hidden_dropout: 0.0,
            head_outputs: COMPETENCIES,
            layer_norm_eps: default_ln_eps(),
        }
    }

    /// Small enough to train on a laptop CPU.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            hidden: 64,
            layers: 2,
            heads: 4,
            intermediate: 256,
            max_positions: 64,
            ..Self::base(vocab_size)
        }
    }

    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            hidden: 16,
            layers: 2,
            heads: 2,
            intermediate: 32,
            max_positions: 24,
            ..Self::base(vocab_size)
        }
    }

    pub fn preset(name: &str, vocab_size: usize) -> Option<Self> {
        match name {
            "base" => Some(Self::base(vocab_size)),
            "desk" => Some(Self::desk(vocab_size)),
            "toy" => Some(Self::toy(vocab_size)),
            _ => None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(AesError::InvalidConfig(m));
        if self.hidden == 0 || self.heads == 0 || self.intermediate == 0 {
            return fail("hidden, heads and intermediate must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return fail(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if self.head_outputs != COMPETENCIES {
            return fail(format!("head_outputs must be {COMPETENCIES}"));
        }
        if self.vocab_size < 4 {
            return fail("vocab_size must cover the four special tokens".into());
        }
        if self.max_positions == 0 {
            return fail("max_positions must be positive".into());
        }
        for (name, rate) in [
            ("dropout_rate", self.dropout_rate),
            ("attention_dropout", self.attention_dropout),
            ("hidden_dropout", self.hidden_dropout),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return fail(format!("{name} {rate} is outside [0, 1)"));
            }
        }
        if self.layer_norm_eps.is_nan() || self.layer_norm_eps <= 0.0 {
            return fail("layer_norm_eps must be positive".into());
        }
        Ok(())
    }
}

/// Trainable parameter count from the closed-form shape formula.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let (v, h, f, p) = (
        cfg.vocab_size,
        cfg.hidden,
        cfg.intermediate,
        cfg.max_positions,
    );
    let embeddings = (v + p + TYPE_VOCAB_SIZE) * h + 2 * h;
    let per_layer = 4 * (h * h + h) + 2 * h * f + f + h + 2 * (2 * h);
    let pooler = h * h + h;
    let head = h * cfg.head_outputs + cfg.head_outputs;
    embeddings + cfg.layers * per_layer + pooler + head
}

pub mod names {
    pub const WORD_EMB: &str = "embeddings.word_embeddings";
    pub const POS_EMB: &str = "embeddings.position_embeddings";
    pub const TYPE_EMB: &str = "embeddings.token_type_embeddings";
    pub const EMB_LN_GAMMA: &str = "embeddings.layer_norm.gamma";
    pub const EMB_LN_BETA: &str = "embeddings.layer_norm.beta";
    pub const POOLER_W: &str = "pooler.weight";
    pub const POOLER_B: &str = "pooler.bias";
    pub const HEAD_W: &str = "head.weight";
    pub const HEAD_B: &str = "head.bias";

    /// Parameter names of one encoder block.
    #[derive(Debug, Clone)]
    pub struct Layer {
        pub q_w: String,
        pub q_b: String,
        pub k_w: String,
        pub k_b: String,
        pub v_w: String,
        pub v_b: String,
        pub o_w: String,
        pub o_b: String,
        pub ln1_g: String,
        pub ln1_b: String,
        pub ff1_w: String,
        pub ff1_b: String,
        pub ff2_w: String,
        pub ff2_b: String,
        pub ln2_g: String,
        pub ln2_b: String,
    }

    impl Layer {
        pub fn new(i: usize) -> Self {
            let p = format!("encoder.layer.{i}");
            Layer {
                q_w: format!("{p}.attention.query.weight"),
                q_b: format!("{p}.attention.query.bias"),
                k_w: format!("{p}.attention.key.weight"),
                k_b: format!("{p}.attention.key.bias"),
                v_w: format!("{p}.attention.value.weight"),
                v_b: format!("{p}.attention.value.bias"),
                o_w: format!("{p}.attention.output.weight"),
                o_b: format!("{p}.attention.output.bias"),
                ln1_g: format!("{p}.attention.output.layer_norm.gamma"),
                ln1_b: format!("{p}.attention.output.layer_norm.beta"),
                ff1_w: format!("{p}.intermediate.weight"),
                ff1_b: format!("{p}.intermediate.bias"),
                ff2_w: format!("{p}.output.weight"),
                ff2_b: format!("{p}.output.bias"),
                ln2_g: format!("{p}.output.layer_norm.gamma"),
                ln2_b: format!("{p}.output.layer_norm.beta"),
            }
        }
    }
}

use names::*;

/// Names and shapes of every parameter, in canonical order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (h, f) = (cfg.hidden, cfg.intermediate);
    let mut out: Vec<(String, Vec<usize>)> = vec![
        (WORD_EMB.into(), vec![cfg.vocab_size, h]),
        (POS_EMB.into(), vec![cfg.max_positions, h]),
        (TYPE_EMB.into(), vec![TYPE_VOCAB_SIZE, h]),
        (EMB_LN_GAMMA.into(), vec![h]),
        (EMB_LN_BETA.into(), vec![h]),
    ];
    for i in 0..cfg.layers {
        let n = names::Layer::new(i);
        out.extend([
            (n.q_w, vec![h, h]),
            (n.q_b, vec![h]),
            (n.k_w, vec![h, h]),
            (n.k_b, vec![h]),
            (n.v_w, vec![h, h]),
            (n.v_b, vec![h]),
            (n.o_w, vec![h, h]),
            (n.o_b, vec![h]),
            (n.ln1_g, vec![h]),
            (n.ln1_b, vec![h]),
            (n.ff1_w, vec![h, f]),
            (n.ff1_b, vec![f]),
            (n.ff2_w, vec![f, h]),
            (n.ff2_b, vec![h]),
            (n.ln2_g, vec![h]),
            (n.ln2_b, vec![h]),
        ]);
    }
    out.extend([
        (POOLER_W.into(), vec![h, h]),
        (POOLER_B.into(), vec![h]),
        (HEAD_W.into(), vec![h, cfg.head_outputs]),
        (HEAD_B.into(), vec![cfg.head_outputs]),
    ]);
    out
}

pub fn is_layer_norm(name: &str) -> bool {
    name.contains("layer_norm")
}

pub fn is_bias(name: &str) -> bool {
    name.ends_with(".bias")
}

/// Truncated-normal weights (std 0.02, cut at two std), unit layer-norm
/// scales, zero biases and offsets.
pub fn init_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in param_shapes(cfg) {
        let tensor = if name.ends_with(".gamma") {
            Tensor::filled(&shape, T::one())
        } else if name.ends_with(".beta") || is_bias(&name) {
            Tensor::zeros(&shape)
        } else {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| loop {
                    let x: f64 = normal.sample(&mut rng);
                    if x.abs() <= 2.0 * INIT_STD {
                        break T::lit(x);
                    }
                })
                .collect();
            Tensor { shape, data }
        };
        store.insert(name, tensor);
    }
    Ok(store)
}

/// Multiplies every weight matrix and embedding table by `factor`, leaving
/// biases and layer norms alone. At the default init most attention
/// gradients sit below finite-difference resolution; a scaled copy gives
/// [`crate::training::grad_check`] a point where they are measurable.
pub fn scale_weights<T: Scalar>(params: &mut ParamStore<T>, factor: f64) {
    let f = T::lit(factor);
    for (name, t) in params.iter_mut() {
        if !is_bias(name) && !is_layer_norm(name) {
            t.data.iter_mut().for_each(|x| *x *= f);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-row layer-norm statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    /// Normalized input before scale and offset, `rows×hidden`.
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    pub input: Vec<T>,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// Softmax output per head, `heads×len×len`.
    pub probs: Vec<T>,
    pub probs_mask: Option<Vec<T>>,
    pub ctx: Vec<T>,
    pub attn_mask: Option<Vec<T>>,
    pub ln1: LayerNormCache<T>,
    pub h1: Vec<T>,
    pub ff_pre: Vec<T>,
    pub ff_act: Vec<T>,
    pub ffn_mask: Option<Vec<T>>,
    pub ln2: LayerNormCache<T>,
}

#[derive(Debug, Clone)]
pub struct ExampleCache<T> {
    pub ids: Vec<u32>,
    pub type_ids: Vec<u32>,
    pub emb_ln: LayerNormCache<T>,
    pub layers: Vec<LayerCache<T>>,
    pub cls_hidden: Vec<T>,
    pub pooled: Vec<T>,
    pub head_mask: Option<Vec<T>>,
    pub head_input: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub examples: Vec<ExampleCache<T>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// One row per input, in normalized score units.
    pub predictions: Vec<[T; COMPETENCIES]>,
    pub cache: Option<ForwardCache<T>>,
}

fn dropout_mask<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Option<Vec<T>> {
    if rate == 0.0 {
        return None;
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    Some(
        (0..n)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect(),
    )
}

fn apply_mask<T: Scalar>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, &s) in x.iter_mut().zip(m) {
            *v *= s;
        }
    }
}

fn layer_norm<T: Scalar>(
    x: &[T],
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    width: usize,
    eps: T,
) -> (Vec<T>, LayerNormCache<T>) {
    let rows = x.len() / width;
    let n = T::lit(width as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..width {
            let xh = (row[j] - mean) * is;
            xhat[r * width + j] = xh;
            out[r * width + j] = gamma.data[j] * xh + beta.data[j];
        }
    }
    (out, LayerNormCache { xhat, inv_std })
}

fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    dgamma: &mut Tensor<T>,
    dbeta: &mut Tensor<T>,
    width: usize,
) -> Vec<T> {
    let n = T::lit(width as f64);
    let mut dx = vec![T::zero(); dy.len()];
    for (r, &is) in cache.inv_std.iter().enumerate() {
        let dyr = &dy[r * width..(r + 1) * width];
        let xh = &cache.xhat[r * width..(r + 1) * width];
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for j in 0..width {
            dgamma.data[j] += dyr[j] * xh[j];
            dbeta.data[j] += dyr[j];
            let d = dyr[j] * gamma.data[j];
            mean_d += d;
            mean_dx += d * xh[j];
        }
        mean_d /= n;
        mean_dx /= n;
        for j in 0..width {
            let d = dyr[j] * gamma.data[j];
            dx[r * width + j] = is * (d - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

fn gelu<T: Scalar>(x: T) -> T {
    T::lit(0.5) * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

fn check_batch(cfg: &ModelConfig, batch: &[&TokenizedInput]) -> Result<usize> {
    let len = batch.first().map(|b| b.len()).unwrap_or(0);
    for (i, input) in batch.iter().enumerate() {
        if input.len() != len || input.type_ids.len() != len || input.mask.len() != len {
            return Err(AesError::ShapeMismatch(format!(
                "input {i} has lengths ids={} type_ids={} mask={}, expected {len}",
                input.ids.len(),
                input.type_ids.len(),
                input.mask.len()
            )));
        }
        if let Some(&id) = input.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(AesError::IdOutOfRange {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
        if input.type_ids.iter().any(|&t| t as usize >= TYPE_VOCAB_SIZE) {
            return Err(AesError::ShapeMismatch(format!(
                "input {i} has a token type id outside 0..{TYPE_VOCAB_SIZE}"
            )));
        }
    }
    if len == 0 && !batch.is_empty() {
        return Err(AesError::ShapeMismatch("inputs are empty".into()));
    }
    if len > cfg.max_positions {
        return Err(AesError::ShapeMismatch(format!(
            "sequence length {len} exceeds max_positions {}",
            cfg.max_positions
        )));
    }
    Ok(len)
}

/// Runs the encoder and head over a batch.
///
/// In train mode dropout masks are drawn from `dropout_seed` (one stream per
/// batch position), so the same seed reproduces the same masks; the returned
/// output carries the cache needed by [`backward`]. Eval mode ignores the seed.
pub fn forward<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    batch: &[&TokenizedInput],
    mode: Mode,
    dropout_seed: u64,
) -> Result<ForwardOutput<T>> {
    check_batch(cfg, batch)?;
    let layer_names: Vec<names::Layer> = (0..cfg.layers).map(names::Layer::new).collect();
    let results: Vec<([T; COMPETENCIES], Option<ExampleCache<T>>)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, input)| {
            let mut rng = match mode {
                Mode::Train => {
                    let mut r = ChaCha8Rng::seed_from_u64(dropout_seed);
                    r.set_stream(i as u64);
                    Some(r)
                }
                Mode::Eval => None,
            };
            forward_example(params, cfg, &layer_names, input, rng.as_mut())
        })
        .collect();
    let mut predictions = Vec::with_capacity(results.len());
    let mut caches = Vec::with_capacity(results.len());
    for (p, c) in results {
        predictions.push(p);
        caches.extend(c);
    }
    Ok(ForwardOutput {
        predictions,
        cache: (mode == Mode::Train).then_some(ForwardCache { examples: caches }),
    })
}

fn forward_example<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    layer_names: &[names::Layer],
    input: &TokenizedInput,
    mut rng: Option<&mut ChaCha8Rng>,
) -> ([T; COMPETENCIES], Option<ExampleCache<T>>) {
    let (h, f, a) = (cfg.hidden, cfg.intermediate, cfg.heads);
    let d = cfg.head_dim();
    let len = input.len();
    let eps = T::lit(cfg.layer_norm_eps);
    let scale = T::lit(1.0 / (d as f64).sqrt());
    let mask_add: Vec<T> = input
        .mask
        .iter()
        .map(|&m| if m == 1 { T::zero() } else { T::lit(MASK_VALUE) })
        .collect();

    let word = params.get(WORD_EMB);
    let pos = params.get(POS_EMB);
    let seg = params.get(TYPE_EMB);
    let mut emb = vec![T::zero(); len * h];
    for i in 0..len {
        let (tid, ty) = (input.ids[i] as usize, input.type_ids[i] as usize);
        for j in 0..h {
            emb[i * h + j] = word.data[tid * h + j] + pos.data[i * h + j] + seg.data[ty * h + j];
        }
    }
    let (mut x, emb_ln) = layer_norm(
        &emb,
        params.get(EMB_LN_GAMMA),
        params.get(EMB_LN_BETA),
        h,
        eps,
    );

    let mut layer_caches = Vec::new();
    for n in layer_names {
        let q = linear(&x, params.get(&n.q_w), params.get(&n.q_b), len);
        let k = linear(&x, params.get(&n.k_w), params.get(&n.k_b), len);
        let v = linear(&x, params.get(&n.v_w), params.get(&n.v_b), len);

        let mut probs = vec![T::zero(); a * len * len];
        for head in 0..a {
            for i in 0..len {
                let row = &mut probs[(head * len + i) * len..(head * len + i + 1) * len];
                let qi = &q[i * h + head * d..i * h + head * d + d];
                let mut max = T::neg_infinity();
                for j in 0..len {
                    let kj = &k[j * h + head * d..j * h + head * d + d];
                    let s = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum::<T>() * scale
                        + mask_add[j];
                    row[j] = s;
                    max = max.max(s);
                }
                let mut total = T::zero();
                for p in row.iter_mut() {
                    *p = (*p - max).exp();
                    total += *p;
                }
                for p in row.iter_mut() {
                    *p /= total;
                }
            }
        }
        let probs_mask = rng
            .as_deref_mut()
            .and_then(|r| dropout_mask(r, probs.len(), cfg.attention_dropout));
        let mut probs_used = probs.clone();
        apply_mask(&mut probs_used, &probs_mask);

        let mut ctx = vec![T::zero(); len * h];
        for head in 0..a {
            for i in 0..len {
                let prow = &probs_used[(head * len + i) * len..(head * len + i + 1) * len];
                let out = &mut ctx[i * h + head * d..i * h + head * d + d];
                for (j, &p) in prow.iter().enumerate() {
                    if p == T::zero() {
                        continue;
                    }
                    let vj = &v[j * h + head * d..j * h + head * d + d];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
        let mut attn = linear(&ctx, params.get(&n.o_w), params.get(&n.o_b), len);
        let attn_mask = rng
            .as_deref_mut()
            .and_then(|r| dropout_mask(r, attn.len(), cfg.hidden_dropout));
        apply_mask(&mut attn, &attn_mask);
        for (o, &xi) in attn.iter_mut().zip(&x) {
            *o += xi;
        }
        let (h1, ln1) = layer_norm(&attn, params.get(&n.ln1_g), params.get(&n.ln1_b), h, eps);

        let ff_pre = linear(&h1, params.get(&n.ff1_w), params.get(&n.ff1_b), len);
        let ff_act: Vec<T> = ff_pre.iter().map(|&z| gelu(z)).collect();
        let mut ffn = linear(&ff_act, params.get(&n.ff2_w), params.get(&n.ff2_b), len);
        let ffn_mask = rng
            .as_deref_mut()
            .and_then(|r| dropout_mask(r, ffn.len(), cfg.hidden_dropout));
        apply_mask(&mut ffn, &ffn_mask);
        for (o, &r) in ffn.iter_mut().zip(&h1) {
            *o += r;
        }
        let (out, ln2) = layer_norm(&ffn, params.get(&n.ln2_g), params.get(&n.ln2_b), h, eps);
        debug_assert_eq!(ff_pre.len(), len * f);

        if rng.is_some() {
            layer_caches.push(LayerCache {
                input: std::mem::replace(&mut x, out),
                q,
                k,
                v,
                probs,
                probs_mask,
                ctx,
                attn_mask,
                ln1,
                h1,
                ff_pre,
                ff_act,
                ffn_mask,
                ln2,
            });
        } else {
            x = out;
        }
    }

    let cls_hidden = x[..h].to_vec();
    let pooled: Vec<T> = linear(&cls_hidden, params.get(POOLER_W), params.get(POOLER_B), 1)
        .into_iter()
        .map(T::tanh)
        .collect();
    let head_mask = rng
        .as_deref_mut()
        .and_then(|r| dropout_mask(r, h, cfg.dropout_rate));
    let mut head_input = pooled.clone();
    apply_mask(&mut head_input, &head_mask);
    let out = linear(&head_input, params.get(HEAD_W), params.get(HEAD_B), 1);
    let mut pred = [T::zero(); COMPETENCIES];
    pred.copy_from_slice(&out);

    let cache = rng.map(|_| ExampleCache {
        ids: input.ids.clone(),
        type_ids: input.type_ids.clone(),
        emb_ln,
        layers: layer_caches,
        cls_hidden,
        pooled,
        head_mask,
        head_input,
    });
    (pred, cache)
}

/// Backpropagates `dpred` (gradient of the loss with respect to each
/// prediction row) through the cached forward pass.
pub fn backward<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    output: &ForwardOutput<T>,
    dpred: &[[T; COMPETENCIES]],
) -> Result<ParamStore<T>> {
    let cache = output.cache.as_ref().ok_or(AesError::MissingCache)?;
    if dpred.len() != cache.examples.len() {
        return Err(AesError::ShapeMismatch(format!(
            "{} gradient rows for {} cached examples",
            dpred.len(),
            cache.examples.len()
        )));
    }
    let layer_names: Vec<names::Layer> = (0..cfg.layers).map(names::Layer::new).collect();
    let mut grads = params.zeros_like();
    for (ex, dp) in cache.examples.iter().zip(dpred) {
        backward_example(params, cfg, &layer_names, ex, dp, &mut grads);
    }
    Ok(grads)
}

/// Mutable borrows of two distinct gradient tensors.
fn pair_mut<'a, T: Scalar>(
    grads: &'a mut ParamStore<T>,
    a: &str,
    b: &str,
) -> (&'a mut Tensor<T>, &'a mut Tensor<T>) {
    let mut it = grads.iter_mut().filter(|(k, _)| *k == a || *k == b);
    let (k1, t1) = it.next().expect("first tensor");
    let (_, t2) = it.next().expect("second tensor");
    if k1 == a {
        (t1, t2)
    } else {
        (t2, t1)
    }
}

fn backward_example<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    layer_names: &[names::Layer],
    ex: &ExampleCache<T>,
    dpred: &[T; COMPETENCIES],
    grads: &mut ParamStore<T>,
) {
    let (h, f, a) = (cfg.hidden, cfg.intermediate, cfg.heads);
    let d = cfg.head_dim();
    let len = ex.ids.len();
    let scale = T::lit(1.0 / (d as f64).sqrt());

    // head
    let (dw, db) = pair_mut(grads, HEAD_W, HEAD_B);
    let mut dpooled = linear_backward(&ex.head_input, dpred, params.get(HEAD_W), dw, db, 1);
    apply_mask(&mut dpooled, &ex.head_mask);
    // tanh pooler
    let dz: Vec<T> = dpooled
        .iter()
        .zip(&ex.pooled)
        .map(|(&g, &p)| g * (T::one() - p * p))
        .collect();
    let (dw, db) = pair_mut(grads, POOLER_W, POOLER_B);
    let dcls = linear_backward(&ex.cls_hidden, &dz, params.get(POOLER_W), dw, db, 1);

    let mut dx = vec![T::zero(); len * h];
    dx[..h].copy_from_slice(&dcls);

    for (n, lc) in layer_names.iter().zip(&ex.layers).rev() {
        // out = LN2(h1 + dropout(ffn))
        let (dg, dbeta) = pair_mut(grads, &n.ln2_g, &n.ln2_b);
        let dsum2 = layer_norm_backward(&dx, &lc.ln2, params.get(&n.ln2_g), dg, dbeta, h);
        let mut dffn = dsum2.clone();
        apply_mask(&mut dffn, &lc.ffn_mask);
        let (dw, db) = pair_mut(grads, &n.ff2_w, &n.ff2_b);
        let dact = linear_backward(&lc.ff_act, &dffn, params.get(&n.ff2_w), dw, db, len);
        let dpre: Vec<T> = dact
            .iter()
            .zip(&lc.ff_pre)
            .map(|(&g, &z)| g * gelu_grad(z))
            .collect();
        debug_assert_eq!(dpre.len(), len * f);
        let (dw, db) = pair_mut(grads, &n.ff1_w, &n.ff1_b);
        let dh1_ff = linear_backward(&lc.h1, &dpre, params.get(&n.ff1_w), dw, db, len);
        let dh1: Vec<T> = dsum2.iter().zip(&dh1_ff).map(|(&x, &y)| x + y).collect();

        // h1 = LN1(input + dropout(attn))
        let (dg, dbeta) = pair_mut(grads, &n.ln1_g, &n.ln1_b);
        let dsum1 = layer_norm_backward(&dh1, &lc.ln1, params.get(&n.ln1_g), dg, dbeta, h);
        let mut dattn = dsum1.clone();
        apply_mask(&mut dattn, &lc.attn_mask);
        let (dw, db) = pair_mut(grads, &n.o_w, &n.o_b);
        let dctx = linear_backward(&lc.ctx, &dattn, params.get(&n.o_w), dw, db, len);

        let mut dq = vec![T::zero(); len * h];
        let mut dk = vec![T::zero(); len * h];
        let mut dv = vec![T::zero(); len * h];
        let mut dprow = vec![T::zero(); len];
        for head in 0..a {
            let off = head * d;
            for i in 0..len {
                let base = (head * len + i) * len;
                let prow = &lc.probs[base..base + len];
                let dci = &dctx[i * h + off..i * h + off + d];
                // d(used probs) and dv
                for j in 0..len {
                    let vj = &lc.v[j * h + off..j * h + off + d];
                    let mut g = dci.iter().zip(vj).map(|(&x, &y)| x * y).sum::<T>();
                    let keep = lc.probs_mask.as_ref().map_or(T::one(), |m| m[base + j]);
                    let p_used = prow[j] * keep;
                    if p_used != T::zero() {
                        let dvj = &mut dv[j * h + off..j * h + off + d];
                        for (o, &c) in dvj.iter_mut().zip(dci) {
                            *o += p_used * c;
                        }
                    }
                    g *= keep;
                    dprow[j] = g;
                }
                // softmax
                let dot = prow.iter().zip(&dprow).map(|(&p, &g)| p * g).sum::<T>();
                let qi = &lc.q[i * h + off..i * h + off + d];
                for j in 0..len {
                    let ds = prow[j] * (dprow[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj = &lc.k[j * h + off..j * h + off + d];
                    for t in 0..d {
                        dq[i * h + off + t] += ds * kj[t];
                        dk[j * h + off + t] += ds * qi[t];
                    }
                }
            }
        }
        let mut dinput = dsum1;
        for (wn, bn, g) in [(&n.q_w, &n.q_b, &dq), (&n.k_w, &n.k_b, &dk), (&n.v_w, &n.v_b, &dv)] {
            let (dw, db) = pair_mut(grads, wn, bn);
            let di = linear_backward(&lc.input, g, params.get(wn), dw, db, len);
            for (o, x) in dinput.iter_mut().zip(di) {
                *o += x;
            }
        }
        dx = dinput;
    }

    let (dg, dbeta) = pair_mut(grads, EMB_LN_GAMMA, EMB_LN_BETA);
    let demb = layer_norm_backward(&dx, &ex.emb_ln, params.get(EMB_LN_GAMMA), dg, dbeta, h);
    let dword = grads.get_mut(WORD_EMB);
    for i in 0..len {
        let tid = ex.ids[i] as usize;
        for j in 0..h {
            dword.data[tid * h + j] += demb[i * h + j];
        }
    }
    let dpos = grads.get_mut(POS_EMB);
    for (g, &d) in dpos.data.iter_mut().zip(&demb[..len * h]) {
        *g += d;
    }
    let dseg = grads.get_mut(TYPE_EMB);
    for i in 0..len {
        let ty = ex.type_ids[i] as usize;
        for j in 0..h {
            dseg.data[ty * h + j] += demb[i * h + j];
        }
    }
}
