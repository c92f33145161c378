//! Class-conditional patch transformer that predicts the noise `ε` added to an image.
//!
//! Layout: patch embedding plus learned positions, a conditioning vector
//! (sinusoidal timestep MLP plus class embedding, with a dedicated null class)
//! added to every token, `blocks` pre-norm transformer blocks, and a final
//! norm and linear head mapping tokens back to patches.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};

const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { image_size: 8, channels: 1, patch: 2, d_model: 64, heads: 4, blocks: 4, mlp_ratio: 4, classes: 2 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_size,
            self.channels,
            self.patch,
            self.d_model,
            self.heads,
            self.blocks,
            self.mlp_ratio,
            self.classes,
        ];
        if positive.contains(&0) {
            return Err(Error::Parameter("model dimensions must be positive".into()));
        }
        if !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::Parameter(format!(
                "patch {} does not divide image size {}",
                self.patch, self.image_size
            )));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Parameter(format!(
                "heads {} do not divide d_model {}",
                self.heads, self.d_model
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Parameter("d_model must be even for the timestep embedding".into()));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn tokens(&self) -> usize {
        let side = self.image_size / self.patch;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    /// Row index of the null (unconditional) class embedding.
    pub fn null_class(&self) -> usize {
        self.classes
    }
}

/// `y = x Wᵀ + b` with `W` stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Linear {
    fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Array2::zeros((output, input)), bias: Array1::zeros(output) }
    }

    fn init<R: Rng>(input: usize, output: usize, gain: f32, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, gain / (input as f32).sqrt()).expect("finite std");
        Self {
            weight: Array2::from_shape_fn((output, input), |_| normal.sample(rng)),
            bias: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: ArrayView2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    fn backward(&self, x: ArrayView2<f32>, dy: ArrayView2<f32>, grad: &mut Linear) -> Array2<f32> {
        grad.weight += &dy.t().dot(&x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f32>,
    pub bias: Array1<f32>,
}

struct NormCache {
    normalized: Array2<f32>,
    rstd: Array1<f32>,
}

impl LayerNorm {
    fn new(dim: usize) -> Self {
        Self { gain: Array1::ones(dim), bias: Array1::zeros(dim) }
    }

    fn zeros(dim: usize) -> Self {
        Self { gain: Array1::zeros(dim), bias: Array1::zeros(dim) }
    }

    fn forward(&self, x: ArrayView2<f32>) -> (Array2<f32>, NormCache) {
        let d = x.ncols() as f32;
        let mut normalized = x.to_owned();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in normalized.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f32>() / d;
            *r = 1.0 / (var + LN_EPS).sqrt();
            row *= *r;
        }
        let mut y = &normalized * &self.gain;
        y += &self.bias;
        (y, NormCache { normalized, rstd })
    }

    fn backward(&self, cache: &NormCache, dy: ArrayView2<f32>, grad: &mut LayerNorm) -> Array2<f32> {
        grad.gain += &(&dy * &cache.normalized).sum_axis(Axis(0));
        grad.bias += &dy.sum_axis(Axis(0));
        let d = dy.ncols() as f32;
        let mut dx = &dy * &self.gain;
        for ((mut row, xhat), r) in dx.rows_mut().into_iter().zip(cache.normalized.rows()).zip(&cache.rstd) {
            let mean_d = row.sum() / d;
            let mean_dx = row.iter().zip(xhat).map(|(a, b)| a * b).sum::<f32>() / d;
            Zip::from(&mut row).and(xhat).for_each(|g, &xh| *g = r * (*g - mean_d - xh * mean_dx));
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    /// Rows `[0, d)` are queries, `[d, 2d)` keys, `[2d, 3d)` values; head `h`
    /// owns rows `h·dh..(h+1)·dh` inside each third.
    pub qkv: Linear,
    pub out_proj: Linear,
    pub ln2: LayerNorm,
    pub mlp_up: Linear,
    pub mlp_down: Linear,
}

impl Block {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            ln1: LayerNorm::zeros(d),
            qkv: Linear::zeros(d, 3 * d),
            out_proj: Linear::zeros(d, d),
            ln2: LayerNorm::zeros(d),
            mlp_up: Linear::zeros(d, cfg.hidden()),
            mlp_down: Linear::zeros(cfg.hidden(), d),
        }
    }

    fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Self {
            ln1: LayerNorm::new(d),
            qkv: Linear::init(d, 3 * d, 1.0, rng),
            out_proj: Linear::init(d, d, 0.5, rng),
            ln2: LayerNorm::new(d),
            mlp_up: Linear::init(d, cfg.hidden(), 1.0, rng),
            mlp_down: Linear::init(cfg.hidden(), d, 0.5, rng),
        }
    }

    /// Attention sublayer on already-normalized input `a` (rows = batch·tokens).
    /// Returns the concatenated head outputs (the out-projection input) and the
    /// attention probabilities per `(item, head)`.
    pub fn attention_heads(&self, a: ArrayView2<f32>, heads: usize, tokens: usize) -> (Array2<f32>, Array2<f32>, Vec<Array2<f32>>) {
        let d = a.ncols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let qkv = self.qkv.forward(a);
        let items = a.nrows() / tokens;
        let mut concat = Array2::zeros((a.nrows(), d));
        let mut probs = Vec::with_capacity(items * heads);
        for b in 0..items {
            let rows = b * tokens..(b + 1) * tokens;
            for h in 0..heads {
                let q = qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let k = qkv.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
                let v = qkv.slice(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let mut p = q.dot(&k.t());
                for mut row in p.rows_mut() {
                    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    row.mapv_inplace(|x| ((x - max) * scale).exp());
                    let sum = row.sum();
                    row /= sum;
                }
                concat.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh]).assign(&p.dot(&v));
                probs.push(p);
            }
        }
        (concat, qkv, probs)
    }

    /// Attention sublayer output (before the residual add) on normalized input.
    pub fn attention(&self, a: ArrayView2<f32>, heads: usize, tokens: usize) -> Array2<f32> {
        let (concat, _, _) = self.attention_heads(a, heads, tokens);
        self.out_proj.forward(concat.view())
    }

    /// Post-activation hidden features (the down-projection input).
    pub fn mlp_hidden(&self, m: ArrayView2<f32>) -> Array2<f32> {
        self.mlp_up.forward(m).mapv(gelu)
    }

    /// MLP sublayer output (before the residual add) on normalized input.
    pub fn mlp(&self, m: ArrayView2<f32>) -> Array2<f32> {
        self.mlp_down.forward(self.mlp_hidden(m).view())
    }
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let th = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f32) -> f32 {
    let sig = 1.0 / (1.0 + (-x).exp());
    sig * (1.0 + x * (1.0 - sig))
}

/// Sinusoidal embedding `[cos(t·f_i), sin(t·f_i)]` with geometric frequencies.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Array2<f32> {
    let half = dim / 2;
    Array2::from_shape_fn((t.len(), dim), |(b, j)| {
        let i = j % half;
        let freq = (-(10000f32.ln()) * i as f32 / half as f32).exp();
        let arg = t[b] as f32 * freq;
        if j < half {
            arg.cos()
        } else {
            arg.sin()
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: ModelConfig,
    pub patch_embed: Linear,
    pub pos_embed: Array2<f32>,
    pub time_fc1: Linear,
    pub time_fc2: Linear,
    /// `classes + 1` rows; the last is the null class.
    pub class_embed: Array2<f32>,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: Linear,
}

struct BlockCache {
    ln1: NormCache,
    a: Array2<f32>,
    qkv: Array2<f32>,
    probs: Vec<Array2<f32>>,
    concat: Array2<f32>,
    ln2: NormCache,
    m: Array2<f32>,
    pre_act: Array2<f32>,
    hidden: Array2<f32>,
}

/// Intermediate values of one forward pass.
pub struct ForwardCache {
    tokens: Array2<f32>,
    temb: Array2<f32>,
    time_pre: Array2<f32>,
    time_act: Array2<f32>,
    classes: Vec<usize>,
    blocks: Vec<BlockCache>,
    ln_f: NormCache,
    f: Array2<f32>,
}

impl ForwardCache {
    /// Out-projection input of block `i` (rows = items × tokens).
    pub fn attn_out_input(&self, i: usize) -> ArrayView2<'_, f32> {
        self.blocks[i].concat.view()
    }

    /// Down-projection input of block `i` (post-activation hidden features).
    pub fn mlp_down_input(&self, i: usize) -> ArrayView2<'_, f32> {
        self.blocks[i].hidden.view()
    }

    /// Normalized attention-sublayer input of block `i`.
    pub fn attn_input(&self, i: usize) -> ArrayView2<'_, f32> {
        self.blocks[i].a.view()
    }

    /// Normalized MLP-sublayer input of block `i`.
    pub fn mlp_input(&self, i: usize) -> ArrayView2<'_, f32> {
        self.blocks[i].m.view()
    }
}

macro_rules! visit_tensors {
    ($self:ident, $f:ident, $slice:ident, $iter:ident) => {{
        macro_rules! v {
            ($name:expr, $arr:expr) => {{
                let shape = $arr.shape().to_vec();
                $f(&$name, $arr.$slice().expect("standard layout"), &shape);
            }};
        }
        v!("patch_embed.weight", $self.patch_embed.weight);
        v!("patch_embed.bias", $self.patch_embed.bias);
        v!("pos_embed", $self.pos_embed);
        v!("time_fc1.weight", $self.time_fc1.weight);
        v!("time_fc1.bias", $self.time_fc1.bias);
        v!("time_fc2.weight", $self.time_fc2.weight);
        v!("time_fc2.bias", $self.time_fc2.bias);
        v!("class_embed", $self.class_embed);
        for (i, b) in $self.blocks.$iter().enumerate() {
            v!(format!("blocks.{i}.ln1.gain"), b.ln1.gain);
            v!(format!("blocks.{i}.ln1.bias"), b.ln1.bias);
            v!(format!("blocks.{i}.qkv.weight"), b.qkv.weight);
            v!(format!("blocks.{i}.qkv.bias"), b.qkv.bias);
            v!(format!("blocks.{i}.out_proj.weight"), b.out_proj.weight);
            v!(format!("blocks.{i}.out_proj.bias"), b.out_proj.bias);
            v!(format!("blocks.{i}.ln2.gain"), b.ln2.gain);
            v!(format!("blocks.{i}.ln2.bias"), b.ln2.bias);
            v!(format!("blocks.{i}.mlp_up.weight"), b.mlp_up.weight);
            v!(format!("blocks.{i}.mlp_up.bias"), b.mlp_up.bias);
            v!(format!("blocks.{i}.mlp_down.weight"), b.mlp_down.weight);
            v!(format!("blocks.{i}.mlp_down.bias"), b.mlp_down.bias);
        }
        v!("ln_f.gain", $self.ln_f.gain);
        v!("ln_f.bias", $self.ln_f.bias);
        v!("head.weight", $self.head.weight);
        v!("head.bias", $self.head.bias);
    }};
}

impl Denoiser {
    /// All-zero parameters with the given architecture.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        Ok(Self {
            config,
            patch_embed: Linear::zeros(config.patch_dim(), d),
            pos_embed: Array2::zeros((config.tokens(), d)),
            time_fc1: Linear::zeros(d, d),
            time_fc2: Linear::zeros(d, d),
            class_embed: Array2::zeros((config.classes + 1, d)),
            blocks: (0..config.blocks).map(|_| Block::zeros(&config)).collect(),
            ln_f: LayerNorm::zeros(d),
            head: Linear::zeros(d, config.patch_dim()),
        })
    }

    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let small = Normal::new(0.0f32, 0.02).expect("finite std");
        Ok(Self {
            config,
            patch_embed: Linear::init(config.patch_dim(), d, 1.0, rng),
            pos_embed: Array2::from_shape_fn((config.tokens(), d), |_| small.sample(rng)),
            time_fc1: Linear::init(d, d, 1.0, rng),
            time_fc2: Linear::init(d, d, 1.0, rng),
            class_embed: Array2::from_shape_fn((config.classes + 1, d), |_| small.sample(rng)),
            blocks: (0..config.blocks).map(|_| Block::init(&config, rng)).collect(),
            ln_f: LayerNorm::new(d),
            head: Linear::init(d, config.patch_dim(), 0.1, rng),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Calls `f(name, values, shape)` for every parameter tensor in checkpoint order.
    pub fn visit(&self, mut f: impl FnMut(&str, &[f32], &[usize])) {
        visit_tensors!(self, f, as_slice, iter);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut [f32], &[usize])) {
        visit_tensors!(self, f, as_slice_mut, iter_mut);
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, v, _| n += v.len());
        n
    }

    fn check_inputs(&self, x: &ArrayView2<f32>, t: &[usize], classes: &[usize]) -> Result<()> {
        if x.ncols() != self.config.pixels() {
            return Err(shape_err(format!("{} pixels", self.config.pixels()), format!("{} columns", x.ncols())));
        }
        if t.len() != x.nrows() || classes.len() != x.nrows() {
            return Err(shape_err(
                format!("{} timesteps and classes", x.nrows()),
                format!("{} and {}", t.len(), classes.len()),
            ));
        }
        if let Some(&c) = classes.iter().find(|&&c| c > self.config.null_class()) {
            return Err(Error::Parameter(format!("class {c} out of range")));
        }
        Ok(())
    }

    /// Predicted noise for a batch of flattened images `x` (`[batch, pixels]`).
    pub fn forward(&self, x: ArrayView2<f32>, t: &[usize], classes: &[usize]) -> Result<Array2<f32>> {
        Ok(self.forward_cached(x, t, classes)?.0)
    }

    pub fn forward_cached(&self, x: ArrayView2<f32>, t: &[usize], classes: &[usize]) -> Result<(Array2<f32>, ForwardCache)> {
        self.check_inputs(&x, t, classes)?;
        let cfg = &self.config;
        let n_tok = cfg.tokens();
        let tokens = patchify(x, cfg);
        let temb = timestep_embedding(t, cfg.d_model);
        let time_pre = self.time_fc1.forward(temb.view());
        let time_act = time_pre.mapv(silu);
        let mut cond = self.time_fc2.forward(time_act.view());
        for (mut row, &c) in cond.rows_mut().into_iter().zip(classes) {
            row += &self.class_embed.row(c);
        }

        let mut h = self.patch_embed.forward(tokens.view());
        for (r, mut row) in h.rows_mut().into_iter().enumerate() {
            row += &self.pos_embed.row(r % n_tok);
            row += &cond.row(r / n_tok);
        }

        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (a, ln1) = block.ln1.forward(h.view());
            let (concat, qkv, probs) = block.attention_heads(a.view(), cfg.heads, n_tok);
            h += &block.out_proj.forward(concat.view());
            let (m, ln2) = block.ln2.forward(h.view());
            let pre_act = block.mlp_up.forward(m.view());
            let hidden = pre_act.mapv(gelu);
            h += &block.mlp_down.forward(hidden.view());
            caches.push(BlockCache { ln1, a, qkv, probs, concat, ln2, m, pre_act, hidden });
        }
        let (f, ln_f) = self.ln_f.forward(h.view());
        let out_tokens = self.head.forward(f.view());
        let out = unpatchify(out_tokens.view(), cfg, x.nrows());
        let cache = ForwardCache {
            tokens,
            temb,
            time_pre,
            time_act,
            classes: classes.to_vec(),
            blocks: caches,
            ln_f,
            f,
        };
        Ok((out, cache))
    }

    /// Gradients of a scalar loss given `dL/d(output)`, returned as a model-shaped tree.
    pub fn backward(&self, cache: &ForwardCache, d_out: ArrayView2<f32>) -> Denoiser {
        let cfg = &self.config;
        let n_tok = cfg.tokens();
        let heads = cfg.heads;
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f32).sqrt();
        let mut grad = Denoiser::zeros(*cfg).expect("validated config");

        let d_tok = patchify(d_out, cfg);
        let df = self.head.backward(cache.f.view(), d_tok.view(), &mut grad.head);
        let mut dh_res = self.ln_f.backward(&cache.ln_f, df.view(), &mut grad.ln_f);

        for (i, block) in self.blocks.iter().enumerate().rev() {
            let c = &cache.blocks[i];
            let g = &mut grad.blocks[i];
            // MLP sublayer
            let mut d_hidden = block.mlp_down.backward(c.hidden.view(), dh_res.view(), &mut g.mlp_down);
            Zip::from(&mut d_hidden).and(&c.pre_act).for_each(|dg, &u| *dg *= gelu_grad(u));
            let dm = block.mlp_up.backward(c.m.view(), d_hidden.view(), &mut g.mlp_up);
            dh_res += &block.ln2.backward(&c.ln2, dm.view(), &mut g.ln2);

            // attention sublayer
            let d_concat = block.out_proj.backward(c.concat.view(), dh_res.view(), &mut g.out_proj);
            let mut d_qkv = Array2::<f32>::zeros(c.qkv.raw_dim());
            let items = c.a.nrows() / n_tok;
            for b in 0..items {
                let rows = b * n_tok..(b + 1) * n_tok;
                for h in 0..heads {
                    let p = &c.probs[b * heads + h];
                    let qs = s![rows.clone(), h * dh..(h + 1) * dh];
                    let ks = s![rows.clone(), d + h * dh..d + (h + 1) * dh];
                    let vs = s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh];
                    let q = c.qkv.slice(qs);
                    let k = c.qkv.slice(ks);
                    let v = c.qkv.slice(vs);
                    let d_o = d_concat.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                    let dp = d_o.dot(&v.t());
                    let dv = p.t().dot(&d_o);
                    let mut ds = &dp * p;
                    for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                        let dot = row.sum();
                        Zip::from(&mut row).and(prow).for_each(|x, &pp| *x -= pp * dot);
                    }
                    ds *= scale;
                    d_qkv.slice_mut(qs).assign(&ds.dot(&k));
                    d_qkv.slice_mut(ks).assign(&ds.t().dot(&q));
                    d_qkv.slice_mut(vs).assign(&dv);
                }
            }
            let da = block.qkv.backward(c.a.view(), d_qkv.view(), &mut g.qkv);
            dh_res += &block.ln1.backward(&c.ln1, da.view(), &mut g.ln1);
        }

        // embeddings
        self.patch_embed.backward(cache.tokens.view(), dh_res.view(), &mut grad.patch_embed);
        let items = dh_res.nrows() / n_tok;
        let mut d_cond = Array2::<f32>::zeros((items, d));
        for (r, row) in dh_res.rows().into_iter().enumerate() {
            let mut pos = grad.pos_embed.row_mut(r % n_tok);
            pos += &row;
            let mut dc = d_cond.row_mut(r / n_tok);
            dc += &row;
        }
        for (row, &cls) in d_cond.rows().into_iter().zip(&cache.classes) {
            let mut ce = grad.class_embed.row_mut(cls);
            ce += &row;
        }
        let mut d_act = self.time_fc2.backward(cache.time_act.view(), d_cond.view(), &mut grad.time_fc2);
        Zip::from(&mut d_act).and(&cache.time_pre).for_each(|g, &z| *g *= silu_grad(z));
        self.time_fc1.backward(cache.temb.view(), d_act.view(), &mut grad.time_fc1);
        grad
    }

    /// Heads still active in block `i` (an out-projection column group that is not all zero).
    pub fn active_heads(&self, i: usize) -> usize {
        let dh = self.config.head_dim();
        let w = &self.blocks[i].out_proj.weight;
        (0..self.config.heads)
            .filter(|h| w.slice(s![.., h * dh..(h + 1) * dh]).iter().any(|&v| v != 0.0))
            .count()
    }

    /// Hidden MLP neurons still active in block `i`.
    pub fn active_neurons(&self, i: usize) -> usize {
        let w = &self.blocks[i].mlp_down.weight;
        w.columns().into_iter().filter(|c| c.iter().any(|&v| v != 0.0)).count()
    }
}

/// `[batch, pixels]` → `[batch·tokens, patch_dim]`.
pub fn patchify(x: ArrayView2<f32>, cfg: &ModelConfig) -> Array2<f32> {
    let (p, side, img) = (cfg.patch, cfg.image_size / cfg.patch, cfg.image_size);
    let n_tok = cfg.tokens();
    Array2::from_shape_fn((x.nrows() * n_tok, cfg.patch_dim()), |(r, e)| {
        let (b, n) = (r / n_tok, r % n_tok);
        let (pi, pj) = (n / side, n % side);
        let (c, rest) = (e / (p * p), e % (p * p));
        let (di, dj) = (rest / p, rest % p);
        x[[b, c * img * img + (pi * p + di) * img + pj * p + dj]]
    })
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: ArrayView2<f32>, cfg: &ModelConfig, batch: usize) -> Array2<f32> {
    let (p, side, img) = (cfg.patch, cfg.image_size / cfg.patch, cfg.image_size);
    let n_tok = cfg.tokens();
    Array2::from_shape_fn((batch, cfg.pixels()), |(b, pix)| {
        let (c, rest) = (pix / (img * img), pix % (img * img));
        let (i, j) = (rest / img, rest % img);
        let n = (i / p) * side + j / p;
        let e = c * p * p + (i % p) * p + j % p;
        tokens[[b * n_tok + n, e]]
    })
}

/// Stacks two batches row-wise.
pub(crate) fn stack(a: ArrayView2<f32>, b: ArrayView2<f32>) -> Array2<f32> {
    concatenate(Axis(0), &[a, b]).expect("matching widths")
}
