//! Toy encoder-only transformer denoiser over the packed multi-segment sequence.
//!
//! ```text
//! text rows : text_embed[id]
//! video rows: z_in . W_in + b_in
//! every row : + pos_embed[row] + time_mlp(sinusoid(t[scene of row]))
//! depth x   : h += attn(LN1(h));  h += W2 . gelu(W1 . LN2(h) + b1) + b2
//! output    : video rows of h . W_out + b_out
//! ```
//!
//! The timestep embedding is per segment, so context segments can sit at `t = 0`
//! while the segment being generated is noised. Gradients are derived by hand.

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::attention::{
    attention_backward, attention_forward, AttentionCache, AttentionError, AttentionRouting,
    AttentionWeights,
};
use crate::checkpoint::{self, CheckpointError, Tensor};
use crate::diffusion::{forward_perturb, velocity_target, DiffusionError, NoiseSchedule};
use crate::mask::{ConditionalMask, SegmentLayout};
use crate::num::{randn, Real};
use crate::training::{masked_v_loss, masked_v_loss_grad, LossError};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("layout mismatch: {0}")]
    Layout(String),
    #[error("text id {id} outside vocabulary of {vocab}")]
    Vocab { id: usize, vocab: usize },
    #[error("timestep {t} exceeds schedule length {max}")]
    Timestep { t: usize, max: usize },
    #[error("sequence length {len} exceeds positional table of {max}")]
    TooLong { len: usize, max: usize },
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub text_vocab: usize,
    /// Width of a video latent token.
    pub token_dim: usize,
    /// Largest timestep the model is conditioned on.
    pub max_t: usize,
    /// Rows of the positional embedding table.
    pub max_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let c = self;
        if c.dim == 0 || c.heads == 0 || c.text_vocab == 0 || c.token_dim == 0 || c.max_len == 0 || c.max_t == 0 {
            return Err(ModelError::Config("all sizes must be positive".into()));
        }
        if c.dim % c.heads != 0 {
            return Err(ModelError::Config(format!("dim {} not divisible by heads {}", c.dim, c.heads)));
        }
        if c.dim % 2 != 0 {
            return Err(ModelError::Config(format!("dim {} must be even for sinusoidal timestep features", c.dim)));
        }
        Ok(())
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<F> {
    pub ln1_g: Array1<F>,
    pub ln1_b: Array1<F>,
    pub attn: AttentionWeights<F>,
    pub ln2_g: Array1<F>,
    pub ln2_b: Array1<F>,
    pub mlp_w1: Array2<F>,
    pub mlp_b1: Array1<F>,
    pub mlp_w2: Array2<F>,
    pub mlp_b2: Array1<F>,
}

/// Model weights. The same type doubles as the gradient set.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub text_embed: Array2<F>,
    pub video_in_w: Array2<F>,
    pub video_in_b: Array1<F>,
    pub pos_embed: Array2<F>,
    pub time_w1: Array2<F>,
    pub time_b1: Array1<F>,
    pub time_w2: Array2<F>,
    pub time_b2: Array1<F>,
    pub blocks: Vec<BlockParams<F>>,
    pub video_out_w: Array2<F>,
    pub video_out_b: Array1<F>,
}

fn ones<F: Real>(n: usize) -> Array1<F> {
    Array1::from_elem(n, F::one())
}

impl<F: Real> ModelParams<F> {
    pub fn zeros(config: ModelConfig) -> Self {
        let c = config;
        let (d, m) = (c.dim, c.mlp_dim());
        let z2 = |r, k| Array2::<F>::zeros((r, k));
        let z1 = |n| Array1::<F>::zeros(n);
        ModelParams {
            config,
            text_embed: z2(c.text_vocab, d),
            video_in_w: z2(c.token_dim, d),
            video_in_b: z1(d),
            pos_embed: z2(c.max_len, d),
            time_w1: z2(d, d),
            time_b1: z1(d),
            time_w2: z2(d, d),
            time_b2: z1(d),
            blocks: (0..c.depth)
                .map(|_| BlockParams {
                    ln1_g: z1(d),
                    ln1_b: z1(d),
                    attn: AttentionWeights {
                        heads: c.heads,
                        wq: z2(d, d),
                        wk: z2(d, d),
                        wv: z2(d, d),
                        wo: z2(d, d),
                    },
                    ln2_g: z1(d),
                    ln2_b: z1(d),
                    mlp_w1: z2(d, m),
                    mlp_b1: z1(m),
                    mlp_w2: z2(m, d),
                    mlp_b2: z1(d),
                })
                .collect(),
            video_out_w: z2(d, c.token_dim),
            video_out_b: z1(c.token_dim),
        }
    }

    /// Every tensor with its checkpoint name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = vec![
            ("text_embed".to_string(), self.text_embed.view().into_dyn()),
            ("video_in.w".to_string(), self.video_in_w.view().into_dyn()),
            ("video_in.b".to_string(), self.video_in_b.view().into_dyn()),
            ("pos_embed".to_string(), self.pos_embed.view().into_dyn()),
            ("time.w1".to_string(), self.time_w1.view().into_dyn()),
            ("time.b1".to_string(), self.time_b1.view().into_dyn()),
            ("time.w2".to_string(), self.time_w2.view().into_dyn()),
            ("time.b2".to_string(), self.time_b2.view().into_dyn()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("blocks.{i}.{n}");
            out.extend([
                (p("ln1.g"), b.ln1_g.view().into_dyn()),
                (p("ln1.b"), b.ln1_b.view().into_dyn()),
                (p("attn.wq"), b.attn.wq.view().into_dyn()),
                (p("attn.wk"), b.attn.wk.view().into_dyn()),
                (p("attn.wv"), b.attn.wv.view().into_dyn()),
                (p("attn.wo"), b.attn.wo.view().into_dyn()),
                (p("ln2.g"), b.ln2_g.view().into_dyn()),
                (p("ln2.b"), b.ln2_b.view().into_dyn()),
                (p("mlp.w1"), b.mlp_w1.view().into_dyn()),
                (p("mlp.b1"), b.mlp_b1.view().into_dyn()),
                (p("mlp.w2"), b.mlp_w2.view().into_dyn()),
                (p("mlp.b2"), b.mlp_b2.view().into_dyn()),
            ]);
        }
        out.push(("video_out.w".to_string(), self.video_out_w.view().into_dyn()));
        out.push(("video_out.b".to_string(), self.video_out_b.view().into_dyn()));
        out
    }

    /// Mutable views in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, F>> {
        let mut out = vec![
            self.text_embed.view_mut().into_dyn(),
            self.video_in_w.view_mut().into_dyn(),
            self.video_in_b.view_mut().into_dyn(),
            self.pos_embed.view_mut().into_dyn(),
            self.time_w1.view_mut().into_dyn(),
            self.time_b1.view_mut().into_dyn(),
            self.time_w2.view_mut().into_dyn(),
            self.time_b2.view_mut().into_dyn(),
        ];
        for b in self.blocks.iter_mut() {
            out.extend([
                b.ln1_g.view_mut().into_dyn(),
                b.ln1_b.view_mut().into_dyn(),
                b.attn.wq.view_mut().into_dyn(),
                b.attn.wk.view_mut().into_dyn(),
                b.attn.wv.view_mut().into_dyn(),
                b.attn.wo.view_mut().into_dyn(),
                b.ln2_g.view_mut().into_dyn(),
                b.ln2_b.view_mut().into_dyn(),
                b.mlp_w1.view_mut().into_dyn(),
                b.mlp_b1.view_mut().into_dyn(),
                b.mlp_w2.view_mut().into_dyn(),
                b.mlp_b2.view_mut().into_dyn(),
            ]);
        }
        out.push(self.video_out_w.view_mut().into_dyn());
        out.push(self.video_out_b.view_mut().into_dyn());
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += other * scale`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        for (mut dst, (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            Zip::from(&mut dst).and(&src).for_each(|d, &s| *d += s * scale);
        }
    }

    pub fn scale(&mut self, factor: F) {
        for mut t in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn l2_norm(&self) -> F {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter().copied())
            .fold(F::zero(), |acc, v| acc + v * v)
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .flat_map(|((_, a), (_, b))| a.iter().zip(b.iter()).map(|(&x, &y)| (x - y).abs()).collect::<Vec<_>>())
            .fold(F::zero(), F::max)
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        let mut out = ModelParams::<G>::zeros(self.config);
        for (mut dst, (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            Zip::from(&mut dst).and(&src).for_each(|d, &s| *d = G::lit(s.to_f64().unwrap()));
        }
        out
    }

    /// Container tensors: every parameter plus `meta.heads` and `meta.max_t`.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = self
            .tensors()
            .into_iter()
            .map(|(name, t)| Tensor {
                name,
                dims: t.shape().iter().map(|&d| d as u64).collect(),
                data: t.iter().map(|v| v.to_f32().unwrap()).collect(),
            })
            .collect();
        out.push(Tensor::scalar("meta.heads", self.config.heads as f32));
        out.push(Tensor::scalar("meta.max_t", self.config.max_t as f32));
        out
    }

    /// Rebuilds parameters from container tensors; the config is inferred from shapes.
    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self, ModelError> {
        let shape = |name: &str| -> Result<Vec<u64>, ModelError> { Ok(checkpoint::find(tensors, name)?.dims.clone()) };
        let scalar = |name: &str| -> Result<usize, ModelError> { Ok(checkpoint::find(tensors, name)?.data[0] as usize) };
        let embed = shape("text_embed")?;
        let vin = shape("video_in.w")?;
        let pos = shape("pos_embed")?;
        if embed.len() != 2 || vin.len() != 2 || pos.len() != 2 {
            return Err(ModelError::Config("embedding tensors must be rank 2".into()));
        }
        let depth = (0..).take_while(|i| checkpoint::find(tensors, &format!("blocks.{i}.attn.wq")).is_ok()).count();
        let config = ModelConfig {
            depth,
            dim: embed[1] as usize,
            heads: scalar("meta.heads")?,
            text_vocab: embed[0] as usize,
            token_dim: vin[0] as usize,
            max_t: scalar("meta.max_t")?,
            max_len: pos[0] as usize,
        };
        config.validate()?;
        let mut params = Self::zeros(config);
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        for (name, mut dst) in names.iter().zip(params.tensors_mut()) {
            let src = checkpoint::find(tensors, name)?;
            let expected: Vec<u64> = dst.shape().iter().map(|&d| d as u64).collect();
            if src.dims != expected {
                return Err(CheckpointError::Shape { name: name.clone(), got: src.dims.clone(), expected }.into());
            }
            for (d, &s) in dst.iter_mut().zip(&src.data) {
                *d = F::lit(s as f64);
            }
        }
        Ok(params)
    }
}

/// Deterministic initialization: projections are Gaussian with standard deviation
/// `1/sqrt(fan_in)`, embeddings standard normal (positional at 0.1), layer-norm
/// gains one, biases zero, and each block's output projections (`attn.wo`,
/// `mlp.w2`) zero so every block starts as the identity.
pub fn init_params<F: Real>(config: ModelConfig, seed: u64) -> Result<ModelParams<F>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = config;
    let (d, m) = (c.dim, c.mlp_dim());
    let fan = |n: usize| 1.0 / (n as f64).sqrt();
    let mut p = ModelParams::<F>::zeros(config);
    p.text_embed = randn(&mut rng, c.text_vocab, d, 1.0);
    p.video_in_w = randn(&mut rng, c.token_dim, d, fan(c.token_dim));
    p.pos_embed = randn(&mut rng, c.max_len, d, 0.1);
    p.time_w1 = randn(&mut rng, d, d, fan(d));
    p.time_w2 = randn(&mut rng, d, d, fan(d));
    for b in p.blocks.iter_mut() {
        b.ln1_g = ones(d);
        b.ln2_g = ones(d);
        b.attn.wq = randn(&mut rng, d, d, fan(d));
        b.attn.wk = randn(&mut rng, d, d, fan(d));
        b.attn.wv = randn(&mut rng, d, d, fan(d));
        b.mlp_w1 = randn(&mut rng, d, m, fan(d));
    }
    p.video_out_w = randn(&mut rng, d, c.token_dim, fan(d));
    Ok(p)
}

/// Like [`init_params`] but every tensor, including biases, gains and the zero-initialized
/// block outputs, is perturbed with Gaussian noise of standard deviation `jitter`, so
/// every parameter carries signal. Used for gradient checks and leakage probes.
pub fn init_params_dense<F: Real>(config: ModelConfig, seed: u64, jitter: f64) -> Result<ModelParams<F>, ModelError> {
    let mut p = init_params::<F>(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for mut t in p.tensors_mut() {
        for v in t.iter_mut() {
            let z: f64 = rand::Rng::sample(&mut rng, rand_distr::StandardNormal);
            *v += F::lit(z * jitter);
        }
    }
    Ok(p)
}

/// Model inputs for one packed sequence.
#[derive(Debug, Clone, Copy)]
pub struct SequenceInput<'a, F> {
    /// Token ids of each segment's text group.
    pub text_ids: &'a [Vec<usize>],
    /// Video latents of all segments stacked in scene order (`sum(video_lens) x token_dim`).
    pub video: ArrayView2<'a, F>,
    /// Timestep of each segment.
    pub timesteps: &'a [usize],
}

fn check_input<F: Real>(p: &ModelParams<F>, layout: &SegmentLayout, input: &SequenceInput<'_, F>) -> Result<(), ModelError> {
    let c = &p.config;
    let n = layout.n();
    if input.text_ids.len() != n || input.timesteps.len() != n {
        return Err(ModelError::Layout(format!(
            "{} text groups and {} timesteps for {} scenes",
            input.text_ids.len(),
            input.timesteps.len(),
            n
        )));
    }
    for (i, ids) in input.text_ids.iter().enumerate() {
        if ids.len() != layout.text_lens()[i] {
            return Err(ModelError::Layout(format!(
                "scene {i} has {} text ids, layout expects {}",
                ids.len(),
                layout.text_lens()[i]
            )));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= c.text_vocab) {
            return Err(ModelError::Vocab { id, vocab: c.text_vocab });
        }
    }
    if input.video.dim() != (layout.video_total(), c.token_dim) {
        return Err(ModelError::Layout(format!(
            "video latents {:?}, layout expects ({}, {})",
            input.video.dim(),
            layout.video_total(),
            c.token_dim
        )));
    }
    if let Some(&t) = input.timesteps.iter().find(|&&t| t > c.max_t) {
        return Err(ModelError::Timestep { t, max: c.max_t });
    }
    if layout.total_len() > c.max_len {
        return Err(ModelError::TooLong { len: layout.total_len(), max: c.max_len });
    }
    Ok(())
}

/// Sinusoidal features of each timestep, `[sin(t w_i) | cos(t w_i)]`.
fn timestep_features<F: Real>(timesteps: &[usize], dim: usize) -> Array2<F> {
    let half = dim / 2;
    Array2::from_shape_fn((timesteps.len(), dim), |(r, c)| {
        let i = c % half;
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = timesteps[r] as f64 * freq;
        F::lit(if c < half { arg.sin() } else { arg.cos() })
    })
}

fn silu<F: Real>(x: F) -> F {
    x / (F::one() + (-x).exp())
}

fn silu_grad<F: Real>(x: F) -> F {
    let s = F::one() / (F::one() + (-x).exp());
    s * (F::one() + x * (F::one() - s))
}

fn gelu_consts<F: Real>() -> (F, F) {
    (F::lit((2.0 / std::f64::consts::PI).sqrt()), F::lit(0.044715))
}

fn gelu<F: Real>(x: F) -> F {
    let (c, k) = gelu_consts::<F>();
    let half = F::lit(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let (c, k) = gelu_consts::<F>();
    let half = F::lit(0.5);
    let th = (c * (x + k * x * x * x)).tanh();
    half * (F::one() + th) + half * x * (F::one() - th * th) * c * (F::one() + F::lit(3.0) * k * x * x)
}

struct LayerNormCache<F> {
    normed: Array2<F>,
    rstd: Array1<F>,
}

fn layer_norm<F: Real>(x: &Array2<F>, g: &Array1<F>, b: &Array1<F>) -> (Array2<F>, LayerNormCache<F>) {
    let width = F::lit(x.ncols() as f64);
    let mut normed = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in normed.axis_iter_mut(Axis(0)).zip(rstd.iter_mut()) {
        let mean = row.sum() / width;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().fold(F::zero(), |a, &v| a + v * v) / width;
        *r = F::one() / (var + F::lit(LN_EPS)).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let out = &normed * g + b;
    (out, LayerNormCache { normed, rstd })
}

/// Returns `dx`, accumulating `dg` and `db`.
fn layer_norm_backward<F: Real>(
    cache: &LayerNormCache<F>,
    g: &Array1<F>,
    dy: &Array2<F>,
    dg: &mut Array1<F>,
    db: &mut Array1<F>,
) -> Array2<F> {
    *dg += &(dy * &cache.normed).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let width = F::lit(dy.ncols() as f64);
    let mut dx = dy * g;
    for ((mut row, xhat), &rs) in dx.axis_iter_mut(Axis(0)).zip(cache.normed.axis_iter(Axis(0))).zip(&cache.rstd) {
        let mean_d = row.sum() / width;
        let mean_dx = row.iter().zip(xhat.iter()).fold(F::zero(), |a, (&d, &x)| a + d * x) / width;
        Zip::from(&mut row).and(&xhat).for_each(|d, &x| *d = rs * (*d - mean_d - x * mean_dx));
    }
    dx
}

struct BlockCache<F> {
    ln1: LayerNormCache<F>,
    attn: AttentionCache<F>,
    ln2: LayerNormCache<F>,
    mlp_in: Array2<F>,
    pre_act: Array2<F>,
    act: Array2<F>,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache<F> {
    scene_of_row: Vec<usize>,
    time_feat: Array2<F>,
    time_pre: Array2<F>,
    time_act: Array2<F>,
    blocks: Vec<BlockCache<F>>,
    final_hidden: Array2<F>,
}

fn forward_impl<F: Real>(
    p: &ModelParams<F>,
    layout: &SegmentLayout,
    routing: AttentionRouting<'_>,
    input: &SequenceInput<'_, F>,
    layers: usize,
) -> Result<(Array2<F>, ForwardCache<F>), ModelError> {
    check_input(p, layout, input)?;
    if routing.len() != layout.total_len() {
        return Err(ModelError::Layout(format!(
            "attention routing covers {} tokens, layout has {}",
            routing.len(),
            layout.total_len()
        )));
    }
    let len = layout.total_len();
    let dim = p.config.dim;
    let text_total = layout.text_total();

    let mut h = Array2::<F>::zeros((len, dim));
    for scene in 0..layout.n() {
        for (row, &id) in layout.text_span(scene).zip(&input.text_ids[scene]) {
            h.row_mut(row).assign(&p.text_embed.row(id));
        }
    }
    let video_h = input.video.dot(&p.video_in_w) + &p.video_in_b;
    h.slice_mut(s![text_total.., ..]).assign(&video_h);
    h += &p.pos_embed.slice(s![..len, ..]);

    let time_feat = timestep_features::<F>(input.timesteps, dim);
    let time_pre = time_feat.dot(&p.time_w1) + &p.time_b1;
    let time_act = time_pre.mapv(silu);
    let time_emb = time_act.dot(&p.time_w2) + &p.time_b2;
    let scene_of_row = layout.scene_of_tokens();
    for (mut row, &scene) in h.axis_iter_mut(Axis(0)).zip(&scene_of_row) {
        row += &time_emb.row(scene);
    }

    let mut caches = Vec::with_capacity(layers);
    for b in p.blocks.iter().take(layers) {
        let (a, ln1) = layer_norm(&h, &b.ln1_g, &b.ln1_b);
        let (att, attn) = attention_forward(a.view(), &b.attn, routing)?;
        h += &att;
        let (mlp_in, ln2) = layer_norm(&h, &b.ln2_g, &b.ln2_b);
        let pre_act = mlp_in.dot(&b.mlp_w1) + &b.mlp_b1;
        let act = pre_act.mapv(gelu);
        h += &(act.dot(&b.mlp_w2) + &b.mlp_b2);
        caches.push(BlockCache { ln1, attn, ln2, mlp_in, pre_act, act });
    }

    let out = h.slice(s![text_total.., ..]).dot(&p.video_out_w) + &p.video_out_b;
    let cache = ForwardCache {
        scene_of_row,
        time_feat,
        time_pre,
        time_act,
        blocks: caches,
        final_hidden: h,
    };
    Ok((out, cache))
}

/// Predicted velocity for every video row (`sum(video_lens) x token_dim`).
pub fn forward<F: Real>(
    params: &ModelParams<F>,
    layout: &SegmentLayout,
    routing: AttentionRouting<'_>,
    input: &SequenceInput<'_, F>,
) -> Result<Array2<F>, ModelError> {
    forward_impl(params, layout, routing, input, params.blocks.len()).map(|(out, _)| out)
}

/// Forward pass through only the first `layers` blocks.
pub fn forward_truncated<F: Real>(
    params: &ModelParams<F>,
    layout: &SegmentLayout,
    routing: AttentionRouting<'_>,
    input: &SequenceInput<'_, F>,
    layers: usize,
) -> Result<Array2<F>, ModelError> {
    forward_impl(params, layout, routing, input, layers.min(params.blocks.len())).map(|(out, _)| out)
}

pub fn forward_with_cache<F: Real>(
    params: &ModelParams<F>,
    layout: &SegmentLayout,
    routing: AttentionRouting<'_>,
    input: &SequenceInput<'_, F>,
) -> Result<(Array2<F>, ForwardCache<F>), ModelError> {
    forward_impl(params, layout, routing, input, params.blocks.len())
}

/// Parameter gradients given `d_out = dLoss/d(output)`.
pub fn backward<F: Real>(
    p: &ModelParams<F>,
    layout: &SegmentLayout,
    routing: AttentionRouting<'_>,
    input: &SequenceInput<'_, F>,
    cache: &ForwardCache<F>,
    d_out: ArrayView2<F>,
) -> ModelParams<F> {
    let mut g = ModelParams::<F>::zeros(p.config);
    let text_total = layout.text_total();
    let video_hidden = cache.final_hidden.slice(s![text_total.., ..]);
    g.video_out_w = video_hidden.t().dot(&d_out);
    g.video_out_b = d_out.sum_axis(Axis(0));

    let mut dh = Array2::<F>::zeros(cache.final_hidden.raw_dim());
    dh.slice_mut(s![text_total.., ..]).assign(&d_out.dot(&p.video_out_w.t()));

    for (i, (b, c)) in p.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let gb = &mut g.blocks[i];
        gb.mlp_w2 = c.act.t().dot(&dh);
        gb.mlp_b2 = dh.sum_axis(Axis(0));
        let mut d_pre = dh.dot(&b.mlp_w2.t());
        Zip::from(&mut d_pre).and(&c.pre_act).for_each(|d, &u| *d = *d * gelu_grad(u));
        gb.mlp_w1 = c.mlp_in.t().dot(&d_pre);
        gb.mlp_b1 = d_pre.sum_axis(Axis(0));
        let d_mlp_in = d_pre.dot(&b.mlp_w1.t());
        dh += &layer_norm_backward(&c.ln2, &b.ln2_g, &d_mlp_in, &mut gb.ln2_g, &mut gb.ln2_b);

        let ag = attention_backward(&c.attn, &b.attn, routing, dh.view());
        gb.attn.wq = ag.wq;
        gb.attn.wk = ag.wk;
        gb.attn.wv = ag.wv;
        gb.attn.wo = ag.wo;
        dh += &layer_norm_backward(&c.ln1, &b.ln1_g, &ag.dx, &mut gb.ln1_g, &mut gb.ln1_b);
    }

    let len = layout.total_len();
    g.pos_embed.slice_mut(s![..len, ..]).assign(&dh);

    let mut d_time = Array2::<F>::zeros(cache.time_pre.raw_dim());
    for (row, &scene) in dh.axis_iter(Axis(0)).zip(&cache.scene_of_row) {
        let mut acc = d_time.row_mut(scene);
        acc += &row;
    }
    g.time_w2 = cache.time_act.t().dot(&d_time);
    g.time_b2 = d_time.sum_axis(Axis(0));
    let mut d_time_pre = d_time.dot(&p.time_w2.t());
    Zip::from(&mut d_time_pre).and(&cache.time_pre).for_each(|d, &x| *d = *d * silu_grad(x));
    g.time_w1 = cache.time_feat.t().dot(&d_time_pre);
    g.time_b1 = d_time_pre.sum_axis(Axis(0));

    for scene in 0..layout.n() {
        for (row, &id) in layout.text_span(scene).zip(&input.text_ids[scene]) {
            let mut acc = g.text_embed.row_mut(id);
            acc += &dh.row(row);
        }
    }
    let d_video = dh.slice(s![text_total.., ..]);
    g.video_in_w = input.video.t().dot(&d_video);
    g.video_in_b = d_video.sum_axis(Axis(0));
    g
}

/// One packed training sample: clean latents, the noise that perturbs them, the
/// timestep of every segment and the segments that contribute to the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSample<F> {
    pub text_ids: Vec<Vec<usize>>,
    /// Clean video latents of all segments stacked in scene order.
    pub clean: Array2<F>,
    /// Standard normal noise, same shape as `clean`.
    pub eps: Array2<F>,
    pub timesteps: Vec<usize>,
    pub loss_mask: ConditionalMask,
}

impl<F: Real> BatchSample<F> {
    /// Model input: segments at `t = 0` are copied verbatim from the clean latents,
    /// all others are perturbed with `eps` at their timestep.
    pub fn noised_input(&self, layout: &SegmentLayout, sched: &NoiseSchedule) -> Result<Array2<F>, ModelError> {
        let mut z = self.clean.clone();
        for scene in 0..layout.n() {
            let t = self.timesteps[scene];
            if t == 0 {
                continue;
            }
            let rows = layout.video_rows(scene);
            let noised = forward_perturb(
                self.clean.slice(s![rows.clone(), ..]),
                self.eps.slice(s![rows.clone(), ..]),
                t,
                sched,
            )?;
            z.slice_mut(s![rows, ..]).assign(&noised);
        }
        Ok(z)
    }

    pub fn velocity(&self, layout: &SegmentLayout, sched: &NoiseSchedule) -> Result<Array2<F>, ModelError> {
        let mut v = Array2::zeros(self.clean.raw_dim());
        for scene in 0..layout.n() {
            let rows = layout.video_rows(scene);
            let target = velocity_target(
                self.clean.slice(s![rows.clone(), ..]),
                self.eps.slice(s![rows.clone(), ..]),
                self.timesteps[scene],
                sched,
            )?;
            v.slice_mut(s![rows, ..]).assign(&target);
        }
        Ok(v)
    }
}

/// Per-sample loss and gradients (no batch reduction).
pub fn sample_loss_and_grads<F: Real>(
    params: &ModelParams<F>,
    layout: &SegmentLayout,
    routing: AttentionRouting<'_>,
    sample: &BatchSample<F>,
    sched: &NoiseSchedule,
) -> Result<(F, ModelParams<F>), ModelError> {
    let z_in = sample.noised_input(layout, sched)?;
    let target = sample.velocity(layout, sched)?;
    let input = SequenceInput {
        text_ids: &sample.text_ids,
        video: z_in.view(),
        timesteps: &sample.timesteps,
    };
    let (pred, cache) = forward_with_cache(params, layout, routing, &input)?;
    let loss = masked_v_loss(pred.view(), target.view(), &sample.loss_mask, layout)?;
    let d_out = masked_v_loss_grad(pred.view(), target.view(), &sample.loss_mask, layout)?;
    let grads = backward(params, layout, routing, &input, &cache, d_out.view());
    Ok((loss, grads))
}

/// Batch-mean masked v-prediction loss and its exact gradient.
///
/// Samples are processed in parallel; the reduction runs in sample order so the
/// result is bitwise reproducible regardless of thread count.
pub fn loss_and_grads<F: Real>(
    params: &ModelParams<F>,
    layout: &SegmentLayout,
    routing: AttentionRouting<'_>,
    batch: &[BatchSample<F>],
    sched: &NoiseSchedule,
) -> Result<(F, ModelParams<F>), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let per_sample: Vec<(F, ModelParams<F>)> = batch
        .par_iter()
        .map(|s| sample_loss_and_grads(params, layout, routing, s, sched))
        .collect::<Result<_, _>>()?;
    let inv = F::one() / F::lit(batch.len() as f64);
    let mut loss = F::zero();
    let mut grads = ModelParams::<F>::zeros(params.config);
    for (l, g) in &per_sample {
        loss += *l;
        grads.add_scaled(g, F::one());
    }
    loss = loss * inv;
    grads.scale(inv);
    if !loss.is_finite() {
        return Err(ModelError::NonFiniteLoss);
    }
    Ok((loss, grads))
}
