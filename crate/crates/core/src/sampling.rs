//! Deterministic generation: all `n` scenes jointly, or one scene conditioned on
//! `n - 1` clean predecessors held at `t = 0`.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attention::AttentionRouting;
use crate::checkpoint::{self, CheckpointError, Tensor};
use crate::diffusion::{ddim_step, DiffusionError, NoiseSchedule};
use crate::mask::{build_grouped_plan, GroupedPlan, MaskVariant, SegmentLayout};
use crate::model::{forward, ModelError, ModelParams, SequenceInput};
use crate::num::randn;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("expected {expected} {what}, got {got}")]
    Count { what: &'static str, expected: usize, got: usize },
    #[error("sampler steps must lie in 1..={max}, got {got}")]
    Steps { got: usize, max: usize },
    #[error("segment {index} has shape {got:?}, expected {expected:?}")]
    Shape {
        index: usize,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("prompt stream is empty")]
    NoPrompts,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Anything that predicts velocities for a packed sequence.
pub trait VelocityModel: Sync {
    fn layout(&self) -> &SegmentLayout;

    fn token_dim(&self) -> usize;

    /// Velocity for every video row given the per-segment timesteps.
    fn velocity(&self, text_ids: &[Vec<usize>], z: ArrayView2<f32>, timesteps: &[usize]) -> Result<Array2<f32>, SamplingError>;
}

/// A trained network evaluated through the grouped attention path.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub params: ModelParams<f32>,
    layout: SegmentLayout,
    plan: GroupedPlan,
}

impl Denoiser {
    pub fn new(params: ModelParams<f32>, layout: SegmentLayout, variant: MaskVariant) -> Self {
        let plan = build_grouped_plan(&layout, variant);
        Denoiser { params, layout, plan }
    }

    pub fn load(path: &Path, layout: SegmentLayout, variant: MaskVariant) -> Result<Self, SamplingError> {
        let params = ModelParams::from_tensors(&checkpoint::load(path)?)?;
        Ok(Self::new(params, layout, variant))
    }
}

impl VelocityModel for Denoiser {
    fn layout(&self) -> &SegmentLayout {
        &self.layout
    }

    fn token_dim(&self) -> usize {
        self.params.config.token_dim
    }

    fn velocity(&self, text_ids: &[Vec<usize>], z: ArrayView2<f32>, timesteps: &[usize]) -> Result<Array2<f32>, SamplingError> {
        let input = SequenceInput { text_ids, video: z.reborrow(), timesteps };
        Ok(forward(&self.params, &self.layout, AttentionRouting::Grouped(&self.plan), &input)?)
    }
}

/// The exact velocity toward known clean latents: `v = (sqrt(ab) z_t - z_V) / sqrt(1 - ab)`.
#[derive(Debug, Clone)]
pub struct OracleVelocity {
    layout: SegmentLayout,
    clean: Array2<f32>,
    schedule: NoiseSchedule,
}

impl OracleVelocity {
    pub fn new(layout: SegmentLayout, clean: Array2<f32>, schedule: NoiseSchedule) -> Self {
        OracleVelocity { layout, clean, schedule }
    }
}

impl VelocityModel for OracleVelocity {
    fn layout(&self) -> &SegmentLayout {
        &self.layout
    }

    fn token_dim(&self) -> usize {
        self.clean.ncols()
    }

    fn velocity(&self, _text_ids: &[Vec<usize>], z: ArrayView2<f32>, timesteps: &[usize]) -> Result<Array2<f32>, SamplingError> {
        let mut v = Array2::zeros(z.raw_dim());
        for (scene, &t) in timesteps.iter().enumerate() {
            if t == 0 {
                continue;
            }
            let (a, b) = self.schedule.coefficients(t)?;
            let (a, b) = (a as f32, b as f32);
            let rows = self.layout.video_rows(scene);
            ndarray::Zip::from(v.slice_mut(s![rows.clone(), ..]))
                .and(z.slice(s![rows.clone(), ..]))
                .and(self.clean.slice(s![rows, ..]))
                .for_each(|v, &z, &c| *v = (a * z - c) / b);
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    /// Inference steps on the uniform grid, `1..=T`.
    pub steps: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 50, seed: 0 }
    }
}

fn step_grid(cfg: &SamplerConfig, sched: &NoiseSchedule) -> Result<Vec<usize>, SamplingError> {
    if cfg.steps == 0 || cfg.steps > sched.steps() {
        return Err(SamplingError::Steps { got: cfg.steps, max: sched.steps() });
    }
    Ok(sched.uniform_grid(cfg.steps))
}

fn noise_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Splits stacked video rows back into per-scene segments.
pub fn split_segments(layout: &SegmentLayout, stacked: ArrayView2<f32>) -> Vec<Array2<f32>> {
    (0..layout.n()).map(|i| stacked.slice(s![layout.video_rows(i), ..]).to_owned()).collect()
}

/// Generates all `n` scenes from pure noise with one shared timestep.
pub fn generate_fixed<M: VelocityModel + ?Sized>(
    model: &M,
    prompts: &[Vec<usize>],
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Vec<Array2<f32>>, SamplingError> {
    let layout = model.layout();
    let n = layout.n();
    if prompts.len() != n {
        return Err(SamplingError::Count { what: "prompts", expected: n, got: prompts.len() });
    }
    let grid = step_grid(cfg, sched)?;
    let mut z: Array2<f32> = randn(&mut noise_rng(cfg.seed, 0), layout.video_total(), model.token_dim(), 1.0);
    for pair in grid.windows(2) {
        let v = model.velocity(prompts, z.view(), &vec![pair[0]; n])?;
        z = ddim_step(z.view(), v.view(), pair[0], pair[1], sched)?;
    }
    Ok(split_segments(layout, z.view()))
}

/// Generates the last scene while the `n - 1` context segments stay clean at `t = 0`.
///
/// Returns the whole window; its first `n - 1` segments are the context, unchanged.
pub fn extend_window<M: VelocityModel + ?Sized>(
    model: &M,
    context: &[ArrayView2<f32>],
    context_prompts: &[Vec<usize>],
    new_prompt: &[usize],
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Vec<Array2<f32>>, SamplingError> {
    extend_stream(model, context, context_prompts, new_prompt, cfg, sched, 0)
}

fn extend_stream<M: VelocityModel + ?Sized>(
    model: &M,
    context: &[ArrayView2<f32>],
    context_prompts: &[Vec<usize>],
    new_prompt: &[usize],
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    stream: u64,
) -> Result<Vec<Array2<f32>>, SamplingError> {
    let layout = model.layout();
    let n = layout.n();
    if context.len() + 1 != n {
        return Err(SamplingError::Count { what: "context segments", expected: n - 1, got: context.len() });
    }
    if context_prompts.len() != context.len() {
        return Err(SamplingError::Count { what: "context prompts", expected: context.len(), got: context_prompts.len() });
    }
    let width = model.token_dim();
    for (i, seg) in context.iter().enumerate() {
        let expected = (layout.video_lens()[i], width);
        if seg.dim() != expected {
            return Err(SamplingError::Shape { index: i, got: seg.dim(), expected });
        }
    }
    let grid = step_grid(cfg, sched)?;
    let last = layout.video_rows(n - 1);
    let mut prompts = context_prompts.to_vec();
    prompts.push(new_prompt.to_vec());

    let noise: Array2<f32> = randn(&mut noise_rng(cfg.seed, stream), last.len(), width, 1.0);
    let mut parts: Vec<ArrayView2<f32>> = context.iter().map(|c| c.reborrow()).collect();
    parts.push(noise.view());
    let mut z = concatenate(Axis(0), &parts).expect("segment widths checked");

    let mut timesteps = vec![0; n];
    for pair in grid.windows(2) {
        timesteps[n - 1] = pair[0];
        let v = model.velocity(&prompts, z.view(), &timesteps)?;
        let next = ddim_step(
            z.slice(s![last.clone(), ..]),
            v.slice(s![last.clone(), ..]),
            pair[0],
            pair[1],
            sched,
        )?;
        z.slice_mut(s![last.clone(), ..]).assign(&next);
    }
    Ok(split_segments(layout, z.view()))
}

/// The new segment produced by [`extend_window`].
pub fn extend<M: VelocityModel + ?Sized>(
    model: &M,
    context: &[ArrayView2<f32>],
    context_prompts: &[Vec<usize>],
    new_prompt: &[usize],
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Array2<f32>, SamplingError> {
    let mut window = extend_window(model, context, context_prompts, new_prompt, cfg, sched)?;
    Ok(window.pop().expect("window holds n >= 1 segments"))
}

/// Auto-regressive extension with a sliding window of `n - 1` context segments.
///
/// Extension `j` draws its noise from an independent stream of the seed, so
/// the first segment equals [`extend`] with the same config.
pub fn extend_many<M: VelocityModel + ?Sized>(
    model: &M,
    initial: &[ArrayView2<f32>],
    initial_prompts: &[Vec<usize>],
    prompts: &[Vec<usize>],
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Vec<Array2<f32>>, SamplingError> {
    if prompts.is_empty() {
        return Err(SamplingError::NoPrompts);
    }
    let mut window: VecDeque<(Array2<f32>, Vec<usize>)> = initial
        .iter()
        .zip(initial_prompts)
        .map(|(seg, p)| (seg.to_owned(), p.clone()))
        .collect();
    if initial_prompts.len() != initial.len() {
        return Err(SamplingError::Count { what: "context prompts", expected: initial.len(), got: initial_prompts.len() });
    }
    let mut out = Vec::with_capacity(prompts.len());
    for (j, prompt) in prompts.iter().enumerate() {
        let segs: Vec<ArrayView2<f32>> = window.iter().map(|(s, _)| s.view()).collect();
        let ctx_prompts: Vec<Vec<usize>> = window.iter().map(|(_, p)| p.clone()).collect();
        let new = extend_stream(model, &segs, &ctx_prompts, prompt, cfg, sched, j as u64)?
            .pop()
            .expect("window holds n >= 1 segments");
        if !window.is_empty() {
            window.pop_front();
            window.push_back((new.clone(), prompt.clone()));
        }
        out.push(new);
    }
    Ok(out)
}

/// Writes segments as tensors `segment_<i>`.
pub fn save_segments(path: &Path, segments: &[Array2<f32>]) -> Result<(), SamplingError> {
    let tensors = segments
        .iter()
        .enumerate()
        .map(|(i, seg)| {
            let dims = seg.shape().iter().map(|&d| d as u64).collect();
            Tensor::new(format!("segment_{i}"), dims, seg.iter().copied().collect())
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(checkpoint::save(path, &tensors)?)
}

/// Reads `segment_0, segment_1, ..` until the first missing index.
pub fn load_segments(path: &Path) -> Result<Vec<Array2<f32>>, SamplingError> {
    let tensors = checkpoint::load(path)?;
    let mut out = Vec::new();
    while let Ok(t) = checkpoint::find(&tensors, &format!("segment_{}", out.len())) {
        if t.dims.len() != 2 {
            return Err(CheckpointError::Shape { name: t.name.clone(), got: t.dims.clone(), expected: vec![0, 0] }.into());
        }
        let shape = (t.dims[0] as usize, t.dims[1] as usize);
        out.push(Array2::from_shape_vec(shape, t.data.clone()).expect("payload length checked on read"));
    }
    Ok(out)
}
