//! Two-stage training of the denoiser.
//!
//! Pre-training concatenates unrelated scenes and supervises every segment.
//! Fine-tuning uses style-coherent scenes; with probability `p` a step runs the
//! conditional task instead: the first `n - 1` segments enter clean at `t = 0`
//! and only the last segment is noised and supervised.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attention::AttentionRouting;
use crate::checkpoint::{self, CheckpointError, Tensor};
use crate::diffusion::{make_zero_snr_schedule, DiffusionError, NoiseSchedule};
use crate::mask::{
    build_conditional_mask, build_grouped_plan, ConditionalMask, GroupedPlan, MaskVariant,
    SegmentLayout,
};
use crate::model::{init_params, loss_and_grads, BatchSample, ModelConfig, ModelError, ModelParams};
use crate::num::{randn, Real};
use crate::synthetic::{make_prototypes, SceneSource, SyntheticError, SyntheticSpec};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LossError {
    #[error("prediction {pred:?} and target {target:?} differ in shape")]
    Shape { pred: (usize, usize), target: (usize, usize) },
    #[error("conditional mask has {got} entries for {n} segments")]
    MaskLength { got: usize, n: usize },
    #[error("conditional mask selects no segment")]
    NothingSelected,
}

fn check_loss_inputs<F: Real>(
    pred: ArrayView2<F>,
    target: ArrayView2<F>,
    mask: &ConditionalMask,
    layout: &SegmentLayout,
) -> Result<F, LossError> {
    if pred.dim() != target.dim() || pred.nrows() != layout.video_total() {
        return Err(LossError::Shape { pred: pred.dim(), target: target.dim() });
    }
    if mask.n() != layout.n() {
        return Err(LossError::MaskLength { got: mask.n(), n: layout.n() });
    }
    let included: usize = (0..layout.n())
        .filter(|&i| mask.includes(i))
        .map(|i| layout.video_lens()[i] * pred.ncols())
        .sum();
    if included == 0 {
        return Err(LossError::NothingSelected);
    }
    Ok(F::lit(included as f64))
}

/// Mean squared error over the video elements of segments selected by `mask`.
pub fn masked_v_loss<F: Real>(
    pred: ArrayView2<F>,
    target: ArrayView2<F>,
    mask: &ConditionalMask,
    layout: &SegmentLayout,
) -> Result<F, LossError> {
    let count = check_loss_inputs(pred, target, mask, layout)?;
    let mut sum = F::zero();
    for scene in (0..layout.n()).filter(|&i| mask.includes(i)) {
        let rows = layout.video_rows(scene);
        for (&p, &t) in pred.slice(s![rows.clone(), ..]).iter().zip(target.slice(s![rows, ..]).iter()) {
            sum += (p - t) * (p - t);
        }
    }
    Ok(sum / count)
}

/// Gradient of [`masked_v_loss`] with respect to `pred`; rows of excluded segments are exactly zero.
pub fn masked_v_loss_grad<F: Real>(
    pred: ArrayView2<F>,
    target: ArrayView2<F>,
    mask: &ConditionalMask,
    layout: &SegmentLayout,
) -> Result<Array2<F>, LossError> {
    let count = check_loss_inputs(pred, target, mask, layout)?;
    let scale = F::lit(2.0) / count;
    let mut grad = Array2::zeros(pred.raw_dim());
    for scene in (0..layout.n()).filter(|&i| mask.includes(i)) {
        let rows = layout.video_rows(scene);
        let diff = (&pred.slice(s![rows.clone(), ..]) - &target.slice(s![rows.clone(), ..])) * scale;
        grad.slice_mut(s![rows, ..]).assign(&diff);
    }
    Ok(grad)
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("config line {line}: {message}")]
    ConfigLine { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Synthetic(#[from] SyntheticError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Sft,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Sft => "sft",
        })
    }
}

/// Which stages a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StagePlan {
    Pretrain,
    Sft,
    Both,
}

impl FromStr for StagePlan {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "pretrain" => Ok(StagePlan::Pretrain),
            "sft" => Ok(StagePlan::Sft),
            "both" => Ok(StagePlan::Both),
            other => Err(format!("unknown stage `{other}`, expected pretrain, sft or both")),
        }
    }
}

impl fmt::Display for StagePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StagePlan::Pretrain => "pretrain",
            StagePlan::Sft => "sft",
            StagePlan::Both => "both",
        })
    }
}

/// The objective a step optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// All segments noised with one shared timestep and supervised.
    Joint,
    /// Leading segments clean at `t = 0`, only the last one noised and supervised.
    Conditional,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Joint => "joint",
            Task::Conditional => "conditional",
        })
    }
}

/// Full training recipe.
///
/// `Default` is the desk-scale recipe. [`TrainingConfig::large_scale`] records the
/// original large-scale hyperparameters (batch 8, 10k + 10k steps, lr 1e-5), which
/// are only meaningful for fine-tuning a pretrained video backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub stage: StagePlan,
    /// Probability of the conditional task during fine-tuning.
    pub p: f64,
    pub lr: f64,
    /// Linear warm-up length at the start of each stage.
    pub warmup: usize,
    /// Decay the rate to zero over each stage along a half cosine.
    pub cosine: bool,
    pub batch: usize,
    /// Steps per stage, unless overridden by `pretrain_steps` / `sft_steps`.
    pub steps: usize,
    pub pretrain_steps: Option<usize>,
    pub sft_steps: Option<usize>,
    /// Scenes per sample.
    pub n: usize,
    pub variant: MaskVariant,
    pub seed: u64,
    pub weight_decay: f64,
    /// Diffusion steps `T`.
    pub diffusion_steps: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub data: SyntheticSpec,
    /// Save a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            stage: StagePlan::Both,
            p: 0.5,
            lr: 1e-3,
            warmup: 0,
            cosine: false,
            batch: 16,
            steps: 1500,
            pretrain_steps: None,
            sft_steps: None,
            n: 3,
            variant: MaskVariant::V2,
            seed: 0,
            weight_decay: 0.01,
            diffusion_steps: 100,
            depth: 4,
            dim: 64,
            heads: 4,
            data: SyntheticSpec::default(),
            checkpoint_every: 0,
            out_dir: PathBuf::from("runs/default"),
            resume: None,
        }
    }
}

impl TrainingConfig {
    pub fn large_scale() -> Self {
        TrainingConfig {
            lr: 1e-5,
            batch: 8,
            steps: 10_000,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(0.0..=1.0).contains(&self.p) {
            return bad(format!("p must lie in [0, 1], got {}", self.p));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if self.diffusion_steps < 2 {
            return bad("diffusion_steps must be at least 2".into());
        }
        self.data.validate()?;
        self.model_config().validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            depth: self.depth,
            dim: self.dim,
            heads: self.heads,
            text_vocab: self.data.prompts,
            token_dim: self.data.token_dim,
            max_t: self.diffusion_steps,
            max_len: self.layout().total_len(),
        }
    }

    pub fn layout(&self) -> SegmentLayout {
        self.data.layout(self.n.max(1))
    }

    pub fn stage_steps(&self, stage: Stage) -> usize {
        let active = matches!(
            (self.stage, stage),
            (StagePlan::Both, _) | (StagePlan::Pretrain, Stage::Pretrain) | (StagePlan::Sft, Stage::Sft)
        );
        if !active {
            return 0;
        }
        match stage {
            Stage::Pretrain => self.pretrain_steps.unwrap_or(self.steps),
            Stage::Sft => self.sft_steps.unwrap_or(self.steps),
        }
    }

    /// Learning rate for global step `step` (1-based; pre-training steps come first).
    pub fn lr_at(&self, step: u64) -> f64 {
        let pre = self.stage_steps(Stage::Pretrain) as u64;
        let (pos, len) = if step <= pre {
            (step, pre)
        } else {
            (step - pre, self.stage_steps(Stage::Sft) as u64)
        };
        let mut lr = self.lr;
        if self.warmup > 0 && pos <= self.warmup as u64 {
            lr *= pos as f64 / self.warmup as f64;
        }
        if self.cosine && len > 0 {
            let frac = (pos.saturating_sub(1)) as f64 / len as f64;
            lr *= 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        }
        lr
    }

    pub fn total_steps(&self) -> usize {
        self.stage_steps(Stage::Pretrain) + self.stage_steps(Stage::Sft)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("invalid value `{v}` for `{key}`"))
        }
        let v = value.trim();
        match key.trim() {
            "stage" => self.stage = v.parse()?,
            "p" => self.p = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "warmup" => self.warmup = num(key, v)?,
            "cosine" => self.cosine = num(key, v)?,
            "batch" => self.batch = num(key, v)?,
            "steps" => self.steps = num(key, v)?,
            "pretrain_steps" => self.pretrain_steps = Some(num(key, v)?),
            "sft_steps" => self.sft_steps = Some(num(key, v)?),
            "n" => self.n = num(key, v)?,
            "variant" => self.variant = v.parse().map_err(|e: crate::mask::UnknownVariant| e.to_string())?,
            "seed" => self.seed = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "diffusion_steps" => self.diffusion_steps = num(key, v)?,
            "depth" => self.depth = num(key, v)?,
            "dim" => self.dim = num(key, v)?,
            "heads" => self.heads = num(key, v)?,
            "styles" => self.data.styles = num(key, v)?,
            "prompts" => self.data.prompts = num(key, v)?,
            "seg_tokens" => self.data.seg_tokens = num(key, v)?,
            "token_dim" => self.data.token_dim = num(key, v)?,
            "text_tokens" => self.data.text_tokens = num(key, v)?,
            "sigma" => self.data.sigma = num(key, v)?,
            "data_seed" => self.data.seed = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "resume" => self.resume = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Parses `key = value` lines; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<(), TrainError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| TrainError::ConfigLine {
                line: i + 1,
                message: format!("expected `key = value`, got `{raw}`"),
            })?;
            self.set(key, value).map_err(|message| TrainError::ConfigLine { line: i + 1, message })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = TrainingConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }
}

impl fmt::Display for TrainingConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "stage = {}", self.stage)?;
        writeln!(f, "p = {}", self.p)?;
        writeln!(f, "lr = {}", self.lr)?;
        writeln!(f, "warmup = {}", self.warmup)?;
        writeln!(f, "cosine = {}", self.cosine)?;
        writeln!(f, "batch = {}", self.batch)?;
        writeln!(f, "steps = {}", self.steps)?;
        if let Some(s) = self.pretrain_steps {
            writeln!(f, "pretrain_steps = {s}")?;
        }
        if let Some(s) = self.sft_steps {
            writeln!(f, "sft_steps = {s}")?;
        }
        writeln!(f, "n = {}", self.n)?;
        writeln!(f, "variant = {}", self.variant)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "weight_decay = {}", self.weight_decay)?;
        writeln!(f, "diffusion_steps = {}", self.diffusion_steps)?;
        writeln!(f, "depth = {}", self.depth)?;
        writeln!(f, "dim = {}", self.dim)?;
        writeln!(f, "heads = {}", self.heads)?;
        writeln!(f, "styles = {}", self.data.styles)?;
        writeln!(f, "prompts = {}", self.data.prompts)?;
        writeln!(f, "seg_tokens = {}", self.data.seg_tokens)?;
        writeln!(f, "token_dim = {}", self.data.token_dim)?;
        writeln!(f, "text_tokens = {}", self.data.text_tokens)?;
        writeln!(f, "sigma = {}", self.data.sigma)?;
        writeln!(f, "data_seed = {}", self.data.seed)?;
        writeln!(f, "checkpoint_every = {}", self.checkpoint_every)?;
        writeln!(f, "out_dir = {}", self.out_dir.display())
    }
}

/// AdamW with `beta = (0.9, 0.999)`, `eps = 1e-8` and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: ModelParams<f32>,
    pub v: ModelParams<f32>,
    /// Applied update count (bias correction exponent).
    pub t: u64,
    /// Steps dropped because the gradient was not finite.
    pub skipped: u64,
    pub weight_decay: f32,
}

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

impl AdamW {
    pub fn new(config: ModelConfig, weight_decay: f64) -> Self {
        AdamW {
            m: ModelParams::zeros(config),
            v: ModelParams::zeros(config),
            t: 0,
            skipped: 0,
            weight_decay: weight_decay as f32,
        }
    }

    /// Applies one update. A non-finite gradient leaves `params` untouched,
    /// increments `skipped` and returns `false`.
    pub fn step(&mut self, params: &mut ModelParams<f32>, grads: &ModelParams<f32>, lr: f32) -> bool {
        if !grads.all_finite() {
            self.skipped += 1;
            return false;
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let decay = lr * self.weight_decay;
        for (((mut p, (_, g)), mut m), mut v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            ndarray::Zip::from(&mut p).and(&g).and(&mut m).and(&mut v).for_each(|p, &g, m, v| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= decay * *p;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            });
        }
        true
    }

    fn to_tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for (prefix, state) in [("optim.m.", &self.m), ("optim.v.", &self.v)] {
            out.extend(state.to_tensors().into_iter().filter(|t| !t.name.starts_with("meta.")).map(|mut t| {
                t.name = format!("{prefix}{}", t.name);
                t
            }));
        }
        out.push(Tensor::scalar("optim.t", self.t as f32));
        out.push(Tensor::scalar("optim.skipped", self.skipped as f32));
        out
    }

    fn from_tensors(tensors: &[Tensor], config: ModelConfig, weight_decay: f64) -> Result<Self, TrainError> {
        let mut opt = AdamW::new(config, weight_decay);
        for (prefix, state) in [("optim.m.", &mut opt.m), ("optim.v.", &mut opt.v)] {
            let names: Vec<String> = state.tensors().into_iter().map(|(n, _)| n).collect();
            for (name, mut dst) in names.iter().zip(state.tensors_mut()) {
                let src = checkpoint::find(tensors, &format!("{prefix}{name}"))?;
                if src.data.len() != dst.len() {
                    return Err(CheckpointError::Shape {
                        name: format!("{prefix}{name}"),
                        got: src.dims.clone(),
                        expected: dst.shape().iter().map(|&d| d as u64).collect(),
                    }
                    .into());
                }
                dst.iter_mut().zip(&src.data).for_each(|(d, &s)| *d = s);
            }
        }
        opt.t = checkpoint::find(tensors, "optim.t")?.data[0] as u64;
        opt.skipped = checkpoint::find(tensors, "optim.skipped")?.data[0] as u64;
        Ok(opt)
    }
}

/// One row of the metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub stage: Stage,
    pub task: Task,
    pub loss: f32,
    pub grad_norm: f32,
}

pub const METRICS_HEADER: &str = "step,stage,task,loss,grad_norm";

impl fmt::Display for StepMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{},{}", self.step, self.stage, self.task, self.loss, self.grad_norm)
    }
}

/// Mutable training state: weights, optimizer and the fixed step context.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainingConfig,
    pub params: ModelParams<f32>,
    pub optimizer: AdamW,
    pub layout: SegmentLayout,
    pub plan: GroupedPlan,
    pub schedule: NoiseSchedule,
    /// Last completed global step.
    pub step: u64,
}

const TASK_SALT: u64 = 0x7461_736b_636f_696e;

/// Generator for everything drawn at global step `step` (data, noise, timesteps).
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Generator for the fine-tuning task coin, independent of [`step_rng`] so `p`
/// never shifts the data stream.
pub fn task_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ TASK_SALT);
    rng.set_stream(step);
    rng
}

/// Draws the fine-tuning task for `step`: conditional with probability `p`.
pub fn draw_task(seed: u64, step: u64, p: f64) -> Task {
    if task_rng(seed, step).gen_bool(p) {
        Task::Conditional
    } else {
        Task::Joint
    }
}

impl TrainState {
    pub fn new(config: TrainingConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let params = init_params::<f32>(config.model_config(), config.seed)?;
        Self::with_params(config, params)
    }

    pub fn with_params(config: TrainingConfig, params: ModelParams<f32>) -> Result<Self, TrainError> {
        config.validate()?;
        let layout = config.layout();
        let plan = build_grouped_plan(&layout, config.variant);
        let schedule = make_zero_snr_schedule(config.diffusion_steps)?;
        let optimizer = AdamW::new(params.config, config.weight_decay);
        Ok(TrainState { config, params, optimizer, layout, plan, schedule, step: 0 })
    }

    /// Builds the batch for `task` from `source` using the step's generator.
    pub fn build_batch(&self, source: &SceneSource<'_>, task: Task, rng: &mut ChaCha8Rng) -> Result<Vec<BatchSample<f32>>, TrainError> {
        let n = self.config.n;
        let max_t = self.schedule.steps();
        let spec = source.bank().spec();
        let rows = n * spec.seg_tokens;
        (0..self.config.batch)
            .map(|_| {
                let scenes = source.draw(n, rng);
                let eps: Array2<f32> = randn(rng, rows, spec.token_dim, 1.0);
                let t = rng.gen_range(1..=max_t);
                let (timesteps, loss_mask) = match task {
                    Task::Joint => (vec![t; n], build_conditional_mask(n, false)),
                    Task::Conditional => {
                        let mut ts = vec![0; n];
                        ts[n - 1] = t;
                        (ts, build_conditional_mask(n, true))
                    }
                };
                Ok(BatchSample {
                    text_ids: scenes.text_ids,
                    clean: scenes.latents,
                    eps,
                    timesteps,
                    loss_mask: loss_mask.expect("n >= 1"),
                })
            })
            .collect()
    }

    fn apply(&mut self, batch: &[BatchSample<f32>], stage: Stage, task: Task) -> Result<StepMetrics, TrainError> {
        let routing = AttentionRouting::Grouped(&self.plan);
        let (loss, grads) = loss_and_grads(&self.params, &self.layout, routing, batch, &self.schedule)?;
        let grad_norm = grads.l2_norm();
        let lr = self.config.lr_at(self.step + 1) as f32;
        self.optimizer.step(&mut self.params, &grads, lr);
        self.step += 1;
        Ok(StepMetrics { step: self.step, stage, task, loss, grad_norm })
    }

    /// Joint-task step on `source` with every segment supervised.
    pub fn pretrain_step(&mut self, source: &SceneSource<'_>) -> Result<StepMetrics, TrainError> {
        let mut rng = step_rng(self.config.seed, self.step + 1);
        let batch = self.build_batch(source, Task::Joint, &mut rng)?;
        self.apply(&batch, Stage::Pretrain, Task::Joint)
    }

    /// Fine-tuning step: conditional task with probability `p`, joint task otherwise.
    pub fn sft_step(&mut self, source: &SceneSource<'_>) -> Result<StepMetrics, TrainError> {
        let next = self.step + 1;
        let task = if self.config.n > 1 {
            draw_task(self.config.seed, next, self.config.p)
        } else {
            Task::Joint
        };
        let mut rng = step_rng(self.config.seed, next);
        let batch = self.build_batch(source, task, &mut rng)?;
        self.apply(&batch, Stage::Sft, task)
    }

    /// Weights, optimizer state and the step counter as container tensors.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        let mut out = self.params.to_tensors();
        out.extend(self.optimizer.to_tensors());
        out.push(Tensor::scalar("train.step", self.step as f32));
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        Ok(checkpoint::save(path, &self.to_tensors())?)
    }

    /// Restores a state written by [`save`](Self::save); training continues at the next step.
    pub fn resume(config: TrainingConfig, path: &Path) -> Result<Self, TrainError> {
        let tensors = checkpoint::load(path)?;
        let params = ModelParams::<f32>::from_tensors(&tensors)?;
        if params.config != config.model_config() {
            return Err(TrainError::Config(format!(
                "checkpoint model {:?} does not match config {:?}",
                params.config,
                config.model_config()
            )));
        }
        let mut state = Self::with_params(config, params)?;
        state.optimizer = AdamW::from_tensors(&tensors, state.params.config, state.config.weight_decay)?;
        state.step = checkpoint::find(&tensors, "train.step")?.data[0] as u64;
        Ok(state)
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
    pub checkpoint: PathBuf,
}

pub const FINAL_CHECKPOINT: &str = "model.m2dt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.txt";

/// Runs the configured stages, writing `config.txt`, `metrics.csv`, periodic
/// `ckpt_<step>.m2dt` files and the final `model.m2dt` into `out_dir`.
pub fn train(config: &TrainingConfig) -> Result<TrainOutcome, TrainError> {
    train_with(config, |_| {})
}

/// [`train`] with a callback invoked after every step.
pub fn train_with(config: &TrainingConfig, mut on_step: impl FnMut(&StepMetrics)) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let config_path = out.join(CONFIG_FILE);
    fs::write(&config_path, config.to_string()).map_err(io_err(&config_path))?;

    let mut state = match &config.resume {
        Some(path) => TrainState::resume(config.clone(), path)?,
        None => TrainState::new(config.clone())?,
    };
    let bank = make_prototypes(&config.data)?;

    let metrics_path = out.join(METRICS_FILE);
    let fresh = state.step == 0 || !metrics_path.exists();
    let file = if fresh {
        File::create(&metrics_path)
    } else {
        OpenOptions::new().append(true).open(&metrics_path)
    }
    .map_err(io_err(&metrics_path))?;
    let mut writer = BufWriter::new(file);
    if fresh {
        writeln!(writer, "{METRICS_HEADER}").map_err(io_err(&metrics_path))?;
    }

    let pretrain_end = config.stage_steps(Stage::Pretrain) as u64;
    let total = config.total_steps() as u64;
    let mut metrics = Vec::new();
    while state.step < total {
        let row = if state.step < pretrain_end {
            state.pretrain_step(&SceneSource::Unrelated(&bank))?
        } else {
            state.sft_step(&SceneSource::Coherent(&bank))?
        };
        writeln!(writer, "{row}").map_err(io_err(&metrics_path))?;
        on_step(&row);
        metrics.push(row);
        if config.checkpoint_every > 0 && state.step % config.checkpoint_every as u64 == 0 {
            writer.flush().map_err(io_err(&metrics_path))?;
            state.save(&out.join(format!("ckpt_{}.m2dt", state.step)))?;
        }
    }
    writer.flush().map_err(io_err(&metrics_path))?;
    let checkpoint = out.join(FINAL_CHECKPOINT);
    state.save(&checkpoint)?;
    Ok(TrainOutcome { state, metrics, checkpoint })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn layout3() -> SegmentLayout {
        SegmentLayout::uniform(3, 1, 2).unwrap()
    }

    /// Predictions whose per-segment MSEs are 4, 9 and 1.
    fn graded_pred() -> (Array2<f64>, Array2<f64>) {
        let target = Array2::<f64>::zeros((6, 2));
        let mut pred = target.clone();
        for (scene, err) in [2.0, 3.0, 1.0].into_iter().enumerate() {
            pred.slice_mut(s![2 * scene..2 * scene + 2, ..]).fill(err);
        }
        (pred, target)
    }

    #[test]
    fn masked_loss_examples() {
        let layout = layout3();
        let (pred, target) = graded_pred();
        let cond = build_conditional_mask(3, true).unwrap();
        let all = build_conditional_mask(3, false).unwrap();
        assert_eq!(masked_v_loss(pred.view(), target.view(), &cond, &layout).unwrap(), 1.0);
        let mse = pred.iter().map(|v| v * v).sum::<f64>() / 12.0;
        assert_eq!(masked_v_loss(pred.view(), target.view(), &all, &layout).unwrap(), mse);
        assert_eq!(masked_v_loss(pred.view(), pred.view(), &all, &layout).unwrap(), 0.0);
    }

    #[test]
    fn masked_grad_is_zero_outside_selection() {
        let layout = layout3();
        let (pred, target) = graded_pred();
        let cond = build_conditional_mask(3, true).unwrap();
        let g = masked_v_loss_grad(pred.view(), target.view(), &cond, &layout).unwrap();
        assert!(g.slice(s![0..4, ..]).iter().all(|&v| v == 0.0));
        // d/dp of mean((p - t)^2) over 4 elements = 2 (p - t) / 4
        assert!(g.slice(s![4..6, ..]).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn loss_rejects_bad_inputs() {
        let layout = layout3();
        let (pred, target) = graded_pred();
        let short = build_conditional_mask(2, false).unwrap();
        assert!(matches!(
            masked_v_loss(pred.view(), target.view(), &short, &layout),
            Err(LossError::MaskLength { .. })
        ));
        let narrow = Array2::<f64>::zeros((6, 1));
        assert!(matches!(
            masked_v_loss(pred.view(), narrow.view(), &build_conditional_mask(3, false).unwrap(), &layout),
            Err(LossError::Shape { .. })
        ));
    }

    fn small_model() -> ModelConfig {
        ModelConfig { depth: 1, dim: 8, heads: 2, text_vocab: 3, token_dim: 2, max_t: 10, max_len: 8 }
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut params = init_params::<f32>(small_model(), 1).unwrap();
        let before = params.clone();
        let mut opt = AdamW::new(small_model(), 0.01);
        let zero = ModelParams::zeros(small_model());
        assert!(opt.step(&mut params, &zero, 0.1));
        let mut expected = before.clone();
        expected.scale(1.0 - 0.1 * 0.01);
        assert!(params.max_abs_diff(&expected) < 1e-6);
    }

    #[test]
    fn constant_gradient_approaches_sign_update() {
        let cfg = small_model();
        let mut params = ModelParams::<f32>::zeros(cfg);
        let mut grads = ModelParams::<f32>::zeros(cfg);
        grads.text_embed.fill(0.3);
        grads.video_out_b.fill(-2.0);
        let mut opt = AdamW::new(cfg, 0.0);
        let lr = 1e-3;
        for _ in 0..5000 {
            opt.step(&mut params, &grads, lr);
        }
        let before = params.clone();
        opt.step(&mut params, &grads, lr);
        // fixed point: m_hat -> g and v_hat -> g^2, so the step is lr * g / |g|
        let d_embed = params.text_embed[[0, 0]] - before.text_embed[[0, 0]];
        let d_out = params.video_out_b[0] - before.video_out_b[0];
        assert!((d_embed + lr).abs() < 1e-6 * 10.0, "{d_embed}");
        assert!((d_out - lr).abs() < 1e-6 * 10.0, "{d_out}");
    }

    #[test]
    fn nan_gradient_is_skipped() {
        let mut params = init_params::<f32>(small_model(), 2).unwrap();
        let before = params.clone();
        let mut opt = AdamW::new(small_model(), 0.01);
        let mut grads = ModelParams::zeros(small_model());
        grads.time_b1[0] = f32::NAN;
        assert!(!opt.step(&mut params, &grads, 0.1));
        assert_eq!(opt.skipped, 1);
        assert_eq!(opt.t, 0);
        assert_eq!(params, before);
    }

    #[test]
    fn config_text_round_trip_and_errors() {
        let mut cfg = TrainingConfig::default();
        cfg.apply_text("# comment\nlr = 0.5\n\nvariant = V4\nstage = sft\nsigma = 0.1\n").unwrap();
        assert_eq!(cfg.lr, 0.5);
        assert_eq!(cfg.variant, MaskVariant::V4);
        assert_eq!(cfg.stage, StagePlan::Sft);
        let mut again = TrainingConfig::default();
        again.apply_text(&cfg.to_string()).unwrap();
        assert_eq!(again, cfg);

        let err = TrainingConfig::default().apply_text("lr = 1\nbogus line\n").unwrap_err();
        assert!(matches!(err, TrainError::ConfigLine { line: 2, .. }));
        let err = TrainingConfig::default().apply_text("lr = fast\n").unwrap_err();
        assert!(matches!(err, TrainError::ConfigLine { line: 1, .. }));
        let err = TrainingConfig::default().apply_text("colour = red\n").unwrap_err();
        assert!(matches!(err, TrainError::ConfigLine { line: 1, .. }));
        let bad = TrainingConfig { p: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn stage_step_accounting() {
        let cfg = TrainingConfig { steps: 10, sft_steps: Some(4), ..Default::default() };
        assert_eq!(cfg.total_steps(), 14);
        let cfg = TrainingConfig { stage: StagePlan::Sft, steps: 10, ..Default::default() };
        assert_eq!(cfg.stage_steps(Stage::Pretrain), 0);
        assert_eq!(cfg.total_steps(), 10);
        let sched = TrainingConfig { steps: 10, warmup: 2, cosine: true, lr: 1.0, ..Default::default() };
        assert_eq!(sched.lr_at(1), 0.5);
        assert_eq!(sched.lr_at(2), 1.0 * 0.5 * (1.0 + (std::f64::consts::PI * 0.1).cos()));
        assert_eq!(sched.lr_at(11), 0.5);
        assert!(sched.lr_at(20) > 0.0 && sched.lr_at(20) < 0.03);
        assert_eq!(TrainingConfig::default().lr_at(1234), TrainingConfig::default().lr);
        let large = TrainingConfig::large_scale();
        assert_eq!((large.n, large.p, large.lr, large.batch), (3, 0.5, 1e-5, 8));
    }
}
