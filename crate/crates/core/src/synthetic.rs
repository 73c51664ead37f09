//! Synthetic multi-scene task with an exact decoder.
//!
//! Every `(style, prompt)` pair owns a prototype segment of `V` unit-norm latent
//! rows. A scene's text group encodes its prompt; its video latents are the
//! prototype of its (style, prompt) plus Gaussian noise. Pre-training samples draw
//! every scene's style independently, fine-tuning samples share one style across
//! all scenes. Decoding a generated segment means finding its nearest prototype,
//! which gives ground truth for prompt alignment and cross-scene style agreement.

use std::fmt;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attention::AttentionRouting;
use crate::mask::{build_grouped_plan, Block, MaskVariant, SegmentLayout};
use crate::model::{forward_truncated, ModelError, ModelParams, SequenceInput};
use crate::num::{randn, Real};

const MAX_BANK_ATTEMPTS: u64 = 16;

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("could not reach prototype separation {needed:.4} after {attempts} attempts (best {best:.4})")]
    Separation { needed: f64, best: f64, attempts: u64 },
    #[error("segment shape {got:?} does not match prototypes ({rows}, {cols})")]
    Shape { got: (usize, usize), rows: usize, cols: usize },
    #[error("{generated} generated segments for {intended} intended prompts")]
    Count { generated: usize, intended: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub styles: usize,
    pub prompts: usize,
    /// Video tokens per segment.
    pub seg_tokens: usize,
    pub token_dim: usize,
    /// Text tokens per segment; each repeats the prompt id.
    pub text_tokens: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            styles: 4,
            prompts: 8,
            seg_tokens: 16,
            token_dim: 8,
            text_tokens: 2,
            sigma: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        if self.styles == 0 || self.prompts == 0 || self.seg_tokens == 0 || self.token_dim == 0 || self.text_tokens == 0 {
            return Err(SyntheticError::Spec("counts must be at least 1".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(SyntheticError::Spec(format!("sigma must be finite and non-negative, got {}", self.sigma)));
        }
        Ok(())
    }

    /// Layout of an `n`-scene sample.
    pub fn layout(&self, n: usize) -> SegmentLayout {
        SegmentLayout::uniform(n, self.text_tokens, self.seg_tokens).expect("validated spec has positive lengths")
    }

    pub fn text_ids(&self, prompt: usize) -> Vec<usize> {
        vec![prompt; self.text_tokens]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    spec: SyntheticSpec,
    prototypes: Vec<Array2<f32>>,
}

/// Root-mean-square distance between corresponding rows.
fn row_distance(a: ArrayView2<f32>, b: ArrayView2<f32>) -> f64 {
    let sq: f64 = a.iter().zip(b.iter()).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum();
    (sq / a.nrows() as f64).sqrt()
}

pub fn make_prototypes(spec: &SyntheticSpec) -> Result<PrototypeBank, SyntheticError> {
    spec.validate()?;
    let needed = 4.0 * spec.sigma;
    let mut best = 0.0f64;
    for attempt in 0..MAX_BANK_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(attempt.wrapping_mul(0x5851_f42d_4c95_7f2d)));
        let prototypes: Vec<Array2<f32>> = (0..spec.styles * spec.prompts)
            .map(|_| {
                let mut p: Array2<f32> = randn(&mut rng, spec.seg_tokens, spec.token_dim, 1.0);
                for mut row in p.axis_iter_mut(Axis(0)) {
                    let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
                    row.mapv_inplace(|v| v / norm);
                }
                p
            })
            .collect();
        let mut min_dist = f64::INFINITY;
        for i in 0..prototypes.len() {
            for j in i + 1..prototypes.len() {
                min_dist = min_dist.min(row_distance(prototypes[i].view(), prototypes[j].view()));
            }
        }
        if min_dist >= needed {
            return Ok(PrototypeBank { spec: *spec, prototypes });
        }
        best = best.max(min_dist);
    }
    Err(SyntheticError::Separation { needed, best, attempts: MAX_BANK_ATTEMPTS })
}

impl PrototypeBank {
    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn prototype(&self, style: usize, prompt: usize) -> ArrayView2<'_, f32> {
        self.prototypes[style * self.spec.prompts + prompt].view()
    }

    /// Smallest row-RMS distance between two distinct prototypes.
    pub fn min_separation(&self) -> f64 {
        let mut min_dist = f64::INFINITY;
        for i in 0..self.prototypes.len() {
            for j in i + 1..self.prototypes.len() {
                min_dist = min_dist.min(row_distance(self.prototypes[i].view(), self.prototypes[j].view()));
            }
        }
        min_dist
    }
}

/// Clean latents and annotations of one `n`-scene sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub styles: Vec<usize>,
    pub prompts: Vec<usize>,
    pub text_ids: Vec<Vec<usize>>,
    /// Segments stacked in scene order (`n * seg_tokens x token_dim`).
    pub latents: Array2<f32>,
}

impl SceneSample {
    pub fn segment(&self, scene: usize, seg_tokens: usize) -> ArrayView2<'_, f32> {
        self.latents.slice(s![scene * seg_tokens..(scene + 1) * seg_tokens, ..])
    }

    /// True when every scene shares one style.
    pub fn style_coherent(&self) -> bool {
        self.styles.windows(2).all(|w| w[0] == w[1])
    }
}

fn assemble<R: Rng + ?Sized>(bank: &PrototypeBank, styles: Vec<usize>, prompts: Vec<usize>, rng: &mut R) -> SceneSample {
    let spec = bank.spec;
    let segments: Vec<Array2<f32>> = styles
        .iter()
        .zip(&prompts)
        .map(|(&s, &c)| {
            let mut seg = bank.prototype(s, c).to_owned();
            if spec.sigma > 0.0 {
                seg += &randn::<f32, _>(rng, spec.seg_tokens, spec.token_dim, spec.sigma);
            }
            seg
        })
        .collect();
    let views: Vec<_> = segments.iter().map(|s| s.view()).collect();
    SceneSample {
        text_ids: prompts.iter().map(|&c| spec.text_ids(c)).collect(),
        styles,
        prompts,
        latents: concatenate(Axis(0), &views).expect("segments share width"),
    }
}

/// `n` unrelated scenes: style and prompt drawn independently per scene.
pub fn sample_pretrain<R: Rng + ?Sized>(bank: &PrototypeBank, n: usize, rng: &mut R) -> SceneSample {
    let spec = bank.spec;
    let (styles, prompts) = (0..n)
        .map(|_| (rng.gen_range(0..spec.styles), rng.gen_range(0..spec.prompts)))
        .unzip();
    assemble(bank, styles, prompts, rng)
}

/// `n` related scenes: one style shared by all scenes, prompts independent.
pub fn sample_sft<R: Rng + ?Sized>(bank: &PrototypeBank, n: usize, rng: &mut R) -> SceneSample {
    let spec = bank.spec;
    let style = rng.gen_range(0..spec.styles);
    let prompts = (0..n).map(|_| rng.gen_range(0..spec.prompts)).collect();
    assemble(bank, vec![style; n], prompts, rng)
}

/// Where training scenes come from.
#[derive(Debug, Clone, Copy)]
pub enum SceneSource<'a> {
    /// Independent scenes, for pre-training.
    Unrelated(&'a PrototypeBank),
    /// Style-coherent scenes, for fine-tuning.
    Coherent(&'a PrototypeBank),
}

impl SceneSource<'_> {
    pub fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> SceneSample {
        match self {
            SceneSource::Unrelated(bank) => sample_pretrain(bank, n, rng),
            SceneSource::Coherent(bank) => sample_sft(bank, n, rng),
        }
    }

    pub fn bank(&self) -> &PrototypeBank {
        match self {
            SceneSource::Unrelated(b) | SceneSource::Coherent(b) => b,
        }
    }
}

/// Nearest prototype by squared distance; ties go to the smallest `(style, prompt)`.
pub fn decode_segment(bank: &PrototypeBank, segment: ArrayView2<f32>) -> Result<(usize, usize), SyntheticError> {
    let spec = bank.spec;
    if segment.dim() != (spec.seg_tokens, spec.token_dim) {
        return Err(SyntheticError::Shape { got: segment.dim(), rows: spec.seg_tokens, cols: spec.token_dim });
    }
    let mut best = (f64::INFINITY, (0, 0));
    for style in 0..spec.styles {
        for prompt in 0..spec.prompts {
            let d: f64 = segment
                .iter()
                .zip(bank.prototype(style, prompt).iter())
                .map(|(&x, &y)| ((x - y) as f64).powi(2))
                .sum();
            if d < best.0 {
                best = (d, (style, prompt));
            }
        }
    }
    Ok(best.1)
}

/// Fraction of segments whose decoded prompt equals the intended prompt.
pub fn semantic_consistency(
    bank: &PrototypeBank,
    generated: &[ArrayView2<f32>],
    intended: &[usize],
) -> Result<f64, SyntheticError> {
    if generated.len() != intended.len() {
        return Err(SyntheticError::Count { generated: generated.len(), intended: intended.len() });
    }
    if generated.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (seg, &prompt) in generated.iter().zip(intended) {
        hits += (decode_segment(bank, *seg)?.1 == prompt) as usize;
    }
    Ok(hits as f64 / generated.len() as f64)
}

/// Fraction of samples whose segments all decode to the same style.
pub fn style_consistency(bank: &PrototypeBank, samples: &[Vec<ArrayView2<f32>>]) -> Result<f64, SyntheticError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for sample in samples {
        let styles = sample
            .iter()
            .map(|seg| decode_segment(bank, *seg).map(|d| d.0))
            .collect::<Result<Vec<_>, _>>()?;
        hits += styles.windows(2).all(|w| w[0] == w[1]) as usize;
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Which (text group, video group) pairs can influence each other after `depth`
/// attention layers: a path of at most `depth` edges in the permitted-pair graph.
pub fn reachability(n: usize, variant: MaskVariant, depth: usize) -> Vec<Vec<bool>> {
    let blocks: Vec<Block> = (0..n).map(Block::Text).chain((0..n).map(Block::Video)).collect();
    let mut out = vec![vec![false; n]; n];
    for j in 0..n {
        let mut reached: Vec<bool> = blocks.iter().map(|&b| b == Block::Text(j)).collect();
        for _ in 0..depth {
            reached = blocks
                .iter()
                .map(|&dst| blocks.iter().zip(&reached).any(|(&src, &on)| on && variant.permits(dst, src)))
                .collect();
        }
        for i in 0..n {
            out[j][i] = reached[n + i];
        }
    }
    out
}

/// Observed vs. predicted influence of text group `j` on video group `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeakageReport {
    pub variant: MaskVariant,
    /// `(depth, observed[j][i], predicted[j][i])` per probed depth.
    pub layers: Vec<(usize, Vec<Vec<bool>>, Vec<Vec<bool>>)>,
}

impl LeakageReport {
    pub fn matches(&self) -> bool {
        self.layers.iter().all(|(_, obs, pred)| obs == pred)
    }
}

impl fmt::Display for LeakageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (depth, obs, pred) in &self.layers {
            writeln!(f, "{} depth {}:", self.variant, depth)?;
            for (j, (o, p)) in obs.iter().zip(pred).enumerate() {
                let cells: Vec<String> = o
                    .iter()
                    .zip(p)
                    .map(|(&o, &p)| format!("{}{}", if o { 'x' } else { '.' }, if o == p { ' ' } else { '!' }))
                    .collect();
                writeln!(f, "  text_{} -> [{}]", j + 1, cells.join(""))?;
            }
        }
        Ok(())
    }
}

/// Perturbs each text group in turn and records which video outputs change
/// (bitwise) after each of `depths` layers, alongside the reachability prediction.
pub fn leakage_probe<F: Real>(
    params: &ModelParams<F>,
    layout: &SegmentLayout,
    variant: MaskVariant,
    depths: &[usize],
    seed: u64,
) -> Result<LeakageReport, SyntheticError> {
    let n = layout.n();
    let vocab = params.config.text_vocab;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let text_ids: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..layout.text_lens()[i]).map(|_| rng.gen_range(0..vocab)).collect())
        .collect();
    let video: Array2<F> = randn(&mut rng, layout.video_total(), params.config.token_dim, 1.0);
    let timesteps: Vec<usize> = (0..n).map(|_| rng.gen_range(0..=params.config.max_t)).collect();
    let plan = build_grouped_plan(layout, variant);
    let routing = AttentionRouting::Grouped(&plan);

    let mut layers = Vec::new();
    for &depth in depths {
        let run = |ids: &[Vec<usize>]| {
            let input = SequenceInput { text_ids: ids, video: video.view(), timesteps: &timesteps };
            forward_truncated(params, layout, routing, &input, depth)
        };
        let base = run(&text_ids)?;
        let mut observed = vec![vec![false; n]; n];
        for j in 0..n {
            let mut perturbed = text_ids.clone();
            for id in perturbed[j].iter_mut() {
                *id = (*id + 1) % vocab;
            }
            let out = run(&perturbed)?;
            for i in 0..n {
                let rows = layout.video_rows(i);
                observed[j][i] = out.slice(s![rows.clone(), ..]) != base.slice(s![rows, ..]);
            }
        }
        layers.push((depth, observed, reachability(n, variant, depth)));
    }
    Ok(LeakageReport { variant, layers })
}
