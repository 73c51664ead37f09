#![allow(dead_code)]

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use m2dt_core::attention::{AttentionRouting, AttentionWeights};
use m2dt_core::diffusion::NoiseSchedule;
use m2dt_core::mask::{build_conditional_mask, MaskVariant, SegmentLayout};
use m2dt_core::model::{forward, BatchSample, ModelConfig, ModelParams, SequenceInput};
use m2dt_core::training::masked_v_loss;
use m2dt_core::num::Real;

/// Per-token `(is_text, scene)` for the packed `[texts; videos]` order.
pub fn token_roles(text_lens: &[usize], video_lens: &[usize]) -> Vec<(bool, usize)> {
    let mut roles = Vec::new();
    for (scene, &t) in text_lens.iter().enumerate() {
        roles.extend(std::iter::repeat((true, scene)).take(t));
    }
    for (scene, &v) in video_lens.iter().enumerate() {
        roles.extend(std::iter::repeat((false, scene)).take(v));
    }
    roles
}

/// Enumerated mask: every query/key pair is classified from the token roles.
pub fn oracle_mask(text_lens: &[usize], video_lens: &[usize], variant: MaskVariant) -> Vec<Vec<bool>> {
    let roles = token_roles(text_lens, video_lens);
    let level = match variant {
        MaskVariant::V1 => 1,
        MaskVariant::V2 => 2,
        MaskVariant::V3 => 3,
        MaskVariant::V4 => 4,
        MaskVariant::V5 => 5,
    };
    roles
        .iter()
        .map(|&(qt, qs)| {
            roles
                .iter()
                .map(|&(kt, ks)| {
                    if level == 5 || qs == ks {
                        return true;
                    }
                    match (qt, kt) {
                        (false, false) => level >= 2,
                        (true, true) => level == 3,
                        _ => level == 4,
                    }
                })
                .collect()
        })
        .collect()
}

/// Closed-form popcount for `n` scenes with text length `t` and video length `v` each.
pub fn closed_form_popcount(n: usize, t: usize, v: usize, variant: MaskVariant) -> usize {
    let v1 = n * (t + v) * (t + v);
    let cross = n * (n - 1);
    let v2 = v1 + cross * v * v;
    match variant {
        MaskVariant::V1 => v1,
        MaskVariant::V2 => v2,
        MaskVariant::V3 => v2 + cross * t * t,
        MaskVariant::V4 => v2 + 2 * cross * t * v,
        MaskVariant::V5 => (n * (t + v)).pow(2),
    }
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal) * scale)
}

/// Longhand masked multi-head attention in `f64`: explicit loops, exp of
/// max-shifted scores over allowed keys only.
pub fn naive_attention(x: ArrayView2<f64>, w: &AttentionWeights<f64>, mask: &[Vec<bool>]) -> Array2<f64> {
    let (len, dim) = x.dim();
    let heads = w.heads;
    let hd = dim / heads;
    let q = x.dot(&w.wq);
    let k = x.dot(&w.wk);
    let v = x.dot(&w.wv);
    let mut concat = Array2::<f64>::zeros((len, dim));
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..len {
            let mut scores = vec![f64::NEG_INFINITY; len];
            for j in 0..len {
                if mask[i][j] {
                    let mut dot = 0.0;
                    for c in cols.clone() {
                        dot += q[[i, c]] * k[[j, c]];
                    }
                    scores[j] = dot / (hd as f64).sqrt();
                }
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores.iter().map(|&s| if s.is_finite() { (s - max).exp() } else { 0.0 }).collect();
            let total: f64 = weights.iter().sum();
            for c in cols.clone() {
                let mut acc = 0.0;
                for j in 0..len {
                    acc += weights[j] / total * v[[j, c]];
                }
                concat[[i, c]] = acc;
            }
        }
    }
    concat.dot(&w.wo)
}

pub fn random_weights(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> AttentionWeights<f64> {
    let s = 1.0 / (dim as f64).sqrt();
    AttentionWeights::new(
        heads,
        gaussian(rng, dim, dim, s),
        gaussian(rng, dim, dim, s),
        gaussian(rng, dim, dim, s),
        gaussian(rng, dim, dim, s),
    )
    .expect("square weights")
}

pub fn cast<F: Real>(a: &Array2<f64>) -> Array2<F> {
    a.mapv(F::lit)
}

/// Model used by the gradient check: depth 2, width 16, three scenes of (2 text, 4 video).
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig { depth: 2, dim: 16, heads: 2, text_vocab: 5, token_dim: 3, max_t: 50, max_len: 18 }
}

pub fn gradcheck_layout() -> SegmentLayout {
    SegmentLayout::uniform(3, 2, 4).unwrap()
}

/// Two samples; the conditional form keeps scenes 1 and 2 clean at `t = 0`.
pub fn gradcheck_batch(config: &ModelConfig, layout: &SegmentLayout, conditional: bool, seed: u64) -> Vec<BatchSample<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = layout.n();
    (0..2)
        .map(|_| {
            let text_ids = (0..n)
                .map(|i| (0..layout.text_lens()[i]).map(|_| rng.gen_range(0..config.text_vocab)).collect())
                .collect();
            let clean = gaussian(&mut rng, layout.video_total(), config.token_dim, 1.0);
            let eps = gaussian(&mut rng, layout.video_total(), config.token_dim, 1.0);
            let timesteps: Vec<usize> = if conditional {
                let mut ts = vec![0; n];
                ts[n - 1] = rng.gen_range(1..config.max_t);
                ts
            } else {
                vec![rng.gen_range(1..config.max_t); n]
            };
            BatchSample {
                text_ids,
                clean,
                eps,
                timesteps,
                loss_mask: build_conditional_mask(n, conditional).unwrap(),
            }
        })
        .collect()
}

pub fn cast_batch<F: Real>(batch: &[BatchSample<f64>]) -> Vec<BatchSample<F>> {
    batch
        .iter()
        .map(|s| BatchSample {
            text_ids: s.text_ids.clone(),
            clean: cast(&s.clean),
            eps: cast(&s.eps),
            timesteps: s.timesteps.clone(),
            loss_mask: s.loss_mask.clone(),
        })
        .collect()
}

/// Worst entrywise relative error `|a - n| / max(|a|, |n|, floor)` and the tensor it occurred in.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

/// Central differences of the batch loss in `f64`, with one Richardson refinement:
/// `(4 D(h/2) - D(h)) / 3`.
pub fn finite_difference_grads(
    params: &ModelParams<f64>,
    layout: &SegmentLayout,
    routing: AttentionRouting<'_>,
    batch: &[BatchSample<f64>],
    sched: &NoiseSchedule,
) -> Vec<(String, Vec<f64>)> {
    let loss = |p: &ModelParams<f64>| batch_loss(p, layout, routing, batch, sched);
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let mut out = Vec::new();
    let mut work = params.clone();
    for (ti, name) in names.iter().enumerate() {
        let len = work.tensors_mut()[ti].len();
        let mut g = Vec::with_capacity(len);
        for k in 0..len {
            let orig = entry(&mut work, ti, k, None);
            let h = 1e-3 * orig.abs().max(1.0);
            let mut central = |step: f64| {
                entry(&mut work, ti, k, Some(orig + step));
                let plus = loss(&work);
                entry(&mut work, ti, k, Some(orig - step));
                let minus = loss(&work);
                entry(&mut work, ti, k, Some(orig));
                (plus - minus) / (2.0 * step)
            };
            let coarse = central(h);
            let fine = central(h / 2.0);
            g.push((4.0 * fine - coarse) / 3.0);
        }
        out.push((name.clone(), g));
    }
    out
}

/// Forward-only batch-mean masked loss.
pub fn batch_loss(
    params: &ModelParams<f64>,
    layout: &SegmentLayout,
    routing: AttentionRouting<'_>,
    batch: &[BatchSample<f64>],
    sched: &NoiseSchedule,
) -> f64 {
    let total: f64 = batch
        .iter()
        .map(|s| {
            let z = s.noised_input(layout, sched).unwrap();
            let target = s.velocity(layout, sched).unwrap();
            let input = SequenceInput { text_ids: &s.text_ids, video: z.view(), timesteps: &s.timesteps };
            let pred = forward(params, layout, routing, &input).unwrap();
            masked_v_loss(pred.view(), target.view(), &s.loss_mask, layout).unwrap()
        })
        .sum();
    total / batch.len() as f64
}

/// Reads (and optionally overwrites) entry `k` of tensor `ti`, returning the old value.
fn entry(p: &mut ModelParams<f64>, ti: usize, k: usize, set: Option<f64>) -> f64 {
    let mut views = p.tensors_mut();
    let slot = &mut views[ti].as_slice_mut().expect("parameters are contiguous")[k];
    let old = *slot;
    if let Some(v) = set {
        *slot = v;
    }
    old
}

pub fn compare_grads<F: Real>(analytic: &ModelParams<F>, numeric: &[(String, Vec<f64>)], floor: f64) -> GradReport {
    let mut report = GradReport { max_rel: 0.0, worst: String::new(), checked: 0 };
    for ((name, a), (_, n)) in analytic.tensors().into_iter().zip(numeric) {
        for (&a, &n) in a.iter().zip(n) {
            let a = a.to_f64().unwrap();
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = name.clone();
            }
        }
    }
    report
}
