//! Multi-head scaled dot-product attention over a packed token sequence.
//!
//! Two execution routes compute the same function:
//!
//! * the dense route scores every `(query, key)` pair and suppresses disallowed
//!   pairs through the `L x L` [`AttentionMask`];
//! * the grouped route runs one cross-attention per [`GroupedPlan`] group, reading
//!   only the permitted key/value rows, and never allocates an `L x L` structure.
//!
//! Both share one kernel (`attend_unit`) so the model can backpropagate through
//! either route.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use thiserror::Error;

use crate::mask::{AttentionMask, GroupedPlan};
use crate::num::{all_finite, randn, Real};

pub type TokenMatrix<F> = Array2<F>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("input has {rows} rows but the mask/plan covers {expected} tokens")]
    LengthMismatch { rows: usize, expected: usize },
    #[error("input width {got} does not match attention width {expected}")]
    WidthMismatch { got: usize, expected: usize },
    #[error("width {dim} is not divisible by {heads} heads")]
    Heads { dim: usize, heads: usize },
    #[error("projection `{0}` has the wrong shape")]
    Shape(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty input")]
    Empty,
}

/// Per-head projections stored side by side: head `h` uses columns
/// `h * head_dim .. (h + 1) * head_dim` of `wq`, `wk` and `wv`, and rows of the same
/// range of `wo`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<F> {
    pub heads: usize,
    pub wq: Array2<F>,
    pub wk: Array2<F>,
    pub wv: Array2<F>,
    pub wo: Array2<F>,
}

impl<F: Real> AttentionWeights<F> {
    pub fn new(
        heads: usize,
        wq: Array2<F>,
        wk: Array2<F>,
        wv: Array2<F>,
        wo: Array2<F>,
    ) -> Result<Self, AttentionError> {
        let w = AttentionWeights { heads, wq, wk, wv, wo };
        w.validate()?;
        Ok(w)
    }

    /// Gaussian weights with standard deviation `1/sqrt(dim)`.
    pub fn random<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        AttentionWeights {
            heads,
            wq: randn(rng, dim, dim, scale),
            wk: randn(rng, dim, dim, scale),
            wv: randn(rng, dim, dim, scale),
            wo: randn(rng, dim, dim, scale),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn validate(&self) -> Result<(), AttentionError> {
        let dim = self.wq.nrows();
        if self.heads == 0 || dim == 0 || dim % self.heads != 0 {
            return Err(AttentionError::Heads { dim, heads: self.heads });
        }
        for (name, m) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)] {
            if m.dim() != (dim, dim) {
                return Err(AttentionError::Shape(name));
            }
            if !all_finite(m.view()) {
                return Err(AttentionError::NonFinite(name));
            }
        }
        Ok(())
    }
}

/// Which route executes the attention.
#[derive(Debug, Clone, Copy)]
pub enum AttentionRouting<'a> {
    Dense(&'a AttentionMask),
    Grouped(&'a GroupedPlan),
}

impl AttentionRouting<'_> {
    pub fn len(&self) -> usize {
        match self {
            AttentionRouting::Dense(m) => m.len(),
            AttentionRouting::Grouped(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Score entries evaluated and mask bytes held by one attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Workload {
    pub score_entries: usize,
    pub mask_bytes: usize,
}

pub fn attention_workload(routing: AttentionRouting<'_>) -> Workload {
    match routing {
        AttentionRouting::Dense(mask) => Workload {
            score_entries: mask.len() * mask.len(),
            mask_bytes: mask.storage_bytes(),
        },
        AttentionRouting::Grouped(plan) => Workload {
            score_entries: plan.score_entries(),
            mask_bytes: 0,
        },
    }
}

/// One query block attending to a list of key rows.
struct Unit<'a> {
    queries: std::ops::Range<usize>,
    keys: Vec<usize>,
    mask: Option<&'a AttentionMask>,
}

fn units<'a>(routing: AttentionRouting<'a>) -> Vec<Unit<'a>> {
    match routing {
        AttentionRouting::Dense(mask) => vec![Unit {
            queries: 0..mask.len(),
            keys: (0..mask.len()).collect(),
            mask: Some(mask),
        }],
        AttentionRouting::Grouped(plan) => plan
            .groups()
            .iter()
            .map(|g| Unit {
                queries: g.query.clone(),
                keys: g.kv_indices().collect(),
                mask: None,
            })
            .collect(),
    }
}

fn gather<F: Real>(m: &Array2<F>, rows: &[usize]) -> Array2<F> {
    // contiguous spans are the common case; avoid the index walk for them
    if let (Some(&first), Some(&last)) = (rows.first(), rows.last()) {
        if last + 1 - first == rows.len() {
            return m.slice(s![first..=last, ..]).to_owned();
        }
    }
    m.select(Axis(0), rows)
}

/// Row softmax of `scores` in place; when `mask` is given, entries whose key is
/// disallowed for the query get an additive large-negative bias after the
/// max-subtraction, which underflows to an exact zero weight.
fn softmax_rows<F: Real>(
    scores: &mut Array2<F>,
    queries: &std::ops::Range<usize>,
    keys: &[usize],
    mask: Option<&AttentionMask>,
) {
    for (r, mut row) in scores.axis_iter_mut(Axis(0)).enumerate() {
        let q = queries.start + r;
        let allowed = |c: usize| mask.map_or(true, |m| m.get(q, keys[c]));
        let max = row
            .iter()
            .enumerate()
            .filter(|&(c, _)| allowed(c))
            .fold(F::neg_infinity(), |m, (_, &v)| m.max(v));
        let mut sum = F::zero();
        for (c, v) in row.iter_mut().enumerate() {
            let mut shifted = *v - max;
            if !allowed(c) {
                shifted += F::mask_bias();
            }
            *v = shifted.exp();
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
}

/// Intermediate values kept by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache<F> {
    x: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Concatenated head outputs before the output projection.
    heads_out: Array2<F>,
    /// Attention probabilities per unit, per head.
    probs: Vec<Vec<Array2<F>>>,
}

impl<F: Real> AttentionCache<F> {
    /// Attention probabilities of unit `unit` and head `head` (rows = queries of the unit).
    pub fn probs(&self, unit: usize, head: usize) -> &Array2<F> {
        &self.probs[unit][head]
    }
}

fn check_inputs<F: Real>(
    x: ArrayView2<F>,
    w: &AttentionWeights<F>,
    len: usize,
) -> Result<(), AttentionError> {
    if x.is_empty() {
        return Err(AttentionError::Empty);
    }
    if x.nrows() != len {
        return Err(AttentionError::LengthMismatch {
            rows: x.nrows(),
            expected: len,
        });
    }
    if x.ncols() != w.dim() {
        return Err(AttentionError::WidthMismatch {
            got: x.ncols(),
            expected: w.dim(),
        });
    }
    if !all_finite(x) {
        return Err(AttentionError::NonFinite("input"));
    }
    w.validate()
}

/// Forward pass through either route, returning the output and the backward cache.
pub fn attention_forward<F: Real>(
    x: ArrayView2<F>,
    w: &AttentionWeights<F>,
    routing: AttentionRouting<'_>,
) -> Result<(Array2<F>, AttentionCache<F>), AttentionError> {
    check_inputs(x, w, routing.len())?;
    let hd = w.head_dim();
    let scale = F::one() / F::lit(hd as f64).sqrt();
    let q = x.dot(&w.wq);
    let k = x.dot(&w.wk);
    let v = x.dot(&w.wv);
    let mut heads_out = Array2::zeros(x.raw_dim());
    let mut probs = Vec::new();

    for unit in units(routing) {
        let kg = gather(&k, &unit.keys);
        let vg = gather(&v, &unit.keys);
        let mut unit_probs = Vec::with_capacity(w.heads);
        for h in 0..w.heads {
            let cols = h * hd..(h + 1) * hd;
            let qh = q.slice(s![unit.queries.clone(), cols.clone()]);
            let kh = kg.slice(s![.., cols.clone()]);
            let vh = vg.slice(s![.., cols.clone()]);
            let mut p = qh.dot(&kh.t()) * scale;
            softmax_rows(&mut p, &unit.queries, &unit.keys, unit.mask);
            heads_out
                .slice_mut(s![unit.queries.clone(), cols])
                .assign(&p.dot(&vh));
            unit_probs.push(p);
        }
        probs.push(unit_probs);
    }

    let out = heads_out.dot(&w.wo);
    let cache = AttentionCache {
        x: x.to_owned(),
        q,
        k,
        v,
        heads_out,
        probs,
    };
    Ok((out, cache))
}

/// Gradients of an attention call with respect to its input and weights.
#[derive(Debug, Clone)]
pub struct AttentionGrads<F> {
    pub dx: Array2<F>,
    pub wq: Array2<F>,
    pub wk: Array2<F>,
    pub wv: Array2<F>,
    pub wo: Array2<F>,
}

pub fn attention_backward<F: Real>(
    cache: &AttentionCache<F>,
    w: &AttentionWeights<F>,
    routing: AttentionRouting<'_>,
    d_out: ArrayView2<F>,
) -> AttentionGrads<F> {
    let hd = w.head_dim();
    let scale = F::one() / F::lit(hd as f64).sqrt();
    let d_wo = cache.heads_out.t().dot(&d_out);
    let d_heads = d_out.dot(&w.wo.t());
    let mut dq = Array2::<F>::zeros(cache.q.raw_dim());
    let mut dk = Array2::<F>::zeros(cache.k.raw_dim());
    let mut dv = Array2::<F>::zeros(cache.v.raw_dim());

    for (u, unit) in units(routing).into_iter().enumerate() {
        let kg = gather(&cache.k, &unit.keys);
        let vg = gather(&cache.v, &unit.keys);
        let mut dkg = Array2::<F>::zeros(kg.raw_dim());
        let mut dvg = Array2::<F>::zeros(vg.raw_dim());
        for h in 0..w.heads {
            let cols = h * hd..(h + 1) * hd;
            let p = &cache.probs[u][h];
            let qh = cache.q.slice(s![unit.queries.clone(), cols.clone()]);
            let kh = kg.slice(s![.., cols.clone()]);
            let vh = vg.slice(s![.., cols.clone()]);
            let d_oh = d_heads.slice(s![unit.queries.clone(), cols.clone()]);

            let dp = d_oh.dot(&vh.t());
            dvg.slice_mut(s![.., cols.clone()]).assign(&p.t().dot(&d_oh));
            let mut ds = dp;
            for (mut ds_row, p_row) in ds.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
                let dot = ds_row
                    .iter()
                    .zip(p_row.iter())
                    .fold(F::zero(), |acc, (&a, &b)| acc + a * b);
                Zip::from(&mut ds_row)
                    .and(&p_row)
                    .for_each(|d, &pv| *d = pv * (*d - dot) * scale);
            }
            dq.slice_mut(s![unit.queries.clone(), cols.clone()])
                .assign(&ds.dot(&kh));
            dkg.slice_mut(s![.., cols]).assign(&ds.t().dot(&qh));
        }
        for (r, &key) in unit.keys.iter().enumerate() {
            let mut dk_row = dk.row_mut(key);
            dk_row += &dkg.row(r);
            let mut dv_row = dv.row_mut(key);
            dv_row += &dvg.row(r);
        }
    }

    let x = &cache.x;
    let dx = dq.dot(&w.wq.t()) + dk.dot(&w.wk.t()) + dv.dot(&w.wv.t());
    AttentionGrads {
        dx,
        wq: x.t().dot(&dq),
        wk: x.t().dot(&dk),
        wv: x.t().dot(&dv),
        wo: d_wo,
    }
}

/// Reference masked multi-head self-attention over the full sequence.
pub fn masked_attention_dense<F: Real>(
    x: ArrayView2<F>,
    w: &AttentionWeights<F>,
    mask: &AttentionMask,
) -> Result<TokenMatrix<F>, AttentionError> {
    attention_forward(x, w, AttentionRouting::Dense(mask)).map(|(out, _)| out)
}

/// Per-group cross-attention driven by `plan`; no `L x L` mask or score matrix is built.
pub fn grouped_attention<F: Real>(
    x: ArrayView2<F>,
    w: &AttentionWeights<F>,
    plan: &GroupedPlan,
) -> Result<TokenMatrix<F>, AttentionError> {
    attention_forward(x, w, AttentionRouting::Grouped(plan)).map(|(out, _)| out)
}

/// Dense attention that also returns each head's `L x L` probability matrix.
pub fn dense_attention_probs<F: Real>(
    x: ArrayView2<F>,
    w: &AttentionWeights<F>,
    mask: &AttentionMask,
) -> Result<(TokenMatrix<F>, Vec<Array2<F>>), AttentionError> {
    let (out, cache) = attention_forward(x, w, AttentionRouting::Dense(mask))?;
    let probs = cache.probs.into_iter().next().unwrap_or_default();
    Ok((out, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{build_attention_mask, build_grouped_plan, MaskVariant, SegmentLayout};
    use crate::num::max_abs_diff;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(dim: usize, heads: usize, rows: usize, seed: u64) -> (Array2<f64>, AttentionWeights<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = AttentionWeights::random(dim, heads, &mut rng);
        (randn(&mut rng, rows, dim, 1.0), w)
    }

    /// Unmasked attention written out longhand with scalar loops.
    fn naive_attention(x: &Array2<f64>, w: &AttentionWeights<f64>, allowed: &dyn Fn(usize, usize) -> bool) -> Array2<f64> {
        let (q, k, v) = (x.dot(&w.wq), x.dot(&w.wk), x.dot(&w.wv));
        let hd = w.head_dim();
        let n = x.nrows();
        let mut o = Array2::zeros(x.raw_dim());
        for h in 0..w.heads {
            for i in 0..n {
                let keys: Vec<usize> = (0..n).filter(|&j| allowed(i, j)).collect();
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|&j| (0..hd).map(|c| q[[i, h * hd + c]] * k[[j, h * hd + c]]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (&j, s) in keys.iter().zip(&scores) {
                    let p = (s - m).exp() / z;
                    for c in 0..hd {
                        o[[i, h * hd + c]] += p * v[[j, h * hd + c]];
                    }
                }
            }
        }
        o.dot(&w.wo)
    }

    #[test]
    fn all_ones_mask_equals_unmasked() {
        let (x, w) = setup(8, 2, 7, 1);
        let out = masked_attention_dense(x.view(), &w, &AttentionMask::ones(7)).unwrap();
        let reference = naive_attention(&x, &w, &|_, _| true);
        assert!(max_abs_diff(out.view(), reference.view()) < 1e-12);
        let grouped = grouped_attention(x.view(), &w, &GroupedPlan::full(7)).unwrap();
        assert!(max_abs_diff(grouped.view(), reference.view()) < 1e-12);
    }

    #[test]
    fn v1_equals_independent_pairs() {
        let layout = SegmentLayout::uniform(2, 2, 3).unwrap();
        let (x, w) = setup(8, 2, layout.total_len(), 2);
        let out = masked_attention_dense(x.view(), &w, &build_attention_mask(&layout, MaskVariant::V1)).unwrap();
        for scene in 0..2 {
            let rows: Vec<usize> = layout.text_span(scene).chain(layout.video_span(scene)).collect();
            let pair = x.select(Axis(0), &rows);
            let alone = masked_attention_dense(pair.view(), &w, &AttentionMask::ones(rows.len())).unwrap();
            let joint = out.select(Axis(0), &rows);
            assert!(max_abs_diff(joint.view(), alone.view()) < 1e-12);
        }
    }

    #[test]
    fn single_token_passes_value_through() {
        let (x, w) = setup(4, 1, 1, 3);
        let out = masked_attention_dense(x.view(), &w, &AttentionMask::ones(1)).unwrap();
        let expected = x.dot(&w.wv).dot(&w.wo);
        assert!(max_abs_diff(out.view(), expected.view()) < 1e-12);
    }

    #[test]
    fn grouped_matches_dense_v2_single_precision() {
        let layout = SegmentLayout::uniform(3, 2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = AttentionWeights::<f32>::random(16, 4, &mut rng);
        let x: Array2<f32> = randn(&mut rng, layout.total_len(), 16, 1.0);
        let dense = masked_attention_dense(x.view(), &w, &build_attention_mask(&layout, MaskVariant::V2)).unwrap();
        let grouped = grouped_attention(x.view(), &w, &build_grouped_plan(&layout, MaskVariant::V2)).unwrap();
        assert!(max_abs_diff(dense.view(), grouped.view()) <= 1e-5);
    }

    #[test]
    fn dense_masked_matches_longhand() {
        let layout = SegmentLayout::uniform(3, 1, 2).unwrap();
        let (x, w) = setup(6, 3, layout.total_len(), 5);
        for v in MaskVariant::ALL {
            let mask = build_attention_mask(&layout, v);
            let out = masked_attention_dense(x.view(), &w, &mask).unwrap();
            let reference = naive_attention(&x, &w, &|i, j| mask.get(i, j));
            assert!(max_abs_diff(out.view(), reference.view()) < 1e-12, "{v}");
        }
    }

    #[test]
    fn rows_are_stochastic_over_permitted_keys() {
        let layout = SegmentLayout::uniform(3, 2, 3).unwrap();
        let (x, w) = setup(8, 2, layout.total_len(), 6);
        let mask = build_attention_mask(&layout, MaskVariant::V2);
        let (_, probs) = dense_attention_probs(x.view(), &w, &mask).unwrap();
        for p in probs {
            for q in 0..mask.len() {
                let total: f64 = p.row(q).sum();
                assert!((total - 1.0).abs() < 1e-12);
                for k in 0..mask.len() {
                    if !mask.get(q, k) {
                        assert_eq!(p[[q, k]], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn workload_counts() {
        let layout = SegmentLayout::uniform(2, 2, 3).unwrap();
        let mask = build_attention_mask(&layout, MaskVariant::V2);
        let plan = build_grouped_plan(&layout, MaskVariant::V2);
        assert_eq!(
            attention_workload(AttentionRouting::Dense(&mask)),
            Workload { score_entries: 100, mask_bytes: 13 }
        );
        assert_eq!(
            attention_workload(AttentionRouting::Grouped(&plan)),
            Workload { score_entries: 68, mask_bytes: 0 }
        );
        let full = GroupedPlan::full(10);
        assert_eq!(attention_workload(AttentionRouting::Grouped(&full)).score_entries, 100);

        let layout = SegmentLayout::uniform(3, 2, 4).unwrap();
        let plan = build_grouped_plan(&layout, MaskVariant::V1);
        // text groups 3 * (2 * 6), video groups 3 * (4 * 6)
        assert_eq!(attention_workload(AttentionRouting::Grouped(&plan)).score_entries, 108);
    }

    #[test]
    fn input_errors() {
        let (x, w) = setup(8, 2, 5, 7);
        assert!(matches!(
            masked_attention_dense(x.view(), &w, &AttentionMask::ones(6)),
            Err(AttentionError::LengthMismatch { rows: 5, expected: 6 })
        ));
        let mut bad = x.clone();
        bad[[0, 0]] = f64::NAN;
        assert_eq!(
            grouped_attention(bad.view(), &w, &GroupedPlan::full(5)),
            Err(AttentionError::NonFinite("input"))
        );
        let narrow = x.slice(s![.., 0..4]).to_owned();
        assert!(matches!(
            grouped_attention(narrow.view(), &w, &GroupedPlan::full(5)),
            Err(AttentionError::WidthMismatch { .. })
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let odd = AttentionWeights::<f64>::random(6, 4, &mut rng);
        assert!(matches!(odd.validate(), Err(AttentionError::Heads { .. })));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let layout = SegmentLayout::uniform(2, 1, 2).unwrap();
        let plan = build_grouped_plan(&layout, MaskVariant::V2);
        let mask = build_attention_mask(&layout, MaskVariant::V2);
        let (x, w) = setup(4, 2, layout.total_len(), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let probe: Array2<f64> = randn(&mut rng, x.nrows(), 4, 1.0);
        let loss = |x: &Array2<f64>, w: &AttentionWeights<f64>| -> f64 {
            (grouped_attention(x.view(), w, &plan).unwrap() * &probe).sum()
        };
        for routing in [AttentionRouting::Grouped(&plan), AttentionRouting::Dense(&mask)] {
            let (_, cache) = attention_forward(x.view(), &w, routing).unwrap();
            let g = attention_backward(&cache, &w, routing, probe.view());
            let h = 1e-6;
            for idx in [(0, 0), (2, 3), (4, 1)] {
                let mut xp = x.clone();
                xp[idx] += h;
                let mut xm = x.clone();
                xm[idx] -= h;
                let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h);
                assert!((fd - g.dx[idx]).abs() < 1e-7, "dx {idx:?}");
            }
            for idx in [(0, 1), (3, 2)] {
                for which in 0..4 {
                    let bump = |d: f64| {
                        let mut w2 = w.clone();
                        [&mut w2.wq, &mut w2.wk, &mut w2.wv, &mut w2.wo][which][idx] += d;
                        loss(&x, &w2)
                    };
                    let fd = (bump(h) - bump(-h)) / (2.0 * h);
                    let an = [&g.wq, &g.wk, &g.wv, &g.wo][which][idx];
                    assert!((fd - an).abs() < 1e-7, "weight {which} {idx:?}");
                }
            }
        }
    }
}
