//! Grouped-vs-dense equivalence check and workload benchmark.

use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use m2dt_core::attention::{attention_workload, grouped_attention, masked_attention_dense, AttentionRouting, AttentionWeights};
use m2dt_core::mask::{build_attention_mask, build_grouped_plan, AttentionGroup, GroupedPlan, MaskVariant, SegmentLayout};
use m2dt_core::num::{max_abs_diff, randn};

pub const VERIFY_TOLERANCE: f32 = 1e-5;

/// Drops the last key of the first group that has more than one, so the plan no
/// longer matches its mask.
pub fn break_plan(plan: &GroupedPlan) -> GroupedPlan {
    let mut groups: Vec<AttentionGroup> = plan.groups().to_vec();
    if let Some(g) = groups.iter_mut().find(|g| g.kv_len() > 1) {
        let last = g.kv.last_mut().expect("kv_len > 1");
        if last.len() > 1 {
            last.end -= 1;
        } else {
            g.kv.pop();
        }
    }
    GroupedPlan::new(plan.len(), groups).expect("still a valid partition")
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub trials: usize,
    pub max_abs_diff: f32,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.max_abs_diff <= VERIFY_TOLERANCE
    }
}

pub fn verify(
    layout: &SegmentLayout,
    variant: MaskVariant,
    dim: usize,
    heads: usize,
    trials: usize,
    seed: u64,
    broken: bool,
) -> Result<VerifyReport, String> {
    let mask = build_attention_mask(layout, variant);
    let mut plan = build_grouped_plan(layout, variant);
    if broken {
        plan = break_plan(&plan);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f32;
    for _ in 0..trials {
        let w = AttentionWeights::<f32>::random(dim, heads, &mut rng);
        w.validate().map_err(|e| e.to_string())?;
        let x: Array2<f32> = randn(&mut rng, layout.total_len(), dim, 1.0);
        let dense = masked_attention_dense(x.view(), &w, &mask).map_err(|e| e.to_string())?;
        let grouped = grouped_attention(x.view(), &w, &plan).map_err(|e| e.to_string())?;
        worst = worst.max(max_abs_diff(dense.view(), grouped.view()));
    }
    Ok(VerifyReport { trials, max_abs_diff: worst })
}

pub const BENCH_HEADER: &str = "variant,L,dense_entries,grouped_entries,dense_ms,grouped_ms,mask_bytes_saved";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub variant: MaskVariant,
    pub len: usize,
    pub dense_entries: usize,
    pub grouped_entries: usize,
    pub dense_ms: f64,
    pub grouped_ms: f64,
    pub mask_bytes_saved: usize,
}

impl std::fmt::Display for BenchRow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{},{},{},{},{:.4},{:.4},{}",
            self.variant, self.len, self.dense_entries, self.grouped_entries, self.dense_ms, self.grouped_ms, self.mask_bytes_saved
        )
    }
}

pub fn bench(
    layout: &SegmentLayout,
    variant: MaskVariant,
    dim: usize,
    heads: usize,
    repeat: usize,
    seed: u64,
) -> Result<BenchRow, String> {
    if repeat == 0 {
        return Err("--repeat must be at least 1".into());
    }
    let mask = build_attention_mask(layout, variant);
    let plan = build_grouped_plan(layout, variant);
    let dense_load = attention_workload(AttentionRouting::Dense(&mask));
    let grouped_load = attention_workload(AttentionRouting::Grouped(&plan));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = AttentionWeights::<f32>::random(dim, heads, &mut rng);
    w.validate().map_err(|e| e.to_string())?;
    let x: Array2<f32> = randn(&mut rng, layout.total_len(), dim, 1.0);
    let time = |f: &dyn Fn()| {
        let start = Instant::now();
        for _ in 0..repeat {
            f();
        }
        start.elapsed().as_secs_f64() * 1e3 / repeat as f64
    };
    let dense_ms = time(&|| {
        std::hint::black_box(masked_attention_dense(x.view(), &w, &mask).expect("shapes checked"));
    });
    let grouped_ms = time(&|| {
        std::hint::black_box(grouped_attention(x.view(), &w, &plan).expect("shapes checked"));
    });
    Ok(BenchRow {
        variant,
        len: layout.total_len(),
        dense_entries: dense_load.score_entries,
        grouped_entries: grouped_load.score_entries,
        dense_ms,
        grouped_ms,
        mask_bytes_saved: dense_load.mask_bytes - grouped_load.mask_bytes,
    })
}
