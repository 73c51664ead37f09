//! Mask-free execution plan for block-structured attention.
//!
//! Each of the `2n` token groups becomes one cross-attention: its query rows attend
//! to the concatenation of the key/value spans its mask rows permit. Adjacent
//! spans are merged, so under `V2` a video group reads its own text group plus a
//! single contiguous range covering every video group.

use std::ops::Range;

use thiserror::Error;

use super::attention_mask::{AttentionMask, MaskVariant};
use super::layout::SegmentLayout;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("query spans do not tile [0, {len}): index {index} is covered {count} times")]
    NotAPartition {
        len: usize,
        index: usize,
        count: usize,
    },
    #[error("span {start}..{end} is empty or exceeds sequence length {len}")]
    OutOfRange { start: usize, end: usize, len: usize },
    #[error("group {group} has no key/value span")]
    NoKeys { group: usize },
    #[error("plan covers {plan} tokens but input has {input} rows")]
    LengthMismatch { plan: usize, input: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionGroup {
    pub query: Range<usize>,
    pub kv: Vec<Range<usize>>,
}

impl AttentionGroup {
    pub fn kv_len(&self) -> usize {
        self.kv.iter().map(|r| r.len()).sum()
    }

    /// Key/value row indices in concatenation order.
    pub fn kv_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.kv.iter().flat_map(|r| r.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupedPlan {
    len: usize,
    groups: Vec<AttentionGroup>,
}

impl GroupedPlan {
    /// Validates that query spans partition `[0, len)` and every span is in range.
    pub fn new(len: usize, groups: Vec<AttentionGroup>) -> Result<Self, PlanError> {
        let mut cover = vec![0usize; len];
        for (g, group) in groups.iter().enumerate() {
            for span in std::iter::once(&group.query).chain(&group.kv) {
                if span.start >= span.end || span.end > len {
                    return Err(PlanError::OutOfRange {
                        start: span.start,
                        end: span.end,
                        len,
                    });
                }
            }
            if group.kv.is_empty() {
                return Err(PlanError::NoKeys { group: g });
            }
            for i in group.query.clone() {
                cover[i] += 1;
            }
        }
        if let Some((index, &count)) = cover.iter().enumerate().find(|(_, &c)| c != 1) {
            return Err(PlanError::NotAPartition { len, index, count });
        }
        Ok(GroupedPlan { len, groups })
    }

    /// Single group attending over the whole sequence.
    pub fn full(len: usize) -> Self {
        GroupedPlan {
            len,
            groups: vec![AttentionGroup {
                query: 0..len,
                kv: vec![0..len],
            }],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn groups(&self) -> &[AttentionGroup] {
        &self.groups
    }

    /// Union of `query x kv` rectangles as a dense mask. Test and reporting helper.
    pub fn reconstruct_mask(&self) -> AttentionMask {
        let mut rows = vec![vec![false; self.len]; self.len];
        for group in &self.groups {
            for q in group.query.clone() {
                for k in group.kv_indices() {
                    rows[q][k] = true;
                }
            }
        }
        AttentionMask::from_rows_unchecked(&rows)
    }

    /// Number of score entries evaluated when executing the plan.
    pub fn score_entries(&self) -> usize {
        self.groups
            .iter()
            .map(|g| g.query.len() * g.kv_len())
            .sum()
    }
}

fn merge_spans(mut spans: Vec<Range<usize>>) -> Vec<Range<usize>> {
    spans.sort_by_key(|r| r.start);
    let mut merged: Vec<Range<usize>> = Vec::with_capacity(spans.len());
    for span in spans {
        match merged.last_mut() {
            Some(last) if last.end == span.start => last.end = span.end,
            _ => merged.push(span),
        }
    }
    merged
}

/// Decomposes the `variant` mask over `layout` into `2n` per-group cross-attentions.
///
/// The mask is never materialized: key/value spans come straight from the block rules.
pub fn build_grouped_plan(layout: &SegmentLayout, variant: MaskVariant) -> GroupedPlan {
    let groups = layout
        .blocks()
        .map(|query| {
            let kv = layout
                .blocks()
                .filter(|&key| variant.permits(query, key))
                .map(|key| layout.span(key))
                .collect();
            AttentionGroup {
                query: layout.span(query),
                kv: merge_spans(kv),
            }
        })
        .collect();
    GroupedPlan::new(layout.total_len(), groups)
        .expect("block rules always produce a partition of the layout")
}
