//! Segment layouts, block-structured attention masks, their grouped execution
//! plans and the per-segment conditional loss mask.

mod attention_mask;
mod conditional;
mod layout;
mod plan;
mod text;

pub use attention_mask::{
    build_attention_mask, mask_popcount, AttentionMask, MaskError, MaskVariant, UnknownVariant,
};
pub use conditional::{build_conditional_mask, ConditionalMask, ConditionalMaskError};
pub use layout::{build_layout, Block, LayoutError, SegmentLayout};
pub use plan::{build_grouped_plan, AttentionGroup, GroupedPlan, PlanError};
pub use text::{parse_mask, serialize_mask, MaskParseError};
