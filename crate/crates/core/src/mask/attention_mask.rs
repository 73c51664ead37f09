use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use super::layout::{Block, SegmentLayout};

/// The five block-structured mask variants.
///
/// Every variant is defined by which pairs of token groups may attend to each
/// other; the relation is symmetric so every mask is symmetric.
///
/// * `V1`: each scene attends only within its own (text, video) pair.
/// * `V2`: `V1` plus attention between all video groups.
/// * `V3`: `V2` plus attention between all text groups.
/// * `V4`: `V2` plus attention between every text group and every video group.
/// * `V5`: full attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MaskVariant {
    V1,
    V2,
    V3,
    V4,
    V5,
}

impl MaskVariant {
    pub const ALL: [MaskVariant; 5] = [
        MaskVariant::V1,
        MaskVariant::V2,
        MaskVariant::V3,
        MaskVariant::V4,
        MaskVariant::V5,
    ];

    /// Whether tokens of group `a` may attend to tokens of group `b`.
    pub fn permits(self, a: Block, b: Block) -> bool {
        use Block::*;
        let same_scene = a.scene() == b.scene();
        let both_video = matches!((a, b), (Video(_), Video(_)));
        let both_text = matches!((a, b), (Text(_), Text(_)));
        match self {
            MaskVariant::V1 => same_scene,
            MaskVariant::V2 => same_scene || both_video,
            MaskVariant::V3 => same_scene || both_video || both_text,
            MaskVariant::V4 => same_scene || !both_text,
            MaskVariant::V5 => true,
        }
    }
}

impl fmt::Display for MaskVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MaskVariant::V1 => "V1",
            MaskVariant::V2 => "V2",
            MaskVariant::V3 => "V3",
            MaskVariant::V4 => "V4",
            MaskVariant::V5 => "V5",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown mask variant `{0}`, expected one of V1..V5")]
pub struct UnknownVariant(pub String);

impl FromStr for MaskVariant {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "V1" | "1" => Ok(MaskVariant::V1),
            "V2" | "2" => Ok(MaskVariant::V2),
            "V3" | "3" => Ok(MaskVariant::V3),
            "V4" | "4" => Ok(MaskVariant::V4),
            "V5" | "5" => Ok(MaskVariant::V5),
            _ => Err(UnknownVariant(s.to_string())),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MaskError {
    #[error("mask must have at least one row")]
    Empty,
    #[error("row {row} has length {got}, expected {expected}")]
    Ragged {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("mask is not symmetric at ({q}, {k})")]
    Asymmetric { q: usize, k: usize },
    #[error("diagonal entry {0} is not set")]
    MissingDiagonal(usize),
}

/// Dense `L x L` binary attention mask stored as packed 64-bit rows.
#[derive(Clone, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    words: usize,
    bits: Vec<u64>,
}

impl fmt::Debug for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AttentionMask")
            .field("len", &self.len)
            .field("popcount", &self.popcount())
            .finish()
    }
}

impl AttentionMask {
    fn zeros(len: usize) -> Self {
        let words = len.div_ceil(64);
        AttentionMask {
            len,
            words,
            bits: vec![0; len * words],
        }
    }

    pub fn ones(len: usize) -> Self {
        let mut mask = Self::zeros(len);
        for q in 0..len {
            for k in 0..len {
                mask.set(q, k);
            }
        }
        mask
    }

    /// Builds a mask from boolean rows and checks every mask invariant.
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self, MaskError> {
        let len = rows.len();
        if len == 0 {
            return Err(MaskError::Empty);
        }
        let mut mask = Self::zeros(len);
        for (q, row) in rows.iter().enumerate() {
            if row.len() != len {
                return Err(MaskError::Ragged {
                    row: q,
                    got: row.len(),
                    expected: len,
                });
            }
            for (k, &on) in row.iter().enumerate() {
                if on {
                    mask.set(q, k);
                }
            }
        }
        mask.validate()?;
        Ok(mask)
    }

    /// Builds a mask from square boolean rows without checking symmetry or the diagonal.
    pub(crate) fn from_rows_unchecked(rows: &[Vec<bool>]) -> Self {
        let mut mask = Self::zeros(rows.len());
        for (q, row) in rows.iter().enumerate() {
            for (k, _) in row.iter().enumerate().filter(|(_, &on)| on) {
                mask.set(q, k);
            }
        }
        mask
    }

    pub(crate) fn set(&mut self, q: usize, k: usize) {
        self.bits[q * self.words + k / 64] |= 1u64 << (k % 64);
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.words + k / 64] >> (k % 64) & 1 == 1
    }

    /// Symmetric, unit diagonal (which implies a permitted key in every row).
    pub fn validate(&self) -> Result<(), MaskError> {
        for q in 0..self.len {
            if !self.get(q, q) {
                return Err(MaskError::MissingDiagonal(q));
            }
            for k in q + 1..self.len {
                if self.get(q, k) != self.get(k, q) {
                    return Err(MaskError::Asymmetric { q, k });
                }
            }
        }
        Ok(())
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// True when every permitted pair of `self` is also permitted in `other`.
    pub fn is_subset_of(&self, other: &AttentionMask) -> bool {
        self.len == other.len
            && self
                .bits
                .iter()
                .zip(&other.bits)
                .all(|(a, b)| a & !b == 0)
    }

    /// Bytes a dense packed-bit mask of this size occupies.
    pub fn storage_bytes(&self) -> usize {
        (self.len * self.len).div_ceil(8)
    }
}

/// Expands the block rules of `variant` over `layout`.
pub fn build_attention_mask(layout: &SegmentLayout, variant: MaskVariant) -> AttentionMask {
    let mut mask = AttentionMask::zeros(layout.total_len());
    for a in layout.blocks() {
        for b in layout.blocks() {
            if variant.permits(a, b) {
                for q in layout.span(a) {
                    for k in layout.span(b) {
                        mask.set(q, k);
                    }
                }
            }
        }
    }
    debug_assert!(mask.validate().is_ok());
    mask
}

pub fn mask_popcount(mask: &AttentionMask) -> usize {
    mask.popcount()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::layout::build_layout;

    /// Independent enumeration: classify each index directly from lengths and test
    /// the rule table without going through `Block` spans.
    fn enumerate_popcount(text: &[usize], video: &[usize], variant: MaskVariant) -> usize {
        let mut kinds = Vec::new();
        for (i, &t) in text.iter().enumerate() {
            kinds.extend(std::iter::repeat((false, i)).take(t));
        }
        for (i, &v) in video.iter().enumerate() {
            kinds.extend(std::iter::repeat((true, i)).take(v));
        }
        let mut count = 0;
        for &(qv, qi) in &kinds {
            for &(kv, ki) in &kinds {
                let allowed = match variant {
                    MaskVariant::V1 => qi == ki,
                    MaskVariant::V2 => qi == ki || (qv && kv),
                    MaskVariant::V3 => qi == ki || qv == kv,
                    MaskVariant::V4 => qi == ki || qv || kv,
                    MaskVariant::V5 => true,
                };
                count += allowed as usize;
            }
        }
        count
    }

    #[test]
    fn single_scene_is_all_ones() {
        let layout = build_layout(1, &[3], &[5]).unwrap();
        for v in MaskVariant::ALL {
            assert_eq!(build_attention_mask(&layout, v), AttentionMask::ones(8));
        }
    }

    #[test]
    fn two_scene_popcounts() {
        assert_eq!(enumerate_popcount(&[2, 2], &[3, 3], MaskVariant::V1), 50);
        assert_eq!(enumerate_popcount(&[2, 2], &[3, 3], MaskVariant::V2), 68);
        let layout = build_layout(2, &[2, 2], &[3, 3]).unwrap();
        assert_eq!(
            mask_popcount(&build_attention_mask(&layout, MaskVariant::V1)),
            50
        );
        assert_eq!(
            mask_popcount(&build_attention_mask(&layout, MaskVariant::V2)),
            68
        );
        assert_eq!(mask_popcount(&AttentionMask::ones(4)), 16);
    }

    #[test]
    fn popcount_matches_enumeration_for_ragged_layouts() {
        let text = [1, 3, 2];
        let video = [4, 1, 2];
        let layout = build_layout(3, &text, &video).unwrap();
        for v in MaskVariant::ALL {
            assert_eq!(
                build_attention_mask(&layout, v).popcount(),
                enumerate_popcount(&text, &video, v),
                "{v}"
            );
        }
    }

    #[test]
    fn v1_is_block_diagonal_over_pairs() {
        let layout = build_layout(3, &[1, 2, 1], &[2, 3, 1]).unwrap();
        let mask = build_attention_mask(&layout, MaskVariant::V1);
        let scenes = layout.scene_of_tokens();
        for q in 0..layout.total_len() {
            for k in 0..layout.total_len() {
                assert_eq!(mask.get(q, k), scenes[q] == scenes[k]);
            }
        }
    }

    #[test]
    fn from_rows_validates() {
        assert_eq!(
            AttentionMask::from_rows(&[vec![true, true], vec![false, true]]),
            Err(MaskError::Asymmetric { q: 0, k: 1 })
        );
        assert_eq!(
            AttentionMask::from_rows(&[vec![false, false], vec![false, true]]),
            Err(MaskError::MissingDiagonal(0))
        );
        assert!(matches!(
            AttentionMask::from_rows(&[vec![true], vec![true, true]]),
            Err(MaskError::Ragged { .. })
        ));
        assert_eq!(AttentionMask::from_rows(&[]), Err(MaskError::Empty));
    }

    #[test]
    fn variant_names() {
        assert_eq!("v3".parse::<MaskVariant>(), Ok(MaskVariant::V3));
        assert!("V6".parse::<MaskVariant>().is_err());
        assert_eq!(MaskVariant::V4.to_string(), "V4");
    }

    #[test]
    fn wide_masks_pack_across_words() {
        let layout = build_layout(2, &[40, 30], &[50, 20]).unwrap();
        let mask = build_attention_mask(&layout, MaskVariant::V2);
        assert_eq!(
            mask.popcount(),
            enumerate_popcount(&[40, 30], &[50, 20], MaskVariant::V2)
        );
        assert!(mask.validate().is_ok());
        assert_eq!(mask.storage_bytes(), (140 * 140 + 7) / 8);
    }
}
