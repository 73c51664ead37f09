//! Token index geometry of a packed multi-segment sequence.
//!
//! The sequence is laid out as `[text_1, .., text_n, video_1, .., video_n]`: every
//! text group precedes every video group and both blocks are in scene order.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LayoutError {
    #[error("scene count must be at least 1")]
    NoScenes,
    #[error("expected {expected} {kind} lengths, got {got}")]
    LengthMismatch {
        kind: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{kind} length of scene {scene} must be positive")]
    NonPositive { kind: &'static str, scene: usize },
    #[error("malformed layout `{0}`, expected `n=<int>; text=<csv>; video=<csv>`")]
    Malformed(String),
}

/// One token group of the packed sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Block {
    Text(usize),
    Video(usize),
}

impl Block {
    pub fn scene(self) -> usize {
        match self {
            Block::Text(i) | Block::Video(i) => i,
        }
    }

    pub fn is_text(self) -> bool {
        matches!(self, Block::Text(_))
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Block::Text(i) => write!(f, "text_{}", i + 1),
            Block::Video(i) => write!(f, "video_{}", i + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentLayout {
    text_lens: Vec<usize>,
    video_lens: Vec<usize>,
    text_offsets: Vec<usize>,
    video_offsets: Vec<usize>,
    total: usize,
}

/// Builds the layout of `n` scenes with the given per-scene text and video token counts.
pub fn build_layout(
    n: usize,
    text_lens: &[usize],
    video_lens: &[usize],
) -> Result<SegmentLayout, LayoutError> {
    if n == 0 {
        return Err(LayoutError::NoScenes);
    }
    for (kind, lens) in [("text", text_lens), ("video", video_lens)] {
        if lens.len() != n {
            return Err(LayoutError::LengthMismatch {
                kind,
                expected: n,
                got: lens.len(),
            });
        }
        if let Some(scene) = lens.iter().position(|&l| l == 0) {
            return Err(LayoutError::NonPositive { kind, scene });
        }
    }

    let mut cursor = 0;
    let mut offsets = |lens: &[usize]| -> Vec<usize> {
        lens.iter()
            .map(|&l| {
                let start = cursor;
                cursor += l;
                start
            })
            .collect()
    };
    let text_offsets = offsets(text_lens);
    let video_offsets = offsets(video_lens);

    Ok(SegmentLayout {
        text_lens: text_lens.to_vec(),
        video_lens: video_lens.to_vec(),
        text_offsets,
        video_offsets,
        total: cursor,
    })
}

impl SegmentLayout {
    /// Layout where every scene has the same text and video lengths.
    pub fn uniform(n: usize, text_len: usize, video_len: usize) -> Result<Self, LayoutError> {
        build_layout(n, &vec![text_len; n], &vec![video_len; n])
    }

    pub fn n(&self) -> usize {
        self.text_lens.len()
    }

    /// Total sequence length `L`.
    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn text_lens(&self) -> &[usize] {
        &self.text_lens
    }

    pub fn video_lens(&self) -> &[usize] {
        &self.video_lens
    }

    pub fn text_offset(&self, scene: usize) -> usize {
        self.text_offsets[scene]
    }

    pub fn video_offset(&self, scene: usize) -> usize {
        self.video_offsets[scene]
    }

    pub fn text_span(&self, scene: usize) -> Range<usize> {
        let start = self.text_offsets[scene];
        start..start + self.text_lens[scene]
    }

    pub fn video_span(&self, scene: usize) -> Range<usize> {
        let start = self.video_offsets[scene];
        start..start + self.video_lens[scene]
    }

    pub fn span(&self, block: Block) -> Range<usize> {
        match block {
            Block::Text(i) => self.text_span(i),
            Block::Video(i) => self.video_span(i),
        }
    }

    /// Number of text tokens, which is also the index of the first video token.
    pub fn text_total(&self) -> usize {
        self.text_lens.iter().sum()
    }

    pub fn video_total(&self) -> usize {
        self.video_lens.iter().sum()
    }

    /// Span of scene `scene` inside the video-only sub-sequence (video rows stacked in order).
    pub fn video_rows(&self, scene: usize) -> Range<usize> {
        let span = self.video_span(scene);
        let base = self.text_total();
        span.start - base..span.end - base
    }

    /// The `2n` groups in index order: all text groups, then all video groups.
    pub fn blocks(&self) -> impl Iterator<Item = Block> + '_ {
        (0..self.n())
            .map(Block::Text)
            .chain((0..self.n()).map(Block::Video))
    }

    /// Group containing token `index`.
    pub fn block_of(&self, index: usize) -> Option<Block> {
        self.blocks().find(|&b| self.span(b).contains(&index))
    }

    /// Scene of every token, in sequence order.
    pub fn scene_of_tokens(&self) -> Vec<usize> {
        let mut scenes = vec![0; self.total];
        for block in self.blocks() {
            for idx in self.span(block) {
                scenes[idx] = block.scene();
            }
        }
        scenes
    }
}

impl fmt::Display for SegmentLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let csv = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        write!(
            f,
            "n={}; text={}; video={}",
            self.n(),
            csv(&self.text_lens),
            csv(&self.video_lens)
        )
    }
}

fn parse_csv(s: &str) -> Option<Vec<usize>> {
    s.split(',').map(|x| x.trim().parse().ok()).collect()
}

impl FromStr for SegmentLayout {
    type Err = LayoutError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let malformed = || LayoutError::Malformed(s.to_string());
        let mut n = None;
        let mut text = None;
        let mut video = None;
        for part in s.trim().split(';') {
            let (key, value) = part.split_once('=').ok_or_else(malformed)?;
            let value = value.trim();
            match key.trim() {
                "n" => n = Some(value.parse::<usize>().map_err(|_| malformed())?),
                "text" => text = Some(parse_csv(value).ok_or_else(malformed)?),
                "video" => video = Some(parse_csv(value).ok_or_else(malformed)?),
                _ => return Err(malformed()),
            }
        }
        match (n, text, video) {
            (Some(n), Some(text), Some(video)) => build_layout(n, &text, &video),
            _ => Err(malformed()),
        }
    }
}
