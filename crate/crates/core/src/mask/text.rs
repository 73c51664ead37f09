//! ASCII mask format: first line is the decimal side length `L`, followed by `L`
//! newline-terminated lines of exactly `L` characters from `{0, 1}`.

use std::fmt::Write;

use thiserror::Error;

use super::attention_mask::{AttentionMask, MaskError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MaskParseError {
    #[error("malformed header line `{0}`")]
    Header(String),
    #[error("expected {expected} rows, found {got}")]
    RowCount { expected: usize, got: usize },
    #[error("line {line}: expected {expected} characters, found {got}")]
    Ragged {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("line {line}: invalid character {ch:?}")]
    BadChar { line: usize, ch: char },
    #[error("missing trailing newline")]
    Unterminated,
    #[error(transparent)]
    Invalid(#[from] MaskError),
}

pub fn serialize_mask(mask: &AttentionMask) -> String {
    let len = mask.len();
    let mut out = String::with_capacity((len + 1) * (len + 1) + 8);
    writeln!(out, "{len}").unwrap();
    for q in 0..len {
        out.extend((0..len).map(|k| if mask.get(q, k) { '1' } else { '0' }));
        out.push('\n');
    }
    out
}

pub fn parse_mask(text: &str) -> Result<AttentionMask, MaskParseError> {
    let body = text.strip_suffix('\n').ok_or(MaskParseError::Unterminated)?;
    let mut lines = body.split('\n');
    let header = lines.next().unwrap_or_default();
    let len: usize = header
        .parse()
        .map_err(|_| MaskParseError::Header(header.to_string()))?;
    if len == 0 {
        return Err(MaskParseError::Header(header.to_string()));
    }
    let mut rows = Vec::with_capacity(len);
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        if line.len() != len {
            return Err(MaskParseError::Ragged {
                line: line_no,
                expected: len,
                got: line.chars().count(),
            });
        }
        let row = line
            .chars()
            .map(|ch| match ch {
                '0' => Ok(false),
                '1' => Ok(true),
                ch => Err(MaskParseError::BadChar { line: line_no, ch }),
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    if rows.len() != len {
        return Err(MaskParseError::RowCount {
            expected: len,
            got: rows.len(),
        });
    }
    Ok(AttentionMask::from_rows(&rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{build_attention_mask, MaskVariant, SegmentLayout};

    #[test]
    fn all_ones_two_by_two() {
        let text = serialize_mask(&AttentionMask::ones(2));
        assert_eq!(text, "2\n11\n11\n");
        assert_eq!(parse_mask(&text).unwrap(), AttentionMask::ones(2));
    }

    #[test]
    fn v2_round_trip() {
        let layout = SegmentLayout::uniform(2, 2, 3).unwrap();
        let mask = build_attention_mask(&layout, MaskVariant::V2);
        assert_eq!(parse_mask(&serialize_mask(&mask)).unwrap(), mask);
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(
            parse_mask("3\n111\n11\n111\n"),
            Err(MaskParseError::Ragged { line: 3, .. })
        ));
        assert!(matches!(parse_mask("x\n1\n"), Err(MaskParseError::Header(_))));
        assert!(matches!(
            parse_mask("2\n1a\n11\n"),
            Err(MaskParseError::BadChar { ch: 'a', .. })
        ));
        assert!(matches!(
            parse_mask("2\n11\n"),
            Err(MaskParseError::RowCount { expected: 2, got: 1 })
        ));
        assert!(matches!(parse_mask("2\n11\n11"), Err(MaskParseError::Unterminated)));
        assert!(matches!(
            parse_mask("2\n10\n11\n"),
            Err(MaskParseError::Invalid(MaskError::Asymmetric { .. }))
        ));
    }
}
