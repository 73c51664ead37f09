use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConditionalMaskError {
    #[error("conditional mask needs at least one segment")]
    Empty,
    #[error("conditional mask selects no segment")]
    NothingSelected,
}

/// Per-segment loss selector: segment `i` contributes to the loss iff `m[i]` is set.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConditionalMask(Vec<bool>);

/// `conditional = true` gives `[0, .., 0, 1]` (only the last segment is denoised and
/// supervised); `false` gives all ones.
pub fn build_conditional_mask(
    n: usize,
    conditional: bool,
) -> Result<ConditionalMask, ConditionalMaskError> {
    if n == 0 {
        return Err(ConditionalMaskError::Empty);
    }
    let bits = (0..n).map(|i| !conditional || i == n - 1).collect();
    Ok(ConditionalMask(bits))
}

impl ConditionalMask {
    pub fn from_bits(bits: Vec<bool>) -> Result<Self, ConditionalMaskError> {
        if bits.is_empty() {
            return Err(ConditionalMaskError::Empty);
        }
        if !bits.iter().any(|&b| b) {
            return Err(ConditionalMaskError::NothingSelected);
        }
        Ok(ConditionalMask(bits))
    }

    pub fn n(&self) -> usize {
        self.0.len()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn includes(&self, segment: usize) -> bool {
        self.0[segment]
    }

    /// The canonical conditional form `[0, .., 0, 1]`.
    pub fn is_conditional(&self) -> bool {
        let n = self.0.len();
        n > 1 && self.0.iter().enumerate().all(|(i, &b)| b == (i == n - 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_forms() {
        let bits = |m: ConditionalMask| m.bits().to_vec();
        assert_eq!(bits(build_conditional_mask(3, true).unwrap()), [false, false, true]);
        assert_eq!(bits(build_conditional_mask(3, false).unwrap()), [true, true, true]);
        assert_eq!(bits(build_conditional_mask(1, true).unwrap()), [true]);
        assert_eq!(build_conditional_mask(0, true), Err(ConditionalMaskError::Empty));
        assert!(build_conditional_mask(3, true).unwrap().is_conditional());
        assert!(!build_conditional_mask(3, false).unwrap().is_conditional());
    }

    #[test]
    fn rejects_all_zero() {
        assert_eq!(
            ConditionalMask::from_bits(vec![false, false]),
            Err(ConditionalMaskError::NothingSelected)
        );
    }
}
