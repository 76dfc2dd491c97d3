use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::ids::SemanticIdentifier;

/// Disjoint decoder-vocabulary ranges, one per identifier position, followed
/// by a BOS token.
///
/// Position `p` owns `[offset_p, offset_p + size_p)`; BOS is `total()`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LayoutSerde", into = "LayoutSerde")]
pub struct VocabLayout {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutSerde {
    position_sizes: Vec<usize>,
}

impl TryFrom<LayoutSerde> for VocabLayout {
    type Error = CoreError;
    fn try_from(s: LayoutSerde) -> Result<Self> {
        VocabLayout::new(s.position_sizes)
    }
}

impl From<VocabLayout> for LayoutSerde {
    fn from(l: VocabLayout) -> Self {
        LayoutSerde { position_sizes: l.sizes }
    }
}

impl VocabLayout {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(CoreError::invalid(format!("layout sizes must be positive, got {sizes:?}")));
        }
        let offsets = sizes
            .iter()
            .scan(0, |acc, &s| {
                let o = *acc;
                *acc += s;
                Some(o)
            })
            .collect();
        Ok(VocabLayout { sizes, offsets })
    }

    /// Identifier length `J`.
    pub fn id_len(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Number of identifier tokens (the output vocabulary).
    pub fn total(&self) -> usize {
        self.offsets[self.sizes.len() - 1] + self.sizes[self.sizes.len() - 1]
    }

    pub fn bos(&self) -> usize {
        self.total()
    }

    /// Decoder input vocabulary: every identifier token plus BOS.
    pub fn input_vocab(&self) -> usize {
        self.total() + 1
    }

    pub fn range(&self, pos: usize) -> Range<usize> {
        self.offsets[pos]..self.offsets[pos] + self.sizes[pos]
    }

    /// Global token ids of an identifier.
    pub fn to_global(&self, id: &SemanticIdentifier) -> Result<Vec<usize>> {
        if id.len() != self.id_len() {
            return Err(CoreError::invalid(format!("identifier length {} does not match layout length {}", id.len(), self.id_len())));
        }
        id.tokens()
            .iter()
            .enumerate()
            .map(|(p, &t)| {
                if (t as usize) < self.sizes[p] {
                    Ok(self.offsets[p] + t as usize)
                } else {
                    Err(CoreError::invalid(format!("token {t} at position {p} outside range of {}", self.sizes[p])))
                }
            })
            .collect()
    }

    /// Inverse of [`to_global`](Self::to_global); `None` when a token sits
    /// outside its position's range.
    pub fn from_global(&self, tokens: &[usize]) -> Option<SemanticIdentifier> {
        if tokens.len() != self.id_len() {
            return None;
        }
        tokens
            .iter()
            .enumerate()
            .map(|(p, &t)| self.range(p).contains(&t).then(|| (t - self.offsets[p]) as u32))
            .collect::<Option<Vec<u32>>>()
            .map(SemanticIdentifier)
    }

    /// Short stable name for compatibility checks between artifacts.
    pub fn fingerprint(&self) -> String {
        // FNV-1a over the sizes
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &s in &self.sizes {
            for b in (s as u64).to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        let sizes: Vec<String> = self.sizes.iter().map(usize::to_string).collect();
        format!("{}-{:08x}", sizes.join("x"), h as u32)
    }
}
