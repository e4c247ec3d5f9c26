use std::collections::HashMap;

use crate::error::{invalid_input, Result};
use crate::model::Model;
use crate::types::{LogitMatrix, TokenId, TokenSeq, Vocab};

/// What the mock returns for positions no table entry covers.
#[derive(Debug, Clone, PartialEq)]
pub enum MockFallback {
    /// The same row everywhere.
    Row(Vec<f32>),
    /// Pseudo-random logits in `[-scale, scale]`, a pure function of the
    /// whole sequence, the position and the vocabulary id. Changing any token
    /// changes every row.
    Hashed { seed: u64, scale: f32 },
}

/// Table-driven test double.
///
/// Lookup order: an exact whole-sequence entry, then a `(position, token)`
/// entry for the row, then the fallback.
#[derive(Debug, Clone)]
pub struct MockTableModel {
    vocab: Vocab,
    sequences: HashMap<Vec<TokenId>, LogitMatrix>,
    positions: HashMap<(usize, TokenId), Vec<f32>>,
    fallback: MockFallback,
}

impl MockTableModel {
    pub fn new(vocab: Vocab, fallback: MockFallback) -> Self {
        Self {
            vocab,
            sequences: HashMap::new(),
            positions: HashMap::new(),
            fallback,
        }
    }

    pub fn with_sequence(mut self, ids: Vec<TokenId>, logits: LogitMatrix) -> Self {
        self.sequences.insert(ids, logits);
        self
    }

    /// Row returned at `position` whenever that position holds `token`.
    pub fn with_position(mut self, position: usize, token: TokenId, row: Vec<f32>) -> Self {
        self.positions.insert((position, token), row);
        self
    }

    fn fallback_row(&self, seq_hash: u64, position: usize, out: &mut [f32]) {
        match &self.fallback {
            MockFallback::Row(row) => out.copy_from_slice(row),
            MockFallback::Hashed { seed, scale } => {
                let base = mix(mix(*seed ^ seq_hash) ^ position as u64);
                for (v, o) in out.iter_mut().enumerate() {
                    let bits = mix(base ^ (v as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    let unit = (bits >> 40) as f32 / (1u64 << 24) as f32;
                    *o = scale * (2.0 * unit - 1.0);
                }
            }
        }
    }
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash_ids(ids: &[TokenId]) -> u64 {
    ids.iter().fold(mix(ids.len() as u64), |h, &t| mix(h ^ t as u64))
}

impl Model for MockTableModel {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn logits(&self, seq: &TokenSeq) -> Result<LogitMatrix> {
        let cols = self.vocab.size();
        if let Some(m) = self.sequences.get(&seq.ids) {
            m.check_shape(seq.len(), cols, "mock table entry")?;
            return Ok(m.clone());
        }
        if let MockFallback::Row(row) = &self.fallback {
            if row.len() != cols {
                return Err(invalid_input("mock fallback row has the wrong width"));
            }
        }
        let seq_hash = hash_ids(&seq.ids);
        let mut out = LogitMatrix::zeros(seq.len(), cols);
        for (j, &tok) in seq.ids.iter().enumerate() {
            match self.positions.get(&(j, tok)) {
                Some(row) if row.len() == cols => out.row_mut(j).copy_from_slice(row),
                Some(_) => return Err(invalid_input("mock position row has the wrong width")),
                None => self.fallback_row(seq_hash, j, out.row_mut(j)),
            }
        }
        Ok(out)
    }
}
