//! Token sequences, vocabularies and dense row-major score matrices.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Result};

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    mask_id: TokenId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    token_strings: Option<Vec<String>>,
}

impl Vocab {
    pub fn new(size: usize, mask_id: TokenId) -> Result<Self> {
        if size == 0 {
            return Err(invalid_input("vocabulary size must be positive"));
        }
        if mask_id as usize >= size {
            return Err(invalid_input(format!(
                "mask id {mask_id} out of range for vocabulary of size {size}"
            )));
        }
        Ok(Self {
            size,
            mask_id,
            token_strings: None,
        })
    }

    /// Builds a vocabulary from display strings; the mask token is located by
    /// its string.
    pub fn from_strings<S: Into<String>>(tokens: Vec<S>, mask: &str) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mask_id = tokens
            .iter()
            .position(|t| t == mask)
            .ok_or_else(|| invalid_input(format!("mask token {mask:?} missing from vocabulary")))?;
        let mut vocab = Self::new(tokens.len(), mask_id as TokenId)?;
        vocab.token_strings = Some(tokens);
        Ok(vocab)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn token_strings(&self) -> Option<&[String]> {
        self.token_strings.as_deref()
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.mask_id as usize >= self.size {
            return Err(invalid_input("malformed vocabulary"));
        }
        if let Some(strings) = &self.token_strings {
            if strings.len() != self.size {
                return Err(invalid_input(format!(
                    "vocabulary has {} display strings for {} ids",
                    strings.len(),
                    self.size
                )));
            }
        }
        Ok(())
    }

    pub fn render(&self, id: TokenId) -> String {
        match &self.token_strings {
            Some(s) if (id as usize) < s.len() => s[id as usize].clone(),
            _ => id.to_string(),
        }
    }

    pub fn render_all(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&id| self.render(id)).collect::<Vec<_>>().join(" ")
    }

    pub fn lookup(&self, token: &str) -> Option<TokenId> {
        self.token_strings
            .as_ref()?
            .iter()
            .position(|t| t == token)
            .map(|i| i as TokenId)
    }
}

/// A working sequence: the first `prompt_len` positions are the conditioning
/// prompt, the remainder is the region being generated.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    pub prompt_len: usize,
}

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>, prompt_len: usize) -> Result<Self> {
        if prompt_len > ids.len() {
            return Err(invalid_input(format!(
                "prompt length {prompt_len} exceeds sequence length {}",
                ids.len()
            )));
        }
        Ok(Self { ids, prompt_len })
    }

    /// A sequence made entirely of prompt.
    pub fn prompt(ids: Vec<TokenId>) -> Self {
        let prompt_len = ids.len();
        Self { ids, prompt_len }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.ids[self.prompt_len..]
    }

    pub fn count_masks(&self, mask_id: TokenId) -> usize {
        self.ids.iter().filter(|&&t| t == mask_id).count()
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        if self.prompt_len > self.ids.len() {
            return Err(invalid_input("prompt length exceeds sequence length"));
        }
        if let Some((pos, id)) = self.ids.iter().enumerate().find(|(_, &id)| id as usize >= vocab.size()) {
            return Err(invalid_input(format!(
                "token {id} at position {pos} outside vocabulary of size {}",
                vocab.size()
            )));
        }
        Ok(())
    }
}

/// Dense row-major matrix of `f32`; one row per sequence position, one column
/// per vocabulary id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

/// Raw model scores.
pub type LogitMatrix = Matrix;
/// Row-stochastic matrix produced by [`crate::guidance::softmax_rows`].
pub type ProbMatrix = Matrix;

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid_input(format!(
                "matrix data of length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: Vec<Vec<f32>>) -> Result<Self> {
        let n = rows.len();
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(invalid_input(format!(
                "row {bad} has {} columns, expected {cols}",
                rows[bad].len()
            )));
        }
        Ok(Self {
            rows: n,
            cols,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact panics on zero chunk size
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_rows(&self) -> Vec<Vec<f32>> {
        self.iter_rows().map(<[f32]>::to_vec).collect()
    }

    /// Largest absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> Option<f32> {
        if self.shape() != other.shape() {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max),
        )
    }

    pub(crate) fn check_shape(&self, rows: usize, cols: usize, what: &str) -> Result<()> {
        if self.shape() != (rows, cols) {
            return Err(invalid_input(format!(
                "{what} has shape {}x{}, expected {rows}x{cols}",
                self.rows, self.cols
            )));
        }
        Ok(())
    }

    pub(crate) fn check_finite(&self, what: &str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(invalid_input(format!(
                "{what} has non-finite value at row {}, column {}",
                i / self.cols.max(1),
                i % self.cols.max(1)
            )));
        }
        Ok(())
    }
}
