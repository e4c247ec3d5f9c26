//! Count-based masked-context model.
//!
//! Predicts the token at a position from the `radius` symbols on each side of
//! it, where symbols include the mask token and boundary sentinels. Training
//! mimics masked-denoising exposure: each sequence is seen once clean and
//! then `masking_samples` times corrupted at a masking ratio drawn uniformly
//! from `[0, 1)`, and every position of every view contributes one
//! `(context, true token)` tuple.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Result};
use crate::model::Model;
use crate::types::{LogitMatrix, TokenId, TokenSeq, Vocab};

const FORMAT: &str = "acfg-count-model";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CountModelConfig {
    pub radius: usize,
    pub alpha: f64,
    /// Corrupted views per training sequence, on top of the clean one.
    pub masking_samples: usize,
}

impl Default for CountModelConfig {
    fn default() -> Self {
        Self {
            radius: 1,
            alpha: 0.1,
            masking_samples: 4,
        }
    }
}

impl CountModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radius == 0 {
            return Err(invalid_config("context radius must be at least 1"));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(invalid_config(format!(
                "smoothing alpha must be positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Where a model's training data came from, so evaluation can regenerate the
/// matching held-out split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingProvenance {
    pub task: String,
    pub seed: u64,
    pub train_size: usize,
    pub eval_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountModel {
    vocab: Vocab,
    radius: usize,
    alpha: f64,
    counts: HashMap<Vec<u32>, Vec<u64>>,
    tuples_observed: u64,
    provenance: Option<TrainingProvenance>,
}

/// Context symbols are token ids, plus two sentinels just past the
/// vocabulary.
fn bos(vocab: &Vocab) -> u32 {
    vocab.size() as u32
}

fn eos(vocab: &Vocab) -> u32 {
    vocab.size() as u32 + 1
}

fn context_into(vocab: &Vocab, ids: &[TokenId], j: usize, radius: usize, key: &mut Vec<u32>) {
    key.clear();
    for d in (1..=radius).rev() {
        key.push(if j >= d { ids[j - d] } else { bos(vocab) });
    }
    for d in 1..=radius {
        key.push(ids.get(j + d).copied().unwrap_or(eos(vocab)));
    }
}

/// The `(left ++ right context, true token)` stream that training counts.
pub fn training_tuples(
    vocab: &Vocab,
    corpus: &[TokenSeq],
    cfg: &CountModelConfig,
    seed: u64,
) -> Result<Vec<(Vec<u32>, TokenId)>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(invalid_input("training corpus is empty"));
    }
    let mask = vocab.mask_id();
    for (i, seq) in corpus.iter().enumerate() {
        seq.validate(vocab)?;
        if seq.ids.contains(&mask) {
            return Err(invalid_input(format!("training sequence {i} contains the mask token")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut view = Vec::new();
    for seq in corpus {
        for sample in 0..=cfg.masking_samples {
            view.clear();
            view.extend_from_slice(&seq.ids);
            if sample > 0 {
                let t: f64 = rng.gen();
                for tok in view.iter_mut() {
                    if rng.gen::<f64>() < t {
                        *tok = mask;
                    }
                }
            }
            for (j, &truth) in seq.ids.iter().enumerate() {
                let mut key = Vec::with_capacity(2 * cfg.radius);
                context_into(vocab, &view, j, cfg.radius, &mut key);
                out.push((key, truth));
            }
        }
    }
    Ok(out)
}

impl CountModel {
    /// Trains from scratch. Deterministic for a given corpus, config and
    /// seed.
    pub fn train(vocab: Vocab, corpus: &[TokenSeq], cfg: &CountModelConfig, seed: u64) -> Result<Self> {
        vocab.validate()?;
        let tuples = training_tuples(&vocab, corpus, cfg, seed)?;
        Self::from_tuples(vocab, cfg, tuples)
    }

    pub fn from_tuples(
        vocab: Vocab,
        cfg: &CountModelConfig,
        tuples: impl IntoIterator<Item = (Vec<u32>, TokenId)>,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut counts: HashMap<Vec<u32>, Vec<u64>> = HashMap::new();
        let mut observed = 0u64;
        for (key, truth) in tuples {
            if key.len() != 2 * cfg.radius || truth as usize >= vocab.size() {
                return Err(invalid_input("training tuple does not fit the model shape"));
            }
            counts.entry(key).or_insert_with(|| vec![0; vocab.size()])[truth as usize] += 1;
            observed += 1;
        }
        Ok(Self {
            vocab,
            radius: cfg.radius,
            alpha: cfg.alpha,
            counts,
            tuples_observed: observed,
            provenance: None,
        })
    }

    pub fn with_provenance(mut self, provenance: TrainingProvenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    pub fn provenance(&self) -> Option<&TrainingProvenance> {
        self.provenance.as_ref()
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn tuples_observed(&self) -> u64 {
        self.tuples_observed
    }

    pub fn num_contexts(&self) -> usize {
        self.counts.len()
    }

    /// Raw counts for a context key (`radius` left symbols then `radius`
    /// right symbols).
    pub fn counts_for(&self, context: &[u32]) -> Option<&[u64]> {
        self.counts.get(context).map(Vec::as_slice)
    }

    pub fn context_of(&self, ids: &[TokenId], position: usize) -> Vec<u32> {
        let mut key = Vec::with_capacity(2 * self.radius);
        context_into(&self.vocab, ids, position, self.radius, &mut key);
        key
    }

    fn fill_row(&self, counts: Option<&Vec<u64>>, out: &mut [f32]) {
        let v = self.vocab.size() as f64;
        match counts {
            None => out.fill((1.0 / v).ln() as f32),
            Some(c) => {
                let total = c.iter().sum::<u64>() as f64 + self.alpha * v;
                for (o, &n) in out.iter_mut().zip(c) {
                    *o = ((n as f64 + self.alpha) / total).ln() as f32;
                }
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_json(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_json(BufReader::new(File::open(path)?))
    }

    pub fn write_json(&self, w: impl Write) -> Result<()> {
        let mut table: Vec<TableEntry> = self
            .counts
            .iter()
            .map(|(k, c)| TableEntry {
                context: k.clone(),
                counts: c.clone(),
            })
            .collect();
        table.sort_by(|a, b| a.context.cmp(&b.context));
        let file = ModelFile {
            format: FORMAT.to_string(),
            version: VERSION,
            vocab: self.vocab.clone(),
            radius: self.radius,
            alpha: self.alpha,
            tuples_observed: self.tuples_observed,
            provenance: self.provenance.clone(),
            table,
        };
        serde_json::to_writer(w, &file)?;
        Ok(())
    }

    pub fn read_json(r: impl Read) -> Result<Self> {
        let file: ModelFile = serde_json::from_reader(r)?;
        if file.format != FORMAT {
            return Err(invalid_config(format!(
                "not a count model file (format {:?})",
                file.format
            )));
        }
        if file.version != VERSION {
            return Err(invalid_config(format!(
                "count model file version {} is not supported (expected {VERSION})",
                file.version
            )));
        }
        file.vocab.validate()?;
        let cfg = CountModelConfig {
            radius: file.radius,
            alpha: file.alpha,
            masking_samples: 0,
        };
        cfg.validate()?;
        let max_symbol = eos(&file.vocab);
        let mut counts = HashMap::with_capacity(file.table.len());
        for entry in file.table {
            if entry.context.len() != 2 * file.radius
                || entry.context.iter().any(|&s| s > max_symbol)
                || entry.counts.len() != file.vocab.size()
            {
                return Err(invalid_input("count model table entry has the wrong shape"));
            }
            counts.insert(entry.context, entry.counts);
        }
        Ok(Self {
            vocab: file.vocab,
            radius: file.radius,
            alpha: file.alpha,
            counts,
            tuples_observed: file.tuples_observed,
            provenance: file.provenance,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    context: Vec<u32>,
    counts: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    vocab: Vocab,
    radius: usize,
    alpha: f64,
    tuples_observed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<TrainingProvenance>,
    table: Vec<TableEntry>,
}

impl Model for CountModel {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn logits(&self, seq: &TokenSeq) -> Result<LogitMatrix> {
        seq.validate(&self.vocab)?;
        let mut out = LogitMatrix::zeros(seq.len(), self.vocab.size());
        let mut key = Vec::with_capacity(2 * self.radius);
        for j in 0..seq.len() {
            context_into(&self.vocab, &seq.ids, j, self.radius, &mut key);
            self.fill_row(self.counts.get(&key), out.row_mut(j));
        }
        Ok(out)
    }
}
