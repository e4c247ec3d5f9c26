//! One guidance step over a working sequence.
//!
//! Standard classifier-free guidance extrapolates from an unconditional
//! prediction toward the conditional one:
//!
//! ```text
//! guided = uncond + (w + 1) * (cond - uncond)
//! ```
//!
//! The adaptive variant builds its unconditional input per step: the
//! non-mask tokens the model is least confident about (under the
//! conditional logits) are re-masked in a temporary copy of the sequence,
//! and that copy is what the model sees for the unconditional pass. The
//! static baseline instead masks every non-mask token.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Result};
use crate::model::{checked_logits, Model};
use crate::types::{LogitMatrix, ProbMatrix, TokenId, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMetric {
    /// Largest probability in the position's distribution.
    #[default]
    ArgmaxProb,
    /// Probability assigned to the token currently at the position.
    CurrentTokenProb,
    /// `sum p ln p`, i.e. entropy negated so that higher means more confident.
    NegEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemaskScope {
    /// Every non-mask position, prompt included.
    #[default]
    AllNonmask,
    /// Non-mask positions in the generated region only.
    GeneratedOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Guidance scale. `0` disables guidance.
    pub w: f64,
    /// Fraction of remaskable tokens re-masked for the unconditional pass.
    pub rho: f64,
    pub metric: ConfidenceMetric,
    pub scope: RemaskScope,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            w: 0.5,
            rho: 0.7,
            metric: ConfidenceMetric::default(),
            scope: RemaskScope::default(),
        }
    }
}

impl GuidanceConfig {
    pub fn new(w: f64, rho: f64) -> Self {
        Self {
            w,
            rho,
            ..Self::default()
        }
    }

    pub fn with_metric(mut self, metric: ConfidenceMetric) -> Self {
        self.metric = metric;
        self
    }

    pub fn with_scope(mut self, scope: RemaskScope) -> Self {
        self.scope = scope;
        self
    }

    pub fn validate(&self) -> Result<()> {
        validate_rho(self.rho)?;
        validate_w(self.w)
    }
}

fn validate_rho(rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(invalid_config(format!("rho must lie in [0, 1], got {rho}")));
    }
    Ok(())
}

fn validate_w(w: f64) -> Result<()> {
    if !w.is_finite() || w < 0.0 {
        return Err(invalid_config(format!(
            "guidance scale must be finite and non-negative, got {w}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceEntry {
    pub position: usize,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceStepResult {
    pub guided: LogitMatrix,
    pub cond: LogitMatrix,
    pub uncond: LogitMatrix,
    /// The sequence the unconditional logits were computed from.
    pub uncond_input: TokenSeq,
    /// Re-masked positions, ascending.
    pub remasked: Vec<usize>,
    pub confidences: Vec<ConfidenceEntry>,
    /// Number of model evaluations performed (1 or 2).
    pub model_calls: usize,
}

/// Row-wise softmax with max subtraction. Accumulates in `f64`.
pub fn softmax_rows(logits: &LogitMatrix) -> Result<ProbMatrix> {
    logits.check_finite("logits")?;
    let mut out = LogitMatrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = row.iter().map(|&x| (x as f64 - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (o, e) in out.row_mut(i).iter_mut().zip(&exps) {
            *o = (e / sum) as f32;
        }
    }
    Ok(out)
}

fn score_row(row: &[f32], current: TokenId, metric: ConfidenceMetric) -> f32 {
    match metric {
        ConfidenceMetric::ArgmaxProb => row.iter().copied().fold(0.0, f32::max),
        ConfidenceMetric::CurrentTokenProb => row[current as usize],
        ConfidenceMetric::NegEntropy => row
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p as f64 * (p as f64).ln())
            .sum::<f64>() as f32,
    }
}

/// Positions eligible for re-masking under `scope`, ascending.
pub fn remaskable_positions(seq: &TokenSeq, mask_id: TokenId, scope: RemaskScope) -> Vec<usize> {
    let start = match scope {
        RemaskScope::AllNonmask => 0,
        RemaskScope::GeneratedOnly => seq.prompt_len,
    };
    (start..seq.len()).filter(|&j| seq.ids[j] != mask_id).collect()
}

/// Scores every remaskable position of `seq` from its row of `probs`.
pub fn token_confidences(
    probs: &ProbMatrix,
    seq: &TokenSeq,
    mask_id: TokenId,
    cfg: &GuidanceConfig,
) -> Result<Vec<ConfidenceEntry>> {
    if probs.rows() != seq.len() {
        return Err(invalid_input(format!(
            "probability matrix has {} rows for a {}-token sequence",
            probs.rows(),
            seq.len()
        )));
    }
    if let Some(&bad) = seq.ids.iter().find(|&&t| t as usize >= probs.cols()) {
        return Err(invalid_input(format!(
            "token {bad} outside the {}-column probability matrix",
            probs.cols()
        )));
    }
    Ok(remaskable_positions(seq, mask_id, cfg.scope)
        .into_iter()
        .map(|j| ConfidenceEntry {
            position: j,
            score: score_row(probs.row(j), seq.ids[j], cfg.metric),
        })
        .collect())
}

/// `min(ceil(rho * n), n)`.
///
/// A relative slack of 1e-9 is taken off the product before rounding up so
/// that decimal proportions such as 0.3 or 0.7, which are not exact in binary,
/// do not round up past the intended count.
pub fn target_remask_count(rho: f64, n: usize) -> Result<usize> {
    validate_rho(rho)?;
    if n == 0 {
        return Ok(0);
    }
    let product = rho * n as f64;
    let target = (product - 1e-9 * product.max(1.0)).ceil().max(0.0) as usize;
    Ok(target.min(n))
}

/// The `count` entries with the smallest score, ties going to the lower
/// position. Returned positions are ascending.
pub fn select_low_confidence(entries: &[ConfidenceEntry], count: usize) -> Result<Vec<usize>> {
    if count > entries.len() {
        return Err(invalid_input(format!(
            "cannot select {count} of {} confidence entries",
            entries.len()
        )));
    }
    let mut order: Vec<&ConfidenceEntry> = entries.iter().collect();
    order.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.position.cmp(&b.position)));
    let mut picked: Vec<usize> = order[..count].iter().map(|e| e.position).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Copy of `seq` with the given positions replaced by the mask token.
pub fn build_uncond_input(seq: &TokenSeq, remasked: &[usize], mask_id: TokenId) -> Result<TokenSeq> {
    let mut out = seq.clone();
    for &j in remasked {
        match out.ids.get_mut(j) {
            None => {
                return Err(invalid_input(format!(
                    "re-mask position {j} outside sequence of length {}",
                    seq.len()
                )))
            }
            Some(t) if *t == mask_id => return Err(invalid_input(format!("position {j} is already masked"))),
            Some(t) => *t = mask_id,
        }
    }
    Ok(out)
}

/// `uncond + (w + 1) * (cond - uncond)`, elementwise.
///
/// Evaluated as `cond + w * (cond - uncond)` in `f64`, which is the same
/// expression rearranged; `w = 0` and `uncond == cond` then return `cond`
/// bit for bit.
pub fn apply_cfg(uncond: &LogitMatrix, cond: &LogitMatrix, w: f64) -> Result<LogitMatrix> {
    validate_w(w)?;
    uncond.check_shape(cond.rows(), cond.cols(), "unconditional logits")?;
    let data: Vec<f32> = cond
        .as_slice()
        .iter()
        .zip(uncond.as_slice())
        .map(|(&c, &u)| {
            let c = c as f64;
            (c + w * (c - u as f64)) as f32
        })
        .collect();
    let out = LogitMatrix::from_vec(cond.rows(), cond.cols(), data)?;
    out.check_finite("guided logits")?;
    Ok(out)
}

/// One adaptive guidance step.
///
/// When nothing is re-masked the unconditional input equals `seq`, so the
/// conditional logits are reused and the model is called once.
pub fn acfg_step<M: Model + ?Sized>(model: &M, seq: &TokenSeq, cfg: &GuidanceConfig) -> Result<GuidanceStepResult> {
    cfg.validate()?;
    let mask_id = model.vocab().mask_id();
    let cond = checked_logits(model, seq)?;
    let probs = softmax_rows(&cond)?;
    let confidences = token_confidences(&probs, seq, mask_id, cfg)?;
    let count = target_remask_count(cfg.rho, confidences.len())?;
    let remasked = select_low_confidence(&confidences, count)?;
    finish_step(model, seq, cond, confidences, remasked, cfg.w)
}

/// Standard CFG: the unconditional input masks every non-mask token,
/// prompt included.
pub fn static_cfg_step<M: Model + ?Sized>(model: &M, seq: &TokenSeq, w: f64) -> Result<GuidanceStepResult> {
    validate_w(w)?;
    let mask_id = model.vocab().mask_id();
    let cond = checked_logits(model, seq)?;
    let probs = softmax_rows(&cond)?;
    let cfg = GuidanceConfig::new(w, 1.0);
    let confidences = token_confidences(&probs, seq, mask_id, &cfg)?;
    let remasked = remaskable_positions(seq, mask_id, RemaskScope::AllNonmask);
    finish_step(model, seq, cond, confidences, remasked, w)
}

fn finish_step<M: Model + ?Sized>(
    model: &M,
    seq: &TokenSeq,
    cond: LogitMatrix,
    confidences: Vec<ConfidenceEntry>,
    remasked: Vec<usize>,
    w: f64,
) -> Result<GuidanceStepResult> {
    let mask_id = model.vocab().mask_id();
    let uncond_input = build_uncond_input(seq, &remasked, mask_id)?;
    let (uncond, model_calls) = if remasked.is_empty() {
        (cond.clone(), 1)
    } else {
        (checked_logits(model, &uncond_input)?, 2)
    };
    let guided = apply_cfg(&uncond, &cond, w)?;
    Ok(GuidanceStepResult {
        guided,
        cond,
        uncond,
        uncond_input,
        remasked,
        confidences,
        model_calls,
    })
}
