//! Iterative unmasking.
//!
//! Decoding starts from the prompt followed by `gen_len` mask tokens. Each
//! step produces a guided distribution for every still-masked generated
//! position, picks a candidate token per position, and commits only the
//! `reveal_counts[step]` most confident candidates; the rest stay masked
//! and are predicted again next step. Committed tokens never change.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::guidance::{acfg_step, softmax_rows, static_cfg_step, GuidanceConfig};
use crate::model::{checked_logits, Model};
use crate::types::{TokenId, TokenSeq};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSchedule {
    reveal_counts: Vec<usize>,
}

impl MaskSchedule {
    pub fn total_steps(&self) -> usize {
        self.reveal_counts.len()
    }

    pub fn reveal_counts(&self) -> &[usize] {
        &self.reveal_counts
    }

    /// Masks left in the generated region after `step` completes.
    pub fn remaining_after(&self, step: usize) -> usize {
        let total: usize = self.reveal_counts.iter().sum();
        total - self.reveal_counts[..=step].iter().sum::<usize>()
    }
}

/// Even split of `gen_len` reveals over `steps`; the first
/// `gen_len % steps` steps take one extra.
pub fn make_schedule(gen_len: usize, steps: usize) -> Result<MaskSchedule> {
    if gen_len < 1 || steps < 1 {
        return Err(invalid_config(format!(
            "schedule needs gen_len >= 1 and steps >= 1, got {gen_len} and {steps}"
        )));
    }
    let base = gen_len / steps;
    let extra = gen_len % steps;
    Ok(MaskSchedule {
        reveal_counts: (0..steps).map(|k| base + usize::from(k < extra)).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Conditional logits only.
    #[default]
    None,
    /// Classifier-free guidance against a fully masked input.
    StaticCfg,
    /// Adaptive guidance with confidence-driven re-masking.
    Acfg,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    #[default]
    Greedy,
    /// Samples from `p^(1/t)`, renormalized. Draws are keyed by
    /// `(seed, counter)` so any single draw can be reproduced in isolation.
    Temperature { t: f64, seed: u64 },
}

impl Sampler {
    /// Same sampler with its seed replaced; greedy is unchanged.
    pub fn reseeded(self, seed: u64) -> Self {
        match self {
            Sampler::Greedy => Sampler::Greedy,
            Sampler::Temperature { t, .. } => Sampler::Temperature { t, seed },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub gen_len: usize,
    pub steps: usize,
    pub guidance: GuidanceConfig,
    pub mode: DecodeMode,
    pub sampler: Sampler,
    /// `steps` may be at most `gen_len * step_cap`.
    pub step_cap: usize,
}

impl DecodeConfig {
    /// One reveal per step, unguided, greedy.
    pub fn new(gen_len: usize) -> Self {
        Self {
            gen_len,
            steps: gen_len,
            guidance: GuidanceConfig::default(),
            mode: DecodeMode::None,
            sampler: Sampler::Greedy,
            step_cap: 1,
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_mode(mut self, mode: DecodeMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_guidance(mut self, guidance: GuidanceConfig) -> Self {
        self.guidance = guidance;
        self
    }

    pub fn with_sampler(mut self, sampler: Sampler) -> Self {
        self.sampler = sampler;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.gen_len < 1 {
            return Err(invalid_config("gen_len must be at least 1"));
        }
        if self.steps < 1 || self.steps > self.gen_len.saturating_mul(self.step_cap.max(1)) {
            return Err(invalid_config(format!(
                "steps must lie in [1, {}], got {}",
                self.gen_len * self.step_cap.max(1),
                self.steps
            )));
        }
        if let Sampler::Temperature { t, .. } = self.sampler {
            if !(t.is_finite() && t > 0.0) {
                return Err(invalid_config(format!("temperature must be positive, got {t}")));
            }
        }
        self.guidance.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub position: usize,
    pub token: TokenId,
    /// Probability of `token` under the guided distribution.
    pub confidence: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    /// One candidate per generated position that was masked at the start of
    /// the step, ascending by position.
    pub candidates: Vec<Candidate>,
    /// Positions re-masked for the unconditional pass (adaptive mode only).
    pub acfg_remasked: Vec<usize>,
    /// Positions committed this step, ascending.
    pub revealed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub final_seq: TokenSeq,
    pub traces: Vec<StepTrace>,
    /// Step at which each generated position was committed, indexed from
    /// the start of the generated region.
    pub commit_step: Vec<usize>,
    pub schedule: MaskSchedule,
}

impl DecodeResult {
    pub fn generated(&self) -> &[TokenId] {
        self.final_seq.generated()
    }
}

/// Picks a token from a probability row and reports its probability.
///
/// Greedy takes the argmax, ties to the lower id. `counter` keys the
/// temperature draw.
pub fn sample_token(dist: &[f32], sampler: &Sampler, counter: u64) -> Result<(TokenId, f32)> {
    if dist.is_empty() {
        return Err(invalid_input("empty distribution"));
    }
    if dist.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(invalid_input("distribution has non-finite or negative mass"));
    }
    let argmax = dist
        .iter()
        .enumerate()
        .fold(0, |best, (i, &p)| if p > dist[best] { i } else { best });
    let token = match *sampler {
        Sampler::Greedy => argmax,
        Sampler::Temperature { t, seed } => {
            let inv = 1.0 / t;
            let weights: Vec<f64> = dist.iter().map(|&p| (p as f64).powf(inv)).collect();
            let total: f64 = weights.iter().sum();
            if !(total.is_finite() && total > 0.0) {
                argmax
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(counter);
                let target = rng.gen::<f64>() * total;
                let mut acc = 0.0;
                let mut pick = None;
                for (i, &wt) in weights.iter().enumerate() {
                    acc += wt;
                    if wt > 0.0 && target < acc {
                        pick = Some(i);
                        break;
                    }
                }
                pick.unwrap_or_else(|| weights.iter().rposition(|&wt| wt > 0.0).unwrap_or(argmax))
            }
        }
    };
    Ok((token as TokenId, dist[token]))
}

fn draw_counter(step: usize, position: usize) -> u64 {
    ((step as u64) << 32) | position as u64
}

/// Runs the full decode loop for one prompt.
///
/// The whole of `prompt.ids` is treated as conditioning. The mask token is
/// never emitted: its probability is dropped and the rest renormalized
/// before sampling.
pub fn decode<M: Model + ?Sized>(model: &M, prompt: &TokenSeq, cfg: &DecodeConfig) -> Result<DecodeResult> {
    cfg.validate()?;
    let vocab = model.vocab();
    let mask = vocab.mask_id();
    prompt.validate(vocab)?;
    if prompt.ids.contains(&mask) {
        return Err(invalid_input("prompt contains the mask token"));
    }
    let schedule = make_schedule(cfg.gen_len, cfg.steps)?;
    let prompt_len = prompt.ids.len();
    let mut ids = prompt.ids.clone();
    ids.resize(prompt_len + cfg.gen_len, mask);
    let mut seq = TokenSeq::new(ids, prompt_len)?;
    let mut commit_step = vec![usize::MAX; cfg.gen_len];
    let mut traces: Vec<StepTrace> = Vec::with_capacity(cfg.steps);

    for (step, &reveal) in schedule.reveal_counts().iter().enumerate() {
        let outcome = run_step(model, &seq, cfg, step, reveal, mask);
        let trace = match outcome {
            Ok(t) => t,
            Err(source) => {
                return Err(Error::DecodeAborted {
                    step,
                    source: Box::new(source),
                    partial: traces,
                })
            }
        };
        for &j in &trace.revealed {
            let token = trace
                .candidates
                .iter()
                .find(|c| c.position == j)
                .map(|c| c.token)
                .expect("revealed position has a candidate");
            seq.ids[j] = token;
            commit_step[j - prompt_len] = step;
        }
        traces.push(trace);
    }
    debug_assert!(commit_step.iter().all(|&s| s != usize::MAX));
    Ok(DecodeResult {
        final_seq: seq,
        traces,
        commit_step,
        schedule,
    })
}

fn run_step<M: Model + ?Sized>(
    model: &M,
    seq: &TokenSeq,
    cfg: &DecodeConfig,
    step: usize,
    reveal: usize,
    mask: TokenId,
) -> Result<StepTrace> {
    let (guided, acfg_remasked) = match cfg.mode {
        DecodeMode::None => (checked_logits(model, seq)?, Vec::new()),
        DecodeMode::StaticCfg => (static_cfg_step(model, seq, cfg.guidance.w)?.guided, Vec::new()),
        DecodeMode::Acfg => {
            let r = acfg_step(model, seq, &cfg.guidance)?;
            (r.guided, r.remasked)
        }
    };
    let probs = softmax_rows(&guided)?;
    let mut candidates = Vec::new();
    let mut dist = Vec::with_capacity(probs.cols());
    for j in seq.prompt_len..seq.len() {
        if seq.ids[j] != mask {
            continue;
        }
        dist.clear();
        dist.extend_from_slice(probs.row(j));
        let kept = 1.0 - dist[mask as usize] as f64;
        dist[mask as usize] = 0.0;
        if kept > 0.0 {
            for p in dist.iter_mut() {
                *p = (*p as f64 / kept) as f32;
            }
        }
        let (token, confidence) = sample_token(&dist, &cfg.sampler, draw_counter(step, j))?;
        if token == mask {
            return Err(Error::Model(format!(
                "position {j} has no probability mass outside the mask token"
            )));
        }
        candidates.push(Candidate {
            position: j,
            token,
            confidence,
        });
    }
    let mut order: Vec<&Candidate> = candidates.iter().collect();
    order.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.position.cmp(&b.position)));
    let mut revealed: Vec<usize> = order.iter().take(reveal).map(|c| c.position).collect();
    revealed.sort_unstable();
    Ok(StepTrace {
        step,
        candidates,
        acfg_remasked,
        revealed,
    })
}
