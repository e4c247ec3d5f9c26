use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tasks::{Instance, TaskSpec};
use crate::decoder::{decode, DecodeConfig, DecodeMode};
use crate::error::{invalid_config, invalid_input, Result};
use crate::guidance::GuidanceConfig;
use crate::model::Model;
use crate::types::TokenId;

pub const CSV_HEADER: &str = "task,mode,rho,w,seed,n,exact_match,token_accuracy,mean_commit_step,wall_ms";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalOptions {
    /// Worker threads; `0` uses every core.
    pub jobs: usize,
    /// Record wall time. Off by default so reports are reproducible byte for
    /// byte; `wall_ms` is then 0.
    pub timing: bool,
}

impl EvalOptions {
    pub fn sequential() -> Self {
        Self { jobs: 1, timing: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceOutcome {
    pub index: usize,
    pub generated: Vec<TokenId>,
    pub exact: bool,
    pub correct_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub mode: DecodeMode,
    pub guidance: GuidanceConfig,
    pub seed: u64,
    pub n_instances: usize,
    pub exact_match: f64,
    pub token_accuracy: f64,
    pub mean_commit_step: f64,
    pub wall_ms: u64,
    pub outcomes: Vec<InstanceOutcome>,
}

fn mode_name(mode: DecodeMode) -> &'static str {
    match mode {
        DecodeMode::None => "none",
        DecodeMode::StaticCfg => "static_cfg",
        DecodeMode::Acfg => "acfg",
    }
}

impl EvalReport {
    /// Guidance parameters as reported: unguided decoding has no effective
    /// `rho` or `w`, and static CFG masks everything, i.e. `rho = 1`.
    pub fn effective_rho_w(&self) -> (f64, f64) {
        match self.mode {
            DecodeMode::None => (0.0, 0.0),
            DecodeMode::StaticCfg => (1.0, self.guidance.w),
            DecodeMode::Acfg => (self.guidance.rho, self.guidance.w),
        }
    }

    pub fn csv_row(&self) -> String {
        let (rho, w) = self.effective_rho_w();
        format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.6},{}",
            self.task,
            mode_name(self.mode),
            rho,
            w,
            self.seed,
            self.n_instances,
            self.exact_match,
            self.token_accuracy,
            self.mean_commit_step,
            self.wall_ms
        )
    }

    /// Same decoded outputs and metrics, ignoring configuration labels and
    /// wall time.
    pub fn same_outcome(&self, other: &EvalReport) -> bool {
        self.n_instances == other.n_instances
            && self.exact_match == other.exact_match
            && self.token_accuracy == other.token_accuracy
            && self.mean_commit_step == other.mean_commit_step
            && self.outcomes == other.outcomes
    }
}

pub fn reports_to_csv<'a>(reports: impl IntoIterator<Item = &'a EvalReport>) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Seed for instance `index`, so results do not depend on which worker
/// decodes which instance.
fn instance_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn evaluate<M: Model + ?Sized>(
    model: &M,
    task: &TaskSpec,
    eval: &[Instance],
    cfg: &DecodeConfig,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_with(model, task, eval, cfg, seed, &EvalOptions::sequential())
}

pub fn evaluate_with<M: Model + ?Sized>(
    model: &M,
    task: &TaskSpec,
    eval: &[Instance],
    cfg: &DecodeConfig,
    seed: u64,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    cfg.validate()?;
    let vocab = task.vocab();
    if model.vocab().size() != vocab.size() || model.vocab().mask_id() != vocab.mask_id() {
        return Err(invalid_config(format!(
            "model vocabulary ({} ids, mask {}) does not match task {} ({} ids, mask {})",
            model.vocab().size(),
            model.vocab().mask_id(),
            task.name(),
            vocab.size(),
            vocab.mask_id()
        )));
    }
    if cfg.gen_len != task.answer_len() {
        return Err(invalid_config(format!(
            "gen_len {} does not match the {}-token answers of task {}",
            cfg.gen_len,
            task.answer_len(),
            task.name()
        )));
    }
    if eval.is_empty() {
        return Err(invalid_input("evaluation set is empty"));
    }

    let started = Instant::now();
    let run_one = |(index, inst): (usize, &Instance)| -> Result<(InstanceOutcome, usize)> {
        let mut local = cfg.clone();
        local.sampler = cfg.sampler.reseeded(instance_seed(seed, index));
        let result = decode(model, &inst.prompt, &local)?;
        let generated = result.generated().to_vec();
        let correct_tokens = generated.iter().zip(&inst.answer).filter(|(a, b)| a == b).count();
        let exact = generated == inst.answer;
        let commit_sum = result.commit_step.iter().sum();
        Ok((
            InstanceOutcome {
                index,
                generated,
                exact,
                correct_tokens,
            },
            commit_sum,
        ))
    };
    let results: Vec<(InstanceOutcome, usize)> = if opts.jobs == 1 {
        eval.iter().enumerate().map(run_one).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| invalid_config(format!("cannot start worker pool: {e}")))?;
        pool.install(|| eval.par_iter().enumerate().map(run_one).collect::<Result<_>>())?
    };
    let wall_ms = if opts.timing {
        started.elapsed().as_millis() as u64
    } else {
        0
    };

    let n = eval.len();
    let gen_len = cfg.gen_len;
    let exact = results.iter().filter(|(o, _)| o.exact).count();
    let correct: usize = results.iter().map(|(o, _)| o.correct_tokens).sum();
    let commits: usize = results.iter().map(|(_, c)| c).sum();
    Ok(EvalReport {
        task: task.name().to_string(),
        mode: cfg.mode,
        guidance: cfg.guidance,
        seed,
        n_instances: n,
        exact_match: exact as f64 / n as f64,
        token_accuracy: correct as f64 / (n * gen_len) as f64,
        mean_commit_step: commits as f64 / (n * gen_len) as f64,
        wall_ms,
        outcomes: results.into_iter().map(|(o, _)| o).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub rhos: Vec<f64>,
    pub ws: Vec<f64>,
}

impl Default for AblationGrid {
    /// Five proportions by five guidance scales.
    fn default() -> Self {
        Self {
            rhos: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            ws: vec![0.0, 0.5, 1.0, 1.5, 2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub grid: AblationGrid,
    /// Row-major: one row per `w`, one column per `rho`.
    pub cells: Vec<EvalReport>,
}

impl AblationTable {
    pub fn cell(&self, w_index: usize, rho_index: usize) -> &EvalReport {
        &self.cells[w_index * self.grid.rhos.len() + rho_index]
    }

    pub fn to_csv(&self) -> String {
        reports_to_csv(&self.cells)
    }

    /// Exact-match table, `w` down the side and `rho` across the top.
    pub fn pretty(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:>8}", "w \\ rho");
        for rho in &self.grid.rhos {
            let _ = write!(out, " {rho:>8}");
        }
        out.push('\n');
        for (wi, w) in self.grid.ws.iter().enumerate() {
            let _ = write!(out, "{w:>8}");
            for ri in 0..self.grid.rhos.len() {
                let _ = write!(out, " {:>8.4}", self.cell(wi, ri).exact_match);
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluates adaptive guidance at every `(rho, w)` of the grid, sharing the
/// base decode settings, eval set and seed.
pub fn ablate<M: Model + ?Sized>(
    model: &M,
    task: &TaskSpec,
    eval: &[Instance],
    base: &DecodeConfig,
    grid: &AblationGrid,
    seed: u64,
    opts: &EvalOptions,
) -> Result<AblationTable> {
    if grid.rhos.is_empty() || grid.ws.is_empty() {
        return Err(invalid_config("ablation grid needs at least one rho and one w"));
    }
    let mut cells = Vec::with_capacity(grid.rhos.len() * grid.ws.len());
    for &w in &grid.ws {
        for &rho in &grid.rhos {
            let cfg = base.clone().with_mode(DecodeMode::Acfg).with_guidance(GuidanceConfig {
                w,
                rho,
                ..base.guidance
            });
            cells.push(evaluate_with(model, task, eval, &cfg, seed, opts)?);
        }
    }
    Ok(AblationTable {
        grid: grid.clone(),
        cells,
    })
}
