use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use acfg::harness::{self, AblationGrid, EvalOptions, Instance, TaskSpec};
use acfg::model::{CountModel, CountModelConfig, Endpoint, RemoteModel, TrainingProvenance};
use acfg::trace::{self, HeatmapData};
use acfg::{decode, ConfidenceMetric, DecodeConfig, DecodeMode, GuidanceConfig, Model, RemaskScope, Sampler, TokenSeq};

use crate::config::{pick, pick_enum, pick_switch, resolve_seed, CliError, ConfigFile};
use crate::{
    AblateArgs, BenchArgs, DataArgs, DecodeArgs, GenerateArgs, MetricArg, ModeArg, ModelArgs, SamplerArg, ScopeArg,
    ServeCheckArgs, TraceDemoArgs, TrainArgs,
};

const DEFAULT_TRAIN_SIZE: usize = 5000;
const DEFAULT_EVAL_SIZE: usize = 500;
const DEFAULT_TIMEOUT_MS: u64 = 30_000;

struct Loaded {
    model: Box<dyn Model>,
    provenance: Option<TrainingProvenance>,
}

fn load_model(args: &ModelArgs, file: &ConfigFile) -> Result<Loaded, CliError> {
    let path = pick(args.model.clone(), file, "model")?;
    let tcp = pick(args.tcp.clone(), file, "tcp")?;
    let command = pick(args.command.clone(), file, "command")?;
    let timeout = Duration::from_millis(pick(args.timeout_ms, file, "timeout_ms")?.unwrap_or(DEFAULT_TIMEOUT_MS));
    match (path, tcp, command) {
        (Some(path), None, None) => {
            let model =
                CountModel::load(&path).map_err(|e| CliError::Runtime(format!("loading {}: {e}", path.display())))?;
            let provenance = model.provenance().cloned();
            Ok(Loaded {
                model: Box::new(model),
                provenance,
            })
        }
        (None, Some(addr), None) => Ok(Loaded {
            model: Box::new(RemoteModel::connect(&Endpoint::Tcp(addr), timeout)?),
            provenance: None,
        }),
        (None, None, Some(cmd)) => Ok(Loaded {
            model: Box::new(RemoteModel::connect(&Endpoint::command(&cmd)?, timeout)?),
            provenance: None,
        }),
        (None, None, None) => Err(CliError::Config(
            "one of --model, --tcp or --command is required".into(),
        )),
        _ => Err(CliError::Config(
            "--model, --tcp and --command are mutually exclusive".into(),
        )),
    }
}

fn resolve_task(
    data: &DataArgs,
    file: &ConfigFile,
    provenance: Option<&TrainingProvenance>,
) -> Result<TaskSpec, CliError> {
    let name = pick(data.task.clone(), file, "task")?
        .or_else(|| provenance.map(|p| p.task.clone()))
        .ok_or_else(|| CliError::Config("--task is required".into()))?;
    TaskSpec::by_name(&name).map_err(|e| CliError::Config(e.to_string()))
}

fn check_vocab(model: &dyn Model, task: &TaskSpec) -> Result<(), CliError> {
    let (have, want) = (model.vocab(), task.vocab());
    if have.size() != want.size() || have.mask_id() != want.mask_id() {
        return Err(CliError::Config(format!(
            "model vocabulary ({} ids, mask {}) does not fit task {} ({} ids, mask {})",
            have.size(),
            have.mask_id(),
            task.name(),
            want.size(),
            want.mask_id()
        )));
    }
    Ok(())
}

/// The held-out set. With provenance the split is regenerated exactly as at
/// training time, so evaluation never sees training sequences.
fn eval_set(
    task: &TaskSpec,
    data: &DataArgs,
    file: &ConfigFile,
    provenance: Option<&TrainingProvenance>,
    seed: u64,
) -> Result<Vec<Instance>, CliError> {
    let eval_size = pick(data.eval_size, file, "eval_size")?;
    let (train_size, full_eval, data_seed) = match provenance.filter(|p| p.task == task.name()) {
        Some(p) => (p.train_size, p.eval_size, p.seed),
        None => (
            0,
            eval_size.unwrap_or(DEFAULT_EVAL_SIZE),
            pick(data.data_seed, file, "data_seed")?.unwrap_or(seed),
        ),
    };
    let n = eval_size.unwrap_or(full_eval);
    if n == 0 || n > full_eval {
        return Err(CliError::Config(format!(
            "--eval-size must be between 1 and {full_eval} for this model"
        )));
    }
    let mut eval = task.generate_dataset(train_size, full_eval, data_seed)?.eval;
    eval.truncate(n);
    Ok(eval)
}

fn decode_config(
    args: &DecodeArgs,
    file: &ConfigFile,
    task: &TaskSpec,
    default_mode: DecodeMode,
) -> Result<(DecodeConfig, u64), CliError> {
    let seed = resolve_seed(args.seed, file)?;
    let gen_len = pick(args.gen_len, file, "gen_len")?.unwrap_or(task.answer_len());
    let steps = pick(args.steps, file, "steps")?.unwrap_or(gen_len);
    let mode = pick_enum(args.mode, file, "mode")?.map_or(default_mode, mode_of);
    let defaults = GuidanceConfig::default();
    let guidance = GuidanceConfig::new(
        pick(args.w, file, "w")?.unwrap_or(defaults.w),
        pick(args.rho, file, "rho")?.unwrap_or(defaults.rho),
    )
    .with_metric(
        pick_enum(args.metric, file, "metric")?.map_or(defaults.metric, |m| match m {
            MetricArg::ArgmaxProb => ConfidenceMetric::ArgmaxProb,
            MetricArg::CurrentTokenProb => ConfidenceMetric::CurrentTokenProb,
            MetricArg::NegEntropy => ConfidenceMetric::NegEntropy,
        }),
    )
    .with_scope(
        pick_enum(args.scope, file, "scope")?.map_or(defaults.scope, |s| match s {
            ScopeArg::AllNonmask => RemaskScope::AllNonmask,
            ScopeArg::GeneratedOnly => RemaskScope::GeneratedOnly,
        }),
    );
    let temperature = pick(args.temperature, file, "temperature")?;
    let sampler = match (pick_enum(args.sampler, file, "sampler")?, temperature) {
        (Some(SamplerArg::Greedy), Some(_)) => {
            return Err(CliError::Config("--temperature needs --sampler temperature".into()))
        }
        (Some(SamplerArg::Greedy), None) | (None, None) => Sampler::Greedy,
        (Some(SamplerArg::Temperature), t) | (None, t @ Some(_)) => Sampler::Temperature {
            t: t.unwrap_or(1.0),
            seed,
        },
    };
    let cfg = DecodeConfig::new(gen_len)
        .with_steps(steps)
        .with_mode(mode)
        .with_guidance(guidance)
        .with_sampler(sampler);
    cfg.validate()?;
    Ok((cfg, seed))
}

fn mode_of(m: ModeArg) -> DecodeMode {
    match m {
        ModeArg::None => DecodeMode::None,
        ModeArg::StaticCfg => DecodeMode::StaticCfg,
        ModeArg::Acfg => DecodeMode::Acfg,
    }
}

fn eval_options(jobs: Option<usize>, timing: bool, file: &ConfigFile) -> Result<EvalOptions, CliError> {
    Ok(EvalOptions {
        jobs: pick(jobs, file, "jobs")?.unwrap_or(0),
        timing,
    })
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(stdout.flush()?)
        }
    }
}

pub fn train(args: TrainArgs, file: &ConfigFile) -> Result<(), CliError> {
    let task = resolve_task(&args.data, file, None)?;
    let seed = resolve_seed(args.seed, file)?;
    let train_size = pick(args.data.train_size, file, "train_size")?.unwrap_or(DEFAULT_TRAIN_SIZE);
    let eval_size = pick(args.data.eval_size, file, "eval_size")?.unwrap_or(DEFAULT_EVAL_SIZE);
    let defaults = CountModelConfig::default();
    let cfg = CountModelConfig {
        radius: pick(args.radius, file, "radius")?.unwrap_or(defaults.radius),
        alpha: pick(args.alpha, file, "alpha")?.unwrap_or(defaults.alpha),
        masking_samples: pick(args.masking_samples, file, "masking_samples")?.unwrap_or(defaults.masking_samples),
    };
    cfg.validate()?;
    let out: PathBuf = pick(args.out, file, "out")?.ok_or_else(|| CliError::Config("--out is required".into()))?;
    if train_size == 0 {
        return Err(CliError::Config("--train-size must be positive".into()));
    }
    let data = task
        .generate_dataset(train_size, eval_size, seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let model = CountModel::train(task.vocab(), &data.train, &cfg, seed)?.with_provenance(TrainingProvenance {
        task: task.name().to_string(),
        seed,
        train_size,
        eval_size,
    });
    model.save(&out)?;
    eprintln!(
        "trained {} model on {train_size} sequences: {} contexts, {} tuples -> {}",
        task.name(),
        model.num_contexts(),
        model.tuples_observed(),
        out.display()
    );
    Ok(())
}

pub fn generate(args: GenerateArgs, file: &ConfigFile) -> Result<(), CliError> {
    let loaded = load_model(&args.model, file)?;
    let task = resolve_task(&args.data, file, loaded.provenance.as_ref())?;
    check_vocab(&*loaded.model, &task)?;
    let (cfg, seed) = decode_config(&args.decode, file, &task, DecodeMode::Acfg)?;
    let prompt: TokenSeq = match &pick(args.prompt, file, "prompt")? {
        Some(text) => task.parse_prompt(text).map_err(|e| CliError::Config(e.to_string()))?,
        None => {
            eval_set(&task, &args.data, file, loaded.provenance.as_ref(), seed)?
                .swap_remove(0)
                .prompt
        }
    };
    let result = decode(&*loaded.model, &prompt, &cfg)?;
    let vocab = task.vocab();
    let generated = result.generated();
    let verdict = match task.reference_answer(&prompt.ids) {
        Ok(answer) if answer.len() == generated.len() => {
            if task.check(&prompt.ids, generated) {
                "correct"
            } else {
                "incorrect"
            }
        }
        _ => "unchecked",
    };
    emit(
        &format!(
            "prompt: {}\noutput: {}\nresult: {verdict}\n",
            vocab.render_all(&prompt.ids),
            vocab.render_all(generated)
        ),
        None,
    )
}

pub fn bench(args: BenchArgs, file: &ConfigFile) -> Result<(), CliError> {
    let loaded = load_model(&args.model, file)?;
    let task = resolve_task(&args.data, file, loaded.provenance.as_ref())?;
    let (cfg, seed) = decode_config(&args.decode, file, &task, DecodeMode::None)?;
    let eval = eval_set(&task, &args.data, file, loaded.provenance.as_ref(), seed)?;
    let opts = eval_options(args.jobs, pick_switch(args.timing, file, "timing")?, file)?;
    let modes = match pick_enum(args.decode.mode, file, "mode")? {
        Some(m) => vec![mode_of(m)],
        None => vec![DecodeMode::None, DecodeMode::StaticCfg, DecodeMode::Acfg],
    };
    let mut reports = Vec::with_capacity(modes.len());
    for mode in modes {
        let cfg = cfg.clone().with_mode(mode);
        reports.push(harness::evaluate_with(&*loaded.model, &task, &eval, &cfg, seed, &opts)?);
    }
    emit(
        &harness::reports_to_csv(&reports),
        pick(args.out, file, "out")?.as_deref(),
    )
}

pub fn ablate(args: AblateArgs, file: &ConfigFile) -> Result<(), CliError> {
    let loaded = load_model(&args.model, file)?;
    let task = resolve_task(&args.data, file, loaded.provenance.as_ref())?;
    let (cfg, seed) = decode_config(&args.decode, file, &task, DecodeMode::Acfg)?;
    let eval = eval_set(&task, &args.data, file, loaded.provenance.as_ref(), seed)?;
    let opts = eval_options(args.jobs, pick_switch(args.timing, file, "timing")?, file)?;
    let default = AblationGrid::default();
    let rhos = args.rhos.map_or_else(|| file.get_list("rhos"), |v| Ok(Some(v)))?;
    let ws = args.ws.map_or_else(|| file.get_list("ws"), |v| Ok(Some(v)))?;
    let grid = if pick_switch(args.grid_default, file, "grid_default")? {
        if rhos.is_some() || ws.is_some() {
            return Err(CliError::Config(
                "grid_default cannot be combined with rhos or ws".into(),
            ));
        }
        default
    } else {
        AblationGrid {
            rhos: rhos.unwrap_or(default.rhos),
            ws: ws.unwrap_or(default.ws),
        }
    };
    let table = harness::ablate(&*loaded.model, &task, &eval, &cfg, &grid, seed, &opts)?;
    match &pick(args.out, file, "out")? {
        Some(path) => {
            emit(&table.to_csv(), Some(path))?;
            emit(&table.pretty(), None)
        }
        None => {
            eprint!("{}", table.pretty());
            emit(&table.to_csv(), None)
        }
    }
}

pub fn trace_demo(args: TraceDemoArgs, file: &ConfigFile) -> Result<(), CliError> {
    let out_dir: PathBuf =
        pick(args.out_dir, file, "out_dir")?.ok_or_else(|| CliError::Config("--out-dir is required".into()))?;
    let svg = pick_switch(args.svg, file, "svg")?;
    let loaded = if pick(args.model.model.clone(), file, "model")?.is_some()
        || pick(args.model.tcp.clone(), file, "tcp")?.is_some()
        || pick(args.model.command.clone(), file, "command")?.is_some()
    {
        load_model(&args.model, file)?
    } else {
        let name = pick(args.data.task.clone(), file, "task")?.unwrap_or_else(|| "sort".into());
        let task = TaskSpec::by_name(&name).map_err(|e| CliError::Config(e.to_string()))?;
        let seed = resolve_seed(args.decode.seed, file)?;
        let train_size = pick(args.data.train_size, file, "train_size")?.unwrap_or(DEFAULT_TRAIN_SIZE);
        let eval_size = pick(args.data.eval_size, file, "eval_size")?.unwrap_or(DEFAULT_EVAL_SIZE);
        let data = task
            .generate_dataset(train_size, eval_size, seed)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let model = CountModel::train(task.vocab(), &data.train, &CountModelConfig::default(), seed)?;
        Loaded {
            model: Box::new(model),
            provenance: Some(TrainingProvenance {
                task: task.name().to_string(),
                seed,
                train_size,
                eval_size,
            }),
        }
    };
    let data_args = DataArgs {
        task: args.data.task.clone(),
        eval_size: Some(1),
        ..DataArgs::default()
    };
    let task = resolve_task(&data_args, file, loaded.provenance.as_ref())?;
    check_vocab(&*loaded.model, &task)?;
    let (cfg, seed) = decode_config(&args.decode, file, &task, DecodeMode::Acfg)?;
    let instance = eval_set(&task, &data_args, file, loaded.provenance.as_ref(), seed)?.swap_remove(0);
    let result = decode(&*loaded.model, &instance.prompt, &cfg)?;

    fs::create_dir_all(&out_dir)?;
    let heatmap = out_dir.join("heatmap.csv");
    let aggregates = trace::export_heatmap(&result.traces, &heatmap)?;
    let refinement = out_dir.join("refinement.json");
    trace::export_refinement(&result, &refinement)?;
    let mut written = vec![heatmap, aggregates, refinement];
    if svg {
        let svg = out_dir.join("heatmap.svg");
        fs::write(&svg, trace::heatmap_svg(&HeatmapData::from_traces(&result.traces)?))?;
        written.push(svg);
    }

    let vocab = task.vocab();
    let mut report = format!(
        "prompt: {}\noutput: {}\n",
        vocab.render_all(&instance.prompt.ids),
        vocab.render_all(result.generated())
    );
    for path in written {
        report.push_str(&format!("wrote {}\n", path.display()));
    }
    emit(&report, None)
}

pub fn serve_check(args: ServeCheckArgs, file: &ConfigFile) -> Result<(), CliError> {
    let timeout = Duration::from_millis(pick(args.timeout_ms, file, "timeout_ms")?.unwrap_or(DEFAULT_TIMEOUT_MS));
    let endpoint = match (pick(args.tcp, file, "tcp")?, pick(args.command, file, "command")?) {
        (Some(addr), None) => Endpoint::Tcp(addr),
        (None, Some(cmd)) => Endpoint::command(&cmd)?,
        _ => return Err(CliError::Config("exactly one of --tcp or --command is required".into())),
    };
    let remote = RemoteModel::connect(&endpoint, timeout)?;
    let vocab = remote.vocab().clone();
    let probe = TokenSeq::new(vec![vocab.mask_id(); 4], 0)?;
    let logits = remote.logits(&probe)?;
    emit(
        &format!(
            "handshake ok: vocab_size={} mask_id={}\nlogits ok: {}x{}\n",
            vocab.size(),
            vocab.mask_id(),
            logits.rows(),
            logits.cols()
        ),
        None,
    )
}
