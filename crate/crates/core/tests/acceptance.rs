//! Acceptance suite. Each test checks one exit criterion and prints a
//! `[PASS]`/`[FAIL]` line; run with `--nocapture` to see them all.

use std::time::{Duration, Instant};

use acfg::guidance::{ConfidenceEntry, GuidanceStepResult};
use acfg::harness::{ablate, evaluate_with, AblationGrid, EvalOptions, TaskSpec};
use acfg::model::{CountModel, CountModelConfig, MockFallback, MockTableModel};
use acfg::trace::{export_heatmap, export_refinement, parse_heatmap, parse_refinement, refinement_data, HeatmapData};
use acfg::{
    acfg_step, decode, make_schedule, static_cfg_step, DecodeConfig, DecodeMode, GuidanceConfig, Matrix, Model,
    RemaskScope, Sampler, TokenId, TokenSeq, Vocab,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(name: &str, ok: bool, detail: &str) {
    println!("[{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {detail}");
}

struct Case {
    model: MockTableModel,
    seq: TokenSeq,
}

fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let vocab_size = rng.gen_range(3..12);
    let mask = rng.gen_range(0..vocab_size) as TokenId;
    let vocab = Vocab::new(vocab_size, mask).unwrap();
    let model = MockTableModel::new(
        vocab,
        MockFallback::Hashed {
            seed: rng.gen(),
            scale: 3.0,
        },
    );
    let len = rng.gen_range(1..24);
    let mask_rate: f64 = rng.gen();
    let ids: Vec<TokenId> = (0..len)
        .map(|_| {
            if rng.gen::<f64>() < mask_rate {
                mask
            } else {
                rng.gen_range(0..vocab_size) as TokenId
            }
        })
        .collect();
    let prompt_len = rng.gen_range(0..=len);
    Case {
        model,
        seq: TokenSeq::new(ids, prompt_len).unwrap(),
    }
}

/// Straight-line reference of one adaptive guidance step, all in f64, with
/// `rho = rho_twentieths / 20` so the re-mask count is exact integer
/// arithmetic.
fn reference_acfg(model: &MockTableModel, seq: &TokenSeq, rho_twentieths: usize, w: f64) -> (Vec<usize>, Vec<f64>) {
    let mask = model.vocab().mask_id();
    let cols = model.vocab().size();
    let cond = model.logits(seq).unwrap();

    let mut conf: Vec<(f64, usize)> = Vec::new();
    for j in 0..seq.len() {
        if seq.ids[j] == mask {
            continue;
        }
        let row: Vec<f64> = cond.row(j).iter().map(|&x| x as f64).collect();
        let max = row.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let best = row.iter().map(|x| (x - max).exp() / z).fold(0.0, f64::max);
        conf.push((best, j));
    }
    let n = conf.len();
    let target = (rho_twentieths * n).div_ceil(20).min(n);
    conf.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut picked: Vec<usize> = conf[..target].iter().map(|c| c.1).collect();
    picked.sort();

    let mut ids = seq.ids.clone();
    for &j in &picked {
        ids[j] = mask;
    }
    let uncond = if picked.is_empty() {
        cond.clone()
    } else {
        model.logits(&TokenSeq::new(ids, seq.prompt_len).unwrap()).unwrap()
    };
    let guided = (0..seq.len() * cols)
        .map(|i| {
            let (u, c) = (uncond.as_slice()[i] as f64, cond.as_slice()[i] as f64);
            u + (w + 1.0) * (c - u)
        })
        .collect();
    (picked, guided)
}

#[test]
fn algorithm_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACF6);
    let mut worst = 0.0f64;
    let mut mismatched_sets = 0;
    for _ in 0..1000 {
        let case = random_case(&mut rng);
        let rho_twentieths = rng.gen_range(0..=20);
        let w = rng.gen_range(0.0..=2.0);
        let cfg = GuidanceConfig::new(w, rho_twentieths as f64 / 20.0);
        let got = acfg_step(&case.model, &case.seq, &cfg).unwrap();
        let (picked, guided) = reference_acfg(&case.model, &case.seq, rho_twentieths, w);
        if picked != got.remasked {
            mismatched_sets += 1;
        }
        for (a, b) in got.guided.as_slice().iter().zip(&guided) {
            worst = worst.max((*a as f64 - b).abs());
        }
    }
    let elapsed = started.elapsed();
    report(
        "algorithm oracle equivalence (1000 cases, <=1e-6, <10s)",
        worst <= 1e-6 && mismatched_sets == 0 && elapsed < Duration::from_secs(10),
        &format!("max |diff| = {worst:.3e}, re-mask set mismatches = {mismatched_sets}, {elapsed:.2?}"),
    );
}

fn max_diff(a: &Matrix, b: &Matrix) -> f32 {
    a.max_abs_diff(b).expect("shapes agree")
}

#[test]
fn reduction_identities() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let per_identity = 3400;
    let (mut worst_a, mut worst_b, mut worst_c) = (0.0f32, 0.0f32, 0.0f32);
    let mut input_mismatch = 0;
    for _ in 0..per_identity {
        // (a) rho = 0
        let case = random_case(&mut rng);
        let w = rng.gen_range(0.0..=4.0);
        let r = acfg_step(&case.model, &case.seq, &GuidanceConfig::new(w, 0.0)).unwrap();
        worst_a = worst_a.max(max_diff(&r.guided, &r.cond));

        // (b) w = 0, both variants
        let case = random_case(&mut rng);
        let rho = rng.gen_range(0.0..=1.0);
        let r = acfg_step(&case.model, &case.seq, &GuidanceConfig::new(0.0, rho)).unwrap();
        worst_b = worst_b.max(max_diff(&r.guided, &r.cond));
        let s = static_cfg_step(&case.model, &case.seq, 0.0).unwrap();
        worst_b = worst_b.max(max_diff(&s.guided, &s.cond));

        // (c) rho = 1 over every non-mask token equals static CFG
        let case = random_case(&mut rng);
        let w = rng.gen_range(0.0..=2.0);
        let cfg = GuidanceConfig::new(w, 1.0).with_scope(RemaskScope::AllNonmask);
        let a: GuidanceStepResult = acfg_step(&case.model, &case.seq, &cfg).unwrap();
        let s = static_cfg_step(&case.model, &case.seq, w).unwrap();
        let mask = case.model.vocab().mask_id();
        let all_mask = a.uncond_input.ids.iter().all(|&t| t == mask);
        if a.uncond_input != s.uncond_input || !all_mask {
            input_mismatch += 1;
        }
        worst_c = worst_c.max(max_diff(&a.guided, &s.guided));
    }
    let elapsed = started.elapsed();
    report(
        "reduction identities (10200 cases, <30s)",
        worst_a <= 1e-5 && worst_b <= 1e-5 && worst_c <= 1e-6 && input_mismatch == 0 && elapsed < Duration::from_secs(30),
        &format!(
            "rho=0 max {worst_a:.1e}; w=0 max {worst_b:.1e}; rho=1 max {worst_c:.1e}, input mismatches {input_mismatch}; {elapsed:.2?}"
        ),
    );
}

#[test]
fn selection_correctness() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut failures = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(0..40);
        let levels = rng.gen_range(1..8);
        let mut positions: Vec<usize> = (0..n * 2).collect();
        positions.retain(|_| rng.gen_bool(0.5));
        let entries: Vec<ConfidenceEntry> = positions
            .iter()
            .map(|&position| ConfidenceEntry {
                position,
                score: rng.gen_range(0..levels) as f32 / levels as f32,
            })
            .collect();
        let count = rng.gen_range(0..=entries.len());
        let got = acfg::guidance::select_low_confidence(&entries, count).unwrap();
        // an entry is selected iff fewer than `count` entries precede it in
        // (score, position) order
        let mut expected: Vec<usize> = entries
            .iter()
            .filter(|e| {
                let rank = entries
                    .iter()
                    .filter(|o| o.score < e.score || (o.score == e.score && o.position < e.position))
                    .count();
                rank < count
            })
            .map(|e| e.position)
            .collect();
        expected.sort();
        if got != expected {
            failures += 1;
        }
    }
    let elapsed = started.elapsed();
    report(
        "selection correctness (1000 lists with ties, <5s)",
        failures == 0 && elapsed < Duration::from_secs(5),
        &format!("{failures} mismatches, {elapsed:.2?}"),
    );
}

#[test]
fn decode_determinism_and_progress() {
    let tasks: Vec<TaskSpec> = TaskSpec::NAMES.iter().map(|n| TaskSpec::by_name(n).unwrap()).collect();
    let models: Vec<CountModel> = tasks
        .iter()
        .map(|t| {
            let ds = t.generate_dataset(300, 0, 1).unwrap();
            CountModel::train(t.vocab(), &ds.train, &CountModelConfig::default(), 1).unwrap()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut nondeterministic = 0;
    let mut schedule_violations = 0;
    for _ in 0..100 {
        let ti = rng.gen_range(0..tasks.len());
        let (task, model) = (&tasks[ti], &models[ti]);
        let seed: u64 = rng.gen();
        let prompt = task.generate_dataset(0, 1, seed).unwrap().eval.remove(0).prompt;
        let gen_len = task.answer_len();
        let mode = [DecodeMode::None, DecodeMode::StaticCfg, DecodeMode::Acfg][rng.gen_range(0..3)];
        let cfg = DecodeConfig::new(gen_len)
            .with_steps(rng.gen_range(1..=gen_len))
            .with_mode(mode)
            .with_guidance(GuidanceConfig::new(rng.gen_range(0.0..2.0), rng.gen_range(0.0..=1.0)))
            .with_sampler(Sampler::Temperature {
                t: rng.gen_range(0.3..1.5),
                seed,
            });
        let first = decode(model, &prompt, &cfg).unwrap();
        let second = decode(model, &prompt, &cfg).unwrap();
        if first != second {
            nondeterministic += 1;
        }
        let schedule = make_schedule(cfg.gen_len, cfg.steps).unwrap();
        let mask = model.vocab().mask_id();
        let mut seq = prompt.ids.clone();
        seq.resize(prompt.len() + gen_len, mask);
        for (k, trace) in first.traces.iter().enumerate() {
            let before = seq[prompt.len()..].iter().filter(|&&t| t == mask).count();
            if trace.candidates.len() != before || trace.revealed.len() != schedule.reveal_counts()[k] {
                schedule_violations += 1;
            }
            for &j in &trace.revealed {
                seq[j] = first.final_seq.ids[j];
            }
            let after = seq[prompt.len()..].iter().filter(|&&t| t == mask).count();
            if after != schedule.remaining_after(k) {
                schedule_violations += 1;
            }
        }
        if first.final_seq.generated().contains(&mask) || seq != first.final_seq.ids {
            schedule_violations += 1;
        }
    }
    report(
        "decode determinism and progress (100 task/seed pairs)",
        nondeterministic == 0 && schedule_violations == 0,
        &format!("{nondeterministic} non-identical reruns, {schedule_violations} schedule violations"),
    );
}

#[test]
fn end_to_end_sort_experiment() {
    let task = TaskSpec::by_name("sort").unwrap();
    let ds = task.generate_dataset(5000, 500, 2024).unwrap();
    let cfg = CountModelConfig {
        radius: 1,
        alpha: 0.1,
        ..Default::default()
    };
    let model = CountModel::train(task.vocab(), &ds.train, &cfg, 2024).unwrap();
    let decode_cfg = DecodeConfig::new(8).with_steps(8);
    let single_core = EvalOptions::sequential();
    let unguided = evaluate_with(&model, &task, &ds.eval, &decode_cfg, 2024, &single_core).unwrap();

    let started = Instant::now();
    let grid = AblationGrid::default();
    let table = ablate(&model, &task, &ds.eval, &decode_cfg, &grid, 2024, &single_core).unwrap();
    let elapsed = started.elapsed();
    println!("{}", table.pretty());

    let w0 = grid.ws.iter().position(|&w| w == 0.0).unwrap();
    let w0_matches = (0..grid.rhos.len()).all(|ri| table.cell(w0, ri).same_outcome(&unguided));
    report(
        "end-to-end sort experiment (unguided >= 0.90, 5x5 grid < 5 min, w=0 row = unguided)",
        unguided.exact_match >= 0.90 && table.cells.len() == 25 && elapsed < Duration::from_secs(300) && w0_matches,
        &format!(
            "unguided exact match {:.4}, grid {}x{} in {elapsed:.2?}, w=0 row identical: {w0_matches}",
            unguided.exact_match,
            grid.ws.len(),
            grid.rhos.len()
        ),
    );
}

#[test]
fn trace_fidelity() {
    let task = TaskSpec::by_name("sort").unwrap();
    let ds = task.generate_dataset(2000, 20, 9).unwrap();
    let model = CountModel::train(task.vocab(), &ds.train, &CountModelConfig::default(), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut failures = Vec::new();
    let mut worst_agg = 0.0f64;
    for (i, inst) in ds.eval.iter().enumerate() {
        let cfg = DecodeConfig::new(8)
            .with_steps(4 + i % 5)
            .with_mode(DecodeMode::Acfg)
            .with_guidance(GuidanceConfig::new(0.5, 0.7))
            .with_sampler(Sampler::Temperature { t: 1.0, seed: i as u64 });
        let result = decode(&model, &inst.prompt, &cfg).unwrap();

        let heat_path = dir.path().join(format!("heat{i}.csv"));
        export_heatmap(&result.traces, &heat_path).unwrap();
        let in_memory = HeatmapData::from_traces(&result.traces).unwrap();
        let parsed = parse_heatmap(&heat_path).unwrap();
        if parsed != in_memory {
            failures.push(format!("heatmap {i}"));
        }
        if parsed.confidence.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            failures.push(format!("heatmap {i} range"));
        }
        for (a, b) in parsed.aggregates.iter().zip(parsed.recompute_aggregates()) {
            worst_agg = worst_agg.max((a.mean - b.mean).abs()).max((a.min - b.min).abs());
        }

        let ref_path = dir.path().join(format!("refine{i}.json"));
        export_refinement(&result, &ref_path).unwrap();
        if parse_refinement(&ref_path).unwrap() != refinement_data(&result) {
            failures.push(format!("refinement {i}"));
        }
    }
    report(
        "trace fidelity (round trips exact, aggregates <= 1e-6)",
        failures.is_empty() && worst_agg <= 1e-6,
        &format!("failures {failures:?}, worst aggregate diff {worst_agg:.1e}"),
    );
}
