//! Subcommand bodies: data generation, training runs, ablation grids and
//! numerical verification, plus their on-disk reports.

use std::fs;
use std::path::Path;
use std::time::Instant;

use dualmargin::linalg::normalize_rows;
use dualmargin::loss::{resolve_margins, MarginVector};
use dualmargin::synthdata::build;
use dualmargin::trainer::{evaluate, evaluate_open_set, train_logged, write_atomic, EpochRecord, LogEvent};
use dualmargin::verify::{
    alignment_csv, alignment_probe, annealed_alignment, bound_csv, bound_probe, convergence_order, verify_csv,
    AlignmentProbe, BoundProbe, LossInstance, VerifyRow,
};
use dualmargin::{
    eval::metrics_csv, Dataset64, LossMode, MarginConfig, MarginSign, Matrix, MetricsRow, Model64, SelectionStrategy,
    Split,
};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset64, CliError> {
    Ok(build(&cfg.data, cfg.split)?)
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub row: MetricsRow,
    pub history: Vec<EpochRecord>,
    /// JSON lines: one per step and one per epoch.
    pub log_lines: Vec<String>,
    pub model: Model64,
    pub train_seconds: f64,
}

/// Trains on the configured dataset and evaluates the best checkpoint on
/// the test split; open-set metrics are added when unknown classes exist.
pub fn run_training(cfg: &ExperimentConfig, run_id: &str, dataset: &Dataset64) -> Result<RunResult, CliError> {
    let mut log_lines = Vec::new();
    let start = Instant::now();
    let outcome = train_logged(&cfg.train, dataset, &mut |event: &LogEvent| {
        log_lines.push(serde_json::to_string(event).expect("log event serializes"));
    })?;
    let train_seconds = start.elapsed().as_secs_f64();
    let mut report = evaluate(&outcome.best, dataset, Split::Test, Some(&outcome.partition))?;
    if !dataset.indices_in(Split::Unknown).is_empty() {
        report.open_set = Some(evaluate_open_set(
            &outcome.best,
            dataset,
            cfg.eval.target_tpr,
            cfg.eval.score,
        )?);
    }
    info!(
        "{run_id}: macro recall {:.4}, rank1 {:.4} ({train_seconds:.1}s)",
        report.macro_recall, report.rank1
    );
    Ok(RunResult {
        row: MetricsRow {
            run_id: run_id.to_string(),
            mode: cfg.train.margin.mode.name().to_string(),
            seed: cfg.train.seed,
            report,
        },
        history: outcome.history,
        log_lines,
        model: outcome.best,
        train_seconds,
    })
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'a str,
    pub seed: u64,
    pub runs: Vec<String>,
    pub config: &'a ExperimentConfig,
    /// The resolved configuration; `dualmargin <subcommand> --config config.ini` re-runs it.
    pub config_ini: String,
}

pub fn write_manifest(dir: &Path, subcommand: &str, cfg: &ExperimentConfig, runs: Vec<String>) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let ini = cfg.to_ini();
    let manifest = Manifest {
        tool: "dualmargin",
        version: VERSION,
        subcommand,
        seed: cfg.train.seed,
        runs,
        config: cfg,
        config_ini: ini.clone(),
    };
    write_atomic(&dir.join("config.ini"), ini.as_bytes())?;
    write_atomic(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(())
}

pub fn write_metrics(dir: &Path, cfg: &ExperimentConfig, rows: &[MetricsRow]) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    if cfg.format.csv() {
        write_atomic(&dir.join("metrics.csv"), metrics_csv(rows).as_bytes())?;
    }
    if cfg.format.json() {
        write_atomic(
            &dir.join("metrics.json"),
            serde_json::to_string_pretty(rows)?.as_bytes(),
        )?;
    }
    Ok(())
}

pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let ds = build_dataset(cfg)?;
    fs::create_dir_all(&cfg.out_dir)?;
    ds.save(&cfg.out_dir.join("dataset.csv"))?;
    write_manifest(&cfg.out_dir, "generate", cfg, vec![])?;
    info!("wrote {} samples to {}", ds.len(), cfg.out_dir.display());
    Ok(())
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<RunResult, CliError> {
    let ds = build_dataset(cfg)?;
    let run_id = format!("{}-seed{}", cfg.train.margin.mode.name(), cfg.train.seed);
    let result = run_training(cfg, &run_id, &ds)?;
    let dir = &cfg.out_dir;
    write_manifest(dir, "train", cfg, vec![run_id])?;
    write_metrics(dir, cfg, std::slice::from_ref(&result.row))?;
    write_atomic(
        &dir.join("history.jsonl"),
        (result.log_lines.join("\n") + "\n").as_bytes(),
    )?;
    write_atomic(
        &dir.join("model.json"),
        serde_json::to_string(&result.model)?.as_bytes(),
    )?;
    Ok(result)
}

/// Re-evaluates `model.json` from the output directory (or `model_path`).
pub fn cmd_eval(cfg: &ExperimentConfig, model_path: Option<&Path>) -> Result<MetricsRow, CliError> {
    let ds = build_dataset(cfg)?;
    let default_path = cfg.out_dir.join("model.json");
    let path = model_path.unwrap_or(&default_path);
    let mut model: Model64 = serde_json::from_str(&fs::read_to_string(path)?)?;
    model.prototypes.ensure_view();
    let counts = {
        let all = ds.counts_in(Split::Train);
        model.class_ids.iter().map(|&j| all[j]).collect::<Vec<_>>()
    };
    let partition = dualmargin::partition_classes(&counts, cfg.train.head_threshold, cfg.train.tail_threshold)?;
    let mut report = evaluate(&model, &ds, Split::Test, Some(&partition))?;
    if !ds.indices_in(Split::Unknown).is_empty() {
        report.open_set = Some(evaluate_open_set(&model, &ds, cfg.eval.target_tpr, cfg.eval.score)?);
    }
    let row = MetricsRow {
        run_id: format!("eval-{}", model.mode.name()),
        mode: model.mode.name().to_string(),
        seed: cfg.train.seed,
        report,
    };
    write_manifest(&cfg.out_dir, "eval", cfg, vec![row.run_id.clone()])?;
    write_metrics(&cfg.out_dir, cfg, std::slice::from_ref(&row))?;
    Ok(row)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grid {
    Seeds,
    Margin,
    Lambda,
    Components,
}

impl std::str::FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "seeds" => Ok(Self::Seeds),
            "margin" => Ok(Self::Margin),
            "lambda" => Ok(Self::Lambda),
            "components" => Ok(Self::Components),
            other => Err(format!(
                "unknown grid `{other}`; expected seeds, margin, lambda or components"
            )),
        }
    }
}

pub const SEED_GRID: [u64; 4] = [0, 1, 42, 2025];
pub const MARGIN_GRID: [f64; 4] = [0.05, 0.10, 0.15, 0.20];
pub const LAMBDA_GRID: [f64; 4] = [0.0, 0.0001, 1.0, 5.0];

/// Applies a configuration-letter preset: A base margin only, B dual
/// margin, C no oversampling, D oversampling with random retention,
/// E oversampling with norm-guided retention, F learned power scaling with
/// its regularizer. `ce` is the plain cross-entropy baseline.
pub fn apply_preset(cfg: &mut ExperimentConfig, preset: &str) -> Result<(), CliError> {
    let t = &mut cfg.train;
    if preset == "ce" {
        t.margin.mode = LossMode::Ce;
        t.sampler.oversample_prob = 0.0;
        return Ok(());
    }
    let defaults = ExperimentConfig::default().train;
    t.margin.power_scaling = false;
    t.margin.lambda = 0.0;
    for letter in preset.split('+') {
        match letter {
            "A" => t.margin.mode = LossMode::AmSoftmax,
            "B" => t.margin.mode = LossMode::DualMargin,
            "C" => t.sampler.oversample_prob = 0.0,
            "D" => {
                t.sampler.oversample_prob = defaults.sampler.oversample_prob;
                t.sampler.selection = SelectionStrategy::Random;
            }
            "E" => {
                t.sampler.oversample_prob = defaults.sampler.oversample_prob;
                t.sampler.selection = SelectionStrategy::NormGuided;
            }
            "F" => {
                t.margin.power_scaling = true;
                t.margin.lambda = defaults.margin.lambda;
            }
            other => {
                return Err(CliError::config(
                    None,
                    format!("unknown preset letter `{other}` in `{preset}`"),
                ));
            }
        }
    }
    Ok(())
}

pub const COMPONENT_PRESETS: [&str; 6] = ["ce", "A+C", "B+C", "B+D", "B+E", "B+E+F"];

pub fn grid_runs(grid: Grid, base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>, CliError> {
    let mut runs = Vec::new();
    match grid {
        Grid::Seeds => {
            for seed in SEED_GRID {
                let mut c = base.clone();
                c.train.seed = seed;
                runs.push((format!("seed{seed}"), c));
            }
        }
        Grid::Margin => {
            for m in MARGIN_GRID {
                let mut c = base.clone();
                c.train.margin.m = m;
                runs.push((format!("m{m}"), c));
            }
        }
        Grid::Lambda => {
            for lambda in LAMBDA_GRID {
                let mut c = base.clone();
                c.train.margin.lambda = lambda;
                runs.push((format!("lambda{lambda}"), c));
            }
        }
        Grid::Components => {
            for preset in COMPONENT_PRESETS {
                let mut c = base.clone();
                apply_preset(&mut c, preset)?;
                runs.push((preset.to_string(), c));
            }
        }
    }
    Ok(runs)
}

/// Runs the configurations on worker threads; results keep the input order.
pub fn run_parallel(runs: &[(String, ExperimentConfig)], dataset: &Dataset64) -> Result<Vec<RunResult>, CliError> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).max(1);
    let mut results: Vec<Option<Result<RunResult, CliError>>> = (0..runs.len()).map(|_| None).collect();
    for (chunk_runs, chunk_out) in runs.chunks(workers).zip(results.chunks_mut(workers)) {
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk_runs
                .iter()
                .map(|(id, cfg)| scope.spawn(move || run_training(cfg, id, dataset)))
                .collect();
            for (slot, h) in chunk_out.iter_mut().zip(handles) {
                *slot = Some(h.join().expect("training thread panicked"));
            }
        });
    }
    results.into_iter().map(|r| r.expect("every run executed")).collect()
}

pub fn cmd_ablate(grid: Grid, cfg: &ExperimentConfig) -> Result<Vec<RunResult>, CliError> {
    let runs = grid_runs(grid, cfg)?;
    for (_, c) in &runs {
        c.validate()?;
    }
    let ds = build_dataset(cfg)?;
    let results = run_parallel(&runs, &ds)?;
    let rows: Vec<MetricsRow> = results.iter().map(|r| r.row.clone()).collect();
    write_manifest(
        &cfg.out_dir,
        "ablate",
        cfg,
        runs.iter().map(|(id, _)| id.clone()).collect(),
    )?;
    write_metrics(&cfg.out_dir, cfg, &rows)?;
    Ok(results)
}

/// Random unit-space instance for the proposition probes: `c` prototypes,
/// margins from the dual-margin construction over random class counts.
struct ProbeInstance {
    protos: Matrix<f64>,
    margins: MarginVector<f64>,
    counts: Vec<usize>,
}

fn probe_instance<R: Rng>(rng: &mut R, d: usize, sign: MarginSign) -> Result<ProbeInstance, CliError> {
    let c = rng.random_range(2..=6);
    let raw = Matrix::from_vec(c, d, (0..c * d).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let counts: Vec<usize> = (0..c).map(|_| rng.random_range(1..3000)).collect();
    let cfg = MarginConfig {
        m: rng.random_range(0.05..0.3),
        gamma: rng.random_range(-2.0..2.0),
        scaled_sign: sign,
        ..MarginConfig::default()
    };
    let stats = cfg.class_stats(&counts)?;
    let (margins, _) = resolve_margins(&stats, &cfg)?;
    Ok(ProbeInstance {
        protos: normalize_rows(&raw).units,
        margins,
        counts,
    })
}

fn random_units<R: Rng>(rng: &mut R, n: usize, d: usize) -> Result<Matrix<f64>, CliError> {
    let raw = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    Ok(normalize_rows(&raw).units)
}

pub fn alignment_probes(n_probes: usize, seed: u64) -> Result<Vec<AlignmentProbe>, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_probes)
        .map(|k| {
            let d = rng.random_range(2..=8);
            let inst = probe_instance(&mut rng, d, MarginSign::Literal)?;
            let class = rng.random_range(0..inst.protos.rows());
            let n = rng.random_range(2..=10);
            let units = random_units(&mut rng, n, d)?;
            let s = if k % 2 == 0 { 1.0 } else { 32.0 };
            Ok(alignment_probe(class, &units, &inst.protos, &inst.margins, s)?)
        })
        .collect()
}

/// Probes with `label` the argmax class of a sample and `class` a class
/// with fewer training samples when one exists.
pub fn bound_probes(n_probes: usize, s: f64, sign: MarginSign, seed: u64) -> Result<Vec<BoundProbe>, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_probes);
    while out.len() < n_probes {
        let d = rng.random_range(2..=8);
        let inst = probe_instance(&mut rng, d, sign)?;
        let x = random_units(&mut rng, 1, d)?;
        let c = inst.protos.rows();
        let label = rng.random_range(0..c);
        let rarer: Vec<usize> = (0..c)
            .filter(|&k| k != label && inst.counts[k] < inst.counts[label])
            .collect();
        let class = if rarer.is_empty() {
            (label + 1 + rng.random_range(0..c - 1)) % c
        } else {
            rarer[rng.random_range(0..rarer.len())]
        };
        let probe = bound_probe(x.row(0), label, class, &inst.protos, &inst.margins, s)?;
        if probe.condition_met {
            out.push(probe);
        }
    }
    Ok(out)
}

pub struct VerifyReport {
    pub rows: Vec<VerifyRow>,
    pub alignment: Vec<AlignmentProbe>,
    pub bounds: Vec<BoundProbe>,
}

impl VerifyReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

/// Coarse enough that truncation error, not round-off, dominates.
const FD_ORDER_STEPS: [f64; 4] = [1e-2, 5e-3, 2.5e-3, 1.25e-3];

pub fn run_verify(cfg: &ExperimentConfig) -> Result<VerifyReport, CliError> {
    let opts = &cfg.verify;
    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for s in [1.0, 32.0] {
        let mut worst = 0.0f64;
        for _ in 0..opts.instances {
            worst = worst.max(LossInstance::random(&mut rng, s).gradcheck(1e-6)?);
        }
        rows.push(VerifyRow {
            check: "gradcheck".into(),
            detail: format!("s={s} instances={} h=1e-6", opts.instances),
            value: worst,
            bound: 1e-5,
            pass: worst < 1e-5,
        });
    }

    let mut inst = LossInstance::random(&mut rng, 32.0);
    inst.cfg.mode = LossMode::DualMargin;
    let stats = inst.cfg.class_stats(&inst.counts)?;
    let analytic = inst.analytic_gradient(&stats)?;
    let slope = convergence_order(|p| inst.loss_at(p, &stats), &inst.pack(), &analytic, &FD_ORDER_STEPS)?;
    rows.push(VerifyRow {
        check: "fd_order".into(),
        detail: "h in {1e-2;5e-3;2.5e-3;1.25e-3}".into(),
        value: slope,
        bound: 0.3,
        pass: (slope - 2.0).abs() <= 0.3,
    });

    let alignment = alignment_probes(opts.probes, opts.seed.wrapping_add(1))?;
    let violations = alignment.iter().filter(|p| !p.holds(1e-9)).count();
    rows.push(VerifyRow {
        check: "alignment_bound".into(),
        detail: format!("probes={}", alignment.len()),
        value: violations as f64,
        bound: 0.0,
        pass: violations == 0,
    });
    let units = random_units(&mut rng, 16, 8)?;
    let anneal = annealed_alignment(&units, 0.5, &[1e-1, 1e-2, 1e-3, 1e-4], &mut rng)?;
    let monotone = anneal.windows(2).all(|w| w[1].residual < w[0].residual);
    rows.push(VerifyRow {
        check: "alignment_anneal".into(),
        detail: "sigma in {1e-1;1e-2;1e-3;1e-4}".into(),
        value: anneal.last().map_or(f64::NAN, |p| p.residual),
        bound: anneal.first().map_or(f64::NAN, |p| p.residual),
        pass: monotone,
    });

    let mut bounds = Vec::new();
    for (k, s) in [1.0, 32.0].into_iter().enumerate() {
        let probes = bound_probes(
            opts.probes,
            s,
            cfg.train.margin.scaled_sign,
            opts.seed.wrapping_add(2 + k as u64),
        )?;
        let violations = probes.iter().filter(|p| !p.holds(1e-9)).count();
        rows.push(VerifyRow {
            check: "gradient_bound".into(),
            detail: format!("s={s} probes={}", probes.len()),
            value: violations as f64,
            bound: 0.0,
            pass: violations == 0,
        });
        bounds.extend(probes);
    }
    Ok(VerifyReport {
        rows,
        alignment,
        bounds,
    })
}

pub fn cmd_verify(cfg: &ExperimentConfig) -> Result<VerifyReport, CliError> {
    let report = run_verify(cfg)?;
    let dir = &cfg.out_dir;
    write_manifest(dir, "verify", cfg, vec![])?;
    write_atomic(&dir.join("verify.csv"), verify_csv(&report.rows).as_bytes())?;
    write_atomic(
        &dir.join("probes_alignment.csv"),
        alignment_csv(&report.alignment).as_bytes(),
    )?;
    write_atomic(&dir.join("probes_bound.csv"), bound_csv(&report.bounds).as_bytes())?;
    if cfg.format.json() {
        write_atomic(
            &dir.join("verify.json"),
            serde_json::to_string_pretty(&report.rows)?.as_bytes(),
        )?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_map_letters() {
        let mut c = ExperimentConfig::default();
        apply_preset(&mut c, "A+C").unwrap();
        assert_eq!(c.train.margin.mode, LossMode::AmSoftmax);
        assert_eq!(c.train.sampler.oversample_prob, 0.0);
        assert!(!c.train.margin.power_scaling);

        let mut c = ExperimentConfig::default();
        apply_preset(&mut c, "B+E+F").unwrap();
        assert_eq!(c.train, ExperimentConfig::default().train);

        let mut c = ExperimentConfig::default();
        apply_preset(&mut c, "B+D").unwrap();
        assert_eq!(c.train.sampler.selection, SelectionStrategy::Random);
        assert_eq!(c.train.margin.lambda, 0.0);
        assert!(apply_preset(&mut c, "B+Q").is_err());
    }

    #[test]
    fn grids_have_expected_rows() {
        let base = ExperimentConfig::default();
        let seeds = grid_runs(Grid::Seeds, &base).unwrap();
        assert_eq!(
            seeds.iter().map(|(_, c)| c.train.seed).collect::<Vec<_>>(),
            vec![0, 1, 42, 2025]
        );
        assert_eq!(grid_runs(Grid::Margin, &base).unwrap().len(), 4);
        assert_eq!(grid_runs(Grid::Lambda, &base).unwrap()[1].1.train.margin.lambda, 0.0001);
        assert_eq!(grid_runs(Grid::Components, &base).unwrap().len(), 6);
    }

    #[test]
    fn bound_probes_meet_condition() {
        let probes = bound_probes(200, 32.0, MarginSign::Literal, 1).unwrap();
        assert_eq!(probes.len(), 200);
        assert!(probes.iter().all(|p| p.condition_met && p.holds(1e-9)));
    }
}
