use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use grmoe::bounds::{run_sweep, SweepReport};
use grmoe::gating::{effective_experts, entropy, route_with, topk_mass};
use grmoe::linalg::RngState;
use grmoe::normalizer::{compare, KAPPA_MAX};
use grmoe::report::{aggregate, Summary};
use grmoe::synthetic::sample_batch;
use grmoe::training::{Checkpoint, PairSampling, TrainConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{parse_floats, parse_seeds, AblationAxis, Config};
use crate::experiment::{run_grid, run_method, Method, RunOutcome, RunResult};
use crate::manifest::RunManifest;
use crate::{Command, Common};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exit {
    Success = 0,
    /// A checked property or tolerance failed.
    Violation = 1,
    /// Bad arguments or configuration.
    Usage = 2,
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Violation(String),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Self::Usage(e.into())
    }
}

type Outcome = Result<(), Failure>;

pub fn dispatch(command: Command) -> Exit {
    let (name, common) = match &command {
        Command::Bench { common } => ("bench", common),
        Command::AlphaSweep { common, .. } => ("alpha-sweep", common),
        Command::Bounds { common } => ("bounds", common),
        Command::ZValidate { common, .. } => ("z-validate", common),
        Command::Ablate { common, .. } => ("ablate", common),
    };
    let result = prepare(name, &command, common).and_then(|mut run| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(common.threads.unwrap_or(0))
            .build()
            .map_err(|e| Failure::Usage(e.into()))?;
        let started = Instant::now();
        let outcome = pool.install(|| match command {
            Command::Bench { .. } => bench(&mut run),
            Command::AlphaSweep { .. } => alpha_sweep(&mut run),
            Command::Bounds { .. } => bounds(&mut run),
            Command::ZValidate { .. } => z_validate(&mut run),
            Command::Ablate { .. } => ablate(&mut run),
        });
        run.manifest.wall_clock_secs = Some(started.elapsed().as_secs_f64());
        run.manifest.write(&run.out)?;
        outcome
    });
    match result {
        Ok(()) => Exit::Success,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            Exit::Usage
        }
        Err(Failure::Violation(msg)) => {
            eprintln!("violation: {msg}");
            Exit::Violation
        }
    }
}

struct Run {
    out: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn config(&self) -> &Config {
        &self.manifest.config
    }

    fn seeds(&self) -> &[u64] {
        &self.manifest.seeds
    }

    fn csv<R: Serialize>(&mut self, name: &str, rows: &[R]) -> anyhow::Result<()> {
        let path = self.out.join(name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        self.manifest.artifacts.push(name.to_string());
        Ok(())
    }

    /// Writes a CSV whose header must appear even when there are no rows.
    fn csv_with_header<R: Serialize>(&mut self, name: &str, header: &[&str], rows: &[R]) -> anyhow::Result<()> {
        if !rows.is_empty() {
            return self.csv(name, rows);
        }
        let path = self.out.join(name);
        std::fs::write(&path, header.join(",") + "\n")?;
        self.manifest.artifacts.push(name.to_string());
        Ok(())
    }

    fn text(&mut self, name: &str, body: &str) -> anyhow::Result<()> {
        let path = self.out.join(name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        self.manifest.artifacts.push(name.to_string());
        Ok(())
    }
}

fn default_seeds(subcommand: &str) -> Vec<u64> {
    match subcommand {
        "bench" | "ablate" => (0..20).collect(),
        _ => vec![0],
    }
}

/// Resolves configuration and seeds, applies subcommand flags, and writes
/// the manifest before anything else.
fn prepare(name: &str, command: &Command, common: &Common) -> Result<Run, Failure> {
    let manifest = if let Some(path) = &common.manifest {
        let m = RunManifest::load(path)?;
        if m.subcommand != name {
            bail_usage(format!("manifest is for '{}', not '{name}'", m.subcommand))?;
        }
        let has_flags = match command {
            Command::AlphaSweep { checkpoint, alphas, .. } => checkpoint.is_some() || alphas.is_some(),
            Command::ZValidate { kappas, .. } => kappas.is_some(),
            Command::Ablate { axis, values, .. } => axis.is_some() || values.is_some(),
            _ => false,
        };
        if has_flags {
            bail_usage("subcommand options cannot be combined with --manifest".into())?;
        }
        RunManifest::new(name, m.config, m.seeds)
    } else {
        let mut config = match &common.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        match command {
            Command::AlphaSweep { checkpoint, alphas, .. } => {
                if let Some(c) = checkpoint {
                    config.alpha_sweep.checkpoint = Some(c.clone());
                }
                if let Some(a) = alphas {
                    config.alpha_sweep.alphas = parse_floats(a)?;
                }
            }
            Command::ZValidate { kappas: Some(k), .. } => config.z_validate.kappas = parse_floats(k)?,
            Command::Ablate { axis, values, .. } => {
                if let Some(a) = axis {
                    config.ablate.axis = Some(a.parse()?);
                }
                if let Some(v) = values {
                    config.ablate.values = v.split(',').map(|s| s.trim().to_string()).collect();
                }
            }
            _ => {}
        }
        let seeds = match &common.seeds {
            Some(s) => parse_seeds(s)?,
            None => config.seeds.clone().unwrap_or_else(|| default_seeds(name)),
        };
        RunManifest::new(name, config, seeds)
    };
    manifest.config.validate()?;
    if manifest.seeds.is_empty() {
        bail_usage("seed list is empty".into())?;
    }
    std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    manifest.write(&common.out)?;
    Ok(Run { out: common.out.clone(), manifest })
}

fn bail_usage(msg: String) -> Result<(), Failure> {
    Err(Failure::Usage(anyhow!(msg)))
}

#[derive(Serialize)]
struct BenchRow {
    method: &'static str,
    seed: u64,
    acc: f64,
    cv: f64,
    entropy: f64,
    collapsed: bool,
}

/// Population statistics across seeds.
#[derive(Serialize)]
struct SummaryRow {
    method: String,
    runs: usize,
    diverged: usize,
    acc_mean: f64,
    acc_std_pop: f64,
    acc_min: f64,
    acc_max: f64,
    cv_mean: f64,
    cv_std_pop: f64,
    entropy_mean: f64,
    entropy_std_pop: f64,
    collapse_rate: f64,
    rho_max_mean: Option<f64>,
}

const SUMMARY_HEADER: &[&str] = &[
    "method", "runs", "diverged", "acc_mean", "acc_std_pop", "acc_min", "acc_max", "cv_mean", "cv_std_pop",
    "entropy_mean", "entropy_std_pop", "collapse_rate", "rho_max_mean",
];

fn summarize(label: String, outcomes: &[&RunOutcome]) -> anyhow::Result<Option<SummaryRow>> {
    let ok: Vec<_> = outcomes.iter().filter_map(|o| o.result.as_ref().ok()).collect();
    if ok.is_empty() {
        return Ok(None);
    }
    let metrics: Vec<_> = ok.iter().map(|r| r.metrics.clone()).collect();
    let agg = aggregate(&metrics)?;
    let rho: Vec<f64> = ok.iter().filter_map(|r| r.rho_max).collect();
    Ok(Some(SummaryRow {
        method: label,
        runs: ok.len(),
        diverged: outcomes.len() - ok.len(),
        acc_mean: agg.accuracy.mean,
        acc_std_pop: agg.accuracy.std,
        acc_min: agg.accuracy.min,
        acc_max: agg.accuracy.max,
        cv_mean: agg.load_cv.mean,
        cv_std_pop: agg.load_cv.std,
        entropy_mean: agg.entropy.mean,
        entropy_std_pop: agg.entropy.std,
        collapse_rate: agg.collapse_rate,
        rho_max_mean: if rho.is_empty() { None } else { Some(Summary::of(&rho)?.mean) },
    }))
}

/// Non-finite losses are recorded and the run continues; anything else is
/// fatal.
fn record_failures<'a>(
    run: &mut Run,
    results: impl IntoIterator<Item = (String, &'a Result<RunResult, grmoe::Error>)>,
) -> Outcome {
    for (label, result) in results {
        match result {
            Err(grmoe::Error::Diverged { step }) => {
                eprintln!("{label}: diverged at step {step}");
                run.manifest.diverged.push(label);
            }
            Err(e) => return Err(Failure::Usage(anyhow!("{label}: {e}"))),
            Ok(_) => {}
        }
    }
    Ok(())
}

fn sorted_seeds(seeds: &[u64]) -> Vec<u64> {
    let mut s = seeds.to_vec();
    s.sort_unstable();
    s.dedup();
    s
}

fn bench(run: &mut Run) -> Outcome {
    let cfg = run.config().clone();
    if cfg.bench.methods.is_empty() {
        bail_usage("bench.methods is empty".into())?;
    }
    let seeds = sorted_seeds(run.seeds());
    let outcomes = run_grid(&cfg.bench.methods, &seeds, &cfg.task, &cfg.train, cfg.bench.eval_samples);
    record_failures(run, outcomes.iter().map(|o| (format!("{}:{}", o.method.name(), o.seed), &o.result)))?;

    let mut rows = Vec::new();
    for o in &outcomes {
        let Ok(r) = &o.result else { continue };
        rows.push(BenchRow {
            method: o.method.name(),
            seed: o.seed,
            acc: r.metrics.assignment_accuracy,
            cv: r.metrics.load_cv,
            entropy: r.metrics.mean_entropy,
            collapsed: r.metrics.collapsed,
        });
        if let (true, Some(t)) = (cfg.bench.save_checkpoints, &r.trained) {
            let stem = format!("{}_seed{}", o.method.name(), o.seed);
            run.text(&format!("checkpoints/{stem}.json"), &t.checkpoint.to_json())?;
            run.text(&format!("logs/{stem}.csv"), &t.log.to_csv())?;
        }
    }
    run.csv_with_header("bench.csv", &["method", "seed", "acc", "cv", "entropy", "collapsed"], &rows)?;

    let mut summary = Vec::new();
    for &m in &cfg.bench.methods {
        let group: Vec<_> = outcomes.iter().filter(|o| o.method == m).collect();
        summary.extend(summarize(m.name().to_string(), &group)?);
    }
    run.csv_with_header("bench_summary.csv", SUMMARY_HEADER, &summary)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub entropy: f64,
    pub eff_experts: f64,
    pub acc: f64,
    pub top1_mass: f64,
}

/// Routing statistics of a checkpoint at each α on the task's held-out set.
pub fn sweep_alphas(ckpt: &Checkpoint, alphas: &[f64], eval_samples: usize) -> grmoe::Result<Vec<AlphaRow>> {
    let model = ckpt.model()?;
    let bank = model.bank()?;
    let task = ckpt.task.build()?;
    let batch = sample_batch(&task, eval_samples, &mut RngState::new(ckpt.task.seed).substream("alpha-sweep-eval"));
    let m = batch.len() as f64;
    alphas
        .iter()
        .map(|&alpha| {
            let (mut h, mut eff, mut acc, mut top) = (0.0, 0.0, 0.0, 0.0);
            for (x, &z) in batch.xs.iter().zip(&batch.labels) {
                let rd = route_with(&bank, model.amortizer.as_ref(), x, alpha)?;
                h += entropy(&rd);
                eff += effective_experts(&rd);
                top += topk_mass(&rd, 1)?;
                if rd.argmax() == z {
                    acc += 1.0;
                }
            }
            Ok(AlphaRow { alpha, entropy: h / m, eff_experts: eff / m, acc: acc / m, top1_mass: top / m })
        })
        .collect()
}

/// Largest increase of entropy between consecutive α values in increasing
/// order.
pub fn max_entropy_increase(rows: &[AlphaRow]) -> f64 {
    let mut sorted: Vec<&AlphaRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
    sorted.windows(2).map(|w| w[1].entropy - w[0].entropy).fold(f64::NEG_INFINITY, f64::max)
}

fn alpha_sweep(run: &mut Run) -> Outcome {
    let cfg = run.config().alpha_sweep.clone();
    let Some(path) = &cfg.checkpoint else {
        return bail_usage("alpha-sweep needs a checkpoint (--checkpoint or alpha_sweep.checkpoint)".into());
    };
    if cfg.alphas.is_empty() || cfg.alphas.iter().any(|&a| !(a >= 0.0 && a.is_finite())) {
        bail_usage("alphas must be a nonempty list of finite values >= 0".into())?;
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let ckpt = Checkpoint::from_json(&text).map_err(|e| anyhow!("bad checkpoint {}: {e}", path.display()))?;
    let rows = sweep_alphas(&ckpt, &cfg.alphas, cfg.eval_samples).map_err(|e| anyhow!("{e}"))?;
    run.csv("alpha_sweep.csv", &rows)?;
    let rise = max_entropy_increase(&rows);
    if rise > 1e-9 {
        return Err(Failure::Violation(format!("mean entropy increases by {rise:e} along the α grid")));
    }
    Ok(())
}

#[derive(Serialize)]
struct BoundsOutput<'a> {
    passed: bool,
    total_violations: usize,
    sweeps: Vec<SeedSweep<'a>>,
}

#[derive(Serialize)]
struct SeedSweep<'a> {
    seed: u64,
    #[serde(flatten)]
    report: &'a SweepReport,
}

fn bounds(run: &mut Run) -> Outcome {
    let cfg = run.config().bounds.clone();
    let seeds = run.seeds().to_vec();
    let mut reports = Vec::new();
    for &seed in &seeds {
        reports.push(run_sweep(&cfg.sweep(seed)?).map_err(|e| anyhow!("{e}"))?);
    }
    let total: usize = reports.iter().map(|r| r.violations).sum();
    let out = BoundsOutput {
        passed: total == 0,
        total_violations: total,
        sweeps: seeds.iter().zip(&reports).map(|(&seed, report)| SeedSweep { seed, report }).collect(),
    };
    run.text("bounds.json", &(serde_json::to_string_pretty(&out)? + "\n"))?;
    if total > 0 {
        return Err(Failure::Violation(format!("{total} bound violations")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZRow {
    pub kappa: f64,
    pub d: usize,
    pub k: usize,
    pub z_series: f64,
    pub z_saddle: f64,
    pub z_mc: Option<f64>,
    pub mc_stderr: Option<f64>,
    pub relerr_saddle: f64,
}

/// Tolerance applying to a κ value: in-regime, out-of-regime, or none.
pub fn z_tolerance(kappa: f64, in_regime: f64, out_of_regime: f64) -> Option<f64> {
    if (0.4..=4.2).contains(&kappa) {
        Some(in_regime)
    } else if kappa > 4.2 && kappa <= 10.0 {
        Some(out_of_regime)
    } else {
        None
    }
}

fn z_validate(run: &mut Run) -> Outcome {
    let cfg = run.config().z_validate.clone();
    if cfg.kappas.is_empty() || cfg.dims.is_empty() {
        bail_usage("z-validate needs a nonempty κ grid and dimension list".into())?;
    }
    if cfg.kappas.iter().any(|&k| !(0.0..=KAPPA_MAX).contains(&k)) {
        bail_usage(format!("κ values must lie in [0, {KAPPA_MAX}]"))?;
    }
    if cfg.mc_samples > 0 && cfg.mc_samples < 1000 {
        bail_usage("mc_samples must be 0 or at least 1000".into())?;
    }
    let root = RngState::new(run.seeds()[0]);
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (di, &[d, k]) in cfg.dims.iter().enumerate() {
        for (ki, &kappa) in cfg.kappas.iter().enumerate() {
            let mut rng = root.substream_indexed("z-mc", (di * cfg.kappas.len() + ki) as u64);
            let mc = (cfg.mc_samples > 0).then_some((cfg.mc_samples, &mut rng));
            let c = compare(kappa, d, k, mc).map_err(|e| anyhow!("κ={kappa}, d={d}, k={k}: {e}"))?;
            let rel = c.saddle_rel_err();
            if let Some(tol) = z_tolerance(kappa, cfg.tol_in_regime, cfg.tol_out_of_regime) {
                if rel > tol {
                    failures.push(format!("κ={kappa}, d={d}, k={k}: saddle relative error {rel:.4} > {tol}"));
                }
            }
            if kappa > 4.2 {
                eprintln!("note: κ={kappa} (d={d}, k={k}) lies outside the training regime; relative error {rel:.4}");
            }
            rows.push(ZRow {
                kappa,
                d,
                k,
                z_series: c.series,
                z_saddle: c.saddle,
                z_mc: c.mc.map(|m| m.0),
                mc_stderr: c.mc.map(|m| m.1),
                relerr_saddle: rel,
            });
        }
    }
    run.csv("z_validate.csv", &rows)?;
    if !failures.is_empty() {
        return Err(Failure::Violation(failures.join("; ")));
    }
    Ok(())
}

/// Training configuration for one value of an ablation axis.
pub fn ablation_config(base: &TrainConfig, axis: AblationAxis, value: &str) -> anyhow::Result<TrainConfig> {
    let mut cfg = base.clone();
    let bad = || anyhow!("bad {} value '{value}'", axis.name());
    match axis {
        AblationAxis::Beta => cfg.beta = value.parse().map_err(|_| bad())?,
        AblationAxis::Rho0 => cfg.rho0 = value.parse().map_err(|_| bad())?,
        AblationAxis::Rank => cfg.rank = Some(value.parse().map_err(|_| bad())?),
        AblationAxis::SampledPairs => {
            cfg.pairs = if value == "full" {
                PairSampling::Full
            } else if let Some(mult) = value.strip_suffix('N') {
                PairSampling::PerExpert(if mult.is_empty() { 1 } else { mult.parse().map_err(|_| bad())? })
            } else {
                PairSampling::Count(value.parse().map_err(|_| bad())?)
            }
        }
    }
    cfg.validate().map_err(|e| anyhow!("{} = {value}: {e}", axis.name()))?;
    Ok(cfg)
}

#[derive(Serialize)]
struct AblationRow<'a> {
    value: &'a str,
    seed: u64,
    acc: f64,
    cv: f64,
    entropy: f64,
    collapsed: bool,
    rho_max: Option<f64>,
}

fn ablate(run: &mut Run) -> Outcome {
    let cfg = run.config().clone();
    let Some(axis) = cfg.ablate.axis else {
        return bail_usage("ablate needs an axis (--axis or ablate.axis)".into());
    };
    let values = if cfg.ablate.values.is_empty() { axis.default_values() } else { cfg.ablate.values.clone() };
    let configs: Vec<TrainConfig> =
        values.iter().map(|v| ablation_config(&cfg.train, axis, v)).collect::<anyhow::Result<_>>()?;
    let seeds = sorted_seeds(run.seeds());

    let jobs: Vec<(usize, u64)> = (0..values.len()).flat_map(|i| seeds.iter().map(move |&s| (i, s))).collect();
    let outcomes: Vec<(usize, RunOutcome)> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let result = run_method(Method::Grmoe, &cfg.task, &configs[i], seed, cfg.ablate.eval_samples);
            (i, RunOutcome { method: Method::Grmoe, seed, result })
        })
        .collect();
    let name = axis.name();
    record_failures(run, outcomes.iter().map(|(i, o)| (format!("{name}={}:{}", values[*i], o.seed), &o.result)))?;

    let rows: Vec<AblationRow> = outcomes
        .iter()
        .filter_map(|(i, o)| {
            o.result.as_ref().ok().map(|r| AblationRow {
                value: &values[*i],
                seed: o.seed,
                acc: r.metrics.assignment_accuracy,
                cv: r.metrics.load_cv,
                entropy: r.metrics.mean_entropy,
                collapsed: r.metrics.collapsed,
                rho_max: r.rho_max,
            })
        })
        .collect();
    run.csv_with_header(
        &format!("ablate_{name}.csv"),
        &["value", "seed", "acc", "cv", "entropy", "collapsed", "rho_max"],
        &rows,
    )?;
    let mut summary = Vec::new();
    for (i, v) in values.iter().enumerate() {
        let group: Vec<&RunOutcome> = outcomes.iter().filter(|(j, _)| *j == i).map(|(_, o)| o).collect();
        summary.extend(summarize(v.clone(), &group)?);
    }
    run.csv_with_header(&format!("ablate_{name}_summary.csv"), SUMMARY_HEADER, &summary)?;
    Ok(())
}

/// Path of the checkpoint `bench` writes for a method and seed.
pub fn checkpoint_path(out: &Path, method: Method, seed: u64) -> PathBuf {
    out.join("checkpoints").join(format!("{}_seed{seed}.json", method.name()))
}
