//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with
//! a failure status if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use grmoe::bounds::{run_sweep, SweepConfig};
use grmoe::gating::{route, route_amortized, Amortizer, ExpertBank, AMORTIZER_HIDDEN};
use grmoe::linalg::{gaussian_matrix, qr_positive, Matrix, RngState};
use grmoe::manifold::{grassmann_distance, haar_frame, Frame};
use grmoe::normalizer::{compare, z_montecarlo, z_series, ZQuery};
use grmoe::report::{bootstrap_cv_stderr, pooled_cv};
use grmoe::synthetic::{load_bound_check, make_task, sample_batch, Separation};
use grmoe::training::{
    adam_step, objective, objective_gradients, Gradients, Model, OptimState, PairSampling, TrainConfig,
};
use grmoe_cli::commands::{max_entropy_increase, sweep_alphas};
use grmoe_cli::config::TaskConfig;
use grmoe_cli::experiment::{run_grid, Method, RunOutcome};

type Verdict = Result<String, String>;

const SEEDS: std::ops::Range<u64> = 0..20;
const EVAL_SAMPLES: usize = 10_000;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bound_suite() -> Verdict {
    let cfg = SweepConfig::default();
    let t = Instant::now();
    let r = run_sweep(&cfg).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    check(
        r.violations == 0 && secs < 60.0,
        format!(
            "{} violations over {} instances ({} near-tie), min slacks H_lo {:.2e} H_hi {:.2e} G_k {:.2e}, {secs:.1}s",
            r.violations, r.instances, cfg.near_tie_instances, r.min_slack_entropy_lower, r.min_slack_entropy_upper,
            r.min_slack_topk
        ),
    )
}

fn load_balance_bound() -> Verdict {
    let t = Instant::now();
    let (kappa, alpha) = (1.0, 2.0);
    let target = Separation { gamma: 4.0, rho: 0.25 };
    let mut loads = Vec::new();
    let mut checks = Vec::new();
    for seed in 0..10 {
        let task = make_task(8, 128, 8, 0.0, 0.05, seed).map_err(|e| e.to_string())?;
        let mut rng = RngState::new(seed).substream("load-bound");
        let c = load_bound_check(&task, kappa, alpha, 500, target, &mut rng).map_err(|e| e.to_string())?;
        loads.push(c.loads.clone());
        checks.push(c);
    }
    let stderr = bootstrap_cv_stderr(&loads, 1000, &mut RngState::new(99)).map_err(|e| e.to_string())?;
    let pooled = pooled_cv(&loads).map_err(|e| e.to_string())?;
    let bound = checks.iter().map(|c| c.bound).fold(f64::INFINITY, f64::min);
    let worst = checks.iter().map(|c| c.cv - c.bound).fold(f64::NEG_INFINITY, f64::max);
    let secs = t.elapsed().as_secs_f64();
    check(
        worst <= 3.0 * stderr && pooled <= bound + 3.0 * stderr && secs < 60.0,
        format!(
            "pooled CV {pooled:.2e}, tightest bound {bound:.3e}, worst per-seed CV - bound {worst:.3e}, 3*stderr {:.2e}, {secs:.1}s",
            3.0 * stderr
        ),
    )
}

fn normalizer() -> Verdict {
    let t = Instant::now();
    let dims = [(32, 8), (128, 16), (768, 48)];
    let (mut worst_in, mut worst_out) = (0.0f64, 0.0f64);
    for &(d, k) in &dims {
        for i in 0..=38 {
            let kappa = 0.4 + 0.1 * i as f64;
            worst_in = worst_in.max(compare(kappa, d, k, None).map_err(|e| e.to_string())?.saddle_rel_err());
        }
        for i in 1..=29 {
            let kappa = 4.2 + 0.2 * i as f64;
            worst_out = worst_out.max(compare(kappa, d, k, None).map_err(|e| e.to_string())?.saddle_rel_err());
        }
    }
    let spots = [(0.4, 32, 8), (2.0, 32, 8), (4.2, 32, 8), (1.0, 128, 16), (4.2, 128, 16), (2.0, 768, 48)];
    let mut worst_z = 0.0f64;
    for (i, &(kappa, d, k)) in spots.iter().enumerate() {
        let q = ZQuery::new(kappa, d, k).map_err(|e| e.to_string())?;
        let mut rng = RngState::new(7).substream_indexed("z-spot", i as u64);
        let (est, se): (f64, f64) = z_montecarlo(&q, 1_000_000, &mut rng).map_err(|e| e.to_string())?;
        let exact = z_series(&q).map_err(|e| e.to_string())?;
        worst_z = worst_z.max((est - exact).abs() / se);
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        worst_in <= 0.015 && worst_out <= 0.05 && worst_z <= 3.0 && secs < 300.0,
        format!(
            "saddle rel err max {worst_in:.4} on [0.4,4.2] (tol 0.015), {worst_out:.4} on (4.2,10] (tol 0.05); MC |z| max {worst_z:.2} at 6 points (tol 3); {secs:.1}s"
        ),
    )
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn gradient_check() -> Verdict {
    let t = Instant::now();
    let cfg = TrainConfig { beta: 0.5, rho0: 0.1, ..TrainConfig::default() };
    let eps = 1e-5;
    let mut worst = [0.0f64; 3];
    for seed in 0..3 {
        let mut rng = RngState::new(100 + seed);
        let task = make_task(3, 6, 2, 0.2, 0.3, seed).map_err(|e| e.to_string())?;
        let batch = sample_batch(&task, 16, &mut rng);
        let bases: Vec<Matrix<f64>> = (0..3).map(|_| haar_frame(6, 2, &mut rng).unwrap().into_basis()).collect();
        let kappas = vec![0.6, 1.1, 1.9];
        let mut am = Amortizer::init(6, 5, 3, &mut rng);
        am.w2 = gaussian_matrix(3, 5, &mut rng).scale(0.5);
        am.b1 = rng.normal_vec(5);
        am.b2 = rng.normal_vec(3);
        let f = |b: &[Matrix<f64>], k: &[f64], a: &Amortizer<f64>| objective(b, k, Some(a), &batch, &cfg).unwrap().total;
        let (_, g): (_, Gradients) = objective_gradients(&bases, &kappas, Some(&am), &batch, &cfg).map_err(|e| e.to_string())?;

        for e in 0..3 {
            for i in 0..bases[e].as_slice().len() {
                let (mut p, mut m) = (bases.clone(), bases.clone());
                p[e].as_mut_slice()[i] += eps;
                m[e].as_mut_slice()[i] -= eps;
                let fd = (f(&p, &kappas, &am) - f(&m, &kappas, &am)) / (2.0 * eps);
                worst[0] = worst[0].max(rel(g.frames[e].as_slice()[i], fd));
            }
            let (mut p, mut m) = (kappas.clone(), kappas.clone());
            p[e] += eps;
            m[e] -= eps;
            let fd = (f(&bases, &p, &am) - f(&bases, &m, &am)) / (2.0 * eps);
            worst[2] = worst[2].max(rel(g.kappas[e], fd));
        }
        let ga = g.amortizer.as_ref().ok_or("missing amortizer gradient")?;
        let groups: [(&[f64], fn(&mut Amortizer<f64>) -> &mut [f64]); 4] = [
            (ga.w1.as_slice(), |a| a.w1.as_mut_slice()),
            (&ga.b1, |a| &mut a.b1),
            (ga.w2.as_slice(), |a| a.w2.as_mut_slice()),
            (&ga.b2, |a| &mut a.b2),
        ];
        for (grad, access) in groups {
            for (i, &gi) in grad.iter().enumerate() {
                let (mut p, mut m) = (am.clone(), am.clone());
                access(&mut p)[i] += eps;
                access(&mut m)[i] -= eps;
                let fd = (f(&bases, &kappas, &p) - f(&bases, &kappas, &m)) / (2.0 * eps);
                worst[1] = worst[1].max(rel(gi, fd));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let max = worst.iter().copied().fold(0.0, f64::max);
    check(
        max <= 1e-5 && secs < 10.0,
        format!(
            "max rel err frames {:.1e}, amortizer {:.1e}, kappa {:.1e} (tol 1e-5), {secs:.2}s",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn random_orthogonal(k: usize, rng: &mut RngState) -> Matrix<f64> {
    qr_positive(&gaussian_matrix(k, k, rng)).unwrap().0
}

fn manifold_invariants() -> Verdict {
    let mut rng = RngState::new(5);
    let mut worst_rot = 0.0f64;
    for _ in 0..50 {
        let frames: Vec<Frame<f64>> = (0..6).map(|_| haar_frame(24, 4, &mut rng).unwrap()).collect();
        let kappas: Vec<f64> = (0..6).map(|_| rng.uniform_range(0.1, 5.0)).collect();
        let rotated: Vec<Frame<f64>> =
            frames.iter().map(|f| f.rotate(&random_orthogonal(4, &mut rng)).unwrap()).collect();
        let a = ExpertBank::routing_only(frames, kappas.clone()).unwrap();
        let b = ExpertBank::routing_only(rotated, kappas).unwrap();
        let x: Vec<f64> = rng.normal_vec(24);
        let alpha = rng.uniform_range(0.0, 5.0);
        let (pa, pb) = (route(&a, &x, alpha).unwrap(), route(&b, &x, alpha).unwrap());
        for (u, v) in pa.probs.iter().zip(&pb.probs) {
            worst_rot = worst_rot.max((u - v).abs());
        }
    }

    let cfg = TrainConfig::default();
    let mut model = Model::init(3, 16, 4, &cfg, &mut rng).map_err(|e| e.to_string())?;
    let mut state = OptimState::new(&model, &cfg);
    for _ in 0..10_000 {
        let grads = Gradients {
            frames: (0..3).map(|_| gaussian_matrix(16, 4, &mut rng)).collect(),
            kappas: rng.normal_vec(3),
            amortizer: None,
        };
        adam_step(&mut model, &grads, &mut state, &cfg).map_err(|e| e.to_string())?;
    }
    let defect = model.frames.iter().map(|f| f.defect()).fold(0.0, f64::max);

    let u = Frame::<f64>::coordinate_block(16, 4, 0).unwrap();
    let v = Frame::<f64>::coordinate_block(16, 4, 4).unwrap();
    let h = haar_frame::<f64>(16, 4, &mut rng).unwrap();
    let same = grassmann_distance(&h, &h).unwrap();
    let rot = grassmann_distance(&h, &h.rotate(&random_orthogonal(4, &mut rng)).unwrap()).unwrap();
    let orth = grassmann_distance(&u, &v).unwrap();
    let anchor = same.max(rot).max((orth - 2.0).abs());
    check(
        worst_rot <= 1e-10 && defect <= 1e-8 && anchor <= 1e-12,
        format!(
            "rotation invariance {worst_rot:.1e} (tol 1e-10), defect after 10k steps {defect:.1e} (tol 1e-8), distance anchors {anchor:.1e} (tol 1e-12)"
        ),
    )
}

struct Stats {
    acc: f64,
    cv: f64,
    collapse: f64,
    runs: usize,
}

fn stats(outcomes: &[RunOutcome], method: Method) -> Stats {
    let ok: Vec<_> = outcomes
        .iter()
        .filter(|o| o.method == method)
        .filter_map(|o| o.result.as_ref().ok())
        .collect();
    let n = ok.len().max(1) as f64;
    Stats {
        acc: ok.iter().map(|r| r.metrics.assignment_accuracy).sum::<f64>() / n,
        cv: ok.iter().map(|r| r.metrics.load_cv).sum::<f64>() / n,
        collapse: ok.iter().filter(|r| r.metrics.collapsed).count() as f64 / n,
        runs: ok.len(),
    }
}

fn easy_setting(runs: &[RunOutcome], secs: f64) -> Verdict {
    let g = stats(runs, Method::Grmoe);
    let dense = stats(runs, Method::SoftmaxDense);
    let top1 = stats(runs, Method::SoftmaxTop1);
    let seeds = SEEDS.count();
    let ok = g.runs == seeds
        && g.acc >= 0.88
        && g.collapse == 0.0
        && g.cv <= 0.10
        && dense.collapse >= 0.10
        && dense.acc <= g.acc - 0.03
        && secs <= 600.0;
    check(
        ok,
        format!(
            "grmoe acc {:.3} (>= 0.88), collapse {}/{seeds} (0), CV {:.3} (<= 0.10); softmax_dense collapse {:.2} (>= 0.10), acc {:.3} (<= grmoe - 0.03); softmax_top1 collapse {:.2}, acc {:.3}; {secs:.0}s",
            g.acc, (g.collapse * g.runs as f64).round(), g.cv, dense.collapse, dense.acc, top1.collapse, top1.acc
        ),
    )
}

fn hard_setting() -> Verdict {
    let t = Instant::now();
    let seeds: Vec<u64> = SEEDS.collect();
    let runs = run_grid(
        &[Method::Grmoe, Method::SoftmaxDense],
        &seeds,
        &TaskConfig::hard(),
        &TrainConfig::default(),
        EVAL_SAMPLES,
    );
    let secs = t.elapsed().as_secs_f64();
    let g = stats(&runs, Method::Grmoe);
    let dense = stats(&runs, Method::SoftmaxDense);
    let ok = g.runs == seeds.len()
        && (g.acc - 0.783).abs() <= 0.05
        && g.acc >= dense.acc + 0.05
        && g.collapse == 0.0
        && secs <= 600.0;
    check(
        ok,
        format!(
            "grmoe acc {:.3} (0.783 +/- 0.05), softmax_dense acc {:.3} (gap {:.3} >= 0.05), grmoe collapse {}/{} (0); {secs:.0}s",
            g.acc, dense.acc, g.acc - dense.acc, (g.collapse * g.runs as f64).round(), g.runs
        ),
    )
}

fn alpha_sweep(runs: &[RunOutcome]) -> Verdict {
    let trained = runs
        .iter()
        .find(|o| o.method == Method::Grmoe && o.seed == 0)
        .and_then(|o| o.result.as_ref().ok())
        .and_then(|r| r.trained.as_ref())
        .ok_or("no trained easy-setting model for seed 0")?;
    let mut alphas: Vec<f64> = (0..=20).map(|i| 0.25 * i as f64).collect();
    alphas.push(50.0);
    let rows = sweep_alphas(&trained.checkpoint, &alphas, EVAL_SAMPLES).map_err(|e| e.to_string())?;
    let grid = &rows[..21];
    let rise = max_entropy_increase(grid);
    let at_zero = (grid[0].entropy - 8f64.ln()).abs();
    let eff50 = rows[21].eff_experts;
    check(
        rise <= 1e-9 && at_zero <= 1e-12 && eff50 <= 1.05,
        format!(
            "largest entropy increase {rise:.1e} (<= 1e-9), |H(0) - ln 8| {at_zero:.1e} (<= 1e-12), effective experts at alpha=50 {eff50:.4} (<= 1.05)"
        ),
    )
}

fn ablations(runs: &[RunOutcome]) -> Verdict {
    let t = Instant::now();
    let seeds: Vec<u64> = SEEDS.collect();
    let easy = TaskConfig::default();
    let base = TrainConfig::default();
    let no_reg = run_grid(&[Method::Grmoe], &seeds, &easy, &TrainConfig { beta: 0.0, ..base.clone() }, EVAL_SAMPLES);
    let with_reg = stats(runs, Method::Grmoe);
    let without = stats(&no_reg, Method::Grmoe);

    let pair_seeds: Vec<u64> = (0..5).collect();
    let full = run_grid(&[Method::Grmoe], &pair_seeds, &easy, &TrainConfig { pairs: PairSampling::Full, ..base }, EVAL_SAMPLES);
    let sampled: Vec<RunOutcome> = runs
        .iter()
        .filter(|o| o.method == Method::Grmoe && pair_seeds.contains(&o.seed))
        .cloned()
        .collect();
    let cv_full = stats(&full, Method::Grmoe).cv;
    let cv_sampled = stats(&sampled, Method::Grmoe).cv;
    let secs = t.elapsed().as_secs_f64();
    check(
        without.collapse > with_reg.collapse && (cv_full - cv_sampled).abs() <= 0.01,
        format!(
            "collapse rate beta=0 {:.2} vs beta=0.01 {:.2} (strictly greater); CV M=4N {cv_sampled:.4} vs full {cv_full:.4} over {} seeds (|diff| <= 0.01); {secs:.0}s",
            without.collapse, with_reg.collapse, pair_seeds.len()
        ),
    )
}

fn amortizer_reduction() -> Verdict {
    let mut rng = RngState::new(21);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = 2 + rng.index(7);
        let d = 4 + rng.index(20);
        let k = 1 + rng.index(d / 2);
        let frames: Vec<Frame<f64>> = (0..n).map(|_| haar_frame(d, k, &mut rng).unwrap()).collect();
        let kappas: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.1, 5.0)).collect();
        let bank = ExpertBank::routing_only(frames, kappas).unwrap();
        let mut am = Amortizer::init(d, AMORTIZER_HIDDEN, n, &mut rng);
        am.w2 = gaussian_matrix(n, AMORTIZER_HIDDEN, &mut rng);
        am.b2 = rng.normal_vec(n);
        am.zero_head();
        let x: Vec<f64> = rng.normal_vec(d);
        let alpha = rng.uniform_range(0.0, 5.0);
        let a = route(&bank, &x, alpha).map_err(|e| e.to_string())?;
        let b = route_amortized(&bank, &am, &x, alpha).map_err(|e| e.to_string())?;
        for (u, v) in a.probs.iter().zip(&b.probs) {
            worst = worst.max((u - v).abs());
        }
    }
    check(worst <= 1e-12, format!("max |route - route_amortized| over 100 instances {worst:.1e} (<= 1e-12)"))
}

const TINY: &str = r#"
seeds = [0, 1]
[task]
N = 4
d = 32
k = 4
[train]
steps = 60
batch_size = 32
eval_interval = 20
eval_samples = 400
[bench]
methods = ["grmoe", "grmoe_amortized", "softmax_top1", "softmax_dense", "vmf_gate", "hash"]
eval_samples = 400
[alpha_sweep]
eval_samples = 400
[ablate]
axis = "sampled_pairs"
values = ["N", "full"]
eval_samples = 400
[bounds]
instances = 100
near_tie_instances = 20
[z_validate]
kappas = [0.0, 0.4, 2.0]
dims = [[32, 8]]
mc_samples = 5000
"#;

fn grmoe(args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_grmoe"))
        .args(args)
        .stderr(std::process::Stdio::null())
        .status()
        .map_err(|e| e.to_string())?;
    match status.code() {
        Some(0) => Ok(()),
        code => Err(format!("grmoe {} exited with {code:?}", args.join(" "))),
    }
}

fn artifacts(dir: &Path) -> Result<Vec<String>, String> {
    let text = std::fs::read_to_string(dir.join("manifest.json")).map_err(|e| e.to_string())?;
    let m: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    Ok(m["artifacts"]
        .as_array()
        .ok_or("manifest without artifacts")?
        .iter()
        .filter_map(|v| v.as_str().map(str::to_string))
        .collect())
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let cfg = root.join("tiny.toml");
    std::fs::write(&cfg, TINY).map_err(|e| e.to_string())?;
    let cfg = cfg.to_str().unwrap();
    let p = |s: &str| root.join(s).to_str().unwrap().to_string();

    grmoe(&["bench", "--config", cfg, "--out", &p("bench")])?;
    let ckpt = p("bench/checkpoints/grmoe_seed0.json");
    grmoe(&["alpha-sweep", "--config", cfg, "--out", &p("sweep"), "--checkpoint", &ckpt])?;
    grmoe(&["bounds", "--config", cfg, "--out", &p("bounds")])?;
    grmoe(&["z-validate", "--config", cfg, "--out", &p("z")])?;
    grmoe(&["ablate", "--config", cfg, "--out", &p("ablate")])?;

    let mut compared = 0;
    for name in ["bench", "sweep", "bounds", "z", "ablate"] {
        let again = format!("{name}-again");
        grmoe(&[
            subcommand(name),
            "--manifest",
            &p(&format!("{name}/manifest.json")),
            "--out",
            &p(&again),
            "--threads",
            "2",
        ])?;
        for f in artifacts(&root.join(name))? {
            let a = std::fs::read(root.join(name).join(&f)).map_err(|e| e.to_string())?;
            let b = std::fs::read(root.join(&again).join(&f)).map_err(|e| e.to_string())?;
            if a != b {
                return Err(format!("{name}/{f} differs on rerun"));
            }
            compared += 1;
        }
    }
    Ok(format!("{compared} artifacts from 5 subcommands reproduced byte-identically from their manifests"))
}

fn subcommand(dir: &str) -> &'static str {
    match dir {
        "bench" => "bench",
        "sweep" => "alpha-sweep",
        "bounds" => "bounds",
        "z" => "z-validate",
        _ => "ablate",
    }
}

fn main() {
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut run = |id: u32, name: &'static str, f: &mut dyn FnMut() -> Verdict| {
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let tag = if verdict.is_ok() { "PASS" } else { "FAIL" };
        let detail = match &verdict {
            Ok(d) | Err(d) => d,
        };
        println!("{tag} [{id:>2}] {name}: {detail}");
        results.push((id, name, verdict));
    };

    run(1, "entropy and top-k bounds", &mut bound_suite);
    run(2, "load-balance bound harness", &mut load_balance_bound);
    run(3, "normalizer accuracy", &mut normalizer);
    run(4, "gradient checks", &mut gradient_check);
    run(5, "manifold invariants", &mut manifold_invariants);

    let t = Instant::now();
    let seeds: Vec<u64> = SEEDS.collect();
    let easy_runs = run_grid(
        &[Method::Grmoe, Method::SoftmaxDense, Method::SoftmaxTop1],
        &seeds,
        &TaskConfig::default(),
        &TrainConfig::default(),
        EVAL_SAMPLES,
    );
    let easy_secs = t.elapsed().as_secs_f64();
    run(6, "synthetic easy setting", &mut || easy_setting(&easy_runs, easy_secs));
    run(7, "synthetic hard setting", &mut hard_setting);
    run(8, "sparsity dial sweep", &mut || alpha_sweep(&easy_runs));
    run(9, "ablations", &mut || ablations(&easy_runs));
    run(10, "amortizer reduction", &mut amortizer_reduction);
    run(11, "manifest determinism", &mut determinism);

    let passed = results.iter().filter(|r| r.2.is_ok()).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
