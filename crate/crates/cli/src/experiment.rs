//! Single training-and-evaluation runs shared by the subcommands.

use grmoe::linalg::RngState;
use grmoe::synthetic::{
    evaluate_batch, max_pairwise_overlap, sample_batch, train_baseline, BaselineKind, EvalMetrics, SyntheticTask,
};
use grmoe::training::{train, Trained, TrainConfig, ALPHA_TRAIN};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TaskConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Grmoe,
    GrmoeAmortized,
    SoftmaxTop1,
    SoftmaxDense,
    VmfGate,
    Hash,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Grmoe => "grmoe",
            Self::GrmoeAmortized => "grmoe_amortized",
            Self::SoftmaxTop1 => "softmax_top1",
            Self::SoftmaxDense => "softmax_dense",
            Self::VmfGate => "vmf_gate",
            Self::Hash => "hash",
        }
    }

    fn baseline(self) -> Option<BaselineKind> {
        match self {
            Self::Grmoe | Self::GrmoeAmortized => None,
            Self::SoftmaxTop1 => Some(BaselineKind::SoftmaxTop1),
            Self::SoftmaxDense => Some(BaselineKind::SoftmaxDense),
            Self::VmfGate => Some(BaselineKind::VmfGate),
            Self::Hash => Some(BaselineKind::Hash),
        }
    }
}

/// Metrics of one finished run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub metrics: EvalMetrics,
    /// Largest learned pairwise overlap divided by the routing rank.
    pub rho_max: Option<f64>,
    pub trained: Option<Trained>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub method: Method,
    pub seed: u64,
    pub result: Result<RunResult, grmoe::Error>,
}

/// Held-out tokens used to score every method for one seed.
pub fn bench_eval_batch(task: &SyntheticTask, seed: u64, n: usize) -> grmoe::synthetic::Batch {
    sample_batch(task, n, &mut RngState::new(seed).substream("bench-eval"))
}

/// Builds the seed's task, trains `method` on it, and evaluates on the
/// seed's held-out set.
pub fn run_method(
    method: Method,
    task: &TaskConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    eval_samples: usize,
) -> grmoe::Result<RunResult> {
    let task = task.spec(seed).build()?;
    if eval_samples < 100 * task.n() {
        return Err(grmoe::Error::InvalidArgument(format!(
            "eval_samples must be at least {}",
            100 * task.n()
        )));
    }
    let cfg = TrainConfig { seed, amortized: method == Method::GrmoeAmortized, ..train_cfg.clone() };
    let held_out = bench_eval_batch(&task, seed, eval_samples);
    match method.baseline() {
        Some(kind) => {
            let router = train_baseline(kind, &task, &cfg)?;
            Ok(RunResult { metrics: evaluate_batch(&router, &held_out)?, rho_max: None, trained: None })
        }
        None => {
            let trained = train(&task, &cfg)?;
            let router = trained.model.router(ALPHA_TRAIN)?;
            let rank = trained.model.frames[0].k() as f64;
            Ok(RunResult {
                metrics: evaluate_batch(&router, &held_out)?,
                rho_max: Some(max_pairwise_overlap(&trained.model.frames)? / rank),
                trained: Some(trained),
            })
        }
    }
}

/// Every `(method, seed)` combination, in parallel, returned in method-major
/// then seed order regardless of scheduling.
pub fn run_grid(
    methods: &[Method],
    seeds: &[u64],
    task: &TaskConfig,
    train_cfg: &TrainConfig,
    eval_samples: usize,
) -> Vec<RunOutcome> {
    let jobs: Vec<(Method, u64)> = methods.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
    jobs.par_iter()
        .map(|&(method, seed)| RunOutcome {
            method,
            seed,
            result: run_method(method, task, train_cfg, seed, eval_samples),
        })
        .collect()
}
