//! Run configuration. Every field has a default, so an empty file (or no
//! file at all) is a valid configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use grmoe::bounds::{FaultInjection, SweepConfig};
use grmoe::synthetic::TaskSpec;
use grmoe::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::experiment::Method;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Seed list; each subcommand has its own default when absent.
    pub seeds: Option<Vec<u64>>,
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub alpha_sweep: AlphaSweepConfig,
    pub bounds: BoundsConfig,
    pub z_validate: ZValidateConfig,
    pub ablate: AblateConfig,
}

impl Config {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.task.spec(0).build().map_err(|e| anyhow::anyhow!("task: {e}"))?;
        self.train.validate().map_err(|e| anyhow::anyhow!("train: {e}"))?;
        if self.seeds.as_ref().is_some_and(Vec::is_empty) {
            bail!("seed list is empty");
        }
        Ok(())
    }
}

/// Synthetic task dimensions; the seed comes from the run's seed list.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    #[serde(rename = "N")]
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub rho_star: f64,
    pub sigma2: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        let s = TaskSpec::easy(0);
        Self { n: s.n, d: s.d, k: s.k, rho_star: s.rho_star, sigma2: s.sigma2 }
    }
}

impl TaskConfig {
    pub fn hard() -> Self {
        Self { rho_star: 0.4, sigma2: 0.5, ..Self::default() }
    }

    pub fn spec(&self, seed: u64) -> TaskSpec {
        TaskSpec { n: self.n, d: self.d, k: self.k, rho_star: self.rho_star, sigma2: self.sigma2, seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub methods: Vec<Method>,
    /// Held-out tokens per evaluation.
    pub eval_samples: usize,
    /// Keep a checkpoint and metrics log for every trained GrMoE run.
    pub save_checkpoints: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            methods: vec![
                Method::Grmoe,
                Method::GrmoeAmortized,
                Method::SoftmaxTop1,
                Method::SoftmaxDense,
                Method::VmfGate,
                Method::Hash,
            ],
            eval_samples: 10_000,
            save_checkpoints: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlphaSweepConfig {
    pub checkpoint: Option<PathBuf>,
    pub alphas: Vec<f64>,
    pub eval_samples: usize,
}

impl Default for AlphaSweepConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            alphas: (0..=20).map(|i| 0.25 * i as f64).collect(),
            eval_samples: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsConfig {
    pub instances: usize,
    pub near_tie_instances: usize,
    pub n_choices: Vec<usize>,
    pub d_choices: Vec<usize>,
    pub kappa_range: [f64; 2],
    pub alpha_range: [f64; 2],
    /// Test hook: multiplies the concentration gap fed to the entropy lower
    /// bound. Anything below 1 makes the bound invalid.
    pub delta_kappa_scale: f64,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        let s = SweepConfig::default();
        Self {
            instances: s.instances,
            near_tie_instances: s.near_tie_instances,
            n_choices: s.n_choices,
            d_choices: s.d_choices,
            kappa_range: [s.kappa_range.0, s.kappa_range.1],
            alpha_range: [s.alpha_range.0, s.alpha_range.1],
            delta_kappa_scale: 1.0,
        }
    }
}

impl BoundsConfig {
    pub fn sweep(&self, seed: u64) -> anyhow::Result<SweepConfig> {
        if self.n_choices.iter().any(|&n| n < 2) || self.n_choices.is_empty() || self.d_choices.is_empty() {
            bail!("bounds: need N >= 2 and nonempty dimension lists");
        }
        if self.d_choices.iter().any(|&d| d < 2) {
            bail!("bounds: need d >= 2");
        }
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r[0] >= 0.0 && r[1].is_finite();
        if !ordered(self.alpha_range) || !ordered(self.kappa_range) || self.kappa_range[0] <= 0.0 {
            bail!("bounds: ranges must be ordered, kappa > 0 and alpha >= 0");
        }
        Ok(SweepConfig {
            instances: self.instances,
            near_tie_instances: self.near_tie_instances,
            n_choices: self.n_choices.clone(),
            d_choices: self.d_choices.clone(),
            kappa_range: (self.kappa_range[0], self.kappa_range[1]),
            alpha_range: (self.alpha_range[0], self.alpha_range[1]),
            seed,
            fault: FaultInjection { delta_kappa_scale: self.delta_kappa_scale },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZValidateConfig {
    pub kappas: Vec<f64>,
    /// `[d, k]` pairs.
    pub dims: Vec<[usize; 2]>,
    /// Monte-Carlo samples per row; 0 disables the estimate.
    pub mc_samples: usize,
    /// Saddle-point tolerance inside the training regime.
    pub tol_in_regime: f64,
    pub tol_out_of_regime: f64,
}

impl Default for ZValidateConfig {
    fn default() -> Self {
        Self {
            kappas: vec![0.0, 0.4, 1.0, 2.0, 4.2, 8.0],
            dims: vec![[32, 8], [128, 16], [768, 48]],
            mc_samples: 100_000,
            tol_in_regime: 0.015,
            tol_out_of_regime: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Beta,
    Rho0,
    Rank,
    SampledPairs,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Beta => "beta",
            Self::Rho0 => "rho0",
            Self::Rank => "rank",
            Self::SampledPairs => "sampled_pairs",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Self::Beta => &["0", "0.01"],
            Self::Rho0 => &["0.1", "0.3", "0.5"],
            Self::Rank => &["2", "4", "8", "16"],
            Self::SampledPairs => &["N", "2N", "4N", "full"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        Ok(match s {
            "beta" => Self::Beta,
            "rho0" => Self::Rho0,
            "rank" => Self::Rank,
            "sampled_pairs" => Self::SampledPairs,
            other => bail!("unknown ablation axis '{other}' (expected beta, rho0, rank or sampled_pairs)"),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub axis: Option<AblationAxis>,
    /// Axis values; the axis defaults when empty. Pair counts are written
    /// as `full`, a multiple of N (`4N`) or a plain count.
    pub values: Vec<String>,
    pub eval_samples: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { axis: None, values: Vec::new(), eval_samples: 10_000 }
    }
}

/// Parses `0,1,5` and half-open ranges `0..20`, or a mix of both.
pub fn parse_seeds(s: &str) -> anyhow::Result<Vec<u64>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
            if b <= a {
                bail!("empty seed range '{part}'");
            }
            out.extend(a..b);
        } else {
            out.push(part.parse().with_context(|| format!("bad seed '{part}'"))?);
        }
    }
    if out.is_empty() {
        bail!("seed list is empty");
    }
    Ok(out)
}

pub fn parse_floats(s: &str) -> anyhow::Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<f64>().with_context(|| format!("bad number '{p}'")))
        .collect()
}
