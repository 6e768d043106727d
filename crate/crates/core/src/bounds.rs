//! Computable entropy, top-k mass, and load-balance bounds for concentration
//! gating, and checkers that compare them with observed routing.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gating::{entropy, ranked, route, topk_mass, ExpertBank};
use crate::linalg::RngState;
use crate::manifold::{haar_frame, Frame};
use crate::scalar::Real;

/// Absolute slack used when flagging a bound as violated.
pub const SLACK: f64 = 1e-9;

/// Statistics of the concentrated affinities `κ̃_e = κ_e·a_e(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcentrationStats<T> {
    pub tilde_kappa: Vec<T>,
    /// `max − mean`
    pub delta_kappa: T,
    /// Variance under the uniform distribution over experts.
    pub gamma_kappa: T,
    /// `max − min`
    pub delta_range: T,
    /// Consecutive gaps of the descending sort; `gaps[k-1]` is `δ_k`.
    pub gaps: Vec<T>,
}

impl<T: Real> ConcentrationStats<T> {
    pub fn from_tilde(tilde_kappa: Vec<T>) -> Self {
        let n = T::from_usize(tilde_kappa.len()).unwrap();
        let mean = tilde_kappa.iter().copied().sum::<T>() / n;
        let max = tilde_kappa.iter().copied().fold(T::neg_infinity(), T::max);
        let min = tilde_kappa.iter().copied().fold(T::infinity(), T::min);
        let gamma = tilde_kappa.iter().map(|&t| (t - mean) * (t - mean)).sum::<T>() / n;
        let order = ranked(&tilde_kappa);
        let gaps = order
            .windows(2)
            .map(|w| (tilde_kappa[w[0]] - tilde_kappa[w[1]]).max(T::zero()))
            .collect();
        Self {
            delta_kappa: (max - mean).max(T::zero()),
            gamma_kappa: gamma,
            delta_range: max - min,
            gaps,
            tilde_kappa,
        }
    }

    pub fn n(&self) -> usize {
        self.tilde_kappa.len()
    }
}

pub fn concentration_stats<T: Real>(bank: &ExpertBank<T>, x: &[T]) -> Result<ConcentrationStats<T>> {
    Ok(ConcentrationStats::from_tilde(bank.concentrated(x)?))
}

/// `(log N − α Δ_κ, log N − (α²/2) Γ_κ e^{−α δ_κ})`.
pub fn entropy_bounds<T: Real>(stats: &ConcentrationStats<T>, alpha: T, n: usize) -> (T, T) {
    let log_n = T::from_usize(n).unwrap().ln();
    let lower = log_n - alpha * stats.delta_kappa;
    let upper = log_n - T::lit(0.5) * alpha * alpha * stats.gamma_kappa * (-alpha * stats.delta_range).exp();
    (lower, upper)
}

/// Lower bound on the top-`k` mass, raw and clamped into `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TopkBound<T> {
    pub raw: T,
    pub clamped: T,
}

/// `G_k ≥ 1 − (N − k)·exp(−α δ_k)` for `1 ≤ k < N`.
pub fn topk_mass_bound<T: Real>(stats: &ConcentrationStats<T>, alpha: T, k: usize, n: usize) -> Result<TopkBound<T>> {
    if k == 0 || k >= n || k > stats.gaps.len() {
        return Err(Error::InvalidArgument(format!("top-k bound needs 1 <= k < N = {n}, got {k}")));
    }
    let tail = T::from_usize(n - k).unwrap();
    let raw = T::one() - tail * (-alpha * stats.gaps[k - 1]).exp();
    Ok(TopkBound {
        raw,
        clamped: raw.max(T::zero()).min(T::one()),
    })
}

/// Load-balance bound `CV ≤ (N−1)·exp(−α γ (κ_min − ρ κ_max))`, valid when
/// the separation gap `γ(κ_min − ρ κ_max)` is positive.
pub fn cv_bound<T: Real>(n: usize, alpha: T, gamma: T, rho: T, kappa_min: T, kappa_max: T) -> Result<T> {
    let gap = gamma * (kappa_min - rho * kappa_max);
    if !(gap > T::zero()) {
        return Err(Error::AssumptionViolated { gap: gap.as_f64() });
    }
    Ok(T::from_usize(n - 1).unwrap() * (-alpha * gap).exp())
}

/// Test hook for negative controls: perturbs the statistics fed into the
/// entropy lower bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaultInjection {
    pub delta_kappa_scale: f64,
}

impl Default for FaultInjection {
    fn default() -> Self {
        Self { delta_kappa_scale: 1.0 }
    }
}

/// Observed routing quantities next to their bounds for one token.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport<T> {
    pub alpha: T,
    pub observed_entropy: T,
    pub entropy_lower: T,
    pub entropy_upper: T,
    /// Indexed by `k − 1`.
    pub observed_topk: Vec<T>,
    pub topk_lower: Vec<TopkBound<T>>,
    pub entropy_lower_ok: bool,
    pub entropy_upper_ok: bool,
    pub topk_ok: Vec<bool>,
}

impl<T: Real> BoundReport<T> {
    pub fn satisfied(&self) -> bool {
        self.entropy_lower_ok && self.entropy_upper_ok && self.topk_ok.iter().all(|&b| b)
    }

    pub fn violations(&self) -> usize {
        usize::from(!self.entropy_lower_ok)
            + usize::from(!self.entropy_upper_ok)
            + self.topk_ok.iter().filter(|&&b| !b).count()
    }

    pub fn entropy_lower_slack(&self) -> T {
        self.observed_entropy - self.entropy_lower
    }

    pub fn entropy_upper_slack(&self) -> T {
        self.entropy_upper - self.observed_entropy
    }

    /// Smallest `G_k − bound` over the checked `k`.
    pub fn topk_slack(&self) -> Option<T> {
        self.observed_topk
            .iter()
            .zip(&self.topk_lower)
            .map(|(&g, b)| g - b.raw)
            .reduce(T::min)
    }
}

/// Routes `x` and checks every bound for `k = 1..=min(kmax, N−1)`.
pub fn check_instance<T: Real>(bank: &ExpertBank<T>, x: &[T], alpha: T, kmax: usize) -> Result<BoundReport<T>> {
    check_instance_with(bank, x, alpha, kmax, FaultInjection::default())
}

pub fn check_instance_with<T: Real>(
    bank: &ExpertBank<T>,
    x: &[T],
    alpha: T,
    kmax: usize,
    fault: FaultInjection,
) -> Result<BoundReport<T>> {
    let rd = route(bank, x, alpha)?;
    let mut stats = concentration_stats(bank, x)?;
    stats.delta_kappa *= T::lit(fault.delta_kappa_scale);
    let n = bank.n();
    let h = entropy(&rd);
    let (lower, upper) = entropy_bounds(&stats, alpha, n);
    let slack = T::lit(SLACK);

    let kmax = kmax.min(n - 1);
    let mut observed_topk = Vec::with_capacity(kmax);
    let mut topk_lower = Vec::with_capacity(kmax);
    let mut topk_ok = Vec::with_capacity(kmax);
    for k in 1..=kmax {
        let g = topk_mass(&rd, k)?;
        let b = topk_mass_bound(&stats, alpha, k, n)?;
        topk_ok.push(g >= b.raw - slack);
        observed_topk.push(g);
        topk_lower.push(b);
    }
    Ok(BoundReport {
        alpha,
        observed_entropy: h,
        entropy_lower: lower,
        entropy_upper: upper,
        entropy_lower_ok: h >= lower - slack,
        entropy_upper_ok: h <= upper + slack,
        observed_topk,
        topk_lower,
        topk_ok,
    })
}

/// Randomized bound-verification sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepConfig {
    pub instances: usize,
    pub near_tie_instances: usize,
    pub n_choices: Vec<usize>,
    pub d_choices: Vec<usize>,
    pub kappa_range: (f64, f64),
    pub alpha_range: (f64, f64),
    pub seed: u64,
    #[serde(skip)]
    pub fault: FaultInjection,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            instances: 1000,
            near_tie_instances: 200,
            n_choices: vec![2, 4, 8, 16],
            d_choices: vec![8, 32],
            kappa_range: (0.1, 5.0),
            alpha_range: (0.0, 5.0),
            seed: 0,
            fault: FaultInjection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub instances: usize,
    pub violations: usize,
    pub violating_instances: usize,
    pub min_slack_entropy_lower: f64,
    pub min_slack_entropy_upper: f64,
    pub min_slack_topk: f64,
    /// Largest `|bound − log N|` over instances with `α = 0`.
    pub max_alpha_zero_gap: f64,
}

impl SweepReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

struct Instance {
    bank: ExpertBank<f64>,
    x: Vec<f64>,
    alpha: f64,
}

fn random_instance(cfg: &SweepConfig, rng: &mut RngState, near_tie: bool) -> Result<Instance> {
    let n = cfg.n_choices[rng.index(cfg.n_choices.len())];
    let d = cfg.d_choices[rng.index(cfg.d_choices.len())];
    let k = 1 + rng.index((d / 2).max(1));
    let alpha = rng.uniform_range(cfg.alpha_range.0, cfg.alpha_range.1);
    let x: Vec<f64> = rng.normal_vec(d);
    let (frames, kappas): (Vec<Frame<f64>>, Vec<f64>) = if near_tie {
        // One shared subspace and concentrations within a relative 1e-7, so
        // the concentrated affinities differ by well under 1e-6.
        let frame = haar_frame(d, k, rng)?;
        let base = rng.uniform_range(cfg.kappa_range.0, cfg.kappa_range.1);
        let kappas = (0..n).map(|_| base * (1.0 + 1e-7 * rng.uniform())).collect();
        (vec![frame; n], kappas)
    } else {
        let frames = (0..n).map(|_| haar_frame(d, k, rng)).collect::<Result<_>>()?;
        let kappas = (0..n)
            .map(|_| rng.uniform_range(cfg.kappa_range.0, cfg.kappa_range.1))
            .collect();
        (frames, kappas)
    };
    Ok(Instance {
        bank: ExpertBank::routing_only(frames, kappas)?,
        x,
        alpha,
    })
}

/// Checks `instances` random and `near_tie_instances` adversarial instances.
/// Instance `i` draws from its own sub-stream, so the report does not depend
/// on evaluation order.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepReport> {
    let root = RngState::new(cfg.seed);
    let total = cfg.instances + cfg.near_tie_instances;
    let reports: Vec<BoundReport<f64>> = (0..total)
        .into_par_iter()
        .map(|i| {
            let mut rng = root.substream_indexed("bound-instance", i as u64);
            let inst = random_instance(cfg, &mut rng, i >= cfg.instances)?;
            check_instance_with(&inst.bank, &inst.x, inst.alpha, inst.bank.n() - 1, cfg.fault)
        })
        .collect::<Result<_>>()?;

    let mut out = SweepReport {
        instances: total,
        violations: 0,
        violating_instances: 0,
        min_slack_entropy_lower: f64::INFINITY,
        min_slack_entropy_upper: f64::INFINITY,
        min_slack_topk: f64::INFINITY,
        max_alpha_zero_gap: 0.0,
    };
    for r in &reports {
        let v = r.violations();
        out.violations += v;
        out.violating_instances += usize::from(v > 0);
        out.min_slack_entropy_lower = out.min_slack_entropy_lower.min(r.entropy_lower_slack());
        out.min_slack_entropy_upper = out.min_slack_entropy_upper.min(r.entropy_upper_slack());
        if let Some(s) = r.topk_slack() {
            out.min_slack_topk = out.min_slack_topk.min(s);
        }
        if r.alpha == 0.0 {
            let log_n = (r.topk_lower.len() as f64 + 1.0).ln();
            let gap = (r.entropy_lower - log_n).abs().max((r.entropy_upper - log_n).abs());
            out.max_alpha_zero_gap = out.max_alpha_zero_gap.max(gap);
        }
    }
    Ok(out)
}
