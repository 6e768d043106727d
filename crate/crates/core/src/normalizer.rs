//! Normalizing constant of the scalar-concentration Bingham density on a
//! rank-`k` subspace,
//!
//! ```text
//! Z(κ) = E_{x ~ Unif(S^{d-1})} [ exp(κ ‖Uᵀx‖²) ],
//! ```
//!
//! i.e. the Bingham constant for the spectrum `{κ × k, 0 × (d−k)}` relative to
//! the uniform measure. Three evaluations are provided: the confluent
//! hypergeometric series `₁F₁(k/2; d/2; κ)` (exact reference), a first-order
//! saddle-point approximation, and a Monte-Carlo estimator.

use crate::error::{Error, Result};
use crate::gating::ExpertBank;
use crate::linalg::{sphere_uniform, RngState};
use crate::manifold::{affinity, Frame};
use crate::scalar::Real;

/// Largest concentration accepted by the series and saddle-point routines.
pub const KAPPA_MAX: f64 = 200.0;

const SADDLE_MAX_ITERS: usize = 200;

/// Scalar concentration on a rank-`k` subspace of `R^d`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZQuery<T> {
    pub kappa: T,
    pub d: usize,
    pub k: usize,
}

impl<T: Real> ZQuery<T> {
    pub fn new(kappa: T, d: usize, k: usize) -> Result<Self> {
        let q = Self { kappa, d, k };
        q.validate()?;
        Ok(q)
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.d {
            return Err(Error::dims(format!("1 <= k <= d = {}", self.d), self.k));
        }
        if !self.kappa.is_finite() || self.kappa < T::zero() {
            return Err(Error::InvalidArgument(format!("kappa must be finite and >= 0, got {}", self.kappa)));
        }
        Ok(())
    }

    fn validate_regime(&self) -> Result<()> {
        self.validate()?;
        if self.kappa > T::lit(KAPPA_MAX) {
            return Err(Error::OutOfDomain(format!("kappa {} above series regime {KAPPA_MAX}", self.kappa)));
        }
        Ok(())
    }
}

/// Sum of `Σ_m [(a)_m/(b)_m] κ^m/m!` until the term drops below
/// `1e-15 × partial sum`.
fn hyp1f1<T: Real>(a: T, b: T, kappa: T) -> Result<T> {
    let tol = T::lit(1e-15).max(T::epsilon());
    let mut term = T::one();
    let mut sum = T::one();
    let mut m = T::zero();
    for _ in 0..1_000_000 {
        term = term * (a + m) / (b + m) * kappa / (m + T::one());
        sum += term;
        m += T::one();
        if !sum.is_finite() {
            return Err(Error::Numerical("hypergeometric series overflowed".into()));
        }
        if term <= tol * sum {
            return Ok(sum);
        }
    }
    Err(Error::ConvergenceFailure { iterations: 1_000_000 })
}

/// Exact reference `Z(κ) = ₁F₁(k/2; d/2; κ)`.
pub fn z_series<T: Real>(q: &ZQuery<T>) -> Result<T> {
    q.validate_regime()?;
    if q.kappa.is_zero() {
        return Ok(T::one());
    }
    let half = T::lit(0.5);
    hyp1f1(
        half * T::from_usize(q.k).unwrap(),
        half * T::from_usize(q.d).unwrap(),
        q.kappa,
    )
}

/// `d log Z / dκ`, the exponentially tilted mean affinity
/// `(k/d)·₁F₁(k/2+1; d/2+1; κ) / ₁F₁(k/2; d/2; κ)`.
pub fn z_series_dlog<T: Real>(q: &ZQuery<T>) -> Result<T> {
    q.validate_regime()?;
    let half = T::lit(0.5);
    let (k, d) = (T::from_usize(q.k).unwrap(), T::from_usize(q.d).unwrap());
    let num = if q.kappa.is_zero() {
        T::one()
    } else {
        hyp1f1(half * k + T::one(), half * d + T::one(), q.kappa)?
    };
    Ok(k / d * num / z_series(q)?)
}

/// Saddle point of the cumulant generating function of
/// `R = Σ_i y_i²`, `y ~ N(0, diag(1/(2λ_i)))`, evaluated at `R = 1`.
///
/// With the spectrum shifted so the free parameter is `u = λ_min − t`
/// (`u > κ`), the saddle equation reads
/// `k / (2(u − κ)) + (d − k) / (2u) = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SaddlePoint<T> {
    pub u: T,
    pub iterations: usize,
}

fn saddle_residual<T: Real>(u: T, kappa: T, k: T, rest: T) -> T {
    let two = T::lit(2.0);
    let mut r = k / (two * (u - kappa)) - T::one();
    if !rest.is_zero() {
        r += rest / (two * u);
    }
    r
}

fn saddle_slope<T: Real>(u: T, kappa: T, k: T, rest: T) -> T {
    let two = T::lit(2.0);
    let s = u - kappa;
    let mut r = -k / (two * s * s);
    if !rest.is_zero() {
        r -= rest / (two * u * u);
    }
    r
}

/// Solves the saddle equation: bisection on `(κ, κ + d/2]`, then Newton
/// polishing to a residual below `1e-12`.
pub fn solve_saddle<T: Real>(q: &ZQuery<T>) -> Result<SaddlePoint<T>> {
    q.validate_regime()?;
    let k = T::from_usize(q.k).unwrap();
    let rest = T::from_usize(q.d - q.k).unwrap();
    let kappa = q.kappa;
    let half_d = T::from_usize(q.d).unwrap() * T::lit(0.5);
    let tol = T::lit(1e-12).max(T::epsilon() * T::lit(16.0));

    let (mut lo, mut hi) = (kappa, kappa + half_d);
    if saddle_residual(hi, kappa, k, rest).abs() <= tol {
        return Ok(SaddlePoint { u: hi, iterations: 0 });
    }
    let mut iterations = 0;
    // Residual is +∞ at u → κ⁺, ≤ 0 at κ + d/2, and strictly decreasing.
    while iterations < 60 {
        iterations += 1;
        let mid = lo + (hi - lo) * T::lit(0.5);
        if saddle_residual(mid, kappa, k, rest) > T::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= T::epsilon() * hi {
            break;
        }
    }
    let mut u = lo + (hi - lo) * T::lit(0.5);
    while iterations < SADDLE_MAX_ITERS {
        let r = saddle_residual(u, kappa, k, rest);
        if r.abs() <= tol {
            return Ok(SaddlePoint { u, iterations });
        }
        iterations += 1;
        let next = u - r / saddle_slope(u, kappa, k, rest);
        // Newton may leave the bracket; fall back to the midpoint then.
        u = if next > lo && next < hi { next } else { lo + (hi - lo) * T::lit(0.5) };
        if saddle_residual(u, kappa, k, rest) > T::zero() {
            lo = u;
        } else {
            hi = u;
        }
    }
    Err(Error::ConvergenceFailure { iterations })
}

/// `log` of the unnormalized first-order saddle-point density term
/// `(2π K''(t̂))^{-1/2} exp(K(t̂) − t̂)` times `Π λ_i^{-1/2} e^{shift}`,
/// which reduces to a function of `u` alone.
fn log_saddle_term<T: Real>(q: &ZQuery<T>, u: T) -> T {
    let two = T::lit(2.0);
    let half = T::lit(0.5);
    let k = T::from_usize(q.k).unwrap();
    let rest = T::from_usize(q.d - q.k).unwrap();
    let s = u - q.kappa;
    let mut k2 = k / (two * s * s);
    let mut log_term = u - half * k * s.ln();
    if !rest.is_zero() {
        k2 += rest / (two * u * u);
        log_term -= half * rest * u.ln();
    }
    log_term - half * (two * T::PI() * k2).ln()
}

/// First-order saddle-point approximation of `Z(κ)`.
///
/// The raw saddle-point value carries the Stirling error of `Γ(d/2)`; it is
/// divided by its own value at `κ = 0`, which makes `Z(0) = 1` exact.
pub fn z_saddlepoint<T: Real>(q: &ZQuery<T>) -> Result<T> {
    let sp = solve_saddle(q)?;
    let at_zero = ZQuery { kappa: T::zero(), ..*q };
    let half_d = T::from_usize(q.d).unwrap() * T::lit(0.5);
    Ok((log_saddle_term(q, sp.u) - log_saddle_term(&at_zero, half_d)).exp())
}

/// Monte-Carlo estimate with the coordinate frame `span(e_1, …, e_k)`, where
/// the affinity of a sphere point is the squared mass of its first `k`
/// coordinates. Returns `(estimate, standard error)`.
pub fn z_montecarlo<T: Real>(q: &ZQuery<T>, samples: usize, rng: &mut RngState) -> Result<(T, T)> {
    q.validate()?;
    let (d, k) = (q.d, q.k);
    let mut g = vec![0.0f64; d];
    welford(q.kappa.as_f64(), samples, || loop {
        g.iter_mut().for_each(|v| *v = rng.normal());
        let head: f64 = g[..k].iter().map(|v| v * v).sum();
        let total = head + g[k..].iter().map(|v| v * v).sum::<f64>();
        if total > 1e-300 {
            return Ok(head / total);
        }
    })
}

/// Monte-Carlo estimate of `E[exp(κ‖Uᵀx‖²)]` over sphere-uniform `x` for a
/// given frame `U`. The result does not depend on the frame.
pub fn z_montecarlo_with_frame<T: Real>(
    kappa: T,
    frame: &Frame<T>,
    samples: usize,
    rng: &mut RngState,
) -> Result<(T, T)> {
    ZQuery::new(kappa, frame.d(), frame.k())?;
    welford(kappa.as_f64(), samples, || {
        let x: Vec<T> = sphere_uniform(frame.d(), rng);
        Ok(affinity(frame, &x)?.as_f64())
    })
}

/// Mean and standard error of `exp(κ·a)` over `samples` draws of `a`,
/// accumulated with Welford's update in f64.
fn welford<T: Real>(kappa: f64, samples: usize, mut draw: impl FnMut() -> Result<f64>) -> Result<(T, T)> {
    if samples < 1000 {
        return Err(Error::InvalidArgument(format!("need at least 1000 samples, got {samples}")));
    }
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    for i in 0..samples {
        let v = (kappa * draw()?).exp();
        let delta = v - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (v - mean);
    }
    let n = samples as f64;
    let std = (m2 / (n - 1.0)).max(0.0).sqrt();
    Ok((T::lit(mean), T::lit(std / n.sqrt())))
}

/// Posterior over experts under Bingham likelihoods `exp(κ_e a_e)/Z(κ_e)` and
/// the capacity-aware prior `p(e) ∝ Z(κ_e)`, evaluated literally with
/// series normalizers.
pub fn capacity_prior_posterior<T: Real>(bank: &ExpertBank<T>, x: &[T]) -> Result<Vec<T>> {
    let tilde = bank.concentrated(x)?;
    let max = tilde.iter().copied().fold(T::neg_infinity(), T::max);
    let mut joint = Vec::with_capacity(bank.n());
    for (&t, &kappa) in tilde.iter().zip(bank.kappas()) {
        let z = z_series(&ZQuery::new(kappa, bank.d(), bank.k())?)?;
        let likelihood = (t - max).exp() / z;
        let prior = z;
        joint.push(likelihood * prior);
    }
    let total: T = joint.iter().copied().sum();
    Ok(joint.into_iter().map(|j| j / total).collect())
}

/// One row of a normalizer validation table.
#[derive(Clone, Debug, PartialEq)]
pub struct ZComparison {
    pub kappa: f64,
    pub d: usize,
    pub k: usize,
    pub series: f64,
    pub saddle: f64,
    pub mc: Option<(f64, f64)>,
}

impl ZComparison {
    pub fn saddle_rel_err(&self) -> f64 {
        (self.saddle - self.series).abs() / self.series
    }

    /// `|mc − series| / stderr`; zero when both agree exactly.
    pub fn mc_z_score(&self) -> Option<f64> {
        self.mc.map(|(est, se)| {
            let diff = (est - self.series).abs();
            if diff == 0.0 {
                0.0
            } else {
                diff / se
            }
        })
    }
}

/// Evaluates series, saddle point, and (optionally) Monte Carlo at one point.
pub fn compare(kappa: f64, d: usize, k: usize, mc_samples: Option<(usize, &mut RngState)>) -> Result<ZComparison> {
    let q = ZQuery::new(kappa, d, k)?;
    let mc = match mc_samples {
        Some((n, rng)) => Some(z_montecarlo(&q, n, rng)?),
        None => None,
    };
    Ok(ZComparison {
        kappa,
        d,
        k,
        series: z_series(&q)?,
        saddle: z_saddlepoint(&q)?,
        mc,
    })
}
