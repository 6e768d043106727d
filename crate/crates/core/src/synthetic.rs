//! Controlled routing benchmark: Gaussian mixtures concentrated on known
//! subspaces with tunable pairwise overlap, evaluation metrics, and baseline
//! routers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{argmax, route_with, softmax, Amortizer, ExpertBank};
use crate::linalg::{Matrix, RngState};
use crate::manifold::{affinity, haar_frame, overlap, Frame};
use crate::training::{Adam, TrainConfig};

/// Calibration tolerance on the mean normalized pairwise overlap.
pub const CALIBRATION_TOL: f64 = 0.02;
const MAX_BISECTION: usize = 60;

/// Serializable description of a task; frames are regenerated from the seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(rename = "N")]
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub rho_star: f64,
    pub sigma2: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn easy(seed: u64) -> Self {
        Self { n: 8, d: 128, k: 8, rho_star: 0.1, sigma2: 0.1, seed }
    }

    pub fn hard(seed: u64) -> Self {
        Self { n: 8, d: 128, k: 8, rho_star: 0.4, sigma2: 0.5, seed }
    }

    pub fn build(&self) -> Result<SyntheticTask> {
        make_task(self.n, self.d, self.k, self.rho_star, self.sigma2, self.seed)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    pub truth: Vec<Frame<f64>>,
    /// Mixture weights, uniform.
    pub weights: Vec<f64>,
    /// Blend parameter found by calibration.
    pub blend: f64,
    /// Mean of `‖U_iᵀU_j‖²/k` over unordered pairs.
    pub measured_overlap: f64,
}

impl SyntheticTask {
    pub fn n(&self) -> usize {
        self.spec.n
    }

    pub fn d(&self) -> usize {
        self.spec.d
    }

    pub fn k(&self) -> usize {
        self.spec.k
    }
}

/// Mean normalized pairwise overlap of a set of frames.
pub fn mean_pairwise_overlap(frames: &[Frame<f64>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..frames.len() {
        for j in i + 1..frames.len() {
            total += overlap(&frames[i], &frames[j])? / frames[i].k() as f64;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Largest pairwise overlap `max ‖U_iᵀU_j‖²`.
pub fn max_pairwise_overlap(frames: &[Frame<f64>]) -> Result<f64> {
    let mut best = 0.0f64;
    for i in 0..frames.len() {
        for j in i + 1..frames.len() {
            best = best.max(overlap(&frames[i], &frames[j])?);
        }
    }
    Ok(best)
}

fn blended(base: &[Frame<f64>], shared: &Frame<f64>, t: f64) -> Result<Vec<Frame<f64>>> {
    let (a, b) = ((1.0 - t).sqrt(), t.sqrt());
    base.iter()
        .map(|f| {
            let mut m = f.basis().scale(a);
            m.axpy(b, shared.basis());
            Frame::orthonormalize(&m)
        })
        .collect()
}

pub fn make_task(n: usize, d: usize, k: usize, rho_star: f64, sigma2: f64, seed: u64) -> Result<SyntheticTask> {
    if n < 2 || k == 0 || n * k > d {
        return Err(Error::InvalidArgument(format!("need N >= 2 and N*k <= d, got N={n}, k={k}, d={d}")));
    }
    if !(0.0..1.0).contains(&rho_star) {
        return Err(Error::InvalidArgument(format!("rho_star must lie in [0, 1), got {rho_star}")));
    }
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma2 must be >= 0, got {sigma2}")));
    }
    let spec = TaskSpec { n, d, k, rho_star, sigma2, seed };
    let base: Vec<Frame<f64>> = (0..n).map(|e| Frame::coordinate_block(d, k, e * k)).collect::<Result<_>>()?;
    let weights = vec![1.0 / n as f64; n];
    if rho_star == 0.0 {
        return Ok(SyntheticTask { spec, truth: base, weights, blend: 0.0, measured_overlap: 0.0 });
    }

    let mut rng = RngState::new(seed).substream("task-shared-frame");
    let shared = haar_frame(d, k, &mut rng)?;
    let measure = |t: f64| -> Result<(Vec<Frame<f64>>, f64)> {
        let frames = blended(&base, &shared, t)?;
        let m = mean_pairwise_overlap(&frames)?;
        Ok((frames, m))
    };

    let (mut lo, mut hi) = (0.0, 1.0 - 1e-9);
    let (mut m_lo, mut m_hi) = (0.0, measure(hi)?.1);
    let mut best = (f64::INFINITY, 0.0, Vec::new(), 0.0);
    for _ in 0..MAX_BISECTION {
        let mid = 0.5 * (lo + hi);
        let (frames, m) = measure(mid)?;
        if m < m_lo - 1e-12 || m > m_hi + 1e-12 {
            return Err(Error::Numerical(format!("overlap not monotone in blend at t = {mid}")));
        }
        if (m - rho_star).abs() < best.0 {
            best = ((m - rho_star).abs(), mid, frames, m);
        }
        if best.0 < 1e-6 {
            break;
        }
        if m < rho_star {
            lo = mid;
            m_lo = m;
        } else {
            hi = mid;
            m_hi = m;
        }
    }
    let (err, blend, truth, measured) = best;
    if err > CALIBRATION_TOL {
        return Err(Error::CalibrationFailure { target: rho_star, reached: measured });
    }
    Ok(SyntheticTask { spec, truth, weights, blend, measured_overlap: measured })
}

/// Tokens with their generating component and a stable per-sample index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub xs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub indices: Vec<u64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

/// `x = U w + σ (I − UUᵀ) v` with `w ~ N(0, I_k)`, `v ~ N(0, I_d)`.
fn draw_from(frame: &Frame<f64>, sigma: f64, rng: &mut RngState) -> Vec<f64> {
    let u = frame.basis();
    let w: Vec<f64> = rng.normal_vec(frame.k());
    let mut x = u.matvec(&w);
    if sigma > 0.0 {
        let v: Vec<f64> = rng.normal_vec(frame.d());
        let coeff = u.t_matvec(&v);
        let proj = u.matvec(&coeff);
        for ((xi, vi), pi) in x.iter_mut().zip(&v).zip(&proj) {
            *xi += sigma * (vi - pi);
        }
    }
    x
}

pub fn sample_batch(task: &SyntheticTask, n: usize, rng: &mut RngState) -> Batch {
    let sigma = task.spec.sigma2.sqrt();
    let start = rng.word_pos() as u64;
    let mut batch = Batch::default();
    for i in 0..n {
        let z = rng.index(task.n());
        batch.xs.push(draw_from(&task.truth[z], sigma, rng));
        batch.labels.push(z);
        batch.indices.push(start.wrapping_add(i as u64));
    }
    batch
}

/// Same distribution with exactly `per_component` tokens per component, in
/// label-major order.
pub fn sample_stratified(task: &SyntheticTask, per_component: usize, rng: &mut RngState) -> Batch {
    let sigma = task.spec.sigma2.sqrt();
    let mut batch = Batch::default();
    for z in 0..task.n() {
        for _ in 0..per_component {
            batch.indices.push(batch.xs.len() as u64);
            batch.xs.push(draw_from(&task.truth[z], sigma, rng));
            batch.labels.push(z);
        }
    }
    batch
}

/// Anything producing a routing distribution over `n()` experts.
pub trait Router: Sync {
    fn n(&self) -> usize;
    /// Routing probabilities for token `x`; `index` is the token's stable key.
    fn probs(&self, x: &[f64], index: u64) -> Result<Vec<f64>>;
}

/// Concentration-gated router over a bank, optionally amortized.
#[derive(Clone, Debug)]
pub struct GrmoeRouter {
    pub bank: ExpertBank<f64>,
    pub amortizer: Option<Amortizer<f64>>,
    pub alpha: f64,
}

impl Router for GrmoeRouter {
    fn n(&self) -> usize {
        self.bank.n()
    }

    fn probs(&self, x: &[f64], _index: u64) -> Result<Vec<f64>> {
        Ok(route_with(&self.bank, self.amortizer.as_ref(), x, self.alpha)?.probs)
    }
}

/// Router defined by a closure.
pub struct FnRouter<F> {
    pub n: usize,
    pub f: F,
}

impl<F: Fn(&[f64], u64) -> Vec<f64> + Sync> Router for FnRouter<F> {
    fn n(&self) -> usize {
        self.n
    }

    fn probs(&self, x: &[f64], index: u64) -> Result<Vec<f64>> {
        Ok((self.f)(x, index))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub assignment_accuracy: f64,
    pub load_cv: f64,
    pub mean_entropy: f64,
    pub collapsed: bool,
    /// Mean routing mass per expert.
    pub loads: Vec<f64>,
    /// Fraction of tokens whose argmax is each expert.
    pub hard_shares: Vec<f64>,
}

/// Population coefficient of variation.
pub fn coefficient_of_variation(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    if mean == 0.0 {
        return f64::INFINITY;
    }
    var.sqrt() / mean
}

pub const COLLAPSE_SHARE: f64 = 0.01;

pub fn evaluate_batch(router: &dyn Router, batch: &Batch) -> Result<EvalMetrics> {
    let n = router.n();
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation batch".into()));
    }
    let mut loads = vec![0.0; n];
    let mut hard = vec![0usize; n];
    let mut correct = 0usize;
    let mut ent = 0.0;
    for ((x, &z), &idx) in batch.xs.iter().zip(&batch.labels).zip(&batch.indices) {
        let p = router.probs(x, idx)?;
        if p.len() != n {
            return Err(Error::dims(format!("{n} routing probabilities"), p.len()));
        }
        let top = argmax(&p);
        hard[top] += 1;
        if top == z {
            correct += 1;
        }
        for (l, &pe) in loads.iter_mut().zip(&p) {
            *l += pe;
        }
        ent -= p.iter().filter(|&&q| q > 0.0).map(|&q| q * q.ln()).sum::<f64>();
    }
    let m = batch.len() as f64;
    loads.iter_mut().for_each(|l| *l /= m);
    let hard_shares: Vec<f64> = hard.iter().map(|&c| c as f64 / m).collect();
    Ok(EvalMetrics {
        assignment_accuracy: correct as f64 / m,
        load_cv: coefficient_of_variation(&loads),
        mean_entropy: ent / m,
        collapsed: hard_shares.iter().any(|&s| s < COLLAPSE_SHARE),
        loads,
        hard_shares,
    })
}

/// Draws `n_eval` fresh tokens and scores the router on them.
pub fn evaluate(router: &dyn Router, task: &SyntheticTask, n_eval: usize, rng: &mut RngState) -> Result<EvalMetrics> {
    if n_eval < 100 * task.n() {
        return Err(Error::InvalidArgument(format!(
            "n_eval must be at least 100*N = {}, got {n_eval}",
            100 * task.n()
        )));
    }
    evaluate_batch(router, &sample_batch(task, n_eval, rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    SoftmaxTop1,
    SoftmaxDense,
    VmfGate,
    Hash,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::SoftmaxTop1 => "softmax_top1",
            Self::SoftmaxDense => "softmax_dense",
            Self::VmfGate => "vmf_gate",
            Self::Hash => "hash",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax_top1" => Ok(Self::SoftmaxTop1),
            "softmax_dense" => Ok(Self::SoftmaxDense),
            "vmf_gate" => Ok(Self::VmfGate),
            "hash" => Ok(Self::Hash),
            other => Err(Error::InvalidArgument(format!("unsupported baseline router '{other}'"))),
        }
    }
}

/// Linear-logit baseline router; `w` is `N × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineRouter {
    pub kind: BaselineKind,
    pub w: Matrix<f64>,
    /// Temperature of the vMF gate; unused otherwise.
    pub tau: f64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

fn normalize_rows(w: &mut Matrix<f64>) {
    let cols = w.cols();
    for chunk in w.as_mut_slice().chunks_mut(cols) {
        let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            chunk.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

impl BaselineRouter {
    pub fn init(kind: BaselineKind, n: usize, d: usize, rng: &mut RngState) -> Self {
        let mut w = crate::linalg::gaussian_matrix(n, d, rng).scale(1.0 / (d as f64).sqrt());
        if kind == BaselineKind::VmfGate {
            normalize_rows(&mut w);
        }
        Self { kind, w, tau: 1.0 }
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let l = self.w.matvec(x);
        match self.kind {
            BaselineKind::VmfGate => l.into_iter().map(|v| self.tau * v).collect(),
            _ => l,
        }
    }

    /// Distribution used for training (dense, pre-dispatch).
    pub fn train_probs(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }
}

impl Router for BaselineRouter {
    fn n(&self) -> usize {
        self.w.rows()
    }

    fn probs(&self, x: &[f64], index: u64) -> Result<Vec<f64>> {
        if self.kind != BaselineKind::Hash && x.len() != self.w.cols() {
            return Err(Error::dims(format!("token of length {}", self.w.cols()), x.len()));
        }
        let n = self.n();
        Ok(match self.kind {
            BaselineKind::Hash => one_hot(n, (splitmix(index) % n as u64) as usize),
            BaselineKind::SoftmaxTop1 => one_hot(n, argmax(&self.logits(x))),
            BaselineKind::SoftmaxDense | BaselineKind::VmfGate => self.train_probs(x),
        })
    }
}

/// Trains a baseline router on routing cross-entropy with plain Adam, using
/// the step budget, batch size and gate learning rate of `cfg`.
pub fn train_baseline(kind: BaselineKind, task: &SyntheticTask, cfg: &TrainConfig) -> Result<BaselineRouter> {
    cfg.validate()?;
    let root = RngState::new(cfg.seed);
    let mut router = BaselineRouter::init(kind, task.n(), task.d(), &mut root.substream("baseline-init"));
    if kind == BaselineKind::Hash {
        return Ok(router);
    }
    let mut batches = root.substream("batches");
    let mut adam_w = Adam::new(router.w.as_slice().len(), cfg);
    let mut adam_tau = Adam::new(1, cfg);
    let mut log_tau = [router.tau.ln()];
    for step in 1..=cfg.steps {
        let batch = sample_batch(task, cfg.batch_size, &mut batches);
        let mut gw = Matrix::zeros(task.n(), task.d());
        let mut gtau = 0.0;
        let mut loss = 0.0;
        let inv_b = 1.0 / batch.len() as f64;
        for (x, &z) in batch.xs.iter().zip(&batch.labels) {
            let raw = router.w.matvec(x);
            let p = router.train_probs(x);
            loss -= p[z].max(f64::MIN_POSITIVE).ln() * inv_b;
            for (e, &pe) in p.iter().enumerate() {
                let delta = (pe - f64::from(u8::from(e == z))) * inv_b;
                let scale = if kind == BaselineKind::VmfGate {
                    gtau += delta * raw[e] * router.tau;
                    delta * router.tau
                } else {
                    delta
                };
                let cols = task.d();
                let row = &mut gw.as_mut_slice()[e * cols..(e + 1) * cols];
                for (g, &xi) in row.iter_mut().zip(x) {
                    *g += scale * xi;
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        adam_w.step(router.w.as_mut_slice(), gw.as_slice(), cfg.lr_gate);
        if kind == BaselineKind::VmfGate {
            normalize_rows(&mut router.w);
            adam_tau.step(&mut log_tau, &[gtau], cfg.lr_gate);
            router.tau = log_tau[0].exp();
        }
    }
    Ok(router)
}

/// Per-sample separation of a constructed mixture: `a_{z*} ≥ γ` and
/// `a_{j≠z*} ≤ ρ·γ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Separation {
    pub gamma: f64,
    pub rho: f64,
}

/// Measured `(γ, ρ)`: `γ` is the smallest own-subspace affinity and `ρ` the
/// largest cross affinity divided by `γ`.
pub fn measure_separation(frames: &[Frame<f64>], batch: &Batch) -> Result<Separation> {
    let mut gamma = f64::INFINITY;
    let mut cross = 0.0f64;
    for (x, &z) in batch.xs.iter().zip(&batch.labels) {
        for (e, f) in frames.iter().enumerate() {
            let a = affinity(f, x)?;
            if e == z {
                gamma = gamma.min(a);
            } else {
                cross = cross.max(a);
            }
        }
    }
    Ok(Separation { gamma, rho: cross / gamma })
}

/// Stratified draw from `task` keeping only tokens with `a_{z*} ≥ γ` and
/// `a_{j≠z*} ≤ ρ·γ`.
pub fn sample_separated(
    task: &SyntheticTask,
    per_component: usize,
    target: Separation,
    rng: &mut RngState,
) -> Result<Batch> {
    let sigma = task.spec.sigma2.sqrt();
    let cap = 1000 * per_component.max(1);
    let mut batch = Batch::default();
    for z in 0..task.n() {
        let mut kept = 0;
        let mut tries = 0;
        while kept < per_component {
            tries += 1;
            if tries > cap {
                return Err(Error::InvalidArgument(format!(
                    "acceptance rate too low for gamma={}, rho={}",
                    target.gamma, target.rho
                )));
            }
            let x = draw_from(&task.truth[z], sigma, rng);
            let ok = task.truth.iter().enumerate().all(|(e, f)| {
                let a = crate::manifold::affinity_unchecked(f.basis(), &x);
                if e == z {
                    a >= target.gamma
                } else {
                    a <= target.rho * target.gamma
                }
            });
            if ok {
                batch.indices.push(batch.xs.len() as u64);
                batch.xs.push(x);
                batch.labels.push(z);
                kept += 1;
            }
        }
    }
    Ok(batch)
}

/// Empirical CV of the fixed-frame router on a separated mixture next to
/// the load-balance bound computed from the measured separation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LoadBoundCheck {
    pub loads: Vec<f64>,
    pub cv: f64,
    pub gamma: f64,
    pub rho: f64,
    pub bound: f64,
}

pub fn load_bound_check(
    task: &SyntheticTask,
    kappa: f64,
    alpha: f64,
    per_component: usize,
    target: Separation,
    rng: &mut RngState,
) -> Result<LoadBoundCheck> {
    let batch = sample_separated(task, per_component, target, rng)?;
    let sep = measure_separation(&task.truth, &batch)?;
    let bank = ExpertBank::routing_only(task.truth.clone(), vec![kappa; task.n()])?;
    let router = GrmoeRouter { bank, amortizer: None, alpha };
    let m = evaluate_batch(&router, &batch)?;
    let bound = crate::bounds::cv_bound(task.n(), alpha, sep.gamma, sep.rho, kappa, kappa)?;
    Ok(LoadBoundCheck { loads: m.loads, cv: m.load_cv, gamma: sep.gamma, rho: sep.rho, bound })
}

/// Affinity of `x` to every truth frame.
pub fn affinity_profile(task: &SyntheticTask, x: &[f64]) -> Vec<f64> {
    task.truth.iter().map(|f| crate::manifold::affinity_unchecked(f.basis(), x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;

    #[test]
    fn zero_overlap_is_exact_blocks() {
        let t = make_task(8, 128, 8, 0.0, 0.1, 3).unwrap();
        assert_eq!(t.blend, 0.0);
        assert_eq!(max_pairwise_overlap(&t.truth).unwrap(), 0.0);
    }

    #[test]
    fn calibration_hits_targets() {
        for (rho, seed) in [(0.1, 0), (0.4, 0), (0.1, 7), (0.4, 11)] {
            let t = make_task(8, 128, 8, rho, 0.1, seed).unwrap();
            assert!((t.measured_overlap - rho).abs() <= CALIBRATION_TOL, "{rho}: {}", t.measured_overlap);
            assert!((mean_pairwise_overlap(&t.truth).unwrap() - t.measured_overlap).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_tasks_rejected() {
        assert!(make_task(8, 32, 8, 0.1, 0.1, 0).is_err());
        assert!(make_task(8, 128, 8, 1.0, 0.1, 0).is_err());
        assert!(make_task(1, 128, 8, 0.1, 0.1, 0).is_err());
    }

    #[test]
    fn noiseless_tokens_lie_in_subspace() {
        let t = make_task(4, 32, 4, 0.2, 0.0, 1).unwrap();
        let b = sample_batch(&t, 50, &mut RngState::new(2));
        for (x, &z) in b.xs.iter().zip(&b.labels) {
            let a = affinity(&t.truth[z], x).unwrap();
            let nx = dot(x, x);
            assert!((a - nx).abs() <= 1e-10 * nx.max(1.0));
        }
    }

    #[test]
    fn conditional_second_moments() {
        let t = make_task(4, 32, 4, 0.3, 0.2, 5).unwrap();
        let mut rng = RngState::new(9);
        let n = 100_000;
        let b = sample_batch(&t, n, &mut rng);
        let mut own = 0.0;
        let mut other = [0.0; 2];
        let mut counts = [0usize; 2];
        let mut trace = 0.0;
        for (x, &z) in b.xs.iter().zip(&b.labels) {
            let prof = affinity_profile(&t, x);
            own += prof[z];
            trace += dot(x, x);
            if z == 0 {
                other[0] += prof[1];
                counts[0] += 1;
            } else if z == 1 {
                other[1] += prof[0];
                counts[1] += 1;
            }
        }
        let (k, d, s2) = (4.0, 32.0, 0.2);
        assert!((own / n as f64 - k).abs() < 0.1 * k);
        let expected_trace = k + s2 * (d - k);
        assert!((trace / n as f64 - expected_trace).abs() < 0.05 * expected_trace);
        let ov = overlap(&t.truth[0], &t.truth[1]).unwrap();
        let expected = ov + s2 * (k - ov);
        let observed = (other[0] + other[1]) / (counts[0] + counts[1]) as f64;
        assert!((observed - expected).abs() < 0.1 * expected, "{observed} vs {expected}");
    }

    #[test]
    fn coordinate_variances() {
        let t = make_task(4, 32, 4, 0.0, 0.3, 0).unwrap();
        let b = sample_batch(&t, 100_000, &mut RngState::new(1));
        let (mut inside, mut outside, mut ni) = (0.0, 0.0, 0usize);
        for (x, &z) in b.xs.iter().zip(&b.labels) {
            if z == 0 {
                inside += x[0] * x[0];
                outside += x[31] * x[31];
                ni += 1;
            }
        }
        assert!((inside / ni as f64 - 1.0).abs() < 0.1);
        assert!((outside / ni as f64 - 0.3).abs() < 0.03);
    }

    #[test]
    fn reference_routers() {
        let t = make_task(4, 16, 4, 0.0, 0.1, 0).unwrap();
        let b = sample_batch(&t, 4000, &mut RngState::new(3));
        let labels = b.labels.clone();
        let oracle = FnRouter { n: 4, f: |_: &[f64], i: u64| one_hot(4, labels[i as usize]) };
        let batch = Batch { indices: (0..4000).collect(), ..b.clone() };
        let m = evaluate_batch(&oracle, &batch).unwrap();
        assert_eq!(m.assignment_accuracy, 1.0);
        assert!(!m.collapsed);
        assert!(m.load_cv < 0.1);

        let uniform = FnRouter { n: 4, f: |_: &[f64], _| vec![0.25; 4] };
        let m = evaluate_batch(&uniform, &batch).unwrap();
        assert!((m.mean_entropy - 4f64.ln()).abs() < 1e-12);
        assert!(m.load_cv < 1e-12);

        let constant = FnRouter { n: 4, f: |_: &[f64], _| one_hot(4, 0) };
        let m = evaluate_batch(&constant, &batch).unwrap();
        assert!(m.collapsed);
        assert!((m.load_cv - 3f64.sqrt()).abs() < 1e-12);
        let loads: f64 = m.loads.iter().sum();
        assert!((loads - 1.0).abs() < 1e-12);
    }

    #[test]
    fn evaluation_needs_enough_tokens() {
        let t = make_task(4, 16, 4, 0.0, 0.1, 0).unwrap();
        let r = FnRouter { n: 4, f: |_: &[f64], _| vec![0.25; 4] };
        assert!(evaluate(&r, &t, 399, &mut RngState::new(0)).is_err());
        let a = evaluate(&r, &t, 400, &mut RngState::new(0)).unwrap();
        let b = evaluate(&r, &t, 400, &mut RngState::new(0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hash_router_is_balanced_and_chance_level() {
        let t = make_task(8, 128, 8, 0.1, 0.1, 0).unwrap();
        let r = BaselineRouter::init(BaselineKind::Hash, 8, 128, &mut RngState::new(0));
        let m = evaluate(&r, &t, 20_000, &mut RngState::new(4)).unwrap();
        assert!(m.load_cv < 0.06, "{}", m.load_cv);
        assert!((m.assignment_accuracy - 0.125).abs() < 0.02);
    }

    #[test]
    fn baseline_kinds_parse() {
        for k in [BaselineKind::SoftmaxTop1, BaselineKind::SoftmaxDense, BaselineKind::VmfGate, BaselineKind::Hash] {
            assert_eq!(k.name().parse::<BaselineKind>().unwrap(), k);
        }
        assert!("switch".parse::<BaselineKind>().is_err());
    }

    #[test]
    fn vmf_rows_stay_unit() {
        let t = make_task(4, 16, 4, 0.1, 0.1, 0).unwrap();
        let cfg = TrainConfig { steps: 20, batch_size: 32, ..TrainConfig::default() };
        let r = train_baseline(BaselineKind::VmfGate, &t, &cfg).unwrap();
        for i in 0..4 {
            let n: f64 = r.w.row(i).iter().map(|v| v * v).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-10);
        }
        assert!(r.tau > 0.0);
    }

    #[test]
    fn task_spec_json() {
        let s = TaskSpec::hard(4);
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"N\":8"));
        let back: TaskSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn separated_mixture_respects_targets() {
        let t = make_task(4, 32, 4, 0.0, 0.05, 2).unwrap();
        let target = Separation { gamma: 2.0, rho: 0.25 };
        let b = sample_separated(&t, 200, target, &mut RngState::new(1)).unwrap();
        let s = measure_separation(&t.truth, &b).unwrap();
        assert!(s.gamma >= 2.0);
        assert!(s.rho * s.gamma <= 0.5 + 1e-12);
    }
}
