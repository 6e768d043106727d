//! Routing cross-entropy plus the subspace-overlap hinge, analytic
//! gradients, and a Riemannian Adam loop over frames, concentrations and the
//! amortizer.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{softmax, Amortizer, AmortizerRecord, ExpertBank, AMORTIZER_HIDDEN};
use crate::linalg::{Matrix, RngState};
use crate::manifold::{haar_frame, retract, tangent_project, Frame, FrameRecord};
use crate::synthetic::{
    evaluate_batch, max_pairwise_overlap, sample_batch, Batch, EvalMetrics, GrmoeRouter, SyntheticTask, TaskSpec,
};

/// Sparsity dial used throughout training.
pub const ALPHA_TRAIN: f64 = 1.0;

/// Which unordered expert pairs enter the overlap regularizer each step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSampling {
    Full,
    /// `M` pairs per step.
    Count(usize),
    /// `M = c·N` pairs per step.
    PerExpert(usize),
}

impl PairSampling {
    /// Number of sampled pairs for `n` experts; `None` means all pairs.
    pub fn resolve(self, n: usize) -> Option<usize> {
        let total = n * (n - 1) / 2;
        let m = match self {
            Self::Full => return None,
            Self::Count(m) => m,
            Self::PerExpert(c) => c * n,
        };
        (m < total).then_some(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    /// Overlap threshold as a fraction of the routing rank.
    pub rho0: f64,
    pub pairs: PairSampling,
    pub lr_frames: f64,
    pub lr_kappa: f64,
    pub lr_amortizer: f64,
    /// Learning rate of baseline gates.
    pub lr_gate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub init_kappa: f64,
    pub amortized: bool,
    /// Routing rank; the task rank when absent.
    pub rank: Option<usize>,
    pub eval_interval: usize,
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.01,
            rho0: 0.3,
            pairs: PairSampling::PerExpert(4),
            lr_frames: 1e-2,
            lr_kappa: 1e-2,
            lr_amortizer: 1e-2,
            lr_gate: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            steps: 2000,
            batch_size: 256,
            seed: 0,
            init_kappa: 1.0,
            amortized: false,
            rank: None,
            eval_interval: 200,
            eval_samples: 2000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.rho0 > 0.0 && self.rho0 < 1.0) {
            return bad(format!("rho0 must lie in (0, 1), got {}", self.rho0));
        }
        if matches!(self.pairs, PairSampling::Count(0) | PairSampling::PerExpert(0)) {
            return bad("sampled pair count must be >= 1".into());
        }
        for (name, lr) in [
            ("lr_frames", self.lr_frames),
            ("lr_kappa", self.lr_kappa),
            ("lr_amortizer", self.lr_amortizer),
            ("lr_gate", self.lr_gate),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.steps == 0 || self.batch_size == 0 || self.eval_interval == 0 {
            return bad("steps, batch_size and eval_interval must be >= 1".into());
        }
        if !(self.init_kappa > 0.0 && self.init_kappa.is_finite()) {
            return bad(format!("init_kappa must be positive, got {}", self.init_kappa));
        }
        if self.rank == Some(0) {
            return bad("rank must be >= 1".into());
        }
        Ok(())
    }
}

/// Unordered expert pairs entering the regularizer and the factor that makes
/// their sum an unbiased estimate of the full sum.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<(usize, usize)>,
    pub scale: f64,
}

impl PairSet {
    pub fn full(n: usize) -> Self {
        let pairs = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        Self { pairs, scale: 1.0 }
    }

    /// `m` distinct pairs drawn uniformly; all pairs when `m` reaches the total.
    pub fn sampled(n: usize, m: usize, rng: &mut RngState) -> Self {
        let all = Self::full(n);
        let total = all.pairs.len();
        if m >= total {
            return all;
        }
        let mut idx = sample(rng, total, m).into_vec();
        idx.sort_unstable();
        Self {
            pairs: idx.into_iter().map(|i| all.pairs[i]).collect(),
            scale: total as f64 / m as f64,
        }
    }

    pub fn for_config(n: usize, pairs: PairSampling, rng: &mut RngState) -> Self {
        match pairs.resolve(n) {
            None => Self::full(n),
            Some(m) => Self::sampled(n, m, rng),
        }
    }
}

fn hinge_terms(bases: &[&Matrix<f64>], rho0: f64, pairs: &PairSet, grads: Option<&mut [Matrix<f64>]>) -> f64 {
    let mut total = 0.0;
    let mut grads = grads;
    for &(i, j) in &pairs.pairs {
        let o = bases[i].t_matmul(bases[j]);
        let ov = o.frobenius_sq();
        let thresh = rho0 * bases[i].cols() as f64;
        if ov > thresh {
            total += ov - thresh;
            if let Some(g) = grads.as_deref_mut() {
                let s = 2.0 * pairs.scale;
                g[i].axpy(s, &bases[j].matmul(&o.transpose()));
                g[j].axpy(s, &bases[i].matmul(&o));
            }
        }
    }
    pairs.scale * total
}

/// `Σ_{i<j} max(0, ‖U_iᵀU_j‖² − ρ₀·k)`.
pub fn subspace_reg(bank: &ExpertBank<f64>, rho0: f64) -> f64 {
    let bases: Vec<&Matrix<f64>> = bank.frames().iter().map(Frame::basis).collect();
    hinge_terms(&bases, rho0, &PairSet::full(bank.n()), None)
}

/// Unbiased estimate of [`subspace_reg`] from `m` pairs drawn without
/// replacement.
pub fn subspace_reg_sampled(bank: &ExpertBank<f64>, rho0: f64, m: usize, rng: &mut RngState) -> Result<f64> {
    if m == 0 {
        return Err(Error::InvalidArgument("sampled pair count must be >= 1".into()));
    }
    let bases: Vec<&Matrix<f64>> = bank.frames().iter().map(Frame::basis).collect();
    Ok(hinge_terms(&bases, rho0, &PairSet::sampled(bank.n(), m, rng), None))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub task_ce: f64,
    pub reg: f64,
}

/// Euclidean gradients of the total loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub frames: Vec<Matrix<f64>>,
    /// With respect to `κ_e` itself, not its logarithm.
    pub kappas: Vec<f64>,
    pub amortizer: Option<Amortizer<f64>>,
}

fn zeros_like(am: &Amortizer<f64>) -> Amortizer<f64> {
    Amortizer {
        w1: Matrix::zeros(am.w1.rows(), am.w1.cols()),
        b1: vec![0.0; am.b1.len()],
        w2: Matrix::zeros(am.w2.rows(), am.w2.cols()),
        b2: vec![0.0; am.b2.len()],
    }
}

fn check_batch(batch: &Batch, n: usize, d: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if batch.labels.len() != batch.len() {
        return Err(Error::dims(format!("{} labels", batch.len()), batch.labels.len()));
    }
    if let Some(&z) = batch.labels.iter().find(|&&z| z >= n) {
        return Err(Error::InvalidArgument(format!("label {z} out of range for {n} experts")));
    }
    if let Some(x) = batch.xs.iter().find(|x| x.len() != d) {
        return Err(Error::dims(format!("tokens of length {d}"), x.len()));
    }
    Ok(())
}

fn forward_backward(
    bases: &[&Matrix<f64>],
    kappas: &[f64],
    amortizer: Option<&Amortizer<f64>>,
    batch: &Batch,
    beta: f64,
    rho0: f64,
    pairs: &PairSet,
    want_grad: bool,
) -> Result<(LossParts, Option<Gradients>)> {
    let n = bases.len();
    if n < 2 || kappas.len() != n {
        return Err(Error::dims(format!("{n} >= 2 experts with as many concentrations"), kappas.len()));
    }
    let (d, k) = bases[0].shape();
    if let Some(b) = bases.iter().find(|b| b.shape() != (d, k)) {
        return Err(Error::dims(format!("{d}x{k} frames"), format!("{:?}", b.shape())));
    }
    if let Some(am) = amortizer {
        if am.input_dim() != d || am.output_dim() != n {
            return Err(Error::dims(format!("amortizer {d} -> {n}"), format!("{} -> {}", am.input_dim(), am.output_dim())));
        }
    }
    check_batch(batch, n, d)?;

    let inv_b = 1.0 / batch.len() as f64;
    let nf = n as f64;
    // All frames side by side as one d × (n·k) row-major block, so the
    // per-token projections and gradient updates run over contiguous rows.
    let w = n * k;
    let mut stacked = vec![0.0; d * w];
    for (e, b) in bases.iter().enumerate() {
        for i in 0..d {
            stacked[i * w + e * k..i * w + (e + 1) * k].copy_from_slice(b.row(i));
        }
    }
    let mut g_stacked = vec![0.0; if want_grad { d * w } else { 0 }];
    let mut g_kappa = vec![0.0; n];
    let mut g_am = amortizer.map(zeros_like);
    let mut ce = 0.0;
    let mut proj = vec![0.0; w];
    let mut coef = vec![0.0; w];
    let mut aff = vec![0.0; n];

    for (x, &z) in batch.xs.iter().zip(&batch.labels) {
        proj.iter_mut().for_each(|p| *p = 0.0);
        for (row, &xi) in stacked.chunks_exact(w).zip(x) {
            for (p, &u) in proj.iter_mut().zip(row) {
                *p += u * xi;
            }
        }
        for (a, chunk) in aff.iter_mut().zip(proj.chunks_exact(k)) {
            *a = chunk.iter().map(|p| p * p).sum();
        }
        let trace = amortizer.map(|am| am.trace(x));
        let h: Vec<f64> = match &trace {
            Some(t) => t.scales.clone(),
            None => vec![1.0; n],
        };
        let logits: Vec<f64> = (0..n).map(|e| ALPHA_TRAIN * h[e] * kappas[e] * aff[e]).collect();
        let g = softmax(&logits);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        ce += (lse - logits[z]) * inv_b;
        if !want_grad {
            continue;
        }

        let delta: Vec<f64> = (0..n).map(|e| (g[e] - f64::from(u8::from(e == z))) * inv_b).collect();
        for e in 0..n {
            let d_aff = delta[e] * ALPHA_TRAIN * h[e] * kappas[e];
            g_kappa[e] += delta[e] * ALPHA_TRAIN * h[e] * aff[e];
            for j in e * k..(e + 1) * k {
                coef[j] = 2.0 * d_aff * proj[j];
            }
        }
        for (row, &xi) in g_stacked.chunks_exact_mut(w).zip(x) {
            for (g, &c) in row.iter_mut().zip(&coef) {
                *g += c * xi;
            }
        }
        if let (Some(am), Some(t), Some(ga)) = (amortizer, &trace, g_am.as_mut()) {
            let ds: Vec<f64> = (0..n).map(|e| nf * delta[e] * ALPHA_TRAIN * kappas[e] * aff[e]).collect();
            let mean: f64 = t.softmax.iter().zip(&ds).map(|(s, g)| s * g).sum();
            let d_out: Vec<f64> = t.softmax.iter().zip(&ds).map(|(s, g)| s * (g - mean)).collect();
            let hid = t.hidden.len();
            let w2g = ga.w2.as_mut_slice();
            for (j, &dj) in d_out.iter().enumerate() {
                ga.b2[j] += dj;
                for (w, &hv) in w2g[j * hid..(j + 1) * hid].iter_mut().zip(&t.hidden) {
                    *w += dj * hv;
                }
            }
            let d_hidden = am.w2.t_matvec(&d_out);
            let w1g = ga.w1.as_mut_slice();
            for (r, (&dh, &hv)) in d_hidden.iter().zip(&t.hidden).enumerate() {
                let dpre = dh * (1.0 - hv * hv);
                ga.b1[r] += dpre;
                for (w, &xi) in w1g[r * d..(r + 1) * d].iter_mut().zip(x) {
                    *w += dpre * xi;
                }
            }
        }
    }

    let mut g_frames: Vec<Matrix<f64>> = Vec::with_capacity(if want_grad { n } else { 0 });
    if want_grad {
        for e in 0..n {
            let mut m = Matrix::zeros(d, k);
            for i in 0..d {
                m.as_mut_slice()[i * k..(i + 1) * k].copy_from_slice(&g_stacked[i * w + e * k..i * w + (e + 1) * k]);
            }
            g_frames.push(m);
        }
    }
    let mut reg_grads = (want_grad && beta > 0.0).then(|| vec![Matrix::zeros(d, k); n]);
    let reg = hinge_terms(bases, rho0, pairs, reg_grads.as_deref_mut());
    for (g, r) in g_frames.iter_mut().zip(reg_grads.iter().flatten()) {
        g.axpy(beta, r);
    }
    let parts = LossParts { total: ce + beta * reg, task_ce: ce, reg };
    let grads = want_grad.then_some(Gradients { frames: g_frames, kappas: g_kappa, amortizer: g_am });
    Ok((parts, grads))
}

/// Loss as a function of unconstrained frame matrices, for finite-difference
/// checks. Uses every expert pair.
pub fn objective(
    bases: &[Matrix<f64>],
    kappas: &[f64],
    amortizer: Option<&Amortizer<f64>>,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<LossParts> {
    let refs: Vec<&Matrix<f64>> = bases.iter().collect();
    let pairs = PairSet::full(bases.len());
    Ok(forward_backward(&refs, kappas, amortizer, batch, cfg.beta, cfg.rho0, &pairs, false)?.0)
}

/// Gradients of [`objective`] at unconstrained frame matrices.
pub fn objective_gradients(
    bases: &[Matrix<f64>],
    kappas: &[f64],
    amortizer: Option<&Amortizer<f64>>,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(LossParts, Gradients)> {
    let refs: Vec<&Matrix<f64>> = bases.iter().collect();
    let pairs = PairSet::full(bases.len());
    let (l, g) = forward_backward(&refs, kappas, amortizer, batch, cfg.beta, cfg.rho0, &pairs, true)?;
    Ok((l, g.expect("gradients requested")))
}

pub fn loss(bank: &ExpertBank<f64>, amortizer: Option<&Amortizer<f64>>, batch: &Batch, cfg: &TrainConfig) -> Result<LossParts> {
    let refs: Vec<&Matrix<f64>> = bank.frames().iter().map(Frame::basis).collect();
    let pairs = PairSet::full(bank.n());
    Ok(forward_backward(&refs, bank.kappas(), amortizer, batch, cfg.beta, cfg.rho0, &pairs, false)?.0)
}

pub fn gradients(
    bank: &ExpertBank<f64>,
    amortizer: Option<&Amortizer<f64>>,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(LossParts, Gradients)> {
    gradients_with_pairs(bank, amortizer, batch, cfg, &PairSet::full(bank.n()))
}

pub fn gradients_with_pairs(
    bank: &ExpertBank<f64>,
    amortizer: Option<&Amortizer<f64>>,
    batch: &Batch,
    cfg: &TrainConfig,
    pairs: &PairSet,
) -> Result<(LossParts, Gradients)> {
    let refs: Vec<&Matrix<f64>> = bank.frames().iter().map(Frame::basis).collect();
    let (l, g) = forward_backward(&refs, bank.kappas(), amortizer, batch, cfg.beta, cfg.rho0, pairs, true)?;
    Ok((l, g.expect("gradients requested")))
}

/// Standard Adam over a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(len: usize, cfg: &TrainConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    /// Updates the moments and returns the step `−lr·m̂/(√v̂ + ε)`.
    pub fn direction(&mut self, grad: &[f64], lr: f64) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        self.m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(grad)
            .map(|((m, v), &g)| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                -lr * (*m / c1) / ((*v / c2).sqrt() + self.eps)
            })
            .collect()
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        for (p, s) in params.iter_mut().zip(self.direction(grad, lr)) {
            *p += s;
        }
    }
}

/// Trainable routing parameters. Concentrations are stored as logarithms.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub frames: Vec<Frame<f64>>,
    pub log_kappas: Vec<f64>,
    pub amortizer: Option<Amortizer<f64>>,
}

impl Model {
    pub fn init(n: usize, d: usize, k: usize, cfg: &TrainConfig, rng: &mut RngState) -> Result<Self> {
        let frames = (0..n).map(|_| haar_frame(d, k, rng)).collect::<Result<_>>()?;
        let amortizer = cfg.amortized.then(|| Amortizer::init(d, AMORTIZER_HIDDEN, n, rng));
        Ok(Self { frames, log_kappas: vec![cfg.init_kappa.ln(); n], amortizer })
    }

    pub fn kappas(&self) -> Vec<f64> {
        self.log_kappas.iter().map(|l| l.exp()).collect()
    }

    pub fn bank(&self) -> Result<ExpertBank<f64>> {
        ExpertBank::routing_only(self.frames.clone(), self.kappas())
    }

    pub fn router(&self, alpha: f64) -> Result<GrmoeRouter> {
        Ok(GrmoeRouter { bank: self.bank()?, amortizer: self.amortizer.clone(), alpha })
    }
}

fn amortizer_slices(am: &mut Amortizer<f64>) -> [&mut [f64]; 4] {
    [am.w1.as_mut_slice(), &mut am.b1, am.w2.as_mut_slice(), &mut am.b2]
}

fn amortizer_flat(am: &Amortizer<f64>) -> Vec<f64> {
    [am.w1.as_slice(), &am.b1, am.w2.as_slice(), &am.b2].concat()
}

/// Moment accumulators for every parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub frames: Vec<Adam>,
    pub kappas: Adam,
    pub amortizer: Option<Adam>,
    pub step: u64,
}

impl OptimState {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        Self {
            frames: model
                .frames
                .iter()
                .map(|f| Adam::new(f.d() * f.k(), cfg))
                .collect(),
            kappas: Adam::new(model.log_kappas.len(), cfg),
            amortizer: model.amortizer.as_ref().map(|a| Adam::new(a.param_count(), cfg)),
            step: 0,
        }
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepReport {
    /// Frames whose retraction needed a halved step.
    pub halved: usize,
    /// Frames left unchanged because the retry also failed.
    pub skipped: usize,
}

/// Frames: the Euclidean gradient is projected to the tangent space, Adam
/// moments are kept in ambient coordinates, the resulting direction is
/// projected again and QR-retracted. Concentrations (in log space) and the
/// amortizer take plain Adam steps.
pub fn adam_step(model: &mut Model, grads: &Gradients, state: &mut OptimState, cfg: &TrainConfig) -> Result<StepReport> {
    let n = model.frames.len();
    if grads.frames.len() != n || grads.kappas.len() != n || state.frames.len() != n {
        return Err(Error::dims(format!("{n} parameter groups"), grads.frames.len()));
    }
    let mut report = StepReport::default();
    for ((frame, g), adam) in model.frames.iter_mut().zip(&grads.frames).zip(state.frames.iter_mut()) {
        let rg = tangent_project(frame, g)?;
        let dir = adam.direction(rg.direction().as_slice(), cfg.lr_frames);
        let dir = Matrix::from_vec(frame.d(), frame.k(), dir)?;
        let step = tangent_project(frame, &dir)?;
        match retract(&step) {
            Ok(f) => *frame = f,
            Err(Error::RankDeficient { .. }) => {
                report.halved += 1;
                match retract(&step.scaled(0.5)) {
                    Ok(f) => *frame = f,
                    Err(Error::RankDeficient { .. }) => report.skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            Err(e) => return Err(e),
        }
    }

    let kappas = model.kappas();
    let g_log: Vec<f64> = grads.kappas.iter().zip(&kappas).map(|(g, k)| g * k).collect();
    state.kappas.step(&mut model.log_kappas, &g_log, cfg.lr_kappa);

    if let (Some(am), Some(ga), Some(adam)) = (model.amortizer.as_mut(), grads.amortizer.as_ref(), state.amortizer.as_mut()) {
        let dir = adam.direction(&amortizer_flat(ga), cfg.lr_amortizer);
        let mut off = 0;
        for part in amortizer_slices(am) {
            for p in part.iter_mut() {
                *p += dir[off];
                off += 1;
            }
        }
    }
    state.step += 1;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub acc: f64,
    pub cv: f64,
    pub entropy: f64,
    pub max_overlap: f64,
    pub collapsed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub const HEADER: &'static str = "step,acc,cv,entropy,max_overlap,collapsed";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.acc, r.cv, r.entropy, r.max_overlap, r.collapsed
            ));
        }
        out
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub log: MetricsLog,
    /// Metrics on the held-out evaluation set at the final step.
    pub final_metrics: EvalMetrics,
    pub checkpoint: Checkpoint,
}

/// Fixed held-out evaluation draw for a training seed.
pub fn eval_batch(task: &SyntheticTask, cfg: &TrainConfig) -> Batch {
    sample_batch(task, cfg.eval_samples, &mut RngState::new(cfg.seed).substream("eval"))
}

fn record(step: usize, m: &EvalMetrics, model: &Model) -> Result<MetricsRow> {
    Ok(MetricsRow {
        step,
        acc: m.assignment_accuracy,
        cv: m.load_cv,
        entropy: m.mean_entropy,
        max_overlap: max_pairwise_overlap(&model.frames)?,
        collapsed: m.collapsed,
    })
}

pub fn train(task: &SyntheticTask, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    if cfg.eval_samples < 100 * task.n() {
        return Err(Error::InvalidArgument(format!("eval_samples must be at least {}", 100 * task.n())));
    }
    let root = RngState::new(cfg.seed);
    let rank = cfg.rank.unwrap_or(task.k());
    if rank > task.d() {
        return Err(Error::InvalidArgument(format!("rank {rank} exceeds d = {}", task.d())));
    }
    let mut model = Model::init(task.n(), task.d(), rank, cfg, &mut root.substream("init"))?;
    let mut state = OptimState::new(&model, cfg);
    let mut batches = root.substream("batches");
    let mut pair_rng = root.substream("pairs");
    let held_out = eval_batch(task, cfg);
    let mut log = MetricsLog::default();

    let eval = |model: &Model| evaluate_batch(&model.router(ALPHA_TRAIN)?, &held_out);
    log.rows.push(record(0, &eval(&model)?, &model)?);
    let mut last = None;
    for step in 1..=cfg.steps {
        let batch = sample_batch(task, cfg.batch_size, &mut batches);
        let pairs = PairSet::for_config(task.n(), cfg.pairs, &mut pair_rng);
        let bank = model.bank()?;
        let (parts, grads) = gradients_with_pairs(&bank, model.amortizer.as_ref(), &batch, cfg, &pairs)?;
        if !parts.total.is_finite() {
            return Err(Error::Diverged { step });
        }
        adam_step(&mut model, &grads, &mut state, cfg)?;
        if step % cfg.eval_interval == 0 || step == cfg.steps {
            let m = eval(&model)?;
            log.rows.push(record(step, &m, &model)?);
            last = Some(m);
        }
    }
    let final_metrics = last.expect("at least one step");
    let checkpoint = Checkpoint::capture(task.spec, cfg, &model, &batches, cfg.steps);
    Ok(Trained { model, log, final_metrics, checkpoint })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngRecord {
    pub seed: u64,
    pub stream: u64,
    /// Decimal string; JSON numbers cannot carry 128 bits portably.
    pub word_pos: String,
}

impl RngRecord {
    pub fn capture(rng: &RngState) -> Self {
        Self { seed: rng.seed(), stream: rng.stream(), word_pos: rng.word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<RngState> {
        let pos = self
            .word_pos
            .parse()
            .map_err(|_| Error::Serialization(format!("bad word position '{}'", self.word_pos)))?;
        Ok(RngState::at(self.seed, self.stream, pos))
    }
}

/// Training snapshot. Concentrations are stored as values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub task: TaskSpec,
    pub frames: Vec<FrameRecord>,
    pub kappas: Vec<f64>,
    pub amortizer: Option<AmortizerRecord>,
    pub rng: RngRecord,
    pub step: usize,
}

impl Checkpoint {
    pub fn capture(task: TaskSpec, cfg: &TrainConfig, model: &Model, rng: &RngState, step: usize) -> Self {
        Self {
            config: cfg.clone(),
            task,
            frames: model.frames.iter().map(Frame::to_record).collect(),
            kappas: model.kappas(),
            amortizer: model.amortizer.as_ref().map(Amortizer::to_record),
            rng: RngRecord::capture(rng),
            step,
        }
    }

    pub fn model(&self) -> Result<Model> {
        if self.kappas.iter().any(|&k| !(k > 0.0 && k.is_finite())) {
            return Err(Error::Serialization("concentrations must be positive".into()));
        }
        if self.frames.len() != self.kappas.len() {
            return Err(Error::Serialization(format!(
                "{} frames but {} concentrations",
                self.frames.len(),
                self.kappas.len()
            )));
        }
        Ok(Model {
            frames: self.frames.iter().map(Frame::from_record).collect::<Result<_>>()?,
            log_kappas: self.kappas.iter().map(|k| k.ln()).collect(),
            amortizer: self.amortizer.as_ref().map(Amortizer::from_record).transpose()?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
