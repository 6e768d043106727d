//! Bingham concentration gating.
//!
//! Each expert `e` owns a frame `U_e` and a concentration `κ_e > 0`. A token
//! `x` is routed with logits `ℓ_e = α·h_e·κ_e·‖U_eᵀx‖²`, where `α ≥ 0` is the
//! global sparsity dial and `h_e` is an optional per-token multiplier produced
//! by an [`Amortizer`] (`h ≡ 1` without one).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, Matrix, RngState};
use crate::manifold::{affinity_unchecked, Frame};
use crate::scalar::Real;

/// Two-layer tanh feed-forward map `R^d → R^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T> {
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

impl<T: Real> FeedForward<T> {
    /// Random map with `hidden` tanh units and `1/√fan_in` weight scale.
    pub fn random(d: usize, hidden: usize, rng: &mut RngState) -> Self {
        let s1 = T::lit(1.0 / (d as f64).sqrt());
        let s2 = T::lit(1.0 / (hidden as f64).sqrt());
        Self {
            w1: gaussian_matrix(hidden, d, rng).scale(s1),
            b1: vec![T::zero(); hidden],
            w2: gaussian_matrix(d, hidden, rng).scale(s2),
            b2: vec![T::zero(); d],
        }
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        let hidden: Vec<T> = self
            .w1
            .matvec(x)
            .iter()
            .zip(&self.b1)
            .map(|(&z, &b)| (z + b).tanh())
            .collect();
        self.w2.matvec(&hidden).iter().zip(&self.b2).map(|(&y, &b)| y + b).collect()
    }
}

/// Expert map `f_e`.
#[derive(Clone, Debug, PartialEq)]
pub enum Expert<T> {
    Identity,
    /// `x ↦ c·x`
    Scale(T),
    FeedForward(FeedForward<T>),
}

impl<T: Real> Expert<T> {
    pub fn apply(&self, x: &[T]) -> Vec<T> {
        match self {
            Expert::Identity => x.to_vec(),
            Expert::Scale(c) => x.iter().map(|&v| *c * v).collect(),
            Expert::FeedForward(ff) => ff.apply(x),
        }
    }
}

/// `N ≥ 2` experts sharing `(d, k)`, each with a frame and a concentration.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertBank<T> {
    frames: Vec<Frame<T>>,
    kappas: Vec<T>,
    experts: Vec<Expert<T>>,
}

impl<T: Real> ExpertBank<T> {
    pub fn new(frames: Vec<Frame<T>>, kappas: Vec<T>, experts: Vec<Expert<T>>) -> Result<Self> {
        let n = frames.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 experts, got {n}")));
        }
        if kappas.len() != n || experts.len() != n {
            return Err(Error::dims(
                format!("{n} kappas and experts"),
                format!("{} kappas, {} experts", kappas.len(), experts.len()),
            ));
        }
        let (d, k) = (frames[0].d(), frames[0].k());
        if let Some(f) = frames.iter().find(|f| f.d() != d || f.k() != k) {
            return Err(Error::dims(format!("{d}x{k}"), format!("{}x{}", f.d(), f.k())));
        }
        if let Some(kappa) = kappas.iter().find(|&&v| !(v > T::zero() && v.is_finite())) {
            return Err(Error::InvalidArgument(format!("concentration must be positive, got {kappa}")));
        }
        Ok(Self { frames, kappas, experts })
    }

    /// Bank whose experts are all the identity map; enough for routing.
    pub fn routing_only(frames: Vec<Frame<T>>, kappas: Vec<T>) -> Result<Self> {
        let experts = vec![Expert::Identity; frames.len()];
        Self::new(frames, kappas, experts)
    }

    pub fn n(&self) -> usize {
        self.frames.len()
    }

    pub fn d(&self) -> usize {
        self.frames[0].d()
    }

    pub fn k(&self) -> usize {
        self.frames[0].k()
    }

    pub fn frames(&self) -> &[Frame<T>] {
        &self.frames
    }

    pub fn kappas(&self) -> &[T] {
        &self.kappas
    }

    pub fn experts(&self) -> &[Expert<T>] {
        &self.experts
    }

    /// Affinities `a_e(x) = ‖U_eᵀx‖²` for every expert.
    pub fn affinities(&self, x: &[T]) -> Result<Vec<T>> {
        check_token(x, self.d())?;
        Ok(self.frames.iter().map(|f| affinity_unchecked(f.basis(), x)).collect())
    }

    /// Concentrated affinities `κ_e·a_e`.
    pub fn concentrated(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self
            .affinities(x)?
            .into_iter()
            .zip(&self.kappas)
            .map(|(a, &kappa)| kappa * a)
            .collect())
    }
}

fn check_token<T: Real>(x: &[T], d: usize) -> Result<()> {
    if x.len() != d {
        return Err(Error::dims(format!("token of length {d}"), x.len()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("token has non-finite entries".into()));
    }
    Ok(())
}

fn check_alpha<T: Real>(alpha: T) -> Result<()> {
    if !(alpha >= T::zero() && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    Ok(())
}

/// Probability vector over experts together with the logits it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDistribution<T> {
    pub logits: Vec<T>,
    pub probs: Vec<T>,
}

impl<T: Real> RoutingDistribution<T> {
    pub fn from_logits(logits: Vec<T>) -> Self {
        let probs = softmax(&logits);
        Self { logits, probs }
    }

    pub fn n(&self) -> usize {
        self.probs.len()
    }

    /// Most probable expert, ties to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Max-subtracted softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest value, ties to the lowest index.
pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &p) in v.iter().enumerate().skip(1) {
        if p > v[best] {
            best = i;
        }
    }
    best
}

/// Lightweight two-layer tanh network producing per-token concentration
/// multipliers `h(x) = N·softmax(W2·tanh(W1·x + b1) + b2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Amortizer<T> {
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

/// Default hidden width of the amortizer.
pub const AMORTIZER_HIDDEN: usize = 32;

/// Intermediate activations of an amortizer evaluation.
#[derive(Clone, Debug)]
#[allow(dead_code)]
pub(crate) struct AmortizerTrace<T> {
    pub hidden: Vec<T>,
    pub softmax: Vec<T>,
    pub scales: Vec<T>,
}

impl<T: Real> Amortizer<T> {
    /// First layer `N(0, 1/d)`, output head zero, so `h ≡ 1` at initialization.
    pub fn init(d: usize, hidden: usize, n: usize, rng: &mut RngState) -> Self {
        Self {
            w1: gaussian_matrix(hidden, d, rng).scale(T::lit(1.0 / (d as f64).sqrt())),
            b1: vec![T::zero(); hidden],
            w2: Matrix::zeros(n, hidden),
            b2: vec![T::zero(); n],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn param_count(&self) -> usize {
        self.w1.as_slice().len() + self.b1.len() + self.w2.as_slice().len() + self.b2.len()
    }

    /// Zeroes the output layer, which makes `h ≡ 1`.
    pub fn zero_head(&mut self) {
        self.w2 = Matrix::zeros(self.w2.rows(), self.w2.cols());
        self.b2.iter_mut().for_each(|b| *b = T::zero());
    }

    pub(crate) fn trace(&self, x: &[T]) -> AmortizerTrace<T> {
        let hidden: Vec<T> = self
            .w1
            .matvec(x)
            .iter()
            .zip(&self.b1)
            .map(|(&z, &b)| (z + b).tanh())
            .collect();
        let out: Vec<T> = self.w2.matvec(&hidden).iter().zip(&self.b2).map(|(&o, &b)| o + b).collect();
        let soft = softmax(&out);
        let n = T::from_usize(soft.len()).unwrap();
        let scales = soft.iter().map(|&s| s * n).collect();
        AmortizerTrace {
            hidden,
            softmax: soft,
            scales,
        }
    }

    /// Per-expert multipliers `h(x)`, positive and summing to `N`.
    pub fn scales(&self, x: &[T]) -> Result<Vec<T>> {
        check_token(x, self.input_dim())?;
        Ok(self.trace(x).scales)
    }
}

/// Logits `α·(h_e·κ_e)·a_e`; `scales = None` means `h ≡ 1`.
pub(crate) fn logits<T: Real>(kappas: &[T], affinities: &[T], scales: Option<&[T]>, alpha: T) -> Vec<T> {
    match scales {
        None => kappas.iter().zip(affinities).map(|(&k, &a)| alpha * k * a).collect(),
        Some(h) => kappas
            .iter()
            .zip(affinities)
            .zip(h)
            .map(|((&k, &a), &h)| alpha * (h * k) * a)
            .collect(),
    }
}

/// Scalar-concentration gating `g_e ∝ exp(α·κ_e·a_e(x))`.
pub fn route<T: Real>(bank: &ExpertBank<T>, x: &[T], alpha: T) -> Result<RoutingDistribution<T>> {
    check_alpha(alpha)?;
    let a = bank.affinities(x)?;
    Ok(RoutingDistribution::from_logits(logits(bank.kappas(), &a, None, alpha)))
}

/// Amortized gating `q_e ∝ exp(α·h_e(x)·κ_e·a_e(x))`.
pub fn route_amortized<T: Real>(
    bank: &ExpertBank<T>,
    amortizer: &Amortizer<T>,
    x: &[T],
    alpha: T,
) -> Result<RoutingDistribution<T>> {
    check_alpha(alpha)?;
    if amortizer.output_dim() != bank.n() {
        return Err(Error::dims(
            format!("amortizer with {} outputs", bank.n()),
            amortizer.output_dim(),
        ));
    }
    let a = bank.affinities(x)?;
    let h = amortizer.scales(x)?;
    Ok(RoutingDistribution::from_logits(logits(bank.kappas(), &a, Some(&h), alpha)))
}

/// Routes with the amortizer when one is given.
pub fn route_with<T: Real>(
    bank: &ExpertBank<T>,
    amortizer: Option<&Amortizer<T>>,
    x: &[T],
    alpha: T,
) -> Result<RoutingDistribution<T>> {
    match amortizer {
        Some(am) => route_amortized(bank, am, x, alpha),
        None => route(bank, x, alpha),
    }
}

/// Routes a batch of tokens in parallel; identical to sequential routing.
pub fn route_batch<T: Real, X: AsRef<[T]> + Sync>(
    bank: &ExpertBank<T>,
    amortizer: Option<&Amortizer<T>>,
    xs: &[X],
    alpha: T,
) -> Result<Vec<RoutingDistribution<T>>> {
    xs.par_iter().map(|x| route_with(bank, amortizer, x.as_ref(), alpha)).collect()
}

/// Shannon entropy in nats, `0·log 0 = 0`.
pub fn entropy<T: Real>(rd: &RoutingDistribution<T>) -> T {
    -rd.probs
        .iter()
        .filter(|&&p| p > T::zero())
        .map(|&p| p * p.ln())
        .sum::<T>()
}

/// Expert indices sorted by descending value, ties by lower index.
pub fn ranked<T: Real>(v: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[j].partial_cmp(&v[i]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j)));
    idx
}

/// Mass of the `k` most probable experts.
pub fn topk_mass<T: Real>(rd: &RoutingDistribution<T>, k: usize) -> Result<T> {
    if k == 0 || k > rd.n() {
        return Err(Error::InvalidArgument(format!("top-k needs 1 <= k <= {}, got {k}", rd.n())));
    }
    Ok(ranked(&rd.probs).into_iter().take(k).map(|e| rd.probs[e]).sum())
}

/// Participation ratio `1/Σ p_e²`.
pub fn effective_experts<T: Real>(rd: &RoutingDistribution<T>) -> T {
    T::one() / rd.probs.iter().map(|&p| p * p).sum::<T>()
}

/// Mixture-of-experts forward pass: affinities, concentrations, logits,
/// softmax, then the gate-weighted sum of expert outputs.
pub fn moe_forward<T: Real>(
    bank: &ExpertBank<T>,
    amortizer: Option<&Amortizer<T>>,
    x: &[T],
    alpha: T,
) -> Result<Vec<T>> {
    let gates = route_with(bank, amortizer, x, alpha)?;
    let mut y = vec![T::zero(); x.len()];
    for (expert, &g) in bank.experts().iter().zip(&gates.probs) {
        if g.is_zero() {
            continue;
        }
        let out = expert.apply(x);
        if out.len() != y.len() {
            return Err(Error::dims(format!("expert output of length {}", y.len()), out.len()));
        }
        for (acc, v) in y.iter_mut().zip(out) {
            *acc += g * v;
        }
    }
    Ok(y)
}

/// Plain-data copy of an amortizer for checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AmortizerRecord {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl<T: Real> Amortizer<T> {
    pub fn to_record(&self) -> AmortizerRecord {
        let f = |v: &[T]| v.iter().map(|x| x.as_f64()).collect();
        AmortizerRecord {
            input_dim: self.input_dim(),
            hidden_dim: self.hidden_dim(),
            output_dim: self.output_dim(),
            w1: f(self.w1.as_slice()),
            b1: f(&self.b1),
            w2: f(self.w2.as_slice()),
            b2: f(&self.b2),
        }
    }

    pub fn from_record(r: &AmortizerRecord) -> Result<Self> {
        let f = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect::<Vec<T>>();
        let (b1, b2) = (f(&r.b1), f(&r.b2));
        if b1.len() != r.hidden_dim || b2.len() != r.output_dim {
            return Err(Error::dims("bias lengths matching layer widths", format!("{} / {}", b1.len(), b2.len())));
        }
        Ok(Self {
            w1: Matrix::from_vec(r.hidden_dim, r.input_dim, f(&r.w1))?,
            b1,
            w2: Matrix::from_vec(r.output_dim, r.hidden_dim, f(&r.w2))?,
            b2,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::haar_frame;

    fn random_bank(n: usize, d: usize, k: usize, rng: &mut RngState) -> ExpertBank<f64> {
        let frames = (0..n).map(|_| haar_frame(d, k, rng).unwrap()).collect();
        let kappas = (0..n).map(|_| rng.uniform_range(0.1, 5.0)).collect();
        ExpertBank::routing_only(frames, kappas).unwrap()
    }

    /// Bank with `d = 2`, lines along the axes, so affinities are `x0²`, `x1²`.
    fn axis_bank(kappas: [f64; 2]) -> ExpertBank<f64> {
        let frames = vec![
            Frame::coordinate_block(2, 1, 0).unwrap(),
            Frame::coordinate_block(2, 1, 1).unwrap(),
        ];
        ExpertBank::routing_only(frames, kappas.to_vec()).unwrap()
    }

    #[test]
    fn bank_validation() {
        let f = Frame::<f64>::coordinate_block(4, 2, 0).unwrap();
        let g = Frame::<f64>::coordinate_block(4, 1, 0).unwrap();
        assert!(ExpertBank::routing_only(vec![f.clone()], vec![1.0]).is_err());
        assert!(ExpertBank::routing_only(vec![f.clone(), g], vec![1.0, 1.0]).is_err());
        assert!(ExpertBank::routing_only(vec![f.clone(), f.clone()], vec![1.0, 0.0]).is_err());
        assert!(ExpertBank::routing_only(vec![f.clone(), f], vec![1.0]).is_err());
    }

    #[test]
    fn alpha_zero_is_uniform() {
        let mut rng = RngState::new(1);
        let bank = random_bank(5, 8, 2, &mut rng);
        let x: Vec<f64> = rng.normal_vec(8);
        let rd = route(&bank, &x, 0.0).unwrap();
        for p in &rd.probs {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn two_expert_hand_value() {
        let bank = axis_bank([1.0, 1.0]);
        let x = [2f64.sqrt(), 1.0];
        let rd = route(&bank, &x, 1.0).unwrap();
        let e2 = 2f64.exp();
        let e1 = 1f64.exp();
        assert!((rd.probs[0] - e2 / (e2 + e1)).abs() < 1e-14);
        assert!((rd.probs[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((rd.probs[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!((entropy(&rd) - 0.582_203_108_888_217_9).abs() < 1e-12);
    }

    #[test]
    fn equal_concentrated_affinities_are_uniform() {
        let bank = axis_bank([2.0, 2.0]);
        let rd = route(&bank, &[1.0, -1.0], 3.0).unwrap();
        assert!((rd.probs[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn route_errors() {
        let bank = axis_bank([1.0, 1.0]);
        assert!(matches!(route(&bank, &[f64::NAN, 0.0], 1.0), Err(Error::Numerical(_))));
        assert!(matches!(route(&bank, &[1.0], 1.0), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(route(&bank, &[1.0, 0.0], -1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn large_alpha_does_not_overflow() {
        let bank = axis_bank([1.0, 1.0]);
        let rd = route(&bank, &[30.0, 1.0], 50.0).unwrap();
        assert!(rd.probs.iter().all(|p| p.is_finite()));
        assert!((topk_mass(&rd, 1).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_anchors() {
        let uniform = RoutingDistribution::from_logits(vec![0.0f64; 8]);
        assert!((entropy(&uniform) - 8f64.ln()).abs() < 1e-14);
        let one_hot = RoutingDistribution {
            logits: vec![0.0, 0.0, 0.0],
            probs: vec![0.0f64, 1.0, 0.0],
        };
        assert_eq!(entropy(&one_hot), 0.0);
        assert_eq!(effective_experts(&one_hot), 1.0);
        assert!((effective_experts(&uniform) - 8.0).abs() < 1e-12);
        let pair = RoutingDistribution {
            logits: vec![0.0; 4],
            probs: vec![0.5f64, 0.5, 0.0, 0.0],
        };
        assert_eq!(effective_experts(&pair), 2.0);
    }

    #[test]
    fn topk_mass_values() {
        let rd = RoutingDistribution {
            logits: vec![0.0; 3],
            probs: vec![0.2f64, 0.5, 0.3],
        };
        assert!((topk_mass(&rd, 2).unwrap() - 0.8).abs() < 1e-15);
        assert!((topk_mass(&rd, 3).unwrap() - 1.0).abs() < 1e-15);
        assert!(topk_mass(&rd, 0).is_err());
        assert!(topk_mass(&rd, 4).is_err());
        assert_eq!(ranked(&[1.0, 3.0, 3.0, 0.5]), vec![1, 2, 0, 3]);
    }

    #[test]
    fn zero_head_amortizer_reduces_to_route() {
        let mut rng = RngState::new(4);
        let bank = random_bank(6, 10, 3, &mut rng);
        let mut am = Amortizer::init(10, AMORTIZER_HIDDEN, 6, &mut rng);
        am.zero_head();
        for _ in 0..20 {
            let x: Vec<f64> = rng.normal_vec(10);
            let a = route_amortized(&bank, &am, &x, 1.3).unwrap();
            let b = route(&bank, &x, 1.3).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn amortizer_scales_sum_to_n() {
        let mut rng = RngState::new(5);
        let mut am = Amortizer::<f64>::init(7, 16, 4, &mut rng);
        am.w2 = gaussian_matrix(4, 16, &mut rng);
        for _ in 0..10 {
            let h = am.scales(&rng.normal_vec::<f64>(7)).unwrap();
            assert!((h.iter().sum::<f64>() - 4.0).abs() < 1e-12);
            assert!(h.iter().all(|&v| v > 0.0));
        }
        let back = Amortizer::<f64>::from_record(&am.to_record()).unwrap();
        assert_eq!(back, am);
    }

    #[test]
    fn amortized_route_matches_direct_evaluation() {
        let mut rng = RngState::new(6);
        let bank = random_bank(4, 6, 2, &mut rng);
        let mut am = Amortizer::<f64>::init(6, 8, 4, &mut rng);
        am.w2 = gaussian_matrix(4, 8, &mut rng);
        am.b2 = rng.normal_vec(4);
        let x: Vec<f64> = rng.normal_vec(6);
        let rd = route_amortized(&bank, &am, &x, 0.7).unwrap();

        // Independent evaluation of q_e ∝ exp(α h_e κ_e ‖U_eᵀx‖²).
        let mut hidden = vec![0.0; 8];
        for (i, h) in hidden.iter_mut().enumerate() {
            let z: f64 = (0..6).map(|j| am.w1[(i, j)] * x[j]).sum::<f64>() + am.b1[i];
            *h = z.tanh();
        }
        let out: Vec<f64> = (0..4)
            .map(|e| (0..8).map(|i| am.w2[(e, i)] * hidden[i]).sum::<f64>() + am.b2[e])
            .collect();
        let z: f64 = out.iter().map(|o| o.exp()).sum();
        let weights: Vec<f64> = (0..4)
            .map(|e| {
                let h = 4.0 * out[e].exp() / z;
                let u = bank.frames()[e].basis();
                let a: f64 = (0..2)
                    .map(|c| (0..6).map(|r| u[(r, c)] * x[r]).sum::<f64>().powi(2))
                    .sum();
                (0.7 * h * bank.kappas()[e] * a).exp()
            })
            .collect();
        let total: f64 = weights.iter().sum();
        for (p, w) in rd.probs.iter().zip(&weights) {
            assert!((p - w / total).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_with_identity_experts_returns_input() {
        let mut rng = RngState::new(7);
        let bank = random_bank(3, 5, 2, &mut rng);
        let x: Vec<f64> = rng.normal_vec(5);
        let y = moe_forward(&bank, None, &x, 1.0).unwrap();
        for (a, b) in y.iter().zip(&x) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_opposite_experts_cancel() {
        let frames = vec![
            Frame::coordinate_block(2, 1, 0).unwrap(),
            Frame::coordinate_block(2, 1, 1).unwrap(),
        ];
        let bank = ExpertBank::new(frames, vec![1.0, 1.0], vec![Expert::Identity, Expert::Scale(-1.0)]).unwrap();
        let y: Vec<f64> = moe_forward(&bank, None, &[1.0, 1.0], 1.0).unwrap();
        assert!(y.iter().all(|v: &f64| v.abs() < 1e-15));
    }

    #[test]
    fn forward_hard_limit_selects_dominant_expert() {
        let mut rng = RngState::new(8);
        let frames = vec![
            Frame::coordinate_block(6, 2, 0).unwrap(),
            Frame::coordinate_block(6, 2, 2).unwrap(),
            Frame::coordinate_block(6, 2, 4).unwrap(),
        ];
        let experts = (0..3)
            .map(|_| Expert::FeedForward(FeedForward::random(6, 24, &mut rng)))
            .collect();
        let bank = ExpertBank::new(frames, vec![1.0; 3], experts).unwrap();
        let x = [1.0, 1.0, 0.1, 0.0, 0.2, 0.1];
        let y: Vec<f64> = moe_forward(&bank, None, &x, 50.0).unwrap();
        let target = bank.experts()[0].apply(&x);
        for (a, b) in y.iter().zip(&target) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_matches_sequential() {
        let mut rng = RngState::new(9);
        let bank = random_bank(4, 8, 2, &mut rng);
        let xs: Vec<Vec<f64>> = (0..50).map(|_| rng.normal_vec(8)).collect();
        let batch = route_batch(&bank, None, &xs, 2.0).unwrap();
        for (x, rd) in xs.iter().zip(&batch) {
            assert_eq!(&route(&bank, x, 2.0).unwrap(), rd);
        }
    }
}
