//! Grassmannian and Stiefel geometry on orthonormal frames.
//!
//! A [`Frame`] is a `d×k` matrix with orthonormal columns; it represents the
//! subspace it spans, so every quantity routed through it (affinity, distance,
//! overlap) is invariant under right multiplication by an orthogonal `k×k`
//! matrix. The `d×d` projector `U Uᵀ` is never formed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, qr_positive, Matrix, RngState};
use crate::scalar::Real;

/// Orthonormal `d×k` basis of a point on `Gr(k, d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame<T> {
    basis: Matrix<T>,
}

impl<T: Real> Frame<T> {
    /// Wraps a basis, checking `‖UᵀU − I‖_F ≤ T::FRAME_TOL`.
    pub fn new(basis: Matrix<T>) -> Result<Self> {
        let (d, k) = basis.shape();
        if k == 0 || k > d {
            return Err(Error::dims(format!("1 <= k <= d = {d}"), k));
        }
        let defect = basis.orthonormality_defect();
        if !(defect.as_f64() <= T::FRAME_TOL) {
            return Err(Error::Numerical(format!(
                "frame orthonormality defect {:e} exceeds {:e}",
                defect.as_f64(),
                T::FRAME_TOL
            )));
        }
        Ok(Self { basis })
    }

    /// Orthonormalizes an arbitrary full-rank `d×k` matrix.
    pub fn orthonormalize(m: &Matrix<T>) -> Result<Self> {
        let (q, _) = qr_positive(m)?;
        Ok(Self { basis: q })
    }

    /// Coordinate frame spanned by `e_offset, …, e_{offset+k-1}`.
    pub fn coordinate_block(d: usize, k: usize, offset: usize) -> Result<Self> {
        if k == 0 || offset + k > d {
            return Err(Error::dims(format!("offset + k <= {d}"), offset + k));
        }
        let mut b = Matrix::zeros(d, k);
        for j in 0..k {
            b[(offset + j, j)] = T::one();
        }
        Ok(Self { basis: b })
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.basis.rows()
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.basis.cols()
    }

    #[inline]
    pub fn basis(&self) -> &Matrix<T> {
        &self.basis
    }

    pub fn into_basis(self) -> Matrix<T> {
        self.basis
    }

    pub fn defect(&self) -> T {
        self.basis.orthonormality_defect()
    }

    /// Another representative `U·O` of the same subspace.
    pub fn rotate(&self, o: &Matrix<T>) -> Result<Self> {
        if o.shape() != (self.k(), self.k()) {
            return Err(Error::dims(format!("{0}x{0}", self.k()), format!("{:?}", o.shape())));
        }
        Frame::new(self.basis.matmul(o))
    }

    pub fn to_record(&self) -> FrameRecord {
        FrameRecord {
            d: self.d(),
            k: self.k(),
            basis: self.basis.as_slice().iter().map(|v| v.as_f64()).collect(),
        }
    }

    /// Loads a serialized frame. Bases within `1e-6` of orthonormal are
    /// re-orthonormalized; anything further off is rejected.
    pub fn from_record(rec: &FrameRecord) -> Result<Self> {
        let data = rec.basis.iter().map(|&v| T::lit(v)).collect();
        let m = Matrix::from_vec(rec.d, rec.k, data)?;
        if rec.k == 0 || rec.k > rec.d {
            return Err(Error::dims(format!("1 <= k <= d = {}", rec.d), rec.k));
        }
        let defect = m.orthonormality_defect().as_f64();
        if !(defect <= 1e-6) {
            return Err(Error::Numerical(format!("stored frame defect {defect:e} exceeds 1e-6")));
        }
        Frame::orthonormalize(&m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_record()).expect("frame record serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_record(&serde_json::from_str(s)?)
    }
}

/// Serialized frame: `{d, k, basis}` with the basis in row-major order.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FrameRecord {
    pub d: usize,
    pub k: usize,
    pub basis: Vec<f64>,
}

/// Tangent vector to the Stiefel manifold at `base`.
#[derive(Clone, Debug)]
pub struct Tangent<T> {
    base: Frame<T>,
    direction: Matrix<T>,
}

impl<T: Real> Tangent<T> {
    pub fn base(&self) -> &Frame<T> {
        &self.base
    }

    pub fn direction(&self) -> &Matrix<T> {
        &self.direction
    }

    /// Same base, direction scaled by `s` (still tangent).
    pub fn scaled(&self, s: T) -> Self {
        Self {
            base: self.base.clone(),
            direction: self.direction.scale(s),
        }
    }
}

/// Haar-distributed frame: the `Q` factor of a Gaussian `d×k` matrix.
pub fn haar_frame<T: Real>(d: usize, k: usize, rng: &mut RngState) -> Result<Frame<T>> {
    if k == 0 || k > d {
        return Err(Error::dims(format!("1 <= k <= d = {d}"), k));
    }
    // Rank deficiency has probability zero; allow a single redraw.
    match Frame::orthonormalize(&gaussian_matrix(d, k, rng)) {
        Err(Error::RankDeficient { .. }) => Frame::orthonormalize(&gaussian_matrix(d, k, rng)),
        other => other,
    }
}

fn check_same_ambient<T: Real>(a: &Frame<T>, b: &Frame<T>) -> Result<()> {
    if a.d() != b.d() {
        return Err(Error::dims(format!("d = {}", a.d()), format!("d = {}", b.d())));
    }
    Ok(())
}

/// `‖aᵀb‖_F²`, in `[0, min(k_a, k_b)]`.
pub fn overlap<T: Real>(a: &Frame<T>, b: &Frame<T>) -> Result<T> {
    check_same_ambient(a, b)?;
    Ok(a.basis().t_matmul(b.basis()).frobenius_sq())
}

/// Projection distance `sqrt(k − ‖aᵀb‖_F²)`, evaluated as the residual
/// `‖b − a·aᵀb‖_F` so that it stays accurate near zero.
pub fn grassmann_distance<T: Real>(a: &Frame<T>, b: &Frame<T>) -> Result<T> {
    check_same_ambient(a, b)?;
    if a.k() != b.k() {
        return Err(Error::dims(format!("k = {}", a.k()), format!("k = {}", b.k())));
    }
    let inner = a.basis().t_matmul(b.basis());
    Ok(b.basis().sub(&a.basis().matmul(&inner)).frobenius())
}

/// Routing affinity `‖Uᵀx‖²` at `O(dk)` cost.
pub fn affinity<T: Real>(f: &Frame<T>, x: &[T]) -> Result<T> {
    if x.len() != f.d() {
        return Err(Error::dims(format!("len {}", f.d()), x.len()));
    }
    Ok(affinity_unchecked(f.basis(), x))
}

/// `‖Mᵀx‖²` for any matrix `M` (no orthonormality or shape checks).
pub(crate) fn affinity_unchecked<T: Real>(m: &Matrix<T>, x: &[T]) -> T {
    m.t_matvec(x).iter().map(|&v| v * v).sum()
}

/// Euclidean-metric projection onto the tangent space at `f`:
/// `ξ = G − U·sym(UᵀG)`.
pub fn tangent_project<T: Real>(f: &Frame<T>, g: &Matrix<T>) -> Result<Tangent<T>> {
    if g.shape() != f.basis().shape() {
        return Err(Error::dims(
            format!("{:?}", f.basis().shape()),
            format!("{:?}", g.shape()),
        ));
    }
    let s = f.basis().t_matmul(g).sym();
    let direction = g.sub(&f.basis().matmul(&s));
    Ok(Tangent {
        base: f.clone(),
        direction,
    })
}

/// QR retraction: `qf(U + ξ)` with a positive `R` diagonal. A zero direction
/// returns the base frame unchanged.
pub fn retract<T: Real>(t: &Tangent<T>) -> Result<Frame<T>> {
    if t.direction.is_zero() {
        return Ok(t.base.clone());
    }
    Frame::orthonormalize(&t.base.basis().add(&t.direction))
}

/// `‖sym(Uᵀξ)‖_F`, zero for an exact tangent vector.
pub fn tangency_defect<T: Real>(f: &Frame<T>, direction: &Matrix<T>) -> T {
    f.basis().t_matmul(direction).sym().frobenius()
}
