//! Grassmannian mixture-of-experts routing.
//!
//! Experts are subspaces of the token space, represented by orthonormal
//! frames; tokens are routed by Bingham concentration gating, a softmax over
//! `α·κ_e·‖U_eᵀx‖²` with a global sparsity dial `α`. The crate also carries
//! the machinery needed to train and audit such routers: Riemannian Adam with
//! QR retraction, the subspace-overlap regularizer, computable entropy/top-k/
//! load-balance bounds, the Bingham normalizing constant, and a synthetic
//! routing benchmark with baseline routers.
//!
//! The numeric core is generic over [`Real`] (`f32`/`f64`); the aliases at
//! the crate root fix the scalar to `f64`, which is what the training and
//! benchmark code uses.

pub mod bounds;
pub mod error;
pub mod gating;
pub mod linalg;
pub mod manifold;
pub mod normalizer;
pub mod report;
pub mod scalar;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use linalg::RngState;
pub use scalar::Real;

pub type Matrix = linalg::Matrix<f64>;
pub type Frame = manifold::Frame<f64>;
pub type Tangent = manifold::Tangent<f64>;
pub type ExpertBank = gating::ExpertBank<f64>;
pub type Amortizer = gating::Amortizer<f64>;
pub type RoutingDistribution = gating::RoutingDistribution<f64>;
pub type ConcentrationStats = bounds::ConcentrationStats<f64>;
pub type BoundReport = bounds::BoundReport<f64>;
pub type ZQuery = normalizer::ZQuery<f64>;
