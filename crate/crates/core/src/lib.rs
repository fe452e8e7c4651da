//! Spectral laboratory for Langevin samplers on diagonalisable Gaussian
//! models: truncated spectral operators, a linear Gaussian inverse problem,
//! preconditioned Langevin simulation, posterior concentration certificates
//! and Laplace approximation diagnostics.
//!
//! All numerics are generic over [`Real`] (`f32` or `f64`); the aliases at the
//! crate root fix the scalar to `f64`.

pub mod audit;
pub mod certificates;
pub mod drift;
pub mod error;
pub mod langevin;
pub mod laplace;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod spectral;
pub mod stats;

pub use audit::{audit_assumptions, audit_drift, AuditEntry, AuditReport, AuditStatus};
pub use certificates::{
    check_w3, strong_radius, validate_certificate, weak_fixed_point, Certificate, CertificateKind,
    ScalarFn, StrongRateInputs, WeakRateInputs,
};
pub use drift::{Drift, LinearGaussianDrift, Linearity, QuarticPerturbedDrift};
pub use error::{Error, Result};
pub use langevin::{
    simulate, simulate_ensemble, stationary_check, stationary_check_from, tail_mass_estimate,
    with_threads, DistanceReport, InitialState, MomentTrace, Sampler, Scheme, SimConfig,
};
pub use laplace::{
    bvm_audit, cameron_martin_shift_check, feldman_hajek_check, h_bound, k_bound, kl_commuting_gaussians,
    kl_estimate, laplace_covariance, laplace_pair, BoundInputs, EquivalenceReport, LaplacePair, QuarticPosterior,
    Verdict,
};
pub use model::{
    compute_map, coercivity, eval_empirical_loglik, exact_posterior, model_constants,
    om_functional, synthesize_data, ModelConstants, ModelInstance, NoiseMode, ThetaStarPreset,
};
pub use rng::{Domain, NormalStream};
pub use scalar::Real;
pub use spectral::{
    cameron_martin_norm, fernique_check, op_norm, sample_gaussian, sample_gaussian_many, trace,
    DecayLaw, DiagonalOperator, GaussianSpec, SpectralVector, TailEstimate, DEFAULT_DIM,
};

pub type Vector = SpectralVector<f64>;
pub type Operator = DiagonalOperator<f64>;
pub type Gaussian = GaussianSpec<f64>;
pub type Model = ModelInstance<f64>;
pub type Law = DecayLaw<f64>;

pub type VectorF32 = SpectralVector<f32>;
pub type OperatorF32 = DiagonalOperator<f32>;
pub type ModelF32 = ModelInstance<f32>;
