//! Finite spectral truncation of a separable Hilbert space.
//!
//! Every object lives in one fixed orthonormal eigenbasis `e_1, .., e_M`:
//! vectors are coefficient sequences and operators are eigenvalue sequences.
//! Operators that would not commute with the basis cannot be expressed, which
//! is how simultaneous diagonalisation is enforced.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::rng::{Domain, NormalStream};
use crate::scalar::{lit, to_f64, Real};

/// Default truncation level.
pub const DEFAULT_DIM: usize = 256;

/// Coefficients of a Hilbert-space element in the shared eigenbasis.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralVector<T> {
    coeffs: Vec<T>,
}

impl<T: Real> SpectralVector<T> {
    pub fn new(coeffs: Vec<T>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::Empty {
                what: "coefficient list",
            });
        }
        if let Some(m) = coeffs.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("vector coefficient {}", m + 1),
            });
        }
        Ok(Self { coeffs })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            coeffs: vec![T::zero(); dim.max(1)],
        }
    }

    /// `value * e_mode` with a zero-based `mode`.
    pub fn basis(dim: usize, mode: usize, value: T) -> Self {
        let mut v = Self::zeros(dim);
        v.coeffs[mode] = value;
        v
    }

    /// Coefficients `c_m` generated by a decay law, `m = 1..=dim`.
    pub fn from_law(law: &DecayLaw<T>, dim: usize) -> Result<Self> {
        Self::new(law.materialize(dim)?)
    }

    pub fn dim(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs(&self) -> &[T] {
        &self.coeffs
    }

    pub fn into_inner(self) -> Vec<T> {
        self.coeffs
    }

    pub fn norm_sq(&self) -> T {
        self.coeffs.iter().map(|&c| c * c).sum()
    }

    pub fn norm(&self) -> T {
        self.norm_sq().sqrt()
    }

    pub fn dot(&self, other: &Self) -> T {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn distance(&self, other: &Self) -> T {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            .sqrt()
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            coeffs: self.coeffs.iter().map(|&c| c * s).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.dim(), other.dim());
        Self {
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub(crate) fn check_dim(&self, dim: usize, context: &'static str) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::DimensionMismatch {
                left: self.dim(),
                right: dim,
                context,
            });
        }
        Ok(())
    }
}

/// How an eigenvalue (or coefficient) sequence is generated.
///
/// Serialises as `{kind = "power", scale, exponent}` or
/// `{kind = "explicit", values = [..]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DecayLaw<T> {
    /// `scale * m^(-exponent)` for `m = 1, 2, ..`. A negative exponent
    /// describes a growing sequence, e.g. the eigenvalues of an unbounded
    /// information operator.
    Power { scale: T, exponent: T },
    Explicit { values: Vec<T> },
}

impl<T: Real> DecayLaw<T> {
    pub fn power(scale: T, exponent: T) -> Self {
        Self::Power { scale, exponent }
    }

    pub fn explicit(values: Vec<T>) -> Self {
        Self::Explicit { values }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Power { scale, exponent } => {
                if !(scale.is_finite() && *scale > T::zero()) {
                    return Err(Error::InvalidParameter {
                        name: "scale",
                        reason: format!("power-law scale must be finite and > 0, got {scale}"),
                    });
                }
                ensure_finite(*exponent, "power-law exponent")?;
                Ok(())
            }
            Self::Explicit { values } => {
                if values.is_empty() {
                    return Err(Error::Empty {
                        what: "eigenvalue list",
                    });
                }
                if let Some(m) = values.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        context: format!("explicit value {}", m + 1),
                    });
                }
                Ok(())
            }
        }
    }

    /// `(scale, exponent)` of a power law.
    pub fn power_params(&self) -> Option<(T, T)> {
        match *self {
            Self::Power { scale, exponent } => Some((scale, exponent)),
            Self::Explicit { .. } => None,
        }
    }

    /// Element `m` (one-based) of a power law.
    pub fn power_at(scale: T, exponent: T, m: usize) -> T {
        scale * T::from_usize(m).unwrap().powf(-exponent)
    }

    pub fn materialize(&self, dim: usize) -> Result<Vec<T>> {
        self.validate()?;
        match self {
            Self::Power { scale, exponent } => {
                if dim == 0 {
                    return Err(Error::Empty {
                        what: "eigenvalue list",
                    });
                }
                let v: Vec<T> = (1..=dim)
                    .map(|m| Self::power_at(*scale, *exponent, m))
                    .collect();
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Overflow {
                        context: "power-law eigenvalues",
                    });
                }
                Ok(v)
            }
            Self::Explicit { values } => {
                if values.len() != dim {
                    return Err(Error::DimensionMismatch {
                        left: values.len(),
                        right: dim,
                        context: "explicit law length vs truncation level",
                    });
                }
                Ok(values.clone())
            }
        }
    }
}

/// Sign class of an eigenvalue sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositivityClass {
    StrictlyPositive,
    Nonnegative,
    Indefinite,
}

impl PositivityClass {
    pub fn classify<T: Real>(eigs: &[T]) -> Self {
        if eigs.iter().all(|&e| e > T::zero()) {
            Self::StrictlyPositive
        } else if eigs.iter().all(|&e| e >= T::zero()) {
            Self::Nonnegative
        } else {
            Self::Indefinite
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::StrictlyPositive => "strictly-positive",
            Self::Nonnegative => "nonnegative",
            Self::Indefinite => "indefinite",
        }
    }
}

/// Self-adjoint operator diagonal in the shared eigenbasis.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalOperator<T> {
    eigs: Vec<T>,
    decay: DecayLaw<T>,
    positivity: PositivityClass,
}

/// Analytic remainder of an infinite eigenvalue sum beyond the truncation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TailEstimate<T> {
    /// Upper bound on the neglected tail.
    Bound(T),
    /// The infinite sum diverges.
    Divergent,
    /// No decay law to extrapolate from.
    Unavailable,
}

impl<T: Real> TailEstimate<T> {
    /// Tail of `sum_{m > dim} scale * m^(-exponent)`, bounded by the integral
    /// `scale * int_dim^inf x^(-exponent) dx` for a decreasing summand.
    pub fn power_sum(scale: T, exponent: T, dim: usize) -> Self {
        if exponent <= T::one() {
            return Self::Divergent;
        }
        let m = T::from_usize(dim).unwrap();
        Self::Bound(scale * m.powf(T::one() - exponent) / (exponent - T::one()))
    }

    pub fn bound(&self) -> Option<T> {
        match *self {
            Self::Bound(b) => Some(b),
            _ => None,
        }
    }

    pub fn is_divergent(&self) -> bool {
        matches!(self, Self::Divergent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceReport<T> {
    pub value: T,
    pub tail_estimate: TailEstimate<T>,
}

impl<T: Real> DiagonalOperator<T> {
    pub fn from_law(law: DecayLaw<T>, dim: usize) -> Result<Self> {
        let eigs = law.materialize(dim)?;
        let positivity = PositivityClass::classify(&eigs);
        Ok(Self {
            eigs,
            decay: law,
            positivity,
        })
    }

    pub fn explicit(values: Vec<T>) -> Result<Self> {
        let dim = values.len();
        Self::from_law(DecayLaw::Explicit { values }, dim)
    }

    pub fn power(scale: T, exponent: T, dim: usize) -> Result<Self> {
        Self::from_law(DecayLaw::Power { scale, exponent }, dim)
    }

    pub fn dim(&self) -> usize {
        self.eigs.len()
    }

    pub fn eigs(&self) -> &[T] {
        &self.eigs
    }

    pub fn decay(&self) -> &DecayLaw<T> {
        &self.decay
    }

    pub fn positivity(&self) -> PositivityClass {
        self.positivity
    }

    pub fn require(
        &self,
        required: PositivityClass,
        context: &'static str,
    ) -> Result<&Self> {
        let ok = match required {
            PositivityClass::StrictlyPositive => {
                self.positivity == PositivityClass::StrictlyPositive
            }
            PositivityClass::Nonnegative => self.positivity != PositivityClass::Indefinite,
            PositivityClass::Indefinite => true,
        };
        if ok {
            Ok(self)
        } else {
            Err(Error::Positivity {
                found: self.positivity.name(),
                required: required.name(),
                context,
            })
        }
    }

    pub(crate) fn check_dim(&self, dim: usize, context: &'static str) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::DimensionMismatch {
                left: self.dim(),
                right: dim,
                context,
            });
        }
        Ok(())
    }

    /// Sum of eigenvalues over the truncation plus the power-law tail.
    pub fn trace(&self) -> Result<TraceReport<T>> {
        self.require(PositivityClass::Nonnegative, "trace of a covariance")?;
        let value = ensure_finite(self.eigs.iter().copied().sum(), "trace")?;
        let tail_estimate = match self.decay.power_params() {
            Some((scale, exponent)) => TailEstimate::power_sum(scale, exponent, self.dim()),
            None => TailEstimate::Unavailable,
        };
        Ok(TraceReport {
            value,
            tail_estimate,
        })
    }

    /// `max_m |eig_m|`.
    pub fn op_norm(&self) -> T {
        self.eigs
            .iter()
            .fold(T::zero(), |acc, &e| acc.max(e.abs()))
    }

    pub fn min_eig(&self) -> T {
        self.eigs.iter().copied().fold(T::infinity(), T::min)
    }

    /// Operator with eigenvalues `f(self_m, other_m)`; the result carries an
    /// explicit law.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        other.check_dim(self.dim(), "operator composition")?;
        let eigs: Vec<T> = self
            .eigs
            .iter()
            .zip(&other.eigs)
            .map(|(&a, &b)| f(a, b))
            .collect();
        if eigs.iter().any(|e| !e.is_finite()) {
            return Err(Error::Overflow {
                context: "operator composition",
            });
        }
        Self::explicit(eigs)
    }

    /// `self * v`.
    pub fn apply(&self, v: &SpectralVector<T>) -> SpectralVector<T> {
        SpectralVector {
            coeffs: self
                .eigs
                .iter()
                .zip(v.coeffs())
                .map(|(&e, &c)| e * c)
                .collect(),
        }
    }
}

/// Free-function form of [`DiagonalOperator::trace`].
pub fn trace<T: Real>(op: &DiagonalOperator<T>) -> Result<TraceReport<T>> {
    op.trace()
}

/// Free-function form of [`DiagonalOperator::op_norm`].
pub fn op_norm<T: Real>(op: &DiagonalOperator<T>) -> T {
    op.op_norm()
}

/// `||Q^{-1/2} v||`.
pub fn cameron_martin_norm<T: Real>(v: &SpectralVector<T>, q: &DiagonalOperator<T>) -> Result<T> {
    q.require(PositivityClass::Nonnegative, "Cameron-Martin norm")?;
    v.check_dim(q.dim(), "Cameron-Martin norm")?;
    let mut acc = T::zero();
    for (m, (&c, &mu)) in v.coeffs().iter().zip(q.eigs()).enumerate() {
        if mu == T::zero() {
            if c != T::zero() {
                return Err(Error::NotInCameronMartin {
                    mode: m + 1,
                    value: to_f64(c),
                });
            }
            continue;
        }
        acc = acc + c * c / mu;
    }
    if !acc.is_finite() {
        return Err(Error::Overflow {
            context: "Cameron-Martin norm",
        });
    }
    Ok(acc.sqrt())
}

/// Gaussian measure with diagonal covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec<T> {
    mean: SpectralVector<T>,
    cov: DiagonalOperator<T>,
}

impl<T: Real> GaussianSpec<T> {
    pub fn new(mean: SpectralVector<T>, cov: DiagonalOperator<T>) -> Result<Self> {
        cov.require(PositivityClass::StrictlyPositive, "Gaussian covariance")?;
        mean.check_dim(cov.dim(), "Gaussian mean vs covariance")?;
        let tr = cov.trace()?.value;
        if !(tr > T::zero()) {
            return Err(Error::InvalidParameter {
                name: "cov",
                reason: "covariance trace must be positive".into(),
            });
        }
        Ok(Self { mean, cov })
    }

    pub fn centered(cov: DiagonalOperator<T>) -> Result<Self> {
        let dim = cov.dim();
        Self::new(SpectralVector::zeros(dim), cov)
    }

    pub fn mean(&self) -> &SpectralVector<T> {
        &self.mean
    }

    pub fn cov(&self) -> &DiagonalOperator<T> {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.dim()
    }

    /// Draw for one replica of a sampling run.
    pub fn sample_replica(&self, seed: u64, replica: u64) -> SpectralVector<T> {
        let mut stream = NormalStream::new(seed, Domain::Sample, replica, self.dim());
        self.sample_with(&mut stream)
    }

    pub(crate) fn sample_with(&self, stream: &mut NormalStream) -> SpectralVector<T> {
        let coeffs = self
            .mean
            .coeffs()
            .iter()
            .zip(self.cov.eigs())
            .map(|(&m, &var)| m + var.sqrt() * lit::<T>(stream.next_normal()))
            .collect();
        SpectralVector { coeffs }
    }

    /// Log density of mode `m` (zero-based) at `x`.
    pub fn mode_log_density(&self, m: usize, x: T) -> T {
        let var = self.cov.eigs()[m];
        let d = x - self.mean.coeffs()[m];
        -(d * d) / (lit::<T>(2.0) * var) - lit::<T>(0.5) * (T::TAU() * var).ln()
    }
}

/// `mean + cov^{1/2} z`, deterministic in `seed`.
pub fn sample_gaussian<T: Real>(spec: &GaussianSpec<T>, seed: u64) -> SpectralVector<T> {
    spec.sample_replica(seed, 0)
}

/// `n` independent draws, replica `i` keyed by `(seed, i)`.
pub fn sample_gaussian_many<T: Real>(
    spec: &GaussianSpec<T>,
    seed: u64,
    n: usize,
) -> Vec<SpectralVector<T>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| spec.sample_replica(seed, i))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FerniqueReport<T> {
    /// Monte Carlo estimate of `E exp(alpha ||x||^2)`.
    pub finite_estimate: T,
    pub std_error: T,
    /// `1 / (2 ||cov||_op)`.
    pub alpha_bound: T,
    /// `alpha < alpha_bound`; otherwise the top mode's integral diverges.
    pub finite: bool,
    /// Product of the per-mode closed forms when finite.
    pub closed_form: Option<T>,
}

/// Exponential square-norm moment of a Gaussian, estimated and in closed form.
pub fn fernique_check<T: Real>(
    spec: &GaussianSpec<T>,
    alpha: T,
    n_samples: usize,
    seed: u64,
) -> Result<FerniqueReport<T>> {
    if !(alpha > T::zero()) {
        return Err(Error::InvalidParameter {
            name: "alpha",
            reason: format!("must be > 0, got {alpha}"),
        });
    }
    if n_samples == 0 {
        return Err(Error::InvalidParameter {
            name: "n_samples",
            reason: "must be positive".into(),
        });
    }
    let two = lit::<T>(2.0);
    let alpha_bound = T::one() / (two * spec.cov().op_norm());
    let finite = alpha < alpha_bound;

    let closed_form = finite.then(|| {
        let log: T = spec
            .cov()
            .eigs()
            .iter()
            .zip(spec.mean().coeffs())
            .map(|(&var, &m)| {
                let s = T::one() - two * alpha * var;
                -lit::<T>(0.5) * s.ln() + alpha * m * m / s
            })
            .sum();
        log.exp()
    });

    let dim = spec.dim();
    let values: Vec<f64> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut stream = NormalStream::new(seed, Domain::Fernique, i, dim);
            let x = spec.sample_with(&mut stream);
            to_f64((alpha * x.norm_sq()).exp())
        })
        .collect();
    let (mean, var) = crate::stats::mean_var(&values);
    Ok(FerniqueReport {
        finite_estimate: lit(mean),
        std_error: lit((var / n_samples as f64).sqrt()),
        alpha_bound,
        finite,
        closed_form,
    })
}
