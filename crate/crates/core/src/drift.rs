//! Drift of the preconditioned Langevin equation
//!
//! `d theta = [-theta/n - (1/n) Q grad V(theta) + Q grad F_n(theta)] dt + sqrt(2/n) dW^Q`.
//!
//! A drift is split per mode into a diagonal linear part `-(1/n + k_m) theta_m`
//! and a remainder; the linear part is what the exact and semi-implicit
//! integrators treat specially.

use crate::model::ModelInstance;
use crate::scalar::{lit, Real};
use crate::spectral::{DiagonalOperator, SpectralVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Linearity {
    /// Both gradients are affine in `theta`.
    Linear,
    General,
}

pub trait Drift<T: Real>: Send + Sync {
    /// Prior covariance `Q`; sets the noise covariance and the basis.
    fn q(&self) -> &DiagonalOperator<T>;

    /// Sample size `n` in the drift and noise scaling.
    fn n(&self) -> T;

    fn theta_star(&self) -> &SpectralVector<T>;

    /// `Q grad F_n(theta)`.
    fn likelihood_grad(&self, theta: &[T], out: &mut [T]);

    /// `Q grad V(theta)`.
    fn prior_grad(&self, theta: &[T], out: &mut [T]);

    /// `Q grad F(theta)` of the population log-likelihood.
    fn population_grad(&self, theta: &[T], out: &mut [T]);

    fn linearity(&self) -> Linearity;

    /// Diagonal slopes `s_m` of the affine part of
    /// `Q grad F_n - (1/n) Q grad V`; for a linear drift these are exact.
    fn linear_slope(&self) -> &[T];

    fn dim(&self) -> usize {
        self.q().dim()
    }

    /// Full drift into `out`; `scratch` has the same length.
    fn drift(&self, theta: &[T], out: &mut [T], scratch: &mut [T]) {
        let inv_n = self.n().recip();
        self.likelihood_grad(theta, out);
        self.prior_grad(theta, scratch);
        for ((o, &p), &th) in out.iter_mut().zip(scratch.iter()).zip(theta) {
            *o = *o - inv_n * p - inv_n * th;
        }
    }

    /// Per-mode relaxation rates `1/n - s_m` of the linear part.
    fn rates(&self) -> Vec<T> {
        let inv_n = self.n().recip();
        self.linear_slope().iter().map(|&s| inv_n - s).collect()
    }
}

/// `Q grad F_n(theta) = -QA theta + Q d` with `V = 0`.
#[derive(Debug, Clone)]
pub struct LinearGaussianDrift<T> {
    model: ModelInstance<T>,
    slope: Vec<T>,
    intercept: Vec<T>,
}

impl<T: Real> LinearGaussianDrift<T> {
    pub fn new(model: &ModelInstance<T>) -> Self {
        let slope = model.qa_eigs().into_iter().map(|x| -x).collect();
        let intercept = model
            .q()
            .eigs()
            .iter()
            .zip(model.data_coeffs().coeffs())
            .map(|(&mu, &d)| mu * d)
            .collect();
        Self {
            model: model.clone(),
            slope,
            intercept,
        }
    }

    pub fn model(&self) -> &ModelInstance<T> {
        &self.model
    }
}

impl<T: Real> Drift<T> for LinearGaussianDrift<T> {
    fn q(&self) -> &DiagonalOperator<T> {
        self.model.q()
    }
    fn n(&self) -> T {
        self.model.n_real()
    }
    fn theta_star(&self) -> &SpectralVector<T> {
        self.model.theta_star()
    }
    fn likelihood_grad(&self, theta: &[T], out: &mut [T]) {
        for (((o, &s), &b), &th) in out.iter_mut().zip(&self.slope).zip(&self.intercept).zip(theta) {
            *o = s * th + b;
        }
    }
    fn prior_grad(&self, _theta: &[T], out: &mut [T]) {
        out.fill(T::zero());
    }
    fn population_grad(&self, theta: &[T], out: &mut [T]) {
        for (((o, &s), &ts), &th) in out
            .iter_mut()
            .zip(&self.slope)
            .zip(self.model.theta_star().coeffs())
            .zip(theta)
        {
            *o = s * (th - ts);
        }
    }
    fn linearity(&self) -> Linearity {
        Linearity::Linear
    }
    fn linear_slope(&self) -> &[T] {
        &self.slope
    }
}

/// Linear Gaussian log-likelihood plus a separable quartic well centred at
/// `theta*`: `F_n -= (kappa/4) sum_m (theta_m - theta*_m)^4`. The drift gains
/// the cubic term `-kappa mu_m (theta_m - theta*_m)^3`.
///
/// The posterior still factorises over modes, so its normalised density is
/// available by one-dimensional quadrature; the Hessian of `F` is no longer
/// constant.
#[derive(Debug, Clone)]
pub struct QuarticPerturbedDrift<T> {
    base: LinearGaussianDrift<T>,
    kappa: T,
}

impl<T: Real> QuarticPerturbedDrift<T> {
    pub fn new(model: &ModelInstance<T>, kappa: T) -> Self {
        Self {
            base: LinearGaussianDrift::new(model),
            kappa,
        }
    }

    pub fn model(&self) -> &ModelInstance<T> {
        self.base.model()
    }

    pub fn kappa(&self) -> T {
        self.kappa
    }

    fn cubic(&self, theta: &[T], out: &mut [T]) {
        for (((o, &mu), &ts), &th) in out
            .iter_mut()
            .zip(self.q().eigs())
            .zip(self.theta_star().coeffs())
            .zip(theta)
        {
            let h = th - ts;
            *o = *o - self.kappa * mu * h * h * h;
        }
    }

    /// Unnormalised log posterior density of mode `m` (zero-based) at `x`:
    /// `n F_n,m(x) - x^2 / (2 mu_m)`.
    pub fn mode_log_posterior(&self, m: usize, x: T) -> T {
        let model = self.model();
        let half = lit::<T>(0.5);
        let mu = model.q().eigs()[m];
        let la = model.info_a().eigs()[m];
        let d = model.data_coeffs().coeffs()[m];
        let h = x - model.theta_star().coeffs()[m];
        let h2 = h * h;
        model.n_real() * (-half * la * x * x + d * x - lit::<T>(0.25) * self.kappa * h2 * h2)
            - half * x * x / mu
    }

    /// Negative second derivative of `F_n` in mode `m` at `x`.
    pub fn mode_information(&self, m: usize, x: T) -> T {
        let model = self.model();
        let h = x - model.theta_star().coeffs()[m];
        model.info_a().eigs()[m] + lit::<T>(3.0) * self.kappa * h * h
    }
}

impl<T: Real> Drift<T> for QuarticPerturbedDrift<T> {
    fn q(&self) -> &DiagonalOperator<T> {
        self.base.q()
    }
    fn n(&self) -> T {
        self.base.n()
    }
    fn theta_star(&self) -> &SpectralVector<T> {
        self.base.theta_star()
    }
    fn likelihood_grad(&self, theta: &[T], out: &mut [T]) {
        self.base.likelihood_grad(theta, out);
        self.cubic(theta, out);
    }
    fn prior_grad(&self, theta: &[T], out: &mut [T]) {
        self.base.prior_grad(theta, out);
    }
    fn population_grad(&self, theta: &[T], out: &mut [T]) {
        self.base.population_grad(theta, out);
        self.cubic(theta, out);
    }
    fn linearity(&self) -> Linearity {
        if self.kappa == T::zero() {
            Linearity::Linear
        } else {
            Linearity::General
        }
    }
    fn linear_slope(&self) -> &[T] {
        self.base.linear_slope()
    }
}
