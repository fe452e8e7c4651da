//! Linear Gaussian white-noise experiment `X_i = G theta* + eps_i`.
//!
//! `G` and `Gamma` never appear: the model is parameterised by the prior
//! covariance `Q` (eigenvalues `mu_m`) and the information operator
//! `A = G* Gamma^{-1} G` (eigenvalues `lambda_m`), both diagonal in the
//! shared basis. The data enter only through the coefficients of
//! `G* Gamma^{-1} Xbar_n`, which are `lambda_m theta*_m + Z_m / (sqrt(n) mu_m)`
//! with `Z ~ N(0, QAQ)`.
//!
//! Log-likelihoods drop the additive constant `-1/2 ||Gamma^{-1/2} Xbar_n||^2`;
//! every downstream quantity uses gradients or differences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Domain, NormalStream};
use crate::scalar::{lit, to_f64, Real};
use crate::spectral::{
    cameron_martin_norm, DecayLaw, DiagonalOperator, GaussianSpec, PositivityClass, SpectralVector,
};

/// How the whitened data fluctuation is generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// `Z ~ N(0, QAQ)` drawn from the noise seed.
    Sampled,
    /// `Z = 0`: the noiseless forward map.
    Zero,
}

/// Choice of the true parameter inside the Cameron-Martin space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThetaStarPreset {
    /// `theta*_m proportional to m^(-s)`, scaled to Cameron-Martin norm `cm_norm`.
    Smooth {
        s: f64,
        #[serde(default = "one")]
        cm_norm: f64,
    },
    /// `value * e_mode` (one-based mode).
    Spike { mode: usize, value: f64 },
    List { values: Vec<f64> },
}

fn one() -> f64 {
    1.0
}

impl ThetaStarPreset {
    pub fn build<T: Real>(&self, q: &DiagonalOperator<T>) -> Result<SpectralVector<T>> {
        let dim = q.dim();
        let v = match self {
            Self::Smooth { s, cm_norm } => {
                if !(cm_norm.is_finite() && *cm_norm >= 0.0) {
                    return Err(Error::InvalidParameter {
                        name: "cm_norm",
                        reason: format!("must be finite and >= 0, got {cm_norm}"),
                    });
                }
                let raw = SpectralVector::from_law(&DecayLaw::power(T::one(), lit(*s)), dim)?;
                let norm = cameron_martin_norm(&raw, q)?;
                raw.scale(lit::<T>(*cm_norm) / norm)
            }
            Self::Spike { mode, value } => {
                if *mode == 0 || *mode > dim {
                    return Err(Error::InvalidParameter {
                        name: "mode",
                        reason: format!("spike mode must lie in 1..={dim}, got {mode}"),
                    });
                }
                SpectralVector::basis(dim, mode - 1, lit(*value))
            }
            Self::List { values } => {
                SpectralVector::new(values.iter().map(|&x| lit::<T>(x)).collect())?
            }
        };
        v.check_dim(dim, "theta* vs prior covariance")?;
        cameron_martin_norm(&v, q)?;
        Ok(v)
    }
}

/// One realisation of the linear Gaussian experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInstance<T> {
    q: DiagonalOperator<T>,
    a: DiagonalOperator<T>,
    theta_star: SpectralVector<T>,
    n: u64,
    data_coeffs: SpectralVector<T>,
    fluctuation: SpectralVector<T>,
    qaq_trace: T,
    qaq_opnorm: T,
    noise: NoiseMode,
}

impl<T: Real> ModelInstance<T> {
    pub fn q(&self) -> &DiagonalOperator<T> {
        &self.q
    }
    /// Information operator `A`.
    pub fn info_a(&self) -> &DiagonalOperator<T> {
        &self.a
    }
    pub fn theta_star(&self) -> &SpectralVector<T> {
        &self.theta_star
    }
    pub fn n(&self) -> u64 {
        self.n
    }
    pub fn n_real(&self) -> T {
        T::from_u64(self.n).unwrap()
    }
    pub fn dim(&self) -> usize {
        self.q.dim()
    }
    /// Coefficients of `G* Gamma^{-1} Xbar_n`.
    pub fn data_coeffs(&self) -> &SpectralVector<T> {
        &self.data_coeffs
    }
    /// Whitened fluctuation `Z = Q G* Gamma^{-1} xi ~ N(0, QAQ)`.
    pub fn fluctuation(&self) -> &SpectralVector<T> {
        &self.fluctuation
    }
    pub fn qaq_trace(&self) -> T {
        self.qaq_trace
    }
    pub fn qaq_opnorm(&self) -> T {
        self.qaq_opnorm
    }
    pub fn noise(&self) -> NoiseMode {
        self.noise
    }

    /// Eigenvalues `mu_m lambda_m` of `QA`.
    pub fn qa_eigs(&self) -> Vec<T> {
        self.q
            .eigs()
            .iter()
            .zip(self.a.eigs())
            .map(|(&mu, &la)| mu * la)
            .collect()
    }

    /// Same experiment with a different sample size and the same `Z`.
    pub fn with_n(&self, n: u64) -> Result<Self> {
        build(
            self.q.clone(),
            self.a.clone(),
            self.theta_star.clone(),
            n,
            self.fluctuation.clone(),
            self.noise,
        )
    }
}

/// Draws the sufficient statistic for `n` observations.
///
/// `Z_m = sqrt(lambda_m) mu_m z_m` with `z_m` the counter-keyed normal of
/// mode `m`, so one seed gives the same `Z` for every `n`.
pub fn synthesize_data<T: Real>(
    q: &DiagonalOperator<T>,
    a: &DiagonalOperator<T>,
    theta_star: &SpectralVector<T>,
    n: u64,
    noise_seed: u64,
    noise: NoiseMode,
) -> Result<ModelInstance<T>> {
    q.require(PositivityClass::StrictlyPositive, "prior covariance Q")?;
    a.check_dim(q.dim(), "information operator vs prior covariance")?;
    let fluctuation = match noise {
        NoiseMode::Zero => SpectralVector::zeros(q.dim()),
        NoiseMode::Sampled => {
            a.require(
                PositivityClass::Nonnegative,
                "information operator A with sampled noise",
            )?;
            let mut stream = NormalStream::new(noise_seed, Domain::DataNoise, 0, q.dim());
            let z = q
                .eigs()
                .iter()
                .zip(a.eigs())
                .map(|(&mu, &la)| la.sqrt() * mu * lit::<T>(stream.next_normal()))
                .collect();
            SpectralVector::new(z).map_err(|_| Error::Overflow {
                context: "whitened noise QAQ",
            })?
        }
    };
    build(q.clone(), a.clone(), theta_star.clone(), n, fluctuation, noise)
}

fn build<T: Real>(
    q: DiagonalOperator<T>,
    a: DiagonalOperator<T>,
    theta_star: SpectralVector<T>,
    n: u64,
    fluctuation: SpectralVector<T>,
    noise: NoiseMode,
) -> Result<ModelInstance<T>> {
    if n == 0 {
        return Err(Error::InvalidParameter {
            name: "n",
            reason: "sample size must be positive".into(),
        });
    }
    theta_star.check_dim(q.dim(), "theta* vs prior covariance")?;
    cameron_martin_norm(&theta_star, &q)?;

    let qaq: Vec<T> = q
        .eigs()
        .iter()
        .zip(a.eigs())
        .map(|(&mu, &la)| la * mu * mu)
        .collect();
    let qaq_trace: T = qaq.iter().copied().sum();
    if !qaq_trace.is_finite() {
        return Err(Error::Overflow {
            context: "trace of QAQ (sum of lambda_m mu_m^2)",
        });
    }
    let qaq_opnorm = qaq.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()));

    let root_n = T::from_u64(n).unwrap().sqrt();
    let data: Vec<T> = q
        .eigs()
        .iter()
        .zip(a.eigs())
        .zip(theta_star.coeffs().iter().zip(fluctuation.coeffs()))
        .map(|((&mu, &la), (&ts, &z))| la * ts + z / (root_n * mu))
        .collect();
    let data_coeffs = SpectralVector::new(data).map_err(|_| Error::Overflow {
        context: "data coefficients",
    })?;

    Ok(ModelInstance {
        q,
        a,
        theta_star,
        n,
        data_coeffs,
        fluctuation,
        qaq_trace,
        qaq_opnorm,
        noise,
    })
}

/// Empirical log-likelihood with its preconditioned derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodEval<T> {
    /// `F_n(theta)` up to the dropped additive constant.
    pub value: T,
    /// Coefficients of `Q grad F_n(theta)`.
    pub gradient_precond: SpectralVector<T>,
    /// `-QA`, constant in `theta`.
    pub hessian_precond: DiagonalOperator<T>,
}

pub fn eval_empirical_loglik<T: Real>(
    m: &ModelInstance<T>,
    theta: &SpectralVector<T>,
) -> Result<LikelihoodEval<T>> {
    theta.check_dim(m.dim(), "theta vs model")?;
    let half = lit::<T>(0.5);
    let mut value = T::zero();
    let mut grad = Vec::with_capacity(m.dim());
    for (((&mu, &la), &d), &th) in m
        .q
        .eigs()
        .iter()
        .zip(m.a.eigs())
        .zip(m.data_coeffs.coeffs())
        .zip(theta.coeffs())
    {
        value = value - half * la * th * th + d * th;
        grad.push(-mu * la * th + mu * d);
    }
    let hess = m.qa_eigs().into_iter().map(|x| -x).collect();
    Ok(LikelihoodEval {
        value,
        gradient_precond: SpectralVector::new(grad)?,
        hessian_precond: DiagonalOperator::explicit(hess)?,
    })
}

/// Conjugate posterior `N((Q^{-1} + nA)^{-1} n d, (Q^{-1} + nA)^{-1})`,
/// computed as a precision update.
pub fn exact_posterior<T: Real>(m: &ModelInstance<T>) -> Result<GaussianSpec<T>> {
    let n = m.n_real();
    let mut cov = Vec::with_capacity(m.dim());
    let mut mean = Vec::with_capacity(m.dim());
    for (k, ((&mu, &la), &d)) in m
        .q
        .eigs()
        .iter()
        .zip(m.a.eigs())
        .zip(m.data_coeffs.coeffs())
        .enumerate()
    {
        let precision = mu.recip() + n * la;
        if !(precision > T::zero()) {
            return Err(Error::NotPositiveDefinite {
                mode: k + 1,
                value: to_f64(precision * mu),
            });
        }
        let var = precision.recip();
        cov.push(var);
        mean.push(var * n * d);
    }
    GaussianSpec::new(SpectralVector::new(mean)?, DiagonalOperator::explicit(cov)?)
}

/// Onsager-Machlup functional `-n F_n(theta) + 1/2 ||theta||^2_{H_Q}` (V = 0).
pub fn om_functional<T: Real>(m: &ModelInstance<T>, theta: &SpectralVector<T>) -> Result<T> {
    let loglik = eval_empirical_loglik(m, theta)?.value;
    Ok(-m.n_real() * loglik + lit::<T>(0.5) * cameron_martin_norm(theta, &m.q)?.powi(2))
}

/// Minimiser of the Onsager-Machlup functional, from the preconditioned
/// stationarity equation `theta + n QA theta = n Q d`.
pub fn compute_map<T: Real>(m: &ModelInstance<T>) -> Result<SpectralVector<T>> {
    let n = m.n_real();
    let mut out = Vec::with_capacity(m.dim());
    for (k, ((&mu, &la), &d)) in m
        .q
        .eigs()
        .iter()
        .zip(m.a.eigs())
        .zip(m.data_coeffs.coeffs())
        .enumerate()
    {
        let denom = T::one() + n * mu * la;
        if !(denom > T::zero()) {
            return Err(Error::NotPositiveDefinite {
                mode: k + 1,
                value: to_f64(denom),
            });
        }
        out.push(n * mu * d / denom);
    }
    SpectralVector::new(out)
}

/// Behaviour of `inf_m mu_m lambda_m` beyond the truncation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoercivityTail {
    /// Both laws are power laws with exponents summing to zero.
    Constant,
    /// `mu_m lambda_m -> 0`: no positive lower bound exists.
    Decaying,
    /// `mu_m lambda_m -> inf`: QA is unbounded.
    Growing,
    /// At least one explicit law; the truncation is taken as the operator.
    Truncation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoercivityReport<T> {
    pub truncated_min: T,
    pub truncated_max: T,
    pub tail: CoercivityTail,
}

impl<T: Real> CoercivityReport<T> {
    pub fn coercive(&self) -> bool {
        self.truncated_min > T::zero()
            && matches!(self.tail, CoercivityTail::Constant | CoercivityTail::Truncation)
    }

    fn failure(&self) -> Option<String> {
        if self.truncated_min <= T::zero() {
            return Some(format!(
                "QA has eigenvalue {} <= 0 on the truncation",
                self.truncated_min
            ));
        }
        match self.tail {
            CoercivityTail::Decaying => {
                Some("non-coercive: mu_m lambda_m -> 0 beyond the truncation".into())
            }
            CoercivityTail::Growing => {
                Some("QA is unbounded: mu_m lambda_m -> infinity beyond the truncation".into())
            }
            _ => None,
        }
    }
}

pub fn coercivity<T: Real>(m: &ModelInstance<T>) -> CoercivityReport<T> {
    let qa = m.qa_eigs();
    let truncated_min = qa.iter().copied().fold(T::infinity(), T::min);
    let truncated_max = qa.iter().copied().fold(T::neg_infinity(), T::max);
    let tail = match (m.q.decay().power_params(), m.a.decay().power_params()) {
        (Some((_, rq)), Some((_, ra))) => {
            let s = rq + ra;
            if s.abs() <= lit(1e-12) {
                CoercivityTail::Constant
            } else if s > T::zero() {
                CoercivityTail::Decaying
            } else {
                CoercivityTail::Growing
            }
        }
        _ => CoercivityTail::Truncation,
    };
    CoercivityReport {
        truncated_min,
        truncated_max,
        tail,
    }
}

/// Constants under which the strong-concavity certificate applies to the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConstants<T> {
    /// `||QA||_op`.
    pub l1: T,
    /// Coercivity constant `c = inf_m mu_m lambda_m`.
    pub mu: T,
    /// Prior-control constant as stated for this model.
    pub b: T,
    /// Tight prior-control constant (`V = 0`).
    pub b_tight: T,
    pub eps1: T,
    /// `n^{-1/2} (sqrt(tr QAQ) + sqrt(2 ||QAQ||_op log(1/delta)))`.
    pub eps2: T,
}

/// Gaussian-concentration `1 - delta` quantile of `||Z||`.
pub fn noise_quantile<T: Real>(qaq_trace: T, qaq_opnorm: T, delta: T) -> T {
    qaq_trace.sqrt() + (lit::<T>(2.0) * qaq_opnorm * delta.recip().ln()).sqrt()
}

pub fn eps2<T: Real>(qaq_trace: T, qaq_opnorm: T, n: T, delta: T) -> T {
    noise_quantile(qaq_trace, qaq_opnorm, delta) / n.sqrt()
}

pub(crate) fn check_delta<T: Real>(delta: T) -> Result<()> {
    if !(delta > T::zero() && delta <= T::one()) {
        return Err(Error::InvalidParameter {
            name: "delta",
            reason: format!("must lie in (0, 1], got {delta}"),
        });
    }
    Ok(())
}

pub fn model_constants<T: Real>(m: &ModelInstance<T>, delta: T) -> Result<ModelConstants<T>> {
    check_delta(delta)?;
    let report = coercivity(m);
    if let Some(reason) = report.failure() {
        return Err(Error::Coercivity { reason });
    }
    Ok(ModelConstants {
        l1: report.truncated_max,
        mu: report.truncated_min,
        b: T::one(),
        b_tight: T::zero(),
        eps1: T::zero(),
        eps2: eps2(m.qaq_trace, m.qaq_opnorm, m.n_real(), delta),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn coercive(dim: usize, n: u64, seed: u64) -> ModelInstance<f64> {
        let q = DiagonalOperator::power(1.0, 2.0, dim).unwrap();
        let a = DiagonalOperator::power(1.0, -2.0, dim).unwrap();
        let ts = ThetaStarPreset::Smooth { s: 2.0, cm_norm: 1.0 }.build(&q).unwrap();
        synthesize_data(&q, &a, &ts, n, seed, NoiseMode::Sampled).unwrap()
    }

    fn single(mu: f64, la: f64, ts: f64, n: u64) -> ModelInstance<f64> {
        let q = DiagonalOperator::explicit(vec![mu]).unwrap();
        let a = DiagonalOperator::explicit(vec![la]).unwrap();
        let t = SpectralVector::new(vec![ts]).unwrap();
        synthesize_data(&q, &a, &t, n, 0, NoiseMode::Zero).unwrap()
    }

    #[test]
    fn noiseless_data_is_forward_map() {
        let q = DiagonalOperator::power(1.0, 2.0, 8).unwrap();
        let a = DiagonalOperator::power(2.0, 1.0, 8).unwrap();
        let ts = ThetaStarPreset::Smooth { s: 1.5, cm_norm: 2.0 }.build(&q).unwrap();
        let m = synthesize_data(&q, &a, &ts, 10, 1, NoiseMode::Zero).unwrap();
        for k in 0..8 {
            assert_eq!(m.data_coeffs().coeffs()[k], a.eigs()[k] * ts.coeffs()[k]);
        }
        assert_relative_eq!(cameron_martin_norm(&ts, &q).unwrap(), 2.0, max_relative = 1e-12);
    }

    #[test]
    fn data_converges_at_root_n_rate() {
        let m_small = coercive(16, 100, 5);
        let m_big = m_small.with_n(10_000).unwrap();
        let target = m_small.info_a().apply(m_small.theta_star());
        let e_small = m_small.data_coeffs().distance(&target);
        let e_big = m_big.data_coeffs().distance(&target);
        // n grows 100-fold: error shrinks 10-fold (halving per quadrupling).
        assert_relative_eq!(e_small / e_big, 10.0, max_relative = 1e-10);
        let m4 = m_small.with_n(400).unwrap();
        assert_relative_eq!(e_small / m4.data_coeffs().distance(&target), 2.0, max_relative = 1e-10);
    }

    #[test]
    fn fluctuation_energy_matches_trace_qaq() {
        let q = DiagonalOperator::power(1.0, 2.0, 64).unwrap();
        let a = DiagonalOperator::power(1.0, 1.0, 64).unwrap();
        let ts = SpectralVector::zeros(64);
        let draws = 10_000;
        let energies: Vec<f64> = (0..draws)
            .map(|s| {
                synthesize_data(&q, &a, &ts, 1, s, NoiseMode::Sampled)
                    .unwrap()
                    .fluctuation()
                    .norm_sq()
            })
            .collect();
        let (mean, var) = crate::stats::mean_var(&energies);
        let oracle: f64 = (1..=64).map(|m| (m as f64).powi(-1) * (m as f64).powi(-4)).sum();
        assert!((mean - oracle).abs() < 3.0 * (var / draws as f64).sqrt());
    }

    #[test]
    fn gradient_vanishes_at_truth_without_noise() {
        let q = DiagonalOperator::power(1.0, 2.0, 12).unwrap();
        let a = DiagonalOperator::power(1.0, -1.0, 12).unwrap();
        let ts = ThetaStarPreset::Smooth { s: 2.0, cm_norm: 1.0 }.build(&q).unwrap();
        let m = synthesize_data(&q, &a, &ts, 50, 0, NoiseMode::Zero).unwrap();
        let ev = eval_empirical_loglik(&m, &ts).unwrap();
        assert!(ev.gradient_precond.norm() < 1e-15);
    }

    #[test]
    fn single_mode_gradient_by_hand() {
        let m = single(1.0, 2.0, 1.0, 1);
        let theta = SpectralVector::new(vec![2.0]).unwrap();
        let ev = eval_empirical_loglik(&m, &theta).unwrap();
        assert_eq!(ev.gradient_precond.coeffs()[0], -2.0);
        // value = -1/2 * 2 * 4 + 2 * 2 = 0; central difference of it
        let h = 1e-5;
        let f = |x: f64| eval_empirical_loglik(&m, &SpectralVector::new(vec![x]).unwrap()).unwrap().value;
        let fd = (f(2.0 + h) - f(2.0 - h)) / (2.0 * h);
        assert_relative_eq!(fd, -2.0, max_relative = 1e-9);
        assert_eq!(ev.hessian_precond.eigs(), &[-2.0]);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let m = coercive(10, 30, 2);
        let mut s = NormalStream::new(1, Domain::Audit, 0, 10);
        for _ in 0..20 {
            let theta = SpectralVector::new((0..10).map(|_| s.next_normal()).collect()).unwrap();
            let ev = eval_empirical_loglik(&m, &theta).unwrap();
            for k in 0..10 {
                let h = 1e-5;
                let mut p = theta.clone().into_inner();
                let mut q = p.clone();
                p[k] += h;
                q[k] -= h;
                let fp = eval_empirical_loglik(&m, &SpectralVector::new(p).unwrap()).unwrap().value;
                let fq = eval_empirical_loglik(&m, &SpectralVector::new(q).unwrap()).unwrap().value;
                let fd = m.q().eigs()[k] * (fp - fq) / (2.0 * h);
                let g = ev.gradient_precond.coeffs()[k];
                assert!((fd - g).abs() <= 1e-6 * g.abs().max(1e-3), "{k}: {fd} vs {g}");
            }
        }
    }

    #[test]
    fn posterior_without_information_is_prior() {
        let q = DiagonalOperator::power(1.0, 2.0, 6).unwrap();
        let a = DiagonalOperator::explicit(vec![0.0; 6]).unwrap();
        let m = synthesize_data(&q, &a, &SpectralVector::zeros(6), 10, 1, NoiseMode::Sampled).unwrap();
        let post = exact_posterior(&m).unwrap();
        for k in 0..6 {
            assert_relative_eq!(post.cov().eigs()[k], q.eigs()[k], max_relative = 1e-15);
            assert_eq!(post.mean().coeffs()[k], 0.0);
        }
    }

    #[test]
    fn single_mode_posterior_by_inversion() {
        let q = DiagonalOperator::explicit(vec![0.5]).unwrap();
        let a = DiagonalOperator::explicit(vec![2.0]).unwrap();
        // Zero noise with theta* = 0.5 gives d = lambda theta* = 1.
        let m = synthesize_data(&q, &a, &SpectralVector::new(vec![0.5]).unwrap(), 100, 0, NoiseMode::Zero).unwrap();
        assert_eq!(m.data_coeffs().coeffs()[0], 1.0);
        let post = exact_posterior(&m).unwrap();
        assert_relative_eq!(post.cov().eigs()[0], 0.5 / 101.0, max_relative = 1e-14);
        assert_relative_eq!(post.mean().coeffs()[0], 50.0 / 101.0, max_relative = 1e-14);
    }

    #[test]
    fn map_is_posterior_mean() {
        for seed in 0..5 {
            let m = coercive(32, 10u64.pow(1 + seed as u32 % 4), seed);
            let map = compute_map(&m).unwrap();
            let post = exact_posterior(&m).unwrap();
            for (a, b) in map.coeffs().iter().zip(post.mean().coeffs()) {
                assert!((a - b).abs() <= 8.0 * f64::EPSILON * b.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn map_of_zero_data_is_zero() {
        let q = DiagonalOperator::power(1.0, 2.0, 4).unwrap();
        let a = DiagonalOperator::power(1.0, -2.0, 4).unwrap();
        let m = synthesize_data(&q, &a, &SpectralVector::zeros(4), 10, 0, NoiseMode::Zero).unwrap();
        assert!(compute_map(&m).unwrap().coeffs().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn map_matches_gradient_descent_on_om_functional() {
        let q = DiagonalOperator::power(1.0, 1.5, 16).unwrap();
        let a = DiagonalOperator::power(0.5, -1.5, 16).unwrap();
        let ts = ThetaStarPreset::Smooth { s: 2.0, cm_norm: 1.0 }.build(&q).unwrap();
        let m = synthesize_data(&q, &a, &ts, 20, 8, NoiseMode::Sampled).unwrap();
        // Gradient descent in the Cameron-Martin geometry on the OM functional:
        // grad_{H_Q} J = Q grad J = theta - n Q(d - A theta).
        let mut theta = vec![0.0f64; 16];
        let step = 1.0 / (1.0 + 20.0 * 0.5);
        for _ in 0..5_000 {
            for k in 0..16 {
                let mu = q.eigs()[k];
                let g = theta[k] - 20.0 * mu * (m.data_coeffs().coeffs()[k] - a.eigs()[k] * theta[k]);
                theta[k] -= step * g;
            }
        }
        let map = compute_map(&m).unwrap();
        for k in 0..16 {
            assert!((theta[k] - map.coeffs()[k]).abs() < 1e-8);
        }
        let j_map = om_functional(&m, &map).unwrap();
        let mut nudged = map.clone().into_inner();
        nudged[3] += 1e-3;
        assert!(om_functional(&m, &SpectralVector::new(nudged).unwrap()).unwrap() > j_map);
    }

    #[test]
    fn eps2_examples() {
        let delta = (-1.0f64).exp();
        assert_relative_eq!(eps2(1.0, 0.5, 100.0, delta), 0.2, max_relative = 1e-14);
        // second path: (1/10)(1 + sqrt(2 * 0.5 * 1))
        assert_relative_eq!(eps2(1.0, 0.5, 100.0, delta), 0.1 * (1.0 + 1.0f64.sqrt()), max_relative = 1e-14);
        assert_relative_eq!(eps2(1.7, 0.3, 64.0, 1.0), 1.7f64.sqrt() / 8.0, max_relative = 1e-14);
    }

    #[test]
    fn eps2_covers_the_fluctuation() {
        let q = DiagonalOperator::power(1.0, 2.0, 64).unwrap();
        let a = DiagonalOperator::power(1.0, -2.0, 64).unwrap();
        let ts = SpectralVector::zeros(64);
        let n = 100u64;
        let base = synthesize_data(&q, &a, &ts, n, 0, NoiseMode::Sampled).unwrap();
        let bound = eps2(base.qaq_trace(), base.qaq_opnorm(), n as f64, 0.1);
        let covered = (0..10_000u64)
            .filter(|&s| {
                let m = synthesize_data(&q, &a, &ts, n, s, NoiseMode::Sampled).unwrap();
                m.fluctuation().norm() / (n as f64).sqrt() <= bound
            })
            .count();
        assert!(covered as f64 / 10_000.0 >= 0.9);
    }

    #[test]
    fn constants_of_coercive_model() {
        let m = coercive(32, 1000, 3);
        let c = model_constants(&m, 0.1).unwrap();
        assert_relative_eq!(c.mu, 1.0, max_relative = 1e-12);
        assert_relative_eq!(c.l1, 1.0, max_relative = 1e-12);
        assert_eq!((c.b, c.b_tight, c.eps1), (1.0, 0.0, 0.0));
        let c2 = model_constants(&m.with_n(4000).unwrap(), 0.1).unwrap();
        assert_relative_eq!(c.eps2 / c2.eps2, 2.0, max_relative = 1e-12);
    }

    #[test]
    fn non_coercive_laws_are_flagged() {
        let q = DiagonalOperator::power(1.0, 2.0, 16).unwrap();
        let a = DiagonalOperator::power(1.0, -1.0, 16).unwrap();
        let m = synthesize_data(&q, &a, &SpectralVector::zeros(16), 10, 0, NoiseMode::Sampled).unwrap();
        // truncated min is positive, yet mu_m lambda_m = 1/m -> 0
        assert!(coercivity(&m).truncated_min > 0.0);
        assert!(matches!(model_constants(&m, 0.1), Err(Error::Coercivity { .. })));

        let a = DiagonalOperator::power(1.0, -3.0, 16).unwrap();
        let m = synthesize_data(&q, &a, &SpectralVector::zeros(16), 10, 0, NoiseMode::Sampled).unwrap();
        assert_eq!(coercivity(&m).tail, CoercivityTail::Growing);
        assert!(model_constants(&m, 0.1).is_err());
    }

    #[test]
    fn indefinite_information_rejected_with_sampled_noise() {
        let q = DiagonalOperator::explicit(vec![1.0, 1.0]).unwrap();
        let a = DiagonalOperator::explicit(vec![1.0, -1.0]).unwrap();
        let z = SpectralVector::zeros(2);
        assert!(synthesize_data(&q, &a, &z, 10, 0, NoiseMode::Sampled).is_err());
        assert!(synthesize_data(&q, &a, &z, 10, 0, NoiseMode::Zero).is_ok());
    }

    #[test]
    fn overflowing_qaq_is_rejected() {
        let q = DiagonalOperator::explicit(vec![1e200, 1.0]).unwrap();
        let a = DiagonalOperator::explicit(vec![1e10, 1.0]).unwrap();
        let z = SpectralVector::zeros(2);
        assert!(matches!(
            synthesize_data(&q, &a, &z, 10, 0, NoiseMode::Zero),
            Err(Error::Overflow { .. })
        ));
    }

    #[test]
    fn theta_star_presets() {
        let q = DiagonalOperator::power(1.0, 2.0, 10).unwrap();
        let spike = ThetaStarPreset::Spike { mode: 3, value: 0.5 }.build(&q).unwrap();
        assert_eq!(spike.coeffs()[2], 0.5);
        assert!(ThetaStarPreset::Spike { mode: 11, value: 0.5 }.build(&q).is_err());
        assert!(ThetaStarPreset::List { values: vec![1.0; 3] }.build(&q).is_err());
        let list = ThetaStarPreset::List { values: vec![0.1; 10] }.build(&q).unwrap();
        assert_eq!(list.dim(), 10);
    }

    #[test]
    fn f32_posterior() {
        let q = DiagonalOperator::<f32>::explicit(vec![0.5]).unwrap();
        let a = DiagonalOperator::<f32>::explicit(vec![2.0]).unwrap();
        let m = synthesize_data(&q, &a, &SpectralVector::new(vec![0.5f32]).unwrap(), 100, 0, NoiseMode::Zero).unwrap();
        let post = exact_posterior(&m).unwrap();
        assert!((post.mean().coeffs()[0] - 50.0 / 101.0).abs() < 1e-6);
    }
}
