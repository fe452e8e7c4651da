//! Mode-wise simulation of the preconditioned Langevin equation.
//!
//! Per mode the noise `sqrt(2/n) dW^Q` is a scalar Brownian motion with
//! variance `2 mu_m / n` per unit time. Replicas run in parallel; every draw
//! is keyed by `(seed, replica, step, mode)` and results are reduced in
//! replica order, so output does not depend on the worker count.

use std::collections::BTreeMap;
use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audit::audit_assumptions;
use crate::drift::{Drift, LinearGaussianDrift, Linearity};
use crate::error::{Error, Result};
use crate::model::{exact_posterior, ModelInstance};
use crate::rng::{Domain, NormalStream};
use crate::scalar::{fmt17, lit, to_f64, Real};
use crate::spectral::{GaussianSpec, SpectralVector};
use crate::stats::mean_var;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Closed-form Ornstein-Uhlenbeck transition; linear drifts only.
    ExactOu,
    /// Implicit in the diagonal linear part, explicit in the remainder.
    SemiImplicitEuler,
    /// Exact flow of the diagonal linear part with the remainder frozen over
    /// the step.
    ExponentialEuler,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Self::ExactOu => "exact_ou",
            Self::SemiImplicitEuler => "semi_implicit_euler",
            Self::ExponentialEuler => "exponential_euler",
        }
    }
}

pub const DEFAULT_GUARD: f64 = 1e8;

fn default_replicas() -> usize {
    1000
}
fn default_orders() -> Vec<u32> {
    vec![2, 4]
}
fn default_guard() -> f64 {
    DEFAULT_GUARD
}

/// Simulation settings. Unset `dt`, `t_end` and `scheme` are resolved
/// against the drift by [`SimConfig::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub t_end: Option<f64>,
    #[serde(default = "default_replicas")]
    pub n_replicas: usize,
    #[serde(default)]
    pub scheme: Option<Scheme>,
    /// Sorted times in `[0, t_end]`; `t_end` is always recorded.
    #[serde(default)]
    pub record_times: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Even moment orders `p` of `||theta_t - theta*||`.
    #[serde(default = "default_orders")]
    pub moment_orders: Vec<u32>,
    /// Divergence threshold on `||theta||`.
    #[serde(default = "default_guard")]
    pub guard: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: None,
            t_end: None,
            n_replicas: default_replicas(),
            scheme: None,
            record_times: Vec::new(),
            seed: 0,
            moment_orders: default_orders(),
            guard: DEFAULT_GUARD,
        }
    }
}

/// Fully specified run derived from a [`SimConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedSim {
    pub scheme: Scheme,
    /// Step actually used: `t_end / n_steps`, at most the requested `dt`.
    pub dt: f64,
    pub t_end: f64,
    pub n_steps: u64,
    /// Recorded times and their step indices (grid schemes) or ordinal
    /// (exact transitions).
    pub records: Vec<(f64, u64)>,
}

fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

impl SimConfig {
    pub fn resolve<T: Real>(&self, drift: &dyn Drift<T>) -> Result<ResolvedSim> {
        if self.n_replicas == 0 {
            return Err(invalid("n_replicas", "must be positive"));
        }
        if self.moment_orders.iter().any(|&p| p == 0 || p % 2 == 1) {
            return Err(invalid("moment_orders", "orders must be positive even integers"));
        }
        if !(self.guard > 0.0) {
            return Err(invalid("guard", "must be positive"));
        }
        let rates: Vec<f64> = drift.rates().into_iter().map(to_f64).collect();
        let k_max = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let k_min = rates.iter().copied().fold(f64::INFINITY, f64::min);

        let t_end = match self.t_end {
            Some(t) => t,
            None if k_min > 0.0 => 10.0 / k_min,
            None => {
                return Err(invalid(
                    "t_end",
                    "no default: slowest relaxation rate is not positive",
                ))
            }
        };
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(invalid("t_end", format!("must be positive and finite, got {t_end}")));
        }
        let dt = match self.dt {
            Some(dt) => dt,
            None => (0.1 / k_max).min(t_end / 10.0),
        };
        if !(dt > 0.0 && dt < t_end) {
            return Err(invalid("dt", format!("need 0 < dt < t_end, got dt = {dt}, t_end = {t_end}")));
        }

        let scheme = self.scheme.unwrap_or(match drift.linearity() {
            Linearity::Linear => Scheme::ExactOu,
            Linearity::General => Scheme::SemiImplicitEuler,
        });
        if scheme == Scheme::ExactOu && drift.linearity() != Linearity::Linear {
            return Err(invalid("scheme", "exact_ou requires a linear drift"));
        }
        if scheme == Scheme::SemiImplicitEuler && rates.iter().any(|&k| !(1.0 + dt * k > 0.0)) {
            return Err(invalid("dt", "semi-implicit step 1 + dt k is not positive for some mode"));
        }

        let mut times = self.record_times.clone();
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(invalid("record_times", "must be strictly increasing"));
        }
        if times.iter().any(|&t| !(0.0..=t_end).contains(&t)) {
            return Err(invalid("record_times", format!("must lie in [0, {t_end}]")));
        }
        if times.last() != Some(&t_end) {
            times.push(t_end);
        }

        let n_steps = ((t_end / dt) - 1e-9).ceil().max(1.0) as u64;
        let h = t_end / n_steps as f64;
        let records = match scheme {
            Scheme::ExactOu => times.iter().enumerate().map(|(i, &t)| (t, i as u64)).collect(),
            _ => {
                let mut recs: Vec<(f64, u64)> = Vec::with_capacity(times.len());
                for &t in &times {
                    let step = (t / h).round() as u64;
                    if recs.last().is_some_and(|&(_, s)| s == step) {
                        continue;
                    }
                    recs.push((step as f64 * h, step));
                }
                recs
            }
        };
        Ok(ResolvedSim {
            scheme,
            dt: h,
            t_end,
            n_steps,
            records,
        })
    }
}

/// Initial condition of every replica.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialState<T> {
    /// Deterministic start, `theta*` by default.
    Fixed(SpectralVector<T>),
    /// Independent draw per replica.
    Gaussian(GaussianSpec<T>),
}

impl<T: Real> InitialState<T> {
    fn draw(&self, seed: u64, replica: u64) -> Vec<T> {
        match self {
            Self::Fixed(v) => v.coeffs().to_vec(),
            Self::Gaussian(g) => {
                let mut s = NormalStream::new(seed, Domain::Initial, replica, g.dim());
                g.sample_with(&mut s).into_inner()
            }
        }
    }

    fn dim(&self) -> usize {
        match self {
            Self::Fixed(v) => v.dim(),
            Self::Gaussian(g) => g.dim(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub estimate: f64,
    pub std_error: f64,
}

impl Estimate {
    fn from_samples(xs: &[f64]) -> Self {
        let (mean, var) = mean_var(xs);
        Self {
            estimate: mean,
            std_error: (var / xs.len() as f64).sqrt(),
        }
    }
}

/// Final-time moments of one mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeStats {
    pub mean: f64,
    pub variance: f64,
    pub se_mean: f64,
    pub se_variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentTrace {
    pub times: Vec<f64>,
    /// `E ||theta_t - theta*||^p` per order, one entry per recorded time.
    pub p_norms: BTreeMap<u32, Vec<Estimate>>,
    pub per_mode_stats: Vec<ModeStats>,
    pub n_replicas: usize,
    pub scheme: Scheme,
    pub dt: f64,
}

impl MomentTrace {
    /// Columns `time,p,estimate,std_error`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "time,p,estimate,std_error")?;
        for (&p, ests) in &self.p_norms {
            for (t, e) in self.times.iter().zip(ests) {
                writeln!(w, "{},{},{},{}", fmt17(*t), p, fmt17(e.estimate), fmt17(e.std_error))?;
            }
        }
        Ok(())
    }

    pub fn sup_estimate(&self, p: u32) -> Option<f64> {
        self.p_norms
            .get(&p)
            .map(|v| v.iter().map(|e| e.estimate).fold(f64::NEG_INFINITY, f64::max))
    }
}

/// Trace plus the end state of each replica.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<T> {
    pub trace: MomentTrace,
    pub finals: Vec<SpectralVector<T>>,
}

struct ReplicaRun<T> {
    dist_sq: Vec<f64>,
    last: Vec<T>,
}

struct Stepper<'a, T: Real> {
    drift: &'a dyn Drift<T>,
    sim: &'a ResolvedSim,
    rates: Vec<T>,
    noise_var: Vec<T>,
    intercept: Vec<T>,
    theta_star: &'a [T],
    guard_sq: T,
    seed: u64,
}

impl<'a, T: Real> Stepper<'a, T> {
    fn new(drift: &'a dyn Drift<T>, sim: &'a ResolvedSim, seed: u64, guard: f64) -> Self {
        let dim = drift.dim();
        let inv_n = drift.n().recip();
        let noise_var = drift.q().eigs().iter().map(|&mu| lit::<T>(2.0) * mu * inv_n).collect();
        let mut intercept = vec![T::zero(); dim];
        let mut scratch = vec![T::zero(); dim];
        drift.drift(&vec![T::zero(); dim], &mut intercept, &mut scratch);
        Self {
            drift,
            sim,
            rates: drift.rates(),
            noise_var,
            intercept,
            theta_star: drift.theta_star().coeffs(),
            guard_sq: lit::<T>(guard) * lit::<T>(guard),
            seed,
        }
    }

    fn dist_sq(&self, theta: &[T]) -> f64 {
        to_f64(
            theta
                .iter()
                .zip(self.theta_star)
                .map(|(&x, &s)| (x - s) * (x - s))
                .sum::<T>(),
        )
    }

    fn check_guard(&self, theta: &[T], replica: u64, step: u64) -> Result<()> {
        let ns: T = theta.iter().map(|&x| x * x).sum();
        if !(ns <= self.guard_sq) {
            return Err(Error::Diverged {
                replica,
                step,
                norm: to_f64(ns.sqrt()),
            });
        }
        Ok(())
    }

    /// Exact OU transition of length `tau` for every mode.
    fn ou_jump(&self, theta: &mut [T], tau: T, z: &[f64]) {
        let two = lit::<T>(2.0);
        for m in 0..theta.len() {
            let k = self.rates[m];
            let (decay, var, drift_gain) = if k == T::zero() {
                (T::one(), self.noise_var[m] * tau, tau)
            } else {
                let e1 = (-k * tau).exp_m1();
                let e2 = (-two * k * tau).exp_m1();
                (e1 + T::one(), -self.noise_var[m] * e2 / (two * k), -e1 / k)
            };
            theta[m] = decay * theta[m] + drift_gain * self.intercept[m] + var.sqrt() * lit::<T>(z[m]);
        }
    }

    fn run(&self, replica: u64, init: &InitialState<T>) -> Result<ReplicaRun<T>> {
        let dim = self.drift.dim();
        let mut theta = init.draw(self.seed, replica);
        let mut stream = NormalStream::new(self.seed, Domain::Langevin, replica, dim);
        let mut z = vec![0.0f64; dim];
        let mut dist_sq = Vec::with_capacity(self.sim.records.len());

        if self.sim.scheme == Scheme::ExactOu {
            let mut t_prev = 0.0;
            for &(t, ordinal) in &self.sim.records {
                let tau = t - t_prev;
                if tau > 0.0 {
                    stream.seek(ordinal);
                    stream.fill(&mut z);
                    self.ou_jump(&mut theta, lit(tau), &z);
                    self.check_guard(&theta, replica, ordinal)?;
                }
                t_prev = t;
                dist_sq.push(self.dist_sq(&theta));
            }
            return Ok(ReplicaRun { dist_sq, last: theta });
        }

        let h = lit::<T>(self.sim.dt);
        let mut drift = vec![T::zero(); dim];
        let mut scratch = vec![T::zero(); dim];
        let two = lit::<T>(2.0);
        // Per-mode coefficients of the two grid schemes.
        let (a, b, c): (Vec<T>, Vec<T>, Vec<T>) = match self.sim.scheme {
            Scheme::SemiImplicitEuler => self
                .rates
                .iter()
                .zip(&self.noise_var)
                .map(|(&k, &nv)| {
                    let inv = (T::one() + h * k).recip();
                    (inv, h * inv, (nv * h).sqrt() * inv)
                })
                .fold((vec![], vec![], vec![]), push3),
            _ => self
                .rates
                .iter()
                .zip(&self.noise_var)
                .map(|(&k, &nv)| {
                    if k == T::zero() {
                        (T::one(), h, (nv * h).sqrt())
                    } else {
                        let e1 = (-k * h).exp_m1();
                        let e2 = (-two * k * h).exp_m1();
                        (e1 + T::one(), -e1 / k, (-nv * e2 / (two * k)).sqrt())
                    }
                })
                .fold((vec![], vec![], vec![]), push3),
        };

        let mut next_record = 0;
        let records = &self.sim.records;
        for step in 0..=self.sim.n_steps {
            while next_record < records.len() && records[next_record].1 == step {
                dist_sq.push(self.dist_sq(&theta));
                next_record += 1;
            }
            if step == self.sim.n_steps {
                break;
            }
            self.drift.drift(&theta, &mut drift, &mut scratch);
            stream.fill(&mut z);
            for m in 0..dim {
                // remainder r = drift + k theta, treated explicitly
                let r = drift[m] + self.rates[m] * theta[m];
                theta[m] = a[m] * theta[m] + b[m] * r + c[m] * lit::<T>(z[m]);
            }
            self.check_guard(&theta, replica, step + 1)?;
        }
        Ok(ReplicaRun { dist_sq, last: theta })
    }
}

fn push3<T>(mut acc: (Vec<T>, Vec<T>, Vec<T>), x: (T, T, T)) -> (Vec<T>, Vec<T>, Vec<T>) {
    acc.0.push(x.0);
    acc.1.push(x.1);
    acc.2.push(x.2);
    acc
}

/// Runs `cfg.n_replicas` trajectories and keeps their end states.
pub fn simulate_ensemble<T: Real>(
    drift: &dyn Drift<T>,
    init: &InitialState<T>,
    cfg: &SimConfig,
) -> Result<Ensemble<T>> {
    let sim = cfg.resolve(drift)?;
    if init.dim() != drift.dim() {
        return Err(Error::DimensionMismatch {
            left: init.dim(),
            right: drift.dim(),
            context: "initial state vs drift",
        });
    }
    let stepper = Stepper::new(drift, &sim, cfg.seed, cfg.guard);
    let runs: Vec<Result<ReplicaRun<T>>> = (0..cfg.n_replicas as u64)
        .into_par_iter()
        .map(|r| stepper.run(r, init))
        .collect();
    let runs: Vec<ReplicaRun<T>> = runs.into_iter().collect::<Result<_>>()?;

    let n_rec = sim.records.len();
    let mut p_norms = BTreeMap::new();
    for &p in &cfg.moment_orders {
        let half = (p / 2) as i32;
        let ests = (0..n_rec)
            .map(|i| {
                let xs: Vec<f64> = runs.iter().map(|r| r.dist_sq[i].powi(half)).collect();
                Estimate::from_samples(&xs)
            })
            .collect();
        p_norms.insert(p, ests);
    }

    let finals: Vec<SpectralVector<T>> = runs
        .into_iter()
        .map(|r| SpectralVector::new(r.last))
        .collect::<Result<_>>()?;
    let per_mode_stats = mode_stats(&finals);

    Ok(Ensemble {
        trace: MomentTrace {
            times: sim.records.iter().map(|r| r.0).collect(),
            p_norms,
            per_mode_stats,
            n_replicas: cfg.n_replicas,
            scheme: sim.scheme,
            dt: sim.dt,
        },
        finals,
    })
}

pub fn simulate<T: Real>(
    drift: &dyn Drift<T>,
    init: &InitialState<T>,
    cfg: &SimConfig,
) -> Result<MomentTrace> {
    simulate_ensemble(drift, init, cfg).map(|e| e.trace)
}

fn mode_stats<T: Real>(states: &[SpectralVector<T>]) -> Vec<ModeStats> {
    let n = states.len() as f64;
    let dim = states.first().map_or(0, |s| s.dim());
    (0..dim)
        .map(|m| {
            let xs: Vec<f64> = states.iter().map(|s| to_f64(s.coeffs()[m])).collect();
            let (mean, var) = mean_var(&xs);
            let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
            ModeStats {
                mean,
                variance: var,
                se_mean: (var / n).sqrt(),
                se_variance: ((m4 - var * var).max(0.0) / n).sqrt(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeComparison {
    /// One-based mode index.
    pub mode: usize,
    pub mean: f64,
    pub variance: f64,
    pub exact_mean: f64,
    pub exact_variance: f64,
    pub z_mean: f64,
    pub z_var: f64,
}

/// Agreement of simulated end states with the exact posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceReport {
    pub modes: Vec<ModeComparison>,
    pub max_abs_z: f64,
    /// `max_abs_z < 4`.
    pub pass: bool,
    pub n_replicas: usize,
    pub t_end: f64,
}

pub const STATIONARY_Z: f64 = 4.0;

impl DistanceReport {
    /// Columns `mode,mean,variance,exact_mean,exact_variance,z_mean,z_var`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "mode,mean,variance,exact_mean,exact_variance,z_mean,z_var")?;
        for c in &self.modes {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                c.mode,
                fmt17(c.mean),
                fmt17(c.variance),
                fmt17(c.exact_mean),
                fmt17(c.exact_variance),
                fmt17(c.z_mean),
                fmt17(c.z_var)
            )?;
        }
        Ok(())
    }
}

fn zscore(est: f64, exact: f64, se: f64) -> f64 {
    if se > 0.0 {
        (est - exact) / se
    } else if est == exact {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Compares end states with the model's exact posterior.
pub fn compare_with_posterior<T: Real>(
    model: &ModelInstance<T>,
    finals: &[SpectralVector<T>],
    t_end: f64,
) -> Result<DistanceReport> {
    let post = exact_posterior(model)?;
    let stats = mode_stats(finals);
    let modes: Vec<ModeComparison> = stats
        .iter()
        .enumerate()
        .map(|(m, s)| {
            let em = to_f64(post.mean().coeffs()[m]);
            let ev = to_f64(post.cov().eigs()[m]);
            ModeComparison {
                mode: m + 1,
                mean: s.mean,
                variance: s.variance,
                exact_mean: em,
                exact_variance: ev,
                z_mean: zscore(s.mean, em, s.se_mean),
                z_var: zscore(s.variance, ev, s.se_variance),
            }
        })
        .collect();
    let max_abs_z = modes
        .iter()
        .flat_map(|c| [c.z_mean.abs(), c.z_var.abs()])
        .fold(0.0, f64::max);
    Ok(DistanceReport {
        modes,
        max_abs_z,
        pass: max_abs_z < STATIONARY_Z,
        n_replicas: finals.len(),
        t_end,
    })
}

const AUDIT_PAIRS: usize = 64;

fn require_ab<T: Real>(model: &ModelInstance<T>, seed: u64) -> Result<()> {
    audit_assumptions(model, AUDIT_PAIRS, T::one(), seed).require(&["A.1 (F_n)", "A.1 (V)", "A.2", "B"])
}

/// Stationarity check started from `theta*`.
pub fn stationary_check<T: Real>(model: &ModelInstance<T>, cfg: &SimConfig) -> Result<DistanceReport> {
    stationary_check_from(model, cfg, &InitialState::Fixed(model.theta_star().clone()))
}

pub fn stationary_check_from<T: Real>(
    model: &ModelInstance<T>,
    cfg: &SimConfig,
    init: &InitialState<T>,
) -> Result<DistanceReport> {
    require_ab(model, cfg.seed)?;
    let drift = LinearGaussianDrift::new(model);
    let sim = cfg.resolve(&drift)?;
    let ens = simulate_ensemble(&drift, init, cfg)?;
    compare_with_posterior(model, &ens.finals, sim.t_end)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Exact,
    Langevin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TailMass {
    pub mass: f64,
    /// Binomial standard error.
    pub se: f64,
    pub n_samples: usize,
    pub warning: Option<String>,
}

/// Posterior mass outside the open ball `B(theta*, radius)`.
pub fn tail_mass_estimate<T: Real>(
    model: &ModelInstance<T>,
    radius: T,
    n_samples: usize,
    sampler: Sampler,
    seed: u64,
) -> Result<TailMass> {
    tail_mass_with(model, radius, n_samples, sampler, seed, &SimConfig::default())
}

/// As [`tail_mass_estimate`]; `sim` configures the Langevin sampler (its
/// `n_replicas` and `seed` are overridden).
pub fn tail_mass_with<T: Real>(
    model: &ModelInstance<T>,
    radius: T,
    n_samples: usize,
    sampler: Sampler,
    seed: u64,
    sim: &SimConfig,
) -> Result<TailMass> {
    if !(radius >= T::zero()) {
        return Err(invalid("radius", "must be nonnegative"));
    }
    if n_samples == 0 {
        return Err(invalid("n_samples", "must be positive"));
    }
    if radius == T::zero() {
        return Ok(TailMass {
            mass: 1.0,
            se: 0.0,
            n_samples,
            warning: None,
        });
    }
    let ts = model.theta_star();
    let (draws, warning) = match sampler {
        Sampler::Exact => {
            let post = exact_posterior(model)?;
            let draws: Vec<SpectralVector<T>> = (0..n_samples as u64)
                .into_par_iter()
                .map(|i| post.sample_replica(seed, i))
                .collect();
            (draws, None)
        }
        Sampler::Langevin => {
            let cfg = SimConfig {
                n_replicas: n_samples,
                seed,
                ..sim.clone()
            };
            let drift = LinearGaussianDrift::new(model);
            let resolved = cfg.resolve(&drift)?;
            let warning = match require_ab(model, seed) {
                Err(e) => Some(format!("stationarity not established: {e}")),
                Ok(()) => None,
            };
            let ens = simulate_ensemble(&drift, &InitialState::Fixed(ts.clone()), &cfg)?;
            let warning = warning.or_else(|| match compare_with_posterior(model, &ens.finals, resolved.t_end) {
                Ok(r) if r.pass => None,
                Ok(r) => Some(format!(
                    "stationarity check failed: max |z| = {:.3} at t_end = {}",
                    r.max_abs_z, resolved.t_end
                )),
                Err(e) => Some(format!("stationarity check unavailable: {e}")),
            });
            (ens.finals, warning)
        }
    };
    let outside = draws.iter().filter(|x| x.distance(ts) >= radius).count();
    let p = outside as f64 / n_samples as f64;
    Ok(TailMass {
        mass: p,
        se: (p * (1.0 - p) / n_samples as f64).sqrt(),
        n_samples,
        warning,
    })
}

/// Runs `f` on a dedicated pool with `threads` workers.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::ThreadPool(e.to_string()))?;
    Ok(pool.install(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{synthesize_data, NoiseMode};
    use crate::spectral::DiagonalOperator;

    fn single_mode(n: u64, mu: f64, la: f64, noise: NoiseMode) -> ModelInstance<f64> {
        let q = DiagonalOperator::explicit(vec![mu]).unwrap();
        let a = DiagonalOperator::explicit(vec![la]).unwrap();
        let ts = SpectralVector::new(vec![0.4]).unwrap();
        synthesize_data(&q, &a, &ts, n, 5, noise).unwrap()
    }

    #[test]
    fn pure_ou_reaches_unit_stationary_variance() {
        // lambda = 0: drift is -theta/n only; stationary variance mu = 1
        let q = DiagonalOperator::explicit(vec![1.0]).unwrap();
        let a = DiagonalOperator::explicit(vec![0.0]).unwrap();
        let m = synthesize_data(&q, &a, &SpectralVector::zeros(1), 1, 0, NoiseMode::Zero).unwrap();
        let drift = LinearGaussianDrift::new(&m);
        for scheme in [Scheme::ExactOu, Scheme::SemiImplicitEuler] {
            let cfg = SimConfig {
                dt: Some(0.01),
                t_end: Some(50.0),
                n_replicas: 10_000,
                scheme: Some(scheme),
                seed: 1,
                ..SimConfig::default()
            };
            let tr = simulate(&drift, &InitialState::Fixed(SpectralVector::zeros(1)), &cfg).unwrap();
            let s = tr.per_mode_stats[0];
            // semi-implicit bias: 1/(1 + h/2)
            let target = if scheme == Scheme::ExactOu { 1.0 } else { 1.0 / 1.005 };
            assert!((s.variance - target).abs() < 3.0 * s.se_variance, "{scheme:?} {s:?}");
        }
    }

    #[test]
    fn single_mode_law_matches_posterior() {
        let m = single_mode(50, 1.0, 1.0, NoiseMode::Sampled);
        let c = m.data_coeffs().coeffs()[0];
        let cfg = SimConfig {
            n_replicas: 20_000,
            seed: 9,
            ..SimConfig::default()
        };
        let drift = LinearGaussianDrift::new(&m);
        let tr = simulate(&drift, &InitialState::Fixed(m.theta_star().clone()), &cfg).unwrap();
        let s = tr.per_mode_stats[0];
        assert!((s.mean - 50.0 * c / 51.0).abs() < 3.0 * s.se_mean, "{s:?}");
        assert!((s.variance - 1.0 / 51.0).abs() < 3.0 * s.se_variance, "{s:?}");
    }

    #[test]
    fn semi_implicit_is_weak_order_one() {
        // n = 1, mu = 1, lambda = 9: rate k = 10, stationary variance 0.1
        let m = single_mode(1, 1.0, 9.0, NoiseMode::Zero);
        let ts = m.theta_star().coeffs()[0];
        let post = exact_posterior(&m).unwrap();
        let exact_m2 = post.cov().eigs()[0] + (post.mean().coeffs()[0] - ts).powi(2);
        let drift = LinearGaussianDrift::new(&m);
        let err = |dt: f64| {
            let cfg = SimConfig {
                dt: Some(dt),
                t_end: Some(2.0),
                n_replicas: 400_000,
                scheme: Some(Scheme::SemiImplicitEuler),
                seed: 3,
                moment_orders: vec![2],
                ..SimConfig::default()
            };
            let tr = simulate(&drift, &InitialState::Fixed(m.theta_star().clone()), &cfg).unwrap();
            (tr.p_norms[&2].last().unwrap().estimate - exact_m2).abs()
        };
        let ratio = err(0.02) / err(0.01);
        assert!((ratio - 2.0).abs() < 0.5, "ratio {ratio}");
    }

    #[test]
    fn exact_and_semi_implicit_agree_at_small_step() {
        let m = single_mode(10, 0.5, 2.0, NoiseMode::Sampled);
        let drift = LinearGaussianDrift::new(&m);
        let run = |scheme, seed| {
            let cfg = SimConfig {
                dt: Some(1e-3),
                t_end: Some(4.0),
                n_replicas: 20_000,
                scheme: Some(scheme),
                seed,
                ..SimConfig::default()
            };
            simulate(&drift, &InitialState::Fixed(m.theta_star().clone()), &cfg).unwrap().per_mode_stats[0]
        };
        let a = run(Scheme::ExactOu, 1);
        let b = run(Scheme::SemiImplicitEuler, 2);
        let zm = (a.mean - b.mean) / (a.se_mean.powi(2) + b.se_mean.powi(2)).sqrt();
        let zv = (a.variance - b.variance) / (a.se_variance.powi(2) + b.se_variance.powi(2)).sqrt();
        assert!(zm.abs() < 4.0 && zv.abs() < 4.0, "{zm} {zv}");
    }

    #[test]
    fn replicas_are_identical_across_thread_counts() {
        let q = DiagonalOperator::power(1.0, 2.0, 8).unwrap();
        let a = DiagonalOperator::power(1.0, -1.0, 8).unwrap();
        let m = synthesize_data(&q, &a, &SpectralVector::zeros(8), 20, 2, NoiseMode::Sampled).unwrap();
        let drift = LinearGaussianDrift::new(&m);
        let cfg = SimConfig {
            t_end: Some(5.0),
            n_replicas: 257,
            dt: Some(0.05),
            scheme: Some(Scheme::SemiImplicitEuler),
            record_times: vec![0.0, 1.0, 2.5],
            seed: 77,
            ..SimConfig::default()
        };
        let init = InitialState::Fixed(m.theta_star().clone());
        let one = with_threads(1, || simulate(&drift, &init, &cfg).unwrap()).unwrap();
        let many = with_threads(5, || simulate(&drift, &init, &cfg).unwrap()).unwrap();
        assert_eq!(one, many);
        assert_eq!(one.times, vec![0.0, 1.0, 2.5, 5.0]);
    }

    #[test]
    fn divergence_names_first_replica() {
        let q = DiagonalOperator::explicit(vec![1.0]).unwrap();
        let a = DiagonalOperator::explicit(vec![-2.0]).unwrap();
        let m = synthesize_data(&q, &a, &SpectralVector::zeros(1), 1, 0, NoiseMode::Zero).unwrap();
        let drift = LinearGaussianDrift::new(&m);
        let cfg = SimConfig {
            dt: Some(0.5),
            t_end: Some(100.0),
            n_replicas: 8,
            scheme: Some(Scheme::ExponentialEuler),
            guard: 1e3,
            ..SimConfig::default()
        };
        let err = simulate(&drift, &InitialState::Fixed(SpectralVector::new(vec![1.0]).unwrap()), &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { replica: 0, .. }), "{err:?}");
    }

    #[test]
    fn exact_ou_rejects_general_drift() {
        let m = single_mode(5, 1.0, 1.0, NoiseMode::Zero);
        let drift = crate::drift::QuarticPerturbedDrift::new(&m, 1.0);
        let cfg = SimConfig {
            scheme: Some(Scheme::ExactOu),
            ..SimConfig::default()
        };
        assert!(cfg.resolve(&drift).is_err());
    }

    #[test]
    fn stationary_check_verdicts() {
        let q = DiagonalOperator::power(1.0, 2.0, 16).unwrap();
        let a = DiagonalOperator::power(1.0, -1.0, 16).unwrap();
        let ts = SpectralVector::new((1..=16).map(|k| 1.0 / (k * k) as f64).collect()).unwrap();
        let m = synthesize_data(&q, &a, &ts, 100, 4, NoiseMode::Sampled).unwrap();
        let base = SimConfig {
            n_replicas: 4000,
            seed: 21,
            ..SimConfig::default()
        };
        let long = stationary_check(&m, &SimConfig { t_end: Some(2000.0), ..base.clone() }).unwrap();
        assert!(long.pass, "max z {}", long.max_abs_z);
        let short = stationary_check(&m, &SimConfig { t_end: Some(0.01), ..base.clone() }).unwrap();
        assert!(!short.pass);
        let post = exact_posterior(&m).unwrap();
        let from_post = stationary_check_from(
            &m,
            &SimConfig { t_end: Some(0.01), ..base },
            &InitialState::Gaussian(post),
        )
        .unwrap();
        assert!(from_post.pass, "max z {}", from_post.max_abs_z);
    }

    #[test]
    fn stationary_check_refuses_indefinite_model() {
        let q = DiagonalOperator::explicit(vec![1.0, 1.0]).unwrap();
        let a = DiagonalOperator::explicit(vec![1.0, -1.0]).unwrap();
        let m = synthesize_data(&q, &a, &SpectralVector::zeros(2), 4, 0, NoiseMode::Zero).unwrap();
        let err = stationary_check(&m, &SimConfig { t_end: Some(1.0), ..SimConfig::default() }).unwrap_err();
        assert!(matches!(err, Error::AuditFailed { ref failed } if failed.contains('B')), "{err:?}");
    }

    #[test]
    fn tail_mass_edge_cases_and_sampler_agreement() {
        let q = DiagonalOperator::power(1.0, 2.0, 8).unwrap();
        let a = DiagonalOperator::power(1.0, -1.0, 8).unwrap();
        let m = synthesize_data(&q, &a, &SpectralVector::zeros(8), 10, 6, NoiseMode::Sampled).unwrap();
        assert_eq!(tail_mass_estimate(&m, 0.0, 10, Sampler::Exact, 1).unwrap().mass, 1.0);

        let post = exact_posterior(&m).unwrap();
        let huge: f64 = 10.0 * (post.mean().norm() + f64::sqrt(post.cov().trace().unwrap().value));
        assert!(tail_mass_estimate(&m, huge, 5000, Sampler::Exact, 1).unwrap().mass < 0.01);

        let r = 0.25;
        let e = tail_mass_estimate(&m, r, 20_000, Sampler::Exact, 2).unwrap();
        let l = tail_mass_estimate(&m, r, 20_000, Sampler::Langevin, 3).unwrap();
        assert!(l.warning.is_none(), "{:?}", l.warning);
        assert!((e.mass - l.mass).abs() < 3.0 * (e.se.powi(2) + l.se.powi(2)).sqrt(), "{e:?} {l:?}");
    }

    #[test]
    fn second_moment_bounded_across_horizon_doubling() {
        let q = DiagonalOperator::power(1.0, 2.0, 8).unwrap();
        let a = DiagonalOperator::power(1.0, -1.0, 8).unwrap();
        let m = synthesize_data(&q, &a, &SpectralVector::zeros(8), 10, 6, NoiseMode::Sampled).unwrap();
        let drift = LinearGaussianDrift::new(&m);
        let sup = |t: f64| {
            let cfg = SimConfig {
                t_end: Some(t),
                n_replicas: 4000,
                scheme: Some(Scheme::SemiImplicitEuler),
                record_times: (0..20).map(|i| i as f64 * t / 20.0).collect(),
                seed: 4,
                ..SimConfig::default()
            };
            simulate(&drift, &InitialState::Fixed(m.theta_star().clone()), &cfg).unwrap().sup_estimate(2).unwrap()
        };
        let (s1, s2) = (sup(40.0), sup(80.0));
        assert!(s1.is_finite() && (s2 / s1 - 1.0).abs() < 0.1, "{s1} {s2}");
    }

    #[test]
    fn csv_export_has_documented_columns() {
        let m = single_mode(5, 1.0, 1.0, NoiseMode::Sampled);
        let tr = simulate(
            &LinearGaussianDrift::new(&m),
            &InitialState::Fixed(m.theta_star().clone()),
            &SimConfig {
                n_replicas: 10,
                ..SimConfig::default()
            },
        )
        .unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("time,p,estimate,std_error\n"));
        assert_eq!(text.lines().count(), 1 + 2);
    }
}
