//! The acceptance suite. Each criterion runs on one of the shipped configs
//! and reports a single pass/fail line.

use std::time::Instant;

use spdelab::certificates::{geometric_grid, ScalarFn, StrongRateInputs};
use spdelab::langevin::simulate_ensemble;
use spdelab::laplace::HessianSource;
use spdelab::model::noise_quantile;
use spdelab::stats::log_log_slope;
use spdelab::{
    cameron_martin_shift_check, check_w3, eval_empirical_loglik, feldman_hajek_check, h_bound, k_bound,
    kl_commuting_gaussians, kl_estimate, laplace_pair, stationary_check, strong_radius, synthesize_data,
    validate_certificate, weak_fixed_point, with_threads, DecayLaw, Domain, Drift, Gaussian, InitialState, Model,
    NoiseMode, NormalStream, Operator, QuarticPerturbedDrift, QuarticPosterior, Vector, Verdict,
};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::output::{num, RunOutput, Table};
use crate::runner::{self, Report};

/// Shipped configs, by file name.
pub const CONFIGS: [(&str, &str); 10] = [
    ("default.toml", include_str!("../configs/default.toml")),
    ("c1_conjugate_collapse.toml", include_str!("../configs/c1_conjugate_collapse.toml")),
    ("c2_stationarity.toml", include_str!("../configs/c2_stationarity.toml")),
    ("c3_certificate_validity.toml", include_str!("../configs/c3_certificate_validity.toml")),
    ("c4_scaling.toml", include_str!("../configs/c4_scaling.toml")),
    ("c5_fixed_point.toml", include_str!("../configs/c5_fixed_point.toml")),
    ("c6_eps2_coverage.toml", include_str!("../configs/c6_eps2_coverage.toml")),
    ("c7_equivalence.toml", include_str!("../configs/c7_equivalence.toml")),
    ("c8_hygiene.toml", include_str!("../configs/c8_hygiene.toml")),
    ("c9_laplace_bounds.toml", include_str!("../configs/c9_laplace_bounds.toml")),
];

pub fn config(name: &str) -> Result<ExperimentConfig, CliError> {
    let text = CONFIGS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| CliError::config("config", format!("no shipped config named {name}")))?;
    ExperimentConfig::parse(text)
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub id: u8,
    pub title: &'static str,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
    pub budget: f64,
}

impl Outcome {
    pub fn line(&self) -> String {
        format!(
            "criterion {} {}: {} | {} ({:.2} s of {} s)",
            self.id,
            if self.pass { "PASS" } else { "FAIL" },
            self.title,
            self.detail,
            self.seconds,
            self.budget
        )
    }
}

type Check = (bool, String);

struct Criterion {
    id: u8,
    title: &'static str,
    budget: f64,
    run: fn() -> Result<Check, CliError>,
}

const CRITERIA: [Criterion; 9] = [
    Criterion {
        id: 1,
        title: "conjugate Laplace collapse",
        budget: 1.0,
        run: conjugate_collapse,
    },
    Criterion {
        id: 2,
        title: "Langevin stationarity",
        budget: 60.0,
        run: stationarity,
    },
    Criterion {
        id: 3,
        title: "strong certificate validity",
        budget: 120.0,
        run: certificate_validity,
    },
    Criterion {
        id: 4,
        title: "n^-1/2 contraction scaling",
        budget: 120.0,
        run: contraction_scaling,
    },
    Criterion {
        id: 5,
        title: "fixed-point solver correctness",
        budget: 5.0,
        run: fixed_point,
    },
    Criterion {
        id: 6,
        title: "eps2 coverage",
        budget: 10.0,
        run: eps2_coverage,
    },
    Criterion {
        id: 7,
        title: "measure-comparison checkers",
        budget: 5.0,
        run: measure_comparison,
    },
    Criterion {
        id: 8,
        title: "numerical hygiene",
        budget: 30.0,
        run: hygiene,
    },
    Criterion {
        id: 9,
        title: "H/K bound behaviour",
        budget: 180.0,
        run: laplace_bounds,
    },
];

/// Runs criterion `id` (1 to 9). Errors count as failures; so does
/// exceeding the runtime budget.
pub fn run_criterion(id: u8) -> Outcome {
    let c = &CRITERIA[(id - 1) as usize];
    let start = Instant::now();
    let result = (c.run)();
    let seconds = start.elapsed().as_secs_f64();
    let (pass, mut detail) = match result {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    let in_time = seconds < c.budget;
    if !in_time {
        detail.push_str("; over the runtime budget");
    }
    Outcome {
        id: c.id,
        title: c.title,
        pass: pass && in_time,
        detail,
        seconds,
        budget: c.budget,
    }
}

pub fn run_all() -> Vec<Outcome> {
    (1..=9).map(run_criterion).collect()
}

/// The `accept` pipeline: `acceptance.csv` plus one summary line per
/// criterion. Timings stay out of the CSV so reruns are byte-identical.
pub fn run_report() -> Result<Report, CliError> {
    let outcomes = run_all();
    let mut t = Table::new(&["criterion", "title", "pass", "detail"])?;
    for o in &outcomes {
        t.row([o.id.to_string(), o.title.to_string(), o.pass.to_string(), o.detail.clone()])?;
    }
    let mut output = RunOutput::default();
    output.add_table("acceptance.csv", t)?;
    let failed: Vec<String> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id.to_string()).collect();
    Ok(Report {
        output,
        summary: outcomes.iter().map(Outcome::line).collect(),
        failure: (!failed.is_empty()).then(|| CliError::Acceptance(format!("criteria {}", failed.join(", ")))),
    })
}

fn conjugate_collapse() -> Result<Check, CliError> {
    let cfg = config("c1_conjugate_collapse.toml")?;
    let m = cfg.model()?;
    let mut worst = 0.0f64;
    for n in [10, 1000] {
        let mn = m.with_n(n)?;
        for source in [HessianSource::Empirical, HessianSource::Population] {
            let pair = laplace_pair(&mn, source)?;
            worst = worst.max(kl_commuting_gaussians(&pair.posterior, &pair.laplace)?);
        }
    }
    Ok((worst <= 1e-10, format!("max KL {} over n in {{10, 1000}}, M = {}", num(worst), m.dim())))
}

fn stationarity() -> Result<Check, CliError> {
    let cfg = config("c2_stationarity.toml")?;
    let m = cfg.model()?;
    let r = stationary_check(&m, &cfg.sim_config())?;
    Ok((
        r.pass,
        format!("max |z| {:.3} over {} modes, {} replicas", r.max_abs_z, r.modes.len(), r.n_replicas),
    ))
}

fn certificate_validity() -> Result<Check, CliError> {
    let cfg = config("c3_certificate_validity.toml")?;
    let m = cfg.model()?;
    let samples = cfg.certificate.validate_samples;
    let mut pass = true;
    let mut worst_slack = f64::INFINITY;
    for delta in [0.5, 0.1, 0.01] {
        for n in [100, 1000, 10_000] {
            let mn = m.with_n(n)?;
            let cert = strong_radius(&StrongRateInputs::from_model(&mn, delta, 1.0)?)?;
            let v = validate_certificate(&cert, &mn, samples, cfg.seed)?
                .empirical_validation
                .expect("validation attached");
            pass &= v.pass;
            worst_slack = worst_slack.min(delta + 3.0 * v.se - v.mass);
        }
    }
    Ok((pass, format!("smallest delta + 3 SE - mass {}", num(worst_slack))))
}

fn contraction_scaling() -> Result<Check, CliError> {
    let cfg = config("c4_scaling.toml")?;
    let m = cfg.model()?;
    let sweep = cfg.sweep.as_ref().ok_or_else(|| CliError::config("sweep", "missing"))?;
    let ns = sweep.n.clone().unwrap_or_default();
    let delta = cfg.certificate.delta;
    let (mut radii, mut quantiles) = (Vec::new(), Vec::new());
    for &n in &ns {
        let mn = m.with_n(n)?;
        radii.push(strong_radius(&runner::strong_inputs(&cfg, Some(&m), n, delta)?)?.radius);
        quantiles.push(runner::posterior_quantile_radius(&mn, delta, sweep.quantile_samples, cfg.seed)?);
    }
    let x: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let (s_r, s_q) = (log_log_slope(&x, &radii), log_log_slope(&x, &quantiles));
    let ok = |s: f64| (s + 0.5).abs() <= 0.05;
    Ok((ok(s_r) && ok(s_q), format!("slopes: certified {s_r:.4}, empirical {s_q:.4}")))
}

fn fixed_point() -> Result<Check, CliError> {
    let cfg = config("c5_fixed_point.toml")?;
    let inp = cfg
        .certificate
        .weak
        .clone()
        .ok_or_else(|| CliError::config("certificate.weak", "missing"))?;
    let cert = weak_fixed_point(&inp)?;
    let (a, z) = match (&inp.psi, &inp.zeta) {
        (ScalarFn::Power { coeff, exponent }, ScalarFn::Power { coeff: cz, exponent: ez })
            if *exponent == 2.0 && *ez == 0.0 =>
        {
            (*coeff, *cz)
        }
        _ => return Err(CliError::config("certificate.weak", "expects psi = a z^2 and zeta constant")),
    };
    // a z^2 = e z + C
    let e = inp.eps * z + inp.b / inp.n as f64;
    let root = (e + (e * e + 4.0 * a * inp.constant_term()).sqrt()) / (2.0 * a);
    let rel = (cert.radius - root).abs() / root;

    let grid = geometric_grid(inp.z_max);
    let mut mismatches = Vec::new();
    for p in [1.0, 1.5, 2.0, 2.5, 3.0] {
        for q in [0.0, 0.5, 1.0, 1.5] {
            let expected = p >= q + 1.0 && p * p >= 3.0 + q * q - q;
            let got = check_w3(&ScalarFn::power(1.0, p), &ScalarFn::power(1.0, q), &grid).pass();
            if got != expected {
                mismatches.push(format!("(p {p}, q {q})"));
            }
        }
    }
    Ok((
        rel <= 1e-9 && mismatches.is_empty(),
        format!(
            "root relative error {rel:.2e}; W.3 mismatches on 20 cases: {}",
            if mismatches.is_empty() { "none".into() } else { mismatches.join(" ") }
        ),
    ))
}

fn eps2_coverage() -> Result<Check, CliError> {
    let cfg = config("c6_eps2_coverage.toml")?;
    let m = cfg.model()?;
    let draws = 10_000u64;
    let norms: Vec<f64> = (0..draws)
        .map(|i| {
            let d = synthesize_data(m.q(), m.info_a(), m.theta_star(), m.n(), cfg.seed + i, NoiseMode::Sampled)?;
            Ok(d.fluctuation().norm())
        })
        .collect::<Result<_, CliError>>()?;
    let mut pass = true;
    let mut parts = Vec::new();
    for delta in [0.1, 0.01] {
        let bound = noise_quantile(m.qaq_trace(), m.qaq_opnorm(), delta);
        let cover = norms.iter().filter(|&&z| z <= bound).count() as f64 / draws as f64;
        pass &= cover >= 1.0 - delta;
        parts.push(format!("delta {delta}: coverage {cover:.4}"));
    }
    Ok((pass, parts.join(", ")))
}

fn measure_comparison() -> Result<Check, CliError> {
    let cfg = config("c7_equivalence.toml")?;
    let m = cfg.model()?;
    let (dim, n) = (m.dim(), m.n());
    let q = Operator::power(1.0, 1.0, dim)?;
    // lambda mu = m^-s with s = 2, 0 and 1/2
    let families = [
        (1.0, Verdict::Equivalent, "m^-2"),
        (-1.0, Verdict::Singular, "1"),
        (-0.5, Verdict::Singular, "m^-1/2"),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (rh, expected, label) in families {
        let got = feldman_hajek_check(&q, &Operator::power(1.0, rh, dim)?, n).verdict;
        pass &= got == expected;
        parts.push(format!("lambda mu = {label}: {}", got.name()));
    }
    pass &= feldman_hajek_check(m.q(), m.info_a(), n).verdict == Verdict::Equivalent;

    let q2 = Operator::power(1.0, 2.0, dim)?;
    for (ra, expected) in [(2.0, true), (1.0, false)] {
        let law = DecayLaw::power(1.0, ra);
        let shift = Vector::from_law(&law, dim)?;
        let got = cameron_martin_shift_check(&q2, &shift, Some(&law)).in_cm;
        pass &= got == expected;
        parts.push(format!("shift m^-{ra}: {}", if got { "in CM" } else { "outside CM" }));
    }
    Ok((pass, parts.join(", ")))
}

/// Largest relative gap between an analytic gradient and central differences.
fn fd_gap(f: impl Fn(&[f64]) -> f64, grad: &[f64], theta: &[f64]) -> f64 {
    let mut x = theta.to_vec();
    let scale = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    (0..theta.len())
        .map(|k| {
            let h = 1e-5 * (1.0 + theta[k].abs());
            x[k] = theta[k] + h;
            let up = f(&x);
            x[k] = theta[k] - h;
            let down = f(&x);
            x[k] = theta[k];
            let fd = (up - down) / (2.0 * h);
            (fd - grad[k]).abs() / grad[k].abs().max(1e-3 * scale)
        })
        .fold(0.0, f64::max)
}

fn random_gaussian(seed: u64, i: u64, dim: usize) -> Result<Gaussian, CliError> {
    let mut s = NormalStream::new(seed, Domain::Sample, i, 2 * dim);
    let mean: Vec<f64> = (0..dim).map(|_| s.next_normal()).collect();
    let var: Vec<f64> = (0..dim).map(|_| (0.5 * s.next_normal()).exp()).collect();
    Ok(Gaussian::new(Vector::new(mean)?, Operator::explicit(var)?)?)
}

fn gradient_gap(m: &Model, kappa: f64, seed: u64) -> Result<f64, CliError> {
    let dim = m.dim();
    let mut s = NormalStream::new(seed, Domain::Audit, 0, dim);
    let theta: Vec<f64> = m
        .theta_star()
        .coeffs()
        .iter()
        .map(|t| t + 0.3 * s.next_normal())
        .collect();
    let mu = m.q().eigs().to_vec();

    // F_n against its preconditioned gradient Q grad F_n
    let ev = eval_empirical_loglik(m, &Vector::new(theta.clone())?)?;
    let grad: Vec<f64> = ev.gradient_precond.coeffs().iter().zip(&mu).map(|(g, u)| g / u).collect();
    let f = |x: &[f64]| {
        Vector::new(x.to_vec())
            .and_then(|v| eval_empirical_loglik(m, &v))
            .map_or(f64::NAN, |e| e.value)
    };
    let linear = fd_gap(f, &grad, &theta);

    // quartic model: per-mode log posterior against the drift's likelihood part
    let drift = QuarticPerturbedDrift::new(m, kappa);
    let mut g = vec![0.0; dim];
    drift.likelihood_grad(&theta, &mut g);
    let n = m.n() as f64;
    let grad: Vec<f64> = g.iter().zip(&mu).map(|(g, u)| n * g / u).collect();
    let lp = |x: &[f64]| {
        x.iter()
            .enumerate()
            .map(|(k, &v)| drift.mode_log_posterior(k, v) + 0.5 * v * v / mu[k])
            .sum::<f64>()
    };
    Ok(linear.max(fd_gap(lp, &grad, &theta)))
}

fn hygiene() -> Result<Check, CliError> {
    let cfg = config("c8_hygiene.toml")?;
    let m = cfg.model()?;
    let gap = gradient_gap(&m, cfg.kappa(), cfg.seed)?;

    let run = |k: usize| -> Result<Vec<(String, Vec<u8>)>, CliError> {
        let mut files = Vec::new();
        let pipelines: [(fn(&ExperimentConfig) -> Result<Report, CliError>, f64); 2] =
            [(runner::simulate, cfg.kappa()), (runner::certify, 0.0)];
        for (pipeline, kappa) in pipelines {
            let mut c = cfg.clone();
            if let Some(ms) = c.model.as_mut() {
                ms.kappa = kappa;
            }
            let rep = with_threads(k, || pipeline(&c))??;
            for name in rep.output.names() {
                files.push((name.to_string(), rep.output.get(name).unwrap_or_default().to_vec()));
            }
        }
        Ok(files)
    };
    let identical = run(1)? == run(8)?;

    let dim = 8;
    let mut kl_ok = true;
    for i in 0..1000u64 {
        let p = random_gaussian(cfg.seed, 2 * i, dim)?;
        let r = random_gaussian(cfg.seed, 2 * i + 1, dim)?;
        kl_ok &= kl_commuting_gaussians(&p, &p)? == 0.0 && kl_commuting_gaussians(&p, &r)? >= 0.0;
    }
    Ok((
        gap < 1e-6 && identical && kl_ok,
        format!(
            "gradient vs finite differences {gap:.2e}; threads 1 vs 8 {}; KL identities on 1000 pairs {}",
            if identical { "bit-identical" } else { "differ" },
            if kl_ok { "hold" } else { "fail" }
        ),
    ))
}

/// Langevin estimate of KL(posterior || Laplace) with its standard error,
/// plus the quadrature value for reference.
fn quartic_kl(cfg: &ExperimentConfig, m: &Model) -> Result<(f64, f64, f64), CliError> {
    let drift = QuarticPerturbedDrift::new(m, cfg.kappa());
    let post = QuarticPosterior::new(&drift)?;
    let lap = post.laplace()?;
    let sim = spdelab::SimConfig {
        n_replicas: cfg.laplace.kl_samples,
        ..cfg.sim_config()
    };
    let ens = simulate_ensemble(&drift, &InitialState::Fixed(m.theta_star().clone()), &sim)?;
    let est = kl_estimate(&post, &lap, &ens.finals)?;
    Ok((est.value, est.std_error, post.kl_quadrature(&lap)))
}

fn laplace_bounds() -> Result<Check, CliError> {
    let cfg = config("c9_laplace_bounds.toml")?;
    let m = cfg.model()?;

    let mut monotone = true;
    let mut prev = (f64::INFINITY, f64::INFINITY);
    for n in [100u64, 1000, 10_000, 100_000] {
        let inp = runner::bound_inputs(&cfg, &m, n)?;
        let (h, k) = (h_bound(&inp)?.value, k_bound(&inp)?.value);
        monotone &= h <= prev.0 && k <= prev.1;
        prev = (h, k);
    }

    let ns = [100u64, 1000, 10_000];
    let mut rows = Vec::new();
    for &n in &ns {
        let mn = m.with_n(n)?;
        let (kl, se, quad) = quartic_kl(&cfg, &mn)?;
        let h1 = h_bound(&runner::bound_inputs(&cfg, &m, n)?)?.value;
        rows.push((n, kl, se, quad, h1));
    }
    // c1 = c2 = c scales H linearly; fixed once at the smallest n
    let (_, kl0, _, _, h0) = rows[0];
    let c = kl0.max(0.0) / h0;
    let mut below = true;
    let mut parts = vec![format!("calibrated c1 = c2 = {c:.3e}")];
    for &(n, kl, se, quad, h1) in &rows {
        below &= kl - 3.0 * se <= c * h1;
        parts.push(format!("n {n}: KL {kl:.3e} +- {se:.1e} (quadrature {quad:.3e}), H {:.3e}", c * h1));
    }
    Ok((
        monotone && below && kl0 > 3.0 * rows[0].2,
        format!("H and K nonincreasing: {monotone}; {}", parts.join("; ")),
    ))
}
