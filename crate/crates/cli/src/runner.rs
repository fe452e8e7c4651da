//! The experiment pipelines behind each subcommand.

use spdelab::audit::{model_analytic_constants, AnalyticConstants};
use spdelab::certificates::StrongRateInputs;
use spdelab::langevin::{compare_with_posterior, simulate_ensemble};
use spdelab::laplace::{bvm_audit_drift, calibrate_sigma, kl_mode_contributions, KlEstimate};
use spdelab::stats::{log_log_slope, quantile};
use spdelab::{
    audit_drift, feldman_hajek_check, h_bound, k_bound, kl_commuting_gaussians, kl_estimate, laplace_pair,
    sample_gaussian_many, strong_radius, validate_certificate, weak_fixed_point, AuditReport,
    BoundInputs, Certificate, Drift, InitialState, LinearGaussianDrift, Model, QuarticPerturbedDrift, QuarticPosterior,
};

use crate::config::{CertificateKindConfig, ExperimentConfig, SweepParameter};
use crate::error::CliError;
use crate::output::{num, opt, RunOutput, Table};

/// Conditions a stationarity claim rests on.
pub const STATIONARY_CONDITIONS: [&str; 4] = ["A.1 (F_n)", "A.1 (V)", "A.2", "B"];

/// Conditions the strong-concavity certificate rests on.
pub const STRONG_CONDITIONS: [&str; 5] = ["A.1 (F_n)", "A.1 (V)", "A.2", "B", "C.1"];

/// Outputs of one pipeline. `failure` is set when the run completed but a
/// blocking condition must still be reported through the exit code.
#[derive(Debug, Default)]
pub struct Report {
    pub output: RunOutput,
    pub summary: Vec<String>,
    pub failure: Option<CliError>,
}

enum ModelDrift {
    Linear(LinearGaussianDrift<f64>),
    Quartic(QuarticPerturbedDrift<f64>),
}

impl ModelDrift {
    fn new(m: &Model, kappa: f64) -> Self {
        if kappa == 0.0 {
            Self::Linear(LinearGaussianDrift::new(m))
        } else {
            Self::Quartic(QuarticPerturbedDrift::new(m, kappa))
        }
    }

    fn as_dyn(&self) -> &dyn Drift<f64> {
        match self {
            Self::Linear(d) => d,
            Self::Quartic(d) => d,
        }
    }
}

/// Assumption audit of the configured drift.
pub fn audit_report(cfg: &ExperimentConfig, m: &Model) -> AuditReport {
    let (pairs, radius, seed) = (cfg.audit.n_pairs, cfg.audit.radius, cfg.seed);
    let kappa = cfg.kappa();
    let drift = ModelDrift::new(m, kappa);
    let analytic = if kappa == 0.0 {
        model_analytic_constants(m)
    } else {
        AnalyticConstants::default()
    };
    let mut report = audit_drift(drift.as_dyn(), pairs, radius, seed, analytic);
    report
        .entries
        .extend(bvm_audit_drift(drift.as_dyn(), pairs, radius, seed, kappa == 0.0).entries);
    report
}

fn audit_table(report: &AuditReport) -> Result<Table, CliError> {
    let mut t = Table::new(&["condition", "status", "sampled", "analytic", "witness_value", "note"])?;
    for e in &report.entries {
        t.row([
            e.condition.to_string(),
            e.status.as_str().to_string(),
            num(e.sampled),
            opt(e.analytic),
            opt(e.witness.as_ref().map(|w| w.value)),
            e.note.clone(),
        ])?;
    }
    Ok(t)
}

fn key_value_table(text: &str) -> Result<Table, CliError> {
    let mut t = Table::new(&["key", "value"])?;
    let mut section = String::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if let Some(s) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = format!("{s}.");
        } else if let Some((k, v)) = line.split_once(" = ") {
            t.row([format!("{section}{k}"), v.to_string()])?;
        }
    }
    Ok(t)
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let m = cfg.model()?;
    let kappa = cfg.kappa();
    if kappa == 0.0 {
        audit_report(cfg, &m).require(&STATIONARY_CONDITIONS)?;
    }
    let drift = ModelDrift::new(&m, kappa);
    let sim = cfg.sim_config();
    let resolved = sim.resolve(drift.as_dyn())?;
    let ens = simulate_ensemble(drift.as_dyn(), &InitialState::Fixed(m.theta_star().clone()), &sim)?;

    let mut report = Report::default();
    let mut moments = Vec::new();
    ens.trace.write_csv(&mut moments)?;
    report.output.add_bytes("moments.csv", moments);

    let mut modes = Table::new(&["mode", "mean", "variance", "se_mean", "se_variance"])?;
    for (k, s) in ens.trace.per_mode_stats.iter().enumerate() {
        modes.row([(k + 1).to_string(), num(s.mean), num(s.variance), num(s.se_mean), num(s.se_variance)])?;
    }
    report.output.add_table("modes.csv", modes)?;
    report.summary.push(format!(
        "scheme {} dt {} t_end {} replicas {}",
        resolved.scheme.name(),
        num(resolved.dt),
        num(resolved.t_end),
        sim.n_replicas
    ));

    if kappa == 0.0 {
        let dist = compare_with_posterior(&m, &ens.finals, resolved.t_end)?;
        let mut bytes = Vec::new();
        dist.write_csv(&mut bytes)?;
        report.output.add_bytes("stationarity.csv", bytes);
        report.summary.push(format!(
            "stationarity: max |z| = {:.3} ({})",
            dist.max_abs_z,
            if dist.pass { "pass" } else { "fail" }
        ));
    }
    Ok(report)
}

/// Strong-rate inputs at `(n, delta)`: the explicit table with `n` and
/// `delta` substituted, or the model's constants.
pub fn strong_inputs(cfg: &ExperimentConfig, m: Option<&Model>, n: u64, delta: f64) -> Result<StrongRateInputs, CliError> {
    match (&cfg.certificate.strong, m) {
        (Some(s), _) => Ok(StrongRateInputs { n, delta, ..s.clone() }),
        (None, Some(m)) => Ok(StrongRateInputs::from_model(&m.with_n(n)?, delta, cfg.certificate.c_universal)?),
        (None, None) => Err(CliError::config(
            "certificate.strong",
            "needed when the config has no [model] table",
        )),
    }
}

pub fn certify(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let model = cfg.model.as_ref().map(|s| s.build(cfg.seed)).transpose()?;
    let c = &cfg.certificate;
    let mut report = Report::default();
    let cert: Certificate = match c.kind {
        CertificateKindConfig::Strong => {
            if let Some(m) = &model {
                if cfg.kappa() != 0.0 {
                    return Err(CliError::config(
                        "model.kappa",
                        "the strong certificate is available for the conjugate model only",
                    ));
                }
                let audit = audit_report(cfg, m);
                report.output.add_table("audit.csv", audit_table(&audit)?)?;
                if let Err(e) = audit.require(&STRONG_CONDITIONS) {
                    report.summary.push(e.to_string());
                    report.failure = Some(e.into());
                    return Ok(report);
                }
            }
            let inputs = match &c.strong {
                Some(s) => s.clone(),
                None => strong_inputs(cfg, model.as_ref(), model.as_ref().map_or(1, |m| m.n()), c.delta)?,
            };
            strong_radius(&inputs)?
        }
        CertificateKindConfig::Weak => {
            let inputs = c
                .weak
                .as_ref()
                .ok_or_else(|| CliError::config("certificate.weak", "required for kind = \"weak\""))?;
            weak_fixed_point(inputs)?
        }
    };
    let cert = match &model {
        Some(m) if c.validate_samples > 0 && cfg.kappa() == 0.0 => {
            validate_certificate(&cert, m, c.validate_samples, cfg.seed)?
        }
        _ => cert,
    };
    report.summary.push(format!(
        "{} radius {} ({})",
        cert.kind.name(),
        num(cert.radius),
        if cert.valid { "valid" } else { "void" }
    ));
    if let Some(v) = &cert.empirical_validation {
        report.summary.push(format!(
            "tail mass {} +- {} vs delta {} ({})",
            num(v.mass),
            num(v.se),
            num(v.delta),
            if v.pass { "pass" } else { "fail" }
        ));
    }
    report.output.add_table("certificate.csv", key_value_table(&cert.canonical_text())?)?;
    Ok(report)
}

/// `1 - delta` quantile of `||theta - theta*||` under the exact posterior.
pub fn posterior_quantile_radius(m: &Model, delta: f64, samples: usize, seed: u64) -> Result<f64, CliError> {
    let post = spdelab::exact_posterior(m)?;
    let dists: Vec<f64> = sample_gaussian_many(&post, seed, samples)
        .iter()
        .map(|x| x.distance(m.theta_star()))
        .collect();
    Ok(quantile(&dists, 1.0 - delta))
}

/// KL(posterior || Laplace) for the configured model: closed form for the
/// conjugate model, quadrature otherwise.
pub fn laplace_kl(m: &Model, kappa: f64) -> Result<f64, CliError> {
    if kappa == 0.0 {
        let pair = laplace_pair(m, spdelab::laplace::HessianSource::Empirical)?;
        Ok(kl_commuting_gaussians(&pair.posterior, &pair.laplace)?)
    } else {
        let post = QuarticPosterior::new(&QuarticPerturbedDrift::new(m, kappa))?;
        Ok(post.kl_quadrature(&post.laplace()?))
    }
}

/// Bound inputs at sample size `n`: the explicit table, or derived from the
/// model. The derived `a_smooth` is the audit's sampled lower bound.
pub fn bound_inputs(cfg: &ExperimentConfig, m: &Model, n: u64) -> Result<BoundInputs, CliError> {
    let l = &cfg.laplace;
    if let Some(b) = &l.bounds {
        return Ok(b.with_n(n));
    }
    let delta = cfg.certificate.delta;
    let mn = m.with_n(n)?;
    let kappa = cfg.kappa();
    let a_smooth = if kappa == 0.0 {
        0.0
    } else {
        let drift = QuarticPerturbedDrift::new(&mn, kappa);
        bvm_audit_drift(&drift, cfg.audit.n_pairs, cfg.audit.radius, cfg.seed, false)
            .entry("BvM.1")
            .map_or(0.0, |e| e.sampled)
    };
    let sigma = if l.sigma_datasets > 0 {
        calibrate_sigma(m.q(), m.info_a(), m.theta_star(), n, delta, l.sigma_datasets, cfg.seed)?
    } else {
        1.0
    };
    Ok(BoundInputs {
        a_smooth,
        eps1_2: 0.0,
        eps2_2: spdelab::model::eps2(mn.qaq_trace(), mn.qaq_opnorm(), n as f64, delta),
        l2: 0.0,
        alpha: l.alpha,
        sigma,
        lambda_min: m.info_a().min_eig(),
        q_opnorm: m.q().op_norm(),
        tr_q: m.q().trace()?.value,
        n,
        delta,
        c1: l.c1,
        c2: l.c2,
    })
}

pub fn laplace(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let m = cfg.model()?;
    let kappa = cfg.kappa();
    let l = &cfg.laplace;
    let mut report = Report::default();
    let mut kl_rows: Vec<(&str, f64, Option<f64>, usize)> = Vec::new();

    if kappa == 0.0 {
        let pair = laplace_pair(&m, l.hessian)?;
        let contrib = kl_mode_contributions(&pair.posterior, &pair.laplace)?;
        let mut t = Table::new(&[
            "mode",
            "posterior_mean",
            "posterior_variance",
            "laplace_mean",
            "laplace_variance",
            "kl",
        ])?;
        for k in 0..m.dim() {
            t.row([
                (k + 1).to_string(),
                num(pair.posterior.mean().coeffs()[k]),
                num(pair.posterior.cov().eigs()[k]),
                num(pair.laplace.mean().coeffs()[k]),
                num(pair.laplace.cov().eigs()[k]),
                num(contrib[k]),
            ])?;
        }
        report.output.add_table("laplace_modes.csv", t)?;
        kl_rows.push(("closed_form", kl_commuting_gaussians(&pair.posterior, &pair.laplace)?, None, 0));
        if l.kl_samples > 0 {
            let draws = sample_gaussian_many(&pair.posterior, cfg.seed, l.kl_samples);
            let e: KlEstimate = kl_estimate(&pair.posterior, &pair.laplace, &draws)?;
            kl_rows.push(("monte_carlo", e.value, Some(e.std_error), e.n_samples));
        }
    } else {
        let drift = QuarticPerturbedDrift::new(&m, kappa);
        let post = QuarticPosterior::new(&drift)?;
        let lap = post.laplace()?;
        let mut t = Table::new(&["mode", "map", "laplace_variance"])?;
        for k in 0..m.dim() {
            t.row([(k + 1).to_string(), num(post.map()[k]), num(lap.cov().eigs()[k])])?;
        }
        report.output.add_table("laplace_modes.csv", t)?;
        kl_rows.push(("quadrature", post.kl_quadrature(&lap), None, 0));
        if l.kl_samples > 0 {
            let sim = spdelab::SimConfig {
                n_replicas: l.kl_samples,
                ..cfg.sim_config()
            };
            let ens = simulate_ensemble(&drift, &InitialState::Fixed(m.theta_star().clone()), &sim)?;
            let e = kl_estimate(&post, &lap, &ens.finals)?;
            kl_rows.push(("langevin", e.value, Some(e.std_error), e.n_samples));
        }
    }
    let mut t = Table::new(&["method", "value", "std_error", "n_samples"])?;
    for (method, v, se, ns) in &kl_rows {
        t.row([method.to_string(), num(*v), opt(*se), ns.to_string()])?;
        report.summary.push(format!("KL ({method}) = {}", num(*v)));
    }
    report.output.add_table("kl.csv", t)?;

    let fh = feldman_hajek_check(m.q(), m.info_a(), m.n());
    report.summary.push(format!("Feldman-Hajek: {}", fh.verdict.name()));
    report.output.add_table("feldman_hajek.csv", key_value_table(&fh.canonical_text())?)?;

    let mut t = Table::new(&["name", "value", "term1", "term2", "advisory_one_over_n"])?;
    match bound_inputs(cfg, &m, m.n()) {
        Ok(inp) => {
            for b in [h_bound(&inp)?, k_bound(&inp)?] {
                t.row([b.name.to_string(), num(b.value), num(b.term1), num(b.term2), opt(b.advisory_one_over_n)])?;
                report.summary.push(format!("{} = {}", b.name, num(b.value)));
            }
        }
        Err(CliError::Core(e @ spdelab::Error::VacuousBound { .. })) => {
            report.summary.push(format!("bounds unavailable: {e}"));
            report.failure = Some(CliError::Core(e));
        }
        Err(e) => return Err(e),
    }
    report.output.add_table("bounds.csv", t)?;
    Ok(report)
}

pub fn sweep(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let s = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::config("sweep", "the sweep subcommand needs a [sweep] table"))?;
    let param = s.parameter()?;
    let model = cfg.model.as_ref().map(|s| s.build(cfg.seed)).transpose()?;
    let kappa = cfg.kappa();
    let base_n = model.as_ref().map(|m| m.n()).or(cfg.certificate.strong.as_ref().map(|s| s.n));
    let points: Vec<(u64, f64)> = match param {
        SweepParameter::N => s.n.iter().flatten().map(|&n| (n, cfg.certificate.delta)).collect(),
        SweepParameter::Delta => {
            let n = base_n.ok_or_else(|| CliError::config("model", "a delta sweep needs a base n"))?;
            s.delta.iter().flatten().map(|&d| (n, d)).collect()
        }
    };
    if (s.quantile_samples > 0 || s.kl) && model.is_none() {
        return Err(CliError::config("model", "quantile and KL columns need a [model] table"));
    }
    if s.quantile_samples > 0 && kappa != 0.0 {
        return Err(CliError::config("sweep.quantile_samples", "needs the conjugate model (kappa = 0)"));
    }

    let mut header = vec!["n", "delta", "radius"];
    if s.quantile_samples > 0 {
        header.push("quantile_radius");
    }
    if s.kl {
        header.push("kl");
    }
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); header.len() - 2];
    let mut t = Table::new(&header)?;
    for &(n, delta) in &points {
        let mut row = vec![strong_radius(&strong_inputs(cfg, model.as_ref(), n, delta)?)?.radius];
        if let Some(m) = &model {
            let mn = m.with_n(n)?;
            if s.quantile_samples > 0 {
                row.push(posterior_quantile_radius(&mn, delta, s.quantile_samples, cfg.seed)?);
            }
            if s.kl {
                row.push(laplace_kl(&mn, kappa)?);
            }
        }
        for (c, v) in columns.iter_mut().zip(&row) {
            c.push(*v);
        }
        t.row([n.to_string(), num(delta)].into_iter().chain(row.iter().map(|&v| num(v))))?;
    }
    let mut report = Report::default();
    report.output.add_table("sweep.csv", t)?;

    let x: Vec<f64> = points
        .iter()
        .map(|&(n, d)| if param == SweepParameter::N { n as f64 } else { d })
        .collect();
    let mut fit = Table::new(&["quantity", "against", "slope"])?;
    let against = if param == SweepParameter::N { "n" } else { "delta" };
    for (name, ys) in header[2..].iter().zip(&columns) {
        if ys.iter().all(|&y| y > 0.0) {
            let slope = log_log_slope(&x, ys);
            fit.row([name.to_string(), against.to_string(), num(slope)])?;
            report.summary.push(format!("log-log slope of {name} vs {against}: {slope:.4}"));
        }
    }
    report.output.add_table("sweep_fit.csv", fit)?;
    Ok(report)
}

pub fn audit(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let m = cfg.model()?;
    let rep = audit_report(cfg, &m);
    let mut report = Report::default();
    report.output.add_table("audit.csv", audit_table(&rep)?)?;
    for e in &rep.entries {
        report.summary.push(format!("{}: {}", e.condition, e.status.as_str()));
    }
    let failed = rep.failed();
    if !failed.is_empty() {
        report.failure = Some(CliError::Audit(failed.join(", ")));
    }
    Ok(report)
}
