//! Contraction-radius certificates.
//!
//! The strong certificate is a closed-form radius under uniform concavity;
//! the weak certificate solves the fixed-point equation
//! `psi(z) = eps zeta(z) z + (B/n) z + tr(Q)/n + log(1/delta) ||Q||_op / n`
//! for its unique positive root.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::langevin::{tail_mass_estimate, Sampler};
use crate::model::{check_delta, model_constants, ModelInstance};
use crate::scalar::{fmt17, lit, to_f64, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CertificateKind {
    Strong,
    Weak,
}

impl CertificateKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Strong => "strong",
            Self::Weak => "weak",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmissibilityEntry {
    pub condition: String,
    pub pass: bool,
    /// Worst normalised margin over the checked points; negative on failure.
    pub margin: Option<f64>,
    /// First point at which the condition fails.
    pub witness: Option<f64>,
}

impl AdmissibilityEntry {
    fn new(condition: &str, pass: bool, margin: Option<f64>, witness: Option<f64>) -> Self {
        Self {
            condition: condition.to_string(),
            pass,
            margin,
            witness,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalValidation {
    /// Posterior mass outside the certified ball.
    pub mass: f64,
    pub se: f64,
    pub delta: f64,
    pub n_samples: usize,
    /// `mass <= delta + 3 se`.
    pub pass: bool,
    /// `delta - mass`.
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub kind: CertificateKind,
    /// Advisory only unless `valid`.
    pub radius: f64,
    pub delta: f64,
    /// Named additive terms (strong) or solver diagnostics (weak).
    pub terms: Vec<(String, f64)>,
    /// Canonical `key -> value` rendering of the inputs.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of the canonical inputs text.
    pub inputs_digest: String,
    pub admissibility: Vec<AdmissibilityEntry>,
    pub empirical_validation: Option<EmpiricalValidation>,
    /// Positive radius and every admissibility entry passed.
    pub valid: bool,
}

fn digest_inputs(inputs: &BTreeMap<String, String>) -> String {
    let mut text = String::new();
    for (k, v) in inputs {
        let _ = writeln!(text, "{k} = {v}");
    }
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl Certificate {
    fn build(
        kind: CertificateKind,
        radius: f64,
        delta: f64,
        terms: Vec<(String, f64)>,
        inputs: BTreeMap<String, String>,
        admissibility: Vec<AdmissibilityEntry>,
    ) -> Self {
        let valid = radius > 0.0 && admissibility.iter().all(|a| a.pass);
        Self {
            kind,
            radius,
            delta,
            terms,
            inputs_digest: digest_inputs(&inputs),
            inputs,
            admissibility,
            empirical_validation: None,
            valid,
        }
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }

    /// Diff-stable text: sections in fixed order, keys sorted, numbers with
    /// 17 significant digits.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "kind = {}", self.kind.name());
        let _ = writeln!(s, "radius = {}", fmt17(self.radius));
        let _ = writeln!(s, "valid = {}", self.valid);
        let _ = writeln!(s, "inputs_digest = {}", self.inputs_digest);
        let _ = writeln!(s, "\n[inputs]");
        for (k, v) in &self.inputs {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "\n[terms]");
        let terms: BTreeMap<&str, f64> = self.terms.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        for (k, v) in terms {
            let _ = writeln!(s, "{k} = {}", fmt17(v));
        }
        let _ = writeln!(s, "\n[admissibility]");
        let adm: BTreeMap<&str, &AdmissibilityEntry> =
            self.admissibility.iter().map(|a| (a.condition.as_str(), a)).collect();
        for (k, a) in adm {
            let _ = writeln!(
                s,
                "{k} = {}; margin = {}; witness = {}",
                if a.pass { "pass" } else { "fail" },
                a.margin.map_or("none".into(), fmt17),
                a.witness.map_or("none".into(), fmt17)
            );
        }
        if let Some(v) = &self.empirical_validation {
            let _ = writeln!(s, "\n[validation]");
            let _ = writeln!(s, "delta = {}", fmt17(v.delta));
            let _ = writeln!(s, "mass = {}", fmt17(v.mass));
            let _ = writeln!(s, "n_samples = {}", v.n_samples);
            let _ = writeln!(s, "pass = {}", v.pass);
            let _ = writeln!(s, "se = {}", fmt17(v.se));
            let _ = writeln!(s, "slack = {}", fmt17(v.slack));
        }
        s
    }
}

fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

fn check_nonneg(name: &'static str, x: f64) -> Result<()> {
    if !(x >= 0.0 && x.is_finite()) {
        return Err(invalid(name, format!("must be finite and >= 0, got {x}")));
    }
    Ok(())
}

fn check_pos(name: &'static str, x: f64) -> Result<()> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(invalid(name, format!("must be finite and > 0, got {x}")));
    }
    Ok(())
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrongRateInputs {
    pub tr_q: f64,
    pub q_opnorm: f64,
    /// Concavity constant.
    pub mu: f64,
    /// Prior-control constant.
    pub b: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub n: u64,
    pub delta: f64,
    #[serde(default = "one")]
    pub c_universal: f64,
}

impl StrongRateInputs {
    /// Inputs of the linear Gaussian model at `(n, delta)`.
    pub fn from_model<T: Real>(m: &ModelInstance<T>, delta: f64, c_universal: f64) -> Result<Self> {
        let k = model_constants(m, lit::<T>(delta))?;
        let tr = m.q().trace()?.value;
        Ok(Self {
            tr_q: to_f64(tr),
            q_opnorm: to_f64(m.q().op_norm()),
            mu: to_f64(k.mu),
            b: to_f64(k.b),
            eps1: to_f64(k.eps1),
            eps2: to_f64(k.eps2),
            n: m.n(),
            delta,
            c_universal,
        })
    }

    fn validate(&self) -> Result<()> {
        check_pos("tr_q", self.tr_q)?;
        check_pos("q_opnorm", self.q_opnorm)?;
        check_pos("mu", self.mu)?;
        check_nonneg("b", self.b)?;
        check_nonneg("eps1", self.eps1)?;
        check_nonneg("eps2", self.eps2)?;
        check_pos("c_universal", self.c_universal)?;
        if self.n == 0 {
            return Err(invalid("n", "must be positive"));
        }
        check_delta(self.delta)
    }

    fn canonical(&self) -> BTreeMap<String, String> {
        [
            ("b", fmt17(self.b)),
            ("c_universal", fmt17(self.c_universal)),
            ("delta", fmt17(self.delta)),
            ("eps1", fmt17(self.eps1)),
            ("eps2", fmt17(self.eps2)),
            ("mu", fmt17(self.mu)),
            ("n", self.n.to_string()),
            ("q_opnorm", fmt17(self.q_opnorm)),
            ("tr_q", fmt17(self.tr_q)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// `c sqrt(tr Q / (n mu)) + B/(n mu) + eps2/mu + c sqrt(||Q|| log(1/delta) / (n mu))`.
pub fn strong_radius(inp: &StrongRateInputs) -> Result<Certificate> {
    inp.validate()?;
    let limit = inp.mu / 6.0;
    if inp.eps1 > limit {
        return Err(Error::HypothesisUnmet {
            eps1: inp.eps1,
            limit,
        });
    }
    let nmu = inp.n as f64 * inp.mu;
    let trace_term = inp.c_universal * (inp.tr_q / nmu).sqrt();
    let prior_term = inp.b / nmu;
    let noise_term = inp.eps2 / inp.mu;
    let conf_term = inp.c_universal * (inp.q_opnorm * inp.delta.recip().ln() / nmu).sqrt();
    let radius = trace_term + prior_term + noise_term + conf_term;
    let terms = vec![
        ("trace".to_string(), trace_term),
        ("prior".to_string(), prior_term),
        ("noise".to_string(), noise_term),
        ("confidence".to_string(), conf_term),
    ];
    let adm = vec![
        AdmissibilityEntry::new("eps1 <= mu/6", true, Some(limit - inp.eps1), None),
        AdmissibilityEntry::new("radius > 0", radius > 0.0, Some(radius), None),
    ];
    Ok(Certificate::build(
        CertificateKind::Strong,
        radius,
        inp.delta,
        terms,
        inp.canonical(),
        adm,
    ))
}

/// Scalar function descriptor for `psi` and `zeta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScalarFn {
    /// `coeff * z^exponent`.
    Power { coeff: f64, exponent: f64 },
    /// Monotone piecewise-cubic (PCHIP) through the points; linear beyond
    /// the end points with the end slopes.
    Tabulated { x: Vec<f64>, y: Vec<f64> },
}

impl ScalarFn {
    pub fn power(coeff: f64, exponent: f64) -> Self {
        Self::Power { coeff, exponent }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Power { coeff, exponent } => {
                check_nonneg("coeff", *coeff)?;
                if !exponent.is_finite() {
                    return Err(invalid("exponent", "must be finite"));
                }
            }
            Self::Tabulated { x, y } => {
                if x.len() < 2 || x.len() != y.len() {
                    return Err(invalid("tabulated", "need at least two (x, y) points of equal length"));
                }
                if x.iter().chain(y).any(|v| !v.is_finite()) {
                    return Err(invalid("tabulated", "points must be finite"));
                }
                if x.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(invalid("tabulated", "x must be strictly increasing"));
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, z: f64) -> f64 {
        match self {
            Self::Power { coeff, exponent } => {
                if *exponent == 0.0 {
                    *coeff
                } else {
                    coeff * z.powf(*exponent)
                }
            }
            Self::Tabulated { x, y } => pchip_eval(x, y, z),
        }
    }

    fn canonical(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| fmt17(*x)).collect::<Vec<_>>().join(", ");
        match self {
            Self::Power { coeff, exponent } => {
                format!("power(coeff = {}, exponent = {})", fmt17(*coeff), fmt17(*exponent))
            }
            Self::Tabulated { x, y } => format!("tabulated(x = [{}], y = [{}])", list(x), list(y)),
        }
    }

    fn d1(&self, r: f64) -> f64 {
        let h = r * 1e-5;
        (self.eval(r + h) - self.eval(r - h)) / (2.0 * h)
    }

    fn d2(&self, r: f64) -> f64 {
        let h = r * 1e-5;
        (self.eval(r + h) - 2.0 * self.eval(r) + self.eval(r - h)) / (h * h)
    }
}

fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let del: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
    if n == 2 {
        return vec![del[0], del[0]];
    }
    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        if del[k - 1] * del[k] > 0.0 {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            d[k] = (w1 + w2) / (w1 / del[k - 1] + w2 / del[k]);
        }
    }
    let end = |h0: f64, h1: f64, d0: f64, d1: f64| {
        let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if s.signum() != d0.signum() {
            0.0
        } else if d0.signum() != d1.signum() && s.abs() > 3.0 * d0.abs() {
            3.0 * d0
        } else {
            s
        }
    };
    d[0] = end(h[0], h[1], del[0], del[1]);
    d[n - 1] = end(h[n - 2], h[n - 3], del[n - 2], del[n - 3]);
    d
}

fn pchip_eval(x: &[f64], y: &[f64], z: f64) -> f64 {
    let d = pchip_slopes(x, y);
    let n = x.len();
    if z <= x[0] {
        return y[0] + d[0] * (z - x[0]);
    }
    if z >= x[n - 1] {
        return y[n - 1] + d[n - 1] * (z - x[n - 1]);
    }
    let k = x.partition_point(|&v| v <= z) - 1;
    let h = x[k + 1] - x[k];
    let t = (z - x[k]) / h;
    let t2 = t * t;
    let t3 = t2 * t;
    (2.0 * t3 - 3.0 * t2 + 1.0) * y[k]
        + (t3 - 2.0 * t2 + t) * h * d[k]
        + (-2.0 * t3 + 3.0 * t2) * y[k + 1]
        + (t3 - t2) * h * d[k + 1]
}

fn default_z_max() -> f64 {
    1e3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeakRateInputs {
    pub psi: ScalarFn,
    pub zeta: ScalarFn,
    pub eps: f64,
    pub b: f64,
    pub tr_q: f64,
    pub q_opnorm: f64,
    pub n: u64,
    pub delta: f64,
    /// Upper end of the search grid.
    #[serde(default = "default_z_max")]
    pub z_max: f64,
}

impl WeakRateInputs {
    fn validate(&self) -> Result<()> {
        self.psi.validate()?;
        self.zeta.validate()?;
        check_nonneg("eps", self.eps)?;
        check_nonneg("b", self.b)?;
        check_nonneg("tr_q", self.tr_q)?;
        check_nonneg("q_opnorm", self.q_opnorm)?;
        check_pos("z_max", self.z_max)?;
        if self.n == 0 {
            return Err(invalid("n", "must be positive"));
        }
        check_delta(self.delta)
    }

    /// Constant part `tr(Q)/n + log(1/delta) ||Q||_op / n` of the right side.
    pub fn constant_term(&self) -> f64 {
        let n = self.n as f64;
        self.tr_q / n + self.delta.recip().ln() * self.q_opnorm / n
    }

    pub fn rhs(&self, z: f64) -> f64 {
        self.eps * self.zeta.eval(z) * z + self.b / self.n as f64 * z + self.constant_term()
    }

    pub fn residual(&self, z: f64) -> f64 {
        self.psi.eval(z) - self.rhs(z)
    }

    fn canonical(&self) -> BTreeMap<String, String> {
        [
            ("b", fmt17(self.b)),
            ("delta", fmt17(self.delta)),
            ("eps", fmt17(self.eps)),
            ("n", self.n.to_string()),
            ("psi", self.psi.canonical()),
            ("q_opnorm", fmt17(self.q_opnorm)),
            ("tr_q", fmt17(self.tr_q)),
            ("z_max", fmt17(self.z_max)),
            ("zeta", self.zeta.canonical()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

pub const GRID_POINTS: usize = 1000;
pub const GRID_SPAN: f64 = 1e6;

/// `GRID_POINTS` geometric points on `[z_max / GRID_SPAN, z_max]`.
pub fn geometric_grid(z_max: f64) -> Vec<f64> {
    let lo = (z_max / GRID_SPAN).ln();
    let hi = z_max.ln();
    (0..GRID_POINTS)
        .map(|i| {
            if i == GRID_POINTS - 1 {
                z_max
            } else {
                (lo + (hi - lo) * i as f64 / (GRID_POINTS - 1) as f64).exp()
            }
        })
        .collect()
}

/// Liminf of `psi(z) / (z zeta(z))`, estimated as the minimum over the upper
/// half of the grid.
pub fn w4_liminf(psi: &ScalarFn, zeta: &ScalarFn, grid: &[f64]) -> f64 {
    grid[grid.len() / 2..]
        .iter()
        .map(|&z| {
            let d = z * zeta.eval(z);
            if d > 0.0 {
                psi.eval(z) / d
            } else {
                f64::INFINITY
            }
        })
        .fold(f64::INFINITY, f64::min)
}

const BISECT_REL: f64 = 1e-10;
const RESIDUAL_REL: f64 = 1e-9;

fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, scale: impl Fn(f64) -> f64) -> f64 {
    let mut flo = f(lo);
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm < 0.0) == (flo < 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
        if hi - lo <= BISECT_REL * hi && f(0.5 * (lo + hi)).abs() <= RESIDUAL_REL * scale(0.5 * (lo + hi)) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Unique positive root of the fixed-point equation.
pub fn weak_fixed_point(inp: &WeakRateInputs) -> Result<Certificate> {
    inp.validate()?;
    let grid = geometric_grid(inp.z_max);
    let liminf = w4_liminf(&inp.psi, &inp.zeta, &grid);
    if !(liminf > inp.eps) {
        return Err(Error::W4Violated {
            reason: format!(
                "grid liminf of psi(z)/(z zeta(z)) is {liminf:e}, not above eps = {:e}",
                inp.eps
            ),
        });
    }

    let mut terms = vec![("w4_liminf".to_string(), liminf)];
    let mut adm = vec![AdmissibilityEntry::new(
        "W.4",
        true,
        Some(liminf - inp.eps),
        None,
    )];
    adm.extend(check_w1_w2(&inp.psi, &inp.zeta, &grid));

    let constant = inp.constant_term();
    if constant == 0.0 && inp.psi.eval(0.0) >= 0.0 {
        adm.push(AdmissibilityEntry::new("radius > 0", false, Some(0.0), None));
        terms.push(("sign_changes".to_string(), 0.0));
        return Ok(Certificate::build(
            CertificateKind::Weak,
            0.0,
            inp.delta,
            terms,
            inp.canonical(),
            adm,
        ));
    }

    let res: Vec<f64> = grid.iter().map(|&z| inp.residual(z)).collect();
    let changes = res.windows(2).filter(|w| (w[0] < 0.0) != (w[1] < 0.0)).count();
    if changes > 1 {
        return Err(Error::NonAdmissiblePair {
            sign_changes: changes,
        });
    }
    let scale = |z: f64| inp.psi.eval(z).abs().max(1.0);
    let z_star = if changes == 1 {
        let k = res.windows(2).position(|w| (w[0] < 0.0) != (w[1] < 0.0)).unwrap();
        bisect(|z| inp.residual(z), grid[k], grid[k + 1], scale)
    } else if res[0] >= 0.0 {
        // root lies below the grid
        if inp.residual(0.0) >= 0.0 {
            0.0
        } else {
            bisect(|z| inp.residual(z), 0.0, grid[0], scale)
        }
    } else {
        return Err(Error::W4Violated {
            reason: format!("no sign change of the residual on (0, {}]", inp.z_max),
        });
    };
    terms.push(("sign_changes".to_string(), changes as f64));
    terms.push(("residual".to_string(), inp.residual(z_star)));
    adm.push(AdmissibilityEntry::new("radius > 0", z_star > 0.0, Some(z_star), None));
    let w3 = check_w3(&inp.psi, &inp.zeta, &grid);
    adm.extend(w3.entries);

    Ok(Certificate::build(
        CertificateKind::Weak,
        z_star,
        inp.delta,
        terms,
        inp.canonical(),
        adm,
    ))
}

fn check_w1_w2(psi: &ScalarFn, zeta: &ScalarFn, grid: &[f64]) -> Vec<AdmissibilityEntry> {
    let tol = 1e-12;
    let mut w1_fail = None;
    let mut w2_fail = None;
    for w in grid.windows(3) {
        let (a, b, c) = (psi.eval(w[0]), psi.eval(w[1]), psi.eval(w[2]));
        let scale = tol * c.abs().max(1e-300);
        // nondecreasing, and convex via the chord slope test
        let s1 = (b - a) / (w[1] - w[0]);
        let s2 = (c - b) / (w[2] - w[1]);
        if w1_fail.is_none() && (b < a - scale || s2 < s1 - tol * s2.abs().max(s1.abs()).max(1e-300)) {
            w1_fail = Some(w[1]);
        }
        let (za, zb) = (zeta.eval(w[0]), zeta.eval(w[1]));
        if w2_fail.is_none() && zb < za - tol * zb.abs().max(1e-300) {
            w2_fail = Some(w[1]);
        }
    }
    if zeta.eval(grid[0]) < 0.0 {
        w2_fail = w2_fail.or(Some(grid[0]));
    }
    vec![
        AdmissibilityEntry::new("W.1", w1_fail.is_none(), None, w1_fail),
        AdmissibilityEntry::new("W.2", w2_fail.is_none(), None, w2_fail),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmissibilityReport {
    pub entries: Vec<AdmissibilityEntry>,
}

impl AdmissibilityReport {
    pub fn pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn entry(&self, condition: &str) -> Option<&AdmissibilityEntry> {
        self.entries.iter().find(|e| e.condition == condition)
    }
}

/// Tolerance on normalised margins; central differences at `h = r 1e-5`.
pub const W3_TOL: f64 = 1e-4;

pub const W3_FIRST: &str = "W.3 first-order inequality";
pub const W3_SECOND: &str = "W.3 second-order inequality";
pub const W3_CONVEX: &str = "W.3 convexity of psi o xi";

/// Inverse of `r -> r zeta(r)` at `u`.
fn xi(zeta: &ScalarFn, u: f64, guess: f64) -> Option<f64> {
    let g = |r: f64| r * zeta.eval(r) - u;
    let (mut lo, mut hi) = (guess, guess);
    let mut k = 0;
    while g(lo) > 0.0 {
        lo *= 0.5;
        k += 1;
        if k > 200 {
            return None;
        }
    }
    while g(hi) < 0.0 {
        hi *= 2.0;
        k += 1;
        if k > 400 {
            return None;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

struct Worst {
    margin: f64,
    first_violation: Option<f64>,
}

impl Worst {
    fn new() -> Self {
        Self {
            margin: f64::INFINITY,
            first_violation: None,
        }
    }
    fn push(&mut self, r: f64, m: f64) {
        let m = if m.is_nan() { f64::NEG_INFINITY } else { m };
        self.margin = self.margin.min(m);
        if m < -W3_TOL && self.first_violation.is_none() {
            self.first_violation = Some(r);
        }
    }
    fn entry(&self, name: &str) -> AdmissibilityEntry {
        AdmissibilityEntry::new(name, self.first_violation.is_none(), Some(self.margin), self.first_violation)
    }
}

/// Evaluates the two differential inequalities and the convexity of
/// `psi o xi` at every grid point. Margins are divided by `psi zeta`.
pub fn check_w3(psi: &ScalarFn, zeta: &ScalarFn, grid: &[f64]) -> AdmissibilityReport {
    let mut first = Worst::new();
    let mut second = Worst::new();
    let mut convex = Worst::new();
    for &r in grid {
        let (p, p1, p2) = (psi.eval(r), psi.d1(r), psi.d2(r));
        let (z, z1, z2) = (zeta.eval(r), zeta.d1(r), zeta.d2(r));
        let norm = p * z;
        if !(norm > 0.0) {
            continue;
        }
        first.push(r, (r * p1 * z - r * p * z1 - p * z) / norm);
        second.push(r, (r * r * p2 * z + r * p1 * z - 3.0 * p * z - r * r * p * z2) / norm);

        let u = r * z;
        let h = u * 1e-5;
        let phi = |uu: f64| xi(zeta, uu, r).map(|x| psi.eval(x));
        match (phi(u - h), phi(u), phi(u + h)) {
            (Some(a), Some(b), Some(c)) if b > 0.0 => {
                convex.push(r, (a - 2.0 * b + c) / (h * h) * u * u / b);
            }
            _ => convex.push(r, f64::NAN),
        }
    }
    AdmissibilityReport {
        entries: vec![first.entry(W3_FIRST), second.entry(W3_SECOND), convex.entry(W3_CONVEX)],
    }
}

/// Fills the empirical tail mass at the certified radius with the exact
/// conjugate sampler.
pub fn validate_certificate<T: Real>(
    cert: &Certificate,
    model: &ModelInstance<T>,
    n_samples: usize,
    seed: u64,
) -> Result<Certificate> {
    let tm = tail_mass_estimate(model, lit::<T>(cert.radius.max(0.0)), n_samples, Sampler::Exact, seed)?;
    let mut out = cert.clone();
    out.empirical_validation = Some(EmpiricalValidation {
        mass: tm.mass,
        se: tm.se,
        delta: cert.delta,
        n_samples,
        pass: tm.mass <= cert.delta + 3.0 * tm.se,
        slack: cert.delta - tm.mass,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> StrongRateInputs {
        StrongRateInputs {
            tr_q: 1.644934,
            q_opnorm: 1.0,
            mu: 1.0,
            b: 1.0,
            eps1: 0.0,
            eps2: 0.05,
            n: 1000,
            delta: 0.1,
            c_universal: 1.0,
        }
    }

    #[test]
    fn strong_radius_term_by_term() {
        let c = strong_radius(&example()).unwrap();
        // independent evaluation in the test: sqrt terms by hand
        let t1 = (1.644934f64 / 1000.0).sqrt();
        let t4 = (10f64.ln() / 1000.0).sqrt();
        assert!((c.term("trace").unwrap() - 0.0405577).abs() < 1e-6);
        assert!((c.term("confidence").unwrap() - 0.0479853).abs() < 1e-6);
        assert!((c.radius - (t1 + 0.001 + 0.05 + t4)).abs() < 1e-15);
        assert!((c.radius - 0.1395430).abs() < 1e-6);
        assert!(c.valid);
    }

    #[test]
    fn strong_radius_single_term_limit() {
        let inp = StrongRateInputs {
            delta: 1.0,
            eps2: 0.0,
            b: 0.0,
            ..example()
        };
        let c = strong_radius(&inp).unwrap();
        assert_eq!(c.radius, (1.644934f64 / 1000.0).sqrt());
    }

    #[test]
    fn strong_radius_refuses_large_eps1() {
        let inp = StrongRateInputs {
            eps1: 0.2,
            ..example()
        };
        assert!(matches!(strong_radius(&inp), Err(Error::HypothesisUnmet { .. })));
    }

    #[test]
    fn doubling_n_shrinks_sqrt_terms() {
        let a = strong_radius(&example()).unwrap();
        let b = strong_radius(&StrongRateInputs {
            n: 2000,
            eps2: 0.05 / 2f64.sqrt(),
            ..example()
        })
        .unwrap();
        for t in ["trace", "confidence", "noise"] {
            let r = a.term(t).unwrap() / b.term(t).unwrap();
            assert!((r - 2f64.sqrt()).abs() < 1e-9, "{t}: {r}");
        }
    }

    fn quadratic() -> WeakRateInputs {
        // tr/n = 0.01, log(1/delta) ||Q|| / n = 0.02
        WeakRateInputs {
            psi: ScalarFn::power(1.0, 2.0),
            zeta: ScalarFn::power(1.0, 0.0),
            eps: 0.1,
            b: 0.0,
            tr_q: 1.0,
            q_opnorm: 2.0 / 10f64.ln(),
            n: 100,
            delta: 0.1,
            z_max: 1e3,
        }
    }

    #[test]
    fn weak_fixed_point_quadratic() {
        let c = weak_fixed_point(&quadratic()).unwrap();
        let oracle = (0.1 + (0.01f64 + 0.12).sqrt()) / 2.0;
        assert!((c.radius - oracle).abs() < 1e-9 * oracle, "{}", c.radius);
        assert!((c.radius - 0.2302776).abs() < 1e-7);
        assert!(c.valid, "{:#?}", c.admissibility);
        let psi = c.radius * c.radius;
        assert!(c.term("residual").unwrap().abs() <= 1e-9 * psi.max(1.0));
    }

    #[test]
    fn weak_fixed_point_degenerate_root() {
        let inp = WeakRateInputs {
            tr_q: 0.0,
            q_opnorm: 0.0,
            ..quadratic()
        };
        let c = weak_fixed_point(&inp).unwrap();
        assert_eq!(c.radius, 0.0);
        assert!(!c.valid);
    }

    #[test]
    fn weak_fixed_point_w4_violation() {
        // psi linear with slope below eps
        let inp = WeakRateInputs {
            psi: ScalarFn::power(0.05, 1.0),
            ..quadratic()
        };
        assert!(matches!(weak_fixed_point(&inp), Err(Error::W4Violated { .. })));
    }

    #[test]
    fn weak_fixed_point_multiple_roots() {
        // non-monotone tabulated psi crossing the right side three times
        let x: Vec<f64> = vec![1e-4, 0.1, 0.2, 0.3, 0.4, 1.0, 1e3];
        let y: Vec<f64> = vec![0.0, 1.0, 0.0, 1.0, 0.0, 10.0, 1e7];
        let inp = WeakRateInputs {
            psi: ScalarFn::Tabulated { x, y },
            eps: 0.0,
            ..quadratic()
        };
        assert!(matches!(weak_fixed_point(&inp), Err(Error::NonAdmissiblePair { .. })));
    }

    #[test]
    fn w3_power_pairs() {
        let grid = geometric_grid(10.0);
        let ok = check_w3(&ScalarFn::power(1.0, 3.0), &ScalarFn::power(1.0, 1.0), &grid);
        assert!(ok.pass(), "{ok:#?}");
        assert!((ok.entry(W3_FIRST).unwrap().margin.unwrap() - 1.0).abs() < 1e-4);

        let bad = check_w3(&ScalarFn::power(1.0, 1.5), &ScalarFn::power(1.0, 1.0), &grid);
        let e = bad.entry(W3_FIRST).unwrap();
        assert!(!e.pass);
        assert_eq!(e.witness, Some(grid[0]));
        assert!((e.margin.unwrap() + 0.5).abs() < 1e-4);

        let quad = check_w3(&ScalarFn::power(1.0, 2.0), &ScalarFn::power(1.0, 0.0), &grid);
        assert!(quad.pass());
        assert!((quad.entry(W3_SECOND).unwrap().margin.unwrap() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn pchip_is_monotone_and_interpolates() {
        let x = vec![0.0, 1.0, 2.0, 3.0, 4.0];
        let y = vec![0.0, 0.1, 0.1, 2.0, 2.1];
        let f = ScalarFn::Tabulated { x: x.clone(), y: y.clone() };
        for (a, b) in x.iter().zip(&y) {
            assert!((f.eval(*a) - b).abs() < 1e-15);
        }
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=400 {
            let v = f.eval(i as f64 / 100.0);
            assert!(v >= prev - 1e-15);
            prev = v;
        }
    }

    #[test]
    fn digest_is_stable() {
        let a = strong_radius(&example()).unwrap();
        let b = strong_radius(&example()).unwrap();
        assert_eq!(a.inputs_digest, b.inputs_digest);
        assert_eq!(a.canonical_text(), b.canonical_text());
        let c = strong_radius(&StrongRateInputs { n: 1001, ..example() }).unwrap();
        assert_ne!(a.inputs_digest, c.inputs_digest);
    }
}
