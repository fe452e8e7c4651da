//! Experiment configuration: a TOML key tree with every table closed to
//! unknown keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spdelab::certificates::{StrongRateInputs, WeakRateInputs};
use spdelab::laplace::HessianSource;
use spdelab::{
    synthesize_data, DecayLaw, DiagonalOperator, Model, NoiseMode, Scheme, SimConfig, ThetaStarPreset, DEFAULT_DIM,
};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed for Monte Carlo work; `--seed` replaces it.
    #[serde(default)]
    pub seed: u64,
    /// Not part of the config digest.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub certificate: CertificateSection,
    #[serde(default)]
    pub laplace: LaplaceSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub audit: AuditSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub q: DecayLaw<f64>,
    pub a: DecayLaw<f64>,
    pub theta_star: ThetaStarPreset,
    pub n: u64,
    /// Noise seed; the master seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Truncation level M.
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_noise")]
    pub noise: NoiseMode,
    /// Strength of the quartic perturbation; 0 keeps the conjugate model.
    #[serde(default)]
    pub kappa: f64,
}

fn default_dim() -> usize {
    DEFAULT_DIM
}

fn default_noise() -> NoiseMode {
    NoiseMode::Sampled
}

impl ModelSection {
    pub fn build(&self, master_seed: u64) -> Result<Model, CliError> {
        let q = DiagonalOperator::from_law(self.q.clone(), self.dim).map_err(|e| CliError::config("model.q", e))?;
        let a = DiagonalOperator::from_law(self.a.clone(), self.dim).map_err(|e| CliError::config("model.a", e))?;
        let ts = self.theta_star.build(&q).map_err(|e| CliError::config("model.theta_star", e))?;
        if !self.kappa.is_finite() || self.kappa < 0.0 {
            return Err(CliError::config("model.kappa", "must be finite and >= 0"));
        }
        if self.n == 0 {
            return Err(CliError::config("model.n", "must be positive"));
        }
        synthesize_data(&q, &a, &ts, self.n, self.seed.unwrap_or(master_seed), self.noise)
            .map_err(|e| CliError::config("model", e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub t_end: Option<f64>,
    #[serde(default = "default_replicas")]
    pub n_replicas: usize,
    #[serde(default)]
    pub scheme: Option<Scheme>,
    #[serde(default)]
    pub record_times: Vec<f64>,
    #[serde(default = "default_orders")]
    pub moment_orders: Vec<u32>,
    #[serde(default = "default_guard")]
    pub guard: f64,
}

fn default_replicas() -> usize {
    SimConfig::default().n_replicas
}

fn default_orders() -> Vec<u32> {
    SimConfig::default().moment_orders
}

fn default_guard() -> f64 {
    SimConfig::default().guard
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            dt: None,
            t_end: None,
            n_replicas: default_replicas(),
            scheme: None,
            record_times: Vec::new(),
            moment_orders: default_orders(),
            guard: default_guard(),
        }
    }
}

impl SimSection {
    pub fn to_sim(&self, seed: u64) -> SimConfig {
        SimConfig {
            dt: self.dt,
            t_end: self.t_end,
            n_replicas: self.n_replicas,
            scheme: self.scheme,
            record_times: self.record_times.clone(),
            seed,
            moment_orders: self.moment_orders.clone(),
            guard: self.guard,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CertificateKindConfig {
    Strong,
    Weak,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateSection {
    #[serde(default = "default_kind")]
    pub kind: CertificateKindConfig,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "one")]
    pub c_universal: f64,
    /// Exact-posterior draws for the empirical tail mass; 0 skips it.
    #[serde(default = "default_validate")]
    pub validate_samples: usize,
    /// Explicit strong-rate inputs; derived from the model when absent.
    #[serde(default)]
    pub strong: Option<StrongRateInputs>,
    #[serde(default)]
    pub weak: Option<WeakRateInputs>,
}

fn default_kind() -> CertificateKindConfig {
    CertificateKindConfig::Strong
}

fn default_delta() -> f64 {
    0.1
}

fn one() -> f64 {
    1.0
}

fn default_validate() -> usize {
    10_000
}

impl Default for CertificateSection {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            delta: default_delta(),
            c_universal: 1.0,
            validate_samples: default_validate(),
            strong: None,
            weak: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaplaceSection {
    #[serde(default = "default_hessian")]
    pub hessian: HessianSource,
    /// Monte Carlo draws for the KL estimate; 0 uses closed form or quadrature.
    #[serde(default)]
    pub kl_samples: usize,
    /// Datasets used to calibrate sigma; 0 keeps sigma = 1.
    #[serde(default)]
    pub sigma_datasets: usize,
    #[serde(default = "half")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub c1: f64,
    #[serde(default = "one")]
    pub c2: f64,
    /// Explicit bound inputs; derived from the model when absent.
    #[serde(default)]
    pub bounds: Option<spdelab::BoundInputs>,
}

fn default_hessian() -> HessianSource {
    HessianSource::Empirical
}

fn half() -> f64 {
    0.5
}

impl Default for LaplaceSection {
    fn default() -> Self {
        Self {
            hessian: default_hessian(),
            kl_samples: 0,
            sigma_datasets: 0,
            alpha: 0.5,
            c1: 1.0,
            c2: 1.0,
            bounds: None,
        }
    }
}

/// Exactly one of `n` and `delta` names the swept parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub n: Option<Vec<u64>>,
    #[serde(default)]
    pub delta: Option<Vec<f64>>,
    /// Exact-posterior draws per point for the empirical `1 - delta`
    /// quantile radius; 0 skips the column.
    #[serde(default)]
    pub quantile_samples: usize,
    /// Adds a KL(posterior || Laplace) column.
    #[serde(default)]
    pub kl: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParameter {
    N,
    Delta,
}

impl SweepSection {
    pub fn parameter(&self) -> Result<SweepParameter, CliError> {
        match (&self.n, &self.delta) {
            (Some(v), None) if v.len() >= 2 => Ok(SweepParameter::N),
            (None, Some(v)) if v.len() >= 2 => Ok(SweepParameter::Delta),
            (Some(_), Some(_)) => Err(CliError::config("sweep", "give either `n` or `delta`, not both")),
            (None, None) => Err(CliError::config("sweep", "one of `n` or `delta` is required")),
            _ => Err(CliError::config("sweep", "the grid needs at least two values")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSection {
    #[serde(default = "default_pairs")]
    pub n_pairs: usize,
    #[serde(default = "one")]
    pub radius: f64,
}

fn default_pairs() -> usize {
    64
}

impl Default for AuditSection {
    fn default() -> Self {
        Self {
            n_pairs: default_pairs(),
            radius: 1.0,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| {
            let key = e.message().split('`').nth(1).unwrap_or("<config>").to_string();
            CliError::Config {
                key,
                message: e.to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            key: "--config".into(),
            message: format!("{}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    pub fn model(&self) -> Result<Model, CliError> {
        self.model
            .as_ref()
            .ok_or_else(|| CliError::config("model", "this subcommand needs a [model] table"))?
            .build(self.seed)
    }

    pub fn kappa(&self) -> f64 {
        self.model.as_ref().map_or(0.0, |m| m.kappa)
    }

    pub fn sim_config(&self) -> SimConfig {
        self.sim.to_sim(self.seed)
    }

    /// SHA-256 of the canonical JSON form, which normalises layout, key
    /// order, comments and defaults. `output_dir` is excluded.
    pub fn digest(&self) -> String {
        let mut canon = self.clone();
        canon.output_dir = PathBuf::new();
        let json = serde_json::to_string(&canon).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        seed = 3
        [model]
        q = { kind = "power", scale = 1.0, exponent = 2.0 }
        a = { kind = "power", scale = 1.0, exponent = -2.0 }
        theta_star = { preset = "smooth", s = 2.0 }
        n = 100
        dim = 8
    "#;

    #[test]
    fn parses_minimal_config_with_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.sim.n_replicas, 1000);
        assert_eq!(c.certificate.delta, 0.1);
        assert_eq!(c.model().unwrap().dim(), 8);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = ExperimentConfig::parse(&MINIMAL.replace("n = 100", "n = 100\nnn = 3")).unwrap_err();
        match err {
            CliError::Config { key, .. } => assert_eq!(key, "nn"),
            e => panic!("{e:?}"),
        }
        let err = ExperimentConfig::parse("[sim]\ndtt = 0.1").unwrap_err();
        assert!(err.to_string().contains("dtt"));
    }

    #[test]
    fn digest_ignores_layout_and_output_dir() {
        let a = ExperimentConfig::parse(MINIMAL).unwrap();
        let reordered = r#"
            output_dir = "elsewhere"
            [model]
            dim = 8
            n = 100
            theta_star = { preset = "smooth", s = 2.0, cm_norm = 1.0 }
            a = { kind = "power", exponent = -2.0, scale = 1.0 }
            q = { kind = "power", exponent = 2.0, scale = 1.0 }
            # comment
            [sim]
            n_replicas = 1000
        "#;
        let b = ExperimentConfig::parse(&format!("seed = 3\n{reordered}")).unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = ExperimentConfig::parse(&MINIMAL.replace("n = 100", "n = 101")).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn sweep_needs_exactly_one_parameter() {
        let s = SweepSection {
            n: Some(vec![10, 100]),
            delta: Some(vec![0.1, 0.2]),
            quantile_samples: 0,
            kl: false,
        };
        assert!(s.parameter().is_err());
        let s = SweepSection { delta: None, ..s };
        assert_eq!(s.parameter().unwrap(), SweepParameter::N);
    }
}
