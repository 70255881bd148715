//! Run configuration.
//!
//! The file is TOML with five tables. Every rate and frequency is given in
//! Hz (the value of ω/2π) and converted to rad/s on use; lengths are in m and
//! times in s. Unknown keys are rejected, and missing keys take the defaults
//! listed on each field.

use std::path::{Path, PathBuf};

use ionsync::crystal::ModeWeighting;
use ionsync::langevin::{NoiseFactorization, Scheme};
use ionsync::ramsey::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub crystal: CrystalBlock,
    pub cooling: CoolingBlock,
    pub raman: RamanBlock,
    pub experiment: ExperimentBlock,
    pub output: OutputBlock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrystalBlock {
    /// Spin ions.
    pub n_sigma: usize,
    /// Coolant ions.
    pub n_tau: usize,
    pub spacing_m: f64,
    /// Target frequency of the highest transverse mode.
    pub com_frequency_hz: f64,
    pub weighting: ModeWeighting,
    /// Explicit ion positions, coolant ions first; replaces the generated lattice when set.
    pub positions_m: Option<Vec<[f64; 2]>>,
}

impl Default for CrystalBlock {
    fn default() -> Self {
        Self {
            n_sigma: 124,
            n_tau: 93,
            spacing_m: 10e-6,
            com_frequency_hz: 2.0e6,
            weighting: ModeWeighting::PotentialEnergy,
            positions_m: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoolingBlock {
    /// Natural linewidth of the cooling transition.
    pub linewidth_hz: f64,
    pub detuning_hz: f64,
    pub rabi_hz: f64,
    pub wavelength_m: f64,
    pub emission_anisotropy: f64,
}

impl Default for CoolingBlock {
    fn default() -> Self {
        Self {
            linewidth_hz: 41.4e6,
            detuning_hz: -20.7e6,
            rabi_hz: 10e6,
            wavelength_m: 280.3e-9,
            emission_anisotropy: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RamanBlock {
    pub g1_hz: f64,
    pub g2_hz: f64,
    /// Average single-photon detuning.
    pub delta_hz: f64,
    /// Two-photon detuning; defaults to minus the light-shifted COM frequency.
    pub delta_r_hz: Option<f64>,
    /// Spin-ion Lamb-Dicke factor of the COM mode.
    pub eta_com: f64,
    pub gamma1_hz: f64,
    pub gamma2_hz: f64,
    /// Keep only the COM mode when eliminating phonons.
    pub com_only: bool,
}

impl Default for RamanBlock {
    fn default() -> Self {
        Self {
            g1_hz: 44.7e6,
            g2_hz: 44.7e6,
            delta_hz: 230e9,
            delta_r_hz: None,
            eta_com: 0.1,
            gamma1_hz: 27.27e6,
            gamma2_hz: 13.63e6,
            com_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentBlock {
    pub engine: Engine,
    /// Repump rates in units of N_σ Γ_c.
    pub w_over_n_gamma_c: Vec<f64>,
    /// Fraction of the repump rate that also dephases.
    pub chi: f64,
    /// Set to false to switch off every phonon-mediated term.
    pub collective: bool,
    pub n_traj: usize,
    pub dt_s: f64,
    pub t_final_s: f64,
    pub sample_interval_s: f64,
    pub steady_fraction: f64,
    pub fit_start_s: Option<f64>,
    pub fit_end_s: Option<f64>,
    pub scheme: Scheme,
    pub noise: NoiseFactorization,
    pub seed: u64,
    pub threads: Option<usize>,
}

impl Default for ExperimentBlock {
    fn default() -> Self {
        Self {
            engine: Engine::Langevin,
            w_over_n_gamma_c: vec![0.5],
            chi: 0.0,
            collective: true,
            n_traj: 200,
            dt_s: 2e-4,
            t_final_s: 2.0,
            sample_interval_s: 0.01,
            steady_fraction: 0.75,
            fit_start_s: None,
            fit_end_s: None,
            scheme: Scheme::Euler,
            noise: NoiseFactorization::Auto,
            seed: 1,
            threads: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(format!("unknown format '{other}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputBlock {
    pub dir: PathBuf,
    pub format: Format,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self { dir: PathBuf::from("ionsync-out"), format: Format::Csv }
    }
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {msg}"))
}

fn non_negative(field: &str, v: f64) -> Result<(), CliError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be finite and >= 0, got {v}")))
    }
}

fn positive(field: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be finite and > 0, got {v}")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let c = &self.crystal;
        if c.positions_m.is_none() && (c.n_sigma == 0 || c.n_tau == 0) {
            return Err(invalid("crystal.n_sigma/n_tau", "both counts must be at least 1"));
        }
        if let Some(p) = &c.positions_m {
            if p.len() != c.n_sigma + c.n_tau {
                return Err(invalid(
                    "crystal.positions_m",
                    format!("{} positions for n_tau + n_sigma = {}", p.len(), c.n_sigma + c.n_tau),
                ));
            }
        }
        positive("crystal.spacing_m", c.spacing_m)?;
        positive("crystal.com_frequency_hz", c.com_frequency_hz)?;

        let l = &self.cooling;
        non_negative("cooling.linewidth_hz", l.linewidth_hz)?;
        non_negative("cooling.rabi_hz", l.rabi_hz)?;
        positive("cooling.wavelength_m", l.wavelength_m)?;
        if !l.detuning_hz.is_finite() {
            return Err(invalid("cooling.detuning_hz", "must be finite"));
        }
        if !(-1.0..=1.0).contains(&l.emission_anisotropy) {
            return Err(invalid("cooling.emission_anisotropy", "must lie in [-1, 1]"));
        }

        let r = &self.raman;
        non_negative("raman.g1_hz", r.g1_hz)?;
        non_negative("raman.g2_hz", r.g2_hz)?;
        non_negative("raman.gamma1_hz", r.gamma1_hz)?;
        non_negative("raman.gamma2_hz", r.gamma2_hz)?;
        non_negative("raman.eta_com", r.eta_com)?;
        if !(r.delta_hz.is_finite() && r.delta_hz != 0.0) {
            return Err(invalid("raman.delta_hz", "must be finite and nonzero"));
        }
        if let Some(d) = r.delta_r_hz {
            if !d.is_finite() {
                return Err(invalid("raman.delta_r_hz", "must be finite"));
            }
        }

        let e = &self.experiment;
        if e.w_over_n_gamma_c.is_empty() {
            return Err(invalid("experiment.w_over_n_gamma_c", "sweep list is empty"));
        }
        for (k, w) in e.w_over_n_gamma_c.iter().enumerate() {
            non_negative(&format!("experiment.w_over_n_gamma_c[{k}]"), *w)?;
        }
        non_negative("experiment.chi", e.chi)?;
        if e.n_traj == 0 {
            return Err(invalid("experiment.n_traj", "must be at least 1"));
        }
        positive("experiment.dt_s", e.dt_s)?;
        positive("experiment.t_final_s", e.t_final_s)?;
        positive("experiment.sample_interval_s", e.sample_interval_s)?;
        if !(0.0..1.0).contains(&e.steady_fraction) {
            return Err(invalid("experiment.steady_fraction", "must lie in [0, 1)"));
        }
        if let Some(t) = e.fit_start_s {
            non_negative("experiment.fit_start_s", t)?;
        }
        if let Some(t) = e.fit_end_s {
            positive("experiment.fit_end_s", t)?;
        }
        if e.threads == Some(0) {
            return Err(invalid("experiment.threads", "must be at least 1"));
        }
        Ok(())
    }

    /// Canonical TOML rendering with every default filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// SHA-256 of the canonical rendering, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Reads and validates a configuration file. An empty file yields the defaults.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    RunConfig::from_toml(&text)
}

/// Parses `w=a:b:n` into `n` evenly spaced values from `a` to `b`.
pub fn parse_sweep(spec: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Config(format!("--sweep expects w=a:b:n, got '{spec}'"));
    let range = spec.strip_prefix("w=").ok_or_else(bad)?;
    let parts: Vec<&str> = range.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let a: f64 = parts[0].parse().map_err(|_| bad())?;
    let b: f64 = parts[1].parse().map_err(|_| bad())?;
    let n: usize = parts[2].parse().map_err(|_| bad())?;
    match n {
        0 => Err(bad()),
        1 => Ok(vec![a]),
        _ => Ok((0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.crystal.n_sigma, 124);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::from_toml("[cooling]\nlinewidth = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("linewidth"), "{err}");
        assert!(RunConfig::from_toml("[nonsense]\n").is_err());
    }

    #[test]
    fn negative_linewidth_names_field() {
        let err = RunConfig::from_toml("[cooling]\nlinewidth_hz = -1.0\n").unwrap_err();
        assert!(err.to_string().contains("cooling.linewidth_hz"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn empty_sweep_is_rejected() {
        let err = RunConfig::from_toml("[experiment]\nw_over_n_gamma_c = []\n").unwrap_err();
        assert!(err.to_string().contains("w_over_n_gamma_c"));
    }

    #[test]
    fn canonical_round_trip_and_hash() {
        let mut cfg = RunConfig::default();
        cfg.experiment.engine = Engine::Minimal;
        cfg.raman.delta_r_hz = Some(-2e6);
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(RunConfig::default().hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn sweep_parsing() {
        assert_eq!(parse_sweep("w=0.25:1:4").unwrap(), vec![0.25, 0.5, 0.75, 1.0]);
        assert_eq!(parse_sweep("w=0.5:0.5:1").unwrap(), vec![0.5]);
        for bad in ["x=1:2:3", "w=1:2", "w=a:2:3", "w=1:2:0"] {
            assert!(parse_sweep(bad).is_err(), "{bad}");
        }
    }
}
