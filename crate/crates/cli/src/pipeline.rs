//! Stage orchestration and artifact export.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ionsync::consts::{hz, TWO_PI};
use ionsync::cooling::{mode_damping, CoolingLaser, ModeDamping};
use ionsync::crystal::{
    calibrate_trap, generate_crystal, lamb_dicke, solve_normal_modes, wavevector_for_eta, CrystalConfig, IonSpecies,
    NormalModes, Role,
};
use ionsync::langevin::IntegrateOptions;
use ionsync::raman::{effective_params, spin_phonon_couplings, EffectiveSpinParams, RamanConfig, SpinPhononCoupling};
use ionsync::ramsey::{run_ramsey, Engine, RamseyConfig, RamseyResult};
use ionsync::spinspin::{build_model, validity_check, BuildOptions, SpinSpinModel, ValidityReport};
use ionsync::C64;
use serde::Serialize;
use serde_json::json;

use crate::config::{Format, RunConfig};
use crate::CliError;

/// How far the pipeline runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Crystal and cooling only.
    Modes,
    /// Adds the Raman parameters and the spin-spin coefficients.
    Couplings,
    /// Everything, including the Ramsey sweep.
    #[default]
    Experiment,
}

impl std::str::FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "modes" => Ok(Stage::Modes),
            "couplings" => Ok(Stage::Couplings),
            "experiment" | "all" => Ok(Stage::Experiment),
            other => Err(format!("unknown stage '{other}' (modes, couplings, experiment)")),
        }
    }
}

fn stage_err(stage: &'static str) -> impl Fn(ionsync::Error) -> CliError {
    move |e| match e {
        ionsync::Error::Divergence { aborted, total } => CliError::Divergence { aborted, total },
        other => CliError::Stage { stage, source: other },
    }
}

pub struct ModesStage {
    pub crystal: CrystalConfig,
    pub modes: NormalModes,
    pub damping: ModeDamping,
}

pub struct CouplingStage {
    pub raman: RamanConfig,
    pub params: EffectiveSpinParams,
    pub coupling: SpinPhononCoupling,
    /// Spin model with the repump off.
    pub model: SpinSpinModel,
    pub validity: ValidityReport,
}

pub fn run_modes(cfg: &RunConfig) -> Result<ModesStage, CliError> {
    let c = &cfg.crystal;
    let err = stage_err("crystal");
    let crystal = match &c.positions_m {
        Some(p) => {
            let roles = (0..p.len()).map(|k| if k < c.n_tau { Role::Coolant } else { Role::Spin }).collect();
            CrystalConfig::from_positions(p.clone(), roles, IonSpecies::mg24(), IonSpecies::mg25(), c.spacing_m)
        }
        None => generate_crystal(c.n_sigma, c.n_tau, c.spacing_m),
    }
    .map_err(&err)?
    .with_weighting(c.weighting);
    let k = calibrate_trap(&crystal, hz(c.com_frequency_hz)).map_err(&err)?;
    let crystal = crystal.with_trap_stiffness(k);
    let modes = solve_normal_modes(&crystal).map_err(&err)?;

    let l = &cfg.cooling;
    let laser = CoolingLaser {
        linewidth: hz(l.linewidth_hz),
        detuning: hz(l.detuning_hz),
        rabi: hz(l.rabi_hz),
        wavelength: l.wavelength_m,
        emission_anisotropy: l.emission_anisotropy,
    };
    let damping = mode_damping(&modes, &laser, &crystal.coolant_indices(), crystal.coolant.mass)
        .map_err(stage_err("cooling"))?;
    Ok(ModesStage { crystal, modes, damping })
}

pub fn run_couplings(cfg: &RunConfig, m: &ModesStage) -> Result<CouplingStage, CliError> {
    let r = &cfg.raman;
    let err = stage_err("raman");
    let delta_r = r.delta_r_hz.map(hz).unwrap_or(-m.damping.shifted[0]);
    let raman = RamanConfig {
        g1: C64::from(hz(r.g1_hz)),
        g2: C64::from(hz(r.g2_hz)),
        delta1: hz(r.delta_hz),
        delta2: hz(r.delta_hz),
        gamma1: hz(r.gamma1_hz),
        gamma2: hz(r.gamma2_hz),
        k_sigma: wavevector_for_eta(r.eta_com, m.modes.com_frequency(), m.crystal.spin.mass),
    }
    .with_detunings(hz(r.delta_hz), delta_r)
    .map_err(&err)?;
    let params = effective_params(&raman).map_err(&err)?;
    let eta = lamb_dicke(&m.modes, raman.k_sigma, m.crystal.spin.mass);
    let coupling = spin_phonon_couplings(&params, &m.modes, &m.crystal.spin_indices(), &eta).map_err(&err)?;
    let opts = BuildOptions { com_only: r.com_only };
    let model = build_model(&coupling, &m.damping, params.delta_r, 0.0, cfg.experiment.chi, &params, opts)
        .map_err(stage_err("spinspin"))?;
    let validity = validity_check(&model, &coupling, &m.damping);
    Ok(CouplingStage { raman, params, coupling, model, validity })
}

/// Derived quantities in Hz (ω/2π) where dimensioned.
#[derive(Clone, Debug, Default, Serialize)]
pub struct DerivedParameters {
    pub n_sigma: usize,
    pub n_tau: usize,
    pub com_frequency_hz: f64,
    pub kappa_com_hz: f64,
    pub nbar_com: f64,
    pub modes_not_cooled: usize,
    pub omega_r_hz: Option<f64>,
    pub delta_r_hz: Option<f64>,
    pub gamma_13_hz: Option<f64>,
    pub gamma_31_hz: Option<f64>,
    pub gamma_d_hz: Option<f64>,
    pub gamma_c_hz: Option<f64>,
    pub n_gamma_c_hz: Option<f64>,
    pub markov_ratio: Option<f64>,
}

impl DerivedParameters {
    pub fn new(m: &ModesStage, c: Option<&CouplingStage>) -> Self {
        let n_sigma = m.crystal.n_spin();
        let mut d = DerivedParameters {
            n_sigma,
            n_tau: m.crystal.n_coolant(),
            com_frequency_hz: m.modes.com_frequency() / TWO_PI,
            kappa_com_hz: m.damping.kappa[0] / TWO_PI,
            nbar_com: m.damping.nbar[0],
            modes_not_cooled: m.damping.not_cooled.len(),
            ..Default::default()
        };
        if let Some(c) = c {
            d.omega_r_hz = Some(c.params.omega_r.norm() / TWO_PI);
            d.delta_r_hz = Some(c.params.delta_r / TWO_PI);
            d.gamma_13_hz = Some(c.params.gamma_13 / TWO_PI);
            d.gamma_31_hz = Some(c.params.gamma_31 / TWO_PI);
            d.gamma_d_hz = Some(c.params.gamma_d / TWO_PI);
            d.gamma_c_hz = Some(c.model.gamma_c / TWO_PI);
            d.n_gamma_c_hz = Some(n_sigma as f64 * c.model.gamma_c / TWO_PI);
            d.markov_ratio = Some(c.validity.markov_ratio);
        }
        d
    }
}

/// One comparison of a derived parameter against its reference value.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub target: f64,
    pub rel_tol: f64,
    pub pass: bool,
}

/// Reference values for the default configuration: (name, target, relative tolerance).
pub const REFERENCE_TARGETS: [(&str, f64, f64); 6] = [
    ("kappa_com_hz", 5.1e3, 0.15),
    ("nbar_com", 4.7, 0.10),
    ("gamma_13_hz", 0.12, 0.15),
    ("gamma_31_hz", 0.24, 0.15),
    ("gamma_d_hz", 0.36, 0.15),
    ("gamma_c_hz", 0.84, 0.20),
];

pub fn reference_checks(d: &DerivedParameters) -> Vec<Check> {
    REFERENCE_TARGETS
        .iter()
        .filter_map(|&(name, target, rel_tol)| {
            let value = match name {
                "kappa_com_hz" => Some(d.kappa_com_hz),
                "nbar_com" => Some(d.nbar_com),
                "gamma_13_hz" => d.gamma_13_hz,
                "gamma_31_hz" => d.gamma_31_hz,
                "gamma_d_hz" => d.gamma_d_hz,
                "gamma_c_hz" => d.gamma_c_hz,
                _ => None,
            }?;
            let pass = ((value - target) / target).abs() <= rel_tol;
            Some(Check { name, value, target, rel_tol, pass })
        })
        .collect()
}

/// Spin model used by `engine` at repump rate `w` (rad/s).
pub fn experiment_model(cfg: &RunConfig, m: &ModesStage, c: &CouplingStage, w: f64) -> SpinSpinModel {
    let e = &cfg.experiment;
    let model = match e.engine {
        Engine::Minimal => {
            let p = &c.params;
            let mut mm = SpinSpinModel::minimal(c.model.n_spins(), c.model.gamma_c, m.damping.nbar[0], 0.0)
                .with_single_spin_rates(p.gamma_31, p.gamma_13, p.gamma_d);
            mm.chi = e.chi;
            mm.with_repump(w)
        }
        _ => c.model.clone().with_repump(w),
    };
    if e.collective {
        model
    } else {
        model.without_collective()
    }
}

pub fn ramsey_config(cfg: &RunConfig) -> RamseyConfig {
    let e = &cfg.experiment;
    RamseyConfig {
        t_final: e.t_final_s,
        sample_interval: e.sample_interval_s,
        steady_fraction: e.steady_fraction,
        fit_start: e.fit_start_s,
        fit_end: e.fit_end_s,
        langevin: IntegrateOptions {
            dt: e.dt_s,
            scheme: e.scheme,
            noise: e.noise,
            n_traj: e.n_traj,
            seed: e.seed,
            threads: e.threads,
            ..RamseyConfig::default().langevin
        },
        exact_dt: None,
    }
}

/// One point of the repump sweep.
#[derive(Clone, Debug, Serialize)]
pub struct SweepPoint {
    pub w_over_n_gamma_c: f64,
    pub w_hz: f64,
    pub decay_rate_per_s: Option<f64>,
    pub decay_rate_over_gamma_c: Option<f64>,
    pub r_squared: Option<f64>,
    pub steady_sz: f64,
    pub steady_sz_se: f64,
    pub steady_pm: f64,
    pub steady_pm_se: f64,
    pub normalized_variance: f64,
    pub normalized_variance_se: f64,
    pub aborted: usize,
}

impl SweepPoint {
    fn new(w_rel: f64, w: f64, gamma_c: f64, r: &RamseyResult) -> Self {
        let rate = r.fit.as_ref().map(|f| f.rate);
        SweepPoint {
            w_over_n_gamma_c: w_rel,
            w_hz: w / TWO_PI,
            decay_rate_per_s: rate,
            decay_rate_over_gamma_c: rate.filter(|_| gamma_c > 0.0).map(|r| r / gamma_c),
            r_squared: r.fit.as_ref().map(|f| f.r_squared),
            steady_sz: r.steady.sz,
            steady_sz_se: r.steady.sz_se,
            steady_pm: r.steady.pm,
            steady_pm_se: r.steady.pm_se,
            normalized_variance: r.normalized_variance,
            normalized_variance_se: r.normalized_variance_se,
            aborted: r.aborted,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineReport {
    pub out_dir: PathBuf,
    pub stage: Stage,
    pub derived: DerivedParameters,
    pub checks: Vec<Check>,
    pub sweep: Vec<SweepPoint>,
    pub files: Vec<String>,
}

struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Output(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn write(&mut self, name: &str, body: impl FnOnce(&mut dyn Write) -> ionsync::Result<()>) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let fail = |e: &dyn std::fmt::Display| CliError::Output(format!("{}: {e}", path.display()));
        let file = fs::File::create(&path).map_err(|e| fail(&e))?;
        let mut out = BufWriter::new(file);
        body(&mut out).map_err(|e| fail(&e))?;
        out.flush().map_err(|e| fail(&e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        self.write(name, |out| {
            serde_json::to_writer_pretty(&mut *out, value)?;
            writeln!(out)?;
            Ok(())
        })
    }
}

fn write_crystal(out: &mut dyn Write, c: &CrystalConfig) -> ionsync::Result<()> {
    writeln!(out, "ion,role,x_m,y_m")?;
    for (k, (p, r)) in c.positions.iter().zip(&c.roles).enumerate() {
        let role = if *r == Role::Coolant { "coolant" } else { "spin" };
        writeln!(out, "{k},{role},{:.12e},{:.12e}", p[0], p[1])?;
    }
    Ok(())
}

fn modes_json(m: &NormalModes) -> serde_json::Value {
    let participation: Vec<Vec<f64>> = (0..m.len()).map(|n| m.matrix.column(n).iter().copied().collect()).collect();
    json!({
        "freq_hz": m.frequencies.iter().map(|w| w / TWO_PI).collect::<Vec<_>>(),
        "participation": participation,
    })
}

fn cooling_json(d: &ModeDamping) -> serde_json::Value {
    let hz_of = |v: &[f64]| v.iter().map(|w| w / TWO_PI).collect::<Vec<_>>();
    json!({
        "omega_hz": hz_of(&d.frequencies),
        "omega_shifted_hz": hz_of(&d.shifted),
        "kappa_hz": hz_of(&d.kappa),
        "nbar": d.nbar,
        "not_cooled": d.not_cooled,
    })
}

fn write_sweep_csv(out: &mut dyn Write, sweep: &[SweepPoint]) -> ionsync::Result<()> {
    writeln!(
        out,
        "w_over_n_gamma_c,w_hz,decay_rate_per_s,decay_rate_over_gamma_c,r_squared,steady_sz,steady_sz_se,\
         steady_pm,steady_pm_se,normalized_variance,normalized_variance_se,aborted"
    )?;
    let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.12e}"));
    for p in sweep {
        writeln!(
            out,
            "{:.12e},{:.12e},{},{},{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{}",
            p.w_over_n_gamma_c,
            p.w_hz,
            opt(p.decay_rate_per_s),
            opt(p.decay_rate_over_gamma_c),
            opt(p.r_squared),
            p.steady_sz,
            p.steady_sz_se,
            p.steady_pm,
            p.steady_pm_se,
            p.normalized_variance,
            p.normalized_variance_se,
            p.aborted
        )?;
    }
    Ok(())
}

/// Runs the stages up to `stage`, writing every artifact under `cfg.output.dir`.
pub fn run_pipeline(cfg: &RunConfig, stage: Stage) -> Result<PipelineReport, CliError> {
    cfg.validate()?;
    let mut art = Artifacts::create(&cfg.output.dir)?;
    let csv = cfg.output.format == Format::Csv;
    let toml_text = cfg.to_toml();
    art.write("config.toml", |out| Ok(out.write_all(toml_text.as_bytes())?))?;

    log::info!("stage modes: crystal and cooling");
    let m = run_modes(cfg)?;
    log::info!(
        "{} ions, COM {:.4} MHz, kappa_COM {:.3} kHz, nbar_COM {:.3}",
        m.crystal.len(),
        m.modes.com_frequency() / TWO_PI / 1e6,
        m.damping.kappa[0] / TWO_PI / 1e3,
        m.damping.nbar[0]
    );
    if csv {
        art.write("crystal.csv", |out| write_crystal(out, &m.crystal))?;
        art.write("modes.csv", |out| m.modes.write_csv(out))?;
        art.write("cooling.csv", |out| m.damping.write_csv(out))?;
    } else {
        art.json("crystal.json", &m.crystal)?;
        art.json("modes.json", &modes_json(&m.modes))?;
        art.json("cooling.json", &cooling_json(&m.damping))?;
    }

    let c = if stage == Stage::Modes {
        None
    } else {
        log::info!("stage couplings: Raman parameters and spin-spin coefficients");
        let c = run_couplings(cfg, &m)?;
        art.json("raman.json", &c.params.to_json())?;
        art.json("validity.json", &c.validity)?;
        if csv {
            art.write("spin_model.csv", |out| c.model.write_csv(out))?;
        } else {
            art.json("spin_model.json", &c.model.to_json())?;
        }
        Some(c)
    };

    let derived = DerivedParameters::new(&m, c.as_ref());
    let checks = reference_checks(&derived);
    art.json("derived.json", &derived)?;
    art.json("acceptance.json", &json!({ "all_pass": checks.iter().all(|k| k.pass), "checks": checks }))?;

    let mut sweep = Vec::new();
    if let (Stage::Experiment, Some(c)) = (stage, c.as_ref()) {
        let e = &cfg.experiment;
        let n_gc = c.model.n_spins() as f64 * c.model.gamma_c;
        let rcfg = ramsey_config(cfg);
        for (k, &w_rel) in e.w_over_n_gamma_c.iter().enumerate() {
            let w = w_rel * n_gc;
            log::info!("stage experiment: {:?} Ramsey at w = {w_rel} N Gamma_c", e.engine);
            let model = experiment_model(cfg, &m, c, w);
            let r = run_ramsey(e.engine, &model, &rcfg).map_err(stage_err("experiment"))?;
            if csv {
                art.write(&format!("ramsey_w{k:02}.csv"), |out| r.write_csv(out))?;
            } else {
                art.json(&format!("ramsey_w{k:02}.json"), &r)?;
            }
            sweep.push(SweepPoint::new(w_rel, w, c.model.gamma_c, &r));
        }
        if csv {
            art.write("sweep.csv", |out| write_sweep_csv(out, &sweep))?;
        } else {
            art.json("sweep.json", &sweep)?;
        }
    }

    let manifest = json!({
        "versions": { "ionsync": ionsync::VERSION, "ionsync-cli": env!("CARGO_PKG_VERSION") },
        "config_sha256": cfg.hash(),
        "seed": cfg.experiment.seed,
        "stage": stage,
        "engine": cfg.experiment.engine,
        "units": { "frequencies": "Hz (omega / 2 pi)", "lengths": "m", "times": "s" },
        "rerun": format!("ionsync --config config.toml --stage {}", serde_json::to_value(stage)?.as_str().unwrap_or("experiment")),
        "config": cfg,
        "files": art.files.clone(),
    });
    art.json("manifest.json", &manifest)?;
    Ok(PipelineReport { out_dir: art.dir, stage, derived, checks, sweep, files: art.files })
}
