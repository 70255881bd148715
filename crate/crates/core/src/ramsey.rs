//! Ramsey sequence: π/2 about x, free evolution with the repump on, then
//! analysis of the fringe envelope and readout variance.
//!
//! The envelope is `|⟨σ⁺⟩|(t)` during the interrogation, normalized so that
//! it starts at 1. The readout variance after the second pulse equals the
//! variance of `J^y` before it:
//!
//! ```text
//! (ΔJ^y)² = N/4 + N(N-1)/2 (⟨σ⁺_iσ⁻_j⟩ - Re⟨σ⁺_iσ⁺_j⟩) - N² (Im⟨σ⁺⟩)²
//! ```
//!
//! Every engine supplies those correlators directly, so the second pulse is
//! not simulated.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::exact::{self, MinimalModel, Observables};
use crate::langevin::{self, InitialState, IntegrateOptions, SpinState};
use crate::spinspin::SpinSpinModel;
use crate::{Error, Result};

/// Rotates every spin of a c-number state by π/2 about x.
pub fn pulse_pi_half(state: &mut SpinState) {
    for v in state.s.chunks_mut(3) {
        // Exact quarter turn of `langevin::rotate_x`: (x, y, z) -> (x, -z, y).
        let (y, z) = (v[1], v[2]);
        v[1] = -z;
        v[2] = y;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    #[default]
    Langevin,
    Minimal,
    Dense,
}

impl std::str::FromStr for Engine {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "langevin" => Ok(Engine::Langevin),
            "minimal" => Ok(Engine::Minimal),
            "dense" => Ok(Engine::Dense),
            other => Err(Error::InvalidInput(format!("unknown engine '{other}'"))),
        }
    }
}

/// Run settings shared by all engines.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RamseyConfig {
    /// Interrogation time, s.
    pub t_final: f64,
    /// Spacing of recorded samples, s.
    pub sample_interval: f64,
    /// Samples with `t >= steady_fraction * t_final` are averaged for steady observables.
    pub steady_fraction: f64,
    /// Fit window start; `None` uses `max(5/(NΓ_c), 3/w)`.
    pub fit_start: Option<f64>,
    /// Fit window end; `None` uses the whole run.
    pub fit_end: Option<f64>,
    /// Langevin settings; `dt` is also the step cap for exact engines when set.
    pub langevin: IntegrateOptions,
    /// Step cap for exact engines.
    pub exact_dt: Option<f64>,
}

impl Default for RamseyConfig {
    fn default() -> Self {
        Self {
            t_final: 1.0,
            sample_interval: 0.01,
            steady_fraction: 0.75,
            fit_start: None,
            fit_end: None,
            langevin: IntegrateOptions { initial: InitialState::Equator, ..Default::default() },
            exact_dt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    /// Decay rate λ of `exp(-λ t)`, 1/s.
    pub rate: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub t0: f64,
    pub t1: f64,
    pub n_points: usize,
}

/// Least-squares line through `ln(envelope)` on `[t0, t1]`.
///
/// Samples at or below `floor` end the window early. Fewer than ten samples is an error.
pub fn fit_decay(times: &[f64], envelope: &[f64], t0: f64, t1: f64, floor: &[f64]) -> Result<DecayFit> {
    let mut pts = Vec::new();
    for (k, (&t, &e)) in times.iter().zip(envelope).enumerate() {
        if t < t0 {
            continue;
        }
        if t > t1 || !(e > floor.get(k).copied().unwrap_or(0.0)) {
            break;
        }
        pts.push((t, e.ln()));
    }
    if pts.len() < 10 {
        return Err(Error::FitWindow(pts.len()));
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mt;
    let ss_res: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Ok(DecayFit {
        rate: -slope,
        intercept,
        r_squared,
        t0: pts[0].0,
        t1: pts[pts.len() - 1].0,
        n_points: pts.len(),
    })
}

/// Default fit start `max(5/(NΓ_c), 3/w)`, ignoring terms with a zero rate.
pub fn default_fit_start(n: usize, gamma_c: f64, w: f64) -> f64 {
    let a = if gamma_c > 0.0 { 5.0 / (n as f64 * gamma_c) } else { 0.0 };
    let b = if w > 0.0 { 3.0 / w } else { 0.0 };
    a.max(b)
}

/// Returns `(ΔJ^y)²` and `V = (ΔJ^y)² / (N/4)`.
pub fn variance_inversion(n: usize, pm: f64, pp_re: f64, sp_im: f64) -> (f64, f64) {
    let nf = n as f64;
    let var = nf / 4.0 + nf * (nf - 1.0) / 2.0 * (pm - pp_re) - nf * nf * sp_im * sp_im;
    (var, var / (nf / 4.0))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SteadyObservables {
    pub sz: f64,
    pub pm: f64,
    pub pp_re: f64,
    pub sp_im: f64,
    /// Standard errors (zero for exact engines).
    pub sz_se: f64,
    pub pm_se: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RamseyResult {
    pub engine: Engine,
    pub n_spins: usize,
    pub times: Vec<f64>,
    pub envelope: Vec<f64>,
    pub envelope_se: Vec<f64>,
    pub fit: Option<DecayFit>,
    /// Why no fit was produced, when `fit` is `None`.
    pub fit_error: Option<String>,
    pub steady: SteadyObservables,
    pub variance: f64,
    pub normalized_variance: f64,
    /// Standard error of `normalized_variance` from the correlator errors.
    pub normalized_variance_se: f64,
    pub aborted: usize,
}

impl RamseyResult {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "time,envelope,stderr")?;
        for ((t, e), s) in self.times.iter().zip(&self.envelope).zip(&self.envelope_se) {
            writeln!(out, "{t:.12e},{e:.12e},{s:.12e}")?;
        }
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "engine": self.engine,
            "n_spins": self.n_spins,
            "decay_rate_per_s": self.fit.as_ref().map(|f| f.rate),
            "r_squared": self.fit.as_ref().map(|f| f.r_squared),
            "fit_window_s": self.fit.as_ref().map(|f| [f.t0, f.t1]),
            "fit_error": self.fit_error,
            "steady": self.steady,
            "variance": self.variance,
            "normalized_variance": self.normalized_variance,
            "normalized_variance_se": self.normalized_variance_se,
            "aborted_trajectories": self.aborted,
        })
    }
}

impl MinimalModel {
    /// Recovers the minimal model from a uniform spin model without coherent terms.
    pub fn from_spin_model(m: &SpinSpinModel) -> Result<Self> {
        let n = m.n_spins();
        if !m.is_uniform(1e-9) {
            return Err(Error::InvalidInput("minimal engine needs uniform collective rates".into()));
        }
        if m.b.iter().any(|b| *b != 0.0) || m.j.iter().enumerate().any(|(k, z)| k % (n + 1) != 0 && z.norm() != 0.0) {
            return Err(Error::InvalidInput("minimal engine has no fields or exchange couplings".into()));
        }
        let gm = m.gamma_minus[(0, 0)].re;
        let gp = m.gamma_plus[(0, 0)].re;
        let gamma_c = 2.0 * (gm - gp);
        let nbar = if gamma_c > 0.0 { 2.0 * gp / gamma_c } else { 0.0 };
        if gamma_c < 0.0 || (gamma_c == 0.0 && gp != 0.0) {
            return Err(Error::InvalidInput("minimal engine needs Γ⁻ ≥ Γ⁺ with Γ⁺ = 0 when Γ_c = 0".into()));
        }
        Ok(MinimalModel { n, gamma_c, nbar, w: m.w + m.gamma_13, gamma_sp: m.gamma_31, gamma_deph: m.gamma_d })
    }
}

fn exact_steady(values: &[Observables], times: &[f64], from: f64) -> SteadyObservables {
    let sel: Vec<&Observables> = values.iter().zip(times).filter(|(_, t)| **t >= from).map(|(o, _)| o).collect();
    let k = sel.len().max(1) as f64;
    SteadyObservables {
        sz: sel.iter().map(|o| o.sz).sum::<f64>() / k,
        pm: sel.iter().map(|o| o.pm).sum::<f64>() / k,
        pp_re: sel.iter().map(|o| o.pp.re).sum::<f64>() / k,
        sp_im: sel.iter().map(|o| o.sp.im).sum::<f64>() / k,
        ..Default::default()
    }
}

/// Runs the sequence with the chosen engine.
pub fn run_ramsey(engine: Engine, model: &SpinSpinModel, cfg: &RamseyConfig) -> Result<RamseyResult> {
    let n = model.n_spins();
    let from = cfg.steady_fraction * cfg.t_final;
    let (times, envelope, envelope_se, steady, aborted) = match engine {
        Engine::Langevin => {
            let every = (cfg.sample_interval / cfg.langevin.dt).round().max(1.0) as usize;
            let opts = IntegrateOptions {
                t_final: cfg.t_final,
                sample_every: every,
                initial: InitialState::Equator,
                average_from: Some(from),
                ..cfg.langevin.clone()
            };
            let e = langevin::integrate(model, &opts)?;
            let (env, se) = e.envelope();
            let e0 = env[0];
            let avg = e.steady.as_ref().ok_or_else(|| Error::InvalidInput("no samples in the steady window".into()))?;
            let (sz, sz_se) = avg.get("sz");
            let (pm, pm_se) = avg.get("pm");
            let (pp_re, _) = avg.get("pp_re");
            let (sp_im, _) = avg.get("sp_im");
            let steady = SteadyObservables { sz, pm, pp_re, sp_im, sz_se, pm_se };
            (
                e.times.clone(),
                env.iter().map(|v| v / e0).collect::<Vec<_>>(),
                se.iter().map(|v| v / e0).collect::<Vec<_>>(),
                steady,
                e.aborted,
            )
        }
        Engine::Minimal => {
            let mm = MinimalModel::from_spin_model(model)?;
            let s = exact::minimal_solve(&mm, &exact::EQUATOR, cfg.t_final, cfg.sample_interval, cfg.exact_dt)?;
            let env = s.envelope();
            let e0 = env[0];
            let steady = exact_steady(&s.values, &s.times, from);
            let zeros = vec![0.0; env.len()];
            (s.times, env.iter().map(|v| v / e0).collect(), zeros, steady, 0)
        }
        Engine::Dense => {
            let l = exact::build_dense(model)?;
            let rho0 = exact::rotate_x_dense(&exact::ground_state_dense(n), std::f64::consts::FRAC_PI_2);
            let (s, _) = exact::evolve_dense(&l, &rho0, cfg.t_final, cfg.sample_interval, cfg.exact_dt)?;
            let env = s.envelope();
            let e0 = env[0];
            let steady = exact_steady(&s.values, &s.times, from);
            let zeros = vec![0.0; env.len()];
            (s.times, env.iter().map(|v| v / e0).collect(), zeros, steady, 0)
        }
    };
    let t0 = cfg.fit_start.unwrap_or_else(|| default_fit_start(n, model.gamma_c, model.w));
    let t1 = cfg.fit_end.unwrap_or(cfg.t_final);
    let floor: Vec<f64> = envelope_se.iter().map(|s| 3.0 * s).collect();
    let (fit, fit_error) = match fit_decay(&times, &envelope, t0, t1, &floor) {
        Ok(f) => (Some(f), None),
        Err(e) => {
            log::warn!("Ramsey fit failed: {e}");
            (None, Some(e.to_string()))
        }
    };
    let (variance, normalized_variance) = variance_inversion(n, steady.pm, steady.pp_re, steady.sp_im);
    let nf = n as f64;
    let normalized_variance_se = 2.0 * (nf - 1.0) * steady.pm_se;
    Ok(RamseyResult {
        engine,
        n_spins: n,
        times,
        envelope,
        envelope_se,
        fit,
        fit_error,
        steady,
        variance,
        normalized_variance,
        normalized_variance_se,
        aborted,
    })
}
