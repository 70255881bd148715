//! Doppler damping of the transverse modes by the coolant ions.
//!
//! Each coolant ion sits at a node of a standing-wave cooling beam, so to
//! first order in its Lamb-Dicke factor the beam only drives motional
//! sidebands. Eliminating the fast internal dynamics gives, per mode,
//!
//! ```text
//! R±_n = sum_{m in coolant} (Ω η_n M_mn / 2)^2 / (Γ^2/4 + (Δ ∓ ω_n)^2)
//! D±_n = R±_n Γ/2
//! κ_n  = 2 (D⁻_n - D⁺_n),   n̄_n = D⁺_n / (D⁻_n - D⁺_n)
//! ```

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::consts::{HBAR, TWO_PI};
use crate::crystal::NormalModes;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoolingLaser {
    /// Linewidth of the cooling transition, rad/s.
    pub linewidth: f64,
    /// Laser detuning from resonance, rad/s (negative is red).
    pub detuning: f64,
    /// Rabi frequency, rad/s.
    pub rabi: f64,
    /// m
    pub wavelength: f64,
    /// Mean squared projection of the emission direction on z. Only enters
    /// recoil terms that vanish at this order; kept for completeness.
    pub emission_anisotropy: f64,
}

impl CoolingLaser {
    pub fn validate(&self) -> Result<()> {
        if !(self.linewidth > 0.0 && self.linewidth.is_finite()) {
            return Err(Error::InvalidInput(format!("cooling linewidth must be positive, got {}", self.linewidth)));
        }
        if !(self.rabi >= 0.0 && self.rabi.is_finite()) {
            return Err(Error::InvalidInput(format!("cooling Rabi frequency must be non-negative, got {}", self.rabi)));
        }
        if !(self.wavelength > 0.0 && self.wavelength.is_finite()) {
            return Err(Error::InvalidInput(format!("cooling wavelength must be positive, got {}", self.wavelength)));
        }
        if !(0.0..=1.0).contains(&self.emission_anisotropy) {
            return Err(Error::InvalidInput(format!(
                "emission anisotropy must lie in [0, 1], got {}",
                self.emission_anisotropy
            )));
        }
        if !self.detuning.is_finite() {
            return Err(Error::InvalidInput("cooling detuning must be finite".into()));
        }
        Ok(())
    }

    pub fn wavevector(&self) -> f64 {
        TWO_PI / self.wavelength
    }
}

/// Per-mode damping coefficients. Vectors are indexed by mode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModeDamping {
    pub frequencies: Vec<f64>,
    /// Frequencies including the light shift of the cooling beam, rad/s.
    pub shifted: Vec<f64>,
    /// Energy damping rates κ_n, rad/s.
    pub kappa: Vec<f64>,
    /// Mean occupation; NaN for modes flagged as not cooled.
    pub nbar: Vec<f64>,
    pub d_minus: Vec<f64>,
    pub d_plus: Vec<f64>,
    pub r_minus: Vec<f64>,
    pub r_plus: Vec<f64>,
    /// Modes where D⁻ ≤ D⁺, i.e. no net cooling.
    pub not_cooled: Vec<usize>,
}

impl ModeDamping {
    pub fn len(&self) -> usize {
        self.kappa.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kappa.is_empty()
    }

    pub fn all_cooled(&self) -> bool {
        self.not_cooled.is_empty()
    }

    /// Replaces every occupation by `nbar` and rescales D± so that κ is kept.
    /// Used to emulate sub-Doppler cooling schemes.
    pub fn with_uniform_nbar(mut self, nbar: f64) -> Self {
        for n in 0..self.len() {
            let half_kappa = self.kappa[n] / 2.0;
            self.nbar[n] = nbar;
            self.d_plus[n] = nbar * half_kappa;
            self.d_minus[n] = (nbar + 1.0) * half_kappa;
        }
        self
    }

    /// Writes `mode,omega_hz,omega_shifted_hz,kappa_hz,nbar`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "mode,omega_hz,omega_shifted_hz,kappa_hz,nbar")?;
        for n in 0..self.len() {
            writeln!(
                out,
                "{n},{:.12e},{:.12e},{:.12e},{:.12e}",
                self.frequencies[n] / TWO_PI,
                self.shifted[n] / TWO_PI,
                self.kappa[n] / TWO_PI,
                self.nbar[n]
            )?;
        }
        Ok(())
    }
}

fn check_indices(modes: &NormalModes, tau: &[usize]) -> Result<()> {
    if tau.is_empty() {
        return Err(Error::InvalidInput("no coolant ions given".into()));
    }
    if let Some(bad) = tau.iter().find(|&&m| m >= modes.matrix.nrows()) {
        return Err(Error::InvalidInput(format!("coolant index {bad} out of range")));
    }
    Ok(())
}

fn eta(k: f64, mass: f64, omega: f64) -> f64 {
    k * (HBAR / (2.0 * mass * omega)).sqrt()
}

fn sideband_weights(laser: &CoolingLaser, omega: f64) -> (f64, f64) {
    let g2 = laser.linewidth * laser.linewidth / 4.0;
    let lm = 1.0 / (g2 + (laser.detuning + omega).powi(2));
    let lp = 1.0 / (g2 + (laser.detuning - omega).powi(2));
    (lm, lp)
}

/// Damping coefficients of every mode. `coolant_mass` sets the coolant Lamb-Dicke factors.
pub fn mode_damping(
    modes: &NormalModes,
    laser: &CoolingLaser,
    tau_indices: &[usize],
    coolant_mass: f64,
) -> Result<ModeDamping> {
    laser.validate()?;
    check_indices(modes, tau_indices)?;
    let k = laser.wavevector();
    let n_modes = modes.len();
    let mut out = ModeDamping {
        frequencies: modes.frequencies.clone(),
        shifted: vec![0.0; n_modes],
        kappa: vec![0.0; n_modes],
        nbar: vec![0.0; n_modes],
        d_minus: vec![0.0; n_modes],
        d_plus: vec![0.0; n_modes],
        r_minus: vec![0.0; n_modes],
        r_plus: vec![0.0; n_modes],
        not_cooled: Vec::new(),
    };
    for n in 0..n_modes {
        let w = modes.frequencies[n];
        let amp = 0.5 * laser.rabi * eta(k, coolant_mass, w);
        let weight: f64 = tau_indices.iter().map(|&m| (amp * modes.matrix[(m, n)]).powi(2)).sum();
        let (lm, lp) = sideband_weights(laser, w);
        let (rm, rp) = (weight * lm, weight * lp);
        let (dm, dp) = (rm * laser.linewidth / 2.0, rp * laser.linewidth / 2.0);
        out.r_minus[n] = rm;
        out.r_plus[n] = rp;
        out.d_minus[n] = dm;
        out.d_plus[n] = dp;
        out.kappa[n] = 2.0 * (dm - dp);
        out.shifted[n] = w + rm * (laser.detuning + w) + rp * (laser.detuning - w);
        if dm > dp {
            out.nbar[n] = dp / (dm - dp);
        } else {
            out.nbar[n] = f64::NAN;
            out.not_cooled.push(n);
        }
    }
    if !out.not_cooled.is_empty() {
        log::warn!("{} of {} modes are not cooled by this laser", out.not_cooled.len(), n_modes);
    }
    Ok(out)
}

/// Largest neglected mode cross-coupling relative to the smaller of the two damping rates.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CrossCouplingReport {
    pub max_ratio: f64,
    pub mode_pair: (usize, usize),
    pub max_abs_d: f64,
}

/// Mixed-mode sideband coefficients `R±_{k,n}` for k ≠ n.
pub fn mixed_rates(
    modes: &NormalModes,
    laser: &CoolingLaser,
    tau_indices: &[usize],
    coolant_mass: f64,
    k_mode: usize,
    n_mode: usize,
) -> (f64, f64) {
    let k = laser.wavevector();
    let wk = modes.frequencies[k_mode];
    let wn = modes.frequencies[n_mode];
    let pref = 0.25 * laser.rabi * laser.rabi * eta(k, coolant_mass, wk) * eta(k, coolant_mass, wn);
    let overlap: f64 = tau_indices.iter().map(|&m| modes.matrix[(m, k_mode)] * modes.matrix[(m, n_mode)]).sum();
    let (lm, lp) = sideband_weights(laser, wk);
    (pref * overlap * lm, pref * overlap * lp)
}

pub fn cross_coupling_check(
    modes: &NormalModes,
    laser: &CoolingLaser,
    tau_indices: &[usize],
    coolant_mass: f64,
) -> Result<CrossCouplingReport> {
    let damping = mode_damping(modes, laser, tau_indices, coolant_mass)?;
    let mut report = CrossCouplingReport { max_ratio: 0.0, mode_pair: (0, 0), max_abs_d: 0.0 };
    for kk in 0..modes.len() {
        for nn in 0..modes.len() {
            if kk == nn {
                continue;
            }
            let (rm, rp) = mixed_rates(modes, laser, tau_indices, coolant_mass, kk, nn);
            let d = (rm.abs().max(rp.abs())) * laser.linewidth / 2.0;
            let denom = damping.kappa[kk].abs().min(damping.kappa[nn].abs());
            let ratio = if denom > 0.0 { d / denom } else if d > 0.0 { f64::INFINITY } else { 0.0 };
            if ratio > report.max_ratio {
                report = CrossCouplingReport { max_ratio: ratio, mode_pair: (kk, nn), max_abs_d: d };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consts::{hz, ATOMIC_MASS_UNIT};
    use crate::crystal::{calibrate_trap, generate_crystal, solve_normal_modes};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn table_laser() -> CoolingLaser {
        let gamma = hz(41.4e6);
        CoolingLaser {
            linewidth: gamma,
            detuning: -gamma / 2.0,
            rabi: hz(10e6),
            wavelength: 280.3e-9,
            emission_anisotropy: 0.4,
        }
    }

    fn single_mode(omega: f64) -> NormalModes {
        NormalModes { frequencies: vec![omega], matrix: DMatrix::from_element(1, 1, 1.0), masses: vec![1.0] }
    }

    fn crystal_modes(ns: usize, nt: usize) -> (crate::crystal::CrystalConfig, NormalModes) {
        let c = generate_crystal(ns, nt, 10e-6).unwrap();
        let k = calibrate_trap(&c, hz(2e6)).unwrap();
        let c = c.with_trap_stiffness(k);
        let m = solve_normal_modes(&c).unwrap();
        (c, m)
    }

    #[test]
    fn single_ion_hand_values() {
        let laser = CoolingLaser {
            linewidth: 4.0,
            detuning: -2.0,
            rabi: 2.0,
            wavelength: TWO_PI,
            emission_anisotropy: 0.0,
        };
        let omega = 1.0;
        let mass = HBAR / 2.0 / 0.01; // eta = 0.1
        let d = mode_damping(&single_mode(omega), &laser, &[0], mass).unwrap();
        // (Ω η / 2)^2 = 0.01; Γ²/4 = 4; (Δ + ω)² = 1; (Δ - ω)² = 9.
        assert!((d.r_minus[0] - 0.01 / 5.0).abs() < 1e-15);
        assert!((d.r_plus[0] - 0.01 / 13.0).abs() < 1e-15);
        assert!((d.kappa[0] - 4.0 * (0.01 / 5.0 - 0.01 / 13.0)).abs() < 1e-15);
        let nbar = (0.01 / 13.0) / (0.01 / 5.0 - 0.01 / 13.0);
        assert!((d.nbar[0] - nbar).abs() < 1e-12);
        let laser2 = CoolingLaser { detuning: 0.5, ..laser };
        let d2 = mode_damping(&single_mode(omega), &laser2, &[0], mass).unwrap();
        assert!((d2.r_minus[0] - 0.01 / 6.25).abs() < 1e-15);
        assert!((d2.r_plus[0] - 0.01 / 4.25).abs() < 1e-15);
        assert!((d2.kappa[0] - 4.0 * (0.01 / 6.25 - 0.01 / 4.25)).abs() < 1e-15);
        assert!((d2.shifted[0] - (1.0 + 0.01 / 6.25 * 1.5 + 0.01 / 4.25 * -0.5)).abs() < 1e-15);
        assert_eq!(d2.not_cooled, vec![0]);
    }

    #[test]
    fn table_two_cooling() {
        let (c, modes) = crystal_modes(124, 93);
        let d = mode_damping(&modes, &table_laser(), &c.coolant_indices(), c.coolant.mass).unwrap();
        let kappa_khz = d.kappa[0] / TWO_PI / 1e3;
        assert!((kappa_khz / 5.1 - 1.0).abs() < 0.15, "κ_COM = {kappa_khz} kHz");
        assert!((d.nbar[0] / 4.7 - 1.0).abs() < 0.10, "n̄_COM = {}", d.nbar[0]);
        assert!(d.all_cooled());
    }

    #[test]
    fn no_drive_no_damping() {
        let (c, modes) = crystal_modes(5, 2);
        let laser = CoolingLaser { rabi: 0.0, ..table_laser() };
        let d = mode_damping(&modes, &laser, &c.coolant_indices(), c.coolant.mass).unwrap();
        assert!(d.kappa.iter().all(|k| *k == 0.0));
        assert_eq!(d.shifted, d.frequencies);
    }

    #[test]
    fn zero_detuning_no_cooling() {
        let (c, modes) = crystal_modes(5, 2);
        let laser = CoolingLaser { detuning: 0.0, ..table_laser() };
        let d = mode_damping(&modes, &laser, &c.coolant_indices(), c.coolant.mass).unwrap();
        assert!(d.kappa.iter().all(|k| *k == 0.0));
        assert_eq!(d.not_cooled.len(), modes.len());
    }

    #[test]
    fn blue_detuning_is_flagged() {
        let (c, modes) = crystal_modes(5, 2);
        let laser = CoolingLaser { detuning: hz(20e6), ..table_laser() };
        let d = mode_damping(&modes, &laser, &c.coolant_indices(), c.coolant.mass).unwrap();
        assert_eq!(d.not_cooled.len(), modes.len());
        assert!(d.nbar.iter().all(|n| n.is_nan()));
        assert!(d.kappa.iter().all(|k| *k < 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let (_, modes) = crystal_modes(2, 1);
        assert!(mode_damping(&modes, &table_laser(), &[], 1.0).is_err());
        assert!(mode_damping(&modes, &table_laser(), &[7], 1.0).is_err());
        let bad = CoolingLaser { linewidth: 0.0, ..table_laser() };
        assert!(mode_damping(&modes, &bad, &[0], 1.0).is_err());
    }

    #[test]
    fn cross_coupling_matches_direct_sum() {
        let (c, modes) = crystal_modes(2, 1);
        let laser = table_laser();
        let tau = c.coolant_indices();
        let mass = c.coolant.mass;
        let k = laser.wavevector();
        for kk in 0..3 {
            for nn in 0..3 {
                let (rm, rp) = mixed_rates(&modes, &laser, &tau, mass, kk, nn);
                let mut sm = 0.0;
                let mut sp = 0.0;
                for &m in &tau {
                    let ek = k * (HBAR / (2.0 * mass * modes.frequencies[kk])).sqrt();
                    let en = k * (HBAR / (2.0 * mass * modes.frequencies[nn])).sqrt();
                    let a = 0.5 * laser.rabi * ek * modes.matrix[(m, kk)];
                    let b = 0.5 * laser.rabi * en * modes.matrix[(m, nn)];
                    let g = laser.linewidth.powi(2) / 4.0;
                    sm += a * b / (g + (laser.detuning + modes.frequencies[kk]).powi(2));
                    sp += a * b / (g + (laser.detuning - modes.frequencies[kk]).powi(2));
                }
                assert!((rm - sm).abs() <= 1e-12 * sm.abs().max(1e-30));
                assert!((rp - sp).abs() <= 1e-12 * sp.abs().max(1e-30));
            }
        }
        let report = cross_coupling_check(&modes, &laser, &tau, mass).unwrap();
        assert!(report.max_ratio.is_finite());
    }

    #[test]
    fn disjoint_support_has_no_cross_coupling() {
        let modes = NormalModes {
            frequencies: vec![2.0, 1.0],
            matrix: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
            masses: vec![1.0, 1.0],
        };
        let (rm, rp) = mixed_rates(&modes, &table_laser(), &[0, 1], 1.0, 0, 1);
        assert_eq!((rm, rp), (0.0, 0.0));
    }

    #[test]
    fn uniform_nbar_preserves_kappa() {
        let (c, modes) = crystal_modes(4, 3);
        let d = mode_damping(&modes, &table_laser(), &c.coolant_indices(), c.coolant.mass).unwrap();
        let u = d.clone().with_uniform_nbar(0.0);
        for n in 0..d.len() {
            assert!((2.0 * (u.d_minus[n] - u.d_plus[n]) - d.kappa[n]).abs() <= 1e-15 * d.kappa[n]);
            assert_eq!(u.nbar[n], 0.0);
        }
    }

    proptest! {
        #[test]
        fn detailed_balance_and_scaling(
            det in -3.0f64..-0.05,
            rabi in 0.1f64..3.0,
            lambda in 0.2f64..5.0,
            flip in any::<bool>(),
        ) {
            let (c, mut modes) = crystal_modes(3, 2);
            let gamma = hz(41.4e6);
            let laser = CoolingLaser { linewidth: gamma, detuning: det * gamma, rabi: rabi * hz(10e6),
                wavelength: 280.3e-9, emission_anisotropy: 0.0 };
            let tau = c.coolant_indices();
            let mass = 24.0 * ATOMIC_MASS_UNIT;
            let d = mode_damping(&modes, &laser, &tau, mass).unwrap();
            for n in 0..d.len() {
                let lhs = d.nbar[n] * (d.d_minus[n] - d.d_plus[n]);
                prop_assert!((lhs - d.d_plus[n]).abs() <= 1e-12 * d.d_plus[n]);
                prop_assert!(d.kappa[n] > 0.0 && d.nbar[n] > 0.0);
                prop_assert!(d.r_minus[n] >= 0.0 && d.r_plus[n] >= 0.0);
            }
            let scaled = CoolingLaser { rabi: laser.rabi * lambda, ..laser };
            let ds = mode_damping(&modes, &scaled, &tau, mass).unwrap();
            for n in 0..d.len() {
                prop_assert!((ds.kappa[n] - lambda * lambda * d.kappa[n]).abs() <= 1e-12 * ds.kappa[n]);
            }
            if flip {
                for n in 0..modes.len() {
                    let col = -modes.matrix.column(n);
                    modes.matrix.set_column(n, &col);
                }
                let df = mode_damping(&modes, &laser, &tau, mass).unwrap();
                prop_assert_eq!(df.kappa, d.kappa);
            }
        }
    }
}
