//! Spin-only master equation after eliminating the damped normal modes.
//!
//! The generator acting on the spin density matrix μ is
//!
//! ```text
//! dμ/dt = -i[H, μ]
//!       + Σ_lm Γ⁻_lm (2 σ⁻_m μ σ⁺_l - σ⁺_l σ⁻_m μ - μ σ⁺_l σ⁻_m)
//!       + Σ_lm Γ⁺_lm (2 σ⁺_l μ σ⁻_m - σ⁻_m σ⁺_l μ - μ σ⁻_m σ⁺_l)
//!       + Γ31/2 Σ_l D[σ⁻_l] μ + (w + Γ13)/2 Σ_l D[σ⁺_l] μ + Γd/8 Σ_l D[σᶻ_l] μ
//! H = 1/2 Σ_l B_l σᶻ_l + Σ_{l≠m} J_lm σ⁺_l σ⁻_m
//! ```
//!
//! with `D[O]μ = 2OμO† - O†Oμ - μO†O`.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::consts::TWO_PI;
use crate::cooling::ModeDamping;
use crate::raman::{EffectiveSpinParams, SpinPhononCoupling};
use crate::{Error, Result, C64};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpinSpinModel {
    pub b: Vec<f64>,
    pub j: DMatrix<C64>,
    pub gamma_minus: DMatrix<C64>,
    pub gamma_plus: DMatrix<C64>,
    pub gamma_31: f64,
    pub gamma_13: f64,
    /// Total dephasing including the repump contribution χw.
    pub gamma_d: f64,
    pub w: f64,
    pub chi: f64,
    /// Ensemble-averaged net collective emission rate.
    pub gamma_c: f64,
    /// Mode detunings δ̃_n = ω'_n + δ_R; empty for hand-built models.
    pub mode_detunings: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    /// Keep only the highest (COM) mode.
    pub com_only: bool,
}

pub fn gamma_c_of(gamma_minus: &DMatrix<C64>, gamma_plus: &DMatrix<C64>) -> f64 {
    let n = gamma_minus.nrows() as f64;
    2.0 / (n * n) * (gamma_minus - gamma_plus).iter().map(|z| z.re).sum::<f64>()
}

/// Assembles the spin-spin coefficients from couplings and mode damping.
pub fn build_model(
    f: &SpinPhononCoupling,
    damping: &ModeDamping,
    delta_r: f64,
    w: f64,
    chi: f64,
    params: &EffectiveSpinParams,
    opts: BuildOptions,
) -> Result<SpinSpinModel> {
    if f.n_modes() != damping.len() {
        return Err(Error::Dimension(format!("{} coupled modes but {} damped modes", f.n_modes(), damping.len())));
    }
    if !(w >= 0.0 && chi >= 0.0) {
        return Err(Error::InvalidInput(format!("repump w = {w} and branching χ = {chi} must be non-negative")));
    }
    let ns = f.n_spins();
    let modes: Vec<usize> = if opts.com_only { vec![0] } else { (0..damping.len()).collect() };
    let detunings: Vec<f64> = damping.shifted.iter().map(|w| w + delta_r).collect();

    let mut b = vec![0.0; ns];
    let mut j = DMatrix::<C64>::zeros(ns, ns);
    let mut gm = DMatrix::<C64>::zeros(ns, ns);
    let mut gp = DMatrix::<C64>::zeros(ns, ns);
    for &n in &modes {
        let (kappa, nbar, dt) = (damping.kappa[n], damping.nbar[n], detunings[n]);
        let denom = kappa * kappa / 4.0 + dt * dt;
        if denom == 0.0 {
            return Err(Error::SingularMode { mode: n });
        }
        if !nbar.is_finite() {
            return Err(Error::InvalidInput(format!("mode {n} is not cooled; spin model undefined")));
        }
        let col = f.f.column(n);
        for l in 0..ns {
            b[l] -= col[l].norm_sqr() * dt * (1.0 + 2.0 * nbar) / denom;
            for m in 0..ns {
                let ff = col[l] * col[m].conj() / denom;
                j[(l, m)] -= ff * dt;
                gm[(l, m)] += ff * (kappa / 2.0 * (1.0 + nbar));
                gp[(l, m)] += ff * (kappa / 2.0 * nbar);
            }
        }
    }
    let gamma_c = gamma_c_of(&gm, &gp);
    Ok(SpinSpinModel {
        b,
        j,
        gamma_minus: gm,
        gamma_plus: gp,
        gamma_31: params.gamma_31,
        gamma_13: params.gamma_13,
        gamma_d: params.gamma_d + chi * w,
        w,
        chi,
        gamma_c,
        mode_detunings: detunings,
    })
}

impl SpinSpinModel {
    /// Permutation-symmetric model with uniform collective coupling:
    /// `Γ⁻ = Γc(n̄+1)/2`, `Γ⁺ = Γc n̄/2` for every pair, no Hamiltonian.
    pub fn minimal(n: usize, gamma_c: f64, nbar: f64, w: f64) -> Self {
        Self {
            b: vec![0.0; n],
            j: DMatrix::zeros(n, n),
            gamma_minus: DMatrix::from_element(n, n, C64::from(gamma_c / 2.0 * (nbar + 1.0))),
            gamma_plus: DMatrix::from_element(n, n, C64::from(gamma_c / 2.0 * nbar)),
            gamma_31: 0.0,
            gamma_13: 0.0,
            gamma_d: 0.0,
            w,
            chi: 0.0,
            gamma_c,
            mode_detunings: Vec::new(),
        }
    }

    pub fn with_single_spin_rates(mut self, gamma_31: f64, gamma_13: f64, gamma_d: f64) -> Self {
        self.gamma_31 = gamma_31;
        self.gamma_13 = gamma_13;
        self.gamma_d = gamma_d;
        self
    }

    pub fn with_repump(mut self, w: f64) -> Self {
        self.gamma_d += self.chi * (w - self.w);
        self.w = w;
        self
    }

    pub fn n_spins(&self) -> usize {
        self.b.len()
    }

    /// Drops every mode-mediated term (fields, exchange and collective rates).
    pub fn without_collective(mut self) -> Self {
        let n = self.n_spins();
        self.b = vec![0.0; n];
        self.j = DMatrix::zeros(n, n);
        self.gamma_minus = DMatrix::zeros(n, n);
        self.gamma_plus = DMatrix::zeros(n, n);
        self.gamma_c = 0.0;
        self
    }

    /// True when every pair shares the same Γ± and there is no Hamiltonian.
    pub fn is_uniform(&self, tol: f64) -> bool {
        let m0 = self.gamma_minus[(0, 0)];
        let p0 = self.gamma_plus[(0, 0)];
        let scale = m0.norm().max(p0.norm()).max(f64::MIN_POSITIVE);
        self.gamma_minus.iter().all(|z| (z - m0).norm() <= tol * scale)
            && self.gamma_plus.iter().all(|z| (z - p0).norm() <= tol * scale)
            && self.b.iter().all(|b| b.abs() <= tol * scale)
            && self.j.iter().all(|z| z.norm() <= tol * scale)
    }

    /// Largest magnitude of an imaginary part in J, Γ⁻ or Γ⁺.
    pub fn max_imag(&self) -> f64 {
        self.j
            .iter()
            .chain(self.gamma_minus.iter())
            .chain(self.gamma_plus.iter())
            .map(|z| z.im.abs())
            .fold(0.0, f64::max)
    }

    /// Smallest eigenvalues of Γ⁻ and Γ⁺ relative to their norms.
    pub fn psd_margins(&self) -> (f64, f64) {
        let rel = |m: &DMatrix<C64>| {
            let norm = m.norm().max(f64::MIN_POSITIVE);
            let e = SymmetricEigen::new(m.clone()).eigenvalues;
            e.iter().cloned().fold(f64::INFINITY, f64::min) / norm
        };
        (rel(&self.gamma_minus), rel(&self.gamma_plus))
    }

    pub fn hermiticity_error(&self) -> f64 {
        [&self.j, &self.gamma_minus, &self.gamma_plus]
            .iter()
            .map(|m| (*m - m.adjoint()).camax())
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let split = |m: &DMatrix<C64>| {
            let rows: Vec<Vec<[f64; 2]>> =
                (0..m.nrows()).map(|r| (0..m.ncols()).map(|c| [m[(r, c)].re, m[(r, c)].im]).collect()).collect();
            rows
        };
        json!({
            "n_spins": self.n_spins(),
            "b": self.b,
            "j": split(&self.j),
            "gamma_minus": split(&self.gamma_minus),
            "gamma_plus": split(&self.gamma_plus),
            "gamma_31": self.gamma_31,
            "gamma_13": self.gamma_13,
            "gamma_d": self.gamma_d,
            "w": self.w,
            "chi": self.chi,
            "gamma_c": self.gamma_c,
            "gamma_c_hz": self.gamma_c / TWO_PI,
        })
    }

    /// One row per spin pair: `l,m,b_l,j_re,j_im,gm_re,gm_im,gp_re,gp_im` (rad/s).
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "l,m,b_l,j_re,j_im,gm_re,gm_im,gp_re,gp_im")?;
        let n = self.n_spins();
        for l in 0..n {
            for m in 0..n {
                let (j, gm, gp) = (self.j[(l, m)], self.gamma_minus[(l, m)], self.gamma_plus[(l, m)]);
                writeln!(
                    out,
                    "{l},{m},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
                    self.b[l], j.re, j.im, gm.re, gm.im, gp.re, gp.im
                )?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValidityReport {
    /// κ_COM / [N_σ Γ_COM (1 + n̄_COM)], with Γ_COM = mean_l |F_l,COM|² / κ_COM.
    pub markov_ratio: f64,
    /// δ̃_n / κ_COM for every other mode.
    pub off_resonant_ratios: Vec<f64>,
    pub warning: bool,
}

pub fn validity_check(
    model: &SpinSpinModel,
    f: &SpinPhononCoupling,
    damping: &ModeDamping,
) -> ValidityReport {
    let kappa = damping.kappa[0];
    let ns = f.n_spins() as f64;
    let f2 = f.f.column(0).iter().map(|z| z.norm_sqr()).sum::<f64>() / ns;
    let gamma_com = f2 / kappa;
    let markov_ratio = if gamma_com == 0.0 { f64::INFINITY } else { kappa / (ns * gamma_com * (1.0 + damping.nbar[0])) };
    let off_resonant_ratios = model.mode_detunings.iter().skip(1).map(|d| d / kappa).collect();
    let warning = markov_ratio < 10.0;
    if warning {
        log::warn!("mode elimination is marginal: κ_COM / [N Γ_COM (1 + n̄)] = {markov_ratio:.3}");
    }
    ValidityReport { markov_ratio, off_resonant_ratios, warning }
}
