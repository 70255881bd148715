//! Raman-driven three-level spin ions reduced to effective two-level systems.
//!
//! Levels are `|1⟩` (lower spin state), `|2⟩` (excited, far detuned) and
//! `|3⟩` (upper spin state). In the frame rotating with both beams
//!
//! ```text
//! H = Δ1 |1⟩⟨1| + Δ2 |3⟩⟨3| + (g1/2 |2⟩⟨1| + g2/2 |2⟩⟨3| + h.c.)
//! L ρ = -i[H, ρ] + Γ1/2 D[|1⟩⟨2|] ρ + Γ2/2 D[|3⟩⟨2|] ρ
//! D[O] ρ = 2 O ρ O† - O†O ρ - ρ O†O
//! ```
//!
//! Superoperators act on the nine operators `A_k = |i⟩⟨j|` with
//! `k = 3(i-1) + j`, so A1 = |1⟩⟨1|, A2 = |1⟩⟨2|, ..., A9 = |3⟩⟨3|.

use nalgebra::{DMatrix, Matrix3};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::crystal::NormalModes;
use crate::{Error, Result, C64};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RamanConfig {
    /// Couplings of the two beams, rad/s. Plane-wave phases are absorbed.
    pub g1: C64,
    pub g2: C64,
    /// Single-photon detunings, rad/s.
    pub delta1: f64,
    pub delta2: f64,
    /// Decay rates of `|2⟩` into `|1⟩` and `|3⟩`, rad/s.
    pub gamma1: f64,
    pub gamma2: f64,
    /// Magnitude of the difference wavevector, 1/m.
    pub k_sigma: f64,
}

impl RamanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta1 == 0.0 || self.delta2 == 0.0 || !self.delta1.is_finite() || !self.delta2.is_finite() {
            return Err(Error::InvalidInput("Raman detunings must be finite and nonzero".into()));
        }
        if self.gamma1 < 0.0 || self.gamma2 < 0.0 {
            return Err(Error::InvalidInput("decay rates must be non-negative".into()));
        }
        let small = [self.g1.norm(), self.g2.norm(), self.gamma1, self.gamma2].into_iter().fold(0.0, f64::max);
        let large = self.delta1.abs().min(self.delta2.abs());
        if small > 0.0 && large / small < 100.0 {
            log::warn!(
                "Raman detuning is only {:.1} times the largest coupling or decay rate; adiabatic elimination is marginal",
                large / small
            );
        }
        Ok(())
    }

    /// Solves for the single-photon detunings that realize average detuning
    /// `delta` and two-photon detuning `delta_r`, keeping the other fields.
    pub fn with_detunings(self, delta: f64, delta_r: f64) -> Result<Self> {
        let (a1, a2) = (self.g1.norm_sqr() / 4.0, self.g2.norm_sqr() / 4.0);
        let f = |d: f64| d + a1 / (delta + d / 2.0) - a2 / (delta - d / 2.0) - delta_r;
        let df = |d: f64| 1.0 - 0.5 * a1 / (delta + d / 2.0).powi(2) - 0.5 * a2 / (delta - d / 2.0).powi(2);
        let mut d = delta_r;
        for _ in 0..50 {
            let step = f(d) / df(d);
            d -= step;
            if step.abs() <= 1e-15 * (d.abs() + delta.abs()) {
                break;
            }
        }
        if !(f(d).abs() <= 1e-9 * (delta_r.abs() + 1.0)) {
            return Err(Error::InvalidInput(format!(
                "cannot realize two-photon detuning {delta_r:e} at average detuning {delta:e}"
            )));
        }
        let cfg = Self { delta1: delta + d / 2.0, delta2: delta - d / 2.0, ..self };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveSpinParams {
    pub delta_r: f64,
    pub omega_r: C64,
    pub delta: f64,
    pub gamma_31: f64,
    pub gamma_13: f64,
    pub gamma_d: f64,
    /// Cross terms, diagnostic only.
    pub gamma_1x: C64,
    pub gamma_3x: C64,
}

impl EffectiveSpinParams {
    /// JSON object with every quantity in rad/s and in Hz.
    pub fn to_json(&self) -> serde_json::Value {
        let tp = crate::consts::TWO_PI;
        let render = |s: f64| {
            json!({
                "delta_r": self.delta_r / s,
                "omega_r": [self.omega_r.re / s, self.omega_r.im / s],
                "delta": self.delta / s,
                "gamma_31": self.gamma_31 / s,
                "gamma_13": self.gamma_13 / s,
                "gamma_d": self.gamma_d / s,
                "gamma_1x": [self.gamma_1x.re / s, self.gamma_1x.im / s],
                "gamma_3x": [self.gamma_3x.re / s, self.gamma_3x.im / s],
            })
        };
        json!({ "rad_per_s": render(1.0), "hz": render(tp) })
    }

    /// |Ω_R| / |δ_R|; should be small for sideband-resolved driving.
    pub fn sideband_ratio(&self, omega_mode: f64) -> f64 {
        self.omega_r.norm() / omega_mode.abs()
    }
}

pub fn effective_params(cfg: &RamanConfig) -> Result<EffectiveSpinParams> {
    cfg.validate()?;
    let (d1, d2) = (cfg.delta1, cfg.delta2);
    let delta = 0.5 * (d1 + d2);
    if delta == 0.0 {
        return Err(Error::InvalidInput("average Raman detuning vanishes".into()));
    }
    let (n1, n2) = (cfg.g1.norm_sqr(), cfg.g2.norm_sqr());
    let d2sq4 = 4.0 * delta * delta;
    let cross = cfg.g1 * cfg.g2.conj() / d2sq4;
    Ok(EffectiveSpinParams {
        delta_r: (d1 + n1 / (4.0 * d1)) - (d2 + n2 / (4.0 * d2)),
        omega_r: cfg.g1 * cfg.g2.conj() / 4.0 * (1.0 / d1 + 1.0 / d2),
        delta,
        gamma_31: cfg.gamma1 * n2 / d2sq4,
        gamma_13: cfg.gamma2 * n1 / d2sq4,
        gamma_d: cfg.gamma1 * n1 / d2sq4 + cfg.gamma2 * n2 / d2sq4,
        gamma_1x: cross * cfg.gamma1,
        gamma_3x: cross * cfg.gamma2,
    })
}

/// Basis order used by [`sw_reduce`]: slow operators first, then fast ones (0-based `A` indices).
pub const SLOW_FAST_ORDER: [usize; 9] = [0, 2, 4, 6, 8, 1, 3, 5, 7];

fn unit(i: usize, j: usize) -> Matrix3<C64> {
    let mut m = Matrix3::zeros();
    m[(i, j)] = C64::new(1.0, 0.0);
    m
}

/// Full Liouvillian as a 9x9 matrix in the `A1..A9` basis; column k holds `L(A_k)`.
pub fn three_level_liouvillian(cfg: &RamanConfig) -> DMatrix<C64> {
    let i = C64::i();
    let mut h = Matrix3::zeros();
    h[(0, 0)] = C64::from(cfg.delta1);
    h[(2, 2)] = C64::from(cfg.delta2);
    h[(1, 0)] = cfg.g1 / 2.0;
    h[(0, 1)] = cfg.g1.conj() / 2.0;
    h[(1, 2)] = cfg.g2 / 2.0;
    h[(2, 1)] = cfg.g2.conj() / 2.0;
    let jumps = [(cfg.gamma1, unit(0, 1)), (cfg.gamma2, unit(2, 1))];
    let apply = |rho: &Matrix3<C64>| -> Matrix3<C64> {
        let mut out = (h * rho - rho * h) * (-i);
        for (g, o) in &jumps {
            let od = o.adjoint();
            let odo = od * o;
            out += (o * rho * od * C64::from(2.0) - odo * rho - rho * odo) * C64::from(g / 2.0);
        }
        out
    };
    let mut l = DMatrix::zeros(9, 9);
    for k in 0..9 {
        let img = apply(&unit(k / 3, k % 3));
        for r in 0..9 {
            l[(r, k)] = img[(r / 3, r % 3)];
        }
    }
    l
}

/// Eigenvalues of the unperturbed Liouvillian in the `A1..A9` basis.
pub fn zeroth_order_eigenvalues(cfg: &RamanConfig) -> [C64; 9] {
    let z = C64::new(0.0, 0.0);
    let i = C64::i();
    [z, -i * cfg.delta1, z, i * cfg.delta1, z, i * cfg.delta2, z, -i * cfg.delta2, z]
}

/// Perturbation `V = L - L0` in slow-first order.
pub fn perturbation(cfg: &RamanConfig) -> DMatrix<C64> {
    let l = three_level_liouvillian(cfg);
    let l0 = zeroth_order_eigenvalues(cfg);
    DMatrix::from_fn(9, 9, |r, c| {
        let (a, b) = (SLOW_FAST_ORDER[r], SLOW_FAST_ORDER[c]);
        l[(a, b)] - if a == b { l0[a] } else { C64::new(0.0, 0.0) }
    })
}

/// Effective Liouvillian on the slow operators `{A1, A3, A5, A7, A9}` to third order.
pub fn sw_reduce(cfg: &RamanConfig) -> Result<DMatrix<C64>> {
    cfg.validate()?;
    let v = perturbation(cfg);
    let l0 = zeroth_order_eigenvalues(cfg);
    let mut inv = DMatrix::<C64>::zeros(4, 4);
    for q in 0..4 {
        let lam = l0[SLOW_FAST_ORDER[5 + q]];
        if lam.norm() == 0.0 {
            return Err(Error::SingularMode { mode: SLOW_FAST_ORDER[5 + q] });
        }
        inv[(q, q)] = lam.inv();
    }
    let vp = v.view((0, 0), (5, 5)).into_owned();
    let vm = v.view((0, 5), (5, 4)).into_owned();
    let vplus = v.view((5, 0), (4, 5)).into_owned();
    let vq = v.view((5, 5), (4, 4)).into_owned();
    let second = &vm * &inv * &vplus;
    let third_a = &vm * &inv * &vq * &inv * &vplus;
    let x = &vm * &inv * &inv * &vplus;
    let anti = &vp * &x + &x * &vp;
    Ok(vp - second + third_a - anti * C64::from(0.5))
}

/// Closed-form effective Liouvillian in the slow basis, written from the
/// effective parameters with `Γ11 = Γ1|g1|²/4Δ²` and `Γ33 = Γ2|g2|²/4Δ²`.
pub fn closed_form_liouvillian(cfg: &RamanConfig) -> Result<DMatrix<C64>> {
    let p = effective_params(cfg)?;
    let i = C64::i();
    let d2 = 4.0 * p.delta * p.delta;
    let g11 = cfg.gamma1 * cfg.g1.norm_sqr() / d2;
    let g33 = cfg.gamma2 * cfg.g2.norm_sqr() / d2;
    let (g13, g31) = (p.gamma_13, p.gamma_31);
    let om = p.omega_r;
    let (x1, x3) = (p.gamma_1x, p.gamma_3x);
    let c = |v: f64| C64::from(v);
    let coh = c(-(g13 + g31 + g11 + g33) / 2.0);
    let z = c(0.0);
    let rows = [
        [c(-g13), i * om / 2.0 + (x1 - x3) / 2.0, c(cfg.gamma1 - 2.0 * g11 - g31), -i * om.conj() / 2.0 + (x1.conj() - x3.conj()) / 2.0, c(g31)],
        [
            i * om.conj() / 2.0 - (x1.conj() + x3.conj()) / 2.0,
            -i * p.delta_r + coh,
            -(x1.conj() + x3.conj()) / 2.0,
            z,
            -i * om.conj() / 2.0 - (x1.conj() + x3.conj()) / 2.0,
        ],
        [z, z, c(-(cfg.gamma1 + cfg.gamma2) + 2.0 * g11 + g13 + g31 + 2.0 * g33), z, z],
        [-i * om / 2.0 - (x1 + x3) / 2.0, z, -(x1 + x3) / 2.0, i * p.delta_r + coh, i * om / 2.0 - (x1 + x3) / 2.0],
        [c(g13), -i * om / 2.0 - (x1 - x3) / 2.0, c(cfg.gamma2 - g13 - 2.0 * g33), i * om.conj() / 2.0 - (x1.conj() - x3.conj()) / 2.0, c(-g31)],
    ];
    Ok(DMatrix::from_fn(5, 5, |r, k| rows[r][k]))
}

/// Largest entrywise `|a - b| / max(|b|, floor)`.
pub fn relative_residual(a: &DMatrix<C64>, b: &DMatrix<C64>, floor: f64) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm() / y.norm().max(floor)).fold(0.0, f64::max)
}

/// Spin-phonon couplings `F_ln = i Ω_R η_n M_ln / 2`, rows over spin ions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpinPhononCoupling {
    pub f: DMatrix<C64>,
}

impl SpinPhononCoupling {
    pub fn n_spins(&self) -> usize {
        self.f.nrows()
    }

    pub fn n_modes(&self) -> usize {
        self.f.ncols()
    }
}

pub fn spin_phonon_couplings(
    params: &EffectiveSpinParams,
    modes: &NormalModes,
    sigma_indices: &[usize],
    eta_sigma: &[f64],
) -> Result<SpinPhononCoupling> {
    if eta_sigma.len() != modes.len() {
        return Err(Error::Dimension(format!(
            "{} Lamb-Dicke factors for {} modes",
            eta_sigma.len(),
            modes.len()
        )));
    }
    if let Some(bad) = sigma_indices.iter().find(|&&l| l >= modes.matrix.nrows()) {
        return Err(Error::InvalidInput(format!("spin index {bad} out of range")));
    }
    let pref = C64::i() * params.omega_r / 2.0;
    let f = DMatrix::from_fn(sigma_indices.len(), modes.len(), |l, n| {
        pref * (eta_sigma[n] * modes.matrix[(sigma_indices[l], n)])
    });
    Ok(SpinPhononCoupling { f })
}
