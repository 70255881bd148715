//! c-number Langevin trajectories for the spin-spin master equation.
//!
//! Each spin carries three real c-numbers `(x, y, z)` standing for
//! `(σˣ, σʸ, σᶻ)`. The drift is the quantum Langevin drift with operator
//! products of distinct spins replaced by c-number products. With
//! `g = Γ⁻ − Γ⁺`, the rates `γ⊥ = Γ⁻_ii + Γ⁺_ii + (Γ31 + Γ13 + w + Γd)/2`
//! and `γ∥ = 2(Γ⁻_ii + Γ⁺_ii) + Γ31 + Γ13 + w`, it reads
//!
//! ```text
//! dx_i = -γ⊥ x_i - B_i y_i + z_i Σ_j g_ij x_j + z_i Σ_j J_ij y_j
//! dy_i = -γ⊥ y_i + B_i x_i + z_i Σ_j g_ij y_j - z_i Σ_j J_ij x_j
//! dz_i = -γ∥ z_i + Γ13 + w - 2 g_ii - Γ31
//!        - Σ_j g_ij (x_i x_j + y_i y_j) - Σ_j J_ij (x_i y_j - y_i x_j)
//! ```
//!
//! (sums over `j ≠ i`). Noise has covariance `2𝒟 dt`, where `2𝒟` follows from the
//! generalized Einstein relation with symmetric ordering.
//!
//! # Noise factorization
//!
//! With `G = 2(Γ⁻ + Γ⁺)`, the inter-spin blocks of `2𝒟` are
//! `G_ij (a_i a_jᵀ + c_i c_jᵀ)`, where `a_i = (z_i, 0, -x_i)` and
//! `c_i = (0, z_i, -y_i)`. Writing `G = U diag(g) Uᵀ` once per run gives a
//! collective factor with `2 rank(G)` scalar noises. The remaining per-spin
//! 3x3 block has the form `[[P, 0, βx], [0, P, βy], [βx, βy, Q]]`. It splits
//! into an in-plane direction perpendicular to `(x, y)` and a 2x2 block, so its
//! square root is closed form. Negative eigenvalues of these local blocks are
//! clamped to zero and recorded. [`NoiseFactorization::Dense`] instead
//! factorizes the full `3N x 3N` matrix with [`noise_transform`].

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::spinspin::SpinSpinModel;
use crate::{Error, Result};

/// Trajectories reduced together before merging, fixed so results do not
/// depend on the worker count.
const BLOCK: usize = 32;
/// Magnitude above which a c-number trajectory counts as diverged.
const DIVERGENCE_BOUND: f64 = 1e3;

/// Flattened `(x, y, z)` triples, one per spin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpinState {
    pub s: Vec<f64>,
}

impl SpinState {
    pub fn n_spins(&self) -> usize {
        self.s.len() / 3
    }

    pub fn spin(&self, i: usize) -> [f64; 3] {
        [self.s[3 * i], self.s[3 * i + 1], self.s[3 * i + 2]]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[default]
    Euler,
    /// Explicit order-2.0 weak scheme of Platen type for non-commutative noise.
    Weak2,
}

/// Spin counts up to this use the full-matrix factorization under [`NoiseFactorization::Auto`].
pub const DENSE_NOISE_MAX: usize = 6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFactorization {
    Structured,
    Dense,
    /// Dense up to [`DENSE_NOISE_MAX`] spins, structured above.
    #[default]
    Auto,
}

impl NoiseFactorization {
    pub fn resolve(self, n: usize) -> Self {
        match self {
            NoiseFactorization::Auto if n <= DENSE_NOISE_MAX => NoiseFactorization::Dense,
            NoiseFactorization::Auto => NoiseFactorization::Structured,
            other => other,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    /// Transverse components drawn from {-1, +1}.
    #[default]
    Discrete,
    /// Transverse components drawn from N(0, 1).
    Gaussian,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialState {
    /// All spins down: `z = -1`.
    #[default]
    Ground,
    /// Ground followed by a π/2 rotation about x: `(x, y, -1) -> (x, 1, y)`.
    Equator,
}

/// Draws one spin configuration.
pub fn sample_initial<R: Rng>(kind: InitialState, n: usize, sampling: Sampling, rng: &mut R) -> SpinState {
    let mut s = vec![0.0; 3 * n];
    for i in 0..n {
        let (x, y) = match sampling {
            Sampling::Discrete => (pm1(rng), pm1(rng)),
            Sampling::Gaussian => (rng.sample(StandardNormal), rng.sample(StandardNormal)),
        };
        let ground = [x, y, -1.0];
        let v = match kind {
            InitialState::Ground => ground,
            InitialState::Equator => [x, 1.0, y],
        };
        s[3 * i..3 * i + 3].copy_from_slice(&v);
    }
    SpinState { s }
}

fn pm1<R: Rng>(rng: &mut R) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// Rotation by `theta` about x: `(x, y cos θ - z sin θ, y sin θ + z cos θ)`.
pub fn rotate_x(v: [f64; 3], theta: f64) -> [f64; 3] {
    let (s, c) = theta.sin_cos();
    [v[0], v[1] * c - v[2] * s, v[1] * s + v[2] * c]
}

/// Real coefficients of the Langevin equations, precomputed from a model.
#[derive(Clone, Debug)]
pub struct LangevinModel {
    pub n: usize,
    b: Vec<f64>,
    /// Γ⁻ − Γ⁺ with zero diagonal.
    g_net: DMatrix<f64>,
    /// J with zero diagonal.
    j: DMatrix<f64>,
    gamma_perp: Vec<f64>,
    gamma_par: Vec<f64>,
    z_source: Vec<f64>,
    /// 2(Γ⁻ + Γ⁺), full.
    g_sum: DMatrix<f64>,
    /// Local diffusion pieces: xx = yy, zz constant, and the xz/yz coefficient.
    d_xx: Vec<f64>,
    d_zz0: Vec<f64>,
    alpha: Vec<f64>,
    /// Eigen-factor of `g_sum`: columns `U_k sqrt(g_k)` for the retained modes.
    collective: DMatrix<f64>,
    max_rate: f64,
}

impl LangevinModel {
    pub fn new(model: &SpinSpinModel) -> Result<Self> {
        let n = model.n_spins();
        if n == 0 {
            return Err(Error::Dimension("model has no spins".into()));
        }
        let scale = model.gamma_minus.camax().max(model.gamma_plus.camax()).max(model.j.camax()).max(f64::MIN_POSITIVE);
        if model.max_imag() > 1e-9 * scale {
            return Err(Error::InvalidInput(format!(
                "c-number equations need real couplings; largest imaginary part {:e}",
                model.max_imag()
            )));
        }
        let gm = model.gamma_minus.map(|z| z.re);
        let gp = model.gamma_plus.map(|z| z.re);
        let mut g_net = &gm - &gp;
        let mut j = model.j.map(|z| z.re);
        let g_sum = (&gm + &gp) * 2.0;
        let up = model.gamma_13 + model.w;
        let mut gamma_perp = vec![0.0; n];
        let mut gamma_par = vec![0.0; n];
        let mut z_source = vec![0.0; n];
        let mut d_xx = vec![0.0; n];
        let mut d_zz0 = vec![0.0; n];
        let mut alpha = vec![0.0; n];
        for i in 0..n {
            let (sum_ii, net_ii) = (gm[(i, i)] + gp[(i, i)], gm[(i, i)] - gp[(i, i)]);
            gamma_perp[i] = sum_ii + (model.gamma_31 + up + model.gamma_d) / 2.0;
            gamma_par[i] = 2.0 * sum_ii + model.gamma_31 + up;
            z_source[i] = up - 2.0 * net_ii - model.gamma_31;
            d_xx[i] = 2.0 * sum_ii + model.gamma_31 + up + model.gamma_d;
            d_zz0[i] = 2.0 * (up + model.gamma_31 + 2.0 * sum_ii);
            alpha[i] = model.gamma_31 + 2.0 * net_ii - up;
            g_net[(i, i)] = 0.0;
            j[(i, i)] = 0.0;
        }
        let eig = SymmetricEigen::new(g_sum.clone());
        let gmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let keep: Vec<usize> =
            (0..n).filter(|&k| eig.eigenvalues[k] > 1e-14 * gmax && eig.eigenvalues[k] > 0.0).collect();
        let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if min_eig < -1e-10 * gmax.max(f64::MIN_POSITIVE) {
            log::warn!("collective diffusion has a negative eigenvalue {min_eig:e}; it is dropped");
        }
        let mut collective = DMatrix::zeros(n, keep.len());
        for (c, &k) in keep.iter().enumerate() {
            let s = eig.eigenvalues[k].sqrt();
            for i in 0..n {
                collective[(i, c)] = eig.eigenvectors[(i, k)] * s;
            }
        }
        let row_abs = |m: &DMatrix<f64>| (0..n).map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
        let max_rate = [
            gamma_par.iter().cloned().fold(0.0, f64::max),
            gamma_perp.iter().cloned().fold(0.0, f64::max),
            model.b.iter().map(|b| b.abs()).fold(0.0, f64::max),
            row_abs(&g_net),
            row_abs(&j),
            d_zz0.iter().cloned().fold(0.0, f64::max),
        ]
        .into_iter()
        .fold(0.0, f64::max);
        Ok(Self {
            n,
            b: model.b.clone(),
            g_net,
            j,
            gamma_perp,
            gamma_par,
            z_source,
            g_sum,
            d_xx,
            d_zz0,
            alpha,
            collective,
            max_rate,
        })
    }

    /// Largest rate in the equations, used for step-size checks.
    pub fn max_rate(&self) -> f64 {
        self.max_rate
    }

    pub fn collective_rank(&self) -> usize {
        self.collective.ncols()
    }

    /// Number of scalar noises used by [`NoiseFactorization::Structured`].
    pub fn n_noise(&self) -> usize {
        2 * self.collective_rank() + 3 * self.n
    }

    fn split(&self, s: &[f64], x: &mut DVector<f64>, y: &mut DVector<f64>) {
        for i in 0..self.n {
            x[i] = s[3 * i];
            y[i] = s[3 * i + 1];
        }
    }

    /// Drift into `out`; `work` holds scratch vectors of length n.
    fn drift_into(&self, s: &[f64], out: &mut [f64], work: &mut Work) {
        let Work { x, y, gx, gy, jx, jy, .. } = work;
        self.split(s, x, y);
        gx.gemv(1.0, &self.g_net, x, 0.0);
        gy.gemv(1.0, &self.g_net, y, 0.0);
        jx.gemv(1.0, &self.j, x, 0.0);
        jy.gemv(1.0, &self.j, y, 0.0);
        for i in 0..self.n {
            let (xi, yi, zi) = (s[3 * i], s[3 * i + 1], s[3 * i + 2]);
            out[3 * i] = -self.gamma_perp[i] * xi - self.b[i] * yi + zi * (gx[i] + jy[i]);
            out[3 * i + 1] = -self.gamma_perp[i] * yi + self.b[i] * xi + zi * (gy[i] - jx[i]);
            out[3 * i + 2] = -self.gamma_par[i] * zi + self.z_source[i] - (xi * gx[i] + yi * gy[i]) - (xi * jy[i] - yi * jx[i]);
        }
    }

    pub fn drift(&self, state: &SpinState) -> Vec<f64> {
        let mut out = vec![0.0; state.s.len()];
        let mut work = Work::new(self.n, self.collective_rank());
        self.drift_into(&state.s, &mut out, &mut work);
        out
    }

    /// Full `2𝒟` at the given state.
    pub fn diffusion(&self, state: &SpinState) -> DMatrix<f64> {
        let n = self.n;
        let s = &state.s;
        let mut d = DMatrix::zeros(3 * n, 3 * n);
        for i in 0..n {
            let (xi, yi, zi) = (s[3 * i], s[3 * i + 1], s[3 * i + 2]);
            let o = 3 * i;
            d[(o, o)] = self.d_xx[i];
            d[(o + 1, o + 1)] = self.d_xx[i];
            d[(o + 2, o + 2)] = self.d_zz0[i] + 2.0 * self.alpha[i] * zi;
            d[(o, o + 2)] = self.alpha[i] * xi;
            d[(o + 2, o)] = self.alpha[i] * xi;
            d[(o + 1, o + 2)] = self.alpha[i] * yi;
            d[(o + 2, o + 1)] = self.alpha[i] * yi;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let g = self.g_sum[(i, j)];
                let (xj, yj, zj) = (s[3 * j], s[3 * j + 1], s[3 * j + 2]);
                let p = 3 * j;
                d[(o, p)] = g * (zi * zj);
                d[(o + 1, p + 1)] = g * (zi * zj);
                d[(o + 2, p + 2)] = g * (xi * xj + yi * yj);
                d[(o, p + 2)] = -g * (zi * xj);
                d[(o + 1, p + 2)] = -g * (zi * yj);
                d[(o + 2, p)] = -g * (zj * xi);
                d[(o + 2, p + 1)] = -g * (zj * yi);
            }
        }
        d
    }

    /// Local 3x3 square-root factor of spin `i` and its clamp ratio.
    fn local_factor(&self, i: usize, x: f64, y: f64, z: f64) -> ([[f64; 3]; 3], f64) {
        let g = self.g_sum[(i, i)];
        let p = self.d_xx[i] - g * z * z;
        let beta = self.alpha[i] + g * z;
        let r = x.hypot(y);
        let q = self.d_zz0[i] + 2.0 * self.alpha[i] * z - g * r * r;
        let (ex, ey) = if r > 0.0 { (x / r, y / r) } else { (1.0, 0.0) };
        let off = beta * r;
        let mean = 0.5 * (p + q);
        let rad = (0.25 * (p - q) * (p - q) + off * off).sqrt();
        let (l1, l2) = (mean + rad, mean - rad);
        // Eigenvector of the 2x2 block [[p, off], [off, q]] for l1.
        let (v1a, v1b) = if off.abs() > 0.0 {
            let (a, b) = (off, l1 - p);
            let nrm = a.hypot(b);
            (a / nrm, b / nrm)
        } else if p >= q {
            (1.0, 0.0)
        } else {
            (0.0, 1.0)
        };
        let (v2a, v2b) = (-v1b, v1a);
        let (s1, s2, sp) = (l1.max(0.0).sqrt(), l2.max(0.0).sqrt(), p.max(0.0).sqrt());
        // 2x2 square root in the (in-plane radial, z) basis.
        let m_aa = s1 * v1a * v1a + s2 * v2a * v2a;
        let m_ab = s1 * v1a * v1b + s2 * v2a * v2b;
        let m_bb = s1 * v1b * v1b + s2 * v2b * v2b;
        let (px, py) = (-ey, ex);
        let f = [
            [sp * px * px + m_aa * ex * ex, sp * px * py + m_aa * ex * ey, m_ab * ex],
            [sp * py * px + m_aa * ey * ex, sp * py * py + m_aa * ey * ey, m_ab * ey],
            [m_ab * ex, m_ab * ey, m_bb],
        ];
        let neg = (-l2).max(-p).max(0.0);
        let top = l1.abs().max(l2.abs()).max(p.abs());
        let ratio = if neg > 0.0 && top > 0.0 { neg / top } else { 0.0 };
        (f, ratio)
    }

    /// Structured noise `B(s) ξ` for `ξ` of length [`Self::n_noise`]; returns the worst clamp ratio.
    fn structured_noise(&self, s: &[f64], xi: &[f64], out: &mut [f64], work: &mut Work, clamps: &mut ClampStats) {
        let n = self.n;
        let r = self.collective_rank();
        let Work { cv, cw, xa, xb, .. } = work;
        for k in 0..r {
            xa[k] = xi[k];
            xb[k] = xi[r + k];
        }
        cv.gemv(1.0, &self.collective, xa, 0.0);
        cw.gemv(1.0, &self.collective, xb, 0.0);
        for i in 0..n {
            let (x, y, z) = (s[3 * i], s[3 * i + 1], s[3 * i + 2]);
            let (f, ratio) = self.local_factor(i, x, y, z);
            clamps.record(ratio);
            let e = &xi[2 * r + 3 * i..2 * r + 3 * i + 3];
            let loc = [
                f[0][0] * e[0] + f[0][1] * e[1] + f[0][2] * e[2],
                f[1][0] * e[0] + f[1][1] * e[1] + f[1][2] * e[2],
                f[2][0] * e[0] + f[2][1] * e[1] + f[2][2] * e[2],
            ];
            out[3 * i] = z * cv[i] + loc[0];
            out[3 * i + 1] = z * cw[i] + loc[1];
            out[3 * i + 2] = -x * cv[i] - y * cw[i] + loc[2];
        }
    }

    /// Explicit structured noise matrix `B(s)` (3N x n_noise); `B Bᵀ = 2𝒟` when no clamp occurs.
    pub fn structured_noise_matrix(&self, state: &SpinState) -> DMatrix<f64> {
        let mut clamps = ClampStats::default();
        self.structured_matrix_into(&state.s, &mut clamps)
    }

    fn structured_matrix_into(&self, s: &[f64], clamps: &mut ClampStats) -> DMatrix<f64> {
        let n = self.n;
        let r = self.collective_rank();
        let mut b = DMatrix::zeros(3 * n, 2 * r + 3 * n);
        for i in 0..n {
            let (x, y, z) = (s[3 * i], s[3 * i + 1], s[3 * i + 2]);
            for k in 0..r {
                let u = self.collective[(i, k)];
                b[(3 * i, k)] = z * u;
                b[(3 * i + 2, k)] = -x * u;
                b[(3 * i + 1, r + k)] = z * u;
                b[(3 * i + 2, r + k)] = -y * u;
            }
            let (f, ratio) = self.local_factor(i, x, y, z);
            clamps.record(ratio);
            for a in 0..3 {
                for c in 0..3 {
                    b[(3 * i + a, 2 * r + 3 * i + c)] = f[a][c];
                }
            }
        }
        b
    }

    fn noise_matrix(&self, s: &[f64], kind: NoiseFactorization, clamps: &mut ClampStats) -> Result<DMatrix<f64>> {
        match kind.resolve(self.n) {
            NoiseFactorization::Structured | NoiseFactorization::Auto => Ok(self.structured_matrix_into(s, clamps)),
            NoiseFactorization::Dense => {
                let (b, ratio) = noise_transform(&self.diffusion(&SpinState { s: s.to_vec() }))?;
                clamps.record(ratio);
                Ok(b)
            }
        }
    }
}

/// Symmetric square root of a diffusion matrix with negative eigenvalues clamped.
///
/// Returns `B = V sqrt(max(Λ, 0)) Vᵀ` and `max|λ_neg| / max|λ|`.
pub fn noise_transform(d: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    if d.nrows() != d.ncols() {
        return Err(Error::Dimension(format!("diffusion matrix is {}x{}", d.nrows(), d.ncols())));
    }
    let scale = d.amax().max(f64::MIN_POSITIVE);
    let asym = (d - d.transpose()).amax();
    if asym > 1e-12 * scale {
        return Err(Error::NotSymmetric(asym));
    }
    let eig = SymmetricEigen::new(d.clone());
    let top = eig.eigenvalues.amax();
    let neg = eig.eigenvalues.iter().cloned().fold(0.0, |m: f64, v| m.max(-v));
    let ratio = if top > 0.0 { neg / top } else { 0.0 };
    if neg > 0.0 {
        log::trace!("clamped negative diffusion eigenvalue, ratio {ratio:e}");
    }
    let sq = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let b = &eig.eigenvectors * DMatrix::from_diagonal(&sq) * eig.eigenvectors.transpose();
    Ok((b, ratio))
}

struct Work {
    x: DVector<f64>,
    y: DVector<f64>,
    gx: DVector<f64>,
    gy: DVector<f64>,
    jx: DVector<f64>,
    jy: DVector<f64>,
    cv: DVector<f64>,
    cw: DVector<f64>,
    xa: DVector<f64>,
    xb: DVector<f64>,
}

impl Work {
    fn new(n: usize, r: usize) -> Self {
        let z = || DVector::zeros(n);
        Self { x: z(), y: z(), gx: z(), gy: z(), jx: z(), jy: z(), cv: z(), cw: z(), xa: DVector::zeros(r), xb: DVector::zeros(r) }
    }
}

/// Counts of local factorizations and how often negative eigenvalues were clamped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClampStats {
    pub factorizations: u64,
    pub clamped: u64,
    pub max_ratio: f64,
    /// Histogram of log10(ratio) for clamped events, bins of 0.1 from -16 to 0.
    hist: Vec<u64>,
}

const HIST_BINS: usize = 161;

impl ClampStats {
    fn record(&mut self, ratio: f64) {
        self.factorizations += 1;
        if ratio > 0.0 {
            if self.hist.is_empty() {
                self.hist = vec![0; HIST_BINS];
            }
            self.clamped += 1;
            self.max_ratio = self.max_ratio.max(ratio);
            let bin = ((ratio.log10() + 16.0) * 10.0).floor().clamp(0.0, (HIST_BINS - 1) as f64) as usize;
            self.hist[bin] += 1;
        }
    }

    fn merge(&mut self, other: &ClampStats) {
        self.factorizations += other.factorizations;
        self.clamped += other.clamped;
        self.max_ratio = self.max_ratio.max(other.max_ratio);
        if !other.hist.is_empty() {
            if self.hist.is_empty() {
                self.hist = vec![0; HIST_BINS];
            }
            for (a, b) in self.hist.iter_mut().zip(&other.hist) {
                *a += b;
            }
        }
    }

    pub fn clamped_fraction(&self) -> f64 {
        if self.factorizations == 0 {
            0.0
        } else {
            self.clamped as f64 / self.factorizations as f64
        }
    }

    /// Median clamp ratio over all factorizations (unclamped ones count as zero),
    /// resolved to the histogram bin's upper edge.
    pub fn median_ratio(&self) -> f64 {
        let half = self.factorizations.div_ceil(2);
        let unclamped = self.factorizations - self.clamped;
        if unclamped >= half {
            return 0.0;
        }
        let mut acc = unclamped;
        for (b, c) in self.hist.iter().enumerate() {
            acc += c;
            if acc >= half {
                return 10f64.powf((b as f64 + 1.0) / 10.0 - 16.0);
            }
        }
        self.max_ratio
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IntegrateOptions {
    /// s
    pub dt: f64,
    /// s
    pub t_final: f64,
    /// Record observables every this many steps.
    pub sample_every: usize,
    pub scheme: Scheme,
    pub noise: NoiseFactorization,
    pub sampling: Sampling,
    pub initial: InitialState,
    pub n_traj: usize,
    pub seed: u64,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
    /// Keep every recorded state of every trajectory.
    pub keep_raw: bool,
    /// Also average each trajectory over recorded samples with `t >= average_from`.
    pub average_from: Option<f64>,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            t_final: 1.0,
            sample_every: 10,
            scheme: Scheme::Euler,
            noise: NoiseFactorization::Auto,
            sampling: Sampling::Discrete,
            initial: InitialState::Ground,
            n_traj: 1000,
            seed: 1,
            threads: None,
            keep_raw: false,
            average_from: None,
        }
    }
}

/// Per-trajectory observables tracked over time.
pub const OBSERVABLES: [&str; 6] = ["sz", "sp_re", "sp_im", "pm", "pp_re", "pp_im"];

fn observables(s: &[f64]) -> [f64; 6] {
    let n = s.len() / 3;
    let (mut sx, mut sy, mut sz, mut sq_abs, mut sq_re, mut sq_im) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let (a, b) = (0.5 * s[3 * i], 0.5 * s[3 * i + 1]);
        sx += a;
        sy += b;
        sz += s[3 * i + 2];
        sq_abs += a * a + b * b;
        sq_re += a * a - b * b;
        sq_im += 2.0 * a * b;
    }
    let nf = n as f64;
    let pairs = (nf * (nf - 1.0)).max(1.0);
    let (pm, pp_re, pp_im) = if n > 1 {
        ((sx * sx + sy * sy - sq_abs) / pairs, (sx * sx - sy * sy - sq_re) / pairs, (2.0 * sx * sy - sq_im) / pairs)
    } else {
        (0.0, 0.0, 0.0)
    };
    [sz / nf, sx / nf, sy / nf, pm, pp_re, pp_im]
}

/// Ensemble-averaged observables with standard errors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryEnsemble {
    pub n_spins: usize,
    pub n_traj: usize,
    /// Trajectories that diverged and are excluded from averages.
    pub aborted: usize,
    pub seed: u64,
    pub dt: f64,
    pub scheme: Scheme,
    pub times: Vec<f64>,
    /// `mean[k][t]` for observable `OBSERVABLES[k]`.
    pub mean: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
    pub clamps: ClampStats,
    /// Per-trajectory time averages over `t >= average_from`, then averaged over trajectories.
    pub steady: Option<SteadyAverages>,
    /// Raw states `[traj][time][3N]`, if requested.
    #[serde(skip)]
    pub raw: Option<Vec<f64>>,
}

impl TrajectoryEnsemble {
    pub fn n_used(&self) -> usize {
        self.n_traj - self.aborted
    }

    fn index(name: &str) -> usize {
        OBSERVABLES.iter().position(|o| *o == name).expect("known observable")
    }

    pub fn series(&self, name: &str) -> (&[f64], &[f64]) {
        let k = Self::index(name);
        (&self.mean[k], &self.stderr[k])
    }

    /// |⟨σ⁺⟩_E|(t) and a standard error from the two quadratures.
    pub fn envelope(&self) -> (Vec<f64>, Vec<f64>) {
        let (re, re_se) = self.series("sp_re");
        let (im, im_se) = self.series("sp_im");
        let env = re.iter().zip(im).map(|(a, b)| a.hypot(*b)).collect();
        let se = re_se.iter().zip(im_se).map(|(a, b)| a.hypot(*b)).collect();
        (env, se)
    }

    /// Time average of an observable over samples with `t >= t_from`, with a
    /// standard error that treats per-time errors as fully correlated.
    pub fn late_average(&self, name: &str, t_from: f64) -> (f64, f64) {
        let (m, se) = self.series(name);
        let idx: Vec<usize> = (0..self.times.len()).filter(|&i| self.times[i] >= t_from).collect();
        let k = idx.len().max(1) as f64;
        (idx.iter().map(|&i| m[i]).sum::<f64>() / k, idx.iter().map(|&i| se[i]).sum::<f64>() / k)
    }

    /// CSV with columns `time` then `<obs>,<obs>_se` for every observable.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "time")?;
        for o in OBSERVABLES {
            write!(out, ",{o},{o}_se")?;
        }
        writeln!(out)?;
        for (t, time) in self.times.iter().enumerate() {
            write!(out, "{time:.12e}")?;
            for k in 0..OBSERVABLES.len() {
                write!(out, ",{:.12e},{:.12e}", self.mean[k][t], self.stderr[k][t])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// Raw dump: little-endian records of `u64` trajectory index, `u64` time
    /// index, then `3N` `f64` values. Aborted trajectories are skipped.
    pub fn write_raw<W: Write>(&self, mut out: W) -> Result<()> {
        let raw = self.raw.as_ref().ok_or_else(|| Error::InvalidInput("raw trajectories were not kept".into()))?;
        let width = 3 * self.n_spins;
        let per_traj = width * self.times.len();
        for (traj, chunk) in raw.chunks(per_traj).enumerate() {
            if chunk.iter().any(|v| v.is_nan()) {
                continue;
            }
            for (t, rec) in chunk.chunks(width).enumerate() {
                out.write_all(&(traj as u64).to_le_bytes())?;
                out.write_all(&(t as u64).to_le_bytes())?;
                for v in rec {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }
}

/// Time-then-ensemble averages; the standard error comes from the spread of
/// per-trajectory time averages.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SteadyAverages {
    pub from: f64,
    pub n_samples: usize,
    pub mean: [f64; 6],
    pub stderr: [f64; 6],
}

impl SteadyAverages {
    pub fn get(&self, name: &str) -> (f64, f64) {
        let k = TrajectoryEnsemble::index(name);
        (self.mean[k], self.stderr[k])
    }
}

#[derive(Clone, Default)]
struct Accumulator {
    used: usize,
    aborted: usize,
    sum: Vec<Vec<f64>>,
    sum_sq: Vec<Vec<f64>>,
    steady_sum: [f64; 6],
    steady_sum_sq: [f64; 6],
    clamps: ClampStats,
    raw: Vec<f64>,
}

impl Accumulator {
    fn new(n_samples: usize) -> Self {
        Self {
            sum: vec![vec![0.0; n_samples]; OBSERVABLES.len()],
            sum_sq: vec![vec![0.0; n_samples]; OBSERVABLES.len()],
            ..Default::default()
        }
    }

    fn merge(&mut self, other: Accumulator) {
        self.used += other.used;
        self.aborted += other.aborted;
        for k in 0..self.sum.len() {
            for t in 0..self.sum[k].len() {
                self.sum[k][t] += other.sum[k][t];
                self.sum_sq[k][t] += other.sum_sq[k][t];
            }
        }
        for k in 0..6 {
            self.steady_sum[k] += other.steady_sum[k];
            self.steady_sum_sq[k] += other.steady_sum_sq[k];
        }
        self.clamps.merge(&other.clamps);
        self.raw.extend(other.raw);
    }
}

struct TrajectoryOutcome {
    samples: Vec<[f64; 6]>,
    diverged: bool,
    raw: Vec<f64>,
}

struct Stepper<'a> {
    model: &'a LangevinModel,
    opts: &'a IntegrateOptions,
    work: Work,
    f0: Vec<f64>,
    f1: Vec<f64>,
    noise: Vec<f64>,
    xi: Vec<f64>,
    tmp: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(model: &'a LangevinModel, opts: &'a IntegrateOptions) -> Self {
        let d = 3 * model.n;
        let m = match opts.noise {
            NoiseFactorization::Dense => d,
            _ => model.n_noise(),
        };
        Self {
            model,
            opts,
            work: Work::new(model.n, model.collective_rank()),
            f0: vec![0.0; d],
            f1: vec![0.0; d],
            noise: vec![0.0; d],
            xi: vec![0.0; m],
            tmp: vec![0.0; d],
        }
    }

    fn euler(&mut self, s: &mut [f64], rng: &mut ChaCha8Rng, clamps: &mut ClampStats) -> Result<()> {
        let dt = self.opts.dt;
        let sq = dt.sqrt();
        self.model.drift_into(s, &mut self.f0, &mut self.work);
        for v in self.xi.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal) * sq;
        }
        match self.opts.noise {
            NoiseFactorization::Structured | NoiseFactorization::Auto => {
                self.model.structured_noise(s, &self.xi, &mut self.noise, &mut self.work, clamps);
            }
            NoiseFactorization::Dense => {
                let b = self.model.noise_matrix(s, NoiseFactorization::Dense, clamps)?;
                let v = b * DVector::from_column_slice(&self.xi);
                self.noise.copy_from_slice(v.as_slice());
            }
        }
        for k in 0..s.len() {
            s[k] += self.f0[k] * dt + self.noise[k];
        }
        Ok(())
    }

    /// Platen's explicit order-2.0 weak scheme for non-commutative noise.
    fn weak2(&mut self, s: &mut [f64], rng: &mut ChaCha8Rng, clamps: &mut ClampStats) -> Result<()> {
        let dt = self.opts.dt;
        let sq = dt.sqrt();
        let d = s.len();
        let kind = self.opts.noise;
        let b0 = self.model.noise_matrix(s, kind, clamps)?;
        let m = b0.ncols();
        let dw: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal) * sq).collect();
        // V_jr for r < j are ±dt, V_rj = -V_jr, V_jj = -dt.
        let mut vmat = vec![0.0; m * m];
        for j in 0..m {
            vmat[j * m + j] = -dt;
            for r in 0..j {
                let v = if rng.random::<bool>() { dt } else { -dt };
                vmat[j * m + r] = v;
                vmat[r * m + j] = -v;
            }
        }
        self.model.drift_into(s, &mut self.f0, &mut self.work);
        let bdw = &b0 * DVector::from_column_slice(&dw);

        // Predictor for the drift average.
        for k in 0..d {
            self.tmp[k] = s[k] + self.f0[k] * dt + bdw[k];
        }
        let tmp = self.tmp.clone();
        self.model.drift_into(&tmp, &mut self.f1, &mut self.work);

        let mut inc = vec![0.0; d];
        for k in 0..d {
            inc[k] = 0.5 * (self.f1[k] + self.f0[k]) * dt;
        }
        let mut point = vec![0.0; d];
        for j in 0..m {
            let col = b0.column(j);
            let mut bj = [vec![0.0; d], vec![0.0; d]];
            for (sign, out) in [(1.0, 0usize), (-1.0, 1usize)] {
                for k in 0..d {
                    point[k] = s[k] + self.f0[k] * dt + sign * col[k] * sq;
                }
                let bp = self.model.noise_matrix(&point, kind, clamps)?;
                bj[out].copy_from_slice(bp.column(j).as_slice());
            }
            let w = dw[j];
            for k in 0..d {
                inc[k] += 0.25 * (bj[0][k] + bj[1][k] + 2.0 * col[k]) * w
                    + 0.25 * (bj[0][k] - bj[1][k]) * (w * w - dt) / sq;
            }
        }
        for r in 0..m {
            let col = b0.column(r);
            let mut bu = Vec::with_capacity(2);
            for sign in [1.0, -1.0] {
                for k in 0..d {
                    point[k] = s[k] + sign * col[k] * sq;
                }
                bu.push(self.model.noise_matrix(&point, kind, clamps)?);
            }
            for j in 0..m {
                if j == r {
                    continue;
                }
                let (cp, cm, c0) = (bu[0].column(j), bu[1].column(j), b0.column(j));
                let w = dw[j];
                let cross = (w * dw[r] + vmat[r * m + j]) / sq;
                for k in 0..d {
                    inc[k] += 0.25 * (cp[k] + cm[k] - 2.0 * c0[k]) * w + 0.25 * (cp[k] - cm[k]) * cross;
                }
            }
        }
        for k in 0..d {
            s[k] += inc[k];
        }
        Ok(())
    }
}

fn run_trajectory(model: &LangevinModel, opts: &IntegrateOptions, idx: usize, clamps: &mut ClampStats) -> Result<TrajectoryOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(idx as u64);
    let mut state = sample_initial(opts.initial, model.n, opts.sampling, &mut rng).s;
    let n_steps = (opts.t_final / opts.dt).round() as usize;
    let every = opts.sample_every.max(1);
    let mut samples = Vec::with_capacity(n_steps / every + 1);
    let mut raw = Vec::new();
    samples.push(observables(&state));
    if opts.keep_raw {
        raw.extend_from_slice(&state);
    }
    let mut stepper = Stepper::new(model, opts);
    for step in 1..=n_steps {
        match opts.scheme {
            Scheme::Euler => stepper.euler(&mut state, &mut rng, clamps)?,
            Scheme::Weak2 => stepper.weak2(&mut state, &mut rng, clamps)?,
        }
        if state.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND) {
            return Ok(TrajectoryOutcome { samples, diverged: true, raw });
        }
        if step % every == 0 {
            samples.push(observables(&state));
            if opts.keep_raw {
                raw.extend_from_slice(&state);
            }
        }
    }
    Ok(TrajectoryOutcome { samples, diverged: false, raw })
}

/// Integrates `n_traj` independent trajectories and averages the observables.
pub fn integrate(model: &SpinSpinModel, opts: &IntegrateOptions) -> Result<TrajectoryEnsemble> {
    let lm = LangevinModel::new(model)?;
    integrate_prepared(&lm, opts)
}

pub fn integrate_prepared(lm: &LangevinModel, opts: &IntegrateOptions) -> Result<TrajectoryEnsemble> {
    if !(opts.dt > 0.0 && opts.t_final >= 0.0) || opts.n_traj == 0 {
        return Err(Error::InvalidInput("need dt > 0, t_final >= 0 and at least one trajectory".into()));
    }
    if opts.dt * lm.max_rate() > 0.1 {
        log::warn!("dt = {:e} exceeds 0.1 / max rate ({:e})", opts.dt, 0.1 / lm.max_rate());
    }
    let n_steps = (opts.t_final / opts.dt).round() as usize;
    let every = opts.sample_every.max(1);
    let n_samples = n_steps / every + 1;
    let times: Vec<f64> = (0..n_samples).map(|k| (k * every) as f64 * opts.dt).collect();
    let n_blocks = opts.n_traj.div_ceil(BLOCK);
    let steady_start = opts.average_from.map_or(n_samples, |from| times.iter().position(|&t| t >= from).unwrap_or(n_samples));
    let opts = &IntegrateOptions { noise: opts.noise.resolve(lm.n), ..opts.clone() };

    let run_block = |b: usize| -> Result<Accumulator> {
        let mut acc = Accumulator::new(n_samples);
        for idx in b * BLOCK..((b + 1) * BLOCK).min(opts.n_traj) {
            let mut clamps = ClampStats::default();
            let out = run_trajectory(lm, opts, idx, &mut clamps)?;
            acc.clamps.merge(&clamps);
            if out.diverged {
                acc.aborted += 1;
                if opts.keep_raw {
                    acc.raw.extend(std::iter::repeat_n(f64::NAN, n_samples * 3 * lm.n));
                }
                continue;
            }
            acc.used += 1;
            let mut avg = [0.0; 6];
            for (t, obs) in out.samples.iter().enumerate() {
                for k in 0..OBSERVABLES.len() {
                    acc.sum[k][t] += obs[k];
                    acc.sum_sq[k][t] += obs[k] * obs[k];
                    if t >= steady_start {
                        avg[k] += obs[k];
                    }
                }
            }
            for k in 0..6 {
                let a = avg[k] / (n_samples - steady_start).max(1) as f64;
                acc.steady_sum[k] += a;
                acc.steady_sum_sq[k] += a * a;
            }
            acc.raw.extend(out.raw);
        }
        Ok(acc)
    };

    let blocks: Vec<Result<Accumulator>> = match opts.threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
            pool.install(|| (0..n_blocks).into_par_iter().map(run_block).collect())
        }
        None => (0..n_blocks).into_par_iter().map(run_block).collect(),
    };
    let mut total = Accumulator::new(n_samples);
    for b in blocks {
        total.merge(b?);
    }

    if total.aborted * 100 > opts.n_traj {
        return Err(Error::Divergence { aborted: total.aborted, total: opts.n_traj });
    }
    if total.aborted > 0 {
        log::warn!("{} of {} trajectories diverged and were dropped", total.aborted, opts.n_traj);
    }
    let used = total.used as f64;
    let mut mean = vec![vec![0.0; n_samples]; OBSERVABLES.len()];
    let mut stderr = vec![vec![0.0; n_samples]; OBSERVABLES.len()];
    for k in 0..OBSERVABLES.len() {
        for t in 0..n_samples {
            let m = total.sum[k][t] / used;
            let var = if used > 1.0 { ((total.sum_sq[k][t] - used * m * m) / (used - 1.0)).max(0.0) } else { 0.0 };
            mean[k][t] = m;
            stderr[k][t] = (var / used).sqrt();
        }
    }
    let steady = (steady_start < n_samples).then(|| {
        let mut m = [0.0; 6];
        let mut se = [0.0; 6];
        for k in 0..6 {
            m[k] = total.steady_sum[k] / used;
            let var = if used > 1.0 { ((total.steady_sum_sq[k] - used * m[k] * m[k]) / (used - 1.0)).max(0.0) } else { 0.0 };
            se[k] = (var / used).sqrt();
        }
        SteadyAverages { from: times[steady_start], n_samples: n_samples - steady_start, mean: m, stderr: se }
    });
    if total.clamps.clamped > 0 {
        log::info!(
            "noise clamps: {:.3}% of factorizations, max ratio {:e}",
            100.0 * total.clamps.clamped_fraction(),
            total.clamps.max_ratio
        );
    }
    Ok(TrajectoryEnsemble {
        n_spins: lm.n,
        n_traj: opts.n_traj,
        aborted: total.aborted,
        seed: opts.seed,
        dt: opts.dt,
        scheme: opts.scheme,
        times,
        mean,
        stderr,
        clamps: total.clamps,
        steady,
        raw: opts.keep_raw.then_some(total.raw),
    })
}
