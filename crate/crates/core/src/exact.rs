//! Exact master-equation solvers used as oracles.
//!
//! The dense solver works on the full `2^N x 2^N` density matrix of the spin
//! model. Basis index bit `i` set means spin `i` is in the upper level.
//!
//! The symmetric solver handles the permutation-invariant minimal model.
//! A symmetric density matrix is expanded as `ρ = Σ_n c(n) T(n)`, where
//! `n = (n1, n2, n3, n4)` counts spins in the single-spin operators
//! `E1 = |e⟩⟨e|`, `E2 = |e⟩⟨g|`, `E3 = |g⟩⟨e|`, `E4 = |g⟩⟨g|`. `T(n)` is the
//! average over all distinct site assignments with those counts, so
//! `Tr T(n) = 1` whenever `n2 = n3 = 0`. A single-site superoperator summed
//! over sites maps `T(n)` to `Σ_ab S_ba n_a T(n - e_a + e_b)`. A two-site
//! term `Σ_{l≠m} A_l B_m` maps it to
//! `Σ_abcd A_ba B_dc n_a (n_c - δ_ac) T(n - e_a - e_c + e_b + e_d)`.
//! All terms conserve `q = n2 - n3`, so each coherence order evolves on its own.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::spinspin::SpinSpinModel;
use crate::{Error, Result, C64};

/// Largest spin count accepted by [`build_dense`].
pub const DENSE_CAP: usize = 6;

const ZERO: C64 = C64::new(0.0, 0.0);

/// Observables of one density matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Observables {
    pub trace: C64,
    /// Mean ⟨σᶻ⟩ per spin.
    pub sz: f64,
    /// Mean ⟨σ⁺⟩ per spin.
    pub sp: C64,
    /// ⟨σ⁺_i σ⁻_j⟩ averaged over ordered pairs i ≠ j.
    pub pm: f64,
    /// ⟨σ⁺_i σ⁺_j⟩ averaged over ordered pairs i ≠ j.
    pub pp: C64,
}

/// Time series of exact observables.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ExactSeries {
    pub n_spins: usize,
    pub dt: f64,
    pub times: Vec<f64>,
    pub values: Vec<Observables>,
}

impl ExactSeries {
    pub fn envelope(&self) -> Vec<f64> {
        self.values.iter().map(|o| o.sp.norm()).collect()
    }

    /// Same columns as the Langevin CSV, with zero standard errors.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "time,sz,sz_se,sp_re,sp_re_se,sp_im,sp_im_se,pm,pm_se,pp_re,pp_re_se,pp_im,pp_im_se")?;
        for (t, o) in self.times.iter().zip(&self.values) {
            writeln!(
                out,
                "{t:.12e},{:.12e},0,{:.12e},0,{:.12e},0,{:.12e},0,{:.12e},0,{:.12e},0",
                o.sz, o.sp.re, o.sp.im, o.pm, o.pp.re, o.pp.im
            )?;
        }
        Ok(())
    }
}

/// Steady state with the dimension of the numerical null space it came from.
#[derive(Clone, Debug)]
pub struct SteadyState<T> {
    pub state: T,
    pub observables: Observables,
    pub multiplicity: usize,
}

/// Step size and sample count so that samples land exactly on multiples of `interval`.
fn substeps(interval: f64, dt_max: f64) -> (usize, f64) {
    let k = (interval / dt_max).ceil().max(1.0) as usize;
    (k, interval / k as f64)
}

fn pairs(n: usize) -> f64 {
    (n * n.saturating_sub(1)).max(1) as f64
}

/// Dense Liouvillian `ρ̇ = -Gρ - ρG† + J(ρ)` with `G = iH + K`.
#[derive(Clone, Debug)]
pub struct DenseLiouvillian {
    pub n: usize,
    pub d: usize,
    g: DMatrix<C64>,
    gamma_minus: DMatrix<C64>,
    gamma_plus: DMatrix<C64>,
    gamma_31: f64,
    up: f64,
    gamma_d: f64,
    rate_bound: f64,
    param_rate: f64,
}

fn bit(a: usize, i: usize) -> bool {
    a >> i & 1 == 1
}

/// Dense generator for the spin model; rejects more than [`DENSE_CAP`] spins.
pub fn build_dense(model: &SpinSpinModel) -> Result<DenseLiouvillian> {
    let n = model.n_spins();
    if n > DENSE_CAP {
        return Err(Error::TooLarge { n, cap: DENSE_CAP });
    }
    if n == 0 {
        return Err(Error::Dimension("model has no spins".into()));
    }
    let d = 1usize << n;
    let up = model.gamma_13 + model.w;
    let mut g = DMatrix::from_element(d, d, ZERO);
    for a in 0..d {
        let mut diag = C64::new(0.0, 0.0);
        for i in 0..n {
            let sz = if bit(a, i) { 1.0 } else { -1.0 };
            diag += C64::i() * (0.5 * model.b[i] * sz);
            diag += if bit(a, i) { model.gamma_31 / 2.0 } else { up / 2.0 };
            diag += model.gamma_d / 8.0;
            // Diagonal collective pieces: σ⁺σ⁻ projects on e, σ⁻σ⁺ on g.
            diag += if bit(a, i) { model.gamma_minus[(i, i)] } else { model.gamma_plus[(i, i)] };
        }
        g[(a, a)] += diag;
        for l in 0..n {
            for m in 0..n {
                if l == m || bit(a, l) || !bit(a, m) {
                    continue;
                }
                // σ⁺_l σ⁻_m |a⟩ and σ⁻_m σ⁺_l |a⟩ both give |a'⟩.
                let t = (a & !(1 << m)) | (1 << l);
                g[(t, a)] += C64::i() * model.j[(l, m)] + model.gamma_minus[(l, m)] + model.gamma_plus[(l, m)];
            }
        }
    }
    let abs_sum = |m: &DMatrix<C64>| m.iter().map(|z| z.norm()).sum::<f64>();
    let g_norm = (0..d).map(|r| g.row(r).iter().map(|z| z.norm()).sum::<f64>()).fold(0.0, f64::max);
    let g_norm_c = (0..d).map(|c| g.column(c).iter().map(|z| z.norm()).sum::<f64>()).fold(0.0, f64::max);
    let jump = 2.0 * abs_sum(&model.gamma_minus)
        + 2.0 * abs_sum(&model.gamma_plus)
        + n as f64 * (model.gamma_31 + up + model.gamma_d / 4.0);
    let rate_bound = 2.0 * (g_norm * g_norm_c).sqrt() + jump;
    let row_max = |m: &DMatrix<C64>| (0..n).map(|i| m.row(i).iter().map(|z| z.norm()).sum::<f64>()).fold(0.0, f64::max);
    let param_rate = [
        model.b.iter().map(|b| b.abs()).fold(0.0, f64::max),
        row_max(&model.j),
        2.0 * row_max(&model.gamma_minus),
        2.0 * row_max(&model.gamma_plus),
        model.gamma_31,
        up,
        model.gamma_d,
    ]
    .into_iter()
    .fold(0.0, f64::max);
    Ok(DenseLiouvillian {
        n,
        d,
        g,
        gamma_minus: model.gamma_minus.clone(),
        gamma_plus: model.gamma_plus.clone(),
        gamma_31: model.gamma_31,
        up,
        gamma_d: model.gamma_d,
        rate_bound,
        param_rate,
    })
}

impl DenseLiouvillian {
    /// Largest step used by the integrator: `min(0.01 / largest rate, 0.9 / ‖L‖ bound)`.
    pub fn stable_dt(&self) -> f64 {
        (0.01 / self.param_rate.max(f64::MIN_POSITIVE)).min(0.9 / self.rate_bound.max(f64::MIN_POSITIVE))
    }

    pub fn apply(&self, rho: &DMatrix<C64>) -> DMatrix<C64> {
        let (n, d) = (self.n, self.d);
        let mut out = -(&self.g * rho) - rho * self.g.adjoint();
        // σ⁻_m ρ and σ⁺_l ρ for every spin.
        let lower: Vec<DMatrix<C64>> = (0..n)
            .map(|m| DMatrix::from_fn(d, d, |a, b| if bit(a, m) { ZERO } else { rho[(a | 1 << m, b)] }))
            .collect();
        let raise: Vec<DMatrix<C64>> = (0..n)
            .map(|l| DMatrix::from_fn(d, d, |a, b| if bit(a, l) { rho[(a ^ 1 << l, b)] } else { ZERO }))
            .collect();
        for l in 0..n {
            // Σ_m 2Γ⁻_lm σ⁻_m ρ, then right-multiplied by σ⁺_l.
            let mut c = DMatrix::from_element(d, d, ZERO);
            for m in 0..n {
                let w = self.gamma_minus[(l, m)] * 2.0;
                if w != ZERO {
                    c += &lower[m] * w;
                }
            }
            if self.gamma_31 != 0.0 {
                c += &lower[l] * C64::from(self.gamma_31);
            }
            for a in 0..d {
                for b in 0..d {
                    if !bit(b, l) {
                        out[(a, b)] += c[(a, b | 1 << l)];
                    }
                }
            }
        }
        for m in 0..n {
            // Σ_l 2Γ⁺_lm σ⁺_l ρ, then right-multiplied by σ⁻_m.
            let mut c = DMatrix::from_element(d, d, ZERO);
            for l in 0..n {
                let w = self.gamma_plus[(l, m)] * 2.0;
                if w != ZERO {
                    c += &raise[l] * w;
                }
            }
            if self.up != 0.0 {
                c += &raise[m] * C64::from(self.up);
            }
            for a in 0..d {
                for b in 0..d {
                    if bit(b, m) {
                        out[(a, b)] += c[(a, b ^ 1 << m)];
                    }
                }
            }
        }
        if self.gamma_d != 0.0 {
            let w = self.gamma_d / 4.0;
            for a in 0..d {
                for b in 0..d {
                    let same = (0..n).filter(|&i| bit(a, i) == bit(b, i)).count() as f64;
                    let s = 2.0 * same - n as f64;
                    out[(a, b)] += rho[(a, b)] * (w * s);
                }
            }
        }
        out
    }

    /// Basis pairs `(a, b)` of `|a⟩⟨b|` with `popcount(a) - popcount(b) = q`.
    pub fn block_basis(&self, q: i32) -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for a in 0..self.d {
            for b in 0..self.d {
                if a.count_ones() as i32 - b.count_ones() as i32 == q {
                    v.push((a, b));
                }
            }
        }
        v
    }

    /// Generator restricted to one coherence order.
    pub fn block_matrix(&self, q: i32) -> DMatrix<C64> {
        let basis = self.block_basis(q);
        let mut m = DMatrix::from_element(basis.len(), basis.len(), ZERO);
        let mut e = DMatrix::from_element(self.d, self.d, ZERO);
        for (col, &(a, b)) in basis.iter().enumerate() {
            e[(a, b)] = C64::new(1.0, 0.0);
            let out = self.apply(&e);
            e[(a, b)] = ZERO;
            for (row, &(r, s)) in basis.iter().enumerate() {
                m[(row, col)] = out[(r, s)];
            }
        }
        m
    }

    /// Full generator acting on row-major `vec(ρ)`; only sensible for tiny N.
    pub fn matrix(&self) -> DMatrix<C64> {
        let d2 = self.d * self.d;
        let mut m = DMatrix::from_element(d2, d2, ZERO);
        let mut e = DMatrix::from_element(self.d, self.d, ZERO);
        for col in 0..d2 {
            let (a, b) = (col / self.d, col % self.d);
            e[(a, b)] = C64::new(1.0, 0.0);
            let out = self.apply(&e);
            e[(a, b)] = ZERO;
            for row in 0..d2 {
                m[(row, col)] = out[(row / self.d, row % self.d)];
            }
        }
        m
    }
}

/// All spins in the lower level.
pub fn ground_state_dense(n: usize) -> DMatrix<C64> {
    let d = 1 << n;
    let mut rho = DMatrix::from_element(d, d, ZERO);
    rho[(0, 0)] = C64::new(1.0, 0.0);
    rho
}

/// Rotation of every spin by `theta` about x: `ρ -> U ρ U†`, `U = ⊗ exp(-iθσˣ/2)`.
pub fn rotate_x_dense(rho: &DMatrix<C64>, theta: f64) -> DMatrix<C64> {
    let d = rho.nrows();
    let n = d.trailing_zeros() as usize;
    let (c, s) = ((theta / 2.0).cos(), (theta / 2.0).sin());
    let u = DMatrix::from_fn(d, d, |a, b| {
        let mut amp = C64::new(1.0, 0.0);
        for i in 0..n {
            amp *= if bit(a, i) == bit(b, i) { C64::new(c, 0.0) } else { C64::new(0.0, -s) };
        }
        amp
    });
    &u * rho * u.adjoint()
}

pub fn dense_observables(rho: &DMatrix<C64>) -> Observables {
    let d = rho.nrows();
    let n = d.trailing_zeros() as usize;
    let trace: C64 = (0..d).map(|a| rho[(a, a)]).sum();
    let mut sz = 0.0;
    let mut jp = ZERO;
    let mut pm = ZERO;
    let mut pp = ZERO;
    for a in 0..d {
        let p = rho[(a, a)].re;
        sz += p * (2.0 * a.count_ones() as f64 - n as f64);
        for i in 0..n {
            // Tr(σ⁺_i ρ) = Σ ⟨b|ρ|a⟩ with a = b + e_i.
            if bit(a, i) {
                jp += rho[(a ^ 1 << i, a)];
            }
            for j in 0..n {
                if i == j {
                    continue;
                }
                // Tr(σ⁺_i σ⁻_j ρ) = ⟨a|ρ|a'⟩ where σ⁺_i σ⁻_j |a'⟩ = |a⟩.
                if bit(a, j) && !bit(a, i) {
                    pm += rho[(a ^ 1 << j | 1 << i, a)];
                }
                if bit(a, i) && bit(a, j) {
                    pp += rho[(a ^ 1 << i ^ 1 << j, a)];
                }
            }
        }
    }
    let nf = n as f64;
    Observables { trace, sz: sz / nf, sp: jp / nf, pm: pm.re / pairs(n), pp: pp / pairs(n) }
}

fn rk4<F: Fn(&DVector<C64>) -> DVector<C64>>(f: &F, y: &mut DVector<C64>, dt: f64) {
    let h = C64::from(dt);
    let k1 = f(y);
    let k2 = f(&(&*y + &k1 * (h * 0.5)));
    let k3 = f(&(&*y + &k2 * (h * 0.5)));
    let k4 = f(&(&*y + &k3 * h));
    *y += (k1 + (k2 + k3) * C64::from(2.0) + k4) * (h / 6.0);
}

/// RK4 evolution, sampling every `interval` up to `t_final`; `dt_max` caps the step.
pub fn evolve_dense(
    l: &DenseLiouvillian,
    rho0: &DMatrix<C64>,
    t_final: f64,
    interval: f64,
    dt_max: Option<f64>,
) -> Result<(ExactSeries, DMatrix<C64>)> {
    if rho0.nrows() != l.d || rho0.ncols() != l.d {
        return Err(Error::Dimension(format!("state is {}x{}, generator needs {}", rho0.nrows(), rho0.ncols(), l.d)));
    }
    let (k, dt) = substeps(interval, dt_max.unwrap_or(f64::INFINITY).min(l.stable_dt()));
    let n_samples = (t_final / interval).round() as usize;
    let d = l.d;
    let mut y = DVector::from_iterator(d * d, rho0.transpose().iter().cloned());
    let f = |v: &DVector<C64>| {
        let rho = DMatrix::from_row_slice(d, d, v.as_slice());
        let out = l.apply(&rho);
        DVector::from_iterator(d * d, out.transpose().iter().cloned())
    };
    let mut series = ExactSeries { n_spins: l.n, dt, ..Default::default() };
    series.times.push(0.0);
    series.values.push(dense_observables(rho0));
    for s in 1..=n_samples {
        for _ in 0..k {
            rk4(&f, &mut y, dt);
        }
        series.times.push(s as f64 * interval);
        series.values.push(dense_observables(&DMatrix::from_row_slice(d, d, y.as_slice())));
    }
    Ok((series, DMatrix::from_row_slice(d, d, y.as_slice())))
}

/// Null vectors of a square generator: (vector of the smallest singular value, multiplicity).
fn null_vector(m: &DMatrix<C64>) -> (DVector<C64>, usize) {
    let svd = m.clone().svd(false, true);
    let s = &svd.singular_values;
    let top = s.max().max(f64::MIN_POSITIVE);
    let (kmin, _) = s.iter().enumerate().fold((0, f64::INFINITY), |acc, (k, &v)| if v < acc.1 { (k, v) } else { acc });
    let mult = s.iter().filter(|&&v| v < 1e-9 * top).count();
    let vt = svd.v_t.expect("requested");
    let v = vt.row(kmin).adjoint();
    (v, mult.max(1))
}

/// Steady state from the null vector of the population-carrying block.
///
/// More than one numerically null direction gives [`Error::DegenerateSteadyState`].
pub fn steady_state_dense(l: &DenseLiouvillian) -> Result<SteadyState<DMatrix<C64>>> {
    let basis = l.block_basis(0);
    let m = l.block_matrix(0);
    let (v, mult) = null_vector(&m);
    if mult > 1 {
        return Err(Error::DegenerateSteadyState(mult));
    }
    let mut rho = DMatrix::from_element(l.d, l.d, ZERO);
    for (k, &(a, b)) in basis.iter().enumerate() {
        rho[(a, b)] = v[k];
    }
    let tr: C64 = (0..l.d).map(|a| rho[(a, a)]).sum();
    rho /= tr;
    let rho = (&rho + rho.adjoint()) * C64::from(0.5);
    let observables = dense_observables(&rho);
    Ok(SteadyState { state: rho, observables, multiplicity: mult })
}

/// Minimal collective model with optional individual decay and dephasing.
///
/// Equivalent [`SpinSpinModel`]: uniform `Γ⁻ = Γ_c(n̄+1)/2`, `Γ⁺ = Γ_c n̄/2`,
/// `Γ31 = gamma_sp`, `Γd = gamma_deph`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimalModel {
    pub n: usize,
    pub gamma_c: f64,
    pub nbar: f64,
    pub w: f64,
    pub gamma_sp: f64,
    pub gamma_deph: f64,
}

impl MinimalModel {
    pub fn new(n: usize, gamma_c: f64, nbar: f64, w: f64) -> Self {
        Self { n, gamma_c, nbar, w, gamma_sp: 0.0, gamma_deph: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.gamma_c, self.nbar, self.w, self.gamma_sp, self.gamma_deph];
        if self.n == 0 || rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::InvalidInput(format!("minimal model needs n > 0 and non-negative rates: {self:?}")));
        }
        Ok(())
    }

    pub fn to_spin_model(&self) -> SpinSpinModel {
        SpinSpinModel::minimal(self.n, self.gamma_c, self.nbar, self.w).with_single_spin_rates(self.gamma_sp, 0.0, self.gamma_deph)
    }
}

type M2 = [[C64; 2]; 2];
type M4 = [[C64; 4]; 4];

fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

const ID2: M2 = [[C64::new(1.0, 0.0), ZERO], [ZERO, C64::new(1.0, 0.0)]];
/// |g⟩⟨e| in the (e, g) ordering.
const SM: M2 = [[ZERO, ZERO], [C64::new(1.0, 0.0), ZERO]];
const SP: M2 = [[ZERO, C64::new(1.0, 0.0)], [ZERO, ZERO]];
const SZ: M2 = [[C64::new(1.0, 0.0), ZERO], [ZERO, C64::new(-1.0, 0.0)]];

fn mul2(a: &M2, b: &M2) -> M2 {
    let mut r = [[ZERO; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            r[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    r
}

/// `E ↦ X E Y` on the basis E_{ij} = |i⟩⟨j|, index `2i + j`; entry `[b][a]`.
fn sandwich(x: &M2, y: &M2) -> M4 {
    let mut s = [[ZERO; 4]; 4];
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    s[2 * k + l][2 * i + j] += x[k][i] * y[j][l];
                }
            }
        }
    }
    s
}

fn scale4(s: M4, w: f64) -> M4 {
    s.map(|row| row.map(|v| v * w))
}

/// Sparse matrix in compressed-row form.
#[derive(Clone, Debug, Default)]
pub struct Csr {
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<C64>,
}

impl Csr {
    fn from_rows(rows: Vec<HashMap<usize, C64>>) -> Self {
        let mut m = Csr { indptr: vec![0], ..Default::default() };
        for row in rows {
            let mut entries: Vec<(usize, C64)> = row.into_iter().filter(|(_, v)| *v != ZERO).collect();
            entries.sort_by_key(|e| e.0);
            for (c, v) in entries {
                m.indices.push(c);
                m.values.push(v);
            }
            m.indptr.push(m.indices.len());
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn matvec(&self, x: &DVector<C64>) -> DVector<C64> {
        DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|r| (self.indptr[r]..self.indptr[r + 1]).map(|k| self.values[k] * x[self.indices[k]]).sum()),
        )
    }

    pub fn max_row_sum(&self) -> f64 {
        (0..self.dim())
            .map(|r| (self.indptr[r]..self.indptr[r + 1]).map(|k| self.values[k].norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let mut m = DMatrix::from_element(self.dim(), self.dim(), ZERO);
        for r in 0..self.dim() {
            for k in self.indptr[r]..self.indptr[r + 1] {
                m[(r, self.indices[k])] += self.values[k];
            }
        }
        m
    }
}

/// Generator of the minimal model on one coherence order `q = n2 - n3`.
#[derive(Clone, Debug)]
pub struct SymmetricSector {
    pub n: usize,
    pub q: i32,
    pub tuples: Vec<[usize; 4]>,
    index: HashMap<[usize; 4], usize>,
    pub generator: Csr,
}

impl SymmetricSector {
    pub fn dim(&self) -> usize {
        self.tuples.len()
    }

    pub fn index_of(&self, t: &[usize; 4]) -> Option<usize> {
        self.index.get(t).copied()
    }
}

fn sector_tuples(n: usize, q: i32) -> Vec<[usize; 4]> {
    let mut v = Vec::new();
    let shift = q.unsigned_abs() as usize;
    for k in 0..=n {
        let (n2, n3) = if q >= 0 { (k + shift, k) } else { (k, k + shift) };
        if n2 + n3 > n {
            break;
        }
        for n1 in 0..=n - n2 - n3 {
            v.push([n1, n2, n3, n - n1 - n2 - n3]);
        }
    }
    v
}

pub fn symmetric_sector(m: &MinimalModel, q: i32) -> Result<SymmetricSector> {
    m.validate()?;
    let gm = m.gamma_c * (m.nbar + 1.0) / 2.0;
    let gp = m.gamma_c * m.nbar / 2.0;
    let pm = mul2(&SP, &SM);
    let mp = mul2(&SM, &SP);
    let local = [
        // Collective terms with l = m.
        scale4(sandwich(&SM, &SP), 2.0 * gm),
        scale4(sandwich(&pm, &ID2), -gm),
        scale4(sandwich(&ID2, &pm), -gm),
        scale4(sandwich(&SP, &SM), 2.0 * gp),
        scale4(sandwich(&mp, &ID2), -gp),
        scale4(sandwich(&ID2, &mp), -gp),
        // Individual repump, decay and dephasing.
        scale4(sandwich(&SP, &SM), m.w),
        scale4(sandwich(&mp, &ID2), -m.w / 2.0),
        scale4(sandwich(&ID2, &mp), -m.w / 2.0),
        scale4(sandwich(&SM, &SP), m.gamma_sp),
        scale4(sandwich(&pm, &ID2), -m.gamma_sp / 2.0),
        scale4(sandwich(&ID2, &pm), -m.gamma_sp / 2.0),
        scale4(sandwich(&SZ, &SZ), m.gamma_deph / 4.0),
        scale4(sandwich(&ID2, &ID2), -m.gamma_deph / 4.0),
    ];
    let single = local.iter().fold([[ZERO; 4]; 4], |mut acc, s| {
        for b in 0..4 {
            for a in 0..4 {
                acc[b][a] += s[b][a];
            }
        }
        acc
    });
    // Collective terms with l ≠ m: (weight, A at l, B at m).
    let pair: Vec<(f64, M4, M4)> = vec![
        (2.0 * gm, sandwich(&SM, &ID2), sandwich(&ID2, &SP)),
        (-gm, sandwich(&SP, &ID2), sandwich(&SM, &ID2)),
        (-gm, sandwich(&ID2, &SP), sandwich(&ID2, &SM)),
        (2.0 * gp, sandwich(&SP, &ID2), sandwich(&ID2, &SM)),
        (-gp, sandwich(&SM, &ID2), sandwich(&SP, &ID2)),
        (-gp, sandwich(&ID2, &SM), sandwich(&ID2, &SP)),
    ];

    let tuples = sector_tuples(m.n, q);
    let index: HashMap<[usize; 4], usize> = tuples.iter().enumerate().map(|(i, t)| (*t, i)).collect();
    let mut rows: Vec<HashMap<usize, C64>> = vec![HashMap::new(); tuples.len()];
    let mut push = |target: [usize; 4], src: usize, v: C64| {
        let r = *index.get(&target).expect("terms conserve the coherence order");
        *rows[r].entry(src).or_insert(ZERO) += v;
    };
    for (col, t) in tuples.iter().enumerate() {
        for a in 0..4 {
            if t[a] == 0 {
                continue;
            }
            for b in 0..4 {
                let v = single[b][a];
                if v == ZERO {
                    continue;
                }
                let mut nt = *t;
                nt[a] -= 1;
                nt[b] += 1;
                push(nt, col, v * t[a] as f64);
            }
        }
        for (w, am, bm) in &pair {
            for a in 0..4 {
                for cc in 0..4 {
                    let count = t[a] * (t[cc] - usize::from(a == cc).min(t[cc]));
                    if t[a] == 0 || count == 0 {
                        continue;
                    }
                    for b in 0..4 {
                        if am[b][a] == ZERO {
                            continue;
                        }
                        for dd in 0..4 {
                            if bm[dd][cc] == ZERO {
                                continue;
                            }
                            let mut nt = *t;
                            nt[a] -= 1;
                            nt[cc] -= 1;
                            nt[b] += 1;
                            nt[dd] += 1;
                            push(nt, col, am[b][a] * bm[dd][cc] * (*w * count as f64));
                        }
                    }
                }
            }
        }
    }
    Ok(SymmetricSector { n: m.n, q, tuples, index, generator: Csr::from_rows(rows) })
}

/// Single-spin density matrix entries `(⟨e|ρ|e⟩, ⟨e|ρ|g⟩, ⟨g|ρ|e⟩, ⟨g|ρ|g⟩)`.
pub type SpinDensity = [C64; 4];

/// All spins in the lower level.
pub const GROUND: SpinDensity = [ZERO, ZERO, ZERO, C64::new(1.0, 0.0)];
/// Ground rotated by π/2 about x: `(|g⟩ - i|e⟩)/√2`.
pub const EQUATOR: SpinDensity = [C64::new(0.5, 0.0), C64::new(0.0, -0.5), C64::new(0.0, 0.5), C64::new(0.5, 0.0)];

fn ln_factorials(n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n + 1];
    for k in 1..=n {
        v[k] = v[k - 1] + (k as f64).ln();
    }
    v
}

/// Coefficients of `⊗ρ₁` in a sector: multinomial times `Π α_a^{n_a}`.
pub fn product_state(sector: &SymmetricSector, single: &SpinDensity) -> Result<DVector<C64>> {
    let herm = (single[1] - single[2].conj()).norm() + single[0].im.abs() + single[3].im.abs();
    let tr = single[0] + single[3];
    if herm > 1e-12 || (tr - c(1.0)).norm() > 1e-12 {
        return Err(Error::NotSymmetricState(format!("single-spin density {single:?} is not a valid state")));
    }
    let lf = ln_factorials(sector.n);
    Ok(DVector::from_iterator(
        sector.dim(),
        sector.tuples.iter().map(|t| {
            let mut ln_mag = lf[sector.n];
            let mut phase = c(1.0);
            for a in 0..4 {
                if t[a] == 0 {
                    continue;
                }
                if single[a] == ZERO {
                    return ZERO;
                }
                ln_mag += t[a] as f64 * single[a].norm().ln() - lf[t[a]];
                let u = single[a] / single[a].norm();
                phase *= u.powu(t[a] as u32);
            }
            phase * ln_mag.exp()
        }),
    ))
}

/// Observables carried by one sector: q = 0 gives trace, sz and pm;
/// q = -1 gives ⟨σ⁺⟩; q = -2 gives ⟨σ⁺σ⁺⟩.
fn sector_observables(sector: &SymmetricSector, coef: &DVector<C64>, out: &mut Observables) {
    let n = sector.n;
    let nf = n as f64;
    match sector.q {
        0 => {
            let (mut tr, mut jz, mut pm) = (ZERO, ZERO, ZERO);
            for (t, v) in sector.tuples.iter().zip(coef.iter()) {
                if t[1] == 0 {
                    tr += v;
                    jz += v * (t[0] as f64 - t[3] as f64);
                } else if t[1] == 1 {
                    pm += v;
                }
            }
            out.trace = tr;
            out.sz = jz.re / nf;
            out.pm = pm.re / pairs(n);
        }
        -1 => {
            let jp: C64 = sector.tuples.iter().zip(coef.iter()).filter(|(t, _)| t[1] == 0).map(|(_, v)| *v).sum();
            out.sp = jp / nf;
        }
        -2 => {
            let pp: C64 = sector.tuples.iter().zip(coef.iter()).filter(|(t, _)| t[1] == 0).map(|(_, v)| *v).sum();
            out.pp = pp * 2.0 / pairs(n);
        }
        _ => {}
    }
}

impl SymmetricSector {
    /// `min(0.01 / largest rate, 0.9 / Gershgorin bound)`.
    pub fn stable_dt(&self, m: &MinimalModel) -> f64 {
        let rate = (m.gamma_c * (2.0 * m.nbar + 1.0) * m.n as f64).max(m.w).max(m.gamma_sp).max(m.gamma_deph);
        (0.01 / rate.max(f64::MIN_POSITIVE)).min(0.9 / self.generator.max_row_sum().max(f64::MIN_POSITIVE))
    }
}

/// Evolves the minimal model from a symmetric product state and samples every `interval`.
pub fn minimal_solve(
    m: &MinimalModel,
    initial: &SpinDensity,
    t_final: f64,
    interval: f64,
    dt_max: Option<f64>,
) -> Result<ExactSeries> {
    let sectors: Vec<SymmetricSector> = [0i32, -1, -2]
        .into_iter()
        .filter(|&q| (q.unsigned_abs() as usize) <= m.n)
        .map(|q| symmetric_sector(m, q))
        .collect::<Result<_>>()?;
    let dt_cap = sectors.iter().map(|s| s.stable_dt(m)).fold(dt_max.unwrap_or(f64::INFINITY), f64::min);
    let (k, dt) = substeps(interval, dt_cap);
    let mut coefs: Vec<DVector<C64>> = sectors.iter().map(|s| product_state(s, initial)).collect::<Result<_>>()?;
    let observe = |coefs: &[DVector<C64>]| {
        let mut o = Observables::default();
        for (s, c) in sectors.iter().zip(coefs) {
            sector_observables(s, c, &mut o);
        }
        o
    };
    let n_samples = (t_final / interval).round() as usize;
    let mut series = ExactSeries { n_spins: m.n, dt, ..Default::default() };
    series.times.push(0.0);
    series.values.push(observe(&coefs));
    for step in 1..=n_samples {
        for (s, c) in sectors.iter().zip(coefs.iter_mut()) {
            let f = |v: &DVector<C64>| s.generator.matvec(v);
            for _ in 0..k {
                rk4(&f, c, dt);
            }
        }
        series.times.push(step as f64 * interval);
        let o = observe(&coefs);
        if !(o.sz.is_finite() && o.sp.norm().is_finite()) {
            return Err(Error::Divergence { aborted: 1, total: 1 });
        }
        series.values.push(o);
    }
    Ok(series)
}

/// Steady state of the minimal model from the null vector of the `q = 0` sector.
///
/// The null space is computed in the Hilbert-Schmidt orthonormal basis
/// `√multinomial(n) T(n)`, which keeps the matrix well balanced.
pub fn minimal_steady_state(m: &MinimalModel) -> Result<SteadyState<DVector<C64>>> {
    let sector = symmetric_sector(m, 0)?;
    let lf = ln_factorials(m.n);
    let half_ln: Vec<f64> =
        sector.tuples.iter().map(|t| 0.5 * (lf[m.n] - t.iter().map(|&k| lf[k]).sum::<f64>())).collect();
    let dense = sector.generator.to_dense();
    let balanced = DMatrix::from_fn(dense.nrows(), dense.ncols(), |i, j| dense[(i, j)] * (half_ln[j] - half_ln[i]).exp());
    let (v, mult) = null_vector(&balanced);
    if mult > 1 {
        return Err(Error::DegenerateSteadyState(mult));
    }
    let v = DVector::from_iterator(v.len(), v.iter().zip(&half_ln).map(|(z, h)| z * h.exp()));
    let mut o = Observables::default();
    sector_observables(&sector, &v, &mut o);
    let v = v / o.trace;
    sector_observables(&sector, &v, &mut o);
    Ok(SteadyState { state: v, observables: o, multiplicity: mult })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn cap_is_enforced() {
        let m = SpinSpinModel::minimal(7, 1.0, 0.0, 1.0);
        assert!(matches!(build_dense(&m), Err(Error::TooLarge { n: 7, cap: 6 })));
    }

    #[test]
    fn trace_preserving_generator() {
        let mut m = SpinSpinModel::minimal(3, 1.0, 0.7, 2.0).with_single_spin_rates(0.3, 0.2, 0.4);
        m.b = vec![0.5, -0.2, 0.1];
        m.j[(0, 1)] = C64::new(0.3, 0.0);
        m.j[(1, 0)] = C64::new(0.3, 0.0);
        let l = build_dense(&m).unwrap();
        let full = l.matrix();
        // Left action on the identity: rows with a == b summed.
        for col in 0..full.ncols() {
            let s: C64 = (0..l.d).map(|a| full[(a * l.d + a, col)]).sum();
            assert!(s.norm() < 1e-12, "column {col}: {s}");
        }
    }

    #[test]
    fn single_spin_pumped_steady_state_is_pure() {
        let m = SpinSpinModel::minimal(1, 0.0, 0.0, 3.0);
        let ss = steady_state_dense(&build_dense(&m).unwrap()).unwrap();
        assert!(close(ss.observables.sz, 1.0, 1e-10));
        let purity = (&ss.state * &ss.state).trace().re;
        assert!(close(purity, 1.0, 1e-10));
    }

    #[test]
    fn single_spin_two_rate_balance() {
        let (gc, nbar, w) = (1.0, 2.0, 1.5);
        let ss = minimal_steady_state(&MinimalModel::new(1, gc, nbar, w)).unwrap();
        let want = (w + gc * nbar - gc * (1.0 + nbar)) / (w + gc * nbar + gc * (1.0 + nbar));
        assert!(close(ss.observables.sz, want, 1e-10), "{}", ss.observables.sz);
        let dense = steady_state_dense(&build_dense(&MinimalModel::new(1, gc, nbar, w).to_spin_model()).unwrap()).unwrap();
        assert!(close(dense.observables.sz, want, 1e-10));
    }

    #[test]
    fn two_spin_steady_state_is_swap_symmetric() {
        let mut m = SpinSpinModel::minimal(2, 1.0, 0.3, 1.0);
        m.b = vec![0.2, 0.2];
        let ss = steady_state_dense(&build_dense(&m).unwrap()).unwrap();
        let swap = |a: usize| ((a & 1) << 1) | ((a >> 1) & 1);
        let r = &ss.state;
        for a in 0..4 {
            for b in 0..4 {
                assert!((r[(a, b)] - r[(swap(a), swap(b))]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn evolution_conserves_trace_and_hermiticity() {
        let mut m = SpinSpinModel::minimal(3, 1.0, 0.5, 1.2).with_single_spin_rates(0.1, 0.05, 0.2);
        m.b = vec![0.3, 0.0, -0.3];
        let l = build_dense(&m).unwrap();
        let rho0 = rotate_x_dense(&ground_state_dense(3), std::f64::consts::FRAC_PI_2);
        let (series, rho) = evolve_dense(&l, &rho0, 2.0, 0.1, None).unwrap();
        for o in &series.values {
            assert!((o.trace - c(1.0)).norm() < 1e-9);
        }
        assert!((&rho - rho.adjoint()).camax() < 1e-9);
    }

    #[test]
    fn rotation_conventions() {
        let rho = rotate_x_dense(&ground_state_dense(2), std::f64::consts::FRAC_PI_2);
        let o = dense_observables(&rho);
        assert!(close(o.sz, 0.0, 1e-14));
        assert!(close(o.sp.re, 0.0, 1e-14) && close(o.sp.im, 0.5, 1e-14));
        let twice = rotate_x_dense(&rho, std::f64::consts::FRAC_PI_2);
        assert!(close(dense_observables(&twice).sz, 1.0, 1e-14));
    }

    #[test]
    fn product_state_observables() {
        let m = MinimalModel::new(5, 1.0, 0.0, 1.0);
        let mut o = Observables::default();
        for q in [0, -1, -2] {
            let s = symmetric_sector(&m, q).unwrap();
            let c = product_state(&s, &EQUATOR).unwrap();
            sector_observables(&s, &c, &mut o);
        }
        assert!(close(o.trace.re, 1.0, 1e-12));
        assert!(close(o.sz, 0.0, 1e-12));
        assert!((o.sp - C64::new(0.0, 0.5)).norm() < 1e-12);
        assert!(close(o.pm, 0.25, 1e-12));
        assert!((o.pp - C64::new(-0.25, 0.0)).norm() < 1e-12);
        assert!(matches!(
            product_state(&symmetric_sector(&m, 0).unwrap(), &[c(0.5), c(0.3), c(0.1), c(0.5)]),
            Err(Error::NotSymmetricState(_))
        ));
    }

    #[test]
    fn symmetric_matches_dense_time_series() {
        for n in 2..=4 {
            let mut m = MinimalModel::new(n, 1.0, 0.8, 0.6 * n as f64);
            m.gamma_sp = 0.1;
            m.gamma_deph = 0.2;
            let l = build_dense(&m.to_spin_model()).unwrap();
            let sectors: Vec<_> = [0, -1, -2].iter().map(|&q| symmetric_sector(&m, q).unwrap()).collect();
            let dt = sectors.iter().map(|s| s.stable_dt(&m)).fold(l.stable_dt(), f64::min);
            let rho0 = rotate_x_dense(&ground_state_dense(n), std::f64::consts::FRAC_PI_2);
            let (dense, _) = evolve_dense(&l, &rho0, 1.0, 0.05, Some(dt)).unwrap();
            let sym = minimal_solve(&m, &EQUATOR, 1.0, 0.05, Some(dt)).unwrap();
            for (a, b) in dense.values.iter().zip(&sym.values) {
                assert!(close(a.sz, b.sz, 1e-8), "n={n}: {} vs {}", a.sz, b.sz);
                assert!((a.sp - b.sp).norm() < 1e-8);
                assert!(close(a.pm, b.pm, 1e-8));
                assert!((a.pp - b.pp).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn symmetric_steady_state_matches_dense() {
        let m = MinimalModel::new(3, 1.0, 0.5, 2.0);
        let a = minimal_steady_state(&m).unwrap().observables;
        let b = steady_state_dense(&build_dense(&m.to_spin_model()).unwrap()).unwrap().observables;
        assert!(close(a.sz, b.sz, 1e-9) && close(a.pm, b.pm, 1e-9));
    }

    #[test]
    fn sector_hermiticity_and_trace() {
        let m = MinimalModel::new(8, 1.0, 1.0, 4.0);
        let plus = symmetric_sector(&m, 1).unwrap();
        let minus = symmetric_sector(&m, -1).unwrap();
        let mut cp = product_state(&plus, &EQUATOR).unwrap();
        let mut cm = product_state(&minus, &EQUATOR).unwrap();
        let dt = plus.stable_dt(&m);
        for _ in 0..200 {
            rk4(&|v: &DVector<C64>| plus.generator.matvec(v), &mut cp, dt);
            rk4(&|v: &DVector<C64>| minus.generator.matvec(v), &mut cm, dt);
        }
        let scale = cp.camax();
        for (i, t) in plus.tuples.iter().enumerate() {
            let j = minus.index_of(&[t[0], t[2], t[1], t[3]]).unwrap();
            assert!((cp[i] - cm[j].conj()).norm() < 1e-12 * scale);
        }
        let series = minimal_solve(&m, &EQUATOR, 2.0, 0.1, None).unwrap();
        for o in &series.values {
            assert!((o.trace - c(1.0)).norm() < 1e-10);
        }
    }

    #[test]
    fn csv_header_matches_langevin_schema() {
        let s = minimal_solve(&MinimalModel::new(2, 1.0, 0.0, 1.0), &GROUND, 0.1, 0.05, None).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut header = String::from("time");
        for o in crate::langevin::OBSERVABLES {
            header += &format!(",{o},{o}_se");
        }
        assert!(text.starts_with(&header));
    }
}
