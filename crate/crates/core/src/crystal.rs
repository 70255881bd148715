//! Planar two-species ion crystals and their transverse normal modes.
//!
//! Ions sit on a triangular lattice in the plane z = 0. Only motion along z is
//! modeled. The potential energy to second order in the z displacements is
//!
//! ```text
//! V = 1/2 sum_m k_z z_m^2 - 1/2 sum_{m<n} c_mn (z_m - z_n)^2,   c_mn = k_e e^2 / d_mn^3
//! ```
//!
//! so the Hessian has diagonal `k_z - sum_p c_mp` and off-diagonal `+c_mn`.
//! Normal modes diagonalize the mass-weighted Hessian `K_mn / sqrt(m_m m_n)`.

use std::cmp::Ordering;
use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::consts::{ATOMIC_MASS_UNIT, COULOMB_K, ELEMENTARY_CHARGE, HBAR, TWO_PI};
use crate::{Error, Result};

/// Role of an ion species in the crystal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Laser-cooled species (tau) that damps the shared modes.
    Coolant,
    /// Spin species (sigma) that synchronizes.
    Spin,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IonSpecies {
    pub role: Role,
    /// kg
    pub mass: f64,
    /// C
    pub charge: f64,
}

impl IonSpecies {
    pub fn new(role: Role, mass: f64) -> Result<Self> {
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::InvalidInput(format!("ion mass must be positive, got {mass}")));
        }
        Ok(Self { role, mass, charge: ELEMENTARY_CHARGE })
    }

    /// 24Mg+ coolant.
    pub fn mg24() -> Self {
        Self { role: Role::Coolant, mass: 24.0 * ATOMIC_MASS_UNIT, charge: ELEMENTARY_CHARGE }
    }

    /// 25Mg+ spin ion.
    pub fn mg25() -> Self {
        Self { role: Role::Spin, mass: 25.0 * ATOMIC_MASS_UNIT, charge: ELEMENTARY_CHARGE }
    }
}

/// Masses used to weight the Hessian when solving for normal modes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeWeighting {
    /// Each ion carries its own species mass.
    Species,
    /// Every ion carries the spin-ion mass, so modes diagonalize the bare
    /// potential-energy matrix and the top mode is exactly uniform.
    #[default]
    PotentialEnergy,
}

/// Geometry and trap of a two-species planar crystal.
///
/// Ion indices are ordered with all coolant ions first, then all spin ions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrystalConfig {
    /// In-plane equilibrium coordinates, m.
    pub positions: Vec<[f64; 2]>,
    pub roles: Vec<Role>,
    pub coolant: IonSpecies,
    pub spin: IonSpecies,
    /// Nearest-neighbour lattice spacing, m.
    pub spacing: f64,
    /// Transverse trap stiffness k_z, N/m. Zero until calibrated.
    pub trap_stiffness: f64,
    #[serde(default)]
    pub weighting: ModeWeighting,
}

impl CrystalConfig {
    /// Builds a crystal from explicit positions. Roles must list coolant ions
    /// before spin ions.
    pub fn from_positions(
        positions: Vec<[f64; 2]>,
        roles: Vec<Role>,
        coolant: IonSpecies,
        spin: IonSpecies,
        spacing: f64,
    ) -> Result<Self> {
        if positions.len() != roles.len() {
            return Err(Error::Dimension(format!(
                "{} positions but {} roles",
                positions.len(),
                roles.len()
            )));
        }
        let n_tau = roles.iter().filter(|r| **r == Role::Coolant).count();
        let n_sigma = roles.len() - n_tau;
        if n_tau == 0 || n_sigma == 0 {
            return Err(Error::InvalidInput(
                "a crystal needs at least one coolant and one spin ion".into(),
            ));
        }
        if roles[..n_tau].iter().any(|r| *r != Role::Coolant) {
            return Err(Error::InvalidInput("coolant ions must be listed before spin ions".into()));
        }
        if coolant.role != Role::Coolant || spin.role != Role::Spin {
            return Err(Error::InvalidInput("species roles do not match their slots".into()));
        }
        for (i, p) in positions.iter().enumerate() {
            if !(p[0].is_finite() && p[1].is_finite()) {
                return Err(Error::InvalidInput(format!("ion {i} has a non-finite position")));
            }
            for (j, q) in positions.iter().enumerate().skip(i + 1) {
                if distance(p, q) <= 0.0 {
                    return Err(Error::InvalidInput(format!("ions {i} and {j} coincide")));
                }
            }
        }
        Ok(Self {
            positions,
            roles,
            coolant,
            spin,
            spacing,
            trap_stiffness: 0.0,
            weighting: ModeWeighting::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn n_coolant(&self) -> usize {
        self.roles.iter().filter(|r| **r == Role::Coolant).count()
    }

    pub fn n_spin(&self) -> usize {
        self.len() - self.n_coolant()
    }

    pub fn coolant_indices(&self) -> Vec<usize> {
        self.indices_of(Role::Coolant)
    }

    pub fn spin_indices(&self) -> Vec<usize> {
        self.indices_of(Role::Spin)
    }

    fn indices_of(&self, role: Role) -> Vec<usize> {
        self.roles.iter().enumerate().filter(|(_, r)| **r == role).map(|(i, _)| i).collect()
    }

    pub fn species_mass(&self, ion: usize) -> f64 {
        match self.roles[ion] {
            Role::Coolant => self.coolant.mass,
            Role::Spin => self.spin.mass,
        }
    }

    /// Mass used in the mode problem, per the crystal's [`ModeWeighting`].
    pub fn mode_mass(&self, ion: usize) -> f64 {
        match self.weighting {
            ModeWeighting::Species => self.species_mass(ion),
            ModeWeighting::PotentialEnergy => self.spin.mass,
        }
    }

    pub fn with_weighting(mut self, weighting: ModeWeighting) -> Self {
        self.weighting = weighting;
        self
    }

    pub fn with_trap_stiffness(mut self, k_z: f64) -> Self {
        self.trap_stiffness = k_z;
        self
    }
}

fn distance(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Clone, Copy, Debug)]
struct Site {
    shell: i64,
    r2: i64,
    angle: f64,
    x: f64,
    y: f64,
}

fn site_cmp_radial(a: &Site, b: &Site) -> Ordering {
    a.r2.cmp(&b.r2).then(a.angle.total_cmp(&b.angle))
}

/// Generates a triangular-lattice crystal with Mg isotopes as species.
///
/// Sites are taken shell by shell in hexagonal distance from the center, so
/// crystal sizes 3k(k+1)+1 (7, 19, ..., 91, 169, 217) are complete hexagons;
/// a partially filled outer shell is populated in order of radius, then
/// angle. The `n_tau` sites closest to the center become coolant ions.
pub fn generate_crystal(n_sigma: usize, n_tau: usize, spacing: f64) -> Result<CrystalConfig> {
    generate_crystal_with(n_sigma, n_tau, spacing, IonSpecies::mg24(), IonSpecies::mg25())
}

pub fn generate_crystal_with(
    n_sigma: usize,
    n_tau: usize,
    spacing: f64,
    coolant: IonSpecies,
    spin: IonSpecies,
) -> Result<CrystalConfig> {
    if n_sigma == 0 || n_tau == 0 {
        return Err(Error::InvalidInput(format!(
            "need at least one ion of each species, got n_sigma = {n_sigma}, n_tau = {n_tau}"
        )));
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::InvalidInput(format!("lattice spacing must be positive, got {spacing}")));
    }
    let n = n_sigma + n_tau;
    let mut shells = 0i64;
    while ((3 * shells * (shells + 1) + 1) as usize) < n {
        shells += 1;
    }

    let half_sqrt3 = 3f64.sqrt() / 2.0;
    let mut sites = Vec::new();
    for q in -shells..=shells {
        for r in -shells..=shells {
            let shell = (q.abs() + r.abs() + (q + r).abs()) / 2;
            if shell > shells {
                continue;
            }
            let x = (q as f64 + 0.5 * r as f64) * spacing;
            let y = r as f64 * half_sqrt3 * spacing;
            let mut angle = y.atan2(x);
            if angle < 0.0 {
                angle += TWO_PI;
            }
            if q == 0 && r == 0 {
                angle = 0.0;
            }
            sites.push(Site { shell, r2: q * q + q * r + r * r, angle, x, y });
        }
    }
    sites.sort_by(|a, b| a.shell.cmp(&b.shell).then_with(|| site_cmp_radial(a, b)));
    sites.truncate(n);
    sites.sort_by(site_cmp_radial);

    let mut positions: Vec<[f64; 2]> = sites.iter().map(|s| [s.x, s.y]).collect();
    // Exact zeros keep the generator bit-reproducible across platforms.
    for p in positions.iter_mut() {
        for c in p.iter_mut() {
            if c.abs() < 1e-12 * spacing {
                *c = 0.0;
            }
        }
    }
    let mut roles = vec![Role::Coolant; n_tau];
    roles.extend(std::iter::repeat_n(Role::Spin, n_sigma));
    CrystalConfig::from_positions(positions, roles, coolant, spin, spacing)
}

/// Coulomb couplings c_mn = k_e q_m q_n / d_mn^3 (zero diagonal).
fn coulomb_couplings(crystal: &CrystalConfig) -> DMatrix<f64> {
    let n = crystal.len();
    let charge = |i: usize| match crystal.roles[i] {
        Role::Coolant => crystal.coolant.charge,
        Role::Spin => crystal.spin.charge,
    };
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            let d = distance(&crystal.positions[i], &crystal.positions[j]);
            COULOMB_K * charge(i) * charge(j) / (d * d * d)
        }
    })
}

/// Transverse Hessian of the potential energy, N/m.
pub fn stiffness_matrix(crystal: &CrystalConfig) -> DMatrix<f64> {
    let c = coulomb_couplings(crystal);
    let n = crystal.len();
    let mut k = c.clone();
    for i in 0..n {
        k[(i, i)] = crystal.trap_stiffness - c.row(i).sum();
    }
    k
}

/// Mass-weighted Hessian, rad^2/s^2.
pub fn mass_weighted_stiffness(crystal: &CrystalConfig) -> DMatrix<f64> {
    let k = stiffness_matrix(crystal);
    let inv_sqrt_m: Vec<f64> = (0..crystal.len()).map(|i| 1.0 / crystal.mode_mass(i).sqrt()).collect();
    DMatrix::from_fn(k.nrows(), k.ncols(), |i, j| k[(i, j)] * inv_sqrt_m[i] * inv_sqrt_m[j])
}

/// Transverse normal modes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormalModes {
    /// Mode frequencies omega_n, rad/s, strictly non-increasing.
    pub frequencies: Vec<f64>,
    /// Orthogonal mode matrix; column n is mode n, row m is ion m.
    pub matrix: DMatrix<f64>,
    /// Masses used for mass weighting, kg, in crystal order.
    pub masses: Vec<f64>,
}

impl NormalModes {
    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    /// Frequency of the highest (center-of-mass-like) mode.
    pub fn com_frequency(&self) -> f64 {
        self.frequencies[0]
    }

    /// max |M^T M - I|.
    pub fn orthonormality_error(&self) -> f64 {
        let g = self.matrix.transpose() * &self.matrix;
        let n = g.nrows();
        (g - DMatrix::<f64>::identity(n, n)).amax()
    }

    /// Writes `mode,freq_hz,p0,p1,...` with one row per mode.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "mode,freq_hz")?;
        for m in 0..self.matrix.nrows() {
            write!(out, ",p{m}")?;
        }
        writeln!(out)?;
        for (n, w) in self.frequencies.iter().enumerate() {
            write!(out, "{n},{:.12e}", w / TWO_PI)?;
            for m in 0..self.matrix.nrows() {
                write!(out, ",{:.12e}", self.matrix[(m, n)])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Sorted eigen-decomposition with a deterministic sign and tie convention.
///
/// Each eigenvector is flipped so its largest-magnitude entry is positive.
/// Runs of eigenvalues within `1e-10` relative of each other are treated as
/// degenerate: they share their mean value and are ordered by a lexicographic
/// comparison of their eigenvectors rounded to 1e-8.
pub(crate) fn sorted_eigen(a: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let eig = SymmetricEigen::new(a);
    let mut vecs: Vec<DVector<f64>> = (0..n)
        .map(|k| {
            let mut v = eig.eigenvectors.column(k).into_owned();
            let mut best = 0;
            for i in 1..n {
                if v[i].abs() > v[best].abs() * (1.0 + 1e-12) {
                    best = i;
                }
            }
            if v[best] < 0.0 {
                v.neg_mut();
            }
            v
        })
        .collect();
    let vals = eig.eigenvalues.as_slice().to_vec();
    let scale = vals.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| vals[j].total_cmp(&vals[i]));
    let rounded = |v: &DVector<f64>| -> Vec<i64> { v.iter().map(|x| (x * 1e8).round() as i64).collect() };
    let mut sorted_vals: Vec<f64> = order.iter().map(|&i| vals[i]).collect();
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && sorted_vals[end - 1] - sorted_vals[end] <= 1e-10 * scale {
            end += 1;
        }
        if end - start > 1 {
            order[start..end].sort_by(|&i, &j| rounded(&vecs[j]).cmp(&rounded(&vecs[i])));
            let mean = sorted_vals[start..end].iter().sum::<f64>() / (end - start) as f64;
            sorted_vals[start..end].iter_mut().for_each(|v| *v = mean);
        }
        start = end;
    }
    let mut m = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        m.set_column(col, &std::mem::replace(&mut vecs[i], DVector::zeros(0)));
    }
    (sorted_vals, m)
}

/// Diagonalizes the mass-weighted transverse Hessian.
pub fn solve_normal_modes(crystal: &CrystalConfig) -> Result<NormalModes> {
    let (vals, matrix) = sorted_eigen(mass_weighted_stiffness(crystal));
    if let Some((mode, &omega_sq)) = vals.iter().enumerate().find(|(_, v)| **v <= 0.0) {
        return Err(Error::Unstable { mode, omega_sq });
    }
    Ok(NormalModes {
        frequencies: vals.iter().map(|v| v.sqrt()).collect(),
        matrix,
        masses: (0..crystal.len()).map(|i| crystal.mode_mass(i)).collect(),
    })
}

/// Finds the trap stiffness k_z for which the highest mode sits at `target_com` (rad/s).
///
/// The top eigenvalue of `k_z diag(1/m) + C` is convex and increasing in k_z,
/// so Newton's method with the Hellmann-Feynman slope `v^T diag(1/m) v`
/// converges monotonically after at most one overshoot.
pub fn calibrate_trap(crystal: &CrystalConfig, target_com: f64) -> Result<f64> {
    if !(target_com > 0.0 && target_com.is_finite()) {
        return Err(Error::InvalidInput(format!("target COM frequency must be positive, got {target_com}")));
    }
    let target_sq = target_com * target_com;
    let coulomb_only = mass_weighted_stiffness(&crystal.clone().with_trap_stiffness(0.0));
    let inv_m: Vec<f64> = (0..crystal.len()).map(|i| 1.0 / crystal.mode_mass(i)).collect();
    let mean_mass = (0..crystal.len()).map(|i| crystal.mode_mass(i)).sum::<f64>() / crystal.len() as f64;

    let top = |k_z: f64| -> (f64, DVector<f64>, Vec<f64>) {
        let mut a = coulomb_only.clone();
        for (i, im) in inv_m.iter().enumerate() {
            a[(i, i)] += k_z * im;
        }
        let (vals, m) = sorted_eigen(a);
        (vals[0], m.column(0).into_owned(), vals)
    };

    let mut k_z = mean_mass * target_sq;
    for _ in 0..100 {
        let (lam, v, vals) = top(k_z);
        let resid = lam - target_sq;
        if resid.abs() <= 1e-14 * target_sq {
            let lowest = *vals.last().unwrap();
            if lowest <= 0.0 {
                return Err(Error::Calibration {
                    target: target_com,
                    reason: format!(
                        "lowest mode has omega^2 = {lowest:e} at k_z = {k_z:e} N/m; raise the target"
                    ),
                });
            }
            return Ok(k_z);
        }
        let slope: f64 = v.iter().zip(&inv_m).map(|(x, im)| x * x * im).sum();
        k_z -= resid / slope;
        if k_z <= 0.0 {
            return Err(Error::Calibration {
                target: target_com,
                reason: "required trap stiffness is not positive".into(),
            });
        }
    }
    Err(Error::Calibration { target: target_com, reason: "Newton iteration did not converge".into() })
}

/// Per-mode Lamb-Dicke parameters eta_n = k sqrt(hbar / (2 m omega_n)).
pub fn lamb_dicke(modes: &NormalModes, wavevector: f64, mass: f64) -> Vec<f64> {
    modes
        .frequencies
        .iter()
        .map(|w| wavevector * (HBAR / (2.0 * mass * w)).sqrt())
        .collect()
}

/// Wavevector that gives Lamb-Dicke parameter `eta` at frequency `omega` for `mass`.
pub fn wavevector_for_eta(eta: f64, omega: f64, mass: f64) -> f64 {
    eta / (HBAR / (2.0 * mass * omega)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consts::hz;

    const A: f64 = 10e-6;

    fn calibrated(n_sigma: usize, n_tau: usize) -> (CrystalConfig, NormalModes) {
        let c = generate_crystal(n_sigma, n_tau, A).unwrap();
        let k = calibrate_trap(&c, hz(2e6)).unwrap();
        let c = c.with_trap_stiffness(k);
        let m = solve_normal_modes(&c).unwrap();
        (c, m)
    }

    #[test]
    fn two_ion_crystal_has_one_spacing() {
        let c = generate_crystal(1, 1, A).unwrap();
        assert_eq!(c.len(), 2);
        assert!((distance(&c.positions[0], &c.positions[1]) - A).abs() < 1e-18);
        assert_eq!(c.roles, vec![Role::Coolant, Role::Spin]);
    }

    #[test]
    fn table_sizes_are_complete_hexagons() {
        for (ns, nt) in [(124, 93), (48, 43), (94, 75), (10, 9)] {
            let c = generate_crystal(ns, nt, A).unwrap();
            assert_eq!(c.len(), ns + nt);
            assert_eq!(c.n_spin(), ns);
            let r_tau = c.coolant_indices().iter().map(|&i| c.positions[i][0].hypot(c.positions[i][1])).fold(0.0, f64::max);
            let r_sigma = c.spin_indices().iter().map(|&i| c.positions[i][0].hypot(c.positions[i][1])).fold(f64::MAX, f64::min);
            assert!(r_tau <= r_sigma + 1e-15, "coolant core must be inside");
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_crystal(124, 93, A).unwrap();
        let b = generate_crystal(124, 93, A).unwrap();
        for (p, q) in a.positions.iter().zip(&b.positions) {
            assert_eq!(p[0].to_bits(), q[0].to_bits());
            assert_eq!(p[1].to_bits(), q[1].to_bits());
        }
    }

    #[test]
    fn rejects_missing_species_and_bad_spacing() {
        assert!(generate_crystal(0, 3, A).is_err());
        assert!(generate_crystal(3, 0, A).is_err());
        assert!(generate_crystal(3, 3, -1.0).is_err());
        assert!(generate_crystal(3, 3, f64::NAN).is_err());
    }

    #[test]
    fn two_equal_ions_match_analytic_modes() {
        let m = 25.0 * ATOMIC_MASS_UNIT;
        let sp = IonSpecies::mg25();
        let co = IonSpecies { role: Role::Coolant, ..sp };
        let c = generate_crystal_with(1, 1, A, co, sp).unwrap();
        let k_z = 1e-10;
        let modes = solve_normal_modes(&c.clone().with_trap_stiffness(k_z)).unwrap();
        let cc = COULOMB_K * ELEMENTARY_CHARGE.powi(2) / A.powi(3);
        assert!((modes.frequencies[0] - (k_z / m).sqrt()).abs() < 1e-9 * modes.frequencies[0]);
        assert!((modes.frequencies[1] - ((k_z - 2.0 * cc) / m).sqrt()).abs() < 1e-9 * modes.frequencies[1]);
    }

    #[test]
    fn equal_mass_calibration_is_exact() {
        let sp = IonSpecies::mg25();
        let co = IonSpecies { role: Role::Coolant, ..sp };
        let c = generate_crystal_with(1, 1, A, co, sp).unwrap();
        let w = hz(2e6);
        let k = calibrate_trap(&c, w).unwrap();
        assert!((k - sp.mass * w * w).abs() < 1e-12 * k);
    }

    #[test]
    fn calibration_hits_target() {
        let (_, modes) = calibrated(124, 93);
        assert!((modes.com_frequency() / hz(2e6) - 1.0).abs() < 1e-9);
        assert!(modes.orthonormality_error() < 1e-10);
        let com = modes.matrix.column(0);
        assert!(com.iter().all(|x| *x > 0.0), "highest mode must be COM-like");
    }

    #[test]
    fn calibration_below_instability_fails() {
        let c = generate_crystal(4, 3, A).unwrap();
        // Brute-force scan for the stability threshold of the lowest mode.
        let mut k = 1e-12;
        let threshold_com = loop {
            let modes = solve_normal_modes(&c.clone().with_trap_stiffness(k));
            if let Ok(m) = modes {
                break m.com_frequency();
            }
            k *= 1.01;
        };
        assert!(calibrate_trap(&c, threshold_com * 0.9).is_err());
        assert!(calibrate_trap(&c, threshold_com * 1.1).is_ok());
    }

    #[test]
    fn decomposition_residual_is_small() {
        let (c, modes) = calibrated(10, 9);
        let a = mass_weighted_stiffness(&c);
        let w2 = DMatrix::from_diagonal(&DVector::from_iterator(
            modes.len(),
            modes.frequencies.iter().map(|w| w * w),
        ));
        let resid = &a * &modes.matrix - &modes.matrix * w2;
        assert!(resid.norm() < 1e-9 * a.norm());
        for pair in modes.frequencies.windows(2) {
            assert!(pair[0] >= pair[1]);
        }
    }

    #[test]
    fn hessian_matches_finite_differences() {
        // 7-ion hexagon plus center, full 3D Coulomb energy differentiated numerically.
        let c = generate_crystal(6, 1, A).unwrap().with_trap_stiffness(1e-9);
        let n = c.len();
        let energy = |z: &[f64]| -> f64 {
            let mut e = 0.0;
            for i in 0..n {
                e += 0.5 * c.trap_stiffness * z[i] * z[i];
                for j in i + 1..n {
                    let dx = c.positions[i][0] - c.positions[j][0];
                    let dy = c.positions[i][1] - c.positions[j][1];
                    let dz = z[i] - z[j];
                    e += COULOMB_K * ELEMENTARY_CHARGE.powi(2) / (dx * dx + dy * dy + dz * dz).sqrt();
                }
            }
            e
        };
        let h = 1e-3 * A;
        let k = stiffness_matrix(&c);
        for i in 0..n {
            for j in 0..n {
                let mut z = vec![0.0; n];
                let mut f = |si: f64, sj: f64| {
                    z.iter_mut().for_each(|x| *x = 0.0);
                    z[i] += si * h;
                    z[j] += sj * h;
                    energy(&z)
                };
                let fd = (f(1.0, 1.0) - f(1.0, -1.0) - f(-1.0, 1.0) + f(-1.0, -1.0)) / (4.0 * h * h);
                let scale = k[(i, i)].abs().max(1e-12);
                assert!((fd - k[(i, j)]).abs() < 1e-4 * scale, "({i},{j}) fd {fd} vs {}", k[(i, j)]);
            }
        }
    }

    #[test]
    fn uniform_vector_is_exact_eigenvector_for_equal_masses() {
        let sp = IonSpecies::mg25();
        let co = IonSpecies { role: Role::Coolant, ..sp };
        let c = generate_crystal_with(12, 7, A, co, sp).unwrap().with_trap_stiffness(1e-9);
        let a = mass_weighted_stiffness(&c);
        let u = DVector::from_element(c.len(), 1.0);
        let r = &a * &u - &u * (c.trap_stiffness / sp.mass);
        assert!(r.amax() < 1e-12 * a.amax());
        let k = stiffness_matrix(&c);
        for i in 0..c.len() {
            for j in 0..c.len() {
                if i != j {
                    assert!(k[(i, j)] > 0.0);
                }
            }
        }
    }

    #[test]
    fn weighting_controls_top_mode_shape() {
        let base = generate_crystal(124, 93, A).unwrap();
        let tau_share = |c: CrystalConfig| {
            let k = calibrate_trap(&c, hz(2e6)).unwrap();
            let c = c.with_trap_stiffness(k);
            let m = solve_normal_modes(&c).unwrap();
            c.coolant_indices().iter().map(|&i| m.matrix[(i, 0)].powi(2)).sum::<f64>()
        };
        let uniform = tau_share(base.clone().with_weighting(ModeWeighting::PotentialEnergy));
        assert!((uniform - 93.0 / 217.0).abs() < 1e-10);
        let species = tau_share(base.with_weighting(ModeWeighting::Species));
        assert!(species > uniform + 0.05, "lighter core should dominate the top mode");
    }

    #[test]
    fn lamb_dicke_table_value_and_scaling() {
        let (c, modes) = calibrated(124, 93);
        let k = wavevector_for_eta(0.1, modes.com_frequency(), c.spin.mass);
        let eta = lamb_dicke(&modes, k, c.spin.mass);
        assert!((eta[0] - 0.1).abs() < 1e-12);
        let eta2 = lamb_dicke(&modes, 2.0 * k, c.spin.mass);
        for (a, b) in eta.iter().zip(&eta2) {
            assert!((b - 2.0 * a).abs() < 1e-15);
        }
        for pair in eta.windows(2) {
            assert!(pair[1] >= pair[0]);
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let (_, modes) = calibrated(1, 1);
        let mut buf = Vec::new();
        modes.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = s.lines().collect();
        assert_eq!(lines[0], "mode,freq_hz,p0,p1");
        assert_eq!(lines.len(), 3);
    }
}
