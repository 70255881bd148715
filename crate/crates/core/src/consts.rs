//! CODATA 2018 constants in SI units.

pub const HBAR: f64 = 1.054_571_817e-34;
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
/// Coulomb constant 1/(4 pi epsilon_0), N m^2 / C^2.
pub const COULOMB_K: f64 = 8.987_551_792_3e9;
pub const ATOMIC_MASS_UNIT: f64 = 1.660_539_066_60e-27;

pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Converts a frequency in Hz (the "2 pi x Hz" convention) to rad/s.
pub fn hz(f: f64) -> f64 {
    TWO_PI * f
}

/// Converts rad/s to Hz.
pub fn to_hz(omega: f64) -> f64 {
    omega / TWO_PI
}
