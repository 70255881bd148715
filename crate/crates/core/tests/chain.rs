use ionsync::consts::{hz, TWO_PI};
use ionsync::cooling::{mode_damping, CoolingLaser};
use ionsync::crystal::{calibrate_trap, generate_crystal, lamb_dicke, solve_normal_modes, wavevector_for_eta};
use ionsync::exact::{build_dense, evolve_dense, ground_state_dense, rotate_x_dense, steady_state_dense};
use ionsync::langevin::{integrate, IntegrateOptions, InitialState};
use ionsync::raman::{effective_params, spin_phonon_couplings, RamanConfig};
use ionsync::ramsey::{run_ramsey, Engine, RamseyConfig};
use ionsync::spinspin::{build_model, BuildOptions, SpinSpinModel};
use ionsync::C64;

fn chain(n_sigma: usize, n_tau: usize, com_only: bool) -> SpinSpinModel {
    let c = generate_crystal(n_sigma, n_tau, 10e-6).unwrap();
    let k = calibrate_trap(&c, hz(2e6)).unwrap();
    let c = c.with_trap_stiffness(k);
    let modes = solve_normal_modes(&c).unwrap();
    let g = hz(41.4e6);
    let laser = CoolingLaser { linewidth: g, detuning: -g / 2.0, rabi: hz(10e6), wavelength: 280.3e-9, emission_anisotropy: 0.4 };
    let damping = mode_damping(&modes, &laser, &c.coolant_indices(), c.coolant.mass).unwrap();
    let raman = RamanConfig {
        g1: C64::from(hz(44.7e6)),
        g2: C64::from(hz(44.7e6)),
        delta1: hz(230e9),
        delta2: hz(230e9),
        gamma1: hz(27.27e6),
        gamma2: hz(13.63e6),
        k_sigma: wavevector_for_eta(0.1, modes.com_frequency(), c.spin.mass),
    }
    .with_detunings(hz(230e9), -damping.shifted[0])
    .unwrap();
    let p = effective_params(&raman).unwrap();
    let eta = lamb_dicke(&modes, raman.k_sigma, c.spin.mass);
    let f = spin_phonon_couplings(&p, &modes, &c.spin_indices(), &eta).unwrap();
    build_model(&f, &damping, p.delta_r, 0.0, 0.0, &p, BuildOptions { com_only }).unwrap()
}

#[test]
fn small_crystal_chain_is_physical() {
    let m = chain(12, 7, false);
    assert_eq!(m.n_spins(), 12);
    assert!(m.gamma_c > 0.0);
    assert!(m.hermiticity_error() < 1e-12 * m.gamma_minus.norm());
    let (a, b) = m.psd_margins();
    assert!(a > -1e-12 && b > -1e-12);
    assert!(m.max_imag() < 1e-9 * m.gamma_minus.norm());
    // The near-resonant COM mode carries almost all of the collective rate.
    let com = chain(12, 7, true);
    assert!((com.gamma_c / m.gamma_c - 1.0).abs() < 0.02, "{} vs {}", com.gamma_c, m.gamma_c);
}

#[test]
fn collective_rate_falls_with_size() {
    let small = chain(12, 7, true).gamma_c;
    let large = chain(48, 43, true).gamma_c;
    assert!(large < small);
    assert!(large / TWO_PI > 0.05 && large / TWO_PI < 5.0);
}

#[test]
fn exact_engines_agree_on_ramsey() {
    let m = SpinSpinModel::minimal(4, 1.0, 1.5, 2.0).with_single_spin_rates(0.2, 0.0, 0.1);
    let cfg = RamseyConfig { t_final: 4.0, sample_interval: 0.02, ..Default::default() };
    let a = run_ramsey(Engine::Minimal, &m, &cfg).unwrap();
    let b = run_ramsey(Engine::Dense, &m, &cfg).unwrap();
    for (x, y) in a.envelope.iter().zip(&b.envelope) {
        assert!((x - y).abs() < 1e-8);
    }
    assert!((a.normalized_variance - b.normalized_variance).abs() < 1e-8);
    let (fa, fb) = (a.fit.unwrap(), b.fit.unwrap());
    assert!((fa.rate - fb.rate).abs() < 1e-6 * fa.rate);
}

#[test]
fn langevin_follows_dense_relaxation() {
    let m = SpinSpinModel::minimal(5, 1.0, 0.5, 2.5).with_single_spin_rates(0.3, 0.1, 0.2);
    let l = build_dense(&m).unwrap();
    let rho0 = rotate_x_dense(&ground_state_dense(5), std::f64::consts::FRAC_PI_2);
    let (exact, _) = evolve_dense(&l, &rho0, 3.0, 0.5, None).unwrap();
    let opts = IntegrateOptions {
        dt: 0.005,
        t_final: 3.0,
        sample_every: 100,
        n_traj: 3000,
        seed: 5,
        initial: InitialState::Equator,
        ..Default::default()
    };
    let e = integrate(&m, &opts).unwrap();
    let (sz, se) = e.series("sz");
    for (k, o) in exact.values.iter().enumerate() {
        assert!((sz[k] - o.sz).abs() < 4.0 * se[k] + 1e-3, "t = {}: {} vs {}", e.times[k], sz[k], o.sz);
    }
    let ss = steady_state_dense(&l).unwrap().observables;
    assert!((exact.values.last().unwrap().sz - ss.sz).abs() < 0.05);
}
