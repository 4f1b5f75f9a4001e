mod common;

use std::f64::consts::PI;

use bethe_cs::denoiser::scalar_posterior;
use bethe_cs::harness::{cells_to_csv, parse_grid, run_sweep, SweepSpec, CSV_HEADER};
use bethe_cs::linalg::Matrix;
use bethe_cs::oracle::{exact_posterior_oracle, MAX_ORACLE_N};
use bethe_cs::{generate_instance, mse, solve, Algorithm, Instance, MatrixScaling, SolverConfig};
use common::{integrate, linspace, logspace, prior};

fn one_by_one(f: f64, y: f64, delta: f64, rho: f64) -> Instance {
    Instance::new(
        Matrix::from_rows(&[vec![f]]).unwrap(),
        vec![y],
        None,
        delta,
        prior(rho),
        MatrixScaling::OneOverN,
    )
    .unwrap()
}

#[test]
fn scalar_oracle_is_the_denoiser() {
    for &rho in &[0.05, 0.3, 0.7, 1.0] {
        for &delta in &logspace(-4.0, 1.0, 6) {
            for &y in &linspace(-5.0, 5.0, 11) {
                for &f in &[1.0, 0.4, -2.5] {
                    let got = exact_posterior_oracle(&one_by_one(f, y, delta, rho)).unwrap();
                    let want = scalar_posterior(&prior(rho), y / f, delta / (f * f)).unwrap();
                    assert!(
                        (got.a[0] - want.mean).abs() <= 1e-12 * want.mean.abs().max(1.0),
                        "ρ {rho} Δ {delta} y {y} f {f}: {} vs {}",
                        got.a[0],
                        want.mean
                    );
                    assert!((got.c[0] - want.var).abs() <= 1e-12 * want.var.max(1.0));
                }
            }
        }
    }
}

#[test]
fn spike_oracle_is_zero() {
    let inst = generate_instance(8, 5, prior(0.0), 0.1, MatrixScaling::OneOverN, 0).unwrap();
    let m = exact_posterior_oracle(&inst).unwrap();
    assert!(m.a.iter().chain(&m.c).all(|v| *v == 0.0));
}

#[test]
fn oracle_refuses_large_problems() {
    let inst = generate_instance(MAX_ORACLE_N + 1, 5, prior(0.2), 0.1, MatrixScaling::OneOverN, 0).unwrap();
    assert!(exact_posterior_oracle(&inst).is_err());
}

// Two coefficients: each posterior term is either a point mass at zero or a
// slab integral, done here by nested quadrature instead of linear algebra.
fn two_coefficient_moments(inst: &Instance) -> ([f64; 2], [f64; 2]) {
    let rho = inst.prior().rho;
    let delta = inst.delta0();
    let f = inst.f();
    let y = inst.y();
    let lik = |x0: f64, x1: f64| -> f64 {
        let s: f64 = (0..inst.m())
            .map(|mu| (y[mu] - f.get(mu, 0) * x0 - f.get(mu, 1) * x1).powi(2))
            .sum();
        (-0.5 * s / delta).exp()
    };
    let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    let lim = 9.0;
    let one = |g: &dyn Fn(f64) -> f64| integrate(&|x| phi(x) * g(x), -lim, lim, &[0.0], 1e-13);
    let two = |g: &dyn Fn(f64, f64) -> f64| integrate(&|x0| phi(x0) * one(&|x1| g(x0, x1)), -lim, lim, &[0.0], 1e-12);
    let (w00, w10, w01, w11) = ((1.0 - rho).powi(2), rho * (1.0 - rho), (1.0 - rho) * rho, rho * rho);
    let z = w00 * lik(0.0, 0.0) + w10 * one(&|x| lik(x, 0.0)) + w01 * one(&|x| lik(0.0, x)) + w11 * two(&lik);
    let m0 = (w10 * one(&|x| x * lik(x, 0.0)) + w11 * two(&|a, b| a * lik(a, b))) / z;
    let m1 = (w01 * one(&|x| x * lik(0.0, x)) + w11 * two(&|a, b| b * lik(a, b))) / z;
    let s0 = (w10 * one(&|x| x * x * lik(x, 0.0)) + w11 * two(&|a, b| a * a * lik(a, b))) / z;
    let s1 = (w01 * one(&|x| x * x * lik(0.0, x)) + w11 * two(&|a, b| b * b * lik(a, b))) / z;
    ([m0, m1], [s0 - m0 * m0, s1 - m1 * m1])
}

#[test]
fn oracle_agrees_with_direct_integration() {
    for (seed, m) in [(1, 1), (2, 2), (3, 3)] {
        let inst = generate_instance(2, m, prior(0.4), 0.3, MatrixScaling::UnitVariance, seed).unwrap();
        let got = exact_posterior_oracle(&inst).unwrap();
        let (a, c) = two_coefficient_moments(&inst);
        for i in 0..2 {
            assert!(
                (got.a[i] - a[i]).abs() <= 1e-8,
                "seed {seed}: mean {} vs {}",
                got.a[i],
                a[i]
            );
            assert!(
                (got.c[i] - c[i]).abs() <= 1e-8,
                "seed {seed}: var {} vs {}",
                got.c[i],
                c[i]
            );
        }
    }
}

#[test]
fn message_passing_close_to_exact_posterior_on_small_problem() {
    // Diagnostic only: at N = 10 the Bethe approximation is not exact, but
    // the AMP estimate should sit near the exact posterior mean.
    let mut gaps = Vec::new();
    for seed in 0..5 {
        let inst = generate_instance(10, 6, prior(0.2), 0.05, MatrixScaling::OneOverN, seed).unwrap();
        let exact = exact_posterior_oracle(&inst).unwrap();
        let mut cfg = SolverConfig::new(Algorithm::AmpDamped);
        cfg.max_iter = 500;
        let rep = solve(&inst, &cfg).unwrap();
        let gap = mse(&rep.a_final, &exact.a).unwrap();
        let oracle_mse = mse(&exact.a, inst.x_true().unwrap()).unwrap();
        eprintln!("seed {seed}: ‖a_amp − a_exact‖²/N = {gap:.3e}, exact-posterior MSE = {oracle_mse:.3e}");
        assert!(exact.c.iter().all(|v| *v >= 0.0));
        gaps.push(gap);
    }
    gaps.sort_by(f64::total_cmp);
    assert!(gaps[2] < 0.1, "median gap {}", gaps[2]);
}

fn spec(rho: &str, alpha: &str, algo: Algorithm) -> SweepSpec {
    let mut s = SweepSpec::new(
        parse_grid(rho).unwrap(),
        parse_grid(alpha).unwrap(),
        SolverConfig::new(algo),
    );
    s.n = 64;
    s.trials = 4;
    s
}

#[test]
fn sweep_grid_shape_and_csv() {
    let s = spec("0.1,0.2", "0.5:0.7:0.1", Algorithm::Amp);
    let cells = run_sweep(&s).unwrap();
    assert_eq!(cells.len(), 6);
    assert_eq!((cells[0].rho, cells[0].alpha), (0.1, 0.5));
    assert_eq!((cells[1].rho, cells[1].alpha), (0.1, 0.6));
    assert_eq!((cells[5].rho, cells[5].alpha), (0.2, 0.7));
    let csv = cells_to_csv(&cells, Algorithm::Amp);
    assert!(!csv.contains('\r'));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 7);
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 8);
        assert_eq!(fields[2], "4");
        assert_eq!(fields[7], "amp");
        for v in &fields[..7] {
            v.parse::<f64>().unwrap();
        }
    }
}

#[test]
fn empty_signal_always_recovered() {
    for algo in [Algorithm::MfSeq, Algorithm::Amp, Algorithm::MinimizeBethe] {
        let cells = run_sweep(&spec("0", "0.2,0.6", algo)).unwrap();
        for c in cells {
            assert_eq!(c.success_rate, 1.0, "{algo}");
            assert_eq!(c.divergence_rate, 0.0);
        }
    }
}

#[test]
fn square_systems_recovered_by_bethe_minimization() {
    let cells = run_sweep(&spec("0.2", "1", Algorithm::MinimizeBethe)).unwrap();
    assert_eq!(cells[0].success_rate, 1.0);
}

#[test]
fn sweep_independent_of_worker_count() {
    let mut s = spec("0.1,0.3", "0.4,0.8", Algorithm::MfLearn);
    let serial = cells_to_csv(&run_sweep(&s).unwrap(), Algorithm::MfLearn);
    s.workers = 3;
    let parallel = cells_to_csv(&run_sweep(&s).unwrap(), Algorithm::MfLearn);
    assert_eq!(serial, parallel);
    s.seed = 1;
    assert_ne!(serial, cells_to_csv(&run_sweep(&s).unwrap(), Algorithm::MfLearn));
}

#[test]
fn sweep_rejects_bad_grids() {
    assert!(run_sweep(&spec("1.5", "0.5", Algorithm::Amp)).is_err());
    assert!(run_sweep(&spec("0.1", "0", Algorithm::Amp)).is_err());
    assert!(parse_grid("0.1:0.2").is_err());
    assert!(parse_grid("a,b").is_err());
}
