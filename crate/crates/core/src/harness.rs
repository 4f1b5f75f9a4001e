//! Phase-diagram sweeps over `(ρ, α)` and a self-check suite.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::ScalarDenoiser;
use crate::error::{Error, Result};
use crate::free_energy::{bethe_energy, mf_energy, EnergyReport};
use crate::linalg::max_abs_diff;
use crate::model::{generate_instance, Instance, MatrixScaling, OutputChannel, PriorParams, VarParams};
use crate::solvers::{ist_step, mf_parallel_step, solve, solve_amp, solve_gamp, Algorithm, SolverConfig};

pub const CSV_HEADER: &str = "rho,alpha,trials,success_rate,median_mse,mean_iters,divergence_rate,algo";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub rho_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
    pub n: usize,
    pub delta0: f64,
    pub trials: usize,
    pub algo: SolverConfig,
    pub success_mse: f64,
    pub workers: usize,
    pub seed: u64,
    pub scaling: MatrixScaling,
}

impl SweepSpec {
    pub fn new(rho_grid: Vec<f64>, alpha_grid: Vec<f64>, algo: SolverConfig) -> Self {
        SweepSpec {
            rho_grid,
            alpha_grid,
            n: 256,
            delta0: 1e-8,
            trials: 10,
            algo,
            success_mse: 1e-6,
            workers: 1,
            seed: 0,
            scaling: MatrixScaling::UnitVariance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rho_grid.is_empty() || self.alpha_grid.is_empty() {
            return Err(Error::param("rho and alpha grids must be non-empty"));
        }
        if let Some(r) = self.rho_grid.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::param(format!("rho = {r} outside [0, 1]")));
        }
        if let Some(a) = self.alpha_grid.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return Err(Error::param(format!("alpha = {a} outside (0, 1]")));
        }
        if self.trials == 0 || self.n == 0 {
            return Err(Error::param("trials and n must be at least 1"));
        }
        if self.workers == 0 {
            return Err(Error::param("workers must be at least 1"));
        }
        if !(self.delta0 > 0.0) || !(self.success_mse > 0.0) {
            return Err(Error::param("delta0 and success_mse must be positive"));
        }
        self.algo.validate()
    }

    pub fn measurements(&self, alpha: f64) -> usize {
        ((alpha * self.n as f64).round() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseCell {
    pub rho: f64,
    pub alpha: f64,
    pub trials: usize,
    pub success_rate: f64,
    pub median_mse: f64,
    pub mean_iters: f64,
    pub divergence_rate: f64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of one trial: SplitMix64 folded over
/// `(master, ρ index, α index, trial index)`, so a cell can be reproduced
/// without running the rest of the grid.
pub fn trial_seed(master: u64, rho_idx: usize, alpha_idx: usize, trial_idx: usize) -> u64 {
    [rho_idx as u64, alpha_idx as u64, trial_idx as u64]
        .iter()
        .fold(splitmix64(master), |h, &k| splitmix64(h ^ k))
}

struct Outcome {
    mse: Option<f64>,
    iterations: usize,
    failed: bool,
}

fn run_trial(spec: &SweepSpec, ri: usize, ai: usize, ti: usize) -> Outcome {
    let rho = spec.rho_grid[ri];
    let m = spec.measurements(spec.alpha_grid[ai]);
    let seed = trial_seed(spec.seed, ri, ai, ti);
    let result = PriorParams::new(rho)
        .and_then(|prior| generate_instance(spec.n, m, prior, spec.delta0, spec.scaling, seed))
        .and_then(|inst| solve(&inst, &spec.algo));
    match result {
        Ok(rep) => Outcome {
            mse: rep.mse_final.filter(|v| v.is_finite()),
            iterations: rep.iterations,
            failed: rep.diverged,
        },
        Err(e) => {
            log::debug!("rho={rho} m={m} trial {ti}: {e}");
            Outcome {
                mse: None,
                iterations: 0,
                failed: true,
            }
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let k = xs.len();
    if k % 2 == 1 {
        xs[k / 2]
    } else {
        0.5 * (xs[k / 2 - 1] + xs[k / 2])
    }
}

/// Runs every trial of every cell. Cells are returned row-major in
/// `(ρ, α)`; results do not depend on the number of workers.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<PhaseCell>> {
    spec.validate()?;
    let (nr, na, nt) = (spec.rho_grid.len(), spec.alpha_grid.len(), spec.trials);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers)
        .build()
        .map_err(|e| Error::param(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<Outcome> = pool.install(|| {
        (0..nr * na * nt)
            .into_par_iter()
            .map(|k| run_trial(spec, k / (na * nt), (k / nt) % na, k % nt))
            .collect()
    });

    let cells = outcomes
        .chunks(nt)
        .enumerate()
        .map(|(cell, trials)| {
            let successes = trials
                .iter()
                .filter(|o| !o.failed && o.mse.is_some_and(|v| v <= spec.success_mse))
                .count();
            let failures = trials.iter().filter(|o| o.failed).count();
            PhaseCell {
                rho: spec.rho_grid[cell / na],
                alpha: spec.alpha_grid[cell % na],
                trials: nt,
                success_rate: successes as f64 / nt as f64,
                median_mse: median(trials.iter().filter_map(|o| o.mse).collect()),
                mean_iters: trials.iter().map(|o| o.iterations as f64).sum::<f64>() / nt as f64,
                divergence_rate: failures as f64 / nt as f64,
            }
        })
        .collect();
    Ok(cells)
}

/// CSV rendering of a sweep, LF line endings.
pub fn cells_to_csv(cells: &[PhaseCell], algo: Algorithm) -> String {
    let mut out = String::with_capacity(64 * (cells.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{:e},{},{},{}",
            c.rho, c.alpha, c.trials, c.success_rate, c.median_mse, c.mean_iters, c.divergence_rate, algo
        );
    }
    out
}

/// Parses a grid given as `start:stop:step` (both ends inclusive), a
/// comma-separated list, or a single number.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let num = |t: &str| {
        t.trim()
            .parse::<f64>()
            .map_err(|_| Error::param(format!("'{t}' is not a number in grid '{s}'")))
    };
    let parts: Vec<&str> = s.split(':').collect();
    match parts.len() {
        1 => s.split(',').map(num).collect(),
        3 => {
            let (start, stop, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
            if !(step > 0.0) || stop < start {
                return Err(Error::param(format!("range '{s}' needs step > 0 and stop ≥ start")));
            }
            let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
            // Rounded to 12 decimals so 0.1:0.3:0.1 yields 0.3, not 0.30000000000000004.
            Ok((0..count)
                .map(|k| ((start + k as f64 * step) * 1e12).round() / 1e12)
                .collect())
        }
        _ => Err(Error::param(format!(
            "cannot parse grid '{s}' (use start:stop:step or a,b,c)"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random_params(rng: &mut rand_chacha::ChaCha8Rng, n: usize, delta: f64) -> VarParams {
    use rand::Rng;
    VarParams {
        r: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
        sigma2: (0..n).map(|_| 10f64.powf(rng.random_range(-2.0..1.0))).collect(),
        delta,
    }
}

/// Largest normwise relative error between the analytic gradient in
/// `(R, log Σ²)` and central differences.
fn gradient_error(energy: &dyn Fn(&VarParams) -> Result<EnergyReport>, p: &VarParams) -> Result<f64> {
    let h = 1e-6;
    let rep = energy(p)?;
    let n = p.r.len();
    let mut worst: f64 = 0.0;
    for (analytic, block) in [(&rep.grad_r, 0), (&rep.grad_log_sigma2, 1)] {
        let mut fd = Vec::with_capacity(n);
        for i in 0..n {
            let shift = |sign: f64| -> Result<f64> {
                let mut q = p.clone();
                if block == 0 {
                    q.r[i] += sign * h;
                } else {
                    q.sigma2[i] *= (sign * h).exp();
                }
                Ok(energy(&q)?.value)
            };
            fd.push((shift(1.0)? - shift(-1.0)?) / (2.0 * h));
        }
        let norm = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
        let diff = analytic
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(diff / norm);
    }
    Ok(worst)
}

/// Quick property suite: energy gradients, the bound chain, the
/// parallel-mean-field/thresholding equivalence and the GAMP/AMP identity.
pub fn run_checks(seed: u64) -> Result<Vec<CheckResult>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let prior = PriorParams::new(0.3)?;
    let mut out = Vec::new();

    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let inst = generate_instance(8, 4, prior, 0.05, MatrixScaling::OneOverN, seed.wrapping_add(k))?;
        let delta = rng.random_range(0.02..0.5);
        let p = random_params(&mut rng, 8, delta);
        worst = worst
            .max(gradient_error(&|q| mf_energy(&inst, q), &p)?)
            .max(gradient_error(&|q| bethe_energy(&inst, q), &p)?);
    }
    out.push(CheckResult {
        name: "energy gradients",
        passed: worst <= 1e-5,
        detail: format!("max relative error {worst:.2e}"),
    });

    let mut violations = 0;
    let draws = 1000;
    for k in 0..draws {
        let inst = generate_instance(10, 6, prior, 0.01, MatrixScaling::OneOverN, seed.wrapping_add(k))?;
        let delta = 10f64.powf(rng.random_range(-3.0..0.0));
        let p = random_params(&mut rng, 10, delta);
        let mf = mf_energy(&inst, &p)?.value;
        let bethe = bethe_energy(&inst, &p)?.value;
        let floor = 0.5 * inst.m() as f64 * (2.0 * std::f64::consts::PI * delta).ln();
        let slack = 1e-12 * (1.0 + mf.abs());
        if !(floor <= bethe + slack && bethe <= mf + slack) {
            violations += 1;
        }
    }
    out.push(CheckResult {
        name: "bound chain",
        passed: violations == 0,
        detail: format!("{violations} violations in {draws} draws"),
    });

    // Parallel updates are only stable for strong shrinkage, hence Δ = 1
    // and M = 3N.
    let mut dev: f64 = 0.0;
    for k in 0..5 {
        let inst = generate_instance(40, 120, prior, 0.01, MatrixScaling::OneOverN, seed.wrapping_add(k))?
            .with_normalized_columns()?;
        let (mut a_mf, mut a_ist) = (vec![0.0; 40], vec![0.0; 40]);
        for _ in 0..50 {
            a_mf = mf_parallel_step(&inst, &a_mf, 1.0)?.0.a;
            a_ist = ist_step(&inst, &a_ist, 1.0)?;
            dev = dev.max(max_abs_diff(&a_mf, &a_ist));
        }
    }
    out.push(CheckResult {
        name: "parallel mean field = thresholding",
        passed: dev <= 1e-12,
        detail: format!("max deviation {dev:.2e}"),
    });

    let inst: Instance = generate_instance(200, 120, PriorParams::new(0.1)?, 1e-4, MatrixScaling::OneOverN, seed)?;
    let mut cfg = SolverConfig::new(Algorithm::Amp);
    cfg.max_iter = 50;
    let amp = solve_amp(&inst, &cfg)?;
    let gamp = solve_gamp(&inst, &OutputChannel::awgn(inst.delta0())?, &cfg)?;
    let gap = max_abs_diff(&amp.a_final, &gamp.a_final);
    out.push(CheckResult {
        name: "GAMP = AMP for Gaussian noise",
        passed: gap <= 1e-10,
        detail: format!("max deviation {gap:.2e}"),
    });

    let post = prior.posterior(0.7, 0.2);
    out.push(CheckResult {
        name: "denoiser finite",
        passed: post.mean.is_finite() && post.var >= 0.0 && post.log_z.is_finite(),
        detail: format!("f_a(0.7, 0.2) = {:.6}", post.mean),
    });
    Ok(out)
}
