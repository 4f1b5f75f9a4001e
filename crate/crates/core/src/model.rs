//! Problem definition: the Gauss-Bernoulli prior, measurement instances,
//! variational parameters and output channels shared by every solver.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::quadrature::GaussHermite;

/// Gauss-Bernoulli prior `ρ·N(mean, var) + (1−ρ)·δ(x)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    pub rho: f64,
    pub gaussian_mean: f64,
    pub gaussian_var: f64,
}

impl PriorParams {
    /// Prior with the standard `N(0, 1)` slab.
    pub fn new(rho: f64) -> Result<Self> {
        let p = PriorParams {
            rho,
            gaussian_mean: 0.0,
            gaussian_var: 1.0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::param(format!("rho = {} outside [0, 1]", self.rho)));
        }
        if !(self.gaussian_var > 0.0 && self.gaussian_var.is_finite()) {
            return Err(Error::param(format!(
                "gaussian_var = {} must be positive",
                self.gaussian_var
            )));
        }
        if self.gaussian_mean != 0.0 {
            return Err(Error::param("only a zero-mean slab is supported"));
        }
        Ok(())
    }

    /// Second moment of the prior, `ρ·var`.
    pub fn second_moment(&self) -> f64 {
        self.rho * self.gaussian_var
    }
}

/// Variance convention for the entries of a generated measurement matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixScaling {
    /// Entries `N(0, 1)`.
    UnitVariance,
    /// Entries `N(0, 1/N)`.
    #[default]
    OneOverN,
}

impl MatrixScaling {
    fn entry_variance(self, n: usize) -> f64 {
        match self {
            MatrixScaling::UnitVariance => 1.0,
            MatrixScaling::OneOverN => 1.0 / n as f64,
        }
    }
}

/// A compressed-sensing problem `y = F x + ξ`, `ξ ~ N(0, Δ₀ I)`.
///
/// Immutable after construction. Besides `F` it caches `Fᵀ`, the
/// element-wise square `F²` and the column sums `Σ_μ F²_{μi}`.
#[derive(Clone, Debug)]
pub struct Instance {
    f: Matrix,
    ft: Matrix,
    f_sq: Matrix,
    col_sq: Vec<f64>,
    y: Vec<f64>,
    x_true: Option<Vec<f64>>,
    delta0: f64,
    prior: PriorParams,
    scaling: MatrixScaling,
    seed: Option<u64>,
}

impl Instance {
    pub fn new(
        f: Matrix,
        y: Vec<f64>,
        x_true: Option<Vec<f64>>,
        delta0: f64,
        prior: PriorParams,
        scaling: MatrixScaling,
    ) -> Result<Self> {
        prior.validate()?;
        if f.rows() == 0 || f.cols() == 0 {
            return Err(Error::param("measurement matrix must be non-empty"));
        }
        if y.len() != f.rows() {
            return Err(Error::param(format!(
                "y has length {} but F has {} rows",
                y.len(),
                f.rows()
            )));
        }
        if let Some(x) = &x_true {
            if x.len() != f.cols() {
                return Err(Error::param(format!(
                    "x_true has length {} but F has {} columns",
                    x.len(),
                    f.cols()
                )));
            }
        }
        if !(delta0 > 0.0 && delta0.is_finite()) {
            return Err(Error::param(format!("delta0 = {delta0} must be positive")));
        }
        if f.as_slice().iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::param("F and y must be finite"));
        }
        let ft = f.transpose();
        let f_sq = f.squared();
        let col_sq = f_sq.column_sums();
        Ok(Instance {
            f,
            ft,
            f_sq,
            col_sq,
            y,
            x_true,
            delta0,
            prior,
            scaling,
            seed: None,
        })
    }

    /// Number of unknowns `N`.
    pub fn n(&self) -> usize {
        self.f.cols()
    }

    /// Number of measurements `M`.
    pub fn m(&self) -> usize {
        self.f.rows()
    }

    pub fn alpha(&self) -> f64 {
        self.m() as f64 / self.n() as f64
    }

    pub fn f(&self) -> &Matrix {
        &self.f
    }

    pub fn ft(&self) -> &Matrix {
        &self.ft
    }

    /// Element-wise square of `F`.
    pub fn f_sq(&self) -> &Matrix {
        &self.f_sq
    }

    /// `Σ_μ F²_{μi}` for every column `i`.
    pub fn col_sq(&self) -> &[f64] {
        &self.col_sq
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x_true(&self) -> Option<&[f64]> {
        self.x_true.as_deref()
    }

    pub fn delta0(&self) -> f64 {
        self.delta0
    }

    pub fn prior(&self) -> &PriorParams {
        &self.prior
    }

    pub fn scaling(&self) -> MatrixScaling {
        self.scaling
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// `y − F a`
    pub fn residual(&self, a: &[f64]) -> Vec<f64> {
        self.f.mul_vec(a).into_iter().zip(&self.y).map(|(p, y)| y - p).collect()
    }

    /// Copy of the instance with every column of `F` rescaled to unit norm.
    ///
    /// The ground truth is rescaled accordingly so that `y` is unchanged.
    pub fn with_normalized_columns(&self) -> Result<Instance> {
        if self.col_sq.iter().any(|&d| d <= 0.0) {
            return Err(Error::param("cannot normalize a zero column"));
        }
        let inv: Vec<f64> = self.col_sq.iter().map(|d| 1.0 / d.sqrt()).collect();
        let f = self.f.scale_columns(&inv);
        let x_true = self
            .x_true
            .as_ref()
            .map(|x| x.iter().zip(&self.col_sq).map(|(v, d)| v * d.sqrt()).collect());
        let mut out = Instance::new(f, self.y.clone(), x_true, self.delta0, self.prior, self.scaling)?;
        out.seed = self.seed;
        Ok(out)
    }
}

/// Draws a seeded Gaussian measurement problem.
///
/// `F` is filled row by row from a ChaCha8 stream, then the signal, then
/// the noise; the same seed always yields a bit-identical instance.
pub fn generate_instance(
    n: usize,
    m: usize,
    prior: PriorParams,
    delta0: f64,
    scaling: MatrixScaling,
    seed: u64,
) -> Result<Instance> {
    if n == 0 || m == 0 {
        return Err(Error::param(format!("need n ≥ 1 and m ≥ 1, got n={n} m={m}")));
    }
    prior.validate()?;
    if !(delta0 > 0.0 && delta0.is_finite()) {
        return Err(Error::param(format!("delta0 = {delta0} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = scaling.entry_variance(n).sqrt();
    let data: Vec<f64> = (0..n * m).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
    let f = Matrix::from_row_major(m, n, data);

    let slab_sd = prior.gaussian_var.sqrt();
    let x: Vec<f64> = (0..n)
        .map(|_| {
            let on = rng.random::<f64>() < prior.rho;
            let g: f64 = rng.sample(StandardNormal);
            if on {
                prior.gaussian_mean + slab_sd * g
            } else {
                0.0
            }
        })
        .collect();

    let noise_sd = delta0.sqrt();
    let y: Vec<f64> = (0..m)
        .map(|mu| dot(f.row(mu), &x) + noise_sd * rng.sample::<f64, _>(StandardNormal))
        .collect();

    let mut inst = Instance::new(f, y, Some(x), delta0, prior, scaling)?;
    inst.seed = Some(seed);
    Ok(inst)
}

/// Mean squared error `(1/N) Σ (a_i − x_i)²`.
pub fn mse(a: &[f64], x_true: &[f64]) -> Result<f64> {
    if a.len() != x_true.len() {
        return Err(Error::param(format!(
            "mse length mismatch: {} vs {}",
            a.len(),
            x_true.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::param("mse of empty vectors"));
    }
    let s: f64 = a.iter().zip(x_true).map(|(u, v)| (u - v) * (u - v)).sum();
    Ok(s / a.len() as f64)
}

/// Posterior means `a_i` and variances `c_i` of the factorized trial
/// distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub a: Vec<f64>,
    pub c: Vec<f64>,
}

/// Variational parameters `{R_i, Σ_i²}` and the noise variance `Δ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarParams {
    pub r: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub delta: f64,
}

impl VarParams {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.r.len() != n || self.sigma2.len() != n {
            return Err(Error::param(format!(
                "parameter vectors must have length {n} (got R {}, Σ² {})",
                self.r.len(),
                self.sigma2.len()
            )));
        }
        if let Some(i) = self.sigma2.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::param(format!("Σ²[{i}] = {} must be positive", self.sigma2[i])));
        }
        if self.r.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("R must be finite"));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::param(format!("Δ = {} must be positive", self.delta)));
        }
        Ok(())
    }
}

/// Signature of a user-supplied `log P_out(y | z)`.
pub type LogLikelihood = dyn Fn(f64, f64) -> f64 + Send + Sync;

/// Element-wise output channel `P_out(y | z)`.
#[derive(Clone)]
pub enum OutputChannel {
    Awgn { delta: f64 },
    Custom(CustomChannel),
}

/// A channel given only through its log-likelihood; expectations against
/// it are taken with Gauss-Hermite quadrature.
#[derive(Clone)]
pub struct CustomChannel {
    log_pout: Arc<LogLikelihood>,
    rule: Arc<GaussHermite>,
}

impl CustomChannel {
    pub fn log_pout(&self, y: f64, z: f64) -> f64 {
        (self.log_pout)(y, z)
    }

    pub fn rule(&self) -> &GaussHermite {
        &self.rule
    }
}

/// Default Gauss-Hermite order for custom channels.
pub const DEFAULT_QUADRATURE_ORDER: usize = 61;

impl OutputChannel {
    pub fn awgn(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::param(format!("AWGN Δ = {delta} must be positive")));
        }
        Ok(OutputChannel::Awgn { delta })
    }

    pub fn custom<F>(log_pout: F, quadrature_order: usize) -> Result<Self>
    where
        F: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        if quadrature_order < 16 {
            return Err(Error::param(format!(
                "quadrature order {quadrature_order} below the minimum of 16"
            )));
        }
        Ok(OutputChannel::Custom(CustomChannel {
            log_pout: Arc::new(log_pout),
            rule: Arc::new(GaussHermite::new(quadrature_order)?),
        }))
    }

    /// The Gaussian channel expressed through its log-likelihood only, so it
    /// goes down the quadrature path.
    pub fn awgn_as_custom(delta: f64, quadrature_order: usize) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::param(format!("AWGN Δ = {delta} must be positive")));
        }
        let half_log = 0.5 * (2.0 * std::f64::consts::PI * delta).ln();
        Self::custom(
            move |y, z| -(y - z) * (y - z) / (2.0 * delta) - half_log,
            quadrature_order,
        )
    }
}

impl fmt::Debug for OutputChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutputChannel::Awgn { delta } => f.debug_struct("Awgn").field("delta", delta).finish(),
            OutputChannel::Custom(c) => f
                .debug_struct("Custom")
                .field("quadrature_order", &c.rule.order())
                .finish_non_exhaustive(),
        }
    }
}

/// `log P_out(y | z)`.
pub fn channel_log_likelihood(channel: &OutputChannel, y: f64, z: f64) -> f64 {
    match channel {
        OutputChannel::Awgn { delta } => {
            -(y - z) * (y - z) / (2.0 * delta) - 0.5 * (2.0 * std::f64::consts::PI * delta).ln()
        }
        OutputChannel::Custom(c) => c.log_pout(y, z),
    }
}

/// On-disk form of an [`Instance`].
#[derive(Debug, Serialize, Deserialize)]
struct InstanceFile {
    n: usize,
    m: usize,
    rho: f64,
    delta0: f64,
    scaling: MatrixScaling,
    seed: Option<u64>,
    #[serde(rename = "F")]
    f: Vec<Vec<f64>>,
    y: Vec<f64>,
    x_true: Option<Vec<f64>>,
}

impl Instance {
    pub fn to_json(&self) -> Result<String> {
        let file = InstanceFile {
            n: self.n(),
            m: self.m(),
            rho: self.prior.rho,
            delta0: self.delta0,
            scaling: self.scaling,
            seed: self.seed,
            f: self.f.to_rows(),
            y: self.y.clone(),
            x_true: self.x_true.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: InstanceFile = serde_json::from_str(s)?;
        let f = Matrix::from_rows(&file.f).ok_or_else(|| Error::param("F rows are ragged"))?;
        if f.rows() != file.m || f.cols() != file.n {
            return Err(Error::param(format!(
                "F is {}×{} but header says m={} n={}",
                f.rows(),
                f.cols(),
                file.m,
                file.n
            )));
        }
        let mut inst = Instance::new(
            f,
            file.y,
            file.x_true,
            file.delta0,
            PriorParams::new(file.rho)?,
            file.scaling,
        )?;
        inst.seed = file.seed;
        Ok(inst)
    }
}
