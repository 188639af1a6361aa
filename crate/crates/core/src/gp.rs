//! Target Gaussian-process priors: kernels, Gram matrices, prior sampling,
//! exact regression posteriors and latent-HMC classification ground truth.

use serde::{Deserialize, Serialize};

use crate::bnn::{FunctionSampleBatch, SampleSource};
use crate::error::{Error, Result};
use crate::hmc::{self, HmcConfig, LogDensity};
use crate::linalg::{self, Matrix};
use crate::random::{self, stream_rng};
use crate::scalar::{lit, Scalar};

/// Gram jitter relative to `amplitude²`.
pub const DEFAULT_GRAM_JITTER: f64 = 1e-8;
/// Points closer than this are treated as duplicates.
pub const DUPLICATE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Rbf,
    Matern52,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub length_scale: f64,
    /// Output standard deviation.
    pub amplitude: f64,
}

impl KernelSpec {
    pub fn matern52(length_scale: f64, amplitude: f64) -> Self {
        Self { family: KernelFamily::Matern52, length_scale, amplitude }
    }

    pub fn rbf(length_scale: f64, amplitude: f64) -> Self {
        Self { family: KernelFamily::Rbf, length_scale, amplitude }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length_scale > 0.0 && self.length_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "kernel length_scale must be positive, got {}",
                self.length_scale
            )));
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "kernel amplitude must be positive, got {}",
                self.amplitude
            )));
        }
        Ok(())
    }

    pub fn default_jitter(&self) -> f64 {
        DEFAULT_GRAM_JITTER * self.amplitude * self.amplitude
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpPriorSpec {
    pub kernel: KernelSpec,
    #[serde(default)]
    pub noise_variance: f64,
}

impl GpPriorSpec {
    pub fn new(kernel: KernelSpec, noise_variance: f64) -> Self {
        Self { kernel, noise_variance }
    }

    pub fn noiseless(kernel: KernelSpec) -> Self {
        Self { kernel, noise_variance: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise_variance must be nonnegative, got {}",
                self.noise_variance
            )));
        }
        Ok(())
    }
}

/// `N × F` matrix of input points with at least two distinct rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet<T: Scalar> {
    points: Matrix<T>,
}

impl<T: Scalar> MeasurementSet<T> {
    pub fn new(points: Matrix<T>) -> Result<Self> {
        if points.rows() < 2 {
            return Err(Error::InvalidMeasurementSet(format!(
                "need at least 2 points, got {}",
                points.rows()
            )));
        }
        if points.cols() == 0 {
            return Err(Error::InvalidMeasurementSet("zero input dimension".into()));
        }
        if let Some((i, j)) = points.first_non_finite() {
            return Err(Error::InvalidMeasurementSet(format!("non-finite coordinate at ({i}, {j})")));
        }
        let tol = lit::<T>(DUPLICATE_TOL);
        for i in 0..points.rows() {
            for j in 0..i {
                let d2: T = points
                    .row(i)
                    .iter()
                    .zip(points.row(j))
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum();
                if d2.sqrt() <= tol {
                    return Err(Error::InvalidMeasurementSet(format!(
                        "points {j} and {i} coincide"
                    )));
                }
            }
        }
        Ok(Self { points })
    }

    /// Evenly spaced 1-D grid.
    pub fn grid_1d(low: f64, high: f64, n: usize) -> Result<Self> {
        let step = if n > 1 { (high - low) / (n - 1) as f64 } else { 0.0 };
        Self::new(Matrix::from_fn(n, 1, |i, _| lit(low + step * i as f64)))
    }

    /// Row-major `n × n` grid over a 2-D box.
    pub fn grid_2d(low: (f64, f64), high: (f64, f64), n: usize) -> Result<Self> {
        let at = |lo: f64, hi: f64, k: usize| lo + (hi - lo) * k as f64 / (n - 1).max(1) as f64;
        Self::new(Matrix::from_fn(n * n, 2, |i, d| {
            if d == 0 {
                lit(at(low.0, high.0, i % n))
            } else {
                lit(at(low.1, high.1, i / n))
            }
        }))
    }

    pub fn points(&self) -> &Matrix<T> {
        &self.points
    }

    pub fn into_points(self) -> Matrix<T> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn point(&self, i: usize) -> &[T] {
        self.points.row(i)
    }
}

pub fn kernel_eval<T: Scalar>(spec: &KernelSpec, x: &[T], x2: &[T]) -> T {
    debug_assert_eq!(x.len(), x2.len());
    let r2: T = x.iter().zip(x2).map(|(&a, &b)| (a - b) * (a - b)).sum();
    kernel_from_r2(spec, r2)
}

#[inline]
fn kernel_from_r2<T: Scalar>(spec: &KernelSpec, r2: T) -> T {
    let amp2 = lit::<T>(spec.amplitude * spec.amplitude);
    let l = lit::<T>(spec.length_scale);
    match spec.family {
        KernelFamily::Rbf => amp2 * (-r2 / (lit::<T>(2.0) * l * l)).exp(),
        KernelFamily::Matern52 => {
            let s = lit::<T>(5.0).sqrt() * r2.sqrt() / l;
            amp2 * (T::one() + s + s * s / lit(3.0)) * (-s).exp()
        }
    }
}

/// `K(a, b)` with `a.rows() × b.rows()` entries.
pub fn cross_gram<T: Scalar>(spec: &KernelSpec, a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch(format!(
            "input dimension {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    Ok(Matrix::from_fn(a.rows(), b.rows(), |i, j| kernel_eval(spec, a.row(i), b.row(j))))
}

/// Symmetric Gram matrix with `jitter` added to the diagonal.
pub fn gram<T: Scalar>(spec: &KernelSpec, x: &Matrix<T>, jitter: T) -> Result<Matrix<T>> {
    let n = x.rows();
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel_eval(spec, x.row(i), x.row(j));
            g.data_mut()[i * n + j] = v;
            g.data_mut()[j * n + i] = v;
        }
        g.data_mut()[i * n + i] += jitter;
    }
    Ok(linalg::assert_spd_input(&g)?)
}

/// Covariance of the prior observations: kernel Gram plus default jitter plus
/// `noise_variance`.
pub fn prior_covariance<T: Scalar>(spec: &GpPriorSpec, x: &Matrix<T>) -> Result<Matrix<T>> {
    gram(&spec.kernel, x, lit(spec.kernel.default_jitter() + spec.noise_variance))
}

/// `count` i.i.d. draws from `N(0, G + noise·I)` at `x`.
pub fn gp_sample_prior<T: Scalar>(
    spec: &GpPriorSpec,
    x: &MeasurementSet<T>,
    count: usize,
    seed: u64,
) -> Result<FunctionSampleBatch<T>> {
    spec.validate()?;
    let cov = prior_covariance(spec, x.points())?;
    let l = linalg::cholesky(&cov, T::zero())?;
    let values = sample_with_factor(&l, count, seed);
    Ok(FunctionSampleBatch::new(values, x.points().clone(), SampleSource::Gp))
}

/// Rows `z·Lᵀ` for standard-normal rows `z`.
pub(crate) fn sample_with_factor<T: Scalar>(l: &Matrix<T>, count: usize, seed: u64) -> Matrix<T> {
    let n = l.rows();
    let mut rng = stream_rng(seed, 0);
    let mut z = vec![T::zero(); n];
    let mut out = Matrix::zeros(count, n);
    for s in 0..count {
        random::fill_normal(&mut rng, &mut z);
        let row = out.row_mut(s);
        for i in 0..n {
            let li = l.row(i);
            let mut acc = T::zero();
            for k in 0..=i {
                acc += li[k] * z[k];
            }
            row[i] = acc;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct GpPosterior<T: Scalar> {
    pub mean: Vec<T>,
    pub cov: Matrix<T>,
}

/// Exact GP regression posterior over latent function values at `xtest`.
/// An empty training set returns the prior.
pub fn gp_posterior_regression<T: Scalar>(
    spec: &GpPriorSpec,
    xtrain: &Matrix<T>,
    y: &[T],
    xtest: &Matrix<T>,
) -> Result<GpPosterior<T>> {
    spec.validate()?;
    if y.len() != xtrain.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} targets for {} training points",
            y.len(),
            xtrain.rows()
        )));
    }
    let kss = gram(&spec.kernel, xtest, lit(spec.kernel.default_jitter()))?;
    if xtrain.rows() == 0 {
        return Ok(GpPosterior { mean: vec![T::zero(); xtest.rows()], cov: kss });
    }
    if !(spec.noise_variance > 0.0) {
        return Err(Error::InvalidConfig("regression posterior needs noise_variance > 0".into()));
    }
    let k = prior_covariance(spec, xtrain)?;
    let l = linalg::cholesky(&k, T::zero())?;
    let ks = cross_gram(&spec.kernel, xtrain, xtest)?;
    let alpha = linalg::cholesky_solve(&l, &Matrix::column(y.to_vec()));
    let mean = ks.t_matmul(&alpha).into_data();
    let v = linalg::solve_lower(&l, &ks);
    let cov = kss.sub(&v.t_matmul(&v)).symmetrize();
    Ok(GpPosterior { mean, cov })
}

/// Whitened latent posterior for GP classification: `f = L·v`, `v ~ N(0, I)`,
/// Bernoulli-sigmoid likelihood.
struct LatentClassTarget<'a, T: Scalar> {
    l: &'a Matrix<T>,
    labels: &'a [u8],
}

impl<T: Scalar> LogDensity<T> for LatentClassTarget<'_, T> {
    fn dim(&self) -> usize {
        self.l.rows()
    }

    fn log_density_grad(&self, v: &[T], grad: &mut [T]) -> T {
        let n = v.len();
        let mut lp = T::zero();
        let mut g = vec![T::zero(); n];
        for i in 0..n {
            let li = self.l.row(i);
            let mut f = T::zero();
            for k in 0..=i {
                f += li[k] * v[k];
            }
            let y = if self.labels[i] == 1 { T::one() } else { T::zero() };
            lp += y * f - softplus(f);
            g[i] = y - crate::activations::sigmoid(f);
        }
        // grad = −v + Lᵀ g
        for (k, gk) in grad.iter_mut().enumerate() {
            *gk = -v[k];
        }
        for i in 0..n {
            let li = self.l.row(i);
            for k in 0..=i {
                grad[k] += li[k] * g[i];
            }
        }
        lp - lit::<T>(0.5) * v.iter().map(|&a| a * a).sum::<T>()
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `count` joint draws from a GP posterior (`count × G`). The covariance is
/// factored with jitter escalating up to `1e−4·amp²`.
pub fn gp_posterior_samples<T: Scalar>(
    spec: &GpPriorSpec,
    post: &GpPosterior<T>,
    count: usize,
    seed: u64,
) -> Result<Matrix<T>> {
    let max = lit::<T>(1e-4 * spec.kernel.amplitude.powi(2));
    let l = linalg::cholesky_escalating(&post.cov, lit(spec.kernel.default_jitter()), max)?.factor;
    let noise = sample_with_factor(&l, count, seed);
    Ok(Matrix::from_fn(count, post.mean.len(), |s, j| noise[(s, j)] + post.mean[j]))
}

/// Posterior samples of `sigmoid(f)` on `xgrid` for GP classification.
///
/// HMC explores the latent values at the training inputs; grid latents are
/// then drawn exactly from their Gaussian conditional given each training
/// draw, which yields the same joint posterior over `xtrain ∪ xgrid`.
pub fn gp_latent_classification_samples<T: Scalar>(
    spec: &GpPriorSpec,
    xtrain: &Matrix<T>,
    labels: &[u8],
    xgrid: &MeasurementSet<T>,
    config: &HmcConfig,
) -> Result<Matrix<T>> {
    spec.validate()?;
    if labels.len() != xtrain.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} training points",
            labels.len(),
            xtrain.rows()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&c| c > 1) {
        return Err(Error::InvalidConfig(format!("labels must be 0 or 1, got {bad}")));
    }
    let grid = xgrid.points();
    let total = config.chains * config.draws;
    let jitter = lit::<T>(spec.kernel.default_jitter());
    if xtrain.rows() == 0 {
        let l = linalg::cholesky(&gram(&spec.kernel, grid, jitter)?, T::zero())?;
        let f = sample_with_factor(&l, total, random::derive_seed(config.seed, &[0x6770]));
        return Ok(f.map(crate::activations::sigmoid));
    }
    let ktt = gram(&spec.kernel, xtrain, jitter)?;
    let lt = linalg::cholesky(&ktt, T::zero())?;
    let target = LatentClassTarget { l: &lt, labels };
    let init = vec![T::zero(); xtrain.rows()];
    let out = hmc::hmc_sample(&target, &init, config)?;

    // f_g | v ~ N(A·v, K_gg − A·Aᵀ) with A = K_gt·L⁻ᵀ.
    let ktg = cross_gram(&spec.kernel, xtrain, grid)?;
    let a_t = linalg::solve_lower(&lt, &ktg); // Aᵀ, n_train × G
    let kgg = gram(&spec.kernel, grid, T::zero())?;
    let cond = kgg.sub(&a_t.t_matmul(&a_t)).symmetrize().add_diag(jitter);
    let lc = linalg::cholesky_escalating(&cond, T::zero(), lit(1e-4 * spec.kernel.amplitude.powi(2)))?
        .factor;
    let noise = sample_with_factor(&lc, total, random::derive_seed(config.seed, &[0x6771]));
    let mean = out.samples.matmul(&a_t);
    Ok(mean.add(&noise).map(crate::activations::sigmoid))
}
