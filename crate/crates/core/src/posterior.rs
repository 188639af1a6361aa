//! HMC posteriors for the single-hidden-layer BNN under a Gaussian weight
//! prior, and their predictive summaries.
//!
//! Sampling happens in whitened coordinates: every weight is `scale·v` with
//! `v ~ N(0, I)` a priori, the scales being [`PriorParams::layer_scales`].
//! Coordinates follow the sampler's noise layout `w⁰ (H·F), b⁰ (H), w¹ (H),
//! b¹`; the `b¹` coordinate is inert when the output bias is removed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::{sigmoid, Activation, ActivationKind, ActivationModel};
use crate::bnn::{BnnConfig, PriorParams};
use crate::error::{Error, Result};
use crate::gp::{self, MeasurementSet};
use crate::hmc::{self, HmcConfig, HmcDiagnostics, LogDensity};
use crate::linalg::Matrix;
use crate::random::{self, derive_seed, stream_rng};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "task")]
pub enum Likelihood {
    /// Gaussian observation noise with the given variance.
    Regression { noise_variance: f64 },
    /// Bernoulli with `p = sigmoid(f)`.
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

/// Network weights in whitened coordinates.
struct Net<'a, T: Scalar, A: ?Sized> {
    h: usize,
    f: usize,
    scales: [T; 4],
    act: &'a A,
    eta: &'a [T],
}

impl<T: Scalar, A: Activation<T> + ?Sized> Net<'_, T, A> {
    fn dim(&self) -> usize {
        self.h * (self.f + 2) + 1
    }

    fn pre_activation(&self, v: &[T], j: usize, x: &[T]) -> T {
        let w = &v[j * self.f..(j + 1) * self.f];
        let mut z = v[self.h * self.f + j] * self.scales[1];
        for k in 0..self.f {
            z += w[k] * self.scales[0] * x[k];
        }
        z
    }

    /// `f(x_n)` for every row of `x`.
    fn forward(&self, v: &[T], x: &Matrix<T>, out: &mut [T]) {
        let w1 = &v[self.h * (self.f + 1)..self.h * (self.f + 2)];
        let b1 = v[self.h * (self.f + 2)] * self.scales[3];
        out.iter_mut().for_each(|o| *o = b1);
        for j in 0..self.h {
            let c = w1[j] * self.scales[2];
            for (n, o) in out.iter_mut().enumerate() {
                *o += c * self.act.eval(self.eta, self.pre_activation(v, j, x.row(n)));
            }
        }
    }
}

/// Unnormalized log posterior `−½|v|² + Σₙ log p(yₙ | f(xₙ))`.
struct PosteriorDensity<'a, T: Scalar, A: ?Sized> {
    net: Net<'a, T, A>,
    x: &'a Matrix<T>,
    y: &'a [T],
    likelihood: Likelihood,
}

impl<T: Scalar, A: Activation<T> + ?Sized> LogDensity<T> for PosteriorDensity<'_, T, A> {
    fn dim(&self) -> usize {
        self.net.dim()
    }

    fn log_density_grad(&self, v: &[T], grad: &mut [T]) -> T {
        let net = &self.net;
        let (h, f, n) = (net.h, net.f, self.x.rows());
        let w1_at = h * (f + 1);
        let b1_at = h * (f + 2);
        let mut acts = vec![T::zero(); h * n];
        let mut dacts = vec![T::zero(); h * n];
        let mut out = vec![v[b1_at] * net.scales[3]; n];
        for j in 0..h {
            let c = v[w1_at + j] * net.scales[2];
            for i in 0..n {
                let (a, da) = net.act.eval_dx(net.eta, net.pre_activation(v, j, self.x.row(i)));
                acts[j * n + i] = a;
                dacts[j * n + i] = da;
                out[i] += c * a;
            }
        }
        let mut lp = T::zero();
        for (g, &q) in grad.iter_mut().zip(v) {
            *g = -q;
            lp -= lit::<T>(0.5) * q * q;
        }
        // r_n = ∂ log p(y_n | f_n) / ∂ f_n
        let r: Vec<T> = match self.likelihood {
            Likelihood::Regression { noise_variance } => {
                let s2 = lit::<T>(noise_variance);
                out.iter()
                    .zip(self.y)
                    .map(|(&fi, &yi)| {
                        let e = yi - fi;
                        lp -= e * e / (lit::<T>(2.0) * s2);
                        e / s2
                    })
                    .collect()
            }
            Likelihood::Classification => out
                .iter()
                .zip(self.y)
                .map(|(&fi, &yi)| {
                    lp += yi * fi - gp::softplus(fi);
                    yi - sigmoid(fi)
                })
                .collect(),
        };
        for j in 0..h {
            let c = v[w1_at + j] * net.scales[2];
            let (mut gv, mut gb) = (T::zero(), T::zero());
            for i in 0..n {
                gv += r[i] * acts[j * n + i];
                let dz = r[i] * c * dacts[j * n + i];
                gb += dz;
                let xi = self.x.row(i);
                for k in 0..f {
                    grad[j * f + k] += dz * net.scales[0] * xi[k];
                }
            }
            grad[h * f + j] += gb * net.scales[1];
            grad[w1_at + j] += gv * net.scales[2];
        }
        grad[b1_at] += r.iter().copied().sum::<T>() * net.scales[3];
        lp
    }
}

/// Posterior predictive function draws on a grid.
#[derive(Debug, Clone)]
pub struct PosteriorPredictive<T: Scalar> {
    pub grid: Matrix<T>,
    /// `draws × G`; latent function values for regression, probabilities for
    /// classification.
    pub samples: Matrix<T>,
    pub task: TaskKind,
    pub acceptance_rate: f64,
    pub diagnostics: Option<HmcDiagnostics>,
}

/// Per-grid-point classification summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMaps {
    pub mean_prob: Vec<f64>,
    /// `E[p(1−p)] + Var[p]`.
    pub total: Vec<f64>,
    /// `Var[p]` over posterior draws.
    pub epistemic: Vec<f64>,
}

impl<T: Scalar> PosteriorPredictive<T> {
    pub fn mean(&self) -> Vec<f64> {
        column_moments(&self.samples).into_iter().map(|m| m.0).collect()
    }

    /// Standard deviation over draws (population form); for regression this
    /// is the spread of the latent function, without observation noise.
    pub fn std(&self) -> Vec<f64> {
        column_moments(&self.samples).into_iter().map(|m| m.1.sqrt()).collect()
    }

    pub fn uncertainty(&self) -> UncertaintyMaps {
        uncertainty_maps(&self.samples)
    }

    pub fn batch(&self) -> crate::bnn::FunctionSampleBatch<T> {
        crate::bnn::FunctionSampleBatch::new(
            self.samples.clone(),
            self.grid.clone(),
            crate::bnn::SampleSource::Posterior,
        )
    }
}

/// `(mean, variance)` per column with the `1/S` normalization; a constant
/// column has variance exactly 0.
fn column_moments<T: Scalar>(m: &Matrix<T>) -> Vec<(f64, f64)> {
    let s = m.rows() as f64;
    (0..m.cols())
        .map(|j| {
            let col: Vec<f64> = (0..m.rows()).map(|i| m[(i, j)].as_f64()).collect();
            let first = col[0];
            if col.iter().all(|&v| v == first) {
                return (first, 0.0);
            }
            let mean = col.iter().sum::<f64>() / s;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s;
            (mean, var)
        })
        .collect()
}

/// Uncertainty decomposition of probability draws (`draws × G`).
pub fn uncertainty_maps<T: Scalar>(probs: &Matrix<T>) -> UncertaintyMaps {
    let s = probs.rows() as f64;
    let moments = column_moments(probs);
    let mut maps = UncertaintyMaps { mean_prob: vec![], total: vec![], epistemic: vec![] };
    for (j, (mean, var)) in moments.into_iter().enumerate() {
        let aleatoric = (0..probs.rows()).map(|i| {
            let p = probs[(i, j)].as_f64();
            p * (1.0 - p)
        });
        maps.mean_prob.push(mean);
        maps.total.push(aleatoric.sum::<f64>() / s + var);
        maps.epistemic.push(var);
    }
    maps
}

/// Default fixed prior: ReLU, unit weight and bias variances, no `1/H`
/// output scaling (`log σ²_w_out = ln H` cancels it).
pub fn default_relu_prior<T: Scalar>(config: &BnnConfig) -> (PriorParams<T>, ActivationModel<T>) {
    let lv = lit::<T>((config.hidden_width as f64).ln());
    let params = PriorParams::from_array([T::zero(), T::zero(), lv, T::zero()]);
    (params, ActivationModel::fixed(ActivationKind::FixedRelu))
}

#[allow(clippy::too_many_arguments)]
fn run<T: Scalar, A: Activation<T> + ?Sized>(
    config: &BnnConfig,
    params: &PriorParams<T>,
    act: &A,
    eta: &[T],
    x: &Matrix<T>,
    y: &[T],
    likelihood: Likelihood,
    grid: &MeasurementSet<T>,
    hmc_config: &HmcConfig,
) -> Result<PosteriorPredictive<T>> {
    config.validate()?;
    params.validate()?;
    if act.n_params() != eta.len() {
        return Err(Error::DimensionMismatch(format!(
            "activation expects {} parameters, got {}",
            act.n_params(),
            eta.len()
        )));
    }
    if x.rows() != y.len() || (x.rows() > 0 && x.cols() != config.input_dim) || grid.dim() != config.input_dim {
        return Err(Error::DimensionMismatch(format!(
            "training inputs {:?}, {} targets, grid dimension {}, network input dimension {}",
            x.shape(),
            y.len(),
            grid.dim(),
            config.input_dim
        )));
    }
    let net = Net { h: config.hidden_width, f: config.input_dim, scales: params.layer_scales(config), act, eta };
    let target = PosteriorDensity { net, x, y, likelihood };
    let dim = target.dim();
    let inits: Vec<Vec<T>> = (0..hmc_config.chains)
        .map(|c| {
            let mut rng = stream_rng(derive_seed(hmc_config.seed, &[0x1a17]), c as u64);
            let mut v = vec![T::zero(); dim];
            random::fill_normal(&mut rng, &mut v);
            v
        })
        .collect();
    let out = hmc::hmc_sample_from(&target, &inits, hmc_config)?;

    let g = grid.len();
    let net = &target.net;
    let rows: Vec<Vec<T>> = (0..out.samples.rows())
        .into_par_iter()
        .map(|i| {
            let mut f = vec![T::zero(); g];
            net.forward(out.samples.row(i), grid.points(), &mut f);
            if likelihood == Likelihood::Classification {
                f.iter_mut().for_each(|v| *v = sigmoid(*v));
            }
            f
        })
        .collect();
    let samples = Matrix::new(rows.len(), g, rows.concat())?;
    let task = match likelihood {
        Likelihood::Regression { .. } => TaskKind::Regression,
        Likelihood::Classification => TaskKind::Classification,
    };
    Ok(PosteriorPredictive {
        grid: grid.points().clone(),
        samples,
        task,
        acceptance_rate: out.acceptance_rate,
        diagnostics: Some(out.diagnostics),
    })
}

/// Regression posterior with Gaussian noise of variance `noise_variance`.
#[allow(clippy::too_many_arguments)]
pub fn bnn_posterior_regression<T: Scalar, A: Activation<T> + ?Sized>(
    config: &BnnConfig,
    params: &PriorParams<T>,
    act: &A,
    eta: &[T],
    train_x: &Matrix<T>,
    train_y: &[T],
    noise_variance: f64,
    grid: &MeasurementSet<T>,
    hmc_config: &HmcConfig,
) -> Result<PosteriorPredictive<T>> {
    if !(noise_variance > 0.0 && noise_variance.is_finite()) {
        return Err(Error::InvalidConfig(format!("noise variance must be positive (got {noise_variance})")));
    }
    let lik = Likelihood::Regression { noise_variance };
    run(config, params, act, eta, train_x, train_y, lik, grid, hmc_config)
}

/// Binary classification posterior; the predictive holds probabilities.
#[allow(clippy::too_many_arguments)]
pub fn bnn_posterior_classification<T: Scalar, A: Activation<T> + ?Sized>(
    config: &BnnConfig,
    params: &PriorParams<T>,
    act: &A,
    eta: &[T],
    train_x: &Matrix<T>,
    labels: &[u8],
    grid: &MeasurementSet<T>,
    hmc_config: &HmcConfig,
) -> Result<PosteriorPredictive<T>> {
    if let Some(bad) = labels.iter().find(|&&c| c > 1) {
        return Err(Error::InvalidConfig(format!("labels must be 0 or 1, got {bad}")));
    }
    let y: Vec<T> = labels.iter().map(|&c| lit(c as f64)).collect();
    run(config, params, act, eta, train_x, &y, Likelihood::Classification, grid, hmc_config)
}
