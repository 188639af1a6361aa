//! Reparameterized prior function draws from a single-hidden-layer BNN
//!
//! ```text
//! f(x) = Σ_j w¹_j · φ(w⁰_j·x + b⁰_j) + b¹
//! w⁰ = ε·σ_w_in,  b⁰ = ε·σ_b_in,  w¹ = ε·σ_w_out/√H,  b¹ = ε·σ_b_out
//! ```
//!
//! Row `s` of a batch draws all of its ε from `stream_rng(seed, s)`, so the
//! fused graph op and the streaming sampler produce bitwise-identical values.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::Activation;
use crate::autodiff::{self, AdError, CustomOp, Graph, NodeId};
use crate::error::{Error, Result};
use crate::gp::MeasurementSet;
use crate::linalg::Matrix;
use crate::random::{self, stream_rng};
use crate::scalar::{lit, Scalar};
use crate::wasserstein::GaussianSummary;

pub const DEFAULT_HIDDEN_WIDTH: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnnConfig {
    pub input_dim: usize,
    pub hidden_width: usize,
    #[serde(default)]
    pub remove_output_bias: bool,
    /// Output weights use `ε/√H` regardless of `log_var_w_out`.
    #[serde(default)]
    pub fix_output_weight_variance: bool,
}

impl BnnConfig {
    pub fn new(input_dim: usize, hidden_width: usize) -> Self {
        Self { input_dim, hidden_width, remove_output_bias: false, fix_output_weight_variance: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_width == 0 {
            return Err(Error::InvalidConfig(format!(
                "input_dim and hidden_width must be positive (got {}, {})",
                self.input_dim, self.hidden_width
            )));
        }
        Ok(())
    }

    /// Number of weights and biases in the network.
    pub fn n_weights(&self) -> usize {
        let h = self.hidden_width;
        h * self.input_dim + 2 * h + usize::from(!self.remove_output_bias)
    }

    /// Noise values drawn per function sample (the output bias draw is
    /// always consumed so that toggling the bias keeps streams aligned).
    fn noise_per_row(&self) -> usize {
        self.hidden_width * (self.input_dim + 2) + 1
    }
}

/// Log-variances of the Gaussian weight and bias priors. The activation
/// parameters live in the accompanying `ActivationModel`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "", deny_unknown_fields)]
pub struct PriorParams<T: Scalar> {
    pub log_var_w_in: T,
    pub log_var_b_in: T,
    pub log_var_w_out: T,
    pub log_var_b_out: T,
}

impl<T: Scalar> Default for PriorParams<T> {
    /// Unit variances.
    fn default() -> Self {
        Self::from_array([T::zero(); 4])
    }
}

impl<T: Scalar> PriorParams<T> {
    pub fn from_array(v: [T; 4]) -> Self {
        Self { log_var_w_in: v[0], log_var_b_in: v[1], log_var_w_out: v[2], log_var_b_out: v[3] }
    }

    pub fn from_slice(v: &[T]) -> Result<Self> {
        let a: [T; 4] = v
            .try_into()
            .map_err(|_| Error::DimensionMismatch(format!("expected 4 log-variances, got {}", v.len())))?;
        Ok(Self::from_array(a))
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.log_var_w_in, self.log_var_b_in, self.log_var_w_out, self.log_var_b_out]
    }

    /// Standard deviations `exp(½·log_var)` in the same order.
    pub fn stds(&self) -> [T; 4] {
        self.to_array().map(|v| (v * lit(0.5)).exp())
    }

    /// Weight standard deviations as actually applied by the network:
    /// `[σ_w_in, σ_b_in, output weight scale, σ_b_out]`, the output weight
    /// scale including the `1/√H` factor and bias removal folded in.
    pub fn layer_scales(&self, config: &BnnConfig) -> [T; 4] {
        let s = self.stds();
        let inv_sqrt_h = T::one() / lit::<T>(config.hidden_width as f64).sqrt();
        let w_out = if config.fix_output_weight_variance { inv_sqrt_h } else { s[2] * inv_sqrt_h };
        let b_out = if config.remove_output_bias { T::zero() } else { s[3] };
        [s[0], s[1], w_out, b_out]
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("prior log-variance".into()))
        }
    }

    pub fn cast<U: Scalar>(&self) -> PriorParams<U> {
        PriorParams::from_array(self.to_array().map(|v| U::lit(v.as_f64())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    Bnn,
    Gp,
    Posterior,
}

/// `S × N` function values at the `N` points of a measurement set.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionSampleBatch<T: Scalar> {
    pub values: Matrix<T>,
    pub points: Matrix<T>,
    pub source: SampleSource,
}

impl<T: Scalar> FunctionSampleBatch<T> {
    pub fn new(values: Matrix<T>, points: Matrix<T>, source: SampleSource) -> Self {
        debug_assert_eq!(values.cols(), points.rows());
        Self { values, points, source }
    }

    pub fn n_samples(&self) -> usize {
        self.values.rows()
    }

    pub fn n_points(&self) -> usize {
        self.values.cols()
    }
}

/// Draws row `s`'s noise: `w⁰` (H·F), `b⁰` (H), `w¹` (H), `b¹` (1).
fn draw_row_noise<T: Scalar>(config: &BnnConfig, seed: u64, row: usize, out: &mut [T]) {
    let mut rng = stream_rng(seed, row as u64);
    random::fill_normal(&mut rng, out);
    debug_assert_eq!(out.len(), config.noise_per_row());
}

struct RowLayout {
    h: usize,
    f: usize,
}

impl RowLayout {
    fn new(config: &BnnConfig) -> Self {
        Self { h: config.hidden_width, f: config.input_dim }
    }
    fn w0(&self) -> std::ops::Range<usize> {
        0..self.h * self.f
    }
    fn b0(&self) -> std::ops::Range<usize> {
        self.h * self.f..self.h * (self.f + 1)
    }
    fn w1(&self) -> std::ops::Range<usize> {
        self.h * (self.f + 1)..self.h * (self.f + 2)
    }
    fn b1(&self) -> usize {
        self.h * (self.f + 2)
    }
}

/// One function draw evaluated at all points of `x`.
fn row_forward<T: Scalar, A: Activation<T> + ?Sized>(
    layout: &RowLayout,
    noise: &[T],
    scales: &[T; 4],
    act: &A,
    eta: &[T],
    x: &Matrix<T>,
    out: &mut [T],
) {
    let (w0, b0, w1) = (&noise[layout.w0()], &noise[layout.b0()], &noise[layout.w1()]);
    let f = layout.f;
    out.iter_mut().for_each(|v| *v = T::zero());
    for j in 0..layout.h {
        let wj = &w0[j * f..(j + 1) * f];
        let bj = b0[j] * scales[1];
        let vj = w1[j] * scales[2];
        for (n, o) in out.iter_mut().enumerate() {
            let xn = x.row(n);
            let mut z = bj;
            for k in 0..f {
                z += wj[k] * scales[0] * xn[k];
            }
            *o += vj * act.eval(eta, z);
        }
    }
    let b1 = noise[layout.b1()] * scales[3];
    out.iter_mut().for_each(|v| *v += b1);
}

/// Gradient of `Σ_n g_n·f(x_n)` for one row with respect to the four
/// log-variances (`dlv`) and the activation parameters (`deta`).
#[allow(clippy::too_many_arguments)]
fn row_backward<T: Scalar, A: Activation<T> + ?Sized>(
    layout: &RowLayout,
    config: &BnnConfig,
    noise: &[T],
    scales: &[T; 4],
    act: &A,
    eta: &[T],
    x: &Matrix<T>,
    g: &[T],
    want_eta: bool,
    dlv: &mut [T; 4],
    deta: &mut [T],
) {
    let (w0, b0, w1) = (&noise[layout.w0()], &noise[layout.b0()], &noise[layout.w1()]);
    let f = layout.f;
    let half = lit::<T>(0.5);
    let mut gw0 = vec![T::zero(); f];
    for j in 0..layout.h {
        let wj = &w0[j * f..(j + 1) * f];
        let bj = b0[j] * scales[1];
        let vj = w1[j] * scales[2];
        let mut gv = T::zero();
        let mut gb = T::zero();
        gw0.iter_mut().for_each(|v| *v = T::zero());
        for (n, &gn) in g.iter().enumerate() {
            let xn = x.row(n);
            let mut z = bj;
            for k in 0..f {
                z += wj[k] * scales[0] * xn[k];
            }
            let (a, da) = if want_eta {
                act.eval_grad(eta, z, gn * vj, deta)
            } else {
                act.eval_dx(eta, z)
            };
            gv += gn * a;
            let dz = gn * vj * da;
            gb += dz;
            for k in 0..f {
                gw0[k] += dz * xn[k];
            }
        }
        // d(ε·σ)/d(log σ²) = ½·ε·σ
        let mut gw = T::zero();
        for k in 0..f {
            gw += gw0[k] * wj[k] * scales[0];
        }
        dlv[0] += half * gw;
        dlv[1] += half * gb * bj;
        if !config.fix_output_weight_variance {
            dlv[2] += half * gv * vj;
        }
    }
    if !config.remove_output_bias {
        let gsum: T = g.iter().copied().sum();
        dlv[3] += half * gsum * noise[layout.b1()] * scales[3];
    }
}

/// Prior function draws without building a graph. Rows are generated in
/// parallel, each from its own stream.
pub fn bnn_sample_functions<T: Scalar, A: Activation<T> + ?Sized>(
    config: &BnnConfig,
    params: &PriorParams<T>,
    act: &A,
    eta: &[T],
    x: &MeasurementSet<T>,
    count: usize,
    seed: u64,
) -> Result<FunctionSampleBatch<T>> {
    config.validate()?;
    params.validate()?;
    check_inputs(config, act, eta, x.points(), count)?;
    let layout = RowLayout::new(config);
    let scales = params.layer_scales(config);
    let n = x.len();
    let mut values = Matrix::zeros(count, n);
    values
        .data_mut()
        .par_chunks_mut(n)
        .enumerate()
        .for_each_init(
            || vec![T::zero(); config.noise_per_row()],
            |noise, (s, out)| {
                draw_row_noise(config, seed, s, noise);
                row_forward(&layout, noise, &scales, act, eta, x.points(), out);
            },
        );
    if let Some((r, c)) = values.first_non_finite() {
        return Err(Error::NonFinite(format!("BNN output at sample {r}, point {c}")));
    }
    Ok(FunctionSampleBatch::new(values, x.points().clone(), SampleSource::Bnn))
}

fn check_inputs<T: Scalar, A: Activation<T> + ?Sized>(
    config: &BnnConfig,
    act: &A,
    eta: &[T],
    x: &Matrix<T>,
    count: usize,
) -> Result<()> {
    if x.cols() != config.input_dim {
        return Err(Error::DimensionMismatch(format!(
            "points have dimension {}, network expects {}",
            x.cols(),
            config.input_dim
        )));
    }
    if eta.len() != act.n_params() {
        return Err(Error::DimensionMismatch(format!(
            "activation expects {} parameters, got {}",
            act.n_params(),
            eta.len()
        )));
    }
    if count < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 function samples, got {count}")));
    }
    Ok(())
}

/// Fused sampler node. Inputs: `[log_vars (4×1)]` or `[log_vars, eta]`.
/// The noise is drawn once at construction and held as a constant.
#[derive(Clone)]
pub struct BnnSamplerOp<T: Scalar, A> {
    config: BnnConfig,
    act: A,
    frozen_eta: Vec<T>,
    points: Matrix<T>,
    count: usize,
    noise: Vec<T>,
}

impl<T: Scalar, A: Activation<T> + Clone + 'static> BnnSamplerOp<T, A> {
    /// `frozen_eta` is used when the graph does not pass η as an input.
    pub fn new(
        config: BnnConfig,
        act: A,
        frozen_eta: Vec<T>,
        x: &MeasurementSet<T>,
        count: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        check_inputs(&config, &act, &frozen_eta, x.points(), count)?;
        let per_row = config.noise_per_row();
        let mut noise = vec![T::zero(); per_row * count];
        noise
            .par_chunks_mut(per_row)
            .enumerate()
            .for_each(|(s, chunk)| draw_row_noise(&config, seed, s, chunk));
        Ok(Self { config, act, frozen_eta, points: x.points().clone(), count, noise })
    }

    fn eta<'a>(&'a self, inputs: &[&'a Matrix<T>]) -> &'a [T] {
        if inputs.len() > 1 {
            inputs[1].data()
        } else {
            &self.frozen_eta
        }
    }

    fn scales(&self, lv: &Matrix<T>) -> autodiff::Result<[T; 4]> {
        let p = PriorParams::from_slice(lv.data())
            .map_err(|e| AdError::Custom(format!("bnn sampler: {e}")))?;
        Ok(p.layer_scales(&self.config))
    }
}

impl<T: Scalar, A: Activation<T> + Clone + 'static> CustomOp<T> for BnnSamplerOp<T, A> {
    fn name(&self) -> &str {
        "bnn_sampler"
    }

    fn forward(&mut self, inputs: &[&Matrix<T>]) -> autodiff::Result<Matrix<T>> {
        let scales = self.scales(inputs[0])?;
        let eta = self.eta(inputs);
        if eta.len() != self.act.n_params() {
            return Err(AdError::Custom(format!(
                "bnn sampler: activation expects {} parameters, got {}",
                self.act.n_params(),
                eta.len()
            )));
        }
        let layout = RowLayout::new(&self.config);
        let per_row = self.config.noise_per_row();
        let n = self.points.rows();
        let mut values = Matrix::zeros(self.count, n);
        values
            .data_mut()
            .par_chunks_mut(n)
            .zip(self.noise.par_chunks(per_row))
            .for_each(|(out, noise)| {
                row_forward(&layout, noise, &scales, &self.act, eta, &self.points, out)
            });
        Ok(values)
    }

    fn backward(
        &self,
        inputs: &[&Matrix<T>],
        _output: &Matrix<T>,
        grad_output: &Matrix<T>,
        needs: &[bool],
    ) -> autodiff::Result<Vec<Option<Matrix<T>>>> {
        let scales = self.scales(inputs[0])?;
        let eta = self.eta(inputs);
        let want_eta = needs.get(1).copied().unwrap_or(false);
        let layout = RowLayout::new(&self.config);
        let per_row = self.config.noise_per_row();
        let k = eta.len();
        // Per-row partials reduced in row order for reproducibility.
        let partials: Vec<([T; 4], Vec<T>)> = grad_output
            .data()
            .par_chunks(self.points.rows())
            .zip(self.noise.par_chunks(per_row))
            .map(|(g, noise)| {
                let mut dlv = [T::zero(); 4];
                let mut deta = vec![T::zero(); if want_eta { k } else { 0 }];
                row_backward(
                    &layout, &self.config, noise, &scales, &self.act, eta, &self.points, g,
                    want_eta, &mut dlv, &mut deta,
                );
                (dlv, deta)
            })
            .collect();
        let mut dlv = [T::zero(); 4];
        let mut deta = vec![T::zero(); k];
        for (l, e) in &partials {
            for i in 0..4 {
                dlv[i] += l[i];
            }
            for (d, v) in deta.iter_mut().zip(e) {
                *d += *v;
            }
        }
        let mut out = vec![needs[0].then(|| Matrix::column(dlv.to_vec()))];
        if inputs.len() > 1 {
            out.push(want_eta.then(|| Matrix::column(deta)));
        }
        Ok(out)
    }

    fn box_clone(&self) -> Box<dyn CustomOp<T>> {
        Box::new(self.clone())
    }
}

/// Adds a sampler node to `graph`. `log_vars` must evaluate to a 4×1 column;
/// `eta`, when given, to a column of the activation's parameter count.
#[allow(clippy::too_many_arguments)]
pub fn bnn_sample_node<T: Scalar, A: Activation<T> + Clone + 'static>(
    graph: &mut Graph<T>,
    config: &BnnConfig,
    act: A,
    frozen_eta: Vec<T>,
    x: &MeasurementSet<T>,
    count: usize,
    seed: u64,
    log_vars: NodeId,
    eta: Option<NodeId>,
) -> Result<NodeId> {
    let op = BnnSamplerOp::new(*config, act, frozen_eta, x, count, seed)?;
    let inputs: Vec<NodeId> = std::iter::once(log_vars).chain(eta).collect();
    Ok(graph.custom(Box::new(op), &inputs))
}

/// Column means and unbiased covariance (`+ jitter·I`, symmetrized).
pub fn mc_summary<T: Scalar>(batch: &FunctionSampleBatch<T>, jitter: T) -> GaussianSummary<T> {
    summarize(&batch.values, jitter)
}

pub(crate) fn summarize<T: Scalar>(values: &Matrix<T>, jitter: T) -> GaussianSummary<T> {
    let (s, n) = values.shape();
    if s < n {
        log::warn!("covariance from {s} samples at {n} points is rank deficient");
    }
    let count = lit::<T>(s as f64);
    let mut mean = vec![T::zero(); n];
    for r in 0..s {
        for (m, &v) in mean.iter_mut().zip(values.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / count);
    let centered = Matrix::from_fn(s, n, |r, c| values[(r, c)] - mean[c]);
    let denom = lit::<T>((s.max(2) - 1) as f64);
    let cov = centered
        .t_matmul(&centered)
        .scale(T::one() / denom)
        .add_diag(jitter)
        .symmetrize();
    GaussianSummary { mean, cov }
}
