//! Closed-form squared 2-Wasserstein distance between Gaussians and the
//! prior-matching loss built on it.
//!
//! `W₂²(N(μ₁,Σ₁), N(μ₂,Σ₂)) = ‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2·(R·Σ₂·R)^{1/2})`,
//! `R = Σ₁^{1/2}`. In the loss the target (GP) summary takes the `R` slot:
//! its root is a constant, so only one square root is differentiated.

use serde::{Deserialize, Serialize};

use crate::activations::Activation;
use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::bnn::{self, BnnConfig, PriorParams, SampleSource};
use crate::error::{Error, Result};
use crate::gp::{self, GpPriorSpec, MeasurementSet};
use crate::linalg::{self, Matrix, DEFAULT_SQRT_ITERS};
use crate::random::derive_seed;
use crate::scalar::{lit, Scalar};

/// Jitter added to sample covariances before taking square roots.
pub const DEFAULT_COV_JITTER: f64 = 1e-6;
/// Jitter on the inner product `R·Σ·R`; absorbs tiny negative eigenvalues.
pub const INNER_JITTER: f64 = 1e-12;
/// Values above `−NEGATIVE_TOL` are clamped to zero.
pub const NEGATIVE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSummary<T: Scalar> {
    pub mean: Vec<T>,
    pub cov: Matrix<T>,
}

impl<T: Scalar> GaussianSummary<T> {
    pub fn new(mean: Vec<T>, cov: Matrix<T>) -> Result<Self> {
        if cov.rows() != mean.len() || cov.cols() != mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "mean of length {} with covariance {:?}",
                mean.len(),
                cov.shape()
            )));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn check_dims<T: Scalar>(a: &GaussianSummary<T>, b: &GaussianSummary<T>) -> Result<()> {
    if a.dim() != b.dim() || a.cov.shape() != b.cov.shape() {
        return Err(Error::DimensionMismatch(format!(
            "Gaussian dimensions {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Squared 2-Wasserstein distance with `sqrt_iters` Newton–Schulz steps.
pub fn w2_gaussian_iters<T: Scalar>(
    g1: &GaussianSummary<T>,
    g2: &GaussianSummary<T>,
    sqrt_iters: usize,
) -> Result<T> {
    check_dims(g1, g2)?;
    let s1 = linalg::assert_spd_input(&g1.cov)?;
    let s2 = linalg::assert_spd_input(&g2.cov)?;
    let r = linalg::sqrt_spd_unchecked(&s1, sqrt_iters);
    Ok(clamp_negative(w2_with_root(&g1.mean, &s1, &r, &g2.mean, &s2, sqrt_iters)))
}

/// Squared 2-Wasserstein distance with the default iteration count.
pub fn w2_gaussian<T: Scalar>(g1: &GaussianSummary<T>, g2: &GaussianSummary<T>) -> Result<T> {
    w2_gaussian_iters(g1, g2, DEFAULT_SQRT_ITERS)
}

fn clamp_negative<T: Scalar>(v: T) -> T {
    if v < T::zero() && v > -lit::<T>(NEGATIVE_TOL) {
        T::zero()
    } else {
        v
    }
}

/// Unclamped formula value given `r = √Σ₁`. Operation order matches
/// [`w2_graph`].
fn w2_with_root<T: Scalar>(
    m1: &[T],
    s1: &Matrix<T>,
    r: &Matrix<T>,
    m2: &[T],
    s2: &Matrix<T>,
    sqrt_iters: usize,
) -> T {
    let n = m1.len();
    let diff = Matrix::new(1, n, m1.iter().zip(m2).map(|(&a, &b)| b - a).collect()).unwrap();
    let mean_term: T = diff.data().iter().map(|&d| d * d).sum();
    let inner = r.matmul(s2).matmul(r).add_diag(lit(INNER_JITTER)).symmetrize();
    let root = linalg::sqrt_spd_unchecked(&inner, sqrt_iters);
    mean_term + s2.trace() + s1.trace() - lit::<T>(2.0) * root.trace()
}

/// Records `W₂²(target, model)` in `graph`, with `mean` a `1×N` node and `cov`
/// an `N×N` node for the model side.
pub fn w2_graph<T: Scalar>(
    graph: &mut Graph<T>,
    target: &GaussianSummary<T>,
    target_root: &Matrix<T>,
    mean: NodeId,
    cov: NodeId,
    sqrt_iters: usize,
) -> NodeId {
    let n = target.dim();
    let mu = graph.constant(Matrix::new(1, n, target.mean.clone()).unwrap());
    let diff = graph.sub(mean, mu);
    let sq = graph.square(diff);
    let mean_term = graph.sum(sq);
    let r = graph.constant(target_root.clone());
    let rs = graph.matmul(r, cov);
    let rsr = graph.matmul(rs, r);
    let jit = graph.add_identity(rsr, lit(INNER_JITTER));
    let inner = graph.symmetrize(jit);
    let root = graph.sqrt_spd(inner, sqrt_iters, n);
    let root_tr = graph.trace(root);
    let cov_tr = graph.trace(cov);
    let t1 = graph.add(mean_term, cov_tr);
    let t2 = graph.add_const(t1, target.cov.trace());
    let two_root = graph.scale(root_tr, lit(2.0));
    graph.sub(t2, two_root)
}

/// Records a `1×N` mean node and the `N×N` unbiased covariance node of an
/// `S×N` sample node; same arithmetic as [`bnn::mc_summary`].
pub fn summary_graph<T: Scalar>(
    graph: &mut Graph<T>,
    samples: NodeId,
    count: usize,
    jitter: T,
) -> (NodeId, NodeId) {
    let mean = graph.col_mean(samples);
    let centered = graph.sub(samples, mean);
    let ct = graph.transpose(centered);
    let gram = graph.matmul(ct, centered);
    let scaled = graph.scale(gram, T::one() / lit((count.max(2) - 1) as f64));
    let jit = graph.add_identity(scaled, jitter);
    let cov = graph.symmetrize(jit);
    (mean, cov)
}

/// Anything that produces target function samples at a measurement set.
pub trait TargetSampler<T: Scalar>: Sync {
    fn sample(&self, x: &MeasurementSet<T>, count: usize, seed: u64) -> Result<Matrix<T>>;
}

impl<T: Scalar> TargetSampler<T> for GpPriorSpec {
    fn sample(&self, x: &MeasurementSet<T>, count: usize, seed: u64) -> Result<Matrix<T>> {
        Ok(gp::gp_sample_prior(self, x, count, seed)?.values)
    }
}

/// A BNN with known parameters used as the matching target.
#[derive(Debug, Clone)]
pub struct BnnTeacher<T: Scalar, A> {
    pub config: BnnConfig,
    pub params: PriorParams<T>,
    pub act: A,
    pub eta: Vec<T>,
}

impl<T: Scalar, A: Activation<T>> TargetSampler<T> for BnnTeacher<T, A> {
    fn sample(&self, x: &MeasurementSet<T>, count: usize, seed: u64) -> Result<Matrix<T>> {
        Ok(bnn::bnn_sample_functions(&self.config, &self.params, &self.act, &self.eta, x, count, seed)?
            .values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSettings {
    pub s_fn: usize,
    pub cov_jitter: f64,
    pub sqrt_iters: usize,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self { s_fn: 512, cov_jitter: DEFAULT_COV_JITTER, sqrt_iters: DEFAULT_SQRT_ITERS }
    }
}

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub log_vars: bool,
    pub eta: bool,
}

/// Loss value with gradients for the trainable groups (zeros otherwise).
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval<T> {
    pub loss: T,
    pub grad_log_vars: [T; 4],
    pub grad_eta: Vec<T>,
}

/// Seeds used for measurement set `k` of a loss evaluation.
pub(crate) fn set_seeds(seed: u64, k: usize) -> (u64, u64) {
    (derive_seed(seed, &[k as u64, 0]), derive_seed(seed, &[k as u64, 1]))
}

/// Target summary and its square root for one measurement set.
fn target_summary<T: Scalar>(
    target: &dyn TargetSampler<T>,
    x: &MeasurementSet<T>,
    settings: &LossSettings,
    seed: u64,
) -> Result<(GaussianSummary<T>, Matrix<T>)> {
    let values = target.sample(x, settings.s_fn, seed)?;
    let summary = bnn::summarize(&values, lit(settings.cov_jitter));
    let root = linalg::sqrt_spd_unchecked(&summary.cov, settings.sqrt_iters);
    Ok((summary, root))
}

/// Average over `x_batch` of `W₂²(target, model) / N`, with gradients.
#[allow(clippy::too_many_arguments)]
pub fn matching_loss<T: Scalar, A: Activation<T> + Clone + 'static>(
    config: &BnnConfig,
    params: &PriorParams<T>,
    act: &A,
    eta: &[T],
    target: &dyn TargetSampler<T>,
    x_batch: &[MeasurementSet<T>],
    settings: &LossSettings,
    seed: u64,
    trainable: Trainable,
) -> Result<LossEval<T>> {
    if x_batch.is_empty() {
        return Err(Error::InvalidConfig("empty measurement-set batch".into()));
    }
    let mut graph = Graph::new();
    let mut store = ParamStore::new();
    let lv = if trainable.log_vars {
        store.insert("log_var", params.to_array().to_vec())?;
        graph.param("log_var")
    } else {
        graph.constant(Matrix::column(params.to_array().to_vec()))
    };
    let eta_node = if trainable.eta && !eta.is_empty() {
        store.insert("eta", eta.to_vec())?;
        Some(graph.param("eta"))
    } else {
        None
    };
    let mut total: Option<NodeId> = None;
    for (k, x) in x_batch.iter().enumerate() {
        let (bnn_seed, target_seed) = set_seeds(seed, k);
        let (tgt, root) = target_summary(target, x, settings, target_seed)?;
        let f = bnn::bnn_sample_node(
            &mut graph, config, act.clone(), eta.to_vec(), x, settings.s_fn, bnn_seed, lv, eta_node,
        )?;
        let (mean, cov) = summary_graph(&mut graph, f, settings.s_fn, lit(settings.cov_jitter));
        let w2 = w2_graph(&mut graph, &tgt, &root, mean, cov, settings.sqrt_iters);
        let per_point = graph.scale(w2, T::one() / lit(x.len() as f64));
        total = Some(match total {
            None => per_point,
            Some(t) => graph.add(t, per_point),
        });
    }
    let out = graph.scale(total.expect("non-empty batch"), T::one() / lit(x_batch.len() as f64));
    graph.set_output(out);
    let loss = graph.forward(&store)?;
    let mut grad_log_vars = [T::zero(); 4];
    let mut grad_eta = vec![T::zero(); eta.len()];
    if trainable.log_vars || eta_node.is_some() {
        graph.backward(&mut store)?;
        if trainable.log_vars {
            grad_log_vars.copy_from_slice(store.grad("log_var")?);
        }
        if eta_node.is_some() {
            grad_eta.copy_from_slice(store.grad("eta")?);
        }
    }
    Ok(LossEval { loss, grad_log_vars, grad_eta })
}

/// Forward-only evaluation of [`matching_loss`] without the graph. Returns
/// the per-set values `W₂²/N` (unclamped, to stay comparable with the
/// differentiable path).
#[allow(clippy::too_many_arguments)]
pub fn matching_loss_per_set<T: Scalar, A: Activation<T>>(
    config: &BnnConfig,
    params: &PriorParams<T>,
    act: &A,
    eta: &[T],
    target: &dyn TargetSampler<T>,
    x_batch: &[MeasurementSet<T>],
    settings: &LossSettings,
    seed: u64,
) -> Result<Vec<T>> {
    x_batch
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let (bnn_seed, target_seed) = set_seeds(seed, k);
            let (tgt, root) = target_summary(target, x, settings, target_seed)?;
            let f = bnn::bnn_sample_functions(config, params, act, eta, x, settings.s_fn, bnn_seed)?;
            let model = bnn::mc_summary(&f, lit(settings.cov_jitter));
            let v = w2_with_root(&tgt.mean, &tgt.cov, &root, &model.mean, &model.cov, settings.sqrt_iters);
            Ok(v / lit(x.len() as f64))
        })
        .collect()
}

/// `W₂²/N` from raw target and model sample matrices, computed exactly as
/// in [`matching_loss_per_set`].
pub(crate) fn set_loss_from_values<T: Scalar>(target: &Matrix<T>, model: &Matrix<T>, settings: &LossSettings) -> T {
    let tgt = bnn::summarize(target, lit(settings.cov_jitter));
    let root = linalg::sqrt_spd_unchecked(&tgt.cov, settings.sqrt_iters);
    let m = bnn::summarize(model, lit(settings.cov_jitter));
    w2_with_root(&tgt.mean, &tgt.cov, &root, &m.mean, &m.cov, settings.sqrt_iters) / lit(target.cols() as f64)
}

/// `W₂²/N` between two independent target batches: the Monte Carlo floor of
/// the loss at this sample count.
pub fn self_distance<T: Scalar>(
    target: &dyn TargetSampler<T>,
    x: &MeasurementSet<T>,
    settings: &LossSettings,
    seed: u64,
) -> Result<T> {
    let (a, root) = target_summary(target, x, settings, derive_seed(seed, &[0]))?;
    let b = bnn::summarize(&target.sample(x, settings.s_fn, derive_seed(seed, &[1]))?, lit(settings.cov_jitter));
    Ok(w2_with_root(&a.mean, &a.cov, &root, &b.mean, &b.cov, settings.sqrt_iters) / lit(x.len() as f64))
}

/// Tag for batches produced by a [`TargetSampler`].
pub fn target_batch<T: Scalar>(
    target: &dyn TargetSampler<T>,
    x: &MeasurementSet<T>,
    count: usize,
    seed: u64,
) -> Result<bnn::FunctionSampleBatch<T>> {
    Ok(bnn::FunctionSampleBatch::new(target.sample(x, count, seed)?, x.points().clone(), SampleSource::Gp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::{act_init, ActivationKind, ActivationModel};
    use crate::gp::KernelSpec;
    use crate::linalg::testing::random_spd;
    use crate::random::stream_rng;
    use rand::Rng;

    fn diag(v: &[f64]) -> GaussianSummary<f64> {
        GaussianSummary::new(vec![0.0; v.len()], Matrix::from_diag(v)).unwrap()
    }

    /// W₂² with eigendecomposition square roots and the formula as written.
    fn w2_eigen(a: &GaussianSummary<f64>, b: &GaussianSummary<f64>) -> f64 {
        let ra = linalg::sqrt_spd_eigen(&a.cov).unwrap();
        let inner = ra.matmul(&b.cov).matmul(&ra).symmetrize();
        let root = linalg::sqrt_spd_eigen(&inner).unwrap();
        let m: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
        m + a.cov.trace() + b.cov.trace() - 2.0 * root.trace()
    }

    #[test]
    fn identical_is_zero() {
        let mut rng = stream_rng(1, 0);
        let cov = random_spd(6, 50.0, 2.0, &mut rng);
        let g = GaussianSummary::new(vec![0.3; 6], cov).unwrap();
        assert!(w2_gaussian(&g, &g).unwrap().abs() < 1e-8);
    }

    #[test]
    fn one_dimensional_shift() {
        let a = diag(&[1.0]);
        let b = GaussianSummary::new(vec![3.0], Matrix::from_diag(&[1.0])).unwrap();
        assert!((w2_gaussian(&a, &b).unwrap() - 9.0).abs() < 1e-9);
    }

    #[test]
    fn diagonal_case() {
        let v = w2_gaussian(&diag(&[4.0, 1.0]), &diag(&[1.0, 1.0])).unwrap();
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn random_pairs_match_eigen_oracle_and_are_symmetric() {
        let mut rng = stream_rng(2, 0);
        for n in [2, 5, 12] {
            let a = GaussianSummary::new(
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                random_spd(n, 20.0, 1.0, &mut rng),
            )
            .unwrap();
            let b = GaussianSummary::new(
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                random_spd(n, 20.0, 1.0, &mut rng),
            )
            .unwrap();
            let ab = w2_gaussian(&a, &b).unwrap();
            let ba = w2_gaussian(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-8);
            assert!((ab - w2_eigen(&a, &b)).abs() < 1e-8);
        }
    }

    #[test]
    fn mean_shift_invariance_and_triangle() {
        let mut rng = stream_rng(3, 0);
        let n = 4;
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            GaussianSummary::new(
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                random_spd(n, 10.0, 1.0, rng),
            )
            .unwrap()
        };
        for _ in 0..20 {
            let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let shift: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let mv = |g: &GaussianSummary<f64>| {
                GaussianSummary::new(g.mean.iter().zip(&shift).map(|(m, s)| m + s).collect(), g.cov.clone())
                    .unwrap()
            };
            let ab = w2_gaussian(&a, &b).unwrap();
            assert!((ab - w2_gaussian(&mv(&a), &mv(&b)).unwrap()).abs() < 1e-10);
            let ac = w2_gaussian(&a, &c).unwrap();
            let bc = w2_gaussian(&b, &c).unwrap();
            assert!(ac <= (ab.sqrt() + bc.sqrt()).powi(2) + 1e-6);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        assert!(w2_gaussian(&diag(&[1.0]), &diag(&[1.0, 2.0])).is_err());
    }

    fn setup() -> (BnnConfig, ActivationModel<f64>, GpPriorSpec, Vec<MeasurementSet<f64>>) {
        let cfg = BnnConfig::new(1, 40);
        let act = act_init::<f64>(ActivationKind::MiniMlp, 1);
        let gp = GpPriorSpec::noiseless(KernelSpec::matern52(1.0, 1.0));
        let xs = vec![
            MeasurementSet::new(Matrix::column(vec![-2.0, -0.5, 0.3, 1.7])).unwrap(),
            MeasurementSet::new(Matrix::column(vec![-1.0, 0.9, 2.5])).unwrap(),
        ];
        (cfg, act, gp, xs)
    }

    #[test]
    fn graph_loss_matches_forward_evaluator() {
        let (cfg, act, gp, xs) = setup();
        let p = PriorParams::from_array([0.1, 0.4, -0.2, -1.0]);
        let settings = LossSettings { s_fn: 64, ..Default::default() };
        let all = Trainable { log_vars: true, eta: true };
        let ev = matching_loss(&cfg, &p, &act, &act.eta, &gp, &xs, &settings, 9, all).unwrap();
        let per_set = matching_loss_per_set(&cfg, &p, &act, &act.eta, &gp, &xs, &settings, 9).unwrap();
        let mean = per_set.iter().sum::<f64>() / per_set.len() as f64;
        assert!((ev.loss - mean).abs() < 1e-10, "{} vs {}", ev.loss, mean);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let (cfg, act, gp, xs) = setup();
        let p = PriorParams::from_array([0.1, 0.4, -0.2, -1.0]);
        let settings = LossSettings { s_fn: 64, ..Default::default() };
        let all = Trainable { log_vars: true, eta: true };
        let ev = matching_loss(&cfg, &p, &act, &act.eta, &gp, &xs, &settings, 9, all).unwrap();
        let value = |lv: [f64; 4], eta: &[f64]| {
            let pp = PriorParams::from_array(lv);
            let v = matching_loss_per_set(&cfg, &pp, &act, eta, &gp, &xs, &settings, 9).unwrap();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let h = 1e-5;
        let check = |fd: f64, ad: f64, what: &str| {
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-4);
            assert!(rel < 1e-4, "{what}: fd {fd} ad {ad}");
        };
        for i in 0..4 {
            let mut up = p.to_array();
            let mut dn = p.to_array();
            up[i] += h;
            dn[i] -= h;
            check((value(up, &act.eta) - value(dn, &act.eta)) / (2.0 * h), ev.grad_log_vars[i], "log_var");
        }
        for k in 0..act.eta.len() {
            let mut up = act.eta.clone();
            let mut dn = act.eta.clone();
            up[k] += h;
            dn[k] -= h;
            check((value(p.to_array(), &up) - value(p.to_array(), &dn)) / (2.0 * h), ev.grad_eta[k], "eta");
        }
    }

    #[test]
    fn zero_variance_model_costs_trace_of_target() {
        let (mut cfg, act, gp, _) = setup();
        cfg.remove_output_bias = true;
        cfg.hidden_width = 8;
        let lv = 2.0 * (1e-6f64).ln();
        let p = PriorParams::from_array([lv; 4]);
        let x = MeasurementSet::<f64>::grid_1d(-3.0, 3.0, 6).unwrap();
        let settings = LossSettings { s_fn: 4096, ..Default::default() };
        let v = matching_loss_per_set(&cfg, &p, &act, &act.eta, &gp, &[x], &settings, 2).unwrap()[0];
        // amplitude² = 1; sample-trace error ≈ √(2/S) relative
        assert!((v - 1.0).abs() < 0.1, "{v}");
    }

    #[test]
    fn self_distance_floor_shrinks_with_samples() {
        let gp = GpPriorSpec::noiseless(KernelSpec::matern52(1.0, 1.0));
        let x = MeasurementSet::<f64>::grid_1d(-4.0, 4.0, 8).unwrap();
        let mut floors = Vec::new();
        for s in [64usize, 256, 1024] {
            let settings = LossSettings { s_fn: s, ..Default::default() };
            let mean = (0..20)
                .map(|r| self_distance(&gp, &x, &settings, r).unwrap())
                .sum::<f64>()
                / 20.0;
            floors.push(mean);
        }
        assert!(floors[0] > floors[1] && floors[1] > floors[2], "{floors:?}");
    }

    #[test]
    fn gp_oracle_swap_sits_at_the_floor() {
        // the "model" here is a second GP sampler: the loss must match the
        // self-distance floor within Monte Carlo error
        let gp = GpPriorSpec::noiseless(KernelSpec::matern52(1.0, 1.0));
        let x = MeasurementSet::<f64>::grid_1d(-4.0, 4.0, 8).unwrap();
        let settings = LossSettings { s_fn: 256, ..Default::default() };
        let runs = 30;
        let mut swap = Vec::new();
        let mut floor = Vec::new();
        for r in 0..runs {
            let (tgt, root) = target_summary(&gp, &x, &settings, 100 + r).unwrap();
            let model = bnn::summarize(&gp.sample(&x, 256, 500 + r).unwrap(), 1e-6);
            swap.push(w2_with_root(&tgt.mean, &tgt.cov, &root, &model.mean, &model.cov, 25) / 8.0);
            floor.push(self_distance(&gp, &x, &settings, 900 + r).unwrap());
        }
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let sd = (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
            (m, sd / (v.len() as f64).sqrt())
        };
        let (ms, ses) = stats(&swap);
        let (mf, sef) = stats(&floor);
        assert!((ms - mf).abs() < 3.0 * (ses * ses + sef * sef).sqrt(), "{ms} vs {mf}");
    }
}
