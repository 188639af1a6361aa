//! Hamiltonian Monte Carlo with an identity mass matrix, leapfrog
//! integration, dual-averaging step-size adaptation and split-R̂ diagnostics.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, ParamStore};
use crate::linalg::Matrix;
use crate::random::{self, stream_rng};
use crate::scalar::Scalar;

/// Energy error beyond which a transition is counted as divergent.
pub const DIVERGENCE_ENERGY: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HmcError {
    #[error("non-finite log density or gradient at the initial point of chain {chain}")]
    NonFiniteGradient { chain: usize },
    #[error("chain {chain} acceptance {acceptance:.3} is below the floor {floor}")]
    DivergentChain {
        chain: usize,
        acceptance: f64,
        floor: f64,
        diagnostics: Box<HmcDiagnostics>,
    },
    #[error("invalid HMC configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub warmup: usize,
    pub draws: usize,
    pub chains: usize,
    pub seed: u64,
    pub adapt_step_size: bool,
    pub target_accept: f64,
    /// Each transition uses `step·U(1−j, 1+j)`; breaks periodic trajectories.
    pub step_jitter: f64,
    pub min_acceptance: f64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            leapfrog_steps: 32,
            warmup: 500,
            draws: 1000,
            chains: 4,
            seed: 0,
            adapt_step_size: true,
            target_accept: 0.8,
            step_jitter: 0.2,
            min_acceptance: 0.1,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<(), HmcError> {
        let bad = |m: &str| Err(HmcError::InvalidConfig(m.to_string()));
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size must be positive");
        }
        if self.leapfrog_steps == 0 {
            return bad("leapfrog_steps must be at least 1");
        }
        if self.draws == 0 || self.chains == 0 {
            return bad("draws and chains must be at least 1");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return bad("target_accept must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.step_jitter) {
            return bad("step_jitter must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Unnormalized log density with gradient.
pub trait LogDensity<T: Scalar>: Sync {
    fn dim(&self) -> usize;

    /// Writes `∇ log p(q)` into `grad` and returns `log p(q)`.
    fn log_density_grad(&self, q: &[T], grad: &mut [T]) -> T;
}

/// Log density given by a closure.
pub struct FnDensity<F> {
    pub dim: usize,
    pub f: F,
}

impl<T: Scalar, F: Fn(&[T], &mut [T]) -> T + Sync> LogDensity<T> for FnDensity<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_density_grad(&self, q: &[T], grad: &mut [T]) -> T {
        (self.f)(q, grad)
    }
}

/// Log density defined by an autodiff graph whose output is `log p` and
/// whose only parameter slot `name` holds the position.
pub struct GraphDensity<T: Scalar> {
    graph: Graph<T>,
    name: String,
    dim: usize,
}

impl<T: Scalar> GraphDensity<T> {
    pub fn new(graph: Graph<T>, name: &str, dim: usize) -> Self {
        Self { graph, name: name.to_string(), dim }
    }
}

impl<T: Scalar> LogDensity<T> for GraphDensity<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density_grad(&self, q: &[T], grad: &mut [T]) -> T {
        let mut g = self.graph.clone();
        let mut store = ParamStore::new();
        store.insert(&self.name, q.to_vec()).expect("fresh store");
        let lp = match g.forward(&store).and_then(|v| g.backward(&mut store).map(|_| v)) {
            Ok(v) => v,
            Err(_) => return T::nan(),
        };
        grad.copy_from_slice(store.grad(&self.name).expect("slot exists"));
        lp
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmcDiagnostics {
    pub per_chain_acceptance: Vec<f64>,
    pub step_sizes: Vec<f64>,
    pub divergences: Vec<usize>,
    /// Split-chain potential scale reduction per coordinate.
    pub rhat: Vec<f64>,
    pub max_rhat: f64,
}

#[derive(Debug, Clone)]
pub struct HmcOutput<T: Scalar> {
    /// `(chains · draws) × dim`, chain-major.
    pub samples: Matrix<T>,
    pub draws_per_chain: usize,
    pub acceptance_rate: f64,
    pub diagnostics: HmcDiagnostics,
}

impl<T: Scalar> HmcOutput<T> {
    pub fn chain(&self, c: usize) -> impl Iterator<Item = &[T]> {
        (c * self.draws_per_chain..(c + 1) * self.draws_per_chain).map(move |i| self.samples.row(i))
    }
}

/// State of one leapfrog trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint<T> {
    pub q: Vec<T>,
    pub p: Vec<T>,
    pub grad: Vec<T>,
    pub log_density: T,
}

/// `steps` leapfrog steps of size `eps` for `H = −log p(q) + ½|p|²`.
/// Stops early (returning a non-finite log density) if the trajectory leaves
/// the finite region.
pub fn leapfrog<T: Scalar, D: LogDensity<T> + ?Sized>(
    target: &D,
    start: &PhasePoint<T>,
    eps: T,
    steps: usize,
) -> PhasePoint<T> {
    let half = eps * T::lit(0.5);
    let mut q = start.q.clone();
    let mut p = start.p.clone();
    let mut grad = start.grad.clone();
    let mut lp = start.log_density;
    for _ in 0..steps {
        for (pi, &gi) in p.iter_mut().zip(&grad) {
            *pi += half * gi;
        }
        for (qi, &pi) in q.iter_mut().zip(&p) {
            *qi += eps * pi;
        }
        lp = target.log_density_grad(&q, &mut grad);
        if !lp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return PhasePoint { q, p, grad, log_density: T::nan() };
        }
        for (pi, &gi) in p.iter_mut().zip(&grad) {
            *pi += half * gi;
        }
    }
    PhasePoint { q, p, grad, log_density: lp }
}

fn hamiltonian<T: Scalar>(pt: &PhasePoint<T>) -> f64 {
    let k: T = pt.p.iter().map(|&v| v * v).sum::<T>() * T::lit(0.5);
    (k - pt.log_density).as_f64()
}

/// Dual averaging of the log step size toward a target acceptance.
#[derive(Debug, Clone)]
struct DualAveraging {
    mu: f64,
    target: f64,
    h_bar: f64,
    log_eps: f64,
    log_eps_bar: f64,
    t: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps0: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * eps0).ln(),
            target,
            h_bar: 0.0,
            log_eps: eps0.ln(),
            log_eps_bar: 0.0,
            t: 0.0,
        }
    }

    fn update(&mut self, accept_prob: f64) {
        self.t += 1.0;
        let w = 1.0 / (self.t + Self::T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob);
        self.log_eps = self.mu - self.t.sqrt() / Self::GAMMA * self.h_bar;
        let eta = self.t.powf(-Self::KAPPA);
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar;
    }

    fn current(&self) -> f64 {
        self.log_eps.exp()
    }

    fn final_step(&self) -> f64 {
        if self.t == 0.0 {
            self.current()
        } else {
            self.log_eps_bar.exp()
        }
    }
}

fn sample_momentum<T: Scalar, R: Rng>(rng: &mut R, p: &mut [T]) {
    random::fill_normal(rng, p);
}

fn accept_prob(h0: f64, h1: f64) -> f64 {
    let a = (h0 - h1).exp().min(1.0);
    if a.is_nan() {
        0.0
    } else {
        a
    }
}

/// Doubles or halves the step until a single leapfrog step's acceptance
/// probability crosses 0.5.
fn find_reasonable_step<T: Scalar, D: LogDensity<T> + ?Sized, R: Rng>(
    target: &D,
    start: &PhasePoint<T>,
    eps0: f64,
    rng: &mut R,
) -> f64 {
    let mut eps = eps0;
    let mut pt = start.clone();
    sample_momentum(rng, &mut pt.p);
    let h0 = hamiltonian(&pt);
    let a0 = accept_prob(h0, hamiltonian(&leapfrog(target, &pt, T::lit(eps), 1)));
    let dir = if a0 > 0.5 { 1.0 } else { -1.0 };
    for _ in 0..100 {
        let next = eps * 2f64.powf(dir);
        let a = accept_prob(h0, hamiltonian(&leapfrog(target, &pt, T::lit(next), 1)));
        let crossed = if dir > 0.0 { a <= 0.5 } else { a > 0.5 };
        eps = next;
        if crossed {
            break;
        }
    }
    if dir > 0.0 {
        eps / 2.0
    } else {
        eps
    }
}

struct ChainResult<T> {
    draws: Vec<Vec<T>>,
    acceptance: f64,
    step: f64,
    divergences: usize,
}

fn run_chain<T: Scalar, D: LogDensity<T> + ?Sized>(
    target: &D,
    init: &[T],
    config: &HmcConfig,
    chain: usize,
) -> Result<ChainResult<T>, HmcError> {
    let mut rng = stream_rng(random::derive_seed(config.seed, &[0x484d43]), chain as u64);
    let dim = init.len();
    let mut grad = vec![T::zero(); dim];
    let lp = target.log_density_grad(init, &mut grad);
    if !lp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(HmcError::NonFiniteGradient { chain });
    }
    let mut current = PhasePoint { q: init.to_vec(), p: vec![T::zero(); dim], grad, log_density: lp };

    let mut eps = config.step_size;
    if config.adapt_step_size {
        eps = find_reasonable_step(target, &current, eps, &mut rng);
    }
    let mut da = DualAveraging::new(eps, config.target_accept);
    let mut draws = Vec::with_capacity(config.draws);
    let mut accepted = 0usize;
    let mut divergences = 0usize;
    let total = config.warmup + config.draws;
    for it in 0..total {
        let warm = it < config.warmup;
        let base = if config.adapt_step_size && warm { da.current() } else { eps };
        let jitter = if config.step_jitter > 0.0 {
            1.0 + config.step_jitter * (2.0 * rng.random::<f64>() - 1.0)
        } else {
            1.0
        };
        sample_momentum(&mut rng, &mut current.p);
        let h0 = hamiltonian(&current);
        let proposal = leapfrog(target, &current, T::lit(base * jitter), config.leapfrog_steps);
        let h1 = hamiltonian(&proposal);
        let a = if proposal.log_density.is_finite() { accept_prob(h0, h1) } else { 0.0 };
        if !warm && (!(h1 - h0 < DIVERGENCE_ENERGY)) {
            divergences += 1;
        }
        let u: f64 = rng.random();
        let accept = u < a;
        if accept {
            current = proposal;
        }
        if warm {
            if config.adapt_step_size {
                da.update(a);
                if it + 1 == config.warmup {
                    eps = da.final_step();
                }
            }
        } else {
            accepted += accept as usize;
            draws.push(current.q.clone());
        }
    }
    Ok(ChainResult {
        draws,
        acceptance: accepted as f64 / config.draws as f64,
        step: eps,
        divergences,
    })
}

/// Split-R̂ for one coordinate across chains.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let mut seqs: Vec<&[f64]> = Vec::new();
    for c in chains {
        let half = c.len() / 2;
        if half < 2 {
            return f64::NAN;
        }
        seqs.push(&c[..half]);
        seqs.push(&c[c.len() - half..]);
    }
    let n = seqs[0].len() as f64;
    let m = seqs.len() as f64;
    let means: Vec<f64> = seqs.iter().map(|s| s.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>();
    let w = seqs
        .iter()
        .zip(&means)
        .map(|(s, mu)| s.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    if w == 0.0 {
        return 1.0;
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

/// Runs `config.chains` chains from the same initial point.
pub fn hmc_sample<T: Scalar, D: LogDensity<T> + ?Sized>(
    target: &D,
    init: &[T],
    config: &HmcConfig,
) -> Result<HmcOutput<T>, HmcError> {
    let inits = vec![init.to_vec(); config.chains];
    hmc_sample_from(target, &inits, config)
}

/// Runs one chain per initial point (`inits.len()` must equal `config.chains`).
pub fn hmc_sample_from<T: Scalar, D: LogDensity<T> + ?Sized>(
    target: &D,
    inits: &[Vec<T>],
    config: &HmcConfig,
) -> Result<HmcOutput<T>, HmcError> {
    config.validate()?;
    if inits.len() != config.chains {
        return Err(HmcError::InvalidConfig(format!(
            "{} initial points for {} chains",
            inits.len(),
            config.chains
        )));
    }
    let dim = target.dim();
    if inits.iter().any(|q| q.len() != dim) {
        return Err(HmcError::InvalidConfig(format!("initial point dimension must be {dim}")));
    }
    let results: Vec<ChainResult<T>> = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(target, &inits[c], config, c))
        .collect::<Result<_, _>>()?;

    let rhat: Vec<f64> = (0..dim)
        .map(|d| {
            let per_chain: Vec<Vec<f64>> = results
                .iter()
                .map(|r| r.draws.iter().map(|q| q[d].as_f64()).collect())
                .collect();
            split_rhat(&per_chain)
        })
        .collect();
    let diagnostics = HmcDiagnostics {
        per_chain_acceptance: results.iter().map(|r| r.acceptance).collect(),
        step_sizes: results.iter().map(|r| r.step).collect(),
        divergences: results.iter().map(|r| r.divergences).collect(),
        max_rhat: rhat.iter().copied().fold(f64::NAN, f64::max),
        rhat,
    };
    if let Some((c, &acc)) = diagnostics
        .per_chain_acceptance
        .iter()
        .enumerate()
        .find(|(_, &a)| a < config.min_acceptance)
    {
        return Err(HmcError::DivergentChain {
            chain: c,
            acceptance: acc,
            floor: config.min_acceptance,
            diagnostics: Box::new(diagnostics),
        });
    }
    let acceptance_rate =
        diagnostics.per_chain_acceptance.iter().sum::<f64>() / config.chains as f64;
    let mut data = Vec::with_capacity(config.chains * config.draws * dim);
    for r in &results {
        for q in &r.draws {
            data.extend_from_slice(q);
        }
    }
    let samples = Matrix::new(config.chains * config.draws, dim, data).expect("consistent sizes");
    Ok(HmcOutput { samples, draws_per_chain: config.draws, acceptance_rate, diagnostics })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_1d(var: f64) -> impl LogDensity<f64> {
        FnDensity {
            dim: 1,
            f: move |q: &[f64], g: &mut [f64]| {
                g[0] = -q[0] / var;
                -0.5 * q[0] * q[0] / var
            },
        }
    }

    #[test]
    fn leapfrog_is_reversible() {
        // correlated Gaussian with precision P
        let target = FnDensity {
            dim: 2,
            f: |q: &[f64], g: &mut [f64]| {
                let (a, b, c) = (1.0 / 0.75, -0.5 / 0.75, 1.0 / 0.75);
                g[0] = -(a * q[0] + b * q[1]);
                g[1] = -(b * q[0] + c * q[1]);
                -0.5 * (a * q[0] * q[0] + 2.0 * b * q[0] * q[1] + c * q[1] * q[1])
            },
        };
        let mut grad = vec![0.0; 2];
        let q = vec![0.7, -1.2];
        let lp = target.log_density_grad(&q, &mut grad);
        let start = PhasePoint { q: q.clone(), p: vec![0.3, 0.9], grad, log_density: lp };
        let fwd = leapfrog(&target, &start, 0.1, 32);
        let back_start = PhasePoint { p: fwd.p.iter().map(|v| -v).collect(), ..fwd };
        let back = leapfrog(&target, &back_start, 0.1, 32);
        for (a, b) in back.q.iter().zip(&start.q) {
            assert!((a - b).abs() < 1e-8);
        }
        for (a, b) in back.p.iter().zip(&start.p) {
            assert!((a + b).abs() < 1e-8);
        }
    }

    #[test]
    fn same_seed_same_chains() {
        let t = gaussian_1d(1.0);
        let cfg = HmcConfig { warmup: 50, draws: 100, chains: 2, seed: 3, ..Default::default() };
        let a = hmc_sample(&t, &[0.5], &cfg).unwrap();
        let b = hmc_sample(&t, &[0.5], &cfg).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn step_adapts_to_tiny_scale() {
        let t = gaussian_1d(1e-6);
        let cfg = HmcConfig {
            warmup: 500,
            draws: 1000,
            chains: 1,
            leapfrog_steps: 8,
            seed: 1,
            ..Default::default()
        };
        let out = hmc_sample(&t, &[0.0], &cfg).unwrap();
        assert!(out.diagnostics.step_sizes[0] < 1e-2);
        assert!((0.6..=0.95).contains(&out.acceptance_rate), "{}", out.acceptance_rate);
    }

    #[test]
    fn divergent_chain_reported() {
        let t = gaussian_1d(1.0);
        let cfg = HmcConfig {
            step_size: 50.0,
            adapt_step_size: false,
            step_jitter: 0.0,
            warmup: 0,
            draws: 100,
            chains: 1,
            leapfrog_steps: 3,
            ..Default::default()
        };
        assert!(matches!(hmc_sample(&t, &[0.0], &cfg), Err(HmcError::DivergentChain { .. })));
    }

    #[test]
    fn non_finite_start_rejected() {
        let t = FnDensity { dim: 1, f: |_: &[f64], g: &mut [f64]| {
            g[0] = f64::NAN;
            0.0
        } };
        assert!(matches!(
            hmc_sample(&t, &[0.0], &HmcConfig::default()),
            Err(HmcError::NonFiniteGradient { .. })
        ));
    }

    #[test]
    fn graph_density_matches_closure() {
        let mut g = Graph::new();
        let q = g.param("q");
        let sq = g.square(q);
        let s = g.sum(sq);
        let lp = g.scale(s, -0.5);
        g.set_output(lp);
        let d = GraphDensity::new(g, "q", 3);
        let mut grad = vec![0.0; 3];
        let v: f64 = d.log_density_grad(&[1.0, -2.0, 0.5], &mut grad);
        assert!((v + 0.5 * 5.25).abs() < 1e-14);
        assert_eq!(grad, vec![-1.0, 2.0, -0.5]);
    }

    #[test]
    fn rhat_near_one_for_iid_chains() {
        let mut rng = stream_rng(1, 0);
        let chains: Vec<Vec<f64>> =
            (0..4).map(|_| (0..1000).map(|_| random::normal(&mut rng)).collect()).collect();
        assert!((split_rhat(&chains) - 1.0).abs() < 0.01);
        let shifted: Vec<Vec<f64>> =
            chains.iter().enumerate().map(|(i, c)| c.iter().map(|v| v + 3.0 * i as f64).collect()).collect();
        assert!(split_rhat(&shifted) > 1.5);
    }
}
