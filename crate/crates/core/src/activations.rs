//! Scalar activation models `φ(x | η)`: fixed baselines and three trainable
//! families (safe rational, continuous piecewise-linear, 5-unit SiLU MLP).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, CustomOp};
use crate::linalg::{self, Matrix};
use crate::scalar::{lit, Scalar};

pub const RATIONAL_NUM_DEGREE: usize = 5;
pub const RATIONAL_DEN_DEGREE: usize = 4;
pub const PWL_DEFAULT_KNOTS: usize = 16;
pub const PWL_DEFAULT_RANGE: (f64, f64) = (-3.0, 3.0);
pub const MINI_MLP_UNITS: usize = 5;
/// Grid used to fit the trainable families to SiLU at initialization.
pub const INIT_FIT_POINTS: usize = 401;
pub const INIT_FIT_RANGE: (f64, f64) = (-3.0, 3.0);
pub const MINI_MLP_INIT_STD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ActivationError {
    #[error("{kind} expects {expected} parameters, got {got}")]
    ParamCount {
        kind: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("piecewise-linear activation needs at least 2 knots and low < high")]
    BadKnots,
    #[error("unknown activation kind `{0}`")]
    UnknownKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationKind {
    FixedRelu,
    FixedTanh,
    FixedSilu,
    /// `P(x) / (1 + |Q̃(x)|)`, `P` of degree 5, `Q̃` of degree 4 without a
    /// constant term.
    Rational,
    /// Uniform knots on `[low, high]`; values at the knots and the two
    /// boundary slopes are the parameters.
    Pwl { knots: usize, low: f64, high: f64 },
    /// `Σ_k v_k·silu(a_k·x + c_k) + d` with 5 units.
    MiniMlp,
}

impl ActivationKind {
    pub fn pwl_default() -> Self {
        ActivationKind::Pwl {
            knots: PWL_DEFAULT_KNOTS,
            low: PWL_DEFAULT_RANGE.0,
            high: PWL_DEFAULT_RANGE.1,
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            ActivationKind::FixedRelu | ActivationKind::FixedTanh | ActivationKind::FixedSilu => 0,
            ActivationKind::Rational => RATIONAL_NUM_DEGREE + 1 + RATIONAL_DEN_DEGREE,
            ActivationKind::Pwl { knots, .. } => knots + 2,
            ActivationKind::MiniMlp => 3 * MINI_MLP_UNITS + 1,
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.n_params() > 0
    }

    pub fn name(&self) -> &'static str {
        match self {
            ActivationKind::FixedRelu => "fixed_relu",
            ActivationKind::FixedTanh => "fixed_tanh",
            ActivationKind::FixedSilu => "fixed_silu",
            ActivationKind::Rational => "rational",
            ActivationKind::Pwl { .. } => "pwl",
            ActivationKind::MiniMlp => "mini_mlp",
        }
    }

    /// Parses the short names used in configuration files.
    pub fn parse(name: &str) -> Result<Self, ActivationError> {
        Ok(match name {
            "relu" | "fixed_relu" => ActivationKind::FixedRelu,
            "tanh" | "fixed_tanh" => ActivationKind::FixedTanh,
            "silu" | "fixed_silu" => ActivationKind::FixedSilu,
            "rational" => ActivationKind::Rational,
            "pwl" => ActivationKind::pwl_default(),
            "mini_mlp" | "mlp" => ActivationKind::MiniMlp,
            other => return Err(ActivationError::UnknownKind(other.to_string())),
        })
    }
}

/// Elementwise activation with explicit parameters. `eta` is passed in so the
/// same model can be evaluated at parameter values held by an optimizer.
pub trait Activation<T: Scalar>: Send + Sync {
    fn n_params(&self) -> usize;

    fn eval(&self, eta: &[T], x: T) -> T;

    /// `(φ(x), dφ/dx)`.
    fn eval_dx(&self, eta: &[T], x: T) -> (T, T);

    /// `(φ(x), dφ/dx)` and `deta[k] += weight · ∂φ/∂η_k`.
    fn eval_grad(&self, eta: &[T], x: T, weight: T, deta: &mut [T]) -> (T, T);
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// `(silu(x), silu'(x), silu''(x))`.
#[inline]
fn silu_derivs<T: Scalar>(x: T) -> (T, T, T) {
    let s = sigmoid(x);
    let one = T::one();
    let two = lit::<T>(2.0);
    let d1 = s * (one + x * (one - s));
    let d2 = s * (one - s) * (two + x * (one - two * s));
    (x * s, d1, d2)
}

/// Activation family plus its parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ActivationModel<T: Scalar> {
    #[serde(flatten)]
    pub kind: ActivationKind,
    pub eta: Vec<T>,
}

impl<T: Scalar> ActivationModel<T> {
    pub fn new(kind: ActivationKind, eta: Vec<T>) -> Result<Self, ActivationError> {
        if let ActivationKind::Pwl { knots, low, high } = kind {
            if knots < 2 || !(low < high) {
                return Err(ActivationError::BadKnots);
            }
        }
        if eta.len() != kind.n_params() {
            return Err(ActivationError::ParamCount {
                kind: kind.name(),
                expected: kind.n_params(),
                got: eta.len(),
            });
        }
        Ok(Self { kind, eta })
    }

    pub fn fixed(kind: ActivationKind) -> Self {
        assert!(!kind.is_trainable(), "{} is trainable", kind.name());
        Self { kind, eta: vec![] }
    }

    pub fn relu() -> Self {
        Self::fixed(ActivationKind::FixedRelu)
    }

    /// Piecewise-linear identity: knot values equal the knots, unit slopes.
    pub fn pwl_identity(knots: usize, low: f64, high: f64) -> Self {
        let kind = ActivationKind::Pwl { knots, low, high };
        let mut eta: Vec<T> = pwl_knots(knots, low, high);
        eta.push(T::one());
        eta.push(T::one());
        Self::new(kind, eta).expect("valid identity pwl")
    }

    /// Evaluates at the model's own parameters.
    pub fn value(&self, x: T) -> T {
        self.eval(&self.eta, x)
    }

    pub fn cast<U: Scalar>(&self) -> ActivationModel<U> {
        ActivationModel {
            kind: self.kind,
            eta: self.eta.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

pub fn pwl_knots<T: Scalar>(knots: usize, low: f64, high: f64) -> Vec<T> {
    let h = (high - low) / (knots - 1) as f64;
    (0..knots).map(|k| lit(low + h * k as f64)).collect()
}

/// Segment `k` of a PWL activation evaluated in convex-combination form, so
/// the value at either end of the segment is exactly the knot value.
#[inline]
fn pwl_segment<T: Scalar>(values: &[T], k: usize, t: T) -> T {
    values[k] * (T::one() - t) + values[k + 1] * t
}

#[inline]
fn poly_eval<T: Scalar>(coef: &[T], x: T) -> (T, T) {
    // Horner for value and derivative.
    let mut v = T::zero();
    let mut d = T::zero();
    for &c in coef.iter().rev() {
        d = d * x + v;
        v = v * x + c;
    }
    (v, d)
}

impl<T: Scalar> Activation<T> for ActivationModel<T> {
    fn n_params(&self) -> usize {
        self.kind.n_params()
    }

    #[inline]
    fn eval(&self, eta: &[T], x: T) -> T {
        match self.kind {
            ActivationKind::FixedRelu => x.max(T::zero()),
            ActivationKind::FixedTanh => x.tanh(),
            ActivationKind::FixedSilu => silu(x),
            ActivationKind::MiniMlp => {
                let m = MINI_MLP_UNITS;
                let mut acc = eta[3 * m];
                for k in 0..m {
                    acc += eta[2 * m + k] * silu(eta[k] * x + eta[m + k]);
                }
                acc
            }
            _ => self.eval_dx(eta, x).0,
        }
    }

    #[inline]
    fn eval_dx(&self, eta: &[T], x: T) -> (T, T) {
        match self.kind {
            ActivationKind::FixedRelu => {
                if x > T::zero() {
                    (x, T::one())
                } else {
                    (T::zero(), T::zero())
                }
            }
            ActivationKind::FixedTanh => {
                let t = x.tanh();
                (t, T::one() - t * t)
            }
            ActivationKind::FixedSilu => {
                let (v, d, _) = silu_derivs(x);
                (v, d)
            }
            ActivationKind::Rational => {
                let (p, dp) = poly_eval(&eta[..=RATIONAL_NUM_DEGREE], x);
                let (q, dq) = rational_den(&eta[RATIONAL_NUM_DEGREE + 1..], x);
                let sgn = sign(q);
                let den = T::one() + q.abs();
                (p / den, dp / den - p * sgn * dq / (den * den))
            }
            ActivationKind::Pwl { knots, low, high } => {
                let (v, d, _, _) = pwl_locate(eta, knots, low, high, x);
                (v, d)
            }
            ActivationKind::MiniMlp => {
                let m = MINI_MLP_UNITS;
                let mut acc = eta[3 * m];
                let mut dacc = T::zero();
                for k in 0..m {
                    let (s, ds, _) = silu_derivs(eta[k] * x + eta[m + k]);
                    acc += eta[2 * m + k] * s;
                    dacc += eta[2 * m + k] * ds * eta[k];
                }
                (acc, dacc)
            }
        }
    }

    #[inline]
    fn eval_grad(&self, eta: &[T], x: T, weight: T, deta: &mut [T]) -> (T, T) {
        match self.kind {
            ActivationKind::FixedRelu | ActivationKind::FixedTanh | ActivationKind::FixedSilu => {
                self.eval_dx(eta, x)
            }
            ActivationKind::Rational => {
                let nd = RATIONAL_NUM_DEGREE + 1;
                let (p, dp) = poly_eval(&eta[..nd], x);
                let (q, dq) = rational_den(&eta[nd..], x);
                let sgn = sign(q);
                let den = T::one() + q.abs();
                let inv = T::one() / den;
                let val = p / den;
                let dval = dp / den - p * sgn * dq / (den * den);
                let mut xp = T::one();
                for slot in deta.iter_mut().take(nd) {
                    *slot += weight * xp * inv;
                    xp = xp * x;
                }
                let dq_coef = -val * sgn * inv;
                let mut xp = x;
                for slot in deta[nd..].iter_mut() {
                    *slot += weight * dq_coef * xp;
                    xp = xp * x;
                }
                (val, dval)
            }
            ActivationKind::Pwl { knots, low, high } => {
                let (v, d, k, t) = pwl_locate(eta, knots, low, high, x);
                match k {
                    PwlPiece::Left(dx) => {
                        deta[0] += weight;
                        deta[knots] += weight * dx;
                    }
                    PwlPiece::Right(dx) => {
                        deta[knots - 1] += weight;
                        deta[knots + 1] += weight * dx;
                    }
                    PwlPiece::Inner(k) => {
                        deta[k] += weight * (T::one() - t);
                        deta[k + 1] += weight * t;
                    }
                }
                (v, d)
            }
            ActivationKind::MiniMlp => {
                let m = MINI_MLP_UNITS;
                let mut acc = eta[3 * m];
                let mut dacc = T::zero();
                for k in 0..m {
                    let a = eta[k];
                    let v = eta[2 * m + k];
                    let (s, ds, _) = silu_derivs(a * x + eta[m + k]);
                    acc += v * s;
                    dacc += v * ds * a;
                    let wv = weight * v * ds;
                    deta[k] += wv * x;
                    deta[m + k] += wv;
                    deta[2 * m + k] += weight * s;
                }
                deta[3 * m] += weight;
                (acc, dacc)
            }
        }
    }
}

#[inline]
fn sign<T: Scalar>(q: T) -> T {
    if q > T::zero() {
        T::one()
    } else if q < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// `Q̃(x) = Σ_{i=1..4} q_i xⁱ` and its derivative.
#[inline]
fn rational_den<T: Scalar>(q: &[T], x: T) -> (T, T) {
    let mut v = T::zero();
    let mut d = T::zero();
    for &c in q.iter().rev() {
        d = d * x + v;
        v = v * x + c;
    }
    // v currently holds Σ q_i x^{i-1}; multiply by x.
    (v * x, d * x + v)
}

enum PwlPiece<T> {
    Left(T),
    Right(T),
    Inner(usize),
}

#[inline]
fn pwl_locate<T: Scalar>(
    eta: &[T],
    knots: usize,
    low: f64,
    high: f64,
    x: T,
) -> (T, T, PwlPiece<T>, T) {
    let lo = lit::<T>(low);
    let hi = lit::<T>(high);
    let values = &eta[..knots];
    if x < lo {
        let dx = x - lo;
        let s = eta[knots];
        return (values[0] + s * dx, s, PwlPiece::Left(dx), T::zero());
    }
    if x > hi {
        let dx = x - hi;
        let s = eta[knots + 1];
        return (values[knots - 1] + s * dx, s, PwlPiece::Right(dx), T::zero());
    }
    let h = (hi - lo) / lit((knots - 1) as f64);
    let pos = (x - lo) / h;
    let k = pos.floor().to_usize().unwrap_or(0).min(knots - 2);
    let t = pos - lit(k as f64);
    let v = pwl_segment(values, k, t);
    let d = (values[k + 1] - values[k]) / h;
    (v, d, PwlPiece::Inner(k), t)
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

fn fit_grid() -> Vec<f64> {
    let (a, b) = INIT_FIT_RANGE;
    (0..INIT_FIT_POINTS)
        .map(|i| a + (b - a) * i as f64 / (INIT_FIT_POINTS - 1) as f64)
        .collect()
}

/// Solves the ridge-regularized normal equations `(JᵀJ + μI)·δ = Jᵀr`.
fn normal_solve(jac: &Matrix<f64>, rhs: &[f64], ridge: f64) -> Option<Vec<f64>> {
    let jtj = jac.t_matmul(jac).symmetrize().add_diag(ridge);
    let jtr = jac.t_matmul(&Matrix::column(rhs.to_vec()));
    let l = linalg::cholesky(&jtj, 0.0).ok()?;
    Some(linalg::cholesky_solve(&l, &jtr).into_data())
}

fn max_residual(model: &ActivationModel<f64>, xs: &[f64]) -> f64 {
    xs.iter()
        .map(|&x| (model.value(x) - silu(x)).abs())
        .fold(0.0, f64::max)
}

fn sum_sq_residual(model: &ActivationModel<f64>, xs: &[f64]) -> f64 {
    xs.iter()
        .map(|&x| (model.value(x) - silu(x)).powi(2))
        .sum()
}

/// Least-squares fit of the rational family to SiLU: a linearized solve
/// (`P − y·Q̃ ≈ y`) followed by Levenberg–Marquardt on the true residual.
fn fit_rational() -> ActivationModel<f64> {
    let xs = fit_grid();
    let ys: Vec<f64> = xs.iter().map(|&x| silu(x)).collect();
    let nd = RATIONAL_NUM_DEGREE + 1;
    let np = nd + RATIONAL_DEN_DEGREE;
    let lin = Matrix::from_fn(xs.len(), np, |i, j| {
        let x = xs[i];
        if j < nd {
            x.powi(j as i32)
        } else {
            -ys[i] * x.powi((j - nd + 1) as i32)
        }
    });
    let start = normal_solve(&lin, &ys, 1e-10).unwrap_or_else(|| vec![0.0; np]);
    let mut model = ActivationModel::new(ActivationKind::Rational, start).unwrap();
    let poly_only = {
        let design = Matrix::from_fn(xs.len(), nd, |i, j| xs[i].powi(j as i32));
        let mut eta = normal_solve(&design, &ys, 1e-12).unwrap_or_else(|| vec![0.0; nd]);
        eta.extend(std::iter::repeat(0.0).take(RATIONAL_DEN_DEGREE));
        ActivationModel::new(ActivationKind::Rational, eta).unwrap()
    };
    if !(sum_sq_residual(&model, &xs) < sum_sq_residual(&poly_only, &xs)) {
        model = poly_only;
    }
    levenberg_marquardt(&mut model, &xs, 200);
    model
}

fn levenberg_marquardt(model: &mut ActivationModel<f64>, xs: &[f64], iters: usize) {
    let np = model.eta.len();
    let mut mu = 1e-3;
    let mut cost = sum_sq_residual(model, xs);
    for _ in 0..iters {
        let mut jac = Matrix::zeros(xs.len(), np);
        let mut res = vec![0.0; xs.len()];
        for (i, &x) in xs.iter().enumerate() {
            let mut row = vec![0.0; np];
            let (v, _) = model.eval_grad(&model.eta, x, 1.0, &mut row);
            jac.row_mut(i).copy_from_slice(&row);
            res[i] = silu(x) - v;
        }
        let mut improved = false;
        for _ in 0..10 {
            let Some(step) = normal_solve(&jac, &res, mu) else {
                mu *= 10.0;
                continue;
            };
            let mut trial = model.clone();
            for (e, d) in trial.eta.iter_mut().zip(&step) {
                *e += d;
            }
            let c = sum_sq_residual(&trial, xs);
            if c < cost {
                *model = trial;
                cost = c;
                mu = (mu * 0.3).max(1e-12);
                improved = true;
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
}

/// Least-squares fit of knot values to SiLU on the fit grid; boundary slopes
/// are set to SiLU's derivative at the outermost knots.
fn fit_pwl(knots: usize, low: f64, high: f64) -> ActivationModel<f64> {
    let kind = ActivationKind::Pwl { knots, low, high };
    let xs = fit_grid();
    let ys: Vec<f64> = xs.iter().map(|&x| silu(x)).collect();
    let basis_model = ActivationModel::<f64>::new(kind, vec![0.0; knots + 2]).unwrap();
    let design = Matrix::from_fn(xs.len(), knots, |i, j| {
        let mut row = vec![0.0; knots + 2];
        basis_model.eval_grad(&basis_model.eta, xs[i], 1.0, &mut row);
        row[j]
    });
    let mut eta = normal_solve(&design, &ys, 1e-12).unwrap_or_else(|| pwl_knots(knots, low, high));
    eta.push(silu_derivs(low).1);
    eta.push(silu_derivs(high).1);
    ActivationModel::new(kind, eta).unwrap()
}

/// Initial activation for a kind: SiLU least-squares fits for the rational
/// and piecewise-linear families, seeded `N(0, 0.5²)` parameters for the
/// mini-MLP, and the empty parameter vector for fixed kinds.
pub fn act_init<T: Scalar>(kind: ActivationKind, seed: u64) -> ActivationModel<T> {
    let model = match kind {
        ActivationKind::FixedRelu | ActivationKind::FixedTanh | ActivationKind::FixedSilu => {
            ActivationModel::fixed(kind)
        }
        ActivationKind::Rational => fit_rational(),
        ActivationKind::Pwl { knots, low, high } => fit_pwl(knots, low, high),
        ActivationKind::MiniMlp => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, MINI_MLP_INIT_STD).unwrap();
            let eta = (0..kind.n_params()).map(|_| normal.sample(&mut rng)).collect();
            ActivationModel::new(kind, eta).unwrap()
        }
    };
    model.cast()
}

/// Largest deviation from SiLU over the initialization fit grid.
pub fn init_fit_residual(model: &ActivationModel<f64>) -> f64 {
    max_residual(model, &fit_grid())
}

// ---------------------------------------------------------------------------
// Transformed activations (the symmetries of the covariance map)
// ---------------------------------------------------------------------------

/// `−φ(x)`.
#[derive(Debug, Clone)]
pub struct Negated<A>(pub A);

/// `φ(−x)`.
#[derive(Debug, Clone)]
pub struct FlippedInput<A>(pub A);

/// `α·φ(x)`.
#[derive(Debug, Clone)]
pub struct Scaled<A, T> {
    pub inner: A,
    pub alpha: T,
}

impl<T: Scalar, A: Activation<T>> Activation<T> for Negated<A> {
    fn n_params(&self) -> usize {
        self.0.n_params()
    }
    fn eval(&self, eta: &[T], x: T) -> T {
        -self.0.eval(eta, x)
    }
    fn eval_dx(&self, eta: &[T], x: T) -> (T, T) {
        let (v, d) = self.0.eval_dx(eta, x);
        (-v, -d)
    }
    fn eval_grad(&self, eta: &[T], x: T, weight: T, deta: &mut [T]) -> (T, T) {
        let (v, d) = self.0.eval_grad(eta, x, -weight, deta);
        (-v, -d)
    }
}

impl<T: Scalar, A: Activation<T>> Activation<T> for FlippedInput<A> {
    fn n_params(&self) -> usize {
        self.0.n_params()
    }
    fn eval(&self, eta: &[T], x: T) -> T {
        self.0.eval(eta, -x)
    }
    fn eval_dx(&self, eta: &[T], x: T) -> (T, T) {
        let (v, d) = self.0.eval_dx(eta, -x);
        (v, -d)
    }
    fn eval_grad(&self, eta: &[T], x: T, weight: T, deta: &mut [T]) -> (T, T) {
        let (v, d) = self.0.eval_grad(eta, -x, weight, deta);
        (v, -d)
    }
}

impl<T: Scalar, A: Activation<T>> Activation<T> for Scaled<A, T> {
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }
    fn eval(&self, eta: &[T], x: T) -> T {
        self.alpha * self.inner.eval(eta, x)
    }
    fn eval_dx(&self, eta: &[T], x: T) -> (T, T) {
        let (v, d) = self.inner.eval_dx(eta, x);
        (self.alpha * v, self.alpha * d)
    }
    fn eval_grad(&self, eta: &[T], x: T, weight: T, deta: &mut [T]) -> (T, T) {
        let (v, d) = self.inner.eval_grad(eta, x, weight * self.alpha, deta);
        (self.alpha * v, self.alpha * d)
    }
}

// ---------------------------------------------------------------------------
// Graph integration
// ---------------------------------------------------------------------------

/// Elementwise `φ(x | η)` as a graph node. Inputs: `[x]` for fixed kinds,
/// `[x, η]` for trainable ones (η as a column).
#[derive(Debug, Clone)]
pub struct ActivationMap<T: Scalar> {
    pub model: ActivationModel<T>,
}

impl<T: Scalar> ActivationMap<T> {
    fn eta<'a>(&'a self, inputs: &[&'a Matrix<T>]) -> &'a [T] {
        if inputs.len() > 1 {
            inputs[1].data()
        } else {
            &self.model.eta
        }
    }
}

impl<T: Scalar> CustomOp<T> for ActivationMap<T> {
    fn name(&self) -> &str {
        "activation"
    }

    fn forward(&mut self, inputs: &[&Matrix<T>]) -> autodiff::Result<Matrix<T>> {
        let eta = self.eta(inputs);
        if eta.len() != self.model.kind.n_params() {
            return Err(autodiff::AdError::Custom(format!(
                "activation expects {} parameters, got {}",
                self.model.kind.n_params(),
                eta.len()
            )));
        }
        Ok(inputs[0].map(|x| self.model.eval(eta, x)))
    }

    fn backward(
        &self,
        inputs: &[&Matrix<T>],
        _output: &Matrix<T>,
        grad_output: &Matrix<T>,
        needs: &[bool],
    ) -> autodiff::Result<Vec<Option<Matrix<T>>>> {
        let eta = self.eta(inputs);
        let x = inputs[0];
        let want_eta = needs.get(1).copied().unwrap_or(false);
        let mut deta = vec![T::zero(); eta.len()];
        let mut dx = Matrix::zeros(x.rows(), x.cols());
        for ((d, &xv), &g) in dx.data_mut().iter_mut().zip(x.data()).zip(grad_output.data()) {
            let (_, slope) = if want_eta {
                self.model.eval_grad(eta, xv, g, &mut deta)
            } else {
                self.model.eval_dx(eta, xv)
            };
            *d = g * slope;
        }
        let mut out = vec![needs[0].then_some(dx)];
        if inputs.len() > 1 {
            out.push(want_eta.then(|| Matrix::column(deta)));
        }
        Ok(out)
    }

    fn box_clone(&self) -> Box<dyn CustomOp<T>> {
        Box::new(self.clone())
    }
}
