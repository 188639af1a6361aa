//! Prior matching: Adam on the log-variances and activation parameters,
//! minimizing the averaged `W₂²/N` against a target over random measurement
//! sets drawn uniformly from a box.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activations::{act_init, ActivationKind, ActivationModel};
use crate::bnn::{self, BnnConfig, PriorParams, SampleSource};
use crate::error::{Error, Result};
use crate::gp::MeasurementSet;
use crate::linalg::Matrix;
use crate::metrics::{self, MetricReport, MetricSettings};
use crate::random::{derive_seed, stream_rng};
use crate::scalar::{lit, Scalar};
use crate::wasserstein::{self, LossSettings, TargetSampler, Trainable};

pub const DEFAULT_STEPS: usize = 3000;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-2;
pub const DEFAULT_N_POINTS: usize = 32;
pub const DEFAULT_X_BATCH: usize = 4;
pub const DEFAULT_EVAL_SETS: usize = 10;

const TAG_STEP: u64 = 1;
const TAG_EVAL_SETS: u64 = 2;
const TAG_EVAL: u64 = 3;
const TAG_ACT_INIT: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Log-variances only; activation parameters frozen at initialization.
    #[serde(alias = "w")]
    WOnly,
    /// Activation parameters only; log-variances frozen at zero.
    #[serde(alias = "a")]
    AOnly,
    #[serde(alias = "a+w")]
    APlusW,
}

impl TrainMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "w" | "w_only" => Some(Self::WOnly),
            "a" | "a_only" => Some(Self::AOnly),
            "a+w" | "a_plus_w" => Some(Self::APlusW),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::WOnly => "w_only",
            Self::AOnly => "a_only",
            Self::APlusW => "a_plus_w",
        }
    }

    pub fn trainable(&self) -> Trainable {
        Trainable { log_vars: *self != Self::AOnly, eta: *self != Self::WOnly }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub s_fn: usize,
    pub n_points: usize,
    /// `(low, high)` per input dimension.
    pub input_box: Vec<(f64, f64)>,
    pub x_batch: usize,
    pub mode: TrainMode,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Held-out measurement sets for the final evaluation.
    pub eval_sets: usize,
    pub cov_jitter: f64,
    pub sqrt_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            learning_rate: DEFAULT_LEARNING_RATE,
            s_fn: 512,
            n_points: DEFAULT_N_POINTS,
            input_box: vec![(-5.0, 5.0)],
            x_batch: DEFAULT_X_BATCH,
            mode: TrainMode::APlusW,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            eval_sets: DEFAULT_EVAL_SETS,
            cov_jitter: wasserstein::DEFAULT_COV_JITTER,
            sqrt_iters: crate::linalg::DEFAULT_SQRT_ITERS,
        }
    }
}

impl TrainConfig {
    pub fn loss_settings(&self) -> LossSettings {
        LossSettings { s_fn: self.s_fn, cov_jitter: self.cov_jitter, sqrt_iters: self.sqrt_iters }
    }

    /// Full document validation; `steps` must be at least one.
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be at least 1".into()));
        }
        self.validate_budget_free()
    }

    /// Everything except the step count, which [`train`] also accepts as 0.
    fn validate_budget_free(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive (got {})", self.learning_rate));
        }
        if self.s_fn < 2 || self.n_points < 2 || self.x_batch == 0 || self.eval_sets == 0 {
            return bad("s_fn and n_points must be ≥ 2, x_batch and eval_sets ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("Adam betas must lie in [0, 1) and epsilon must be positive".into());
        }
        if !(self.cov_jitter >= 0.0) || self.sqrt_iters == 0 {
            return bad("cov_jitter must be ≥ 0 and sqrt_iters ≥ 1".into());
        }
        validate_box(&self.input_box)
    }
}

pub fn validate_box(input_box: &[(f64, f64)]) -> Result<()> {
    if input_box.is_empty() {
        return Err(Error::InvalidConfig("input box has no dimensions".into()));
    }
    for (dim, &(low, high)) in input_box.iter().enumerate() {
        if !(low < high) || !low.is_finite() || !high.is_finite() {
            return Err(Error::DegenerateBox { dim, low, high });
        }
    }
    Ok(())
}

/// `n` points i.i.d. uniform over the box.
pub fn sample_measurement_set<T: Scalar>(input_box: &[(f64, f64)], n: usize, seed: u64) -> Result<MeasurementSet<T>> {
    validate_box(input_box)?;
    let mut rng = stream_rng(seed, 0);
    let f = input_box.len();
    let pts = Matrix::from_fn(n, f, |_, j| {
        let (low, high) = input_box[j];
        lit(rng.random_range(low..high))
    });
    MeasurementSet::new(pts)
}

/// Adam with bias correction. A zero gradient leaves parameters untouched.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self { learning_rate, beta1, beta2, epsilon, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step<T: Scalar>(&mut self, params: &mut [T], grads: &[T]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i].as_f64();
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let update = self.learning_rate * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.epsilon);
            if update != 0.0 {
                params[i] = lit(params[i].as_f64() - update);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub loss: f64,
    /// Wall time since the start of training; excluded from reproducibility.
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub entries: Vec<TraceEntry>,
}

impl LossTrace {
    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loss).collect()
    }
}

/// Held-out comparison of a BNN prior against a target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorEvaluation {
    /// `W₂²/N` per measurement set.
    pub per_set_loss: Vec<f64>,
    pub mean_loss: f64,
    pub median_loss: f64,
    pub per_set_metrics: Vec<MetricReport>,
    /// Entrywise mean of `per_set_metrics`.
    pub metrics: MetricReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub params: PriorParams<T>,
    pub act: ActivationModel<T>,
    pub trace: LossTrace,
    pub final_eval: PriorEvaluation,
}

/// Held-out measurement sets, disjoint in seed space from the training sets.
pub fn held_out_sets<T: Scalar>(config: &TrainConfig) -> Result<Vec<MeasurementSet<T>>> {
    (0..config.eval_sets)
        .map(|k| {
            sample_measurement_set(
                &config.input_box,
                config.n_points,
                derive_seed(config.seed, &[TAG_EVAL_SETS, k as u64]),
            )
        })
        .collect()
}

/// Starting point of training: zero log-variances and [`act_init`].
pub fn initial_prior<T: Scalar>(kind: ActivationKind, seed: u64) -> (PriorParams<T>, ActivationModel<T>) {
    (PriorParams::default(), act_init(kind, derive_seed(seed, &[TAG_ACT_INIT])))
}

/// Runs `config.steps` Adam steps from [`initial_prior`]. Parameter groups
/// frozen by the mode keep their initial values exactly.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    bnn_config: &BnnConfig,
    act_kind: ActivationKind,
    target: &dyn TargetSampler<T>,
) -> Result<TrainOutcome<T>> {
    let (params, act) = initial_prior(act_kind, config.seed);
    train_from(config, bnn_config, params, act, target)
}

pub fn train_from<T: Scalar>(
    config: &TrainConfig,
    bnn_config: &BnnConfig,
    mut params: PriorParams<T>,
    mut act: ActivationModel<T>,
    target: &dyn TargetSampler<T>,
) -> Result<TrainOutcome<T>> {
    config.validate_budget_free()?;
    bnn_config.validate()?;
    if bnn_config.input_dim != config.input_box.len() {
        return Err(Error::DimensionMismatch(format!(
            "BNN input dimension {} vs {}-dimensional box",
            bnn_config.input_dim,
            config.input_box.len()
        )));
    }
    let settings = config.loss_settings();
    let trainable = config.mode.trainable();
    let adam = || Adam::new(0, config.learning_rate, config.beta1, config.beta2, config.epsilon);
    let mut opt_lv = Adam { m: vec![0.0; 4], v: vec![0.0; 4], ..adam() };
    let n_eta = act.eta.len();
    let mut opt_eta = Adam { m: vec![0.0; n_eta], v: vec![0.0; n_eta], ..adam() };
    let mut trace = LossTrace::default();
    let start = Instant::now();

    for step in 0..config.steps {
        let step_seed = derive_seed(config.seed, &[TAG_STEP, step as u64]);
        let x_batch = (0..config.x_batch)
            .map(|k| sample_measurement_set(&config.input_box, config.n_points, derive_seed(step_seed, &[k as u64])))
            .collect::<Result<Vec<_>>>()?;
        let eval = wasserstein::matching_loss(
            bnn_config,
            &params,
            &act,
            &act.eta,
            target,
            &x_batch,
            &settings,
            derive_seed(step_seed, &[u64::MAX]),
            trainable,
        )
        .map_err(|e| match e {
            Error::Autodiff(_) | Error::NonFinite(_) => Error::NonFiniteLoss { step },
            other => other,
        })?;
        let loss = eval.loss.as_f64();
        let grads_finite = eval.grad_log_vars.iter().chain(&eval.grad_eta).all(|g| g.is_finite());
        if !loss.is_finite() || !grads_finite {
            return Err(Error::NonFiniteLoss { step });
        }
        trace.entries.push(TraceEntry { step, loss, seconds: start.elapsed().as_secs_f64() });
        log::debug!("step {step}: loss {loss:.6e}");

        if trainable.log_vars {
            let mut lv = params.to_array();
            opt_lv.step(&mut lv, &eval.grad_log_vars);
            params = PriorParams::from_array(lv);
        }
        if trainable.eta && n_eta > 0 {
            let mut eta = act.eta.clone();
            opt_eta.step(&mut eta, &eval.grad_eta);
            act = ActivationModel::new(act.kind, eta)?;
        }
    }

    let eval_sets = held_out_sets(config)?;
    let final_eval = evaluate_prior(
        &params,
        &act,
        bnn_config,
        target,
        &eval_sets,
        &settings,
        derive_seed(config.seed, &[TAG_EVAL]),
    )?;
    Ok(TrainOutcome { params, act, trace, final_eval })
}

/// Per-set `W₂²/N` and the full metric suite between `s_fn` BNN and target
/// samples on every evaluation set.
pub fn evaluate_prior<T: Scalar>(
    params: &PriorParams<T>,
    act: &ActivationModel<T>,
    bnn_config: &BnnConfig,
    target: &dyn TargetSampler<T>,
    eval_sets: &[MeasurementSet<T>],
    settings: &LossSettings,
    seed: u64,
) -> Result<PriorEvaluation> {
    if eval_sets.is_empty() {
        return Err(Error::InvalidConfig("no evaluation sets".into()));
    }
    let mut per_set_loss = Vec::with_capacity(eval_sets.len());
    let mut per_set_metrics = Vec::with_capacity(eval_sets.len());
    for (k, x) in eval_sets.iter().enumerate() {
        let (bnn_seed, target_seed) = wasserstein::set_seeds(seed, k);
        let tgt = target.sample(x, settings.s_fn, target_seed)?;
        let model = bnn::bnn_sample_functions(bnn_config, params, act, &act.eta, x, settings.s_fn, bnn_seed)?;
        per_set_loss.push(wasserstein::set_loss_from_values(&tgt, &model.values, settings).as_f64());
        let tgt_batch = bnn::FunctionSampleBatch::new(tgt, x.points().clone(), SampleSource::Gp);
        per_set_metrics.push(metrics::compare_batches_with(&model, &tgt_batch, &MetricSettings::default())?);
    }
    let mean_loss = per_set_loss.iter().sum::<f64>() / per_set_loss.len() as f64;
    let median_loss = median(&per_set_loss);
    let metrics = MetricReport::average(&per_set_metrics).expect("non-empty");
    Ok(PriorEvaluation { per_set_loss, mean_loss, median_loss, per_set_metrics, metrics })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
