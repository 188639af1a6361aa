//! Distances between two predictive distributions given as sample batches
//! over a common grid.
//!
//! * `w1`, `w2`: 1-D empirical Wasserstein distance between the pointwise
//!   marginals (sorted-sample formula), averaged over grid points.
//! * `mmd_*`: unbiased MMD² between the batches viewed as `G`-dimensional
//!   vectors, with linear, cubic (`(u·v + 1)³`, reported ×10³) and RBF
//!   (median-heuristic bandwidth) kernels.
//! * `mean_*` / `median_*`: MSE, root-mean-square (L2) and mean absolute (L1)
//!   differences between pointwise means / medians.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::bnn::FunctionSampleBatch;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::random::stream_rng;
use crate::scalar::Scalar;

pub const POLY_DEGREE: i32 = 3;
pub const POLY_OFFSET: f64 = 1.0;
pub const POLY_REPORT_SCALE: f64 = 1e3;
/// Seed used when subsampling the larger batch to equalize sample counts.
pub const SUBSAMPLE_SEED: u64 = 0x5EED;
/// Cap on the sample count entering the quadratic-cost kernel MMDs.
pub const DEFAULT_MMD_MAX_SAMPLES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub w1: f64,
    pub w2: f64,
    pub mmd_linear: f64,
    pub mmd_poly: f64,
    pub mmd_rbf: f64,
    pub mean_mse: f64,
    pub mean_l2: f64,
    pub mean_l1: f64,
    pub median_mse: f64,
    pub median_l2: f64,
    pub median_l1: f64,
}

impl MetricReport {
    pub const FIELDS: [&'static str; 11] = [
        "w1", "w2", "mmd_linear", "mmd_poly", "mmd_rbf", "mean_mse", "mean_l2", "mean_l1",
        "median_mse", "median_l2", "median_l1",
    ];

    pub fn values(&self) -> [f64; 11] {
        [
            self.w1, self.w2, self.mmd_linear, self.mmd_poly, self.mmd_rbf, self.mean_mse,
            self.mean_l2, self.mean_l1, self.median_mse, self.median_l2, self.median_l1,
        ]
    }

    pub fn from_values(v: [f64; 11]) -> Self {
        Self {
            w1: v[0],
            w2: v[1],
            mmd_linear: v[2],
            mmd_poly: v[3],
            mmd_rbf: v[4],
            mean_mse: v[5],
            mean_l2: v[6],
            mean_l1: v[7],
            median_mse: v[8],
            median_l2: v[9],
            median_l1: v[10],
        }
    }

    /// Entrywise mean of several reports.
    pub fn average(reports: &[MetricReport]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let mut acc = [0.0; 11];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        Some(Self::from_values(acc.map(|a| a / reports.len() as f64)))
    }

    /// Number of metrics on which `self` is strictly lower than `other`.
    /// Signed `mmd_linear` is compared by magnitude.
    pub fn wins_over(&self, other: &MetricReport) -> usize {
        self.values()
            .iter()
            .zip(other.values())
            .map(|(&a, b)| (a.abs() < b.abs()) as usize)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricSettings {
    /// Samples per batch used for the polynomial and RBF MMDs; the linear
    /// MMD and all pointwise metrics always use every sample.
    pub mmd_max_samples: usize,
    pub subsample_seed: u64,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self { mmd_max_samples: DEFAULT_MMD_MAX_SAMPLES, subsample_seed: SUBSAMPLE_SEED }
    }
}

/// Every metric with default settings.
pub fn compare_batches<T: Scalar>(a: &FunctionSampleBatch<T>, b: &FunctionSampleBatch<T>) -> Result<MetricReport> {
    compare_batches_with(a, b, &MetricSettings::default())
}

pub fn compare_batches_with<T: Scalar>(
    a: &FunctionSampleBatch<T>,
    b: &FunctionSampleBatch<T>,
    settings: &MetricSettings,
) -> Result<MetricReport> {
    if a.points.shape() != b.points.shape() {
        return Err(Error::GridMismatch(format!(
            "grid shapes {:?} and {:?}",
            a.points.shape(),
            b.points.shape()
        )));
    }
    if a.points.data().iter().zip(b.points.data()).any(|(x, y)| x != y) {
        return Err(Error::GridMismatch("grid coordinates differ".into()));
    }
    compare_values(&a.values.cast(), &b.values.cast(), settings)
}

/// Keeps `n` rows chosen without replacement (all rows, in order, if
/// `n ≥ rows`).
fn subsample(m: &Matrix<f64>, n: usize, seed: u64) -> Matrix<f64> {
    if n >= m.rows() {
        return m.clone();
    }
    let mut rng = stream_rng(seed, 0);
    let mut idx = index::sample(&mut rng, m.rows(), n).into_vec();
    idx.sort_unstable();
    Matrix::from_fn(n, m.cols(), |i, j| m[(idx[i], j)])
}

/// Metrics on raw `S × G` value matrices.
pub fn compare_values(a: &Matrix<f64>, b: &Matrix<f64>, settings: &MetricSettings) -> Result<MetricReport> {
    if a.cols() != b.cols() {
        return Err(Error::GridMismatch(format!("{} vs {} grid points", a.cols(), b.cols())));
    }
    if a.rows() < 2 || b.rows() < 2 {
        return Err(Error::InvalidConfig("metrics need at least 2 samples per batch".into()));
    }
    let n = a.rows().min(b.rows());
    let a = subsample(a, n, settings.subsample_seed);
    let b = subsample(b, n, settings.subsample_seed ^ 1);
    let identical = a.data() == b.data();

    let cols_a = columns(&a);
    let cols_b = columns(&b);
    let g = a.cols() as f64;
    let (mut w1, mut w2) = (0.0, 0.0);
    let mut mean_diff = Vec::with_capacity(a.cols());
    let mut median_diff = Vec::with_capacity(a.cols());
    for (ca, cb) in cols_a.iter().zip(&cols_b) {
        let (d1, d2) = wasserstein_1d(ca, cb);
        w1 += d1;
        w2 += d2;
        mean_diff.push(mean(ca) - mean(cb));
        median_diff.push(median_sorted(ca) - median_sorted(cb));
    }
    let summarize = |d: &[f64]| {
        let mse = d.iter().map(|v| v * v).sum::<f64>() / g;
        let l1 = d.iter().map(|v| v.abs()).sum::<f64>() / g;
        (mse, mse.sqrt(), l1)
    };
    let (mean_mse, mean_l2, mean_l1) = summarize(&mean_diff);
    let (median_mse, median_l2, median_l1) = summarize(&median_diff);

    let (mmd_linear, mmd_poly, mmd_rbf) = if identical {
        (0.0, 0.0, 0.0)
    } else {
        let lin = mmd_linear(&a, &b);
        let ka = subsample(&a, settings.mmd_max_samples, settings.subsample_seed ^ 2);
        let kb = subsample(&b, settings.mmd_max_samples, settings.subsample_seed ^ 3);
        let (poly, rbf) = mmd_poly_rbf(&ka, &kb);
        (lin, poly * POLY_REPORT_SCALE, rbf)
    };
    Ok(MetricReport {
        w1: w1 / g,
        w2: w2 / g,
        mmd_linear,
        mmd_poly,
        mmd_rbf,
        mean_mse,
        mean_l2,
        mean_l1,
        median_mse,
        median_l2,
        median_l1,
    })
}

/// Sorted columns.
fn columns(m: &Matrix<f64>) -> Vec<Vec<f64>> {
    (0..m.cols())
        .map(|j| {
            let mut c = m.col(j);
            c.sort_by(f64::total_cmp);
            c
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `(W₁, W₂)` between equal-size sorted samples.
fn wasserstein_1d(a: &[f64], b: &[f64]) -> (f64, f64) {
    let n = a.len() as f64;
    let (mut s1, mut s2) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let d = (x - y).abs();
        s1 += d;
        s2 += d * d;
    }
    (s1 / n, (s2 / n).sqrt())
}

/// Unbiased linear-kernel MMD² in `O(S·G)`:
/// `Σ_{i≠j} xᵢ·xⱼ = |Σxᵢ|² − Σ|xᵢ|²`.
fn mmd_linear(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    let stats = |m: &Matrix<f64>| {
        let mut sum = vec![0.0; m.cols()];
        let mut sq = 0.0;
        for r in 0..m.rows() {
            for (s, &v) in sum.iter_mut().zip(m.row(r)) {
                *s += v;
                sq += v * v;
            }
        }
        (sum, sq)
    };
    let (sa, qa) = stats(a);
    let (sb, qb) = stats(b);
    let (n, m) = (a.rows() as f64, b.rows() as f64);
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
    (dot(&sa, &sa) - qa) / (n * (n - 1.0)) + (dot(&sb, &sb) - qb) / (m * (m - 1.0))
        - 2.0 * dot(&sa, &sb) / (n * m)
}

/// Unbiased MMD² for the polynomial and RBF kernels from shared Gram
/// matrices of inner products.
fn mmd_poly_rbf(a: &Matrix<f64>, b: &Matrix<f64>) -> (f64, f64) {
    let aa = a.matmul_t(a);
    let bb = b.matmul_t(b);
    let ab = a.matmul_t(b);
    let (n, m) = (a.rows(), b.rows());
    let na: Vec<f64> = (0..n).map(|i| aa[(i, i)]).collect();
    let nb: Vec<f64> = (0..m).map(|i| bb[(i, i)]).collect();
    let d2 = |x: f64, y: f64, dot: f64| (x + y - 2.0 * dot).max(0.0);

    let mut pooled = Vec::with_capacity((n + m) * (n + m - 1) / 2);
    for i in 0..n {
        for j in 0..i {
            pooled.push(d2(na[i], na[j], aa[(i, j)]));
        }
    }
    for i in 0..m {
        for j in 0..i {
            pooled.push(d2(nb[i], nb[j], bb[(i, j)]));
        }
    }
    for i in 0..n {
        for j in 0..m {
            pooled.push(d2(na[i], nb[j], ab[(i, j)]));
        }
    }
    let mid = pooled.len() / 2;
    let (_, med, _) = pooled.select_nth_unstable_by(mid, f64::total_cmp);
    // Median squared distance as 2h²; fall back to 1 for degenerate data.
    let two_h2 = if *med > 0.0 { *med } else { 1.0 };

    let poly = |dot: f64| (dot + POLY_OFFSET).powi(POLY_DEGREE);
    let rbf = |dist2: f64| (-dist2 / two_h2).exp();
    let (mut pa, mut ra) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..i {
            pa += 2.0 * poly(aa[(i, j)]);
            ra += 2.0 * rbf(d2(na[i], na[j], aa[(i, j)]));
        }
    }
    let (mut pb, mut rb) = (0.0, 0.0);
    for i in 0..m {
        for j in 0..i {
            pb += 2.0 * poly(bb[(i, j)]);
            rb += 2.0 * rbf(d2(nb[i], nb[j], bb[(i, j)]));
        }
    }
    let (mut pab, mut rab) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..m {
            pab += poly(ab[(i, j)]);
            rab += rbf(d2(na[i], nb[j], ab[(i, j)]));
        }
    }
    let (nf, mf) = (n as f64, m as f64);
    let unb = |xx: f64, yy: f64, xy: f64| xx / (nf * (nf - 1.0)) + yy / (mf * (mf - 1.0)) - 2.0 * xy / (nf * mf);
    (unb(pa, pb, pab), unb(ra, rb, rab))
}
