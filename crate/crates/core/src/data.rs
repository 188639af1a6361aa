//! Synthetic datasets: two interleaved half-circles for classification and
//! GP-generated 1-D regression data.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{self, GpPriorSpec, MeasurementSet};
use crate::linalg::Matrix;
use crate::random::{derive_seed, normal, stream_rng};

pub const TWO_MOONS_POINTS: usize = 200;
pub const TWO_MOONS_NOISE: f64 = 0.1;
/// Shift applied so the moons are centered on the origin.
pub const TWO_MOONS_OFFSET: [f64; 2] = [-0.5, -0.25];
pub const REGRESSION_POINTS: usize = 20;
pub const REGRESSION_INTERVAL: (f64, f64) = (-2.5, 2.5);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// `n × F` inputs.
    pub x: Matrix<f64>,
    /// Targets; `0.0`/`1.0` for classification.
    pub y: Vec<f64>,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Labels as bits; errors if any target is not exactly 0 or 1.
    pub fn labels(&self) -> Result<Vec<u8>> {
        self.y
            .iter()
            .map(|&v| match v {
                v if v == 0.0 => Ok(0),
                v if v == 1.0 => Ok(1),
                v => Err(Error::InvalidConfig(format!("label {v} is not binary"))),
            })
            .collect()
    }

    /// Column names `x1..xF, y` (`x, y` in one dimension).
    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = if self.dim() == 1 {
            vec!["x".into()]
        } else {
            (1..=self.dim()).map(|i| format!("x{i}")).collect()
        };
        h.push("y".into());
        h
    }
}

/// Two interleaved half-circles with isotropic Gaussian noise: the first
/// `⌈n/2⌉` points (label 0) on the upper arc, the rest (label 1) on the lower.
pub fn two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 || !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidConfig(format!("two_moons needs n ≥ 2 and noise ≥ 0 (got {n}, {noise})")));
    }
    let n_out = n.div_ceil(2);
    let n_in = n - n_out;
    let arc = |i: usize, m: usize| if m > 1 { std::f64::consts::PI * i as f64 / (m - 1) as f64 } else { 0.0 };
    let mut rng = stream_rng(seed, 0);
    let mut x = Matrix::zeros(n, 2);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let (px, py, label) = if i < n_out {
            let t = arc(i, n_out);
            (t.cos(), t.sin(), 0.0)
        } else {
            let t = arc(i - n_out, n_in);
            (1.0 - t.cos(), 0.5 - t.sin(), 1.0)
        };
        x[(i, 0)] = px + TWO_MOONS_OFFSET[0] + noise * normal::<f64, _>(&mut rng);
        x[(i, 1)] = py + TWO_MOONS_OFFSET[1] + noise * normal::<f64, _>(&mut rng);
        y.push(label);
    }
    Ok(Dataset { x, y, seed })
}

/// `n` inputs uniform on `interval`, targets one joint draw from the GP
/// prior including its observation noise.
pub fn regression_1d(spec: &GpPriorSpec, n: usize, interval: (f64, f64), seed: u64) -> Result<Dataset> {
    if !(interval.0 < interval.1) {
        return Err(Error::DegenerateBox { dim: 0, low: interval.0, high: interval.1 });
    }
    spec.validate()?;
    let mut rng = stream_rng(derive_seed(seed, &[0]), 0);
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(interval.0..interval.1)).collect();
    let x = Matrix::column(xs);
    let set = MeasurementSet::new(x.clone())?;
    let y = gp::gp_sample_prior(spec, &set, 1, derive_seed(seed, &[1]))?.values.into_data();
    Ok(Dataset { x, y, seed })
}
