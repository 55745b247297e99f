//! Linear interpolant between data and noise, time-step sampling, per-branch
//! time assignment and signed time gaps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::foundation::{Real, RngStream, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeSamplingScheme {
    #[default]
    Uniform,
    /// Logit-normal: `t = sigmoid(n)`, `n ~ N(0, 1)`.
    Lognormal,
}

/// Map a standard normal draw to a logit-normal time.
pub fn logit_normal_time(n: f64) -> f64 {
    1.0 / (1.0 + (-n).exp())
}

pub fn sample_time(scheme: TimeSamplingScheme, stream: &mut RngStream) -> f64 {
    match scheme {
        TimeSamplingScheme::Uniform => stream.uniform_f64(),
        TimeSamplingScheme::Lognormal => logit_normal_time(stream.normal_f64()),
    }
}

/// Per-branch conditioning times `t_1 ≥ t_2 ≥ … ≥ t_k` for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchTimes {
    times: Vec<f64>,
    alpha: f64,
}

impl BranchTimes {
    /// Builds times by stepping down from `t1` by the given decrements,
    /// clamping to `[0, 1]`. Each decrement must lie in `[0, alpha]`.
    pub fn from_decrements(t1: f64, decrements: &[f64], alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t1) {
            return Err(Error::InvalidArgument(format!("t1 = {t1} outside [0, 1]")));
        }
        if let Some(u) = decrements.iter().find(|&&u| !(0.0..=alpha).contains(&u)) {
            return Err(Error::InvalidArgument(format!("decrement {u} outside [0, {alpha}]")));
        }
        let mut times = Vec::with_capacity(decrements.len() + 1);
        times.push(t1);
        for u in decrements {
            let prev = *times.last().unwrap();
            times.push((prev - u).clamp(0.0, 1.0));
        }
        Ok(Self { times, alpha })
    }

    /// Every branch conditioned on the same time (inference).
    pub fn uniform(t: f64, k: usize) -> Self {
        Self {
            times: vec![t; k],
            alpha: 0.0,
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn k(&self) -> usize {
        self.times.len()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Signed gap from branch `i` to branch `i + 1`.
    pub fn gap(&self, i: usize) -> TimeGap {
        time_gap(self.times[i], self.times[i + 1])
    }

    /// Non-increasing, inside `[0, 1]`, consecutive gaps at most `alpha`.
    pub fn is_valid(&self) -> bool {
        self.times.iter().all(|t| (0.0..=1.0).contains(t))
            && self
                .times
                .windows(2)
                .all(|w| w[0] >= w[1] && w[0] - w[1] <= self.alpha + 1e-15)
    }
}

/// `t_{i+1} = clamp(t_i − u_i, 0, 1)` with `u_i ~ U[0, alpha]`.
pub fn assign_branch_times(t1: f64, k: usize, alpha: f64, stream: &mut RngStream) -> Result<BranchTimes> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if alpha < 0.0 {
        return Err(Error::InvalidArgument(format!("alpha = {alpha} is negative")));
    }
    let decrements: Vec<f64> = (1..k).map(|_| stream.uniform_f64() * alpha).collect();
    BranchTimes::from_decrements(t1, &decrements, alpha)
}

/// Signed time difference `d_{a→b} = b − a`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct TimeGap(pub f64);

impl TimeGap {
    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn time_gap(a: f64, b: f64) -> TimeGap {
    TimeGap(b - a)
}

/// `x_t = t·x1 + (1 − t)·x0`.
pub fn interpolate<T: Real>(x0: &Tensor<T>, x1: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    let t = T::of(t);
    let s = T::one() - t;
    x0.zip_map(x1, "interpolate", |a, b| t * b + s * a)
}

/// Per-sample interpolation: row `i` uses `ts[i]`.
pub fn interpolate_rows<T: Real>(x0: &Tensor<T>, x1: &Tensor<T>, ts: &[f64]) -> Result<Tensor<T>> {
    if x0.shape() != x1.shape() {
        return Err(Error::shape("interpolate_rows", x0.shape(), x1.shape()));
    }
    if ts.len() != x0.rows() {
        return Err(Error::shape("interpolate_rows", x0.shape(), &[ts.len()]));
    }
    let n = x0.row_len();
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &t) in ts.iter().enumerate() {
        let (t, s) = (T::of(t), T::of(1.0 - t));
        out.extend(x0.row(i).iter().zip(x1.row(i)).map(|(&a, &b)| t * b + s * a));
        debug_assert_eq!(out.len(), (i + 1) * n);
    }
    Tensor::from_vec(x0.shape(), out)
}

/// Ground-truth velocity `V = x1 − x0`.
pub fn gt_velocity<T: Real>(x0: &Tensor<T>, x1: &Tensor<T>) -> Result<Tensor<T>> {
    x1.sub(x0)
}
