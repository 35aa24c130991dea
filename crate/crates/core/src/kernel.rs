//! One-dimensional ratio-form Nadaraya–Watson smoothing with a Gaussian kernel.

use crate::error::{Error, Result};
use crate::numkit::{mean, sample_sd};

/// Denominator floor below which [`KernelSmoother::smooth_at`] falls back to the response mean.
pub const DENSITY_FLOOR: f64 = 1e-12;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gaussian_kernel(u: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * u * u).exp()
}

/// Smoothed value plus whether the density fallback fired.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Smoothed {
    pub value: f64,
    pub fallback: bool,
}

#[derive(Debug, Clone)]
pub struct KernelSmoother {
    scores: Vec<f64>,
    responses: Vec<f64>,
    bandwidth: f64,
    response_mean: f64,
}

impl KernelSmoother {
    pub fn new(scores: Vec<f64>, responses: Vec<f64>, bandwidth: f64) -> Result<Self> {
        if scores.is_empty() || scores.len() != responses.len() {
            return Err(Error::Dimension(format!("{} scores and {} responses", scores.len(), responses.len())));
        }
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {bandwidth}")));
        }
        let response_mean = mean(&responses);
        Ok(Self { scores, responses, bandwidth, response_mean })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn response_mean(&self) -> f64 {
        self.response_mean
    }

    /// `l̂(w) / f̂(w)` with `l̂ = (1/nh) Σ Zᵢ K((wᵢ − w)/h)` and `f̂ = (1/nh) Σ K((wᵢ − w)/h)`.
    pub fn smooth_at(&self, w: f64) -> Smoothed {
        self.smooth_excluding(w, None)
    }

    pub fn predict(&self, w: f64) -> f64 {
        self.smooth_at(w).value
    }

    fn smooth_excluding(&self, w: f64, skip: Option<usize>) -> Smoothed {
        let h = self.bandwidth;
        let (mut num, mut den) = (0.0, 0.0);
        for (i, (&s, &z)) in self.scores.iter().zip(&self.responses).enumerate() {
            if Some(i) == skip {
                continue;
            }
            let k = gaussian_kernel((s - w) / h);
            num += z * k;
            den += k;
        }
        let m = self.scores.len() - usize::from(skip.is_some());
        let scale = 1.0 / (m.max(1) as f64 * h);
        let (l_hat, f_hat) = (num * scale, den * scale);
        if f_hat < DENSITY_FLOOR {
            Smoothed { value: self.response_mean, fallback: true }
        } else {
            Smoothed { value: l_hat / f_hat, fallback: false }
        }
    }

    /// Leave-one-out mean squared prediction error at this smoother's bandwidth.
    pub fn loo_error(&self) -> f64 {
        if self.scores.len() < 2 {
            return 0.0;
        }
        let total: f64 = (0..self.scores.len())
            .map(|i| (self.responses[i] - self.smooth_excluding(self.scores[i], Some(i)).value).powi(2))
            .sum();
        total / self.scores.len() as f64
    }
}

/// Rule-of-thumb bandwidth `1.06 · sd · n^(−1/5)`, floored at `1e-6`.
pub fn bandwidth_rot(scores: &[f64]) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::DegenerateScores);
    }
    let first = scores[0];
    if scores.iter().all(|&s| s == first) {
        return Err(Error::DegenerateScores);
    }
    let sd = sample_sd(scores);
    Ok((1.06 * sd * (scores.len() as f64).powf(-0.2)).max(1e-6))
}

/// Least-squares cross-validated bandwidth over `grid`; ties go to the smallest `h`.
pub fn bandwidth_lscv(scores: &[f64], responses: &[f64], grid: &[f64]) -> Result<f64> {
    lscv_curve(scores, responses, grid).map(|(h, _)| h)
}

/// The selected bandwidth together with the leave-one-out loss at every grid point.
pub fn lscv_curve(scores: &[f64], responses: &[f64], grid: &[f64]) -> Result<(f64, Vec<f64>)> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty bandwidth grid".into()));
    }
    let losses = grid
        .iter()
        .map(|&h| Ok(KernelSmoother::new(scores.to_vec(), responses.to_vec(), h)?.loo_error()))
        .collect::<Result<Vec<f64>>>()?;
    // Losses within 1e-12 of the response energy count as ties.
    let energy = responses.iter().map(|z| z * z).sum::<f64>() / responses.len().max(1) as f64;
    let slack = 1e-12 * energy;
    let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let best = (0..grid.len())
        .filter(|&k| losses[k] <= min + slack)
        .min_by(|&a, &b| grid[a].total_cmp(&grid[b]))
        .expect("grid is not empty");
    Ok((grid[best], losses))
}

/// `points` log-spaced bandwidths spanning `[h/10, 10h]`.
pub fn log_grid_around(h: f64, points: usize) -> Vec<f64> {
    let (lo, hi) = ((h / 10.0).ln(), (h * 10.0).ln());
    if points < 2 {
        return vec![h];
    }
    (0..points).map(|k| (lo + (hi - lo) * k as f64 / (points - 1) as f64).exp()).collect()
}
