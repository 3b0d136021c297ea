//! Ball volumes, uniform sampling in balls, hit-or-miss volume estimation
//! and raster connectivity.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::rng::rng;

/// Volume of the unit ball in ℝ^q, `π^{q/2} / Γ(q/2 + 1)`.
pub fn unit_ball_volume(q: usize) -> f64 {
    let h = q as f64 / 2.0;
    std::f64::consts::PI.powf(h) / gamma(h + 1.0)
}

pub fn ball_volume(q: usize, radius: f64) -> f64 {
    unit_ball_volume(q) * radius.powi(q as i32)
}

/// Uniform direction on the unit sphere in ℝ^q.
pub fn unit_direction<R: Rng + ?Sized>(q: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..q).map(|_| rng.sample(StandardNormal)).collect();
        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            return g.into_iter().map(|v| v / n).collect();
        }
    }
}

/// `n` points drawn uniformly from the radius-`r` ball in ℝ^q, one per row:
/// a uniform direction scaled by `r·U^{1/q}`.
pub fn uniform_in_ball(n: usize, q: usize, radius: f64, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    let mut out = Array2::zeros((n, q));
    for i in 0..n {
        let d = unit_direction(q, &mut r);
        let u: f64 = r.random();
        let rad = radius * u.powf(1.0 / q as f64);
        for j in 0..q {
            out[[i, j]] = d[j] * rad;
        }
    }
    out
}

/// A Monte Carlo volume estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl VolumeEstimate {
    /// Mean and standard error of `scale · v_b` over the given values.
    pub fn from_values(values: &[f64], scale: f64) -> Self {
        let b = values.len() as f64;
        let mean = values.iter().sum::<f64>() / b;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b - 1.0)
        } else {
            0.0
        };
        VolumeEstimate {
            estimate: scale * mean,
            std_error: scale * (var / b).sqrt(),
            samples: values.len(),
        }
    }

    /// Whether `truth` lies within `k` standard errors of the estimate.
    pub fn within(&self, truth: f64, k: f64) -> bool {
        (self.estimate - truth).abs() <= k * self.std_error
    }
}

/// Hit-or-miss estimate of the volume of a set inside the box `[lo, hi]`.
/// `contains` receives all `samples` uniform box points at once (one per
/// row) and returns a membership flag for each.
pub fn hit_or_miss<F>(lo: &[f64], hi: &[f64], samples: usize, seed: u64, contains: F) -> Result<VolumeEstimate>
where
    F: FnOnce(ArrayView2<f64>) -> Result<Vec<bool>>,
{
    if lo.len() != hi.len() {
        return Err(Error::shape("bounding box", lo.len(), hi.len()));
    }
    if samples == 0 {
        return Err(Error::InvalidArgument("hit-or-miss needs at least one sample".into()));
    }
    let q = lo.len();
    let box_volume: f64 = lo.iter().zip(hi).map(|(a, b)| (b - a).max(0.0)).product();
    if box_volume == 0.0 {
        return Ok(VolumeEstimate {
            estimate: 0.0,
            std_error: 0.0,
            samples,
        });
    }
    let mut r = rng(seed);
    let pts = Array2::from_shape_fn((samples, q), |(_, j)| lo[j] + (hi[j] - lo[j]) * r.random::<f64>());
    let hits = contains(pts.view())?;
    let values: Vec<f64> = hits.iter().map(|&h| if h { 1.0 } else { 0.0 }).collect();
    Ok(VolumeEstimate::from_values(&values, box_volume))
}

/// A boolean membership image over an axis-aligned rectangle. Row `i`,
/// column `j` holds the value at the centre of that pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub mask: Vec<bool>,
}

impl Raster {
    /// Pixel centres, row-major, as rows of a `(width·height) × 2` matrix.
    pub fn pixel_centres(lo: [f64; 2], hi: [f64; 2], width: usize, height: usize) -> Array2<f64> {
        let dx = (hi[0] - lo[0]) / width as f64;
        let dy = (hi[1] - lo[1]) / height as f64;
        Array2::from_shape_fn((width * height, 2), |(k, c)| {
            let (i, j) = (k / width, k % width);
            if c == 0 {
                lo[0] + (j as f64 + 0.5) * dx
            } else {
                lo[1] + (i as f64 + 0.5) * dy
            }
        })
    }

    pub fn build<F>(lo: [f64; 2], hi: [f64; 2], width: usize, height: usize, contains: F) -> Result<Self>
    where
        F: FnOnce(ArrayView2<f64>) -> Result<Vec<bool>>,
    {
        let pts = Self::pixel_centres(lo, hi, width, height);
        let mask = contains(pts.view())?;
        if mask.len() != width * height {
            return Err(Error::shape("raster mask", width * height, mask.len()));
        }
        Ok(Raster {
            width,
            height,
            lo,
            hi,
            mask,
        })
    }

    pub fn count_components(&self) -> usize {
        count_components(&self.mask, self.width, self.height)
    }

    pub fn filled(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Number of 4-connected components of `true` cells in a row-major grid.
pub fn count_components(mask: &[bool], width: usize, height: usize) -> usize {
    let mut seen = vec![false; mask.len()];
    let mut stack = Vec::new();
    let mut count = 0;
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(k) = stack.pop() {
            let (i, j) = (k / width, k % width);
            let mut visit = |n: usize| {
                if mask[n] && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            };
            if i > 0 {
                visit(k - width);
            }
            if i + 1 < height {
                visit(k + width);
            }
            if j > 0 {
                visit(k - 1);
            }
            if j + 1 < width {
                visit(k + 1);
            }
        }
    }
    count
}
