//! Split-conformal calibration in the flow's latent space.
//!
//! Calibration pairs are pulled back through the flow, `ẑ_i = t⁻¹(y_i, x_i)`,
//! and the `⌈(1−α)(n₂+1)⌉`-th smallest latent norm becomes the radius `r` of
//! a latent ball `Ê`. The region at `x` is `t(Ê, x)`; `y` belongs to it
//! exactly when `‖t⁻¹(y, x)‖ ≤ r`.
//!
//! When the order-statistic rank exceeds `n₂` the calibration set is too
//! small for the requested level, and the threshold is [`Threshold::Unbounded`]:
//! the region is the whole output space.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::flow::{FlowModel, gaussian_matrix};
use crate::geometry::{ball_volume, uniform_in_ball, VolumeEstimate};

/// A calibrated score threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Threshold {
    Bounded(f64),
    Unbounded,
}

impl Threshold {
    #[inline]
    pub fn admits(&self, score: f64) -> bool {
        match *self {
            Threshold::Bounded(t) => score <= t,
            Threshold::Unbounded => true,
        }
    }

    pub fn value(&self) -> Option<f64> {
        match *self {
            Threshold::Bounded(t) => Some(t),
            Threshold::Unbounded => None,
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("miscoverage level must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// The 1-based rank `k = ⌈(1−α)(n+1)⌉`, or `None` when `k > n`.
///
/// The product is snapped to the nearest integer when it lies within a few
/// ulps of one, so that e.g. `(1 − 0.1)·10` gives `k = 9`.
pub fn conformal_rank(n: usize, alpha: f64) -> Result<Option<usize>> {
    check_alpha(alpha)?;
    if n == 0 {
        return Err(Error::Empty("calibration set".into()));
    }
    let v = (1.0 - alpha) * (n as f64 + 1.0);
    let nearest = v.round();
    let k = if (v - nearest).abs() <= 1e-9 * v.max(1.0) {
        nearest
    } else {
        v.ceil()
    } as usize;
    Ok(if k <= n { Some(k.max(1)) } else { None })
}

/// Order-statistic threshold over calibration scores. Ties are kept; the
/// `k`-th smallest value is taken literally.
pub fn calibrate_scores(scores: &[f64], alpha: f64) -> Result<Threshold> {
    let k = conformal_rank(scores.len(), alpha)?;
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("calibration score {i}")));
    }
    Ok(match k {
        Some(k) => {
            let mut sorted = scores.to_vec();
            sorted.sort_by(f64::total_cmp);
            Threshold::Bounded(sorted[k - 1])
        }
        None => Threshold::Unbounded,
    })
}

/// Latent images of the calibration set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCalibration {
    /// One latent per row, in calibration-set order.
    pub latents: Array2<f64>,
    /// Euclidean norms of the latents, ascending.
    pub sorted_norms: Vec<f64>,
}

impl LatentCalibration {
    pub fn from_latents(latents: Array2<f64>) -> Self {
        let mut sorted_norms: Vec<f64> = latents.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        sorted_norms.sort_by(f64::total_cmp);
        LatentCalibration { latents, sorted_norms }
    }

    pub fn n2(&self) -> usize {
        self.sorted_norms.len()
    }
}

pub fn calibrate(model: &FlowModel, y: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<LatentCalibration> {
    if y.nrows() == 0 {
        return Err(Error::Empty("calibration set".into()));
    }
    if x.nrows() != y.nrows() {
        return Err(Error::shape("calibration inputs", y.nrows(), x.nrows()));
    }
    let (z, _) = model.inverse_batch(y, x)?;
    Ok(LatentCalibration::from_latents(z))
}

/// The calibrated latent ball `Ê`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConformalBall {
    pub radius: Threshold,
    pub alpha: f64,
    pub n2: usize,
}

impl ConformalBall {
    pub fn bounded_radius(&self, op: &'static str) -> Result<f64> {
        self.radius.value().ok_or(Error::Unbounded(op))
    }
}

pub fn conformal_radius(cal: &LatentCalibration, alpha: f64) -> Result<ConformalBall> {
    let k = conformal_rank(cal.n2(), alpha)?;
    Ok(ConformalBall {
        radius: match k {
            Some(k) => Threshold::Bounded(cal.sorted_norms[k - 1]),
            None => Threshold::Unbounded,
        },
        alpha,
        n2: cal.n2(),
    })
}

fn row(v: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, v.len()), v).expect("contiguous")
}

/// Latent norms `‖t⁻¹(y_i, x_i)‖` for a batch.
pub fn latent_norms(model: &FlowModel, y: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Array1<f64>> {
    let (z, _) = model.inverse_batch(y, x)?;
    Ok(z.map_axis(Axis(1), |r| r.dot(&r).sqrt()))
}

pub fn region_contains(model: &FlowModel, ball: &ConformalBall, x: &[f64], y: &[f64]) -> Result<bool> {
    Ok(contains_batch(model, ball, row(y), row(x))?[0])
}

/// Membership for many outputs; `x` has one row per output or a single
/// shared row.
pub fn contains_batch(model: &FlowModel, ball: &ConformalBall, y: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Vec<bool>> {
    if ball.radius == Threshold::Unbounded {
        return Ok(vec![true; y.nrows()]);
    }
    Ok(latent_norms(model, y, x)?.iter().map(|&n| ball.radius.admits(n)).collect())
}

/// Boundary of a region at one input, sampled as the image of the latent
/// sphere of radius `r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionBoundary {
    pub x: Vec<f64>,
    /// One boundary point per row, in sweep order for `q = 2`.
    pub points: Array2<f64>,
    /// True when the points trace a closed curve (`q = 2`).
    pub closed: bool,
}

/// Latent sphere points: an angular grid `θ_j = 2πj/m` for `q = 2`, the two
/// endpoints for `q = 1`, seeded Gaussian directions otherwise.
pub fn sphere_points(q: usize, radius: f64, m: usize, seed: u64) -> Array2<f64> {
    match q {
        1 => Array2::from_shape_vec((2, 1), vec![-radius, radius]).expect("shape"),
        2 => Array2::from_shape_fn((m, 2), |(j, c)| {
            let theta = std::f64::consts::TAU * j as f64 / m as f64;
            radius * if c == 0 { theta.cos() } else { theta.sin() }
        }),
        _ => {
            let mut g = gaussian_matrix(m, q, seed);
            for mut r in g.rows_mut() {
                let n = r.dot(&r).sqrt();
                r.mapv_inplace(|v| radius * v / n);
            }
            g
        }
    }
}

pub fn region_boundary(model: &FlowModel, ball: &ConformalBall, x: &[f64], m: usize, seed: u64) -> Result<RegionBoundary> {
    let r = ball.bounded_radius("boundary extraction")?;
    if m < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 boundary points, got {m}")));
    }
    let z = sphere_points(model.q(), r, m, seed);
    let (points, _) = model.forward_batch(z.view(), row(x))?;
    Ok(RegionBoundary {
        x: x.to_vec(),
        points,
        closed: model.q() == 2,
    })
}

/// Monte Carlo volume of `t(Ê, x)`: `Vol(Ê)` times the mean of
/// `|det ∂t/∂z|` over `samples` points drawn uniformly from `Ê`.
pub fn region_volume(model: &FlowModel, ball: &ConformalBall, x: &[f64], samples: usize, seed: u64) -> Result<VolumeEstimate> {
    let r = ball.bounded_radius("volume estimation")?;
    if samples < 100 {
        return Err(Error::InvalidArgument(format!("volume estimation needs at least 100 samples, got {samples}")));
    }
    let z = uniform_in_ball(samples, model.q(), r, seed);
    let (_, logdet) = model.forward_batch(z.view(), row(x))?;
    let jac: Vec<f64> = logdet.iter().map(|l| l.exp()).collect();
    Ok(VolumeEstimate::from_values(&jac, ball_volume(model.q(), r)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Dispersion {
    Ok,
    OverDispersed,
    UnderDispersed,
}

/// How closely calibration latents resemble a standard Gaussian sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDiagnostics {
    pub n2: usize,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    /// `(level, empirical norm quantile / χ_q quantile)`.
    pub norm_quantile_ratios: Vec<(f64, f64)>,
    pub median_ratio: f64,
    pub factor: f64,
    pub flag: Dispersion,
}

pub const DIAGNOSTIC_LEVELS: [f64; 4] = [0.25, 0.5, 0.75, 0.9];
pub const DEFAULT_DISPERSION_FACTOR: f64 = 1.25;

/// Quantile of the χ distribution with `q` degrees of freedom.
pub fn chi_quantile(q: usize, level: f64) -> f64 {
    ChiSquared::new(q as f64).expect("positive dof").inverse_cdf(level).sqrt()
}

fn empirical_quantile(sorted: &[f64], level: f64) -> f64 {
    let n = sorted.len();
    let k = ((level * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

/// Flags over- or under-dispersion when the median latent norm differs from
/// the χ_q median by more than `factor` in either direction.
pub fn latent_diagnostics(cal: &LatentCalibration, factor: f64) -> Result<LatentDiagnostics> {
    let n = cal.n2();
    if n < 20 {
        return Err(Error::InvalidArgument(format!("diagnostics need at least 20 calibration points, got {n}")));
    }
    if !(factor > 1.0) {
        return Err(Error::InvalidArgument("dispersion factor must exceed 1".into()));
    }
    let q = cal.latents.ncols();
    let mean = cal.latents.mean_axis(Axis(0)).expect("nonempty");
    let centred = &cal.latents - &mean;
    let cov = centred.t().dot(&centred) / (n as f64 - 1.0);
    let ratios: Vec<(f64, f64)> = DIAGNOSTIC_LEVELS
        .iter()
        .map(|&l| (l, empirical_quantile(&cal.sorted_norms, l) / chi_quantile(q, l)))
        .collect();
    let median_ratio = ratios[1].1;
    let flag = if median_ratio > factor {
        Dispersion::OverDispersed
    } else if median_ratio < 1.0 / factor {
        Dispersion::UnderDispersed
    } else {
        Dispersion::Ok
    };
    Ok(LatentDiagnostics {
        n2: n,
        mean: mean.to_vec(),
        covariance: cov.rows().into_iter().map(|r| r.to_vec()).collect(),
        norm_quantile_ratios: ratios,
        median_ratio,
        factor,
        flag,
    })
}

/// A trained flow together with its calibration latents and ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContraPredictor {
    pub model: FlowModel,
    pub calibration: LatentCalibration,
    pub ball: ConformalBall,
}

impl ContraPredictor {
    /// Calibrates `model` on held-out pairs.
    pub fn calibrate(model: FlowModel, y: ArrayView2<f64>, x: ArrayView2<f64>, alpha: f64) -> Result<Self> {
        let calibration = calibrate(&model, y, x)?;
        let ball = conformal_radius(&calibration, alpha)?;
        Ok(ContraPredictor { model, calibration, ball })
    }

    /// The ball for another miscoverage level from the same calibration set.
    pub fn ball_at(&self, alpha: f64) -> Result<ConformalBall> {
        conformal_radius(&self.calibration, alpha)
    }

    pub fn contains(&self, x: &[f64], y: &[f64]) -> Result<bool> {
        region_contains(&self.model, &self.ball, x, y)
    }

    pub fn contains_batch(&self, y: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Vec<bool>> {
        contains_batch(&self.model, &self.ball, y, x)
    }

    pub fn boundary(&self, x: &[f64], m: usize, seed: u64) -> Result<RegionBoundary> {
        region_boundary(&self.model, &self.ball, x, m, seed)
    }

    pub fn volume(&self, x: &[f64], samples: usize, seed: u64) -> Result<VolumeEstimate> {
        region_volume(&self.model, &self.ball, x, samples, seed)
    }

    pub fn diagnostics(&self, factor: f64) -> Result<LatentDiagnostics> {
        latent_diagnostics(&self.calibration, factor)
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let p: ContraPredictor = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        p.model.check_loaded()?;
        if p.calibration.latents.ncols() != p.model.q() || p.calibration.n2() != p.ball.n2 {
            return Err(Error::Config("predictor calibration does not match its model".into()));
        }
        Ok(p)
    }
}
