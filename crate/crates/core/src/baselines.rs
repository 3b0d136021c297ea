//! Comparison regions: PCP, a union of balls around conditional samples,
//! and RCP, a Mahalanobis ellipsoid around a point prediction.

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::conformal::{calibrate_scores, Threshold};
use crate::error::{Error, Result};
use crate::flow::{gaussian_matrix, FlowModel};
use crate::geometry::{hit_or_miss, unit_ball_volume, VolumeEstimate};
use crate::rescontra::{KernelRidge, KernelRidgeConfig, PointPredictor};
use crate::rng::derive_for_point;

pub const DEFAULT_PCP_SAMPLES: usize = 40;

/// `K` conditional samples at `x`, seeded from `(seed, x)` so the same
/// point always sees the same samples.
pub fn pcp_samples(model: &FlowModel, x: &[f64], k: usize, seed: u64) -> Result<Array2<f64>> {
    if k == 0 {
        return Err(Error::InvalidArgument("PCP needs at least one sample per point".into()));
    }
    model.sample(x, k, derive_for_point(seed, x))
}

/// Distance from `y` to the nearest row of `samples`.
pub fn min_distance(samples: ArrayView2<f64>, y: &[f64]) -> f64 {
    samples
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

pub fn pcp_score(model: &FlowModel, x: &[f64], y: &[f64], k: usize, seed: u64) -> Result<f64> {
    Ok(min_distance(pcp_samples(model, x, k, seed)?.view(), y))
}

const PCP_CHUNK: usize = 256;

/// [`pcp_score`] for every row of `(x, y)`, pushing many points through the
/// flow in one batch. Each point keeps its own seeded latents.
pub fn pcp_scores(model: &FlowModel, x: ArrayView2<f64>, y: ArrayView2<f64>, k: usize, seed: u64) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidArgument("PCP needs at least one sample per point".into()));
    }
    if x.nrows() != y.nrows() {
        return Err(Error::shape("PCP inputs", y.nrows(), x.nrows()));
    }
    let (p, q) = (x.ncols(), model.q());
    let mut out = Vec::with_capacity(x.nrows());
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + PCP_CHUNK).min(x.nrows());
        let m = end - start;
        let mut z = Array2::zeros((m * k, q));
        let mut xs = Array2::zeros((m * k, p));
        for i in 0..m {
            let xi = x.row(start + i).to_vec();
            let zi = gaussian_matrix(k, q, derive_for_point(seed, &xi));
            z.slice_mut(s![i * k..(i + 1) * k, ..]).assign(&zi);
            xs.slice_mut(s![i * k..(i + 1) * k, ..]).assign(&x.row(start + i));
        }
        let (samples, _) = model.forward_batch(z.view(), xs.view())?;
        for i in 0..m {
            let yi = y.row(start + i).to_vec();
            out.push(min_distance(samples.slice(s![i * k..(i + 1) * k, ..]), &yi));
        }
        start = end;
    }
    Ok(out)
}

/// A calibrated union-of-balls region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcpPredictor {
    pub model: FlowModel,
    pub k: usize,
    pub threshold: Threshold,
    pub seed: u64,
}

pub fn pcp_calibrate(model: FlowModel, x: ArrayView2<f64>, y: ArrayView2<f64>, k: usize, alpha: f64, seed: u64) -> Result<PcpPredictor> {
    if x.nrows() != y.nrows() {
        return Err(Error::shape("calibration inputs", y.nrows(), x.nrows()));
    }
    let scores = pcp_scores(&model, x, y, k, seed)?;
    let threshold = calibrate_scores(&scores, alpha)?;
    Ok(PcpPredictor { model, k, threshold, seed })
}

/// Hit-or-miss volume of the union of radius-`s` balls around `centres`,
/// sampled over their inflated bounding box.
pub fn union_of_balls_volume(centres: ArrayView2<f64>, s: f64, samples: usize, seed: u64) -> Result<VolumeEstimate> {
    if centres.nrows() == 0 {
        return Err(Error::Empty("ball centres".into()));
    }
    let q = centres.ncols();
    let mut lo = vec![f64::INFINITY; q];
    let mut hi = vec![f64::NEG_INFINITY; q];
    for r in centres.rows() {
        for j in 0..q {
            lo[j] = lo[j].min(r[j] - s);
            hi[j] = hi[j].max(r[j] + s);
        }
    }
    hit_or_miss(&lo, &hi, samples, seed, |pts| {
        Ok(pts.rows().into_iter().map(|p| min_distance(centres, p.as_slice().expect("row")) <= s).collect())
    })
}

impl PcpPredictor {
    pub fn samples(&self, x: &[f64]) -> Result<Array2<f64>> {
        pcp_samples(&self.model, x, self.k, self.seed)
    }

    pub fn contains(&self, x: &[f64], y: &[f64]) -> Result<bool> {
        match self.threshold {
            Threshold::Unbounded => Ok(true),
            Threshold::Bounded(s) => Ok(min_distance(self.samples(x)?.view(), y) <= s),
        }
    }

    /// Membership of row pairs `(x_i, y_i)`.
    pub fn contains_batch(&self, y: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Vec<bool>> {
        let scores = pcp_scores(&self.model, x, y, self.k, self.seed)?;
        Ok(scores.into_iter().map(|s| self.threshold.admits(s)).collect())
    }

    /// Membership for many outputs at one input.
    pub fn contains_at(&self, x: &[f64], y: ArrayView2<f64>) -> Result<Vec<bool>> {
        match self.threshold {
            Threshold::Unbounded => Ok(vec![true; y.nrows()]),
            Threshold::Bounded(s) => {
                let c = self.samples(x)?;
                Ok(y.rows().into_iter().map(|r| min_distance(c.view(), &r.to_vec()) <= s).collect())
            }
        }
    }

    pub fn volume(&self, x: &[f64], samples: usize, seed: u64) -> Result<VolumeEstimate> {
        let s = self.threshold.value().ok_or(Error::Unbounded("volume estimation"))?;
        union_of_balls_volume(self.samples(x)?.view(), s, samples, seed)
    }
}

/// Center predictor plus a global residual covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcpModel<P = KernelRidge> {
    pub center: P,
    pub covariance: Array2<f64>,
    /// Lower Cholesky factor of `covariance`.
    pub cholesky: Array2<f64>,
}

/// Lower Cholesky factor, adding a growing multiple of the mean diagonal
/// until the matrix is positive definite.
fn regularized_cholesky(cov: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    let q = cov.nrows();
    let scale = (cov.diag().sum() / q as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = 0.0;
    for _ in 0..20 {
        let mut m = DMatrix::from_fn(q, q, |i, j| cov[[i, j]]);
        for i in 0..q {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = m.clone().cholesky() {
            let l = ch.l();
            if l.iter().all(|v| v.is_finite()) {
                if jitter > 0.0 {
                    log::warn!("residual covariance regularized with ridge {jitter:e}");
                }
                return Ok((
                    Array2::from_shape_fn((q, q), |(i, j)| m[(i, j)]),
                    Array2::from_shape_fn((q, q), |(i, j)| l[(i, j)]),
                ));
            }
        }
        jitter = if jitter == 0.0 { 1e-10 * scale } else { jitter * 10.0 };
    }
    Err(Error::Singular("residual covariance".into()))
}

impl<P: PointPredictor> RcpModel<P> {
    pub fn new(center: P, covariance: Array2<f64>) -> Result<Self> {
        let q = center.output_dim();
        if covariance.dim() != (q, q) {
            return Err(Error::shape("covariance", q, covariance.nrows()));
        }
        if covariance.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariance".into()));
        }
        let sym = (&covariance + &covariance.t()) / 2.0;
        let (covariance, cholesky) = regularized_cholesky(&sym)?;
        Ok(RcpModel { center, covariance, cholesky })
    }

    /// Fits the covariance of `y − f̂(x)` around an already fitted center.
    pub fn fit_covariance(center: P, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<Self> {
        if y.nrows() < 2 {
            return Err(Error::Empty("covariance needs at least two rows".into()));
        }
        let r = &y - &center.predict(x)?;
        let mean = r.mean_axis(Axis(0)).expect("nonempty");
        let c = &r - &mean;
        let cov = c.t().dot(&c) / (r.nrows() as f64 - 1.0);
        Self::new(center, cov)
    }

    /// Mahalanobis norm of `y − f̂(x)`, by forward substitution with the
    /// Cholesky factor.
    pub fn mahalanobis(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let f = self.center.predict_one(x)?;
        let d: Vec<f64> = y.iter().zip(&f).map(|(a, b)| a - b).collect();
        Ok(self.whitened_norm(&d))
    }

    fn whitened_norm(&self, d: &[f64]) -> f64 {
        let q = d.len();
        let l = &self.cholesky;
        let mut u = vec![0.0; q];
        for i in 0..q {
            let mut s = d[i];
            for j in 0..i {
                s -= l[[i, j]] * u[j];
            }
            u[i] = s / l[[i, i]];
        }
        u.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scores(&self, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<Vec<f64>> {
        let f = self.center.predict(x)?;
        let r = &y - &f;
        Ok(r.rows().into_iter().map(|row| self.whitened_norm(&row.to_vec())).collect())
    }

    /// `√det Σ̂` from the Cholesky diagonal.
    pub fn sqrt_det(&self) -> f64 {
        self.cholesky.diag().iter().product()
    }
}

/// KRR center fitted on `(x, y)` with the residual covariance from the
/// same rows.
pub fn rcp_fit(x: ArrayView2<f64>, y: ArrayView2<f64>, krr: &KernelRidgeConfig) -> Result<RcpModel> {
    let center = KernelRidge::fit(x, y, krr)?;
    RcpModel::fit_covariance(center, x, y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcpPredictor<P = KernelRidge> {
    pub model: RcpModel<P>,
    pub threshold: Threshold,
}

pub fn rcp_calibrate<P: PointPredictor>(model: RcpModel<P>, x: ArrayView2<f64>, y: ArrayView2<f64>, alpha: f64) -> Result<RcpPredictor<P>> {
    let threshold = calibrate_scores(&model.scores(x, y)?, alpha)?;
    Ok(RcpPredictor { model, threshold })
}

impl<P: PointPredictor> RcpPredictor<P> {
    pub fn contains(&self, x: &[f64], y: &[f64]) -> Result<bool> {
        Ok(self.threshold.admits(self.model.mahalanobis(x, y)?))
    }

    pub fn contains_batch(&self, y: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Vec<bool>> {
        Ok(self.model.scores(x, y)?.into_iter().map(|s| self.threshold.admits(s)).collect())
    }

    /// `Vol(B_q) · √det Σ̂ · ρ^q`, the same at every input.
    pub fn volume(&self) -> f64 {
        match self.threshold {
            Threshold::Unbounded => f64::INFINITY,
            Threshold::Bounded(rho) => {
                let q = self.model.covariance.nrows();
                unit_ball_volume(q) * self.model.sqrt_det() * rho.powi(q as i32)
            }
        }
    }

    pub fn center(&self, x: &[f64]) -> Result<Array1<f64>> {
        Ok(Array1::from(self.model.center.predict_one(x)?))
    }

    /// Hit-or-miss check of the ellipsoid volume over its bounding box.
    pub fn volume_mc(&self, x: &[f64], samples: usize, seed: u64) -> Result<VolumeEstimate> {
        let rho = self.threshold.value().ok_or(Error::Unbounded("volume estimation"))?;
        let c = self.center(x)?;
        let half: Vec<f64> = self.model.covariance.diag().iter().map(|v| rho * v.sqrt()).collect();
        let lo: Vec<f64> = c.iter().zip(&half).map(|(a, h)| a - h).collect();
        let hi: Vec<f64> = c.iter().zip(&half).map(|(a, h)| a + h).collect();
        hit_or_miss(&lo, &hi, samples, seed, |pts| {
            Ok(pts.rows().into_iter().map(|p| self.model.whitened_norm(&(&p - &c).to_vec()) <= rho).collect())
        })
    }
}
