//! Residual CONTRA: a point predictor fitted on one subset, a conditional
//! flow fitted to its residuals on a second, and a latent ball calibrated on
//! a third. The region at `x` is `f̂(x) + t*(Ê*, x)`.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::conformal::{self, ConformalBall, RegionBoundary};
use crate::data::{check_disjoint, Standardizer};
use crate::error::{Error, Result};
use crate::flow::{train_flow, FlowConfig, FlowModel};
use crate::geometry::VolumeEstimate;

/// A fitted regressor from inputs to `q`-dimensional outputs.
pub trait PointPredictor {
    fn output_dim(&self) -> usize;

    /// One prediction row per input row.
    fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>>;

    fn predict_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let v = ArrayView2::from_shape((1, x.len()), x).expect("contiguous");
        Ok(self.predict(v)?.row(0).to_vec())
    }
}

/// Predicts the same vector everywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantPredictor {
    pub value: Vec<f64>,
}

impl PointPredictor for ConstantPredictor {
    fn output_dim(&self) -> usize {
        self.value.len()
    }

    fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let q = self.value.len();
        Ok(Array2::from_shape_fn((x.nrows(), q), |(_, j)| self.value[j]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelRidgeConfig {
    /// Gaussian kernel bandwidth on standardized inputs; `None` uses the
    /// median pairwise distance.
    pub bandwidth: Option<f64>,
    pub ridge: f64,
}

impl Default for KernelRidgeConfig {
    fn default() -> Self {
        KernelRidgeConfig {
            bandwidth: None,
            ridge: 1e-2,
        }
    }
}

/// Rows used for the median heuristic are capped at this many.
const MEDIAN_HEURISTIC_ROWS: usize = 1000;
const MAX_RIDGE_RETRIES: usize = 12;

/// Kernel ridge regression with a Gaussian kernel and an explicit intercept:
/// `f̂(x) = ȳ + Σ_i α_i k(x, x_i)` with `(K + λI) α = y − ȳ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRidge {
    pub x_scaler: Standardizer,
    /// Standardized training inputs.
    pub support: Array2<f64>,
    /// Dual coefficients, one column per output.
    pub dual: Array2<f64>,
    pub intercept: Vec<f64>,
    pub bandwidth: f64,
    /// Ridge actually used, after any increase for conditioning.
    pub ridge: f64,
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(u, v)| (u - v) * (u - v)).sum()
}

fn median_distance(x: ArrayView2<f64>) -> f64 {
    let n = x.nrows().min(MEDIAN_HEURISTIC_ROWS);
    let step = (x.nrows() / n.max(1)).max(1);
    let rows: Vec<_> = (0..n).map(|i| x.row(i * step)).collect();
    let mut d = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..rows.len() {
        for j in 0..i {
            d.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if *m > 0.0 { *m } else { 1.0 }
}

impl KernelRidge {
    pub fn fit(x: ArrayView2<f64>, y: ArrayView2<f64>, config: &KernelRidgeConfig) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::Empty("kernel ridge training set".into()));
        }
        if y.nrows() != n {
            return Err(Error::shape("kernel ridge targets", n, y.nrows()));
        }
        if !(config.ridge >= 0.0 && config.ridge.is_finite()) {
            return Err(Error::InvalidArgument(format!("ridge must be a finite nonnegative number, got {}", config.ridge)));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel ridge training data".into()));
        }
        let all: Vec<usize> = (0..n).collect();
        let x_scaler = Standardizer::fit_lenient(x, &all)?;
        let support = x_scaler.transform(x);
        let bandwidth = match config.bandwidth {
            Some(b) if b > 0.0 && b.is_finite() => b,
            Some(b) => return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {b}"))),
            None => median_distance(support.view()),
        };
        let intercept = y.mean_axis(Axis(0)).expect("nonempty");
        let centred = &y - &intercept;
        let gamma = 0.5 / (bandwidth * bandwidth);
        let kernel = DMatrix::from_fn(n, n, |i, j| (-gamma * sq_dist(support.row(i), support.row(j))).exp());
        let q = y.ncols();
        let rhs = DMatrix::from_fn(n, q, |i, j| centred[[i, j]]);

        let mut ridge = config.ridge;
        for _ in 0..MAX_RIDGE_RETRIES {
            let mut a = kernel.clone();
            for i in 0..n {
                a[(i, i)] += ridge;
            }
            if let Some(chol) = a.cholesky() {
                let sol = chol.solve(&rhs);
                if sol.iter().all(|v| v.is_finite()) {
                    return Ok(KernelRidge {
                        x_scaler,
                        dual: Array2::from_shape_fn((n, q), |(i, j)| sol[(i, j)]),
                        support,
                        intercept: intercept.to_vec(),
                        bandwidth,
                        ridge,
                    });
                }
            }
            let next = if ridge > 0.0 { ridge * 10.0 } else { 1e-10 };
            log::warn!("kernel system not positive definite at ridge {ridge:e}; retrying with {next:e}");
            ridge = next;
        }
        Err(Error::Singular(format!("kernel system remained singular up to ridge {ridge:e}")))
    }
}

impl PointPredictor for KernelRidge {
    fn output_dim(&self) -> usize {
        self.intercept.len()
    }

    fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.support.ncols() {
            return Err(Error::shape("kernel ridge input width", self.support.ncols(), x.ncols()));
        }
        let xs = self.x_scaler.transform(x);
        let gamma = 0.5 / (self.bandwidth * self.bandwidth);
        let d = self.support.ncols();
        let support = self.support.as_standard_layout();
        let flat = support.as_slice().expect("standard layout");
        let mut k = Array1::zeros(self.support.nrows());
        let mut out = Array2::zeros((x.nrows(), self.output_dim()));
        for (i, row) in xs.rows().into_iter().enumerate() {
            let r = row.to_vec();
            for (kv, s) in k.iter_mut().zip(flat.chunks_exact(d)) {
                let dist: f64 = r.iter().zip(s).map(|(u, v)| (u - v) * (u - v)).sum();
                *kv = (-gamma * dist).exp();
            }
            let pred = k.dot(&self.dual);
            for j in 0..self.output_dim() {
                out[[i, j]] = pred[j] + self.intercept[j];
            }
        }
        Ok(out)
    }
}

/// Which rows of the source data went into each stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResContraSplit {
    pub predictor: Vec<usize>,
    pub flow: Vec<usize>,
    pub calibration: Vec<usize>,
}

/// A fitted ResCONTRA region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResContraBundle<P = KernelRidge> {
    pub predictor: P,
    pub flow: FlowModel,
    pub ball: ConformalBall,
    pub split: Option<ResContraSplit>,
}

fn residuals<P: PointPredictor>(predictor: &P, y: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    if predictor.output_dim() != y.ncols() {
        return Err(Error::shape("predictor output", y.ncols(), predictor.output_dim()));
    }
    Ok(&y - &predictor.predict(x)?)
}

/// Assembles a bundle from an already fitted predictor: trains the residual
/// flow on `(x2, y2)` and calibrates on `(x3, y3)`.
pub fn rescontra_with_predictor<P: PointPredictor>(
    predictor: P,
    (x2, y2): (ArrayView2<f64>, ArrayView2<f64>),
    (x3, y3): (ArrayView2<f64>, ArrayView2<f64>),
    alpha: f64,
    flow_config: &FlowConfig,
) -> Result<ResContraBundle<P>> {
    let r2 = residuals(&predictor, y2, x2)?;
    let flow = train_flow(r2.view(), x2, flow_config)?;
    rescontra_calibrate(predictor, flow, (x3, y3), alpha)
}

/// Calibrates an already trained residual flow on `(x3, y3)`.
pub fn rescontra_calibrate<P: PointPredictor>(
    predictor: P,
    flow: FlowModel,
    (x3, y3): (ArrayView2<f64>, ArrayView2<f64>),
    alpha: f64,
) -> Result<ResContraBundle<P>> {
    let r3 = residuals(&predictor, y3, x3)?;
    let cal = conformal::calibrate(&flow, r3.view(), x3)?;
    let ball = conformal::conformal_radius(&cal, alpha)?;
    Ok(ResContraBundle {
        predictor,
        flow,
        ball,
        split: None,
    })
}

/// Residuals `y - f̂(x)` on the rows of `(x, y)`.
pub fn residuals_of<P: PointPredictor>(predictor: &P, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<Array2<f64>> {
    residuals(predictor, y, x)
}

/// Fits the full pipeline on three disjoint row subsets of `(x, y)`.
pub fn rescontra_fit(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    split: ResContraSplit,
    alpha: f64,
    krr: &KernelRidgeConfig,
    flow_config: &FlowConfig,
) -> Result<ResContraBundle> {
    check_disjoint(&[&split.predictor, &split.flow, &split.calibration])?;
    for (name, s) in [("predictor", &split.predictor), ("residual flow", &split.flow), ("calibration", &split.calibration)] {
        if s.is_empty() {
            return Err(Error::Empty(format!("{name} subset")));
        }
    }
    let take = |rows: &[usize]| (x.select(Axis(0), rows), y.select(Axis(0), rows));
    let (x1, y1) = take(&split.predictor);
    let (x2, y2) = take(&split.flow);
    let (x3, y3) = take(&split.calibration);
    let predictor = KernelRidge::fit(x1.view(), y1.view(), krr)?;
    let mut bundle = rescontra_with_predictor(predictor, (x2.view(), y2.view()), (x3.view(), y3.view()), alpha, flow_config)?;
    bundle.split = Some(split);
    Ok(bundle)
}

/// Default share of the training rows given to the point predictor; the
/// rest trains the residual flow.
pub const DEFAULT_PREDICTOR_FRACTION: f64 = 0.6;

impl<P: PointPredictor> ResContraBundle<P> {
    pub fn contains(&self, x: &[f64], y: &[f64]) -> Result<bool> {
        let f = self.predictor.predict_one(x)?;
        let r: Vec<f64> = y.iter().zip(&f).map(|(a, b)| a - b).collect();
        conformal::region_contains(&self.flow, &self.ball, x, &r)
    }

    pub fn contains_batch(&self, y: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Vec<bool>> {
        let r = if x.nrows() == 1 && y.nrows() != 1 {
            let f = Array1::from(self.predictor.predict_one(x.row(0).as_slice().expect("row"))?);
            &y - &f
        } else {
            residuals(&self.predictor, y, x)?
        };
        conformal::contains_batch(&self.flow, &self.ball, r.view(), x)
    }

    /// Residual-space boundary shifted by `f̂(x)`.
    pub fn boundary(&self, x: &[f64], m: usize, seed: u64) -> Result<RegionBoundary> {
        let mut b = conformal::region_boundary(&self.flow, &self.ball, x, m, seed)?;
        let f = Array1::from(self.predictor.predict_one(x)?);
        b.points += &f;
        Ok(b)
    }

    /// Equals the residual-region volume; a translate has the same volume.
    pub fn volume(&self, x: &[f64], samples: usize, seed: u64) -> Result<VolumeEstimate> {
        conformal::region_volume(&self.flow, &self.ball, x, samples, seed)
    }
}
