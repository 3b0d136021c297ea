//! Multi-target conformalized quantile regression.
//!
//! Each output dimension gets a lower and an upper quantile net. The score
//! of `(x, y)` is the largest weighted violation
//! `max_j { w_{j1}(Q̂ˡ_j(x) − y_j), w_{j2}(y_j − Q̂ᵘ_j(x)) }`, and the calibrated
//! region is the box `Q̂ˡ_j − s/w_{j1} ≤ y_j ≤ Q̂ᵘ_j + s/w_{j2}`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::conformal::{calibrate_scores, Threshold};
use crate::data::{split_pool, Standardizer};
use crate::error::{Error, Result};
use crate::flow::{clip_global_norm, scheduled_lr};
use crate::nn::{Adam, AdamConfig, DenseNet};
use crate::rng::{derive, derive_named, rng};

/// Pinball loss `ρ_τ(u) = u(τ − 1{u < 0})` of the residual `u = y − q̂`.
#[inline]
pub fn pinball(tau: f64, u: f64) -> f64 {
    u * (tau - if u < 0.0 { 1.0 } else { 0.0 })
}

/// Derivative of `ρ_τ(y − q̂)` with respect to `q̂`. At the kink `u = 0` the
/// minimum-norm subgradient, zero, is returned.
#[inline]
pub fn pinball_grad(tau: f64, u: f64) -> f64 {
    if u < 0.0 {
        1.0 - tau
    } else if u > 0.0 {
        -tau
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantileConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    pub final_lr_fraction: Option<f64>,
}

impl Default for QuantileConfig {
    fn default() -> Self {
        QuantileConfig {
            hidden: vec![128, 128],
            epochs: 200,
            learning_rate: 3e-3,
            batch_size: 256,
            seed: 0,
            grad_clip: Some(10.0),
            final_lr_fraction: Some(0.05),
        }
    }
}

/// A net estimating the `tau` conditional quantile of one output coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileNet {
    pub tau: f64,
    pub net: DenseNet,
    pub x_scaler: Standardizer,
    /// Output scaling: predictions are `y_mean + y_std · net(x̃)`.
    pub y_mean: f64,
    pub y_std: f64,
}

impl QuantileNet {
    pub fn predict(&self, x: ArrayView2<f64>) -> Array1<f64> {
        let out = self.net.forward_batch(self.x_scaler.transform(x).view());
        out.column(0).mapv(|v| self.y_mean + self.y_std * v)
    }

    /// Mean pinball loss over the given pairs.
    pub fn loss(&self, x: ArrayView2<f64>, y: &[f64]) -> f64 {
        let pred = self.predict(x);
        y.iter().zip(pred.iter()).map(|(&t, &p)| pinball(self.tau, t - p)).sum::<f64>() / y.len() as f64
    }
}

/// Trains one quantile net by minibatch Adam on the pinball loss.
pub fn train_quantile_net(x: ArrayView2<f64>, y: &[f64], tau: f64, config: &QuantileConfig) -> Result<QuantileNet> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::Empty("quantile training set".into()));
    }
    if y.len() != n {
        return Err(Error::shape("quantile targets", n, y.len()));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile level must lie in (0, 1), got {tau}")));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let x_scaler = Standardizer::fit_lenient(x, &all)?;
    let xs = x_scaler.transform(x);
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
    let y_std = if var > 0.0 { var.sqrt() } else { 1.0 };
    let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_std).collect();

    let mut net = DenseNet::mlp(x.ncols(), &config.hidden, 1, &mut rng(derive_named(config.seed, "quantile-init")));
    net.zero_output_layer();
    let mut adam = Adam::for_blocks(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        &net.param_slices(),
    );
    let mut order = all;
    let mut shuffle = rng(derive_named(config.seed, "quantile-shuffle"));
    let batches = n.div_ceil(config.batch_size);
    let total = config.epochs * batches;
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let xb = xs.select(Axis(0), chunk);
            let (pred, cache) = net.forward_cached(xb.view());
            let m = chunk.len() as f64;
            let upstream = Array2::from_shape_fn((chunk.len(), 1), |(i, _)| pinball_grad(tau, ys[chunk[i]] - pred[[i, 0]]) / m);
            let (grads, _) = net.backward_batch(&cache, upstream.view());
            let mut blocks: Vec<Vec<f64>> = grads.slices().into_iter().map(|s| s.to_vec()).collect();
            if let Some(c) = config.grad_clip {
                clip_global_norm(&mut blocks, c);
            }
            adam.config.learning_rate = scheduled_lr(config.learning_rate, config.final_lr_fraction, epoch * batches + b, total);
            let views: Vec<&[f64]> = blocks.iter().map(|v| v.as_slice()).collect();
            adam.step(net.param_slices_mut(), &views)?;
        }
    }
    Ok(QuantileNet {
        tau,
        net,
        x_scaler,
        y_mean,
        y_std,
    })
}

/// Lower and upper quantile nets for every output dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantilePair {
    pub alpha: f64,
    pub lower: Vec<QuantileNet>,
    pub upper: Vec<QuantileNet>,
}

/// Quantile predictions at a batch of inputs, `n × q` each.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileBands {
    pub lower: Array2<f64>,
    pub upper: Array2<f64>,
}

impl QuantilePair {
    pub fn q(&self) -> usize {
        self.lower.len()
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> QuantileBands {
        let stack = |nets: &[QuantileNet]| {
            let mut out = Array2::zeros((x.nrows(), nets.len()));
            for (j, net) in nets.iter().enumerate() {
                out.column_mut(j).assign(&net.predict(x));
            }
            out
        };
        QuantileBands {
            lower: stack(&self.lower),
            upper: stack(&self.upper),
        }
    }
}

/// Trains nets at levels `α/2` and `1 − α/2` for each output column.
pub fn train_quantile_nets(x: ArrayView2<f64>, y: ArrayView2<f64>, alpha: f64, config: &QuantileConfig) -> Result<QuantilePair> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("miscoverage level must lie in (0, 1), got {alpha}")));
    }
    if y.nrows() != x.nrows() {
        return Err(Error::shape("quantile training targets", x.nrows(), y.nrows()));
    }
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    for j in 0..y.ncols() {
        let col = y.column(j).to_vec();
        let cfg = |k: u64| QuantileConfig {
            seed: derive(config.seed, 2 * j as u64 + k),
            ..config.clone()
        };
        lower.push(train_quantile_net(x, &col, alpha / 2.0, &cfg(0))?);
        upper.push(train_quantile_net(x, &col, 1.0 - alpha / 2.0, &cfg(1))?);
    }
    Ok(QuantilePair { alpha, lower, upper })
}

/// Positive weights `w_{j1}` (lower side) and `w_{j2}` (upper side).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl WeightVector {
    pub fn uniform(q: usize) -> Self {
        WeightVector {
            lower: vec![1.0; q],
            upper: vec![1.0; q],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() {
            return Err(Error::shape("weight vector", self.lower.len(), self.upper.len()));
        }
        if self.lower.iter().chain(&self.upper).any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidArgument("weights must be finite and positive".into()));
        }
        Ok(())
    }

    /// Rescaled so the smallest component is 1.
    pub fn normalized(&self) -> Self {
        let m = self.lower.iter().chain(&self.upper).cloned().fold(f64::INFINITY, f64::min);
        WeightVector {
            lower: self.lower.iter().map(|w| w / m).collect(),
            upper: self.upper.iter().map(|w| w / m).collect(),
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        WeightVector {
            lower: self.lower.iter().map(|w| w * c).collect(),
            upper: self.upper.iter().map(|w| w * c).collect(),
        }
    }

    fn get(&self, k: usize) -> f64 {
        let q = self.lower.len();
        if k < q { self.lower[k] } else { self.upper[k - q] }
    }

    fn set(&mut self, k: usize, v: f64) {
        let q = self.lower.len();
        if k < q {
            self.lower[k] = v
        } else {
            self.upper[k - q] = v
        }
    }
}

/// Score from precomputed quantiles at one point.
pub fn score_from_bands(lower: &[f64], upper: &[f64], y: &[f64], w: &WeightVector) -> f64 {
    let mut s = f64::NEG_INFINITY;
    for j in 0..y.len() {
        s = s.max(w.lower[j] * (lower[j] - y[j])).max(w.upper[j] * (y[j] - upper[j]));
    }
    s
}

pub fn mcqr_scores(bands: &QuantileBands, y: ArrayView2<f64>, w: &WeightVector) -> Vec<f64> {
    (0..y.nrows())
        .map(|i| {
            score_from_bands(
                bands.lower.row(i).as_slice().expect("row"),
                bands.upper.row(i).as_slice().expect("row"),
                y.row(i).as_slice().expect("row"),
                w,
            )
        })
        .collect()
}

pub fn mcqr_score(nets: &QuantilePair, w: &WeightVector, x: &[f64], y: &[f64]) -> f64 {
    let xv = ArrayView2::from_shape((1, x.len()), x).expect("contiguous");
    let b = nets.predict(xv);
    score_from_bands(b.lower.row(0).as_slice().unwrap(), b.upper.row(0).as_slice().unwrap(), y, w)
}

/// An axis-aligned box region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Some side has `lower > upper`; the region contains nothing.
    pub empty: bool,
}

impl BoxRegion {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        let empty = lower.iter().zip(&upper).any(|(l, u)| l > u);
        BoxRegion { lower, upper, empty }
    }

    pub fn contains(&self, y: &[f64]) -> bool {
        y.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    pub fn volume(&self) -> f64 {
        box_volume(self)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "lower": self.lower, "upper": self.upper, "volume": self.volume() })
    }
}

/// Product of side lengths; zero for an empty box.
pub fn box_volume(b: &BoxRegion) -> f64 {
    if b.empty {
        return 0.0;
    }
    b.lower.iter().zip(&b.upper).map(|(l, u)| u - l).product()
}

/// Box at one point from its quantile predictions.
pub fn box_from_bands(lower: &[f64], upper: &[f64], w: &WeightVector, threshold: Threshold) -> BoxRegion {
    match threshold {
        Threshold::Unbounded => BoxRegion::new(vec![f64::NEG_INFINITY; lower.len()], vec![f64::INFINITY; upper.len()]),
        Threshold::Bounded(s) => BoxRegion::new(
            lower.iter().zip(&w.lower).map(|(q, wl)| q - s / wl).collect(),
            upper.iter().zip(&w.upper).map(|(q, wu)| q + s / wu).collect(),
        ),
    }
}

fn mean_box_volume(bands: &QuantileBands, w: &WeightVector, s: f64) -> f64 {
    let n = bands.lower.nrows();
    let mut total = 0.0;
    for i in 0..n {
        let mut v = 1.0;
        for j in 0..bands.lower.ncols() {
            let side = bands.upper[[i, j]] - bands.lower[[i, j]] + s / w.upper[j] + s / w.lower[j];
            v *= side.max(0.0);
        }
        total += v;
    }
    total / n as f64
}

/// Mean calibrated box volume over a set, with the threshold recomputed
/// from that same set. Infinite when the threshold is unbounded.
pub fn weight_objective(bands: &QuantileBands, y: ArrayView2<f64>, w: &WeightVector, alpha: f64) -> Result<f64> {
    match calibrate_scores(&mcqr_scores(bands, y, w), alpha)? {
        Threshold::Bounded(s) => Ok(mean_box_volume(bands, w, s)),
        Threshold::Unbounded => Ok(f64::INFINITY),
    }
}

const WEIGHT_STEPS: [f64; 4] = [2.0, 0.5, 1.25, 0.8];
const MAX_SWEEPS: usize = 50;
/// A step must shrink the objective by at least this fraction. Gains below
/// it are within the sampling noise of the order statistic.
pub const MIN_RELATIVE_IMPROVEMENT: f64 = 5e-3;

/// Cyclic coordinate search over the weights, accepting a multiplicative
/// step only when it lowers the objective by [`MIN_RELATIVE_IMPROVEMENT`]. Returns `w ≡ 1` if
/// the search fails to improve on it.
pub fn optimize_weights(bands: &QuantileBands, y: ArrayView2<f64>, alpha: f64) -> Result<WeightVector> {
    let q = bands.lower.ncols();
    let uniform = WeightVector::uniform(q);
    let base = weight_objective(bands, y, &uniform, alpha)?;
    if !base.is_finite() {
        return Ok(uniform);
    }
    let mut w = uniform.clone();
    let mut best = base;
    for _ in 0..MAX_SWEEPS {
        let mut improved = false;
        for k in 0..2 * q {
            for step in WEIGHT_STEPS {
                let mut cand = w.clone();
                cand.set(k, w.get(k) * step);
                let v = weight_objective(bands, y, &cand, alpha)?;
                if v < best * (1.0 - MIN_RELATIVE_IMPROVEMENT) {
                    best = v;
                    w = cand;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    if best.is_finite() && best <= base {
        Ok(w.normalized())
    } else {
        Ok(uniform)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McqrConfig {
    pub quantile: QuantileConfig,
    pub optimize_weights: bool,
    /// Share of the calibration rows used to choose weights; the rest
    /// calibrates the threshold.
    pub weight_fraction: f64,
}

impl Default for McqrConfig {
    fn default() -> Self {
        McqrConfig {
            quantile: QuantileConfig::default(),
            optimize_weights: true,
            weight_fraction: 0.5,
        }
    }
}

/// Calibrated MCQR box predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqrPredictor {
    pub nets: QuantilePair,
    pub weights: WeightVector,
    pub threshold: Threshold,
    pub alpha: f64,
}

pub fn mcqr_calibrate(nets: &QuantilePair, w: &WeightVector, x: ArrayView2<f64>, y: ArrayView2<f64>, alpha: f64) -> Result<Threshold> {
    w.validate()?;
    calibrate_scores(&mcqr_scores(&nets.predict(x), y, w), alpha)
}

/// Fits quantile nets on `(x1, y1)` and calibrates them on `(x2, y2)`.
pub fn mcqr_fit(
    (x1, y1): (ArrayView2<f64>, ArrayView2<f64>),
    (x2, y2): (ArrayView2<f64>, ArrayView2<f64>),
    alpha: f64,
    config: &McqrConfig,
) -> Result<McqrPredictor> {
    let nets = train_quantile_nets(x1, y1, alpha, &config.quantile)?;
    mcqr_calibrate_nets(nets, (x2, y2), alpha, config)
}

/// Chooses weights on one part of `(x2, y2)` and calibrates the threshold
/// on the other. Without weight optimization all rows calibrate.
pub fn mcqr_calibrate_nets(
    nets: QuantilePair,
    (x2, y2): (ArrayView2<f64>, ArrayView2<f64>),
    alpha: f64,
    config: &McqrConfig,
) -> Result<McqrPredictor> {
    if x2.nrows() == 0 {
        return Err(Error::Empty("calibration set".into()));
    }
    if x2.nrows() != y2.nrows() {
        return Err(Error::shape("calibration inputs", y2.nrows(), x2.nrows()));
    }
    let (weights, xc, yc) = if config.optimize_weights {
        if !(config.weight_fraction > 0.0 && config.weight_fraction < 1.0) {
            return Err(Error::InvalidArgument("weight fraction must lie in (0, 1)".into()));
        }
        let rows: Vec<usize> = (0..x2.nrows()).collect();
        let first = ((x2.nrows() as f64) * config.weight_fraction).round() as usize;
        let (a, b) = split_pool(&rows, first.min(x2.nrows() - 1), derive_named(config.quantile.seed, "mcqr-weight-split"))?;
        let w = if a.is_empty() {
            WeightVector::uniform(nets.q())
        } else {
            let xa = x2.select(Axis(0), &a);
            optimize_weights(&nets.predict(xa.view()), y2.select(Axis(0), &a).view(), alpha)?
        };
        (w, x2.select(Axis(0), &b), y2.select(Axis(0), &b))
    } else {
        (WeightVector::uniform(nets.q()), x2.to_owned(), y2.to_owned())
    };
    let threshold = mcqr_calibrate(&nets, &weights, xc.view(), yc.view(), alpha)?;
    Ok(McqrPredictor {
        nets,
        weights,
        threshold,
        alpha,
    })
}

impl McqrPredictor {
    pub fn region(&self, x: &[f64]) -> BoxRegion {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("contiguous");
        let b = self.nets.predict(xv);
        box_from_bands(b.lower.row(0).as_slice().unwrap(), b.upper.row(0).as_slice().unwrap(), &self.weights, self.threshold)
    }

    pub fn regions(&self, x: ArrayView2<f64>) -> Vec<BoxRegion> {
        let b = self.nets.predict(x);
        (0..x.nrows())
            .map(|i| box_from_bands(b.lower.row(i).as_slice().unwrap(), b.upper.row(i).as_slice().unwrap(), &self.weights, self.threshold))
            .collect()
    }

    pub fn score(&self, x: &[f64], y: &[f64]) -> f64 {
        mcqr_score(&self.nets, &self.weights, x, y)
    }

    pub fn contains_batch(&self, y: ArrayView2<f64>, x: ArrayView2<f64>) -> Vec<bool> {
        self.regions(x).iter().zip(y.rows()).map(|(b, r)| b.contains(r.as_slice().unwrap())).collect()
    }
}
