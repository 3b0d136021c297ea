//! Conditional RealNVP flow.
//!
//! The flow `t(z, x)` maps a standard-Gaussian latent `z ∈ ℝ^q` to an output
//! `y ∈ ℝ^q`, conditioned on `x ∈ ℝ^p`. It is a stack of affine coupling
//! layers; each layer keeps the `pass` coordinates fixed and updates the
//! `transformed` coordinates as
//!
//! ```text
//! y[T] = z[T] · exp(s) + t,   s = c·tanh(u(z[P], x) / c),   t = v(z[P], x)
//! ```
//!
//! so its log-Jacobian is `Σ s`. Consecutive layers swap the roles of the two
//! coordinate blocks. For `q = 1` the pass block is empty and the
//! conditioner sees only `x`.
//!
//! Outputs and inputs are standardized inside the model: the coupling stack
//! works on standardized values and the fixed affine map back to output
//! units contributes `Σ ln std_j` to the forward log-Jacobian, so densities,
//! latents and region volumes are all expressed in original units.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, DenseLayer, DenseNet, ForwardCache, NetGrads};
use crate::rng::{derive_named, rng};

pub const FORMAT_VERSION: u32 = 1;

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub layers: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Soft clamp `c` on the log-scale; `None` leaves it unbounded.
    pub clamp: Option<f64>,
    /// Fit input/output standardization on the training set.
    pub standardize: bool,
    /// Rescale each minibatch gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
    /// Cosine-decay the learning rate to this fraction of its initial value
    /// over the run; `None` keeps it constant.
    pub final_lr_fraction: Option<f64>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            layers: 6,
            hidden: vec![128, 128],
            epochs: 200,
            learning_rate: 3e-3,
            batch_size: 256,
            seed: 0,
            clamp: Some(5.0),
            standardize: true,
            grad_clip: Some(GRAD_CLIP),
            final_lr_fraction: Some(FINAL_LR_FRACTION),
        }
    }
}

const GRAD_CLIP: f64 = 10.0;
const FINAL_LR_FRACTION: f64 = 0.05;

/// Learning rate at `step` of `total` under an optional cosine decay.
pub fn scheduled_lr(base: f64, final_fraction: Option<f64>, step: usize, total: usize) -> f64 {
    match final_fraction {
        Some(f) if total > 1 => {
            let progress = step as f64 / (total - 1) as f64;
            base * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
        }
        _ => base,
    }
}

/// Scales gradient blocks in place so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm(blocks: &mut [Vec<f64>], max_norm: f64) {
    let norm = blocks.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        blocks.iter_mut().flatten().for_each(|g| *g *= k);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingLayer {
    pub pass: Vec<usize>,
    pub transformed: Vec<usize>,
    pub scale_net: DenseNet,
    pub shift_net: DenseNet,
    pub clamp: Option<f64>,
}

struct LayerCache {
    scale: ForwardCache,
    shift: ForwardCache,
    raw_scale: Array2<f64>,
    log_scale: Array2<f64>,
    out_transformed: Array2<f64>,
}

/// Coordinate masks for layer `index` of a `q`-dimensional flow: even/odd
/// split, roles swapped on every other layer.
pub fn layer_masks(q: usize, index: usize) -> (Vec<usize>, Vec<usize>) {
    if q == 1 {
        return (vec![], vec![0]);
    }
    let even: Vec<usize> = (0..q).step_by(2).collect();
    let odd: Vec<usize> = (1..q).step_by(2).collect();
    if index % 2 == 0 {
        (even, odd)
    } else {
        (odd, even)
    }
}

fn conditioner_input(v: ArrayView2<f64>, pass: &[usize], x: ArrayView2<f64>) -> Array2<f64> {
    let b = v.nrows();
    let p = x.ncols();
    let k = pass.len();
    let broadcast = x.nrows() == 1 && b != 1;
    let mut h = Array2::zeros((b, k + p));
    for i in 0..b {
        for (c, &j) in pass.iter().enumerate() {
            h[[i, c]] = v[[i, j]];
        }
        let xi = if broadcast { 0 } else { i };
        for j in 0..p {
            h[[i, k + j]] = x[[xi, j]];
        }
    }
    h
}

impl CouplingLayer {
    /// Layer whose scale and shift conditioners ignore their input and
    /// return the given constants.
    pub fn constant(pass: Vec<usize>, transformed: Vec<usize>, p: usize, log_scale: &[f64], shift: &[f64]) -> Result<Self> {
        let width = pass.len() + p;
        let net = |vals: &[f64]| -> Result<DenseNet> {
            if vals.len() != transformed.len() {
                return Err(Error::shape("constant layer outputs", transformed.len(), vals.len()));
            }
            DenseNet::from_layers(vec![DenseLayer {
                weight: Array2::zeros((vals.len(), width)),
                bias: Array1::from(vals.to_vec()),
                activation: crate::nn::Activation::Identity,
            }])
        };
        Ok(CouplingLayer {
            scale_net: net(log_scale)?,
            shift_net: net(shift)?,
            pass,
            transformed,
            clamp: None,
        })
    }

    fn validate(&self, q: usize, p: usize, index: usize) -> Result<()> {
        let mut seen = vec![false; q];
        for &j in self.pass.iter().chain(&self.transformed) {
            if j >= q || seen[j] {
                return Err(Error::InvalidArgument(format!(
                    "layer {index}: masks must partition 0..{q}"
                )));
            }
            seen[j] = true;
        }
        if seen.iter().any(|s| !s) || self.transformed.is_empty() || (q >= 2 && self.pass.is_empty()) {
            return Err(Error::InvalidArgument(format!(
                "layer {index}: masks must partition 0..{q} into nonempty blocks"
            )));
        }
        let width = self.pass.len() + p;
        for net in [&self.scale_net, &self.shift_net] {
            if net.input_dim() != width {
                return Err(Error::shape(format!("layer {index} conditioner input"), width, net.input_dim()));
            }
            if net.output_dim() != self.transformed.len() {
                return Err(Error::shape(
                    format!("layer {index} conditioner output"),
                    self.transformed.len(),
                    net.output_dim(),
                ));
            }
        }
        if let Some(c) = self.clamp {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidArgument(format!("layer {index}: clamp must be positive")));
            }
        }
        Ok(())
    }

    #[inline]
    fn squash(&self, u: f64) -> f64 {
        match self.clamp {
            Some(c) => c * (u / c).tanh(),
            None => u,
        }
    }

    #[inline]
    fn squash_derivative(&self, u: f64) -> f64 {
        match self.clamp {
            Some(c) => {
                let t = (u / c).tanh();
                1.0 - t * t
            }
            None => 1.0,
        }
    }

    /// Latent-to-output direction. Returns the new values and the
    /// per-row log-Jacobian `Σ s`.
    pub fn forward_batch(&self, z: ArrayView2<f64>, x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
        let h = conditioner_input(z, &self.pass, x);
        let raw = self.scale_net.forward_batch(h.view());
        let shift = self.shift_net.forward_batch(h.view());
        let mut out = z.to_owned();
        let mut logdet = Array1::zeros(z.nrows());
        for i in 0..z.nrows() {
            for (c, &j) in self.transformed.iter().enumerate() {
                let s = self.squash(raw[[i, c]]);
                out[[i, j]] = z[[i, j]] * s.exp() + shift[[i, c]];
                logdet[i] += s;
            }
        }
        (out, logdet)
    }

    /// Output-to-latent direction. The returned log-Jacobian is that of the
    /// inverse map, `-Σ s`.
    pub fn inverse_batch(&self, y: ArrayView2<f64>, x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
        let h = conditioner_input(y, &self.pass, x);
        let raw = self.scale_net.forward_batch(h.view());
        let shift = self.shift_net.forward_batch(h.view());
        let mut out = y.to_owned();
        let mut logdet = Array1::zeros(y.nrows());
        for i in 0..y.nrows() {
            for (c, &j) in self.transformed.iter().enumerate() {
                let s = self.squash(raw[[i, c]]);
                out[[i, j]] = (y[[i, j]] - shift[[i, c]]) * (-s).exp();
                logdet[i] -= s;
            }
        }
        (out, logdet)
    }

    pub fn forward(&self, z: &[f64], x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (out, ld) = self.forward_batch(row(z), row(x));
        let out = out.into_raw_vec_and_offset().0;
        if !out.iter().all(|v| v.is_finite()) || !ld[0].is_finite() {
            return Err(Error::NonFinite("coupling layer output".into()));
        }
        Ok((out, ld[0]))
    }

    pub fn inverse(&self, y: &[f64], x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (out, ld) = self.inverse_batch(row(y), row(x));
        let out = out.into_raw_vec_and_offset().0;
        if !out.iter().all(|v| v.is_finite()) || !ld[0].is_finite() {
            return Err(Error::NonFinite("coupling layer output".into()));
        }
        Ok((out, ld[0]))
    }

    fn inverse_cached(&self, y: ArrayView2<f64>, x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>, LayerCache) {
        let h = conditioner_input(y, &self.pass, x);
        let (raw, scale) = self.scale_net.forward_cached(h.view());
        let (shift_out, shift) = self.shift_net.forward_cached(h.view());
        let b = y.nrows();
        let k = self.transformed.len();
        let mut out = y.to_owned();
        let mut logdet = Array1::zeros(b);
        let mut log_scale = Array2::zeros((b, k));
        let mut out_t = Array2::zeros((b, k));
        for i in 0..b {
            for (c, &j) in self.transformed.iter().enumerate() {
                let s = self.squash(raw[[i, c]]);
                let v = (y[[i, j]] - shift_out[[i, c]]) * (-s).exp();
                out[[i, j]] = v;
                out_t[[i, c]] = v;
                log_scale[[i, c]] = s;
                logdet[i] -= s;
            }
        }
        (
            out,
            logdet,
            LayerCache {
                scale,
                shift,
                raw_scale: raw,
                log_scale,
                out_transformed: out_t,
            },
        )
    }

    /// Backward through one inverse layer.
    ///
    /// `grad_out` is d(loss)/d(layer output); `logdet_weight` is
    /// d(loss)/d(inverse log-Jacobian) per row. Returns d(loss)/d(layer input).
    fn inverse_backward(
        &self,
        cache: &LayerCache,
        grad_out: ArrayView2<f64>,
        logdet_weight: f64,
    ) -> (Array2<f64>, NetGrads, NetGrads) {
        let b = grad_out.nrows();
        let k = self.transformed.len();
        let mut grad_in = grad_out.to_owned();
        let mut g_raw = Array2::zeros((b, k));
        let mut g_shift = Array2::zeros((b, k));
        for i in 0..b {
            for (c, &j) in self.transformed.iter().enumerate() {
                let s = cache.log_scale[[i, c]];
                let e = (-s).exp();
                let g = grad_out[[i, j]];
                grad_in[[i, j]] = g * e;
                g_shift[[i, c]] = -g * e;
                // z = (y - t)·e^{-s}: dz/ds = -z; the inverse logdet is -Σ s
                let gs = -g * cache.out_transformed[[i, c]] - logdet_weight;
                g_raw[[i, c]] = gs * self.squash_derivative(cache.raw_scale[[i, c]]);
            }
        }
        let (gu, hu) = self.scale_net.backward_batch(&cache.scale, g_raw.view());
        let (gv, hv) = self.shift_net.backward_batch(&cache.shift, g_shift.view());
        for i in 0..b {
            for (c, &j) in self.pass.iter().enumerate() {
                grad_in[[i, j]] += hu[[i, c]] + hv[[i, c]];
            }
        }
        (grad_in, gu, gv)
    }
}

fn row(v: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, v.len()), v).expect("contiguous")
}

/// Metadata recorded by [`train_flow`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    /// Mean negative log-likelihood per epoch.
    pub loss_trace: Vec<f64>,
    pub seed: u64,
    pub config: Option<FlowConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    pub format_version: u32,
    q: usize,
    p: usize,
    layers: Vec<CouplingLayer>,
    x_scaler: Standardizer,
    y_scaler: Standardizer,
    pub meta: TrainingMeta,
}

/// Gradients for every coupling layer: (scale net, shift net).
#[derive(Debug, Clone)]
pub struct FlowGrads {
    pub layers: Vec<(NetGrads, NetGrads)>,
}

impl FlowGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for (u, v) in &self.layers {
            out.extend(u.slices());
            out.extend(v.slices());
        }
        out
    }
}

impl FlowModel {
    /// Freshly initialized flow: hidden layers random, output layers zero,
    /// so the map starts as the identity.
    pub fn new<R: Rng + ?Sized>(q: usize, p: usize, config: &FlowConfig, rng: &mut R) -> Result<Self> {
        Self::init(q, p, config, rng, None)
    }

    /// Flow whose output layers are also random, scaled by `output_scale`.
    /// Useful for exercising non-trivial maps without training.
    pub fn randomized<R: Rng + ?Sized>(
        q: usize,
        p: usize,
        config: &FlowConfig,
        rng: &mut R,
        output_scale: f64,
    ) -> Result<Self> {
        Self::init(q, p, config, rng, Some(output_scale))
    }

    fn init<R: Rng + ?Sized>(
        q: usize,
        p: usize,
        config: &FlowConfig,
        rng: &mut R,
        output_scale: Option<f64>,
    ) -> Result<Self> {
        if q == 0 {
            return Err(Error::InvalidArgument("output dimension must be at least 1".into()));
        }
        if config.layers == 0 {
            return Err(Error::InvalidArgument("flow needs at least one layer".into()));
        }
        let layers = (0..config.layers)
            .map(|i| {
                let (pass, transformed) = layer_masks(q, i);
                let width = pass.len() + p;
                let mut nets = [0, 1].map(|_| DenseNet::mlp(width, &config.hidden, transformed.len(), rng));
                for net in &mut nets {
                    match output_scale {
                        None => net.zero_output_layer(),
                        Some(scale) => {
                            let last = net.layers_mut().last_mut().expect("nonempty");
                            last.weight.mapv_inplace(|w| w * scale);
                            last.bias.mapv_inplace(|_| scale * rng.random_range(-0.5..0.5));
                        }
                    }
                }
                let [scale_net, shift_net] = nets;
                CouplingLayer {
                    pass,
                    transformed,
                    scale_net,
                    shift_net,
                    clamp: config.clamp,
                }
            })
            .collect();
        Ok(FlowModel {
            format_version: FORMAT_VERSION,
            q,
            p,
            layers,
            x_scaler: Standardizer::identity(p),
            y_scaler: Standardizer::identity(q),
            meta: TrainingMeta::default(),
        })
    }

    /// Flow built from explicit layers, with identity standardization.
    pub fn from_layers(q: usize, p: usize, layers: Vec<CouplingLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("flow needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            l.validate(q, p, i)?;
        }
        Ok(FlowModel {
            format_version: FORMAT_VERSION,
            q,
            p,
            layers,
            x_scaler: Standardizer::identity(p),
            y_scaler: Standardizer::identity(q),
            meta: TrainingMeta::default(),
        })
    }

    pub fn with_scalers(mut self, x_scaler: Standardizer, y_scaler: Standardizer) -> Result<Self> {
        if x_scaler.dim() != self.p {
            return Err(Error::shape("input scaler", self.p, x_scaler.dim()));
        }
        if y_scaler.dim() != self.q {
            return Err(Error::shape("output scaler", self.q, y_scaler.dim()));
        }
        self.x_scaler = x_scaler;
        self.y_scaler = y_scaler;
        Ok(self)
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn x_scaler(&self) -> &Standardizer {
        &self.x_scaler
    }

    pub fn y_scaler(&self) -> &Standardizer {
        &self.y_scaler
    }

    fn check_batch(&self, v: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<()> {
        if v.ncols() != self.q {
            return Err(Error::shape("flow output dimension", self.q, v.ncols()));
        }
        if x.ncols() != self.p {
            return Err(Error::shape("flow input dimension", self.p, x.ncols()));
        }
        if x.nrows() != v.nrows() && x.nrows() != 1 {
            return Err(Error::shape("conditioning rows", v.nrows(), x.nrows()));
        }
        if !v.iter().chain(x.iter()).all(|a| a.is_finite()) {
            return Err(Error::NonFinite("flow input".into()));
        }
        Ok(())
    }

    /// `t(z, x)` for a batch of latents. `x` has one row per latent, or a
    /// single row shared by all. Returns outputs and the forward
    /// log-Jacobian `ln|det ∂y/∂z|` per row.
    pub fn forward_batch(&self, z: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check_batch(z, x)?;
        let xs = self.x_scaler.transform(x);
        let mut v = z.to_owned();
        let mut logdet = Array1::from_elem(z.nrows(), self.y_scaler.log_scale());
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, ld) = layer.forward_batch(v.view(), xs.view());
            if !next.iter().chain(ld.iter()).all(|a| a.is_finite()) {
                return Err(Error::NonFiniteLayer { layer: i });
            }
            v = next;
            logdet += &ld;
        }
        Ok((self.y_scaler.inverse(v.view()), logdet))
    }

    /// `t⁻¹(y, x)` for a batch. Returns latents and the inverse log-Jacobian
    /// `ln|det ∂z/∂y|` per row.
    pub fn inverse_batch(&self, y: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check_batch(y, x)?;
        let xs = self.x_scaler.transform(x);
        let mut v = self.y_scaler.transform(y);
        let mut logdet = Array1::from_elem(y.nrows(), -self.y_scaler.log_scale());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (next, ld) = layer.inverse_batch(v.view(), xs.view());
            if !next.iter().chain(ld.iter()).all(|a| a.is_finite()) {
                return Err(Error::NonFiniteLayer { layer: i });
            }
            v = next;
            logdet += &ld;
        }
        Ok((v, logdet))
    }

    pub fn forward(&self, z: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_with_logdet(z, x)?.0)
    }

    pub fn forward_with_logdet(&self, z: &[f64], x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (y, ld) = self.forward_batch(row(z), row(x))?;
        Ok((y.into_raw_vec_and_offset().0, ld[0]))
    }

    pub fn inverse(&self, y: &[f64], x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (z, ld) = self.inverse_batch(row(y), row(x))?;
        Ok((z.into_raw_vec_and_offset().0, ld[0]))
    }

    /// Per-row negative log-likelihood `½‖z‖² + (q/2)ln 2π − ln|det ∂z/∂y|`.
    pub fn nll_rows(&self, y: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let (z, ld) = self.inverse_batch(y, x)?;
        let half_q = 0.5 * self.q as f64 * LN_2PI;
        Ok(Array1::from_shape_fn(z.nrows(), |i| {
            0.5 * z.row(i).dot(&z.row(i)) + half_q - ld[i]
        }))
    }

    /// Mean negative log-likelihood over a nonempty batch.
    pub fn nll(&self, y: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<f64> {
        if y.nrows() == 0 {
            return Err(Error::Empty("likelihood batch".into()));
        }
        Ok(self.nll_rows(y, x)?.mean().expect("nonempty"))
    }

    /// Mean NLL and its gradient with respect to every conditioner parameter.
    pub fn nll_grad(&self, y: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<(f64, FlowGrads)> {
        if y.nrows() == 0 {
            return Err(Error::Empty("likelihood batch".into()));
        }
        self.check_batch(y, x)?;
        let ys = self.y_scaler.transform(y);
        let xs = self.x_scaler.transform(x);
        let (loss, grads) = self.nll_grad_standardized(ys.view(), xs.view())?;
        Ok((loss + self.y_scaler.log_scale(), grads))
    }

    /// Same as [`FlowModel::nll_grad`] on already-standardized data, without
    /// the constant `Σ ln std` term.
    fn nll_grad_standardized(&self, y: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<(f64, FlowGrads)> {
        let b = y.nrows();
        let inv_b = 1.0 / b as f64;
        let mut v = y.to_owned();
        let mut logdet = Array1::<f64>::zeros(b);
        let mut caches: Vec<Option<LayerCache>> = (0..self.layers.len()).map(|_| None).collect();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (next, ld, cache) = layer.inverse_cached(v.view(), x);
            if !next.iter().chain(ld.iter()).all(|a| a.is_finite()) {
                return Err(Error::NonFiniteLayer { layer: i });
            }
            v = next;
            logdet += &ld;
            caches[i] = Some(cache);
        }
        let half_q = 0.5 * self.q as f64 * LN_2PI;
        let loss = (0..b)
            .map(|i| 0.5 * v.row(i).dot(&v.row(i)) + half_q - logdet[i])
            .sum::<f64>()
            * inv_b;
        // loss = mean(½‖z‖²) − mean(logdet)
        let mut grad = v.mapv(|a| a * inv_b);
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let cache = caches[i].as_ref().expect("filled above");
            let (g_in, gu, gv) = layer.inverse_backward(cache, grad.view(), -inv_b);
            grad = g_in;
            layers.push((gu, gv));
        }
        Ok((loss, FlowGrads { layers }))
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.extend(l.scale_net.param_slices_mut());
            out.extend(l.shift_net.param_slices_mut());
        }
        out
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.scale_net.param_slices());
            out.extend(l.shift_net.param_slices());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// `n` conditional draws `t(z_k, x)` with `z_k ~ N(0, I)` from `seed`.
    /// Draws are generated sequentially, so a smaller `n` yields a prefix of
    /// a larger one.
    pub fn sample(&self, x: &[f64], n: usize, seed: u64) -> Result<Array2<f64>> {
        let z = gaussian_matrix(n, self.q, seed);
        Ok(self.forward_batch(z.view(), row(x))?.0)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let m: FlowModel = serde_json::from_slice(&std::fs::read(path)?)?;
        m.check_loaded()?;
        Ok(m)
    }

    pub fn check_loaded(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported flow format version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.validate(self.q, self.p, i)?;
        }
        Ok(())
    }
}

/// `n×q` matrix of standard normal draws, row by row, from `seed`.
pub fn gaussian_matrix(n: usize, q: usize, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_simple_fn((n, q), || r.sample(StandardNormal))
}

/// Fits a conditional flow to `(x, y)` rows by minibatch Adam on the mean
/// negative log-likelihood.
pub fn train_flow(y: ArrayView2<f64>, x: ArrayView2<f64>, config: &FlowConfig) -> Result<FlowModel> {
    let n = y.nrows();
    if n == 0 {
        return Err(Error::Empty("flow training set".into()));
    }
    if x.nrows() != n {
        return Err(Error::shape("training inputs", n, x.nrows()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let (q, p) = (y.ncols(), x.ncols());
    let mut init_rng = rng(derive_named(config.seed, "flow-init"));
    let mut model = FlowModel::new(q, p, config, &mut init_rng)?;
    let all: Vec<usize> = (0..n).collect();
    if config.standardize {
        model.x_scaler = if p > 0 {
            Standardizer::fit_lenient(x, &all)?
        } else {
            Standardizer::identity(0)
        };
        model.y_scaler = Standardizer::fit_lenient(y, &all)?;
    }
    model.check_batch(y, x)?;
    let ys = model.y_scaler.transform(y);
    let xs = model.x_scaler.transform(x);
    let offset = model.y_scaler.log_scale();

    let mut opt = Adam::for_blocks(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        &model.param_slices(),
    );
    let mut shuffle_rng = rng(derive_named(config.seed, "flow-shuffle"));
    let mut order = all;
    let mut trace = Vec::with_capacity(config.epochs);
    let total_steps = config.epochs * n.div_ceil(config.batch_size);
    let mut step_index = 0;
    for epoch in 0..config.epochs {
        let checkpoint = model.clone();
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut failed = false;
        for chunk in order.chunks(config.batch_size) {
            let yb = ys.select(Axis(0), chunk);
            let xb = xs.select(Axis(0), chunk);
            opt.config.learning_rate =
                scheduled_lr(config.learning_rate, config.final_lr_fraction, step_index, total_steps);
            step_index += 1;
            let step = match model.nll_grad_standardized(yb.view(), xb.view()) {
                Ok((loss, grads)) if loss.is_finite() => {
                    let mut blocks: Vec<Vec<f64>> = grads.slices().iter().map(|g| g.to_vec()).collect();
                    if let Some(c) = config.grad_clip {
                        clip_global_norm(&mut blocks, c);
                    }
                    let views: Vec<&[f64]> = blocks.iter().map(|b| b.as_slice()).collect();
                    opt.step(model.param_slices_mut(), &views).map(|_| loss)
                }
                Ok(_) => Err(Error::NonFinite("loss".into())),
                Err(e) => Err(e),
            };
            match step {
                Ok(loss) => total += loss * chunk.len() as f64,
                Err(e) => {
                    log::warn!("flow training stopped at epoch {epoch}: {e}");
                    failed = true;
                    break;
                }
            }
        }
        if failed {
            let mut checkpoint = checkpoint;
            checkpoint.meta = TrainingMeta {
                epochs: epoch,
                loss_trace: trace,
                seed: config.seed,
                config: Some(config.clone()),
            };
            return Err(Error::Diverged {
                epoch,
                checkpoint: Box::new(checkpoint),
            });
        }
        let epoch_loss = total / n as f64 + offset;
        log::debug!("flow epoch {epoch}: nll {epoch_loss:.5}");
        trace.push(epoch_loss);
    }
    model.meta = TrainingMeta {
        epochs: config.epochs,
        loss_trace: trace,
        seed: config.seed,
        config: Some(config.clone()),
    };
    Ok(model)
}
