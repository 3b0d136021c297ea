//! Dense feed-forward networks with hand-written reverse-mode gradients, and
//! the Adam optimizer.
//!
//! Networks operate on row-major batches: an input of shape `(batch, in)`
//! produces an output of shape `(batch, out)`. The single-point entry points
//! ([`DenseNet::apply`], [`DenseNet::backward`]) run through the same batch
//! code with one row, so both paths give bit-identical results.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    /// Derivative at a pre-activation value. The rectifier's derivative at
    /// exactly zero is taken to be zero.
    #[inline]
    fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer followed by an elementwise activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// Shape `(out, in)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<DenseLayer>,
}

/// Activations retained by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    /// Pre-activation values of every layer, first layer first.
    pub fn pre_activations(&self) -> &[Array2<f64>] {
        &self.pre_activations
    }
}

/// Parameter gradients, shaped like the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl NetGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        NetGrads {
            weights: net
                .layers
                .iter()
                .map(|l| Array2::zeros(l.weight.raw_dim()))
                .collect(),
            biases: net
                .layers
                .iter()
                .map(|l| Array1::zeros(l.bias.len()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &NetGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }
}

impl DenseNet {
    /// Builds a network from explicit layers, checking that widths chain and
    /// that every parameter is finite.
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("network has no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::shape(format!("bias of layer {i}"), l.output_dim(), l.bias.len()));
            }
            if i > 0 && layers[i - 1].output_dim() != l.input_dim() {
                return Err(Error::shape(
                    format!("input of layer {i}"),
                    layers[i - 1].output_dim(),
                    l.input_dim(),
                ));
            }
            if !l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("parameters of layer {i}")));
            }
        }
        Ok(DenseNet { layers })
    }

    /// Multilayer perceptron with rectifier hidden layers and a linear output.
    /// Weights are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases are zero.
    pub fn mlp<R: Rng + ?Sized>(input: usize, hidden: &[usize], output: usize, rng: &mut R) -> Self {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (widths[i], widths[i + 1]);
                let bound = if fan_in > 0 { 1.0 / (fan_in as f64).sqrt() } else { 0.0 };
                let weight = Array2::from_shape_fn((fan_out, fan_in), |_| {
                    if bound > 0.0 {
                        rng.random_range(-bound..bound)
                    } else {
                        0.0
                    }
                });
                DenseLayer {
                    weight,
                    bias: Array1::zeros(fan_out),
                    activation: if i + 1 == n {
                        Activation::Identity
                    } else {
                        Activation::Relu
                    },
                }
            })
            .collect();
        DenseNet { layers }
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Zeroes the final layer so the network outputs exactly zero.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("nonempty");
        last.weight.fill(0.0);
        last.bias.fill(0.0);
    }

    pub fn apply(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::shape("network input", self.input_dim(), input.len()));
        }
        let row = ArrayView2::from_shape((1, input.len()), input).expect("contiguous");
        Ok(self.forward_batch(row).into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Array2<f64> {
        let mut act = input.to_owned();
        for l in &self.layers {
            let mut pre = act.dot(&l.weight.t());
            pre += &l.bias;
            if l.activation != Activation::Identity {
                pre.mapv_inplace(|v| l.activation.apply(v));
            }
            act = pre;
        }
        act
    }

    pub fn forward_cached(&self, input: ArrayView2<f64>) -> (Array2<f64>, ForwardCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut act = input.to_owned();
        for l in &self.layers {
            let mut pre = act.dot(&l.weight.t());
            pre += &l.bias;
            let out = pre.mapv(|v| l.activation.apply(v));
            inputs.push(act);
            pres.push(pre);
            act = out;
        }
        (
            act,
            ForwardCache {
                inputs,
                pre_activations: pres,
            },
        )
    }

    /// Reverse pass: given d(loss)/d(output) for every row, returns the
    /// parameter gradients summed over rows and d(loss)/d(input) per row.
    pub fn backward_batch(&self, cache: &ForwardCache, upstream: ArrayView2<f64>) -> (NetGrads, Array2<f64>) {
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut grad = upstream.to_owned();
        for (i, l) in self.layers.iter().enumerate().rev() {
            if l.activation != Activation::Identity {
                grad.zip_mut_with(&cache.pre_activations[i], |g, &p| *g *= l.activation.derivative(p));
            }
            weights.push(grad.t().dot(&cache.inputs[i]));
            biases.push(grad.sum_axis(Axis(0)));
            grad = grad.dot(&l.weight);
        }
        weights.reverse();
        biases.reverse();
        (NetGrads { weights, biases }, grad)
    }

    /// Gradients of `upstream · net(input)` with respect to every parameter
    /// and to the input.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<(NetGrads, Vec<f64>)> {
        if input.len() != self.input_dim() {
            return Err(Error::shape("network input", self.input_dim(), input.len()));
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::shape("upstream gradient", self.output_dim(), upstream.len()));
        }
        let row = ArrayView2::from_shape((1, input.len()), input).expect("contiguous");
        let up = ArrayView2::from_shape((1, upstream.len()), upstream).expect("contiguous");
        let (_, cache) = self.forward_cached(row);
        let (g, gin) = self.backward_batch(&cache, up);
        Ok((g, gin.into_raw_vec_and_offset().0))
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment accumulators for a fixed list of parameter blocks.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    /// `block_sizes` lists the length of every parameter slice, in the order
    /// they will be passed to [`Adam::step`].
    pub fn new(config: AdamConfig, block_sizes: &[usize]) -> Self {
        Adam {
            config,
            step: 0,
            first: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_blocks(config: AdamConfig, blocks: &[&[f64]]) -> Self {
        let sizes: Vec<usize> = blocks.iter().map(|b| b.len()).collect();
        Self::new(config, &sizes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    /// One bias-corrected Adam update. Rejects the whole update, leaving
    /// parameters and state untouched, if any gradient entry is not finite.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::shape("optimizer blocks", self.first.len(), params.len().min(grads.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() || g.len() != self.first[i].len() {
                return Err(Error::shape(format!("optimizer block {i}"), self.first[i].len(), g.len()));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient block {i}, entry {j}")));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for k in 0..p.len() {
                let gk = g[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p[k] -= learning_rate * mhat / (vhat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;
    use ndarray::array;

    fn layer(weight: Array2<f64>, bias: Array1<f64>, activation: Activation) -> DenseLayer {
        DenseLayer {
            weight,
            bias,
            activation,
        }
    }

    #[test]
    fn identity_layer_passes_input() {
        let net = DenseNet::from_layers(vec![layer(Array2::eye(2), Array1::zeros(2), Activation::Identity)]).unwrap();
        assert_eq!(net.apply(&[1.5, -2.0]).unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn rectifier_clamps_negatives() {
        let net = DenseNet::from_layers(vec![layer(Array2::eye(2), Array1::zeros(2), Activation::Relu)]).unwrap();
        assert_eq!(net.apply(&[-3.0, 2.0]).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn two_layer_all_ones() {
        let net = DenseNet::from_layers(vec![
            layer(Array2::ones((2, 1)), Array1::zeros(2), Activation::Relu),
            layer(Array2::ones((1, 2)), Array1::zeros(1), Activation::Identity),
        ])
        .unwrap();
        assert_eq!(net.apply(&[1.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn shape_errors() {
        let net = DenseNet::from_layers(vec![layer(Array2::eye(2), Array1::zeros(2), Activation::Identity)]).unwrap();
        assert!(matches!(net.apply(&[1.0]), Err(Error::Shape { .. })));
        assert!(matches!(net.backward(&[1.0, 2.0], &[1.0]), Err(Error::Shape { .. })));
        let bad = DenseNet::from_layers(vec![
            layer(Array2::eye(2), Array1::zeros(2), Activation::Relu),
            layer(Array2::ones((1, 3)), Array1::zeros(1), Activation::Identity),
        ]);
        assert!(matches!(bad, Err(Error::Shape { .. })));
        let nan = DenseNet::from_layers(vec![layer(array![[f64::NAN]], Array1::zeros(1), Activation::Identity)]);
        assert!(matches!(nan, Err(Error::NonFinite(_))));
    }

    #[test]
    fn scalar_chain_rule() {
        let net = DenseNet::from_layers(vec![layer(array![[2.0]], array![0.0], Activation::Identity)]).unwrap();
        let (g, gin) = net.backward(&[3.0], &[1.0]).unwrap();
        assert_eq!(g.weights[0][[0, 0]], 3.0);
        assert_eq!(g.biases[0][0], 1.0);
        assert_eq!(gin, vec![2.0]);
    }

    #[test]
    fn dead_rectifier_blocks_gradient() {
        let net = DenseNet::from_layers(vec![
            layer(array![[1.0]], array![-5.0], Activation::Relu),
            layer(array![[1.0]], array![0.0], Activation::Identity),
        ])
        .unwrap();
        let (g, gin) = net.backward(&[1.0], &[1.0]).unwrap();
        assert_eq!(g.weights[0][[0, 0]], 0.0);
        assert_eq!(g.biases[0][0], 0.0);
        assert_eq!(gin, vec![0.0]);
        assert_eq!(g.biases[1][0], 1.0);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = vec![0.3, -1.2];
        let mut opt = Adam::new(AdamConfig::default(), &[2]);
        opt.step(vec![&mut p], &[&[0.0, 0.0]]).unwrap();
        assert_eq!(p, vec![0.3, -1.2]);
        assert_eq!(opt.first_moments()[0], vec![0.0, 0.0]);
        assert_eq!(opt.second_moments()[0], vec![0.0, 0.0]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_first_and_second_step() {
        let mut p = vec![1.0];
        let mut opt = Adam::new(AdamConfig::default(), &[1]);
        opt.step(vec![&mut p], &[&[1.0]]).unwrap();
        let d1 = 1.0 - p[0];
        // m̂ = g, v̂ = g² on the first step: Δ = lr·g/(|g|+ε)
        assert!((d1 - 0.001 / (1.0 + 1e-8)).abs() < 1e-15);
        let before = p[0];
        opt.step(vec![&mut p], &[&[1.0]]).unwrap();
        let d2 = before - p[0];
        assert!((d2 / d1 - 1.0).abs() < 0.01);
        assert_eq!(opt.step_count(), 2);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = vec![1.0, 2.0];
        let mut opt = Adam::new(AdamConfig::default(), &[2]);
        let err = opt.step(vec![&mut p], &[&[0.5, f64::INFINITY]]);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn batch_and_single_paths_agree() {
        let mut r = rng(11);
        let net = DenseNet::mlp(3, &[5, 4], 2, &mut r);
        let xs = array![[0.1, -0.4, 0.9], [1.3, 0.2, -0.7]];
        let batch = net.forward_batch(xs.view());
        for i in 0..2 {
            let single = net.apply(xs.row(i).as_slice().unwrap()).unwrap();
            assert_eq!(single, batch.row(i).to_vec());
        }
    }

    #[test]
    fn forward_is_deterministic_for_seed() {
        let a = DenseNet::mlp(2, &[8], 1, &mut rng(5));
        let b = DenseNet::mlp(2, &[8], 1, &mut rng(5));
        assert_eq!(a, b);
        assert_eq!(a.apply(&[0.3, 0.7]).unwrap(), b.apply(&[0.3, 0.7]).unwrap());
    }
}
