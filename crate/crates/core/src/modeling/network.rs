//! Fully connected tanh network with a linear output layer, forward and
//! backward passes, and plain mini-batch gradient descent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::SparseVec;

/// Network input: hashed sparse features or a dense vector.
#[derive(Clone, Debug, PartialEq)]
pub enum Input {
    Sparse(SparseVec),
    Dense(Vec<f64>),
}

impl Input {
    fn dim_hint(&self) -> usize {
        match self {
            Input::Sparse(v) => v.last().map_or(0, |e| e.0 as usize + 1),
            Input::Dense(v) => v.len(),
        }
    }
}

/// Affine layer stored input-major: `weights[i * out_dim + o]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform init in ±sqrt(3 / fan_in), i.e. unit-variance pre-activations
    /// for unit-variance inputs. `fan_in` is passed explicitly because the
    /// first layer only ever sees a few dozen active hashed features.
    pub fn random(in_dim: usize, out_dim: usize, fan_in: usize, rng: &mut impl Rng) -> Self {
        let a = (3.0 / fan_in.max(1) as f64).sqrt();
        Self {
            in_dim,
            out_dim,
            weights: (0..in_dim * out_dim)
                .map(|_| rng.random_range(-a..a))
                .collect(),
            bias: vec![0.0; out_dim],
        }
    }

    fn forward(&self, input: &Input, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.bias);
        match input {
            Input::Sparse(entries) => {
                for &(i, x) in entries {
                    let row = &self.weights[i as usize * self.out_dim..][..self.out_dim];
                    axpy(x, row, out);
                }
            }
            Input::Dense(xs) => {
                for (i, &x) in xs.iter().enumerate() {
                    if x != 0.0 {
                        let row = &self.weights[i * self.out_dim..][..self.out_dim];
                        axpy(x, row, out);
                    }
                }
            }
        }
    }

    fn forward_dense(&self, xs: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.bias);
        for (i, &x) in xs.iter().enumerate() {
            let row = &self.weights[i * self.out_dim..][..self.out_dim];
            axpy(x, row, out);
        }
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Layers with tanh after every layer except the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Dense>,
}

/// Per-layer outputs of one forward pass. `outputs[l]` is post-tanh for
/// hidden layers and raw logits for the last layer.
#[derive(Clone, Debug)]
pub struct Trace {
    pub outputs: Vec<Vec<f64>>,
}

impl Trace {
    pub fn logits(&self) -> &[f64] {
        self.outputs.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Output of the last hidden layer, the input of the final layer.
    pub fn penultimate(&self) -> &[f64] {
        &self.outputs[self.outputs.len() - 2]
    }
}

impl Network {
    pub fn new(layers: Vec<Dense>) -> Self {
        Self { layers }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn forward(&self, input: &Input) -> Trace {
        debug_assert!(input.dim_hint() <= self.input_dim());
        let n = self.layers.len();
        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(n);
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.out_dim);
            if l == 0 {
                layer.forward(input, &mut out);
            } else {
                layer.forward_dense(&outputs[l - 1], &mut out);
            }
            if l + 1 < n {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            outputs.push(out);
        }
        Trace { outputs }
    }

    /// Logits computed by the final layer alone from a given penultimate
    /// activation.
    pub fn head_logits(&self, hidden: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        self.layers
            .last()
            .expect("network has layers")
            .forward_dense(hidden, &mut out);
        out
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Cross-entropy H(target, softmax(logits)).
pub fn cross_entropy(target: &[f64], logits: &[f64]) -> f64 {
    let lse = log_sum_exp(logits);
    target
        .iter()
        .zip(logits)
        .filter(|(t, _)| **t != 0.0)
        .map(|(t, z)| -t * (z - lse))
        .sum()
}

/// Gradient buffers shaped like a network.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
    touched: Vec<u32>,
    touched_mask: Vec<bool>,
    sparse_first: bool,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            touched: Vec::new(),
            touched_mask: vec![false; net.input_dim()],
            sparse_first: false,
        }
    }

    fn clear(&mut self, net: &Network) {
        for (l, g) in self.weights.iter_mut().enumerate() {
            if l == 0 && self.sparse_first {
                let out_dim = net.layers[0].out_dim;
                for &i in &self.touched {
                    g[i as usize * out_dim..][..out_dim].fill(0.0);
                    self.touched_mask[i as usize] = false;
                }
            } else {
                g.fill(0.0);
            }
        }
        self.touched.clear();
        self.sparse_first = false;
        for b in &mut self.bias {
            b.fill(0.0);
        }
    }
}

/// Accumulate gradients of `H(target, softmax(logits))` for one example into
/// `grads`. Layers below `first_trainable` receive no gradient. Returns the
/// example's loss.
pub fn accumulate(
    net: &Network,
    input: &Input,
    target: &[f64],
    first_trainable: usize,
    grads: &mut Gradients,
) -> f64 {
    let trace = net.forward(input);
    let logits = trace.logits();
    let loss = cross_entropy(target, logits);
    let probs = softmax(logits);
    let mut delta: Vec<f64> = probs.iter().zip(target).map(|(p, t)| p - t).collect();

    for l in (first_trainable..net.layers.len()).rev() {
        let layer = &net.layers[l];
        let out_dim = layer.out_dim;
        axpy(1.0, &delta, &mut grads.bias[l]);
        let gw = &mut grads.weights[l];
        if l == 0 {
            match input {
                Input::Sparse(entries) => {
                    grads.sparse_first = true;
                    for &(i, x) in entries {
                        if !grads.touched_mask[i as usize] {
                            grads.touched_mask[i as usize] = true;
                            grads.touched.push(i);
                        }
                        axpy(x, &delta, &mut gw[i as usize * out_dim..][..out_dim]);
                    }
                }
                Input::Dense(xs) => {
                    for (i, &x) in xs.iter().enumerate() {
                        axpy(x, &delta, &mut gw[i * out_dim..][..out_dim]);
                    }
                }
            }
            break;
        }
        let prev = &trace.outputs[l - 1];
        for (i, &x) in prev.iter().enumerate() {
            axpy(x, &delta, &mut gw[i * out_dim..][..out_dim]);
        }
        if l == first_trainable {
            break;
        }
        let mut next = vec![0.0; layer.in_dim];
        for (i, nd) in next.iter_mut().enumerate() {
            let row = &layer.weights[i * out_dim..][..out_dim];
            let s: f64 = row.iter().zip(&delta).map(|(w, d)| w * d).sum();
            *nd = s * (1.0 - prev[i] * prev[i]);
        }
        delta = next;
    }
    loss
}

/// Mean loss over `examples` plus `l2 / 2 · Σ w²` over trainable weights.
pub fn objective(
    net: &Network,
    examples: &[(Input, Vec<f64>)],
    l2: f64,
    first_trainable: usize,
) -> f64 {
    let data: f64 = examples
        .iter()
        .map(|(x, t)| cross_entropy(t, net.forward(x).logits()))
        .sum::<f64>()
        / examples.len() as f64;
    let reg: f64 = net.layers[first_trainable..]
        .iter()
        .flat_map(|l| l.weights.iter())
        .map(|w| w * w)
        .sum();
    data + 0.5 * l2 * reg
}

/// Analytic gradient of [`objective`].
pub fn objective_gradient(
    net: &Network,
    examples: &[(Input, Vec<f64>)],
    l2: f64,
    first_trainable: usize,
) -> Gradients {
    let mut g = Gradients::zeros_like(net);
    for (x, t) in examples {
        accumulate(net, x, t, first_trainable, &mut g);
    }
    let scale = 1.0 / examples.len() as f64;
    for l in first_trainable..net.layers.len() {
        for (gw, w) in g.weights[l].iter_mut().zip(&net.layers[l].weights) {
            *gw = *gw * scale + l2 * w;
        }
        g.bias[l].iter_mut().for_each(|b| *b *= scale);
    }
    g
}

/// Settings of one gradient-descent run.
#[derive(Clone, Copy, Debug)]
pub struct SgdSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
    pub first_trainable: usize,
}

/// Mini-batch gradient descent with a fixed learning rate. Examples are
/// reshuffled every epoch from a generator seeded once with `seed`. Returns
/// the mean per-example loss observed during each epoch.
pub fn sgd(
    net: &mut Network,
    examples: &[(Input, Vec<f64>)],
    settings: &SgdSettings,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut grads = Gradients::zeros_like(net);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(settings.epochs);
    for _ in 0..settings.epochs {
        history.push(sgd_epoch(net, examples, settings, &mut rng, &mut order, &mut grads));
    }
    history
}

pub(crate) fn sgd_epoch(
    net: &mut Network,
    examples: &[(Input, Vec<f64>)],
    settings: &SgdSettings,
    rng: &mut ChaCha8Rng,
    order: &mut Vec<usize>,
    grads: &mut Gradients,
) -> f64 {
    use rand::seq::SliceRandom;
    if order.len() != examples.len() {
        *order = (0..examples.len()).collect();
    }
    order.shuffle(rng);
    let batch = settings.batch_size.max(1);
    let mut total = 0.0;
    for chunk in order.chunks(batch) {
        for &i in chunk.iter() {
            let (x, t) = &examples[i];
            total += accumulate(net, x, t, settings.first_trainable, grads);
        }
        apply_update(net, grads, chunk.len(), settings);
        grads.clear(net);
    }
    total / examples.len().max(1) as f64
}

fn apply_update(net: &mut Network, grads: &Gradients, batch: usize, s: &SgdSettings) {
    let lr = s.learning_rate;
    let scale = lr / batch as f64;
    for l in s.first_trainable..net.layers.len() {
        let layer = &mut net.layers[l];
        if s.l2 > 0.0 {
            let decay = 1.0 - lr * s.l2;
            layer.weights.iter_mut().for_each(|w| *w *= decay);
        }
        if l == 0 && grads.sparse_first {
            let out_dim = layer.out_dim;
            for &i in &grads.touched {
                let off = i as usize * out_dim;
                axpy(-scale, &grads.weights[0][off..off + out_dim], &mut layer.weights[off..off + out_dim]);
            }
        } else {
            axpy(-scale, &grads.weights[l], &mut layer.weights);
        }
        axpy(-scale, &grads.bias[l], &mut layer.bias);
    }
}
