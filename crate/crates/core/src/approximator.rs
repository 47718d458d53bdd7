//! Small dense networks with exact reverse-mode gradients.
//!
//! A [`DenseNet`] is a stack of affine layers, each followed by an
//! elementwise nonlinearity. It backs the policy, every value head and the
//! Wasserstein critic. Batched passes go through `ndarray` matrix products;
//! the single-sample entry points are thin wrappers over them.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApproxError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("non-finite value in layer {layer}")]
    NonFinite { layer: usize },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
            Activation::Identity => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }

    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Identity => {}
        }
    }

    /// Multiplies `grad` by the derivative, expressed through the layer output.
    fn backprop(self, output: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Tanh => grad.zip_mut_with(output, |g, &a| *g *= 1.0 - a * a),
            Activation::Relu => grad.zip_mut_with(output, |g, &a| {
                if a <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Identity => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`, row-major.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
}

/// Per-layer inputs and outputs kept from a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    outputs: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().expect("network has at least one layer")
    }
}

/// Parameter gradients, shape-congruent with the owning [`DenseNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Gradients {
            weights: net.layers.iter().map(|l| Array2::zeros(l.weight.raw_dim())).collect(),
            biases: net.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for w in &mut self.weights {
            w.mapv_inplace(|v| v * k);
        }
        for b in &mut self.biases {
            b.mapv_inplace(|v| v * k);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.flat().iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Same ordering as [`DenseNet::params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }
}

/// Checkpoint header.
const MAGIC: &[u8; 6] = b"SIPONN";
const CHECKPOINT_VERSION: u16 = 1;

impl DenseNet {
    /// Zero-initialized network. `activations` has one entry per layer,
    /// i.e. `layer_sizes.len() - 1` entries.
    pub fn zeros(layer_sizes: &[usize], activations: &[Activation]) -> Result<Self, ApproxError> {
        if layer_sizes.len() < 2 {
            return Err(ApproxError::Architecture("need at least input and output width".into()));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(ApproxError::Architecture("layer widths must be positive".into()));
        }
        if activations.len() != layer_sizes.len() - 1 {
            return Err(ApproxError::Architecture(format!(
                "{} activations for {} layers",
                activations.len(),
                layer_sizes.len() - 1
            )));
        }
        let layers = layer_sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| Layer {
                weight: Array2::zeros((w[1], w[0])),
                bias: Array1::zeros(w[1]),
                activation,
            })
            .collect();
        Ok(DenseNet { layers })
    }

    /// `hidden` tanh layers followed by a linear output layer, with orthogonal
    /// weights (gain `hidden_gain` on hidden layers, `output_gain` on the last)
    /// and zero biases.
    pub fn mlp<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        output: usize,
        hidden_gain: f64,
        output_gain: f64,
        rng: &mut R,
    ) -> Result<Self, ApproxError> {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        let mut acts = vec![Activation::Tanh; hidden.len()];
        acts.push(Activation::Identity);
        let mut net = DenseNet::zeros(&sizes, &acts)?;
        let n = net.layers.len();
        for (k, layer) in net.layers.iter_mut().enumerate() {
            let gain = if k + 1 == n { output_gain } else { hidden_gain };
            layer.weight = orthogonal(layer.output_dim(), layer.input_dim(), gain, rng);
        }
        Ok(net)
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self, ApproxError> {
        if layers.is_empty() {
            return Err(ApproxError::Architecture("no layers".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(ApproxError::Architecture(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].output_dim(),
                    k + 1,
                    pair[1].input_dim()
                )));
            }
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(ApproxError::Architecture(format!("layer {k} bias width")));
            }
        }
        Ok(DenseNet { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(Layer::output_dim));
        sizes
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

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, ApproxError> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("1×n view");
        let (out, _) = self.forward_batch(x)?;
        Ok(out.into_raw_vec_and_offset().0)
    }

    /// Rows of `x` are samples.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache), ApproxError> {
        if x.ncols() != self.input_dim() {
            return Err(ApproxError::Shape { expected: self.input_dim(), got: x.ncols() });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut current = x.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = current.dot(&layer.weight.t());
            z += &layer.bias;
            layer.activation.apply(&mut z);
            if z.iter().any(|v| !v.is_finite()) {
                return Err(ApproxError::NonFinite { layer: k });
            }
            inputs.push(current);
            current = z;
            outputs.push(current.clone());
        }
        Ok((current, ForwardCache { inputs, outputs }))
    }

    /// Gradients of `Σ upstream ⊙ output` with respect to every parameter.
    pub fn backward_batch(&self, cache: &ForwardCache, upstream: ArrayView2<f64>) -> Result<Gradients, ApproxError> {
        let out = cache.output();
        if upstream.dim() != out.dim() {
            return Err(ApproxError::Shape { expected: out.ncols(), got: upstream.ncols() });
        }
        let n = self.layers.len();
        let mut weights = vec![Array2::zeros((0, 0)); n];
        let mut biases = vec![Array1::zeros(0); n];
        let mut grad = upstream.to_owned();
        for k in (0..n).rev() {
            let layer = &self.layers[k];
            layer.activation.backprop(&cache.outputs[k], &mut grad);
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(ApproxError::NonFinite { layer: k });
            }
            weights[k] = grad.t().dot(&cache.inputs[k]);
            biases[k] = grad.sum_axis(Axis(0));
            if k > 0 {
                grad = grad.dot(&layer.weight);
            }
        }
        Ok(Gradients { weights, biases })
    }

    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<Gradients, ApproxError> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("1×n view");
        let (_, cache) = self.forward_batch(x)?;
        if upstream.len() != self.output_dim() {
            return Err(ApproxError::Shape { expected: self.output_dim(), got: upstream.len() });
        }
        let up = ArrayView2::from_shape((1, upstream.len()), upstream).expect("1×n view");
        self.backward_batch(&cache, up)
    }

    /// `θ ← θ + step · g`.
    pub fn add_scaled(&mut self, grads: &Gradients, step: f64) {
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(grads.weights.iter().zip(&grads.biases)) {
            layer.weight.scaled_add(step, gw);
            layer.bias.scaled_add(step, gb);
        }
    }

    pub fn clip_params(&mut self, lo: f64, hi: f64) {
        for layer in &mut self.layers {
            layer.weight.mapv_inplace(|v| v.clamp(lo, hi));
            layer.bias.mapv_inplace(|v| v.clamp(lo, hi));
        }
    }

    pub fn max_abs_param(&self) -> f64 {
        self.params().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn params_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite()))
    }

    /// Layer by layer: weights row-major, then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<(), ApproxError> {
        if values.len() != self.num_params() {
            return Err(ApproxError::Shape { expected: self.num_params(), got: values.len() });
        }
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|v| *v = it.next().unwrap());
            l.bias.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), ApproxError> {
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            w.write_all(&(l.input_dim() as u32).to_le_bytes())?;
            w.write_all(&(l.output_dim() as u32).to_le_bytes())?;
            w.write_all(&[l.activation.tag()])?;
        }
        for v in self.params() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, ApproxError> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ApproxError::Checkpoint("bad magic".into()));
        }
        let version = u16::from_le_bytes(read_array(&mut r)?);
        if version != CHECKPOINT_VERSION {
            return Err(ApproxError::Checkpoint(format!("unsupported version {version}")));
        }
        let n = u32::from_le_bytes(read_array(&mut r)?) as usize;
        if n == 0 || n > 1024 {
            return Err(ApproxError::Checkpoint(format!("implausible layer count {n}")));
        }
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let input = u32::from_le_bytes(read_array(&mut r)?) as usize;
            let output = u32::from_le_bytes(read_array(&mut r)?) as usize;
            let [tag] = read_array::<1, _>(&mut r)?;
            let activation = Activation::from_tag(tag)
                .ok_or_else(|| ApproxError::Checkpoint(format!("unknown activation tag {tag}")))?;
            layers.push(Layer { weight: Array2::zeros((output, input)), bias: Array1::zeros(output), activation });
        }
        let mut net = DenseNet::from_layers(layers)?;
        let mut values = Vec::with_capacity(net.num_params());
        for _ in 0..net.num_params() {
            values.push(f64::from_le_bytes(read_array(&mut r)?));
        }
        net.set_params(&values)?;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], ApproxError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Random `rows × cols` matrix with orthonormal rows or columns (whichever
/// is the smaller set), scaled by `gain`.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Array2<f64> {
    let (tall, short) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // Columns of `q` get orthonormalized by modified Gram-Schmidt.
    let mut q = Array2::<f64>::zeros((tall, short));
    q.mapv_inplace(|_| StandardNormal.sample(rng));
    for j in 0..short {
        for i in 0..j {
            let dot = q.column(i).dot(&q.column(j));
            let qi = q.column(i).to_owned();
            q.column_mut(j).scaled_add(-dot, &qi);
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        if norm > 1e-12 {
            q.column_mut(j).mapv_inplace(|v| v / norm);
        }
    }
    let m = if rows >= cols { q } else { q.reversed_axes() };
    m.mapv(|v| v * gain)
}

/// Adam on a single network; minimizes, i.e. steps against the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Gradients,
    v: Gradients,
    t: i32,
}

impl Adam {
    pub fn new(net: &DenseNet, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
            t: 0,
        }
    }

    pub fn step(&mut self, net: &mut DenseNet, grads: &Gradients) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = self.lr;
        let eps = self.eps;
        for k in 0..net.layers.len() {
            let layer = &mut net.layers[k];
            ndarray::Zip::from(&mut layer.weight)
                .and(&mut self.m.weights[k])
                .and(&mut self.v.weights[k])
                .and(&grads.weights[k])
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
            ndarray::Zip::from(&mut layer.bias)
                .and(&mut self.m.biases[k])
                .and(&mut self.v.biases[k])
                .and(&grads.biases[k])
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Distribution over a finite action set, parameterized by logits.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalHead {
    pub logits: Vec<f64>,
}

impl CategoricalHead {
    pub fn new(logits: Vec<f64>) -> Self {
        CategoricalHead { logits }
    }

    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    pub fn log_prob(&self, action: usize) -> f64 {
        log_softmax(&self.logits)[action]
    }

    pub fn entropy(&self) -> f64 {
        log_softmax(&self.logits).iter().map(|&lp| if lp.is_finite() { -lp.exp() * lp } else { 0.0 }).sum()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &l) in self.logits.iter().enumerate() {
            if l > self.logits[best] {
                best = i;
            }
        }
        best
    }

    /// Inverse-CDF sampling; returns the action and its log-probability.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(usize, f64), ApproxError> {
        if self.logits.iter().any(|l| !l.is_finite()) {
            return Err(ApproxError::NonFinite { layer: usize::MAX });
        }
        let logp = log_softmax(&self.logits);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = logp.len() - 1;
        for (i, lp) in logp.iter().enumerate() {
            acc += lp.exp();
            if u < acc {
                chosen = i;
                break;
            }
        }
        Ok((chosen, logp[chosen]))
    }
}

/// Diagonal Gaussian with a state-independent log standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

const LOG_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

impl GaussianHead {
    pub fn log_prob(&self, action: &[f64]) -> f64 {
        action
            .iter()
            .zip(self.mean.iter().zip(&self.log_std))
            .map(|(&a, (&m, &ls))| {
                let z = (a - m) / ls.exp();
                -0.5 * z * z - ls - LOG_SQRT_2PI
            })
            .sum()
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|ls| ls + 0.5 + LOG_SQRT_2PI).sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, f64) {
        let action: Vec<f64> = self
            .mean
            .iter()
            .zip(&self.log_std)
            .map(|(&m, &ls)| {
                let eps: f64 = StandardNormal.sample(rng);
                m + ls.exp() * eps
            })
            .collect();
        let lp = self.log_prob(&action);
        (action, lp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_net(sizes: &[usize], seed: u64) -> DenseNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net =
            DenseNet::mlp(sizes[0], &sizes[1..sizes.len() - 1], sizes[sizes.len() - 1], 1.0, 1.0, &mut rng).unwrap();
        // non-zero biases so they take part in the checks
        let p: Vec<f64> = net.params().iter().map(|v| v + 0.1 * rng.random::<f64>()).collect();
        net.set_params(&p).unwrap();
        net
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = Layer { weight: Array2::eye(3), bias: Array1::zeros(3), activation: Activation::Identity };
        let net = DenseNet::from_layers(vec![layer]).unwrap();
        assert_eq!(net.forward(&[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = DenseNet::zeros(&[3, 5, 2], &[Activation::Tanh, Activation::Identity]).unwrap();
        assert_eq!(net.forward(&[3.0, -1.0, 7.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn forward_matches_hand_matrix_product() {
        let net = random_net(&[2, 3, 2], 7);
        let x = [0.5, -0.3];
        // plain loops, no ndarray
        let l0 = &net.layers()[0];
        let mut h = [0.0; 3];
        for i in 0..3 {
            let mut z = l0.bias[i];
            for j in 0..2 {
                z += l0.weight[[i, j]] * x[j];
            }
            h[i] = z.tanh();
        }
        let l1 = &net.layers()[1];
        let mut y = [0.0; 2];
        for i in 0..2 {
            y[i] = l1.bias[i] + (0..3).map(|j| l1.weight[[i, j]] * h[j]).sum::<f64>();
        }
        let out = net.forward(&x).unwrap();
        for i in 0..2 {
            assert!((out[i] - y[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = DenseNet::zeros(&[3, 2], &[Activation::Identity]).unwrap();
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(ApproxError::Shape { expected: 3, got: 2 })));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = random_net(&[4, 8, 3], 1);
        let g = net.backward(&[0.1, 0.2, 0.3, 0.4], &[0.0, 0.0, 0.0]).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_linear_gradient() {
        let layer =
            Layer { weight: Array2::from_elem((1, 1), 3.0), bias: Array1::zeros(1), activation: Activation::Identity };
        let net = DenseNet::from_layers(vec![layer]).unwrap();
        let g = net.backward(&[2.0], &[1.0]).unwrap();
        assert_eq!(g.weights[0][[0, 0]], 2.0);
        assert_eq!(g.biases[0][0], 1.0);
    }

    #[test]
    fn non_finite_intermediate_names_layer() {
        let mut net = random_net(&[2, 3, 1], 3);
        net.layers_mut()[1].weight[[0, 0]] = f64::NAN;
        let err = net.backward(&[1.0, 1.0], &[1.0]).unwrap_err();
        assert!(matches!(err, ApproxError::NonFinite { layer: 1 }));
    }

    #[test]
    fn mismatched_layers_rejected() {
        let a = Layer { weight: Array2::zeros((3, 2)), bias: Array1::zeros(3), activation: Activation::Tanh };
        let b = Layer { weight: Array2::zeros((1, 4)), bias: Array1::zeros(1), activation: Activation::Identity };
        assert!(DenseNet::from_layers(vec![a, b]).is_err());
    }

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = orthogonal(4, 9, 1.0, &mut rng);
        let gram = w.dot(&w.t());
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = random_net(&[5, 7, 7, 2], 5);
        let bytes = net.to_bytes();
        let back = DenseNet::read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(net, back);
        let a: Vec<u64> = net.params().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.params().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let mut bytes = random_net(&[2, 2], 1).to_bytes();
        bytes[0] = b'X';
        assert!(DenseNet::read_checkpoint(&bytes[..]).is_err());
    }

    #[test]
    fn uniform_logits_are_uniform() {
        let head = CategoricalHead::new(vec![0.3; 4]);
        for p in head.probs() {
            assert!((p - 0.25).abs() < 1e-15);
        }
        assert!((head.entropy() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dominant_logit_always_sampled() {
        let head = CategoricalHead::new(vec![1e9, 0.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let (a, lp) = head.sample(&mut rng).unwrap();
            assert_eq!(a, 0);
            assert!(lp.abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_logits_rejected() {
        let head = CategoricalHead::new(vec![f64::NAN, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(head.sample(&mut rng).is_err());
    }

    #[test]
    fn sampled_log_prob_is_log_softmax() {
        let head = CategoricalHead::new(vec![0.2, -1.0, 2.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lsm = log_softmax(&head.logits);
        for _ in 0..50 {
            let (a, lp) = head.sample(&mut rng).unwrap();
            assert_eq!(lp, lsm[a]);
        }
    }

    #[test]
    fn gaussian_log_prob_matches_density() {
        let head = GaussianHead { mean: vec![0.5, -1.0], log_std: vec![0.0, 0.3f64.ln()] };
        let a = [0.1, -0.8];
        let dens: f64 = [(0.1 - 0.5, 1.0), (-0.8 + 1.0, 0.3)]
            .iter()
            .map(|&(d, s): &(f64, f64)| (-(d * d) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt()))
            .product();
        assert!((head.log_prob(&a) - dens.ln()).abs() < 1e-12);
    }
}
