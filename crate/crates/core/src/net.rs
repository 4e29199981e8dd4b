//! Minimal dense networks with explicit forward/backward passes, the
//! classification/regression losses used across the workspace, SGD with
//! momentum, and EMA parameter averaging.
//!
//! Hidden layers use ReLU, the output layer is linear. Batched training is
//! accumulation over per-sample passes; there is no batch-matrix
//! abstraction.

use crate::rng::SimRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("non-finite gradient encountered during optimizer step")]
    NonFiniteGradient,
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

/// One affine layer, weights stored row-major as `[out][in]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        assert_eq!(x.len(), self.in_dim, "layer input dimension mismatch");
        out.clear();
        out.reserve(self.out_dim);
        for o in 0..self.out_dim {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            out.push(acc);
        }
    }
}

/// Fully connected network: affine + ReLU chain with a linear output layer.
#[derive(Debug, Clone)]
pub struct DenseNet {
    layers: Vec<Layer>,
}

/// Pre-activations recorded by `forward`, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
}

/// Per-layer parameter gradients with the same shapes as the network.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub d_weight: Vec<Vec<f64>>,
    pub d_bias: Vec<Vec<f64>>,
}

impl NetGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            d_weight: net.layers.iter().map(|l| vec![0.0; l.weight.len()]).collect(),
            d_bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &NetGrads, scale: f64) {
        for (a, b) in self.d_weight.iter_mut().zip(&other.d_weight) {
            assert_eq!(a.len(), b.len(), "gradient shape mismatch");
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
        for (a, b) in self.d_bias.iter_mut().zip(&other.d_bias) {
            assert_eq!(a.len(), b.len(), "gradient shape mismatch");
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in self.d_weight.iter_mut().chain(self.d_bias.iter_mut()) {
            for x in a.iter_mut() {
                *x *= factor;
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    layer_sizes: Vec<usize>,
    layers: Vec<Layer>,
}

const CHECKPOINT_FORMAT: &str = "dense-net";
const CHECKPOINT_VERSION: u32 = 1;

impl DenseNet {
    /// He-initialized network: weights ~ N(0, 2 / fan_in), biases zero.
    pub fn init(layer_sizes: &[usize], rng: &mut SimRng) -> Self {
        assert!(layer_sizes.len() >= 2, "need at least input and output sizes");
        let mut layers = Vec::with_capacity(layer_sizes.len() - 1);
        for win in layer_sizes.windows(2) {
            let (in_dim, out_dim) = (win[0], win[1]);
            let std = (2.0 / in_dim as f64).sqrt();
            let weight = (0..in_dim * out_dim).map(|_| std * rng.normal()).collect();
            layers.push(Layer {
                in_dim,
                out_dim,
                weight,
                bias: vec![0.0; out_dim],
            });
        }
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Self {
        assert!(!layers.is_empty());
        for win in layers.windows(2) {
            assert_eq!(win[0].out_dim, win[1].in_dim, "layer dimensions must chain");
        }
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable parameter access; callers must keep layer shapes chained.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Scales the output layer's weights. Regression-style heads start
    /// near zero so their initial prediction is neutral instead of a
    /// large random offset.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let last = self.layers.last_mut().unwrap();
        for w in &mut last.weight {
            *w *= factor;
        }
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].in_dim];
        sizes.extend(self.layers.iter().map(|l| l.out_dim));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Forward pass returning the output and the cache for `backward`.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, ForwardCache) {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = x.to_vec();
        let mut z = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            layer.apply(&act, &mut z);
            pre.push(z.clone());
            if idx + 1 < self.layers.len() {
                act.clear();
                act.extend(z.iter().map(|&v| v.max(0.0)));
            }
        }
        let out = pre.last().unwrap().clone();
        (
            out,
            ForwardCache {
                input: x.to_vec(),
                pre,
            },
        )
    }

    /// Inference-only forward pass.
    pub fn infer(&self, x: &[f64]) -> Vec<f64> {
        let mut act = x.to_vec();
        let mut z = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            layer.apply(&act, &mut z);
            if idx + 1 < self.layers.len() {
                act.clear();
                act.extend(z.iter().map(|&v| v.max(0.0)));
            } else {
                act = z.clone();
            }
        }
        act
    }

    /// Reverse-mode gradients for the affine/ReLU chain. `dy` is the loss
    /// gradient at the (linear) output; returns parameter gradients and
    /// the gradient with respect to the input.
    pub fn backward(&self, cache: &ForwardCache, dy: &[f64]) -> (NetGrads, Vec<f64>) {
        let n = self.layers.len();
        assert_eq!(dy.len(), self.output_dim(), "dy dimension mismatch");
        assert_eq!(cache.pre.len(), n, "cache does not match network");
        let mut grads = NetGrads::zeros_like(self);
        let mut dz = dy.to_vec();
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            // Activation of the previous layer (or the input for l == 0).
            let below: Vec<f64> = if l == 0 {
                cache.input.clone()
            } else {
                cache.pre[l - 1].iter().map(|&v| v.max(0.0)).collect()
            };
            assert_eq!(below.len(), layer.in_dim, "cached activation mismatch");
            for o in 0..layer.out_dim {
                grads.d_bias[l][o] = dz[o];
                let row = &mut grads.d_weight[l][o * layer.in_dim..(o + 1) * layer.in_dim];
                for (i, v) in below.iter().enumerate() {
                    row[i] = dz[o] * v;
                }
            }
            // Propagate to the layer below through W^T and the ReLU mask.
            let mut dx = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let row = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (i, w) in row.iter().enumerate() {
                    dx[i] += dz[o] * w;
                }
            }
            if l > 0 {
                for (i, v) in dx.iter_mut().enumerate() {
                    if cache.pre[l - 1][i] <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            dz = dx;
        }
        (grads, dz)
    }

    pub fn to_json(&self) -> String {
        let doc = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            layer_sizes: self.layer_sizes(),
            layers: self.layers.clone(),
        };
        serde_json::to_string(&doc).expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, NetError> {
        let doc: Checkpoint =
            serde_json::from_str(text).map_err(|e| NetError::BadCheckpoint(e.to_string()))?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(NetError::BadCheckpoint(format!(
                "unknown format {:?}",
                doc.format
            )));
        }
        if doc.version != CHECKPOINT_VERSION {
            return Err(NetError::BadCheckpoint(format!(
                "unsupported version {}",
                doc.version
            )));
        }
        let mut sizes = Vec::new();
        for (i, l) in doc.layers.iter().enumerate() {
            if l.weight.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(NetError::BadCheckpoint(format!("layer {i} shape mismatch")));
            }
            if sizes.is_empty() {
                sizes.push(l.in_dim);
            } else if *sizes.last().unwrap() != l.in_dim {
                return Err(NetError::BadCheckpoint(format!("layer {i} does not chain")));
            }
            sizes.push(l.out_dim);
        }
        if sizes != doc.layer_sizes {
            return Err(NetError::BadCheckpoint("layer_sizes header disagrees".into()));
        }
        Ok(Self { layers: doc.layers })
    }
}

/// Numerically stabilized softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of softmax(logits) against `target`; returns the loss and
/// its gradient `softmax - onehot` with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    assert!(target < logits.len(), "target class out of range");
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|&v| v - max).collect();
    let log_sum = shifted.iter().map(|v| v.exp()).sum::<f64>().ln();
    let loss = log_sum - shifted[target];
    let mut grad = softmax(logits);
    grad[target] -= 1.0;
    (loss, grad)
}

/// Element-wise Huber loss summed over components; `beta = 0` is pure L1.
/// Returns the loss and its gradient with respect to `pred`.
pub fn smooth_l1(pred: &[f64], target: &[f64], beta: f64) -> (f64, Vec<f64>) {
    assert_eq!(pred.len(), target.len(), "smooth_l1 length mismatch");
    assert!(beta >= 0.0);
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for k in 0..pred.len() {
        let e = pred[k] - target[k];
        if beta > 0.0 && e.abs() < beta {
            loss += 0.5 * e * e / beta;
            grad[k] = e / beta;
        } else {
            loss += e.abs() - 0.5 * beta;
            grad[k] = if e > 0.0 {
                1.0
            } else if e < 0.0 {
                -1.0
            } else {
                0.0
            };
        }
    }
    (loss, grad)
}

/// SGD-with-momentum state; buffers mirror the parameter shapes.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: NetGrads,
}

impl OptimState {
    pub fn new(net: &DenseNet, learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: NetGrads::zeros_like(net),
        }
    }
}

/// One optimizer step: `v <- mu*v + g + wd*p; p <- p - lr*v`.
pub fn sgd_step(net: &mut DenseNet, grads: &NetGrads, state: &mut OptimState) -> Result<(), NetError> {
    for (l, layer) in net.layers.iter_mut().enumerate() {
        let gw = &grads.d_weight[l];
        let gb = &grads.d_bias[l];
        assert_eq!(gw.len(), layer.weight.len(), "gradient shape mismatch");
        assert_eq!(gb.len(), layer.bias.len(), "gradient shape mismatch");
        if gw.iter().chain(gb.iter()).any(|g| !g.is_finite()) {
            return Err(NetError::NonFiniteGradient);
        }
        let vw = &mut state.velocity.d_weight[l];
        for (k, p) in layer.weight.iter_mut().enumerate() {
            vw[k] = state.momentum * vw[k] + gw[k] + state.weight_decay * *p;
            *p -= state.learning_rate * vw[k];
        }
        let vb = &mut state.velocity.d_bias[l];
        for (k, p) in layer.bias.iter_mut().enumerate() {
            vb[k] = state.momentum * vb[k] + gb[k] + state.weight_decay * *p;
            *p -= state.learning_rate * vb[k];
        }
    }
    Ok(())
}

/// `teacher <- m*teacher + (1 - m)*student`, element-wise. Shapes must
/// match exactly.
pub fn ema_update(teacher: &mut DenseNet, student: &DenseNet, momentum: f64) {
    assert!((0.0..=1.0).contains(&momentum));
    assert_eq!(
        teacher.layer_sizes(),
        student.layer_sizes(),
        "EMA shape mismatch"
    );
    for (t, s) in teacher.layers.iter_mut().zip(&student.layers) {
        for (p, q) in t.weight.iter_mut().zip(&s.weight) {
            *p = momentum * *p + (1.0 - momentum) * q;
        }
        for (p, q) in t.bias.iter_mut().zip(&s.bias) {
            *p = momentum * *p + (1.0 - momentum) * q;
        }
    }
}

/// A student network and its EMA teacher copy.
#[derive(Debug, Clone)]
pub struct EmaPair {
    pub student: DenseNet,
    pub teacher: DenseNet,
    pub momentum: f64,
}

impl EmaPair {
    /// The teacher starts as an exact copy of the student.
    pub fn new(student: DenseNet, momentum: f64) -> Self {
        let teacher = student.clone();
        Self {
            student,
            teacher,
            momentum,
        }
    }

    pub fn update_teacher(&mut self) {
        ema_update(&mut self.teacher, &self.student, self.momentum);
    }
}
