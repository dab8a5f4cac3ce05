//! Minimal feed-forward engine: affine layers, ReLU/sigmoid/linear
//! activations, exact reverse-mode gradients for a fixed layer stack, He
//! initialization and the Adam optimizer. Everything is fp64 and
//! deterministic given the RNG stream.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::sigmoid;
use crate::numerics::{axpy, Mat};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },
    #[error("cache does not match the layer stack (layer {0})")]
    StaleCache(usize),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint metadata error: {0}")]
    Meta(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Relu => a.max(0.0),
            Activation::Sigmoid => sigmoid(a),
            Activation::Linear => a,
        }
    }

    /// Derivative given pre-activation `a` and post-activation `h`.
    #[inline]
    fn derivative(self, a: f64, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => h * (1.0 - h),
            Activation::Linear => 1.0,
        }
    }
}

/// One affine layer followed by its activation.
#[derive(Debug, Clone)]
pub struct LayerParams {
    /// out x in weight matrix.
    pub weights: Mat,
    pub bias: Vec<f64>,
    pub activation: Activation,
    /// Frozen layers receive no optimizer updates.
    pub trainable: bool,
}

impl LayerParams {
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.len()
    }
}

/// He initialization: weights ~ N(0, 2 / fan_in), drawn row-major; bias zero.
pub fn he_init(
    fan_in: usize,
    fan_out: usize,
    activation: Activation,
    rng: &mut ChaCha12Rng,
) -> LayerParams {
    assert!(fan_in > 0 && fan_out > 0, "layer dimensions must be positive");
    let std = (2.0 / fan_in as f64).sqrt();
    let mut weights = Mat::zeros(fan_out, fan_in);
    for o in 0..fan_out {
        for i in 0..fan_in {
            let z: f64 = rng.sample(StandardNormal);
            weights.set(o, i, z * std);
        }
    }
    LayerParams {
        weights,
        bias: vec![0.0; fan_out],
        activation,
        trainable: true,
    }
}

/// Activations recorded by [`forward`], sufficient for exact backprop.
#[derive(Debug)]
pub struct MlpCache {
    /// Input to each layer (entry 0 is the batch itself).
    inputs: Vec<Mat>,
    /// Pre-activation of each layer.
    pre: Vec<Mat>,
    /// Post-activation of each layer.
    post: Vec<Mat>,
}

impl MlpCache {
    pub fn output(&self) -> &Mat {
        self.post.last().expect("cache of an empty stack")
    }

    pub fn layer_input(&self, idx: usize) -> &Mat {
        &self.inputs[idx]
    }
}

/// Affine-then-activation for each layer in order. Returns the output batch
/// and the cache needed by [`backward`].
pub fn forward(layers: &[LayerParams], input: &Mat) -> Result<(Mat, MlpCache), NnError> {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(layers.len());
    let mut post = Vec::with_capacity(layers.len());
    let mut current = input.clone();
    for layer in layers {
        if current.cols() != layer.in_dim() {
            return Err(NnError::DimMismatch {
                expected: layer.in_dim(),
                got: current.cols(),
                context: "forward input width",
            });
        }
        let mut a = current.matmul_nt(&layer.weights);
        for i in 0..a.rows() {
            axpy(1.0, &layer.bias, a.row_mut(i));
        }
        let mut h = a.clone();
        for v in h.as_mut_slice() {
            *v = layer.activation.apply(*v);
        }
        inputs.push(current);
        pre.push(a);
        current = h.clone();
        post.push(h);
    }
    Ok((
        current,
        MlpCache { inputs, pre, post },
    ))
}

/// Gradients for one layer's parameters.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weights: Mat,
    pub bias: Vec<f64>,
}

/// Exact reverse-mode gradients for the stack that produced `cache`.
///
/// Returns per-layer parameter gradients (`None` for frozen layers, whose
/// gradients still flow upstream) and the gradient with respect to the input
/// batch.
pub fn backward(
    layers: &[LayerParams],
    cache: &MlpCache,
    grad_output: &Mat,
) -> Result<(Vec<Option<LayerGrads>>, Mat), NnError> {
    if cache.inputs.len() != layers.len() {
        return Err(NnError::StaleCache(cache.inputs.len()));
    }
    let mut grads: Vec<Option<LayerGrads>> = (0..layers.len()).map(|_| None).collect();
    let mut grad = grad_output.clone();
    for (idx, layer) in layers.iter().enumerate().rev() {
        let a = &cache.pre[idx];
        let h = &cache.post[idx];
        let x = &cache.inputs[idx];
        if grad.rows() != a.rows() || grad.cols() != a.cols() {
            return Err(NnError::StaleCache(idx));
        }
        // Through the activation.
        let mut ga = grad;
        for i in 0..ga.rows() {
            let row = ga.row_mut(i);
            for (j, g) in row.iter_mut().enumerate() {
                *g *= layer.activation.derivative(a.get(i, j), h.get(i, j));
            }
        }
        if layer.trainable {
            let gw = ga.matmul_tn(x);
            let mut gb = vec![0.0; layer.out_dim()];
            for i in 0..ga.rows() {
                axpy(1.0, ga.row(i), &mut gb);
            }
            grads[idx] = Some(LayerGrads {
                weights: gw,
                bias: gb,
            });
        }
        grad = ga.matmul(&layer.weights);
    }
    Ok((grads, grad))
}

/// Standard bias-corrected Adam, one state per parameter block.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    /// Defaults beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(param_count: usize, lr: f64) -> Self {
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    fn update(&mut self, offset: usize, params: &mut [f64], grads: &[f64], t: f64) {
        let b1c = 1.0 - self.beta1.powf(t);
        let b2c = 1.0 - self.beta2.powf(t);
        for (k, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
            let i = offset + k;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / b1c;
            let v_hat = self.v[i] / b2c;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// One Adam update of a layer's weights and bias. Frozen layers are left
/// untouched and the state does not advance.
pub fn adam_step(state: &mut AdamState, layer: &mut LayerParams, grads: &LayerGrads) {
    if !layer.trainable {
        return;
    }
    debug_assert_eq!(state.m.len(), layer.param_count());
    state.step += 1;
    let t = state.step as f64;
    let w_len = layer.weights.rows() * layer.weights.cols();
    state.update(0, layer.weights.as_mut_slice(), grads.weights.as_slice(), t);
    state.update(w_len, &mut layer.bias, &grads.bias, t);
}

/// One named parameter block of a checkpoint.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    /// "dense" for affine layers, "frozen_vec" for a constant output vector.
    pub kind: String,
    pub activation: Option<Activation>,
    pub trainable: bool,
    pub rows: usize,
    pub cols: usize,
    /// Offsets into the blob, in f64 units.
    pub weights_offset: usize,
    pub bias_offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub total_params: usize,
    pub entries: Vec<CheckpointEntry>,
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// A parameter block to write: either a dense layer or a frozen vector.
pub enum CheckpointBlock<'a> {
    Dense(&'a str, &'a LayerParams),
    FrozenVec(&'a str, &'a [f64]),
}

fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    let prefix = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    (prefix.with_extension("json"), prefix.with_extension("bin"))
}

/// Writes `<prefix>.json` (layer specs and offsets) and `<prefix>.bin`
/// (flat little-endian fp64 parameter blob).
pub fn save_checkpoint(path: &Path, blocks: &[CheckpointBlock<'_>]) -> Result<(), NnError> {
    let mut entries = Vec::with_capacity(blocks.len());
    let mut blob: Vec<f64> = Vec::new();
    for block in blocks {
        match block {
            CheckpointBlock::Dense(name, layer) => {
                let weights_offset = blob.len();
                blob.extend_from_slice(layer.weights.as_slice());
                let bias_offset = blob.len();
                blob.extend_from_slice(&layer.bias);
                entries.push(CheckpointEntry {
                    name: (*name).to_string(),
                    kind: "dense".into(),
                    activation: Some(layer.activation),
                    trainable: layer.trainable,
                    rows: layer.out_dim(),
                    cols: layer.in_dim(),
                    weights_offset,
                    bias_offset,
                });
            }
            CheckpointBlock::FrozenVec(name, values) => {
                let offset = blob.len();
                blob.extend_from_slice(values);
                entries.push(CheckpointEntry {
                    name: (*name).to_string(),
                    kind: "frozen_vec".into(),
                    activation: None,
                    trainable: false,
                    rows: values.len(),
                    cols: 0,
                    weights_offset: offset,
                    bias_offset: offset,
                });
            }
        }
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_FORMAT_VERSION,
        total_params: blob.len(),
        entries,
    };
    let (json_path, bin_path) = checkpoint_paths(path);
    std::fs::write(json_path, serde_json::to_string_pretty(&header)?)?;
    let mut file = std::fs::File::create(bin_path)?;
    let mut bytes = Vec::with_capacity(blob.len() * 8);
    for v in &blob {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&bytes)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<f64>), NnError> {
    let (json_path, bin_path) = checkpoint_paths(path);
    let header: CheckpointHeader =
        serde_json::from_str(&std::fs::read_to_string(json_path)?)?;
    let mut bytes = Vec::new();
    std::fs::File::open(bin_path)?.read_to_end(&mut bytes)?;
    if bytes.len() != header.total_params * 8 {
        return Err(NnError::Checkpoint(format!(
            "blob holds {} bytes, header expects {}",
            bytes.len(),
            header.total_params * 8
        )));
    }
    let blob: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, blob))
}

/// Reconstructs a dense layer from a checkpoint entry and blob.
pub fn layer_from_checkpoint(
    entry: &CheckpointEntry,
    blob: &[f64],
) -> Result<LayerParams, NnError> {
    if entry.kind != "dense" {
        return Err(NnError::Checkpoint(format!(
            "entry {} is not a dense layer",
            entry.name
        )));
    }
    let w_len = entry.rows * entry.cols;
    let weights = Mat::from_vec(
        blob.get(entry.weights_offset..entry.weights_offset + w_len)
            .ok_or_else(|| NnError::Checkpoint("weights out of range".into()))?
            .to_vec(),
        entry.rows,
        entry.cols,
    )
    .map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let bias = blob
        .get(entry.bias_offset..entry.bias_offset + entry.rows)
        .ok_or_else(|| NnError::Checkpoint("bias out of range".into()))?
        .to_vec();
    Ok(LayerParams {
        weights,
        bias,
        activation: entry
            .activation
            .ok_or_else(|| NnError::Checkpoint("dense entry without activation".into()))?,
        trainable: entry.trainable,
    })
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn he_init_variance_and_bias() {
        let mut rng = rng_from_seed(5);
        let layer = he_init(200, 50, Activation::Relu, &mut rng);
        let vals = layer.weights.as_slice();
        assert_eq!(vals.len(), 10_000);
        let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let var: f64 =
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        assert!(
            (var - 0.01).abs() < 0.001,
            "empirical variance {var} should be near 2/200"
        );
        assert!(layer.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn he_init_deterministic() {
        let a = he_init(10, 10, Activation::Relu, &mut rng_from_seed(1));
        let b = he_init(10, 10, Activation::Relu, &mut rng_from_seed(1));
        assert_eq!(a.weights.as_slice(), b.weights.as_slice());
    }

    #[test]
    fn forward_identity_layer() {
        let layer = LayerParams {
            weights: Mat::identity(3),
            bias: vec![0.0; 3],
            activation: Activation::Linear,
            trainable: true,
        };
        let x = Mat::from_rows(&[vec![1.0, -2.0, 0.5]]);
        let (y, _) = forward(&[layer], &x).unwrap();
        assert_eq!(y.row(0), x.row(0));
    }

    #[test]
    fn forward_activations() {
        let relu = LayerParams {
            weights: Mat::identity(2),
            bias: vec![0.0; 2],
            activation: Activation::Relu,
            trainable: true,
        };
        let (y, _) = forward(&[relu], &Mat::from_rows(&[vec![-1.0, 2.0]])).unwrap();
        assert_eq!(y.row(0), &[0.0, 2.0]);

        let sig = LayerParams {
            weights: Mat::identity(1),
            bias: vec![0.0],
            activation: Activation::Sigmoid,
            trainable: true,
        };
        let (y, _) = forward(&[sig], &Mat::from_rows(&[vec![0.0]])).unwrap();
        assert_eq!(y.get(0, 0), 0.5);
    }

    #[test]
    fn backward_linear_probe() {
        // Squared-error probe on a single linear layer: with loss sum((y-t)^2),
        // dL/dW = 2 (y - t)^T x.
        let layer = LayerParams {
            weights: Mat::from_rows(&[vec![0.5, -1.0]]),
            bias: vec![0.25],
            activation: Activation::Linear,
            trainable: true,
        };
        let x = Mat::from_rows(&[vec![2.0, 1.0]]);
        let (y, cache) = forward(std::slice::from_ref(&layer), &x).unwrap();
        let target = 1.5;
        let err = y.get(0, 0) - target;
        let grad_out = Mat::from_rows(&[vec![2.0 * err]]);
        let (grads, _) = backward(std::slice::from_ref(&layer), &cache, &grad_out).unwrap();
        let g = grads[0].as_ref().unwrap();
        assert!((g.weights.get(0, 0) - 2.0 * err * 2.0).abs() < 1e-14);
        assert!((g.weights.get(0, 1) - 2.0 * err * 1.0).abs() < 1e-14);
        assert!((g.bias[0] - 2.0 * err).abs() < 1e-14);
    }

    #[test]
    fn backward_zero_grad_in_zero_out() {
        let mut rng = rng_from_seed(9);
        let layers = vec![
            he_init(4, 6, Activation::Relu, &mut rng),
            he_init(6, 3, Activation::Sigmoid, &mut rng),
        ];
        let x = Mat::from_rows(&[vec![0.1, -0.2, 0.3, 0.4], vec![1.0, 0.0, -1.0, 0.5]]);
        let (_, cache) = forward(&layers, &x).unwrap();
        let (grads, gx) = backward(&layers, &cache, &Mat::zeros(2, 3)).unwrap();
        for g in grads.iter().flatten() {
            assert_eq!(g.weights.max_abs(), 0.0);
            assert!(g.bias.iter().all(|&b| b == 0.0));
        }
        assert_eq!(gx.max_abs(), 0.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rng_from_seed(17);
        let mut layers = vec![
            he_init(3, 5, Activation::Relu, &mut rng),
            he_init(5, 2, Activation::Sigmoid, &mut rng),
        ];
        let x = Mat::from_rows(&[vec![0.4, -1.2, 0.7], vec![-0.3, 0.8, 0.1]]);
        let target = Mat::from_rows(&[vec![0.3, 0.9], vec![0.6, 0.2]]);
        let loss = |layers: &[LayerParams]| -> f64 {
            let (y, _) = forward(layers, &x).unwrap();
            let mut acc = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    let e = y.get(i, j) - target.get(i, j);
                    acc += e * e;
                }
            }
            acc
        };
        let (y, cache) = forward(&layers, &x).unwrap();
        let mut grad_out = Mat::zeros(2, 2);
        for i in 0..2 {
            for j in 0..2 {
                grad_out.set(i, j, 2.0 * (y.get(i, j) - target.get(i, j)));
            }
        }
        let (grads, _) = backward(&layers, &cache, &grad_out).unwrap();
        let h = 1e-6;
        for li in 0..layers.len() {
            let g = grads[li].as_ref().unwrap().clone();
            for r in 0..layers[li].out_dim() {
                for c in 0..layers[li].in_dim() {
                    let orig = layers[li].weights.get(r, c);
                    layers[li].weights.set(r, c, orig + h);
                    let up = loss(&layers);
                    layers[li].weights.set(r, c, orig - h);
                    let down = loss(&layers);
                    layers[li].weights.set(r, c, orig);
                    let fd = (up - down) / (2.0 * h);
                    let an = g.weights.get(r, c);
                    assert!(
                        (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3) < 1e-4,
                        "layer {li} weight ({r},{c}): fd {fd} vs analytic {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut layer = LayerParams {
            weights: Mat::from_rows(&[vec![1.0, -1.0]]),
            bias: vec![0.5],
            activation: Activation::Linear,
            trainable: true,
        };
        let mut state = AdamState::new(layer.param_count(), 1e-3);
        let grads = LayerGrads {
            weights: Mat::from_rows(&[vec![0.7, -0.3]]),
            bias: vec![0.0],
        };
        adam_step(&mut state, &mut layer, &grads);
        assert!((layer.weights.get(0, 0) - (1.0 - 1e-3)).abs() < 1e-8);
        assert!((layer.weights.get(0, 1) - (-1.0 + 1e-3)).abs() < 1e-8);
        assert_eq!(layer.bias[0], 0.5, "zero gradient leaves the bias alone");
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_zero_gradients_never_move() {
        let mut rng = rng_from_seed(2);
        let mut layer = he_init(4, 4, Activation::Linear, &mut rng);
        let snapshot = layer.weights.as_slice().to_vec();
        let mut state = AdamState::new(layer.param_count(), 0.1);
        let grads = LayerGrads {
            weights: Mat::zeros(4, 4),
            bias: vec![0.0; 4],
        };
        for _ in 0..50 {
            adam_step(&mut state, &mut layer, &grads);
        }
        assert_eq!(layer.weights.as_slice(), &snapshot[..]);
    }

    #[test]
    fn adam_deterministic() {
        let build = || {
            let mut layer = LayerParams {
                weights: Mat::from_rows(&[vec![0.3, 0.2]]),
                bias: vec![0.1],
                activation: Activation::Linear,
                trainable: true,
            };
            let mut state = AdamState::new(layer.param_count(), 1e-2);
            let grads = LayerGrads {
                weights: Mat::from_rows(&[vec![0.5, -0.25]]),
                bias: vec![1.0],
            };
            for _ in 0..10 {
                adam_step(&mut state, &mut layer, &grads);
            }
            (layer.weights.as_slice().to_vec(), layer.bias.clone())
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn frozen_layer_untouched() {
        let mut layer = LayerParams {
            weights: Mat::from_rows(&[vec![1.0, 2.0]]),
            bias: vec![3.0],
            activation: Activation::Linear,
            trainable: false,
        };
        let mut state = AdamState::new(layer.param_count(), 0.5);
        let grads = LayerGrads {
            weights: Mat::from_rows(&[vec![10.0, 10.0]]),
            bias: vec![10.0],
        };
        for _ in 0..5 {
            adam_step(&mut state, &mut layer, &grads);
        }
        assert_eq!(layer.weights.as_slice(), &[1.0, 2.0]);
        assert_eq!(layer.bias, vec![3.0]);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn frozen_layer_passes_gradient_upstream() {
        let frozen = LayerParams {
            weights: Mat::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]),
            bias: vec![0.0; 2],
            activation: Activation::Linear,
            trainable: false,
        };
        let x = Mat::from_rows(&[vec![1.0, 1.0]]);
        let (_, cache) = forward(std::slice::from_ref(&frozen), &x).unwrap();
        let (grads, gx) =
            backward(std::slice::from_ref(&frozen), &cache, &Mat::from_rows(&[vec![1.0, 1.0]]))
                .unwrap();
        assert!(grads[0].is_none());
        assert_eq!(gx.row(0), &[2.0, 3.0]);
    }

    #[test]
    fn forward_bitwise_deterministic() {
        let mut rng = rng_from_seed(21);
        let layers = vec![
            he_init(5, 9, Activation::Relu, &mut rng),
            he_init(9, 4, Activation::Sigmoid, &mut rng),
        ];
        let x = Mat::from_rows(&[vec![0.3, -0.8, 1.2, 0.0, -0.1]]);
        let (a, _) = forward(&layers, &x).unwrap();
        let (b, _) = forward(&layers, &x).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rng_from_seed(33);
        let dense = he_init(3, 4, Activation::Sigmoid, &mut rng);
        let frozen = vec![-0.1, -0.2];
        let path = dir.path().join("model");
        save_checkpoint(
            &path,
            &[
                CheckpointBlock::Dense("decoder.out", &dense),
                CheckpointBlock::FrozenVec("log_var", &frozen),
            ],
        )
        .unwrap();
        let (header, blob) = load_checkpoint(&path).unwrap();
        assert_eq!(header.format_version, CHECKPOINT_FORMAT_VERSION);
        assert_eq!(header.entries.len(), 2);
        let back = layer_from_checkpoint(&header.entries[0], &blob).unwrap();
        assert_eq!(back.weights.as_slice(), dense.weights.as_slice());
        assert_eq!(back.bias, dense.bias);
        assert_eq!(back.activation, Activation::Sigmoid);
        let e = &header.entries[1];
        assert_eq!(&blob[e.weights_offset..e.weights_offset + e.rows], &frozen[..]);
    }
}
