//! Multilayer perceptron with ReLU hidden layers, an affine output layer
//! and hand-written backpropagation.
//!
//! The forward trace keeps `h`, the activation that feeds the output layer,
//! because the influence-balanced factor is computed from it.
//!
//! Checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes  "IBLSMLP1"
//! n_sizes      u32
//! layer_sizes  n_sizes × u64          [d_in, d_1, ..., K]
//! per layer i  weights (out × in) f64, row-major
//!              bias    (out)      f64
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{argmax, stable_softmax, Matrix, SeededRng, Vector};

const CHECKPOINT_MAGIC: &[u8; 8] = b"IBLSMLP1";

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vector>,
}

/// Per-sample record of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input to each layer; `inputs[0]` is `x` and the last entry is `h`.
    pub inputs: Vec<Vector>,
    /// Affine output of each layer; the last entry holds the logits.
    pub pre_activations: Vec<Vector>,
    pub probs: Vector,
}

impl ForwardTrace {
    /// Activation fed to the output layer.
    pub fn h(&self) -> &Vector {
        self.inputs.last().expect("trace has at least one layer")
    }

    pub fn logits(&self) -> &Vector {
        self.pre_activations
            .last()
            .expect("trace has at least one layer")
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }
}

/// Gradients (or any other parameter-shaped quantity, such as SGD velocity).
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vector>,
}

impl Grads {
    pub fn zeros_like(model: &MlpParams) -> Self {
        Grads {
            weights: model
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: model
                .biases
                .iter()
                .map(|b| Vector::zeros(b.len()))
                .collect(),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Grads, scale: f64) -> Result<()> {
        self.check_congruent(other)?;
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.values_mut().for_each(|v| *v *= s);
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.data().iter().chain(b.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.data_mut().iter_mut().chain(b.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub(crate) fn check_congruent(&self, other: &Grads) -> Result<()> {
        let same = self.weights.len() == other.weights.len()
            && self
                .weights
                .iter()
                .zip(&other.weights)
                .all(|(a, b)| a.shape() == b.shape())
            && self
                .biases
                .iter()
                .zip(&other.biases)
                .all(|(a, b)| a.len() == b.len());
        if same {
            Ok(())
        } else {
            Err(Error::shape("grads", "parameter shapes differ"))
        }
    }
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::invalid(format!(
            "layer_sizes needs at least input and output sizes, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::invalid(format!(
            "layer sizes must all be >= 1, got {layer_sizes:?}"
        )));
    }
    Ok(())
}

impl MlpParams {
    /// He-normal weights (std `sqrt(2 / fan_in)`), zero biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut rng = SeededRng::new(seed);
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| std * rng.normal()).collect();
            weights.push(Matrix::from_vec(fan_out, fan_in, data)?);
            biases.push(Vector::zeros(fan_out));
        }
        Ok(MlpParams {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        Ok(MlpParams {
            layer_sizes: layer_sizes.to_vec(),
            weights: layer_sizes
                .windows(2)
                .map(|p| Matrix::zeros(p[1], p[0]))
                .collect(),
            biases: layer_sizes[1..].iter().map(|&n| Vector::zeros(n)).collect(),
        })
    }

    pub fn from_parts(
        layer_sizes: Vec<usize>,
        weights: Vec<Matrix>,
        biases: Vec<Vector>,
    ) -> Result<Self> {
        validate_sizes(&layer_sizes)?;
        let layers = layer_sizes.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::shape(
                "MlpParams::from_parts",
                format!(
                    "{layers} layers but {} weights and {} biases",
                    weights.len(),
                    biases.len()
                ),
            ));
        }
        for (i, pair) in layer_sizes.windows(2).enumerate() {
            if weights[i].shape() != (pair[1], pair[0]) || biases[i].len() != pair[1] {
                return Err(Error::shape(
                    "MlpParams::from_parts",
                    format!(
                        "layer {i}: weight {:?} and bias {} for sizes {}->{}",
                        weights[i].shape(),
                        biases[i].len(),
                        pair[0],
                        pair[1]
                    ),
                ));
            }
        }
        let model = MlpParams {
            layer_sizes,
            weights,
            biases,
        };
        if !model.is_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(model)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vector] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Vector] {
        &mut self.biases
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|p| p[0] * p[1] + p[1])
            .sum()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.data().iter().chain(b.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.data_mut().iter_mut().chain(b.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(
                "forward",
                format!(
                    "input length {} but model expects {}",
                    x.len(),
                    self.input_dim()
                ),
            ));
        }
        let n = self.num_layers();
        let mut inputs = Vec::with_capacity(n);
        let mut pre_activations = Vec::with_capacity(n);
        let mut current = Vector::new(x.to_vec());
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w.matvec(&current)?;
            for (zj, bj) in z.iter_mut().zip(b.iter()) {
                *zj += bj;
            }
            let next = if i + 1 < n {
                Vector::new(z.iter().map(|v| v.max(0.0)).collect())
            } else {
                Vector::zeros(0)
            };
            inputs.push(std::mem::replace(&mut current, next));
            pre_activations.push(z);
        }
        let probs = stable_softmax(pre_activations.last().unwrap())?;
        Ok(ForwardTrace {
            inputs,
            pre_activations,
            probs,
        })
    }

    fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        let ok = trace.inputs.len() == self.num_layers()
            && trace.pre_activations.len() == self.num_layers()
            && trace
                .inputs
                .iter()
                .zip(&self.layer_sizes)
                .all(|(v, &s)| v.len() == s)
            && trace
                .pre_activations
                .iter()
                .zip(&self.layer_sizes[1..])
                .all(|(v, &s)| v.len() == s)
            && trace.probs.len() == self.num_classes();
        if ok {
            Ok(())
        } else {
            Err(Error::shape(
                "backward",
                "trace was not produced by a model of this shape",
            ))
        }
    }

    /// Gradients of `sample_weight * CE(probs, y)`.
    pub fn backward(&self, trace: &ForwardTrace, y: usize, sample_weight: f64) -> Result<Grads> {
        self.check_trace(trace)?;
        if y >= self.num_classes() {
            return Err(Error::invalid(format!(
                "label {y} out of range for {} classes",
                self.num_classes()
            )));
        }
        if !(sample_weight >= 0.0 && sample_weight.is_finite()) {
            return Err(Error::invalid(format!(
                "sample weight must be finite and >= 0, got {sample_weight}"
            )));
        }
        let mut delta: Vec<f64> = trace.probs.iter().map(|f| sample_weight * f).collect();
        delta[y] -= sample_weight;
        self.backward_from_logits(trace, &delta)
    }

    /// Backpropagates an arbitrary gradient with respect to the logits.
    pub fn backward_from_logits(&self, trace: &ForwardTrace, dlogits: &[f64]) -> Result<Grads> {
        self.check_trace(trace)?;
        if dlogits.len() != self.num_classes() {
            return Err(Error::shape(
                "backward",
                format!(
                    "logit gradient length {} for {} classes",
                    dlogits.len(),
                    self.num_classes()
                ),
            ));
        }
        let n = self.num_layers();
        let mut gw = Vec::with_capacity(n);
        let mut gb = Vec::with_capacity(n);
        let mut delta = dlogits.to_vec();
        for layer in (0..n).rev() {
            let input = &trace.inputs[layer];
            gw.push(Matrix::outer(&delta, input));
            gb.push(Vector::new(delta.clone()));
            if layer > 0 {
                let w = &self.weights[layer];
                let pre = &trace.pre_activations[layer - 1];
                let mut prev = vec![0.0; w.cols()];
                for (r, d) in delta.iter().enumerate() {
                    for (p, wv) in prev.iter_mut().zip(w.row(r)) {
                        *p += wv * d;
                    }
                }
                for (p, z) in prev.iter_mut().zip(pre.iter()) {
                    if *z <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        gw.reverse();
        gb.reverse();
        Ok(Grads {
            weights: gw,
            biases: gb,
        })
    }

    /// Argmax of the logits, ties to the smallest class index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(self.forward(x)?.logits()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * (self.layer_sizes.len() + self.param_count()));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.layer_sizes.len() as u32).to_le_bytes());
        for &s in &self.layer_sizes {
            out.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for v in self.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::invalid(format!("checkpoint: {msg}"));
        let mut cursor = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cursor.len() < n {
                return Err(bad("unexpected end of data".into()));
            }
            let (head, tail) = cursor.split_at(n);
            cursor = tail;
            Ok(head)
        };
        if take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let n_sizes = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if n_sizes > 1024 {
            return Err(bad(format!("implausible layer count {n_sizes}")));
        }
        let mut sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            let s = u64::from_le_bytes(take(8)?.try_into().unwrap());
            sizes.push(usize::try_from(s).map_err(|_| bad(format!("layer size {s}")))?);
        }
        let mut model = MlpParams::zeros(&sizes)?;
        let expected = model.param_count();
        for v in model.values_mut() {
            *v = f64::from_le_bytes(take(8)?.try_into().unwrap());
        }
        if !cursor.is_empty() {
            return Err(bad(format!(
                "{} trailing bytes after {expected} parameters",
                cursor.len()
            )));
        }
        if !model.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        MlpParams::from_bytes(&bytes).map_err(|e| match e {
            Error::InvalidArgument(msg) => Error::Format {
                path: path.to_path_buf(),
                msg,
            },
            other => other,
        })
    }
}

/// L1 norm of the output-layer weight gradient `(f - y) hᵀ` of the
/// cross-entropy loss, assembled entry by entry. Bias gradients are excluded.
pub fn last_layer_grad_l1(trace: &ForwardTrace, y: usize) -> Result<f64> {
    let k = trace.num_classes();
    if y >= k {
        return Err(Error::invalid(format!(
            "label {y} out of range for {k} classes"
        )));
    }
    let h = trace.h();
    let mut residual = trace.probs.clone();
    residual[y] -= 1.0;
    let grad = Matrix::outer(&residual, h);
    Ok(grad.data().iter().map(|g| g.abs()).sum())
}
