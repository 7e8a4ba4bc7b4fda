//! Per-node correction network: a tanh multilayer perceptron with
//! hand-written reverse mode.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature layout of one fine node: `[x, y, u_up, alpha]`.
pub const FEATURE_WIDTH: usize = 4;
pub const UP_COLUMN: usize = 2;

pub const DEFAULT_LAYER_DIMS: [usize; 4] = [FEATURE_WIDTH, 32, 32, 1];

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layer_dims: Vec<usize>,
    /// `weights[l]` has shape `(layer_dims[l + 1], layer_dims[l])`.
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub seed: u64,
}

impl MlpParams {
    /// Zero-valued parameters with the given layout.
    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        check_dims(layer_dims)?;
        let weights = layer_dims.windows(2).map(|w| Array2::zeros((w[1], w[0]))).collect();
        let biases = layer_dims[1..].iter().map(|&n| Array1::zeros(n)).collect();
        Ok(Self { layer_dims: layer_dims.to_vec(), weights, biases, seed: 0 })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(&self.layer_dims).expect("dims already validated");
        z.seed = self.seed;
        z
    }

    pub fn input_width(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Flattened parameters: per layer, weights row-major then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::input(format!(
                "expected {} network parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut pos = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for x in w.iter_mut() {
                *x = flat[pos];
                pos += 1;
            }
            for x in b.iter_mut() {
                *x = flat[pos];
                pos += 1;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    pub fn to_checkpoint(&self) -> NetCheckpoint {
        NetCheckpoint {
            layer_dims: self.layer_dims.clone(),
            weights: self.weights.iter().map(|w| w.outer_iter().map(|r| r.to_vec()).collect()).collect(),
            biases: self.biases.iter().map(|b| b.to_vec()).collect(),
            seed: self.seed,
        }
    }

    pub fn from_checkpoint(ck: &NetCheckpoint) -> Result<Self> {
        let mut p = Self::zeros(&ck.layer_dims)?;
        p.seed = ck.seed;
        if ck.weights.len() != p.num_layers() || ck.biases.len() != p.num_layers() {
            return Err(Error::input("checkpoint layer count does not match layer_dims"));
        }
        for l in 0..p.num_layers() {
            let (rows, cols) = p.weights[l].dim();
            if ck.weights[l].len() != rows || ck.weights[l].iter().any(|r| r.len() != cols) {
                return Err(Error::input(format!("checkpoint weight matrix {l} has the wrong shape")));
            }
            if ck.biases[l].len() != rows {
                return Err(Error::input(format!("checkpoint bias vector {l} has the wrong length")));
            }
            for (r, row) in ck.weights[l].iter().enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    p.weights[l][(r, c)] = v;
                }
            }
            p.biases[l] = Array1::from(ck.biases[l].clone());
        }
        if !p.is_finite() {
            return Err(Error::NonFinite("checkpoint contains non-finite parameters".into()));
        }
        Ok(p)
    }
}

/// JSON form of [`MlpParams`]; weights are nested row-major arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetCheckpoint {
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
    pub seed: u64,
}

fn check_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::config("network needs at least an input and an output layer"));
    }
    if layer_dims.iter().any(|&d| d < 1) {
        return Err(Error::config(format!("layer sizes must be at least 1, got {layer_dims:?}")));
    }
    Ok(())
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(layer_dims: &[usize], seed: u64) -> Result<MlpParams> {
    let mut p = MlpParams::zeros(layer_dims)?;
    p.seed = seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for w in &mut p.weights {
        let (fan_out, fan_in) = w.dim();
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for x in w.iter_mut() {
            *x = rng.random_range(-limit..=limit);
        }
    }
    Ok(p)
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; `inputs[0]` is the feature batch.
    pub inputs: Vec<Array2<f64>>,
    pub pre_activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }
}

pub fn forward(params: &MlpParams, features: &Array2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
    if features.ncols() != params.input_width() {
        return Err(Error::input(format!(
            "feature rows have width {}, network expects {}",
            features.ncols(),
            params.input_width()
        )));
    }
    let last = params.num_layers() - 1;
    let mut inputs = Vec::with_capacity(params.num_layers());
    let mut pre_activations = Vec::with_capacity(params.num_layers());
    let mut a = features.clone();
    for (l, (w, b)) in params.weights.iter().zip(&params.biases).enumerate() {
        let z = a.dot(&w.t()) + b;
        let next = if l < last { z.mapv(f64::tanh) } else { z.clone() };
        inputs.push(a);
        pre_activations.push(z);
        a = next;
    }
    Ok((a, ForwardCache { inputs, pre_activations }))
}

/// Reverse pass for `Σ <cotangent, prediction>`: parameter gradients and
/// per-row input gradients.
pub fn backward(params: &MlpParams, cache: &ForwardCache, cotangent: &Array2<f64>) -> Result<(MlpParams, Array2<f64>)> {
    let n = cache.batch_size();
    if cache.inputs.len() != params.num_layers() {
        return Err(Error::input("forward cache does not match the network depth"));
    }
    if cotangent.dim() != (n, params.output_width()) {
        return Err(Error::input(format!(
            "cotangent shape {:?} does not match predictions ({n}, {})",
            cotangent.dim(),
            params.output_width()
        )));
    }
    let mut grads = params.zeros_like();
    let mut delta = cotangent.clone();
    for l in (0..params.num_layers()).rev() {
        grads.weights[l] = delta.t().dot(&cache.inputs[l]);
        grads.biases[l] = delta.sum_axis(Axis(0));
        let upstream = delta.dot(&params.weights[l]);
        if l > 0 {
            // inputs[l] = tanh(pre_activations[l - 1])
            delta = upstream * cache.inputs[l].mapv(|t| 1.0 - t * t);
        } else {
            delta = upstream;
        }
    }
    Ok((grads, delta))
}
