//! Tiny feed-forward regressor with hand-derived gradients.
//!
//! Fixed architecture: 8 → 32 (tanh) → 32 (tanh) → 1, all parameters
//! F32, 1,377 parameters total. Arithmetic runs in f64 with parameters
//! widened on entry and narrowed on update, so training is
//! bit-deterministic for a fixed seed on a single thread.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::importance::NeuronMask;
use crate::store::{DType, StoreBuilder, TensorStore};

use super::task::Mixture;

pub const INPUT_DIM: usize = 8;
pub const HIDDEN_DIM: usize = 32;

/// Total parameter count fixed by the architecture:
/// 8·32 + 32 + 32·32 + 32 + 32·1 + 1.
pub const PARAM_COUNT: usize = INPUT_DIM * HIDDEN_DIM
    + HIDDEN_DIM
    + HIDDEN_DIM * HIDDEN_DIM
    + HIDDEN_DIM
    + HIDDEN_DIM
    + 1;

/// Tensor names and shapes of the checkpoint form, in ascending order.
pub const TENSOR_SHAPES: [(&str, &[usize]); 6] = [
    ("mlp.0.bias", &[HIDDEN_DIM]),
    ("mlp.0.weight", &[INPUT_DIM, HIDDEN_DIM]),
    ("mlp.1.bias", &[HIDDEN_DIM]),
    ("mlp.1.weight", &[HIDDEN_DIM, HIDDEN_DIM]),
    ("mlp.2.bias", &[1]),
    ("mlp.2.weight", &[HIDDEN_DIM, 1]),
];

/// The regressor. Weight matrices are row-major `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
    pub w3: Vec<f32>,
    pub b3: Vec<f32>,
}

/// f64 mirror of the parameters used for gradient math.
#[derive(Debug, Clone)]
pub(crate) struct Params64 {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

impl Params64 {
    pub fn zeros() -> Params64 {
        Params64 {
            w1: vec![0.0; INPUT_DIM * HIDDEN_DIM],
            b1: vec![0.0; HIDDEN_DIM],
            w2: vec![0.0; HIDDEN_DIM * HIDDEN_DIM],
            b2: vec![0.0; HIDDEN_DIM],
            w3: vec![0.0; HIDDEN_DIM],
            b3: vec![0.0; 1],
        }
    }

    fn tensor(&self, name: &str) -> &[f64] {
        match name {
            "mlp.0.weight" => &self.w1,
            "mlp.0.bias" => &self.b1,
            "mlp.1.weight" => &self.w2,
            "mlp.1.bias" => &self.b2,
            "mlp.2.weight" => &self.w3,
            "mlp.2.bias" => &self.b3,
            other => panic!("unknown tensor '{other}'"),
        }
    }

    #[cfg(test)]
    pub(crate) fn tensor_mut(&mut self, name: &str) -> &mut Vec<f64> {
        match name {
            "mlp.0.weight" => &mut self.w1,
            "mlp.0.bias" => &mut self.b1,
            "mlp.1.weight" => &mut self.w2,
            "mlp.1.bias" => &mut self.b2,
            "mlp.2.weight" => &mut self.w3,
            "mlp.2.bias" => &mut self.b3,
            other => panic!("unknown tensor '{other}'"),
        }
    }

    /// Forward pass caching both hidden activations.
    pub fn forward(&self, x: &[f64; INPUT_DIM]) -> ([f64; HIDDEN_DIM], [f64; HIDDEN_DIM], f64) {
        let mut h1 = [0.0f64; HIDDEN_DIM];
        for j in 0..HIDDEN_DIM {
            let mut z = self.b1[j];
            for i in 0..INPUT_DIM {
                z += x[i] * self.w1[i * HIDDEN_DIM + j];
            }
            h1[j] = z.tanh();
        }
        let mut h2 = [0.0f64; HIDDEN_DIM];
        for j in 0..HIDDEN_DIM {
            let mut z = self.b2[j];
            for i in 0..HIDDEN_DIM {
                z += h1[i] * self.w2[i * HIDDEN_DIM + j];
            }
            h2[j] = z.tanh();
        }
        let mut y = self.b3[0];
        for i in 0..HIDDEN_DIM {
            y += h2[i] * self.w3[i];
        }
        (h1, h2, y)
    }

    /// Accumulate gradients of the batch-mean squared error for one
    /// sample, given `dy = ∂L/∂y` for that sample.
    pub fn backward(
        &self,
        x: &[f64; INPUT_DIM],
        h1: &[f64; HIDDEN_DIM],
        h2: &[f64; HIDDEN_DIM],
        dy: f64,
        grads: &mut Params64,
    ) {
        grads.b3[0] += dy;
        let mut dh2 = [0.0f64; HIDDEN_DIM];
        for i in 0..HIDDEN_DIM {
            grads.w3[i] += h2[i] * dy;
            dh2[i] = self.w3[i] * dy;
        }
        let mut dz2 = [0.0f64; HIDDEN_DIM];
        for j in 0..HIDDEN_DIM {
            dz2[j] = dh2[j] * (1.0 - h2[j] * h2[j]);
            grads.b2[j] += dz2[j];
        }
        let mut dh1 = [0.0f64; HIDDEN_DIM];
        for i in 0..HIDDEN_DIM {
            for j in 0..HIDDEN_DIM {
                grads.w2[i * HIDDEN_DIM + j] += h1[i] * dz2[j];
                dh1[i] += self.w2[i * HIDDEN_DIM + j] * dz2[j];
            }
        }
        for j in 0..HIDDEN_DIM {
            let dz1 = dh1[j] * (1.0 - h1[j] * h1[j]);
            grads.b1[j] += dz1;
            for i in 0..INPUT_DIM {
                grads.w1[i * HIDDEN_DIM + j] += x[i] * dz1;
            }
        }
    }
}

impl ToyModel {
    /// Random initialization: weights ~ N(0, 1/fan_in), biases zero.
    pub fn init(seed: u64) -> ToyModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |fan_in: usize, count: usize| -> Vec<f32> {
            let scale = 1.0 / (fan_in as f64).sqrt();
            (0..count)
                .map(|_| {
                    let g: f64 = rng.sample(StandardNormal);
                    (g * scale) as f32
                })
                .collect()
        };
        ToyModel {
            w1: layer(INPUT_DIM, INPUT_DIM * HIDDEN_DIM),
            b1: vec![0.0; HIDDEN_DIM],
            w2: layer(HIDDEN_DIM, HIDDEN_DIM * HIDDEN_DIM),
            b2: vec![0.0; HIDDEN_DIM],
            w3: layer(HIDDEN_DIM, HIDDEN_DIM),
            b3: vec![0.0; 1],
        }
    }

    /// The all-zero model; predicts exactly 0 for every input.
    pub fn zeros() -> ToyModel {
        ToyModel {
            w1: vec![0.0; INPUT_DIM * HIDDEN_DIM],
            b1: vec![0.0; HIDDEN_DIM],
            w2: vec![0.0; HIDDEN_DIM * HIDDEN_DIM],
            b2: vec![0.0; HIDDEN_DIM],
            w3: vec![0.0; HIDDEN_DIM],
            b3: vec![0.0; 1],
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.len()
            + self.b1.len()
            + self.w2.len()
            + self.b2.len()
            + self.w3.len()
            + self.b3.len()
    }

    pub(crate) fn to_f64(&self) -> Params64 {
        Params64 {
            w1: self.w1.iter().map(|&v| v as f64).collect(),
            b1: self.b1.iter().map(|&v| v as f64).collect(),
            w2: self.w2.iter().map(|&v| v as f64).collect(),
            b2: self.b2.iter().map(|&v| v as f64).collect(),
            w3: self.w3.iter().map(|&v| v as f64).collect(),
            b3: self.b3.iter().map(|&v| v as f64).collect(),
        }
    }

    fn tensor(&self, name: &str) -> &Vec<f32> {
        match name {
            "mlp.0.weight" => &self.w1,
            "mlp.0.bias" => &self.b1,
            "mlp.1.weight" => &self.w2,
            "mlp.1.bias" => &self.b2,
            "mlp.2.weight" => &self.w3,
            "mlp.2.bias" => &self.b3,
            other => panic!("unknown tensor '{other}'"),
        }
    }

    fn tensor_mut(&mut self, name: &str) -> &mut Vec<f32> {
        match name {
            "mlp.0.weight" => &mut self.w1,
            "mlp.0.bias" => &mut self.b1,
            "mlp.1.weight" => &mut self.w2,
            "mlp.1.bias" => &mut self.b2,
            "mlp.2.weight" => &mut self.w3,
            "mlp.2.bias" => &mut self.b3,
            other => panic!("unknown tensor '{other}'"),
        }
    }

    pub fn predict(&self, x: &[f64; INPUT_DIM]) -> f64 {
        self.to_f64().forward(x).2
    }

    /// Serialize as a checkpoint store.
    pub fn to_store(&self, metadata: &BTreeMap<String, String>) -> TensorStore {
        let mut builder = StoreBuilder::new().metadata_map(metadata);
        for (name, shape) in TENSOR_SHAPES {
            builder = builder
                .add_f32(name, DType::F32, shape, self.tensor(name).clone())
                .expect("fixed architecture tensors are valid");
        }
        builder.build()
    }

    pub fn from_store(store: &TensorStore) -> Result<ToyModel> {
        let mut model = ToyModel::zeros();
        for (name, shape) in TENSOR_SHAPES {
            let meta = store
                .meta(name)
                .ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
            if meta.shape != shape {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    left: shape.to_vec(),
                    right: meta.shape.clone(),
                });
            }
            *model.tensor_mut(name) = store.read_f32(name)?;
        }
        Ok(model)
    }
}

/// Per-tensor gradients of the batch-mean squared error, keyed like the
/// checkpoint tensors.
#[derive(Debug, Clone)]
pub struct ToyGradients {
    grads: Params64,
}

impl ToyGradients {
    pub fn tensor(&self, name: &str) -> &[f64] {
        self.grads.tensor(name)
    }
}

/// Batch-mean squared error of the model on fixed samples, in f64.
pub fn batch_loss(model: &ToyModel, samples: &[([f64; INPUT_DIM], f64)]) -> f64 {
    let params = model.to_f64();
    samples
        .iter()
        .map(|(x, target)| {
            let (_, _, y) = params.forward(x);
            (y - target) * (y - target) / samples.len() as f64
        })
        .sum()
}

/// Analytic gradients of [`batch_loss`] with respect to every parameter.
pub fn batch_gradients(model: &ToyModel, samples: &[([f64; INPUT_DIM], f64)]) -> ToyGradients {
    let params = model.to_f64();
    let mut grads = Params64::zeros();
    for (x, target) in samples {
        let (h1, h2, y) = params.forward(x);
        let dy = 2.0 * (y - target) / samples.len() as f64;
        params.backward(x, &h1, &h2, dy, &mut grads);
    }
    ToyGradients { grads }
}

/// Plain SGD on batch-mean squared error with hand-derived gradients.
///
/// When a mask is given, parameters outside it never change; their bits
/// stay identical to the input model. Data are drawn from the mixture
/// with a dedicated deterministic stream.
pub fn train(
    model: &ToyModel,
    mixture: &Mixture,
    mask: Option<&NeuronMask>,
    steps: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<ToyModel> {
    if batch_size == 0 {
        return Err(Error::InvalidParameter("batch_size must be positive".to_string()));
    }
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "learning rate must be positive and finite, got {lr}"
        )));
    }
    // Dense allowed-flags per tensor; None means everything trains.
    let allowed: Option<BTreeMap<&str, Vec<bool>>> = mask.map(|m| {
        TENSOR_SHAPES
            .iter()
            .map(|(name, shape)| {
                let numel: usize = shape.iter().product();
                let mut flags = vec![false; numel];
                if let Some(indices) = m.indices(name) {
                    for &i in indices {
                        flags[i as usize] = true;
                    }
                }
                (*name, flags)
            })
            .collect()
    });

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = model.clone();
    for step in 0..steps {
        let params = current.to_f64();
        let mut grads = Params64::zeros();
        let mut loss = 0.0f64;
        let samples: Vec<([f64; INPUT_DIM], f64)> =
            (0..batch_size).map(|_| mixture.sample(&mut rng)).collect();
        for (x, target) in &samples {
            let (h1, h2, y) = params.forward(x);
            let err = y - target;
            loss += err * err / batch_size as f64;
            let dy = 2.0 * err / batch_size as f64;
            params.backward(x, &h1, &h2, dy, &mut grads);
        }
        if !loss.is_finite() {
            return Err(Error::Diverged(step));
        }
        for (name, _) in TENSOR_SHAPES {
            let values = current.tensor_mut(name);
            let gradient = grads.tensor(name);
            let flags = allowed.as_ref().map(|a| &a[name]);
            for (i, v) in values.iter_mut().enumerate() {
                if flags.map_or(true, |f| f[i]) {
                    *v = (*v as f64 - lr * gradient[i]) as f32;
                }
            }
        }
    }
    Ok(current)
}
