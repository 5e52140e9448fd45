//! Minimal feed-forward network engine with reverse-mode differentiation.
//!
//! The backward pass starts from an arbitrary upstream gradient
//! (`backward_from_seed`), which is what a split model needs on both
//! sides of the cut: the server seeds with the gradient the client sent,
//! the client seeds its head with the gradient the server returned.

mod checkpoint;
mod layers;
mod loss;
mod optim;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use layers::{BatchNorm, Conv2d, Dense, Layer};
pub use loss::{cross_entropy, mse_loss, softmax_rows};
pub use optim::{Optimizer, OptimizerRule};

use crate::error::{invalid, Error, Result};
use crate::linalg::{RngStream, Tensor};
use layers::Cache;

static NEXT_NETWORK_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NETWORK_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// An ordered stack of layers with a declared per-sample input shape.
#[derive(Debug, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    mode: Mode,
    #[serde(skip, default = "fresh_id")]
    id: u64,
    #[serde(skip)]
    version: u64,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            input_shape: self.input_shape.clone(),
            output_shape: self.output_shape.clone(),
            mode: self.mode,
            id: fresh_id(),
            version: 0,
        }
    }
}

/// Activations recorded by [`Network::forward`], consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    network_id: u64,
    version: u64,
    caches: Vec<Cache>,
    output_shape: Vec<usize>,
}

impl Tape {
    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }
}

/// Gradient buffers aligned with [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Tensor>);

impl Grads {
    pub fn tensors(&self) -> &[Tensor] {
        &self.0
    }

    pub fn add_assign(&mut self, other: &Grads) -> Result<()> {
        if self.0.len() != other.0.len() {
            return Err(invalid("gradient sets have different lengths"));
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b)?;
        }
        Ok(())
    }
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(invalid(format!("bad input shape {input_shape:?}")));
        }
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer
                .output_shape(&shape)
                .map_err(|e| invalid(format!("layer {i} ({}): {e}", layer.kind())))?;
        }
        Ok(Self {
            layers,
            input_shape,
            output_shape: shape,
            mode: Mode::Train,
            id: fresh_id(),
            version: 0,
        })
    }

    pub fn builder(input_shape: &[usize]) -> NetworkBuilder {
        NetworkBuilder {
            input_shape: input_shape.to_vec(),
            current: input_shape.to_vec(),
            layers: Vec::new(),
            error: None,
        }
    }

    /// A network with no layers: `forward(x) = x`.
    pub fn identity(input_shape: &[usize]) -> Result<Self> {
        Self::new(input_shape.to_vec(), Vec::new())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.output_shape.iter().product()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    /// Mutable parameter access. Invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.version += 1;
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        self.version += 1;
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(self.params().iter().map(|t| Tensor::zeros(t.shape())).collect())
    }

    /// Runs the stack on `[b, ...input_shape]`, returning the output and a tape.
    pub fn forward(&mut self, input: &Tensor) -> Result<(Tensor, Tape)> {
        let shape = input.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(invalid(format!(
                "network expects [b, {:?}], got {:?}",
                self.input_shape, shape
            )));
        }
        if shape[0] == 0 {
            return Err(invalid("empty batch"));
        }
        let train = self.mode == Mode::Train;
        let mut x = input.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let (y, cache) = layer.forward(x, train)?;
            caches.push(cache);
            x = y;
        }
        let tape = Tape {
            network_id: self.id,
            version: self.version,
            caches,
            output_shape: x.shape().to_vec(),
        };
        Ok((x, tape))
    }

    /// Forward pass without keeping a tape.
    pub fn predict(&mut self, input: &Tensor) -> Result<Tensor> {
        self.forward(input).map(|(y, _)| y)
    }

    /// Backpropagates `seed` (the gradient of some scalar w.r.t. the output)
    /// and adds parameter gradients into `grads`. Returns the input gradient.
    pub fn backward_from_seed(&self, tape: &Tape, seed: &Tensor, grads: &mut Grads) -> Result<Tensor> {
        if tape.network_id != self.id || tape.version != self.version {
            return Err(Error::ContractViolation(
                "tape was not produced by the current state of this network".into(),
            ));
        }
        if seed.shape() != tape.output_shape.as_slice() {
            return Err(invalid(format!(
                "seed shape {:?} does not match output {:?}",
                seed.shape(),
                tape.output_shape
            )));
        }
        let expected: usize = self.layers.iter().map(|l| l.params().len()).sum();
        if grads.0.len() != expected {
            return Err(invalid("gradient buffer does not match this network"));
        }
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.params().len();
        }
        let mut g = seed.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let n = layer.params().len();
            let slot = &mut grads.0[offsets[i]..offsets[i] + n];
            g = layer.backward(&tape.caches[i], &g, slot)?;
        }
        Ok(g)
    }

    pub(crate) fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.param_names().iter().zip(layer.params()) {
                out.push((format!("{i}.{name}"), t));
            }
            if let Layer::BatchNorm(bn) = layer {
                out.push((format!("{i}.running_mean"), &bn.running_mean));
                out.push((format!("{i}.running_var"), &bn.running_var));
            }
        }
        out
    }
}

/// Shape-tracking builder; shape errors surface from [`NetworkBuilder::build`].
pub struct NetworkBuilder {
    input_shape: Vec<usize>,
    current: Vec<usize>,
    layers: Vec<Layer>,
    error: Option<Error>,
}

impl NetworkBuilder {
    fn push(mut self, layer: Layer) -> Self {
        if self.error.is_none() {
            match layer.output_shape(&self.current) {
                Ok(s) => {
                    self.current = s;
                    self.layers.push(layer);
                }
                Err(e) => self.error = Some(e),
            }
        }
        self
    }

    fn flat_width(&self) -> usize {
        self.current.iter().product()
    }

    pub fn dense(self, out: usize, rng: &mut RngStream) -> Self {
        let d = Dense::init(self.flat_width(), out, true, rng);
        self.push(Layer::Dense(d))
    }

    pub fn dense_no_bias(self, out: usize, rng: &mut RngStream) -> Self {
        let d = Dense::init(self.flat_width(), out, false, rng);
        self.push(Layer::Dense(d))
    }

    pub fn conv2d(self, out_ch: usize, kernel: usize, stride: usize, padding: usize, rng: &mut RngStream) -> Self {
        let in_ch = self.current.first().copied().unwrap_or(0);
        let c = Conv2d::init(in_ch, out_ch, kernel, stride, padding, true, rng);
        self.push(Layer::Conv2d(c))
    }

    pub fn conv2d_no_bias(self, out_ch: usize, kernel: usize, rng: &mut RngStream) -> Self {
        let in_ch = self.current.first().copied().unwrap_or(0);
        let c = Conv2d::init(in_ch, out_ch, kernel, 1, 0, false, rng);
        self.push(Layer::Conv2d(c))
    }

    pub fn relu(self) -> Self {
        self.push(Layer::Relu)
    }

    pub fn maxpool(self, size: usize, stride: usize) -> Self {
        self.push(Layer::MaxPool2d { size, stride })
    }

    pub fn batchnorm(self) -> Self {
        let c = self.current.first().copied().unwrap_or(0);
        self.push(Layer::BatchNorm(BatchNorm::new(c)))
    }

    pub fn flatten(self) -> Self {
        self.push(Layer::Flatten)
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        self.push(Layer::Reshape(shape.to_vec()))
    }

    pub fn layer(self, layer: Layer) -> Self {
        self.push(layer)
    }

    pub fn build(self) -> Result<Network> {
        if let Some(e) = self.error {
            return Err(e);
        }
        Network::new(self.input_shape, self.layers)
    }
}
