//! Cut-layer transforms: the fixed orthonormal projection with its fixed
//! lift-back, the learned MLP lift-back, and the learned 1x1 channel
//! codec baseline.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{gaussian_matrix, matmul, matmul_nt, thin_qr, uniform_matrix, RngStream, Tensor};
use crate::nn::{Layer, Network, Tape};

/// Distribution of the matrix whose Q factor becomes the basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisInit {
    #[default]
    Gaussian,
    Uniform,
}

/// Fixed `d x k` matrix `R` with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBasis {
    r: Tensor,
    seed: u64,
}

/// Builds `R` as the Q factor of a seeded Gaussian `d x k` matrix.
pub fn init_projection(d: usize, k: usize, rng: &mut RngStream) -> Result<ProjectionBasis> {
    init_projection_with(d, k, rng, BasisInit::Gaussian)
}

pub fn init_projection_with(
    d: usize,
    k: usize,
    rng: &mut RngStream,
    init: BasisInit,
) -> Result<ProjectionBasis> {
    if k == 0 || k > d {
        return Err(invalid(format!("projection needs 1 <= k <= d, got d={d}, k={k}")));
    }
    let seed = rng.seed();
    let a = match init {
        BasisInit::Gaussian => gaussian_matrix(d, k, rng)?,
        BasisInit::Uniform => uniform_matrix(d, k, rng)?,
    };
    let (q, _t) = thin_qr(&a)?;
    Ok(ProjectionBasis { r: q, seed })
}

impl ProjectionBasis {
    /// Wraps an externally supplied basis (e.g. received on the wire).
    pub fn from_parts(r: Tensor, seed: u64) -> Result<Self> {
        match r.shape() {
            [d, k] if *k >= 1 && k <= d => Ok(Self { r, seed }),
            s => Err(invalid(format!("basis must be d x k with 1 <= k <= d, got {s:?}"))),
        }
    }

    pub fn matrix(&self) -> &Tensor {
        &self.r
    }

    pub fn d(&self) -> usize {
        self.r.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.r.shape()[1]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `d / k`.
    pub fn compression_ratio(&self) -> f64 {
        self.d() as f64 / self.k() as f64
    }

    fn check_width(&self, t: &Tensor, want: usize, what: &str) -> Result<()> {
        if t.rank() != 2 || t.shape()[1] != want {
            return Err(invalid(format!(
                "{what} expects [b, {want}], got {:?}",
                t.shape()
            )));
        }
        Ok(())
    }

    /// `z[b x d] -> z R`, i.e. `R^T z` per sample.
    pub fn project(&self, z: &Tensor) -> Result<Tensor> {
        self.check_width(z, self.d(), "project")?;
        matmul(z, &self.r)
    }

    /// `z~[b x k] -> z~ R^T`, i.e. `R z~` per sample.
    pub fn lift_fixed(&self, z_tilde: &Tensor) -> Result<Tensor> {
        self.check_width(z_tilde, self.k(), "lift_fixed")?;
        matmul_nt(z_tilde, &self.r)
    }

    /// Gradient w.r.t. `z` given the gradient w.r.t. `z~`; same map as the fixed lift.
    pub fn backprop_projection(&self, grad_z_tilde: &Tensor) -> Result<Tensor> {
        self.lift_fixed(grad_z_tilde)
    }
}

/// `z~ -> W2 relu(BN(W1 z~))`, trained with the backbone.
#[derive(Debug, Clone)]
pub struct LiftbackMlp {
    net: Network,
}

impl LiftbackMlp {
    pub fn new(k: usize, m: usize, d: usize, rng: &mut RngStream) -> Result<Self> {
        let net = Network::builder(&[k])
            .dense_no_bias(m, rng)
            .batchnorm()
            .relu()
            .dense_no_bias(d, rng)
            .build()?;
        Ok(Self { net })
    }

    /// Same shape, output layer initialised to zero.
    pub fn zero_output(k: usize, m: usize, d: usize, rng: &mut RngStream) -> Result<Self> {
        let mut mlp = Self::new(k, m, d, rng)?;
        if let Some(Layer::Dense(out)) = mlp.net.layers_mut().last_mut() {
            out.weight.fill(0.0);
        }
        Ok(mlp)
    }

    pub fn from_network(net: Network) -> Self {
        Self { net }
    }

    pub fn k(&self) -> usize {
        self.net.input_len()
    }

    pub fn d(&self) -> usize {
        self.net.output_len()
    }

    pub fn hidden(&self) -> usize {
        match &self.net.layers()[0] {
            Layer::Dense(d) => d.out_features(),
            _ => 0,
        }
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn lift_learned(&mut self, z_tilde: &Tensor) -> Result<(Tensor, Tape)> {
        if z_tilde.rank() != 2 || z_tilde.shape()[1] != self.k() {
            return Err(invalid(format!(
                "lift_learned expects [b, {}], got {:?}",
                self.k(),
                z_tilde.shape()
            )));
        }
        self.net.forward(z_tilde)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecDirection {
    Encode,
    Decode,
}

/// Channel count realising `requested_cr` on a `channels`-channel map:
/// `max(1, round_half_even(channels / requested_cr))`.
pub fn codec_channels(channels: usize, requested_cr: f64) -> usize {
    ((channels as f64 / requested_cr).round_ties_even() as usize).max(1)
}

/// Learned 1x1 convolution pair compressing `C` channels to `k_ch`.
#[derive(Debug, Clone)]
pub struct Channel1x1Codec {
    pub encoder: Network,
    pub decoder: Network,
    channels: usize,
    k_ch: usize,
    requested_cr: f64,
}

impl Channel1x1Codec {
    pub fn new(feature_shape: &[usize], requested_cr: f64, rng: &mut RngStream) -> Result<Self> {
        let (c, h, w) = match feature_shape {
            [c, h, w] => (*c, *h, *w),
            s => return Err(invalid(format!("codec needs a [C, H, W] feature map, got {s:?}"))),
        };
        if !(requested_cr >= 1.0) {
            return Err(invalid(format!("compression ratio must be >= 1, got {requested_cr}")));
        }
        let k_ch = codec_channels(c, requested_cr);
        let encoder = Network::builder(&[c, h, w]).conv2d(k_ch, 1, 1, 0, rng).build()?;
        let decoder = Network::builder(&[k_ch, h, w]).conv2d(c, 1, 1, 0, rng).build()?;
        Ok(Self {
            encoder,
            decoder,
            channels: c,
            k_ch,
            requested_cr,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn code_channels(&self) -> usize {
        self.k_ch
    }

    pub fn requested_cr(&self) -> f64 {
        self.requested_cr
    }

    /// Realised ratio as `(C, k_ch)`.
    pub fn effective_cr(&self) -> (usize, usize) {
        (self.channels, self.k_ch)
    }

    pub fn effective_cr_f64(&self) -> f64 {
        self.channels as f64 / self.k_ch as f64
    }

    pub fn codec_1x1(&mut self, feature_map: &Tensor, direction: CodecDirection) -> Result<Tensor> {
        let net = match direction {
            CodecDirection::Encode => &mut self.encoder,
            CodecDirection::Decode => &mut self.decoder,
        };
        net.predict(feature_map)
    }
}
