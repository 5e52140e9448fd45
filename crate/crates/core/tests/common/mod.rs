//! Helpers shared by the integration tests: binary64 reference
//! implementations of every layer, finite differences, and a toy
//! three-client split setup built straight on the protocol API.
#![allow(dead_code)]

use splitcut::bottleneck::ProjectionBasis;
use splitcut::nn::{Layer, Network, OptimizerRule};
use splitcut::protocol::{
    server_setup, ClientModel, ClientState, CutSeeds, CutSpec, LiftSpec, ServerState,
};
use splitcut::transport::WireMessage;
use splitcut::wcc::WccConfig;
use splitcut::{RngStream, Tensor};

pub fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| (lo + (hi - lo) * rng.uniform()) as f32).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn to64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// `||a - b|| / max(||a||, ||b||)`; zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let s = na.max(nb);
    if s == 0.0 {
        0.0
    } else {
        d / s
    }
}

/// Central differences of `f` at `x`.
pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let v = p[i];
            p[i] = v + h;
            let up = f(&p);
            p[i] = v - h;
            let dn = f(&p);
            p[i] = v;
            (up - dn) / (2.0 * h)
        })
        .collect()
}

pub const FD_STEP: f64 = 1e-7;
pub const GRAD_TOL: f64 = 1e-3;

// ------------------------------------------------------------ f64 shadows

#[derive(Debug, Clone)]
enum RefKind {
    Dense { inp: usize, out: usize, bias: bool },
    Conv { oc: usize, ic: usize, k: usize, stride: usize, pad: usize, bias: bool },
    Relu,
    Pool { size: usize, stride: usize },
    Norm { eps: f64 },
    Flatten,
    Reshape(Vec<usize>),
}

/// A binary64 re-implementation of a [`Network`] in train mode, written
/// from the layer definitions rather than from the library code.
#[derive(Debug, Clone)]
pub struct RefNet {
    pub input_shape: Vec<usize>,
    kinds: Vec<RefKind>,
    /// Parameter count of every layer, in order.
    counts: Vec<usize>,
}

impl RefNet {
    pub fn of(net: &Network) -> Self {
        let mut kinds = Vec::new();
        let mut counts = Vec::new();
        for l in net.layers() {
            let (k, c) = match l {
                Layer::Dense(d) => (
                    RefKind::Dense {
                        inp: d.in_features(),
                        out: d.out_features(),
                        bias: d.bias.is_some(),
                    },
                    1 + d.bias.is_some() as usize,
                ),
                Layer::Conv2d(c) => {
                    let s = c.weight.shape();
                    (
                        RefKind::Conv {
                            oc: s[0],
                            ic: s[1],
                            k: s[2],
                            stride: c.stride,
                            pad: c.padding,
                            bias: c.bias.is_some(),
                        },
                        1 + c.bias.is_some() as usize,
                    )
                }
                Layer::Relu => (RefKind::Relu, 0),
                Layer::MaxPool2d { size, stride } => (RefKind::Pool { size: *size, stride: *stride }, 0),
                Layer::BatchNorm(b) => (RefKind::Norm { eps: b.eps as f64 }, 2),
                Layer::Flatten => (RefKind::Flatten, 0),
                Layer::Reshape(s) => (RefKind::Reshape(s.clone()), 0),
            };
            kinds.push(k);
            counts.push(c);
        }
        Self {
            input_shape: net.input_shape().to_vec(),
            kinds,
            counts,
        }
    }

    /// Forward over `[b, ...input_shape]` with parameters `params` (the
    /// network's `params()` order). Returns the output and its shape.
    pub fn forward(&self, params: &[Vec<f64>], x: &[f64], batch: usize) -> (Vec<f64>, Vec<usize>) {
        let mut shape = vec![batch];
        shape.extend_from_slice(&self.input_shape);
        let mut v = x.to_vec();
        let mut pi = 0;
        for (kind, &c) in self.kinds.iter().zip(&self.counts) {
            let p = &params[pi..pi + c];
            pi += c;
            (v, shape) = apply(kind, p, &v, &shape);
        }
        (v, shape)
    }
}

fn apply(kind: &RefKind, p: &[Vec<f64>], x: &[f64], shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let b = shape[0];
    match kind {
        RefKind::Dense { inp, out, bias } => {
            let mut y = vec![0.0; b * out];
            for n in 0..b {
                for o in 0..*out {
                    let mut s = if *bias { p[1][o] } else { 0.0 };
                    for i in 0..*inp {
                        s += p[0][o * inp + i] * x[n * inp + i];
                    }
                    y[n * out + o] = s;
                }
            }
            (y, vec![b, *out])
        }
        RefKind::Conv { oc, ic, k, stride, pad, bias } => {
            let (h, w) = (shape[2], shape[3]);
            let oh = (h + 2 * pad - k) / stride + 1;
            let ow = (w + 2 * pad - k) / stride + 1;
            let mut y = vec![0.0; b * oc * oh * ow];
            for n in 0..b {
                for o in 0..*oc {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            let mut s = if *bias { p[1][o] } else { 0.0 };
                            for i in 0..*ic {
                                for ky in 0..*k {
                                    for kx in 0..*k {
                                        let iy = (yy * stride + ky) as isize - *pad as isize;
                                        let ix = (xx * stride + kx) as isize - *pad as isize;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = ((n * ic + i) * h + iy as usize) * w + ix as usize;
                                        s += p[0][((o * ic + i) * k + ky) * k + kx] * x[xi];
                                    }
                                }
                            }
                            y[((n * oc + o) * oh + yy) * ow + xx] = s;
                        }
                    }
                }
            }
            (y, vec![b, *oc, oh, ow])
        }
        RefKind::Relu => (x.iter().map(|&v| v.max(0.0)).collect(), shape.to_vec()),
        RefKind::Pool { size, stride } => {
            let (c, h, w) = (shape[1], shape[2], shape[3]);
            let oh = (h - size) / stride + 1;
            let ow = (w - size) / stride + 1;
            let mut y = Vec::with_capacity(b * c * oh * ow);
            for plane in 0..b * c {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let mut m = f64::NEG_INFINITY;
                        for ky in 0..*size {
                            for kx in 0..*size {
                                m = m.max(x[(plane * h + yy * stride + ky) * w + xx * stride + kx]);
                            }
                        }
                        y.push(m);
                    }
                }
            }
            (y, vec![b, c, oh, ow])
        }
        RefKind::Norm { eps } => {
            let c = shape[1];
            let sp: usize = shape[2..].iter().product();
            let cnt = (b * sp) as f64;
            let mut y = x.to_vec();
            for ch in 0..c {
                let at = |n: usize, j: usize| (n * c + ch) * sp + j;
                let mut mean = 0.0;
                for n in 0..b {
                    for j in 0..sp {
                        mean += x[at(n, j)];
                    }
                }
                mean /= cnt;
                let mut var = 0.0;
                for n in 0..b {
                    for j in 0..sp {
                        var += (x[at(n, j)] - mean).powi(2);
                    }
                }
                var /= cnt;
                let inv = 1.0 / (var + eps).sqrt();
                for n in 0..b {
                    for j in 0..sp {
                        y[at(n, j)] = p[0][ch] * (x[at(n, j)] - mean) * inv + p[1][ch];
                    }
                }
            }
            (y, shape.to_vec())
        }
        RefKind::Flatten => (x.to_vec(), vec![b, shape[1..].iter().product()]),
        RefKind::Reshape(t) => {
            let mut s = vec![b];
            s.extend_from_slice(t);
            (x.to_vec(), s)
        }
    }
}

pub fn params64(net: &Network) -> Vec<Vec<f64>> {
    net.params().into_iter().map(to64).collect()
}

/// Mean softmax cross-entropy in binary64.
pub fn ref_cross_entropy(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let b = labels.len();
    let mut s = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        s += lse - row[y];
    }
    s / b as f64
}

/// Within-class compaction in binary64.
pub fn ref_wcc(z: &[f64], k: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    let max = labels.iter().max().copied().unwrap_or(0);
    for c in 0..=max {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        let mut mu = vec![0.0; k];
        for &i in &idx {
            for j in 0..k {
                mu[j] += z[i * k + j] / idx.len() as f64;
            }
        }
        for &i in &idx {
            for j in 0..k {
                total += (z[i * k + j] - mu[j]).powi(2) / idx.len() as f64;
            }
        }
    }
    total
}

/// `x (b x d)` times `r (d x k)` in binary64.
pub fn ref_matmul(x: &[f64], r: &[f64], b: usize, d: usize, k: usize) -> Vec<f64> {
    let mut y = vec![0.0; b * k];
    for n in 0..b {
        for i in 0..d {
            let xv = x[n * d + i];
            for j in 0..k {
                y[n * k + j] += xv * r[i * k + j];
            }
        }
    }
    y
}

/// `z~ (b x k)` times `r^T` in binary64.
pub fn ref_lift(zt: &[f64], r: &[f64], b: usize, d: usize, k: usize) -> Vec<f64> {
    let mut y = vec![0.0; b * d];
    for n in 0..b {
        for i in 0..d {
            y[n * d + i] = (0..k).map(|j| zt[n * k + j] * r[i * k + j]).sum();
        }
    }
    y
}

// ------------------------------------------------------------ toy split setup

pub const TOY_CLASSES: usize = 3;
pub const TOY_BATCH: usize = 6;
pub const TOY_CLIENTS: usize = 3;
/// Head output `[4, 4, 4]`, so `d = 64`.
pub const TOY_FEATURE: [usize; 3] = [4, 4, 4];

pub fn toy_head(rng: &mut RngStream) -> Network {
    Network::builder(&[1, 8, 8]).conv2d(4, 3, 1, 1, rng).relu().maxpool(2, 2).build().unwrap()
}

pub fn toy_backbone(rng: &mut RngStream) -> Network {
    Network::builder(&TOY_FEATURE).flatten().dense(16, rng).relu().build().unwrap()
}

pub fn toy_tail(rng: &mut RngStream) -> Network {
    Network::builder(&[16]).dense(TOY_CLASSES, rng).build().unwrap()
}

/// Deterministic batches: `batches[step][client]`.
pub fn toy_batches(steps: usize, seed: u64) -> Vec<Vec<(Tensor, Vec<usize>)>> {
    let mut rng = RngStream::new(seed);
    (0..steps)
        .map(|_| {
            (0..TOY_CLIENTS)
                .map(|_| {
                    let x = rand_tensor(&[TOY_BATCH, 1, 8, 8], 0.0, 1.0, &mut rng);
                    let y = (0..TOY_BATCH).map(|i| (i + rng.below(2)) % TOY_CLASSES).collect();
                    (x, y)
                })
                .collect()
        })
        .collect()
}

pub struct Toy {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub model: ClientModel,
    pub setup: Vec<WireMessage>,
}

pub fn toy_seeds() -> CutSeeds {
    CutSeeds {
        basis: 11,
        lift: 12,
        codec: 13,
    }
}

/// Three clients sharing one head, all networks drawn from `seed`.
pub fn toy(cut: CutSpec, lambda: f32, rule: OptimizerRule, seed: u64) -> Toy {
    let mut rng = RngStream::new(seed);
    let head = toy_head(&mut rng);
    let backbone = toy_backbone(&mut rng);
    let tail = toy_tail(&mut rng);
    let roster: Vec<u32> = (0..TOY_CLIENTS as u32).collect();
    let (server, setup) = server_setup(backbone, &cut, &TOY_FEATURE, &roster, rule, toy_seeds()).unwrap();
    let mut clients: Vec<ClientState> = roster
        .iter()
        .map(|&id| ClientState::new(id, cut, WccConfig::new(lambda).unwrap()))
        .collect();
    for m in &setup {
        clients[m.client_id as usize].receive_setup(m).unwrap();
    }
    Toy {
        server,
        clients,
        model: ClientModel::new(head, None, tail, rule),
        setup,
    }
}

pub fn fixed_projection(k: usize) -> CutSpec {
    CutSpec::Projection {
        k,
        init: Default::default(),
        lift: LiftSpec::Fixed,
    }
}

pub fn basis_of(t: &Toy) -> ProjectionBasis {
    t.server.basis().cloned().unwrap()
}
pub mod checks;
