use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn, RngStream, Tensor};

/// Fully connected layer, `y = x W^T + b` with `W: [out, in]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// 2-D convolution over `[b, c, h, w]` with square kernels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conv2d {
    /// `[out_ch, in_ch, k, k]`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

/// Batch normalization over the channel axis (axis 1) for rank-2 and rank-4 inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
    pub momentum: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    Relu,
    MaxPool2d { size: usize, stride: usize },
    BatchNorm(BatchNorm),
    Flatten,
    /// Per-sample reshape to the given extents.
    Reshape(Vec<usize>),
}

/// Forward-pass record for one layer.
#[derive(Debug, Clone)]
pub(crate) enum Cache {
    Input(Tensor),
    Pool { in_shape: Vec<usize>, argmax: Vec<usize> },
    Norm { xhat: Vec<f32>, inv_std: Vec<f64>, train: bool, in_shape: Vec<usize> },
    Shape(Vec<usize>),
}

fn uniform_init(shape: &[usize], bound: f64, rng: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| ((rng.uniform() * 2.0 - 1.0) * bound) as f32)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

impl Dense {
    /// Uniform `±1/sqrt(fan_in)` initialisation.
    pub fn init(input: usize, output: usize, bias: bool, rng: &mut RngStream) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = uniform_init(&[output, input], bound, rng);
        let bias = bias.then(|| uniform_init(&[output], bound, rng));
        Self { weight, bias }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl Conv2d {
    pub fn init(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut RngStream,
    ) -> Self {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let weight = uniform_init(&[out_ch, in_ch, kernel, kernel], bound, rng);
        let bias = bias.then(|| uniform_init(&[out_ch], bound, rng));
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    fn dims(&self) -> (usize, usize, usize) {
        let s = self.weight.shape();
        (s[0], s[1], s[2])
    }

    fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (_, _, k) = self.dims();
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < k || wp < k || self.stride == 0 {
            return Err(invalid(format!(
                "conv kernel {k} does not fit {h}x{w} with padding {}",
                self.padding
            )));
        }
        Ok(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// `(batch, channels, spatial)` view of a rank-2 or rank-4 activation.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [b, c] => Ok((*b, *c, 1)),
        [b, c, h, w] => Ok((*b, *c, h * w)),
        s => Err(invalid(format!("batch norm needs rank 2 or 4 input, got {s:?}"))),
    }
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu => "relu",
            Layer::MaxPool2d { .. } => "maxpool2d",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Flatten => "flatten",
            Layer::Reshape(_) => "reshape",
        }
    }

    /// Trainable tensors in a fixed order.
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(d) => std::iter::once(&d.weight).chain(d.bias.as_ref()).collect(),
            Layer::Conv2d(c) => std::iter::once(&c.weight).chain(c.bias.as_ref()).collect(),
            Layer::BatchNorm(bn) => vec![&bn.gamma, &bn.beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(d) => std::iter::once(&mut d.weight).chain(d.bias.as_mut()).collect(),
            Layer::Conv2d(c) => std::iter::once(&mut c.weight).chain(c.bias.as_mut()).collect(),
            Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            _ => Vec::new(),
        }
    }

    pub(crate) fn param_names(&self) -> &'static [&'static str] {
        match self {
            Layer::Dense(Dense { bias: Some(_), .. }) | Layer::Conv2d(Conv2d { bias: Some(_), .. }) => {
                &["weight", "bias"]
            }
            Layer::Dense(_) | Layer::Conv2d(_) => &["weight"],
            Layer::BatchNorm(_) => &["gamma", "beta"],
            _ => &[],
        }
    }

    /// Per-sample output extents for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense(d) => match input {
                [n] if *n == d.in_features() => Ok(vec![d.out_features()]),
                s => Err(invalid(format!(
                    "dense expects [{}], got {s:?}",
                    d.in_features()
                ))),
            },
            Layer::Conv2d(c) => {
                let (oc, ic, _) = c.dims();
                match input {
                    [ch, h, w] if *ch == ic => {
                        let (oh, ow) = c.out_hw(*h, *w)?;
                        Ok(vec![oc, oh, ow])
                    }
                    s => Err(invalid(format!("conv2d expects [{ic}, h, w], got {s:?}"))),
                }
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool2d { size, stride } => match input {
                [c, h, w] if h >= size && w >= size && *stride > 0 => {
                    Ok(vec![*c, (h - size) / stride + 1, (w - size) / stride + 1])
                }
                s => Err(invalid(format!("maxpool {size}/{stride} cannot take {s:?}"))),
            },
            Layer::BatchNorm(bn) => match input {
                [c] | [c, _, _] if *c == bn.channels() => Ok(input.to_vec()),
                s => Err(invalid(format!(
                    "batchnorm over {} channels cannot take {s:?}",
                    bn.channels()
                ))),
            },
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Reshape(target) => {
                if target.iter().product::<usize>() == input.iter().product::<usize>() {
                    Ok(target.clone())
                } else {
                    Err(invalid(format!("cannot reshape {input:?} into {target:?}")))
                }
            }
        }
    }

    pub(crate) fn forward(&mut self, x: Tensor, train: bool) -> Result<(Tensor, Cache)> {
        match self {
            Layer::Dense(d) => {
                let mut y = matmul_nt(&x, &d.weight)?;
                if let Some(b) = &d.bias {
                    let o = b.len();
                    for row in y.data_mut().chunks_mut(o) {
                        for (v, bv) in row.iter_mut().zip(b.data()) {
                            *v += *bv;
                        }
                    }
                }
                Ok((y, Cache::Input(x)))
            }
            Layer::Conv2d(c) => {
                let y = conv_forward(c, &x)?;
                Ok((y, Cache::Input(x)))
            }
            Layer::Relu => {
                let y = Tensor::new(
                    x.shape().to_vec(),
                    x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
                )?;
                Ok((y, Cache::Input(x)))
            }
            Layer::MaxPool2d { size, stride } => maxpool_forward(*size, *stride, &x),
            Layer::BatchNorm(bn) => batchnorm_forward(bn, &x, train),
            Layer::Flatten => {
                let shape = x.shape().to_vec();
                Ok((x.flatten_rows(), Cache::Shape(shape)))
            }
            Layer::Reshape(target) => {
                let shape = x.shape().to_vec();
                let mut full = vec![x.batch()];
                full.extend_from_slice(target);
                Ok((x.reshape(&full)?, Cache::Shape(shape)))
            }
        }
    }

    /// Backward through one layer; parameter gradients are added into `grads`.
    pub(crate) fn backward(&self, cache: &Cache, gy: &Tensor, grads: &mut [Tensor]) -> Result<Tensor> {
        match (self, cache) {
            (Layer::Dense(d), Cache::Input(x)) => {
                let gw = matmul_tn(gy, x)?;
                grads[0].add_assign(&gw)?;
                if d.bias.is_some() {
                    let o = d.out_features();
                    let mut gb = vec![0.0f64; o];
                    for row in gy.data().chunks(o) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += *v as f64;
                        }
                    }
                    for (g, a) in grads[1].data_mut().iter_mut().zip(gb) {
                        *g += a as f32;
                    }
                }
                matmul(gy, &d.weight)
            }
            (Layer::Conv2d(c), Cache::Input(x)) => conv_backward(c, x, gy, grads),
            (Layer::Relu, Cache::Input(x)) => Tensor::new(
                x.shape().to_vec(),
                x.data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect(),
            ),
            (Layer::MaxPool2d { .. }, Cache::Pool { in_shape, argmax }) => {
                let mut gx = Tensor::zeros(in_shape);
                let gd = gx.data_mut();
                for (&idx, &g) in argmax.iter().zip(gy.data()) {
                    gd[idx] += g;
                }
                Ok(gx)
            }
            (Layer::BatchNorm(bn), Cache::Norm { xhat, inv_std, train, in_shape }) => {
                batchnorm_backward(bn, xhat, inv_std, *train, in_shape, gy, grads)
            }
            (Layer::Flatten | Layer::Reshape(_), Cache::Shape(shape)) => gy.clone().reshape(shape),
            _ => Err(crate::error::Error::ContractViolation(format!(
                "tape entry does not belong to a {} layer",
                self.kind()
            ))),
        }
    }
}

fn conv_forward(c: &Conv2d, x: &Tensor) -> Result<Tensor> {
    let (oc, ic, k) = c.dims();
    let (b, h, w) = match x.shape() {
        [b, ch, h, w] if *ch == ic => (*b, *h, *w),
        s => return Err(invalid(format!("conv2d expects [b, {ic}, h, w], got {s:?}"))),
    };
    let (oh, ow) = c.out_hw(h, w)?;
    let (s, p) = (c.stride as isize, c.padding as isize);
    let xd = x.data();
    let wd = c.weight.data();
    let mut out = vec![0.0f32; b * oc * oh * ow];
    for n in 0..b {
        for o in 0..oc {
            let bias = c.bias.as_ref().map_or(0.0, |t| t.data()[o] as f64);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias;
                    for i in 0..ic {
                        let xbase = (n * ic + i) * h * w;
                        let wbase = (o * ic + i) * k * k;
                        for ky in 0..k {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = ox as isize * s + kx as isize - p;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += wd[wbase + ky * k + kx] as f64
                                    * xd[xbase + iy as usize * w + ix as usize] as f64;
                            }
                        }
                    }
                    out[((n * oc + o) * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
    }
    Tensor::new(vec![b, oc, oh, ow], out)
}

fn conv_backward(c: &Conv2d, x: &Tensor, gy: &Tensor, grads: &mut [Tensor]) -> Result<Tensor> {
    let (oc, ic, k) = c.dims();
    let (b, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let (oh, ow) = c.out_hw(h, w)?;
    if gy.shape() != [b, oc, oh, ow] {
        return Err(invalid(format!(
            "conv2d upstream gradient {:?} does not match output [{b}, {oc}, {oh}, {ow}]",
            gy.shape()
        )));
    }
    let (s, p) = (c.stride as isize, c.padding as isize);
    let xd = x.data();
    let wd = c.weight.data();
    let gd = gy.data();
    let mut gw = vec![0.0f64; wd.len()];
    let mut gb = vec![0.0f64; oc];
    let mut gx = vec![0.0f64; xd.len()];
    for n in 0..b {
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gd[((n * oc + o) * oh + oy) * ow + ox] as f64;
                    if g == 0.0 {
                        continue;
                    }
                    gb[o] += g;
                    for i in 0..ic {
                        let xbase = (n * ic + i) * h * w;
                        let wbase = (o * ic + i) * k * k;
                        for ky in 0..k {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = ox as isize * s + kx as isize - p;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = xbase + iy as usize * w + ix as usize;
                                let wi = wbase + ky * k + kx;
                                gw[wi] += g * xd[xi] as f64;
                                gx[xi] += g * wd[wi] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    for (t, a) in grads[0].data_mut().iter_mut().zip(gw) {
        *t += a as f32;
    }
    if c.bias.is_some() {
        for (t, a) in grads[1].data_mut().iter_mut().zip(gb) {
            *t += a as f32;
        }
    }
    Tensor::new(x.shape().to_vec(), gx.into_iter().map(|v| v as f32).collect())
}

fn maxpool_forward(size: usize, stride: usize, x: &Tensor) -> Result<(Tensor, Cache)> {
    let (b, c, h, w) = match x.shape() {
        [b, c, h, w] => (*b, *c, *h, *w),
        s => return Err(invalid(format!("maxpool expects rank 4 input, got {s:?}"))),
    };
    if h < size || w < size || stride == 0 {
        return Err(invalid(format!("maxpool {size}/{stride} cannot take {h}x{w}")));
    }
    let (oh, ow) = ((h - size) / stride + 1, (w - size) / stride + 1);
    let xd = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..size {
                    for kx in 0..size {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::new(vec![b, c, oh, ow], out)?,
        Cache::Pool {
            in_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

fn batchnorm_forward(bn: &mut BatchNorm, x: &Tensor, train: bool) -> Result<(Tensor, Cache)> {
    let (b, c, sp) = channel_layout(x.shape())?;
    if c != bn.channels() {
        return Err(invalid(format!(
            "batchnorm over {} channels got {c}",
            bn.channels()
        )));
    }
    let xd = x.data();
    let idx = |n: usize, ch: usize, j: usize| (n * c + ch) * sp + j;
    let count = b * sp;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    if train {
        if count < 2 {
            return Err(invalid("batchnorm in train mode needs more than one value per channel"));
        }
        for ch in 0..c {
            let mut s = 0.0;
            for n in 0..b {
                for j in 0..sp {
                    s += xd[idx(n, ch, j)] as f64;
                }
            }
            let m = s / count as f64;
            let mut v = 0.0;
            for n in 0..b {
                for j in 0..sp {
                    v += (xd[idx(n, ch, j)] as f64 - m).powi(2);
                }
            }
            mean[ch] = m;
            var[ch] = v / count as f64;
        }
        let mom = bn.momentum as f64;
        let unbias = count as f64 / (count as f64 - 1.0);
        for ch in 0..c {
            let rm = &mut bn.running_mean.data_mut()[ch];
            *rm = ((1.0 - mom) * *rm as f64 + mom * mean[ch]) as f32;
            let rv = &mut bn.running_var.data_mut()[ch];
            *rv = ((1.0 - mom) * *rv as f64 + mom * var[ch] * unbias) as f32;
        }
    } else {
        for ch in 0..c {
            mean[ch] = bn.running_mean.data()[ch] as f64;
            var[ch] = bn.running_var.data()[ch] as f64;
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps as f64).sqrt()).collect();
    let mut xhat = vec![0.0f32; xd.len()];
    let mut out = vec![0.0f32; xd.len()];
    for n in 0..b {
        for ch in 0..c {
            let (g, be) = (bn.gamma.data()[ch] as f64, bn.beta.data()[ch] as f64);
            for j in 0..sp {
                let i = idx(n, ch, j);
                let xh = (xd[i] as f64 - mean[ch]) * inv_std[ch];
                xhat[i] = xh as f32;
                out[i] = (g * xh + be) as f32;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        Cache::Norm {
            xhat,
            inv_std,
            train,
            in_shape: x.shape().to_vec(),
        },
    ))
}

fn batchnorm_backward(
    bn: &BatchNorm,
    xhat: &[f32],
    inv_std: &[f64],
    train: bool,
    in_shape: &[usize],
    gy: &Tensor,
    grads: &mut [Tensor],
) -> Result<Tensor> {
    let (b, c, sp) = channel_layout(in_shape)?;
    let gd = gy.data();
    let idx = |n: usize, ch: usize, j: usize| (n * c + ch) * sp + j;
    let count = (b * sp) as f64;
    let mut gx = vec![0.0f32; gd.len()];
    for ch in 0..c {
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for n in 0..b {
            for j in 0..sp {
                let i = idx(n, ch, j);
                sum_g += gd[i] as f64;
                sum_gx += gd[i] as f64 * xhat[i] as f64;
            }
        }
        grads[0].data_mut()[ch] += sum_gx as f32;
        grads[1].data_mut()[ch] += sum_g as f32;
        let gamma = bn.gamma.data()[ch] as f64;
        let scale = gamma * inv_std[ch];
        for n in 0..b {
            for j in 0..sp {
                let i = idx(n, ch, j);
                let g = gd[i] as f64;
                gx[i] = if train {
                    (scale * (g - sum_g / count - xhat[i] as f64 * sum_gx / count)) as f32
                } else {
                    (scale * g) as f32
                };
            }
        }
    }
    Tensor::new(in_shape.to_vec(), gx)
}
