//! Inversion attacks against recorded cut payloads, and the
//! cosine-to-consensus backdoor detector.

use serde::{Deserialize, Serialize};

use crate::bottleneck::ProjectionBasis;
use crate::error::{invalid, Result};
use crate::linalg::{RngStream, Tensor};
use crate::metrics::ReconReport;
use crate::nn::{mse_loss, Mode, Network, Optimizer, OptimizerRule};

pub const FG_THRESHOLD: f32 = 0.1;

/// Payloads a client with head `head` would send for `images` (eval mode).
pub fn victim_payloads(head: &mut Network, basis: Option<&ProjectionBasis>, images: &Tensor) -> Result<Tensor> {
    let mode = head.mode();
    head.set_mode(Mode::Eval);
    let z = head.predict(images).map(Tensor::flatten_rows);
    head.set_mode(mode);
    let z = z?;
    match basis {
        Some(b) => b.project(&z),
        None => Ok(z),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DecoderArch {
    Linear,
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderAttackConfig {
    pub arch: DecoderArch,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for DecoderAttackConfig {
    fn default() -> Self {
        Self {
            arch: DecoderArch::Mlp { hidden: 256 },
            epochs: 30,
            batch: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderAttackOutcome {
    pub report: ReconReport,
    /// `[n, C, H, W]`, clamped to `[0, 1]`.
    pub reconstructions: Tensor,
    pub final_train_mse: f32,
}

fn decoder_input(basis: Option<&ProjectionBasis>, z_tilde: &Tensor) -> Result<Tensor> {
    match basis {
        Some(b) => b.lift_fixed(z_tilde),
        None => Ok(z_tilde.clone()),
    }
}

/// Trains a decoder from (lifted) payloads to images on auxiliary pairs,
/// then inverts the observed victim payloads.
///
/// `aux_payloads` must come from the same frozen head as `observed`
/// (see [`victim_payloads`]); `truth` holds the victim images `[n, C, H, W]`.
pub fn decoder_inversion(
    observed: &Tensor,
    truth: &Tensor,
    basis: Option<&ProjectionBasis>,
    aux_payloads: &Tensor,
    aux_images: &Tensor,
    cfg: &DecoderAttackConfig,
) -> Result<DecoderAttackOutcome> {
    if aux_payloads.rank() != 2 || aux_payloads.batch() == 0 {
        return Err(invalid("auxiliary set is empty"));
    }
    if aux_images.rank() != 4 || aux_images.batch() != aux_payloads.batch() {
        return Err(invalid("auxiliary images must be [n, C, H, W] matching the payloads"));
    }
    if truth.rank() != 4 || truth.batch() != observed.batch() || truth.shape()[1..] != aux_images.shape()[1..] {
        return Err(invalid("victim images must match the observed payloads and the aux image shape"));
    }
    let shape = [truth.shape()[1], truth.shape()[2], truth.shape()[3]];
    let out_len: usize = shape.iter().product();
    let x_aux = decoder_input(basis, aux_payloads)?;
    let y_aux = aux_images.clone().flatten_rows();
    let mut rng = RngStream::new(cfg.seed);
    let in_len = x_aux.row_len();
    let mut dec = match cfg.arch {
        DecoderArch::Linear => Network::builder(&[in_len]).dense(out_len, &mut rng).build()?,
        DecoderArch::Mlp { hidden } => Network::builder(&[in_len])
            .dense(hidden, &mut rng)
            .relu()
            .dense(out_len, &mut rng)
            .build()?,
    };
    let mut opt = Optimizer::new(OptimizerRule::adam(cfg.lr));
    let n = x_aux.batch();
    let mut order: Vec<usize> = (0..n).collect();
    let mut last = f32::NAN;
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut sum = 0.0f64;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let xb = gather(&x_aux, chunk)?;
            let yb = gather(&y_aux, chunk)?;
            let (pred, tape) = dec.forward(&xb)?;
            let (loss, g) = mse_loss(&pred, &yb)?;
            sum += loss as f64 * chunk.len() as f64;
            let mut grads = dec.zero_grads();
            dec.backward_from_seed(&tape, &g, &mut grads)?;
            let gs: Vec<&Tensor> = grads.0.iter().collect();
            opt.apply(&mut dec.params_mut(), &gs)?;
        }
        last = (sum / n as f64) as f32;
    }
    let mut recon = dec.predict(&decoder_input(basis, observed)?)?;
    recon.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    let report = ReconReport::from_batch(truth.data(), recon.data(), shape, Some(FG_THRESHOLD))?;
    let mut full = vec![observed.batch()];
    full.extend_from_slice(&shape);
    Ok(DecoderAttackOutcome {
        report,
        reconstructions: recon.reshape(&full)?,
        final_train_mse: last,
    })
}

fn gather(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(idx.len() * t.row_len());
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![idx.len(), t.row_len()], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradientMatchConfig {
    pub iterations: usize,
    /// Plain gradient-descent step on the candidate input.
    pub lr: f32,
    /// Step on the clone head's parameters; 0 keeps the clone fixed.
    pub clone_lr: f32,
}

impl Default for GradientMatchConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 0.1,
            clone_lr: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradientMatchOutcome {
    /// `[n, ...input_shape]`, starting from zeros.
    pub reconstruction: Tensor,
    pub final_loss: f64,
    pub report: Option<ReconReport>,
}

/// Recovers inputs whose payload through `clone_head` (and the known
/// projection) matches `target`. Minimises `0.5 * ||cut(f(x)) - target||^2`
/// by alternating plain gradient steps on `x` and, when `clone_lr > 0`, on
/// the clone's parameters. `truth`, if given, is scored with masking.
pub fn gradient_match_inversion(
    target: &Tensor,
    clone_head: &Network,
    basis: Option<&ProjectionBasis>,
    cfg: &GradientMatchConfig,
    truth: Option<&Tensor>,
) -> Result<GradientMatchOutcome> {
    let mut head = clone_head.clone();
    head.set_mode(Mode::Eval);
    let b = target.batch();
    let mut xshape = vec![b];
    xshape.extend_from_slice(head.input_shape());
    let mut x = Tensor::zeros(&xshape);
    let mut loss = f64::NAN;
    for _ in 0..cfg.iterations {
        let (z, tape) = head.forward(&x)?;
        let zf = z.flatten_rows();
        let zt = match basis {
            Some(bs) => bs.project(&zf)?,
            None => zf,
        };
        let r = zt.sub(target)?;
        loss = 0.5 * r.sq_norm();
        let gz = match basis {
            Some(bs) => bs.backprop_projection(&r)?,
            None => r,
        };
        let seed = gz.reshape(tape.output_shape())?;
        let mut grads = head.zero_grads();
        let gx = head.backward_from_seed(&tape, &seed, &mut grads)?;
        for (v, &g) in x.data_mut().iter_mut().zip(gx.data()) {
            *v -= cfg.lr * g;
        }
        if cfg.clone_lr > 0.0 {
            for (p, g) in head.params_mut().into_iter().zip(&grads.0) {
                for (v, &d) in p.data_mut().iter_mut().zip(g.data()) {
                    *v -= cfg.clone_lr * d;
                }
            }
        }
    }
    let report = match truth {
        Some(t) => {
            if t.shape() != x.shape() || t.rank() != 4 {
                return Err(invalid("truth must be [n, C, H, W] matching the candidate"));
            }
            let s = [t.shape()[1], t.shape()[2], t.shape()[3]];
            Some(ReconReport::from_batch(t.data(), x.data(), s, Some(FG_THRESHOLD))?)
        }
        None => None,
    };
    Ok(GradientMatchOutcome {
        reconstruction: x,
        final_loss: loss,
        report,
    })
}

pub const MAD_SCALE: f64 = 1.4826;
pub const MAD_THRESHOLD: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    /// `cos(r_i, mean_j r_j)`.
    pub cosines: Vec<f64>,
    /// Robust z-scores of the cosines.
    pub z_scores: Vec<f64>,
    pub flagged: Vec<usize>,
    pub truth: Vec<usize>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Precision/recall/F1 of `flagged` against `truth`. With no true and no
/// predicted positives every score is 1; otherwise an empty side scores 0.
pub fn f1_score(flagged: &[usize], truth: &[usize]) -> (f64, f64, f64) {
    if flagged.is_empty() && truth.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    let tp = flagged.iter().filter(|i| truth.contains(i)).count() as f64;
    let precision = if flagged.is_empty() { 0.0 } else { tp / flagged.len() as f64 };
    let recall = if truth.is_empty() { 0.0 } else { tp / truth.len() as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Flags clients whose cosine to the consensus deviates from the median by
/// more than three scaled median absolute deviations.
pub fn mad_z_detector(vectors: &[Vec<f64>], truth: &[usize]) -> Result<DetectionReport> {
    if vectors.len() < 3 {
        return Err(invalid(format!("detector needs >= 3 clients, got {}", vectors.len())));
    }
    let dim = vectors[0].len();
    if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
        return Err(invalid("client vectors must share a nonzero length"));
    }
    let n = vectors.len() as f64;
    let mut consensus = vec![0.0; dim];
    for v in vectors {
        for (c, x) in consensus.iter_mut().zip(v) {
            *c += x / n;
        }
    }
    let cosines: Vec<f64> = vectors.iter().map(|v| cosine(v, &consensus)).collect();
    let med = median(&cosines);
    let dev: Vec<f64> = cosines.iter().map(|s| (s - med).abs()).collect();
    let mad = median(&dev);
    let denom = MAD_SCALE * mad.max(1e-12);
    let z_scores: Vec<f64> = cosines.iter().map(|s| (s - med) / denom).collect();
    let flagged: Vec<usize> = z_scores
        .iter()
        .enumerate()
        .filter(|(_, z)| z.abs() > MAD_THRESHOLD)
        .map(|(i, _)| i)
        .collect();
    let (precision, recall, f1) = f1_score(&flagged, truth);
    Ok(DetectionReport {
        cosines,
        z_scores,
        flagged,
        truth: truth.to_vec(),
        precision,
        recall,
        f1,
    })
}

impl DetectionReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("client,cosine,z_score,flagged,malicious\n");
        for (i, (c, z)) in self.cosines.iter().zip(&self.z_scores).enumerate() {
            s.push_str(&format!(
                "{i},{c:.8},{z:.6},{},{}\n",
                self.flagged.contains(&i) as u8,
                self.truth.contains(&i) as u8
            ));
        }
        s
    }
}
