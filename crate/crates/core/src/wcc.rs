//! Within-class compaction: a client-side penalty pulling projected
//! activations of the same class towards their batch centroid.
//!
//! For a batch with class index sets `S_c`:
//! `L = sum_c (1/|S_c|) sum_{i in S_c} ||z_i - mu_c||^2` and
//! `dL/dz_i = (2/|S_{y_i}|)(z_i - mu_{y_i})`.
//! Singleton classes contribute zero loss and zero gradient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WccConfig {
    pub lambda: f32,
}

impl WccConfig {
    pub fn new(lambda: f32) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(invalid(format!("wcc weight must be finite and >= 0, got {lambda}")));
        }
        Ok(Self { lambda })
    }

    pub fn is_active(&self) -> bool {
        self.lambda != 0.0
    }
}

fn check(z: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (b, k) = match z.shape() {
        [b, k] => (*b, *k),
        s => return Err(invalid(format!("wcc expects [b, k], got {s:?}"))),
    };
    if b == 0 {
        return Err(invalid("wcc needs a nonempty batch"));
    }
    if labels.len() != b {
        return Err(invalid(format!("{} labels for {b} rows", labels.len())));
    }
    Ok((b, k))
}

/// Per-class mean rows, accumulated in binary64.
fn centroids64(z: &Tensor, labels: &[usize], k: usize) -> BTreeMap<usize, (usize, Vec<f64>)> {
    let mut acc: BTreeMap<usize, (usize, Vec<f64>)> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        let e = acc.entry(y).or_insert_with(|| (0, vec![0.0; k]));
        e.0 += 1;
        for (a, &v) in e.1.iter_mut().zip(z.row(i)) {
            *a += v as f64;
        }
    }
    for (n, sum) in acc.values_mut() {
        let n = *n as f64;
        sum.iter_mut().for_each(|v| *v /= n);
    }
    acc
}

/// Centroid of every class present in the batch.
pub fn class_centroids(z_tilde: &Tensor, labels: &[usize]) -> Result<BTreeMap<usize, Tensor>> {
    let (_, k) = check(z_tilde, labels)?;
    centroids64(z_tilde, labels, k)
        .into_iter()
        .map(|(c, (_, mu))| Ok((c, Tensor::new(vec![k], mu.into_iter().map(|v| v as f32).collect())?)))
        .collect()
}

pub fn wcc_loss(z_tilde: &Tensor, labels: &[usize]) -> Result<f32> {
    let (_, k) = check(z_tilde, labels)?;
    let cents = centroids64(z_tilde, labels, k);
    let mut loss = 0.0f64;
    for (i, y) in labels.iter().enumerate() {
        let (n, mu) = &cents[y];
        let d2: f64 = z_tilde
            .row(i)
            .iter()
            .zip(mu)
            .map(|(&v, m)| (v as f64 - m).powi(2))
            .sum();
        loss += d2 / *n as f64;
    }
    Ok(loss as f32)
}

pub fn wcc_grad(z_tilde: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, k) = check(z_tilde, labels)?;
    let cents = centroids64(z_tilde, labels, k);
    let mut g = Vec::with_capacity(b * k);
    for (i, y) in labels.iter().enumerate() {
        let (n, mu) = &cents[y];
        let f = 2.0 / *n as f64;
        g.extend(z_tilde.row(i).iter().zip(mu).map(|(&v, m)| (f * (v as f64 - m)) as f32));
    }
    Tensor::new(vec![b, k], g)
}

/// `ce + lambda * wcc`; returns `ce` untouched when `lambda == 0`.
pub fn total_loss(ce: f32, wcc: f32, cfg: &WccConfig) -> f32 {
    if cfg.is_active() {
        ce + cfg.lambda * wcc
    } else {
        ce
    }
}
