use crate::error::{invalid, Result};
use crate::linalg::Tensor;

/// Row-wise softmax computed in binary64.
pub fn softmax_rows(logits: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (b, c) = match logits.shape() {
        [b, c] => (*b, *c),
        s => return Err(invalid(format!("logits must be [b, C], got {s:?}"))),
    };
    Ok((0..b)
        .map(|i| {
            let row = &logits.data()[i * c..(i + 1) * c];
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect())
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let (b, c) = match logits.shape() {
        [b, c] => (*b, *c),
        s => return Err(invalid(format!("logits must be [b, C], got {s:?}"))),
    };
    if b == 0 {
        return Err(invalid("cross_entropy needs a nonempty batch"));
    }
    if labels.len() != b {
        return Err(invalid(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(invalid(format!("label {bad} out of range for {c} classes")));
    }
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f32; b * c];
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data()[i * c..(i + 1) * c];
        let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
        loss += lse - row[y] as f64;
        for j in 0..c {
            let p = (row[j] as f64 - lse).exp();
            let t = if j == y { 1.0 } else { 0.0 };
            grad[i * c + j] = ((p - t) / b as f64) as f32;
        }
    }
    Ok(((loss / b as f64) as f32, Tensor::new(vec![b, c], grad)?))
}

/// Mean squared error over all elements and its gradient w.r.t. `pred`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f32, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(invalid(format!(
            "mse shapes differ: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0f64;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p as f64 - t as f64;
        loss += d * d;
        grad.push((2.0 * d / n) as f32);
    }
    Ok(((loss / n) as f32, Tensor::new(pred.shape().to_vec(), grad)?))
}
