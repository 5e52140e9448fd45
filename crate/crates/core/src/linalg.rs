//! Dense linear algebra substrate: the [`Tensor`] value type, a seeded
//! random stream, Householder thin QR and matrix products.
//!
//! Storage is binary32 throughout. Dot products inside [`matmul`] and
//! [`thin_qr`] accumulate in binary64 and round once on store.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Dense row-major binary32 array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(invalid(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a 2-D tensor from nested rows. Panics on ragged input; test helper.
    pub fn from_rows(rows: &[Vec<f32>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            shape: vec![r, c],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Leading extent (batch size for activations).
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of values per leading index.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn get2(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f32) {
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(invalid(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Collapses everything after the leading axis: `[b, ...] -> [b, prod]`.
    pub fn flatten_rows(self) -> Self {
        let b = self.batch();
        let w = self.row_len();
        Self {
            shape: vec![b, w],
            data: self.data,
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(invalid(format!("transpose needs rank 2, got {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn scale(&self, s: f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: f32) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(invalid(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Little-endian binary32 bytes of the payload.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// Seeded, platform-independent random stream.
///
/// Uniform bits come from ChaCha8; normals are produced by Box–Muller on
/// top of them so any implementation with the same bit source reproduces
/// the same Gaussian sequence.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub const ALGORITHM: &'static str = "chacha8/box-muller/v1";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent child stream.
    pub fn fork(&mut self) -> Self {
        Self::new(self.inner.next_u64())
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`; `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Lemire-style widening multiply; bias is below 2^-64 * n.
        ((self.inner.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// `rows x cols` matrix of i.i.d. standard normal entries.
pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> Result<Tensor> {
    if rows == 0 || cols == 0 {
        return Err(invalid(format!("gaussian_matrix needs nonzero dims, got {rows}x{cols}")));
    }
    let data = (0..rows * cols)
        .map(|_| rng.standard_normal() as f32)
        .collect();
    Tensor::new(vec![rows, cols], data)
}

/// `rows x cols` matrix of i.i.d. `U(0, 1)` entries.
pub fn uniform_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> Result<Tensor> {
    if rows == 0 || cols == 0 {
        return Err(invalid(format!("uniform_matrix needs nonzero dims, got {rows}x{cols}")));
    }
    let data = (0..rows * cols).map(|_| rng.uniform() as f32).collect();
    Tensor::new(vec![rows, cols], data)
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(invalid(format!("{what} must be rank 2, got {s:?}"))),
    }
}

/// `A[m x n] * B[n x p]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = dims2(a, "matmul lhs")?;
    let (n2, p) = dims2(b, "matmul rhs")?;
    if n != n2 {
        return Err(invalid(format!(
            "matmul inner dims disagree: {m}x{n} * {n2}x{p}"
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0f32; m * p];
    let mut acc = vec![0.0f64; p];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        let arow = &ad[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let brow = &bd[l * p..(l + 1) * p];
            for (x, &bv) in acc.iter_mut().zip(brow) {
                *x += av * bv as f64;
            }
        }
        for (o, x) in out[i * p..(i + 1) * p].iter_mut().zip(&acc) {
            *o = *x as f32;
        }
    }
    Tensor::new(vec![m, p], out)
}

/// `A[m x n] * B[p x n]^T` without materialising the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = dims2(a, "matmul_nt lhs")?;
    let (p, n2) = dims2(b, "matmul_nt rhs")?;
    if n != n2 {
        return Err(invalid(format!(
            "matmul_nt inner dims disagree: {m}x{n} * ({p}x{n2})^T"
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0f32; m * p];
    for i in 0..m {
        let arow = &ad[i * n..(i + 1) * n];
        for j in 0..p {
            let brow = &bd[j * n..(j + 1) * n];
            let s: f64 = arow
                .iter()
                .zip(brow)
                .map(|(&x, &y)| x as f64 * y as f64)
                .sum();
            out[i * p + j] = s as f32;
        }
    }
    Tensor::new(vec![m, p], out)
}

/// `A[n x m]^T * B[n x p]` without materialising the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, m) = dims2(a, "matmul_tn lhs")?;
    let (n2, p) = dims2(b, "matmul_tn rhs")?;
    if n != n2 {
        return Err(invalid(format!(
            "matmul_tn inner dims disagree: ({n}x{m})^T * {n2}x{p}"
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut acc = vec![0.0f64; m * p];
    for l in 0..n {
        let arow = &ad[l * m..(l + 1) * m];
        let brow = &bd[l * p..(l + 1) * p];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            for (x, &bv) in acc[i * p..(i + 1) * p].iter_mut().zip(brow) {
                *x += av * bv as f64;
            }
        }
    }
    Tensor::new(vec![m, p], acc.into_iter().map(|x| x as f32).collect())
}

/// Householder thin QR: `A[d x k] = Q[d x k] T[k x k]` with `T` upper
/// triangular and its diagonal forced nonnegative, which makes `Q` unique.
pub fn thin_qr(a: &Tensor) -> Result<(Tensor, Tensor)> {
    let (d, k) = dims2(a, "thin_qr input")?;
    if d < k {
        return Err(invalid(format!("thin_qr needs d >= k, got {d}x{k}")));
    }
    if k == 0 {
        return Err(invalid("thin_qr needs k >= 1"));
    }
    let scale = a.max_abs() as f64;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::DegenerateInput("zero or non-finite matrix".into()));
    }
    let tol = 1e-10 * scale;

    // Working copy, column-major for cheap column access.
    let mut w: Vec<Vec<f64>> = (0..k)
        .map(|j| (0..d).map(|i| a.get2(i, j) as f64).collect())
        .collect();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(k);

    for j in 0..k {
        let x = &w[j][j..];
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < tol {
            return Err(Error::DegenerateInput(format!(
                "rank deficient at column {j} (pivot {norm:e})"
            )));
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = x.to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|t| t * t).sum();
        if vnorm2 > 0.0 {
            for col in w.iter_mut().skip(j) {
                let tail = &mut col[j..];
                let dot: f64 = tail.iter().zip(&v).map(|(a, b)| a * b).sum();
                let f = 2.0 * dot / vnorm2;
                for (t, vi) in tail.iter_mut().zip(&v) {
                    *t -= f * vi;
                }
            }
        }
        reflectors.push(v);
    }

    // T from the upper triangle.
    let mut t = vec![0.0f64; k * k];
    for j in 0..k {
        for i in 0..=j {
            t[i * k + j] = w[j][i];
        }
    }

    // Q = H_0 H_1 ... H_{k-1} applied to the first k columns of I_d.
    let mut q: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            e
        })
        .collect();
    for (j, v) in reflectors.iter().enumerate().rev() {
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for col in q.iter_mut() {
            let tail = &mut col[j..];
            let dot: f64 = tail.iter().zip(v).map(|(a, b)| a * b).sum();
            let f = 2.0 * dot / vnorm2;
            for (x, vi) in tail.iter_mut().zip(v) {
                *x -= f * vi;
            }
        }
    }

    // Nonnegative diagonal convention.
    for j in 0..k {
        if t[j * k + j] < 0.0 {
            for c in j..k {
                t[j * k + c] = -t[j * k + c];
            }
            for x in q[j].iter_mut() {
                *x = -*x;
            }
        }
    }

    let mut qd = vec![0.0f32; d * k];
    for (j, col) in q.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            qd[i * k + j] = v as f32;
        }
    }
    Ok((
        Tensor::new(vec![d, k], qd)?,
        Tensor::new(vec![k, k], t.into_iter().map(|x| x as f32).collect())?,
    ))
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
