//! Desk-scale datasets, Dirichlet partitioning and trigger poisoning.

use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{fnv1a64, RngStream, Tensor};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Images `[n, C, H, W]` in `[0, 1]` with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(invalid(format!("images must be [n, C, H, W], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(invalid(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(invalid(format!("label {bad} outside {classes} classes")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("pixels must lie in [0, 1]"));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// Gathers the given rows into a batch `([b, C, H, W], labels)`.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(invalid(format!("index {i} out of range for {} samples", self.len())));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.sample_shape());
        Ok((Tensor::new(shape, data)?, labels))
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let (images, labels) = self.batch(idx)?;
        Ok(Self {
            images,
            labels,
            classes: self.classes,
        })
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// FNV-1a over the image bytes followed by the labels as u32 LE.
    pub fn hash(&self) -> u64 {
        let mut bytes = self.images.to_le_bytes();
        for &y in &self.labels {
            bytes.extend_from_slice(&(y as u32).to_le_bytes());
        }
        fnv1a64(&bytes)
    }

    /// Splits off a deterministic `fraction` of samples as a second set.
    pub fn split(&self, fraction: f64, rng: &mut RngStream) -> Result<(Self, Self)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(invalid(format!("split fraction {fraction} outside [0, 1]")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut idx);
        let cut = (self.len() as f64 * fraction).round() as usize;
        let (b, a) = idx.split_at(cut);
        let (mut a, mut b) = (a.to_vec(), b.to_vec());
        a.sort_unstable();
        b.sort_unstable();
        Ok((self.subset(&a)?, self.subset(&b)?))
    }
}

/// Class-conditional blob images: each class owns a prototype made of two
/// Gaussian bumps on a zero background; samples jitter bump positions and
/// amplitudes by `spread` and add a little pixel noise.
pub fn synth_blobs(
    classes: usize,
    per_class: usize,
    height: usize,
    width: usize,
    spread: f64,
    rng: &mut RngStream,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(invalid("synth_blobs needs at least 2 classes"));
    }
    if height == 0 || width == 0 || per_class == 0 {
        return Err(invalid("synth_blobs needs nonzero sizes"));
    }
    if !(spread >= 0.0) {
        return Err(invalid(format!("spread must be >= 0, got {spread}")));
    }
    const BUMPS: usize = 2;
    let (hf, wf) = (height as f64, width as f64);
    let sigma = hf.min(wf) / 8.0;
    let protos: Vec<Vec<(f64, f64, f64)>> = (0..classes)
        .map(|_| {
            (0..BUMPS)
                .map(|_| {
                    let cy = (0.2 + 0.6 * rng.uniform()) * hf;
                    let cx = (0.2 + 0.6 * rng.uniform()) * wf;
                    let amp = 0.6 + 0.4 * rng.uniform();
                    (cy, cx, amp)
                })
                .collect()
        })
        .collect();
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * height * width);
    let mut labels = Vec::with_capacity(n);
    let jitter = spread * hf.min(wf) / 4.0;
    for (c, proto) in protos.iter().enumerate() {
        for _ in 0..per_class {
            let bumps: Vec<(f64, f64, f64)> = proto
                .iter()
                .map(|&(cy, cx, amp)| {
                    (
                        cy + jitter * rng.standard_normal(),
                        cx + jitter * rng.standard_normal(),
                        amp * (1.0 + 0.5 * spread * rng.standard_normal()),
                    )
                })
                .collect();
            for y in 0..height {
                for x in 0..width {
                    let mut v = 0.0;
                    for &(cy, cx, amp) in &bumps {
                        let r2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                        v += amp * (-r2 / (2.0 * sigma * sigma)).exp();
                    }
                    if spread > 0.0 {
                        v += 0.05 * spread * rng.standard_normal();
                    }
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![n, 1, height, width], data)?, labels, classes)
}

fn be_u32(b: &[u8], at: usize) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("IDX header truncated at byte {at}")))
}

/// Parses an IDX image/label pair; pixels are scaled by 1/255.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    if be_u32(images, 0)? != IDX_IMAGES {
        return Err(Error::Format("image file magic is not 0x00000803".into()));
    }
    if be_u32(labels, 0)? != IDX_LABELS {
        return Err(Error::Format("label file magic is not 0x00000801".into()));
    }
    let n = be_u32(images, 4)? as usize;
    let h = be_u32(images, 8)? as usize;
    let w = be_u32(images, 12)? as usize;
    let nl = be_u32(labels, 4)? as usize;
    if n != nl {
        return Err(Error::InconsistentPair(format!("{n} images vs {nl} labels")));
    }
    let px = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Format("IDX extents overflow".into()))?;
    let body = images
        .get(16..16 + px)
        .ok_or_else(|| Error::Format(format!("image payload needs {px} bytes")))?;
    let lab = labels
        .get(8..8 + n)
        .ok_or_else(|| Error::Format(format!("label payload needs {n} bytes")))?;
    let data = body.iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = lab.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1).max(2);
    Dataset::new(Tensor::new(vec![n, 1, h, w], data)?, labels, classes)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    parse_idx(&std::fs::read(images_path)?, &std::fs::read(labels_path)?)
}

/// Writes a single-channel dataset as an IDX pair, quantising pixels to u8.
pub fn write_idx(ds: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let [_, c, h, w] = *ds.images().shape() else {
        unreachable!()
    };
    if c != 1 {
        return Err(invalid("IDX export supports single-channel images only"));
    }
    if ds.classes() > 256 {
        return Err(invalid("IDX labels are single bytes"));
    }
    let mut img = std::io::BufWriter::new(std::fs::File::create(images_path)?);
    for v in [IDX_IMAGES, ds.len() as u32, h as u32, w as u32] {
        img.write_all(&v.to_be_bytes())?;
    }
    let px: Vec<u8> = ds
        .images()
        .data()
        .iter()
        .map(|&v| (v * 255.0).round() as u8)
        .collect();
    img.write_all(&px)?;
    img.flush()?;
    let mut lab = std::io::BufWriter::new(std::fs::File::create(labels_path)?);
    lab.write_all(&IDX_LABELS.to_be_bytes())?;
    lab.write_all(&(ds.len() as u32).to_be_bytes())?;
    lab.write_all(&ds.labels().iter().map(|&y| y as u8).collect::<Vec<_>>())?;
    lab.flush()?;
    Ok(())
}

/// Integer split of `total` proportional to `weights` (largest remainder,
/// ties to the lower index).
fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

pub const PARTITION_RETRIES: usize = 100;

/// Splits sample indices across `n_clients` with per-class client
/// proportions drawn from `Dirichlet(alpha)`. Draws that leave a client
/// empty are repeated up to [`PARTITION_RETRIES`] times.
pub fn dirichlet_partition(
    ds: &Dataset,
    n_clients: usize,
    alpha: f64,
    rng: &mut RngStream,
) -> Result<Vec<Vec<usize>>> {
    if n_clients == 0 {
        return Err(invalid("need at least one client"));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(invalid(format!("alpha must be finite and > 0, got {alpha}")));
    }
    if ds.len() < n_clients {
        return Err(Error::PartitionFailure(format!(
            "{} samples cannot fill {n_clients} shards",
            ds.len()
        )));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| invalid(e.to_string()))?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes()];
    for (i, &y) in ds.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    for _ in 0..PARTITION_RETRIES {
        let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
        let mut ok = true;
        for members in &by_class {
            if members.is_empty() {
                continue;
            }
            let w: Vec<f64> = (0..n_clients).map(|_| gamma.sample(rng)).collect();
            if !(w.iter().sum::<f64>() > 0.0) {
                ok = false;
                break;
            }
            let mut members = members.clone();
            rng.shuffle(&mut members);
            let counts = largest_remainder(members.len(), &w);
            let mut at = 0;
            for (shard, c) in shards.iter_mut().zip(counts) {
                shard.extend_from_slice(&members[at..at + c]);
                at += c;
            }
        }
        if ok && shards.iter().all(|s| !s.is_empty()) {
            shards.iter_mut().for_each(|s| s.sort_unstable());
            return Ok(shards);
        }
    }
    Err(Error::PartitionFailure(format!(
        "no partition without empty shards after {PARTITION_RETRIES} draws (alpha={alpha})"
    )))
}

/// Per-client activation averaged for backdoor detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectSignal {
    /// Backbone outputs `u`.
    #[default]
    BackboneOutput,
    /// Payloads `z~` as received by the server.
    ServerInput,
}

/// Backdoor trigger and the share of poisoned clients/samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoisonSpec {
    pub trigger_size: usize,
    pub trigger_value: f32,
    pub target_class: usize,
    pub rate: f64,
    pub malicious_fraction: f64,
    /// Rounds at the end of training whose server activations feed the
    /// detector; `None` uses the last quarter.
    pub detect_window: Option<usize>,
    pub signal: DetectSignal,
}

impl Default for PoisonSpec {
    fn default() -> Self {
        Self {
            trigger_size: 3,
            trigger_value: 1.0,
            target_class: 0,
            rate: 0.3,
            malicious_fraction: 0.1,
            detect_window: None,
            signal: DetectSignal::BackboneOutput,
        }
    }
}

impl PoisonSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(invalid(format!("poison rate {} outside [0, 1]", self.rate)));
        }
        if !(0.0..=1.0).contains(&self.malicious_fraction) {
            return Err(invalid(format!(
                "malicious fraction {} outside [0, 1]",
                self.malicious_fraction
            )));
        }
        if self.trigger_size == 0 {
            return Err(invalid("trigger size must be positive"));
        }
        Ok(())
    }

    /// `round(fraction * n)` client ids (at least one when the fraction is positive).
    pub fn malicious_clients(&self, n_clients: usize, rng: &mut RngStream) -> Vec<usize> {
        let mut m = (self.malicious_fraction * n_clients as f64).round() as usize;
        if self.malicious_fraction > 0.0 {
            m = m.max(1);
        }
        let mut ids: Vec<usize> = (0..n_clients).collect();
        rng.shuffle(&mut ids);
        let mut out = ids[..m.min(n_clients)].to_vec();
        out.sort_unstable();
        out
    }
}

/// Stamps the top-left trigger on `floor(rate * n)` randomly chosen samples
/// and relabels them to the target class. Returns the poisoned indices.
pub fn apply_poison(shard: &Dataset, spec: &PoisonSpec, rng: &mut RngStream) -> Result<(Dataset, Vec<usize>)> {
    spec.validate()?;
    let [_, c, h, w] = *shard.images().shape() else {
        unreachable!()
    };
    let t = spec.trigger_size;
    if h < t || w < t {
        return Err(invalid(format!("images {h}x{w} smaller than the {t}x{t} trigger")));
    }
    if spec.target_class >= shard.classes() {
        return Err(invalid(format!("target class {} out of range", spec.target_class)));
    }
    let m = (spec.rate * shard.len() as f64).floor() as usize;
    let mut idx: Vec<usize> = (0..shard.len()).collect();
    rng.shuffle(&mut idx);
    let mut chosen = idx[..m].to_vec();
    chosen.sort_unstable();
    let mut images = shard.images().clone();
    let mut labels = shard.labels().to_vec();
    let per = c * h * w;
    let data = images.data_mut();
    for &i in &chosen {
        for ch in 0..c {
            for y in 0..t {
                for x in 0..t {
                    data[i * per + ch * h * w + y * w + x] = spec.trigger_value;
                }
            }
        }
        labels[i] = spec.target_class;
    }
    Ok((Dataset::new(images, labels, shard.classes())?, chosen))
}

/// Per-client epoch-shuffled batch order over a shard.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    rng: RngStream,
}

impl BatchSampler {
    pub fn new(n: usize, rng: RngStream) -> Result<Self> {
        if n == 0 {
            return Err(invalid("cannot sample batches from an empty shard"));
        }
        Ok(Self {
            n,
            order: Vec::new(),
            pos: 0,
            rng,
        })
    }

    /// Next `min(b, remaining)` indices; reshuffles at each epoch boundary.
    pub fn next_batch(&mut self, b: usize) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order = (0..self.n).collect();
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let end = (self.pos + b.max(1)).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}
