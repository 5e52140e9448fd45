//! Image-quality metrics for reconstruction reports.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const SSIM_WINDOW: usize = 7;
pub const PSNR_FLOOR_MSE: f64 = 1e-10;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

pub fn psnr(mse: f64) -> f64 {
    -10.0 * mse.max(PSNR_FLOOR_MSE).log10()
}

/// A single-image view: `channels x height x width`, row-major.
#[derive(Debug, Clone, Copy)]
pub struct ImageView<'a> {
    pub data: &'a [f32],
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl<'a> ImageView<'a> {
    pub fn new(data: &'a [f32], channels: usize, height: usize, width: usize) -> Result<Self> {
        if data.len() != channels * height * width || data.is_empty() {
            return Err(invalid(format!(
                "{} values do not form a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            data,
            channels,
            height,
            width,
        })
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x] as f64
    }
}

/// Mean SSIM over all `win x win` windows (uniform weights, sample
/// covariance) of the rectangle `[y0, y1) x [x0, x1)`, averaged over channels.
/// The window shrinks to fit rectangles smaller than [`SSIM_WINDOW`].
fn ssim_region(a: &ImageView, b: &ImageView, y0: usize, y1: usize, x0: usize, x1: usize) -> f64 {
    let (h, w) = (y1 - y0, x1 - x0);
    let wy = SSIM_WINDOW.min(h);
    let wx = SSIM_WINDOW.min(w);
    let n = (wy * wx) as f64;
    let cov_norm = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..a.channels {
        for oy in y0..=y1 - wy {
            for ox in x0..=x1 - wx {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in oy..oy + wy {
                    for x in ox..ox + wx {
                        let (p, q) = (a.at(c, y, x), b.at(c, y, x));
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = cov_norm * (saa / n - ma * ma);
                let vb = cov_norm * (sbb / n - mb * mb);
                let cab = cov_norm * (sab / n - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cab + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

pub fn ssim(a: &ImageView, b: &ImageView) -> Result<f64> {
    same_shape(a, b)?;
    Ok(ssim_region(a, b, 0, a.height, 0, a.width))
}

fn same_shape(a: &ImageView, b: &ImageView) -> Result<()> {
    if (a.channels, a.height, a.width) != (b.channels, b.height, b.width) {
        return Err(invalid("images differ in shape"));
    }
    Ok(())
}

/// Metrics for one reference/reconstruction pair. Foreground variants are
/// `None` when no reference pixel exceeds the mask threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub mse_fg: Option<f64>,
    pub psnr_fg: Option<f64>,
    pub ssim_fg: Option<f64>,
}

/// MSE/PSNR/SSIM of `test` against `reference`; with a threshold, also the
/// foreground variants over pixels where any reference channel exceeds it
/// (SSIM on the mask's bounding box).
pub fn image_metrics(reference: &ImageView, test: &ImageView, mask_threshold: Option<f32>) -> Result<ImageMetrics> {
    same_shape(reference, test)?;
    let mse = reference
        .data
        .iter()
        .zip(test.data)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / reference.data.len() as f64;
    let mut out = ImageMetrics {
        mse,
        psnr: psnr(mse),
        ssim: ssim_region(reference, test, 0, reference.height, 0, reference.width),
        mse_fg: None,
        psnr_fg: None,
        ssim_fg: None,
    };
    let Some(thr) = mask_threshold else {
        return Ok(out);
    };
    let (h, w, ch) = (reference.height, reference.width, reference.channels);
    let mut sq = 0.0;
    let mut n = 0usize;
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
    for y in 0..h {
        for x in 0..w {
            if (0..ch).any(|c| reference.at(c, y, x) > thr as f64) {
                for c in 0..ch {
                    sq += (reference.at(c, y, x) - test.at(c, y, x)).powi(2);
                }
                n += ch;
                y0 = y0.min(y);
                y1 = y1.max(y + 1);
                x0 = x0.min(x);
                x1 = x1.max(x + 1);
            }
        }
    }
    if n > 0 {
        let m = sq / n as f64;
        out.mse_fg = Some(m);
        out.psnr_fg = Some(psnr(m));
        out.ssim_fg = Some(ssim_region(reference, test, y0, y1, x0, x1));
    }
    Ok(out)
}

/// Ratios of a method's mean metrics to a baseline's.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineRatios {
    pub mse: f64,
    pub ssim: f64,
    pub mse_fg: Option<f64>,
    pub ssim_fg: Option<f64>,
}

/// Per-image metrics and their means. Results are directional: the
/// attacks are small stand-ins, not state-of-the-art inversions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub rows: Vec<ImageMetrics>,
    pub mean: ImageMetrics,
    pub ssim_window: usize,
    pub mask_threshold: Option<f32>,
    pub ratio_vs_baseline: Option<BaselineRatios>,
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl ReconReport {
    /// Metrics for a batch of flattened `[C, H, W]` images.
    pub fn from_batch(
        reference: &[f32],
        test: &[f32],
        shape: [usize; 3],
        mask_threshold: Option<f32>,
    ) -> Result<Self> {
        let per: usize = shape.iter().product();
        if reference.len() != test.len() || reference.is_empty() || reference.len() % per != 0 {
            return Err(invalid("reconstruction batch does not match the reference batch"));
        }
        let rows = reference
            .chunks(per)
            .zip(test.chunks(per))
            .map(|(a, b)| {
                image_metrics(
                    &ImageView::new(a, shape[0], shape[1], shape[2])?,
                    &ImageView::new(b, shape[0], shape[1], shape[2])?,
                    mask_threshold,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_rows(rows, mask_threshold))
    }

    pub fn from_rows(rows: Vec<ImageMetrics>, mask_threshold: Option<f32>) -> Self {
        let n = rows.len().max(1) as f64;
        let mse = rows.iter().map(|r| r.mse).sum::<f64>() / n;
        let mse_fg = mean_opt(rows.iter().map(|r| r.mse_fg));
        let mean = ImageMetrics {
            mse,
            psnr: psnr(mse),
            ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            mse_fg,
            psnr_fg: mse_fg.map(psnr),
            ssim_fg: mean_opt(rows.iter().map(|r| r.ssim_fg)),
        };
        Self {
            rows,
            mean,
            ssim_window: SSIM_WINDOW,
            mask_threshold,
            ratio_vs_baseline: None,
        }
    }

    pub fn with_baseline(mut self, baseline: &ReconReport) -> Self {
        let div = |a: Option<f64>, b: Option<f64>| Some(a? / b?);
        self.ratio_vs_baseline = Some(BaselineRatios {
            mse: self.mean.mse / baseline.mean.mse,
            ssim: self.mean.ssim / baseline.mean.ssim,
            mse_fg: div(self.mean.mse_fg, baseline.mean.mse_fg),
            ssim_fg: div(self.mean.ssim_fg, baseline.mean.ssim_fg),
        });
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per image; undefined foreground values are empty cells.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut s = String::from("image,mse,psnr,ssim,mse_fg,psnr_fg,ssim_fg\n");
        for (i, r) in self.rows.iter().enumerate() {
            s.push_str(&format!(
                "{i},{:.6},{:.6},{:.6},{},{},{}\n",
                r.mse,
                r.psnr,
                r.ssim,
                cell(r.mse_fg),
                cell(r.psnr_fg),
                cell(r.ssim_fg)
            ));
        }
        s
    }
}
