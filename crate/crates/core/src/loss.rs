//! Photometric losses, mask regularisation and image metrics.
//!
//! Every loss returns its value together with the gradient image with
//! respect to the prediction (or the alpha map for the mask term).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 0.8,
            ssim: 0.2,
            mask: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.ssim, self.mask];
        if all.iter().any(|w| !(*w >= 0.0)) || all.iter().all(|&w| w == 0.0) {
            return Err(Error::Config(
                "loss weights must be non-negative with at least one positive".into(),
            ));
        }
        Ok(())
    }
}

/// Mean absolute error and its subgradient.
pub fn l1_loss(pred: &Image, gt: &Image) -> Result<(f64, Image)> {
    pred.check_shape(gt, "l1")?;
    let n = pred.data.len() as f64;
    let mut grad = Image::new(pred.width, pred.height, pred.channels);
    let mut sum = 0.0;
    for ((g, p), t) in grad.data.iter_mut().zip(&pred.data).zip(&gt.data) {
        let d = p - t;
        sum += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((sum / n, grad))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (k, v) in w.iter_mut().enumerate() {
        let d = k as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Valid-mode separable correlation of a `w`×`h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&src[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|j| k[j] * rows[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a valid-size map back to `w`×`h`.
fn filter_valid_adjoint(map: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for j in 0..SSIM_WINDOW {
                rows[(y + j) * ow + x] += k[j] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for j in 0..SSIM_WINDOW {
                out[y * w + x + j] += k[j] * v;
            }
        }
    }
    out
}

fn channel_plane(img: &Image, c: usize) -> Vec<f64> {
    (0..img.pixel_count()).map(|p| img.data[p * img.channels + c]).collect()
}

/// Gaussian-windowed SSIM averaged over valid window positions and channels,
/// with its gradient with respect to `pred`.
pub fn ssim(pred: &Image, gt: &Image) -> Result<(f64, Image)> {
    pred.check_shape(gt, "ssim")?;
    if pred.width < SSIM_WINDOW || pred.height < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}"
        )));
    }
    let (w, h, ch) = (pred.width, pred.height, pred.channels);
    let k = gaussian_window();
    let positions = ((w + 1 - SSIM_WINDOW) * (h + 1 - SSIM_WINDOW)) as f64;
    let norm = 1.0 / (positions * ch as f64);
    let mut total = 0.0;
    let mut grad = Image::new(w, h, ch);
    for c in 0..ch {
        let x = channel_plane(pred, c);
        let y = channel_plane(gt, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mx = filter_valid(&x, w, h, &k);
        let my = filter_valid(&y, w, h, &k);
        let exx = filter_valid(&xx, w, h, &k);
        let eyy = filter_valid(&yy, w, h, &k);
        let exy = filter_valid(&xy, w, h, &k);
        let n = mx.len();
        let mut g_mu = vec![0.0; n];
        let mut g_exx = vec![0.0; n];
        let mut g_exy = vec![0.0; n];
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let sxx = exx[i] - ux * ux;
            let syy = eyy[i] - uy * uy;
            let sxy = exy[i] - ux * uy;
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * sxy + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = sxx + syy + SSIM_C2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;
            g_mu[i] = norm * s * (2.0 * uy / a1 - 2.0 * uy / a2 - 2.0 * ux / b1 + 2.0 * ux / b2);
            g_exy[i] = norm * s * 2.0 / a2;
            g_exx[i] = -norm * s / b2;
        }
        let d_mu = filter_valid_adjoint(&g_mu, w, h, &k);
        let d_exx = filter_valid_adjoint(&g_exx, w, h, &k);
        let d_exy = filter_valid_adjoint(&g_exy, w, h, &k);
        for p in 0..w * h {
            grad.data[p * ch + c] = d_mu[p] + 2.0 * x[p] * d_exx[p] + y[p] * d_exy[p];
        }
    }
    Ok((total * norm, grad))
}

/// Mean alpha over pixels outside the mask (mask value below 0.5), with its
/// gradient on alpha. Zero when the mask covers the whole image.
pub fn mask_regularization(alpha: &Image, mask: &Image) -> Result<(f64, Image)> {
    alpha.check_shape(mask, "mask regularisation")?;
    let outside = mask.data.iter().filter(|&&m| m < 0.5).count();
    let mut grad = Image::new(alpha.width, alpha.height, alpha.channels);
    if outside == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / outside as f64;
    let mut sum = 0.0;
    for ((g, a), m) in grad.data.iter_mut().zip(&alpha.data).zip(&mask.data) {
        if *m < 0.5 {
            sum += a;
            *g = inv;
        }
    }
    Ok((sum * inv, grad))
}

pub fn mse(pred: &Image, gt: &Image) -> Result<f64> {
    pred.check_shape(gt, "mse")?;
    let s: f64 = pred.data.iter().zip(&gt.data).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.data.len() as f64)
}

/// Peak signal-to-noise ratio for unit-range images, capped at 99 dB.
pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    let m = mse(pred, gt)?;
    Ok(if m <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
    })
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: f64,
    pub l1: f64,
    pub ssim: f64,
    pub mask: f64,
    pub d_rgb: Image,
    pub d_alpha: Image,
}

/// `w.l1·L1 + w.ssim·(1 − SSIM) + w.mask·mask`, with gradients on the
/// rendered colour and alpha. Terms with zero weight are not evaluated.
pub fn total_loss(pred: &Image, alpha: &Image, gt: &Image, mask: &Image, weights: &LossWeights) -> Result<LossOutput> {
    weights.validate()?;
    pred.check_shape(gt, "total loss")?;
    alpha.check_shape(mask, "total loss")?;
    let mut d_rgb = Image::new(pred.width, pred.height, pred.channels);
    let mut d_alpha = Image::new(alpha.width, alpha.height, 1);
    let mut out = LossOutput {
        total: 0.0,
        l1: 0.0,
        ssim: 1.0,
        mask: 0.0,
        d_rgb: Image::new(0, 0, 0),
        d_alpha: Image::new(0, 0, 0),
    };
    if weights.l1 > 0.0 {
        let (v, g) = l1_loss(pred, gt)?;
        out.l1 = v;
        out.total += weights.l1 * v;
        d_rgb.data.iter_mut().zip(&g.data).for_each(|(d, g)| *d += weights.l1 * g);
    }
    if weights.ssim > 0.0 {
        let (v, g) = ssim(pred, gt)?;
        out.ssim = v;
        out.total += weights.ssim * (1.0 - v);
        d_rgb.data.iter_mut().zip(&g.data).for_each(|(d, g)| *d -= weights.ssim * g);
    }
    if weights.mask > 0.0 {
        let (v, g) = mask_regularization(alpha, mask)?;
        out.mask = v;
        out.total += weights.mask * v;
        d_alpha.data.iter_mut().zip(&g.data).for_each(|(d, g)| *d += weights.mask * g);
    }
    out.d_rgb = d_rgb;
    out.d_alpha = d_alpha;
    Ok(out)
}

/// An externally provided image distance, such as a learned perceptual
/// metric. The engine ships no implementation.
pub trait PerceptualMetric: Send + Sync {
    fn name(&self) -> &str;
    fn distance(&self, a: &Image, b: &Image) -> Result<f64>;
}

#[derive(Default)]
pub struct MetricRegistry {
    metrics: Vec<Box<dyn PerceptualMetric>>,
}

impl MetricRegistry {
    pub fn register(&mut self, metric: Box<dyn PerceptualMetric>) {
        self.metrics.retain(|m| m.name() != metric.name());
        self.metrics.push(metric);
    }

    pub fn get(&self, name: &str) -> Option<&dyn PerceptualMetric> {
        self.metrics.iter().find(|m| m.name() == name).map(|m| m.as_ref())
    }

    pub fn names(&self) -> Vec<String> {
        self.metrics.iter().map(|m| m.name().to_string()).collect()
    }
}
