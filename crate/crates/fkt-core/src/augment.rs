//! Stochastic view generation for contrastive training plus the deterministic
//! evaluation transform.
//!
//! Each sample draws its randomness from a stream keyed by (seed, sample
//! index, view), so results are independent of worker count and batch
//! processing order.

use ndarray::{Array3, Array4, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{FktError, Result};
use crate::par;
use crate::rng::StreamRng;

const MIN_AUGMENT_SIDE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Area fraction range for the random resized crop.
    pub crop_scale_range: (f64, f64),
    pub flip_probability: f64,
    pub jitter_strength: f64,
    pub jitter_probability: f64,
    pub grayscale_probability: f64,
    pub blur_enabled: bool,
    pub blur_probability: f64,
    /// Square output side in pixels.
    pub output_size: usize,
    pub normalization_mean: [f64; 3],
    pub normalization_std: [f64; 3],
}

impl AugmentPolicy {
    /// Contrastive-training defaults, scaled for the input size: small images
    /// crop less aggressively and skip blur.
    pub fn contrastive_default(output_size: usize) -> Self {
        let small = output_size < 96;
        AugmentPolicy {
            crop_scale_range: if small { (0.2, 1.0) } else { (0.08, 1.0) },
            flip_probability: 0.5,
            jitter_strength: 0.5,
            jitter_probability: 0.8,
            grayscale_probability: 0.2,
            blur_enabled: !small,
            blur_probability: 0.5,
            output_size,
            normalization_mean: [0.5; 3],
            normalization_std: [0.5; 3],
        }
    }

    /// Flip+crop only; used for plain supervised stages.
    pub fn light(output_size: usize) -> Self {
        AugmentPolicy {
            crop_scale_range: (0.64, 1.0),
            flip_probability: 0.5,
            jitter_strength: 0.0,
            jitter_probability: 0.0,
            grayscale_probability: 0.0,
            blur_enabled: false,
            blur_probability: 0.0,
            output_size,
            normalization_mean: [0.5; 3],
            normalization_std: [0.5; 3],
        }
    }

    /// No-op policy: resize+normalize is the whole transform.
    pub fn identity(output_size: usize) -> Self {
        AugmentPolicy {
            crop_scale_range: (1.0, 1.0),
            flip_probability: 0.0,
            jitter_strength: 0.0,
            jitter_probability: 0.0,
            grayscale_probability: 0.0,
            blur_enabled: false,
            blur_probability: 0.0,
            output_size,
            normalization_mean: [0.0; 3],
            normalization_std: [1.0; 3],
        }
    }

    /// Derive the flip+crop-only variant of this policy, keeping geometry and
    /// normalization untouched.
    pub fn to_light(&self) -> Self {
        AugmentPolicy {
            jitter_strength: 0.0,
            jitter_probability: 0.0,
            grayscale_probability: 0.0,
            blur_enabled: false,
            blur_probability: 0.0,
            crop_scale_range: (self.crop_scale_range.0.max(0.64), 1.0),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("flip_probability", self.flip_probability),
            ("jitter_probability", self.jitter_probability),
            ("grayscale_probability", self.grayscale_probability),
            ("blur_probability", self.blur_probability),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(FktError::InvalidConfig(format!(
                    "augment.{name}: must be in [0,1], got {p}"
                )));
            }
        }
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(FktError::InvalidConfig(format!(
                "augment.crop_scale_range: need 0 < low <= high <= 1, got ({lo}, {hi})"
            )));
        }
        if self.jitter_strength < 0.0 {
            return Err(FktError::InvalidConfig(format!(
                "augment.jitter_strength: must be >= 0, got {}",
                self.jitter_strength
            )));
        }
        if self.output_size < 8 {
            return Err(FktError::InvalidConfig(format!(
                "augment.output_size: must be >= 8, got {}",
                self.output_size
            )));
        }
        for c in 0..3 {
            if self.normalization_std[c] == 0.0 {
                return Err(FktError::InvalidConfig(format!(
                    "augment.normalization_std[{c}]: must be nonzero"
                )));
            }
        }
        Ok(())
    }
}

/// Two independently augmented views of one labeled batch.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub view_a: Array4<f64>,
    pub view_b: Array4<f64>,
    pub labels: Vec<usize>,
}

/// Bilinear sample of a crop window resized to (size x size), channels first.
/// half-pixel centers, clamped at the window edges.
fn resize_window(
    img: &ArrayView3<'_, f64>,
    y0: usize,
    x0: usize,
    crop_h: usize,
    crop_w: usize,
    size: usize,
) -> Array3<f64> {
    let mut out = Array3::<f64>::zeros((3, size, size));
    let sy = crop_h as f64 / size as f64;
    let sx = crop_w as f64 / size as f64;
    for dy in 0..size {
        let fy = ((dy as f64 + 0.5) * sy - 0.5).clamp(0.0, (crop_h - 1) as f64);
        let y_lo = fy.floor() as usize;
        let y_hi = (y_lo + 1).min(crop_h - 1);
        let wy = fy - y_lo as f64;
        for dx in 0..size {
            let fx = ((dx as f64 + 0.5) * sx - 0.5).clamp(0.0, (crop_w - 1) as f64);
            let x_lo = fx.floor() as usize;
            let x_hi = (x_lo + 1).min(crop_w - 1);
            let wx = fx - x_lo as f64;
            for c in 0..3 {
                let tl = img[[c, y0 + y_lo, x0 + x_lo]];
                let tr = img[[c, y0 + y_lo, x0 + x_hi]];
                let bl = img[[c, y0 + y_hi, x0 + x_lo]];
                let br = img[[c, y0 + y_hi, x0 + x_hi]];
                let top = tl + (tr - tl) * wx;
                let bot = bl + (br - bl) * wx;
                out[[c, dy, dx]] = top + (bot - top) * wy;
            }
        }
    }
    out
}

/// Bilinear resize of a whole (3, H, W) image to (3, size, size).
pub fn resize_bilinear(img: &ArrayView3<'_, f64>, size: usize) -> Array3<f64> {
    let (_, h, w) = img.dim();
    resize_window(img, 0, 0, h, w, size)
}

/// Sample a crop window: area fraction from the policy range, aspect ratio in
/// [3/4, 4/3], 10 attempts then full-image fallback.
fn sample_crop(
    rng: &mut StreamRng,
    h: usize,
    w: usize,
    scale: (f64, f64),
) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let log_ratio = (0.75f64.ln(), (4.0 / 3.0f64).ln());
    for _ in 0..10 {
        let target = area * rng.uniform_in(scale.0, scale.1);
        let aspect = rng.uniform_in(log_ratio.0, log_ratio.1).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let y0 = rng.below(h - ch + 1);
            let x0 = rng.below(w - cw + 1);
            return (y0, x0, ch, cw);
        }
    }
    (0, 0, h, w)
}

fn grayscale_pixel(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Brightness, contrast, saturation as multiplicative factors; hue as a
/// rotation of the chroma plane (YIQ). Applied in that fixed order, each step
/// clamped back to [0,1].
fn color_jitter(img: &mut Array3<f64>, rng: &mut StreamRng, strength: f64) {
    let s = strength;
    let size = img.dim().1 * img.dim().2;

    let brightness = rng.uniform_in((1.0 - 0.8 * s).max(0.0), 1.0 + 0.8 * s);
    img.mapv_inplace(|v| clamp01(v * brightness));

    let contrast = rng.uniform_in((1.0 - 0.8 * s).max(0.0), 1.0 + 0.8 * s);
    let mut mean_gray = 0.0;
    for y in 0..img.dim().1 {
        for x in 0..img.dim().2 {
            mean_gray += grayscale_pixel(img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]);
        }
    }
    mean_gray /= size as f64;
    img.mapv_inplace(|v| clamp01(mean_gray + (v - mean_gray) * contrast));

    let saturation = rng.uniform_in((1.0 - 0.8 * s).max(0.0), 1.0 + 0.8 * s);
    for y in 0..img.dim().1 {
        for x in 0..img.dim().2 {
            let gray = grayscale_pixel(img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]);
            for c in 0..3 {
                img[[c, y, x]] = clamp01(gray + (img[[c, y, x]] - gray) * saturation);
            }
        }
    }

    // Hue shift in turns, matching torchvision's [-0.5, 0.5] convention.
    let hue = rng.uniform_in(-0.2 * s, 0.2 * s);
    let angle = hue * 2.0 * std::f64::consts::PI;
    let (sin, cos) = (angle.sin(), angle.cos());
    for y in 0..img.dim().1 {
        for x in 0..img.dim().2 {
            let (r, g, b) = (img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]);
            let yy = 0.299 * r + 0.587 * g + 0.114 * b;
            let i = 0.595716 * r - 0.274453 * g - 0.321263 * b;
            let q = 0.211456 * r - 0.522591 * g + 0.311135 * b;
            let i2 = i * cos - q * sin;
            let q2 = i * sin + q * cos;
            img[[0, y, x]] = clamp01(yy + 0.9563 * i2 + 0.6210 * q2);
            img[[1, y, x]] = clamp01(yy - 0.2721 * i2 - 0.6474 * q2);
            img[[2, y, x]] = clamp01(yy - 1.1070 * i2 + 1.7046 * q2);
        }
    }
}

/// Separable gaussian blur with clamped edges; kernel radius covers 2.5 sigma.
fn gaussian_blur(img: &mut Array3<f64>, sigma: f64) {
    let (c, h, w) = img.dim();
    let radius = ((2.5 * sigma).ceil() as usize).max(1);
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    let mut sum = 0.0;
    for i in 0..=2 * radius {
        let d = i as f64 - radius as f64;
        let v = (-d * d / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    kernel.iter_mut().for_each(|v| *v /= sum);

    let mut tmp = img.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let sx = (x as isize + i as isize - radius as isize).clamp(0, w as isize - 1);
                    acc += k * img[[ch, y, sx as usize]];
                }
                tmp[[ch, y, x]] = acc;
            }
        }
    }
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let sy = (y as isize + i as isize - radius as isize).clamp(0, h as isize - 1);
                    acc += k * tmp[[ch, sy as usize, x]];
                }
                img[[ch, y, x]] = acc;
            }
        }
    }
}

fn normalize(img: &mut Array3<f64>, policy: &AugmentPolicy) {
    for c in 0..3 {
        let mean = policy.normalization_mean[c];
        let std = policy.normalization_std[c];
        for v in img.index_axis_mut(ndarray::Axis(0), c).iter_mut() {
            *v = (*v - mean) / std;
        }
    }
}

/// One full augmentation chain for a single image.
fn augment_one(img: &ArrayView3<'_, f64>, policy: &AugmentPolicy, rng: &mut StreamRng) -> Array3<f64> {
    let (_, h, w) = img.dim();
    let (y0, x0, ch, cw) = sample_crop(rng, h, w, policy.crop_scale_range);
    let mut out = resize_window(img, y0, x0, ch, cw, policy.output_size);

    if rng.uniform() < policy.flip_probability {
        let size = policy.output_size;
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size / 2 {
                    let tmp = out[[c, y, x]];
                    out[[c, y, x]] = out[[c, y, size - 1 - x]];
                    out[[c, y, size - 1 - x]] = tmp;
                }
            }
        }
    }

    if policy.jitter_strength > 0.0 && rng.uniform() < policy.jitter_probability {
        color_jitter(&mut out, rng, policy.jitter_strength);
    }

    if rng.uniform() < policy.grayscale_probability {
        let size = policy.output_size;
        for y in 0..size {
            for x in 0..size {
                let g = grayscale_pixel(out[[0, y, x]], out[[1, y, x]], out[[2, y, x]]);
                out[[0, y, x]] = g;
                out[[1, y, x]] = g;
                out[[2, y, x]] = g;
            }
        }
    }

    if policy.blur_enabled && rng.uniform() < policy.blur_probability {
        let sigma = rng.uniform_in(0.1, 2.0);
        gaussian_blur(&mut out, sigma);
    }

    normalize(&mut out, policy);
    out
}

fn check_batch(batch: &ImageBatch, policy: &AugmentPolicy) -> Result<()> {
    policy.validate()?;
    let (n, c, h, w) = batch.pixels.dim();
    if n == 0 {
        return Err(FktError::InvalidInput("empty batch".into()));
    }
    if c != 3 {
        return Err(FktError::InvalidInput(format!("expected 3 channels, got {c}")));
    }
    if h < MIN_AUGMENT_SIDE || w < MIN_AUGMENT_SIDE {
        return Err(FktError::InvalidInput(format!(
            "image {h}x{w} smaller than minimum crop size {MIN_AUGMENT_SIDE}"
        )));
    }
    Ok(())
}

/// Two independently augmented views per image; labels carried through.
/// Deterministic given (seed, batch order).
pub fn make_view_pair(
    batch: &ImageBatch,
    policy: &AugmentPolicy,
    rng_seed: u64,
) -> Result<ViewPair> {
    check_batch(batch, policy)?;
    let n = batch.pixels.dim().0;
    let size = policy.output_size;
    let mut view_a = Array4::<f64>::zeros((n, 3, size, size));
    let mut view_b = Array4::<f64>::zeros((n, 3, size, size));

    let pixels = &batch.pixels;
    let run = |view: &mut Array4<f64>, tag: u64| {
        par::for_each_chunk_mut(view.as_slice_mut().unwrap(), 3 * size * size, |i, slot| {
            let img = pixels.index_axis(ndarray::Axis(0), i);
            let mut rng = StreamRng::from_key(&[rng_seed, i as u64, tag]);
            let out = augment_one(&img, policy, &mut rng);
            slot.copy_from_slice(out.as_slice().unwrap());
        });
    };
    run(&mut view_a, 0);
    run(&mut view_b, 1);

    Ok(ViewPair {
        view_a,
        view_b,
        labels: batch.labels.clone(),
    })
}

/// A single augmented view per image (supervised training path).
pub fn augment_batch(
    batch: &ImageBatch,
    policy: &AugmentPolicy,
    rng_seed: u64,
) -> Result<ImageBatch> {
    check_batch(batch, policy)?;
    let n = batch.pixels.dim().0;
    let size = policy.output_size;
    let mut out = Array4::<f64>::zeros((n, 3, size, size));
    let pixels = &batch.pixels;
    par::for_each_chunk_mut(out.as_slice_mut().unwrap(), 3 * size * size, |i, slot| {
        let img = pixels.index_axis(ndarray::Axis(0), i);
        let mut rng = StreamRng::from_key(&[rng_seed, i as u64, 0]);
        let img = augment_one(&img, policy, &mut rng);
        slot.copy_from_slice(img.as_slice().unwrap());
    });
    Ok(ImageBatch {
        pixels: out,
        labels: batch.labels.clone(),
        sample_ids: batch.sample_ids.clone(),
    })
}

/// Deterministic resize + normalize, no stochastic steps. Normalization is
/// identical to the training transform's.
pub fn eval_transform(batch: &ImageBatch, policy: &AugmentPolicy) -> Result<ImageBatch> {
    check_batch(batch, policy)?;
    let n = batch.pixels.dim().0;
    let (_, _, h, w) = batch.pixels.dim();
    let size = policy.output_size;
    let mut out = Array4::<f64>::zeros((n, 3, size, size));
    let pixels = &batch.pixels;
    par::for_each_chunk_mut(out.as_slice_mut().unwrap(), 3 * size * size, |i, slot| {
        let img = pixels.index_axis(ndarray::Axis(0), i);
        let mut resized = resize_window(&img, 0, 0, h, w, size);
        normalize(&mut resized, policy);
        slot.copy_from_slice(resized.as_slice().unwrap());
    });
    Ok(ImageBatch {
        pixels: out,
        labels: batch.labels.clone(),
        sample_ids: batch.sample_ids.clone(),
    })
}
