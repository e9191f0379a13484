//! Classification metrics and class-activation-map rendering.

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::augment::{eval_transform, AugmentPolicy};
use crate::data::{ImageBatch, Split};
use crate::error::{FktError, Result};
use crate::model::Model;

/// Inputs smaller than this are too coarse for a meaningful activation map;
/// the CLI warns and skips them unless overridden.
pub const CAM_MIN_INPUT: usize = 64;

pub fn cam_suppressed(input_size: usize) -> bool {
    input_size < CAM_MIN_INPUT
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    /// confusion[true][predicted]
    pub confusion: Vec<Vec<u64>>,
    /// Classes with no true samples in the evaluated split.
    pub zero_true_support: Vec<usize>,
    /// Classes never predicted.
    pub zero_predicted: Vec<usize>,
    pub num_samples: usize,
}

/// Build a report from raw (prediction, label) pairs.
pub fn metrics_from_pairs(
    preds: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<MetricsReport> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(FktError::InvalidInput(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &l) in preds.iter().zip(labels.iter()) {
        if p >= num_classes || l >= num_classes {
            return Err(FktError::InvalidInput(format!(
                "class id out of range: pred {p}, label {l}, classes {num_classes}"
            )));
        }
        confusion[l][p] += 1;
    }

    let n = preds.len() as f64;
    let trace: u64 = (0..num_classes).map(|c| confusion[c][c]).sum();
    let accuracy = trace as f64 / n;

    let mut per_class_precision = vec![0.0; num_classes];
    let mut per_class_recall = vec![0.0; num_classes];
    let mut zero_true_support = Vec::new();
    let mut zero_predicted = Vec::new();
    let mut weighted_precision = 0.0;
    let mut weighted_recall = 0.0;
    for c in 0..num_classes {
        let true_count: u64 = confusion[c].iter().sum();
        let pred_count: u64 = (0..num_classes).map(|r| confusion[r][c]).sum();
        let tp = confusion[c][c];
        if pred_count == 0 {
            zero_predicted.push(c);
        } else {
            per_class_precision[c] = tp as f64 / pred_count as f64;
        }
        if true_count == 0 {
            zero_true_support.push(c);
        } else {
            per_class_recall[c] = tp as f64 / true_count as f64;
        }
        weighted_precision += per_class_precision[c] * true_count as f64 / n;
        weighted_recall += per_class_recall[c] * true_count as f64 / n;
    }
    let macro_precision = per_class_precision.iter().sum::<f64>() / num_classes as f64;
    let macro_recall = per_class_recall.iter().sum::<f64>() / num_classes as f64;

    Ok(MetricsReport {
        accuracy,
        macro_precision,
        macro_recall,
        weighted_precision,
        weighted_recall,
        per_class_precision,
        per_class_recall,
        confusion,
        zero_true_support,
        zero_predicted,
        num_samples: preds.len(),
    })
}

/// Argmax with ties resolved to the lowest class id.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Run the classifier over the clean test split and accumulate metrics.
pub fn evaluate(
    model: &mut Model,
    split: &Split,
    policy: &AugmentPolicy,
    batch_size: usize,
) -> Result<MetricsReport> {
    if split.is_empty() {
        return Err(FktError::InvalidInput("empty test split".into()));
    }
    let mut preds = Vec::with_capacity(split.len());
    let mut labels = Vec::with_capacity(split.len());
    for batch in crate::data::batch_iterator(split, batch_size, 0, 0, false)? {
        let clean = eval_transform(&batch, policy)?;
        let logits = model.forward_classify(&clean, false)?;
        for (i, &label) in clean.labels.iter().enumerate() {
            preds.push(argmax_row(logits.row(i).as_slice().unwrap()));
            labels.push(label);
        }
    }
    metrics_from_pairs(&preds, &labels, model.cfg.num_classes)
}

/// Aggregate scalar metrics over trials: mean and population std.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// Grad-CAM
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CamMap {
    /// (H, W) heatmap in [0,1], max-normalized unless degenerate.
    pub heatmap: Array2<f64>,
    pub class_id: usize,
    pub sample_id: String,
    /// Set when the pre-normalization map was all zeros (e.g. a dead head).
    pub degenerate: bool,
}

fn upsample_bilinear(map: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(dy, dx)| {
        let fy = ((dy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((dx as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let wy = fy - y0 as f64;
        let wx = fx - x0 as f64;
        let top = map[[y0, x0]] + (map[[y0, x1]] - map[[y0, x0]]) * wx;
        let bot = map[[y1, x0]] + (map[[y1, x1]] - map[[y1, x0]]) * wx;
        top + (bot - top) * wy
    })
}

/// Channel-weighted sum of the last conv block's activations, weighted by the
/// spatially pooled gradient of the target logit, rectified, upsampled to the
/// input size and max-normalized.
pub fn grad_cam(model: &mut Model, image: &ImageBatch, target_class: usize) -> Result<CamMap> {
    let (n, _, in_h, in_w) = image.pixels.dim();
    if n != 1 {
        return Err(FktError::InvalidInput(format!(
            "grad_cam expects a single-image batch, got {n}"
        )));
    }
    let (act, grad) = model.cam_activations(&image.pixels, target_class)?;
    let (_, channels, h, w) = act.dim();

    // alpha_k = spatial mean of d(logit)/d(act_k)
    let mut low = Array2::<f64>::zeros((h, w));
    let mut any_grad = false;
    for k in 0..channels {
        let mut alpha = 0.0;
        for y in 0..h {
            for x in 0..w {
                alpha += grad[[0, k, y, x]];
            }
        }
        alpha /= (h * w) as f64;
        if alpha != 0.0 {
            any_grad = true;
        }
        for y in 0..h {
            for x in 0..w {
                low[[y, x]] += alpha * act[[0, k, y, x]];
            }
        }
    }
    low.mapv_inplace(|v| v.max(0.0));
    let mut heatmap = upsample_bilinear(&low, in_h, in_w);
    let max = heatmap.iter().cloned().fold(0.0f64, f64::max);
    let degenerate = !any_grad || max <= 0.0;
    if degenerate {
        heatmap.fill(0.0);
    } else {
        heatmap.mapv_inplace(|v| (v / max).clamp(0.0, 1.0));
    }
    Ok(CamMap {
        heatmap,
        class_id: target_class,
        sample_id: image.sample_ids[0].clone(),
        degenerate,
    })
}

/// Fixed blue-to-red colormap; index 0 is deep blue (0, 0, 0.5).
pub fn cam_colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [
        (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0),
        (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0),
        (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0),
    ]
}

/// Alpha-blend the colormapped heatmap over the original pixels (weight 0.5)
/// and return the RGB bytes, row-major.
pub fn cam_overlay_pixels(cam: &CamMap, original: &Array3<f64>) -> Result<Vec<u8>> {
    let (c, h, w) = original.dim();
    if c != 3 || cam.heatmap.dim() != (h, w) {
        return Err(FktError::InvalidInput(format!(
            "heatmap {:?} does not match image ({h}, {w})",
            cam.heatmap.dim()
        )));
    }
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let color = cam_colormap(cam.heatmap[[y, x]]);
            for ch in 0..3 {
                let blended = 0.5 * original[[ch, y, x]] + 0.5 * color[ch];
                out.push((blended.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

/// Write the overlay as a PNG. Deterministic bytes for identical inputs.
pub fn render_cam_overlay(cam: &CamMap, original: &Array3<f64>, path: &Path) -> Result<()> {
    let (_, h, w) = original.dim();
    let pixels = cam_overlay_pixels(cam, original)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| FktError::Persistence(format!("{}: {e}", dir.display())))?;
    }
    let img: image::RgbImage =
        image::ImageBuffer::from_raw(w as u32, h as u32, pixels).expect("sized buffer");
    img.save(path)
        .map_err(|e| FktError::Persistence(format!("{}: {e}", path.display())))?;
    Ok(())
}
