//! Foreground-map quality metrics: mean absolute error, structure measure,
//! enhanced-alignment measure, and the weighted F-beta measure, plus
//! dataset-level aggregation, grayscale PNG input, and CSV reports.
//!
//! Each metric follows its published definition with every constant fixed
//! here: the structure measure splits the region term at the ground-truth
//! centroid with a per-block SSIM and alpha = 0.5; the alignment measure
//! binarizes at twice the prediction mean (capped at 1); the weighted
//! F-measure uses a 7x7 sigma-5 Gaussian for error dependency, an
//! exponential distance decay with half-life 5 for background importance,
//! and beta^2 = 1.

mod edt;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::{invalid, Result};

pub use edt::distance_to_foreground;

/// A grayscale map with values in [0, 1], row-major.
#[derive(Debug, Clone)]
pub struct GrayMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl GrayMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<GrayMap> {
        if width == 0 || height == 0 {
            return Err(invalid("gray map must be non-empty"));
        }
        if values.len() != width * height {
            return Err(invalid(format!(
                "gray map {width}x{height} wants {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(invalid("gray map values must lie in [0, 1]"));
        }
        Ok(GrayMap { width, height, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.len() as f64
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Load an 8-bit grayscale PNG; values scale to [0, 1].
    pub fn from_png(path: &Path) -> Result<GrayMap> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let values = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
        GrayMap::new(w, h, values)
    }

    /// Load an 8-bit grayscale PNG as a binary mask: pixels above 127 are
    /// foreground.
    pub fn mask_from_png(path: &Path) -> Result<GrayMap> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let values = img
            .pixels()
            .map(|p| if p.0[0] > 127 { 1.0 } else { 0.0 })
            .collect();
        GrayMap::new(w, h, values)
    }
}

fn check_pair(op: &str, pred: &GrayMap, gt: &GrayMap) -> Result<()> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(invalid(format!(
            "{op}: prediction {}x{} does not match ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    Ok(())
}

fn check_binary_gt(op: &str, gt: &GrayMap) -> Result<()> {
    if !gt.is_binary() {
        return Err(invalid(format!("{op}: ground truth must be binary")));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(pred: &GrayMap, gt: &GrayMap) -> Result<f64> {
    check_pair("mae", pred, gt)?;
    Ok(pred
        .values
        .iter()
        .zip(&gt.values)
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

const SM_EPS: f64 = f64::EPSILON;

fn object_score(values: &[f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * mean / (mean * mean + 1.0 + std + SM_EPS)
}

/// Region SSIM of one block pair.
fn block_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let x = pred.iter().sum::<f64>() / n;
    let y = gt.iter().sum::<f64>() / n;
    let denom = n - 1.0 + SM_EPS;
    let sigma_x2 = pred.iter().map(|v| (v - x) * (v - x)).sum::<f64>() / denom;
    let sigma_y2 = gt.iter().map(|v| (v - y) * (v - y)).sum::<f64>() / denom;
    let sigma_xy = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p - x) * (g - y))
        .sum::<f64>()
        / denom;
    let alpha = 4.0 * x * y * sigma_xy;
    let beta = (x * x + y * y) * (sigma_x2 + sigma_y2);
    if alpha != 0.0 {
        alpha / (beta + SM_EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Structure measure: `0.5 * S_object + 0.5 * S_region`, clamped to [0, 1],
/// with the defined conventions for empty and full ground truths.
pub fn s_measure(pred: &GrayMap, gt: &GrayMap) -> Result<f64> {
    check_pair("s_measure", pred, gt)?;
    check_binary_gt("s_measure", gt)?;
    let y_mean = gt.mean();
    if y_mean == 0.0 {
        return Ok(1.0 - pred.mean());
    }
    if y_mean == 1.0 {
        return Ok(pred.mean());
    }

    // Object term: foreground similarity on gt pixels, background similarity
    // on the complement of the inverted prediction.
    let fg: Vec<f64> = pred
        .values
        .iter()
        .zip(&gt.values)
        .filter(|(_, &g)| g == 1.0)
        .map(|(&p, _)| p)
        .collect();
    let bg: Vec<f64> = pred
        .values
        .iter()
        .zip(&gt.values)
        .filter(|(_, &g)| g == 0.0)
        .map(|(&p, _)| 1.0 - p)
        .collect();
    let s_object = y_mean * object_score(&fg) + (1.0 - y_mean) * object_score(&bg);

    // Region term: split both maps at the ground-truth centroid (1-indexed,
    // rounded centre of mass) into four blocks; area-weighted block SSIM.
    let (w, h) = (gt.width, gt.height);
    let total: f64 = gt.values.iter().sum();
    let mut cx = 0.0;
    let mut cy = 0.0;
    for yy in 0..h {
        for xx in 0..w {
            if gt.values[yy * w + xx] == 1.0 {
                cx += (xx + 1) as f64;
                cy += (yy + 1) as f64;
            }
        }
    }
    let split_x = (cx / total).round() as usize; // columns 1..=split_x on the left
    let split_y = (cy / total).round() as usize;

    let block = |map: &GrayMap, x0: usize, x1: usize, y0: usize, y1: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
        for yy in y0..y1 {
            for xx in x0..x1 {
                out.push(map.values[yy * w + xx]);
            }
        }
        out
    };
    let area = (w * h) as f64;
    let blocks = [
        (0, split_x, 0, split_y),
        (split_x, w, 0, split_y),
        (0, split_x, split_y, h),
        (split_x, w, split_y, h),
    ];
    let mut s_region = 0.0;
    for &(x0, x1, y0, y1) in &blocks {
        if x1 == x0 || y1 == y0 {
            continue;
        }
        let weight = ((x1 - x0) * (y1 - y0)) as f64 / area;
        s_region += weight * block_ssim(&block(pred, x0, x1, y0, y1), &block(gt, x0, x1, y0, y1));
    }

    Ok((0.5 * s_object + 0.5 * s_region).clamp(0.0, 1.0))
}

/// Which scalar the enhanced-alignment measure reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EMeasureMode {
    /// Binarize at `min(2 * mean(pred), 1)`.
    #[default]
    Adaptive,
    /// Average over 256 evenly spaced thresholds.
    Mean,
    /// Maximum over 256 evenly spaced thresholds.
    Max,
}

fn e_measure_at_threshold(pred: &GrayMap, gt: &GrayMap, threshold: f64) -> f64 {
    // A non-positive threshold would binarize an all-zero map to all ones;
    // floor it at the smallest positive value instead.
    let threshold = if threshold <= 0.0 { f64::MIN_POSITIVE } else { threshold };
    let bin: Vec<f64> = pred
        .values
        .iter()
        .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
        .collect();
    let n = bin.len() as f64;
    let gt_mean = gt.mean();
    let enhanced_sum: f64 = if gt_mean == 0.0 {
        bin.iter().map(|&b| 1.0 - b).sum()
    } else if gt_mean == 1.0 {
        bin.iter().sum()
    } else {
        let bin_mean = bin.iter().sum::<f64>() / n;
        bin.iter()
            .zip(&gt.values)
            .map(|(&b, &g)| {
                let phi_p = b - bin_mean;
                let phi_g = g - gt_mean;
                let denom = phi_p * phi_p + phi_g * phi_g;
                let xi = if denom == 0.0 { 0.0 } else { 2.0 * phi_p * phi_g / denom };
                (xi + 1.0) * (xi + 1.0) / 4.0
            })
            .sum()
    };
    enhanced_sum / n
}

/// Enhanced-alignment measure.
pub fn e_measure(pred: &GrayMap, gt: &GrayMap, mode: EMeasureMode) -> Result<f64> {
    check_pair("e_measure", pred, gt)?;
    check_binary_gt("e_measure", gt)?;
    match mode {
        EMeasureMode::Adaptive => {
            let threshold = (2.0 * pred.mean()).min(1.0);
            Ok(e_measure_at_threshold(pred, gt, threshold))
        }
        EMeasureMode::Mean | EMeasureMode::Max => {
            let scores = (0..256).map(|i| e_measure_at_threshold(pred, gt, i as f64 / 255.0));
            Ok(match mode {
                EMeasureMode::Mean => scores.sum::<f64>() / 256.0,
                _ => scores.fold(f64::NEG_INFINITY, f64::max),
            })
        }
    }
}

fn gaussian_kernel_7x7_sigma5() -> [f64; 49] {
    let sigma = 5.0f64;
    let mut k = [0.0; 49];
    let mut sum = 0.0;
    for (i, item) in k.iter_mut().enumerate() {
        let y = (i / 7) as f64 - 3.0;
        let x = (i % 7) as f64 - 3.0;
        *item = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
        sum += *item;
    }
    for item in k.iter_mut() {
        *item /= sum;
    }
    k
}

/// Weighted F-beta measure with the degenerate (empty ground truth) case
/// flagged and reported as zero.
pub fn weighted_fbeta_flagged(pred: &GrayMap, gt: &GrayMap) -> Result<(f64, bool)> {
    check_pair("weighted_fbeta", pred, gt)?;
    check_binary_gt("weighted_fbeta", gt)?;
    let (w, h) = (gt.width, gt.height);
    let mask: Vec<bool> = gt.values.iter().map(|&v| v == 1.0).collect();
    let Some((dist, site)) = distance_to_foreground(&mask, w, h) else {
        return Ok((0.0, true));
    };

    // Absolute error, with background errors replaced by the error at the
    // nearest foreground pixel before blurring.
    let error: Vec<f64> = pred
        .values
        .iter()
        .zip(&gt.values)
        .map(|(p, g)| (p - g).abs())
        .collect();
    let mut edge_corrected = error.clone();
    for i in 0..error.len() {
        if !mask[i] {
            edge_corrected[i] = error[site[i]];
        }
    }

    // 7x7 sigma-5 Gaussian blur with zero padding.
    let kernel = gaussian_kernel_7x7_sigma5();
    let mut blurred = vec![0.0; error.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..7usize {
                let yy = y as isize + ky as isize - 3;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in 0..7usize {
                    let xx = x as isize + kx as isize - 3;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    acc += kernel[ky * 7 + kx] * edge_corrected[yy as usize * w + xx as usize];
                }
            }
            blurred[y * w + x] = acc;
        }
    }

    // On foreground keep the smaller of the raw and blurred error; weight
    // background errors by exponential decay in distance to the foreground.
    let decay = (0.5f64).ln() / 5.0;
    let mut weighted_error = vec![0.0; error.len()];
    for i in 0..error.len() {
        let e = if mask[i] && blurred[i] < error[i] { blurred[i] } else { error[i] };
        let importance = if mask[i] { 1.0 } else { 2.0 - (decay * dist[i]).exp() };
        weighted_error[i] = e * importance;
    }

    let gt_sum: f64 = gt.values.iter().sum();
    let fg_error: f64 = weighted_error
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(&e, _)| e)
        .sum();
    let bg_error: f64 = weighted_error
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| !m)
        .map(|(&e, _)| e)
        .sum();
    let tp_w = gt_sum - fg_error;
    let fp_w = bg_error;
    let recall = 1.0 - fg_error / gt_sum;
    let precision = tp_w / (SM_EPS + tp_w + fp_w);
    let value = 2.0 * recall * precision / (SM_EPS + recall + precision);
    Ok((value.clamp(0.0, 1.0), false))
}

pub fn weighted_fbeta(pred: &GrayMap, gt: &GrayMap) -> Result<f64> {
    Ok(weighted_fbeta_flagged(pred, gt)?.0)
}

/// One image's row in a report.
#[derive(Debug, Clone)]
pub struct ImageMetrics {
    pub id: String,
    pub mae: f64,
    pub s_measure: f64,
    pub e_measure: f64,
    pub wfm: f64,
}

/// Per-image metrics plus dataset means, ordered by image id.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    pub mean_mae: f64,
    pub mean_s: f64,
    pub mean_e: f64,
    pub mean_wfm: f64,
    pub count: usize,
}

/// Evaluate a set of (id, prediction, ground truth) pairs. Rows are sorted
/// by id; means are plain arithmetic means.
pub fn evaluate_dataset(
    pairs: &[(String, GrayMap, GrayMap)],
    e_mode: EMeasureMode,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(invalid("evaluate_dataset: no image pairs"));
    }
    let mut sorted: BTreeMap<&str, (&GrayMap, &GrayMap)> = BTreeMap::new();
    for (id, pred, gt) in pairs {
        if sorted.insert(id, (pred, gt)).is_some() {
            return Err(invalid(format!("duplicate image id {id}")));
        }
    }
    let mut per_image = Vec::with_capacity(pairs.len());
    let (mut sum_mae, mut sum_s, mut sum_e, mut sum_w) = (0.0, 0.0, 0.0, 0.0);
    for (id, (pred, gt)) in sorted {
        let row = ImageMetrics {
            id: id.to_string(),
            mae: mae(pred, gt)?,
            s_measure: s_measure(pred, gt)?,
            e_measure: e_measure(pred, gt, e_mode)?,
            wfm: weighted_fbeta(pred, gt)?,
        };
        sum_mae += row.mae;
        sum_s += row.s_measure;
        sum_e += row.e_measure;
        sum_w += row.wfm;
        per_image.push(row);
    }
    let n = per_image.len() as f64;
    Ok(MetricReport {
        count: per_image.len(),
        mean_mae: sum_mae / n,
        mean_s: sum_s / n,
        mean_e: sum_e / n,
        mean_wfm: sum_w / n,
        per_image,
    })
}

impl MetricReport {
    /// `id,mae,smeasure,emeasure,wfm` rows plus a final MEAN row.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "id,mae,smeasure,emeasure,wfm")?;
        for row in &self.per_image {
            writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6}",
                row.id, row.mae, row.s_measure, row.e_measure, row.wfm
            )?;
        }
        writeln!(
            out,
            "MEAN,{:.6},{:.6},{:.6},{:.6}",
            self.mean_mae, self.mean_s, self.mean_e, self.mean_wfm
        )?;
        Ok(())
    }
}

/// Evaluate prediction PNGs in one directory against mask PNGs of the same
/// file names in another.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, e_mode: EMeasureMode) -> Result<MetricReport> {
    let mut pairs = Vec::new();
    let mut names: Vec<_> = std::fs::read_dir(pred_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    names.sort();
    for pred_path in names {
        let id = pred_path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| invalid(format!("bad file name {}", pred_path.display())))?
            .to_string();
        let gt_path = gt_dir.join(format!("{id}.png"));
        if !gt_path.exists() {
            return Err(invalid(format!("no ground truth for {id}")));
        }
        let pred = GrayMap::from_png(&pred_path)?;
        let gt = GrayMap::mask_from_png(&gt_path)?;
        pairs.push((id, pred, gt));
    }
    evaluate_dataset(&pairs, e_mode)
}
