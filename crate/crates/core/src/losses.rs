//! Training objective: a boundary-weighted structure loss on the refined
//! map plus class-balanced BCE on the two distractor maps, combined as
//! `total = L_map + lambda * L_fn + beta * L_fp` with both multipliers
//! defaulting to 10.

use crate::distractor::{check_binary, DistractorTargets, PredictionBundle};
use crate::nn::sigmoid;
use crate::tensor::{
    bce_with_logits, eltwise, ln_clamped, reciprocal, scalar_add, scalar_mul, sum_all,
    EltwiseKind, Tensor,
};
use crate::{invalid, Result};

/// Options shared by the loss assembly.
#[derive(Debug, Clone)]
pub struct LossConfig {
    pub lambda: f64,
    pub beta: f64,
    /// Use the conventional class-balance weighting (positive term scaled by
    /// the negative fraction) instead of the printed form.
    pub swap_balance_weights: bool,
    /// Also supervise the coarse map with the structure loss.
    pub aux_coarse_loss: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 10.0,
            beta: 10.0,
            swap_balance_weights: false,
            aux_coarse_loss: false,
        }
    }
}

/// Scalar components of one loss evaluation; `total` keeps the graph for
/// backward.
pub struct LossBreakdown {
    pub total: Tensor,
    pub l_fp_map: f64,
    pub l_fn: f64,
    pub l_fp: f64,
    pub l_coarse_aux: Option<f64>,
    pub lambda: f64,
    pub beta: f64,
}

/// Boundary-emphasis weights: `1 + 5 * |avgpool_15(gt) - gt|` with stride 1,
/// padding 7, and the window area as divisor. Plain data, no gradient path.
pub fn boundary_weights(gt: &Tensor) -> Result<Vec<f64>> {
    let (h, w) = match gt.shape() {
        [_, _, h, w] => (*h, *w),
        other => return Err(invalid(format!("expected NCHW ground truth, got {other:?}"))),
    };
    let n_hw = h * w;
    if gt.numel() != n_hw {
        return Err(invalid("boundary weights expect a single-channel, single-sample map"));
    }
    let (k, pad) = (15usize, 7usize);
    let data = gt.data();
    let mut out = vec![0.0; n_hw];
    let area = (k * k) as f64;
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            for dy in 0..k {
                let iy = y as isize + dy as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for dx in 0..k {
                    let ix = x as isize + dx as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    sum += data[iy as usize * w + ix as usize];
                }
            }
            out[y * w + x] = 1.0 + 5.0 * (sum / area - data[y * w + x]).abs();
        }
    }
    Ok(out)
}

/// Weighted BCE plus weighted IoU on logits against a binary map. Both terms
/// share the boundary weights; the BCE is normalized by their sum and the
/// IoU ratio is smoothed by +1 on both sides.
pub fn structure_loss(pred_logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred_logits.shape() != gt.shape() {
        return Err(invalid(format!(
            "prediction shape {:?} does not match ground truth {:?}",
            pred_logits.shape(),
            gt.shape()
        )));
    }
    check_binary("ground truth", gt)?;
    let weights = boundary_weights(gt)?;
    let weight_sum: f64 = weights.iter().sum();
    let w = Tensor::new(gt.shape(), weights)?;

    let bce = bce_with_logits(pred_logits, gt)?;
    let wbce = scalar_mul(&sum_all(&eltwise(&bce, &w, EltwiseKind::Mul)?)?, 1.0 / weight_sum)?;

    let p = sigmoid(pred_logits)?;
    let py = eltwise(&p, gt, EltwiseKind::Mul)?;
    let inter = sum_all(&eltwise(&py, &w, EltwiseKind::Mul)?)?;
    let union_map = eltwise(&eltwise(&p, gt, EltwiseKind::Add)?, &py, EltwiseKind::Sub)?;
    let union = sum_all(&eltwise(&union_map, &w, EltwiseKind::Mul)?)?;
    let ratio = eltwise(
        &scalar_add(&inter, 1.0)?,
        &reciprocal(&scalar_add(&union, 1.0)?)?,
        EltwiseKind::Mul,
    )?;
    let wiou = scalar_add(&scalar_mul(&ratio, -1.0)?, 1.0)?;

    Ok(eltwise(&wbce, &wiou, EltwiseKind::Add)?)
}

/// Class-balanced BCE summed over pixels, with the positive term weighted by
/// the positive-pixel fraction as printed; `swap` selects the conventional
/// inverse weighting. Probabilities are clamped at 1e-12 inside the logs.
pub fn balanced_bce(pred_logits: &Tensor, gt: &Tensor, swap: bool) -> Result<Tensor> {
    if pred_logits.numel() == 0 {
        return Err(invalid("balanced_bce: empty tensor"));
    }
    if pred_logits.shape() != gt.shape() {
        return Err(invalid(format!(
            "prediction shape {:?} does not match ground truth {:?}",
            pred_logits.shape(),
            gt.shape()
        )));
    }
    check_binary("ground truth", gt)?;
    let n_pos: f64 = gt.data().iter().sum();
    let n_total = gt.numel() as f64;
    let n_neg = n_total - n_pos;
    let (w_pos, w_neg) = if swap {
        (n_neg / n_total, n_pos / n_total)
    } else {
        (n_pos / n_total, n_neg / n_total)
    };
    let pos_coeff: Vec<f64> = gt.data().iter().map(|&y| w_pos * y).collect();
    let neg_coeff: Vec<f64> = gt.data().iter().map(|&y| w_neg * (1.0 - y)).collect();

    let p = sigmoid(pred_logits)?;
    let one_minus_p = scalar_add(&scalar_mul(&p, -1.0)?, 1.0)?;
    let pos_term = eltwise(
        &Tensor::new(gt.shape(), pos_coeff)?,
        &ln_clamped(&p, 1e-12)?,
        EltwiseKind::Mul,
    )?;
    let neg_term = eltwise(
        &Tensor::new(gt.shape(), neg_coeff)?,
        &ln_clamped(&one_minus_p, 1e-12)?,
        EltwiseKind::Mul,
    )?;
    let summed = sum_all(&eltwise(&pos_term, &neg_term, EltwiseKind::Add)?)?;
    Ok(scalar_mul(&summed, -1.0)?)
}

/// `l_map + lambda * l_fn + beta * l_fp` as one scalar graph.
pub fn combine_components(
    l_map: &Tensor,
    l_fn: &Tensor,
    l_fp: &Tensor,
    lambda: f64,
    beta: f64,
) -> Result<Tensor> {
    let scaled_fn = scalar_mul(l_fn, lambda)?;
    let scaled_fp = scalar_mul(l_fp, beta)?;
    Ok(eltwise(
        &eltwise(l_map, &scaled_fn, EltwiseKind::Add)?,
        &scaled_fp,
        EltwiseKind::Add,
    )?)
}

/// Assemble the full objective for one image.
pub fn total_loss(
    bundle: &PredictionBundle,
    targets: &DistractorTargets,
    gt: &Tensor,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let l_map = structure_loss(&bundle.refined, gt)?;
    let l_fn = balanced_bce(&bundle.fn_pred, &targets.fn_gt, cfg.swap_balance_weights)?;
    let l_fp = balanced_bce(&bundle.fp_pred, &targets.fp_gt, cfg.swap_balance_weights)?;
    let mut total = combine_components(&l_map, &l_fn, &l_fp, cfg.lambda, cfg.beta)?;
    let l_coarse_aux = if cfg.aux_coarse_loss {
        let aux = structure_loss(&bundle.coarse, gt)?;
        total = eltwise(&total, &aux, EltwiseKind::Add)?;
        Some(aux.item())
    } else {
        None
    };
    Ok(LossBreakdown {
        l_fp_map: l_map.item(),
        l_fn: l_fn.item(),
        l_fp: l_fp.item(),
        l_coarse_aux,
        lambda: cfg.lambda,
        beta: cfg.beta,
        total,
    })
}
