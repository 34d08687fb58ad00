//! Distractor-aware refinement.
//!
//! Two branches over the shallowest decoded feature: one models regions the
//! coarse map missed (false negatives), the other regions it wrongly marked
//! (false positives). Each branch runs a small conv-BN-relu encoder and emits
//! a one-channel supervision map. The FN branch gates the feature through a
//! spatial sigmoid attention with a residual add; the FP branch's features
//! are refined and subtracted before the final prediction head. Supervision
//! targets for both maps are built by differencing the binarized coarse map
//! against the ground truth.

use rand_chacha::ChaCha8Rng;

use crate::nn::{relu, sigmoid, BatchNorm, Conv2d, Param};
use crate::tensor::{
    broadcast_mul_channel, concat_channels, eltwise, EltwiseKind, Tensor,
};
use crate::{invalid, Result};

/// All four single-image prediction maps, as logits at the decoded
/// resolution.
pub struct PredictionBundle {
    pub coarse: Tensor,
    pub refined: Tensor,
    pub fn_pred: Tensor,
    pub fp_pred: Tensor,
}

impl PredictionBundle {
    pub fn validate(&self) -> Result<()> {
        let shape = self.coarse.shape();
        for (name, t) in [
            ("refined", &self.refined),
            ("fn_pred", &self.fn_pred),
            ("fp_pred", &self.fp_pred),
        ] {
            if t.shape() != shape {
                return Err(invalid(format!(
                    "{name} shape {:?} differs from coarse {shape:?}",
                    t.shape()
                )));
            }
        }
        for (name, t) in [
            ("coarse", &self.coarse),
            ("refined", &self.refined),
            ("fn_pred", &self.fn_pred),
            ("fp_pred", &self.fp_pred),
        ] {
            if !t.is_finite() {
                return Err(crate::Error::Numerical(format!("{name} map is not finite")));
            }
        }
        Ok(())
    }
}

/// Binary supervision maps for the two distractor types. A pixel can carry
/// at most one of them.
pub struct DistractorTargets {
    pub fn_gt: Tensor,
    pub fp_gt: Tensor,
}

/// Threshold a probability value at 0.5.
pub fn binarize(v: f64) -> f64 {
    if v > 0.5 {
        1.0
    } else {
        0.0
    }
}

pub(crate) fn check_binary(name: &str, t: &Tensor) -> Result<()> {
    if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(invalid(format!("{name} must be binary (0/1)")));
    }
    Ok(())
}

/// Build the two distractor supervision maps from the coarse logits and the
/// binary ground truth. The coarse map is treated as data: no gradient path
/// flows through the targets. Differences are clamped at zero so each map
/// marks exactly one error type.
pub fn distractor_targets(coarse: &Tensor, gt: &Tensor) -> Result<DistractorTargets> {
    if coarse.shape() != gt.shape() {
        return Err(invalid(format!(
            "coarse shape {:?} does not match ground truth {:?}",
            coarse.shape(),
            gt.shape()
        )));
    }
    check_binary("ground truth", gt)?;
    let mut fn_gt = vec![0.0; gt.numel()];
    let mut fp_gt = vec![0.0; gt.numel()];
    for (i, (&logit, &y)) in coarse.data().iter().zip(gt.data()).enumerate() {
        let b = binarize(crate::tensor::sigmoid_value(logit));
        fn_gt[i] = (y - b).max(0.0);
        fp_gt[i] = (b - y).max(0.0);
    }
    Ok(DistractorTargets {
        fn_gt: Tensor::new(gt.shape(), fn_gt)?,
        fp_gt: Tensor::new(gt.shape(), fp_gt)?,
    })
}

/// Two 3x3 convolutions, each followed by batch norm and relu.
pub struct SmallEncoder {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
}

impl SmallEncoder {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, ch: usize) -> SmallEncoder {
        SmallEncoder {
            conv1: Conv2d::new(rng, &format!("{name}.conv1"), ch, ch, 3, 1, 1),
            bn1: BatchNorm::new(&format!("{name}.bn1"), ch),
            conv2: Conv2d::new(rng, &format!("{name}.conv2"), ch, ch, 3, 1, 1),
            bn2: BatchNorm::new(&format!("{name}.bn2"), ch),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape()[1] != self.conv1.w.shape()[1] {
            return Err(invalid(format!(
                "small encoder expects {} channels, got {}",
                self.conv1.w.shape()[1],
                x.shape()[1]
            )));
        }
        let y = relu(&self.bn1.forward(&self.conv1.forward(x)?)?)?;
        relu(&self.bn2.forward(&self.conv2.forward(&y)?)?)
    }

    pub fn params(&self) -> Vec<Param> {
        let mut p = self.conv1.params();
        p.extend(self.bn1.params());
        p.extend(self.conv2.params());
        p.extend(self.bn2.params());
        p
    }
}

/// The dual-branch refinement stage.
pub struct Distractor {
    pub enc_fn: SmallEncoder,
    pub head_fn: Conv2d,
    pub attn_conv: Conv2d,
    pub enc_fp: SmallEncoder,
    pub head_fp: Conv2d,
    pub refine1: Conv2d,
    pub refine2: Conv2d,
    pub pred_head: Conv2d,
}

impl Distractor {
    pub fn new(rng: &mut ChaCha8Rng, ch: usize) -> Distractor {
        // Distractor maps are sparse; a negative head bias starts both
        // branches at a background prior so the summed BCE does not swamp
        // the first optimizer steps.
        Distractor {
            enc_fn: SmallEncoder::new(rng, "dam.enc_fn", ch),
            head_fn: Conv2d::with_bias(rng, "dam.head_fn", ch, 1, 1, 1, 0, -4.0),
            attn_conv: Conv2d::new(rng, "dam.attn", 2 * ch, 1, 1, 1, 0),
            enc_fp: SmallEncoder::new(rng, "dam.enc_fp", ch),
            head_fp: Conv2d::with_bias(rng, "dam.head_fp", ch, 1, 1, 1, 0, -4.0),
            refine1: Conv2d::new(rng, "dam.refine1", 2 * ch, ch, 3, 1, 1),
            refine2: Conv2d::new(rng, "dam.refine2", ch, ch, 3, 1, 1),
            pred_head: Conv2d::new(rng, "dam.pred", ch, 1, 3, 1, 1),
        }
    }

    /// FN branch: encode, emit the supervision logits.
    pub fn fn_branch(&self, feat: &Tensor) -> Result<(Tensor, Tensor)> {
        let xi_fn = self.enc_fn.forward(feat)?;
        let fn_pred = self.head_fn.forward(&xi_fn)?;
        Ok((xi_fn, fn_pred))
    }

    /// Spatial attention weights from the feature and the FN encoding.
    pub fn fn_attention_weights(&self, feat: &Tensor, xi_fn: &Tensor) -> Result<Tensor> {
        sigmoid(&self.attn_conv.forward(&concat_channels(&[feat.clone(), xi_fn.clone()])?)?)
    }

    /// Gate the feature with the attention weights and add it back.
    pub fn apply_attention(feat: &Tensor, weights: &Tensor) -> Result<Tensor> {
        Ok(eltwise(
            &broadcast_mul_channel(feat, weights)?,
            feat,
            EltwiseKind::Add,
        )?)
    }

    /// FP branch plus refinement: encode, emit the supervision logits,
    /// refine the concatenated features, subtract, and predict.
    pub fn fp_branch_and_refine(&self, feat: &Tensor, f_fn: &Tensor) -> Result<(Tensor, Tensor)> {
        let xi_fp = self.enc_fp.forward(feat)?;
        let fp_pred = self.head_fp.forward(&xi_fp)?;
        let refined = self
            .refine2
            .forward(&self.refine1.forward(&concat_channels(&[f_fn.clone(), xi_fp])?)?)?;
        let pred_feat = eltwise(f_fn, &refined, EltwiseKind::Sub)?;
        let f_p = self.pred_head.forward(&pred_feat)?;
        Ok((fp_pred, f_p))
    }

    /// Full pass: decoded feature and coarse logits in, bundle out.
    pub fn refine(&self, feat: &Tensor, coarse: &Tensor) -> Result<PredictionBundle> {
        let (xi_fn, fn_pred) = self.fn_branch(feat)?;
        let weights = self.fn_attention_weights(feat, &xi_fn)?;
        let f_fn = Distractor::apply_attention(feat, &weights)?;
        let (fp_pred, refined) = self.fp_branch_and_refine(feat, &f_fn)?;
        let bundle = PredictionBundle {
            coarse: coarse.clone(),
            refined,
            fn_pred,
            fp_pred,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn params(&self) -> Vec<Param> {
        let mut p = self.enc_fn.params();
        p.extend(self.head_fn.params());
        p.extend(self.attn_conv.params());
        p.extend(self.enc_fp.params());
        p.extend(self.head_fp.params());
        p.extend(self.refine1.params());
        p.extend(self.refine2.params());
        p.extend(self.pred_head.params());
        p
    }
}
