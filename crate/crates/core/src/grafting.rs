//! Feature grafting across the two encoder branches.
//!
//! Same-resolution pairs are fused level by level: the two shallow pairs go
//! through a pooling graft (1x1 channel alignment of both branches, an
//! elementwise max across them, then a 3x3 convolution), while the deepest
//! pair is grafted with single-head cross-attention — queries and values
//! come from the sub-scale feature, keys from the main-scale one. The
//! shallowest decoder level has no partner pair and is a plain channel
//! alignment of the first sub-scale feature.

use rand_chacha::ChaCha8Rng;

use crate::encoders::{spatial, FeaturePyramid};
use crate::nn::{Conv2d, LayerNorm, Linear, Param};
use crate::tensor::{
    eltwise, flatten_permute, matmul, maximum, reshape, scalar_mul, softmax_lastdim, transpose2d,
    unflatten_permute, EltwiseKind, Tensor,
};
use crate::{invalid, Result};

/// How the two aligned branches of a pooling graft are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GraftPoolKind {
    #[default]
    Max,
    Avg,
}

/// The four grafted features entering the decoder, shallowest first, all at
/// one channel width.
pub struct GraftedPyramid {
    pub levels: Vec<Tensor>,
    pub channels: usize,
}

impl GraftedPyramid {
    fn validate(&self) -> Result<()> {
        for i in 0..self.levels.len() - 1 {
            let (h0, w0) = spatial(&self.levels[i])?;
            let (h1, w1) = spatial(&self.levels[i + 1])?;
            if h0 != 2 * h1 || w0 != 2 * w1 {
                return Err(invalid(format!(
                    "grafted level {} is {h0}x{w0}, level {} is {h1}x{w1}; expected a 2x step",
                    i + 1,
                    i + 2
                )));
            }
            if self.levels[i].shape()[1] != self.channels {
                return Err(invalid("grafted levels must share one channel width"));
            }
        }
        Ok(())
    }
}

/// Projections for the cross-attention graft. Queries and values are drawn
/// from the (layer-normed) sub-scale tokens, keys from the main-scale ones;
/// queries and keys share the key width.
pub struct AttentionParams {
    pub ln_f: LayerNorm,
    pub ln_g: LayerNorm,
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub key_dim: usize,
}

impl AttentionParams {
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        f_channels: usize,
        g_channels: usize,
        key_dim: usize,
    ) -> AttentionParams {
        AttentionParams {
            ln_f: LayerNorm::new(&format!("{name}.ln_f"), f_channels),
            ln_g: LayerNorm::new(&format!("{name}.ln_g"), g_channels),
            w_q: Linear::new(rng, &format!("{name}.q"), f_channels, key_dim),
            w_k: Linear::new(rng, &format!("{name}.k"), g_channels, key_dim),
            w_v: Linear::new(rng, &format!("{name}.v"), f_channels, f_channels),
            key_dim,
        }
    }

    pub fn params(&self) -> Vec<Param> {
        let mut p = self.ln_f.params();
        p.extend(self.ln_g.params());
        p.extend(self.w_q.params());
        p.extend(self.w_k.params());
        p.extend(self.w_v.params());
        p
    }
}

/// Combine two channel-aligned branches elementwise.
pub fn graft_combine(ga: &Tensor, fa: &Tensor, kind: GraftPoolKind) -> Result<Tensor> {
    if ga.shape() != fa.shape() {
        return Err(invalid(format!(
            "graft branches differ: {:?} vs {:?}",
            ga.shape(),
            fa.shape()
        )));
    }
    let combined = match kind {
        GraftPoolKind::Max => maximum(ga, fa)?,
        GraftPoolKind::Avg => scalar_mul(&eltwise(ga, fa, EltwiseKind::Add)?, 0.5)?,
    };
    Ok(combined)
}

/// One pooling-graft group: align both branches to the shared width, pool
/// across them, then mix with a 3x3 convolution.
pub struct PoolGraft {
    pub align_g: Conv2d,
    pub align_f: Conv2d,
    pub mix: Conv2d,
    pub kind: GraftPoolKind,
}

impl PoolGraft {
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        g_channels: usize,
        f_channels: usize,
        out_channels: usize,
        kind: GraftPoolKind,
    ) -> PoolGraft {
        PoolGraft {
            align_g: Conv2d::new(rng, &format!("{name}.align_g"), g_channels, out_channels, 1, 1, 0),
            align_f: Conv2d::new(rng, &format!("{name}.align_f"), f_channels, out_channels, 1, 1, 0),
            mix: Conv2d::new(rng, &format!("{name}.mix"), out_channels, out_channels, 3, 1, 1),
            kind,
        }
    }

    pub fn forward(&self, g: &Tensor, f: &Tensor) -> Result<Tensor> {
        if spatial(g)? != spatial(f)? {
            return Err(invalid(format!(
                "pool graft needs matching spatial sizes, got {:?} vs {:?}",
                g.shape(),
                f.shape()
            )));
        }
        let ga = self.align_g.forward(g)?;
        let fa = self.align_f.forward(f)?;
        self.mix.forward(&graft_combine(&ga, &fa, self.kind)?)
    }

    pub fn params(&self) -> Vec<Param> {
        let mut p = self.align_g.params();
        p.extend(self.align_f.params());
        p.extend(self.mix.params());
        p
    }
}

/// Cross-attention over flattened tokens, returning `[H*W, C_f]`:
/// `softmax(Q K^T / sqrt(k)) V` with Q, V from the sub-scale feature and K
/// from the main-scale one.
pub fn cross_attention_tokens(g3: &Tensor, f4: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    let (n, cf, h, w) = match f4.shape() {
        [n, c, h, w] => (*n, *c, *h, *w),
        other => return Err(invalid(format!("expected NCHW sub feature, got {other:?}"))),
    };
    if n != 1 {
        return Err(invalid("cross attention operates on single-sample tensors"));
    }
    if spatial(g3)? != (h, w) {
        return Err(invalid(format!(
            "cross attention needs matching spatial sizes, got {:?} vs {:?}",
            g3.shape(),
            f4.shape()
        )));
    }
    if p.w_q.w.shape()[1] != p.key_dim || p.w_k.w.shape()[1] != p.key_dim {
        return Err(invalid("query and key projections must share the key width"));
    }
    let cg = g3.shape()[1];
    let f_tokens = flatten_permute(&reshape(f4, &[cf, h, w])?)?;
    let f_norm = p.ln_f.forward(&f_tokens)?;
    let q = p.w_q.forward(&f_norm)?;
    let v = p.w_v.forward(&f_norm)?;
    let g_tokens = flatten_permute(&reshape(g3, &[cg, h, w])?)?;
    let g_norm = p.ln_g.forward(&g_tokens)?;
    let k = p.w_k.forward(&g_norm)?;
    let logits = scalar_mul(&matmul(&q, &transpose2d(&k)?)?, 1.0 / (p.key_dim as f64).sqrt())?;
    let attn = softmax_lastdim(&logits)?;
    Ok(matmul(&attn, &v)?)
}

/// Full cross-attention graft: token attention, reshape back to a feature
/// map, then 1x1 alignment to the shared decoder width.
pub struct CrossAttentionGraft {
    pub attn: AttentionParams,
    pub align: Conv2d,
}

impl CrossAttentionGraft {
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        g_channels: usize,
        f_channels: usize,
        key_dim: usize,
        out_channels: usize,
    ) -> CrossAttentionGraft {
        CrossAttentionGraft {
            attn: AttentionParams::new(rng, name, f_channels, g_channels, key_dim),
            align: Conv2d::new(rng, &format!("{name}.align"), f_channels, out_channels, 1, 1, 0),
        }
    }

    pub fn forward(&self, g3: &Tensor, f4: &Tensor) -> Result<Tensor> {
        let (h, w) = spatial(f4)?;
        let cf = f4.shape()[1];
        let tokens = cross_attention_tokens(g3, f4, &self.attn)?;
        let map = reshape(&unflatten_permute(&tokens, h, w)?, &[1, cf, h, w])?;
        self.align.forward(&map)
    }

    pub fn params(&self) -> Vec<Param> {
        let mut p = self.attn.params();
        p.extend(self.align.params());
        p
    }
}

/// The whole grafting stage.
pub struct Grafting {
    pub align_f1: Conv2d,
    pub graft_2: PoolGraft,
    pub graft_3: PoolGraft,
    pub graft_4: CrossAttentionGraft,
    pub channels: usize,
}

impl Grafting {
    pub fn new(
        rng: &mut ChaCha8Rng,
        channels_per_level: [usize; 4],
        out_channels: usize,
        key_dim: usize,
        pool_kind: GraftPoolKind,
    ) -> Grafting {
        let ch = channels_per_level;
        Grafting {
            align_f1: Conv2d::new(rng, "graft.align_f1", ch[0], out_channels, 1, 1, 0),
            graft_2: PoolGraft::new(rng, "graft.g2", ch[0], ch[1], out_channels, pool_kind),
            graft_3: PoolGraft::new(rng, "graft.g3", ch[1], ch[2], out_channels, pool_kind),
            graft_4: CrossAttentionGraft::new(rng, "graft.g4", ch[2], ch[3], key_dim, out_channels),
            channels: out_channels,
        }
    }

    /// Assemble the decoder inputs. The deepest main-scale feature is never
    /// read; the shallowest output comes from the sub scale alone.
    pub fn build_grafted_pyramid(
        &self,
        main: &FeaturePyramid,
        sub: &FeaturePyramid,
    ) -> Result<GraftedPyramid> {
        for i in 0..3 {
            if spatial(&main.levels[i])? != spatial(&sub.levels[i + 1])? {
                return Err(invalid(format!(
                    "main level {} and sub level {} are not the same resolution",
                    i + 1,
                    i + 2
                )));
            }
        }
        let f1 = self.align_f1.forward(&sub.levels[0])?;
        let f2 = self.graft_2.forward(&main.levels[0], &sub.levels[1])?;
        let f3 = self.graft_3.forward(&main.levels[1], &sub.levels[2])?;
        let f4 = self.graft_4.forward(&main.levels[2], &sub.levels[3])?;
        let pyramid = GraftedPyramid {
            levels: vec![f1, f2, f3, f4],
            channels: self.channels,
        };
        pyramid.validate()?;
        Ok(pyramid)
    }

    pub fn params(&self) -> Vec<Param> {
        let mut p = self.align_f1.params();
        p.extend(self.graft_2.params());
        p.extend(self.graft_3.params());
        p.extend(self.graft_4.params());
        p
    }
}
