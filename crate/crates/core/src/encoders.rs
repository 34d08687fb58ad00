//! Stand-in pyramid encoders.
//!
//! Two randomly initialized backbones with the stride geometry of a
//! pretrained pair: the main scale goes through an attention-flavored
//! encoder (patch-merge conv, layer norm, single-head self-attention over
//! flattened tokens, linear), the sub scale through a residual convolutional
//! one. Level `i` of either pyramid has spatial size `input / 2^(i+1)`, so
//! with the sub input at twice the main resolution, sub level `i+1` always
//! matches main level `i` — the precondition the grafting stage relies on.

use rand_chacha::ChaCha8Rng;

use crate::nn::{relu, BatchNorm, Conv2d, LayerNorm, Linear, Param};
use crate::tensor::{
    eltwise, flatten_permute, matmul, reshape, scalar_mul, slice_batch, softmax_lastdim,
    stack_batch, transpose2d, unflatten_permute, EltwiseKind, Tensor,
};
use crate::{invalid, Result};

pub const PYRAMID_LEVELS: usize = 4;
pub const LEVEL_STRIDES: [usize; PYRAMID_LEVELS] = [4, 8, 16, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PyramidSource {
    Main,
    Sub,
}

/// Four feature maps from one encoder, deepest last.
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub strides: [usize; PYRAMID_LEVELS],
    pub source: PyramidSource,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>, source: PyramidSource) -> Result<FeaturePyramid> {
        if levels.len() != PYRAMID_LEVELS {
            return Err(invalid(format!(
                "pyramid needs {PYRAMID_LEVELS} levels, got {}",
                levels.len()
            )));
        }
        for i in 0..PYRAMID_LEVELS - 1 {
            let (h0, w0) = spatial(&levels[i])?;
            let (h1, w1) = spatial(&levels[i + 1])?;
            if h0 != 2 * h1 || w0 != 2 * w1 {
                return Err(invalid(format!(
                    "pyramid level {} is {h0}x{w0} but level {} is {h1}x{w1}; expected a 2x step",
                    i + 1,
                    i + 2,
                )));
            }
        }
        Ok(FeaturePyramid {
            levels,
            strides: LEVEL_STRIDES,
            source,
        })
    }
}

pub(crate) fn spatial(x: &Tensor) -> Result<(usize, usize)> {
    match x.shape() {
        [_, _, h, w] => Ok((*h, *w)),
        other => Err(invalid(format!("expected NCHW tensor, got {other:?}"))),
    }
}

/// Widths, depths, and input geometry shared by both encoders.
#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub channels_per_level: [usize; PYRAMID_LEVELS],
    pub blocks_per_level: [usize; PYRAMID_LEVELS],
    pub main_input_size: usize,
    pub sub_input_size: usize,
}

impl EncoderConfig {
    pub fn new(
        channels_per_level: [usize; PYRAMID_LEVELS],
        blocks_per_level: [usize; PYRAMID_LEVELS],
        main_input_size: usize,
    ) -> Result<EncoderConfig> {
        if main_input_size == 0 || main_input_size % 32 != 0 {
            return Err(invalid(format!(
                "main input size {main_input_size} must be a positive multiple of 32"
            )));
        }
        if channels_per_level.iter().any(|&c| c == 0) || blocks_per_level.iter().any(|&b| b == 0) {
            return Err(invalid("channel and block counts must be positive"));
        }
        Ok(EncoderConfig {
            channels_per_level,
            blocks_per_level,
            main_input_size,
            sub_input_size: 2 * main_input_size,
        })
    }

    pub fn toy() -> EncoderConfig {
        EncoderConfig::new([8, 16, 32, 64], [1, 1, 1, 1], 32).unwrap()
    }
}

/// One single-head self-attention block over `[tokens, channels]`.
struct AttentionBlock {
    ln: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    dim: usize,
}

impl AttentionBlock {
    fn new(rng: &mut ChaCha8Rng, name: &str, dim: usize) -> AttentionBlock {
        AttentionBlock {
            ln: LayerNorm::new(&format!("{name}.ln"), dim),
            q: Linear::new(rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(rng, &format!("{name}.v"), dim, dim),
            out: Linear::new(rng, &format!("{name}.out"), dim, dim),
            dim,
        }
    }

    fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let t = self.ln.forward(tokens)?;
        let q = self.q.forward(&t)?;
        let k = self.k.forward(&t)?;
        let v = self.v.forward(&t)?;
        let logits = scalar_mul(&matmul(&q, &transpose2d(&k)?)?, 1.0 / (self.dim as f64).sqrt())?;
        let attn = softmax_lastdim(&logits)?;
        self.out.forward(&matmul(&attn, &v)?)
    }

    fn params(&self) -> Vec<Param> {
        let mut p = self.ln.params();
        p.extend(self.q.params());
        p.extend(self.k.params());
        p.extend(self.v.params());
        p.extend(self.out.params());
        p
    }
}

struct MainLevel {
    patch: Conv2d,
    blocks: Vec<AttentionBlock>,
}

/// Attention-flavored main-scale encoder.
pub struct MainEncoder {
    cfg: EncoderConfig,
    levels: Vec<MainLevel>,
}

impl MainEncoder {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &EncoderConfig) -> MainEncoder {
        let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
        let mut in_ch = 3;
        for (i, &ch) in cfg.channels_per_level.iter().enumerate() {
            let (k, stride) = if i == 0 { (4, 4) } else { (2, 2) };
            let patch = Conv2d::new(rng, &format!("main.l{i}.patch"), in_ch, ch, k, stride, 0);
            let blocks = (0..cfg.blocks_per_level[i])
                .map(|j| AttentionBlock::new(rng, &format!("main.l{i}.b{j}"), ch))
                .collect();
            levels.push(MainLevel { patch, blocks });
            in_ch = ch;
        }
        MainEncoder {
            cfg: cfg.clone(),
            levels,
        }
    }

    pub fn encode(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let (n, c, h, w) = match image.shape() {
            [n, c, h, w] => (*n, *c, *h, *w),
            other => return Err(invalid(format!("expected NCHW image, got {other:?}"))),
        };
        if c != 3 {
            return Err(invalid(format!("main encoder expects 3 channels, got {c}")));
        }
        if h != self.cfg.main_input_size || w != self.cfg.main_input_size {
            return Err(invalid(format!(
                "main encoder configured for {0}x{0} input, got {h}x{w}",
                self.cfg.main_input_size
            )));
        }
        let mut x = image.clone();
        let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
        for level in &self.levels {
            x = level.patch.forward(&x)?;
            for block in &level.blocks {
                x = attention_over_samples(block, &x, n)?;
            }
            levels.push(x.clone());
        }
        FeaturePyramid::new(levels, PyramidSource::Main)
    }

    pub fn params(&self) -> Vec<Param> {
        let mut p = Vec::new();
        for level in &self.levels {
            p.extend(level.patch.params());
            for block in &level.blocks {
                p.extend(block.params());
            }
        }
        p
    }
}

/// Run an attention block over each sample of a batch independently.
fn attention_over_samples(block: &AttentionBlock, x: &Tensor, n: usize) -> Result<Tensor> {
    let (c, h, w) = match x.shape() {
        [_, c, h, w] => (*c, *h, *w),
        other => return Err(invalid(format!("expected NCHW tensor, got {other:?}"))),
    };
    let mut outs = Vec::with_capacity(n);
    for i in 0..n {
        let sample = reshape(&slice_batch(x, i)?, &[c, h, w])?;
        let tokens = flatten_permute(&sample)?;
        let attended = block.forward(&tokens)?;
        let back = unflatten_permute(&attended, h, w)?;
        outs.push(reshape(&back, &[1, c, h, w])?);
    }
    Ok(stack_batch(&outs)?)
}

struct ResidualBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
}

impl ResidualBlock {
    fn new(rng: &mut ChaCha8Rng, name: &str, ch: usize) -> ResidualBlock {
        ResidualBlock {
            conv1: Conv2d::new(rng, &format!("{name}.conv1"), ch, ch, 3, 1, 1),
            bn1: BatchNorm::new(&format!("{name}.bn1"), ch),
            conv2: Conv2d::new(rng, &format!("{name}.conv2"), ch, ch, 3, 1, 1),
            bn2: BatchNorm::new(&format!("{name}.bn2"), ch),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = relu(&self.bn1.forward(&self.conv1.forward(x)?)?)?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?)?;
        relu(&eltwise(x, &y, EltwiseKind::Add)?)
    }

    fn params(&self) -> Vec<Param> {
        let mut p = self.conv1.params();
        p.extend(self.bn1.params());
        p.extend(self.conv2.params());
        p.extend(self.bn2.params());
        p
    }
}

struct SubLevel {
    down: Conv2d,
    bn: BatchNorm,
    blocks: Vec<ResidualBlock>,
}

/// Residual convolutional sub-scale encoder.
pub struct SubEncoder {
    cfg: EncoderConfig,
    levels: Vec<SubLevel>,
}

impl SubEncoder {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &EncoderConfig) -> SubEncoder {
        let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
        let mut in_ch = 3;
        for (i, &ch) in cfg.channels_per_level.iter().enumerate() {
            let down = if i == 0 {
                Conv2d::new(rng, &format!("sub.l{i}.down"), in_ch, ch, 4, 4, 0)
            } else {
                Conv2d::new(rng, &format!("sub.l{i}.down"), in_ch, ch, 3, 2, 1)
            };
            let bn = BatchNorm::new(&format!("sub.l{i}.bn"), ch);
            let blocks = (0..cfg.blocks_per_level[i])
                .map(|j| ResidualBlock::new(rng, &format!("sub.l{i}.b{j}"), ch))
                .collect();
            levels.push(SubLevel { down, bn, blocks });
            in_ch = ch;
        }
        SubEncoder {
            cfg: cfg.clone(),
            levels,
        }
    }

    pub fn encode(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let (c, h, w) = match image.shape() {
            [_, c, h, w] => (*c, *h, *w),
            other => return Err(invalid(format!("expected NCHW image, got {other:?}"))),
        };
        if c != 3 {
            return Err(invalid(format!("sub encoder expects 3 channels, got {c}")));
        }
        if h != self.cfg.sub_input_size || w != self.cfg.sub_input_size {
            return Err(invalid(format!(
                "sub encoder configured for {0}x{0} input, got {h}x{w}",
                self.cfg.sub_input_size
            )));
        }
        let mut x = image.clone();
        let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
        for level in &self.levels {
            x = relu(&level.bn.forward(&level.down.forward(&x)?)?)?;
            for block in &level.blocks {
                x = block.forward(&x)?;
            }
            levels.push(x.clone());
        }
        FeaturePyramid::new(levels, PyramidSource::Sub)
    }

    pub fn params(&self) -> Vec<Param> {
        let mut p = Vec::new();
        for level in &self.levels {
            p.extend(level.down.params());
            p.extend(level.bn.params());
            for block in &level.blocks {
                p.extend(block.params());
            }
        }
        p
    }
}
