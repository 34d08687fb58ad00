//! Bottom-up dense decoder.
//!
//! The deepest grafted feature is mixed directly; every shallower level
//! first builds a semantic filter from all deeper levels (upsampled,
//! concatenated, 1x1 then 3x3 convolved), gates the current feature with it
//! (`filter * F + F`), concatenates the upsampled previous decoded feature,
//! and mixes with a 3x3 convolution. A final 3x3 head turns the shallowest
//! decoded feature into the single-channel coarse map, kept as logits.

use rand_chacha::ChaCha8Rng;

use crate::encoders::spatial;
use crate::grafting::GraftedPyramid;
use crate::nn::{Conv2d, Param};
use crate::tensor::{bilinear_resize, concat_channels, eltwise, EltwiseKind, Tensor};
use crate::{invalid, Result};

/// Decoder outputs: decoded features shallowest-first, the coarse logits,
/// and the per-level semantic filters retained for inspection.
pub struct DecodedFeatures {
    pub f_hat: Vec<Tensor>,
    pub coarse: Tensor,
    pub filters: Vec<Tensor>,
}

/// Upsample every deeper feature to `target`, concatenate, and reduce with
/// a 1x1 then a 3x3 convolution.
pub fn semantic_filter(
    deeper: &[&Tensor],
    target: (usize, usize),
    reduce: &Conv2d,
    mix: &Conv2d,
) -> Result<Tensor> {
    if deeper.is_empty() {
        return Err(invalid("semantic filter needs at least one deeper feature"));
    }
    let mut upsampled = Vec::with_capacity(deeper.len());
    for x in deeper {
        let (h, w) = spatial(x)?;
        if target.0 % h != 0 || target.1 % w != 0 || target.0 / h != target.1 / w {
            return Err(invalid(format!(
                "cannot upsample {h}x{w} to {}x{}",
                target.0, target.1
            )));
        }
        let factor = target.0 / h;
        let up = match factor {
            1 => (*x).clone(),
            2 | 4 | 8 => bilinear_resize(x, factor)?,
            other => {
                return Err(invalid(format!(
                    "semantic filter upsample factor {other} is not a power of two in range"
                )))
            }
        };
        upsampled.push(up);
    }
    let cat = concat_channels(&upsampled)?;
    mix.forward(&reduce.forward(&cat)?)
}

/// Gate the level feature with its filter (`filter * F + F`), concatenate the
/// already-upsampled deeper decoded feature, and mix.
pub fn fuse_level(
    level: &Tensor,
    filter: &Tensor,
    decoded_next_up: &Tensor,
    mix: &Conv2d,
) -> Result<Tensor> {
    if level.shape() != filter.shape() {
        return Err(invalid(format!(
            "filter shape {:?} does not match level {:?}",
            filter.shape(),
            level.shape()
        )));
    }
    if spatial(level)? != spatial(decoded_next_up)? {
        return Err(invalid(format!(
            "decoded feature {:?} does not match level {:?}",
            decoded_next_up.shape(),
            level.shape()
        )));
    }
    let gate = eltwise(&eltwise(filter, level, EltwiseKind::Mul)?, level, EltwiseKind::Add)?;
    mix.forward(&concat_channels(&[gate, decoded_next_up.clone()])?)
}

struct FilterConvs {
    reduce: Conv2d,
    mix: Conv2d,
}

/// Decoder parameters and the decode pass.
pub struct Fusion {
    mix_deepest: Conv2d,
    filters: Vec<FilterConvs>, // index 0 = level 3 filter, 1 = level 2, 2 = level 1
    fuses: Vec<Conv2d>,        // same order
    coarse_head: Conv2d,
}

impl Fusion {
    pub fn new(rng: &mut ChaCha8Rng, ch: usize) -> Fusion {
        let mut filters = Vec::new();
        let mut fuses = Vec::new();
        for (i, level) in [3usize, 2, 1].iter().enumerate() {
            let deeper_count = i + 1;
            filters.push(FilterConvs {
                reduce: Conv2d::new(
                    rng,
                    &format!("fusion.filter{level}.reduce"),
                    ch * deeper_count,
                    ch,
                    1,
                    1,
                    0,
                ),
                mix: Conv2d::new(rng, &format!("fusion.filter{level}.mix"), ch, ch, 3, 1, 1),
            });
            fuses.push(Conv2d::new(rng, &format!("fusion.fuse{level}"), 2 * ch, ch, 3, 1, 1));
        }
        Fusion {
            mix_deepest: Conv2d::new(rng, "fusion.mix4", ch, ch, 3, 1, 1),
            filters,
            fuses,
            coarse_head: Conv2d::new(rng, "fusion.coarse", ch, 1, 3, 1, 1),
        }
    }

    pub fn decode(&self, gp: &GraftedPyramid) -> Result<DecodedFeatures> {
        let [f1, f2, f3, f4] = match gp.levels.as_slice() {
            [a, b, c, d] => [a, b, c, d],
            other => return Err(invalid(format!("expected 4 grafted levels, got {}", other.len()))),
        };
        let d4 = self.mix_deepest.forward(f4)?;

        let filt3 = semantic_filter(
            &[f4],
            spatial(f3)?,
            &self.filters[0].reduce,
            &self.filters[0].mix,
        )?;
        let d3 = fuse_level(f3, &filt3, &bilinear_resize(&d4, 2)?, &self.fuses[0])?;

        let filt2 = semantic_filter(
            &[f4, f3],
            spatial(f2)?,
            &self.filters[1].reduce,
            &self.filters[1].mix,
        )?;
        let d2 = fuse_level(f2, &filt2, &bilinear_resize(&d3, 2)?, &self.fuses[1])?;

        let filt1 = semantic_filter(
            &[f4, f3, f2],
            spatial(f1)?,
            &self.filters[2].reduce,
            &self.filters[2].mix,
        )?;
        let d1 = fuse_level(f1, &filt1, &bilinear_resize(&d2, 2)?, &self.fuses[2])?;

        let coarse = self.coarse_head.forward(&d1)?;
        Ok(DecodedFeatures {
            f_hat: vec![d1, d2, d3, d4],
            coarse,
            filters: vec![filt1, filt2, filt3],
        })
    }

    pub fn params(&self) -> Vec<Param> {
        let mut p = self.mix_deepest.params();
        for f in &self.filters {
            p.extend(f.reduce.params());
            p.extend(f.mix.params());
        }
        for f in &self.fuses {
            p.extend(f.params());
        }
        p.extend(self.coarse_head.params());
        p
    }

    /// Zero every filter-producing convolution; the decoder then reduces to
    /// plain concat-and-mix decoding.
    pub fn zero_filter_convs(&self) -> Result<()> {
        for f in &self.filters {
            f.reduce.w.set_data(vec![0.0; f.reduce.w.numel()])?;
            f.reduce.b.set_data(vec![0.0; f.reduce.b.numel()])?;
            f.mix.w.set_data(vec![0.0; f.mix.w.numel()])?;
            f.mix.b.set_data(vec![0.0; f.mix.b.numel()])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, sum_all};
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    fn toy_grafted(rng: &mut ChaCha8Rng, ch: usize) -> GraftedPyramid {
        GraftedPyramid {
            levels: vec![
                rand_tensor(rng, &[1, ch, 16, 16]),
                rand_tensor(rng, &[1, ch, 8, 8]),
                rand_tensor(rng, &[1, ch, 4, 4]),
                rand_tensor(rng, &[1, ch, 2, 2]),
            ],
            channels: ch,
        }
    }

    #[test]
    fn filter_at_target_size_skips_resize() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let reduce = Conv2d::new(&mut rng, "r", 4, 4, 1, 1, 0);
        let mix = Conv2d::new(&mut rng, "m", 4, 4, 3, 1, 1);
        let x = rand_tensor(&mut rng, &[1, 4, 4, 4]);
        let out = semantic_filter(&[&x], (4, 4), &reduce, &mix).unwrap();
        let expect = mix.forward(&reduce.forward(&x).unwrap()).unwrap();
        assert_eq!(out.data(), expect.data());
    }

    #[test]
    fn filter_from_one_level_down_uses_single_doubling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let reduce = Conv2d::new(&mut rng, "r", 4, 4, 1, 1, 0);
        let mix = Conv2d::new(&mut rng, "m", 4, 4, 3, 1, 1);
        let deep = rand_tensor(&mut rng, &[1, 4, 2, 2]);
        let out = semantic_filter(&[&deep], (4, 4), &reduce, &mix).unwrap();
        let expect = mix
            .forward(&reduce.forward(&bilinear_resize(&deep, 2).unwrap()).unwrap())
            .unwrap();
        assert_eq!(out.shape(), &[1, 4, 4, 4]);
        assert_eq!(out.data(), expect.data());
    }

    #[test]
    fn filter_rejects_non_power_of_two_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reduce = Conv2d::new(&mut rng, "r", 4, 4, 1, 1, 0);
        let mix = Conv2d::new(&mut rng, "m", 4, 4, 3, 1, 1);
        let deep = rand_tensor(&mut rng, &[1, 4, 2, 2]);
        assert!(semantic_filter(&[&deep], (6, 6), &reduce, &mix).is_err());
    }

    #[test]
    fn filter_of_constant_inputs_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let reduce = Conv2d::new(&mut rng, "r", 8, 4, 1, 1, 0);
        let mix = Conv2d::new(&mut rng, "m", 4, 4, 3, 1, 1);
        // Two constant deeper features; interior of the filter must be
        // constant per channel (borders differ due to zero padding, so probe
        // the interior).
        let a = Tensor::full(&[1, 4, 4, 4], 0.7);
        let b = Tensor::full(&[1, 4, 8, 8], -0.2);
        let out = semantic_filter(&[&a, &b], (8, 8), &reduce, &mix).unwrap();
        for c in 0..4 {
            let base = c * 64;
            let centre = out.data()[base + 3 * 8 + 3];
            for y in 1..7 {
                for x in 1..7 {
                    assert!((out.data()[base + y * 8 + x] - centre).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fuse_level_zero_filter_is_pure_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mix = Conv2d::new(&mut rng, "m", 8, 4, 3, 1, 1);
        let level = rand_tensor(&mut rng, &[1, 4, 4, 4]);
        let up = rand_tensor(&mut rng, &[1, 4, 4, 4]);
        let zero = Tensor::zeros(&[1, 4, 4, 4]);
        let out = fuse_level(&level, &zero, &up, &mix).unwrap();
        let expect = mix
            .forward(&concat_channels(&[level.clone(), up.clone()]).unwrap())
            .unwrap();
        assert_eq!(out.data(), expect.data());
    }

    #[test]
    fn fuse_level_unit_filter_doubles_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mix = Conv2d::new(&mut rng, "m", 8, 4, 3, 1, 1);
        let level = rand_tensor(&mut rng, &[1, 4, 4, 4]);
        let up = rand_tensor(&mut rng, &[1, 4, 4, 4]);
        let ones = Tensor::full(&[1, 4, 4, 4], 1.0);
        let out = fuse_level(&level, &ones, &up, &mix).unwrap();
        let doubled = eltwise(&level, &level, EltwiseKind::Add).unwrap();
        let expect = mix.forward(&concat_channels(&[doubled, up.clone()]).unwrap()).unwrap();
        for (a, e) in out.data().iter().zip(expect.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_level_matches_term_by_term_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mix = Conv2d::new(&mut rng, "m", 4, 2, 3, 1, 1);
        let level = rand_tensor(&mut rng, &[1, 2, 3, 3]);
        let filter = rand_tensor(&mut rng, &[1, 2, 3, 3]);
        let up = rand_tensor(&mut rng, &[1, 2, 3, 3]);
        let out = fuse_level(&level, &filter, &up, &mix).unwrap();

        // gate = filter*level + level computed by hand, then the same conv.
        let mut gate = vec![0.0; 18];
        for i in 0..18 {
            gate[i] = filter.data()[i] * level.data()[i] + level.data()[i];
        }
        let mut cat = gate.clone();
        cat.extend_from_slice(up.data());
        let cat = Tensor::new(&[1, 4, 3, 3], cat).unwrap();
        let expect = mix.forward(&cat).unwrap();
        for (a, e) in out.data().iter().zip(expect.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_shapes_and_filter_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fusion = Fusion::new(&mut rng, 4);
        let gp = toy_grafted(&mut rng, 4);
        let dec = fusion.decode(&gp).unwrap();
        let sizes: Vec<usize> = dec.f_hat.iter().map(|l| l.shape()[2]).collect();
        assert_eq!(sizes, vec![16, 8, 4, 2]);
        assert_eq!(dec.coarse.shape(), &[1, 1, 16, 16]);
        // filters retained shallowest-first; the level-1 filter concatenates
        // three deeper maps (upsampled x8, x4, x2) before reduction.
        let fsizes: Vec<usize> = dec.filters.iter().map(|l| l.shape()[2]).collect();
        assert_eq!(fsizes, vec![16, 8, 4]);
        assert_eq!(fusion.filters[2].reduce.w.shape(), vec![4, 12, 1, 1]);
    }

    #[test]
    fn decode_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fusion = Fusion::new(&mut rng, 4);
        let gp = toy_grafted(&mut rng, 4);
        let a = fusion.decode(&gp).unwrap();
        let b = fusion.decode(&gp).unwrap();
        assert_eq!(a.coarse.data(), b.coarse.data());
        for (x, y) in a.f_hat.iter().zip(&b.f_hat) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn perturbing_deepest_level_changes_every_decoded_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let fusion = Fusion::new(&mut rng, 4);
        let gp = toy_grafted(&mut rng, 4);
        let base = fusion.decode(&gp).unwrap();
        let mut bumped = gp.levels[3].data().to_vec();
        bumped[0] += 0.5;
        let gp2 = GraftedPyramid {
            levels: vec![
                gp.levels[0].clone(),
                gp.levels[1].clone(),
                gp.levels[2].clone(),
                Tensor::new(&[1, 4, 2, 2], bumped).unwrap(),
            ],
            channels: 4,
        };
        let alt = fusion.decode(&gp2).unwrap();
        for (a, b) in base.f_hat.iter().zip(&alt.f_hat) {
            let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
            assert!(diff > 1e-9, "a decoded level ignored the deepest feature");
        }
    }

    #[test]
    fn dense_connection_gradient_is_nonzero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fusion = Fusion::new(&mut rng, 4);
        let gp = toy_grafted(&mut rng, 4);
        let deepest = Tensor::new_param(&[1, 4, 2, 2], gp.levels[3].data().to_vec()).unwrap();
        let gp = GraftedPyramid {
            levels: vec![
                gp.levels[0].clone(),
                gp.levels[1].clone(),
                gp.levels[2].clone(),
                deepest.clone(),
            ],
            channels: 4,
        };
        let dec = fusion.decode(&gp).unwrap();
        sum_all(&dec.f_hat[0]).unwrap().backward().unwrap();
        let grad = deepest.grad().unwrap();
        assert!(grad.iter().any(|&g| g.abs() > 1e-12));
    }

    #[test]
    fn zeroed_filters_reduce_to_concat_decoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let fusion = Fusion::new(&mut rng, 4);
        fusion.zero_filter_convs().unwrap();
        let gp = toy_grafted(&mut rng, 4);
        let dec = fusion.decode(&gp).unwrap();
        // With filters identically zero the gate is the raw level feature.
        let d4 = fusion.mix_deepest.forward(&gp.levels[3]).unwrap();
        let d3 = fusion.fuses[0]
            .forward(
                &concat_channels(&[
                    gp.levels[2].clone(),
                    bilinear_resize(&d4, 2).unwrap(),
                ])
                .unwrap(),
            )
            .unwrap();
        for (a, e) in dec.f_hat[2].data().iter().zip(d3.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let fusion = Fusion::new(&mut rng, 2);
        let l1 = rand_tensor(&mut rng, &[1, 2, 8, 8]);
        let l2 = rand_tensor(&mut rng, &[1, 2, 4, 4]);
        let l3 = rand_tensor(&mut rng, &[1, 2, 2, 2]);
        let l4 = rand_tensor(&mut rng, &[1, 2, 1, 1]);
        let report = finite_diff_check(
            "fusion_decode",
            |inp: &[Tensor]| -> Result<Tensor> {
                let gp = GraftedPyramid {
                    levels: inp.to_vec(),
                    channels: 2,
                };
                let dec = fusion.decode(&gp)?;
                Ok(sum_all(&dec.coarse)?)
            },
            &[l1, l2, l3, l4],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "rel err {}", report.max_rel_error);
    }
}
