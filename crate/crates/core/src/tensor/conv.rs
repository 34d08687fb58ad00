//! Spatial operators over NCHW tensors: convolution, pooling, bilinear resize.

use super::{input_err, shape_err, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

fn dims4(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match x.shape() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        other => Err(shape_err(op, format!("expected NCHW tensor, got {other:?}"))),
    }
}

/// Valid output range for one kernel tap: all `o` with
/// `0 <= o*stride + k_off < limit`, clipped to `[0, out_len)`.
fn tap_range(limit: usize, out_len: usize, k_off: isize, stride: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if k_off >= 0 { 0 } else { (-k_off + s - 1) / s };
    let hi = ((limit as isize - 1 - k_off) / s + 1).clamp(0, out_len as isize);
    let lo = lo.clamp(0, out_len as isize);
    (lo as usize, hi.max(lo) as usize)
}

/// 2-D convolution with square OIKK kernels and symmetric zero padding.
/// Differentiable with respect to the input, kernel, and bias.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, ci, h, wd) = dims4("conv2d", x)?;
    let (co, wi, kh, kw) = dims4("conv2d", w)?;
    if kh != kw {
        return Err(shape_err("conv2d", format!("kernel must be square, got {kh}x{kw}")));
    }
    let k = kh;
    if wi != ci {
        return Err(shape_err(
            "conv2d",
            format!("kernel expects {wi} input channels, input has {ci}"),
        ));
    }
    if b.shape() != [co] {
        return Err(shape_err(
            "conv2d",
            format!("bias shape {:?} does not match {co} output channels", b.shape()),
        ));
    }
    if stride == 0 {
        return Err(input_err("conv2d", "stride must be >= 1"));
    }
    if h + 2 * pad < k || wd + 2 * pad < k {
        return Err(shape_err(
            "conv2d",
            format!("kernel {k} does not fit input {h}x{wd} with pad {pad}"),
        ));
    }
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;

    let mut out = vec![0.0; n * co * oh * ow];
    let xd = x.data();
    let wdta = w.data();
    let bd = b.data();
    for ni in 0..n {
        for o in 0..co {
            let out_base = (ni * co + o) * oh * ow;
            out[out_base..out_base + oh * ow].fill(bd[o]);
            for c in 0..ci {
                let in_base = (ni * ci + c) * h * wd;
                let w_base = (o * ci + c) * k * k;
                for ky in 0..k {
                    let y_off = ky as isize - pad as isize;
                    let (oy_lo, oy_hi) = tap_range(h, oh, y_off, stride);
                    for kx in 0..k {
                        let x_off = kx as isize - pad as isize;
                        let (ox_lo, ox_hi) = tap_range(wd, ow, x_off, stride);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let wv = wdta[w_base + ky * k + kx];
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * stride) as isize + y_off;
                            let in_row = in_base + iy as usize * wd;
                            let out_row = out_base + oy * ow;
                            if stride == 1 {
                                let ix0 = (ox_lo as isize + x_off) as usize;
                                let src = &xd[in_row + ix0..in_row + ix0 + (ox_hi - ox_lo)];
                                let dst = &mut out[out_row + ox_lo..out_row + ox_hi];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = (ox * stride) as isize + x_off;
                                    out[out_row + ox] += wv * xd[in_row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(Tensor::from_op(
        vec![n, co, oh, ow],
        out,
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |grad, parents| {
            let (x, w, b) = (&parents[0], &parents[1], &parents[2]);
            let xd = x.data();
            let wdta = w.data();
            let mut dx = if x.requires_grad() { vec![0.0; x.numel()] } else { Vec::new() };
            let mut dw = if w.requires_grad() { vec![0.0; w.numel()] } else { Vec::new() };
            for ni in 0..n {
                for o in 0..co {
                    let out_base = (ni * co + o) * oh * ow;
                    for c in 0..ci {
                        let in_base = (ni * ci + c) * h * wd;
                        let w_base = (o * ci + c) * k * k;
                        for ky in 0..k {
                            let y_off = ky as isize - pad as isize;
                            let (oy_lo, oy_hi) = tap_range(h, oh, y_off, stride);
                            for kx in 0..k {
                                let x_off = kx as isize - pad as isize;
                                let (ox_lo, ox_hi) = tap_range(wd, ow, x_off, stride);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let wv = wdta[w_base + ky * k + kx];
                                let mut wsum = 0.0;
                                for oy in oy_lo..oy_hi {
                                    let iy = (oy * stride) as isize + y_off;
                                    let in_row = in_base + iy as usize * wd;
                                    let out_row = out_base + oy * ow;
                                    if stride == 1 {
                                        let ix0 = (ox_lo as isize + x_off) as usize;
                                        let g_row = &grad[out_row + ox_lo..out_row + ox_hi];
                                        if x.requires_grad() {
                                            let dst = &mut dx[in_row + ix0..in_row + ix0 + g_row.len()];
                                            for (d, g) in dst.iter_mut().zip(g_row) {
                                                *d += wv * g;
                                            }
                                        }
                                        if w.requires_grad() {
                                            let src = &xd[in_row + ix0..in_row + ix0 + g_row.len()];
                                            for (s, g) in src.iter().zip(g_row) {
                                                wsum += s * g;
                                            }
                                        }
                                    } else {
                                        for ox in ox_lo..ox_hi {
                                            let ix = ((ox * stride) as isize + x_off) as usize;
                                            let g = grad[out_row + ox];
                                            if x.requires_grad() {
                                                dx[in_row + ix] += wv * g;
                                            }
                                            wsum += xd[in_row + ix] * g;
                                        }
                                    }
                                }
                                if w.requires_grad() {
                                    dw[w_base + ky * k + kx] += wsum;
                                }
                            }
                        }
                    }
                }
            }
            if x.requires_grad() {
                x.accumulate_grad(&dx);
            }
            if w.requires_grad() {
                w.accumulate_grad(&dw);
            }
            if b.requires_grad() {
                let mut db = vec![0.0; co];
                for ni in 0..n {
                    for o in 0..co {
                        let out_base = (ni * co + o) * oh * ow;
                        db[o] += grad[out_base..out_base + oh * ow].iter().sum::<f64>();
                    }
                }
                b.accumulate_grad(&db);
            }
        }),
    ))
}

/// Window pooling without padding. Max pooling records the argmax of each
/// window so backward routes the gradient to the winning element.
pub fn pool2d(x: &Tensor, kind: PoolKind, k: usize, stride: usize) -> Result<Tensor> {
    let (n, c, h, w) = dims4("pool2d", x)?;
    if k == 0 || stride == 0 {
        return Err(input_err("pool2d", "window and stride must be >= 1"));
    }
    if k > h || k > w {
        return Err(shape_err(
            "pool2d",
            format!("window {k} larger than input {h}x{w}"),
        ));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let xd = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    let mut argmax = match kind {
        PoolKind::Max => vec![0usize; n * c * oh * ow],
        PoolKind::Avg => Vec::new(),
    };
    for nc in 0..n * c {
        let in_base = nc * h * w;
        let out_base = nc * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let y0 = oy * stride;
                let x0 = ox * stride;
                match kind {
                    PoolKind::Max => {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for dy in 0..k {
                            for dx in 0..k {
                                let idx = in_base + (y0 + dy) * w + x0 + dx;
                                if xd[idx] > best {
                                    best = xd[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out[out_base + oy * ow + ox] = best;
                        argmax[out_base + oy * ow + ox] = best_idx;
                    }
                    PoolKind::Avg => {
                        let mut sum = 0.0;
                        for dy in 0..k {
                            for dx in 0..k {
                                sum += xd[in_base + (y0 + dy) * w + x0 + dx];
                            }
                        }
                        out[out_base + oy * ow + ox] = sum / (k * k) as f64;
                    }
                }
            }
        }
    }

    Ok(Tensor::from_op(
        vec![n, c, oh, ow],
        out,
        vec![x.clone()],
        Box::new(move |grad, parents| {
            let x = &parents[0];
            if !x.requires_grad() {
                return;
            }
            let mut dx = vec![0.0; x.numel()];
            match kind {
                PoolKind::Max => {
                    for (g, &idx) in grad.iter().zip(&argmax) {
                        dx[idx] += g;
                    }
                }
                PoolKind::Avg => {
                    let inv = 1.0 / (k * k) as f64;
                    for nc in 0..n * c {
                        let in_base = nc * h * w;
                        let out_base = nc * oh * ow;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = grad[out_base + oy * ow + ox] * inv;
                                for dy in 0..k {
                                    for dxx in 0..k {
                                        dx[in_base + (oy * stride + dy) * w + ox * stride + dxx] += g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            x.accumulate_grad(&dx);
        }),
    ))
}

/// Interpolation taps for one axis under the half-pixel (align-corners=false)
/// convention, with edge clamping.
fn resize_taps(in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let out_len = in_len * factor;
    let mut taps = Vec::with_capacity(out_len);
    for o in 0..out_len {
        let src = (o as f64 + 0.5) / factor as f64 - 0.5;
        let i0 = src.floor();
        let t = src - i0;
        let lo = (i0 as isize).clamp(0, in_len as isize - 1) as usize;
        let hi = (i0 as isize + 1).clamp(0, in_len as isize - 1) as usize;
        taps.push((lo, hi, t));
    }
    taps
}

/// Bilinear upsampling by an integer factor in {2, 4, 8}.
pub fn bilinear_resize(x: &Tensor, factor: usize) -> Result<Tensor> {
    if !matches!(factor, 2 | 4 | 8) {
        return Err(input_err(
            "bilinear_resize",
            format!("factor must be one of 2, 4, 8; got {factor}"),
        ));
    }
    let (n, c, h, w) = dims4("bilinear_resize", x)?;
    let oh = h * factor;
    let ow = w * factor;
    let ytaps = resize_taps(h, factor);
    let xtaps = resize_taps(w, factor);
    let xd = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for nc in 0..n * c {
        let in_base = nc * h * w;
        let out_base = nc * oh * ow;
        for (oy, &(y0, y1, ty)) in ytaps.iter().enumerate() {
            let r0 = in_base + y0 * w;
            let r1 = in_base + y1 * w;
            let out_row = out_base + oy * ow;
            for (ox, &(x0, x1, tx)) in xtaps.iter().enumerate() {
                let top = xd[r0 + x0] * (1.0 - tx) + xd[r0 + x1] * tx;
                let bot = xd[r1 + x0] * (1.0 - tx) + xd[r1 + x1] * tx;
                out[out_row + ox] = top * (1.0 - ty) + bot * ty;
            }
        }
    }

    Ok(Tensor::from_op(
        vec![n, c, oh, ow],
        out,
        vec![x.clone()],
        Box::new(move |grad, parents| {
            let x = &parents[0];
            if !x.requires_grad() {
                return;
            }
            let mut dx = vec![0.0; x.numel()];
            for nc in 0..n * c {
                let in_base = nc * h * w;
                let out_base = nc * oh * ow;
                for (oy, &(y0, y1, ty)) in ytaps.iter().enumerate() {
                    let r0 = in_base + y0 * w;
                    let r1 = in_base + y1 * w;
                    let out_row = out_base + oy * ow;
                    for (ox, &(x0, x1, tx)) in xtaps.iter().enumerate() {
                        let g = grad[out_row + ox];
                        dx[r0 + x0] += g * (1.0 - ty) * (1.0 - tx);
                        dx[r0 + x1] += g * (1.0 - ty) * tx;
                        dx[r1 + x0] += g * ty * (1.0 - tx);
                        dx[r1 + x1] += g * ty * tx;
                    }
                }
            }
            x.accumulate_grad(&dx);
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::super::{finite_diff_check, sum_all};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Six-nested-loop reference convolution.
    pub(crate) fn conv2d_oracle(
        x: &[f64],
        (n, ci, h, w): (usize, usize, usize, usize),
        wk: &[f64],
        (co, k): (usize, usize),
        b: &[f64],
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; n * co * oh * ow];
        for ni in 0..n {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[o];
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        acc += wk[((o * ci + c) * k + ky) * k + kx]
                                            * x[((ni * ci + c) * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        out[((ni * co + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let x = Tensor::new(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0; // centre of the 3x3 kernel
        let w = Tensor::new(&[1, 1, 3, 3], k).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn one_by_one_kernel_sums_channels() {
        let x = Tensor::new(&[1, 2, 2, 2], vec![1.0; 8]).unwrap();
        let w = Tensor::new(&[1, 2, 1, 1], vec![1.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv2d_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(stride, pad, k) in &[(1usize, 0usize, 3usize), (1, 1, 3), (2, 1, 3), (2, 0, 2), (1, 2, 5)] {
            let x = rand_tensor(&mut rng, &[1, 3, 5, 5]);
            let w = rand_tensor(&mut rng, &[4, 3, k, k]);
            let b = rand_tensor(&mut rng, &[4]);
            let y = conv2d(&x, &w, &b, stride, pad).unwrap();
            let expect = conv2d_oracle(x.data(), (1, 3, 5, 5), w.data(), (4, k), b.data(), stride, pad);
            for (a, e) in y.data().iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12, "stride={stride} pad={pad} k={k}");
            }
        }
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        let w = Tensor::zeros(&[2, 4, 3, 3]);
        let b = Tensor::zeros(&[2]);
        let err = conv2d(&x, &w, &b, 1, 1).unwrap_err().to_string();
        assert!(err.contains("4") && err.contains("3"), "{err}");
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[1, 2, 4, 4]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let report = finite_diff_check(
            "conv2d",
            |inp| sum_all(&conv2d(&inp[0], &inp[1], &inp[2], 1, 1)?),
            &[x, w, b],
            1e-5,
            1e-7,
        )
        .unwrap();
        assert!(report.passed, "rel err {}", report.max_rel_error);
    }

    #[test]
    fn pool_basics() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pool2d(&x, PoolKind::Max, 2, 2).unwrap().data(), &[4.0]);
        assert_eq!(pool2d(&x, PoolKind::Avg, 2, 2).unwrap().data(), &[2.5]);
    }

    #[test]
    fn pool_rejects_oversized_window() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(pool2d(&x, PoolKind::Max, 3, 1).is_err());
    }

    #[test]
    fn pool_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[1, 2, 8, 8]);
        for kind in [PoolKind::Max, PoolKind::Avg] {
            let y = pool2d(&x, kind, 2, 2).unwrap();
            for c in 0..2 {
                for oy in 0..4 {
                    for ox in 0..4 {
                        let mut vals = Vec::new();
                        for dy in 0..2 {
                            for dx in 0..2 {
                                vals.push(x.data()[(c * 8 + oy * 2 + dy) * 8 + ox * 2 + dx]);
                            }
                        }
                        let expect = match kind {
                            PoolKind::Max => vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                            PoolKind::Avg => vals.iter().sum::<f64>() / 4.0,
                        };
                        let got = y.data()[(c * 4 + oy) * 4 + ox];
                        assert_eq!(got, expect);
                    }
                }
            }
        }
    }

    #[test]
    fn pool_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[1, 2, 6, 6]);
        for kind in [PoolKind::Max, PoolKind::Avg] {
            let report = finite_diff_check(
                "pool2d",
                |inp| sum_all(&pool2d(&inp[0], kind, 2, 2)?),
                std::slice::from_ref(&x),
                1e-5,
                1e-6,
            )
            .unwrap();
            assert!(report.passed, "{kind:?} rel err {}", report.max_rel_error);
        }
    }

    #[test]
    fn resize_preserves_constants() {
        let x = Tensor::full(&[1, 2, 3, 3], 5.0);
        let y = bilinear_resize(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 6, 6]);
        assert!(y.data().iter().all(|&v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn resize_broadcasts_single_pixel() {
        let x = Tensor::new(&[1, 1, 1, 1], vec![3.25]).unwrap();
        let y = bilinear_resize(&x, 4).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn resize_matches_hand_computed_weights() {
        // 2x2 ramp upsampled x2 under the half-pixel convention.
        let x = Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_resize(&x, 2).unwrap();
        #[rustfmt::skip]
        let expect = [
            0.0,  0.25, 0.75, 1.0,
            0.5,  0.75, 1.25, 1.5,
            1.5,  1.75, 2.25, 2.5,
            2.0,  2.25, 2.75, 3.0,
        ];
        for (a, e) in y.data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn resize_rejects_bad_factor() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(bilinear_resize(&x, 3).is_err());
        assert!(bilinear_resize(&x, 1).is_err());
    }

    #[test]
    fn resize_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[1, 1, 3, 3]);
        let report = finite_diff_check(
            "bilinear_resize",
            |inp| sum_all(&bilinear_resize(&inp[0], 2)?),
            &[x],
            1e-5,
            1e-7,
        )
        .unwrap();
        assert!(report.passed, "rel err {}", report.max_rel_error);
    }
}
