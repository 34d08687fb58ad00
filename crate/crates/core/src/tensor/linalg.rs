//! Affine maps, attention primitives, and normalization layers.

use super::{input_err, shape_err, Result, Tensor};

/// Affine map over the last dimension: `y[.., j] = sum_i x[.., i] w[i][j] + b[j]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    if xs.is_empty() {
        return Err(shape_err("linear", "input must have at least one dimension"));
    }
    let d_in = *xs.last().unwrap();
    let (wi, d_out) = match w.shape() {
        [i, o] => (*i, *o),
        other => return Err(shape_err("linear", format!("weight must be 2-D, got {other:?}"))),
    };
    if wi != d_in {
        return Err(shape_err(
            "linear",
            format!("inner dimensions differ: input ends in {d_in}, weight expects {wi}"),
        ));
    }
    if b.shape() != [d_out] {
        return Err(shape_err(
            "linear",
            format!("bias shape {:?} does not match {d_out} outputs", b.shape()),
        ));
    }
    let rows = x.numel() / d_in;
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let mut out = vec![0.0; rows * d_out];
    for r in 0..rows {
        let xrow = &xd[r * d_in..(r + 1) * d_in];
        let orow = &mut out[r * d_out..(r + 1) * d_out];
        orow.copy_from_slice(bd);
        for (i, &xv) in xrow.iter().enumerate() {
            let wrow = &wd[i * d_out..(i + 1) * d_out];
            for (o, wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
    let mut out_shape = xs.to_vec();
    *out_shape.last_mut().unwrap() = d_out;
    Ok(Tensor::from_op(
        out_shape,
        out,
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |grad, parents| {
            let (x, w, b) = (&parents[0], &parents[1], &parents[2]);
            let xd = x.data();
            let wd = w.data();
            if x.requires_grad() {
                let mut dx = vec![0.0; x.numel()];
                for r in 0..rows {
                    let grow = &grad[r * d_out..(r + 1) * d_out];
                    let drow = &mut dx[r * d_in..(r + 1) * d_in];
                    for (i, dv) in drow.iter_mut().enumerate() {
                        let wrow = &wd[i * d_out..(i + 1) * d_out];
                        *dv = grow.iter().zip(wrow).map(|(g, wv)| g * wv).sum();
                    }
                }
                x.accumulate_grad(&dx);
            }
            if w.requires_grad() {
                let mut dw = vec![0.0; w.numel()];
                for r in 0..rows {
                    let xrow = &xd[r * d_in..(r + 1) * d_in];
                    let grow = &grad[r * d_out..(r + 1) * d_out];
                    for (i, &xv) in xrow.iter().enumerate() {
                        let dwrow = &mut dw[i * d_out..(i + 1) * d_out];
                        for (dv, g) in dwrow.iter_mut().zip(grow) {
                            *dv += xv * g;
                        }
                    }
                }
                w.accumulate_grad(&dw);
            }
            if b.requires_grad() {
                let mut db = vec![0.0; d_out];
                for r in 0..rows {
                    for (dv, g) in db.iter_mut().zip(&grad[r * d_out..(r + 1) * d_out]) {
                        *dv += g;
                    }
                }
                b.accumulate_grad(&db);
            }
        }),
    ))
}

/// Plain 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = match a.shape() {
        [m, k] => (*m, *k),
        other => return Err(shape_err("matmul", format!("lhs must be 2-D, got {other:?}"))),
    };
    let (kb, n) = match b.shape() {
        [k, n] => (*k, *n),
        other => return Err(shape_err("matmul", format!("rhs must be 2-D, got {other:?}"))),
    };
    if ka != kb {
        return Err(shape_err(
            "matmul",
            format!("inner dimensions differ: {ka} vs {kb}"),
        ));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..ka {
            let av = ad[i * ka + p];
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_op(
        vec![m, n],
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |grad, parents| {
            let (a, b) = (&parents[0], &parents[1]);
            let ad = a.data();
            let bd = b.data();
            if a.requires_grad() {
                // dA = dC . B^T
                let mut da = vec![0.0; m * ka];
                for i in 0..m {
                    for p in 0..ka {
                        let brow = &bd[p * n..(p + 1) * n];
                        da[i * ka + p] = grad[i * n..(i + 1) * n]
                            .iter()
                            .zip(brow)
                            .map(|(g, bv)| g * bv)
                            .sum();
                    }
                }
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                // dB = A^T . dC
                let mut db = vec![0.0; ka * n];
                for i in 0..m {
                    for p in 0..ka {
                        let av = ad[i * ka + p];
                        let grow = &grad[i * n..(i + 1) * n];
                        let drow = &mut db[p * n..(p + 1) * n];
                        for (d, g) in drow.iter_mut().zip(grow) {
                            *d += av * g;
                        }
                    }
                }
                b.accumulate_grad(&db);
            }
        }),
    ))
}

pub fn transpose2d(x: &Tensor) -> Result<Tensor> {
    let (m, n) = match x.shape() {
        [m, n] => (*m, *n),
        other => return Err(shape_err("transpose2d", format!("expected 2-D, got {other:?}"))),
    };
    let xd = x.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = xd[i * n + j];
        }
    }
    Ok(Tensor::from_op(
        vec![n, m],
        out,
        vec![x.clone()],
        Box::new(move |grad, parents| {
            let x = &parents[0];
            if !x.requires_grad() {
                return;
            }
            let mut dx = vec![0.0; m * n];
            for j in 0..n {
                for i in 0..m {
                    dx[i * n + j] = grad[j * m + i];
                }
            }
            x.accumulate_grad(&dx);
        }),
    ))
}

/// Softmax over the last dimension, computed with max subtraction.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    if xs.is_empty() {
        return Err(shape_err("softmax_lastdim", "input must have at least one dimension"));
    }
    let d = *xs.last().unwrap();
    let rows = x.numel() / d;
    let xd = x.data();
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[r * d..(r + 1) * d];
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - m).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    let saved = out.clone();
    Ok(Tensor::from_op(
        xs.to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |grad, parents| {
            let x = &parents[0];
            if !x.requires_grad() {
                return;
            }
            let mut dx = vec![0.0; saved.len()];
            for r in 0..rows {
                let y = &saved[r * d..(r + 1) * d];
                let g = &grad[r * d..(r + 1) * d];
                let dot: f64 = y.iter().zip(g).map(|(yv, gv)| yv * gv).sum();
                for ((dv, &yv), &gv) in dx[r * d..(r + 1) * d].iter_mut().zip(y).zip(g) {
                    *dv = yv * (gv - dot);
                }
            }
            x.accumulate_grad(&dx);
        }),
    ))
}

/// Layer normalization over the last dimension with learnable affine.
/// Uses the population variance of each slice.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let xs = x.shape();
    if xs.is_empty() {
        return Err(shape_err("layer_norm", "input must have at least one dimension"));
    }
    let d = *xs.last().unwrap();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(shape_err(
            "layer_norm",
            format!(
                "gamma {:?} / beta {:?} must both have shape [{d}]",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let rows = x.numel() / d;
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut out = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[r] = inv;
        for i in 0..d {
            let h = (row[i] - mean) * inv;
            xhat[r * d + i] = h;
            out[r * d + i] = h * gd[i] + bd[i];
        }
    }
    Ok(Tensor::from_op(
        xs.to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |grad, parents| {
            let (x, gamma, beta) = (&parents[0], &parents[1], &parents[2]);
            let gd = gamma.data();
            if x.requires_grad() {
                let mut dx = vec![0.0; x.numel()];
                for r in 0..rows {
                    let h = &xhat[r * d..(r + 1) * d];
                    let g = &grad[r * d..(r + 1) * d];
                    // dxhat = g * gamma
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for i in 0..d {
                        let dh = g[i] * gd[i];
                        mean_dh += dh;
                        mean_dh_h += dh * h[i];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for i in 0..d {
                        let dh = g[i] * gd[i];
                        dx[r * d + i] = inv_std[r] * (dh - mean_dh - h[i] * mean_dh_h);
                    }
                }
                x.accumulate_grad(&dx);
            }
            if gamma.requires_grad() {
                let mut dg = vec![0.0; d];
                for r in 0..rows {
                    for i in 0..d {
                        dg[i] += grad[r * d + i] * xhat[r * d + i];
                    }
                }
                gamma.accumulate_grad(&dg);
            }
            if beta.requires_grad() {
                let mut db = vec![0.0; d];
                for r in 0..rows {
                    for i in 0..d {
                        db[i] += grad[r * d + i];
                    }
                }
                beta.accumulate_grad(&db);
            }
        }),
    ))
}

/// Inference-style batch normalization over NCHW channels with fixed
/// running statistics and learnable affine.
pub fn batch_norm_infer(
    x: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let (n, c, h, w) = match x.shape() {
        [n, c, h, w] => (*n, *c, *h, *w),
        other => {
            return Err(shape_err(
                "batch_norm_infer",
                format!("expected NCHW tensor, got {other:?}"),
            ))
        }
    };
    for (name, t) in [("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)] {
        if t.shape() != [c] {
            return Err(shape_err(
                "batch_norm_infer",
                format!("{name} shape {:?} does not match {c} channels", t.shape()),
            ));
        }
    }
    if var.data().iter().any(|&v| v + eps <= 0.0) {
        return Err(input_err("batch_norm_infer", "variance + eps must be positive"));
    }
    let hw = h * w;
    let xd = x.data();
    let inv: Vec<f64> = var.data().iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0; x.numel()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let (m, r, g, b) = (mean.data()[ci], inv[ci], gamma.data()[ci], beta.data()[ci]);
            for i in 0..hw {
                out[base + i] = (xd[base + i] - m) * r * g + b;
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, c, h, w],
        out,
        vec![x.clone(), mean.clone(), var.clone(), gamma.clone(), beta.clone()],
        Box::new(move |grad, parents| {
            let (x, mean, var, gamma, beta) =
                (&parents[0], &parents[1], &parents[2], &parents[3], &parents[4]);
            let xd = x.data();
            let gd = gamma.data();
            let md = mean.data();
            if x.requires_grad() {
                let mut dx = vec![0.0; x.numel()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let s = gd[ci] * inv[ci];
                        for i in 0..hw {
                            dx[base + i] = grad[base + i] * s;
                        }
                    }
                }
                x.accumulate_grad(&dx);
            }
            if gamma.requires_grad() {
                let mut dg = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for i in 0..hw {
                            dg[ci] += grad[base + i] * (xd[base + i] - md[ci]) * inv[ci];
                        }
                    }
                }
                gamma.accumulate_grad(&dg);
            }
            if beta.requires_grad() {
                let mut db = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for i in 0..hw {
                            db[ci] += grad[base + i];
                        }
                    }
                }
                beta.accumulate_grad(&db);
            }
            if mean.requires_grad() {
                let mut dm = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for i in 0..hw {
                            dm[ci] -= grad[base + i] * gd[ci] * inv[ci];
                        }
                    }
                }
                mean.accumulate_grad(&dm);
            }
            if var.requires_grad() {
                let mut dv = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for i in 0..hw {
                            dv[ci] += grad[base + i]
                                * gd[ci]
                                * (xd[base + i] - md[ci])
                                * (-0.5)
                                * inv[ci]
                                * inv[ci]
                                * inv[ci];
                        }
                    }
                }
                var.accumulate_grad(&dv);
            }
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

    #[test]
    fn linear_identity() {
        let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let w = Tensor::new(&[3, 3], w).unwrap();
        let b = Tensor::zeros(&[3]);
        let y = linear(&x, &w, &b).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn linear_small_case() {
        let x = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        let w = Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap();
        let b = Tensor::new(&[1], vec![1.0]).unwrap();
        let y = linear(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[3.0]);
    }

    #[test]
    fn linear_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[4, 2]);
        let b = rand_tensor(&mut rng, &[2]);
        let y = linear(&x, &w, &b).unwrap();
        for r in 0..3 {
            for o in 0..2 {
                let mut acc = b.data()[o];
                for i in 0..4 {
                    acc += x.data()[r * 4 + i] * w.data()[i * 2 + o];
                }
                assert!((y.data()[r * 2 + o] - acc).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn linear_rejects_inner_mismatch() {
        let x = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[4, 2]);
        let b = Tensor::zeros(&[2]);
        assert!(linear(&x, &w, &b).is_err());
    }

    #[test]
    fn matmul_and_transpose_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let report = finite_diff_check(
            "matmul",
            |inp| sum_all(&matmul(&inp[0], &transpose2d(&transpose2d(&inp[1])?)?)?),
            &[a, b],
            1e-5,
            1e-7,
        )
        .unwrap();
        assert!(report.passed, "rel err {}", report.max_rel_error);
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let x = Tensor::new(&[3], vec![0.0, 0.0, 0.0]).unwrap();
        let y = softmax_lastdim(&x).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = Tensor::new(&[2], vec![1000.0, 1000.0]).unwrap();
        let y = softmax_lastdim(&big).unwrap();
        assert!(y.is_finite());
        assert!((y.data()[0] - 0.5).abs() < 1e-15);
        assert!((y.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_extended_precision_oracle() {
        // softmax([1,2,3]) evaluated independently at 50-digit precision,
        // frozen here to 17 significant digits.
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = softmax_lastdim(&x).unwrap();
        let expect = [
            0.090030573170380458,
            0.24472847105479765,
            0.66524095577482189,
        ];
        for (a, e) in y.data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-15, "{a} vs {e}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[5, 7]);
        let y = softmax_lastdim(&x).unwrap();
        for r in 0..5 {
            let s: f64 = y.data()[r * 7..(r + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(y.data()[r * 7..(r + 1) * 7].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[2, 5]);
        // weight the outputs so the check exercises off-diagonal Jacobian terms
        let weights = rand_tensor(&mut rng, &[2, 5]);
        let report = finite_diff_check(
            "softmax_lastdim",
            |inp| {
                let y = softmax_lastdim(&inp[0])?;
                let weighted = super::super::eltwise(&y, &weights, super::super::EltwiseKind::Mul)?;
                sum_all(&weighted)
            },
            &[x],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "rel err {}", report.max_rel_error);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::new(&[4], vec![2.5; 4]).unwrap();
        let y = layer_norm(&x, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn layer_norm_preserves_already_normalized() {
        let x = Tensor::new(&[2], vec![1.0, -1.0]).unwrap();
        let y = layer_norm(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), 1e-15).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-7);
        assert!((y.data()[1] + 1.0).abs() < 1e-7);
    }

    #[test]
    fn layer_norm_moments_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[3, 8]);
        let y = layer_norm(&x, &Tensor::full(&[8], 1.0), &Tensor::zeros(&[8]), 1e-12).unwrap();
        for r in 0..3 {
            let row = &y.data()[r * 8..(r + 1) * 8];
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, &[2, 6]);
        let gamma = rand_tensor(&mut rng, &[6]);
        let beta = rand_tensor(&mut rng, &[6]);
        let weights = rand_tensor(&mut rng, &[2, 6]);
        let report = finite_diff_check(
            "layer_norm",
            |inp| {
                let y = layer_norm(&inp[0], &inp[1], &inp[2], 1e-5)?;
                let weighted = super::super::eltwise(&y, &weights, super::super::EltwiseKind::Mul)?;
                sum_all(&weighted)
            },
            &[x, gamma, beta],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "rel err {}", report.max_rel_error);
    }

    #[test]
    fn batch_norm_identity_and_shift() {
        let x = Tensor::new(&[1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let y = batch_norm_infer(
            &x,
            &Tensor::zeros(&[2]),
            &Tensor::full(&[2], 1.0),
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
            0.0,
        )
        .unwrap();
        assert_eq!(y.data(), x.data());

        let zeros = Tensor::zeros(&[1, 2, 2, 2]);
        let y = batch_norm_infer(
            &zeros,
            &Tensor::zeros(&[2]),
            &Tensor::full(&[2], 1.0),
            &Tensor::full(&[2], 1.0),
            &Tensor::full(&[2], 5.0),
            0.0,
        )
        .unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn batch_norm_matches_scalar_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_tensor(&mut rng, &[2, 3, 2, 2]);
        let mean = rand_tensor(&mut rng, &[3]);
        let var = Tensor::new(&[3], vec![0.5, 1.5, 2.0]).unwrap();
        let gamma = rand_tensor(&mut rng, &[3]);
        let beta = rand_tensor(&mut rng, &[3]);
        let eps = 1e-5;
        let y = batch_norm_infer(&x, &mean, &var, &gamma, &beta, eps).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for i in 0..4 {
                    let idx = (n * 3 + c) * 4 + i;
                    let expect = (x.data()[idx] - mean.data()[c]) / (var.data()[c] + eps).sqrt()
                        * gamma.data()[c]
                        + beta.data()[c];
                    assert!((y.data()[idx] - expect).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_tensor(&mut rng, &[1, 2, 3, 3]);
        let mean = rand_tensor(&mut rng, &[2]);
        let var = Tensor::new(&[2], vec![0.8, 1.2]).unwrap();
        let gamma = rand_tensor(&mut rng, &[2]);
        let beta = rand_tensor(&mut rng, &[2]);
        let report = finite_diff_check(
            "batch_norm_infer",
            |inp| {
                sum_all(&batch_norm_infer(&inp[0], &inp[1], &inp[2], &inp[3], &inp[4], 1e-5)?)
            },
            &[x, mean, var, gamma, beta],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "rel err {}", report.max_rel_error);
    }
}
