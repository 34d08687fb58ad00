//! Shape and layout operators: concatenation, token flattening, batch
//! slicing, and the single-channel spatial broadcast used by attention gates.

use super::{shape_err, Result, Tensor};

/// Concatenate NCHW tensors along the channel axis. Order is preserved and
/// backward routes each gradient slice to its source.
pub fn concat_channels(xs: &[Tensor]) -> Result<Tensor> {
    if xs.is_empty() {
        return Err(shape_err("concat_channels", "empty input list"));
    }
    let (n, h, w) = match xs[0].shape() {
        [n, _, h, w] => (*n, *h, *w),
        other => {
            return Err(shape_err(
                "concat_channels",
                format!("expected NCHW tensors, got {other:?}"),
            ))
        }
    };
    let mut channels = Vec::with_capacity(xs.len());
    for x in xs {
        match x.shape() {
            [xn, c, xh, xw] if *xn == n && *xh == h && *xw == w => channels.push(*c),
            other => {
                return Err(shape_err(
                    "concat_channels",
                    format!("shape {other:?} incompatible with [{n}, _, {h}, {w}]"),
                ))
            }
        }
    }
    let c_out: usize = channels.iter().sum();
    let hw = h * w;
    let mut out = vec![0.0; n * c_out * hw];
    for ni in 0..n {
        let mut c_off = 0;
        for (x, &c) in xs.iter().zip(&channels) {
            let src = &x.data()[ni * c * hw..(ni + 1) * c * hw];
            let dst = &mut out[(ni * c_out + c_off) * hw..(ni * c_out + c_off + c) * hw];
            dst.copy_from_slice(src);
            c_off += c;
        }
    }
    Ok(Tensor::from_op(
        vec![n, c_out, h, w],
        out,
        xs.to_vec(),
        Box::new(move |grad, parents| {
            for ni in 0..n {
                let mut c_off = 0;
                for (x, &c) in parents.iter().zip(&channels) {
                    if x.requires_grad() {
                        let mut dx = vec![0.0; x.numel()];
                        // fill this sample's slice; other samples handled in their iteration
                        dx[ni * c * hw..(ni + 1) * c * hw].copy_from_slice(
                            &grad[(ni * c_out + c_off) * hw..(ni * c_out + c_off + c) * hw],
                        );
                        x.accumulate_grad(&dx);
                    }
                    c_off += c;
                }
            }
        }),
    ))
}

/// `[C, H, W] -> [H*W, C]` token layout: element `(c, h, w)` lands at row
/// `h*W + w`, column `c`.
pub fn flatten_permute(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match x.shape() {
        [c, h, w] => (*c, *h, *w),
        other => {
            return Err(shape_err(
                "flatten_permute",
                format!("expected CHW tensor, got {other:?}"),
            ))
        }
    };
    let xd = x.data();
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for ci in 0..c {
        for p in 0..hw {
            out[p * c + ci] = xd[ci * hw + p];
        }
    }
    Ok(Tensor::from_op(
        vec![hw, c],
        out,
        vec![x.clone()],
        Box::new(move |grad, parents| {
            let x = &parents[0];
            if !x.requires_grad() {
                return;
            }
            let mut dx = vec![0.0; c * hw];
            for ci in 0..c {
                for p in 0..hw {
                    dx[ci * hw + p] = grad[p * c + ci];
                }
            }
            x.accumulate_grad(&dx);
        }),
    ))
}

/// Inverse of [`flatten_permute`]: `[H*W, C] -> [C, H, W]`.
pub fn unflatten_permute(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (t, c) = match x.shape() {
        [t, c] => (*t, *c),
        other => {
            return Err(shape_err(
                "unflatten_permute",
                format!("expected [tokens, channels] tensor, got {other:?}"),
            ))
        }
    };
    if t != h * w {
        return Err(shape_err(
            "unflatten_permute",
            format!("{t} tokens cannot fill a {h}x{w} grid"),
        ));
    }
    let xd = x.data();
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for p in 0..hw {
        for ci in 0..c {
            out[ci * hw + p] = xd[p * c + ci];
        }
    }
    Ok(Tensor::from_op(
        vec![c, h, w],
        out,
        vec![x.clone()],
        Box::new(move |grad, parents| {
            let x = &parents[0];
            if !x.requires_grad() {
                return;
            }
            let mut dx = vec![0.0; c * hw];
            for p in 0..hw {
                for ci in 0..c {
                    dx[p * c + ci] = grad[ci * hw + p];
                }
            }
            x.accumulate_grad(&dx);
        }),
    ))
}

/// Reinterpret the buffer under a new shape with the same element count.
pub fn reshape(x: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
    let numel: usize = new_shape.iter().product();
    if numel != x.numel() {
        return Err(shape_err(
            "reshape",
            format!("cannot view {:?} as {new_shape:?}", x.shape()),
        ));
    }
    Ok(Tensor::from_op(
        new_shape.to_vec(),
        x.data().to_vec(),
        vec![x.clone()],
        Box::new(|grad, parents| {
            let x = &parents[0];
            if x.requires_grad() {
                x.accumulate_grad(grad);
            }
        }),
    ))
}

/// Extract sample `i` of a batched tensor as a `[1, ...]` tensor.
pub fn slice_batch(x: &Tensor, i: usize) -> Result<Tensor> {
    let shape = x.shape();
    if shape.is_empty() {
        return Err(shape_err("slice_batch", "input must be batched"));
    }
    let n = shape[0];
    if i >= n {
        return Err(shape_err("slice_batch", format!("index {i} out of {n} samples")));
    }
    let per: usize = shape[1..].iter().product();
    let data = x.data()[i * per..(i + 1) * per].to_vec();
    let mut out_shape = shape.to_vec();
    out_shape[0] = 1;
    Ok(Tensor::from_op(
        out_shape,
        data,
        vec![x.clone()],
        Box::new(move |grad, parents| {
            let x = &parents[0];
            if !x.requires_grad() {
                return;
            }
            let mut dx = vec![0.0; x.numel()];
            dx[i * per..(i + 1) * per].copy_from_slice(grad);
            x.accumulate_grad(&dx);
        }),
    ))
}

/// Stack `[1, ...]` tensors of identical shape into one batch.
pub fn stack_batch(xs: &[Tensor]) -> Result<Tensor> {
    if xs.is_empty() {
        return Err(shape_err("stack_batch", "empty input list"));
    }
    let first = xs[0].shape();
    if first.is_empty() || first[0] != 1 {
        return Err(shape_err(
            "stack_batch",
            format!("expected [1, ...] tensors, got {first:?}"),
        ));
    }
    for x in xs {
        if x.shape() != first {
            return Err(shape_err(
                "stack_batch",
                format!("shape {:?} differs from {first:?}", x.shape()),
            ));
        }
    }
    let per: usize = first[1..].iter().product();
    let mut out = Vec::with_capacity(xs.len() * per);
    for x in xs {
        out.extend_from_slice(x.data());
    }
    let mut out_shape = first.to_vec();
    out_shape[0] = xs.len();
    Ok(Tensor::from_op(
        out_shape,
        out,
        xs.to_vec(),
        Box::new(move |grad, parents| {
            for (i, x) in parents.iter().enumerate() {
                if x.requires_grad() {
                    x.accumulate_grad(&grad[i * per..(i + 1) * per]);
                }
            }
        }),
    ))
}

/// Multiply every channel of `x: [N, C, H, W]` by a one-channel map
/// `a: [N, 1, H, W]`.
pub fn broadcast_mul_channel(x: &Tensor, a: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = match x.shape() {
        [n, c, h, w] => (*n, *c, *h, *w),
        other => {
            return Err(shape_err(
                "broadcast_mul_channel",
                format!("expected NCHW tensor, got {other:?}"),
            ))
        }
    };
    if a.shape() != [n, 1, h, w] {
        return Err(shape_err(
            "broadcast_mul_channel",
            format!("gate shape {:?} does not match [{n}, 1, {h}, {w}]", a.shape()),
        ));
    }
    let hw = h * w;
    let xd = x.data();
    let ad = a.data();
    let mut out = vec![0.0; x.numel()];
    for ni in 0..n {
        let gate = &ad[ni * hw..(ni + 1) * hw];
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for i in 0..hw {
                out[base + i] = xd[base + i] * gate[i];
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, c, h, w],
        out,
        vec![x.clone(), a.clone()],
        Box::new(move |grad, parents| {
            let (x, a) = (&parents[0], &parents[1]);
            let xd = x.data();
            let ad = a.data();
            if x.requires_grad() {
                let mut dx = vec![0.0; x.numel()];
                for ni in 0..n {
                    let gate = &ad[ni * hw..(ni + 1) * hw];
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for i in 0..hw {
                            dx[base + i] = grad[base + i] * gate[i];
                        }
                    }
                }
                x.accumulate_grad(&dx);
            }
            if a.requires_grad() {
                let mut da = vec![0.0; a.numel()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for i in 0..hw {
                            da[ni * hw + i] += grad[base + i] * xd[base + i];
                        }
                    }
                }
                a.accumulate_grad(&da);
            }
        }),
    ))
}
