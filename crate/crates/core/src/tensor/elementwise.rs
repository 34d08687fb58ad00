//! Pointwise operators and scalar reductions.

use super::{input_err, shape_err, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActKind {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EltwiseKind {
    Add,
    Sub,
    Mul,
}

/// Numerically stable scalar sigmoid.
pub fn sigmoid_value(x: f64) -> f64 {
    stable_sigmoid(x)
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation(x: &Tensor, kind: ActKind) -> Result<Tensor> {
    let data: Vec<f64> = match kind {
        ActKind::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
        ActKind::Sigmoid => x.data().iter().map(|&v| stable_sigmoid(v)).collect(),
    };
    let saved = data.clone();
    let shape = x.shape().to_vec();
    Ok(Tensor::from_op(
        shape,
        data,
        vec![x.clone()],
        Box::new(move |grad, parents| {
            let x = &parents[0];
            if !x.requires_grad() {
                return;
            }
            let dx: Vec<f64> = match kind {
                ActKind::Relu => grad
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect(),
                ActKind::Sigmoid => grad
                    .iter()
                    .zip(&saved)
                    .map(|(&g, &s)| g * s * (1.0 - s))
                    .collect(),
            };
            x.accumulate_grad(&dx);
        }),
    ))
}

pub fn eltwise(a: &Tensor, b: &Tensor, kind: EltwiseKind) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            "eltwise",
            format!("operand shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| match kind {
            EltwiseKind::Add => x + y,
            EltwiseKind::Sub => x - y,
            EltwiseKind::Mul => x * y,
        })
        .collect();
    let shape = a.shape().to_vec();
    Ok(Tensor::from_op(
        shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |grad, parents| {
            let (a, b) = (&parents[0], &parents[1]);
            match kind {
                EltwiseKind::Add => {
                    if a.requires_grad() {
                        a.accumulate_grad(grad);
                    }
                    if b.requires_grad() {
                        b.accumulate_grad(grad);
                    }
                }
                EltwiseKind::Sub => {
                    if a.requires_grad() {
                        a.accumulate_grad(grad);
                    }
                    if b.requires_grad() {
                        let db: Vec<f64> = grad.iter().map(|g| -g).collect();
                        b.accumulate_grad(&db);
                    }
                }
                EltwiseKind::Mul => {
                    if a.requires_grad() {
                        let da: Vec<f64> =
                            grad.iter().zip(b.data()).map(|(&g, &y)| g * y).collect();
                        a.accumulate_grad(&da);
                    }
                    if b.requires_grad() {
                        let db: Vec<f64> =
                            grad.iter().zip(a.data()).map(|(&g, &x)| g * x).collect();
                        b.accumulate_grad(&db);
                    }
                }
            }
        }),
    ))
}

/// Elementwise maximum; ties route the gradient to the first operand.
pub fn maximum(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            "maximum",
            format!("operand shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x.max(y))
        .collect();
    let shape = a.shape().to_vec();
    Ok(Tensor::from_op(
        shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |grad, parents| {
            let (a, b) = (&parents[0], &parents[1]);
            if a.requires_grad() {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(&g, (&x, &y))| if x >= y { g } else { 0.0 })
                    .collect();
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let db: Vec<f64> = grad
                    .iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(&g, (&x, &y))| if y > x { g } else { 0.0 })
                    .collect();
                b.accumulate_grad(&db);
            }
        }),
    ))
}

pub fn scalar_mul(x: &Tensor, c: f64) -> Result<Tensor> {
    let data = x.data().iter().map(|&v| v * c).collect();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |grad, parents| {
            let x = &parents[0];
            if x.requires_grad() {
                let dx: Vec<f64> = grad.iter().map(|&g| g * c).collect();
                x.accumulate_grad(&dx);
            }
        }),
    ))
}

pub fn scalar_add(x: &Tensor, c: f64) -> Result<Tensor> {
    let data = x.data().iter().map(|&v| v + c).collect();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |grad, parents| {
            let x = &parents[0];
            if x.requires_grad() {
                x.accumulate_grad(grad);
            }
        }),
    ))
}

/// Sum of all elements, as a one-element tensor.
pub fn sum_all(x: &Tensor) -> Result<Tensor> {
    let total: f64 = x.data().iter().sum();
    Ok(Tensor::from_op(
        vec![1],
        vec![total],
        vec![x.clone()],
        Box::new(|grad, parents| {
            let x = &parents[0];
            if x.requires_grad() {
                let dx = vec![grad[0]; x.numel()];
                x.accumulate_grad(&dx);
            }
        }),
    ))
}

/// Elementwise 1/x. Rejects zero entries rather than producing infinities.
pub fn reciprocal(x: &Tensor) -> Result<Tensor> {
    if x.data().iter().any(|&v| v == 0.0) {
        return Err(input_err("reciprocal", "input contains a zero entry"));
    }
    let data: Vec<f64> = x.data().iter().map(|&v| 1.0 / v).collect();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(|grad, parents| {
            let x = &parents[0];
            if x.requires_grad() {
                let dx: Vec<f64> = grad
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &v)| -g / (v * v))
                    .collect();
                x.accumulate_grad(&dx);
            }
        }),
    ))
}

/// ln(max(x, floor)); the gradient is zero wherever the clamp is active.
pub fn ln_clamped(x: &Tensor, floor: f64) -> Result<Tensor> {
    if floor <= 0.0 {
        return Err(input_err("ln_clamped", "floor must be positive"));
    }
    let data: Vec<f64> = x.data().iter().map(|&v| v.max(floor).ln()).collect();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |grad, parents| {
            let x = &parents[0];
            if x.requires_grad() {
                let dx: Vec<f64> = grad
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &v)| if v > floor { g / v } else { 0.0 })
                    .collect();
                x.accumulate_grad(&dx);
            }
        }),
    ))
}

/// Per-element binary cross-entropy from logits, in the overflow-free form
/// `max(x, 0) - x*y + ln(1 + exp(-|x|))`.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if logits.shape() != targets.shape() {
        return Err(shape_err(
            "bce_with_logits",
            format!(
                "logits {:?} vs targets {:?}",
                logits.shape(),
                targets.shape()
            ),
        ));
    }
    let data: Vec<f64> = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
        .collect();
    let shape = logits.shape().to_vec();
    Ok(Tensor::from_op(
        shape,
        data,
        vec![logits.clone(), targets.clone()],
        Box::new(|grad, parents| {
            let (logits, targets) = (&parents[0], &parents[1]);
            if logits.requires_grad() {
                let dx: Vec<f64> = grad
                    .iter()
                    .zip(logits.data().iter().zip(targets.data()))
                    .map(|(&g, (&x, &y))| g * (stable_sigmoid(x) - y))
                    .collect();
                logits.accumulate_grad(&dx);
            }
            if targets.requires_grad() {
                let dy: Vec<f64> = grad
                    .iter()
                    .zip(logits.data())
                    .map(|(&g, &x)| -g * x)
                    .collect();
                targets.accumulate_grad(&dy);
            }
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_and_sigmoid_basics() {
        let x = Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let r = activation(&x, ActKind::Relu).unwrap();
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        let s = activation(&Tensor::scalar(0.0), ActKind::Sigmoid).unwrap();
        assert_eq!(s.item(), 0.5);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let x = Tensor::new(&[2], vec![1000.0, -1000.0]).unwrap();
        let s = activation(&x, ActKind::Sigmoid).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert_eq!(s.data()[1], 0.0);
        assert!(s.is_finite());
    }

    #[test]
    fn eltwise_identities() {
        let a = Tensor::new(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let ones = Tensor::full(&[4], 1.0);
        let zeros = Tensor::zeros(&[4]);
        assert_eq!(eltwise(&a, &ones, EltwiseKind::Mul).unwrap().data(), a.data());
        assert_eq!(eltwise(&a, &zeros, EltwiseKind::Add).unwrap().data(), a.data());
        let diff = eltwise(&a, &a, EltwiseKind::Sub).unwrap();
        assert!(diff.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eltwise_rejects_shape_mismatch() {
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[4]);
        assert!(eltwise(&a, &b, EltwiseKind::Add).is_err());
    }

    #[test]
    fn product_rule_gradient_matches_finite_difference() {
        use super::super::gradcheck::finite_diff_check;
        let a = Tensor::new(&[4], vec![0.3, -1.2, 0.7, 2.0]).unwrap();
        let b = Tensor::new(&[4], vec![1.5, 0.4, -0.6, 0.9]).unwrap();
        let report = finite_diff_check(
            "eltwise_mul",
            |inputs| {
                let prod = eltwise(&inputs[0], &inputs[1], EltwiseKind::Mul)?;
                sum_all(&prod)
            },
            &[a, b],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "rel err {}", report.max_rel_error);
    }

    #[test]
    fn sigmoid_gradient_matches_finite_difference() {
        use super::super::gradcheck::finite_diff_check;
        let x = Tensor::new(&[5], vec![-2.0, -0.3, 0.0, 0.7, 1.9]).unwrap();
        let report = finite_diff_check(
            "sigmoid",
            |inputs| sum_all(&activation(&inputs[0], ActKind::Sigmoid)?),
            &[x],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "rel err {}", report.max_rel_error);
    }

    #[test]
    fn maximum_picks_larger_and_routes_gradient() {
        let a = Tensor::new_param(&[3], vec![1.0, 5.0, 2.0]).unwrap();
        let b = Tensor::new_param(&[3], vec![4.0, 5.0, -1.0]).unwrap();
        let m = maximum(&a, &b).unwrap();
        assert_eq!(m.data(), &[4.0, 5.0, 2.0]);
        sum_all(&m).unwrap().backward().unwrap();
        // tie at index 1 routes to `a`
        assert_eq!(a.grad().unwrap(), vec![0.0, 1.0, 1.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn bce_with_logits_matches_naive_formula() {
        let x = Tensor::new(&[4], vec![-3.0, -0.5, 0.5, 3.0]).unwrap();
        let y = Tensor::new(&[4], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let out = bce_with_logits(&x, &y).unwrap();
        for i in 0..4 {
            let p = stable_sigmoid(x.data()[i]);
            let naive = -(y.data()[i] * p.ln() + (1.0 - y.data()[i]) * (1.0 - p).ln());
            assert!((out.data()[i] - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn ln_clamped_floors_and_zeroes_gradient() {
        let x = Tensor::new_param(&[2], vec![0.0, 1.0]).unwrap();
        let l = ln_clamped(&x, 1e-12).unwrap();
        assert_eq!(l.data()[0], (1e-12f64).ln());
        assert_eq!(l.data()[1], 0.0);
        sum_all(&l).unwrap().backward().unwrap();
        let g = x.grad().unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 1.0);
    }

    #[test]
    fn reciprocal_rejects_zero() {
        let x = Tensor::new(&[2], vec![1.0, 0.0]).unwrap();
        assert!(reciprocal(&x).is_err());
    }
}
