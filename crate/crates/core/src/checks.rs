//! Gradient-check entry points: per-operator sweeps, module-level sweeps,
//! and a whole-network check against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distractor::{distractor_targets, Distractor};
use crate::fusion::Fusion;
use crate::grafting::{GraftPoolKind, GraftedPyramid, Grafting};
use crate::losses::{balanced_bce, structure_loss, total_loss, LossConfig};
use crate::model::{Network, NetworkConfig};
use crate::tensor::{
    self, finite_diff_check, finite_diff_check_sampled, GradCheckReport, Tensor,
};
use crate::Result;

pub const CHECK_H: f64 = 1e-5;
pub const CHECK_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckScope {
    /// Every numeric-core operator at random points.
    Ops,
    /// The grafting, fusion, distractor, and loss stages on small inputs.
    Modules,
    /// Every parameter of the assembled network, sampled coordinates.
    Full,
    /// A deliberately corrupted gradient; must report failure.
    Negative,
}

impl std::str::FromStr for CheckScope {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<CheckScope> {
        match s {
            "ops" => Ok(CheckScope::Ops),
            "modules" => Ok(CheckScope::Modules),
            "full" => Ok(CheckScope::Full),
            "negative" => Ok(CheckScope::Negative),
            other => Err(crate::invalid(format!(
                "unknown gradcheck scope {other:?} (expected ops, modules, full, or negative)"
            ))),
        }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("shape")
}

fn rand_binary(rng: &mut ChaCha8Rng, shape: &[usize], p: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| if rng.random_range(0.0..1.0) < p { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

/// Reduce an op output to a scalar with fixed random weights so the check
/// exercises off-diagonal Jacobian entries.
fn weighted_sum(out: &Tensor, weights: &Tensor) -> tensor::Result<Tensor> {
    tensor::sum_all(&tensor::eltwise(out, weights, tensor::EltwiseKind::Mul)?)
}

/// One operator checked at `points` random input draws; reports the worst
/// errors across all draws.
fn check_op<F>(
    name: &str,
    points: usize,
    rng: &mut ChaCha8Rng,
    mut make_case: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&[Tensor]) -> tensor::Result<Tensor>>),
{
    let mut worst_rel: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    for _ in 0..points {
        let (inputs, f) = make_case(rng);
        let report = finite_diff_check(name, |inp| f(inp), &inputs, CHECK_H, CHECK_TOL)
            .map_err(crate::Error::Tensor)?;
        worst_rel = worst_rel.max(report.max_rel_error);
        worst_abs = worst_abs.max(report.max_abs_error);
    }
    Ok(GradCheckReport {
        op_name: name.to_string(),
        max_rel_error: worst_rel,
        max_abs_error: worst_abs,
        passed: worst_rel < CHECK_TOL,
    })
}

/// Gradient-check every numeric-core operator at `points` random points.
pub fn check_ops(seed: u64, points: usize) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    reports.push(check_op("conv2d", points, &mut rng, |rng| {
        let x = rand_tensor(rng, &[1, 2, 4, 4], -1.0, 1.0);
        let w = rand_tensor(rng, &[3, 2, 3, 3], -1.0, 1.0);
        let b = rand_tensor(rng, &[3], -1.0, 1.0);
        let weights = rand_tensor(rng, &[1, 3, 4, 4], -1.0, 1.0);
        (
            vec![x, w, b],
            Box::new(move |inp| {
                weighted_sum(&tensor::conv2d(&inp[0], &inp[1], &inp[2], 1, 1)?, &weights)
            }),
        )
    })?);

    reports.push(check_op("pool2d_max", points, &mut rng, |rng| {
        let x = rand_tensor(rng, &[1, 2, 6, 6], -1.0, 1.0);
        let weights = rand_tensor(rng, &[1, 2, 3, 3], -1.0, 1.0);
        (
            vec![x],
            Box::new(move |inp| {
                weighted_sum(&tensor::pool2d(&inp[0], tensor::PoolKind::Max, 2, 2)?, &weights)
            }),
        )
    })?);

    reports.push(check_op("pool2d_avg", points, &mut rng, |rng| {
        let x = rand_tensor(rng, &[1, 2, 6, 6], -1.0, 1.0);
        let weights = rand_tensor(rng, &[1, 2, 3, 3], -1.0, 1.0);
        (
            vec![x],
            Box::new(move |inp| {
                weighted_sum(&tensor::pool2d(&inp[0], tensor::PoolKind::Avg, 2, 2)?, &weights)
            }),
        )
    })?);

    reports.push(check_op("bilinear_resize", points, &mut rng, |rng| {
        let x = rand_tensor(rng, &[1, 2, 3, 3], -1.0, 1.0);
        let weights = rand_tensor(rng, &[1, 2, 6, 6], -1.0, 1.0);
        (
            vec![x],
            Box::new(move |inp| weighted_sum(&tensor::bilinear_resize(&inp[0], 2)?, &weights)),
        )
    })?);

    reports.push(check_op("linear", points, &mut rng, |rng| {
        let x = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let w = rand_tensor(rng, &[4, 2], -1.0, 1.0);
        let b = rand_tensor(rng, &[2], -1.0, 1.0);
        let weights = rand_tensor(rng, &[3, 2], -1.0, 1.0);
        (
            vec![x, w, b],
            Box::new(move |inp| weighted_sum(&tensor::linear(&inp[0], &inp[1], &inp[2])?, &weights)),
        )
    })?);

    reports.push(check_op("matmul_transpose", points, &mut rng, |rng| {
        let a = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(rng, &[2, 4], -1.0, 1.0);
        let weights = rand_tensor(rng, &[3, 2], -1.0, 1.0);
        (
            vec![a, b],
            Box::new(move |inp| {
                weighted_sum(&tensor::matmul(&inp[0], &tensor::transpose2d(&inp[1])?)?, &weights)
            }),
        )
    })?);

    reports.push(check_op("softmax_lastdim", points, &mut rng, |rng| {
        let x = rand_tensor(rng, &[3, 5], -2.0, 2.0);
        let weights = rand_tensor(rng, &[3, 5], -1.0, 1.0);
        (
            vec![x],
            Box::new(move |inp| weighted_sum(&tensor::softmax_lastdim(&inp[0])?, &weights)),
        )
    })?);

    reports.push(check_op("layer_norm", points, &mut rng, |rng| {
        let x = rand_tensor(rng, &[2, 6], -1.0, 1.0);
        let gamma = rand_tensor(rng, &[6], 0.5, 1.5);
        let beta = rand_tensor(rng, &[6], -0.5, 0.5);
        let weights = rand_tensor(rng, &[2, 6], -1.0, 1.0);
        (
            vec![x, gamma, beta],
            Box::new(move |inp| {
                weighted_sum(&tensor::layer_norm(&inp[0], &inp[1], &inp[2], 1e-5)?, &weights)
            }),
        )
    })?);

    reports.push(check_op("batch_norm_infer", points, &mut rng, |rng| {
        let x = rand_tensor(rng, &[1, 3, 3, 3], -1.0, 1.0);
        let mean = rand_tensor(rng, &[3], -0.5, 0.5);
        let var = rand_tensor(rng, &[3], 0.5, 1.5);
        let gamma = rand_tensor(rng, &[3], 0.5, 1.5);
        let beta = rand_tensor(rng, &[3], -0.5, 0.5);
        let weights = rand_tensor(rng, &[1, 3, 3, 3], -1.0, 1.0);
        (
            vec![x, mean, var, gamma, beta],
            Box::new(move |inp| {
                weighted_sum(
                    &tensor::batch_norm_infer(&inp[0], &inp[1], &inp[2], &inp[3], &inp[4], 1e-5)?,
                    &weights,
                )
            }),
        )
    })?);

    reports.push(check_op("relu", points, &mut rng, |rng| {
        let x = rand_tensor(rng, &[10], -1.0, 1.0);
        let weights = rand_tensor(rng, &[10], -1.0, 1.0);
        (
            vec![x],
            Box::new(move |inp| {
                weighted_sum(&tensor::activation(&inp[0], tensor::ActKind::Relu)?, &weights)
            }),
        )
    })?);

    reports.push(check_op("sigmoid", points, &mut rng, |rng| {
        let x = rand_tensor(rng, &[10], -3.0, 3.0);
        let weights = rand_tensor(rng, &[10], -1.0, 1.0);
        (
            vec![x],
            Box::new(move |inp| {
                weighted_sum(&tensor::activation(&inp[0], tensor::ActKind::Sigmoid)?, &weights)
            }),
        )
    })?);

    for (name, kind) in [
        ("eltwise_add", tensor::EltwiseKind::Add),
        ("eltwise_sub", tensor::EltwiseKind::Sub),
        ("eltwise_mul", tensor::EltwiseKind::Mul),
    ] {
        reports.push(check_op(name, points, &mut rng, |rng| {
            let a = rand_tensor(rng, &[8], -1.0, 1.0);
            let b = rand_tensor(rng, &[8], -1.0, 1.0);
            let weights = rand_tensor(rng, &[8], -1.0, 1.0);
            (
                vec![a, b],
                Box::new(move |inp| weighted_sum(&tensor::eltwise(&inp[0], &inp[1], kind)?, &weights)),
            )
        })?);
    }

    reports.push(check_op("maximum", points, &mut rng, |rng| {
        let a = rand_tensor(rng, &[8], -1.0, 1.0);
        let b = rand_tensor(rng, &[8], -1.0, 1.0);
        let weights = rand_tensor(rng, &[8], -1.0, 1.0);
        (
            vec![a, b],
            Box::new(move |inp| weighted_sum(&tensor::maximum(&inp[0], &inp[1])?, &weights)),
        )
    })?);

    reports.push(check_op("concat_channels", points, &mut rng, |rng| {
        let a = rand_tensor(rng, &[1, 1, 3, 3], -1.0, 1.0);
        let b = rand_tensor(rng, &[1, 2, 3, 3], -1.0, 1.0);
        let weights = rand_tensor(rng, &[1, 3, 3, 3], -1.0, 1.0);
        (
            vec![a, b],
            Box::new(move |inp| {
                weighted_sum(&tensor::concat_channels(&[inp[0].clone(), inp[1].clone()])?, &weights)
            }),
        )
    })?);

    reports.push(check_op("flatten_permute_round_trip", points, &mut rng, |rng| {
        let x = rand_tensor(rng, &[3, 2, 4], -1.0, 1.0);
        let weights = rand_tensor(rng, &[3, 2, 4], -1.0, 1.0);
        (
            vec![x],
            Box::new(move |inp| {
                let back = tensor::unflatten_permute(&tensor::flatten_permute(&inp[0])?, 2, 4)?;
                weighted_sum(&back, &weights)
            }),
        )
    })?);

    reports.push(check_op("broadcast_mul_channel", points, &mut rng, |rng| {
        let x = rand_tensor(rng, &[1, 3, 3, 3], -1.0, 1.0);
        let a = rand_tensor(rng, &[1, 1, 3, 3], -1.0, 1.0);
        let weights = rand_tensor(rng, &[1, 3, 3, 3], -1.0, 1.0);
        (
            vec![x, a],
            Box::new(move |inp| {
                weighted_sum(&tensor::broadcast_mul_channel(&inp[0], &inp[1])?, &weights)
            }),
        )
    })?);

    reports.push(check_op("slice_stack_batch", points, &mut rng, |rng| {
        let x = rand_tensor(rng, &[2, 1, 2, 2], -1.0, 1.0);
        let weights = rand_tensor(rng, &[2, 1, 2, 2], -1.0, 1.0);
        (
            vec![x],
            Box::new(move |inp| {
                let a = tensor::slice_batch(&inp[0], 0)?;
                let b = tensor::slice_batch(&inp[0], 1)?;
                weighted_sum(&tensor::stack_batch(&[b, a])?, &weights)
            }),
        )
    })?);

    reports.push(check_op("scalar_ops_sum", points, &mut rng, |rng| {
        let x = rand_tensor(rng, &[6], -1.0, 1.0);
        (
            vec![x],
            Box::new(move |inp| {
                tensor::sum_all(&tensor::scalar_add(&tensor::scalar_mul(&inp[0], 2.5)?, -0.75)?)
            }),
        )
    })?);

    reports.push(check_op("reciprocal", points, &mut rng, |rng| {
        let x = rand_tensor(rng, &[6], 0.5, 2.0);
        let weights = rand_tensor(rng, &[6], -1.0, 1.0);
        (
            vec![x],
            Box::new(move |inp| weighted_sum(&tensor::reciprocal(&inp[0])?, &weights)),
        )
    })?);

    reports.push(check_op("ln_clamped", points, &mut rng, |rng| {
        let x = rand_tensor(rng, &[6], 0.1, 1.0);
        let weights = rand_tensor(rng, &[6], -1.0, 1.0);
        (
            vec![x],
            Box::new(move |inp| weighted_sum(&tensor::ln_clamped(&inp[0], 1e-12)?, &weights)),
        )
    })?);

    reports.push(check_op("bce_with_logits", points, &mut rng, |rng| {
        let x = rand_tensor(rng, &[8], -3.0, 3.0);
        let y = rand_binary(rng, &[8], 0.5);
        let weights = rand_tensor(rng, &[8], -1.0, 1.0);
        (
            vec![x, y],
            Box::new(move |inp| weighted_sum(&tensor::bce_with_logits(&inp[0], &inp[1])?, &weights)),
        )
    })?);

    Ok(reports)
}

/// Gradient-check the grafting, fusion, distractor, and loss stages on
/// small random inputs.
pub fn check_modules(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    let graft = Grafting::new(&mut rng, [2, 3, 4, 5], 6, 4, GraftPoolKind::Max);
    let g1 = rand_tensor(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
    let f2 = rand_tensor(&mut rng, &[1, 3, 4, 4], -1.0, 1.0);
    reports.push(finite_diff_check(
        "grafting.pool_graft",
        |inp: &[Tensor]| -> Result<Tensor> { Ok(tensor::sum_all(&graft.graft_2.forward(&inp[0], &inp[1])?)?) },
        &[g1, f2],
        CHECK_H,
        CHECK_TOL,
    )?);
    let g3 = rand_tensor(&mut rng, &[1, 4, 2, 2], -1.0, 1.0);
    let f4 = rand_tensor(&mut rng, &[1, 5, 2, 2], -1.0, 1.0);
    reports.push(finite_diff_check(
        "grafting.cross_attention",
        |inp: &[Tensor]| -> Result<Tensor> { Ok(tensor::sum_all(&graft.graft_4.forward(&inp[0], &inp[1])?)?) },
        &[g3, f4],
        CHECK_H,
        CHECK_TOL,
    )?);

    let fusion = Fusion::new(&mut rng, 2);
    let levels = [
        rand_tensor(&mut rng, &[1, 2, 8, 8], -1.0, 1.0),
        rand_tensor(&mut rng, &[1, 2, 4, 4], -1.0, 1.0),
        rand_tensor(&mut rng, &[1, 2, 2, 2], -1.0, 1.0),
        rand_tensor(&mut rng, &[1, 2, 1, 1], -1.0, 1.0),
    ];
    reports.push(finite_diff_check(
        "fusion.decode",
        |inp: &[Tensor]| -> Result<Tensor> {
            let gp = GraftedPyramid { levels: inp.to_vec(), channels: 2 };
            Ok(tensor::sum_all(&fusion.decode(&gp)?.coarse)?)
        },
        &levels,
        CHECK_H,
        CHECK_TOL,
    )?);

    let dam = Distractor::new(&mut rng, 2);
    let feat = rand_tensor(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
    let coarse = rand_tensor(&mut rng, &[1, 1, 4, 4], -1.0, 1.0);
    reports.push(finite_diff_check(
        "distractor.refine",
        |inp: &[Tensor]| -> Result<Tensor> {
            let bundle = dam.refine(&inp[0], &inp[1])?;
            let s = tensor::sum_all(&bundle.refined)?;
            let s = tensor::eltwise(&s, &tensor::sum_all(&bundle.fn_pred)?, tensor::EltwiseKind::Add)?;
            Ok(tensor::eltwise(&s, &tensor::sum_all(&bundle.fp_pred)?, tensor::EltwiseKind::Add)?)
        },
        &[feat, coarse],
        CHECK_H,
        CHECK_TOL,
    )?);

    let gt = rand_binary(&mut rng, &[1, 1, 6, 6], 0.4);
    let pred = rand_tensor(&mut rng, &[1, 1, 6, 6], -2.0, 2.0);
    let gt_s = gt.clone();
    reports.push(finite_diff_check(
        "losses.structure",
        move |inp: &[Tensor]| structure_loss(&inp[0], &gt_s),
        std::slice::from_ref(&pred),
        CHECK_H,
        CHECK_TOL,
    )?);
    let gt_b = gt.clone();
    reports.push(finite_diff_check(
        "losses.balanced_bce",
        move |inp: &[Tensor]| balanced_bce(&inp[0], &gt_b, false),
        &[pred],
        CHECK_H,
        CHECK_TOL,
    )?);

    Ok(reports)
}

/// Check every parameter of a network against central finite differences of
/// the full training loss, at `coords_per_param` sampled coordinates each.
///
/// The distractor targets are piecewise constant in the parameters and the
/// analytic gradient holds them fixed, so a finite-difference step must not
/// cross a binarization boundary; when a step flips any target pixel, the
/// step shrinks for that coordinate until both evaluations stay on the base
/// piece. Errors at or below the f64 central-difference noise floor do not
/// count against the tolerance.
pub fn gradcheck_network(
    net: &Network,
    image: &Tensor,
    gt: &Tensor,
    loss_cfg: &LossConfig,
    h: f64,
    tol: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<Vec<GradCheckReport>> {
    use rand::seq::SliceRandom;

    let loss_and_targets = |net: &Network| -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let pass = net.forward(image)?;
        let targets = distractor_targets(&pass.bundle.coarse, gt)?;
        let breakdown = total_loss(&pass.bundle, &targets, gt, loss_cfg)?;
        Ok((
            breakdown.total.item(),
            targets.fn_gt.data().to_vec(),
            targets.fp_gt.data().to_vec(),
        ))
    };

    // Analytic gradients from one tracked pass.
    let pass = net.forward(image)?;
    let targets = distractor_targets(&pass.bundle.coarse, gt)?;
    let base_fn = targets.fn_gt.data().to_vec();
    let base_fp = targets.fp_gt.data().to_vec();
    let breakdown = total_loss(&pass.bundle, &targets, gt, loss_cfg)?;
    let loss_scale = breakdown.total.item();
    breakdown.total.backward()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for param in net.params() {
        let tensor = param.get();
        let analytic = tensor.grad().unwrap_or_else(|| vec![0.0; tensor.numel()]);
        let base = tensor.data().to_vec();
        let mut coords: Vec<usize> = (0..base.len()).collect();
        if coords.len() > coords_per_param {
            coords.shuffle(&mut rng);
            coords.truncate(coords_per_param);
        }
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &j in &coords {
            // A wrong gradient disagrees at every step size; finite-difference
            // artifacts (truncation at large steps, quantization at small
            // ones, target flips) do not. Shrink the step until the estimate
            // agrees or the step budget runs out, and score the best attempt.
            let a = analytic[j];
            let mut best_rel = f64::INFINITY;
            let mut best_abs = f64::INFINITY;
            let mut step = h;
            for _ in 0..4 {
                let mut bumped = base.clone();
                bumped[j] += step;
                param.set_data(bumped.clone())?;
                let (plus, fn_p, fp_p) = loss_and_targets(net)?;
                bumped[j] = base[j] - step;
                param.set_data(bumped)?;
                let (minus, fn_m, fp_m) = loss_and_targets(net)?;
                param.set_data(base.clone())?;
                let on_base_piece =
                    fn_p == base_fn && fp_p == base_fp && fn_m == base_fn && fp_m == base_fp;
                if on_base_piece {
                    let numeric = (plus - minus) / (2.0 * step);
                    let noise = tensor::gradcheck::fd_noise_floor(loss_scale, step);
                    let excess = ((a - numeric).abs() - noise).max(0.0);
                    let rel = excess / a.abs().max(numeric.abs()).max(1e-8);
                    if rel < best_rel {
                        best_rel = rel;
                        best_abs = (a - numeric).abs();
                    }
                    if best_rel < tol {
                        break;
                    }
                }
                step /= 10.0;
            }
            max_rel = max_rel.max(best_rel);
            if best_abs.is_finite() {
                max_abs = max_abs.max(best_abs);
            }
        }
        reports.push(GradCheckReport {
            op_name: param.name().to_string(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            passed: max_rel < tol,
        });
    }
    Ok(reports)
}

/// Standard whole-network check: toy network at main size 32, one random
/// image, four sampled coordinates per parameter.
pub fn check_full(seed: u64) -> Result<Vec<GradCheckReport>> {
    let net = Network::new(NetworkConfig { seed, ..Default::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let image = rand_tensor(&mut rng, &[1, 3, 32, 32], -0.5, 0.5);
    let gt = rand_binary(&mut rng, &[1, 1, 16, 16], 0.35);
    gradcheck_network(&net, &image, &gt, &LossConfig::default(), CHECK_H, CHECK_TOL, 4, seed)
}

/// A gradient that is wrong on purpose: the check must fail.
pub fn check_negative_control() -> Result<Vec<GradCheckReport>> {
    let report = finite_diff_check_sampled(
        "negative_control",
        |inp: &[Tensor]| -> tensor::Result<Tensor> {
            // square with a backward that claims d(x^2)/dx = 3x
            let x = &inp[0];
            let data: Vec<f64> = x.data().iter().map(|&v| v * v).collect();
            let corrupted = Tensor::from_op(
                x.shape().to_vec(),
                data,
                vec![x.clone()],
                Box::new(|grad, parents| {
                    let x = &parents[0];
                    if x.requires_grad() {
                        let dx: Vec<f64> =
                            grad.iter().zip(x.data()).map(|(&g, &v)| g * 3.0 * v).collect();
                        x.accumulate_grad(&dx);
                    }
                }),
            );
            tensor::sum_all(&corrupted)
        },
        &[Tensor::new(&[4], vec![0.7, -1.3, 2.1, 0.4]).map_err(crate::Error::Tensor)?],
        CHECK_H,
        CHECK_TOL,
        usize::MAX,
        0,
    )
    .map_err(crate::Error::Tensor)?;
    Ok(vec![report])
}

/// Run one scope and return its reports.
pub fn run_gradcheck(scope: CheckScope, seed: u64) -> Result<Vec<GradCheckReport>> {
    match scope {
        CheckScope::Ops => check_ops(seed, 10),
        CheckScope::Modules => check_modules(seed),
        CheckScope::Full => check_full(seed),
        CheckScope::Negative => check_negative_control(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_scope_passes_everywhere() {
        let reports = check_ops(1234, 3).unwrap();
        assert!(reports.len() >= 20);
        for r in &reports {
            assert!(r.passed, "{} failed with rel err {}", r.op_name, r.max_rel_error);
        }
    }

    #[test]
    fn modules_scope_passes() {
        for r in check_modules(99).unwrap() {
            assert!(r.passed, "{} failed with rel err {}", r.op_name, r.max_rel_error);
        }
    }

    #[test]
    fn negative_control_fails_as_intended() {
        let reports = check_negative_control().unwrap();
        assert_eq!(reports.len(), 1);
        assert!(!reports[0].passed);
    }

    #[test]
    fn full_scope_on_a_reduced_network() {
        // Small widths keep this variant quick; the default-width run is the
        // acceptance suite's job.
        let net = Network::new(NetworkConfig {
            channels: [2, 3, 4, 5],
            graft_channels: 6,
            attn_key_dim: 4,
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let image = rand_tensor(&mut rng, &[1, 3, 32, 32], -0.5, 0.5);
        let gt = rand_binary(&mut rng, &[1, 1, 16, 16], 0.35);
        let reports = gradcheck_network(
            &net,
            &image,
            &gt,
            &LossConfig::default(),
            CHECK_H,
            CHECK_TOL,
            2,
            7,
        )
        .unwrap();
        assert!(reports.len() > 50);
        for r in &reports {
            assert!(r.passed, "{} failed with rel err {}", r.op_name, r.max_rel_error);
        }
    }
}
