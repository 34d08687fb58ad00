//! Central finite-difference gradient checking.
//!
//! The harness rebuilds the inputs as tracked leaves, runs the function once
//! for analytic gradients, then perturbs one coordinate at a time and compares
//! `(f(x+h) - f(x-h)) / 2h` against the analytic value. It deliberately goes
//! through the public forward path only, so it stays independent of whatever
//! backward code it is checking.
//!
//! Central differences of an f64 function carry quantization noise of order
//! `eps * |f| / h`. Coordinates whose true gradient sits at or below that
//! floor (attention key biases, for one, get exactly zero gradient through
//! the softmax) would otherwise report spurious errors, so the reported
//! error is the portion of `|analytic - numeric|` that exceeds the floor.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{input_err, Result, Tensor, TensorError};

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub(crate) fn from_errors(op_name: &str, max_rel_error: f64, max_abs_error: f64, tol: f64) -> Self {
        GradCheckReport {
            op_name: op_name.to_string(),
            max_rel_error,
            max_abs_error,
            passed: max_rel_error < tol,
        }
    }
}

pub(crate) fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Estimated absolute noise of a central difference at step `h` for a
/// function of magnitude `f_scale`.
pub fn fd_noise_floor(f_scale: f64, h: f64) -> f64 {
    64.0 * f64::EPSILON * f_scale.abs().max(1.0) / (2.0 * h)
}

pub(crate) fn rel_error_above_noise(analytic: f64, numeric: f64, noise: f64) -> f64 {
    let excess = ((analytic - numeric).abs() - noise).max(0.0);
    excess / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Check every coordinate of every input. Generic over the caller's error
/// type so module-level forward functions can be checked directly.
pub fn finite_diff_check<F, E>(
    op_name: &str,
    f: F,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&[Tensor]) -> std::result::Result<Tensor, E>,
    E: From<TensorError>,
{
    finite_diff_check_sampled(op_name, f, inputs, h, tol, usize::MAX, 0)
}

/// Check at most `max_coords` randomly chosen coordinates per input; the
/// selection is deterministic in `seed`.
pub fn finite_diff_check_sampled<F, E>(
    op_name: &str,
    f: F,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
    max_coords: usize,
    seed: u64,
) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&[Tensor]) -> std::result::Result<Tensor, E>,
    E: From<TensorError>,
{
    if inputs.is_empty() {
        return Err(input_err("finite_diff_check", "no inputs to perturb").into());
    }
    if h <= 0.0 {
        return Err(input_err("finite_diff_check", "step h must be positive").into());
    }

    // Analytic gradients on a tracked copy of the inputs.
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::new_param(t.shape(), t.data().to_vec()))
        .collect::<Result<_>>()
        .map_err(E::from)?;
    let loss = f(&leaves)?;
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss(loss.shape().to_vec()).into());
    }
    loss.backward().map_err(E::from)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |points: &[Vec<f64>]| -> std::result::Result<f64, E> {
        let frozen: Vec<Tensor> = points
            .iter()
            .zip(inputs)
            .map(|(d, t)| Tensor::new(t.shape(), d.clone()))
            .collect::<Result<_>>()
            .map_err(E::from)?;
        Ok(f(&frozen)?.item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let base: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().to_vec()).collect();
    let noise = fd_noise_floor(loss.item(), h);
    for (i, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = if max_coords >= input.numel() {
            (0..input.numel()).collect()
        } else {
            let mut all: Vec<usize> = (0..input.numel()).collect();
            all.shuffle(&mut rng);
            all.truncate(max_coords);
            all
        };
        for j in coords {
            let mut pts = base.clone();
            pts[i][j] += h;
            let plus = eval(&pts)?;
            pts[i][j] -= 2.0 * h;
            let minus = eval(&pts)?;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i][j];
            max_rel = max_rel.max(rel_error_above_noise(a, numeric, noise));
            max_abs = max_abs.max((a - numeric).abs());
        }
    }
    Ok(GradCheckReport::from_errors(op_name, max_rel, max_abs, tol))
}

#[cfg(test)]
mod tests {
    use super::super::{eltwise, linear, softmax_lastdim, sum_all, EltwiseKind};
    use super::*;
    use rand::Rng;

    #[test]
    fn linear_function_is_exact_for_central_differences() {
        let x = Tensor::new(&[4], vec![0.5, -1.0, 2.0, 0.1]).unwrap();
        let report = finite_diff_check(
            "linear_map",
            |inp| sum_all(&inp[0]),
            &[x],
            1e-5,
            1e-10,
        )
        .unwrap();
        assert!(report.passed, "rel err {}", report.max_rel_error);
        assert!(report.max_rel_error < 1e-10);
    }

    #[test]
    fn softmax_passes_at_standard_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let data: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Tensor::new(&[2, 3], data).unwrap();
        let report = finite_diff_check(
            "softmax_lastdim",
            |inp| sum_all(&eltwise(&softmax_lastdim(&inp[0])?, &inp[0], EltwiseKind::Mul)?),
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "rel err {}", report.max_rel_error);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        // A "square" whose backward claims d(x^2)/dx = 3x.
        fn bad_square(x: &Tensor) -> Tensor {
            let data: Vec<f64> = x.data().iter().map(|&v| v * v).collect();
            Tensor::from_op(
                x.shape().to_vec(),
                data,
                vec![x.clone()],
                Box::new(|grad, parents| {
                    let x = &parents[0];
                    if x.requires_grad() {
                        let dx: Vec<f64> = grad
                            .iter()
                            .zip(x.data())
                            .map(|(&g, &v)| g * 3.0 * v)
                            .collect();
                        x.accumulate_grad(&dx);
                    }
                }),
            )
        }
        let x = Tensor::new(&[3], vec![1.0, -0.5, 2.0]).unwrap();
        let report = finite_diff_check(
            "bad_square",
            |inp| sum_all(&bad_square(&inp[0])),
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn sampled_check_covers_subset() {
        let x = Tensor::new(&[10], vec![0.3; 10]).unwrap();
        let w = Tensor::new(&[10, 1], vec![0.1; 10]).unwrap();
        let b = Tensor::new(&[1], vec![0.0]).unwrap();
        let report = finite_diff_check_sampled(
            "linear",
            |inp| sum_all(&linear(&inp[0], &inp[1], &inp[2])?),
            &[x, w, b],
            1e-5,
            1e-6,
            3,
            7,
        )
        .unwrap();
        assert!(report.passed, "rel err {}", report.max_rel_error);
    }
}
