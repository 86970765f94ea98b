//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NoGradGuard, Tensor};
use crate::error::{Error, Result};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so entries whose true gradient
/// is (numerically) zero are judged on absolute error instead. Central
/// differences over a few hundred O(1) terms carry roughly 1e-10 of rounding
/// noise at this step, so the floor sits well above that.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    /// `(input index, flat element index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares analytic and central-difference gradients of a scalar function
/// over every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<Tensor>,
{
    grad_check_sampled(f, inputs, tol, None, 0)
}

/// Like [`grad_check`] but compares at most `per_input` seeded random
/// coordinates of each input.
pub fn grad_check_sampled<F>(
    mut f: F,
    inputs: &[Tensor],
    tol: f64,
    per_input: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.detach().requires_grad(true)).collect();
    let loss = f(&leaves)?;
    if loss.numel() != 1 {
        return Err(Error::shape(format!(
            "grad_check needs a scalar function, got shape {:?}",
            loss.shape()
        )));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let _guard = NoGradGuard::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        worst: None,
        tol,
    };
    let base: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match per_input {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for idx in coords {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut data = input.to_vec();
                data[idx] += delta;
                let mut args = base.clone();
                args[which] = Tensor::from_vec(input.shape(), data)?;
                Ok(f(&args)?.item())
            };
            let numeric = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
            let a = analytic[which][idx];
            let rel = relative_error(a, numeric);
            let abs = (a - numeric).abs();
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((which, idx));
            }
        }
    }
    Ok(report)
}
