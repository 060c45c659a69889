use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Coordinates probed per tensor; tensors with fewer elements are checked exhaustively.
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            samples_per_tensor: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub tensor: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Worst coordinate per input tensor, in input order.
    pub worst: Vec<Option<CoordCheck>>,
    /// Autodiff gradient norm per input tensor.
    pub grad_norms: Vec<f64>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).item()?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {value}")));
    }
    Ok(value)
}

/// Compares the tape gradient of `f` against central differences.
///
/// `f` receives a fresh tape and one leaf per entry of `params` and must
/// return a scalar node. The returned report carries the maximum of
/// `|g_ad − g_fd| / max(|g_ad|, |g_fd|, 1e-8)` over all probed coordinates.
pub fn finite_diff_check<F>(
    f: F,
    params: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(opts.h > 0.0) {
        return Err(Error::contract(
            "finite_diff_check",
            format!("step h={} must be > 0", opts.h),
        ));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base = tape.value(out).item()?;
    if !base.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {base}")));
    }
    tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut probe = params.to_vec();
    for (ti, param) in params.iter().enumerate() {
        let zeros;
        let analytic = match tape.grad(vars[ti]) {
            Some(g) => g,
            None => {
                zeros = vec![0.0; param.numel()];
                &zeros
            }
        };
        report
            .grad_norms
            .push(analytic.iter().map(|g| g * g).sum::<f64>().sqrt());

        let coords: Vec<usize> = if param.numel() <= opts.samples_per_tensor {
            (0..param.numel()).collect()
        } else {
            let mut c = sample(&mut rng, param.numel(), opts.samples_per_tensor).into_vec();
            c.sort_unstable();
            c
        };

        let mut worst: Option<CoordCheck> = None;
        for coord in coords {
            let orig = param.data()[coord];
            probe[ti].data_mut()[coord] = orig + opts.h;
            let up = evaluate(&f, &probe)?;
            probe[ti].data_mut()[coord] = orig - opts.h;
            let down = evaluate(&f, &probe)?;
            probe[ti].data_mut()[coord] = orig;

            let numeric = (up - down) / (2.0 * opts.h);
            let check = CoordCheck {
                tensor: ti,
                coord,
                analytic: analytic[coord],
                numeric,
                rel_error: relative_error(analytic[coord], numeric),
            };
            report.coords_checked += 1;
            report.max_rel_error = report.max_rel_error.max(check.rel_error);
            if worst.as_ref().is_none_or(|w| check.rel_error > w.rel_error) {
                worst = Some(check);
            }
        }
        report.worst.push(worst);
    }
    Ok(report)
}
