//! Central finite-difference gradient checks.

pub mod suite;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;

/// Directions along which the analytic gradient is compared.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Probe {
    /// Every coordinate axis.
    Coordinates,
    /// `count` random unit directions drawn from `seed`.
    Random { count: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    pub probe: Probe,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            probe: Probe::Coordinates,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max_k |analytic_k - numeric_k|` over probes.
    pub max_abs_error: f64,
    /// `max_abs_error` scaled by the larger of the two gradient magnitudes.
    pub max_rel_error: f64,
    pub probes: usize,
    pub passed: bool,
}

/// Outcome of a check that may land on a non-differentiable point.
#[derive(Debug, Clone, PartialEq)]
pub enum CheckOutcome {
    Checked(GradCheckReport),
    /// Too close to a kink (hinge, ReLU, order statistic) to compare.
    ExcludedAtKink {
        distance: f64,
    },
}

fn eval(f: &impl Fn(&[f64]) -> f64, x: &[f64]) -> Result<f64> {
    let y = f(x);
    if y.is_finite() {
        Ok(y)
    } else {
        Err(Error::NonFinite("loss during gradient check"))
    }
}

/// Compares `analytic` with central differences of `f` at `x`.
pub fn grad_check(
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if x.len() != analytic.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters but {} gradient entries",
            x.len(),
            analytic.len()
        )));
    }
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("analytic gradient"));
    }
    eval(&f, x)?;
    let h = opts.step;
    let mut probe_x = x.to_vec();
    let mut max_abs: f64 = 0.0;
    let mut numeric_scale: f64 = 0.0;
    let (analytic_scale, probes) = match opts.probe {
        Probe::Coordinates => {
            for k in 0..x.len() {
                probe_x[k] = x[k] + h;
                let up = eval(&f, &probe_x)?;
                probe_x[k] = x[k] - h;
                let down = eval(&f, &probe_x)?;
                probe_x[k] = x[k];
                let numeric = (up - down) / (2.0 * h);
                numeric_scale = numeric_scale.max(numeric.abs());
                max_abs = max_abs.max((analytic[k] - numeric).abs());
            }
            (analytic.iter().fold(0.0f64, |m, g| m.max(g.abs())), x.len())
        }
        Probe::Random { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..count {
                let mut d: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                d.iter_mut().for_each(|v| *v /= norm);
                for ((p, xi), di) in probe_x.iter_mut().zip(x).zip(&d) {
                    *p = xi + h * di;
                }
                let up = eval(&f, &probe_x)?;
                for ((p, xi), di) in probe_x.iter_mut().zip(x).zip(&d) {
                    *p = xi - h * di;
                }
                let down = eval(&f, &probe_x)?;
                let numeric = (up - down) / (2.0 * h);
                let directional: f64 = analytic.iter().zip(&d).map(|(g, di)| g * di).sum();
                numeric_scale = numeric_scale.max(numeric.abs());
                max_abs = max_abs.max((directional - numeric).abs());
            }
            (analytic.iter().map(|g| g * g).sum::<f64>().sqrt(), count)
        }
    };
    let max_rel = max_abs / analytic_scale.max(numeric_scale).max(1e-12);
    Ok(GradCheckReport {
        max_abs_error: max_abs,
        max_rel_error: max_rel,
        probes,
        passed: max_rel <= opts.tolerance,
    })
}

/// Like [`grad_check`], but skips the comparison when `kink_distance` (the
/// caller's distance to the nearest non-differentiable point) is below `margin`.
pub fn grad_check_away_from_kinks(
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    opts: &GradCheckOptions,
    kink_distance: f64,
    margin: f64,
) -> Result<CheckOutcome> {
    if kink_distance < margin {
        return Ok(CheckOutcome::ExcludedAtKink {
            distance: kink_distance,
        });
    }
    grad_check(f, x, analytic, opts).map(CheckOutcome::Checked)
}
