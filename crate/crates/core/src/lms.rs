//! Age-conditional reference curves via the three-parameter Box-Cox
//! normal model (skew L, median M, coefficient of variation S).
//!
//! A positive outcome `y` at age `x` is modelled so that
//! `z = ((y/M(x))^L(x) - 1) / (L(x) S(x))` is standard normal, with the
//! log form `z = ln(y/M)/S` as the L -> 0 limit. The three curves are
//! penalized B-spline smooths fitted by backfitted Fisher scoring: each
//! cycle refreshes M, then S, then L from working responses
//! `theta + u/i` (score over expected information) smoothed at a fixed
//! effective dimension. M and S are fitted on the log scale so they stay
//! positive.
//!
//! Outcomes that can be zero or negative (clock midpoints) are shifted by
//! a caller-chosen constant before fitting; evaluation removes the shift
//! again.

use nalgebra::DVector;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::spline::{self, BasisSpec, PenalizedSmoother};

/// Percentile levels exported for every reference table.
pub const PERCENTILE_LEVELS: [f64; 7] = [0.05, 0.10, 0.25, 0.50, 0.75, 0.90, 0.95];

/// Below this magnitude the skew parameter is treated as exactly zero and
/// the lognormal forms are used.
pub const L_ZERO_EPS: f64 = 1e-7;

/// Smallest coefficient of variation the fitter will report. Keeps the
/// likelihood bounded for (near-)constant outcomes.
pub const S_FLOOR: f64 = 1e-5;

const L_CLAMP: f64 = 5.0;
const ETA_CLAMP: f64 = 20.0; // |ln M| bound
const ZETA_MAX: f64 = 5.0; // ln S upper bound
const STEP_CLAMP: f64 = 5.0; // Fisher step bound on each link scale
/// Series branch for the fitting internals: below this |L| the exact
/// z and dz/dL expressions lose precision to cancellation.
const L_SERIES_EPS: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct LmsConfig {
    /// Effective degrees of freedom targets per curve (2 = straight line).
    pub edf_l: f64,
    pub edf_m: f64,
    pub edf_s: f64,
    /// Spline segments across the age range.
    pub n_segments: usize,
    /// Relative deviance change declaring convergence.
    pub tol: f64,
    pub max_iter: usize,
    /// Minimum observations required to attempt a fit.
    pub min_obs: usize,
}

impl Default for LmsConfig {
    fn default() -> Self {
        LmsConfig {
            edf_l: 3.0,
            edf_m: 5.0,
            edf_s: 3.0,
            n_segments: spline::DEFAULT_SEGMENTS,
            tol: 1e-6,
            max_iter: 50,
            min_obs: 50,
        }
    }
}

/// One observation: outcome `y` at age `x` with a survey weight.
#[derive(Debug, Clone, Copy)]
pub struct LmsObservation {
    pub x: f64,
    pub y: f64,
    pub weight: f64,
}

/// Scale weights to mean one (sum equals the observation count), so that
/// deviance and information are on the per-observation scale regardless of
/// the survey weight units.
pub fn normalize_weights(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(Error::CurveFit("no weights to normalize".into()));
    }
    let mut sum = 0.0;
    for &w in weights {
        if !w.is_finite() || w <= 0.0 {
            return Err(Error::CurveFit(format!("non-positive weight {w}")));
        }
        sum += w;
    }
    let scale = weights.len() as f64 / sum;
    Ok(weights.iter().map(|w| w * scale).collect())
}

/// z for given curve values; series form near L = 0.
fn bc_z(l: f64, s: f64, v: f64) -> f64 {
    if l.abs() < L_SERIES_EPS {
        (v + l * v * v / 2.0 + l * l * v * v * v / 6.0) / s
    } else {
        (((l * v).exp()) - 1.0) / (l * s)
    }
}

/// dz/dL for given curve values; series form near L = 0.
fn bc_dz_dl(l: f64, s: f64, v: f64) -> f64 {
    if l.abs() < L_SERIES_EPS {
        (v * v / 2.0 + l * v * v * v / 3.0) / s
    } else {
        let w = (l * v).exp();
        (v * w * l - w + 1.0) / (l * l * s)
    }
}

/// A fitted set of reference curves.
#[derive(Debug, Clone)]
pub struct LmsCurveSet {
    smoother_l: PenalizedSmoother,
    smoother_eta: PenalizedSmoother, // ln M
    smoother_zeta: PenalizedSmoother, // ln S
    pub x_min: f64,
    pub x_max: f64,
    /// Constant added to outcomes before fitting (0 for durations).
    pub axis_shift: f64,
    pub n_obs: usize,
    pub iterations: usize,
    pub deviance: f64,
    /// False when the deviance was still moving at max_iter; the curves are
    /// the last iterate and still usable.
    pub converged: bool,
    /// Achieved effective dimensions of the three smooths.
    pub edf_l: f64,
    pub edf_m: f64,
    pub edf_s: f64,
}

/// One row of an exported reference table.
#[derive(Debug, Clone)]
pub struct LmsGridRow {
    pub x: f64,
    pub l: f64,
    pub m: f64,
    pub s: f64,
    /// Raw-scale percentile values, aligned with [`PERCENTILE_LEVELS`].
    pub percentiles: [f64; 7],
}

impl LmsCurveSet {
    /// Curve values at an age (constant beyond the fitted range).
    pub fn lms_at(&self, x: f64) -> (f64, f64, f64) {
        let l = self.smoother_l.predict(x).clamp(-L_CLAMP, L_CLAMP);
        let m = self
            .smoother_eta
            .predict(x)
            .clamp(-ETA_CLAMP, ETA_CLAMP)
            .exp();
        let s = self
            .smoother_zeta
            .predict(x)
            .clamp(S_FLOOR.ln(), ZETA_MAX)
            .exp();
        (l, m, s)
    }

    /// Raw-scale value of the p-th percentile at age x.
    pub fn percentile_at(&self, x: f64, p: f64) -> Result<f64> {
        let (l, m, s) = self.lms_at(x);
        Ok(percentile_from_lms(l, m, s, p)? - self.axis_shift)
    }

    /// z-score of a raw-scale value at age x.
    pub fn z_score(&self, x: f64, y: f64) -> Result<f64> {
        let (l, m, s) = self.lms_at(x);
        z_from_lms(l, m, s, y + self.axis_shift)
    }

    /// Reference table on a monthly age grid.
    pub fn curve_table(&self) -> Result<Vec<LmsGridRow>> {
        let mut rows = Vec::new();
        for x in monthly_grid(self.x_min, self.x_max) {
            let (l, m, s) = self.lms_at(x);
            let mut percentiles = [0.0; 7];
            for (slot, &p) in percentiles.iter_mut().zip(PERCENTILE_LEVELS.iter()) {
                *slot = percentile_from_lms(l, m, s, p)? - self.axis_shift;
            }
            rows.push(LmsGridRow {
                x,
                l,
                m,
                s,
                percentiles,
            });
        }
        Ok(rows)
    }
}

/// Ages spaced one month (1/12 year) apart covering [x_min, x_max].
pub fn monthly_grid(x_min: f64, x_max: f64) -> Vec<f64> {
    let mut grid = Vec::new();
    let mut k = (x_min * 12.0 - 1e-9).ceil() as i64;
    loop {
        let x = k as f64 / 12.0;
        if x > x_max + 1e-9 {
            break;
        }
        grid.push(x);
        k += 1;
    }
    grid
}

/// Percentile of the Box-Cox normal on the (shifted) positive scale.
pub fn percentile_from_lms(l: f64, m: f64, s: f64, p: f64) -> Result<f64> {
    if !(0.0 < p && p < 1.0) {
        return Err(Error::CurveFit(format!("percentile level {p} outside (0,1)")));
    }
    if m <= 0.0 || s <= 0.0 {
        return Err(Error::CurveFit(format!(
            "invalid curve values m={m}, s={s}"
        )));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let z = normal.inverse_cdf(p);
    if l.abs() <= L_ZERO_EPS {
        Ok(m * (s * z).exp())
    } else {
        let base = 1.0 + l * s * z;
        if base <= 0.0 {
            return Err(Error::CurveFit(format!(
                "percentile {p} lies outside the distribution support (l={l}, s={s})"
            )));
        }
        Ok(m * base.powf(1.0 / l))
    }
}

/// z-score of a (shifted) positive value under the Box-Cox normal.
pub fn z_from_lms(l: f64, m: f64, s: f64, y: f64) -> Result<f64> {
    if y <= 0.0 {
        return Err(Error::CurveFit(format!(
            "value {y} outside the positive support"
        )));
    }
    if m <= 0.0 || s <= 0.0 {
        return Err(Error::CurveFit(format!(
            "invalid curve values m={m}, s={s}"
        )));
    }
    let v = (y / m).ln();
    if l.abs() <= L_ZERO_EPS {
        Ok(v / s)
    } else {
        Ok(((l * v).exp() - 1.0) / (l * s))
    }
}

/// Fit the three curves to weighted observations.
///
/// `axis_shift` is added to every outcome before fitting (and removed on
/// evaluation); shifted outcomes must be strictly positive.
pub fn fit_lms(
    observations: &[LmsObservation],
    config: &LmsConfig,
    axis_shift: f64,
) -> Result<LmsCurveSet> {
    let n = observations.len();
    if n < config.min_obs {
        return Err(Error::CurveFit(format!(
            "growth curve needs at least {} observations, got {n}",
            config.min_obs
        )));
    }
    let xs: Vec<f64> = observations.iter().map(|o| o.x).collect();
    let ys: Vec<f64> = observations.iter().map(|o| o.y + axis_shift).collect();
    for (&x, &y) in xs.iter().zip(&ys) {
        if !x.is_finite() {
            return Err(Error::CurveFit(format!("non-finite age {x}")));
        }
        if !y.is_finite() || y <= 0.0 {
            return Err(Error::CurveFit(format!(
                "shifted outcome {y} not positive; raise the axis shift"
            )));
        }
    }
    let weights = normalize_weights(
        &observations.iter().map(|o| o.weight).collect::<Vec<f64>>(),
    )?;

    let x_min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let x_max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let spec = BasisSpec::new(x_min, x_max, config.n_segments)?;

    let log_y: Vec<f64> = ys.iter().map(|y| y.ln()).collect();

    // Initial median curve: a smooth of ln y at the M target dimension.
    let mut smoother_eta = spline::fit_penalized(&xs, &log_y, &weights, spec, config.edf_m)?;
    let mut eta: Vec<f64> = xs
        .iter()
        .map(|&x| smoother_eta.predict(x).clamp(-ETA_CLAMP, ETA_CLAMP))
        .collect();

    // Initial S: weighted spread of ln y around the initial median curve.
    let w_sum: f64 = weights.iter().sum();
    let var = xs
        .iter()
        .zip(&log_y)
        .zip(&weights)
        .map(|((&x, &ly), &w)| {
            let r = ly - smoother_eta.predict(x);
            w * r * r
        })
        .sum::<f64>()
        / w_sum;
    let s0 = var.sqrt().max(1e-4);
    let zeta0 = s0.ln();
    let zeta_values = vec![zeta0; n];
    let mut smoother_zeta =
        spline::fit_penalized(&xs, &zeta_values, &weights, spec, config.edf_s)?;
    let mut zeta: Vec<f64> = xs
        .iter()
        .map(|&x| smoother_zeta.predict(x).clamp(S_FLOOR.ln(), ZETA_MAX))
        .collect();

    // Initial skew: identity transform, L = 1.
    let ones = vec![1.0; n];
    let mut smoother_l = spline::fit_penalized(&xs, &ones, &weights, spec, config.edf_l)?;
    let mut l_vals: Vec<f64> = xs
        .iter()
        .map(|&x| smoother_l.predict(x).clamp(-L_CLAMP, L_CLAMP))
        .collect();

    let deviance_of = |l_vals: &[f64], eta: &[f64], zeta: &[f64]| -> f64 {
        let mut d = 0.0;
        for i in 0..n {
            let v = ys[i].ln() - eta[i];
            let s = zeta[i].exp();
            let z = bc_z(l_vals[i], s, v);
            d += -2.0 * weights[i] * (l_vals[i] * v - zeta[i] - z * z / 2.0);
        }
        d
    };

    let mut deviance = deviance_of(&l_vals, &eta, &zeta);
    let mut converged = false;
    let mut iterations = 0usize;

    for _ in 0..config.max_iter {
        iterations += 1;

        // -- median curve (eta = ln M) ------------------------------------
        {
            let mut resp = DVector::zeros(n);
            let mut wts = vec![0.0; n];
            for i in 0..n {
                let l = l_vals[i];
                let s = zeta[i].exp();
                let v = ys[i].ln() - eta[i];
                let z = bc_z(l, s, v);
                let u = z / s + l * (z * z - 1.0);
                let info = (1.0 + 2.0 * l * l * s * s) / (s * s);
                resp[i] = eta[i] + (u / info).clamp(-STEP_CLAMP, STEP_CLAMP);
                wts[i] = weights[i] * info;
            }
            // Skip a curve whose mean Fisher information has vanished (for
            // example L when S sits on its floor): the score then carries
            // only rounding noise and the clamped steps would random-walk.
            if wts.iter().sum::<f64>() > 1e-8 * n as f64 {
                smoother_eta = spline::fit_penalized(
                    &xs,
                    resp.as_slice(),
                    &wts,
                    spec,
                    config.edf_m,
                )?;
                for i in 0..n {
                    eta[i] = smoother_eta.predict(xs[i]).clamp(-ETA_CLAMP, ETA_CLAMP);
                }
            }
        }

        // -- spread curve (zeta = ln S) ------------------------------------
        {
            let mut resp = DVector::zeros(n);
            let mut wts = vec![0.0; n];
            for i in 0..n {
                let l = l_vals[i];
                let s = zeta[i].exp();
                let v = ys[i].ln() - eta[i];
                let z = bc_z(l, s, v);
                let u = z * z - 1.0;
                let info = 2.0;
                resp[i] = zeta[i] + (u / info).clamp(-STEP_CLAMP, STEP_CLAMP);
                wts[i] = weights[i] * info;
            }
            if wts.iter().sum::<f64>() > 1e-8 * n as f64 {
                smoother_zeta = spline::fit_penalized(
                    &xs,
                    resp.as_slice(),
                    &wts,
                    spec,
                    config.edf_s,
                )?;
                for i in 0..n {
                    zeta[i] = smoother_zeta.predict(xs[i]).clamp(S_FLOOR.ln(), ZETA_MAX);
                }
            }
        }

        // -- skew curve (L) -------------------------------------------------
        {
            let mut resp = DVector::zeros(n);
            let mut wts = vec![0.0; n];
            for i in 0..n {
                let l = l_vals[i];
                let s = zeta[i].exp();
                let v = ys[i].ln() - eta[i];
                let z = bc_z(l, s, v);
                let u = v - z * bc_dz_dl(l, s, v);
                let info = 7.0 * s * s / 4.0;
                resp[i] = l + (u / info).clamp(-STEP_CLAMP, STEP_CLAMP);
                wts[i] = weights[i] * info;
            }
            if wts.iter().sum::<f64>() > 1e-8 * n as f64 {
                smoother_l = spline::fit_penalized(
                    &xs,
                    resp.as_slice(),
                    &wts,
                    spec,
                    config.edf_l,
                )?;
                for i in 0..n {
                    l_vals[i] = smoother_l.predict(xs[i]).clamp(-L_CLAMP, L_CLAMP);
                }
            }
        }

        let new_deviance = deviance_of(&l_vals, &eta, &zeta);
        let change = (deviance - new_deviance).abs();
        deviance = new_deviance;
        if change < config.tol * (deviance.abs() + 1.0) {
            converged = true;
            break;
        }
    }

    Ok(LmsCurveSet {
        x_min,
        x_max,
        axis_shift,
        n_obs: n,
        iterations,
        deviance,
        converged,
        edf_l: smoother_l.edf,
        edf_m: smoother_eta.edf,
        edf_s: smoother_zeta.edf,
        smoother_l,
        smoother_eta,
        smoother_zeta,
    })
}
