//! Penalized uniform cubic B-spline smoothing.
//!
//! The growth-curve fitter needs a scatterplot smoother whose roughness is
//! controlled by effective degrees of freedom rather than a raw penalty
//! weight. This module provides a classic P-spline: a uniform cubic
//! B-spline basis over the predictor range, a second-difference penalty on
//! the coefficients, and a bisection search on the penalty weight that hits
//! a requested effective dimension. The penalty null space is the straight
//! line, so edf runs from 2 (heaviest smoothing) up to the basis size.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// Number of spline segments spanning the predictor range. Three more
/// basis functions than segments.
pub const DEFAULT_SEGMENTS: usize = 20;

/// Uniform cubic B-spline basis over a closed interval.
#[derive(Debug, Clone, Copy)]
pub struct BasisSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub n_segments: usize,
}

impl BasisSpec {
    pub fn new(x_min: f64, x_max: f64, n_segments: usize) -> Result<Self> {
        if !(x_max - x_min).is_finite() || x_max - x_min <= 1e-9 {
            return Err(Error::CurveFit(format!(
                "degenerate predictor range [{x_min}, {x_max}]"
            )));
        }
        if n_segments < 1 {
            return Err(Error::CurveFit("basis needs at least one segment".into()));
        }
        Ok(BasisSpec {
            x_min,
            x_max,
            n_segments,
        })
    }

    /// Basis size.
    pub fn n_basis(&self) -> usize {
        self.n_segments + 3
    }

    /// The four nonzero basis values at `x` and the first of the four
    /// consecutive columns they occupy. Points outside the range evaluate
    /// at the nearest boundary (constant extrapolation).
    pub fn eval(&self, x: f64) -> (usize, [f64; 4]) {
        let h = (self.x_max - self.x_min) / self.n_segments as f64;
        let u = ((x - self.x_min) / h).clamp(0.0, self.n_segments as f64);
        let seg = (u.floor() as usize).min(self.n_segments - 1);
        let t = u - seg as f64;
        let omt = 1.0 - t;
        let weights = [
            omt * omt * omt / 6.0,
            (3.0 * t * t * t - 6.0 * t * t + 4.0) / 6.0,
            (-3.0 * t * t * t + 3.0 * t * t + 3.0 * t + 1.0) / 6.0,
            t * t * t / 6.0,
        ];
        (seg, weights)
    }

    /// Dense design matrix for a set of predictor values.
    pub fn design_matrix(&self, xs: &[f64]) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(xs.len(), self.n_basis());
        for (i, &x) in xs.iter().enumerate() {
            let (seg, w) = self.eval(x);
            for (j, &wj) in w.iter().enumerate() {
                b[(i, seg + j)] = wj;
            }
        }
        b
    }
}

/// Second-difference penalty matrix `D2' D2` for `k` coefficients.
pub fn second_difference_penalty(k: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(k, k);
    for r in 0..k.saturating_sub(2) {
        // row of D2: +1, -2, +1 at columns r, r+1, r+2
        let idx = [r, r + 1, r + 2];
        let val = [1.0, -2.0, 1.0];
        for a in 0..3 {
            for b in 0..3 {
                p[(idx[a], idx[b])] += val[a] * val[b];
            }
        }
    }
    p
}

/// A fitted penalized smoother.
#[derive(Debug, Clone)]
pub struct PenalizedSmoother {
    pub basis: BasisSpec,
    pub coefficients: DVector<f64>,
    pub lambda: f64,
    pub edf: f64,
}

impl PenalizedSmoother {
    pub fn predict(&self, x: f64) -> f64 {
        let (seg, w) = self.basis.eval(x);
        (0..4).map(|j| w[j] * self.coefficients[seg + j]).sum()
    }
}

fn edf_for_lambda(btwb: &DMatrix<f64>, penalty: &DMatrix<f64>, lambda: f64) -> Option<f64> {
    let chol = Cholesky::new(btwb + penalty * lambda)?;
    let smoother = chol.solve(btwb);
    Some(smoother.trace())
}

/// Fit a penalized smoother to weighted data, choosing the penalty weight
/// by bisection so that the effective degrees of freedom match
/// `target_edf`. Weights must be non-negative with a positive sum;
/// zero-weight points are carried but exert no influence.
pub fn fit_penalized(
    xs: &[f64],
    ys: &[f64],
    ws: &[f64],
    spec: BasisSpec,
    target_edf: f64,
) -> Result<PenalizedSmoother> {
    if xs.is_empty() || xs.len() != ys.len() || xs.len() != ws.len() {
        return Err(Error::CurveFit(format!(
            "smoother input lengths disagree: {} x, {} y, {} w",
            xs.len(),
            ys.len(),
            ws.len()
        )));
    }
    let mut w_sum = 0.0;
    for ((&x, &y), &w) in xs.iter().zip(ys).zip(ws) {
        if !x.is_finite() || !y.is_finite() || !w.is_finite() || w < 0.0 {
            return Err(Error::CurveFit(format!(
                "non-finite or negative smoother input (x={x}, y={y}, w={w})"
            )));
        }
        w_sum += w;
    }
    if w_sum <= 1e-12 {
        return Err(Error::CurveFit("smoother weights sum to zero".into()));
    }
    if !(2.0..=spec.n_basis() as f64 + 1e-9).contains(&target_edf) {
        return Err(Error::CurveFit(format!(
            "target edf {target_edf} outside [2, {}]",
            spec.n_basis()
        )));
    }

    let k = spec.n_basis();
    let mut btwb = DMatrix::<f64>::zeros(k, k);
    let mut btwy = DVector::<f64>::zeros(k);
    for i in 0..xs.len() {
        let w = ws[i];
        if w == 0.0 {
            continue;
        }
        let (seg, bw) = spec.eval(xs[i]);
        for a in 0..4 {
            btwy[seg + a] += w * bw[a] * ys[i];
            for c in 0..4 {
                btwb[(seg + a, seg + c)] += w * bw[a] * bw[c];
            }
        }
    }
    // Small ridge keeps the normal equations positive definite when data
    // leave basis ends unsupported.
    let ridge = 1e-10 * (btwb.trace() / k as f64).max(1e-300);
    for d in 0..k {
        btwb[(d, d)] += ridge;
    }

    let penalty = second_difference_penalty(k);

    // edf is continuous and decreasing in lambda; bisect on log10(lambda).
    // The search range is scaled to the data: what counts as "almost
    // unpenalized" or "effectively infinite" depends on the relative size
    // of the two quadratic forms, and a fixed absolute cap can push the
    // penalty so far above the data term that Cholesky pivots in its null
    // space drown in rounding noise.
    let scale = (btwb.trace() / penalty.trace()).max(1e-300).log10();
    let (mut lo, mut hi) = (scale - 8.0, scale + 8.0);
    let edf_at = |log_lambda: f64| -> Result<f64> {
        edf_for_lambda(&btwb, &penalty, 10f64.powf(log_lambda))
            .ok_or_else(|| Error::CurveFit("penalized system not positive definite".into()))
    };
    let edf_lo = edf_at(lo)?;
    let edf_hi = edf_at(hi)?;
    let log_lambda = if target_edf >= edf_lo {
        lo
    } else if target_edf <= edf_hi {
        hi
    } else {
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if edf_at(mid)? > target_edf {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };

    let lambda = 10f64.powf(log_lambda);
    let chol = Cholesky::new(&btwb + &penalty * lambda)
        .ok_or_else(|| Error::CurveFit("penalized system not positive definite".into()))?;
    let coefficients = chol.solve(&btwy);
    let edf = chol.solve(&btwb).trace();

    Ok(PenalizedSmoother {
        basis: spec,
        coefficients,
        lambda,
        edf,
    })
}
