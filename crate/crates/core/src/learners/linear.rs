//! Weighted least squares for the censoring projection.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Weighted OLS with intercept. `x` is row-major with `p` columns; returns
/// `[intercept, slopes...]`. A singular cross-product gets a small ridge jitter.
pub fn fit_linear(x: &[f64], p: usize, y: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    let n = y.len();
    if n == 0 || x.len() != n * p || w.len() != n {
        return Err(Error::InvalidInput("linear fit needs matching, nonempty inputs".into()));
    }
    let k = p + 1;
    let mut xtx = DMatrix::<f64>::zeros(k, k);
    let mut xty = DVector::<f64>::zeros(k);
    let mut xi = vec![0.0; k];
    for i in 0..n {
        if w[i] == 0.0 {
            continue;
        }
        xi[0] = 1.0;
        xi[1..].copy_from_slice(&x[i * p..(i + 1) * p]);
        for a in 0..k {
            xty[a] += w[i] * xi[a] * y[i];
            for b in 0..=a {
                xtx[(a, b)] += w[i] * xi[a] * xi[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            xtx[(b, a)] = xtx[(a, b)];
        }
    }
    if let Some(ch) = xtx.clone().cholesky() {
        let beta = ch.solve(&xty);
        if beta.iter().all(|b| b.is_finite()) && well_conditioned(&xtx) {
            return Ok(beta.iter().copied().collect());
        }
    }
    let scale = (0..k).map(|a| xtx[(a, a)]).sum::<f64>() / k as f64;
    let mut ridge = xtx;
    for a in 0..k {
        ridge[(a, a)] += 1e-8 * scale.max(1e-12);
    }
    let ch = ridge.cholesky().ok_or_else(|| Error::Learner("least squares is singular".into()))?;
    Ok(ch.solve(&xty).iter().copied().collect())
}

fn well_conditioned(m: &DMatrix<f64>) -> bool {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    max > 0.0 && min / max > 1e-13
}
