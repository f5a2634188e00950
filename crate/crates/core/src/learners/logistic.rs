//! Weighted logistic regression with offsets by Newton-Raphson (IRLS).

use nalgebra::{DMatrix, DVector};

use super::{expit, DesignMatrix, FitInfo, FittedModel};
use crate::error::{Error, Result};

/// Ridge jitter used when the unpenalised fit separates or is singular.
pub const RIDGE_JITTER: f64 = 1e-6;

/// Linear predictors beyond this magnitude are treated as separation.
const SEPARATION_ETA: f64 = 35.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrlsOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// L2 penalty `ridge / 2 * |beta|^2` on every coefficient, intercept included.
    pub ridge: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-8, ridge: 0.0 }
    }
}

pub fn fit_logistic(design: &DesignMatrix) -> Result<FittedModel> {
    fit_logistic_with(design, IrlsOptions::default())
}

enum Outcome {
    Done { beta: Vec<f64>, iterations: usize, converged: bool },
    Separated,
    Singular,
}

pub fn fit_logistic_with(design: &DesignMatrix, opts: IrlsOptions) -> Result<FittedModel> {
    if design.rows() == 0 || design.total_weight() <= 0.0 {
        return Err(Error::Learner("logistic regression needs a positive-weight observation".into()));
    }
    let mut info = FitInfo::default();
    let mut ridge = opts.ridge;
    let mut result = newton(design, opts.max_iter, opts.tol, ridge);
    if !matches!(result, Outcome::Done { converged: true, .. }) && ridge < RIDGE_JITTER {
        info.separation = matches!(result, Outcome::Separated | Outcome::Done { converged: false, .. });
        info.ridge_fallback = true;
        ridge = RIDGE_JITTER;
        result = newton(design, opts.max_iter.max(200), opts.tol, ridge);
    }
    match result {
        Outcome::Done { beta, iterations, converged } => {
            info.iterations = iterations;
            info.converged = converged;
            Ok(FittedModel {
                learner: "logistic".into(),
                intercept: beta[0],
                columns: design.names().to_vec(),
                coefficients: beta[1..].to_vec(),
                info,
                cv: None,
            })
        }
        Outcome::Separated | Outcome::Singular => {
            Err(Error::Learner("logistic regression failed even with ridge stabilisation".into()))
        }
    }
}

fn objective(design: &DesignMatrix, beta: &[f64], ridge: f64) -> (f64, Vec<f64>) {
    let p = design.cols();
    let mut eta = Vec::with_capacity(design.rows());
    let mut nll = 0.0;
    for i in 0..design.rows() {
        let r = design.row(i);
        let e = beta[0] + design.offset[i] + (0..p).map(|j| r[j] * beta[j + 1]).sum::<f64>();
        let w = design.weights[i];
        if w > 0.0 {
            // log(1 + e^eta) - y eta, computed stably
            let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            nll += w * (softplus - design.y[i] * e);
        }
        eta.push(e);
    }
    nll += 0.5 * ridge * beta.iter().map(|b| b * b).sum::<f64>();
    (nll, eta)
}

fn newton(design: &DesignMatrix, max_iter: usize, tol: f64, ridge: f64) -> Outcome {
    let p = design.cols() + 1;
    let mut beta = vec![0.0; p];
    let ybar = design.y.iter().zip(&design.weights).map(|(y, w)| y * w).sum::<f64>() / design.total_weight();
    if design.offset.iter().all(|&o| o == 0.0) && ybar > 0.0 && ybar < 1.0 {
        beta[0] = (ybar / (1.0 - ybar)).ln();
    }
    let (mut obj, mut eta) = objective(design, &beta, ridge);
    for iter in 1..=max_iter {
        let mut hess = DMatrix::<f64>::zeros(p, p);
        let mut grad = DVector::<f64>::zeros(p);
        let mut xi = vec![0.0; p];
        for i in 0..design.rows() {
            let w = design.weights[i];
            if w <= 0.0 {
                continue;
            }
            xi[0] = 1.0;
            xi[1..].copy_from_slice(design.row(i));
            let mu = expit(eta[i]);
            let v = w * mu * (1.0 - mu);
            let resid = w * (design.y[i] - mu);
            for a in 0..p {
                grad[a] += xi[a] * resid;
                let va = v * xi[a];
                for b in 0..=a {
                    hess[(a, b)] += va * xi[b];
                }
            }
        }
        for a in 0..p {
            grad[a] -= ridge * beta[a];
            hess[(a, a)] += ridge;
            for b in 0..a {
                hess[(b, a)] = hess[(a, b)];
            }
        }
        let Some(chol) = hess.cholesky() else {
            return Outcome::Singular;
        };
        let step = chol.solve(&grad);
        if step.iter().any(|s| !s.is_finite()) {
            return Outcome::Singular;
        }
        let mut scale = 1.0;
        let mut accepted = false;
        let mut candidate = beta.clone();
        for _ in 0..40 {
            for a in 0..p {
                candidate[a] = beta[a] + scale * step[a];
            }
            let (o, e) = objective(design, &candidate, ridge);
            if o <= obj + 1e-12 * obj.abs().max(1.0) {
                obj = o;
                eta = e;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        let change = step.iter().map(|s| (s * scale).abs()).fold(0.0, f64::max);
        if !accepted {
            return Outcome::Done { beta, iterations: iter, converged: change < tol };
        }
        beta.copy_from_slice(&candidate);
        if ridge == 0.0
            && eta
                .iter()
                .zip(&design.weights)
                .any(|(e, &w)| w > 0.0 && e.abs() > SEPARATION_ETA)
        {
            return Outcome::Separated;
        }
        if change < tol {
            return Outcome::Done { beta, iterations: iter, converged: true };
        }
    }
    Outcome::Done { beta, iterations: max_iter, converged: false }
}

/// Max-norm of the weighted score `X'W(y - mu)` at the fitted coefficients.
pub fn score_norm(design: &DesignMatrix, model: &FittedModel) -> f64 {
    let eta = model.linear_predictor(design).expect("model columns present");
    let mut grad = vec![0.0; design.cols() + 1];
    for i in 0..design.rows() {
        let r = design.weights[i] * (design.y[i] - expit(eta[i] + design.offset[i]));
        grad[0] += r;
        for (j, x) in design.row(i).iter().enumerate() {
            grad[j + 1] += r * x;
        }
    }
    grad.iter().fold(0.0, |m, g| m.max(g.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn simulated(n: usize, seed: u64) -> DesignMatrix {
        let mut rng = stream(seed, 0);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let a: f64 = rng.random::<f64>() * 2.0 - 1.0;
            let b: f64 = if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 };
            x.extend([a, b]);
            let p = expit(-0.5 + 1.2 * a - 0.8 * b);
            y.push((rng.random::<f64>() < p) as u8 as f64);
        }
        DesignMatrix::new(vec!["a".into(), "b".into()], x, y).unwrap()
    }

    #[test]
    fn balanced_intercept_only() {
        let d = DesignMatrix::new(vec![], vec![], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let m = fit_logistic(&d).unwrap();
        assert!(m.intercept.abs() < 1e-12);
        assert!(m.predict(&d).unwrap().iter().all(|p| (p - 0.5).abs() < 1e-12));
    }

    #[test]
    fn offset_only_model_reproduces_offset() {
        // symmetric outcomes around the offset make the intercept exactly zero
        let off = 0.7;
        let p = expit(off);
        let y = vec![1.0, 0.0];
        let w = vec![p, 1.0 - p];
        let d = DesignMatrix::new(vec![], vec![], y).unwrap().with_weights(w).unwrap().with_offset(vec![off; 2]).unwrap();
        let m = fit_logistic(&d).unwrap();
        assert!(m.intercept.abs() < 1e-10, "{}", m.intercept);
        for q in m.predict(&d).unwrap() {
            assert!((q - p).abs() < 1e-10);
        }
    }

    #[test]
    fn separation_falls_back_to_ridge() {
        let d = DesignMatrix::new(vec!["x".into()], vec![0.0, 1.0], vec![0.0, 1.0]).unwrap();
        let m = fit_logistic(&d).unwrap();
        assert!(m.info.separation);
        assert!(m.info.ridge_fallback);
        let p = m.predict(&d).unwrap();
        assert!(p[1] > p[0]);
        assert!(m.coefficients[0] > 0.0);
    }

    #[test]
    fn score_vanishes_at_convergence() {
        let d = simulated(2000, 3).with_offset((0..2000).map(|i| (i % 7) as f64 * 0.05).collect()).unwrap();
        let d = d.clone().with_weights((0..2000).map(|i| 0.5 + (i % 3) as f64).collect()).unwrap();
        let m = fit_logistic(&d).unwrap();
        assert!(m.info.converged && !m.info.ridge_fallback);
        assert!(score_norm(&d, &m) < 1e-6, "{}", score_norm(&d, &m));
    }

    #[test]
    fn recovers_coefficients() {
        let d = simulated(20_000, 5);
        let m = fit_logistic(&d).unwrap();
        assert!((m.intercept + 0.5).abs() < 0.1);
        assert!((m.coefficients[0] - 1.2).abs() < 0.1);
        assert!((m.coefficients[1] + 0.8).abs() < 0.1);
    }

    #[test]
    fn zero_weight_design_is_an_error() {
        let d = DesignMatrix::new(vec![], vec![], vec![1.0]).unwrap().with_weights(vec![0.0]).unwrap();
        assert!(fit_logistic(&d).is_err());
    }
}
