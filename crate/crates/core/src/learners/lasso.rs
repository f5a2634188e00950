//! L1-penalised logistic regression by coordinate descent on standardised
//! columns, with the penalty chosen by grouped cross-validation.
//!
//! The objective is `(1/sum w) * sum w_i * nll_i + lambda * |beta|_1` with an
//! unpenalised intercept; `lambda` is on the standardised scale.

use serde::{Deserialize, Serialize};

use super::{
    expit, fit_logistic, fold_assignment, mean_neg_loglik, DesignMatrix, FitInfo, FittedModel,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoOptions {
    pub seed: u64,
    pub folds: usize,
    pub n_lambda: usize,
    /// Smallest grid value as a fraction of `lambda_max`.
    pub lambda_ratio: f64,
    /// Explicit grid, used instead of the generated one when present.
    pub lambda_grid: Option<Vec<f64>>,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self { seed: 0, folds: 10, n_lambda: 20, lambda_ratio: 1e-3, lambda_grid: None }
    }
}

/// Largest objective decrease from one coordinate move that still counts
/// as progress.
const INNER_TOL: f64 = 1e-13;
const OUTER_TOL: f64 = 1e-12;
const MAX_OUTER: usize = 200;
const MAX_SWEEPS: usize = 2_000;

/// Standardised copy of the design. Constant columns are dropped.
struct Standardized {
    /// Original column index for every kept column.
    keep: Vec<usize>,
    mean: Vec<f64>,
    sd: Vec<f64>,
    /// Column-major standardised values, `keep.len()` columns.
    z: Vec<Vec<f64>>,
    /// Normalised weights summing to one.
    w: Vec<f64>,
    y: Vec<f64>,
    offset: Vec<f64>,
}

impl Standardized {
    fn new(d: &DesignMatrix) -> Self {
        let total = d.total_weight();
        let w: Vec<f64> = d.weights.iter().map(|w| w / total).collect();
        let (mut keep, mut mean, mut sd, mut z) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for j in 0..d.cols() {
            let m: f64 = (0..d.rows()).map(|i| w[i] * d.get(i, j)).sum();
            let v: f64 = (0..d.rows()).map(|i| w[i] * (d.get(i, j) - m).powi(2)).sum();
            let s = v.sqrt();
            if s < 1e-12 {
                continue;
            }
            keep.push(j);
            mean.push(m);
            sd.push(s);
            z.push((0..d.rows()).map(|i| (d.get(i, j) - m) / s).collect());
        }
        Self { keep, mean, sd, z, w, y: d.y.clone(), offset: d.offset.clone() }
    }

    fn rows(&self) -> usize {
        self.y.len()
    }

    fn eta(&self, b0: f64, beta: &[f64]) -> Vec<f64> {
        let mut eta: Vec<f64> = self.offset.iter().map(|o| o + b0).collect();
        for (col, b) in self.z.iter().zip(beta) {
            if *b != 0.0 {
                for (e, zij) in eta.iter_mut().zip(col) {
                    *e += b * zij;
                }
            }
        }
        eta
    }

    fn objective(&self, eta: &[f64], beta: &[f64], lambda: f64) -> f64 {
        let mut nll = 0.0;
        for i in 0..self.rows() {
            let e = eta[i];
            let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            nll += self.w[i] * (softplus - self.y[i] * e);
        }
        nll + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
    }

    /// Intercept-only MLE with the offset, by 1-D Newton.
    fn null_intercept(&self) -> f64 {
        let ybar: f64 = self.w.iter().zip(&self.y).map(|(w, y)| w * y).sum();
        let mut b0 = if ybar > 0.0 && ybar < 1.0 { (ybar / (1.0 - ybar)).ln() } else { 0.0 };
        for _ in 0..100 {
            let (mut g, mut h) = (0.0, 0.0);
            for i in 0..self.rows() {
                let mu = expit(b0 + self.offset[i]);
                g += self.w[i] * (self.y[i] - mu);
                h += self.w[i] * mu * (1.0 - mu);
            }
            if h <= 0.0 {
                break;
            }
            let step = (g / h).clamp(-5.0, 5.0);
            b0 += step;
            if step.abs() < 1e-12 {
                break;
            }
        }
        b0
    }

    /// Penalised fit at `lambda`, warm-started from `(b0, beta)`.
    fn solve(&self, lambda: f64, b0: &mut f64, beta: &mut [f64]) -> (usize, bool) {
        let n = self.rows();
        let p = beta.len();
        let mut eta = self.eta(*b0, beta);
        let mut obj = self.objective(&eta, beta, lambda);
        for outer in 1..=MAX_OUTER {
            // quadratic approximation around the current fit
            let mut v = vec![0.0; n];
            let mut work = vec![0.0; n];
            for i in 0..n {
                let mu = expit(eta[i]).clamp(1e-5, 1.0 - 1e-5);
                let var = mu * (1.0 - mu);
                v[i] = self.w[i] * var;
                work[i] = (self.y[i] - mu) / var;
            }
            // Covariance updates: with the intercept as coordinate 0, keep the
            // weighted Gram matrix `gram` and the working-residual gradient
            // `grad`, so one coordinate move costs O(p) rather than O(n).
            let q = p + 1;
            let ones = vec![1.0; n];
            let cols: Vec<&[f64]> = std::iter::once(ones.as_slice()).chain(self.z.iter().map(|c| c.as_slice())).collect();
            let weighted: Vec<Vec<f64>> = cols.iter().map(|c| c.iter().zip(&v).map(|(x, v)| x * v).collect()).collect();
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let mut gram = vec![0.0; q * q];
            let mut grad = vec![0.0; q];
            for a in 0..q {
                grad[a] = dot(&weighted[a], &work);
                for b in a..q {
                    let g = dot(&weighted[a], cols[b]);
                    gram[a * q + b] = g;
                    gram[b * q + a] = g;
                }
            }
            let curv: Vec<f64> = (0..q).map(|j| gram[j * q + j]).collect();
            let (old_b0, old_beta) = (*b0, beta.to_vec());
            // coefficients as one vector: intercept first
            let mut coef: Vec<f64> = std::iter::once(*b0).chain(beta.iter().copied()).collect();
            let update = |j: usize, coef: &mut [f64], grad: &mut [f64]| -> f64 {
                if curv[j] <= 0.0 {
                    return 0.0;
                }
                let u = grad[j] + curv[j] * coef[j];
                let updated = if j == 0 { u / curv[j] } else { soft_threshold(u, lambda) / curv[j] };
                let d = updated - coef[j];
                if d == 0.0 {
                    return 0.0;
                }
                for (g, gk) in grad.iter_mut().zip(&gram[j * q..(j + 1) * q]) {
                    *g -= d * gk;
                }
                coef[j] = updated;
                curv[j] * d * d
            };
            // full sweeps alternate with sweeps over the nonzero set until a
            // full sweep changes nothing
            let mut sweeps = 0;
            while sweeps < MAX_SWEEPS {
                sweeps += 1;
                let mut delta: f64 = 0.0;
                for j in 0..q {
                    delta = delta.max(update(j, &mut coef, &mut grad));
                }
                if delta < INNER_TOL {
                    break;
                }
                let active: Vec<usize> = (0..q).filter(|&j| j == 0 || coef[j] != 0.0).collect();
                while sweeps < MAX_SWEEPS {
                    sweeps += 1;
                    let mut delta: f64 = 0.0;
                    for &j in &active {
                        delta = delta.max(update(j, &mut coef, &mut grad));
                    }
                    if delta < INNER_TOL {
                        break;
                    }
                }
            }
            let vsum = curv[0];
            let curv = &curv[1..];
            let nb0 = coef[0];
            let nbeta = coef[1..].to_vec();
            // backtrack on the true objective if the quadratic step overshoots
            let mut scale = 1.0;
            let mut accepted = false;
            let mut cand_b0 = nb0;
            let mut cand_beta = nbeta.clone();
            for _ in 0..30 {
                cand_b0 = old_b0 + scale * (nb0 - old_b0);
                for j in 0..p {
                    cand_beta[j] = old_beta[j] + scale * (nbeta[j] - old_beta[j]);
                }
                let e = self.eta(cand_b0, &cand_beta);
                let o = self.objective(&e, &cand_beta, lambda);
                if o <= obj + 1e-14 {
                    eta = e;
                    obj = o;
                    accepted = true;
                    break;
                }
                scale *= 0.5;
            }
            if !accepted {
                return (outer, true);
            }
            // move size on the objective scale, so drift along flat
            // (collinear) directions does not hold up convergence
            let change = std::iter::once(vsum * (cand_b0 - old_b0).powi(2))
                .chain((0..p).map(|j| curv[j] * (cand_beta[j] - old_beta[j]).powi(2)))
                .fold(0.0, f64::max);
            *b0 = cand_b0;
            beta.copy_from_slice(&cand_beta);
            if change < OUTER_TOL {
                return (outer, true);
            }
        }
        (MAX_OUTER, false)
    }

    fn lambda_max(&self) -> f64 {
        let b0 = self.null_intercept();
        self.z
            .iter()
            .map(|col| {
                (0..self.rows())
                    .map(|i| self.w[i] * col[i] * (self.y[i] - expit(b0 + self.offset[i])))
                    .sum::<f64>()
                    .abs()
            })
            .fold(0.0, f64::max)
    }

    /// Solutions along a decreasing grid, warm-started.
    fn path(&self, grid: &[f64]) -> Vec<(f64, Vec<f64>, usize, bool)> {
        let mut b0 = self.null_intercept();
        let mut beta = vec![0.0; self.z.len()];
        grid.iter()
            .map(|&lambda| {
                let (it, conv) = self.solve(lambda, &mut b0, &mut beta);
                (b0, beta.clone(), it, conv)
            })
            .collect()
    }

    fn to_model(&self, d: &DesignMatrix, b0: f64, beta: &[f64], info: FitInfo) -> FittedModel {
        let mut coefficients = vec![0.0; d.cols()];
        let mut intercept = b0;
        for (k, &j) in self.keep.iter().enumerate() {
            coefficients[j] = beta[k] / self.sd[k];
            intercept -= beta[k] * self.mean[k] / self.sd[k];
        }
        FittedModel {
            learner: "lasso".into(),
            intercept,
            columns: d.names().to_vec(),
            coefficients,
            info,
            cv: None,
        }
    }
}

fn soft_threshold(u: f64, lambda: f64) -> f64 {
    if u > lambda {
        u - lambda
    } else if u < -lambda {
        u + lambda
    } else {
        0.0
    }
}

fn check_design(d: &DesignMatrix) -> Result<()> {
    if d.rows() == 0 || d.total_weight() <= 0.0 {
        return Err(Error::Learner("lasso needs a positive-weight observation".into()));
    }
    Ok(())
}

/// Smallest penalty at which every slope is zero.
pub fn lambda_max(design: &DesignMatrix) -> Result<f64> {
    check_design(design)?;
    Ok(Standardized::new(design).lambda_max())
}

/// Fit at a single penalty (0 gives the unpenalised MLE).
pub fn fit_lasso_path_point(design: &DesignMatrix, lambda: f64) -> Result<FittedModel> {
    check_design(design)?;
    if !(lambda >= 0.0) {
        return Err(Error::InvalidInput("lambda must be nonnegative".into()));
    }
    let s = Standardized::new(design);
    let lmax = s.lambda_max();
    let grid: Vec<f64> = if lambda < lmax { vec![lmax, lambda] } else { vec![lambda] };
    let (b0, beta, it, conv) = s.path(&grid).pop().expect("nonempty grid");
    let info = FitInfo { iterations: it, converged: conv, lambda: Some(lambda), ..FitInfo::default() };
    Ok(s.to_model(design, b0, &beta, info))
}

fn grid_for(s: &Standardized, opts: &LassoOptions) -> Vec<f64> {
    if let Some(g) = &opts.lambda_grid {
        let mut g = g.clone();
        g.sort_by(|a, b| b.total_cmp(a));
        return g;
    }
    let lmax = s.lambda_max();
    let k = opts.n_lambda.max(1);
    if k == 1 {
        return vec![lmax];
    }
    (0..k)
        .map(|i| lmax * opts.lambda_ratio.powf(i as f64 / (k - 1) as f64))
        .collect()
}

/// Lasso logistic regression with the penalty picked by grouped K-fold CV on
/// deviance. An outcome without variation yields the intercept-only model.
pub fn fit_lasso_logistic(design: &DesignMatrix, opts: &LassoOptions) -> Result<FittedModel> {
    check_design(design)?;
    let positive: Vec<f64> =
        design.y.iter().zip(&design.weights).filter(|(_, &w)| w > 0.0).map(|(y, _)| *y).collect();
    let varies = positive.iter().any(|&y| y != positive[0]);
    let s = Standardized::new(design);
    if !varies || s.keep.is_empty() {
        let b = fit_logistic(&intercept_design(design))?;
        let m = FittedModel {
            learner: "lasso".into(),
            intercept: b.intercept,
            columns: design.names().to_vec(),
            coefficients: vec![0.0; design.cols()],
            info: FitInfo { lambda: Some(f64::INFINITY), ..b.info },
            cv: None,
        };
        return Ok(m);
    }
    let grid = grid_for(&s, opts);
    let folds = fold_assignment(&design.groups, opts.folds, opts.seed);
    let k = folds.iter().copied().max().map_or(0, |m| m + 1);
    let mut dev = vec![0.0; grid.len()];
    let mut dev_weight = 0.0;
    for fold in 0..k {
        let train: Vec<usize> = (0..design.rows()).filter(|&i| folds[i] != fold).collect();
        let test: Vec<usize> = (0..design.rows()).filter(|&i| folds[i] == fold).collect();
        if train.is_empty() || test.is_empty() {
            continue;
        }
        let td = design.subset(&train);
        if td.total_weight() <= 0.0 {
            continue;
        }
        let ts = Standardized::new(&td);
        let hold = design.subset(&test);
        let w_hold = hold.total_weight();
        if w_hold <= 0.0 {
            continue;
        }
        for (g, (b0, beta, _, _)) in ts.path(&grid).into_iter().enumerate() {
            let m = ts.to_model(&td, b0, &beta, FitInfo::default());
            let p = m.predict(&hold)?;
            dev[g] += 2.0 * w_hold * mean_neg_loglik(&hold.y, &p, &hold.weights);
        }
        dev_weight += w_hold;
    }
    let best = if dev_weight > 0.0 {
        dev.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap_or(0)
    } else {
        grid.len() - 1
    };
    let path = s.path(&grid[..=best]);
    let (b0, beta, it, conv) = path.into_iter().last().expect("nonempty path");
    let info = FitInfo { iterations: it, converged: conv, lambda: Some(grid[best]), ..FitInfo::default() };
    Ok(s.to_model(design, b0, &beta, info))
}

fn intercept_design(d: &DesignMatrix) -> DesignMatrix {
    DesignMatrix::new(Vec::new(), Vec::new(), d.y.clone())
        .and_then(|m| m.with_weights(d.weights.clone()))
        .and_then(|m| m.with_offset(d.offset.clone()))
        .expect("same row count")
}

/// Largest KKT violation on the standardised scale at penalty `lambda`.
#[cfg(test)]
fn kkt_violation(design: &DesignMatrix, model: &FittedModel, lambda: f64) -> f64 {
    let s = Standardized::new(design);
    let eta = model.linear_predictor(design).unwrap();
    let mut worst: f64 = 0.0;
    // intercept score
    let g0: f64 = (0..s.rows()).map(|i| s.w[i] * (s.y[i] - expit(eta[i] + s.offset[i]))).sum();
    worst = worst.max(g0.abs());
    for (k, &j) in s.keep.iter().enumerate() {
        let g: f64 = (0..s.rows())
            .map(|i| s.w[i] * s.z[k][i] * (s.y[i] - expit(eta[i] + s.offset[i])))
            .sum();
        let b = model.coefficients[j] * s.sd[k];
        let v = if b != 0.0 { (g - lambda * b.signum()).abs() } else { (g.abs() - lambda).max(0.0) };
        worst = worst.max(v);
    }
    worst
}
