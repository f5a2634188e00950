//! Targeted estimation of `S(t0)` under the resampling design.
//!
//! All variants share one targeting core that accepts per-subject
//! observation weights; the fixed-follow-up estimator is the unit-weight case.

mod fixed;
mod varied;

pub use fixed::{estimate_fixed_tmle, plugin_untargeted, FixedOptions};
pub use varied::{
    censoring_features, d_star_star, estimate_censoring_hazard, estimate_ipcw_tmle,
    estimate_projection_f, estimate_stratified_tmle, g_score_terms, joint_target, known_censoring, target_g,
    CensoringMode, CensoringModel, GTargetingState, Projection, G_MIN,
};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hazard::HazardSurface;
use crate::learners::{clip_prob, expit, fit_logistic, logit, DesignMatrix, FittedModel};
use crate::report::{mean_sd, score_threshold};

pub const MAX_POOLED_ITER: usize = 50;
const EPS_MAX_ITER: usize = 25;
const EPS_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Known,
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMethod {
    Pooled,
    Recursive,
}

/// `P(delta = 1 | W, history)` per subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaWeights {
    pub mode: WeightMode,
    pub pi: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<FittedModel>,
}

/// Design probabilities: 1 when the outcome is known from clinic data,
/// `resample_prob` otherwise.
pub fn known_delta_weights(data: &Dataset, resample_prob: f64) -> Result<DeltaWeights> {
    if !(resample_prob > 0.0 && resample_prob <= 1.0) {
        return Err(Error::InvalidInput("resampling probability must be in (0, 1]".into()));
    }
    let pi = data
        .subjects
        .iter()
        .map(|s| if s.clinic_known() { 1.0 } else { resample_prob })
        .collect();
    Ok(DeltaWeights { mode: WeightMode::Known, pi, model: None })
}

/// Column names of the resampling model.
pub fn delta_feature_names(include_tau: bool) -> Vec<String> {
    let mut names: Vec<String> =
        ["w1", "w2", "w3", "last_visit", "last_biomarker", "never_measured"].iter().map(|s| s.to_string()).collect();
    if include_tau {
        names.push("tau".into());
    }
    names
}

fn delta_features(s: &crate::data::ObservedSubject, include_tau: bool, out: &mut Vec<f64>) {
    let [w1, w2, w3] = s.w.as_f64();
    let summary = s.summary();
    out.extend_from_slice(&[
        w1,
        w2,
        w3,
        s.last_visit as f64,
        summary.last_biomarker.unwrap_or(0.0),
        summary.last_biomarker.is_none() as u8 as f64,
    ]);
    if include_tau {
        out.push(s.tau as f64);
    }
}

/// Logistic model for `delta` among subjects eligible for tracing.
/// Without eligible subjects every probability is 1.
pub fn estimate_delta_weights(data: &Dataset, include_tau: bool) -> Result<DeltaWeights> {
    let eligible: Vec<usize> = (0..data.len()).filter(|&i| data.subjects[i].resample_eligible()).collect();
    let mut pi = vec![1.0; data.len()];
    if eligible.is_empty() {
        return Ok(DeltaWeights { mode: WeightMode::Estimated, pi, model: None });
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for &i in &eligible {
        delta_features(&data.subjects[i], include_tau, &mut x);
        y.push(data.subjects[i].delta() as u8 as f64);
    }
    let design = DesignMatrix::new(delta_feature_names(include_tau), x, y)?;
    let model = fit_logistic(&design)?;
    for (&i, p) in eligible.iter().zip(model.predict(&design)?) {
        pi[i] = p;
    }
    Ok(DeltaWeights { mode: WeightMode::Estimated, pi, model: Some(model) })
}

/// One row of a one-parameter offset logistic fluctuation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluctuationRow {
    pub offset: f64,
    pub covariate: f64,
    pub y: f64,
    pub weight: f64,
}

fn fluctuation_loglik(rows: &[FluctuationRow], eps: f64) -> f64 {
    rows.iter()
        .map(|r| {
            let eta = r.offset + eps * r.covariate;
            // y*eta - log(1 + e^eta)
            let softplus = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
            r.weight * (r.y * eta - softplus)
        })
        .sum()
}

/// Maximum-likelihood `epsilon` by 1-D Newton with step halving.
pub fn fit_epsilon(rows: &[FluctuationRow]) -> f64 {
    let mut eps = 0.0;
    let mut ll = fluctuation_loglik(rows, eps);
    for _ in 0..EPS_MAX_ITER {
        let (mut grad, mut info) = (0.0, 0.0);
        for r in rows {
            let p = expit(r.offset + eps * r.covariate);
            grad += r.weight * r.covariate * (r.y - p);
            info += r.weight * r.covariate * r.covariate * p * (1.0 - p);
        }
        if !(info > 0.0) || grad == 0.0 {
            break;
        }
        let mut step = grad / info;
        let mut moved = false;
        for _ in 0..50 {
            let cand = fluctuation_loglik(rows, eps + step);
            if cand >= ll {
                eps += step;
                ll = cand;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved || step.abs() < EPS_TOL {
            break;
        }
    }
    eps
}

/// `lambda* = expit(logit(lambda) + eps * h)`, clipped.
pub fn fluctuate(lambda: f64, eps: f64, h: f64) -> f64 {
    clip_prob(expit(logit(lambda) + eps * h))
}

/// Fluctuation covariate `S(t0)/S(t) / pi` on `t = 1..=t0`; zero on
/// deterministic cells and beyond `t0`.
pub fn clever_covariate_row(surface: &HazardSurface, i: usize, t0: usize, pi: f64) -> Vec<f64> {
    let s = surface.survival_row(i, t0);
    let m = surface.last_visit(i);
    (1..=t0).map(|t| if t > m { s[t0] / s[t] / pi } else { 0.0 }).collect()
}

/// `H(t)` including the at-risk and `delta` indicators.
pub fn clever_covariate(surface: &HazardSurface, pi: &[f64], i: usize, t: usize, t0: usize) -> f64 {
    if t == 0 || t > t0 || !surface.at_risk(i, t) {
        return 0.0;
    }
    clever_covariate_row(surface, i, t0, pi[i])[t - 1]
}

/// Weighted plug-in `psi = sum w S(t0) / sum w` and per-subject `D*` at it.
pub fn eif(surface: &HazardSurface, pi: &[f64], weights: &[f64], t0: usize) -> (f64, Vec<f64>) {
    let n = surface.len();
    let mut s_t0 = Vec::with_capacity(n);
    let mut resid = Vec::with_capacity(n);
    for i in 0..n {
        let h = clever_covariate_row(surface, i, t0, pi[i]);
        let r: f64 = (1..=t0)
            .filter(|&t| surface.at_risk(i, t))
            .map(|t| h[t - 1] * (surface.dn(i, t) - surface.lambda(i, t)))
            .sum();
        resid.push(r);
        s_t0.push(surface.survival(i, t0));
    }
    let wsum: f64 = weights.iter().sum();
    let psi = s_t0.iter().zip(weights).map(|(s, w)| s * w).sum::<f64>() / wsum;
    let d = (0..n).map(|i| -resid[i] + s_t0[i] - psi).collect();
    (psi, d)
}

/// Unit-weight EIF of the fixed-follow-up parameter.
pub fn eif_fixed(surface: &HazardSurface, pi: &[f64], t0: usize) -> (f64, Vec<f64>) {
    eif(surface, pi, &vec![1.0; surface.len()], t0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetingState {
    pub surface: HazardSurface,
    pub psi: f64,
    /// `D*` per subject (unweighted).
    pub dstar: Vec<f64>,
    pub epsilon_path: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Mean and threshold of `w * D*`, the quantity the targeting solves.
    pub score_mean: f64,
    pub score_threshold: f64,
    pub warnings: Vec<String>,
}

fn criterion(weights: &[f64], d: &[f64]) -> (f64, f64) {
    let c: Vec<f64> = weights.iter().zip(d).map(|(w, d)| w * d).collect();
    (mean_sd(&c).0, score_threshold(&c))
}

fn score_rows(surface: &HazardSurface, weights: &[f64], i: usize, t0: usize, h: &[f64], out: &mut Vec<FluctuationRow>) {
    if weights[i] <= 0.0 {
        return;
    }
    for t in surface.last_visit(i) + 1..=t0 {
        if surface.at_risk(i, t) {
            out.push(FluctuationRow {
                offset: logit(surface.lambda(i, t)),
                covariate: h[t - 1],
                y: surface.dn(i, t),
                weight: weights[i],
            });
        }
    }
}

/// Iterative pooled targeting of every time point at once.
pub fn target_pooled(
    initial: &HazardSurface,
    pi: &[f64],
    weights: &[f64],
    t0: usize,
    max_iter: usize,
) -> TargetingState {
    let mut surface = initial.clone();
    let n = surface.len();
    let mut path = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for iter in 1..=max_iter {
        iterations = iter;
        let h: Vec<Vec<f64>> = (0..n).map(|i| clever_covariate_row(&surface, i, t0, pi[i])).collect();
        let mut rows = Vec::new();
        for i in 0..n {
            score_rows(&surface, weights, i, t0, &h[i], &mut rows);
        }
        if rows.is_empty() {
            converged = true;
            break;
        }
        let eps = fit_epsilon(&rows);
        path.push(eps);
        if eps != 0.0 {
            for i in 0..n {
                for t in surface.last_visit(i) + 1..=t0 {
                    let l = fluctuate(surface.lambda(i, t), eps, h[i][t - 1]);
                    surface.set_lambda(i, t, l);
                }
            }
        }
        let (_, d) = eif(&surface, pi, weights, t0);
        let (m, thr) = criterion(weights, &d);
        if m.abs() <= thr {
            converged = true;
            break;
        }
    }
    finish(surface, pi, weights, t0, path, iterations, converged)
}

/// Single backward pass `t = t0, ..., 1`, each fit on that time's rows.
pub fn target_recursive(initial: &HazardSurface, pi: &[f64], weights: &[f64], t0: usize) -> TargetingState {
    let mut surface = initial.clone();
    let n = surface.len();
    // running S(t0)/S(t) per subject
    let mut ratio = vec![1.0; n];
    let mut path = vec![0.0; t0];
    let mut warnings = Vec::new();
    for t in (1..=t0).rev() {
        let mut rows = Vec::new();
        for i in 0..n {
            if weights[i] > 0.0 && surface.at_risk(i, t) {
                rows.push(FluctuationRow {
                    offset: logit(surface.lambda(i, t)),
                    covariate: ratio[i] / pi[i],
                    y: surface.dn(i, t),
                    weight: weights[i],
                });
            }
        }
        let eps = if rows.is_empty() {
            warnings.push(format!("no at-risk rows at t={t}; epsilon set to 0"));
            0.0
        } else {
            fit_epsilon(&rows)
        };
        path[t - 1] = eps;
        for i in 0..n {
            if !surface.deterministic(i, t) {
                if eps != 0.0 {
                    let l = fluctuate(surface.lambda(i, t), eps, ratio[i] / pi[i]);
                    surface.set_lambda(i, t, l);
                }
                ratio[i] *= 1.0 - surface.lambda(i, t);
            }
        }
    }
    let (_, d) = eif(&surface, pi, weights, t0);
    let (m, thr) = criterion(weights, &d);
    let mut state = finish(surface, pi, weights, t0, path, 1, m.abs() <= thr);
    state.warnings.extend(warnings);
    state
}

fn finish(
    surface: HazardSurface,
    pi: &[f64],
    weights: &[f64],
    t0: usize,
    epsilon_path: Vec<f64>,
    iterations: usize,
    converged: bool,
) -> TargetingState {
    let (psi, dstar) = eif(&surface, pi, weights, t0);
    let (score_mean, score_threshold) = criterion(weights, &dstar);
    let mut warnings = Vec::new();
    if !converged {
        warnings.push(format!("targeting stopped after {iterations} iterations without meeting the criterion"));
    }
    TargetingState {
        surface,
        psi,
        dstar,
        epsilon_path,
        iterations,
        converged,
        score_mean,
        score_threshold,
        warnings,
    }
}

pub fn target(
    initial: &HazardSurface,
    pi: &[f64],
    weights: &[f64],
    t0: usize,
    method: TargetMethod,
) -> TargetingState {
    match method {
        TargetMethod::Pooled => target_pooled(initial, pi, weights, t0, MAX_POOLED_ITER),
        TargetMethod::Recursive => target_recursive(initial, pi, weights, t0),
    }
}

fn check_t0(surface: &HazardSurface, t0: usize) -> Result<()> {
    if t0 == 0 || t0 > surface.horizon() {
        return Err(Error::InvalidInput(format!("t0={t0} outside 1..={}", surface.horizon())));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
