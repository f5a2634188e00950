//! Estimators for designs where follow-up `tau` varies between subjects.

use serde::{Deserialize, Serialize};

use super::{check_t0, fit_epsilon, fluctuate, target, DeltaWeights, FluctuationRow, TargetMethod};
use crate::data::{Dataset, ObservedSubject};
use crate::error::{Error, Result};
use crate::hazard::HazardSurface;
use crate::learners::{fit_linear, logit, DesignMatrix, LearnerSpec};
use crate::report::{ic_se, mean_sd, score_threshold, Diagnostics, EstimateReport};
use crate::rng::derive_seed;

/// Positivity floor on `G(t0)`.
pub const G_MIN: f64 = 0.025;

pub const MAX_OUTER_ITER: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CensoringMode {
    Known,
    Estimated,
    Targeted,
}

/// Discrete hazards `lambda_tau(s)` of the end of follow-up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensoringModel {
    pub mode: CensoringMode,
    horizon: usize,
    /// Row-major `n x horizon`, column `s - 1`.
    lambda: Vec<f64>,
    tau: Vec<usize>,
    /// Marginal law, for known mode.
    pub law: Option<Vec<(usize, f64)>>,
    #[serde(default)]
    pub epsilon_path: Vec<f64>,
}

impl CensoringModel {
    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    pub fn lambda(&self, i: usize, s: usize) -> f64 {
        self.lambda[i * self.horizon + s - 1]
    }

    /// Subject `i` is still under follow-up at `s` (`tau >= s`).
    pub fn at_risk(&self, i: usize, s: usize) -> bool {
        self.tau[i] >= s
    }

    /// `dA(s) = I(tau = s)`.
    pub fn da(&self, i: usize, s: usize) -> f64 {
        (self.tau[i] == s) as u8 as f64
    }

    /// `P(tau >= t0 | history) = prod_{s < t0} (1 - lambda(s))`, untruncated.
    pub fn gbar(&self, i: usize, t0: usize) -> f64 {
        (1..t0).map(|s| 1.0 - self.lambda(i, s)).product()
    }

    /// IPCW weights `I(tau >= t0) / max(G(t0), G_MIN)` and the number of
    /// truncated weights.
    pub fn weights(&self, t0: usize) -> Result<(Vec<f64>, usize)> {
        if t0 == 0 || t0 > self.horizon {
            return Err(Error::InvalidInput(format!("t0={t0} outside 1..={}", self.horizon)));
        }
        if let Some(law) = &self.law {
            let p: f64 = law.iter().filter(|(t, _)| *t >= t0).map(|(_, p)| p).sum();
            if p <= 0.0 {
                return Err(Error::NoFollowUp(t0));
            }
        }
        let mut truncated = 0;
        let w = (0..self.len())
            .map(|i| {
                if self.tau[i] < t0 {
                    return 0.0;
                }
                let g = self.gbar(i, t0);
                if g < G_MIN {
                    truncated += 1;
                }
                1.0 / g.max(G_MIN)
            })
            .collect();
        Ok((w, truncated))
    }
}

/// Hazards of a covariate-free follow-up law: `P(tau = s) / P(tau >= s)`.
pub fn known_censoring(data: &Dataset, law: &[(usize, f64)]) -> Result<CensoringModel> {
    let total: f64 = law.iter().map(|(_, p)| p).sum();
    if law.iter().any(|&(t, p)| t == 0 || t > data.t_max || !(p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config("follow-up law must be a distribution on 1..=t_max".into()));
    }
    let h = data.t_max;
    let hazards: Vec<f64> = (1..=h)
        .map(|s| {
            let at: f64 = law.iter().filter(|(t, _)| *t == s).map(|(_, p)| p).sum();
            let surv: f64 = law.iter().filter(|(t, _)| *t >= s).map(|(_, p)| p).sum();
            if surv > 0.0 { at / surv } else { 1.0 }
        })
        .collect();
    let mut lambda = Vec::with_capacity(data.len() * h);
    for _ in 0..data.len() {
        lambda.extend_from_slice(&hazards);
    }
    Ok(CensoringModel {
        mode: CensoringMode::Known,
        horizon: h,
        lambda,
        tau: data.subjects.iter().map(|s| s.tau).collect(),
        law: Some(law.to_vec()),
        epsilon_path: Vec::new(),
    })
}

pub const CENSORING_FEATURES: [&str; 6] = ["w1", "w2", "w3", "visit_count", "last_biomarker", "never_measured"];

/// Covariates of the censoring model at `s`: history strictly before `s`.
pub fn censoring_features(subject: &ObservedSubject, s: usize, out: &mut Vec<f64>) {
    let [w1, w2, w3] = subject.w.as_f64();
    let h = subject.summary_through(s - 1);
    out.extend_from_slice(&[
        w1,
        w2,
        w3,
        h.visit_count as f64,
        h.last_biomarker.unwrap_or(0.0),
        h.last_biomarker.is_none() as u8 as f64,
    ]);
}

fn names() -> Vec<String> {
    CENSORING_FEATURES.iter().map(|s| s.to_string()).collect()
}

/// Separate regression of `dA(s)` at every `s` among subjects with `tau >= s`.
/// Times without variation in `dA` get hazard exactly 0 or 1.
pub fn estimate_censoring_hazard(data: &Dataset, learner: &LearnerSpec, seed: u64) -> Result<CensoringModel> {
    let h = data.t_max;
    let n = data.len();
    let mut lambda = vec![0.0; n * h];
    for s in 1..=h {
        let rows: Vec<usize> = (0..n).filter(|&i| data.subjects[i].tau >= s).collect();
        if rows.is_empty() {
            continue;
        }
        let events = rows.iter().filter(|&&i| data.subjects[i].tau == s).count();
        if events == 0 || events == rows.len() {
            let v = if events == 0 { 0.0 } else { 1.0 };
            rows.iter().for_each(|&i| lambda[i * h + s - 1] = v);
            continue;
        }
        let mut x = Vec::with_capacity(rows.len() * CENSORING_FEATURES.len());
        let mut y = Vec::with_capacity(rows.len());
        for &i in &rows {
            censoring_features(&data.subjects[i], s, &mut x);
            y.push((data.subjects[i].tau == s) as u8 as f64);
        }
        let design = DesignMatrix::new(names(), x, y)?;
        let model = learner.fit(&design, derive_seed(seed, s as u64))?;
        for (&i, p) in rows.iter().zip(model.predict(&design)?) {
            lambda[i * h + s - 1] = p;
        }
    }
    Ok(CensoringModel {
        mode: CensoringMode::Estimated,
        horizon: h,
        lambda,
        tau: data.subjects.iter().map(|s| s.tau).collect(),
        law: None,
        epsilon_path: Vec::new(),
    })
}

/// `f(s)` per subject for `s = 1..t0-1`: the effect of `dA(s)` on `D*_G`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub t0: usize,
    /// Row-major `n x t0`, column `s - 1`; zero outside the risk set.
    values: Vec<f64>,
    pub flags: Vec<String>,
}

impl Projection {
    pub fn zero(n: usize, t0: usize) -> Self {
        Self { t0, values: vec![0.0; n * t0], flags: Vec::new() }
    }

    pub fn f(&self, i: usize, s: usize) -> f64 {
        self.values[i * self.t0 + s - 1]
    }

    pub fn set(&mut self, i: usize, s: usize, v: f64) {
        self.values[i * self.t0 + s - 1] = v;
    }
}

/// Least-squares arm fit; small arms fall back to their mean.
fn arm_fit(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    let p = CENSORING_FEATURES.len();
    if y.len() > 2 * (p + 1) {
        fit_linear(x, p, y, &vec![1.0; y.len()])
    } else {
        let mut b = vec![0.0; p + 1];
        b[0] = y.iter().sum::<f64>() / y.len() as f64;
        Ok(b)
    }
}

fn predict_linear(b: &[f64], x: &[f64]) -> f64 {
    b[0] + x.iter().zip(&b[1..]).map(|(x, b)| x * b).sum::<f64>()
}

/// Regress `D*_G` on `dA(s)` and history within each arm of `dA(s)`
/// (a fully interacted linear model) and take the difference of the arm
/// predictions.
pub fn estimate_projection_f(
    data: &Dataset,
    censoring: &CensoringModel,
    dstar_g: &[f64],
    t0: usize,
) -> Result<Projection> {
    let n = data.len();
    let p = CENSORING_FEATURES.len();
    let mut proj = Projection::zero(n, t0);
    for s in 1..t0 {
        let rows: Vec<usize> = (0..n).filter(|&i| censoring.at_risk(i, s)).collect();
        if rows.is_empty() {
            proj.flags.push(format!("no subjects under follow-up at s={s}; f set to 0"));
            continue;
        }
        let mut feats = Vec::with_capacity(rows.len() * p);
        for &i in &rows {
            censoring_features(&data.subjects[i], s, &mut feats);
        }
        let (mut x1, mut y1, mut x0, mut y0) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (k, &i) in rows.iter().enumerate() {
            let xi = &feats[k * p..(k + 1) * p];
            if censoring.da(i, s) == 1.0 {
                x1.extend_from_slice(xi);
                y1.push(dstar_g[i]);
            } else {
                x0.extend_from_slice(xi);
                y0.push(dstar_g[i]);
            }
        }
        if y1.is_empty() || y0.is_empty() {
            if !y1.is_empty() || s + 1 < t0 {
                // only worth noting when dA could have varied
                proj.flags.push(format!("dA constant at s={s}; f set to 0"));
            }
            continue;
        }
        let b1 = arm_fit(&x1, &y1)?;
        let b0 = arm_fit(&x0, &y0)?;
        for (k, &i) in rows.iter().enumerate() {
            let xi = &feats[k * p..(k + 1) * p];
            proj.set(i, s, predict_linear(&b1, xi) - predict_linear(&b0, xi));
        }
    }
    Ok(proj)
}

/// Per-subject `sum_s f(s) (dA(s) - lambda_tau(s))` over `s < t0`, `tau >= s`.
pub fn g_score_terms(censoring: &CensoringModel, proj: &Projection) -> Vec<f64> {
    (0..censoring.len())
        .map(|i| {
            (1..proj.t0)
                .filter(|&s| censoring.at_risk(i, s))
                .map(|s| proj.f(i, s) * (censoring.da(i, s) - censoring.lambda(i, s)))
                .sum()
        })
        .collect()
}

/// `D**_G = D*_G - sum_s f(s) (dA(s) - lambda_tau(s))`.
pub fn d_star_star(dstar_g: &[f64], proj: &Projection, censoring: &CensoringModel) -> Vec<f64> {
    dstar_g.iter().zip(g_score_terms(censoring, proj)).map(|(d, g)| d - g).collect()
}

/// Offset-logistic fluctuation of `lambda_tau` along `f` on the censoring
/// risk rows whose hazard is not degenerate.
pub fn target_g(censoring: &CensoringModel, proj: &Projection) -> (CensoringModel, f64) {
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for i in 0..censoring.len() {
        for s in 1..proj.t0 {
            let l = censoring.lambda(i, s);
            if censoring.at_risk(i, s) && l > 0.0 && l < 1.0 {
                rows.push(FluctuationRow { offset: logit(l), covariate: proj.f(i, s), y: censoring.da(i, s), weight: 1.0 });
                cells.push((i, s));
            }
        }
    }
    let eps = fit_epsilon(&rows);
    let mut out = censoring.clone();
    out.mode = CensoringMode::Targeted;
    out.epsilon_path.push(eps);
    if eps != 0.0 {
        for (i, s) in cells {
            out.lambda[i * out.horizon + s - 1] = fluctuate(censoring.lambda(i, s), eps, proj.f(i, s));
        }
    }
    (out, eps)
}

fn check_delta(data: &Dataset, surface: &HazardSurface, delta: &DeltaWeights, cens: &CensoringModel) -> Result<()> {
    if delta.pi.len() != data.len() || surface.len() != data.len() || cens.len() != data.len() {
        return Err(Error::InvalidInput("weights, models and data disagree on n".into()));
    }
    Ok(())
}

/// Targeting and plug-in within `{tau >= t0}`; inference through
/// `I(tau >= t0) / G(t0) * D*`.
pub fn estimate_stratified_tmle(
    data: &Dataset,
    surface: &HazardSurface,
    t0: usize,
    censoring: &CensoringModel,
    delta: &DeltaWeights,
    method: TargetMethod,
) -> Result<EstimateReport> {
    check_delta(data, surface, delta, censoring)?;
    check_t0(surface, t0)?;
    let stratum: Vec<f64> = data.subjects.iter().map(|s| (s.tau >= t0) as u8 as f64).collect();
    if stratum.iter().all(|&w| w == 0.0) {
        return Err(Error::EmptyStratum(t0));
    }
    let (ipcw, truncated) = censoring.weights(t0)?;
    let state = target(surface, &delta.pi, &stratum, t0, method);
    let ic: Vec<f64> = state.dstar.iter().zip(&ipcw).map(|(d, w)| w * d).collect();
    let mut r = EstimateReport::with_se("tmle-stratified", t0, state.psi, ic_se(&ic));
    r.diagnostics = Diagnostics {
        iterations: Some(state.iterations),
        epsilon_path: state.epsilon_path,
        converged: Some(state.converged),
        eif_mean: Some(state.score_mean),
        eif_threshold: Some(state.score_threshold),
        truncated_weights: Some(truncated),
        warnings: state.warnings,
        ..Diagnostics::default()
    };
    r.influence = ic;
    Ok(r)
}

/// State of the joint outcome / censoring targeting.
#[derive(Debug, Clone, PartialEq)]
pub struct GTargetingState {
    pub censoring: CensoringModel,
    pub projection: Projection,
    pub dstar_g: Vec<f64>,
    pub dstarstar_g: Vec<f64>,
    pub g_epsilon_path: Vec<f64>,
    pub outer_iterations: usize,
    pub outcome_converged: bool,
    pub g_converged: bool,
}

impl GTargetingState {
    pub fn converged(&self) -> bool {
        self.outcome_converged && self.g_converged
    }
}

fn variance(v: &[f64]) -> f64 {
    mean_sd(v).1.powi(2)
}

/// IPCW-TMLE: the targeting regression is weighted by `I(tau >= t0)/G(t0)`
/// and the plug-in is the normalised weighted mean. Known censoring gives
/// inference through `D*_G`, estimated censoring through `D**_G`, targeted
/// censoring runs [`joint_target`].
pub fn estimate_ipcw_tmle(
    data: &Dataset,
    surface: &HazardSurface,
    t0: usize,
    censoring: &CensoringModel,
    delta: &DeltaWeights,
    method: TargetMethod,
) -> Result<EstimateReport> {
    check_delta(data, surface, delta, censoring)?;
    check_t0(surface, t0)?;
    if censoring.mode == CensoringMode::Targeted {
        return joint_target(data, surface, t0, censoring, delta, MAX_OUTER_ITER).map(|(_, r)| r);
    }
    let (w, truncated) = censoring.weights(t0)?;
    if w.iter().all(|&w| w == 0.0) {
        return Err(Error::EmptyStratum(t0));
    }
    let state = target(surface, &delta.pi, &w, t0, method);
    let dstar_g: Vec<f64> = state.dstar.iter().zip(&w).map(|(d, w)| w * d).collect();
    let n = data.len() as f64;
    let ht = (0..data.len()).map(|i| w[i] * state.surface.survival(i, t0)).sum::<f64>() / n;
    let mut diag = Diagnostics {
        iterations: Some(state.iterations),
        epsilon_path: state.epsilon_path,
        converged: Some(state.converged),
        eif_mean: Some(state.score_mean),
        eif_threshold: Some(state.score_threshold),
        horvitz_thompson: Some(ht),
        truncated_weights: Some(truncated),
        warnings: state.warnings,
        ..Diagnostics::default()
    };
    let (tag, ic) = match censoring.mode {
        CensoringMode::Known => ("tmle-ipcw-known", dstar_g),
        _ => {
            let proj = estimate_projection_f(data, censoring, &dstar_g, t0)?;
            let ic = d_star_star(&dstar_g, &proj, censoring);
            diag.var_dstar_g = Some(variance(&dstar_g));
            diag.var_dstarstar_g = Some(variance(&ic));
            diag.warnings.extend(proj.flags);
            ("tmle-ipcw-estimated", ic)
        }
    };
    let mut r = EstimateReport::with_se(tag, t0, state.psi, ic_se(&ic));
    r.diagnostics = diag;
    r.influence = ic;
    Ok(r)
}

struct Pass {
    outcome: super::TargetingState,
    weights: Vec<f64>,
    truncated: usize,
    dstar_g: Vec<f64>,
    proj: Projection,
    dstarstar_g: Vec<f64>,
    g_terms: Vec<f64>,
}

impl Pass {
    fn run(
        data: &Dataset,
        surface: &HazardSurface,
        t0: usize,
        cens: &CensoringModel,
        delta: &DeltaWeights,
    ) -> Result<Self> {
        let (weights, truncated) = cens.weights(t0)?;
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::EmptyStratum(t0));
        }
        let outcome = target(surface, &delta.pi, &weights, t0, TargetMethod::Pooled);
        let dstar_g: Vec<f64> = outcome.dstar.iter().zip(&weights).map(|(d, w)| w * d).collect();
        let proj = estimate_projection_f(data, cens, &dstar_g, t0)?;
        let g_terms = g_score_terms(cens, &proj);
        let dstarstar_g = dstar_g.iter().zip(&g_terms).map(|(d, g)| d - g).collect();
        Ok(Self { outcome, weights, truncated, dstar_g, proj, dstarstar_g, g_terms })
    }

    /// `(|mean| / threshold)` for `D**_G` and for the G score.
    fn ratios(&self) -> (f64, f64) {
        let r = |v: &[f64]| {
            let m = mean_sd(v).0.abs();
            let thr = score_threshold(v);
            if m == 0.0 { 0.0 } else { m / thr }
        };
        (r(&self.dstarstar_g), r(&self.g_terms))
    }
}

/// Alternate outcome targeting and censoring targeting until both score
/// equations are solved, then finish with one more outcome targeting step.
pub fn joint_target(
    data: &Dataset,
    surface: &HazardSurface,
    t0: usize,
    censoring: &CensoringModel,
    delta: &DeltaWeights,
    max_outer: usize,
) -> Result<(GTargetingState, EstimateReport)> {
    check_delta(data, surface, delta, censoring)?;
    check_t0(surface, t0)?;
    if censoring.mode == CensoringMode::Known {
        return Err(Error::InvalidInput("joint targeting needs an estimated censoring model".into()));
    }
    let mut cens = censoring.clone();
    let mut surf = surface.clone();
    let mut g_path = Vec::new();
    let mut warnings = Vec::new();
    let mut best: Option<(f64, CensoringModel, HazardSurface)> = None;
    let mut outer = 0;
    let mut loop_converged = false;
    while outer < max_outer {
        outer += 1;
        let pass = Pass::run(data, &surf, t0, &cens, delta)?;
        surf = pass.outcome.surface.clone();
        let (a, b) = pass.ratios();
        let worst = a.max(b);
        if best.as_ref().is_none_or(|(w, _, _)| worst < *w) {
            best = Some((worst, cens.clone(), surf.clone()));
        }
        if worst <= 1.0 {
            loop_converged = true;
            break;
        }
        let (next, eps) = target_g(&cens, &pass.proj);
        g_path.push(eps);
        cens = next;
    }
    if !loop_converged {
        warnings.push(format!("joint targeting hit the cap of {max_outer} outer iterations"));
        if let Some((_, c, s)) = best {
            cens = c;
            surf = s;
        }
    }
    // final outcome targeting step under the final censoring fit
    let fin = Pass::run(data, &surf, t0, &cens, delta)?;
    let (a, b) = fin.ratios();
    let n = data.len() as f64;
    let ht = (0..data.len()).map(|i| fin.weights[i] * fin.outcome.surface.survival(i, t0)).sum::<f64>() / n;
    let mut r = EstimateReport::with_se("tmle-ipcw-targeted", t0, fin.outcome.psi, ic_se(&fin.dstarstar_g));
    warnings.extend(fin.outcome.warnings.iter().cloned());
    warnings.extend(fin.proj.flags.iter().cloned());
    r.diagnostics = Diagnostics {
        iterations: Some(outer),
        epsilon_path: fin.outcome.epsilon_path.clone(),
        converged: Some(a <= 1.0 && b <= 1.0),
        eif_mean: Some(mean_sd(&fin.dstarstar_g).0),
        eif_threshold: Some(score_threshold(&fin.dstarstar_g)),
        g_score_mean: Some(mean_sd(&fin.g_terms).0),
        g_score_threshold: Some(score_threshold(&fin.g_terms)),
        g_epsilon_path: g_path.clone(),
        var_dstar_g: Some(variance(&fin.dstar_g)),
        var_dstarstar_g: Some(variance(&fin.dstarstar_g)),
        horvitz_thompson: Some(ht),
        truncated_weights: Some(fin.truncated),
        warnings,
        ..Diagnostics::default()
    };
    r.influence = fin.dstarstar_g.clone();
    let state = GTargetingState {
        censoring: cens,
        projection: fin.proj,
        dstar_g: fin.dstar_g,
        dstarstar_g: fin.dstarstar_g,
        g_epsilon_path: g_path,
        outer_iterations: outer,
        outcome_converged: a <= 1.0,
        g_converged: b <= 1.0,
    };
    Ok((state, r))
}
