use serde::{Deserialize, Serialize};

use super::{check_t0, target, DeltaWeights, TargetMethod, MAX_POOLED_ITER};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hazard::HazardSurface;
use crate::report::{ic_se, Diagnostics, EstimateReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedOptions {
    pub method: TargetMethod,
    pub max_iter: usize,
}

impl Default for FixedOptions {
    fn default() -> Self {
        Self { method: TargetMethod::Pooled, max_iter: MAX_POOLED_ITER }
    }
}

fn tag(method: TargetMethod) -> &'static str {
    match method {
        TargetMethod::Pooled => "tmle-pooled",
        TargetMethod::Recursive => "tmle-recursive",
    }
}

/// TMLE of `S(t0)` for each requested horizon, targeted independently.
pub fn estimate_fixed_tmle(
    data: &Dataset,
    surface: &HazardSurface,
    t0s: &[usize],
    delta: &DeltaWeights,
    opts: FixedOptions,
) -> Result<Vec<EstimateReport>> {
    if delta.pi.len() != data.len() || surface.len() != data.len() {
        return Err(Error::InvalidInput("weights, surface and data disagree on n".into()));
    }
    let ones = vec![1.0; data.len()];
    let mut reports = Vec::with_capacity(t0s.len());
    for &t0 in t0s {
        check_t0(surface, t0)?;
        let state = match opts.method {
            TargetMethod::Pooled => super::target_pooled(surface, &delta.pi, &ones, t0, opts.max_iter),
            TargetMethod::Recursive => target(surface, &delta.pi, &ones, t0, opts.method),
        };
        let mut r = EstimateReport::with_se(tag(opts.method), t0, state.psi, ic_se(&state.dstar));
        let mut warnings = state.warnings;
        let short = data.subjects.iter().filter(|s| s.tau < t0).count();
        if short > 0 {
            warnings.push(format!("{short} subjects have follow-up shorter than t0"));
        }
        r.diagnostics = Diagnostics {
            iterations: Some(state.iterations),
            epsilon_path: state.epsilon_path,
            converged: Some(state.converged),
            eif_mean: Some(state.score_mean),
            eif_threshold: Some(state.score_threshold),
            warnings,
            ..Diagnostics::default()
        };
        r.influence = state.dstar;
        reports.push(r);
    }
    flag_non_monotone(&mut reports);
    Ok(reports)
}

/// Record (but do not enforce) a curve that increases between horizons.
pub(crate) fn flag_non_monotone(reports: &mut [EstimateReport]) {
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by_key(|&k| reports[k].t0);
    for w in order.windows(2) {
        let (a, b) = (w[0], w[1]);
        if reports[b].t0 > reports[a].t0 && reports[b].estimate > reports[a].estimate {
            let msg = format!("estimate increases from t0={} to t0={}", reports[a].t0, reports[b].t0);
            reports[b].diagnostics.warnings.push(msg);
        }
    }
}

/// Mean of the untargeted survival predictions; no inference.
pub fn plugin_untargeted(surface: &HazardSurface, t0s: &[usize]) -> Result<Vec<EstimateReport>> {
    t0s.iter()
        .map(|&t0| {
            check_t0(surface, t0)?;
            let n = surface.len();
            let psi = (0..n).map(|i| surface.survival(i, t0)).sum::<f64>() / n as f64;
            Ok(EstimateReport::point("plugin", t0, psi))
        })
        .collect()
}
