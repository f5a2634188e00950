//! Reference estimators: naive and weighted Kaplan-Meier, inverse
//! probability weighting, and (in `tmle`) the untargeted plug-in.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Outcome};
use crate::error::{Error, Result};
use crate::report::{ic_se, mean_sd, Diagnostics, EstimateReport};
use crate::rng::{derive_seed, stream};
use crate::tmle::{estimate_delta_weights, known_delta_weights, DeltaWeights};

/// Floor applied to `P(delta = 1)` in inverse weighting.
pub const PI_FLOOR: f64 = 1e-3;

/// One subject's contribution to a product-limit estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KmInput {
    /// Event or censoring time on the grid.
    pub time: usize,
    pub event: bool,
    pub weight: f64,
}

/// Product-limit survival and Greenwood variance at `t0`.
///
/// Deaths at `t` precede censorings at `t`. Fails when the weighted risk set
/// empties at or before `t0` while the curve is still positive; once every
/// subject at risk has died the curve stays at zero.
pub fn product_limit(input: &[KmInput], t0: usize) -> Result<(f64, f64)> {
    if input.iter().any(|k| !(k.weight.is_finite() && k.weight >= 0.0)) {
        return Err(Error::InvalidInput("KM weights must be nonnegative".into()));
    }
    let (mut s, mut green) = (1.0, 0.0);
    for t in 1..=t0 {
        if s == 0.0 {
            return Ok((0.0, 0.0));
        }
        let mut at_risk = 0.0;
        let mut deaths = 0.0;
        for k in input {
            if k.time >= t {
                at_risk += k.weight;
                if k.event && k.time == t {
                    deaths += k.weight;
                }
            }
        }
        if at_risk <= 0.0 {
            return Err(Error::Undefined { t0, reason: format!("empty risk set at t={t}") });
        }
        if deaths > 0.0 {
            s *= 1.0 - deaths / at_risk;
            if at_risk > deaths {
                green += deaths / (at_risk * (at_risk - deaths));
            }
        }
    }
    Ok((s, s * s * green))
}

/// KM that treats the last visit as the censoring time and counts only
/// deaths reported to the clinic.
pub fn naive_km_input(data: &Dataset) -> Vec<KmInput> {
    data.subjects
        .iter()
        .map(|s| match s.report_time() {
            Some(r) => KmInput { time: r, event: true, weight: 1.0 },
            None => KmInput { time: s.last_visit, event: false, weight: 1.0 },
        })
        .collect()
}

pub fn naive_km(data: &Dataset, t0s: &[usize]) -> Result<Vec<EstimateReport>> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let input = naive_km_input(data);
    t0s.iter()
        .map(|&t0| {
            let (s, var) = product_limit(&input, t0)?;
            Ok(EstimateReport::with_se("naive-km", t0, s, var.sqrt()))
        })
        .collect()
}

/// Weight 1 for clinic-known outcomes, 0 when the outcome is unknown and
/// `1 / pi` for outcomes found by tracing. Deaths enter at their time,
/// known survivors are censored at `tau`.
pub fn weighted_km_input(data: &Dataset, pi: &[f64]) -> Vec<KmInput> {
    data.subjects
        .iter()
        .zip(pi)
        .map(|(s, &p)| {
            let weight = if !s.delta() {
                0.0
            } else if s.clinic_known() {
                1.0
            } else {
                1.0 / p
            };
            match s.outcome {
                Outcome::Died { time } => KmInput { time, event: true, weight },
                _ => KmInput { time: s.tau, event: false, weight },
            }
        })
        .collect()
}

/// Source of the resampling probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum WeightSource {
    Known { resample_prob: f64 },
    Estimated { include_tau: bool },
}

impl WeightSource {
    pub fn weights(&self, data: &Dataset) -> Result<DeltaWeights> {
        match *self {
            WeightSource::Known { resample_prob } => known_delta_weights(data, resample_prob),
            WeightSource::Estimated { include_tau } => estimate_delta_weights(data, include_tau),
        }
    }

    fn suffix(&self) -> &'static str {
        match self {
            WeightSource::Known { .. } => "known",
            WeightSource::Estimated { .. } => "est",
        }
    }
}

fn wkm_curve(data: &Dataset, source: &WeightSource, t0s: &[usize]) -> Result<Vec<f64>> {
    let w = source.weights(data)?;
    let input = weighted_km_input(data, &w.pi);
    t0s.iter().map(|&t0| product_limit(&input, t0).map(|(s, _)| s)).collect()
}

/// Weighted KM with a nonparametric bootstrap standard error. The
/// estimated-weight variant refits the resampling model in every sample.
pub fn weighted_km(
    data: &Dataset,
    t0s: &[usize],
    source: &WeightSource,
    bootstrap_b: usize,
    seed: u64,
) -> Result<Vec<EstimateReport>> {
    let point = wkm_curve(data, source, t0s)?;
    let n = data.len();
    let draws: Vec<Option<Vec<f64>>> = (0..bootstrap_b)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(derive_seed(seed, b as u64), 0);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            wkm_curve(&data.select(&idx), source, t0s).ok()
        })
        .collect();
    let ok: Vec<&Vec<f64>> = draws.iter().flatten().collect();
    let failures = bootstrap_b - ok.len();
    let tag = format!("wkm-{}", source.suffix());
    Ok(t0s
        .iter()
        .enumerate()
        .map(|(k, &t0)| {
            let values: Vec<f64> = ok.iter().map(|d| d[k]).collect();
            let mut r = if values.len() >= 2 {
                EstimateReport::with_se(tag.clone(), t0, point[k], mean_sd(&values).1)
            } else {
                EstimateReport::point(tag.clone(), t0, point[k])
            };
            r.diagnostics = Diagnostics { bootstrap_failures: Some(failures), ..Diagnostics::default() };
            if failures > 0 {
                r.diagnostics.warnings.push(format!("{failures} bootstrap samples skipped"));
            }
            r
        })
        .collect())
}

/// `(1/n) sum delta / pi * I(T > t0)` with influence-curve inference.
pub fn ipw_survival(data: &Dataset, t0s: &[usize], weights: &DeltaWeights) -> Result<Vec<EstimateReport>> {
    if weights.pi.len() != data.len() || data.is_empty() {
        return Err(Error::InvalidInput("weights and data disagree on n".into()));
    }
    let tag = match weights.mode {
        crate::tmle::WeightMode::Known => "ipw-known",
        crate::tmle::WeightMode::Estimated => "ipw-est",
    };
    let n = data.len() as f64;
    t0s.iter()
        .map(|&t0| {
            let mut truncated = 0;
            let mut terms = Vec::with_capacity(data.len());
            for (s, &p) in data.subjects.iter().zip(&weights.pi) {
                if !s.delta() {
                    terms.push(0.0);
                    continue;
                }
                let alive = s.survived_past(t0).ok_or_else(|| {
                    Error::InvalidInput(format!("subject {} has follow-up shorter than t0={t0}", s.id))
                })?;
                if p < PI_FLOOR {
                    truncated += 1;
                }
                terms.push(if alive { 1.0 / p.max(PI_FLOOR) } else { 0.0 });
            }
            let psi = terms.iter().sum::<f64>() / n;
            let ic: Vec<f64> = terms.iter().map(|t| t - psi).collect();
            let mut r = EstimateReport::with_se(tag, t0, psi, ic_se(&ic));
            r.diagnostics.truncated_weights = Some(truncated);
            r.influence = ic;
            Ok(r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BaselineCovariates, ObservedSubject};

    fn subj(tau: usize, m: usize, death: Option<usize>, report: Option<usize>, resampled: bool) -> ObservedSubject {
        ObservedSubject::with_regular_visits("x", BaselineCovariates::default(), tau, m, 300.0, death, report, resampled)
            .unwrap()
    }

    #[test]
    fn no_loss_no_deaths() {
        let data = Dataset::new(5, (0..7).map(|_| subj(5, 5, None, None, false)).collect());
        let r = &naive_km(&data, &[5]).unwrap()[0];
        assert_eq!(r.estimate, 1.0);
        assert_eq!(r.se, Some(0.0));
    }

    #[test]
    fn four_subject_naive_km() {
        let data = Dataset::new(
            3,
            vec![
                subj(3, 1, Some(2), Some(2), false),
                subj(3, 2, Some(3), Some(3), false),
                subj(3, 3, None, None, false),
                subj(3, 3, None, None, false),
            ],
        );
        let r = &naive_km(&data, &[3]).unwrap()[0];
        assert_eq!(r.estimate, (1.0 - 1.0 / 4.0) * (1.0 - 1.0 / 3.0));
        assert_eq!(r.estimate, 0.5);
    }

    #[test]
    fn five_subject_weighted_km() {
        let data = Dataset::new(
            5,
            vec![
                subj(5, 5, None, None, false),
                subj(5, 1, Some(2), Some(2), false),
                subj(5, 1, Some(3), None, true),
                subj(5, 2, None, None, false),
                subj(5, 5, None, None, false),
            ],
        );
        let pi = known_delta_weights(&data, 0.2).unwrap().pi;
        let input = weighted_km_input(&data, &pi);
        assert_eq!(input.iter().map(|k| k.weight).collect::<Vec<_>>(), vec![1.0, 1.0, 5.0, 0.0, 1.0]);
        // t=2: 8 at risk, 1 death; t=3: 7 at risk, 5 deaths
        let (s, _) = product_limit(&input, 5).unwrap();
        assert!((s - (7.0 / 8.0) * (2.0 / 7.0)).abs() < 1e-15);
        let r = weighted_km(&data, &[5], &WeightSource::Known { resample_prob: 0.2 }, 0, 1).unwrap();
        assert_eq!(r[0].estimate, s);
    }

    #[test]
    fn unit_weights_match_textbook_km() {
        // no loss to follow-up: every death reported, survivors seen at tau
        let mut subjects = Vec::new();
        for d in [2, 2, 3, 5, 5, 5] {
            subjects.push(subj(6, d - 1, Some(d), Some(d), false));
        }
        for _ in 0..4 {
            subjects.push(subj(6, 6, None, None, false));
        }
        let data = Dataset::new(6, subjects);
        let naive = naive_km(&data, &[6]).unwrap();
        let wkm = weighted_km(&data, &[6], &WeightSource::Known { resample_prob: 0.2 }, 0, 0).unwrap();
        let textbook = (8.0 / 10.0) * (7.0 / 8.0) * (4.0 / 7.0);
        assert!((naive[0].estimate - textbook).abs() < 1e-15);
        assert!((wkm[0].estimate - textbook).abs() < 1e-15);
        // Greenwood without censoring is the binomial variance
        let p = 0.4;
        assert!((naive[0].se.unwrap() - (p * (1.0 - p) / 10.0f64).sqrt()).abs() < 1e-10);
    }

    #[test]
    fn empty_risk_set_is_undefined() {
        let input = [KmInput { time: 2, event: false, weight: 1.0 }];
        assert!(matches!(product_limit(&input, 3), Err(Error::Undefined { .. })));
        let zero = [KmInput { time: 5, event: false, weight: 0.0 }];
        assert!(product_limit(&zero, 1).is_err());
        // everyone dead: the curve is zero, not undefined
        let dead = [KmInput { time: 1, event: true, weight: 1.0 }, KmInput { time: 2, event: true, weight: 1.0 }];
        assert_eq!(product_limit(&dead, 4).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn ipw_examples() {
        let mut alive = vec![subj(5, 5, None, None, false); 3];
        alive.extend(vec![subj(5, 2, Some(3), Some(3), false); 2]);
        let data = Dataset::new(5, alive);
        let w = known_delta_weights(&data, 0.2).unwrap();
        assert_eq!(ipw_survival(&data, &[5], &w).unwrap()[0].estimate, 0.6);

        // 10 known alive, 4 reported deaths, 1 traced alive, 1 traced dead,
        // 4 untraced
        let mut s = vec![subj(5, 5, None, None, false); 10];
        s.extend(vec![subj(5, 2, Some(3), Some(3), false); 4]);
        s.push(subj(5, 2, None, None, true));
        s.push(subj(5, 2, Some(4), None, true));
        s.extend(vec![subj(5, 2, None, None, false); 4]);
        let data = Dataset::new(5, s);
        let w = known_delta_weights(&data, 0.2).unwrap();
        let r = &ipw_survival(&data, &[5], &w).unwrap()[0];
        assert_eq!(r.estimate, (10.0 + 5.0) / 20.0);
        assert_eq!(r.influence[14], 5.0 - 0.75);
        assert_eq!(r.influence[10], -0.75);
    }

    #[test]
    fn ipw_truncates_tiny_probabilities() {
        let data = Dataset::new(3, vec![subj(3, 1, None, None, true), subj(3, 3, None, None, false)]);
        let w = DeltaWeights { mode: crate::tmle::WeightMode::Estimated, pi: vec![1e-6, 1.0], model: None };
        let r = &ipw_survival(&data, &[3], &w).unwrap()[0];
        assert_eq!(r.diagnostics.truncated_weights, Some(1));
        assert_eq!(r.estimate, (1000.0 + 1.0) / 2.0);
    }

    #[test]
    fn bootstrap_is_reproducible() {
        let cfg = crate::sim::SimulationConfig { n: 400, seed: 3, ..Default::default() };
        let data = crate::sim::simulate_cohort(&cfg).unwrap().0;
        let src = WeightSource::Estimated { include_tau: false };
        let a = weighted_km(&data, &[5, 8], &src, 50, 7).unwrap();
        let b = weighted_km(&data, &[5, 8], &src, 50, 7).unwrap();
        assert_eq!(a, b);
        assert!(a[0].se.unwrap() > 0.0);
    }
}
