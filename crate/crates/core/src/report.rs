use serde::{Deserialize, Serialize};

/// Normal quantile for a two-sided 95% interval.
pub const Z_95: f64 = 1.96;

/// Result of one estimator at one horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimator: String,
    pub t0: usize,
    pub estimate: f64,
    /// `None` for estimators without supported inference.
    pub se: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    /// Per-subject influence-curve values (empty when not applicable).
    #[serde(default)]
    pub influence: Vec<f64>,
    #[serde(default)]
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epsilon_path: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    /// Empirical mean of the influence curve the targeting solves.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eif_mean: Option<f64>,
    /// `sd / (sqrt(n) ln n)` for that influence curve.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eif_threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g_score_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g_score_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub g_epsilon_path: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub var_dstar_g: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub var_dstarstar_g: Option<f64>,
    /// Unnormalised Horvitz-Thompson mean for IPCW estimators.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horvitz_thompson: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truncated_weights: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap_failures: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl EstimateReport {
    /// Report with a normal-approximation interval from `se`.
    pub fn with_se(estimator: impl Into<String>, t0: usize, estimate: f64, se: f64) -> Self {
        Self {
            estimator: estimator.into(),
            t0,
            estimate,
            se: Some(se),
            ci_lower: Some(estimate - Z_95 * se),
            ci_upper: Some(estimate + Z_95 * se),
            influence: Vec::new(),
            diagnostics: Diagnostics::default(),
        }
    }

    /// Point estimate only.
    pub fn point(estimator: impl Into<String>, t0: usize, estimate: f64) -> Self {
        Self {
            estimator: estimator.into(),
            t0,
            estimate,
            se: None,
            ci_lower: None,
            ci_upper: None,
            influence: Vec::new(),
            diagnostics: Diagnostics::default(),
        }
    }

    pub fn covers(&self, truth: f64) -> Option<bool> {
        Some(self.ci_lower? <= truth && truth <= self.ci_upper?)
    }
}

/// Mean and standard deviation (n - 1 denominator).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// Influence-curve standard error `sd(ic) / sqrt(n)`.
pub fn ic_se(ic: &[f64]) -> f64 {
    let (_, sd) = mean_sd(ic);
    sd / (ic.len() as f64).sqrt()
}

/// Score-solving threshold `sd / (sqrt(n) ln n)`.
pub fn score_threshold(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let (_, sd) = mean_sd(values);
    if n < 2.0 {
        return 0.0;
    }
    sd / (n.sqrt() * n.ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plugin_report_serialises_null_interval() {
        let r = EstimateReport::point("plugin", 5, 0.8);
        let v = serde_json::to_value(&r).unwrap();
        assert!(v["se"].is_null());
        assert!(v["ci_lower"].is_null());
        assert!(v["ci_upper"].is_null());
    }

    #[test]
    fn threshold_uses_natural_log() {
        // sd of (+1, -1) alternating is ~1
        let v: Vec<f64> = (0..3000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let (_, sd) = mean_sd(&v);
        let expect = sd / (3000f64.sqrt() * 3000f64.ln());
        assert!((score_threshold(&v) - expect).abs() < 1e-15);
        assert!((expect / sd - 0.00228).abs() < 5e-5);
    }
}
