//! Initial pooled death-hazard fit and the survival product integral.

use serde::{Deserialize, Serialize};

use crate::data::{expand_risk_rows, feature_names, Dataset, RowMode, FEATURE_NAMES};
use crate::error::{Error, Result};
use crate::learners::{discrete_super_learner, DesignMatrix, FittedModel, LearnerKind, LearnerSpec};

/// Library and cross-validation settings for the hazard fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardConfig {
    pub library: Vec<LearnerSpec>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_folds() -> usize {
    5
}

impl Default for HazardConfig {
    fn default() -> Self {
        Self { library: default_library(), folds: default_folds(), seed: 0 }
    }
}

impl HazardConfig {
    /// Deliberately misspecified: a single constant hazard.
    pub fn intercept_only() -> Self {
        Self { library: vec![LearnerSpec::intercept_only()], ..Self::default() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Two unpenalised logistic fits plus a lasso over every column.
///
/// Only the lasso sees the time indicators: next to the linear time term
/// they are collinear for an unpenalised fit.
pub fn default_library() -> Vec<LearnerSpec> {
    vec![
        LearnerSpec::new("logistic-full", LearnerKind::Logistic, &FEATURE_NAMES),
        LearnerSpec::new("logistic-tw", LearnerKind::Logistic, &["t", "w1", "w2", "w3"]),
        LearnerSpec::new("lasso-full", LearnerKind::Lasso, &[]),
    ]
}

/// Death hazards per subject and time on `1..=horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct HazardSurface {
    n: usize,
    horizon: usize,
    /// Row-major `n x horizon`; column `t - 1` holds time `t`.
    lambda: Vec<f64>,
    /// Last visit `M` per subject; cells `t <= M` are structurally zero.
    last_visit: Vec<usize>,
    /// Upper end of the observed risk set (`min(T~, tau)`) for `delta = 1`.
    fit_upper: Vec<Option<usize>>,
    /// Observed death time, when known.
    death: Vec<Option<usize>>,
    pub model: Option<FittedModel>,
}

impl HazardSurface {
    /// Surface from explicit values; deterministic cells are forced to zero.
    pub fn from_values(data: &Dataset, horizon: usize, mut lambda: Vec<f64>) -> Result<Self> {
        if lambda.len() != data.len() * horizon {
            return Err(Error::InvalidInput("hazard values do not match n x horizon".into()));
        }
        if lambda.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::InvalidInput("hazards must lie in [0, 1]".into()));
        }
        for (i, s) in data.subjects.iter().enumerate() {
            for t in 1..=s.last_visit.min(horizon) {
                lambda[i * horizon + t - 1] = 0.0;
            }
        }
        Ok(Self {
            n: data.len(),
            horizon,
            lambda,
            last_visit: data.subjects.iter().map(|s| s.last_visit).collect(),
            fit_upper: data.subjects.iter().map(|s| s.fit_upper()).collect(),
            death: data.subjects.iter().map(|s| s.ttilde()).collect(),
            model: None,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn lambda(&self, i: usize, t: usize) -> f64 {
        self.lambda[i * self.horizon + t - 1]
    }

    pub fn set_lambda(&mut self, i: usize, t: usize, value: f64) {
        debug_assert!(!self.deterministic(i, t));
        self.lambda[i * self.horizon + t - 1] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.lambda[i * self.horizon..(i + 1) * self.horizon]
    }

    pub fn last_visit(&self, i: usize) -> usize {
        self.last_visit[i]
    }

    /// Hazard is structurally zero (`t <= M`).
    pub fn deterministic(&self, i: usize, t: usize) -> bool {
        t <= self.last_visit[i]
    }

    /// `(i, t)` is an observed risk-set row of a `delta = 1` subject.
    pub fn at_risk(&self, i: usize, t: usize) -> bool {
        t > self.last_visit[i] && self.fit_upper[i].is_some_and(|u| t <= u)
    }

    /// Death indicator `dN(t)`; meaningful on at-risk cells.
    pub fn dn(&self, i: usize, t: usize) -> f64 {
        (self.death[i] == Some(t)) as u8 as f64
    }

    /// `S(0..=upto)` for subject `i`.
    pub fn survival_row(&self, i: usize, upto: usize) -> Vec<f64> {
        let mut s = Vec::with_capacity(upto + 1);
        s.push(1.0);
        s.extend(product_integral(&self.row(i)[..upto]));
        s
    }

    pub fn survival(&self, i: usize, t0: usize) -> f64 {
        self.row(i)[..t0].iter().map(|l| 1.0 - l).product()
    }

    /// Restriction to a horizon no larger than the current one.
    pub fn truncated(&self, horizon: usize) -> Self {
        assert!(horizon <= self.horizon);
        let mut lambda = Vec::with_capacity(self.n * horizon);
        for i in 0..self.n {
            lambda.extend_from_slice(&self.row(i)[..horizon]);
        }
        Self { horizon, lambda, ..self.clone() }
    }
}

/// `S(t) = prod_{s <= t} (1 - lambda(s))` for `t = 1..=hazards.len()`.
pub fn product_integral(hazards: &[f64]) -> Vec<f64> {
    let mut s = 1.0;
    hazards
        .iter()
        .map(|l| {
            s *= 1.0 - l;
            s
        })
        .collect()
}

/// Design of the pooled regression over the observed risk rows.
pub fn hazard_design(data: &Dataset) -> Result<DesignMatrix> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut groups = Vec::new();
    for (i, s) in data.subjects.iter().enumerate() {
        for row in expand_risk_rows(i, s, RowMode::Fit) {
            row.features.push_columns(data.t_max, &mut x);
            y.push(row.dn as u8 as f64);
            groups.push(i);
        }
    }
    if y.is_empty() {
        return Err(Error::NoAtRiskRows);
    }
    DesignMatrix::new(feature_names(data.t_max), x, y)?.with_groups(groups)
}

/// Fit the pooled hazard on `delta = 1` risk rows and predict every
/// subject on `M+1..=horizon`.
pub fn fit_initial_hazard(data: &Dataset, horizon: usize, config: &HazardConfig) -> Result<HazardSurface> {
    if horizon == 0 || horizon > data.t_max {
        return Err(Error::InvalidInput(format!("horizon {horizon} outside 1..={}", data.t_max)));
    }
    let design = hazard_design(data)?;
    let model = discrete_super_learner(&design, &config.library, config.folds, config.seed)?;

    let mut x = Vec::new();
    let mut cells = Vec::new();
    for (i, s) in data.subjects.iter().enumerate() {
        for row in expand_risk_rows(i, s, RowMode::Predict { horizon }) {
            row.features.push_columns(data.t_max, &mut x);
            cells.push((i, row.t));
        }
    }
    let pred_design = DesignMatrix::new(feature_names(data.t_max), x, vec![0.0; cells.len()])?;
    let p = model.predict(&pred_design)?;
    let mut lambda = vec![0.0; data.len() * horizon];
    for ((i, t), p) in cells.into_iter().zip(p) {
        lambda[i * horizon + t - 1] = p;
    }
    let mut surface = HazardSurface::from_values(data, horizon, lambda)?;
    surface.model = Some(model);
    Ok(surface)
}
