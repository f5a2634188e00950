//! Regression stack for the nuisance fits.

mod lasso;
mod linear;
mod logistic;
mod super_learner;

pub use lasso::{fit_lasso_logistic, fit_lasso_path_point, lambda_max, LassoOptions};
pub use linear::fit_linear;
pub use logistic::{fit_logistic, fit_logistic_with, score_norm, IrlsOptions};
pub use super_learner::{discrete_super_learner, fold_assignment, CvSummary};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clipping bound for every predicted probability.
pub const P_MIN: f64 = 1e-5;

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn clip_prob(p: f64) -> f64 {
    p.clamp(P_MIN, 1.0 - P_MIN)
}

/// Named-column design for a binary regression.
///
/// The intercept is implicit: learners always fit one.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    names: Vec<String>,
    rows: usize,
    x: Vec<f64>,
    pub y: Vec<f64>,
    pub weights: Vec<f64>,
    pub offset: Vec<f64>,
    /// Cluster labels kept together when folds are assigned.
    pub groups: Vec<usize>,
}

impl DesignMatrix {
    /// `x` is row-major with `names.len()` columns.
    pub fn new(names: Vec<String>, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let p = names.len();
        let rows = y.len();
        if x.len() != rows * p {
            return Err(Error::InvalidInput(format!(
                "design has {} values, expected {rows} x {p}",
                x.len()
            )));
        }
        Ok(Self {
            names,
            rows,
            x,
            weights: vec![1.0; rows],
            offset: vec![0.0; rows],
            groups: (0..rows).collect(),
            y,
        })
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.rows || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidInput("weights must be nonnegative with one per row".into()));
        }
        self.weights = weights;
        Ok(self)
    }

    pub fn with_offset(mut self, offset: Vec<f64>) -> Result<Self> {
        if offset.len() != self.rows {
            return Err(Error::InvalidInput("offset length differs from rows".into()));
        }
        self.offset = offset;
        Ok(self)
    }

    pub fn with_groups(mut self, groups: Vec<usize>) -> Result<Self> {
        if groups.len() != self.rows {
            return Err(Error::InvalidInput("group length differs from rows".into()));
        }
        self.groups = groups;
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.cols();
        &self.x[i * p..(i + 1) * p]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.x[i * self.cols() + j]
    }

    /// Column indices for `names`; an empty list selects every column.
    pub fn column_indices(&self, names: &[String]) -> Result<Vec<usize>> {
        if names.is_empty() {
            return Ok((0..self.cols()).collect());
        }
        names
            .iter()
            .map(|n| {
                self.names
                    .iter()
                    .position(|m| m == n)
                    .ok_or_else(|| Error::InvalidInput(format!("unknown feature `{n}`")))
            })
            .collect()
    }

    /// Keep only the listed columns (in the given order).
    pub fn select(&self, names: &[String]) -> Result<Self> {
        let idx = self.column_indices(names)?;
        let mut x = Vec::with_capacity(self.rows * idx.len());
        for i in 0..self.rows {
            let r = self.row(i);
            x.extend(idx.iter().map(|&j| r[j]));
        }
        Ok(Self {
            names: idx.iter().map(|&j| self.names[j].clone()).collect(),
            rows: self.rows,
            x,
            y: self.y.clone(),
            weights: self.weights.clone(),
            offset: self.offset.clone(),
            groups: self.groups.clone(),
        })
    }

    /// Subset of rows.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let p = self.cols();
        let mut x = Vec::with_capacity(rows.len() * p);
        for &i in rows {
            x.extend_from_slice(self.row(i));
        }
        Self {
            names: self.names.clone(),
            rows: rows.len(),
            x,
            y: rows.iter().map(|&i| self.y[i]).collect(),
            weights: rows.iter().map(|&i| self.weights[i]).collect(),
            offset: rows.iter().map(|&i| self.offset[i]).collect(),
            groups: rows.iter().map(|&i| self.groups[i]).collect(),
        }
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    InterceptOnly,
    Logistic,
    Lasso,
}

/// A library member: learner tag plus the feature subset it sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub name: String,
    pub kind: LearnerKind,
    /// Empty means every column of the design.
    #[serde(default)]
    pub features: Vec<String>,
}

impl LearnerSpec {
    pub fn new(name: &str, kind: LearnerKind, features: &[&str]) -> Self {
        Self { name: name.into(), kind, features: features.iter().map(|s| s.to_string()).collect() }
    }

    pub fn intercept_only() -> Self {
        Self::new("intercept", LearnerKind::InterceptOnly, &[])
    }

    pub fn fit(&self, design: &DesignMatrix, seed: u64) -> Result<FittedModel> {
        let mut model = match self.kind {
            LearnerKind::InterceptOnly => fit_logistic(&design.select_none())?,
            LearnerKind::Logistic => fit_logistic(&design.select(&self.features)?)?,
            LearnerKind::Lasso => {
                let opts = LassoOptions { seed, ..LassoOptions::default() };
                fit_lasso_logistic(&design.select(&self.features)?, &opts)?
            }
        };
        model.learner = self.name.clone();
        Ok(model)
    }
}

impl DesignMatrix {
    fn select_none(&self) -> Self {
        Self {
            names: Vec::new(),
            rows: self.rows,
            x: Vec::new(),
            y: self.y.clone(),
            weights: self.weights.clone(),
            offset: self.offset.clone(),
            groups: self.groups.clone(),
        }
    }
}

/// Per-fit flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitInfo {
    pub iterations: usize,
    pub converged: bool,
    pub separation: bool,
    pub ridge_fallback: bool,
    pub lambda: Option<f64>,
}

/// A fitted binary regression on named columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub learner: String,
    pub intercept: f64,
    pub columns: Vec<String>,
    pub coefficients: Vec<f64>,
    pub info: FitInfo,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cv: Option<CvSummary>,
}

impl FittedModel {
    /// Linear predictors (without offset) for every row of `x`.
    pub fn linear_predictor(&self, x: &DesignMatrix) -> Result<Vec<f64>> {
        let idx = if self.columns.is_empty() { Vec::new() } else { x.column_indices(&self.columns)? };
        Ok((0..x.rows())
            .map(|i| {
                let r = x.row(i);
                self.intercept + idx.iter().zip(&self.coefficients).map(|(&j, b)| r[j] * b).sum::<f64>()
            })
            .collect())
    }

    /// Clipped probabilities, offset included.
    pub fn predict(&self, x: &DesignMatrix) -> Result<Vec<f64>> {
        let eta = self.linear_predictor(x)?;
        Ok(eta.iter().zip(&x.offset).map(|(e, o)| clip_prob(expit(e + o))).collect())
    }
}

/// Weighted mean negative Bernoulli log-likelihood of clipped predictions.
pub fn mean_neg_loglik(y: &[f64], p: &[f64], w: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&y, &p), &w) in y.iter().zip(p).zip(w) {
        let p = clip_prob(p);
        num -= w * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        den += w;
    }
    if den > 0.0 { num / den } else { f64::NAN }
}
