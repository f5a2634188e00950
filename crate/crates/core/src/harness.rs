//! Monte Carlo study driver: simulate, run every estimator, score against
//! the oracle truth and write summary tables.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comparators::{ipw_survival, naive_km, weighted_km, WeightSource};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hazard::{fit_initial_hazard, HazardConfig, HazardSurface};
use crate::learners::{LearnerKind, LearnerSpec};
use crate::report::EstimateReport;
use crate::rng::derive_seed;
use crate::sim::{simulate_cohort, truth_oracle, FollowUpMode, SimulationConfig, TruthPoint};
use crate::tmle::{
    estimate_censoring_hazard, estimate_delta_weights, estimate_fixed_tmle, estimate_ipcw_tmle,
    estimate_stratified_tmle, known_censoring, known_delta_weights, plugin_untargeted, CensoringMode,
    CensoringModel, DeltaWeights, FixedOptions, TargetMethod, WeightMode,
};

/// Every estimator tag understood by [`EstimatorChoice::from_tag`].
pub const ESTIMATOR_TAGS: [&str; 15] = [
    "tmle-pooled",
    "tmle-pooled-intercept",
    "tmle-recursive",
    "plugin",
    "ipw-known",
    "ipw-est",
    "wkm-known",
    "wkm-est",
    "naive-km",
    "tmle-stratified",
    "tmle-ipcw-known",
    "tmle-ipcw-est-tau",
    "tmle-ipcw-est-tau-delta",
    "tmle-ipcw-targeted",
    "plugin-ipcw",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    TmlePooled,
    TmleRecursive,
    Plugin,
    Ipw,
    WeightedKm,
    NaiveKm,
    Stratified,
    Ipcw,
    PluginIpcw,
}

/// Which estimator to run and which nuisance models it uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorChoice {
    pub family: Family,
    pub delta: WeightMode,
    pub censoring: CensoringMode,
    /// Use the constant-hazard initial fit instead of the default library.
    pub intercept_only: bool,
}

impl EstimatorChoice {
    pub fn new(family: Family) -> Self {
        Self { family, delta: WeightMode::Known, censoring: CensoringMode::Known, intercept_only: false }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        use Family::*;
        let c = |family| Self::new(family);
        let est = WeightMode::Estimated;
        Ok(match tag {
            "tmle-pooled" => c(TmlePooled),
            "tmle-pooled-intercept" => Self { intercept_only: true, ..c(TmlePooled) },
            "tmle-recursive" => c(TmleRecursive),
            "plugin" => c(Plugin),
            "ipw-known" => c(Ipw),
            "ipw-est" => Self { delta: est, ..c(Ipw) },
            "wkm-known" => c(WeightedKm),
            "wkm-est" => Self { delta: est, ..c(WeightedKm) },
            "naive-km" => c(NaiveKm),
            "tmle-stratified" => c(Stratified),
            "tmle-ipcw-known" => c(Ipcw),
            "tmle-ipcw-est-tau" => Self { censoring: CensoringMode::Estimated, ..c(Ipcw) },
            "tmle-ipcw-est-tau-delta" => Self { censoring: CensoringMode::Estimated, delta: est, ..c(Ipcw) },
            "tmle-ipcw-targeted" => Self { censoring: CensoringMode::Targeted, delta: est, ..c(Ipcw) },
            "plugin-ipcw" => c(PluginIpcw),
            other => return Err(Error::Config(format!("unknown estimator `{other}`"))),
        })
    }
}

/// Nuisance settings shared by all estimators on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationSettings {
    pub resample_prob: f64,
    /// Follow-up law for known censoring; `None` means `tau = t_max`.
    pub tau_law: Option<Vec<(usize, f64)>>,
    pub bootstrap_b: usize,
    pub hazard: HazardConfig,
    /// Add `tau` to the resampling model (varied follow-up).
    pub delta_includes_tau: bool,
    pub censoring_learner: LearnerSpec,
    pub seed: u64,
}

impl Default for EstimationSettings {
    fn default() -> Self {
        Self {
            resample_prob: 0.2,
            tau_law: None,
            bootstrap_b: 500,
            hazard: HazardConfig::default(),
            delta_includes_tau: false,
            censoring_learner: LearnerSpec::new("logistic", LearnerKind::Logistic, &[]),
            seed: 0,
        }
    }
}

/// Lazily fitted nuisance models for one dataset, shared across estimators
/// and horizons.
pub struct Estimation<'a> {
    pub data: &'a Dataset,
    pub settings: EstimationSettings,
    horizon: usize,
    surface: OnceLock<std::result::Result<HazardSurface, String>>,
    intercept_surface: OnceLock<std::result::Result<HazardSurface, String>>,
    delta_known: OnceLock<std::result::Result<DeltaWeights, String>>,
    delta_est: OnceLock<std::result::Result<DeltaWeights, String>>,
    cens_known: OnceLock<std::result::Result<CensoringModel, String>>,
    cens_est: OnceLock<std::result::Result<CensoringModel, String>>,
}

fn cached<T: Clone>(cell: &OnceLock<std::result::Result<T, String>>, f: impl FnOnce() -> Result<T>) -> Result<&T> {
    cell.get_or_init(|| f().map_err(|e| e.to_string())).as_ref().map_err(|e| Error::Learner(e.clone()))
}

impl<'a> Estimation<'a> {
    /// `horizon` is the largest `t0` any estimator will be asked for.
    pub fn new(data: &'a Dataset, settings: EstimationSettings, horizon: usize) -> Self {
        Self {
            data,
            settings,
            horizon,
            surface: OnceLock::new(),
            intercept_surface: OnceLock::new(),
            delta_known: OnceLock::new(),
            delta_est: OnceLock::new(),
            cens_known: OnceLock::new(),
            cens_est: OnceLock::new(),
        }
    }

    pub fn surface(&self, intercept_only: bool) -> Result<&HazardSurface> {
        let seed = derive_seed(self.settings.seed, 1);
        if intercept_only {
            cached(&self.intercept_surface, || {
                fit_initial_hazard(self.data, self.horizon, &HazardConfig::intercept_only().with_seed(seed))
            })
        } else {
            cached(&self.surface, || {
                fit_initial_hazard(self.data, self.horizon, &self.settings.hazard.clone().with_seed(seed))
            })
        }
    }

    pub fn delta(&self, mode: WeightMode) -> Result<&DeltaWeights> {
        match mode {
            WeightMode::Known => cached(&self.delta_known, || known_delta_weights(self.data, self.settings.resample_prob)),
            WeightMode::Estimated => {
                cached(&self.delta_est, || estimate_delta_weights(self.data, self.settings.delta_includes_tau))
            }
        }
    }

    fn tau_law(&self) -> Vec<(usize, f64)> {
        self.settings.tau_law.clone().unwrap_or_else(|| vec![(self.data.t_max, 1.0)])
    }

    pub fn censoring(&self, mode: CensoringMode) -> Result<CensoringModel> {
        match mode {
            CensoringMode::Known => cached(&self.cens_known, || known_censoring(self.data, &self.tau_law())).cloned(),
            CensoringMode::Estimated | CensoringMode::Targeted => {
                let mut m = cached(&self.cens_est, || {
                    estimate_censoring_hazard(self.data, &self.settings.censoring_learner, derive_seed(self.settings.seed, 3))
                })?
                .clone();
                m.mode = mode;
                Ok(m)
            }
        }
    }

    fn weight_source(&self, mode: WeightMode) -> WeightSource {
        match mode {
            WeightMode::Known => WeightSource::Known { resample_prob: self.settings.resample_prob },
            WeightMode::Estimated => WeightSource::Estimated { include_tau: self.settings.delta_includes_tau },
        }
    }

    /// Run one estimator at every horizon. Errors are reported per horizon.
    pub fn run(&self, choice: &EstimatorChoice, t0s: &[usize]) -> Vec<(usize, Result<EstimateReport>)> {
        let all = |r: Result<Vec<EstimateReport>>| -> Vec<(usize, Result<EstimateReport>)> {
            match r {
                Ok(v) => v.into_iter().map(|r| (r.t0, Ok(r))).collect(),
                Err(e) => {
                    let msg = e.to_string();
                    t0s.iter().map(|&t| (t, Err(Error::Learner(msg.clone())))).collect()
                }
            }
        };
        let each = |f: &dyn Fn(usize) -> Result<EstimateReport>| t0s.iter().map(|&t| (t, f(t))).collect();
        match choice.family {
            Family::TmlePooled | Family::TmleRecursive => {
                let method =
                    if choice.family == Family::TmlePooled { TargetMethod::Pooled } else { TargetMethod::Recursive };
                all((|| {
                    let s = self.surface(choice.intercept_only)?;
                    let d = self.delta(choice.delta)?;
                    estimate_fixed_tmle(self.data, s, t0s, d, FixedOptions { method, ..FixedOptions::default() })
                })())
            }
            Family::Plugin => all(self.surface(choice.intercept_only).and_then(|s| plugin_untargeted(s, t0s))),
            Family::Ipw => all(self.delta(choice.delta).and_then(|d| ipw_survival(self.data, t0s, d))),
            Family::WeightedKm => all(weighted_km(
                self.data,
                t0s,
                &self.weight_source(choice.delta),
                self.settings.bootstrap_b,
                derive_seed(self.settings.seed, 2),
            )),
            Family::NaiveKm => all(naive_km(self.data, t0s)),
            Family::Stratified => each(&|t0| {
                let s = self.surface(choice.intercept_only)?;
                let d = self.delta(choice.delta)?;
                let c = self.censoring(choice.censoring)?;
                estimate_stratified_tmle(self.data, s, t0, &c, d, TargetMethod::Pooled)
            }),
            Family::Ipcw => each(&|t0| {
                let s = self.surface(choice.intercept_only)?;
                let d = self.delta(choice.delta)?;
                let c = self.censoring(choice.censoring)?;
                estimate_ipcw_tmle(self.data, s, t0, &c, d, TargetMethod::Pooled)
            }),
            Family::PluginIpcw => each(&|t0| {
                let s = self.surface(choice.intercept_only)?;
                let c = self.censoring(choice.censoring)?;
                let (w, truncated) = c.weights(t0)?;
                let wsum: f64 = w.iter().sum();
                if wsum <= 0.0 {
                    return Err(Error::EmptyStratum(t0));
                }
                let psi = (0..self.data.len()).map(|i| w[i] * s.survival(i, t0)).sum::<f64>() / wsum;
                let mut r = EstimateReport::point("plugin-ipcw", t0, psi);
                r.diagnostics.truncated_weights = Some(truncated);
                Ok(r)
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// Study specification
// ---------------------------------------------------------------------------

fn default_k() -> f64 {
    3.0
}

/// Checks evaluated on the finished study; `mc` fails when any does.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Assertion {
    /// `|mean - truth| <= k * sqrt(mc_se^2 + oracle_se^2)`.
    Unbiased {
        estimator: String,
        t0: Vec<usize>,
        #[serde(default = "default_k")]
        k: f64,
    },
    /// `mean - truth > k * sqrt(mc_se^2 + oracle_se^2)`.
    BiasedUpward {
        estimator: String,
        t0: Vec<usize>,
        #[serde(default = "default_k")]
        k: f64,
    },
    Coverage { estimator: String, t0: Vec<usize>, lower: f64, upper: f64 },
    /// `var(numerator) / var(denominator) >= min_ratio` at every `t0`.
    VarianceRatio { numerator: String, denominator: String, t0: Vec<usize>, min_ratio: f64 },
    /// Average variance over `t0` at most `max_ratio` times the reference's,
    /// and strictly lower at `min_lower_count` horizons or more.
    AverageVariance { estimator: String, reference: String, t0: Vec<usize>, max_ratio: f64, min_lower_count: usize },
    /// Every converged run solves its score equations (outcome and, when
    /// reported, censoring).
    ScoreSolved { estimator: String, t0: Vec<usize> },
    /// Per replicate `var(D**_G) <= max_ratio * var(D*_G)`.
    ProjectionVariance { estimator: String, t0: Vec<usize>, max_ratio: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySpec {
    pub simulation: SimulationConfig,
    pub replicates: usize,
    pub estimators: Vec<String>,
    pub t0: Vec<usize>,
    pub master_seed: u64,
    pub oracle_n: usize,
    #[serde(default = "default_bootstrap")]
    pub bootstrap_b: usize,
    #[serde(default)]
    pub hazard: HazardConfig,
    #[serde(default)]
    pub assertions: Vec<Assertion>,
}

fn default_bootstrap() -> usize {
    500
}

impl StudySpec {
    pub fn validate(&self) -> Result<()> {
        self.simulation.validate()?;
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.t0.is_empty() || self.t0.iter().any(|&t| t == 0 || t > self.simulation.t_max) {
            return Err(Error::Config("t0 list must be nonempty and within 1..=t_max".into()));
        }
        for e in &self.estimators {
            EstimatorChoice::from_tag(e)?;
        }
        if self.oracle_n == 0 {
            return Err(Error::Config("oracle_n must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    fn settings(&self, seed: u64) -> EstimationSettings {
        let varied = self.simulation.mode == FollowUpMode::VariedTau;
        EstimationSettings {
            resample_prob: self.simulation.resample_prob,
            tau_law: Some(self.simulation.tau_law()),
            bootstrap_b: self.bootstrap_b,
            hazard: self.hazard.clone(),
            delta_includes_tau: varied,
            seed,
            ..EstimationSettings::default()
        }
    }
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

/// One estimator at one horizon in one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateCell {
    pub replicate: usize,
    pub estimator: String,
    pub t0: usize,
    /// `None` when the estimator failed.
    pub report: Option<EstimateReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub estimator: String,
    pub t0: usize,
    pub truth: f64,
    pub oracle_se: f64,
    pub n_ok: usize,
    pub mean: Option<f64>,
    pub bias: Option<f64>,
    /// Across-replicate variance with denominator R, so `mse = bias^2 + variance`.
    pub variance: Option<f64>,
    pub mse: Option<f64>,
    /// `sqrt(variance / R)`.
    pub mc_se: Option<f64>,
    pub coverage: Option<f64>,
    pub mean_se: Option<f64>,
    pub errors: usize,
    pub nonconverged: usize,
    /// Errors plus runs that did not meet their convergence criterion.
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssertionOutcome {
    pub assertion: Assertion,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub spec: StudySpec,
    pub truth: Vec<TruthPoint>,
    pub cells: Vec<CellStats>,
    pub replicates: Vec<ReplicateCell>,
    pub assertions: Vec<AssertionOutcome>,
}

impl StudyResult {
    pub fn cell(&self, estimator: &str, t0: usize) -> Option<&CellStats> {
        self.cells.iter().find(|c| c.estimator == estimator && c.t0 == t0)
    }

    pub fn runs<'s>(&'s self, estimator: &'s str, t0: usize) -> impl Iterator<Item = &'s EstimateReport> + 's {
        self.replicates
            .iter()
            .filter(move |c| c.estimator == estimator && c.t0 == t0)
            .filter_map(|c| c.report.as_ref())
    }

    pub fn all_passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }
}

/// Simulate and estimate replicate `index`.
pub fn run_replicate(spec: &StudySpec, index: usize) -> Vec<ReplicateCell> {
    let seed = derive_seed(spec.master_seed, index as u64);
    let cfg = SimulationConfig { seed, ..spec.simulation.clone() };
    let data = match simulate_cohort(&cfg) {
        Ok((d, _)) => d,
        Err(e) => {
            return spec
                .estimators
                .iter()
                .flat_map(|est| {
                    let msg = e.to_string();
                    spec.t0.iter().map(move |&t0| ReplicateCell {
                        replicate: index,
                        estimator: est.clone(),
                        t0,
                        report: None,
                        error: Some(msg.clone()),
                    })
                })
                .collect();
        }
    };
    let horizon = *spec.t0.iter().max().expect("validated");
    let est = Estimation::new(&data, spec.settings(seed), horizon);
    let mut out = Vec::new();
    for tag in &spec.estimators {
        let choice = EstimatorChoice::from_tag(tag).expect("validated");
        for (t0, r) in est.run(&choice, &spec.t0) {
            let (report, error) = match r {
                Ok(mut r) => {
                    r.estimator = tag.clone();
                    // influence vectors are large and not needed downstream
                    r.influence = Vec::new();
                    (Some(r), None)
                }
                Err(e) => (None, Some(e.to_string())),
            };
            out.push(ReplicateCell { replicate: index, estimator: tag.clone(), t0, report, error });
        }
    }
    out
}

/// Run the study on `jobs` worker threads (0 = rayon default). Output does
/// not depend on `jobs`.
pub fn run_study(spec: &StudySpec, jobs: usize) -> Result<StudyResult> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        let oracle_cfg = SimulationConfig { seed: spec.master_seed, ..spec.simulation.clone() };
        let truth = truth_oracle(&oracle_cfg, &spec.t0, spec.oracle_n)?;
        let replicates: Vec<ReplicateCell> =
            (0..spec.replicates).into_par_iter().map(|r| run_replicate(spec, r)).collect::<Vec<_>>().concat();
        Ok(summarize(spec, truth, replicates))
    })
}

/// Aggregate replicate cells into per-(estimator, t0) statistics and
/// evaluate the assertions.
pub fn summarize(spec: &StudySpec, truth: Vec<TruthPoint>, replicates: Vec<ReplicateCell>) -> StudyResult {
    let mut groups: BTreeMap<(usize, usize), Vec<&ReplicateCell>> = BTreeMap::new();
    for c in &replicates {
        let e = spec.estimators.iter().position(|e| *e == c.estimator).unwrap_or(usize::MAX);
        groups.entry((e, c.t0)).or_default().push(c);
    }
    let mut cells = Vec::new();
    for (ei, est) in spec.estimators.iter().enumerate() {
        for &t0 in &spec.t0 {
            let tp = truth.iter().find(|p| p.t0 == t0).expect("truth for every t0");
            let empty = Vec::new();
            let group = groups.get(&(ei, t0)).unwrap_or(&empty);
            cells.push(cell_stats(est, t0, tp, group));
        }
    }
    let mut result = StudyResult { spec: spec.clone(), truth, cells, replicates, assertions: Vec::new() };
    result.assertions = spec.assertions.iter().map(|a| evaluate(a, &result)).collect();
    result
}

fn cell_stats(estimator: &str, t0: usize, truth: &TruthPoint, group: &[&ReplicateCell]) -> CellStats {
    let reports: Vec<&EstimateReport> = group.iter().filter_map(|c| c.report.as_ref()).collect();
    let errors = group.len() - reports.len();
    let nonconverged = reports.iter().filter(|r| r.diagnostics.converged == Some(false)).count();
    let n = reports.len();
    let mut stats = CellStats {
        estimator: estimator.to_string(),
        t0,
        truth: truth.survival,
        oracle_se: truth.mc_se,
        n_ok: n,
        mean: None,
        bias: None,
        variance: None,
        mse: None,
        mc_se: None,
        coverage: None,
        mean_se: None,
        errors,
        nonconverged,
        failures: errors + nonconverged,
    };
    if n == 0 {
        return stats;
    }
    let nf = n as f64;
    let mean = reports.iter().map(|r| r.estimate).sum::<f64>() / nf;
    let variance = reports.iter().map(|r| (r.estimate - mean).powi(2)).sum::<f64>() / nf;
    let bias = mean - truth.survival;
    stats.mean = Some(mean);
    stats.bias = Some(bias);
    stats.variance = Some(variance);
    stats.mse = Some(reports.iter().map(|r| (r.estimate - truth.survival).powi(2)).sum::<f64>() / nf);
    stats.mc_se = Some((variance / nf).sqrt());
    let with_ci: Vec<bool> = reports.iter().filter_map(|r| r.covers(truth.survival)).collect();
    if !with_ci.is_empty() {
        stats.coverage = Some(with_ci.iter().filter(|&&c| c).count() as f64 / with_ci.len() as f64);
    }
    let ses: Vec<f64> = reports.iter().filter_map(|r| r.se).collect();
    if !ses.is_empty() {
        stats.mean_se = Some(ses.iter().sum::<f64>() / ses.len() as f64);
    }
    stats
}

fn fmt_t0(t: &[usize]) -> String {
    t.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
}

/// Evaluate one assertion against a finished study.
pub fn evaluate(assertion: &Assertion, result: &StudyResult) -> AssertionOutcome {
    let mut passed = true;
    let mut notes = Vec::new();
    let missing = |what: String, notes: &mut Vec<String>| {
        notes.push(format!("{what}: no data"));
        false
    };
    match assertion {
        Assertion::Unbiased { estimator, t0, k } | Assertion::BiasedUpward { estimator, t0, k } => {
            let upward = matches!(assertion, Assertion::BiasedUpward { .. });
            for &t in t0 {
                let Some(c) = result.cell(estimator, t).filter(|c| c.n_ok > 0) else {
                    passed &= missing(format!("{estimator}@{t}"), &mut notes);
                    continue;
                };
                let se = (c.mc_se.unwrap().powi(2) + c.oracle_se.powi(2)).sqrt();
                let bias = c.bias.unwrap();
                let ok = if upward { bias > k * se } else { bias.abs() <= k * se };
                passed &= ok;
                notes.push(format!("t0={t} bias={bias:.5} tol={:.5}{}", k * se, if ok { "" } else { " FAIL" }));
            }
        }
        Assertion::Coverage { estimator, t0, lower, upper } => {
            for &t in t0 {
                match result.cell(estimator, t).and_then(|c| c.coverage) {
                    Some(cov) => {
                        let ok = (*lower..=*upper).contains(&cov);
                        passed &= ok;
                        notes.push(format!("t0={t} coverage={cov:.3}{}", if ok { "" } else { " FAIL" }));
                    }
                    None => passed &= missing(format!("{estimator}@{t}"), &mut notes),
                }
            }
        }
        Assertion::VarianceRatio { numerator, denominator, t0, min_ratio } => {
            for &t in t0 {
                let a = result.cell(numerator, t).and_then(|c| c.variance);
                let b = result.cell(denominator, t).and_then(|c| c.variance);
                match (a, b) {
                    (Some(a), Some(b)) => {
                        let ratio = a / b;
                        let ok = ratio >= *min_ratio;
                        passed &= ok;
                        notes.push(format!("t0={t} ratio={ratio:.3}{}", if ok { "" } else { " FAIL" }));
                    }
                    _ => passed &= missing(format!("{numerator}/{denominator}@{t}"), &mut notes),
                }
            }
        }
        Assertion::AverageVariance { estimator, reference, t0, max_ratio, min_lower_count } => {
            let mut sum_a = 0.0;
            let mut sum_b = 0.0;
            let mut lower = 0;
            for &t in t0 {
                let a = result.cell(estimator, t).and_then(|c| c.variance);
                let b = result.cell(reference, t).and_then(|c| c.variance);
                match (a, b) {
                    (Some(a), Some(b)) => {
                        sum_a += a;
                        sum_b += b;
                        lower += (a < b) as usize;
                        notes.push(format!("t0={t} ratio={:.3}", a / b));
                    }
                    _ => passed &= missing(format!("{estimator}/{reference}@{t}"), &mut notes),
                }
            }
            let ratio = sum_a / sum_b;
            let ok = ratio <= *max_ratio && lower >= *min_lower_count;
            passed &= ok;
            notes.push(format!("average ratio={ratio:.4}, lower at {lower} horizons{}", if ok { "" } else { " FAIL" }));
        }
        Assertion::ScoreSolved { estimator, t0 } => {
            let mut checked = 0;
            let mut bad = 0;
            for &t in t0 {
                for r in result.runs(estimator, t) {
                    let d = &r.diagnostics;
                    if d.converged != Some(true) {
                        continue;
                    }
                    checked += 1;
                    let outcome_ok = match (d.eif_mean, d.eif_threshold) {
                        (Some(m), Some(thr)) => m.abs() <= thr,
                        _ => false,
                    };
                    let g_ok = match (d.g_score_mean, d.g_score_threshold) {
                        (Some(m), Some(thr)) => m.abs() <= thr,
                        (None, None) => true,
                        _ => false,
                    };
                    if !(outcome_ok && g_ok) {
                        bad += 1;
                    }
                }
            }
            passed = checked > 0 && bad == 0;
            notes.push(format!("{checked} converged runs at t0={}, {bad} violations", fmt_t0(t0)));
        }
        Assertion::ProjectionVariance { estimator, t0, max_ratio } => {
            let mut checked = 0;
            let mut bad = 0;
            let mut worst: f64 = 0.0;
            for &t in t0 {
                for r in result.runs(estimator, t) {
                    if let (Some(a), Some(b)) = (r.diagnostics.var_dstarstar_g, r.diagnostics.var_dstar_g) {
                        checked += 1;
                        worst = worst.max(a / b);
                        if a > max_ratio * b {
                            bad += 1;
                        }
                    }
                }
            }
            passed = checked > 0 && bad == 0;
            notes.push(format!("{checked} runs, {bad} violations, worst ratio {worst:.4}"));
        }
    }
    AssertionOutcome { assertion: assertion.clone(), passed, detail: notes.join("; ") }
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

pub const SUMMARY_HEADER: [&str; 9] = ["estimator", "t0", "mean", "bias", "variance", "mse", "coverage", "mean_se", "failures"];

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Write `summary.json`, `summary.csv`, `variance_plot.csv` and
/// `replicates.csv` into `dir`.
pub fn emit_report(result: &StudyResult, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(result)?)?;

    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record(SUMMARY_HEADER)?;
    for c in &result.cells {
        w.write_record([
            c.estimator.clone(),
            c.t0.to_string(),
            opt(c.mean),
            opt(c.bias),
            opt(c.variance),
            opt(c.mse),
            opt(c.coverage),
            opt(c.mean_se),
            c.failures.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("variance_plot.csv"))?;
    w.write_record(["estimator", "t0", "variance"])?;
    for c in &result.cells {
        w.write_record([c.estimator.clone(), c.t0.to_string(), opt(c.variance)])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("replicates.csv"))?;
    w.write_record(["replicate", "estimator", "t0", "estimate", "se", "converged", "error"])?;
    for c in &result.replicates {
        let r = c.report.as_ref();
        w.write_record([
            c.replicate.to_string(),
            c.estimator.clone(),
            c.t0.to_string(),
            opt(r.map(|r| r.estimate)),
            opt(r.and_then(|r| r.se)),
            r.and_then(|r| r.diagnostics.converged).map(|b| b.to_string()).unwrap_or_default(),
            c.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_result(path: impl AsRef<Path>) -> Result<StudyResult> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
