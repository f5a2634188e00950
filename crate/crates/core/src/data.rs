//! Observed-data structure of a two-stage resampling design.
//!
//! Each participant is followed on the discrete grid `t = 1..=t_max` up to
//! an individual end of study `tau`. Clinic visits, a biomarker measured at
//! visits and a death-report indicator make up the longitudinal history.
//! The outcome at `tau` is known (`delta = 1`) when the participant visits
//! at `tau`, has a death reported to the clinic, or is traced by the second
//! stage; otherwise only `T > M` is known, `M` being the last visit.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_T_MAX: usize = 10;

/// Biomarker thresholds used by the summary features.
pub const LOW_BIOMARKER: f64 = 200.0;
pub const VERY_LOW_BIOMARKER: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BaselineCovariates {
    pub w1: bool,
    pub w2: bool,
    pub w3: bool,
}

impl BaselineCovariates {
    pub fn as_f64(&self) -> [f64; 3] {
        [self.w1 as u8 as f64, self.w2 as u8 as f64, self.w3 as u8 as f64]
    }
}

/// One time point of the observed history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalRecord {
    pub t: usize,
    pub visit: bool,
    /// Present iff `visit`.
    pub biomarker: Option<f64>,
    pub death_reported: bool,
}

/// Outcome information available at the end of study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    /// `delta = 0`: only `T > M` is known.
    Unknown,
    /// `delta = 1, dstar = 0`: alive at `tau`.
    Alive,
    /// `delta = 1, dstar = 1`: died at `time <= tau`.
    Died { time: usize },
}

/// A participant's coarsened record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedSubject {
    pub id: String,
    pub w: BaselineCovariates,
    pub tau: usize,
    /// Records for `t = 1..=tau`.
    pub history: Vec<LongitudinalRecord>,
    pub last_visit: usize,
    pub resampled: bool,
    pub outcome: Outcome,
}

impl ObservedSubject {
    pub fn delta(&self) -> bool {
        !matches!(self.outcome, Outcome::Unknown)
    }

    pub fn dstar(&self) -> bool {
        matches!(self.outcome, Outcome::Died { .. })
    }

    pub fn ttilde(&self) -> Option<usize> {
        match self.outcome {
            Outcome::Died { time } => Some(time),
            _ => None,
        }
    }

    /// First time a death report appears in the history.
    pub fn report_time(&self) -> Option<usize> {
        self.history.iter().find(|r| r.death_reported).map(|r| r.t)
    }

    /// Outcome known from clinic data alone (visit at `tau` or a reported death).
    pub fn clinic_known(&self) -> bool {
        self.last_visit == self.tau || self.report_time().is_some()
    }

    /// Eligible for second-stage tracing: outcome not known from clinic data.
    pub fn resample_eligible(&self) -> bool {
        !self.clinic_known()
    }

    /// Last time at which the subject is at risk of an observed event
    /// (`min(T~, tau)`), defined only for `delta = 1`.
    pub fn fit_upper(&self) -> Option<usize> {
        match self.outcome {
            Outcome::Unknown => None,
            Outcome::Alive => Some(self.tau),
            Outcome::Died { time } => Some(time.min(self.tau)),
        }
    }

    /// `true` when survival past `t0` is known for a subject with `delta = 1`.
    /// `None` when not determinable from the record.
    pub fn survived_past(&self, t0: usize) -> Option<bool> {
        match self.outcome {
            Outcome::Unknown => None,
            Outcome::Died { time } => Some(time > t0),
            Outcome::Alive if self.tau >= t0 => Some(true),
            Outcome::Alive => None,
        }
    }

    /// History summary using records with `t <= upto`.
    pub fn summary_through(&self, upto: usize) -> HistorySummary {
        let mut s = HistorySummary {
            w: self.w,
            last_visit: 0,
            visit_count: 0,
            last_biomarker: None,
        };
        for r in self.history.iter().take_while(|r| r.t <= upto) {
            if r.visit {
                s.last_visit = r.t;
                s.visit_count += 1;
                if let Some(v) = r.biomarker {
                    s.last_biomarker = Some(v);
                }
            }
        }
        s
    }

    /// Summary of the full observed history `L(tau)`.
    pub fn summary(&self) -> HistorySummary {
        self.summary_through(self.tau)
    }
}

/// A full dataset on a common time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub t_max: usize,
    pub subjects: Vec<ObservedSubject>,
}

impl Dataset {
    pub fn new(t_max: usize, subjects: Vec<ObservedSubject>) -> Self {
        Self { t_max, subjects }
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Resample subjects by index (used by the bootstrap).
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            t_max: self.t_max,
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
        }
    }
}

/// Raw uncoarsened record, before the end-of-study and tracing rules apply.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSubject {
    pub id: String,
    pub w: BaselineCovariates,
    pub visits: Vec<bool>,
    pub biomarker: Vec<Option<f64>>,
    pub death_reported: Vec<bool>,
    /// True death time, `None` if alive through the recorded horizon.
    pub death_time: Option<usize>,
}

impl ObservedSubject {
    /// Subject who visits at every `t <= last_visit` with a fixed biomarker
    /// value, optionally dying at `death` with a clinic report from
    /// `report` onward. Handy for small hand-built datasets.
    #[allow(clippy::too_many_arguments)]
    pub fn with_regular_visits(
        id: &str,
        w: BaselineCovariates,
        tau: usize,
        last_visit: usize,
        biomarker: f64,
        death: Option<usize>,
        report: Option<usize>,
        resampled: bool,
    ) -> Result<Self> {
        let raw = RawSubject {
            id: id.to_string(),
            w,
            visits: (1..=tau).map(|t| t <= last_visit).collect(),
            biomarker: (1..=tau).map(|t| (t <= last_visit).then_some(biomarker)).collect(),
            death_reported: (1..=tau).map(|t| report.is_some_and(|r| t >= r)).collect(),
            death_time: death,
        };
        derive_coarsening(&raw, tau, resampled, true)
    }
}

/// Apply the coarsening rules to a raw record.
///
/// `ascertained` is the outcome of second-stage tracing for a resampled
/// participant; it is ignored when `resampled` is false.
pub fn derive_coarsening(
    raw: &RawSubject,
    tau: usize,
    resampled: bool,
    ascertained: bool,
) -> Result<ObservedSubject> {
    let invalid = |t: usize, message: &str| Error::Validation {
        id: raw.id.clone(),
        t,
        message: message.to_string(),
    };
    if tau == 0 {
        return Err(invalid(0, "tau must be at least 1"));
    }
    let len = raw.visits.len();
    if len < tau || raw.biomarker.len() < tau || raw.death_reported.len() < tau {
        return Err(invalid(tau, "history shorter than tau"));
    }
    if raw.biomarker.len() != len || raw.death_reported.len() != len {
        return Err(invalid(len, "history vectors differ in length"));
    }
    for t in 1..=len {
        let visit = raw.visits[t - 1];
        if visit != raw.biomarker[t - 1].is_some() {
            return Err(invalid(t, "biomarker must be present exactly at visits"));
        }
        if let Some(v) = raw.biomarker[t - 1] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(t, "biomarker must be a nonnegative number"));
            }
        }
        if visit && raw.death_time.is_some_and(|d| t >= d) {
            return Err(invalid(t, "visit at or after death"));
        }
        if raw.death_reported[t - 1] {
            if raw.death_time.is_none_or(|d| t < d) {
                return Err(invalid(t, "death reported before death"));
            }
        } else if t > 1 && raw.death_reported[t - 2] {
            return Err(invalid(t, "death report is not persistent"));
        }
    }

    let history: Vec<LongitudinalRecord> = (1..=tau)
        .map(|t| LongitudinalRecord {
            t,
            visit: raw.visits[t - 1],
            biomarker: raw.biomarker[t - 1],
            death_reported: raw.death_reported[t - 1],
        })
        .collect();
    let last_visit = history.iter().filter(|r| r.visit).map(|r| r.t).max().unwrap_or(0);
    let reported = history.iter().any(|r| r.death_reported);
    let delta = last_visit == tau || reported || (resampled && ascertained);
    let outcome = if !delta {
        Outcome::Unknown
    } else {
        match raw.death_time {
            Some(d) if d <= tau => Outcome::Died { time: d },
            _ => Outcome::Alive,
        }
    };
    Ok(ObservedSubject {
        id: raw.id.clone(),
        w: raw.w,
        tau,
        history,
        last_visit,
        resampled,
        outcome,
    })
}

/// Subject-level summary of a (possibly truncated) covariate history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistorySummary {
    pub w: BaselineCovariates,
    pub last_visit: usize,
    pub visit_count: usize,
    pub last_biomarker: Option<f64>,
}

impl HistorySummary {
    pub fn features_at(&self, t: usize) -> FeatureVector {
        let (value, never) = match self.last_biomarker {
            Some(v) => (v, false),
            None => (0.0, true),
        };
        FeatureVector {
            t,
            w: self.w,
            last_visit: self.last_visit,
            visit_count: self.visit_count,
            last_biomarker: value,
            never_measured: never,
            biomarker_lt200: !never && value < LOW_BIOMARKER,
            biomarker_lt100: !never && value < VERY_LOW_BIOMARKER,
        }
    }
}

/// Regressors of the pooled hazard regression at one time point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub t: usize,
    pub w: BaselineCovariates,
    pub last_visit: usize,
    pub visit_count: usize,
    pub last_biomarker: f64,
    pub never_measured: bool,
    pub biomarker_lt200: bool,
    pub biomarker_lt100: bool,
}

/// Column names of [`FeatureVector::columns`], before time indicators.
pub const FEATURE_NAMES: [&str; 10] = [
    "t",
    "w1",
    "w2",
    "w3",
    "last_visit",
    "visit_count",
    "last_biomarker",
    "never_measured",
    "lt200",
    "lt100",
];

/// Full column layout: the base features followed by indicators `t2..t{t_max}`.
pub fn feature_names(t_max: usize) -> Vec<String> {
    FEATURE_NAMES
        .iter()
        .map(|s| s.to_string())
        .chain((2..=t_max).map(|t| format!("t{t}")))
        .collect()
}

impl FeatureVector {
    /// Append this vector's values in the [`feature_names`] layout.
    pub fn push_columns(&self, t_max: usize, out: &mut Vec<f64>) {
        let [w1, w2, w3] = self.w.as_f64();
        out.extend_from_slice(&[
            self.t as f64,
            w1,
            w2,
            w3,
            self.last_visit as f64,
            self.visit_count as f64,
            self.last_biomarker,
            self.never_measured as u8 as f64,
            self.biomarker_lt200 as u8 as f64,
            self.biomarker_lt100 as u8 as f64,
        ]);
        out.extend((2..=t_max).map(|t| (self.t == t) as u8 as f64));
    }
}

/// One (subject, time) row of the repeated-measures structure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskRow {
    pub subject: usize,
    pub t: usize,
    pub dn: bool,
    pub features: FeatureVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowMode {
    /// Rows `M+1 ..= min(T~, tau)` of a `delta = 1` subject.
    Fit,
    /// Rows `M+1 ..= horizon` of any subject.
    Predict { horizon: usize },
}

/// Expand a subject into repeated-measures rows.
pub fn expand_risk_rows(subject_index: usize, subject: &ObservedSubject, mode: RowMode) -> Vec<RiskRow> {
    let summary = subject.summary();
    let (upper, death) = match mode {
        RowMode::Fit => match subject.fit_upper() {
            Some(u) => (u, subject.ttilde()),
            None => return Vec::new(),
        },
        RowMode::Predict { horizon } => (horizon, None),
    };
    (subject.last_visit + 1..=upper)
        .map(|t| RiskRow {
            subject: subject_index,
            t,
            dn: death == Some(t),
            features: summary.features_at(t),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Header of the wide CSV layout for a given grid.
pub fn csv_header(t_max: usize) -> Vec<String> {
    let mut h = vec!["id".to_string(), "w1".into(), "w2".into(), "w3".into()];
    h.extend((1..=t_max).map(|t| format!("v{t}")));
    h.extend((1..=t_max).map(|t| format!("l{t}")));
    h.extend((1..=t_max).map(|t| format!("dr{t}")));
    h.extend(["tau", "r", "delta", "dstar", "ttilde"].map(String::from));
    h
}

fn bit(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

pub fn write_dataset_to<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(csv_header(data.t_max))?;
    for s in &data.subjects {
        let mut rec: Vec<String> = vec![s.id.clone(), bit(s.w.w1).into(), bit(s.w.w2).into(), bit(s.w.w3).into()];
        let at = |t: usize| s.history.get(t - 1);
        rec.extend((1..=data.t_max).map(|t| bit(at(t).is_some_and(|r| r.visit)).to_string()));
        rec.extend((1..=data.t_max).map(|t| {
            at(t).and_then(|r| r.biomarker).map(|v| v.to_string()).unwrap_or_default()
        }));
        rec.extend((1..=data.t_max).map(|t| bit(at(t).is_some_and(|r| r.death_reported)).to_string()));
        rec.push(s.tau.to_string());
        rec.push(bit(s.resampled).into());
        rec.push(bit(s.delta()).into());
        rec.push(if s.delta() { bit(s.dstar()).into() } else { String::new() });
        rec.push(s.ttilde().map(|t| t.to_string()).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_dataset_to(data, std::io::BufWriter::new(file))
}

pub fn read_dataset(path: impl AsRef<Path>, t_max: usize) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_dataset_from(std::io::BufReader::new(file), t_max)
}

/// Parse the wide CSV layout. The header must match [`csv_header`] for `t_max`.
pub fn read_dataset_from<R: Read>(reader: R, t_max: usize) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let expected = csv_header(t_max);
    for name in &expected {
        if !header.contains(name) {
            return Err(Error::Parse { row: 0, message: format!("missing column `{name}`") });
        }
    }
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let idx_id = col("id");
    let idx_w = [col("w1"), col("w2"), col("w3")];
    let idx_v: Vec<usize> = (1..=t_max).map(|t| col(&format!("v{t}"))).collect();
    let idx_l: Vec<usize> = (1..=t_max).map(|t| col(&format!("l{t}"))).collect();
    let idx_dr: Vec<usize> = (1..=t_max).map(|t| col(&format!("dr{t}"))).collect();
    let [idx_tau, idx_r, idx_delta, idx_dstar, idx_tt] =
        ["tau", "r", "delta", "dstar", "ttilde"].map(col);

    let mut subjects = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let perr = |message: String| Error::Parse { row, message };
        let field = |j: usize| rec.get(j).map(str::trim).unwrap_or("");
        let flag = |j: usize| -> Result<bool> {
            match field(j) {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(perr(format!("column `{}` must be 0 or 1, got `{other}`", header[j]))),
            }
        };
        let int = |j: usize| -> Result<usize> {
            field(j)
                .parse::<usize>()
                .map_err(|_| perr(format!("column `{}` must be an integer, got `{}`", header[j], field(j))))
        };

        let id = field(idx_id).to_string();
        let w = BaselineCovariates { w1: flag(idx_w[0])?, w2: flag(idx_w[1])?, w3: flag(idx_w[2])? };
        let tau = int(idx_tau)?;
        if tau < 1 || tau > t_max {
            return Err(perr(format!("tau={tau} outside 1..={t_max}")));
        }
        let mut history = Vec::with_capacity(tau);
        let mut reported = false;
        for t in 1..=t_max {
            let visit = flag(idx_v[t - 1])?;
            let dr = flag(idx_dr[t - 1])?;
            let lraw = field(idx_l[t - 1]);
            let biomarker = if lraw.is_empty() {
                None
            } else {
                let v: f64 = lraw.parse().map_err(|_| perr(format!("l{t} is not a number: `{lraw}`")))?;
                if !(v.is_finite() && v >= 0.0) {
                    return Err(perr(format!("l{t} must be nonnegative")));
                }
                Some(v)
            };
            if t > tau {
                if visit || dr || biomarker.is_some() {
                    return Err(perr(format!("data recorded at t={t} after tau={tau}")));
                }
                continue;
            }
            if visit != biomarker.is_some() {
                return Err(perr(format!("l{t} must be present exactly when v{t}=1")));
            }
            if reported && !dr {
                return Err(perr(format!("dr{t}=0 after an earlier death report")));
            }
            reported |= dr;
            history.push(LongitudinalRecord { t, visit, biomarker, death_reported: dr });
        }
        let last_visit = history.iter().filter(|r| r.visit).map(|r| r.t).max().unwrap_or(0);
        let resampled = flag(idx_r)?;
        let delta = flag(idx_delta)?;
        let outcome = if !delta {
            if !field(idx_tt).is_empty() {
                return Err(perr("ttilde given with delta=0".into()));
            }
            if last_visit == tau || reported {
                return Err(perr("delta=0 but the outcome is known from clinic data".into()));
            }
            Outcome::Unknown
        } else if flag(idx_dstar)? {
            let time = int(idx_tt)?;
            if time <= last_visit || time > tau {
                return Err(perr(format!("ttilde={time} must satisfy M={last_visit} < ttilde <= tau={tau}")));
            }
            Outcome::Died { time }
        } else {
            if !field(idx_tt).is_empty() {
                return Err(perr("ttilde given with dstar=0".into()));
            }
            if reported {
                return Err(perr("reported death with dstar=0".into()));
            }
            Outcome::Alive
        };
        subjects.push(ObservedSubject { id, w, tau, history, last_visit, resampled, outcome });
    }
    Ok(Dataset { t_max, subjects })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(visits: &[u8], reports: &[u8], death: Option<usize>) -> RawSubject {
        RawSubject {
            id: "s".into(),
            w: BaselineCovariates { w1: true, w2: false, w3: true },
            visits: visits.iter().map(|&v| v == 1).collect(),
            biomarker: visits.iter().enumerate().map(|(i, &v)| (v == 1).then_some(300.0 + i as f64)).collect(),
            death_reported: reports.iter().map(|&v| v == 1).collect(),
            death_time: death,
        }
    }

    #[test]
    fn visit_at_tau_is_known_alive() {
        let r = raw(&[1, 0, 1, 1, 1, 1, 1, 1, 1, 1], &[0; 10], None);
        let s = derive_coarsening(&r, 10, false, false).unwrap();
        assert!(s.delta());
        assert!(!s.dstar());
        assert_eq!(s.last_visit, 10);
    }

    #[test]
    fn reported_death_is_known() {
        let r = raw(&[1, 1, 0, 0, 0, 0, 0, 0, 0, 0], &[0, 0, 1, 1, 1, 1, 1, 1, 1, 1], Some(3));
        let s = derive_coarsening(&r, 10, false, false).unwrap();
        assert!(s.delta() && s.dstar());
        assert_eq!(s.ttilde(), Some(3));
    }

    #[test]
    fn lost_subject_without_tracing_is_unknown() {
        let r = raw(&[1, 1, 1, 1, 0, 0, 0, 0, 0, 0], &[0; 10], None);
        let s = derive_coarsening(&r, 10, false, false).unwrap();
        assert_eq!(s.last_visit, 4);
        assert_eq!(s.outcome, Outcome::Unknown);
        assert_eq!(s.ttilde(), None);
        let traced = derive_coarsening(&r, 10, true, true).unwrap();
        assert_eq!(traced.outcome, Outcome::Alive);
        let failed = derive_coarsening(&r, 10, true, false).unwrap();
        assert_eq!(failed.outcome, Outcome::Unknown);
        assert!(failed.resampled);
    }

    #[test]
    fn history_is_truncated_at_tau() {
        let r = raw(&[1, 1, 1, 1, 1, 1, 1, 1, 1, 1], &[0; 10], None);
        let s = derive_coarsening(&r, 5, false, false).unwrap();
        assert_eq!(s.history.len(), 5);
        assert!(s.delta());
    }

    #[test]
    fn inconsistent_records_are_rejected() {
        let visit_after_death = raw(&[1, 1, 1, 0], &[0; 4], Some(2));
        let err = derive_coarsening(&visit_after_death, 4, false, false).unwrap_err();
        assert!(matches!(err, Error::Validation { t: 2, .. }), "{err}");

        let early_report = raw(&[1, 0, 0, 0], &[0, 1, 1, 1], Some(3));
        let err = derive_coarsening(&early_report, 4, false, false).unwrap_err();
        assert!(matches!(err, Error::Validation { t: 2, .. }), "{err}");

        let lapsed_report = raw(&[1, 0, 0, 0], &[0, 1, 0, 0], Some(2));
        assert!(derive_coarsening(&lapsed_report, 4, false, false).is_err());
    }

    /// Exhaustive check of the four known-outcome cases on a 3-point grid.
    #[test]
    fn delta_matches_case_definition_exhaustively() {
        let t_max = 3;
        let mut checked = 0;
        for death in [None, Some(1), Some(2), Some(3)] {
            for vbits in 0..8u8 {
                for first_report in [None, Some(1), Some(2), Some(3)] {
                    let visits: Vec<u8> = (0..t_max).map(|k| (vbits >> k) & 1).collect();
                    let reports: Vec<u8> = (1..=t_max)
                        .map(|t| first_report.is_some_and(|f| t >= f) as u8)
                        .collect();
                    let r = raw(&visits, &reports, death);
                    for tau in 1..=t_max {
                        for resampled in [false, true] {
                            let Ok(s) = derive_coarsening(&r, tau, resampled, true) else { continue };
                            checked += 1;
                            let m = (1..=tau).filter(|&t| visits[t - 1] == 1).max().unwrap_or(0);
                            let alive_at_tau = death.is_none_or(|d| d > tau);
                            let case1 = m == tau;
                            let case2 = m < tau && resampled && alive_at_tau;
                            let case3 = m < tau && resampled && !alive_at_tau;
                            let case4 = (1..=tau).any(|t| reports[t - 1] == 1);
                            assert_eq!(s.delta(), case1 || case2 || case3 || case4, "{visits:?} {reports:?} {death:?} tau={tau}");
                            if s.delta() {
                                assert_eq!(s.dstar(), !alive_at_tau);
                            }
                            if let Some(tt) = s.ttilde() {
                                assert!(s.last_visit < tt && tt <= tau);
                            }
                        }
                    }
                }
            }
        }
        assert!(checked > 100);
    }

    fn subject(last_visit: usize, tau: usize, outcome: Outcome) -> ObservedSubject {
        let history = (1..=tau)
            .map(|t| LongitudinalRecord {
                t,
                visit: t <= last_visit,
                biomarker: (t <= last_visit).then_some(150.0),
                death_reported: false,
            })
            .collect();
        ObservedSubject {
            id: "x".into(),
            w: BaselineCovariates::default(),
            tau,
            history,
            last_visit,
            resampled: false,
            outcome,
        }
    }

    #[test]
    fn fit_rows_for_death() {
        let s = subject(4, 10, Outcome::Died { time: 7 });
        let rows = expand_risk_rows(0, &s, RowMode::Fit);
        assert_eq!(rows.iter().map(|r| r.t).collect::<Vec<_>>(), vec![5, 6, 7]);
        assert_eq!(rows.iter().map(|r| r.dn).collect::<Vec<_>>(), vec![false, false, true]);
    }

    #[test]
    fn fit_rows_for_survivor() {
        let s = subject(2, 10, Outcome::Alive);
        let rows = expand_risk_rows(0, &s, RowMode::Fit);
        assert_eq!(rows.len(), 8);
        assert_eq!(rows[0].t, 3);
        assert!(rows.iter().all(|r| !r.dn));
    }

    #[test]
    fn no_prediction_rows_when_visited_through_horizon() {
        let s = subject(10, 10, Outcome::Alive);
        assert!(expand_risk_rows(0, &s, RowMode::Predict { horizon: 10 }).is_empty());
        assert!(expand_risk_rows(0, &s, RowMode::Fit).is_empty());
    }

    #[test]
    fn unknown_outcome_has_no_fit_rows() {
        let s = subject(3, 10, Outcome::Unknown);
        assert!(expand_risk_rows(0, &s, RowMode::Fit).is_empty());
        assert_eq!(expand_risk_rows(0, &s, RowMode::Predict { horizon: 6 }).len(), 3);
    }

    #[test]
    fn features_identical_across_modes() {
        let s = subject(2, 10, Outcome::Died { time: 6 });
        let fit = expand_risk_rows(0, &s, RowMode::Fit);
        let pred = expand_risk_rows(0, &s, RowMode::Predict { horizon: 10 });
        for r in &fit {
            let p = pred.iter().find(|p| p.t == r.t).unwrap();
            assert_eq!(p.features, r.features);
        }
    }

    #[test]
    fn never_measured_flag() {
        let s = subject(0, 5, Outcome::Alive);
        let f = s.summary().features_at(1);
        assert!(f.never_measured);
        assert_eq!(f.last_biomarker, 0.0);
        assert!(!f.biomarker_lt200 && !f.biomarker_lt100);
        let g = subject(3, 5, Outcome::Alive).summary().features_at(4);
        assert!(g.biomarker_lt200 && !g.biomarker_lt100);
        let mut cols = Vec::new();
        g.push_columns(10, &mut cols);
        assert_eq!(cols.len(), feature_names(10).len());
        assert_eq!(cols[10 + 2], 1.0); // t4 indicator
    }

    #[test]
    fn empty_file_with_header() {
        let header = csv_header(10).join(",") + "\n";
        let d = read_dataset_from(header.as_bytes(), 10).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn round_trip_single_subject() {
        let r = raw(&[1, 1, 1, 1, 0, 0, 0, 0, 0, 0], &[0; 10], Some(7));
        let s = derive_coarsening(&r, 10, true, true).unwrap();
        let d = Dataset::new(10, vec![s]);
        let mut buf = Vec::new();
        write_dataset_to(&d, &mut buf).unwrap();
        let back = read_dataset_from(buf.as_slice(), 10).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn tau_beyond_grid_is_rejected() {
        let mut line = vec!["a".to_string(), "0".into(), "0".into(), "0".into()];
        line.extend((0..10).map(|_| "0".to_string()));
        line.extend((0..10).map(|_| String::new()));
        line.extend((0..10).map(|_| "0".to_string()));
        line.extend(["12", "0", "0", "", ""].map(String::from));
        let text = format!("{}\n{}\n", csv_header(10).join(","), line.join(","));
        let err = read_dataset_from(text.as_bytes(), 10).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 1, .. }), "{err}");
    }

    #[test]
    fn missing_column_and_bad_indicator() {
        let mut h = csv_header(10);
        h.retain(|c| c != "dstar");
        let err = read_dataset_from(format!("{}\n", h.join(",")).as_bytes(), 10).unwrap_err();
        assert!(err.to_string().contains("dstar"));

        let mut line = vec!["a".to_string(), "2".into(), "0".into(), "0".into()];
        line.extend((0..10).map(|_| "0".to_string()));
        line.extend((0..10).map(|_| String::new()));
        line.extend((0..10).map(|_| "0".to_string()));
        line.extend(["10", "0", "0", "", ""].map(String::from));
        let text = format!("{}\n{}\n", csv_header(10).join(","), line.join(","));
        let err = read_dataset_from(text.as_bytes(), 10).unwrap_err();
        assert!(err.to_string().contains("w1"), "{err}");
    }
}
