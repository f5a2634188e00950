//! Synthetic cohorts with clinic visits, an autoregressive CD4-like
//! biomarker, discrete-time death, partial death reporting, a random end of
//! study and second-stage tracing of participants with unknown outcome.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{derive_coarsening, BaselineCovariates, Dataset, ObservedSubject, RawSubject, DEFAULT_T_MAX};
use crate::error::{Error, Result};
use crate::learners::expit;
use crate::rng::{derive_seed, stream};

const ORACLE_STREAM: u64 = 0x005A_CE0F_7127;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FollowUpMode {
    /// `tau = t_max` for everyone.
    FixedTau,
    /// `tau` drawn from `tau_values` / `tau_probs`.
    VariedTau,
}

/// Logit-scale coefficients of the visit process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisitCoefficients {
    pub intercept: f64,
    pub w: [f64; 3],
    /// On `(V_{t-1}, V_{t-2}, V_{t-3})`.
    pub lags: [f64; 3],
    pub below_200: f64,
    pub below_100: f64,
}

impl Default for VisitCoefficients {
    fn default() -> Self {
        Self { intercept: 0.0, w: [1.0, 1.0, -1.0], lags: [0.4, 0.3, 0.2], below_200: -0.05, below_100: -0.05 }
    }
}

/// Autoregressive biomarker `L_t = ar L_{t-1} + (1 - ar) mu_t + N(0, sd^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiomarkerCoefficients {
    pub ar: f64,
    pub mean_weight: f64,
    pub base: f64,
    pub w: [f64; 3],
    /// On `(V_t, V_{t-1}, V_{t-2})`.
    pub visits: [f64; 3],
    pub below_200: f64,
    pub below_100: f64,
    pub noise_sd: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Default for BiomarkerCoefficients {
    fn default() -> Self {
        Self {
            ar: 0.8,
            mean_weight: 0.2,
            base: 200.0,
            w: [-100.0, 100.0, -100.0],
            visits: [10.0, 15.0, 10.0],
            below_200: -5.0,
            below_100: -10.0,
            noise_sd: 15.0,
            lower: 20.0,
            upper: 1500.0,
        }
    }
}

/// Logit-scale coefficients of the death process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeathCoefficients {
    pub intercept: f64,
    /// Multiplies `t - 1`.
    pub time: f64,
    pub w: [f64; 3],
    /// On `(V_{t-1}, V_{t-2}, V_{t-3})`.
    pub lags: [f64; 3],
    pub below_200: f64,
    pub below_100: f64,
}

impl Default for DeathCoefficients {
    fn default() -> Self {
        Self { intercept: -4.5, time: 0.065, w: [1.0, -1.0, 1.0], lags: [-0.3, -0.2, -0.2], below_200: 0.1, below_100: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub n: usize,
    pub t_max: usize,
    pub mode: FollowUpMode,
    pub tau_values: Vec<usize>,
    pub tau_probs: Vec<f64>,
    pub covariate_prob: f64,
    pub resample_prob: f64,
    pub report_prob: f64,
    pub seed: u64,
    pub visit: VisitCoefficients,
    pub biomarker: BiomarkerCoefficients,
    pub death: DeathCoefficients,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n: 3000,
            t_max: DEFAULT_T_MAX,
            mode: FollowUpMode::FixedTau,
            tau_values: vec![5, 7, 9, 10],
            tau_probs: vec![0.10, 0.15, 0.15, 0.60],
            covariate_prob: 0.5,
            resample_prob: 0.2,
            report_prob: 0.2,
            seed: 1,
            visit: VisitCoefficients::default(),
            biomarker: BiomarkerCoefficients::default(),
            death: DeathCoefficients::default(),
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if self.t_max == 0 {
            return bad("t_max must be at least 1".into());
        }
        for (name, p) in [
            ("covariate_prob", self.covariate_prob),
            ("resample_prob", self.resample_prob),
            ("report_prob", self.report_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name}={p} is not a probability"));
            }
        }
        if self.tau_values.len() != self.tau_probs.len() || self.tau_values.is_empty() {
            return bad("tau_values and tau_probs must be nonempty and of equal length".into());
        }
        if let Some(t) = self.tau_values.iter().find(|&&t| t == 0 || t > self.t_max) {
            return bad(format!("tau value {t} outside 1..={}", self.t_max));
        }
        if self.tau_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("tau probabilities must lie in [0, 1]".into());
        }
        let total: f64 = self.tau_probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("tau probabilities sum to {total}, not 1"));
        }
        if self.biomarker.noise_sd < 0.0 || self.biomarker.lower > self.biomarker.upper {
            return bad("invalid biomarker noise or bounds".into());
        }
        Ok(())
    }

    /// `P(tau >= t)` under the configured follow-up law.
    pub fn prob_tau_at_least(&self, t: usize) -> f64 {
        match self.mode {
            FollowUpMode::FixedTau => (t <= self.t_max) as u8 as f64,
            FollowUpMode::VariedTau => self
                .tau_values
                .iter()
                .zip(&self.tau_probs)
                .filter(|(&v, _)| v >= t)
                .map(|(_, p)| p)
                .sum(),
        }
    }

    /// The follow-up law as `(tau, probability)` pairs.
    pub fn tau_law(&self) -> Vec<(usize, f64)> {
        match self.mode {
            FollowUpMode::FixedTau => vec![(self.t_max, 1.0)],
            FollowUpMode::VariedTau => self.tau_values.iter().copied().zip(self.tau_probs.iter().copied()).collect(),
        }
    }
}

/// Observed record plus the latent, uncensored trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullRecord {
    pub observed: ObservedSubject,
    /// Underlying biomarker for `t = 1..=t_max` (carried after death).
    pub latent_biomarker: Vec<f64>,
    /// `D(t)`, absorbing.
    pub dead: Vec<bool>,
    /// Visits before any end-of-study censoring.
    pub visits: Vec<bool>,
    /// Death reports before any end-of-study censoring.
    pub reports: Vec<bool>,
    pub death_time: Option<usize>,
}

struct Trajectory {
    w: BaselineCovariates,
    visits: Vec<bool>,
    latent: Vec<f64>,
    dead: Vec<bool>,
    reports: Vec<bool>,
    death_time: Option<usize>,
}

fn indicator(b: bool) -> f64 {
    b as u8 as f64
}

fn draw_trajectory<R: Rng>(cfg: &SimulationConfig, rng: &mut R) -> Trajectory {
    let t_max = cfg.t_max;
    let w = BaselineCovariates {
        w1: rng.random::<f64>() < cfg.covariate_prob,
        w2: rng.random::<f64>() < cfg.covariate_prob,
        w3: rng.random::<f64>() < cfg.covariate_prob,
    };
    let wv = w.as_f64();
    let b = &cfg.biomarker;
    let noise = Normal::new(0.0, b.noise_sd).expect("validated noise sd");
    let baseline = b.base + b.w[0] * wv[0] + b.w[1] * wv[1] + b.w[2] * wv[2];
    let mut prev_l = baseline.clamp(b.lower, b.upper);

    let mut visits = vec![false; t_max];
    let mut latent = vec![0.0; t_max];
    let mut dead = vec![false; t_max];
    let mut reports = vec![false; t_max];
    let mut death_time = None;
    let lag = |v: &[bool], t: usize, k: usize| -> f64 {
        // V at time t - k, zero before the study starts
        if t > k { indicator(v[t - k - 1]) } else { 0.0 }
    };

    for t in 1..=t_max {
        // draws are made every period so the stream layout is fixed
        let u_visit: f64 = rng.random();
        let eps = noise.sample(rng);
        let u_death: f64 = rng.random();
        let u_report: f64 = rng.random();

        let low200 = indicator(prev_l < 200.0);
        let low100 = indicator(prev_l < 100.0);

        if death_time.is_some() {
            dead[t - 1] = true;
            reports[t - 1] = reports[t - 2];
            latent[t - 1] = prev_l;
            continue;
        }

        let v = &cfg.visit;
        let visit_lp = v.intercept
            + v.w[0] * wv[0]
            + v.w[1] * wv[1]
            + v.w[2] * wv[2]
            + v.lags[0] * lag(&visits, t, 1)
            + v.lags[1] * lag(&visits, t, 2)
            + v.lags[2] * lag(&visits, t, 3)
            + v.below_200 * low200
            + v.below_100 * low100;
        let visit = u_visit < expit(visit_lp);

        let visit_now = indicator(visit);
        let mu = baseline
            + b.visits[0] * visit_now
            + b.visits[1] * lag(&visits, t, 1)
            + b.visits[2] * lag(&visits, t, 2)
            + b.below_200 * low200
            + b.below_100 * low100;
        let l = (b.ar * prev_l + b.mean_weight * mu + eps).clamp(b.lower, b.upper);

        let d = &cfg.death;
        let death_lp = d.intercept
            + d.time * (t as f64 - 1.0)
            + d.w[0] * wv[0]
            + d.w[1] * wv[1]
            + d.w[2] * wv[2]
            + d.lags[0] * lag(&visits, t, 1)
            + d.lags[1] * lag(&visits, t, 2)
            + d.lags[2] * lag(&visits, t, 3)
            + d.below_200 * low200
            + d.below_100 * low100;
        let dies = u_death < expit(death_lp);

        latent[t - 1] = l;
        prev_l = l;
        if dies {
            dead[t - 1] = true;
            death_time = Some(t);
            reports[t - 1] = u_report < cfg.report_prob;
        } else {
            visits[t - 1] = visit;
        }
    }
    Trajectory { w, visits, latent, dead, reports, death_time }
}

fn simulate_subject(cfg: &SimulationConfig, index: usize) -> Result<FullRecord> {
    let mut rng = stream(cfg.seed, index as u64);
    let tr = draw_trajectory(cfg, &mut rng);
    let u_tau: f64 = rng.random();
    let u_resample: f64 = rng.random();

    let tau = match cfg.mode {
        FollowUpMode::FixedTau => cfg.t_max,
        FollowUpMode::VariedTau => {
            let mut acc = 0.0;
            let mut chosen = *cfg.tau_values.last().expect("validated");
            for (&v, &p) in cfg.tau_values.iter().zip(&cfg.tau_probs) {
                acc += p;
                if u_tau < acc {
                    chosen = v;
                    break;
                }
            }
            chosen
        }
    };

    let raw = RawSubject {
        id: (index + 1).to_string(),
        w: tr.w,
        visits: tr.visits.clone(),
        biomarker: tr.visits.iter().zip(&tr.latent).map(|(&v, &l)| v.then_some(l)).collect(),
        death_reported: tr.reports.clone(),
        death_time: tr.death_time,
    };
    let last_visit = (1..=tau).filter(|&t| tr.visits[t - 1]).max().unwrap_or(0);
    let reported = tr.reports[..tau].iter().any(|&r| r);
    let eligible = last_visit < tau && !reported;
    let resampled = eligible && u_resample < cfg.resample_prob;
    let observed = derive_coarsening(&raw, tau, resampled, true)?;
    Ok(FullRecord {
        observed,
        latent_biomarker: tr.latent,
        dead: tr.dead,
        visits: tr.visits,
        reports: tr.reports,
        death_time: tr.death_time,
    })
}

/// Simulate a cohort; subject `i` uses its own stream keyed by `(seed, i)`.
pub fn simulate_cohort(cfg: &SimulationConfig) -> Result<(Dataset, Vec<FullRecord>)> {
    cfg.validate()?;
    let full: Vec<FullRecord> = (0..cfg.n)
        .into_par_iter()
        .map(|i| simulate_subject(cfg, i))
        .collect::<Result<_>>()?;
    let observed = Dataset::new(cfg.t_max, full.iter().map(|r| r.observed.clone()).collect());
    Ok((observed, full))
}

/// Large-sample survival truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthPoint {
    pub t0: usize,
    pub survival: f64,
    pub mc_se: f64,
}

/// Empirical `P(T > t0)` from `oracle_n` uncensored latent trajectories.
pub fn truth_oracle(cfg: &SimulationConfig, horizons: &[usize], oracle_n: usize) -> Result<Vec<TruthPoint>> {
    cfg.validate()?;
    if oracle_n == 0 {
        return Err(Error::Config("oracle_n must be positive".into()));
    }
    if let Some(&t) = horizons.iter().find(|&&t| t == 0 || t > cfg.t_max) {
        return Err(Error::Config(format!("horizon {t} outside 1..={}", cfg.t_max)));
    }
    let seed = derive_seed(cfg.seed, ORACLE_STREAM);
    let chunk = 4096;
    let chunks = oracle_n.div_ceil(chunk);
    // counts of deaths by time, per chunk, summed in chunk order
    let partial: Vec<Vec<u64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut counts = vec![0u64; cfg.t_max + 1];
            for i in c * chunk..((c + 1) * chunk).min(oracle_n) {
                let mut rng = stream(seed, i as u64);
                let tr = draw_trajectory(cfg, &mut rng);
                counts[tr.death_time.unwrap_or(0)] += 1;
            }
            counts
        })
        .collect();
    let mut deaths = vec![0u64; cfg.t_max + 1];
    for p in &partial {
        for (d, c) in deaths.iter_mut().zip(p) {
            *d += c;
        }
    }
    let n = oracle_n as f64;
    Ok(horizons
        .iter()
        .map(|&t0| {
            let dead: u64 = deaths[1..=t0].iter().sum();
            let s = 1.0 - dead as f64 / n;
            TruthPoint { t0, survival: s, mc_se: (s * (1.0 - s) / n).sqrt() }
        })
        .collect())
}

/// Header of the latent CSV written next to the observed data.
pub fn latent_header(t_max: usize) -> Vec<String> {
    let mut h = vec!["id".to_string(), "w1".into(), "w2".into(), "w3".into(), "tau".into(), "death_time".into()];
    for prefix in ["lu", "d", "vu", "idu"] {
        h.extend((1..=t_max).map(|t| format!("{prefix}{t}")));
    }
    h
}

pub fn write_latent(records: &[FullRecord], t_max: usize, path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(latent_header(t_max))?;
    let b = |x: bool| if x { "1".to_string() } else { "0".to_string() };
    for r in records {
        let o = &r.observed;
        let mut rec = vec![o.id.clone(), b(o.w.w1), b(o.w.w2), b(o.w.w3), o.tau.to_string()];
        rec.push(r.death_time.map(|t| t.to_string()).unwrap_or_default());
        rec.extend(r.latent_biomarker.iter().map(|v| v.to_string()));
        rec.extend(r.dead.iter().map(|&x| b(x)));
        rec.extend(r.visits.iter().map(|&x| b(x)));
        rec.extend(r.reports.iter().map(|&x| b(x)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
