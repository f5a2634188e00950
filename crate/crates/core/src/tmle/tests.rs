use super::*;
use crate::data::{BaselineCovariates, ObservedSubject};
use crate::hazard::{fit_initial_hazard, HazardConfig};
use crate::learners::{LearnerKind, LearnerSpec};
use crate::report::ic_se;
use crate::sim::{simulate_cohort, FollowUpMode, SimulationConfig};

fn w0() -> BaselineCovariates {
    BaselineCovariates::default()
}

fn subj(id: &str, tau: usize, m: usize, death: Option<usize>, report: Option<usize>, resampled: bool) -> ObservedSubject {
    ObservedSubject::with_regular_visits(id, w0(), tau, m, 300.0, death, report, resampled).unwrap()
}

/// A: followed to the end, alive. B: lost after t=1, traced, died at 3.
/// C: lost at baseline, not traced.
fn three_subjects() -> (Dataset, HazardSurface) {
    let data = Dataset::new(
        3,
        vec![subj("a", 3, 3, None, None, false), subj("b", 3, 1, Some(3), None, true), subj("c", 3, 0, None, None, false)],
    );
    assert!(!data.subjects[2].delta());
    let lambda = vec![0.0, 0.0, 0.0, 0.0, 0.1, 0.2, 0.3, 0.3, 0.3];
    let surface = HazardSurface::from_values(&data, 3, lambda).unwrap();
    (data, surface)
}

#[test]
fn clever_covariate_examples() {
    let (data, surface) = three_subjects();
    let pi = known_delta_weights(&data, 0.2).unwrap().pi;
    assert_eq!(pi, vec![1.0, 0.2, 0.2]);
    // delta = 0 has no at-risk rows
    for t in 1..=3 {
        assert_eq!(clever_covariate(&surface, &pi, 2, t, 3), 0.0);
    }
    // survival ratio is 1 at t = t0
    assert!((clever_covariate(&surface, &pi, 1, 3, 3) - 5.0).abs() < 1e-12);
    // beyond t0
    assert_eq!(clever_covariate(&surface, &pi, 1, 3, 2), 0.0);
    // S(3)/S(2) = 0.8
    assert!((clever_covariate(&surface, &pi, 1, 2, 3) - 4.0).abs() < 1e-12);
}

#[test]
fn three_subject_eif_matches_hand_sum() {
    let (data, surface) = three_subjects();
    let pi = known_delta_weights(&data, 0.2).unwrap().pi;
    let (psi, d) = eif_fixed(&surface, &pi, 3);
    let s = [1.0, 0.9 * 0.8, 0.7f64.powi(3)];
    let psi_hand = (s[0] + s[1] + s[2]) / 3.0;
    // B: H(2) = 0.8 / 0.2, H(3) = 1 / 0.2; residuals (0 - 0.1) and (1 - 0.2)
    let resid_b = 4.0 * (0.0 - 0.1) + 5.0 * (1.0 - 0.2);
    let hand = [1.0 - psi_hand, -resid_b + s[1] - psi_hand, s[2] - psi_hand];
    assert!((psi - psi_hand).abs() < 1e-14);
    for (a, b) in d.iter().zip(hand) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn deterministic_subject_has_one_minus_psi() {
    let (data, surface) = three_subjects();
    let pi = known_delta_weights(&data, 0.2).unwrap().pi;
    for t0 in 1..=3 {
        let (psi, d) = eif_fixed(&surface, &pi, t0);
        assert!((d[0] - (1.0 - psi)).abs() < 1e-15);
    }
    // B is deterministic at t0 = 1 (M = 1)
    let (psi, d) = eif_fixed(&surface, &pi, 1);
    assert!((d[1] - (1.0 - psi)).abs() < 1e-15);
}

#[test]
fn eif_is_centred_without_residuals() {
    // no at-risk rows at all: only unknown outcomes and complete follow-up
    let data = Dataset::new(3, vec![subj("a", 3, 3, None, None, false), subj("c", 3, 1, None, None, false)]);
    let surface = HazardSurface::from_values(&data, 3, vec![0.0, 0.0, 0.0, 0.0, 0.25, 0.5]).unwrap();
    let pi = known_delta_weights(&data, 0.2).unwrap().pi;
    let (_, d) = eif_fixed(&surface, &pi, 3);
    assert!(d.iter().sum::<f64>().abs() < 1e-15);
}

fn simulated(n: usize, seed: u64, mode: FollowUpMode) -> Dataset {
    let cfg = SimulationConfig { n, seed, mode, ..SimulationConfig::default() };
    simulate_cohort(&cfg).unwrap().0
}

#[test]
fn epsilon_solves_the_score() {
    let rows: Vec<FluctuationRow> = (0..40)
        .map(|k| FluctuationRow {
            offset: -1.0 + 0.05 * k as f64,
            covariate: 1.0 + (k % 3) as f64,
            y: (k % 4 == 0) as u8 as f64,
            weight: 1.0 + (k % 2) as f64,
        })
        .collect();
    let eps = fit_epsilon(&rows);
    let score: f64 = rows.iter().map(|r| r.weight * r.covariate * (r.y - expit(r.offset + eps * r.covariate))).sum();
    assert!(score.abs() < 1e-9, "{score}");
    assert_eq!(fit_epsilon(&[]), 0.0);
}

#[test]
fn pooled_targeting_solves_eif_and_is_a_fixed_point() {
    let data = simulated(1500, 21, FollowUpMode::FixedTau);
    let surface = fit_initial_hazard(&data, 10, &HazardConfig::default()).unwrap();
    let pi = known_delta_weights(&data, 0.2).unwrap().pi;
    let ones = vec![1.0; data.len()];
    let state = target_pooled(&surface, &pi, &ones, 5, MAX_POOLED_ITER);
    assert!(state.converged);
    assert!(state.score_mean.abs() <= state.score_threshold);
    assert!((0.0..=1.0).contains(&state.psi));
    // a fit whose score is already solved (recursive solves every time
    // point exactly) is a fixed point of pooled targeting
    let solved = target_recursive(&surface, &pi, &ones, 5);
    let again = target_pooled(&solved.surface, &pi, &ones, 5, MAX_POOLED_ITER);
    assert_eq!(again.iterations, 1);
    assert!(again.epsilon_path[0].abs() < 1e-9, "{:?}", again.epsilon_path);
    assert!(again.converged);
}

#[test]
fn recursive_solves_each_time_point() {
    let data = simulated(1500, 22, FollowUpMode::FixedTau);
    let surface = fit_initial_hazard(&data, 10, &HazardConfig::default()).unwrap();
    let pi = known_delta_weights(&data, 0.2).unwrap().pi;
    let ones = vec![1.0; data.len()];
    let t0 = 6;
    let state = target_recursive(&surface, &pi, &ones, t0);
    let s = &state.surface;
    for t in 1..=t0 {
        let score: f64 = (0..data.len())
            .filter(|&i| s.at_risk(i, t))
            .map(|i| clever_covariate(s, &pi, i, t, t0) * (s.dn(i, t) - s.lambda(i, t)))
            .sum();
        assert!(score.abs() < 1e-8, "t={t}: {score}");
    }
    let (_, sd) = mean_sd(&state.dstar);
    assert!(state.score_mean.abs() <= 1e-6 * sd);
    assert!(state.converged);
}

#[test]
fn recursive_with_events_at_one_time() {
    // t_max = 3; every at-risk row is at t = 3
    let mut subjects = Vec::new();
    for k in 0..6 {
        subjects.push(subj(&format!("d{k}"), 3, 2, Some(3), None, true));
    }
    for k in 0..14 {
        subjects.push(subj(&format!("s{k}"), 3, 2, None, None, true));
    }
    for k in 0..10 {
        subjects.push(subj(&format!("k{k}"), 3, 3, None, None, false));
    }
    let data = Dataset::new(3, subjects);
    let surface = fit_initial_hazard(&data, 3, &HazardConfig::intercept_only()).unwrap();
    let pi = known_delta_weights(&data, 0.2).unwrap().pi;
    let state = target_recursive(&surface, &pi, &vec![1.0; data.len()], 3);
    assert_eq!(state.epsilon_path[0], 0.0);
    assert_eq!(state.epsilon_path[1], 0.0);
    assert_eq!(state.warnings.len(), 2);
    // intercept-only already matches the single-time event rate
    assert!(state.epsilon_path[2].abs() < 1e-8);
    assert!((state.surface.lambda(0, 3) - 0.3).abs() < 1e-8);
}

#[test]
fn pooled_and_recursive_agree() {
    let data = simulated(3000, 23, FollowUpMode::FixedTau);
    let surface = fit_initial_hazard(&data, 10, &HazardConfig::default()).unwrap();
    let delta = known_delta_weights(&data, 0.2).unwrap();
    let pooled = estimate_fixed_tmle(&data, &surface, &[5], &delta, FixedOptions::default()).unwrap();
    let rec = estimate_fixed_tmle(
        &data,
        &surface,
        &[5],
        &delta,
        FixedOptions { method: TargetMethod::Recursive, ..FixedOptions::default() },
    )
    .unwrap();
    assert_eq!(pooled[0].diagnostics.converged, Some(true));
    assert_eq!(rec[0].diagnostics.converged, Some(true));
    let se = pooled[0].se.unwrap();
    assert!((pooled[0].estimate - rec[0].estimate).abs() < 0.5 * se);
}

#[test]
fn complete_follow_up_gives_empirical_survival() {
    // everyone is seen until death (reported) or the end of study
    let mut subjects = Vec::new();
    for k in 0..40 {
        let d = 2 + k % 4;
        subjects.push(subj(&format!("d{k}"), 5, d - 1, Some(d), Some(d), false));
    }
    for k in 0..60 {
        subjects.push(subj(&format!("a{k}"), 5, 5, None, None, false));
    }
    let data = Dataset::new(5, subjects);
    let delta = known_delta_weights(&data, 0.2).unwrap();
    assert!(delta.pi.iter().all(|&p| p == 1.0));
    let surface = fit_initial_hazard(&data, 5, &HazardConfig::intercept_only()).unwrap();
    let r = &estimate_fixed_tmle(&data, &surface, &[5], &delta, FixedOptions::default()).unwrap()[0];
    let p = 0.6;
    assert!((r.estimate - p).abs() < 1e-4, "{}", r.estimate);
    let binomial = (p * (1.0 - p) / 100.0f64).sqrt();
    // sd uses n - 1
    assert!((r.se.unwrap() - binomial * (100.0f64 / 99.0).sqrt()).abs() < 1e-4);
}

#[test]
fn plugin_equals_tmle_without_fluctuation() {
    let (data, surface) = three_subjects();
    let plug = plugin_untargeted(&surface, &[1, 2, 3]).unwrap();
    let pi = known_delta_weights(&data, 0.2).unwrap().pi;
    for r in &plug {
        assert_eq!(r.se, None);
        let (psi, _) = eif_fixed(&surface, &pi, r.t0);
        assert_eq!(r.estimate, psi);
    }
}

#[test]
fn estimated_delta_weights() {
    let data = simulated(20_000, 24, FollowUpMode::FixedTau);
    let est = estimate_delta_weights(&data, false).unwrap();
    let eligible: Vec<usize> = (0..data.len()).filter(|&i| data.subjects[i].resample_eligible()).collect();
    let mean = eligible.iter().map(|&i| est.pi[i]).sum::<f64>() / eligible.len() as f64;
    let se = (0.16 / eligible.len() as f64).sqrt();
    assert!((mean - 0.2).abs() < 4.0 * se, "{mean}");
    for (s, p) in data.subjects.iter().zip(&est.pi) {
        if s.last_visit == s.tau {
            assert_eq!(*p, 1.0);
        }
    }
    let none = Dataset::new(3, vec![subj("a", 3, 3, None, None, false)]);
    assert_eq!(estimate_delta_weights(&none, false).unwrap().pi, vec![1.0]);
}

// varied follow-up

fn default_law() -> Vec<(usize, f64)> {
    SimulationConfig { mode: FollowUpMode::VariedTau, ..SimulationConfig::default() }.tau_law()
}

#[test]
fn known_censoring_weights() {
    let data = simulated(400, 25, FollowUpMode::VariedTau);
    let cens = known_censoring(&data, &default_law()).unwrap();
    let (w, trunc) = cens.weights(10).unwrap();
    assert_eq!(trunc, 0);
    for (s, w) in data.subjects.iter().zip(&w) {
        let expect = if s.tau == 10 { 1.0 / 0.6 } else { 0.0 };
        assert!((w - expect).abs() < 1e-12);
    }
    let (w, _) = cens.weights(5).unwrap();
    assert!(w.iter().all(|&w| w == 1.0));
    assert!(cens.weights(11).is_err());
    let short = known_censoring(&data, &[(5, 0.5), (7, 0.5)]).unwrap();
    assert!(matches!(short.weights(8), Err(Error::NoFollowUp(8))));
}

#[test]
fn varied_estimators_reduce_to_fixed() {
    let data = simulated(1000, 26, FollowUpMode::FixedTau);
    let surface = fit_initial_hazard(&data, 10, &HazardConfig::default()).unwrap();
    let delta = known_delta_weights(&data, 0.2).unwrap();
    let cens = known_censoring(&data, &[(10, 1.0)]).unwrap();
    for t0 in [3, 7, 10] {
        let fixed = &estimate_fixed_tmle(&data, &surface, &[t0], &delta, FixedOptions::default()).unwrap()[0];
        let strat = estimate_stratified_tmle(&data, &surface, t0, &cens, &delta, TargetMethod::Pooled).unwrap();
        let ipcw = estimate_ipcw_tmle(&data, &surface, t0, &cens, &delta, TargetMethod::Pooled).unwrap();
        assert!((fixed.estimate - strat.estimate).abs() < 1e-10);
        assert!((fixed.estimate - ipcw.estimate).abs() < 1e-10);
        assert!((fixed.se.unwrap() - strat.se.unwrap()).abs() < 1e-10);
        assert!((fixed.se.unwrap() - ipcw.se.unwrap()).abs() < 1e-10);
    }
}

#[test]
fn stratum_share_at_ten() {
    let data = simulated(20_000, 27, FollowUpMode::VariedTau);
    let share = data.subjects.iter().filter(|s| s.tau >= 10).count() as f64 / data.len() as f64;
    assert!((share - 0.6).abs() < 4.0 * (0.24f64 / 20_000.0).sqrt());
    let small = Dataset::new(3, vec![subj("a", 2, 2, None, None, false)]);
    let surface = HazardSurface::from_values(&small, 3, vec![0.0, 0.0, 0.1]).unwrap();
    let cens = known_censoring(&small, &[(2, 0.5), (3, 0.5)]).unwrap();
    let delta = known_delta_weights(&small, 0.2).unwrap();
    assert!(matches!(
        estimate_stratified_tmle(&small, &surface, 3, &cens, &delta, TargetMethod::Pooled),
        Err(Error::EmptyStratum(3))
    ));
}

fn glm() -> LearnerSpec {
    LearnerSpec::new("logistic", LearnerKind::Logistic, &[])
}

#[test]
fn censoring_hazard_matches_marginal_law() {
    let data = simulated(20_000, 28, FollowUpMode::VariedTau);
    let cens = estimate_censoring_hazard(&data, &glm(), 1).unwrap();
    let law = default_law();
    let known = known_censoring(&data, &law).unwrap();
    for s in 1..10 {
        let rows: Vec<usize> = (0..data.len()).filter(|&i| data.subjects[i].tau >= s).collect();
        let mean = rows.iter().map(|&i| cens.lambda(i, s)).sum::<f64>() / rows.len() as f64;
        let truth = known.lambda(0, s);
        let se = (truth * (1.0 - truth) / rows.len() as f64).sqrt();
        assert!((mean - truth).abs() <= 4.0 * se + 1e-12, "s={s}: {mean} vs {truth}");
    }
    // nothing ends before t = 5
    for i in 0..data.len() {
        assert_eq!(cens.gbar(i, 5), 1.0);
    }
}

#[test]
fn censoring_hazard_recovers_injected_slope() {
    use crate::rng::stream;
    use rand::Rng;
    let mut rng = stream(99, 0);
    let mut subjects = Vec::new();
    for k in 0..6000 {
        let w1 = rng.random::<f64>() < 0.5;
        let p = expit(-1.0 + 1.5 * w1 as u8 as f64);
        let tau = if rng.random::<f64>() < p { 5 } else { 10 };
        let w = BaselineCovariates { w1, ..w0() };
        subjects.push(ObservedSubject::with_regular_visits(&format!("{k}"), w, tau, tau, 300.0, None, None, false).unwrap());
    }
    let data = Dataset::new(10, subjects);
    let cens = estimate_censoring_hazard(&data, &LearnerSpec::new("glm", LearnerKind::Logistic, &["w1"]), 0).unwrap();
    let p1 = cens.lambda(data.subjects.iter().position(|s| s.w.w1).unwrap(), 5);
    let p0 = cens.lambda(data.subjects.iter().position(|s| !s.w.w1).unwrap(), 5);
    let slope = logit(p1) - logit(p0);
    // se of a log odds ratio with ~3000 per arm
    assert!((slope - 1.5).abs() < 4.0 * 0.06, "{slope}");
}

#[test]
fn projection_examples() {
    let data = simulated(4000, 29, FollowUpMode::VariedTau);
    let cens = known_censoring(&data, &default_law()).unwrap();
    let t0 = 8;
    // D = c * dA(5)
    let c = 2.5;
    let d: Vec<f64> = data.subjects.iter().map(|s| if s.tau == 5 { c } else { 0.0 }).collect();
    let proj = estimate_projection_f(&data, &cens, &d, t0).unwrap();
    for i in 0..data.len() {
        assert!((proj.f(i, 5) - c).abs() < 1e-8);
    }
    // no events before 5
    assert!((1..5).all(|s| (0..data.len()).all(|i| proj.f(i, s) == 0.0)));
    // D independent of dA
    let mut rng = crate::rng::stream(5, 5);
    use rand::Rng;
    let noise: Vec<f64> = (0..data.len()).map(|_| rng.random::<f64>() - 0.5).collect();
    let proj = estimate_projection_f(&data, &cens, &noise, t0).unwrap();
    let mean_f = (0..data.len()).filter(|&i| data.subjects[i].tau >= 5).map(|i| proj.f(i, 5).abs()).sum::<f64>()
        / data.len() as f64;
    assert!(mean_f < 0.1, "{mean_f}");
}

#[test]
fn projection_without_risk_set_is_flagged() {
    let data = Dataset::new(10, vec![subj("a", 3, 3, None, None, false), subj("b", 3, 3, None, None, false)]);
    let cens = known_censoring(&data, &[(3, 1.0)]).unwrap();
    let proj = estimate_projection_f(&data, &cens, &[0.5, -0.5], 6).unwrap();
    assert!(proj.flags.iter().any(|f| f.contains("s=4")));
    assert!((1..6).all(|s| proj.f(0, s) == 0.0 && proj.f(1, s) == 0.0));
}

#[test]
fn zero_projection_fixed_points() {
    let data = simulated(500, 30, FollowUpMode::VariedTau);
    let cens = estimate_censoring_hazard(&data, &glm(), 0).unwrap();
    let zero = Projection::zero(data.len(), 10);
    let (updated, eps) = target_g(&cens, &zero);
    assert_eq!(eps, 0.0);
    for i in 0..data.len() {
        for s in 1..10 {
            assert_eq!(updated.lambda(i, s), cens.lambda(i, s));
        }
    }
    let d: Vec<f64> = (0..data.len()).map(|i| i as f64).collect();
    assert_eq!(d_star_star(&d, &zero, &cens), d);
}

#[test]
fn joint_targeting_solves_both_scores() {
    let data = simulated(3000, 31, FollowUpMode::VariedTau);
    let surface = fit_initial_hazard(&data, 10, &HazardConfig::default()).unwrap();
    let delta = known_delta_weights(&data, 0.2).unwrap();
    let cens = estimate_censoring_hazard(&data, &glm(), 0).unwrap();
    let (state, r) = joint_target(&data, &surface, 10, &cens, &delta, 25).unwrap();
    assert!(state.converged(), "{:?}", r.diagnostics);
    let dg = &r.diagnostics;
    assert!(dg.eif_mean.unwrap().abs() <= dg.eif_threshold.unwrap());
    assert!(dg.g_score_mean.unwrap().abs() <= dg.g_score_threshold.unwrap());
    assert!(dg.var_dstarstar_g.unwrap() <= 1.02 * dg.var_dstar_g.unwrap());
    assert!((r.se.unwrap() - ic_se(&state.dstarstar_g)).abs() < 1e-15);
    assert_eq!(state.censoring.mode, CensoringMode::Targeted);
}

#[test]
fn projection_term_is_centred() {
    let data = simulated(3000, 32, FollowUpMode::VariedTau);
    let surface = fit_initial_hazard(&data, 10, &HazardConfig::default()).unwrap();
    let delta = known_delta_weights(&data, 0.2).unwrap();
    let cens = estimate_censoring_hazard(&data, &glm(), 0).unwrap();
    let r = estimate_ipcw_tmle(&data, &surface, 10, &cens, &delta, TargetMethod::Pooled).unwrap();
    // refit the pieces to inspect the subtracted term
    let (w, _) = cens.weights(10).unwrap();
    let state = target(&surface, &delta.pi, &w, 10, TargetMethod::Pooled);
    let dg: Vec<f64> = state.dstar.iter().zip(&w).map(|(d, w)| d * w).collect();
    let proj = estimate_projection_f(&data, &cens, &dg, 10).unwrap();
    let terms = g_score_terms(&cens, &proj);
    let (m, sd) = mean_sd(&terms);
    assert!(m.abs() <= 4.0 * sd / (terms.len() as f64).sqrt());
    assert!(r.diagnostics.var_dstarstar_g.unwrap() <= r.diagnostics.var_dstar_g.unwrap() * 1.02);
}
