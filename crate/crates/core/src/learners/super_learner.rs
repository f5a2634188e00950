//! Discrete super learner: pick the library member with the lowest
//! cross-validated negative log-likelihood.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{mean_neg_loglik, DesignMatrix, FittedModel, LearnerSpec};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    /// CV risk per learner, `None` when the learner failed.
    pub risks: Vec<(String, Option<f64>)>,
    pub selected: String,
    pub folds: usize,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Fold label per row; rows sharing a group label share a fold.
pub fn fold_assignment(groups: &[usize], folds: usize, seed: u64) -> Vec<usize> {
    let mut labels: Vec<usize> = groups.to_vec();
    labels.sort_unstable();
    labels.dedup();
    let v = folds.max(1).min(labels.len().max(1));
    labels.shuffle(&mut stream(seed, 0x5eed_f01d));
    let mut fold_of = std::collections::HashMap::with_capacity(labels.len());
    for (rank, g) in labels.iter().enumerate() {
        fold_of.insert(*g, rank % v);
    }
    groups.iter().map(|g| fold_of[g]).collect()
}

pub fn discrete_super_learner(
    design: &DesignMatrix,
    library: &[LearnerSpec],
    folds: usize,
    seed: u64,
) -> Result<FittedModel> {
    match library.len() {
        0 => return Err(Error::Learner("empty learner library".into())),
        1 => return library[0].fit(design, seed),
        _ => {}
    }
    let assignment = fold_assignment(&design.groups, folds, seed);
    let v = assignment.iter().copied().max().map_or(0, |m| m + 1);
    let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..v)
        .map(|k| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..design.rows()).partition(|&i| assignment[i] == k);
            (train, test)
        })
        .collect();
    let mut risks = Vec::with_capacity(library.len());
    let mut warnings = Vec::new();
    for (li, learner) in library.iter().enumerate() {
        let mut preds = vec![f64::NAN; design.rows()];
        let mut failure = None;
        for (k, (train, test)) in splits.iter().enumerate() {
            if train.is_empty() || test.is_empty() {
                continue;
            }
            let fit_seed = derive_seed(derive_seed(seed, li as u64), k as u64);
            let hold = design.subset(test);
            match learner.fit(&design.subset(train), fit_seed).and_then(|m| m.predict(&hold)) {
                Ok(p) => {
                    for (&i, q) in test.iter().zip(p) {
                        preds[i] = q;
                    }
                }
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        match failure {
            Some(e) => {
                let msg = format!("learner `{}` excluded: {e}", learner.name);
                log::warn!("{msg}");
                warnings.push(msg);
                risks.push((learner.name.clone(), None));
            }
            None => {
                let covered: Vec<usize> = (0..design.rows()).filter(|&i| preds[i].is_finite()).collect();
                let y: Vec<f64> = covered.iter().map(|&i| design.y[i]).collect();
                let p: Vec<f64> = covered.iter().map(|&i| preds[i]).collect();
                let w: Vec<f64> = covered.iter().map(|&i| design.weights[i]).collect();
                risks.push((learner.name.clone(), Some(mean_neg_loglik(&y, &p, &w))));
            }
        }
    }
    let best = risks
        .iter()
        .enumerate()
        .filter_map(|(i, (_, r))| r.filter(|r| r.is_finite()).map(|r| (i, r)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Learner("every learner in the library failed".into()))?;
    let mut model = library[best].fit(design, derive_seed(seed, best as u64))?;
    model.cv = Some(CvSummary { risks, selected: library[best].name.clone(), folds: v, warnings });
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::{expit, LearnerKind};
    use crate::rng::stream;
    use rand::Rng;

    fn design(n: usize) -> DesignMatrix {
        let mut rng = stream(11, 0);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let a: f64 = rng.random::<f64>() * 4.0 - 2.0;
            x.push(a);
            y.push((rng.random::<f64>() < expit(2.0 * a)) as u8 as f64);
        }
        DesignMatrix::new(vec!["a".into()], x, y)
            .unwrap()
            .with_groups((0..n).map(|i| i / 3).collect())
            .unwrap()
    }

    #[test]
    fn groups_stay_together() {
        let groups: Vec<usize> = (0..300).map(|i| i / 4).collect();
        let f = fold_assignment(&groups, 5, 1);
        for i in 0..300 {
            assert_eq!(f[i], f[(i / 4) * 4]);
        }
        let mut counts = [0; 5];
        f.iter().for_each(|&k| counts[k] += 1);
        assert!(counts.iter().all(|&c| c == 60));
    }

    #[test]
    fn single_learner_is_direct_fit() {
        let d = design(200);
        let lib = [LearnerSpec::new("glm", LearnerKind::Logistic, &[])];
        assert_eq!(discrete_super_learner(&d, &lib, 5, 3).unwrap(), lib[0].fit(&d, 3).unwrap());
    }

    #[test]
    fn picks_informative_learner() {
        let d = design(600);
        let lib = [LearnerSpec::intercept_only(), LearnerSpec::new("glm", LearnerKind::Logistic, &[])];
        let m = discrete_super_learner(&d, &lib, 5, 3).unwrap();
        assert_eq!(m.learner, "glm");
        let cv = m.cv.unwrap();
        assert!(cv.risks[1].1.unwrap() < cv.risks[0].1.unwrap());
    }

    #[test]
    fn failing_learner_is_excluded() {
        let d = design(100);
        let lib = [
            LearnerSpec::new("broken", LearnerKind::Logistic, &["missing"]),
            LearnerSpec::intercept_only(),
        ];
        let m = discrete_super_learner(&d, &lib, 5, 3).unwrap();
        assert_eq!(m.learner, "intercept");
        assert_eq!(m.cv.unwrap().risks[0].1, None);
        let all_bad = [
            LearnerSpec::new("b1", LearnerKind::Logistic, &["missing"]),
            LearnerSpec::new("b2", LearnerKind::Lasso, &["nope"]),
        ];
        assert!(discrete_super_learner(&d, &all_bad, 5, 3).is_err());
    }
}
