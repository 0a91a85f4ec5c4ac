use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Confusion matrix (rows are truth, columns prediction) with one-vs-rest
/// per-class scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub classes: Vec<String>,
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: f64,
    /// Classes left out of `macro_f1`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub macro_excluded: Vec<String>,
    pub accuracy: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub(crate) fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn evaluate(predictions: &[usize], truths: &[usize], classes: &[String]) -> Result<EvaluationReport> {
    evaluate_excluding(predictions, truths, classes, &[])
}

/// Like [`evaluate`], with the named classes left out of the macro average.
pub fn evaluate_excluding(
    predictions: &[usize],
    truths: &[usize],
    classes: &[String],
    exclude: &[&str],
) -> Result<EvaluationReport> {
    if predictions.len() != truths.len() {
        return Err(Error::arg(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let k = classes.len();
    if let Some(bad) = predictions.iter().chain(truths).find(|&&l| l >= k) {
        return Err(Error::arg(format!("label {bad} is outside the {k} classes")));
    }
    for name in exclude {
        if !classes.iter().any(|c| c == name) {
            return Err(Error::arg(format!("excluded class {name:?} is not a known class")));
        }
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &t) in predictions.iter().zip(truths) {
        confusion[t][p] += 1;
    }
    let from_confusion = EvaluationReport::from_confusion(classes.to_vec(), confusion, exclude)?;
    Ok(from_confusion)
}

impl EvaluationReport {
    /// Derives every score from a confusion matrix.
    pub fn from_confusion(classes: Vec<String>, confusion: Vec<Vec<usize>>, exclude: &[&str]) -> Result<Self> {
        let k = classes.len();
        if confusion.len() != k || confusion.iter().any(|r| r.len() != k) {
            return Err(Error::arg(format!("confusion matrix is not {k}x{k}")));
        }
        let total: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
        let per_class: Vec<ClassMetrics> = (0..k)
            .map(|c| {
                let tp = confusion[c][c];
                let support: usize = confusion[c].iter().sum();
                let predicted: usize = confusion.iter().map(|r| r[c]).sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                ClassMetrics {
                    class: classes[c].clone(),
                    tp,
                    fp: predicted - tp,
                    fn_: support - tp,
                    support,
                    precision,
                    recall,
                    f1: f1_score(precision, recall),
                }
            })
            .collect();
        let included: Vec<f64> = per_class
            .iter()
            .filter(|m| !exclude.contains(&m.class.as_str()))
            .map(|m| m.f1)
            .collect();
        let macro_f1 = if included.is_empty() {
            0.0
        } else {
            included.iter().sum::<f64>() / included.len() as f64
        };
        Ok(EvaluationReport {
            classes,
            confusion,
            per_class,
            macro_f1,
            macro_excluded: exclude.iter().map(|s| s.to_string()).collect(),
            accuracy: ratio(correct, total),
        })
    }

    pub fn sample_count(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

impl fmt::Display for EvaluationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.classes.iter().map(|c| c.len()).max().unwrap_or(0).max(5);
        writeln!(
            f,
            "{:<w$}  {:>6} {:>6} {:>6} {:>7}  {:>9} {:>9} {:>9}",
            "class", "tp", "fp", "fn", "support", "precision", "recall", "f1"
        )?;
        for m in &self.per_class {
            writeln!(
                f,
                "{:<w$}  {:>6} {:>6} {:>6} {:>7}  {:>9.4} {:>9.4} {:>9.4}",
                m.class, m.tp, m.fp, m.fn_, m.support, m.precision, m.recall, m.f1
            )?;
        }
        writeln!(f, "{:<w$}  {:>61.4}", "macro_f1", self.macro_f1)?;
        write!(f, "{:<w$}  {:>61.4}", "accuracy", self.accuracy)
    }
}

/// The two readings of a fold-level macro-F1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMacroF1 {
    /// Mean over folds of each fold's macro-F1.
    pub fold_mean: f64,
    /// Macro-F1 of the confusion matrix pooled over folds (classes first).
    pub class_pooled: f64,
}

pub fn fold_macro_f1(folds: &[EvaluationReport]) -> Result<FoldMacroF1> {
    let first = folds.first().ok_or_else(|| Error::arg("no fold reports to aggregate"))?;
    let k = first.classes.len();
    let mut pooled = vec![vec![0usize; k]; k];
    for r in folds {
        if r.classes != first.classes {
            return Err(Error::arg("fold reports disagree on the class list"));
        }
        for (row, src) in pooled.iter_mut().zip(&r.confusion) {
            for (a, b) in row.iter_mut().zip(src) {
                *a += b;
            }
        }
    }
    let exclude: Vec<&str> = first.macro_excluded.iter().map(String::as_str).collect();
    let pooled = EvaluationReport::from_confusion(first.classes.clone(), pooled, &exclude)?;
    Ok(FoldMacroF1 {
        fold_mean: folds.iter().map(|r| r.macro_f1).sum::<f64>() / folds.len() as f64,
        class_pooled: pooled.macro_f1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from the strictest threshold down to the loosest.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// ROC curve from a threshold sweep over the distinct scores; the area is
/// the trapezoidal integral, which counts tied pairs as one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::arg(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::arg("scores contain NaN"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::arg("ROC needs at least one positive and one negative label"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // trapezoid in count space keeps the sum exact until the division
        auc += (fp - fp0) as f64 * (tp + tp0) as f64;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(RocCurve {
        points,
        auc: auc / (2.0 * pos as f64 * neg as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn classes(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn eight_two_two_gives_point_eight() {
        // class 0: 8 hits, 2 misses predicted as 1, 2 false alarms from class 1
        let mut pred = vec![0; 8];
        let mut truth = vec![0; 8];
        pred.extend([1, 1, 0, 0]);
        truth.extend([0, 0, 1, 1]);
        let r = evaluate(&pred, &truth, &classes(2)).unwrap();
        let m = &r.per_class[0];
        assert_eq!((m.tp, m.fp, m.fn_), (8, 2, 2));
        assert!((m.precision - 0.8).abs() < 1e-15);
        assert!((m.recall - 0.8).abs() < 1e-15);
        assert!((m.f1 - 0.8).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions() {
        let t = vec![0, 1, 2, 2, 1];
        let r = evaluate(&t, &t, &classes(3)).unwrap();
        assert!(r.per_class.iter().all(|m| m.f1 == 1.0));
        assert_eq!(r.macro_f1, 1.0);
    }

    #[test]
    fn macro_is_plain_mean_and_exclusion_works() {
        // class 0 F1 = 1.0; class 1: tp 3, fp 0, fn 4 → P 1, R 3/7, F1 0.6
        let truth = vec![0, 0, 1, 1, 1, 1, 1, 1, 1, 2];
        let pred = vec![0, 0, 1, 1, 1, 2, 2, 2, 2, 2];
        let r = evaluate(&pred, &truth, &classes(3)).unwrap();
        assert!((r.per_class[1].f1 - 0.6).abs() < 1e-12);
        let r = evaluate_excluding(&pred, &truth, &classes(3), &["c2"]).unwrap();
        assert!((r.macro_f1 - 0.8).abs() < 1e-12);
        assert_eq!(r.macro_excluded, vec!["c2"]);
        let json = serde_json::to_value(&r).unwrap();
        for key in ["confusion", "per_class", "macro_f1"] {
            assert!(json.get(key).is_some());
        }
        assert!(json["per_class"][0].get("fn").is_some());
    }

    #[test]
    fn zero_denominators_score_zero() {
        let r = evaluate(&[0, 0], &[0, 0], &classes(2)).unwrap();
        assert_eq!(r.per_class[1].precision, 0.0);
        assert_eq!(r.per_class[1].recall, 0.0);
        assert_eq!(r.per_class[1].f1, 0.0);
    }

    #[test]
    fn label_outside_set_is_rejected() {
        assert!(matches!(evaluate(&[3], &[0], &classes(2)), Err(Error::Argument(_))));
        assert!(evaluate(&[0], &[0, 1], &classes(2)).is_err());
    }

    #[test]
    fn text_table_lists_every_class() {
        let r = evaluate(&[0, 1], &[0, 1], &classes(2)).unwrap();
        let text = r.to_string();
        assert!(text.contains("c0") && text.contains("c1") && text.contains("macro_f1"));
    }

    #[test]
    fn fold_aggregations_differ_when_folds_are_unbalanced() {
        let a = evaluate(&[0, 1], &[0, 1], &classes(2)).unwrap();
        let b = evaluate(&[0, 0, 0, 0, 0, 0, 0, 1], &[0, 0, 0, 0, 0, 0, 1, 1], &classes(2)).unwrap();
        let agg = fold_macro_f1(&[a.clone(), b.clone()]).unwrap();
        assert!((agg.fold_mean - (a.macro_f1 + b.macro_f1) / 2.0).abs() < 1e-15);
        assert!(agg.fold_mean != agg.class_pooled);
    }

    #[test]
    fn roc_examples() {
        let r = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert!((r.auc - 0.75).abs() < 1e-15);
        assert_eq!(r.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(r.points.last(), Some(&(1.0, 1.0)));
        let sep = roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!(sep.auc, 1.0);
        let inv = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[true, true, false, false]).unwrap();
        assert!((inv.auc - 0.25).abs() < 1e-15);
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    proptest! {
        #[test]
        fn confusion_invariants(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60)) {
            let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let r = evaluate(&pred, &truth, &classes(4)).unwrap();
            prop_assert_eq!(r.sample_count(), pred.len());
            for c in 0..4 {
                let row: usize = r.confusion[c].iter().sum();
                prop_assert_eq!(row, truth.iter().filter(|&&t| t == c).count());
            }
            let trace: usize = (0..4).map(|i| r.confusion[i][i]).sum();
            let correct = pred.iter().zip(&truth).filter(|(p, t)| p == t).count();
            prop_assert_eq!(trace, correct);
            // micro recall equals accuracy on single-label data
            let tp: usize = r.per_class.iter().map(|m| m.tp).sum();
            let fnn: usize = r.per_class.iter().map(|m| m.fn_).sum();
            prop_assert!((tp as f64 / (tp + fnn) as f64 - r.accuracy).abs() < 1e-15);
        }

        #[test]
        fn roc_points_monotone_and_inversion_symmetric(
            data in prop::collection::vec((0u8..6, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 5.0).collect();
            let labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let r = roc_auc(&scores, &labels).unwrap();
            for w in r.points.windows(2) {
                prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
            prop_assert!((0.0..=1.0).contains(&r.auc));
            let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
            let f = roc_auc(&scores, &flipped).unwrap();
            prop_assert!((r.auc + f.auc - 1.0).abs() < 1e-12);
        }
    }
}
