//! Accuracy, per-class precision/recall/F1 and their macro averages.
//!
//! Empty denominators count as zero: a class never predicted has precision
//! 0, a class never present has recall 0, and F1 is 0 when both are 0.

use serde::{Deserialize, Serialize};

use crate::data::EmbeddingBundle;
use crate::error::{Error, Result};
use crate::head::Classifier;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub f1_macro: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub per_class: Vec<ClassScores>,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    pub fn n_examples(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn evaluate(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<EvalReport> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape {
            op: "evaluate",
            left: (predictions.len(), 1),
            right: (labels.len(), 1),
        });
    }
    if predictions.is_empty() {
        return Err(Error::EmptyInput("evaluate needs at least one example"));
    }
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        for v in [p, l] {
            if v >= n_classes {
                return Err(Error::LabelOutOfRange { label: v, n_classes });
            }
        }
        confusion[l][p] += 1;
    }
    let total = predictions.len() as u64;
    let correct: u64 = (0..n_classes).map(|c| confusion[c][c]).sum();
    let per_class: Vec<ClassScores> = (0..n_classes)
        .map(|c| {
            let tp = confusion[c][c];
            let row: u64 = confusion[c].iter().sum();
            let col: u64 = confusion.iter().map(|r| r[c]).sum();
            let precision = ratio(tp, col);
            let recall = ratio(tp, row);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores {
                class: c,
                precision,
                recall,
                f1,
                support: row,
            }
        })
        .collect();
    let mean = |f: fn(&ClassScores) -> f64| per_class.iter().map(f).sum::<f64>() / n_classes as f64;
    Ok(EvalReport {
        accuracy: ratio(correct, total),
        f1_macro: mean(|s| s.f1),
        precision_macro: mean(|s| s.precision),
        recall_macro: mean(|s| s.recall),
        per_class,
        confusion,
    })
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate().skip(1) {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

pub fn predict<C: Classifier + ?Sized>(head: &C, bundle: &EmbeddingBundle) -> Result<Vec<usize>> {
    if bundle.embed_dim() != head.embed_dim() {
        return Err(Error::Shape {
            op: "predict",
            left: (bundle.seq_len(), bundle.embed_dim()),
            right: (bundle.seq_len(), head.embed_dim()),
        });
    }
    bundle
        .examples()
        .iter()
        .map(|e| head.logits(&e.embeddings, &e.mask).map(|l| argmax(&l)))
        .collect()
}

/// Predicts on a labeled bundle and scores against its labels.
pub fn evaluate_head<C: Classifier + ?Sized>(head: &C, bundle: &EmbeddingBundle) -> Result<EvalReport> {
    let labels = bundle.labels()?;
    let predictions = predict(head, bundle)?;
    evaluate(&predictions, &labels, head.n_classes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        let labels = [0, 1, 2, 1, 0];
        let r = evaluate(&labels, &labels, 3).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.f1_macro, 1.0);
        assert_eq!(r.precision_macro, 1.0);
        assert_eq!(r.recall_macro, 1.0);
    }

    #[test]
    fn hand_computed_example() {
        // confusion [[1,1],[0,2]]: P0=1, R0=1/2, F0=2/3; P1=2/3, R1=1, F1=0.8
        let r = evaluate(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(r.confusion, vec![vec![1, 1], vec![0, 2]]);
        assert_eq!(r.accuracy, 0.75);
        assert!((r.f1_macro - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
        assert!((r.f1_macro - 0.7333).abs() < 1e-4);
        assert!((r.per_class[1].precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.per_class[0].recall, 0.5);
    }

    #[test]
    fn degenerate_predictor() {
        let r = evaluate(&[0, 0, 0, 0], &[0, 1, 0, 1], 2).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.per_class[1].recall, 0.0);
        assert_eq!(r.per_class[1].precision, 0.0);
        assert_eq!(r.per_class[1].f1, 0.0);
    }

    #[test]
    fn evaluate_errors() {
        assert!(matches!(evaluate(&[0], &[0, 1], 2), Err(Error::Shape { .. })));
        assert!(matches!(evaluate(&[2], &[0], 2), Err(Error::LabelOutOfRange { .. })));
        assert!(matches!(evaluate(&[], &[], 2), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn argmax_ties_low() {
        assert_eq!(argmax(&[0.2, 0.9]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[-1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn json_keys() {
        let r = evaluate(&[0, 1], &[0, 1], 2).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in ["accuracy", "f1_macro", "precision_macro", "recall_macro", "per_class", "confusion"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let back: EvalReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }

    fn preds_labels() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
        (1usize..5).prop_flat_map(|n| (Just(n), prop::collection::vec((0..n, 0..n), 1..60)))
    }

    proptest! {
        #[test]
        fn argmax_shift_invariant(logits in prop::collection::vec(-5.0f64..5.0, 1..6), c in -3.0f64..3.0) {
            let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
            // exact ties can be broken by rounding; skip near-ties
            let best = argmax(&logits);
            prop_assume!(logits.iter().enumerate().all(|(i, l)| i == best || (logits[best] - l).abs() > 1e-9));
            prop_assert_eq!(best, argmax(&shifted));
        }

        #[test]
        fn macro_f1_relabel_invariant((n, pairs) in preds_labels(), rot in 0usize..5) {
            let preds: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let labels: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let perm = |c: usize| (c + rot) % n;
            let a = evaluate(&preds, &labels, n).unwrap();
            let b = evaluate(
                &preds.iter().map(|&c| perm(c)).collect::<Vec<_>>(),
                &labels.iter().map(|&c| perm(c)).collect::<Vec<_>>(),
                n,
            ).unwrap();
            prop_assert!((a.f1_macro - b.f1_macro).abs() < 1e-12);
            prop_assert_eq!(a.accuracy, b.accuracy);
            for c in 0..n {
                prop_assert_eq!(&a.per_class[c].f1, &b.per_class[perm(c)].f1);
            }
            prop_assert!([a.accuracy, a.f1_macro, a.precision_macro, a.recall_macro].iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(a.n_examples(), preds.len() as u64);
        }
    }
}
