//! Ranking and thresholded multi-label metrics.

use serde::{Deserialize, Serialize};

use crate::datagen::{PartialLabelVector, PseudoLabelVector};
use crate::error::{Error, Result};

/// Non-interpolated average precision: the mean, over positives, of the
/// precision at each positive's rank. Ties keep input order. `None` when
/// there are no positives.
pub fn average_precision(scores: &[f64], gt: &[i8]) -> Option<f64> {
    debug_assert_eq!(scores.len(), gt.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if gt[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSummary {
    pub map: f64,
    pub op: f64,
    pub or: f64,
    pub of1: f64,
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
}

impl MetricSummary {
    pub const FIELDS: [&'static str; 7] = ["mAP", "OP", "OR", "OF1", "CP", "CR", "CF1"];

    pub fn values(&self) -> [f64; 7] {
        [self.map, self.op, self.or, self.of1, self.cp, self.cr, self.cf1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_category_ap: Vec<Option<f64>>,
    pub summary: MetricSummary,
    /// Images predicted positive and actually positive, per category.
    pub n_correct: Vec<usize>,
    pub n_predicted: Vec<usize>,
    pub n_ground_truth: Vec<usize>,
    /// Categories left out of mAP for having no positives.
    pub map_excluded: Vec<usize>,
    /// Categories left out of CP / CR for a zero denominator.
    pub cp_excluded: Vec<usize>,
    pub cr_excluded: Vec<usize>,
    pub threshold: f64,
}

pub const DEFAULT_DECISION_THRESHOLD: f64 = 0.5;

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// mAP plus overall and per-class precision / recall / F1 at threshold
/// `tau` (score ≥ τ predicts positive). `scores` and `gt` are `N × C`.
pub fn classification_metrics(scores: &[Vec<f64>], gt: &[Vec<i8>], tau: f64) -> Result<EvalResult> {
    if scores.len() != gt.len() {
        return Err(Error::Shape {
            context: "classification_metrics".into(),
            expected: (gt.len(), 0),
            actual: (scores.len(), 0),
        });
    }
    let c = gt.first().map_or(0, Vec::len);
    for (n, (s, g)) in scores.iter().zip(gt).enumerate() {
        if s.len() != c || g.len() != c {
            return Err(Error::Shape {
                context: format!("classification_metrics row {n}"),
                expected: (1, c),
                actual: (1, s.len().max(g.len())),
            });
        }
    }

    let mut per_category_ap = Vec::with_capacity(c);
    let mut n_correct = vec![0; c];
    let mut n_predicted = vec![0; c];
    let mut n_ground_truth = vec![0; c];
    for k in 0..c {
        let col_s: Vec<f64> = scores.iter().map(|s| s[k]).collect();
        let col_g: Vec<i8> = gt.iter().map(|g| g[k]).collect();
        per_category_ap.push(average_precision(&col_s, &col_g));
        for (&s, &g) in col_s.iter().zip(&col_g) {
            let pred = s >= tau;
            let truth = g == 1;
            n_predicted[k] += pred as usize;
            n_ground_truth[k] += truth as usize;
            n_correct[k] += (pred && truth) as usize;
        }
    }

    let aps: Vec<f64> = per_category_ap.iter().flatten().copied().collect();
    let map_excluded = (0..c).filter(|&k| per_category_ap[k].is_none()).collect();
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };

    let total = |v: &[usize]| v.iter().sum::<usize>() as f64;
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    let op = ratio(total(&n_correct), total(&n_predicted));
    let or = ratio(total(&n_correct), total(&n_ground_truth));

    let class_mean = |den: &[usize]| -> (f64, Vec<usize>) {
        let mut sum = 0.0;
        let mut used = 0usize;
        let mut excluded = Vec::new();
        for k in 0..c {
            if den[k] == 0 {
                excluded.push(k);
            } else {
                sum += n_correct[k] as f64 / den[k] as f64;
                used += 1;
            }
        }
        (ratio(sum, used as f64), excluded)
    };
    let (cp, cp_excluded) = class_mean(&n_predicted);
    let (cr, cr_excluded) = class_mean(&n_ground_truth);

    Ok(EvalResult {
        per_category_ap,
        summary: MetricSummary {
            map,
            op,
            or,
            of1: f1(op, or),
            cp,
            cr,
            cf1: f1(cp, cr),
        },
        n_correct,
        n_predicted,
        n_ground_truth,
        map_excluded,
        cp_excluded,
        cr_excluded,
        threshold: tau,
    })
}

/// Unweighted mean of every summary metric across known-label proportions.
pub fn average_over_proportions(results: &[(f64, MetricSummary)]) -> Result<MetricSummary> {
    if results.is_empty() {
        return Err(Error::invalid("no proportions to average"));
    }
    let n = results.len() as f64;
    let mut acc = [0.0; 7];
    for (_, r) in results {
        for (a, v) in acc.iter_mut().zip(r.values()) {
            *a += v;
        }
    }
    let [map, op, or, of1, cp, cr, cf1] = acc.map(|v| v / n);
    Ok(MetricSummary {
        map,
        op,
        or,
        of1,
        cp,
        cr,
        cf1,
    })
}

/// Quality of generated positives at positions hidden during training.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PseudoQuality {
    pub pseudo_positives: usize,
    pub true_positives: usize,
    /// Actual positives among the hidden positions.
    pub hidden_positives: usize,
    pub hidden_total: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

impl PseudoQuality {
    /// Positive rate among hidden positions; the precision of guessing.
    pub fn base_rate(&self) -> Option<f64> {
        (self.hidden_total > 0).then(|| self.hidden_positives as f64 / self.hidden_total as f64)
    }

    pub fn merge(&self, other: &PseudoQuality) -> PseudoQuality {
        PseudoQuality::from_counts(
            self.pseudo_positives + other.pseudo_positives,
            self.true_positives + other.true_positives,
            self.hidden_positives + other.hidden_positives,
            self.hidden_total + other.hidden_total,
        )
    }

    fn from_counts(pseudo: usize, tp: usize, hidden_pos: usize, hidden_total: usize) -> Self {
        Self {
            pseudo_positives: pseudo,
            true_positives: tp,
            hidden_positives: hidden_pos,
            hidden_total,
            precision: (pseudo > 0).then(|| tp as f64 / pseudo as f64),
            recall: (hidden_pos > 0).then(|| tp as f64 / hidden_pos as f64),
        }
    }
}

/// Scores generated positives against the withheld full labels, counting
/// only positions that were unknown in `known`.
pub fn pseudo_quality(
    pseudo: &[PseudoLabelVector],
    full_labels: &[Vec<i8>],
    known: &[PartialLabelVector],
) -> Result<PseudoQuality> {
    if pseudo.len() != full_labels.len() || pseudo.len() != known.len() {
        return Err(Error::invalid("pseudo_quality inputs differ in length"));
    }
    let (mut n_pseudo, mut tp, mut hidden_pos, mut hidden_total) = (0, 0, 0, 0);
    for ((p, full), y) in pseudo.iter().zip(full_labels).zip(known) {
        for c in 0..full.len() {
            if y.is_known(c) {
                continue;
            }
            hidden_total += 1;
            let truth = full[c] == 1;
            hidden_pos += truth as usize;
            if p.get(c) == 1 {
                n_pseudo += 1;
                tp += truth as usize;
            }
        }
    }
    Ok(PseudoQuality::from_counts(n_pseudo, tp, hidden_pos, hidden_total))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[1, 1, -1]), Some(1.0));
        let ap = average_precision(&[0.9, 0.8, 0.1], &[1, -1, 1]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[0.3], &[1]), Some(1.0));
        assert_eq!(average_precision(&[0.3, 0.2], &[-1, -1]), None);
    }

    #[test]
    fn ties_keep_input_order() {
        // equal scores: the earlier negative ranks first
        let ap = average_precision(&[0.5, 0.5], &[-1, 1]).unwrap();
        assert_eq!(ap, 0.5);
        let ap = average_precision(&[0.5, 0.5], &[1, -1]).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn perfect_classifier_scores_one() {
        let gt = vec![vec![1, -1], vec![-1, 1], vec![1, 1]];
        let scores: Vec<Vec<f64>> = gt
            .iter()
            .map(|r| r.iter().map(|&g| if g == 1 { 0.9 } else { 0.1 }).collect())
            .collect();
        let r = classification_metrics(&scores, &gt, 0.5).unwrap();
        assert_eq!(r.summary.values(), [1.0; 7]);
    }

    #[test]
    fn all_positive_predictions() {
        let gt = vec![vec![1, -1], vec![-1, -1], vec![1, 1]];
        let scores = vec![vec![0.9; 2]; 3];
        let r = classification_metrics(&scores, &gt, 0.5).unwrap();
        assert_eq!(r.summary.or, 1.0);
        assert!((r.summary.op - 3.0 / 6.0).abs() < 1e-15);
        assert!((r.summary.cp - (2.0 / 3.0 + 1.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_denominators_are_flagged() {
        let gt = vec![vec![1, -1], vec![-1, -1]];
        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.3]];
        let r = classification_metrics(&scores, &gt, 0.5).unwrap();
        assert_eq!(r.map_excluded, vec![1]);
        assert_eq!(r.cp_excluded, vec![1]);
        assert_eq!(r.cr_excluded, vec![1]);
        assert_eq!(r.summary.cp, 1.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(classification_metrics(&[vec![0.1]], &[vec![1], vec![-1]], 0.5).is_err());
        assert!(classification_metrics(&[vec![0.1, 0.2]], &[vec![1]], 0.5).is_err());
    }

    #[test]
    fn averaging() {
        let a = MetricSummary {
            map: 0.6,
            ..Default::default()
        };
        let b = MetricSummary {
            map: 0.8,
            ..Default::default()
        };
        let avg = average_over_proportions(&[(0.1, a), (0.2, b)]).unwrap();
        assert!((avg.map - 0.7).abs() < 1e-15);
        let same = average_over_proportions(&[(0.1, a), (0.5, a), (0.9, a)]).unwrap();
        assert_eq!(same, a);
        assert!(average_over_proportions(&[]).is_err());

        let grid: Vec<(f64, MetricSummary)> = (1..=9)
            .map(|k| {
                (
                    k as f64 / 10.0,
                    MetricSummary {
                        map: 0.5 + 0.03 * k as f64,
                        cf1: 0.1 * k as f64,
                        ..Default::default()
                    },
                )
            })
            .collect();
        let avg = average_over_proportions(&grid).unwrap();
        assert!((avg.map - 0.65).abs() < 1e-12);
        assert!((avg.cf1 - 0.5).abs() < 1e-12);
    }

    fn pl(v: &[i8]) -> PartialLabelVector {
        PartialLabelVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn pseudo_quality_counts() {
        let full = vec![vec![1, 1, -1], vec![1, -1, 1]];
        let known = vec![pl(&[1, 0, 0]), pl(&[0, -1, 0])];
        let exact = vec![pl(&[1, 1, 0]), pl(&[1, -1, 1])];
        let q = pseudo_quality(&exact, &full, &known).unwrap();
        assert_eq!((q.precision, q.recall), (Some(1.0), Some(1.0)));

        let q = pseudo_quality(&known, &full, &known).unwrap();
        assert_eq!(q.precision, None);
        assert_eq!(q.recall, Some(0.0));

        // 4 samples by hand: hidden positives 5, pseudo 4 of which 3 right
        let full = vec![vec![1, 1, -1], vec![-1, 1, 1], vec![1, -1, -1], vec![1, 1, 1]];
        let known = vec![pl(&[1, 0, 0]), pl(&[0, 0, 1]), pl(&[0, 0, -1]), pl(&[0, 1, 0])];
        let pseudo = vec![pl(&[1, 1, 1]), pl(&[0, 1, 1]), pl(&[1, 0, -1]), pl(&[0, 1, 0])];
        let q = pseudo_quality(&pseudo, &full, &known).unwrap();
        assert_eq!(q.pseudo_positives, 4);
        assert_eq!(q.true_positives, 3);
        assert_eq!(q.hidden_positives, 5);
        assert_eq!(q.hidden_total, 8);
        assert_eq!(q.precision, Some(0.75));
        assert_eq!(q.recall, Some(0.6));
    }
}
