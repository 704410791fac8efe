//! Threshold metrics, ROC analysis and box overlap.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confusion counts at one threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Counts {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn precision(&self) -> Rate {
        Rate::ratio(self.tp, self.tp + self.fp, "no positive predictions")
    }

    pub fn recall(&self) -> Rate {
        Rate::ratio(self.tp, self.tp + self.fn_, "no positive cases")
    }
}

/// A ratio that may be undefined because its denominator is zero.
#[derive(Clone, Debug, PartialEq)]
pub enum Rate {
    Defined(f64),
    Undefined(&'static str),
}

impl Rate {
    fn ratio(num: usize, den: usize, reason: &'static str) -> Self {
        if den == 0 {
            Rate::Undefined(reason)
        } else {
            Rate::Defined(num as f64 / den as f64)
        }
    }

    pub fn value(&self) -> Option<f64> {
        match *self {
            Rate::Defined(v) => Some(v),
            Rate::Undefined(_) => None,
        }
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rate::Defined(v) => write!(f, "{v:.4}"),
            Rate::Undefined(reason) => write!(f, "undefined ({reason})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrecisionRecall {
    pub precision: Rate,
    pub recall: Rate,
    pub counts: Counts,
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Metric(format!("label {bad} is not binary")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    Ok(())
}

/// Predicts positive when `score >= threshold`.
pub fn precision_recall(scores: &[f64], labels: &[u8], threshold: f64) -> Result<PrecisionRecall> {
    check_inputs(scores, labels)?;
    let mut counts = Counts::default();
    for (&s, &l) in scores.iter().zip(labels) {
        counts.add(s >= threshold, l == 1);
    }
    Ok(PrecisionRecall {
        precision: counts.precision(),
        recall: counts.recall(),
        counts,
    })
}

/// Distinct scores in descending order, each with the number of positives
/// and negatives holding it.
fn score_groups(scores: &[f64], labels: &[u8]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for i in order {
        let s = scores[i];
        let (pos, neg) = if labels[i] == 1 { (1, 0) } else { (0, 1) };
        match groups.last_mut() {
            Some(g) if g.0 == s => {
                g.1 += pos;
                g.2 += neg;
            }
            _ => groups.push((s, pos, neg)),
        }
    }
    groups
}

fn class_totals(labels: &[u8]) -> Result<(usize, usize)> {
    let p = labels.iter().filter(|&&l| l == 1).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::Metric(format!(
            "AUC undefined with {p} positives and {n} negatives"
        )));
    }
    Ok((p, n))
}

/// Mann–Whitney AUC: the fraction of positive/negative pairs ranked
/// correctly, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let (p, n) = class_totals(labels)?;
    // Twice the pair credit, kept integral: 2 per win, 1 per tie.
    let mut doubled: u128 = 0;
    let mut pos_above: u128 = 0;
    for (_, pos, neg) in score_groups(scores, labels) {
        doubled += 2 * pos_above * neg as u128 + (pos * neg) as u128;
        pos_above += pos as u128;
    }
    Ok(doubled as f64 / (2 * p * n) as f64)
}

/// `[fpr, tpr]` points from the strictest threshold to the loosest,
/// starting at `(0, 0)` and ending at `(1, 1)`; one point per distinct score.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<[f64; 2]>> {
    check_inputs(scores, labels)?;
    let (p, n) = class_totals(labels)?;
    let mut points = vec![[0.0, 0.0]];
    let (mut tp, mut fp) = (0, 0);
    for (_, pos, neg) in score_groups(scores, labels) {
        tp += pos;
        fp += neg;
        points.push([fp as f64 / n as f64, tp as f64 / p as f64]);
    }
    Ok(points)
}

/// Trapezoidal area under a polyline sorted by its first coordinate.
pub fn trapezoid(points: &[[f64; 2]]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1][0] - w[0][0]) * (w[1][1] + w[0][1]) / 2.0)
        .sum()
}

/// Intersection over union of half-open `[x0, y0, x1, y1]` boxes.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    for bx in [a, b] {
        if !(bx[0] < bx[2] && bx[1] < bx[3]) {
            return Err(Error::Metric(format!("degenerate box {bx:?}")));
        }
    }
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let area = |bx: [f64; 4]| (bx[2] - bx[0]) * (bx[3] - bx[1]);
    Ok(inter / (area(a) + area(b) - inter))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precision_recall_hand_cases() {
        let pr = precision_recall(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0], 0.5).unwrap();
        assert_eq!((pr.precision.value(), pr.recall.value()), (Some(1.0), Some(1.0)));
        let pr = precision_recall(&[1.0, 1.0, 1.0, 1.0, 0.0], &[1, 1, 1, 0, 1], 0.5).unwrap();
        assert_eq!(pr.counts, Counts { tp: 3, fp: 1, fn_: 1, tn: 0 });
        assert_eq!((pr.precision.value(), pr.recall.value()), (Some(0.75), Some(0.75)));
        let pr = precision_recall(&[0.1, 0.2], &[0, 0], 0.5).unwrap();
        assert!(matches!(pr.precision, Rate::Undefined(_)));
        assert!(precision_recall(&[0.1], &[2], 0.5).is_err());
        assert!(precision_recall(&[0.1], &[1, 0], 0.5).is_err());
    }

    #[test]
    fn auc_hand_cases() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 5], &[1, 0, 1, 0, 0]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.9, 0.4, 0.5], &[1, 1, 0]).unwrap(), 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn curve_integrates_to_auc() {
        let s = [0.3, 0.7, 0.7, 0.1, 0.5, 0.5, 0.9];
        let l = [0, 1, 0, 0, 1, 1, 0];
        let curve = roc_curve(&s, &l).unwrap();
        assert_eq!(curve.first(), Some(&[0.0, 0.0]));
        assert_eq!(curve.last(), Some(&[1.0, 1.0]));
        assert!((trapezoid(&curve) - roc_auc(&s, &l).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn iou_hand_cases() {
        let a = [0.0, 0.0, 2.0, 2.0];
        assert_eq!(iou(a, a).unwrap(), 1.0);
        assert_eq!(iou(a, [5.0, 5.0, 6.0, 6.0]).unwrap(), 0.0);
        assert_eq!(iou(a, [1.0, 0.0, 3.0, 2.0]).unwrap(), 1.0 / 3.0);
        assert_eq!(iou(a, [2.0, 0.0, 3.0, 2.0]).unwrap(), 0.0);
        assert!(iou(a, [1.0, 1.0, 1.0, 2.0]).is_err());
    }
}
