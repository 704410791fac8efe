//! Held-out evaluation: per-pathology detection table, ROC curves, and
//! keyword coverage of generated reports.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use rayon::prelude::*;

use crate::corpus::{Case, Pathology, N_PATHOLOGIES};
use crate::encoders::encode_image;
use crate::error::{Error, Result};
use crate::fusion::{generate_report, predict_detections, Strategy};
use crate::metrics::{iou, precision_recall, roc_auc, roc_curve, trapezoid, Counts, Rate};
use crate::model::Model;
use crate::nn::Graph;
use crate::tensor::sigmoid;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const CSV_HEADER: &str = "pathology,precision,recall,auc,mean_iou,tp,fp,fn,tn";

/// Detection-head output for one case, in plain numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub presence_logits: [f64; N_PATHOLOGIES],
    /// Normalized `(x0, y0, x1, y1)` per pathology.
    pub boxes: [[f64; 4]; N_PATHOLOGIES],
}

pub fn predict(model: &Model, case: &Case) -> Result<Prediction> {
    let mut g = Graph::new(&model.params, false);
    let visual = encode_image(&mut g, &model.layout.visual, &case.image, None)?;
    let out = predict_detections(&mut g, &model.layout.detect, &visual)?;
    let logits = g.value(out.presence_logits).data();
    let boxes = g.value(out.boxes);
    Ok(Prediction {
        presence_logits: std::array::from_fn(|p| logits[p]),
        boxes: std::array::from_fn(|p| std::array::from_fn(|k| boxes.at(p, k))),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathologyRow {
    pub pathology: Pathology,
    pub precision: Rate,
    pub recall: Rate,
    pub auc: Rate,
    /// Mean IoU over cases where the pathology is present and predicted.
    pub mean_iou: Rate,
    pub counts: Counts,
    pub n_present: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MacroRow {
    pub precision: Rate,
    pub recall: Rate,
    pub auc: Rate,
    pub mean_iou: Rate,
    pub counts: Counts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub threshold: f64,
    pub n_cases: usize,
    pub rows: Vec<PathologyRow>,
    pub macro_row: MacroRow,
    /// `[fpr, tpr]` staircases for pathologies with both classes present.
    pub roc: BTreeMap<String, Vec<[f64; 2]>>,
}

fn macro_mean(values: impl Iterator<Item = Rate>) -> Rate {
    let defined: Vec<f64> = values.filter_map(|r| r.value()).collect();
    if defined.is_empty() {
        Rate::Undefined("no pathology defines this metric")
    } else {
        Rate::Defined(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Scores `predictions[i]` against `cases[i]`.
pub fn evaluate_predictions(cases: &[Case], predictions: &[Prediction], threshold: f64) -> Result<EvalReport> {
    if cases.len() != predictions.len() {
        return Err(Error::Metric(format!(
            "{} cases but {} predictions",
            cases.len(),
            predictions.len()
        )));
    }
    if cases.is_empty() {
        return Err(Error::Metric("evaluation set is empty".into()));
    }
    let mut rows = Vec::with_capacity(N_PATHOLOGIES);
    let mut roc = BTreeMap::new();
    for p in Pathology::ALL {
        let k = p.code();
        let logits: Vec<f64> = predictions.iter().map(|x| x.presence_logits[k]).collect();
        let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        let labels: Vec<u8> = cases.iter().map(|c| c.labels[k]).collect();
        let pr = precision_recall(&probs, &labels, threshold)?;
        let auc = match roc_auc(&logits, &labels) {
            Ok(a) => {
                roc.insert(p.label().to_string(), roc_curve(&logits, &labels)?);
                Rate::Defined(a)
            }
            Err(_) => Rate::Undefined("only one class present"),
        };
        let mut ious = Vec::new();
        for ((case, pred), &prob) in cases.iter().zip(predictions).zip(&probs) {
            if prob < threshold {
                continue;
            }
            if let Some(truth) = case.normalized_box(p) {
                ious.push(iou(pred.boxes[k], truth)?);
            }
        }
        let mean_iou = if ious.is_empty() {
            Rate::Undefined("no true positives")
        } else {
            Rate::Defined(ious.iter().sum::<f64>() / ious.len() as f64)
        };
        rows.push(PathologyRow {
            pathology: p,
            precision: pr.precision,
            recall: pr.recall,
            auc,
            mean_iou,
            counts: pr.counts,
            n_present: labels.iter().filter(|&&l| l == 1).count(),
        });
    }
    let mut counts = Counts::default();
    for r in &rows {
        counts.tp += r.counts.tp;
        counts.fp += r.counts.fp;
        counts.fn_ += r.counts.fn_;
        counts.tn += r.counts.tn;
    }
    let macro_row = MacroRow {
        precision: macro_mean(rows.iter().map(|r| r.precision.clone())),
        recall: macro_mean(rows.iter().map(|r| r.recall.clone())),
        auc: macro_mean(rows.iter().map(|r| r.auc.clone())),
        mean_iou: macro_mean(rows.iter().map(|r| r.mean_iou.clone())),
        counts,
    };
    Ok(EvalReport {
        threshold,
        n_cases: cases.len(),
        rows,
        macro_row,
        roc,
    })
}

pub fn evaluate_model(model: &Model, cases: &[Case], threshold: f64) -> Result<EvalReport> {
    let predictions: Vec<Prediction> = cases.par_iter().map(|c| predict(model, c)).collect::<Result<_>>()?;
    evaluate_predictions(cases, &predictions, threshold)
}

fn cell(r: &Rate) -> String {
    match r.value() {
        Some(v) => format!("{v:.4}"),
        None => "NA".to_string(),
    }
}

impl EvalReport {
    /// One row per pathology plus a trailing `macro` row; undefined values
    /// are written as `NA`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let mut line = |name: &str, p: &Rate, r: &Rate, a: &Rate, i: &Rate, c: &Counts| {
            let _ = writeln!(
                out,
                "{name},{},{},{},{},{},{},{},{}",
                cell(p),
                cell(r),
                cell(a),
                cell(i),
                c.tp,
                c.fp,
                c.fn_,
                c.tn
            );
        };
        for row in &self.rows {
            line(
                row.pathology.label(),
                &row.precision,
                &row.recall,
                &row.auc,
                &row.mean_iou,
                &row.counts,
            );
        }
        let m = &self.macro_row;
        line("macro", &m.precision, &m.recall, &m.auc, &m.mean_iou, &m.counts);
        out
    }

    pub fn roc_json(&self) -> String {
        serde_json::to_string_pretty(&self.roc).expect("plain numbers serialize")
    }

    pub fn row(&self, p: Pathology) -> &PathologyRow {
        &self.rows[p.code()]
    }

    /// Largest gap between a curve's trapezoid area and its reported AUC.
    pub fn roc_auc_gap(&self) -> f64 {
        self.rows
            .iter()
            .filter_map(|r| {
                let curve = self.roc.get(r.pathology.label())?;
                Some((trapezoid(curve) - r.auc.value()?).abs())
            })
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<18} {:>9} {:>9} {:>9} {:>9} {:>6} {:>6} {:>6} {:>6}",
            "pathology", "precision", "recall", "auc", "mean_iou", "tp", "fp", "fn", "tn"
        )?;
        let line = |f: &mut fmt::Formatter<'_>, name: &str, p: &Rate, r: &Rate, a: &Rate, i: &Rate, c: &Counts| {
            writeln!(
                f,
                "{name:<18} {:>9} {:>9} {:>9} {:>9} {:>6} {:>6} {:>6} {:>6}",
                cell(p),
                cell(r),
                cell(a),
                cell(i),
                c.tp,
                c.fp,
                c.fn_,
                c.tn
            )
        };
        for row in &self.rows {
            line(
                f,
                row.pathology.label(),
                &row.precision,
                &row.recall,
                &row.auc,
                &row.mean_iou,
                &row.counts,
            )?;
        }
        let m = &self.macro_row;
        line(f, "macro", &m.precision, &m.recall, &m.auc, &m.mean_iou, &m.counts)?;
        writeln!(f)?;
        writeln!(
            f,
            "{} cases, threshold {}. mean_iou averages true positives only.",
            self.n_cases, self.threshold
        )?;
        for row in &self.rows {
            for (name, rate) in [
                ("precision", &row.precision),
                ("recall", &row.recall),
                ("auc", &row.auc),
                ("mean_iou", &row.mean_iou),
            ] {
                if let Rate::Undefined(reason) = rate {
                    writeln!(f, "{} {name}: NA, {reason}", row.pathology.label())?;
                }
            }
        }
        Ok(())
    }
}

/// Macro AUC and mean IoU, for progress logging during fine-tuning.
pub fn quick_detection_summary(model: &Model, cases: &[Case]) -> Result<BTreeMap<String, f64>> {
    let report = evaluate_model(model, cases, DEFAULT_THRESHOLD)?;
    let mut out = BTreeMap::new();
    if let Some(a) = report.macro_row.auc.value() {
        out.insert("macro_auc".to_string(), a);
    }
    if let Some(i) = report.macro_row.mean_iou.value() {
        out.insert("mean_iou".to_string(), i);
    }
    Ok(out)
}

/// Greedy report for a case, conditioned on its symptom sentence only.
pub fn generate_case_report(model: &Model, case: &Case, strategy: Strategy) -> Result<String> {
    let prompt = model.vocab.tokenize(case.prompt(), model.config.l_max);
    let ids = generate_report(model, &case.image, &prompt, model.config.l_max - 1, strategy)?;
    Ok(model.vocab.detokenize(&ids))
}

/// Whether `report` mentions every pathology present in `case`.
pub fn names_all_present(report: &str, case: &Case) -> bool {
    let padded = format!(" {report} ");
    Pathology::ALL
        .iter()
        .filter(|p| case.labels[p.code()] == 1)
        .all(|p| padded.contains(&format!(" {} ", p.phrase())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportCoverage {
    pub cases: usize,
    pub cases_with_findings: usize,
    /// Cases with findings whose report names every present pathology.
    pub fully_named: usize,
    /// Cases whose report equals the normalized findings text.
    pub exact: usize,
}

impl ReportCoverage {
    pub fn rate(&self) -> f64 {
        if self.cases_with_findings == 0 {
            return 1.0;
        }
        self.fully_named as f64 / self.cases_with_findings as f64
    }
}

pub fn report_coverage(model: &Model, cases: &[Case]) -> Result<ReportCoverage> {
    let reports: Vec<String> = cases
        .par_iter()
        .map(|c| generate_case_report(model, c, Strategy::Greedy))
        .collect::<Result<_>>()?;
    let mut cov = ReportCoverage {
        cases: cases.len(),
        cases_with_findings: 0,
        fully_named: 0,
        exact: 0,
    };
    for (c, r) in cases.iter().zip(&reports) {
        if c.labels.iter().any(|&l| l == 1) {
            cov.cases_with_findings += 1;
            cov.fully_named += usize::from(names_all_present(r, c));
        }
        let truth = crate::text::normalize(&c.findings()).join(" ");
        cov.exact += usize::from(*r == truth);
    }
    Ok(cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_case, CorpusConfig};

    fn oracle(cases: &[Case]) -> Vec<Prediction> {
        cases
            .iter()
            .map(|c| Prediction {
                presence_logits: std::array::from_fn(|p| if c.labels[p] == 1 { 8.0 } else { -8.0 }),
                boxes: std::array::from_fn(|p| {
                    c.normalized_box(Pathology::from_code(p).unwrap())
                        .unwrap_or([0.0, 0.0, 0.5, 0.5])
                }),
            })
            .collect()
    }

    #[test]
    fn oracle_scores_perfectly() {
        let cfg = CorpusConfig {
            prevalence: [0.5; N_PATHOLOGIES],
            ..CorpusConfig::default()
        };
        let cases: Vec<Case> = (0..40).map(|s| generate_case(s, &cfg).unwrap()).collect();
        let report = evaluate_predictions(&cases, &oracle(&cases), DEFAULT_THRESHOLD).unwrap();
        for row in &report.rows {
            assert_eq!(row.precision.value(), Some(1.0));
            assert_eq!(row.recall.value(), Some(1.0));
            assert_eq!(row.auc.value(), Some(1.0));
            assert_eq!(row.mean_iou.value(), Some(1.0));
        }
        let csv = report.to_csv();
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), N_PATHOLOGIES + 2);
        assert!(csv.lines().nth(1).unwrap().starts_with("Consolidation,1.0000,1.0000,1.0000,1.0000,"));
    }

    #[test]
    fn keyword_match_needs_whole_words() {
        let cfg = CorpusConfig {
            prevalence: [1.0; N_PATHOLOGIES],
            ..CorpusConfig::default()
        };
        let case = generate_case(1, &cfg).unwrap();
        let full = crate::text::normalize(&case.findings()).join(" ");
        assert!(names_all_present(&full, &case));
        assert!(!names_all_present("consolidation in right lower zone", &case));
    }
}
