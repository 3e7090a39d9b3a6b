//! Classification metrics, one-vs-rest ROC/AUC, cross-fold aggregates and
//! report rendering.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plot;
use crate::taxonomy::ChallengeCategory;

const N: usize = ChallengeCategory::ALL.len();

pub type Confusion = [[u64; N]; N];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{actual} actual labels but {predicted} predictions")]
    LengthMismatch { actual: usize, predicted: usize },
    #[error("negative count {value} at ({row}, {col})")]
    NegativeCount { row: usize, col: usize, value: i64 },
    #[error("label index {0} out of range")]
    BadLabel(usize),
    #[error("probability row {row} sums to {sum}")]
    NotAProbability { row: usize, sum: f64 },
    #[error("nothing to evaluate")]
    Empty,
    #[error("report CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when a zero denominator forced a 0.
    pub degenerate: bool,
}

/// Rows are actual labels, columns predicted.
pub fn confusion_matrix(actual: &[usize], predicted: &[usize]) -> Result<Confusion, EvalError> {
    if actual.len() != predicted.len() {
        return Err(EvalError::LengthMismatch {
            actual: actual.len(),
            predicted: predicted.len(),
        });
    }
    let mut m = [[0u64; N]; N];
    for (&a, &p) in actual.iter().zip(predicted) {
        if a >= N {
            return Err(EvalError::BadLabel(a));
        }
        if p >= N {
            return Err(EvalError::BadLabel(p));
        }
        m[a][p] += 1;
    }
    Ok(m)
}

/// Converts a signed matrix, rejecting negative counts.
pub fn confusion_from_signed(m: &[[i64; N]; N]) -> Result<Confusion, EvalError> {
    let mut out = [[0u64; N]; N];
    for (r, row) in m.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            if v < 0 {
                return Err(EvalError::NegativeCount { row: r, col: c, value: v });
            }
            out[r][c] = v as u64;
        }
    }
    Ok(out)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Per-class precision, recall and F1; a zero denominator yields 0 and sets `degenerate`.
pub fn precision_recall_f1(m: &Confusion) -> [ClassMetrics; N] {
    std::array::from_fn(|k| {
        let tp = m[k][k];
        let predicted: u64 = (0..N).map(|r| m[r][k]).sum();
        let support: u64 = m[k].iter().sum();
        let p = ratio(tp, predicted);
        let r = ratio(tp, support);
        let mut degenerate = p.is_none() || r.is_none();
        let (p, r) = (p.unwrap_or(0.0), r.unwrap_or(0.0));
        let f1 = if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            degenerate = true;
            0.0
        };
        ClassMetrics {
            precision: p,
            recall: r,
            f1,
            support,
            degenerate,
        }
    })
}

pub fn accuracy(m: &Confusion) -> f64 {
    let total: u64 = m.iter().flatten().sum();
    let trace: u64 = (0..N).map(|i| m[i][i]).sum();
    if total == 0 {
        0.0
    } else {
        trace as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// Exact ROC curve: one point per distinct score, highest first, starting at (0, 0).
pub fn roc_curve(positive: &[bool], scores: &[f64]) -> Vec<RocPoint> {
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let n_neg = positive.len() as f64 - n_pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: if n_neg > 0.0 { fp / n_neg } else { 0.0 },
            tpr: if n_pos > 0.0 { tp / n_pos } else { 0.0 },
            threshold: s,
        });
    }
    points
}

/// Trapezoidal area under a ROC curve.
pub fn auc(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRoc {
    pub points: Vec<RocPoint>,
    /// `None` when the class has no positives or no negatives.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocReport {
    pub per_class: BTreeMap<ChallengeCategory, ClassRoc>,
    /// Unweighted mean over classes with a defined AUC.
    pub macro_auc: Option<f64>,
    /// Classes left out of the macro average.
    pub undefined: Vec<ChallengeCategory>,
}

fn check_probs(probs: &[[f64; N]]) -> Result<(), EvalError> {
    for (row, p) in probs.iter().enumerate() {
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(EvalError::NotAProbability { row, sum });
        }
    }
    Ok(())
}

/// One-vs-rest ROC per class.
pub fn roc_auc(actual: &[usize], probs: &[[f64; N]]) -> Result<RocReport, EvalError> {
    if actual.len() != probs.len() {
        return Err(EvalError::LengthMismatch {
            actual: actual.len(),
            predicted: probs.len(),
        });
    }
    if let Some(&bad) = actual.iter().find(|&&a| a >= N) {
        return Err(EvalError::BadLabel(bad));
    }
    check_probs(probs)?;
    let mut per_class = BTreeMap::new();
    let mut undefined = Vec::new();
    let mut defined = Vec::new();
    for c in ChallengeCategory::ALL {
        let positive: Vec<bool> = actual.iter().map(|&a| a == c.index()).collect();
        let scores: Vec<f64> = probs.iter().map(|p| p[c.index()]).collect();
        let points = roc_curve(&positive, &scores);
        let n_pos = positive.iter().filter(|&&p| p).count();
        let auc = (n_pos > 0 && n_pos < positive.len()).then(|| auc(&points));
        match auc {
            Some(a) => defined.push(a),
            None => undefined.push(c),
        }
        per_class.insert(c, ClassRoc { points, auc });
    }
    let macro_auc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(RocReport {
        per_class,
        macro_auc,
        undefined,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: BTreeMap<ChallengeCategory, ClassMetrics>,
    pub overall_accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub confusion: Confusion,
    pub roc: Option<RocReport>,
}

impl EvalReport {
    pub fn from_confusion(confusion: Confusion) -> Self {
        let metrics = precision_recall_f1(&confusion);
        let total: u64 = metrics.iter().map(|m| m.support).sum();
        let mean = |f: fn(&ClassMetrics) -> f64| metrics.iter().map(f).sum::<f64>() / N as f64;
        let weighted_f1 = if total == 0 {
            0.0
        } else {
            metrics.iter().map(|m| m.f1 * m.support as f64).sum::<f64>() / total as f64
        };
        EvalReport {
            per_class: ChallengeCategory::ALL.iter().map(|&c| (c, metrics[c.index()])).collect(),
            overall_accuracy: accuracy(&confusion),
            macro_precision: mean(|m| m.precision),
            macro_recall: mean(|m| m.recall),
            macro_f1: mean(|m| m.f1),
            weighted_f1,
            confusion,
            roc: None,
        }
    }

    /// Full report from labels and probability rows; predictions are the argmax.
    pub fn from_probabilities(actual: &[usize], probs: &[[f64; N]]) -> Result<Self, EvalError> {
        if actual.is_empty() {
            return Err(EvalError::Empty);
        }
        let predicted: Vec<usize> = probs.iter().map(argmax).collect();
        let mut report = Self::from_confusion(confusion_matrix(actual, &predicted)?);
        report.roc = Some(roc_auc(actual, probs)?);
        Ok(report)
    }

    pub fn macro_auc(&self) -> Option<f64> {
        self.roc.as_ref().and_then(|r| r.macro_auc)
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("class,precision,recall,f1,support\n");
        for (c, m) in &self.per_class {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{}\n",
                c.name(),
                m.precision,
                m.recall,
                m.f1,
                m.support
            ));
        }
        out
    }

    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("actual\\predicted");
        for c in ChallengeCategory::ALL {
            out.push_str(&format!(",{}", c.name()));
        }
        out.push('\n');
        for c in ChallengeCategory::ALL {
            out.push_str(c.name());
            for v in self.confusion[c.index()] {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    /// Markdown table with one row per class (concept, classifier, P, R, F1).
    pub fn markdown(&self, classifier: &str) -> String {
        let mut out = String::from("| Concept | Classifier | Precision | Recall | F1 | Support |\n");
        out.push_str("|---|---|---|---|---|---|\n");
        for (c, m) in &self.per_class {
            let flag = if m.degenerate { " (degenerate)" } else { "" };
            out.push_str(&format!(
                "| {}{} | {} | {:.2} | {:.2} | {:.2} | {} |\n",
                c.name(),
                flag,
                classifier,
                m.precision,
                m.recall,
                m.f1,
                m.support
            ));
        }
        out.push_str(&format!("\nOverall accuracy: {:.2}\n", self.overall_accuracy));
        out.push_str(&format!("Macro F1: {:.2}\n", self.macro_f1));
        out.push_str(&format!("Weighted F1: {:.2}\n", self.weighted_f1));
        if let Some(roc) = &self.roc {
            match roc.macro_auc {
                Some(a) => out.push_str(&format!("Macro AUC: {a:.4}\n")),
                None => out.push_str("Macro AUC: undefined\n"),
            }
            for c in &roc.undefined {
                out.push_str(&format!("AUC undefined for {c} (no positives or no negatives)\n"));
            }
        }
        out
    }

    /// Writes metrics.csv, confusion.csv, roc_<class>.csv, report.md and SVG plots.
    pub fn render(&self, outdir: impl AsRef<Path>, classifier: &str) -> Result<(), EvalError> {
        let outdir = outdir.as_ref();
        std::fs::create_dir_all(outdir)?;
        std::fs::write(outdir.join("metrics.csv"), self.metrics_csv())?;
        std::fs::write(outdir.join("confusion.csv"), self.confusion_csv())?;
        std::fs::write(outdir.join("report.md"), self.markdown(classifier))?;
        let labels: Vec<String> = ChallengeCategory::ALL.iter().map(|c| c.index().to_string()).collect();
        let cells: Vec<Vec<f64>> = self
            .confusion
            .iter()
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect();
        std::fs::write(
            outdir.join("confusion.svg"),
            plot::heatmap("Confusion matrix (rows: actual)", &labels, &cells),
        )?;
        if let Some(roc) = &self.roc {
            let mut series = Vec::new();
            for (c, r) in &roc.per_class {
                let mut csv = String::from("fpr,tpr,threshold\n");
                for p in &r.points {
                    csv.push_str(&format!("{:.6},{:.6},{}\n", p.fpr, p.tpr, p.threshold));
                }
                std::fs::write(outdir.join(format!("roc_{}.csv", c.slug())), csv)?;
                let label = match r.auc {
                    Some(a) => format!("{} (AUC {a:.3})", c.name()),
                    None => format!("{} (undefined)", c.name()),
                };
                series.push((label, r.points.iter().map(|p| (p.fpr, p.tpr)).collect()));
            }
            std::fs::write(
                outdir.join("roc.svg"),
                plot::line_chart("One-vs-rest ROC", "False positive rate", "True positive rate", &series, true),
            )?;
        }
        Ok(())
    }
}

/// Parses a metrics.csv written by [`EvalReport::metrics_csv`].
pub fn read_metrics_csv(text: &str) -> Result<BTreeMap<ChallengeCategory, (f64, f64, f64, u64)>, EvalError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut out = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| EvalError::Csv(e.to_string()))?;
        let bad = || EvalError::Csv(format!("bad row {row:?}"));
        let c: ChallengeCategory = row.get(0).ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let f = |i: usize| row.get(i).and_then(|v| v.parse::<f64>().ok()).ok_or_else(bad);
        let support = row.get(4).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        out.insert(c, (f(1)?, f(2)?, f(3)?, support));
    }
    Ok(out)
}

pub fn argmax(p: &[f64; N]) -> usize {
    let mut best = 0;
    for i in 1..N {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation (n - 1); 0 for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossFoldSummary {
    pub folds: usize,
    pub accuracy: MeanStd,
    pub macro_f1: MeanStd,
    pub macro_auc: Option<MeanStd>,
    pub per_class_f1: BTreeMap<ChallengeCategory, MeanStd>,
}

pub fn aggregate(reports: &[EvalReport]) -> Result<CrossFoldSummary, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::Empty);
    }
    let collect = |f: &dyn Fn(&EvalReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    let aucs: Vec<f64> = reports.iter().filter_map(EvalReport::macro_auc).collect();
    Ok(CrossFoldSummary {
        folds: reports.len(),
        accuracy: collect(&|r| r.overall_accuracy),
        macro_f1: collect(&|r| r.macro_f1),
        macro_auc: (aucs.len() == reports.len()).then(|| MeanStd::of(&aucs)),
        per_class_f1: ChallengeCategory::ALL
            .iter()
            .map(|&c| (c, collect(&|r| r.per_class[&c].f1)))
            .collect(),
    })
}

impl CrossFoldSummary {
    pub fn markdown(&self) -> String {
        let mut out = format!("Cross-validation over {} folds (mean ± std)\n\n", self.folds);
        out.push_str(&format!("- accuracy: {:.4} ± {:.4}\n", self.accuracy.mean, self.accuracy.std));
        out.push_str(&format!("- macro F1: {:.4} ± {:.4}\n", self.macro_f1.mean, self.macro_f1.std));
        if let Some(a) = self.macro_auc {
            out.push_str(&format!("- macro AUC: {:.4} ± {:.4}\n", a.mean, a.std));
        }
        for (c, m) in &self.per_class_f1 {
            out.push_str(&format!("- F1 {}: {:.4} ± {:.4}\n", c.name(), m.mean, m.std));
        }
        out
    }
}
