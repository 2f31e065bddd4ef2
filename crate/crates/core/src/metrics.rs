//! Classification metrics: confusion matrix, weighted P/R/F1, ROC/PR curves, AUC.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are the true class, columns the predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self { counts: vec![vec![0; k]; k] }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if k == 0 || counts.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("confusion matrix must be square and non-empty".into()));
        }
        Ok(Self { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn predicted(&self, i: usize) -> u64 {
        self.counts.iter().map(|r| r[i]).sum()
    }

    pub fn true_positives(&self, i: usize) -> u64 {
        self.counts[i][i]
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }
}

/// Tally `(truth, prediction)` pairs.
pub fn confusion(truth: &[usize], predicted: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::Shape(format!("{} labels vs {} predictions", truth.len(), predicted.len())));
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (&t, &p) in truth.iter().zip(predicted) {
        for l in [t, p] {
            if l >= k {
                return Err(Error::Label { label: l, classes: k });
            }
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub predicted: u64,
    /// One-vs-rest AUC, when scores were supplied and both outcomes occur.
    pub auc: Option<f64>,
    /// Never predicted: precision set to 0.
    pub no_predictions: bool,
    /// No true samples: recall set to 0.
    pub no_support: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassMetrics>,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub accuracy: f64,
    /// Support-weighted mean of the per-class AUCs that exist.
    pub weighted_auc: Option<f64>,
    /// Some class hit a zero-division case.
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-class and support-weighted metrics. The weighted recall is evaluated
/// as `sum(TP) / total`, which is algebraically the weighted mean of the
/// per-class recalls, so it is bit-identical to the accuracy.
pub fn weighted_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("confusion matrix is empty".into()));
    }
    let k = cm.classes();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|i| {
            let (tp, support, predicted) = (cm.true_positives(i), cm.support(i), cm.predicted(i));
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            ClassMetrics {
                precision,
                recall,
                f1: harmonic(precision, recall),
                support,
                predicted,
                auc: None,
                no_predictions: predicted == 0,
                no_support: support == 0,
            }
        })
        .collect();
    let weighted_precision =
        per_class.iter().map(|c| c.support as f64 * c.precision).sum::<f64>() / total as f64;
    let accuracy = ratio(cm.correct(), total);
    let weighted_recall = accuracy;
    Ok(MetricsReport {
        class_names: (0..k).map(|i| i.to_string()).collect(),
        confusion: cm.clone(),
        degenerate: per_class.iter().any(|c| c.no_predictions || c.no_support),
        per_class,
        weighted_precision,
        weighted_recall,
        weighted_f1: harmonic(weighted_precision, weighted_recall),
        accuracy,
        weighted_auc: None,
    })
}

/// Full report from per-sample class scores (`scores[n][k]`): predictions are
/// the arg-max, and per-class AUCs come from one-vs-rest ROC curves.
pub fn evaluate_scores(truth: &[usize], scores: &[Vec<f64>], class_names: &[&str]) -> Result<MetricsReport> {
    let k = class_names.len();
    if scores.len() != truth.len() || scores.iter().any(|s| s.len() != k) {
        return Err(Error::Shape(format!("expected {} score rows of width {}", truth.len(), k)));
    }
    let predicted: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
    let mut report = weighted_metrics(&confusion(truth, &predicted, k)?)?;
    report.class_names = class_names.iter().map(|s| s.to_string()).collect();
    let ovr = one_vs_rest(truth, k)?;
    let (mut num, mut den) = (0.0, 0.0);
    for c in 0..k {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        if let Ok(curve) = roc_curve(&s, &ovr[c]) {
            let a = auc(&curve)?;
            report.per_class[c].auc = Some(a);
            num += report.per_class[c].support as f64 * a;
            den += report.per_class[c].support as f64;
        }
    }
    report.weighted_auc = (den > 0.0).then(|| num / den);
    Ok(report)
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// Binary membership vector per class.
pub fn one_vs_rest(labels: &[usize], k: usize) -> Result<Vec<Vec<bool>>> {
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label { label: l, classes: k });
    }
    Ok((0..k).map(|c| labels.iter().map(|&l| l == c).collect()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CurveKind {
    Roc,
    Pr,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Scores `>= threshold` count as positive. Infinite for anchor points.
    pub threshold: f64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSeries {
    pub kind: CurveKind,
    pub points: Vec<CurvePoint>,
}

impl CurveSeries {
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "threshold,x,y")?;
        for p in &self.points {
            writeln!(w, "{},{},{}", p.threshold, p.x, p.y)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// Cumulative (threshold, true positives, false positives) after each
/// distinct score, highest first.
fn sweep(scores: &[f64], truth: &[bool]) -> Result<Vec<(f64, u64, u64)>> {
    if scores.len() != truth.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), truth.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut out = Vec::new();
    for (n, &i) in order.iter().enumerate() {
        if truth[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = order.get(n + 1).map_or(true, |&j| scores[j] != scores[i]);
        if last_of_group {
            out.push((scores[i], tp, fp));
        }
    }
    Ok(out)
}

/// `(FPR, TPR)` per distinct threshold, descending, starting at `(0, 0)` and
/// ending at `(1, 1)`.
pub fn roc_curve(scores: &[f64], truth: &[bool]) -> Result<CurveSeries> {
    let pos = truth.iter().filter(|&&t| t).count() as f64;
    let neg = truth.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::Data("ROC needs both positive and negative samples".into()));
    }
    let mut points = vec![CurvePoint { threshold: f64::INFINITY, x: 0.0, y: 0.0 }];
    for (t, tp, fp) in sweep(scores, truth)? {
        points.push(CurvePoint { threshold: t, x: fp as f64 / neg, y: tp as f64 / pos });
    }
    Ok(CurveSeries { kind: CurveKind::Roc, points })
}

/// Trapezoidal area under a ROC curve.
pub fn auc(curve: &CurveSeries) -> Result<f64> {
    if curve.kind != CurveKind::Roc || curve.points.len() < 2 {
        return Err(Error::Data("AUC needs a ROC curve with at least two points".into()));
    }
    Ok(curve.points.windows(2).map(|w| (w[1].x - w[0].x) * (w[1].y + w[0].y) / 2.0).sum())
}

/// `(recall, precision)` per distinct threshold, descending, preceded by the
/// anchor `(0, precision of the top-ranked group)`.
pub fn pr_curve(scores: &[f64], truth: &[bool]) -> Result<CurveSeries> {
    let pos = truth.iter().filter(|&&t| t).count() as f64;
    if pos == 0.0 {
        return Err(Error::Data("PR curve needs at least one positive sample".into()));
    }
    let steps = sweep(scores, truth)?;
    let precision = |tp: u64, fp: u64| tp as f64 / (tp + fp) as f64;
    let mut points = Vec::with_capacity(steps.len() + 1);
    if let Some(&(_, tp, fp)) = steps.first() {
        points.push(CurvePoint { threshold: f64::INFINITY, x: 0.0, y: precision(tp, fp) });
    }
    for (t, tp, fp) in steps {
        points.push(CurvePoint { threshold: t, x: tp as f64 / pos, y: precision(tp, fp) });
    }
    Ok(CurveSeries { kind: CurveKind::Pr, points })
}
