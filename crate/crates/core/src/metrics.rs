//! Frame-based evaluation: thresholded detection, micro/macro F-scores and
//! micro/macro ROC AUC.

use std::cmp::Ordering;

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::grid::{ensure_same_shape, LabelGrid, PredictionGrid};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl EvalConfig {
    pub fn new(threshold: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::Validation(format!(
                "detection threshold must lie in [0, 1], got {threshold}"
            )));
        }
        Ok(Self { threshold })
    }
}

/// Active where the score reaches the threshold (`y >= threshold`).
pub fn predict_labels(y: &PredictionGrid, threshold: f64) -> LabelGrid {
    let mut out = Array2::zeros(y.shape());
    Zip::from(&mut out)
        .and(y.values())
        .for_each(|o, &v| *o = u8::from(v >= threshold));
    LabelGrid::new(out).expect("binary by construction")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// `2 TP / (2 TP + FP + FN)`, or 0 when the denominator is zero.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn add(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub per_class: Vec<Confusion>,
    pub pooled: Confusion,
}

fn check_aligned(a: &[(usize, usize)], b: &[(usize, usize)]) -> Result<usize> {
    if a.is_empty() {
        return Err(Error::Validation(
            "evaluation needs at least one clip".into(),
        ));
    }
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{} clips vs {} clips",
            a.len(),
            b.len()
        )));
    }
    let classes = a[0].1;
    for (x, y) in a.iter().zip(b) {
        ensure_same_shape(*x, *y)?;
        if x.1 != classes {
            return Err(Error::Shape(format!(
                "clips mix {classes} and {} classes",
                x.1
            )));
        }
    }
    Ok(classes)
}

pub fn confusion_counts(pred: &[LabelGrid], z: &[LabelGrid]) -> Result<ConfusionCounts> {
    let shapes = |g: &[LabelGrid]| g.iter().map(LabelGrid::shape).collect::<Vec<_>>();
    let classes = check_aligned(&shapes(pred), &shapes(z))?;
    let mut per_class = vec![Confusion::default(); classes];
    for (p, t) in pred.iter().zip(z) {
        for (prow, trow) in p.values().rows().into_iter().zip(t.values().rows()) {
            for ((c, &pv), &tv) in per_class.iter_mut().zip(prow).zip(trow) {
                match (pv == 1, tv == 1) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fp += 1,
                    (false, true) => c.fn_ += 1,
                    (false, false) => c.tn += 1,
                }
            }
        }
    }
    let mut pooled = Confusion::default();
    for c in &per_class {
        pooled.add(c);
    }
    Ok(ConfusionCounts { per_class, pooled })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FScores {
    pub micro: f64,
    pub macro_: f64,
    pub per_class: Vec<f64>,
    pub confusion: ConfusionCounts,
}

/// Micro F on pooled counts; macro F as the unweighted mean of per-class F,
/// where a class with no positives at all scores 0.
pub fn fscores(pred: &[LabelGrid], z: &[LabelGrid]) -> Result<FScores> {
    let confusion = confusion_counts(pred, z)?;
    let per_class: Vec<f64> = confusion.per_class.iter().map(Confusion::f1).collect();
    let macro_ = per_class.iter().sum::<f64>() / per_class.len() as f64;
    Ok(FScores {
        micro: confusion.pooled.f1(),
        macro_,
        per_class,
        confusion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AucMode {
    Micro,
    Macro,
}

/// Mann-Whitney AUC over `(score, is_positive)` pairs, ties counted as half.
/// `None` when either side is empty.
pub fn auc_from_pairs(pairs: &mut [(f64, bool)]) -> Option<f64> {
    pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    let positives = pairs.iter().filter(|p| p.1).count();
    let negatives = pairs.len() - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    // sum of 1-based average ranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i + 1;
        while j < pairs.len() && pairs[j].0.total_cmp(&pairs[i].0) == Ordering::Equal {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = pairs[i..j].iter().filter(|p| p.1).count();
        rank_sum += avg_rank * pos_in_group as f64;
        i = j;
    }
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Some(u / (p * negatives as f64))
}

fn class_pairs(y: &[PredictionGrid], z: &[LabelGrid], class: usize) -> Vec<(f64, bool)> {
    let mut pairs = Vec::new();
    for (yc, zc) in y.iter().zip(z) {
        pairs.extend(
            yc.values()
                .column(class)
                .iter()
                .zip(zc.values().column(class))
                .map(|(&s, &l)| (s, l == 1)),
        );
    }
    pairs
}

/// Per-class AUCs; `None` for classes lacking positives or negatives.
pub fn per_class_auc(y: &[PredictionGrid], z: &[LabelGrid]) -> Result<Vec<Option<f64>>> {
    let ys: Vec<_> = y.iter().map(PredictionGrid::shape).collect();
    let zs: Vec<_> = z.iter().map(LabelGrid::shape).collect();
    let classes = check_aligned(&ys, &zs)?;
    Ok((0..classes)
        .map(|m| auc_from_pairs(&mut class_pairs(y, z, m)))
        .collect())
}

pub fn roc_auc(y: &[PredictionGrid], z: &[LabelGrid], mode: AucMode) -> Result<f64> {
    let ys: Vec<_> = y.iter().map(PredictionGrid::shape).collect();
    let zs: Vec<_> = z.iter().map(LabelGrid::shape).collect();
    check_aligned(&ys, &zs)?;
    match mode {
        AucMode::Micro => {
            let mut pairs: Vec<(f64, bool)> = y
                .iter()
                .zip(z)
                .flat_map(|(yc, zc)| {
                    yc.values()
                        .iter()
                        .zip(zc.values().iter())
                        .map(|(&s, &l)| (s, l == 1))
                        .collect::<Vec<_>>()
                })
                .collect();
            auc_from_pairs(&mut pairs).ok_or_else(|| {
                Error::Validation("micro AUC needs at least one positive and one negative".into())
            })
        }
        AucMode::Macro => {
            let valid: Vec<f64> = per_class_auc(y, z)?.into_iter().flatten().collect();
            if valid.is_empty() {
                return Err(Error::Validation(
                    "macro AUC needs a class with both positives and negatives".into(),
                ));
            }
            Ok(valid.iter().sum::<f64>() / valid.len() as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub micro_f: f64,
    pub macro_f: f64,
    pub micro_auc: f64,
    pub macro_auc: f64,
    pub per_class_f: Vec<f64>,
    pub confusion: ConfusionCounts,
}

pub fn evaluate(y: &[PredictionGrid], z: &[LabelGrid], cfg: &EvalConfig) -> Result<MetricsReport> {
    let pred: Vec<LabelGrid> = y.iter().map(|g| predict_labels(g, cfg.threshold)).collect();
    let f = fscores(&pred, z)?;
    Ok(MetricsReport {
        micro_f: f.micro,
        macro_f: f.macro_,
        micro_auc: roc_auc(y, z, AucMode::Micro)?,
        macro_auc: roc_auc(y, z, AucMode::Macro)?,
        per_class_f: f.per_class,
        confusion: f.confusion,
    })
}

/// Header of the per-run metrics CSV.
pub fn report_csv_header(class_names: &[String]) -> String {
    let mut cols = vec![
        "method".to_string(),
        "params".to_string(),
        "micro_f".to_string(),
        "macro_f".to_string(),
        "micro_auc".to_string(),
        "macro_auc".to_string(),
    ];
    cols.extend(
        class_names
            .iter()
            .map(|n| format!("f_{}", n.replace([' ', ','], "_"))),
    );
    cols.join(",")
}

pub fn report_csv_row(method: &str, params: &str, report: &MetricsReport) -> String {
    let mut cols = vec![
        method.to_string(),
        params.to_string(),
        report.micro_f.to_string(),
        report.macro_f.to_string(),
        report.micro_auc.to_string(),
        report.macro_auc.to_string(),
    ];
    cols.extend(report.per_class_f.iter().map(f64::to_string));
    cols.join(",")
}
