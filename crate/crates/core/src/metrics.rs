//! Segmentation metrics: confusion counts, pixel accuracy, IoU, Rand index,
//! the restricted ROC with its AUC and operating point, and the probability
//! histogram.
//!
//! ```
//! use cascade_seg::metrics::{confusion, iou, pixel_accuracy};
//! use cascade_seg::BinaryMask;
//!
//! let truth = BinaryMask::new(4, 1, vec![true, true, false, false]).unwrap();
//! let pred = BinaryMask::new(4, 1, vec![true, true, true, true]).unwrap();
//! let c = confusion(&pred, &truth).unwrap();
//! assert_eq!(iou(&c), 0.5);
//! assert_eq!(pixel_accuracy(&c), 0.5);
//! ```

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, Label, LabelMap, ProbabilityMap, Segmentation};
use crate::pipeline::derive_masks;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(self, other: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }
}

pub fn confusion(pred: &BinaryMask, truth: &BinaryMask) -> Result<ConfusionCounts> {
    pred.same_dims(truth, "confusion prediction vs truth")?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.pixels().iter().zip(truth.pixels()) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn pixel_accuracy(c: &ConfusionCounts) -> f64 {
    if c.total() == 0 {
        return 1.0;
    }
    (c.tp + c.tn) as f64 / c.total() as f64
}

/// `tp / (tp + fp + fn)`, and 1 when both masks are empty.
pub fn iou(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fp + c.fn_;
    if denom == 0 {
        return 1.0;
    }
    c.tp as f64 / denom as f64
}

fn pairs(n: u64) -> u128 {
    let n = n as u128;
    n * n.saturating_sub(1) / 2
}

/// Rand index from a contingency table (`table[i][j]` counts pixels with
/// class `i` in the first segmentation and `j` in the second).
pub fn rand_index_from_table(table: &[Vec<u64>]) -> Result<f64> {
    let total: u64 = table.iter().flatten().sum();
    if total < 2 {
        return Err(Error::invalid(format!(
            "rand index needs at least 2 pixels, got {total}"
        )));
    }
    let cols = table.iter().map(Vec::len).max().unwrap_or(0);
    let mut col_sums = vec![0u64; cols];
    let mut same_both: u128 = 0;
    let mut same_first: u128 = 0;
    for row in table {
        same_first += pairs(row.iter().sum());
        for (j, &n) in row.iter().enumerate() {
            same_both += pairs(n);
            col_sums[j] += n;
        }
    }
    let same_second: u128 = col_sums.iter().map(|&n| pairs(n)).sum();
    let all = pairs(total);
    // Pairs together in both plus pairs apart in both.
    let agree = all + 2 * same_both - same_first - same_second;
    Ok(agree as f64 / all as f64)
}

/// Rand index of two binary masks, via their 2×2 contingency table.
pub fn rand_index_from_counts(c: &ConfusionCounts) -> Result<f64> {
    rand_index_from_table(&[vec![c.tp, c.fn_], vec![c.fp, c.tn]])
}

pub fn rand_index<S: Segmentation>(s1: &S, s2: &S) -> Result<f64> {
    if s1.dims() != s2.dims() {
        let (a, b) = (s1.dims(), s2.dims());
        return Err(Error::ShapeMismatch {
            context: "rand_index segmentations",
            left: vec![a.1, a.0],
            right: vec![b.1, b.0],
        });
    }
    let (a, b) = (s1.class_ids(), s2.class_ids());
    let mut table = vec![vec![0u64; 256]; 256];
    for (&x, &y) in a.iter().zip(&b) {
        table[x as usize][y as usize] += 1;
    }
    rand_index_from_table(&table)
}

/// Open probability interval `(lo, hi)` used to restrict the ROC.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Band {
    lo: f64,
    hi: f64,
}

impl Default for Band {
    fn default() -> Self {
        Band { lo: 0.01, hi: 0.99 }
    }
}

impl Band {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid(format!(
                "band needs lo < hi, got ({lo}, {hi})"
            )));
        }
        Ok(Band { lo, hi })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    #[inline]
    pub fn contains(&self, p: f64) -> bool {
        p > self.lo && p < self.hi
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC over the in-band pixels. A pixel counts as positive at threshold `t`
/// when `p > t`. Thresholds run from the band's upper end, through every
/// distinct in-band score in decreasing order, down to its lower end, so the
/// curve starts at (0, 0) and ends at (1, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    points: Vec<RocPoint>,
    positives: u64,
    negatives: u64,
}

impl RocCurve {
    pub fn points(&self) -> &[RocPoint] {
        &self.points
    }

    pub fn positives(&self) -> u64 {
        self.positives
    }

    pub fn negatives(&self) -> u64 {
        self.negatives
    }

    /// Trapezoidal area under the curve.
    pub fn auc(&self) -> f64 {
        auc(&self.points)
    }

    /// Threshold maximizing `tpr − fpr`; ties go to the larger threshold.
    pub fn best_threshold(&self) -> f64 {
        best_threshold(&self.points).expect("curve has endpoints")
    }
}

/// Collects in-band `(score, is_positive)` pairs across a set of images.
pub fn restricted_scores(
    probs: &[&ProbabilityMap],
    truth: &[&BinaryMask],
    band: Band,
) -> Result<Vec<(f64, bool)>> {
    if probs.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} probability maps but {} truth masks",
            probs.len(),
            truth.len()
        )));
    }
    let mut out = Vec::new();
    for (p, t) in probs.iter().zip(truth) {
        p.same_dims(*t, "restricted_roc probabilities vs truth")?;
        out.extend(
            p.pixels()
                .iter()
                .zip(t.pixels())
                .filter(|(&v, _)| band.contains(v))
                .map(|(&v, &y)| (v, y)),
        );
    }
    Ok(out)
}

/// Restricted ROC. `None` when no pixel falls in the band or the in-band
/// pixels lack either class, since the rates are then undefined.
pub fn restricted_roc(
    probs: &[&ProbabilityMap],
    truth: &[&BinaryMask],
    band: Band,
) -> Result<Option<RocCurve>> {
    let scores = restricted_scores(probs, truth, band)?;
    Ok(roc_from_scores(scores, band))
}

pub fn roc_from_scores(mut scores: Vec<(f64, bool)>, band: Band) -> Option<RocCurve> {
    let positives = scores.iter().filter(|s| s.1).count() as u64;
    let negatives = scores.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    scores.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (pf, nf) = (positives as f64, negatives as f64);
    let mut points = vec![RocPoint {
        threshold: band.hi,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < scores.len() {
        let t = scores[i].0;
        // At threshold t, positives are p > t: everything already consumed.
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / nf,
            tpr: tp as f64 / pf,
        });
        while i < scores.len() && scores[i].0 == t {
            if scores[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
    }
    points.push(RocPoint {
        threshold: band.lo,
        fpr: 1.0,
        tpr: 1.0,
    });
    Some(RocCurve {
        points,
        positives,
        negatives,
    })
}

/// Trapezoidal area over points ordered by non-decreasing fpr.
pub fn auc(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum()
}

pub fn best_threshold(points: &[RocPoint]) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for p in points {
        let j = p.tpr - p.fpr;
        let better = match best {
            None => true,
            Some((bj, bt)) => j > bj || (j == bj && p.threshold > bt),
        };
        if better {
            best = Some((j, p.threshold));
        }
    }
    best.map(|b| b.1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistogramBin {
    pub low: f64,
    pub high: f64,
    pub count: u64,
}

pub const DEFAULT_HISTOGRAM_BINS: usize = 49;

/// Equal-width bins over the band counting in-band pixels. Bins are
/// half-open `[low, high)`; a value can only reach the top edge through
/// rounding and is then put in the last bin.
pub fn probability_histogram(
    probs: &[&ProbabilityMap],
    band: Band,
    bins: usize,
) -> Result<Vec<HistogramBin>> {
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    let width = (band.hi - band.lo) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            low: band.lo + width * i as f64,
            high: if i + 1 == bins {
                band.hi
            } else {
                band.lo + width * (i + 1) as f64
            },
            count: 0,
        })
        .collect();
    for p in probs {
        for &v in p.pixels() {
            if band.contains(v) {
                let k = (((v - band.lo) / width) as usize).min(bins - 1);
                out[k].count += 1;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregation {
    /// One confusion table over every pixel of the set.
    #[default]
    Pooled,
    /// Metrics per image, then the arithmetic mean.
    PerImage,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    /// Pooled counts, whatever the aggregation.
    pub counts: ConfusionCounts,
    pub pixel_accuracy: f64,
    pub iou: f64,
    pub rand_index: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Liver-or-tumor region against predicted labels ≥ 1.
    pub liver: ClassMetrics,
    /// Tumor region against predicted label 2.
    pub tumor: ClassMetrics,
    pub restricted_auc: Option<f64>,
    pub threshold: Option<f64>,
    pub roc: Option<RocCurve>,
}

fn class_metrics(
    pairs: &[(BinaryMask, BinaryMask)],
    aggregation: Aggregation,
) -> Result<ClassMetrics> {
    let per: Vec<ConfusionCounts> = pairs
        .iter()
        .map(|(p, t)| confusion(p, t))
        .collect::<Result<_>>()?;
    let counts = per
        .iter()
        .fold(ConfusionCounts::default(), |a, &b| a.merge(b));
    Ok(match aggregation {
        Aggregation::Pooled => ClassMetrics {
            counts,
            pixel_accuracy: pixel_accuracy(&counts),
            iou: iou(&counts),
            rand_index: rand_index_from_counts(&counts)?,
        },
        Aggregation::PerImage => {
            let n = per.len() as f64;
            let mut ri = 0.0;
            for c in &per {
                ri += rand_index_from_counts(c)?;
            }
            ClassMetrics {
                counts,
                pixel_accuracy: per.iter().map(pixel_accuracy).sum::<f64>() / n,
                iou: per.iter().map(iou).sum::<f64>() / n,
                rand_index: ri / n,
            }
        }
    })
}

pub fn evaluate_model(
    predictions: &[&LabelMap],
    truths: &[&LabelMap],
    tumor_probs: Option<&[&ProbabilityMap]>,
    band: Band,
    aggregation: Aggregation,
) -> Result<MetricsReport> {
    if predictions.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} predictions but {} ground truths",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut liver = Vec::with_capacity(predictions.len());
    let mut tumor = Vec::with_capacity(predictions.len());
    let mut tumor_truth = Vec::with_capacity(predictions.len());
    for (p, t) in predictions.iter().zip(truths) {
        p.same_dims(*t, "evaluate_model prediction vs truth")?;
        let d = derive_masks(t);
        liver.push((p.mask_where(|l| l != Label::Background), d.liver_or_tumor));
        tumor.push((p.mask_where(|l| l == Label::Tumor), d.tumor.clone()));
        tumor_truth.push(d.tumor);
    }
    let roc = match tumor_probs {
        Some(probs) => {
            let truth_refs: Vec<&BinaryMask> = tumor_truth.iter().collect();
            restricted_roc(probs, &truth_refs, band)?
        }
        None => None,
    };
    Ok(MetricsReport {
        liver: class_metrics(&liver, aggregation)?,
        tumor: class_metrics(&tumor, aggregation)?,
        restricted_auc: roc.as_ref().map(RocCurve::auc),
        threshold: roc.as_ref().map(RocCurve::best_threshold),
        roc,
    })
}

pub fn write_roc_csv(w: &mut impl Write, curve: Option<&RocCurve>) -> io::Result<()> {
    writeln!(w, "threshold,fpr,tpr")?;
    if let Some(curve) = curve {
        for p in curve.points() {
            writeln!(w, "{},{},{}", p.threshold, p.fpr, p.tpr)?;
        }
    }
    Ok(())
}

pub fn write_histogram_csv(w: &mut impl Write, bins: &[HistogramBin]) -> io::Result<()> {
    writeln!(w, "bin_low,bin_high,count")?;
    for b in bins {
        writeln!(w, "{},{},{}", b.low, b.high, b.count)?;
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

pub fn write_report_csv(w: &mut impl Write, report: &MetricsReport) -> io::Result<()> {
    writeln!(w, "class,pixel_acc,iou,rand_index,rauc,threshold")?;
    let l = &report.liver;
    writeln!(
        w,
        "liver,{},{},{},NA,NA",
        l.pixel_accuracy, l.iou, l.rand_index
    )?;
    let t = &report.tumor;
    writeln!(
        w,
        "tumor,{},{},{},{},{}",
        t.pixel_accuracy,
        t.iou,
        t.rand_index,
        opt(report.restricted_auc),
        opt(report.threshold)
    )
}
