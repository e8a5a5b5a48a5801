//! Matching metrics: MMA curves, homography AUC and threshold accuracy, and the
//! horizontal/vertical RMSE triplet.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{estimate_homography_ransac, Homography, Point, RansacConfig};
use crate::matching::MatchSet;


/// Ground-truth correspondence for an a-side point; `None` when it leaves the frame.
pub type GtMap<'a> = &'a dyn Fn(Point) -> Option<Point>;

pub const MMA_THRESHOLDS: [f64; 10] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
pub const AUC_THRESHOLDS: [f64; 3] = [3.0, 5.0, 10.0];
pub const ACC_THRESHOLDS: [f64; 3] = [1.0, 3.0, 5.0];

#[derive(Debug, Clone, PartialEq)]
pub struct MmaCurve {
    pub thresholds: Vec<f64>,
    /// Fraction of matches within each threshold, averaged over pairs.
    pub values: Vec<f64>,
    /// Some pair had no usable match.
    pub empty_warning: bool,
    /// Matches dropped because their a-side point has no ground truth.
    pub excluded: usize,
}

/// End-point errors `‖gt(a) − b‖` of the matches with defined ground truth, and
/// the count of excluded ones.
pub fn match_errors(matches: &MatchSet, gt: GtMap) -> (Vec<f64>, usize) {
    let mut errs = Vec::with_capacity(matches.len());
    let mut excluded = 0;
    for m in &matches.matches {
        match gt(m.a) {
            Some(g) => errs.push((g - m.b).norm()),
            None => excluded += 1,
        }
    }
    (errs, excluded)
}

/// Per-threshold fraction of `errors` strictly below each threshold.
pub fn fraction_below(errors: &[f64], thresholds: &[f64]) -> Vec<f64> {
    if errors.is_empty() {
        return vec![0.0; thresholds.len()];
    }
    thresholds
        .iter()
        .map(|t| errors.iter().filter(|e| **e < *t).count() as f64 / errors.len() as f64)
        .collect()
}

/// Mean matching accuracy, averaged per pair and then across pairs.
pub fn mma(pairs: &[(&MatchSet, GtMap)], thresholds: &[f64]) -> MmaCurve {
    let mut values = vec![0.0; thresholds.len()];
    let mut empty_warning = pairs.is_empty();
    let mut excluded = 0;
    for (ms, gt) in pairs {
        let (errs, ex) = match_errors(ms, *gt);
        excluded += ex;
        empty_warning |= errs.is_empty();
        for (v, f) in values.iter_mut().zip(fraction_below(&errs, thresholds)) {
            *v += f;
        }
    }
    if !pairs.is_empty() {
        values.iter_mut().for_each(|v| *v /= pairs.len() as f64);
    }
    MmaCurve {
        thresholds: thresholds.to_vec(),
        values,
        empty_warning,
        excluded,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AucReport {
    pub thresholds: Vec<f64>,
    /// Percentages in [0, 100].
    pub values: Vec<f64>,
    /// Pairs where estimation failed (scored as infinite corner error).
    pub failures: usize,
}

impl AucReport {
    pub fn at(&self, t: f64) -> Option<f64> {
        self.thresholds.iter().position(|x| *x == t).map(|i| self.values[i])
    }
}

/// Mean corner error of a RANSAC homography fitted to `matches` against `h_gt`;
/// `None` when estimation fails.
pub fn corner_error(matches: &MatchSet, h_gt: &Homography, width: usize, height: usize, ransac: &RansacConfig) -> Option<f64> {
    if matches.len() < 4 {
        return None;
    }
    let fit = estimate_homography_ransac(&matches.pairs(), ransac).ok()?;
    if fit.inliers.len() < 4 {
        return None;
    }
    let e = fit.homography.corner_error(h_gt, width, height);
    e.is_finite().then_some(e)
}

/// Area under the cumulative error curve up to each threshold, normalized by the
/// threshold, in percent. Every error counts as a step of height `1/n`.
pub fn auc_from_errors(errors: &[f64], thresholds: &[f64]) -> Vec<f64> {
    let n = errors.len().max(1) as f64;
    thresholds
        .iter()
        .map(|&t| errors.iter().map(|&e| (t - e).max(0.0)).sum::<f64>() / (n * t) * 100.0)
        .collect()
}

fn pair_errors(pairs: &[(&MatchSet, &Homography)], width: usize, height: usize, ransac: &RansacConfig) -> (Vec<f64>, usize) {
    let mut failures = 0;
    let errs = pairs
        .iter()
        .map(|(m, h)| {
            corner_error(m, h, width, height, ransac).unwrap_or_else(|| {
                failures += 1;
                f64::INFINITY
            })
        })
        .collect();
    (errs, failures)
}

/// Homography estimation AUC over a set of pairs.
pub fn homography_auc(pairs: &[(&MatchSet, &Homography)], width: usize, height: usize, thresholds: &[f64], ransac: &RansacConfig) -> AucReport {
    let (errs, failures) = pair_errors(pairs, width, height, ransac);
    AucReport {
        thresholds: thresholds.to_vec(),
        values: auc_from_errors(&errs, thresholds),
        failures,
    }
}

/// Percentage of pairs whose homography corner error is below each threshold.
pub fn threshold_accuracy(pairs: &[(&MatchSet, &Homography)], width: usize, height: usize, thresholds: &[f64], ransac: &RansacConfig) -> AucReport {
    let (errs, failures) = pair_errors(pairs, width, height, ransac);
    AucReport {
        thresholds: thresholds.to_vec(),
        values: fraction_below(&errs, thresholds).into_iter().map(|f| f * 100.0).collect(),
        failures,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmseErrors {
    pub h: f64,
    pub v: f64,
    pub hv: f64,
    /// Matches that survived the `|dx| < 1`, `|dy| < 1` filter.
    pub kept: usize,
}

/// Signed `(dx, dy) = b − gt(a)` for matches with ground truth.
pub fn displacements(matches: &MatchSet, gt: GtMap) -> Vec<(f64, f64)> {
    matches
        .matches
        .iter()
        .filter_map(|m| gt(m.a).map(|g| (m.b.x - g.x, m.b.y - g.y)))
        .collect()
}

/// RMSE triplet over the displacements with `|dx| < 1` and `|dy| < 1`.
pub fn rmse_from_displacements(d: &[(f64, f64)]) -> Result<RmseErrors> {
    let kept: Vec<(f64, f64)> = d.iter().copied().filter(|(x, y)| x.abs() < 1.0 && y.abs() < 1.0).collect();
    if kept.is_empty() {
        return Err(Error::EmptyInput("no match within one pixel horizontally and vertically".into()));
    }
    let n = kept.len() as f64;
    let sx = kept.iter().map(|(x, _)| x * x).sum::<f64>() / n;
    let sy = kept.iter().map(|(_, y)| y * y).sum::<f64>() / n;
    Ok(RmseErrors {
        h: sx.sqrt(),
        v: sy.sqrt(),
        hv: (sx + sy).sqrt(),
        kept: kept.len(),
    })
}

pub fn rmse_errors(matches: &MatchSet, gt: GtMap) -> Result<RmseErrors> {
    rmse_from_displacements(&displacements(matches, gt))
}

/// One `metric,threshold,value` row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub threshold: Option<f64>,
    pub value: f64,
}

impl MetricRow {
    pub fn new(metric: &str, threshold: Option<f64>, value: f64) -> Self {
        MetricRow {
            metric: metric.into(),
            threshold,
            value,
        }
    }
}

pub fn mma_rows(c: &MmaCurve) -> Vec<MetricRow> {
    c.thresholds.iter().zip(&c.values).map(|(t, v)| MetricRow::new("mma", Some(*t), *v)).collect()
}

pub fn auc_rows(metric: &str, r: &AucReport) -> Vec<MetricRow> {
    let mut rows: Vec<MetricRow> = r.thresholds.iter().zip(&r.values).map(|(t, v)| MetricRow::new(metric, Some(*t), *v)).collect();
    rows.push(MetricRow::new(&format!("{metric}_failures"), None, r.failures as f64));
    rows
}

pub fn rmse_rows(r: &RmseErrors) -> Vec<MetricRow> {
    vec![
        MetricRow::new("h_rmse", None, r.h),
        MetricRow::new("v_rmse", None, r.v),
        MetricRow::new("hv_rmse", None, r.hv),
        MetricRow::new("rmse_kept", None, r.kept as f64),
    ]
}

pub fn to_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("metric,threshold,value\n");
    for r in rows {
        let t = r.threshold.map_or(String::new(), |t| format!("{t}"));
        writeln!(s, "{},{t},{:.6}", r.metric, r.value).expect("string write");
    }
    s
}

/// Aligned plain-text table of the same rows.
pub fn to_table(rows: &[MetricRow]) -> String {
    let w = rows.iter().map(|r| r.metric.len()).max().unwrap_or(6).max(6);
    let mut s = format!("{:<w$}  {:>9}  {:>12}\n", "metric", "threshold", "value");
    for r in rows {
        let t = r.threshold.map_or("-".to_string(), |t| format!("{t}"));
        writeln!(s, "{:<w$}  {t:>9}  {:>12.6}", r.metric, r.value).expect("string write");
    }
    s
}
