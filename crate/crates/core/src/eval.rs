//! Range-image L1 error and occupancy ROC/AUC against a reference map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::NormalizedImage;
use crate::mapping::{VoxelGrid, VoxelState};

/// Mean absolute difference per pixel.
pub fn l1_metric(pred: &NormalizedImage, truth: &NormalizedImage) -> Result<f64> {
    if (pred.rows(), pred.cols()) != (truth.rows(), truth.cols()) {
        return Err(Error::shape(
            "l1_metric",
            format!("{}x{}", truth.rows(), truth.cols()),
            format!("{}x{}", pred.rows(), pred.cols()),
        ));
    }
    let n = pred.as_slice().len();
    let sum: f64 = pred.as_slice().iter().zip(truth.as_slice()).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum();
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores at or above this value are classified positive.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// From `(0, 0)` at threshold +inf to `(1, 1)`.
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
}

impl RocCurve {
    /// Sweeps every distinct score; equal scores move the curve in one
    /// (possibly diagonal) step. Area by the trapezoid rule.
    pub fn from_scores(scores: &[f64], labels: &[bool]) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::shape("roc", format!("{} labels", scores.len()), labels.len()));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::Numeric("NaN score in ROC input".into()));
        }
        let positives = labels.iter().filter(|&&l| l).count();
        let negatives = labels.len() - positives;
        if positives == 0 || negatives == 0 {
            return Err(Error::Config(format!(
                "degenerate ROC: {positives} positives and {negatives} negatives"
            )));
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let (p, n) = (positives as f64, negatives as f64);
        let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut auc = 0.0;
        let mut i = 0;
        while i < order.len() {
            let s = scores[order[i]];
            while i < order.len() && scores[order[i]] == s {
                if labels[order[i]] {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            let prev = *points.last().unwrap();
            let pt = RocPoint { threshold: s, fpr: fp as f64 / n, tpr: tp as f64 / p };
            auc += (pt.fpr - prev.fpr) * (pt.tpr + prev.tpr) / 2.0;
            points.push(pt);
        }
        Ok(RocCurve { points, auc, positives, negatives })
    }

    /// CSV with columns `threshold,fpr,tpr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
        }
        out
    }
}

/// Scores and labels for voxels whose reference state is known: positive
/// means occupied in `truth`, the score is the predicted occupancy (0.5 when
/// unobserved).
pub fn occupancy_scores(pred: &VoxelGrid, truth: &VoxelGrid) -> Result<(Vec<f64>, Vec<bool>)> {
    if pred.config() != truth.config() {
        return Err(Error::Config("grids differ in origin, resolution, dims or sensor model".into()));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for i in 0..truth.len() {
        let label = match truth.state_at(i) {
            VoxelState::Occupied => true,
            VoxelState::Free => false,
            VoxelState::Unknown => continue,
        };
        scores.push(pred.probability_at(i));
        labels.push(label);
    }
    Ok((scores, labels))
}

pub fn roc_auc(pred: &VoxelGrid, truth: &VoxelGrid) -> Result<RocCurve> {
    let (scores, labels) = occupancy_scores(pred, truth)?;
    RocCurve::from_scores(&scores, &labels)
}

/// One row of a method comparison. Missing values print as `N/A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub l1: Option<f64>,
    pub removed_pct: Option<f64>,
    pub auc: Option<f64>,
    pub ms_per_image: Option<f64>,
    pub scan_count: usize,
}

impl MetricsRow {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.l1, self.removed_pct, self.auc, self.ms_per_image].iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numeric(format!("non-finite metric for {}", self.method)));
        }
        if self.removed_pct.is_some_and(|r| !(0.0..=100.0).contains(&r)) {
            return Err(Error::Numeric(format!("removed percentage out of range for {}", self.method)));
        }
        Ok(())
    }
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "N/A".to_string(), |v| format!("{v:.digits$}"))
}

/// CSV with columns `method,l1,removed_pct,auc,ms_per_image`. Timing is
/// left out when `with_timing` is false so the table is reproducible.
pub fn metrics_csv(rows: &[MetricsRow], with_timing: bool) -> String {
    let mut out = String::from("method,l1,removed_pct,auc,ms_per_image\n");
    for r in rows {
        let ms = if with_timing { cell(r.ms_per_image, 3) } else { "N/A".into() };
        out.push_str(&format!("{},{},{},{},{ms}\n", r.method, cell(r.l1, 6), cell(r.removed_pct, 3), cell(r.auc, 6)));
    }
    out
}
