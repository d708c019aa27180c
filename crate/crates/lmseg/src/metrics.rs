//! Confusion-matrix based segmentation metrics.

use serde::Serialize;

use crate::error::{Error, Result};

/// Per-run segmentation report. IoU entries for classes absent from both
/// prediction and ground truth (empty union) are reported as 0 and excluded
/// from the means, which average over classes present in the ground truth.
#[derive(Debug, Clone, Serialize)]
pub struct SegReport {
    /// confusion[gt][pred] counts
    pub confusion: Vec<Vec<u64>>,
    pub per_class_iou: Vec<f64>,
    pub miou: f64,
    pub oa: f64,
    pub macc: f64,
    /// Positive-class F1 for binary tasks, macro F1 otherwise.
    pub f1: f64,
}

impl SegReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Self {
        let k = confusion.len();
        let total: u64 = confusion.iter().flatten().sum();
        let row_sum: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
        let col_sum: Vec<u64> = (0..k)
            .map(|c| confusion.iter().map(|r| r[c]).sum())
            .collect();
        let diag: Vec<u64> = (0..k).map(|i| confusion[i][i]).collect();

        let mut per_class_iou = vec![0.0f64; k];
        let mut present = vec![false; k];
        for i in 0..k {
            present[i] = row_sum[i] > 0;
            let union = row_sum[i] + col_sum[i] - diag[i];
            if union > 0 {
                per_class_iou[i] = diag[i] as f64 / union as f64;
            }
        }
        let gt_classes: Vec<usize> = (0..k).filter(|&i| present[i]).collect();
        let miou = if gt_classes.is_empty() {
            0.0
        } else {
            gt_classes.iter().map(|&i| per_class_iou[i]).sum::<f64>() / gt_classes.len() as f64
        };
        let oa = if total > 0 {
            diag.iter().sum::<u64>() as f64 / total as f64
        } else {
            0.0
        };
        let macc = if gt_classes.is_empty() {
            0.0
        } else {
            gt_classes
                .iter()
                .map(|&i| diag[i] as f64 / row_sum[i] as f64)
                .sum::<f64>()
                / gt_classes.len() as f64
        };
        let f1_of = |i: usize| -> f64 {
            let tp = diag[i] as f64;
            let p = if col_sum[i] > 0 { tp / col_sum[i] as f64 } else { 0.0 };
            let r = if row_sum[i] > 0 { tp / row_sum[i] as f64 } else { 0.0 };
            if p + r > 0.0 {
                2.0 * p * r / (p + r)
            } else {
                0.0
            }
        };
        let f1 = if k == 2 {
            f1_of(1)
        } else if gt_classes.is_empty() {
            0.0
        } else {
            gt_classes.iter().map(|&i| f1_of(i)).sum::<f64>() / gt_classes.len() as f64
        };
        Self {
            confusion,
            per_class_iou,
            miou,
            oa,
            macc,
            f1,
        }
    }

    pub fn class_count(&self) -> usize {
        self.confusion.len()
    }

    /// Aligned human-readable table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<8} {:>10} {:>10} {:>10}\n",
            "class", "iou", "gt", "pred"
        ));
        let k = self.class_count();
        for i in 0..k {
            let gt: u64 = self.confusion[i].iter().sum();
            let pred: u64 = self.confusion.iter().map(|r| r[i]).sum();
            out.push_str(&format!(
                "{:<8} {:>10.4} {:>10} {:>10}\n",
                i, self.per_class_iou[i], gt, pred
            ));
        }
        out.push_str(&format!(
            "mIoU {:.4}  OA {:.4}  mAcc {:.4}  F1 {:.4}\n",
            self.miou, self.oa, self.macc, self.f1
        ));
        out
    }
}

/// Build the confusion matrix from aligned label vectors.
pub fn confusion_matrix(pred: &[u16], gt: &[u16], k: usize) -> Result<Vec<Vec<u64>>> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gt.len(),
        });
    }
    let mut confusion = vec![vec![0u64; k]; k];
    for (&p, &g) in pred.iter().zip(gt) {
        if p as usize >= k {
            return Err(Error::InvalidLabel {
                label: p as usize,
                classes: k,
            });
        }
        if g as usize >= k {
            return Err(Error::InvalidLabel {
                label: g as usize,
                classes: k,
            });
        }
        confusion[g as usize][p as usize] += 1;
    }
    Ok(confusion)
}

pub fn evaluate(pred: &[u16], gt: &[u16], k: usize) -> Result<SegReport> {
    Ok(SegReport::from_confusion(confusion_matrix(pred, gt, k)?))
}
