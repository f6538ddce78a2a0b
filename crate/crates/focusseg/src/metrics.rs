//! Segmentation metrics via confusion-matrix accumulation: per-class IoU,
//! mIoU, boundary-band IoU, and pixel accuracy.

use crate::error::{Error, Result};
use crate::supervision::{boundary_map, LabelMap, IGNORE_LABEL};
use crate::tensor::Tensor;

/// Pixels within this Chebyshev radius of a ground-truth label transition
/// form the boundary band.
pub const BOUNDARY_BAND_RADIUS: usize = 2;

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Metrics {
    /// IoU per class; `None` when the class appears in neither prediction nor
    /// ground truth (excluded from the mean, not counted as 0 or 1).
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    /// mIoU restricted to the boundary band of the ground truth.
    pub boundary_miou: f64,
    pub pixel_accuracy: f64,
}

/// Accumulates confusion counts over any number of (pred, gt) pairs.
#[derive(Debug, Clone)]
pub struct ConfusionAccumulator {
    num_classes: usize,
    /// matrix[gt * C + pred], ignore pixels skipped.
    matrix: Vec<u64>,
    band_matrix: Vec<u64>,
}

impl ConfusionAccumulator {
    pub fn new(num_classes: usize) -> ConfusionAccumulator {
        ConfusionAccumulator {
            num_classes,
            matrix: vec![0; num_classes * num_classes],
            band_matrix: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(Error::contract(format!(
                "prediction {:?} and ground truth {:?} differ in shape",
                pred.dims(),
                gt.dims()
            )));
        }
        pred.validate_classes(self.num_classes)?;
        gt.validate_classes(self.num_classes)?;
        let (h, w) = gt.dims();
        let band = boundary_map(gt, BOUNDARY_BAND_RADIUS, (h, w))?;
        let c = self.num_classes;
        for (i, (&p, &g)) in pred.labels().iter().zip(gt.labels()).enumerate() {
            if g == IGNORE_LABEL || p == IGNORE_LABEL {
                continue;
            }
            let cell = g as usize * c + p as usize;
            self.matrix[cell] += 1;
            if band.values()[i] != 0 {
                self.band_matrix[cell] += 1;
            }
        }
        Ok(())
    }

    /// Folds another accumulator in (order-independent integer sums).
    pub fn merge(&mut self, other: &ConfusionAccumulator) {
        debug_assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.matrix.iter_mut().zip(&other.matrix) {
            *a += b;
        }
        for (a, b) in self.band_matrix.iter_mut().zip(&other.band_matrix) {
            *a += b;
        }
    }

    pub fn metrics(&self) -> Metrics {
        let per_class_iou = iou_from_matrix(&self.matrix, self.num_classes);
        let band_iou = iou_from_matrix(&self.band_matrix, self.num_classes);
        let total: u64 = self.matrix.iter().sum();
        let correct: u64 = (0..self.num_classes)
            .map(|c| self.matrix[c * self.num_classes + c])
            .sum();
        Metrics {
            miou: mean_present(&per_class_iou),
            boundary_miou: mean_present(&band_iou),
            pixel_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            per_class_iou,
        }
    }
}

fn iou_from_matrix(matrix: &[u64], c: usize) -> Vec<Option<f64>> {
    (0..c)
        .map(|cls| {
            let tp = matrix[cls * c + cls];
            let gt_total: u64 = (0..c).map(|p| matrix[cls * c + p]).sum();
            let pred_total: u64 = (0..c).map(|g| matrix[g * c + cls]).sum();
            let union = gt_total + pred_total - tp;
            if union == 0 {
                None
            } else {
                Some(tp as f64 / union as f64)
            }
        })
        .collect()
}

fn mean_present(ious: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = ious.iter().filter_map(|&x| x).collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// One-shot metrics for a single (pred, gt) pair.
pub fn compute_miou(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<Metrics> {
    let mut acc = ConfusionAccumulator::new(num_classes);
    acc.add(pred, gt)?;
    Ok(acc.metrics())
}

/// Per-pixel argmax over the channel axis; ties resolve to the lower class.
pub fn argmax_labels(logits: &Tensor) -> Result<LabelMap> {
    let (c, h, w) = logits.dims3()?;
    let hw = h * w;
    let data = logits.data();
    let mut labels = vec![0u8; hw];
    for p in 0..hw {
        let (mut best_c, mut best_v) = (0usize, data[p]);
        for ch in 1..c {
            let v = data[ch * hw + p];
            if v > best_v {
                best_v = v;
                best_c = ch;
            }
        }
        labels[p] = best_c as u8;
    }
    LabelMap::new(h, w, labels)
}
