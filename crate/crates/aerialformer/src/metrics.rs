//! Per-class confusion counting and the IoU / Acc / F1 metric stack with
//! unweighted class means.

use serde::{Deserialize, Serialize};

use crate::error::{AfError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

/// Exact per-pixel boolean counting per class; `ignore_index` pixels are
/// dropped entirely.
pub fn confusion(
    pred: &[u8],
    gt: &[u8],
    num_classes: usize,
    ignore_index: u8,
) -> Result<Vec<ClassCounts>> {
    if pred.len() != gt.len() {
        return Err(AfError::Data {
            path: "confusion".into(),
            msg: format!("pred has {} pixels, gt has {}", pred.len(), gt.len()),
        });
    }
    let mut counts = vec![ClassCounts::default(); num_classes];
    for (i, (&p, &g)) in pred.iter().zip(gt.iter()).enumerate() {
        if g == ignore_index {
            continue;
        }
        if p as usize >= num_classes || g as usize >= num_classes {
            return Err(AfError::Data {
                path: "confusion".into(),
                msg: format!("class id out of range at pixel {i}: pred {p}, gt {g}"),
            });
        }
        for (l, c) in counts.iter_mut().enumerate() {
            let l = l as u8;
            match (g == l, p == l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fn_ += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    Ok(counts)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub counts: ClassCounts,
    /// TP/(TP+FN+FP); None when the class is absent from both masks.
    pub iou: Option<f64>,
    /// (TP+TN)/total evaluated pixels.
    pub acc: Option<f64>,
    /// 2TP/(2TP+FN+FP) = 2·IoU/(1+IoU).
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    /// Mean IoU over defined classes.
    pub miou: f64,
    /// Mean per-class accuracy (true negatives included).
    pub oa: f64,
    pub mf1: f64,
    /// Conventional overall pixel accuracy: Σ TP / pixels.
    pub pixel_accuracy: f64,
    pub evaluated_pixels: u64,
    /// Classes absent from both prediction and ground truth, excluded from
    /// the means.
    pub undefined_classes: Vec<usize>,
}

pub fn metrics(counts: &[ClassCounts]) -> MetricsReport {
    let pixels = counts
        .first()
        .map(|c| c.tp + c.tn + c.fp + c.fn_)
        .unwrap_or(0);
    let mut per_class = Vec::with_capacity(counts.len());
    let mut undefined = Vec::new();
    let (mut siou, mut sacc, mut sf1, mut stp) = (0.0, 0.0, 0.0, 0u64);
    let mut defined = 0usize;
    for (l, c) in counts.iter().enumerate() {
        stp += c.tp;
        let denom = c.tp + c.fn_ + c.fp;
        if denom == 0 {
            // class never appears on either side: 0/0
            undefined.push(l);
            per_class.push(ClassMetrics {
                counts: *c,
                iou: None,
                acc: if pixels > 0 {
                    Some((c.tp + c.tn) as f64 / pixels as f64)
                } else {
                    None
                },
                f1: None,
            });
            continue;
        }
        let iou = c.tp as f64 / denom as f64;
        let acc = (c.tp + c.tn) as f64 / pixels as f64;
        let f1 = 2.0 * c.tp as f64 / (2 * c.tp + c.fn_ + c.fp) as f64;
        siou += iou;
        sacc += acc;
        sf1 += f1;
        defined += 1;
        per_class.push(ClassMetrics {
            counts: *c,
            iou: Some(iou),
            acc: Some(acc),
            f1: Some(f1),
        });
    }
    let mean = |s: f64| if defined > 0 { s / defined as f64 } else { 0.0 };
    MetricsReport {
        per_class,
        miou: mean(siou),
        oa: mean(sacc),
        mf1: mean(sf1),
        pixel_accuracy: if pixels > 0 {
            stp as f64 / pixels as f64
        } else {
            0.0
        },
        evaluated_pixels: pixels,
        undefined_classes: undefined,
    }
}

impl MetricsReport {
    /// Aligned human-readable table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:>5} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
            "class", "TP", "FP", "FN", "TN", "IoU", "Acc", "F1"
        ));
        let fmt = |v: Option<f64>| match v {
            Some(v) => format!("{v:10.4}"),
            None => format!("{:>10}", "n/a"),
        };
        for (l, m) in self.per_class.iter().enumerate() {
            out.push_str(&format!(
                "{:>5} {:>10} {:>10} {:>10} {:>10} {} {} {}\n",
                l,
                m.counts.tp,
                m.counts.fp,
                m.counts.fn_,
                m.counts.tn,
                fmt(m.iou),
                fmt(m.acc),
                fmt(m.f1)
            ));
        }
        out.push_str(&format!(
            "mIoU {:.4}  OA {:.4}  mF1 {:.4}  pixel-accuracy {:.4}  pixels {}\n",
            self.miou, self.oa, self.mf1, self.pixel_accuracy, self.evaluated_pixels
        ));
        if !self.undefined_classes.is_empty() {
            out.push_str(&format!(
                "classes excluded from means (absent from pred and gt): {:?}\n",
                self.undefined_classes
            ));
        }
        out
    }
}
