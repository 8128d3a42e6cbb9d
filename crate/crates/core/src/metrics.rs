//! Confusion-matrix based segmentation scores.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};

/// `counts[g·K + p]` = pixels with ground truth `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn true_positives(&self, k: usize) -> u64 {
        self.count(k, k)
    }

    /// Pixels whose ground truth is `k`.
    pub fn row_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|p| self.count(k, p)).sum()
    }

    /// Pixels predicted as `k`.
    pub fn col_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|g| self.count(g, k)).sum()
    }

    /// Adds every pixel where neither map holds the ignore label. The matrix
    /// is left untouched when any value is out of range.
    pub fn accumulate_raw(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::dim("accumulate", &[pred.len()], &[truth.len()]));
        }
        if let Some(&bad) = pred
            .iter()
            .chain(truth)
            .find(|&&l| l != IGNORE_LABEL && l as usize >= self.classes)
        {
            return Err(Error::LabelRange {
                label: bad as u32,
                classes: self.classes,
            });
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if p != IGNORE_LABEL && t != IGNORE_LABEL {
                self.counts[t as usize * self.classes + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.dims() != truth.dims() {
            let (a, b) = (pred.dims(), truth.dims());
            return Err(Error::dim("accumulate", &[a.0, a.1], &[b.0, b.1]));
        }
        self.accumulate_raw(pred.data(), truth.data())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::dim("merge", &[self.classes], &[other.classes]));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Whether class `k` appears in the truth or the prediction.
    pub fn has_support(&self, k: usize) -> bool {
        self.row_sum(k) + self.col_sum(k) > 0
    }

    /// F1 per class from precision and recall; `None` marks classes absent
    /// from both truth and prediction.
    pub fn f1_per_class(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|k| {
                if !self.has_support(k) {
                    return None;
                }
                let tp = self.true_positives(k) as f64;
                let col = self.col_sum(k) as f64;
                let row = self.row_sum(k) as f64;
                let precision = if col > 0.0 { tp / col } else { 0.0 };
                let recall = if row > 0.0 { tp / row } else { 0.0 };
                if precision + recall == 0.0 {
                    Some(0.0)
                } else {
                    Some(2.0 * precision * recall / (precision + recall))
                }
            })
            .collect()
    }

    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|k| {
                let union = self.row_sum(k) + self.col_sum(k) - self.true_positives(k);
                (union > 0).then(|| self.true_positives(k) as f64 / union as f64)
            })
            .collect()
    }

    pub fn mean_f1(&self) -> Result<f64> {
        mean_present(&self.f1_per_class(), "mean F1")
    }

    pub fn miou(&self) -> Result<f64> {
        mean_present(&self.iou_per_class(), "mIoU")
    }

    pub fn overall_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Degenerate("overall accuracy over zero scored pixels".into()));
        }
        let trace: u64 = (0..self.classes).map(|k| self.true_positives(k)).sum();
        Ok(trace as f64 / total as f64)
    }

    pub fn report(&self) -> Result<MetricsReport> {
        let f1 = self.f1_per_class();
        let excluded = f1
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_none())
            .map(|(k, _)| k)
            .collect();
        Ok(MetricsReport {
            classes: (0..self.classes).map(class_name).collect(),
            f1,
            iou: self.iou_per_class(),
            support: (0..self.classes).map(|k| self.row_sum(k)).collect(),
            excluded,
            mean_f1: self.mean_f1()?,
            miou: self.miou()?,
            oa: self.overall_accuracy()?,
            pixels: self.total(),
        })
    }
}

fn mean_present(values: &[Option<f64>], what: &str) -> Result<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Degenerate(format!("{what} over zero scored pixels")));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

pub fn class_name(k: usize) -> String {
    format!("class_{k}")
}

/// Scores for one evaluation. `f1`/`iou` entries are `null` for classes
/// without support, which are also listed in `excluded`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<String>,
    pub f1: Vec<Option<f64>>,
    pub iou: Vec<Option<f64>>,
    /// ground-truth pixels per class
    pub support: Vec<u64>,
    pub excluded: Vec<usize>,
    pub mean_f1: f64,
    pub miou: f64,
    pub oa: f64,
    pub pixels: u64,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Per-class F1 columns followed by mean F1, mIoU and OA.
    pub fn to_table(&self) -> String {
        let mut header = String::new();
        let mut row = String::new();
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        for (name, f1) in self.classes.iter().zip(&self.f1) {
            let width = name.len().max(6);
            let _ = write!(header, "{name:>width$} ");
            let _ = write!(row, "{:>width$} ", cell(*f1));
        }
        for (name, v) in [("mean_f1", self.mean_f1), ("miou", self.miou), ("oa", self.oa)] {
            let width = name.len().max(6);
            let _ = write!(header, "{name:>width$} ");
            let _ = write!(row, "{:>width$} ", cell(Some(v)));
        }
        let mut out = format!("{}\n{}\n", header.trim_end(), row.trim_end());
        if !self.excluded.is_empty() {
            let names: Vec<&str> = self.excluded.iter().map(|&k| self.classes[k].as_str()).collect();
            let _ = writeln!(out, "warning: no support for {}; excluded from means", names.join(", "));
        }
        out
    }
}
