//! Segmentation evaluation.
//!
//! Scene-style mIoU comes from one global confusion matrix and skips classes
//! that appear in neither truth nor prediction. Part-style category mIoU
//! scores each shape over its category's parts, counting a part absent from
//! both truth and prediction as 1.0, then averages shapes within a category
//! and finally categories.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `K x K` counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            k: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn update(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!(
                "{} predictions for {} labels",
                pred.len(),
                truth.len()
            )));
        }
        if let Some(&label) = pred.iter().chain(truth).find(|&&c| c >= self.k) {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: self.k,
            });
        }
        for (&p, &t) in pred.iter().zip(truth) {
            self.counts[t * self.k + p] += 1;
        }
        Ok(())
    }

    /// Element-wise sum of another matrix of the same size.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Shape(format!("cannot merge {}-class into {}-class matrix", other.k, self.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    /// Points whose ground truth is `c`.
    pub fn support(&self, c: usize) -> u64 {
        self.counts[c * self.k..(c + 1) * self.k].iter().sum()
    }

    /// Points predicted as `c`.
    pub fn predicted(&self, c: usize) -> u64 {
        (0..self.k).map(|t| self.get(t, c)).sum()
    }

    /// `TP / (T + P - TP)`, or `None` when the class is absent from both
    /// truth and prediction.
    pub fn class_iou(&self, c: usize) -> Option<f64> {
        let (tp, t, p) = (self.true_positives(c), self.support(c), self.predicted(c));
        (t + p > 0).then(|| tp as f64 / (t + p - tp) as f64)
    }

    pub fn mean_iou(&self) -> Result<f64> {
        let defined: Vec<f64> = (0..self.k).filter_map(|c| self.class_iou(c)).collect();
        if defined.is_empty() {
            return Err(Error::Evaluation("no class occurs in truth or prediction".into()));
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }

    pub fn overall_accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| (0..self.k).map(|c| self.true_positives(c)).sum::<u64>() as f64 / total as f64)
    }
}

/// Mean IoU of one shape over `parts`; a part absent from both truth and
/// prediction scores 1.0.
pub fn shape_part_iou(pred: &[usize], truth: &[usize], parts: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if parts.is_empty() {
        return Err(Error::Evaluation("shape category has no parts".into()));
    }
    let sum: f64 = parts
        .iter()
        .map(|&part| {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&p, &t) in pred.iter().zip(truth) {
                let (ip, it) = (p == part, t == part);
                inter += usize::from(ip && it);
                union += usize::from(ip || it);
            }
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .sum();
    Ok(sum / parts.len() as f64)
}

/// Average of per-category means of per-shape IoUs.
pub fn category_mean_iou(per_category: &[Vec<f64>]) -> Result<f64> {
    if per_category.is_empty() {
        return Err(Error::Evaluation("no categories to average".into()));
    }
    let mut total = 0.0;
    for (i, shapes) in per_category.iter().enumerate() {
        if shapes.is_empty() {
            return Err(Error::Evaluation(format!("category {i} has no shapes")));
        }
        total += shapes.iter().sum::<f64>() / shapes.len() as f64;
    }
    Ok(total / per_category.len() as f64)
}

/// Collects per-shape part IoUs keyed by category name.
#[derive(Debug, Clone, Default)]
pub struct ShapeIouAccumulator {
    per_category: BTreeMap<String, Vec<f64>>,
}

impl ShapeIouAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_shape(&mut self, category: &str, parts: &[usize], pred: &[usize], truth: &[usize]) -> Result<f64> {
        let iou = shape_part_iou(pred, truth, parts)?;
        self.per_category.entry(category.to_string()).or_default().push(iou);
        Ok(iou)
    }

    pub fn category_mean_iou(&self) -> Result<f64> {
        category_mean_iou(&self.per_category.values().cloned().collect::<Vec<_>>())
    }

    pub fn categories(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.per_category.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRow {
    pub class: usize,
    pub iou: f64,
    pub support: u64,
}

/// Evaluation summary: one row per defined class.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassRow>,
    pub mean_iou: f64,
    pub category_mean_iou: Option<f64>,
    pub accuracy: f64,
    pub points: u64,
}

impl EvalReport {
    pub fn from_confusion(cm: &ConfusionMatrix, category_mean_iou: Option<f64>) -> Result<Self> {
        let classes = (0..cm.num_classes())
            .filter_map(|c| {
                cm.class_iou(c).map(|iou| ClassRow {
                    class: c,
                    iou,
                    support: cm.support(c),
                })
            })
            .collect();
        Ok(Self {
            classes,
            mean_iou: cm.mean_iou()?,
            category_mean_iou,
            accuracy: cm.overall_accuracy().unwrap_or(0.0),
            points: cm.total(),
        })
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("class      iou  support\n");
        for r in &self.classes {
            let _ = writeln!(s, "{:>5}  {:>7.4}  {:>7}", r.class, r.iou, r.support);
        }
        let _ = writeln!(s, "mIoU      {:.4}", self.mean_iou);
        if let Some(m) = self.category_mean_iou {
            let _ = writeln!(s, "mcIoU     {m:.4}");
        }
        let _ = writeln!(s, "accuracy  {:.4}", self.accuracy);
        s
    }

    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "points={}", self.points);
        let _ = writeln!(s, "accuracy={}", self.accuracy);
        let _ = writeln!(s, "miou={}", self.mean_iou);
        if let Some(m) = self.category_mean_iou {
            let _ = writeln!(s, "mciou={m}");
        }
        for r in &self.classes {
            let _ = writeln!(s, "class.{}.iou={}", r.class, r.iou);
            let _ = writeln!(s, "class.{}.support={}", r.class, r.support);
        }
        s
    }
}
