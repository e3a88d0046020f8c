//! Segmentation metrics and feature-space domain-gap diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub domain_gap_before: Option<f64>,
    pub domain_gap_after: Option<f64>,
}

/// Confusion counts accumulated over any number of grids.
#[derive(Debug, Clone, PartialEq)]
pub struct IouAccumulator {
    categories: usize,
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
    correct: u64,
    total: u64,
}

impl IouAccumulator {
    pub fn new(categories: usize) -> Self {
        IouAccumulator {
            categories,
            tp: vec![0; categories],
            fp: vec![0; categories],
            fn_: vec![0; categories],
            correct: 0,
            total: 0,
        }
    }

    pub fn add_labels(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Validation(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let l = self.categories;
        if let Some(&bad) = pred.iter().chain(gt).find(|&&v| v >= l) {
            return Err(Error::Validation(format!("label {bad} outside 0..{l}")));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if p == g {
                self.tp[p] += 1;
                self.correct += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[g] += 1;
            }
        }
        self.total += pred.len() as u64;
        Ok(())
    }

    pub fn add(&mut self, pred: &LabelGrid, gt: &LabelGrid) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Validation(format!(
                "prediction grid {}×{} vs ground truth {}×{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        self.add_labels(&pred.labels, &gt.labels)
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.categories)
            .map(|l| {
                let union = self.tp[l] + self.fp[l] + self.fn_[l];
                (union > 0).then(|| self.tp[l] as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> f64 {
        let defined: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        }
    }

    pub fn pixel_accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    pub fn report(&self) -> EvalReport {
        EvalReport {
            per_class_iou: self.per_class_iou(),
            miou: self.miou(),
            pixel_accuracy: self.pixel_accuracy(),
            domain_gap_before: None,
            domain_gap_after: None,
        }
    }
}

/// IoU over all scenes pooled; classes with an empty union are left out of
/// the mean.
pub fn miou(pred: &[LabelGrid], gt: &[LabelGrid], categories: usize) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(Error::Validation(format!(
            "{} predicted grids for {} ground-truth grids",
            pred.len(),
            gt.len()
        )));
    }
    let mut acc = IouAccumulator::new(categories);
    for (p, g) in pred.iter().zip(gt) {
        acc.add(p, g)?;
    }
    Ok(acc.report())
}

/// Running per-class feature sums.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeans {
    dim: usize,
    sums: Vec<Vec<f64>>,
    counts: Vec<usize>,
}

impl ClassMeans {
    pub fn new(categories: usize, dim: usize) -> Self {
        ClassMeans {
            dim,
            sums: vec![vec![0.0; dim]; categories],
            counts: vec![0; categories],
        }
    }

    /// Adds `[n×C]` feature rows with one label each.
    pub fn add_rows(&mut self, features: &[f64], labels: &[usize]) -> Result<()> {
        if features.len() != labels.len() * self.dim {
            return Err(Error::Dimension {
                op: "class means",
                left: vec![labels.len(), self.dim],
                right: vec![features.len()],
            });
        }
        for (f, &l) in features.chunks_exact(self.dim).zip(labels) {
            let sum = self
                .sums
                .get_mut(l)
                .ok_or_else(|| Error::Validation(format!("label {l} out of range")))?;
            for (s, v) in sum.iter_mut().zip(f) {
                *s += v;
            }
            self.counts[l] += 1;
        }
        Ok(())
    }

    pub fn mean(&self, l: usize) -> Option<Vec<f64>> {
        let n = self.counts[l];
        (n > 0).then(|| self.sums[l].iter().map(|s| s / n as f64).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainGap {
    pub gap: f64,
    /// Classes missing from either side, excluded from the mean.
    pub skipped: Vec<usize>,
}

/// Mean over classes of the distance between target and source class means.
pub fn domain_gap(target: &ClassMeans, source: &ClassMeans) -> Result<DomainGap> {
    if target.sums.len() != source.sums.len() || target.dim != source.dim {
        return Err(Error::Validation("class statistics have different layouts".into()));
    }
    let mut total = 0.0;
    let mut used = 0;
    let mut skipped = Vec::new();
    for l in 0..target.sums.len() {
        match (target.mean(l), source.mean(l)) {
            (Some(t), Some(s)) => {
                total += t.iter().zip(&s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                used += 1;
            }
            _ => skipped.push(l),
        }
    }
    if used == 0 {
        return Err(Error::Validation("no class present in both domains".into()));
    }
    Ok(DomainGap {
        gap: total / used as f64,
        skipped,
    })
}
