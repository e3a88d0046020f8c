//! One-hot-or-ignored pseudo annotations from confident score maps.

use crate::error::{Error, Result};
use crate::oldm::check_gamma;
use crate::segnet::ScoreMap;
use crate::tensor::{argmax, DenseArray};

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoAnnotation {
    /// `H×W×L` one-hot rows; all-zero where ignored.
    pub labels: DenseArray,
    /// `H×W`, 1 marks an ignored pixel.
    pub ignore_mask: DenseArray,
}

/// Flat `[n×L]` targets and `[n]` ignore mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoRows {
    pub targets: Vec<f64>,
    pub ignore: Vec<f64>,
}

impl PseudoRows {
    pub fn labeled(&self) -> usize {
        self.ignore.iter().filter(|&&m| m == 0.0).count()
    }
}

/// Labels the argmax of every pixel whose top score strictly exceeds
/// `gamma`; all other pixels are ignored. Ties go to the lowest index.
pub fn pseudo_rows(probs: &[f64], categories: usize, gamma: f64) -> Result<PseudoRows> {
    check_gamma(gamma)?;
    let n = probs.len() / categories;
    let mut targets = vec![0.0; probs.len()];
    let mut ignore = vec![0.0; n];
    for ((row, t), m) in probs
        .chunks_exact(categories)
        .zip(targets.chunks_exact_mut(categories))
        .zip(ignore.iter_mut())
    {
        let best = argmax(row);
        if row[best] > gamma {
            t[best] = 1.0;
        } else {
            *m = 1.0;
        }
    }
    Ok(PseudoRows { targets, ignore })
}

pub fn compute_pseudo_annotation(scores: &ScoreMap, gamma: f64) -> Result<PseudoAnnotation> {
    scores.require_normalized("compute_pseudo_annotation")?;
    let (h, w, l) = (scores.height(), scores.width(), scores.categories());
    let rows = pseudo_rows(scores.values().data(), l, gamma)?;
    Ok(PseudoAnnotation {
        labels: DenseArray::new(vec![h, w, l], rows.targets)?,
        ignore_mask: DenseArray::new(vec![h, w], rows.ignore)?,
    })
}

impl PseudoAnnotation {
    pub fn height(&self) -> usize {
        self.ignore_mask.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.ignore_mask.shape()[1]
    }

    /// Category index per pixel, `None` where ignored.
    pub fn label_at(&self, y: usize, x: usize) -> Option<usize> {
        let i = y * self.width() + x;
        if self.ignore_mask.data()[i] == 1.0 {
            return None;
        }
        let l = self.labels.shape()[2];
        self.labels.data()[i * l..(i + 1) * l]
            .iter()
            .position(|&v| v == 1.0)
    }

    /// Checks the one-hot-or-ignored partition.
    pub fn validate(&self) -> Result<()> {
        let l = self.labels.shape()[2];
        for (i, (row, &m)) in self
            .labels
            .data()
            .chunks_exact(l)
            .zip(self.ignore_mask.data())
            .enumerate()
        {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            let ok = match m {
                0.0 => ones == 1 && zeros == l - 1,
                1.0 => zeros == l,
                _ => false,
            };
            if !ok {
                return Err(Error::Validation(format!("pixel {i} is neither one-hot nor ignored")));
            }
        }
        Ok(())
    }

    /// Label grid as CSV, one scene row per line, `-1` for ignored pixels.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for y in 0..self.height() {
            let line: Vec<String> = (0..self.width())
                .map(|x| match self.label_at(y, x) {
                    Some(l) => l.to_string(),
                    None => "-1".to_string(),
                })
                .collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(rows: &[&[f64]]) -> ScoreMap {
        let l = rows[0].len();
        let data = rows.concat();
        ScoreMap::normalized(DenseArray::new(vec![1, rows.len(), l], data).unwrap()).unwrap()
    }

    #[test]
    fn three_cases() {
        let s = scores(&[&[0.9, 0.05, 0.05], &[0.5, 0.3, 0.2], &[0.85, 0.10, 0.05]]);
        let p = compute_pseudo_annotation(&s, 0.8).unwrap();
        p.validate().unwrap();
        assert_eq!(p.label_at(0, 0), Some(0));
        assert_eq!(p.label_at(0, 1), None);
        assert_eq!(p.label_at(0, 2), Some(0));
        assert_eq!(&p.labels.data()[6..9], &[1.0, 0.0, 0.0]);
        assert_eq!(&p.labels.data()[3..6], &[0.0, 0.0, 0.0]);
        assert_eq!(p.ignore_mask.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn equality_with_gamma_is_ignored() {
        let s = scores(&[&[0.8, 0.1, 0.1]]);
        let p = compute_pseudo_annotation(&s, 0.8).unwrap();
        assert_eq!(p.label_at(0, 0), None);
    }

    #[test]
    fn gamma_one_ignores_everything() {
        let s = scores(&[&[1.0, 0.0, 0.0], &[0.2, 0.7, 0.1]]);
        let p = compute_pseudo_annotation(&s, 1.0).unwrap();
        assert_eq!(p.ignore_mask.data(), &[1.0, 1.0]);
    }

    #[test]
    fn rejects_raw_scores_and_bad_gamma() {
        let raw = ScoreMap::raw(DenseArray::new(vec![1, 1, 2], vec![3.0, -1.0]).unwrap()).unwrap();
        assert!(matches!(compute_pseudo_annotation(&raw, 0.5), Err(Error::Contract(_))));
        let s = scores(&[&[0.6, 0.4]]);
        assert!(matches!(compute_pseudo_annotation(&s, 1.5), Err(Error::Config { .. })));
    }

    #[test]
    fn csv_marks_ignored_as_minus_one() {
        let s = scores(&[&[0.9, 0.1], &[0.5, 0.5]]);
        let p = compute_pseudo_annotation(&s, 0.8).unwrap();
        assert_eq!(p.to_csv(), "0,-1\n");
    }
}
