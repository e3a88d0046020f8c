use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-pixel category indices (`0..L`), row-major `H×W`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelGrid {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, labels: Vec<usize>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::Shape {
                shape: vec![height, width],
                reason: format!("label grid holds {} entries", labels.len()),
            });
        }
        Ok(LabelGrid {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: usize) -> Result<Self> {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: usize) {
        self.labels[y * self.width + x] = label;
    }

    pub fn check_range(&self, categories: usize) -> Result<()> {
        match self.labels.iter().position(|&l| l >= categories) {
            Some(i) => Err(Error::Validation(format!(
                "label {} at pixel {i} outside 0..{categories}",
                self.labels[i]
            ))),
            None => Ok(()),
        }
    }
}
