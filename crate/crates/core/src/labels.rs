use crate::error::{Error, Result};

/// Label value for pixels excluded from loss and scoring.
pub const IGNORE_LABEL: u8 = 255;

/// Per-pixel class indices, row-major `H×W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::InvalidShape {
                shape: vec![height, width],
                reason: format!("label map holds {} values", data.len()),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        self.data[y * self.width + x] = label;
    }

    /// Checks every label is a class below `classes` or [`IGNORE_LABEL`].
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= classes)
        {
            Some(&label) => Err(Error::LabelRange {
                label: label as u32,
                classes,
            }),
            None => Ok(()),
        }
    }
}
