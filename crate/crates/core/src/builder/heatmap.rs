use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel class logits (`H×W×C`) plus a usable-tissue mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    logits: Tensor,
    mask: Vec<bool>,
}

impl Heatmap {
    pub fn new(logits: Tensor, mask: Vec<bool>) -> Result<Self> {
        let shape = logits.shape();
        if shape.len() != 3 {
            return Err(Error::Validation(format!("heatmap logits must be H×W×C, got {shape:?}")));
        }
        if mask.len() != shape[0] * shape[1] {
            return Err(Error::Validation(format!(
                "mask has {} entries for a {}×{} raster",
                mask.len(),
                shape[0],
                shape[1]
            )));
        }
        if !logits.is_finite() {
            return Err(Error::Validation("heatmap logits are not finite".into()));
        }
        Ok(Self { logits, mask })
    }

    pub fn height(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.logits.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.logits.shape()[2]
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn pixel_logits(&self, x: usize, y: usize) -> &[f64] {
        let c = self.classes();
        let start = (y * self.width() + x) * c;
        &self.logits.data()[start..start + c]
    }

    pub fn usable(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width() + x]
    }

    pub fn usable_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}
