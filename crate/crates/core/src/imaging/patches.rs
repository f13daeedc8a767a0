use super::image::Image;
use crate::error::{arg_err, Result};

/// Non-overlapping square tiles taken row-major from the top-left corner.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub patch: usize,
    pub patches: Vec<Image>,
    /// `(row, col)` in tile units.
    pub positions: Vec<(usize, usize)>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Tiles `img` into `patch × patch` squares, discarding partial tiles.
pub fn partition_patches(img: &Image, patch: usize) -> Result<PatchGrid> {
    if patch == 0 {
        return arg_err("patch size must be at least 1");
    }
    if img.height() < patch || img.width() < patch {
        return arg_err(format!(
            "{}x{} image is smaller than a {patch}-pixel patch",
            img.width(),
            img.height()
        ));
    }
    let (rows, cols) = (img.height() / patch, img.width() / patch);
    let mut patches = Vec::with_capacity(rows * cols);
    let mut positions = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            patches.push(img.crop(c * patch, r * patch, patch, patch)?);
            positions.push((r, c));
        }
    }
    Ok(PatchGrid {
        patch,
        patches,
        positions,
    })
}
