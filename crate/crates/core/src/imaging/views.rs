use rand::Rng;

use super::image::{resize_bilinear, Image};
use crate::error::{arg_err, Result};

/// Where a view came from in the source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewOrigin {
    GlobalResize,
    Crop { x: usize, y: usize, side: usize, flipped: bool },
    CropResize { x: usize, y: usize, side: usize, flipped: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub views: Vec<Image>,
    pub origins: Vec<ViewOrigin>,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// One global resized view followed by `n_views - 1` random local views.
///
/// Local views are `view_size` crops flipped with probability 0.5. When the
/// image is smaller than `view_size` on some side, random squares of side in
/// `[min_side/2, min_side]` are cropped and resized up instead.
pub fn generate_views<R: Rng>(img: &Image, n_views: usize, view_size: usize, rng: &mut R) -> Result<ViewSet> {
    if n_views == 0 {
        return arg_err("n_views must be at least 1");
    }
    if view_size == 0 {
        return arg_err("view_size must be at least 1");
    }
    let mut views = Vec::with_capacity(n_views);
    let mut origins = Vec::with_capacity(n_views);
    views.push(resize_bilinear(img, view_size, view_size)?);
    origins.push(ViewOrigin::GlobalResize);

    let (h, w) = (img.height(), img.width());
    let min_side = h.min(w);
    for _ in 1..n_views {
        if min_side >= view_size {
            let x = rng.gen_range(0..=w - view_size);
            let y = rng.gen_range(0..=h - view_size);
            let flipped = rng.gen_bool(0.5);
            let mut view = img.crop(x, y, view_size, view_size)?;
            if flipped {
                view = view.flip_horizontal();
            }
            views.push(view);
            origins.push(ViewOrigin::Crop { x, y, side: view_size, flipped });
        } else {
            let lo = min_side.div_ceil(2).max(1);
            let side = rng.gen_range(lo..=min_side);
            let x = rng.gen_range(0..=w - side);
            let y = rng.gen_range(0..=h - side);
            let flipped = rng.gen_bool(0.5);
            let mut view = resize_bilinear(&img.crop(x, y, side, side)?, view_size, view_size)?;
            if flipped {
                view = view.flip_horizontal();
            }
            views.push(view);
            origins.push(ViewOrigin::CropResize { x, y, side, flipped });
        }
    }
    Ok(ViewSet { views, origins })
}
