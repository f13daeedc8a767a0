//! Image representation, view generation, patch tiling, DCT texture scoring
//! and high-pass residual extraction.

mod dct;
mod highpass;
mod image;
mod patches;
mod views;

pub use self::dct::{dct2, dct_richness, idct2, select_richest_patch};
pub use self::highpass::{
    filter_plane, highpass_residual, highpass_residual_with, residual_energy, Kernel, ResidualStack,
    DEFAULT_KERNELS, FIRST_ORDER_H, KB, SECOND_ORDER_H, SECOND_ORDER_V,
};
pub use self::image::{load_image, resize_bilinear, Image};
pub use self::patches::{partition_patches, PatchGrid};
pub use self::views::{generate_views, ViewOrigin, ViewSet};
