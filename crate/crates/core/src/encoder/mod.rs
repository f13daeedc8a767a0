//! Toy vision transformer with interval-inserted MLP adapters and gated
//! per-block learnable tokens.

mod config;
mod forward;

pub use self::config::{adapter_schedule, AdapterLayout, EncoderConfig};
pub use self::forward::{
    adapter_forward, encoder_forward, gated_fuse, patch_embed, patchify, EncoderOutput, Mode,
};

#[cfg(test)]
mod tests;
