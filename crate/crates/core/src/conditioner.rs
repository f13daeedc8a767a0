//! Conditional information learner: forgery-specific and image-specific
//! condition vectors extracted from the most textured patch of a view, and
//! their gated fusion with the test-time adaptive tokens.

use crate::autograd::{Graph, Var};
use crate::error::{arg_err, Result};
use crate::imaging::{
    highpass_residual_with, partition_patches, select_richest_patch, Image, Kernel, ResidualStack,
    DEFAULT_KERNELS,
};
use crate::params::{Binder, ModelParams, TrainMask};

pub const FORGERY: &str = "cil.forgery";
pub const IMAGE: &str = "cil.image";

#[derive(Debug, Clone, PartialEq)]
pub struct CilConfig {
    /// Side of the square patches scored for texture.
    pub cond_patch: usize,
    /// Output channels of each stride-2 convolution stage.
    pub channels: Vec<usize>,
    /// Residual filter bank identifier.
    pub filters: String,
}

impl Default for CilConfig {
    fn default() -> Self {
        Self {
            cond_patch: 32,
            channels: vec![16, 32, 64, 64],
            filters: "srm4".into(),
        }
    }
}

impl CilConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cond_patch == 0 {
            return arg_err("cond_patch must be positive");
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return arg_err("CNN needs at least one stage with positive width");
        }
        self.kernels().map(|_| ())
    }

    pub fn kernels(&self) -> Result<&'static [Kernel]> {
        match self.filters.as_str() {
            "srm4" => Ok(&DEFAULT_KERNELS),
            other => arg_err(format!("unknown filter set `{other}`")),
        }
    }

    /// Residual planes fed to the extractors.
    pub fn in_channels(&self) -> Result<usize> {
        Ok(3 * self.kernels()?.len())
    }

    /// Patch budget for a square view of side `view_size`.
    pub fn patch_budget(&self, view_size: usize) -> usize {
        (view_size / self.cond_patch).pow(2)
    }
}

/// Parameter-free part of condition extraction for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCondition {
    pub residuals: ResidualStack,
    /// `(row, col)` of the selected patch in patch units.
    pub position: (usize, usize),
}

/// Tiles the view, picks the richest patch and applies the residual filters.
pub fn prepare_condition(view: &Image, cfg: &CilConfig) -> Result<PreparedCondition> {
    let grid = partition_patches(view, cfg.cond_patch)?;
    let (_, patch, position) = select_richest_patch(&grid)?;
    Ok(PreparedCondition {
        residuals: highpass_residual_with(patch, cfg.kernels()?),
        position,
    })
}

/// Stride-2 conv + ReLU stages, global average pooling, linear map to `D`.
pub fn cnn_forward<'p>(g: &mut Graph<'p>, b: &Binder<'p>, prefix: &str, residuals: Var, cfg: &CilConfig) -> Result<Var> {
    let mut x = residuals;
    for stage in 0..cfg.channels.len() {
        let w = b.bind(g, &format!("{prefix}.conv{stage}.weight"))?;
        let bias = b.bind(g, &format!("{prefix}.conv{stage}.bias"))?;
        let y = g.conv2d(x, w, bias, 2, 1)?;
        x = g.relu(y);
    }
    let pooled = g.mean_pool(x)?;
    let w = b.bind(g, &format!("{prefix}.proj.weight"))?;
    let bias = b.bind(g, &format!("{prefix}.proj.bias"))?;
    let y = g.matmul(pooled, w)?;
    g.add_bias(y, bias)
}

#[derive(Debug, Clone, Copy)]
pub struct ConditionVars {
    pub forgery: Var,
    pub image: Var,
}

/// Runs both extractors on prepared residuals.
pub fn extract_conditions<'p>(
    g: &mut Graph<'p>,
    b: &Binder<'p>,
    prepared: &PreparedCondition,
    cfg: &CilConfig,
) -> Result<ConditionVars> {
    let input = g.input(prepared.residuals.planes.clone());
    let forgery = cnn_forward(g, b, FORGERY, input, cfg)?;
    let image = cnn_forward(g, b, IMAGE, input, cfg)?;
    Ok(ConditionVars { forgery, image })
}

/// Auxiliary single-layer head on the forgery-specific condition.
pub fn aux_logit<'p>(g: &mut Graph<'p>, b: &Binder<'p>, forgery: Var) -> Result<Var> {
    let w = b.bind(g, "cil.aux.weight")?;
    let bias = b.bind(g, "cil.aux.bias")?;
    g.linear_scalar(forgery, w, bias)
}

/// `[alpha_f ⊙ C_f + A[0]; alpha_i ⊙ C_i + A[1]]`.
pub fn build_prompt(
    g: &mut Graph<'_>,
    cond: ConditionVars,
    adaptive: Var,
    alpha_f: Var,
    alpha_i: Var,
) -> Result<Var> {
    let a = g.value(adaptive);
    let d = a.cols();
    if a.rows() != 2 {
        return arg_err(format!("adaptive tokens have {} rows, prompts need 2", a.rows()));
    }
    for v in [cond.forgery, cond.image, alpha_f, alpha_i] {
        if g.value(v).numel() != d {
            return arg_err("condition or gate width does not match the adaptive tokens");
        }
    }
    let a0 = g.slice_rows(adaptive, 0, 1)?;
    let a1 = g.slice_rows(adaptive, 1, 1)?;
    let f = g.mul_row(cond.forgery, alpha_f)?;
    let row0 = g.add(f, a0)?;
    let i = g.mul_row(cond.image, alpha_i)?;
    let row1 = g.add(i, a1)?;
    g.concat_rows(&[row0, row1])
}

/// Plain-valued condition pair of a view.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionPair {
    pub forgery: Vec<f64>,
    pub image: Vec<f64>,
    pub source_position: (usize, usize),
}

pub fn condition_pair(params: &ModelParams, view: &Image, cfg: &CilConfig) -> Result<ConditionPair> {
    let prepared = prepare_condition(view, cfg)?;
    let mask = TrainMask::none(params);
    let b = Binder::new(params, &mask);
    let mut g = Graph::new();
    let c = extract_conditions(&mut g, &b, &prepared, cfg)?;
    Ok(ConditionPair {
        forgery: g.value(c.forgery).data().to_vec(),
        image: g.value(c.image).data().to_vec(),
        source_position: prepared.position,
    })
}
