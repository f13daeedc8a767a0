//! The full detector: conditioner, prompt construction and encoder wired into
//! one differentiable forward pass per view.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::conditioner::{
    aux_logit, build_prompt, extract_conditions, prepare_condition, CilConfig, PreparedCondition,
    FORGERY, IMAGE,
};
use crate::encoder::{encoder_forward, EncoderConfig, EncoderOutput, Mode};
use crate::error::{arg_err, Result};
use crate::imaging::Image;
use crate::params::{Binder, ModelParams, TrainMask};
use crate::tensor::Tensor;

/// How the block-1 prompt is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptMode {
    /// Adaptive tokens gated with per-image conditions.
    Conditioned,
    /// Adaptive tokens used directly as learnable prompt rows.
    Plain,
    /// No block-1 prompt.
    Off,
}

impl std::str::FromStr for PromptMode {
    type Err = crate::error::IaplError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conditioned" => Ok(Self::Conditioned),
            "plain" => Ok(Self::Plain),
            "off" | "none" => Ok(Self::Off),
            other => arg_err(format!("unknown prompt mode `{other}`")),
        }
    }
}

impl std::fmt::Display for PromptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Conditioned => "conditioned",
            Self::Plain => "plain",
            Self::Off => "off",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub cil: CilConfig,
    pub prompt: PromptMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            cil: CilConfig::default(),
            prompt: PromptMode::Conditioned,
        }
    }
}

impl ModelConfig {
    /// Smallest complete model, used for gradient checks: `D = 8`, two
    /// blocks, four image tokens per 8×8 view.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig {
                depth: 2,
                dim: 8,
                heads: 2,
                patch: 4,
                view_size: 8,
                adapter_dim: 2,
                adapter_scale: 0.1,
                n_adapters: 2,
                adapter_layout: crate::encoder::AdapterLayout::Even,
                last_token_block: 2,
                tokens_per_block: 2,
                dropout: 0.1,
                use_adapters: true,
                use_tokens: true,
            },
            cil: CilConfig {
                cond_patch: 8,
                channels: vec![3, 3, 2, 2],
                filters: "srm4".into(),
            },
            prompt: PromptMode::Conditioned,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.prompt == PromptMode::Conditioned {
            self.cil.validate()?;
            if self.encoder.tokens_per_block != 2 {
                return arg_err("conditioned prompts have exactly 2 rows; set tokens_per_block = 2");
            }
            if self.cil.cond_patch > self.encoder.view_size {
                return arg_err(format!(
                    "cond_patch {} exceeds view size {}",
                    self.cil.cond_patch, self.encoder.view_size
                ));
            }
        }
        Ok(())
    }
}

fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    if bound > 0.0 {
        for v in t.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
    }
    t
}

/// Gate value at initialization.
pub const GATE_INIT: f64 = 1e-6;

/// Fresh parameters. Adapter up-projections and the classifier start at zero,
/// every gate at [`GATE_INIT`]; values are stored at `f32` precision.
pub fn init_params<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<ModelParams> {
    cfg.validate()?;
    let e = &cfg.encoder;
    let d = e.dim;
    let bound = 1.0 / (d as f64).sqrt();
    let mut p = ModelParams::new();

    p.insert("embed.patch.weight", uniform(rng, &[d, e.patch_dim()], bound))?;
    p.insert("embed.patch.bias", Tensor::zeros(&[d]))?;
    p.insert("embed.cls", uniform(rng, &[1, d], bound))?;
    p.insert("embed.pos", uniform(rng, &[e.num_patches() + 1, d], bound))?;
    for j in 1..=e.depth {
        let b = format!("blocks.{j}");
        p.insert(format!("{b}.ln1.gain"), Tensor::full(&[d], 1.0))?;
        p.insert(format!("{b}.ln1.bias"), Tensor::zeros(&[d]))?;
        p.insert(format!("{b}.attn.qkv.weight"), uniform(rng, &[d, 3 * d], bound))?;
        p.insert(format!("{b}.attn.qkv.bias"), Tensor::zeros(&[3 * d]))?;
        p.insert(format!("{b}.attn.proj.weight"), uniform(rng, &[d, d], bound))?;
        p.insert(format!("{b}.attn.proj.bias"), Tensor::zeros(&[d]))?;
        p.insert(format!("{b}.ln2.gain"), Tensor::full(&[d], 1.0))?;
        p.insert(format!("{b}.ln2.bias"), Tensor::zeros(&[d]))?;
        p.insert(format!("{b}.mlp.fc1.weight"), uniform(rng, &[d, 4 * d], bound))?;
        p.insert(format!("{b}.mlp.fc1.bias"), Tensor::zeros(&[4 * d]))?;
        p.insert(format!("{b}.mlp.fc2.weight"), uniform(rng, &[4 * d, d], bound))?;
        p.insert(format!("{b}.mlp.fc2.bias"), Tensor::zeros(&[d]))?;
    }
    p.insert("norm.gain", Tensor::full(&[d], 1.0))?;
    p.insert("norm.bias", Tensor::zeros(&[d]))?;
    p.insert("head.weight", Tensor::zeros(&[d]))?;
    p.insert("head.bias", Tensor::zeros(&[1]))?;

    if e.use_adapters {
        // Kaiming-uniform with a = sqrt(5) over fan-in D.
        for j in e.adapter_blocks()? {
            p.insert(format!("adapters.{j}.down"), uniform(rng, &[d, e.adapter_dim], bound))?;
            p.insert(format!("adapters.{j}.up"), Tensor::zeros(&[e.adapter_dim, d]))?;
        }
    }
    if e.use_tokens {
        for j in 2..=e.last_token_block {
            p.insert(format!("tokens.{j}"), uniform(rng, &[e.tokens_per_block, d], bound))?;
            p.insert(format!("gates.{j}"), Tensor::full(&[d], GATE_INIT))?;
        }
    }
    if cfg.prompt != PromptMode::Off {
        p.insert("prompt.adaptive", uniform(rng, &[e.tokens_per_block, d], bound))?;
    }
    if cfg.prompt == PromptMode::Conditioned {
        p.insert("gates.alpha_f", Tensor::full(&[d], GATE_INIT))?;
        p.insert("gates.alpha_i", Tensor::full(&[d], GATE_INIT))?;
        for prefix in [FORGERY, IMAGE] {
            let mut cin = cfg.cil.in_channels()?;
            for (s, &cout) in cfg.cil.channels.iter().enumerate() {
                let kb = (6.0 / (cin * 9) as f64).sqrt();
                p.insert(format!("{prefix}.conv{s}.weight"), uniform(rng, &[cout, cin, 3, 3], kb))?;
                p.insert(format!("{prefix}.conv{s}.bias"), Tensor::zeros(&[cout]))?;
                cin = cout;
            }
            let pb = 1.0 / (cin as f64).sqrt();
            p.insert(format!("{prefix}.proj.weight"), uniform(rng, &[cin, d], pb))?;
            p.insert(format!("{prefix}.proj.bias"), Tensor::zeros(&[d]))?;
        }
        p.insert("cil.aux.weight", uniform(rng, &[d], bound))?;
        p.insert("cil.aux.bias", Tensor::zeros(&[1]))?;
    }
    p.round_to_f32();
    Ok(p)
}

/// Graph handles produced by [`forward_view`].
#[derive(Debug, Clone)]
pub struct ViewForward {
    pub logit: Var,
    pub aux: Option<Var>,
    pub prompt: Option<Var>,
    pub encoder: EncoderOutput,
}

/// Parameter-free preprocessing a view needs before [`forward_view`].
pub fn prepare_view(view: &Image, cfg: &ModelConfig) -> Result<Option<PreparedCondition>> {
    match cfg.prompt {
        PromptMode::Conditioned => Ok(Some(prepare_condition(view, &cfg.cil)?)),
        _ => Ok(None),
    }
}

/// One view through conditioner, prompt fusion and encoder.
pub fn forward_view<'p>(
    g: &mut Graph<'p>,
    b: &Binder<'p>,
    view: &Image,
    cond: Option<&PreparedCondition>,
    cfg: &ModelConfig,
    mode: &mut Mode<'_>,
) -> Result<ViewForward> {
    let (prompt, aux) = match cfg.prompt {
        PromptMode::Off => (None, None),
        PromptMode::Plain => (Some(b.bind(g, "prompt.adaptive")?), None),
        PromptMode::Conditioned => {
            let Some(prepared) = cond else {
                return arg_err("conditioned prompts need a prepared condition");
            };
            let c = extract_conditions(g, b, prepared, &cfg.cil)?;
            let aux = aux_logit(g, b, c.forgery)?;
            let a = b.bind(g, "prompt.adaptive")?;
            let af = b.bind(g, "gates.alpha_f")?;
            let ai = b.bind(g, "gates.alpha_i")?;
            (Some(build_prompt(g, c, a, af, ai)?), Some(aux))
        }
    };
    let encoder = encoder_forward(g, b, view, prompt, &cfg.encoder, mode)?;
    Ok(ViewForward {
        logit: encoder.logit,
        aux,
        prompt,
        encoder,
    })
}

/// Evaluation-mode logit of one view.
pub fn view_logit(params: &ModelParams, view: &Image, cond: Option<&PreparedCondition>, cfg: &ModelConfig) -> Result<f64> {
    let mask = TrainMask::none(params);
    let b = Binder::new(params, &mask);
    let mut g = Graph::new();
    let out = forward_view(&mut g, &b, view, cond, cfg, &mut Mode::Eval)?;
    Ok(g.value(out.logit).data()[0])
}
