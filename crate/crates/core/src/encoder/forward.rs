use rand::{Rng, RngCore};

use super::config::EncoderConfig;
use crate::autograd::{Graph, Var};
use crate::error::{arg_err, Result};
use crate::imaging::Image;
use crate::params::Binder;
use crate::tensor::Tensor;

/// Forward-pass mode. Training enables adapter dropout.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub logit: Var,
    /// Normalized final CLS feature `[1, D]`.
    pub cls: Var,
    /// Input sequence length of every block.
    pub seq_lens: Vec<usize>,
}

/// Flattens non-overlapping `patch × patch` tiles into rows of `3·patch²`
/// values ordered `(y, x, channel)`.
pub fn patchify(view: &Image, patch: usize) -> Result<Tensor> {
    let (h, w) = (view.height(), view.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return arg_err(format!("{h}x{w} view cannot be tiled by {patch}"));
    }
    let (rows, cols) = (h / patch, w / patch);
    let pd = 3 * patch * patch;
    let mut data = Vec::with_capacity(rows * cols * pd);
    for r in 0..rows {
        for c in 0..cols {
            for y in 0..patch {
                let start = ((r * patch + y) * w + c * patch) * 3;
                data.extend_from_slice(&view.data()[start..start + patch * 3]);
            }
        }
    }
    Tensor::matrix(rows * cols, pd, data)
}

/// `[cls; image tokens] + positional embeddings`, shape `[N + 1, D]`.
pub fn patch_embed<'p>(g: &mut Graph<'p>, b: &Binder<'p>, view: &Image, cfg: &EncoderConfig) -> Result<Var> {
    if view.height() != cfg.view_size || view.width() != cfg.view_size {
        return arg_err(format!(
            "view is {}x{}, encoder expects {}x{}",
            view.width(),
            view.height(),
            cfg.view_size,
            cfg.view_size
        ));
    }
    let x = g.input(patchify(view, cfg.patch)?);
    let w = b.bind(g, "embed.patch.weight")?;
    let bias = b.bind(g, "embed.patch.bias")?;
    let tokens = g.matmul_t(x, false, w, true)?;
    let tokens = g.add_bias(tokens, bias)?;
    let cls = b.bind(g, "embed.cls")?;
    let seq = g.concat_rows(&[cls, tokens])?;
    let pos = b.bind(g, "embed.pos")?;
    g.add(seq, pos)
}

/// `alpha ⊙ prev + tokens`, the channel gate broadcast over prompt rows.
pub fn gated_fuse(g: &mut Graph<'_>, prev: Var, tokens: Var, alpha: Var) -> Result<Var> {
    let (ps, ts) = (g.value(prev).shape().to_vec(), g.value(tokens).shape().to_vec());
    if ps != ts {
        return arg_err(format!("prompt shape {ps:?} does not match tokens {ts:?}"));
    }
    let carried = g.mul_row(prev, alpha)?;
    g.add(carried, tokens)
}

/// `s · dropout(ReLU(x · W_down)) · W_up` for the adapter of block `block`.
pub fn adapter_forward<'p>(
    g: &mut Graph<'p>,
    b: &Binder<'p>,
    x: Var,
    block: usize,
    cfg: &EncoderConfig,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let down = b.bind(g, &format!("adapters.{block}.down"))?;
    let up = b.bind(g, &format!("adapters.{block}.up"))?;
    let h = g.matmul(x, down)?;
    let mut h = g.relu(h);
    if let Mode::Train(rng) = mode {
        if cfg.dropout > 0.0 {
            let keep = 1.0 / (1.0 - cfg.dropout);
            let mask = (0..g.value(h).numel())
                .map(|_| if rng.gen_bool(cfg.dropout) { 0.0 } else { keep })
                .collect();
            h = g.mask(h, mask)?;
        }
    }
    let out = g.matmul(h, up)?;
    Ok(g.scale(out, cfg.adapter_scale))
}

fn linear<'p>(g: &mut Graph<'p>, b: &Binder<'p>, x: Var, prefix: &str) -> Result<Var> {
    let w = b.bind(g, &format!("{prefix}.weight"))?;
    let bias = b.bind(g, &format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, bias)
}

fn block_forward<'p>(
    g: &mut Graph<'p>,
    b: &Binder<'p>,
    x: Var,
    j: usize,
    with_adapter: bool,
    cfg: &EncoderConfig,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let p = format!("blocks.{j}");
    let gain = b.bind(g, &format!("{p}.ln1.gain"))?;
    let bias = b.bind(g, &format!("{p}.ln1.bias"))?;
    let h = g.layer_norm(x, gain, bias)?;
    let qkv = linear(g, b, h, &format!("{p}.attn.qkv"))?;
    let att = g.attention(qkv, cfg.heads)?;
    let att = linear(g, b, att, &format!("{p}.attn.proj"))?;
    let x = g.add(x, att)?;

    let gain = b.bind(g, &format!("{p}.ln2.gain"))?;
    let bias = b.bind(g, &format!("{p}.ln2.bias"))?;
    let h = g.layer_norm(x, gain, bias)?;
    let m = linear(g, b, h, &format!("{p}.mlp.fc1"))?;
    let m = g.gelu(m);
    let mut m = linear(g, b, m, &format!("{p}.mlp.fc2"))?;
    if with_adapter {
        let delta = adapter_forward(g, b, h, j, cfg, mode)?;
        m = g.add(m, delta)?;
    }
    g.add(x, m)
}

/// Runs the transformer on one view.
///
/// Block 1 sees `[prompt; cls; image tokens]`. For blocks `2..=N_t` the prompt
/// rows emitted by the previous block are gated into that block's learnable
/// tokens; after block `N_t` prompt rows leave the sequence.
pub fn encoder_forward<'p>(
    g: &mut Graph<'p>,
    b: &Binder<'p>,
    view: &Image,
    prompt: Option<Var>,
    cfg: &EncoderConfig,
    mode: &mut Mode<'_>,
) -> Result<EncoderOutput> {
    let m = cfg.tokens_per_block;
    if let Some(p) = prompt {
        let shape = g.value(p).shape();
        if shape != [m, cfg.dim] {
            return arg_err(format!(
                "prompt shape {shape:?}, expected [{m}, {}]",
                cfg.dim
            ));
        }
    }
    let adapters = if cfg.use_adapters {
        cfg.adapter_blocks()?
    } else {
        Vec::new()
    };
    let base = patch_embed(g, b, view, cfg)?;
    let base_len = g.value(base).rows();

    let mut x = match prompt {
        Some(p) => g.concat_rows(&[p, base])?,
        None => base,
    };
    let mut has_prompt = prompt.is_some();
    let mut seq_lens = Vec::with_capacity(cfg.depth);
    for j in 1..=cfg.depth {
        if j >= 2 && j <= cfg.last_token_block && cfg.use_tokens {
            let tokens = b.bind(g, &format!("tokens.{j}"))?;
            let rest = g.slice_rows(x, if has_prompt { m } else { 0 }, base_len)?;
            let fused = if has_prompt {
                let prev = g.slice_rows(x, 0, m)?;
                let alpha = b.bind(g, &format!("gates.{j}"))?;
                gated_fuse(g, prev, tokens, alpha)?
            } else {
                tokens
            };
            x = g.concat_rows(&[fused, rest])?;
            has_prompt = true;
        } else if j == cfg.last_token_block + 1 && has_prompt {
            x = g.slice_rows(x, m, base_len)?;
            has_prompt = false;
        }
        seq_lens.push(g.value(x).rows());
        x = block_forward(g, b, x, j, adapters.contains(&j), cfg, mode)?;
    }
    let cls = g.slice_rows(x, if has_prompt { m } else { 0 }, 1)?;
    let gain = b.bind(g, "norm.gain")?;
    let bias = b.bind(g, "norm.bias")?;
    let cls = g.layer_norm(cls, gain, bias)?;
    let w = b.bind(g, "head.weight")?;
    let hb = b.bind(g, "head.bias")?;
    let logit = g.linear_scalar(cls, w, hb)?;
    Ok(EncoderOutput { logit, cls, seq_lens })
}
