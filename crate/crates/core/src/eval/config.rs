//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::encoder::AdapterLayout;
use crate::error::{IaplError, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;
use crate::tta::TtaConfig;

/// Everything a training or evaluation run needs besides data.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tta: TtaConfig,
    pub seed: u64,
}

fn cfg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(IaplError::Config(msg.into()))
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| IaplError::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => cfg_err(format!("bad boolean `{value}` for `{key}`")),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_layout(key: &str, value: &str) -> Result<AdapterLayout> {
    if value == "even" {
        return Ok(AdapterLayout::Even);
    }
    match parse_list(key, value)?.as_slice() {
        &[start, end, stride] => Ok(AdapterLayout::Range { start, end, stride }),
        _ => cfg_err(format!("`{key}` is `even` or `start,end,stride`")),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Assigns one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let e = &mut self.model.encoder;
        let t = &mut self.train;
        let v = &mut self.tta;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "model.prompt" => {
                self.model.prompt = value.parse().map_err(|_| IaplError::Config(format!("bad prompt mode `{value}`")))?
            }
            "encoder.depth" => e.depth = parse(key, value)?,
            "encoder.dim" => e.dim = parse(key, value)?,
            "encoder.heads" => e.heads = parse(key, value)?,
            "encoder.patch" => e.patch = parse(key, value)?,
            "encoder.view_size" => e.view_size = parse(key, value)?,
            "encoder.adapter_dim" => e.adapter_dim = parse(key, value)?,
            "encoder.adapter_scale" => e.adapter_scale = parse(key, value)?,
            "encoder.n_adapters" => e.n_adapters = parse(key, value)?,
            "encoder.adapter_layout" => e.adapter_layout = parse_layout(key, value)?,
            "encoder.last_token_block" => e.last_token_block = parse(key, value)?,
            "encoder.tokens_per_block" => e.tokens_per_block = parse(key, value)?,
            "encoder.dropout" => e.dropout = parse(key, value)?,
            "encoder.adapters" => e.use_adapters = parse_bool(key, value)?,
            "encoder.tokens" => e.use_tokens = parse_bool(key, value)?,
            "cil.cond_patch" => self.model.cil.cond_patch = parse(key, value)?,
            "cil.channels" => self.model.cil.channels = parse_list(key, value)?,
            "cil.filters" => self.model.cil.filters = value.to_string(),
            "train.lr" => t.lr = parse(key, value)?,
            "train.batch" => t.batch = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.beta1" => t.adam.beta1 = parse(key, value)?,
            "train.beta2" => t.adam.beta2 = parse(key, value)?,
            "train.eps" => t.adam.eps = parse(key, value)?,
            "train.lambda_aux" => t.lambda_aux = parse(key, value)?,
            "train.freeze_backbone" => t.freeze_backbone = parse_bool(key, value)?,
            "train.flip" => t.flip = parse_bool(key, value)?,
            "tta.n_views" => v.n_views = parse(key, value)?,
            "tta.m" => v.m = parse(key, value)?,
            "tta.steps" => v.steps = parse(key, value)?,
            "tta.lr" => v.lr = parse(key, value)?,
            "tta.loss" => v.loss = value.parse().map_err(|_| IaplError::Config(format!("bad loss `{value}`")))?,
            "tta.enabled" => v.enabled = parse_bool(key, value)?,
            "tta.ovs" => v.ovs = parse_bool(key, value)?,
            "tta.conf_sel" => v.conf_sel = parse_bool(key, value)?,
            "tta.beta1" => v.adam.beta1 = parse(key, value)?,
            "tta.beta2" => v.adam.beta2 = parse(key, value)?,
            "tta.eps" => v.adam.eps = parse(key, value)?,
            _ => return cfg_err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses config text over the defaults. `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    /// Applies config text on top of `self`.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return cfg_err(format!("line {}: expected `key = value`", n + 1));
            };
            self.set(k.trim(), v.trim())
                .map_err(|e| IaplError::Config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| IaplError::Config(format!("{}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    /// Model, training and TTA settings are all checked.
    pub fn validate(&self) -> Result<()> {
        let wrap = |r: Result<()>| r.map_err(|e| IaplError::Config(strip(e)));
        wrap(self.model.validate())?;
        wrap(self.train.validate())?;
        wrap(self.tta.validate())
    }

    /// Every key with its current value, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let e = &self.model.encoder;
        let t = &self.train;
        let v = &self.tta;
        let layout = match e.adapter_layout {
            AdapterLayout::Even => "even".to_string(),
            AdapterLayout::Range { start, end, stride } => format!("{start},{end},{stride}"),
        };
        vec![
            ("seed", self.seed.to_string()),
            ("model.prompt", self.model.prompt.to_string()),
            ("encoder.depth", e.depth.to_string()),
            ("encoder.dim", e.dim.to_string()),
            ("encoder.heads", e.heads.to_string()),
            ("encoder.patch", e.patch.to_string()),
            ("encoder.view_size", e.view_size.to_string()),
            ("encoder.adapter_dim", e.adapter_dim.to_string()),
            ("encoder.adapter_scale", e.adapter_scale.to_string()),
            ("encoder.n_adapters", e.n_adapters.to_string()),
            ("encoder.adapter_layout", layout),
            ("encoder.last_token_block", e.last_token_block.to_string()),
            ("encoder.tokens_per_block", e.tokens_per_block.to_string()),
            ("encoder.dropout", e.dropout.to_string()),
            ("encoder.adapters", e.use_adapters.to_string()),
            ("encoder.tokens", e.use_tokens.to_string()),
            ("cil.cond_patch", self.model.cil.cond_patch.to_string()),
            ("cil.channels", join(&self.model.cil.channels)),
            ("cil.filters", self.model.cil.filters.clone()),
            ("train.lr", t.lr.to_string()),
            ("train.batch", t.batch.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.beta1", t.adam.beta1.to_string()),
            ("train.beta2", t.adam.beta2.to_string()),
            ("train.eps", t.adam.eps.to_string()),
            ("train.lambda_aux", t.lambda_aux.to_string()),
            ("train.freeze_backbone", t.freeze_backbone.to_string()),
            ("train.flip", t.flip.to_string()),
            ("tta.n_views", v.n_views.to_string()),
            ("tta.m", v.m.to_string()),
            ("tta.steps", v.steps.to_string()),
            ("tta.lr", v.lr.to_string()),
            ("tta.loss", v.loss.to_string()),
            ("tta.enabled", v.enabled.to_string()),
            ("tta.ovs", v.ovs.to_string()),
            ("tta.conf_sel", v.conf_sel.to_string()),
            ("tta.beta1", v.adam.beta1.to_string()),
            ("tta.beta2", v.adam.beta2.to_string()),
            ("tta.eps", v.adam.eps.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

// Drops the variant prefix so nested errors read cleanly.
fn strip(e: IaplError) -> String {
    match e {
        IaplError::Argument(m) | IaplError::Config(m) => m,
        other => other.to_string(),
    }
}
