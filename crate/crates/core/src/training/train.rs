use std::borrow::Cow;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rayon::prelude::*;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::loss::{bce_grad, total_loss, LossValues};
use crate::autograd::Graph;
use crate::data::Sample;
use crate::derived_rng;
use crate::encoder::Mode;
use crate::error::{arg_err, IaplError, Result};
use crate::imaging::{resize_bilinear, Image};
use crate::model::{forward_view, prepare_view, ModelConfig};
use crate::params::{is_backbone, Binder, ModelParams, TrainMask};
use crate::tensor::Tensor;

type SampleGrad = (LossValues, Vec<(usize, Tensor)>);

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    /// Weight of the auxiliary forgery-condition loss.
    pub lambda_aux: f64,
    pub seed: u64,
    /// Keep patch embedding, transformer blocks and final norm fixed.
    pub freeze_backbone: bool,
    /// Random horizontal flips of the training view.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 16,
            epochs: 3,
            adam: AdamConfig::default(),
            lambda_aux: 1.0,
            seed: 0,
            freeze_backbone: false,
            flip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return arg_err(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        if self.batch == 0 {
            return arg_err("batch size must be at least 1");
        }
        if !(self.lambda_aux >= 0.0 && self.lambda_aux.is_finite()) {
            return arg_err("lambda_aux must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub l_cls: f64,
    pub l_aux: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<LogRecord>,
}

/// Loss and parameter gradients of one training view. `rng` drives adapter
/// dropout.
pub fn sample_gradients(
    params: &ModelParams,
    mask: &TrainMask,
    view: &Image,
    label: f64,
    model: &ModelConfig,
    lambda_aux: f64,
    rng: Option<&mut dyn RngCore>,
) -> Result<(LossValues, Vec<(usize, Tensor)>)> {
    let prepared = prepare_view(view, model)?;
    let b = Binder::new(params, mask);
    let mut g = Graph::new();
    let mut mode = match rng {
        Some(r) => Mode::Train(r),
        None => Mode::Eval,
    };
    let out = forward_view(&mut g, &b, view, prepared.as_ref(), model, &mut mode)?;
    let z = g.value(out.logit).data()[0];
    let a = out.aux.map(|v| g.value(v).data()[0]);
    let loss = total_loss(z, a, label, lambda_aux);
    let mut seeds = vec![(out.logit, bce_grad(z, label))];
    if let (Some(v), Some(a)) = (out.aux, a) {
        seeds.push((v, lambda_aux * bce_grad(a, label)));
    }
    Ok((loss, g.backward(&seeds)?.into_vec()))
}

fn global_view(img: &Image, size: usize) -> Result<Cow<'_, Image>> {
    if img.height() == size && img.width() == size {
        Ok(Cow::Borrowed(img))
    } else {
        Ok(Cow::Owned(resize_bilinear(img, size, size)?))
    }
}

// Stream offsets keep shuffling, flips and dropout on separate generators.
const SHUFFLE_STREAM: u64 = 1 << 40;
const SAMPLE_STREAM: u64 = 1 << 41;

/// Mini-batch Adam on the global view of every sample, averaged
/// `L_cls + λ·L_aux` per batch. Per-sample gradients are summed in batch
/// order, so results do not depend on the worker count.
pub fn train(samples: &[Sample], mut params: ModelParams, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    if samples.is_empty() {
        return arg_err("training set is empty");
    }
    let mask = TrainMask::from_fn(&params, |n| !(cfg.freeze_backbone && is_backbone(n)));
    let size = model.encoder.view_size;
    let views: Vec<Cow<'_, Image>> = samples.iter().map(|s| global_view(&s.image, size)).collect::<Result<_>>()?;

    let mut state = AdamState::new();
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut derived_rng(cfg.seed, SHUFFLE_STREAM + epoch as u64));
        for (bi, batch) in order.chunks(cfg.batch).enumerate() {
            let base = (epoch * samples.len() + bi * cfg.batch) as u64;
            let per_sample: Vec<Result<SampleGrad>> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    let mut rng = derived_rng(cfg.seed, SAMPLE_STREAM + base + k as u64);
                    let flipped;
                    let view: &Image = if cfg.flip && rng.gen_bool(0.5) {
                        flipped = views[i].flip_horizontal();
                        &flipped
                    } else {
                        &views[i]
                    };
                    sample_gradients(&params, &mask, view, samples[i].label_f64(), model, cfg.lambda_aux, Some(&mut rng))
                })
                .collect();

            let inv = 1.0 / batch.len() as f64;
            let mut acc: Vec<Option<Tensor>> = vec![None; params.len()];
            let mut mean = LossValues {
                l_cls: 0.0,
                l_aux: 0.0,
                total: 0.0,
            };
            for r in per_sample {
                let (loss, grads) = r?;
                mean.l_cls += loss.l_cls * inv;
                mean.l_aux += loss.l_aux * inv;
                mean.total += loss.total * inv;
                for (idx, mut g) in grads {
                    g.scale(inv);
                    match &mut acc[idx] {
                        Some(t) => t.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            }
            if !mean.total.is_finite() {
                return Err(IaplError::Training {
                    tensor: "loss".into(),
                    msg: format!("non-finite loss at step {step}"),
                });
            }
            let grads: Vec<(usize, Tensor)> = acc.into_iter().enumerate().filter_map(|(i, g)| g.map(|g| (i, g))).collect();
            adam_step(&mut params, &grads, &mut state, cfg.lr, &cfg.adam)?;
            for (idx, _) in &grads {
                params.by_index_mut(*idx).round_to_f32();
            }
            log.push(LogRecord {
                step,
                l_cls: mean.l_cls,
                l_aux: mean.l_aux,
                total: mean.total,
            });
            step += 1;
        }
    }
    Ok(TrainOutcome { params, log })
}

/// Training log as CSV with header `step,L_cls,L_aux,total`.
pub fn write_log_csv(path: impl AsRef<Path>, log: &[LogRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["step", "L_cls", "L_aux", "total"]).map_err(csv_err)?;
    for r in log {
        w.write_record([r.step.to_string(), r.l_cls.to_string(), r.l_aux.to_string(), r.total.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> IaplError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => IaplError::Io(io),
        other => IaplError::Format(format!("{other:?}")),
    }
}
