use rand::Rng;

use super::entropy::{
    averaged_entropy, averaged_entropy_grad, confidence, pointwise_entropy, pointwise_entropy_grad,
    select_confident, select_optimal_view,
};
use crate::autograd::Graph;
use crate::conditioner::PreparedCondition;
use crate::encoder::Mode;
use crate::error::{arg_err, IaplError, Result};
use crate::imaging::{generate_views, resize_bilinear, Image};
use crate::model::{forward_view, prepare_view, ModelConfig};
use crate::params::{Binder, ModelParams, TrainMask};
use crate::tensor::Tensor;
use crate::training::{adam_step, sigmoid, AdamConfig, AdamState};

/// Name of the test-time adaptive tokens.
pub const ADAPTIVE: &str = "prompt.adaptive";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Averaged,
    Pointwise,
}

impl std::str::FromStr for LossKind {
    type Err = IaplError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "averaged" => Ok(Self::Averaged),
            "pointwise" => Ok(Self::Pointwise),
            other => arg_err(format!("unknown entropy loss `{other}`")),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Averaged => "averaged",
            Self::Pointwise => "pointwise",
        })
    }
}

impl LossKind {
    pub fn value(self, logits: &[f64]) -> Result<f64> {
        match self {
            Self::Averaged => averaged_entropy(logits),
            Self::Pointwise => pointwise_entropy(logits),
        }
    }

    pub fn grad(self, logits: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Averaged => averaged_entropy_grad(logits),
            Self::Pointwise => pointwise_entropy_grad(logits),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtaConfig {
    pub n_views: usize,
    /// Views kept by confidence selection.
    pub m: usize,
    pub steps: usize,
    pub lr: f64,
    pub loss: LossKind,
    /// Tune the adaptive tokens.
    pub enabled: bool,
    /// Decide from the most confident tuned view instead of the global view.
    pub ovs: bool,
    /// Keep only the `m` most confident views; otherwise use all of them.
    pub conf_sel: bool,
    pub adam: AdamConfig,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            n_views: 32,
            m: 6,
            steps: 2,
            lr: 5e-3,
            loss: LossKind::Averaged,
            enabled: true,
            ovs: true,
            conf_sel: true,
            adam: AdamConfig::default(),
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_views == 0 || self.m == 0 || self.m > self.n_views {
            return arg_err(format!("need 1 <= m ({}) <= n_views ({})", self.m, self.n_views));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return arg_err(format!("tta learning rate {} must be finite and non-negative", self.lr));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub logit: f64,
    pub prob: f64,
    pub confidence: f64,
    /// View that produced the decision; 0 is the global view.
    pub view_index: usize,
    pub label_hat: u8,
}

impl Prediction {
    pub fn from_logit(logit: f64, view_index: usize) -> Self {
        let prob = sigmoid(logit);
        Self {
            logit,
            prob,
            confidence: confidence(logit),
            view_index,
            label_hat: u8::from(prob >= 0.5),
        }
    }
}

/// A view with its parameter-free condition inputs.
#[derive(Debug, Clone)]
pub struct PreparedView {
    pub image: Image,
    pub cond: Option<PreparedCondition>,
}

impl PreparedView {
    pub fn new(image: Image, model: &ModelConfig) -> Result<Self> {
        let cond = prepare_view(&image, model)?;
        Ok(Self { image, cond })
    }
}

/// Evaluation-mode logits of `views` under `params`.
fn view_logits(params: &ModelParams, views: &[&PreparedView], model: &ModelConfig) -> Result<Vec<f64>> {
    let mask = TrainMask::none(params);
    let b = Binder::new(params, &mask);
    views
        .iter()
        .map(|v| {
            let mut g = Graph::new();
            let out = forward_view(&mut g, &b, &v.image, v.cond.as_ref(), model, &mut Mode::Eval)?;
            Ok(g.value(out.logit).data()[0])
        })
        .collect()
}

/// Entropy objective over `views` and its gradient with respect to the
/// adaptive tokens alone.
pub fn entropy_gradient(
    params: &ModelParams,
    views: &[&PreparedView],
    model: &ModelConfig,
    kind: LossKind,
) -> Result<(f64, Tensor)> {
    let idx = params
        .index_of(ADAPTIVE)
        .ok_or_else(|| IaplError::Argument("model has no adaptive tokens to tune".into()))?;
    let mask = TrainMask::only(params, &[ADAPTIVE]);
    let b = Binder::new(params, &mask);
    let mut graphs = Vec::with_capacity(views.len());
    let mut logits = Vec::with_capacity(views.len());
    for v in views {
        let mut g = Graph::new();
        let out = forward_view(&mut g, &b, &v.image, v.cond.as_ref(), model, &mut Mode::Eval)?;
        logits.push(g.value(out.logit).data()[0]);
        graphs.push((g, out.logit));
    }
    let loss = kind.value(&logits)?;
    let dz = kind.grad(&logits)?;
    let mut grad = Tensor::zeros(params.by_index(idx).shape());
    for ((g, z), d) in graphs.iter().zip(dz) {
        for (k, t) in g.backward(&[(*z, d)])?.iter() {
            if k == idx {
                grad.add_assign(t);
            }
        }
    }
    Ok((loss, grad))
}

/// Entropy objective plus the concatenated ReLU pattern of every view, for
/// finite-difference checks.
pub fn entropy_probe(
    params: &ModelParams,
    views: &[&PreparedView],
    model: &ModelConfig,
    kind: LossKind,
) -> Result<(f64, Vec<bool>)> {
    let mask = TrainMask::none(params);
    let b = Binder::new(params, &mask);
    let mut logits = Vec::with_capacity(views.len());
    let mut pattern = Vec::new();
    for v in views {
        let mut g = Graph::new();
        let out = forward_view(&mut g, &b, &v.image, v.cond.as_ref(), model, &mut Mode::Eval)?;
        logits.push(g.value(out.logit).data()[0]);
        pattern.extend(g.relu_pattern());
    }
    Ok((kind.value(&logits)?, pattern))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    /// Tuned copy of the adaptive tokens.
    pub adaptive: Tensor,
    /// Objective before each step.
    pub losses: Vec<f64>,
}

/// `cfg.steps` Adam steps on a copy of the adaptive tokens, minimizing the
/// entropy objective over `views`. `params` is never modified; the
/// optimizer state lives only for this call.
pub fn tune_tokens(params: &ModelParams, views: &[&PreparedView], model: &ModelConfig, cfg: &TtaConfig) -> Result<TuneOutcome> {
    if views.is_empty() {
        return arg_err("no views to tune on");
    }
    let idx = params
        .index_of(ADAPTIVE)
        .ok_or_else(|| IaplError::Argument("model has no adaptive tokens to tune".into()))?;
    let mut work = params.clone();
    let mut state = AdamState::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let (loss, grad) = entropy_gradient(&work, views, model, cfg.loss)?;
        if !loss.is_finite() {
            return Err(IaplError::Training {
                tensor: ADAPTIVE.into(),
                msg: format!("non-finite entropy {loss}"),
            });
        }
        losses.push(loss);
        adam_step(&mut work, &[(idx, grad)], &mut state, cfg.lr, &cfg.adam)?;
    }
    Ok(TuneOutcome {
        adaptive: work.by_index(idx).clone(),
        losses,
    })
}

/// Everything [`predict_image`] computed on the way to its decision.
#[derive(Debug, Clone)]
pub struct PredictionDetail {
    pub prediction: Prediction,
    /// Logits of every view with the trained tokens.
    pub initial_logits: Vec<f64>,
    /// Views kept by confidence selection, most confident first.
    pub selected: Vec<usize>,
    /// Logits of the selected views after tuning, in `selected` order.
    pub tuned_logits: Vec<f64>,
    /// Entropy over the selected views before and after tuning.
    pub loss_before: Option<f64>,
    pub loss_after: Option<f64>,
    /// Tuning failure; the decision then falls back to the untuned tokens.
    pub tta_error: Option<String>,
}

/// Classifies one image. See [`predict_image_detailed`].
pub fn predict_image<R: Rng>(
    params: &ModelParams,
    img: &Image,
    model: &ModelConfig,
    cfg: &TtaConfig,
    rng: &mut R,
    sample: usize,
) -> Result<Prediction> {
    predict_image_detailed(params, img, model, cfg, rng, sample).map(|d| d.prediction)
}

/// Views → trained-token logits → confident subset → token tuning → tuned
/// logits → decision. With optimal-view selection the most confident tuned
/// view decides, otherwise the global view does. Tuned tokens are dropped on
/// return.
pub fn predict_image_detailed<R: Rng>(
    params: &ModelParams,
    img: &Image,
    model: &ModelConfig,
    cfg: &TtaConfig,
    rng: &mut R,
    sample: usize,
) -> Result<PredictionDetail> {
    cfg.validate()?;
    let size = model.encoder.view_size;
    if !cfg.enabled && !cfg.ovs {
        let global = PreparedView::new(resize_bilinear(img, size, size)?, model)?;
        let z = view_logits(params, &[&global], model)?[0];
        return Ok(PredictionDetail {
            prediction: Prediction::from_logit(z, 0),
            initial_logits: vec![z],
            selected: vec![0],
            tuned_logits: vec![z],
            loss_before: None,
            loss_after: None,
            tta_error: None,
        });
    }

    let set = generate_views(img, cfg.n_views, size, rng)?;
    let views: Vec<PreparedView> = set
        .views
        .into_iter()
        .map(|v| PreparedView::new(v, model))
        .collect::<Result<_>>()?;
    let all: Vec<&PreparedView> = views.iter().collect();
    let initial = view_logits(params, &all, model)?;
    let selected = if cfg.conf_sel {
        select_confident(&initial, cfg.m)?
    } else {
        (0..views.len()).collect()
    };
    let chosen: Vec<&PreparedView> = selected.iter().map(|&i| &views[i]).collect();
    let before: Vec<f64> = selected.iter().map(|&i| initial[i]).collect();

    let mut tta_error = None;
    let mut tuned_params = None;
    if cfg.enabled {
        match tune_tokens(params, &chosen, model, cfg) {
            Ok(t) => {
                let mut p = params.clone();
                *p.get_mut(ADAPTIVE)? = t.adaptive;
                tuned_params = Some(p);
            }
            Err(e) => {
                tta_error = Some(
                    IaplError::Tta {
                        sample,
                        msg: e.to_string(),
                    }
                    .to_string(),
                )
            }
        }
    }
    let (tuned, global_logit) = match &tuned_params {
        Some(p) => {
            let tuned = view_logits(p, &chosen, model)?;
            let global = match selected.iter().position(|&i| i == 0) {
                Some(k) => tuned[k],
                None => view_logits(p, &[&views[0]], model)?[0],
            };
            (tuned, global)
        }
        None => (before.clone(), initial[0]),
    };

    let prediction = if cfg.ovs {
        let mut by_view = vec![0.0; views.len()];
        for (&i, &z) in selected.iter().zip(&tuned) {
            by_view[i] = z;
        }
        let best = select_optimal_view(&selected, &by_view)?;
        Prediction::from_logit(by_view[best], best)
    } else {
        Prediction::from_logit(global_logit, 0)
    };
    let (loss_before, loss_after) = if cfg.enabled {
        (Some(cfg.loss.value(&before)?), Some(cfg.loss.value(&tuned)?))
    } else {
        (None, None)
    };
    Ok(PredictionDetail {
        prediction,
        initial_logits: initial,
        selected,
        tuned_logits: tuned,
        loss_before,
        loss_after,
        tta_error,
    })
}
