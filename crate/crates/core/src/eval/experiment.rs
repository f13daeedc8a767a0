use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;

use super::config::RunConfig;
use super::report::{MetricsReport, Scored};
use crate::data::{build_dataset, DatasetSpec, Sample};
use crate::derived_rng;
use crate::error::{IaplError, Result};
use crate::model::{init_params, ModelConfig, PromptMode};
use crate::params::ModelParams;
use crate::training::{load_checkpoint, train, LogRecord};
use crate::tta::{predict_image_detailed, PredictionDetail};

const INIT_STREAM: u64 = 1 << 42;
const EVAL_STREAM: u64 = 1 << 43;

/// Component switches. Each `false` removes one piece of the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationFlags {
    pub adapters: bool,
    pub tokens: bool,
    /// Off: the adaptive tokens become plain learnable prompt rows.
    pub prompts: bool,
    pub tta: bool,
    pub ovs: bool,
    pub conf_sel: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::all(true)
    }
}

impl AblationFlags {
    pub fn all(on: bool) -> Self {
        Self {
            adapters: on,
            tokens: on,
            prompts: on,
            tta: on,
            ovs: on,
            conf_sel: on,
        }
    }

    /// `run` with these switches applied.
    pub fn apply(&self, run: &RunConfig) -> RunConfig {
        let mut out = run.clone();
        out.model.encoder.use_adapters &= self.adapters;
        out.model.encoder.use_tokens &= self.tokens;
        if !self.prompts && out.model.prompt == PromptMode::Conditioned {
            out.model.prompt = PromptMode::Plain;
        }
        out.tta.enabled &= self.tta;
        out.tta.ovs &= self.ovs;
        out.tta.conf_sel &= self.conf_sel;
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub flags: AblationFlags,
    /// Used when no checkpoint is given.
    pub train_data: Option<DatasetSpec>,
    pub test_data: DatasetSpec,
    pub checkpoint: Option<PathBuf>,
}

/// Evaluation results with per-sample detail.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub details: Vec<PredictionDetail>,
}

/// Fresh parameters for `model` under `seed`.
pub fn initial_params(model: &ModelConfig, seed: u64) -> Result<ModelParams> {
    init_params(model, &mut derived_rng(seed, INIT_STREAM))
}

/// Checks that `params` has exactly the tensors `model` expects.
pub fn check_compatible(params: &ModelParams, model: &ModelConfig) -> Result<()> {
    let expected = initial_params(model, 0)?;
    let mismatch = |msg: String| Err(IaplError::Config(format!("checkpoint does not fit the model: {msg}")));
    if expected.len() != params.len() {
        return mismatch(format!("{} tensors, expected {}", params.len(), expected.len()));
    }
    for (name, t) in expected.iter() {
        match params.get(name) {
            Ok(p) if p.shape() == t.shape() => {}
            Ok(p) => return mismatch(format!("`{name}` has shape {:?}, expected {:?}", p.shape(), t.shape())),
            Err(_) => return mismatch(format!("missing `{name}`")),
        }
    }
    Ok(())
}

/// Initializes from `run.seed` and trains on `samples`.
pub fn train_model(run: &RunConfig, samples: &[Sample]) -> Result<(ModelParams, Vec<LogRecord>)> {
    let params = initial_params(&run.model, run.seed)?;
    let mut tcfg = run.train.clone();
    tcfg.seed = run.seed;
    let out = train(samples, params, &run.model, &tcfg)?;
    Ok((out.params, out.log))
}

/// Predicts every sample (sample `i` draws views from its own stream) and
/// aggregates in sample order.
pub fn evaluate(params: &ModelParams, run: &RunConfig, samples: &[Sample]) -> Result<Evaluation> {
    let details: Vec<PredictionDetail> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = derived_rng(run.seed, EVAL_STREAM + i as u64);
            predict_image_detailed(params, &s.image, &run.model, &run.tta, &mut rng, i)
        })
        .collect::<Result<_>>()?;
    let scored: Vec<Scored> = details
        .iter()
        .zip(samples)
        .map(|(d, s)| Scored {
            prob: d.prediction.prob,
            label: s.label,
            family: s.family,
        })
        .collect();
    let config: BTreeMap<String, String> = run.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    let mut report = MetricsReport::from_scores(&scored, run.seed, config)?;
    report.tta_failures = details.iter().filter(|d| d.tta_error.is_some()).count();
    Ok(Evaluation { report, details })
}

fn describe(spec: &DatasetSpec) -> String {
    match spec {
        DatasetSpec::Synthetic { counts, size, seed, .. } => {
            let c: Vec<String> = counts.iter().map(|(f, n)| format!("{f}={n}")).collect();
            format!("synthetic {} size {size} seed {seed}", c.join(","))
        }
        DatasetSpec::Directory { root } => root.display().to_string(),
    }
}

/// Trains (or loads), evaluates the test set and reports.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let start = Instant::now();
    let run = cfg.flags.apply(&cfg.run);
    run.validate()?;
    let params = match (&cfg.checkpoint, &cfg.train_data) {
        (Some(path), _) => {
            let p = load_checkpoint(path)?;
            check_compatible(&p, &run.model)?;
            p
        }
        (None, Some(spec)) => train_model(&run, &build_dataset(spec)?)?.0,
        (None, None) => return Err(IaplError::Config("need a checkpoint or training data".into())),
    };
    let test = build_dataset(&cfg.test_data)?;
    let mut report = evaluate(&params, &run, &test)?.report;
    if let Some(spec) = &cfg.train_data {
        report.config.insert("data.train".into(), describe(spec));
    }
    report.config.insert("data.test".into(), describe(&cfg.test_data));
    report.wall_time = start.elapsed().as_secs_f64();
    Ok(report)
}
