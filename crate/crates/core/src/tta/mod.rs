//! Test-time token tuning: per-image entropy minimization of the adaptive
//! tokens over confident views, and the optimal-view decision.

mod entropy;
mod predict;

pub use self::entropy::{
    averaged_entropy, averaged_entropy_grad, confidence, pointwise_entropy, pointwise_entropy_grad,
    select_confident, select_optimal_view, PROB_CLAMP,
};
pub use self::predict::{
    entropy_gradient, entropy_probe, predict_image, predict_image_detailed, tune_tokens, LossKind, Prediction,
    PredictionDetail, PreparedView, TtaConfig, TuneOutcome, ADAPTIVE,
};
