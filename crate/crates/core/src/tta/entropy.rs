use crate::error::{arg_err, Result};
use crate::training::sigmoid;

/// Probability clamp keeping logarithms finite.
pub const PROB_CLAMP: f64 = 1e-12;

/// `S_c = 2·|σ(z) − 0.5|`.
pub fn confidence(z: f64) -> f64 {
    // σ(|z|) keeps the value exactly symmetric in the sign of z.
    2.0 * (sigmoid(z.abs()) - 0.5)
}

/// Indices of the `m` most confident logits, most confident first; equal
/// confidence keeps the lower index first.
pub fn select_confident(logits: &[f64], m: usize) -> Result<Vec<usize>> {
    if m > logits.len() {
        return arg_err(format!("cannot select {m} of {} views", logits.len()));
    }
    let conf: Vec<f64> = logits.iter().map(|&z| confidence(z)).collect();
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]));
    idx.truncate(m);
    Ok(idx)
}

/// Candidate with the highest confidence; ties go to the lower view index.
pub fn select_optimal_view(candidates: &[usize], logits: &[f64]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &i in candidates {
        let Some(&z) = logits.get(i) else {
            return arg_err(format!("view {i} has no logit"));
        };
        let c = confidence(z);
        match best {
            Some((bi, bc)) if c < bc || (c == bc && i > bi) => {}
            _ => best = Some((i, c)),
        }
    }
    best.map(|(i, _)| i).ok_or_else(|| crate::IaplError::Argument("no candidate views".into()))
}

fn binary_entropy(p: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
}

fn non_empty(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return arg_err("entropy of an empty view set");
    }
    Ok(())
}

/// Binary entropy of the mean view probability.
pub fn averaged_entropy(logits: &[f64]) -> Result<f64> {
    non_empty(logits)?;
    let mean = logits.iter().map(|&z| sigmoid(z)).sum::<f64>() / logits.len() as f64;
    Ok(binary_entropy(mean))
}

/// Mean of the per-view binary entropies.
pub fn pointwise_entropy(logits: &[f64]) -> Result<f64> {
    non_empty(logits)?;
    Ok(logits.iter().map(|&z| binary_entropy(sigmoid(z))).sum::<f64>() / logits.len() as f64)
}

/// `∂ averaged_entropy / ∂ z_k`. Zero while the mean sits in the clamp.
pub fn averaged_entropy_grad(logits: &[f64]) -> Result<Vec<f64>> {
    non_empty(logits)?;
    let m = logits.len() as f64;
    let p: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let mean = p.iter().sum::<f64>() / m;
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&mean) {
        return Ok(vec![0.0; logits.len()]);
    }
    let dh = ((1.0 - mean) / mean).ln();
    Ok(p.iter().map(|&pk| dh * pk * (1.0 - pk) / m).collect())
}

/// `∂ pointwise_entropy / ∂ z_k`, using `ln((1 − σ)/σ) = −z`.
pub fn pointwise_entropy_grad(logits: &[f64]) -> Result<Vec<f64>> {
    non_empty(logits)?;
    let m = logits.len() as f64;
    Ok(logits
        .iter()
        .map(|&z| {
            let p = sigmoid(z);
            if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                -z * p * (1.0 - p) / m
            } else {
                0.0
            }
        })
        .collect())
}
