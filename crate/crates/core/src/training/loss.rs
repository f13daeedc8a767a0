/// Logistic function, evaluated without overflow for large `|z|`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a logit against a `{0, 1}` label,
/// `max(z, 0) − z·y + ln(1 + e^{−|z|})`.
pub fn bce_loss(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// `d bce / dz = σ(z) − y`.
pub fn bce_grad(z: f64, y: f64) -> f64 {
    sigmoid(z) - y
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub l_cls: f64,
    pub l_aux: f64,
    pub total: f64,
}

/// Classification loss plus the weighted auxiliary loss. Without an
/// auxiliary logit the auxiliary term is zero.
pub fn total_loss(cls_logit: f64, aux_logit: Option<f64>, label: f64, lambda_aux: f64) -> LossValues {
    let l_cls = bce_loss(cls_logit, label);
    let l_aux = aux_logit.map_or(0.0, |a| bce_loss(a, label));
    LossValues {
        l_cls,
        l_aux,
        total: l_cls + lambda_aux * l_aux,
    }
}
