use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::total_loss;
use super::train::sample_gradients;
use crate::autograd::Graph;
use crate::encoder::Mode;
use crate::error::{arg_err, Result};
use crate::imaging::Image;
use crate::model::{forward_view, init_params, prepare_view, ModelConfig};
use crate::params::{Binder, ModelParams, TrainMask};
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so gradients that vanish
/// analytically compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-7;

/// Step reductions tried when a difference straddles a ReLU kink.
const MAX_SHRINK: u32 = 4;

/// Loss value plus the ReLU sign pattern it was evaluated on.
pub type Probe = (f64, Vec<bool>);

#[derive(Debug, Clone, PartialEq)]
pub struct TensorError {
    pub name: String,
    pub numel: usize,
    /// Largest `|a − n| / max(|a|, |n|, REL_FLOOR)` over the tensor.
    pub max_rel_error: f64,
    /// Elements whose step had to shrink to stay off a ReLU kink.
    pub shrunk: usize,
    /// Elements sitting on a kink at every tried step; excluded from the max.
    pub on_kink: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorError>,
    pub eps: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.numel - t.on_kink).sum()
    }

    pub fn on_kink(&self) -> usize {
        self.tensors.iter().map(|t| t.on_kink).sum()
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares `analytic` gradients against central differences of `loss` for
/// every scalar of every tensor listed in `analytic`.
///
/// A central difference is only meaningful on one linear piece of every
/// ReLU. When the perturbed evaluations change the ReLU pattern the step is
/// divided by ten, up to four times.
pub fn grad_check_with(
    params: &ModelParams,
    analytic: &[(usize, Tensor)],
    eps: f64,
    loss: impl Fn(&ModelParams) -> Result<Probe>,
) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps.is_finite()) {
        return arg_err(format!("finite-difference step must be positive, got {eps}"));
    }
    let (_, base_pattern) = loss(params)?;
    let mut work = params.clone();
    let mut tensors = Vec::with_capacity(analytic.len());
    for (idx, grad) in analytic {
        let mut entry = TensorError {
            name: params.name(*idx).to_string(),
            numel: grad.numel(),
            max_rel_error: 0.0,
            shrunk: 0,
            on_kink: 0,
        };
        for k in 0..grad.numel() {
            let orig = work.by_index(*idx).data()[k];
            let mut numeric = None;
            for j in 0..=MAX_SHRINK {
                let h = eps / 10f64.powi(j as i32);
                work.by_index_mut(*idx).data_mut()[k] = orig + h;
                let (up, pu) = loss(&work)?;
                work.by_index_mut(*idx).data_mut()[k] = orig - h;
                let (down, pd) = loss(&work)?;
                work.by_index_mut(*idx).data_mut()[k] = orig;
                if pu == base_pattern && pd == base_pattern {
                    entry.shrunk += usize::from(j > 0);
                    numeric = Some((up - down) / (2.0 * h));
                    break;
                }
            }
            match numeric {
                Some(n) => entry.max_rel_error = entry.max_rel_error.max(relative_error(grad.data()[k], n)),
                None => entry.on_kink += 1,
            }
        }
        tensors.push(entry);
    }
    Ok(GradCheckReport { tensors, eps })
}

/// Draws the tiny model, replaces every constant-initialized tensor (zero
/// projections, gates, biases, norm affines) with random values so no
/// gradient path is trivially zero, and checks the gradient of
/// `L_cls + L_aux` for one random view in evaluation mode.
pub fn grad_check(seed: u64, eps: f64) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps.is_finite()) {
        return arg_err(format!("finite-difference step must be positive, got {eps}"));
    }
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(&cfg, &mut rng)?;
    for i in 0..params.len() {
        let t = params.by_index_mut(i);
        let first = t.data()[0];
        if t.data().iter().all(|&v| v == first) {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.5..0.5) + if first == 1.0 { 1.0 } else { 0.0 };
            }
        }
    }
    let s = cfg.encoder.view_size;
    let view = Image::new(s, s, (0..s * s * 3).map(|_| rng.gen::<f64>()).collect())?;
    let label = 1.0;
    let mask = TrainMask::all(&params);
    let (_, grads) = sample_gradients(&params, &mask, &view, label, &cfg, 1.0, None)?;
    let prepared = prepare_view(&view, &cfg)?;
    grad_check_with(&params, &grads, eps, |p| {
        let none = TrainMask::none(p);
        let b = Binder::new(p, &none);
        let mut g = Graph::new();
        let out = forward_view(&mut g, &b, &view, prepared.as_ref(), &cfg, &mut Mode::Eval)?;
        let z = g.value(out.logit).data()[0];
        let a = out.aux.map(|v| g.value(v).data()[0]);
        Ok((total_loss(z, a, label, 1.0).total, g.relu_pattern()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_model_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ModelParams::new();
        p.insert("w", Tensor::row((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())).unwrap();
        p.insert("b", Tensor::row(vec![0.3])).unwrap();
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eval = |p: &ModelParams, want_grad: bool| {
            let mask = if want_grad { TrainMask::all(p) } else { TrainMask::none(p) };
            let b = Binder::new(p, &mask);
            let mut g = Graph::new();
            let xv = g.input(Tensor::row(x.clone()));
            let (w, bias) = (b.bind(&mut g, "w").unwrap(), b.bind(&mut g, "b").unwrap());
            let z = g.linear_scalar(xv, w, bias).unwrap();
            let grads = if want_grad { g.backward(&[(z, 1.0)]).unwrap().into_vec() } else { Vec::new() };
            (g.value(z).data()[0], grads)
        };
        let (_, grads) = eval(&p, true);
        let report = grad_check_with(&p, &grads, 1e-4, |q| Ok((eval(q, false).0, Vec::new()))).unwrap();
        assert_eq!(report.tensors.len(), 2);
        assert!(report.max_rel_error() < 1e-8, "{report:?}");
    }

    #[test]
    fn kink_crossing_step_is_shrunk() {
        // relu(w - 0.5e-4) has slope 1 at w = 1e-4 but the +-1e-4 difference
        // straddles the kink.
        let mut p = ModelParams::new();
        p.insert("w", Tensor::row(vec![1e-4])).unwrap();
        let eval = |p: &ModelParams| {
            let mask = TrainMask::all(p);
            let b = Binder::new(p, &mask);
            let mut g = Graph::new();
            let w = b.bind(&mut g, "w").unwrap();
            let shift = g.input(Tensor::row(vec![-0.5e-4]));
            let x = g.add(w, shift).unwrap();
            let y = g.relu(x);
            let grads = g.backward(&[(y, 1.0)]).unwrap().into_vec();
            (g.value(y).data()[0], g.relu_pattern(), grads)
        };
        let (_, _, grads) = eval(&p);
        let report = grad_check_with(&p, &grads, 1e-4, |q| {
            let (v, pat, _) = eval(q);
            Ok((v, pat))
        })
        .unwrap();
        assert_eq!(report.tensors[0].shrunk, 1);
        assert!(report.max_rel_error() < 1e-8);
    }

    #[test]
    fn zero_step_is_an_argument_error() {
        assert!(grad_check(0, 0.0).is_err());
        assert!(grad_check(0, -1e-4).is_err());
    }

    #[test]
    fn tiny_model_gradients_match_differences() {
        let report = grad_check(0, 1e-4).unwrap();
        assert!(report.tensors.len() > 40);
        let count: usize = report.tensors.iter().map(|t| t.numel).sum();
        assert!(count <= 10_000, "{count}");
        assert_eq!(report.on_kink(), 0);
        for t in &report.tensors {
            assert!(t.max_rel_error < 1e-4, "{} {}", t.name, t.max_rel_error);
        }
    }
}
