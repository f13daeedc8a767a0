use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::Graph;
use crate::imaging::Image;
use crate::model::{init_params, ModelConfig, PromptMode};
use crate::params::{Binder, ModelParams, TrainMask};
use crate::tensor::Tensor;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn rand_view(rng: &mut ChaCha8Rng, side: usize) -> Image {
    Image::new(side, side, (0..side * side * 3).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

fn eval_logit(params: &ModelParams, view: &Image, prompt: Option<Tensor>, cfg: &EncoderConfig) -> (f64, Vec<usize>) {
    let mask = TrainMask::none(params);
    let b = Binder::new(params, &mask);
    let mut g = Graph::new();
    let p = prompt.map(|t| g.input(t));
    let out = encoder_forward(&mut g, &b, view, p, cfg, &mut Mode::Eval).unwrap();
    (g.value(out.logit).data()[0], out.seq_lens)
}

#[test]
fn init_logit_is_zero() {
    let cfg = ModelConfig {
        prompt: PromptMode::Plain,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = init_params(&cfg, &mut rng).unwrap();
    for _ in 0..3 {
        let view = rand_view(&mut rng, 64);
        let prompt = rand_tensor(&mut rng, &[2, 64], 1.0);
        let (logit, _) = eval_logit(&params, &view, Some(prompt), &cfg.encoder);
        assert_eq!(logit, 0.0);
    }
}

#[test]
fn sequence_lengths_follow_prompt_drop() {
    let cfg = ModelConfig {
        prompt: PromptMode::Plain,
        ..ModelConfig::default()
    };
    let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let view = Image::filled(64, 64, 0.3).unwrap();
    let n = 64;
    let (_, lens) = eval_logit(&params, &view, Some(Tensor::zeros(&[2, 64])), &cfg.encoder);
    assert_eq!(lens, vec![n + 3, n + 3, n + 3, n + 3, n + 1, n + 1]);
    let (_, lens) = eval_logit(&params, &view, None, &cfg.encoder);
    assert_eq!(lens, vec![n + 1, n + 3, n + 3, n + 3, n + 1, n + 1]);
    let mut off = cfg.encoder.clone();
    off.use_tokens = false;
    let (_, lens) = eval_logit(&params, &view, Some(Tensor::zeros(&[2, 64])), &off);
    assert_eq!(lens, vec![n + 3, n + 3, n + 3, n + 3, n + 1, n + 1]);
}

#[test]
fn wrong_prompt_or_view_shape_is_rejected() {
    let cfg = ModelConfig::default();
    let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mask = TrainMask::none(&params);
    let b = Binder::new(&params, &mask);
    let mut g = Graph::new();
    let p = g.input(Tensor::zeros(&[3, 64]));
    let view = Image::filled(64, 64, 0.3).unwrap();
    assert!(encoder_forward(&mut g, &b, &view, Some(p), &cfg.encoder, &mut Mode::Eval).is_err());
    let small = Image::filled(32, 32, 0.3).unwrap();
    assert!(patch_embed(&mut g, &b, &small, &cfg.encoder).is_err());
}

#[test]
fn zero_adapters_are_bit_identical_to_no_adapters() {
    let cfg = ModelConfig {
        prompt: PromptMode::Plain,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = init_params(&cfg, &mut rng).unwrap();
    // Nonzero head so the logit depends on everything upstream.
    *params.get_mut("head.weight").unwrap() = rand_tensor(&mut rng, &[64], 1.0);
    let mut without = cfg.encoder.clone();
    without.use_adapters = false;
    for _ in 0..3 {
        let view = rand_view(&mut rng, 64);
        let prompt = rand_tensor(&mut rng, &[2, 64], 1.0);
        let (a, _) = eval_logit(&params, &view, Some(prompt.clone()), &cfg.encoder);
        let (b, _) = eval_logit(&params, &view, Some(prompt), &without);
        assert_ne!(a, 0.0);
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn gated_fuse_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let prev = rand_tensor(&mut rng, &[2, 8], 1.0);
    let tokens = rand_tensor(&mut rng, &[2, 8], 1.0);
    let mut g = Graph::new();
    let (p, t) = (g.input(prev.clone()), g.input(tokens.clone()));
    let closed = g.input(Tensor::zeros(&[8]));
    let out = gated_fuse(&mut g, p, t, closed).unwrap();
    assert_eq!(g.value(out), &tokens);

    let zero = g.input(Tensor::zeros(&[2, 8]));
    let open = g.input(Tensor::full(&[8], 1.0));
    let out = gated_fuse(&mut g, p, zero, open).unwrap();
    assert_eq!(g.value(out), &prev);

    // Unit-norm carried prompt through the initial gate.
    let mut unit = prev.clone();
    let m = unit.max_abs();
    unit.scale(1.0 / m);
    let u = g.input(unit);
    let tiny = g.input(Tensor::full(&[8], 1e-6));
    let out = gated_fuse(&mut g, u, t, tiny).unwrap();
    let dev = g
        .value(out)
        .data()
        .iter()
        .zip(tokens.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(dev <= 1e-6, "{dev}");

    let bad = g.input(Tensor::zeros(&[3, 8]));
    assert!(gated_fuse(&mut g, p, bad, open).is_err());
}

fn adapter_params(rng: &mut ChaCha8Rng, d: usize, dh: usize) -> ModelParams {
    let mut p = ModelParams::new();
    p.insert("adapters.1.down", rand_tensor(rng, &[d, dh], 1.0)).unwrap();
    p.insert("adapters.1.up", rand_tensor(rng, &[dh, d], 1.0)).unwrap();
    p
}

#[test]
fn adapter_matches_dense_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (d, dh) = (6, 2);
    let cfg = EncoderConfig {
        dim: d,
        adapter_dim: dh,
        adapter_scale: 0.1,
        ..EncoderConfig::default()
    };
    let p = adapter_params(&mut rng, d, dh);
    let x = rand_tensor(&mut rng, &[1, d], 1.0);
    let mask = TrainMask::none(&p);
    let b = Binder::new(&p, &mask);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = adapter_forward(&mut g, &b, xv, 1, &cfg, &mut Mode::Eval).unwrap();

    let (down, up) = (p.get("adapters.1.down").unwrap(), p.get("adapters.1.up").unwrap());
    let mut hidden = [0.0; 2];
    for (k, h) in hidden.iter_mut().enumerate() {
        let s: f64 = (0..d).map(|i| x.data()[i] * down.get2(i, k)).sum();
        *h = s.max(0.0);
    }
    for j in 0..d {
        let want = 0.1 * (hidden[0] * up.get2(0, j) + hidden[1] * up.get2(1, j));
        assert!((g.value(out).data()[j] - want).abs() < 1e-14);
    }

    let zero = g.input(Tensor::zeros(&[3, d]));
    let out = adapter_forward(&mut g, &b, zero, 1, &cfg, &mut Mode::Eval).unwrap();
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_up_projection_gives_zero_delta_in_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = EncoderConfig::default();
    let mut p = adapter_params(&mut rng, 64, 8);
    *p.get_mut("adapters.1.up").unwrap() = Tensor::zeros(&[8, 64]);
    let mask = TrainMask::all(&p);
    let b = Binder::new(&p, &mask);
    let mut g = Graph::new();
    let x = g.input(rand_tensor(&mut rng, &[5, 64], 3.0));
    let out = adapter_forward(&mut g, &b, x, 1, &cfg, &mut Mode::Eval).unwrap();
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    let mut drng = ChaCha8Rng::seed_from_u64(0);
    let out = adapter_forward(&mut g, &b, x, 1, &cfg, &mut Mode::Train(&mut drng)).unwrap();
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn patch_embed_token_count_and_linearity() {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = init_params(&cfg, &mut rng).unwrap();
    let mask = TrainMask::none(&params);
    let b = Binder::new(&params, &mask);
    let mut g = Graph::new();
    let zero = Image::filled(64, 64, 0.0).unwrap();
    let seq = patch_embed(&mut g, &b, &zero, &cfg.encoder).unwrap();
    let v = g.value(seq);
    assert_eq!(v.shape(), &[65, 64]);
    let pos = params.get("embed.pos").unwrap();
    let cls = params.get("embed.cls").unwrap();
    for r in 1..65 {
        assert_eq!(v.row_slice(r), pos.row_slice(r));
    }
    for c in 0..64 {
        assert_eq!(v.get2(0, c), cls.data()[c] + pos.get2(0, c));
    }
}

#[test]
fn patch_embed_single_patch_matches_direct_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cfg = EncoderConfig {
        dim: 4,
        heads: 1,
        patch: 2,
        view_size: 2,
        adapter_dim: 2,
        ..EncoderConfig::default()
    };
    let mut p = ModelParams::new();
    p.insert("embed.patch.weight", rand_tensor(&mut rng, &[4, 12], 1.0)).unwrap();
    p.insert("embed.patch.bias", rand_tensor(&mut rng, &[4], 1.0)).unwrap();
    p.insert("embed.cls", rand_tensor(&mut rng, &[1, 4], 1.0)).unwrap();
    p.insert("embed.pos", rand_tensor(&mut rng, &[2, 4], 1.0)).unwrap();
    let view = rand_view(&mut rng, 2);
    let mask = TrainMask::none(&p);
    let b = Binder::new(&p, &mask);
    let mut g = Graph::new();
    let seq = patch_embed(&mut g, &b, &view, &cfg).unwrap();
    let w = p.get("embed.patch.weight").unwrap();
    let mut flat = Vec::new();
    for y in 0..2 {
        for x in 0..2 {
            for c in 0..3 {
                flat.push(view.get(y, x, c));
            }
        }
    }
    for o in 0..4 {
        let mut want = p.get("embed.patch.bias").unwrap().data()[o] + p.get("embed.pos").unwrap().get2(1, o);
        for (i, f) in flat.iter().enumerate() {
            want += w.get2(o, i) * f;
        }
        assert!((g.value(seq).get2(1, o) - want).abs() < 1e-14);
    }
}

// Independent single-block evaluation on plain vectors.
mod oracle {
    pub type Mat = Vec<Vec<f64>>;

    pub fn linear(x: &Mat, w: &[f64], in_d: usize, out_d: usize, b: &[f64]) -> Mat {
        x.iter()
            .map(|row| {
                (0..out_d)
                    .map(|o| b[o] + (0..in_d).map(|i| row[i] * w[i * out_d + o]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * gain[j] + bias[j])
                    .collect()
            })
            .collect()
    }

    pub fn gelu(x: f64) -> f64 {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
    }

    pub fn single_head_attention(qkv: &Mat, d: usize) -> Mat {
        let s = qkv.len();
        let mut out = vec![vec![0.0; d]; s];
        for i in 0..s {
            let scores: Vec<f64> = (0..s)
                .map(|j| (0..d).map(|k| qkv[i][k] * qkv[j][d + k]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..s {
                for k in 0..d {
                    out[i][k] += e[j] / z * qkv[j][2 * d + k];
                }
            }
        }
        out
    }
}

#[test]
fn one_block_forward_matches_hand_evaluation() {
    use oracle::*;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = 4;
    let cfg = EncoderConfig {
        depth: 1,
        dim: d,
        heads: 1,
        patch: 2,
        view_size: 2,
        adapter_dim: 2,
        last_token_block: 1,
        tokens_per_block: 1,
        use_adapters: false,
        use_tokens: false,
        ..EncoderConfig::default()
    };
    let mut p = ModelParams::new();
    let shapes: [(&str, Vec<usize>); 20] = [
        ("embed.patch.weight", vec![d, 12]),
        ("embed.patch.bias", vec![d]),
        ("embed.cls", vec![1, d]),
        ("embed.pos", vec![2, d]),
        ("blocks.1.ln1.gain", vec![d]),
        ("blocks.1.ln1.bias", vec![d]),
        ("blocks.1.attn.qkv.weight", vec![d, 3 * d]),
        ("blocks.1.attn.qkv.bias", vec![3 * d]),
        ("blocks.1.attn.proj.weight", vec![d, d]),
        ("blocks.1.attn.proj.bias", vec![d]),
        ("blocks.1.ln2.gain", vec![d]),
        ("blocks.1.ln2.bias", vec![d]),
        ("blocks.1.mlp.fc1.weight", vec![d, 4 * d]),
        ("blocks.1.mlp.fc1.bias", vec![4 * d]),
        ("blocks.1.mlp.fc2.weight", vec![4 * d, d]),
        ("blocks.1.mlp.fc2.bias", vec![d]),
        ("norm.gain", vec![d]),
        ("norm.bias", vec![d]),
        ("head.weight", vec![d]),
        ("head.bias", vec![1]),
    ];
    for (name, shape) in &shapes {
        p.insert(*name, rand_tensor(&mut rng, shape, 1.0)).unwrap();
    }
    let view = rand_view(&mut rng, 2);
    let prompt = rand_tensor(&mut rng, &[1, d], 1.0);
    let (logit, lens) = eval_logit(&p, &view, Some(prompt.clone()), &cfg);
    assert_eq!(lens, vec![3]);

    let t = |n: &str| p.get(n).unwrap().data().to_vec();
    // Patch token: W · flatten(view) + b, flatten order (y, x, c).
    let w = p.get("embed.patch.weight").unwrap();
    let mut flat = Vec::new();
    for y in 0..2 {
        for x in 0..2 {
            for c in 0..3 {
                flat.push(view.get(y, x, c));
            }
        }
    }
    let pos = p.get("embed.pos").unwrap();
    let bias = t("embed.patch.bias");
    let token: Vec<f64> = (0..d)
        .map(|o| bias[o] + (0..12).map(|i| w.get2(o, i) * flat[i]).sum::<f64>() + pos.get2(1, o))
        .collect();
    let cls: Vec<f64> = (0..d).map(|o| t("embed.cls")[o] + pos.get2(0, o)).collect();
    let x: Mat = vec![prompt.data().to_vec(), cls, token];

    let h = layer_norm(&x, &t("blocks.1.ln1.gain"), &t("blocks.1.ln1.bias"));
    let qkv = linear(&h, &t("blocks.1.attn.qkv.weight"), d, 3 * d, &t("blocks.1.attn.qkv.bias"));
    let att = single_head_attention(&qkv, d);
    let att = linear(&att, &t("blocks.1.attn.proj.weight"), d, d, &t("blocks.1.attn.proj.bias"));
    let x: Mat = x.iter().zip(&att).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect()).collect();
    let h = layer_norm(&x, &t("blocks.1.ln2.gain"), &t("blocks.1.ln2.bias"));
    let m = linear(&h, &t("blocks.1.mlp.fc1.weight"), d, 4 * d, &t("blocks.1.mlp.fc1.bias"));
    let m: Mat = m.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    let m = linear(&m, &t("blocks.1.mlp.fc2.weight"), 4 * d, d, &t("blocks.1.mlp.fc2.bias"));
    let x: Mat = x.iter().zip(&m).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect()).collect();
    // CLS sits behind the single prompt row.
    let cls = layer_norm(&vec![x[1].clone()], &t("norm.gain"), &t("norm.bias"));
    let want = t("head.bias")[0] + (0..d).map(|j| cls[0][j] * t("head.weight")[j]).sum::<f64>();
    assert!((logit - want).abs() < 1e-12, "{logit} vs {want}");
}

#[test]
fn eval_forward_is_deterministic() {
    let cfg = ModelConfig {
        prompt: PromptMode::Plain,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut params = init_params(&cfg, &mut rng).unwrap();
    *params.get_mut("head.weight").unwrap() = rand_tensor(&mut rng, &[64], 1.0);
    let view = rand_view(&mut rng, 64);
    let prompt = rand_tensor(&mut rng, &[2, 64], 1.0);
    let (a, _) = eval_logit(&params, &view, Some(prompt.clone()), &cfg.encoder);
    let (b, _) = eval_logit(&params, &view, Some(prompt), &cfg.encoder);
    assert_eq!(a.to_bits(), b.to_bits());
}
