//! Minimal tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its variables. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! accumulates vector-Jacobian products. Only nodes that (transitively) depend
//! on a trainable leaf receive gradients, so frozen sub-networks cost nothing
//! on the backward pass.

use std::borrow::Cow;

use crate::error::{arg_err, Result};
use crate::tensor::{gemm, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

enum Op {
    Leaf,
    Param(usize),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    MulRow { x: Var, gate: Var },
    Scale { x: Var, s: f64 },
    Relu(Var),
    Gelu(Var),
    Mask { x: Var, mask: Vec<f64> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { qkv: Var, heads: usize, probs: Vec<f64> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f64> },
    MeanPool(Var),
    LinearScalar { x: Var, w: Var, b: Var },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Operation tape. Parameter leaves may borrow their storage for `'p`.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Parameter leaf identified by `key`. Gradients are reported per key.
    pub fn param(&mut self, key: usize, value: &'p Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Param(key),
            needs_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned parameter leaf, for values that do not outlive the graph.
    pub fn param_owned(&mut self, key: usize, value: Tensor, trainable: bool) -> Var {
        self.push(value, Op::Param(key), trainable)
    }

    /// `op(a) · op(b)` where both operands are viewed as matrices.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (ar, ac) = (va.rows(), va.cols());
        let (br, bc) = (vb.rows(), vb.cols());
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return arg_err(format!(
                "matmul inner dimensions differ: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), ta, vb.data(), tb, &mut out, false);
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, ta, tb },
            ng,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `x + bias`, the bias broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.cols();
        if vb.numel() != c {
            return arg_err(format!(
                "bias of {} values for {c} columns",
                vb.numel()
            ));
        }
        let mut out = vx.clone().reshape(vec![vx.rows(), c])?;
        for row in out.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let ng = self.ng(&[x, bias]);
        Ok(self.push(out, Op::AddBias { x, bias }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.numel() != vb.numel() {
            return arg_err(format!(
                "add shape mismatch: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            ));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, ng))
    }

    /// Channel-wise product `x ⊙ gate`, the gate broadcast over rows.
    pub fn mul_row(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(gate));
        let c = vx.cols();
        if vg.numel() != c {
            return arg_err(format!(
                "gate of {} channels for {c} columns",
                vg.numel()
            ));
        }
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, g) in row.iter_mut().zip(vg.data()) {
                *o *= g;
            }
        }
        let ng = self.ng(&[x, gate]);
        Ok(self.push(out, Op::MulRow { x, gate }, ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale(s);
        let ng = self.ng(&[x]);
        self.push(out, Op::Scale { x, s }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::Relu(x), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            let x = *v;
            *v = 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh());
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Element-wise multiplication by a constant mask (dropout).
    pub fn mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let vx = self.value(x);
        if mask.len() != vx.numel() {
            return arg_err("mask length does not match tensor");
        }
        let mut out = vx.clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Mask { x, mask }, ng))
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.cols();
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return arg_err("layer norm affine parameters do not match width");
        }
        let rows = vx.rows();
        let mut xhat = vec![0.0; rows * c];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = vx.row_slice(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for (j, v) in row.iter().enumerate() {
                xhat[r * c + j] = (v - mean) * rs;
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            for j in 0..c {
                out[r * c + j] = xhat[r * c + j] * g[j] + b[j];
            }
        }
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(vec![rows, c], out)?,
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            ng,
        ))
    }

    /// Multi-head scaled dot-product self-attention over a packed `[S, 3D]`
    /// query/key/value matrix. Returns the concatenated head outputs `[S, D]`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let v = self.value(qkv);
        let s = v.rows();
        let d3 = v.cols();
        if d3 % 3 != 0 || (d3 / 3) % heads != 0 {
            return arg_err(format!("qkv width {d3} incompatible with {heads} heads"));
        }
        let d = d3 / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * s * s];
        let mut out = vec![0.0; s * d];
        let mut q = vec![0.0; s * dh];
        let mut k = vec![0.0; s * dh];
        let mut val = vec![0.0; s * dh];
        let mut o = vec![0.0; s * dh];
        for h in 0..heads {
            gather_head(v.data(), s, d3, h * dh, dh, &mut q);
            gather_head(v.data(), s, d3, d + h * dh, dh, &mut k);
            gather_head(v.data(), s, d3, 2 * d + h * dh, dh, &mut val);
            let p = &mut probs[h * s * s..(h + 1) * s * s];
            gemm(s, dh, s, &q, false, &k, true, p, false);
            for row in p.chunks_mut(s) {
                let mut mx = f64::NEG_INFINITY;
                for x in row.iter_mut() {
                    *x *= scale;
                    mx = mx.max(*x);
                }
                let mut sum = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    sum += *x;
                }
                for x in row.iter_mut() {
                    *x /= sum;
                }
            }
            gemm(s, s, dh, p, false, &val, false, &mut o, false);
            scatter_head(&o, s, d, h * dh, dh, &mut out, false);
        }
        let ng = self.ng(&[qkv]);
        Ok(self.push(
            Tensor::new(vec![s, d], out)?,
            Op::Attention { qkv, heads, probs },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return arg_err("concat of zero tensors");
        }
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return arg_err(format!(
                    "concat column mismatch: {} vs {c}",
                    v.cols()
                ));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ng = self.ng(parts);
        Ok(self.push(
            Tensor::new(vec![rows, c], data)?,
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let c = v.cols();
        if start + len > v.rows() {
            return arg_err(format!(
                "row slice {start}..{} out of {} rows",
                start + len,
                v.rows()
            ));
        }
        let data = v.data()[start * c..(start + len) * c].to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::new(vec![len, c], data)?,
            Op::SliceRows { x, start },
            ng,
        ))
    }

    /// 2-D convolution of a `[C, H, W]` map with `[Co, C, k, k]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (xs, ws) = (vx.shape(), vw.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[2] != ws[3] {
            return arg_err(format!("conv2d expects [C,H,W] and [Co,C,k,k], got {xs:?} / {ws:?}"));
        }
        if xs[0] != ws[1] {
            return arg_err(format!(
                "conv2d channel mismatch: input has {}, kernel expects {}",
                xs[0], ws[1]
            ));
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return arg_err("conv2d geometry is degenerate");
        }
        if self.value(b).numel() != cout {
            return arg_err("conv2d bias does not match output channels");
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom { cin, h, w: wd, cout, k, stride, pad, ho, wo };
        let cols = im2col(vx.data(), &geom);
        let hw = ho * wo;
        let mut out = vec![0.0; cout * hw];
        gemm(cout, cin * k * k, hw, vw.data(), false, &cols, false, &mut out, false);
        for (co, bias) in self.value(b).data().iter().enumerate() {
            for o in &mut out[co * hw..(co + 1) * hw] {
                *o += bias;
            }
        }
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(
            Tensor::new(vec![cout, ho, wo], out)?,
            Op::Conv2d { x, w, b, geom, cols },
            ng,
        ))
    }

    /// Global average pooling of a `[C, H, W]` map into a `[1, C]` row.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 3 {
            return arg_err("mean_pool expects [C,H,W]");
        }
        let c = v.shape()[0];
        let hw = v.numel() / c;
        let out: Vec<f64> = v
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::row(out), Op::MeanPool(x), ng))
    }

    /// Scalar `Σ x·w + b`.
    pub fn linear_scalar(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vx.numel() != vw.numel() || vb.numel() != 1 {
            return arg_err("linear_scalar shape mismatch");
        }
        let z = vx.data().iter().zip(vw.data()).map(|(a, b)| a * b).sum::<f64>() + vb.data()[0];
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(Tensor::scalar(z), Op::LinearScalar { x, w, b }, ng))
    }

    /// Sign pattern (`input > 0`) of every ReLU on the tape, in tape order.
    /// Two evaluations with equal patterns lie on the same linear piece of
    /// each ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                out.extend(self.value(x).data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    /// Reverse pass seeded with `d(loss)/d(output)` for each scalar output.
    pub fn backward(&self, seeds: &[(Var, f64)]) -> Result<Grads> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for &(v, s) in seeds {
            let val = self.value(v);
            if val.numel() != 1 {
                return arg_err("backward seeds must be scalar outputs");
            }
            accumulate(&mut grads[v.0], Tensor::scalar(s).reshape(val.shape().to_vec())?);
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(node, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        let mut params = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(key) = node.op {
                if let Some(g) = grads[idx].take() {
                    params.push((key, g));
                }
            }
        }
        Ok(Grads { params })
    }

    fn backprop_node(&self, node: &Node<'p>, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, n) = (gy.rows(), gy.cols());
                let k = if *ta { va.rows() } else { va.cols() };
                if want(*a) {
                    let mut da = vec![0.0; m * k];
                    if !*ta {
                        gemm(m, n, k, gy.data(), false, vb.data(), !*tb, &mut da, false);
                    } else {
                        gemm(k, n, m, vb.data(), *tb, gy.data(), true, &mut da, false);
                    }
                    accumulate(&mut grads[a.0], Tensor::new(va.shape().to_vec(), da)?);
                }
                if want(*b) {
                    let mut db = vec![0.0; k * n];
                    if !*tb {
                        gemm(k, m, n, va.data(), !*ta, gy.data(), false, &mut db, false);
                    } else {
                        gemm(n, m, k, gy.data(), true, va.data(), *ta, &mut db, false);
                    }
                    accumulate(&mut grads[b.0], Tensor::new(vb.shape().to_vec(), db)?);
                }
            }
            Op::AddBias { x, bias } => {
                if want(*x) {
                    let g = gy.clone().reshape(self.value(*x).shape().to_vec())?;
                    accumulate(&mut grads[x.0], g);
                }
                if want(*bias) {
                    let c = gy.cols();
                    let mut db = vec![0.0; c];
                    for row in gy.data().chunks(c) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    accumulate(&mut grads[bias.0], Tensor::new(shape, db)?);
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if want(*v) {
                        let g = gy.clone().reshape(self.value(*v).shape().to_vec())?;
                        accumulate(&mut grads[v.0], g);
                    }
                }
            }
            Op::MulRow { x, gate } => {
                let c = gy.cols();
                let (vx, vg) = (self.value(*x), self.value(*gate));
                if want(*x) {
                    let mut dx = gy.data().to_vec();
                    for row in dx.chunks_mut(c) {
                        for (d, g) in row.iter_mut().zip(vg.data()) {
                            *d *= g;
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(vx.shape().to_vec(), dx)?);
                }
                if want(*gate) {
                    let mut dg = vec![0.0; c];
                    for (grow, xrow) in gy.data().chunks(c).zip(vx.data().chunks(c)) {
                        for j in 0..c {
                            dg[j] += grow[j] * xrow[j];
                        }
                    }
                    accumulate(&mut grads[gate.0], Tensor::new(vg.shape().to_vec(), dg)?);
                }
            }
            Op::Scale { x, s } => {
                let mut g = gy.clone();
                g.scale(*s);
                accumulate(&mut grads[x.0], g.reshape(self.value(*x).shape().to_vec())?);
            }
            Op::Relu(x) => {
                let y = &node.value;
                let mut g = gy.clone();
                for (d, o) in g.data_mut().iter_mut().zip(y.data()) {
                    if *o <= 0.0 {
                        *d = 0.0;
                    }
                }
                accumulate(&mut grads[x.0], g.reshape(self.value(*x).shape().to_vec())?);
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let mut g = gy.clone();
                for (d, &xv) in g.data_mut().iter_mut().zip(vx.data()) {
                    let t = (GELU_C * (xv + GELU_K * xv * xv * xv)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * xv * xv);
                    *d *= 0.5 * (1.0 + t) + 0.5 * xv * dt;
                }
                accumulate(&mut grads[x.0], g.reshape(vx.shape().to_vec())?);
            }
            Op::Mask { x, mask } => {
                let mut g = gy.clone();
                for (d, m) in g.data_mut().iter_mut().zip(mask) {
                    *d *= m;
                }
                accumulate(&mut grads[x.0], g.reshape(self.value(*x).shape().to_vec())?);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = gy.cols();
                let rows = gy.rows();
                let gv = self.value(*gain).data();
                if want(*x) {
                    let mut dx = vec![0.0; rows * c];
                    for r in 0..rows {
                        let gr = &gy.data()[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dxh = gr[j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dxh = gr[j] * gv[j];
                            dx[r * c + j] = rstd[r] * (dxh - m1 - xh[j] * m2);
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(self.value(*x).shape().to_vec(), dx)?);
                }
                if want(*gain) {
                    let mut dg = vec![0.0; c];
                    for (i, g) in gy.data().iter().enumerate() {
                        dg[i % c] += g * xhat[i];
                    }
                    let shape = self.value(*gain).shape().to_vec();
                    accumulate(&mut grads[gain.0], Tensor::new(shape, dg)?);
                }
                if want(*bias) {
                    let mut db = vec![0.0; c];
                    for (i, g) in gy.data().iter().enumerate() {
                        db[i % c] += g;
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    accumulate(&mut grads[bias.0], Tensor::new(shape, db)?);
                }
            }
            Op::Attention { qkv, heads, probs } => {
                let v = self.value(*qkv);
                let s = v.rows();
                let d3 = v.cols();
                let d = d3 / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dqkv = vec![0.0; s * d3];
                let mut q = vec![0.0; s * dh];
                let mut k = vec![0.0; s * dh];
                let mut val = vec![0.0; s * dh];
                let mut go = vec![0.0; s * dh];
                let mut dp = vec![0.0; s * s];
                let mut dq = vec![0.0; s * dh];
                let mut dk = vec![0.0; s * dh];
                let mut dv = vec![0.0; s * dh];
                for h in 0..*heads {
                    gather_head(v.data(), s, d3, h * dh, dh, &mut q);
                    gather_head(v.data(), s, d3, d + h * dh, dh, &mut k);
                    gather_head(v.data(), s, d3, 2 * d + h * dh, dh, &mut val);
                    gather_head(gy.data(), s, d, h * dh, dh, &mut go);
                    let p = &probs[h * s * s..(h + 1) * s * s];
                    // dV = P^T dO ; dP = dO V^T
                    gemm(s, s, dh, p, true, &go, false, &mut dv, false);
                    gemm(s, dh, s, &go, false, &val, true, &mut dp, false);
                    for (prow, dprow) in p.chunks(s).zip(dp.chunks_mut(s)) {
                        let dot: f64 = prow.iter().zip(dprow.iter()).map(|(a, b)| a * b).sum();
                        for (dd, pp) in dprow.iter_mut().zip(prow) {
                            *dd = pp * (*dd - dot) * scale;
                        }
                    }
                    gemm(s, s, dh, &dp, false, &k, false, &mut dq, false);
                    gemm(s, s, dh, &dp, true, &q, false, &mut dk, false);
                    scatter_head(&dq, s, d3, h * dh, dh, &mut dqkv, true);
                    scatter_head(&dk, s, d3, d + h * dh, dh, &mut dqkv, true);
                    scatter_head(&dv, s, d3, 2 * d + h * dh, dh, &mut dqkv, true);
                }
                accumulate(&mut grads[qkv.0], Tensor::new(v.shape().to_vec(), dqkv)?);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if want(*p) {
                        let g = gy.data()[offset..offset + n].to_vec();
                        accumulate(&mut grads[p.0], Tensor::new(self.value(*p).shape().to_vec(), g)?);
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let vx = self.value(*x);
                let c = vx.cols();
                let mut g = vec![0.0; vx.numel()];
                g[start * c..start * c + gy.numel()].copy_from_slice(gy.data());
                accumulate(&mut grads[x.0], Tensor::new(vx.shape().to_vec(), g)?);
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let hw = geom.ho * geom.wo;
                let ckk = geom.cin * geom.k * geom.k;
                let vw = self.value(*w);
                if want(*w) {
                    let mut dw = vec![0.0; geom.cout * ckk];
                    gemm(geom.cout, hw, ckk, gy.data(), false, cols, true, &mut dw, false);
                    accumulate(&mut grads[w.0], Tensor::new(vw.shape().to_vec(), dw)?);
                }
                if want(*b) {
                    let db: Vec<f64> = gy.data().chunks(hw).map(|c| c.iter().sum()).collect();
                    let shape = self.value(*b).shape().to_vec();
                    accumulate(&mut grads[b.0], Tensor::new(shape, db)?);
                }
                if want(*x) {
                    let mut dcols = vec![0.0; ckk * hw];
                    gemm(ckk, geom.cout, hw, vw.data(), true, gy.data(), false, &mut dcols, false);
                    let dx = col2im(&dcols, geom);
                    accumulate(&mut grads[x.0], Tensor::new(self.value(*x).shape().to_vec(), dx)?);
                }
            }
            Op::MeanPool(x) => {
                let vx = self.value(*x);
                let c = vx.shape()[0];
                let hw = vx.numel() / c;
                let mut g = vec![0.0; vx.numel()];
                for (ch, gv) in g.chunks_mut(hw).zip(gy.data()) {
                    ch.fill(gv / hw as f64);
                }
                accumulate(&mut grads[x.0], Tensor::new(vx.shape().to_vec(), g)?);
            }
            Op::LinearScalar { x, w, b } => {
                let gz = gy.data()[0];
                let (vx, vw) = (self.value(*x), self.value(*w));
                if want(*x) {
                    let g = vw.data().iter().map(|v| v * gz).collect();
                    accumulate(&mut grads[x.0], Tensor::new(vx.shape().to_vec(), g)?);
                }
                if want(*w) {
                    let g = vx.data().iter().map(|v| v * gz).collect();
                    accumulate(&mut grads[w.0], Tensor::new(vw.shape().to_vec(), g)?);
                }
                if want(*b) {
                    let shape = self.value(*b).shape().to_vec();
                    accumulate(&mut grads[b.0], Tensor::new(shape, vec![gz])?);
                }
            }
        }
        Ok(())
    }
}

/// Gradients of the seeded outputs with respect to each parameter key that
/// required a gradient. A key used by several leaves appears once per leaf.
#[derive(Debug, Default)]
pub struct Grads {
    params: Vec<(usize, Tensor)>,
}

impl Grads {
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.params.iter().map(|(k, t)| (*k, t))
    }

    pub fn into_vec(self) -> Vec<(usize, Tensor)> {
        self.params
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn gather_head(src: &[f64], rows: usize, stride: usize, off: usize, width: usize, dst: &mut [f64]) {
    for r in 0..rows {
        dst[r * width..(r + 1) * width].copy_from_slice(&src[r * stride + off..r * stride + off + width]);
    }
}

fn scatter_head(src: &[f64], rows: usize, stride: usize, off: usize, width: usize, dst: &mut [f64], add: bool) {
    for r in 0..rows {
        let d = &mut dst[r * stride + off..r * stride + off + width];
        let s = &src[r * width..(r + 1) * width];
        if add {
            for (a, b) in d.iter_mut().zip(s) {
                *a += b;
            }
        } else {
            d.copy_from_slice(s);
        }
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.ho * g.wo;
    let mut cols = vec![0.0; g.cin * g.k * g.k * hw];
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        dst[oy * g.wo + ox] = x[(c * g.h + iy as usize) * g.w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.ho * g.wo;
    let mut x = vec![0.0; g.cin * g.h * g.w];
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        x[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                    }
                }
            }
        }
    }
    x
}
