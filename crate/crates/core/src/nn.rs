//! Layer kernels with hand-written reverse-mode gradients.
//!
//! Each layer exposes a forward that optionally records what its backward
//! needs, and a backward that accumulates parameter gradients into trainable
//! [`Parameter`]s and returns the gradient with respect to its input. All
//! reductions run in a fixed loop order so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Parameter, Tensor};

/// Nonlinearity used inside feed-forward sublayers and adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation value.
    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

// ---------------------------------------------------------------------------
// dense kernels

/// `out[i, j] += sum_k x[i, k] * w[k, j]`
fn matmul_acc(x: &[f64], rows: usize, n_in: usize, w: &[f64], n_out: usize, out: &mut [f64]) {
    for i in 0..rows {
        let xr = &x[i * n_in..(i + 1) * n_in];
        let or = &mut out[i * n_out..(i + 1) * n_out];
        for (k, &a) in xr.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let wr = &w[k * n_out..(k + 1) * n_out];
            for (o, &wv) in or.iter_mut().zip(wr) {
                *o += a * wv;
            }
        }
    }
}

/// `gw[k, j] += sum_i x[i, k] * g[i, j]`
fn matmul_tn_acc(x: &[f64], rows: usize, n_in: usize, g: &[f64], n_out: usize, gw: &mut [f64]) {
    for i in 0..rows {
        let xr = &x[i * n_in..(i + 1) * n_in];
        let gr = &g[i * n_out..(i + 1) * n_out];
        for (k, &a) in xr.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let wr = &mut gw[k * n_out..(k + 1) * n_out];
            for (o, &gv) in wr.iter_mut().zip(gr) {
                *o += a * gv;
            }
        }
    }
}

/// `gx[i, k] += sum_j g[i, j] * w[k, j]`
fn matmul_nt_acc(g: &[f64], rows: usize, n_out: usize, w: &[f64], n_in: usize, gx: &mut [f64]) {
    for i in 0..rows {
        let gr = &g[i * n_out..(i + 1) * n_out];
        let xr = &mut gx[i * n_in..(i + 1) * n_in];
        for (k, o) in xr.iter_mut().enumerate() {
            let wr = &w[k * n_out..(k + 1) * n_out];
            let mut s = 0.0;
            for (&gv, &wv) in gr.iter().zip(wr) {
                s += gv * wv;
            }
            *o += s;
        }
    }
}

// ---------------------------------------------------------------------------
// linear

fn linear_dims(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let n_in = x.last_dim();
    if w.shape().len() != 2 || w.shape()[0] != n_in {
        return Err(Error::Dimension {
            op: "linear",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    let n_out = w.shape()[1];
    if b.len() != n_out {
        return Err(Error::Dimension {
            op: "linear bias",
            left: w.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok((x.rows(), n_in, n_out))
}

/// `x · W + b` over the last dimension of `x`.
pub fn linear_forward(x: &Tensor, weight: &Parameter, bias: &Parameter) -> Result<Tensor> {
    let (rows, n_in, n_out) = linear_dims(x, &weight.value, &bias.value)?;
    let mut out = vec![0.0; rows * n_out];
    for r in out.chunks_mut(n_out) {
        r.copy_from_slice(bias.value.data());
    }
    matmul_acc(x.data(), rows, n_in, weight.value.data(), n_out, &mut out);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("non-scalar input") = n_out;
    Tensor::new(shape, out)
}

/// Accumulates into `weight`/`bias` gradients when trainable and returns the
/// input gradient when `want_input` is set.
pub fn linear_backward(
    x: &Tensor,
    weight: &mut Parameter,
    bias: &mut Parameter,
    grad_out: &Tensor,
    want_input: bool,
) -> Option<Tensor> {
    let n_in = x.last_dim();
    let n_out = weight.value.shape()[1];
    let rows = x.rows();
    if let Some(gw) = weight.grad_mut() {
        matmul_tn_acc(x.data(), rows, n_in, grad_out.data(), n_out, gw);
    }
    if let Some(gb) = bias.grad_mut() {
        for r in grad_out.data().chunks(n_out) {
            for (g, &v) in gb.iter_mut().zip(r) {
                *g += v;
            }
        }
    }
    want_input.then(|| {
        let mut gx = vec![0.0; rows * n_in];
        matmul_nt_acc(grad_out.data(), rows, n_out, weight.value.data(), n_in, &mut gx);
        Tensor::new(x.shape().to_vec(), gx).expect("input shape")
    })
}

// ---------------------------------------------------------------------------
// layer norm

pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Row-wise normalization to zero mean and unit (population) variance,
/// followed by the affine `gain`/`shift`.
pub fn layer_norm(x: &Tensor, gain: &Parameter, shift: &Parameter, eps: f64) -> Tensor {
    layer_norm_impl(x, gain, shift, eps, false).0
}

pub fn layer_norm_train(
    x: &Tensor,
    gain: &Parameter,
    shift: &Parameter,
    eps: f64,
) -> (Tensor, LayerNormCache) {
    let (y, cache) = layer_norm_impl(x, gain, shift, eps, true);
    (y, cache.expect("recorded"))
}

fn layer_norm_impl(
    x: &Tensor,
    gain: &Parameter,
    shift: &Parameter,
    eps: f64,
    record: bool,
) -> (Tensor, Option<LayerNormCache>) {
    let n = x.last_dim();
    let rows = x.rows();
    let g = gain.value.data();
    let b = shift.value.data();
    let mut out = vec![0.0; x.len()];
    let mut normalized = if record { vec![0.0; x.len()] } else { Vec::new() };
    let mut inv_std = if record { vec![0.0; rows] } else { Vec::new() };
    for r in 0..rows {
        let xr = &x.data()[r * n..(r + 1) * n];
        let mean = xr.iter().sum::<f64>() / n as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..n {
            let xh = (xr[j] - mean) * inv;
            out[r * n + j] = g[j] * xh + b[j];
            if record {
                normalized[r * n + j] = xh;
            }
        }
        if record {
            inv_std[r] = inv;
        }
    }
    let y = Tensor::new(x.shape().to_vec(), out).expect("same shape");
    (
        y,
        record.then_some(LayerNormCache {
            normalized,
            inv_std,
        }),
    )
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &mut Parameter,
    shift: &mut Parameter,
    grad_out: &Tensor,
    want_input: bool,
) -> Option<Tensor> {
    let n = grad_out.last_dim();
    let rows = grad_out.rows();
    let dy = grad_out.data();
    if let Some(gg) = gain.grad_mut() {
        for r in 0..rows {
            for j in 0..n {
                gg[j] += dy[r * n + j] * cache.normalized[r * n + j];
            }
        }
    }
    if let Some(gs) = shift.grad_mut() {
        for r in dy.chunks(n) {
            for (g, &v) in gs.iter_mut().zip(r) {
                *g += v;
            }
        }
    }
    if !want_input {
        return None;
    }
    let g = gain.value.data();
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; n];
    for r in 0..rows {
        let xh = &cache.normalized[r * n..(r + 1) * n];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..n {
            dxhat[j] = dy[r * n + j] * g[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j];
        }
        mean_d /= n as f64;
        mean_dx /= n as f64;
        let inv = cache.inv_std[r];
        for j in 0..n {
            dx[r * n + j] = inv * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    Some(Tensor::new(grad_out.shape().to_vec(), dx).expect("same shape"))
}

// ---------------------------------------------------------------------------
// elementwise

pub fn activate(x: &Tensor, act: Activation) -> Tensor {
    let data = x.data().iter().map(|&v| act.apply(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn activate_backward(pre: &Tensor, grad_out: &Tensor, act: Activation) -> Tensor {
    let data = pre
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&p, &g)| g * act.derivative(p))
        .collect();
    Tensor::new(pre.shape().to_vec(), data).expect("same shape")
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

pub fn add_assign(a: &mut Tensor, b: &Tensor) {
    debug_assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

// ---------------------------------------------------------------------------
// attention

/// Projection weights of one self-attention sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub query: Parameter,
    pub query_bias: Parameter,
    pub key: Parameter,
    pub key_bias: Parameter,
    pub value: Parameter,
    pub value_bias: Parameter,
    pub output: Parameter,
    pub output_bias: Parameter,
}

impl AttentionParams {
    pub fn parameters(&self) -> [&Parameter; 8] {
        [
            &self.query,
            &self.query_bias,
            &self.key,
            &self.key_bias,
            &self.value,
            &self.value_bias,
            &self.output,
            &self.output_bias,
        ]
    }

    pub fn parameters_mut(&mut self) -> [&mut Parameter; 8] {
        [
            &mut self.query,
            &mut self.query_bias,
            &mut self.key,
            &mut self.key_bias,
            &mut self.value,
            &mut self.value_bias,
            &mut self.output,
            &mut self.output_bias,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    input: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// softmax weights, `[B, heads, S, S]`
    probs: Vec<f64>,
    context: Tensor,
}

fn attention_dims(x: &Tensor, heads: usize) -> Result<(usize, usize, usize, usize)> {
    if x.shape().len() != 3 {
        return Err(Error::Dimension {
            op: "attention input",
            left: x.shape().to_vec(),
            right: vec![0, 0, 0],
        });
    }
    let (b, s, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if heads == 0 || n % heads != 0 {
        return Err(Error::Config(format!(
            "hidden size {n} is not divisible by {heads} attention heads"
        )));
    }
    Ok((b, s, n, n / heads))
}

/// Scaled dot-product self-attention over `[B, S, n]` without masking.
pub fn multi_head_attention(x: &Tensor, params: &AttentionParams, heads: usize) -> Result<Tensor> {
    Ok(attention_impl(x, params, heads, false)?.0)
}

pub fn multi_head_attention_train(
    x: &Tensor,
    params: &AttentionParams,
    heads: usize,
) -> Result<(Tensor, AttentionCache)> {
    let (y, cache) = attention_impl(x, params, heads, true)?;
    Ok((y, cache.expect("recorded")))
}

fn attention_impl(
    x: &Tensor,
    p: &AttentionParams,
    heads: usize,
    record: bool,
) -> Result<(Tensor, Option<AttentionCache>)> {
    let (batch, seq, n, dh) = attention_dims(x, heads)?;
    let q = linear_forward(x, &p.query, &p.query_bias)?;
    let k = linear_forward(x, &p.key, &p.key_bias)?;
    let v = linear_forward(x, &p.value, &p.value_bias)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; batch * heads * seq * seq];
    let mut context = vec![0.0; batch * seq * n];
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..seq {
                let row = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                let qi = &qd[(b * seq + i) * n + off..][..dh];
                let mut max = f64::NEG_INFINITY;
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &kd[(b * seq + j) * n + off..][..dh];
                    let mut s = 0.0;
                    for t in 0..dh {
                        s += qi[t] * kj[t];
                    }
                    *r = s * scale;
                    max = max.max(*r);
                }
                let mut z = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    z += *r;
                }
                for r in row.iter_mut() {
                    *r /= z;
                }
                let ci = &mut context[(b * seq + i) * n + off..][..dh];
                for (j, &pij) in row.iter().enumerate() {
                    let vj = &vd[(b * seq + j) * n + off..][..dh];
                    for t in 0..dh {
                        ci[t] += pij * vj[t];
                    }
                }
            }
        }
    }
    let context = Tensor::new(vec![batch, seq, n], context)?;
    let out = linear_forward(&context, &p.output, &p.output_bias)?;
    let cache = record.then(|| AttentionCache {
        input: x.clone(),
        q,
        k,
        v,
        probs,
        context,
    });
    Ok((out, cache))
}

pub fn multi_head_attention_backward(
    cache: &AttentionCache,
    p: &mut AttentionParams,
    heads: usize,
    grad_out: &Tensor,
    want_input: bool,
) -> Option<Tensor> {
    let (batch, seq, n) = (
        cache.input.shape()[0],
        cache.input.shape()[1],
        cache.input.shape()[2],
    );
    let dh = n / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let params_trainable = p.parameters().iter().any(|q| q.trainable);
    if !want_input && !params_trainable {
        return None;
    }
    let d_context = linear_backward(
        &cache.context,
        &mut p.output,
        &mut p.output_bias,
        grad_out,
        true,
    )
    .expect("requested");
    let (qd, kd, vd) = (cache.q.data(), cache.k.data(), cache.v.data());
    let dc = d_context.data();
    let mut dq = vec![0.0; batch * seq * n];
    let mut dk = vec![0.0; batch * seq * n];
    let mut dv = vec![0.0; batch * seq * n];
    let mut dp = vec![0.0; seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..seq {
                let row = &cache.probs[((b * heads + h) * seq + i) * seq..][..seq];
                let dci = &dc[(b * seq + i) * n + off..][..dh];
                // dV_j += p_ij * dC_i ; dP_ij = dC_i . V_j
                for j in 0..seq {
                    let vj = &vd[(b * seq + j) * n + off..][..dh];
                    let dvj = &mut dv[(b * seq + j) * n + off..][..dh];
                    let mut s = 0.0;
                    for t in 0..dh {
                        dvj[t] += row[j] * dci[t];
                        s += dci[t] * vj[t];
                    }
                    dp[j] = s;
                }
                let dot: f64 = row.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let qi = &qd[(b * seq + i) * n + off..][..dh];
                for j in 0..seq {
                    let ds = row[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &kd[(b * seq + j) * n + off..][..dh];
                    {
                        let dqi = &mut dq[(b * seq + i) * n + off..][..dh];
                        for t in 0..dh {
                            dqi[t] += ds * kj[t];
                        }
                    }
                    let dkj = &mut dk[(b * seq + j) * n + off..][..dh];
                    for t in 0..dh {
                        dkj[t] += ds * qi[t];
                    }
                }
            }
        }
    }
    let shape = vec![batch, seq, n];
    let dq = Tensor::new(shape.clone(), dq).expect("shape");
    let dk = Tensor::new(shape.clone(), dk).expect("shape");
    let dv = Tensor::new(shape, dv).expect("shape");
    let x = &cache.input;
    let gq = linear_backward(x, &mut p.query, &mut p.query_bias, &dq, want_input);
    let gk = linear_backward(x, &mut p.key, &mut p.key_bias, &dk, want_input);
    let gv = linear_backward(x, &mut p.value, &mut p.value_bias, &dv, want_input);
    match (gq, gk, gv) {
        (Some(mut a), Some(b), Some(c)) => {
            add_assign(&mut a, &b);
            add_assign(&mut a, &c);
            Some(a)
        }
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// loss

/// Mean negative log-softmax of the true class, with the logit gradient.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let classes = logits.last_dim();
    let rows = logits.rows();
    if rows != labels.len() {
        return Err(Error::Dimension {
            op: "cross entropy",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    let inv_b = 1.0 / rows as f64;
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Data(format!(
                "sample {r} has label {label} but only {classes} classes exist"
            )));
        }
        let row = &logits.data()[r * classes..(r + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = z.ln() + max;
        loss += log_z - row[label];
        let g = &mut grad[r * classes..(r + 1) * classes];
        for (j, gj) in g.iter_mut().enumerate() {
            let p = (row[j] - log_z).exp();
            *gj = (p - if j == label { 1.0 } else { 0.0 }) * inv_b;
        }
    }
    Ok((
        loss * inv_b,
        Tensor::new(logits.shape().to_vec(), grad)?,
    ))
}

// ---------------------------------------------------------------------------
// optimizer

/// Plain SGD on trainable parameters; clears gradients afterwards.
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut Parameter>, lr: f64) -> Result<()> {
    let mut params: Vec<&mut Parameter> = params.into_iter().collect();
    if let Some(p) = params.iter().find(|p| p.trainable && p.grad.is_none()) {
        return Err(Error::Training(format!(
            "trainable parameter `{}` has no gradient",
            p.name
        )));
    }
    for p in params.iter_mut().filter(|p| p.trainable) {
        let grad = p.grad.as_mut().expect("checked above");
        for (w, g) in p.value.data_mut().iter_mut().zip(grad.iter_mut()) {
            *w -= lr * *g;
            *g = 0.0;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gradient checking

/// Something with trainable parameters and a scalar loss.
pub trait Differentiable {
    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;
    /// Loss only; must not depend on gradient state.
    fn loss(&mut self) -> f64;
    /// Loss with gradients accumulated into the (zeroed) trainable parameters.
    fn loss_and_grads(&mut self) -> f64;
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates checked per parameter; larger parameters are sampled.
    pub max_coords_per_param: usize,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords_per_param: 64,
            floor: 1e-3,
            seed: 0,
        }
    }
}

/// Compare analytic gradients with central differences over every trainable
/// coordinate (or a seeded sample of large parameters).
///
/// Returns the maximum of `|a - n| / max(|a|, |n|, floor)`; 0 when nothing is
/// trainable.
pub fn grad_check<M: Differentiable>(model: &mut M, opts: GradCheckOptions) -> f64 {
    for p in model.parameters_mut() {
        p.zero_grad();
    }
    model.loss_and_grads();
    let analytic: Vec<Option<Vec<f64>>> = model
        .parameters_mut()
        .into_iter()
        .map(|p| if p.trainable { p.grad.clone() } else { None })
        .collect();
    let mut rng = SeededRng::new(opts.seed);
    let mut worst: f64 = 0.0;
    for (pi, grads) in analytic.iter().enumerate() {
        let Some(grads) = grads else { continue };
        let len = grads.len();
        let coords: Vec<usize> = if len <= opts.max_coords_per_param {
            (0..len).collect()
        } else {
            (0..opts.max_coords_per_param).map(|_| rng.below(len)).collect()
        };
        for c in coords {
            let orig = model.parameters_mut()[pi].value.data()[c];
            model.parameters_mut()[pi].value.data_mut()[c] = orig + opts.step;
            let up = model.loss();
            model.parameters_mut()[pi].value.data_mut()[c] = orig - opts.step;
            let down = model.loss();
            model.parameters_mut()[pi].value.data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = grads[c];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            worst = worst.max(err);
        }
    }
    worst
}
