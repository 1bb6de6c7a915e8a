//! Forward and backward kernels for the dense layers.
//!
//! Kernels work on flat row-major slices; the `Tensor` functions at the end
//! are the shape-checked public surface.

use rand::Rng;

use super::gemm::{gemm, View};
use super::{NnError, Tensor};

/// `y[n, d_out] = x[n, d_in] * w[d_in, d_out] + b`.
pub fn linear_forward(x: &[f32], w: &[f32], b: Option<&[f32]>, n: usize, d_in: usize, d_out: usize) -> Vec<f32> {
    let mut y = vec![0.0; n * d_out];
    if let Some(b) = b {
        for row in y.chunks_mut(d_out) {
            row.copy_from_slice(b);
        }
    }
    gemm(View::new(x, n, d_in), View::new(w, d_in, d_out), if b.is_some() { 1.0 } else { 0.0 }, &mut y);
    y
}

/// Accumulates `dw += x^T dy`, `db += sum(dy)` and returns `dx`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    n: usize,
    d_in: usize,
    d_out: usize,
    dw: &mut [f32],
    db: Option<&mut [f32]>,
) -> Vec<f32> {
    gemm(View::new(x, n, d_in).t(), View::new(dy, n, d_out), 1.0, dw);
    if let Some(db) = db {
        for row in dy.chunks(d_out) {
            for (g, &d) in db.iter_mut().zip(row) {
                *g += d;
            }
        }
    }
    let mut dx = vec![0.0; n * d_in];
    gemm(View::new(dy, n, d_out), View::new(w, d_in, d_out).t(), 0.0, &mut dx);
    dx
}

/// Per-row normalization statistics kept for the backward pass.
pub struct LayerNormCache {
    pub xhat: Vec<f32>,
    pub rstd: Vec<f32>,
}

pub fn layer_norm_forward(x: &[f32], gamma: &[f32], beta: &[f32], d: usize, eps: f32) -> (Vec<f32>, LayerNormCache) {
    let n = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let r = 1.0 / (var + eps).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            y[i * d + j] = h * gamma[j] + beta[j];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &[f32],
    dy: &[f32],
    d: usize,
    dgamma: &mut [f32],
    dbeta: &mut [f32],
) -> Vec<f32> {
    let n = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let g = &dy[i * d..(i + 1) * d];
        let (mut mean_dxhat, mut mean_dxhat_xhat) = (0.0f32, 0.0f32);
        for j in 0..d {
            dgamma[j] += g[j] * xh[j];
            dbeta[j] += g[j];
            dxhat[j] = g[j] * gamma[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f32;
        mean_dxhat_xhat /= d as f32;
        let r = cache.rstd[i];
        for j in 0..d {
            dx[i * d + j] = r * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)
const GELU_A: f32 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Softmax over each row of length `d`, in place.
pub fn softmax_rows(x: &mut [f32], d: usize) {
    for row in x.chunks_mut(d) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Gradient through a row softmax given its output `p`, in place on `dp`.
pub fn softmax_rows_backward(p: &[f32], dp: &mut [f32], d: usize) {
    for (pr, gr) in p.chunks(d).zip(dp.chunks_mut(d)) {
        let dot: f32 = pr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
        for (g, &pv) in gr.iter_mut().zip(pr) {
            *g = pv * (*g - dot);
        }
    }
}

/// Inverted-dropout multipliers (0 or `1 / (1 - rate)`), or `None` when the
/// layer is the identity.
pub fn dropout_mask<R: Rng + ?Sized>(rng: &mut R, len: usize, rate: f32, train: bool) -> Option<Vec<f32>> {
    if !train || rate <= 0.0 {
        return None;
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    Some((0..len).map(|_| if rng.random::<f32>() < keep { scale } else { 0.0 }).collect())
}

pub fn apply_mask(x: &mut [f32], mask: Option<&Vec<f32>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

/// Gathers rows of `table[_, d]`.
pub fn embedding_forward(table: &[f32], d: usize, ids: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(ids.len() * d);
    for &i in ids {
        out.extend_from_slice(&table[i * d..(i + 1) * d]);
    }
    out
}

/// Scatter-adds output rows back into the table gradient.
pub fn embedding_backward(dtable: &mut [f32], d: usize, ids: &[usize], dy: &[f32]) {
    for (k, &i) in ids.iter().enumerate() {
        for (g, &v) in dtable[i * d..(i + 1) * d].iter_mut().zip(&dy[k * d..(k + 1) * d]) {
            *g += v;
        }
    }
}

/// Mean over masked cells of `-log softmax(logits)[target]`.
///
/// Returns the loss (accumulated in `f64`) and its gradient with respect to
/// the logits. Unmasked cells get zero gradient.
pub fn cross_entropy_masked_raw(
    logits: &[f32],
    classes: usize,
    target: &[u8],
    mask: &[bool],
) -> Result<(f64, Vec<f32>), NnError> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(NnError::EmptyMask);
    }
    let inv = 1.0 / count as f32;
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0f64;
    for (i, row) in logits.chunks(classes).enumerate() {
        if !mask[i] {
            continue;
        }
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let sum: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
        let t = target[i] as usize;
        total += sum.ln() - (row[t] - max) as f64;
        let g = &mut grad[i * classes..(i + 1) * classes];
        for (k, gv) in g.iter_mut().enumerate() {
            let p = (((row[k] - max) as f64).exp() / sum) as f32;
            *gv = (p - if k == t { 1.0 } else { 0.0 }) * inv;
        }
    }
    Ok((total / count as f64, grad))
}

fn check_trailing(x: &Tensor, d: usize, what: &str) -> Result<(), NnError> {
    if x.last_dim() != d || x.shape().is_empty() {
        return Err(NnError::ShapeMismatch(format!("{what}: trailing dim {} != {d}", x.last_dim())));
    }
    Ok(())
}

/// Affine map over the trailing dimension; `w` is `[d_in, d_out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor, NnError> {
    if w.shape().len() != 2 {
        return Err(NnError::ShapeMismatch("weight must be 2-D".into()));
    }
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    check_trailing(x, d_in, "linear input")?;
    if let Some(b) = b {
        if b.shape() != [d_out] {
            return Err(NnError::ShapeMismatch(format!("bias shape {:?} != [{d_out}]", b.shape())));
        }
    }
    let y = linear_forward(x.data(), w.data(), b.map(Tensor::data), x.leading(), d_in, d_out);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Tensor::from_vec(&shape, y)
}

/// Gradients of [`linear`] given the upstream gradient: `(dx, dw, db)`.
pub fn linear_grad(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor), NnError> {
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    check_trailing(x, d_in, "linear input")?;
    check_trailing(dy, d_out, "linear upstream")?;
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[d_out]);
    let dx = linear_backward(x.data(), w.data(), dy.data(), x.leading(), d_in, d_out, dw.data_mut(), Some(db.data_mut()));
    Ok((Tensor::from_vec(x.shape(), dx)?, dw, db))
}

/// Normalizes over the trailing dimension, then applies `gamma`/`beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor, NnError> {
    let d = gamma.len();
    check_trailing(x, d, "layer_norm input")?;
    if beta.len() != d {
        return Err(NnError::ShapeMismatch("beta length differs from gamma".into()));
    }
    let (y, _) = layer_norm_forward(x.data(), gamma.data(), beta.data(), d, eps);
    Tensor::from_vec(x.shape(), y)
}

/// Gradients of [`layer_norm`]: `(dx, dgamma, dbeta)`.
pub fn layer_norm_grad(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), NnError> {
    let d = gamma.len();
    check_trailing(x, d, "layer_norm input")?;
    let (_, cache) = layer_norm_forward(x.data(), gamma.data(), beta.data(), d, eps);
    let mut dg = Tensor::zeros(&[d]);
    let mut db = Tensor::zeros(&[d]);
    let dx = layer_norm_backward(&cache, gamma.data(), dy.data(), d, dg.data_mut(), db.data_mut());
    Ok((Tensor::from_vec(x.shape(), dx)?, dg, db))
}

pub fn softmax(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    let d = x.last_dim();
    softmax_rows(y.data_mut(), d);
    y
}

/// Masked per-cell cross-entropy over `[.., classes]` logits.
pub fn cross_entropy_masked(logits: &Tensor, target: &[u8], mask: &[bool]) -> Result<(f64, Tensor), NnError> {
    let classes = logits.last_dim();
    let cells = logits.leading();
    if target.len() != cells || mask.len() != cells {
        return Err(NnError::ShapeMismatch(format!(
            "{cells} logit rows but {} targets and {} mask cells",
            target.len(),
            mask.len()
        )));
    }
    if let Some(&t) = target.iter().find(|&&t| t as usize >= classes) {
        return Err(NnError::ShapeMismatch(format!("target class {t} >= {classes}")));
    }
    let (loss, grad) = cross_entropy_masked_raw(logits.data(), classes, target, mask)?;
    Ok((loss, Tensor::from_vec(logits.shape(), grad)?))
}
