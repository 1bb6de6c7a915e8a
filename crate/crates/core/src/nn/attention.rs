//! Scaled dot-product attention with key masking and rotary position
//! encodings (separable 2D or flat 1D).

use super::gemm::{gemm, gemm_into, View};
use super::ops::{softmax_rows, softmax_rows_backward};
use super::{NnError, Tensor};

/// Logit offset applied to masked keys.
pub const MASK_OFFSET: f32 = -1e9;
pub const ROPE_BASE: f32 = 10_000.0;

/// Per-token rotation angles for each channel pair of one head.
///
/// Pairs are consecutive channels `(2j, 2j + 1)`. Tokens without a position
/// (the task token) are left unrotated.
#[derive(Debug, Clone)]
pub struct RopeTable {
    head_dim: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RopeTable {
    /// Separable 2D table: the first half of the channels rotate with the
    /// column, the second half with the row.
    pub fn new_2d(head_dim: usize, coords: &[Option<(usize, usize)>], base: f32) -> Result<RopeTable, NnError> {
        if head_dim % 4 != 0 || head_dim == 0 {
            return Err(NnError::ShapeMismatch(format!("2D RoPE needs head_dim divisible by 4, got {head_dim}")));
        }
        let quarter = head_dim / 4;
        let half = head_dim / 2;
        let freqs: Vec<f32> = (0..quarter).map(|i| base.powf(-2.0 * i as f32 / half as f32)).collect();
        Ok(Self::build(head_dim, coords.len(), |t, pair| {
            coords[t].map(|(row, col)| {
                if pair < quarter {
                    col as f32 * freqs[pair]
                } else {
                    row as f32 * freqs[pair - quarter]
                }
            })
        }))
    }

    /// 1D table over flat positions.
    pub fn new_1d(head_dim: usize, positions: &[Option<usize>], base: f32) -> Result<RopeTable, NnError> {
        if head_dim % 2 != 0 || head_dim == 0 {
            return Err(NnError::ShapeMismatch(format!("1D RoPE needs an even head_dim, got {head_dim}")));
        }
        let freqs: Vec<f32> = (0..head_dim / 2).map(|i| base.powf(-2.0 * i as f32 / head_dim as f32)).collect();
        Ok(Self::build(head_dim, positions.len(), |t, pair| positions[t].map(|p| p as f32 * freqs[pair])))
    }

    fn build(head_dim: usize, tokens: usize, angle: impl Fn(usize, usize) -> Option<f32>) -> RopeTable {
        let pairs = head_dim / 2;
        let mut cos = vec![1.0; tokens * pairs];
        let mut sin = vec![0.0; tokens * pairs];
        for t in 0..tokens {
            for p in 0..pairs {
                if let Some(a) = angle(t, p) {
                    cos[t * pairs + p] = a.cos();
                    sin[t * pairs + p] = a.sin();
                }
            }
        }
        RopeTable { head_dim, cos, sin }
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn tokens(&self) -> usize {
        self.cos.len() / (self.head_dim / 2)
    }

    /// Rotates every head of `x[tokens, heads * head_dim]` in place; `inverse`
    /// rotates by the negated angles (the transpose, used for gradients).
    pub fn rotate(&self, x: &mut [f32], width: usize, inverse: bool) {
        let pairs = self.head_dim / 2;
        let tokens = x.len() / width;
        debug_assert_eq!(tokens, self.tokens());
        for t in 0..tokens {
            let cos = &self.cos[t * pairs..(t + 1) * pairs];
            let sin = &self.sin[t * pairs..(t + 1) * pairs];
            for head in x[t * width..(t + 1) * width].chunks_mut(self.head_dim) {
                for p in 0..pairs {
                    let (c, s) = (cos[p], if inverse { -sin[p] } else { sin[p] });
                    let (a, b) = (head[2 * p], head[2 * p + 1]);
                    head[2 * p] = a * c - b * s;
                    head[2 * p + 1] = a * s + b * c;
                }
            }
        }
    }
}

/// Saved activations of one attention call.
pub struct AttentionCache {
    pub tokens: usize,
    pub width: usize,
    pub heads: usize,
    /// Queries and keys after rotation.
    pub q: Vec<f32>,
    pub k: Vec<f32>,
    pub v: Vec<f32>,
    /// Softmax weights, `[heads, tokens, tokens]`.
    pub probs: Vec<f32>,
}

/// Multi-head attention over already-projected `q`, `k`, `v` (`[tokens, width]`).
///
/// Consumes the buffers (rotating `q` and `k` in place) and returns the
/// concatenated head outputs plus the cache for [`attention_backward`].
pub fn attention_forward(
    mut q: Vec<f32>,
    mut k: Vec<f32>,
    v: Vec<f32>,
    tokens: usize,
    width: usize,
    heads: usize,
    masked_keys: &[bool],
    rope: Option<&RopeTable>,
) -> (Vec<f32>, AttentionCache) {
    let dh = width / heads;
    if let Some(r) = rope {
        r.rotate(&mut q, width, false);
        r.rotate(&mut k, width, false);
    }
    let scale = 1.0 / (dh as f32).sqrt();
    let mut probs = vec![0.0; heads * tokens * tokens];
    let mut out = vec![0.0; tokens * width];
    for h in 0..heads {
        let p = &mut probs[h * tokens * tokens..(h + 1) * tokens * tokens];
        let qh = View::columns(&q, tokens, width, h * dh, dh);
        let kh = View::columns(&k, tokens, width, h * dh, dh);
        gemm(qh, kh.t(), 0.0, p);
        for row in p.chunks_mut(tokens) {
            for (j, s) in row.iter_mut().enumerate() {
                *s *= scale;
                if masked_keys[j] {
                    *s += MASK_OFFSET;
                }
            }
        }
        softmax_rows(p, tokens);
        let vh = View::columns(&v, tokens, width, h * dh, dh);
        gemm_into(View::new(p, tokens, tokens), vh, 0.0, &mut out, width, h * dh);
    }
    (out, AttentionCache { tokens, width, heads, q, k, v, probs })
}

/// Gradients `(dq, dk, dv)` with respect to the unrotated inputs.
pub fn attention_backward(cache: &AttentionCache, dout: &[f32], rope: Option<&RopeTable>) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (t, w, heads) = (cache.tokens, cache.width, cache.heads);
    let dh = w / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut dq = vec![0.0; t * w];
    let mut dk = vec![0.0; t * w];
    let mut dv = vec![0.0; t * w];
    let mut dp = vec![0.0; t * t];
    for h in 0..heads {
        let p = &cache.probs[h * t * t..(h + 1) * t * t];
        let douth = View::columns(dout, t, w, h * dh, dh);
        let vh = View::columns(&cache.v, t, w, h * dh, dh);
        gemm(douth, vh.t(), 0.0, &mut dp);
        gemm_into(View::new(p, t, t).t(), douth, 0.0, &mut dv, w, h * dh);
        softmax_rows_backward(p, &mut dp, t);
        for v in dp.iter_mut() {
            *v *= scale;
        }
        let kh = View::columns(&cache.k, t, w, h * dh, dh);
        let qh = View::columns(&cache.q, t, w, h * dh, dh);
        gemm_into(View::new(&dp, t, t), kh, 0.0, &mut dq, w, h * dh);
        gemm_into(View::new(&dp, t, t).t(), qh, 0.0, &mut dk, w, h * dh);
    }
    if let Some(r) = rope {
        r.rotate(&mut dq, w, true);
        r.rotate(&mut dk, w, true);
    }
    (dq, dk, dv)
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(usize, usize), NnError> {
    if q.shape().len() != 2 || q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(NnError::ShapeMismatch(format!(
            "q/k/v must share a [T, D] shape, got {:?} {:?} {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let (t, d) = (q.shape()[0], q.shape()[1]);
    if heads == 0 || d % heads != 0 {
        return Err(NnError::ShapeMismatch(format!("width {d} not divisible by {heads} heads")));
    }
    Ok((t, d))
}

/// Attention over `[T, D]` queries, keys and values. Keys flagged in
/// `masked_keys` get [`MASK_OFFSET`] added to their logits.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    masked_keys: &[bool],
    rope: Option<&RopeTable>,
) -> Result<Tensor, NnError> {
    let (t, d) = check_qkv(q, k, v, heads)?;
    if masked_keys.len() != t {
        return Err(NnError::ShapeMismatch(format!("{} mask entries for {t} keys", masked_keys.len())));
    }
    if let Some(r) = rope {
        if r.tokens() != t || r.head_dim() != d / heads {
            return Err(NnError::ShapeMismatch("rope table does not match q/k".into()));
        }
    }
    let (out, _) = attention_forward(
        q.data().to_vec(),
        k.data().to_vec(),
        v.data().to_vec(),
        t,
        d,
        heads,
        masked_keys,
        rope,
    );
    Tensor::from_vec(&[t, d], out)
}

/// Gradients of [`multi_head_attention`] for upstream `dout`.
pub fn multi_head_attention_grad(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    masked_keys: &[bool],
    rope: Option<&RopeTable>,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), NnError> {
    let (t, d) = check_qkv(q, k, v, heads)?;
    let (_, cache) = attention_forward(
        q.data().to_vec(),
        k.data().to_vec(),
        v.data().to_vec(),
        t,
        d,
        heads,
        masked_keys,
        rope,
    );
    let (dq, dk, dv) = attention_backward(&cache, dout.data(), rope);
    Ok((Tensor::from_vec(&[t, d], dq)?, Tensor::from_vec(&[t, d], dk)?, Tensor::from_vec(&[t, d], dv)?))
}

/// Applies separable 2D RoPE (base 10000) to `x[T, head_dim]`.
pub fn rope2d_apply(x: &Tensor, coords: &[(usize, usize)]) -> Result<Tensor, NnError> {
    if x.shape().len() != 2 || x.shape()[0] != coords.len() {
        return Err(NnError::ShapeMismatch(format!("{:?} does not match {} coordinates", x.shape(), coords.len())));
    }
    let dh = x.shape()[1];
    let coords: Vec<_> = coords.iter().copied().map(Some).collect();
    let table = RopeTable::new_2d(dh, &coords, ROPE_BASE)?;
    let mut y = x.clone();
    table.rotate(y.data_mut(), dh, false);
    Ok(y)
}
