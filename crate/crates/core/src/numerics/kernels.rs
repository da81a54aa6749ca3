//! Scalar and row-wise kernels shared by the tape and the tape-free
//! inference path.

use crate::error::{Error, Result};

/// `C = alpha * op(A) * op(B) + beta * C` on row-major buffers, where
/// `op(A)` is `m x k` and `op(B)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // A stored as m x k (or k x m when transposed); same for B.
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the buffers have the lengths asserted above and the strides
    // describe exactly those row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity. Zero-norm inputs are a domain error.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine_similarity: lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("cosine similarity of a zero-norm vector".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

/// `log(1 / (1 + e^-x))` without overflow for any finite `x`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax over the visible entries; hidden entries get exactly zero weight.
pub fn masked_softmax(logits: &[f64], visible: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != visible.len() {
        return Err(Error::Shape(format!(
            "masked_softmax: {} logits vs {} mask entries",
            logits.len(),
            visible.len()
        )));
    }
    let mut out = logits.to_vec();
    if !softmax_visible(&mut out, |j| visible[j])? {
        return Err(Error::Precondition(
            "masked_softmax needs at least one visible entry".into(),
        ));
    }
    Ok(out)
}

/// In-place masked softmax. Returns `false` when nothing is visible.
#[inline]
pub(crate) fn softmax_visible(x: &mut [f64], visible: impl Fn(usize) -> bool) -> Result<bool> {
    let mut max = f64::NEG_INFINITY;
    let mut any = false;
    for (j, &v) in x.iter().enumerate() {
        if visible(j) {
            any = true;
            if v > max || v.is_nan() {
                max = v;
            }
        }
    }
    if !any {
        return Ok(false);
    }
    if !max.is_finite() {
        return Err(Error::NonFinite { op: "softmax logits".into() });
    }
    let mut sum = 0.0;
    for (j, v) in x.iter_mut().enumerate() {
        if visible(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
    Ok(true)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Row layout of a multi-head attention call.
///
/// Query row `p` attends over key/value rows
/// `blocks[p] * block_len .. (blocks[p] + 1) * block_len`. The optional mask
/// is laid out `[query row][head][key]`, `true` meaning visible.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub blocks: Vec<usize>,
    pub block_len: usize,
    pub heads: usize,
    pub mask: Option<Vec<bool>>,
}

impl AttentionLayout {
    #[inline]
    fn visible(&self, p: usize, h: usize, j: usize) -> bool {
        match &self.mask {
            Some(m) => m[(p * self.heads + h) * self.block_len + j],
            None => true,
        }
    }

    pub(crate) fn check(&self, q_rows: usize, kv_rows: usize, d: usize) -> Result<()> {
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Shape(format!(
                "model width {d} not divisible by {} heads",
                self.heads
            )));
        }
        if self.blocks.len() != q_rows {
            return Err(Error::Shape(format!(
                "{} block ids for {q_rows} query rows",
                self.blocks.len()
            )));
        }
        if let Some(&b) = self.blocks.iter().max() {
            if (b + 1) * self.block_len > kv_rows {
                return Err(Error::Shape(format!(
                    "key block {b} out of range for {kv_rows} rows"
                )));
            }
        }
        if let Some(m) = &self.mask {
            if m.len() != q_rows * self.heads * self.block_len {
                return Err(Error::Shape("attention mask has the wrong size".into()));
            }
        }
        Ok(())
    }
}

/// `C = alpha * A * B + beta * C` on strided views (`rs*`/`cs*` are the
/// row and column strides of each operand, in elements).
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, c: usize, rs: usize, cs: usize| (r - 1) * rs + (c - 1) * cs;
    assert!(k == 0 || (last(m, k, rsa, csa) < a.len() && last(k, n, rsb, csb) < b.len()));
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: the asserts above keep every addressed element in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Maximal runs `[start, end)` of consecutive query rows sharing a key block.
fn block_runs(blocks: &[usize]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = 0;
    for p in 1..=blocks.len() {
        if p == blocks.len() || blocks[p] != blocks[start] {
            runs.push((start, p));
            start = p;
        }
    }
    runs
}

/// Scaled dot-product multi-head attention over already projected
/// `q`, `k`, `v` (all `d` columns). Returns the concatenated head outputs
/// `[q_rows, d]` and the post-softmax weights `[q_rows, heads, block_len]`.
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    layout: &AttentionLayout,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let rows = q.len() / d;
    layout.check(rows, k.len() / d, d)?;
    let (h, len) = (layout.heads, layout.block_len);
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; rows * d];
    let mut weights = vec![0.0; rows * h * len];
    for (p0, p1) in block_runs(&layout.blocks) {
        let (r, base) = (p1 - p0, layout.blocks[p0] * len);
        for hh in 0..h {
            let w = &mut weights[(p0 * h + hh) * len..];
            gemm_strided(
                r,
                dh,
                len,
                scale,
                &q[p0 * d + hh * dh..],
                (d, 1),
                &k[base * d + hh * dh..],
                (1, d),
                0.0,
                w,
                (h * len, 1),
            );
            for i in 0..r {
                let p = p0 + i;
                let row = &mut w[i * h * len..i * h * len + len];
                if !softmax_visible(row, |j| layout.visible(p, hh, j))? {
                    return Err(Error::Precondition(format!(
                        "attention row {p} head {hh} has no visible token"
                    )));
                }
            }
            gemm_strided(
                r,
                len,
                dh,
                1.0,
                &weights[(p0 * h + hh) * len..],
                (h * len, 1),
                &v[base * d + hh * dh..],
                (d, 1),
                0.0,
                &mut out[p0 * d + hh * dh..],
                (d, 1),
            );
        }
    }
    Ok((out, weights))
}

/// Gradients of [`attention_forward`] given the saved weights.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    layout: &AttentionLayout,
    weights: &[f64],
    dout: &[f64],
    mut dq: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
    mut dv: Option<&mut [f64]>,
) {
    let (h, len) = (layout.heads, layout.block_len);
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dl = Vec::new();
    for (p0, p1) in block_runs(&layout.blocks) {
        let (r, base) = (p1 - p0, layout.blocks[p0] * len);
        dl.resize(r * len, 0.0);
        for hh in 0..h {
            let w = &weights[(p0 * h + hh) * len..];
            let go = &dout[p0 * d + hh * dh..];
            gemm_strided(r, dh, len, 1.0, go, (d, 1), &v[base * d + hh * dh..], (1, d), 0.0, &mut dl, (len, 1));
            if let Some(dv) = dv.as_deref_mut() {
                gemm_strided(len, r, dh, 1.0, w, (1, h * len), go, (d, 1), 1.0, &mut dv[base * d + hh * dh..], (d, 1));
            }
            for i in 0..r {
                let wi = &w[i * h * len..i * h * len + len];
                let di = &mut dl[i * len..(i + 1) * len];
                let s = dot(wi, di);
                for (x, &wj) in di.iter_mut().zip(wi) {
                    *x = scale * wj * (*x - s);
                }
            }
            if let Some(dq) = dq.as_deref_mut() {
                let kh = &k[base * d + hh * dh..];
                gemm_strided(r, len, dh, 1.0, &dl, (len, 1), kh, (d, 1), 1.0, &mut dq[p0 * d + hh * dh..], (d, 1));
            }
            if let Some(dk) = dk.as_deref_mut() {
                let qh = &q[p0 * d + hh * dh..];
                gemm_strided(len, r, dh, 1.0, &dl, (1, len), qh, (d, 1), 1.0, &mut dk[base * d + hh * dh..], (d, 1));
            }
        }
    }
}

/// Mean of the per-head weights for each query row: `[rows, block_len]`.
pub fn head_mean(weights: &[f64], heads: usize, block_len: usize) -> Vec<Vec<f64>> {
    weights
        .chunks(heads * block_len)
        .map(|row| {
            let mut m = vec![0.0; block_len];
            for head in row.chunks(block_len) {
                for (a, w) in m.iter_mut().zip(head) {
                    *a += w;
                }
            }
            m.iter_mut().for_each(|a| *a /= heads as f64);
            m
        })
        .collect()
}
