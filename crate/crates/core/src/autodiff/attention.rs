// Fused masked multi-head attention: forward and vector-Jacobian product.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::kernels::masked_softmax;

/// One attention group: query rows `q_start..q_start + q_len` attend over the
/// key/value rows listed in `keys`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnBlock {
    pub q_start: usize,
    pub q_len: usize,
    pub keys: Vec<usize>,
    /// Row-major `[q_len, keys.len()]` visibility; `None` means all visible.
    pub mask: Option<Vec<bool>>,
}

impl AttnBlock {
    /// Every query row sees every listed key.
    pub fn full(q_start: usize, q_len: usize, keys: Vec<usize>) -> Self {
        AttnBlock {
            q_start,
            q_len,
            keys,
            mask: None,
        }
    }

    fn visible(&self, qi: usize) -> Option<&[bool]> {
        let nk = self.keys.len();
        self.mask.as_deref().map(|m| &m[qi * nk..(qi + 1) * nk])
    }
}

fn validate(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, blocks: &[AttnBlock]) -> Result<()> {
    let d = q.cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::shape("attention", format!("width {d} not divisible into {heads} heads")));
    }
    if k.cols() != d || v.cols() != d || k.rows() != v.rows() {
        return Err(Error::shape(
            "attention",
            format!("q {:?}, k {:?}, v {:?} disagree", q.shape(), k.shape(), v.shape()),
        ));
    }
    for b in blocks {
        if b.q_start + b.q_len > q.rows() {
            return Err(Error::shape("attention", "query block out of range"));
        }
        if b.keys.iter().any(|&j| j >= k.rows()) {
            return Err(Error::shape("attention", "key index out of range"));
        }
        if let Some(m) = &b.mask {
            if m.len() != b.q_len * b.keys.len() {
                return Err(Error::shape("attention", "mask size does not match block"));
            }
        }
    }
    Ok(())
}

/// Returns the output and, per block, the probabilities laid out as
/// `[heads, q_len, keys.len()]`.
pub(super) fn forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    blocks: &[AttnBlock],
) -> Result<(Tensor, Vec<Vec<f64>>)> {
    validate(q, k, v, heads, blocks)?;
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; q.rows() * d];
    let mut all_probs = Vec::with_capacity(blocks.len());
    for b in blocks {
        let nk = b.keys.len();
        let mut probs = vec![0.0; heads * b.q_len * nk];
        for h in 0..heads {
            let c0 = h * dh;
            for qi in 0..b.q_len {
                let row = b.q_start + qi;
                let qrow = &q.data()[row * d + c0..row * d + c0 + dh];
                let p = &mut probs[(h * b.q_len + qi) * nk..(h * b.q_len + qi + 1) * nk];
                for (j, &kr) in b.keys.iter().enumerate() {
                    let krow = &k.data()[kr * d + c0..kr * d + c0 + dh];
                    p[j] = scale * qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                }
                masked_softmax(p, b.visible(qi));
                let o = &mut out[row * d + c0..row * d + c0 + dh];
                for (j, &kr) in b.keys.iter().enumerate() {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let vrow = &v.data()[kr * d + c0..kr * d + c0 + dh];
                    for (oc, vc) in o.iter_mut().zip(vrow) {
                        *oc += p[j] * vc;
                    }
                }
            }
        }
        all_probs.push(probs);
    }
    Ok((Tensor::new(vec![q.rows(), d], out)?, all_probs))
}

pub(super) fn backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    blocks: &[AttnBlock],
    probs: &[Vec<f64>],
    g: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = vec![0.0; q.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gv = vec![0.0; v.len()];
    let mut dp = Vec::new();
    for (b, bp) in blocks.iter().zip(probs) {
        let nk = b.keys.len();
        dp.resize(nk, 0.0);
        for h in 0..heads {
            let c0 = h * dh;
            for qi in 0..b.q_len {
                let row = b.q_start + qi;
                let p = &bp[(h * b.q_len + qi) * nk..(h * b.q_len + qi + 1) * nk];
                let go = &g.data()[row * d + c0..row * d + c0 + dh];
                // dP = dO · Vᵀ, dV += P ⊙ dO
                let mut dot = 0.0;
                for (j, &kr) in b.keys.iter().enumerate() {
                    let vrow = &v.data()[kr * d + c0..kr * d + c0 + dh];
                    dp[j] = go.iter().zip(vrow).map(|(a, b)| a * b).sum();
                    dot += p[j] * dp[j];
                    if p[j] != 0.0 {
                        let gvr = &mut gv[kr * d + c0..kr * d + c0 + dh];
                        for (x, y) in gvr.iter_mut().zip(go) {
                            *x += p[j] * y;
                        }
                    }
                }
                // dS = P ⊙ (dP − ⟨P, dP⟩), then through the scaled dot product
                let qrow = q.data()[row * d + c0..row * d + c0 + dh].to_vec();
                for (j, &kr) in b.keys.iter().enumerate() {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        gq[row * d + c0 + c] += ds * k.data()[kr * d + c0 + c];
                        gk[kr * d + c0 + c] += ds * qrow[c];
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(q.shape().to_vec(), gq)?,
        Tensor::new(k.shape().to_vec(), gk)?,
        Tensor::new(v.shape().to_vec(), gv)?,
    ))
}
