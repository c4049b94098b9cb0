//! Scaled dot-product self-attention with an additive tumor bias on the logits.
//!
//! For tokens `i, j` the logit is `q_i·k_j / sqrt(d) + alpha * m_i * m_j`, where
//! `m` is the flattened latent tumor mask. With no mask the bias is zero, which is
//! how inference runs.

use serde::{Deserialize, Serialize};

use crate::error::{size_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub alpha_tumor: f64,
    pub head_dim: usize,
    pub heads: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            alpha_tumor: 0.5,
            head_dim: 16,
            heads: 1,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_tumor >= 0.0 && self.alpha_tumor.is_finite()) {
            return Err(Error::Config("alpha_tumor must be finite and >= 0".into()));
        }
        if self.head_dim == 0 || self.heads == 0 {
            return Err(Error::Config("head_dim and heads must be >= 1".into()));
        }
        Ok(())
    }

    pub fn inner_dim(&self) -> usize {
        self.head_dim * self.heads
    }
}

/// Binary mask on the latent grid; `cells()` is the flattened token view.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LatentMask {
    height: usize,
    width: usize,
    cells: Vec<u8>,
}

impl LatentMask {
    pub fn new(height: usize, width: usize, cells: Vec<u8>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(size_err(format!(
                "latent mask {}x{} needs {} cells, got {}",
                height,
                width,
                height * width,
                cells.len()
            )));
        }
        if cells.iter().any(|&v| v > 1) {
            return Err(Error::Validation("latent mask must be binary".into()));
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    /// Flat token mask of length `N`.
    pub fn from_tokens(cells: Vec<u8>) -> Result<Self> {
        let n = cells.len();
        Self::new(1, n, cells)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![0; height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.width + c] == 1
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&v| v == 1).count()
    }

    /// Max-pool by an integer factor along both axes.
    pub fn downsample(&self, factor: usize) -> Result<LatentMask> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(size_err(format!(
                "latent mask {}x{} not divisible by {}",
                self.height, self.width, factor
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut cells = vec![0u8; h * w];
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    cells[(r / factor) * w + c / factor] = 1;
                }
            }
        }
        LatentMask::new(h, w, cells)
    }
}

/// `alpha * m mᵀ` as an `N × N` tensor.
pub fn bias_matrix(mask: &LatentMask, alpha: f64) -> Tensor {
    let m = mask.cells();
    let n = m.len();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        if m[i] == 1 {
            for j in 0..n {
                if m[j] == 1 {
                    out[i * n + j] = alpha;
                }
            }
        }
    }
    Tensor::from_vec(&[n, n], out).expect("n*n elements")
}

/// Attention output together with the per-head probability matrices, which the
/// backward pass reuses.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Tensor,
    /// One `N × N` row-stochastic matrix per head.
    pub probs: Vec<Vec<f64>>,
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(usize, usize)> {
    let (n, d) = match q.shape() {
        [n, d] => (*n, *d),
        s => return Err(size_err(format!("query must be N x d, got {:?}", s))),
    };
    if k.shape() != [n, d] || v.shape() != [n, d] {
        return Err(size_err(format!(
            "q/k/v shapes differ: {:?} {:?} {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(size_err(format!("width {} not divisible by {} heads", d, heads)));
    }
    Ok((n, d))
}

/// Multi-head attention on `N × (heads·head_dim)` inputs. The same bias is
/// added to every head.
pub fn attend_heads(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: Option<&LatentMask>,
    alpha: f64,
) -> Result<AttentionOutput> {
    let (n, d) = check_qkv(q, k, v, heads)?;
    if let Some(m) = mask {
        if m.len() != n {
            return Err(size_err(format!(
                "mask has {} tokens, attention has {}",
                m.len(),
                n
            )));
        }
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; n * d];
    let mut probs = Vec::with_capacity(heads);
    let mut row = vec![0.0; n];
    for h in 0..heads {
        let off = h * dh;
        let mut p = vec![0.0; n * n];
        for i in 0..n {
            let qi = &qd[i * d + off..i * d + off + dh];
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                let kj = &kd[j * d + off..j * d + off + dh];
                let mut s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                if let Some(m) = mask {
                    if m.cells()[i] == 1 && m.cells()[j] == 1 {
                        s += alpha;
                    }
                }
                row[j] = s;
                max = max.max(s);
            }
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            let prow = &mut p[i * n..(i + 1) * n];
            for (dst, x) in prow.iter_mut().zip(&row) {
                *dst = x / z;
            }
            let orow = &mut out[i * d + off..i * d + off + dh];
            for (j, &pij) in prow.iter().enumerate() {
                let vj = &vd[j * d + off..j * d + off + dh];
                for (o, &x) in orow.iter_mut().zip(vj) {
                    *o += pij * x;
                }
            }
        }
        probs.push(p);
    }
    Ok(AttentionOutput {
        output: Tensor::from_vec(&[n, d], out)?,
        probs,
    })
}

/// Single-head attention; `d` is the width of `q`.
pub fn attend(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&LatentMask>,
    alpha: f64,
) -> Result<Tensor> {
    Ok(attend_heads(q, k, v, 1, mask, alpha)?.output)
}

/// Gradients of `attend_heads` with respect to `q`, `k`, `v` given the upstream
/// gradient `d_out` and the probabilities from the forward pass.
pub fn attend_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    probs: &[Vec<f64>],
    d_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, d) = check_qkv(q, k, v, heads)?;
    d_out.check_same_shape(q)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd, go) = (q.data(), k.data(), v.data(), d_out.data());
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    let mut dp = vec![0.0; n];
    for (h, p) in probs.iter().enumerate().take(heads) {
        let off = h * dh;
        for i in 0..n {
            let goi = &go[i * d + off..i * d + off + dh];
            let prow = &p[i * n..(i + 1) * n];
            // dV_j += P_ij dO_i ; dP_ij = dO_i · V_j
            let mut dot = 0.0;
            for j in 0..n {
                let vj = &vd[j * d + off..j * d + off + dh];
                dp[j] = goi.iter().zip(vj).map(|(a, b)| a * b).sum();
                dot += prow[j] * dp[j];
                let dvj = &mut dv[j * d + off..j * d + off + dh];
                for (acc, &g) in dvj.iter_mut().zip(goi) {
                    *acc += prow[j] * g;
                }
            }
            for j in 0..n {
                let ds = prow[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    dq[i * d + off + c] += ds * kd[j * d + off + c];
                    dk[j * d + off + c] += ds * qd[i * d + off + c];
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(&[n, d], dq)?,
        Tensor::from_vec(&[n, d], dk)?,
        Tensor::from_vec(&[n, d], dv)?,
    ))
}
