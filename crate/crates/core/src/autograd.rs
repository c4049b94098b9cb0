//! Minimal tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Only the operations the codec, denoiser and training losses need are
//! provided. Feature maps are `[B, C, H, W]`; attention tokens reuse that
//! layout with `N = H * W`.

use crate::error::{size_err, Result};
use crate::tensor::Tensor;
use crate::tubam::{self, LatentMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Conv2d { x: Var, w: Var, b: Var, k: usize },
    AvgPool { x: Var, f: usize },
    Upsample { x: Var, f: usize },
    Concat(Var, Var),
    AddChannelBias { x: Var, bias: Var },
    Linear { x: Var, w: Var, b: Var },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Vec<Vec<f64>>>,
    },
    ScaleBatch { x: Var, s: Vec<f64> },
    Mse { x: Var, target: Tensor },
    WeightedL1 { x: Var, target: Tensor, weights: Option<Tensor> },
    WeightedL2 { x: Var, target: Tensor, weights: Tensor },
    Combine(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation graph recorded during a forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims4(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [b, c, h, w] => Ok((*b, *c, *h, *w)),
        s => Err(size_err(format!("expected [B, C, H, W], got {:?}", s))),
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..m {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..k {
            let api = a[p * k + i];
            if api == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    }
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ`
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            c[i * k + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// Unfold one `[C, H, W]` image into `[C*k*k, H*W]` patches, zero padded.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &x[ci * hw + sy as usize * w..ci * hw + sy as usize * w + w];
                    for (xo, dv) in drow.iter_mut().enumerate() {
                        let sx = xo as isize + kx as isize - pad as isize;
                        *dv = if sx < 0 || sx >= w as isize { 0.0 } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, dx: &mut [f64]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = ci * hw + sy as usize * w;
                    for xo in 0..w {
                        let sx = xo as isize + kx as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            dx[base + sx as usize] += src[y * w + xo];
                        }
                    }
                }
            }
        }
    }
}

fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is wanted without being a parameter, e.g. an input.
    pub fn input(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_with(self.value(b), |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        let ng = self.needs(x);
        self.push(value, Op::Scale(x, s), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let ng = self.needs(x);
        self.push(value, Op::Silu(x), ng)
    }

    /// Stride-1 convolution with odd kernel `k` and zero padding `k/2`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (bs, ci, h, wd) = dims4(self.value(x))?;
        let (co, wci, k) = match self.value(w).shape() {
            [co, wci, k1, k2] if k1 == k2 && k1 % 2 == 1 => (*co, *wci, *k1),
            s => return Err(size_err(format!("conv weight must be [Co, Ci, k, k] with odd k, got {:?}", s))),
        };
        if wci != ci || self.value(b).shape() != [co] {
            return Err(size_err(format!(
                "conv channel mismatch: input {} weight {:?} bias {:?}",
                ci,
                self.value(w).shape(),
                self.value(b).shape()
            )));
        }
        let hw = h * wd;
        let kk = ci * k * k;
        let mut out = vec![0.0; bs * co * hw];
        let mut cols = vec![0.0; kk * hw];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for bi in 0..bs {
                let o = &mut out[bi * co * hw..(bi + 1) * co * hw];
                for (c, chunk) in o.chunks_mut(hw).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = bv[c]);
                }
                if k == 1 {
                    gemm(wv, &xv[bi * ci * hw..(bi + 1) * ci * hw], o, co, kk, hw);
                } else {
                    im2col(&xv[bi * ci * hw..(bi + 1) * ci * hw], ci, h, wd, k, &mut cols);
                    gemm(wv, &cols, o, co, kk, hw);
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        let value = Tensor::from_vec(&[bs, co, h, wd], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, k }, ng))
    }

    pub fn avg_pool(&mut self, x: Var, f: usize) -> Result<Var> {
        let (bs, c, h, w) = dims4(self.value(x))?;
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(size_err(format!("{}x{} not divisible by pool factor {}", h, w, f)));
        }
        let (oh, ow) = (h / f, w / f);
        let inv = 1.0 / (f * f) as f64;
        let xv = self.value(x).data();
        let mut out = vec![0.0; bs * c * oh * ow];
        for plane in 0..bs * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..h {
                for xo in 0..w {
                    dst[(y / f) * ow + xo / f] += src[y * w + xo] * inv;
                }
            }
        }
        let ng = self.needs(x);
        let value = Tensor::from_vec(&[bs, c, oh, ow], out)?;
        Ok(self.push(value, Op::AvgPool { x, f }, ng))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, f: usize) -> Result<Var> {
        let (bs, c, h, w) = dims4(self.value(x))?;
        let (oh, ow) = (h * f, w * f);
        let xv = self.value(x).data();
        let mut out = vec![0.0; bs * c * oh * ow];
        for plane in 0..bs * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for xo in 0..ow {
                    dst[y * ow + xo] = src[(y / f) * w + xo / f];
                }
            }
        }
        let ng = self.needs(x);
        let value = Tensor::from_vec(&[bs, c, oh, ow], out)?;
        Ok(self.push(value, Op::Upsample { x, f }, ng))
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bs, ca, h, w) = dims4(self.value(a))?;
        let (bs2, cb, h2, w2) = dims4(self.value(b))?;
        if (bs, h, w) != (bs2, h2, w2) {
            return Err(size_err("concat operands differ in batch or spatial dims"));
        }
        let hw = h * w;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(bs * (ca + cb) * hw);
        for bi in 0..bs {
            out.extend_from_slice(&av[bi * ca * hw..(bi + 1) * ca * hw]);
            out.extend_from_slice(&bv[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let ng = self.needs(a) || self.needs(b);
        let value = Tensor::from_vec(&[bs, ca + cb, h, w], out)?;
        Ok(self.push(value, Op::Concat(a, b), ng))
    }

    /// `x[b, c, :, :] += bias[b, c]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (bs, c, h, w) = dims4(self.value(x))?;
        if self.value(bias).shape() != [bs, c] {
            return Err(size_err(format!(
                "channel bias {:?} does not match [{}, {}]",
                self.value(bias).shape(),
                bs,
                c
            )));
        }
        let hw = h * w;
        let mut out = self.value(x).data().to_vec();
        let bv = self.value(bias).data();
        for (plane, chunk) in out.chunks_mut(hw).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bv[plane]);
        }
        let ng = self.needs(x) || self.needs(bias);
        let value = Tensor::from_vec(&[bs, c, h, w], out)?;
        Ok(self.push(value, Op::AddChannelBias { x, bias }, ng))
    }

    /// `x[B, I] · wᵀ + b` with `w: [O, I]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (bs, i) = match self.value(x).shape() {
            [bs, i] => (*bs, *i),
            s => return Err(size_err(format!("linear input must be [B, I], got {:?}", s))),
        };
        let o = match self.value(w).shape() {
            [o, wi] if *wi == i => *o,
            s => return Err(size_err(format!("linear weight {:?} does not accept width {}", s, i))),
        };
        if self.value(b).shape() != [o] {
            return Err(size_err("linear bias shape mismatch"));
        }
        let mut out = Vec::with_capacity(bs * o);
        for _ in 0..bs {
            out.extend_from_slice(self.value(b).data());
        }
        gemm_nt(self.value(x).data(), self.value(w).data(), &mut out, bs, o, i);
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        let value = Tensor::from_vec(&[bs, o], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, ng))
    }

    /// Self-attention over the `N = H*W` positions of `[B, C, H, W]` maps,
    /// with an optional per-item tumor mask of length `N`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        masks: &[Option<LatentMask>],
        alpha: f64,
    ) -> Result<Var> {
        let (bs, c, h, w) = dims4(self.value(q))?;
        if self.value(k).shape() != self.value(q).shape() || self.value(v).shape() != self.value(q).shape() {
            return Err(size_err("attention q/k/v shapes differ"));
        }
        if masks.len() != bs {
            return Err(size_err(format!("{} masks for batch of {}", masks.len(), bs)));
        }
        let n = h * w;
        let mut out = vec![0.0; bs * c * n];
        let mut probs = Vec::with_capacity(bs);
        for bi in 0..bs {
            let tok = |t: &Tensor| {
                Tensor::from_vec(&[n, c], transpose(&t.data()[bi * c * n..(bi + 1) * c * n], c, n))
            };
            let (qt, kt, vt) = (tok(self.value(q))?, tok(self.value(k))?, tok(self.value(v))?);
            let res = tubam::attend_heads(&qt, &kt, &vt, heads, masks[bi].as_ref(), alpha)?;
            out[bi * c * n..(bi + 1) * c * n].copy_from_slice(&transpose(res.output.data(), n, c));
            probs.push(res.probs);
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        let value = Tensor::from_vec(&[bs, c, h, w], out)?;
        Ok(self.push(value, Op::Attention { q, k, v, heads, probs }, ng))
    }

    /// Multiply batch item `i` by `s[i]`.
    pub fn scale_batch(&mut self, x: Var, s: Vec<f64>) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.first() != Some(&s.len()) {
            return Err(size_err("scale_batch needs one factor per batch item"));
        }
        let per = self.value(x).len() / s.len().max(1);
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(per.max(1)).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= s[i]);
        }
        let ng = self.needs(x);
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, Op::ScaleBatch { x, s }, ng))
    }

    /// Mean of `(x - target)²`.
    pub fn mse(&mut self, x: Var, target: Tensor) -> Result<Var> {
        self.value(x).check_same_shape(&target)?;
        let n = target.len().max(1) as f64;
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let ng = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::Mse { x, target }, ng))
    }

    /// Mean of `|w ⊙ x - w ⊙ target|`; unit weights when `weights` is `None`.
    pub fn weighted_l1(&mut self, x: Var, target: Tensor, weights: Option<Tensor>) -> Result<Var> {
        self.value(x).check_same_shape(&target)?;
        if let Some(wt) = &weights {
            wt.check_same_shape(&target)?;
        }
        let n = target.len().max(1) as f64;
        let xv = self.value(x).data();
        let s: f64 = match &weights {
            None => xv.iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum(),
            Some(wt) => xv
                .iter()
                .zip(target.data())
                .zip(wt.data())
                .map(|((a, b), w)| (w * a - w * b).abs())
                .sum(),
        };
        let ng = self.needs(x);
        Ok(self.push(Tensor::scalar(s / n), Op::WeightedL1 { x, target, weights }, ng))
    }

    /// Mean of `(w ⊙ x - w ⊙ target)²`.
    pub fn weighted_l2(&mut self, x: Var, target: Tensor, weights: Tensor) -> Result<Var> {
        self.value(x).check_same_shape(&target)?;
        weights.check_same_shape(&target)?;
        let n = target.len().max(1) as f64;
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .zip(weights.data())
            .map(|((a, b), w)| (w * a - w * b).powi(2))
            .sum();
        let ng = self.needs(x);
        Ok(self.push(Tensor::scalar(s / n), Op::WeightedL2 { x, target, weights }, ng))
    }

    /// `Σ c_i · x_i` over scalar nodes.
    pub fn combine(&mut self, terms: Vec<(Var, f64)>) -> Result<Var> {
        let mut s = 0.0;
        for &(v, c) in &terms {
            if self.value(v).len() != 1 {
                return Err(size_err("combine expects scalar terms"));
            }
            s += c * self.value(v).item();
        }
        let ng = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(Tensor::scalar(s), Op::Combine(terms), ng))
    }

    /// Reverse pass from a scalar root. Returns gradients indexed by [`Var`];
    /// entries are `None` for nodes that do not need gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign_scaled(&g, 1.0),
            slot => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let shape = self.value(v).shape().to_vec();
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(&shape));
        f(slot.data_mut());
    }

    fn propagate(&self, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * s)),
            Op::Silu(x) => {
                let gx = g
                    .zip_with(self.value(*x), |gv, xv| {
                        let s = sigmoid(xv);
                        gv * s * (1.0 + xv * (1.0 - s))
                    })
                    .expect("same shape");
                self.accumulate(grads, *x, gx);
            }
            Op::Conv2d { x, w, b, k } => {
                let (bs, ci, h, wd) = dims4(self.value(*x)).expect("4d");
                let co = self.value(*w).shape()[0];
                let k = *k;
                let hw = h * wd;
                let kk = ci * k * k;
                let gd = g.data();
                if self.needs(*b) {
                    self.accumulate_with(grads, *b, |gb| {
                        for bi in 0..bs {
                            for c in 0..co {
                                gb[c] += gd[(bi * co + c) * hw..(bi * co + c + 1) * hw].iter().sum::<f64>();
                            }
                        }
                    });
                }
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let need_w = self.needs(*w);
                let need_x = self.needs(*x);
                let mut cols = vec![0.0; kk * hw];
                let mut gw = vec![0.0; co * kk];
                let mut gx = if need_x { vec![0.0; bs * ci * hw] } else { Vec::new() };
                let mut dcols = vec![0.0; kk * hw];
                for bi in 0..bs {
                    let go = &gd[bi * co * hw..(bi + 1) * co * hw];
                    let xs = &xv[bi * ci * hw..(bi + 1) * ci * hw];
                    if need_w {
                        if k == 1 {
                            gemm_nt(go, xs, &mut gw, co, kk, hw);
                        } else {
                            im2col(xs, ci, h, wd, k, &mut cols);
                            gemm_nt(go, &cols, &mut gw, co, kk, hw);
                        }
                    }
                    if need_x {
                        let gxs = &mut gx[bi * ci * hw..(bi + 1) * ci * hw];
                        if k == 1 {
                            gemm_tn(wv, go, gxs, co, kk, hw);
                        } else {
                            dcols.iter_mut().for_each(|v| *v = 0.0);
                            gemm_tn(wv, go, &mut dcols, co, kk, hw);
                            col2im(&dcols, ci, h, wd, k, gxs);
                        }
                    }
                }
                if need_w {
                    let shape = self.value(*w).shape().to_vec();
                    self.accumulate(grads, *w, Tensor::from_vec(&shape, gw).expect("shape"));
                }
                if need_x {
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(grads, *x, Tensor::from_vec(&shape, gx).expect("shape"));
                }
            }
            Op::AvgPool { x, f } => {
                let (_, _, h, w) = dims4(self.value(*x)).expect("4d");
                let f = *f;
                let (oh, ow) = (h / f, w / f);
                let inv = 1.0 / (f * f) as f64;
                let gd = g.data();
                self.accumulate_with(grads, *x, |gx| {
                    for (plane, dst) in gx.chunks_mut(h * w).enumerate() {
                        let src = &gd[plane * oh * ow..(plane + 1) * oh * ow];
                        for y in 0..h {
                            for xo in 0..w {
                                dst[y * w + xo] += src[(y / f) * ow + xo / f] * inv;
                            }
                        }
                    }
                });
            }
            Op::Upsample { x, f } => {
                let (_, _, h, w) = dims4(self.value(*x)).expect("4d");
                let f = *f;
                let (oh, ow) = (h * f, w * f);
                let gd = g.data();
                self.accumulate_with(grads, *x, |gx| {
                    for (plane, dst) in gx.chunks_mut(h * w).enumerate() {
                        let src = &gd[plane * oh * ow..(plane + 1) * oh * ow];
                        for y in 0..oh {
                            for xo in 0..ow {
                                dst[(y / f) * w + xo / f] += src[y * ow + xo];
                            }
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let (bs, ca, h, w) = dims4(self.value(*a)).expect("4d");
                let cb = self.value(*b).shape()[1];
                let hw = h * w;
                let gd = g.data();
                self.accumulate_with(grads, *a, |ga| {
                    for bi in 0..bs {
                        let src = &gd[bi * (ca + cb) * hw..bi * (ca + cb) * hw + ca * hw];
                        for (d, s) in ga[bi * ca * hw..(bi + 1) * ca * hw].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
                self.accumulate_with(grads, *b, |gb| {
                    for bi in 0..bs {
                        let start = bi * (ca + cb) * hw + ca * hw;
                        let src = &gd[start..start + cb * hw];
                        for (d, s) in gb[bi * cb * hw..(bi + 1) * cb * hw].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
            }
            Op::AddChannelBias { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                let (_, _, h, w) = dims4(self.value(*x)).expect("4d");
                let hw = h * w;
                let gd = g.data();
                self.accumulate_with(grads, *bias, |gb| {
                    for (plane, acc) in gb.iter_mut().enumerate() {
                        *acc += gd[plane * hw..(plane + 1) * hw].iter().sum::<f64>();
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (bs, i) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let o = self.value(*w).shape()[0];
                let gd = g.data();
                self.accumulate_with(grads, *b, |gb| {
                    for row in gd.chunks(o) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                });
                let xv = self.value(*x).data();
                self.accumulate_with(grads, *w, |gw| gemm_tn(gd, xv, gw, bs, o, i));
                let wv = self.value(*w).data();
                self.accumulate_with(grads, *x, |gx| gemm(gd, wv, gx, bs, o, i));
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (bs, c, h, w) = dims4(self.value(*q)).expect("4d");
                let n = h * w;
                let mut gq = vec![0.0; bs * c * n];
                let mut gk = vec![0.0; bs * c * n];
                let mut gv = vec![0.0; bs * c * n];
                for bi in 0..bs {
                    let range = bi * c * n..(bi + 1) * c * n;
                    let tok = |d: &[f64]| Tensor::from_vec(&[n, c], transpose(&d[range.clone()], c, n)).expect("shape");
                    let (qt, kt, vt) = (tok(self.value(*q).data()), tok(self.value(*k).data()), tok(self.value(*v).data()));
                    let got = tok(g.data());
                    let (dq, dk, dv) =
                        tubam::attend_backward(&qt, &kt, &vt, *heads, &probs[bi], &got).expect("shapes checked in forward");
                    gq[range.clone()].copy_from_slice(&transpose(dq.data(), n, c));
                    gk[range.clone()].copy_from_slice(&transpose(dk.data(), n, c));
                    gv[range.clone()].copy_from_slice(&transpose(dv.data(), n, c));
                }
                let shape = [bs, c, h, w];
                self.accumulate(grads, *q, Tensor::from_vec(&shape, gq).expect("shape"));
                self.accumulate(grads, *k, Tensor::from_vec(&shape, gk).expect("shape"));
                self.accumulate(grads, *v, Tensor::from_vec(&shape, gv).expect("shape"));
            }
            Op::ScaleBatch { x, s } => {
                let per = g.len() / s.len().max(1);
                let mut gx = g.clone();
                for (i, chunk) in gx.data_mut().chunks_mut(per.max(1)).enumerate() {
                    chunk.iter_mut().for_each(|v| *v *= s[i]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Mse { x, target } => {
                let scale = 2.0 * g.item() / target.len().max(1) as f64;
                let gx = self.value(*x).zip_with(target, |a, b| scale * (a - b)).expect("shape");
                self.accumulate(grads, *x, gx);
            }
            Op::WeightedL1 { x, target, weights } => {
                let scale = g.item() / target.len().max(1) as f64;
                let xv = self.value(*x);
                let gx = match weights {
                    None => xv.zip_with(target, |a, b| scale * sign(a - b)).expect("shape"),
                    Some(wt) => {
                        let data = xv
                            .data()
                            .iter()
                            .zip(target.data())
                            .zip(wt.data())
                            .map(|((a, b), w)| scale * w * sign(w * a - w * b))
                            .collect();
                        Tensor::from_vec(xv.shape(), data).expect("shape")
                    }
                };
                self.accumulate(grads, *x, gx);
            }
            Op::WeightedL2 { x, target, weights } => {
                let scale = 2.0 * g.item() / target.len().max(1) as f64;
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(target.data())
                    .zip(weights.data())
                    .map(|((a, b), w)| scale * w * (w * a - w * b))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), data).expect("shape"));
            }
            Op::Combine(terms) => {
                for &(v, c) in terms {
                    self.accumulate(grads, v, Tensor::scalar(c * g.item()));
                }
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}
