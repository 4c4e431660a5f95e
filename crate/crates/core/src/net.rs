//! Small reverse-mode tape over `(C, H, W)` tensors and the encoder-decoder
//! network built on it.
//!
//! The tape records every intermediate value. `backward` walks it in reverse
//! and returns one gradient buffer per network parameter. Convolutions are
//! lowered to matrix products over an im2col buffer.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};

type Shape = (usize, usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct AttnCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    o: Array2<f64>,
    /// One `N x N` attention matrix per head.
    probs: Vec<Array2<f64>>,
}

enum Op {
    Leaf,
    Param(usize),
    Conv { x: Var, w: Var, b: Var, k: usize },
    GroupNorm { x: Var, groups: usize, rstd: Vec<f64> },
    Silu { x: Var },
    Add { a: Var, b: Var },
    AddBias { x: Var, b: Var },
    Concat { a: Var, b: Var },
    Pool { x: Var },
    Upsample { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Attention { x: Var, wq: Var, wk: Var, wv: Var, wo: Var, frames: usize, heads: usize, cache: Box<AttnCache> },
}

struct Node {
    shape: Shape,
    val: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn len(s: Shape) -> usize {
    s.0 * s.1 * s.2
}

fn view(data: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).unwrap()
}

fn view_mut(data: &mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).unwrap()
}

/// Largest divisor of `c` that is at most 8.
pub fn norm_groups(c: usize) -> usize {
    (1..=8.min(c)).rev().find(|g| c % g == 0).unwrap_or(1)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `(C*k*k, H*W)` patch matrix with zero padding for `k = 3`.
fn im2col(x: &[f64], (c, h, w): Shape, k: usize) -> Vec<f64> {
    if k == 1 {
        return x.to_vec();
    }
    let pad = k / 2;
    let hw = h * w;
    let mut cols = vec![0.0; c * k * k * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    let dx = kx as isize - pad as isize;
                    let (lo, hi) = ((-dx).max(0) as usize, (w as isize - dx).min(w as isize) as usize);
                    for xx in lo..hi {
                        dst[xx] = src[(xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`, accumulated into `dx`.
fn col2im(cols: &[f64], dx: &mut [f64], (c, h, w): Shape, k: usize) {
    if k == 1 {
        dx.iter_mut().zip(cols).for_each(|(d, g)| *d += g);
        return;
    }
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..][..w];
                    let dst = &mut plane[sy as usize * w..][..w];
                    let dxo = kx as isize - pad as isize;
                    let (lo, hi) = ((-dxo).max(0) as usize, (w as isize - dxo).min(w as isize) as usize);
                    for xx in lo..hi {
                        dst[(xx as isize + dxo) as usize] += src[xx];
                    }
                }
            }
        }
    }
}

/// Tokens `(frames * h * w, d)` from channels laid out as `frame * d + feature`.
fn to_tokens(x: &[f64], (c, h, w): Shape, frames: usize) -> Array2<f64> {
    let d = c / frames;
    let hw = h * w;
    Array2::from_shape_fn((frames * hw, d), |(t, e)| {
        let (f, p) = (t / hw, t % hw);
        x[(f * d + e) * hw + p]
    })
}

fn from_tokens(tok: &Array2<f64>, (c, h, w): Shape, frames: usize, out: &mut [f64]) {
    let d = c / frames;
    let hw = h * w;
    for ((t, e), &v) in tok.indexed_iter() {
        let (f, p) = (t / hw, t % hw);
        out[(f * d + e) * hw + p] += v;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].val
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    fn push(&mut self, shape: Shape, val: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(len(shape), val.len());
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            Op::Conv { x, w, b, .. } | Op::Linear { x, w, b } => [x, w, b].iter().any(|v| self.nodes[v.0].needs_grad),
            Op::GroupNorm { x, .. } | Op::Silu { x } | Op::Pool { x } | Op::Upsample { x } => self.nodes[x.0].needs_grad,
            Op::Add { a, b } | Op::Concat { a, b } => self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad,
            Op::AddBias { x, b } => self.nodes[x.0].needs_grad || self.nodes[b.0].needs_grad,
            Op::Attention { .. } => true,
        };
        self.nodes.push(Node { shape, val, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: Shape, val: Vec<f64>) -> Var {
        self.push(shape, val, Op::Leaf)
    }

    pub fn param(&mut self, index: usize, val: Vec<f64>) -> Var {
        let n = val.len();
        self.push((n, 1, 1), val, Op::Param(index))
    }

    /// Parameter node viewed as a `(C, H, W)` tensor.
    pub fn param_shaped(&mut self, index: usize, shape: Shape, val: Vec<f64>) -> Var {
        self.push(shape, val, Op::Param(index))
    }

    /// Same-padded convolution; `w` is `(c_out, c_in * k * k)` row-major.
    pub fn conv(&mut self, x: Var, w: Var, b: Var, k: usize) -> Var {
        let (c, h, wd) = self.shape(x);
        let c_out = self.nodes[b.0].val.len();
        let kk = c * k * k;
        assert_eq!(self.nodes[w.0].val.len(), c_out * kk, "conv weight size");
        let hw = h * wd;
        let cols = im2col(self.value(x), (c, h, wd), k);
        let mut out = vec![0.0; c_out * hw];
        for (co, &bias) in self.nodes[b.0].val.iter().enumerate() {
            out[co * hw..(co + 1) * hw].fill(bias);
        }
        general_mat_mul(1.0, &view(&self.nodes[w.0].val, c_out, kk), &view(&cols, kk, hw), 1.0, &mut view_mut(&mut out, c_out, hw));
        self.push((c_out, h, wd), out, Op::Conv { x, w, b, k })
    }

    pub fn group_norm(&mut self, x: Var) -> Var {
        let shape = self.shape(x);
        let groups = norm_groups(shape.0);
        let m = len(shape) / groups;
        let mut out = self.value(x).to_vec();
        let mut rstd = Vec::with_capacity(groups);
        for g in out.chunks_mut(m) {
            let mean = g.iter().sum::<f64>() / m as f64;
            let var = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + 1e-5).sqrt();
            g.iter_mut().for_each(|v| *v = (*v - mean) * r);
            rstd.push(r);
        }
        self.push(shape, out, Op::GroupNorm { x, groups, rstd })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v * sigmoid(v)).collect();
        self.push(self.shape(x), out, Op::Silu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b));
        let out = self.value(a).iter().zip(self.value(b)).map(|(p, q)| p + q).collect();
        self.push(self.shape(a), out, Op::Add { a, b })
    }

    /// Adds `b[c]` to every cell of channel `c`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (c, h, w) = self.shape(x);
        assert_eq!(self.nodes[b.0].val.len(), c);
        let hw = h * w;
        let mut out = self.value(x).to_vec();
        for (ch, &bv) in self.nodes[b.0].val.iter().enumerate() {
            out[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v += bv);
        }
        self.push((c, h, w), out, Op::AddBias { x, b })
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ca, h, w) = self.shape(a);
        let (cb, hb, wb) = self.shape(b);
        assert_eq!((h, w), (hb, wb));
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b));
        self.push((ca + cb, h, w), out, Op::Concat { a, b })
    }

    /// 2x2 average pooling.
    pub fn pool(&mut self, x: Var) -> Var {
        let (c, h, w) = self.shape(x);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x);
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let base = ch * h * w + 2 * i * w + 2 * j;
                    out[(ch * ho + i) * wo + j] = 0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
                }
            }
        }
        self.push((c, ho, wo), out, Op::Pool { x })
    }

    /// 2x nearest-neighbour upsampling.
    pub fn upsample(&mut self, x: Var) -> Var {
        let (c, h, w) = self.shape(x);
        let (ho, wo) = (2 * h, 2 * w);
        let src = self.value(x);
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    out[(ch * ho + i) * wo + j] = src[(ch * h + i / 2) * w + j / 2];
                }
            }
        }
        self.push((c, ho, wo), out, Op::Upsample { x })
    }

    /// `W x + b` on a vector; `w` is `(out, in)` row-major.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let n_in = self.value(x).len();
        let n_out = self.nodes[b.0].val.len();
        let wv = &self.nodes[w.0].val;
        assert_eq!(wv.len(), n_in * n_out);
        let xv = self.value(x);
        let out = (0..n_out)
            .map(|o| self.nodes[b.0].val[o] + wv[o * n_in..(o + 1) * n_in].iter().zip(xv).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        self.push((n_out, 1, 1), out, Op::Linear { x, w, b })
    }

    /// Multi-head self-attention over `frames * H * W` tokens. Channels of
    /// `x` are `frames * d`; projections are `d x d` (input-major).
    pub fn attention(&mut self, x: Var, wq: Var, wk: Var, wv: Var, wo: Var, frames: usize, heads: usize) -> Var {
        let shape = self.shape(x);
        let d = shape.0 / frames;
        assert!(d % heads == 0 && shape.0 % frames == 0);
        let dh = d / heads;
        let xt = to_tokens(self.value(x), shape, frames);
        let m = |v: Var| view(&self.nodes[v.0].val, d, d).to_owned();
        let q = xt.dot(&m(wq));
        let k = xt.dot(&m(wk));
        let v = xt.dot(&m(wv));
        let n = xt.nrows();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut o = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let cols = ndarray::s![.., hd * dh..(hd + 1) * dh];
            let mut s = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            for mut row in s.rows_mut() {
                let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                row.mapv_inplace(|z| (z - mx).exp());
                let tot = row.sum();
                row.mapv_inplace(|z| z / tot);
            }
            o.slice_mut(cols).assign(&s.dot(&v.slice(cols)));
            probs.push(s);
        }
        let y = o.dot(&m(wo));
        let mut out = vec![0.0; len(shape)];
        from_tokens(&y, shape, frames, &mut out);
        let cache = Box::new(AttnCache { x: xt, q, k, v, o, probs });
        self.push(shape, out, Op::Attention { x, wq, wk, wv, wo, frames, heads, cache })
    }

    /// Reverse sweep from `out` seeded with `seed`; returns gradients for
    /// parameter indices `0..n_params`.
    pub fn backward(&self, out: Var, seed: &[f64], n_params: usize) -> Vec<Vec<f64>> {
        let mut grads: Vec<Option<Vec<f64>>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(seed.to_vec());
        let mut pgrads: Vec<Vec<f64>> = vec![Vec::new(); n_params];
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let mut acc = |v: Var, delta: Vec<f64>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
                    slot => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => {
                    let slot = &mut pgrads[*p];
                    if slot.is_empty() {
                        *slot = g;
                    } else {
                        slot.iter_mut().zip(&g).for_each(|(e, d)| *e += d);
                    }
                }
                &Op::Conv { x, w, b, k } => {
                    let (c, h, wd) = self.shape(x);
                    let c_out = node.shape.0;
                    let hw = h * wd;
                    let kk = c * k * k;
                    let gy = view(&g, c_out, hw);
                    acc(b, gy.rows().into_iter().map(|r| r.sum()).collect());
                    if self.nodes[w.0].needs_grad {
                        let cols = im2col(self.value(x), (c, h, wd), k);
                        let mut gw = vec![0.0; c_out * kk];
                        general_mat_mul(1.0, &gy, &view(&cols, kk, hw).t(), 0.0, &mut view_mut(&mut gw, c_out, kk));
                        acc(w, gw);
                    }
                    if self.nodes[x.0].needs_grad {
                        let mut gcols = vec![0.0; kk * hw];
                        general_mat_mul(1.0, &view(&self.nodes[w.0].val, c_out, kk).t(), &gy, 0.0, &mut view_mut(&mut gcols, kk, hw));
                        let mut gx = vec![0.0; c * hw];
                        col2im(&gcols, &mut gx, (c, h, wd), k);
                        acc(x, gx);
                    }
                }
                Op::GroupNorm { x, groups, rstd } => {
                    let m = node.val.len() / groups;
                    let mut gx = vec![0.0; node.val.len()];
                    for gi in 0..*groups {
                        let r = gi * m..(gi + 1) * m;
                        let (yv, gy) = (&node.val[r.clone()], &g[r.clone()]);
                        let mean_g = gy.iter().sum::<f64>() / m as f64;
                        let mean_gy = gy.iter().zip(yv).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        for ((o, &gyv), &yy) in gx[r].iter_mut().zip(gy).zip(yv) {
                            *o = rstd[gi] * (gyv - mean_g - yy * mean_gy);
                        }
                    }
                    acc(*x, gx);
                }
                &Op::Silu { x } => {
                    let gx = self
                        .value(x)
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gy)| {
                            let s = sigmoid(v);
                            gy * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    acc(x, gx);
                }
                &Op::Add { a, b } => {
                    acc(a, g.clone());
                    acc(b, g);
                }
                &Op::AddBias { x, b } => {
                    let (c, h, w) = node.shape;
                    let hw = h * w;
                    acc(b, (0..c).map(|ch| g[ch * hw..(ch + 1) * hw].iter().sum()).collect());
                    acc(x, g);
                }
                &Op::Concat { a, b } => {
                    let na = self.nodes[a.0].val.len();
                    acc(a, g[..na].to_vec());
                    acc(b, g[na..].to_vec());
                }
                &Op::Pool { x } => {
                    let (c, h, w) = self.shape(x);
                    let (ho, wo) = (h / 2, w / 2);
                    let mut gx = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                gx[(ch * h + i) * w + j] = 0.25 * g[(ch * ho + i / 2) * wo + j / 2];
                            }
                        }
                    }
                    acc(x, gx);
                }
                &Op::Upsample { x } => {
                    let (c, h, w) = self.shape(x);
                    let (ho, wo) = (2 * h, 2 * w);
                    let mut gx = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for i in 0..ho {
                            for j in 0..wo {
                                gx[(ch * h + i / 2) * w + j / 2] += g[(ch * ho + i) * wo + j];
                            }
                        }
                    }
                    acc(x, gx);
                }
                &Op::Linear { x, w, b } => {
                    let xv = self.value(x);
                    let n_in = xv.len();
                    let wv = &self.nodes[w.0].val;
                    let mut gw = vec![0.0; wv.len()];
                    let mut gx = vec![0.0; n_in];
                    for (o, &gy) in g.iter().enumerate() {
                        for i in 0..n_in {
                            gw[o * n_in + i] = gy * xv[i];
                            gx[i] += gy * wv[o * n_in + i];
                        }
                    }
                    acc(b, g.clone());
                    acc(w, gw);
                    acc(x, gx);
                }
                &Op::Attention { x, wq, wk, wv, wo, frames, heads, ref cache } => {
                    let shape = node.shape;
                    let d = shape.0 / frames;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let m = |v: Var| view(&self.nodes[v.0].val, d, d);
                    let gy = to_tokens(&g, shape, frames);
                    acc(wo, cache.o.t().dot(&gy).into_raw_vec_and_offset().0);
                    let go = gy.dot(&m(wo).t());
                    let n = go.nrows();
                    let mut gq = Array2::zeros((n, d));
                    let mut gk = Array2::zeros((n, d));
                    let mut gv = Array2::zeros((n, d));
                    for hd in 0..heads {
                        let cols = ndarray::s![.., hd * dh..(hd + 1) * dh];
                        let p = &cache.probs[hd];
                        let go_h = go.slice(cols);
                        let gp = go_h.dot(&cache.v.slice(cols).t());
                        gv.slice_mut(cols).assign(&p.t().dot(&go_h));
                        let mut gs = gp;
                        for (mut grow, prow) in gs.rows_mut().into_iter().zip(p.rows()) {
                            let dot: f64 = grow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
                            grow.zip_mut_with(&prow, |gv, &pv| *gv = pv * (*gv - dot));
                        }
                        gs *= scale;
                        gq.slice_mut(cols).assign(&gs.dot(&cache.k.slice(cols)));
                        gk.slice_mut(cols).assign(&gs.t().dot(&cache.q.slice(cols)));
                    }
                    let xt = &cache.x;
                    acc(wq, xt.t().dot(&gq).into_raw_vec_and_offset().0);
                    acc(wk, xt.t().dot(&gk).into_raw_vec_and_offset().0);
                    acc(wv, xt.t().dot(&gv).into_raw_vec_and_offset().0);
                    let gxt = gq.dot(&m(wq).t()) + gk.dot(&m(wk).t()) + gv.dot(&m(wv).t());
                    let mut gx = vec![0.0; len(shape)];
                    from_tokens(&gxt, shape, frames, &mut gx);
                    acc(x, gx);
                }
            }
        }
        pgrads
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Temporal window length (odd).
    pub window: usize,
    pub base_channels: usize,
    pub n_levels: usize,
    pub attn_heads: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { window: 5, base_channels: 16, n_levels: 2, attn_heads: 2 }
    }
}

pub const N_FOURIER: usize = 8;

impl NetConfig {
    pub fn in_channels(&self) -> usize {
        2 * self.window
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn emb_dim(&self) -> usize {
        4 * self.base_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 {
            return Err(Error::Config(format!("window {} must be odd", self.window)));
        }
        if self.n_levels < 2 {
            return Err(Error::Config(format!("n_levels {} must be >= 2", self.n_levels)));
        }
        if self.base_channels == 0 || self.attn_heads == 0 {
            return Err(Error::Config("base_channels and attn_heads must be positive".into()));
        }
        if self.channels(self.n_levels) % self.attn_heads != 0 {
            return Err(Error::Config(format!(
                "attn_heads {} must divide bottleneck width {}",
                self.attn_heads,
                self.channels(self.n_levels)
            )));
        }
        Ok(())
    }

    pub fn check_grid(&self, height: usize, width: usize) -> Result<()> {
        let f = 1 << self.n_levels;
        if height % f != 0 || width % f != 0 {
            return Err(Error::Shape(format!("grid {height}x{width} not divisible by 2^{}", self.n_levels)));
        }
        Ok(())
    }
}

/// Name, shape and initialization of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub zero_init: bool,
}

impl ParamInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

enum Source<'a> {
    Layout(Vec<ParamInfo>),
    Values(&'a [Vec<f64>]),
}

/// Walks the architecture, either recording the parameter layout or
/// feeding stored values onto the tape.
struct Builder<'a> {
    tape: Tape,
    src: Source<'a>,
    cursor: usize,
}

impl Builder<'_> {
    fn param(&mut self, name: String, shape: Vec<usize>, fan_in: usize, zero_init: bool) -> Var {
        let idx = self.cursor;
        self.cursor += 1;
        let n: usize = shape.iter().product();
        let val = match &mut self.src {
            Source::Layout(infos) => {
                infos.push(ParamInfo { name, shape, fan_in, zero_init });
                vec![0.0; n]
            }
            Source::Values(v) => {
                debug_assert_eq!(v[idx].len(), n, "{name}");
                v[idx].clone()
            }
        };
        self.tape.param(idx, val)
    }

    fn conv(&mut self, x: Var, c_out: usize, k: usize, name: &str, zero: bool) -> Var {
        let c_in = self.tape.shape(x).0;
        let w = self.param(format!("{name}.w"), vec![c_out, c_in, k, k], c_in * k * k, zero);
        let b = self.param(format!("{name}.b"), vec![c_out], c_in * k * k, true);
        self.tape.conv(x, w, b, k)
    }

    fn linear(&mut self, x: Var, n_out: usize, name: &str) -> Var {
        let n_in = self.tape.shape(x).0;
        let w = self.param(format!("{name}.w"), vec![n_out, n_in], n_in, false);
        let b = self.param(format!("{name}.b"), vec![n_out], n_in, true);
        self.tape.linear(x, w, b)
    }

    fn norm_act(&mut self, x: Var) -> Var {
        let h = self.tape.group_norm(x);
        self.tape.silu(h)
    }

    fn resblock(&mut self, x: Var, emb: Var, c_out: usize, name: &str) -> Var {
        let c_in = self.tape.shape(x).0;
        let h = self.norm_act(x);
        let h = self.conv(h, c_out, 3, &format!("{name}.conv1"), false);
        let e = self.linear(emb, c_out, &format!("{name}.emb"));
        let h = self.tape.add_bias(h, e);
        let h = self.norm_act(h);
        let h = self.conv(h, c_out, 3, &format!("{name}.conv2"), false);
        let skip = if c_in == c_out { x } else { self.conv(x, c_out, 1, &format!("{name}.skip"), false) };
        self.tape.add(h, skip)
    }

    fn attention(&mut self, x: Var, frames: usize, heads: usize, name: &str) -> Var {
        let c = self.tape.shape(x).0;
        let d = c;
        let h = self.tape.group_norm(x);
        let h = self.conv(h, frames * d, 1, &format!("{name}.proj_in"), false);
        let mut mats = [Var(0); 4];
        for (slot, tag) in mats.iter_mut().zip(["q", "k", "v", "o"]) {
            *slot = self.param(format!("{name}.w{tag}"), vec![d, d], d, false);
        }
        let h = self.tape.attention(h, mats[0], mats[1], mats[2], mats[3], frames, heads);
        let h = self.conv(h, c, 1, &format!("{name}.proj_out"), false);
        self.tape.add(x, h)
    }
}

/// Fourier features of the noise conditioning scalar.
pub fn noise_features(c_noise: f64) -> Vec<f64> {
    (0..N_FOURIER / 2)
        .flat_map(|j| {
            let a = c_noise * (1u32 << j) as f64 * std::f64::consts::PI;
            [a.cos(), a.sin()]
        })
        .collect()
}

/// `F_theta`: input `(2w, H, W)` and `c_noise`, output `(w, H, W)`.
fn unet(b: &mut Builder, cfg: &NetConfig, input: Vec<f64>, (h, w): (usize, usize), c_noise: f64) -> Var {
    let x = b.tape.leaf((cfg.in_channels(), h, w), input);
    let feats = b.tape.leaf((N_FOURIER, 1, 1), noise_features(c_noise));
    let emb = b.linear(feats, cfg.emb_dim(), "emb");
    let emb = b.tape.silu(emb);

    let mut hcur = b.conv(x, cfg.channels(0), 3, "stem", false);
    let mut skips = Vec::with_capacity(cfg.n_levels);
    for l in 0..cfg.n_levels {
        hcur = b.resblock(hcur, emb, cfg.channels(l), &format!("enc{l}"));
        skips.push(hcur);
        hcur = b.tape.pool(hcur);
    }
    hcur = b.resblock(hcur, emb, cfg.channels(cfg.n_levels), "mid");
    hcur = b.attention(hcur, cfg.window, cfg.attn_heads, "attn");
    for l in (0..cfg.n_levels).rev() {
        hcur = b.tape.upsample(hcur);
        hcur = b.tape.concat(hcur, skips[l]);
        hcur = b.resblock(hcur, emb, cfg.channels(l), &format!("dec{l}"));
    }
    let hcur = b.norm_act(hcur);
    b.conv(hcur, cfg.window, 3, "out", true)
}

/// Parameter layout in flatten order.
pub fn layout(cfg: &NetConfig) -> Vec<ParamInfo> {
    let side = 1 << cfg.n_levels;
    let mut b = Builder { tape: Tape::new(), src: Source::Layout(Vec::new()), cursor: 0 };
    unet(&mut b, cfg, vec![0.0; cfg.in_channels() * side * side], (side, side), 0.0);
    match b.src {
        Source::Layout(v) => v,
        Source::Values(_) => unreachable!(),
    }
}

/// Run `F_theta` on the tape. Returns the tape and the output node.
pub fn run(cfg: &NetConfig, params: &[Vec<f64>], input: Vec<f64>, hw: (usize, usize), c_noise: f64) -> (Tape, Var) {
    let mut b = Builder { tape: Tape::new(), src: Source::Values(params), cursor: 0 };
    let out = unet(&mut b, cfg, input, hw, c_noise);
    assert_eq!(b.cursor, params.len(), "parameter count mismatch");
    (b.tape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn rand_vec(seed: u64, n: usize) -> Vec<f64> {
        rng::normal_vec(&mut rng::rng(seed), n)
    }

    /// Central-difference check of `L = <r, f(params)>` for a graph built
    /// from parameter nodes only.
    fn check_grad(shapes: &[Shape], build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let params: Vec<Vec<f64>> = shapes.iter().enumerate().map(|(i, &s)| rand_vec(10 + i as u64, len(s))).collect();
        let eval = |ps: &[Vec<f64>]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = ps.iter().enumerate().map(|(i, p)| t.param_shaped(i, shapes[i], p.clone())).collect();
            let out = build(&mut t, &vars);
            (t, out)
        };
        let (t, out) = eval(&params);
        let r = rand_vec(99, t.value(out).len());
        let loss = |ps: &[Vec<f64>]| {
            let (t, out) = eval(ps);
            t.value(out).iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
        };
        let grads = t.backward(out, &r, params.len());
        let h = 1e-6;
        for (pi, p) in params.iter().enumerate() {
            for k in 0..p.len() {
                let mut up = params.clone();
                let mut dn = params.clone();
                up[pi][k] += h;
                dn[pi][k] -= h;
                let fd = (loss(&up) - loss(&dn)) / (2.0 * h);
                let an = grads[pi].get(k).copied().unwrap_or(0.0);
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "param {pi}[{k}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn op_gradients() {
        let s = (3, 4, 4);
        let v = |n| (n, 1, 1);
        check_grad(&[s, v(2 * 27), v(2)], |t, p| t.conv(p[0], p[1], p[2], 3));
        check_grad(&[s, v(2 * 3), v(2)], |t, p| t.conv(p[0], p[1], p[2], 1));
        check_grad(&[(6, 2, 4)], |t, p| t.group_norm(p[0]));
        check_grad(&[s, s], |t, p| {
            let c = t.silu(p[0]);
            let d = t.concat(c, p[1]);
            let e = t.pool(d);
            t.upsample(e)
        });
        check_grad(&[s, v(3)], |t, p| {
            let b = t.add(p[0], p[0]);
            t.add_bias(b, p[1])
        });
        check_grad(&[v(5), v(15), v(3)], |t, p| t.linear(p[0], p[1], p[2]));
        check_grad(&[(12, 2, 4), v(16), v(16), v(16), v(16)], |t, p| t.attention(p[0], p[1], p[2], p[3], p[4], 3, 2));
    }

    #[test]
    fn groups() {
        assert_eq!(norm_groups(4), 4);
        assert_eq!(norm_groups(24), 8);
        assert_eq!(norm_groups(12), 6);
        assert_eq!(norm_groups(7), 7);
        assert_eq!(norm_groups(11), 1);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let (c, h, w, co) = (2, 5, 4, 3);
        let x = rand_vec(1, c * h * w);
        let wt = rand_vec(2, co * c * 9);
        let bias = rand_vec(3, co);
        let mut t = Tape::new();
        let xv = t.leaf((c, h, w), x.clone());
        let wv = t.param(0, wt.clone());
        let bv = t.param(1, bias.clone());
        let y = t.conv(xv, wv, bv, 3);
        for o in 0..co {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = bias[o];
                    for ci in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (si, sj) = (i as isize + ky as isize - 1, j as isize + kx as isize - 1);
                                if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                                    acc += wt[((o * c + ci) * 3 + ky) * 3 + kx] * x[(ci * h + si as usize) * w + sj as usize];
                                }
                            }
                        }
                    }
                    assert!((t.value(y)[(o * h + i) * w + j] - acc).abs() < 1e-12);
                }
            }
        }
    }
}
