//! Reverse-mode differentiation over C×H×W activations.
//!
//! A [`Tape`] records every operation of one forward pass of one sample.
//! [`Tape::backward`] then walks the records in reverse and returns the
//! gradient for every parameter slot that took part in the pass.

use std::collections::HashMap;

use super::real::{matmul, Real};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Channel, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param {
        slot: usize,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        /// (mean, 1/std) per group.
        stats: Vec<(T, T)>,
    },
    Silu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    AddChannel {
        x: Var,
        v: Var,
    },
    Affine {
        x: Var,
        scale: T,
    },
    Concat {
        a: Var,
        b: Var,
    },
    PixelShuffle {
        x: Var,
        r: usize,
    },
    Upsample {
        x: Var,
        r: usize,
    },
    AvgPool {
        x: Var,
        r: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<T>,
    },
    Mse {
        a: Var,
        b: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    dims: Dims,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, Var>,
}

/// Gradients indexed by parameter slot; `None` for slots not on the tape.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub slots: Vec<Option<Vec<T>>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> Dims {
        self.nodes[v.0].dims
    }

    fn push(&mut self, dims: Dims, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(dims.len(), value.len());
        self.nodes.push(Node {
            dims,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, dims: Dims, value: Vec<T>) -> Var {
        assert_eq!(dims.len(), value.len(), "input length mismatch");
        self.push(dims, value, Op::Leaf, false)
    }

    /// Registers parameter `slot`; repeated calls return the same handle.
    pub fn param(&mut self, slot: usize, value: &[T]) -> Var {
        if let Some(&v) = self.params.get(&slot) {
            return v;
        }
        let v = self.push(
            Dims::new(value.len(), 1, 1),
            value.to_vec(),
            Op::Param { slot },
            true,
        );
        self.params.insert(slot, v);
        v
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Var {
        let xd = self.dims(x);
        let pad = k / 2;
        let kk = xd.c * k * k;
        assert_eq!(self.value(w).len(), cout * kk, "conv weight size");
        if let Some(b) = b {
            assert_eq!(self.value(b).len(), cout, "conv bias size");
        }
        let ho = (xd.h + 2 * pad - k) / stride + 1;
        let wo = (xd.w + 2 * pad - k) / stride + 1;
        let n = ho * wo;
        let mut out = vec![T::zero(); cout * n];
        {
            let xv = self.value(x);
            let cols_owned;
            let cols: &[T] = if k == 1 && stride == 1 {
                xv
            } else {
                cols_owned = im2col(xv, xd, k, stride, pad, ho, wo);
                &cols_owned
            };
            matmul(cout, kk, n, self.value(w), cols, T::zero(), &mut out);
            if let Some(b) = b {
                let bv = self.value(b);
                for (co, row) in out.chunks_exact_mut(n).enumerate() {
                    let bias = bv[co];
                    row.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(
            Dims::new(cout, ho, wo),
            out,
            Op::Conv {
                x,
                w,
                b,
                k,
                stride,
                pad,
            },
            ng,
        )
    }

    /// `y = W x + b` on a flattened input.
    pub fn dense(&mut self, x: Var, w: Var, b: Var, cout: usize) -> Var {
        let cin = self.dims(x).len();
        assert_eq!(self.value(w).len(), cout * cin, "dense weight size");
        let mut out = self.value(b).to_vec();
        assert_eq!(out.len(), cout, "dense bias size");
        matmul(cout, cin, 1, self.value(w), self.value(x), T::one(), &mut out);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Dims::new(cout, 1, 1), out, Op::Dense { x, w, b }, ng)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let d = self.dims(x);
        assert!(groups > 0 && d.c % groups == 0, "groups must divide channels");
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let per = d.c / groups * d.plane();
        let plane = d.plane();
        let nf = T::of(per as f64);
        let mut out = vec![T::zero(); d.len()];
        let mut stats = Vec::with_capacity(groups);
        for g in 0..groups {
            let seg = &xv[g * per..(g + 1) * per];
            let mean = seg.iter().copied().sum::<T>() / nf;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rstd = T::one() / (var + T::of(GROUP_NORM_EPS)).sqrt();
            stats.push((mean, rstd));
            for (j, (&xi, o)) in seg
                .iter()
                .zip(out[g * per..(g + 1) * per].iter_mut())
                .enumerate()
            {
                let c = g * (d.c / groups) + j / plane;
                *o = (xi - mean) * rstd * gv[c] + bv[c];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            d,
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            ng,
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| v * sigmoid(v))
            .collect::<Vec<_>>();
        let ng = self.ng(x);
        self.push(self.dims(x), out, Op::Silu { x }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "add shape");
        let out = zip_map(self.value(a), self.value(b), |p, q| p + q);
        let ng = self.ng(a) || self.ng(b);
        self.push(self.dims(a), out, Op::Add { a, b }, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "sub shape");
        let out = zip_map(self.value(a), self.value(b), |p, q| p - q);
        let ng = self.ng(a) || self.ng(b);
        self.push(self.dims(a), out, Op::Sub { a, b }, ng)
    }

    /// Adds `v[c]` to every pixel of channel `c`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let d = self.dims(x);
        let vv = self.value(v);
        assert_eq!(vv.len(), d.c, "channel vector size");
        let mut out = self.value(x).to_vec();
        for (c, row) in out.chunks_exact_mut(d.plane()).enumerate() {
            let add = vv[c];
            row.iter_mut().for_each(|o| *o += add);
        }
        let ng = self.ng(x) || self.ng(v);
        self.push(d, out, Op::AddChannel { x, v }, ng)
    }

    /// `scale · x + offset` with a constant offset.
    pub fn affine(&mut self, x: Var, scale: T, offset: &[T]) -> Var {
        assert_eq!(self.value(x).len(), offset.len(), "affine offset size");
        let out = zip_map(self.value(x), offset, |p, o| scale * p + o);
        let ng = self.ng(x);
        self.push(self.dims(x), out, Op::Affine { x, scale }, ng)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (da, db) = (self.dims(a), self.dims(b));
        assert_eq!((da.h, da.w), (db.h, db.w), "concat spatial size");
        let mut out = Vec::with_capacity(da.len() + db.len());
        out.extend_from_slice(self.value(a));
        out.extend_from_slice(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Dims::new(da.c + db.c, da.h, da.w), out, Op::Concat { a, b }, ng)
    }

    /// (C·r², H, W) → (C, H·r, W·r).
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Var {
        let d = self.dims(x);
        assert!(d.c % (r * r) == 0, "pixel shuffle channels");
        let od = Dims::new(d.c / (r * r), d.h * r, d.w * r);
        let xv = self.value(x);
        let mut out = vec![T::zero(); d.len()];
        for (src, dst) in shuffle_map(d, r) {
            out[dst] = xv[src];
        }
        let ng = self.ng(x);
        self.push(od, out, Op::PixelShuffle { x, r }, ng)
    }

    /// Nearest-neighbour upsampling by `r`.
    pub fn upsample(&mut self, x: Var, r: usize) -> Var {
        let d = self.dims(x);
        let od = Dims::new(d.c, d.h * r, d.w * r);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(od.len());
        for c in 0..d.c {
            for y in 0..od.h {
                let row = &xv[(c * d.h + y / r) * d.w..][..d.w];
                for &v in row {
                    out.extend(std::iter::repeat_n(v, r));
                }
            }
        }
        let ng = self.ng(x);
        self.push(od, out, Op::Upsample { x, r }, ng)
    }

    /// Non-overlapping `r×r` mean pooling.
    pub fn avg_pool(&mut self, x: Var, r: usize) -> Var {
        let d = self.dims(x);
        assert!(d.h % r == 0 && d.w % r == 0, "avg_pool needs divisible size");
        let od = Dims::new(d.c, d.h / r, d.w / r);
        let xv = self.value(x);
        let mut out = vec![T::zero(); od.len()];
        let inv = T::of(1.0 / (r * r) as f64);
        for c in 0..d.c {
            for y in 0..d.h {
                for xx in 0..d.w {
                    out[(c * od.h + y / r) * od.w + xx / r] += xv[(c * d.h + y) * d.w + xx];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let ng = self.ng(x);
        self.push(od, out, Op::AvgPool { x, r }, ng)
    }

    /// Single-head dot-product attention over the H·W positions; `q`, `k`
    /// and `v` carry the feature dimension in their channels.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Var {
        let d = self.dims(q);
        assert_eq!(d, self.dims(k), "attention key shape");
        assert_eq!(d, self.dims(v), "attention value shape");
        let n = d.plane();
        let scale = T::of(1.0 / (d.c as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        // scores[i][j] = sum_c q[c,i] k[c,j]
        let mut probs = vec![T::zero(); n * n];
        T::gemm(
            n, d.c, n, scale, qv, 1, n as isize, kv, n as isize, 1, T::zero(), &mut probs,
            n as isize, 1,
        );
        for row in probs.chunks_exact_mut(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for p in row.iter_mut() {
                *p = (*p - mx).exp();
                s += *p;
            }
            row.iter_mut().for_each(|p| *p = *p / s);
        }
        // out[c,i] = sum_j v[c,j] probs[i][j]
        let mut out = vec![T::zero(); d.len()];
        T::gemm(
            d.c, n, n, T::one(), vv, n as isize, 1, &probs, 1, n as isize, T::zero(), &mut out,
            n as isize, 1,
        );
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(d, out, Op::Attention { q, k, v, probs }, ng)
    }

    /// Mean squared difference, as a 1×1×1 value.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "mse shape");
        let (av, bv) = (self.value(a), self.value(b));
        let s: T = av.iter().zip(bv).map(|(&p, &q)| (p - q) * (p - q)).sum();
        let out = vec![s / T::of(av.len() as f64)];
        let ng = self.ng(a) || self.ng(b);
        self.push(Dims::new(1, 1, 1), out, Op::Mse { a, b }, ng)
    }

    /// Back-propagates `grad_out` from `out` to every parameter slot.
    pub fn backward(&self, out: Var, grad_out: &[T], n_slots: usize) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidState("backward called without a recorded forward pass".into()));
        }
        if out.0 >= self.nodes.len() {
            return Err(Error::InvalidState("output handle not on this tape".into()));
        }
        if grad_out.len() != self.nodes[out.0].value.len() {
            return Err(Error::invalid(format!(
                "output gradient has {} elements, output has {}",
                grad_out.len(),
                self.nodes[out.0].value.len()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(grad_out.to_vec());
        let mut slots: Vec<Option<Vec<T>>> = vec![None; n_slots];
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, g, &mut grads, &mut slots)?;
        }
        Ok(Gradients { slots })
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        slots: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.ng(v) {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param { slot } => {
                let s = slots
                    .get_mut(*slot)
                    .ok_or_else(|| Error::invalid(format!("parameter slot {slot} out of range")))?;
                match s {
                    Some(buf) => add_into(buf, &g),
                    None => *s = Some(g),
                }
            }
            Op::Conv {
                x,
                w,
                b,
                k,
                stride,
                pad,
            } => {
                let xd = self.dims(*x);
                let od = node.dims;
                let (cout, n) = (od.c, od.plane());
                let kk = xd.c * k * k;
                if let Some(b) = b {
                    acc(*b, &mut |db| {
                        for (co, row) in g.chunks_exact(n).enumerate() {
                            db[co] += row.iter().copied().sum::<T>();
                        }
                    });
                }
                let xv = self.value(*x);
                let cols_owned;
                let cols: &[T] = if *k == 1 && *stride == 1 {
                    xv
                } else if self.ng(*w) {
                    cols_owned = im2col(xv, xd, *k, *stride, *pad, od.h, od.w);
                    &cols_owned
                } else {
                    &[]
                };
                acc(*w, &mut |dw| {
                    // dW (cout×kk) += g (cout×n) · colsᵀ (n×kk)
                    T::gemm(
                        cout, n, kk, T::one(), &g, n as isize, 1, cols, 1, n as isize, T::one(),
                        dw, kk as isize, 1,
                    );
                });
                if self.ng(*x) {
                    let wv = self.value(*w);
                    let mut dcols = vec![T::zero(); kk * n];
                    // dcols (kk×n) = Wᵀ (kk×cout) · g (cout×n)
                    T::gemm(
                        kk, cout, n, T::one(), wv, 1, kk as isize, &g, n as isize, 1, T::zero(),
                        &mut dcols, n as isize, 1,
                    );
                    acc(*x, &mut |dx| {
                        if *k == 1 && *stride == 1 {
                            add_into(dx, &dcols);
                        } else {
                            col2im(&dcols, dx, xd, *k, *stride, *pad, od.h, od.w);
                        }
                    });
                }
            }
            Op::Dense { x, w, b } => {
                let cout = node.dims.len();
                let xv = self.value(*x);
                let cin = xv.len();
                acc(*b, &mut |db| add_into(db, &g));
                acc(*w, &mut |dw| {
                    for (co, row) in dw.chunks_exact_mut(cin).enumerate() {
                        for (d, &xi) in row.iter_mut().zip(xv) {
                            *d += g[co] * xi;
                        }
                    }
                });
                let wv = self.value(*w);
                acc(*x, &mut |dx| {
                    T::gemm(
                        cin, cout, 1, T::one(), wv, 1, cin as isize, &g, 1, 1, T::one(), dx, 1, 1,
                    );
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let d = node.dims;
                let plane = d.plane();
                let cg = d.c / groups;
                let per = cg * plane;
                let nf = T::of(per as f64);
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let mut dgamma = vec![T::zero(); d.c];
                let mut dbeta = vec![T::zero(); d.c];
                let mut dx = vec![T::zero(); d.len()];
                for (gi, &(mean, rstd)) in stats.iter().enumerate() {
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for ci in 0..cg {
                        let c = gi * cg + ci;
                        let base = c * plane;
                        let (mut dgc, mut dbc) = (T::zero(), T::zero());
                        for p in base..base + plane {
                            let xh = (xv[p] - mean) * rstd;
                            dgc += g[p] * xh;
                            dbc += g[p];
                            let gg = g[p] * gv[c];
                            sum_g += gg;
                            sum_gx += gg * xh;
                        }
                        dgamma[c] += dgc;
                        dbeta[c] += dbc;
                    }
                    let (mg, mgx) = (sum_g / nf, sum_gx / nf);
                    for p in gi * per..(gi + 1) * per {
                        let c = p / plane;
                        let xh = (xv[p] - mean) * rstd;
                        dx[p] = rstd * (g[p] * gv[c] - mg - xh * mgx);
                    }
                }
                acc(*gamma, &mut |d| add_into(d, &dgamma));
                acc(*beta, &mut |d| add_into(d, &dbeta));
                acc(*x, &mut |d| add_into(d, &dx));
            }
            Op::Silu { x } => {
                let xv = self.value(*x);
                acc(*x, &mut |dx| {
                    for ((d, &xi), &gi) in dx.iter_mut().zip(xv).zip(&g) {
                        let s = sigmoid(xi);
                        *d += gi * s * (T::one() + xi * (T::one() - s));
                    }
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |d| add_into(d, &g));
                acc(*b, &mut |d| add_into(d, &g));
            }
            Op::Sub { a, b } => {
                acc(*a, &mut |d| add_into(d, &g));
                acc(*b, &mut |d| d.iter_mut().zip(&g).for_each(|(d, &gi)| *d -= gi));
            }
            Op::AddChannel { x, v } => {
                let plane = node.dims.plane();
                acc(*x, &mut |d| add_into(d, &g));
                acc(*v, &mut |dv| {
                    for (c, row) in g.chunks_exact(plane).enumerate() {
                        dv[c] += row.iter().copied().sum::<T>();
                    }
                });
            }
            Op::Affine { x, scale } => {
                acc(*x, &mut |d| d.iter_mut().zip(&g).for_each(|(d, &gi)| *d += *scale * gi));
            }
            Op::Concat { a, b } => {
                let la = self.value(*a).len();
                acc(*a, &mut |d| add_into(d, &g[..la]));
                acc(*b, &mut |d| add_into(d, &g[la..]));
            }
            Op::PixelShuffle { x, r } => {
                let xd = self.dims(*x);
                acc(*x, &mut |dx| {
                    for (src, dst) in shuffle_map(xd, *r) {
                        dx[src] += g[dst];
                    }
                });
            }
            Op::Upsample { x, r } => {
                let xd = self.dims(*x);
                let od = node.dims;
                acc(*x, &mut |dx| {
                    for c in 0..od.c {
                        for y in 0..od.h {
                            for xx in 0..od.w {
                                dx[(c * xd.h + y / r) * xd.w + xx / r] +=
                                    g[(c * od.h + y) * od.w + xx];
                            }
                        }
                    }
                });
            }
            Op::AvgPool { x, r } => {
                let xd = self.dims(*x);
                let od = node.dims;
                let inv = T::of(1.0 / (r * r) as f64);
                acc(*x, &mut |dx| {
                    for c in 0..xd.c {
                        for y in 0..xd.h {
                            for xx in 0..xd.w {
                                dx[(c * xd.h + y) * xd.w + xx] +=
                                    inv * g[(c * od.h + y / r) * od.w + xx / r];
                            }
                        }
                    }
                });
            }
            Op::Attention { q, k, v, probs } => {
                let d = node.dims;
                let n = d.plane();
                let dc = d.c;
                let scale = T::of(1.0 / (dc as f64).sqrt());
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                // dV[c,j] = sum_i g[c,i] P[i][j]
                acc(*v, &mut |dv| {
                    T::gemm(
                        dc, n, n, T::one(), &g, n as isize, 1, probs, n as isize, 1, T::one(), dv,
                        n as isize, 1,
                    );
                });
                if self.ng(*q) || self.ng(*k) {
                    // dP[i][j] = sum_c g[c,i] v[c,j]
                    let mut ds = vec![T::zero(); n * n];
                    T::gemm(
                        n, dc, n, T::one(), &g, 1, n as isize, vv, n as isize, 1, T::zero(),
                        &mut ds, n as isize, 1,
                    );
                    for (drow, prow) in ds.chunks_exact_mut(n).zip(probs.chunks_exact(n)) {
                        let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                        for (dv, &p) in drow.iter_mut().zip(prow) {
                            *dv = p * (*dv - dot);
                        }
                    }
                    // dQ[c,i] = scale sum_j dS[i][j] k[c,j]
                    acc(*q, &mut |dq| {
                        T::gemm(
                            dc, n, n, scale, kv, n as isize, 1, &ds, 1, n as isize, T::one(), dq,
                            n as isize, 1,
                        );
                    });
                    // dK[c,j] = scale sum_i dS[i][j] q[c,i]
                    acc(*k, &mut |dk| {
                        T::gemm(
                            dc, n, n, scale, qv, n as isize, 1, &ds, n as isize, 1, T::one(), dk,
                            n as isize, 1,
                        );
                    });
                }
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let f = g[0] * T::of(2.0 / av.len() as f64);
                acc(*a, &mut |d| {
                    for ((d, &p), &q) in d.iter_mut().zip(av).zip(bv) {
                        *d += f * (p - q);
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, &p), &q) in d.iter_mut().zip(av).zip(bv) {
                        *d -= f * (p - q);
                    }
                });
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&p, &q)| f(p, q)).collect()
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// (source index, destination index) pairs of a pixel shuffle on `d`.
fn shuffle_map(d: Dims, r: usize) -> impl Iterator<Item = (usize, usize)> {
    let oc = d.c / (r * r);
    let (oh, ow) = (d.h * r, d.w * r);
    (0..d.c).flat_map(move |ci| {
        let c = ci / (r * r);
        let (i, j) = ((ci % (r * r)) / r, ci % r);
        (0..d.h).flat_map(move |y| {
            (0..d.w).map(move |x| {
                let src = (ci * d.h + y) * d.w + x;
                let dst = (c * oh + y * r + i) * ow + x * r + j;
                debug_assert!(c < oc);
                (src, dst)
            })
        })
    })
}

/// Valid output-coordinate range `[lo, hi)` for kernel offset `kd`.
#[inline]
fn valid_range(kd: usize, pad: usize, stride: usize, len_in: usize, len_out: usize) -> (usize, usize) {
    // need 0 <= o*stride + kd - pad < len_in
    let lo = if kd >= pad { 0 } else { (pad - kd).div_ceil(stride) };
    let hi = if len_in + pad > kd {
        ((len_in + pad - kd - 1) / stride + 1).min(len_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Real>(
    x: &[T],
    d: Dims,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let n = ho * wo;
    let mut cols = vec![T::zero(); d.c * k * k * n];
    for c in 0..d.c {
        let xc = &x[c * d.plane()..(c + 1) * d.plane()];
        for ky in 0..k {
            let (oy0, oy1) = valid_range(ky, pad, stride, d.h, ho);
            for kx in 0..k {
                let (ox0, ox1) = valid_range(kx, pad, stride, d.w, wo);
                let row = &mut cols[((c * k + ky) * k + kx) * n..][..n];
                for oy in oy0..oy1 {
                    let iy = oy * stride + ky - pad;
                    let src = &xc[iy * d.w..(iy + 1) * d.w];
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        let ix0 = ox0 + kx - pad;
                        dst[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            dst[ox] = src[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    dx: &mut [T],
    d: Dims,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let n = ho * wo;
    for c in 0..d.c {
        let xc = &mut dx[c * d.plane()..(c + 1) * d.plane()];
        for ky in 0..k {
            let (oy0, oy1) = valid_range(ky, pad, stride, d.h, ho);
            for kx in 0..k {
                let (ox0, ox1) = valid_range(kx, pad, stride, d.w, wo);
                let row = &cols[((c * k + ky) * k + kx) * n..][..n];
                for oy in oy0..oy1 {
                    let iy = oy * stride + ky - pad;
                    let dst = &mut xc[iy * d.w..(iy + 1) * d.w];
                    let src = &row[oy * wo..(oy + 1) * wo];
                    for ox in ox0..ox1 {
                        dst[ox * stride + kx - pad] += src[ox];
                    }
                }
            }
        }
    }
}
