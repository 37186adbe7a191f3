//! Reverse-mode differentiation over a linear tape of NCHW operations.
//!
//! Batch items are processed independently inside every kernel; per-item
//! parameter gradients are reduced in item order, so results do not depend
//! on [`ExecMode`].

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::tensor::{Real, Tensor4};

use super::params::{Grads, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: ParamId,
        b: Option<ParamId>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2x2 {
        x: Var,
        w: ParamId,
        b: Option<ParamId>,
    },
    Silu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Film {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Concat(Var, Var),
    Upsample2(Var),
    GlobalAvgPool(Var),
    Embed {
        table: ParamId,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<Vec<T>>,
    },
}

struct Node<T: Real> {
    value: Tensor4<T>,
    op: Op<T>,
}

pub struct Tape<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    exec: ExecMode,
}

/// Gradients produced by [`Tape::backward`].
pub struct Backward<T: Real> {
    pub params: Grads<T>,
    nodes: Vec<Option<Tensor4<T>>>,
}

impl<T: Real> Backward<T> {
    /// Gradient reaching `v`, if any flowed there.
    pub fn of(&self, v: Var) -> Option<&Tensor4<T>> {
        self.nodes[v.0].as_ref()
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: [usize; 4], w: [usize; 4], stride: usize, pad: usize) -> Result<Self> {
        let [_, cin, h, wd] = x;
        let [_, wcin, k, k2] = w;
        if wcin != cin || k != k2 {
            return Err(Error::shape(&[w[0], cin, k, k], &w));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(&[x[0], cin, k, k], &x));
        }
        Ok(Self {
            cin,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.ho * self.wo
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let (k, cols) = (self.k, self.cols());
        let mut col = vec![T::zero(); self.rows() * cols];
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let d = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        for (ox, dv) in d.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                *dv = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<T: Real>(&self, col: &[T]) -> Vec<T> {
        let (k, cols) = (self.k, self.cols());
        let mut x = vec![T::zero(); self.cin * self.h * self.w];
        for c in 0..self.cin {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn add_into<T: Real>(acc: &mut [T], v: &[T]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += *b;
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>, exec: ExecMode) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        self.params
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor4<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, w: ParamId, b: Option<ParamId>, stride: usize, pad: usize) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.params.get(w);
        let g = ConvGeom::new(xv.shape(), wv.shape(), stride, pad)?;
        let cout = wv.shape()[0];
        let bias = b.map(|b| self.params.get(b).data());
        let (rows, cols) = (g.rows(), g.cols());
        let items = self.exec.map_range(xv.batch(), |i| {
            let xi = xv.item(i);
            let owned;
            let col: &[T] = if g.is_pointwise() {
                xi
            } else {
                owned = g.im2col(xi);
                &owned
            };
            let mut out = vec![T::zero(); cout * cols];
            T::gemm(cout, rows, cols, T::one(), wv.data(), (rows as isize, 1), col, (cols as isize, 1), T::zero(), &mut out, (cols as isize, 1));
            if let Some(bias) = bias {
                for (o, bv) in out.chunks_mut(cols).zip(bias) {
                    o.iter_mut().for_each(|v| *v += *bv);
                }
            }
            out
        });
        let value = Tensor4::from_vec([xv.batch(), cout, g.ho, g.wo], items.concat())?;
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// Transposed convolution with a 2×2 kernel and stride 2; `w` is (cin, cout, 2, 2).
    pub fn conv_transpose2x2(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.params.get(w);
        let [batch, cin, h, wd] = xv.shape();
        let [wcin, cout, kh, kw] = wv.shape();
        if wcin != cin || kh != 2 || kw != 2 {
            return Err(Error::shape(&[cin, cout, 2, 2], &wv.shape()));
        }
        let hw = h * wd;
        let bias = b.map(|b| self.params.get(b).data());
        let items = self.exec.map_range(batch, |i| {
            // (cout*4 × hw) = Wᵀ (cout*4 × cin) · X (cin × hw)
            let mut tmp = vec![T::zero(); cout * 4 * hw];
            T::gemm(cout * 4, cin, hw, T::one(), wv.data(), (1, (cout * 4) as isize), xv.item(i), (hw as isize, 1), T::zero(), &mut tmp, (hw as isize, 1));
            let (ho, wo) = (2 * h, 2 * wd);
            let mut out = vec![T::zero(); cout * ho * wo];
            for co in 0..cout {
                let bv = bias.map_or(T::zero(), |b| b[co]);
                for d in 0..4 {
                    let (dy, dx) = (d / 2, d % 2);
                    let src = &tmp[(co * 4 + d) * hw..(co * 4 + d + 1) * hw];
                    for y in 0..h {
                        for x in 0..wd {
                            out[(co * ho + 2 * y + dy) * wo + 2 * x + dx] = src[y * wd + x] + bv;
                        }
                    }
                }
            }
            out
        });
        let value = Tensor4::from_vec([batch, cout, 2 * h, 2 * wd], items.concat())?;
        Ok(self.push(value, Op::ConvTranspose2x2 { x, w, b }))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(value, Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// `x·(1 + scale) + shift` with per-item, per-channel `scale` and `shift`
    /// of shape (B, C, 1, 1).
    pub fn film(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xv = self.value(x);
        let [b, c, _, _] = xv.shape();
        self.value(scale).ensure_shape([b, c, 1, 1])?;
        self.value(shift).ensure_shape([b, c, 1, 1])?;
        let (sv, tv) = (self.value(scale).data(), self.value(shift).data());
        let plane = xv.plane_len();
        let mut value = xv.clone();
        for (i, chunk) in value.data_mut().chunks_mut(plane).enumerate() {
            let (s, t) = (T::one() + sv[i], tv[i]);
            chunk.iter_mut().for_each(|v| *v = *v * s + t);
        }
        Ok(self.push(value, Op::Film { x, scale, shift }))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_channels(self.value(b))?;
        Ok(self.push(value, Op::Concat(a, b)))
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [b, c, h, w] = xv.shape();
        let value = Tensor4::from_fn([b, c, 2 * h, 2 * w], |[i, ch, y, x]| xv.at(i, ch, y / 2, x / 2));
        self.push(value, Op::Upsample2(x))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [b, c, _, _] = xv.shape();
        let n = T::from_usize(xv.plane_len()).unwrap();
        let data = xv
            .data()
            .chunks(xv.plane_len())
            .map(|p| p.iter().copied().sum::<T>() / n)
            .collect();
        let value = Tensor4::from_vec([b, c, 1, 1], data).expect("pool shape");
        self.push(value, Op::GlobalAvgPool(x))
    }

    /// Rows of a (n, E, 1, 1) table, one per id.
    pub fn embed(&mut self, table: ParamId, ids: &[usize]) -> Result<Var> {
        let tv = self.params.get(table);
        let [n, e, _, _] = tv.shape();
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Data(format!("embedding id {bad} out of range 0..{n}")));
        }
        let data = ids.iter().flat_map(|&i| tv.item(i).iter().copied()).collect();
        let value = Tensor4::from_vec([ids.len(), e, 1, 1], data)?;
        Ok(self.push(value, Op::Embed { table, ids: ids.to_vec() }))
    }

    /// Single-head softmax attention over spatial positions:
    /// `out[:, i] = Σ_j softmax_j(q_i·k_j/√C) v[:, j]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        qv.same_shape(kv)?;
        qv.same_shape(vv)?;
        let [b, c, h, w] = qv.shape();
        let n = h * w;
        let scale = T::one() / T::from_usize(c).unwrap().sqrt();
        let items = self.exec.map_range(b, |i| {
            let mut p = vec![T::zero(); n * n];
            // S = Qᵀ K
            T::gemm(n, c, n, scale, qv.item(i), (1, n as isize), kv.item(i), (n as isize, 1), T::zero(), &mut p, (n as isize, 1));
            for row in p.chunks_mut(n) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for s in row.iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                row.iter_mut().for_each(|s| *s = *s / z);
            }
            // O = V Pᵀ
            let mut out = vec![T::zero(); c * n];
            T::gemm(c, n, n, T::one(), vv.item(i), (n as isize, 1), &p, (1, n as isize), T::zero(), &mut out, (n as isize, 1));
            (out, p)
        });
        let mut data = Vec::with_capacity(b * c * n);
        let mut probs = Vec::with_capacity(b);
        for (out, p) in items {
            data.extend(out);
            probs.push(p);
        }
        let value = Tensor4::from_vec([b, c, h, w], data)?;
        Ok(self.push(value, Op::Attention { q, k, v, probs }))
    }

    /// Back-propagate the seeded output gradients through the whole tape.
    pub fn backward(&self, seeds: &[(Var, &Tensor4<T>)]) -> Result<Backward<T>> {
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads = self.params.zeros_like();
        for (v, g) in seeds {
            self.value(*v).same_shape(g)?;
            accumulate(&mut grads[v.0], (*g).clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let dx = self.conv2d_backward(*x, *w, *b, *stride, *pad, &dy, &mut pgrads)?;
                    accumulate(&mut grads[x.0], dx);
                }
                Op::ConvTranspose2x2 { x, w, b } => {
                    let dx = self.conv_t_backward(*x, *w, *b, &dy, &mut pgrads)?;
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Silu(x) => {
                    let dx = self.value(*x).zip_map(&dy, |v, g| {
                        let s = sigmoid(v);
                        g * (s + v * s * (T::one() - s))
                    })?;
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Sigmoid(x) => {
                    let dx = node.value.zip_map(&dy, |y, g| g * y * (T::one() - y))?;
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], dy.clone());
                    accumulate(&mut grads[b.0], dy);
                }
                Op::Film { x, scale, shift } => {
                    let xv = self.value(*x);
                    let sv = self.value(*scale);
                    let plane = xv.plane_len();
                    let mut dx = dy.clone();
                    let mut ds = Tensor4::zeros(sv.shape());
                    let mut dt = Tensor4::zeros(sv.shape());
                    for (i, (dxc, (xc, gc))) in dx
                        .data_mut()
                        .chunks_mut(plane)
                        .zip(xv.data().chunks(plane).zip(dy.data().chunks(plane)))
                        .enumerate()
                    {
                        let s = T::one() + sv.data()[i];
                        dxc.iter_mut().for_each(|v| *v *= s);
                        ds.data_mut()[i] = xc.iter().zip(gc).map(|(&a, &g)| a * g).sum();
                        dt.data_mut()[i] = gc.iter().copied().sum();
                    }
                    accumulate(&mut grads[x.0], dx);
                    accumulate(&mut grads[scale.0], ds);
                    accumulate(&mut grads[shift.0], dt);
                }
                Op::Concat(a, b) => {
                    let ca = self.value(*a).channels();
                    let cb = self.value(*b).channels();
                    accumulate(&mut grads[a.0], dy.channel_range(0, ca)?);
                    accumulate(&mut grads[b.0], dy.channel_range(ca, cb)?);
                }
                Op::Upsample2(x) => {
                    let [b, c, h, w] = self.value(*x).shape();
                    let dx = Tensor4::from_fn([b, c, h, w], |[i, ch, y, xx]| {
                        dy.at(i, ch, 2 * y, 2 * xx)
                            + dy.at(i, ch, 2 * y, 2 * xx + 1)
                            + dy.at(i, ch, 2 * y + 1, 2 * xx)
                            + dy.at(i, ch, 2 * y + 1, 2 * xx + 1)
                    });
                    accumulate(&mut grads[x.0], dx);
                }
                Op::GlobalAvgPool(x) => {
                    let xv = self.value(*x);
                    let n = T::from_usize(xv.plane_len()).unwrap();
                    let dx = Tensor4::from_fn(xv.shape(), |[i, c, _, _]| dy.at(i, c, 0, 0) / n);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Embed { table, ids } => {
                    let g = pgrads.get_mut(*table);
                    for (row, &id) in ids.iter().enumerate() {
                        add_into(g.item_mut(id), dy.item(row));
                    }
                }
                Op::Attention { q, k, v, probs } => {
                    let (dq, dk, dv) = self.attention_backward(*q, *k, *v, probs, &dy)?;
                    accumulate(&mut grads[q.0], dq);
                    accumulate(&mut grads[k.0], dk);
                    accumulate(&mut grads[v.0], dv);
                }
            }
        }
        Ok(Backward {
            params: pgrads,
            nodes: grads,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: ParamId,
        b: Option<ParamId>,
        stride: usize,
        pad: usize,
        dy: &Tensor4<T>,
        pgrads: &mut Grads<T>,
    ) -> Result<Tensor4<T>> {
        let xv = self.value(x);
        let wv = self.params.get(w);
        let g = ConvGeom::new(xv.shape(), wv.shape(), stride, pad)?;
        let cout = wv.shape()[0];
        let (rows, cols) = (g.rows(), g.cols());
        let items = self.exec.map_range(xv.batch(), |i| {
            let xi = xv.item(i);
            let dyi = dy.item(i);
            let owned;
            let col: &[T] = if g.is_pointwise() {
                xi
            } else {
                owned = g.im2col(xi);
                &owned
            };
            let mut dw = vec![T::zero(); cout * rows];
            T::gemm(cout, cols, rows, T::one(), dyi, (cols as isize, 1), col, (1, cols as isize), T::zero(), &mut dw, (rows as isize, 1));
            let mut dcol = vec![T::zero(); rows * cols];
            T::gemm(rows, cout, cols, T::one(), wv.data(), (1, rows as isize), dyi, (cols as isize, 1), T::zero(), &mut dcol, (cols as isize, 1));
            let dx = if g.is_pointwise() { dcol } else { g.col2im(&dcol) };
            let db: Vec<T> = dyi.chunks(cols).map(|r| r.iter().copied().sum()).collect();
            (dx, dw, db)
        });
        let mut dx = Vec::with_capacity(xv.len());
        for (dxi, dwi, dbi) in items {
            dx.extend(dxi);
            add_into(pgrads.get_mut(w).data_mut(), &dwi);
            if let Some(b) = b {
                add_into(pgrads.get_mut(b).data_mut(), &dbi);
            }
        }
        Tensor4::from_vec(xv.shape(), dx)
    }

    fn conv_t_backward(
        &self,
        x: Var,
        w: ParamId,
        b: Option<ParamId>,
        dy: &Tensor4<T>,
        pgrads: &mut Grads<T>,
    ) -> Result<Tensor4<T>> {
        let xv = self.value(x);
        let wv = self.params.get(w);
        let [batch, cin, h, wd] = xv.shape();
        let cout = wv.shape()[1];
        let hw = h * wd;
        let (ho, wo) = (2 * h, 2 * wd);
        let items = self.exec.map_range(batch, |i| {
            let dyi = dy.item(i);
            let mut gathered = vec![T::zero(); cout * 4 * hw];
            let mut db = vec![T::zero(); cout];
            for co in 0..cout {
                for d in 0..4 {
                    let (ddy, ddx) = (d / 2, d % 2);
                    let dst = &mut gathered[(co * 4 + d) * hw..(co * 4 + d + 1) * hw];
                    for y in 0..h {
                        for xx in 0..wd {
                            dst[y * wd + xx] = dyi[(co * ho + 2 * y + ddy) * wo + 2 * xx + ddx];
                        }
                    }
                }
                db[co] = dyi[co * ho * wo..(co + 1) * ho * wo].iter().copied().sum();
            }
            let mut dx = vec![T::zero(); cin * hw];
            T::gemm(cin, cout * 4, hw, T::one(), wv.data(), ((cout * 4) as isize, 1), &gathered, (hw as isize, 1), T::zero(), &mut dx, (hw as isize, 1));
            let mut dw = vec![T::zero(); cin * cout * 4];
            T::gemm(cin, hw, cout * 4, T::one(), xv.item(i), (hw as isize, 1), &gathered, (1, hw as isize), T::zero(), &mut dw, ((cout * 4) as isize, 1));
            (dx, dw, db)
        });
        let mut dx = Vec::with_capacity(xv.len());
        for (dxi, dwi, dbi) in items {
            dx.extend(dxi);
            add_into(pgrads.get_mut(w).data_mut(), &dwi);
            if let Some(b) = b {
                add_into(pgrads.get_mut(b).data_mut(), &dbi);
            }
        }
        Tensor4::from_vec(xv.shape(), dx)
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        probs: &[Vec<T>],
        dy: &Tensor4<T>,
    ) -> Result<(Tensor4<T>, Tensor4<T>, Tensor4<T>)> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let [b, c, h, w] = qv.shape();
        let n = h * w;
        let scale = T::one() / T::from_usize(c).unwrap().sqrt();
        let items = self.exec.map_range(b, |i| {
            let p = &probs[i];
            let dyi = dy.item(i);
            // dV = dO · P
            let mut dv = vec![T::zero(); c * n];
            T::gemm(c, n, n, T::one(), dyi, (n as isize, 1), p, (n as isize, 1), T::zero(), &mut dv, (n as isize, 1));
            // dP = dOᵀ V
            let mut dp = vec![T::zero(); n * n];
            T::gemm(n, c, n, T::one(), dyi, (1, n as isize), vv.item(i), (n as isize, 1), T::zero(), &mut dp, (n as isize, 1));
            for (drow, prow) in dp.chunks_mut(n).zip(p.chunks(n)) {
                let dot: T = drow.iter().zip(prow).map(|(&d, &pp)| d * pp).sum();
                for (d, &pp) in drow.iter_mut().zip(prow) {
                    *d = pp * (*d - dot);
                }
            }
            // dQ = K dSᵀ·scale, dK = Q dS·scale
            let mut dq = vec![T::zero(); c * n];
            T::gemm(c, n, n, scale, kv.item(i), (n as isize, 1), &dp, (1, n as isize), T::zero(), &mut dq, (n as isize, 1));
            let mut dk = vec![T::zero(); c * n];
            T::gemm(c, n, n, scale, qv.item(i), (n as isize, 1), &dp, (n as isize, 1), T::zero(), &mut dk, (n as isize, 1));
            (dq, dk, dv)
        });
        let (mut dq, mut dk, mut dv) = (Vec::new(), Vec::new(), Vec::new());
        for (a, bb, cc) in items {
            dq.extend(a);
            dk.extend(bb);
            dv.extend(cc);
        }
        let shape = [b, c, h, w];
        Ok((
            Tensor4::from_vec(shape, dq)?,
            Tensor4::from_vec(shape, dk)?,
            Tensor4::from_vec(shape, dv)?,
        ))
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor4<T>>, g: Tensor4<T>) {
    match slot {
        Some(acc) => add_into(acc.data_mut(), g.data()),
        None => *slot = Some(g),
    }
}
