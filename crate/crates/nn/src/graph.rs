//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Calling
//! [`Graph::backward`] walks the tape in reverse and returns gradients for the
//! parameter leaves. Graphs are built per step and dropped afterwards.

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;

use crate::real::{matmul, Mat, Real};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(usize),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, cols: Vec<T> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    Film { x: Var, scale: Var, shift: Var },
    Silu(Var),
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Vec<Var>),
    Attention { q: Var, k: Var, v: Var, probs: Vec<T> },
    L1Loss { pred: Var, target: Tensor<T> },
    MseLoss { pred: Var, target: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    record: bool,
}

/// Parameter gradients keyed by parameter id.
#[derive(Debug, Default)]
pub struct Grads<T> {
    pub by_param: BTreeMap<usize, Tensor<T>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, id: usize) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A graph that keeps what backward needs.
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), record: true }
    }

    /// Inference-only graph; intermediate buffers are dropped and
    /// [`Graph::backward`] panics.
    pub fn inference() -> Self {
        Self { nodes: RefCell::new(Vec::new()), record: false }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn input(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&self, id: usize, t: Tensor<T>) -> Var {
        self.push(t, Op::Param(id))
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (out, cols) = {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = b.map(|b| self.value(b));
            conv2d_forward(&xv, &wv, bv.as_deref(), stride, pad, self.record)
        };
        self.push(out, Op::Conv2d { x, w, b, stride, pad, cols })
    }

    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let out = {
            let xv = self.value(x);
            let wv = self.value(w);
            let (n, din) = xv.dims2();
            let (dout, win) = wv.dims2();
            assert_eq!(din, win, "linear input width mismatch");
            let mut out = vec![T::zero(); n * dout];
            if let Some(b) = b {
                let bv = self.value(b);
                for row in out.chunks_mut(dout) {
                    row.copy_from_slice(bv.data());
                }
            }
            matmul(Mat::new(xv.data(), n, din), false, Mat::new(wv.data(), dout, din), true, &mut out, T::one());
            Tensor::from_vec(&[n, dout], out)
        };
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = {
            let mut av = self.value(a).clone();
            av.add_assign(&self.value(b));
            av
        };
        self.push(out, Op::Add(a, b))
    }

    pub fn scale(&self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    /// `x * s` with `s` a single-element node.
    pub fn mul_scalar(&self, x: Var, s: Var) -> Var {
        let out = {
            let sv = self.value(s);
            assert_eq!(sv.len(), 1, "mul_scalar expects a single-element factor");
            let k = sv.data()[0];
            self.value(x).map(|v| v * k)
        };
        self.push(out, Op::MulScalar(x, s))
    }

    /// Feature-wise affine modulation: `x * (1 + scale) + shift`, with
    /// `scale`/`shift` of shape `[n, c]` broadcast over space.
    pub fn film(&self, x: Var, scale: Var, shift: Var) -> Var {
        let out = {
            let xv = self.value(x);
            let sv = self.value(scale);
            let tv = self.value(shift);
            let (n, c, h, w) = xv.dims4();
            assert_eq!(sv.dims2(), (n, c));
            assert_eq!(tv.dims2(), (n, c));
            let hw = h * w;
            let mut out = xv.clone();
            for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
                let g = T::one() + sv.data()[i];
                let b = tv.data()[i];
                for p in plane {
                    *p = *p * g + b;
                }
            }
            out
        };
        self.push(out, Op::Film { x, scale, shift })
    }

    pub fn silu(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x))
    }

    pub fn avg_pool2(&self, x: Var) -> Var {
        let out = {
            let xv = self.value(x);
            let (n, c, h, w) = xv.dims4();
            assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial size");
            let (ho, wo) = (h / 2, w / 2);
            let quarter = T::lit(0.25);
            let mut out = vec![T::zero(); n * c * ho * wo];
            for (plane_out, plane_in) in out.chunks_mut(ho * wo).zip(xv.data().chunks(h * w)) {
                for y in 0..ho {
                    for x in 0..wo {
                        let i = 2 * y * w + 2 * x;
                        plane_out[y * wo + x] = (plane_in[i] + plane_in[i + 1] + plane_in[i + w] + plane_in[i + w + 1]) * quarter;
                    }
                }
            }
            Tensor::from_vec(&[n, c, ho, wo], out)
        };
        self.push(out, Op::AvgPool2(x))
    }

    pub fn upsample2(&self, x: Var) -> Var {
        let out = {
            let xv = self.value(x);
            let (n, c, h, w) = xv.dims4();
            let (ho, wo) = (h * 2, w * 2);
            let mut out = vec![T::zero(); n * c * ho * wo];
            for (plane_out, plane_in) in out.chunks_mut(ho * wo).zip(xv.data().chunks(h * w)) {
                for y in 0..ho {
                    for x in 0..wo {
                        plane_out[y * wo + x] = plane_in[(y / 2) * w + x / 2];
                    }
                }
            }
            Tensor::from_vec(&[n, c, ho, wo], out)
        };
        self.push(out, Op::Upsample2(x))
    }

    /// Channel concatenation of rank-4 tensors.
    pub fn concat(&self, parts: &[Var]) -> Var {
        let out = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let (n, _, h, w) = vals[0].dims4();
            let c_total: usize = vals
                .iter()
                .map(|v| {
                    let (vn, vc, vh, vw) = v.dims4();
                    assert_eq!((vn, vh, vw), (n, h, w), "concat spatial mismatch");
                    vc
                })
                .sum();
            let mut out = Vec::with_capacity(n * c_total * h * w);
            for b in 0..n {
                for v in &vals {
                    let (_, c, _, _) = v.dims4();
                    let block = c * h * w;
                    out.extend_from_slice(&v.data()[b * block..(b + 1) * block]);
                }
            }
            Tensor::from_vec(&[n, c_total, h, w], out)
        };
        self.push(out, Op::Concat(parts.to_vec()))
    }

    /// Single-head spatial self-attention. `q`, `k`, `v` are `[n, c, h, w]`;
    /// every spatial position attends to every other.
    pub fn attention(&self, q: Var, k: Var, v: Var) -> Var {
        let (out, probs) = {
            let qv = self.value(q);
            let kv = self.value(k);
            let vv = self.value(v);
            let (n, c, h, w) = qv.dims4();
            assert_eq!(kv.shape(), qv.shape());
            assert_eq!(vv.shape(), qv.shape());
            let l = h * w;
            let scale = T::one() / T::from_usize(c).unwrap().sqrt();
            let mut out = vec![T::zero(); n * c * l];
            let mut probs = vec![T::zero(); n * l * l];
            for b in 0..n {
                let qs = &qv.data()[b * c * l..(b + 1) * c * l];
                let ks = &kv.data()[b * c * l..(b + 1) * c * l];
                let vs = &vv.data()[b * c * l..(b + 1) * c * l];
                let p = &mut probs[b * l * l..(b + 1) * l * l];
                matmul(Mat::new(qs, c, l), true, Mat::new(ks, c, l), false, p, T::zero());
                for row in p.chunks_mut(l) {
                    let mx = row.iter().fold(T::neg_infinity(), |m, &x| if x * scale > m { x * scale } else { m });
                    let mut sum = T::zero();
                    for x in row.iter_mut() {
                        *x = (*x * scale - mx).exp();
                        sum += *x;
                    }
                    for x in row.iter_mut() {
                        *x = *x / sum;
                    }
                }
                matmul(Mat::new(vs, c, l), false, Mat::new(p, l, l), true, &mut out[b * c * l..(b + 1) * c * l], T::zero());
            }
            (Tensor::from_vec(&[n, c, h, w], out), probs)
        };
        self.push(out, Op::Attention { q, k, v, probs })
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&self, pred: Var, target: Tensor<T>) -> Var {
        let out = {
            let pv = self.value(pred);
            assert_eq!(pv.shape(), target.shape(), "loss shape mismatch");
            let s: T = pv.data().iter().zip(target.data()).map(|(&a, &b)| (a - b).abs()).sum();
            Tensor::scalar(s / T::from_usize(pv.len()).unwrap())
        };
        self.push(out, Op::L1Loss { pred, target })
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&self, pred: Var, target: Tensor<T>) -> Var {
        let out = {
            let pv = self.value(pred);
            assert_eq!(pv.shape(), target.shape(), "loss shape mismatch");
            let s: T = pv.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
            Tensor::scalar(s / T::from_usize(pv.len()).unwrap())
        };
        self.push(out, Op::MseLoss { pred, target })
    }

    /// Reverse sweep from a scalar `root`, returning parameter gradients.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert!(self.record, "backward on an inference graph");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(nodes[root.0].value.shape(), T::one()));
        let mut out = Grads::default();

        fn acc<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Input => {}
                Op::Param(id) => match out.by_param.get_mut(id) {
                    Some(g) => g.add_assign(&gout),
                    None => {
                        out.by_param.insert(*id, gout);
                    }
                },
                Op::Conv2d { x, w, b, stride, pad, cols } => {
                    let (dx, dw, db) = conv2d_backward(val(*x), val(*w), cols, &gout, *stride, *pad, b.is_some());
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    if let (Some(b), Some(db)) = (b, db) {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = val(*x);
                    let wv = val(*w);
                    let (n, din) = xv.dims2();
                    let (dout, _) = wv.dims2();
                    let mut dx = vec![T::zero(); n * din];
                    matmul(Mat::new(gout.data(), n, dout), false, Mat::new(wv.data(), dout, din), false, &mut dx, T::zero());
                    let mut dw = vec![T::zero(); dout * din];
                    matmul(Mat::new(gout.data(), n, dout), true, Mat::new(xv.data(), n, din), false, &mut dw, T::zero());
                    acc(&mut grads, *x, Tensor::from_vec(&[n, din], dx));
                    acc(&mut grads, *w, Tensor::from_vec(&[dout, din], dw));
                    if let Some(b) = b {
                        let mut db = vec![T::zero(); dout];
                        for row in gout.data().chunks(dout) {
                            for (d, &g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        acc(&mut grads, *b, Tensor::from_vec(&[dout], db));
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gout.clone());
                    acc(&mut grads, *b, gout);
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    acc(&mut grads, *x, gout.map(|g| g * s));
                }
                Op::MulScalar(x, s) => {
                    let sv = val(*s);
                    let k = sv.data()[0];
                    let ds = gout.data().iter().zip(val(*x).data()).fold(T::zero(), |a, (&g, &xi)| a + g * xi);
                    acc(&mut grads, *x, gout.map(|g| g * k));
                    acc(&mut grads, *s, Tensor::from_vec(sv.shape(), vec![ds]));
                }
                Op::Film { x, scale, shift } => {
                    let xv = val(*x);
                    let sv = val(*scale);
                    let (n, c, h, w) = xv.dims4();
                    let hw = h * w;
                    let mut dx = gout.clone();
                    let mut dscale = vec![T::zero(); n * c];
                    let mut dshift = vec![T::zero(); n * c];
                    for i in 0..n * c {
                        let g = &gout.data()[i * hw..(i + 1) * hw];
                        let xs = &xv.data()[i * hw..(i + 1) * hw];
                        let gain = T::one() + sv.data()[i];
                        let mut s_acc = T::zero();
                        let mut t_acc = T::zero();
                        for ((d, &gi), &xi) in dx.data_mut()[i * hw..(i + 1) * hw].iter_mut().zip(g).zip(xs) {
                            *d = gi * gain;
                            s_acc += gi * xi;
                            t_acc += gi;
                        }
                        dscale[i] = s_acc;
                        dshift[i] = t_acc;
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *scale, Tensor::from_vec(&[n, c], dscale));
                    acc(&mut grads, *shift, Tensor::from_vec(&[n, c], dshift));
                }
                Op::Silu(x) => {
                    let xv = val(*x);
                    let d: Vec<T> = xv
                        .data()
                        .iter()
                        .zip(gout.data())
                        .map(|(&xi, &g)| {
                            let s = sigmoid(xi);
                            g * s * (T::one() + xi * (T::one() - s))
                        })
                        .collect();
                    acc(&mut grads, *x, Tensor::from_vec(xv.shape(), d));
                }
                Op::AvgPool2(x) => {
                    let xv = val(*x);
                    let (_, _, h, w) = xv.dims4();
                    let (ho, wo) = (h / 2, w / 2);
                    let quarter = T::lit(0.25);
                    let mut dx = vec![T::zero(); xv.len()];
                    for (pin, pout) in dx.chunks_mut(h * w).zip(gout.data().chunks(ho * wo)) {
                        for y in 0..h {
                            for x in 0..w {
                                pin[y * w + x] = pout[(y / 2) * wo + x / 2] * quarter;
                            }
                        }
                    }
                    acc(&mut grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
                Op::Upsample2(x) => {
                    let xv = val(*x);
                    let (_, _, h, w) = xv.dims4();
                    let wo = w * 2;
                    let mut dx = vec![T::zero(); xv.len()];
                    for (pin, pout) in dx.chunks_mut(h * w).zip(gout.data().chunks(4 * h * w)) {
                        for y in 0..2 * h {
                            for x in 0..wo {
                                pin[(y / 2) * w + x / 2] += pout[y * wo + x];
                            }
                        }
                    }
                    acc(&mut grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
                Op::Concat(parts) => {
                    let (n, c_total, h, w) = gout.dims4();
                    let mut offset = 0;
                    for p in parts {
                        let pv = val(*p);
                        let (_, c, _, _) = pv.dims4();
                        let mut d = Vec::with_capacity(pv.len());
                        for b in 0..n {
                            let start = (b * c_total + offset) * h * w;
                            d.extend_from_slice(&gout.data()[start..start + c * h * w]);
                        }
                        acc(&mut grads, *p, Tensor::from_vec(pv.shape(), d));
                        offset += c;
                    }
                }
                Op::Attention { q, k, v, probs } => {
                    let (dq, dk, dv) = attention_backward(val(*q), val(*k), val(*v), probs, &gout);
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
                Op::L1Loss { pred, target } => {
                    let pv = val(*pred);
                    let scale = gout.item() / T::from_usize(pv.len()).unwrap();
                    let d: Vec<T> = pv
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&a, &b)| {
                            let diff = a - b;
                            if diff > T::zero() {
                                scale
                            } else if diff < T::zero() {
                                -scale
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    acc(&mut grads, *pred, Tensor::from_vec(pv.shape(), d));
                }
                Op::MseLoss { pred, target } => {
                    let pv = val(*pred);
                    let scale = T::lit(2.0) * gout.item() / T::from_usize(pv.len()).unwrap();
                    let d: Vec<T> = pv.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * scale).collect();
                    acc(&mut grads, *pred, Tensor::from_vec(pv.shape(), d));
                }
            }
        }
        out
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(size + 2 * pad >= k, "kernel larger than padded input");
    (size + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize, cols: &mut [T]) {
    let l = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ci * k + ki) * k + kj) * l..((ci * k + ki) * k + kj + 1) * l];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize, dx: &mut [T]) {
    let l = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ci * k + ki) * k + kj) * l..((ci * k + ki) * k + kj + 1) * l];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(k: usize, stride: usize, pad: usize) -> bool {
    k == 1 && stride == 1 && pad == 0
}

fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    record: bool,
) -> (Tensor<T>, Vec<T>) {
    let (n, c, h, wd) = x.dims4();
    let (o, wc, k, k2) = w.dims4();
    assert_eq!(wc, c, "conv2d channel mismatch: input {c}, weight {wc}");
    assert_eq!(k, k2, "square kernels only");
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(wd, k, stride, pad);
    let l = ho * wo;
    let ckk = c * k * k;
    let pointwise = is_pointwise(k, stride, pad);
    let mut out = vec![T::zero(); n * o * l];
    let mut cols = if record && !pointwise { vec![T::zero(); n * ckk * l] } else { Vec::new() };
    let mut scratch = if !record && !pointwise { vec![T::zero(); ckk * l] } else { Vec::new() };
    for bi in 0..n {
        let xs = &x.data()[bi * c * h * wd..(bi + 1) * c * h * wd];
        let dst = &mut out[bi * o * l..(bi + 1) * o * l];
        if let Some(b) = b {
            for (oc, chunk) in dst.chunks_mut(l).enumerate() {
                chunk.fill(b.data()[oc]);
            }
        }
        let col: &[T] = if pointwise {
            xs
        } else {
            let buf = if record { &mut cols[bi * ckk * l..(bi + 1) * ckk * l] } else { &mut scratch[..] };
            im2col(xs, c, h, wd, k, stride, pad, ho, wo, buf);
            buf
        };
        matmul(Mat::new(w.data(), o, ckk), false, Mat::new(col, ckk, l), false, dst, T::one());
    }
    (Tensor::from_vec(&[n, o, ho, wo], out), cols)
}

fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    cols: &[T],
    gout: &Tensor<T>,
    stride: usize,
    pad: usize,
    has_bias: bool,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let (n, c, h, wd) = x.dims4();
    let (o, _, k, _) = w.dims4();
    let (_, _, ho, wo) = gout.dims4();
    let l = ho * wo;
    let ckk = c * k * k;
    let pointwise = is_pointwise(k, stride, pad);
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = if has_bias { Some(vec![T::zero(); o]) } else { None };
    let mut dcol = vec![T::zero(); ckk * l];
    for bi in 0..n {
        let g = &gout.data()[bi * o * l..(bi + 1) * o * l];
        let col: &[T] = if pointwise { &x.data()[bi * c * h * wd..(bi + 1) * c * h * wd] } else { &cols[bi * ckk * l..(bi + 1) * ckk * l] };
        matmul(Mat::new(g, o, l), false, Mat::new(col, ckk, l), true, &mut dw, T::one());
        if let Some(db) = db.as_mut() {
            for (oc, chunk) in g.chunks(l).enumerate() {
                db[oc] += chunk.iter().copied().sum::<T>();
            }
        }
        let dxs = &mut dx[bi * c * h * wd..(bi + 1) * c * h * wd];
        if pointwise {
            matmul(Mat::new(w.data(), o, ckk), true, Mat::new(g, o, l), false, dxs, T::one());
        } else {
            matmul(Mat::new(w.data(), o, ckk), true, Mat::new(g, o, l), false, &mut dcol, T::zero());
            col2im(&dcol, c, h, wd, k, stride, pad, ho, wo, dxs);
        }
    }
    (Tensor::from_vec(x.shape(), dx), Tensor::from_vec(w.shape(), dw), db.map(|d| Tensor::from_vec(&[o], d)))
}

fn attention_backward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &[T],
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = q.dims4();
    let l = h * w;
    let scale = T::one() / T::from_usize(c).unwrap().sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); l * l];
    for b in 0..n {
        let r = b * c * l..(b + 1) * c * l;
        let p = &probs[b * l * l..(b + 1) * l * l];
        let go = &gout.data()[r.clone()];
        matmul(Mat::new(go, c, l), false, Mat::new(p, l, l), false, &mut dv[r.clone()], T::zero());
        matmul(Mat::new(go, c, l), true, Mat::new(&v.data()[r.clone()], c, l), false, &mut dp, T::zero());
        for (prow, drow) in p.chunks(l).zip(dp.chunks_mut(l)) {
            let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
            for (d, &pi) in drow.iter_mut().zip(prow) {
                *d = pi * (*d - dot) * scale;
            }
        }
        matmul(Mat::new(&k.data()[r.clone()], c, l), false, Mat::new(&dp, l, l), true, &mut dq[r.clone()], T::zero());
        matmul(Mat::new(&q.data()[r.clone()], c, l), false, Mat::new(&dp, l, l), false, &mut dk[r.clone()], T::zero());
    }
    (Tensor::from_vec(q.shape(), dq), Tensor::from_vec(k.shape(), dk), Tensor::from_vec(v.shape(), dv))
}
