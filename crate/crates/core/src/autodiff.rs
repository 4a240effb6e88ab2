//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its values. Each recorded
//! value is addressed by a [`Var`] handle. [`Graph::backward`] walks the tape
//! in reverse and accumulates gradients into every value that depends on a
//! parameter leaf.
//!
//! Operations are coarse (affine maps, same-padded 3×3 convolutions, a fused
//! recurrent encoder, fused losses) so that a whole training step is a few
//! dozen tape entries.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::{axpy, dot, sum, Real};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
    },
    AvgPool2 {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    GradReverse {
        x: Var,
        alpha: T,
    },
    Reshape {
        x: Var,
    },
    Recurrent {
        emb: Var,
        w_in: Var,
        w_hid: Var,
        b: Var,
        tokens: Vec<Vec<usize>>,
        /// Hidden state after every step, per sample.
        states: Vec<Vec<T>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        log_probs: Vec<T>,
    },
    KlDiv {
        p: Var,
        q: Var,
        stop_p: bool,
        log_p: Vec<T>,
        log_q: Vec<T>,
        row_kl: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The tape.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn log_softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let top = row
        .iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > row[best] { i } else { best });
    let m = row[top];
    // The max term contributes exactly 1; summing the rest into ln_1p keeps
    // confident rows accurate.
    let mut s = T::zero();
    for (i, &x) in row.iter().enumerate() {
        if i != top {
            s = s + (x - m).exp();
        }
    }
    let tail = s.ln_1p();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - m) - tail;
    }
}

/// Row-wise log-softmax of a `[rows, k]` buffer.
pub fn log_softmax<T: Real>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row, o) in logits.chunks(k).zip(out.chunks_mut(k)) {
        log_softmax_row(row, o);
    }
    out
}

fn shape_err(msg: alloc::string::String) -> Error {
    Error::ShapeMismatch(msg)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of differentiable leaves on the tape.
    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Leaf) && n.requires_grad)
            .count()
    }

    /// Accumulated gradient of the last [`Graph::backward`] call, if `v`
    /// received one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `x [B, in] · wᵀ + b`, with `w [out, in]` and `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err(format!("linear: input {xs:?} vs weight {ws:?}")));
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.value(b).shape() != [out] {
                return Err(shape_err(format!(
                    "linear: bias {:?} for {} outputs",
                    self.value(b).shape(),
                    out
                )));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = b.map(|b| self.value(b).data());
        let mut y = vec![T::zero(); batch * out];
        for i in 0..batch {
            let xr = &xd[i * inp..(i + 1) * inp];
            for o in 0..out {
                let mut acc = dot(xr, &wd[o * inp..(o + 1) * inp]);
                if let Some(bd) = bd {
                    acc = acc + bd[o];
                }
                y[i * out + o] = acc;
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        let t = Tensor::from_vec(&[batch, out], y)?;
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    /// Same-padded, stride-1 3×3 convolution. `x [B, C, H, W]`,
    /// `w [O, C, 3, 3]`, `b [O]` → `[B, O, H, W]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != 3 || ws[3] != 3 {
            return Err(shape_err(format!("conv3x3: input {xs:?} vs weight {ws:?}")));
        }
        if self.value(b).shape() != [ws[0]] {
            return Err(shape_err(format!("conv3x3: bias for {} channels", ws[0])));
        }
        let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ws[0];
        let plane = h * wd;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let taps = cin * 9;
        let mut y = vec![T::zero(); batch * cout * plane];
        let mut cols = vec![T::zero(); taps * plane];
        for n in 0..batch {
            im2col(&xv[n * cin * plane..(n + 1) * cin * plane], &mut cols, cin, h, wd);
            for o in 0..cout {
                let out = &mut y[(n * cout + o) * plane..(n * cout + o + 1) * plane];
                out.fill(bv[o]);
                for (j, &k) in wv[o * taps..(o + 1) * taps].iter().enumerate() {
                    axpy(k, &cols[j * plane..(j + 1) * plane], out);
                }
            }
        }
        let rg = self.rg(&[x, w, b]);
        let t = Tensor::from_vec(&[batch, cout, h, wd], y)?;
        Ok(self.push(t, Op::Conv3x3 { x, w, b }, rg))
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || !xs[2].is_multiple_of(2) || !xs[3].is_multiple_of(2) {
            return Err(shape_err(format!("avg_pool2: input {xs:?}")));
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let quarter = T::from_f64(0.25);
        let mut y = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut y[p * oh * ow..(p + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let a = src[2 * i * w + 2 * j] + src[2 * i * w + 2 * j + 1];
                    let b = src[(2 * i + 1) * w + 2 * j] + src[(2 * i + 1) * w + 2 * j + 1];
                    dst[i * ow + j] = (a + b) * quarter;
                }
            }
        }
        let rg = self.rg(&[x]);
        let t = Tensor::from_vec(&[xs[0], xs[1], oh, ow], y)?;
        Ok(self.push(t, Op::AvgPool2 { x }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu { x }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(T::tanh);
        let rg = self.rg(&[x]);
        self.push(t, Op::Tanh { x }, rg)
    }

    fn zip_with(&self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(format!("{what}: {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.shape(), data)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale { x, c }, rg)
    }

    /// Identity on the forward pass; multiplies the incoming gradient by
    /// `-alpha` on the reverse pass.
    pub fn grad_reverse(&mut self, x: Var, alpha: T) -> Var {
        let t = self.value(x).clone();
        let rg = self.rg(&[x]);
        self.push(t, Op::GradReverse { x, alpha }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(shape, self.value(x).data().to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// Single-layer Elman encoder, `h_t = tanh(W_in e(tok_t) + W_hid h_{t-1} + b)`
    /// from `h_0 = 0`; returns the final states `[B, H]`.
    ///
    /// `emb [V, E]`, `w_in [H, E]`, `w_hid [H, H]`, `b [H]`. Token ids must be
    /// checked by the caller.
    pub fn recurrent(&mut self, emb: Var, w_in: Var, w_hid: Var, b: Var, tokens: Vec<Vec<usize>>) -> Result<Var> {
        let es = self.value(emb).shape().to_vec();
        let wis = self.value(w_in).shape().to_vec();
        let whs = self.value(w_hid).shape().to_vec();
        if es.len() != 2 || wis.len() != 2 || wis[1] != es[1] || whs != [wis[0], wis[0]] {
            return Err(shape_err(format!(
                "recurrent: embedding {es:?}, input weight {wis:?}, hidden weight {whs:?}"
            )));
        }
        let (vocab, e, hid) = (es[0], es[1], wis[0]);
        if self.value(b).shape() != [hid] {
            return Err(shape_err(format!("recurrent: bias for {hid} units")));
        }
        for seq in &tokens {
            if seq.is_empty() {
                return Err(Error::EmptyQuestion);
            }
            if let Some(&id) = seq.iter().find(|&&t| t >= vocab) {
                return Err(Error::UnknownToken { id, vocab });
            }
        }
        let ev = self.value(emb).data();
        let wiv = self.value(w_in).data();
        let whv = self.value(w_hid).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); tokens.len() * hid];
        let mut states = Vec::with_capacity(tokens.len());
        for (n, seq) in tokens.iter().enumerate() {
            let mut all = Vec::with_capacity(seq.len() * hid);
            let mut h = vec![T::zero(); hid];
            let mut next = vec![T::zero(); hid];
            for &tok in seq {
                let x = &ev[tok * e..(tok + 1) * e];
                for i in 0..hid {
                    let a = dot(&wiv[i * e..(i + 1) * e], x) + dot(&whv[i * hid..(i + 1) * hid], &h) + bv[i];
                    next[i] = a.tanh();
                }
                core::mem::swap(&mut h, &mut next);
                all.extend_from_slice(&h);
            }
            out[n * hid..(n + 1) * hid].copy_from_slice(&h);
            states.push(all);
        }
        let rg = self.rg(&[emb, w_in, w_hid, b]);
        let t = Tensor::from_vec(&[tokens.len(), hid], out)?;
        Ok(self.push(
            t,
            Op::Recurrent {
                emb,
                w_in,
                w_hid,
                b,
                tokens,
                states,
            },
            rg,
        ))
    }

    /// Mean cross entropy of `logits [B, K]` against class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 || ls[0] != targets.len() || ls[0] == 0 {
            return Err(shape_err(format!(
                "cross_entropy: logits {ls:?} for {} targets",
                targets.len()
            )));
        }
        let k = ls[1];
        if let Some(&label) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::InvalidLabel { label, classes: k });
        }
        let log_probs = log_softmax(self.value(logits).data(), k);
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            total = total - log_probs[i * k + t];
        }
        let loss = total / T::from_f64(targets.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                log_probs,
            },
            rg,
        ))
    }

    /// Mean `KL(softmax(p) ‖ softmax(q))` over rows of two `[B, K]` logit
    /// tensors. With `stop_p` no gradient flows into `p`.
    pub fn kl_div(&mut self, p: Var, q: Var, stop_p: bool) -> Result<Var> {
        let (ps, qs) = (self.value(p).shape().to_vec(), self.value(q).shape().to_vec());
        if ps != qs || ps.len() != 2 || ps[0] == 0 {
            return Err(shape_err(format!("kl_div: {ps:?} vs {qs:?}")));
        }
        let (rows, k) = (ps[0], ps[1]);
        let log_p = log_softmax(self.value(p).data(), k);
        let log_q = log_softmax(self.value(q).data(), k);
        let row_kl: Vec<T> = (0..rows)
            .map(|r| {
                let mut s = T::zero();
                for j in r * k..(r + 1) * k {
                    s = s + log_p[j].exp() * (log_p[j] - log_q[j]);
                }
                s
            })
            .collect();
        let mean = row_kl.iter().copied().sum::<T>() / T::from_f64(rows as f64);
        let rg = if stop_p { self.rg(&[q]) } else { self.rg(&[p, q]) };
        Ok(self.push(
            Tensor::scalar(mean),
            Op::KlDiv {
                p,
                q,
                stop_p,
                log_p,
                log_q,
                row_kl,
            },
            rg,
        ))
    }

    /// Reverse pass from the scalar `loss`. Gradients from a previous call
    /// are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(format!(
                "backward from a non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, nodes, $v)
            };
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xs = nodes[x.0].value.shape();
                let (batch, inp) = (xs[0], xs[1]);
                let out = nodes[w.0].value.shape()[0];
                let xd = nodes[x.0].value.data();
                let wd = nodes[w.0].value.data();
                if wants(*x) {
                    let gx = acc!(*x);
                    for n in 0..batch {
                        let row = &mut gx[n * inp..(n + 1) * inp];
                        for o in 0..out {
                            axpy(g[n * out + o], &wd[o * inp..(o + 1) * inp], row);
                        }
                    }
                }
                if wants(*w) {
                    let gw = acc!(*w);
                    for o in 0..out {
                        let row = &mut gw[o * inp..(o + 1) * inp];
                        for n in 0..batch {
                            axpy(g[n * out + o], &xd[n * inp..(n + 1) * inp], row);
                        }
                    }
                }
                if let Some(b) = b {
                    if wants(*b) {
                        let gb = acc!(*b);
                        for n in 0..batch {
                            for o in 0..out {
                                gb[o] = gb[o] + g[n * out + o];
                            }
                        }
                    }
                }
            }
            Op::Conv3x3 { x, w, b } => {
                let xs = nodes[x.0].value.shape();
                let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let cout = nodes[w.0].value.shape()[0];
                let plane = h * wd;
                let xv = nodes[x.0].value.data();
                let wv = nodes[w.0].value.data();
                if wants(*b) {
                    let gb = acc!(*b);
                    for n in 0..batch {
                        for o in 0..cout {
                            gb[o] = gb[o] + sum(&g[(n * cout + o) * plane..(n * cout + o + 1) * plane]);
                        }
                    }
                }
                let taps = cin * 9;
                let (want_w, want_x) = (wants(*w), wants(*x));
                let mut cols = vec![T::zero(); taps * plane];
                for n in 0..batch {
                    let gn = &g[n * cout * plane..(n + 1) * cout * plane];
                    if want_w {
                        im2col(&xv[n * cin * plane..(n + 1) * cin * plane], &mut cols, cin, h, wd);
                        let gw = acc!(*w);
                        for o in 0..cout {
                            let go = &gn[o * plane..(o + 1) * plane];
                            for j in 0..taps {
                                let v = &mut gw[o * taps + j];
                                *v = *v + dot(go, &cols[j * plane..(j + 1) * plane]);
                            }
                        }
                    }
                    if want_x {
                        cols.fill(T::zero());
                        for o in 0..cout {
                            let go = &gn[o * plane..(o + 1) * plane];
                            for (j, &k) in wv[o * taps..(o + 1) * taps].iter().enumerate() {
                                axpy(k, go, &mut cols[j * plane..(j + 1) * plane]);
                            }
                        }
                        let gx = acc!(*x);
                        col2im_add(&cols, &mut gx[n * cin * plane..(n + 1) * cin * plane], cin, h, wd);
                    }
                }
            }
            Op::AvgPool2 { x } => {
                let xs = nodes[x.0].value.shape();
                let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::from_f64(0.25);
                let gx = acc!(*x);
                for p in 0..planes {
                    for i in 0..oh {
                        for j in 0..ow {
                            let v = g[p * oh * ow + i * ow + j] * quarter;
                            let base = p * h * w;
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let k = base + (2 * i + dy) * w + 2 * j + dx;
                                gx[k] = gx[k] + v;
                            }
                        }
                    }
                }
            }
            Op::Relu { x } => {
                let xv = nodes[x.0].value.data();
                let gx = acc!(*x);
                for ((gi, &xi), &go) in gx.iter_mut().zip(xv).zip(g) {
                    if xi > T::zero() {
                        *gi = *gi + go;
                    }
                }
            }
            Op::Tanh { x } => {
                let yv = nodes[i].value.data();
                let gx = acc!(*x);
                for ((gi, &yi), &go) in gx.iter_mut().zip(yv).zip(g) {
                    *gi = *gi + go * (T::one() - yi * yi);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if wants(*a) {
                    let ga = acc!(*a);
                    for ((gi, &bi), &go) in ga.iter_mut().zip(bv).zip(g) {
                        *gi = *gi + go * bi;
                    }
                }
                if wants(*b) {
                    let gb = acc!(*b);
                    for ((gi, &ai), &go) in gb.iter_mut().zip(av).zip(g) {
                        *gi = *gi + go * ai;
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if wants(v) {
                        let gv = acc!(v);
                        for (gi, &go) in gv.iter_mut().zip(g) {
                            *gi = *gi + go;
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                let gx = acc!(*x);
                for (gi, &go) in gx.iter_mut().zip(g) {
                    *gi = *gi + go * *c;
                }
            }
            Op::GradReverse { x, alpha } => {
                let factor = -*alpha;
                let gx = acc!(*x);
                for (gi, &go) in gx.iter_mut().zip(g) {
                    *gi = *gi + go * factor;
                }
            }
            Op::Reshape { x } => {
                let gx = acc!(*x);
                for (gi, &go) in gx.iter_mut().zip(g) {
                    *gi = *gi + go;
                }
            }
            Op::Recurrent {
                emb,
                w_in,
                w_hid,
                b,
                tokens,
                states,
            } => self.recurrent_backward(g, grads, *emb, *w_in, *w_hid, *b, tokens, states),
            Op::CrossEntropy {
                logits,
                targets,
                log_probs,
            } => {
                let k = nodes[logits.0].value.shape()[1];
                let scale = g[0] / T::from_f64(targets.len() as f64);
                let gl = acc!(*logits);
                for (n, &t) in targets.iter().enumerate() {
                    for j in 0..k {
                        let mut d = log_probs[n * k + j].exp();
                        if j == t {
                            d = d - T::one();
                        }
                        gl[n * k + j] = gl[n * k + j] + scale * d;
                    }
                }
            }
            Op::KlDiv {
                p,
                q,
                stop_p,
                log_p,
                log_q,
                row_kl,
            } => {
                let k = nodes[p.0].value.shape()[1];
                let rows = row_kl.len();
                let scale = g[0] / T::from_f64(rows as f64);
                if wants(*q) {
                    let gq = acc!(*q);
                    for j in 0..rows * k {
                        gq[j] = gq[j] + scale * (log_q[j].exp() - log_p[j].exp());
                    }
                }
                if !*stop_p && wants(*p) {
                    let gp = acc!(*p);
                    for r in 0..rows {
                        for j in r * k..(r + 1) * k {
                            let d = log_p[j] - log_q[j] - row_kl[r];
                            gp[j] = gp[j] + scale * log_p[j].exp() * d;
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn recurrent_backward(
        &self,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        emb: Var,
        w_in: Var,
        w_hid: Var,
        b: Var,
        tokens: &[Vec<usize>],
        states: &[Vec<T>],
    ) {
        let nodes = &self.nodes;
        let (e, hid) = (nodes[emb.0].value.shape()[1], nodes[w_in.0].value.shape()[0]);
        let ev = nodes[emb.0].value.data();
        let wiv = nodes[w_in.0].value.data();
        let whv = nodes[w_hid.0].value.data();
        let mut take = |v: Var| {
            let len = nodes[v.0].value.len();
            grads[v.0].take().unwrap_or_else(|| vec![T::zero(); len])
        };
        let (mut ge, mut gwi, mut gwh, mut gb) = (take(emb), take(w_in), take(w_hid), take(b));
        let zeros = vec![T::zero(); hid];
        let mut da = vec![T::zero(); hid];
        for (n, seq) in tokens.iter().enumerate() {
            let hs = &states[n];
            let mut dh = g[n * hid..(n + 1) * hid].to_vec();
            for t in (0..seq.len()).rev() {
                let h_t = &hs[t * hid..(t + 1) * hid];
                let h_prev = if t == 0 {
                    &zeros[..]
                } else {
                    &hs[(t - 1) * hid..t * hid]
                };
                for i in 0..hid {
                    da[i] = dh[i] * (T::one() - h_t[i] * h_t[i]);
                }
                let tok = seq[t];
                let x = &ev[tok * e..(tok + 1) * e];
                let gx = &mut ge[tok * e..(tok + 1) * e];
                for i in 0..hid {
                    gb[i] = gb[i] + da[i];
                    axpy(da[i], x, &mut gwi[i * e..(i + 1) * e]);
                    axpy(da[i], &wiv[i * e..(i + 1) * e], gx);
                    axpy(da[i], h_prev, &mut gwh[i * hid..(i + 1) * hid]);
                }
                dh.fill(T::zero());
                for i in 0..hid {
                    axpy(da[i], &whv[i * hid..(i + 1) * hid], &mut dh);
                }
            }
        }
        grads[emb.0] = Some(ge);
        grads[w_in.0] = Some(gwi);
        grads[w_hid.0] = Some(gwh);
        grads[b.0] = Some(gb);
    }
}

fn slot<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'a mut Vec<T> {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

/// Valid output column range for kernel column `kx` (input column
/// `x + kx - 1` must lie in `0..w`).
#[inline]
fn col_range(kx: usize, w: usize) -> (usize, usize) {
    let lo = if kx == 0 { 1 } else { 0 };
    let hi = if kx == 2 { w - 1 } else { w };
    (lo, hi)
}

/// Unfolds `[C, H, W]` into `[C·9, H·W]`: row `c·9 + ky·3 + kx` holds the
/// input shifted by `(ky − 1, kx − 1)`, zero outside the image.
fn im2col<T: Real>(inp: &[T], cols: &mut [T], cin: usize, h: usize, w: usize) {
    let plane = h * w;
    for c in 0..cin {
        let src = &inp[c * plane..(c + 1) * plane];
        for ky in 0..3 {
            let (ylo, yhi) = col_range(ky, h);
            for kx in 0..3 {
                let (xlo, xhi) = col_range(kx, w);
                let dst = &mut cols[((c * 9) + ky * 3 + kx) * plane..((c * 9) + ky * 3 + kx + 1) * plane];
                dst.fill(T::zero());
                for y in ylo..yhi {
                    let iy = y + ky - 1;
                    dst[y * w + xlo..y * w + xhi].copy_from_slice(&src[iy * w + xlo + kx - 1..iy * w + xhi + kx - 1]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `[C·9, H·W]` back onto `[C, H, W]`.
fn col2im_add<T: Real>(cols: &[T], out: &mut [T], cin: usize, h: usize, w: usize) {
    let plane = h * w;
    for c in 0..cin {
        let dst = &mut out[c * plane..(c + 1) * plane];
        for ky in 0..3 {
            let (ylo, yhi) = col_range(ky, h);
            for kx in 0..3 {
                let (xlo, xhi) = col_range(kx, w);
                let src = &cols[((c * 9) + ky * 3 + kx) * plane..((c * 9) + ky * 3 + kx + 1) * plane];
                for y in ylo..yhi {
                    let iy = y + ky - 1;
                    let d = &mut dst[iy * w + xlo + kx - 1..iy * w + xhi + kx - 1];
                    for (a, &b) in d.iter_mut().zip(&src[y * w + xlo..y * w + xhi]) {
                        *a = *a + b;
                    }
                }
            }
        }
    }
}
