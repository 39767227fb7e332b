//! Reverse-mode tape.
//!
//! Ops are methods on [`Tape`]: each records a backward closure when grad
//! tracking is on. The tape is rebuilt every iteration (define-by-run) and
//! consumed by [`Tape::backward`]. One tape belongs to one run; nothing here
//! is shared across threads.

use std::cell::{Cell, RefCell};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::kernels::{col2im, conv_out_dim, im2col, mm, mm_abt, mm_atb};
use super::scalar::Scalar;
use super::tensor::Tensor;

pub struct Tape<E: Scalar> {
    steps: RefCell<Vec<Box<dyn FnOnce()>>>,
    recording: Cell<bool>,
    _elem: std::marker::PhantomData<E>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            steps: RefCell::new(Vec::new()),
            recording: Cell::new(true),
            _elem: std::marker::PhantomData,
        }
    }

    /// A tape that records nothing; forward passes through it never build
    /// gradient state.
    pub fn inference() -> Self {
        let t = Self::new();
        t.recording.set(false);
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording.get()
    }

    pub fn set_recording(&self, v: bool) {
        self.recording.set(v);
    }

    pub fn len(&self) -> usize {
        self.steps.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.borrow().is_empty()
    }

    fn push(&self, f: impl FnOnce() + 'static) {
        self.steps.borrow_mut().push(Box::new(f));
    }

    pub(crate) fn push_step(&self, f: Box<dyn FnOnce()>) {
        self.steps.borrow_mut().push(f);
    }

    /// Marks `out` as gradient-tracked and records its backward step.
    fn record(&self, out: &Tensor<E>, f: impl FnOnce() + 'static) {
        out.set_requires_grad(true);
        self.push(f);
    }

    /// Populates gradients of every tracked leaf reachable from `loss`.
    /// The tape is consumed: recorded steps run once, in reverse order.
    pub fn backward(&self, loss: &Tensor<E>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss { shape: loss.shape() });
        }
        let steps: Vec<_> = self.steps.borrow_mut().drain(..).collect();
        if steps.is_empty() || !loss.requires_grad() {
            eprintln!("warning: backward on a detached graph; gradients stay zero");
            return Ok(());
        }
        loss.accumulate_grad(&[E::one()]);
        for step in steps.into_iter().rev() {
            step();
        }
        Ok(())
    }
}

fn same_shape<E: Scalar>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("lhs {:?} vs rhs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

// Elementwise and scalar ops.
impl<E: Scalar> Tape<E> {
    pub fn add(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape("add", a, b)?;
        let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_parts(a.shape(), data);
        if self.is_recording() && (a.requires_grad() || b.requires_grad()) {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.record(&out, move || {
                let g = o.grad_or_zeros();
                if a.requires_grad() {
                    a.accumulate_grad(&g);
                }
                if b.requires_grad() {
                    b.accumulate_grad(&g);
                }
            });
        }
        Ok(out)
    }

    pub fn mul(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape("mul", a, b)?;
        let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_parts(a.shape(), data);
        if self.is_recording() && (a.requires_grad() || b.requires_grad()) {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.record(&out, move || {
                let g = o.grad_or_zeros();
                if a.requires_grad() {
                    let delta: Vec<E> =
                        g.iter().zip(b.data().iter()).map(|(&gi, &bi)| gi * bi).collect();
                    a.accumulate_grad(&delta);
                }
                if b.requires_grad() {
                    let delta: Vec<E> =
                        g.iter().zip(a.data().iter()).map(|(&gi, &ai)| gi * ai).collect();
                    b.accumulate_grad(&delta);
                }
            });
        }
        Ok(out)
    }

    pub fn add_const(&self, t: &Tensor<E>, c: E) -> Tensor<E> {
        let data = t.data().iter().map(|&x| x + c).collect();
        let out = Tensor::from_parts(t.shape(), data);
        if self.is_recording() && t.requires_grad() {
            let (t, o) = (t.clone(), out.clone());
            self.record(&out, move || t.accumulate_grad(&o.grad_or_zeros()));
        }
        out
    }

    pub fn scale(&self, t: &Tensor<E>, c: E) -> Tensor<E> {
        let data = t.data().iter().map(|&x| x * c).collect();
        let out = Tensor::from_parts(t.shape(), data);
        if self.is_recording() && t.requires_grad() {
            let (t, o) = (t.clone(), out.clone());
            self.record(&out, move || {
                let delta: Vec<E> = o.grad_or_zeros().iter().map(|&g| g * c).collect();
                t.accumulate_grad(&delta);
            });
        }
        out
    }

    pub fn relu(&self, t: &Tensor<E>) -> Tensor<E> {
        let data = t
            .data()
            .iter()
            .map(|&x| if x > E::zero() { x } else { E::zero() })
            .collect();
        let out = Tensor::from_parts(t.shape(), data);
        if self.is_recording() && t.requires_grad() {
            let (t, o) = (t.clone(), out.clone());
            self.record(&out, move || {
                let g = o.grad_or_zeros();
                let delta: Vec<E> = {
                    let xd = t.data();
                    g.iter()
                        .zip(xd.iter())
                        .map(|(&gi, &xi)| if xi > E::zero() { gi } else { E::zero() })
                        .collect()
                };
                t.accumulate_grad(&delta);
            });
        }
        out
    }

    pub fn sum_all(&self, t: &Tensor<E>) -> Tensor<E> {
        let s: E = t.data().iter().copied().sum();
        let out = Tensor::scalar(s);
        if self.is_recording() && t.requires_grad() {
            let (t, o) = (t.clone(), out.clone());
            self.record(&out, move || {
                let g = o.grad_or_zeros()[0];
                let delta = vec![g; t.numel()];
                t.accumulate_grad(&delta);
            });
        }
        out
    }

    pub fn reshape(&self, t: &Tensor<E>, shape: &[usize]) -> Result<Tensor<E>> {
        let numel: usize = shape.iter().product();
        if numel != t.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} ({} values) -> {:?} ({})", t.shape(), t.numel(), shape, numel),
            ));
        }
        let out = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        if self.is_recording() && t.requires_grad() {
            let (t, o) = (t.clone(), out.clone());
            self.record(&out, move || t.accumulate_grad(&o.grad_or_zeros()));
        }
        Ok(out)
    }

    /// Copy of row `i` of a 2-d tensor.
    pub fn row(&self, t: &Tensor<E>, i: usize) -> Result<Tensor<E>> {
        let shape = t.shape();
        if shape.len() != 2 || i >= shape[0] {
            return Err(Error::shape(
                "row",
                format!("row {i} of tensor {:?}", shape),
            ));
        }
        let cols = shape[1];
        let data = t.data()[i * cols..(i + 1) * cols].to_vec();
        let out = Tensor::from_parts(vec![cols], data);
        if self.is_recording() && t.requires_grad() {
            let (t, o) = (t.clone(), out.clone());
            self.record(&out, move || {
                let g = o.grad_or_zeros();
                let mut delta = vec![E::zero(); t.numel()];
                delta[i * cols..(i + 1) * cols].copy_from_slice(&g);
                t.accumulate_grad(&delta);
            });
        }
        Ok(out)
    }

    /// Weighted sum of same-shaped tensors: `Σ_i weights[i] · parts[i]`.
    /// Gradients flow to both the parts and the weight vector.
    pub fn mix(&self, parts: &[Tensor<E>], weights: &Tensor<E>) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(Error::shape("mix", "no parts"));
        }
        if weights.numel() != parts.len() {
            return Err(Error::shape(
                "mix",
                format!("{} weights for {} parts", weights.numel(), parts.len()),
            ));
        }
        let shape = parts[0].shape();
        for (idx, p) in parts.iter().enumerate() {
            if p.shape() != shape {
                return Err(Error::shape(
                    "mix",
                    format!("part {idx} has shape {:?}, expected {:?}", p.shape(), shape),
                ));
            }
        }
        let n = parts[0].numel();
        let mut data = vec![E::zero(); n];
        {
            let w = weights.data();
            for (i, part) in parts.iter().enumerate() {
                let wi = w[i];
                for (dj, pj) in data.iter_mut().zip(part.data().iter()) {
                    *dj += wi * *pj;
                }
            }
        }
        let out = Tensor::from_parts(shape, data);
        let any_grad = weights.requires_grad() || parts.iter().any(|p| p.requires_grad());
        if self.is_recording() && any_grad {
            let parts: Vec<Tensor<E>> = parts.to_vec();
            let (w, o) = (weights.clone(), out.clone());
            self.record(&out, move || {
                let g = o.grad_or_zeros();
                let wd = w.data().to_vec();
                for (i, part) in parts.iter().enumerate() {
                    if part.requires_grad() {
                        let wi = wd[i];
                        let delta: Vec<E> = g.iter().map(|&gi| gi * wi).collect();
                        part.accumulate_grad(&delta);
                    }
                }
                if w.requires_grad() {
                    let mut wdelta = vec![E::zero(); parts.len()];
                    for (i, part) in parts.iter().enumerate() {
                        let pd = part.data();
                        wdelta[i] = g.iter().zip(pd.iter()).map(|(&gi, &pi)| gi * pi).sum();
                    }
                    w.accumulate_grad(&wdelta);
                }
            });
        }
        Ok(out)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, t: &Tensor<E>) -> Tensor<E> {
        let shape = t.shape();
        let cols = *shape.last().expect("softmax on rank-0 tensor");
        let rows = t.numel() / cols;
        let mut data = vec![E::zero(); t.numel()];
        {
            let x = t.data();
            for r in 0..rows {
                let row = &x[r * cols..(r + 1) * cols];
                let m = row.iter().copied().fold(E::neg_infinity(), E::max);
                let mut denom = E::zero();
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - m).exp();
                    data[r * cols + j] = e;
                    denom += e;
                }
                for j in 0..cols {
                    data[r * cols + j] /= denom;
                }
            }
        }
        let out = Tensor::from_parts(shape, data);
        if self.is_recording() && t.requires_grad() {
            let (t, o) = (t.clone(), out.clone());
            self.record(&out, move || {
                let g = o.grad_or_zeros();
                let y = o.data();
                let mut delta = vec![E::zero(); g.len()];
                for r in 0..rows {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let yr = &y[r * cols..(r + 1) * cols];
                    let dot: E = gr.iter().zip(yr.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..cols {
                        delta[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                drop(y);
                t.accumulate_grad(&delta);
            });
        }
        out
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self, t: &Tensor<E>) -> Tensor<E> {
        let shape = t.shape();
        let cols = *shape.last().expect("log_softmax on rank-0 tensor");
        let rows = t.numel() / cols;
        let mut data = vec![E::zero(); t.numel()];
        {
            let x = t.data();
            for r in 0..rows {
                let row = &x[r * cols..(r + 1) * cols];
                let m = row.iter().copied().fold(E::neg_infinity(), E::max);
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<E>().ln();
                for j in 0..cols {
                    data[r * cols + j] = row[j] - lse;
                }
            }
        }
        let out = Tensor::from_parts(shape, data);
        if self.is_recording() && t.requires_grad() {
            let (t, o) = (t.clone(), out.clone());
            self.record(&out, move || {
                let g = o.grad_or_zeros();
                let y = o.data();
                let mut delta = vec![E::zero(); g.len()];
                for r in 0..rows {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gsum: E = gr.iter().copied().sum();
                    for j in 0..cols {
                        delta[r * cols + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                drop(y);
                t.accumulate_grad(&delta);
            });
        }
        out
    }

    /// Mean cross-entropy of logits `[batch, classes]` against integer labels.
    pub fn cross_entropy(&self, logits: &Tensor<E>, labels: &[usize]) -> Result<Tensor<E>> {
        let shape = logits.shape();
        if shape.len() != 2 {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits must be [batch, classes], got {:?}", shape),
            ));
        }
        let (batch, classes) = (shape[0], shape[1]);
        if labels.len() != batch {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for batch {}", labels.len(), batch),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::shape(
                "cross_entropy",
                format!("label {bad} out of range for {classes} classes"),
            ));
        }
        let mut probs = vec![E::zero(); batch * classes];
        let mut loss = E::zero();
        {
            let x = logits.data();
            for b in 0..batch {
                let row = &x[b * classes..(b + 1) * classes];
                let m = row.iter().copied().fold(E::neg_infinity(), E::max);
                let mut denom = E::zero();
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - m).exp();
                    probs[b * classes + j] = e;
                    denom += e;
                }
                for j in 0..classes {
                    probs[b * classes + j] /= denom;
                }
                let lse = m + denom.ln();
                loss += lse - row[labels[b]];
            }
        }
        let scale = E::one() / E::from_f64(batch as f64);
        let out = Tensor::scalar(loss * scale);
        if self.is_recording() && logits.requires_grad() {
            let (t, o) = (logits.clone(), out.clone());
            let labels = labels.to_vec();
            self.record(&out, move || {
                let g = o.grad_or_zeros()[0] * scale;
                let mut delta = probs;
                for (b, &label) in labels.iter().enumerate() {
                    delta[b * classes + label] -= E::one();
                }
                for d in delta.iter_mut() {
                    *d *= g;
                }
                t.accumulate_grad(&delta);
            });
        }
        Ok(out)
    }

    /// Inverted dropout; a no-op when `rate == 0`.
    pub fn dropout(&self, t: &Tensor<E>, rate: f64, rng: &mut ChaCha8Rng) -> Tensor<E> {
        if rate <= 0.0 {
            return t.clone();
        }
        let keep = 1.0 - rate;
        let inv = E::from_f64(1.0 / keep);
        let mask: Vec<E> = (0..t.numel())
            .map(|_| if rng.gen_range(0.0..1.0) < keep { inv } else { E::zero() })
            .collect();
        let data = t.data().iter().zip(mask.iter()).map(|(&x, &m)| x * m).collect();
        let out = Tensor::from_parts(t.shape(), data);
        if self.is_recording() && t.requires_grad() {
            let (t, o) = (t.clone(), out.clone());
            self.record(&out, move || {
                let g = o.grad_or_zeros();
                let delta: Vec<E> = g.iter().zip(mask.iter()).map(|(&gi, &m)| gi * m).collect();
                t.accumulate_grad(&delta);
            });
        }
        out
    }
}

// Linear algebra.
impl<E: Scalar> Tape<E> {
    /// `a [m,k] × b [k,n] -> [m,n]`.
    pub fn matmul(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} × {:?}", sa, sb),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = mm(&a.data(), &b.data(), m, k, n);
        let out = Tensor::from_parts(vec![m, n], data);
        if self.is_recording() && (a.requires_grad() || b.requires_grad()) {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.record(&out, move || {
                let g = o.grad_or_zeros();
                if a.requires_grad() {
                    let da = mm_abt(&g, &b.data(), m, n, k);
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let db = mm_atb(&a.data(), &g, m, k, n);
                    b.accumulate_grad(&db);
                }
            });
        }
        Ok(out)
    }

    /// Fully-connected layer: `x [b,in] · wᵀ [in,out] + bias -> [b,out]`.
    pub fn linear(&self, x: &Tensor<E>, w: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
        let (sx, sw) = (x.shape(), w.shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || bias.numel() != sw[0] {
            return Err(Error::shape(
                "linear",
                format!("x {:?}, w {:?}, bias {:?}", sx, sw, bias.shape()),
            ));
        }
        let (b, i, o) = (sx[0], sx[1], sw[0]);
        let mut data = mm_abt(&x.data(), &w.data(), b, i, o);
        {
            let bd = bias.data();
            for r in 0..b {
                for (dj, bj) in data[r * o..(r + 1) * o].iter_mut().zip(bd.iter()) {
                    *dj += *bj;
                }
            }
        }
        let out = Tensor::from_parts(vec![b, o], data);
        if self.is_recording()
            && (x.requires_grad() || w.requires_grad() || bias.requires_grad())
        {
            let (x, w, bias_t, ot) = (x.clone(), w.clone(), bias.clone(), out.clone());
            self.record(&out, move || {
                let g = ot.grad_or_zeros();
                if x.requires_grad() {
                    let dx = mm(&g, &w.data(), b, o, i);
                    x.accumulate_grad(&dx);
                }
                if w.requires_grad() {
                    let dw = mm_atb(&g, &x.data(), b, o, i);
                    w.accumulate_grad(&dw);
                }
                if bias_t.requires_grad() {
                    let mut db = vec![E::zero(); o];
                    for r in 0..b {
                        for (dbj, gj) in db.iter_mut().zip(&g[r * o..(r + 1) * o]) {
                            *dbj += *gj;
                        }
                    }
                    bias_t.accumulate_grad(&db);
                }
            });
        }
        Ok(out)
    }
}

// Convolutions and pooling.
impl<E: Scalar> Tape<E> {
    /// `x [b,ci,h,w]` convolved with `weight [co,ci,kh,kw]`, no bias.
    pub fn conv2d(
        &self,
        x: &Tensor<E>,
        weight: &Tensor<E>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<E>> {
        let (sx, sw) = (x.shape(), weight.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} vs weight {:?}", sx, sw),
            ));
        }
        let (batch, ci, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, kh, kw) = (sw[0], sw[2], sw[3]);
        let oh = conv_out_dim(h, kh, stride, pad, 1).ok_or_else(|| {
            Error::shape("conv2d", format!("kernel {kh} too large for height {h} with pad {pad}"))
        })?;
        let ow = conv_out_dim(w, kw, stride, pad, 1).ok_or_else(|| {
            Error::shape("conv2d", format!("kernel {kw} too large for width {w} with pad {pad}"))
        })?;
        let ckk = ci * kh * kw;
        let plane = oh * ow;
        let mut data = vec![E::zero(); batch * co * plane];
        {
            let xd = x.data();
            let wd = weight.data();
            for b in 0..batch {
                let cols = im2col(&xd[b * ci * h * w..(b + 1) * ci * h * w], ci, h, w, kh, kw, stride, pad, 1);
                let out_img = mm(&wd, &cols, co, ckk, plane);
                data[b * co * plane..(b + 1) * co * plane].copy_from_slice(&out_img);
            }
        }
        let out = Tensor::from_parts(vec![batch, co, oh, ow], data);
        if self.is_recording() && (x.requires_grad() || weight.requires_grad()) {
            let (x, wt, o) = (x.clone(), weight.clone(), out.clone());
            self.record(&out, move || {
                let g = o.grad_or_zeros();
                let xd = x.data().to_vec();
                let wd = wt.data().to_vec();
                let mut dx = vec![E::zero(); xd.len()];
                let mut dw = vec![E::zero(); wd.len()];
                for b in 0..batch {
                    let gi = &g[b * co * plane..(b + 1) * co * plane];
                    // im2col is recomputed rather than saved from the forward.
                    let cols =
                        im2col(&xd[b * ci * h * w..(b + 1) * ci * h * w], ci, h, w, kh, kw, stride, pad, 1);
                    if wt.requires_grad() {
                        let dwi = mm_abt(gi, &cols, co, plane, ckk);
                        for (a, v) in dw.iter_mut().zip(dwi) {
                            *a += v;
                        }
                    }
                    if x.requires_grad() {
                        let gcols = mm_atb(&wd, gi, co, ckk, plane);
                        col2im(
                            &gcols,
                            &mut dx[b * ci * h * w..(b + 1) * ci * h * w],
                            ci,
                            h,
                            w,
                            kh,
                            kw,
                            stride,
                            pad,
                            1,
                        );
                    }
                }
                if x.requires_grad() {
                    x.accumulate_grad(&dx);
                }
                if wt.requires_grad() {
                    wt.accumulate_grad(&dw);
                }
            });
        }
        Ok(out)
    }

    /// Per-channel convolution: `x [b,c,h,w]` with `weight [c,kh,kw]`.
    pub fn depthwise_conv2d(
        &self,
        x: &Tensor<E>,
        weight: &Tensor<E>,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Result<Tensor<E>> {
        let (sx, sw) = (x.shape(), weight.shape());
        if sx.len() != 4 || sw.len() != 3 || sx[1] != sw[0] {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("input {:?} vs weight {:?}", sx, sw),
            ));
        }
        let (batch, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (kh, kw) = (sw[1], sw[2]);
        let oh = conv_out_dim(h, kh, stride, pad, dilation).ok_or_else(|| {
            Error::shape("depthwise_conv2d", format!("kernel {kh}x{kw} dil {dilation} too large for {h}x{w}"))
        })?;
        let ow = conv_out_dim(w, kw, stride, pad, dilation).ok_or_else(|| {
            Error::shape("depthwise_conv2d", format!("kernel {kw} too large for width {w}"))
        })?;
        let plane_in = h * w;
        let plane_out = oh * ow;
        let mut data = vec![E::zero(); batch * c * plane_out];
        {
            let xd = x.data();
            let wd = weight.data();
            for b in 0..batch {
                for ch in 0..c {
                    let xoff = (b * c + ch) * plane_in;
                    let ooff = (b * c + ch) * plane_out;
                    let kw_off = ch * kh * kw;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = E::zero();
                            for ky in 0..kh {
                                let y = (oy * stride + ky * dilation) as isize - pad as isize;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let xq = (ox * stride + kx * dilation) as isize - pad as isize;
                                    if xq < 0 || xq >= w as isize {
                                        continue;
                                    }
                                    acc += wd[kw_off + ky * kw + kx]
                                        * xd[xoff + y as usize * w + xq as usize];
                                }
                            }
                            data[ooff + oy * ow + ox] = acc;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![batch, c, oh, ow], data);
        if self.is_recording() && (x.requires_grad() || weight.requires_grad()) {
            let (x, wt, o) = (x.clone(), weight.clone(), out.clone());
            self.record(&out, move || {
                let g = o.grad_or_zeros();
                let xd = x.data().to_vec();
                let wd = wt.data().to_vec();
                let mut dx = vec![E::zero(); xd.len()];
                let mut dw = vec![E::zero(); wd.len()];
                for b in 0..batch {
                    for ch in 0..c {
                        let xoff = (b * c + ch) * plane_in;
                        let ooff = (b * c + ch) * plane_out;
                        let kw_off = ch * kh * kw;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gi = g[ooff + oy * ow + ox];
                                for ky in 0..kh {
                                    let y = (oy * stride + ky * dilation) as isize - pad as isize;
                                    if y < 0 || y >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let xq =
                                            (ox * stride + kx * dilation) as isize - pad as isize;
                                        if xq < 0 || xq >= w as isize {
                                            continue;
                                        }
                                        let xi = xoff + y as usize * w + xq as usize;
                                        dw[kw_off + ky * kw + kx] += gi * xd[xi];
                                        dx[xi] += gi * wd[kw_off + ky * kw + kx];
                                    }
                                }
                            }
                        }
                    }
                }
                if x.requires_grad() {
                    x.accumulate_grad(&dx);
                }
                if wt.requires_grad() {
                    wt.accumulate_grad(&dw);
                }
            });
        }
        Ok(out)
    }

    pub fn max_pool2d(
        &self,
        x: &Tensor<E>,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<E>> {
        let sx = x.shape();
        if sx.len() != 4 {
            return Err(Error::shape("max_pool2d", format!("input {:?}", sx)));
        }
        let (batch, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let oh = conv_out_dim(h, k, stride, pad, 1)
            .ok_or_else(|| Error::shape("max_pool2d", format!("window {k} too large for {h}x{w}")))?;
        let ow = conv_out_dim(w, k, stride, pad, 1).unwrap();
        let plane_out = oh * ow;
        let mut data = vec![E::zero(); batch * c * plane_out];
        let mut argmax = vec![0u32; batch * c * plane_out];
        {
            let xd = x.data();
            for bc in 0..batch * c {
                let xoff = bc * h * w;
                let ooff = bc * plane_out;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = E::neg_infinity();
                        let mut best_idx = 0usize;
                        for ky in 0..k {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let xq = (ox * stride + kx) as isize - pad as isize;
                                if xq < 0 || xq >= w as isize {
                                    continue;
                                }
                                let idx = y as usize * w + xq as usize;
                                let v = xd[xoff + idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                        data[ooff + oy * ow + ox] = best;
                        argmax[ooff + oy * ow + ox] = best_idx as u32;
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![batch, c, oh, ow], data);
        if self.is_recording() && x.requires_grad() {
            let (x, o) = (x.clone(), out.clone());
            self.record(&out, move || {
                let g = o.grad_or_zeros();
                let mut dx = vec![E::zero(); x.numel()];
                for bc in 0..batch * c {
                    let xoff = bc * h * w;
                    let ooff = bc * plane_out;
                    for p in 0..plane_out {
                        dx[xoff + argmax[ooff + p] as usize] += g[ooff + p];
                    }
                }
                x.accumulate_grad(&dx);
            });
        }
        Ok(out)
    }

    /// Average pooling; padding cells are excluded from the divisor.
    pub fn avg_pool2d(
        &self,
        x: &Tensor<E>,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<E>> {
        let sx = x.shape();
        if sx.len() != 4 {
            return Err(Error::shape("avg_pool2d", format!("input {:?}", sx)));
        }
        let (batch, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let oh = conv_out_dim(h, k, stride, pad, 1)
            .ok_or_else(|| Error::shape("avg_pool2d", format!("window {k} too large for {h}x{w}")))?;
        let ow = conv_out_dim(w, k, stride, pad, 1).unwrap();
        let plane_out = oh * ow;
        let mut data = vec![E::zero(); batch * c * plane_out];
        {
            let xd = x.data();
            for bc in 0..batch * c {
                let xoff = bc * h * w;
                let ooff = bc * plane_out;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = E::zero();
                        let mut count = 0usize;
                        for ky in 0..k {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let xq = (ox * stride + kx) as isize - pad as isize;
                                if xq < 0 || xq >= w as isize {
                                    continue;
                                }
                                acc += xd[xoff + y as usize * w + xq as usize];
                                count += 1;
                            }
                        }
                        data[ooff + oy * ow + ox] = acc / E::from_f64(count as f64);
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![batch, c, oh, ow], data);
        if self.is_recording() && x.requires_grad() {
            let (x, o) = (x.clone(), out.clone());
            self.record(&out, move || {
                let g = o.grad_or_zeros();
                let mut dx = vec![E::zero(); x.numel()];
                for bc in 0..batch * c {
                    let xoff = bc * h * w;
                    let ooff = bc * plane_out;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut count = 0usize;
                            for ky in 0..k {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let xq = (ox * stride + kx) as isize - pad as isize;
                                    if xq >= 0 && xq < w as isize {
                                        count += 1;
                                    }
                                }
                            }
                            let gi = g[ooff + oy * ow + ox] / E::from_f64(count as f64);
                            for ky in 0..k {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let xq = (ox * stride + kx) as isize - pad as isize;
                                    if xq < 0 || xq >= w as isize {
                                        continue;
                                    }
                                    dx[xoff + y as usize * w + xq as usize] += gi;
                                }
                            }
                        }
                    }
                }
                x.accumulate_grad(&dx);
            });
        }
        Ok(out)
    }

    /// `[b,c,h,w] -> [b,c]` spatial mean.
    pub fn global_avg_pool(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let sx = x.shape();
        if sx.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("input {:?}", sx)));
        }
        let (batch, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let plane = h * w;
        let inv = E::one() / E::from_f64(plane as f64);
        let mut data = vec![E::zero(); batch * c];
        {
            let xd = x.data();
            for bc in 0..batch * c {
                data[bc] = xd[bc * plane..(bc + 1) * plane].iter().copied().sum::<E>() * inv;
            }
        }
        let out = Tensor::from_parts(vec![batch, c], data);
        if self.is_recording() && x.requires_grad() {
            let (x, o) = (x.clone(), out.clone());
            self.record(&out, move || {
                let g = o.grad_or_zeros();
                let mut dx = vec![E::zero(); x.numel()];
                for bc in 0..batch * c {
                    let gi = g[bc] * inv;
                    for d in dx[bc * plane..(bc + 1) * plane].iter_mut() {
                        *d = gi;
                    }
                }
                x.accumulate_grad(&dx);
            });
        }
        Ok(out)
    }

    /// Drop the first row and column of each spatial plane (used by the
    /// offset path of factorized reduction).
    pub fn crop_tl(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let sx = x.shape();
        if sx.len() != 4 || sx[2] < 2 || sx[3] < 2 {
            return Err(Error::shape("crop_tl", format!("input {:?}", sx)));
        }
        let (batch, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (oh, ow) = (h - 1, w - 1);
        let mut data = vec![E::zero(); batch * c * oh * ow];
        {
            let xd = x.data();
            for bc in 0..batch * c {
                for y in 0..oh {
                    let src = bc * h * w + (y + 1) * w + 1;
                    let dst = bc * oh * ow + y * ow;
                    data[dst..dst + ow].copy_from_slice(&xd[src..src + ow]);
                }
            }
        }
        let out = Tensor::from_parts(vec![batch, c, oh, ow], data);
        if self.is_recording() && x.requires_grad() {
            let (x, o) = (x.clone(), out.clone());
            self.record(&out, move || {
                let g = o.grad_or_zeros();
                let mut dx = vec![E::zero(); x.numel()];
                for bc in 0..batch * c {
                    for y in 0..oh {
                        let dst = bc * h * w + (y + 1) * w + 1;
                        let src = bc * oh * ow + y * ow;
                        dx[dst..dst + ow].copy_from_slice(&g[src..src + ow]);
                    }
                }
                x.accumulate_grad(&dx);
            });
        }
        Ok(out)
    }

    /// Concatenate 4-d tensors along the channel axis.
    pub fn concat_channels(&self, parts: &[Tensor<E>]) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let first = parts[0].shape();
        if first.len() != 4 {
            return Err(Error::shape("concat", format!("input {:?}", first)));
        }
        let (batch, h, w) = (first[0], first[2], first[3]);
        let mut channels = Vec::with_capacity(parts.len());
        for (i, p) in parts.iter().enumerate() {
            let s = p.shape();
            if s.len() != 4 || s[0] != batch || s[2] != h || s[3] != w {
                return Err(Error::shape(
                    "concat",
                    format!("input {i} has shape {:?}, expected [{batch},_,{h},{w}]", s),
                ));
            }
            channels.push(s[1]);
        }
        let c_total: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = vec![E::zero(); batch * c_total * plane];
        for b in 0..batch {
            let mut c_off = 0usize;
            for (p, &c) in parts.iter().zip(&channels) {
                let pd = p.data();
                let src = &pd[b * c * plane..(b + 1) * c * plane];
                let dst_off = (b * c_total + c_off) * plane;
                data[dst_off..dst_off + c * plane].copy_from_slice(src);
                c_off += c;
            }
        }
        let out = Tensor::from_parts(vec![batch, c_total, h, w], data);
        if self.is_recording() && parts.iter().any(|p| p.requires_grad()) {
            let parts: Vec<Tensor<E>> = parts.to_vec();
            let o = out.clone();
            self.record(&out, move || {
                let g = o.grad_or_zeros();
                let mut c_off = 0usize;
                for (p, &c) in parts.iter().zip(&channels) {
                    if p.requires_grad() {
                        let mut delta = vec![E::zero(); batch * c * plane];
                        for b in 0..batch {
                            let src_off = (b * c_total + c_off) * plane;
                            delta[b * c * plane..(b + 1) * c * plane]
                                .copy_from_slice(&g[src_off..src_off + c * plane]);
                        }
                        p.accumulate_grad(&delta);
                    }
                    c_off += c;
                }
            });
        }
        Ok(out)
    }
}
