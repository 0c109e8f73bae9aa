//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations are recorded on a [`Tape`] as they execute. Each record keeps
//! the input variables and exactly the intermediates its backward rule
//! needs. [`Tape::backward`] walks the records in reverse execution order
//! and returns [`Gradients`] for every variable that requires a gradient,
//! leaves and intermediates alike (the attention map's gradient is read
//! from an intermediate).
//!
//! ```
//! use aal_core::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_vec([3], vec![1.0, -2.0, 0.5]).unwrap(), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, -4.0, 1.0]);
//! ```

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geometry: ConvGeometry,
    },
    ChannelPool {
        input: Var,
        argmax: Vec<u32>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul {
        a: Var,
        b: Var,
        broadcast_channels: bool,
    },
    Scale(Var, T),
    AddScalar(Var),
    ChannelAffine {
        input: Var,
        scale: Vec<T>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    GlobalAvgPool(Var),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelPool { .. } => "channel_pool",
            Op::MaxPool { .. } => "max_pool",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Add(..) => "add",
            Op::Mul { .. } => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::Linear { .. } => "linear",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Sum(_) => "sum",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    checked: bool,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape in checked mode: every op output is scanned for NaN/Inf.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: true,
            consumed: false,
        }
    }

    pub fn unchecked() -> Self {
        Self {
            checked: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.checked && !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Cross-correlation of `[N,C,H,W]` input with `[F,C,k,k]` weights.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("conv2d")?;
        let [f, wc, kh, kw] = self.value(weight).dims4("conv2d")?;
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("weight in-channels {wc} != input channels {c}"),
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be square with odd extent, got {kh}x{kw}"),
            ));
        }
        if self.value(bias).shape() != [f] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?} != [{f}]", self.value(bias).shape()),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        for (name, extent) in [("height", h), ("width", w)] {
            if extent + 2 * padding < kh || !(extent + 2 * padding - kh).is_multiple_of(stride) {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "{name} {extent} with padding {padding}, kernel {kh}, stride {stride} \
                         gives a non-integral output extent"
                    ),
                ));
            }
        }
        let geometry = ConvGeometry {
            batch: n,
            in_channels: c,
            out_channels: f,
            height: h,
            width: w,
            kernel: kh,
            stride,
            padding,
        };
        let (oh, ow) = (geometry.out_height(), geometry.out_width());
        let mut out = vec![T::zero(); n * f * oh * ow];
        kernels::conv2d_forward(
            &geometry,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &mut out,
        );
        let value = Tensor::from_vec([n, f, oh, ow], out)?;
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            },
            &[input, weight, bias],
        )
    }

    /// `[N,C,H,W] -> [N,2,H,W]`: channel mean, then channel max.
    pub fn channel_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("channel_pool")?;
        if c == 0 {
            return Err(Error::shape("channel_pool", "input has zero channels"));
        }
        let mut out = vec![T::zero(); n * 2 * h * w];
        let mut argmax = vec![0u32; n * h * w];
        kernels::channel_pool_forward(n, c, h * w, self.value(input).data(), &mut out, &mut argmax);
        let value = Tensor::from_vec([n, 2, h, w], out)?;
        self.push(value, Op::ChannelPool { input, argmax }, &[input])
    }

    /// 2x2 stride-2 max pooling (odd trailing rows/cols are dropped).
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("max_pool")?;
        if h < 2 || w < 2 {
            return Err(Error::shape("max_pool", format!("spatial size {h}x{w} below window")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        kernels::max_pool_forward(n * c, h, w, 2, self.value(input).data(), &mut out, &mut argmax);
        let value = Tensor::from_vec([n, c, oh, ow], out)?;
        self.push(value, Op::MaxPool { input, argmax }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(input), &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(sigmoid);
        self.push(value, Op::Sigmoid(input), &[input])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// Hadamard product. `b` may be `[N,1,H,W]` against `a` of `[N,C,H,W]`,
    /// in which case it is broadcast across channels.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let value = av.zip_map(bv, |x, y| x * y)?;
            return self.push(
                value,
                Op::Mul {
                    a,
                    b,
                    broadcast_channels: false,
                },
                &[a, b],
            );
        }
        let [n, c, h, w] = av.dims4("mul")?;
        if bv.shape() != [n, 1, h, w] {
            return Err(Error::shape(
                "mul",
                format!("cannot broadcast {:?} against {:?}", bv.shape(), av.shape()),
            ));
        }
        let plane = h * w;
        let mut out = av.data().to_vec();
        for s in 0..n {
            let m = &bv.data()[s * plane..][..plane];
            for ch in 0..c {
                let dst = &mut out[(s * c + ch) * plane..][..plane];
                for (d, &mv) in dst.iter_mut().zip(m) {
                    *d = *d * mv;
                }
            }
        }
        let value = Tensor::from_vec([n, c, h, w], out)?;
        self.push(
            value,
            Op::Mul {
                a,
                b,
                broadcast_channels: true,
            },
            &[a, b],
        )
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let value = self.value(input).map(|v| v * factor);
        self.push(value, Op::Scale(input, factor), &[input])
    }

    pub fn add_scalar(&mut self, input: Var, offset: T) -> Result<Var> {
        let value = self.value(input).map(|v| v + offset);
        self.push(value, Op::AddScalar(input), &[input])
    }

    /// Per-channel `x * scale[c] + shift[c]` with constant coefficients.
    pub fn channel_affine(&mut self, input: Var, scale: &[T], shift: &[T]) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("channel_affine")?;
        if scale.len() != c || shift.len() != c {
            return Err(Error::shape(
                "channel_affine",
                format!("{c} channels but {} scales / {} shifts", scale.len(), shift.len()),
            ));
        }
        let plane = h * w;
        let mut out = self.value(input).data().to_vec();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let ch = i % c;
            for v in chunk {
                *v = *v * scale[ch] + shift[ch];
            }
        }
        let value = Tensor::from_vec([n, c, h, w], out)?;
        self.push(
            value,
            Op::ChannelAffine {
                input,
                scale: scale.to_vec(),
            },
            &[input],
        )
    }

    /// `[N,D] x [O,D]^T + [O] -> [N,O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(input).shape(),
            self.value(weight).shape(),
            self.value(bias).shape(),
        );
        let (&[n, d], &[o, wd], &[bo]) = (xs, ws, bs) else {
            return Err(Error::shape(
                "linear",
                format!("expected [N,D], [O,D], [O]; got {xs:?}, {ws:?}, {bs:?}"),
            ));
        };
        if wd != d || bo != o {
            return Err(Error::shape(
                "linear",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?} disagree"),
            ));
        }
        let mut out = vec![T::zero(); n * o];
        kernels::linear_forward(
            n,
            d,
            o,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &mut out,
        );
        let value = Tensor::from_vec([n, o], out)?;
        self.push(value, Op::Linear { input, weight, bias }, &[input, weight, bias])
    }

    /// `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("global_avg_pool")?;
        let plane = h * w;
        let inv = T::one() / T::from_f64(plane as f64);
        let out = self
            .value(input)
            .data()
            .chunks(plane)
            .map(|p| p.iter().fold(T::zero(), |a, &b| a + b) * inv)
            .collect();
        let value = Tensor::from_vec([n, c], out)?;
        self.push(value, Op::GlobalAvgPool(input), &[input])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(input).sum());
        self.push(value, Op::Sum(input), &[input])
    }

    /// Mean cross-entropy over the batch of `[N,K]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let &[n, k] = self.value(logits).shape() else {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("expected [N,K] logits, got {:?}", self.value(logits).shape()),
            ));
        };
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for batch of {n}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        let z = self.value(logits).data();
        let total = labels
            .iter()
            .enumerate()
            .fold(T::zero(), |acc, (r, &l)| acc + kernels::cross_entropy_row(&z[r * k..][..k], l));
        let loss = total / T::from_f64(n as f64);
        let probs = kernels::softmax_rows(n, k, z);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Propagates gradients from a scalar `loss` back through the tape.
    ///
    /// May be called once per tape; a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.clone()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_shape, T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if self.checked && !g.all_finite() {
                return Err(Error::NonFinite { op: node.op.name() });
            }
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            } => {
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                // Three distinct slots; take them out to borrow mutably at once.
                let mut gi = self.grad_slot(*input, grads);
                let mut gw = self.grad_slot(*weight, grads);
                let mut gb = self.grad_slot(*bias, grads);
                kernels::conv2d_backward(
                    geometry,
                    x,
                    w,
                    gd,
                    gi.as_mut().map(|t| t.data_mut()),
                    gw.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                self.restore(*input, gi, grads);
                self.restore(*weight, gw, grads);
                self.restore(*bias, gb, grads);
            }
            Op::ChannelPool { input, argmax } => {
                if let Some(mut gi) = self.grad_slot(*input, grads) {
                    let [n, c, h, w] = self.value(*input).dims4("channel_pool")?;
                    let plane = h * w;
                    let inv = T::one() / T::from_f64(c as f64);
                    let gid = gi.data_mut();
                    for s in 0..n {
                        let gmean = &gd[s * 2 * plane..][..plane];
                        let gmax = &gd[(s * 2 + 1) * plane..][..plane];
                        let arg = &argmax[s * plane..][..plane];
                        for ch in 0..c {
                            let dst = &mut gid[(s * c + ch) * plane..][..plane];
                            for p in 0..plane {
                                let hit = if arg[p] as usize == ch { gmax[p] } else { T::zero() };
                                dst[p] = dst[p] + (gmean[p] * inv + hit);
                            }
                        }
                    }
                    self.restore(*input, Some(gi), grads);
                }
            }
            Op::MaxPool { input, argmax } => {
                if let Some(mut gi) = self.grad_slot(*input, grads) {
                    let gid = gi.data_mut();
                    for (o, &src) in argmax.iter().enumerate() {
                        gid[src as usize] = gid[src as usize] + gd[o];
                    }
                    self.restore(*input, Some(gi), grads);
                }
            }
            Op::Relu(input) => {
                self.accumulate_zip(*input, grads, gd, out.data(), |gv, y| {
                    if y > T::zero() {
                        gv
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Sigmoid(input) => {
                self.accumulate_zip(*input, grads, gd, out.data(), |gv, y| gv * y * (T::one() - y));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(v, grads, |dst| {
                        for (d, &gv) in dst.iter_mut().zip(gd) {
                            *d = *d + gv;
                        }
                    });
                }
            }
            Op::Mul {
                a,
                b,
                broadcast_channels,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if !broadcast_channels {
                    self.accumulate_zip(*a, grads, gd, bv.data(), |gv, y| gv * y);
                    self.accumulate_zip(*b, grads, gd, av.data(), |gv, x| gv * x);
                } else {
                    let [n, c, h, w] = av.dims4("mul")?;
                    let plane = h * w;
                    self.accumulate(*a, grads, |dst| {
                        for s in 0..n {
                            let m = &bv.data()[s * plane..][..plane];
                            for ch in 0..c {
                                let off = (s * c + ch) * plane;
                                for p in 0..plane {
                                    dst[off + p] = dst[off + p] + gd[off + p] * m[p];
                                }
                            }
                        }
                    });
                    self.accumulate(*b, grads, |dst| {
                        for s in 0..n {
                            for ch in 0..c {
                                let off = (s * c + ch) * plane;
                                for p in 0..plane {
                                    dst[s * plane + p] =
                                        dst[s * plane + p] + gd[off + p] * av.data()[off + p];
                                }
                            }
                        }
                    });
                }
            }
            Op::Scale(input, factor) => {
                self.accumulate(*input, grads, |dst| {
                    for (d, &gv) in dst.iter_mut().zip(gd) {
                        *d = *d + gv * *factor;
                    }
                });
            }
            Op::AddScalar(input) => {
                self.accumulate(*input, grads, |dst| {
                    for (d, &gv) in dst.iter_mut().zip(gd) {
                        *d = *d + gv;
                    }
                });
            }
            Op::ChannelAffine { input, scale } => {
                let [_, c, h, w] = self.value(*input).dims4("channel_affine")?;
                let plane = h * w;
                self.accumulate(*input, grads, |dst| {
                    for (i, (dchunk, gchunk)) in dst.chunks_mut(plane).zip(gd.chunks(plane)).enumerate() {
                        let sc = scale[i % c];
                        for (d, &gv) in dchunk.iter_mut().zip(gchunk) {
                            *d = *d + gv * sc;
                        }
                    }
                });
            }
            Op::Linear { input, weight, bias } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let &[n, d] = x.shape() else { unreachable!() };
                let o = w.shape()[0];
                self.accumulate(*input, grads, |dst| {
                    for r in 0..n {
                        for j in 0..o {
                            let gv = gd[r * o + j];
                            let wr = &w.data()[j * d..][..d];
                            for (dd, &wv) in dst[r * d..][..d].iter_mut().zip(wr) {
                                *dd = *dd + gv * wv;
                            }
                        }
                    }
                });
                self.accumulate(*weight, grads, |dst| {
                    for r in 0..n {
                        let xr = &x.data()[r * d..][..d];
                        for j in 0..o {
                            let gv = gd[r * o + j];
                            for (dd, &xv) in dst[j * d..][..d].iter_mut().zip(xr) {
                                *dd = *dd + gv * xv;
                            }
                        }
                    }
                });
                self.accumulate(*bias, grads, |dst| {
                    for r in 0..n {
                        for j in 0..o {
                            dst[j] = dst[j] + gd[r * o + j];
                        }
                    }
                });
            }
            Op::GlobalAvgPool(input) => {
                let [_, _, h, w] = self.value(*input).dims4("global_avg_pool")?;
                let plane = h * w;
                let inv = T::one() / T::from_f64(plane as f64);
                self.accumulate(*input, grads, |dst| {
                    for (chunk, &gv) in dst.chunks_mut(plane).zip(gd) {
                        for d in chunk {
                            *d = *d + gv * inv;
                        }
                    }
                });
            }
            Op::Sum(input) => {
                let gv = gd[0];
                self.accumulate(*input, grads, |dst| {
                    for d in dst {
                        *d = *d + gv;
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n.max(1);
                let scale = gd[0] / T::from_f64(n as f64);
                self.accumulate(*logits, grads, |dst| {
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..k {
                            let mut p = probs[r * k + j];
                            if j == l {
                                p = p - T::one();
                            }
                            dst[r * k + j] = dst[r * k + j] + scale * p;
                        }
                    }
                });
            }
        }
        Ok(())
    }

    fn grad_slot(&self, v: Var, grads: &mut [Option<Tensor<T>>]) -> Option<Tensor<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(
            grads[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape().to_vec())),
        )
    }

    fn restore(&self, v: Var, slot: Option<Tensor<T>>, grads: &mut [Option<Tensor<T>>]) {
        if slot.is_some() {
            grads[v.0] = slot;
        }
    }

    /// Adds `f(g[i], aux[i])` into `v`'s gradient, building it directly when
    /// nothing has been accumulated yet.
    fn accumulate_zip(
        &self,
        v: Var,
        grads: &mut [Option<Tensor<T>>],
        g: &[T],
        aux: &[T],
        f: impl Fn(T, T) -> T,
    ) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match grads[v.0].as_mut() {
            Some(slot) => {
                for ((d, &gv), &a) in slot.data_mut().iter_mut().zip(g).zip(aux) {
                    *d = *d + f(gv, a);
                }
            }
            None => {
                let data = g.iter().zip(aux).map(|(&gv, &a)| f(gv, a)).collect();
                let shape = self.nodes[v.0].value.shape().to_vec();
                grads[v.0] = Some(Tensor::from_vec(shape, data).expect("gradient matches value shape"));
            }
        }
    }

    fn accumulate(&self, v: Var, grads: &mut [Option<Tensor<T>>], f: impl FnOnce(&mut [T])) {
        if let Some(mut slot) = self.grad_slot(v, grads) {
            f(slot.data_mut());
            grads[v.0] = Some(slot);
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    // Branch keeps exp() from overflowing for large |v|.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn wrt(&self, v: Var) -> Result<&Tensor<T>> {
        self.get(v).ok_or_else(|| {
            Error::InvalidArgument(format!("no gradient recorded for variable {}", v.0))
        })
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
