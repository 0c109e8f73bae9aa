//! Raw numeric kernels behind the taped operations.
//!
//! Every reduction runs in a fixed sequential order, so results are
//! bit-identical across runs. Layouts are row-major `[N, C, H, W]`.

use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Output positions `o` whose input coordinate `o*stride + tap - padding`
    /// falls inside `[0, extent)`.
    fn valid_range(&self, tap: usize, extent: usize, out_extent: usize) -> std::ops::Range<usize> {
        let s = self.stride;
        let lo = if self.padding > tap {
            (self.padding - tap).div_ceil(s)
        } else {
            0
        };
        // largest o with o*s + tap - padding <= extent - 1
        let hi = if extent + self.padding > tap {
            ((extent - 1 + self.padding - tap) / s + 1).min(out_extent)
        } else {
            0
        };
        lo..hi.max(lo)
    }
}

/// Unfolds one sample into `col[(c·k + ki)·k + kj][oh·ow_n + ow]`, with
/// zeros where the window hangs over the padding.
fn im2col<T: Scalar>(g: &ConvGeometry, src: &[T], col: &mut [T]) {
    let (oh_n, ow_n) = (g.out_height(), g.out_width());
    let (h, w, k, s) = (g.height, g.width, g.kernel, g.stride);
    let out_plane = oh_n * ow_n;
    for c in 0..g.in_channels {
        let plane = &src[c * h * w..][..h * w];
        for ki in 0..k {
            let rows = g.valid_range(ki, h, oh_n);
            for kj in 0..k {
                let cols = g.valid_range(kj, w, ow_n);
                let dst = &mut col[((c * k + ki) * k + kj) * out_plane..][..out_plane];
                dst.fill(T::zero());
                for oh in rows.clone() {
                    let ih = oh * s + ki - g.padding;
                    let src_row = &plane[ih * w..][..w];
                    let dst_row = &mut dst[oh * ow_n..][..ow_n];
                    if s == 1 {
                        let start = cols.start + kj - g.padding;
                        dst_row[cols.clone()].copy_from_slice(&src_row[start..start + cols.len()]);
                    } else {
                        for ow in cols.clone() {
                            dst_row[ow] = src_row[ow * s + kj - g.padding];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into image layout.
fn col2im<T: Scalar>(g: &ConvGeometry, col: &[T], dst: &mut [T]) {
    let (oh_n, ow_n) = (g.out_height(), g.out_width());
    let (h, w, k, s) = (g.height, g.width, g.kernel, g.stride);
    let out_plane = oh_n * ow_n;
    for c in 0..g.in_channels {
        let plane = &mut dst[c * h * w..][..h * w];
        for ki in 0..k {
            let rows = g.valid_range(ki, h, oh_n);
            for kj in 0..k {
                let cols = g.valid_range(kj, w, ow_n);
                let src = &col[((c * k + ki) * k + kj) * out_plane..][..out_plane];
                for oh in rows.clone() {
                    let ih = oh * s + ki - g.padding;
                    let dst_row = &mut plane[ih * w..][..w];
                    let src_row = &src[oh * ow_n..][..ow_n];
                    for ow in cols.clone() {
                        let iw = ow * s + kj - g.padding;
                        dst_row[iw] = dst_row[iw] + src_row[ow];
                    }
                }
            }
        }
    }
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// Bounds-checked `C ← α·A·B + β·C`; strides are `(row, col)` pairs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    (m, k, n): (usize, usize, usize),
    alpha: T,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
    (rsc, csc): (usize, usize),
) {
    assert!(span(m, k, rsa, csa) <= a.len(), "gemm: A out of bounds");
    assert!(span(k, n, rsb, csb) <= b.len(), "gemm: B out of bounds");
    assert!(span(m, n, rsc, csc) <= c.len(), "gemm: C out of bounds");
    // SAFETY: the assertions above keep every strided access in bounds.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        )
    }
}

/// Output channels below which a stride-1 convolution skips the unfolded
/// GEMM and runs direct shifted-row loops.
const DIRECT_MAX_FILTERS: usize = 2;

fn use_direct(g: &ConvGeometry) -> bool {
    g.stride == 1 && g.out_channels <= DIRECT_MAX_FILTERS
}

/// Visits every `(filter, channel, ki, kj, oh)` row pairing of a stride-1
/// convolution as `(out_offset, in_offset, len, weight_index)`, where the
/// slices start at the first valid column.
fn for_each_row(g: &ConvGeometry, mut visit: impl FnMut(usize, usize, usize, usize, usize)) {
    let (oh_n, ow_n) = (g.out_height(), g.out_width());
    let (h, w, k) = (g.height, g.width, g.kernel);
    for f in 0..g.out_channels {
        for c in 0..g.in_channels {
            for ki in 0..k {
                let rows = g.valid_range(ki, h, oh_n);
                for kj in 0..k {
                    let cols = g.valid_range(kj, w, ow_n);
                    let wi = (f * g.in_channels + c) * k * k + ki * k + kj;
                    for oh in rows.clone() {
                        let ih = oh + ki - g.padding;
                        let out_off = (f * oh_n + oh) * ow_n + cols.start;
                        let in_off = (c * h + ih) * w + cols.start + kj - g.padding;
                        visit(f, out_off, in_off, cols.len(), wi);
                    }
                }
            }
        }
    }
}

fn direct_forward<T: Scalar>(g: &ConvGeometry, input: &[T], weight: &[T], bias: &[T], out: &mut [T]) {
    let p = g.out_height() * g.out_width();
    let f = g.out_channels;
    let in_sample = g.in_channels * g.height * g.width;
    for n in 0..g.batch {
        let src = &input[n * in_sample..][..in_sample];
        let dst = &mut out[n * f * p..][..f * p];
        for (row, &b) in dst.chunks_exact_mut(p).zip(bias) {
            row.fill(b);
        }
        for_each_row(g, |_, o, i, len, wi| {
            let wv = weight[wi];
            for (d, &x) in dst[o..o + len].iter_mut().zip(&src[i..i + len]) {
                *d = *d + wv * x;
            }
        });
    }
}

fn direct_backward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    mut grad_input: Option<&mut [T]>,
    mut grad_weight: Option<&mut [T]>,
) {
    let p = g.out_height() * g.out_width();
    let f = g.out_channels;
    let in_sample = g.in_channels * g.height * g.width;
    for n in 0..g.batch {
        let src = &input[n * in_sample..][..in_sample];
        let go = &grad_out[n * f * p..][..f * p];
        if let Some(gw) = grad_weight.as_deref_mut() {
            for_each_row(g, |_, o, i, len, wi| {
                gw[wi] = gw[wi] + dot(&go[o..o + len], &src[i..i + len]);
            });
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            let gi = &mut gi[n * in_sample..][..in_sample];
            for_each_row(g, |_, o, i, len, wi| {
                let wv = weight[wi];
                for (d, &v) in gi[i..i + len].iter_mut().zip(&go[o..o + len]) {
                    *d = *d + wv * v;
                }
            });
        }
    }
}

/// Dot product with eight interleaved partial sums combined in a fixed
/// order.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `out = conv(input, weight) + bias`, cross-correlation with zero padding.
pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    bias: &[T],
    out: &mut [T],
) {
    let p = g.out_height() * g.out_width();
    let in_sample = g.in_channels * g.height * g.width;
    let taps = g.in_channels * g.kernel * g.kernel;
    let f = g.out_channels;
    if use_direct(g) {
        return direct_forward(g, input, weight, bias, out);
    }
    let mut col = vec![T::zero(); taps * p];
    for n in 0..g.batch {
        im2col(g, &input[n * in_sample..][..in_sample], &mut col);
        let dst = &mut out[n * f * p..][..f * p];
        for (row, &b) in dst.chunks_exact_mut(p).zip(bias) {
            row.fill(b);
        }
        gemm((f, taps, p), T::one(), weight, (taps, 1), &col, (p, 1), T::one(), dst, (p, 1));
    }
}

/// Accumulates input, weight and bias gradients. Any of the outputs may be
/// skipped by passing `None`.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    mut grad_input: Option<&mut [T]>,
    mut grad_weight: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let p = g.out_height() * g.out_width();
    let in_sample = g.in_channels * g.height * g.width;
    let taps = g.in_channels * g.kernel * g.kernel;
    let f = g.out_channels;

    if let Some(gb) = grad_bias {
        for n in 0..g.batch {
            for (ch, go) in grad_out[n * f * p..][..f * p].chunks_exact(p).enumerate() {
                gb[ch] = gb[ch] + go.iter().fold(T::zero(), |acc, &v| acc + v);
            }
        }
    }
    if grad_input.is_none() && grad_weight.is_none() {
        return;
    }
    if use_direct(g) {
        return direct_backward(g, input, weight, grad_out, grad_input, grad_weight);
    }

    let mut col = vec![T::zero(); taps * p];
    for n in 0..g.batch {
        let go = &grad_out[n * f * p..][..f * p];
        if let Some(gw) = grad_weight.as_deref_mut() {
            im2col(g, &input[n * in_sample..][..in_sample], &mut col);
            // gW[F, taps] += gO[F, P] · colᵀ[P, taps]
            gemm((f, p, taps), T::one(), go, (p, 1), &col, (1, p), T::one(), gw, (taps, 1));
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            // gcol[taps, P] = Wᵀ[taps, F] · gO[F, P]
            gemm((taps, f, p), T::one(), weight, (1, taps), go, (p, 1), T::zero(), &mut col, (p, 1));
            col2im(g, &col, &mut gi[n * in_sample..][..in_sample]);
        }
    }
}

/// Per-pixel channel mean and max. `argmax` receives the lowest channel
/// index attaining the max.
pub fn channel_pool_forward<T: Scalar>(
    batch: usize,
    channels: usize,
    plane: usize,
    input: &[T],
    out: &mut [T],
    argmax: &mut [u32],
) {
    let inv = T::one() / T::from_f64(channels as f64);
    for n in 0..batch {
        let base = n * channels * plane;
        let (mean, max) = out[n * 2 * plane..(n + 1) * 2 * plane].split_at_mut(plane);
        let arg = &mut argmax[n * plane..(n + 1) * plane];
        mean.copy_from_slice(&input[base..base + plane]);
        max.copy_from_slice(&input[base..base + plane]);
        arg.fill(0);
        for c in 1..channels {
            let src = &input[base + c * plane..][..plane];
            for p in 0..plane {
                let v = src[p];
                mean[p] = mean[p] + v;
                if v > max[p] {
                    max[p] = v;
                    arg[p] = c as u32;
                }
            }
        }
        for m in mean.iter_mut() {
            *m = *m * inv;
        }
    }
}

/// Non-overlapping max pooling with square window `size`; ties go to the
/// lowest linear index inside the window.
pub fn max_pool_forward<T: Scalar>(
    planes: usize,
    height: usize,
    width: usize,
    size: usize,
    input: &[T],
    out: &mut [T],
    argmax: &mut [u32],
) {
    let (oh_n, ow_n) = (height / size, width / size);
    if size == 2 {
        return max_pool2_forward(planes, height, width, input, out, argmax);
    }
    for p in 0..planes {
        let src = &input[p * height * width..][..height * width];
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                let mut best = (oh * size) * width + ow * size;
                for di in 0..size {
                    for dj in 0..size {
                        let idx = (oh * size + di) * width + ow * size + dj;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                let o = p * oh_n * ow_n + oh * ow_n + ow;
                out[o] = src[best];
                argmax[o] = (p * height * width + best) as u32;
            }
        }
    }
}

fn max_pool2_forward<T: Scalar>(
    planes: usize,
    height: usize,
    width: usize,
    input: &[T],
    out: &mut [T],
    argmax: &mut [u32],
) {
    let (oh_n, ow_n) = (height / 2, width / 2);
    for p in 0..planes {
        let base = p * height * width;
        for oh in 0..oh_n {
            let top = &input[base + 2 * oh * width..][..width];
            let bot = &input[base + (2 * oh + 1) * width..][..width];
            let o = p * oh_n * ow_n + oh * ow_n;
            let (out_row, arg_row) = (&mut out[o..][..ow_n], &mut argmax[o..][..ow_n]);
            for ow in 0..ow_n {
                let j = 2 * ow;
                // Same scan order as the generic path: strict `>` keeps the first max.
                let (mut best, mut at) = (top[j], j);
                if top[j + 1] > best {
                    (best, at) = (top[j + 1], j + 1);
                }
                if bot[j] > best {
                    (best, at) = (bot[j], width + j);
                }
                if bot[j + 1] > best {
                    (best, at) = (bot[j + 1], width + j + 1);
                }
                out_row[ow] = best;
                arg_row[ow] = (base + 2 * oh * width + at) as u32;
            }
        }
    }
}

/// `out[n, o] = bias[o] + sum_d input[n, d] * weight[o, d]`.
pub fn linear_forward<T: Scalar>(
    batch: usize,
    in_dim: usize,
    out_dim: usize,
    input: &[T],
    weight: &[T],
    bias: &[T],
    out: &mut [T],
) {
    for n in 0..batch {
        let x = &input[n * in_dim..][..in_dim];
        for o in 0..out_dim {
            let wr = &weight[o * in_dim..][..in_dim];
            let dot = x.iter().zip(wr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            out[n * out_dim + o] = bias[o] + dot;
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(rows: usize, cols: usize, logits: &[T]) -> Vec<T> {
    let mut probs = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let z = &logits[r * cols..][..cols];
        let m = z.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let p = &mut probs[r * cols..][..cols];
        let mut total = T::zero();
        for (pi, &zi) in p.iter_mut().zip(z) {
            *pi = (zi - m).exp();
            total = total + *pi;
        }
        for pi in p.iter_mut() {
            *pi = *pi / total;
        }
    }
    probs
}

/// Numerically stable `-log softmax(z)[label]`.
pub fn cross_entropy_row<T: Scalar>(z: &[T], label: usize) -> T {
    let m = z.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let lse = z.iter().fold(T::zero(), |acc, &v| acc + (v - m).exp()).ln() + m;
    lse - z[label]
}
