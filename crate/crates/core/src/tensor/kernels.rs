//! Value-level kernels. The tape wraps these and adds gradient rules; they
//! are also usable directly on plain tensors.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Pointwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Relu,
    Softplus { beta: f64 },
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::LeakyRelu(slope) => {
                if x >= T::zero() {
                    x
                } else {
                    x * T::lit(slope)
                }
            }
            Activation::Relu => x.max(T::zero()),
            Activation::Softplus { beta } => {
                let b = T::lit(beta);
                (b * x).softplus() / b
            }
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative at input `x` with output `y = apply(x)`.
    #[inline]
    pub fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Activation::LeakyRelu(slope) => {
                if x >= T::zero() {
                    T::one()
                } else {
                    T::lit(slope)
                }
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Softplus { beta } => sigmoid(T::lit(beta) * x),
            Activation::Sigmoid => y * (T::one() - y),
        }
    }

    /// Derivative recovered from the output alone; every supported kind is
    /// monotone so the output determines the input's branch.
    #[inline]
    pub fn derivative_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::LeakyRelu(slope) => {
                if y >= T::zero() {
                    T::one()
                } else {
                    T::lit(slope)
                }
            }
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            // sigmoid(beta x) = 1 - exp(-beta * softplus(x))
            Activation::Softplus { beta } => T::one() - (-(T::lit(beta) * y)).exp_nonpos(),
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

impl Activation {
    /// `g * f'(x)` from the outputs `y`, with the kind dispatched once per
    /// slice rather than per element.
    pub(crate) fn backprop_from_output<T: Real>(self, g: &[T], y: &[T]) -> Vec<T> {
        fn run<T: Real>(g: &[T], y: &[T], d: impl Fn(T) -> T) -> Vec<T> {
            g.iter().zip(y).map(|(&gv, &yv)| gv * d(yv)).collect()
        }
        match self {
            Activation::Softplus { beta } if beta == 1.0 => run(g, y, |v| T::one() - (-v).exp_nonpos()),
            Activation::LeakyRelu(slope) => {
                let s = T::lit(slope);
                run(g, y, |v| if v >= T::zero() { T::one() } else { s })
            }
            kind => run(g, y, |v| kind.derivative_from_output(v)),
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Real>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

/// `c (m x n) = a (m x k) * b (k x n)`, all row-major.
pub(crate) fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, (k as isize, 1), b, (n as isize, 1), beta, c, (n as isize, 1));
}

/// `c (m x n) = a (m x k) * b^T` where `b` is stored `n x k`.
pub(crate) fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, (k as isize, 1), b, (1, k as isize), beta, c, (n as isize, 1));
}

/// `c (m x n) = a^T * b` where `a` is stored `k x m` and `b` is `k x n`.
pub(crate) fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, (1, m as isize), b, (n as isize, 1), beta, c, (n as isize, 1));
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_nn(m, k, n, a.data(), b.data(), &mut out, false);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Geometry of a 2-D convolution over `[B, C, H, W]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    /// Channels on the spatial side that is `im2col`-unrolled.
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }
    fn out_px(&self) -> usize {
        self.ho * self.wo
    }
    fn in_px(&self) -> usize {
        self.h * self.w
    }
}

fn conv_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

fn kernel_dims<T: Real>(kernel: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match kernel.shape() {
        &[a, b, kh, kw] if kh == kw => Ok((a, b, kh)),
        s => Err(Error::dim(format!("kernel must be [A, B, k, k], got {s:?}"))),
    }
}

fn image_dims<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match x.shape() {
        &[b, c, h, w] => Ok((b, c, h, w)),
        &[c, h, w] => Ok((1, c, h, w)),
        s => Err(Error::dim(format!("image tensor must be [B, C, H, W] or [C, H, W], got {s:?}"))),
    }
}

pub(crate) fn conv2d_geom<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (batch, c, h, w) = image_dims(x)?;
    let (c_out, c_in, k) = kernel_dims(kernel)?;
    if c != c_in {
        return Err(Error::dim(format!("conv2d: input has {c} channels, kernel expects {c_in}")));
    }
    match (conv_out_extent(h, k, stride, pad), conv_out_extent(w, k, stride, pad)) {
        (Some(ho), Some(wo)) if ho >= 1 && wo >= 1 => Ok(ConvGeom { batch, c_in, c_out, h, w, k, stride, pad, ho, wo }),
        _ => Err(Error::dim(format!(
            "conv2d: non-positive output extent for {h}x{w}, k={k}, stride={stride}, padding={pad}"
        ))),
    }
}

pub(crate) fn conv_transpose2d_geom<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let (batch, c, ho, wo) = image_dims(x)?;
    let (c_out, c_in, k) = kernel_dims(kernel)?;
    if c != c_out {
        return Err(Error::dim(format!(
            "conv_transpose2d: input has {c} channels, kernel expects {c_out}"
        )));
    }
    if stride == 0 {
        return Err(Error::dim("conv_transpose2d: zero stride"));
    }
    let extent = |n: usize| -> Option<usize> {
        let full = (n - 1) * stride + k;
        full.checked_sub(2 * pad).filter(|&e| e >= 1)
    };
    let (h, w) = match (extent(ho), extent(wo)) {
        (Some(h), Some(w)) => (h, w),
        _ => {
            return Err(Error::dim(format!(
                "conv_transpose2d: non-positive output extent for {ho}x{wo}, k={k}, stride={stride}, padding={pad}"
            )))
        }
    };
    // the forward conv of the output must land back on the input grid
    if conv_out_extent(h, k, stride, pad) != Some(ho) || conv_out_extent(w, k, stride, pad) != Some(wo) {
        return Err(Error::dim("conv_transpose2d: inconsistent extents"));
    }
    Ok(ConvGeom { batch, c_in, c_out, h, w, k, stride, pad, ho, wo })
}

/// Unrolls one `[c_in, h, w]` image into `[c_in * k * k, ho * wo]` columns.
fn im2col<T: Real>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let opx = g.out_px();
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * opx..(row + 1) * opx];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &img[c * g.in_px() + iy as usize * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto an image, accumulating.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let opx = g.out_px();
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * opx..(row + 1) * opx];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut img[c * g.in_px() + iy as usize * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution: `[B, c_in, h, w] -> [B, c_out, ho, wo]`.
pub(crate) fn conv_forward<T: Real>(g: &ConvGeom, x: &[T], kernel: &[T], out: &mut [T]) {
    let mut cols = vec![T::zero(); g.col_rows() * g.out_px()];
    for b in 0..g.batch {
        im2col(g, &x[b * g.c_in * g.in_px()..][..g.c_in * g.in_px()], &mut cols);
        let o = &mut out[b * g.c_out * g.out_px()..][..g.c_out * g.out_px()];
        gemm_nn(g.c_out, g.col_rows(), g.out_px(), kernel, &cols, o, false);
    }
}

/// Adjoint of [`conv_forward`] in its input: `[B, c_out, ho, wo] -> [B, c_in, h, w]`, accumulated.
pub(crate) fn conv_backward_data<T: Real>(g: &ConvGeom, dy: &[T], kernel: &[T], dx: &mut [T]) {
    let mut cols = vec![T::zero(); g.col_rows() * g.out_px()];
    for b in 0..g.batch {
        let dyb = &dy[b * g.c_out * g.out_px()..][..g.c_out * g.out_px()];
        gemm_tn(g.col_rows(), g.c_out, g.out_px(), kernel, dyb, &mut cols, false);
        col2im(g, &cols, &mut dx[b * g.c_in * g.in_px()..][..g.c_in * g.in_px()]);
    }
}

/// Kernel gradient of [`conv_forward`], accumulated into `dk`.
pub(crate) fn conv_backward_kernel<T: Real>(g: &ConvGeom, x: &[T], dy: &[T], dk: &mut [T]) {
    let mut cols = vec![T::zero(); g.col_rows() * g.out_px()];
    for b in 0..g.batch {
        im2col(g, &x[b * g.c_in * g.in_px()..][..g.c_in * g.in_px()], &mut cols);
        let dyb = &dy[b * g.c_out * g.out_px()..][..g.c_out * g.out_px()];
        gemm_nt(g.c_out, g.out_px(), g.col_rows(), dyb, &cols, dk, true);
    }
}

fn with_batch_shape(batched: bool, shape: Vec<usize>) -> Vec<usize> {
    if batched {
        shape
    } else {
        shape[1..].to_vec()
    }
}

pub fn conv2d<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let g = conv2d_geom(x, kernel, stride, padding)?;
    let mut out = vec![T::zero(); g.batch * g.c_out * g.out_px()];
    conv_forward(&g, x.data(), kernel.data(), &mut out);
    let shape = with_batch_shape(x.rank() == 4, vec![g.batch, g.c_out, g.ho, g.wo]);
    Ok(Tensor::from_parts(shape, out))
}

pub fn conv_transpose2d<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let g = conv_transpose2d_geom(x, kernel, stride, padding)?;
    let mut out = vec![T::zero(); g.batch * g.c_in * g.in_px()];
    conv_backward_data(&g, x.data(), kernel.data(), &mut out);
    let shape = with_batch_shape(x.rank() == 4, vec![g.batch, g.c_in, g.h, g.w]);
    Ok(Tensor::from_parts(shape, out))
}

/// Per-channel running statistics of a batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Train mode normalizes with batch statistics and folds them into the
/// running estimates; eval mode uses the running estimates as-is.
pub enum BnMode<'a, T> {
    Train { running: &'a mut RunningStats<T>, momentum: T },
    Eval { running: &'a RunningStats<T> },
}

/// Channel layout of a batch-norm input.
///
/// `[N, C]` tensors carry channels last (one sample per row); tensors of rank
/// 3 or more are `[B, C, ...]` with channels second.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct BnLayout {
    pub outer: usize,
    pub channels: usize,
    pub inner: usize,
}

impl BnLayout {
    pub fn of(shape: &[usize]) -> Result<Self> {
        match shape {
            &[n, c] => Ok(BnLayout { outer: n, channels: c, inner: 1 }),
            s if s.len() >= 3 => Ok(BnLayout {
                outer: s[0],
                channels: s[1],
                inner: s[2..].iter().product(),
            }),
            s => Err(Error::dim(format!("batch_norm needs rank >= 2, got {s:?}"))),
        }
    }

    pub fn count(&self) -> usize {
        self.outer * self.inner
    }

    /// Visits `(channel, flat index)` for every element.
    #[inline]
    pub fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        if self.inner == 1 {
            for o in 0..self.outer {
                for c in 0..self.channels {
                    f(c, o * self.channels + c);
                }
            }
        } else {
            for o in 0..self.outer {
                for c in 0..self.channels {
                    let base = (o * self.channels + c) * self.inner;
                    for i in 0..self.inner {
                        f(c, base + i);
                    }
                }
            }
        }
    }
}

/// Batch statistics (biased variance) per channel.
pub(crate) fn channel_stats<T: Real>(layout: &BnLayout, x: &[T]) -> (Vec<T>, Vec<T>) {
    let c = layout.channels;
    let n = T::from_usize(layout.count()).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    if layout.inner == 1 {
        for row in x.chunks_exact(c) {
            mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for row in x.chunks_exact(c) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
    } else {
        layout.for_each(|ch, i| mean[ch] += x[i]);
        mean.iter_mut().for_each(|m| *m /= n);
        layout.for_each(|ch, i| {
            let d = x[i] - mean[ch];
            var[ch] += d * d;
        });
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

/// `out = act(x * mul[c] + add[c])` per channel `c`.
pub(crate) fn channel_affine<T: Real>(layout: &BnLayout, x: &[T], mul: &[T], add: &[T], act: Option<Activation>, out: &mut [T]) {
    match act {
        Some(Activation::Softplus { beta }) if beta == 1.0 => channel_map(layout, x, mul, add, |v| v.softplus(), out),
        Some(Activation::LeakyRelu(slope)) => {
            let s = T::lit(slope);
            channel_map(layout, x, mul, add, |v| if v >= T::zero() { v } else { v * s }, out)
        }
        Some(a) => channel_map(layout, x, mul, add, |v| a.apply(v), out),
        None => channel_map(layout, x, mul, add, |v| v, out),
    }
}

fn channel_map<T: Real>(layout: &BnLayout, x: &[T], mul: &[T], add: &[T], f: impl Fn(T) -> T, out: &mut [T]) {
    if layout.inner == 1 {
        let c = layout.channels;
        for (o, row) in out.chunks_exact_mut(c).zip(x.chunks_exact(c)) {
            for (((o, &v), &m), &a) in o.iter_mut().zip(row).zip(mul).zip(add) {
                *o = f(v * m + a);
            }
        }
    } else {
        layout.for_each(|c, i| out[i] = f(x[i] * mul[c] + add[c]));
    }
}

/// Per-channel sums of `dy` and `dy * (x - mean)`.
pub(crate) fn channel_grad_sums<T: Real>(layout: &BnLayout, x: &[T], mean: &[T], dy: &[T]) -> (Vec<T>, Vec<T>) {
    let c = layout.channels;
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dyx = vec![T::zero(); c];
    if layout.inner == 1 {
        for (xr, gr) in x.chunks_exact(c).zip(dy.chunks_exact(c)) {
            for ((((s, t), &v), &g), &m) in sum_dy.iter_mut().zip(sum_dyx.iter_mut()).zip(xr).zip(gr).zip(mean) {
                *s += g;
                *t += g * (v - m);
            }
        }
    } else {
        layout.for_each(|ch, i| {
            sum_dy[ch] += dy[i];
            sum_dyx[ch] += dy[i] * (x[i] - mean[ch]);
        });
    }
    (sum_dy, sum_dyx)
}

/// `dx += a[c] * dy + b[c] * x + d[c]` per channel `c`.
pub(crate) fn channel_accumulate<T: Real>(layout: &BnLayout, dx: &mut [T], dy: &[T], x: &[T], coef: [&[T]; 3]) {
    let [a, b, d] = coef;
    if layout.inner == 1 {
        let c = layout.channels;
        for ((o, gr), xr) in dx.chunks_exact_mut(c).zip(dy.chunks_exact(c)).zip(x.chunks_exact(c)) {
            for j in 0..c.min(o.len()).min(gr.len()).min(xr.len()).min(a.len()).min(b.len()).min(d.len()) {
                o[j] += a[j] * gr[j] + b[j] * xr[j] + d[j];
            }
        }
    } else {
        layout.for_each(|ch, i| dx[i] += a[ch] * dy[i] + b[ch] * x[i] + d[ch]);
    }
}

/// Mean and inverse standard deviation used to normalize, updating running
/// statistics in train mode.
pub(crate) fn bn_normalizer<T: Real>(layout: &BnLayout, x: &[T], mode: BnMode<'_, T>, eps: T) -> Result<(Vec<T>, Vec<T>, bool)> {
    let c = layout.channels;
    match mode {
        BnMode::Train { running, momentum } => {
            if running.channels() != c {
                return Err(Error::dim(format!("running stats have {} channels, input has {c}", running.channels())));
            }
            let (mean, var) = channel_stats(layout, x);
            let n = layout.count();
            let unbias = if n > 1 { T::from_usize(n).unwrap() / T::from_usize(n - 1).unwrap() } else { T::one() };
            for ch in 0..c {
                running.mean[ch] = (T::one() - momentum) * running.mean[ch] + momentum * mean[ch];
                running.var[ch] = (T::one() - momentum) * running.var[ch] + momentum * var[ch] * unbias;
            }
            let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            Ok((mean, inv_std, true))
        }
        BnMode::Eval { running } => {
            if running.channels() != c {
                return Err(Error::dim(format!("running stats have {} channels, input has {c}", running.channels())));
            }
            let inv_std = running.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            Ok((running.mean.clone(), inv_std, false))
        }
    }
}

pub fn batch_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mode: BnMode<'_, T>,
    eps: T,
) -> Result<Tensor<T>> {
    let layout = BnLayout::of(x.shape())?;
    if gamma.len() != layout.channels || beta.len() != layout.channels {
        return Err(Error::dim("batch_norm: scale/shift length differs from channel count"));
    }
    let (mean, inv_std, _) = bn_normalizer(&layout, x.data(), mode, eps)?;
    let (g, b) = (gamma.data(), beta.data());
    let mut out = x.data().to_vec();
    layout.for_each(|ch, i| out[i] = (x.data()[i] - mean[ch]) * inv_std[ch] * g[ch] + b[ch]);
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Rows whose norm falls below this map to the last unit axis.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Unit-normalizes each row; degenerate rows become `(0, .., 0, 1)`.
pub fn normalize_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, d) = x.dims2()?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let norm = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
        if norm < T::lit(DEGENERATE_NORM) {
            row.iter_mut().for_each(|v| *v = T::zero());
            row[d - 1] = T::one();
        } else {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}
