//! Hand-written forward and backward passes for each layer primitive.
//!
//! Convolution and pooling work on a single example laid out `[C, H, W]`;
//! the model loops them over a batch. Dense layers accept either `[N]` or a
//! batch `[B, N]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero fill so that the output is `ceil(H / stride)` high.
    Same,
    /// No fill; output is `floor((H - kH) / stride) + 1` high.
    Valid,
}

/// Resolved sizes of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeometry {
    pub fn new(
        input: [usize; 3],
        kernels: [usize; 4],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let [cin, h, w] = input;
        let [cout, kcin, kh, kw] = kernels;
        if kcin != cin {
            return Err(Error::Dimension(format!(
                "input has {cin} channels but kernels expect {kcin}"
            )));
        }
        if stride == 0 {
            return Err(Error::Input("stride must be at least 1".into()));
        }
        if kh == 0 || kw == 0 || cout == 0 {
            return Err(Error::Dimension("empty kernel".into()));
        }
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::Dimension(format!(
                        "same padding needs odd kernel sides, got {kh}x{kw}"
                    )));
                }
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let ph = ((oh - 1) * stride + kh).saturating_sub(h);
                let pw = ((ow - 1) * stride + kw).saturating_sub(w);
                (oh, ow, ph / 2, pw / 2)
            }
            Padding::Valid => {
                if h < kh || w < kw {
                    return Err(Error::Dimension(format!(
                        "{kh}x{kw} kernel does not fit a {h}x{w} input without padding"
                    )));
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
        };
        Ok(ConvGeometry {
            in_channels: cin,
            in_h: h,
            in_w: w,
            out_channels: cout,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source coordinate for output row/col `o` and kernel offset `k`, if inside the image.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, pad: usize, size: usize) -> Option<usize> {
        let s = (o * stride + k).checked_sub(pad)?;
        (s < size).then_some(s)
    }

    /// Unfolds the input into a `[patch_len, positions]` matrix.
    fn im2col<T: Scalar>(&self, input: &[T]) -> Vec<T> {
        let positions = self.positions();
        let mut cols = vec![T::zero(); self.patch_len() * positions];
        for c in 0..self.in_channels {
            let plane = &input[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    let dst = &mut cols[row * positions..(row + 1) * positions];
                    for oy in 0..self.out_h {
                        let Some(sy) = Self::source(oy, ky, self.stride, self.pad_top, self.in_h)
                        else {
                            continue;
                        };
                        let src_row = &plane[sy * self.in_w..(sy + 1) * self.in_w];
                        let dst_row = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            if let Some(sx) =
                                Self::source(ox, kx, self.stride, self.pad_left, self.in_w)
                            {
                                *d = src_row[sx];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Folds a `[patch_len, positions]` gradient back onto the input grid.
    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let positions = self.positions();
        let mut out = vec![T::zero(); self.in_channels * self.in_h * self.in_w];
        for c in 0..self.in_channels {
            let plane = &mut out[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    let src = &cols[row * positions..(row + 1) * positions];
                    for oy in 0..self.out_h {
                        let Some(sy) = Self::source(oy, ky, self.stride, self.pad_top, self.in_h)
                        else {
                            continue;
                        };
                        for ox in 0..self.out_w {
                            if let Some(sx) =
                                Self::source(ox, kx, self.stride, self.pad_left, self.in_w)
                            {
                                let d = &mut plane[sy * self.in_w + sx];
                                *d = *d + src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn dims3<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<[usize; 3]> {
    t.expect_rank(3, what)?;
    let s = t.shape();
    Ok([s[0], s[1], s[2]])
}

fn dims4<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    t.expect_rank(4, what)?;
    let s = t.shape();
    Ok([s[0], s[1], s[2], s[3]])
}

/// Cross-correlation of `[Cin, H, W]` with `[Cout, Cin, kH, kW]` kernels plus a per-channel bias.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let geo = ConvGeometry::new(
        dims3(input, "conv2d input")?,
        dims4(kernels, "conv2d kernels")?,
        stride,
        padding,
    )?;
    bias.expect_shape(&[geo.out_channels])?;
    let positions = geo.positions();
    let cols = geo.im2col(input.data());
    let mut out = vec![T::zero(); geo.out_channels * positions];
    for (c, &b) in bias.data().iter().enumerate() {
        out[c * positions..(c + 1) * positions].fill(b);
    }
    gemm(
        T::one(),
        MatRef::row_major(kernels.data(), geo.out_channels, geo.patch_len()),
        MatRef::row_major(&cols, geo.patch_len(), positions),
        T::one(),
        &mut out,
    );
    Tensor::new(vec![geo.out_channels, geo.out_h, geo.out_w], out)
}

/// Gradients of one convolution; members are `None` when they were not requested.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub d_input: Option<Tensor<T>>,
    pub d_kernels: Option<Tensor<T>>,
    pub d_bias: Option<Tensor<T>>,
}

/// Returns `(dInput, dKernels, dBias)` for one example.
pub fn conv2d_backward<T: Scalar>(
    d_out: &Tensor<T>,
    cached_input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = conv2d_backward_parts(d_out, cached_input, kernels, stride, padding, true, true)?;
    match (g.d_input, g.d_kernels, g.d_bias) {
        (Some(a), Some(b), Some(c)) => Ok((a, b, c)),
        _ => unreachable!("all gradients were requested"),
    }
}

pub(crate) fn conv2d_backward_parts<T: Scalar>(
    d_out: &Tensor<T>,
    cached_input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    padding: Padding,
    want_input: bool,
    want_params: bool,
) -> Result<ConvGrads<T>> {
    let geo = ConvGeometry::new(
        dims3(cached_input, "conv2d input")?,
        dims4(kernels, "conv2d kernels")?,
        stride,
        padding,
    )?;
    d_out.expect_shape(&[geo.out_channels, geo.out_h, geo.out_w])?;
    let positions = geo.positions();
    let patch = geo.patch_len();
    let dy = MatRef::row_major(d_out.data(), geo.out_channels, positions);

    let (d_kernels, d_bias) = if want_params {
        let cols = geo.im2col(cached_input.data());
        let mut dk = vec![T::zero(); geo.out_channels * patch];
        gemm(
            T::one(),
            dy,
            MatRef::row_major(&cols, patch, positions).t(),
            T::zero(),
            &mut dk,
        );
        let db: Vec<T> = (0..geo.out_channels)
            .map(|c| d_out.data()[c * positions..(c + 1) * positions].iter().copied().sum())
            .collect();
        (
            Some(Tensor::new(kernels.shape().to_vec(), dk)?),
            Some(Tensor::new(vec![geo.out_channels], db)?),
        )
    } else {
        (None, None)
    };

    let d_input = if want_input {
        let mut dcols = vec![T::zero(); patch * positions];
        gemm(
            T::one(),
            MatRef::row_major(kernels.data(), geo.out_channels, patch).t(),
            dy,
            T::zero(),
            &mut dcols,
        );
        Some(Tensor::new(cached_input.shape().to_vec(), geo.col2im(&dcols))?)
    } else {
        None
    };

    Ok(ConvGrads {
        d_input,
        d_kernels,
        d_bias,
    })
}

/// Flat input index chosen by each output cell of a 2x2 max-pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolSwitches {
    pub indices: Vec<usize>,
}

/// Non-overlapping 2x2 max-pool; ties go to the first element in row-major order.
pub fn maxpool2_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolSwitches)> {
    let [c, h, w] = dims3(input, "max-pool input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "2x2 max-pool needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut indices = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                indices.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, PoolSwitches { indices }))
}

/// Routes each upstream value to the input element its switch selected.
pub fn maxpool2_backward<T: Scalar>(
    d_out: &Tensor<T>,
    switches: &PoolSwitches,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let &[c, h, w] = input_shape else {
        return Err(Error::Dimension(format!(
            "max-pool input shape must be rank 3, got {input_shape:?}"
        )));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "2x2 max-pool needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    d_out.expect_shape(&[c, oh, ow])?;
    if switches.indices.len() != d_out.len() {
        return Err(Error::Internal(format!(
            "{} switches for {} pooled cells",
            switches.indices.len(),
            d_out.len()
        )));
    }
    let mut dx = vec![T::zero(); c * h * w];
    for (cell, (&idx, &g)) in switches.indices.iter().zip(d_out.data()).enumerate() {
        let ch = cell / (oh * ow);
        let oy = (cell / ow) % oh;
        let ox = cell % ow;
        let top = ch * h * w + 2 * oy * w + 2 * ox;
        if ![top, top + 1, top + w, top + w + 1].contains(&idx) {
            return Err(Error::Internal(format!(
                "switch {idx} lies outside the 2x2 window of pooled cell {cell}"
            )));
        }
        dx[idx] = dx[idx] + g;
    }
    Tensor::new(input_shape.to_vec(), dx)
}

// Output units handled per gemm call. Fixed so that the sequential and the
// parallel paths perform identical arithmetic.
const DENSE_CHUNK: usize = 128;
const DENSE_ROW_CHUNK: usize = 8;

fn dense_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize)> {
    w.expect_rank(2, "dense weights")?;
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let batch = match x.shape() {
        [len] if *len == n => 1,
        [b, len] if *len == n => *b,
        other => {
            return Err(Error::Dimension(format!(
                "dense layer with {n} inputs cannot take shape {other:?}"
            )))
        }
    };
    Ok((batch, m, n))
}

/// `y = W x + b` for `x` of shape `[N]` or `[B, N]`.
pub fn dense_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, m, n) = dense_dims(x, w)?;
    b.expect_shape(&[m])?;
    let chunks = m.div_ceil(DENSE_CHUNK);
    let parts = exec::map_indexed(chunks, |ci| {
        let m0 = ci * DENSE_CHUNK;
        let mc = DENSE_CHUNK.min(m - m0);
        let mut part = vec![T::zero(); batch * mc];
        gemm(
            T::one(),
            MatRef::row_major(x.data(), batch, n),
            MatRef::row_major(&w.data()[m0 * n..(m0 + mc) * n], mc, n).t(),
            T::zero(),
            &mut part,
        );
        part
    });
    let mut y = vec![T::zero(); batch * m];
    for (ci, part) in parts.iter().enumerate() {
        let m0 = ci * DENSE_CHUNK;
        let mc = DENSE_CHUNK.min(m - m0);
        for r in 0..batch {
            for j in 0..mc {
                y[r * m + m0 + j] = part[r * mc + j] + b.data()[m0 + j];
            }
        }
    }
    let shape = if x.ndim() == 1 { vec![m] } else { vec![batch, m] };
    Tensor::new(shape, y)
}

/// Returns `(dX, dW, dB)`; batched inputs sum their weight gradients over the batch.
pub fn dense_backward<T: Scalar>(
    d_out: &Tensor<T>,
    cached_x: &Tensor<T>,
    w: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (dx, dw, db) = dense_backward_parts(d_out, cached_x, w, true, true)?;
    Ok((dx.unwrap(), dw.unwrap(), db.unwrap()))
}

#[allow(clippy::type_complexity)]
pub(crate) fn dense_backward_parts<T: Scalar>(
    d_out: &Tensor<T>,
    cached_x: &Tensor<T>,
    w: &Tensor<T>,
    want_input: bool,
    want_params: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (batch, m, n) = dense_dims(cached_x, w)?;
    let expected: Vec<usize> = if cached_x.ndim() == 1 { vec![m] } else { vec![batch, m] };
    d_out.expect_shape(&expected)?;
    let dy = d_out.data();

    let d_input = if want_input {
        let chunks = batch.div_ceil(DENSE_ROW_CHUNK);
        let parts = exec::map_indexed(chunks, |ci| {
            let r0 = ci * DENSE_ROW_CHUNK;
            let rc = DENSE_ROW_CHUNK.min(batch - r0);
            let mut part = vec![T::zero(); rc * n];
            gemm(
                T::one(),
                MatRef::row_major(&dy[r0 * m..(r0 + rc) * m], rc, m),
                MatRef::row_major(w.data(), m, n),
                T::zero(),
                &mut part,
            );
            part
        });
        Some(Tensor::new(cached_x.shape().to_vec(), parts.concat())?)
    } else {
        None
    };

    let (d_w, d_b) = if want_params {
        let chunks = m.div_ceil(DENSE_CHUNK);
        let parts = exec::map_indexed(chunks, |ci| {
            let m0 = ci * DENSE_CHUNK;
            let mc = DENSE_CHUNK.min(m - m0);
            let mut part = vec![T::zero(); mc * n];
            // dY[:, m0..m0+mc] transposed, read in place with strides.
            let dy_cols = MatRef {
                data: &dy[m0..],
                rows: mc,
                cols: batch,
                rs: 1,
                cs: m,
            };
            gemm(
                T::one(),
                dy_cols,
                MatRef::row_major(cached_x.data(), batch, n),
                T::zero(),
                &mut part,
            );
            part
        });
        let mut db = vec![T::zero(); m];
        for r in 0..batch {
            for (j, acc) in db.iter_mut().enumerate() {
                *acc = *acc + dy[r * m + j];
            }
        }
        (
            Some(Tensor::new(vec![m, n], parts.concat())?),
            Some(Tensor::new(vec![m], db)?),
        )
    } else {
        (None, None)
    };
    Ok((d_input, d_w, d_b))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `d_out` where the cached input was strictly positive.
pub fn relu_backward<T: Scalar>(d_out: &Tensor<T>, cached_x: &Tensor<T>) -> Result<Tensor<T>> {
    d_out.zip_map(cached_x, |g, x| if x > T::zero() { g } else { T::zero() })
}

/// Max-subtracted softmax of a slice.
pub(crate) fn softmax_slice<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn log_sum_exp<T: Scalar>(logits: &[T]) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    max + logits.iter().map(|&l| (l - max).exp()).sum::<T>().ln()
}

/// Softmax over a `[K]` vector, or row-wise over `[B, K]`.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = *logits.shape().last().unwrap();
    let mut out = Vec::with_capacity(logits.len());
    if k > 0 {
        for row in logits.data().chunks(k) {
            out.extend(softmax_slice(row));
        }
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}

/// Sparse categorical cross-entropy for one `[K]` logit vector.
///
/// Returns `-log softmax(logits)[label]` and its gradient `softmax - onehot`.
pub fn scce_loss_and_grad<T: Scalar>(logits: &Tensor<T>, label: usize) -> Result<(T, Tensor<T>)> {
    logits.expect_rank(1, "cross-entropy")?;
    let k = logits.len();
    if label >= k {
        return Err(Error::Input(format!("label {label} outside 0..{k}")));
    }
    let (loss, grad) = scce_slice(logits.data(), label);
    Ok((loss, Tensor::new(vec![k], grad)?))
}

pub(crate) fn scce_slice<T: Scalar>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let loss = log_sum_exp(logits) - logits[label];
    let mut grad = softmax_slice(logits);
    grad[label] = grad[label] - T::one();
    (loss, grad)
}

/// Inverted dropout. Returns the output and, when any element was actually
/// dropped or rescaled, the multiplier mask used by [`dropout_backward`].
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    rate: f32,
    rng: &mut R,
    training: bool,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Input(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = T::from_f64(1.0 / (1.0 - rate as f64));
    let mask = Tensor::from_fn(x.shape().to_vec(), |_| {
        if rng.gen::<f32>() < rate {
            T::zero()
        } else {
            keep
        }
    });
    let out = x.zip_map(&mask, |a, m| a * m)?;
    Ok((out, Some(mask)))
}

pub fn dropout_backward<T: Scalar>(d_out: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    match mask {
        Some(m) => d_out.zip_map(m, |g, m| g * m),
        None => Ok(d_out.clone()),
    }
}
