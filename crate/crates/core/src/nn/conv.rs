//! 2-D convolution and its adjoint (transposed convolution) via im2col + GEMM.
//!
//! Padding is "same" style: `(k - 1) / 2` pixels on each side. A transposed
//! convolution is defined as the exact adjoint of [`conv2d`] built from the
//! same kernel and padding mode, so `<conv(x), y> == <tconv(y), x>` holds for
//! both reflect and zero padding.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaddingMode {
    /// Mirror without repeating the edge sample: `.., 2, 1 | 0, 1, 2, ..`
    Reflect,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding_mode: PaddingMode,
    pub transposed: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, k: usize, padding_mode: PaddingMode) -> Self {
        Self { in_channels, out_channels, kernel: (k, k), stride: 1, padding_mode, transposed: false }
    }

    pub fn transposed(in_channels: usize, out_channels: usize, k: usize, padding_mode: PaddingMode) -> Self {
        Self { transposed: true, ..Self::new(in_channels, out_channels, k, padding_mode) }
    }

    pub fn padding(&self) -> (usize, usize) {
        ((self.kernel.0 - 1) / 2, (self.kernel.1 - 1) / 2)
    }

    /// `(out, in, kh, kw)` for convolutions, `(in, out, kh, kw)` when transposed.
    pub fn weight_shape(&self) -> [usize; 4] {
        let (kh, kw) = self.kernel;
        if self.transposed {
            [self.in_channels, self.out_channels, kh, kw]
        } else {
            [self.out_channels, self.in_channels, kh, kw]
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride < 1 {
            return Err(Error::InvalidSpec("stride must be at least 1".into()));
        }
        if self.transposed && self.stride != 1 {
            return Err(Error::InvalidSpec("transposed convolution supports stride 1 only".into()));
        }
        let (kh, kw) = self.kernel;
        if kh == 0 || kw == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidSpec(format!("kernel {kh}x{kw} must have odd extents")));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidSpec("channel counts must be positive".into()));
        }
        Ok(())
    }

    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let (ph, pw) = self.padding();
        let (kh, kw) = self.kernel;
        ((h + 2 * ph - kh) / self.stride + 1, (w + 2 * pw - kw) / self.stride + 1)
    }
}

/// Source index for padded position `i` (may be negative or `>= n`).
#[inline]
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

#[inline]
fn source_index(i: isize, n: usize, mode: PaddingMode) -> Option<usize> {
    if i >= 0 && (i as usize) < n {
        return Some(i as usize);
    }
    match mode {
        PaddingMode::Reflect => Some(reflect_index(i, n)),
        PaddingMode::Zero => None,
    }
}

/// Pads one `(c, h, w)` item.
fn pad_item<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, ph: usize, pw: usize, mode: PaddingMode) -> Vec<T> {
    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
    let mut out = vec![T::zero(); c * hp * wp];
    let cols: Vec<Option<usize>> = (0..wp).map(|j| source_index(j as isize - pw as isize, w, mode)).collect();
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * hp * wp..(ci + 1) * hp * wp];
        for i in 0..hp {
            let Some(si) = source_index(i as isize - ph as isize, h, mode) else { continue };
            let srow = &src[si * w..(si + 1) * w];
            let drow = &mut dst[i * wp..(i + 1) * wp];
            for (d, sj) in drow.iter_mut().zip(&cols) {
                if let Some(sj) = sj {
                    *d = srow[*sj];
                }
            }
        }
    }
    out
}

/// Adjoint of [`pad_item`]: folds padded gradients back onto their sources.
fn unpad_item_adjoint<T: Scalar>(
    gp: &[T],
    c: usize,
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
    mode: PaddingMode,
    out: &mut [T],
) {
    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
    let cols: Vec<Option<usize>> = (0..wp).map(|j| source_index(j as isize - pw as isize, w, mode)).collect();
    for ci in 0..c {
        let src = &gp[ci * hp * wp..(ci + 1) * hp * wp];
        let dst = &mut out[ci * h * w..(ci + 1) * h * w];
        for i in 0..hp {
            let Some(si) = source_index(i as isize - ph as isize, h, mode) else { continue };
            let srow = &src[i * wp..(i + 1) * wp];
            let drow = &mut dst[si * w..(si + 1) * w];
            for (&g, sj) in srow.iter().zip(&cols) {
                if let Some(sj) = sj {
                    drow[*sj] += g;
                }
            }
        }
    }
}

/// `(c*kh*kw, oh*ow)` patch matrix of a padded `(c, hp, wp)` item.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    xp: &[T],
    c: usize,
    hp: usize,
    wp: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut cols = vec![T::zero(); c * kh * kw * oh * ow];
    let mut row = 0;
    for ci in 0..c {
        let plane = &xp[ci * hp * wp..(ci + 1) * hp * wp];
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let sy = oy * stride + ky;
                    let srow = &plane[sy * wp..(sy + 1) * wp];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        drow.copy_from_slice(&srow[kx..kx + ow]);
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            *d = srow[ox * stride + kx];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`], accumulating into a padded `(c, hp, wp)` buffer.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    hp: usize,
    wp: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut xp = vec![T::zero(); c * hp * wp];
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut xp[ci * hp * wp..(ci + 1) * hp * wp];
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let sy = oy * stride + ky;
                    let prow = &mut plane[sy * wp..(sy + 1) * wp];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in srow.iter().enumerate() {
                        prow[ox * stride + kx] += v;
                    }
                }
                row += 1;
            }
        }
    }
    xp
}

fn check_weight<T: Scalar>(weight: &Tensor<T>, bias: &Tensor<T>, spec: &ConvSpec) -> Result<()> {
    spec.validate()?;
    if weight.shape() != spec.weight_shape() {
        return Err(Error::Shape(format!(
            "weight shape {:?} does not match expected {:?}",
            weight.shape(),
            spec.weight_shape()
        )));
    }
    if bias.len() != spec.out_channels {
        return Err(Error::Shape(format!(
            "bias has {} entries, expected {}",
            bias.len(),
            spec.out_channels
        )));
    }
    Ok(())
}

fn check_input<T: Scalar>(input: &Tensor<T>, channels: usize, spec: &ConvSpec) -> Result<()> {
    if input.c() != channels {
        return Err(Error::Shape(format!(
            "input has {} channels, layer expects {}",
            input.c(),
            channels
        )));
    }
    let (kh, kw) = spec.kernel;
    let (ph, pw) = spec.padding();
    if input.h() + 2 * ph < kh || input.w() + 2 * pw < kw {
        return Err(Error::Shape(format!(
            "input {}x{} too small for {}x{} kernel",
            input.h(),
            input.w(),
            kh,
            kw
        )));
    }
    Ok(())
}

/// Gradients of a convolution (or transposed convolution) layer.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Cross-correlation with "same" padding. Weight `(out, in, kh, kw)`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    if spec.transposed {
        return Err(Error::InvalidSpec("conv2d called with a transposed spec".into()));
    }
    check_weight(weight, bias, spec)?;
    check_input(input, spec.in_channels, spec)?;
    let [n, c, h, w] = input.shape();
    let (kh, kw) = spec.kernel;
    let (ph, pw) = spec.padding();
    let (oh, ow) = spec.out_size(h, w);
    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
    let ckk = c * kh * kw;
    let o = spec.out_channels;
    let mut out = Tensor::zeros([n, o, oh, ow]);
    for ni in 0..n {
        let xp = pad_item(input.item(ni), c, h, w, ph, pw, spec.padding_mode);
        let cols = im2col(&xp, c, hp, wp, kh, kw, spec.stride, oh, ow);
        let dst = out.item_mut(ni);
        for (oc, plane) in dst.chunks_mut(oh * ow).enumerate() {
            plane.iter_mut().for_each(|v| *v = bias.data()[oc]);
        }
        T::gemm(o, ckk, oh * ow, T::one(), weight.data(), ckk as isize, 1, &cols, (oh * ow) as isize, 1, T::one(), dst, (oh * ow) as isize, 1);
    }
    Ok(out)
}

/// Backward pass of [`conv2d`] given the output gradient.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    grad_output: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let [n, c, h, w] = input.shape();
    let (kh, kw) = spec.kernel;
    let (ph, pw) = spec.padding();
    let (oh, ow) = spec.out_size(h, w);
    if grad_output.shape() != [n, spec.out_channels, oh, ow] {
        return Err(Error::Shape(format!(
            "output gradient {:?} does not match forward output {:?}",
            grad_output.shape(),
            [n, spec.out_channels, oh, ow]
        )));
    }
    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
    let ckk = c * kh * kw;
    let o = spec.out_channels;
    let hw = oh * ow;
    let mut gi = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros([1, 1, 1, o]);
    for ni in 0..n {
        let go = grad_output.item(ni);
        let xp = pad_item(input.item(ni), c, h, w, ph, pw, spec.padding_mode);
        let cols = im2col(&xp, c, hp, wp, kh, kw, spec.stride, oh, ow);
        // dW += dY (o x hw) * cols^T (hw x ckk)
        T::gemm(o, hw, ckk, T::one(), go, hw as isize, 1, &cols, 1, hw as isize, T::one(), gw.data_mut(), ckk as isize, 1);
        for (oc, plane) in go.chunks(hw).enumerate() {
            gb.data_mut()[oc] += plane.iter().copied().sum::<T>();
        }
        // dcols = W^T (ckk x o) * dY (o x hw)
        let mut dcols = vec![T::zero(); ckk * hw];
        T::gemm(ckk, o, hw, T::one(), weight.data(), 1, ckk as isize, go, hw as isize, 1, T::zero(), &mut dcols, hw as isize, 1);
        let gp = col2im(&dcols, c, hp, wp, kh, kw, spec.stride, oh, ow);
        unpad_item_adjoint(&gp, c, h, w, ph, pw, spec.padding_mode, gi.item_mut(ni));
    }
    Ok(ConvGrads { input: gi, weight: gw, bias: gb })
}

/// Adjoint of [`conv2d`] with the same kernel, plus a bias.
/// Weight `(in, out, kh, kw)`, stride 1, spatial size preserved.
pub fn transposed_conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    if !spec.transposed {
        return Err(Error::InvalidSpec("transposed_conv2d needs a transposed spec".into()));
    }
    check_weight(weight, bias, spec)?;
    check_input(input, spec.in_channels, spec)?;
    let [n, ci, h, w] = input.shape();
    let co = spec.out_channels;
    let (kh, kw) = spec.kernel;
    let (ph, pw) = spec.padding();
    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
    let okk = co * kh * kw;
    let hw = h * w;
    let mut out = Tensor::zeros([n, co, h, w]);
    for ni in 0..n {
        // dcols = W^T (okk x ci) * y (ci x hw)
        let mut dcols = vec![T::zero(); okk * hw];
        T::gemm(okk, ci, hw, T::one(), weight.data(), 1, okk as isize, input.item(ni), hw as isize, 1, T::zero(), &mut dcols, hw as isize, 1);
        let gp = col2im(&dcols, co, hp, wp, kh, kw, 1, h, w);
        let dst = out.item_mut(ni);
        unpad_item_adjoint(&gp, co, h, w, ph, pw, spec.padding_mode, dst);
        for (oc, plane) in dst.chunks_mut(hw).enumerate() {
            plane.iter_mut().for_each(|v| *v += bias.data()[oc]);
        }
    }
    Ok(out)
}

/// Backward pass of [`transposed_conv2d`].
pub fn transposed_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    grad_output: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let [n, ci, h, w] = input.shape();
    let co = spec.out_channels;
    if grad_output.shape() != [n, co, h, w] {
        return Err(Error::Shape(format!(
            "output gradient {:?} does not match forward output {:?}",
            grad_output.shape(),
            [n, co, h, w]
        )));
    }
    let (kh, kw) = spec.kernel;
    let (ph, pw) = spec.padding();
    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
    let okk = co * kh * kw;
    let hw = h * w;
    let mut gi = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros([1, 1, 1, co]);
    for ni in 0..n {
        let go = grad_output.item(ni);
        for (oc, plane) in go.chunks(hw).enumerate() {
            gb.data_mut()[oc] += plane.iter().copied().sum::<T>();
        }
        let gp = pad_item(go, co, h, w, ph, pw, spec.padding_mode);
        let cols = im2col(&gp, co, hp, wp, kh, kw, 1, h, w);
        // dy = W (ci x okk) * cols (okk x hw)
        T::gemm(ci, okk, hw, T::one(), weight.data(), okk as isize, 1, &cols, hw as isize, 1, T::zero(), gi.item_mut(ni), hw as isize, 1);
        // dW += y (ci x hw) * cols^T (hw x okk)
        T::gemm(ci, hw, okk, T::one(), input.item(ni), hw as isize, 1, &cols, 1, hw as isize, T::one(), gw.data_mut(), okk as isize, 1);
    }
    Ok(ConvGrads { input: gi, weight: gw, bias: gb })
}
