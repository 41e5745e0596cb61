use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Channel-wise parametric ReLU. `slopes` holds one value per channel.
pub fn prelu<T: Scalar>(input: &Tensor<T>, slopes: &Tensor<T>) -> Result<Tensor<T>> {
    check_slopes(input, slopes)?;
    let [n, _, h, w] = input.shape();
    let hw = h * w;
    let mut out = input.clone();
    out.clear_grad();
    for ni in 0..n {
        for (ci, plane) in out.item_mut(ni).chunks_mut(hw).enumerate() {
            let a = slopes.data()[ci];
            for v in plane.iter_mut() {
                if *v < T::zero() {
                    *v = a * *v;
                }
            }
        }
    }
    Ok(out)
}

fn check_slopes<T: Scalar>(input: &Tensor<T>, slopes: &Tensor<T>) -> Result<()> {
    if slopes.len() != input.c() {
        return Err(Error::Shape(format!(
            "prelu has {} slopes for {} channels",
            slopes.len(),
            input.c()
        )));
    }
    Ok(())
}

/// Returns `(grad_input, grad_slopes)`. The subgradient at zero follows the
/// positive branch.
pub fn prelu_backward<T: Scalar>(
    input: &Tensor<T>,
    slopes: &Tensor<T>,
    grad_output: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_slopes(input, slopes)?;
    input.expect_same_shape(grad_output, "prelu backward")?;
    let [n, c, h, w] = input.shape();
    let hw = h * w;
    let mut gi = Tensor::zeros(input.shape());
    let mut gs = Tensor::zeros(slopes.shape());
    for ni in 0..n {
        let x = input.item(ni);
        let go = grad_output.item(ni);
        let dst = gi.item_mut(ni);
        for ci in 0..c {
            let a = slopes.data()[ci];
            let mut acc = T::zero();
            for i in ci * hw..(ci + 1) * hw {
                if x[i] >= T::zero() {
                    dst[i] = go[i];
                } else {
                    dst[i] = a * go[i];
                    acc += x[i] * go[i];
                }
            }
            gs.data_mut()[ci] += acc;
        }
    }
    Ok((gi, gs))
}

/// Concatenates along channels, `a` first.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [na, ca, ha, wa] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::Shape(format!(
            "cannot concatenate {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for ni in 0..na {
        data.extend_from_slice(a.item(ni));
        data.extend_from_slice(b.item(ni));
    }
    Tensor::from_vec([na, ca + cb, ha, wa], data)
}

/// Channels `[start, start + count)` of `x`.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, start: usize, count: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if start + count > c {
        return Err(Error::Shape(format!(
            "channel slice {start}..{} out of {c}",
            start + count
        )));
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * count * hw);
    for ni in 0..n {
        data.extend_from_slice(&x.item(ni)[start * hw..(start + count) * hw]);
    }
    Tensor::from_vec([n, count, h, w], data)
}

/// Splits the gradient of a concatenation back into its two inputs.
pub fn concat_channels_backward<T: Scalar>(
    grad_output: &Tensor<T>,
    a_channels: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let c = grad_output.c();
    Ok((
        slice_channels(grad_output, 0, a_channels)?,
        slice_channels(grad_output, a_channels, c - a_channels)?,
    ))
}

/// Clamps to `[lo, hi]`. NaN passes through unchanged so that a diverged
/// network surfaces as a non-finite loss instead of a silently clamped image.
pub fn clip_intensity<T: Scalar>(input: &Tensor<T>, lo: T, hi: T) -> Result<Tensor<T>> {
    if !(lo < hi) {
        return Err(Error::InvalidRange { lo: lo.as_f64(), hi: hi.as_f64() });
    }
    Ok(input.map(|v| if v < lo { lo } else if v > hi { hi } else { v }))
}

/// Passes the gradient where `lo < x < hi`, zero elsewhere.
pub fn clip_intensity_backward<T: Scalar>(
    input: &Tensor<T>,
    lo: T,
    hi: T,
    grad_output: &Tensor<T>,
) -> Result<Tensor<T>> {
    input.zip_map(grad_output, |x, g| if x > lo && x < hi { g } else { T::zero() })
}

/// `(1/2) * sum_n ||pred_n - target_n||_1` over the mini-batch.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    pred.expect_same_shape(target, "l1 loss")?;
    let s: T = pred.data().iter().zip(target.data()).map(|(&p, &t)| (p - t).abs()).sum();
    Ok(s * T::lit(0.5))
}

/// `(1/2) * sign(pred - target)` with `sign(0) = 0`.
pub fn l1_loss_backward<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    let half = T::lit(0.5);
    pred.zip_map(target, |p, t| {
        let d = p - t;
        if d > T::zero() {
            half
        } else if d < T::zero() {
            -half
        } else {
            T::zero()
        }
    })
}
