//! Observation model `y = H x + noise`: antialiased bicubic downsampling `H`,
//! its upsampling counterpart, Gaussian noise and noise-level estimation.
//!
//! Both resampling operators are separable. Each axis is described by a
//! [`ResampleMatrix`] whose rows hold the (already boundary-folded) taps, so
//! the exact adjoint of either operator is just the transposed application.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::reflect_index;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    let ax2 = ax * ax;
    let ax3 = ax2 * ax;
    if ax <= 1.0 {
        1.5 * ax3 - 2.5 * ax2 + 1.0
    } else if ax <= 2.0 {
        -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

/// Triangle (bilinear) kernel.
pub fn triangle(x: f64) -> f64 {
    (1.0 - x.abs()).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    Cubic,
    Linear,
}

impl Interpolation {
    fn eval(self, x: f64) -> f64 {
        match self {
            Interpolation::Cubic => cubic(x),
            Interpolation::Linear => triangle(x),
        }
    }

    fn width(self) -> f64 {
        match self {
            Interpolation::Cubic => 4.0,
            Interpolation::Linear => 2.0,
        }
    }
}

/// How taps falling outside the signal are folded back.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    /// `.., 2, 1 | 0, 1, 2, ..` (edge sample not repeated)
    Reflect,
    /// `.., 1, 0 | 0, 1, 2, ..` (edge repeated), the convention of MATLAB's imresize
    Symmetric,
}

fn fold(i: isize, n: usize, boundary: Boundary) -> usize {
    match boundary {
        Boundary::Reflect => reflect_index(i, n),
        Boundary::Symmetric => {
            let period = 2 * n as isize;
            let j = i.rem_euclid(period);
            if j < n as isize {
                j as usize
            } else {
                (period - 1 - j) as usize
            }
        }
    }
}

/// Sparse `out_len x in_len` resampling matrix, one row of taps per output sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ResampleMatrix {
    pub in_len: usize,
    pub out_len: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl ResampleMatrix {
    /// Builds taps the way MATLAB's `imresize` does: output sample `i`
    /// (1-based) maps to input coordinate `i/scale + (1 - 1/scale)/2`, the
    /// kernel is stretched by `1/scale` when shrinking with antialiasing, and
    /// each row is normalized to sum to one.
    pub fn new(in_len: usize, out_len: usize, kernel: Interpolation, antialias: bool, boundary: Boundary) -> Self {
        let scale = out_len as f64 / in_len as f64;
        let shrink = antialias && scale < 1.0;
        let width = if shrink { kernel.width() / scale } else { kernel.width() };
        let taps = width.ceil() as isize + 2;
        let rows = (1..=out_len)
            .map(|i| {
                let u = i as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
                let left = (u - width / 2.0).floor() as isize;
                let mut raw: Vec<(isize, f64)> = (0..taps)
                    .map(|t| {
                        let idx = left + t;
                        let d = u - idx as f64;
                        let wgt = if shrink { scale * kernel.eval(scale * d) } else { kernel.eval(d) };
                        (idx, wgt)
                    })
                    .collect();
                let total: f64 = raw.iter().map(|&(_, w)| w).sum();
                raw.iter_mut().for_each(|(_, w)| *w /= total);
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(raw.len());
                for (idx, w) in raw {
                    if w == 0.0 {
                        continue;
                    }
                    // 1-based MATLAB index to 0-based
                    let j = fold(idx - 1, in_len, boundary);
                    match row.iter_mut().find(|(k, _)| *k == j) {
                        Some(entry) => entry.1 += w,
                        None => row.push((j, w)),
                    }
                }
                row
            })
            .collect();
        Self { in_len, out_len, rows }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.in_len]; self.out_len];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                m[i][j] += w;
            }
        }
        m
    }

    pub fn transpose(&self) -> Self {
        let mut rows = vec![Vec::new(); self.in_len];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                rows[j].push((i, w));
            }
        }
        Self { in_len: self.out_len, out_len: self.in_len, rows }
    }
}

/// Applies `rows` along height and `cols` along width of every plane.
pub fn resample<T: Scalar>(x: &Tensor<T>, rows: &ResampleMatrix, cols: &ResampleMatrix) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if rows.in_len != h || cols.in_len != w {
        return Err(Error::Shape(format!(
            "resampler expects {}x{}, input is {h}x{w}",
            rows.in_len, cols.in_len
        )));
    }
    let (oh, ow) = (rows.out_len, cols.out_len);
    let rt: Vec<Vec<(usize, T)>> = convert(rows);
    let ct: Vec<Vec<(usize, T)>> = convert(cols);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut tmp = vec![T::zero(); oh * w];
    for ni in 0..n {
        for ci in 0..c {
            let plane = &x.item(ni)[ci * h * w..(ci + 1) * h * w];
            for (oy, taps) in rt.iter().enumerate() {
                let dst = &mut tmp[oy * w..(oy + 1) * w];
                dst.iter_mut().for_each(|v| *v = T::zero());
                for &(sy, wt) in taps {
                    for (d, &s) in dst.iter_mut().zip(&plane[sy * w..(sy + 1) * w]) {
                        *d += wt * s;
                    }
                }
            }
            let dst = &mut out.item_mut(ni)[ci * oh * ow..(ci + 1) * oh * ow];
            for oy in 0..oh {
                let src = &tmp[oy * w..(oy + 1) * w];
                for (ox, taps) in ct.iter().enumerate() {
                    dst[oy * ow + ox] = taps.iter().map(|&(sx, wt)| wt * src[sx]).sum();
                }
            }
        }
    }
    Ok(out)
}

fn convert<T: Scalar>(m: &ResampleMatrix) -> Vec<Vec<(usize, T)>> {
    m.rows.iter().map(|r| r.iter().map(|&(j, w)| (j, T::lit(w))).collect()).collect()
}

/// How the upsampling operator of the observation model is realized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    /// Bilinear interpolation (preserves constants).
    Bilinear,
    /// Exact transpose of the downsampling operator.
    Adjoint,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationModel {
    pub scale: usize,
    /// Noise standard deviation in byte-intensity units.
    pub sigma: f64,
    pub up_mode: UpsampleMode,
}

impl DegradationModel {
    pub fn new(scale: usize) -> Result<Self> {
        if scale < 1 {
            return Err(Error::InvalidParameter("scale factor must be at least 1".into()));
        }
        Ok(Self { scale, sigma: 0.0, up_mode: UpsampleMode::Bilinear })
    }

    pub fn with_sigma(mut self, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) {
            return Err(Error::InvalidParameter(format!("noise sigma {sigma} must be non-negative")));
        }
        self.sigma = sigma;
        Ok(self)
    }

    pub fn with_up_mode(mut self, mode: UpsampleMode) -> Self {
        self.up_mode = mode;
        self
    }

    /// Taps of `H` along an axis of `hr_len` samples.
    pub fn down_matrix(&self, hr_len: usize) -> Result<ResampleMatrix> {
        if hr_len % self.scale != 0 || hr_len == 0 {
            return Err(Error::Size(format!(
                "dimension {hr_len} is not divisible by scale {}",
                self.scale
            )));
        }
        Ok(ResampleMatrix::new(hr_len, hr_len / self.scale, Interpolation::Cubic, true, Boundary::Reflect))
    }

    /// Taps of the bilinear upsampler along an axis of `lr_len` samples.
    pub fn up_matrix(&self, lr_len: usize) -> ResampleMatrix {
        ResampleMatrix::new(lr_len, lr_len * self.scale, Interpolation::Linear, false, Boundary::Reflect)
    }

    fn up_pair(&self, lr_h: usize, lr_w: usize, mode: UpsampleMode) -> Result<(ResampleMatrix, ResampleMatrix)> {
        Ok(match mode {
            UpsampleMode::Bilinear => (self.up_matrix(lr_h), self.up_matrix(lr_w)),
            UpsampleMode::Adjoint => (
                self.down_matrix(lr_h * self.scale)?.transpose(),
                self.down_matrix(lr_w * self.scale)?.transpose(),
            ),
        })
    }
}

/// `H x`: antialiased bicubic downsampling by the model's scale.
pub fn apply_h<T: Scalar>(x: &Tensor<T>, model: &DegradationModel) -> Result<Tensor<T>> {
    if model.scale == 1 {
        return Ok(x.detach());
    }
    resample(x, &model.down_matrix(x.h())?, &model.down_matrix(x.w())?)
}

/// `H^T y` using the model's configured upsampling mode.
pub fn apply_ht<T: Scalar>(y: &Tensor<T>, model: &DegradationModel) -> Result<Tensor<T>> {
    apply_ht_with(y, model, model.up_mode)
}

pub fn apply_ht_with<T: Scalar>(y: &Tensor<T>, model: &DegradationModel, mode: UpsampleMode) -> Result<Tensor<T>> {
    if model.scale == 1 {
        return Ok(y.detach());
    }
    let (r, c) = model.up_pair(y.h(), y.w(), mode)?;
    resample(y, &r, &c)
}

/// Exact adjoint of [`apply_ht_with`] (a map from HR to LR grids).
pub fn apply_ht_adjoint<T: Scalar>(x: &Tensor<T>, model: &DegradationModel, mode: UpsampleMode) -> Result<Tensor<T>> {
    if model.scale == 1 {
        return Ok(x.detach());
    }
    let s = model.scale;
    if x.h() % s != 0 || x.w() % s != 0 {
        return Err(Error::Size(format!("{}x{} not divisible by scale {s}", x.h(), x.w())));
    }
    let (r, c) = model.up_pair(x.h() / s, x.w() / s, mode)?;
    resample(x, &r.transpose(), &c.transpose())
}

/// `x + noise`, noise i.i.d. `N(0, sigma^2)`.
pub fn add_noise<T: Scalar, R: Rng + ?Sized>(x: &Tensor<T>, sigma: f64, rng: &mut R) -> Result<Tensor<T>> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!("noise sigma {sigma} must be non-negative")));
    }
    if sigma == 0.0 {
        return Ok(x.detach());
    }
    let mut out = x.detach();
    for v in out.data_mut() {
        let e: f64 = rng.sample(StandardNormal);
        *v += T::lit(sigma * e);
    }
    Ok(out)
}

/// Robust noise standard deviation of a single image: median absolute value
/// of the finest diagonal Haar subband divided by 0.6745. All channels are
/// pooled; a trailing odd row or column is ignored.
pub fn estimate_sigma<T: Scalar>(y: &Tensor<T>) -> Result<f64> {
    let [n, c, h, w] = y.shape();
    if n != 1 {
        return Err(Error::Shape(format!("noise estimation expects one image, got batch of {n}")));
    }
    if h < 2 || w < 2 {
        return Err(Error::Size(format!("image {h}x{w} is smaller than 2x2")));
    }
    let mut coeffs = Vec::with_capacity(c * (h / 2) * (w / 2));
    for ci in 0..c {
        for by in 0..h / 2 {
            for bx in 0..w / 2 {
                let p = |dy: usize, dx: usize| y.at([0, ci, 2 * by + dy, 2 * bx + dx]).as_f64();
                let d = ((p(0, 0) - p(0, 1)) - (p(1, 0) - p(1, 1))) / 2.0;
                coeffs.push(d.abs());
            }
        }
    }
    Ok(median(&mut coeffs) / 0.6745)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Power-iteration estimates of `||H^T H||_2`, one per iteration, on an
/// `h x w` HR grid, where `H^T` is the model's upsampling operator.
///
/// With the bilinear upsampler `A = H^T H` is not symmetric, so the iteration
/// runs on the symmetric positive semi-definite `A^T A` and reports
/// `sqrt(||A^T A v||)`, i.e. the largest singular value of `A`. That sequence is
/// non-decreasing, and for the exact-adjoint pair it equals the top
/// eigenvalue of `H^T H`.
pub fn spectral_norm_hth_history(model: &DegradationModel, iters: usize, h: usize, w: usize) -> Result<Vec<f64>> {
    if iters < 1 {
        return Err(Error::InvalidParameter("power iteration needs at least one step".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Tensor<f64> = Tensor::from_fn([1, 1, h, w], |_| rng.random_range(0.0..1.0));
    let nv = v.norm();
    v = v.scale(1.0 / nv);
    let mut history = Vec::with_capacity(iters);
    for _ in 0..iters {
        let a = apply_ht(&apply_h(&v, model)?, model)?;
        let u = apply_ht_with(&apply_ht_adjoint(&a, model, model.up_mode)?, model, UpsampleMode::Adjoint)?;
        let norm = u.norm();
        history.push(norm.sqrt());
        if norm == 0.0 {
            break;
        }
        v = u.scale(1.0 / norm);
    }
    Ok(history)
}

/// Power-iteration estimate of `||H^T H||_2` on a `16s x 16s` working grid.
pub fn spectral_norm_hth(model: &DegradationModel, iters: usize) -> Result<f64> {
    let side = 16 * model.scale;
    let hist = spectral_norm_hth_history(model, iters, side, side)?;
    Ok(*hist.last().unwrap())
}

/// Text dump of the down- and upsampling taps for an `hr_len` axis:
/// one line per tap, `<op> <output index> <input index> <weight>`.
pub fn format_taps(model: &DegradationModel, hr_len: usize) -> Result<String> {
    let mut out = String::from("# op out_index in_index weight\n");
    let down = model.down_matrix(hr_len)?;
    let up = model.up_matrix(hr_len / model.scale);
    for (name, m) in [("down", &down), ("up", &up)] {
        for (i, row) in m.rows.iter().enumerate() {
            for &(j, w) in row {
                writeln!(out, "{name} {i} {j} {w:.16e}").unwrap();
            }
        }
    }
    Ok(out)
}

pub fn write_taps(model: &DegradationModel, hr_len: usize, path: &Path) -> Result<()> {
    std::fs::write(path, format_taps(model, hr_len)?).map_err(|e| Error::io(path, e))
}

/// MATLAB-compatible `imresize(x, [out_h out_w], 'bicubic')` in floating point.
pub fn imresize_bicubic<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let r = ResampleMatrix::new(x.h(), out_h, Interpolation::Cubic, true, Boundary::Symmetric);
    let c = ResampleMatrix::new(x.w(), out_w, Interpolation::Cubic, true, Boundary::Symmetric);
    resample(x, &r, &c)
}
