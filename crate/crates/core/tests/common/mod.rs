//! Shared helpers for the integration and acceptance tests.
#![allow(dead_code)]

use mmsr::imaging::{ColorSpace, Image, IntensityRange};
use mmsr::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod fd;

/// Procedural RGB test image in byte range: a smooth colour gradient, a few
/// hard-edged discs and rectangles, and a low-frequency stripe texture.
pub fn synthetic_image(h: usize, w: usize, seed: u64) -> Image<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(40.0..200.0));
    let grad: [(f64, f64); 3] = std::array::from_fn(|_| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    let stripe_f = (rng.random_range(0.15..0.6), rng.random_range(0.15..0.6));
    let stripe_a = rng.random_range(5.0..25.0);
    #[derive(Clone, Copy)]
    enum Shape {
        Disc(f64, f64, f64),
        Rect(f64, f64, f64, f64),
    }
    let shapes: Vec<(Shape, [f64; 3])> = (0..6)
        .map(|_| {
            let col = std::array::from_fn(|_| rng.random_range(0.0..255.0));
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let s = if rng.random_bool(0.5) {
                Shape::Disc(cy, cx, rng.random_range(3.0..(h.min(w) as f64 / 3.0)))
            } else {
                Shape::Rect(cy, cx, rng.random_range(3.0..h as f64 / 2.0), rng.random_range(3.0..w as f64 / 2.0))
            };
            (s, col)
        })
        .collect();
    let px = Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
        let (yf, xf) = (y as f64, x as f64);
        let mut v = base[c] + grad[c].0 * yf + grad[c].1 * xf
            + stripe_a * (stripe_f.0 * yf + stripe_f.1 * xf).sin();
        for (s, col) in &shapes {
            let inside = match *s {
                Shape::Disc(cy, cx, r) => (yf - cy).powi(2) + (xf - cx).powi(2) <= r * r,
                Shape::Rect(cy, cx, rh, rw) => yf >= cy && yf < cy + rh && xf >= cx && xf < cx + rw,
            };
            if inside {
                v = col[c];
            }
        }
        v.clamp(0.0, 255.0).round()
    });
    Image::new(px, IntensityRange::Byte, ColorSpace::Rgb).unwrap()
}

/// Uniform random tensor in `[0, scale)`.
pub fn random_tensor(shape: [usize; 4], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(0.0..scale))
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Cubic convolution kernel with `a = -0.5`, written out independently of
/// the library (Keys 1981, Eq. 15).
pub fn keys_cubic(x: f64) -> f64 {
    let t = x.abs();
    if t <= 1.0 {
        1.5 * t * t * t - 2.5 * t * t + 1.0
    } else if t < 2.0 {
        -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0
    } else {
        0.0
    }
}

/// Boundary folding used by the dense oracles.
#[derive(Clone, Copy, Debug)]
pub enum Fold {
    /// `.., 2, 1 | 0, 1, 2, ..`
    Reflect,
    /// `.., 1, 0 | 0, 1, 2, ..`
    Symmetric,
}

fn fold_index(mut j: i64, n: i64, fold: Fold) -> usize {
    loop {
        if (0..n).contains(&j) {
            return j as usize;
        }
        j = match fold {
            Fold::Reflect if j < 0 => -j,
            Fold::Reflect => 2 * (n - 1) - j,
            Fold::Symmetric if j < 0 => -j - 1,
            Fold::Symmetric => 2 * n - 1 - j,
        };
        if n == 1 {
            return 0;
        }
    }
}

/// Dense `out_len x in_len` resampling matrix following MATLAB's `imresize`
/// contributions: output `i` (1-based) sits at input coordinate
/// `u = i/s + (1 - 1/s)/2`, the kernel is widened by `1/s` when shrinking,
/// every integer input position near `u` contributes and rows are normalized.
pub fn dense_resize_oracle(in_len: usize, out_len: usize, kernel: fn(f64) -> f64, support: f64, fold: Fold) -> Vec<Vec<f64>> {
    let s = out_len as f64 / in_len as f64;
    let shrink = s < 1.0;
    let half = if shrink { support / (2.0 * s) } else { support / 2.0 };
    let mut m = vec![vec![0.0; in_len]; out_len];
    for (i, row) in m.iter_mut().enumerate() {
        let u = (i + 1) as f64 / s + 0.5 * (1.0 - 1.0 / s);
        let lo = (u - half).floor() as i64 - 1;
        let hi = (u + half).ceil() as i64 + 1;
        let mut total = 0.0;
        let mut acc = vec![0.0; in_len];
        for j in lo..=hi {
            let d = u - j as f64;
            let wgt = if shrink { s * kernel(s * d) } else { kernel(d) };
            total += wgt;
            acc[fold_index(j - 1, in_len as i64, fold)] += wgt;
        }
        for (dst, a) in row.iter_mut().zip(acc) {
            *dst = a / total;
        }
    }
    m
}

/// Triangle (bilinear) kernel.
pub fn triangle_kernel(x: f64) -> f64 {
    (1.0 - x.abs()).max(0.0)
}

/// `R X C^T` on every plane, by explicit triple loops.
pub fn dense_apply(x: &Tensor<f64>, rows: &[Vec<f64>], cols: &[Vec<f64>]) -> Tensor<f64> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (rows.len(), cols.len());
    Tensor::from_fn([n, c, oh, ow], |[ni, ci, i, j]| {
        let mut s = 0.0;
        for p in 0..h {
            for q in 0..w {
                s += rows[i][p] * x.at([ni, ci, p, q]) * cols[j][q];
            }
        }
        s
    })
}

/// Transpose of a dense matrix.
pub fn dense_transpose(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = m.first().map_or(0, Vec::len);
    (0..cols).map(|j| m.iter().map(|r| r[j]).collect()).collect()
}

/// Oracle `H` taps (antialiased bicubic, reflect boundary) for an HR axis.
pub fn h_oracle(hr_len: usize, scale: usize) -> Vec<Vec<f64>> {
    dense_resize_oracle(hr_len, hr_len / scale, keys_cubic, 4.0, Fold::Reflect)
}

/// Oracle bilinear upsampling taps for an LR axis.
pub fn up_oracle(lr_len: usize, scale: usize) -> Vec<Vec<f64>> {
    dense_resize_oracle(lr_len, lr_len * scale, triangle_kernel, 2.0, Fold::Reflect)
}

/// Largest absolute elementwise difference.
pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}
