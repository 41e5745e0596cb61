//! Evaluation protocol: Y-channel PSNR/SSIM with border shaving, reports,
//! the bicubic baseline and the 8-transform self-ensemble.

use std::fmt::Write as _;

use crate::degradation::imresize_bicubic;
use crate::error::{Error, Result};
use crate::imaging::{extract_luma, ColorSpace, Dihedral, Image, IntensityRange};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Side of the SSIM Gaussian window.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// `10 log10(peak^2 / MSE)`. Identical inputs give `f64::INFINITY`, the
/// distinguished "perfect reconstruction" sentinel.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    a.expect_same_shape(b, "psnr")?;
    if a.is_empty() {
        return Err(Error::Size("psnr of empty images".into()));
    }
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse / a.len() as f64;
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// "Valid" separable filtering of one `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM for byte-range images (11x11 Gaussian window, sigma 1.5,
/// `C1 = (0.01 * 255)^2`, `C2 = (0.03 * 255)^2`), over the fully covered
/// region only. Multi-channel inputs are averaged over channels.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_shape(b, "ssim")?;
    let [n, c, h, w] = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Size(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let hw = h * w;
    let mut total = 0.0;
    for ni in 0..n {
        let (ia, ib) = (a.item(ni), b.item(ni));
        for ci in 0..c {
            let pa: Vec<f64> = ia[ci * hw..(ci + 1) * hw].iter().map(|v| v.as_f64()).collect();
            let pb: Vec<f64> = ib[ci * hw..(ci + 1) * hw].iter().map(|v| v.as_f64()).collect();
            let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { pa.iter().zip(&pb).map(|(&x, &y)| f(x, y)).collect() };
            let mu_a = filter_valid(&pa, h, w, &taps);
            let mu_b = filter_valid(&pb, h, w, &taps);
            let e_aa = filter_valid(&prod(|x, _| x * x), h, w, &taps);
            let e_bb = filter_valid(&prod(|_, y| y * y), h, w, &taps);
            let e_ab = filter_valid(&prod(|x, y| x * y), h, w, &taps);
            let mut s = 0.0;
            for i in 0..mu_a.len() {
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let va = e_aa[i] - ma * ma;
                let vb = e_bb[i] - mb * mb;
                let cov = e_ab[i] - ma * mb;
                s += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
            total += s / mu_a.len() as f64;
        }
    }
    Ok(total / (n * c) as f64)
}

/// How a pair of images is compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalProtocol {
    pub scale: usize,
    /// Pixels removed from every side before scoring.
    pub border: usize,
    pub y_channel: bool,
}

impl EvalProtocol {
    /// Y channel with an `s`-pixel shave.
    pub fn standard(scale: usize) -> Self {
        Self { scale, border: scale, y_channel: true }
    }
}

/// Byte-range Y channel (or all channels) of `image`, shaved per the protocol.
pub fn prepare_for_eval<T: Scalar>(image: &Image<T>, protocol: &EvalProtocol) -> Result<Tensor<f64>> {
    let img = image.cast::<f64>().to_range(IntensityRange::Byte);
    let img = if protocol.y_channel && img.colorspace != ColorSpace::Luma { extract_luma(&img)? } else { img };
    Ok(if protocol.border > 0 { img.shave(protocol.border)?.pixels } else { img.pixels })
}

/// `(psnr, ssim)` of `sr` against `gt` under `protocol`.
pub fn evaluate_pair<T: Scalar>(sr: &Image<T>, gt: &Image<T>, protocol: &EvalProtocol) -> Result<(f64, f64)> {
    if (sr.height(), sr.width()) != (gt.height(), gt.width()) {
        return Err(Error::Shape(format!(
            "SR is {}x{} but ground truth is {}x{}",
            sr.height(),
            sr.width(),
            gt.height(),
            gt.width()
        )));
    }
    let a = prepare_for_eval(sr, protocol)?;
    let b = prepare_for_eval(gt, protocol)?;
    Ok((psnr(&a, &b, 255.0)?, ssim(&a, &b)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    pub images: Vec<ImageScore>,
}

impl EvalReport {
    pub fn new(protocol: EvalProtocol) -> Self {
        Self { protocol, images: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, psnr: f64, ssim: f64) {
        self.images.push(ImageScore { name: name.into(), psnr, ssim });
    }

    /// Mean over finite PSNR values; `+inf` entries are skipped with a warning.
    /// `None` when no finite entry exists.
    pub fn mean_psnr(&self) -> Option<f64> {
        let finite: Vec<f64> = self.images.iter().map(|s| s.psnr).filter(|p| p.is_finite()).collect();
        let skipped = self.images.len() - finite.len();
        if skipped > 0 {
            log::warn!("{skipped} perfect reconstruction(s) excluded from the mean PSNR");
        }
        if finite.is_empty() {
            None
        } else {
            Some(finite.iter().sum::<f64>() / finite.len() as f64)
        }
    }

    pub fn mean_ssim(&self) -> Option<f64> {
        if self.images.is_empty() {
            None
        } else {
            Some(self.images.iter().map(|s| s.ssim).sum::<f64>() / self.images.len() as f64)
        }
    }

    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let fmt_psnr = |p: f64| if p.is_finite() { format!("{p:9.4}") } else { format!("{:>9}", "inf") };
        let mut out = String::new();
        let p = &self.protocol;
        let _ = writeln!(
            out,
            "# scale x{}, border {} px, {}",
            p.scale,
            p.border,
            if p.y_channel { "Y channel" } else { "all channels" }
        );
        let _ = writeln!(out, "{:<24} {:>9} {:>8}", "image", "PSNR", "SSIM");
        for s in &self.images {
            let _ = writeln!(out, "{:<24} {} {:8.4}", s.name, fmt_psnr(s.psnr), s.ssim);
        }
        let mean_p = self.mean_psnr().map_or_else(|| format!("{:>9}", "inf"), fmt_psnr);
        let _ = writeln!(out, "{:<24} {} {:8.4}", "mean", mean_p, self.mean_ssim().unwrap_or(f64::NAN));
        out
    }

    /// Line-delimited JSON records: one per image, then one aggregate line.
    /// An infinite PSNR is written as the string `"inf"`.
    pub fn to_records(&self) -> String {
        let num = |p: f64| if p.is_finite() { serde_json::json!(p) } else { serde_json::json!("inf") };
        let p = &self.protocol;
        let mut out = String::new();
        for s in &self.images {
            let rec = serde_json::json!({
                "image": s.name, "psnr": num(s.psnr), "ssim": s.ssim,
                "scale": p.scale, "border": p.border, "y_channel": p.y_channel,
            });
            let _ = writeln!(out, "{rec}");
        }
        let agg = serde_json::json!({
            "mean_psnr": self.mean_psnr().map_or(serde_json::json!("inf"), num),
            "mean_ssim": self.mean_ssim(), "images": self.images.len(),
            "scale": p.scale, "border": p.border, "y_channel": p.y_channel,
        });
        let _ = writeln!(out, "{agg}");
        out
    }
}

/// MATLAB-style bicubic baseline: the HR image is cropped to a multiple of the
/// scale, `LR = uint8(imresize(HR, 1/s))` and `SR = uint8(imresize(LR, s))`.
/// Returns `(cropped HR, LR, SR)`, all in byte range.
pub fn bicubic_baseline<T: Scalar>(hr: &Image<T>, scale: usize) -> Result<(Image<f64>, Image<f64>, Image<f64>)> {
    let gt = hr.cast::<f64>().to_range(IntensityRange::Byte).mod_crop(scale)?;
    let (h, w) = (gt.height(), gt.width());
    let lr = imresize_bicubic(&gt.pixels, h / scale, w / scale)?;
    let lr = Image::new(lr, IntensityRange::Byte, gt.colorspace)?.quantized();
    let sr = imresize_bicubic(&lr.pixels, h, w)?;
    let sr = Image::new(sr, IntensityRange::Byte, gt.colorspace)?.quantized();
    Ok((gt, lr, sr))
}

/// Runs `model` on all 8 dihedral transforms of `y`, maps each result back
/// with the inverse transform and averages.
pub fn self_ensemble<T: Scalar, F>(mut model: F, y: &Tensor<T>) -> Result<Tensor<T>>
where
    F: FnMut(&Tensor<T>) -> Result<Tensor<T>>,
{
    let mut acc: Option<Tensor<T>> = None;
    for d in Dihedral::all() {
        let out = d.inverse().apply(&model(&d.apply(y))?);
        match acc.as_mut() {
            None => acc = Some(out),
            Some(a) => a.axpy(T::one(), &out)?,
        }
    }
    Ok(acc.expect("eight transforms").scale(T::lit(1.0 / 8.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn([1, 1, h, w], |[_, _, y, x]| ((7 * y + 13 * x) % 97) as f64 + 60.0)
    }

    #[test]
    fn psnr_definition() {
        let a = Tensor::from_vec([1, 1, 1, 1], vec![0.0]).unwrap();
        let b = Tensor::from_vec([1, 1, 1, 1], vec![255.0]).unwrap();
        assert_eq!(psnr(&a, &b, 255.0).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &Tensor::zeros([1, 1, 1, 2]), 255.0).is_err());
    }

    #[test]
    fn ssim_identity_and_size_error() {
        let a = ramp(16, 20);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(ssim(&ramp(10, 20), &ramp(10, 20)), Err(Error::Size(_))));
    }

    #[test]
    fn gaussian_window_normalized() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(t[0], t[10]);
    }

    #[test]
    fn report_skips_infinite_psnr() {
        let mut r = EvalReport::new(EvalProtocol::standard(2));
        r.push("a", f64::INFINITY, 1.0);
        r.push("b", 30.0, 0.5);
        assert_eq!(r.mean_psnr(), Some(30.0));
        assert_eq!(r.mean_ssim(), Some(0.75));
        assert!(r.to_table().contains("inf"));
        assert_eq!(r.to_records().lines().count(), 3);
        let mut only = EvalReport::new(EvalProtocol::standard(2));
        only.push("a", f64::INFINITY, 1.0);
        assert_eq!(only.mean_psnr(), None);
    }

    #[test]
    fn ensemble_calls_model_eight_times() {
        let mut calls = 0;
        let y = ramp(4, 6);
        let out = self_ensemble(
            |x: &Tensor<f64>| {
                calls += 1;
                Ok(x.clone())
            },
            &y,
        )
        .unwrap();
        assert_eq!(calls, 8);
        assert_eq!(out, y);
    }
}
