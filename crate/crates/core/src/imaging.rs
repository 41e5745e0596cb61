//! Images, PNG I/O, colour conversion, patch sampling and augmentation.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::Rng;

use crate::degradation::{apply_h, DegradationModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IntensityRange {
    /// `[0, 1]`
    Unit,
    /// `[0, 255]`
    Byte,
}

impl IntensityRange {
    pub fn peak(self) -> f64 {
        match self {
            IntensityRange::Unit => 1.0,
            IntensityRange::Byte => 255.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    YCbCr,
    Luma,
}

impl ColorSpace {
    fn channels(self) -> usize {
        match self {
            ColorSpace::Rgb | ColorSpace::YCbCr => 3,
            ColorSpace::Luma => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub pixels: Tensor<T>,
    pub range: IntensityRange,
    pub colorspace: ColorSpace,
}

impl<T: Scalar> Image<T> {
    pub fn new(pixels: Tensor<T>, range: IntensityRange, colorspace: ColorSpace) -> Result<Self> {
        if pixels.n() != 1 {
            return Err(Error::Shape(format!("an image holds one item, got {}", pixels.n())));
        }
        if pixels.c() != colorspace.channels() {
            return Err(Error::Shape(format!(
                "{colorspace:?} needs {} channels, got {}",
                colorspace.channels(),
                pixels.c()
            )));
        }
        Ok(Self { pixels, range, colorspace })
    }

    pub fn height(&self) -> usize {
        self.pixels.h()
    }

    pub fn width(&self) -> usize {
        self.pixels.w()
    }

    pub fn to_range(&self, range: IntensityRange) -> Self {
        if range == self.range {
            return self.clone();
        }
        let f = T::lit(range.peak() / self.range.peak());
        Self { pixels: self.pixels.scale(f), range, colorspace: self.colorspace }
    }

    /// Values rounded to the nearest byte level and clamped, as an 8-bit
    /// encoder would store them.
    pub fn quantized(&self) -> Self {
        let peak = T::lit(self.range.peak());
        let k = T::lit(255.0) / peak;
        let pixels = self.pixels.map(|v| ((v * k).round().max(T::zero()).min(T::lit(255.0))) / k);
        Self { pixels, range: self.range, colorspace: self.colorspace }
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image { pixels: self.pixels.cast(), range: self.range, colorspace: self.colorspace }
    }

    /// Crops `[top, top+h) x [left, left+w)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        Ok(Self { pixels: crop(&self.pixels, top, left, h, w)?, range: self.range, colorspace: self.colorspace })
    }

    /// Largest top-left crop whose sides are multiples of `scale`.
    pub fn mod_crop(&self, scale: usize) -> Result<Self> {
        let (h, w) = (self.height() - self.height() % scale, self.width() - self.width() % scale);
        self.crop(0, 0, h, w)
    }

    /// Removes `border` pixels from every side.
    pub fn shave(&self, border: usize) -> Result<Self> {
        if 2 * border >= self.height() || 2 * border >= self.width() {
            return Err(Error::Size(format!(
                "cannot shave {border} pixels from a {}x{} image",
                self.height(),
                self.width()
            )));
        }
        self.crop(border, border, self.height() - 2 * border, self.width() - 2 * border)
    }
}

pub fn crop<T: Scalar>(x: &Tensor<T>, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let [n, c, xh, xw] = x.shape();
    if top + h > xh || left + w > xw {
        return Err(Error::Size(format!(
            "crop {h}x{w} at ({top},{left}) exceeds {xh}x{xw}"
        )));
    }
    Ok(Tensor::from_fn([n, c, h, w], |[ni, ci, y, xx]| x.at([ni, ci, top + y, left + xx])))
}

/// Reads an 8-bit grayscale or RGB PNG into a byte-range image.
pub fn load_png<T: Scalar>(path: &Path) -> Result<Image<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let (color, depth) = reader.output_color_type();
    if depth != png::BitDepth::Eight {
        return Err(Error::format(path, format!("unsupported bit depth {depth:?}, expected 8")));
    }
    let colorspace = match color {
        png::ColorType::Rgb => ColorSpace::Rgb,
        png::ColorType::Grayscale => ColorSpace::Luma,
        other => return Err(Error::format(path, format!("unsupported colour type {other:?}"))),
    };
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| Error::format(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    let (h, w) = (info.height as usize, info.width as usize);
    let c = colorspace.channels();
    let stride = info.line_size;
    let pixels = Tensor::from_fn([1, c, h, w], |[_, ci, y, x]| T::lit(buf[y * stride + x * c + ci] as f64));
    Image::new(pixels, IntensityRange::Byte, colorspace)
}

/// Writes an RGB or luma image as an 8-bit PNG (rounded, clamped).
/// The file is written to a temporary sibling and renamed into place.
pub fn save_png<T: Scalar>(image: &Image<T>, path: &Path) -> Result<()> {
    let color = match image.colorspace {
        ColorSpace::Rgb => png::ColorType::Rgb,
        ColorSpace::Luma => png::ColorType::Grayscale,
        ColorSpace::YCbCr => {
            return Err(Error::State("convert YCbCr images to RGB before saving".into()));
        }
    };
    let img = image.to_range(IntensityRange::Byte);
    let [_, c, h, w] = img.pixels.shape();
    let mut bytes = vec![0u8; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ci in 0..c {
                let v = img.pixels.at([0, ci, y, x]).as_f64().round().clamp(0.0, 255.0);
                bytes[(y * w + x) * c + ci] = v as u8;
            }
        }
    }
    let tmp = path.with_extension("png.part");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
        writer.write_image_data(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        writer.finish().map_err(|e| Error::format(path, e.to_string()))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

// ITU-R BT.601 studio swing, coefficients for [0, 255] RGB.
const YCBCR: [[f64; 3]; 3] = [
    [65.481, 128.553, 24.966],
    [-37.797, -74.203, 112.0],
    [112.0, -93.786, -18.214],
];
const OFFSETS: [f64; 3] = [16.0, 128.0, 128.0];

fn inverse3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (a, b) = ((j + 1) % 3, (j + 2) % 3);
            let (c, d) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) / det;
        }
    }
    inv
}

fn map_pixels<T: Scalar>(image: &Image<T>, f: impl Fn([f64; 3]) -> [f64; 3]) -> Tensor<T> {
    let [_, _, h, w] = image.pixels.shape();
    let mut out = Tensor::zeros([1, 3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let p = [0, 1, 2].map(|c| image.pixels.at([0, c, y, x]).as_f64());
            let q = f(p);
            for (c, v) in q.into_iter().enumerate() {
                out.set([0, c, y, x], T::lit(v));
            }
        }
    }
    out
}

/// BT.601 studio-swing conversion. For byte images `Y` lies in `[16, 235]`
/// and chroma in `[16, 240]`; unit-range images are scaled accordingly.
pub fn rgb_to_ycbcr<T: Scalar>(image: &Image<T>) -> Result<Image<T>> {
    if image.colorspace != ColorSpace::Rgb {
        return Err(Error::State(format!("expected an RGB image, got {:?}", image.colorspace)));
    }
    let peak = image.range.peak();
    let pixels = map_pixels(image, |p| {
        let rgb = p.map(|v| v * 255.0 / peak);
        let mut out = [0.0; 3];
        for (k, o) in out.iter_mut().enumerate() {
            let v = OFFSETS[k] + (0..3).map(|j| YCBCR[k][j] * rgb[j]).sum::<f64>() / 255.0;
            let hi = if k == 0 { 235.0 } else { 240.0 };
            *o = v.clamp(16.0, hi) * peak / 255.0;
        }
        out
    });
    Image::new(pixels, image.range, ColorSpace::YCbCr)
}

pub fn ycbcr_to_rgb<T: Scalar>(image: &Image<T>) -> Result<Image<T>> {
    if image.colorspace != ColorSpace::YCbCr {
        return Err(Error::State(format!("expected a YCbCr image, got {:?}", image.colorspace)));
    }
    let peak = image.range.peak();
    let inv = inverse3(YCBCR);
    let pixels = map_pixels(image, |p| {
        let ycc = p.map(|v| v * 255.0 / peak);
        let d = [ycc[0] - OFFSETS[0], ycc[1] - OFFSETS[1], ycc[2] - OFFSETS[2]];
        let mut out = [0.0; 3];
        for (k, o) in out.iter_mut().enumerate() {
            let v = 255.0 * (0..3).map(|j| inv[k][j] * d[j]).sum::<f64>();
            *o = v.clamp(0.0, 255.0) * peak / 255.0;
        }
        out
    });
    Image::new(pixels, image.range, ColorSpace::Rgb)
}

/// The Y channel of an RGB (converted first) or YCbCr image. Luma images pass through.
pub fn extract_luma<T: Scalar>(image: &Image<T>) -> Result<Image<T>> {
    let ycc = match image.colorspace {
        ColorSpace::Luma => return Ok(image.clone()),
        ColorSpace::Rgb => rgb_to_ycbcr(image)?,
        ColorSpace::YCbCr => image.clone(),
    };
    let [_, _, h, w] = ycc.pixels.shape();
    let y = Tensor::from_fn([1, 1, h, w], |[_, _, r, c]| ycc.pixels.at([0, 0, r, c]));
    Image::new(y, image.range, ColorSpace::Luma)
}

/// A training sample: an HR crop and its degraded LR counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair<T> {
    pub lr: Tensor<T>,
    pub hr: Tensor<T>,
    pub scale: usize,
}

impl<T: Scalar> PatchPair<T> {
    pub fn new(lr: Tensor<T>, hr: Tensor<T>, scale: usize) -> Result<Self> {
        if hr.h() != scale * lr.h() || hr.w() != scale * lr.w() || hr.c() != lr.c() {
            return Err(Error::Shape(format!(
                "HR {:?} is not a x{scale} version of LR {:?}",
                hr.shape(),
                lr.shape()
            )));
        }
        Ok(Self { lr, hr, scale })
    }
}

/// `(lr, hr)` training patch sides per scale factor.
pub fn table_patch_sizes(scale: usize) -> Option<(usize, usize)> {
    match scale {
        2 => Some((60, 120)),
        3 => Some((50, 150)),
        4 => Some((40, 160)),
        _ => None,
    }
}

/// Samples a patch pair with the standard patch size for `degradation.scale`.
pub fn sample_patch_pair<T: Scalar, R: Rng + ?Sized>(
    hr_image: &Image<T>,
    degradation: &DegradationModel,
    rng: &mut R,
) -> Result<PatchPair<T>> {
    let (lr, _) = table_patch_sizes(degradation.scale).ok_or_else(|| {
        Error::InvalidParameter(format!("no standard patch size for scale {}", degradation.scale))
    })?;
    sample_patch_pair_sized(hr_image, lr, degradation, rng)
}

/// Samples an HR crop of `lr_patch * scale` pixels at a scale-aligned origin
/// and derives its LR side with the degradation operator.
pub fn sample_patch_pair_sized<T: Scalar, R: Rng + ?Sized>(
    hr_image: &Image<T>,
    lr_patch: usize,
    degradation: &DegradationModel,
    rng: &mut R,
) -> Result<PatchPair<T>> {
    let s = degradation.scale;
    let hr_patch = lr_patch * s;
    let (h, w) = (hr_image.height(), hr_image.width());
    if h < hr_patch || w < hr_patch {
        return Err(Error::Size(format!(
            "image {h}x{w} is smaller than the {hr_patch}x{hr_patch} HR patch"
        )));
    }
    let top = rng.random_range(0..=(h - hr_patch) / s) * s;
    let left = rng.random_range(0..=(w - hr_patch) / s) * s;
    let hr = crop(&hr_image.pixels, top, left, hr_patch, hr_patch)?;
    let lr = apply_h(&hr, degradation)?;
    PatchPair::new(lr, hr, s)
}

/// One of the 8 symmetries of the square: optional transpose followed by
/// optional vertical and horizontal flips.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub transpose: bool,
    pub flip_v: bool,
    pub flip_h: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { transpose: false, flip_v: false, flip_h: false };

    pub fn all() -> [Dihedral; 8] {
        let mut out = [Self::IDENTITY; 8];
        for (i, d) in out.iter_mut().enumerate() {
            *d = Dihedral { transpose: i & 4 != 0, flip_v: i & 2 != 0, flip_h: i & 1 != 0 };
        }
        out
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::all()[rng.random_range(0..8)]
    }

    /// Source pixel for output pixel `(y, x)` on an output grid of `h x w`.
    fn source(self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        let y1 = if self.flip_v { h - 1 - y } else { y };
        let x1 = if self.flip_h { w - 1 - x } else { x };
        if self.transpose {
            (x1, y1)
        } else {
            (y1, x1)
        }
    }

    pub fn apply<T: Scalar>(self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        let (oh, ow) = if self.transpose { (w, h) } else { (h, w) };
        Tensor::from_fn([n, c, oh, ow], |[ni, ci, y, xx]| {
            let (sy, sx) = self.source(y, xx, oh, ow);
            x.at([ni, ci, sy, sx])
        })
    }

    /// `self` after `first`: `(self ∘ first)(x) = self(first(x))`.
    pub fn compose(self, first: Dihedral) -> Dihedral {
        // Compose on a small non-square probe so the result is unambiguous.
        let probe = Tensor::<f64>::from_fn([1, 1, 2, 3], |[_, _, y, x]| (y * 3 + x) as f64);
        let target = self.apply(&first.apply(&probe));
        Self::all()
            .into_iter()
            .find(|d| d.apply(&probe) == target)
            .expect("dihedral group is closed")
    }

    pub fn inverse(self) -> Dihedral {
        Self::all().into_iter().find(|d| d.compose(self) == Self::IDENTITY).expect("inverse exists")
    }
}

/// Applies one random dihedral transform identically to both sides.
pub fn augment<T: Scalar, R: Rng + ?Sized>(pair: &PatchPair<T>, rng: &mut R) -> PatchPair<T> {
    augment_with(pair, Dihedral::random(rng))
}

pub fn augment_with<T: Scalar>(pair: &PatchPair<T>, d: Dihedral) -> PatchPair<T> {
    PatchPair { lr: d.apply(&pair.lr), hr: d.apply(&pair.hr), scale: pair.scale }
}

/// `lambda * a + (1 - lambda) * b` on both the HR and LR sides.
pub fn mixup<T: Scalar>(a: &PatchPair<T>, b: &PatchPair<T>, lambda: f64) -> Result<PatchPair<T>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParameter(format!("mixup lambda {lambda} outside [0, 1]")));
    }
    if a.scale != b.scale {
        return Err(Error::Shape(format!("mixing x{} with x{}", a.scale, b.scale)));
    }
    let l = T::lit(lambda);
    let m = T::lit(1.0 - lambda);
    Ok(PatchPair {
        lr: a.lr.zip_map(&b.lr, |x, y| l * x + m * y)?,
        hr: a.hr.zip_map(&b.hr, |x, y| l * x + m * y)?,
        scale: a.scale,
    })
}
