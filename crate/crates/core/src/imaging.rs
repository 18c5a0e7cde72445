//! Raster images, masks, file I/O, colour conversion and interpolation.
//!
//! Pixel data is kept as normalized `f32` in `[0, 1]`; 8-bit quantization only
//! happens when reading or writing files.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

/// A row-major, channel-interleaved image with 1 or 3 channels.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be non-zero"));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// An image with every sample set to `value` (clamped to `[0,1]`).
    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        assert!(channels == 1 || channels == 3);
        Self {
            width,
            height,
            channels,
            data: vec![value.clamp(0.0, 1.0); width * height * channels],
        }
    }

    /// Build an image from a per-pixel closure. Values are clamped to `[0,1]`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        assert!(channels == 1 || channels == 3);
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c).clamp(0.0, 1.0));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v.clamp(0.0, 1.0);
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Three-channel copy; grayscale is replicated.
    pub fn to_rgb(&self) -> RasterImage {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        RasterImage {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    /// Single-channel luma (ITU-R BT.601 weights).
    pub fn to_gray(&self) -> RasterImage {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
            .collect();
        RasterImage {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Copy of the window `[x0, x0+w) x [y0, y0+h)`, which must lie inside the image.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<RasterImage> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::invalid(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * self.channels);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        Ok(RasterImage {
            width: w,
            height: h,
            channels: self.channels,
            data,
        })
    }

    /// Paste `patch` with its top-left corner at `(x0, y0)`; it must fit.
    pub fn paste(&mut self, patch: &RasterImage, x0: usize, y0: usize) {
        assert_eq!(patch.channels, self.channels);
        assert!(x0 + patch.width <= self.width && y0 + patch.height <= self.height);
        let c = self.channels;
        for y in 0..patch.height {
            let dst = ((y0 + y) * self.width + x0) * c;
            let src = y * patch.width * c;
            self.data[dst..dst + patch.width * c]
                .copy_from_slice(&patch.data[src..src + patch.width * c]);
        }
    }

    /// Resample to `w x h` with bilinear interpolation, aligning pixel centres.
    pub fn resize_bilinear(&self, w: usize, h: usize) -> RasterImage {
        if w == self.width && h == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / w as f64;
        let sy = self.height as f64 / h as f64;
        let mut out = vec![0.0f32; w * h * self.channels];
        let mut px = vec![0.0f32; self.channels];
        for y in 0..h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            for x in 0..w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                self.sample_unchecked(fx, fy, &mut px);
                let i = (y * w + x) * self.channels;
                out[i..i + self.channels].copy_from_slice(&px);
            }
        }
        RasterImage {
            width: w,
            height: h,
            channels: self.channels,
            data: out,
        }
    }

    /// Bilinear sample of all channels at `(x, y)` into `out`, or `false` if the
    /// point lies outside `[0, width-1] x [0, height-1]`.
    #[inline]
    pub fn sample_into(&self, x: f64, y: f64, out: &mut [f32]) -> bool {
        if !(x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64)
        {
            return false;
        }
        self.sample_unchecked(x, y, out);
        true
    }

    #[inline]
    fn sample_unchecked(&self, x: f64, y: f64, out: &mut [f32]) {
        let x0 = (x.floor() as usize).min(self.width - 1);
        let y0 = (y.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = (x - x0 as f64) as f32;
        let ty = (y - y0 as f64) as f32;
        let c = self.channels;
        for (ch, o) in out.iter_mut().enumerate().take(c) {
            let p00 = self.data[(y0 * self.width + x0) * c + ch];
            let p10 = self.data[(y0 * self.width + x1) * c + ch];
            let p01 = self.data[(y1 * self.width + x0) * c + ch];
            let p11 = self.data[(y1 * self.width + x1) * c + ch];
            let top = p00 + (p10 - p00) * tx;
            let bottom = p01 + (p11 - p01) * tx;
            *o = top + (bottom - top) * ty;
        }
    }

    /// Write as an 8-bit PNG (values rounded to the nearest quantum).
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
        let w = self.width as u32;
        let h = self.height as u32;
        let dynimg = if self.channels == 3 {
            DynamicImage::ImageRgb8(
                ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes).expect("buffer size"),
            )
        } else {
            DynamicImage::ImageLuma8(
                ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes).expect("buffer size"),
            )
        };
        dynimg
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Encode {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
    }
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Decode a PNG or JPEG file. Grayscale files load with one channel, everything
/// else as RGB (alpha is dropped).
pub fn load_image(path: impl AsRef<Path>) -> Result<RasterImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (width, height) = (decoded.width() as usize, decoded.height() as usize);
    let gray = matches!(
        decoded.color(),
        image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
    );
    let (channels, raw) = if gray {
        (1, decoded.into_luma8().into_raw())
    } else {
        (3, decoded.into_rgb8().into_raw())
    };
    let data = raw.into_iter().map(|b| b as f32 / 255.0).collect();
    RasterImage::new(width, height, channels, data)
}

/// Bilinear interpolation at a continuous point inside the image.
pub fn bilinear_sample(image: &RasterImage, x: f64, y: f64) -> Result<Vec<f32>> {
    let mut out = vec![0.0; image.channels()];
    if image.sample_into(x, y, &mut out) {
        Ok(out)
    } else {
        Err(Error::invalid(format!(
            "sample point ({x}, {y}) outside {}x{} image",
            image.width(),
            image.height()
        )))
    }
}

/// A CIE L*a*b* colour.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LabColor {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl LabColor {
    pub fn distance(&self, other: &LabColor) -> f64 {
        let (dl, da, db) = (self.l - other.l, self.a - other.a, self.b - other.b);
        (dl * dl + da * da + db * db).sqrt()
    }
}

// sRGB primaries to XYZ under D65.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];
const WHITE_X: f64 = 0.412_456_4 + 0.357_576_1 + 0.180_437_5;
const WHITE_Z: f64 = 0.019_333_9 + 0.119_192_0 + 0.950_304_1;
const LAB_EPS: f64 = 216.0 / 24389.0;
const LAB_KAPPA: f64 = 24389.0 / 27.0;

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > LAB_EPS {
        t.cbrt()
    } else {
        (LAB_KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let t = f * f * f;
    if t > LAB_EPS {
        t
    } else {
        (116.0 * f - 16.0) / LAB_KAPPA
    }
}

/// Convert one sRGB triple in `[0,1]` to Lab (D65).
pub fn srgb_to_lab(rgb: [f64; 3]) -> LabColor {
    let lin = rgb.map(srgb_to_linear);
    let xyz: [f64; 3] =
        std::array::from_fn(|r| (0..3).map(|c| RGB_TO_XYZ[r][c] * lin[c]).sum());
    let fx = lab_f(xyz[0] / WHITE_X);
    let fy = lab_f(xyz[1]);
    let fz = lab_f(xyz[2] / WHITE_Z);
    LabColor {
        l: 116.0 * fy - 16.0,
        a: 500.0 * (fx - fy),
        b: 200.0 * (fy - fz),
    }
}

/// Inverse of [`srgb_to_lab`]; out-of-gamut results are clamped to `[0,1]`.
pub fn lab_to_srgb(lab: LabColor) -> [f64; 3] {
    let fy = (lab.l + 16.0) / 116.0;
    let fx = fy + lab.a / 500.0;
    let fz = fy - lab.b / 200.0;
    let xyz = [lab_f_inv(fx) * WHITE_X, lab_f_inv(fy), lab_f_inv(fz) * WHITE_Z];
    let m = nalgebra::Matrix3::from_fn(|r, c| RGB_TO_XYZ[r][c]);
    let inv = m.try_inverse().expect("sRGB matrix is invertible");
    let lin = inv * nalgebra::Vector3::new(xyz[0], xyz[1], xyz[2]);
    [0, 1, 2].map(|i| linear_to_srgb(lin[i].max(0.0)).clamp(0.0, 1.0))
}

/// Per-pixel Lab planes of an image.
#[derive(Clone, Debug)]
pub struct LabImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<LabColor>,
}

impl LabImage {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> LabColor {
        self.pixels[y * self.width + x]
    }
}

/// Convert an RGB image to Lab. Grayscale input is rejected.
pub fn rgb_to_lab(image: &RasterImage) -> Result<LabImage> {
    if image.channels() != 3 {
        return Err(Error::invalid("Lab conversion needs a 3-channel image"));
    }
    let pixels = image
        .data()
        .chunks_exact(3)
        .map(|p| srgb_to_lab([p[0] as f64, p[1] as f64, p[2] as f64]))
        .collect();
    Ok(LabImage {
        width: image.width(),
        height: image.height(),
        pixels,
    })
}

/// A binary raster (`0` or `1` per pixel).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid("mask data length mismatch"));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(x, y) as u8;
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Single-channel image with 0.0/1.0 values.
    pub fn to_image(&self) -> RasterImage {
        RasterImage {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    /// Threshold a single-channel image at `0.5` (inclusive).
    pub fn from_image(img: &RasterImage) -> Mask {
        let g = img.to_gray();
        Mask {
            width: g.width,
            height: g.height,
            data: g.data.iter().map(|&v| (v >= 0.5) as u8).collect(),
        }
    }

    /// Set pixels grown by `r` pixels in the 8-neighbourhood (Chebyshev ball).
    pub fn dilate(&self, r: usize) -> Mask {
        let mut out = Mask::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(x, y) {
                    continue;
                }
                let (xa, xb) = (x.saturating_sub(r), (x + r).min(self.width - 1));
                let (ya, yb) = (y.saturating_sub(r), (y + r).min(self.height - 1));
                for yy in ya..=yb {
                    for xx in xa..=xb {
                        out.set(xx, yy, true);
                    }
                }
            }
        }
        out
    }

    /// Bounding box `(x0, y0, x1, y1)` of set pixels, exclusive on the max side.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x + 1, y + 1),
                        Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x + 1), d.max(y + 1)),
                    });
                }
            }
        }
        bb
    }
}
