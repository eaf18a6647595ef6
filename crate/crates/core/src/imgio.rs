//! Rasters, image file I/O and subpixel sampling.
//!
//! [`Field`] is an unconstrained real-valued raster (derivatives, responses,
//! difference-of-Gaussian planes). [`GrayImage`] wraps a field whose samples
//! are intensities in `[0, 1]`.

use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};

use crate::error::{Error, Result};

/// Rec. 601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Row-major real-valued raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "zero dimension {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "zero-sized field");
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "zero-sized field");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Sample with symmetric (edge-duplicating) reflection for out-of-range indices.
    #[inline]
    pub fn get_reflect(&self, x: isize, y: isize) -> f64 {
        self.get(reflect(x, self.width), reflect(y, self.height))
    }

    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let cx = x.clamp(0, self.width as isize - 1) as usize;
        let cy = y.clamp(0, self.height as isize - 1) as usize;
        self.get(cx, cy)
    }

    pub fn same_dims(&self, other: &Field) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Field {
        assert!(self.same_dims(other), "field dimensions differ");
        Field {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        assert!(self.same_dims(other), "field dimensions differ");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Bilinear interpolation; `None` outside `[0, w-1] x [0, h-1]`.
    pub fn bilinear(&self, x: f64, y: f64) -> Option<f64> {
        if !x.is_finite() || !y.is_finite() {
            return None;
        }
        let (wmax, hmax) = ((self.width - 1) as f64, (self.height - 1) as f64);
        if x < 0.0 || y < 0.0 || x > wmax || y > hmax {
            return None;
        }
        Some(self.bilinear_inside(x, y))
    }

    /// Bilinear interpolation with coordinates clamped to the raster.
    pub fn bilinear_clamped(&self, x: f64, y: f64) -> f64 {
        let x = if x.is_finite() { x } else { 0.0 };
        let y = if y.is_finite() { y } else { 0.0 };
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        self.bilinear_inside(x, y)
    }

    fn bilinear_inside(&self, x: f64, y: f64) -> f64 {
        let x0 = (x.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (y.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Keep every second sample in both directions.
    pub fn decimate(&self) -> Field {
        let w = self.width.div_ceil(2);
        let h = self.height.div_ceil(2);
        Field::from_fn(w, h, |x, y| self.get(2 * x, 2 * y))
    }
}

/// Symmetric boundary reflection: `-1 -> 0`, `-2 -> 1`, `n -> n-1`.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Single-channel image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage(Field);

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("intensity {v} outside [0, 1]")));
        }
        Field::new(width, height, data).map(Self)
    }

    /// Wrap a field, clamping every sample into `[0, 1]`.
    pub fn from_field_clamped(mut field: Field) -> Self {
        for v in field.data_mut() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self(field)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::from_field_clamped(Field::filled(width, height, value))
    }

    pub fn from_fn(width: usize, height: usize, f: impl FnMut(usize, usize) -> f64) -> Self {
        Self::from_field_clamped(Field::from_fn(width, height, f))
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.0.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.0.height
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.0.get(x, y)
    }

    pub fn as_field(&self) -> &Field {
        &self.0
    }

    pub fn into_field(self) -> Field {
        self.0
    }

    /// Quarter turn: output `(x, y)` takes input `(w-1-y, x)`.
    pub fn rotate90(&self) -> GrayImage {
        let (w, h) = (self.width(), self.height());
        GrayImage::from_fn(h, w, |x, y| self.get(w - 1 - y, x))
    }
}

/// Bilinear sample; coordinates outside `[0, w-1] x [0, h-1]` give 0.
pub fn bilinear_sample(img: &GrayImage, x: f64, y: f64) -> f64 {
    img.as_field().bilinear(x, y).unwrap_or(0.0)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?
        .with_guessed_format()
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
        Some(other) => return Err(Error::UnsupportedFormat(format!("{other:?}"))),
        None => {
            return Err(Error::UnsupportedFormat(format!(
                "unrecognized content in {}",
                path.display()
            )))
        }
    }
    let decoded = reader.decode().map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    from_dynamic(&decoded)
}

fn from_dynamic(img: &DynamicImage) -> Result<GrayImage> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::InvalidImage(format!("zero dimension {w}x{h}")));
    }
    let data: Vec<f64> = if img.color().has_color() {
        img.to_rgb8()
            .pixels()
            .map(|p| {
                let [r, g, b] = p.0;
                (LUMA_WEIGHTS[0] * r as f64
                    + LUMA_WEIGHTS[1] * g as f64
                    + LUMA_WEIGHTS[2] * b as f64)
                    / 255.0
            })
            .collect()
    } else {
        img.to_luma8()
            .pixels()
            .map(|p| p.0[0] as f64 / 255.0)
            .collect()
    };
    Ok(GrayImage::from_field_clamped(Field::new(w, h, data)?))
}

#[inline]
pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write an 8-bit grayscale PNG.
pub fn save_image(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    let out = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, buf)
        .expect("buffer length matches dimensions");
    out.save_with_format(path, ImageFormat::Png)
        .map_err(|e| encode_error(path, e))
}

/// Write an 8-bit RGB PNG from interleaved samples.
pub fn save_rgb(width: usize, height: usize, rgb: Vec<u8>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let out = image::RgbImage::from_raw(width as u32, height as u32, rgb)
        .ok_or_else(|| Error::InvalidImage("rgb buffer length mismatch".into()))?;
    out.save_with_format(path, ImageFormat::Png)
        .map_err(|e| encode_error(path, e))
}

/// Write a field as an 8-bit PNG after linear min/max stretch. Debug helper.
pub fn save_field_normalized(field: &Field, path: impl AsRef<Path>) -> Result<()> {
    let (lo, hi) = field.min_max();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img = GrayImage::from_field_clamped(field.map(|v| (v - lo) / span));
    save_image(&img, path)
}

fn encode_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Encode {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}
