use std::path::Path;

use image::{ImageFormat, ImageReader, RgbImage};

use crate::error::{arg_err, IaplError, Result};

/// RGB image with channel-interleaved row-major values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return arg_err("image dimensions must be at least 1");
        }
        if data.len() != height * width * 3 {
            return arg_err(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                height * width * 3,
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return arg_err(format!("pixel value {v} outside [0, 1]"));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
    }

    /// Builds an image from a per-pixel function returning `[r, g, b]`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn crop(&self, x: usize, y: usize, h: usize, w: usize) -> Result<Image> {
        if h == 0 || w == 0 || y + h > self.height || x + w > self.width {
            return arg_err(format!(
                "crop {w}x{h} at ({x},{y}) outside {}x{} image",
                self.width, self.height
            ));
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Ok(Image { height: h, width: w, data })
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                let i = (y * self.width + x) * 3;
                data.extend_from_slice(&self.data[i..i + 3]);
            }
        }
        Image {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// BT.601 luma, row-major `height × width`.
    pub fn to_gray(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let bytes = self
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Image> {
        let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Image::new(img.height() as usize, img.width() as usize, data)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, ImageFormat::Png)
            .map_err(map_image_err)
    }
}

fn map_image_err(e: image::ImageError) -> IaplError {
    match e {
        image::ImageError::IoError(io) => IaplError::Io(io),
        other => IaplError::Format(other.to_string()),
    }
}

/// Reads an 8-bit PNG or binary PPM file into a normalized image.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)?.with_guessed_format()?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
        Some(other) => {
            return Err(IaplError::Format(format!(
                "{}: unsupported image format {other:?}",
                path.display()
            )))
        }
        None => {
            return Err(IaplError::Format(format!(
                "{}: unrecognized image format",
                path.display()
            )))
        }
    }
    let decoded = reader.decode().map_err(map_image_err)?;
    Image::from_rgb8(&decoded.to_rgb8())
}

/// Bilinear resampling with corner-aligned sample positions.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return arg_err("resize target must be at least 1x1");
    }
    let ys = sample_positions(img.height, out_h);
    let xs = sample_positions(img.width, out_w);
    let mut data = Vec::with_capacity(out_h * out_w * 3);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            for c in 0..3 {
                let top = img.get(y0, x0, c) * (1.0 - tx) + img.get(y0, x1, c) * tx;
                let bot = img.get(y1, x0, c) * (1.0 - tx) + img.get(y1, x1, c) * tx;
                let v = top * (1.0 - ty) + bot * ty;
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Image::new(out_h, out_w, data)
}

fn sample_positions(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let pos = if n_out == 1 {
                (n_in - 1) as f64 / 2.0
            } else {
                (i * (n_in - 1)) as f64 / (n_out - 1) as f64
            };
            let i0 = (pos.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}
