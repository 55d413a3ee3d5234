//! Image ingestion shared by both networks: luma conversion, bilinear
//! resizing to the network input size, and over-scan cropping.
//!
//! All inputs end up as a [`GrayscaleImage`] with values in `[0, 1]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Edge, Error, Result};

/// Network input side length.
pub const INPUT_SIZE: usize = 256;

/// Rec. 601 luma weights.
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

/// A raster whose maximum exceeds this is treated as byte-range `[0, 255]`.
pub const BYTE_RANGE_THRESHOLD: f32 = 1.5;

/// Recorded in checkpoints so a model is never fed differently prepared pixels.
pub const PREPROCESSING_FINGERPRINT: &str =
    "luma601;byte-threshold=1.5;bilinear-half-pixel;256x256;range=0..1";

/// Single-channel raster in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayscaleImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
    source_id: String,
}

impl GrayscaleImage {
    pub fn new(
        width: usize,
        height: usize,
        pixels: Vec<f32>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::RejectedInput(format!(
                "degenerate image {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::RejectedInput(format!(
                "expected {} pixels for {width}x{height}, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::RejectedInput(format!(
                "pixel value {p} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
            source_id: source_id.into(),
        })
    }

    pub fn filled(width: usize, height: usize, value: f32, source_id: impl Into<String>) -> Result<Self> {
        Self::new(width, height, vec![value; width * height], source_id)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn with_source_id(mut self, source_id: impl Into<String>) -> Self {
        self.source_id = source_id.into();
        self
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn is_network_input(&self) -> bool {
        self.width == INPUT_SIZE && self.height == INPUT_SIZE
    }

    /// Quantize to 8-bit, rounding to nearest.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// Interleaved raster with 1 or 3 channels, in either `[0, 1]` or `[0, 255]`.
#[derive(Debug, Clone)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

/// Over-scan crop rectangle in source pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropRect {
    pub left: u32,
    pub top: u32,
    pub width: u32,
    pub height: u32,
}

impl CropRect {
    pub fn full(img: &GrayscaleImage) -> Self {
        Self {
            left: 0,
            top: 0,
            width: img.width as u32,
            height: img.height as u32,
        }
    }

    /// Checks the rectangle against a `width` x `height` image.
    pub fn check_within(&self, width: usize, height: usize) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::RejectedInput(format!(
                "empty crop rectangle {}x{}",
                self.width, self.height
            )));
        }
        if self.left as usize >= width {
            return Err(Error::Bounds {
                edge: Edge::Left,
                detail: format!("left {} outside width {width}", self.left),
            });
        }
        if self.top as usize >= height {
            return Err(Error::Bounds {
                edge: Edge::Top,
                detail: format!("top {} outside height {height}", self.top),
            });
        }
        let right = self.left as usize + self.width as usize;
        if right > width {
            return Err(Error::Bounds {
                edge: Edge::Right,
                detail: format!("right {right} > width {width}"),
            });
        }
        let bottom = self.top as usize + self.height as usize;
        if bottom > height {
            return Err(Error::Bounds {
                edge: Edge::Bottom,
                detail: format!("bottom {bottom} > height {height}"),
            });
        }
        Ok(())
    }
}

/// Luma conversion with automatic byte-range detection.
pub fn to_grayscale(raster: &Raster, source_id: impl Into<String>) -> Result<GrayscaleImage> {
    if raster.channels != 1 && raster.channels != 3 {
        return Err(Error::RejectedInput(format!(
            "expected 1 or 3 channels, got {}",
            raster.channels
        )));
    }
    if raster.data.len() != raster.width * raster.height * raster.channels {
        return Err(Error::RejectedInput(format!(
            "raster buffer has {} values, expected {}",
            raster.data.len(),
            raster.width * raster.height * raster.channels
        )));
    }
    if raster.data.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::RejectedInput("raster values must be finite and nonnegative".into()));
    }
    let max = raster.data.iter().copied().fold(0.0f32, f32::max);
    let scale = if max > BYTE_RANGE_THRESHOLD { 1.0 / 255.0 } else { 1.0 };
    let pixels = if raster.channels == 1 {
        raster.data.iter().map(|v| (v * scale).clamp(0.0, 1.0)).collect()
    } else {
        raster
            .data
            .chunks_exact(3)
            .map(|px| {
                let y = LUMA_WEIGHTS[0] * px[0] + LUMA_WEIGHTS[1] * px[1] + LUMA_WEIGHTS[2] * px[2];
                (y * scale).clamp(0.0, 1.0)
            })
            .collect()
    };
    GrayscaleImage::new(raster.width, raster.height, pixels, source_id)
}

/// One output coordinate's interpolation taps: `(i0, i1, frac)` with the
/// sample value `(1 - frac) * in[i0] + frac * in[i1]`.
///
/// Half-pixel centers, sources clamped to the valid range. Equal lengths give
/// `frac == 0` and `i0 == o` exactly.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resize of a single-channel buffer.
pub fn resize_plane(src: &[f64], in_w: usize, in_h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let xt = bilinear_taps(in_w, out_w);
    let yt = bilinear_taps(in_h, out_h);
    let mut out = Vec::with_capacity(out_w * out_h);
    for &(y0, y1, fy) in &yt {
        let r0 = &src[y0 * in_w..(y0 + 1) * in_w];
        let r1 = &src[y1 * in_w..(y1 + 1) * in_w];
        for &(x0, x1, fx) in &xt {
            let top = (1.0 - fx) * r0[x0] + fx * r0[x1];
            let bot = (1.0 - fx) * r1[x0] + fx * r1[x1];
            out.push((1.0 - fy) * top + fy * bot);
        }
    }
    out
}

/// Bilinear resize to `size` (width, height). Values stay in `[0, 1]`.
pub fn resize_normalize(img: &GrayscaleImage, size: (usize, usize)) -> Result<GrayscaleImage> {
    let (out_w, out_h) = size;
    if out_w == 0 || out_h == 0 {
        return Err(Error::RejectedInput(format!("degenerate target size {out_w}x{out_h}")));
    }
    if img.width == out_w && img.height == out_h {
        return Ok(img.clone());
    }
    let src: Vec<f64> = img.pixels.iter().map(|&p| p as f64).collect();
    let pixels = resize_plane(&src, img.width, img.height, out_w, out_h)
        .into_iter()
        .map(|v| (v as f32).clamp(0.0, 1.0))
        .collect();
    GrayscaleImage::new(out_w, out_h, pixels, img.source_id.clone())
}

/// Copies the rectangle out of `img` without resampling.
pub fn apply_overscan_crop(img: &GrayscaleImage, rect: CropRect) -> Result<GrayscaleImage> {
    rect.check_within(img.width, img.height)?;
    let (l, t) = (rect.left as usize, rect.top as usize);
    let (w, h) = (rect.width as usize, rect.height as usize);
    let mut pixels = Vec::with_capacity(w * h);
    for y in t..t + h {
        let row = y * img.width;
        pixels.extend_from_slice(&img.pixels[row + l..row + l + w]);
    }
    GrayscaleImage::new(w, h, pixels, img.source_id.clone())
}

/// Reads a PNG/JPEG/PGM file into a grayscale image at its native size.
pub fn load_image(path: &Path, source_id: impl Into<String>) -> Result<GrayscaleImage> {
    let err = |message: String| Error::Image {
        path: path.to_path_buf(),
        message,
    };
    let dynimg = image::open(path).map_err(|e| err(e.to_string()))?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let raster = if dynimg.color().has_color() {
        let rgb = dynimg.to_rgb8();
        Raster {
            width: w,
            height: h,
            channels: 3,
            data: rgb.into_raw().into_iter().map(f32::from).collect(),
        }
    } else {
        // Integer grayscale of any depth becomes [0, 1] directly; the byte
        // threshold would misread a dark 16-bit image.
        let luma = dynimg.to_luma32f();
        Raster {
            width: w,
            height: h,
            channels: 1,
            data: luma.into_raw(),
        }
    };
    to_grayscale(&raster, source_id).map_err(|e| err(e.to_string()))
}

/// Load, crop (optional) and resize to the network input size.
pub fn load_network_input(
    path: &Path,
    source_id: impl Into<String>,
    crop: Option<CropRect>,
) -> Result<GrayscaleImage> {
    let mut img = load_image(path, source_id)?;
    if let Some(rect) = crop {
        img = apply_overscan_crop(&img, rect)?;
    }
    resize_normalize(&img, (INPUT_SIZE, INPUT_SIZE))
}

pub fn save_png(img: &GrayscaleImage, path: &Path) -> Result<()> {
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, img.to_bytes())
        .expect("buffer length matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

pub fn save_rgb_png(width: usize, height: usize, rgb: Vec<u8>, path: &Path) -> Result<()> {
    let buf = image::RgbImage::from_raw(width as u32, height as u32, rgb).ok_or_else(|| Error::Image {
        path: path.to_path_buf(),
        message: "buffer length does not match dimensions".into(),
    })?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Binary (P5) 8-bit PGM.
pub fn write_pgm(width: usize, height: usize, bytes: &[u8], path: &Path) -> Result<()> {
    assert_eq!(bytes.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    std::fs::write(path, out)?;
    Ok(())
}
