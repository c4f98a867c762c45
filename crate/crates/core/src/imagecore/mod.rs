//! Raster primitives shared by every stage: intensity images, binary masks,
//! resampling, spur-anchored cropping, mirroring, band drawing and PGM I/O.
//!
//! Pixel centers sit at integer coordinates throughout the crate; a raster of
//! width `w` therefore spans the continuous interval `[-0.5, w - 0.5]`.

mod band;
mod crop;
mod pgm;
mod resample;

pub use band::draw_band;
pub use crop::{crop_mask_window, crop_window, CropTransform, Half};
pub use pgm::{read_pgm, read_pgm_mask, write_pgm, write_pgm_mask};
pub use resample::{downsample2, downsample2_mask, mirror_horizontal, mirror_mask, resize_area, resize_bilinear};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-channel image with intensities in `[0, 1]` and an isotropic pixel pitch.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
    pitch_mm: f64,
}

impl Image {
    pub fn new(width: usize, height: usize, pitch_mm: f64) -> Self {
        Self::filled(width, height, pitch_mm, 0.0)
    }

    pub fn filled(width: usize, height: usize, pitch_mm: f64, value: f32) -> Self {
        assert!(pitch_mm > 0.0, "pitch must be positive");
        Self {
            width,
            height,
            pixels: vec![value.clamp(0.0, 1.0); width * height],
            pitch_mm,
        }
    }

    /// Wrap row-major pixels. Values are validated against `[0, 1]`.
    pub fn from_pixels(width: usize, height: usize, pitch_mm: f64, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::InvalidDimensions(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if !(pitch_mm > 0.0 && pitch_mm.is_finite()) {
            return Err(Error::InvalidDimensions(format!("pitch {pitch_mm} mm")));
        }
        if let Some(v) = pixels.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::InvalidDimensions(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
            pitch_mm,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pitch_mm(&self) -> f64 {
        self.pitch_mm
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Value at a possibly out-of-bounds location; outside reads as 0.
    #[inline]
    pub fn get_or_zero(&self, x: i64, y: i64) -> f32 {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            0.0
        } else {
            self.pixels[y as usize * self.width + x as usize]
        }
    }

    /// Store a value, clamping it into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.pixels[y * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn mean(&self) -> f64 {
        if self.pixels.is_empty() {
            return 0.0;
        }
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }

    pub(crate) fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }
}

/// Geometry a mask lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskFrame {
    FullRes,
    CropHalf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
    frame: MaskFrame,
}

impl Mask {
    pub fn new(width: usize, height: usize, frame: MaskFrame) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
            frame,
        }
    }

    pub fn from_bits(width: usize, height: usize, frame: MaskFrame, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::InvalidDimensions(format!(
                "{} bits for a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
            frame,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn frame(&self) -> MaskFrame {
        self.frame
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Out-of-bounds reads are `false`.
    #[inline]
    pub fn get_or_false(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && x < self.width as i64
            && y < self.height as i64
            && self.bits[y as usize * self.width + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn with_frame(mut self, frame: MaskFrame) -> Self {
        self.frame = frame;
        self
    }

    /// Element-wise OR with a mask of identical dimensions.
    pub fn union(&self, other: &Mask) -> Result<Mask> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::InvalidDimensions("mask union of different sizes".into()));
        }
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect();
        Ok(Mask {
            bits,
            ..self.clone()
        })
    }

    /// Render as a 0/1 intensity image.
    pub fn to_image(&self, pitch_mm: f64) -> Image {
        let pixels = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Image {
            width: self.width,
            height: self.height,
            pixels,
            pitch_mm,
        }
    }

    pub(crate) fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }
}
