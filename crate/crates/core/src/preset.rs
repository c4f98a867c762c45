//! Scale presets and the coordinate frames derived from them.
//!
//! The `full` preset reproduces the native B-scan raster (2133×1466 px over a
//! 16 mm field of view). The `desk` preset shrinks every pixel constant by
//! 512/2133 so the whole pipeline trains on a single CPU core.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Horizontal field of view of a B-scan.
pub const FIELD_OF_VIEW_MM: f64 = 16.0;
/// Number of radial B-scans per volume.
pub const SLICES_PER_SCAN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Full,
    Desk,
}

impl Preset {
    pub fn geometry(self) -> Geometry {
        match self {
            Preset::Full => Geometry {
                preset: self,
                slice_width: 2133,
                slice_height: 1466,
                locator_width: 512,
                locator_height: 352,
                crop: CropSpec {
                    width: 1920,
                    height: 768,
                    anchor_row: 600,
                },
                band_width: 15,
            },
            Preset::Desk => Geometry {
                preset: self,
                slice_width: 512,
                slice_height: 352,
                locator_width: 128,
                locator_height: 88,
                crop: CropSpec {
                    width: 448,
                    height: 192,
                    anchor_row: 150,
                },
                band_width: 5,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::Desk => "desk",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::InvalidConfig(format!("unknown preset `{other}`"))),
        }
    }
}

/// Size of the spur-anchored crop window and the row that receives the spur line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub width: usize,
    pub height: usize,
    pub anchor_row: usize,
}

impl CropSpec {
    pub const FULL: CropSpec = CropSpec {
        width: 1920,
        height: 768,
        anchor_row: 600,
    };
}

/// Coordinate frames in which spur points and masks may be expressed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    /// Native slice raster of the preset.
    FullRes,
    /// Downscaled raster consumed by the spur locator.
    LocatorRes,
    /// One downsampled half of the spur-anchored crop.
    CropHalf,
}

impl Frame {
    pub fn name(self) -> &'static str {
        match self {
            Frame::FullRes => "full_res",
            Frame::LocatorRes => "locator_res",
            Frame::CropHalf => "crop_half",
        }
    }
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Frame {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_res" => Ok(Frame::FullRes),
            "locator_res" => Ok(Frame::LocatorRes),
            "crop_half" => Ok(Frame::CropHalf),
            other => Err(Error::Frame(format!("unknown frame `{other}`"))),
        }
    }
}

/// Every pixel constant of one preset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub preset: Preset,
    pub slice_width: usize,
    pub slice_height: usize,
    pub locator_width: usize,
    pub locator_height: usize,
    pub crop: CropSpec,
    /// Width of annotation bands drawn over detached graft, slice px. Always odd.
    pub band_width: usize,
}

impl Geometry {
    /// Isotropic slice pitch, mm/px.
    pub fn pitch_mm(&self) -> f64 {
        FIELD_OF_VIEW_MM / self.slice_width as f64
    }

    /// Ratio of this preset's pixel size to the full preset's.
    pub fn scale(&self) -> f64 {
        self.slice_width as f64 / 2133.0
    }

    /// Scale a pixel constant defined at full resolution, rounding to the nearest integer.
    pub fn scale_px(&self, full_res_px: f64) -> f64 {
        (full_res_px * self.scale()).round()
    }

    /// Column (in pixel-center coordinates) through which the scan axis passes.
    pub fn axis_column(&self) -> f64 {
        (self.slice_width as f64 - 1.0) / 2.0
    }

    pub fn half_crop_width(&self) -> usize {
        self.crop.width / 4
    }

    pub fn half_crop_height(&self) -> usize {
        self.crop.height / 2
    }

    pub fn pitch(&self, frame: Frame) -> f64 {
        match frame {
            Frame::FullRes => self.pitch_mm(),
            Frame::LocatorRes => FIELD_OF_VIEW_MM / self.locator_width as f64,
            Frame::CropHalf => 2.0 * self.pitch_mm(),
        }
    }

    /// Frame dimensions (width, height) in px.
    pub fn dims(&self, frame: Frame) -> (usize, usize) {
        match frame {
            Frame::FullRes => (self.slice_width, self.slice_height),
            Frame::LocatorRes => (self.locator_width, self.locator_height),
            Frame::CropHalf => (self.half_crop_width(), self.half_crop_height()),
        }
    }

    pub fn px_to_mm(&self, px: f64, frame: Frame) -> f64 {
        px * self.pitch(frame)
    }

    pub fn mm_to_px(&self, mm: f64, frame: Frame) -> f64 {
        mm / self.pitch(frame)
    }

    /// Map a point between the slice raster and the locator raster.
    ///
    /// Pixel centers sit at integer coordinates and both rasters cover the
    /// same field, so the map is `(p + 0.5) * ratio - 0.5` per axis. Crop
    /// frames depend on a particular crop and are handled by
    /// [`crate::imagecore::CropTransform`].
    pub fn frame_convert(&self, point: (f64, f64), from: Frame, to: Frame) -> Result<(f64, f64)> {
        if from == to {
            return Ok(point);
        }
        let rx = self.slice_width as f64 / self.locator_width as f64;
        let ry = self.slice_height as f64 / self.locator_height as f64;
        match (from, to) {
            (Frame::LocatorRes, Frame::FullRes) => Ok((
                (point.0 + 0.5) * rx - 0.5,
                (point.1 + 0.5) * ry - 0.5,
            )),
            (Frame::FullRes, Frame::LocatorRes) => Ok((
                (point.0 + 0.5) / rx - 0.5,
                (point.1 + 0.5) / ry - 0.5,
            )),
            _ => Err(Error::Frame(format!(
                "no crop-independent mapping from {from} to {to}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (hw, hh) = self.dims(Frame::CropHalf);
        if hw % 16 != 0 || hh % 16 != 0 || self.crop.width % 4 != 0 || self.crop.height % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "half-crop {hw}x{hh} is not divisible by 16"
            )));
        }
        if self.band_width % 2 == 0 {
            return Err(Error::InvalidConfig("band width must be odd".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn locator_pitch_reproduces_reported_conversions() {
        let g = Preset::Full.geometry();
        assert_eq!(g.pitch(Frame::LocatorRes), 0.03125);
        for (px, mm) in [(4.97, 0.155), (2.87, 0.090), (8.79, 0.275), (4.48, 0.140)] {
            assert!((g.px_to_mm(px, Frame::LocatorRes) - mm).abs() <= 5e-4, "{px}");
        }
    }

    #[test]
    fn crop_half_dims_match_presets() {
        assert_eq!(Preset::Full.geometry().dims(Frame::CropHalf), (480, 384));
        assert_eq!(Preset::Desk.geometry().dims(Frame::CropHalf), (112, 96));
        Preset::Full.geometry().validate().unwrap();
        Preset::Desk.geometry().validate().unwrap();
    }

    #[test]
    fn crop_half_pitch_is_double_slice_pitch() {
        let g = Preset::Full.geometry();
        assert!((g.pitch(Frame::CropHalf) - 0.015).abs() < 1e-5);
    }

    #[test]
    fn frame_round_trip() {
        let g = Preset::Full.geometry();
        let p = (1234.0, 567.0);
        let q = g.frame_convert(p, Frame::FullRes, Frame::LocatorRes).unwrap();
        let r = g.frame_convert(q, Frame::LocatorRes, Frame::FullRes).unwrap();
        assert!((r.0 - p.0).abs() < 1e-9 && (r.1 - p.1).abs() < 1e-9);
        assert!(g.frame_convert(p, Frame::FullRes, Frame::CropHalf).is_err());
    }

    #[test]
    fn unknown_frame_name_is_frame_error() {
        let err = "polar".parse::<Frame>().unwrap_err();
        assert_eq!(err.code(), "FrameError");
    }
}
