use serde::{Deserialize, Serialize};

use super::{Image, Mask, MaskFrame};
use crate::preset::CropSpec;

/// Side of a radial B-scan relative to the scan axis. Inferior is the
/// left (negative radial coordinate) side by convention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Half {
    Inferior,
    Superior,
}

impl Half {
    pub const BOTH: [Half; 2] = [Half::Inferior, Half::Superior];

    pub fn name(self) -> &'static str {
        match self {
            Half::Inferior => "inferior",
            Half::Superior => "superior",
        }
    }

    /// Index used for half-slice addressing: inferior 0, superior 1.
    pub fn index(self) -> usize {
        match self {
            Half::Inferior => 0,
            Half::Superior => 1,
        }
    }
}

/// Maps slice coordinates into a crop (or one half of it) and back.
///
/// The forward map is translate by `-origin`, for the superior half shift by
/// half the window width and optionally reflect, then scale by
/// `1 / downsample` in pixel-center coordinates. Every step is exact in
/// binary floating point for integer inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub slice: usize,
    pub half: Option<Half>,
    pub origin_x: i64,
    pub origin_y: i64,
    /// Width of the whole crop window in slice px.
    pub window_width: usize,
    pub mirrored: bool,
    pub downsample: usize,
}

impl CropTransform {
    pub fn window(slice: usize, origin_x: i64, origin_y: i64, window_width: usize) -> Self {
        Self {
            slice,
            half: None,
            origin_x,
            origin_y,
            window_width,
            mirrored: false,
            downsample: 1,
        }
    }

    /// Transform for one half of this window. The superior half is reflected.
    pub fn for_half(&self, half: Half, downsample: usize) -> Self {
        Self {
            half: Some(half),
            mirrored: half == Half::Superior,
            downsample,
            ..*self
        }
    }

    fn half_width(&self) -> f64 {
        (self.window_width / 2) as f64
    }

    /// Slice coordinates → local (crop or half-crop) coordinates.
    pub fn to_local(&self, p: (f64, f64)) -> (f64, f64) {
        let mut x = p.0 - self.origin_x as f64;
        let y = p.1 - self.origin_y as f64;
        if self.half == Some(Half::Superior) {
            x -= self.half_width();
        }
        if self.mirrored {
            x = self.half_width() - 1.0 - x;
        }
        let d = self.downsample as f64;
        ((x + 0.5) / d - 0.5, (y + 0.5) / d - 0.5)
    }

    /// Local coordinates → slice coordinates.
    pub fn to_slice(&self, p: (f64, f64)) -> (f64, f64) {
        let d = self.downsample as f64;
        let mut x = (p.0 + 0.5) * d - 0.5;
        let y = (p.1 + 0.5) * d - 0.5;
        if self.mirrored {
            x = self.half_width() - 1.0 - x;
        }
        if self.half == Some(Half::Superior) {
            x += self.half_width();
        }
        (x + self.origin_x as f64, y + self.origin_y as f64)
    }

    /// Slice columns covered by local column `c` (before downsampling there is one).
    pub fn source_columns(&self, c: usize) -> impl Iterator<Item = i64> + '_ {
        let d = self.downsample;
        (0..d).map(move |k| {
            let local_full = (c * d + k) as f64;
            let mut x = local_full;
            if self.mirrored {
                x = self.half_width() - 1.0 - x;
            }
            if self.half == Some(Half::Superior) {
                x += self.half_width();
            }
            x as i64 + self.origin_x
        })
    }
}

/// The window is centered on the half-integer `floor(center_x) + 0.5`, which
/// commutes with reflecting the slice for every non-integer center.
fn window_origin(center_x: f64, anchor_y: f64, spec: &CropSpec) -> (i64, i64) {
    (
        center_x.floor() as i64 + 1 - (spec.width / 2) as i64,
        anchor_y.round() as i64 - spec.anchor_row as i64,
    )
}

/// Cut a `spec.width × spec.height` window whose horizontal center is
/// `center_x` and which places row `anchor_y` at `spec.anchor_row`.
/// Regions outside the source read as 0.
pub fn crop_window(img: &Image, center_x: f64, anchor_y: f64, spec: &CropSpec) -> (Image, CropTransform) {
    let (ox, oy) = window_origin(center_x, anchor_y, spec);
    let mut out = Image::new(spec.width, spec.height, img.pitch_mm());
    let (w, h) = (img.width() as i64, img.height() as i64);
    for cy in 0..spec.height {
        let sy = oy + cy as i64;
        if sy < 0 || sy >= h {
            continue;
        }
        let x_lo = (-ox).clamp(0, spec.width as i64) as usize;
        let x_hi = (w - ox).clamp(0, spec.width as i64) as usize;
        if x_lo >= x_hi {
            continue;
        }
        let src_row = &img.pixels()[sy as usize * img.width()..(sy as usize + 1) * img.width()];
        let dst = &mut out.pixels_mut()[cy * spec.width..(cy + 1) * spec.width];
        let s0 = (ox + x_lo as i64) as usize;
        dst[x_lo..x_hi].copy_from_slice(&src_row[s0..s0 + (x_hi - x_lo)]);
    }
    (out, CropTransform::window(0, ox, oy, spec.width))
}

/// Same window as [`crop_window`] applied to a mask.
pub fn crop_mask_window(mask: &Mask, center_x: f64, anchor_y: f64, spec: &CropSpec) -> (Mask, CropTransform) {
    let (ox, oy) = window_origin(center_x, anchor_y, spec);
    let mut out = Mask::new(spec.width, spec.height, MaskFrame::CropHalf);
    for cy in 0..spec.height {
        for cx in 0..spec.width {
            if mask.get_or_false(ox + cx as i64, oy + cy as i64) {
                out.set(cx, cy, true);
            }
        }
    }
    (out, CropTransform::window(0, ox, oy, spec.width))
}
