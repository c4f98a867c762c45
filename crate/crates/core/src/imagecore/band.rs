use super::{Mask, MaskFrame};
use crate::error::{Error, Result};

#[inline]
fn dist2_to_segment(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx - px, a.1 + t * dy - py);
    cx * cx + cy * cy
}

/// Rasterize a band around a polyline: a pixel is set iff the Euclidean
/// distance from its center to the polyline is at most `band_width / 2`.
///
/// A single-point polyline yields a disc; an empty polyline an empty mask.
pub fn draw_band(width: usize, height: usize, polyline: &[(f64, f64)], band_width: usize) -> Result<Mask> {
    if band_width == 0 || band_width % 2 == 0 {
        return Err(Error::InvalidDimensions(format!(
            "band width must be odd and positive, got {band_width}"
        )));
    }
    let mut mask = Mask::new(width, height, MaskFrame::FullRes);
    if polyline.is_empty() || width == 0 || height == 0 {
        return Ok(mask);
    }
    let r = band_width as f64 / 2.0;
    let r2 = r * r;
    let segments: Vec<((f64, f64), (f64, f64))> = if polyline.len() == 1 {
        vec![(polyline[0], polyline[0])]
    } else {
        polyline.windows(2).map(|w| (w[0], w[1])).collect()
    };
    for &(a, b) in &segments {
        let x0 = (a.0.min(b.0) - r).floor().max(0.0);
        let x1 = (a.0.max(b.0) + r).ceil().min(width as f64 - 1.0);
        let y0 = (a.1.min(b.1) - r).floor().max(0.0);
        let y1 = (a.1.max(b.1) + r).ceil().min(height as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                if !mask.get(x, y) && dist2_to_segment(x as f64, y as f64, a, b) <= r2 {
                    mask.set(x, y, true);
                }
            }
        }
    }
    Ok(mask)
}
