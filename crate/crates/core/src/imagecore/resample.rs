use super::{Image, Mask};
use crate::error::{Error, Result};

/// Bilinear resize with edge clamping.
///
/// Output pixel `x` samples source coordinate `(x + 0.5) * sw / dw - 0.5`,
/// so both rasters cover the same field and resizing to the same size is the
/// identity. The pitch is rescaled by the width ratio.
pub fn resize_bilinear(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 || img.width() == 0 || img.height() == 0 {
        return Err(Error::InvalidDimensions(format!(
            "cannot resize {}x{} to {out_w}x{out_h}",
            img.width(),
            img.height()
        )));
    }
    let (sw, sh) = (img.width(), img.height());
    if sw == out_w && sh == out_h {
        return Ok(img.clone());
    }
    let sx = sw as f64 / out_w as f64;
    let sy = sh as f64 / out_h as f64;

    let taps = |n_out: usize, n_src: usize, scale: f64| -> Vec<(usize, usize, f32)> {
        (0..n_out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_src - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let xs = taps(out_w, sw, sx);
    let ys = taps(out_h, sh, sy);

    let src = img.pixels();
    let mut out = Vec::with_capacity(out_w * out_h);
    for &(y0, y1, fy) in &ys {
        let r0 = &src[y0 * sw..(y0 + 1) * sw];
        let r1 = &src[y1 * sw..(y1 + 1) * sw];
        for &(x0, x1, fx) in &xs {
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
            out.push((top + (bottom - top) * fy).clamp(0.0, 1.0));
        }
    }
    Image::from_pixels(out_w, out_h, img.pitch_mm() * sx, out)
}

/// Area-weighted resize: every output pixel averages the source pixels its
/// footprint covers, weighted by overlap. Preferred over [`resize_bilinear`]
/// when shrinking by more than 2×.
pub fn resize_area(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 || img.width() == 0 || img.height() == 0 {
        return Err(Error::InvalidDimensions(format!(
            "cannot resize {}x{} to {out_w}x{out_h}",
            img.width(),
            img.height()
        )));
    }
    let (sw, sh) = (img.width(), img.height());
    // Per output index: (first source index, overlap weights normalized to 1).
    let weights = |n_out: usize, n_src: usize| -> Vec<(usize, Vec<f64>)> {
        let scale = n_src as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let (a, b) = (i as f64 * scale, (i + 1) as f64 * scale);
                let lo = a.floor() as usize;
                let hi = (b.ceil() as usize).min(n_src);
                let w = (lo..hi).map(|s| (b.min(s as f64 + 1.0) - a.max(s as f64)).max(0.0) / scale).collect();
                (lo, w)
            })
            .collect()
    };
    let xs = weights(out_w, sw);
    let ys = weights(out_h, sh);
    let src = img.pixels();
    let mut rows = vec![0.0f64; out_w * sh];
    for y in 0..sh {
        let row = &src[y * sw..(y + 1) * sw];
        for (x, (lo, w)) in xs.iter().enumerate() {
            rows[y * out_w + x] = w.iter().enumerate().map(|(k, wk)| wk * row[lo + k] as f64).sum();
        }
    }
    let mut out = Vec::with_capacity(out_w * out_h);
    for (lo, w) in &ys {
        for x in 0..out_w {
            let v: f64 = w.iter().enumerate().map(|(k, wk)| wk * rows[(lo + k) * out_w + x]).sum();
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Image::from_pixels(out_w, out_h, img.pitch_mm() * sw as f64 / out_w as f64, out)
}

/// Exact 2×2 block average. Both dimensions must be even.
pub fn downsample2(img: &Image) -> Result<Image> {
    let (w, h) = (img.width(), img.height());
    if w % 2 != 0 || h % 2 != 0 || w == 0 || h == 0 {
        return Err(Error::InvalidDimensions(format!("downsample2 of {w}x{h}")));
    }
    let (ow, oh) = (w / 2, h / 2);
    let src = img.pixels();
    let mut out = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        let r0 = &src[2 * y * w..(2 * y + 1) * w];
        let r1 = &src[(2 * y + 1) * w..(2 * y + 2) * w];
        for x in 0..ow {
            let s = r0[2 * x] as f64 + r0[2 * x + 1] as f64 + r1[2 * x] as f64 + r1[2 * x + 1] as f64;
            out.push((s * 0.25) as f32);
        }
    }
    Image::from_pixels(ow, oh, img.pitch_mm() * 2.0, out)
}

/// 2×2 block reduction for masks: an output bit is set when at least two of
/// its four source bits are set (block mean ≥ 0.5).
pub fn downsample2_mask(mask: &Mask) -> Result<Mask> {
    let (w, h) = (mask.width(), mask.height());
    if w % 2 != 0 || h % 2 != 0 || w == 0 || h == 0 {
        return Err(Error::InvalidDimensions(format!("downsample2 of {w}x{h} mask")));
    }
    let (ow, oh) = (w / 2, h / 2);
    let mut out = Mask::new(ow, oh, mask.frame());
    for y in 0..oh {
        for x in 0..ow {
            let n = [
                mask.get(2 * x, 2 * y),
                mask.get(2 * x + 1, 2 * y),
                mask.get(2 * x, 2 * y + 1),
                mask.get(2 * x + 1, 2 * y + 1),
            ]
            .iter()
            .filter(|&&b| b)
            .count();
            out.set(x, y, n >= 2);
        }
    }
    Ok(out)
}

/// Reflect columns: `c ↔ width - 1 - c`.
pub fn mirror_horizontal(img: &Image) -> Image {
    let w = img.width();
    let mut out = img.clone();
    for row in out.pixels_mut().chunks_mut(w.max(1)) {
        row.reverse();
    }
    out
}

pub fn mirror_mask(mask: &Mask) -> Mask {
    let w = mask.width();
    let mut out = mask.clone();
    for row in out.bits_mut().chunks_mut(w.max(1)) {
        row.reverse();
    }
    out
}
