use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{PhantomConfig, ScanPlan};
use crate::error::Result;
use crate::imagecore::{Half, Image};
use crate::preset::Geometry;

const BACKGROUND: f64 = 0.03;
const STROMA: f64 = 0.32;
const EPITHELIUM: f64 = 0.35;
const ENDOTHELIUM: f64 = 0.12;
const SCLERA: f64 = 0.25;
const IRIS: f64 = 0.22;
const SPUR: f64 = 0.45;
const GRAFT: f64 = 0.55;
const MENISCUS: f64 = 0.5;

/// Fraction of the pixel row `[y - 0.5, y + 0.5]` inside `[top, bottom]`.
fn coverage(y: f64, top: f64, bottom: f64) -> f64 {
    ((y + 0.5).min(bottom) - (y - 0.5).max(top)).clamp(0.0, 1.0)
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Add a vertical Gaussian profile centered on row `yc`.
fn add_line(col: &mut [f64], yc: f64, sigma: f64, amp: f64) {
    let reach = 4.0 * sigma;
    let lo = (yc - reach).floor().max(0.0) as usize;
    let hi = ((yc + reach).ceil().max(0.0) as usize).min(col.len().saturating_sub(1));
    for (y, v) in col.iter_mut().enumerate().take(hi + 1).skip(lo) {
        let d = y as f64 - yc;
        *v += amp * (-d * d / (2.0 * sigma * sigma)).exp();
    }
}

fn add_layer(col: &mut [f64], top: f64, bottom: f64, amp: f64) {
    if !(bottom > top) {
        return;
    }
    let lo = (top - 1.0).floor().max(0.0) as usize;
    let hi = ((bottom + 1.0).ceil().max(0.0) as usize).min(col.len().saturating_sub(1));
    for (y, v) in col.iter_mut().enumerate().take(hi + 1).skip(lo) {
        *v += amp * coverage(y as f64, top, bottom);
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with edge clamping.
fn blur(data: &mut [f64], w: usize, h: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let sx = (x as i64 + j as i64 - r).clamp(0, w as i64 - 1) as usize;
                acc += kv * data[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let sy = (y as i64 + j as i64 - r).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[sy * w + x];
            }
            data[y * w + x] = acc;
        }
    }
}

pub(super) fn render_slice(
    cfg: &PhantomConfig,
    geom: &Geometry,
    plan: &ScanPlan,
    slice: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Image> {
    let (w, h) = (geom.slice_width, geom.slice_height);
    let pitch = geom.pitch_mm();
    let axis = geom.axis_column();
    let an = &plan.anatomy;
    let pair = plan.spurs.complete_pairs()?[slice];
    let px = |mm: f64| mm / pitch;
    // Thin structures stay at least about a pixel wide at coarse presets.
    let thin = |mm: f64| px(mm).max(0.6);

    let spur_sigma = px(0.1);
    let mut data = vec![0.0f64; w * h];
    let mut col = vec![0.0f64; h];
    for x in 0..w {
        col.iter_mut().for_each(|v| *v = BACKGROUND);
        let u = x as f64 - axis;
        let half = if u < 0.0 { Half::Inferior } else { Half::Superior };
        let r = u.abs() * pitch;
        let spur = match half {
            Half::Inferior => pair.inferior,
            Half::Superior => pair.superior,
        };
        let (r_spur, z_spur) = ((spur.0 - axis).abs() * pitch, spur.1 * pitch);

        let z_ant = an.anterior(r);
        let z_post = an.posterior(r);
        add_layer(&mut col, px(z_ant), px(z_post), STROMA);
        add_line(&mut col, px(z_ant), thin(0.015), EPITHELIUM);
        add_line(&mut col, px(z_post), thin(0.015), ENDOTHELIUM);

        let ws = smoothstep((r - (r_spur - 0.5)) / 0.6);
        if ws > 0.0 {
            let bottom = z_spur + 0.3 + 0.25 * (r - r_spur).max(0.0);
            add_layer(&mut col, px(z_ant), px(bottom), SCLERA * ws);
        }

        if r >= an.pupil_radius_mm && r <= r_spur - 0.15 {
            let zc = z_spur + 0.35 + 0.06 * (r_spur - r);
            let t = 0.35 * smoothstep((r - an.pupil_radius_mm) / 0.4);
            let texture = 0.85 + 0.15 * (9.0 * r).sin();
            add_layer(&mut col, px(zc - t / 2.0), px(zc + t / 2.0), IRIS * texture);
        }

        if r <= an.graft_radius_mm {
            let sag = plan
                .intervals
                .iter()
                .filter(|iv| iv.slice == slice && iv.half == half && iv.contains(r))
                .map(|iv| iv.sag(r))
                .fold(0.0, f64::max);
            add_line(&mut col, px(z_post + sag), thin(0.02), GRAFT);
        }

        if let Some(b) = an.bubble {
            if r <= b.radius_mm {
                let zb = an.posterior(0.0) + b.drop_mm + b.curvature * r * r;
                add_line(&mut col, px(zb), thin(0.025), MENISCUS);
            }
        }

        for s in [pair.inferior, pair.superior] {
            let dx = x as f64 - s.0;
            if dx.abs() <= 4.0 * spur_sigma {
                let gx = (-dx * dx / (2.0 * spur_sigma * spur_sigma)).exp();
                add_line(&mut col, s.1, spur_sigma, SPUR * gx);
            }
        }

        for (y, &v) in col.iter().enumerate() {
            data[y * w + x] = v.min(1.0);
        }
    }

    if cfg.speckle > 0.0 {
        let s = cfg.speckle;
        for v in data.iter_mut() {
            *v *= rng.random_range(1.0 - s..=1.0 + s);
        }
    }
    blur(&mut data, w, h, cfg.blur_sigma_mm / pitch);
    let pixels = data.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    Image::from_pixels(w, h, pitch, pixels)
}
