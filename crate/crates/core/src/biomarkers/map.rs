use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::Projection;
use crate::ellipse::{slice_angle, spoke_angle};
use crate::error::{Error, Result};
use crate::imagecore::Half;
use crate::preset::SLICES_PER_SCAN;

const SPOKES: usize = 2 * SLICES_PER_SCAN;
const ARC_STEPS: usize = 6;

/// One half-slice placed on its spoke.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spoke {
    pub slice: usize,
    pub half: Half,
    /// Polar angle in the en-face plane.
    pub angle: f64,
    pub projection: Projection,
    /// Radial detachment intervals in mm.
    pub intervals: Vec<(f64, f64)>,
}

/// Polar composite of the 32 half-slice projections, ordered by spoke angle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetachmentMap {
    pub spokes: Vec<Spoke>,
    pub pitch_mm: f64,
    /// Outer radius covered by a projection, mm.
    pub radius_mm: f64,
}

/// A filled polygon in en-face mm coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Sector {
    pub polygon: Vec<(f64, f64)>,
}

fn spoke_index(slice: usize, half: Half) -> usize {
    match half {
        Half::Superior => slice,
        Half::Inferior => slice + SLICES_PER_SCAN,
    }
}

pub fn build_map(projections: &[Projection]) -> Result<DetachmentMap> {
    if projections.len() != SPOKES {
        return Err(Error::IncompleteScan(format!("{} projections, expected {SPOKES}", projections.len())));
    }
    let (len, pitch) = (projections[0].bits.len(), projections[0].pitch_mm);
    let mut slots: Vec<Option<Spoke>> = vec![None; SPOKES];
    for p in projections {
        if p.bits.len() != len || p.pitch_mm != pitch {
            return Err(Error::Shape("projections differ in width or pitch".into()));
        }
        if p.slice >= SLICES_PER_SCAN {
            return Err(Error::IncompleteScan(format!("slice index {} out of range", p.slice)));
        }
        let j = spoke_index(p.slice, p.half);
        if slots[j].is_some() {
            return Err(Error::IncompleteScan(format!("duplicate projection for slice {} {}", p.slice, p.half.name())));
        }
        slots[j] = Some(Spoke {
            slice: p.slice,
            half: p.half,
            angle: spoke_angle(slice_angle(p.slice), p.half),
            intervals: p.radial_intervals(),
            projection: p.clone(),
        });
    }
    let spokes = slots.into_iter().map(|s| s.expect("every slot filled")).collect();
    Ok(DetachmentMap {
        spokes,
        pitch_mm: pitch,
        radius_mm: len as f64 * pitch,
    })
}

fn polar(r: f64, theta: f64) -> (f64, f64) {
    (r * theta.cos(), r * theta.sin())
}

/// Region bounded by radii `r(θ)` interpolated linearly between two angles.
fn band_polygon(t0: f64, t1: f64, inner: (f64, f64), outer: (f64, f64)) -> Sector {
    let lerp = |a: f64, b: f64, s: f64| a + (b - a) * s;
    let mut polygon = Vec::with_capacity(2 * (ARC_STEPS + 1));
    for k in 0..=ARC_STEPS {
        let s = k as f64 / ARC_STEPS as f64;
        polygon.push(polar(lerp(outer.0, outer.1, s), lerp(t0, t1, s)));
    }
    for k in (0..=ARC_STEPS).rev() {
        let s = k as f64 / ARC_STEPS as f64;
        polygon.push(polar(lerp(inner.0, inner.1, s), lerp(t0, t1, s)));
    }
    Sector { polygon }
}

fn overlaps(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 < b.1 && b.0 < a.1
}

impl DetachmentMap {
    /// Filled regions. Intervals that overlap an interval on the neighboring
    /// spoke are joined to it by a band whose edges interpolate the interval
    /// endpoints; unmatched sides close with a half-width sector.
    pub fn sectors(&self) -> Vec<Sector> {
        let step = 2.0 * PI / SPOKES as f64;
        let mut out = Vec::new();
        for j in 0..SPOKES {
            let here = &self.spokes[j];
            let next = &self.spokes[(j + 1) % SPOKES];
            let prev = &self.spokes[(j + SPOKES - 1) % SPOKES];
            let t = j as f64 * step;
            for &iv in &here.intervals {
                for &jv in &next.intervals {
                    if overlaps(iv, jv) {
                        out.push(band_polygon(t, t + step, (iv.0, jv.0), (iv.1, jv.1)));
                    }
                }
                if !next.intervals.iter().any(|&jv| overlaps(iv, jv)) {
                    out.push(band_polygon(t, t + step / 2.0, (iv.0, iv.0), (iv.1, iv.1)));
                }
                if !prev.intervals.iter().any(|&pv| overlaps(iv, pv)) {
                    out.push(band_polygon(t - step / 2.0, t, (iv.0, iv.0), (iv.1, iv.1)));
                }
            }
        }
        out
    }

    /// Set columns of every spoke, concatenated in spoke order.
    pub fn column_sets(&self) -> Vec<bool> {
        self.spokes.iter().flat_map(|s| s.projection.bits.iter().copied()).collect()
    }
}

fn path_data(polygon: &[(f64, f64)], scale: f64, c: f64) -> String {
    let mut d = String::new();
    for (k, &(x, y)) in polygon.iter().enumerate() {
        let cmd = if k == 0 { 'M' } else { 'L' };
        let _ = write!(d, "{cmd}{:.2},{:.2} ", c + x * scale, c - y * scale);
    }
    d.push('Z');
    d
}

/// Render the map as an SVG document: model regions filled red, the optional
/// truth map outlined in dashed green.
pub fn render_svg(map: &DetachmentMap, truth: Option<&DetachmentMap>) -> String {
    let size = 480.0;
    let c = size / 2.0;
    let scale = (size / 2.0 - 20.0) / map.radius_mm.max(1e-9);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    let _ = writeln!(s, r#"<rect width="{size}" height="{size}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r##"<circle cx="{c}" cy="{c}" r="{:.2}" fill="none" stroke="#888" stroke-width="1"/>"##,
        map.radius_mm * scale
    );
    let _ = writeln!(s, r##"<g stroke="#ddd" stroke-width="0.5">"##);
    for spoke in &map.spokes {
        let (x, y) = polar(map.radius_mm, spoke.angle);
        let _ = writeln!(
            s,
            r#"<line x1="{c}" y1="{c}" x2="{:.2}" y2="{:.2}"/>"#,
            c + x * scale,
            c - y * scale
        );
    }
    s.push_str("</g>\n");
    let _ = writeln!(s, r##"<g id="model" fill="#d62728" stroke="none" opacity="0.8">"##);
    for sector in map.sectors() {
        let _ = writeln!(s, r#"<path d="{}"/>"#, path_data(&sector.polygon, scale, c));
    }
    s.push_str("</g>\n");
    if let Some(t) = truth {
        let _ = writeln!(
            s,
            r##"<g id="truth" fill="none" stroke="#2ca02c" stroke-width="1.5" stroke-dasharray="4 3">"##
        );
        for sector in t.sectors() {
            let _ = writeln!(s, r#"<path d="{}"/>"#, path_data(&sector.polygon, scale, c));
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}
