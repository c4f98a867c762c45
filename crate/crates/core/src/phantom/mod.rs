//! Procedural radial AS-OCT scans with exact ground truth.
//!
//! A scan is 16 B-scans through a common axis. Each carries a conic anterior
//! cornea, a posterior surface a fixed thickness below it, a thin graft line
//! on the posterior surface that sags away from it over detached intervals,
//! bright scleral spur spots placed by an [`EllipseModel`], iris and sclera
//! distractors, and on day-0 visits a gas-bubble meniscus. Multiplicative
//! speckle and a Gaussian blur are applied last.
//!
//! All anatomy constants here are synthetic defaults chosen for plausibility.

mod io;
mod render;

pub use io::{read_scan_dir, write_scan_dir, ScanMeta};
pub(crate) use io::{read_json, write_json};

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::biomarkers::Projection;
use crate::ellipse::{model_spurs, slice_angles, spoke_angle, DepthModel, EllipseModel};
use crate::error::{Error, Result};
use crate::imagecore::{draw_band, CropTransform, Half, Image, Mask};
use crate::preset::{Frame, Geometry, Preset, SLICES_PER_SCAN};
use crate::spur::{SpurPair, SpurSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Visit {
    /// Immediately after surgery: gas bubble, no detachment.
    Day0,
    Day7,
}

/// A detached stretch of graft on one half-slice, as radial distances from
/// the scan axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetachmentInterval {
    pub slice: usize,
    pub half: Half,
    pub r_start_mm: f64,
    pub r_end_mm: f64,
    /// Maximum distance of the detached graft below the posterior cornea.
    pub depth_mm: f64,
}

impl DetachmentInterval {
    pub fn contains(&self, r_mm: f64) -> bool {
        r_mm >= self.r_start_mm && r_mm <= self.r_end_mm
    }

    /// Sag of the detached graft below the posterior surface at radius `r`.
    pub fn sag(&self, r_mm: f64) -> f64 {
        let s = (r_mm - self.r_start_mm) / (self.r_end_mm - self.r_start_mm);
        if (0.0..=1.0).contains(&s) {
            self.depth_mm * 4.0 * s * (1.0 - s)
        } else {
            0.0
        }
    }
}

/// Random en-face detachment regions, sliced into per-spoke intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetachmentSampler {
    /// Inclusive range of region counts on day-7 scans.
    pub regions: [usize; 2],
    /// Angular half-width of a region, degrees.
    pub angular_half_width_deg: [f64; 2],
    /// Radial extent of a region along its central spoke, mm.
    pub radial_width_mm: [f64; 2],
    pub depth_mm: [f64; 2],
    /// Upper bound on sag depth as a fraction of interval width.
    pub max_depth_ratio: f64,
    /// Narrower per-spoke intervals are dropped.
    pub min_width_mm: f64,
}

impl Default for DetachmentSampler {
    fn default() -> Self {
        Self {
            regions: [1, 3],
            angular_half_width_deg: [10.0, 60.0],
            radial_width_mm: [0.8, 3.0],
            depth_mm: [0.2, 0.7],
            max_depth_ratio: 0.4,
            min_width_mm: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetachmentSpec {
    Sampled(DetachmentSampler),
    Listed(Vec<DetachmentInterval>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub preset: Preset,
    pub center_offset_max_mm: f64,
    pub semi_axis_mm: [f64; 2],
    pub spur_depth_mm: [f64; 2],
    pub spur_tilt_max_mm: f64,
    pub anterior_radius_mm: f64,
    pub asphericity: f64,
    pub apex_depth_mm: f64,
    pub thickness_mm: f64,
    pub thickness_jitter_mm: f64,
    pub graft_radius_mm: f64,
    pub detachments: DetachmentSpec,
    /// `Some(true)` forces a day-0 scan, `Some(false)` a day-7 scan, `None`
    /// draws the visit with probability `day0_fraction`.
    pub gas_bubble: Option<bool>,
    pub day0_fraction: f64,
    /// Speckle multiplies every pixel by a uniform factor in `[1 - s, 1 + s]`.
    pub speckle: f64,
    pub blur_sigma_mm: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Desk,
            center_offset_max_mm: 0.5,
            semi_axis_mm: [5.5, 6.5],
            spur_depth_mm: [4.3, 4.7],
            spur_tilt_max_mm: 0.15,
            anterior_radius_mm: 7.8,
            asphericity: -0.3,
            apex_depth_mm: 1.0,
            thickness_mm: 0.55,
            thickness_jitter_mm: 0.03,
            graft_radius_mm: 4.0,
            detachments: DetachmentSpec::Sampled(DetachmentSampler::default()),
            gas_bubble: None,
            day0_fraction: 0.2,
            speckle: 0.3,
            blur_sigma_mm: 0.01,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], positive: bool) -> Result<()> {
    if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() || (positive && r[0] <= 0.0) {
        return Err(Error::InvalidConfig(format!("{name} range [{}, {}] is empty or invalid", r[0], r[1])));
    }
    Ok(())
}

impl PhantomConfig {
    pub fn for_preset(preset: Preset) -> Self {
        Self {
            preset,
            ..Self::default()
        }
    }

    pub fn geometry(&self) -> Geometry {
        self.preset.geometry()
    }

    pub fn validate(&self) -> Result<()> {
        check_range("semi-axis", self.semi_axis_mm, true)?;
        check_range("spur depth", self.spur_depth_mm, true)?;
        if !(self.center_offset_max_mm >= 0.0) || self.center_offset_max_mm >= self.semi_axis_mm[0] {
            return Err(Error::InvalidConfig("center offset must keep the axis inside the spur ring".into()));
        }
        for (name, v) in [
            ("anterior radius", self.anterior_radius_mm),
            ("thickness", self.thickness_mm),
            ("graft radius", self.graft_radius_mm),
            ("apex depth", self.apex_depth_mm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.speckle) || !(self.blur_sigma_mm >= 0.0) || !(0.0..=1.0).contains(&self.day0_fraction) {
            return Err(Error::InvalidConfig("noise or visit parameters out of range".into()));
        }
        if self.graft_radius_mm >= self.semi_axis_mm[0] - self.center_offset_max_mm {
            return Err(Error::InvalidConfig("graft must lie inside the spur ring".into()));
        }
        match &self.detachments {
            DetachmentSpec::Listed(list) => {
                if self.gas_bubble == Some(true) && !list.is_empty() {
                    return Err(Error::InvalidConfig("day-0 scans carry no detachment".into()));
                }
                for iv in list {
                    self.check_interval(iv)?;
                }
            }
            DetachmentSpec::Sampled(s) => {
                check_range("angular half-width", s.angular_half_width_deg, true)?;
                check_range("radial width", s.radial_width_mm, true)?;
                check_range("sag depth", s.depth_mm, true)?;
                if s.regions[0] > s.regions[1] || s.radial_width_mm[0] >= self.graft_radius_mm {
                    return Err(Error::InvalidConfig("detachment sampler ranges are infeasible".into()));
                }
            }
        }
        self.geometry().validate()
    }

    fn check_interval(&self, iv: &DetachmentInterval) -> Result<()> {
        if iv.slice >= SLICES_PER_SCAN {
            return Err(Error::InvalidConfig(format!("slice {} out of range", iv.slice)));
        }
        if !(iv.r_start_mm >= 0.0 && iv.r_start_mm < iv.r_end_mm && iv.r_end_mm <= self.graft_radius_mm) {
            return Err(Error::InvalidConfig(format!(
                "interval [{}, {}] mm lies outside the corneal extent [0, {}] mm",
                iv.r_start_mm, iv.r_end_mm, self.graft_radius_mm
            )));
        }
        if !(iv.depth_mm > 0.0 && iv.depth_mm.is_finite()) {
            return Err(Error::InvalidConfig("sag depth must be positive".into()));
        }
        Ok(())
    }
}

/// Anatomy of one scan, drawn once from the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anatomy {
    pub anterior_radius_mm: f64,
    pub asphericity: f64,
    pub apex_depth_mm: f64,
    pub thickness_mm: f64,
    pub graft_radius_mm: f64,
    pub pupil_radius_mm: f64,
    pub bubble: Option<Bubble>,
}

/// Lower boundary of a gas bubble: `z = z_post(0) + drop + curvature·ρ²` for `ρ ≤ radius`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bubble {
    pub drop_mm: f64,
    pub radius_mm: f64,
    pub curvature: f64,
}

impl Anatomy {
    /// Depth of the anterior corneal surface at radius `r`.
    pub fn anterior(&self, r: f64) -> f64 {
        let rr = self.anterior_radius_mm;
        let k = ((1.0 + self.asphericity) * r * r / (rr * rr)).min(1.0);
        self.apex_depth_mm + r * r / (rr * (1.0 + (1.0 - k).sqrt()))
    }

    /// Depth of the posterior corneal surface at radius `r`.
    pub fn posterior(&self, r: f64) -> f64 {
        self.anterior(r) + self.thickness_mm + 0.25 * (r / 6.0).powi(2)
    }
}

/// Exact truth of a generated scan.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanTruth {
    pub model: EllipseModel,
    pub spurs: SpurSet,
    /// Merged per-half intervals.
    pub intervals: Vec<DetachmentInterval>,
    /// Full-resolution band masks, one per slice.
    pub masks: Vec<Mask>,
}

impl ScanTruth {
    pub fn intervals_on(&self, slice: usize, half: Half) -> impl Iterator<Item = &DetachmentInterval> {
        self.intervals.iter().filter(move |iv| iv.slice == slice && iv.half == half)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadialScan {
    pub preset: Preset,
    pub seed: u64,
    pub visit: Visit,
    pub angles: Vec<f64>,
    pub slices: Vec<Image>,
    pub truth: Option<ScanTruth>,
}

impl RadialScan {
    pub fn geometry(&self) -> Geometry {
        self.preset.geometry()
    }

    pub fn truth(&self) -> Result<&ScanTruth> {
        self.truth.as_ref().ok_or(Error::NoGroundTruth)
    }

    pub fn validate(&self) -> Result<()> {
        if self.slices.len() != SLICES_PER_SCAN || self.angles.len() != SLICES_PER_SCAN {
            return Err(Error::IncompleteScan(format!("{} slices, expected {SLICES_PER_SCAN}", self.slices.len())));
        }
        let g = self.geometry();
        if let Some(s) = self.slices.iter().find(|s| (s.width(), s.height()) != (g.slice_width, g.slice_height)) {
            return Err(Error::InvalidDimensions(format!(
                "slice is {}x{}, preset {} expects {}x{}",
                s.width(),
                s.height(),
                g.preset,
                g.slice_width,
                g.slice_height
            )));
        }
        Ok(())
    }
}

/// Intersections of the spur ring with the slice at `angle`, in full-res px.
pub fn spur_truth(model: &EllipseModel, angle: f64, geom: &Geometry) -> Result<SpurPair> {
    model_spurs(model, angle, geom).map_err(|e| match e {
        Error::NoIntersection { angle_rad } => {
            Error::InfeasibleGeometry(format!("slice at {angle_rad:.4} rad misses the spur ellipse"))
        }
        other => other,
    })
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn sample_model(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Result<EllipseModel> {
    let off = cfg.center_offset_max_mm * rng.random::<f64>().sqrt();
    let dir = rng.random_range(0.0..2.0 * PI);
    let tilt = cfg.spur_tilt_max_mm * rng.random::<f64>().sqrt();
    let tdir = rng.random_range(0.0..2.0 * PI);
    EllipseModel::new(
        off * dir.cos(),
        off * dir.sin(),
        uniform(rng, cfg.semi_axis_mm),
        uniform(rng, cfg.semi_axis_mm),
        rng.random_range(0.0..PI),
        DepthModel {
            c0: uniform(rng, cfg.spur_depth_mm),
            c1: tilt * tdir.cos(),
            c2: tilt * tdir.sin(),
        },
    )
}

/// Smallest absolute angle between two directions.
fn angle_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

fn sample_intervals(s: &DetachmentSampler, graft_radius: f64, rng: &mut ChaCha8Rng) -> Vec<DetachmentInterval> {
    let n = rng.random_range(s.regions[0]..=s.regions[1]);
    let angles = slice_angles();
    let mut out = Vec::new();
    for _ in 0..n {
        let center = rng.random_range(0.0..2.0 * PI);
        let half_width = uniform(rng, s.angular_half_width_deg).to_radians();
        let width = uniform(rng, s.radial_width_mm).min(graft_radius - 0.2);
        let start = rng.random_range(0.2..=graft_radius - width);
        let (rc, hw) = (start + width / 2.0, width / 2.0);
        let depth = uniform(rng, s.depth_mm);
        for (i, &a) in angles.iter().enumerate() {
            for half in Half::BOTH {
                let gap = angle_gap(spoke_angle(a, half), center);
                if gap >= half_width {
                    continue;
                }
                let f = (1.0 - (gap / half_width).powi(2)).sqrt();
                let w = 2.0 * hw * f;
                if w < s.min_width_mm {
                    continue;
                }
                out.push(DetachmentInterval {
                    slice: i,
                    half,
                    r_start_mm: rc - hw * f,
                    r_end_mm: rc + hw * f,
                    depth_mm: (depth * f).min(s.max_depth_ratio * w),
                });
            }
        }
    }
    out
}

/// Merge overlapping intervals per half-slice; a merged interval keeps the
/// largest sag depth. Output is sorted by slice, half, start.
pub fn merge_intervals(mut list: Vec<DetachmentInterval>) -> Vec<DetachmentInterval> {
    list.sort_by(|a, b| {
        (a.slice, a.half)
            .cmp(&(b.slice, b.half))
            .then(a.r_start_mm.total_cmp(&b.r_start_mm))
    });
    let mut out: Vec<DetachmentInterval> = Vec::new();
    for iv in list {
        match out.last_mut() {
            Some(last) if last.slice == iv.slice && last.half == iv.half && iv.r_start_mm <= last.r_end_mm => {
                last.r_end_mm = last.r_end_mm.max(iv.r_end_mm);
                last.depth_mm = last.depth_mm.max(iv.depth_mm);
            }
            _ => out.push(iv),
        }
    }
    out
}

/// Polyline of the detached graft over `iv`, in full-res slice px.
pub fn detachment_curve(anatomy: &Anatomy, iv: &DetachmentInterval, geom: &Geometry) -> Vec<(f64, f64)> {
    let pitch = geom.pitch_mm();
    let axis = geom.axis_column();
    let sign = match iv.half {
        Half::Inferior => -1.0,
        Half::Superior => 1.0,
    };
    let n = ((iv.r_end_mm - iv.r_start_mm) / pitch).ceil().max(1.0) as usize;
    (0..=n)
        .map(|k| {
            let r = iv.r_start_mm + (iv.r_end_mm - iv.r_start_mm) * k as f64 / n as f64;
            let z = anatomy.posterior(r) + iv.sag(r);
            (axis + sign * r / pitch, z / pitch)
        })
        .collect()
}

/// Analytic arc length of the detached curve, in full-res px.
pub fn curve_length_px(anatomy: &Anatomy, iv: &DetachmentInterval, geom: &Geometry) -> f64 {
    // The parametrization is smooth; a fine polyline converges to the arc length.
    let pitch = geom.pitch_mm();
    let n = 4000;
    let mut len = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    for k in 0..=n {
        let r = iv.r_start_mm + (iv.r_end_mm - iv.r_start_mm) * k as f64 / n as f64;
        let p = (r / pitch, (anatomy.posterior(r) + iv.sag(r)) / pitch);
        if let Some(q) = prev {
            len += (p.0 - q.0).hypot(p.1 - q.1);
        }
        prev = Some(p);
    }
    len
}

fn sample_anatomy(cfg: &PhantomConfig, day0: bool, rng: &mut ChaCha8Rng) -> Anatomy {
    let jitter = cfg.thickness_jitter_mm;
    let thickness = cfg.thickness_mm + if jitter > 0.0 { rng.random_range(-jitter..jitter) } else { 0.0 };
    let pupil = rng.random_range(1.4..2.0);
    let bubble = if day0 {
        Some(Bubble {
            drop_mm: rng.random_range(0.6..1.4),
            radius_mm: rng.random_range(2.5..4.0),
            curvature: rng.random_range(0.02..0.08),
        })
    } else {
        None
    };
    Anatomy {
        anterior_radius_mm: cfg.anterior_radius_mm,
        asphericity: cfg.asphericity,
        apex_depth_mm: cfg.apex_depth_mm,
        thickness_mm: thickness,
        graft_radius_mm: cfg.graft_radius_mm,
        pupil_radius_mm: pupil,
        bubble,
    }
}

/// Everything about a scan except its rendered pixels.
#[derive(Clone, Debug)]
pub struct ScanPlan {
    pub visit: Visit,
    pub anatomy: Anatomy,
    pub model: EllipseModel,
    pub spurs: SpurSet,
    pub intervals: Vec<DetachmentInterval>,
}

/// Draw the scan's anatomy, spur ring and detachments.
pub fn plan_scan(cfg: &PhantomConfig, seed: u64) -> Result<ScanPlan> {
    cfg.validate()?;
    let geom = cfg.geometry();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let day0 = match cfg.gas_bubble {
        Some(b) => b,
        None => rng.random::<f64>() < cfg.day0_fraction,
    };
    let model = sample_model(cfg, &mut rng)?;
    let anatomy = sample_anatomy(cfg, day0, &mut rng);
    let raw = if day0 {
        Vec::new()
    } else {
        match &cfg.detachments {
            DetachmentSpec::Listed(list) => list.clone(),
            DetachmentSpec::Sampled(s) => sample_intervals(s, cfg.graft_radius_mm, &mut rng),
        }
    };
    let intervals = merge_intervals(raw);
    let pairs = slice_angles()
        .iter()
        .map(|&a| spur_truth(&model, a, &geom))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScanPlan {
        visit: if day0 { Visit::Day0 } else { Visit::Day7 },
        anatomy,
        model,
        spurs: SpurSet::from_pairs(pairs, Frame::FullRes)?,
        intervals,
    })
}

/// Generate one scan. Identical `(config, seed)` give bit-identical output.
pub fn generate_scan(cfg: &PhantomConfig, seed: u64) -> Result<RadialScan> {
    let plan = plan_scan(cfg, seed)?;
    let geom = cfg.geometry();
    let angles = slice_angles();
    let mut slices = Vec::with_capacity(SLICES_PER_SCAN);
    let mut masks = Vec::with_capacity(SLICES_PER_SCAN);
    for (i, _) in angles.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        slices.push(render::render_slice(cfg, &geom, &plan, i, &mut rng)?);
        masks.push(truth_mask(&plan.anatomy, &plan.intervals, i, &geom)?);
    }
    Ok(RadialScan {
        preset: cfg.preset,
        seed,
        visit: plan.visit,
        angles,
        slices,
        truth: Some(ScanTruth {
            model: plan.model,
            spurs: plan.spurs,
            intervals: plan.intervals,
            masks,
        }),
    })
}

/// Band mask over every detached curve of one slice.
pub fn truth_mask(anatomy: &Anatomy, intervals: &[DetachmentInterval], slice: usize, geom: &Geometry) -> Result<Mask> {
    let mut mask = Mask::new(geom.slice_width, geom.slice_height, crate::imagecore::MaskFrame::FullRes);
    for iv in intervals.iter().filter(|iv| iv.slice == slice) {
        let band = draw_band(geom.slice_width, geom.slice_height, &detachment_curve(anatomy, iv, geom), geom.band_width)?;
        mask = mask.union(&band)?;
    }
    Ok(mask)
}

/// Columns of a half-crop whose source columns fall inside a detachment interval.
///
/// The side of each source column is decided by its own position relative to
/// the scan axis, so a crop centered off-axis is handled exactly.
pub fn truth_projection(truth: &ScanTruth, transform: &CropTransform, width: usize, geom: &Geometry) -> Result<Projection> {
    let half = transform
        .half
        .ok_or_else(|| Error::Frame("truth projection needs a half-crop transform".into()))?;
    let slice = transform.slice;
    let pitch = geom.pitch_mm();
    let axis = geom.axis_column();
    let mut bits = vec![false; width];
    for (c, bit) in bits.iter_mut().enumerate() {
        *bit = transform.source_columns(c).any(|x| {
            let u = x as f64 - axis;
            let side = if u < 0.0 { Half::Inferior } else { Half::Superior };
            let r = u.abs() * pitch;
            truth.intervals_on(slice, side).any(|iv| iv.contains(r))
        });
    }
    Ok(Projection {
        bits,
        pitch_mm: pitch * transform.downsample as f64,
        slice,
        half,
    })
}

#[cfg(test)]
mod tests;
